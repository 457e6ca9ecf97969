"""Multi-run harnesses: the alpha ablation and the SiD/SiDA/SiD2A convergence comparison.

Every cell is one independent training run. Failures are recorded in the
cell rather than aborting the sweep. Results are ordered by (mode, alpha,
seed) regardless of worker count.
"""

from __future__ import annotations

import csv
import io
import json
import statistics
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import torch
from scipy.stats import binomtest

from . import checkpoint as ckpt
from .config import TrainConfig, from_dict
from .plots import line_chart
from .schedule import ConfigError
from .trainer import evaluate, init_sid2a, run_training

MODE_ORDER = {"sid": 0, "sida": 1, "sid2a": 2}
SWEEP_COLUMNS = ["mode", "alpha", "seed", "images_seen", "energy_distance", "is_final", "error"]


@dataclass
class CellResult:
    mode: str
    alpha: float
    seed: int
    trajectory: list = field(default_factory=list)  # [(images_seen, metric)], final row last
    final: Optional[float] = None
    noise: Optional[float] = None
    error: Optional[str] = None
    run_dir: Optional[str] = None
    seconds: Optional[float] = None  # wall time of the run, excluding noise estimation

    @property
    def initial(self) -> Optional[float]:
        return self.trajectory[0][1] if self.trajectory else None

    def to_dict(self) -> dict:
        return asdict(self)


def evaluation_noise(state, n: int, repeats: int = 5) -> float:
    """Std of the metric across independent evaluation draws of one generator."""
    vals = [evaluate(state, n, seed_offset=k) for k in range(1, repeats + 1)]
    return statistics.stdev(vals)


def run_cell(cfg_dict: dict, out_dir: Optional[str] = None, noise_repeats: int = 0, sid_checkpoint: Optional[str] = None) -> CellResult:
    torch.set_num_threads(1)
    cfg = from_dict(cfg_dict)
    cell = CellResult(cfg.train.mode, float(cfg.loss.alpha), int(cfg.train.seed), run_dir=out_dir)
    t0 = time.perf_counter()
    try:
        state = init_sid2a(cfg, sid_checkpoint) if sid_checkpoint else None
        res = run_training(cfg, out_dir, state=state)
        cell.seconds = time.perf_counter() - t0
        cell.trajectory = [
            (r["images_seen"], r["energy_distance"]) for r in res.rows if r["energy_distance"] is not None
        ]
        cell.final = res.final_metric
        if noise_repeats:
            cell.noise = evaluation_noise(res.state, cfg.eval.final_samples, noise_repeats)
    except (ConfigError, RuntimeError, ValueError, OSError) as e:
        cell.error = f"{type(e).__name__}: {e}"
    return cell


def _sort_key(c: CellResult):
    return (MODE_ORDER.get(c.mode, 99), c.alpha, c.seed)


def _run_all(jobs: list[tuple], workers: int) -> list[CellResult]:
    if workers <= 1:
        return [run_cell(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_cell, *zip(*jobs)))


def _cell_dir(root, mode, alpha, seed, idx) -> Optional[str]:
    if root is None:
        return None
    return str(Path(root) / f"{idx:03d}-{mode}-a{alpha:g}-s{seed}")


def ablate_alpha(
    base_cfg: TrainConfig,
    alphas: Sequence[float],
    seeds: Sequence[int],
    workers: int = 1,
    out_root=None,
    noise_repeats: int = 0,
) -> list[CellResult]:
    """Same config, varying only alpha (and the paired seed)."""
    if not alphas:
        raise ConfigError("sweep.alphas: must be nonempty")
    if not seeds:
        raise ConfigError("sweep.seeds: must be nonempty")
    jobs = []
    for i, (a, s) in enumerate((a, s) for a in alphas for s in seeds):
        cfg = base_cfg.replace(**{"loss.alpha": float(a), "train.seed": int(s)})
        jobs.append((cfg.to_dict(), _cell_dir(out_root, cfg.train.mode, a, s, i), noise_repeats, None))
    return sorted(_run_all(jobs, workers), key=_sort_key)


def first_reach(trajectory, threshold: float, n1: int = 0) -> Optional[int]:
    """Generator-seen samples (images_seen - n1, floored at 0) when metric first <= threshold."""
    for images, metric in trajectory:
        if metric <= threshold:
            return max(images - n1, 0)
    return None


@dataclass
class ConvergenceReport:
    threshold: dict  # seed -> threshold used
    reach: dict  # mode -> {seed: generator-seen samples or None}
    cells: list
    ratio_sid_over_sida: dict = field(default_factory=dict)  # seed -> first-reach ratio
    median_ratio: Optional[float] = None
    # sid's full generator-seen budget (the samples that produced its final
    # metric) over sida's first reach, per seed
    budget_ratio: dict = field(default_factory=dict)
    median_budget_ratio: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "threshold": {str(k): v for k, v in self.threshold.items()},
            "reach": {m: {str(k): v for k, v in d.items()} for m, d in self.reach.items()},
            "ratio_sid_over_sida": {str(k): v for k, v in self.ratio_sid_over_sida.items()},
            "median_ratio": self.median_ratio,
            "budget_ratio": {str(k): v for k, v in self.budget_ratio.items()},
            "median_budget_ratio": self.median_budget_ratio,
            "cells": [c.to_dict() for c in self.cells],
        }


def compare_convergence(
    cfg: TrainConfig,
    modes: Sequence[str],
    seeds: Sequence[int],
    threshold: Optional[float] = None,
    workers: int = 1,
    out_root=None,
    noise_repeats: int = 0,
) -> ConvergenceReport:
    """Per-mode samples-to-threshold.

    With ``threshold=None`` each seed uses the final metric of its own sid
    run. sid2a cells warm-start from the sid run of the same seed.
    """
    modes = list(modes)
    if not modes or not seeds:
        raise ConfigError("sweep.modes/sweep.seeds: must be nonempty")
    bad = [m for m in modes if m not in MODE_ORDER]
    if bad:
        raise ConfigError(f"sweep.modes: unknown mode {bad[0]!r}")
    need_sid = "sid2a" in modes or threshold is None
    tmp = None
    if out_root is None and "sid2a" in modes:
        tmp = tempfile.TemporaryDirectory(prefix="sida-compare-")
        out_root = tmp.name
    try:
        first = [m for m in ("sid", "sida") if m in modes or (m == "sid" and need_sid)]
        jobs = []
        for i, (m, s) in enumerate((m, s) for m in first for s in seeds):
            c = cfg.replace(**{"train.mode": m, "train.seed": int(s), "train.sid_checkpoint": None})
            jobs.append((c.to_dict(), _cell_dir(out_root, m, c.loss.alpha, s, i), noise_repeats, None))
        cells = _run_all(jobs, workers)
        if "sid2a" in modes:
            sid_cells = {c.seed: c for c in cells if c.mode == "sid"}
            jobs = []
            for i, s in enumerate(seeds):
                src = sid_cells[int(s)]
                c = cfg.replace(**{"train.mode": "sid2a", "train.seed": int(s), "train.sid_checkpoint": None})
                d = _cell_dir(out_root, "sid2a", c.loss.alpha, s, len(cells) + i)
                if src.error or src.run_dir is None:
                    cells.append(CellResult("sid2a", c.loss.alpha, int(s), error=f"source sid run failed: {src.error}"))
                    continue
                jobs.append((c.to_dict(), d, noise_repeats, str(Path(src.run_dir) / "final.ckpt")))
            cells += _run_all(jobs, workers)
        cells = [c for c in cells if c.mode in modes]
    finally:
        if tmp is not None:
            tmp.cleanup()
    cells.sort(key=_sort_key)
    if threshold is None:
        sid_final = {c.seed: c.final for c in cells_for(cells, "sid")} if "sid" in modes else {}
        if not sid_final:
            raise ConfigError("sweep.threshold: required when sid is not among the modes")
        thr = {int(s): sid_final.get(int(s)) for s in seeds}
    else:
        thr = {int(s): float(threshold) for s in seeds}
    reach = {m: {} for m in modes}
    for c in cells:
        t = thr.get(c.seed)
        reach[c.mode][c.seed] = None if (c.error or t is None) else first_reach(c.trajectory, t, cfg.train.n1)
    report = ConvergenceReport(thr, reach, cells)
    if "sid" in modes and "sida" in modes:
        for s in map(int, seeds):
            a, b = reach["sid"].get(s), reach["sida"].get(s)
            if a is not None and b:
                report.ratio_sid_over_sida[s] = a / b
        if report.ratio_sid_over_sida:
            report.median_ratio = statistics.median(report.ratio_sid_over_sida.values())
        used = max(cfg.train.budget - cfg.train.n1, 0)
        for s in map(int, seeds):
            b = reach["sida"].get(s)
            if b:
                report.budget_ratio[s] = used / b
        if report.budget_ratio:
            report.median_budget_ratio = statistics.median(report.budget_ratio.values())
    return report


def cells_for(cells, mode: str) -> list[CellResult]:
    return [c for c in cells if c.mode == mode and c.error is None]


def sign_test(wins: int, n: int) -> float:
    """One-sided p-value of ``wins`` successes out of ``n`` fair coin flips."""
    if n == 0:
        return 1.0
    return binomtest(wins, n, 0.5, alternative="greater").pvalue


def median_final(cells, mode: str, alpha: Optional[float] = None) -> Optional[float]:
    vals = [c.final for c in cells_for(cells, mode) if alpha is None or c.alpha == alpha]
    return statistics.median(vals) if vals else None


# -- outputs ------------------------------------------------------------------


def results_csv(cells: list[CellResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for c in cells:
        if c.error:
            w.writerow([c.mode, repr(c.alpha), c.seed, "", "", "", c.error])
            continue
        for i, (images, metric) in enumerate(c.trajectory):
            w.writerow([c.mode, repr(c.alpha), c.seed, images, repr(metric), int(i == len(c.trajectory) - 1), ""])
    return buf.getvalue()


def ablation_summary(cells: list[CellResult]) -> dict:
    alphas = sorted({c.alpha for c in cells})
    modes = sorted({c.mode for c in cells}, key=lambda m: MODE_ORDER.get(m, 99))
    out = {}
    for m in modes:
        out[m] = {repr(a): median_final(cells, m, a) for a in alphas}
    return {
        "median_final": out,
        "errors": [{"mode": c.mode, "alpha": c.alpha, "seed": c.seed, "error": c.error} for c in cells if c.error],
    }


def _mean_curve(cells: list[CellResult]):
    """Median trajectory across seeds, aligned by evaluation index."""
    good = [c for c in cells if c.error is None and c.trajectory]
    if not good:
        return [], []
    n = min(len(c.trajectory) for c in good)
    xs = [good[0].trajectory[i][0] for i in range(n)]
    ys = [statistics.median(c.trajectory[i][1] for c in good) for i in range(n)]
    return xs, ys


def ablation_chart(cells: list[CellResult]) -> str:
    series = []
    for a in sorted({c.alpha for c in cells}):
        xs, ys = _mean_curve([c for c in cells if c.alpha == a])
        series.append((f"alpha={a:g}", xs, ys))
    return line_chart(series, title="alpha ablation (median over seeds)")


def convergence_chart(report: ConvergenceReport) -> str:
    series = []
    modes = sorted({c.mode for c in report.cells}, key=lambda m: MODE_ORDER.get(m, 99))
    for m in modes:
        xs, ys = _mean_curve([c for c in report.cells if c.mode == m])
        series.append((m, xs, ys))
    thr = [t for t in report.threshold.values() if t is not None]
    hline = statistics.median(thr) if thr else None
    return line_chart(series, title="convergence (median over seeds)", hline=hline)


def write_outputs(out_dir, name: str, cells: list[CellResult], summary: dict, svg: str) -> None:
    out_dir = Path(out_dir)
    ckpt.atomic_write_text(out_dir / f"{name}.csv", results_csv(cells))
    ckpt.atomic_write_text(out_dir / f"{name}.json", json.dumps(summary, sort_keys=True, indent=2) + "\n")
    ckpt.atomic_write_text(out_dir / f"{name}.svg", svg)
