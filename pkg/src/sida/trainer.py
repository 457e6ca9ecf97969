"""The SiDA training loop.

Per iteration: one (or k) fake-score updates on generated data, then, once
``images_seen >= n1``, one generator update. The adversarial terms switch on
when ``images_seen > n2`` (stage flag b = 1); in ``sid`` mode they never do.
"""

from __future__ import annotations

import copy
import csv
import io
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import torch
from torch import nn

from . import checkpoint as ckpt
from .analytic import PRESETS, LinearGenerator, MixtureModel, fisher_divergence_exact, gmm_sample
from .config import TrainConfig, logvar_enabled, validate
from .diffmath import DTYPE, NumericFailure
from .losses import (
    LossWeights,
    fake_score_denoise_loss,
    sida_fakescore_loss,
    sida_fakescore_loss_logvar,
    sida_generator_loss,
)
from .metrics import energy_distance, mean_pairwise_distance
from .nets import (
    ConvGenerator,
    ConvScoreNet,
    Generator,
    LinearGeneratorNet,
    ReturnFlag,
    ScoreNet,
    ema_update,
    forced_weight_normalize,
    set_force_norm,
)
from .schedule import (
    ConfigError,
    draw_at_sigma,
    diffuse,
    make_schedule,
    sample_fakescore_time,
    sample_generator_time,
)
from .teacher import Teacher, copy_teacher_net, make_teacher, pretrain_teacher

log = logging.getLogger(__name__)

METRIC_COLUMNS = [
    "images_seen",
    "stage_b",
    "loss_sid",
    "loss_adv_gen",
    "loss_denoise",
    "loss_disc",
    "energy_distance",
    "fisher_divergence_if_available",
    "wall_clock",
]


class StageError(RuntimeError):
    """A step was requested outside the stage that allows it."""


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class TrainState:
    cfg: TrainConfig
    data: MixtureModel
    teacher: Teacher
    gen: nn.Module
    fake: nn.Module
    ema: nn.Module
    gen_opt: torch.optim.Optimizer
    fake_opt: torch.optim.Optimizer
    rng_gen: torch.Generator  # noise for generator updates
    rng_fake: torch.Generator  # noise for fake-score updates
    rng_real: torch.Generator  # real data for the discriminator
    images_seen: int = 0
    stage_b: int = 0
    gen_steps: int = 0
    history: list = field(default_factory=list)
    pending: dict = field(default_factory=dict)
    eval_cache: dict = field(default_factory=dict)

    @property
    def schedule(self):
        return make_schedule(**vars(self.cfg.schedule))


# -- construction ---------------------------------------------------------


def build_data(cfg: TrainConfig) -> MixtureModel:
    d = cfg.data
    if d.weights is not None:
        return MixtureModel(d.weights, d.means, d.variances)
    if d.preset not in PRESETS:
        raise ConfigError(f"data.preset: unknown preset {d.preset!r}")
    return PRESETS[d.preset]()


def _grid_shape(cfg: TrainConfig, dim: int):
    shape = cfg.data.shape
    if shape is None:
        return None
    shape = tuple(int(s) for s in shape)
    if shape[0] * shape[1] * shape[2] != dim:
        raise ConfigError("data.shape: product must equal the mixture dimension")
    return shape


def build_teacher(cfg: TrainConfig, data: MixtureModel) -> Teacher:
    t = cfg.teacher
    if t.mode != "learned":
        return make_teacher(t.mode, data, t.strength, t.seed)
    if t.path:
        return load_teacher(t.path, cfg, data)
    sched = make_schedule(**vars(cfg.schedule))
    gen = torch.Generator().manual_seed(t.seed)
    return pretrain_teacher(
        data,
        sched,
        t.budget,
        gen,
        width=cfg.nets.score_width,
        emb_dim=cfg.nets.emb_dim,
        sigma_data=cfg.nets.sigma_data,
        net_seed=t.seed,
    )


def build_scorenet(cfg: TrainConfig, dim: int, seed: int) -> nn.Module:
    n = cfg.nets
    shape = _grid_shape(cfg, dim)
    lv = logvar_enabled(cfg)
    if shape is not None:
        net = ConvScoreNet(shape, n.conv_channels, n.emb_dim, n.sigma_data, logvar=lv, seed=seed)
    else:
        net = ScoreNet(dim, n.score_width, n.emb_dim, n.sigma_data, logvar=lv, seed=seed)
    set_force_norm(net, n.force_norm)
    return net


def build_generator(cfg: TrainConfig, dim: int, seed: int) -> nn.Module:
    n = cfg.nets
    s_init = cfg.schedule.sigma_init
    skip = n.gen_skip if n.gen_skip is not None else 1.0 / s_init
    in_scale = 1.0 / (s_init**2 + n.sigma_data**2) ** 0.5
    if n.generator == "linear":
        net = LinearGeneratorNet(n.latent_dim or dim, dim, init_scale=1.0 / s_init)
    elif _grid_shape(cfg, dim) is not None:
        net = ConvGenerator(_grid_shape(cfg, dim), n.conv_channels, in_scale, skip, seed=seed)
    else:
        net = Generator(n.latent_dim or dim, dim, n.gen_width, in_scale, skip, seed=seed)
    set_force_norm(net, n.force_norm)
    return net


def _adam(params, lr, cfg: TrainConfig):
    o = cfg.optim
    return torch.optim.Adam(params, lr=lr, betas=(o.beta1, o.beta2), eps=o.eps)


def _to_shape(x: torch.Tensor, shape):
    return x if shape is None else x.reshape((x.shape[0],) + tuple(shape))


def prefit_fake(state: TrainState, steps: int, batch_size: int = 512, lr: float = 3e-3) -> None:
    """Regress psi onto the teacher's denoiser over diffused teacher-belief samples.

    Uses EDM loss weighting so large noise levels are fit as well as small
    ones, and a cosine-decayed learning rate.
    """
    cfg = state.cfg
    sched = state.schedule
    gen = torch.Generator().manual_seed(cfg.train.seed * 7919 + 17)
    opt = torch.optim.Adam(state.fake.parameters(), lr=lr, betas=(0.9, 0.999), eps=1e-8)
    decay = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps)
    shape = _grid_shape(cfg, state.data.dim)
    sd2 = cfg.nets.sigma_data**2
    for _ in range(steps):
        forced_weight_normalize(state.fake, _prehook_mode(cfg))
        x0 = state.teacher.sample_beliefs(batch_size, gen)
        draw = sample_fakescore_time(gen, sched, batch_size)
        x_t = diffuse(x0, draw, torch.randn(x0.shape, generator=gen, dtype=DTYPE))
        with torch.no_grad():
            target = state.teacher(_to_shape(x_t, shape), draw)
        out = state.fake(_to_shape(x_t, shape), draw, ReturnFlag.DECODER)
        weight = (draw.sigma**2 + sd2) / (draw.sigma**2 * sd2)
        loss = fake_score_denoise_loss(out.denoised, target, weight) / batch_size
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        decay.step()
    forced_weight_normalize(state.fake, _prehook_mode(cfg))


def _prehook_mode(cfg: TrainConfig) -> str:
    return "pre-hook" if cfg.nets.force_norm == "pre-hook" else "off"


def init_state(cfg: TrainConfig, teacher: Optional[Teacher] = None) -> TrainState:
    validate(cfg)
    if cfg.train.mode == "sid2a" and not cfg.train.sid_checkpoint:
        raise ConfigError("train.sid_checkpoint: mode=sid2a requires a SiD generator checkpoint")
    if cfg.uses_adversarial and cfg.loss.lambda_sid == 0:
        log.warning("loss.lambda_sid=0 with adversarial losses on: adversarial-only training tends to diverge")
    data = build_data(cfg)
    teacher = teacher if teacher is not None else build_teacher(cfg, data)
    seed = cfg.train.seed
    gen = build_generator(cfg, data.dim, seed * 2 + 1)
    if teacher.mode == "learned":
        fake = copy_teacher_net(teacher)
        set_force_norm(fake, cfg.nets.force_norm)
        if logvar_enabled(cfg) and getattr(fake, "logvar_head", None) is None:
            raise ConfigError("nets.logvar: learned teacher has no logvar head")
    else:
        fake = build_scorenet(cfg, data.dim, seed * 2 + 2)
    state = TrainState(
        cfg=cfg,
        data=data,
        teacher=teacher,
        gen=gen,
        fake=fake,
        ema=copy.deepcopy(gen),
        gen_opt=_adam(gen.parameters(), cfg.optim.lr_gen, cfg),
        fake_opt=_adam(fake.parameters(), cfg.optim.lr_fake, cfg),
        rng_gen=torch.Generator().manual_seed(seed * 1_000_003 + 1),
        rng_fake=torch.Generator().manual_seed(seed * 1_000_003 + 2),
        rng_real=torch.Generator().manual_seed(seed * 1_000_003 + 3),
    )
    for p in state.ema.parameters():
        p.requires_grad_(False)
    if teacher.mode != "learned" and cfg.train.psi_prefit_steps > 0:
        prefit_fake(state, cfg.train.psi_prefit_steps)
        state.fake_opt = _adam(state.fake.parameters(), cfg.optim.lr_fake, cfg)
    if cfg.train.mode == "sid2a":
        _load_sid_generator(state, cfg.train.sid_checkpoint)
    # start on the normalized sphere so weights satisfy the row-norm invariant from step 0
    for net in (state.gen, state.ema, state.fake):
        forced_weight_normalize(net, _prehook_mode(cfg))
    return state


def _load_sid_generator(state: TrainState, path) -> None:
    tensors, meta = ckpt.load(path)
    if meta.get("arch_hash") != state.cfg.arch_hash():
        raise ConfigError(
            f"train.sid_checkpoint: {path} was produced by an incompatible configuration "
            "(architecture hash mismatch)"
        )
    source = "ema." if any(k.startswith("ema.") for k in tensors) else "gen."
    ckpt.load_module(state.gen, tensors, source)
    ckpt.load_module(state.ema, tensors, source)
    state.gen_opt = _adam(state.gen.parameters(), state.cfg.optim.lr_gen, state.cfg)


def init_sid2a(cfg: TrainConfig, sid_checkpoint, teacher: Optional[Teacher] = None) -> TrainState:
    cfg = cfg.replace(**{"train.mode": "sid2a", "train.sid_checkpoint": str(sid_checkpoint)})
    return init_state(cfg, teacher)


# -- steps ------------------------------------------------------------------


def loss_weights(cfg: TrainConfig, stage_b: int, dim: int) -> LossWeights:
    l = cfg.loss
    return LossWeights(
        alpha=l.alpha,
        lambda_sid=l.lambda_sid,
        lambda_adv_gen=l.lambda_adv_gen,
        lambda_adv_fake=l.lambda_adv_fake,
        stage_b=stage_b,
        pool_group=l.pool_group,
        pixel_count=dim,
    )


def stage_flag(cfg: TrainConfig, images_seen: int) -> int:
    if not cfg.uses_adversarial:
        return 0
    return 0 if images_seen <= cfg.train.n2 else 1


def _disc_active(cfg: TrainConfig, images_seen: int) -> bool:
    if not cfg.uses_adversarial or cfg.loss.lambda_adv_fake == 0:
        return False
    return cfg.loss.disc_from_start or images_seen > cfg.train.n2


def sample_latent(cfg: TrainConfig, net: nn.Module, dim: int, rng: torch.Generator, n: int) -> torch.Tensor:
    shape = _grid_shape(cfg, dim)
    if shape is not None:
        return torch.randn((n,) + shape, generator=rng, dtype=DTYPE)
    return torch.randn(n, getattr(net, "latent_dim", dim), generator=rng, dtype=DTYPE)


def _sample_generator(state: TrainState, rng: torch.Generator, n: int) -> torch.Tensor:
    z = sample_latent(state.cfg, state.gen, state.data.dim, rng, n)
    return state.gen(state.cfg.schedule.sigma_init * z)


def train_step_fake(state: TrainState, real_batch: Optional[torch.Tensor] = None) -> TrainState:
    cfg = state.cfg
    B = cfg.train.batch_size
    shape = _grid_shape(cfg, state.data.dim)
    forced_weight_normalize(state.fake, _prehook_mode(cfg))
    state.fake.train()
    with torch.no_grad():
        x_g = _sample_generator(state, state.rng_fake, B)
    draw = sample_fakescore_time(state.rng_fake, state.schedule, B)
    x_t = diffuse(x_g, draw, torch.randn(x_g.shape, generator=state.rng_fake, dtype=DTYPE))
    disc_on = _disc_active(cfg, state.images_seen)
    flag = ReturnFlag.ENCODER_DECODER if disc_on else ReturnFlag.DECODER
    out = state.fake(x_t, draw, flag)
    real_logits = fake_logits = None
    if disc_on:
        if real_batch is None:
            real_batch = _to_shape(gmm_sample(state.data, B, state.rng_real), shape)
        eps_r = torch.randn(real_batch.shape, generator=state.rng_real, dtype=DTYPE)
        y_t = diffuse(real_batch, draw, eps_r)
        real_logits = state.fake(y_t, draw, ReturnFlag.ENCODER).disc_logits
        fake_logits = out.disc_logits
    w = loss_weights(cfg, stage_flag(cfg, state.images_seen), state.data.dim)
    if not disc_on:
        w = LossWeights(**{**vars(w), "lambda_adv_fake": 0.0})
    if out.logvar is not None:
        loss, den, disc = sida_fakescore_loss_logvar(
            out.denoised, x_g, real_logits, fake_logits, w, draw, out.logvar, cfg.nets.logvar_form
        )
    else:
        loss, den, disc = sida_fakescore_loss(out.denoised, x_g, real_logits, fake_logits, w, draw)
    state.fake_opt.zero_grad(set_to_none=True)
    (loss / B).backward()
    state.fake_opt.step()
    forced_weight_normalize(state.fake, _prehook_mode(cfg))
    state.pending["loss_denoise"] = den.item() / B
    state.pending["loss_disc"] = disc.item() / B if disc_on else None
    return state


def train_step_generator(state: TrainState) -> TrainState:
    cfg = state.cfg
    if state.images_seen < cfg.train.n1:
        raise StageError(
            f"generator update requested at images_seen={state.images_seen} < n1={cfg.train.n1}"
        )
    B = cfg.train.batch_size
    b = stage_flag(cfg, state.images_seen)
    state.stage_b = b
    forced_weight_normalize(state.gen, _prehook_mode(cfg))
    forced_weight_normalize(state.fake, _prehook_mode(cfg))
    state.gen.train()
    x_g = _sample_generator(state, state.rng_gen, B)
    draw = sample_generator_time(state.rng_gen, state.schedule, B)
    x_t = diffuse(x_g, draw, torch.randn(x_g.shape, generator=state.rng_gen, dtype=DTYPE))
    for p in state.fake.parameters():
        p.requires_grad_(False)
    try:
        f_phi = state.teacher(x_t, draw)
        out = state.fake(x_t, draw, ReturnFlag.ENCODER_DECODER if b else ReturnFlag.DECODER)
        w = loss_weights(cfg, b, state.data.dim)
        total, sid, adv = sida_generator_loss(
            f_phi, out.denoised, x_g, out.disc_logits, w, draw, cfg.loss.omega_mode
        )
        state.gen_opt.zero_grad(set_to_none=True)
        (total / B).backward()
    finally:
        for p in state.fake.parameters():
            p.requires_grad_(True)
    state.gen_opt.step()
    forced_weight_normalize(state.gen, _prehook_mode(cfg))
    ema_update(state.ema, state.gen, cfg.optim.ema_decay)
    state.gen_steps += 1
    state.pending["loss_sid"] = sid.item() / B
    state.pending["loss_adv_gen"] = adv.item() / B
    return state


# -- evaluation -------------------------------------------------------------


@torch.no_grad()
def generate_from(net: nn.Module, cfg: TrainConfig, dim: int, n: int, seed: int) -> torch.Tensor:
    """Draw n flattened samples from a generator snapshot without touching its mode."""
    rng = torch.Generator().manual_seed(seed)
    z = sample_latent(cfg, net, dim, rng, n)
    return net(cfg.schedule.sigma_init * z).reshape(n, -1)


def generate(net: nn.Module, state: TrainState, n: int, seed: int) -> torch.Tensor:
    return generate_from(net, state.cfg, state.data.dim, n, seed)


def load_generator(cfg: TrainConfig, path, prefix: str = "ema.") -> tuple[nn.Module, dict]:
    """Rebuild the generator of ``cfg`` and fill it from a checkpoint."""
    tensors, meta = ckpt.load(path)
    data = build_data(cfg)
    net = build_generator(cfg, data.dim, 0)
    if not any(k.startswith(prefix) for k in tensors):
        prefix = "gen."
    ckpt.load_module(net, tensors, prefix)
    return net, meta


def _reference(state: TrainState, n: int):
    key = ("ref", n)
    if key not in state.eval_cache:
        rng = torch.Generator().manual_seed(state.cfg.eval.seed)
        ref = gmm_sample(state.data, n, rng)
        state.eval_cache[key] = (ref, mean_pairwise_distance(ref, ref))
    return state.eval_cache[key]


def evaluate(state: TrainState, n: Optional[int] = None, seed_offset: int = 0, use_ema: bool = True) -> float:
    """Energy distance between the (EMA) generator and fresh data samples."""
    n = n or state.cfg.eval.samples
    ref, self_ref = _reference(state, n) if seed_offset == 0 else (None, None)
    if ref is None:
        rng = torch.Generator().manual_seed(state.cfg.eval.seed + 10_007 * seed_offset)
        ref = gmm_sample(state.data, n, rng)
    fake = generate(state.ema if use_ema else state.gen, state, n, state.cfg.eval.seed + 1 + 10_007 * seed_offset)
    return energy_distance(fake, ref, self_b=self_ref)


def fisher_if_available(state: TrainState) -> Optional[float]:
    if not isinstance(state.gen, LinearGeneratorNet):
        return None
    return fisher_for(state, state.ema)


def fisher_for(state: TrainState, net: LinearGeneratorNet, n_mc: int = 4096) -> float:
    sched = state.schedule
    draw = draw_at_sigma(sched, state.cfg.eval.fisher_sigma)
    lg = LinearGenerator(net.W.detach(), net.b.detach())
    rng = torch.Generator().manual_seed(state.cfg.eval.seed)
    val, _ = fisher_divergence_exact(state.data, lg, draw, n_mc, rng, sigma_init=state.cfg.schedule.sigma_init)
    return val


# -- run loop ---------------------------------------------------------------


@dataclass
class RunResult:
    state: TrainState
    rows: list
    csv_text: str
    final_metric: Optional[float]


def _row(state: TrainState, images: int, stage_b, metric=None, fisher=None, t0=None) -> dict:
    p = state.pending
    return {
        "images_seen": images,
        "stage_b": stage_b,
        "loss_sid": p.get("loss_sid"),
        "loss_adv_gen": p.get("loss_adv_gen"),
        "loss_denoise": p.get("loss_denoise"),
        "loss_disc": p.get("loss_disc"),
        "energy_distance": metric,
        "fisher_divergence_if_available": fisher,
        "wall_clock": (time.perf_counter() - t0) if (t0 is not None and state.cfg.train.record_wall_clock) else None,
    }


def rows_to_csv(rows: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in METRIC_COLUMNS])
    return buf.getvalue()


def checkpoint_meta(state: TrainState, role: str) -> dict:
    return {
        "role": role,
        "config_hash": state.cfg.hash(),
        "arch_hash": state.cfg.arch_hash(),
        "images_seen": state.images_seen,
        "stage_b": state.stage_b,
        "mode": state.cfg.train.mode,
    }


def save_checkpoint(state: TrainState, path, role: str = "generator") -> None:
    tensors = {}
    tensors.update(ckpt.module_tensors(state.gen, "gen."))
    tensors.update(ckpt.module_tensors(state.ema, "ema."))
    tensors.update(ckpt.module_tensors(state.fake, "fake."))
    ckpt.save(path, tensors, checkpoint_meta(state, role))


def save_ema_checkpoint(state: TrainState, path) -> None:
    ckpt.save(path, ckpt.module_tensors(state.ema, "ema."), checkpoint_meta(state, "ema"))


def load_teacher(path, cfg: TrainConfig, data: MixtureModel) -> Teacher:
    tensors, meta = ckpt.load(path)
    if meta.get("role") != "teacher":
        raise ConfigError(f"teacher.path: {path} is not a teacher checkpoint")
    net = ScoreNet(data.dim, cfg.nets.score_width, cfg.nets.emb_dim, cfg.nets.sigma_data,
                   logvar=any(k.startswith("net.logvar_head") for k in tensors))
    ckpt.load_module(net, tensors, "net.")
    t = Teacher("learned", data, net=net)
    t.report = meta.get("report", {})
    return t


def save_teacher(teacher: Teacher, path) -> None:
    ckpt.save(path, ckpt.module_tensors(teacher.net, "net."), {"role": "teacher", "report": teacher.report})


def run_training(
    cfg: TrainConfig,
    out_dir: Optional[str | Path] = None,
    teacher: Optional[Teacher] = None,
    state: Optional[TrainState] = None,
) -> RunResult:
    """Execute all three stages up to the sample budget.

    stage 1: images_seen < n1, fake-score updates only
    stage 2: n1 <= images_seen <= n2, generator with the SiD loss
    stage 3: images_seen > n2, SiDA losses (pure SiD in ``sid`` mode)
    """
    state = state or init_state(cfg, teacher)
    t0 = time.perf_counter()
    rows = []
    out_dir = Path(out_dir) if out_dir else None
    every = cfg.eval.every
    next_eval = 0
    try:
        while state.images_seen < cfg.train.budget:
            if state.images_seen >= next_eval:
                metric = evaluate(state)
                state.pending = {}
                rows.append(_row(state, state.images_seen, state.stage_b, metric, fisher_if_available(state), t0))
                next_eval += every
            state.pending = {}
            for _ in range(cfg.train.fake_steps_per_gen):
                train_step_fake(state)
            if state.images_seen >= cfg.train.n1:
                train_step_generator(state)
                b = state.stage_b
            else:
                b = 0
            rows.append(_row(state, state.images_seen, b, t0=t0))
            state.images_seen += cfg.train.batch_size
        state.pending = {}
        state.stage_b = stage_flag(cfg, state.images_seen)
        final = None
        if cfg.train.budget > 0:
            final = evaluate(state, cfg.eval.final_samples)
            rows.append(_row(state, state.images_seen, state.stage_b, final, fisher_if_available(state), t0))
    except NumericFailure:
        if out_dir:
            _flush(state, rows, out_dir, partial=True)
        raise
    result = RunResult(state, rows, rows_to_csv(rows), final)
    if out_dir:
        _flush(state, rows, out_dir)
    return result


def _flush(state: TrainState, rows: list, out_dir: Path, partial: bool = False) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt.atomic_write_text(out_dir / "metrics.csv", rows_to_csv(rows))
    ckpt.atomic_write_text(out_dir / "resolved-config.json", state.cfg.canonical_json() + "\n")
    suffix = "-partial" if partial else ""
    save_checkpoint(state, out_dir / f"final{suffix}.ckpt")
    save_ema_checkpoint(state, out_dir / f"ema{suffix}.ckpt")
