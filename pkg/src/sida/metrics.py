"""Two-sample distances between generated and reference samples."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import scipy.linalg
import torch

from .diffmath import DTYPE

MIN_SAMPLES = 100


@dataclass
class MetricReport:
    energy_distance: float
    sliced_wasserstein: float
    frechet_feature_distance: float
    n_samples: int
    seed: int

    def to_dict(self):
        return asdict(self)


def _check(a, b):
    if a.shape[0] < MIN_SAMPLES or b.shape[0] < MIN_SAMPLES:
        raise ValueError(f"need at least {MIN_SAMPLES} samples per set, got {a.shape[0]} and {b.shape[0]}")


def _mean_abs_diff_1d(a: torch.Tensor, b: torch.Tensor) -> float:
    """E|a - b| over all pairs in O(n log n) from sorted prefix sums."""
    b = torch.sort(b).values
    csum = torch.cat([b.new_zeros(1), torch.cumsum(b, 0)])
    k = torch.searchsorted(b, a, right=True)  # count of b <= a_i
    below = a * k - csum[k]
    above = (csum[-1] - csum[k]) - a * (len(b) - k)
    return ((below + above).sum() / (len(a) * len(b))).item()


def mean_pairwise_distance(a: torch.Tensor, b: torch.Tensor, chunk: int = 2048) -> float:
    a = a.reshape(a.shape[0], -1).to(DTYPE)
    b = b.reshape(b.shape[0], -1).to(DTYPE)
    if a.shape[1] == 1:
        return _mean_abs_diff_1d(a[:, 0], b[:, 0])
    total = 0.0
    for i in range(0, a.shape[0], chunk):
        total += torch.cdist(a[i : i + chunk], b).sum().item()
    return total / (a.shape[0] * b.shape[0])


def energy_distance(a: torch.Tensor, b: torch.Tensor, self_b: float | None = None) -> float:
    """V-statistic 2E|A-B| - E|A-A'| - E|B-B'|; zero for identical sets.

    ``self_b`` may carry a cached E|B-B'| for a fixed reference set.
    """
    _check(a, b)
    ab = mean_pairwise_distance(a, b)
    aa = mean_pairwise_distance(a, a)
    bb = mean_pairwise_distance(b, b) if self_b is None else self_b
    return max(2 * ab - aa - bb, 0.0)


def sliced_wasserstein(a: torch.Tensor, b: torch.Tensor, n_proj: int = 128, seed: int = 0) -> float:
    """Sliced 2-Wasserstein distance with random unit projections (equal set sizes)."""
    _check(a, b)
    a = a.reshape(a.shape[0], -1).to(DTYPE)
    b = b.reshape(b.shape[0], -1).to(DTYPE)
    n = min(a.shape[0], b.shape[0])
    a, b = a[:n], b[:n]
    gen = torch.Generator().manual_seed(seed)
    proj = torch.randn(a.shape[1], n_proj, generator=gen, dtype=DTYPE)
    proj = proj / proj.norm(dim=0, keepdim=True)
    pa = torch.sort(a @ proj, dim=0).values
    pb = torch.sort(b @ proj, dim=0).values
    return math.sqrt(((pa - pb) ** 2).mean().item())


class RandomFourierFeaturizer:
    """Frozen random Fourier feature map, cos(x W + c) * sqrt(2/n)."""

    def __init__(self, in_dim: int, n_features: int = 64, bandwidth: float = 1.0, seed: int = 0):
        gen = torch.Generator().manual_seed(seed)
        self.W = torch.randn(in_dim, n_features, generator=gen, dtype=DTYPE) / bandwidth
        self.c = 2 * math.pi * torch.rand(n_features, generator=gen, dtype=DTYPE)
        self.n_features = n_features

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        x = x.reshape(x.shape[0], -1).to(DTYPE)
        return torch.cos(x @ self.W + self.c) * math.sqrt(2 / self.n_features)


def frechet_distance_from_moments(mu1, cov1, mu2, cov2) -> tuple[float, bool]:
    """||mu1-mu2||^2 + tr(C1 + C2 - 2 (C1 C2)^{1/2}); flags an eps-regularized retry."""
    mu1, mu2 = np.asarray(mu1, float), np.asarray(mu2, float)
    cov1, cov2 = np.atleast_2d(cov1), np.atleast_2d(cov2)
    with np.errstate(invalid="ignore", divide="ignore"):
        covmean, _ = scipy.linalg.sqrtm(cov1 @ cov2, disp=False)
    regularized = False
    if not np.isfinite(covmean).all():
        off = np.eye(cov1.shape[0]) * 1e-6
        covmean = scipy.linalg.sqrtm((cov1 + off) @ (cov2 + off))
        regularized = True
    covmean = covmean.real
    diff = mu1 - mu2
    val = diff @ diff + np.trace(cov1) + np.trace(cov2) - 2 * np.trace(covmean)
    return max(float(val), 0.0), regularized


def frechet_feature_distance(a, b, featurizer_seed: int = 0, n_features: int = 64) -> float:
    _check(a, b)
    if n_features > min(a.shape[0], b.shape[0]) / 10:
        raise ValueError("feature dimension must be at most a tenth of the sample count")
    feat = RandomFourierFeaturizer(a[0].numel(), n_features, seed=featurizer_seed)
    fa = feat(a).numpy()
    fb = feat(b).numpy()
    val, _ = frechet_distance_from_moments(
        fa.mean(0), np.cov(fa, rowvar=False), fb.mean(0), np.cov(fb, rowvar=False)
    )
    return val


def metric_report(a, b, seed: int = 0, n_features: int = 64) -> MetricReport:
    """All three distances; the feature count shrinks to fit small sample sets."""
    n_features = min(n_features, min(a.shape[0], b.shape[0]) // 10)
    return MetricReport(
        energy_distance=energy_distance(a, b),
        sliced_wasserstein=sliced_wasserstein(a, b, seed=seed),
        frechet_feature_distance=frechet_feature_distance(a, b, seed, n_features),
        n_samples=int(a.shape[0]),
        seed=seed,
    )
