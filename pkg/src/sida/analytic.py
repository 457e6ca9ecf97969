"""Gaussian-mixture data with exact diffused scores and posterior-mean denoisers.

Diagonal covariances only. Everything is computed in log space so the
responsibilities stay stable across several orders of magnitude of sigma.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .diffmath import DTYPE
from .schedule import TimeDraw


@dataclass(frozen=True)
class MixtureModel:
    weights: torch.Tensor  # (K,)
    means: torch.Tensor  # (K, d)
    variances: torch.Tensor  # (K, d)

    def __post_init__(self):
        w = torch.as_tensor(self.weights, dtype=DTYPE)
        m = torch.as_tensor(self.means, dtype=DTYPE)
        v = torch.as_tensor(self.variances, dtype=DTYPE)
        if m.dim() == 1:
            m = m[:, None]
        if v.dim() == 0:
            v = v.expand_as(m).clone()
        elif v.dim() == 1:
            v = v[:, None].expand_as(m).clone()
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "variances", v)
        if w.dim() != 1 or w.shape[0] != m.shape[0] or v.shape != m.shape:
            raise ValueError(
                f"inconsistent mixture shapes: weights {tuple(w.shape)}, "
                f"means {tuple(m.shape)}, variances {tuple(v.shape)}"
            )
        if (w < 0).any() or abs(w.sum().item() - 1) > 1e-12:
            raise ValueError("mixture weights must be nonnegative and sum to 1")
        if not (v > 0).all():
            raise ValueError("mixture variances must be positive")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
        }


@dataclass(frozen=True)
class LinearGenerator:
    """x_g = W z + b with z standard normal (before the sigma_init scaling)."""

    W: torch.Tensor  # (d, m)
    b: torch.Tensor  # (d,)

    def induced(self, sigma_init: float = 1.0) -> tuple[torch.Tensor, torch.Tensor]:
        W = self.W.detach().to(DTYPE)
        cov = sigma_init**2 * W @ W.T + 1e-9 * torch.eye(W.shape[0], dtype=DTYPE)
        return self.b.detach().to(DTYPE), cov


def gaussian(mean, var) -> MixtureModel:
    mean = torch.as_tensor(mean, dtype=DTYPE).reshape(1, -1)
    var = torch.as_tensor(var, dtype=DTYPE).expand_as(mean).clone()
    return MixtureModel(torch.ones(1, dtype=DTYPE), mean, var)


def ring(n: int = 8, radius: float = 2.0, std: float = 0.05) -> MixtureModel:
    ang = torch.arange(n, dtype=DTYPE) * (2 * math.pi / n)
    means = radius * torch.stack([torch.cos(ang), torch.sin(ang)], 1)
    return MixtureModel(torch.full((n,), 1.0 / n, dtype=DTYPE), means, torch.full_like(means, std**2))


def grid(side: int = 5, spacing: float = 1.0, std: float = 0.05) -> MixtureModel:
    c = (torch.arange(side, dtype=DTYPE) - (side - 1) / 2) * spacing
    xx, yy = torch.meshgrid(c, c, indexing="ij")
    means = torch.stack([xx.reshape(-1), yy.reshape(-1)], 1)
    k = side * side
    return MixtureModel(torch.full((k,), 1.0 / k, dtype=DTYPE), means, torch.full_like(means, std**2))


def two_moons(n_per_moon: int = 8, radius: float = 2.0, std: float = 0.1) -> MixtureModel:
    """Two interleaved half-circles, each approximated by a chain of Gaussians."""
    ang = torch.linspace(0, math.pi, n_per_moon, dtype=DTYPE)
    upper = torch.stack([radius * torch.cos(ang), radius * torch.sin(ang)], 1)
    lower = torch.stack([radius - radius * torch.cos(ang), 0.5 * radius - radius * torch.sin(ang)], 1)
    means = torch.cat([upper, lower]) - torch.tensor([0.5 * radius, 0.25 * radius], dtype=DTYPE)
    k = means.shape[0]
    return MixtureModel(torch.full((k,), 1.0 / k, dtype=DTYPE), means, torch.full_like(means, std**2))


PRESETS = {
    "gauss": lambda: gaussian([1.0, -0.5], [0.5, 0.2]),
    "ring-8": lambda: ring(8, 2.0, 0.05),
    "grid-25": lambda: grid(5, 1.0, 0.05),
    "two-moons-gmm": lambda: two_moons(8, 2.0, 0.1),
}


def gmm_sample(model: MixtureModel, n: int, gen: torch.Generator, return_labels: bool = False):
    if n < 1:
        raise ValueError("n must be >= 1")
    labels = torch.multinomial(model.weights, n, replacement=True, generator=gen)
    eps = torch.randn(n, model.dim, generator=gen, dtype=DTYPE)
    x = model.means[labels] + model.variances[labels].sqrt() * eps
    return (x, labels) if return_labels else x


def _diffused_terms(model: MixtureModel, x_t: torch.Tensor, draw: TimeDraw):
    """Per-component log-likelihood terms of the diffused mixture.

    Returns (log_joint (n,K), centered (n,K,d), total variance (n,K,d)).
    """
    a = draw.a.reshape(-1, 1, 1)
    s2 = (draw.sigma**2).reshape(-1, 1, 1)
    var = a**2 * model.variances[None] + s2
    centered = x_t[:, None, :] - a * model.means[None]
    log_norm = -0.5 * (centered**2 / var + torch.log(2 * math.pi * var)).sum(-1)
    log_joint = torch.log(model.weights)[None] + log_norm
    return log_joint, centered, var


def gmm_log_density(model: MixtureModel, x_t: torch.Tensor, draw: TimeDraw) -> torch.Tensor:
    log_joint, _, _ = _diffused_terms(model, x_t, draw)
    return torch.logsumexp(log_joint, dim=1)


def gmm_responsibilities(model: MixtureModel, x_t: torch.Tensor, draw: TimeDraw) -> torch.Tensor:
    log_joint, _, _ = _diffused_terms(model, x_t, draw)
    return torch.softmax(log_joint, dim=1)


def gmm_posterior_means(model: MixtureModel, x_t: torch.Tensor, draw: TimeDraw) -> torch.Tensor:
    """E[x_0 | x_t, component k], shape (n, K, d)."""
    _, centered, var = _diffused_terms(model, x_t, draw)
    a = draw.a.reshape(-1, 1, 1)
    return model.means[None] + a * model.variances[None] / var * centered


def gmm_denoiser(model: MixtureModel, x_t: torch.Tensor, draw: TimeDraw) -> torch.Tensor:
    """Exact E[x_0 | x_t] under the diffused mixture; differentiable in x_t."""
    log_joint, centered, var = _diffused_terms(model, x_t, draw)
    r = torch.softmax(log_joint, dim=1)
    a = draw.a.reshape(-1, 1, 1)
    post = model.means[None] + a * model.variances[None] / var * centered
    return (r[..., None] * post).sum(1)


def gmm_score(model: MixtureModel, x_t: torch.Tensor, draw: TimeDraw) -> torch.Tensor:
    """Exact gradient of the diffused mixture log-density."""
    log_joint, centered, var = _diffused_terms(model, x_t, draw)
    r = torch.softmax(log_joint, dim=1)
    return (r[..., None] * (-centered / var)).sum(1)


def corrupt_teacher(model: MixtureModel, strength: float, gen: torch.Generator) -> MixtureModel:
    """Shift means by strength * N(0, I) and jitter log-weights by strength * N(0, 1).

    The noise is always drawn, so corruptions at different strengths with the
    same generator seed are scaled copies of one perturbation direction.
    """
    if strength < 0:
        raise ValueError("strength must be nonnegative")
    shift = torch.randn(model.means.shape, generator=gen, dtype=DTYPE)
    jitter = torch.randn(model.weights.shape, generator=gen, dtype=DTYPE)
    if strength == 0:
        return model
    means = model.means + strength * shift
    logw = torch.log(model.weights) + strength * jitter
    w = torch.softmax(logw, 0)
    w = w / w.sum()
    return MixtureModel(w, means, model.variances.clone())


def kl_monte_carlo(p: MixtureModel, q: MixtureModel, n: int, gen: torch.Generator) -> float:
    """KL(p || q) between undiffused mixtures by sampling from p."""
    x = gmm_sample(p, n, gen)
    zero = torch.zeros(n, dtype=DTYPE)
    draw = TimeDraw(t=zero, a=torch.ones(n, dtype=DTYPE), sigma=zero, omega=zero, gamma=zero)
    return (gmm_log_density(p, x, draw) - gmm_log_density(q, x, draw)).mean().item()


def gaussian_score(x: torch.Tensor, mean: torch.Tensor, cov: torch.Tensor) -> torch.Tensor:
    return -torch.linalg.solve(cov, (x - mean).T).T


def fisher_divergence_exact(
    data: MixtureModel,
    gen: LinearGenerator,
    draw: TimeDraw,
    n_mc: int,
    rng: torch.Generator,
    sigma_init: float = 1.0,
) -> tuple[float, float]:
    """E_{x_t ~ p_theta(x_t)} ||grad log p_data(x_t) - grad log p_theta(x_t)||^2.

    ``draw`` holds a single time. Returns (estimate, standard error).
    """
    if n_mc < 100:
        raise ValueError(f"n_mc={n_mc} is too small for a meaningful estimate (need >= 100)")
    a = draw.a.reshape(-1)[0]
    sigma = draw.sigma.reshape(-1)[0]
    b, cov = gen.induced(sigma_init)
    d = b.shape[0]
    cov_t = a**2 * cov + sigma**2 * torch.eye(d, dtype=DTYPE)
    chol = torch.linalg.cholesky(cov_t)
    eps = torch.randn(n_mc, d, generator=rng, dtype=DTYPE)
    x_t = a * b + eps @ chol.T
    full = TimeDraw(
        t=draw.t.reshape(-1)[:1].expand(n_mc),
        a=a.expand(n_mc),
        sigma=sigma.expand(n_mc),
        omega=draw.omega.reshape(-1)[:1].expand(n_mc),
        gamma=draw.gamma.reshape(-1)[:1].expand(n_mc),
    )
    diff = gmm_score(data, x_t, full) - gaussian_score(x_t, a * b, cov_t)
    sq = (diff**2).sum(1)
    return sq.mean().item(), (sq.std() / math.sqrt(n_mc)).item()
