"""Training objectives for the generator and the fake-score/discriminator network.

Every loss is a sum over the batch with explicit per-sample weights. Logs of
discriminator probabilities are computed from logits with softplus, so no
probability ever needs clamping:

    ln D = -softplus(-l),    ln(1 - D) = -softplus(l).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .diffmath import check_finite
from .schedule import TimeDraw

OMEGA_MODES = ("snr", "adaptive")
LOGVAR_FORMS = ("printed", "canonical")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    lambda_sid: float = 100.0
    lambda_adv_gen: float = 0.01
    lambda_adv_fake: float = 1.0
    stage_b: int = 0
    pool_group: int = 32
    pixel_count: int = 1

    def __post_init__(self):
        for name in ("lambda_sid", "lambda_adv_gen", "lambda_adv_fake"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.stage_b not in (0, 1):
            raise ValueError("stage_b must be 0 or 1")
        if self.pool_group < 1:
            raise ValueError("pool_group must be a positive integer")


def _flat(x: torch.Tensor) -> torch.Tensor:
    return x.reshape(x.shape[0], -1)


def _check_shapes(*xs):
    s = xs[0].shape
    for x in xs[1:]:
        if x.shape != s:
            raise ValueError(f"shape mismatch: {tuple(s)} vs {tuple(x.shape)}")


def sid_term(f_phi, f_psi, x_g, alpha):
    """Per-sample -alpha ||d||^2 + d.(f_phi - x_g), d = f_phi - f_psi."""
    d = _flat(f_phi - f_psi)
    return -alpha * (d * d).sum(1) + (d * _flat(f_phi - x_g)).sum(1)


def sid_term_alg1(f_phi, f_psi, x_g, alpha):
    """Per-sample (1 - alpha) ||d||^2 + d.(f_psi - x_g); equal to :func:`sid_term`."""
    d = _flat(f_phi - f_psi)
    return (1 - alpha) * (d * d).sum(1) + (d * _flat(f_psi - x_g)).sum(1)


def sid_prefactor(f_phi, x_g, draw: TimeDraw, omega_mode: str = "snr") -> torch.Tensor:
    """omega(t) a_t^2 / sigma_t^4 per sample.

    ``"snr"`` uses omega = sigma^4/a^2 so the prefactor is 1. ``"adaptive"``
    further divides by pixel_count * mean|f_phi - x_g| per sample (detached).
    """
    if omega_mode not in OMEGA_MODES:
        raise ValueError(f"unknown omega mode {omega_mode!r}")
    pre = draw.prefactor
    if omega_mode == "adaptive":
        r = _flat(f_phi - x_g).detach()
        pre = pre / (r.shape[1] * r.abs().mean(1).clamp_min(1e-5))
    return pre


def sid_generator_loss(f_phi, f_psi, x_g, alpha, draw: TimeDraw, omega_mode: str = "snr"):
    _check_shapes(f_phi, f_psi, x_g)
    pre = sid_prefactor(f_phi, x_g, draw, omega_mode)
    return check_finite("loss_sid", (pre * sid_term_alg1(f_phi, f_psi, x_g, alpha)).sum())


def log_d(logits: torch.Tensor) -> torch.Tensor:
    return -F.softplus(-logits)


def log_one_minus_d(logits: torch.Tensor) -> torch.Tensor:
    return -F.softplus(logits)


def _groups(n: int, pool_group: int) -> int:
    if n % pool_group:
        raise ValueError(f"batch of {n} is not divisible by pool_group={pool_group}")
    return n // pool_group


def pooled_fakeness(disc_logits: torch.Tensor, pool_group: int):
    """Mean of ln D over each group of samples and all map positions.

    Returns (per-group values (G,), per-sample broadcast (B,)).
    """
    n = disc_logits.shape[0]
    g = _groups(n, pool_group)
    per = log_d(disc_logits).reshape(g, -1).mean(1)
    return per, per.repeat_interleave(pool_group)


def adversarial_generator_term(disc_logits: torch.Tensor, pool_group: int) -> torch.Tensor:
    """Per-sample pooled -ln D(fake); minimizing it raises D on generated data."""
    _, per_sample = pooled_fakeness(disc_logits, pool_group)
    return -per_sample


def sida_generator_loss(
    f_phi, f_psi, x_g, disc_logits, weights: LossWeights, draw: TimeDraw, omega_mode: str = "snr"
):
    """Generator objective; returns (total, sid part, adversarial part).

    total = (1/2)^b lambda_sid sum pre * sid
          + (b/2) lambda_adv_gen sum (pre/2) * pixel_count * pooled(-ln D)
    """
    _check_shapes(f_phi, f_psi, x_g)
    b = weights.stage_b
    pre = sid_prefactor(f_phi, x_g, draw, omega_mode)
    sid = (0.5**b) * weights.lambda_sid * (pre * sid_term_alg1(f_phi, f_psi, x_g, weights.alpha)).sum()
    if b:
        if disc_logits is None:
            raise ValueError("stage_b=1 requires discriminator logits")
        adv_per = adversarial_generator_term(disc_logits, weights.pool_group)
        adv = 0.5 * weights.lambda_adv_gen * (0.5 * pre * weights.pixel_count * adv_per).sum()
    else:
        adv = sid.new_zeros(())
    total = check_finite("loss_generator", sid + adv)
    return total, sid, adv


def fake_score_denoise_loss(f_psi_denoised, x_g_detached, gamma) -> torch.Tensor:
    _check_shapes(f_psi_denoised, x_g_detached)
    r = _flat(f_psi_denoised - x_g_detached.detach())
    return (gamma * (r * r).sum(1)).sum()


def discriminator_loss(real_logits, fake_logits, pool_group: int | None = None):
    """Negated mean log-likelihood of the real/fake labels, 1/(2|B|W'H') normalized.

    With ``pool_group`` set, returns per-sample values of the group-wise loss
    (shape (B,)); otherwise the scalar over the whole batch.
    """
    if real_logits.shape != fake_logits.shape:
        raise ValueError(
            f"batch mismatch: real {tuple(real_logits.shape)} vs fake {tuple(fake_logits.shape)}"
        )
    pair = -(log_d(real_logits) + log_one_minus_d(fake_logits))
    n = pair.shape[0]
    if pool_group is None:
        return pair.reshape(n, -1).sum() / (2 * pair[0].numel() * n)
    g = _groups(n, pool_group)
    per = pair.reshape(g, -1).mean(1) / 2
    return per.repeat_interleave(pool_group)


def sida_fakescore_loss(
    f_psi_denoised, x_g, real_logits, fake_logits, weights: LossWeights, draw: TimeDraw
):
    """sum gamma (||f_psi - x_g||^2 + lambda_adv_fake * L_disc); returns (total, denoise, disc)."""
    _check_shapes(f_psi_denoised, x_g)
    r = _flat(f_psi_denoised - x_g.detach())
    sq = (r * r).sum(1)
    denoise = (draw.gamma * sq).sum()
    if weights.lambda_adv_fake and real_logits is not None:
        disc_per = discriminator_loss(real_logits, fake_logits, weights.pool_group)
        disc = (draw.gamma * weights.lambda_adv_fake * disc_per).sum()
    else:
        disc = denoise.new_zeros(())
    return check_finite("loss_fake", denoise + disc), denoise, disc


def sida_fakescore_loss_logvar(
    f_psi_denoised,
    x_g,
    real_logits,
    fake_logits,
    weights: LossWeights,
    draw: TimeDraw,
    logvar: torch.Tensor,
    form: str = "printed",
):
    """Uncertainty-weighted fake-score loss.

    printed:   sum gamma/e^u (||f_psi - x_g||^2 + u + lambda L_disc)
    canonical: sum gamma/e^u (||f_psi - x_g||^2 + lambda L_disc) + u
    """
    if form not in LOGVAR_FORMS:
        raise ValueError(f"unknown logvar form {form!r}")
    check_finite("logvar", logvar)
    _check_shapes(f_psi_denoised, x_g)
    r = _flat(f_psi_denoised - x_g.detach())
    sq = (r * r).sum(1)
    if weights.lambda_adv_fake and real_logits is not None:
        disc_per = weights.lambda_adv_fake * discriminator_loss(real_logits, fake_logits, weights.pool_group)
    else:
        disc_per = torch.zeros_like(sq)
    w = draw.gamma / torch.exp(logvar)
    if form == "printed":
        total = (w * (sq + logvar + disc_per)).sum()
    else:
        total = (w * (sq + disc_per) + logvar).sum()
    return (
        check_finite("loss_fake", total),
        (draw.gamma * sq).sum().detach(),
        (draw.gamma * disc_per).sum().detach(),
    )
