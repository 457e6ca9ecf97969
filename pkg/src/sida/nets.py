"""Generator and fake-score networks built from magnitude-preserving layers.

The fake-score network doubles as the discriminator: the output of its last
encoder block, averaged over channels, is the discriminator logit map. No
parameter is used only by the discriminator.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .diffmath import DTYPE, check_finite
from .schedule import TimeDraw

FORCE_NORM_MODES = ("off", "in-place", "pre-hook")


class ReturnFlag(str, enum.Enum):
    DECODER = "decoder"
    ENCODER = "encoder"
    ENCODER_DECODER = "encoder-decoder"


@dataclass
class ScoreNetOutput:
    denoised: Optional[torch.Tensor] = None
    disc_logits: Optional[torch.Tensor] = None  # (B, W', H')
    logvar: Optional[torch.Tensor] = None  # (B,)


def normalize(w: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Rescale each output row to unit RMS (norm sqrt(fan_in))."""
    fan_in = w[0].numel()
    norm = w.flatten(1).norm(dim=1).reshape((-1,) + (1,) * (w.dim() - 1))
    return w / (eps + norm / math.sqrt(fan_in))


def traditional_weight_normalize_forward(w: torch.Tensor, gain=1.0) -> torch.Tensor:
    """Effective weights normalize(w) * gain / sqrt(fan_in); differentiated through."""
    return normalize(w) * (gain / math.sqrt(w[0].numel()))


def mp_silu(x: torch.Tensor) -> torch.Tensor:
    return F.silu(x) / 0.596


class MPLayer(nn.Module):
    """Linear (2-D weight) or conv (4-D weight) layer with normalized weights.

    ``force_norm="in-place"`` reproduces the original EDM2 behaviour of
    overwriting ``self.weight`` inside the forward pass while training. The
    trainer refuses that mode whenever an adversarial loss is active.
    """

    def __init__(self, weight: torch.Tensor, bias: Optional[torch.Tensor] = None, stride: int = 1):
        super().__init__()
        self.weight = nn.Parameter(weight)
        self.bias = nn.Parameter(bias) if bias is not None else None
        self.stride = stride
        self.force_norm = "off"

    @property
    def fan_in(self) -> int:
        return self.weight[0].numel()

    def forward(self, x: torch.Tensor, gain=1.0) -> torch.Tensor:
        if self.training and self.force_norm == "in-place":
            with torch.no_grad():
                self.weight.copy_(normalize(self.weight))
        w = traditional_weight_normalize_forward(self.weight, gain)
        if w.dim() == 2:
            y = x @ w.T
        else:
            y = F.conv2d(x, w, stride=self.stride, padding=w.shape[-1] // 2)
        if self.bias is not None:
            y = y + (self.bias if y.dim() == 2 else self.bias.reshape(1, -1, 1, 1))
        return y


def mp_linear(n_in: int, n_out: int, gen: torch.Generator, bias: bool = True) -> MPLayer:
    w = torch.randn(n_out, n_in, generator=gen, dtype=DTYPE)
    return MPLayer(w, torch.zeros(n_out, dtype=DTYPE) if bias else None)


def mp_conv(c_in: int, c_out: int, k: int, gen: torch.Generator, stride: int = 1) -> MPLayer:
    w = torch.randn(c_out, c_in, k, k, generator=gen, dtype=DTYPE)
    return MPLayer(w, torch.zeros(c_out, dtype=DTYPE), stride=stride)


def mp_layers(net: nn.Module):
    return [m for m in net.modules() if isinstance(m, MPLayer)]


def set_force_norm(net: nn.Module, mode: str) -> None:
    if mode not in FORCE_NORM_MODES:
        raise ValueError(f"unknown forced-normalization mode {mode!r}")
    for m in mp_layers(net):
        m.force_norm = mode


@torch.no_grad()
def forced_weight_normalize(net: nn.Module, mode: str = "pre-hook") -> int:
    """Rescale every weight row of ``net`` to norm sqrt(fan_in), outside autograd.

    ``mode="off"`` is a no-op. Returns the number of zero-norm rows skipped.
    """
    if mode not in FORCE_NORM_MODES:
        raise ValueError(f"unknown forced-normalization mode {mode!r}")
    if mode == "off":
        return 0
    skipped = 0
    for m in mp_layers(net):
        w = m.weight
        rows = w.flatten(1)
        norm = rows.norm(dim=1)
        ok = norm > 0
        skipped += int((~ok).sum())
        scale = torch.where(ok, math.sqrt(m.fan_in) / torch.where(ok, norm, 1.0), 1.0)
        w.mul_(scale.reshape((-1,) + (1,) * (w.dim() - 1)))
    return skipped


class FourierEmbedding(nn.Module):
    """Fixed random Fourier features of c_noise = ln(sigma)/4 (no parameters)."""

    def __init__(self, n: int, gen: torch.Generator):
        super().__init__()
        self.register_buffer("freqs", torch.randn(n, generator=gen, dtype=DTYPE))
        self.register_buffer("phases", torch.rand(n, generator=gen, dtype=DTYPE))

    def forward(self, c: torch.Tensor) -> torch.Tensor:
        return torch.cos(2 * math.pi * (c[:, None] * self.freqs + self.phases)) * math.sqrt(2)


def edm_coefficients(s: torch.Tensor, sigma_data: float):
    c_in = 1 / (s**2 + sigma_data**2).sqrt()
    c_skip = sigma_data**2 / (s**2 + sigma_data**2)
    c_out = s * sigma_data / (s**2 + sigma_data**2).sqrt()
    c_noise = s.log() / 4
    return c_in, c_skip, c_out, c_noise


class ScoreNet(nn.Module):
    """Perceptron denoiser for vector data with a shared encoder.

    encoder: e1 (+ time embedding) -> e2 ; decoder: d1 -> out.
    The discriminator logit is the channel mean of e2's output (shape 1x1).
    """

    def __init__(
        self,
        dim: int,
        width: int = 128,
        emb_dim: int = 32,
        sigma_data: float = 0.5,
        logvar: bool = False,
        seed: int = 0,
    ):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.dim = dim
        self.sigma_data = sigma_data
        self.embed = FourierEmbedding(emb_dim, gen)
        self.emb = mp_linear(emb_dim, width, gen, bias=False)
        self.e1 = mp_linear(dim, width, gen)
        self.e2 = mp_linear(width, width, gen)
        self.d1 = mp_linear(width, width, gen)
        self.out = mp_linear(width, dim, gen)
        self.out_gain = nn.Parameter(torch.zeros((), dtype=DTYPE))
        self.logvar_head = mp_linear(emb_dim, 1, gen) if logvar else None

    def encode(self, x_t: torch.Tensor, draw: TimeDraw):
        a = draw.a.reshape(-1, 1)
        s = (draw.sigma / draw.a).reshape(-1, 1)
        x = x_t / a
        c_in, c_skip, c_out, c_noise = edm_coefficients(s, self.sigma_data)
        emb = self.embed(c_noise.reshape(-1))
        h = mp_silu(self.e1(c_in * x) + self.emb(emb))
        enc = self.e2(h)
        check_finite("scorenet.encoder", enc)
        return enc, emb, (x, c_skip, c_out)

    def decode(self, enc, ctx):
        x, c_skip, c_out = ctx
        h = mp_silu(self.d1(mp_silu(enc)))
        f = self.out(h, gain=self.out_gain)
        den = c_skip * x + c_out * f
        check_finite("scorenet.decoder", den)
        return den

    @staticmethod
    def pool(enc: torch.Tensor) -> torch.Tensor:
        return enc.mean(1).reshape(-1, 1, 1)

    def forward(self, x_t, draw: TimeDraw, flag=ReturnFlag.DECODER) -> ScoreNetOutput:
        flag = ReturnFlag(flag)
        enc, emb, ctx = self.encode(x_t, draw)
        out = ScoreNetOutput()
        if flag is not ReturnFlag.DECODER:
            out.disc_logits = self.pool(enc)
        if flag is not ReturnFlag.ENCODER:
            out.denoised = self.decode(enc, ctx)
        if self.logvar_head is not None:
            out.logvar = self.logvar_head(emb).reshape(-1)
        return out

    def disc_parameter_names(self) -> list[str]:
        """Parameters reachable from the discriminator output."""
        names = ["embed", "emb.", "e1.", "e2."]
        return [n for n, _ in self.named_parameters() if any(n.startswith(p) for p in names)]


class ConvScoreNet(nn.Module):
    """Two-level strided conv encoder with a mirrored decoder and skips.

    The discriminator map is the channel mean of the last encoder block, of
    size (H/4, W/4).
    """

    def __init__(
        self,
        shape: tuple[int, int, int],
        channels: int = 16,
        emb_dim: int = 32,
        sigma_data: float = 0.5,
        logvar: bool = False,
        seed: int = 0,
    ):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        C, H, W = shape
        if H % 4 or W % 4:
            raise ValueError("grid height and width must be divisible by 4")
        self.shape = tuple(shape)
        self.sigma_data = sigma_data
        c1, c2 = channels, 2 * channels
        self.embed = FourierEmbedding(emb_dim, gen)
        self.emb = mp_linear(emb_dim, c1, gen, bias=False)
        self.stem = mp_conv(C, c1, 3, gen)
        self.down1 = mp_conv(c1, c2, 3, gen, stride=2)
        self.down2 = mp_conv(c2, c2, 3, gen, stride=2)
        self.up2 = mp_conv(2 * c2, c2, 3, gen)
        self.up1 = mp_conv(c2 + c1, c1, 3, gen)
        self.out = mp_conv(c1, C, 3, gen)
        self.out_gain = nn.Parameter(torch.zeros((), dtype=DTYPE))
        self.logvar_head = mp_linear(emb_dim, 1, gen) if logvar else None

    def encode(self, x_t, draw: TimeDraw):
        a = draw.a.reshape(-1, 1, 1, 1)
        s = (draw.sigma / draw.a).reshape(-1, 1, 1, 1)
        x = x_t / a
        c_in, c_skip, c_out, c_noise = edm_coefficients(s, self.sigma_data)
        emb = self.embed(c_noise.reshape(-1))
        h0 = mp_silu(self.stem(c_in * x) + self.emb(emb)[:, :, None, None])
        h1 = mp_silu(self.down1(h0))
        enc = self.down2(h1)
        check_finite("convscorenet.encoder", enc)
        return enc, emb, (x, c_skip, c_out, h0, h1)

    def decode(self, enc, ctx):
        x, c_skip, c_out, h0, h1 = ctx
        u = F.interpolate(mp_silu(enc), scale_factor=2, mode="nearest")
        u = mp_silu(self.up2(torch.cat([u, h1], 1)))
        u = F.interpolate(u, scale_factor=2, mode="nearest")
        u = mp_silu(self.up1(torch.cat([u, h0], 1)))
        f = self.out(u, gain=self.out_gain)
        den = c_skip * x + c_out * f
        check_finite("convscorenet.decoder", den)
        return den

    @staticmethod
    def pool(enc):
        return enc.mean(1)

    forward = ScoreNet.forward

    def disc_parameter_names(self) -> list[str]:
        names = ["embed", "emb.", "stem.", "down1.", "down2."]
        return [n for n, _ in self.named_parameters() if any(n.startswith(p) for p in names)]


class Generator(nn.Module):
    """One-step generator: x_g = out(MLP(in_scale * x_in)) + skip * x_in.

    ``x_in = sigma_init * z`` is formed by :func:`forward_generator`. The final
    layer (gain, offset, skip) starts at gain 0, so the initial map is
    ``skip * sigma_init * z``: a near-identity noise-to-data map when
    ``skip = 1/sigma_init``.
    """

    def __init__(
        self,
        latent_dim: int,
        dim: int,
        width: int = 128,
        in_scale: float = 1.0,
        skip: float = 0.4,
        seed: int = 0,
    ):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.latent_dim = latent_dim
        self.dim = dim
        self.in_scale = in_scale
        self.l1 = mp_linear(latent_dim, width, gen)
        self.l2 = mp_linear(width, width, gen)
        self.l3 = mp_linear(width, width, gen)
        self.out = mp_linear(width, dim, gen)
        self.out_gain = nn.Parameter(torch.zeros((), dtype=DTYPE))
        self.skip = nn.Parameter(torch.tensor(float(skip), dtype=DTYPE))

    def forward(self, x_in: torch.Tensor) -> torch.Tensor:
        h = mp_silu(self.l1(self.in_scale * x_in))
        h = mp_silu(self.l2(h))
        h = mp_silu(self.l3(h))
        x = self.out(h, gain=self.out_gain)
        if self.latent_dim == self.dim:
            x = x + self.skip * x_in
        return check_finite("generator.output", x)


class ConvGenerator(nn.Module):
    """Small conv generator for grid data; latent has the data's shape."""

    def __init__(self, shape, channels: int = 16, in_scale: float = 1.0, skip: float = 0.4, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        C = shape[0]
        self.shape = tuple(shape)
        self.in_scale = in_scale
        self.c1 = mp_conv(C, channels, 3, gen)
        self.c2 = mp_conv(channels, channels, 3, gen)
        self.out = mp_conv(channels, C, 3, gen)
        self.out_gain = nn.Parameter(torch.zeros((), dtype=DTYPE))
        self.skip = nn.Parameter(torch.tensor(float(skip), dtype=DTYPE))

    def forward(self, x_in):
        h = mp_silu(self.c1(self.in_scale * x_in))
        h = mp_silu(self.c2(h))
        x = self.out(h, gain=self.out_gain) + self.skip * x_in
        return check_finite("generator.output", x)


class LinearGeneratorNet(nn.Module):
    """Affine generator x_g = W x_in + b, the closed-form test case."""

    def __init__(self, latent_dim: int, dim: int, init_scale: float = 1.0, seed: int = 0):
        super().__init__()
        self.latent_dim = latent_dim
        self.dim = dim
        eye = torch.eye(dim, latent_dim, dtype=DTYPE)
        self.W = nn.Parameter(init_scale * eye)
        self.b = nn.Parameter(torch.zeros(dim, dtype=DTYPE))

    def forward(self, x_in):
        return x_in @ self.W.T + self.b


def forward_generator(net: nn.Module, z: torch.Tensor, sigma_init: float) -> torch.Tensor:
    return net(sigma_init * z)


def forward_scorenet(net: nn.Module, x_t, draw: TimeDraw, flag=ReturnFlag.DECODER) -> ScoreNetOutput:
    if (draw.sigma <= 0).any():
        raise ValueError("sigma_t must be positive")
    return net(x_t, draw, flag)


@torch.no_grad()
def ema_update(ema: nn.Module, current: nn.Module, decay: float) -> nn.Module:
    if not 0 <= decay < 1:
        raise ValueError(f"decay must lie in [0, 1), got {decay}")
    cur = dict(current.named_parameters())
    for name, p in ema.named_parameters():
        c = cur[name]
        if c.shape != p.shape:
            raise ValueError(f"shape mismatch for {name}: {tuple(p.shape)} vs {tuple(c.shape)}")
        p.mul_(decay).add_(c, alpha=1 - decay)
    return ema


def parameter_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())
