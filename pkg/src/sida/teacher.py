"""Teachers: the exact mixture oracle, a corrupted mixture, or a learned network.

All three expose the same call: ``teacher(x_t, draw) -> denoised``. Gradients
flow through ``x_t`` only; learned teacher parameters are frozen.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Optional

import torch
from torch import nn

from .analytic import MixtureModel, corrupt_teacher, gmm_denoiser, gmm_sample
from .diffmath import DTYPE
from .nets import ReturnFlag, ScoreNet
from .schedule import NoiseSchedule, TimeDraw, diffuse, sample_fakescore_time

TEACHER_MODES = ("exact", "corrupted", "learned")


@dataclass
class Teacher:
    mode: str
    data: MixtureModel
    model: Optional[MixtureModel] = None  # mixture the teacher believes in
    net: Optional[nn.Module] = None
    report: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in TEACHER_MODES:
            raise ValueError(f"unknown teacher mode {self.mode!r}")
        if self.mode == "learned":
            if self.net is None:
                raise ValueError("learned teacher needs a network")
            self.net.eval()
            for p in self.net.parameters():
                p.requires_grad_(False)
        elif self.model is None:
            self.model = self.data

    def __call__(self, x_t: torch.Tensor, draw: TimeDraw) -> torch.Tensor:
        if self.mode == "learned":
            return self.net(x_t, draw, ReturnFlag.DECODER).denoised
        shape = x_t.shape
        return gmm_denoiser(self.model, x_t.reshape(shape[0], -1), draw).reshape(shape)

    def sample_beliefs(self, n: int, gen: torch.Generator) -> torch.Tensor:
        """Draw clean samples from what the teacher models (data for learned)."""
        return gmm_sample(self.model if self.model is not None else self.data, n, gen)


def teacher_oracle(teacher: Teacher, x_t: torch.Tensor, draw: TimeDraw) -> torch.Tensor:
    return teacher(x_t, draw)


def make_teacher(mode: str, data: MixtureModel, strength: float = 0.0, seed: int = 0) -> Teacher:
    if mode == "exact":
        return Teacher("exact", data)
    if mode == "corrupted":
        gen = torch.Generator().manual_seed(seed)
        return Teacher("corrupted", data, model=corrupt_teacher(data, strength, gen))
    raise ValueError("learned teachers are built with pretrain_teacher or load_teacher")


def denoising_gap(teacher: Teacher, schedule: NoiseSchedule, n: int, gen: torch.Generator) -> float:
    """Mean ||f_phi - f_phi*|| over diffused data, the teacher-bias number."""
    x0 = gmm_sample(teacher.data, n, gen)
    draw = sample_fakescore_time(gen, schedule, n)
    x_t = diffuse(x0, draw, torch.randn(x0.shape, generator=gen, dtype=DTYPE))
    with torch.no_grad():
        est = teacher(x_t, draw)
        exact = gmm_denoiser(teacher.data, x_t, draw)
    return (est - exact).norm(dim=1).mean().item()


def pretrain_teacher(
    data: MixtureModel,
    schedule: NoiseSchedule,
    budget: int,
    gen: torch.Generator,
    width: int = 128,
    emb_dim: int = 32,
    sigma_data: float = 0.5,
    batch_size: int = 64,
    lr: float = 1e-3,
    net_seed: int = 0,
    eval_samples: int = 4096,
) -> Teacher:
    """Denoising score matching on data draws: min gamma ||f(x_t) - x_0||^2."""
    if budget < 1000:
        raise ValueError(f"teacher budget must be >= 1000 samples, got {budget}")
    net = ScoreNet(data.dim, width, emb_dim, sigma_data, seed=net_seed)
    opt = torch.optim.Adam(net.parameters(), lr=lr, betas=(0.9, 0.999), eps=1e-8)
    seen = 0
    final = float("nan")
    while seen < budget:
        x0 = gmm_sample(data, batch_size, gen)
        draw = sample_fakescore_time(gen, schedule, batch_size)
        x_t = diffuse(x0, draw, torch.randn(x0.shape, generator=gen, dtype=DTYPE))
        den = net(x_t, draw).denoised
        loss = (draw.gamma * ((den - x0) ** 2).sum(1)).mean()
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        final = loss.item()
        seen += batch_size
    opt.zero_grad(set_to_none=True)
    teacher = Teacher("learned", data, net=net)
    teacher.report = {
        "budget": budget,
        "final_loss": final,
        "denoising_gap": denoising_gap(teacher, schedule, eval_samples, gen),
    }
    return teacher


def copy_teacher_net(teacher: Teacher) -> nn.Module:
    """Trainable copy of a learned teacher's network (psi <- phi)."""
    net = copy.deepcopy(teacher.net)
    net.train()
    for p in net.parameters():
        p.requires_grad_(True)
    return net
