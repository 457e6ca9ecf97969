"""Numeric substrate: float64 torch tensors, reverse-mode gradients, and a
finite-difference checker used as the independent oracle in tests."""

from __future__ import annotations

from typing import Callable, Iterable, Mapping

import torch

DTYPE = torch.float64


class NumericFailure(RuntimeError):
    """Raised when a loss or activation stops being finite."""

    def __init__(self, name: str, detail: str = ""):
        self.name = name
        msg = f"non-finite value in {name!r}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


def set_deterministic(threads: int = 1) -> None:
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


def as_tensor(x, dtype=DTYPE) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(x, dtype=dtype)


def check_finite(name: str, x: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(x).all():
        bad = (~torch.isfinite(x)).sum().item()
        raise NumericFailure(name, f"{bad} of {x.numel()} entries")
    return x


def detach(x: torch.Tensor) -> torch.Tensor:
    """Same values, no gradient path."""
    return x.detach()


def _trace_nonfinite(loss: torch.Tensor) -> str:
    # Walk the autograd graph to the earliest node whose output went non-finite.
    # Only the loss itself is reachable after the fact, so report the op chain.
    names = []
    fn = loss.grad_fn
    seen = set()
    while fn is not None and id(fn) not in seen and len(names) < 8:
        seen.add(id(fn))
        names.append(type(fn).__name__)
        nxt = [f for f, _ in fn.next_functions if f is not None]
        fn = nxt[0] if nxt else None
    return " <- ".join(names)


def grad(
    loss_fn: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor] | Iterable[torch.Tensor],
) -> dict[str, torch.Tensor] | list[torch.Tensor]:
    """Gradient of the scalar returned by ``loss_fn`` with respect to ``params``.

    ``params`` may be a name->tensor mapping (returns a dict) or a sequence
    (returns a list). Parameters that the loss does not touch get zeros.
    """
    named = isinstance(params, Mapping)
    names = list(params.keys()) if named else None
    tensors = list(params.values()) if named else list(params)
    loss = loss_fn()
    if loss.numel() != 1:
        raise ValueError(f"loss must be scalar, got shape {tuple(loss.shape)}")
    if not torch.isfinite(loss).all():
        raise NumericFailure("loss", _trace_nonfinite(loss))
    if not loss.requires_grad:
        grads = [None] * len(tensors)
    else:
        grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    out = [torch.zeros_like(p) if g is None else g for p, g in zip(tensors, grads)]
    if named:
        return dict(zip(names, out))
    return out


@torch.no_grad()
def finite_difference_grad(
    loss_fn: Callable[[], torch.Tensor],
    params: Iterable[torch.Tensor],
    h: float = 1e-5,
) -> list[torch.Tensor]:
    """Central differences, perturbing parameters in place one entry at a time."""
    out = []
    for p in params:
        g = torch.zeros_like(p)
        flat = p.view(-1)
        gflat = g.view(-1)
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + h
            up = loss_fn().item()
            flat[i] = old - h
            down = loss_fn().item()
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
        out.append(g)
    return out


def relative_error(a: torch.Tensor, b: torch.Tensor, floor: float = 1e-8) -> float:
    """max |a-b| / max(|a|_max, |b|_max, floor) over all entries."""
    num = (a - b).abs().max().item()
    den = max(a.abs().max().item(), b.abs().max().item(), floor)
    return num / den


def gradcheck(
    loss_fn: Callable[[], torch.Tensor],
    params: Iterable[torch.Tensor],
    h: float = 1e-5,
) -> float:
    """Worst relative error between reverse-mode and central-difference gradients."""
    params = list(params)
    analytic = grad(loss_fn, params)
    numeric = finite_difference_grad(loss_fn, params, h)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))
