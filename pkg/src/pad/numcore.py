"""Dense tensor primitives with reverse-mode differentiation.

Tensors are plain ``torch.Tensor`` objects; autograd records the graph. The
functions here pin down the exact numerics the network relies on (tanh GELU,
max-subtracted softmax, biased-variance layer norm without affine) and add a finite-difference
gradient checker that never touches autograd on the reference side.
"""

from __future__ import annotations

import math
from typing import Callable

import torch
import torch.nn.functional as F
from torch import Tensor

__all__ = [
    "NonFiniteError",
    "ShapeError",
    "tensor",
    "check_finite",
    "matmul",
    "softmax",
    "layer_norm",
    "gelu",
    "silu",
    "backward",
    "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared where finite values are required."""


def tensor(data, *, dtype=torch.float32, requires_grad: bool = False) -> Tensor:
    t = torch.as_tensor(data, dtype=dtype).clone()
    check_finite(t)
    return t.requires_grad_(requires_grad)


def check_finite(x: Tensor, what: str = "tensor") -> Tensor:
    if not bool(torch.isfinite(x).all()):
        raise NonFiniteError(f"{what} contains non-finite values")
    return x


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; only leading batch dims may broadcast."""
    if a.dim() < 2 or b.dim() < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner dims differ: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.dim() <= axis < x.dim():
        raise ShapeError(f"axis {axis} invalid for {x.dim()}-d tensor")
    # torch subtracts the running max internally
    return F.softmax(x, dim=axis)


def layer_norm(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean, unit (biased) variance. No affine."""
    if x.shape[-1] < 2:
        raise ShapeError("layer_norm needs a last dim of at least 2")
    return F.layer_norm(x, x.shape[-1:], eps=eps)


def gelu(x: Tensor) -> Tensor:
    # tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
    return F.gelu(x, approximate="tanh")


def silu(x: Tensor) -> Tensor:
    return F.silu(x)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.numel() != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    check_finite(loss.detach(), "loss")
    loss.reshape(()).backward()


def grad_check(
    f: Callable[..., Tensor],
    *xs: Tensor,
    eps: float = 1e-4,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central differences.

    ``f`` maps the inputs to a scalar. Inputs are promoted to float64. The
    relative error per element uses ``max(|a|, |b|, 1e-8)`` as denominator.
    ``max_coords`` limits differencing to a seeded random subset of that many
    elements per input (all elements by default).
    """
    inputs = [x.detach().to(torch.float64).clone() for x in xs]
    leaves = [x.clone().requires_grad_(True) for x in inputs]
    out = f(*leaves)
    if out.numel() != 1:
        raise ShapeError("grad_check needs a scalar-valued function")
    check_finite(out.detach(), "f(x)")
    analytic = torch.autograd.grad(out.reshape(()), leaves, allow_unused=True)

    worst = 0.0
    with torch.no_grad():
        for idx, x in enumerate(inputs):
            a = analytic[idx]
            a = torch.zeros_like(x) if a is None else a
            flat = x.view(-1)
            coords = torch.arange(flat.numel())
            if max_coords is not None and flat.numel() > max_coords:
                g = torch.Generator().manual_seed(seed + idx)
                coords = torch.randperm(flat.numel(), generator=g)[:max_coords]
            numeric = torch.empty(len(coords), dtype=torch.float64)
            for n, j in enumerate(coords.tolist()):
                orig = flat[j].item()
                flat[j] = orig + eps
                hi = float(f(*inputs))
                flat[j] = orig - eps
                lo = float(f(*inputs))
                flat[j] = orig
                if not (math.isfinite(hi) and math.isfinite(lo)):
                    raise NonFiniteError("f produced a non-finite value during differencing")
                numeric[n] = (hi - lo) / (2.0 * eps)
            a = a.reshape(-1)[coords]
            denom = torch.maximum(torch.maximum(a.abs(), numeric.abs()), torch.tensor(1e-8, dtype=torch.float64))
            err = ((a - numeric).abs() / denom).max().item() if len(coords) else 0.0
            worst = max(worst, err)
    return worst
