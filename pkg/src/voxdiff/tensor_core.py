"""Dense tensor plumbing on top of torch.

torch provides the array storage and reverse-mode differentiation. This module
pins down the small contract the rest of the package relies on: precision
modes, a gradient tape that only reports tracked tensors, shape checks with
readable errors, and an independent central finite-difference oracle used by
the gradient tests.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Iterator

import torch
import torch.nn.functional as F

TRAIN_DTYPE = torch.float32
CHECK_DTYPE = torch.float64


class ShapeError(ValueError):
    pass


def check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str = "operands") -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(
            f"shape mismatch between {what}: {list(a.shape)} vs {list(b.shape)}"
        )


def as_tensor(x, dtype: torch.dtype | None = None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(x, dtype=dtype or TRAIN_DTYPE)


@contextlib.contextmanager
def precision(dtype: torch.dtype) -> Iterator[None]:
    """Temporarily switch the default floating dtype (e.g. to 64-bit for grad checks)."""
    old = torch.get_default_dtype()
    torch.set_default_dtype(dtype)
    try:
        yield
    finally:
        torch.set_default_dtype(old)


def softplus(x: torch.Tensor) -> torch.Tensor:
    return F.softplus(x)


def relu(x: torch.Tensor) -> torch.Tensor:
    # torch's relu backward yields 0 at exactly 0, the convention we want
    return torch.relu(x)


class GradTape:
    """Records which tensors are tracked and returns their gradients.

    Gradients are reported only for tensors passed to :meth:`watch`; anything
    else is absent from the returned map rather than zero-filled.
    """

    def __init__(self) -> None:
        self._watched: dict[str, torch.Tensor] = {}

    def watch(self, tensor: torch.Tensor, name: str | None = None) -> torch.Tensor:
        if not tensor.requires_grad:
            tensor = tensor.detach().requires_grad_(True)
        key = name if name is not None else f"t{len(self._watched)}"
        self._watched[key] = tensor
        return tensor

    def watch_module(self, module: torch.nn.Module) -> None:
        for name, p in module.named_parameters():
            self._watched[name] = p

    @property
    def watched(self) -> dict[str, torch.Tensor]:
        return dict(self._watched)

    def gradient(self, loss: torch.Tensor) -> dict[str, torch.Tensor]:
        return backward(self, loss)


def backward(tape: GradTape, loss: torch.Tensor) -> dict[str, torch.Tensor]:
    if loss.numel() != 1:
        raise ShapeError(f"loss must be a scalar, got shape {list(loss.shape)}")
    if loss.grad_fn is None:
        raise ValueError("loss was not produced from any tensor tracked on this tape")
    names = list(tape.watched)
    tensors = [tape.watched[n] for n in names]
    grads = torch.autograd.grad(loss.reshape(()), tensors, allow_unused=True)
    return {n: g for n, g in zip(names, grads) if g is not None}


def finite_difference_grad(
    fn: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    step: float = 1e-5,
    indices: Iterable[int] | None = None,
) -> torch.Tensor:
    """Central differences of the scalar ``fn`` w.r.t. entries of ``x``.

    When ``indices`` is given only those flat entries are probed; the others
    are left as NaN in the result.
    """
    base = x.detach().clone()
    flat = base.reshape(-1)
    out = torch.full_like(flat, float("nan"))
    idx = range(flat.numel()) if indices is None else indices
    with torch.no_grad():
        for i in idx:
            orig = flat[i].item()
            flat[i] = orig + step
            hi = float(fn(base))
            flat[i] = orig - step
            lo = float(fn(base))
            flat[i] = orig
            out[i] = (hi - lo) / (2 * step)
    return out.reshape(x.shape)


def relative_error(a: torch.Tensor, b: torch.Tensor, floor: float = 1e-8) -> float:
    """max |a - b| / max(max |b|, floor) over the compared entries."""
    mask = ~torch.isnan(b)
    diff = (a[mask] - b[mask]).abs().max().item()
    scale = max(b[mask].abs().max().item(), floor)
    return diff / scale
