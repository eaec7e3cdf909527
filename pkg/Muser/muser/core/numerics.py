"""Dense matrix helpers and the gradient checker.

Matrices are two-dimensional ``torch`` tensors. The oracle and
gradient-check paths run in float64; reverse-mode differentiation is
provided by torch autograd, so every differentiable helper here is an
ordinary tensor expression. Public helpers check their inputs for NaN/Inf
and raise :class:`NumericsError` instead of letting non-finite values
propagate into a contrastive loss.
"""
from __future__ import annotations

import logging
from typing import Callable, Iterable, List, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from .errors import NumericsError

logger = logging.getLogger(__name__)

DTYPE = torch.float64

MatrixLike = Union[torch.Tensor, np.ndarray, Sequence[Sequence[float]]]


def as_matrix(x: MatrixLike, *, name: str = "matrix") -> torch.Tensor:
    """Return ``x`` as a 2-D float64 tensor, keeping autograd history."""
    if isinstance(x, torch.Tensor):
        t = x if x.dtype == DTYPE else x.to(DTYPE)
    else:
        t = torch.as_tensor(np.asarray(x, dtype=np.float64))
    if t.dim() != 2:
        raise NumericsError(f"{name} must be 2-D, got shape {tuple(t.shape)}")
    return t


def check_finite(x: torch.Tensor, name: str = "value") -> torch.Tensor:
    if not bool(torch.isfinite(x).all()):
        raise NumericsError(f"{name} contains NaN or Inf")
    return x


def matmul(a: MatrixLike, b: MatrixLike) -> torch.Tensor:
    a = as_matrix(a, name="left operand")
    b = as_matrix(b, name="right operand")
    if a.shape[1] != b.shape[0]:
        raise NumericsError(
            f"matmul shape mismatch: {tuple(a.shape)} x {tuple(b.shape)}"
        )
    return check_finite(a @ b, "matmul result")


def softmax_rows(x: MatrixLike) -> torch.Tensor:
    """Row-wise softmax; torch subtracts the row max before exponentiating."""
    x = check_finite(as_matrix(x), "softmax input")
    return torch.softmax(x, dim=1)


def cross_entropy_diag(
    logits: MatrixLike, axis: str = "rows", reduction: str = "mean"
) -> torch.Tensor:
    """Cross-entropy where the target of row (or column) ``i`` is class ``i``.

    ``axis="rows"`` applies the softmax along each row, ``axis="cols"`` along
    each column. ``reduction`` is ``"mean"`` or ``"sum"`` over the ``n`` terms.
    """
    logits = check_finite(as_matrix(logits, name="logits"), "logits")
    n, m = logits.shape
    if n != m:
        raise NumericsError(f"cross_entropy_diag needs a square matrix, got {(n, m)}")
    if axis not in ("rows", "cols"):
        raise NumericsError(f"axis must be 'rows' or 'cols', got {axis!r}")
    if reduction not in ("mean", "sum"):
        raise NumericsError(f"reduction must be 'mean' or 'sum', got {reduction!r}")
    if axis == "cols":
        logits = logits.t()
    targets = torch.arange(n)
    return F.cross_entropy(logits, targets, reduction=reduction)


def l2_normalize_rows(x: MatrixLike, eps: float = 1e-12) -> torch.Tensor:
    """Divide each row by ``max(||row||, eps)``; zero rows stay zero."""
    if eps <= 0:
        raise NumericsError(f"eps must be positive, got {eps}")
    x = check_finite(as_matrix(x), "normalize input")
    return F.normalize(x, p=2.0, dim=1, eps=eps)


def _parameters(params: Union[torch.nn.Module, Iterable[torch.Tensor]]) -> List[torch.Tensor]:
    if isinstance(params, torch.nn.Module):
        return [p for p in params.parameters() if p.requires_grad]
    return list(params)


def grad_check(
    loss_fn: Callable[[object], torch.Tensor],
    params: Union[torch.nn.Module, Iterable[torch.Tensor]],
    eps: float = 1e-6,
) -> float:
    """Compare autograd gradients with central differences.

    ``loss_fn(params)`` must return a scalar tensor. Every parameter entry is
    perturbed by ``+eps`` and ``-eps`` in turn. Returns the largest
    ``|g_a - g_n| / max(|g_a|, |g_n|, 1e-8)`` over all entries.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise NumericsError(f"eps must lie in [1e-6, 1e-3], got {eps}")
    tensors = _parameters(params)
    for t in tensors:
        if t.dtype != DTYPE:
            raise NumericsError("grad_check requires float64 parameters")

    loss = loss_fn(params)
    if loss.dim() != 0:
        raise NumericsError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    with torch.no_grad():
        again = float(loss_fn(params))
    if float(loss.detach()) != again:
        raise NumericsError(
            f"loss_fn is not deterministic: {float(loss.detach())!r} != {again!r}"
        )
    analytic = torch.autograd.grad(loss, tensors, allow_unused=True)

    worst = 0.0
    with torch.no_grad():
        for t, g in zip(tensors, analytic):
            grad = torch.zeros_like(t) if g is None else g
            flat = t.detach().view(-1)
            flat_grad = grad.reshape(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + eps
                f_plus = float(loss_fn(params))
                flat[i] = orig - eps
                f_minus = float(loss_fn(params))
                flat[i] = orig
                g_n = (f_plus - f_minus) / (2.0 * eps)
                g_a = float(flat_grad[i])
                rel = abs(g_a - g_n) / max(abs(g_a), abs(g_n), 1e-8)
                worst = max(worst, rel)
    logger.debug("grad_check over %d tensors: max relative error %.3e", len(tensors), worst)
    return worst
