"""Tri-modal contrastive objective.

Text is the anchor modality: audio-text and spectrum-text logit matrices are
scored with cross-entropy along both axes, and the four directed terms are
averaged. Logits are ``E_Q @ E_K.T * exp(tau)`` on unit-norm embeddings, so
the positive pair stays in the softmax denominator.

:func:`eq2_strict_loss` evaluates the alternative pairwise formulation with
the positive excluded from the denominator and similarities divided by
``tau``. It can go negative and is only a diagnostic; training never uses it.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple, Union

import torch

from .errors import NumericsError
from .numerics import as_matrix, check_finite, cross_entropy_diag

Scalar = Union[float, torch.Tensor]


@dataclass(frozen=True)
class LogitMatrix:
    values: torch.Tensor
    tau_used: float


def _tau_tensor(tau: Scalar) -> torch.Tensor:
    if isinstance(tau, torch.Tensor):
        return tau
    return torch.tensor(float(tau), dtype=torch.float64)


def _check_pair(eq: torch.Tensor, ek: torch.Tensor) -> None:
    if eq.shape != ek.shape:
        raise NumericsError(
            f"embedding batches differ in shape: {tuple(eq.shape)} vs {tuple(ek.shape)}"
        )


def logits(
    eq: torch.Tensor,
    ek: torch.Tensor,
    tau: Scalar,
    *,
    scale: Optional[torch.Tensor] = None,
) -> LogitMatrix:
    """``eq @ ek.T * exp(tau)``; ``scale`` replaces ``exp(tau)`` when given (clamped scale)."""
    eq = as_matrix(eq, name="query embeddings")
    ek = as_matrix(ek, name="key embeddings")
    _check_pair(eq, ek)
    tau_t = _tau_tensor(tau)
    if scale is None:
        scale = torch.exp(tau_t)
    values = check_finite(eq @ ek.t() * scale, "logits")
    return LogitMatrix(values=values, tau_used=float(tau_t.detach()))


def pair_loss(lm: LogitMatrix, reduction: str = "mean") -> Tuple[torch.Tensor, torch.Tensor]:
    """(row-wise, column-wise) diagonal cross-entropy of one logit matrix."""
    return (
        cross_entropy_diag(lm.values, "rows", reduction),
        cross_entropy_diag(lm.values, "cols", reduction),
    )


def muser_loss(
    E_A: torch.Tensor,
    E_T: torch.Tensor,
    E_S: Optional[torch.Tensor],
    tau: Scalar,
    *,
    spectrum_enabled: bool = True,
    reduction: str = "mean",
    scale: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Average of the audio-text and spectrum-text directed losses.

    With ``spectrum_enabled=False`` only the two audio-text terms are
    averaged and ``E_S`` is ignored. ``reduction="sum"`` sums the per-example
    losses instead of averaging them over the batch.
    """
    l_at, l_ta = pair_loss(logits(E_A, E_T, tau, scale=scale), reduction)
    if not spectrum_enabled:
        return (l_at + l_ta) / 2
    if E_S is None:
        raise NumericsError("spectrum embeddings required when the spectrum branch is enabled")
    l_st, l_ts = pair_loss(logits(E_S, E_T, tau, scale=scale), reduction)
    return (l_at + l_ta + l_st + l_ts) / 4


def eq2_strict_loss(E_Q: torch.Tensor, E_K: torch.Tensor, tau: Scalar) -> torch.Tensor:
    """Mean of ``-log(exp(d_ii/tau) / sum_{j != i} exp(d_ij/tau))``."""
    E_Q = as_matrix(E_Q, name="query embeddings")
    E_K = as_matrix(E_K, name="key embeddings")
    _check_pair(E_Q, E_K)
    n = E_Q.shape[0]
    if n < 2:
        raise NumericsError("the strict pairwise loss needs at least 2 examples")
    tau_t = _tau_tensor(tau)
    if float(tau_t.detach()) == 0.0:
        raise NumericsError("tau must be non-zero for the strict pairwise loss")
    d = E_Q @ E_K.t() / tau_t
    off_diag = d.masked_fill(torch.eye(n, dtype=torch.bool), float("-inf"))
    per_row = torch.logsumexp(off_diag, dim=1) - torch.diagonal(d)
    return check_finite(per_row.mean(), "strict pairwise loss")
