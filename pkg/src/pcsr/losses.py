"""Adaptation losses: reliable entropy, similarity weighting, and bookkeeping.

The entropy mask is a constant during backward (no gradient flows through the
indicator), and masked samples contribute exactly zero gradient because their
entropies are multiplied by an exact 0. The balance weight is the kept
fraction of the batch, so a fully masked batch carries no update signal at
all.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .tensor import Tensor


@dataclass
class LossBreakdown:
    """Per-batch loss record (plain floats; the differentiable loss lives on the tape)."""

    entropy_loss: float          # L_e, nats
    similarity_loss: float       # L_s, dimensionless in [-1, 1]
    balance: float               # lambda = (kept samples) / B
    mask: np.ndarray             # {0,1}^B, 1 = kept (entropy below threshold)
    combined: float              # L = L_e + lambda * L_s
    entropy_mean: float          # unmasked mean entropy, for logging
    finite: bool = True          # False when the step was skipped on non-finite loss

    @property
    def kept(self) -> int:
        return int(self.mask.sum())

    @property
    def masked_fraction(self) -> float:
        """Fraction of the batch filtered out by the entropy threshold."""
        return 1.0 - self.balance


def entropy_threshold(n_classes: int, coeff: float = 0.4) -> float:
    """The reliability cutoff: coeff * ln(n_classes)."""
    if coeff <= 0:
        raise ConfigError(f"entropy threshold coefficient must be > 0, got {coeff}")
    return coeff * math.log(n_classes)


def entropy(probs: Tensor) -> Tensor:
    """Shannon entropy in nats per row of a [B,C] probability matrix."""
    if probs.ndim != 2:
        raise ContractError(f"entropy expects [B,C] probabilities, got {list(probs.dims)}")
    sums = probs.data.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-4):
        worst = float(np.abs(sums - 1.0).max())
        raise ContractError(f"entropy input rows must sum to 1 (worst deviation {worst:.2e})")
    return -T.xlogx(probs).sum(axis=1)


def reliable_entropy_loss(logits: Tensor, threshold: float) -> tuple[Tensor, np.ndarray, Tensor]:
    """Masked mean entropy over a batch of logits.

    Returns (scalar loss, constant 0/1 mask, per-sample entropy tensor). A
    sample is kept iff its prediction entropy is strictly below `threshold`.
    """
    if threshold <= 0:
        raise ConfigError(f"entropy threshold must be > 0, got {threshold}")
    probs = T.softmax(logits, axis=1)
    ent = entropy(probs)
    mask = (ent.data < threshold).astype(logits.data.dtype)
    batch = logits.dims[0]
    loss = (ent * Tensor(mask, dtype=logits.data.dtype)).sum() * (1.0 / batch)
    return loss, mask, ent


def combined_loss(entropy_term: Tensor, mask: np.ndarray,
                  similarity_term: Tensor | None,
                  entropies: np.ndarray) -> tuple[Tensor, LossBreakdown]:
    """L = L_e + lambda * L_s with lambda = (mask sum) / B.

    `similarity_term` may be None for methods that do not use it; the reported
    similarity loss is then 0 and the identity L = L_e + lambda * 0 holds.
    """
    batch = len(mask)
    if batch == 0:
        raise ContractError("combined_loss on an empty batch")
    lam = float(mask.sum()) / batch
    if similarity_term is not None:
        total = entropy_term + similarity_term * lam
        sim_value = similarity_term.item()
    else:
        total = entropy_term
        sim_value = 0.0
    le = entropy_term.item()
    breakdown = LossBreakdown(
        entropy_loss=le,
        similarity_loss=sim_value,
        balance=lam,
        mask=mask.copy(),
        combined=le + lam * sim_value,
        entropy_mean=float(entropies.mean()) if len(entropies) else 0.0,
        finite=bool(np.isfinite(total.data).all()),
    )
    return total, breakdown
