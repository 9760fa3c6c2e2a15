"""Guidance schemes for combining conditional and unconditional logits.

All schemes share one structure: they add a guidance field to the
unconditional logits. The classifier-free scheme uses the scaled
difference of the pair directly. The information-grounding scheme
reweights that difference with a parameter-free self-attention over the
per-position guidance vectors, which concentrates the signal on
positions whose vectors agree with their neighbours. A windowed variant
restricts the attention to a local neighbourhood, and a mixed scheme
adds both components with separate weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import (
    PROB_SUM_TOL,
    SCHEME_KINDS,
    GuidanceField,
    LogitTensor,
    ScaleSchedule,
    VocabSpec,
    validate_pair,
)
from .errors import ConfigError, NonFiniteValueError, ShapeMismatchError


def default_window_rule(height: int, width: int) -> float:
    """Default attention window side: the geometric mean of the grid sides."""
    return math.sqrt(height * width)


@dataclass(frozen=True, eq=False)
class AttentionMatrix:
    """Row-stochastic attention over grid positions.

    Rows sum to one within 1e-9. Entries are zero only where a window
    rule masked the pair; unmasked entries are strictly positive.
    """

    num_positions: int
    values: np.ndarray

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float64, copy=True)
        arr.setflags(write=False)
        n = self.num_positions
        if arr.shape != (n, n):
            raise ShapeMismatchError(f"attention matrix must have shape {(n, n)}, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise NonFiniteValueError("attention matrix contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ConfigError("attention entries must lie in [0, 1]")
        sums = arr.sum(axis=1)
        if np.abs(sums - 1.0).max() > PROB_SUM_TOL:
            raise ConfigError("attention rows must sum to 1 within 1e-9")
        object.__setattr__(self, "values", arr)

    def __eq__(self, other) -> bool:
        if not isinstance(other, AttentionMatrix):
            return NotImplemented
        return self.num_positions == other.num_positions and np.array_equal(self.values, other.values)


@dataclass(frozen=True)
class GuidanceScheme:
    """Which guidance combination a run applies.

    ``window_rule`` maps ``(height, width)`` to a window side length and
    only applies to kind ``igg_windowed``; None selects
    :func:`default_window_rule`.
    """

    kind: str
    window_rule: Callable[[int, int], float] | None = None

    def __post_init__(self):
        if self.kind not in SCHEME_KINDS:
            raise ConfigError(f"scheme kind must be one of {SCHEME_KINDS}, got {self.kind!r}")
        if self.window_rule is not None and self.kind != "igg_windowed":
            raise ConfigError("window_rule only applies to the igg_windowed scheme")


def _check_finite_scale(value: float, label: str):
    if not math.isfinite(value):
        raise ConfigError(f"{label} must be finite, got {value!r}")


def nudge(uncond: LogitTensor, cond: LogitTensor, gamma_k: float) -> GuidanceField:
    """Scaled difference of the pair: ``gamma_k * (cond - uncond)``."""
    validate_pair(uncond, cond)
    _check_finite_scale(gamma_k, "gamma_k")
    values = gamma_k * (cond.values - uncond.values)
    return GuidanceField(uncond.height, uncond.width, uncond.vocab, values)


def cfg_guide(uncond: LogitTensor, cond: LogitTensor, lambda_k: float) -> LogitTensor:
    """Classifier-free combination ``(1 + lambda_k) * cond - lambda_k * uncond``.

    Algebraically this equals ``uncond + nudge(uncond, cond, 1 + lambda_k)``;
    at ``lambda_k = 0`` it returns the conditional logits unchanged.
    """
    validate_pair(uncond, cond)
    _check_finite_scale(lambda_k, "lambda_k")
    values = (1.0 + lambda_k) * cond.values - lambda_k * uncond.values
    return LogitTensor(uncond.height, uncond.width, uncond.vocab, values)


def _pairwise_scores(field: GuidanceField, vocab: VocabSpec) -> np.ndarray:
    g = field.values
    with np.errstate(over="ignore"):
        scores = (g @ g.T) / math.sqrt(vocab.size)
    if not np.isfinite(scores).all():
        raise NonFiniteValueError("attention scores overflowed; guidance values too large")
    return scores


def _row_softmax(scores: np.ndarray) -> np.ndarray:
    # max-subtraction keeps exp() in range; -inf entries from window
    # masking survive as exact zeros
    shifted = scores - scores.max(axis=1, keepdims=True)
    weights = np.exp(shifted)
    return weights / weights.sum(axis=1, keepdims=True)


def attention_weights(field: GuidanceField, vocab: VocabSpec) -> AttentionMatrix:
    """Self-attention of the guidance field over grid positions.

    Scores are inner products of per-position guidance vectors divided
    by ``sqrt(vocab.size)``, then softmax-normalized per row. The vocab
    argument sets that temperature; a larger vocabulary flattens rows.
    """
    scores = _pairwise_scores(field, vocab)
    return AttentionMatrix(field.num_positions, _row_softmax(scores))


def apply_attention(uncond: LogitTensor, field: GuidanceField, attention: AttentionMatrix) -> LogitTensor:
    """Add the attention-weighted field to the unconditional logits."""
    if (field.height, field.width) != (uncond.height, uncond.width) or field.vocab != uncond.vocab:
        raise ShapeMismatchError("guidance field and unconditional logits must agree in shape and vocab")
    if attention.num_positions != field.num_positions:
        raise ShapeMismatchError(
            f"attention is over {attention.num_positions} positions, field has {field.num_positions}"
        )
    values = uncond.values + attention.values @ field.values
    return LogitTensor(uncond.height, uncond.width, uncond.vocab, values)


def igg_guide(uncond: LogitTensor, cond: LogitTensor, gamma_k: float, vocab: VocabSpec) -> LogitTensor:
    """Information-grounding combination: attention-reweighted nudge.

    Equals ``uncond + A @ F`` with ``F = nudge(uncond, cond, gamma_k)``
    and ``A = attention_weights(F, vocab)``.
    """
    field = nudge(uncond, cond, gamma_k)
    attention = attention_weights(field, vocab)
    return apply_attention(uncond, field, attention)


def _chebyshev_outside(height: int, width: int, radius: int) -> np.ndarray:
    rows = np.arange(height * width) // width
    cols = np.arange(height * width) % width
    dist = np.maximum(
        np.abs(rows[:, None] - rows[None, :]),
        np.abs(cols[:, None] - cols[None, :]),
    )
    return dist > radius


def igg_guide_windowed(
    uncond: LogitTensor,
    cond: LogitTensor,
    gamma_k: float,
    vocab: VocabSpec,
    window_rule: Callable[[int, int], float] | None = None,
) -> LogitTensor:
    """Information-grounding combination with a local attention window.

    ``window_rule(height, width)`` gives the window side length; scores
    between positions whose Chebyshev grid distance exceeds
    ``floor(window / 2)`` are masked before the softmax. Once the window
    covers the whole grid the output is bit-equal to :func:`igg_guide`.
    """
    rule = window_rule if window_rule is not None else default_window_rule
    window = rule(uncond.height, uncond.width)
    if not (math.isfinite(window) and window >= 1.0):
        raise ConfigError(f"window side must be a finite value >= 1, got {window!r}")
    field = nudge(uncond, cond, gamma_k)
    scores = _pairwise_scores(field, vocab)
    radius = int(window // 2)
    if radius < max(uncond.height - 1, uncond.width - 1):
        outside = _chebyshev_outside(uncond.height, uncond.width, radius)
        scores = np.where(outside, -np.inf, scores)
    attention = AttentionMatrix(field.num_positions, _row_softmax(scores))
    return apply_attention(uncond, field, attention)


def mixed_guide(
    uncond: LogitTensor,
    cond: LogitTensor,
    gamma_k: float,
    gamma_k_prime: float,
    vocab: VocabSpec,
) -> LogitTensor:
    """Sum of both guidance components with separate weights.

    Returns ``uncond + gamma_k * (cond - uncond) + A' @ F'`` where
    ``F' = nudge(uncond, cond, gamma_k_prime)`` and ``A'`` is its
    attention. With ``gamma_k_prime = 0`` the second term vanishes and
    the combination is the plain scaled nudge; with ``gamma_k = 0`` it
    reproduces ``igg_guide`` at ``gamma_k_prime``.
    """
    validate_pair(uncond, cond)
    _check_finite_scale(gamma_k, "gamma_k")
    base = cond.values - uncond.values
    field = nudge(uncond, cond, gamma_k_prime)
    attention = attention_weights(field, vocab)
    values = uncond.values + gamma_k * base + attention.values @ field.values
    return LogitTensor(uncond.height, uncond.width, uncond.vocab, values)


def guided_logits(
    scheme: GuidanceScheme,
    uncond: LogitTensor,
    cond: LogitTensor,
    schedule: ScaleSchedule,
    k: int,
) -> LogitTensor:
    """Apply a scheme at step k using the schedule's weights."""
    if scheme.kind == "none":
        validate_pair(uncond, cond)
        return cond
    if scheme.kind == "cfg":
        return cfg_guide(uncond, cond, schedule.lam(k))
    if scheme.kind == "igg":
        return igg_guide(uncond, cond, schedule.gamma(k), cond.vocab)
    if scheme.kind == "igg_windowed":
        return igg_guide_windowed(uncond, cond, schedule.gamma(k), cond.vocab, scheme.window_rule)
    if scheme.kind == "mixed":
        return mixed_guide(uncond, cond, schedule.gamma(k), schedule.gamma_secondary(k), cond.vocab)
    raise ConfigError(f"unknown scheme kind {scheme.kind!r}")
