"""Diagnostics over guidance fields: evenness and divergence.

Evenness asks how uniformly the guidance magnitude spreads over the
grid; divergence asks how differently foreground and background
positions are guided, judged against a segmentation mask of the final
scale. Both scores live in [0, 1] and aggregate across steps by grid
area, so fine scales dominate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import PROB_SUM_TOL, GuidanceField, RunRecord, SegMask
from .errors import (
    AllZeroFieldError,
    ConfigError,
    DegenerateMaskError,
    EmptyBackgroundError,
    EmptyForegroundError,
    InvalidDimensionsError,
    LengthMismatchError,
    NoScoredStepsError,
    ShapeMismatchError,
    SingleTokenMapError,
)

#: Number of bins used when comparing magnitude distributions.
DIVERGENCE_BINS = 24


@dataclass(frozen=True, eq=False)
class TokenGuidanceDist:
    """Probability distribution of guidance magnitude over n tokens."""

    n: int
    probs: np.ndarray

    def __post_init__(self):
        arr = np.array(self.probs, dtype=np.float64, copy=True)
        arr.setflags(write=False)
        if arr.shape != (self.n,) or self.n < 1:
            raise ShapeMismatchError(f"distribution must be a vector of length {self.n}, got shape {arr.shape}")
        if not np.isfinite(arr).all() or arr.min() < 0.0:
            raise ConfigError("distribution entries must be finite and non-negative")
        if abs(float(arr.sum()) - 1.0) > PROB_SUM_TOL:
            raise ConfigError(f"distribution must sum to 1 within 1e-9, got {float(arr.sum())!r}")
        object.__setattr__(self, "probs", arr)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TokenGuidanceDist):
            return NotImplemented
        return self.n == other.n and np.array_equal(self.probs, other.probs)


@dataclass(frozen=True)
class StepScores:
    """Per-step diagnostic scores with the step's aggregation weight."""

    k: int
    evenness: float | None
    divergence: float | None
    weight: float

    def __post_init__(self):
        if self.weight <= 0 or not math.isfinite(self.weight):
            raise ConfigError(f"step weight must be positive and finite, got {self.weight!r}")
        for label, value in (("evenness", self.evenness), ("divergence", self.divergence)):
            if value is not None and not (math.isfinite(value) and 0.0 <= value <= 1.0):
                raise ConfigError(f"step {label} must be in [0, 1], got {value!r}")


def field_magnitudes(field: GuidanceField) -> np.ndarray:
    """Per-position L2 norm of the guidance vectors, unnormalized."""
    return np.sqrt(np.sum(field.values * field.values, axis=1))


def guidance_magnitudes(field: GuidanceField) -> TokenGuidanceDist:
    """Normalize per-position guidance norms into a distribution.

    Raises :class:`AllZeroFieldError` when every vector is zero, since
    no distribution exists then.
    """
    norms = field_magnitudes(field)
    total = float(norms.sum())
    if total == 0.0:
        raise AllZeroFieldError("guidance field is zero everywhere")
    return TokenGuidanceDist(field.num_positions, norms / total)


def pielou_evenness(dist: TokenGuidanceDist) -> float:
    """Shannon entropy of the distribution over its maximum, in [0, 1].

    Natural logarithms; zero-probability entries contribute nothing.
    Uniform distributions score 1, one-hot distributions score 0.
    """
    if dist.n < 2:
        raise SingleTokenMapError("evenness is undefined for a single-token distribution")
    p = dist.probs[dist.probs > 0.0]
    entropy = -float(np.sum(p * np.log(p)))
    return min(max(entropy / math.log(dist.n), 0.0), 1.0)


def _kl_bits(p: np.ndarray, m: np.ndarray) -> float:
    mask = p > 0.0
    return float(np.sum(p[mask] * np.log2(p[mask] / m[mask])))


def jsd(p: TokenGuidanceDist, q: TokenGuidanceDist) -> float:
    """Jensen-Shannon distance in base 2, so the range is [0, 1].

    The square root of the Jensen-Shannon divergence against the
    midpoint ``m = (p + q) / 2``. Symmetric, zero only for equal
    inputs, and satisfies the triangle inequality.
    """
    if p.n != q.n:
        raise LengthMismatchError(f"distributions differ in length: {p.n} vs {q.n}")
    m = (p.probs + q.probs) / 2.0
    divergence = 0.5 * _kl_bits(p.probs, m) + 0.5 * _kl_bits(q.probs, m)
    return min(math.sqrt(max(divergence, 0.0)), 1.0)


def downsample_mask(mask: SegMask, height: int, width: int) -> SegMask:
    """Area-downsample a mask; a cell is foreground at >= 50% coverage.

    Each output cell covers an equal-area rectangle of the input;
    fractional source pixels count by their overlap.
    """
    if height < 1 or width < 1:
        raise InvalidDimensionsError(f"target dimensions must be positive, got {(height, width)}")
    if height > mask.height or width > mask.width:
        raise InvalidDimensionsError(
            f"can only downsample: target {(height, width)} exceeds source {(mask.height, mask.width)}"
        )
    row_w = _overlap_weights(mask.height, height)
    col_w = _overlap_weights(mask.width, width)
    covered = row_w @ mask.bits.astype(np.float64) @ col_w.T
    cell_area = (mask.height / height) * (mask.width / width)
    bits = covered >= 0.5 * cell_area - 1e-12
    return SegMask(height, width, bits)


def _overlap_weights(source: int, target: int) -> np.ndarray:
    # weights[i, j] = length of overlap between target interval i and
    # source pixel j, measured in source pixels
    step = source / target
    starts = np.arange(target) * step
    ends = starts + step
    pix = np.arange(source)
    lo = np.maximum(starts[:, None], pix[None, :])
    hi = np.minimum(ends[:, None], pix[None, :] + 1.0)
    return np.clip(hi - lo, 0.0, None)


def weighted_mean_scores(steps: Sequence[StepScores]) -> tuple[float | None, float | None]:
    """Weighted means of per-step scores, one per score channel.

    Steps missing a channel are left out of that channel's mean; a
    channel nobody scored yields None. Raises
    :class:`NoScoredStepsError` when no step carries any score.
    """
    means: list[float | None] = []
    for pick in (lambda s: s.evenness, lambda s: s.divergence):
        scored = [(pick(s), s.weight) for s in steps if pick(s) is not None]
        if not scored:
            means.append(None)
            continue
        total = sum(w for _, w in scored)
        means.append(sum(v * w for v, w in scored) / total)
    if means[0] is None and means[1] is None:
        raise NoScoredStepsError("no step carries a score")
    return means[0], means[1]


def _histogram_dist(values: np.ndarray, lo: float, hi: float) -> TokenGuidanceDist:
    counts, _ = np.histogram(values, bins=DIVERGENCE_BINS, range=(lo, hi))
    return TokenGuidanceDist(DIVERGENCE_BINS, counts / counts.sum())


def _magnitude_jsd(fg_values: np.ndarray, bg_values: np.ndarray) -> float:
    lo = float(min(fg_values.min(), bg_values.min()))
    hi = float(max(fg_values.max(), bg_values.max()))
    if hi == lo:
        return 0.0
    return jsd(_histogram_dist(fg_values, lo, hi), _histogram_dist(bg_values, lo, hi))


def divergence_breakdown(run: RunRecord, mask: SegMask, seed: int) -> list[StepScores]:
    """Per-step foreground/background divergence of a recorded run.

    For every step after the first, the mask is area-downsampled to the
    step's grid and the distribution of guidance magnitudes on
    foreground cells is compared, by binning into a shared histogram,
    against the magnitudes of ``h*w`` background cells drawn uniformly
    with replacement. The comparison is the base-2 Jensen-Shannon
    distance, so disjoint magnitude ranges score 1 and an everywhere
    identical field scores 0.

    Steps whose downsampled mask has no foreground or no background
    cells are returned with divergence None. Evenness values recorded on
    the run are carried through for convenience.
    """
    if run.schedule.num_steps < 2:
        raise ConfigError("divergence needs a run with at least two steps")
    final_h, final_w = run.schedule.steps[-1]
    if (mask.height, mask.width) != (final_h, final_w):
        raise ShapeMismatchError(
            f"mask is {(mask.height, mask.width)}, final scale is {(final_h, final_w)}"
        )
    if mask.foreground_count == 0:
        raise EmptyForegroundError("mask has no foreground pixels")
    if mask.background_count == 0:
        raise EmptyBackgroundError("mask has no background pixels")
    rng = np.random.default_rng(seed)
    scores: list[StepScores] = []
    for k in range(1, run.schedule.num_steps):
        h, w = run.schedule.steps[k]
        entry = run.entries[k]
        cells = downsample_mask(mask, h, w).bits.ravel()
        norms = field_magnitudes(entry.guidance_field)
        fg = norms[cells]
        bg = norms[~cells]
        if fg.size == 0 or bg.size == 0:
            scores.append(StepScores(k, entry.evenness, None, float(h * w)))
            continue
        resampled = rng.choice(bg, size=h * w, replace=True)
        scores.append(StepScores(k, entry.evenness, _magnitude_jsd(fg, resampled), float(h * w)))
    return scores


def divergence_score(run: RunRecord, mask: SegMask, seed: int) -> float:
    """Area-weighted mean of the per-step divergences of a run.

    Deterministic for a fixed ``(run, mask, seed)``. Raises
    :class:`DegenerateMaskError` when the mask leaves every scored step
    without both foreground and background cells.
    """
    scores = divergence_breakdown(run, mask, seed)
    scored = [s for s in scores if s.divergence is not None]
    if not scored:
        raise DegenerateMaskError(
            "downsampled mask is single-sided at every step; no divergence to score"
        )
    _, divergence = weighted_mean_scores(scored)
    assert divergence is not None
    return divergence
