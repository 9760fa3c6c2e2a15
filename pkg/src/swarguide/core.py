"""Core value types for scale-wise token sampling.

A sampling run predicts a sequence of token maps at growing grid
resolutions. Each step holds a pair of logit tensors (conditional and
unconditional) over a shared vocabulary; guidance schemes combine the
pair into the tensor that is actually sampled. The types here are
immutable value objects: arrays are copied on construction and marked
read-only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import (
    ConfigError,
    NonFiniteValueError,
    ShapeMismatchError,
)

RATIO = "ratio"
FIXED = "fixed"
SCHEDULE_KINDS = (RATIO, FIXED)

SCHEME_KINDS = ("none", "cfg", "igg", "igg_windowed", "mixed")

#: Tolerance on probability sums throughout the package.
PROB_SUM_TOL = 1e-9


def _frozen(values: np.ndarray, dtype) -> np.ndarray:
    out = np.array(values, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class VocabSpec:
    """Vocabulary of discrete token ids ``0 .. size-1``."""

    size: int

    def __post_init__(self):
        if not isinstance(self.size, int) or self.size < 2:
            raise ConfigError(f"vocabulary size must be an integer >= 2, got {self.size!r}")


@dataclass(frozen=True)
class ScaleSchedule:
    """Grid resolutions of a run plus its guidance weight schedule.

    ``steps`` lists ``(height, width)`` per step, coarse to fine. The
    per-step guidance scale ``gamma(k)`` is derived from
    ``guidance_weight`` by ``kind``:

    * ``ratio``: ``lam(k) = w * k / (K - 1)`` and ``gamma(k) = 1 + lam(k)``,
      so the first step is unguided and the last uses the full weight.
    * ``fixed``: ``gamma(k) = w`` at every step.

    ``secondary_weight`` feeds the same rule for the second component of
    the mixed scheme and is otherwise unused.
    """

    steps: tuple[tuple[int, int], ...]
    guidance_weight: float
    secondary_weight: float | None = None
    kind: str = RATIO

    def __post_init__(self):
        steps = tuple((int(h), int(w)) for h, w in self.steps)
        object.__setattr__(self, "steps", steps)
        if not steps:
            raise ConfigError("schedule must contain at least one step")
        for h, w in steps:
            if h < 1 or w < 1:
                raise ConfigError(f"step dimensions must be positive, got {(h, w)}")
        areas = [h * w for h, w in steps]
        if any(b < a for a, b in zip(areas, areas[1:])):
            raise ConfigError(f"step areas must be non-decreasing, got {areas}")
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigError(f"schedule kind must be one of {SCHEDULE_KINDS}, got {self.kind!r}")
        for name in ("guidance_weight", "secondary_weight"):
            value = getattr(self, name)
            if value is not None and not math.isfinite(value):
                raise ConfigError(f"{name} must be finite, got {value!r}")

    @property
    def num_steps(self) -> int:
        return len(self.steps)

    def _lam(self, k: int, weight: float) -> float:
        self._check_step(k)
        if self.kind == FIXED:
            return weight - 1.0
        if self.num_steps == 1:
            return 0.0
        return weight * (k / (self.num_steps - 1))

    def _check_step(self, k: int):
        if not 0 <= k < self.num_steps:
            raise ConfigError(f"step index {k} out of range for {self.num_steps} steps")

    def lam(self, k: int) -> float:
        """Interpolation weight of the classifier-free combination at step k."""
        return self._lam(k, self.guidance_weight)

    def gamma(self, k: int) -> float:
        """Nudge scale at step k; always ``1 + lam(k)``."""
        return 1.0 + self.lam(k)

    def gamma_secondary(self, k: int) -> float:
        """Nudge scale of the second mixed-scheme component at step k."""
        if self.secondary_weight is None:
            raise ConfigError("schedule has no secondary weight")
        return 1.0 + self._lam(k, self.secondary_weight)


def _validate_grid_values(height: int, width: int, vocab: VocabSpec, values: np.ndarray, label: str) -> np.ndarray:
    if height < 1 or width < 1:
        raise ConfigError(f"{label} dimensions must be positive, got {(height, width)}")
    arr = _frozen(values, np.float64)
    expect = (height * width, vocab.size)
    if arr.shape != expect:
        raise ShapeMismatchError(
            f"{label} values must have shape {expect} for a {height}x{width} grid "
            f"over {vocab.size} tokens, got {arr.shape}"
        )
    if not np.isfinite(arr).all():
        raise NonFiniteValueError(f"{label} contains non-finite values")
    return arr


@dataclass(frozen=True, eq=False)
class LogitTensor:
    """Unnormalized scores over the vocabulary at each grid position.

    ``values`` has shape ``(height * width, vocab.size)``; positions are
    row-major over the grid and the vocabulary axis is contiguous.
    """

    height: int
    width: int
    vocab: VocabSpec
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "values", _validate_grid_values(self.height, self.width, self.vocab, self.values, "logit tensor")
        )

    @property
    def num_positions(self) -> int:
        return self.height * self.width

    def __eq__(self, other) -> bool:
        if not isinstance(other, LogitTensor):
            return NotImplemented
        return (
            self.height == other.height
            and self.width == other.width
            and self.vocab == other.vocab
            and np.array_equal(self.values, other.values)
        )


@dataclass(frozen=True, eq=False)
class GuidanceField:
    """Per-position guidance vectors, same layout as a LogitTensor.

    The field is the quantity a guidance scheme adds to the
    unconditional logits, so its per-position norms describe where the
    conditioning signal lands on the grid.
    """

    height: int
    width: int
    vocab: VocabSpec
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "values", _validate_grid_values(self.height, self.width, self.vocab, self.values, "guidance field")
        )

    @property
    def num_positions(self) -> int:
        return self.height * self.width

    def __eq__(self, other) -> bool:
        if not isinstance(other, GuidanceField):
            return NotImplemented
        return (
            self.height == other.height
            and self.width == other.width
            and self.vocab == other.vocab
            and np.array_equal(self.values, other.values)
        )


@dataclass(frozen=True, eq=False)
class TokenMap:
    """Sampled token ids on an ``height x width`` grid."""

    height: int
    width: int
    vocab: VocabSpec
    tokens: np.ndarray

    def __post_init__(self):
        arr = _frozen(self.tokens, np.int64)
        if arr.shape != (self.height, self.width):
            raise ShapeMismatchError(
                f"token map must have shape {(self.height, self.width)}, got {arr.shape}"
            )
        if arr.size and (arr.min() < 0 or arr.max() >= self.vocab.size):
            raise ConfigError(
                f"token ids must lie in [0, {self.vocab.size}), got range "
                f"[{arr.min()}, {arr.max()}]"
            )
        object.__setattr__(self, "tokens", arr)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TokenMap):
            return NotImplemented
        return (
            self.height == other.height
            and self.width == other.width
            and self.vocab == other.vocab
            and np.array_equal(self.tokens, other.tokens)
        )


@dataclass(frozen=True, eq=False)
class SegMask:
    """Boolean segmentation mask; True marks foreground."""

    height: int
    width: int
    bits: np.ndarray

    def __post_init__(self):
        arr = _frozen(self.bits, bool)
        if arr.shape != (self.height, self.width):
            raise ShapeMismatchError(f"mask must have shape {(self.height, self.width)}, got {arr.shape}")
        object.__setattr__(self, "bits", arr)

    @property
    def foreground_count(self) -> int:
        return int(self.bits.sum())

    @property
    def background_count(self) -> int:
        return self.bits.size - self.foreground_count

    def __eq__(self, other) -> bool:
        if not isinstance(other, SegMask):
            return NotImplemented
        return (
            self.height == other.height
            and self.width == other.width
            and np.array_equal(self.bits, other.bits)
        )


def _check_score(value: float | None, label: str):
    if value is None:
        return
    if not (math.isfinite(value) and 0.0 <= value <= 1.0):
        raise ConfigError(f"{label} must be in [0, 1], got {value!r}")


@dataclass(frozen=True, eq=False)
class StepEntry:
    """One step of a recorded run: sampled tokens, guidance field, scores.

    ``evenness`` and ``divergence`` are None when the step is not scored
    (the first step of a run, single-position grids, or runs scored
    without a mask).
    """

    token_map: TokenMap
    guidance_field: GuidanceField
    evenness: float | None = None
    divergence: float | None = None

    def __post_init__(self):
        tm, gf = self.token_map, self.guidance_field
        if (tm.height, tm.width) != (gf.height, gf.width) or tm.vocab != gf.vocab:
            raise ShapeMismatchError("token map and guidance field of a step must agree in shape and vocab")
        _check_score(self.evenness, "step evenness")
        _check_score(self.divergence, "step divergence")

    def __eq__(self, other) -> bool:
        if not isinstance(other, StepEntry):
            return NotImplemented
        return (
            self.token_map == other.token_map
            and self.guidance_field == other.guidance_field
            and self.evenness == other.evenness
            and self.divergence == other.divergence
        )


@dataclass(frozen=True, eq=False)
class RunRecord:
    """Everything one sampling run produced, step by step.

    ``evenness`` and ``divergence`` hold the resolution-weighted means
    over the scored steps, when any step is scored.
    """

    schedule: ScaleSchedule
    scheme_kind: str
    condition_id: int
    seed: int
    entries: tuple[StepEntry, ...]
    evenness: float | None = None
    divergence: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        if self.scheme_kind not in SCHEME_KINDS:
            raise ConfigError(f"scheme kind must be one of {SCHEME_KINDS}, got {self.scheme_kind!r}")
        if len(self.entries) != self.schedule.num_steps:
            raise ConfigError(
                f"record must hold one entry per schedule step "
                f"({self.schedule.num_steps}), got {len(self.entries)}"
            )
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must fit in 64 bits, got {self.seed!r}")
        if not -(2**63) <= self.condition_id < 2**63:
            raise ConfigError(f"condition id must fit in a signed 64-bit integer, got {self.condition_id!r}")
        for k, entry in enumerate(self.entries):
            h, w = self.schedule.steps[k]
            if (entry.token_map.height, entry.token_map.width) != (h, w):
                raise ShapeMismatchError(
                    f"entry {k} has shape {(entry.token_map.height, entry.token_map.width)}, "
                    f"schedule expects {(h, w)}"
                )
        vocabs = {entry.token_map.vocab for entry in self.entries}
        if len(vocabs) > 1:
            raise ShapeMismatchError("all steps of a record must share one vocabulary")
        _check_score(self.evenness, "aggregate evenness")
        _check_score(self.divergence, "aggregate divergence")

    @property
    def vocab(self) -> VocabSpec:
        return self.entries[0].token_map.vocab

    def with_scores(self, per_step: dict[int, float], aggregate: float | None) -> "RunRecord":
        """Return a copy with divergence attached to the given steps."""
        entries = tuple(
            replace(entry, divergence=per_step.get(k, entry.divergence))
            for k, entry in enumerate(self.entries)
        )
        return replace(self, entries=entries, divergence=aggregate)

    def __eq__(self, other) -> bool:
        if not isinstance(other, RunRecord):
            return NotImplemented
        return (
            self.schedule == other.schedule
            and self.scheme_kind == other.scheme_kind
            and self.condition_id == other.condition_id
            and self.seed == other.seed
            and self.entries == other.entries
            and self.evenness == other.evenness
            and self.divergence == other.divergence
        )


def validate_pair(uncond: LogitTensor, cond: LogitTensor):
    """Check that a conditional/unconditional pair can be combined.

    Raises :class:`ShapeMismatchError` naming the mismatched property, or
    :class:`NonFiniteValueError` naming the offending tensor.
    """
    if (uncond.height, uncond.width) != (cond.height, cond.width):
        raise ShapeMismatchError(
            f"unconditional grid {(uncond.height, uncond.width)} does not match "
            f"conditional grid {(cond.height, cond.width)}"
        )
    if uncond.vocab != cond.vocab:
        raise ShapeMismatchError(
            f"unconditional vocabulary ({uncond.vocab.size}) does not match "
            f"conditional vocabulary ({cond.vocab.size})"
        )
    for label, tensor in (("unconditional", uncond), ("conditional", cond)):
        if not np.isfinite(tensor.values).all():
            raise NonFiniteValueError(f"{label} tensor contains non-finite values")
