"""Sampling loop, synthetic scene oracle, and dump replay.

The sampling loop is model-agnostic: anything exposing the
:class:`ModelOracle` interface can drive it. Two oracles ship with the
package. The scene oracle synthesizes logits for a set of classes, each
owning a planted foreground region and a block of vocabulary ids, so
conditioning concentrates on a known area and every diagnostic has a
ground truth to check against. The replay oracle serves tensors from a
logit dump file recorded earlier.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol, Sequence, runtime_checkable

import numpy as np

from .core import (
    RATIO,
    GuidanceField,
    LogitTensor,
    RunRecord,
    ScaleSchedule,
    SegMask,
    StepEntry,
    TokenMap,
    VocabSpec,
)
from .errors import (
    AllZeroFieldError,
    ConfigError,
    NoScoredStepsError,
    OracleError,
    ScheduleMismatchError,
    UnknownClassError,
)
from .formats import LogitDump, read_dump
from .guidance import GuidanceScheme, guided_logits
from .metrics import StepScores, guidance_magnitudes, pielou_evenness, weighted_mean_scores

#: Below this temperature, sampling degenerates to argmax.
ARGMAX_TEMPERATURE = 1e-6

DEFAULT_SIDES = (1, 2, 4, 6, 8, 12)


@runtime_checkable
class ModelOracle(Protocol):
    """Source of per-step conditional and unconditional logits.

    ``next_logits`` receives the step index, the token maps sampled so
    far, and the condition id (None requests the unconditional
    tensor). Implementations must be deterministic in their inputs;
    they may ignore the history.
    """

    @property
    def steps(self) -> tuple[tuple[int, int], ...]: ...

    def next_logits(
        self, k: int, history: Sequence[TokenMap], condition: int | None
    ) -> LogitTensor: ...


@dataclass(frozen=True)
class FgShape:
    """Planted foreground region in unit coordinates.

    ``center`` is (y, x); ``extent`` holds half-sizes for a rectangle
    and the two ellipse radii for a disk.
    """

    kind: str
    center: tuple[float, float]
    extent: tuple[float, float]

    def __post_init__(self):
        if self.kind not in ("rectangle", "disk"):
            raise ConfigError(f"shape kind must be 'rectangle' or 'disk', got {self.kind!r}")
        cy, cx = self.center
        ey, ex = self.extent
        for v in (cy, cx, ey, ex):
            if not math.isfinite(v):
                raise ConfigError("shape center and extent must be finite")
        if ey <= 0 or ex <= 0:
            raise ConfigError(f"shape extent must be positive, got {self.extent}")

    def contains(self, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
        cy, cx = self.center
        ey, ex = self.extent
        if self.kind == "rectangle":
            return (np.abs(yy - cy) <= ey) & (np.abs(xx - cx) <= ex)
        return ((yy - cy) / ey) ** 2 + ((xx - cx) / ex) ** 2 <= 1.0


def rasterize_shape(shape: FgShape, height: int, width: int) -> np.ndarray:
    """Boolean (height, width) grid of cells whose centers fall inside."""
    yy = (np.arange(height) + 0.5) / height
    xx = (np.arange(width) + 0.5) / width
    return shape.contains(yy[:, None], xx[None, :])


@dataclass(frozen=True)
class SceneOracleConfig:
    """Synthetic scene: classes with planted regions over a schedule.

    Conditional logits for class ``c`` raise the class's token block by
    ``contrast`` inside its region and the background token block
    outside it; a deterministic per-position texture (scaled by
    ``texture`` relative to the class boost, directions keyed by
    ``texture_seed``) scatters additional signal over the grid.
    Unconditional logits are the class average, blurred with a Gaussian
    of ``smoothness`` (in unit coordinates). All logits are exactly
    representable in float32, so dumps of this oracle replay
    bit-identically.
    """

    vocab: VocabSpec
    schedule: ScaleSchedule
    classes: int
    shapes: tuple[FgShape, ...]
    contrast: float = 0.7
    smoothness: float = 0.06
    texture: float = 1.4
    texture_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shapes", tuple(self.shapes))
        if self.classes < 1:
            raise ConfigError(f"need at least one class, got {self.classes}")
        if len(self.shapes) != self.classes:
            raise ConfigError(f"{self.classes} classes need {self.classes} shapes, got {len(self.shapes)}")
        if self.vocab.size < self.classes + 1:
            raise ConfigError(
                f"vocabulary of {self.vocab.size} cannot give {self.classes} classes "
                f"and the background a token block each"
            )
        for name in ("contrast", "smoothness", "texture"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0.0):
                raise ConfigError(f"{name} must be finite and >= 0, got {value!r}")
        for c, shape in enumerate(self.shapes):
            for h, w in self.schedule.steps:
                if h < 2 or w < 2:
                    continue
                inside = rasterize_shape(shape, h, w)
                if not inside.any():
                    raise ConfigError(f"class {c} region is empty at scale {h}x{w}")
                if inside.all():
                    raise ConfigError(f"class {c} region covers the whole grid at scale {h}x{w}")

    @property
    def token_block(self) -> int:
        """Tokens owned by each class; the remainder belongs to the background."""
        return self.vocab.size // (self.classes + 1)


def _class_profile(cfg: SceneOracleConfig, c: int) -> np.ndarray:
    profile = np.zeros(cfg.vocab.size)
    block = cfg.token_block
    profile[c * block : (c + 1) * block] = 1.0
    return profile


def _background_profile(cfg: SceneOracleConfig) -> np.ndarray:
    profile = np.zeros(cfg.vocab.size)
    profile[cfg.classes * cfg.token_block :] = 1.0
    return profile


def _texture(cfg: SceneOracleConfig, k: int, c: int, n: int) -> np.ndarray:
    if cfg.texture == 0.0 or cfg.contrast == 0.0:
        return np.zeros((n, cfg.vocab.size))
    # counter-based stream keyed by (texture_seed, class, step)
    key = [cfg.texture_seed & 0xFFFFFFFFFFFFFFFF, ((c & 0xFFFFFFFF) << 32) | (k & 0xFFFFFFFF)]
    rng = np.random.Generator(np.random.Philox(key=key))
    amplitude = rng.uniform(0.0, 1.0, n) ** 2
    directions = rng.standard_normal((n, cfg.vocab.size))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    scale = cfg.texture * cfg.contrast * math.sqrt(cfg.token_block)
    return scale * amplitude[:, None] * directions


def _class_conditional(cfg: SceneOracleConfig, k: int, c: int) -> np.ndarray:
    h, w = cfg.schedule.steps[k]
    inside = rasterize_shape(cfg.shapes[c], h, w).ravel().astype(np.float64)
    base = cfg.contrast * (
        inside[:, None] * _class_profile(cfg, c)[None, :]
        + (1.0 - inside)[:, None] * _background_profile(cfg)[None, :]
    )
    return base + _texture(cfg, k, c, h * w)


def _gauss_matrix(n: int, sigma: float) -> np.ndarray:
    if sigma < 1e-9:
        return np.eye(n)
    idx = np.arange(n, dtype=np.float64)
    weights = np.exp(-((idx[:, None] - idx[None, :]) ** 2) / (2.0 * sigma * sigma))
    return weights / weights.sum(axis=1, keepdims=True)


def _blur(values: np.ndarray, height: int, width: int, smoothness: float) -> np.ndarray:
    if smoothness <= 0.0:
        return values
    grid = values.reshape(height, width, -1)
    grid = np.einsum("ij,jwv->iwv", _gauss_matrix(height, smoothness * height), grid)
    grid = np.einsum("ij,hjv->hiv", _gauss_matrix(width, smoothness * width), grid)
    return grid.reshape(height * width, -1)


def scene_logits(cfg: SceneOracleConfig, k: int, condition: int | None) -> LogitTensor:
    """Synthesize the scene's logits for one step.

    Deterministic in ``(cfg, k, condition)``. ``condition=None`` yields
    the unconditional tensor; with ``contrast=0`` the two coincide.
    """
    if not 0 <= k < cfg.schedule.num_steps:
        raise ConfigError(f"step index {k} out of range for {cfg.schedule.num_steps} steps")
    h, w = cfg.schedule.steps[k]
    if condition is None:
        stack = np.mean([_class_conditional(cfg, k, c) for c in range(cfg.classes)], axis=0)
        values = _blur(stack, h, w, cfg.smoothness)
    else:
        if not isinstance(condition, int) or not 0 <= condition < cfg.classes:
            raise UnknownClassError(f"condition {condition!r} does not name one of {cfg.classes} classes")
        values = _class_conditional(cfg, k, condition)
    # quantize through float32 so dumps of this oracle are lossless
    values = values.astype(np.float32).astype(np.float64)
    return LogitTensor(h, w, cfg.vocab, values)


def scene_mask(cfg: SceneOracleConfig, condition: int) -> SegMask:
    """Rasterize a class's planted region at the final scale."""
    if not 0 <= condition < cfg.classes:
        raise UnknownClassError(f"condition {condition!r} does not name one of {cfg.classes} classes")
    h, w = cfg.schedule.steps[-1]
    return SegMask(h, w, rasterize_shape(cfg.shapes[condition], h, w))


class SceneOracle:
    """ModelOracle over a synthetic scene; ignores the history."""

    def __init__(self, cfg: SceneOracleConfig):
        self.cfg = cfg

    @property
    def steps(self) -> tuple[tuple[int, int], ...]:
        return self.cfg.schedule.steps

    def next_logits(self, k: int, history: Sequence[TokenMap], condition: int | None) -> LogitTensor:
        return scene_logits(self.cfg, k, condition)


class ReplayOracle:
    """ModelOracle serving tensors stored in a logit dump.

    The dump is pre-rolled, so the history is ignored; any non-None
    condition selects the stored conditional stream.
    """

    def __init__(self, dump: LogitDump):
        self.dump = dump

    @property
    def steps(self) -> tuple[tuple[int, int], ...]:
        return self.dump.steps

    @property
    def vocab(self) -> VocabSpec:
        return self.dump.vocab

    def next_logits(self, k: int, history: Sequence[TokenMap], condition: int | None) -> LogitTensor:
        if not 0 <= k < len(self.dump.steps):
            raise ConfigError(f"step index {k} out of range for {len(self.dump.steps)} steps")
        h, w = self.dump.steps[k]
        source = self.dump.uncond[k] if condition is None else self.dump.cond[k]
        return LogitTensor(h, w, self.dump.vocab, source.astype(np.float64))


def replay_oracle(path) -> ReplayOracle:
    """Open a logit dump file as an oracle."""
    return ReplayOracle(read_dump(path))


def capture_dump(oracle: ModelOracle, condition: int | None) -> LogitDump:
    """Record a history-free oracle's tensors into a dump.

    Calls ``next_logits`` with an empty history at every step, so this
    only faithfully captures oracles that ignore the history (both
    shipped oracles do).
    """
    conds, unconds = [], []
    vocab = None
    for k in range(len(oracle.steps)):
        cond = oracle.next_logits(k, [], condition)
        uncond = oracle.next_logits(k, [], None)
        vocab = cond.vocab
        conds.append(cond.values.astype(np.float32))
        unconds.append(uncond.values.astype(np.float32))
    assert vocab is not None
    return LogitDump(vocab, tuple(oracle.steps), tuple(conds), tuple(unconds))


@dataclass(frozen=True)
class SamplerConfig:
    """How token maps are drawn from guided logits."""

    scheme: GuidanceScheme
    schedule: ScaleSchedule
    temperature: float = 1.0
    top_k: int | None = None
    seed: int = 0

    def __post_init__(self):
        if not (math.isfinite(self.temperature) and self.temperature > 0.0):
            raise ConfigError(f"temperature must be positive and finite, got {self.temperature!r}")
        if self.top_k is not None and self.top_k < 1:
            raise ConfigError(f"top_k must be >= 1 when present, got {self.top_k}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must fit in 64 bits, got {self.seed!r}")


def sample_step(logits: LogitTensor, cfg: SamplerConfig, rng: np.random.Generator) -> TokenMap:
    """Draw one token per position from the softmax of the logits.

    Logits are divided by the temperature; below
    :data:`ARGMAX_TEMPERATURE` the draw degenerates to argmax. With
    ``top_k`` set, only the k highest-scoring ids per position stay
    eligible (ties broken toward lower ids), so ``top_k=1`` equals
    argmax at any temperature.
    """
    values = logits.values
    if cfg.top_k is not None:
        if cfg.top_k > logits.vocab.size:
            raise ConfigError(f"top_k={cfg.top_k} exceeds vocabulary size {logits.vocab.size}")
        if cfg.top_k < logits.vocab.size:
            order = np.argsort(-values, axis=1, kind="stable")[:, : cfg.top_k]
            masked = np.full_like(values, -np.inf)
            np.put_along_axis(masked, order, np.take_along_axis(values, order, axis=1), axis=1)
            values = masked
    if cfg.temperature < ARGMAX_TEMPERATURE:
        tokens = np.argmax(values, axis=1)
    else:
        noise = rng.gumbel(0.0, 1.0, size=values.shape)
        tokens = np.argmax(values / cfg.temperature + noise, axis=1)
    return TokenMap(logits.height, logits.width, logits.vocab, tokens.reshape(logits.height, logits.width))


def run_sampling(oracle: ModelOracle, cfg: SamplerConfig, condition: int) -> RunRecord:
    """Sample a full run and record fields and evenness per step.

    The guidance field stored for each step is whatever the scheme
    added to the unconditional logits. Evenness is scored on every step
    after the first that has at least two positions and a nonzero
    field; the aggregate is the area-weighted mean over scored steps.
    Bit-identical across calls with equal arguments.
    """
    if tuple(oracle.steps) != cfg.schedule.steps:
        raise ScheduleMismatchError(
            f"oracle steps {tuple(oracle.steps)} do not match schedule steps {cfg.schedule.steps}"
        )
    rng = np.random.default_rng(cfg.seed)
    history: list[TokenMap] = []
    entries: list[StepEntry] = []
    scores: list[StepScores] = []
    for k in range(cfg.schedule.num_steps):
        try:
            cond_t = oracle.next_logits(k, history, condition)
            uncond_t = oracle.next_logits(k, history, None)
        except Exception as exc:
            if isinstance(exc, (ConfigError, UnknownClassError)):
                raise
            raise OracleError(f"oracle failed at step {k}: {exc}") from exc
        h, w = cfg.schedule.steps[k]
        if (cond_t.height, cond_t.width) != (h, w):
            raise ScheduleMismatchError(
                f"oracle produced a {cond_t.height}x{cond_t.width} tensor at step {k}, schedule expects {h}x{w}"
            )
        guided = guided_logits(cfg.scheme, uncond_t, cond_t, cfg.schedule, k)
        field = GuidanceField(h, w, cond_t.vocab, guided.values - uncond_t.values)
        token_map = sample_step(guided, cfg, rng)
        evenness = None
        if k >= 1 and field.num_positions >= 2:
            try:
                evenness = pielou_evenness(guidance_magnitudes(field))
            except AllZeroFieldError:
                evenness = None
        if evenness is not None:
            scores.append(StepScores(k, evenness, None, float(h * w)))
        entries.append(StepEntry(token_map, field, evenness, None))
        history.append(token_map)
    try:
        aggregate, _ = weighted_mean_scores(scores)
    except NoScoredStepsError:
        aggregate = None
    return RunRecord(
        schedule=cfg.schedule,
        scheme_kind=cfg.scheme.kind,
        condition_id=condition,
        seed=cfg.seed,
        entries=tuple(entries),
        evenness=aggregate,
        divergence=None,
    )


def default_schedule(
    guidance_weight: float,
    secondary_weight: float | None = None,
    kind: str = RATIO,
) -> ScaleSchedule:
    """The package's default six-scale square schedule."""
    return ScaleSchedule(tuple((s, s) for s in DEFAULT_SIDES), guidance_weight, secondary_weight, kind)


def default_scene(
    schedule: ScaleSchedule,
    vocab_size: int = 64,
    classes: int = 6,
    contrast: float = 0.7,
    smoothness: float = 0.06,
    texture: float = 1.4,
    texture_seed: int = 0,
) -> SceneOracleConfig:
    """A six-class scene with varied planted regions.

    Regions sit near the quadrant centers so they stay nonempty on the
    coarsest 2x2 grid.
    """
    base_shapes = (
        FgShape("rectangle", (0.30, 0.30), (0.22, 0.25)),
        FgShape("disk", (0.72, 0.70), (0.24, 0.24)),
        FgShape("rectangle", (0.70, 0.28), (0.23, 0.21)),
        FgShape("disk", (0.30, 0.72), (0.21, 0.26)),
        FgShape("rectangle", (0.42, 0.38), (0.23, 0.22)),
        FgShape("disk", (0.68, 0.62), (0.26, 0.22)),
    )
    if not 1 <= classes <= len(base_shapes):
        raise ConfigError(f"default scene supports 1..{len(base_shapes)} classes, got {classes}")
    return SceneOracleConfig(
        vocab=VocabSpec(vocab_size),
        schedule=schedule,
        classes=classes,
        shapes=base_shapes[:classes],
        contrast=contrast,
        smoothness=smoothness,
        texture=texture,
        texture_seed=texture_seed,
    )
