"""Bit-exact file formats: logit dumps, run records, masks, heatmaps.

Two binary formats are defined here, both little-endian with an 8-byte
ASCII magic:

``SWARLOG1`` logit dump
    magic, vocab size (u32), step count K (u32), then per step: height
    (u32), width (u32), the conditional tensor and the unconditional
    tensor, each ``height * width * vocab`` float32 values, positions
    row-major with the vocabulary axis contiguous.

``SWARREC1`` run record
    magic, vocab size (u32), schedule kind (u8: 0 ratio, 1 fixed),
    guidance weight (f64), secondary weight presence (u8) and value
    (f64), scheme kind (u8), condition id (i64), seed (u64), step count
    K (u32), K pairs of height/width (u32 each), then per step: the
    token grid (u32, row-major), the guidance field (f64), and two
    presence-flagged scores (u8 + f64 each: evenness, divergence),
    followed by the two presence-flagged aggregate scores.

Masks are read from binary PGM (``P5``, pixels above 127 are
foreground) and ASCII PBM (``P1``, set bits are foreground). Heatmap
export writes one CSV and one 8-bit PGM per recorded step plus an
annotations file with the per-step scores.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import (
    SCHEME_KINDS,
    GuidanceField,
    RunRecord,
    ScaleSchedule,
    SegMask,
    StepEntry,
    TokenMap,
    VocabSpec,
)
from .errors import (
    BadMagicError,
    ConfigError,
    DimensionMismatchError,
    FormatError,
    NonFinitePayloadError,
    SizeMismatchError,
    UnsupportedFormatError,
)
from .metrics import field_magnitudes

DUMP_MAGIC = b"SWARLOG1"
RECORD_MAGIC = b"SWARREC1"

_SCHEDULE_KIND_CODES = {"ratio": 0, "fixed": 1}
_SCHEDULE_KIND_NAMES = {v: k for k, v in _SCHEDULE_KIND_CODES.items()}


@dataclass(frozen=True, eq=False)
class LogitDump:
    """In-memory image of a logit dump file.

    Tensors are kept in float32 exactly as stored, shaped
    ``(height * width, vocab.size)``.
    """

    vocab: VocabSpec
    steps: tuple[tuple[int, int], ...]
    cond: tuple[np.ndarray, ...]
    uncond: tuple[np.ndarray, ...]

    def __post_init__(self):
        steps = tuple((int(h), int(w)) for h, w in self.steps)
        object.__setattr__(self, "steps", steps)
        if not steps:
            raise ConfigError("dump must contain at least one step")
        for name in ("cond", "uncond"):
            tensors = []
            listed = getattr(self, name)
            if len(listed) != len(steps):
                raise ConfigError(f"dump lists {len(steps)} steps but {len(listed)} {name} tensors")
            for (h, w), tensor in zip(steps, listed):
                arr = np.array(tensor, dtype=np.float32, copy=True)
                arr.setflags(write=False)
                if arr.shape != (h * w, self.vocab.size):
                    raise ConfigError(
                        f"{name} tensor for step {(h, w)} must have shape "
                        f"{(h * w, self.vocab.size)}, got {arr.shape}"
                    )
                if not np.isfinite(arr).all():
                    raise ConfigError(f"{name} tensor for step {(h, w)} contains non-finite values")
                tensors.append(arr)
            object.__setattr__(self, name, tuple(tensors))

    def __eq__(self, other) -> bool:
        if not isinstance(other, LogitDump):
            return NotImplemented
        return (
            self.vocab == other.vocab
            and self.steps == other.steps
            and all(np.array_equal(a, b) for a, b in zip(self.cond, other.cond))
            and all(np.array_equal(a, b) for a, b in zip(self.uncond, other.uncond))
        )


def write_dump(dump: LogitDump, path: str | Path) -> Path:
    """Serialize a logit dump; the same dump always yields the same bytes."""
    path = Path(path)
    parts = [DUMP_MAGIC, struct.pack("<II", dump.vocab.size, len(dump.steps))]
    for (h, w), cond, uncond in zip(dump.steps, dump.cond, dump.uncond):
        parts.append(struct.pack("<II", h, w))
        parts.append(cond.astype("<f4", copy=False).tobytes())
        parts.append(uncond.astype("<f4", copy=False).tobytes())
    path.write_bytes(b"".join(parts))
    return path


class _Cursor:
    """Byte reader that reports offsets in its errors."""

    def __init__(self, data: bytes, label: str):
        self.data = data
        self.offset = 0
        self.label = label

    def take(self, count: int, what: str) -> bytes:
        if self.offset + count > len(self.data):
            raise SizeMismatchError(
                f"{self.label} truncated while reading {what}: expected {self.offset + count} "
                f"bytes, file has {len(self.data)}",
                offset=self.offset,
            )
        chunk = self.data[self.offset : self.offset + count]
        self.offset += count
        return chunk

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def floats(self, count: int, dtype: str, what: str) -> np.ndarray:
        start = self.offset
        raw = self.take(count * np.dtype(dtype).itemsize, what)
        arr = np.frombuffer(raw, dtype=dtype)
        finite = np.isfinite(arr)
        if not finite.all():
            bad = int(np.argmin(finite))
            raise NonFinitePayloadError(
                f"{self.label} has a non-finite value in {what} (element {bad})",
                offset=start + bad * np.dtype(dtype).itemsize,
            )
        return arr

    def expect_end(self):
        if self.offset != len(self.data):
            raise SizeMismatchError(
                f"{self.label} has {len(self.data) - self.offset} trailing bytes after the "
                f"declared payload of {self.offset}",
                offset=self.offset,
            )


def read_dump(path: str | Path) -> LogitDump:
    """Parse a logit dump, validating sizes and finiteness byte-exactly."""
    cur = _Cursor(Path(path).read_bytes(), "logit dump")
    magic = cur.take(len(DUMP_MAGIC), "magic")
    if magic != DUMP_MAGIC:
        raise BadMagicError(f"logit dump must start with {DUMP_MAGIC!r}, got {magic!r}", offset=0)
    vocab_size, num_steps = cur.unpack("<II", "header")
    if vocab_size < 2:
        raise FormatError(f"logit dump declares vocabulary size {vocab_size}, need >= 2", offset=8)
    if num_steps < 1:
        raise FormatError("logit dump declares zero steps", offset=12)
    steps, conds, unconds = [], [], []
    for k in range(num_steps):
        h, w = cur.unpack("<II", f"step {k} dimensions")
        if h < 1 or w < 1:
            raise FormatError(f"step {k} has non-positive dimensions {(h, w)}", offset=cur.offset - 8)
        count = h * w * vocab_size
        cond = cur.floats(count, "<f4", f"step {k} conditional tensor")
        uncond = cur.floats(count, "<f4", f"step {k} unconditional tensor")
        steps.append((h, w))
        conds.append(cond.reshape(h * w, vocab_size))
        unconds.append(uncond.reshape(h * w, vocab_size))
    cur.expect_end()
    try:
        return LogitDump(VocabSpec(vocab_size), tuple(steps), tuple(conds), tuple(unconds))
    except ConfigError as exc:
        raise FormatError(f"logit dump is inconsistent: {exc}") from exc


def _pack_score(value: float | None) -> bytes:
    return struct.pack("<Bd", 1 if value is not None else 0, value if value is not None else 0.0)


def write_record(record: RunRecord, path: str | Path) -> Path:
    """Serialize a run record; the same record always yields the same bytes."""
    path = Path(path)
    sched = record.schedule
    parts = [
        RECORD_MAGIC,
        struct.pack("<IB", record.vocab.size, _SCHEDULE_KIND_CODES[sched.kind]),
        struct.pack("<d", float(sched.guidance_weight)),
        struct.pack(
            "<Bd",
            1 if sched.secondary_weight is not None else 0,
            float(sched.secondary_weight) if sched.secondary_weight is not None else 0.0,
        ),
        struct.pack("<B", SCHEME_KINDS.index(record.scheme_kind)),
        struct.pack("<qQ", record.condition_id, record.seed),
        struct.pack("<I", sched.num_steps),
    ]
    for h, w in sched.steps:
        parts.append(struct.pack("<II", h, w))
    for entry in record.entries:
        parts.append(entry.token_map.tokens.astype("<u4").tobytes())
        parts.append(entry.guidance_field.values.astype("<f8", copy=False).tobytes())
        parts.append(_pack_score(entry.evenness))
        parts.append(_pack_score(entry.divergence))
    parts.append(_pack_score(record.evenness))
    parts.append(_pack_score(record.divergence))
    path.write_bytes(b"".join(parts))
    return path


def _read_score(cur: _Cursor, what: str) -> float | None:
    present, value = cur.unpack("<Bd", what)
    if present not in (0, 1):
        raise FormatError(f"{what} presence flag must be 0 or 1, got {present}", offset=cur.offset - 9)
    if not present:
        return None
    if not (math.isfinite(value) and 0.0 <= value <= 1.0):
        raise FormatError(f"{what} must be in [0, 1], got {value!r}", offset=cur.offset - 8)
    return value


def read_record(path: str | Path) -> RunRecord:
    """Parse a run record, validating every field range."""
    cur = _Cursor(Path(path).read_bytes(), "run record")
    magic = cur.take(len(RECORD_MAGIC), "magic")
    if magic != RECORD_MAGIC:
        raise BadMagicError(f"run record must start with {RECORD_MAGIC!r}, got {magic!r}", offset=0)
    vocab_size, kind_code = cur.unpack("<IB", "header")
    if vocab_size < 2:
        raise FormatError(f"run record declares vocabulary size {vocab_size}, need >= 2", offset=8)
    if kind_code not in _SCHEDULE_KIND_NAMES:
        raise FormatError(f"unknown schedule kind code {kind_code}", offset=12)
    (weight,) = cur.unpack("<d", "guidance weight")
    has_w2, w2 = cur.unpack("<Bd", "secondary weight")
    (scheme_code,) = cur.unpack("<B", "scheme kind")
    if scheme_code >= len(SCHEME_KINDS):
        raise FormatError(f"unknown scheme kind code {scheme_code}", offset=cur.offset - 1)
    condition_id, seed = cur.unpack("<qQ", "condition and seed")
    (num_steps,) = cur.unpack("<I", "step count")
    if num_steps < 1:
        raise FormatError("run record declares zero steps", offset=cur.offset - 4)
    dims = [cur.unpack("<II", f"step {k} dimensions") for k in range(num_steps)]
    vocab = VocabSpec(vocab_size)
    entries = []
    for k, (h, w) in enumerate(dims):
        if h < 1 or w < 1:
            raise FormatError(f"step {k} has non-positive dimensions {(h, w)}")
        tokens_start = cur.offset
        raw_tokens = np.frombuffer(cur.take(h * w * 4, f"step {k} tokens"), dtype="<u4")
        if raw_tokens.size and int(raw_tokens.max()) >= vocab_size:
            bad = int(np.argmax(raw_tokens >= vocab_size))
            raise FormatError(
                f"step {k} token id {int(raw_tokens[bad])} exceeds vocabulary {vocab_size}",
                offset=tokens_start + bad * 4,
            )
        field = cur.floats(h * w * vocab_size, "<f8", f"step {k} guidance field")
        evenness = _read_score(cur, f"step {k} evenness")
        divergence = _read_score(cur, f"step {k} divergence")
        entries.append(
            StepEntry(
                TokenMap(h, w, vocab, raw_tokens.reshape(h, w).astype(np.int64)),
                GuidanceField(h, w, vocab, field.reshape(h * w, vocab_size).astype(np.float64)),
                evenness,
                divergence,
            )
        )
    agg_evenness = _read_score(cur, "aggregate evenness")
    agg_divergence = _read_score(cur, "aggregate divergence")
    cur.expect_end()
    try:
        schedule = ScaleSchedule(
            tuple((h, w) for h, w in dims),
            weight,
            w2 if has_w2 else None,
            _SCHEDULE_KIND_NAMES[kind_code],
        )
        return RunRecord(
            schedule,
            SCHEME_KINDS[scheme_code],
            condition_id,
            seed,
            tuple(entries),
            agg_evenness,
            agg_divergence,
        )
    except ConfigError as exc:
        raise FormatError(f"run record is inconsistent: {exc}") from exc


def _netpbm_tokens(data: bytes, count: int, label: str) -> tuple[list[bytes], int]:
    """Read whitespace-separated header tokens, honouring # comments."""
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        if pos >= len(data):
            raise SizeMismatchError(f"{label} ended inside the header", offset=pos)
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    return tokens, pos


def _header_int(token: bytes, what: str, label: str) -> int:
    try:
        value = int(token)
    except ValueError:
        raise FormatError(f"{label} {what} must be a decimal integer, got {token!r}") from None
    if value < 1:
        raise FormatError(f"{label} {what} must be positive, got {value}")
    return value


def read_pgm_gray(path: str | Path) -> np.ndarray:
    """Read a binary 8-bit PGM (P5) into a uint8 array of shape (h, w)."""
    data = Path(path).read_bytes()
    label = "PGM file"
    tokens, pos = _netpbm_tokens(data, 1, label)
    if tokens[0] != b"P5":
        raise UnsupportedFormatError(f"expected P5 magic, got {tokens[0]!r}", offset=0)
    tokens, pos = _netpbm_tokens(data, 4, label)
    width = _header_int(tokens[1], "width", label)
    height = _header_int(tokens[2], "height", label)
    maxval = _header_int(tokens[3], "maxval", label)
    if maxval > 255:
        raise UnsupportedFormatError(f"only single-byte PGM supported, maxval {maxval} exceeds 255")
    payload = data[pos + 1 :]  # exactly one whitespace byte after maxval
    expected = width * height
    if len(payload) != expected:
        raise SizeMismatchError(
            f"{label} declares {width}x{height} = {expected} pixels but carries {len(payload)} bytes",
            offset=pos + 1,
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width).copy()


def _read_pbm_ascii(data: bytes) -> np.ndarray:
    label = "PBM file"
    tokens, pos = _netpbm_tokens(data, 3, label)
    width = _header_int(tokens[1], "width", label)
    height = _header_int(tokens[2], "height", label)
    bits = []
    body = data[pos:]
    i = 0
    while i < len(body):
        ch = body[i : i + 1]
        if ch.isspace():
            i += 1
            continue
        if ch == b"#":
            while i < len(body) and body[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        if ch not in (b"0", b"1"):
            raise FormatError(f"PBM bit must be 0 or 1, got {ch!r}", offset=pos + i)
        bits.append(ch == b"1")
        i += 1
    expected = width * height
    if len(bits) != expected:
        raise SizeMismatchError(
            f"{label} declares {width}x{height} = {expected} bits but carries {len(bits)}",
            offset=pos,
        )
    return np.array(bits, dtype=bool).reshape(height, width)


def read_mask(path: str | Path, expected_shape: tuple[int, int] | None = None) -> SegMask:
    """Read a segmentation mask from a P5 PGM or P1 PBM file.

    PGM pixels above 127 and PBM set bits map to foreground. When
    ``expected_shape`` is given, a differing resolution raises
    :class:`DimensionMismatchError`.
    """
    data = Path(path).read_bytes()
    tokens, _ = _netpbm_tokens(data, 1, "mask file")
    if tokens[0] == b"P5":
        bits = read_pgm_gray(path) > 127
    elif tokens[0] == b"P1":
        bits = _read_pbm_ascii(data)
    else:
        raise UnsupportedFormatError(
            f"mask must be a P5 PGM or P1 PBM, got magic {tokens[0]!r}", offset=0
        )
    if expected_shape is not None and bits.shape != tuple(expected_shape):
        raise DimensionMismatchError(
            f"mask is {bits.shape[0]}x{bits.shape[1]}, expected "
            f"{expected_shape[0]}x{expected_shape[1]}"
        )
    return SegMask(bits.shape[0], bits.shape[1], bits)


def write_pgm_gray(values: np.ndarray, path: str | Path) -> Path:
    """Write a uint8 array of shape (h, w) as a binary P5 PGM."""
    arr = np.ascontiguousarray(values, dtype=np.uint8)
    if arr.ndim != 2:
        raise ConfigError(f"PGM payload must be a 2-d array, got shape {arr.shape}")
    path = Path(path)
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii")
    path.write_bytes(header + arr.tobytes())
    return path


def write_mask_pgm(mask: SegMask, path: str | Path) -> Path:
    """Write a mask as a P5 PGM with foreground 255 and background 0."""
    return write_pgm_gray(np.where(mask.bits, 255, 0).astype(np.uint8), path)


def _format_score(value: float | None) -> str:
    return "n/a" if value is None else f"{value:.6g}"


def export_heatmaps(run: RunRecord, out_dir: str | Path) -> list[Path]:
    """Write per-step magnitude heatmaps of a run.

    For every step after the first this writes ``step_<k>.csv`` (the
    raw per-position guidance magnitudes, 6 significant digits) and
    ``step_<k>.pgm`` (the same values scaled so the step minimum maps to
    0 and the maximum to 255; a constant map renders mid-gray), plus an
    ``annotations.txt`` summarizing the recorded scores.
    """
    if run.schedule.num_steps < 2:
        raise ConfigError("run has no steps past the first; nothing to export")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    lines = [
        f"run: scheme={run.scheme_kind} schedule={run.schedule.kind} "
        f"w={run.schedule.guidance_weight:.6g} condition={run.condition_id} seed={run.seed}"
    ]
    for k in range(1, run.schedule.num_steps):
        entry = run.entries[k]
        h, w = run.schedule.steps[k]
        norms = field_magnitudes(entry.guidance_field).reshape(h, w)
        csv_path = out / f"step_{k}.csv"
        csv_path.write_text(
            "".join(",".join(f"{v:.6g}" for v in row) + "\n" for row in norms),
            encoding="ascii",
        )
        written.append(csv_path)
        lo, hi = float(norms.min()), float(norms.max())
        if hi == lo:
            gray = np.full((h, w), 128, dtype=np.uint8)
        else:
            gray = np.round((norms - lo) / (hi - lo) * 255.0).astype(np.uint8)
        written.append(write_pgm_gray(gray, out / f"step_{k}.pgm"))
        lines.append(
            f"step {k} ({h}x{w}): evenness={_format_score(entry.evenness)} "
            f"divergence={_format_score(entry.divergence)}"
        )
    lines.append(
        f"aggregate: evenness={_format_score(run.evenness)} divergence={_format_score(run.divergence)}"
    )
    notes = out / "annotations.txt"
    notes.write_text("\n".join(lines) + "\n", encoding="ascii")
    written.append(notes)
    return written
