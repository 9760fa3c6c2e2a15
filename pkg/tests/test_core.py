import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swarguide.core import (
    FIXED,
    RATIO,
    GuidanceField,
    LogitTensor,
    RunRecord,
    ScaleSchedule,
    SegMask,
    StepEntry,
    TokenMap,
    VocabSpec,
    validate_pair,
)
from swarguide.errors import (
    ConfigError,
    NonFiniteValueError,
    ShapeMismatchError,
)

finite_weights = st.floats(
    min_value=-100.0, max_value=100.0, allow_nan=False, allow_infinity=False
)


class TestVocabSpec:
    def test_minimum_size(self):
        assert VocabSpec(2).size == 2
        with pytest.raises(ConfigError):
            VocabSpec(1)
        with pytest.raises(ConfigError):
            VocabSpec(0)


class TestScaleSchedule:
    def test_ratio_endpoints_exact(self):
        # lam must hit 0 and w exactly at the ends, not merely approximately
        sched = ScaleSchedule(((1, 1), (2, 2), (4, 4)), 1.75)
        assert sched.lam(0) == 0.0
        assert sched.lam(2) == 1.75

    @given(
        w=finite_weights,
        k_total=st.integers(min_value=2, max_value=12),
    )
    @settings(max_examples=200, deadline=None)
    def test_ratio_endpoints_property(self, w, k_total):
        steps = tuple((s, s) for s in range(1, k_total + 1))
        sched = ScaleSchedule(steps, w)
        assert sched.lam(0) == 0.0
        assert sched.lam(k_total - 1) == w

    @given(
        w=finite_weights,
        k_total=st.integers(min_value=1, max_value=12),
        kind=st.sampled_from([RATIO, FIXED]),
    )
    @settings(max_examples=200, deadline=None)
    def test_gamma_minus_lam_is_one(self, w, k_total, kind):
        steps = tuple((s, s) for s in range(1, k_total + 1))
        sched = ScaleSchedule(steps, w, kind=kind)
        for k in range(k_total):
            assert abs(sched.gamma(k) - sched.lam(k) - 1.0) < 1e-12

    def test_fixed_kind_is_constant(self):
        sched = ScaleSchedule(((1, 1), (2, 2), (3, 3)), 1.85, kind=FIXED)
        assert [sched.gamma(k) for k in range(3)] == [1.85, 1.85, 1.85]
        assert [sched.lam(k) for k in range(3)] == [pytest.approx(0.85)] * 3

    def test_single_step_ratio_lam_zero(self):
        sched = ScaleSchedule(((3, 3),), 2.5)
        assert sched.lam(0) == 0.0

    def test_secondary_weight(self):
        sched = ScaleSchedule(((1, 1), (2, 2)), 1.0, secondary_weight=0.5)
        assert sched.gamma_secondary(1) == 1.5
        bare = ScaleSchedule(((1, 1), (2, 2)), 1.0)
        with pytest.raises(ConfigError):
            bare.gamma_secondary(1)

    def test_validation(self):
        with pytest.raises(ConfigError):
            ScaleSchedule((), 1.0)
        with pytest.raises(ConfigError):
            ScaleSchedule(((2, 2), (1, 1)), 1.0)  # decreasing area
        with pytest.raises(ConfigError):
            ScaleSchedule(((0, 1),), 1.0)
        with pytest.raises(ConfigError):
            ScaleSchedule(((1, 1),), float("nan"))
        with pytest.raises(ConfigError):
            ScaleSchedule(((1, 1),), 1.0, kind="bogus")
        with pytest.raises(ConfigError):
            ScaleSchedule(((1, 1),), 1.0).lam(1)


class TestLogitTensor:
    def test_shape_and_dtype(self, rng):
        t = LogitTensor(2, 3, VocabSpec(4), rng.normal(size=(6, 4)).astype(np.float32))
        assert t.values.dtype == np.float64
        assert t.num_positions == 6
        assert not t.values.flags.writeable

    def test_rejects_bad_shape(self, rng):
        with pytest.raises(ShapeMismatchError):
            LogitTensor(2, 2, VocabSpec(4), rng.normal(size=(3, 4)))
        with pytest.raises(ConfigError):
            LogitTensor(0, 2, VocabSpec(4), rng.normal(size=(0, 4)))

    def test_rejects_non_finite(self, rng):
        values = rng.normal(size=(4, 4))
        values[2, 1] = np.nan
        with pytest.raises(NonFiniteValueError):
            LogitTensor(2, 2, VocabSpec(4), values)

    def test_equality_is_by_value(self, rng):
        values = rng.normal(size=(4, 3))
        a = LogitTensor(2, 2, VocabSpec(3), values)
        b = LogitTensor(2, 2, VocabSpec(3), values.copy())
        assert a == b
        c = LogitTensor(2, 2, VocabSpec(3), values + 1.0)
        assert a != c


class TestTokenMap:
    def test_bounds(self):
        TokenMap(2, 2, VocabSpec(4), np.array([[0, 3], [1, 2]]))
        with pytest.raises(ConfigError):
            TokenMap(2, 2, VocabSpec(4), np.array([[0, 4], [1, 2]]))
        with pytest.raises(ConfigError):
            TokenMap(2, 2, VocabSpec(4), np.array([[0, -1], [1, 2]]))

    def test_shape(self):
        with pytest.raises(ShapeMismatchError):
            TokenMap(2, 2, VocabSpec(4), np.zeros((2, 3), dtype=np.int64))


class TestSegMask:
    def test_counts(self):
        bits = np.array([[True, False], [True, True]])
        mask = SegMask(2, 2, bits)
        assert mask.foreground_count == 3
        assert mask.background_count == 1

    def test_shape(self):
        with pytest.raises(ShapeMismatchError):
            SegMask(2, 3, np.ones((2, 2), dtype=bool))


def _entry(rng, h, w, v, evenness=None):
    tm = TokenMap(h, w, VocabSpec(v), rng.integers(0, v, (h, w)))
    gf = GuidanceField(h, w, VocabSpec(v), rng.normal(size=(h * w, v)))
    return StepEntry(tm, gf, evenness=evenness)


class TestStepEntryAndRunRecord:
    def test_entry_score_range(self, rng):
        with pytest.raises(ConfigError):
            _entry(rng, 2, 2, 4, evenness=1.5)

    def test_entry_shape_agreement(self, rng):
        tm = TokenMap(2, 2, VocabSpec(4), rng.integers(0, 4, (2, 2)))
        gf = GuidanceField(2, 3, VocabSpec(4), rng.normal(size=(6, 4)))
        with pytest.raises(ShapeMismatchError):
            StepEntry(tm, gf)

    def _record(self, rng):
        sched = ScaleSchedule(((1, 1), (2, 2)), 1.85)
        entries = (_entry(rng, 1, 1, 4), _entry(rng, 2, 2, 4, evenness=0.5))
        return RunRecord(sched, "cfg", 3, 7, entries, evenness=0.5)

    def test_entry_count_must_match_schedule(self, rng):
        sched = ScaleSchedule(((1, 1), (2, 2)), 1.85)
        with pytest.raises(ConfigError):
            RunRecord(sched, "cfg", 0, 0, (_entry(rng, 1, 1, 4),))

    def test_entry_shapes_must_match_schedule(self, rng):
        sched = ScaleSchedule(((1, 1), (2, 2)), 1.85)
        entries = (_entry(rng, 1, 1, 4), _entry(rng, 2, 3, 4))
        with pytest.raises(ShapeMismatchError):
            RunRecord(sched, "cfg", 0, 0, entries)

    def test_scheme_kind_checked(self, rng):
        sched = ScaleSchedule(((1, 1),), 1.0)
        with pytest.raises(ConfigError):
            RunRecord(sched, "nonsense", 0, 0, (_entry(rng, 1, 1, 4),))

    def test_with_scores(self, rng):
        rec = self._record(rng)
        updated = rec.with_scores({1: 0.75}, aggregate=0.75)
        assert updated.entries[1].divergence == 0.75
        assert updated.entries[0].divergence is None
        assert updated.divergence == 0.75
        # original untouched
        assert rec.entries[1].divergence is None

    def test_seed_range(self, rng):
        sched = ScaleSchedule(((1, 1),), 1.0)
        with pytest.raises(ConfigError):
            RunRecord(sched, "cfg", 0, 2**64, (_entry(rng, 1, 1, 4),))


class TestValidatePair:
    def test_ok_case(self):
        u = LogitTensor(2, 2, VocabSpec(4), np.zeros((4, 4)))
        c = LogitTensor(2, 2, VocabSpec(4), np.zeros((4, 4)))
        validate_pair(u, c)

    def test_shape_mismatch(self, rng):
        u = LogitTensor(2, 2, VocabSpec(4), rng.normal(size=(4, 4)))
        c = LogitTensor(3, 3, VocabSpec(4), rng.normal(size=(9, 4)))
        with pytest.raises(ShapeMismatchError):
            validate_pair(u, c)

    def test_vocab_mismatch(self, rng):
        u = LogitTensor(2, 2, VocabSpec(4), rng.normal(size=(4, 4)))
        c = LogitTensor(2, 2, VocabSpec(5), rng.normal(size=(4, 5)))
        with pytest.raises(ShapeMismatchError):
            validate_pair(u, c)

    def test_error_names_offending_tensor(self, rng):
        u = LogitTensor(2, 2, VocabSpec(4), rng.normal(size=(4, 4)))
        c = LogitTensor(2, 3, VocabSpec(4), rng.normal(size=(6, 4)))
        with pytest.raises(ShapeMismatchError, match="unconditional.*conditional"):
            validate_pair(u, c)
