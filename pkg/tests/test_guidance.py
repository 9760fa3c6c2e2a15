import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swarguide.core import GuidanceField, LogitTensor, ScaleSchedule, VocabSpec
from swarguide.errors import ConfigError, NonFiniteValueError, ShapeMismatchError
from swarguide.guidance import (
    AttentionMatrix,
    GuidanceScheme,
    apply_attention,
    attention_weights,
    cfg_guide,
    default_window_rule,
    guided_logits,
    igg_guide,
    igg_guide_windowed,
    mixed_guide,
    nudge,
)
from tests.conftest import make_pair, make_tensor

# frozen oracle: softmax([1/2, 0]) for the orthogonal-rows attention case,
# computed as exp(0.5)/(exp(0.5)+1) by hand before the implementation ran
ORTHO_SELF = 0.622459331201855
ORTHO_OTHER = 0.377540668798145


def brute_force_attention(values, vocab_size):
    """Dense-loop softmax oracle, no vectorized shortcuts."""
    n = values.shape[0]
    scores = [[0.0] * n for _ in range(n)]
    for i in range(n):
        for j in range(n):
            acc = 0.0
            for t in range(values.shape[1]):
                acc += values[i, t] * values[j, t]
            scores[i][j] = acc / math.sqrt(vocab_size)
    out = np.empty((n, n))
    for i in range(n):
        row_max = max(scores[i])
        exps = [math.exp(s - row_max) for s in scores[i]]
        total = sum(exps)
        out[i] = [e / total for e in exps]
    return out


class TestNudge:
    def test_zero_inputs(self):
        u = LogitTensor(1, 2, VocabSpec(3), np.zeros((2, 3)))
        field = nudge(u, u, 5.0)
        assert np.all(field.values == 0.0)

    def test_forced_arithmetic(self):
        u = LogitTensor(1, 1, VocabSpec(2), np.array([[0.0, 0.0]]))
        c = LogitTensor(1, 1, VocabSpec(2), np.array([[1.0, 2.0]]))
        assert np.array_equal(nudge(u, c, 2.0).values, [[2.0, 4.0]])

    def test_cross_check_against_cfg_form(self, rng):
        # independent route: (1+lam)*c - lam*u computed directly
        u, c = make_pair(rng, 3, 3, 8)
        lam = 0.85
        expected = (1.0 + lam) * c.values - lam * u.values - u.values
        field = nudge(u, c, 1.0 + lam)
        assert np.allclose(field.values, expected, atol=1e-12, rtol=0.0)

    def test_shape_mismatch_propagates(self, rng):
        u = make_tensor(rng, 2, 2, 4)
        c = make_tensor(rng, 3, 3, 4)
        with pytest.raises(ShapeMismatchError):
            nudge(u, c, 1.0)


class TestCfgGuide:
    def test_lambda_zero_returns_cond_exactly(self, rng):
        u, c = make_pair(rng, 2, 2, 4)
        assert np.array_equal(cfg_guide(u, c, 0.0).values, c.values)

    def test_forced_arithmetic(self):
        u = LogitTensor(1, 1, VocabSpec(2), np.array([[0.0, 1.0]]))
        c = LogitTensor(1, 1, VocabSpec(2), np.array([[1.0, 1.0]]))
        assert np.array_equal(cfg_guide(u, c, 1.0).values, [[2.0, 1.0]])

    def test_ratio_schedule_step_zero_is_cond(self, rng):
        sched = ScaleSchedule(((1, 1), (2, 2), (3, 3)), 1.75)
        u, c = make_pair(rng, 1, 1, 4)
        out = cfg_guide(u, c, sched.lam(0))
        assert np.array_equal(out.values, c.values)

    @given(
        h=st.integers(1, 16),
        w=st.integers(1, 16),
        v=st.sampled_from([2, 16, 256]),
        lam=st.floats(-4.0, 4.0, allow_nan=False),
        seed=st.integers(0, 2**32 - 1),
    )
    @settings(max_examples=60, deadline=None)
    def test_equivalence_with_nudge_form(self, h, w, v, lam, seed):
        rng = np.random.default_rng(seed)
        u, c = make_pair(rng, h, w, v)
        via_cfg = cfg_guide(u, c, lam).values
        via_nudge = u.values + nudge(u, c, 1.0 + lam).values
        assert np.max(np.abs(via_cfg - via_nudge)) < 1e-12


class TestAttentionWeights:
    def test_single_position(self):
        field = GuidanceField(1, 1, VocabSpec(4), np.array([[1.0, 2.0, 3.0, 4.0]]))
        attn = attention_weights(field, VocabSpec(4))
        assert np.array_equal(attn.values, [[1.0]])

    def test_orthogonal_rows_frozen_oracle(self):
        field = GuidanceField(1, 2, VocabSpec(4), np.array([
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
        ]))
        attn = attention_weights(field, VocabSpec(4))
        expected = np.array([
            [ORTHO_SELF, ORTHO_OTHER],
            [ORTHO_OTHER, ORTHO_SELF],
        ])
        assert np.allclose(attn.values, expected, atol=1e-12, rtol=0.0)

    def test_identical_rows_give_uniform(self):
        field = GuidanceField(2, 2, VocabSpec(3), np.tile([1.0, -2.0, 0.5], (4, 1)))
        attn = attention_weights(field, VocabSpec(3))
        assert np.allclose(attn.values, 0.25, atol=1e-15, rtol=0.0)

    def test_matches_brute_force_oracle(self, rng):
        field = GuidanceField(3, 4, VocabSpec(7), rng.normal(0, 2, (12, 7)))
        attn = attention_weights(field, VocabSpec(7))
        oracle = brute_force_attention(field.values, 7)
        assert np.allclose(attn.values, oracle, atol=1e-12, rtol=0.0)

    @given(
        h=st.integers(1, 16),
        w=st.integers(1, 16),
        v=st.sampled_from([2, 16, 256]),
        scale=st.floats(0.01, 50.0),
        seed=st.integers(0, 2**32 - 1),
    )
    @settings(max_examples=60, deadline=None)
    def test_rows_are_probability_vectors(self, h, w, v, scale, seed):
        rng = np.random.default_rng(seed)
        field = GuidanceField(h, w, VocabSpec(v), rng.normal(0, scale, (h * w, v)))
        attn = attention_weights(field, VocabSpec(v))
        sums = attn.values.sum(axis=1)
        assert np.all(np.abs(sums - 1.0) <= 1e-9)
        assert np.all(attn.values >= 0.0)
        assert np.all(attn.values <= 1.0)

    def test_large_magnitudes_stay_finite(self):
        # max-subtraction must absorb scores in the hundreds
        field = GuidanceField(1, 3, VocabSpec(2), np.array([
            [40.0, 0.0], [0.0, 40.0], [30.0, 30.0],
        ]))
        attn = attention_weights(field, VocabSpec(2))
        assert np.isfinite(attn.values).all()

    def test_score_overflow_is_reported(self):
        big = np.full((2, 2), 1e200)
        field = GuidanceField(1, 2, VocabSpec(2), big)
        with pytest.raises(NonFiniteValueError):
            attention_weights(field, VocabSpec(2))

    def test_vocab_doubling_flattens_rows(self, rng):
        field_values = rng.normal(0, 3, (9, 8))
        field = GuidanceField(3, 3, VocabSpec(8), field_values)
        narrow = attention_weights(field, VocabSpec(8)).values
        wide = attention_weights(field, VocabSpec(16)).values

        def row_entropies(matrix):
            p = np.clip(matrix, 1e-300, None)
            return -(p * np.log(p)).sum(axis=1)

        assert np.all(row_entropies(wide) >= row_entropies(narrow) - 1e-12)
        # rows were not uniform to begin with, so flattening is strict
        assert row_entropies(wide).sum() > row_entropies(narrow).sum()


class TestAttentionMatrixValidation:
    def test_rejects_bad_row_sums(self):
        with pytest.raises(ConfigError):
            AttentionMatrix(2, np.array([[0.7, 0.7], [0.5, 0.5]]))

    def test_rejects_negative_entries(self):
        with pytest.raises(ConfigError):
            AttentionMatrix(2, np.array([[1.2, -0.2], [0.5, 0.5]]))


class TestIggGuide:
    def test_zero_nudge_returns_uncond(self, rng):
        u = make_tensor(rng, 2, 2, 4)
        out = igg_guide(u, u, 3.0, VocabSpec(4))
        assert np.array_equal(out.values, u.values)

    def test_single_position_collapses_to_cfg(self, rng):
        u, c = make_pair(rng, 1, 1, 6)
        gamma = 1.85
        via_igg = igg_guide(u, c, gamma, VocabSpec(6)).values
        via_cfg = cfg_guide(u, c, gamma - 1.0).values
        assert np.allclose(via_igg, via_cfg, atol=1e-12, rtol=0.0)

    def test_two_position_hand_check(self):
        u = LogitTensor(1, 2, VocabSpec(4), np.zeros((2, 4)))
        c = LogitTensor(1, 2, VocabSpec(4), np.array([
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
        ]))
        out = igg_guide(u, c, 1.0, VocabSpec(4))
        # row i = uncond_i + sum_j A_ij F_j with the frozen orthogonal weights
        expected = np.array([
            [ORTHO_SELF, ORTHO_OTHER, 0.0, 0.0],
            [ORTHO_OTHER, ORTHO_SELF, 0.0, 0.0],
        ])
        assert np.allclose(out.values, expected, atol=1e-12, rtol=0.0)

    def test_identity_attention_collapses_to_cfg(self, rng):
        u, c = make_pair(rng, 3, 4, 8)
        gamma = 2.1
        field = nudge(u, c, gamma)
        identity = AttentionMatrix(12, np.eye(12))
        collapsed = apply_attention(u, field, identity).values
        reference = cfg_guide(u, c, gamma - 1.0).values
        assert np.max(np.abs(collapsed - reference)) < 1e-12

    def test_permutation_equivariance(self, rng):
        u, c = make_pair(rng, 3, 3, 5)
        perm = rng.permutation(9)
        pu = LogitTensor(3, 3, VocabSpec(5), u.values[perm])
        pc = LogitTensor(3, 3, VocabSpec(5), c.values[perm])
        base = igg_guide(u, c, 1.5, VocabSpec(5)).values
        permuted = igg_guide(pu, pc, 1.5, VocabSpec(5)).values
        assert np.allclose(permuted, base[perm], atol=1e-12, rtol=0.0)


class TestIggGuideWindowed:
    def test_full_window_bit_equal_to_global(self, rng):
        u, c = make_pair(rng, 5, 7, 6)
        global_out = igg_guide(u, c, 1.85, VocabSpec(6))
        windowed = igg_guide_windowed(
            u, c, 1.85, VocabSpec(6), window_rule=lambda h, w: 2 * max(h, w)
        )
        assert np.array_equal(windowed.values, global_out.values)

    def test_window_one_is_identity_attention(self, rng):
        u, c = make_pair(rng, 3, 3, 4)
        gamma = 1.3
        out = igg_guide_windowed(u, c, gamma, VocabSpec(4), window_rule=lambda h, w: 1)
        reference = cfg_guide(u, c, gamma - 1.0).values
        assert np.allclose(out.values, reference, atol=1e-12, rtol=0.0)

    def test_single_position_any_window(self, rng):
        u, c = make_pair(rng, 1, 1, 4)
        out = igg_guide_windowed(u, c, 2.0, VocabSpec(4), window_rule=lambda h, w: 5)
        reference = cfg_guide(u, c, 1.0).values
        assert np.allclose(out.values, reference, atol=1e-12, rtol=0.0)

    def test_masking_matches_brute_force(self, rng):
        h, w, v, window = 4, 5, 6, 3
        u, c = make_pair(rng, h, w, v)
        gamma = 1.7
        field = nudge(u, c, gamma)
        radius = window // 2
        n = h * w
        scores = field.values @ field.values.T / math.sqrt(v)
        oracle = np.empty((n, n))
        for i in range(n):
            yi, xi = divmod(i, w)
            row = np.full(n, -np.inf)
            for j in range(n):
                yj, xj = divmod(j, w)
                if max(abs(yi - yj), abs(xi - xj)) <= radius:
                    row[j] = scores[i, j]
            row -= row.max()
            ex = np.exp(row)
            oracle[i] = ex / ex.sum()
        expected = u.values + oracle @ field.values
        out = igg_guide_windowed(u, c, gamma, VocabSpec(v), window_rule=lambda a, b: window)
        assert np.allclose(out.values, expected, atol=1e-12, rtol=0.0)

    def test_default_rule_is_sqrt_area(self, rng):
        u, c = make_pair(rng, 4, 4, 4)
        implicit = igg_guide_windowed(u, c, 1.5, VocabSpec(4))
        explicit = igg_guide_windowed(
            u, c, 1.5, VocabSpec(4), window_rule=default_window_rule
        )
        assert np.array_equal(implicit.values, explicit.values)
        assert default_window_rule(4, 4) == 4.0
        assert default_window_rule(8, 12) == math.sqrt(96)

    def test_window_below_one_rejected(self, rng):
        u, c = make_pair(rng, 2, 2, 4)
        with pytest.raises(ConfigError):
            igg_guide_windowed(u, c, 1.0, VocabSpec(4), window_rule=lambda h, w: 0)


class TestMixedGuide:
    def test_secondary_zero_reduces_to_cfg_nudge_form(self, rng):
        u, c = make_pair(rng, 3, 3, 8)
        gamma = 1.6
        out = mixed_guide(u, c, gamma, 0.0, VocabSpec(8)).values
        reference = u.values + gamma * (c.values - u.values)
        assert np.max(np.abs(out - reference)) < 1e-12

    def test_primary_zero_reduces_to_igg(self, rng):
        u, c = make_pair(rng, 3, 3, 8)
        gamma_prime = 1.85
        out = mixed_guide(u, c, 0.0, gamma_prime, VocabSpec(8)).values
        reference = igg_guide(u, c, gamma_prime, VocabSpec(8)).values
        assert np.max(np.abs(out - reference)) < 1e-12


class TestGuidedLogitsDispatch:
    def setup_method(self):
        self.rng = np.random.default_rng(9)
        self.sched = ScaleSchedule(((1, 1), (2, 2), (3, 3)), 1.85, secondary_weight=0.75)
        self.u, self.c = make_pair(self.rng, 2, 2, 6)

    def test_none_returns_cond(self):
        out = guided_logits(GuidanceScheme("none"), self.u, self.c, self.sched, 1)
        assert np.array_equal(out.values, self.c.values)

    def test_cfg_uses_lambda_schedule(self):
        out = guided_logits(GuidanceScheme("cfg"), self.u, self.c, self.sched, 1)
        expected = cfg_guide(self.u, self.c, self.sched.lam(1)).values
        assert np.array_equal(out.values, expected)

    def test_igg_uses_gamma_schedule(self):
        out = guided_logits(GuidanceScheme("igg"), self.u, self.c, self.sched, 2)
        expected = igg_guide(self.u, self.c, self.sched.gamma(2), VocabSpec(6)).values
        assert np.array_equal(out.values, expected)

    def test_windowed_uses_scheme_rule(self):
        scheme = GuidanceScheme("igg_windowed", window_rule=lambda h, w: 1)
        out = guided_logits(scheme, self.u, self.c, self.sched, 1)
        expected = igg_guide_windowed(
            self.u, self.c, self.sched.gamma(1), VocabSpec(6), window_rule=lambda h, w: 1
        ).values
        assert np.array_equal(out.values, expected)

    def test_mixed_uses_both_weights(self):
        out = guided_logits(GuidanceScheme("mixed"), self.u, self.c, self.sched, 1)
        expected = mixed_guide(
            self.u, self.c, self.sched.gamma(1), self.sched.gamma_secondary(1), VocabSpec(6)
        ).values
        assert np.array_equal(out.values, expected)

    def test_unknown_scheme_kind_rejected(self):
        with pytest.raises(ConfigError):
            GuidanceScheme("bogus")

    def test_window_rule_only_for_windowed(self):
        with pytest.raises(ConfigError):
            GuidanceScheme("cfg", window_rule=lambda h, w: 3)
