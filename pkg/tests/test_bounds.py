import csv
import json

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from opchain.bounds import (BoundReport, ErrorBudget, LipschitzSpec, OuterLayerSpec, SigmoidNet,
                            SigmoidOuter, composed_bound_lipschitz, composed_bound_sigmoid,
                            random_pair, sigmoid_inequality_residual, sigmoid_layer_lipschitz,
                            sweep_inequality_grid, verify_bound_empirically, verify_configurations)
from opchain.errors import DimensionMismatch, Falsification

finite = st.floats(-50, 50, allow_nan=False)
nonneg = st.floats(0, 10, allow_nan=False)


class TestResidual:
    def test_zero_perturbation(self):
        for g in (-3.0, 0.5, 2.0):
            for x in (-4.0, 0.0, 7.5):
                assert sigmoid_inequality_residual(g, x, 0.0) == 0.0

    def test_value_at_four(self):
        with mpmath.workdps(40):
            want = float(1 / (1 + mpmath.exp(-4)) - mpmath.mpf("0.5") - 1)
        got = sigmoid_inequality_residual(1.0, 0.0, 4.0)
        assert got == pytest.approx(-0.5180, abs=5e-5)
        assert got == pytest.approx(want, rel=1e-14)

    @given(st.floats(0.01, 10), finite, finite)
    def test_sign_flip_mirrors(self, g, x, e):
        # s(-t) = 1 - s(t): negating g is the same as mirroring x and e.
        lhs = sigmoid_inequality_residual(-g, x, e) / g
        rhs = sigmoid_inequality_residual(g, -x, -e) / g
        assert lhs == pytest.approx(rhs, abs=1e-12)

    @given(st.floats(-10, 10), finite, finite)
    def test_never_positive(self, g, x, e):
        assert sigmoid_inequality_residual(g, x, e) <= 1e-12


class TestComposedBounds:
    def test_exact_inner(self):
        assert composed_bound_sigmoid(OuterLayerSpec([1.0, 2.0]), ErrorBudget([0, 0], 0.07)) == 0.07

    def test_hand_evaluated(self):
        got = composed_bound_sigmoid(OuterLayerSpec([1.0, -2.0]), ErrorBudget([0.1, 0.2], 0.05))
        assert got == pytest.approx(1 * 0.25 * 0.1 + 2 * 0.25 * 0.2 + 0.05, rel=1e-15)
        assert got == pytest.approx(0.175, rel=1e-15)

    @given(st.lists(st.floats(-5, 5), min_size=1, max_size=5), st.floats(-4, 4), nonneg)
    def test_homogeneous_in_outer_weights(self, g, c, eps_g):
        eps_u = np.linspace(0.1, 1, len(g))
        base = composed_bound_sigmoid(OuterLayerSpec(g), ErrorBudget(eps_u, eps_g)) - eps_g
        scaled = composed_bound_sigmoid(OuterLayerSpec(np.multiply(g, c)), ErrorBudget(eps_u, eps_g)) - eps_g
        assert scaled == pytest.approx(abs(c) * base, rel=1e-9, abs=1e-12)

    @given(st.lists(nonneg, min_size=1, max_size=5), nonneg)
    def test_additive_in_eps_g(self, eps_u, eps_g):
        outer = OuterLayerSpec(np.linspace(-2, 2, len(eps_u)))
        full = composed_bound_sigmoid(outer, ErrorBudget(eps_u, eps_g))
        assert full == composed_bound_sigmoid(outer, ErrorBudget(eps_u, 0.0)) + eps_g

    @given(st.lists(nonneg, min_size=1, max_size=5), nonneg, st.integers(0, 4), st.floats(0, 1))
    def test_monotone(self, eps_u, eps_g, j, bump):
        j %= len(eps_u)
        outer = OuterLayerSpec(np.linspace(-2, 2, len(eps_u)))
        base = composed_bound_sigmoid(outer, ErrorBudget(eps_u, eps_g))
        more_u = list(eps_u)
        more_u[j] += bump
        assert composed_bound_sigmoid(outer, ErrorBudget(more_u, eps_g)) >= base
        assert composed_bound_sigmoid(outer, ErrorBudget(eps_u, eps_g + bump)) >= base

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            composed_bound_sigmoid(OuterLayerSpec([1.0]), ErrorBudget([0.1, 0.1]))

    def test_lipschitz_constant_outer(self):
        assert composed_bound_lipschitz(LipschitzSpec(0.0), ErrorBudget([1.0, 3.0], 0.2)) == 0.2

    def test_lipschitz_hand_evaluated(self):
        assert composed_bound_lipschitz(LipschitzSpec(2.0), ErrorBudget([0.5, 0.5], 0.0)) == 2.0

    def test_lipschitz_per_term_equals_sigmoid_form(self):
        g = np.array([1.5, -0.5, 2.0])
        eps_u = np.array([0.1, 0.3, 0.05])
        eps_g = 0.02
        per_term = sum(composed_bound_lipschitz(LipschitzSpec(abs(gj) * 0.25), ErrorBudget([e], 0.0))
                       for gj, e in zip(g, eps_u))
        assert per_term + eps_g == pytest.approx(
            composed_bound_sigmoid(OuterLayerSpec(g), ErrorBudget(eps_u, eps_g)), rel=1e-15)

    def test_lipschitz_form_dominates_sigmoid_form(self):
        g = np.array([1.5, -0.5, 2.0])
        budget = ErrorBudget([0.1, 0.3, 0.05], 0.02)
        l_g = sigmoid_layer_lipschitz(g)
        assert l_g == 0.5
        assert composed_bound_lipschitz(LipschitzSpec(l_g), budget) >= \
            composed_bound_sigmoid(OuterLayerSpec(g), budget)

    def test_invalid_specs(self):
        with pytest.raises(ValueError):
            ErrorBudget([-0.1])
        with pytest.raises(ValueError):
            LipschitzSpec(-1.0)
        with pytest.raises(ValueError):
            OuterLayerSpec([1.0], l_s=0.3)


class TestSweep:
    @pytest.mark.parametrize("g", [1.0, -1.0])
    def test_fig_grid(self, g):
        worst, (res,) = sweep_inequality_grid([g], (-10, 10), (-10, 10), 0.05)
        assert worst <= 1e-12
        assert res.normalized_residual.shape == (401, 401)

    def test_zero_line_exact(self):
        _, (res,) = sweep_inequality_grid([3.0], (-10, 10), (-10, 10), 0.05)
        row = np.flatnonzero(res.e == 0.0)
        assert row.size == 1
        assert np.all(res.normalized_residual[row[0]] == 0.0)

    def test_csv_emission(self, tmp_path):
        sweep_inequality_grid([0.5, -0.5], (-1, 1), (-1, 1), 0.5, out_dir=tmp_path)
        with open(tmp_path / "sweep_g-0.5.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["x", "e", "normalized_residual"]
        assert len(rows) == 1 + 5 * 5
        assert all(float(r[2]) <= 1e-12 for r in rows[1:])

    def test_bad_step(self):
        with pytest.raises(ValueError):
            sweep_inequality_grid([1.0], step=0.0)


def _inner(d=2, m=3, seed=0):
    rng = np.random.default_rng(seed)
    return SigmoidNet(rng.uniform(-2, 2, (4, d)), rng.uniform(-1, 1, 4),
                      rng.uniform(-2, 2, (m, 4)), rng.uniform(-1, 1, m))


class TestEmpirical:
    def test_exact_approximations(self):
        inner = _inner()
        outer = SigmoidOuter([1.0, -2.0, 0.5], 0.3)
        rep = verify_bound_empirically(inner, outer, inner, outer, (-np.ones(2), np.ones(2)), 2000)
        assert rep.empirical_max_dev == 0.0
        assert rep.theoretical_bound >= 0.0
        assert rep.margin >= 0.0

    def test_known_outer_perturbed_inner(self):
        inner = _inner()
        approx = SigmoidNet(inner.w, inner.b, inner.a, inner.c, amp=np.array([0.2, 0.1, 0.3]),
                            freq=np.ones((3, 2)), phase=np.zeros(3))
        outer = SigmoidOuter([1.0, -2.0, 0.5], 0.3)
        rep = verify_bound_empirically(inner, outer, approx, outer, (-np.ones(2), np.ones(2)), 100_000)
        assert rep.eps_g == 0.0
        inner_term = sum(abs(g) * 0.25 * e for g, e in zip([1.0, -2.0, 0.5], rep.eps_u))
        assert rep.theoretical_bound == pytest.approx(inner_term, rel=1e-15)
        assert rep.empirical_max_dev <= inner_term

    def test_three_configurations_ordering(self):
        pair = random_pair(3)
        reps = verify_configurations(pair.true_inner, pair.true_outer, pair.approx_inner,
                                     pair.approx_outer, pair.domain, 20_000, seed=3)
        assert reps["F_u"].theoretical_bound <= reps["F"].theoretical_bound
        assert reps["F_g"].theoretical_bound <= reps["F"].theoretical_bound
        # each known-operator bound is exactly the full bound minus the dropped term
        assert reps["F_u"].theoretical_bound + reps["F"].eps_g == reps["F"].theoretical_bound
        for rep in reps.values():
            assert rep.margin >= 0

    def test_lipschitz_route_for_known_outer(self):
        pair = random_pair(5)
        l_g = LipschitzSpec(sigmoid_layer_lipschitz(pair.true_outer.weights))
        reps = verify_configurations(pair.true_inner, lambda v: pair.true_outer(v), pair.approx_inner,
                                     pair.approx_outer, pair.domain, 5000, seed=5,
                                     true_outer_lipschitz=l_g)
        assert reps["F_u"].margin >= 0

    def test_falsification_is_loud(self):
        inner = _inner()
        true_outer = SigmoidOuter([1.0, 1.0, 1.0], 10.0)
        buggy = _DriftingOuter([1.0, 1.0, 1.0], 0.0)
        with pytest.raises(Falsification) as info:
            verify_bound_empirically(inner, true_outer, inner, buggy, (-np.ones(2), np.ones(2)), 500)
        assert info.value.report.falsified

    def test_report_json(self):
        rep = BoundReport(0.5, 0.25, 10, 0.25, eps_u=[0.1], eps_g=0.05)
        assert json.loads(rep.to_json())["margin"] == 0.25

    def test_random_pair_is_seeded(self):
        a, b = random_pair(11), random_pair(11)
        x = np.random.default_rng(0).uniform(-1, 1, (5, a.input_dim))
        np.testing.assert_array_equal(a.approx_inner(x), b.approx_inner(x))
        np.testing.assert_array_equal(a.true_outer(a.true_inner(x)), b.true_outer(b.true_inner(x)))


class _DriftingOuter(SigmoidOuter):
    """Matches ``g`` (bias 10) while the budget is measured, then drops the bias.

    Budget measurement makes three calls: two sample blocks and the range box.
    """

    calls = 0

    def __call__(self, v):
        self.calls += 1
        return super().__call__(v) + (10.0 if self.calls <= 3 else 0.0)
