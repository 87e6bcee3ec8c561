import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tagdiff.potential import (
    PairPotential,
    QuadratureParams,
    SingularityError,
    audit_conditions,
    evaluate,
    gradient,
    lennard_jones,
    slow_tail_attraction,
    smooth_bump,
    truncate_and_shift,
    zero_potential,
)

LJ = lennard_jones(1.0, 1.0, 3)
LJ_CUT = lennard_jones(1.0, 1.0, 3, cutoff=2.5)

vectors3 = st.lists(st.floats(-3.0, 3.0, allow_nan=False), min_size=3, max_size=3).map(np.array)


def _fd_gradient(pot, x, h=1e-6):
    g = np.zeros_like(x)
    for k in range(len(x)):
        e = np.zeros_like(x)
        e[k] = h
        g[k] = (pot.evaluate(x + e) - pot.evaluate(x - e)) / (2 * h)
    return g


class TestEvaluate:
    def test_zero_at_sigma(self):
        assert evaluate(LJ, [1.0, 0.0, 0.0]) == 0.0

    def test_singularity_is_inf(self):
        assert evaluate(LJ, np.zeros(3)) == math.inf

    def test_minimum_value(self):
        r = 2 ** (1 / 6)
        assert evaluate(LJ, [0.0, r, 0.0]) == pytest.approx(-1.0, rel=1e-14)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            evaluate(LJ, [1.0, 0.0])

    def test_vectorized(self):
        x = np.array([[1.0, 0, 0], [0, 2 ** (1 / 6), 0]])
        np.testing.assert_allclose(LJ.evaluate(x), [0.0, -1.0], atol=1e-14)

    def test_bump_support(self):
        pot = smooth_bump(2.0, 1.5, 2)
        assert pot.evaluate([0.0, 0.0]) == pytest.approx(2.0)
        assert pot.evaluate([1.5, 0.0]) == 0.0
        assert pot.evaluate([0.0, 3.0]) == 0.0

    @settings(max_examples=200, deadline=None)
    @given(vectors3)
    def test_evenness(self, x):
        for pot in (LJ, LJ_CUT, smooth_bump(1.0, 1.0, 3)):
            assert pot.evaluate(x) == pot.evaluate(-x) or (
                math.isinf(pot.evaluate(x)) and math.isinf(pot.evaluate(-x))
            )


class TestGradient:
    def test_minimum_is_stationary(self):
        r = 2 ** (1 / 6)
        np.testing.assert_allclose(gradient(LJ_CUT, [r, 0.0, 0.0]), 0.0, atol=1e-12)

    def test_finite_difference_at_1_5(self):
        x = np.array([1.5, 0.0, 0.0])
        g = gradient(LJ, x)
        fd = _fd_gradient(LJ, x)
        assert abs(g[0] - fd[0]) <= 1e-6 * abs(g[0])

    def test_zero_beyond_cutoff(self):
        np.testing.assert_array_equal(gradient(LJ_CUT, [0.0, 2.6, 0.0]), 0.0)

    def test_singularity_raises(self):
        with pytest.raises(SingularityError):
            gradient(LJ, np.zeros(3))

    def test_zero_potential_never_raises(self):
        np.testing.assert_array_equal(gradient(zero_potential(2), np.zeros(2)), 0.0)

    @settings(max_examples=200, deadline=None)
    @given(vectors3)
    def test_oddness(self, x):
        if np.linalg.norm(x) < 0.5:
            return
        for pot in (LJ, LJ_CUT, smooth_bump(1.0, 1.0, 3)):
            np.testing.assert_array_equal(pot.gradient(-x), -pot.gradient(x))

    @settings(max_examples=200, deadline=None)
    @given(vectors3)
    def test_matches_finite_difference(self, x):
        r = np.linalg.norm(x)
        # keep away from the core (huge curvature) and the cutoff kink
        if r < 0.8 or abs(r - 2.5) < 1e-3:
            return
        for pot in (LJ_CUT, smooth_bump(1.0, 1.2, 3)):
            g = pot.gradient(x)
            fd = _fd_gradient(pot, x)
            assert np.linalg.norm(g - fd) <= 1e-5 * (1 + np.linalg.norm(g))


class TestTruncation:
    def test_zero_potential_unchanged(self):
        z = zero_potential(3)
        t = truncate_and_shift(z, 1.7)
        assert t.is_zero and t.shift_constant == 0.0
        assert t.evaluate([0.3, 0.0, 0.0]) == 0.0

    def test_shift_constant(self):
        # direct formula at r = 2.5
        expected = 4 * (2.5**-12 - 2.5**-6)
        assert LJ_CUT.shift_constant == pytest.approx(expected, rel=1e-14)
        assert LJ_CUT.shift_constant == pytest.approx(-0.0163, abs=1e-4)

    def test_continuity_at_cutoff(self):
        inside = LJ_CUT.evaluate([2.5 - 1e-9, 0.0, 0.0])
        assert abs(inside) < 1e-6
        assert LJ_CUT.evaluate([2.5, 0.0, 0.0]) == 0.0
        assert LJ_CUT.evaluate([0.0, 0.0, 3.0]) == 0.0
        jump = abs(LJ_CUT.evaluate([2.5 * (1 - 1e-15), 0, 0]) - LJ_CUT.evaluate([2.5, 0, 0]))
        assert jump < 1e-12

    def test_idempotent(self):
        assert truncate_and_shift(LJ_CUT, 2.5) == LJ_CUT

    def test_rejects_core_and_nonpositive(self):
        with pytest.raises(ValueError):
            truncate_and_shift(LJ, 0.0)
        with pytest.raises(ValueError):
            truncate_and_shift(LJ, 1e-13)

    def test_untruncated_roundtrip(self):
        assert LJ_CUT.untruncated() == LJ

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            PairPotential(kind="morse")


def _mp_integral_I_lj(d):
    """Independent oracle for the (I) integral of LJ(1,1) via mpmath."""
    omega = 2 * mpmath.pi ** (mpmath.mpf(d) / 2) / mpmath.gamma(mpmath.mpf(d) / 2)

    def f(r):
        u = 4 * (r**-12 - r**-6)
        return abs(-mpmath.expm1(-u)) * r ** (d - 1)

    r_min = mpmath.mpf(2) ** (mpmath.mpf(1) / 6)
    val = mpmath.quad(f, [0, 0.5, 1, r_min, 2, 4, 16, mpmath.inf])
    return float(omega * val)


class TestAudit:
    def test_zero_potential(self):
        rep = audit_conditions(zero_potential(3), p=2)
        assert rep.integral_I == 0.0
        assert all(v == 0.0 for v in rep.integral_DL.values())
        assert rep.verdict["I"] == "pass" and rep.ss_heuristic_ok
        assert rep.passed

    def test_lj_d3_p4(self):
        rep = audit_conditions(LJ, p=4)
        assert rep.passed
        assert all(v == "pass" for v in rep.verdict.values())
        assert math.isfinite(rep.integral_I) and rep.integral_I > 0
        assert all(math.isfinite(v) and v >= 0 for v in rep.integral_DL.values())
        assert rep.psi_tail_integral >= 0

    @pytest.mark.parametrize("d", [1, 2, 3])
    def test_integral_I_against_mpmath(self, d):
        rep = audit_conditions(lennard_jones(1.0, 1.0, d), p=2)
        assert rep.integral_I == pytest.approx(_mp_integral_I_lj(d), rel=1e-6)

    def test_dl1_against_mpmath(self):
        rep = audit_conditions(lennard_jones(1.0, 1.0, 2), p=2)

        def f(r):
            u = 4 * (r**-12 - r**-6)
            du = abs(4 * (-12 * r**-13 + 6 * r**-7))
            return du * mpmath.exp(-u) * r

        ref = 2 * mpmath.pi * mpmath.quad(f, [0, 0.5, 1, 2 ** (1 / 6), 2, 4, 16, mpmath.inf])
        assert rep.integral_DL["1"] == pytest.approx(float(ref), rel=1e-6)

    def test_audit_ignores_truncation(self):
        a = audit_conditions(LJ, p=2)
        b = audit_conditions(LJ_CUT, p=2)
        assert a.integral_I == b.integral_I

    @pytest.mark.parametrize("d", [1, 2, 3])
    @pytest.mark.parametrize("p", [2.0, 3.5, 6.0])
    def test_lj_passes_integrability_for_all_p(self, d, p):
        rep = audit_conditions(lennard_jones(1.0, 1.0, d), p=p)
        assert rep.verdict["I"] == "pass"
        assert rep.verdict["DL1"] == "pass"
        assert rep.passed

    def test_slow_tail_fails_lr(self):
        rep = audit_conditions(slow_tail_attraction(3), p=2)
        assert rep.verdict["LR"] == "fail"
        assert not rep.lr_envelope_ok
        assert not rep.passed

    def test_p_below_two_rejected(self):
        with pytest.raises(ValueError):
            audit_conditions(LJ, p=1.5)

    def test_inconclusive_not_crash(self):
        # two doublings cannot settle anything
        q = QuadratureParams(max_doublings=1)
        rep = audit_conditions(slow_tail_attraction(3), p=2, quadrature=q)
        assert rep.verdict["LR"] in ("inconclusive", "fail")

    def test_report_json_safe(self):
        import json

        rep = audit_conditions(slow_tail_attraction(2), p=3)
        json.dumps(rep.to_dict())
