import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from horsespec import construction, geometry, symbolic
from horsespec.construction import ConstructionParams, DEFAULTS
from horsespec.errors import ConfigurationError, DomainError, InvalidArgument

mp.mp.dps = 40


def mp_h(x):
    # profile evaluated in high precision from the raw constants
    a = -mp.log(mp.mpf(1) / 5)
    return mp.log(4) + mp.mpf(1) / 2 * mp.log(1 + x - a)


def mp_x(k):
    a = mp.log(5)
    b = mp.log(10)
    return a + (b - a) / 2 * mp.mpf(1) / 2**k


class TestParams:
    @pytest.mark.parametrize(
        "kw",
        [
            {"lambda_inf": 3.0},
            {"delta_inf": 0.34},
            {"delta_0": 1.0},
            {"theta": 0.0},
            {"h_beta": 0.0},
            {"x_scale": 1.0},
            {"C": -1.0},
            {"alpha": -1},
        ],
    )
    def test_rejects(self, kw):
        with pytest.raises(ConfigurationError):
            ConstructionParams(**kw)

    def test_roundtrip(self):
        p = ConstructionParams(theta=0.4, x_scale=0.3)
        assert ConstructionParams.from_dict(p.to_dict()) == p

    def test_unknown_key(self):
        with pytest.raises(ConfigurationError):
            ConstructionParams.from_dict({"lambda": 4})

    def test_derived(self, params):
        assert params.a == pytest.approx(math.log(5), abs=1e-15)
        assert params.b == pytest.approx(math.log(10), abs=1e-15)
        assert params.a < params.b
        assert params.h(params.a) > math.log(3)


class TestProfile:
    def test_h_at_a(self, params):
        assert construction.h_eval(params.a, params) == math.log(4)

    def test_h_at_b_high_precision(self, params):
        ref = mp_h(mp.log(10))
        assert abs(construction.h_eval(params.b, params) - float(ref)) < 1e-15
        # the published six-digit rounding of this value is off; see the decisions ledger
        assert float(ref) == pytest.approx(1.649589, abs=1e-6)

    def test_concave_increasing(self, params):
        xs = np.linspace(params.a, params.b, 1000)
        hs = np.array([params.h(x) for x in xs])
        assert np.all(np.diff(hs) > 0)
        assert np.all(np.diff(hs, 2) < 0)
        m = 0.5 * (params.a + params.b)
        assert params.h(m) > 0.5 * (params.h(params.a) + params.h(params.b))

    def test_outside_domain(self, params):
        with pytest.raises(DomainError):
            construction.h_eval(params.b + 0.1, params)


class TestVertices:
    def test_endpoints(self, params):
        fam = construction.make_vertices(params, 4)
        assert np.allclose(fam.w0, [math.log(10), math.log(4)], atol=1e-15)
        assert np.allclose(fam.w_inf, [math.log(5), math.log(4)], atol=1e-15)

    def test_first_level_high_precision(self, params):
        fam = construction.make_vertices(params, 1)
        x1 = mp_x(1)
        assert abs(fam.x[0] - float(x1)) < 4e-16
        v1 = (x1, mp_h(x1))
        assert abs(fam.v[0][1] - float(v1[1])) < 4e-16
        w0 = (mp.log(10), mp.log(4))
        w1 = [(2 * w0[c] + v1[c]) / 3 for c in range(2)]
        assert np.allclose(fam.w[0], [float(w1[0]), float(w1[1])], rtol=0, atol=1e-15)
        assert fam.w[0] == pytest.approx([2.129298, 1.412929], abs=1e-6)

    def test_family_invariants(self, params):
        L = 12
        fam = construction.make_vertices(params, L)
        assert np.all(np.diff(fam.x) < 0)
        assert np.all((fam.x > params.a) & (fam.x < params.b))
        assert np.all(fam.u[:, 1] == fam.w_inf[1])
        for l in range(1, L + 1):
            assert np.linalg.norm(fam.v[l - 1] - fam.w_inf) < params.C * params.theta**l

    def test_recursion(self, params):
        a = params.alpha
        fam = construction.make_vertices(params, 10)
        for l in range(2, 11):
            lhs = (l + a + 1) * fam.w[l - 1]
            rhs = (l + a) * fam.w[l - 2] + fam.v[l - 1]
            assert np.allclose(lhs, rhs, rtol=4 * np.finfo(float).eps, atol=0)

    def test_converges_to_w_inf(self, params):
        fam = construction.make_vertices(params, 30)
        d = np.linalg.norm(fam.w - fam.w_inf, axis=1)
        assert np.all(np.diff(d[5:]) < 0)
        assert d[-1] < 0.1

    @pytest.mark.parametrize("L", [1, 3, 6, 10])
    def test_extreme_points(self, params, L):
        fam = construction.make_vertices(params, L)
        pts = np.vstack([fam.w0, fam.w, fam.w_inf])
        hull = geometry.convex_hull(pts, tol=1e-14)
        assert len(hull) == L + 2
        for p in pts:
            assert any(np.array_equal(p, h) for h in hull)

    def test_u_collinear(self, params):
        fam = construction.make_vertices(params, 8)
        hull = geometry.convex_hull(np.vstack([fam.w0, fam.u, fam.w_inf]), tol=1e-14)
        assert len(hull) == 2

    def test_bad_L(self, params):
        with pytest.raises(InvalidArgument):
            construction.make_vertices(params, 0)

    def test_decay_violation(self):
        p = ConstructionParams(C=1e-3)
        with pytest.raises(ConfigurationError, match="l = 1"):
            construction.make_vertices(p, 3)


class TestRates:
    def test_level_one(self, params):
        d, l = construction.level_rates(params, 1)
        assert d == pytest.approx(2 ** -0.25, abs=1e-15)
        assert l == pytest.approx(math.sqrt(1 + math.log(2) / 4), abs=1e-15)
        assert l == pytest.approx(float(mp.exp(mp_h(mp_x(1))) / 4), abs=1e-15)

    def test_continuity_at_a(self, params):
        d, l = construction.rates_from_x(params.a + 1e-12, params)
        assert d == pytest.approx(1, abs=1e-11) and l == pytest.approx(1, abs=1e-11)

    def test_outside(self, params):
        with pytest.raises(DomainError):
            construction.rates_from_x(params.a, params)


class TestPotential:
    def test_values(self, params):
        fam = construction.make_vertices(params, 3)
        assert np.array_equal(construction.phi_eval("2010", params, 4), fam.w0)
        assert np.array_equal(construction.phi_eval("1120", params, 4), fam.v[0])
        assert np.array_equal(construction.phi_eval("0120", params, 4), fam.u[0])
        assert np.array_equal(construction.phi_eval("0101", params, 4), fam.w_inf)

    def test_periodic(self, params):
        fam = construction.make_vertices(params, 6)
        assert np.array_equal(construction.phi_periodic_rv("2", params), fam.w0)
        assert np.array_equal(construction.phi_periodic_rv("01", params), fam.w_inf)
        for l in range(1, 7):
            rv = construction.phi_periodic_rv("1" * (l + 1) + "2", params)
            assert np.allclose(rv, fam.w[l - 1], rtol=10 * np.finfo(float).eps, atol=0)

    def test_periodic_matches_window_average(self, params):
        # average of phi_eval over the orbit windows at a depth that sees every 2
        for g in ["0112", "1212", "00121", "2210"]:
            o = symbolic.PeriodicItinerary.of(g)
            N = 3 * o.period
            vals = [construction.phi_eval(o.forward(i, N), params, N) for i in range(o.period)]
            assert np.allclose(np.mean(vals, axis=0), construction.phi_periodic_rv(o, params), atol=1e-15)

    def test_truncated_values(self, params):
        tp = construction.truncated_potential(params, 5)
        assert len(tp.value_of_class) == 2 + 2 * 3
        assert np.array_equal(tp("11120"), construction.make_vertices(params, 2).v[1])


class TestTruncationError:
    @pytest.mark.parametrize("N", range(4, 13))
    def test_bound(self, params, N):
        assert construction.truncation_error(params, N) <= params.C * params.theta ** (N - params.alpha - 1)

    def test_decreasing(self, params):
        e = [construction.truncation_error(params, N) for N in range(3, 14)]
        assert all(x > y for x, y in zip(e, e[1:]))
        assert construction.truncation_error(params, 10) < 1e-2

    def test_sup_is_attained(self, params):
        # brute-force sup over merged classes at depth N, with the full potential evaluated deep
        N, deep = 5, 14
        best = 0.0
        for k in range(N - params.alpha, deep - params.alpha):
            for tag in ("U", "V"):
                val = construction.class_value(symbolic.PrefixClass(tag, k), params)
                best = max(best, float(np.linalg.norm(val - [params.a, params.h(params.a)])))
        assert construction.truncation_error(params, N) == pytest.approx(best, rel=1e-14)


class TestLipschitz:
    def test_independent_of_depth(self, params):
        ks = [construction.empirical_lipschitz(params, N) for N in (3, 4, 5)]
        assert max(ks) <= construction.lipschitz_bound(params)
        assert max(ks) / min(ks) < 1.05

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.integers(0, 2), min_size=7, max_size=7), st.lists(st.integers(0, 2), min_size=7, max_size=7))
    def test_pairwise_bound(self, a, b):
        p = DEFAULTS
        d = symbolic.word_distance(a, b, p.theta)
        diff = np.linalg.norm(construction.phi_eval(a, p, 7) - construction.phi_eval(b, p, 7))
        assert diff <= construction.lipschitz_bound(p) * d + 1e-15
