import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from horsespec import construction, spectrum, thermo
from horsespec.errors import InvalidArgument


def bernoulli_rv(params, N):
    """Uniform-measure average of Phi_N summed over the position of the first 2."""
    mp.mp.dps = 30
    a = params.alpha
    tot = [mp.mpf(0), mp.mpf(0)]

    def add(prob, val):
        tot[0] += prob * mp.mpf(val[0])
        tot[1] += prob * mp.mpf(val[1])

    third = mp.mpf(1) / 3
    fam = construction.make_vertices(params, max(N - a - 1, 1))
    for j in range(N):
        pj = (mp.mpf(2) / 3) ** j * third
        if j <= a:
            add(pj, fam.w0)
        else:
            k = j - a
            pv = third**j * third
            add(pv, fam.v[k - 1])
            add(pj - pv, fam.u[k - 1])
    add((mp.mpf(2) / 3) ** N, fam.w_inf)
    return np.array([float(tot[0]), float(tot[1])])


def charpoly(M, dps=50):
    """det(xI - M) from Faddeev-LeVerrier coefficients in extended precision."""
    mp.mp.dps = dps
    n = M.shape[0]
    A = mp.matrix(M.tolist())
    coeffs = [mp.mpf(1)]
    Mk = mp.zeros(n, n)
    I = mp.eye(n)
    for k in range(1, n + 1):
        Mk = A * (Mk + coeffs[-1] * I)
        coeffs.append(-sum(Mk[i, i] for i in range(n)) / k)
    return lambda x: mp.polyval(coeffs, x)


def dense_tilted(p, q, params, N):
    op = thermo.tilted_operator(p, q, params, N)
    return op.matrix.toarray(), op.shift


class TestPressure:
    @pytest.mark.parametrize("N", range(1, 9))
    def test_zero_tilt(self, params, N):
        assert abs(thermo.pressure(0, 0, params, N) - math.log(3)) < 1e-12

    @pytest.mark.parametrize("N", [1, 2, 3])
    @pytest.mark.parametrize("tilt", [(0.7, -0.3), (-2.0, 1.5), (3.0, 3.0)])
    def test_charpoly_bracketing(self, params, N, tilt):
        M, shift = dense_tilted(*tilt, params, N)
        rho = mp.mpf(math.exp(thermo.pressure(*tilt, params, N) - shift))
        poly = charpoly(M)
        eps = mp.mpf("1e-10")
        # a sign change brackets a root of the characteristic polynomial ...
        assert poly(rho * (1 - eps)) * poly(rho * (1 + eps)) < 0
        # ... and it is the largest real one: no sign change up to the max row sum
        top = mp.mpf(float(M.sum(axis=1).max())) * (1 + eps)
        grid = [rho * (1 + eps) + (top - rho) * mp.mpf(i) / 200 for i in range(201)]
        assert all(poly(x) > 0 for x in grid)

    @settings(max_examples=100, deadline=None)
    @given(
        st.tuples(st.floats(-20, 20), st.floats(-20, 20)),
        st.tuples(st.floats(-20, 20), st.floats(-20, 20)),
    )
    def test_convexity(self, s, t):
        P = lambda x: thermo.pressure(x[0], x[1], construction.DEFAULTS, 4, method="lumped")
        mid = (0.5 * (s[0] + t[0]), 0.5 * (s[1] + t[1]))
        assert P(mid) <= 0.5 * (P(s) + P(t)) + 1e-10

    def test_lumped_matches_debruijn(self, params):
        rng = np.random.default_rng(3)
        for N in (2, 4, 6):
            for p, q in rng.uniform(-20, 20, size=(8, 2)):
                assert abs(thermo.pressure(p, q, params, N) - thermo.pressure(p, q, params, N, method="lumped")) < 1e-10

    def test_fenchel_young(self, params):
        N = 5
        rvs = spectrum.periodic_rotation_vectors(6, params)
        rng = np.random.default_rng(7)
        for p, q in rng.uniform(-5, 5, size=(10, 2)):
            P = thermo.pressure(p, q, params, N)
            assert np.all(P >= rvs @ np.array([p, q]) - 1e-9)

    def test_depth_stability(self, params):
        rng = np.random.default_rng(11)
        for N in range(4, 8):
            eps = construction.truncation_error(params, N)
            for p, q in rng.uniform(-10, 10, size=(6, 2)):
                d = abs(thermo.pressure(p, q, params, N) - thermo.pressure(p, q, params, N + 1))
                assert d <= (abs(p) + abs(q)) * eps + 1e-12

    def test_bad_method(self, params):
        with pytest.raises(InvalidArgument):
            thermo.pressure(0, 0, params, 3, method="dense")


class TestEquilibrium:
    @pytest.mark.parametrize("N", [3, 5, 7])
    def test_uniform_at_zero(self, params, N):
        eq = thermo.equilibrium(0, 0, params, N)
        assert np.allclose(eq.vertex_measure, 3.0**-N, rtol=1e-10)
        assert eq.entropy == pytest.approx(math.log(3), abs=1e-12)
        assert np.allclose(eq.rv, bernoulli_rv(params, N), atol=1e-12)
        assert np.allclose(thermo.pressure_gradient(0, 0, params, N), bernoulli_rv(params, N), atol=1e-12)

    def test_structure(self, params):
        N = 4
        eq = thermo.equilibrium(1.3, -0.4, params, N)
        assert np.all(eq.right_vec > 0) and np.all(eq.left_vec > 0)
        assert eq.vertex_measure.sum() == pytest.approx(1, abs=1e-14)
        g = thermo._debruijn_data(params, N)[0]
        e = g.edges()
        out = np.bincount(e[:, 0], eq.edge_measure, minlength=g.n_vertices)
        inn = np.bincount(e[:, 1], eq.edge_measure, minlength=g.n_vertices)
        assert np.abs(out - inn).max() < 1e-14
        assert np.abs(out - eq.vertex_measure).max() < 1e-14

    def test_monotone_along_ray(self, params):
        ys = [thermo.equilibrium(0, q, params, 5).rv[1] for q in (0, 1, 2, 4, 8)]
        assert all(x < y for x, y in zip(ys, ys[1:]))

    def test_gibbs_and_gradient(self, params):
        rng = np.random.default_rng(2024)
        N, h = 5, 1e-5
        for p, q in rng.uniform(-20, 20, size=(25, 2)):
            eq = thermo.equilibrium(p, q, params, N)
            assert abs(eq.entropy + p * eq.rv[0] + q * eq.rv[1] - eq.log_rho) < 1e-10
            assert -1e-12 <= eq.entropy <= math.log(3) + 1e-12
            fd = np.array(
                [
                    (thermo.pressure(p + h, q, params, N) - thermo.pressure(p - h, q, params, N)) / (2 * h),
                    (thermo.pressure(p, q + h, params, N) - thermo.pressure(p, q - h, params, N)) / (2 * h),
                ]
            )
            assert np.all(np.abs(fd - eq.rv) <= 1e-5 * np.abs(eq.rv))
            assert spectrum.RotationPolygon(spectrum.value_hull(params, N), 0).contains(eq.rv, tol=1e-12)

    def test_large_tilt_finite(self, params):
        eq = thermo.equilibrium(200, 200, params, 4, method="lumped")
        assert math.isfinite(eq.log_rho) and np.all(np.isfinite(eq.rv))
