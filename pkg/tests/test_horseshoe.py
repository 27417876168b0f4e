import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from horsespec import construction, horseshoe, symbolic
from horsespec.construction import DEFAULTS
from horsespec.errors import InvalidArgument, NumericalFailure
from horsespec.horseshoe import SIGNS


@pytest.fixture(scope="module")
def f0():
    return horseshoe.build_f0(DEFAULTS)


@pytest.fixture(scope="module")
def stage2():
    return horseshoe.build_stage(DEFAULTS, 2)


@pytest.fixture(scope="module")
def ladder():
    # one parameter set shared by stages 1..3, already small enough for every budget
    p = DEFAULTS.with_x_scale(1.5e-9)
    return {K: horseshoe.build_stage(p, K) for K in (1, 2, 3)}


class TestF0:
    def test_layout(self, f0):
        lay = f0.layout
        assert lay.I[0] == pytest.approx((1 / 16, 5 / 16))
        assert lay.I[1] == pytest.approx((3 / 8, 5 / 8))
        assert lay.J[2] == pytest.approx((0.7, 0.9))

    def test_markov_geometry(self, f0):
        lay = f0.layout
        for br in f0.branches:
            x0, x1, y0, y1 = br.image()
            s = int(br.word[0])
            assert lay.J[s][0] <= x0 < x1 <= lay.J[s][1]
        # each depth-(alpha+1) cell ab maps across the full width of V_a and onto H_b
        for br in f0.branches:
            _, _, y0, y1 = br.image()
            b = int(br.word[1])
            assert (y0, y1) == pytest.approx(lay.I[b], abs=1e-12)
        # three images pairwise disjoint
        imgs = [(lay.J[s][0], lay.J[s][1]) for s in range(3)]
        for (a0, a1), (b0, b1) in itertools.combinations(imgs, 2):
            assert a1 < b0 or b1 < a0

    def test_fixed_point_derivative(self, f0):
        fix = horseshoe.locate_periodic(f0, "2")
        J = f0.jacobian(fix.points)[0]
        assert np.allclose(J, np.diag([DEFAULTS.delta_0 * DEFAULTS.delta_inf, DEFAULTS.lambda_inf]), atol=0)

    def test_all_safe_core_derivative(self, f0):
        fix = horseshoe.locate_periodic(f0, "0")
        assert np.allclose(f0.jacobian(fix.points)[0], np.diag([0.2, 4.0]), atol=0)
        fix = horseshoe.locate_periodic(f0, "1")
        assert np.allclose(f0.jacobian(fix.points)[0], -np.diag([0.2, 4.0]), atol=0)

    def test_exponents_ignore_sign(self, f0):
        e = horseshoe.cocycle_exponents(f0, horseshoe.locate_periodic(f0, "01"))
        assert np.allclose(e, [math.log(5), math.log(4)], atol=1e-15)


class TestBoxes:
    def test_full_count(self, f0):
        fam = horseshoe.boxes_of_level(f0, 1)
        assert len(fam) == 81

    @pytest.mark.parametrize("k", [1, 2])
    def test_markings(self, f0, stage2, k):
        prev = f0 if k == 1 else horseshoe.StageMap(1, stage2.params, stage2.layout, stage2.branches, stage2.level_surgeries(1))
        fam = horseshoe.boxes_of_level(prev, k, marked_only=True)
        a = DEFAULTS.alpha
        fwd_v = {b.forward for b in fam.boxes if b.marking == "V"}
        fwd_u = {b.forward for b in fam.boxes if b.marking == "U"}
        assert fwd_v == {"1" * (k + a) + "2"}
        assert len(fwd_u) == 2 ** (k + a) - 1
        assert len(fam.boxes) == 2 ** (k + a) * 3 ** (k + a - 1)

    def test_marking_count_exhaustive(self):
        for n in range(2, 7):
            k = n - 1
            words = ["".join(w) + "2" for w in itertools.product("01", repeat=n)]
            marks = [horseshoe._marking(w, k, 1) for w in words]
            assert marks.count("V") == 1 and marks.count("U") == 2**n - 1

    def test_wrong_stage(self, f0):
        with pytest.raises(InvalidArgument):
            horseshoe.boxes_of_level(f0, 2)

    def test_gamma(self, f0, stage2):
        fam = horseshoe.boxes_of_level(f0, 1, marked_only=True)
        gs = [horseshoe.gamma_of_level(fam, f0, m).gamma for m in range(4, 10)]
        assert all(g > 0 for g in gs)
        assert all(b >= a - 1e-15 for a, b in zip(gs, gs[1:]))
        assert stage2.gammas[2] < stage2.gammas[1]


class TestSurgery:
    @pytest.fixture(scope="class")
    @staticmethod
    def blend(f0):
        fam = horseshoe.boxes_of_level(f0, 1, marked_only=True)
        cert = horseshoe.gamma_of_level(fam, f0)
        b = next(b for b in fam.boxes if b.marking == "V")
        p = DEFAULTS.with_x_scale(5e-9)
        return horseshoe.make_surgery(b, 1, p, cert.margins[(b.forward, b.backward)], cert.gamma)

    def test_linear_core_and_identity(self, blend):
        x0, x1, y0, y1 = blend.inner
        rng = np.random.default_rng(1)
        P = np.column_stack([rng.uniform(x0, x1, 200), rng.uniform(y0, y1, 200)])
        c = blend.center
        assert np.abs(blend.apply(P) - (c + (P - c) * np.array(blend.rates))).max() < 1e-15
        X0, X1, Y0, Y1 = blend.outer
        Q = np.array([[X0 - 1e-6, Y0], [X1 + 1e-3, 0.5 * (Y0 + Y1)], [0.5, 0.99], [X0, Y0]])
        assert np.array_equal(blend.apply(Q), Q)

    def test_collars(self, blend):
        # equality holds for the box that fixes gamma, up to rounding
        assert min(blend.collar) >= 2 * blend.gamma * (1 - 1e-12)

    def test_derivatives_match_finite_differences(self, blend):
        G = blend.sample_grid(21)
        h = 1e-9 * (blend.outer[1] - blend.outer[0])
        J = blend.jacobian(G)
        for j in range(2):
            e = np.zeros(2)
            e[j] = h
            fd = (blend.apply(G + e) - blend.apply(G - e)) / (2 * h)
            assert np.abs(fd - J[:, :, j]).max() < 1e-6
            fdH = (blend.jacobian(G + e) - blend.jacobian(G - e)) / (2 * h)
            H = blend.hessian(G)[:, :, :, j]
            scale = max(1.0, np.abs(H).max())
            assert np.abs(fdH - H).max() < 1e-4 * scale

    def test_dl_bound(self, blend):
        G = blend.sample_grid()
        dev = np.sqrt(((blend.jacobian(G) - np.eye(2)) ** 2).sum(axis=(1, 2))).max()
        rate_dev = max(1 - blend.rates[0], blend.rates[1] - 1)
        assert dev < rate_dev * blend.amplification() * math.sqrt(2)

    def test_unmarked_rejected(self, f0):
        fam = horseshoe.boxes_of_level(f0, 1)
        b = next(b for b in fam.boxes if b.marking == "-")
        with pytest.raises(InvalidArgument):
            horseshoe.make_surgery(b, 1, DEFAULTS, (1e-3, 1e-3), 1e-4)


class TestStage:
    def test_budgets(self, stage2):
        total = 0.0
        for k in (1, 2):
            n = stage2.norms[k]
            assert max(n["C0"], n["C1"], n["C2"]) < n["budget"] == 0.5 ** (k + 1) * DEFAULTS.eps_0
            total += n["C2"]
        assert total <= DEFAULTS.eps_0 / 2
        assert len(stage2.retries) <= 3

    def test_boxes_disjoint_across_levels(self, stage2):
        for s, t in itertools.combinations(stage2.surgeries, 2):
            assert horseshoe._rect_gap(s.outer, t.outer) > 0

    def test_off_boxes_equals_f0(self, stage2):
        f0 = horseshoe.build_f0(stage2.params)
        rng = np.random.default_rng(4)
        P = rng.uniform(0, 1, size=(4000, 2))
        P = P[stage2.surgery_index(P) < 0]
        assert np.array_equal(stage2(P), f0(P))

    def test_stage_jacobian_fd(self, stage2):
        # inside surgery boxes the composed map must differentiate consistently
        pts = np.vstack([s.sample_grid(7) for s in stage2.surgeries[:6]])
        h = 1e-11
        J = stage2.jacobian(pts)
        for j in range(2):
            e = np.zeros(2)
            e[j] = h
            fd = (stage2(pts + e) - stage2(pts - e)) / (2 * h)
            assert np.abs(fd - J[:, :, j]).max() < 1e-3

    def test_cap(self):
        with pytest.raises(InvalidArgument):
            horseshoe.build_stage(DEFAULTS, 4)

    def test_retry_path_large_rates(self):
        st_ = horseshoe.build_stage(DEFAULTS.with_x_scale(0.99), 1)
        assert st_.retries and st_.retries[0]["x_scale"] == 0.99

    def test_retries_exhausted(self):
        with pytest.raises(NumericalFailure):
            horseshoe.build_stage(construction.ConstructionParams(eps_0=1e-12), 1)


class TestOrbits:
    def test_fixed_point_two(self, stage2):
        fix = horseshoe.locate_periodic(stage2, "2")
        assert fix.residual < 1e-12
        lay = stage2.layout
        assert lay.I[2][0] < fix.point[1] < lay.I[2][1]

    def test_w1_orbit(self, stage2):
        fix = horseshoe.locate_periodic(stage2, "112")
        assert fix.core_clearance > 0
        w1 = construction.make_vertices(DEFAULTS, 1).w[0]
        w1 = construction.make_vertices(stage2.params, 1).w[0]
        assert np.abs(horseshoe.cocycle_exponents(stage2, fix) - w1).max() < 1e-12

    def test_w0_w_inf(self, stage2):
        p = stage2.params
        fam = construction.make_vertices(p, 1)
        assert np.abs(horseshoe.cocycle_exponents(stage2, horseshoe.locate_periodic(stage2, "2")) - fam.w0).max() < 1e-12
        e = horseshoe.cocycle_exponents(stage2, horseshoe.locate_periodic(stage2, "01"))
        assert np.abs(e - [-math.log(p.delta_inf), math.log(p.lambda_inf)]).max() < 1e-12

    def test_non_primitive(self, stage2):
        with pytest.raises(InvalidArgument):
            horseshoe.locate_periodic(stage2, "1212")

    def test_pointwise_1112(self, stage2):
        p = stage2.params
        fam = construction.make_vertices(p, 2)
        fix = horseshoe.locate_periodic(stage2, "1112")
        pts = horseshoe.pointwise_exponents(stage2, fix)
        expect = np.array([fam.v[1], fam.v[0], fam.w0, fam.w0])
        assert np.abs(pts - expect).max() < 1e-12

    def test_exponents_from_numerical_jacobian(self, stage2):
        # product of finite-difference Jacobians along the orbit, independent of the class table
        for g in ("112", "0112", "1012", "00102"):
            fix = horseshoe.locate_periodic(stage2, g)
            h = 1e-10
            logs = []
            for P in fix.points:
                col = []
                for j in range(2):
                    e = np.zeros(2)
                    e[j] = h
                    col.append((stage2(P + e)[0] - stage2(P - e)[0]) / (2 * h))
                J = np.array(col).T
                logs.append((-math.log(abs(J[0, 0])), math.log(abs(J[1, 1]))))
            fd = np.mean(logs, axis=0)
            assert np.abs(fd - horseshoe.cocycle_exponents(stage2, fix)).max() < 1e-5

    def test_diagonal_and_clearance(self, stage2):
        half = 0.5 * min(stage2.gammas.values())
        for o in symbolic.enumerate_periodic(5):
            fix = horseshoe.locate_periodic(stage2, o)
            J = stage2.jacobian(fix.points)
            assert np.all(J[:, 0, 1] == 0) and np.all(J[:, 1, 0] == 0)
            assert fix.core_clearance > half

    def test_verify_report(self, stage2):
        rep = horseshoe.verify_phi_L(stage2, 5)
        assert rep["passed"] and rep["itineraries"] == len(symbolic.enumerate_periodic(5))
        assert rep["forward_word_spread"] < 1e-12


class TestLadder:
    def test_same_params(self, ladder):
        assert all(not s.retries for s in ladder.values())

    def test_consistent_exponents(self, ladder):
        # itineraries whose U/V classes stay at level <= 1 see the same potential at every stage
        for o in symbolic.enumerate_periodic(5):
            cls = symbolic.classify_periodic(o, 1)
            if max((c.k for c in cls if c.is_surgery), default=0) > 1:
                continue
            ref = horseshoe.cocycle_exponents(ladder[1], horseshoe.locate_periodic(ladder[1], o))
            for K in (2, 3):
                e = horseshoe.cocycle_exponents(ladder[K], horseshoe.locate_periodic(ladder[K], o))
                assert np.abs(e - ref).max() < 1e-12

    def test_stage3_verifies(self, ladder):
        assert horseshoe.verify_phi_L(ladder[3], 6)["passed"]


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 2), min_size=1, max_size=7))
def test_random_itineraries_match_potential(g):
    o = symbolic.PeriodicItinerary.of(g)
    if not o.primitive:
        return
    stage = _STAGE.get("s") or _STAGE.setdefault("s", horseshoe.build_stage(DEFAULTS, 2))
    fix = horseshoe.locate_periodic(stage, o)
    target = construction.phi_periodic_rv(o, stage.params, max_level=2)
    assert np.abs(horseshoe.cocycle_exponents(stage, fix) - target).max() < 1e-12


_STAGE: dict = {}
