import math

import numpy as np
import pytest
from scipy.optimize import linprog

from seqmpc.core import check_violation
from seqmpc.scenarios import (FREEFLYER, QUADROTOR, ProblemSpec, actuation_halfspaces,
                              koz_margin, linearize, linearize_koz, rot_gb,
                              sample_problem, step_freeflyer, step_quadrotor,
                              zonotope_facets)


@pytest.fixture(scope="module")
def ff_spec():
    return sample_problem(FREEFLYER, 5)


@pytest.fixture(scope="module")
def quad_spec():
    return sample_problem(QUADROTOR, 5)


class TestFreeflyerStep:
    def test_drift_without_impulse(self):
        x = np.array([0.0, 0, 0, 1, 0, 0])
        out = step_freeflyer(x, np.zeros(3), 1.0)
        np.testing.assert_allclose(out, [1, 0, 0, 1, 0, 0])

    def test_impulse_then_integrate(self):
        out = step_freeflyer(np.zeros(6), [0.5, 0, 0], 1.0)
        np.testing.assert_allclose(out, [0.5, 0, 0, 0.5, 0, 0])

    def test_speed_preserved_without_control(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            x = rng.normal(size=6)
            out = step_freeflyer(x, np.zeros(3), 0.4)
            assert np.hypot(out[3], out[4]) == pytest.approx(np.hypot(x[3], x[4]))

    def test_exactly_affine(self):
        rng = np.random.default_rng(4)
        dt = 0.4
        for _ in range(20):
            x1, x2 = rng.normal(size=6), rng.normal(size=6)
            u1, u2 = rng.normal(size=3), rng.normal(size=3)
            lhs = (step_freeflyer(x1 + x2, u1 + u2, dt) - step_freeflyer(x1, u1, dt)
                   - step_freeflyer(x2, u2, dt) + step_freeflyer(np.zeros(6), np.zeros(3), dt))
            np.testing.assert_allclose(lhs, np.zeros(6), atol=1e-12)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            step_freeflyer([np.inf, 0, 0, 0, 0, 0], np.zeros(3), 0.1)


class TestQuadrotorStep:
    def test_rest_stays_at_rest(self):
        x = np.array([1.0, 2.0, 3.0, 0, 0, 0])
        out = step_quadrotor(x, np.zeros(3), 0.1, 1.0, 0.1)
        np.testing.assert_allclose(out, x)

    def test_pure_thrust_integration(self):
        out = step_quadrotor(np.zeros(6), [1.0, 0, 0], 0.1, 1.0, 0.0)
        np.testing.assert_allclose(out[3:], [0.1, 0, 0])

    def test_drag_decelerates(self):
        x = np.array([0, 0, 0, 2.0, 0, 0])
        out = step_quadrotor(x, np.zeros(3), 0.1, 1.0, 0.3)
        # drag force -beta*||v||*v = -0.3*2*2 = -1.2 along x
        assert out[3] == pytest.approx(2.0 - 0.1 * 1.2)
        assert out[4] == 0.0 and out[5] == 0.0

    def test_bad_mass(self):
        with pytest.raises(ValueError):
            step_quadrotor(np.zeros(6), np.zeros(3), 0.1, 0.0, 0.1)


class TestLinearize:
    def test_freeflyer_constant_jacobians(self, ff_spec):
        rng = np.random.default_rng(5)
        ref = linearize(ff_spec, rng.normal(size=6), rng.normal(size=3))
        for _ in range(5):
            lin = linearize(ff_spec, rng.normal(size=6), rng.normal(size=3))
            np.testing.assert_array_equal(lin.A, ref.A)
            np.testing.assert_array_equal(lin.B, ref.B)
            np.testing.assert_array_equal(lin.c, np.zeros(6))

    def test_quadrotor_drag_jacobian_zero_at_rest(self, quad_spec):
        lin = linearize(quad_spec, np.zeros(6), np.zeros(3))
        np.testing.assert_allclose(lin.A[3:, 3:], np.eye(3))

    @pytest.mark.parametrize("scenario", [FREEFLYER, QUADROTOR])
    def test_jacobians_match_finite_differences(self, scenario):
        spec = sample_problem(scenario, 5)
        rng = np.random.default_rng(11)
        h = 1e-6
        for _ in range(100):
            x = rng.uniform(-1, 1, size=6)
            u = rng.uniform(-0.5, 0.5, size=3)
            lin = linearize(spec, x, u)
            fd_A = np.empty((6, 6))
            fd_B = np.empty((6, 3))
            for j in range(6):
                e = np.zeros(6)
                e[j] = h
                fd_A[:, j] = (spec.step(x + e, u) - spec.step(x - e, u)) / (2 * h)
            for j in range(3):
                e = np.zeros(3)
                e[j] = h
                fd_B[:, j] = (spec.step(x, u + e) - spec.step(x, u - e)) / (2 * h)
            scale_A = np.maximum(np.abs(fd_A), 1.0)
            scale_B = np.maximum(np.abs(fd_B), 1.0)
            assert np.max(np.abs(lin.A - fd_A) / scale_A) < 1e-5
            assert np.max(np.abs(lin.B - fd_B) / scale_B) < 1e-5
            # affine remainder reproduces the step at the reference exactly
            np.testing.assert_allclose(lin.A @ x + lin.B @ u + lin.c,
                                       spec.step(x, u), atol=1e-12)


class TestKeepOut:
    def test_margin_at_center_and_double_radius(self):
        centers = np.array([[1.0, 1.0]])
        radii = np.array([0.5])
        assert koz_margin([1.0, 1.0], centers, radii)[0] == pytest.approx(-0.5)
        assert koz_margin([2.0, 1.0], centers, radii)[0] == pytest.approx(0.5)

    def test_margin_gradient_finite_differences(self):
        rng = np.random.default_rng(6)
        centers = rng.uniform(0, 2, size=(4, 3))
        radii = rng.uniform(0.2, 0.5, size=4)
        h = 1e-6
        for _ in range(20):
            r = rng.uniform(-1, 3, size=3)
            if np.min(np.linalg.norm(centers - r, axis=1)) < 1e-3:
                continue
            for m in range(4):
                grad = (r - centers[m]) / np.linalg.norm(r - centers[m])
                fd = np.empty(3)
                for j in range(3):
                    e = np.zeros(3)
                    e[j] = h
                    fd[j] = (koz_margin(r + e, centers, radii)[m]
                             - koz_margin(r - e, centers, radii)[m]) / (2 * h)
                np.testing.assert_allclose(grad, fd, rtol=1e-5, atol=1e-7)

    def test_translation_invariance(self):
        rng = np.random.default_rng(7)
        centers = rng.uniform(0, 2, size=(3, 2))
        radii = rng.uniform(0.2, 0.5, size=3)
        r = rng.uniform(0, 2, size=2)
        shift = rng.normal(size=2)
        np.testing.assert_allclose(
            koz_margin(r, centers, radii),
            koz_margin(r + shift, centers + shift, radii),
            rtol=0, atol=1e-12)

    def test_linearization_tangent_on_boundary(self):
        center = np.array([1.0, 1.0])
        radius = 0.5
        r = center + np.array([radius, 0.0])
        a, b = linearize_koz(r, center, radius)
        assert a @ r == pytest.approx(b)
        np.testing.assert_allclose(a, [1.0, 0.0])

    def test_feasible_reference_satisfies_own_linearization(self):
        rng = np.random.default_rng(8)
        center = np.array([0.0, 0.0])
        radius = 1.0
        for _ in range(50):
            r = rng.normal(size=2)
            r = r / np.linalg.norm(r) * rng.uniform(1.0, 3.0)
            a, b = linearize_koz(r, center, radius)
            assert a @ r >= b - 1e-12

    def test_halfspace_excludes_ball_interior(self):
        # any point satisfying the linearized constraint is outside the ball
        rng = np.random.default_rng(9)
        center = np.array([0.5, -0.25])
        radius = 0.8
        for _ in range(20):
            ref = center + rng.normal(size=2) * 0.7
            a, b = linearize_koz(ref, center, radius)
            pts = center + rng.normal(size=(500, 2))
            sat = pts[pts @ a >= b]
            margins = np.linalg.norm(sat - center, axis=1) - radius
            assert np.all(margins >= -1e-9)

    def test_center_tie_break(self):
        a, b = linearize_koz(np.array([1.0, 1.0]), np.array([1.0, 1.0]), 0.5)
        assert np.isfinite(a).all() and np.isfinite(b)
        np.testing.assert_allclose(np.linalg.norm(a), 1.0)


def _zonotope_member_lp(G, dv_max, u):
    """Feasibility LP oracle: does dv in [0, dv_max]^8 with G dv = u exist?"""
    k = G.shape[1]
    res = linprog(np.zeros(k), A_eq=G, b_eq=u, bounds=[(0, dv_max)] * k,
                  method="highs")
    return res.status == 0


class TestActuation:
    def test_zero_control_feasible(self, ff_spec):
        assert ff_spec._actuation_violation(np.zeros(6), np.zeros(3)) == 0.0

    def test_facets_match_lp_oracle(self, ff_spec):
        alloc = actuation_halfspaces(0.0, ff_spec)
        F, d = zonotope_facets(ff_spec.thruster_matrix * ff_spec.dv_max)
        rng = np.random.default_rng(10)
        agree = 0
        for _ in range(200):
            u = rng.normal(size=3) * np.array([2 * ff_spec.dv_max, 2 * ff_spec.dv_max,
                                               8 * ff_spec.dv_max])
            inside_facets = bool(np.max(F @ u - d) <= 1e-9)
            inside_lp = _zonotope_member_lp(alloc.G, alloc.dv_max, u)
            boundary_dist = abs(np.max(F @ u - d))
            if boundary_dist < 1e-7:
                continue  # numerically on the boundary; both answers defensible
            assert inside_facets == inside_lp
            agree += 1
        assert agree > 150

    def test_overlarge_control_infeasible(self, ff_spec):
        lam = ff_spec.thruster_matrix
        bound = np.abs(lam[0]).sum() * ff_spec.dv_max
        u = np.array([1.5 * bound, 0.0, 0.0])
        assert ff_spec._actuation_violation(np.zeros(6), u) > 0

    def test_rotation_equivariance(self, ff_spec):
        rng = np.random.default_rng(11)
        for _ in range(20):
            u = rng.normal(size=3) * ff_spec.dv_max
            x0 = np.zeros(6)
            x_pi = np.zeros(6)
            x_pi[2] = math.pi
            v0 = ff_spec._actuation_violation(x0, u)
            v_pi = ff_spec._actuation_violation(x_pi, rot_gb(math.pi) @ u)
            assert v0 == pytest.approx(v_pi, abs=1e-9)

    def test_frozen_attitude_map(self, ff_spec):
        alloc = actuation_halfspaces(0.3, ff_spec)
        np.testing.assert_allclose(alloc.G, rot_gb(0.3) @ ff_spec.thruster_matrix)
        assert alloc.dv_max == pytest.approx(ff_spec.thrust * ff_spec.dt / ff_spec.mass)


class TestSampling:
    def test_deterministic(self):
        a = sample_problem(FREEFLYER, 42)
        b = sample_problem(FREEFLYER, 42)
        assert a.to_dict() == b.to_dict()

    @pytest.mark.parametrize("scenario", [FREEFLYER, QUADROTOR])
    def test_invariants_on_batch(self, scenario):
        for seed in range(100):
            spec = sample_problem(scenario, seed)
            lo, hi = spec.bounds_lo, spec.bounds_hi
            for c, r in zip(spec.obstacle_centers, spec.obstacle_radii):
                assert np.all(c - r > lo) and np.all(c + r < hi)
            assert spec.koz_margins(spec.position(spec.start)).min(initial=np.inf) > 0
            assert spec.koz_margins(spec.position(spec.goal)).min(initial=np.inf) > 0
            assert spec.n_steps >= 2
            assert check_violation(spec.start, np.zeros(3), spec) == 0
            assert check_violation(spec.goal, np.zeros(3), spec) == 0

    def test_overrides_respected_and_validated(self):
        spec = sample_problem(FREEFLYER, 1, {"n_steps": 24})
        assert spec.n_steps == 24
        with pytest.raises(ValueError):
            sample_problem(FREEFLYER, 1, {"bogus_knob": 3})

    def test_spec_dict_round_trip(self, ff_spec, quad_spec):
        for spec in (ff_spec, quad_spec):
            clone = ProblemSpec.from_dict(spec.to_dict())
            assert clone.to_dict() == spec.to_dict()


class TestCheckViolation:
    def test_state_at_obstacle_center(self, ff_spec):
        x = np.zeros(6)
        x[:2] = ff_spec.obstacle_centers[0]
        assert check_violation(x, np.zeros(3), ff_spec) == 1

    def test_boundary_state_not_flagged(self, ff_spec):
        c = ff_spec.obstacle_centers[0]
        r = ff_spec.obstacle_radii[0]
        x = np.zeros(6)
        x[:2] = c + np.array([r, 0.0])
        assert check_violation(x, np.zeros(3), ff_spec) == 0

    def test_table_bound_violation(self, ff_spec):
        x = np.zeros(6)
        x[:2] = ff_spec.table_lo - 0.1
        assert check_violation(x, np.zeros(3), ff_spec) == 1
