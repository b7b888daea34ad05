import numpy as np
import pytest

import hjbpod as hp
from hjbpod.errors import ValidationError
from hjbpod.reduced import Hyperbox, ReducedSystem, grow_to_invariant

from conftest import make_scalar_integrator_system, random_snapshot_set


@pytest.fixture(scope="module")
def test1_reduced(test1_bundle):
    sys1, snap, basis = test1_bundle
    return ReducedSystem(basis, sys1, 4)


class TestReducedRhs:
    def test_identity_reduction_is_exact(self, rng):
        sys_t = make_scalar_integrator_system()
        basis = hp.identity_basis(np.ones(1))
        rs = ReducedSystem(basis, sys_t, 1)
        y = rng.normal(size=1)
        np.testing.assert_array_equal(hp.reduced_rhs(rs, y, 0.3), sys_t.rhs(y, 0.3))

    def test_zero_field(self):
        sys0 = hp.ControlledSystem(
            n=2, rhs=lambda y, u: np.zeros(2), running_cost=lambda y, u: 0.0,
            weight=np.ones(2), control_box=(-1, 1), label="null",
        )
        rs = ReducedSystem(hp.identity_basis(np.ones(2)), sys0, 2)
        assert np.all(hp.reduced_rhs(rs, np.array([1.0, -2.0]), 0.5) == 0.0)

    def test_compositional_oracle(self, test1_bundle, test1_reduced, rng):
        sys1, _, basis = test1_bundle
        for _ in range(5):
            y_r = rng.normal(size=4) * 0.3
            via_ops = hp.project_coeffs(basis, sys1.rhs(hp.lift(basis, y_r), 0.0), 4)
            got = hp.reduced_rhs(test1_reduced, y_r, 0.0)
            np.testing.assert_allclose(got, via_ops, rtol=0, atol=1e-14)

    def test_fast_batch_matches_composition(self, test1_reduced, rng):
        rs = test1_reduced
        Yr = rng.normal(size=(8, 4)) * 0.4
        fast = rs.rhs_batch(Yr, -0.7)
        scale = np.max(np.abs(fast))
        for i in range(8):
            np.testing.assert_allclose(fast[i], rs.rhs(Yr[i], -0.7), rtol=0, atol=1e-12 * scale)

    def test_fast_cost_matches_composition(self, test1_reduced, rng):
        rs = test1_reduced
        Yr = rng.normal(size=(8, 4)) * 0.4
        fast = rs.cost_batch(Yr, 0.9)
        for i in range(8):
            assert fast[i] == pytest.approx(rs.cost(Yr[i], 0.9), rel=1e-10)


class TestReducedCost:
    def test_zero_state_zero_control(self, test1_reduced):
        assert hp.reduced_cost(test1_reduced, np.zeros(4), 0.0) == 0.0

    def test_pure_control(self, test1_reduced):
        assert hp.reduced_cost(test1_reduced, np.zeros(4), 10.0) == pytest.approx(1.0)

    def test_equals_cost_density_on_lift(self, test1_bundle, test1_reduced, rng):
        sys1, _, basis = test1_bundle
        y_r = rng.normal(size=4) * 0.2
        expected = hp.eval_cost_density(sys1, hp.lift(basis, y_r), 0.4)
        assert hp.reduced_cost(test1_reduced, y_r, 0.4) == expected


class TestBuildDomain:
    def test_two_point_box(self):
        # Snapshot states engineered so the rank-2 projections are exactly
        # (0, 0) and (1, 2).
        basis = hp.identity_basis(np.ones(2))
        states = np.array([[[0.0, 0.0], [1.0, 2.0]]])
        snap = hp.SnapshotSet(
            p=1, M=1, dt=1.0, states=states, derivs=np.zeros_like(states),
            controls=np.zeros(1), weight=np.ones(2),
        )
        box = hp.build_domain(basis, snap, 2, margin=0.0)
        np.testing.assert_array_equal(box.lower, [0.0, 0.0])
        np.testing.assert_array_equal(box.upper, [1.0, 2.0])

    def test_margin_inflation(self):
        basis = hp.identity_basis(np.ones(2))
        states = np.array([[[0.0, 0.0], [1.0, 2.0]]])
        snap = hp.SnapshotSet(
            p=1, M=1, dt=1.0, states=states, derivs=np.zeros_like(states),
            controls=np.zeros(1), weight=np.ones(2),
        )
        box = hp.build_domain(basis, snap, 2, margin=0.1)
        np.testing.assert_allclose(box.lower, [-0.1, -0.2])
        np.testing.assert_allclose(box.upper, [1.1, 2.2])

    def test_degenerate_axis_expanded(self):
        basis = hp.identity_basis(np.ones(2))
        states = np.array([[[0.0, 1.0], [1.0, 1.0]]])  # second axis collapses
        snap = hp.SnapshotSet(
            p=1, M=1, dt=1.0, states=states, derivs=np.zeros_like(states),
            controls=np.zeros(1), weight=np.ones(2),
        )
        box = hp.build_domain(basis, snap, 2)
        assert box.width[1] > 0


class TestClamp:
    def test_interior_point(self):
        box = Hyperbox(np.zeros(2), np.ones(2))
        point, change = hp.clamp_to_domain(box, np.array([0.3, 0.8]))
        np.testing.assert_array_equal(point, [0.3, 0.8])
        assert np.all(change == 0.0)

    def test_exterior_point(self):
        box = Hyperbox(np.zeros(2), np.ones(2))
        point, change = hp.clamp_to_domain(box, np.array([1.2, 0.5]))
        np.testing.assert_array_equal(point, [1.0, 0.5])
        np.testing.assert_allclose(change, [0.2, 0.0])

    def test_matches_boundary_sampling(self, rng):
        # The clamp is the Euclidean closest point: its distance agrees with
        # a brute-force search over a dense boundary sampling (the sampled
        # minimum is accurate to second order in the sample spacing).
        box = Hyperbox(np.array([-1.0, 0.5]), np.array([2.0, 3.0]))
        t = np.linspace(0.0, 1.0, 30_001)
        edges = [
            np.column_stack([box.lower[0] + t * 3.0, np.full_like(t, box.lower[1])]),
            np.column_stack([box.lower[0] + t * 3.0, np.full_like(t, box.upper[1])]),
            np.column_stack([np.full_like(t, box.lower[0]), box.lower[1] + t * 2.5]),
            np.column_stack([np.full_like(t, box.upper[0]), box.lower[1] + t * 2.5]),
        ]
        boundary = np.concatenate(edges)
        for _ in range(20):
            p = rng.uniform(-3, 5, size=2)
            if box.contains(p):
                continue
            clamped, _ = hp.clamp_to_domain(box, p)
            d_clamp = np.linalg.norm(clamped - p)
            d_brute = np.min(np.linalg.norm(boundary - p, axis=1))
            assert abs(d_clamp - d_brute) < 1e-6

    def test_idempotent_and_minimal(self, rng):
        box = Hyperbox(np.array([-1.0, -1.0, 0.0]), np.array([1.0, 2.0, 0.5]))
        for _ in range(50):
            x = rng.uniform(-3, 4, size=3)
            c1, _ = hp.clamp_to_domain(box, x)
            c2, _ = hp.clamp_to_domain(box, c1)
            np.testing.assert_array_equal(c1, c2)
            y = rng.uniform(box.lower, box.upper)
            assert np.linalg.norm(c1 - x) <= np.linalg.norm(y - x) + 1e-12


class TestCheckInvariance:
    def test_zero_field_no_violations(self):
        sys0 = hp.ControlledSystem(
            n=2, rhs=lambda y, u: np.zeros(2), running_cost=lambda y, u: 0.0,
            weight=np.ones(2), control_box=(-1, 1), label="null",
            rhs_batch=lambda Y, u: np.zeros_like(np.asarray(Y, dtype=float)),
        )
        rs = ReducedSystem(hp.identity_basis(np.ones(2)), sys0, 2)
        box = Hyperbox(np.zeros(2), np.ones(2))
        nodes = np.array([[0.0, 0.0], [1.0, 1.0], [0.5, 0.5]])
        rep = hp.check_invariance(rs, box, nodes, [-1.0, 1.0], 0.1)
        assert rep.violations == 0 and rep.checked == 6

    def test_hand_computed_violation(self):
        sys1 = hp.ControlledSystem(
            n=1, rhs=lambda y, u: np.ones(1), running_cost=lambda y, u: 0.0,
            weight=np.ones(1), control_box=(-1, 1), label="drift",
            rhs_batch=lambda Y, u: np.ones_like(np.asarray(Y, dtype=float)),
        )
        rs = ReducedSystem(hp.identity_basis(np.ones(1)), sys1, 1)
        box = Hyperbox(np.zeros(1), np.ones(1))
        rep = hp.check_invariance(rs, box, np.array([[1.0]]), [0.0], 0.5)
        assert rep.violations == 1
        np.testing.assert_allclose(rep.max_rel_displacement, [0.5])


class TestProjectionNormChain:
    def test_coefficient_norm_bounded_by_state_norm(self, rng):
        # |P_c z|_2 = |P^r z|_w <= |z|_w on random samples.
        snap = random_snapshot_set(rng)
        basis = hp.compute_basis(snap, tau=1.0)
        r = min(4, basis.d)
        for _ in range(20):
            z = rng.normal(size=snap.n)
            coeff = hp.project_coeffs(basis, z, r)
            pz = hp.lift(basis, coeff)
            nz = np.sqrt(np.dot(snap.weight * z, z))
            npz = np.sqrt(np.dot(snap.weight * pz, pz))
            assert abs(np.linalg.norm(coeff) - npz) < 1e-12 * max(1.0, nz)
            assert np.linalg.norm(coeff) <= nz + 1e-12


class TestIdentityReduction:
    def test_full_rank_trajectories_match(self):
        # With the identity basis at full rank, reduced trajectories lifted
        # back coincide with full trajectories up to integrator tolerance.
        sys2 = hp.build_test2(8)
        basis = hp.identity_basis(sys2.weight)
        rs = ReducedSystem(basis, sys2, sys2.n)
        y0 = hp.test2_initial_state(8)
        cfg = hp.IntegratorConfig(rel_tol=1e-10, abs_tol=1e-12)
        full = hp.integrate(sys2, y0, -1.0, (0.0, 0.5), cfg, [0.5])
        y_r = hp.project_coeffs(basis, y0, sys2.n)
        # integrate the reduced field with the same integrator machinery
        red_sys = hp.ControlledSystem(
            n=sys2.n, rhs=lambda y, u: rs.rhs(y, u), running_cost=lambda y, u: rs.cost(y, u),
            weight=np.ones(sys2.n), control_box=sys2.control_box, label="reduced",
        )
        red = hp.integrate(red_sys, y_r, -1.0, (0.0, 0.5), cfg, [0.5])
        np.testing.assert_allclose(
            hp.lift(basis, red.states[-1]), full.states[-1], atol=1e-8
        )


class TestGrowToInvariant:
    def test_linear_stable_system(self):
        # ydot = -y + u: under |u| <= 1 the box must cover the equilibria +-1.
        sys_lin = hp.ControlledSystem(
            n=1, rhs=lambda y, u: -np.asarray(y) + u, running_cost=lambda y, u: 0.0,
            weight=np.ones(1), control_box=(-1, 1), label="lin",
            rhs_batch=lambda Y, u: -np.asarray(Y, dtype=float) + u,
        )
        rs = ReducedSystem(hp.identity_basis(np.ones(1)), sys_lin, 1)
        box = grow_to_invariant(rs, Hyperbox(np.array([-0.1]), np.array([0.1])), [-1.0, 1.0])
        assert box.lower[0] <= -1.0 <= 1.0 <= box.upper[0]
        nodes = np.linspace(box.lower[0], box.upper[0], 41)[:, None]
        rep = hp.check_invariance(rs, box, nodes, [-1.0, 0.0, 1.0], 0.05)
        assert rep.violations == 0

    def test_already_invariant_box_unchanged(self):
        sys_lin = hp.ControlledSystem(
            n=1, rhs=lambda y, u: -np.asarray(y), running_cost=lambda y, u: 0.0,
            weight=np.ones(1), control_box=(-1, 1), label="lin0",
            rhs_batch=lambda Y, u: -np.asarray(Y, dtype=float),
        )
        rs = ReducedSystem(hp.identity_basis(np.ones(1)), sys_lin, 1)
        start = Hyperbox(np.array([-2.0]), np.array([2.0]))
        box = grow_to_invariant(rs, start, [-1.0, 1.0])
        np.testing.assert_array_equal(box.lower, start.lower)
        np.testing.assert_array_equal(box.upper, start.upper)


def test_rank_validation(test1_bundle):
    sys1, _, basis = test1_bundle
    with pytest.raises(ValidationError):
        ReducedSystem(basis, sys1, basis.d + 1)
