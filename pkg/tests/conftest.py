import numpy as np
import pytest

import hjbpod as hp
from hjbpod.reduced import ReducedSystem


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240811)


def make_scalar_integrator_system():
    """1-D toy: ydot = u, g = y^2, controls in [-1, 1], unit weight."""
    return hp.ControlledSystem(
        n=1,
        rhs=lambda y, u: np.array([u]),
        running_cost=lambda y, u: float(y[0] * y[0]),
        weight=np.ones(1),
        control_box=(-1.0, 1.0),
        label="toy-integrator",
        rhs_batch=lambda Y, u: np.full_like(np.asarray(Y, dtype=float), u),
    )


def make_decay_system():
    """1-D toy: ydot = -y (control ignored), g = y^2."""
    return hp.ControlledSystem(
        n=1,
        rhs=lambda y, u: -np.asarray(y, dtype=float),
        running_cost=lambda y, u: float(y[0] * y[0]),
        weight=np.ones(1),
        control_box=(-1.0, 1.0),
        label="toy-decay",
        rhs_batch=lambda Y, u: -np.asarray(Y, dtype=float),
    )


@pytest.fixture(scope="session")
def toy_reduced():
    """Identity-basis reduction of the scalar integrator toy."""
    sys_obj = make_scalar_integrator_system()
    basis = hp.identity_basis(np.ones(1))
    return ReducedSystem(basis, sys_obj, 1)


@pytest.fixture(scope="session")
def test1_bundle():
    """Full-size Test-1 system with its snapshot set and basis."""
    sys_obj = hp.build_test1(100)
    y0 = hp.test1_initial_state(100)
    snap = hp.generate_snapshots(
        sys_obj, [-1.0, 0.0, 1.0], y0, 1.0 / 20.0, 3.0, quotient_at_zero=True
    )
    basis = hp.compute_basis(snap)
    return sys_obj, snap, basis


@pytest.fixture(scope="session")
def test2_bundle():
    sys_obj = hp.build_test2(100)
    y0 = hp.test2_initial_state(100)
    snap = hp.generate_snapshots(
        sys_obj, [-2.2, -1.1, 0.0], y0, 1.0 / 20.0, 3.0, quotient_at_zero=True
    )
    basis = hp.compute_basis(snap)
    return sys_obj, snap, basis


def random_snapshot_set(rng, n=20, p=2, M=9, dt=0.1):
    """Synthetic snapshot data with random states/derivatives and weights."""
    states = rng.normal(size=(p, M + 1, n))
    derivs = rng.normal(size=(p, M + 1, n))
    weight = rng.uniform(0.5, 2.0, size=n)
    return hp.SnapshotSet(
        p=p,
        M=M,
        dt=dt,
        states=states,
        derivs=derivs,
        controls=np.zeros(p),
        weight=weight,
    )
