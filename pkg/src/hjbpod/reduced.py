"""Reduced-order dynamics, the reduced domain box, and boundary clamping.

The reduced vector field is the coefficient projection of the full rhs
evaluated at the lifted state; the reduced cost is the full cost at the
lifted state.  The working domain is the bounding box of the projected
snapshot states, optionally inflated; arrival points that step outside it
are clamped back (componentwise, the Euclidean closest point of a box) and
the displacement statistics are recorded.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .dynamics import ControlledSystem
from .errors import NumericalError, ValidationError
from .pod import PODBasis, SnapshotSet, lift, project_coeffs, project_coeffs_batch

logger = logging.getLogger(__name__)

Array = np.ndarray


@dataclass(frozen=True)
class Hyperbox:
    """Axis-aligned box in the reduced coordinate space."""

    lower: Array
    upper: Array

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValidationError("lower/upper must be 1-D arrays of equal length")
        if not np.all(lo < hi):
            raise ValidationError("box must satisfy lower < upper componentwise")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def r(self) -> int:
        return self.lower.size

    @property
    def width(self) -> Array:
        return self.upper - self.lower

    def clip(self, points: Array) -> Array:
        return np.clip(points, self.lower, self.upper)

    def contains(self, points: Array) -> Array:
        points = np.asarray(points, dtype=float)
        return np.all((points >= self.lower) & (points <= self.upper), axis=-1)


@dataclass(frozen=True)
class InvarianceReport:
    """Outcome of testing arrival points of the discrete dynamics against a box."""

    checked: int
    violations: int
    max_rel_displacement: Array  # (r,) max |clamp(a)-a| / width per coordinate

    def __post_init__(self):
        if self.checked < 0 or self.violations < 0:
            raise ValidationError("counts must be nonnegative")


class ReducedSystem:
    """Rank-r reduction of a controlled system under a POD basis.

    Precomputes the mode matrices (and, when the full system exposes its
    algebraic structure, exact reduced-space operators) so that the vector
    field can be evaluated in batch over many reduced states without
    repeated lifting.
    """

    def __init__(self, basis: PODBasis, full: ControlledSystem, r: int):
        if not 1 <= r <= basis.d:
            raise ValidationError(f"rank r={r} out of range 1..{basis.d}")
        self.basis = basis
        self.full = full
        self.r = int(r)
        self.phi = np.ascontiguousarray(basis.modes[:r])  # (r, n)
        self.phi_w = np.ascontiguousarray(self.phi * basis.weight)  # (r, n)
        self.gram = self.phi_w @ self.phi.T

        st = full.structure
        self._fast = st is not None
        if st is not None:
            lin = st.linear
            if st.nonlinearity == "bistable_cubic":
                # rhs = L y + (y - y^3) + u B; fold the linear part of the
                # reaction into the reduced operator and expand the cubic in
                # the basis: exact because the modes span the lifted states.
                self.a_eff = self.phi_w @ lin @ self.phi.T + self.gram
                self.cubic = np.einsum(
                    "ij,aj,bj,cj->iabc", self.phi_w, self.phi, self.phi, self.phi
                )
            elif st.nonlinearity is None:
                self.a_eff = self.phi_w @ lin @ self.phi.T
                self.cubic = None
            else:
                logger.warning("unknown nonlinearity %r: using generic path", st.nonlinearity)
                self._fast = False
                self.a_eff = None
                self.cubic = None
            self.b_red = self.phi_w @ st.control_gain if self._fast else None
            self.cost_cw = st.quadratic_cost_control_weight
        else:
            self.a_eff = None
            self.cubic = None
            self.b_red = None
            self.cost_cw = None

    @property
    def structured(self) -> bool:
        """Whether exact precomputed reduced operators are available."""
        return self._fast

    # -- single-point operations (the contractual definitions) ------------

    def rhs(self, y_r: Array, u: float) -> Array:
        """Reduced vector field: coefficient projection of f at the lifted state."""
        return project_coeffs(self.basis, self.full.rhs(lift(self.basis, y_r), u), self.r)

    def cost(self, y_r: Array, u: float) -> float:
        """Reduced cost rate: full cost at the lifted state."""
        return self.full.running_cost(lift(self.basis, y_r), u)

    # -- batched operations -------------------------------------------------

    def rhs_batch(self, Yr: Array, u: float) -> Array:
        Yr = np.asarray(Yr, dtype=float)
        if self._fast:
            out = Yr @ self.a_eff.T + u * self.b_red
            if self.cubic is not None:
                out -= np.einsum("iabc,ma,mb,mc->mi", self.cubic, Yr, Yr, Yr, optimize=True)
            return out
        Y = Yr @ self.phi
        if self.full.rhs_batch is not None:
            F = self.full.rhs_batch(Y, u)
        else:
            F = np.empty_like(Y)
            for i in range(Y.shape[0]):
                F[i] = self.full.rhs(Y[i], u)
        return F @ self.phi_w.T

    def cost_batch(self, Yr: Array, u: float) -> Array:
        Yr = np.asarray(Yr, dtype=float)
        if self.cost_cw is not None:
            return np.einsum("mi,ij,mj->m", Yr, self.gram, Yr) + self.cost_cw * u * u
        Y = Yr @ self.phi
        out = np.empty(Y.shape[0])
        for i in range(Y.shape[0]):
            out[i] = self.full.running_cost(Y[i], u)
        return out


def reduced_rhs(rs: ReducedSystem, y_r: Array, u: float) -> Array:
    """Reduced vector field at a single reduced state."""
    return rs.rhs(y_r, u)


def reduced_cost(rs: ReducedSystem, y_r: Array, u: float) -> float:
    """Reduced running-cost rate at a single reduced state."""
    return rs.cost(y_r, u)


def build_domain(
    basis: PODBasis, snap: SnapshotSet, r: int, margin: float = 0.0
) -> Hyperbox:
    """Bounding box of the projected snapshot states, inflated by ``margin``.

    Degenerate axes (all projections numerically equal) are expanded to a
    minimum width so the reduced dimension stays r.
    """
    if margin < 0:
        raise ValidationError("margin must be nonnegative")
    coeffs = project_coeffs_batch(basis, snap.states.reshape(-1, snap.n), r)
    lower = coeffs.min(axis=0)
    upper = coeffs.max(axis=0)
    width = upper - lower
    scale = np.maximum(1.0, np.maximum(np.abs(lower), np.abs(upper)))
    degenerate = width <= 1e-12 * scale
    if np.any(degenerate):
        logger.warning(
            "expanding %d degenerate domain axes to minimum width", int(degenerate.sum())
        )
        half = 0.5e-6 * scale[degenerate]
        center = 0.5 * (lower[degenerate] + upper[degenerate])
        lower[degenerate] = center - half
        upper[degenerate] = center + half
        width = upper - lower
    return Hyperbox(lower - margin * width, upper + margin * width)


def clamp_to_domain(box: Hyperbox, point: Array) -> tuple[Array, Array]:
    """Closest point of the box and the per-axis displacement as a width fraction."""
    point = np.asarray(point, dtype=float)
    clamped = box.clip(point)
    rel_change = np.abs(clamped - point) / box.width
    return clamped, rel_change


def _face_slice(lower: Array, upper: Array, axis: int, value: float, pts_per_axis: int) -> Array:
    """Lattice on the face {y_k = value} of the box, other axes sampled uniformly."""
    axes = []
    for i in range(lower.size):
        if i == axis:
            axes.append(np.array([value]))
        else:
            axes.append(np.linspace(lower[i], upper[i], pts_per_axis))
    grids = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


def _outermost_root(rs: ReducedSystem, pts: Array, axis: int, u: float, sign: float) -> float:
    """Outermost zero of the face-normal vector-field component along an axis.

    For points with outward flow (sign * f_axis > 0), brackets the component
    along the axis direction and bisects; returns the farthest root in the
    outward direction (face-local coordinate), or the start value if the
    flow already points inward everywhere.
    """
    f = rs.rhs_batch(pts, u)[:, axis] * sign
    active = f > 0.0
    if not np.any(active):
        return float(pts[0, axis])
    pts = pts[active].copy()
    v0 = pts[0, axis]
    scale = max(1.0, abs(v0))
    step = np.full(pts.shape[0], 1e-3 * scale)
    lo = np.full(pts.shape[0], v0)
    hi = lo + sign * step
    for _ in range(60):
        pts[:, axis] = hi
        f = rs.rhs_batch(pts, u)[:, axis] * sign
        out = f > 0.0
        if not np.any(out):
            break
        lo[out] = hi[out]
        step[out] *= 2.0
        hi[out] = hi[out] + sign * step[out]
    else:
        raise NumericalError(
            f"cannot bracket an inward-pointing region along axis {axis}; "
            "the reduced dynamics admit no invariant box in this direction"
        )
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        pts[:, axis] = mid
        f = rs.rhs_batch(pts, u)[:, axis] * sign
        out = f > 0.0
        lo[out] = mid[out]
        hi[~out] = mid[~out]
    return float(sign * np.max(sign * hi))


def grow_to_invariant(
    rs: ReducedSystem,
    box: Hyperbox,
    controls,
    pts_per_axis: int = 5,
    max_rounds: int = 60,
    pad: float = 1e-3,
) -> Hyperbox:
    """Expand a box until the reduced flow points inward on every face.

    On each face the normal vector-field component is sampled on a lattice
    slice for the extreme controls and the face is pushed out to the
    outermost equilibrium found, a monotone fixed-point iteration.  The
    result makes arrival points of the discrete dynamics stay inside for
    any step size (up to lattice sampling of the faces; verify on the real
    grid and polish with :func:`check_invariance` statistics if needed).
    """
    controls = np.asarray(list(controls), dtype=float)
    u_ends = np.array([controls.min(), controls.max()])
    lower = box.lower.copy()
    upper = box.upper.copy()
    for _ in range(max_rounds):
        grew = False
        for axis in range(lower.size):
            for sign in (1.0, -1.0):
                face = upper[axis] if sign > 0 else lower[axis]
                slice_pts = _face_slice(lower, upper, axis, face, pts_per_axis)
                req = face
                for u in u_ends:
                    root = _outermost_root(rs, slice_pts, axis, float(u), sign)
                    req = max(req, root) if sign > 0 else min(req, root)
                if sign * (req - face) > 0:
                    margin = pad * max(upper[axis] - lower[axis], 1e-12)
                    if sign > 0:
                        upper[axis] = req + margin
                    else:
                        lower[axis] = req - margin
                    grew = True
        if not grew:
            break
    else:
        raise NumericalError("invariant-box growth did not settle; dynamics too expansive")
    return Hyperbox(lower, upper)


def check_invariance(
    rs: ReducedSystem,
    box: Hyperbox,
    nodes: Array,
    controls,
    h: float,
    chunk: int = 200_000,
) -> InvarianceReport:
    """Test ``y + h f_r(y, u)`` against the box for every node/control pair."""
    if h <= 0:
        raise ValidationError("step h must be positive")
    nodes = np.atleast_2d(np.asarray(nodes, dtype=float))
    width = box.width
    checked = 0
    violations = 0
    max_rel = np.zeros(box.r)
    for u in controls:
        for start in range(0, nodes.shape[0], chunk):
            block = nodes[start : start + chunk]
            arrivals = block + h * rs.rhs_batch(block, float(u))
            clamped = box.clip(arrivals)
            disp = np.abs(clamped - arrivals) / width
            bad = np.any(disp > 0.0, axis=1)
            checked += block.shape[0]
            violations += int(np.count_nonzero(bad))
            if disp.size:
                max_rel = np.maximum(max_rel, disp.max(axis=0))
    return InvarianceReport(checked=checked, violations=violations, max_rel_displacement=max_rel)
