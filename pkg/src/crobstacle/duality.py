"""Dual flux reconstruction and the primal/dual energy functionals.

From a converged constrained solve, a lowest-order normal-continuous flux
field is reconstructed elementwise as the broken gradient plus a radial
correction scaled by the residual load ``(multiplier - f_h)/2``; its
divergence reproduces ``multiplier - f_h`` and its element means reproduce
the broken gradient.  The discrete primal and dual energies computed from
such a pair coincide exactly (strong duality), providing a machine-precision
consistency check on any solve.

Energy values of infeasible inputs are the tagged sentinels
:data:`PLUS_INFINITY` / :data:`MINUS_INFINITY` (never floating-point
infinities); use :func:`is_infinite` and :func:`energy_gap` to combine
energies safely.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .assembly import HIGH_ORDER_DEGREE, ProblemData
from .mesh import Mesh
from .spaces import (
    CrFunction,
    P0Function,
    P0VectorField,
    Rt0Function,
    element_points,
    integrate_elementwise,
    segment_rule,
    triangle_rule,
)

__all__ = [
    "DualityError",
    "DualField",
    "marini_flux",
    "EnergySentinel",
    "PLUS_INFINITY",
    "MINUS_INFINITY",
    "is_infinite",
    "energy_gap",
    "energy_primal_discrete",
    "energy_dual_discrete",
    "energy_primal_continuous",
    "energy_dual_continuous",
    "EnergyRecord",
    "write_energy_history",
]


class DualityError(Exception):
    """Raised when a flux reconstruction is inconsistent (solver bug)."""


# ----------------------------------------------------------------------
# tagged infinities
# ----------------------------------------------------------------------
class EnergySentinel:
    """Tagged infinite energy value.

    Totally ordered against floats and the opposite sentinel, but supports
    no arithmetic: gap computations must branch via :func:`is_infinite` or
    use :func:`energy_gap`.
    """
    __slots__ = ("_sign", "_name")

    def __init__(self, sign: int, name: str):
        object.__setattr__(self, "_sign", sign)
        object.__setattr__(self, "_name", name)

    def __setattr__(self, *_):
        raise AttributeError("energy sentinels are immutable")

    def __repr__(self) -> str:
        return self._name

    def __lt__(self, other) -> bool:
        if isinstance(other, EnergySentinel):
            return self._sign < other._sign
        return self._sign < 0

    def __gt__(self, other) -> bool:
        if isinstance(other, EnergySentinel):
            return self._sign > other._sign
        return self._sign > 0

    def __le__(self, other) -> bool:
        return self is other or self < other

    def __ge__(self, other) -> bool:
        return self is other or self > other


PLUS_INFINITY = EnergySentinel(+1, "+infinity")
MINUS_INFINITY = EnergySentinel(-1, "-infinity")


def is_infinite(value) -> bool:
    """True for the tagged energy sentinels (not for float values)."""
    return isinstance(value, EnergySentinel)


def energy_gap(primal, dual):
    """``primal - dual`` with sentinel guarding (any sentinel -> +infinity)."""
    if is_infinite(primal) or is_infinite(dual):
        return PLUS_INFINITY
    return primal - dual


def _sample(value, points: np.ndarray) -> np.ndarray:
    """Evaluate a scalar constant or vectorised callable on a point array."""
    pts = np.asarray(points, dtype=float)
    if np.isscalar(value):
        return np.full(pts.shape[:-1], float(value))
    return np.asarray(value(pts), dtype=float)


# ----------------------------------------------------------------------
# flux reconstruction
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class DualField:
    """Reconstructed flux with its divergence and element means.

    Invariants (up to roundoff): the element means equal the broken gradient
    of the generating solution, the divergence equals ``multiplier - f_h``,
    and normal components are single-valued across interior sides.
    """
    flux: Rt0Function
    divergence: P0Function
    cell_average: P0VectorField
    max_normal_jump: float

    @property
    def mesh(self) -> Mesh:
        return self.flux.mesh


def marini_flux(solution: CrFunction, multiplier: P0Function,
                f_h: P0Function, jump_tol: float = 1e-10) -> DualField:
    """Reconstruct the normal-continuous flux of a constrained solve.

    Per element the field is ``grad_h u + c_T (x - x_T)`` with
    ``c_T = (multiplier_T - f_T)/2`` and ``x_T`` the barycenter; its normal
    component is constant along each (straight) side, so evaluating at side
    midpoints yields the lowest-order flux coefficients.  For a pair coming
    from a converged solve the two elemental values on an interior side
    coincide; a jump beyond ``jump_tol`` (relative) indicates an
    inconsistent input and raises :class:`DualityError`.
    """
    mesh = solution.mesh
    grads = solution.gradient().values
    c = 0.5 * (multiplier.values - f_h.values)

    normals = mesh.side_normals
    mids = mesh.side_midpoints
    minus = mesh.side_elem_minus
    plus = mesh.side_elem_plus
    has_plus = plus >= 0

    def one_sided(elems):
        offset = mids - mesh.barycenters[elems]
        return (np.einsum("sd,sd->s", normals, grads[elems])
                + c[elems] * np.einsum("sd,sd->s", normals, offset))

    flux_minus = one_sided(minus)
    flux_plus = one_sided(np.where(has_plus, plus, minus))
    jumps = np.where(has_plus, np.abs(flux_minus - flux_plus), 0.0)
    scale = 1.0 + float(max(np.abs(flux_minus).max(initial=0.0),
                            np.abs(flux_plus).max(initial=0.0)))
    max_jump = float(jumps.max(initial=0.0))
    if max_jump > jump_tol * scale:
        worst = int(jumps.argmax())
        raise DualityError(
            f"normal-flux jump {max_jump:.3e} across side {worst} exceeds "
            f"{jump_tol:.1e} * {scale:.3e}; the (solution, multiplier, load) "
            "triple is not a stationary point")

    fluxes = np.where(has_plus, 0.5 * (flux_minus + flux_plus), flux_minus)
    flux = Rt0Function(mesh, fluxes)
    return DualField(flux=flux, divergence=flux.divergence(),
                     cell_average=flux.element_means(),
                     max_normal_jump=max_jump)


# ----------------------------------------------------------------------
# discrete energies
# ----------------------------------------------------------------------
def energy_primal_discrete(u: CrFunction, f_h: P0Function, chi_h: P0Function,
                           feasibility_tol: float = 1e-10):
    """Broken Dirichlet energy ``1/2 ||grad_h u||^2 - (f_h, means(u))``.

    Inputs whose element means undercut the obstacle means (beyond a
    relative slack) are infeasible and map to :data:`PLUS_INFINITY`.
    """
    mesh = u.mesh
    means = u.element_means()
    slack = feasibility_tol * (1.0 + float(np.abs(means).max(initial=0.0))
                               + float(np.abs(chi_h.values).max(initial=0.0)))
    if float((means - chi_h.values).min(initial=0.0)) < -slack:
        return PLUS_INFINITY
    grads = u.gradient().values
    return float(0.5 * (mesh.areas * (grads ** 2).sum(axis=1)).sum()
                 - (f_h.values * mesh.areas * means).sum())


def energy_dual_discrete(y, f_h: P0Function, chi_h: P0Function,
                         boundary_dof_values: np.ndarray | None = None,
                         sign_tol: float = 1e-12):
    """Discrete dual energy of a flux field.

    ``-1/2 ||means(y)||^2 - (div y + f_h, chi_h)`` plus, for inhomogeneous
    boundary values, the boundary pairing ``sum_S flux_S |S| g_S`` over
    constrained sides.  A positive residual load ``div y + f_h`` anywhere
    (beyond a relative slack) maps to :data:`MINUS_INFINITY`.
    """
    if isinstance(y, DualField):
        flux, div, means = y.flux, y.divergence.values, y.cell_average.values
    else:
        flux = y
        div = y.divergence().values
        means = y.element_means().values
    mesh = flux.mesh
    residual_load = div + f_h.values
    slack = sign_tol * (1.0 + float(np.abs(f_h.values).max(initial=0.0)))
    if float(residual_load.max(initial=0.0)) > slack:
        return MINUS_INFINITY
    value = float(-0.5 * (mesh.areas * (means ** 2).sum(axis=1)).sum()
                  - (residual_load * chi_h.values * mesh.areas).sum())
    if boundary_dof_values is not None:
        g = np.asarray(boundary_dof_values, dtype=float)
        if np.any(g != 0.0):
            mask = mesh.dirichlet_side_mask
            value += float((flux.side_fluxes[mask] * mesh.side_lengths[mask]
                            * g[mask]).sum())
    return value


# ----------------------------------------------------------------------
# continuous energies
# ----------------------------------------------------------------------
def energy_primal_continuous(mesh: Mesh, data: ProblemData, values_at,
                             gradients_at,
                             degree: int = HIGH_ORDER_DEGREE) -> float:
    """Dirichlet energy ``1/2 ||grad v||^2 - (f, v)`` by high-order quadrature.

    ``values_at`` / ``gradients_at`` map point arrays of shape
    ``(n_elements, nq, 2)`` (rows aligned with elements) to values and
    gradients; feasibility of ``v`` is the caller's responsibility.
    """
    rule = triangle_rule(degree)
    pts = element_points(mesh, rule.bary)
    vals = np.asarray(values_at(pts), dtype=float)
    grads = np.asarray(gradients_at(pts), dtype=float)
    f_vals = _sample(data.f, pts)
    density = 0.5 * (grads ** 2).sum(axis=-1) - f_vals * vals
    return float(integrate_elementwise(mesh, rule, density).sum())


def energy_dual_continuous(mesh: Mesh, data: ProblemData, field: DualField,
                           f_h: P0Function, degree: int = HIGH_ORDER_DEGREE,
                           boundary_points: int = 8,
                           sign_tol: float = 1e-12):
    """Continuous dual energy of a reconstructed flux.

    ``-1/2 ||y||^2`` is integrated exactly (the integrand is quadratic per
    element); the obstacle pairing ``-(div y + f, chi)`` uses the high-order
    rule with the continuous load; the sign indicator is evaluated with the
    projected load ``f_h`` (for non-constant loads the difference is an
    oscillation-order effect); inhomogeneous boundary values contribute
    ``sum_S flux_S int_S g``.
    """
    residual_load = field.divergence.values + f_h.values
    slack = sign_tol * (1.0 + float(np.abs(f_h.values).max(initial=0.0)))
    if float(residual_load.max(initial=0.0)) > slack:
        return MINUS_INFINITY

    exact2 = triangle_rule(2)
    y_vals = field.flux.eval_at(exact2.bary)
    norm_sq = float(integrate_elementwise(
        mesh, exact2, (y_vals ** 2).sum(axis=-1)).sum())

    rule = triangle_rule(degree)
    pts = element_points(mesh, rule.bary)
    chi_vals = _sample(data.chi, pts)
    f_vals = _sample(data.f, pts)
    div_vals = field.divergence.values[:, None]
    pairing = float(integrate_elementwise(
        mesh, rule, (div_vals + f_vals) * chi_vals).sum())

    value = -0.5 * norm_sq - pairing
    if data.dirichlet_data is not None:
        mask = mesh.dirichlet_side_mask
        if mask.any():
            srule = segment_rule(boundary_points)
            a = mesh.vertex_coords[mesh.side_vertices[mask, 0]]
            b = mesh.vertex_coords[mesh.side_vertices[mask, 1]]
            pts_s = (a[:, None, :]
                     + srule.points[None, :, None] * (b - a)[:, None, :])
            g_vals = data.dirichlet_values_at(
                pts_s.reshape(-1, 2)).reshape(len(a), -1)
            side_integrals = (g_vals @ srule.weights) * mesh.side_lengths[mask]
            value += float((field.flux.side_fluxes[mask] * side_integrals).sum())
    return value


# ----------------------------------------------------------------------
# energy history records
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class EnergyRecord:
    """Per-level energies of a refinement study (floats or sentinels)."""
    level: int
    dofs: int
    primal_energy: object
    dual_energy: object
    primal_energy_discrete: object
    dual_energy_discrete: object


def _format_energy(value) -> str:
    if value is PLUS_INFINITY:
        return "inf"
    if value is MINUS_INFINITY:
        return "-inf"
    return f"{value:.17g}"


def write_energy_history(path, records) -> None:
    """Write per-level energies and gaps as CSV (deterministic formatting)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("level,dofs,primal_energy,dual_energy,"
                 "primal_discrete,dual_discrete,gap,gap_discrete\n")
        for r in records:
            gap = energy_gap(r.primal_energy, r.dual_energy)
            gap_d = energy_gap(r.primal_energy_discrete,
                               r.dual_energy_discrete)
            cells = [str(r.level), str(r.dofs),
                     _format_energy(r.primal_energy),
                     _format_energy(r.dual_energy),
                     _format_energy(r.primal_energy_discrete),
                     _format_energy(r.dual_energy_discrete),
                     _format_energy(gap), _format_energy(gap_d)]
            fh.write(",".join(cells) + "\n")
