"""A posteriori error machinery for the nonconforming obstacle solver.

* conforming post-processing of a solve: vertex averaging capped by the
  obstacle, with pointwise values and active-branch gradients,
* the three-part error estimator (flux discrepancy, complementarity
  discrepancy, dual irregularity) with per-element localization and data
  oscillation,
* the computable reduced error measure built from a reference energy,
* exact error norms against closed-form solutions,
* experimental convergence orders and extrapolated reference energies.

Everything is vectorised over elements with deterministic reductions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .assembly import HIGH_ORDER_DEGREE, ProblemData
from .duality import energy_primal_continuous
from .mesh import Mesh
from .spaces import (
    CrFunction,
    P0Function,
    VertexFunction,
    element_points,
    integrate_elementwise,
    interp_av,
    interp_cr,
    interp_rt,
    segment_rule,
    triangle_rule,
)

__all__ = [
    "EstimatorError",
    "PostprocessedField",
    "postprocess_conforming",
    "eta_A",
    "eta_B",
    "eta_C",
    "oscillation",
    "EstimatorBreakdown",
    "EstimateResult",
    "estimate",
    "rho_reduced",
    "ExactErrors",
    "exact_errors",
    "eoc",
    "aitken",
    "ErrorRecord",
    "write_error_history",
]

#: quadrature degree used when interpolating data along sides
_SIDE_RULE_POINTS = 6


class EstimatorError(Exception):
    """Invalid input to the a posteriori machinery."""


def _sample(value, points, shape=None):
    """Evaluate a constant or callable at physical points."""
    if np.isscalar(value):
        target = np.asarray(points).shape[:-1] if shape is None else shape
        return np.full(target, float(value))
    return np.asarray(value(points), dtype=float)


# ----------------------------------------------------------------------
# Conforming post-processing
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class PostprocessedField:
    """Pointwise maximum of a conforming averaging and the obstacle.

    The nodal part is piecewise affine; where the obstacle wins, values and
    gradients switch to the obstacle branch (ties go to the affine branch,
    so constant obstacles never require an obstacle gradient).
    """
    mesh: Mesh
    nodal: VertexFunction
    data: ProblemData

    # -- barycentric evaluation (shared quadrature points) ---------------
    def values_on(self, bary, elems=None):
        """Values at shared barycentric points; shape (n_elems, nq)."""
        p1 = self.nodal.eval_at(bary, elems)
        pts = element_points(self.mesh, bary, elems)
        chi = _sample(self.data.chi, pts, shape=p1.shape)
        return np.maximum(p1, chi)

    def gradients_on(self, bary, elems=None):
        """Active-branch gradients at shared barycentric points."""
        p1 = self.nodal.eval_at(bary, elems)
        pts = element_points(self.mesh, bary, elems)
        chi = _sample(self.data.chi, pts, shape=p1.shape)
        grads = self.nodal.gradient().values
        if elems is not None:
            grads = grads[np.asarray(elems)]
        grads = np.broadcast_to(grads[:, None, :], p1.shape + (2,))
        return self._blend_gradients(p1, chi, grads, pts)

    # -- physical-point evaluation (element-aligned rows) -----------------
    def _element_bary(self, points):
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 3 or pts.shape[0] != self.mesh.n_elements \
                or pts.shape[2] != 2:
            raise EstimatorError(
                "expected element-aligned points of shape "
                f"(n_elements, nq, 2), got {pts.shape}")
        nt, nq = pts.shape[:2]
        elems = np.repeat(np.arange(nt, dtype=np.int64), nq)
        bary = self.mesh.barycentric_coordinates(elems, pts.reshape(-1, 2))
        return pts, bary.reshape(nt, nq, 3)

    def values_at(self, points):
        """Values at element-aligned physical points (n_elements, nq, 2)."""
        pts, bary = self._element_bary(points)
        p1 = np.einsum("tj,tqj->tq", self.nodal.element_values(), bary)
        chi = _sample(self.data.chi, pts, shape=p1.shape)
        return np.maximum(p1, chi)

    def gradients_at(self, points):
        """Active-branch gradients at element-aligned physical points."""
        pts, bary = self._element_bary(points)
        p1 = np.einsum("tj,tqj->tq", self.nodal.element_values(), bary)
        chi = _sample(self.data.chi, pts, shape=p1.shape)
        grads = np.broadcast_to(self.nodal.gradient().values[:, None, :],
                                p1.shape + (2,))
        return self._blend_gradients(p1, chi, grads, pts)

    def _blend_gradients(self, p1, chi, p1_grads, pts):
        active = chi > p1
        if not active.any():
            return np.array(p1_grads, dtype=float)
        if np.isscalar(self.data.chi):
            obstacle = np.zeros(p1_grads.shape)
        elif self.data.chi_grad is None:
            raise EstimatorError(
                "the obstacle is active on the post-processed field but the "
                "problem data carries no obstacle gradient")
        else:
            obstacle = np.asarray(self.data.chi_grad(pts), dtype=float)
        return np.where(active[..., None], obstacle, p1_grads)


def postprocess_conforming(u: CrFunction, data: ProblemData) -> PostprocessedField:
    """Conforming feasible field ``max{vertex averaging, obstacle}``.

    Dirichlet vertices of the averaging carry the boundary data, so the
    result matches the boundary condition at the mesh vertices and sits
    above the obstacle everywhere by construction.
    """
    nodal = interp_av(u, data.dirichlet_data)
    return PostprocessedField(u.mesh, nodal, data)


# ----------------------------------------------------------------------
# Estimator contributions (per-element squared values)
# ----------------------------------------------------------------------
def eta_A(v: PostprocessedField, u: CrFunction, rule=None) -> np.ndarray:
    """Per-element squared flux discrepancy ``|grad v - grad_h u|^2``."""
    rule = rule or triangle_rule(HIGH_ORDER_DEGREE)
    gv = v.gradients_on(rule.bary)
    gu = u.gradient().values[:, None, :]
    return integrate_elementwise(v.mesh, rule, ((gv - gu) ** 2).sum(axis=-1))


def eta_B(v: PostprocessedField, multiplier: P0Function, data: ProblemData,
          rule=None) -> np.ndarray:
    """Per-element complementarity discrepancy ``(-mult)·|T|·mean(v - chi)``.

    Requires a nonpositive multiplier and ``v >= chi``; any per-element
    value below ``-1e-12`` signals a violated precondition and raises.
    """
    rule = rule or triangle_rule(HIGH_ORDER_DEGREE)
    vals = v.values_on(rule.bary)
    pts = element_points(v.mesh, rule.bary)
    chi = _sample(data.chi, pts, shape=vals.shape)
    gap = integrate_elementwise(v.mesh, rule, vals - chi)
    per_element = (-multiplier.values) * gap
    worst = float(per_element.min(initial=0.0))
    if worst < -1e-12:
        raise EstimatorError(
            "negative complementarity contribution "
            f"({worst:.3e}): the multiplier must be nonpositive and the "
            "field must dominate the obstacle")
    return per_element


def eta_C(multiplier: P0Function, f_h: P0Function, mesh: Mesh) -> np.ndarray:
    """Per-element dual irregularity ``(1/4) h_T^2 (f_h - mult)^2 |T|``."""
    diff = f_h.values - multiplier.values
    return 0.25 * mesh.h_elements ** 2 * diff ** 2 * mesh.areas


def oscillation(mesh: Mesh, data: ProblemData, f_h: P0Function,
                rule=None) -> np.ndarray:
    """Per-element data oscillation ``h_T^2 * int_T (f - f_h)^2``."""
    if np.isscalar(data.f):
        diff_sq = (float(data.f) - f_h.values) ** 2
        return mesh.h_elements ** 2 * diff_sq * mesh.areas
    rule = rule or triangle_rule(HIGH_ORDER_DEGREE)
    pts = element_points(mesh, rule.bary)
    diff_sq = (np.asarray(data.f(pts), dtype=float)
               - f_h.values[:, None]) ** 2
    return mesh.h_elements ** 2 * integrate_elementwise(mesh, rule, diff_sq)


# ----------------------------------------------------------------------
# Aggregated breakdown
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class EstimatorBreakdown:
    """Per-element estimator contributions with their global totals.

    All entries are squared quantities and must be nonnegative up to
    roundoff (>= -1e-14); totals are plain sums over elements.
    """
    mesh: Mesh
    eta_a_sq: np.ndarray
    eta_b_sq: np.ndarray
    eta_c_sq: np.ndarray
    osc_sq: np.ndarray

    def __post_init__(self):
        for name in ("eta_a_sq", "eta_b_sq", "eta_c_sq", "osc_sq"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (self.mesh.n_elements,):
                raise EstimatorError(
                    f"{name} must have one entry per element, got shape "
                    f"{arr.shape}")
            if float(arr.min(initial=0.0)) < -1e-14:
                raise EstimatorError(
                    f"{name} has a negative entry ({arr.min():.3e})")
            object.__setattr__(self, name, arr)

    @property
    def indicators(self) -> np.ndarray:
        """Per-element refinement indicators (sum of the three parts)."""
        return self.eta_a_sq + self.eta_b_sq + self.eta_c_sq

    @property
    def total_a_sq(self) -> float:
        return float(self.eta_a_sq.sum())

    @property
    def total_b_sq(self) -> float:
        return float(self.eta_b_sq.sum())

    @property
    def total_c_sq(self) -> float:
        return float(self.eta_c_sq.sum())

    @property
    def total_osc_sq(self) -> float:
        return float(self.osc_sq.sum())

    @property
    def total_sq(self) -> float:
        """Global squared estimator (oscillation not included)."""
        return float(self.indicators.sum())

    def cell_data(self) -> dict:
        """Per-element fields for VTK heatmaps."""
        return {
            "eta_a_sq": self.eta_a_sq.copy(),
            "eta_b_sq": self.eta_b_sq.copy(),
            "eta_c_sq": self.eta_c_sq.copy(),
            "osc_sq": self.osc_sq.copy(),
            "estimator_sq": self.indicators,
        }


@dataclass(frozen=True)
class EstimateResult:
    """Post-processed field and estimator breakdown of one solve."""
    field: PostprocessedField
    breakdown: EstimatorBreakdown


def estimate(outcome, rule=None) -> EstimateResult:
    """Post-process a solve outcome and assemble its estimator breakdown."""
    system = outcome.system
    data = system.data
    mesh = system.mesh
    v = postprocess_conforming(outcome.solution, data)
    return EstimateResult(
        field=v,
        breakdown=EstimatorBreakdown(
            mesh,
            eta_A(v, outcome.solution, rule),
            eta_B(v, outcome.multiplier, data, rule),
            eta_C(outcome.multiplier, system.f_h, mesh),
            oscillation(mesh, data, system.f_h, rule),
        ),
    )


# ----------------------------------------------------------------------
# Reduced error measure
# ----------------------------------------------------------------------
def rho_reduced(v: PostprocessedField, solution: CrFunction,
                multiplier: P0Function, data: ProblemData, *,
                reference_energy: float | None = None,
                include_exact_terms: bool | None = None,
                degree: int = HIGH_ORDER_DEGREE) -> float:
    """Computable lower bound companion of the squared estimator.

    The base term is ``I(v) - I(u)``, the energy excess of the conforming
    field over the reference energy (an exact energy when the problem data
    carries one, otherwise an explicitly supplied extrapolated value).
    When the exact solution is available the broken-gradient error squared
    and the pairing of the discrete constraint force with the exact gap are
    added; ``include_exact_terms=False`` selects the energy-only variant.
    """
    exact = data.exact
    if reference_energy is None:
        if exact is not None and exact.energy is not None:
            reference_energy = exact.energy
        else:
            raise EstimatorError(
                "no reference energy: the problem data has no exact energy "
                "and none was supplied")
    has_exact = exact is not None
    if include_exact_terms is None:
        include_exact_terms = has_exact
    if include_exact_terms and not has_exact:
        raise EstimatorError(
            "exact-solution terms requested but the problem data has no "
            "exact solution")

    mesh = v.mesh
    total = energy_primal_continuous(mesh, data, v.values_at, v.gradients_at,
                                     degree) - float(reference_energy)
    if include_exact_terms:
        rule = triangle_rule(degree)
        pts = element_points(mesh, rule.bary)
        grad_u = np.asarray(exact.grad_u(pts), dtype=float)
        grad_h = solution.gradient().values[:, None, :]
        total += float(integrate_elementwise(
            mesh, rule, ((grad_h - grad_u) ** 2).sum(axis=-1)).sum())
        u_vals = np.asarray(exact.u(pts), dtype=float)
        chi_vals = _sample(data.chi, pts, shape=u_vals.shape)
        gap = integrate_elementwise(mesh, rule, u_vals - chi_vals)
        total += float(np.sum((-multiplier.values) * gap))
    return float(total)


# ----------------------------------------------------------------------
# Exact error norms
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class ExactErrors:
    """Error quantities of one level against the exact solution.

    Three flavours per unknown: ``*_error`` compares the discrete field
    against the exact one, ``*_error_interp`` is the approximation error
    of the exact field's canonical interpolant (the quantity convergence
    tables track alongside ``*_error``), and ``*_supercloseness`` is the
    distance between the discrete field and that interpolant, which
    converges faster than either error.  For the gradient the three are
    tied per element by L2 orthogonality:
    ``grad_error**2 == grad_error_interp**2 + grad_supercloseness**2``
    up to quadrature accuracy.  The pairing entries are duality pairings
    of the discrete constraint force with primal errors (squared-scale
    quantities); totals are pairing + norm.
    """
    grad_error: float
    grad_error_interp: float
    grad_supercloseness: float
    flux_error: float
    flux_error_interp: float
    flux_supercloseness: float
    pairing_error: float
    pairing_error_interp: float

    @property
    def total_error(self) -> float:
        return self.pairing_error + self.grad_error

    @property
    def total_error_interp(self) -> float:
        return self.pairing_error_interp + self.grad_error_interp


def _element_means_vector(rt_field, rule) -> np.ndarray:
    """Element means of a lowest-order flux field (exact: affine integrand)."""
    vals = rt_field.eval_at(rule.bary)
    return np.einsum("tqd,q->td", vals, rule.weights)


def exact_errors(solution: CrFunction, flux, multiplier: P0Function,
                 data: ProblemData, *,
                 degree: int = HIGH_ORDER_DEGREE) -> ExactErrors:
    """All error quantities of a level against the exact solution.

    ``flux`` may be a reconstructed dual field (its flux component is
    used) or a bare lowest-order flux function.
    """
    exact = data.exact
    if exact is None:
        raise EstimatorError("exact errors need problem data with an exact "
                             "solution")
    mesh = solution.mesh
    rule = triangle_rule(degree)
    pts = element_points(mesh, rule.bary)

    grad_u = np.asarray(exact.grad_u(pts), dtype=float)
    grad_h = solution.gradient().values
    grad_error = math.sqrt(float(integrate_elementwise(
        mesh, rule, ((grad_h[:, None, :] - grad_u) ** 2).sum(axis=-1)).sum()))

    u_i = interp_cr(exact.u, mesh, segment_rule(_SIDE_RULE_POINTS))
    grad_i = u_i.gradient().values
    grad_error_interp = math.sqrt(float(integrate_elementwise(
        mesh, rule, ((grad_i[:, None, :] - grad_u) ** 2).sum(axis=-1)).sum()))
    grad_supercloseness = math.sqrt(float(
        (((grad_h - grad_i) ** 2).sum(axis=1) * mesh.areas).sum()))

    rt = flux.flux if hasattr(flux, "flux") else flux
    z_vals = rt.eval_at(rule.bary)
    flux_error = math.sqrt(float(integrate_elementwise(
        mesh, rule, ((z_vals - grad_u) ** 2).sum(axis=-1)).sum()))

    z_i = interp_rt(exact.grad_u, mesh, segment_rule(_SIDE_RULE_POINTS))
    zi_vals = z_i.eval_at(rule.bary)
    flux_error_interp = math.sqrt(float(integrate_elementwise(
        mesh, rule, ((zi_vals - grad_u) ** 2).sum(axis=-1)).sum()))

    mean_rule = triangle_rule(2)
    if hasattr(flux, "cell_average"):
        zh_mean = flux.cell_average.values
    else:
        zh_mean = _element_means_vector(rt, mean_rule)
    zi_mean = _element_means_vector(z_i, mean_rule)
    flux_supercloseness = math.sqrt(float(
        (((zh_mean - zi_mean) ** 2).sum(axis=1) * mesh.areas).sum()))

    mean_u = integrate_elementwise(
        mesh, rule, np.asarray(exact.u(pts), dtype=float)) / mesh.areas
    m_uh = solution.element_means()
    neg_mult = -multiplier.values
    pairing_error = float(np.sum(neg_mult * (mean_u - m_uh) * mesh.areas))
    m_ui = u_i.element_means()
    pairing_error_interp = float(np.sum(neg_mult * (m_ui - m_uh) * mesh.areas))

    return ExactErrors(
        grad_error=grad_error,
        grad_error_interp=grad_error_interp,
        grad_supercloseness=grad_supercloseness,
        flux_error=flux_error,
        flux_error_interp=flux_error_interp,
        flux_supercloseness=flux_supercloseness,
        pairing_error=pairing_error,
        pairing_error_interp=pairing_error_interp,
    )


# ----------------------------------------------------------------------
# Convergence orders and extrapolation
# ----------------------------------------------------------------------
def eoc(errors, h) -> np.ndarray:
    """Experimental orders ``log(e_k/e_{k-1}) / log(h_k/h_{k-1})``."""
    e = np.asarray(errors, dtype=float).ravel()
    hs = np.asarray(h, dtype=float).ravel()
    if e.size != hs.size:
        raise EstimatorError(
            f"errors and mesh sizes differ in length ({e.size} vs {hs.size})")
    if e.size < 2:
        raise EstimatorError("need at least two levels to compute orders")
    if not np.all(e > 0.0) or not np.all(hs > 0.0):
        raise EstimatorError("errors and mesh sizes must be positive")
    log_h = np.log(hs[1:] / hs[:-1])
    if np.any(log_h == 0.0):
        raise EstimatorError("successive mesh sizes must differ")
    return np.log(e[1:] / e[:-1]) / log_h


def aitken(values) -> float:
    """Extrapolated limit of an energy sequence (delta-squared process).

    Uses the last window ``(I_{k-2}, I_{k-1}, I_k)`` from the end of the
    sequence whose second difference is nonzero relative to its scale.
    """
    seq = np.asarray(values, dtype=float).ravel()
    if seq.size < 3:
        raise EstimatorError("extrapolation needs at least three values")
    for k in range(seq.size - 1, 1, -1):
        a, b, c = seq[k - 2], seq[k - 1], seq[k]
        den = c - 2.0 * b + a
        scale = max(abs(a), abs(b), abs(c), 1.0)
        if abs(den) > 1e-14 * scale:
            return float((c * a - b * b) / den)
    raise EstimatorError(
        "no window with a nonvanishing second difference: the sequence is "
        "too flat to extrapolate")


# ----------------------------------------------------------------------
# Study records
# ----------------------------------------------------------------------
_CSV_COLUMNS = (
    "level,h_max,dofs,grad_error,grad_error_interp,grad_supercloseness,"
    "flux_error,flux_error_interp,flux_supercloseness,pairing_error,"
    "pairing_error_interp,total_error,total_error_interp,estimator_sq,"
    "reduced_sq,primal_energy,dual_energy"
)


@dataclass(frozen=True)
class ErrorRecord:
    """One study level: mesh size, dof count, errors, estimator, energies."""
    level: int
    h_max: float
    dofs: int
    errors: ExactErrors | None = None
    estimator_sq: float = math.nan
    reduced_sq: float = math.nan
    primal_energy: float = math.nan
    dual_energy: float = math.nan

    def row(self) -> list:
        e = self.errors
        err_cols = [math.nan] * 10 if e is None else [
            e.grad_error, e.grad_error_interp, e.grad_supercloseness,
            e.flux_error, e.flux_error_interp, e.flux_supercloseness,
            e.pairing_error, e.pairing_error_interp,
            e.total_error, e.total_error_interp]
        return ([self.level, self.h_max, self.dofs] + err_cols
                + [self.estimator_sq, self.reduced_sq, self.primal_energy,
                   self.dual_energy])


def write_error_history(path, records) -> None:
    """Write study records as deterministic CSV (17 significant digits)."""
    lines = [_CSV_COLUMNS]
    for rec in records:
        cells = []
        for value in rec.row():
            if isinstance(value, (int, np.integer)):
                cells.append(str(int(value)))
            else:
                cells.append("%.17g" % float(value))
        lines.append(",".join(cells))
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
