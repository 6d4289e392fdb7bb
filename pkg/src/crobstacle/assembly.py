"""Assembly of the discrete obstacle-problem building blocks.

The discrete complementarity system couples

* the broken stiffness matrix ``S`` of the CR space (Dirichlet dofs removed),
* the side-element coupling matrix ``P`` with entries ``|T| / 3`` for each
  free side of ``T`` (the element-mean pairing),
* the obstacle side values (the side-average interpolant of the obstacle)
  and their element means ``chi_h``,
* the element load values ``f_h`` (element-mean projection of ``f``).

Elements whose sides are all constrained have an empty coupling column and
are excluded from the multiplier enumeration (:func:`find_excluded_element`).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .mesh import Mesh
from .spaces import (
    CrFunction,
    P0Function,
    QuadratureRule,
    SegmentRule,
    element_points,
    integrate_elementwise,
    interp_cr,
    project_p0,
    segment_rule,
    triangle_rule,
)
from .sparse import SparseMatrix

__all__ = [
    "AssemblyError",
    "DofMap",
    "build_dofmap",
    "ExactSolution",
    "ProblemData",
    "assemble_stiffness_full",
    "assemble_stiffness",
    "assemble_coupling",
    "find_excluded_element",
    "assemble_obstacle_vectors",
    "assemble_load",
    "dirichlet_dof_values",
    "osc",
]

DATA_PROJECTION_DEGREE = 5
HIGH_ORDER_DEGREE = 12


class AssemblyError(Exception):
    """Raised for invalid problem data or assembly preconditions."""


# ----------------------------------------------------------------------
# Dof bookkeeping
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class DofMap:
    """Enumerations of the free side dofs and the multiplier elements.

    ``free_sides`` lists the non-Dirichlet sides in ascending order;
    ``elements`` lists the elements carrying a multiplier (all elements,
    minus any excluded ones whose sides are all constrained).
    """
    mesh: Mesh
    free_sides: np.ndarray
    side_to_free: np.ndarray
    elements: np.ndarray
    elem_to_col: np.ndarray
    excluded_elements: tuple = ()

    @property
    def n_free(self) -> int:
        return len(self.free_sides)

    @property
    def n_multipliers(self) -> int:
        return len(self.elements)

    def exclude(self, elements) -> "DofMap":
        """A new map without the given multiplier elements."""
        excluded = sorted(set(self.excluded_elements) | {int(e) for e in elements})
        keep = np.setdiff1d(np.arange(self.mesh.n_elements), np.asarray(excluded))
        elem_to_col = np.full(self.mesh.n_elements, -1, dtype=np.int64)
        elem_to_col[keep] = np.arange(len(keep))
        return replace(self, elements=keep, elem_to_col=elem_to_col,
                       excluded_elements=tuple(excluded))


def build_dofmap(mesh: Mesh) -> DofMap:
    free = np.flatnonzero(~mesh.dirichlet_side_mask)
    side_to_free = np.full(mesh.n_sides, -1, dtype=np.int64)
    side_to_free[free] = np.arange(len(free))
    elements = np.arange(mesh.n_elements)
    return DofMap(mesh, free, side_to_free, elements, elements.copy())


# ----------------------------------------------------------------------
# Problem data
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class ExactSolution:
    """Reference solution data for benchmark error studies."""
    u: Callable
    grad_u: Callable
    lam: Optional[Callable] = None
    energy: Optional[float] = None
    contact: Optional[Callable] = None


@dataclass(frozen=True)
class ProblemData:
    """Data of one obstacle problem instance.

    ``f`` and ``chi`` may be scalars, vectorised callables on coordinate
    arrays, or discrete fields; ``chi_grad`` (vector callable) is needed only
    by estimator routines when the obstacle is active and non-affine.
    ``dirichlet_data`` (callable or scalar) imposes inhomogeneous boundary
    values; omit it for the homogeneous problem.
    """
    name: str
    f: object
    chi: object
    chi_grad: Optional[Callable] = None
    boundary_rule: Optional[Callable] = None
    dirichlet_data: object = None
    exact: Optional[ExactSolution] = None

    def chi_side_values(self, mesh: Mesh, rule: SegmentRule | None = None) -> np.ndarray:
        """Side-average interpolant values of the obstacle (one per side)."""
        if isinstance(self.chi, CrFunction):
            if self.chi.mesh is not mesh:
                raise AssemblyError("obstacle CR field lives on a different mesh")
            return self.chi.dofs.copy()
        return interp_cr(self.chi, mesh, rule).dofs

    def dirichlet_values_at(self, points: np.ndarray):
        if self.dirichlet_data is None:
            return np.zeros(len(points))
        if np.isscalar(self.dirichlet_data):
            return np.full(len(points), float(self.dirichlet_data))
        return np.asarray(self.dirichlet_data(points), dtype=float)

    def validate_on(self, mesh: Mesh, tol: float = 1e-12):
        """Check that the obstacle does not exceed the boundary data on Dirichlet sides."""
        dmask = mesh.dirichlet_side_mask
        if not dmask.any():
            return
        mids = mesh.side_midpoints[dmask]
        chi_vals = self.chi_side_values(mesh)[dmask]
        bdry = self.dirichlet_values_at(mids)
        worst = float((chi_vals - bdry).max())
        if worst > tol:
            raise AssemblyError(
                f"obstacle exceeds the Dirichlet data on the boundary by {worst:.3e}")


# ----------------------------------------------------------------------
# Matrices
# ----------------------------------------------------------------------
def assemble_stiffness_full(mesh: Mesh) -> SparseMatrix:
    """Broken-gradient stiffness over *all* side dofs (no boundary masking)."""
    # grad of the side basis opposite vertex j is -2 grad lambda_j (constant),
    # so the local matrix is 4 |T| (grad lambda_i . grad lambda_j): exact.
    g = mesh.bary_grads                                # (nt, 3, 2)
    local = 4.0 * mesh.areas[:, None, None] * np.einsum("tid,tjd->tij", g, g)
    rows = np.repeat(mesh.elem_sides, 3, axis=1).ravel()
    cols = np.tile(mesh.elem_sides, (1, 3)).ravel()
    return SparseMatrix.from_coo(rows, cols, local.ravel(),
                                 shape=(mesh.n_sides, mesh.n_sides))


def assemble_stiffness(mesh: Mesh, dofmap: DofMap) -> SparseMatrix:
    """Stiffness restricted to the free (non-Dirichlet) side dofs."""
    full = assemble_stiffness_full(mesh)
    return full.submatrix(dofmap.free_sides, dofmap.free_sides)


def assemble_coupling(mesh: Mesh, dofmap: DofMap) -> SparseMatrix:
    """Coupling matrix: entry (side S, element T) = |T| / 3 for free S of T."""
    es = mesh.elem_sides                               # (nt, 3)
    free_row = dofmap.side_to_free[es]                 # -1 where constrained
    col = np.broadcast_to(dofmap.elem_to_col[:, None], es.shape)
    vals = np.broadcast_to((mesh.areas / 3.0)[:, None], es.shape)
    keep = (free_row >= 0) & (col >= 0)
    return SparseMatrix.from_coo(free_row[keep], col[keep], vals[keep],
                                 shape=(dofmap.n_free, dofmap.n_multipliers))


def find_excluded_element(P: SparseMatrix):
    """Element columns of the coupling matrix with empty support.

    Returns a list of column indices (ascending); empty when every element
    couples to at least one free side.  The caller shrinks the dof map with
    :meth:`DofMap.exclude` and drops the columns.
    """
    csc = P.csr.tocsc()
    csc.eliminate_zeros()
    col_nnz = np.diff(csc.indptr)
    return [int(j) for j in np.flatnonzero(col_nnz == 0)]


# ----------------------------------------------------------------------
# Vectors
# ----------------------------------------------------------------------
def assemble_obstacle_vectors(mesh: Mesh, data: ProblemData, dofmap: DofMap,
                              rule: SegmentRule | None = None):
    """Side values of the interpolated obstacle and their element means.

    Returns ``(X, chi_h)`` where ``X[s]`` is the side-average interpolant of
    the obstacle on side ``s`` and ``chi_h`` is the piecewise constant of its
    element means (the discrete obstacle for the barycentric constraint).
    """
    X = data.chi_side_values(mesh, rule)
    chi_h = P0Function(mesh, X[mesh.elem_sides].mean(axis=1))
    return X, chi_h


def assemble_load(mesh: Mesh, data: ProblemData, dofmap: DofMap,
                  quad: QuadratureRule | None = None):
    """Element load vector and the projected load.

    Returns ``(F, f_h)`` with ``F_T = f_h|_T * |T|`` (the element integral of
    the projected load) over all elements and ``f_h`` the element-mean
    projection of ``f`` (default quadrature degree 5).
    """
    f_h = project_p0(data.f, mesh, quad or triangle_rule(DATA_PROJECTION_DEGREE))
    return f_h.values * mesh.areas, f_h


def dirichlet_dof_values(mesh: Mesh, data: ProblemData,
                         rule: SegmentRule | None = None) -> np.ndarray:
    """Full-length side vector: boundary-data side averages on Dirichlet sides, else 0."""
    values = np.zeros(mesh.n_sides)
    dmask = mesh.dirichlet_side_mask
    if not dmask.any() or data.dirichlet_data is None:
        return values
    if np.isscalar(data.dirichlet_data):
        values[dmask] = float(data.dirichlet_data)
        return values
    rule = rule or segment_rule(2)
    sides = np.flatnonzero(dmask)
    a = mesh.vertex_coords[mesh.side_vertices[sides, 0]]
    b = mesh.vertex_coords[mesh.side_vertices[sides, 1]]
    pts = a[:, None, :] + rule.points[None, :, None] * (b - a)[:, None, :]
    values[sides] = np.asarray(data.dirichlet_data(pts)) @ rule.weights
    return values


# ----------------------------------------------------------------------
# Data oscillation
# ----------------------------------------------------------------------
def osc(mesh: Mesh, data: ProblemData, quad: QuadratureRule | None = None):
    """Per-element and total data oscillation ``h_T^2 ||f - f_h||_T^2``.

    Exactly zero (by construction, not by quadrature) when ``f`` is constant
    or already piecewise constant on the mesh.
    """
    if np.isscalar(data.f):
        per = np.zeros(mesh.n_elements)
        return per, 0.0
    if isinstance(data.f, P0Function):
        if data.f.mesh is not mesh:
            raise AssemblyError("piecewise-constant load lives on a different mesh")
        per = np.zeros(mesh.n_elements)
        return per, 0.0
    quad = quad or triangle_rule(HIGH_ORDER_DEGREE)
    f_h = project_p0(data.f, mesh, triangle_rule(DATA_PROJECTION_DEGREE))
    pts = element_points(mesh, quad.bary)
    diff = np.asarray(data.f(pts)) - f_h.values[:, None]
    per = mesh.h_elements ** 2 * integrate_elementwise(mesh, quad, diff ** 2)
    return per, float(per.sum())
