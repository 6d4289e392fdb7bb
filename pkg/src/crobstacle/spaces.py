"""Discrete fields on triangulations and numerical quadrature.

Fields
------
* :class:`CrFunction` -- nonconforming piecewise affine functions with one
  degree of freedom per side (the value at the side midpoint); continuous at
  side midpoints only.
* :class:`P0Function` / :class:`P0VectorField` -- piecewise constants.
* :class:`Rt0Function` -- lowest-order conforming flux fields with one degree
  of freedom per side (the constant normal component on that side); the
  normal component is single-valued across sides.
* :class:`VertexFunction` -- conforming piecewise affine functions.

Interpolants
------------
* :func:`interp_cr` -- side-average interpolant (commutes with the broken
  gradient: the broken gradient of the interpolant is the element mean of the
  gradient).
* :func:`interp_rt` -- side-flux interpolant (commutes with the divergence).
* :func:`interp_av` -- vertex-averaging map from nonconforming to conforming
  piecewise affines; on Dirichlet vertices the boundary data (default zero)
  is imposed.
* :func:`project_p0` -- element-mean projection.

All scalar callables used as data must accept ``(..., 2)`` coordinate arrays
and evaluate vectorised; vector callables return ``(..., 2)`` arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np

from .mesh import Mesh

__all__ = [
    "SpaceError",
    "QuadratureRule",
    "SegmentRule",
    "triangle_rule",
    "segment_rule",
    "element_points",
    "integrate_elementwise",
    "P0Function",
    "P0VectorField",
    "CrFunction",
    "Rt0Function",
    "VertexFunction",
    "eval_cr",
    "gradient_h",
    "project_p0",
    "interp_cr",
    "interp_rt",
    "interp_av",
    "prolong_cr",
    "prolong_p0",
    "side_values",
]


class SpaceError(Exception):
    """Raised for invalid field data or evaluation outside an element."""


# ----------------------------------------------------------------------
# Quadrature
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class QuadratureRule:
    """Quadrature on a triangle in barycentric coordinates.

    ``weights`` sum to one; the integral of ``f`` over an element ``T`` is
    ``|T| * sum_q w_q f(x_q)``.
    """
    name: str
    degree: int
    bary: np.ndarray      # (nq, 3)
    weights: np.ndarray   # (nq,)

    @property
    def n_points(self) -> int:
        return len(self.weights)


@dataclass(frozen=True)
class SegmentRule:
    """Gauss quadrature on the unit interval, weights summing to one."""
    points: np.ndarray
    weights: np.ndarray


def _centroid_rule():
    return QuadratureRule("centroid", 1,
                          np.array([[1.0, 1.0, 1.0]]) / 3.0, np.array([1.0]))


def _midpoint_rule():
    bary = np.array([[0.0, 0.5, 0.5], [0.5, 0.0, 0.5], [0.5, 0.5, 0.0]])
    return QuadratureRule("side-midpoints", 2, bary, np.full(3, 1.0 / 3.0))


def _seven_point_rule():
    # Symmetric 7-point rule of polynomial degree 5.
    a1, w1 = 0.0597158717897698, 0.1323941527885062
    a2, w2 = 0.7974269853530873, 0.1259391805448271
    b1 = 0.4701420641051151
    b2 = 0.1012865073234563
    bary = np.array([
        [1 / 3, 1 / 3, 1 / 3],
        [a1, b1, b1], [b1, a1, b1], [b1, b1, a1],
        [a2, b2, b2], [b2, a2, b2], [b2, b2, a2],
    ])
    weights = np.array([9.0 / 40.0, w1, w1, w1, w2, w2, w2])
    return QuadratureRule("seven-point", 5, bary, weights)


def _collapsed_square_rule(degree: int):
    """Tensor Gauss rule mapped from the unit square to the triangle.

    The map ``(s, t) -> (s, t (1 - s))`` has Jacobian ``1 - s``; an ``m`` point
    Gauss rule per direction integrates triangle polynomials of total degree
    ``2 m - 2`` exactly (one order is spent on the Jacobian factor).
    """
    m = max(2, math.ceil((degree + 2) / 2))
    x, w = np.polynomial.legendre.leggauss(m)
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    s, t = np.meshgrid(x, x, indexing="ij")
    ws, wt = np.meshgrid(w, w, indexing="ij")
    xx = s.ravel()
    yy = (t * (1.0 - s)).ravel()
    weights = (ws * wt * (1.0 - s)).ravel()
    bary = np.stack([1.0 - xx - yy, xx, yy], axis=1)
    # total weight is the reference-triangle area 1/2; normalise to 1
    return QuadratureRule(f"collapsed-gauss-{m}", 2 * m - 2, bary, 2.0 * weights)


def triangle_rule(degree: int, subdivisions: int = 0) -> QuadratureRule:
    """A triangle rule exact (at least) to the given polynomial degree.

    ``subdivisions > 0`` returns a composite rule on the 4**subdivisions
    similar subtriangles of the regular subdivision, useful for integrands
    with interior kinks.
    """
    if degree < 1:
        raise SpaceError(f"quadrature degree must be >= 1, got {degree}")
    if degree == 1:
        rule = _centroid_rule()
    elif degree == 2:
        rule = _midpoint_rule()
    elif degree <= 5:
        rule = _seven_point_rule()
    else:
        rule = _collapsed_square_rule(degree)
    for _ in range(int(subdivisions)):
        rule = _subdivide_rule(rule)
    return rule


def _subdivide_rule(rule: QuadratureRule) -> QuadratureRule:
    """Composite rule on the four children of the regular (red) subdivision."""
    b = rule.bary
    # children in barycentric coordinates of the parent:
    # corner children: lambda -> corner + 0.5 * (lambda shuffled), central child.
    maps = []
    eye = np.eye(3)
    mids = 0.5 * (eye[[1, 2, 0]] + eye[[2, 0, 1]])  # midpoints opposite each vertex
    for j in range(3):
        corners = np.stack([eye[j], mids[(j + 2) % 3], mids[(j + 1) % 3]])
        maps.append(corners)
    maps.append(mids)
    parts = [b @ corners for corners in maps]
    bary = np.vstack(parts)
    weights = np.concatenate([rule.weights / 4.0] * 4)
    return QuadratureRule(f"{rule.name}-x4", rule.degree, bary, weights)


def segment_rule(n: int = 2) -> SegmentRule:
    """``n``-point Gauss rule on [0, 1] (degree ``2 n - 1``)."""
    if n < 1:
        raise SpaceError("segment rule needs at least one point")
    x, w = np.polynomial.legendre.leggauss(n)
    return SegmentRule(0.5 * (x + 1.0), 0.5 * w)


def element_points(mesh: Mesh, bary: np.ndarray, elems=None) -> np.ndarray:
    """Physical coordinates ``(n_elems, nq, 2)`` of barycentric points."""
    if elems is None:
        corners = mesh.vertex_coords[mesh.elem_vertices]
    else:
        corners = mesh.vertex_coords[mesh.elem_vertices[np.asarray(elems)]]
    return np.einsum("qj,tjd->tqd", np.asarray(bary), corners)


def integrate_elementwise(mesh: Mesh, rule: QuadratureRule, values: np.ndarray,
                          elems=None) -> np.ndarray:
    """Per-element integrals of sampled values (n_elems, nq) -> (n_elems,)."""
    areas = mesh.areas if elems is None else mesh.areas[np.asarray(elems)]
    return areas * (np.asarray(values) @ rule.weights)


# ----------------------------------------------------------------------
# Fields
# ----------------------------------------------------------------------
def _check_len(name, arr, n):
    if arr.shape != (n,):
        raise SpaceError(f"{name} must have shape ({n},), got {arr.shape}")


@dataclass(frozen=True)
class P0Function:
    """Piecewise constant scalar field (one value per element)."""
    mesh: Mesh
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        _check_len("values", self.values, self.mesh.n_elements)

    def eval_at(self, bary, elems=None):
        vals = self.values if elems is None else self.values[np.asarray(elems)]
        return np.broadcast_to(vals[:, None], (len(vals), len(np.asarray(bary)))).copy()

    def l2_norm(self) -> float:
        return float(np.sqrt((self.values ** 2 * self.mesh.areas).sum()))

    def integral(self) -> float:
        return float((self.values * self.mesh.areas).sum())


@dataclass(frozen=True)
class P0VectorField:
    """Piecewise constant vector field, e.g. a broken gradient."""
    mesh: Mesh
    values: np.ndarray  # (nt, 2)

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        if self.values.shape != (self.mesh.n_elements, 2):
            raise SpaceError(f"values must have shape (nt, 2), got {self.values.shape}")

    def eval_at(self, bary, elems=None):
        vals = self.values if elems is None else self.values[np.asarray(elems)]
        nq = len(np.asarray(bary))
        return np.broadcast_to(vals[:, None, :], (len(vals), nq, 2)).copy()

    def l2_norm(self) -> float:
        return float(np.sqrt(((self.values ** 2).sum(axis=1) * self.mesh.areas).sum()))


@dataclass(frozen=True)
class CrFunction:
    """Nonconforming piecewise affine field with side-midpoint degrees of freedom.

    ``dirichlet_mask`` (optional) records which dofs are constrained boundary
    values; it is bookkeeping only and does not affect evaluation.
    """
    mesh: Mesh
    dofs: np.ndarray
    dirichlet_mask: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "dofs", np.asarray(self.dofs, dtype=float))
        _check_len("dofs", self.dofs, self.mesh.n_sides)

    def element_dofs(self, elems=None) -> np.ndarray:
        es = self.mesh.elem_sides if elems is None else self.mesh.elem_sides[np.asarray(elems)]
        return self.dofs[es]

    def element_means(self, elems=None) -> np.ndarray:
        """Barycenter values = element means (the element-mean projection)."""
        return self.element_dofs(elems).mean(axis=1)

    def eval_at(self, bary, elems=None):
        # basis_j = 1 - 2 lambda_j at the side opposite vertex j
        basis = 1.0 - 2.0 * np.asarray(bary)          # (nq, 3)
        return np.einsum("tj,qj->tq", self.element_dofs(elems), basis)

    def vertex_traces(self, elems=None) -> np.ndarray:
        """(n_elems, 3) trace of the element-affine at each local vertex."""
        d = self.element_dofs(elems)
        return d.sum(axis=1, keepdims=True) - 2.0 * d

    def gradient(self) -> P0VectorField:
        return gradient_h(self)

    def l2_norm(self) -> float:
        # the squared field is quadratic; the side-midpoint rule is exact
        d2 = (self.element_dofs() ** 2).mean(axis=1)
        return float(np.sqrt((d2 * self.mesh.areas).sum()))


@dataclass(frozen=True)
class Rt0Function:
    """Lowest-order flux field; dof = constant normal component per side.

    The normal component is taken w.r.t. the side's global normal (outward
    from the "minus" element).
    """
    mesh: Mesh
    side_fluxes: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "side_fluxes", np.asarray(self.side_fluxes, dtype=float))
        _check_len("side_fluxes", self.side_fluxes, self.mesh.n_sides)

    def _element_coefficients(self, elems=None):
        m = self.mesh
        if elems is None:
            es, orient, areas = m.elem_sides, m.elem_side_orient, m.areas
        else:
            elems = np.asarray(elems)
            es, orient, areas = m.elem_sides[elems], m.elem_side_orient[elems], m.areas[elems]
        coef = self.side_fluxes[es] * orient * m.side_lengths[es] / (2.0 * areas[:, None])
        return coef, es

    def eval_at(self, bary, elems=None):
        m = self.mesh
        coef, _ = self._element_coefficients(elems)
        pts = element_points(m, bary, elems)          # (n, nq, 2)
        ev = m.elem_vertices if elems is None else m.elem_vertices[np.asarray(elems)]
        corners = m.vertex_coords[ev]                 # (n, 3, 2)
        diff = pts[:, None, :, :] - corners[:, :, None, :]   # (n, 3, nq, 2)
        return np.einsum("tj,tjqd->tqd", coef, diff)

    def divergence(self) -> P0Function:
        m = self.mesh
        div = (self.side_fluxes[m.elem_sides] * m.elem_side_orient
               * m.side_lengths[m.elem_sides]).sum(axis=1) / m.areas
        return P0Function(m, div)

    def element_means(self) -> P0VectorField:
        """Element means; the field is affine per element, so this is the barycenter value."""
        centroid = np.full((1, 3), 1.0 / 3.0)
        return P0VectorField(self.mesh, self.eval_at(centroid)[:, 0, :])


@dataclass(frozen=True)
class VertexFunction:
    """Conforming piecewise affine field with vertex degrees of freedom."""
    mesh: Mesh
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        _check_len("values", self.values, self.mesh.n_vertices)

    def element_values(self, elems=None) -> np.ndarray:
        ev = self.mesh.elem_vertices if elems is None else self.mesh.elem_vertices[np.asarray(elems)]
        return self.values[ev]

    def eval_at(self, bary, elems=None):
        return np.einsum("tj,qj->tq", self.element_values(elems), np.asarray(bary))

    def gradient(self) -> P0VectorField:
        g = np.einsum("tj,tjd->td", self.element_values(), self.mesh.bary_grads)
        return P0VectorField(self.mesh, g)

    def to_cr(self) -> CrFunction:
        mids = 0.5 * self.values[self.mesh.side_vertices].sum(axis=1)
        return CrFunction(self.mesh, mids)


# ----------------------------------------------------------------------
# Point evaluation (with membership validation)
# ----------------------------------------------------------------------
def eval_cr(v: CrFunction, elems, points, tol: float = 1e-10):
    """Evaluate a CR field at physical points paired with containing elements."""
    elems = np.atleast_1d(np.asarray(elems, dtype=np.int64))
    points = np.atleast_2d(np.asarray(points, dtype=float))
    bary = v.mesh.barycentric_coordinates(elems, points)
    if bary.min() < -tol or bary.max() > 1.0 + tol:
        raise SpaceError("evaluation point lies outside its element")
    basis = 1.0 - 2.0 * bary
    return (v.dofs[v.mesh.elem_sides[elems]] * basis).sum(axis=1)


def gradient_h(v) -> P0VectorField:
    """Broken (elementwise) gradient of a CR or vertex field."""
    if isinstance(v, VertexFunction):
        return v.gradient()
    if not isinstance(v, CrFunction):
        raise SpaceError(f"cannot take a broken gradient of {type(v).__name__}")
    g = np.einsum("tj,tjd->td", v.element_dofs(), -2.0 * v.mesh.bary_grads)
    return P0VectorField(v.mesh, g)


# ----------------------------------------------------------------------
# Interpolation and projection
# ----------------------------------------------------------------------
def project_p0(f, mesh: Mesh | None = None, rule: QuadratureRule | None = None) -> P0Function:
    """Element-mean projection of a callable, constant, or discrete field."""
    if isinstance(f, P0Function):
        return f
    if isinstance(f, CrFunction):
        return P0Function(f.mesh, f.element_means())
    if isinstance(f, VertexFunction):
        return P0Function(f.mesh, f.element_values().mean(axis=1))
    if mesh is None:
        raise SpaceError("project_p0 of a callable or constant requires a mesh")
    if np.isscalar(f):
        return P0Function(mesh, np.full(mesh.n_elements, float(f)))
    rule = rule or triangle_rule(5)
    pts = element_points(mesh, rule.bary)
    vals = f(pts)
    return P0Function(mesh, np.asarray(vals) @ rule.weights)


def interp_cr(f, mesh: Mesh, rule: SegmentRule | None = None) -> CrFunction:
    """Side-average interpolant of a callable (or constant) into the CR space."""
    if np.isscalar(f):
        return CrFunction(mesh, np.full(mesh.n_sides, float(f)))
    rule = rule or segment_rule(2)
    a = mesh.vertex_coords[mesh.side_vertices[:, 0]]
    b = mesh.vertex_coords[mesh.side_vertices[:, 1]]
    pts = a[:, None, :] + rule.points[None, :, None] * (b - a)[:, None, :]
    vals = f(pts)
    return CrFunction(mesh, np.asarray(vals) @ rule.weights)


def interp_rt(y, mesh: Mesh, rule: SegmentRule | None = None) -> Rt0Function:
    """Side-flux interpolant of a vector callable into the lowest-order flux space."""
    rule = rule or segment_rule(2)
    a = mesh.vertex_coords[mesh.side_vertices[:, 0]]
    b = mesh.vertex_coords[mesh.side_vertices[:, 1]]
    pts = a[:, None, :] + rule.points[None, :, None] * (b - a)[:, None, :]
    vals = np.asarray(y(pts))                       # (ns, nq, 2)
    normal_comp = np.einsum("sqd,sd->sq", vals, mesh.side_normals)
    return Rt0Function(mesh, normal_comp @ rule.weights)


def interp_av(v: CrFunction, dirichlet_data=None) -> VertexFunction:
    """Vertex-averaging map into the conforming space.

    Each vertex value is the arithmetic mean of the traces of the element
    affines meeting at that vertex; vertices on Dirichlet sides are assigned
    the boundary data (a callable on coordinates, a constant, or zero).
    """
    mesh = v.mesh
    traces = v.vertex_traces()
    sums = np.zeros(mesh.n_vertices)
    np.add.at(sums, mesh.elem_vertices.ravel(), traces.ravel())
    counts = np.bincount(mesh.elem_vertices.ravel(), minlength=mesh.n_vertices)
    values = sums / np.maximum(counts, 1)

    dmask = mesh.dirichlet_vertex_mask()
    if dirichlet_data is None:
        values[dmask] = 0.0
    elif np.isscalar(dirichlet_data):
        values[dmask] = float(dirichlet_data)
    else:
        values[dmask] = dirichlet_data(mesh.vertex_coords[dmask])
    return VertexFunction(mesh, values)


# ----------------------------------------------------------------------
# Prolongation to a refined mesh
# ----------------------------------------------------------------------
def _require_child(fine: Mesh, coarse: Mesh):
    if fine.parent is not coarse or fine.parent_elements is None:
        raise SpaceError("fine mesh is not a refinement of the coarse mesh")


def prolong_cr(v: CrFunction, fine: Mesh) -> CrFunction:
    """Transfer a CR field to a refinement of its mesh.

    Each fine side dof is the average, over the fine side's adjacent
    elements, of the parent element affine evaluated at the fine side
    midpoint.  (For sides interior to a parent element this is exact; across
    parent interfaces the two one-sided values are averaged.)
    """
    coarse = v.mesh
    _require_child(fine, coarse)
    mids = fine.side_midpoints

    def one_sided(elem_ids):
        valid = elem_ids >= 0
        parents = fine.parent_elements[np.where(valid, elem_ids, 0)]
        bary = coarse.barycentric_coordinates(parents, mids)
        vals = (v.dofs[coarse.elem_sides[parents]] * (1.0 - 2.0 * bary)).sum(axis=1)
        return np.where(valid, vals, 0.0), valid

    v_minus, _ = one_sided(fine.side_elem_minus)
    v_plus, has_plus = one_sided(fine.side_elem_plus)
    dofs = np.where(has_plus, 0.5 * (v_minus + v_plus), v_minus)
    return CrFunction(fine, dofs)


def prolong_p0(p: P0Function, fine: Mesh) -> P0Function:
    """Transfer a piecewise constant to a refinement (children inherit the value)."""
    _require_child(fine, p.mesh)
    return P0Function(fine, p.values[fine.parent_elements])


# ----------------------------------------------------------------------
# Side traces
# ----------------------------------------------------------------------
def side_values(field, side_ids, tpoints, which: str = "minus"):
    """Evaluate a field's trace on sides from one adjacent element.

    ``tpoints`` are parameters in [0, 1] along each side (from the side's
    first to second vertex); ``which`` selects the adjacent element.  Scalar
    fields return ``(n_sides, nq)``; vector fields ``(n_sides, nq, 2)``.
    """
    mesh = field.mesh
    side_ids = np.asarray(side_ids, dtype=np.int64)
    tpoints = np.asarray(tpoints, dtype=float)
    if which == "minus":
        elems = mesh.side_elem_minus[side_ids]
    elif which == "plus":
        elems = mesh.side_elem_plus[side_ids]
        if np.any(elems < 0):
            raise SpaceError("boundary side has no plus element")
    else:
        raise SpaceError(f"unknown side {which!r}")

    a = mesh.vertex_coords[mesh.side_vertices[side_ids, 0]]
    b = mesh.vertex_coords[mesh.side_vertices[side_ids, 1]]
    pts = a[:, None, :] + tpoints[None, :, None] * (b - a)[:, None, :]
    nq = len(tpoints)

    flat_elems = np.repeat(elems, nq)
    flat_pts = pts.reshape(-1, 2)
    bary = mesh.barycentric_coordinates(flat_elems, flat_pts).reshape(len(side_ids), nq, 3)

    if isinstance(field, CrFunction):
        basis = 1.0 - 2.0 * bary
        return np.einsum("sj,sqj->sq", field.dofs[mesh.elem_sides[elems]], basis)
    if isinstance(field, VertexFunction):
        return np.einsum("sj,sqj->sq", field.values[mesh.elem_vertices[elems]], bary)
    if isinstance(field, P0Function):
        return np.broadcast_to(field.values[elems][:, None], (len(side_ids), nq)).copy()
    if isinstance(field, P0VectorField):
        return np.broadcast_to(field.values[elems][:, None, :],
                               (len(side_ids), nq, 2)).copy()
    if isinstance(field, Rt0Function):
        coef, _ = field._element_coefficients(elems)
        corners = mesh.vertex_coords[mesh.elem_vertices[elems]]
        diff = pts[:, None, :, :] - corners[:, :, None, :]
        return np.einsum("sj,sjqd->sqd", coef, diff)
    raise SpaceError(f"unsupported field type {type(field).__name__}")
