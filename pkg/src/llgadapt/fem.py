"""Lagrange finite elements on triangles: spaces, assembly, transfer, recovery.

Vector fields are stored component-major (3 stacked scalar blocks), so the
scalar kernels serve every assembled form.  Quadrature uses tensor Gauss
rules collapsed onto the triangle; ``triangle_quadrature(d)`` is exact for
polynomials of total degree ``d``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import SolverFailure
from .mesh import Mesh


def triangle_quadrature(degree: int):
    """Points and weights on the reference triangle, exact to ``degree``."""
    n = max(1, math.ceil((degree + 2) / 2))
    t, w = np.polynomial.legendre.leggauss(n)
    a = 0.5 * (t + 1.0)
    wa = 0.5 * w
    A, B = np.meshgrid(a, a, indexing="ij")
    WA, WB = np.meshgrid(wa, wa, indexing="ij")
    xi = A.ravel()
    eta = (B * (1.0 - A)).ravel()
    wq = (WA * WB * (1.0 - A)).ravel()
    return np.column_stack([xi, eta]), wq


def _reference_nodes(p: int):
    """Lagrange nodes on the reference triangle in the local dof order."""
    verts = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)]
    nodes = list(verts)
    for a, b in ((0, 1), (1, 2), (2, 0)):
        pa, pb = np.array(verts[a]), np.array(verts[b])
        for j in range(1, p):
            nodes.append(tuple(pa + (j / p) * (pb - pa)))
    for i in range(1, p):
        for j in range(1, p - i):
            nodes.append((i / p, j / p))
    return np.array(nodes)


def _monomials(p: int, pts):
    pts = np.atleast_2d(pts)
    cols = []
    for d in range(p + 1):
        for i in range(d + 1):
            cols.append(pts[:, 0] ** (d - i) * pts[:, 1] ** i)
    return np.column_stack(cols)


def _monomial_grads(p: int, pts):
    pts = np.atleast_2d(pts)
    gx, gy = [], []
    for d in range(p + 1):
        for i in range(d + 1):
            ex, ey = d - i, i
            gx.append(ex * pts[:, 0] ** max(ex - 1, 0) * pts[:, 1] ** ey
                      if ex > 0 else np.zeros(pts.shape[0]))
            gy.append(ey * pts[:, 0] ** ex * pts[:, 1] ** max(ey - 1, 0)
                      if ey > 0 else np.zeros(pts.shape[0]))
    return np.stack([np.column_stack(gx), np.column_stack(gy)], axis=-1)


class FESpace:
    """Scalar Lagrange space of degree ``p`` on a mesh."""

    def __init__(self, mesh: Mesh, degree: int = 1):
        if degree < 1:
            raise ValueError("degree must be >= 1")
        self.mesh = mesh
        self.degree = degree
        self._tables = {}
        self._cache = {}
        self._coeff = np.linalg.inv(_monomials(degree, _reference_nodes(degree)))
        self._build_dofs()

    def _build_dofs(self):
        p = self.degree
        tri = self.mesh.elements
        nv = self.mesh.n_vertices
        pts = self.mesh.vertices
        edge_set = set()
        for t in tri:
            for a, b in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0])):
                edge_set.add((min(a, b), max(a, b)))
        edges = sorted(edge_set)
        edge_id = {e: i for i, e in enumerate(edges)}
        n_int = (p - 1) * (p - 2) // 2
        ndof = nv + len(edges) * (p - 1) + tri.shape[0] * n_int
        nb = (p + 1) * (p + 2) // 2
        elem_dofs = np.empty((tri.shape[0], nb), dtype=np.int64)
        elem_dofs[:, 0:3] = tri
        if p > 1:
            col = 3
            for le, (a, b) in enumerate(((0, 1), (1, 2), (2, 0))):
                ga, gb = tri[:, a], tri[:, b]
                lo = np.minimum(ga, gb)
                hi = np.maximum(ga, gb)
                eids = np.array([edge_id[(l, h)] for l, h in zip(lo, hi)])
                base = nv + eids * (p - 1)
                fwd = ga == lo
                for j in range(1, p):
                    elem_dofs[:, col + j - 1] = np.where(
                        fwd, base + (j - 1), base + (p - j - 1)
                    )
                col += p - 1
            nb_edge = nv + len(edges) * (p - 1)
            for e in range(tri.shape[0]):
                elem_dofs[e, col:] = nb_edge + e * n_int + np.arange(n_int)
        coords = np.empty((ndof, 2))
        coords[:nv] = pts
        if p > 1:
            for (a, b), i in edge_id.items():
                for j in range(1, p):
                    coords[nv + i * (p - 1) + j - 1] = (
                        pts[a] + (j / p) * (pts[b] - pts[a])
                    )
            if n_int:
                ref_int = _reference_nodes(p)[3 + 3 * (p - 1):]
                x0, J, _, _ = self._geometry()
                for e in range(tri.shape[0]):
                    base = nv + len(edges) * (p - 1) + e * n_int
                    coords[base:base + n_int] = x0[e] + ref_int @ J[e].T
        self.elem_dofs = elem_dofs
        self.dof_coords = coords
        self.ndof = ndof
        self.n_edges = len(edges)

    def _geometry(self):
        if "geom" not in self._cache:
            tri = self.mesh.elements
            pts = self.mesh.vertices
            x0 = pts[tri[:, 0]]
            J = np.stack(
                [pts[tri[:, 1]] - x0, pts[tri[:, 2]] - x0], axis=-1
            )  # columns are the edge vectors
            det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
            Jinv = np.empty_like(J)
            Jinv[:, 0, 0] = J[:, 1, 1] / det
            Jinv[:, 0, 1] = -J[:, 0, 1] / det
            Jinv[:, 1, 0] = -J[:, 1, 0] / det
            Jinv[:, 1, 1] = J[:, 0, 0] / det
            self._cache["geom"] = (x0, J, Jinv, det)
        return self._cache["geom"]

    def tables(self, qdeg: int):
        """Quadrature rule plus basis values/reference gradients at its points."""
        if qdeg not in self._tables:
            qp, qw = triangle_quadrature(qdeg)
            phi = _monomials(self.degree, qp) @ self._coeff
            dmono = _monomial_grads(self.degree, qp)
            dphi = np.einsum("qmk,mb->qbk", dmono, self._coeff)
            self._tables[qdeg] = (qp, qw, phi, dphi)
        return self._tables[qdeg]

    def phys_grads(self, qdeg: int):
        key = ("pgrad", qdeg)
        if key not in self._cache:
            _, _, _, dphi = self.tables(qdeg)
            _, _, Jinv, _ = self._geometry()
            self._cache[key] = np.einsum("qbr,erk->eqbk", dphi, Jinv)
        return self._cache[key]

    def eval_basis(self, refpts):
        return _monomials(self.degree, refpts) @ self._coeff

    def quad_points_phys(self, qdeg: int):
        qp, _, _, _ = self.tables(qdeg)
        x0, J, _, _ = self._geometry()
        return x0[:, None, :] + np.einsum("eij,qj->eqi", J, qp)

    # -- cached canonical matrices ---------------------------------------

    def mass(self):
        if "mass" not in self._cache:
            self._cache["mass"] = assemble_mass(self)
        return self._cache["mass"]

    def stiffness(self):
        if "stiff" not in self._cache:
            self._cache["stiff"] = assemble_stiffness(self)
        return self._cache["stiff"]

    def mass_solver(self):
        if "mass_lu" not in self._cache:
            try:
                self._cache["mass_lu"] = spla.splu(self.mass().tocsc())
            except RuntimeError as exc:
                raise SolverFailure(f"mass factorization failed: {exc}") from exc
        return self._cache["mass_lu"]


@dataclass
class FieldCoeffs:
    """Coefficients of a scalar or vector FE function (component-major)."""

    space: FESpace
    values: np.ndarray  # shape (ncomp, ndof)

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if self.values.shape[1] != self.space.ndof:
            raise ValueError(
                f"coefficient length {self.values.shape[1]} != ndof {self.space.ndof}"
            )

    @property
    def ncomp(self):
        return self.values.shape[0]

    def stacked(self):
        return self.values.ravel()

    @classmethod
    def from_stacked(cls, space, vec, ncomp):
        return cls(space, np.asarray(vec, dtype=float).reshape(ncomp, space.ndof))

    def copy(self):
        return FieldCoeffs(self.space, self.values.copy())

    def nodal_lengths(self):
        return np.sqrt(np.sum(self.values**2, axis=0))

    def normalized(self, floor=1e-12):
        lens = self.nodal_lengths()
        if np.any(lens < floor):
            raise ValueError("nodal vector too short to normalize")
        return FieldCoeffs(self.space, self.values / lens)


def _scatter(space, local, qdeg_unused=None):
    """Assemble per-element dense blocks (nelem, nb, nb) into a CSR matrix."""
    dofs = space.elem_dofs
    nb = dofs.shape[1]
    rows = np.repeat(dofs, nb, axis=1).ravel()
    cols = np.tile(dofs, (1, nb)).ravel()
    A = sp.coo_matrix(
        (local.ravel(), (rows, cols)), shape=(space.ndof, space.ndof)
    )
    return A.tocsr()


def assemble_mass(space: FESpace, qdeg=None) -> sp.csr_matrix:
    p = space.degree
    qdeg = 2 * p if qdeg is None else qdeg
    _, qw, phi, _ = space.tables(qdeg)
    _, _, _, det = space._geometry()
    mref = np.einsum("q,qa,qb->ab", qw, phi, phi)
    local = det[:, None, None] * mref[None, :, :]
    return _scatter(space, local)


def assemble_stiffness(space: FESpace, qdeg=None) -> sp.csr_matrix:
    p = space.degree
    qdeg = max(2 * (p - 1), 0) if qdeg is None else qdeg
    _, qw, _, _ = space.tables(qdeg)
    _, _, _, det = space._geometry()
    g = space.phys_grads(qdeg)
    local = np.einsum("q,eqak,eqbk->eab", qw, g, g) * det[:, None, None]
    return _scatter(space, local)


def field_at_quad(u: FieldCoeffs, qdeg: int):
    """Values of all components at the quadrature points, (ncomp, nelem, nq)."""
    _, _, phi, _ = u.space.tables(qdeg)
    ce = u.values[:, u.space.elem_dofs]  # (ncomp, nelem, nb)
    return np.einsum("qb,ceb->ceq", phi, ce)


def grad_at_quad(u: FieldCoeffs, qdeg: int):
    """Gradients of all components at quadrature points, (ncomp, nelem, nq, 2)."""
    g = u.space.phys_grads(qdeg)
    ce = u.values[:, u.space.elem_dofs]
    return np.einsum("eqbk,ceb->ceqk", g, ce)


def assemble_weighted_mass(space: FESpace, weight_q) -> sp.csr_matrix:
    """Mass matrix with a per-quadrature-point scalar weight (nelem, nq)."""
    qdeg = 3 * space.degree
    _, qw, phi, _ = space.tables(qdeg)
    _, _, _, det = space._geometry()
    local = np.einsum("q,eq,qa,qb->eab", qw, weight_q, phi, phi) * det[:, None, None]
    return _scatter(space, local)


def weighted_blocks(space, mhat: FieldCoeffs):
    """Weighted mass matrices, one per component of the weight field."""
    if mhat.ncomp != 3:
        raise ValueError("expected a 3-component field")
    vals = field_at_quad(mhat, 3 * space.degree)
    return [assemble_weighted_mass(space, vals[c]) for c in range(3)]


def cross_from_blocks(W) -> sp.csr_matrix:
    Z = None
    return sp.bmat(
        [[Z, -W[2], W[1]],
         [W[2], Z, -W[0]],
         [-W[1], W[0], Z]],
        format="csr",
    )


def assemble_cross(space: FESpace, mhat: FieldCoeffs) -> sp.csr_matrix:
    """Block matrix of the form (mhat x v, phi) acting on stacked vectors."""
    return cross_from_blocks(weighted_blocks(space, mhat))


def assemble_constraint(space: FESpace, mhat: FieldCoeffs) -> sp.csr_matrix:
    """Rows test (mhat . v, psi) for every scalar basis function psi."""
    return sp.hstack(weighted_blocks(space, mhat), format="csr")


def vector_mass(space: FESpace) -> sp.csr_matrix:
    """Block-diagonal mass matrix acting on stacked 3-component vectors."""
    if "vec_mass" not in space._cache:
        space._cache["vec_mass"] = sp.kron(
            sp.identity(3, format="csr"), space.mass(), format="csr")
    return space._cache["vec_mass"]


def vector_stiffness(space: FESpace) -> sp.csr_matrix:
    if "vec_stiff" not in space._cache:
        space._cache["vec_stiff"] = sp.kron(
            sp.identity(3, format="csr"), space.stiffness(), format="csr")
    return space._cache["vec_stiff"]


def assemble_load(space: FESpace, f, t=None, qdeg=None) -> np.ndarray:
    """Integrate an analytic (possibly vector) field against all basis functions.

    ``f`` maps an (n, 2) array of points to (n,) or (n, ncomp) values; a
    time argument is prepended when ``t`` is given.  Returns the stacked
    load vector, shape (ncomp * ndof,).
    """
    p = space.degree
    qdeg = 2 * p + 4 if qdeg is None else qdeg
    qp, qw, phi, _ = space.tables(qdeg)
    _, _, _, det = space._geometry()
    xq = space.quad_points_phys(qdeg)
    flat = xq.reshape(-1, 2)
    vals = f(flat) if t is None else f(t, flat)
    vals = np.asarray(vals, dtype=float)
    if vals.ndim == 1:
        vals = vals[:, None]
    ncomp = vals.shape[1]
    vq = vals.reshape(xq.shape[0], xq.shape[1], ncomp)
    local = np.einsum("q,eqc,qb->ceb", qw, vq, phi) * det[None, :, None]
    out = np.zeros((ncomp, space.ndof))
    for c in range(ncomp):
        np.add.at(out[c], space.elem_dofs.ravel(), local[c].ravel())
    return out.ravel()


def interpolate(f, space: FESpace, t=None) -> FieldCoeffs:
    """Nodal Lagrange interpolant of an analytic field."""
    X = space.dof_coords
    vals = f(X) if t is None else f(t, X)
    vals = np.asarray(vals, dtype=float)
    if vals.ndim == 1:
        vals = vals[None, :]
    else:
        vals = vals.T
    return FieldCoeffs(space, vals)


def norms(u: FieldCoeffs):
    """Quadrature-exact L2 norm and H1 seminorm of an FE function."""
    M = u.space.mass()
    K = u.space.stiffness()
    l2 = sum(float(u.values[c] @ (M @ u.values[c])) for c in range(u.ncomp))
    h1 = sum(float(u.values[c] @ (K @ u.values[c])) for c in range(u.ncomp))
    return {"l2": math.sqrt(max(l2, 0.0)), "h1_semi": math.sqrt(max(h1, 0.0))}


def l2_norm(u: FieldCoeffs):
    return norms(u)["l2"]


def make_transfer(source: FESpace, target: FESpace) -> sp.csr_matrix:
    """Interpolation operator evaluating source basis at target dof points."""
    elems, bary = source.mesh.locate(target.dof_coords)
    ref = bary[:, 1:3]
    nb = source.elem_dofs.shape[1]
    vals = np.empty((target.ndof, nb))
    for i in range(target.ndof):
        vals[i] = source.eval_basis(ref[i])[0]
    rows = np.repeat(np.arange(target.ndof), nb)
    cols = source.elem_dofs[elems].ravel()
    T = sp.coo_matrix((vals.ravel(), (rows, cols)), shape=(target.ndof, source.ndof))
    return T.tocsr()


def transfer(u: FieldCoeffs, target: FESpace) -> FieldCoeffs:
    """Nodal interpolation of an FE function onto another space."""
    if u.space is target:
        return u.copy()
    T = make_transfer(u.space, target)
    return FieldCoeffs(target, (T @ u.values.T).T)


def gradient_recovery(u: FieldCoeffs, component: int = 0) -> FieldCoeffs:
    """L2-project the broken gradient of one scalar component into the space."""
    space = u.space
    qdeg = 2 * space.degree
    _, qw, phi, _ = space.tables(qdeg)
    _, _, _, det = space._geometry()
    g = space.phys_grads(qdeg)
    ce = u.values[component][space.elem_dofs]
    du = np.einsum("eqbk,eb->eqk", g, ce)
    local = np.einsum("q,eqk,qb->keb", qw, du, phi) * det[None, :, None]
    rhs = np.zeros((2, space.ndof))
    for k in range(2):
        np.add.at(rhs[k], space.elem_dofs.ravel(), local[k].ravel())
    lu = space.mass_solver()
    rec = np.vstack([lu.solve(rhs[0]), lu.solve(rhs[1])])
    return FieldCoeffs(space, rec)


def h1_seminorm_error(u: FieldCoeffs, exact_grad, t=None, qdeg=None) -> float:
    """H1-seminorm distance between an FE field and an analytic gradient.

    ``exact_grad`` maps (n, 2) points (with optional leading time argument)
    to an (n, ncomp, 2) gradient array.
    """
    space = u.space
    qdeg = 2 * space.degree + 2 if qdeg is None else qdeg
    _, qw, _, _ = space.tables(qdeg)
    _, _, _, det = space._geometry()
    gh = grad_at_quad(u, qdeg)  # (ncomp, nelem, nq, 2)
    xq = space.quad_points_phys(qdeg)
    flat = xq.reshape(-1, 2)
    ge = exact_grad(flat) if t is None else exact_grad(t, flat)
    ge = np.asarray(ge, dtype=float).reshape(xq.shape[0], xq.shape[1], u.ncomp, 2)
    diff = gh - np.moveaxis(ge, 2, 0)
    per_elem = np.einsum("q,ceqk,ceqk->e", qw, diff, diff) * det
    return math.sqrt(max(float(np.sum(per_elem)), 0.0))


def integrate_norm2(space: FESpace, f, t=None, qdeg=None) -> float:
    """Squared L2 norm of an analytic (vector) field over the mesh."""
    qdeg = 2 * space.degree + 4 if qdeg is None else qdeg
    _, qw, _, _ = space.tables(qdeg)
    _, _, _, det = space._geometry()
    xq = space.quad_points_phys(qdeg)
    flat = xq.reshape(-1, 2)
    vals = f(flat) if t is None else f(t, flat)
    vals = np.asarray(vals, dtype=float)
    if vals.ndim == 1:
        vals = vals[:, None]
    vq = vals.reshape(xq.shape[0], xq.shape[1], -1)
    return float(np.einsum("q,eqc,eqc,e->", qw, vq, vq, det))
