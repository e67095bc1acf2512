"""Conforming 2D triangulations with newest-vertex bisection and coarsening.

Element storage convention: a triangle is a vertex triple ``(v0, v1, v2)``
whose refinement edge is ``(v0, v1)`` and whose peak (newest vertex) is
``v2``.  Bisection inserts the midpoint ``z`` of the refinement edge and
produces the children ``(v2, v0, z)`` and ``(v1, v2, z)``; both have peak
``z`` and their refinement edges are the two remaining parent edges, which
is exactly the newest-vertex rule.  The bisection history forms a binary
forest (one tree per root element); active elements are its leaves, and
coarsening merges sibling leaf pairs back into their parent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Literal, Optional

import numpy as np

from .errors import GeometryError, InvalidDomainError

_BARY_TOL = 1e-12


@dataclass
class ElementMark:
    """Marking decision for one active element."""

    element: int
    action: Literal["refine", "coarsen", "keep"]


@dataclass
class _Node:
    verts: tuple
    parent: int
    children: Optional[tuple]
    root: int
    generation: int
    alive: bool = True


class Mesh:
    """Triangulation of a polygonal domain backed by a bisection forest."""

    def __init__(self, vertices, triangles, rect_info=None):
        self.vertices = np.asarray(vertices, dtype=float).copy()
        self._nodes = [
            _Node(tuple(int(v) for v in tri), -1, None, i, 0)
            for i, tri in enumerate(triangles)
        ]
        self._n_root_vertices = self.vertices.shape[0]
        self._rect = rect_info
        self._active_cache = None
        for tri in self._nodes:
            if self._signed_area(tri.verts) <= 0.0:
                raise InvalidDomainError(
                    f"root element {tri.verts} has nonpositive area"
                )

    # -- basic queries ----------------------------------------------------

    def _signed_area(self, verts):
        a, b, c = (self.vertices[v] for v in verts)
        return 0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))

    @property
    def _active(self):
        if self._active_cache is None:
            self._active_cache = [
                i for i, n in enumerate(self._nodes) if n.alive and n.children is None
            ]
        return self._active_cache

    @property
    def n_elements(self):
        return len(self._active)

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def elements(self):
        """Active elements as an (n, 3) vertex-index array."""
        return np.array([self._nodes[i].verts for i in self._active], dtype=np.int64)

    def element_node(self, elem):
        return self._active[elem]

    def generations(self):
        return np.array([self._nodes[i].generation for i in self._active])

    def areas(self):
        tri = self.elements
        a = self.vertices[tri[:, 0]]
        b = self.vertices[tri[:, 1]]
        c = self.vertices[tri[:, 2]]
        return 0.5 * ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
                      - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))

    @property
    def boundary_edges(self):
        """Edges incident to exactly one active element, as sorted pairs."""
        count = {}
        for tri in self.elements:
            for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
                key = (min(a, b), max(a, b))
                count[key] = count.get(key, 0) + 1
        return {e for e, c in count.items() if c == 1}

    def min_angle(self):
        tri = self.elements
        pts = self.vertices
        worst = math.pi
        for t in tri:
            for i in range(3):
                a, b, c = pts[t[i]], pts[t[(i + 1) % 3]], pts[t[(i + 2) % 3]]
                u, v = b - a, c - a
                cosang = np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v))
                worst = min(worst, math.acos(np.clip(cosang, -1.0, 1.0)))
        return worst

    def check_conformity(self):
        """Full scan: every edge shared by <=2 elements, no hanging nodes.

        Returns the number of violations found (0 for a conforming mesh).
        """
        tri = self.elements
        bad = 0
        count = {}
        for t in tri:
            for a, b in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0])):
                key = (min(a, b), max(a, b))
                count[key] = count.get(key, 0) + 1
        bad += sum(1 for c in count.values() if c > 2)
        # hanging node: a mesh vertex strictly inside some element edge
        used = np.unique(tri)
        pts = self.vertices
        for a, b in count:
            pa, pb = pts[a], pts[b]
            d = pb - pa
            L2 = d @ d
            for v in used:
                if v == a or v == b:
                    continue
                t_par = ((pts[v] - pa) @ d) / L2
                if 1e-10 < t_par < 1 - 1e-10:
                    off = pts[v] - (pa + t_par * d)
                    if off @ off < 1e-20 * L2:
                        bad += 1
        return bad

    def same_topology(self, other):
        if self.n_vertices != other.n_vertices:
            return False
        if not np.allclose(self.vertices, other.vertices, atol=1e-14):
            return False
        mine = {tuple(t) for t in self.elements}
        theirs = {tuple(t) for t in other.elements}
        return mine == theirs

    # -- refinement --------------------------------------------------------

    def _copy(self):
        m = Mesh.__new__(Mesh)
        m.vertices = self.vertices.copy()
        m._nodes = [
            _Node(n.verts, n.parent, n.children, n.root, n.generation, n.alive)
            for n in self._nodes
        ]
        m._n_root_vertices = self._n_root_vertices
        m._rect = self._rect
        m._active_cache = None
        return m

    @staticmethod
    def _edges_of(verts):
        v0, v1, v2 = verts
        e_ref = (min(v0, v1), max(v0, v1))
        e1 = (min(v1, v2), max(v1, v2))
        e2 = (min(v2, v0), max(v2, v0))
        return e_ref, e1, e2

    def bisect(self, marked: Iterable[int], generations: int = 1) -> "Mesh":
        """Bisect the marked active elements ``generations`` times.

        Extra elements are bisected as needed for conformity closure.
        Returns a new mesh; the receiver is left untouched.
        """
        marked = sorted(set(int(e) for e in marked))
        if any(e < 0 or e >= self.n_elements for e in marked):
            raise IndexError("marked element id out of range")
        if generations < 1:
            raise ValueError("generations must be >= 1")
        out = self._copy()
        if not marked:
            return out
        target_nodes = [self._active[e] for e in marked]
        for _ in range(generations):
            leaves = set()
            for nid in target_nodes:
                leaves.update(out._leaf_descendants(nid))
            out._bisection_pass(sorted(leaves))
        return out

    def _leaf_descendants(self, nid):
        node = self._nodes[nid]
        if node.children is None:
            return [nid]
        found = []
        stack = list(node.children)
        while stack:
            k = stack.pop()
            kn = self._nodes[k]
            if kn.children is None:
                found.append(k)
            else:
                stack.extend(kn.children)
        return found

    def _bisection_pass(self, marked_nodes):
        nodes = self._nodes
        marked_edges = set()
        for nid in marked_nodes:
            marked_edges.add(self._edges_of(nodes[nid].verts)[0])
        # conformity closure on refinement edges
        active = self._active
        changed = True
        while changed:
            changed = False
            for nid in active:
                edges = self._edges_of(nodes[nid].verts)
                if edges[0] in marked_edges:
                    continue
                if edges[1] in marked_edges or edges[2] in marked_edges:
                    marked_edges.add(edges[0])
                    changed = True
        midpoint = {}
        new_pts = []

        def get_mid(edge):
            if edge not in midpoint:
                vid = self.vertices.shape[0] + len(new_pts)
                new_pts.append(0.5 * (self.vertices[edge[0]] + self.vertices[edge[1]]))
                midpoint[edge] = vid
            return midpoint[edge]

        def split(nid):
            node = nodes[nid]
            v0, v1, v2 = node.verts
            z = get_mid((min(v0, v1), max(v0, v1)))
            c1 = _Node((v2, v0, z), nid, None, node.root, node.generation + 1)
            c2 = _Node((v1, v2, z), nid, None, node.root, node.generation + 1)
            nodes.append(c1)
            nodes.append(c2)
            node.children = (len(nodes) - 2, len(nodes) - 1)
            return node.children

        for nid in active:
            edges = self._edges_of(nodes[nid].verts)
            if not any(e in marked_edges for e in edges):
                continue
            kids = split(nid)
            # each child's refinement edge is one of the remaining parent edges
            for kid in kids:
                kid_ref = self._edges_of(nodes[kid].verts)[0]
                if kid_ref in marked_edges:
                    split(kid)
        if new_pts:
            self.vertices = np.vstack([self.vertices, np.array(new_pts)])
        self._active_cache = None

    # -- coarsening ---------------------------------------------------------

    def coarsen(self, marked: Iterable[int]) -> "Mesh":
        """Merge marked sibling leaf pairs where conformity allows it.

        A bisection midpoint ``z`` can be removed only when every active
        element touching ``z`` is a marked leaf with peak ``z``; then all
        sibling pairs around ``z`` collapse into their parents.  Sweeps
        repeat until no further merge applies; a parent formed by merging
        two marked leaves counts as marked itself, so one call undoes a
        matching ``bisect`` call completely.  Root elements never merge.
        """
        marked = set(int(e) for e in marked)
        if any(e < 0 or e >= self.n_elements for e in marked):
            raise IndexError("marked element id out of range")
        out = self._copy()
        marked_nodes = {self._active[e] for e in marked}
        nodes = out._nodes
        changed = True
        while changed:
            changed = False
            star = {}
            for nid in out._active:
                for v in nodes[nid].verts:
                    star.setdefault(v, []).append(nid)
            for z in sorted(star):
                if z < out._n_root_vertices:
                    continue
                group = star[z]
                ok = all(
                    nid in marked_nodes and nodes[nid].verts[2] == z
                    and nodes[nid].children is None
                    for nid in group
                )
                if not ok:
                    continue
                parents = {}
                for nid in group:
                    parents.setdefault(nodes[nid].parent, []).append(nid)
                if any(p < 0 or len(kids) != 2 for p, kids in parents.items()):
                    continue
                for p, kids in parents.items():
                    for k in kids:
                        nodes[k].alive = False
                        marked_nodes.discard(k)
                    nodes[p].children = None
                    marked_nodes.add(p)
                out._active_cache = None
                changed = True
        out._compact()
        return out

    def _compact(self):
        """Drop dead nodes and orphaned vertices, keeping stable order."""
        alive_ids = [i for i, n in enumerate(self._nodes) if n.alive]
        node_map = {old: new for new, old in enumerate(alive_ids)}
        new_nodes = []
        for old in alive_ids:
            n = self._nodes[old]
            children = None
            if n.children is not None:
                children = tuple(node_map[c] for c in n.children)
            parent = node_map[n.parent] if n.parent >= 0 else -1
            new_nodes.append(_Node(n.verts, parent, children, n.root, n.generation))
        self._nodes = new_nodes
        used = sorted({v for n in new_nodes for v in n.verts})
        if len(used) != self.vertices.shape[0]:
            vert_map = {old: new for new, old in enumerate(used)}
            self.vertices = self.vertices[used]
            for n in self._nodes:
                n.verts = tuple(vert_map[v] for v in n.verts)
        self._active_cache = None

    # -- point location ------------------------------------------------------

    def _bary(self, verts, x, y):
        (ax, ay), (bx, by), (cx, cy) = (self.vertices[v] for v in verts)
        det = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        l1 = ((x - ax) * (cy - ay) - (y - ay) * (cx - ax)) / det
        l2 = ((bx - ax) * (y - ay) - (by - ay) * (x - ax)) / det
        return 1.0 - l1 - l2, l1, l2

    def _root_candidates(self, x, y):
        if self._rect is not None:
            x0, y0, dx, dy, nx, ny = self._rect
            ix = min(nx - 1, max(0, int((x - x0) / dx)))
            iy = min(ny - 1, max(0, int((y - y0) / dy)))
            base = 2 * (iy * nx + ix)
            cand = [base, base + 1]
            # guard against points sitting on a cell border
            for jx in (ix - 1, ix, ix + 1):
                for jy in (iy - 1, iy, iy + 1):
                    if 0 <= jx < nx and 0 <= jy < ny and (jx, jy) != (ix, iy):
                        b = 2 * (jy * nx + jx)
                        cand.extend((b, b + 1))
            return cand
        return [i for i, n in enumerate(self._nodes) if n.parent == -1]

    def locate(self, points):
        """Find the active element and barycentric coordinates per point."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        node_of = {nid: e for e, nid in enumerate(self._active)}
        elems = np.empty(points.shape[0], dtype=np.int64)
        bary = np.empty((points.shape[0], 3))
        nodes = self._nodes
        for i, (x, y) in enumerate(points):
            nid = None
            best = (-math.inf, None, None)
            for cand in self._root_candidates(x, y):
                lam = self._bary(nodes[cand].verts, x, y)
                m = min(lam)
                if m > best[0]:
                    best = (m, cand, lam)
                if m >= -_BARY_TOL:
                    nid = cand
                    break
            if nid is None:
                if best[0] < -1e-9:
                    raise GeometryError(f"point ({x}, {y}) outside the mesh")
                nid = best[1]
            while nodes[nid].children is not None:
                picked = None
                fallback = (-math.inf, None)
                for kid in nodes[nid].children:
                    lam = self._bary(nodes[kid].verts, x, y)
                    m = min(lam)
                    if m > fallback[0]:
                        fallback = (m, kid)
                    if m >= -_BARY_TOL:
                        picked = kid
                        break
                nid = picked if picked is not None else fallback[1]
            elems[i] = node_of[nid]
            bary[i] = self._bary(nodes[nid].verts, x, y)
        return elems, bary


def create_rect_mesh(bounds, nx: int, ny: int) -> Mesh:
    """Triangulate an axis-aligned rectangle with 2*nx*ny triangles.

    Each grid cell is split along its diagonal; the refinement edge of
    every root triangle is its longest edge (the diagonal), which makes
    the first bisection generation reproduce the criss-cross pattern.
    """
    (xmin, ymin), (xmax, ymax) = bounds
    if not (xmax > xmin and ymax > ymin):
        raise InvalidDomainError(f"degenerate rectangle {bounds}")
    if nx < 1 or ny < 1:
        raise InvalidDomainError("nx and ny must be >= 1")
    xs = np.linspace(xmin, xmax, nx + 1)
    ys = np.linspace(ymin, ymax, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    def vid(ix, iy):
        return iy * (nx + 1) + ix

    triangles = []
    for iy in range(ny):
        for ix in range(nx):
            ll, lr = vid(ix, iy), vid(ix + 1, iy)
            ul, ur = vid(ix, iy + 1), vid(ix + 1, iy + 1)
            # diagonal ll-ur is the refinement edge of both triangles
            triangles.append(_orient_root((ur, ll, lr), vertices))
            triangles.append(_orient_root((ll, ur, ul), vertices))
    rect = (xmin, ymin, (xmax - xmin) / nx, (ymax - ymin) / ny, nx, ny)
    return Mesh(vertices, triangles, rect_info=rect)


def _orient_root(tri, vertices):
    """Rotate a CCW triple so its longest edge sits in slots (0, 1).

    Ties are broken by the lowest opposite-vertex index.
    """
    a, b, c = tri
    pts = vertices
    best = None
    for v0, v1, v2 in ((a, b, c), (b, c, a), (c, a, b)):
        length = float(np.sum((pts[v1] - pts[v0]) ** 2))
        key = (-length, v2)
        if best is None or key < best[0]:
            best = (key, (v0, v1, v2))
    return best[1]


def bisect(mesh: Mesh, marked, generations: int = 1) -> Mesh:
    return mesh.bisect(marked, generations)


def coarsen(mesh: Mesh, marked) -> Mesh:
    return mesh.coarsen(marked)
