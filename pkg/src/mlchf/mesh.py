"""Conforming tetrahedral meshes of a box with newest-vertex bisection.

The initial mesh splits every hexahedral cell into the six Kuhn simplices
sharing the cell's main diagonal. Every tetrahedron carries an ordered vertex
tuple ``(x0, x1, x2, x3)`` and a tag ``k``; its refinement edge is
``(x0, xk)``. With this labelling the mesh is compatibly divisible, so the
iterative closure below always ends in a conforming mesh and only finitely
many similarity classes of tetrahedra ever appear.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Optional

import numpy as np

__all__ = [
    "Mesh",
    "build_box_mesh",
    "refine",
    "uniform_refine",
    "is_conforming",
    "shape_ratios",
    "write_mesh",
]

_EDGE_SHIFT = np.int64(1) << np.int64(31)
_FACE_SHIFT = np.int64(1) << np.int64(21)

# local vertex pairs of the six edges of a tetrahedron
_LOCAL_EDGES = np.array([[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]])
# face i is opposite local vertex i
_LOCAL_FACES = np.array([[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]])


def _edge_keys(a, b):
    lo = np.minimum(a, b).astype(np.int64)
    hi = np.maximum(a, b).astype(np.int64)
    return lo * _EDGE_SHIFT + hi


def _signed_volumes(vertices, tets):
    p = vertices[tets]
    d = p[:, 1:] - p[:, :1]
    return np.einsum("ij,ij->i", d[:, 0], np.cross(d[:, 1], d[:, 2])) / 6.0


@dataclass(eq=False)
class Mesh:
    """Immutable conforming tetrahedral mesh.

    Attributes
    ----------
    vertices : (nv, 3) array
        Coordinates in Bohr. Vertex ids are stable under refinement: a
        refined mesh keeps every parent vertex at the same index and appends
        the new edge midpoints.
    tets : (nt, 4) int array
        Vertex ids of each tetrahedron, positively oriented.
    bounds : (2, 3) array
        Lower and upper corner of the box.
    generation : int
        Number of refinement calls between this mesh and the initial one.
    parent : (nt,) int array or None
        Index of the containing tetrahedron of ``previous``.
    previous : Mesh or None
        The mesh this one was refined from.
    midpoint_parents : (n_new, 2) int array
        Edge endpoints of every vertex appended by the last refinement, in
        creation order.
    midpoint_rounds : tuple of int
        How many of those vertices each closure sweep created; a vertex only
        depends on vertices created in earlier sweeps.
    shape_bound : float
        Upper bound of circumradius/inradius guaranteed by the bisection
        scheme for every descendant of the initial mesh.
    """

    vertices: np.ndarray
    tets: np.ndarray
    bounds: np.ndarray
    order: np.ndarray = field(repr=False)
    tags: np.ndarray = field(repr=False)
    generation: int = 0
    parent: Optional[np.ndarray] = field(default=None, repr=False)
    previous: Optional["Mesh"] = field(default=None, repr=False)
    midpoint_parents: np.ndarray = field(
        default_factory=lambda: np.zeros((0, 2), dtype=np.int64), repr=False
    )
    midpoint_rounds: tuple = ()
    shape_bound: float = np.inf

    def __post_init__(self):
        for name in ("vertices", "tets", "order", "tags", "bounds"):
            getattr(self, name).setflags(write=False)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_tets(self) -> int:
        return self.tets.shape[0]

    @cached_property
    def volumes(self) -> np.ndarray:
        return _signed_volumes(self.vertices, self.tets)

    @cached_property
    def domain_volume(self) -> float:
        return float(np.prod(self.bounds[1] - self.bounds[0]))

    @cached_property
    def tet_diameters(self) -> np.ndarray:
        """Longest edge of each tetrahedron (h_T)."""
        p = self.vertices[self.tets]
        e = p[:, _LOCAL_EDGES[:, 1]] - p[:, _LOCAL_EDGES[:, 0]]
        return np.sqrt((e**2).sum(-1)).max(axis=1)

    @cached_property
    def edges(self) -> np.ndarray:
        keys = np.unique(self._tet_edge_keys)
        return np.stack([keys // _EDGE_SHIFT, keys % _EDGE_SHIFT], axis=1)

    @cached_property
    def _tet_edge_keys(self) -> np.ndarray:
        t = self.tets
        return _edge_keys(t[:, _LOCAL_EDGES[:, 0]], t[:, _LOCAL_EDGES[:, 1]])

    @cached_property
    def _face_data(self):
        t = self.tets
        nt = t.shape[0]
        local = np.sort(t[:, _LOCAL_FACES], axis=2).reshape(-1, 3).astype(np.int64)
        keys = (local[:, 0] * _FACE_SHIFT + local[:, 1]) * _FACE_SHIFT + local[:, 2]
        owner = np.repeat(np.arange(nt), 4)
        opposite = np.tile(np.arange(4), nt)
        order = np.argsort(keys, kind="stable")
        keys, owner, opposite, local = keys[order], owner[order], opposite[order], local[order]
        uniq, start, counts = np.unique(keys, return_index=True, return_counts=True)
        if counts.max(initial=0) > 2:
            raise ValueError("face shared by more than two tetrahedra")
        interior = counts == 2
        i0 = start[interior]
        faces = local[i0]
        pair = np.stack([owner[i0], owner[i0 + 1]], axis=1)
        opp = np.stack([opposite[i0], opposite[i0 + 1]], axis=1)
        swap = pair[:, 0] > pair[:, 1]
        pair[swap] = pair[swap][:, ::-1]
        opp[swap] = opp[swap][:, ::-1]
        b0 = start[~interior]
        return faces, pair, opp, local[b0], owner[b0]

    @property
    def interior_faces(self) -> np.ndarray:
        return self._face_data[0]

    @property
    def face_tets(self) -> np.ndarray:
        """``(nf, 2)`` adjacent tetrahedra; column 0 is the ``+`` side (lower id)."""
        return self._face_data[1]

    @property
    def boundary_faces(self) -> np.ndarray:
        return self._face_data[3]

    @cached_property
    def face_normals(self) -> np.ndarray:
        """Unit normal of every interior face, outward from the ``+`` tet."""
        faces = self.interior_faces
        p = self.vertices[faces]
        n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        plus = self.face_tets[:, 0]
        opp_vertex = self.tets[plus, self._face_data[2][:, 0]]
        inward = self.vertices[opp_vertex] - p[:, 0]
        flip = np.einsum("ij,ij->i", n, inward) > 0
        n[flip] *= -1.0
        return n

    @cached_property
    def face_areas(self) -> np.ndarray:
        p = self.vertices[self.interior_faces]
        return 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)

    @cached_property
    def face_diameters(self) -> np.ndarray:
        p = self.vertices[self.interior_faces]
        d = [np.linalg.norm(p[:, a] - p[:, b], axis=1) for a, b in ((0, 1), (0, 2), (1, 2))]
        return np.max(d, axis=0)

    @cached_property
    def boundary_vertex_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_vertices, dtype=bool)
        mask[self.boundary_faces.ravel()] = True
        return mask

    @cached_property
    def _centroid_tree(self):
        from scipy.spatial import cKDTree

        return cKDTree(self.vertices[self.tets].mean(axis=1))

    def locate(self, points, k: int = 32) -> tuple[np.ndarray, np.ndarray]:
        """Containing tetrahedron and barycentric coordinates of each point.

        Returns ``(tet_ids, bary)``; points outside the box get id ``-1``.
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        k = min(k, self.n_tets)
        _, cand = self._centroid_tree.query(points, k=k)
        cand = cand.reshape(len(points), k)
        ids = np.full(len(points), -1, dtype=np.int64)
        bary = np.zeros((len(points), 4))
        for j, x in enumerate(points):
            for tid in cand[j]:
                lam = self._barycentric(tid, x)
                if lam.min() >= -1e-12:
                    ids[j], bary[j] = tid, lam
                    break
            else:
                lam_all = self._barycentric_all(x)
                hit = np.flatnonzero(lam_all.min(axis=1) >= -1e-12)
                if hit.size:
                    ids[j], bary[j] = hit[0], lam_all[hit[0]]
        return ids, bary

    def _barycentric(self, tid, x):
        p = self.vertices[self.tets[tid]]
        lam123 = np.linalg.solve((p[1:] - p[0]).T, x - p[0])
        return np.concatenate([[1.0 - lam123.sum()], lam123])

    def _barycentric_all(self, x):
        p = self.vertices[self.tets]
        mats = np.transpose(p[:, 1:] - p[:, :1], (0, 2, 1))
        lam123 = np.linalg.solve(mats, (x - p[:, 0])[..., None])[..., 0]
        return np.concatenate([1.0 - lam123.sum(1, keepdims=True), lam123], axis=1)

    def ancestors(self, other: "Mesh") -> np.ndarray:
        """Index in ``other`` of the tetrahedron containing each tet of ``self``.

        ``other`` must be ``self`` or one of its ``previous`` meshes.
        """
        idx = np.arange(self.n_tets)
        m = self
        while m is not other:
            if m.previous is None:
                raise ValueError("meshes are not nested")
            idx = m.parent[idx]
            m = m.previous
        return idx

    def is_descendant_of(self, other: "Mesh") -> bool:
        m = self
        while m is not None:
            if m is other:
                return True
            m = m.previous
        return False


def _kuhn_cells(divisions):
    nx, ny, nz = divisions
    perms = [(0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)]
    stride = np.array([1, nx + 1, (nx + 1) * (ny + 1)])
    ii, jj, kk = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    base = (ii * stride[0] + jj * stride[1] + kk * stride[2]).ravel()
    tets = []
    for perm in perms:
        v = [base]
        cur = base
        for ax in perm:
            cur = cur + stride[ax]
            v.append(cur)
        tets.append(np.stack(v, axis=1))
    # cell-major ordering: the six simplices of one cell are consecutive
    return np.stack(tets, axis=1).reshape(-1, 4)


def build_box_mesh(bounds, divisions) -> Mesh:
    """Kuhn triangulation of an axis-aligned box.

    Parameters
    ----------
    bounds : array_like, shape (2, 3)
        Lower and upper corners.
    divisions : sequence of 3 ints
        Cells per axis; each cell is split into six tetrahedra.
    """
    bounds = np.asarray(bounds, dtype=float).reshape(2, 3)
    divisions = tuple(int(d) for d in divisions)
    if len(divisions) != 3 or min(divisions) < 1:
        raise ValueError(f"divisions must be three positive integers, got {divisions}")
    if np.any(bounds[1] <= bounds[0]):
        raise ValueError("box bounds must satisfy lower < upper on every axis")
    axes = [np.linspace(bounds[0, a], bounds[1, a], divisions[a] + 1) for a in range(3)]
    x, y, z = np.meshgrid(*axes, indexing="ij")
    vertices = np.stack([x.ravel(order="F"), y.ravel(order="F"), z.ravel(order="F")], axis=1)
    order = _kuhn_cells(divisions)
    tags = np.full(order.shape[0], 3, dtype=np.int8)
    mesh = _make_mesh(vertices, order, tags, bounds)
    mesh.shape_bound = _shape_bound(mesh)
    return mesh


def _orient(vertices, order):
    tets = order.copy()
    neg = _signed_volumes(vertices, tets) < 0
    tets[neg, 2], tets[neg, 3] = order[neg, 3], order[neg, 2]
    return tets


def _make_mesh(vertices, order, tags, bounds, **kw) -> Mesh:
    order = np.ascontiguousarray(order, dtype=np.int64)
    return Mesh(
        vertices=np.ascontiguousarray(vertices),
        tets=_orient(vertices, order),
        bounds=bounds,
        order=order,
        tags=np.ascontiguousarray(tags, dtype=np.int8),
        **kw,
    )


def shape_ratios(mesh: Mesh) -> np.ndarray:
    """Circumradius over inradius for every tetrahedron (3 for a regular one)."""
    p = mesh.vertices[mesh.tets]
    vol = np.abs(mesh.volumes)
    area = np.zeros(mesh.n_tets)
    for f in _LOCAL_FACES:
        q = p[:, f]
        area += 0.5 * np.linalg.norm(np.cross(q[:, 1] - q[:, 0], q[:, 2] - q[:, 0]), axis=1)
    inradius = 3.0 * vol / area
    a = p[:, 1:] - p[:, :1]
    rhs = 0.5 * (a**2).sum(-1)
    centre = np.linalg.solve(a, rhs[..., None])[..., 0]
    circumradius = np.linalg.norm(centre, axis=1)
    return circumradius / inradius


def _shape_bound(mesh: Mesh) -> float:
    # Kuhn simplices return to their own similarity class after three bisections.
    sample = np.arange(min(6, mesh.n_tets))
    order, tags, verts = mesh.order[sample], mesh.tags[sample], mesh.vertices
    worst = 0.0
    for _ in range(4):
        m = _make_mesh(verts, order, tags, mesh.bounds)
        worst = max(worst, float(shape_ratios(m).max()))
        order, tags, verts, _, _ = _bisect_round(order, tags, verts, np.ones(len(order), bool), {})
    return worst * (1.0 + 1e-9)


def _bisect_round(order, tags, vertices, sel, midpoints, record=None):
    """Bisect the selected simplices once; returns new arrays.

    ``midpoints`` maps edge keys to vertex ids and is updated in place.
    """
    idx = np.flatnonzero(sel)
    if idx.size == 0:
        return order, tags, vertices, np.arange(len(order)), np.zeros((0, 2), np.int64)
    o = order[idx]
    k = tags[idx].astype(np.int64)
    a = o[:, 0]
    b = o[np.arange(len(idx)), k]
    keys = _edge_keys(a, b)
    uniq, first, inv = np.unique(keys, return_index=True, return_inverse=True)
    mid_ids = np.empty(len(uniq), dtype=np.int64)
    new_pairs = []
    nv = len(vertices)
    for u, (key, f) in enumerate(zip(uniq.tolist(), first.tolist())):
        got = midpoints.get(key)
        if got is None:
            got = nv + len(new_pairs)
            midpoints[key] = got
            new_pairs.append((a[f], b[f]))
        mid_ids[u] = got
    z = mid_ids[inv]
    if new_pairs:
        new_pairs = np.asarray(new_pairs, dtype=np.int64)
        vertices = np.concatenate([vertices, 0.5 * (vertices[new_pairs[:, 0]] + vertices[new_pairs[:, 1]])])
    else:
        new_pairs = np.zeros((0, 2), np.int64)

    c1 = o.copy()
    c2 = np.empty_like(o)
    rows = np.arange(len(idx))
    c1[rows, k] = z
    # second child: (x1, ..., xk, z, x_{k+1}, ..., x3)
    for kk in (1, 2, 3):
        m = k == kk
        if not m.any():
            continue
        head = o[m][:, 1 : kk + 1]
        tail = o[m][:, kk + 1 :]
        c2[m] = np.concatenate([head, z[m][:, None], tail], axis=1)
    newtag = np.where(k > 1, k - 1, 3).astype(np.int8)

    keep = np.flatnonzero(~sel)
    order = np.concatenate([order[keep], c1, c2])
    tags = np.concatenate([tags[keep], newtag, newtag])
    origin = np.concatenate([keep, idx, idx])
    if record is not None:
        record.append((idx, len(keep)))
    return order, tags, vertices, origin, new_pairs


def _bisect_closure(mesh: Mesh, marked: np.ndarray, history: Optional[list] = None):
    """Bisect marked tets and close hanging nodes; returns leaf arrays."""
    order, tags, verts = mesh.order, mesh.tags, mesh.vertices
    ancestor = np.arange(mesh.n_tets)
    sel = np.zeros(mesh.n_tets, dtype=bool)
    sel[marked] = True
    midpoints: dict = {}
    parents = []
    split_keys = np.zeros(0, dtype=np.int64)
    while sel.any():
        rec = [] if history is not None else None
        prev_order = order
        order, tags, verts, origin, new_pairs = _bisect_round(order, tags, verts, sel, midpoints, rec)
        if history is not None:
            idx, n_keep = rec[0]
            history.append(
                dict(parents=prev_order[idx], ancestor=ancestor[idx], n_keep=n_keep, n_split=len(idx))
            )
        ancestor = ancestor[origin]
        if len(new_pairs):
            parents.append(new_pairs)
        split_keys = np.fromiter(midpoints.keys(), dtype=np.int64, count=len(midpoints))
        ek = _edge_keys(order[:, _LOCAL_EDGES[:, 0]], order[:, _LOCAL_EDGES[:, 1]])
        sel = np.isin(ek, split_keys).any(axis=1)
    new_parents = np.concatenate(parents) if parents else np.zeros((0, 2), np.int64)
    return order, tags, verts, ancestor, new_parents, tuple(len(p) for p in parents)


def refine(mesh: Mesh, marked: Iterable[int]) -> Mesh:
    """Bisect every marked tetrahedron at least once and restore conformity.

    Returns a new mesh whose ``previous`` is ``mesh``. An empty marking
    returns a copy with identical vertices and tetrahedra.
    """
    marked = np.unique(np.asarray(list(marked) if not isinstance(marked, np.ndarray) else marked, dtype=np.int64))
    if marked.size and (marked.min() < 0 or marked.max() >= mesh.n_tets):
        raise IndexError("marked tetrahedron id out of range")
    order, tags, verts, ancestor, new_parents, rounds = _bisect_closure(mesh, marked)
    return _make_mesh(
        verts,
        order,
        tags,
        mesh.bounds,
        generation=mesh.generation + 1,
        parent=ancestor,
        previous=mesh,
        midpoint_parents=new_parents,
        midpoint_rounds=rounds,
        shape_bound=mesh.shape_bound,
    )


def uniform_refine(mesh: Mesh, times: int = 1) -> Mesh:
    """Bisect every tetrahedron once, ``times`` times over."""
    for _ in range(times):
        mesh = refine(mesh, np.arange(mesh.n_tets))
    return mesh


def is_conforming(mesh: Mesh) -> bool:
    """Face matching check: every face is shared by at most two tets, every
    boundary face lies on the box surface, and no vertex sits on the interior
    of an edge (hanging node)."""
    try:
        faces, pair, _, bfaces, _ = mesh._face_data
    except ValueError:
        return False
    if np.any(mesh.volumes <= 0):
        return False
    p = mesh.vertices[bfaces]
    lo, hi = mesh.bounds
    tol = 1e-10 * float(np.max(hi - lo))
    on_plane = np.zeros(len(bfaces), dtype=bool)
    for ax in range(3):
        for val in (lo[ax], hi[ax]):
            on_plane |= np.all(np.abs(p[:, :, ax] - val) < tol, axis=1)
    if not on_plane.all():
        return False
    # volume-weighted check that interior faces tile: sum of boundary areas
    area = 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1).sum()
    ext = hi - lo
    box_area = 2.0 * (ext[0] * ext[1] + ext[1] * ext[2] + ext[0] * ext[2])
    return bool(abs(area - box_area) <= 1e-9 * box_area)


def write_mesh(mesh: Mesh, path) -> None:
    """Plain-text dump: a ``vertices N`` block of ``x y z`` rows followed by a
    ``tets M`` block of four 0-based vertex ids per row."""
    with open(path, "w") as fh:
        fh.write(f"vertices {mesh.n_vertices}\n")
        np.savetxt(fh, mesh.vertices, fmt="%.17g")
        fh.write(f"tets {mesh.n_tets}\n")
        np.savetxt(fh, mesh.tets, fmt="%d")
