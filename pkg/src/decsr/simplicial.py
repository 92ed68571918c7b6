"""Simplicial complexes of dimension 1 and 2 with circumcentric duals.

A complex stores its node coordinates, the sorted vertex tables of all
simplices, signed incidence (boundary) matrices, circumcenters and the
unsigned primal / circumcentric dual volumes.  Boundary-adjacent dual
cells are truncated at the domain boundary (no mirroring).

Top-dimensional simplices are oriented positively (counter-clockwise in
2D, left-to-right in 1D); lower simplices carry the orientation of their
sorted vertex tuple.  All arrays are frozen after construction so a
complex can be shared read-only between parallel workers.
"""

from __future__ import annotations

import math
from itertools import combinations

import numpy as np
import scipy.sparse as sp
from scipy.spatial import Delaunay


class MeshError(ValueError):
    """Invalid mesh input: degenerate or duplicated simplices, bad indices."""


class NonDelaunayError(MeshError):
    """Triangulation violates the empty-circumcircle property."""


def _freeze(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


class SimplicialComplex:
    """Geometry/topology container for a 1- or 2-dimensional complex.

    Attributes:
        dim: complex dimension n (1 or 2); equals the embedding dimension.
        node_coords: (n0, dim) float array.
        simplices: dict p -> (n_p, p+1) int array of sorted vertex tuples.
        boundary: dict p -> signed incidence matrix (n_{p-1} x n_p), CSR float.
        boundary_int: same matrices with integer entries (for exact products).
        orientation: (n_n,) array of +-1 relating the sorted top tuple to the
            positively oriented simplex.
        circumcenters: dict p -> (n_p, dim) array, p in 1..n.
        primal_volume: dict p -> (n_p,) unsigned p-volumes (|sigma_0| := 1).
        dual_volume: dict p -> (n_p,) signed circumcentric dual volumes,
            truncated at the boundary.
    """

    def __init__(self, node_coords, top_simplices, allow_non_delaunay: bool = False):
        coords = np.asarray(node_coords, dtype=np.float64)
        if coords.ndim == 1:
            coords = coords[:, None]
        tops = np.asarray(top_simplices, dtype=np.int64)
        if tops.ndim != 2 or tops.shape[1] not in (2, 3):
            raise MeshError("top simplices must be pairs (1D) or triples (2D)")
        n = tops.shape[1] - 1
        if coords.shape[1] != n:
            raise MeshError(
                f"embedding dimension {coords.shape[1]} does not match "
                f"simplex dimension {n}")
        if tops.min(initial=0) < 0 or tops.max(initial=-1) >= len(coords):
            raise MeshError("simplex vertex index out of range")

        self.dim = n
        self.node_coords = _freeze(coords)
        self.num_nodes = len(coords)

        tops_sorted = np.sort(tops, axis=1)
        seen = set()
        for i, row in enumerate(map(tuple, tops_sorted)):
            if row in seen:
                raise MeshError(f"duplicate top simplex at index {i}: {row}")
            if len(set(row)) != len(row):
                raise MeshError(f"degenerate simplex at index {i}: {row}")
            seen.add(row)

        self.simplices: dict[int, np.ndarray] = {
            0: np.arange(self.num_nodes, dtype=np.int64)[:, None]}
        if n == 2:
            edges = sorted({tuple(sorted(e))
                            for t in tops_sorted
                            for e in combinations(t, 2)})
            self.simplices[1] = np.asarray(edges, dtype=np.int64)
            self.simplices[2] = tops_sorted[
                np.lexsort(tops_sorted.T[::-1])]
        else:
            self.simplices[1] = tops_sorted[np.lexsort(tops_sorted.T[::-1])]

        self.num = {p: len(self.simplices[p]) for p in range(n + 1)}

        self._compute_orientation()
        self._compute_boundaries()
        self._compute_volumes(allow_non_delaunay)

        self._hodge_cache: dict[tuple[int, bool], np.ndarray] = {}
        self._boundary_T: dict[int, sp.csr_matrix] = {}
        for p in range(1, n + 1):
            self.boundary[p].data.flags.writeable = False
        for p in self.primal_volume:
            _freeze(self.primal_volume[p])
            _freeze(self.dual_volume[p])

    # -- construction helpers -------------------------------------------------

    def _simplex_index(self, p: int) -> dict[tuple, int]:
        return {tuple(row): i for i, row in enumerate(self.simplices[p])}

    def _compute_orientation(self):
        n = self.dim
        tops = self.simplices[n]
        pts = self.node_coords
        if n == 1:
            vec = pts[tops[:, 1], 0] - pts[tops[:, 0], 0]
            if np.any(vec == 0.0):
                raise MeshError("zero-length edge")
            self.orientation = _freeze(np.sign(vec).astype(np.int64))
        else:
            e1 = pts[tops[:, 1]] - pts[tops[:, 0]]
            e2 = pts[tops[:, 2]] - pts[tops[:, 0]]
            det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
            bad = np.nonzero(det == 0.0)[0]
            if bad.size:
                raise MeshError(f"degenerate (zero-area) triangle at index {bad[0]}")
            self.orientation = _freeze(np.sign(det).astype(np.int64))

    def _compute_boundaries(self):
        n = self.dim
        self.boundary: dict[int, sp.csr_matrix] = {}
        self.boundary_int: dict[int, sp.csr_matrix] = {}
        for p in range(1, n + 1):
            simp = self.simplices[p]
            face_idx = self._simplex_index(p - 1)
            rows, cols, vals = [], [], []
            orient = self.orientation if p == n else np.ones(len(simp), np.int64)
            for j, s in enumerate(simp):
                for i in range(p + 1):
                    face = tuple(np.delete(s, i))
                    rows.append(face_idx[face])
                    cols.append(j)
                    vals.append(int(orient[j]) * (-1) ** i)
            shape = (self.num[p - 1], self.num[p])
            m = sp.csr_matrix((vals, (rows, cols)), shape=shape, dtype=np.int64)
            self.boundary_int[p] = m
            self.boundary[p] = m.astype(np.float64)

    def _compute_volumes(self, allow_non_delaunay: bool):
        n = self.dim
        pts = self.node_coords
        pv: dict[int, np.ndarray] = {0: np.ones(self.num_nodes)}
        dv: dict[int, np.ndarray] = {}
        cc: dict[int, np.ndarray] = {}

        edges = self.simplices[1]
        evec = pts[edges[:, 1]] - pts[edges[:, 0]]
        elen = np.linalg.norm(evec, axis=1)
        pv[1] = elen
        cc[1] = 0.5 * (pts[edges[:, 0]] + pts[edges[:, 1]])

        if n == 1:
            dv[1] = np.ones(self.num[1])
            d0 = np.zeros(self.num_nodes)
            np.add.at(d0, edges[:, 0], 0.5 * elen)
            np.add.at(d0, edges[:, 1], 0.5 * elen)
            dv[0] = d0
        else:
            tris = self.simplices[2]
            a, b, c = pts[tris[:, 0]], pts[tris[:, 1]], pts[tris[:, 2]]
            det = ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
                   - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))
            pv[2] = 0.5 * np.abs(det)
            cc[2] = _circumcenters(a, b, c, det)
            dv[2] = np.ones(self.num[2])

            # Elementary-dual accumulation: for each (edge, triangle) pair the
            # dual edge piece is the distance from the triangle circumcenter to
            # the edge midpoint, signed positive on the triangle-interior side.
            edge_idx = self._simplex_index(1)
            d1 = np.zeros(self.num[1])
            d0 = np.zeros(self.num_nodes)
            for j, t in enumerate(tris):
                ccj = cc[2][j]
                for u, v in combinations(t, 2):
                    e = edge_idx[(u, v)]
                    mid = cc[1][e]
                    tv = pts[v] - pts[u]
                    tv /= np.linalg.norm(tv)
                    w = int(np.setdiff1d(t, (u, v))[0])
                    normal = pts[w] - mid
                    normal -= tv * (normal @ tv)
                    nn = np.linalg.norm(normal)
                    piece = (ccj - mid) @ (normal / nn)
                    d1[e] += piece
                    d0[u] += 0.25 * elen[e] * piece
                    d0[v] += 0.25 * elen[e] * piece
            dv[1] = d1
            dv[0] = d0
            if not allow_non_delaunay:
                bad = np.nonzero(d1 < -1e-12)[0]
                if bad.size:
                    raise NonDelaunayError(
                        f"negative dual volume on edge {bad[0]} "
                        f"{tuple(self.simplices[1][bad[0]])}; pass "
                        "allow_non_delaunay=True to keep signed dual volumes")

        self.primal_volume = pv
        self.dual_volume = dv
        self.circumcenters = cc

    # -- derived operators -----------------------------------------------------

    def hodge_diag(self, p: int, inverse: bool = False) -> np.ndarray:
        """Diagonal of the Hodge star on primal p-cochains (or its inverse)."""
        key = (p, inverse)
        if key not in self._hodge_cache:
            dvp, pvp = self.dual_volume[p], self.primal_volume[p]
            if inverse:
                zero = np.nonzero(dvp == 0.0)[0]
                if zero.size:
                    raise ZeroDivisionError(
                        f"zero dual volume on {p}-simplex {zero[0]} "
                        f"{tuple(np.atleast_1d(self.simplices[p][zero[0]]))}")
                diag = pvp / dvp
            else:
                diag = dvp / pvp
            self._hodge_cache[key] = _freeze(diag)
        return self._hodge_cache[key]

    def boundary_T(self, p: int) -> sp.csr_matrix:
        """Cached CSR transpose of boundary[p] (the coboundary matrix)."""
        if p not in self._boundary_T:
            self._boundary_T[p] = self.boundary[p].T.tocsr()
        return self._boundary_T[p]

    def carrier_count(self, primality: str, degree: int) -> int:
        if primality == "primal":
            return self.num[degree]
        return self.num[self.dim - degree]

    def boundary_node_indices(self) -> np.ndarray:
        """Nodes incident to an (n-1)-simplex with exactly one n-cofacet."""
        n = self.dim
        cofacets = np.asarray(
            np.abs(self.boundary_int[n]).sum(axis=1)).ravel()
        if n == 1:
            return np.nonzero(cofacets == 1)[0].astype(np.int64)
        bnd_edges = self.simplices[1][cofacets == 1]
        return np.unique(bnd_edges)

    def interior_node_mask(self) -> np.ndarray:
        mask = np.ones(self.num_nodes, dtype=bool)
        mask[self.boundary_node_indices()] = False
        return mask

    def total_volume(self) -> float:
        return float(self.primal_volume[self.dim].sum())


def _circumcenters(a, b, c, det):
    """Circumcenters of triangles given vertex arrays and 2x signed areas."""
    d = 2.0 * det
    la = (a * a).sum(axis=1)
    lb = (b * b).sum(axis=1)
    lc = (c * c).sum(axis=1)
    ux = (la * (b[:, 1] - c[:, 1]) + lb * (c[:, 1] - a[:, 1])
          + lc * (a[:, 1] - b[:, 1])) / d
    uy = (la * (c[:, 0] - b[:, 0]) + lb * (a[:, 0] - c[:, 0])
          + lc * (b[:, 0] - a[:, 0])) / d
    return np.column_stack([ux, uy])


def build_complex(node_coords, top_simplices,
                  allow_non_delaunay: bool = False) -> SimplicialComplex:
    """Build a complex from node coordinates and top-simplex vertex tuples."""
    return SimplicialComplex(node_coords, top_simplices,
                             allow_non_delaunay=allow_non_delaunay)


def circumcentric_dual(K: SimplicialComplex):
    """Circumcenter and dual-volume tables of an already-built complex."""
    return K.circumcenters, K.dual_volume


def interval_mesh(num_nodes: int) -> SimplicialComplex:
    """Uniform 1-complex on [0, 1]."""
    if num_nodes < 2:
        raise MeshError("interval mesh needs at least 2 nodes")
    coords = np.linspace(0.0, 1.0, num_nodes)[:, None]
    edges = np.column_stack([np.arange(num_nodes - 1),
                             np.arange(1, num_nodes)])
    return build_complex(coords, edges)


def unit_square_mesh(target_nodes: int, seed: int = 0) -> SimplicialComplex:
    """Jittered-grid Delaunay triangulation of [0, 1]^2.

    Node count equals target_nodes exactly (grid nodes are dropped at random
    when the nearest square grid overshoots).  Boundary nodes stay exactly on
    the square's edges; the four corners are always kept.  Deterministic for
    a fixed seed.
    """
    if target_nodes < 4:
        raise MeshError("unit square mesh needs at least 4 nodes")
    rng = np.random.default_rng(seed)
    k = max(2, math.ceil(math.sqrt(target_nodes)))
    h = 1.0 / (k - 1)
    xs = np.linspace(0.0, 1.0, k)
    gx, gy = np.meshgrid(xs, xs, indexing="ij")
    coords = np.column_stack([gx.ravel(), gy.ravel()])
    on_x = (coords[:, 0] == 0.0) | (coords[:, 0] == 1.0)
    on_y = (coords[:, 1] == 0.0) | (coords[:, 1] == 1.0)
    corner = on_x & on_y
    boundary = (on_x | on_y) & ~corner
    interior = ~(on_x | on_y)

    jitter = rng.uniform(-0.25 * h, 0.25 * h, size=coords.shape)
    coords[interior] += jitter[interior]
    # boundary nodes jitter only along their edge
    coords[boundary & on_x, 1] += jitter[boundary & on_x, 1]
    coords[boundary & on_y, 0] += jitter[boundary & on_y, 0]
    coords = np.clip(coords, 0.0, 1.0)

    excess = len(coords) - target_nodes
    if excess > 0:
        removable = np.nonzero(interior)[0]
        if len(removable) < excess:
            removable = np.concatenate(
                [removable, np.nonzero(boundary)[0]])
        drop = rng.choice(removable, size=excess, replace=False)
        keep = np.setdiff1d(np.arange(len(coords)), drop)
        coords = coords[keep]

    tri = Delaunay(coords)
    return build_complex(coords, tri.simplices)


def boundary_nodes(K: SimplicialComplex) -> np.ndarray:
    """Indices of nodes on the topological boundary."""
    return K.boundary_node_indices()


def delaunay_violations(K: SimplicialComplex, tol: float = 1e-10) -> int:
    """Number of (triangle, node) pairs with the node strictly inside the
    triangle's circumcircle.  Brute-force check."""
    if K.dim != 2:
        return 0
    cc = K.circumcenters[2]
    tris = K.simplices[2]
    r2 = ((K.node_coords[tris[:, 0]] - cc) ** 2).sum(axis=1)
    count = 0
    for j in range(K.num[2]):
        d2 = ((K.node_coords - cc[j]) ** 2).sum(axis=1)
        inside = d2 < r2[j] - tol * max(r2[j], 1.0)
        inside[tris[j]] = False
        count += int(inside.sum())
    return count


# -- mesh file format ---------------------------------------------------------

def write_mesh(K: SimplicialComplex, path) -> None:
    """Plain-text mesh file: `dim N`, `nodes K` + coordinate lines,
    `cells M` + vertex-index lines.  17 significant digits."""
    lines = [f"dim {K.dim}", f"nodes {K.num_nodes}"]
    for row in K.node_coords:
        lines.append(" ".join(format(v, ".17g") for v in row))
    tops = K.simplices[K.dim]
    lines.append(f"cells {len(tops)}")
    for row in tops:
        lines.append(" ".join(str(int(v)) for v in row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_mesh(path, allow_non_delaunay: bool = False) -> SimplicialComplex:
    with open(path, "r", encoding="utf-8") as fh:
        tokens = fh.read().split()
    it = iter(tokens)

    def expect(word):
        got = next(it)
        if got != word:
            raise MeshError(f"mesh file: expected '{word}', got '{got}'")

    expect("dim")
    dim = int(next(it))
    if dim not in (1, 2):
        raise MeshError(f"unsupported mesh dimension {dim}")
    expect("nodes")
    n_nodes = int(next(it))
    coords = np.array([float(next(it)) for _ in range(n_nodes * dim)],
                      dtype=np.float64).reshape(n_nodes, dim)
    expect("cells")
    n_cells = int(next(it))
    cells = np.array([int(next(it)) for _ in range(n_cells * (dim + 1))],
                     dtype=np.int64).reshape(n_cells, dim + 1)
    return build_complex(coords, cells, allow_non_delaunay=allow_non_delaunay)
