"""Random watertight meshes from decimated Delaunay tetrahedralisations."""

from __future__ import annotations

from collections import defaultdict

import numpy as np
from scipy.spatial import Delaunay, QhullError

from .core import TriangleMesh

__all__ = ["random_watertight_mesh"]

# local vertex indices of each tet face, paired with the opposite vertex
_FACES = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]])
_FACES_L = _FACES.tolist()
_EDGES = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]


class _Complex:
    """Mutable tetrahedral complex supporting manifold-preserving removals."""

    def __init__(self, points: np.ndarray, simplices: np.ndarray, neighbors: np.ndarray):
        tets = simplices.copy()
        p = points[tets]
        vol = np.einsum("ij,ij->i", p[:, 1] - p[:, 0], np.cross(p[:, 2] - p[:, 0], p[:, 3] - p[:, 0]))
        flip = vol < 0
        # swapping local vertices 0 and 1 flips orientation; neighbours follow their vertex
        tets[flip, 0], tets[flip, 1] = simplices[flip, 1], simplices[flip, 0]
        nbr = neighbors.copy()
        nbr[flip, 0], nbr[flip, 1] = neighbors[flip, 1], neighbors[flip, 0]
        self.points = points
        self.tets = tets
        self.nbr = nbr
        self.tets_l = tets.tolist()
        self.nbr_l = nbr.tolist()
        self.alive_l = [True] * len(tets)
        self.n_alive = len(tets)
        self.edge_tets: dict = defaultdict(list)
        self.vert_tets: dict = defaultdict(list)
        for t, tet in enumerate(tets.tolist()):
            for i, j in _EDGES:
                a, b = tet[i], tet[j]
                self.edge_tets[(a, b) if a < b else (b, a)].append(t)
            for v in tet:
                self.vert_tets[v].append(t)

    def boundary_tets(self) -> np.ndarray:
        alive = np.asarray(self.alive_l)
        open_face = (self.nbr < 0) | ~alive[np.maximum(self.nbr, 0)]
        return np.flatnonzero(alive & open_face.any(axis=1))

    def _open(self, t: int, k: int) -> bool:
        n = self.nbr_l[t][k]
        return n < 0 or not self.alive_l[n]

    def removable(self, t: int) -> bool:
        """Removal keeps every edge and vertex of ``t`` manifold on the boundary.

        Edge-manifoldness around the six edges of ``t`` also implies that its
        surviving face-neighbours remain connected (any two of them share an
        edge of ``t`` and would otherwise lie on separate fans around it), so the
        complex stays a single face-connected component.
        """
        if self.n_alive <= 1:
            return False
        tet = self.tets_l[t]
        alive = self.alive_l
        alive[t] = False
        try:
            for i, j in _EDGES:
                a, b = tet[i], tet[j]
                count = 0
                for s in self.edge_tets[(a, b) if a < b else (b, a)]:
                    if not alive[s]:
                        continue
                    # the two faces of s containing edge ab are opposite its other vertices
                    for k, w in enumerate(self.tets_l[s]):
                        if w != a and w != b and self._open(s, k):
                            count += 1
                if count not in (0, 2):
                    return False
            for v in tet:
                link = []
                for s in self.vert_tets[v]:
                    if not alive[s]:
                        continue
                    verts = self.tets_l[s]
                    for k, w in enumerate(verts):
                        if w != v and self._open(s, k):
                            face = _FACES_L[k]
                            link.append([verts[x] for x in face if verts[x] != v])
                if link and not _single_cycle(link):
                    return False
            return True
        finally:
            alive[t] = True

    def remove(self, t: int):
        self.alive_l[t] = False
        self.n_alive -= 1

    def surface(self) -> TriangleMesh:
        mask = np.asarray(self.alive_l)
        alive = np.flatnonzero(mask)
        nbr = self.nbr[alive]
        boundary = (nbr < 0) | ~mask[np.maximum(nbr, 0)]
        t_idx, k_idx = np.nonzero(boundary)
        faces = self.tets[alive[t_idx][:, None], _FACES[k_idx]]
        return TriangleMesh(self.points, faces).compacted()


def _single_cycle(link) -> bool:
    """Link edges (boundary-face edges opposite a vertex) form one closed cycle."""
    adj: dict = defaultdict(list)
    for a, b in link:
        adj[a].append(b)
        adj[b].append(a)
    if any(len(n) != 2 for n in adj.values()):
        return False
    start = next(iter(adj))
    seen = {start}
    stack = [start]
    while stack:
        for n in adj[stack.pop()]:
            if n not in seen:
                seen.add(n)
                stack.append(n)
    return len(seen) == len(adj)


def random_watertight_mesh(n_vertices: int, n_remove: int, sigma: float = 0.5, rng=None, max_restarts: int = 100):
    """Sample a random closed 2-manifold surface.

    Draws ``n_vertices`` points from an isotropic Gaussian, tetrahedralises them
    (Delaunay), then removes up to ``n_remove`` boundary tetrahedra in random
    order, skipping removals that would break manifoldness or connectivity.
    The outward-oriented boundary of what remains is returned.  Sampling
    restarts when the points are degenerate; carving stops early if only one
    tetrahedron is left or no boundary tetrahedron is removable.
    """
    if n_vertices < 4:
        raise ValueError("need at least 4 vertices")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if n_remove < 0:
        raise ValueError("n_remove must be non-negative")
    rng = np.random.default_rng(rng)
    for _ in range(max_restarts):
        points = rng.normal(0.0, sigma, size=(n_vertices, 3))
        try:
            tri = Delaunay(points)
        except QhullError:
            continue
        if len(tri.simplices) == 0 or len(tri.coplanar):
            continue
        cplx = _Complex(points, tri.simplices, tri.neighbors)
        removed = 0
        # never remove the last tetrahedron: a larger n_remove just carves as far as possible
        while removed < n_remove and cplx.n_alive > 1:
            hit = False
            for t in rng.permutation(cplx.boundary_tets()):
                if cplx.removable(int(t)):
                    cplx.remove(int(t))
                    removed += 1
                    hit = True
                    break
            if not hit:
                break
        mesh = cplx.surface()
        if mesh.n_faces and np.all(mesh.face_areas() > 1e-12):
            return mesh
    raise RuntimeError("failed to sample a non-degenerate watertight mesh")
