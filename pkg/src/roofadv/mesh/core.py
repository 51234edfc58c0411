"""Indexed triangle meshes, icospheres and the uniform Laplacian regulariser."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

__all__ = [
    "TriangleMesh",
    "MeshValidationError",
    "icosphere",
    "laplacian_loss",
    "laplacian_operator",
    "laplacian_loss_and_grad",
    "merge_meshes",
]


class MeshValidationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Triangle surface with counter-clockwise (outward) face winding."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vertices, dtype=float).reshape(-1, 3))
        f = np.ascontiguousarray(np.asarray(self.faces, dtype=np.int64).reshape(-1, 3))
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    def validate(self, area_tol: float = 1e-14) -> "TriangleMesh":
        if not np.all(np.isfinite(self.vertices)):
            raise MeshValidationError("mesh has non-finite vertices")
        if self.n_faces:
            bad = np.flatnonzero((self.faces < 0).any(1) | (self.faces >= self.n_vertices).any(1))
            if bad.size:
                raise MeshValidationError(f"face {bad[0]} has a vertex index out of range")
            degenerate = np.flatnonzero(self.face_areas() <= area_tol)
            if degenerate.size:
                raise MeshValidationError(f"face {degenerate[0]} is degenerate (zero area)")
        return self

    def face_normals(self, normalize: bool = False) -> np.ndarray:
        tri = self.vertices[self.faces]
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        if normalize:
            n = n / np.linalg.norm(n, axis=1, keepdims=True)
        return n

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(), axis=1)

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges ``(E, 2)`` with ``edges[:, 0] < edges[:, 1]``."""
        directed = self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
        return np.unique(np.sort(directed, axis=1), axis=0)

    def signed_volume(self) -> float:
        tri = self.vertices[self.faces]
        return float(np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum() / 6.0)

    def euler_characteristic(self) -> int:
        used = np.unique(self.faces).size
        return int(used - self.edges.shape[0] + self.n_faces)

    def is_watertight(self) -> bool:
        """Every undirected edge borders exactly two faces with opposite directions."""
        if self.n_faces == 0:
            return False
        directed = self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
        # each directed edge must appear once and its reverse exactly once
        keys = directed[:, 0] * (self.n_vertices + 1) + directed[:, 1]
        rev = directed[:, 1] * (self.n_vertices + 1) + directed[:, 0]
        uniq, counts = np.unique(keys, return_counts=True)
        if np.any(counts != 1):
            return False
        return bool(np.all(np.isin(rev, uniq, assume_unique=False)))

    def is_connected(self) -> bool:
        if self.n_faces == 0:
            return False
        used = np.unique(self.faces)
        e = self.edges
        adj = sp.coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(self.n_vertices,) * 2)
        n_comp, labels = sp.csgraph.connected_components(adj, directed=False)
        return bool(np.unique(labels[used]).size == 1)

    def aabb(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def transformed(self, transform: np.ndarray) -> "TriangleMesh":
        """Apply a 4x4 homogeneous transform (orientation preserved for det > 0)."""
        T = np.asarray(transform, dtype=float)
        return TriangleMesh(self.vertices @ T[:3, :3].T + T[:3, 3], self.faces)

    def scaled(self, factors) -> "TriangleMesh":
        return TriangleMesh(self.vertices * np.asarray(factors, dtype=float), self.faces)

    def with_vertices(self, vertices) -> "TriangleMesh":
        return TriangleMesh(vertices, self.faces)

    def compacted(self) -> "TriangleMesh":
        """Drop vertices not referenced by any face."""
        used, inverse = np.unique(self.faces, return_inverse=True)
        return TriangleMesh(self.vertices[used], inverse.reshape(-1, 3))


def merge_meshes(meshes) -> TriangleMesh:
    verts, faces, offset = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + offset)
        offset += m.n_vertices
    if not verts:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    return TriangleMesh(np.vstack(verts), np.vstack(faces))


def icosphere(subdivisions: int = 2) -> TriangleMesh:
    """Unit-radius icosphere; level ``k`` has ``10*4**k + 2`` vertices."""
    if subdivisions < 0:
        raise ValueError("subdivisions must be >= 0")
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = [
        (-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
        (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
        (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    vertices = [np.asarray(v, dtype=float) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(i, j):
            key = (i, j) if i < j else (j, i)
            if key not in cache:
                m = vertices[i] + vertices[j]
                vertices.append(m / np.linalg.norm(m))
                cache[key] = len(vertices) - 1
            return cache[key]

        refined = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            refined += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = refined
    return TriangleMesh(np.array(vertices), np.array(faces))


def laplacian_operator(mesh: TriangleMesh) -> sp.csr_matrix:
    """Sparse uniform Laplacian ``L = I - D^-1 A`` over the 1-ring of undirected edges."""
    n = mesh.n_vertices
    e = mesh.edges
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    adj = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
    degree = np.asarray(adj.sum(axis=1)).ravel()
    isolated = np.flatnonzero(degree == 0)
    if isolated.size:
        raise MeshValidationError(f"vertex {isolated[0]} has no neighbours")
    return (sp.identity(n, format="csr") - sp.diags(1.0 / degree) @ adj).tocsr()


def laplacian_loss(mesh: TriangleMesh, operator: sp.csr_matrix | None = None) -> float:
    """Sum over vertices of the squared offset from the centroid of the 1-ring neighbours."""
    L = laplacian_operator(mesh) if operator is None else operator
    delta = L @ mesh.vertices
    return float(np.sum(delta * delta))


def laplacian_loss_and_grad(vertices: np.ndarray, operator: sp.csr_matrix):
    delta = operator @ vertices
    return float(np.sum(delta * delta)), 2.0 * (operator.T @ delta)
