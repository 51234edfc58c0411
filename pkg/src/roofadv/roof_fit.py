"""Rooftop localisation with a PCA shape prior over vehicle signed distance fields.

Vehicle shapes live in a canonical frame in which the label box maps to
``[-1, 1]^3`` (x along the heading, z up).  Every shape is sampled on the same
regular grid over ``[-1.2, 1.2]^3``; grid values are signed distances in
meters (negative inside).  A linear PCA decoder ``mean + sum_j z_j basis_j``
is fitted to a partial vehicle cloud by minimising the squared decoded SDF at
the observed points, the zero level set is meshed with marching cubes, and
the top band of the fitted model gives the roof.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from skimage.measure import marching_cubes
from sklearn.base import BaseEstimator

from .scene_core import BoxBEV, as_cloud, points_in_box
from .mesh.core import TriangleMesh

__all__ = [
    "CarShape",
    "VehicleShapeBank",
    "LatentShapePrior",
    "RoofRegion",
    "RoofFit",
    "RoofFitter",
    "build_prior",
    "sdf_eval",
    "fit_latent",
    "latent_objective",
    "extract_mesh",
    "roof_region",
    "placement_transform",
    "to_canonical",
    "from_canonical",
    "save_prior",
    "load_prior",
    "PriorFormatError",
    "GRID_SHAPE",
    "GRID_EXTENT",
    "ROOF_BAND",
]

GRID_SHAPE = (64, 64, 48)
GRID_EXTENT = 1.2
ROOF_BAND = 0.2
TRUNCATION = 0.15
DEFAULT_K = 16
MIN_FIT_POINTS = 10


def _rounded_box(p, center, half, radius):
    q = np.abs(p - center) - (half - radius)
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(q.max(axis=-1), 0.0)
    return outside + inside - radius


@dataclass(frozen=True)
class CarShape:
    """Car-like solid: a rounded body box with a rounded cabin on top.

    All lengths in meters, in the vehicle frame with the ground at z = 0 and
    the center of the footprint at the origin.
    """

    length: float = 4.2
    width: float = 1.75
    height: float = 1.5
    body_height: float = 0.85
    cabin_length: float = 2.2
    cabin_inset: float = 0.12
    cabin_offset: float = -0.2
    body_radius: float = 0.12
    cabin_radius: float = 0.1

    def __post_init__(self):
        if min(self.length, self.width, self.height) <= 0:
            raise ValueError("shape dimensions must be positive")
        if not 0 < self.body_height < self.height:
            raise ValueError("body_height must be within (0, height)")
        if abs(self.cabin_offset) + self.cabin_length / 2 > self.length / 2:
            raise ValueError("cabin must fit over the body")

    @property
    def half_extents(self) -> np.ndarray:
        return np.array([self.length / 2, self.width / 2, self.height / 2])

    @property
    def roof_center(self) -> np.ndarray:
        """Centroid of the flat cabin top, vehicle frame."""
        return np.array([self.cabin_offset, 0.0, self.height])

    def sdf(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        body = _rounded_box(
            p,
            np.array([0.0, 0.0, self.body_height / 2]),
            np.array([self.length / 2, self.width / 2, self.body_height / 2]),
            self.body_radius,
        )
        # cabin overlaps the body slightly so the union has no crease gap
        cab_lo = self.body_height - 0.1
        cabin = _rounded_box(
            p,
            np.array([self.cabin_offset, 0.0, (cab_lo + self.height) / 2]),
            np.array([self.cabin_length / 2, self.width / 2 - self.cabin_inset, (self.height - cab_lo) / 2]),
            self.cabin_radius,
        )
        return np.minimum(body, cabin)

    def canonical_sdf(self, u) -> np.ndarray:
        """SDF in meters at canonical coordinates ``u`` (label box = [-1, 1]^3)."""
        half = self.half_extents
        p = np.asarray(u, dtype=float) * half + np.array([0.0, 0.0, half[2]])
        return self.sdf(p)

    def mesh(self, spacing: float = 0.06) -> TriangleMesh:
        """Surface mesh in the vehicle frame (ground at z = 0)."""
        half = self.half_extents
        pad = 2 * spacing
        axes = [np.arange(-h - pad, h + pad + spacing, spacing) for h in half[:2]]
        axes.append(np.arange(-pad, self.height + pad + spacing, spacing))
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        values = self.sdf(grid)
        verts, faces, _, _ = marching_cubes(values, 0.0, spacing=(spacing,) * 3)
        verts = verts + np.array([a[0] for a in axes])
        # keep the surface inside the tight analytic box
        verts = np.clip(verts, [-half[0], -half[1], 0.0], [half[0], half[1], self.height])
        return TriangleMesh(verts, faces)

    @classmethod
    def sample(cls, rng) -> "CarShape":
        """Random sedan/hatchback proportions; corner radii and cabin inset are fixed."""
        rng = np.random.default_rng(rng)
        length = rng.uniform(3.7, 4.8)
        width = rng.uniform(1.6, 1.9)
        height = rng.uniform(1.35, 1.65)
        cabin_length = length * rng.uniform(0.45, 0.6)
        slack = length / 2 - cabin_length / 2 - 0.15
        return cls(
            length=length,
            width=width,
            height=height,
            body_height=height * rng.uniform(0.52, 0.62),
            cabin_length=cabin_length,
            cabin_offset=rng.uniform(-0.6, 0.25) * slack,
        )


def grid_axes(shape=GRID_SHAPE, extent: float = GRID_EXTENT):
    return [np.linspace(-extent, extent, n) for n in shape]


@dataclass(frozen=True, eq=False)
class VehicleShapeBank:
    """SDFs of several vehicles sampled on one shared canonical grid."""

    grids: np.ndarray
    lo: np.ndarray
    spacing: np.ndarray
    shapes: tuple = ()

    def __len__(self) -> int:
        return self.grids.shape[0]

    @classmethod
    def from_shapes(cls, shapes, grid_shape=GRID_SHAPE, extent: float = GRID_EXTENT,
                    truncation: float | None = TRUNCATION) -> "VehicleShapeBank":
        """Sample analytic shapes; distances are clamped to ``+-truncation`` meters.

        Truncation keeps the principal components focused on the surface
        neighbourhood instead of far-field distance values.
        """
        axes = grid_axes(grid_shape, extent)
        u = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        grids = np.stack([s.canonical_sdf(u) for s in shapes])
        if truncation is not None:
            grids = np.clip(grids, -truncation, truncation)
        return cls.from_grids(grids, extent, tuple(shapes))

    @classmethod
    def from_grids(cls, grids, extent: float = GRID_EXTENT, shapes=()) -> "VehicleShapeBank":
        grids = np.asarray(grids, dtype=float)
        if grids.ndim != 4 or grids.shape[0] == 0:
            raise ValueError("grids must be (n_shapes, nx, ny, nz)")
        dims = np.array(grids.shape[1:])
        lo = np.full(3, -float(extent))
        return cls(grids, lo, 2 * extent / (dims - 1), tuple(shapes))

    @classmethod
    def procedural(cls, n_shapes: int = 24, rng=0, grid_shape=GRID_SHAPE,
                   truncation: float | None = TRUNCATION) -> "VehicleShapeBank":
        rng = np.random.default_rng(rng)
        shapes = [CarShape()] + [CarShape.sample(rng) for _ in range(n_shapes - 1)]
        return cls.from_shapes(shapes, grid_shape, truncation=truncation)


@dataclass(frozen=True, eq=False)
class LatentShapePrior:
    """Linear SDF decoder ``mean + sum_j z_j basis_j`` on a regular grid.

    ``basis`` rows are mutually orthogonal; each is a principal direction scaled
    by its standard deviation over the bank, so latent codes of bank members
    have unit variance per component.
    """

    mean: np.ndarray
    basis: np.ndarray
    lo: np.ndarray
    spacing: np.ndarray
    variances: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def k(self) -> int:
        return self.basis.shape[0]

    @property
    def dims(self) -> tuple:
        return self.mean.shape

    @property
    def hi(self) -> np.ndarray:
        return self.lo + self.spacing * (np.array(self.dims) - 1)

    def decode(self, z) -> np.ndarray:
        z = self._check_z(z)
        if self.k == 0:
            return self.mean.copy()
        return self.mean + np.tensordot(z, self.basis, axes=1)

    def project(self, grid) -> np.ndarray:
        """Least-squares latent code of a grid."""
        if self.k == 0:
            return np.zeros(0)
        A = self.basis.reshape(self.k, -1).T
        z, *_ = np.linalg.lstsq(A, (np.asarray(grid) - self.mean).ravel(), rcond=None)
        return z

    def _check_z(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float).reshape(-1)
        if z.size != self.k:
            raise ValueError(f"latent code has {z.size} entries, prior has k={self.k}")
        return z


def build_prior(bank: VehicleShapeBank, k: int = DEFAULT_K) -> LatentShapePrior:
    n = len(bank)
    if k < 0:
        raise ValueError("k must be non-negative")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of shapes ({n})")
    flat = bank.grids.reshape(n, -1)
    mean = flat.mean(axis=0)
    centered = flat - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    s = np.concatenate([s, np.zeros(max(0, k - s.size))])[:k]
    variances = s**2 / n
    basis = vt[:k] * np.sqrt(variances)[:, None] if k else np.zeros((0, flat.shape[1]))
    # zero-variance directions carry no shape information
    basis = np.where(variances[:, None] > 0, basis, 0.0) if k else basis
    dims = bank.grids.shape[1:]
    return LatentShapePrior(mean.reshape(dims), basis.reshape((k,) + dims), bank.lo.copy(), bank.spacing.copy(),
                            variances)


def _trilinear(prior: LatentShapePrior, u):
    """Corner indices ``(N, 8, 3)`` and weights ``(N, 8)`` of trilinear interpolation."""
    u = np.atleast_2d(np.asarray(u, dtype=float))
    dims = np.array(prior.dims)
    g = (u - prior.lo) / prior.spacing
    tol = 1e-9
    if np.any(g < -tol) or np.any(g > dims - 1 + tol):
        raise ValueError("point lies outside the SDF grid")
    g = np.clip(g, 0.0, dims - 1)
    i0 = np.minimum(np.floor(g).astype(np.int64), dims - 2)
    f = g - i0
    offs = np.array([[a, b, c] for a in (0, 1) for b in (0, 1) for c in (0, 1)])
    idx = i0[:, None, :] + offs[None]
    w = np.prod(np.where(offs[None] == 1, f[:, None, :], 1.0 - f[:, None, :]), axis=2)
    return idx, w


def _interp_terms(prior: LatentShapePrior, u):
    """Affine decoder terms per point: ``F(u; z) = a + B @ z``."""
    idx, w = _trilinear(prior, u)
    ii, jj, kk = idx[..., 0], idx[..., 1], idx[..., 2]
    a = np.sum(prior.mean[ii, jj, kk] * w, axis=1)
    if prior.k == 0:
        return a, np.zeros((a.size, 0))
    B = np.einsum("jnc,nc->nj", prior.basis[:, ii, jj, kk], w)
    return a, B


def sdf_eval(prior: LatentShapePrior, z, p):
    """Trilinearly interpolated signed distance of the decoded shape at canonical ``p``."""
    z = prior._check_z(z)
    p = np.asarray(p, dtype=float)
    a, B = _interp_terms(prior, p.reshape(-1, 3))
    out = a + B @ z
    return float(out[0]) if p.ndim == 1 else out


def to_canonical(points, box: BoxBEV) -> np.ndarray:
    pts = as_cloud(points)
    c, s = np.cos(box.alpha), np.sin(box.alpha)
    dx, dy = pts[:, 0] - box.x, pts[:, 1] - box.y
    half_h = (box.z_max - box.z_min) / 2
    return np.column_stack([
        (c * dx + s * dy) / (box.w / 2),
        (-s * dx + c * dy) / (box.h / 2),
        (pts[:, 2] - (box.z_min + half_h)) / half_h,
    ])


def from_canonical(u, box: BoxBEV) -> np.ndarray:
    u = np.asarray(u, dtype=float).reshape(-1, 3)
    half_h = (box.z_max - box.z_min) / 2
    lx, ly = u[:, 0] * box.w / 2, u[:, 1] * box.h / 2
    c, s = np.cos(box.alpha), np.sin(box.alpha)
    return np.column_stack([box.x + c * lx - s * ly, box.y + s * lx + c * ly, box.z_min + half_h + u[:, 2] * half_h])


def latent_objective(prior: LatentShapePrior, z, u) -> float:
    a, B = _interp_terms(prior, u)
    r = a + B @ prior._check_z(z)
    return float(r @ r)


@dataclass(frozen=True, eq=False)
class LatentFit:
    z: np.ndarray
    objective_history: np.ndarray
    n_iter: int


def _fit_quadratic(a, B, z0, max_iter, tol):
    """Gradient descent with exact line search on ``||a + B z||^2``."""
    z = z0.copy()
    r = a + B @ z
    history = [float(r @ r)]
    it = 0
    for it in range(1, max_iter + 1):
        g = 2.0 * B.T @ r
        Bg = B @ g
        curv = 2.0 * float(Bg @ Bg)
        if curv <= 0.0 or not np.any(g):
            it -= 1
            break
        step = float(g @ g) / curv
        z = z - step * g
        r = a + B @ z
        obj = float(r @ r)
        prev = history[-1]
        history.append(min(obj, prev))
        if obj > prev:
            # only possible through rounding; keep the previous iterate
            z = z + step * g
            r = a + B @ z
            break
        if prev - obj <= tol * max(prev, 1e-300):
            break
    return LatentFit(z, np.asarray(history), it)


def fit_latent(prior: LatentShapePrior, points, box: BoxBEV, max_iter: int = 500, tol: float = 1e-6,
               z0=None, return_details: bool = False):
    """Latent code minimising the summed squared SDF of the in-box points."""
    inside = points_in_box(points, box)
    if inside.shape[0] < MIN_FIT_POINTS:
        raise ValueError(f"need at least {MIN_FIT_POINTS} points in the box, got {inside.shape[0]}")
    u = np.clip(to_canonical(inside, box), prior.lo, prior.hi)
    a, B = _interp_terms(prior, u)
    z_init = np.zeros(prior.k) if z0 is None else prior._check_z(z0)
    if prior.k == 0:
        fit = LatentFit(np.zeros(0), np.array([float(a @ a)]), 0)
    else:
        fit = _fit_quadratic(a, B, z_init, max_iter, tol)
    return fit if return_details else fit.z


def extract_mesh(prior: LatentShapePrior, z) -> TriangleMesh:
    """Marching-cubes mesh of the decoded zero level set, canonical frame."""
    grid = prior.decode(z)
    if grid.min() >= 0.0 or grid.max() <= 0.0:
        raise ValueError("decoded SDF has no zero level set inside the grid")
    verts, faces, _, _ = marching_cubes(grid, 0.0, spacing=tuple(prior.spacing))
    mesh = TriangleMesh(verts + prior.lo, faces)
    if mesh.signed_volume() <= 0.0:
        raise ValueError("inverted orientation: decoded grid is positive inside")
    return mesh


@dataclass(frozen=True, eq=False)
class RoofRegion:
    center: np.ndarray
    vertices: np.ndarray


def roof_region(fitted: TriangleMesh, band: float = ROOF_BAND) -> RoofRegion:
    """Vertices within ``band`` of the top; center is their centroid raised to the top."""
    if fitted.n_vertices == 0:
        raise ValueError("fitted mesh is empty")
    v = np.unique(fitted.vertices[np.unique(fitted.faces)] if fitted.n_faces else fitted.vertices, axis=0)
    z_top = v[:, 2].max()
    top = v[v[:, 2] >= z_top - band]
    center = top.mean(axis=0)
    center[2] = top[:, 2].max()
    return RoofRegion(center, top)


def placement_transform(box: BoxBEV, roof_center) -> np.ndarray:
    """Rotation by the box heading about z followed by translation to the roof center."""
    r = np.asarray(roof_center, dtype=float)
    c, s = np.cos(box.alpha), np.sin(box.alpha)
    return np.array([
        [c, -s, 0.0, r[0]],
        [s, c, 0.0, r[1]],
        [0.0, 0.0, 1.0, r[2]],
        [0.0, 0.0, 0.0, 1.0],
    ])


@dataclass(frozen=True, eq=False)
class RoofFit:
    latent: np.ndarray
    mesh: TriangleMesh
    roof: RoofRegion
    transform: np.ndarray
    objective_history: np.ndarray


class RoofFitter(BaseEstimator):
    """Fit the shape prior to one vehicle and expose its roof and placement.

    Parameters
    ----------
    prior : LatentShapePrior
    max_iter, tol : int, float
        Latent optimisation budget and relative-decrease stopping rule.
    band : float
        Height of the roof band in meters.
    """

    def __init__(self, prior: LatentShapePrior | None = None, max_iter: int = 500, tol: float = 1e-6,
                 band: float = ROOF_BAND):
        self.prior = prior
        self.max_iter = max_iter
        self.tol = tol
        self.band = band

    def fit(self, X, box: BoxBEV):
        if self.prior is None:
            raise ValueError("RoofFitter needs a prior")
        self.fit_ = self.fit_vehicle(X, box)
        self.latent_ = self.fit_.latent
        self.roof_center_ = self.fit_.roof.center
        self.transform_ = self.fit_.transform
        return self

    def fit_vehicle(self, points, box: BoxBEV) -> RoofFit:
        details = fit_latent(self.prior, points, box, self.max_iter, self.tol, return_details=True)
        canonical = extract_mesh(self.prior, details.z)
        mesh = TriangleMesh(from_canonical(canonical.vertices, box), canonical.faces)
        if mesh.signed_volume() < 0:
            mesh = TriangleMesh(mesh.vertices, mesh.faces[:, ::-1])
        roof = roof_region(mesh, self.band)
        return RoofFit(details.z, mesh, roof, placement_transform(box, roof.center), details.objective_history)

    def predict(self, X, box: BoxBEV) -> np.ndarray:
        """Roof center for one vehicle cloud."""
        return self.fit_vehicle(X, box).roof.center


class PriorFormatError(ValueError):
    pass


_MAGIC = b"RFSP"
_HEADER = struct.Struct("<4sI3I3f3fI")


def save_prior(prior: LatentShapePrior, path) -> Path:
    """Binary layout: header (magic, version, dims, lower corner, spacing, k), then
    little-endian float32 mean grid, basis grids and per-component variances."""
    path = Path(path)
    header = _HEADER.pack(_MAGIC, 1, *prior.dims, *prior.lo.astype(np.float32), *prior.spacing.astype(np.float32),
                          prior.k)
    body = [
        prior.mean.astype("<f4").tobytes(order="C"),
        prior.basis.astype("<f4").tobytes(order="C"),
        np.asarray(prior.variances, dtype="<f4").reshape(prior.k).tobytes(),
    ]
    path.write_bytes(header + b"".join(body))
    return path


def load_prior(path) -> LatentShapePrior:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise PriorFormatError("prior file shorter than its header")
    magic, version, nx, ny, nz, lx, ly, lz, sx, sy, sz, k = _HEADER.unpack_from(data)
    if magic != _MAGIC or version != 1:
        raise PriorFormatError("not a shape prior file")
    dims = (nx, ny, nz)
    if min(dims) < 2:
        raise PriorFormatError(f"invalid grid dims {dims}")
    n = nx * ny * nz
    expected = _HEADER.size + 4 * (n * (k + 1) + k)
    if len(data) != expected:
        raise PriorFormatError(f"prior file has {len(data)} bytes, header implies {expected}")
    arr = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).astype(float)
    mean = arr[:n].reshape(dims)
    basis = arr[n : n * (k + 1)].reshape((k,) + dims)
    variances = arr[n * (k + 1) :]
    return LatentShapePrior(mean, basis, np.array([lx, ly, lz], float), np.array([sx, sy, sz], float), variances)
