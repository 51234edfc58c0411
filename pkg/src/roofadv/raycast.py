"""LiDAR ray lattices, Moller-Trumbore intersection and mesh rendering.

Rays produced by :func:`sample_rays` sit on the sensor's (beam, azimuth)
lattice.  :func:`render_hits` exploits that structure with an angular
broad-phase: each face only tests the lattice rays whose angles fall inside a
conservative bound of the face's angular footprint.  The exact intersection
test is the same elementwise kernel either way, so the broad-phase never
changes results.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
import numpy as np
import yaml
from numba import njit

from .scene_core import as_cloud
from .mesh.core import TriangleMesh

__all__ = [
    "Ray",
    "Hit",
    "RayBundle",
    "RenderResult",
    "SensorConfig",
    "load_sensor_config",
    "moller_trumbore",
    "ray_triangle_intersect",
    "sample_rays",
    "render_hits",
    "render_mesh",
    "compose_scene",
    "hit_point_jacobian",
    "MIN_HIT_DISTANCE",
]

MIN_HIT_DISTANCE = 1e-6
_PARALLEL_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float)
        norm = np.linalg.norm(d)
        if norm == 0:
            raise ValueError("ray direction must be non-zero")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float))
        object.__setattr__(self, "direction", d / norm)


@dataclass(frozen=True)
class Hit:
    t: float
    face_index: int
    barycentric: tuple

    @property
    def u(self) -> float:
        return self.barycentric[0]

    @property
    def v(self) -> float:
        return self.barycentric[1]


@dataclass(frozen=True)
class SensorConfig:
    """Spinning multi-beam LiDAR.

    The defaults approximate a Velodyne HDL-64E: 64 beams spread uniformly from
    +2.0 to -24.8 degrees of elevation and a 0.09 degree azimuth step.
    """

    beam_elevations: tuple = field(default_factory=lambda: tuple(np.deg2rad(np.linspace(2.0, -24.8, 64)).tolist()))
    azimuth_step: float = float(np.deg2rad(0.09))
    origin: tuple = (0.0, 0.0, 0.0)
    azimuth_min: float = -np.pi
    azimuth_max: float = np.pi

    def __post_init__(self):
        el = np.asarray(self.beam_elevations, dtype=float)
        if el.ndim != 1 or el.size == 0:
            raise ValueError("beam_elevations must be a non-empty sequence")
        if np.any(np.diff(el) >= 0):
            raise ValueError("beam elevations must be strictly decreasing")
        if self.azimuth_step <= 0:
            raise ValueError("azimuth_step must be positive")
        if self.azimuth_max <= self.azimuth_min:
            raise ValueError("azimuth_max must exceed azimuth_min")
        object.__setattr__(self, "beam_elevations", tuple(el.tolist()))
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))

    @property
    def elevations(self) -> np.ndarray:
        return np.asarray(self.beam_elevations)

    @property
    def origin_arr(self) -> np.ndarray:
        return np.asarray(self.origin)

    def to_dict(self) -> dict:
        return {
            "beam_elevations_deg": np.rad2deg(self.elevations).tolist(),
            "azimuth_step_deg": float(np.rad2deg(self.azimuth_step)),
            "origin": list(self.origin),
            "azimuth_fov_deg": [float(np.rad2deg(self.azimuth_min)), float(np.rad2deg(self.azimuth_max))],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SensorConfig":
        """Build from a key-value mapping; keys ending in ``_deg`` are in degrees."""
        data = dict(data or {})
        kwargs = {}
        if "beam_elevations_deg" in data:
            kwargs["beam_elevations"] = tuple(np.deg2rad(data.pop("beam_elevations_deg")).tolist())
        elif "beam_elevations" in data:
            kwargs["beam_elevations"] = tuple(data.pop("beam_elevations"))
        elif "n_beams" in data:
            n = int(data.pop("n_beams"))
            hi = float(data.pop("elevation_max_deg", 2.0))
            lo = float(data.pop("elevation_min_deg", -24.8))
            kwargs["beam_elevations"] = tuple(np.deg2rad(np.linspace(hi, lo, n)).tolist())
        if "azimuth_step_deg" in data:
            kwargs["azimuth_step"] = float(np.deg2rad(data.pop("azimuth_step_deg")))
        elif "azimuth_step" in data:
            kwargs["azimuth_step"] = float(data.pop("azimuth_step"))
        if "origin" in data:
            kwargs["origin"] = tuple(data.pop("origin"))
        if "azimuth_fov_deg" in data:
            lo, hi = data.pop("azimuth_fov_deg")
            kwargs["azimuth_min"], kwargs["azimuth_max"] = float(np.deg2rad(lo)), float(np.deg2rad(hi))
        for key in ("elevation_max_deg", "elevation_min_deg"):
            data.pop(key, None)
        if data:
            raise ValueError(f"unknown sensor config keys: {sorted(data)}")
        return cls(**kwargs)


def load_sensor_config(path) -> SensorConfig:
    with open(path, encoding="utf-8") as fh:
        return SensorConfig.from_dict(yaml.safe_load(fh))


@dataclass(frozen=True, eq=False)
class RayBundle:
    """Rays sharing one origin, optionally tagged with sensor lattice indices."""

    origin: np.ndarray
    directions: np.ndarray
    beam: np.ndarray | None = None
    az_index: np.ndarray | None = None
    elevation: np.ndarray | None = None
    azimuth_step: float | None = None

    def __len__(self) -> int:
        return self.directions.shape[0]

    @property
    def is_lattice(self) -> bool:
        return self.beam is not None and len(self) > 0

    @classmethod
    def from_rays(cls, rays) -> "RayBundle":
        rays = list(rays)
        if not rays:
            return cls(np.zeros(3), np.zeros((0, 3)))
        origin = rays[0].origin
        if any(not np.array_equal(r.origin, origin) for r in rays):
            raise ValueError("all rays in a bundle must share an origin")
        return cls(origin, np.array([r.direction for r in rays]))

    def subset(self, idx) -> "RayBundle":
        pick = lambda a: None if a is None else a[idx]
        return RayBundle(self.origin, self.directions[idx], pick(self.beam), pick(self.az_index),
                         pick(self.elevation), self.azimuth_step)

    @cached_property
    def lattice_lookup(self):
        """(lookup, row_elevations, k_min, center_azimuth) for the angular broad-phase."""
        return _lattice_lookup(self)

    def keys(self) -> np.ndarray:
        return self.beam.astype(np.int64) * (1 << 32) + self.az_index.astype(np.int64)


def moller_trumbore(origins, directions, a, b, c):
    """Elementwise ray/triangle intersection.

    All inputs broadcast to ``(..., 3)``.  Returns ``(hit, t, u, v)`` where the
    intersection point is ``origin + t * direction = (1-u-v) a + u b + v c``.
    """
    e1 = b - a
    e2 = c - a
    pvec = np.cross(directions, e2)
    det = np.einsum("...i,...i->...", e1, pvec)
    scale = np.linalg.norm(np.cross(e1, e2), axis=-1)
    ok = np.abs(det) > _PARALLEL_TOL * scale
    inv = 1.0 / np.where(ok, det, 1.0)
    tvec = origins - a
    u = np.einsum("...i,...i->...", tvec, pvec) * inv
    qvec = np.cross(tvec, e1)
    v = np.einsum("...i,...i->...", directions, qvec) * inv
    t = np.einsum("...i,...i->...", e2, qvec) * inv
    hit = ok & (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t > MIN_HIT_DISTANCE)
    return hit, t, u, v


def ray_triangle_intersect(ray: Ray, a, b, c, face_index: int = 0) -> Hit | None:
    hit, t, u, v = moller_trumbore(
        ray.origin, ray.direction, np.asarray(a, float), np.asarray(b, float), np.asarray(c, float)
    )
    if not bool(hit):
        return None
    return Hit(float(t), face_index, (float(u), float(v)))


def _directions(elevation, azimuth):
    ce = np.cos(elevation)
    return np.stack([ce * np.cos(azimuth), ce * np.sin(azimuth), np.sin(elevation)], axis=-1)


def _wrap(a):
    return np.mod(a + np.pi, 2 * np.pi) - np.pi


def _rect_distance(lo_xy, hi_xy):
    dx = np.maximum(np.maximum(lo_xy[0], -hi_xy[0]), 0.0)
    dy = np.maximum(np.maximum(lo_xy[1], -hi_xy[1]), 0.0)
    return np.hypot(dx, dy)


def _slab(origin, dirs, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origin) * inv
        t2 = (hi - origin) * inv
    tmin = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
    tmax = np.where(np.isnan(t2), np.inf, np.maximum(t1, t2))
    t_enter = np.max(tmin, axis=-1)
    t_exit = np.min(tmax, axis=-1)
    return (t_enter <= t_exit) & (t_exit > 0.0)


def sample_rays(config: SensorConfig, aabb) -> RayBundle:
    """Lattice rays of the sensor that pass through an axis-aligned box.

    ``aabb`` is ``(lo, hi)`` in the sensor frame.  Rays are returned in
    (beam, azimuth) order.
    """
    lo = np.asarray(aabb[0], dtype=float) - config.origin_arr
    hi = np.asarray(aabb[1], dtype=float) - config.origin_arr
    if np.all(lo <= 0) and np.all(hi >= 0):
        raise ValueError("target box contains the sensor origin")
    step = config.azimuth_step
    corners = np.array([[x, y] for x in (lo[0], hi[0]) for y in (lo[1], hi[1])])
    r_min = _rect_distance(lo[:2], hi[:2])
    r_max = float(np.max(np.hypot(corners[:, 0], corners[:, 1])))
    if r_min == 0.0:
        k_lo = int(np.floor(-np.pi / step))
        k_hi = int(np.ceil(np.pi / step))
    else:
        ctr = np.arctan2(0.5 * (lo[1] + hi[1]), 0.5 * (lo[0] + hi[0]))
        rel = _wrap(np.arctan2(corners[:, 1], corners[:, 0]) - ctr)
        k_lo = int(np.ceil((ctr + rel.min()) / step - 1e-9))
        k_hi = int(np.floor((ctr + rel.max()) / step + 1e-9))
    el_hi = np.arctan2(hi[2], r_min if hi[2] > 0 else r_max)
    el_lo = np.arctan2(lo[2], r_min if lo[2] < 0 else r_max)
    elevations = config.elevations
    beams = np.flatnonzero((elevations >= el_lo - 1e-12) & (elevations <= el_hi + 1e-12))
    ks = np.arange(k_lo, k_hi + 1)
    if beams.size == 0 or ks.size == 0:
        return RayBundle(config.origin_arr, np.zeros((0, 3)), np.zeros(0, int), np.zeros(0, int), np.zeros(0), step)
    az = ks * step
    wrapped = _wrap(az)
    in_fov = (wrapped >= config.azimuth_min) & (wrapped <= config.azimuth_max)
    ks, az = ks[in_fov], az[in_fov]
    bb, kk = np.meshgrid(beams, ks, indexing="ij")
    el = elevations[bb.ravel()]
    dirs = _directions(el, kk.ravel() * step)
    keep = _slab(np.zeros(3), dirs, lo, hi)
    return RayBundle(
        config.origin_arr,
        dirs[keep],
        bb.ravel()[keep],
        kk.ravel()[keep],
        el[keep],
        step,
    )


@dataclass(frozen=True, eq=False)
class RenderResult:
    ray_index: np.ndarray
    face_index: np.ndarray
    t: np.ndarray
    u: np.ndarray
    v: np.ndarray
    points: np.ndarray


@njit(cache=True)
def _mt_scalar(d0, d1, d2, tri, f):
    """Moller-Trumbore for a ray from the origin; returns (t, u, v) or t = -1 on a miss."""
    ax, ay, az = tri[f, 0, 0], tri[f, 0, 1], tri[f, 0, 2]
    e1x, e1y, e1z = tri[f, 1, 0] - ax, tri[f, 1, 1] - ay, tri[f, 1, 2] - az
    e2x, e2y, e2z = tri[f, 2, 0] - ax, tri[f, 2, 1] - ay, tri[f, 2, 2] - az
    px, py, pz = d1 * e2z - d2 * e2y, d2 * e2x - d0 * e2z, d0 * e2y - d1 * e2x
    det = e1x * px + e1y * py + e1z * pz
    nx, ny, nz = e1y * e2z - e1z * e2y, e1z * e2x - e1x * e2z, e1x * e2y - e1y * e2x
    scale = np.sqrt(nx * nx + ny * ny + nz * nz)
    if not abs(det) > _PARALLEL_TOL * scale:
        return -1.0, 0.0, 0.0
    inv = 1.0 / det
    tx, ty, tz = -ax, -ay, -az
    u = (tx * px + ty * py + tz * pz) * inv
    if u < 0.0:
        return -1.0, 0.0, 0.0
    qx, qy, qz = ty * e1z - tz * e1y, tz * e1x - tx * e1z, tx * e1y - ty * e1x
    v = (d0 * qx + d1 * qy + d2 * qz) * inv
    if v < 0.0 or u + v > 1.0:
        return -1.0, 0.0, 0.0
    t = (e2x * qx + e2y * qy + e2z * qz) * inv
    if not t > MIN_HIT_DISTANCE:
        return -1.0, 0.0, 0.0
    return t, u, v


@njit(cache=True)
def _consider(best_t, best_f, best_u, best_v, r, f, t, u, v):
    # nearest hit wins; exact ties go to the lower face index
    if best_f[r] < 0 or t < best_t[r] or (t == best_t[r] and f < best_f[r]):
        best_t[r] = t
        best_f[r] = f
        best_u[r] = u
        best_v[r] = v


@njit(cache=True)
def _seg_dist(px, py, qx, qy):
    dx, dy = qx - px, qy - py
    denom = dx * dx + dy * dy
    s = 0.0
    if denom > 0.0:
        s = min(max(-(px * dx + py * dy) / denom, 0.0), 1.0)
    cx, cy = px + s * dx, py + s * dy
    return np.sqrt(cx * cx + cy * cy)


@njit(cache=True)
def _render_lattice(tri, dirs, lookup, row_el, k_min, step, center, best_t, best_f, best_u, best_v):
    n_rows, n_cols = lookup.shape
    for f in range(tri.shape[0]):
        ax, ay = tri[f, 0, 0], tri[f, 0, 1]
        bx, by = tri[f, 1, 0], tri[f, 1, 1]
        cx, cy = tri[f, 2, 0], tri[f, 2, 1]
        # 2D distance from the sensor axis to the projected triangle
        s1 = (bx - ax) * (-ay) - (by - ay) * (-ax)
        s2 = (cx - bx) * (-by) - (cy - by) * (-bx)
        s3 = (ax - cx) * (-cy) - (ay - cy) * (-cx)
        if (s1 >= 0 and s2 >= 0 and s3 >= 0) or (s1 <= 0 and s2 <= 0 and s3 <= 0):
            r_min = 0.0
        else:
            r_min = min(_seg_dist(ax, ay, bx, by), _seg_dist(bx, by, cx, cy), _seg_dist(cx, cy, ax, ay))
        r_max = max(np.sqrt(ax * ax + ay * ay), np.sqrt(bx * bx + by * by), np.sqrt(cx * cx + cy * cy))
        z_lo = min(tri[f, 0, 2], tri[f, 1, 2], tri[f, 2, 2])
        z_hi = max(tri[f, 0, 2], tri[f, 1, 2], tri[f, 2, 2])
        el_hi = np.arctan2(z_hi, r_min if z_hi > 0 else r_max) + 1e-9
        el_lo = np.arctan2(z_lo, r_min if z_lo < 0 else r_max) - 1e-9
        # row elevations are strictly decreasing
        r0 = 0
        while r0 < n_rows and row_el[r0] > el_hi:
            r0 += 1
        r1 = n_rows - 1
        while r1 >= r0 and row_el[r1] < el_lo:
            r1 -= 1
        if r1 < r0:
            continue
        c0, c1 = 0, n_cols - 1
        if r_min > 0.0:
            lo, hi = np.inf, -np.inf
            for k in range(3):
                a = np.arctan2(tri[f, k, 1], tri[f, k, 0]) - center
                a = (a + np.pi) % (2 * np.pi) - np.pi
                lo = min(lo, a)
                hi = max(hi, a)
            if hi - lo <= np.pi:
                c0 = max(int(np.ceil((center + lo - 1e-9) / step)) - k_min, 0)
                c1 = min(int(np.floor((center + hi + 1e-9) / step)) - k_min, n_cols - 1)
        for row in range(r0, r1 + 1):
            for col in range(c0, c1 + 1):
                r = lookup[row, col]
                if r < 0:
                    continue
                t, u, v = _mt_scalar(dirs[r, 0], dirs[r, 1], dirs[r, 2], tri, f)
                if t > 0.0:
                    _consider(best_t, best_f, best_u, best_v, r, f, t, u, v)


@njit(cache=True)
def _render_brute(tri, dirs, candidates, best_t, best_f, best_u, best_v):
    for i in range(candidates.size):
        r = candidates[i]
        for f in range(tri.shape[0]):
            t, u, v = _mt_scalar(dirs[r, 0], dirs[r, 1], dirs[r, 2], tri, f)
            if t > 0.0:
                _consider(best_t, best_f, best_u, best_v, r, f, t, u, v)


def _lattice_lookup(rays: RayBundle):
    beams, row_of = np.unique(rays.beam, return_inverse=True)
    row_el = np.empty(beams.size)
    row_el[row_of] = rays.elevation
    k_min = int(rays.az_index.min())
    n_cols = int(rays.az_index.max()) - k_min + 1
    lookup = np.full((beams.size, n_cols), -1, dtype=np.int64)
    lookup[row_of, rays.az_index - k_min] = np.arange(len(rays))
    center = 0.5 * (k_min + int(rays.az_index.max())) * rays.azimuth_step
    return lookup, row_el, k_min, center


def render_hits(mesh: TriangleMesh, rays: RayBundle) -> RenderResult:
    """Nearest hit per ray; rays that miss produce nothing.

    Lattice bundles go through the angular broad-phase, other bundles through
    an AABB slab pre-filter followed by an exhaustive face loop.  Both paths
    use the same intersection kernel and tie rule, so they agree bit for bit.
    """
    n = len(rays)
    if n == 0 or mesh.n_faces == 0:
        return RenderResult(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0), np.zeros(0),
                            np.zeros(0), np.zeros((0, 3)))
    origin = np.asarray(rays.origin, dtype=float)
    tri = np.ascontiguousarray(mesh.vertices[mesh.faces] - origin)
    dirs = np.ascontiguousarray(rays.directions, dtype=float)
    best_t = np.full(n, np.inf)
    best_f = np.full(n, -1, dtype=np.int64)
    best_u = np.zeros(n)
    best_v = np.zeros(n)
    if rays.is_lattice:
        lookup, row_el, k_min, center = rays.lattice_lookup
        _render_lattice(tri, dirs, lookup, row_el, k_min, float(rays.azimuth_step), center,
                        best_t, best_f, best_u, best_v)
    else:
        flat = tri.reshape(-1, 3)
        cand = np.flatnonzero(_slab(np.zeros(3), dirs, flat.min(axis=0), flat.max(axis=0)))
        _render_brute(tri, dirs, cand.astype(np.int64), best_t, best_f, best_u, best_v)
    r = np.flatnonzero(best_f >= 0)
    t = best_t[r]
    points = origin + t[:, None] * dirs[r]
    return RenderResult(r, best_f[r], t, best_u[r], best_v[r], points)


def render_mesh(mesh: TriangleMesh, rays: RayBundle) -> np.ndarray:
    """Rendered LiDAR points of ``mesh`` for the given rays, in ray order."""
    return render_hits(mesh, rays).points


def hit_point_jacobian(mesh: TriangleMesh, rays: RayBundle, hits: RenderResult):
    """Sensitivity of each hit point to the vertices of the hit face.

    Returns ``(weights, directions, normal_scaled)`` such that, for vertex ``k``
    of the face hit by ray ``i``, ``d p_i / d v_k = weights[i, k] *
    outer(directions[i], normal_scaled[i])``.  The point stays on its ray and
    follows the plane, which moves by the barycentric share of the vertex.
    """
    tri = mesh.vertices[mesh.faces[hits.face_index]]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    d = rays.directions[hits.ray_index]
    nd = np.einsum("ij,ij->i", n, d)
    weights = np.stack([1.0 - hits.u - hits.v, hits.u, hits.v], axis=1)
    return weights, d, n / nd[:, None]


def compose_scene(original, rendered, mesh: TriangleMesh | None = None, mode: str = "union",
                  origin=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Insert rendered adversary points into a sweep.

    ``union`` concatenates.  ``occlude`` first drops original points whose ray
    from the sensor hits ``mesh`` before reaching them.
    """
    original = as_cloud(original)
    rendered = as_cloud(rendered)
    if mode == "union" or rendered.shape[0] == 0 and mesh is None:
        return np.vstack([original, rendered])
    if mode != "occlude":
        raise ValueError(f"unknown composition mode {mode!r}")
    if mesh is None:
        raise ValueError("occlude mode needs the mesh")
    origin = np.asarray(origin, dtype=float)
    rel = original - origin
    dist = np.linalg.norm(rel, axis=1)
    safe = dist > 0
    dirs = np.zeros_like(rel)
    dirs[safe] = rel[safe] / dist[safe, None]
    hits = render_hits(mesh, RayBundle(origin, dirs))
    blocked = np.zeros(original.shape[0], dtype=bool)
    blocked[hits.ray_index] = hits.t < dist[hits.ray_index] - MIN_HIT_DISTANCE
    return np.vstack([original[~blocked], rendered])
