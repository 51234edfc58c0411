"""KITTI-layout IO and a raycast synthetic driving-scene generator."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .scene_core import BoxBEV, SceneFrame, as_cloud, bev_iou_many, points_in_box_mask, wrap_angle
from .mesh import TriangleMesh, icosphere
from .raycast import SensorConfig, render_hits, sample_rays
from .roof_fit import CarShape

__all__ = [
    "GROUND_Z",
    "MIN_TARGET_POINTS",
    "KittiFormatError",
    "KittiCalib",
    "read_velodyne",
    "write_velodyne",
    "read_calib",
    "write_calib",
    "read_labels",
    "format_labels",
    "load_kitti_frame",
    "write_kitti_frame",
    "load_kitti_dir",
    "eligible_targets",
    "SyntheticParams",
    "SyntheticVehicle",
    "generate_synthetic_dataset",
    "generate_frame",
    "render_objects",
]

log = logging.getLogger(__name__)

GROUND_Z = -1.73
MIN_TARGET_POINTS = 10


class KittiFormatError(ValueError):
    pass


# --------------------------------------------------------------------------- KITTI


def read_velodyne(path) -> np.ndarray:
    """``(N, 3)`` float64 cloud from a little-endian float32 ``x y z intensity`` file."""
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        raise KittiFormatError(f"{path}: length {len(raw)} is not a multiple of 16 bytes")
    return np.frombuffer(raw, dtype="<f4").reshape(-1, 4)[:, :3].astype(float)


def write_velodyne(path, cloud, intensity=None) -> Path:
    pts = as_cloud(cloud)
    out = np.zeros((pts.shape[0], 4), dtype="<f4")
    out[:, :3] = pts
    if intensity is not None:
        out[:, 3] = intensity
    path = Path(path)
    path.write_bytes(out.tobytes())
    return path


@dataclass(frozen=True, eq=False)
class KittiCalib:
    """Velodyne/rectified-camera calibration.

    ``p_rect = R0_rect @ Tr_velo_to_cam @ p_velo`` (homogeneous), so the
    inverse map is ``p_velo = inv(Tr_velo_to_cam) @ inv(R0_rect) @ p_rect``.
    """

    tr_velo_to_cam: np.ndarray
    r0_rect: np.ndarray

    @classmethod
    def default(cls) -> "KittiCalib":
        # camera axes: x right, y down, z forward
        tr = np.array([[0.0, -1.0, 0.0, 0.0], [0.0, 0.0, -1.0, 0.0], [1.0, 0.0, 0.0, 0.0]])
        return cls(tr, np.eye(3))

    @property
    def velo_to_rect(self) -> np.ndarray:
        tr = np.vstack([self.tr_velo_to_cam, [0.0, 0.0, 0.0, 1.0]])
        r0 = np.eye(4)
        r0[:3, :3] = self.r0_rect
        return r0 @ tr

    @property
    def rect_to_velo(self) -> np.ndarray:
        tr = np.vstack([self.tr_velo_to_cam, [0.0, 0.0, 0.0, 1.0]])
        r0 = np.eye(4)
        r0[:3, :3] = self.r0_rect
        return np.linalg.inv(tr) @ np.linalg.inv(r0)

    def to_velo(self, p_rect) -> np.ndarray:
        p = np.atleast_2d(np.asarray(p_rect, dtype=float))
        return p @ self.rect_to_velo[:3, :3].T + self.rect_to_velo[:3, 3]

    def to_rect(self, p_velo) -> np.ndarray:
        p = np.atleast_2d(np.asarray(p_velo, dtype=float))
        return p @ self.velo_to_rect[:3, :3].T + self.velo_to_rect[:3, 3]


def read_calib(path) -> KittiCalib:
    values = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        key, sep, rest = line.partition(":")
        if not sep:
            raise KittiFormatError(f"{path}:{lineno}: expected 'key: values'")
        try:
            values[key.strip()] = np.array([float(v) for v in rest.split()])
        except ValueError:
            raise KittiFormatError(f"{path}:{lineno}: non-numeric calibration entry") from None
    for key, n in (("Tr_velo_to_cam", 12), ("R0_rect", 9)):
        if key not in values:
            raise KittiFormatError(f"{path}: missing calibration key {key}")
        if values[key].size != n:
            raise KittiFormatError(f"{path}: {key} needs {n} values, got {values[key].size}")
    return KittiCalib(values["Tr_velo_to_cam"].reshape(3, 4), values["R0_rect"].reshape(3, 3))


def _fmt(x) -> str:
    return repr(float(x))


def write_calib(path, calib: KittiCalib) -> Path:
    lines = [
        "P0: " + " ".join(_fmt(v) for v in np.hstack([np.eye(3), np.zeros((3, 1))]).ravel()),
        "P2: " + " ".join(_fmt(v) for v in np.hstack([np.eye(3), np.zeros((3, 1))]).ravel()),
        "R0_rect: " + " ".join(_fmt(v) for v in calib.r0_rect.ravel()),
        "Tr_velo_to_cam: " + " ".join(_fmt(v) for v in calib.tr_velo_to_cam.ravel()),
    ]
    path = Path(path)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _heading_to_velo(ry, calib: KittiCalib) -> float:
    # object x axis in the rectified camera frame is (cos ry, 0, -sin ry)
    d = calib.rect_to_velo[:3, :3] @ np.array([np.cos(ry), 0.0, -np.sin(ry)])
    return float(np.arctan2(d[1], d[0]))


def _heading_to_rect(alpha, calib: KittiCalib) -> float:
    d = calib.velo_to_rect[:3, :3] @ np.array([np.cos(alpha), np.sin(alpha), 0.0])
    return float(np.arctan2(-d[2], d[0]))


def read_labels(path, calib: KittiCalib, classes=("Car",)) -> tuple:
    """Boxes of the requested classes from a ``label_2`` file, in the velodyne frame."""
    boxes = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) < 15:
            raise KittiFormatError(f"{path}:{lineno}: expected 15 fields, got {len(parts)}")
        if parts[0] not in classes:
            continue
        try:
            h, w, length, x, y, z, ry = (float(v) for v in parts[8:15])
        except ValueError:
            raise KittiFormatError(f"{path}:{lineno}: unparseable label values") from None
        bottom = calib.to_velo([x, y, z])[0]
        boxes.append(BoxBEV(bottom[0], bottom[1], length, w, _heading_to_velo(ry, calib), bottom[2], bottom[2] + h))
    return tuple(boxes)


def format_labels(boxes, calib: KittiCalib, cls: str = "Car") -> str:
    lines = []
    for b in boxes:
        x, y, z = calib.to_rect([b.x, b.y, b.z_min])[0]
        ry = _heading_to_rect(b.alpha, calib)
        vals = [b.z_max - b.z_min, b.h, b.w, x, y, z, ry]
        lines.append(f"{cls} 0.0 0 0.0 0.0 0.0 0.0 0.0 " + " ".join(_fmt(v) for v in vals))
    return "".join(line + "\n" for line in lines)


def load_kitti_frame(velodyne_path, label_path, calib_path) -> SceneFrame:
    calib = read_calib(calib_path)
    cloud = read_velodyne(velodyne_path)
    labels = read_labels(label_path, calib)
    return SceneFrame(Path(velodyne_path).stem, cloud, labels)


def write_kitti_frame(frame: SceneFrame, root, calib: KittiCalib | None = None) -> dict:
    """Write ``velodyne/<id>.bin``, ``label_2/<id>.txt`` and ``calib/<id>.txt`` under ``root``."""
    calib = calib or KittiCalib.default()
    root = Path(root)
    paths = {}
    for sub, suffix in (("velodyne", ".bin"), ("label_2", ".txt"), ("calib", ".txt")):
        (root / sub).mkdir(parents=True, exist_ok=True)
        paths[sub] = root / sub / f"{frame.frame_id}{suffix}"
    write_velodyne(paths["velodyne"], frame.cloud)
    paths["label_2"].write_text(format_labels(frame.labels, calib), encoding="utf-8")
    write_calib(paths["calib"], calib)
    return paths


def load_kitti_dir(root, split=None) -> list:
    """All frames of a KITTI-layout directory (optionally restricted to ids in ``split``)."""
    root = Path(root)
    for sub in ("velodyne", "label_2", "calib"):
        if not (root / sub).is_dir():
            raise KittiFormatError(f"{root}: missing {sub}/ directory")
    ids = sorted(p.stem for p in (root / "velodyne").glob("*.bin"))
    if split is not None:
        wanted = set(split)
        ids = [i for i in ids if i in wanted]
    return [
        load_kitti_frame(root / "velodyne" / f"{i}.bin", root / "label_2" / f"{i}.txt", root / "calib" / f"{i}.txt")
        for i in ids
    ]


def eligible_targets(frame: SceneFrame, min_points: int = MIN_TARGET_POINTS) -> list:
    """Indices of labels with at least ``min_points`` points inside their box."""
    counts = frame.label_point_counts()
    return [i for i, c in enumerate(counts) if c >= min_points]


# --------------------------------------------------------------------------- synthetic scenes


@dataclass(frozen=True)
class SyntheticParams:
    """Scene-generator settings.

    Vehicles are placed at ranges ``range_m`` within ``azimuth_deg`` of the
    forward axis and inside ``y_limit``.  Headings follow the road axes
    (0, pi, +-pi/2 with ``heading_weights``) plus Gaussian jitter.
    ``distractors`` bounds the per-frame count of unlabeled vans, trucks and
    roadside blobs.
    """

    n_frames: int = 20
    vehicles: tuple = (1, 8)
    range_m: tuple = (5.0, 45.0)
    azimuth_deg: float = 40.0
    y_limit: float = 26.0
    heading_weights: tuple = (0.4, 0.3, 0.15, 0.15)
    heading_jitter_deg: float = 2.0
    distractors: tuple = (1, 4)
    clutter_points: int = 1500
    mesh_spacing: float = 0.08

    def __post_init__(self):
        if self.n_frames < 0:
            raise ValueError("n_frames must be non-negative")
        lo, hi = self.vehicles
        if not 1 <= lo <= hi:
            raise ValueError("vehicles must be a range within [1, inf)")
        if not 0 < self.range_m[0] < self.range_m[1]:
            raise ValueError("range_m must be an increasing positive range")
        if len(self.heading_weights) != 4 or min(self.heading_weights) < 0 or sum(self.heading_weights) <= 0:
            raise ValueError("heading_weights needs four non-negative weights")


@dataclass(frozen=True, eq=False)
class SyntheticVehicle:
    box: BoxBEV
    shape: CarShape

    @property
    def roof_center(self) -> np.ndarray:
        """True roof center in the sensor frame."""
        rc = self.shape.roof_center
        c, s = np.cos(self.box.alpha), np.sin(self.box.alpha)
        return np.array([self.box.x + c * rc[0] - s * rc[1], self.box.y + s * rc[0] + c * rc[1], self.box.z_min + rc[2]])


def _place(mesh: TriangleMesh, x, y, alpha, z0=GROUND_Z) -> TriangleMesh:
    c, s = np.cos(alpha), np.sin(alpha)
    T = np.array([[c, -s, 0.0, x], [s, c, 0.0, y], [0.0, 0.0, 1.0, z0], [0.0, 0.0, 0.0, 1.0]])
    return mesh.transformed(T)


def render_objects(meshes, sensor: SensorConfig) -> tuple:
    """Raycast several meshes with mutual occlusion.

    Returns the points and, per point, the index of the mesh it came from.
    """
    keys, ts, pts, owner = [], [], [], []
    for k, mesh in enumerate(meshes):
        lo, hi = mesh.aabb()
        rays = sample_rays(sensor, (lo, hi))
        if len(rays) == 0:
            continue
        res = render_hits(mesh, rays)
        keys.append(rays.keys()[res.ray_index])
        ts.append(res.t)
        pts.append(res.points)
        owner.append(np.full(res.t.size, k))
    if not keys:
        return np.zeros((0, 3)), np.zeros(0, dtype=int)
    keys, ts, pts, owner = (np.concatenate(a) for a in (keys, ts, pts, owner))
    # nearest hit per ray key wins; ties go to the earlier mesh
    order = np.lexsort((owner, ts, keys))
    keys, ts, pts, owner = keys[order], ts[order], pts[order], owner[order]
    first = np.ones(keys.size, dtype=bool)
    first[1:] = keys[1:] != keys[:-1]
    return pts[first], owner[first]


def _sample_heading(params: SyntheticParams, rng) -> float:
    w = np.asarray(params.heading_weights, dtype=float)
    base = np.array([0.0, np.pi, np.pi / 2, -np.pi / 2])[rng.choice(4, p=w / w.sum())]
    return wrap_angle(base + np.deg2rad(params.heading_jitter_deg) * rng.standard_normal())


def _sample_position(params: SyntheticParams, rng):
    r = rng.uniform(*params.range_m)
    az = np.deg2rad(rng.uniform(-params.azimuth_deg, params.azimuth_deg))
    x, y = r * np.cos(az), r * np.sin(az)
    return x, float(np.clip(y, -params.y_limit, params.y_limit))


def _distractor(rng, params: SyntheticParams):
    """Unlabeled object: ``(mesh in vehicle frame, length, width)``."""
    kind = rng.choice(3, p=[0.45, 0.25, 0.3])
    if kind == 0:
        # van: car-like footprint, tall cabin over most of the length
        length = rng.uniform(4.3, 5.4)
        height = rng.uniform(1.9, 2.4)
        shape = CarShape(length=length, width=rng.uniform(1.85, 2.05), height=height,
                         body_height=height * rng.uniform(0.45, 0.55), cabin_length=length * rng.uniform(0.72, 0.85),
                         cabin_inset=0.06, cabin_offset=-0.1 * length * rng.uniform(0.0, 0.5))
        return shape.mesh(params.mesh_spacing), shape.length, shape.width
    if kind == 1:
        # box truck
        length = rng.uniform(6.0, 8.0)
        width = rng.uniform(2.2, 2.5)
        height = rng.uniform(2.8, 3.3)
        shape = CarShape(length=length, width=width, height=height, body_height=height * 0.35,
                         cabin_length=length * 0.9, cabin_inset=0.02, cabin_offset=-0.04 * length,
                         body_radius=0.05, cabin_radius=0.05)
        return shape.mesh(2 * params.mesh_spacing), length, width
    # roadside blob: bush, bin, post
    radius = rng.uniform(0.3, 0.8)
    m = icosphere(2)
    scale = np.array([radius * rng.uniform(0.7, 1.3), radius * rng.uniform(0.7, 1.3), radius * rng.uniform(0.8, 1.6)])
    v = m.vertices * scale
    v[:, 2] += scale[2]
    return TriangleMesh(v, m.faces), 2 * scale[0], 2 * scale[1]


def _free(box: BoxBEV, placed, margin: float = 0.6) -> bool:
    if not placed:
        return True
    big = BoxBEV(box.x, box.y, box.w + 2 * margin, box.h + 2 * margin, box.alpha, box.z_min, box.z_max)
    arr = np.array([b.to_array() for b in placed])
    arr[:, 2:4] += 2 * margin
    return bool(np.all(bev_iou_many(arr, big) == 0.0)) and abs(box.y) + box.w / 2 < 28.0


def generate_frame(frame_id: str, params: SyntheticParams, sensor: SensorConfig, rng, shapes=None):
    """One synthetic sweep.

    Returns the SceneFrame and its ``SyntheticVehicle`` records (label order).
    """
    rng = np.random.default_rng(rng)
    n_veh = int(rng.integers(params.vehicles[0], params.vehicles[1] + 1))
    n_dis = int(rng.integers(params.distractors[0], params.distractors[1] + 1))
    placed, vehicles, meshes = [], [], []
    for _ in range(n_veh):
        for _attempt in range(30):
            shape = shapes[int(rng.integers(len(shapes)))] if shapes else CarShape.sample(rng)
            x, y = _sample_position(params, rng)
            alpha = _sample_heading(params, rng)
            box = BoxBEV(x, y, shape.length, shape.width, alpha, GROUND_Z, GROUND_Z + shape.height)
            if _free(box, placed):
                placed.append(box)
                vehicles.append(SyntheticVehicle(box, shape))
                meshes.append(_place(shape.mesh(params.mesh_spacing), x, y, alpha))
                break
    for _ in range(n_dis):
        mesh, length, width = _distractor(rng, params)
        for _attempt in range(30):
            x, y = _sample_position(params, rng)
            alpha = _sample_heading(params, rng)
            box = BoxBEV(x, y, length, width, alpha, GROUND_Z, GROUND_Z + 1.0)
            if _free(box, placed):
                placed.append(box)
                meshes.append(_place(mesh, x, y, alpha))
                break
    pts, _ = render_objects(meshes, sensor)
    clutter = _ground_clutter(params, rng, placed)
    cloud = np.vstack([pts, clutter]).astype(np.float32).astype(float)
    labels = tuple(v.box for v in vehicles)
    return SceneFrame(frame_id, cloud, labels), vehicles


def _ground_clutter(params: SyntheticParams, rng, placed) -> np.ndarray:
    n = params.clutter_points
    r = np.sqrt(rng.uniform(params.range_m[0] ** 2 * 0.25, (params.range_m[1] + 5) ** 2, n))
    az = np.deg2rad(rng.uniform(-params.azimuth_deg - 5, params.azimuth_deg + 5, n))
    pts = np.column_stack([r * np.cos(az), r * np.sin(az), GROUND_Z + 0.02 * rng.standard_normal(n)])
    keep = np.ones(n, dtype=bool)
    for box in placed:
        keep &= ~points_in_box_mask(pts, BoxBEV(box.x, box.y, box.w, box.h, box.alpha, -10.0, 10.0))
    return pts[keep]


def generate_synthetic_dataset(params: SyntheticParams, sensor: SensorConfig | None = None, rng=0,
                               shapes=None, prefix: str = "", return_vehicles: bool = False):
    """Deterministic list of synthetic frames (ids ``<prefix>000000`` ...).

    Each frame draws its own child seed, so frame ``i`` does not depend on
    ``n_frames``.
    """
    sensor = sensor or SensorConfig()
    seeds = np.random.SeedSequence(rng if isinstance(rng, (int, np.integer)) else
                                   int(np.random.default_rng(rng).integers(2**63)))
    children = seeds.spawn(params.n_frames)
    frames, records = [], []
    for i, child in enumerate(children):
        frame, vehicles = generate_frame(f"{prefix}{i:06d}", params, sensor, np.random.default_rng(child), shapes)
        frames.append(frame)
        records.append(vehicles)
    return (frames, records) if return_vehicles else frames
