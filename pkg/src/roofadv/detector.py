"""Reference BEV detectors: a rotated linear template over voxel or pillar features.

The detector slides one learned template over a bird's-eye-view feature map at
every cell and at ``n_headings`` headings in ``[0, pi)``.  The template ``W``
lives in the anchor-box frame; the kernel for heading ``theta`` is obtained by
bilinear resampling of ``W`` on the rotated lattice, i.e. ``K_h = S_h W`` with a
fixed sparse matrix ``S_h``.  Scores are ``sigmoid(<K_h, window> + b)``.

Three feature representations mirror common LiDAR detector inputs:

``occupancy_grid``
    binary voxels.
``density_grid``
    ``log1p`` of trilinear point density per voxel (differentiable in the
    point coordinates almost everywhere).
``point_features``
    per-pillar ``log1p`` count plus max and mean height, each on a hat basis.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.fft as sfft
import scipy.sparse as sp
from scipy.special import expit
from numba import njit
from sklearn.base import BaseEstimator, ClassifierMixin

from .scene_core import BoxBEV, Proposal, SceneFrame, as_cloud, bev_iou_many, wrap_angle

__all__ = [
    "BEVGridConfig",
    "DetectionResult",
    "TemplateDetector",
    "AnchorCache",
    "REPRESENTATIONS",
    "voxelize",
    "features",
    "detect",
    "nms",
    "relevant_proposals",
    "is_detected",
    "train_detector",
    "save_detector",
    "load_detector",
    "DetectorFormatError",
    "TrainingDivergedError",
    "PROPOSAL_FLOOR",
    "DETECTION_SCORE",
]

log = logging.getLogger(__name__)

REPRESENTATIONS = ("occupancy_grid", "density_grid", "point_features")
HEIGHT_NODES = 6
PILLAR_CHANNELS = 1 + 2 * HEIGHT_NODES
PROPOSAL_FLOOR = 0.01
DETECTION_SCORE = 0.5
RELEVANT_SCORE = 0.1
RELEVANT_IOU = 0.1
LOGIT_CLIP = 35.0


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class BEVGridConfig:
    x_range: tuple = (0.0, 52.0)
    y_range: tuple = (-28.0, 28.0)
    cell: float = 0.2
    z_range: tuple = (-1.55, 1.05)
    z_bins: int = 13
    mode: str = "density"

    def __post_init__(self):
        if self.cell <= 0 or self.z_bins < 1:
            raise ValueError("cell size and z_bins must be positive")
        for name in ("x_range", "y_range", "z_range"):
            lo, hi = getattr(self, name)
            if hi <= lo:
                raise ValueError(f"{name} must be increasing")
            object.__setattr__(self, name, (float(lo), float(hi)))
        for name in ("x_range", "y_range"):
            lo, hi = getattr(self, name)
            n = (hi - lo) / self.cell
            if abs(n - round(n)) > 1e-6:
                raise ValueError(f"{name} is not a whole number of {self.cell} m cells")
        if self.mode not in ("occupancy", "density"):
            raise ValueError(f"unknown grid mode {self.mode!r}")

    @property
    def nx(self) -> int:
        return int(round((self.x_range[1] - self.x_range[0]) / self.cell))

    @property
    def ny(self) -> int:
        return int(round((self.y_range[1] - self.y_range[0]) / self.cell))

    @property
    def nz(self) -> int:
        return self.z_bins

    @property
    def z_cell(self) -> float:
        return (self.z_range[1] - self.z_range[0]) / self.z_bins

    @property
    def lo(self) -> np.ndarray:
        return np.array([self.x_range[0], self.y_range[0], self.z_range[0]])

    @property
    def cell_sizes(self) -> np.ndarray:
        return np.array([self.cell, self.cell, self.z_cell])

    @property
    def dims(self) -> np.ndarray:
        return np.array([self.nx, self.ny, self.nz])

    def cell_centers_xy(self, ix, iy):
        return (self.x_range[0] + (np.asarray(ix) + 0.5) * self.cell,
                self.y_range[0] + (np.asarray(iy) + 0.5) * self.cell)

    def with_mode(self, mode: str) -> "BEVGridConfig":
        return BEVGridConfig(self.x_range, self.y_range, self.cell, self.z_range, self.z_bins, mode)


# --------------------------------------------------------------------------- voxels


def _density_terms(points, grid: BEVGridConfig):
    """Flat cell index ``(N, 8)``, weight ``(N, 8)`` and weight gradient ``(N, 8, 3)``.

    Only points inside the hull of voxel centers contribute, so each point
    spreads exactly unit mass.
    """
    pts = as_cloud(points)
    dims = grid.dims
    g = (pts - grid.lo) / grid.cell_sizes - 0.5
    valid = np.all((g >= 0.0) & (g <= dims - 1), axis=1)
    g = g[valid]
    i0 = np.minimum(np.floor(g).astype(np.int64), dims - 2)
    f = g - i0
    offs = np.array([[a, b, c] for a in (0, 1) for b in (0, 1) for c in (0, 1)])
    w_axis = np.where(offs[None] == 1, f[:, None, :], 1.0 - f[:, None, :])
    weights = np.prod(w_axis, axis=2)
    sign = np.where(offs == 1, 1.0, -1.0)
    grad = np.empty(weights.shape + (3,))
    for ax in range(3):
        others = [a for a in range(3) if a != ax]
        grad[..., ax] = sign[None, :, ax] * w_axis[..., others[0]] * w_axis[..., others[1]] / grid.cell_sizes[ax]
    idx = i0[:, None, :] + offs[None]
    flat = (idx[..., 0] * dims[1] + idx[..., 1]) * dims[2] + idx[..., 2]
    return flat, weights, grad, valid


def _occupancy_cells(points, grid: BEVGridConfig):
    pts = as_cloud(points)
    idx = np.floor((pts - grid.lo) / grid.cell_sizes).astype(np.int64)
    valid = np.all((idx >= 0) & (idx < grid.dims), axis=1)
    idx = idx[valid]
    return (idx[:, 0] * grid.ny + idx[:, 1]) * grid.nz + idx[:, 2], valid


def _pillar_cells(points, grid: BEVGridConfig):
    pts = as_cloud(points)
    ix = np.floor((pts[:, 0] - grid.x_range[0]) / grid.cell).astype(np.int64)
    iy = np.floor((pts[:, 1] - grid.y_range[0]) / grid.cell).astype(np.int64)
    valid = (ix >= 0) & (ix < grid.nx) & (iy >= 0) & (iy < grid.ny)
    valid &= (pts[:, 2] >= grid.z_range[0]) & (pts[:, 2] < grid.z_range[1])
    return ix[valid] * grid.ny + iy[valid], pts[valid, 2], valid


def voxelize(cloud, config: BEVGridConfig) -> np.ndarray:
    """Occupancy or trilinear-density voxel grid of shape ``(nx, ny, nz)``."""
    n = config.nx * config.ny * config.nz
    if config.mode == "occupancy":
        flat, _ = _occupancy_cells(cloud, config)
        out = np.zeros(n)
        out[flat] = 1.0
    else:
        flat, w, _, _ = _density_terms(cloud, config)
        out = np.bincount(flat.ravel(), weights=w.ravel(), minlength=n)
    return out.reshape(config.nx, config.ny, config.nz)


def _pillar_stats(cloud, grid: BEVGridConfig):
    col, z, _ = _pillar_cells(cloud, grid)
    n = grid.nx * grid.ny
    count = np.bincount(col, minlength=n).astype(float)
    sum_z = np.bincount(col, weights=z, minlength=n)
    max_z = np.full(n, -np.inf)
    np.maximum.at(max_z, col, z)
    return count, sum_z, max_z


def _height_basis(h, occupied):
    """Hat-function encoding of normalised heights on ``HEIGHT_NODES`` evenly spaced nodes."""
    pos = np.clip(h, 0.0, 1.0) * (HEIGHT_NODES - 1)
    nodes = np.arange(HEIGHT_NODES)
    w = np.maximum(0.0, 1.0 - np.abs(pos[..., None] - nodes))
    return np.where(occupied[..., None], w, 0.0)


def _pillar_features(count, sum_z, max_z, grid: BEVGridConfig):
    z0, span = grid.z_range[0], grid.z_range[1] - grid.z_range[0]
    occupied = count > 0
    safe = np.where(occupied, count, 1.0)
    top = np.where(occupied, (max_z - z0) / span, 0.0)
    mean = np.where(occupied, (sum_z / safe - z0) / span, 0.0)
    # heights enter through a hat basis so the linear template can penalise points above roof level
    return np.concatenate([np.log1p(count)[..., None], _height_basis(top, occupied), _height_basis(mean, occupied)],
                          axis=-1)


def features(cloud, representation: str, grid: BEVGridConfig) -> np.ndarray:
    """Feature map ``(nx, ny, C)`` for a representation."""
    if representation == "occupancy_grid":
        return voxelize(cloud, grid.with_mode("occupancy"))
    if representation == "density_grid":
        return np.log1p(voxelize(cloud, grid.with_mode("density")))
    if representation == "point_features":
        count, sum_z, max_z = _pillar_stats(cloud, grid)
        return _pillar_features(count, sum_z, max_z, grid).reshape(grid.nx, grid.ny, PILLAR_CHANNELS)
    raise ValueError(f"unknown representation {representation!r}")


def n_channels(representation: str, grid: BEVGridConfig) -> int:
    return PILLAR_CHANNELS if representation == "point_features" else grid.nz


# --------------------------------------------------------------------------- results


@dataclass(frozen=True, eq=False)
class DetectionResult:
    """Proposals above the score floor, score-descending.

    ``boxes`` rows are ``BoxBEV.to_array`` layouts; ``logits`` are the clipped
    pre-sigmoid scores.
    """

    boxes: np.ndarray
    scores: np.ndarray
    logits: np.ndarray

    def __len__(self) -> int:
        return self.scores.size

    @cached_property
    def proposals(self) -> tuple:
        return tuple(Proposal(BoxBEV.from_array(b), float(s)) for b, s in zip(self.boxes, self.scores))

    @classmethod
    def from_proposals(cls, proposals) -> "DetectionResult":
        proposals = sorted(proposals, key=lambda p: -p.score)
        boxes = np.array([p.box.to_array() for p in proposals]).reshape(-1, 7)
        scores = np.array([p.score for p in proposals], dtype=float)
        with np.errstate(divide="ignore"):
            logits = np.log(scores) - np.log1p(-scores)
        return cls(boxes, scores, logits)

    @classmethod
    def empty(cls) -> "DetectionResult":
        return cls(np.zeros((0, 7)), np.zeros(0), np.zeros(0))


def _as_result(result) -> DetectionResult:
    if isinstance(result, DetectionResult):
        return result
    return DetectionResult.from_proposals(result)


def relevant_proposals(result, gt: BoxBEV, score_threshold: float = RELEVANT_SCORE,
                       iou_threshold: float = RELEVANT_IOU) -> list:
    """Proposals with score > 0.1 and BEV IoU with the ground truth > 0.1."""
    res = _as_result(result)
    if len(res) == 0:
        return []
    iou = bev_iou_many(res.boxes, gt)
    keep = np.flatnonzero((res.scores > score_threshold) & (iou > iou_threshold))
    return [res.proposals[i] for i in keep]


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float = 0.5) -> np.ndarray:
    """Greedy non-maximum suppression; returns kept indices in score order."""
    order = np.argsort(-scores, kind="stable")
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        if order.size == 1:
            break
        rest = order[1:]
        iou = bev_iou_many(boxes[rest], BoxBEV.from_array(boxes[i]))
        order = rest[iou <= iou_threshold]
    return np.asarray(keep, dtype=np.int64)


def is_detected(result, gt: BoxBEV, iou_threshold: float = 0.7, score_threshold: float = DETECTION_SCORE,
                nms_threshold: float = 0.5) -> bool:
    """True iff a confident detection (after greedy NMS) overlaps ``gt`` with IoU > threshold."""
    res = _as_result(result)
    conf = np.flatnonzero(res.scores >= score_threshold)
    if conf.size == 0:
        return False
    boxes = res.boxes[conf]
    near = bev_iou_many(boxes, gt) > 0.0
    if not near.any():
        return False
    kept = nms(boxes, res.scores[conf], nms_threshold)
    iou = bev_iou_many(boxes[kept], gt)
    return bool(np.any(iou > iou_threshold))


# --------------------------------------------------------------------------- template


def _resampling_matrices(template_shape, n_headings: int, radius: int):
    """Sparse ``S_h`` mapping template cells to kernel cells for each heading."""
    lt, wt = template_shape
    k = 2 * radius + 1
    a, b = np.meshgrid(np.arange(k) - radius, np.arange(k) - radius, indexing="ij")
    a, b = a.ravel().astype(float), b.ravel().astype(float)
    mats = []
    for h in range(n_headings):
        th = h * np.pi / n_headings
        c, s = np.cos(th), np.sin(th)
        # kernel offset q expressed in the template (anchor) frame: R(-theta) q
        u = c * a + s * b + (lt - 1) / 2
        v = -s * a + c * b + (wt - 1) / 2
        u = np.where(np.abs(u - np.round(u)) < 1e-9, np.round(u), u)
        v = np.where(np.abs(v - np.round(v)) < 1e-9, np.round(v), v)
        u0, v0 = np.floor(u).astype(int), np.floor(v).astype(int)
        fu, fv = u - u0, v - v0
        rows, cols, vals = [], [], []
        for du, wu in ((0, 1 - fu), (1, fu)):
            for dv, wv in ((0, 1 - fv), (1, fv)):
                uu, vv = u0 + du, v0 + dv
                w = wu * wv
                ok = (uu >= 0) & (uu < lt) & (vv >= 0) & (vv < wt) & (w > 0)
                rows.append(np.flatnonzero(ok))
                cols.append(uu[ok] * wt + vv[ok])
                vals.append(w[ok])
        mats.append(sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                                  shape=(k * k, lt * wt)))
    return mats


class TemplateDetector(ClassifierMixin, BaseEstimator):
    """Linear rotated-template detector with logistic scores.

    Parameters
    ----------
    representation : {"occupancy_grid", "density_grid", "point_features"}
    grid : BEVGridConfig, optional
    anchor_size : (float, float)
        Box length and width in meters for all proposals.
    anchor_z : (float, float)
        Vertical extent assigned to proposals.
    margin : float
        Context border around the anchor box covered by the template.
    n_headings : int
        Discrete headings ``k * pi / n_headings``.
    anchor_stride : int
        Anchor spacing in cells.
    l2 : float
        Ridge penalty on template weights.
    max_iter : int
        Full-batch gradient iterations per ``fit`` round.
    learning_rate : float
        Initial step size; later steps use Barzilai-Borwein with backtracking.
    pos_per_label, neg_per_frame, hard_negative_rounds : int
        Training-set construction.
    empty_weight : float
        Loss weight (out of the 0.5 negative share) of the empty-window
        negative, which anchors the bias for anchors over empty space.
    pos_iou, neg_iou : float
        Anchors with label IoU above ``pos_iou`` are positives; sampled
        negatives have IoU below ``neg_iou``.
    max_bias : float
        Upper bound on the bias, so empty space scores below the 0.01
        proposal floor whatever the training data.
    random_state : int or None
    """

    def __init__(self, representation: str = "density_grid", grid: BEVGridConfig | None = None,
                 anchor_size=(4.2, 1.8), anchor_z=(-1.73, -0.23), margin: float = 0.6, n_headings: int = 8,
                 anchor_stride: int = 1, l2: float = 1e-3, max_iter: int = 300, learning_rate: float = 1.0,
                 pos_per_label: int = 8, neg_per_frame: int = 48, hard_negative_rounds: int = 2,
                 empty_weight: float = 0.25, max_bias: float = -6.0, pos_iou: float = 0.5, neg_iou: float = 0.5,
                 random_state=0):
        self.representation = representation
        self.grid = grid
        self.anchor_size = anchor_size
        self.anchor_z = anchor_z
        self.margin = margin
        self.n_headings = n_headings
        self.anchor_stride = anchor_stride
        self.l2 = l2
        self.max_iter = max_iter
        self.learning_rate = learning_rate
        self.pos_per_label = pos_per_label
        self.neg_per_frame = neg_per_frame
        self.hard_negative_rounds = hard_negative_rounds
        self.empty_weight = empty_weight
        self.max_bias = max_bias
        self.pos_iou = pos_iou
        self.neg_iou = neg_iou
        self.random_state = random_state

    # ---- geometry of the template -------------------------------------------------

    @property
    def grid_(self) -> BEVGridConfig:
        return self.grid if self.grid is not None else BEVGridConfig()

    @property
    def template_shape(self) -> tuple:
        cell = self.grid_.cell
        lt = 2 * int(round((self.anchor_size[0] / 2 + self.margin) / cell)) + 1
        wt = 2 * int(round((self.anchor_size[1] / 2 + self.margin) / cell)) + 1
        return lt, wt

    @property
    def kernel_radius(self) -> int:
        lt, wt = self.template_shape
        return int(np.ceil(0.5 * np.hypot(lt, wt)))

    @property
    def n_channels(self) -> int:
        return n_channels(self.representation, self.grid_)

    @property
    def n_params(self) -> int:
        lt, wt = self.template_shape
        return lt * wt * self.n_channels + 1

    def _validate(self):
        if self.representation not in REPRESENTATIONS:
            raise ValueError(f"unknown representation {self.representation!r}")
        if self.n_headings < 1 or self.anchor_stride < 1:
            raise ValueError("n_headings and anchor_stride must be >= 1")

    def _resampling(self):
        key = (self.template_shape, self.n_headings, self.kernel_radius)
        if getattr(self, "_resampling_key", None) != key:
            self._resampling_cache = _resampling_matrices(*key)
            self._resampling_key = key
        return self._resampling_cache

    def init_params(self):
        """Zero template, strongly negative bias: an explicitly initialised, silent model."""
        self._validate()
        lt, wt = self.template_shape
        self.coef_ = np.zeros((lt, wt, self.n_channels))
        self.intercept_ = -10.0
        self.loss_curve_ = []
        self._invalidate()
        return self

    def _invalidate(self):
        self.__dict__.pop("_kernel_fft", None)
        self.__dict__.pop("_kernels", None)

    @property
    def parameters(self) -> np.ndarray:
        self._check_fitted()
        return np.concatenate([self.coef_.ravel(), [self.intercept_]])

    def set_parameters(self, vec):
        vec = np.asarray(vec, dtype=float)
        if vec.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {vec.size}")
        lt, wt = self.template_shape
        self.coef_ = vec[:-1].reshape(lt, wt, self.n_channels).copy()
        self.intercept_ = float(vec[-1])
        if not hasattr(self, "loss_curve_"):
            self.loss_curve_ = []
        self._invalidate()
        return self

    def _check_fitted(self):
        if not hasattr(self, "coef_"):
            raise RuntimeError("detector is neither trained nor initialised; call fit or init_params")

    @property
    def kernels(self) -> np.ndarray:
        """Per-heading kernels ``(H, k, k, C)``."""
        self._check_fitted()
        if getattr(self, "_kernels", None) is None:
            k = 2 * self.kernel_radius + 1
            C = self.n_channels
            W = self.coef_.reshape(-1, C)
            self._kernels = np.stack([(S @ W).reshape(k, k, C) for S in self._resampling()])
        return self._kernels

    def _kernel_fft(self, shape):
        cache = getattr(self, "_kernel_fft_cache", None)
        if cache is not None and cache[0] == shape and getattr(self, "_kernels", None) is not None \
                and cache[2] is self._kernels:
            return cache[1]
        K = self.kernels
        kf = sfft.rfft2(K[:, ::-1, ::-1, :], s=shape, axes=(1, 2), workers=-1)
        self._kernel_fft_cache = (shape, kf, K)
        return kf

    # ---- inference ---------------------------------------------------------------

    def feature_map(self, cloud) -> np.ndarray:
        return features(cloud, self.representation, self.grid_)

    def decision_map(self, cloud=None, feats=None) -> np.ndarray:
        """Clipped logits ``(H, nx, ny)`` for every anchor cell and heading."""
        self._check_fitted()
        F = self.feature_map(cloud) if feats is None else feats
        r = self.kernel_radius
        nx, ny, C = F.shape
        shape = (sfft.next_fast_len(nx + 2 * r, real=True), sfft.next_fast_len(ny + 2 * r, real=True))
        ff = sfft.rfft2(F, s=shape, axes=(0, 1), workers=-1)
        kf = self._kernel_fft(shape)
        prod = np.einsum("xyc,hxyc->hxy", ff, kf, optimize=True)
        full = sfft.irfft2(prod, s=shape, axes=(1, 2), workers=-1)
        logits = full[:, r : r + nx, r : r + ny] + self.intercept_
        return np.clip(logits, -LOGIT_CLIP, LOGIT_CLIP)

    def anchor_boxes(self, h, ix, iy) -> np.ndarray:
        x, y = self.grid_.cell_centers_xy(ix, iy)
        h = np.asarray(h)
        alpha = wrap_angle(h * np.pi / self.n_headings)
        n = np.broadcast(h, x).size
        out = np.empty((n, 7))
        out[:, 0] = np.broadcast_to(x, (n,))
        out[:, 1] = np.broadcast_to(y, (n,))
        out[:, 2] = self.anchor_size[0]
        out[:, 3] = self.anchor_size[1]
        out[:, 4] = np.broadcast_to(alpha, (n,))
        out[:, 5] = self.anchor_z[0]
        out[:, 6] = self.anchor_z[1]
        return out

    def _stride_mask(self, logits):
        s = self.anchor_stride
        if s == 1:
            return logits
        out = np.full_like(logits, -np.inf)
        out[:, ::s, ::s] = logits[:, ::s, ::s]
        return out

    def predict(self, X) -> DetectionResult:
        """Detect vehicles in one point cloud (``X`` is an ``(N, 3)`` array or SceneFrame)."""
        cloud = X.cloud if isinstance(X, SceneFrame) else X
        logits = self._stride_mask(self.decision_map(cloud))
        floor = np.log(PROPOSAL_FLOOR) - np.log1p(-PROPOSAL_FLOOR)
        h, ix, iy = np.nonzero(logits > floor)
        lg = logits[h, ix, iy]
        order = np.lexsort((iy, ix, h, -lg))
        h, ix, iy, lg = h[order], ix[order], iy[order], lg[order]
        return DetectionResult(self.anchor_boxes(h, ix, iy), expit(lg), lg)

    detect = predict

    def score(self, X, y=None, iou_threshold: float = 0.5, min_points: int = 10) -> float:
        """Recall over frames ``X`` of labelled vehicles with at least ``min_points`` points."""
        hits = total = 0
        for frame in X:
            res = self.predict(frame.cloud)
            counts = frame.label_point_counts()
            for lab, n in zip(frame.labels, counts):
                if n < min_points:
                    continue
                total += 1
                hits += is_detected(res, lab, iou_threshold)
        return hits / total if total else float("nan")

    # ---- training ------------------------------------------------------------

    def _examples(self, F, anchors):
        """Template-frame feature vectors ``(n, D)`` for anchors ``(h, ix, iy)``."""
        r = self.kernel_radius
        k = 2 * r + 1
        C = F.shape[2]
        Fp = np.pad(F, ((r, r), (r, r), (0, 0)))
        S = self._resampling()
        h, ix, iy = anchors
        out = np.empty((h.size, self.n_params - 1), dtype=np.float32)
        win_idx_a, win_idx_b = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
        for hh in np.unique(h):
            sel = np.flatnonzero(h == hh)
            wins = Fp[ix[sel, None, None] + win_idx_a, iy[sel, None, None] + win_idx_b]  # (n, k, k, C)
            wins = wins.reshape(sel.size, k * k, C).transpose(1, 0, 2).reshape(k * k, -1)
            x = (S[hh].T @ wins).reshape(-1, sel.size, C).transpose(1, 0, 2)
            out[sel] = x.reshape(sel.size, -1)
        return out

    def _label_iou(self, boxes, labels):
        if not labels:
            return np.zeros(boxes.shape[0])
        return np.max(np.stack([bev_iou_many(boxes, lab) for lab in labels]), axis=0)

    def _candidate_anchors(self, center_xy, radius_m):
        g = self.grid_
        cx = (center_xy[0] - g.x_range[0]) / g.cell - 0.5
        cy = (center_xy[1] - g.y_range[0]) / g.cell - 0.5
        rc = int(np.ceil(radius_m / g.cell))
        ix = np.arange(int(np.floor(cx)) - rc, int(np.ceil(cx)) + rc + 1)
        iy = np.arange(int(np.floor(cy)) - rc, int(np.ceil(cy)) + rc + 1)
        ix = ix[(ix >= 0) & (ix < g.nx)]
        iy = iy[(iy >= 0) & (iy < g.ny)]
        if self.anchor_stride > 1:
            ix = ix[ix % self.anchor_stride == 0]
            iy = iy[iy % self.anchor_stride == 0]
        H, X, Y = np.meshgrid(np.arange(self.n_headings), ix, iy, indexing="ij")
        return H.ravel(), X.ravel(), Y.ravel()

    def _frame_examples(self, frame: SceneFrame, rng, hard: bool = False):
        F = self.feature_map(frame.cloud)
        pos, neg = [], []
        labels = list(frame.labels)
        if hard:
            neg.append(self._hard_negatives(F, labels))
            labels_iter = []
        else:
            labels_iter = labels
        for lab in labels_iter:
            h, ix, iy = self._candidate_anchors((lab.x, lab.y), 1.2)
            if h.size == 0:
                continue
            own = bev_iou_many(self.anchor_boxes(h, ix, iy), lab)
            p = np.flatnonzero(own > self.pos_iou)
            if p.size:
                # always keep the best-matching anchor, then random others
                best = p[np.argmax(own[p])]
                rest = rng.permutation(p[p != best])[: max(self.pos_per_label - 1, 0)]
                pos.append(np.concatenate([[best], rest]))
                pos[-1] = (h[pos[-1]], ix[pos[-1]], iy[pos[-1]])
            # near-miss negatives around the label: shifted or badly rotated anchors
            hn, xn, yn = self._candidate_anchors((lab.x, lab.y), 3.0)
            iou_n = self._label_iou(self.anchor_boxes(hn, xn, yn), labels)
            n_near = self.neg_per_frame // 4
            band = np.flatnonzero((iou_n >= 0.1) & (iou_n < self.neg_iou))
            far = np.flatnonzero(iou_n < 0.1)
            take = np.concatenate([rng.permutation(band)[: n_near // 2], rng.permutation(far)[: n_near - n_near // 2]])
            neg.append((hn[take], xn[take], yn[take]))
        if not hard:
            self._generic_negatives(F, labels, rng, neg)
        cat = lambda parts: tuple(np.concatenate([p[i] for p in parts]).astype(np.int64) for i in range(3)) \
            if parts else (np.zeros(0, np.int64),) * 3
        P, N = cat(pos), cat(neg)
        Xp = self._examples(F, P) if P[0].size else np.zeros((0, self.n_params - 1), np.float32)
        Xn = self._examples(F, N) if N[0].size else np.zeros((0, self.n_params - 1), np.float32)
        return Xp, Xn

    def _generic_negatives(self, F, labels, rng, neg):
        g = self.grid_
        # negatives anchored on occupied cells anywhere in the frame
        occupied = np.argwhere(F.reshape(g.nx, g.ny, -1).sum(axis=2) > 0)
        if occupied.size:
            sel = occupied[rng.integers(0, occupied.shape[0], size=self.neg_per_frame)]
            hh = rng.integers(0, self.n_headings, size=sel.shape[0])
            iou = self._label_iou(self.anchor_boxes(hh, sel[:, 0], sel[:, 1]), labels)
            ok = iou < self.neg_iou
            neg.append((hh[ok], sel[ok, 0], sel[ok, 1]))
        sel = rng.integers(0, [g.nx, g.ny], size=(self.neg_per_frame // 4, 2))
        hh = rng.integers(0, self.n_headings, size=sel.shape[0])
        ok = self._label_iou(self.anchor_boxes(hh, sel[:, 0], sel[:, 1]), labels) < self.neg_iou
        neg.append((hh[ok], sel[ok, 0], sel[ok, 1]))

    def _hard_negatives(self, F, labels, limit: int = 24):
        logits = self._stride_mask(self.decision_map(feats=F))
        h, ix, iy = np.nonzero(logits > 0.0)
        if h.size == 0:
            return (h, ix, iy)
        iou = self._label_iou(self.anchor_boxes(h, ix, iy), labels)
        bad = np.flatnonzero(iou < self.neg_iou)
        bad = bad[np.argsort(-logits[h[bad], ix[bad], iy[bad]], kind="stable")][:limit]
        return (h[bad], ix[bad], iy[bad])

    def _build_dataset(self, frames, rng, hard=False):
        Xs, ys = [], []
        for frame in frames:
            Xp, Xn = self._frame_examples(frame, rng, hard=hard)
            Xs += [Xp, Xn]
            ys += [np.ones(Xp.shape[0]), np.zeros(Xn.shape[0])]
        X = np.concatenate(Xs) if Xs else np.zeros((0, self.n_params - 1), np.float32)
        y = np.concatenate(ys) if ys else np.zeros(0)
        return X, y

    def _loss_grad(self, w, X, y, sw):
        z = X @ w[:-1].astype(np.float32)
        z = z.astype(float) + w[-1]
        # logistic loss, stable form
        loss_i = np.logaddexp(0.0, z) - y * z
        # the all-zero window stands for every empty anchor and only sees the bias
        ew = self.empty_weight
        loss = float(sw @ loss_i) + ew * float(np.logaddexp(0.0, w[-1])) + 0.5 * self.l2 * float(w[:-1] @ w[:-1])
        r = (expit(z) - y) * sw
        g = np.empty_like(w)
        g[:-1] = (X.T @ r.astype(np.float32)).astype(float) + self.l2 * w[:-1]
        g[-1] = r.sum() + ew * float(expit(w[-1]))
        return loss, g

    def _sample_weights(self, y):
        n_pos = max(int(y.sum()), 1)
        n_neg = max(int((1 - y).sum()), 1)
        return np.where(y > 0, 0.5 / n_pos, (0.5 - self.empty_weight) / n_neg)

    def _descend(self, X, y, n_steps):
        """Monotone projected gradient descent (Barzilai-Borwein step, Armijo backtracking).

        The bias is projected onto ``(-inf, max_bias]``.
        """
        sw = self._sample_weights(y)
        w = self.parameters.copy()
        loss, g = self._loss_grad(w, X, y, sw)
        step = getattr(self, "_step", self.learning_rate)
        prev = None
        for _ in range(n_steps):
            if not np.isfinite(loss):
                raise TrainingDivergedError("training loss is not finite")
            gp = g.copy()
            if w[-1] >= self.max_bias and g[-1] < 0:
                gp[-1] = 0.0
            if float(gp @ gp) <= 1e-20:
                break
            if prev is not None:
                s, yk = w - prev[0], g - prev[1]
                sy = float(s @ yk)
                if sy > 0:
                    step = float(s @ s) / sy
            while True:
                w_new = w - step * g
                w_new[-1] = min(w_new[-1], self.max_bias)
                loss_new, g_new = self._loss_grad(w_new, X, y, sw)
                if np.isfinite(loss_new) and loss_new <= loss + 1e-4 * float(g @ (w_new - w)):
                    break
                step *= 0.5
                if step < 1e-12:
                    w_new, loss_new, g_new = w, loss, g
                    break
            prev = (w, g)
            if w_new is w:
                break
            w, loss, g = w_new, loss_new, g_new
            self.loss_curve_.append(loss)
        self._step = step
        self.set_parameters(w)
        return loss

    def fit(self, X, y=None):
        """Train on a sequence of SceneFrames (labels are read from the frames)."""
        frames = list(X)
        if not frames:
            raise ValueError("need at least one training frame")
        self._validate()
        rng = np.random.default_rng(self.random_state)
        self.init_params()
        self.intercept_ = min(0.0, self.max_bias)
        self.__dict__.pop("_step", None)
        data = self._build_dataset(frames, rng)
        if self.max_iter > 0:
            self._descend(*data, self.max_iter)
        for _ in range(self.hard_negative_rounds if self.max_iter > 0 else 0):
            Xh, yh = self._build_dataset(frames, rng, hard=True)
            if Xh.shape[0] == 0:
                break
            data = (np.concatenate([data[0], Xh]), np.concatenate([data[1], yh]))
            self._descend(*data, self.max_iter)
        self.n_train_examples_ = data[0].shape[0]
        return self

    def training_examples(self, frames, rng=None, hard: bool = True):
        """Windowed training examples ``(X, y)`` for ``frames``.

        Sampled positives and negatives, plus the current model's hard
        negatives when ``hard`` is set and the model has parameters.
        """
        rng = np.random.default_rng(rng)
        X, y = self._build_dataset(frames, rng)
        if hard and hasattr(self, "coef_"):
            Xh, yh = self._build_dataset(frames, rng, hard=True)
            X, y = np.concatenate([X, Xh]), np.concatenate([y, yh])
        return X, y

    def partial_fit(self, X, y=None, n_steps: int = 1, replay=None):
        """``n_steps`` gradient steps on examples drawn from frames ``X``.

        ``replay`` is an optional ``(X, y)`` example set trained on jointly,
        e.g. examples from clean frames kept while the inputs change.
        """
        frames = list(X)
        if not hasattr(self, "coef_"):
            self._validate()
            self.init_params()
            self.intercept_ = min(0.0, self.max_bias)
        if not hasattr(self, "loss_curve_"):
            self.loss_curve_ = []
        if (not frames and replay is None) or n_steps <= 0:
            return self
        seed = None if self.random_state is None else (self.random_state, len(self.loss_curve_))
        Xd, yd = self.training_examples(frames, seed) if frames else (np.zeros((0, self.n_params - 1), np.float32),
                                                                      np.zeros(0))
        if replay is not None:
            Xd, yd = np.concatenate([replay[0], Xd]), np.concatenate([replay[1], yd])
        self._descend(Xd, yd, n_steps)
        return self


def detect(model: TemplateDetector, cloud) -> DetectionResult:
    return model.predict(cloud)


def train_detector(model: TemplateDetector, frames, epochs: int, learning_rate: float = 1.0, rng=0) -> TemplateDetector:
    """Fresh copy of ``model`` trained for ``epochs`` full-batch iterations per round.

    With ``epochs = 0`` the parameters are returned unchanged.
    """
    from sklearn.base import clone

    if epochs == 0:
        return model
    new = clone(model).set_params(max_iter=epochs, learning_rate=learning_rate,
                                  random_state=rng if isinstance(rng, (int, np.integer)) or rng is None else
                                  int(np.random.default_rng(rng).integers(2**31)))
    return new.fit(frames)


# --------------------------------------------------------------------------- attack cache


@dataclass(frozen=True, eq=False)
class _AnchorSet:
    h: np.ndarray
    ix: np.ndarray
    iy: np.ndarray
    boxes: np.ndarray
    iou: np.ndarray
    clean_logits: np.ndarray


class AnchorCache:
    """Incremental scoring of the anchors around one target vehicle.

    Caches clean raw voxel/pillar statistics over the influence region of the
    anchors whose IoU with ``target`` exceeds 0.1, so the logits after adding
    (and, in occlusion mode, removing) points are the clean logits plus a
    sparse kernel correlation over the changed cells only.

    Anchors whose clean logit is below ``logit_floor`` are dropped from the
    loss; the adversary would have to raise them by more than ``floor - logit(0.1)``
    to make them relevant.
    """

    def __init__(self, model: TemplateDetector, cloud, target: BoxBEV, logit_floor: float = -9.0,
                 clean_logits=None):
        self.model = model
        self.grid = model.grid_
        self.representation = model.representation
        cloud = as_cloud(cloud)
        self.cloud = cloud
        self.target = target
        g = self.grid
        full = model.decision_map(cloud) if clean_logits is None else clean_logits
        full = model._stride_mask(full)
        h, ix, iy = model._candidate_anchors((target.x, target.y), 0.5 * np.hypot(*model.anchor_size)
                                             + 0.5 * np.hypot(target.w, target.h))
        boxes = model.anchor_boxes(h, ix, iy)
        iou = bev_iou_many(boxes, target) if h.size else np.zeros(0)
        lg = full[h, ix, iy] if h.size else np.zeros(0)
        keep = (iou > RELEVANT_IOU) & (lg > logit_floor)
        self.anchors = _AnchorSet(h[keep], ix[keep], iy[keep], boxes[keep], iou[keep], lg[keep])
        r = model.kernel_radius
        if keep.any():
            self.x0 = max(int(self.anchors.ix.min()) - r, 0)
            self.x1 = min(int(self.anchors.ix.max()) + r + 1, g.nx)
            self.y0 = max(int(self.anchors.iy.min()) - r, 0)
            self.y1 = min(int(self.anchors.iy.max()) + r + 1, g.ny)
        else:
            self.x0 = self.x1 = self.y0 = self.y1 = 0
        self._kernels = np.ascontiguousarray(model.kernels, dtype=float)
        self._build_region(cloud)

    # region stats -------------------------------------------------------------

    def _in_region_cols(self, pts):
        g = self.grid
        lo_x = g.x_range[0] + (self.x0 - 1) * g.cell
        hi_x = g.x_range[0] + (self.x1 + 1) * g.cell
        lo_y = g.y_range[0] + (self.y0 - 1) * g.cell
        hi_y = g.y_range[0] + (self.y1 + 1) * g.cell
        return (pts[:, 0] >= lo_x) & (pts[:, 0] < hi_x) & (pts[:, 1] >= lo_y) & (pts[:, 1] < hi_y)

    def _build_region(self, cloud):
        g = self.grid
        sel = np.flatnonzero(self._in_region_cols(cloud))
        self.region_index = sel
        self.region_points = cloud[sel]
        n = g.nx * g.ny * g.nz
        if self.representation == "density_grid":
            flat, w, _, _ = _density_terms(self.region_points, g)
            self.raw = np.bincount(flat.ravel(), weights=w.ravel(), minlength=n)
        elif self.representation == "occupancy_grid":
            flat, _ = _occupancy_cells(self.region_points, g)
            self.raw = np.bincount(flat, minlength=n).astype(float)
        else:
            self.pillars = _pillar_stats(self.region_points, g)
            pts = self.region_points
            ix = np.floor((pts[:, 0] - g.x_range[0]) / g.cell).astype(np.int64)
            iy = np.floor((pts[:, 1] - g.y_range[0]) / g.cell).astype(np.int64)
            self._region_valid = (ix >= 0) & (ix < g.nx) & (iy >= 0) & (iy < g.ny) \
                & (pts[:, 2] >= g.z_range[0]) & (pts[:, 2] < g.z_range[1])
            self._region_cols = np.where(self._region_valid, ix * g.ny + iy, -1)

    @property
    def n_anchors(self) -> int:
        return self.anchors.h.size

    # deltas ---------------------------------------------------------------------

    def _delta(self, added, removed=None):
        """Changed cells: ``(flat_cell_or_column, channel, dphi)`` and point-level terms for gradients."""
        g = self.grid
        added = as_cloud(added)
        removed_pts = self.region_points[removed] if removed is not None and np.any(removed) else np.zeros((0, 3))
        if self.representation == "density_grid":
            fa, wa, ga, va = _density_terms(added, g)
            fr, wr, _, _ = _density_terms(removed_pts, g)
            cells = np.unique(np.concatenate([fa.ravel(), fr.ravel()]))
            if cells.size == 0:
                return cells, np.zeros(0), None
            pos_a = np.searchsorted(cells, fa)
            pos_r = np.searchsorted(cells, fr)
            add_mass = np.bincount(pos_a.ravel(), weights=wa.ravel(), minlength=cells.size)
            rem_mass = np.bincount(pos_r.ravel(), weights=wr.ravel(), minlength=cells.size)
            base = self.raw[cells]
            new = np.maximum(base + add_mass - rem_mass, 0.0)
            dphi = np.log1p(new) - np.log1p(base)
            return cells, dphi, (pos_a, ga, va, new)
        if self.representation == "occupancy_grid":
            fa, _ = _occupancy_cells(added, g)
            fr, _ = _occupancy_cells(removed_pts, g)
            cells = np.unique(np.concatenate([fa, fr]))
            if cells.size == 0:
                return cells, np.zeros(0), None
            base = self.raw[cells]
            new = base + np.bincount(np.searchsorted(cells, fa), minlength=cells.size) \
                - np.bincount(np.searchsorted(cells, fr), minlength=cells.size)
            dphi = (new > 0).astype(float) - (base > 0).astype(float)
            return cells, dphi, None
        # pillars: recompute the touched columns from surviving and added points
        ca, za, _ = _pillar_cells(added, g)
        keep = np.ones(self.region_points.shape[0], dtype=bool)
        if removed is not None:
            keep[removed] = False
        cr = self._region_cols[~keep & self._region_valid]
        cols = np.unique(np.concatenate([ca, cr]))
        if cols.size == 0:
            return cols, np.zeros((0, 3)), None
        count, sum_z, max_z = (a[cols] for a in self.pillars)
        if cr.size:
            live = keep & self._region_valid & np.isin(self._region_cols, cols)
            lc = np.searchsorted(cols, self._region_cols[live])
            lz = self.region_points[live, 2]
            count_new = np.bincount(lc, minlength=cols.size).astype(float)
            sum_new = np.bincount(lc, weights=lz, minlength=cols.size)
            max_new = np.full(cols.size, -np.inf)
            np.maximum.at(max_new, lc, lz)
        else:
            count_new, sum_new, max_new = count.copy(), sum_z.copy(), max_z.copy()
        pa = np.searchsorted(cols, ca)
        count_new = count_new + np.bincount(pa, minlength=cols.size)
        sum_new = sum_new + np.bincount(pa, weights=za, minlength=cols.size)
        np.maximum.at(max_new, pa, za)
        old = _pillar_features(count, sum_z, max_z, g)
        new = _pillar_features(count_new, sum_new, max_new, g)
        return cols, new - old, None

    def _columns(self, cells, dphi):
        """Changed columns ``(cx, cy)`` and their dense channel deltas ``(n_cols, C)``."""
        g = self.grid
        if self.representation == "point_features":
            cx, cy = np.divmod(cells, g.ny)
            return cx, cy, np.ascontiguousarray(dphi, dtype=float), None
        col, cz = np.divmod(cells, g.nz)
        ucol, pos = np.unique(col, return_inverse=True)
        D = np.zeros((ucol.size, g.nz))
        D[pos, cz] = dphi
        cx, cy = np.divmod(ucol, g.ny)
        return cx, cy, D, (pos, cz)

    def logits(self, added, removed=None) -> np.ndarray:
        """Clipped anchor logits after composing ``added`` (and dropping ``removed``) points."""
        if self.n_anchors == 0:
            return np.zeros(0)
        cells, dphi, _ = self._delta(added, removed)
        if cells.size == 0:
            return self.anchors.clean_logits.copy()
        cx, cy, D, _ = self._columns(cells, dphi)
        d = np.zeros(self.n_anchors)
        a = self.anchors
        _window_dot(self._kernels, a.h, a.ix, a.iy, cx, cy, D, self.model.kernel_radius, d)
        return np.clip(a.clean_logits + d, -LOGIT_CLIP, LOGIT_CLIP)

    def logits_and_point_grad(self, added, grad_logits_fn):
        """Logits and the gradient of a scalar loss with respect to ``added`` points.

        ``grad_logits_fn(logits)`` returns (loss, dloss/dlogits).  Only the
        density representation is differentiable.
        """
        if self.representation != "density_grid":
            raise ValueError("gradients need the density_grid representation; use the genetic attack instead")
        added = as_cloud(added)
        grad_pts = np.zeros_like(added)
        if self.n_anchors == 0:
            loss, _ = grad_logits_fn(np.zeros(0))
            return np.zeros(0), loss, grad_pts
        cells, dphi, extra = self._delta(added)
        if cells.size == 0:
            lg = self.anchors.clean_logits.copy()
            loss, _ = grad_logits_fn(lg)
            return lg, loss, grad_pts
        a = self.anchors
        r = self.model.kernel_radius
        cx, cy, D, (pos, cz) = self._columns(cells, dphi)
        d = np.zeros(self.n_anchors)
        _window_dot(self._kernels, a.h, a.ix, a.iy, cx, cy, D, r, d)
        raw = a.clean_logits + d
        lg = np.clip(raw, -LOGIT_CLIP, LOGIT_CLIP)
        loss, g_lg = grad_logits_fn(lg)
        g_lg = np.ascontiguousarray(np.where(np.abs(raw) < LOGIT_CLIP, g_lg, 0.0), dtype=float)
        G = np.zeros_like(D)
        _window_dot_t(self._kernels, a.h, a.ix, a.iy, cx, cy, g_lg, r, G)
        g_phi = G[pos, cz]
        pos_a, ga, va, new = extra
        g_mass = g_phi / (1.0 + new)
        grad_pts[va] = np.einsum("nk,nkd->nd", g_mass[pos_a], ga)
        return lg, loss, grad_pts


@njit(cache=True)
def _window_dot(K, h, ix, iy, cx, cy, D, r, out):
    k = 2 * r + 1
    C = D.shape[1]
    for a in range(h.size):
        ha, xa, ya = h[a], ix[a], iy[a]
        acc = 0.0
        for n in range(cx.size):
            u = cx[n] - xa + r
            if u < 0 or u >= k:
                continue
            v = cy[n] - ya + r
            if v < 0 or v >= k:
                continue
            for c in range(C):
                acc += K[ha, u, v, c] * D[n, c]
        out[a] = acc


@njit(cache=True)
def _window_dot_t(K, h, ix, iy, cx, cy, g, r, out):
    k = 2 * r + 1
    C = out.shape[1]
    for a in range(h.size):
        ga = g[a]
        if ga == 0.0:
            continue
        ha, xa, ya = h[a], ix[a], iy[a]
        for n in range(cx.size):
            u = cx[n] - xa + r
            if u < 0 or u >= k:
                continue
            v = cy[n] - ya + r
            if v < 0 or v >= k:
                continue
            for c in range(C):
                out[n, c] += ga * K[ha, u, v, c]


# --------------------------------------------------------------------------- checkpoints


class DetectorFormatError(ValueError):
    pass


_DET_MAGIC = b"RFTD"
_DET_HEADER = struct.Struct("<4sIB8dIIIdd2d2dI")


def save_detector(model: TemplateDetector, path) -> Path:
    """Header (representation, grid, stride, template geometry) + float32 parameter vector."""
    model._check_fitted()
    g = model.grid_
    lt, wt = model.template_shape
    rep = REPRESENTATIONS.index(model.representation)
    header = _DET_HEADER.pack(
        _DET_MAGIC, 1, rep, *g.x_range, *g.y_range, g.cell, *g.z_range, float(g.z_bins),
        model.anchor_stride, model.n_headings, lt * wt * model.n_channels + 1, model.margin, model.l2,
        *model.anchor_size, *model.anchor_z, 0,
    )
    path = Path(path)
    path.write_bytes(header + model.parameters.astype("<f4").tobytes())
    return path


def load_detector(path) -> TemplateDetector:
    data = Path(path).read_bytes()
    if len(data) < _DET_HEADER.size:
        raise DetectorFormatError("checkpoint shorter than its header")
    vals = _DET_HEADER.unpack_from(data)
    magic, version, rep = vals[:3]
    if magic != _DET_MAGIC or version != 1 or rep >= len(REPRESENTATIONS):
        raise DetectorFormatError("not a detector checkpoint")
    x0, x1, y0, y1, cell, z0, z1, zb = vals[3:11]
    stride, n_head, n_par, margin, l2, al, aw, az0, az1, _ = vals[11:]
    grid = BEVGridConfig((x0, x1), (y0, y1), cell, (z0, z1), int(zb))
    model = TemplateDetector(REPRESENTATIONS[rep], grid, (al, aw), (az0, az1), margin, n_head, stride, l2)
    if model.n_params != n_par:
        raise DetectorFormatError("parameter count does not match the header geometry")
    params = np.frombuffer(data, dtype="<f4", offset=_DET_HEADER.size)
    if params.size != n_par:
        raise DetectorFormatError(f"checkpoint holds {params.size} parameters, header says {n_par}")
    model.set_parameters(params.astype(float))
    return model
