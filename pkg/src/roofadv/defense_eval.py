"""Defenses (random-mesh augmentation, adversarial training) and attack evaluation.

Evaluation follows the per-object framing: a target counts as attacked
successfully when it is detected in the clean frame and missed once the
adversary sits on its roof.  Recall curves and heatmaps are computed over
target vehicles, not per frame.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, clone

from .attack import (
    AttackConfig,
    AttackObjective,
    GeneticAttack,
    WhiteBoxAttack,
    _mount,
    _placement_aabb,
    prepare_samples,
    render_adversary,
)
from .detector import DETECTION_SCORE, TemplateDetector, _as_result, bev_iou_many, nms
from .scene_core import BoxBEV, SceneFrame, points_in_box_mask
from .mesh import AdversaryTemplate, DeformConfig, TriangleMesh, deform_vertices, random_watertight_mesh
from .raycast import SensorConfig, compose_scene, render_hits, sample_rays
from .roof_fit import LatentShapePrior, RoofFitter

log = logging.getLogger(__name__)

RECALL_THRESHOLDS = tuple(round(0.1 * i, 1) for i in range(1, 10))
HEATMAP_CELL = 4.0
FIT_FRACTION = 0.95


@dataclass(frozen=True)
class AugmentConfig:
    """Random watertight mesh parameters for augmentation and adversary restarts."""

    n_vertices: tuple = (50, 200)
    n_remove: tuple = (0, 300)
    sigma: float = 0.5
    min_points: int = 10

    def __post_init__(self):
        for name in ("n_vertices", "n_remove"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range is empty: {lo} > {hi}")
        if self.n_vertices[0] < 4:
            raise ValueError("n_vertices must start at 4 or more")
        if self.n_remove[0] < 0:
            raise ValueError("n_remove must be non-negative")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")


def fit_into_box(mesh: TriangleMesh, b, fraction: float = FIT_FRACTION) -> TriangleMesh:
    """Center ``mesh`` on its bounding box and scale it uniformly into ``fraction * b``."""
    b = np.asarray(b, dtype=float)
    lo, hi = mesh.aabb()
    half = np.maximum((hi - lo) / 2.0, 1e-12)
    scale = float(np.min(fraction * b / half))
    return TriangleMesh((mesh.vertices - (lo + hi) / 2.0) * scale, mesh.faces)


def random_adversary_mesh(config: AugmentConfig, b, rng) -> TriangleMesh:
    """Random watertight mesh sized to the adversary box ``b``."""
    rng = np.random.default_rng(rng)
    n = int(rng.integers(config.n_vertices[0], config.n_vertices[1] + 1))
    m = int(rng.integers(config.n_remove[0], config.n_remove[1] + 1))
    return fit_into_box(random_watertight_mesh(n, m, config.sigma, rng), b)


def _eligible(frame: SceneFrame, min_points: int) -> list:
    return [i for i, box in enumerate(frame.labels) if points_in_box_mask(frame.cloud, box).sum() >= min_points]


def augment_frame(frame: SceneFrame, config: AugmentConfig, roof_fitter: RoofFitter, rng,
                  sensor: SensorConfig | None = None, deform: DeformConfig | None = None,
                  mode: str = "union") -> SceneFrame:
    """Put one random watertight mesh on the roof of one random eligible vehicle.

    Frames without an eligible vehicle, or whose roof fit fails, come back
    unchanged.  Labels are never modified.
    """
    rng = np.random.default_rng(rng)
    sensor = sensor or SensorConfig()
    deform = deform or DeformConfig()
    idx = _eligible(frame, config.min_points)
    if not idx:
        return frame
    i = idx[int(rng.integers(len(idx)))]
    box = frame.labels[i]
    mesh = random_adversary_mesh(config, deform.b, rng)
    try:
        fit = roof_fitter.fit_vehicle(frame.cloud[points_in_box_mask(frame.cloud, box)], box)
        placement = _mount(fit.transform, deform.b[2])
        rays = sample_rays(sensor, _placement_aabb(placement, deform))
    except (ValueError, RuntimeError) as exc:
        log.warning("augmentation skipped for %s: %s", frame.frame_id, exc)
        return frame
    world = mesh.transformed(placement)
    pts = render_hits(world, rays).points
    cloud = compose_scene(frame.cloud, pts, world if mode == "occlude" else None, mode, rays.origin)
    return frame.with_cloud(cloud)


def augment_dataset(frames, config: AugmentConfig, roof_fitter: RoofFitter, rng=0, keep_clean: bool = True,
                    sensor: SensorConfig | None = None, deform: DeformConfig | None = None,
                    rounds: int = 1) -> list:
    """``rounds`` augmented copies of every frame, appended to the clean frames when ``keep_clean``.

    Each round draws a fresh mesh and vehicle per frame, as a stand-in for
    re-augmenting the data every training epoch.
    """
    frames = list(frames)
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    root = rng if isinstance(rng, (int, np.integer)) else int(np.random.default_rng(rng).integers(2**63))
    seeds = np.random.SeedSequence(root).spawn(rounds * len(frames))
    out = [augment_frame(frames[i % len(frames)], config, roof_fitter, np.random.default_rng(s), sensor, deform)
           for i, s in enumerate(seeds)]
    return frames + out if keep_clean else out


def augmentation_train(detector: TemplateDetector, frames, config: AugmentConfig, roof_fitter: RoofFitter,
                       rng=0, sensor: SensorConfig | None = None, deform: DeformConfig | None = None,
                       rounds: int = 1):
    """Fresh copy of ``detector`` fitted on the clean frames plus ``rounds`` augmented copies of each."""
    data = augment_dataset(frames, config, roof_fitter, rng, True, sensor, deform, rounds)
    return clone(detector).fit(data)


# --------------------------------------------------------------------------- adversarial training


class AdversarialTrainer(BaseEstimator):
    """Alternate one adversary update with one detector update.

    Every model step renders the current adversary onto a minibatch of
    training vehicles and descends on those frames together with the clean
    training examples.  Each training vehicle keeps only the examples from
    its latest adversarial copy.  The adversary restarts from a fresh random
    watertight mesh every ``k`` model steps.

    Parameters
    ----------
    attack_config : AttackConfig
    k : int
        Model steps between adversary restarts.
    epochs : int
        Passes over the training vehicles; each pass is
        ``ceil(n_samples / frames_per_step)`` alternations.
    frames_per_step : int
        Vehicles rendered with the adversary per model step.
    model_steps : int
        Gradient iterations per model step.
    attack_batch : int or None
        Fitness/minibatch size of the adversary update (defaults to the
        attack config's).
    augment : AugmentConfig
    random_state : int
    """

    def __init__(self, attack_config: AttackConfig | None = None, k: int = 30, epochs: int = 1,
                 frames_per_step: int = 8, model_steps: int = 5, attack_batch: int | None = None,
                 augment: AugmentConfig | None = None, random_state=0):
        self.attack_config = attack_config
        self.k = k
        self.epochs = epochs
        self.frames_per_step = frames_per_step
        self.model_steps = model_steps
        self.attack_batch = attack_batch
        self.augment = augment
        self.random_state = random_state

    def _attack_config(self) -> AttackConfig:
        from dataclasses import replace

        cfg = self.attack_config or AttackConfig()
        if self.attack_batch is not None:
            cfg = replace(cfg, fitness_batch=self.attack_batch, batch_size=self.attack_batch,
                          eval_batch=self.attack_batch)
        return cfg

    def _restart(self, samples, detector, cfg, rng):
        mesh = random_adversary_mesh(self.augment or AugmentConfig(), cfg.deform.b, rng)
        template = AdversaryTemplate.from_mesh(mesh, cfg.deform.b)
        cls = GeneticAttack if cfg.optimizer == "genetic" else WhiteBoxAttack
        attacker = cls(cfg, template, int(rng.integers(2**31)))
        objective = AttackObjective(samples, template, detector, cfg)
        return attacker, objective, attacker._init_state(objective, None)

    def fit(self, frames, detector: TemplateDetector, samples=None, prior: LatentShapePrior | None = None,
            sensor: SensorConfig | None = None):
        """Adversarially train a copy of ``detector`` (fitted first on ``frames`` if needed)."""
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        frames = list(frames)
        cfg = self._attack_config()
        model = clone(detector) if not hasattr(detector, "coef_") else _copy_model(detector)
        if not hasattr(model, "coef_"):
            model.fit(frames)
        self.history_ = []
        if self.epochs == 0:
            self.detector_ = model
            return self
        if samples is None:
            if prior is None:
                raise ValueError("need attack samples or a shape prior to prepare them")
            samples = prepare_samples(frames, prior, sensor, cfg.deform)
        samples = list(samples)
        if not samples:
            raise ValueError("no eligible training vehicles for adversarial training")
        rng = np.random.default_rng(self.random_state)
        clean = model.training_examples(frames, rng.integers(2**31))
        pool: dict = {}
        n_steps = self.epochs * math.ceil(len(samples) / self.frames_per_step)
        attacker = objective = state = None
        for step in range(n_steps):
            if step % self.k == 0:
                attacker, objective, state = self._restart(samples, model, cfg, rng)
            elif step:
                # the detector moved: caches and the stored champion score are stale
                objective.reset()
                state["champion_fit"] = -objective.loss(state["champion"], state["eval_idx"])
            row = attacker._step(objective, state)
            verts = deform_vertices(objective.template, _params(state["champion"], objective.template),
                                    cfg.deform)
            mesh = TriangleMesh(verts, objective.template.base.faces)
            batch = rng.choice(len(samples), size=min(self.frames_per_step, len(samples)), replace=False)
            adv = [samples[i].frame.with_cloud(render_adversary(mesh, samples[i], cfg.compose_mode)) for i in batch]
            for i, f in zip(batch, adv):
                pool[int(i)] = model.training_examples([f], rng.integers(2**31))
            keys = sorted(pool)
            replay = (np.concatenate([clean[0]] + [pool[i][0] for i in keys]),
                      np.concatenate([clean[1]] + [pool[i][1] for i in keys]))
            model.partial_fit([], n_steps=self.model_steps, replay=replay)
            self.history_.append((step + 1, float(row[1]), len(keys)))
        self.detector_ = model
        return self


def _params(vec, template: AdversaryTemplate):
    from .mesh import DeformParams

    return DeformParams.from_vector(vec, template.n_vertices)


def _copy_model(model: TemplateDetector) -> TemplateDetector:
    new = clone(model)
    new._validate()
    new.init_params()
    new.set_parameters(model.parameters)
    new.loss_curve_ = list(getattr(model, "loss_curve_", []))
    return new


def adversarial_train(detector: TemplateDetector, frames, attack_config: AttackConfig, k: int = 30,
                      epochs: int = 1, rng=0, samples=None, prior: LatentShapePrior | None = None,
                      **kwargs) -> TemplateDetector:
    """Adversarially trained copy of ``detector``; ``epochs = 0`` returns it unchanged."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if epochs == 0:
        return detector
    trainer = AdversarialTrainer(attack_config, k, epochs, random_state=rng, **kwargs)
    return trainer.fit(frames, detector, samples, prior).detector_


# --------------------------------------------------------------------------- evaluation


@dataclass(frozen=True)
class AttackOutcome:
    """Detection of one target before and after the adversary is placed.

    ``iou_before`` / ``iou_after`` are the best BEV IoU of a kept detection
    (score >= 0.5, after NMS) with the target, 0 when there is none.
    """

    frame_id: str
    target: BoxBEV
    detected_before: bool
    detected_after: bool
    range_m: float
    azimuth: float
    iou_before: float = 0.0
    iou_after: float = 0.0

    @property
    def success(self) -> bool:
        return self.detected_before and not self.detected_after


@dataclass(frozen=True)
class Heatmap:
    x_edges: np.ndarray
    y_edges: np.ndarray
    successes: np.ndarray
    counts: np.ndarray

    @property
    def rates(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.counts > 0, self.successes / np.maximum(self.counts, 1), np.nan)


@dataclass(frozen=True)
class EvalReport:
    """Success rate, recall-IoU curve and BEV success heatmap of one adversary."""

    success_rate: float
    recall_curve: tuple
    heatmap: Heatmap
    iou_threshold: float = 0.7
    n_samples: int = 0
    n_detected_before: int = 0
    n_success: int = 0
    clean_recall_curve: tuple = ()
    outcomes: tuple = field(default_factory=tuple)

    @property
    def valid(self) -> bool:
        return self.n_detected_before > 0


def best_detection_iou(result, gt: BoxBEV, score_threshold: float = DETECTION_SCORE,
                       nms_threshold: float = 0.5) -> float:
    """Best IoU with ``gt`` among detections kept by NMS (0 if none)."""
    res = _as_result(result)
    keep = res.scores >= score_threshold
    if not keep.any():
        return 0.0
    boxes, scores = res.boxes[keep], res.scores[keep]
    kept = nms(boxes, scores, nms_threshold)
    return float(bev_iou_many(boxes[kept], gt).max()) if kept.size else 0.0


def recall_curve(ious, thresholds=RECALL_THRESHOLDS) -> tuple:
    """``(threshold, recall)`` pairs where recall counts IoU strictly above the threshold."""
    ious = np.asarray(ious, dtype=float)
    n = max(ious.size, 1)
    return tuple((float(t), float(np.count_nonzero(ious > t)) / n) for t in thresholds)


def _evaluate_frame(detector, adversary, group, mode, iou_threshold):
    frame = group[0].frame
    clean = detector.predict(frame.cloud)
    out = []
    for s in group:
        before = best_detection_iou(clean, s.target)
        if adversary is None:
            after = before
        else:
            after = best_detection_iou(detector.predict(render_adversary(adversary, s, mode)), s.target)
        origin = s.rays.origin
        dx, dy = s.target.x - origin[0], s.target.y - origin[1]
        out.append(AttackOutcome(frame.frame_id, s.target, before > iou_threshold, after > iou_threshold,
                                 float(math.hypot(dx, dy)), float(math.atan2(dy, dx)), before, after))
    return out


def evaluate_outcomes(adversary: TriangleMesh | None, samples, detector: TemplateDetector,
                      iou_threshold: float = 0.7, mode: str = "union", n_jobs: int = 1) -> list:
    """Per-sample outcomes in sample order; ``adversary=None`` evaluates clean frames only."""
    samples = list(samples)
    groups, index = [], {}
    for s in samples:
        key = id(s.frame)
        if key not in index:
            index[key] = len(groups)
            groups.append([])
        groups[index[key]].append(s)
    work = lambda g: _evaluate_frame(detector, adversary, g, mode, iou_threshold)
    if n_jobs == 1:
        parts = [work(g) for g in groups]
    else:
        with ThreadPoolExecutor(max_workers=None if n_jobs < 1 else n_jobs) as pool:
            parts = list(pool.map(work, groups))
    by_id = {id(s): o for g, part in zip(groups, parts) for s, o in zip(g, part)}
    return [by_id[id(s)] for s in samples]


def heatmap(outcomes, x_range=(0.0, 52.0), y_range=(-28.0, 28.0), cell: float = HEATMAP_CELL,
            only_detected: bool = True) -> Heatmap:
    """Success counts binned by target BEV position in the sensor frame."""
    xe = np.arange(x_range[0], x_range[1] + cell * 0.5, cell)
    ye = np.arange(y_range[0], y_range[1] + cell * 0.5, cell)
    if xe[-1] < x_range[1]:
        xe = np.append(xe, xe[-1] + cell)
    if ye[-1] < y_range[1]:
        ye = np.append(ye, ye[-1] + cell)
    succ = np.zeros((xe.size - 1, ye.size - 1), dtype=int)
    cnt = np.zeros_like(succ)
    for o in outcomes:
        if only_detected and not o.detected_before:
            continue
        i = int(np.searchsorted(xe, o.target.x, side="right")) - 1
        j = int(np.searchsorted(ye, o.target.y, side="right")) - 1
        if 0 <= i < cnt.shape[0] and 0 <= j < cnt.shape[1]:
            cnt[i, j] += 1
            succ[i, j] += int(o.success)
    return Heatmap(xe, ye, succ, cnt)


def report_from_outcomes(outcomes, iou_threshold: float = 0.7, thresholds=RECALL_THRESHOLDS, **heat) -> EvalReport:
    outcomes = tuple(outcomes)
    n_before = sum(o.detected_before for o in outcomes)
    n_succ = sum(o.success for o in outcomes)
    rate = n_succ / n_before if n_before else float("nan")
    return EvalReport(rate, recall_curve([o.iou_after for o in outcomes], thresholds), heatmap(outcomes, **heat),
                      iou_threshold, len(outcomes), n_before, n_succ,
                      recall_curve([o.iou_before for o in outcomes], thresholds), outcomes)


def evaluate_attack(adversary: TriangleMesh, samples, detector: TemplateDetector, iou_threshold: float = 0.7,
                    mode: str = "union", n_jobs: int = 1, **heat) -> EvalReport:
    """Success rate, recall curve and heatmap of ``adversary`` (adversary frame) on ``samples``.

    A report with no originally detected target is returned with
    ``valid == False`` and a NaN success rate.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("need at least one sample to evaluate")
    outcomes = evaluate_outcomes(adversary, samples, detector, iou_threshold, mode, n_jobs)
    report = report_from_outcomes(outcomes, iou_threshold, **heat)
    if not report.valid:
        log.warning("no target was detected before the attack; report is invalid")
    return report


def success_by_range(outcomes, bands=((0.0, 10.0), (10.0, 20.0), (20.0, 30.0), (30.0, math.inf))) -> list:
    """``(lo, hi, successes, detected_before)`` per range band."""
    rows = []
    for lo, hi in bands:
        sel = [o for o in outcomes if lo <= o.range_m < hi and o.detected_before]
        rows.append((lo, hi, sum(o.success for o in sel), len(sel)))
    return rows


def clean_recall(samples, detector: TemplateDetector, iou_threshold: float = 0.7, n_jobs: int = 1) -> float:
    """Fraction of target vehicles detected in their clean frames."""
    outcomes = evaluate_outcomes(None, samples, detector, iou_threshold, n_jobs=n_jobs)
    return sum(o.detected_before for o in outcomes) / max(len(outcomes), 1)


# --------------------------------------------------------------------------- CSV export


SUMMARY_FIELDS = ("iou_threshold", "n_samples", "n_detected_before", "n_success", "success_rate", "valid")


def _num(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    return "" if math.isnan(x) else repr(x)


def export_report(report: EvalReport, path, prefix: str = "") -> dict:
    """Write ``summary.csv``, ``recall_curve.csv``, ``heatmap.csv`` and ``outcomes.csv`` under ``path``."""
    if not report.valid:
        raise ValueError("refusing to export an invalid report (no originally detected targets)")
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    files = {k: root / f"{prefix}{k}.csv" for k in ("summary", "recall_curve", "heatmap", "outcomes")}

    def write(p, header, rows):
        with open(p, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)

    write(files["summary"], SUMMARY_FIELDS,
          [[_num(report.iou_threshold), report.n_samples, report.n_detected_before, report.n_success,
            _num(report.success_rate), _num(report.valid)]])
    clean = dict(report.clean_recall_curve)
    write(files["recall_curve"], ("threshold", "recall", "clean_recall"),
          [[_num(t), _num(r), _num(clean.get(t, float("nan")))] for t, r in report.recall_curve])
    hm = report.heatmap
    rates = hm.rates
    write(files["heatmap"], ("x_bin", "y_bin", "x_min", "y_min", "success_rate", "count"),
          [[i, j, _num(hm.x_edges[i]), _num(hm.y_edges[j]), _num(rates[i, j]), int(hm.counts[i, j])]
           for i in range(hm.counts.shape[0]) for j in range(hm.counts.shape[1])])
    write(files["outcomes"], ("frame_id", "x", "y", "alpha", "range_m", "azimuth", "iou_before", "iou_after",
                              "detected_before", "detected_after", "success"),
          [[o.frame_id, _num(o.target.x), _num(o.target.y), _num(o.target.alpha), _num(o.range_m),
            _num(o.azimuth), _num(o.iou_before), _num(o.iou_after), _num(o.detected_before),
            _num(o.detected_after), _num(o.success)] for o in report.outcomes])
    return files


def read_report_csv(path, prefix: str = "") -> dict:
    """Parsed CSV tables written by :func:`export_report`, with numbers restored exactly."""
    root = Path(path)

    def rows(name):
        with open(root / f"{prefix}{name}.csv", newline="", encoding="utf-8") as fh:
            return list(csv.DictReader(fh))

    f = lambda v: float("nan") if v == "" else float(v)
    s = rows("summary")[0]
    return {
        "success_rate": f(s["success_rate"]),
        "iou_threshold": f(s["iou_threshold"]),
        "n_samples": int(s["n_samples"]),
        "n_detected_before": int(s["n_detected_before"]),
        "n_success": int(s["n_success"]),
        "recall_curve": tuple((f(r["threshold"]), f(r["recall"])) for r in rows("recall_curve")),
        "heatmap": [(int(r["x_bin"]), int(r["y_bin"]), None if r["success_rate"] == "" else f(r["success_rate"]),
                     int(r["count"])) for r in rows("heatmap")],
    }
