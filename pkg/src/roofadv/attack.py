"""Universal rooftop attack: objective, white-box (Adam) and genetic optimizers."""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator

from .detector import RELEVANT_SCORE, AnchorCache, TemplateDetector
from .scene_core import BoxBEV, SceneFrame, points_in_box_mask
from .mesh import (
    AdversaryTemplate,
    DeformConfig,
    DeformParams,
    TriangleMesh,
    deform_vertices,
    laplacian_loss_and_grad,
    laplacian_operator,
    params_vjp,
)
from .raycast import RayBundle, SensorConfig, compose_scene, hit_point_jacobian, render_hits, sample_rays
from .roof_fit import LatentShapePrior, RoofFitter, RoofRegion

__all__ = [
    "AttackConfig",
    "AttackSample",
    "Candidate",
    "SaturationError",
    "adversarial_loss",
    "total_loss",
    "prepare_samples",
    "AttackObjective",
    "evaluate_objective",
    "WhiteBoxAttack",
    "GeneticAttack",
    "whitebox_attack",
    "genetic_attack",
    "run_attack",
    "placed_mesh",
    "render_adversary",
    "save_params",
    "load_params",
    "write_history",
    "ParamsFormatError",
]

log = logging.getLogger(__name__)

_RELEVANT_LOGIT = float(np.log(RELEVANT_SCORE) - np.log1p(-RELEVANT_SCORE))


class SaturationError(ValueError):
    """A relevant proposal has score 1, so ``-log(1 - s)`` is infinite."""


@dataclass(frozen=True)
class AttackConfig:
    """Attack hyperparameters (defaults are the published settings).

    ``generations`` and ``iterations`` bound the two optimizers; ``eval_batch``
    is the size of the fixed batch used for the elite/best-loss bookkeeping
    (defaults to ``fitness_batch``).
    """

    lambda_lap: float = 0.001
    deform: DeformConfig = field(default_factory=DeformConfig)
    optimizer: str = "genetic"
    learning_rate: float = 0.005
    iterations: int = 1000
    batch_size: int = 8
    eval_every: int = 10
    population: int = 16
    mutation_std: float = 0.05
    mutation_prob: float = 0.01
    fitness_batch: int = 100
    eval_batch: int | None = None
    patience: int = 100
    decay: float = 0.5
    generations: int = 500
    improvement_tol: float = 1e-4
    compose_mode: str = "union"
    logit_floor: float = -9.0

    def __post_init__(self):
        if self.optimizer not in ("whitebox", "genetic"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lambda_lap < 0:
            raise ValueError("lambda_lap must be non-negative")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0.0 <= self.mutation_prob <= 1.0:
            raise ValueError("mutation_prob must be in [0, 1]")
        if self.mutation_std < 0:
            raise ValueError("mutation_std must be non-negative")
        if not 0.0 < self.decay <= 1.0:
            raise ValueError("decay must be in (0, 1]")
        for name in ("iterations", "generations", "patience"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("batch_size", "fitness_batch", "eval_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.population < 2:
            raise ValueError("population must be >= 2")
        if self.eval_batch is not None and self.eval_batch < 1:
            raise ValueError("eval_batch must be >= 1")
        if self.compose_mode not in ("union", "occlude"):
            raise ValueError(f"unknown compose_mode {self.compose_mode!r}")

    @property
    def eval_size(self) -> int:
        return self.eval_batch if self.eval_batch is not None else self.fitness_batch


# --------------------------------------------------------------------------- losses


def adversarial_loss(proposals, gt: BoxBEV) -> float:
    """Sum of ``-IoU * log(1 - s)`` over (already relevant) proposals."""
    from .scene_core import bev_iou

    total = 0.0
    for p in proposals:
        if p.score >= 1.0:
            raise SaturationError("proposal score is 1; adversarial loss is infinite")
        total += -bev_iou(p.box, gt) * np.log1p(-p.score)
    return float(total)


def total_loss(adv: float, lap: float, lambda_lap: float) -> float:
    if adv < 0 or lap < 0 or lambda_lap < 0:
        raise ValueError("loss terms and lambda must be non-negative")
    return float(adv + lambda_lap * lap)


def _softplus(x):
    return np.logaddexp(0.0, x)


# --------------------------------------------------------------------------- samples


@dataclass(frozen=True, eq=False)
class AttackSample:
    """One target vehicle with its roof placement and the sensor rays around it."""

    frame: SceneFrame
    target: BoxBEV
    roof: RoofRegion
    placement: np.ndarray
    rays: RayBundle
    label_index: int = 0

    @property
    def sample_id(self) -> str:
        return f"{self.frame.frame_id}:{self.label_index}"


@dataclass(frozen=True, eq=False)
class Candidate:
    params: DeformParams
    fitness: float = float("nan")


def _mount(transform: np.ndarray, b_z: float) -> np.ndarray:
    # lift the adversary frame so the bottom of its size box rests on the roof
    lift = np.eye(4)
    lift[2, 3] = b_z
    return transform @ lift


def _placement_aabb(placement, deform: DeformConfig):
    ext = deform.b_arr + deform.c_arr
    corners = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)]) * ext
    world = corners @ placement[:3, :3].T + placement[:3, 3]
    return world.min(axis=0), world.max(axis=0)


def prepare_samples(frames, prior: LatentShapePrior, sensor: SensorConfig | None = None,
                    deform: DeformConfig | None = None, min_points: int = 10, max_samples: int | None = None,
                    fitter: RoofFitter | None = None) -> list:
    """Fit roofs and cache rays for every eligible vehicle, in frame/label order.

    Vehicles whose roof fit fails are skipped with a warning.
    """
    sensor = sensor or SensorConfig()
    deform = deform or DeformConfig()
    fitter = fitter or RoofFitter(prior)
    samples = []
    for frame in frames:
        for i, box in enumerate(frame.labels):
            pts = frame.cloud[points_in_box_mask(frame.cloud, box)]
            if pts.shape[0] < min_points:
                continue
            try:
                fit = fitter.fit_vehicle(pts, box)
            except (ValueError, RuntimeError) as exc:
                log.warning("roof fit failed for %s label %d: %s", frame.frame_id, i, exc)
                continue
            placement = _mount(fit.transform, deform.b[2])
            lo, hi = _placement_aabb(placement, deform)
            try:
                rays = sample_rays(sensor, (lo, hi))
            except ValueError as exc:
                log.warning("no rays for %s label %d: %s", frame.frame_id, i, exc)
                continue
            samples.append(AttackSample(frame, box, fit.roof, placement, rays, i))
            if max_samples is not None and len(samples) >= max_samples:
                return samples
    return samples


def placed_mesh(local: TriangleMesh, placement: np.ndarray) -> TriangleMesh:
    return local.transformed(placement)


def render_adversary(mesh_local: TriangleMesh, sample: AttackSample, mode: str = "union") -> np.ndarray:
    """Full composed cloud for ``sample`` with the adversary on its roof."""
    world = placed_mesh(mesh_local, sample.placement)
    pts = render_hits(world, sample.rays).points
    return compose_scene(sample.frame.cloud, pts, world if mode == "occlude" else None, mode,
                         sample.rays.origin)


# --------------------------------------------------------------------------- objective


class AttackObjective:
    """Objective over a fixed list of samples for one detector.

    Builds per-sample anchor caches lazily; the detector must not change
    while the objective is in use (call :meth:`reset` after updating it).
    """

    def __init__(self, samples, template: AdversaryTemplate, detector: TemplateDetector, config: AttackConfig):
        if not samples:
            raise ValueError("need at least one attack sample")
        self.samples = list(samples)
        self.template = template
        self.detector = detector
        self.config = config
        self.operator = laplacian_operator(template.base)
        self._caches: dict = {}

    def reset(self):
        self._caches.clear()

    def cache(self, i: int) -> AnchorCache:
        c = self._caches.get(i)
        if c is None:
            s = self.samples[i]
            c = AnchorCache(self.detector, s.frame.cloud, s.target, self.config.logit_floor)
            self._caches[i] = c
        return c

    def _params(self, params) -> DeformParams:
        if isinstance(params, DeformParams):
            return params
        return DeformParams.from_vector(params, self.template.n_vertices)

    def _removed(self, cache: AnchorCache, world: TriangleMesh, sample: AttackSample):
        if self.config.compose_mode != "occlude" or cache.region_points.shape[0] == 0:
            return None
        origin = sample.rays.origin
        rel = cache.region_points - origin
        dist = np.linalg.norm(rel, axis=1)
        dirs = rel / np.maximum(dist, 1e-12)[:, None]
        hits = render_hits(world, RayBundle(origin, dirs))
        blocked = hits.ray_index[hits.t < dist[hits.ray_index] - 1e-6]
        return blocked if blocked.size else None

    def sample_loss(self, i: int, local_vertices: np.ndarray) -> float:
        """Adversarial loss of sample ``i`` with the adversary at ``local_vertices``."""
        sample = self.samples[i]
        world = TriangleMesh(local_vertices @ sample.placement[:3, :3].T + sample.placement[:3, 3],
                             self.template.base.faces)
        pts = render_hits(world, sample.rays).points
        cache = self.cache(i)
        if cache.n_anchors == 0:
            return 0.0
        lg = cache.logits(pts, self._removed(cache, world, sample))
        rel = lg > _RELEVANT_LOGIT
        return float(cache.anchors.iou[rel] @ _softplus(lg[rel]))

    def adversarial_losses(self, params, idx=None) -> np.ndarray:
        p = self._params(params)
        verts = deform_vertices(self.template, p, self.config.deform)
        idx = range(len(self.samples)) if idx is None else idx
        return np.array([self.sample_loss(i, verts) for i in idx])

    def laplacian(self, params) -> float:
        verts = deform_vertices(self.template, self._params(params), self.config.deform)
        return laplacian_loss_and_grad(verts, self.operator)[0]

    def loss(self, params, idx=None) -> float:
        """Mean adversarial loss over the batch plus the weighted Laplacian of the deformed mesh."""
        p = self._params(params)
        verts = deform_vertices(self.template, p, self.config.deform)
        idx = list(range(len(self.samples))) if idx is None else list(idx)
        adv = np.mean([self.sample_loss(i, verts) for i in idx])
        lap = laplacian_loss_and_grad(verts, self.operator)[0]
        return total_loss(float(adv), lap, self.config.lambda_lap)

    def loss_and_grad(self, params, idx=None):
        """Loss and its analytic gradient with respect to the flat parameter vector."""
        if self.detector.representation != "density_grid":
            raise ValueError(
                f"white-box gradients need the density_grid detector, got {self.detector.representation!r}; "
                "use the genetic optimizer instead"
            )
        if self.config.compose_mode != "union":
            raise ValueError("white-box gradients support compose_mode='union' only")
        p = self._params(params)
        verts, jac = deform_vertices(self.template, p, self.config.deform, with_jacobian=True)
        idx = list(range(len(self.samples))) if idx is None else list(idx)
        g_verts = np.zeros_like(verts)
        adv_total = 0.0
        faces = self.template.base.faces
        for i in idx:
            sample = self.samples[i]
            R, t = sample.placement[:3, :3], sample.placement[:3, 3]
            world = TriangleMesh(verts @ R.T + t, faces)
            hits = render_hits(world, sample.rays)
            cache = self.cache(i)
            if cache.n_anchors == 0 or hits.t.size == 0:
                # nothing rendered: the clean loss, with zero gradient
                adv_total += self.sample_loss(i, verts)
                continue
            iou = cache.anchors.iou

            def loss_fn(lg):
                rel = lg > _RELEVANT_LOGIT
                return float(iou[rel] @ _softplus(lg[rel])), np.where(rel, iou * expit(lg), 0.0)

            _, loss_i, g_pts = cache.logits_and_point_grad(hits.points, loss_fn)
            adv_total += loss_i
            w, d, n_scaled = hit_point_jacobian(world, sample.rays, hits)
            coef = np.einsum("ij,ij->i", g_pts, d)
            g_face = (w * coef[:, None])[:, :, None] * n_scaled[:, None, :]
            g_world = np.zeros_like(verts)
            np.add.at(g_world, faces[hits.face_index].ravel(), g_face.reshape(-1, 3))
            g_verts += g_world @ R
        n = len(idx)
        lap, g_lap = laplacian_loss_and_grad(verts, self.operator)
        g_total = g_verts / n + self.config.lambda_lap * g_lap
        loss = total_loss(adv_total / n, lap, self.config.lambda_lap)
        return loss, params_vjp(jac, g_total, self.config.deform)


def evaluate_objective(params, samples, template: AdversaryTemplate, detector: TemplateDetector,
                       config: AttackConfig) -> float:
    return AttackObjective(samples, template, detector, config).loss(params)


# --------------------------------------------------------------------------- optimizers


def _template(template, config: AttackConfig) -> AdversaryTemplate:
    if template is None:
        return AdversaryTemplate.icosphere(config.deform.b)
    return template


def _genome_mask(template: AdversaryTemplate, config: AttackConfig) -> np.ndarray:
    """Coordinates the optimizers may change (theta only in planar_z rotation mode)."""
    mask = np.ones(3 * template.n_vertices + 4, dtype=bool)
    if config.deform.rotation_mode != "planar_z":
        mask[-1] = False
    # zero translation limits make the raw translation irrelevant
    mask[3 * template.n_vertices : 3 * template.n_vertices + 3] = config.deform.c_arr > 0
    return mask


class WhiteBoxAttack(BaseEstimator):
    """Adam on the reparameterised mesh with analytic gradients.

    Parameters
    ----------
    config : AttackConfig
    template : AdversaryTemplate, optional
        Defaults to the icosphere filling the size box.
    random_state : int or None
    """

    def __init__(self, config: AttackConfig | None = None, template: AdversaryTemplate | None = None,
                 random_state=0):
        self.config = config
        self.template = template
        self.random_state = random_state

    def _init_state(self, objective: AttackObjective, init):
        cfg = self.config or AttackConfig(optimizer="whitebox")
        rng = np.random.default_rng(self.random_state)
        template = objective.template
        x = template.zero_params().to_vector() if init is None else np.asarray(init, dtype=float).copy()
        n = len(objective.samples)
        eval_idx = np.sort(rng.permutation(n)[: min(cfg.eval_size, n)])
        return {
            "rng": rng, "mask": _genome_mask(template, cfg), "eval_idx": eval_idx, "x": x,
            "m1": np.zeros_like(x), "m2": np.zeros_like(x), "order": np.zeros(0, dtype=int),
            "champion": x.copy(), "champion_fit": -objective.loss(x, eval_idx), "iteration": 0,
        }

    def _step(self, objective: AttackObjective, state) -> tuple:
        """One Adam step on a minibatch; returns the history row."""
        cfg = self.config or AttackConfig(optimizer="whitebox")
        beta1, beta2, eps = 0.9, 0.999, 1e-8
        n = len(objective.samples)
        size = min(cfg.batch_size, n)
        if state["order"].size < size:
            state["order"] = np.concatenate([state["order"], state["rng"].permutation(n)])
        batch, state["order"] = state["order"][:size], state["order"][size:]
        loss, g = objective.loss_and_grad(state["x"], batch)
        g = np.where(state["mask"], g, 0.0)
        it = state["iteration"] = state["iteration"] + 1
        state["m1"] = beta1 * state["m1"] + (1 - beta1) * g
        state["m2"] = beta2 * state["m2"] + (1 - beta2) * g * g
        mhat = state["m1"] / (1 - beta1**it)
        vhat = state["m2"] / (1 - beta2**it)
        state["x"] = state["x"] - cfg.learning_rate * mhat / (np.sqrt(vhat) + eps)
        if it % cfg.eval_every == 0 or it == cfg.iterations:
            fit = -objective.loss(state["x"], state["eval_idx"])
            if fit > state["champion_fit"]:
                state["champion"], state["champion_fit"] = state["x"].copy(), fit
        return (it, loss, -state["champion_fit"], cfg.learning_rate)

    def fit(self, samples, detector: TemplateDetector, init=None):
        cfg = self.config or AttackConfig(optimizer="whitebox")
        template = _template(self.template, cfg)
        objective = AttackObjective(samples, template, detector, cfg)
        state = self._init_state(objective, init)
        best = -state["champion_fit"]
        history = [(0, best, best, cfg.learning_rate)]
        for _ in range(cfg.iterations):
            history.append(self._step(objective, state))
        self.params_ = DeformParams.from_vector(state["champion"], template.n_vertices)
        self.best_loss_ = -state["champion_fit"]
        self.history_ = history
        self.template_ = template
        return self

    @property
    def history_header(self):
        return ("iteration", "loss", "best_loss", "learning_rate")

    def transform(self, X=None) -> TriangleMesh:
        """The optimised adversary mesh (adversary frame)."""
        from .mesh import apply_deformation

        return apply_deformation(self.template_, self.params_, (self.config or AttackConfig()).deform)


def selection_weights(fitness) -> np.ndarray:
    """Softmax (temperature 1) of the fitness values; shifting by the max keeps it finite."""
    f = np.asarray(fitness, dtype=float)
    w = np.exp(f - f.max())
    return w / w.sum()


def select_parents(fitness, n_pairs: int, rng) -> tuple:
    """Two independent parent index draws of size ``n_pairs`` with softmax weights."""
    w = selection_weights(fitness)
    return rng.choice(w.size, size=n_pairs, p=w), rng.choice(w.size, size=n_pairs, p=w)


class GeneticAttack(BaseEstimator):
    """Black-box evolution of the mesh parameters.

    Each generation scores the population on a freshly drawn batch of
    ``fitness_batch`` samples (fitness is the negated objective), keeps the
    champion, and refills the population by per-coordinate crossover of two
    softmax-selected parents followed by per-coordinate Gaussian mutation.
    The champion is the best candidate so far on a fixed evaluation batch, so
    its fitness there never decreases.
    """

    def __init__(self, config: AttackConfig | None = None, template: AdversaryTemplate | None = None,
                 random_state=0):
        self.config = config
        self.template = template
        self.random_state = random_state

    @property
    def history_header(self):
        return ("generation", "elite_fitness", "mean_fitness", "mutation_std")

    def _init_state(self, objective: AttackObjective, init):
        cfg = self.config or AttackConfig()
        rng = np.random.default_rng(self.random_state)
        template = objective.template
        mask = _genome_mask(template, cfg)
        x0 = template.zero_params().to_vector() if init is None else np.asarray(init, dtype=float).copy()
        n = len(objective.samples)
        eval_idx = np.sort(rng.permutation(n)[: min(cfg.eval_size, n)])
        pop = np.tile(x0, (cfg.population, 1))
        std, prob = cfg.mutation_std, cfg.mutation_prob
        pop[1:] = self._mutate(pop[1:], std, prob, mask, rng)
        state = {
            "rng": rng, "mask": mask, "eval_idx": eval_idx, "pop": pop, "std": std, "prob": prob,
            "champion": x0.copy(), "champion_fit": -objective.loss(x0, eval_idx), "stall": 0,
            "best_running": None, "generation": 0,
        }
        state["best_running"] = state["champion_fit"]
        return state

    @staticmethod
    def _mutate(pop, std, prob, mask, rng):
        if prob <= 0 or std <= 0:
            return pop
        hit = (rng.random(pop.shape) < prob) & mask
        noise = rng.normal(0.0, std, pop.shape)
        return np.where(hit, pop + noise, pop)

    def _step(self, objective: AttackObjective, state) -> tuple:
        """One generation; returns the history row."""
        cfg = self.config or AttackConfig()
        rng = state["rng"]
        n = len(objective.samples)
        batch = np.sort(rng.choice(n, size=min(cfg.fitness_batch, n), replace=False))
        pop = state["pop"]
        fitness = np.array([-objective.loss(x, batch) for x in pop])
        best = int(np.argmax(fitness))
        cand_fit = -objective.loss(pop[best], state["eval_idx"])
        if cand_fit > state["champion_fit"]:
            state["champion"], state["champion_fit"] = pop[best].copy(), cand_fit
        if state["champion_fit"] > state["best_running"] + cfg.improvement_tol:
            state["best_running"] = state["champion_fit"]
            state["stall"] = 0
        else:
            state["stall"] += 1
            if state["stall"] >= cfg.patience:
                state["std"] *= cfg.decay
                state["prob"] *= cfg.decay
                state["stall"] = 0
        n_child = cfg.population - 1
        pa, pb = select_parents(fitness, n_child, rng)
        pick = rng.random((n_child, pop.shape[1])) < 0.5
        children = np.where(pick, pop[pa], pop[pb])
        children = self._mutate(children, state["std"], state["prob"], state["mask"], rng)
        state["pop"] = np.vstack([state["champion"][None], children])
        state["generation"] += 1
        return (state["generation"], state["champion_fit"], float(fitness.mean()), state["std"])

    def fit(self, samples, detector: TemplateDetector, init=None):
        cfg = self.config or AttackConfig()
        template = _template(self.template, cfg)
        objective = AttackObjective(samples, template, detector, cfg)
        state = self._init_state(objective, init)
        history = [(0, state["champion_fit"], float("nan"), state["std"])]
        for _ in range(cfg.generations):
            history.append(self._step(objective, state))
        self.params_ = DeformParams.from_vector(state["champion"], template.n_vertices)
        self.best_fitness_ = state["champion_fit"]
        self.history_ = history
        self.population_ = state["pop"].copy()
        self.template_ = template
        self.state_ = state
        return self

    def transform(self, X=None) -> TriangleMesh:
        from .mesh import apply_deformation

        return apply_deformation(self.template_, self.params_, (self.config or AttackConfig()).deform)


def whitebox_attack(samples, template, detector, config: AttackConfig, rng=0) -> DeformParams:
    return WhiteBoxAttack(config, template, rng).fit(samples, detector).params_


def genetic_attack(samples, template, detector, config: AttackConfig, rng=0) -> DeformParams:
    return GeneticAttack(config, template, rng).fit(samples, detector).params_


def run_attack(samples, detector, config: AttackConfig, template=None, rng=0):
    """Fitted attack estimator for ``config.optimizer``."""
    cls = GeneticAttack if config.optimizer == "genetic" else WhiteBoxAttack
    return cls(config, template, rng).fit(samples, detector)


# --------------------------------------------------------------------------- outputs


class ParamsFormatError(ValueError):
    pass


_PARAM_MAGIC = b"RFAP"
_PARAM_HEADER = struct.Struct("<4sII3d3dB")


def save_params(path, template: AdversaryTemplate, params: DeformParams, deform: DeformConfig) -> Path:
    """Binary checkpoint: header, template vertices and faces, parameter vector (float64)."""
    base = template.base
    mode = 1 if deform.rotation_mode == "planar_z" else 0
    header = _PARAM_HEADER.pack(_PARAM_MAGIC, 1, base.n_vertices, *deform.b, *deform.c, mode)
    extra = struct.pack("<Id", base.n_faces,
                        -1.0 if deform.max_vertex_perturbation is None else deform.max_vertex_perturbation)
    body = (base.vertices.astype("<f8").tobytes() + base.faces.astype("<i8").tobytes()
            + params.to_vector().astype("<f8").tobytes())
    path = Path(path)
    path.write_bytes(header + extra + body)
    return path


def load_params(path):
    """``(template, params, deform_config)`` from :func:`save_params` output."""
    data = Path(path).read_bytes()
    if len(data) < _PARAM_HEADER.size + 12:
        raise ParamsFormatError("parameter checkpoint is truncated")
    magic, version, nv, *rest = _PARAM_HEADER.unpack_from(data)
    if magic != _PARAM_MAGIC or version != 1:
        raise ParamsFormatError("not a parameter checkpoint")
    b, c, mode = rest[:3], rest[3:6], rest[6]
    nf, mvp = struct.unpack_from("<Id", data, _PARAM_HEADER.size)
    off = _PARAM_HEADER.size + 12
    need = off + nv * 24 + nf * 24 + (3 * nv + 4) * 8
    if len(data) != need:
        raise ParamsFormatError(f"checkpoint has {len(data)} bytes, expected {need}")
    verts = np.frombuffer(data, "<f8", nv * 3, off).reshape(nv, 3)
    off += nv * 24
    faces = np.frombuffer(data, "<i8", nf * 3, off).reshape(nf, 3)
    off += nf * 24
    vec = np.frombuffer(data, "<f8", 3 * nv + 4, off)
    deform = DeformConfig(tuple(b), tuple(c), "planar_z" if mode else "fixed_identity",
                          None if mvp < 0 else mvp)
    template = AdversaryTemplate.from_mesh(TriangleMesh(verts.copy(), faces.copy()), deform.b)
    return template, DeformParams.from_vector(vec.copy(), nv), deform


def write_history(path, header, rows) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return path
