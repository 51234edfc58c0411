"""Command-line entry point.

Every subcommand reads one YAML config (``--config``), applies ``--seed``,
``--jobs``, ``--output`` and dotted-path overrides (``--attack.generations=50``
or ``--set attack.generations=50``), echoes the resolved tree to
``<output>/config.resolved.yaml`` and writes its artifacts under ``<output>``.
Intermediate artifacts (shape prior, detector, roof fits) are cached under
``<output>/cache`` keyed by a hash of the config sections they depend on.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .attack import AttackSample, load_params, prepare_samples, run_attack, save_params, write_history, _placement_aabb
from .config import ConfigError, RunConfig, load_config, parse_override
from .data import KittiFormatError, generate_synthetic_dataset, load_kitti_dir, write_kitti_frame
from .defense_eval import AdversarialTrainer, augmentation_train, evaluate_attack, export_report
from .detector import load_detector, save_detector
from .mesh import AdversaryTemplate, apply_deformation, read_mesh, write_mesh
from .raycast import sample_rays
from .roof_fit import RoofFitter, RoofRegion, VehicleShapeBank, build_prior, load_prior, save_prior

log = logging.getLogger("roofadv")

COMMANDS = ("fit-roofs", "attack", "evaluate", "defend", "make-synthetic", "export-mesh")


class Workspace:
    """Lazily built inputs shared by the subcommands of one run."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.out = Path(cfg.output)
        self.cache = self.out / "cache"
        self.sensor = cfg.sensor.build()
        self.deform = cfg.attack.deform.build()
        self._frames: dict = {}
        self._samples: dict = {}
        self._prior = None
        self._detector = None

    def prior(self):
        if self._prior is None:
            spec = self.cfg.prior
            if spec.path:
                self._prior = load_prior(spec.path)
            else:
                path = self.cache / f"prior-{self.cfg.digest('prior')}.rfsp"
                if not path.exists():
                    log.info("building shape prior (k=%d)", spec.k)
                    path.parent.mkdir(parents=True, exist_ok=True)
                    save_prior(build_prior(VehicleShapeBank.procedural(), spec.k), path)
                # always go through the file so fresh and cached runs see the same float32 values
                self._prior = load_prior(path)
        return self._prior

    def frames(self, split: str) -> list:
        if split not in self._frames:
            src = getattr(self.cfg.dataset, split)
            if src.kind == "kitti_dir":
                ids = None
                if src.split_file:
                    ids = [ln.strip() for ln in Path(src.split_file).read_text(encoding="utf-8").splitlines()
                           if ln.strip()]
                self._frames[split] = load_kitti_dir(src.path, ids)
            else:
                self._frames[split] = generate_synthetic_dataset(
                    src.synthetic.build(), self.sensor, rng=[self.cfg.seed, src.seed_offset], prefix=f"{split}_")
            log.info("%s split: %d frames", split, len(self._frames[split]))
        return self._frames[split]

    def detector(self):
        if self._detector is None:
            spec = self.cfg.detector
            if spec.checkpoint:
                self._detector = load_detector(spec.checkpoint)
            else:
                key = self.cfg.digest("detector", "sensor", "dataset")
                path = self.cache / f"detector-{key}.rfd"
                if not path.exists():
                    log.info("training %s detector", spec.representation)
                    model = spec.build(self.cfg.seed).fit(self.frames("train"))
                    path.parent.mkdir(parents=True, exist_ok=True)
                    save_detector(model, path)
                self._detector = load_detector(path)
        return self._detector

    def samples(self, split: str) -> list:
        if split not in self._samples:
            key = self.cfg.digest("dataset", "sensor", "prior", "attack")
            path = self.cache / f"roofs-{split}-{key}.csv"
            frames = self.frames(split)
            if path.exists():
                samples = read_roofs(path, frames, self.sensor, self.deform)
            else:
                samples = prepare_samples(frames, self.prior(), self.sensor, self.deform,
                                          self.cfg.dataset.min_points)
                path.parent.mkdir(parents=True, exist_ok=True)
                write_roofs(path, samples)
            self._samples[split] = samples
        return self._samples[split]


ROOF_FIELDS = ("frame_id", "label_index", "roof_x", "roof_y", "roof_z") + tuple(f"p{i}{j}" for i in range(3)
                                                                               for j in range(4))


def _r(x) -> str:
    return repr(float(x))


def write_roofs(path, samples) -> Path:
    """Roof centers and adversary placements, one row per attack sample."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ROOF_FIELDS)
        for s in samples:
            w.writerow([s.frame.frame_id, s.label_index, *map(_r, s.roof.center), *map(_r, s.placement[:3].ravel())])
    return Path(path)


def read_roofs(path, frames, sensor, deform) -> list:
    """Attack samples rebuilt from :func:`write_roofs` output (rays are recomputed)."""
    by_id = {f.frame_id: f for f in frames}
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            frame = by_id[row["frame_id"]]
            i = int(row["label_index"])
            center = np.array([float(row[k]) for k in ("roof_x", "roof_y", "roof_z")])
            placement = np.eye(4)
            placement[:3] = np.array([float(row[f"p{a}{b}"]) for a in range(3) for b in range(4)]).reshape(3, 4)
            rays = sample_rays(sensor, _placement_aabb(placement, deform))
            out.append(AttackSample(frame, frame.labels[i], RoofRegion(center, center[None]), placement, rays, i))
    return out


# --------------------------------------------------------------------------- commands


def cmd_fit_roofs(ws: Workspace, args) -> int:
    for split in ("train", "val"):
        samples = ws.samples(split)
        dst = ws.out / f"roofs_{split}.csv"
        write_roofs(dst, samples)
        print(f"{split}: {len(samples)} roofs -> {dst}")
    return 0


def _template(ws: Workspace) -> AdversaryTemplate:
    return AdversaryTemplate.icosphere(ws.deform.b, ws.cfg.attack.icosphere_subdivisions)


def cmd_attack(ws: Workspace, args) -> int:
    cfg = ws.cfg.attack
    samples = ws.samples("train")
    if cfg.max_samples is not None:
        samples = samples[: cfg.max_samples]
    if not samples:
        raise RuntimeError("no eligible training vehicles to attack")
    template = _template(ws)
    est = run_attack(samples, ws.detector(), cfg.build(), template, ws.cfg.seed)
    mesh = est.transform()
    paths = [write_mesh(mesh, ws.out / "adversary.obj"),
             save_params(ws.out / "adversary.rfap", template, est.params_, ws.deform),
             write_history(ws.out / "loss.csv", est.history_header, est.history_)]
    for p in paths:
        print(p)
    return 0


def cmd_evaluate(ws: Workspace, args) -> int:
    if not args.mesh:
        raise ConfigError("evaluate needs --mesh")
    mesh = read_mesh(args.mesh)
    spec = ws.cfg.evaluate
    report = evaluate_attack(mesh, ws.samples("val"), ws.detector(), spec.iou_threshold, ws.cfg.attack.compose_mode,
                             ws.cfg.jobs, cell=spec.heatmap_cell)
    if not report.valid:
        print("no validation target is detected before the attack; report is invalid", file=sys.stderr)
        return 3
    files = export_report(report, ws.out)
    print(f"success_rate {report.success_rate!r} ({report.n_success}/{report.n_detected_before})")
    for p in files.values():
        print(p)
    return 0


def cmd_defend(ws: Workspace, args) -> int:
    base = ws.detector()
    frames = ws.frames("train")
    if args.mode == "augment":
        fitter = RoofFitter(ws.prior())
        model = augmentation_train(base, frames, ws.cfg.augment.build(), fitter, ws.cfg.seed, ws.sensor, ws.deform,
                                   ws.cfg.augment.rounds)
    else:
        d = ws.cfg.defense
        trainer = AdversarialTrainer(ws.cfg.attack.build(), d.k, d.epochs, d.frames_per_step, d.model_steps,
                                     d.attack_batch, ws.cfg.augment.build(), ws.cfg.seed)
        model = trainer.fit(frames, base, ws.samples("train")).detector_
        write_history(ws.out / "defense_history.csv", ("step", "attack_loss", "pool_vehicles"), trainer.history_)
    path = save_detector(model, ws.out / f"detector_{args.mode}.rfd")
    print(path)
    return 0


def cmd_make_synthetic(ws: Workspace, args) -> int:
    root = ws.out / "kitti"
    sets = root / "ImageSets"
    sets.mkdir(parents=True, exist_ok=True)
    for split in ("train", "val"):
        frames = ws.frames(split)
        for f in frames:
            write_kitti_frame(f, root / "training")
        (sets / f"{split}.txt").write_text("".join(f"{f.frame_id}\n" for f in frames), encoding="utf-8")
        print(f"{split}: {len(frames)} frames")
    print(root)
    return 0


def cmd_export_mesh(ws: Workspace | None, args) -> int:
    if not args.params or not args.out:
        raise ConfigError("export-mesh needs --params and --out")
    template, params, deform = load_params(args.params)
    out = write_mesh(apply_deformation(template, params, deform), args.out)
    print(out)
    return 0


HANDLERS = {
    "fit-roofs": cmd_fit_roofs,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
    "defend": cmd_defend,
    "make-synthetic": cmd_make_synthetic,
    "export-mesh": cmd_export_mesh,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--jobs", type=int, help="worker threads for evaluation (default from config)")
    common.add_argument("--output", help="output directory (default from config)")
    common.add_argument("--set", action="append", default=[], metavar="PATH=VALUE",
                        help="override a config field by dotted path (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="roofadv", description="Rooftop adversarial meshes against LiDAR detectors.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("fit-roofs", parents=[common], help="fit shape latents and roofs for all eligible vehicles")
    sub.add_parser("attack", parents=[common], help="optimize a universal adversary")
    p = sub.add_parser("evaluate", parents=[common], help="success rate, recall curve and heatmap of a mesh")
    p.add_argument("--mesh", required=True, help="adversary mesh (OBJ/PLY, adversary frame)")
    p = sub.add_parser("defend", parents=[common], help="retrain the detector with a defense")
    p.add_argument("--mode", choices=("augment", "adversarial"), required=True)
    sub.add_parser("make-synthetic", parents=[common], help="write the synthetic dataset in KITTI layout")
    p = sub.add_parser("export-mesh", parents=[common], help="rebuild a mesh from a parameter checkpoint")
    p.add_argument("--params", required=True)
    p.add_argument("--out", required=True)
    return parser


def _split_overrides(extra) -> list:
    """Dotted ``--a.b=value`` / ``--a.b value`` flags left over by argparse."""
    out, i = [], 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok.split("=", 1)[0]:
            raise ConfigError(f"unrecognized argument {tok!r}")
        if "=" in tok:
            out.append(parse_override(tok))
            i += 1
        elif i + 1 < len(extra):
            out.append(parse_override(f"{tok}={extra[i + 1]}"))
            i += 2
        else:
            raise ConfigError(f"override {tok!r} needs a value")
    return out


def resolve_config(args, extra) -> RunConfig:
    overrides = [parse_override(s) for s in args.set] + _split_overrides(extra)
    for name in ("seed", "jobs", "output"):
        value = getattr(args, name)
        if value is not None:
            overrides.append((name, value))
    return load_config(args.config, overrides)


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "export-mesh" and args.config is None:
            if extra or args.set:
                raise ConfigError("overrides need --config")
            return cmd_export_mesh(None, args)
        cfg = resolve_config(args, extra)
        ws = Workspace(cfg)
        ws.out.mkdir(parents=True, exist_ok=True)
        (ws.out / "config.resolved.yaml").write_text(cfg.to_yaml(), encoding="utf-8")
        return HANDLERS[args.command](ws, args)
    except ConfigError as exc:
        parser.error(str(exc))
    except (OSError, ValueError, RuntimeError, KittiFormatError, KeyError) as exc:
        print(f"roofadv {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
