import filecmp

import numpy as np
import pytest
import yaml

from roofadv.cli import main, read_roofs
from roofadv.config import ConfigError, RunConfig, build_config, load_config, parse_override
from roofadv.mesh import read_mesh

TINY = {
    "seed": 3,
    "dataset": {
        "train": {"synthetic": {"n_frames": 3, "vehicles": [2, 3], "distractors": [0, 1]}},
        "val": {"synthetic": {"n_frames": 2, "vehicles": [2, 3], "distractors": [0, 1]}, "seed_offset": 1},
    },
    "detector": {"max_iter": 15, "hard_negative_rounds": 0},
    "attack": {"generations": 2, "population": 3, "fitness_batch": 2, "mutation_std": 0.5, "mutation_prob": 0.1,
               "max_samples": 4},
    "defense": {"k": 2, "epochs": 1, "frames_per_step": 4, "model_steps": 1, "attack_batch": 2},
}


def test_seed_is_required():
    with pytest.raises(ConfigError, match="seed"):
        build_config({})


def test_unknown_and_invalid_fields_name_their_path():
    with pytest.raises(ConfigError, match=r"attack\.genrations"):
        build_config({"seed": 1, "attack": {"genrations": 3}})
    with pytest.raises(ConfigError, match=r"attack\.mutation_prob"):
        build_config({"seed": 1, "attack": {"mutation_prob": 2.0}})
    with pytest.raises(ConfigError, match="kitti_dir"):
        build_config({"seed": 1, "dataset": {"train": {"kind": "kitti_dir"}}})


def test_defaults_are_the_published_settings():
    cfg = build_config({"seed": 0})
    a = cfg.attack.build()
    assert (a.lambda_lap, a.learning_rate, a.population, a.mutation_std, a.mutation_prob, a.fitness_batch,
            a.patience, a.decay) == (0.001, 0.005, 16, 0.05, 0.01, 100, 100, 0.5)
    assert cfg.attack.deform.b == (0.7, 0.7, 0.5) and cfg.attack.deform.c == (0.1, 0.1, 0.0)
    assert cfg.augment.n_vertices == (50, 200) and cfg.augment.n_remove == (0, 300) and cfg.augment.sigma == 0.5
    assert cfg.defense.k == 30 and cfg.evaluate.iou_threshold == 0.7


def test_overrides_and_yaml_round_trip(tmp_path):
    assert parse_override("attack.generations=7") == ("attack.generations", 7)
    assert parse_override("--deform.b=[1, 1, 0.5]") == ("deform.b", [1, 1, 0.5])
    with pytest.raises(ConfigError):
        parse_override("attack.generations")
    cfg = build_config(TINY, [("attack.generations", 9), ("detector.representation", "point_features")])
    assert cfg.attack.generations == 9 and cfg.detector.representation == "point_features"
    path = tmp_path / "c.yaml"
    path.write_text(cfg.to_yaml())
    again = load_config(path)
    assert again == cfg and again.digest() == cfg.digest()
    assert cfg.digest("prior") == build_config({"seed": 3}).digest("prior")
    assert cfg.digest("attack") != build_config(TINY).digest("attack")
    with pytest.raises(ConfigError):
        build_config(TINY, [("seed.x", 1)])


def test_config_is_frozen():
    cfg = build_config({"seed": 1})
    with pytest.raises(Exception):
        cfg.seed = 2


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    return code, capsys.readouterr()


def test_unknown_flag_is_a_usage_error(tiny_config, tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["fit-roofs", "--config", str(tiny_config), "--output", str(tmp_path), "--frobnicate"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["attack", "--config", str(tiny_config), "--output", str(tmp_path), "--attack.population=1"])
    assert exc.value.code == 2
    assert "attack.population" in capsys.readouterr().err


def test_missing_input_file_exits_nonzero(tmp_path, capsys):
    code, out = run(capsys, "export-mesh", "--params", tmp_path / "missing.rfap", "--out", tmp_path / "m.obj")
    assert code == 1 and "error" in out.err


@pytest.fixture(scope="module")
def attack_runs(tiny_config, tmp_path_factory):
    runs = []
    for name in ("a", "b"):
        out = tmp_path_factory.mktemp(name)
        assert main(["attack", "--config", str(tiny_config), "--output", str(out)]) == 0
        assert main(["evaluate", "--config", str(tiny_config), "--output", str(out),
                     "--mesh", str(out / "adversary.obj")]) in (0, 3)
        runs.append(out)
    return runs


def test_attack_and_evaluate_are_byte_identical(attack_runs):
    a, b = attack_runs
    names = ["adversary.obj", "adversary.rfap", "loss.csv"]
    names += [p.name for p in a.glob("*.csv")]
    assert "loss.csv" in names
    for name in sorted(set(names)):
        assert filecmp.cmp(a / name, b / name, shallow=False), name
    # the resolved config differs only in the output directory it records
    ca, cb = (yaml.safe_load((d / "config.resolved.yaml").read_text()) for d in (a, b))
    assert ca.pop("output") != cb.pop("output") and ca == cb
    lines = (a / "loss.csv").read_text().splitlines()
    assert lines[0] == "generation,elite_fitness,mean_fitness,mutation_std" and len(lines) == 4


def test_rerun_in_place_reuses_cache_and_matches(attack_runs, tiny_config, tmp_path):
    a, _ = attack_runs
    before = (a / "adversary.obj").read_bytes()
    assert main(["attack", "--config", str(tiny_config), "--output", str(a)]) == 0
    assert (a / "adversary.obj").read_bytes() == before
    assert any(p.name.startswith("detector-") for p in (a / "cache").iterdir())


def test_export_mesh_matches_attack_output(attack_runs, tmp_path, capsys):
    a, _ = attack_runs
    code, _ = run(capsys, "export-mesh", "--params", a / "adversary.rfap", "--out", tmp_path / "m.obj")
    assert code == 0
    assert (tmp_path / "m.obj").read_bytes() == (a / "adversary.obj").read_bytes()
    assert read_mesh(tmp_path / "m.obj").is_watertight()


def test_fit_roofs_cache_round_trip(attack_runs, tiny_config, capsys):
    from roofadv.cli import Workspace

    a, _ = attack_runs
    code, out = run(capsys, "fit-roofs", "--config", tiny_config, "--output", a)
    assert code == 0 and "roofs" in out.out
    ws = Workspace(load_config(tiny_config, [("output", str(a))]))
    fresh = ws.samples("train")
    back = read_roofs(a / "roofs_train.csv", ws.frames("train"), ws.sensor, ws.deform)
    assert len(back) == len(fresh)
    for s, t in zip(fresh, back):
        assert np.array_equal(s.placement, t.placement) and s.target == t.target
        assert np.array_equal(s.rays.directions, t.rays.directions)


def test_defend_writes_checkpoints(attack_runs, tiny_config, tmp_path, capsys):
    from roofadv.detector import load_detector

    a, _ = attack_runs
    for mode in ("augment", "adversarial"):
        code, _ = run(capsys, "defend", "--config", tiny_config, "--output", a, "--mode", mode)
        assert code == 0
        load_detector(a / f"detector_{mode}.rfd")
    assert (a / "defense_history.csv").read_text().startswith("step,attack_loss,pool_vehicles\n")


def test_make_synthetic_round_trips_through_kitti_dir(tiny_config, tmp_path, capsys):
    from roofadv.cli import Workspace

    code, _ = run(capsys, "make-synthetic", "--config", tiny_config, "--output", tmp_path)
    assert code == 0
    root = tmp_path / "kitti"
    assert (root / "ImageSets" / "train.txt").read_text().count("\n") == 3
    tree = dict(TINY, output=str(tmp_path / "k"))
    tree["dataset"] = {"train": {"kind": "kitti_dir", "path": str(root / "training"),
                                 "split_file": str(root / "ImageSets" / "train.txt")}}
    ws = Workspace(build_config(tree))
    synth = Workspace(load_config(tiny_config)).frames("train")
    kitti = ws.frames("train")
    assert [f.frame_id for f in kitti] == [f.frame_id for f in synth]
    for f, g in zip(kitti, synth):
        assert np.array_equal(f.cloud, g.cloud)
        assert np.allclose([b.to_array() for b in f.labels], [b.to_array() for b in g.labels], atol=1e-12)
