import json

import numpy as np
import pytest

from gradinv import cli, data_io, harness
from gradinv.data_io import ConfigError, Dataset, ExperimentConfig
from gradinv.defenses import DefenseConfig
from gradinv.models import build_model, client_step, load_checkpoint


def _cfg(tmp_path, **attack):
    cfg = ExperimentConfig(output_dir=str(tmp_path / "run"), batch_size=2)
    cfg.data.n_private = 4
    cfg.attack.iterations = 40
    cfg.attack.alpha_tv = 0.01
    for k, v in attack.items():
        setattr(cfg.attack, k, v)
    return cfg


def test_server_mean_equals_average_of_clients():
    rng = np.random.default_rng(0)
    model = build_model("mlp2", (1, 4, 4), hidden=8)
    clients = [harness.Client(rng.uniform(size=(3, 1, 4, 4)), rng.integers(0, 10, 3)) for _ in range(3)]
    sim = harness.FederationSim(model, clients, DefenseConfig())
    agg = sim.round()
    pkts = [client_step(model, c.images, c.labels, update_running=False) for c in clients]
    for n in model.param_names:
        np.testing.assert_array_equal(agg[n], np.mean([p.grads[n] for p in pkts], axis=0))
    assert len(sim.tap.packets) == 3 and sim.epoch == 1


def test_tap_carries_statistics_only_when_shared():
    rng = np.random.default_rng(1)
    model = build_model("convnet6-bn", (1, 8, 8))
    client = harness.Client(rng.uniform(size=(4, 1, 8, 8)), rng.integers(0, 10, 4))
    quiet = harness.FederationSim(model, [client], DefenseConfig(), bn_sharing=False)
    quiet.round()
    assert all(p.bn_stats is None and p.labels is None for _, _, p in quiet.tap.packets)
    loud = harness.FederationSim(model, [client], DefenseConfig(), bn_sharing=True, include_labels=True)
    loud.round()
    assert all(p.bn_stats is not None and p.labels is not None for _, _, p in loud.tap.packets)


def test_bundle_never_contains_batch_statistics_without_sharing(tmp_path):
    cfg = _cfg(tmp_path, bn_mode="proxy")
    cfg.model.arch = "convnet6-bn"
    res = harness.run_attack_experiment(cfg)
    for f in res.out.iterdir():
        raw = f.read_bytes()
        for needle in (b"bn_stats", b"running_mean", b"running_var", b"batch_mean"):
            assert needle not in raw, (f.name, needle)


def test_same_config_gives_identical_bundle(tmp_path):
    cfg = _cfg(tmp_path)
    cfg.defense = DefenseConfig(mix_k=2, sign_flip=True)
    cfg.attack.epochs = 2
    cfg.attack.pixel_range = (-1.0, 1.0)
    cfg.attack.abs_tv = True
    a = harness.run_attack_experiment(cfg, tmp_path / "a")
    b = harness.run_attack_experiment(cfg, tmp_path / "b")
    man_a = json.loads((a.out / "manifest.json").read_text())
    assert (a.out / "manifest.json").read_bytes() == (b.out / "manifest.json").read_bytes()
    for name, digest in man_a["files"].items():
        assert (a.out / name).read_bytes() == (b.out / name).read_bytes()
        assert harness._sha(a.out / name) == digest
    assert "timings.json" not in man_a["files"]
    assert a.report["decode"]["rank"] == 4 and a.report["epochs"] == 2


def test_failure_leaves_marker(tmp_path):
    cfg = _cfg(tmp_path)
    cfg.data.n_private = 10_000
    with pytest.raises(ConfigError):
        harness.run_attack_experiment(cfg)
    assert json.loads((tmp_path / "run" / "FAILED.json").read_text())["error"] == "ConfigError"
    rows = harness.report([tmp_path / "run"])
    assert rows[0]["status"].startswith("failed")


def _tiny_sets():
    rng = np.random.default_rng(2)
    x = rng.uniform(size=(64, 1, 8, 8))
    y = rng.integers(0, 10, 64)
    return Dataset(x, y, 10), Dataset(x[:16], y[:16], 10)


def test_training_zero_epochs_and_determinism(tmp_path):
    tr, te = _tiny_sets()
    cfg = ExperimentConfig()
    cfg.train.epochs = 0
    model, rows = harness.train(cfg, tmp_path / "z", tr, te)
    init = build_model("mlp2", (1, 8, 8))
    saved = load_checkpoint(tmp_path / "z" / "model.ckpt")
    assert rows == []
    for n in init.param_names:
        np.testing.assert_array_equal(saved.params[n], init.params[n])
    cfg.train.epochs, cfg.train.batch_size = 2, 16
    harness.train(cfg, tmp_path / "a", tr, te)
    harness.train(cfg, tmp_path / "b", tr, te)
    assert (tmp_path / "a" / "accuracy.csv").read_bytes() == (tmp_path / "b" / "accuracy.csv").read_bytes()


def test_training_divergence_raises(tmp_path):
    tr, te = _tiny_sets()
    cfg = ExperimentConfig()
    cfg.train.epochs, cfg.train.lr = 1, 1e200
    with pytest.raises(harness.NumericalError):
        harness.train(cfg, None, tr, te)


def test_sweep_shapes_and_single_cell(tmp_path):
    cfg = _cfg(tmp_path)
    single = harness.sweep(cfg, {"attack.alpha_tv": [0.01]}, tmp_path / "s1")
    direct = harness.run_attack_experiment(cfg, tmp_path / "direct")
    assert (tmp_path / "s1" / "cell_000" / "report.json").read_bytes() == \
        (direct.out / "report.json").read_bytes()
    assert single["rows"][0]["median_mse"] == direct.report["median"]["mse"]
    grid = {"attack.alpha_tv": [0.0, 0.05], "defense.prune_ratio": [0.0, 0.5, 0.9]}
    table = harness.sweep(cfg, grid, tmp_path / "s2")
    assert len(table["rows"]) == 6
    assert set(table["best"]) == {"none", "gradprune(p=0.5)", "gradprune(p=0.9)"}
    with pytest.raises(ConfigError):
        harness.expand_grid(cfg, {"attack.alpha": [1]})
    with pytest.raises(ConfigError):
        harness.expand_grid(cfg, {"attack.alpha_tv": []})


def test_label_trials_distinct_batches(mnist_dir):
    ds = data_io.load_mnist(mnist_dir, split="test")
    model = build_model("convnet6", (1, 28, 28), seed=0)
    rows = harness.label_inference_trials(model, ds.images, ds.labels, range(1, 6), trials=10)
    assert all(r["exact"] for r in rows)


# command line

def test_cli_estimate_cost_and_lemma(capsys):
    assert cli.main(["estimate-cost"]) == 0
    out = capsys.readouterr().out
    assert "934.48" in out and "46,579.01" in out and "4,215,524.32" in out
    assert cli.main(["estimate-cost", "--N", "5000", "--format", "csv"]) == 0
    assert capsys.readouterr().out.splitlines()[1] == "5000,0.25,0.25,934.48"
    assert cli.main(["verify-lemma", "--seeds", "3"]) == 0


def test_cli_exit_codes(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["attack", "--attack.alpha_tvv", "1"])
    assert exc.value.code == 2
    assert cli.main(["attack", "--out", str(tmp_path / "x"), "--attack.labels", "nope"]) == 2
    (tmp_path / "bad.json").write_text(json.dumps({"attack": {"alpha_tvv": 0.1}}))
    assert cli.main(["attack", "--config", str(tmp_path / "bad.json")]) == 2
    assert cli.main(["train", "--out", str(tmp_path / "t"), "--train.epochs", "1",
                     "--train.lr", "1e200", "--data.n_private", "4"]) == 3


def test_cli_attack_sweep_report_label_infer(tmp_path, capsys):
    common = ["--attack.iterations", "20", "--data.n_private", "2", "--batch_size", "2"]
    assert cli.main(["attack", "--out", str(tmp_path / "r1"), "--seed", "3"] + common) == 0
    cfg = data_io.load_config(tmp_path / "r1" / "config.json")
    assert cfg.seed == cfg.attack.seed == cfg.model.seed == 3
    assert cli.main(["sweep", "--out", str(tmp_path / "sw"), "--grid",
                     '{"attack.alpha_tv": [0, 0.1]}'] + common) == 0
    assert (tmp_path / "sw" / "sweep.csv").exists()
    assert cli.main(["report", str(tmp_path / "r1"), "--csv", str(tmp_path / "rep.csv")]) == 0
    assert "none b=2" in capsys.readouterr().out
    assert cli.main(["label-infer", "--out", str(tmp_path / "li"), "--trials", "5",
                     "--model.arch", "convnet6"]) == 0
    assert "exact label sets: 5/5" in capsys.readouterr().out
