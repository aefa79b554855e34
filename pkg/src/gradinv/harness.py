"""Desk-scale federated simulation, training and attack experiments.

A single client holds a private set; the server averages packets; an
eavesdropper taps every packet that crosses the wire. Attack experiments
write a self-describing bundle whose contents depend only on the config, so
rerunning a config reproduces the bundle byte for byte. Wall-clock timings
go to a separate ``timings.json`` that is not part of the bundle.
"""
from __future__ import annotations

import copy
import hashlib
import itertools
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import data_io
from .attack import decode_encodings, invert
from .data_io import ConfigError, Dataset, ExperimentConfig
from .defenses import DefenseConfig, encode_batch, grad_prune
from .labels import infer_batch_labels
from .metrics import score
from .models import (GradientPacket, Model, batch_loss, build_model, client_step,
                     load_checkpoint, predict, save_checkpoint, set_running_stats)

log = logging.getLogger(__name__)

BATCH_PRESETS = (1, 16, 32)
TIMINGS_FILE = "timings.json"
MANIFEST_FILE = "manifest.json"


class NumericalError(FloatingPointError):
    pass


# ---------------------------------------------------------------- federation

@dataclass
class Client:
    images: np.ndarray
    labels: np.ndarray


@dataclass
class Eavesdropper:
    """Everything that crossed the wire, in order: (epoch, client, packet)."""
    packets: list[tuple[int, int, GradientPacket]] = field(default_factory=list)

    def record(self, epoch: int, client: int, packet: GradientPacket) -> None:
        self.packets.append((epoch, client, packet))


def aggregate(packets: list[GradientPacket]) -> dict[str, np.ndarray]:
    """Server-side mean of client gradients."""
    if not packets:
        raise ValueError("nothing to aggregate")
    names = list(packets[0].grads)
    return {n: np.mean([p.grads[n] for p in packets], axis=0) for n in names}


class FederationSim:
    """Clients compute defended gradients of their batches; the server averages them.

    ``server_lr`` = 0 keeps the model frozen across rounds. Encoding records
    stay with the simulation (``grants``) and never enter a packet; the
    harness hands them to the attacker only under the strongest-attacker grant.
    """

    def __init__(self, model: Model, clients: list[Client], defense: DefenseConfig,
                 bn_sharing: bool = False, include_labels: bool = False,
                 batch_size: int | None = None, seed: int = 0, server_lr: float = 0.0):
        self.model = model
        self.clients = clients
        self.defense = defense
        self.bn_sharing = bn_sharing
        self.include_labels = include_labels
        self.batch_size = batch_size
        self.seed = seed
        self.server_lr = server_lr
        self.tap = Eavesdropper()
        self.grants: dict[tuple[int, int], dict] = {}
        self.epoch = 0

    def _client_packets(self, ci: int, client: Client):
        rng = np.random.default_rng([self.seed, self.epoch, ci])
        x, y = client.images, client.labels
        records = None
        if self.defense.encodes:
            x, y, records = encode_batch(x, y, self.defense, self.epoch, rng,
                                         self.model.num_classes)
        b = self.batch_size or len(x)
        for start in range(0, len(x), b):
            sl = slice(start, start + b)
            pkt = client_step(self.model, x[sl], y[sl], bn_sharing=self.bn_sharing,
                              include_labels=self.include_labels, update_running=False)
            if self.defense.prune_ratio > 0:
                pkt = grad_prune(pkt, self.defense.prune_ratio, self.defense.per_layer_prune)
            grant = {"inputs": x[sl]}
            if records is not None:
                grant["records"] = records[sl]
            yield pkt, grant

    def round(self) -> dict[str, np.ndarray]:
        """One epoch: every client shares every batch; returns the last aggregated gradient."""
        agg = None
        per_step: dict[int, list] = {}
        for ci, client in enumerate(self.clients):
            for step, (pkt, grant) in enumerate(self._client_packets(ci, client)):
                self.tap.record(self.epoch, ci, pkt)
                self.grants[(self.epoch, len(self.tap.packets) - 1)] = grant
                per_step.setdefault(step, []).append(pkt)
        for step in sorted(per_step):
            agg = aggregate(per_step[step])
            if self.server_lr:
                for n, g in agg.items():
                    self.model.params[n] = self.model.params[n] - self.server_lr * g
        self.epoch += 1
        return agg


# ---------------------------------------------------------------- data

def default_data_dir() -> Path:
    return Path(os.environ.get("GRADINV_DATA", Path.home() / ".cache" / "gradinv"))


def load_dataset(dcfg: data_io.DataConfig, split: str | None = None) -> Dataset:
    split = split or dcfg.split
    if dcfg.name == "mnist-bundled":
        root = data_io.bundled_mnist(Path(dcfg.path) if dcfg.path else default_data_dir() / "mnist-bundled")
        ds = data_io.load_mnist(root, split=split)
    elif dcfg.name == "mnist":
        ds = data_io.load_mnist(dcfg.path, split=split)
    elif dcfg.name == "cifar10":
        root = Path(dcfg.path)
        files = ([root / "test_batch.bin"] if split == "test"
                 else sorted(root.glob("data_batch_*.bin"))) if root.is_dir() else [root]
        ds = data_io.load_cifar10(files)
    else:
        raise ConfigError(f"unknown dataset {dcfg.name!r}")
    if dcfg.resolution and dcfg.resolution != ds.images.shape[-1]:
        ds = Dataset(data_io.downscale(ds.images, dcfg.resolution), ds.labels, ds.num_classes,
                     dict(ds.provenance, resolution=dcfg.resolution))
    return ds


def private_subset(ds: Dataset, dcfg: data_io.DataConfig) -> Dataset:
    if dcfg.indices is not None:
        return ds.subset(dcfg.indices)
    if dcfg.n_private > len(ds):
        raise ConfigError(f"n_private={dcfg.n_private} exceeds dataset size {len(ds)}")
    rng = np.random.default_rng(dcfg.subset_seed)
    return ds.subset(np.sort(rng.choice(len(ds), dcfg.n_private, replace=False)))


def _model_for(cfg: ExperimentConfig, input_shape) -> Model:
    if cfg.model.checkpoint:
        model = load_checkpoint(cfg.model.checkpoint)
        if model.input_shape != tuple(input_shape):
            raise ConfigError(f"checkpoint expects input {model.input_shape}, data gives {tuple(input_shape)}")
        return model
    return build_model(cfg.model.arch, input_shape, 10, cfg.model.seed, cfg.model.hidden,
                       cfg.model.init)


# ---------------------------------------------------------------- training

def train(cfg: ExperimentConfig, out=None, train_set: Dataset | None = None,
          test_set: Dataset | None = None) -> tuple[Model, list[dict]]:
    """SGD with momentum and step decay; logs test accuracy after every epoch.

    Writes ``model.ckpt`` and ``accuracy.csv`` under ``out`` when given.
    """
    tc = cfg.train
    if train_set is None:
        train_set = load_dataset(cfg.data, "train")
    if test_set is None:
        test_set = load_dataset(cfg.data, "test")
    if tc.test_size:
        test_set = test_set.subset(np.arange(min(tc.test_size, len(test_set))))
    model = _model_for(cfg, train_set.images.shape[1:])
    rng = np.random.default_rng(cfg.seed)
    velocity = {n: np.zeros_like(p) for n, p in model.params.items()}
    rows = []
    for epoch in range(tc.epochs):
        lr = tc.lr * tc.lr_gamma ** (epoch // tc.lr_step_epochs)
        order = rng.permutation(len(train_set))
        losses = []
        for start in range(0, len(order), tc.batch_size):
            idx = order[start:start + tc.batch_size]
            x, y = train_set.images[idx], train_set.labels[idx]
            pkt = client_step(model, x, y)
            for n, g in pkt.grads.items():
                if not np.all(np.isfinite(g)):
                    raise NumericalError(f"non-finite gradient for {n} at epoch {epoch}, step {start // tc.batch_size}")
                velocity[n] = tc.momentum * velocity[n] + g
                model.params[n] = model.params[n] - lr * velocity[n]
            if start == 0 or start + tc.batch_size >= len(order):
                loss = batch_loss(model, x, y)
                if not np.isfinite(loss):
                    raise NumericalError(f"non-finite training loss at epoch {epoch} (lr={lr})")
                losses.append(loss)
        acc = float(np.mean(predict(model, test_set.images).argmax(axis=1) == test_set.labels))
        rows.append({"epoch": epoch + 1, "lr": lr, "train_loss": float(np.mean(losses)),
                     "test_accuracy": acc})
        log.info("epoch %d  loss %.4f  acc %.4f", epoch + 1, rows[-1]["train_loss"], acc)
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, out / "model.ckpt")
        files = [out / "model.ckpt",
                 data_io.write_csv(out / "accuracy.csv", rows,
                                   ["epoch", "lr", "train_loss", "test_accuracy"]),
                 _write_text(out / "config.json", data_io.dump_config(cfg))]
        write_manifest(out, cfg, files)
    return model, rows


# ---------------------------------------------------------------- attack experiment

def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_text(path: Path, text: str) -> Path:
    path.write_text(text)
    return path


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _input_hash(cfg: ExperimentConfig, private: Dataset) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(private.provenance, sort_keys=True, default=str).encode())
    h.update(private.images.tobytes())
    if cfg.model.checkpoint:
        h.update(_sha(Path(cfg.model.checkpoint)).encode())
    return h.hexdigest()


def write_manifest(out, cfg: ExperimentConfig, files, **extra) -> Path:
    """Record the config hash, seeds and a sha256 per bundle file.

    Wall-clock timings live in a separate file so that repeated runs produce
    byte-identical manifests.
    """
    out = Path(out)
    manifest = {
        "config_hash": data_io.config_hash(cfg),
        "seeds": {"run": cfg.seed, "model": cfg.model.seed, "attack": cfg.attack.seed,
                  "subset": cfg.data.subset_seed},
        "files": {Path(f).name: _sha(Path(f)) for f in files},
        **extra,
    }
    return _write_json(out / MANIFEST_FILE, manifest)


@dataclass
class ExperimentResult:
    out: Path
    report: dict
    reconstruction: np.ndarray
    private: np.ndarray
    metrics: object


def run_attack_experiment(cfg: ExperimentConfig, out=None, model: Model | None = None,
                          private: Dataset | None = None) -> ExperimentResult:
    """Simulate sharing, invert every tapped packet, decode encodings, score and persist."""
    out = Path(out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    timings = {}
    t0 = time.perf_counter()
    try:
        if private is None:
            private = private_subset(load_dataset(cfg.data), cfg.data)
        if model is None:
            model = _model_for(cfg, private.images.shape[1:])
            if model.has_batchnorm and not cfg.model.checkpoint:
                # released aggregate statistics of the client's data
                set_running_stats(model, private.images)
        timings["setup"] = time.perf_counter() - t0
        return _attack(cfg, out, model, private, timings)
    except Exception as exc:
        _write_json(out / "FAILED.json", {"error": type(exc).__name__, "message": str(exc)})
        raise


def _attack(cfg, out, model, private, timings):
    acfg = cfg.attack
    defense = cfg.defense
    t = time.perf_counter()
    sim = FederationSim(model, [Client(private.images, private.labels)], defense,
                        bn_sharing=cfg.threat.bn_sharing,
                        include_labels=acfg.labels == "granted",
                        batch_size=cfg.batch_size, seed=cfg.seed)
    epochs = acfg.epochs if defense.encodes else 1
    for _ in range(epochs):
        sim.round()
    timings["eavesdrop"] = time.perf_counter() - t

    t = time.perf_counter()
    packets_out, recon, loss_files = [], [], []
    for k, (epoch, _, pkt) in enumerate(sim.tap.packets):
        grant = sim.grants[(epoch, k)]
        rep = invert(pkt, model, acfg, x_true=grant["inputs"])
        summary = rep.summary()
        summary.pop("config")
        summary.update(epoch=epoch, packet=k)
        packets_out.append(summary)
        name = f"loss_e{epoch:03d}_p{k:03d}.csv"
        data_io.write_loss_csv(out / name, rep.trajectory)
        loss_files.append(name)
        recon.append(rep.x_hat[np.asarray(rep.permutation)])
    timings["invert"] = time.perf_counter() - t

    t = time.perf_counter()
    recovered = np.concatenate(recon)
    report = {"defense": defense.name, "batch_size": cfg.batch_size, "epochs": epochs,
              "packets": packets_out}
    if defense.encodes:
        records = [r for k in range(len(sim.tap.packets))
                   for r in sim.grants[(sim.tap.packets[k][0], k)]["records"]]
        dec = decode_encodings(recovered, records, len(private),
                               use_signs=cfg.threat.grant_signs)
        x_hat = np.clip(dec.images, 0.0, 1.0)
        report["decode"] = {"underdetermined": dec.underdetermined, "missing": dec.missing,
                            "rank": dec.rank}
        metrics = score(x_hat, private.images)
    else:
        x_hat = recovered
        metrics = score(x_hat, private.images)
    report["metrics"] = metrics.to_dict()
    report["median"] = {"mse": float(np.median(metrics.mse)),
                        "psnr": _finite(np.median(metrics.psnr)),
                        "ssim": float(np.median(metrics.ssim))}
    timings["score"] = time.perf_counter() - t

    files = {
        "config.json": _write_text(out / "config.json", data_io.dump_config(cfg)),
        "report.json": _write_json(out / "report.json", report),
        "metrics.csv": data_io.write_csv(out / "metrics.csv", metrics.rows(),
                                         ["image", "matched", "mse", "psnr", "ssim"]),
        "reconstruction.pgm": _grid(x_hat, out / "reconstruction"),
        "private.pgm": _grid(private.images, out / "private"),
    }
    np.save(out / "reconstruction.npy", x_hat)
    files["reconstruction.npy"] = out / "reconstruction.npy"
    for name in loss_files:
        files[name] = out / name
    write_manifest(out, cfg, files.values(), input_hash=_input_hash(cfg, private))
    _write_json(out / TIMINGS_FILE, timings)
    failed = out / "FAILED.json"
    if failed.exists():
        failed.unlink()
    return ExperimentResult(out, report, x_hat, private.images, metrics)


def _finite(v):
    return "inf" if v == float("inf") else float(v)


def _grid(images, stem: Path) -> Path:
    ext = ".pgm" if images.shape[1] == 1 else ".ppm"
    return data_io.save_image_grid(np.clip(images, 0.0, 1.0), stem.with_suffix(ext))


# ---------------------------------------------------------------- sweeps

def _set_path(d: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    for k in keys[:-1]:
        if k not in d or not isinstance(d[k], dict):
            raise ConfigError(f"unknown config path {dotted!r}")
        d = d[k]
    if keys[-1] not in d:
        raise ConfigError(f"unknown config path {dotted!r}")
    d[keys[-1]] = value


def expand_grid(base: ExperimentConfig, grid: dict[str, list]) -> list[tuple[dict, ExperimentConfig]]:
    """One config per cell of the product of the grid axes."""
    for axis, values in grid.items():
        if not isinstance(values, (list, tuple)) or not values:
            raise ConfigError(f"grid axis {axis!r} must be a non-empty list")
    axes = list(grid)
    cells = []
    for combo in itertools.product(*(grid[a] for a in axes)):
        d = data_io.config_to_dict(base)
        for a, v in zip(axes, combo):
            _set_path(d, a, v)
        cells.append((dict(zip(axes, combo)), data_io.config_from_dict(d)))
    return cells


def _run_cell(args):
    i, cfg, out = args
    res = run_attack_experiment(cfg, out)
    return i, res.report["median"]


def sweep(base: ExperimentConfig, grid: dict[str, list], out, workers: int = 1) -> dict:
    """Run every grid cell in its own directory and tabulate medians.

    ``best`` maps each defense to the cell with the lowest median MSE.
    """
    out = Path(out)
    cells = expand_grid(base, grid)
    jobs = [(i, cfg, out / f"cell_{i:03d}") for i, (_, cfg) in enumerate(cells)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = dict(ex.map(_run_cell, jobs))
    else:
        results = dict(map(_run_cell, jobs))
    rows = []
    for i, (axes, cfg) in enumerate(cells):
        med = results[i]
        rows.append({"cell": i, **{k: json.dumps(v) for k, v in axes.items()},
                     "defense": cfg.defense.name, "alpha_tv": cfg.attack.alpha_tv,
                     "median_mse": med["mse"], "median_psnr": med["psnr"],
                     "median_ssim": med["ssim"]})
    best = {}
    for row in rows:
        cur = best.get(row["defense"])
        if cur is None or row["median_mse"] < cur["median_mse"]:
            best[row["defense"]] = row
    table = {"rows": rows, "best": {d: {"cell": r["cell"], "alpha_tv": r["alpha_tv"],
                                        "median_mse": r["median_mse"]} for d, r in best.items()}}
    out.mkdir(parents=True, exist_ok=True)
    files = [data_io.write_csv(out / "sweep.csv", rows), _write_json(out / "sweep.json", table),
             _write_text(out / "config.json", data_io.dump_config(base))]
    write_manifest(out, base, files, grid=grid,
                   cells={f"cell_{i:03d}": _sha(out / f"cell_{i:03d}" / MANIFEST_FILE)
                          for i in range(len(cells))})
    return table


def report(run_dirs) -> list[dict]:
    """One summary row per finished run directory (failed runs are marked)."""
    rows = []
    for d in map(Path, run_dirs):
        if (d / "FAILED.json").exists():
            err = json.loads((d / "FAILED.json").read_text())
            rows.append({"run": str(d), "defense": "", "batch_size": "", "median_mse": "",
                         "median_psnr": "", "median_ssim": "", "status": f"failed: {err['error']}"})
            continue
        rep = json.loads((d / "report.json").read_text())
        rows.append({"run": str(d), "defense": rep["defense"], "batch_size": rep["batch_size"],
                     "median_mse": rep["median"]["mse"], "median_psnr": rep["median"]["psnr"],
                     "median_ssim": rep["median"]["ssim"], "status": "ok"})
    return rows


# ---------------------------------------------------------------- label trials

def label_inference_trials(model: Model, images: np.ndarray, labels: np.ndarray,
                           batch_sizes=range(1, 11), trials: int = 100, seed: int = 0,
                           distinct: bool = True) -> list[dict]:
    """Draw batches (all-distinct labels by default) and check the recovered label set."""
    rng = np.random.default_rng(seed)
    by_class = {c: np.flatnonzero(labels == c) for c in range(model.num_classes)}
    sizes = list(batch_sizes)
    out = []
    for trial in range(trials):
        b = sizes[trial % len(sizes)]
        if distinct:
            classes = rng.choice(model.num_classes, b, replace=False)
        else:
            classes = rng.integers(0, model.num_classes, b)
        idx = np.array([rng.choice(by_class[c]) for c in classes])
        pkt = client_step(model, images[idx], labels[idx], update_running=False)
        guess = infer_batch_labels(pkt, model)
        out.append({"trial": trial, "batch_size": b, "true": sorted(set(classes.tolist())),
                    "found": guess.labels, "exact": guess.labels == sorted(set(classes.tolist())),
                    "multiplicity_known": guess.multiplicity_known,
                    "duplicates": len(set(classes.tolist())) < b})
    return out


def with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    """Same config with every seed set to ``seed``."""
    cfg = copy.deepcopy(cfg)
    cfg.seed = seed
    cfg.model = replace(cfg.model, seed=seed)
    cfg.attack = replace(cfg.attack, seed=seed)
    return cfg
