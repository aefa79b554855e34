"""Command-line entry point: ``gradinv <subcommand> [options]``.

Every config field is settable as ``--section.field VALUE`` (JSON-parsed,
falling back to a plain string); ``--config FILE`` supplies the base.
Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import typing
from pathlib import Path

import numpy as np

from . import cost, data_io, harness, theory
from .data_io import ConfigError, ExperimentConfig

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _field_paths(cls, prefix=""):
    hints = typing.get_type_hints(cls)
    for f in dataclasses.fields(cls):
        if not prefix and f.name in ("version", "seed", "output_dir"):
            continue  # covered by --seed and --out
        if dataclasses.is_dataclass(hints[f.name]):
            yield from _field_paths(hints[f.name], f"{prefix}{f.name}.")
        else:
            yield prefix + f.name


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON experiment config")
    p.add_argument("--seed", type=int, help="sets the run, model and attack seeds")
    p.add_argument("--out", type=Path, help="output directory")
    group = p.add_argument_group("config fields")
    for path in _field_paths(ExperimentConfig):
        group.add_argument(f"--{path}", dest=f"cfg:{path}", metavar="V", default=None)


def build_config(args) -> ExperimentConfig:
    cfg = data_io.load_config(args.config) if args.config else ExperimentConfig()
    d = data_io.config_to_dict(cfg)
    for key, val in vars(args).items():
        if key.startswith("cfg:") and val is not None:
            harness._set_path(d, key[4:], _parse_value(val))
    cfg = data_io.config_from_dict(d)
    if args.seed is not None:
        cfg = harness.with_seed(cfg, args.seed)
    if args.out is not None:
        cfg.output_dir = str(args.out)
    return cfg


# ---------------------------------------------------------------- commands

def cmd_train(args) -> int:
    cfg = build_config(args)
    _, rows = harness.train(cfg, cfg.output_dir)
    for r in rows:
        print(f"epoch {r['epoch']}: loss {r['train_loss']:.4f}  test accuracy {r['test_accuracy']:.4f}")
    print(f"checkpoint: {Path(cfg.output_dir) / 'model.ckpt'}")
    return EXIT_OK


def cmd_attack(args) -> int:
    cfg = build_config(args)
    res = harness.run_attack_experiment(cfg)
    med = res.report["median"]
    print(f"{res.report['defense']}: median MSE {med['mse']:.6g}  PSNR {med['psnr']}  SSIM {med['ssim']:.4f}")
    print(f"bundle: {res.out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = build_config(args)
    grid = json.loads(args.grid.read_text()) if args.grid.exists() else json.loads(str(args.grid))
    table = harness.sweep(cfg, grid, cfg.output_dir, workers=args.workers)
    for d, b in table["best"].items():
        print(f"{d}: best alpha_tv {b['alpha_tv']} (median MSE {b['median_mse']:.6g}, cell {b['cell']})")
    return EXIT_OK


def cmd_label_infer(args) -> int:
    cfg = build_config(args)
    ds = harness.load_dataset(cfg.data)
    model = harness._model_for(cfg, ds.images.shape[1:])
    sizes = [int(s) for s in args.batch_sizes.split(",")]
    rows = harness.label_inference_trials(model, ds.images, ds.labels, sizes, args.trials,
                                          cfg.seed, distinct=not args.allow_duplicates)
    exact = sum(r["exact"] for r in rows)
    flagged = [r for r in rows if r["duplicates"]]
    print(f"exact label sets: {exact}/{len(rows)}")
    if flagged:
        print(f"duplicate batches flagged multiplicity-unknown: "
              f"{sum(not r['multiplicity_known'] for r in flagged)}/{len(flagged)}")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = [out / "labels.json", out / "config.json"]
    files[0].write_text(json.dumps(rows, indent=2) + "\n")
    files[1].write_text(data_io.dump_config(cfg))
    harness.write_manifest(out, cfg, files, trials=args.trials, batch_sizes=sizes,
                           allow_duplicates=args.allow_duplicates)
    return EXIT_OK


def cmd_estimate_cost(args) -> int:
    kw = {k: getattr(args, k) for k in ("T", "b", "t", "n") if getattr(args, k) is not None}
    sizes = args.N if args.N else cost.TABLE_SIZES
    print(cost.format_table(cost.cost_table(sizes, **kw), args.format), end="")
    return EXIT_OK


def cmd_verify_lemma(args) -> int:
    rows = theory.lemma_table(args.depths, range(args.seeds))
    span = max(r["span_residual"] for r in rows)
    form = max(r["form_deviation"] for r in rows)
    print(f"{len(rows)} networks: max span residual {span:.3e}, max formula deviation {form:.3e}")
    if span >= 1e-8 or form >= 1e-10:
        print("lemma check FAILED", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_report(args) -> int:
    rows = harness.report(args.runs)
    if args.csv:
        data_io.write_csv(args.csv, rows)
    for r in rows:
        print(f"{r['run']}: {r['defense']} b={r['batch_size']} median MSE {r['median_mse']} "
              f"PSNR {r['median_psnr']} SSIM {r['median_ssim']} [{r['status']}]")
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gradinv", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and log test accuracy")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="simulate sharing, invert, decode and score")
    _add_config_flags(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("sweep", help="run a grid of attack experiments")
    _add_config_flags(p)
    p.add_argument("--grid", type=Path, required=True,
                   help='JSON file or literal, e.g. {"attack.alpha_tv": [0, 0.01]}')
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("label-infer", help="label recovery trials from final-layer gradients")
    _add_config_flags(p)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--batch-sizes", default="1,2,3,4,5,6,7,8,9,10")
    p.add_argument("--allow-duplicates", action="store_true")
    p.set_defaults(func=cmd_label_infer)

    p = sub.add_parser("estimate-cost", help="GPU-hour cost table")
    p.add_argument("--N", type=int, nargs="+", help="private set sizes")
    p.add_argument("--T", type=float)
    p.add_argument("--b", type=float)
    p.add_argument("--t", type=float)
    p.add_argument("--n", type=float)
    p.add_argument("--format", choices=("text", "csv"), default="text")
    p.set_defaults(func=cmd_estimate_cost)

    p = sub.add_parser("verify-lemma", help="first-layer span and explicit-gradient checks")
    p.add_argument("--depths", type=int, nargs="+", default=[1, 2, 3])
    p.add_argument("--seeds", type=int, default=20)
    p.set_defaults(func=cmd_verify_lemma)

    p = sub.add_parser("report", help="summarise finished run directories")
    p.add_argument("runs", nargs="+", type=Path)
    p.add_argument("--csv", type=Path)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    np.seterr(over="ignore", under="ignore")
    try:
        return args.func(args)
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
