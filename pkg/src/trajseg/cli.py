"""Command line entry point: ingest, synth, train, eval, infer, ablate.

Every command reads the same flat key set (see config.py); values layer
as defaults, then an optional `--config` file, then explicit flags.
Outputs are byte-identical across runs with identical inputs and seeds.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import (
    FIXED_KEYS,
    KEY_DOCS,
    ConfigError,
    RunConfig,
    coerce_value,
    make_config,
    model_spec_from,
    parse_config_file,
    synth_config_from,
    train_config_from,
)
from .geolife import ingest_geolife, parse_plt
from .metrics import evaluate_model, render_report, report_to_json
from .models import Model, predict_batch
from .trips import (
    Mode,
    Trip,
    enforce_length,
    load_dataset,
    pad_batch,
    save_dataset,
    split_dataset,
)

_SWEEPS: dict[str, tuple[str, list[int | float]]] = {
    "n_cp": ("n_cp", [1, 2, 3, 4]),
    "lam_loc": ("lam_loc", [200.0, 300.0, 400.0, 500.0]),
    "l_uni": ("l_uni", [8, 16, 24, 32]),
    "head_kernel": ("head_kernel", [1, 3, 5, 7]),
}


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="FILE", help="key = value settings file")
    defaults = RunConfig()
    group = parser.add_argument_group("run settings")
    for key, doc in KEY_DOCS.items():
        default = getattr(defaults, key)
        note = " (fixed)" if key in FIXED_KEYS else ""
        group.add_argument(
            f"--{key.replace('_', '-')}",
            dest=f"cfg_{key}",
            metavar=type(default).__name__.upper(),
            help=f"{doc}{note} [default: {default}]",
        )


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    file_values = None
    if args.config:
        file_values = parse_config_file(Path(args.config).read_text(encoding="utf-8"))
    overrides = {}
    for key in KEY_DOCS:
        raw = getattr(args, f"cfg_{key}", None)
        if raw is not None:
            overrides[key] = coerce_value(key, raw)
    return make_config(file_values, overrides)


def _load_trips(path: str) -> list[Trip]:
    with open(path, "r", encoding="utf-8") as fp:
        return load_dataset(fp)


def _write_dataset(trips: list[Trip], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fp:
        save_dataset(trips, fp)


def cmd_ingest(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    del config  # ingest has no tunables beyond the fixed preprocessing
    trips = ingest_geolife(args.geolife)
    if not trips:
        raise ConfigError(f"no labeled trips found under {args.geolife}")
    _write_dataset(trips, args.out)
    n_points = sum(t.length for t in trips)
    n_cps = sum(len(t.cp_indices) for t in trips)
    print(f"wrote {len(trips)} trips ({n_points} points, {n_cps} change points) to {args.out}")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    from .synth import generate_trips

    trips = generate_trips(synth_config_from(config), config.n_trips)
    _write_dataset(trips, args.out)
    n_points = sum(t.length for t in trips)
    print(f"wrote {len(trips)} synthetic trips ({n_points} points) to {args.out}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    from .train import train

    config = _config_from_args(args)
    trips = _load_trips(args.data)
    split = split_dataset(trips, seed=config.seed)
    if not split.train or not split.val:
        raise ConfigError(
            f"dataset too small to split: {len(trips)} trips "
            f"-> {len(split.train)} train / {len(split.val)} val"
        )
    model = Model(model_spec_from(config), seed=config.seed)
    history_path = args.history or args.out + ".history.jsonl"
    with open(history_path, "w", encoding="utf-8", newline="\n") as fp:
        result = train(model, split, train_config_from(config), history_fp=fp)
    with open(args.out, "wb") as fp:
        model.save(fp)
    print(
        f"trained {config.framework}/{config.backbone} for "
        f"{len(result.history)} epochs; best val loss "
        f"{result.best_val_loss:.6f} at epoch {result.best_epoch}"
    )
    print(f"checkpoint: {args.out}")
    print(f"history: {history_path}")
    return 0


def _load_model(path: str) -> Model:
    with open(path, "rb") as fp:
        return Model.load(fp)


def cmd_eval(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    trips = _load_trips(args.data)
    split = split_dataset(trips, seed=config.seed)
    subset = {"train": split.train, "val": split.val, "test": split.test}[args.split]
    if not subset:
        raise ConfigError(f"{args.split} split is empty for this dataset")
    model = _load_model(args.ckpt)
    report = evaluate_model(
        model,
        subset,
        radius_m=config.cp_radius_m,
        utw_window_seconds=config.utw_window_s,
        chunk=config.batch_size,
    )
    sys.stdout.write(render_report(report))
    if args.report:
        with open(args.report, "w", encoding="utf-8", newline="\n") as fp:
            fp.write(report_to_json(report))
        print(f"report: {args.report}")
    return 0


def _trips_for_inference(path: str) -> list[Trip]:
    if path.endswith(".plt"):
        from .geo import remove_outliers

        points = remove_outliers(parse_plt(Path(path).read_text(encoding="utf-8")))
        # unlabeled input: run the same cleaning with a placeholder class
        return enforce_length(points, np.zeros(len(points), dtype=np.int64))
    return _load_trips(path)


def cmd_infer(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    trips = _trips_for_inference(args.input)
    if not trips:
        raise ConfigError(f"no usable trips in {args.input}")
    model = _load_model(args.ckpt)
    batch = pad_batch(trips, n_max=model.spec.n_max)
    preds = predict_batch(model, batch.features, batch.lengths, chunk=config.batch_size)
    prob_cols = ",".join(f"p_{Mode(c).name.lower()}" for c in range(model.spec.n_classes))
    lines = [f"index,lat,lng,t,mode,{prob_cols}"]
    row = 0
    for trip, pred in zip(trips, preds):
        for i in range(trip.length):
            p = trip.points[i]
            probs = ",".join(f"{v:.6f}" for v in pred.pointwise_probs[i])
            mode = Mode(int(pred.pointwise_labels[i])).name.lower()
            lines.append(f"{row},{p.lat:.6f},{p.lng:.6f},{p.t:.3f},{mode},{probs}")
            row += 1
    with open(args.out, "w", encoding="utf-8", newline="\n") as fp:
        fp.write("\n".join(lines) + "\n")
    print(f"wrote {row} point predictions for {len(trips)} trips to {args.out}")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    from .train import train

    config = _config_from_args(args)
    key, values = _SWEEPS[args.sweep]
    if args.sweep == "n_cp" and config.framework != "trajyolo":
        raise ConfigError("the n_cp sweep needs framework=trajyolo")
    if args.sweep in ("l_uni", "head_kernel") and config.framework != "trajssd":
        raise ConfigError(f"the {args.sweep} sweep needs framework=trajssd")
    trips = _load_trips(args.data)
    split = split_dataset(trips, seed=config.seed)
    if not split.train or not split.val or not split.test:
        raise ConfigError("dataset too small to split for ablation")

    rows = []
    for value in values:
        fields = {key: value}
        if key == "l_uni":
            fields["first_pool"] = int(value) // 8
        variant = dataclasses.replace(config, **fields)
        model = Model(model_spec_from(variant), seed=variant.seed)
        train(model, split, train_config_from(variant))
        report = evaluate_model(
            model, split.test,
            radius_m=variant.cp_radius_m,
            utw_window_seconds=variant.utw_window_s,
            chunk=variant.batch_size,
        )
        rows.append(
            (value, report.cp.recall, report.cp.precision,
             report.pointwise.accuracy, report.pointwise.weighted_f1)
        )

    lines = [f"{args.sweep:>12} {'cp_recall':>10} {'cp_prec':>10} {'accuracy':>10} {'w_f1':>10}"]
    for value, cp_r, cp_p, acc, wf1 in rows:
        lines.append(f"{value:>12} {cp_r:>10.3f} {cp_p:>10.3f} {acc:>10.3f} {wf1:>10.3f}")
    table = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fp:
            fp.write(table)
        print(f"table: {args.out}")
    else:
        sys.stdout.write(table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trajseg",
        description="Transportation mode segmentation of GPS trajectories.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="convert a GeoLife directory to a dataset file")
    p.add_argument("--geolife", required=True, metavar="DIR", help="GeoLife root or Data directory")
    p.add_argument("--out", required=True, metavar="FILE", help="dataset file to write")
    _add_config_flags(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="generate a seeded synthetic dataset")
    p.add_argument("--out", required=True, metavar="FILE", help="dataset file to write")
    _add_config_flags(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a dataset file")
    p.add_argument("--data", required=True, metavar="FILE", help="dataset file")
    p.add_argument("--out", required=True, metavar="FILE", help="checkpoint to write")
    p.add_argument("--history", metavar="FILE", help="history JSONL [default: OUT.history.jsonl]")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    p.add_argument("--data", required=True, metavar="FILE", help="dataset file")
    p.add_argument("--ckpt", required=True, metavar="FILE", help="checkpoint to load")
    p.add_argument("--split", choices=("train", "val", "test"), default="test",
                   help="which split to score [default: test]")
    p.add_argument("--report", metavar="FILE", help="also write a JSON report here")
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="predict modes for a .plt file or dataset")
    p.add_argument("--input", required=True, metavar="FILE", help=".plt track or dataset file")
    p.add_argument("--ckpt", required=True, metavar="FILE", help="checkpoint to load")
    p.add_argument("--out", required=True, metavar="FILE", help="CSV file to write")
    _add_config_flags(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("ablate", help="sweep one setting, training once per value")
    p.add_argument("--data", required=True, metavar="FILE", help="dataset file")
    p.add_argument("--sweep", required=True, choices=sorted(_SWEEPS),
                   help="which setting to sweep")
    p.add_argument("--out", metavar="FILE", help="write the table here instead of stdout")
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
