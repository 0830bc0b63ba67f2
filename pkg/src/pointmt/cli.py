"""Command-line entry point.

Subcommands: ``synth`` (generate a dataset), ``train``, ``eval``, ``bench``,
``analyze kl|attn|features``, ``compare-branches``, ``gradcheck``. Every run
prints its fully resolved configuration and seed first, so any output can be
reproduced from its log header. Exit status: 0 success, 1 user error, 2
internal invariant breach.

Settings come from defaults, then an optional ``key = value`` config file with
section prefixes (``model.channels = 32,64,128``), then command-line flags.
Unknown config keys are rejected before any work starts.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np


class UsageError(ValueError):
    pass


_MODEL_KEYS = {
    "model.stages": int,
    "model.ratios": "int_list",
    "model.neighborhood_sizes": "int_list",
    "model.channels": "int_list",
    "model.blocks_per_stage": int,
    "model.head": str,
    "model.branch_mode": str,
    "model.mlp_hidden_mult": int,
    "model.head_hidden": "int_list",
    "model.head_pool": str,
    "model.ta_epsilon": float,
}
_TRAIN_KEYS = {
    "train.epochs": int,
    "train.cycle_length": int,
    "train.lr_max": float,
    "train.lr_min": float,
    "train.batch_size": int,
    "train.optimizer": str,
    "train.momentum": float,
    "train.augment_rotate": "bool",
    "train.augment_jitter": float,
}
_SYNTH_KEYS = {
    "synth.classes": "str_list",
    "synth.samples_per_class": int,
    "synth.test_samples_per_class": int,
    "synth.points_per_cloud": int,
    "synth.noise_sigma": float,
}
KNOWN_KEYS = {**_MODEL_KEYS, **_TRAIN_KEYS, **_SYNTH_KEYS}


def _parse_value(key, kind, raw):
    raw = raw.strip()
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            return raw
        if kind == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind == "int_list":
            return tuple(int(t) for t in raw.split(","))
        if kind == "str_list":
            return tuple(t.strip() for t in raw.split(","))
    except ValueError as err:
        raise UsageError(f"config key {key}: cannot parse {raw!r}") from err
    raise UsageError(f"unhandled kind for {key}")


def parse_config_file(path) -> dict:
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key = value")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in KNOWN_KEYS:
                raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = _parse_value(key, KNOWN_KEYS[key], raw)
    return values


def _section(values: dict, prefix: str) -> dict:
    return {k.split(".", 1)[1]: v for k, v in values.items() if k.startswith(prefix + ".")}


def _resolve(args) -> dict:
    from .dataio import SynthConfig
    from .model import ModelConfig
    from .training import TrainConfig

    file_values = parse_config_file(args.config) if args.config else {}
    model_kwargs = _section(file_values, "model")
    train_kwargs = _section(file_values, "train")
    synth_kwargs = _section(file_values, "synth")
    test_per_class = synth_kwargs.pop("test_samples_per_class", 16)

    for name in ("epochs", "cycle_length", "lr_max", "lr_min", "batch_size"):
        value = getattr(args, name, None)
        if value is not None:
            train_kwargs[name] = value
    for name in ("head", "branch_mode"):
        value = getattr(args, name, None)
        if value is not None:
            model_kwargs[name] = value

    try:
        model = ModelConfig(**model_kwargs)
        train = TrainConfig(seed=args.seed, **train_kwargs)
        synth = SynthConfig(seed=args.seed, **synth_kwargs)
    except (TypeError, ValueError) as err:
        raise UsageError(str(err)) from err
    dtype = np.float64 if args.precision == "f64" else np.float32
    return {"model": model, "train": train, "synth": synth,
            "test_per_class": test_per_class, "dtype": dtype}


def _log_config(args, resolved):
    print(f"resolved: seed = {args.seed}")
    print(f"resolved: precision = {args.precision}")
    print(f"resolved: threads = {args.threads}")
    for section in ("model", "train", "synth"):
        cfg = resolved[section]
        for field_name in cfg.__dataclass_fields__:
            print(f"resolved: {section}.{field_name} = {getattr(cfg, field_name)}")


def _out_dir(args) -> str:
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _load_split(path, split):
    from .dataio import load_dataset

    if not os.path.exists(path):
        raise UsageError(f"dataset file not found: {path}")
    return load_dataset(path, split=split)


# subcommands -------------------------------------------------------------


def _cmd_synth(args, resolved):
    from .dataio import generate_synthetic, save_dataset

    out = _out_dir(args)
    synth = resolved["synth"]
    train = generate_synthetic(synth, split="train")
    test_cfg = replace(synth, samples_per_class=resolved["test_per_class"], seed=synth.seed + 1)
    test = generate_synthetic(test_cfg, split="test")
    train_path = os.path.join(out, "train.pmtc")
    test_path = os.path.join(out, "test.pmtc")
    save_dataset(train, train_path)
    save_dataset(test, test_path)
    print(f"wrote {train_path} ({len(train)} samples) and {test_path} ({len(test)} samples)")
    return 0


def _build_model(resolved, num_classes, seed):
    from .model import PointMTClassifier

    return PointMTClassifier(resolved["model"], num_classes, seed=seed, dtype=resolved["dtype"])


def _cmd_train(args, resolved):
    from .checkpoint import save_checkpoint
    from .training import fit, write_metrics_header

    out = _out_dir(args)
    train_set = _load_split(args.train_data, "train")
    test_set = _load_split(args.test_data, "test")
    model = _build_model(resolved, len(train_set.class_names), args.seed)
    metrics_path = os.path.join(out, "metrics.csv")
    stem = os.path.join(out, "model")
    if resolved["train"].epochs == 0:
        write_metrics_header(metrics_path)
        save_checkpoint(model.parameters(), f"{stem}_final.ckpt")
        print(f"wrote initial checkpoint {stem}_final.ckpt and empty {metrics_path}")
        return 0
    records = fit(model, train_set, test_set, resolved["train"],
                  metrics_path=metrics_path, checkpoint_stem=stem)
    last = records[-1]
    print(f"final epoch {last.epoch}: train_loss {last.train_loss:.4f} "
          f"train_acc {last.train_acc:.4f} test_acc {last.test_acc:.4f}")
    print(f"wrote {metrics_path} and {stem}_final.ckpt")
    return 0


def _cmd_eval(args, resolved):
    from .checkpoint import load_into
    from .training import evaluate

    test_set = _load_split(args.test_data, "test")
    model = _build_model(resolved, len(test_set.class_names), args.seed)
    load_into(model.parameters(), args.checkpoint)
    oa, macc = evaluate(model, test_set)
    print(f"OA {oa:.6f} mAcc {macc:.6f}")
    return 0


def _cmd_bench(args, resolved):
    from .analysis import complexity_bench, fit_scaling_exponent

    out = _out_dir(args)
    path = os.path.join(out, "bench.csv")
    rows = complexity_bench(args.n_list, args.k_list, args.c,
                            repeats=args.repeats, seed=args.seed, csv_path=path)
    for mode in ("linear", "quadratic"):
        times = [r.median_ms for r in rows if r.mode == mode]
        ks = [r.k for r in rows if r.mode == mode]
        if len(set(ks)) > 1:
            print(f"{mode}: time-vs-k exponent {fit_scaling_exponent(ks, times):.3f}")
    print(f"wrote {path}")
    return 0


def _cmd_analyze(args, resolved):
    from .analysis import export_features, spf_statistics, write_attention_trace_csv, write_kl_csv
    from .checkpoint import load_into

    out = _out_dir(args)
    dataset = _load_split(args.test_data, "test")
    model = _build_model(resolved, len(dataset.class_names), args.seed)
    load_into(model.parameters(), args.checkpoint)
    if args.what == "kl":
        records, aggregates = spf_statistics(model, dataset)
        path = os.path.join(out, "kl_stats.csv")
        write_kl_csv(records, path)
        print(f"mean KL {aggregates['mean_kl']:.6f} "
              f"mean correct-point fraction {aggregates['mean_correct_point_fraction']:.6f}")
        print("histogram counts: " + ",".join(str(int(c)) for c in aggregates["histogram_counts"]))
        print(f"wrote {path}")
        return 0
    if args.what == "attn":
        sample = dataset.samples[args.sample]
        stage = args.stage if args.stage is not None else model.config.stages - 1
        _, _, _, stage_traces = model.encode(sample.coords, collect_traces=True)
        traces = stage_traces[stage]
        if traces is None:
            raise UsageError("the selected stage ran no attention branch")
        points = args.points if args.points else [0]
        for p in points:
            if not 0 <= p < len(traces):
                raise UsageError(f"point {p} out of range for stage with {len(traces)} points")
            path = os.path.join(out, f"attn_trace_{p}.csv")
            write_attention_trace_csv(traces[p], path)
            print(f"wrote {path} ({traces[p].w.shape[0]} neighbors x {traces[p].w.shape[1]} channels)")
        return 0
    if args.what == "features":
        paths = export_features(model, dataset, out)
        print(f"wrote {paths['features']} and {paths['point_logits']}")
        return 0
    raise UsageError(f"unknown analyze target {args.what!r}")


def _cmd_compare_branches(args, resolved):
    import csv as _csv

    from .analysis import convergence_compare
    from .training import METRICS_HEADER

    out = _out_dir(args)
    train_set = _load_split(args.train_data, "train")
    test_set = _load_split(args.test_data, "test")
    curves = convergence_compare(train_set, test_set, resolved["model"],
                                 ("mlp_only", "attn_only", "hybrid"), resolved["train"],
                                 dtype=resolved["dtype"])
    for mode, records in curves.items():
        path = os.path.join(out, f"metrics_{mode}.csv")
        with open(path, "w", newline="") as fh:
            w = _csv.writer(fh)
            w.writerow(METRICS_HEADER)
            for r in records:
                w.writerow(r.csv_row())
        last = records[-1]
        print(f"{mode}: final test_acc {last.test_acc:.4f} train_loss {last.train_loss:.4f}")
    return 0


def _cmd_gradcheck(args, resolved):
    from .verification import run_gradient_suite

    results = run_gradient_suite(full=not args.quick)
    worst = 0.0
    for name, err in results:
        print(f"gradcheck {name}: max relative error {err:.3e}")
        worst = max(worst, err)
    print(f"gradcheck worst: {worst:.3e}")
    return 0 if worst < args.tolerance else 1


def _add_global_flags(parser, suppress=False):
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--config", default=d(None), help="key = value config file")
    parser.add_argument("--seed", type=int, default=d(42))
    parser.add_argument("--threads", type=int, default=d(os.cpu_count()),
                        help="worker-count cap (execution is currently single-threaded)")
    parser.add_argument("--out", default=d("out"), help="output directory")
    parser.add_argument("--precision", choices=("f32", "f64"), default=d("f32"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pointmt",
                                     description="point-cloud classification workflows")
    _add_global_flags(parser)
    # the same flags are accepted after the subcommand; suppressed defaults keep
    # them from clobbering values given before it
    common = argparse.ArgumentParser(add_help=False)
    _add_global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate the synthetic benchmark dataset")
    p.set_defaults(handler=_cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train a classifier")
    p.add_argument("--train-data", required=True)
    p.add_argument("--test-data", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--cycle-length", dest="cycle_length", type=int)
    p.add_argument("--lr-max", dest="lr_max", type=float)
    p.add_argument("--lr-min", dest="lr_min", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--head", choices=("spf", "traditional"))
    p.add_argument("--branch-mode", dest="branch_mode",
                   choices=("hybrid", "mlp_only", "attn_only"))
    p.set_defaults(handler=_cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test-data", required=True)
    p.add_argument("--head", choices=("spf", "traditional"))
    p.add_argument("--branch-mode", dest="branch_mode",
                   choices=("hybrid", "mlp_only", "attn_only"))
    p.set_defaults(handler=_cmd_eval)

    p = sub.add_parser("bench", parents=[common], help="attention complexity benchmark")
    p.add_argument("--n-list", dest="n_list", type=lambda s: [int(t) for t in s.split(",")],
                   default=[1024])
    p.add_argument("--k-list", dest="k_list", type=lambda s: [int(t) for t in s.split(",")],
                   default=[8, 16, 32, 64])
    p.add_argument("--c", type=int, default=64)
    p.add_argument("--repeats", type=int, default=5)
    p.set_defaults(handler=_cmd_bench)

    p = sub.add_parser("analyze", parents=[common], help="kl | attn | features")
    p.add_argument("what", choices=("kl", "attn", "features"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test-data", required=True)
    p.add_argument("--sample", type=int, default=0)
    p.add_argument("--points", type=lambda s: [int(t) for t in s.split(",")])
    p.add_argument("--stage", type=int)
    p.add_argument("--head", choices=("spf", "traditional"))
    p.add_argument("--branch-mode", dest="branch_mode",
                   choices=("hybrid", "mlp_only", "attn_only"))
    p.set_defaults(handler=_cmd_analyze)

    p = sub.add_parser("compare-branches", parents=[common], help="train mlp_only, attn_only, hybrid")
    p.add_argument("--train-data", required=True)
    p.add_argument("--test-data", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--cycle-length", dest="cycle_length", type=int)
    p.set_defaults(handler=_cmd_compare_branches)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference verification suite")
    p.add_argument("--quick", action="store_true", help="skip the end-to-end model check")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(handler=_cmd_gradcheck)

    return parser


def command_dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_err:
        # argparse reports usage problems with status 2; those are user errors
        return 0 if exit_err.code in (0, None) else 1
    try:
        resolved = _resolve(args)
        _log_config(args, resolved)
        return args.handler(args, resolved)
    except (UsageError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # invariant breaches and everything unexpected
        import traceback

        traceback.print_exc()
        print(f"internal error: {err}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(command_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
