"""``contsup`` command line.

Exit codes: 0 success, 1 invariant violation, 2 configuration error,
3 ingestion error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from typing import Optional, Sequence

from .errors import ConfigError, IngestionError, InvariantViolation, NonFiniteLossError

EXIT_OK, EXIT_INVARIANT, EXIT_CONFIG, EXIT_INGESTION, EXIT_NUMERIC = 0, 1, 2, 3, 4


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _config_from_args(args):
    from .config import RunConfig, load_config

    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "K", None) is not None:
        cfg.K = args.K
    if getattr(args, "strategy", None):
        cfg.partition = args.strategy
    if getattr(args, "context", None):
        cfg.context = args.context
    if getattr(args, "output_dir", None):
        cfg.output_dir = args.output_dir
    if getattr(args, "seeds", None):
        cfg.seeds = args.seeds
    return cfg.validate()


def cmd_build_plan(args) -> int:
    from .backbone import make_plan

    cfg = _config_from_args(args)
    spec = cfg.backbone_spec()
    plan = make_plan(spec, cfg.K, cfg.partition)
    _print_json(
        {
            "n_units": len(spec),
            "plan": plan.to_dict(),
            "sizes": plan.sizes,
            "units": [
                {"index": u.index, "kind": u.kind, "module": plan.module_of_unit(u.index) + 1, "output_shape": list(u.output_shape)}
                for u in spec.units
            ],
        }
    )
    return EXIT_OK


def cmd_account(args) -> int:
    from .accounting import account_memory, account_overhead
    from .backbone import make_plan

    cfg = _config_from_args(args)
    spec = cfg.backbone_spec()
    plan = make_plan(spec, cfg.K, cfg.partition)
    batch = args.batch_size or cfg.training.batch_size
    _print_json(
        {
            "plan": plan.to_dict(),
            "memory": account_memory(plan, cfg.context, spec, batch, cfg.objective(), overrides=cfg.overrides()).to_dict(),
            "overhead": account_overhead(plan, cfg.context, spec, cfg.overrides()).to_dict(),
        }
    )
    return EXIT_OK


def _report(records) -> int:
    code = EXIT_OK
    for r in records:
        err = "n/a" if r.final_test_error is None else f"{100 * r.final_test_error:.2f}%"
        print(f"{r.status:6s} {r.run_dir}  final test error {err}")
        if r.status != "ok":
            print(f"       {r.failure}", file=sys.stderr)
            code = EXIT_NUMERIC
    return code


def cmd_train(args) -> int:
    from .runner import run

    cfg = _config_from_args(args)
    return _report([run(cfg, s) for s in cfg.seeds])


def cmd_sweep(args) -> int:
    from .config import load_sweep
    from .runner import sweep

    configs = load_sweep(args.config)
    if args.output_dir:
        for c in configs:
            c.output_dir = args.output_dir
    print(f"{len(configs)} configurations x seeds")
    return _report(sweep(configs, workers=args.workers))


def cmd_probe_info(args) -> int:
    from .data import load_dataset
    from .engine import load_checkpoint
    from .probe import ProbeConfig, dump_features, extract_features, info_curve
    from .runner import load_record, save_record

    record = load_record(args.run)
    ckpt = record.checkpoints.get(args.checkpoint)
    if not ckpt or not os.path.exists(ckpt):
        raise ConfigError(f"run has no {args.checkpoint!r} checkpoint")
    cfg = record.run_config
    net, _ = load_checkpoint(ckpt)
    ds = load_dataset(cfg.dataset.name, cfg.dataset.root, cfg.dataset.augmentation_on, cfg.dataset.toy)
    pcfg = ProbeConfig(blocks=args.blocks, seed=args.seed)
    if args.dump:
        feats, labels = extract_features(net, ds, args.split, augmented=args.augmented)
        print(dump_features(args.dump, feats, labels, "hc" if args.augmented else "h"))
    fit_split = None if args.fit_split == "none" else args.fit_split
    curve = info_curve(net, ds, pcfg, args.split, augmented=args.augmented, fit_split=fit_split)
    record.info_curve = [e.to_dict() for e in curve]
    save_record(record)
    csv_path = os.path.join(record.run_dir, "info_curve.csv")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["module", "estimate_nats", "raw_estimate_nats", "label_entropy_nats", "heldout_nll_nats", "n_eval"])
        for e in curve:
            w.writerow([e.module_index, repr(e.estimate_nats), repr(e.raw_estimate_nats), repr(e.label_entropy_nats), repr(e.heldout_nll_nats), e.n_eval])
    for e in curve:
        print(f"module {e.module_index}: {e.estimate_nats:.4f} nats (H(y)={e.label_entropy_nats:.4f})")
    return EXIT_OK


def _collect_records(paths: Sequence[str]):
    from .runner import load_record

    records = []
    for p in paths:
        if os.path.isfile(p) or os.path.exists(os.path.join(p, "summary.json")):
            records.append(load_record(p))
            continue
        if not os.path.isdir(p):
            raise ConfigError(f"no run found at {p}")
        for root, _, files in sorted(os.walk(p)):
            if "summary.json" in files:
                records.append(load_record(root))
    if not records:
        raise ConfigError("no run summaries found")
    return records


def cmd_plot(args) -> int:
    from .plots import plot

    for path in plot(_collect_records(args.runs), args.kind, args.out):
        print(path)
    return EXIT_OK


def cmd_fetch_data(args) -> int:
    from .data import fetch_dataset

    print(fetch_dataset(args.name, args.root))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    from .backbone import STRATEGIES
    from .data import DATASETS
    from .plots import PLOT_KINDS

    p = argparse.ArgumentParser(prog="contsup", description="Greedy local learning with context supply.")
    sub = p.add_subparsers(dest="command", required=True)

    def config_args(sp, K=True):
        sp.add_argument("--config", help="RunConfig JSON file (defaults used when omitted)")
        if K:
            sp.add_argument("-K", type=int, help="number of gradient-isolated modules")
            sp.add_argument("--strategy", choices=STRATEGIES)
            sp.add_argument("--context", help="context tag, e.g. R0, E, R1E, M2R1E")

    sp = sub.add_parser("build-plan", help="print the partition plan")
    config_args(sp)
    sp.set_defaults(func=cmd_build_plan)

    sp = sub.add_parser("account", help="analytic memory and overhead accounting")
    config_args(sp)
    sp.add_argument("--batch-size", type=int)
    sp.set_defaults(func=cmd_account)

    sp = sub.add_parser("train", help="train one configuration for each of its seeds")
    config_args(sp)
    sp.add_argument("--output-dir")
    sp.add_argument("--seeds", type=int, nargs="+")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("sweep", help="expand list-valued fields into a grid and run it")
    sp.add_argument("--config", required=True)
    sp.add_argument("--output-dir")
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("probe-info", help="probe estimates of I(h_l, y) for a trained run")
    sp.add_argument("run", help="run directory or summary.json")
    sp.add_argument("--split", default="test", choices=("train", "test"))
    sp.add_argument(
        "--fit-split",
        default="train",
        choices=("train", "test", "none"),
        help="split the probes are fit on ('none': hold out part of --split instead)",
    )
    sp.add_argument("--checkpoint", default="final", choices=("final", "best"))
    sp.add_argument("--augmented", action="store_true", help="probe h^c instead of h")
    sp.add_argument("--blocks", type=int, default=3)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--dump", help="also write a feature dump into this directory")
    sp.set_defaults(func=cmd_probe_info)

    sp = sub.add_parser("plot", help="render figures from run summaries")
    sp.add_argument("kind", choices=PLOT_KINDS)
    sp.add_argument("runs", nargs="+", help="run directories, summaries or parent directories")
    sp.add_argument("--out", default="plots")
    sp.set_defaults(func=cmd_plot)

    sp = sub.add_parser("fetch-data", help="download a dataset (network access)")
    sp.add_argument("name", choices=[d for d in DATASETS if d != "toy"])
    sp.add_argument("--root")
    sp.set_defaults(func=cmd_fetch_data)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IngestionError as exc:
        print(f"ingestion error: {exc}", file=sys.stderr)
        return EXIT_INGESTION
    except NonFiniteLossError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except InvariantViolation as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
