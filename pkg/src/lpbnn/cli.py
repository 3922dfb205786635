"""Command-line entry point: ``lpbnn <command> ...``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_config, load_dataset_spec
from .data import generate_dataset, load_dataset_dir, write_dataset_dir
from .evaluate import evaluate
from .experiment import (
    ExperimentError,
    covariance_check,
    run_experiment,
    stability_sweep,
    sweep_table,
)
from .metrics import (
    compute_report,
    diversity_stats,
    member_correctness,
    merge_batches,
    ood_metrics,
    read_prediction_dump,
    write_prediction_dump,
)
from .models import DeepEnsemble, load_model


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def cmd_train(args) -> int:
    out = run_experiment(args.config, seed=args.seed, out_dir=args.out)
    print(out)
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.checkpoint)
    data = load_dataset_dir(args.data)
    batches, report = evaluate(model, data, args.extra_samples, args.seed,
                               {"checkpoint": str(args.checkpoint), "dataset": str(args.data)})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_prediction_dump(out / "predictions.csv", batches)
    report.to_json(out / "metrics.json")
    print(json.dumps(report.to_dict()["metrics"], indent=2, sort_keys=True))
    return 0


def cmd_metrics(args) -> int:
    report = compute_report(read_prediction_dump(args.pred), {"source": str(args.pred)})
    report.to_json(args.out)
    print(json.dumps(report.to_dict()["metrics"], indent=2, sort_keys=True))
    return 0


def _in_distribution(batches):
    sel = [b for b in batches if not b.ood and b.severity == 0]
    if not sel:
        raise ValueError("no in-distribution rows (ood=0, severity=0) in dump")
    return merge_batches(sel)


def cmd_ood(args) -> int:
    b_in = _in_distribution(read_prediction_dump(args.pred_in))
    out_batches = read_prediction_dump(args.pred_out)
    flagged = [b for b in out_batches if b.ood]
    b_out = merge_batches(flagged or out_batches)
    print(json.dumps(ood_metrics(b_in, b_out), indent=2, sort_keys=True))
    return 0


def cmd_diversity(args) -> int:
    batch = _in_distribution(read_prediction_dump(args.pred))
    stats = diversity_stats(member_correctness(batch))
    out = dataclasses.asdict(stats)
    print(json.dumps(out, indent=2, sort_keys=True, default=str))
    return 0


def cmd_covcheck(args) -> int:
    model = load_model(args.checkpoint)
    if isinstance(model, DeepEnsemble):
        raise ValueError("covcheck needs a single BatchEnsemble or LP-BNN checkpoint")
    result = covariance_check(model, args.samples, args.seed)
    text = json.dumps(result, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    seeds = _ints(args.seeds) if args.seeds else None
    rows = stability_sweep(cfg, _floats(args.lrs), seeds=seeds)
    table = sweep_table(rows)
    if args.out:
        Path(args.out).write_text(table + "\n")
    print(table)
    return 0


def cmd_gen_data(args) -> int:
    spec, seed = load_dataset_spec(args.spec)
    if args.seed is not None:
        seed = args.seed
    out = write_dataset_dir(args.out, generate_dataset(spec, seed))
    print(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lpbnn", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="generate data, train, evaluate and write an artifact directory")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", default="runs")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a dataset directory")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--extra-samples", type=int, default=0)
    s.add_argument("--seed", type=int, default=1)
    s.add_argument("--out", default=".")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("metrics", help="metrics JSON from a prediction dump")
    s.add_argument("--pred", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_metrics)

    s = sub.add_parser("ood", help="AUROC / AUPR / FPR-95-TPR between two dumps")
    s.add_argument("--pred-in", required=True)
    s.add_argument("--pred-out", required=True)
    s.set_defaults(fn=cmd_ood)

    s = sub.add_parser("diversity", help="pairwise diversity statistics of a dump")
    s.add_argument("--pred", required=True)
    s.set_defaults(fn=cmd_diversity)

    s = sub.add_parser("covcheck", help="covariance structure of a checkpoint's layers")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--samples", type=int, default=100_000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_covcheck)

    s = sub.add_parser("sweep-lr", help="learning-rate stability sweep (mean-field vs LP-BNN)")
    s.add_argument("--config", required=True)
    s.add_argument("--lrs", required=True)
    s.add_argument("--seeds")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_sweep)

    s = sub.add_parser("gen-data", help="write a synthetic dataset directory")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_gen_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ExperimentError as err:
        print(f"error {err}", file=sys.stderr)
        return 2
    except (ConfigError, FileNotFoundError, ValueError) as err:
        print(f"error [{args.command}] {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
