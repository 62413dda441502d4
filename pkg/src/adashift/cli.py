"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 validation error (bad config or
malformed input files), 3 runtime failure (training divergence, uncovered
class). Diagnostics go to stderr; `--json` switches stdout to line-delimited
JSON records.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .datasets import (
    FeatureDataset,
    load_feature_dataset,
    load_probability_matrix,
    RoundState,
    save_feature_dataset,
)
from .errors import ConfigError, DataFormatError, DivergenceError, UncoveredClassError
from .harness import SyntheticDomainSpec, compare_samplers, generate_domains, run_experiment
from .matching import class_counts, estimate_target_distribution
from .model import ToyModel, pretrain, save_checkpoint
from .harness import seed_stream
from .sampling import (
    MappingOracle,
    read_annotation_csv,
    read_round_manifest,
    run_sampling_round,
    write_annotation_request,
    write_round_manifest,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _emit(payload: dict, as_json: bool):
    if as_json:
        print(json.dumps(payload, sort_keys=True))
    else:
        for key, value in payload.items():
            print(f"{key}: {value}")


def _load_config(args) -> ExperimentConfig:
    path = Path(args.config)
    if not path.exists():
        raise _UsageError(f"config file not found: {path}")
    return ExperimentConfig.from_file(path, overrides=args.set or [])


def _cmd_generate(args) -> int:
    config = _load_config(args)
    spec = SyntheticDomainSpec.from_config(config)
    source, target, true_dist = generate_domains(spec)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    suffix = ".csv" if args.csv else ".bin"
    save_feature_dataset(source, outdir / f"source{suffix}")
    save_feature_dataset(target, outdir / f"target{suffix}")
    (outdir / "true_target.json").write_text(
        json.dumps({"probs": list(true_dist.probs)}, indent=2) + "\n", encoding="utf-8"
    )
    _emit(
        {"source": str(outdir / f"source{suffix}"), "target": str(outdir / f"target{suffix}"),
         "n_source": source.n, "n_target": target.n},
        args.json,
    )
    return EXIT_OK


def _cmd_pretrain(args) -> int:
    config = _load_config(args)
    spec = SyntheticDomainSpec.from_config(config)
    source, _, _ = generate_domains(spec)
    model = ToyModel(
        input_dim=config.input_dim, hidden_dim=config.hidden_dim,
        feature_dim=config.feature_dim, embed_dim=config.embed_dim,
        num_classes=config.num_classes, disc_hidden=config.disc_hidden,
        temperature=config.temperature, classifier=config.classifier,
        rng=seed_stream(config.seed, "init"),
    )
    trace = pretrain(
        model, source.features.astype(np.float64), source.labels,
        epochs=config.pretrain_epochs, batch_size=config.batch_size,
        learning_rate=config.learning_rate, weight_decay=config.weight_decay,
        rng=seed_stream(config.seed, "batches"),
    )
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, outdir / "model.ckpt")
    _emit({"checkpoint": str(outdir / "model.ckpt"), "final_loss": trace[-1][2]}, args.json)
    return EXIT_OK


def _cmd_round(args) -> int:
    target = load_feature_dataset(args.features)
    ids, probs = load_probability_matrix(args.probs)
    order = {int(v): i for i, v in enumerate(ids)}
    missing = [int(i) for i in target.ids if int(i) not in order]
    if missing:
        raise DataFormatError(f"probability file lacks ids {missing[:5]}...")
    probs = probs[[order[int(i)] for i in target.ids]]

    budget = int(args.budget) if args.budget >= 1 else max(1, int(round(args.budget * target.n)))
    gamma = args.gamma if args.gamma > 0 else 1.0 / target.dim
    if args.state:
        prev = RoundState.from_json(Path(args.state).read_text(encoding="utf-8"))
    else:
        prev = RoundState(budget_per_round=budget)
    answers = read_annotation_csv(args.labels) if args.labels else {}
    oracle = MappingOracle(answers)

    protos, state = run_sampling_round(
        target, target.features.astype(np.float64), probs, prev, oracle,
        budget, args.delta, gamma, args.chunk_size,
    )
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    write_round_manifest(outdir / "manifest.json", protos, state, args.delta)
    (outdir / "state.json").write_text(state.to_json() + "\n", encoding="utf-8")
    pending = protos.pending_ids
    if pending:
        write_annotation_request(outdir / "annotation_request.csv", pending)
    elif target.num_classes:
        counts = class_counts(protos, target.num_classes)
        estimate = estimate_target_distribution(counts, target.num_classes)
        (outdir / "estimate.json").write_text(
            json.dumps({"probs": list(estimate.probs)}, indent=2) + "\n", encoding="utf-8"
        )
    _emit(
        {"manifest": str(outdir / "manifest.json"), "selected": len(protos.selected),
         "oracle_labeled": len(protos.oracle_labeled), "pseudo_labeled": len(protos.pseudo_labeled),
         "pending": len(pending), "underspent": protos.budget_underspent},
        args.json,
    )
    return EXIT_OK


def _cmd_run(args) -> int:
    config = _load_config(args)
    result = run_experiment(config, outdir=args.out)
    final = result.final
    _emit(
        {"rounds": len(result.reports) - 1, "final_accuracy": final.accuracy,
         "final_jsd": final.jsd_estimate, "budget_spent": final.budget_spent,
         "out": str(args.out)},
        args.json,
    )
    return EXIT_OK


def _cmd_compare(args) -> int:
    config = _load_config(args)
    samplers = [s.strip() for s in args.samplers.split(",") if s.strip()]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    table = compare_samplers(config, samplers, seeds, outdir=args.out)
    if args.json:
        print(json.dumps(table, sort_keys=True))
    else:
        for sampler, stats in table["samplers"].items():
            print(
                f"{sampler}: jsd {stats['mean_jsd']:.4f} +- {stats['std_jsd']:.4f}  "
                f"acc {stats['mean_accuracy']:.4f} +- {stats['std_accuracy']:.4f}"
            )
        for sampler, stats in table["pairwise_vs_reference"].items():
            print(
                f"{table['reference']} vs {sampler}: jsd wins {stats['jsd_wins']}/{len(table['seeds'])}"
                f" (sign test p={stats['jsd_sign_test_p']:.4g})"
            )
    return EXIT_OK


def _cmd_estimate(args) -> int:
    protos = read_round_manifest(args.protos)
    if protos.pending_ids:
        raise DataFormatError(
            f"manifest has {len(protos.pending_ids)} pending annotations; supply labels first"
        )
    counts = class_counts(protos, args.classes)
    estimate = estimate_target_distribution(counts, args.classes)
    print(json.dumps({"probs": list(estimate.probs)}))
    return EXIT_OK


def _cmd_report(args) -> int:
    rows = []
    for run_dir in args.runs:
        run_dir = Path(run_dir)
        for report_file in sorted(run_dir.glob("round_*.json")):
            raw = json.loads(report_file.read_text(encoding="utf-8"))
            rows.append((run_dir.name, raw["round_index"], raw["budget_fraction"],
                         raw["accuracy"], raw["jsd_estimate"]))
    if not rows:
        raise DataFormatError("no round reports found under the given directories")
    lines = ["run,round_index,budget_fraction,accuracy,jsd_estimate"]
    lines += [f"{r[0]},{r[1]},{r[2]!r},{r[3]!r},{r[4]!r}" for r in rows]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        _emit({"out": args.out, "rows": len(rows)}, args.json)
    else:
        print(text, end="")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="adashift", description="Active domain adaptation under label shift")
    parser.add_argument("--json", action="store_true", help="line-delimited JSON output")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_opts(p):
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")

    p = sub.add_parser("generate", help="write synthetic source/target feature files")
    add_config_opts(p)
    p.add_argument("--out", required=True)
    p.add_argument("--csv", action="store_true", help="write CSV instead of binary")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("pretrain", help="source-only pretraining; writes a checkpoint")
    add_config_opts(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("round", help="one sampling round on precomputed feature files")
    p.add_argument("--features", required=True, help="target feature file (csv or binary)")
    p.add_argument("--probs", required=True, help="per-sample class probabilities CSV")
    p.add_argument("--state", help="round state JSON from the previous round")
    p.add_argument("--labels", help="oracle answers CSV (id,label)")
    p.add_argument("--out", required=True)
    p.add_argument("--budget", type=float, default=0.02, help="count (>=1) or pool fraction (<1)")
    p.add_argument("--delta", type=float, default=0.8, help="margin threshold")
    p.add_argument("--gamma", type=float, default=0.0, help="RBF bandwidth; 0 = 1/feature_dim")
    p.add_argument("--chunk-size", type=int, default=1024)
    p.set_defaults(func=_cmd_round)

    p = sub.add_parser("run", help="full multi-round experiment on synthetic domains")
    add_config_opts(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("compare", help="aggregate several samplers over shared seeds")
    add_config_opts(p)
    p.add_argument("--samplers", required=True, help="comma-separated sampler names")
    p.add_argument("--seeds", required=True, help="comma-separated seeds (>= 5)")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("estimate", help="target label distribution from a round manifest")
    p.add_argument("--protos", required=True, help="round manifest JSON")
    p.add_argument("--classes", required=True, type=int)
    p.set_defaults(func=_cmd_estimate)

    p = sub.add_parser("report", help="combine per-round reports into one CSV")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, DataFormatError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (DivergenceError, UncoveredClassError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
