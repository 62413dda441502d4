"""End-to-end experiment runner on synthetic label-shifted domains.

A run generates a pair of Gaussian-mixture domains whose class frequencies
disagree (reversed geometric profiles by default) and whose target inputs are
rotated and translated, pretrains on source, then alternates sampling,
label-distribution estimation, class-weighted source sampling and adversarial
training for the configured number of rounds. Per-round reports, aggregate
CSVs and the final checkpoint are persisted deterministically; wall-clock
times live in a separate sidecar so reports are byte-stable across reruns.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from scipy.stats import binomtest

from .config import ExperimentConfig
from .datasets import (
    Domain,
    FeatureDataset,
    LabelDistribution,
    RoundState,
    empirical_label_distribution,
)
from .errors import ConfigError, DataFormatError
from .matching import class_counts, estimate_target_distribution, jsd, source_sampling_probs
from .model import ToyModel, clone_params, evaluate, pretrain, save_checkpoint, train_round
from .sampling import (
    MappingOracle,
    PrototypeState,
    run_sampling_round,
    sample_entropy,
    sample_margin,
    sample_random,
)


def seed_stream(root_seed: int, name: str) -> np.random.Generator:
    """Named, independent RNG stream derived from one root seed."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    key = int.from_bytes(digest[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([root_seed, key]))


def geometric_label_distribution(num_classes: int, ratio: float, reverse: bool = False) -> LabelDistribution:
    """Class frequencies proportional to ratio**c (optionally reversed)."""
    weights = ratio ** np.arange(num_classes, dtype=np.float64)
    if reverse:
        weights = weights[::-1]
    return LabelDistribution(weights / weights.sum())


@dataclass(frozen=True)
class SyntheticDomainSpec:
    """Recipe for one source/target pair of Gaussian-mixture domains."""

    num_classes: int
    input_dim: int
    n_source: int
    n_target: int
    source_dist: LabelDistribution
    target_dist: LabelDistribution
    class_separation: float
    cov_scale: float
    rotation_deg: float
    translation: tuple[float, ...]
    seed: int

    def __post_init__(self):
        if self.input_dim < 2:
            raise ConfigError("synthetic domains need input_dim >= 2 (rotation plane)")
        if self.cov_scale <= 0:
            raise ConfigError("cov_scale must be positive (degenerate covariance)")
        if self.source_dist.num_classes != self.num_classes or self.target_dist.num_classes != self.num_classes:
            raise ConfigError("label distributions must cover num_classes classes")

    @classmethod
    def from_config(cls, config: ExperimentConfig) -> "SyntheticDomainSpec":
        source = geometric_label_distribution(config.num_classes, config.geometric_ratio)
        if config.label_shift == "reversed":
            target = geometric_label_distribution(config.num_classes, config.geometric_ratio, reverse=True)
        else:
            target = source
        return cls(
            num_classes=config.num_classes,
            input_dim=config.input_dim,
            n_source=config.n_source,
            n_target=config.n_target,
            source_dist=source,
            target_dist=target,
            class_separation=config.class_separation,
            cov_scale=config.cov_scale,
            rotation_deg=config.rotation_deg,
            translation=tuple(config.translation),
            seed=config.seed,
        )


def _allocate_counts(dist: np.ndarray, n: int) -> np.ndarray:
    """Largest-remainder rounding of n * dist, guaranteeing a total of n."""
    raw = dist * n
    counts = np.floor(raw).astype(np.int64)
    remainder = n - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:remainder]] += 1
    return counts


def _class_centroids(spec: SyntheticDomainSpec, rng: np.random.Generator) -> np.ndarray:
    angles = 2.0 * np.pi * np.arange(spec.num_classes) / spec.num_classes
    centroids = np.zeros((spec.num_classes, spec.input_dim))
    centroids[:, 0] = spec.class_separation * np.cos(angles)
    centroids[:, 1] = spec.class_separation * np.sin(angles)
    if spec.input_dim > 2:
        centroids[:, 2:] = rng.normal(0.0, spec.class_separation / 4.0, size=(spec.num_classes, spec.input_dim - 2))
    return centroids


def _sample_domain(spec, centroids, dist, n, rng) -> tuple[np.ndarray, np.ndarray]:
    counts = _allocate_counts(dist.probs, n)
    labels = np.repeat(np.arange(spec.num_classes), counts)
    rng.shuffle(labels)
    points = centroids[labels] + spec.cov_scale * rng.standard_normal((n, spec.input_dim))
    return points, labels


def generate_domains(spec: SyntheticDomainSpec) -> tuple[FeatureDataset, FeatureDataset, LabelDistribution]:
    """Deterministic source/target datasets plus the target's label distribution."""
    rng = seed_stream(spec.seed, "data")
    centroids = _class_centroids(spec, rng)
    src_pts, src_labels = _sample_domain(spec, centroids, spec.source_dist, spec.n_source, rng)
    tgt_pts, tgt_labels = _sample_domain(spec, centroids, spec.target_dist, spec.n_target, rng)

    theta = np.deg2rad(spec.rotation_deg)
    rot = np.eye(spec.input_dim)
    rot[0, 0] = rot[1, 1] = np.cos(theta)
    rot[0, 1] = -np.sin(theta)
    rot[1, 0] = np.sin(theta)
    shift = np.zeros(spec.input_dim)
    shift[: len(spec.translation)] = spec.translation[: spec.input_dim]
    tgt_pts = tgt_pts @ rot.T + shift

    source = FeatureDataset(
        features=src_pts.astype(np.float32),
        ids=np.arange(spec.n_source, dtype=np.int64),
        domain=Domain.SOURCE,
        labels=src_labels,
        num_classes=spec.num_classes,
    )
    target = FeatureDataset(
        features=tgt_pts.astype(np.float32),
        ids=np.arange(spec.n_target, dtype=np.int64),
        domain=Domain.TARGET,
        labels=tgt_labels,
        num_classes=spec.num_classes,
    )
    true_dist = empirical_label_distribution(target)
    return source, target, true_dist


@dataclass
class RoundReport:
    """Metrics of one completed round; wall-clock fields stay out of to_dict."""

    round_index: int
    accuracy: float
    jsd_estimate: float
    per_class_accuracy: list
    budget_spent: int
    n_oracle: int
    n_pseudo: int
    budget_fraction: float
    underspent: bool = False
    sampling_seconds: float = 0.0
    training_seconds: float = 0.0

    def to_dict(self) -> dict:
        return {
            "round_index": self.round_index,
            "accuracy": self.accuracy,
            "jsd_estimate": self.jsd_estimate,
            "per_class_accuracy": [None if np.isnan(v) else float(v) for v in self.per_class_accuracy],
            "budget_spent": self.budget_spent,
            "n_oracle": self.n_oracle,
            "n_pseudo": self.n_pseudo,
            "budget_fraction": self.budget_fraction,
            "underspent": self.underspent,
        }

    def timing_dict(self) -> dict:
        return {
            "round_index": self.round_index,
            "sampling_seconds": self.sampling_seconds,
            "training_seconds": self.training_seconds,
        }


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    reports: list[RoundReport]
    loss_trace: list[tuple] = field(default_factory=list)
    model: ToyModel | None = None

    @property
    def final(self) -> RoundReport:
        return self.reports[-1]


def _split_pool(target: FeatureDataset, test_fraction: float, rng) -> tuple[np.ndarray, np.ndarray]:
    n = target.n
    n_test = int(round(n * test_fraction))
    perm = rng.permutation(n)
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def _baseline_round(sampler, pool, probs, prev, oracle, budget, rng) -> tuple[PrototypeState, RoundState]:
    """Budget-B selection for the random/margin/entropy baselines (no pseudo set)."""
    taken = set(prev.labeled_ids)
    mask = np.array([i not in taken for i in pool.ids])
    candidates = pool.ids[mask]
    if len(candidates) == 0:
        chosen = np.array([], dtype=np.int64)
    else:
        spend = min(budget, len(candidates))
        if sampler == "random":
            chosen = sample_random(candidates, spend, rng)
        elif sampler == "margin":
            chosen = sample_margin(probs[mask], spend, candidates)
        elif sampler == "entropy":
            chosen = sample_entropy(probs[mask], spend, candidates)
        else:
            raise ConfigError(f"unknown baseline sampler {sampler!r}")
    labels = {int(i): oracle.query(int(i)) for i in chosen}
    state = PrototypeState(
        selected=list(prev.labeled_ids) + [int(i) for i in chosen],
        oracle_labeled={**{i: prev.oracle_labels[i] for i in prev.labeled_ids}, **labels},
        pseudo_labeled={},
        newly_labeled=len(chosen),
        budget_underspent=len(chosen) < budget,
    )
    next_state = RoundState(
        budget_per_round=budget,
        round_index=prev.round_index + 1,
        labeled_ids=tuple(list(prev.labeled_ids) + [int(i) for i in chosen]),
        total_budget_spent=prev.total_budget_spent + len(chosen),
        oracle_labels=dict(state.oracle_labeled),
        underspent=prev.underspent or state.budget_underspent,
    )
    return state, next_state


def run_experiment(config: ExperimentConfig, outdir: str | Path | None = None) -> ExperimentResult:
    """Full protocol: pretrain, then R rounds of sample/estimate/match/train/evaluate."""
    config.validate()
    spec = SyntheticDomainSpec.from_config(config)
    source, target, _ = generate_domains(spec)

    split_rng = seed_stream(config.seed, "split")
    pool_pos, test_pos = _split_pool(target, config.test_fraction, split_rng)
    pool = target.subset(pool_pos)
    test = target.subset(test_pos)
    pool_X = pool.features.astype(np.float64)
    test_X = test.features.astype(np.float64)
    pool_true = empirical_label_distribution(pool)
    budget = config.resolve_budget(pool.n)
    if config.rounds * budget > pool.n:
        raise ConfigError("total budget exceeds the sampling pool")

    source_X = source.features.astype(np.float64)
    source_y = source.labels
    oracle = MappingOracle({int(i): int(l) for i, l in zip(pool.ids, pool.labels)})
    id_to_pos = {int(v): i for i, v in enumerate(pool.ids)}

    model = ToyModel(
        input_dim=config.input_dim,
        hidden_dim=config.hidden_dim,
        feature_dim=config.feature_dim,
        embed_dim=config.embed_dim,
        num_classes=config.num_classes,
        disc_hidden=config.disc_hidden,
        temperature=config.temperature,
        classifier=config.classifier,
        rng=seed_stream(config.seed, "init"),
    )
    batch_rng = seed_stream(config.seed, "batches")
    sampler_rng = seed_stream(config.seed, "sampler")
    gamma = config.gamma_for(config.feature_dim)

    trace = pretrain(
        model, source_X, source_y,
        epochs=config.pretrain_epochs, batch_size=config.batch_size,
        learning_rate=config.learning_rate, weight_decay=config.weight_decay,
        rng=batch_rng,
    )

    acc, per_class = evaluate(model, test_X, test.labels)
    smoothed_prior = LabelDistribution.uniform(config.num_classes)
    reports = [
        RoundReport(
            round_index=0,
            accuracy=acc,
            jsd_estimate=jsd(smoothed_prior, pool_true),
            per_class_accuracy=list(per_class),
            budget_spent=0,
            n_oracle=0,
            n_pseudo=0,
            budget_fraction=0.0,
        )
    ]

    state = RoundState(budget_per_round=budget)
    for round_index in range(1, config.rounds + 1):
        t0 = time.perf_counter()
        feats = model.features(pool_X)
        probs = model.predict_proba(pool_X)
        if config.sampler == "prototype":
            protos, state = run_sampling_round(
                pool, feats, probs, state, oracle, budget,
                config.margin_delta, gamma, config.chunk_size,
            )
        else:
            protos, state = _baseline_round(
                config.sampler, pool, probs, state, oracle, budget, sampler_rng
            )
        t_sample = time.perf_counter() - t0

        counts = class_counts(protos, config.num_classes)
        p_hat = estimate_target_distribution(counts, config.num_classes)
        if config.oracle_matching:
            rho = source_sampling_probs(source, pool_true)
        elif config.matching:
            rho = source_sampling_probs(source, p_hat)
        else:
            rho = np.full(source.n, 1.0 / source.n)

        labeled_ids = list(state.labeled_ids)
        labeled_pos = np.array([id_to_pos[i] for i in labeled_ids], dtype=np.intp)
        labeled_X = pool_X[labeled_pos]
        labeled_y = np.array([state.oracle_labels[i] for i in labeled_ids], dtype=np.int64)

        t0 = time.perf_counter()
        best = None
        if config.model_selection == "validation":
            val_rng = seed_stream(config.seed, "validation")
            n_val = max(1, source.n // 10)
            val_pos = val_rng.permutation(source.n)[:n_val]

            def keep_best(epoch, m, _pos=val_pos):
                nonlocal best
                val_acc, _ = evaluate(m, source_X[_pos], source_y[_pos])
                if best is None or val_acc > best[0]:
                    best = (val_acc, clone_params(m.params))

            callback = keep_best
        else:
            callback = None
        round_trace = train_round(
            model, source_X, source_y, rho, labeled_X, labeled_y, pool_X,
            epochs=config.epochs, batch_size=config.batch_size,
            learning_rate=config.learning_rate, weight_decay=config.weight_decay,
            grl_schedule=config.grl_schedule, rng=batch_rng, epoch_callback=callback,
        )
        if best is not None:
            model.params = best[1]
        trace.extend(round_trace)
        t_train = time.perf_counter() - t0

        acc, per_class = evaluate(model, test_X, test.labels)
        reports.append(
            RoundReport(
                round_index=round_index,
                accuracy=acc,
                jsd_estimate=jsd(p_hat, pool_true),
                per_class_accuracy=list(per_class),
                budget_spent=state.total_budget_spent,
                n_oracle=len(protos.oracle_labeled),
                n_pseudo=len(protos.pseudo_labeled),
                budget_fraction=state.total_budget_spent / pool.n,
                underspent=state.underspent,
                sampling_seconds=t_sample,
                training_seconds=t_train,
            )
        )

    result = ExperimentResult(config=config, reports=reports, loss_trace=trace, model=model)
    if outdir is not None:
        persist_experiment(result, outdir)
    return result


def persist_experiment(result: ExperimentResult, outdir: str | Path):
    """Write reports, aggregate CSVs, loss trace, checkpoint and timing sidecar."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "config.json").write_text(
        json.dumps(result.config.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    for report in result.reports:
        path = outdir / f"round_{report.round_index:03d}.json"
        path.write_text(json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8")

    def write_csv(path, header, rows):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
        path.write_text(buf.getvalue(), encoding="utf-8")

    write_csv(
        outdir / "rounds.csv",
        ["round_index", "budget_fraction", "budget_spent", "accuracy", "jsd_estimate", "n_oracle", "n_pseudo"],
        [
            [r.round_index, repr(r.budget_fraction), r.budget_spent, repr(r.accuracy),
             repr(r.jsd_estimate), r.n_oracle, r.n_pseudo]
            for r in result.reports
        ],
    )
    write_csv(
        outdir / "budget_vs_accuracy.csv",
        ["budget_fraction", "accuracy"],
        [[repr(r.budget_fraction), repr(r.accuracy)] for r in result.reports],
    )
    write_csv(
        outdir / "budget_vs_jsd.csv",
        ["budget_fraction", "jsd_estimate"],
        [[repr(r.budget_fraction), repr(r.jsd_estimate)] for r in result.reports],
    )
    write_csv(
        outdir / "loss_trace.csv",
        ["epoch", "step", "loss_total", "loss_sup", "loss_adv", "grl_lambda"],
        [[e, s, repr(lt), repr(ls), repr(la), repr(lam)] for e, s, lt, ls, la, lam in result.loss_trace],
    )
    if result.model is not None:
        save_checkpoint(result.model, outdir / "model.ckpt")
    sidecar = {
        "written_at": datetime.now(timezone.utc).isoformat(),
        "timings": [r.timing_dict() for r in result.reports],
    }
    (outdir / "timing.json").write_text(json.dumps(sidecar, indent=2) + "\n", encoding="utf-8")


def sign_test_pvalue(a: np.ndarray, b: np.ndarray) -> float:
    """One-sided paired sign test that a < b; ties are discarded."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    wins = int(np.sum(a < b))
    informative = int(np.sum(a != b))
    if informative == 0:
        return 1.0
    return float(binomtest(wins, informative, 0.5, alternative="greater").pvalue)


def compare_samplers(
    config: ExperimentConfig,
    samplers: list[str],
    seeds: list[int],
    outdir: str | Path | None = None,
) -> dict:
    """Mean/std of final JSD and accuracy per sampler over shared seeds.

    Per-seed finals are included so callers can form paired differences; the
    first sampler serves as the reference for the reported pairwise stats.
    """
    if len(samplers) < 2:
        raise ConfigError("compare_samplers needs at least two samplers")
    if len(seeds) < 5:
        raise ConfigError("compare_samplers needs at least five seeds")
    per_sampler: dict[str, dict] = {}
    for sampler in samplers:
        jsds, accs = [], []
        for seed in seeds:
            result = run_experiment(config.with_updates(sampler=sampler, seed=int(seed)))
            jsds.append(result.final.jsd_estimate)
            accs.append(result.final.accuracy)
        per_sampler[sampler] = {
            "final_jsd": jsds,
            "final_accuracy": accs,
            "mean_jsd": float(np.mean(jsds)),
            "std_jsd": float(np.std(jsds)),
            "mean_accuracy": float(np.mean(accs)),
            "std_accuracy": float(np.std(accs)),
        }
    reference = samplers[0]
    pairwise = {}
    for sampler in samplers[1:]:
        ref = per_sampler[reference]
        other = per_sampler[sampler]
        diffs = np.array(ref["final_jsd"]) - np.array(other["final_jsd"])
        pairwise[sampler] = {
            "jsd_diff_mean": float(diffs.mean()),
            "jsd_wins": int(np.sum(diffs < 0)),
            "jsd_sign_test_p": sign_test_pvalue(ref["final_jsd"], other["final_jsd"]),
            "accuracy_sign_test_p": sign_test_pvalue(other["final_accuracy"], ref["final_accuracy"]),
        }
    table = {
        "reference": reference,
        "seeds": [int(s) for s in seeds],
        "samplers": per_sampler,
        "pairwise_vs_reference": pairwise,
    }
    if outdir is not None:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        (outdir / "comparison.json").write_text(
            json.dumps(table, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
    return table
