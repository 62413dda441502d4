"""Greedy prototype selection with margin-gated labeling, plus baseline samplers.

Each round restarts from the oracle-labeled set carried over from previous
rounds, greedily adds the highest-gain candidates to the prototype set, and
routes every pick through the top-1/top-2 margin gate: confident picks are
pseudo-labeled, uncertain ones spend oracle budget. The round ends once the
per-round budget of oracle labels is spent (or the pool runs out, which is
flagged rather than raised).
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datasets import FeatureDataset, RoundState
from .errors import DataFormatError
from .kernels import build_kernel_cache, commit_selection


class Gate(enum.Enum):
    EASY = "easy"
    HARD = "hard"


@dataclass
class PrototypeState:
    """The prototype set of one round: oracle-labeled plus pseudo-labeled ids."""

    selected: list[int] = field(default_factory=list)
    oracle_labeled: dict[int, int | None] = field(default_factory=dict)
    pseudo_labeled: dict[int, tuple[int, float]] = field(default_factory=dict)
    newly_labeled: int = 0
    budget_underspent: bool = False

    def validate(self):
        overlap = set(self.oracle_labeled) & set(self.pseudo_labeled)
        if overlap:
            raise DataFormatError(f"ids {sorted(overlap)} are both oracle- and pseudo-labeled")
        if set(self.selected) != set(self.oracle_labeled) | set(self.pseudo_labeled):
            raise DataFormatError("selected set does not match the union of labeled partitions")
        for sample_id, (label, conf) in self.pseudo_labeled.items():
            if not 0.0 < conf <= 1.0:
                raise DataFormatError(f"id {sample_id}: confidence {conf} outside (0, 1]")

    @property
    def pending_ids(self) -> list[int]:
        return [i for i, lab in self.oracle_labeled.items() if lab is None]


class Oracle:
    """Answers label queries; same id always gets the same answer."""

    def query(self, sample_id: int) -> int | None:
        raise NotImplementedError


class MappingOracle(Oracle):
    """Oracle backed by a mapping, e.g. held-out ground truth or an annotation file.

    Unknown ids yield None, which the sampler records as a pending annotation.
    """

    def __init__(self, answers: dict[int, int]):
        self._answers = dict(answers)
        self.query_count = 0

    def query(self, sample_id: int) -> int | None:
        self.query_count += 1
        return self._answers.get(int(sample_id))


def _check_prob_rows(probs: np.ndarray):
    if np.any(probs < -1e-12):
        raise ValueError("probabilities must be nonnegative")
    sums = probs.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise ValueError("probability rows must sum to 1 within 1e-6")


def pseudo_label(probs: np.ndarray) -> tuple[int, float]:
    """Top-1 class and its probability; ties break toward the lowest class id."""
    probs = np.asarray(probs, dtype=np.float64)
    _check_prob_rows(probs)
    top = int(np.argmax(probs))
    return top, float(probs[top])


def margin_gate(probs: np.ndarray, delta: float) -> Gate:
    """EASY iff the gap between the two largest probabilities exceeds delta."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape[-1] < 2:
        raise ValueError("margin gate needs at least two classes")
    if not 0.0 <= delta <= 1.0:
        raise ValueError("delta must lie in [0, 1]")
    top2 = np.partition(probs, -2)[-2:]
    margin = float(top2[1] - top2[0])
    return Gate.EASY if margin > delta else Gate.HARD


def run_sampling_round(
    target: FeatureDataset,
    features: np.ndarray,
    probs: np.ndarray,
    prev: RoundState,
    oracle: Oracle,
    budget: int,
    delta: float,
    gamma: float,
    chunk_size: int = 1024,
) -> tuple[PrototypeState, RoundState]:
    """One greedy round: returns the fresh prototype set and the updated state.

    The pseudo-labeled partition is rebuilt from scratch; oracle-labeled ids
    from previous rounds seed the prototype set, keep their stored labels and
    are never re-queried. Exactly `budget` new ids are oracle-labeled unless
    the pool is exhausted first, in which case the underspent flag is set.
    """
    ids = target.ids
    n = len(ids)
    features = np.ascontiguousarray(features, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    if features.shape[0] != n or probs.shape[0] != n:
        raise ValueError("features/probs row count does not match the target pool")
    _check_prob_rows(probs)
    if budget < 1:
        raise ValueError("budget must be >= 1")

    id_to_pos = {int(v): i for i, v in enumerate(ids)}
    carried = list(prev.labeled_ids)
    missing = [i for i in carried if i not in id_to_pos]
    if missing:
        raise ValueError(f"previously labeled ids {missing} are not in the target pool")

    cache = build_kernel_cache(features, gamma, chunk_size)
    for sample_id in carried:
        commit_selection(id_to_pos[sample_id], cache)

    state = PrototypeState(
        selected=list(carried),
        oracle_labeled={i: prev.oracle_labels[i] for i in carried},
    )
    new_ids: list[int] = []
    while state.newly_labeled < budget:
        if cache.selected_count == n:
            state.budget_underspent = True
            break
        gains = cache.gain_vector()
        best_gain = gains.max()
        tied = np.flatnonzero(gains == best_gain)
        pos = int(tied[np.argmin(ids[tied])])
        sample_id = int(ids[pos])
        if margin_gate(probs[pos], delta) is Gate.EASY:
            state.pseudo_labeled[sample_id] = pseudo_label(probs[pos])
        else:
            state.oracle_labeled[sample_id] = oracle.query(sample_id)
            state.newly_labeled += 1
            new_ids.append(sample_id)
        state.selected.append(sample_id)
        commit_selection(pos, cache)

    state.validate()
    next_state = RoundState(
        budget_per_round=budget,
        round_index=prev.round_index + 1,
        labeled_ids=tuple(carried + new_ids),
        total_budget_spent=prev.total_budget_spent + state.newly_labeled,
        oracle_labels=dict(state.oracle_labeled),
        underspent=prev.underspent or state.budget_underspent,
    )
    return state, next_state


def sample_random(pool_ids: np.ndarray, budget: int, seed) -> np.ndarray:
    """Uniform without replacement; deterministic for a given seed."""
    pool_ids = np.asarray(pool_ids, dtype=np.int64)
    if budget > len(pool_ids):
        raise ValueError(f"budget {budget} exceeds pool size {len(pool_ids)}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return rng.choice(pool_ids, size=budget, replace=False)


def _rank_ids(scores: np.ndarray, pool_ids: np.ndarray, budget: int) -> np.ndarray:
    if budget > len(pool_ids):
        raise ValueError(f"budget {budget} exceeds pool size {len(pool_ids)}")
    # stable sort on (score, id): equal scores yield the lowest ids first
    order = np.lexsort((pool_ids, scores))
    return pool_ids[order[:budget]]


def sample_margin(probs: np.ndarray, budget: int, pool_ids: np.ndarray | None = None) -> np.ndarray:
    """The `budget` ids with the smallest top-1/top-2 margins."""
    probs = np.asarray(probs, dtype=np.float64)
    _check_prob_rows(probs)
    if pool_ids is None:
        pool_ids = np.arange(probs.shape[0], dtype=np.int64)
    top2 = np.partition(probs, -2, axis=1)[:, -2:]
    margins = top2[:, 1] - top2[:, 0]
    return _rank_ids(margins, np.asarray(pool_ids, dtype=np.int64), budget)


def sample_entropy(probs: np.ndarray, budget: int, pool_ids: np.ndarray | None = None) -> np.ndarray:
    """The `budget` ids with the largest predictive entropy."""
    probs = np.asarray(probs, dtype=np.float64)
    _check_prob_rows(probs)
    if pool_ids is None:
        pool_ids = np.arange(probs.shape[0], dtype=np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(probs > 0, probs * np.log(probs), 0.0)
    entropy = -terms.sum(axis=1)
    return _rank_ids(-entropy, np.asarray(pool_ids, dtype=np.int64), budget)


def round_manifest(state: PrototypeState, round_state: RoundState, delta: float) -> dict:
    """JSON-ready record of one sampling round."""
    return {
        "round_index": round_state.round_index,
        "budget_per_round": round_state.budget_per_round,
        "margin_delta": delta,
        "selected": [int(i) for i in state.selected],
        "oracle_labeled": {str(i): v for i, v in state.oracle_labeled.items()},
        "pseudo_labeled": {
            str(i): {"label": int(lab), "confidence": conf}
            for i, (lab, conf) in state.pseudo_labeled.items()
        },
        "pending_annotations": [int(i) for i in state.pending_ids],
        "newly_labeled": state.newly_labeled,
        "budget_underspent": state.budget_underspent,
    }


def write_round_manifest(path: str | Path, state: PrototypeState, round_state: RoundState, delta: float):
    Path(path).write_text(
        json.dumps(round_manifest(state, round_state, delta), sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )


def read_round_manifest(path: str | Path) -> PrototypeState:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        state = PrototypeState(
            selected=[int(i) for i in raw["selected"]],
            oracle_labeled={
                int(k): (None if v is None else int(v)) for k, v in raw["oracle_labeled"].items()
            },
            pseudo_labeled={
                int(k): (int(v["label"]), float(v["confidence"]))
                for k, v in raw["pseudo_labeled"].items()
            },
            newly_labeled=int(raw["newly_labeled"]),
            budget_underspent=bool(raw["budget_underspent"]),
        )
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"malformed round manifest {path}: {exc}") from exc
    state.validate()
    return state


def write_annotation_request(path: str | Path, pending_ids: list[int]):
    """One id per line; annotators fill in `id,label` rows next to each."""
    lines = ["id,label"] + [f"{int(i)}," for i in pending_ids]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_annotation_csv(path: str | Path) -> dict[int, int]:
    """Parse an `id,label` CSV; rows with an empty label field are skipped."""
    answers: dict[int, int] = {}
    lines = [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines or lines[0].replace(" ", "") != "id,label":
        raise DataFormatError(f"{path}: expected header 'id,label'")
    for lineno, line in enumerate(lines[1:], start=2):
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 2:
            raise DataFormatError(f"{path}: row {lineno} is not 'id,label'")
        if parts[1] == "":
            continue
        try:
            answers[int(parts[0])] = int(parts[1])
        except ValueError as exc:
            raise DataFormatError(f"{path}: row {lineno}: {exc}") from exc
    return answers
