"""Federated-learning experiment orchestration.

Runs the full round loop at desk scale: partition a synthetic dataset,
train benign clients, let scheduled free-riders fabricate submissions,
detect, aggregate with the flagged clients excluded, and record everything
needed to replay or audit the run.  All randomness derives from the trial
seed, so a config reproduces its trace byte for byte regardless of the
worker count.
"""

from __future__ import annotations

import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import detect as det
from .attacks import AttackParams, make_submission
from .errors import ConfigurationError, S2wefError, ShapeError
from .nn import DatasetShard, ModelWeights, TrainConfig, evaluate_accuracy, init_model, local_train
from .wef import WefMatrix, accumulate, build_wef

SCENARIOS = ("S1", "S2", "CLEAN")
PARTITIONS = ("IID", "DIRICHLET")
DETECTORS = ("S2WEF", "WEF_NA_BASELINE", "CLUSTER_ONLY", "COS_ONLY_CLUSTER", "NONE")

THREADS_ENV = "S2WEF_THREADS"

# seed-derivation tags: one namespace per random purpose
_TAG_DATA, _TAG_PARTITION, _TAG_SCHEDULE, _TAG_INIT, _TAG_TRAIN, _TAG_ATTACK = range(6)


def derive_seed(*key: int) -> int:
    """Deterministic child seed from an integer key tuple."""
    return int(np.random.SeedSequence(list(key)).generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class DatasetParams:
    """Synthetic Gaussian-blob classification task.

    The defaults (many classes, small spread, wide hidden layer downstream)
    are tuned so that benign weight-evolution patterns carry enough shared
    structure for frequency statistics to behave the way they do on real
    un-normalized datasets; see the README for the reasoning.
    """

    samples: int = 2000
    features: int = 16
    classes: int = 10
    spread: float = 0.2

    def __post_init__(self):
        if self.samples < self.classes or self.classes < 2 or self.features < 1:
            raise ConfigurationError("dataset needs >= 2 classes, >= 1 feature, samples >= classes")
        if self.spread <= 0:
            raise ConfigurationError("spread must be > 0")


def make_dataset(params: DatasetParams, seed: int) -> DatasetShard:
    """Unit-norm class centers (mirrored for 2 classes) with Gaussian spread."""
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((params.classes, params.features))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    if params.classes == 2:
        centers[1] = -centers[0]
    labels = np.arange(params.samples) % params.classes
    features = centers[labels] + params.spread * rng.standard_normal(
        (params.samples, params.features)
    )
    perm = rng.permutation(params.samples)
    return DatasetShard(features[perm], labels[perm], params.classes)


def partition_iid(dataset: DatasetShard, n_clients: int, seed: int) -> list[DatasetShard]:
    """Random equal-size disjoint shards; the remainder is dropped."""
    if len(dataset) < n_clients:
        raise ConfigurationError(f"dataset of {len(dataset)} cannot feed {n_clients} clients")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(dataset))
    size = len(dataset) // n_clients
    return [
        DatasetShard(
            dataset.features[perm[i * size:(i + 1) * size]],
            dataset.labels[perm[i * size:(i + 1) * size]],
            dataset.class_count,
        )
        for i in range(n_clients)
    ]


def partition_dirichlet(
    dataset: DatasetShard, n_clients: int, beta: float, seed: int
) -> list[DatasetShard]:
    """Per-class Dirichlet(beta) proportions; empty shards are repaired."""
    if beta <= 0:
        raise ConfigurationError("beta must be > 0")
    if len(dataset) < n_clients:
        raise ConfigurationError(f"dataset of {len(dataset)} cannot feed {n_clients} clients")
    rng = np.random.default_rng(seed)
    assigned: list[list[int]] = [[] for _ in range(n_clients)]
    for c in range(dataset.class_count):
        idx = np.flatnonzero(dataset.labels == c)
        rng.shuffle(idx)
        proportions = rng.dirichlet(np.full(n_clients, beta))
        bounds = (np.cumsum(proportions) * len(idx)).astype(np.int64)
        start = 0
        for i in range(n_clients):
            stop = bounds[i] if i < n_clients - 1 else len(idx)
            assigned[i].extend(int(v) for v in idx[start:stop])
            start = stop
    # repair: an empty shard takes one sample from the current largest
    while any(len(a) == 0 for a in assigned):
        empty = min(range(n_clients), key=lambda i: (len(assigned[i]), i))
        largest = max(range(n_clients), key=lambda i: (len(assigned[i]), -i))
        assigned[empty].append(assigned[largest].pop())
    return [
        DatasetShard(dataset.features[a], dataset.labels[a], dataset.class_count)
        for a in assigned
    ]


def _free_rider_count(n_clients: int, ratio: float) -> int:
    count = ratio * n_clients
    if abs(count - round(count)) > 1e-9:
        raise ConfigurationError(f"free_rider_ratio {ratio} times {n_clients} clients is not integral")
    count = int(round(count))
    if not 0 <= count < n_clients / 2:
        raise ConfigurationError("free-riders must be fewer than half of all clients")
    return count


def schedule_scenario1(n_clients: int, ratio: float, rounds: int, seed: int) -> np.ndarray:
    """Fixed subset switches to free-riding at round index 2 and stays."""
    count = _free_rider_count(n_clients, ratio)
    rng = np.random.default_rng(seed)
    chosen = rng.choice(n_clients, size=count, replace=False)
    table = np.zeros((rounds, n_clients), dtype=bool)
    table[2:, chosen] = True
    return table


def schedule_scenario2(n_clients: int, ratio: float, rounds: int, seed: int) -> np.ndarray:
    """Fresh random subset free-rides every round after the first."""
    count = _free_rider_count(n_clients, ratio)
    rng = np.random.default_rng(seed)
    table = np.zeros((rounds, n_clients), dtype=bool)
    for t in range(1, rounds):
        table[t, rng.choice(n_clients, size=count, replace=False)] = True
    return table


def schedule_clean(n_clients: int, rounds: int) -> np.ndarray:
    return np.zeros((rounds, n_clients), dtype=bool)


def aggregate_fedavg(
    submissions: Sequence[ModelWeights], benign_ids: Iterable[int]
) -> ModelWeights:
    """Unweighted mean over the kept clients; over everyone if none remain."""
    if not submissions:
        raise ConfigurationError("nothing to aggregate")
    template = submissions[0]
    flats = []
    for s in submissions:
        if s.num_params != template.num_params:
            raise ShapeError("submissions disagree on parameter count")
        flats.append(s.to_flat())
    kept = sorted(set(benign_ids))
    if not kept:
        kept = list(range(len(submissions)))
    stacked = np.stack([flats[i] for i in kept])
    return template.from_flat(stacked.mean(axis=0))


@dataclass(frozen=True)
class Metrics:
    precision: float
    recall: float
    f1: float
    fpr: float


def compute_metrics(truth: Iterable[int], flagged: Iterable[int], n_clients: int) -> Metrics:
    """Binary detection metrics with free-rider as the positive class.

    A round with nothing to detect and nothing flagged scores a perfect 1.
    """
    truth_set = set(truth)
    flag_set = set(flagged)
    tp = len(truth_set & flag_set)
    fp = len(flag_set - truth_set)
    fn = len(truth_set - flag_set)
    tn = n_clients - tp - fp - fn
    if tp == fp == fn == 0:
        return Metrics(1.0, 1.0, 1.0, 0.0)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    fpr = fp / (fp + tn) if fp + tn else 0.0
    return Metrics(precision, recall, f1, fpr)


@dataclass(frozen=True)
class SimConfig:
    """Complete experiment description; everything else derives from it."""

    clients: int = 10
    free_rider_ratio: float = 0.3
    scenario: str = "S1"
    attack: AttackParams | None = None
    partition: str = "IID"
    dirichlet_beta: float = 0.5
    rounds: int = 20
    train: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=0.1))
    detector: str = "S2WEF"
    accumulate_wef: bool = False
    seeds: tuple[int, ...] = (1, 2, 3)
    dataset: DatasetParams = field(default_factory=DatasetParams)
    hidden_layers: tuple[int, ...] = (256,)
    keep_submissions: bool = False

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigurationError(f"scenario must be one of {SCENARIOS}")
        if self.partition not in PARTITIONS:
            raise ConfigurationError(f"partition must be one of {PARTITIONS}")
        if self.detector not in DETECTORS:
            raise ConfigurationError(f"detector must be one of {DETECTORS}")
        if self.clients < 3:
            raise ConfigurationError("need at least 3 clients")
        if self.rounds < 3:
            raise ConfigurationError("need at least 3 rounds")
        if not self.seeds:
            raise ConfigurationError("need at least one trial seed")
        if not 0 <= self.free_rider_ratio < 0.5:
            raise ConfigurationError("free_rider_ratio must lie in [0, 0.5)")
        _free_rider_count(self.clients, self.free_rider_ratio)
        if self.scenario == "CLEAN":
            if self.free_rider_ratio != 0:
                raise ConfigurationError("CLEAN scenario requires free_rider_ratio = 0")
        elif self.free_rider_ratio > 0 and self.attack is None:
            raise ConfigurationError("attack parameters required when free-riders exist")
        if self.dirichlet_beta <= 0:
            raise ConfigurationError("dirichlet_beta must be > 0")
        if not self.hidden_layers or any(h < 1 for h in self.hidden_layers):
            raise ConfigurationError("hidden_layers must be nonempty positive sizes")

    @property
    def architecture(self) -> list[int]:
        return [self.dataset.features, *self.hidden_layers, self.dataset.classes]


@dataclass
class RoundRecord:
    """Everything observed in one round of one trial."""

    trial_seed: int
    round_index: int
    roles: np.ndarray  # True where the client free-rode
    wefs: list[WefMatrix]
    detection: det.RoundDetection
    free_riders: frozenset[int]
    metrics: Metrics
    accuracy: float
    global_pen_before: np.ndarray
    e: int
    submission_digests: list[str]
    submissions: list[np.ndarray] | None = None
    aggregate_flat: np.ndarray | None = None


def _digest(flat: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(flat).tobytes()).hexdigest()[:16]


def _resolve_workers(max_workers: int | None) -> int:
    if max_workers is not None:
        return max(1, max_workers)
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ConfigurationError(f"{THREADS_ENV} must be an integer, got {env!r}") from exc
    return os.cpu_count() or 1


def build_schedule(cfg: SimConfig, trial_seed: int) -> np.ndarray:
    if cfg.scenario == "CLEAN" or cfg.free_rider_ratio == 0:
        return schedule_clean(cfg.clients, cfg.rounds)
    sched_seed = derive_seed(trial_seed, _TAG_SCHEDULE)
    if cfg.scenario == "S1":
        return schedule_scenario1(cfg.clients, cfg.free_rider_ratio, cfg.rounds, sched_seed)
    return schedule_scenario2(cfg.clients, cfg.free_rider_ratio, cfg.rounds, sched_seed)


@dataclass
class _TrialState:
    cfg: SimConfig
    trial_seed: int
    shards: list[DatasetShard]
    eval_set: DatasetShard
    schedule: np.ndarray
    global_model: ModelWeights
    previous_global: ModelWeights | None = None
    wef_history: list[list[WefMatrix]] = field(default_factory=list)


def _client_submission(state: _TrialState, t: int, client: int):
    """Produce (weights, wef) for one client, benign or free-riding."""
    cfg = state.cfg
    e = cfg.train.local_iterations
    try:
        if state.schedule[t, client]:
            seed = derive_seed(state.trial_seed, _TAG_ATTACK, t, client)
            sub = make_submission(cfg.attack, state.global_model, state.previous_global, e, seed)
            return sub.weights, sub.wef
        seed = derive_seed(state.trial_seed, _TAG_TRAIN, t, client)
        trained, snapshots = local_train(state.global_model, state.shards[client], cfg.train, seed)
        return trained, build_wef(snapshots)
    except S2wefError as exc:
        raise type(exc)(f"client {client}: {exc}") from exc


def _detect(state: _TrialState, wefs: list[WefMatrix]) -> tuple[det.RoundDetection, frozenset[int]]:
    cfg = state.cfg
    n = cfg.clients
    if cfg.detector == "NONE" or state.previous_global is None:
        return det.empty_round_detection(n), frozenset()

    if cfg.accumulate_wef:
        inputs = [accumulate(h) for h in state.wef_history]
    else:
        inputs = wefs

    if cfg.detector == "WEF_NA_BASELINE":
        flagged = det.wef_defense_baseline(
            state.wef_history, accumulate_rounds=cfg.accumulate_wef
        )
        detection = det.empty_round_detection(n)
        detection = replace(detection, scores=replace(detection.scores, dev=det.dev_scores(inputs)))
        return detection, flagged

    gamma_mode = det.GAMMA_COS_ONLY if cfg.detector == "COS_ONLY_CLUSTER" else det.GAMMA_COS_OVER_L1
    require_vote = cfg.detector == "S2WEF"
    detection = det.detect_round(
        inputs,
        state.global_model.penultimate,
        state.previous_global.penultimate,
        cfg.train.local_iterations,
        gamma_mode=gamma_mode,
        require_vote=require_vote,
    )
    return detection, detection.decision.free_rider_list


def run_round(state: _TrialState, t: int, pool: ThreadPoolExecutor | None) -> RoundRecord:
    """One communication round: submit, detect, aggregate, evaluate."""
    cfg = state.cfg
    n = cfg.clients
    global_pen_before = state.global_model.penultimate.copy()

    try:
        if pool is None:
            results = [_client_submission(state, t, i) for i in range(n)]
        else:
            results = list(pool.map(lambda i: _client_submission(state, t, i), range(n)))

        submissions = [r[0] for r in results]
        wefs = [r[1] for r in results]
        state.wef_history = [h + [w] for h, w in zip(state.wef_history, wefs)]

        detection, flagged = _detect(state, wefs)
        kept = set(range(n)) - set(flagged)
        new_global = aggregate_fedavg(submissions, kept)
        accuracy = evaluate_accuracy(new_global, state.eval_set)
    except S2wefError as exc:
        raise type(exc)(f"round {t}: {exc}") from exc

    truth = frozenset(int(i) for i in np.flatnonzero(state.schedule[t]))
    metrics = compute_metrics(truth, flagged, n)

    record = RoundRecord(
        trial_seed=state.trial_seed,
        round_index=t,
        roles=state.schedule[t].copy(),
        wefs=wefs,
        detection=detection,
        free_riders=flagged,
        metrics=metrics,
        accuracy=accuracy,
        global_pen_before=global_pen_before,
        e=cfg.train.local_iterations,
        submission_digests=[_digest(s.to_flat()) for s in submissions],
        submissions=[s.to_flat() for s in submissions] if cfg.keep_submissions else None,
        aggregate_flat=new_global.to_flat() if cfg.keep_submissions else None,
    )
    state.previous_global = state.global_model
    state.global_model = new_global
    return record


def run_trial(cfg: SimConfig, trial_seed: int, max_workers: int | None = None) -> list[RoundRecord]:
    """All rounds for one trial seed."""
    dataset = make_dataset(cfg.dataset, derive_seed(trial_seed, _TAG_DATA))
    part_seed = derive_seed(trial_seed, _TAG_PARTITION)
    if cfg.partition == "IID":
        shards = partition_iid(dataset, cfg.clients, part_seed)
    else:
        shards = partition_dirichlet(dataset, cfg.clients, cfg.dirichlet_beta, part_seed)

    state = _TrialState(
        cfg=cfg,
        trial_seed=trial_seed,
        shards=shards,
        eval_set=dataset,
        schedule=build_schedule(cfg, trial_seed),
        global_model=init_model(cfg.architecture, derive_seed(trial_seed, _TAG_INIT)),
        wef_history=[[] for _ in range(cfg.clients)],
    )

    workers = _resolve_workers(max_workers)
    records = []
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for t in range(cfg.rounds):
            records.append(run_round(state, t, pool))
    finally:
        if pool is not None:
            pool.shutdown()
    return records


@dataclass
class MetricsReport:
    """Per-round metric series and their aggregations across trials."""

    cfg: SimConfig
    trials: dict[int, list[RoundRecord]]

    def _rounds(self, seed: int, attack_only: bool) -> list[RoundRecord]:
        recs = [r for r in self.trials[seed] if r.round_index >= 1]
        if attack_only:
            recs = [r for r in recs if r.roles.any()]
        return recs

    def trial_mean(self, seed: int, metric: str, attack_only: bool = False) -> float:
        recs = self._rounds(seed, attack_only)
        if not recs:
            return float("nan")
        return float(np.mean([getattr(r.metrics, metric) for r in recs]))

    def mean(self, metric: str, attack_only: bool = False) -> float:
        values = [self.trial_mean(s, metric, attack_only) for s in self.trials]
        values = [v for v in values if not np.isnan(v)]
        return float(np.mean(values)) if values else float("nan")

    def final_accuracy(self, seed: int) -> float:
        return self.trials[seed][-1].accuracy

    def mean_final_accuracy(self) -> float:
        return float(np.mean([self.final_accuracy(s) for s in self.trials]))


def run_simulation(cfg: SimConfig, max_workers: int | None = None) -> MetricsReport:
    """Run every trial seed and collect the full report."""
    trials = {}
    for seed in cfg.seeds:
        try:
            trials[seed] = run_trial(cfg, seed, max_workers=max_workers)
        except S2wefError as exc:
            raise type(exc)(f"trial seed {seed}: {exc}") from exc
    return MetricsReport(cfg=cfg, trials=trials)
