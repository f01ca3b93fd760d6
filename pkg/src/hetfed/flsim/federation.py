"""Federated training loop, server aggregation rules and the evaluation protocol."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from ..ingest import DatasetView
from ..partition import Partition
from .models import Architecture, ModelParams, SoftmaxRegression

log = logging.getLogger(__name__)

# sub-stream tags under the config seed
_SAMPLE, _TRAIN, _INIT, _SPLIT, _FINETUNE = 11, 12, 13, 14, 15

TEST_FRACTION = 0.2


class Algorithm(str, Enum):
    FEDAVG = "FEDAVG"
    FEDPROX = "FEDPROX"
    FEDNOVA = "FEDNOVA"
    SCAFFOLD = "SCAFFOLD"
    LG = "LG"
    IFCA = "IFCA"
    SOLO = "SOLO"


# global baselines are fine-tuned by each client before evaluation
FINETUNED = {Algorithm.FEDAVG, Algorithm.FEDPROX, Algorithm.FEDNOVA, Algorithm.SCAFFOLD}


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.5
    weight_decay: float = 0.0
    batch_size: int = 10
    local_epochs: int = 10
    rounds: int = 100
    client_fraction: float = 1.0
    mu: float = 0.01
    ifca_clusters: int = 2
    lg_local_layers: int = 1
    seed: int = 0
    finetune_epochs: Optional[int] = None
    workers: int = 1

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.local_epochs < 0:
            raise ValueError("local_epochs must be >= 0")
        if not 0.0 < self.client_fraction <= 1.0:
            raise ValueError("client_fraction must lie in (0, 1]")
        for name in ("learning_rate", "momentum", "weight_decay", "mu"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    def clients_per_round(self, num_clients: int) -> int:
        share = self.client_fraction * num_clients
        if share < 1.0 - 1e-12:
            raise ValueError(f"client_fraction * num_clients = {share:g} must be >= 1")
        return min(math.ceil(share - 1e-12), num_clients)


@dataclass
class ClientState:
    client_id: int
    train_idx: np.ndarray
    test_idx: np.ndarray
    personalized: Optional[ModelParams] = None
    control_variate: Optional[np.ndarray] = None
    cluster_id: Optional[int] = None


@dataclass(frozen=True)
class RoundLog:
    round: int
    selected: tuple
    train_loss: dict
    local_test_acc: dict
    global_acc: float
    aggregation: str


@dataclass
class FederationResult:
    algorithm: Algorithm
    models: list
    states: list
    logs: list
    # local models produced in the last round, keyed by client id
    last_local: dict = field(default_factory=dict)
    # SCAFFOLD server control variate c after the last round
    server_control: Optional[np.ndarray] = None


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


# ----------------------------------------------------------- local training ---

def local_train(
    start: ModelParams,
    x: np.ndarray,
    y: np.ndarray,
    cfg: TrainConfig,
    rng: np.random.Generator,
    prox_anchor: Optional[ModelParams] = None,
    control_correction: Optional[np.ndarray] = None,
    epochs: Optional[int] = None,
) -> tuple[ModelParams, int, float]:
    """Mini-batch SGD with momentum; returns (params, steps taken, mean batch loss).

    The step direction is the cross-entropy gradient plus
    ``weight_decay * w``, plus ``mu * (w - prox_anchor)`` when an anchor is
    given, minus ``control_correction`` when given.  The momentum buffer
    starts at zero on every call.
    """
    n = len(y)
    if n == 0:
        raise ValueError("client has no training data")
    arch = start.architecture
    epochs = cfg.local_epochs if epochs is None else epochs
    w = start.values.copy()
    buf = np.zeros_like(w)
    anchor = prox_anchor.values if prox_anchor is not None and cfg.mu > 0 else None
    steps, losses = 0, []
    for _ in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            b = order[lo:lo + cfg.batch_size]
            loss, g = arch.loss_and_grad(w, x[b], y[b])
            if cfg.weight_decay:
                g = g + cfg.weight_decay * w
            if anchor is not None:
                g = g + cfg.mu * (w - anchor)
            if control_correction is not None:
                g = g - control_correction
            buf = cfg.momentum * buf + g
            w = w - cfg.learning_rate * buf
            steps += 1
            losses.append(loss)
    avg = float(np.mean(losses)) if losses else float("nan")
    return ModelParams(arch, w), steps, avg


# -------------------------------------------------------------- aggregation ---

def aggregate_fedavg(updates: Sequence[tuple[ModelParams, int]]) -> ModelParams:
    """Sample-count weighted element-wise average.

    Weighted terms are summed per coordinate in sorted order, so the result
    does not depend on the order of ``updates``.
    """
    if not updates:
        raise ValueError("no updates to aggregate")
    arch = updates[0][0].architecture
    for m, _ in updates:
        if m.architecture != arch:
            raise ValueError("cannot aggregate models of different architectures")
    counts = np.array([c for _, c in updates], dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise ValueError("total sample count must be positive")
    first = updates[0][0].values
    if all(np.array_equal(m.values, first) for m, _ in updates[1:]):
        return ModelParams(arch, first.copy())
    terms = np.stack([(c / total) * m.values for (m, _), c in zip(updates, counts)])
    terms.sort(axis=0)
    return ModelParams(arch, terms.sum(axis=0))


def _masked_average(updates, mask: np.ndarray, base: ModelParams) -> ModelParams:
    avg = aggregate_fedavg(updates)
    values = base.values.copy()
    values[mask] = avg.values[mask]
    return ModelParams(base.architecture, values)


# ------------------------------------------------------------------ helpers ---

def client_splits(partition: Partition, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-client 80/20 train/test split of the assigned indices."""
    out = []
    for cid, idx in enumerate(partition.client_indices):
        perm = _rng(seed, _SPLIT, cid).permutation(np.asarray(idx))
        n_test = int(math.floor(TEST_FRACTION * len(perm) + 0.5))
        out.append((np.sort(perm[n_test:]), np.sort(perm[:n_test])))
    return out


class _ClientData:
    def __init__(self, dataset: DatasetView, states: list[ClientState]):
        feats, labels = dataset.train_features, dataset.train_labels
        self.train = [(feats[s.train_idx].astype(np.float64), labels[s.train_idx]) for s in states]
        self.test = [(feats[s.test_idx].astype(np.float64), labels[s.test_idx]) for s in states]


def default_architecture(dataset: DatasetView, partition: Partition) -> Architecture:
    return SoftmaxRegression(dataset.dim, max(dataset.num_classes, partition.num_classes))


def _layer_mask(arch: Architecture, layers: range) -> np.ndarray:
    mask = np.zeros(arch.num_params, dtype=bool)
    slices = arch.layer_slices()
    for k in layers:
        mask[slices[k]] = True
    return mask


# --------------------------------------------------------------- federation ---

def run_federation(
    algorithm: Algorithm | str,
    partition: Partition,
    dataset: DatasetView,
    cfg: TrainConfig,
    architecture: Optional[Architecture] = None,
) -> FederationResult:
    algorithm = Algorithm(algorithm)
    arch = architecture or default_architecture(dataset, partition)
    n_clients = partition.num_clients
    per_round = cfg.clients_per_round(n_clients)
    splits = client_splits(partition, partition.spec.seed)
    states = [ClientState(cid, tr, te) for cid, (tr, te) in enumerate(splits)]
    data = _ClientData(dataset, states)
    sizes = np.array([len(tr) for tr, _ in splits])

    if algorithm is Algorithm.IFCA:
        if cfg.ifca_clusters < 1:
            raise ValueError("IFCA needs at least one cluster")
        models = [ModelParams(arch, arch.init(_rng(cfg.seed, _INIT, k))) for k in range(cfg.ifca_clusters)]
    else:
        models = [ModelParams(arch, arch.init(_rng(cfg.seed, _INIT, 0)))]

    if algorithm is Algorithm.LG and not 0 <= cfg.lg_local_layers <= arch.num_layers:
        raise ValueError(f"lg_local_layers must lie in [0, {arch.num_layers}]")
    local_mask = _layer_mask(arch, range(cfg.lg_local_layers if algorithm is Algorithm.LG else 0))
    server_c = np.zeros(arch.num_params) if algorithm is Algorithm.SCAFFOLD else None
    if algorithm is Algorithm.SCAFFOLD:
        for s in states:
            s.control_variate = np.zeros(arch.num_params)

    def start_model(cid: int) -> ModelParams:
        st = states[cid]
        if algorithm is Algorithm.SOLO:
            return st.personalized or models[0]
        if algorithm is Algorithm.IFCA:
            x, y = data.train[cid]
            if len(y) == 0:
                return models[st.cluster_id or 0]
            losses = [m.architecture.loss(m.values, x, y) for m in models]
            st.cluster_id = int(np.argmin(losses))
            return models[st.cluster_id]
        if algorithm is Algorithm.LG and st.personalized is not None:
            v = models[0].values.copy()
            v[local_mask] = st.personalized.values[local_mask]
            return ModelParams(arch, v)
        return models[0]

    def served_model(cid: int) -> ModelParams:
        """Model a client would use for prediction right now."""
        st = states[cid]
        if algorithm is Algorithm.SOLO:
            return st.personalized or models[0]
        if algorithm is Algorithm.IFCA:
            return models[st.cluster_id] if st.cluster_id is not None else start_model(cid)
        if algorithm is Algorithm.LG:
            return start_model(cid)
        return models[0]

    def train_one(cid: int, rnd: int, start: ModelParams):
        x, y = data.train[cid]
        if len(y) == 0:
            return start, 0, float("nan")
        correction = None
        if algorithm is Algorithm.SCAFFOLD:
            correction = states[cid].control_variate - server_c
        anchor = models[0] if algorithm is Algorithm.FEDPROX else None
        return local_train(start, x, y, cfg, _rng(cfg.seed, _TRAIN, rnd, cid),
                           prox_anchor=anchor, control_correction=correction)

    logs = []
    last_local = {}
    for rnd in range(1, cfg.rounds + 1):
        if algorithm is Algorithm.SOLO:
            selected = list(range(n_clients))
        else:
            pick = _rng(cfg.seed, _SAMPLE, rnd).choice(n_clients, per_round, replace=False)
            selected = sorted(int(c) for c in pick)
        starts = [start_model(cid) for cid in selected]
        if cfg.workers > 1:
            with ThreadPoolExecutor(cfg.workers) as pool:
                results = list(pool.map(lambda a: train_one(a[0], rnd, a[1]), zip(selected, starts)))
        else:
            results = [train_one(cid, rnd, s) for cid, s in zip(selected, starts)]
        outcome = {cid: r for cid, r in zip(selected, results)}
        last_local = {cid: r[0] for cid, r in outcome.items()}
        active = [cid for cid in selected if sizes[cid] > 0]
        aggregation = "none" if algorithm is Algorithm.SOLO else algorithm.value.lower()

        if algorithm is Algorithm.SOLO:
            for cid in selected:
                states[cid].personalized = outcome[cid][0]
        elif algorithm is Algorithm.IFCA:
            for k in range(len(models)):
                members = [c for c in active if states[c].cluster_id == k]
                if members:
                    models[k] = aggregate_fedavg([(outcome[c][0], sizes[c]) for c in members])
        elif active:
            glob = models[0]
            if algorithm is Algorithm.FEDNOVA:
                taus = np.array([outcome[c][1] for c in active])
                weights = sizes[active]
                tau_eff = float(np.dot(weights, taus)) / float(weights.sum())
                updates = []
                for c, tau in zip(active, taus):
                    local = outcome[c][0]
                    ratio = tau_eff / tau if tau > 0 else 0.0
                    if ratio != 1.0:
                        local = ModelParams(arch, glob.values + ratio * (local.values - glob.values))
                    updates.append((local, sizes[c]))
                models[0] = aggregate_fedavg(updates)
            elif algorithm is Algorithm.SCAFFOLD:
                deltas = []
                for c in active:
                    local, tau, _ = outcome[c]
                    if tau > 0 and cfg.learning_rate > 0:
                        drift = (glob.values - local.values) / (tau * cfg.learning_rate)
                    else:
                        drift = np.zeros(arch.num_params)
                    delta = drift - server_c
                    states[c].control_variate = states[c].control_variate + delta
                    deltas.append(delta)
                w = sizes[active] / sizes[active].sum()
                server_c = server_c + np.tensordot(w, np.stack(deltas), axes=1)
                models[0] = aggregate_fedavg([(outcome[c][0], sizes[c]) for c in active])
            elif algorithm is Algorithm.LG:
                for c in active:
                    states[c].personalized = outcome[c][0]
                models[0] = _masked_average([(outcome[c][0], sizes[c]) for c in active],
                                            ~local_mask, glob)
            else:
                models[0] = aggregate_fedavg([(outcome[c][0], sizes[c]) for c in active])

        train_loss = {cid: outcome[cid][2] for cid in selected}
        local_acc = {cid: arch.accuracy(outcome[cid][0].values, *data.test[cid]) for cid in selected}
        accs = [arch.accuracy(served_model(c).values, *data.test[c])
                for c in range(n_clients) if len(data.test[c][1])]
        logs.append(RoundLog(rnd, tuple(selected), train_loss, local_acc,
                             float(np.mean(accs)) if accs else float("nan"), aggregation))

    if algorithm is Algorithm.SOLO:
        models = []
    return FederationResult(algorithm, models, states, logs, last_local, server_c)


# --------------------------------------------------------------- evaluation ---

@dataclass(frozen=True)
class EvalResult:
    mean_accuracy: float
    per_client: dict
    excluded: tuple


def _serving_model(result: FederationResult, st: ClientState, dataset: DatasetView,
                   cfg: TrainConfig) -> Optional[ModelParams]:
    alg = result.algorithm
    if alg is Algorithm.SOLO:
        return st.personalized
    if alg is Algorithm.IFCA:
        x = dataset.train_features[st.train_idx].astype(np.float64)
        y = dataset.train_labels[st.train_idx]
        if len(y) == 0:
            return result.models[st.cluster_id or 0]
        losses = [m.architecture.loss(m.values, x, y) for m in result.models]
        return result.models[int(np.argmin(losses))]
    glob = result.models[0]
    if alg is Algorithm.LG and st.personalized is not None:
        mask = _layer_mask(glob.architecture, range(cfg.lg_local_layers))
        v = glob.values.copy()
        v[mask] = st.personalized.values[mask]
        return ModelParams(glob.architecture, v)
    return glob


def finetuned_models(
    result: FederationResult,
    dataset: DatasetView,
    cfg: TrainConfig,
    finetune_epochs: Optional[int] = None,
) -> dict:
    """Per-client models as used for evaluation, keyed by client id.

    Global baselines are fine-tuned for ``finetune_epochs`` (default
    ``cfg.finetune_epochs``, else ``cfg.local_epochs``) on the client's
    training split.  SOLO, LG and IFCA models are returned as trained.
    """
    epochs = finetune_epochs
    if epochs is None:
        epochs = cfg.finetune_epochs if cfg.finetune_epochs is not None else cfg.local_epochs
    out = {}
    for st in result.states:
        model = _serving_model(result, st, dataset, cfg)
        if model is None:
            continue
        if result.algorithm in FINETUNED and epochs > 0 and len(st.train_idx):
            x = dataset.train_features[st.train_idx].astype(np.float64)
            y = dataset.train_labels[st.train_idx]
            model, _, _ = local_train(model, x, y, cfg, _rng(cfg.seed, _FINETUNE, st.client_id),
                                      epochs=epochs)
        out[st.client_id] = model
    return out


def finetune_and_evaluate(
    result: FederationResult,
    partition: Partition,
    dataset: DatasetView,
    cfg: TrainConfig,
    finetune_epochs: Optional[int] = None,
) -> EvalResult:
    """Unweighted mean over clients of local test accuracy after fine-tuning.

    Clients with an empty test split are skipped, logged, and listed in
    ``excluded``.
    """
    if len(result.states) != partition.num_clients:
        raise ValueError("federation result does not match the partition")
    models = finetuned_models(result, dataset, cfg, finetune_epochs)
    per_client, excluded = {}, []
    for st in result.states:
        cid = st.client_id
        if len(st.test_idx) == 0 or cid not in models:
            excluded.append(cid)
            log.warning("client %d has no test split or model; excluded from evaluation", cid)
            continue
        m = models[cid]
        xt = dataset.train_features[st.test_idx].astype(np.float64)
        per_client[cid] = m.architecture.accuracy(m.values, xt, dataset.train_labels[st.test_idx])
    mean = float(np.mean(list(per_client.values()))) if per_client else float("nan")
    return EvalResult(mean, per_client, tuple(excluded))
