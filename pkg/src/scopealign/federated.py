"""Single-process federated simulator: FedAvg / FedProx, each optionally with
scope alignment (clients upload scopes, the server fuses them into the next
round's target)."""

from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import Dataset
from .engine import (
    DIVERGENCE_THRESHOLD,
    Model,
    OptimizerState,
    TrainingDiverged,
    clip_grad_norm,
    evaluate,
    optimizer_step,
    philox,
    total_loss_and_grad,
)
from .regularizers import RegularizerSpec, penalty_and_grad
from .scope import ScopeTarget, WeightScope, scope_estimate, scope_fuse, scope_kl

ALGORITHMS = ("fedavg", "fedprox", "fedavg_wsa", "fedprox_wsa")


class PartitionError(RuntimeError):
    pass


class ClientError(RuntimeError):
    def __init__(self, client_id: int, round_idx: int, cause: Exception):
        super().__init__(f"client {client_id} failed in round {round_idx}: {cause}")
        self.client_id = client_id
        self.round_idx = round_idx


@dataclass
class FLConfig:
    num_clients: int = 10
    participation_fraction: float = 1.0
    rounds: int = 150
    local_steps: int = 20
    learning_rate: float = 0.01
    lam: float = 5.0
    algorithm: str = "fedavg"
    wsa_window: Optional[Tuple[int, int]] = None
    seed: int = 0
    batch_size: int = 50
    momentum: float = 0.0
    weight_decay: float = 1e-4
    lr_decay: float = 1.0
    max_grad_norm: Optional[float] = 1.0
    prox_mu: float = 0.01
    weighted_aggregation: bool = False
    weights_only: bool = False
    fixed_target: Optional[ScopeTarget] = None
    threads: int = 1

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.num_clients < 1:
            raise ValueError("num_clients must be positive")
        if not 0.0 < self.participation_fraction <= 1.0:
            raise ValueError("participation_fraction must lie in (0, 1]")
        if self.rounds < 0:
            raise ValueError("rounds must be non-negative")
        if self.local_steps < 1:
            raise ValueError("local_steps must be at least 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.lam < 0 or self.prox_mu < 0:
            raise ValueError("lam and prox_mu must be non-negative")
        if self.wsa_window is not None:
            start, end = self.wsa_window
            if not 0 <= start <= end:
                raise ValueError("wsa_window must satisfy 0 <= start <= end")
            self.wsa_window = (int(start), int(end))

    @property
    def uses_wsa(self) -> bool:
        return self.algorithm.endswith("_wsa")

    @property
    def uses_prox(self) -> bool:
        return self.algorithm.startswith("fedprox")

    def lam_at(self, round_idx: int) -> float:
        if not self.uses_wsa:
            return 0.0
        if self.wsa_window is not None:
            start, end = self.wsa_window
            if not start <= round_idx < end:
                return 0.0
        return self.lam

    def participants_per_round(self) -> int:
        return max(1, math.ceil(self.participation_fraction * self.num_clients - 1e-12))


@dataclass
class RoundRecord:
    round: int
    participants: List[int]
    acc: float
    loss: float
    target: Dict[str, Tuple[float, float]]
    client_kl: Dict[int, float]
    client_scopes: Dict[int, WeightScope] = field(repr=False, default_factory=dict)

    @property
    def mean_scope_kl(self) -> float:
        return math.fsum(self.client_kl.values()) / len(self.client_kl) if self.client_kl else 0.0

    def sigma_dispersion(self) -> float:
        """Std across clients of each tensor's sigma, averaged over tensors."""
        scopes = [self.client_scopes[c] for c in self.participants]
        if len(scopes) < 2:
            return 0.0
        names = scopes[0].names()
        return float(np.mean([np.std([s[n].sigma for s in scopes]) for n in names]))


@dataclass
class FederationResult:
    model: Model
    records: List[RoundRecord]

    def round_log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["round", "acc", "loss", "mean_scope_kl"])
        for r in self.records:
            w.writerow([r.round, format(r.acc, ".17g"), format(r.loss, ".17g"), format(r.mean_scope_kl, ".17g")])
        return buf.getvalue()

    def scope_trajectory_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["round", "client", "layer", "mu", "sigma"])
        for r in self.records:
            for c in r.participants:
                for name, s in r.client_scopes[c].entries.items():
                    w.writerow([r.round, c, name, format(s.mu, ".17g"), format(s.sigma, ".17g")])
        return buf.getvalue()

    def accuracies(self) -> np.ndarray:
        return np.array([r.acc for r in self.records])


def dirichlet_partition(
    dataset: Dataset, num_clients: int, alpha: float, seed: int = 0, max_retries: int = 100
) -> List[np.ndarray]:
    """Per-class Dirichlet(alpha) split of sample indices over clients.

    Returns one sorted index array per client. A draw that leaves any client
    empty is redrawn, at most ``max_retries`` times.
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    if num_clients < 1:
        raise ValueError("num_clients must be positive")
    if num_clients == 1:
        return [np.arange(len(dataset))]
    by_class = [np.flatnonzero(dataset.labels == c) for c in range(dataset.num_classes)]
    for attempt in range(max_retries):
        rng = philox(seed, 0xD1C, attempt)
        shards: List[List[np.ndarray]] = [[] for _ in range(num_clients)]
        for members in by_class:
            if members.size == 0:
                continue
            props = rng.dirichlet(np.full(num_clients, alpha))
            cuts = (np.cumsum(props)[:-1] * members.size).round().astype(np.int64)
            for k, part in enumerate(np.split(rng.permutation(members), cuts)):
                shards[k].append(part)
        out = [np.sort(np.concatenate(s)) if s else np.empty(0, np.int64) for s in shards]
        if all(o.size > 0 for o in out):
            return out
    raise PartitionError(
        f"no partition without empty clients after {max_retries} draws; try a larger alpha"
    )


def aggregate(models: Sequence[Model], weights: Optional[Sequence[float]] = None) -> Model:
    """Elementwise mean of parameter tensors, uniform unless ``weights`` given.

    Values are sorted along the model axis before summing, so the result does
    not depend on list order; identical inputs come back unchanged.
    """
    if not models:
        raise ValueError("cannot aggregate an empty model list")
    if len(models) == 1:
        return models[0].copy()
    ref = models[0]
    out = {}
    if weights is not None:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (len(models),) or np.any(w < 0) or not w.sum() > 0:
            raise ValueError("weights must be non-negative, one per model, with positive sum")
        w = w / w.sum()
    for name in ref.param_names():
        stack = np.stack([m.params()[name] for m in models])
        lo, hi = stack.min(axis=0), stack.max(axis=0)
        if weights is None:
            mean = np.sort(stack, axis=0).sum(axis=0) / len(models)
        else:
            terms = stack * w.reshape((-1,) + (1,) * (stack.ndim - 1))
            mean = np.sort(terms, axis=0).sum(axis=0)
        out[name] = np.where(lo == hi, lo, mean)
    return ref.with_params(out)


def local_update(
    global_model: Model,
    shard: Dataset,
    target: Optional[ScopeTarget],
    config: FLConfig,
    round_idx: int = 0,
    client_id: int = 0,
) -> Tuple[Model, WeightScope]:
    """``local_steps`` mini-batch SGD steps on one client's shard."""
    if len(shard) == 0:
        raise ValueError(f"client {client_id} has no data")
    model = global_model.copy()
    lam = config.lam_at(round_idx)
    regs = []
    if lam > 0:
        if config.fixed_target is not None:
            target = config.fixed_target
        if target is None:
            raise ValueError("scope-aligned training needs a target")
        regs.append(RegularizerSpec("wsa", lam, target=target, weights_only=config.weights_only))
    if config.uses_prox and config.prox_mu > 0:
        regs.append(RegularizerSpec("proximal", config.prox_mu, anchor=global_model))
    opt = OptimizerState(
        kind="sgd",
        learning_rate=config.learning_rate * config.lr_decay**round_idx,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    rng = philox(config.seed, 0xC11E, round_idx, client_id)
    n = len(shard)
    order = rng.permutation(n)
    pos = 0
    x, y = shard.features, shard.labels
    for step in range(config.local_steps):
        if pos + config.batch_size > n and pos > 0:
            order, pos = rng.permutation(n), 0
        idx = order[pos : pos + config.batch_size]
        pos += config.batch_size
        value, grads = total_loss_and_grad(model, x[idx], y[idx], "cross_entropy")
        for reg in regs:
            pen, pg = penalty_and_grad(reg, model)
            value += pen
            grads = {k: g + pg[k] for k, g in grads.items()}
        if not math.isfinite(value) or value > DIVERGENCE_THRESHOLD:
            raise TrainingDiverged(f"client {client_id} loss {value!r} at step {step}", round_idx, step)
        optimizer_step(opt, model, clip_grad_norm(grads, config.max_grad_norm))
    return model, scope_estimate(model, weights_only=config.weights_only)


def sample_clients(config: FLConfig, round_idx: int) -> List[int]:
    k = config.participants_per_round()
    if k >= config.num_clients:
        return list(range(config.num_clients))
    chosen = philox(config.seed, 0x5A3, round_idx).choice(config.num_clients, size=k, replace=False)
    return sorted(int(c) for c in chosen)


def run_federation(
    config: FLConfig,
    train: Dataset,
    init_model: Model,
    test: Optional[Dataset] = None,
    shards: Optional[Sequence[np.ndarray]] = None,
    dirichlet_alpha: float = 0.5,
) -> FederationResult:
    """Run ``config.rounds`` rounds and return the global model and round log.

    The round-0 target is the scope of the initial model; afterwards the
    target is the fused scope of the previous round's participants.
    """
    if shards is None:
        shards = dirichlet_partition(train, config.num_clients, dirichlet_alpha, config.seed)
    if len(shards) != config.num_clients:
        raise ValueError("need one shard per client")
    client_data = [train.subset(s) for s in shards]
    sizes = [len(d) for d in client_data]
    evalset = test if test is not None else train
    model = init_model.copy()
    target = scope_fuse([scope_estimate(model, weights_only=config.weights_only)])
    records: List[RoundRecord] = []
    threads = int(os.environ.get("SCOPEALIGN_THREADS", config.threads) or 1)
    for t in range(config.rounds):
        participants = sample_clients(config, t)

        def work(c: int):
            try:
                return local_update(model, client_data[c], target, config, t, c)
            except Exception as exc:  # noqa: BLE001 - re-raised with context
                raise ClientError(c, t, exc) from exc

        if threads > 1:
            with ThreadPoolExecutor(threads) as pool:
                results = list(pool.map(work, participants))
        else:
            results = [work(c) for c in participants]
        models = [r[0] for r in results]
        scopes = {c: r[1] for c, r in zip(participants, results)}
        used = config.fixed_target if (config.fixed_target is not None and config.uses_wsa) else target
        client_kl = {
            c: math.fsum(scope_kl(s[n], used[n]) for n in s.names() if n in used) / max(1, len(s.names()))
            for c, s in scopes.items()
        }
        weights = [sizes[c] for c in participants] if config.weighted_aggregation else None
        model = aggregate(models, weights)
        loss, _ = evaluate(model, train.features, train.labels)
        _, acc = evaluate(model, evalset.features, evalset.labels)
        records.append(RoundRecord(t, participants, acc, loss, dict(used.entries), client_kl, scopes))
        target = scope_fuse([scopes[c] for c in participants])
    return FederationResult(model, records)
