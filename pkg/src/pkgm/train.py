"""PKGM training loop."""

from __future__ import annotations

import hashlib
import json
import logging
import threading
from dataclasses import asdict, dataclass

import numpy as np

from .kg import TripleStore, sample_negatives
from .model import ModelParams, batch_grad, init_params
from .optim import LazyAdam

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    dim: int = 64
    margin: float = 1.0
    learning_rate: float = 1e-4
    batch_size: int = 128
    epochs: int = 10
    negatives_per_edge: int = 1
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    normalize_entities: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.margin < 0:
            raise ValueError("margin must be nonnegative")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.batch_size < 1 or self.epochs < 1 or self.negatives_per_edge < 1 or self.workers < 1:
            raise ValueError("batch_size, epochs, negatives_per_edge and workers must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ValueError("bad Adam moment parameters")

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class TrainResult:
    params: ModelParams
    loss_history: list[float]
    config: TrainConfig


def _apply(params: ModelParams, opt: LazyAdam, g, normalize: bool) -> None:
    opt.update("entity", params.entity_emb, g.entity_ids, g.entity_grad)
    opt.update("relation", params.relation_emb, g.relation_ids, g.relation_grad)
    opt.update("matrix", params.relation_mat, g.relation_ids, g.matrix_grad)
    if normalize and len(g.entity_ids):
        rows = params.entity_emb[g.entity_ids]
        norms = np.linalg.norm(rows, axis=1, keepdims=True)
        params.entity_emb[g.entity_ids] = rows / np.where(norms > 0, norms, 1.0)


def _run_batches(store, params, opt, config, order, rng, lock=None):
    total, count = 0.0, 0
    n_neg = config.negatives_per_edge
    for start in range(0, len(order), config.batch_size):
        pos = store.triples[order[start:start + config.batch_size]]
        pos = np.repeat(pos, n_neg, axis=0)
        neg, _ = sample_negatives(store, pos, rng)
        loss, g = batch_grad(params, np.stack([pos, neg], axis=1), config.margin)
        if not np.isfinite(loss):
            raise TrainingError(
                f"non-finite loss {loss} at step {opt.step_count + 1} (learning_rate={config.learning_rate})"
            )
        if lock is not None:
            with lock:
                opt.begin_step()
        else:
            opt.begin_step()
        _apply(params, opt, g, config.normalize_entities)
        total += loss
        count += len(pos)
    return total, count


def train(store: TripleStore, config: TrainConfig, params: ModelParams | None = None) -> TrainResult:
    """Fit PKGM to ``store`` with lazy Adam; returns parameters and per-epoch mean loss.

    With ``workers == 1`` the run is a pure function of ``config.seed``. More
    workers split each epoch's shuffled triples into contiguous shards and
    update the shared tables without locking, so results are not reproducible.
    """
    if not len(store):
        raise ValueError("cannot train on an empty store")
    seeds = np.random.SeedSequence(config.seed).spawn(2 + config.workers)
    init_rng = np.random.default_rng(seeds[0])
    order_rng = np.random.default_rng(seeds[1])
    worker_rngs = [np.random.default_rng(s) for s in seeds[2:]]

    if params is None:
        params = init_params(store.vocab.n_entities, store.vocab.n_relations, config.dim, init_rng)
    elif (params.n_entities, params.n_relations, params.dim) != (
        store.vocab.n_entities, store.vocab.n_relations, config.dim
    ):
        raise ValueError("initial params do not match store/config shapes")

    opt = LazyAdam(config.learning_rate, config.beta1, config.beta2, config.eps)
    history: list[float] = []
    for epoch in range(config.epochs):
        order = order_rng.permutation(len(store))
        if config.workers == 1:
            total, count = _run_batches(store, params, opt, config, order, worker_rngs[0])
        else:
            total, count = _train_parallel(store, params, opt, config, order, worker_rngs)
        mean = total / count
        history.append(mean)
        log.info("epoch %d mean loss %.6f", epoch, mean)
    if not params.is_finite():
        raise TrainingError(f"parameters became non-finite (learning_rate={config.learning_rate})")
    return TrainResult(params, history, config)


def _train_parallel(store, params, opt, config, order, rngs):
    shards = np.array_split(order, config.workers)
    results = [None] * config.workers
    errors = []
    lock = threading.Lock()

    def work(i):
        try:
            results[i] = _run_batches(store, params, opt, config, shards[i], rngs[i], lock)
        except Exception as exc:  # surfaced after join
            errors.append(exc)

    threads = [threading.Thread(target=work, args=(i,)) for i in range(config.workers)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    if errors:
        raise errors[0]
    return sum(r[0] for r in results), sum(r[1] for r in results)
