"""Evaluation protocols: filtered link prediction, relation existence, leave-one-out ranking."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .kg import TripleStore
from .model import ModelParams, score_relation
from .ncf import InteractionSet, NcfParams, leave_one_out, predict


class EvaluationError(ValueError):
    pass


class KeyMismatchError(EvaluationError):
    pass


_UNIT_PREFIXES = ("hit@", "hr@", "ndcg@", "auc", "mrr")


@dataclass
class EvalReport:
    metrics: dict[str, float]
    config_hash: str = ""
    seed: int | None = None
    dataset: str = ""
    wall_time: float = 0.0
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, value in self.metrics.items():
            if name.lower().startswith(_UNIT_PREFIXES) and not (0.0 <= value <= 1.0):
                raise EvaluationError(f"metric {name}={value} outside [0, 1]")

    def to_dict(self, include_timing: bool = False) -> dict:
        out = {
            "metrics": {k: float(v) for k, v in self.metrics.items()},
            "config_hash": self.config_hash,
            "seed": self.seed,
            "dataset": self.dataset,
            "info": self.info,
        }
        if include_timing:
            out["wall_time"] = self.wall_time
        return out

    def to_json(self, include_timing: bool = False) -> str:
        return json.dumps(self.to_dict(include_timing), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> EvalReport:
        return cls(d["metrics"], d.get("config_hash", ""), d.get("seed"), d.get("dataset", ""),
                   d.get("wall_time", 0.0), d.get("info", {}))


def _known_tails(*sources) -> dict[tuple[int, int], set[int]]:
    known: dict[tuple[int, int], set[int]] = {}
    for src in sources:
        rows = src.triples if isinstance(src, TripleStore) else np.asarray(src).reshape(-1, 3)
        for h, r, t in rows.tolist():
            known.setdefault((h, r), set()).add(t)
    return known


def rank_tails(params: ModelParams, test, known: dict | None = None, chunk: int = 256) -> np.ndarray:
    """Rank of each true tail by ascending ``||h + r - e||_1`` over all entities.

    Ties count against the true tail. With ``known``, other true tails of the
    same ``(h, r)`` are removed before ranking.
    """
    test = np.asarray(test, dtype=np.int64).reshape(-1, 3)
    ranks = np.empty(len(test), dtype=np.int64)
    ent = params.entity_emb
    for start in range(0, len(test), chunk):
        block = test[start:start + chunk]
        q = ent[block[:, 0]] + params.relation_emb[block[:, 1]]
        dist = np.abs(q[:, None, :] - ent[None, :, :]).sum(axis=2)
        for row, (h, r, t) in enumerate(block.tolist()):
            d = dist[row]
            beats = d <= d[t]
            beats[t] = False
            if known is not None:
                others = [e for e in known.get((h, r), ()) if e != t]
                beats[others] = False
            ranks[start + row] = 1 + int(beats.sum())
    return ranks


def eval_link_prediction(params: ModelParams, test, filter_store: TripleStore | None = None,
                         filtered: bool = True, allow_overlap: bool = False,
                         ks=(1, 3, 10)) -> EvalReport:
    """Filtered Hit@k, mean rank and MRR for tail prediction.

    ``filter_store`` holds the training triples. Known-true tails from it and
    from the test set itself are filtered; test triples that also appear in
    it are rejected unless ``allow_overlap``.
    """
    t0 = time.perf_counter()
    test = np.asarray(test, dtype=np.int64).reshape(-1, 3)
    if not len(test):
        raise EvaluationError("empty test set")
    if filter_store is not None and not allow_overlap:
        overlap = filter_store.contains_many(test)
        if overlap.any():
            raise EvaluationError(f"{int(overlap.sum())} test triples also appear in the training store")
    known = None
    if filtered:
        known = _known_tails(test) if filter_store is None else _known_tails(filter_store, test)
    ranks = rank_tails(params, test, known)
    metrics = {f"hit@{k}": float(np.mean(ranks <= k)) for k in ks}
    metrics["mean_rank"] = _mean(ranks)
    metrics["mrr"] = _mean(1.0 / ranks)
    return EvalReport(metrics, wall_time=time.perf_counter() - t0,
                      info={"n_test": int(len(test)), "filtered": filtered})


def auc(positive_scores, negative_scores) -> float:
    """Probability a positive outscores a negative, ties counting one half."""
    pos = np.asarray(positive_scores, dtype=float)
    neg = np.asarray(negative_scores, dtype=float)
    if not len(pos) or not len(neg):
        raise EvaluationError("AUC needs nonempty positive and negative sets")
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[:len(pos)].sum() - len(pos) * (len(pos) + 1) / 2
    return float(u / (len(pos) * len(neg)))


def eval_relation_existence(params: ModelParams, positive_pairs, negative_pairs) -> EvalReport:
    t0 = time.perf_counter()
    pos = np.asarray(positive_pairs, dtype=np.int64).reshape(-1, 2)
    neg = np.asarray(negative_pairs, dtype=np.int64).reshape(-1, 2)
    if not len(pos) or not len(neg):
        raise EvaluationError("relation-existence evaluation needs both pair sets")
    norm_pos = score_relation(params, pos[:, 0], pos[:, 1])
    norm_neg = score_relation(params, neg[:, 0], neg[:, 1])
    metrics = {
        "auc": auc(-norm_pos, -norm_neg),
        "mean_norm_pos": float(norm_pos.mean()),
        "mean_norm_neg": float(norm_neg.mean()),
    }
    metrics["norm_gap"] = metrics["mean_norm_neg"] - metrics["mean_norm_pos"]
    return EvalReport(metrics, wall_time=time.perf_counter() - t0,
                      info={"n_pos": int(len(pos)), "n_neg": int(len(neg))})


def holdout_rank(pos_score: float, neg_scores) -> int:
    """1 + number of negatives scoring at least as high (pessimistic ties)."""
    return 1 + int(np.sum(np.asarray(neg_scores) >= pos_score))


def _mean(values) -> float:
    # correctly rounded, so the result does not depend on input order
    return math.fsum(values) / len(values)


def ranking_metrics(ranks, ks=(1, 3, 5, 10, 30)) -> dict[str, float]:
    ranks = np.asarray(ranks)
    out = {}
    for k in ks:
        out[f"hr@{k}"] = float(np.mean(ranks <= k))
    for k in ks:
        gains = np.where(ranks <= k, 1.0 / np.log2(ranks + 1.0), 0.0)
        out[f"ndcg@{k}"] = _mean(gains)
    return out


def eval_recommendation(params: NcfParams, interactions: InteractionSet, features: np.ndarray | None = None,
                        n_negatives: int = 100, ks=(1, 3, 5, 10, 30), seed: int = 0) -> EvalReport:
    """Leave-one-out HR@k / NDCG@k against ``n_negatives`` sampled unobserved items.

    ``interactions`` is the full set; each user's latest interaction is the
    held-out positive. Users with fewer than two interactions are skipped.
    """
    t0 = time.perf_counter()
    _, holdout = leave_one_out(interactions)
    if not holdout:
        raise EvaluationError("no user has a held-out interaction")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    per_user = interactions.by_user()
    all_items = np.arange(interactions.n_items)
    users, cands = [], []
    for u, held in holdout.items():
        pool = np.setdiff1d(all_items, per_user[u], assume_unique=False)
        negs = rng.choice(pool, size=min(n_negatives, len(pool)), replace=False)
        users.append(np.full(len(negs) + 1, u))
        cands.append(np.concatenate([[held], negs]))
    flat_u = np.concatenate(users)
    flat_i = np.concatenate(cands)
    feats = None if features is None else features[flat_i]
    scores = predict(params, flat_u, flat_i, feats)
    ranks = []
    offset = 0
    for c in cands:
        s = scores[offset:offset + len(c)]
        ranks.append(holdout_rank(s[0], s[1:]))
        offset += len(c)
    metrics = ranking_metrics(ranks, ks)
    skipped = interactions.n_users - len(holdout)
    return EvalReport(metrics, seed=seed, wall_time=time.perf_counter() - t0,
                      info={"n_users": len(holdout), "skipped_users": skipped, "n_negatives": n_negatives})


def compare_runs(reports: list[EvalReport], names: list[str] | None = None) -> tuple[str, str]:
    """Aligned text table and TSV of every run's metrics with deltas against the first."""
    names = names or [f"run{i}" for i in range(len(reports))]
    keys = _check_keys(reports, names)
    base = reports[0].metrics
    header = ["run"] + keys + [f"delta_{k}" for k in keys]
    rows = []
    for name, rep in zip(names, reports):
        vals = [rep.metrics[k] for k in keys]
        deltas = [rep.metrics[k] - base[k] for k in keys]
        rows.append([name] + [f"{v:.4f}" for v in vals] + [f"{d:+.4f}" for d in deltas])
    tsv = "\n".join("\t".join(r) for r in [header] + rows) + "\n"
    widths = [max(len(r[c]) for r in [header] + rows) for c in range(len(header))]
    text = "\n".join("  ".join(cell.rjust(w) for cell, w in zip(r, widths)) for r in [header] + rows) + "\n"
    return text, tsv


def _check_keys(reports, names):
    if not reports:
        raise EvaluationError("nothing to compare")
    keys = list(reports[0].metrics)
    for name, rep in zip(names, reports):
        if set(rep.metrics) != set(keys):
            missing = set(keys) ^ set(rep.metrics)
            raise KeyMismatchError(f"{name}: metric keys differ ({sorted(missing)})")
    return keys


def comparison_deltas(reports: list[EvalReport]) -> list[dict[str, float]]:
    _check_keys(reports, [f"run{i}" for i in range(len(reports))])
    base = reports[0].metrics
    return [{k: rep.metrics[k] - base[k] for k in base} for rep in reports]
