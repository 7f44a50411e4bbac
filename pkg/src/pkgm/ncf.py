"""Neural collaborative filtering (GMF + MLP towers) with optional PKGM item features.

Everything is plain numpy with hand-written backprop. The PKGM variant feeds
a frozen condensed service vector per item into the first MLP layer next to
the user and item embeddings; the GMF tower is identical in both variants.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .kg import SamplingError
from .optim import Adam

log = logging.getLogger(__name__)

VARIANTS = ("base", "pkgm-t", "pkgm-r", "pkgm-all")
LOG_EPS = 1e-12


class NcfConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NcfConfig:
    gmf_dim: int = 8
    mlp_dim: int = 32
    layers: tuple[int, ...] = (32, 16, 8)
    learning_rate: float = 1e-4
    batch_size: int = 256
    epochs: int = 30
    reg: float = 0.001
    neg_ratio: int = 4
    seed: int = 0
    variant: str = "base"
    # epochs without validation improvement before stopping; 0 trains all epochs
    patience: int = 0
    val_k: int = 10
    val_negatives: int = 100

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise NcfConfigError(f"variant must be one of {VARIANTS}")
        if not self.layers:
            raise NcfConfigError("need at least one MLP layer")

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class NcfParams:
    gmf_user: np.ndarray
    gmf_item: np.ndarray
    mlp_user: np.ndarray
    mlp_item: np.ndarray
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    fusion: np.ndarray
    feature_dim: int = 0
    activations: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.activations:
            self.activations = ("relu",) * len(self.weights)
        expect = 2 * self.mlp_user.shape[1] + self.feature_dim
        for w, b in zip(self.weights, self.biases):
            if w.shape[0] != expect or b.shape != (w.shape[1],):
                raise NcfConfigError(f"layer shapes do not chain: {w.shape} after width {expect}")
            expect = w.shape[1]
        if self.fusion.shape != (self.gmf_user.shape[1] + expect,):
            raise NcfConfigError("fusion vector must match GMF + MLP output widths")

    def as_dict(self) -> dict[str, np.ndarray]:
        d = {"gmf_user": self.gmf_user, "gmf_item": self.gmf_item,
             "mlp_user": self.mlp_user, "mlp_item": self.mlp_item, "fusion": self.fusion}
        for x, (w, b) in enumerate(zip(self.weights, self.biases)):
            d[f"W{x}"] = w
            d[f"b{x}"] = b
        return d

    @classmethod
    def from_dict(cls, d: dict[str, np.ndarray], feature_dim: int = 0) -> NcfParams:
        n = sum(1 for k in d if k.startswith("W"))
        return cls(d["gmf_user"], d["gmf_item"], d["mlp_user"], d["mlp_item"],
                   [d[f"W{x}"] for x in range(n)], [d[f"b{x}"] for x in range(n)], d["fusion"], feature_dim)


def init_ncf(n_users: int, n_items: int, config: NcfConfig, feature_dim: int = 0) -> NcfParams:
    # independent streams per block, so variants with different first-layer widths
    # still draw identical GMF tables
    ss = np.random.SeedSequence(config.seed).spawn(4)
    g_rng, m_rng, w_rng, h_rng = (np.random.default_rng(s) for s in ss)
    gmf_user = g_rng.normal(0, 0.01, (n_users, config.gmf_dim))
    gmf_item = g_rng.normal(0, 0.01, (n_items, config.gmf_dim))
    mlp_user = m_rng.normal(0, 0.01, (n_users, config.mlp_dim))
    mlp_item = m_rng.normal(0, 0.01, (n_items, config.mlp_dim))
    weights, biases = [], []
    width = 2 * config.mlp_dim + feature_dim
    for out in config.layers:
        limit = np.sqrt(6.0 / (width + out))
        weights.append(w_rng.uniform(-limit, limit, (width, out)))
        biases.append(np.zeros(out))
        width = out
    fan = config.gmf_dim + width
    fusion = h_rng.uniform(-np.sqrt(3.0 / fan), np.sqrt(3.0 / fan), fan)
    return NcfParams(gmf_user, gmf_item, mlp_user, mlp_item, weights, biases, fusion, feature_dim)


def _features(params: NcfParams, pkgm, n):
    if params.feature_dim == 0:
        if pkgm is not None:
            raise NcfConfigError("base-variant parameters cannot take PKGM features")
        return None
    if pkgm is None:
        raise NcfConfigError("PKGM-variant parameters need a PKGM feature vector")
    pkgm = np.asarray(pkgm, dtype=float).reshape(n, -1)
    if pkgm.shape[1] != params.feature_dim:
        raise NcfConfigError(f"feature width {pkgm.shape[1]} != {params.feature_dim}")
    return pkgm


def gmf_forward(params: NcfParams, u, i) -> np.ndarray:
    return params.gmf_user[u] * params.gmf_item[i]


def _mlp(params: NcfParams, u, i, pkgm):
    """Forward pass keeping pre-activations for backprop."""
    u = np.atleast_1d(u)
    i = np.atleast_1d(i)
    parts = [params.mlp_user[u], params.mlp_item[i]]
    feats = _features(params, pkgm, len(u))
    if feats is not None:
        parts.append(feats)
    z = np.concatenate(parts, axis=1)
    inputs, pre = [z], []
    for w, b in zip(params.weights, params.biases):
        a = z @ w + b
        z = np.maximum(a, 0.0)
        pre.append(a)
        inputs.append(z)
    return inputs, pre


def mlp_forward(params: NcfParams, u, i, pkgm=None) -> np.ndarray:
    scalar = np.ndim(u) == 0
    out = _mlp(params, u, i, pkgm)[0][-1]
    return out[0] if scalar else out


def _logit(params, u, i, pkgm):
    g = np.atleast_2d(gmf_forward(params, np.atleast_1d(u), np.atleast_1d(i)))
    m = _mlp(params, u, i, pkgm)[0][-1]
    return np.concatenate([g, m], axis=1) @ params.fusion


def predict(params: NcfParams, u, i, pkgm=None):
    """Interaction probability, clipped to ``[LOG_EPS, 1 - LOG_EPS]``."""
    scalar = np.ndim(u) == 0
    p = np.clip(expit(_logit(params, u, i, pkgm)), LOG_EPS, 1 - LOG_EPS)
    return float(p[0]) if scalar else p


def bce_loss(predictions, labels, eps: float = LOG_EPS) -> float:
    p = np.asarray(predictions, dtype=float)
    y = np.asarray(labels, dtype=float)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {y.shape}")
    p = np.clip(p, eps, 1 - eps)
    return float(-(y * np.log(p) + (1 - y) * np.log(1 - p)).sum())


def loss_and_grad(params: NcfParams, users, items, labels, pkgm=None, reg: float = 0.0):
    """Summed BCE plus ``reg * ||table||^2`` over the four embedding tables, and its gradient."""
    users = np.asarray(users)
    items = np.asarray(items)
    y = np.asarray(labels, dtype=float)
    pg, qg = params.gmf_user[users], params.gmf_item[items]
    phi_g = pg * qg
    inputs, pre = _mlp(params, users, items, pkgm)
    phi = np.concatenate([phi_g, inputs[-1]], axis=1)
    logit = phi @ params.fusion
    prob = expit(logit)
    loss = bce_loss(prob, y)
    tables = ("gmf_user", "gmf_item", "mlp_user", "mlp_item")
    p = params.as_dict()
    if reg:
        loss += reg * sum(float((p[t] ** 2).sum()) for t in tables)

    grads = {k: np.zeros_like(v) for k, v in p.items()}
    dlogit = prob - y
    grads["fusion"] = phi.T @ dlogit
    dphi = dlogit[:, None] * params.fusion[None, :]
    k = phi_g.shape[1]
    dphi_g, dz = dphi[:, :k], dphi[:, k:]
    np.add.at(grads["gmf_user"], users, dphi_g * qg)
    np.add.at(grads["gmf_item"], items, dphi_g * pg)
    for x in range(len(params.weights) - 1, -1, -1):
        da = dz * (pre[x] > 0)
        grads[f"W{x}"] = inputs[x].T @ da
        grads[f"b{x}"] = da.sum(axis=0)
        dz = da @ params.weights[x].T
    d = params.mlp_user.shape[1]
    np.add.at(grads["mlp_user"], users, dz[:, :d])
    np.add.at(grads["mlp_item"], items, dz[:, d:2 * d])
    if reg:
        for t in tables:
            grads[t] += 2 * reg * p[t]
    return loss, grads


@dataclass
class InteractionSet:
    """Implicit-feedback positives over dense user/item ids."""

    users: np.ndarray
    items: np.ndarray
    n_users: int
    n_items: int
    user_names: list[str] = field(default_factory=list)
    item_names: list[str] = field(default_factory=list)
    timestamps: np.ndarray | None = None

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        keys = self.users * self.n_items + self.items
        if len(np.unique(keys)) != len(keys):
            raise ValueError("duplicate interactions")
        self._keys = np.sort(keys)

    def __len__(self):
        return len(self.users)

    def contains(self, users, items) -> np.ndarray:
        keys = np.asarray(users, dtype=np.int64) * self.n_items + np.asarray(items, dtype=np.int64)
        if not len(self._keys):
            return np.zeros(keys.shape, dtype=bool)
        pos = np.minimum(np.searchsorted(self._keys, keys), len(self._keys) - 1)
        return self._keys[pos] == keys

    def by_user(self) -> list[np.ndarray]:
        order = np.argsort(self.users, kind="stable")
        split = np.searchsorted(self.users[order], np.arange(1, self.n_users))
        return [self.items[o] for o in np.split(order, split)]


def read_interactions(path) -> InteractionSet:
    """TSV ``user<TAB>item<TAB>timestamp``; ids by first appearance, duplicates dropped."""
    users: dict[str, int] = {}
    items: dict[str, int] = {}
    seen = set()
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected user, item, timestamp")
            u = users.setdefault(parts[0], len(users))
            i = items.setdefault(parts[1], len(items))
            if (u, i) in seen:
                continue
            seen.add((u, i))
            rows.append((u, i, float(parts[2])))
    arr = np.array(rows, dtype=float).reshape(-1, 3)
    return InteractionSet(arr[:, 0].astype(np.int64), arr[:, 1].astype(np.int64), len(users), len(items),
                          list(users), list(items), arr[:, 2])


def leave_one_out(data: InteractionSet) -> tuple[InteractionSet, dict[int, int]]:
    """Hold out each user's latest interaction (file order breaks timestamp ties).

    Users with a single interaction keep it in training and get no holdout.
    """
    ts = data.timestamps if data.timestamps is not None else np.arange(len(data), dtype=float)
    order = np.lexsort((np.arange(len(data)), ts))
    last: dict[int, int] = {}
    counts = np.bincount(data.users, minlength=data.n_users)
    for idx in order:
        last[int(data.users[idx])] = int(idx)
    held = {u: idx for u, idx in last.items() if counts[u] >= 2}
    keep = np.ones(len(data), dtype=bool)
    keep[list(held.values())] = False
    train = InteractionSet(data.users[keep], data.items[keep], data.n_users, data.n_items,
                           data.user_names, data.item_names, ts[keep])
    return train, {u: int(data.items[idx]) for u, idx in sorted(held.items())}


def sample_ncf_negatives(interactions: InteractionSet, ratio: int, rng: np.random.Generator,
                         max_rounds: int = 1000):
    """Positives plus ``ratio`` uniform unobserved items per positive.

    Returns ``(users, items, labels)``; each positive row is followed by its
    negatives.
    """
    if ratio < 1:
        raise ValueError("ratio must be >= 1")
    counts = np.bincount(interactions.users, minlength=interactions.n_users)
    if (counts >= interactions.n_items).any():
        u = int(np.flatnonzero(counts >= interactions.n_items)[0])
        raise SamplingError(f"user {u} interacted with every item; no negatives available")
    n = len(interactions)
    neg_users = np.repeat(interactions.users, ratio)
    neg_items = rng.integers(interactions.n_items, size=n * ratio)
    bad = np.flatnonzero(interactions.contains(neg_users, neg_items))
    rounds = 0
    while len(bad):
        rounds += 1
        if rounds > max_rounds:
            raise SamplingError("negative sampling did not converge")
        neg_items[bad] = rng.integers(interactions.n_items, size=len(bad))
        bad = bad[interactions.contains(neg_users[bad], neg_items[bad])]
    users = np.empty(n * (ratio + 1), dtype=np.int64)
    items = np.empty_like(users)
    labels = np.zeros(len(users))
    block = ratio + 1
    users[::block] = interactions.users
    items[::block] = interactions.items
    labels[::block] = 1.0
    for j in range(ratio):
        users[j + 1::block] = neg_users[j::ratio]
        items[j + 1::block] = neg_items[j::ratio]
    return users, items, labels


def pkgm_item_features(item_names, checkpoint, item_map: dict[str, str] | None, variant: str):
    """Condensed PKGM vector per item, masked for ``variant``.

    ``item_map`` maps interaction item names to KG entity names (identity when
    None). Items that cannot be resolved to a categorised KG entity get a zero
    vector; the returned boolean mask marks them.
    """
    from .adapters import condense, mask_condensed
    from .service import serve_bundle

    params = checkpoint.params
    vocab = checkpoint.vocab()
    key_map = checkpoint.key_relations()
    feats = np.zeros((len(item_names), 2 * params.dim))
    missing = np.ones(len(item_names), dtype=bool)
    for idx, name in enumerate(item_names):
        ent = item_map.get(name) if item_map is not None else name
        if ent is None or not vocab.has_entity(ent):
            continue
        eid = vocab.entity_id(ent)
        cat = vocab.category_of.get(eid)
        if cat is None or cat not in key_map or not key_map[cat]:
            continue
        feats[idx] = condense(serve_bundle(params, key_map, vocab, eid))
        missing[idx] = False
    return mask_condensed(feats, variant), missing


@dataclass
class NcfResult:
    params: NcfParams
    history: list[float]
    config: NcfConfig
    val_history: list[float] = field(default_factory=list)
    best_epoch: int | None = None


def split_validation(interactions: InteractionSet, seed: int = 0) -> tuple[InteractionSet, dict[int, int]]:
    """Move one random interaction per user (with at least two) into a validation map."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    keep = np.ones(len(interactions), dtype=bool)
    val = {}
    order = np.argsort(interactions.users, kind="stable")
    bounds = np.searchsorted(interactions.users[order], np.arange(interactions.n_users + 1))
    for u in range(interactions.n_users):
        rows = order[bounds[u]:bounds[u + 1]]
        if len(rows) < 2:
            continue
        pick = int(rows[rng.integers(len(rows))])
        keep[pick] = False
        val[u] = int(interactions.items[pick])
    ts = None if interactions.timestamps is None else interactions.timestamps[keep]
    train = InteractionSet(interactions.users[keep], interactions.items[keep], interactions.n_users,
                           interactions.n_items, interactions.user_names, interactions.item_names, ts)
    return train, val


def _validation_candidates(interactions, validation, n_neg, rng):
    per_user = interactions.by_user()
    users, items = [], []
    for u, held in sorted(validation.items()):
        seen = np.append(per_user[u], held)
        pool = np.setdiff1d(np.arange(interactions.n_items), seen)
        negs = rng.choice(pool, size=min(n_neg, len(pool)), replace=False)
        users.append(np.full(len(negs) + 1, u))
        items.append(np.concatenate([[held], negs]))
    return users, items


def _hit_rate(params, users, items, features, k):
    flat_i = np.concatenate(items)
    scores = predict(params, np.concatenate(users), flat_i, None if features is None else features[flat_i])
    hits, offset = 0, 0
    for c in items:
        s = scores[offset:offset + len(c)]
        hits += int(1 + np.sum(s[1:] >= s[0]) <= k)
        offset += len(c)
    return hits / len(items)


def train_ncf(interactions: InteractionSet, config: NcfConfig, features: np.ndarray | None = None,
              validation: dict[int, int] | None = None) -> NcfResult:
    """Mini-batch Adam on summed BCE with L2 on the embedding tables.

    ``features`` is an ``(n_items, f)`` table of frozen per-item inputs
    (required for the PKGM variants, ignored otherwise). With a
    ``validation`` map (user -> held-out item) the validation HR@``val_k`` is
    tracked each epoch and the best epoch's parameters are returned; training
    stops early after ``config.patience`` epochs without improvement.
    """
    if config.variant == "base":
        features = None
    elif features is None:
        raise NcfConfigError(f"variant {config.variant} needs item features")
    fdim = 0 if features is None else features.shape[1]
    params = init_ncf(interactions.n_users, interactions.n_items, config, fdim)
    tensors = params.as_dict()
    opt = Adam(tensors, config.learning_rate)
    # negative sampling and shuffling get their own stream, independent of init
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    val_cands = None
    if validation:
        val_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 4]))
        val_cands = _validation_candidates(interactions, validation, config.val_negatives, val_rng)
    history, val_history = [], []
    best, best_epoch, stale = -1.0, None, 0
    best_tensors = None
    step = 0
    for epoch in range(config.epochs):
        users, items, labels = sample_ncf_negatives(interactions, config.neg_ratio, rng)
        order = rng.permutation(len(users))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            feats = None if features is None else features[items[idx]]
            loss, grads = loss_and_grad(params, users[idx], items[idx], labels[idx], feats, config.reg)
            step += 1
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at step {step} (learning_rate={config.learning_rate})")
            opt.step(tensors, grads)
            total += loss
        history.append(total / len(order))
        log.info("ncf epoch %d mean loss %.6f", epoch, history[-1])
        if val_cands is not None:
            hr = _hit_rate(params, *val_cands, features, config.val_k)
            val_history.append(hr)
            if hr > best:
                best, best_epoch, stale = hr, epoch, 0
                best_tensors = {k: v.copy() for k, v in tensors.items()}
            else:
                stale += 1
                if config.patience and stale >= config.patience:
                    break
    if best_tensors is not None:
        params = NcfParams.from_dict(best_tensors, fdim)
    return NcfResult(params, history, config, val_history, best_epoch)


# Deterministic container: b"NCF1" | u32 n | JSON header (n bytes) | raw <f8 arrays in header order.

def save_ncf(path, params: NcfParams, config: NcfConfig, interactions: InteractionSet,
             features: np.ndarray | None) -> None:
    arrays = dict(params.as_dict())
    if features is not None:
        arrays["features"] = features
    header = {
        "config": asdict(config),
        "feature_dim": params.feature_dim,
        "users": interactions.user_names,
        "items": interactions.item_names,
        "arrays": [[k, list(v.shape)] for k, v in arrays.items()],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(b"NCF1" + struct.pack("<I", len(blob)) + blob)
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_ncf(path):
    """Returns ``(params, config, header, features)``."""
    raw = Path(path).read_bytes()
    if raw[:4] != b"NCF1" or len(raw) < 8:
        raise ValueError(f"{path}: not an NCF checkpoint")
    (n,) = struct.unpack_from("<I", raw, 4)
    header = json.loads(raw[8:8 + n].decode())
    offset = 8 + n
    arrays = {}
    for name, shape in header["arrays"]:
        size = int(np.prod(shape))
        if offset + 8 * size > len(raw):
            raise ValueError(f"{path}: truncated")
        arrays[name] = np.frombuffer(raw, "<f8", size, offset).reshape(shape).astype(float)
        offset += 8 * size
    cfg = dict(header["config"])
    cfg["layers"] = tuple(cfg["layers"])
    features = arrays.pop("features", None)
    return NcfParams.from_dict(arrays, header["feature_dim"]), NcfConfig(**cfg), header, features
