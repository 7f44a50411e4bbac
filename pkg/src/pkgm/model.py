"""PKGM parameters, score functions, margin loss and its analytic subgradient.

Two score terms share the entity and relation tables:

* triple term   ``||h + r - t||_1``
* relation term ``||M_r h - r||_1``

A triple's total score is their sum; training pushes positives below
corrupted triples by a margin.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ModelParams:
    entity_emb: np.ndarray
    relation_emb: np.ndarray
    relation_mat: np.ndarray

    def __post_init__(self):
        n_e, d = self.entity_emb.shape
        n_r, d_r = self.relation_emb.shape
        if d < 1 or d_r != d or self.relation_mat.shape != (n_r, d, d):
            raise ValueError(
                f"inconsistent shapes: entity {self.entity_emb.shape}, "
                f"relation {self.relation_emb.shape}, matrices {self.relation_mat.shape}"
            )

    @property
    def dim(self) -> int:
        return self.entity_emb.shape[1]

    @property
    def n_entities(self) -> int:
        return self.entity_emb.shape[0]

    @property
    def n_relations(self) -> int:
        return self.relation_emb.shape[0]

    def copy(self) -> ModelParams:
        return ModelParams(self.entity_emb.copy(), self.relation_emb.copy(), self.relation_mat.copy())

    def is_finite(self) -> bool:
        return bool(
            np.isfinite(self.entity_emb).all()
            and np.isfinite(self.relation_emb).all()
            and np.isfinite(self.relation_mat).all()
        )

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for arr in (self.entity_emb, self.relation_emb, self.relation_mat):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return (
            np.array_equal(self.entity_emb, other.entity_emb)
            and np.array_equal(self.relation_emb, other.relation_emb)
            and np.array_equal(self.relation_mat, other.relation_mat)
        )


def init_params(n_entities: int, n_relations: int, dim: int, rng: np.random.Generator,
                mat_noise: float = 0.01) -> ModelParams:
    """Uniform(+-6/sqrt(d)) embeddings; identity-plus-noise transfer matrices."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    bound = 6.0 / np.sqrt(dim)
    ent = rng.uniform(-bound, bound, size=(n_entities, dim))
    rel = rng.uniform(-bound, bound, size=(n_relations, dim))
    mats = np.eye(dim)[None, :, :] + mat_noise * rng.standard_normal((n_relations, dim, dim))
    return ModelParams(ent, rel, mats)


def _check_ids(params: ModelParams, h=None, r=None, t=None):
    for name, ids, bound in (("entity", h, params.n_entities), ("relation", r, params.n_relations),
                             ("entity", t, params.n_entities)):
        if ids is None:
            continue
        arr = np.asarray(ids)
        if arr.size and (arr.min() < 0 or arr.max() >= bound):
            raise IndexError(f"{name} id out of range [0, {bound})")


def score_triple(params: ModelParams, h, r, t):
    _check_ids(params, h, r, t)
    diff = params.entity_emb[h] + params.relation_emb[r] - params.entity_emb[t]
    return np.abs(diff).sum(axis=-1)


def relation_residual(params: ModelParams, h, r) -> np.ndarray:
    """``M_r h - r`` for scalar or array ids."""
    _check_ids(params, h, r)
    hv = params.entity_emb[h]
    return np.einsum("...ij,...j->...i", params.relation_mat[r], hv) - params.relation_emb[r]


def score_relation(params: ModelParams, h, r):
    return np.abs(relation_residual(params, h, r)).sum(axis=-1)


def score_total(params: ModelParams, h, r, t):
    return score_triple(params, h, r, t) + score_relation(params, h, r)


def hinge(positive_score, negative_score, margin):
    return np.maximum(positive_score + margin - negative_score, 0.0)


def _split(batch):
    arr = np.asarray(batch, dtype=np.int64)
    if arr.ndim == 2 and arr.shape == (2, 3):
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[1:] != (2, 3) or not len(arr):
        raise ValueError("batch must be a nonempty sequence of (positive, negative) triple pairs")
    return arr[:, 0], arr[:, 1]


def pair_losses(params: ModelParams, batch, margin: float) -> np.ndarray:
    pos, neg = _split(batch)
    fp = score_total(params, pos[:, 0], pos[:, 1], pos[:, 2])
    fn = score_total(params, neg[:, 0], neg[:, 1], neg[:, 2])
    return hinge(fp, fn, margin)


def batch_loss(params: ModelParams, batch, margin: float) -> float:
    """Summed hinge loss over ``(positive, negative)`` pairs."""
    return float(pair_losses(params, batch, margin).sum())


@dataclass
class SparseGrad:
    """Gradient restricted to the rows/matrices a batch touched.

    Ids are unique and sorted; ``*_grad`` rows align with them.
    """

    entity_ids: np.ndarray
    entity_grad: np.ndarray
    relation_ids: np.ndarray
    relation_grad: np.ndarray
    matrix_grad: np.ndarray  # aligned with relation_ids

    def to_dense(self, params: ModelParams) -> ModelParams:
        out = ModelParams(np.zeros_like(params.entity_emb), np.zeros_like(params.relation_emb),
                          np.zeros_like(params.relation_mat))
        out.entity_emb[self.entity_ids] = self.entity_grad
        out.relation_emb[self.relation_ids] = self.relation_grad
        out.relation_mat[self.relation_ids] = self.matrix_grad
        return out


def batch_grad(params: ModelParams, batch, margin: float) -> tuple[float, SparseGrad]:
    """Loss and subgradient of the summed hinge loss.

    Every entity and relation appearing in the batch gets a row, zero when all
    of its pairs already satisfy the margin. ``sign(0)`` is taken as 0.
    """
    pos, neg = _split(batch)
    ent, rel, mats = params.entity_emb, params.relation_emb, params.relation_mat

    def parts(tr):
        h, r, t = ent[tr[:, 0]], rel[tr[:, 1]], ent[tr[:, 2]]
        m = mats[tr[:, 1]]
        res_t = h + r - t
        res_r = np.einsum("bij,bj->bi", m, h) - r
        return h, m, res_t, res_r

    hp, mp, tp, rp = parts(pos)
    hn, mn, tn, rn = parts(neg)
    fp = np.abs(tp).sum(1) + np.abs(rp).sum(1)
    fn = np.abs(tn).sum(1) + np.abs(rn).sum(1)
    losses = np.maximum(fp + margin - fn, 0.0)
    active = (losses > 0).astype(float)[:, None]

    ent_ids, ent_inv = np.unique(np.concatenate([pos[:, 0], pos[:, 2], neg[:, 0], neg[:, 2]]),
                                 return_inverse=True)
    rel_ids, rel_inv = np.unique(np.concatenate([pos[:, 1], neg[:, 1]]), return_inverse=True)
    b = len(pos)
    ih_p, it_p, ih_n, it_n = ent_inv[:b], ent_inv[b:2 * b], ent_inv[2 * b:3 * b], ent_inv[3 * b:]
    ir_p, ir_n = rel_inv[:b], rel_inv[b:]

    g_ent = np.zeros((len(ent_ids), params.dim))
    g_rel = np.zeros((len(rel_ids), params.dim))
    g_mat = np.zeros((len(rel_ids), params.dim, params.dim))

    for sign, h, m, res_t, res_r, ih, it, ir in (
        (1.0, hp, mp, tp, rp, ih_p, it_p, ir_p),
        (-1.0, hn, mn, tn, rn, ih_n, it_n, ir_n),
    ):
        st = sign * active * np.sign(res_t)
        sr = sign * active * np.sign(res_r)
        np.add.at(g_ent, ih, st + np.einsum("bij,bi->bj", m, sr))
        np.add.at(g_ent, it, -st)
        np.add.at(g_rel, ir, st - sr)
        np.add.at(g_mat, ir, sr[:, :, None] * h[:, None, :])

    return float(losses.sum()), SparseGrad(ent_ids, g_ent, rel_ids, g_rel, g_mat)


def grad(params: ModelParams, pair, margin: float) -> SparseGrad:
    """Subgradient of the hinge loss for a single ``(positive, negative)`` pair."""
    return batch_grad(params, [pair], margin)[1]
