"""Feeding service bundles into downstream embedding models."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .service import ServiceBundle


class AdapterError(ValueError):
    pass


class SequenceAppender:
    """Appends a bundle's 2k vectors to an input embedding sequence.

    ``projection`` (shape ``(d, input_dim)``) bridges a bundle dimension that
    differs from the consumer's; it belongs to the consumer and is only
    applied here.
    """

    def __init__(self, projection: np.ndarray | None = None):
        self.projection = None if projection is None else np.asarray(projection, dtype=float)

    def __call__(self, embeddings, bundle: ServiceBundle) -> np.ndarray:
        seq = np.asarray(embeddings, dtype=float)
        if seq.ndim != 2 or not len(seq):
            raise AdapterError("input sequence must be a nonempty (N, dim) array")
        if bundle.k == 0:
            return seq.copy()
        extra = bundle.vectors()
        if self.projection is not None:
            if self.projection.shape != (bundle.dim, seq.shape[1]):
                raise AdapterError(
                    f"projection shape {self.projection.shape} does not map {bundle.dim} -> {seq.shape[1]}"
                )
            extra = extra @ self.projection
        elif bundle.dim != seq.shape[1]:
            raise AdapterError(f"bundle dim {bundle.dim} != input dim {seq.shape[1]} and no projection")
        return np.concatenate([seq, extra], axis=0)


def append_sequence(embeddings, bundle: ServiceBundle, projection=None) -> np.ndarray:
    return SequenceAppender(projection)(embeddings, bundle)


def condense(bundle: ServiceBundle) -> np.ndarray:
    """Average of ``[S_j; S_{j+k}]`` over the bundle's k relations (length 2d)."""
    if bundle.k == 0:
        raise AdapterError("cannot condense an empty bundle")
    pairs = np.concatenate([bundle.triple_vectors, bundle.relation_vectors], axis=1)
    return pairs.mean(axis=0)


def concat_single(entity_emb, condensed) -> np.ndarray:
    return np.concatenate([np.asarray(entity_emb, dtype=float), np.asarray(condensed, dtype=float)])


def mask_condensed(condensed: np.ndarray, variant: str) -> np.ndarray:
    """Zero one half of condensed vectors for the triple-only / relation-only variants."""
    out = np.array(condensed, dtype=float, copy=True)
    d = out.shape[-1] // 2
    if variant == "pkgm-t":
        out[..., d:] = 0.0
    elif variant == "pkgm-r":
        out[..., :d] = 0.0
    elif variant not in ("pkgm-all", "base"):
        raise ValueError(f"unknown variant {variant!r}")
    return out


def read_bundle_tsv(path) -> dict[str, ServiceBundle]:
    """Parse ``T|rel|entity`` / ``R|rel|entity`` vector rows into bundles keyed by entity.

    Relation names stand in for ids (the bundle's ``key_relations`` are
    positions); triple and relation rows must list the same relations in the
    same order.
    """
    rows: dict[str, dict[str, list]] = {}
    order: list[str] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line:
                continue
            tag, *vals = line.split("\t")
            parts = tag.split("|", 2)
            if len(parts) != 3 or parts[0] not in ("T", "R") or not vals:
                raise AdapterError(f"{path}:{lineno}: bad bundle row tag {tag!r}")
            kind, rel, ent = parts
            if ent not in rows:
                rows[ent] = {"T": [], "R": []}
                order.append(ent)
            rows[ent][kind].append((rel, [float(v) for v in vals]))
    out = {}
    for ent in order:
        t, r = rows[ent]["T"], rows[ent]["R"]
        if [x[0] for x in t] != [x[0] for x in r]:
            raise AdapterError(f"{path}: entity {ent!r} has mismatched triple/relation rows")
        out[ent] = ServiceBundle(
            -1, tuple(range(len(t))), np.array([x[1] for x in t]), np.array([x[1] for x in r])
        )
    return out


def condense_file(bundles_path, out_path) -> int:
    bundles = read_bundle_tsv(bundles_path)
    with open(out_path, "w", encoding="utf-8") as fh:
        for ent, b in bundles.items():
            fh.write("\t".join([ent] + [format(float(v), ".9g") for v in condense(b)]) + "\n")
    return len(bundles)


def load_condensed_tsv(path) -> dict[str, np.ndarray]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line:
            name, *vals = line.split("\t")
            out[name] = np.array([float(v) for v in vals])
    return out
