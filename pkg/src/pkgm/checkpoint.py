"""Binary checkpoint format for PKGM parameters.

Layout (all little-endian)::

    b"PKGM" | u32 version | u32 d | u32 |E| | u32 |R| | 16 bytes config hash (ascii)
    f64[|E|, d] entity table | f64[|R|, d] relation table | f64[|R|, d, d] matrices
    u32 n | n bytes of UTF-8 JSON metadata (vocabulary names, key relations)

The metadata block carries names so a served model can resolve queries by
name; it never contains triples.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kg import KeyRelationMap, Vocab
from .model import ModelParams

MAGIC = b"PKGM"
VERSION = 1
_HEADER = struct.Struct("<4sIIII16s")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: ModelParams
    config_hash: str = ""
    meta: dict = field(default_factory=dict)

    def vocab(self) -> Vocab | None:
        v = self.meta.get("vocab")
        if v is None:
            return None
        return Vocab(
            v["entities"], v["relations"], np.array(v["item_flags"], dtype=bool), v["categories"],
            {int(e): c for e, c in v["category_of"].items()},
        )

    def key_relations(self) -> KeyRelationMap | None:
        kr = self.meta.get("key_relations")
        if kr is None:
            return None
        return KeyRelationMap(kr["k"], {int(c): tuple(rs) for c, rs in kr["relations"].items()})


def build_meta(vocab: Vocab | None = None, key_map: KeyRelationMap | None = None, **extra) -> dict:
    meta = dict(extra)
    if vocab is not None:
        meta["vocab"] = {
            "entities": vocab.entity_names,
            "relations": vocab.relation_names,
            "item_flags": vocab.item_flags.astype(int).tolist(),
            "categories": vocab.category_names,
            "category_of": {str(e): c for e, c in sorted(vocab.category_of.items())},
        }
    if key_map is not None:
        meta["key_relations"] = {
            "k": key_map.k,
            "relations": {str(c): list(rs) for c, rs in sorted(key_map.relations.items())},
        }
    return meta


def save_checkpoint(params: ModelParams, path, config_hash: str = "", meta: dict | None = None) -> None:
    if not params.is_finite():
        raise CheckpointError("refusing to save non-finite parameters")
    tag = config_hash.encode("ascii")[:16].ljust(16, b"\0")
    blob = json.dumps(meta or {}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, params.dim, params.n_entities, params.n_relations, tag))
        for arr in (params.entity_emb, params.relation_emb, params.relation_mat):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)


def read_checkpoint(path, dim: int | None = None, n_entities: int | None = None,
                    n_relations: int | None = None) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, d, n_e, n_r, tag = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a PKGM checkpoint")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    for name, want, got in (("dim", dim, d), ("entity count", n_entities, n_e),
                            ("relation count", n_relations, n_r)):
        if want is not None and want != got:
            raise CheckpointError(f"{path}: shape mismatch, {name} is {got}, expected {want}")
    sizes = [n_e * d, n_r * d, n_r * d * d]
    offset = _HEADER.size
    arrays = []
    for size in sizes:
        end = offset + 8 * size
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated parameter tables")
        arrays.append(np.frombuffer(raw, dtype="<f8", count=size, offset=offset).astype(np.float64))
        offset = end
    if offset + 4 > len(raw):
        raise CheckpointError(f"{path}: truncated metadata length")
    (n_meta,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    if offset + n_meta != len(raw):
        raise CheckpointError(f"{path}: metadata size mismatch")
    try:
        meta = json.loads(raw[offset:].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt metadata") from exc
    params = ModelParams(arrays[0].reshape(n_e, d), arrays[1].reshape(n_r, d), arrays[2].reshape(n_r, d, d))
    return Checkpoint(params, tag.rstrip(b"\0").decode("ascii"), meta)


def load_checkpoint(path, dim: int | None = None, n_entities: int | None = None,
                    n_relations: int | None = None) -> ModelParams:
    return read_checkpoint(path, dim, n_entities, n_relations).params
