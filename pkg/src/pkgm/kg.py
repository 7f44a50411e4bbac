"""Triple storage, vocabularies, rare-relation filtering and key-relation selection."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class ParseError(ValueError):
    def __init__(self, path, line: int, message: str):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class EmptyInputError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


class SamplingError(RuntimeError):
    pass


@dataclass
class Vocab:
    entity_names: list[str]
    relation_names: list[str]
    item_flags: np.ndarray
    category_names: list[str] = field(default_factory=list)
    category_of: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        self.item_flags = np.asarray(self.item_flags, dtype=bool)
        if len(self.item_flags) != len(self.entity_names):
            raise ValueError("item_flags length must equal the entity count")
        self._entity_index = {n: i for i, n in enumerate(self.entity_names)}
        self._relation_index = {n: i for i, n in enumerate(self.relation_names)}
        self._category_index = {n: i for i, n in enumerate(self.category_names)}

    @property
    def n_entities(self) -> int:
        return len(self.entity_names)

    @property
    def n_relations(self) -> int:
        return len(self.relation_names)

    def entity_id(self, name: str) -> int:
        return self._entity_index[name]

    def relation_id(self, name: str) -> int:
        return self._relation_index[name]

    def category_id(self, name: str) -> int:
        return self._category_index[name]

    def has_entity(self, name: str) -> bool:
        return name in self._entity_index

    def has_relation(self, name: str) -> bool:
        return name in self._relation_index

    def items(self) -> np.ndarray:
        return np.flatnonzero(self.item_flags)

    def __eq__(self, other):
        if not isinstance(other, Vocab):
            return NotImplemented
        return (
            self.entity_names == other.entity_names
            and self.relation_names == other.relation_names
            and np.array_equal(self.item_flags, other.item_flags)
            and self.category_names == other.category_names
            and self.category_of == other.category_of
        )


class TripleStore:
    """Deduplicated integer triples plus the vocabulary they index into.

    The store is read-only after construction: the triple array is flagged
    non-writeable and the adjacency index is built once.
    """

    def __init__(self, triples, vocab: Vocab):
        triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        if len(triples):
            if triples.min() < 0:
                raise ValueError("negative id in triples")
            if triples[:, [0, 2]].max() >= vocab.n_entities:
                raise ValueError("entity id out of vocabulary range")
            if triples[:, 1].max() >= vocab.n_relations:
                raise ValueError("relation id out of vocabulary range")
        keys = self._encode(triples, vocab.n_entities, vocab.n_relations)
        _, first = np.unique(keys, return_index=True)
        if len(first) != len(triples):
            triples = triples[np.sort(first)]
            keys = self._encode(triples, vocab.n_entities, vocab.n_relations)
        triples.setflags(write=False)
        self.triples = triples
        self.vocab = vocab
        self._keys = np.sort(keys)
        self._key_set = set(keys.tolist())
        self.relation_counts = np.bincount(triples[:, 1], minlength=vocab.n_relations)
        self.adjacency: dict[int, dict[int, frozenset[int]]] = {}
        tmp: dict[int, dict[int, set[int]]] = {}
        for h, r, t in triples.tolist():
            tmp.setdefault(h, {}).setdefault(r, set()).add(t)
        for h, rels in tmp.items():
            self.adjacency[h] = {r: frozenset(ts) for r, ts in rels.items()}

    @staticmethod
    def _encode(triples, n_entities, n_relations):
        triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        return (triples[:, 0] * n_relations + triples[:, 1]) * n_entities + triples[:, 2]

    def __len__(self):
        return len(self.triples)

    def __contains__(self, triple) -> bool:
        h, r, t = (int(x) for x in triple)
        return ((h * self.vocab.n_relations + r) * self.vocab.n_entities + t) in self._key_set

    def contains_many(self, triples) -> np.ndarray:
        keys = self._encode(triples, self.vocab.n_entities, self.vocab.n_relations)
        pos = np.searchsorted(self._keys, keys)
        pos = np.minimum(pos, max(len(self._keys) - 1, 0))
        if not len(self._keys):
            return np.zeros(len(keys), dtype=bool)
        return self._keys[pos] == keys

    def tails(self, h: int, r: int) -> frozenset[int]:
        return self.adjacency.get(int(h), {}).get(int(r), frozenset())

    def relations_of(self, h: int) -> set[int]:
        return set(self.adjacency.get(int(h), {}))

    def fingerprint(self) -> str:
        import hashlib

        digest = hashlib.sha256()
        digest.update(np.ascontiguousarray(self.triples, dtype="<u4").tobytes())
        for names in (self.vocab.entity_names, self.vocab.relation_names):
            digest.update("\n".join(names).encode())
        return digest.hexdigest()[:16]

    def __eq__(self, other):
        if not isinstance(other, TripleStore):
            return NotImplemented
        return self.vocab == other.vocab and np.array_equal(self.triples, other.triples)


@dataclass(frozen=True)
class KeyRelationMap:
    k: int
    relations: dict[int, tuple[int, ...]]

    def __getitem__(self, category: int) -> tuple[int, ...]:
        return self.relations[category]

    def __contains__(self, category) -> bool:
        return category in self.relations


def _read_rows(path: Path, fmt: str, width: int):
    if fmt not in ("tsv", "csv"):
        raise ValueError(f"unknown triple format {fmt!r}")
    delimiter = "\t" if fmt == "tsv" else ","
    with open(path, encoding="utf-8", newline="") as fh:
        if fmt == "csv":
            lines = enumerate(csv.reader(fh), start=1)
        else:
            lines = ((i, line.rstrip("\r\n").split(delimiter)) for i, line in enumerate(fh, start=1))
        for lineno, parts in lines:
            if not parts or parts == [""]:
                continue
            if len(parts) != width or any(p == "" for p in parts):
                raise ParseError(path, lineno, f"expected {width} non-empty fields, got {len(parts)}")
            yield lineno, parts


def ingest(path, categories=None, fmt: str = "tsv") -> TripleStore:
    """Read a triple file (and optional ``entity<TAB>category`` sidecar) into a store.

    Ids are handed out by first appearance: entities as head then tail on each
    line, then any categorised entity not seen in a triple.
    """
    path = Path(path)
    entities: dict[str, int] = {}
    relations: dict[str, int] = {}
    rows = []
    for _, (h, r, t) in _read_rows(path, fmt, 3):
        hi = entities.setdefault(h, len(entities))
        ri = relations.setdefault(r, len(relations))
        ti = entities.setdefault(t, len(entities))
        rows.append((hi, ri, ti))
    if not rows:
        raise EmptyInputError(f"{path}: no triples")

    category_names: dict[str, int] = {}
    category_of: dict[int, int] = {}
    if categories is not None:
        for lineno, (name, cat) in _read_rows(Path(categories), "tsv", 2):
            eid = entities.setdefault(name, len(entities))
            cid = category_names.setdefault(cat, len(category_names))
            if category_of.get(eid, cid) != cid:
                raise ParseError(categories, lineno, f"entity {name!r} has two categories")
            category_of[eid] = cid
    flags = np.zeros(len(entities), dtype=bool)
    flags[list(category_of)] = True
    vocab = Vocab(list(entities), list(relations), flags, list(category_names), category_of)
    return TripleStore(np.array(rows, dtype=np.int64), vocab)


def write_tsv(store: TripleStore, path, categories=None) -> None:
    names = store.vocab.entity_names
    rels = store.vocab.relation_names
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for h, r, t in store.triples.tolist():
            fh.write(f"{names[h]}\t{rels[r]}\t{names[t]}\n")
    if categories is not None:
        cats = store.vocab.category_names
        with open(categories, "w", encoding="utf-8", newline="") as fh:
            for eid in sorted(store.vocab.category_of):
                fh.write(f"{names[eid]}\t{cats[store.vocab.category_of[eid]]}\n")


def filter_rare_relations(store: TripleStore, min_count: int) -> TripleStore:
    """Drop every triple whose relation occurs fewer than ``min_count`` times.

    Relation ids are re-compacted in their original order. Entities survive if
    they still appear in a triple or are items.
    """
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    keep_rel = store.relation_counts >= min_count
    if keep_rel.all():
        return store
    vocab = store.vocab
    mask = keep_rel[store.triples[:, 1]]
    triples = store.triples[mask]
    if not len(triples):
        warnings.warn(f"all relations occur fewer than {min_count} times; store is empty", stacklevel=2)

    rel_map = np.cumsum(keep_rel) - 1
    used = np.zeros(vocab.n_entities, dtype=bool)
    used[triples[:, 0]] = True
    used[triples[:, 2]] = True
    keep_ent = used | vocab.item_flags
    ent_map = np.cumsum(keep_ent) - 1

    new_triples = np.stack(
        [ent_map[triples[:, 0]], rel_map[triples[:, 1]], ent_map[triples[:, 2]]], axis=1
    )
    new_vocab = Vocab(
        [n for n, k in zip(vocab.entity_names, keep_ent) if k],
        [n for n, k in zip(vocab.relation_names, keep_rel) if k],
        vocab.item_flags[keep_ent],
        list(vocab.category_names),
        {int(ent_map[e]): c for e, c in vocab.category_of.items()},
    )
    return TripleStore(new_triples, new_vocab)


def select_key_relations(store: TripleStore, k: int = 10) -> KeyRelationMap:
    """Per category, the ``k`` relations held by the most items of that category.

    A relation counts once per item that heads at least one triple with it.
    Ties go to the lower relation id.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    vocab = store.vocab
    for eid in vocab.items().tolist():
        if eid not in vocab.category_of:
            raise ConfigurationError(f"item {vocab.entity_names[eid]!r} has no category")

    n_cat = len(vocab.category_names)
    usage = np.zeros((n_cat, vocab.n_relations), dtype=np.int64)
    for h, rels in store.adjacency.items():
        cat = vocab.category_of.get(h)
        if cat is None or not vocab.item_flags[h]:
            continue
        usage[cat, list(rels)] += 1

    out = {}
    for cat in range(n_cat):
        observed = np.flatnonzero(usage[cat])
        order = sorted(observed.tolist(), key=lambda r: (-usage[cat, r], r))
        out[cat] = tuple(order[:k])
    return KeyRelationMap(k, out)


def sample_negative(store: TripleStore, triple, rng: np.random.Generator, max_retries: int = 100):
    """Corrupt one uniformly chosen slot of ``triple`` until it is not in ``store``."""
    n_ent, n_rel = store.vocab.n_entities, store.vocab.n_relations
    if n_ent < 2 or n_rel < 2:
        raise SamplingError("vocabulary sizes must be >= 2 for corruption")
    h, r, t = (int(x) for x in triple)
    for _ in range(max_retries):
        slot = int(rng.integers(3))
        if slot == 1:
            cand = (h, int(rng.integers(n_rel)), t)
        else:
            e = int(rng.integers(n_ent))
            cand = (e, r, t) if slot == 0 else (h, r, e)
        if cand not in store:
            return cand
    raise SamplingError(f"no valid corruption of {(h, r, t)} after {max_retries} draws")


def sample_negatives(store: TripleStore, triples, rng: np.random.Generator, max_retries: int = 100):
    """Vectorised ``sample_negative`` over a batch.

    Returns the corrupted triples and the slot (0 head, 1 relation, 2 tail)
    each one ended up corrupting.
    """
    n_ent, n_rel = store.vocab.n_entities, store.vocab.n_relations
    if n_ent < 2 or n_rel < 2:
        raise SamplingError("vocabulary sizes must be >= 2 for corruption")
    pos = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    out = pos.copy()
    slots = np.zeros(len(pos), dtype=np.int64)
    pending = np.arange(len(pos))
    for _ in range(max_retries):
        if not len(pending):
            return out, slots
        slot = rng.integers(3, size=len(pending))
        ent = rng.integers(n_ent, size=len(pending))
        rel = rng.integers(n_rel, size=len(pending))
        cand = pos[pending].copy()
        cand[slot == 0, 0] = ent[slot == 0]
        cand[slot == 1, 1] = rel[slot == 1]
        cand[slot == 2, 2] = ent[slot == 2]
        bad = store.contains_many(cand)
        out[pending] = cand
        slots[pending] = slot
        pending = pending[bad]
    if len(pending):
        raise SamplingError(f"{len(pending)} triples had no valid corruption after {max_retries} draws")
    return out, slots


# Prepared-directory format: vocab.tsv, triples.bin, key_relations.tsv.

def save_prepared(store: TripleStore, key_map: KeyRelationMap, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab = store.vocab
    with open(out / "vocab.tsv", "w", encoding="utf-8", newline="") as fh:
        for i, name in enumerate(vocab.entity_names):
            cat = vocab.category_of.get(i)
            cname = vocab.category_names[cat] if cat is not None else ""
            fh.write(f"E\t{i}\t{name}\t{cname}\n")
        for i, name in enumerate(vocab.relation_names):
            fh.write(f"R\t{i}\t{name}\t\n")
        for i, name in enumerate(vocab.category_names):
            fh.write(f"C\t{i}\t{name}\t\n")
    with open(out / "triples.bin", "wb") as fh:
        fh.write(np.ascontiguousarray(store.triples, dtype="<u4").tobytes())
    with open(out / "key_relations.tsv", "w", encoding="utf-8", newline="") as fh:
        for cat in sorted(key_map.relations):
            row = [vocab.category_names[cat]] + [vocab.relation_names[r] for r in key_map.relations[cat]]
            fh.write("\t".join(row) + "\n")
    (out / "k").write_text(f"{key_map.k}\n")


def load_prepared(data_dir) -> tuple[TripleStore, KeyRelationMap]:
    data = Path(data_dir)
    entities, relations, categories = [], [], []
    entity_cat: list[str] = []
    with open(data / "vocab.tsv", encoding="utf-8", newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\r\n").split("\t")
            if len(parts) != 4 or parts[0] not in ("E", "R", "C") or int(parts[1]) != {
                "E": len(entities), "R": len(relations), "C": len(categories)
            }[parts[0]]:
                raise ParseError(data / "vocab.tsv", lineno, "bad vocabulary row")
            if parts[0] == "E":
                entities.append(parts[2])
                entity_cat.append(parts[3])
            elif parts[0] == "R":
                relations.append(parts[2])
            else:
                categories.append(parts[2])
    cat_index = {c: i for i, c in enumerate(categories)}
    category_of = {i: cat_index[c] for i, c in enumerate(entity_cat) if c}
    flags = np.array([bool(c) for c in entity_cat], dtype=bool)
    vocab = Vocab(entities, relations, flags, categories, category_of)

    raw = (data / "triples.bin").read_bytes()
    if len(raw) % 12:
        raise ParseError(data / "triples.bin", 0, "length is not a multiple of 12 bytes")
    triples = np.frombuffer(raw, dtype="<u4").reshape(-1, 3).astype(np.int64)
    store = TripleStore(triples, vocab)

    k_path = data / "k"
    key_rel: dict[int, tuple[int, ...]] = {}
    with open(data / "key_relations.tsv", encoding="utf-8", newline="") as fh:
        for line in fh:
            parts = line.rstrip("\r\n").split("\t")
            key_rel[cat_index[parts[0]]] = tuple(vocab.relation_id(p) for p in parts[1:] if p)
    k = int(k_path.read_text()) if k_path.exists() else max((len(v) for v in key_rel.values()), default=0)
    return store, KeyRelationMap(k, key_rel)
