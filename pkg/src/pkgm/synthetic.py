"""Synthetic product KGs with planted structure, plus matching interaction logs.

Items fall into categories (which decide the relations an item has) and
latent clusters (which decide the tails). For relation ``r`` each cluster maps
to one value entity from ``r``'s value pool, so every item of a cluster
shares its attribute values. A held-out attribute of an item is therefore
predictable from its other attributes, which is what link prediction
measures. Relations outside an item's category never occur for it, which is
what relation-existence evaluation measures.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticKgSpec:
    n_entities: int = 500
    n_relations: int = 12
    n_items: int = 400
    n_categories: int = 4
    relations_per_category: int = 6
    n_clusters: int = 10
    # probability the tail follows the cluster rule rather than a random pool value
    consistency: float | tuple[float, ...] = 1.0
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        for name in ("n_entities", "n_relations", "n_items", "n_categories",
                     "relations_per_category", "n_clusters"):
            if getattr(self, name) < 1:
                raise SpecError(f"{name} must be positive")
        if not 0 <= self.noise < 1:
            raise SpecError("noise must be in [0, 1)")
        if self.relations_per_category > self.n_relations:
            raise SpecError("more planted relations per category than relations")
        n_values = self.n_entities - self.n_items
        if n_values < 2 * self.n_relations:
            raise SpecError("need at least two value entities per relation")
        if -(-n_values // self.n_relations) > self.n_clusters:
            raise SpecError("value pools larger than n_clusters would leave values unused")
        if self.n_items < self.n_categories * self.n_clusters:
            raise SpecError("too few items to populate every category/cluster cell")
        cons = self.consistency_of()
        if len(cons) != self.n_relations or any(not 0 <= c <= 1 for c in cons):
            raise SpecError("consistency must be a probability, scalar or per relation")

    def consistency_of(self) -> tuple[float, ...]:
        if isinstance(self.consistency, (int, float)):
            return (float(self.consistency),) * self.n_relations
        return tuple(float(c) for c in self.consistency)

    @classmethod
    def from_json(cls, path) -> SyntheticKgSpec:
        data = json.loads(Path(path).read_text())
        if isinstance(data.get("consistency"), list):
            data["consistency"] = tuple(data["consistency"])
        return cls(**data)


@dataclass
class SyntheticKg:
    spec: SyntheticKgSpec
    triples: list[tuple[str, str, str]]
    categories: dict[str, str]
    manifest: dict

    def planted(self) -> list[tuple[str, str, str]]:
        """Triples whose tail follows the cluster rule and was not noised."""
        return [tuple(x) for x in self.manifest["plantable"]]


def item_name(i: int) -> str:
    return f"item{i:04d}"


def gen_synthetic_kg(spec: SyntheticKgSpec) -> SyntheticKg:
    rng = np.random.default_rng(spec.seed)
    n_values = spec.n_entities - spec.n_items
    rel_names = [f"rel{r:02d}" for r in range(spec.n_relations)]
    cat_names = [f"cat{c}" for c in range(spec.n_categories)]
    value_names = [f"val{v:04d}" for v in range(n_values)]
    pools = np.array_split(np.arange(n_values), spec.n_relations)

    # applicable relations: a cyclic window per category so every relation is used
    # when categories * relations_per_category >= n_relations
    offsets = rng.permutation(spec.n_relations)
    applicable = {}
    for c in range(spec.n_categories):
        start = (c * spec.n_relations) // spec.n_categories
        applicable[c] = sorted(int(offsets[(start + j) % spec.n_relations])
                               for j in range(spec.relations_per_category))

    # balanced assignment of items to (category, cluster) cells
    cells = np.arange(spec.n_items) % (spec.n_categories * spec.n_clusters)
    cells = rng.permutation(cells)
    item_cat = cells // spec.n_clusters
    item_cluster = cells % spec.n_clusters

    rule = {r: rng.permutation(spec.n_clusters) % len(pools[r]) for r in range(spec.n_relations)}
    cons = spec.consistency_of()

    triples, plantable, noisy = [], [], []
    ground_truth = {}
    for i in range(spec.n_items):
        c, k = int(item_cat[i]), int(item_cluster[i])
        for r in applicable[c]:
            pool = pools[r]
            true_v = int(pool[rule[r][k]])
            follows = rng.random() < cons[r]
            v = true_v if follows else int(pool[rng.integers(len(pool))])
            gt = value_names[v]
            ground_truth[f"{item_name(i)}\t{rel_names[r]}"] = gt
            tail = gt
            if rng.random() < spec.noise:
                tail = value_names[int(rng.integers(n_values))]
                noisy.append([item_name(i), rel_names[r], tail])
            elif follows:
                plantable.append([item_name(i), rel_names[r], tail])
            triples.append((item_name(i), rel_names[r], tail))

    manifest = {
        "spec": asdict(spec),
        "relations": rel_names,
        "categories": cat_names,
        "applicable": {cat_names[c]: [rel_names[r] for r in rs] for c, rs in applicable.items()},
        "item_category": {item_name(i): cat_names[int(item_cat[i])] for i in range(spec.n_items)},
        "item_cluster": {item_name(i): int(item_cluster[i]) for i in range(spec.n_items)},
        "value_pools": {rel_names[r]: [value_names[v] for v in pools[r]] for r in range(spec.n_relations)},
        "ground_truth": ground_truth,
        "plantable": plantable,
        "noisy": noisy,
        "n_triples": len(triples),
        "n_triples_expected": spec.n_items * spec.relations_per_category,
    }
    categories = {item_name(i): cat_names[int(item_cat[i])] for i in range(spec.n_items)}
    return SyntheticKg(spec, triples, categories, manifest)


def write_synthetic_kg(kg: SyntheticKg, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "triples.tsv", "w", encoding="utf-8", newline="") as fh:
        fh.writelines(f"{h}\t{r}\t{t}\n" for h, r, t in kg.triples)
    with open(out / "categories.tsv", "w", encoding="utf-8", newline="") as fh:
        fh.writelines(f"{e}\t{c}\n" for e, c in kg.categories.items())
    (out / "manifest.json").write_text(json.dumps(kg.manifest, sort_keys=True, indent=1) + "\n")


def split_planted(kg: SyntheticKg, n_test: int, seed: int = 0):
    """Hold out ``n_test`` planted triples, never an item's only triple.

    Returns ``(train_triples, test_triples)`` as name tuples.
    """
    rng = np.random.default_rng(seed)
    planted = kg.planted()
    order = rng.permutation(len(planted))
    remaining = {}
    for h, _, _ in kg.triples:
        remaining[h] = remaining.get(h, 0) + 1
    test = []
    for idx in order:
        h, r, t = planted[idx]
        if remaining[h] <= 1:
            continue
        remaining[h] -= 1
        test.append((h, r, t))
        if len(test) == n_test:
            break
    if len(test) < n_test:
        raise SpecError(f"only {len(test)} planted triples could be held out")
    held = set(test)
    train = [tr for tr in kg.triples if tr not in held]
    return train, test


def non_applicable_pairs(kg: SyntheticKg, n: int, seed: int = 0) -> list[tuple[str, str]]:
    """``n`` distinct (item, relation) pairs where the relation is outside the item's category."""
    rng = np.random.default_rng(seed)
    options = []
    rels = kg.manifest["relations"]
    for item, cat in kg.manifest["item_category"].items():
        allowed = set(kg.manifest["applicable"][cat])
        options.extend((item, r) for r in rels if r not in allowed)
    if n > len(options):
        raise SpecError("not enough non-applicable pairs")
    pick = rng.choice(len(options), size=n, replace=False)
    return [options[i] for i in sorted(pick)]


def gen_interactions(kg: SyntheticKg, n_users: int = 300, min_per_user: int = 10, max_per_user: int = 20,
                     affinity: float = 0.8, cold_fraction: float = 0.0, cold_weight: float = 1.0,
                     seed: int = 0) -> list[tuple[str, str, int]]:
    """Implicit-feedback log where each user favours items of one latent cluster.

    Each interaction comes from the user's preferred cluster with probability
    ``affinity`` and from all items otherwise. A ``cold_fraction`` of items is
    drawn with relative weight ``cold_weight`` everywhere except at a user's
    latest interaction, which samples items evenly; this models new items that
    have little history when the held-out interaction happens. Rows are
    ``(user, item, timestamp)`` with per-user increasing timestamps.
    """
    if not 0 <= cold_fraction < 1 or cold_weight < 0:
        raise SpecError("cold_fraction must be in [0, 1) and cold_weight nonnegative")
    if not 1 <= min_per_user <= max_per_user <= len(kg.manifest["item_cluster"]):
        raise SpecError("need 1 <= min_per_user <= max_per_user <= number of items")
    rng = np.random.default_rng(seed)
    clusters = kg.manifest["item_cluster"]
    items = sorted(clusters)
    cold = np.zeros(len(items), dtype=bool)
    cold[rng.permutation(len(items))[:int(round(cold_fraction * len(items)))]] = True
    weight = np.where(cold, cold_weight, 1.0)
    cluster_arr = np.array([clusters[it] for it in items])
    keys = np.unique(cluster_arr)
    rows = []
    for u in range(n_users):
        pref = keys[int(rng.integers(len(keys)))]
        n = int(rng.integers(min_per_user, max_per_user + 1))
        chosen: list[int] = []
        while len(chosen) < n:
            in_pref = rng.random() < affinity
            w = np.where(cluster_arr == pref, 1.0, 0.0) if in_pref else np.ones(len(items))
            if len(chosen) < n - 1:
                w = w * weight
            w[chosen] = 0.0
            if w.sum() == 0:
                # preferred cluster (or every warm item) used up
                w = np.ones(len(items))
                w[chosen] = 0.0
            chosen.append(int(rng.choice(len(items), p=w / w.sum())))
        rows.extend((f"user{u:04d}", items[i], t) for t, i in enumerate(chosen))
    return rows


def write_interactions(rows, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.writelines(f"{u}\t{i}\t{t}\n" for u, i, t in rows)
