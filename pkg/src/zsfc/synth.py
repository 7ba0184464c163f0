"""Deterministic synthetic catalogs and interaction logs with planted structure.

Items belong to style clusters that cut across categories. Each item gets a
planted complement set drawn from complementary items of its own cluster, and
image features are the cluster's style vector plus noise. Users browse with a
persistent taste (favourite clusters and categories) and, after some clicks,
buy a planted complement of the clicked item that suits their categories.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from zsfc.catalog import Catalog, CategoryHierarchy, NegativePairList, write_catalog
from zsfc.sampler import DAY, EventKind, InteractionEvent, UserHistory, write_interactions

EPOCH_START = 1_577_836_800  # 2020-01-01T00:00:00Z
CLUSTER_SIZE = 20
MIN_COMPLEMENTS, MAX_COMPLEMENTS = 5, 20


@dataclass(frozen=True)
class WorldConfig:
    n_items: int = 500
    n_categories: int = 40
    d: int = 32
    n_users: int = 2000
    events_per_user: int = 40
    complementary_affinity: float = 0.8
    negative_pair_fraction: float = 0.5
    days: int = 9
    seed: int = 0
    categories_per_department: int = 5
    purchase_rate: float = 0.15
    taste_rate: float = 0.6
    feature_noise: float = 0.3
    category_preference: float = 4.0

    def __post_init__(self):
        for name in ("n_items", "n_categories", "d", "n_users", "events_per_user", "days", "categories_per_department"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("complementary_affinity", "negative_pair_fraction", "purchase_rate", "taste_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.feature_noise < 0 or self.category_preference <= 0:
            raise ValueError("feature_noise must be non-negative and category_preference positive")


@dataclass
class World:
    config: WorldConfig
    catalog: Catalog
    clusters: np.ndarray
    complements: dict[int, list[int]]


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


def generate_world(config: WorldConfig) -> World:
    rng = _rng(config.seed, 0)
    n, G, d = config.n_items, config.n_categories, config.d

    n_dept = -(-G // config.categories_per_department)
    keys = [f"cat_{c:04d}" for c in range(G)] + [f"dept_{k:03d}" for k in range(n_dept)]
    parent = np.array([G + c // config.categories_per_department for c in range(G)] + [-1] * n_dept, dtype=np.int64)
    hierarchy = CategoryHierarchy(tuple(keys), parent)

    # negative pairs: a share of the sibling pairs under each department
    siblings = [(a, b) for a in range(G) for b in range(a + 1, G) if parent[a] == parent[b]]
    n_neg = int(round(config.negative_pair_fraction * len(siblings)))
    picked = rng.choice(len(siblings), size=n_neg, replace=False) if n_neg else []
    negatives = NegativePairList.from_pairs(siblings[i] for i in sorted(picked))

    categories = rng.integers(0, G, size=n)
    n_clusters = max(1, n // CLUSTER_SIZE)
    clusters = rng.integers(0, n_clusters, size=n)

    style = rng.normal(size=(n_clusters, d))
    feats = style[clusters] + config.feature_noise * rng.normal(size=(n, d))
    # match the spread of a Xavier-initialised item table
    feats *= np.sqrt(2.0 / (n + d)) / feats.std()
    catalog = Catalog(
        tuple(f"item_{i:06d}" for i in range(n)), categories, hierarchy, negatives, feats.astype(np.float32)
    )

    complements: dict[int, list[int]] = {}
    for i in range(n):
        ok = catalog.complementary_mask(i)
        ok[i] = False
        same = np.flatnonzero(ok & (clusters == clusters[i]))
        pool = list(rng.permutation(same)[:MAX_COMPLEMENTS])
        if len(pool) < MIN_COMPLEMENTS:
            others = np.setdiff1d(np.flatnonzero(ok), pool)
            if len(pool) + others.size < MIN_COMPLEMENTS:
                raise ValueError(f"item {i} cannot get {MIN_COMPLEMENTS} complements under the negative pairs")
            pool += list(rng.choice(others, size=MIN_COMPLEMENTS - len(pool), replace=False))
        complements[i] = sorted(int(j) for j in pool)
    return World(config, catalog, clusters, complements)


def generate_histories(world: World, config: WorldConfig | None = None) -> list[UserHistory]:
    config = config or world.config
    rng = _rng(config.seed, 1)
    catalog = world.catalog
    n = len(catalog)
    n_clusters = int(world.clusters.max()) + 1
    members = [np.flatnonzero(world.clusters == c) for c in range(n_clusters)]
    span = config.days * DAY
    histories = []
    for user in range(config.n_users):
        taste = rng.choice(n_clusters, size=min(2, n_clusters), replace=False)
        taste_items = np.concatenate([members[c] for c in taste])
        liked_cats = set(rng.choice(catalog.n_categories, size=max(1, catalog.n_categories // 5), replace=False).tolist())
        liked = np.array([catalog.categories[i] in liked_cats for i in taste_items])
        taste_w = np.where(liked, config.category_preference, 1.0)
        taste_w = taste_w / taste_w.sum()
        events: list[InteractionEvent] = []
        while len(events) < config.events_per_user:
            t = EPOCH_START + int(rng.integers(0, max(1, span - 3 * 3600)))
            for _ in range(1 + rng.geometric(0.2)):
                if rng.random() < config.taste_rate and taste_items.size:
                    item = int(rng.choice(taste_items, p=taste_w))
                else:
                    item = int(rng.integers(0, n))
                events.append(InteractionEvent(item, EventKind.CLICK, t))
                if rng.random() < config.purchase_rate:
                    if rng.random() < config.complementary_affinity:
                        comp = np.array(world.complements[item])
                        w = np.array([config.category_preference if catalog.categories[c] in liked_cats else 1.0 for c in comp])
                        buy = int(rng.choice(comp, p=w / w.sum()))
                        t_click = t + int(rng.integers(60, 1200))
                        events.append(InteractionEvent(buy, EventKind.CLICK, t_click))
                        events.append(InteractionEvent(buy, EventKind.ORDER, t_click + int(rng.integers(60, 7200))))
                    else:
                        buy = int(rng.integers(0, n))
                        events.append(InteractionEvent(buy, EventKind.ORDER, t + int(rng.integers(60, DAY))))
                t += int(rng.integers(30, 300))
        end = EPOCH_START + span
        histories.append(UserHistory(user, [e for e in events if e.timestamp < end]))
    return histories


def write_world(world: World, histories: list[UserHistory] | None, directory) -> dict[str, Path]:
    directory = Path(directory)
    paths = write_catalog(world.catalog, directory)
    paths["complements"] = directory / "complements.json"
    with open(paths["complements"], "w", encoding="utf-8") as fh:
        keys = world.catalog.keys
        json.dump(
            {"config": asdict(world.config), "complements": {keys[i]: [keys[j] for j in c] for i, c in world.complements.items()}},
            fh,
            sort_keys=True,
        )
    if histories is not None:
        paths["interactions"] = directory / "interactions.tsv"
        write_interactions(histories, world.catalog, paths["interactions"])
    return paths


def random_catalog(n_items: int, n_categories: int = 40, seed: int = 0, categories_per_department: int = 5) -> Catalog:
    """Featureless catalog with uniform categories, for latency work at large item counts."""
    if n_items <= 0 or n_categories <= 0:
        raise ValueError("n_items and n_categories must be positive")
    rng = _rng(seed, 0)
    n_dept = -(-n_categories // categories_per_department)
    keys = [f"cat_{c:04d}" for c in range(n_categories)] + [f"dept_{k:03d}" for k in range(n_dept)]
    parent = np.array(
        [n_categories + c // categories_per_department for c in range(n_categories)] + [-1] * n_dept, dtype=np.int64
    )
    hierarchy = CategoryHierarchy(tuple(keys), parent)
    categories = rng.integers(0, n_categories, size=n_items)
    return Catalog(tuple(f"item_{i:06d}" for i in range(n_items)), categories, hierarchy)
