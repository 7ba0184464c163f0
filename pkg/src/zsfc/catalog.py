"""Item catalog, category hierarchy and the complementary-item predicate.

Two items are complementary when their categories differ and the category
pair is not on the curated negative list. The predicate is evaluated on leaf
category ids only; the hierarchy is kept for generators and reporting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from zsfc import DataError

ROOT = "ROOT"


def _data_lines(path) -> Iterator[tuple[int, list[str]]]:
    """Yield (line_number, tab-split fields), skipping blanks and comments."""
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            yield lineno, line.split("\t")


@dataclass(frozen=True)
class CategoryHierarchy:
    keys: tuple[str, ...]
    parent: np.ndarray  # parent category id, -1 for roots

    def __post_init__(self):
        object.__setattr__(self, "_index", {k: i for i, k in enumerate(self.keys)})

    def __len__(self) -> int:
        return len(self.keys)

    def id_of(self, key: str) -> int:
        try:
            return self._index[key]
        except KeyError:
            raise KeyError(f"unknown category {key!r}") from None

    def ancestors(self, cat: int) -> list[int]:
        out = []
        p = int(self.parent[cat])
        while p >= 0:
            out.append(p)
            p = int(self.parent[p])
        return out


@dataclass(frozen=True)
class NegativePairList:
    pairs: frozenset[tuple[int, int]] = frozenset()

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[int, int]]) -> "NegativePairList":
        return cls(frozenset((min(a, b), max(a, b)) for a, b in pairs))

    def __contains__(self, pair) -> bool:
        a, b = pair
        return (min(a, b), max(a, b)) in self.pairs

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass(frozen=True)
class Catalog:
    """Immutable item table; item ids are dense positions 0..n-1."""

    keys: tuple[str, ...]
    categories: np.ndarray
    hierarchy: CategoryHierarchy
    negatives: NegativePairList = field(default_factory=NegativePairList)
    image_features: np.ndarray | None = None  # (n, d) float32, NaN rows where absent

    def __post_init__(self):
        object.__setattr__(self, "_index", {k: i for i, k in enumerate(self.keys)})
        n_cat = len(self.hierarchy)
        allowed = np.ones((n_cat, n_cat), dtype=bool)
        np.fill_diagonal(allowed, False)
        for a, b in self.negatives.pairs:
            allowed[a, b] = allowed[b, a] = False
        allowed.setflags(write=False)
        object.__setattr__(self, "_allowed", allowed)
        self.categories.setflags(write=False)

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def n_categories(self) -> int:
        return len(self.hierarchy)

    @property
    def feature_dim(self) -> int | None:
        return None if self.image_features is None else self.image_features.shape[1]

    def has_features(self) -> np.ndarray:
        if self.image_features is None:
            return np.zeros(len(self), dtype=bool)
        return ~np.isnan(self.image_features).any(axis=1)

    def id_of(self, key: str) -> int:
        try:
            return self._index[key]
        except KeyError:
            raise KeyError(f"unknown item {key!r}") from None

    def category_of(self, item: int) -> int:
        self._check(item)
        return int(self.categories[item])

    def _check(self, item) -> int:
        item = int(item)
        if not 0 <= item < len(self.keys):
            raise KeyError(f"unknown item id {item}")
        return item

    def is_complementary(self, a: int, b: int) -> bool:
        ca = self.categories[self._check(a)]
        cb = self.categories[self._check(b)]
        return bool(self._allowed[ca, cb])

    def complementary_mask(self, base: int, items: np.ndarray | None = None) -> np.ndarray:
        """Boolean mask over ``items`` (default: whole catalog) of complements of ``base``."""
        row = self._allowed[self.categories[self._check(base)]]
        if items is None:
            return row[self.categories]
        items = np.asarray(items, dtype=np.int64)
        if items.size and (items.min() < 0 or items.max() >= len(self.keys)):
            bad = items[(items < 0) | (items >= len(self.keys))][0]
            raise KeyError(f"unknown item id {int(bad)}")
        return row[self.categories[items]]

    def complementary_filter(self, base: int, items: Sequence[int]) -> list[int]:
        if len(items) == 0:
            self._check(base)
            return []
        arr = np.asarray(items, dtype=np.int64)
        keep = self.complementary_mask(base, arr)
        return [int(i) for i in arr[keep]]

    def complementary_count(self, base: int) -> int:
        return int(self.complementary_mask(base).sum())


def load_hierarchy(path) -> CategoryHierarchy:
    keys: list[str] = []
    parents: list[tuple[str, int]] = []
    seen = set()
    for lineno, cols in _data_lines(path):
        if len(cols) != 2 or not cols[0]:
            raise DataError("expected 'category<TAB>parent|ROOT'", path, lineno)
        key, parent = cols
        if key in seen:
            raise DataError(f"duplicate category {key!r}", path, lineno)
        seen.add(key)
        keys.append(key)
        parents.append((parent, lineno))

    index = {k: i for i, k in enumerate(keys)}
    parent_ids = np.full(len(keys), -1, dtype=np.int64)
    for i, (p, lineno) in enumerate(parents):
        if p == ROOT:
            continue
        if p not in index:
            raise DataError(f"parent {p!r} has no entry", path, lineno)
        parent_ids[i] = index[p]

    # every walk toward a root must terminate within len(keys) hops
    for i in range(len(keys)):
        node, hops = i, 0
        while parent_ids[node] >= 0:
            node = parent_ids[node]
            hops += 1
            if hops > len(keys) or node == i:
                raise DataError(f"cycle in hierarchy through {keys[i]!r}", path, parents[i][1])
    return CategoryHierarchy(tuple(keys), parent_ids)


def load_negative_pairs(path, hierarchy: CategoryHierarchy) -> NegativePairList:
    pairs = []
    for lineno, cols in _data_lines(path):
        if len(cols) != 2:
            raise DataError("expected 'category_a<TAB>category_b'", path, lineno)
        try:
            pairs.append((hierarchy.id_of(cols[0]), hierarchy.id_of(cols[1])))
        except KeyError as exc:
            raise DataError(f"dangling category reference: {exc.args[0]}", path, lineno) from None
    return NegativePairList.from_pairs(pairs)


def load_catalog(catalog_path, hierarchy_path, negative_path=None, dim: int | None = None) -> Catalog:
    """Parse the three catalog TSV files into a :class:`Catalog`.

    ``dim`` pins the expected image-feature length; otherwise the first row
    carrying features fixes it.
    """
    hierarchy = load_hierarchy(hierarchy_path)
    negatives = (
        load_negative_pairs(negative_path, hierarchy) if negative_path is not None else NegativePairList()
    )
    keys: list[str] = []
    cats: list[int] = []
    feats: list[list[float] | None] = []
    seen = set()
    for lineno, cols in _data_lines(catalog_path):
        if len(cols) not in (2, 3) or not cols[0]:
            raise DataError("expected 'item<TAB>category[<TAB>features]'", catalog_path, lineno)
        key, cat_key = cols[0], cols[1]
        if key in seen:
            raise DataError(f"duplicate item {key!r}", catalog_path, lineno)
        seen.add(key)
        try:
            cat = hierarchy.id_of(cat_key)
        except KeyError:
            raise DataError(f"dangling category reference {cat_key!r}", catalog_path, lineno) from None
        vec = None
        if len(cols) == 3 and cols[2].strip():
            try:
                vec = [float(v) for v in cols[2].split(",")]
            except ValueError:
                raise DataError("non-numeric image feature", catalog_path, lineno) from None
            if dim is None:
                dim = len(vec)
            if len(vec) != dim:
                raise DataError(f"image feature length {len(vec)} != {dim}", catalog_path, lineno)
            if not all(math.isfinite(v) for v in vec):
                raise DataError("non-finite image feature", catalog_path, lineno)
        keys.append(key)
        cats.append(cat)
        feats.append(vec)

    features = None
    if any(v is not None for v in feats):
        features = np.full((len(keys), dim), np.nan, dtype=np.float32)
        for i, v in enumerate(feats):
            if v is not None:
                features[i] = v
    return Catalog(tuple(keys), np.asarray(cats, dtype=np.int64), hierarchy, negatives, features)


def write_catalog(catalog: Catalog, directory) -> dict[str, Path]:
    """Write catalog.tsv, hierarchy.tsv and negative_pairs.tsv into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    h = catalog.hierarchy
    paths = {
        "catalog": directory / "catalog.tsv",
        "hierarchy": directory / "hierarchy.tsv",
        "negative_pairs": directory / "negative_pairs.tsv",
    }
    with open(paths["hierarchy"], "w", encoding="utf-8") as fh:
        fh.write("# category\tparent\n")
        for key, p in zip(h.keys, h.parent):
            fh.write(f"{key}\t{ROOT if p < 0 else h.keys[p]}\n")
    with open(paths["negative_pairs"], "w", encoding="utf-8") as fh:
        fh.write("# category_a\tcategory_b\n")
        for a, b in sorted(catalog.negatives.pairs):
            fh.write(f"{h.keys[a]}\t{h.keys[b]}\n")
    has = catalog.has_features()
    with open(paths["catalog"], "w", encoding="utf-8") as fh:
        fh.write("# item\tcategory\timage_features\n")
        for i, key in enumerate(catalog.keys):
            row = f"{key}\t{h.keys[catalog.categories[i]]}"
            if has[i]:
                # repr of float32 round-trips exactly through float()
                row += "\t" + ",".join(repr(float(v)) for v in catalog.image_features[i])
            fh.write(row + "\n")
    return paths
