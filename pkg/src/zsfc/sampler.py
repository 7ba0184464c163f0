"""Complementary-pair dataset construction from raw interaction logs.

For every click the sampler looks one hour ahead for complementary items the
user interacted with, keeps those the user bought within 24 hours, and drops
targets that are not among the base item's most frequent co-occurring items.
"""

from __future__ import annotations

import bisect
import enum
import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from zsfc import DataError
from zsfc.catalog import Catalog

DAY = 86400


class EventKind(enum.IntEnum):
    CLICK = 0
    ORDER = 1

    @classmethod
    def parse(cls, text: str) -> "EventKind":
        try:
            return {"click": cls.CLICK, "order": cls.ORDER}[text.strip().lower()]
        except KeyError:
            raise ValueError(f"unknown event kind {text!r}") from None

    def __str__(self):
        return self.name.lower()


@dataclass(frozen=True)
class InteractionEvent:
    item: int
    kind: EventKind
    timestamp: int


@dataclass
class UserHistory:
    user: int
    events: list[InteractionEvent] = field(default_factory=list)

    def __post_init__(self):
        # stable: equal timestamps keep input order
        self.events = sorted(self.events, key=lambda e: e.timestamp)


@dataclass(frozen=True)
class SamplerConfig:
    max_clicks: int = 15
    max_orders: int = 5
    click_window: int = 9 * DAY
    order_window: int = 90 * DAY
    lookahead: int = 3600
    purchase_horizon: int = DAY
    top_n: int = 200

    def __post_init__(self):
        for name, value in vars(self).items():
            if value <= 0:
                raise ValueError(f"{name} must be positive, got {value}")


@dataclass(frozen=True)
class TrainingExample:
    user: int
    base: int
    target: int
    base_time: int
    clicks: tuple[int, ...]  # oldest -> newest
    orders: tuple[int, ...]
    ordered_within_day: bool

    def to_json(self, keys: Sequence[str] | None = None) -> str:
        name = (lambda i: keys[i]) if keys is not None else int
        return json.dumps(
            {
                "user": self.user,
                "base": name(self.base),
                "target": name(self.target),
                "base_time": self.base_time,
                "clicks": [name(i) for i in self.clicks],
                "orders": [name(i) for i in self.orders],
                "ordered_within_day": self.ordered_within_day,
            },
            separators=(",", ":"),
        )

    @classmethod
    def from_dict(cls, obj: dict, lookup=None) -> "TrainingExample":
        conv = lookup if lookup is not None else int
        return cls(
            user=int(obj["user"]),
            base=conv(obj["base"]),
            target=conv(obj["target"]),
            base_time=int(obj["base_time"]),
            clicks=tuple(conv(i) for i in obj["clicks"]),
            orders=tuple(conv(i) for i in obj["orders"]),
            ordered_within_day=bool(obj["ordered_within_day"]),
        )


class CooccurrenceMatrix:
    """Symmetric item-item counts held as a CSR matrix with a zero diagonal."""

    def __init__(self, counts: sp.csr_matrix):
        self.counts = counts.tocsr()
        self.counts.sort_indices()

    @property
    def n_items(self) -> int:
        return self.counts.shape[0]

    @property
    def nnz_pairs(self) -> int:
        return self.counts.nnz // 2

    def count(self, a: int, b: int) -> int:
        if not (0 <= a < self.n_items and 0 <= b < self.n_items):
            return 0
        return int(self.counts[a, b])

    def row(self, item: int) -> tuple[np.ndarray, np.ndarray]:
        """Neighbour ids (ascending) and their counts."""
        start, stop = self.counts.indptr[item], self.counts.indptr[item + 1]
        return self.counts.indices[start:stop], self.counts.data[start:stop]

    def to_dict(self) -> dict[tuple[int, int], int]:
        upper = sp.triu(self.counts, k=1).tocoo()
        return {(int(a), int(b)): int(c) for a, b, c in zip(upper.row, upper.col, upper.data)}


def build_cooccurrence(histories: Iterable[UserHistory], n_items: int | None = None) -> CooccurrenceMatrix:
    """Count, for every item pair, the users whose history contains both items."""
    codes = []
    max_item = -1
    for h in histories:
        items = np.unique(np.fromiter((e.item for e in h.events), dtype=np.int64))
        if items.size == 0:
            continue
        max_item = max(max_item, int(items[-1]))
        if items.size < 2:
            continue
        a, b = np.triu_indices(items.size, k=1)
        codes.append((items[a], items[b]))
    n = n_items if n_items is not None else max_item + 1
    if max_item >= n:
        raise ValueError(f"item id {max_item} outside matrix of size {n}")
    if not codes:
        return CooccurrenceMatrix(sp.csr_matrix((n, n), dtype=np.int64))
    rows = np.concatenate([c[0] for c in codes])
    cols = np.concatenate([c[1] for c in codes])
    upper = sp.coo_matrix((np.ones(rows.size, dtype=np.int64), (rows, cols)), shape=(n, n)).tocsr()
    upper.sum_duplicates()
    return CooccurrenceMatrix((upper + upper.T).tocsr())


def top_cooccurring(matrix: CooccurrenceMatrix, item: int, n: int) -> set[int]:
    """Ids of the ``n`` items co-occurring most often with ``item`` (ties: lower id)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0 <= item < matrix.n_items:
        return set()
    ids, counts = matrix.row(item)
    keep = counts > 0
    ids, counts = ids[keep], counts[keep]
    order = np.lexsort((ids, -counts))[:n]
    return {int(i) for i in ids[order]}


def _context(times: list[int], items: list[int], start: int, stop: int, cap: int) -> tuple[int, ...]:
    """Most recent ``cap`` items with timestamp in [start, stop), oldest first."""
    lo = bisect.bisect_left(times, start)
    hi = bisect.bisect_left(times, stop)
    return tuple(items[max(lo, hi - cap):hi])


def extract_examples(
    history: UserHistory,
    matrix: CooccurrenceMatrix,
    catalog: Catalog,
    config: SamplerConfig = SamplerConfig(),
    _top_cache: dict | None = None,
) -> list[TrainingExample]:
    events = history.events
    times = [e.timestamp for e in events]
    clicks = [e for e in events if e.kind == EventKind.CLICK]
    orders = [e for e in events if e.kind == EventKind.ORDER]
    click_t, click_i = [e.timestamp for e in clicks], [e.item for e in clicks]
    order_t, order_i = [e.timestamp for e in orders], [e.item for e in orders]
    top_cache = _top_cache if _top_cache is not None else {}

    out = []
    for ev in clicks:
        t, base = ev.timestamp, ev.item
        lo = bisect.bisect_right(times, t)
        hi = bisect.bisect_right(times, t + config.lookahead)
        window = {events[j].item for j in range(lo, hi)}
        if not window:
            continue
        window = set(catalog.complementary_filter(base, sorted(window)))
        olo = bisect.bisect_right(order_t, t)
        ohi = bisect.bisect_right(order_t, t + config.purchase_horizon)
        bought = set(order_i[olo:ohi])
        targets = sorted(window & bought)
        if not targets:
            continue
        if base not in top_cache:
            top_cache[base] = top_cooccurring(matrix, base, config.top_n)
        targets = [i for i in targets if i in top_cache[base]]
        if not targets:
            continue
        ctx_clicks = _context(click_t, click_i, t - config.click_window, t, config.max_clicks)
        ctx_orders = _context(order_t, order_i, t - config.order_window, t, config.max_orders)
        # orders after the click and before the next UTC midnight
        dhi = bisect.bisect_left(order_t, (t // DAY + 1) * DAY)
        same_day_orders = set(order_i[olo:dhi])
        for target in targets:
            same_day = target in same_day_orders
            out.append(TrainingExample(history.user, base, target, t, ctx_clicks, ctx_orders, same_day))
    return out


def context_example(history: UserHistory, base: int, at: int, config: SamplerConfig = SamplerConfig()) -> TrainingExample:
    """Request-time context for ``base`` viewed at ``at``: the same windows the sampler uses.

    The returned example has ``target == base``; only the context fields are meaningful.
    """
    clicks = [e for e in history.events if e.kind == EventKind.CLICK]
    orders = [e for e in history.events if e.kind == EventKind.ORDER]
    return TrainingExample(
        user=history.user,
        base=base,
        target=base,
        base_time=at,
        clicks=_context([e.timestamp for e in clicks], [e.item for e in clicks], at - config.click_window, at, config.max_clicks),
        orders=_context([e.timestamp for e in orders], [e.item for e in orders], at - config.order_window, at, config.max_orders),
        ordered_within_day=False,
    )


def sample_dataset(
    histories: Sequence[UserHistory],
    catalog: Catalog,
    config: SamplerConfig = SamplerConfig(),
    matrix: CooccurrenceMatrix | None = None,
) -> list[TrainingExample]:
    """Run the full sampler over a corpus; output sorted by (user, base_time, base, target)."""
    if matrix is None:
        matrix = build_cooccurrence(histories, n_items=len(catalog))
    cache: dict = {}
    out = []
    for h in histories:
        out.extend(extract_examples(h, matrix, catalog, config, cache))
    out.sort(key=lambda e: (e.user, e.base_time, e.base, e.target))
    return out


def split_by_time(examples: Sequence[TrainingExample], corpus_end: int):
    """Examples whose base click falls on the last UTC day of the corpus form the test set."""
    last_day = corpus_end // DAY
    train = [e for e in examples if e.base_time // DAY != last_day]
    test = [e for e in examples if e.base_time // DAY == last_day]
    return train, test


def read_interactions(path, catalog: Catalog) -> list[UserHistory]:
    """Parse ``user<TAB>unix_seconds<TAB>click|order<TAB>item_key`` rows into sorted histories."""
    per_user: dict[int, list[InteractionEvent]] = defaultdict(list)
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) != 4:
                raise DataError("expected 'user<TAB>unix_seconds<TAB>click|order<TAB>item'", path, lineno)
            try:
                user, ts, kind = int(cols[0]), int(cols[1]), EventKind.parse(cols[2])
            except ValueError as exc:
                raise DataError(str(exc), path, lineno) from None
            if ts < 0:
                raise DataError("negative timestamp", path, lineno)
            try:
                item = catalog.id_of(cols[3])
            except KeyError:
                raise DataError(f"unknown item {cols[3]!r}", path, lineno) from None
            per_user[user].append(InteractionEvent(item, kind, ts))
    return [UserHistory(u, evs) for u, evs in sorted(per_user.items())]


def write_interactions(histories: Iterable[UserHistory], catalog: Catalog, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for h in histories:
            for e in h.events:
                fh.write(f"{h.user}\t{e.timestamp}\t{e.kind}\t{catalog.keys[e.item]}\n")


def corpus_end(histories: Iterable[UserHistory]) -> int:
    return max((h.events[-1].timestamp for h in histories if h.events), default=0)


def write_dataset(examples: Iterable[TrainingExample], path, catalog: Catalog | None = None) -> None:
    keys = catalog.keys if catalog is not None else None
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(ex.to_json(keys) + "\n")


def read_dataset(path, catalog: Catalog | None = None) -> list[TrainingExample]:
    def lookup(v):
        if isinstance(v, int) or catalog is None:
            return int(v)
        return catalog.id_of(v)

    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(TrainingExample.from_dict(json.loads(line), lookup))
            except (KeyError, ValueError, TypeError) as exc:
                raise DataError(f"bad dataset record: {exc}", path, lineno) from None
    return out
