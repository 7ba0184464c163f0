"""Offline metrics, the cosine collaborative-filtering baseline, ablations and latency."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from zsfc.catalog import Catalog
from zsfc.model import ModelParams, Ranker, Variant, rank_candidates
from zsfc.sampler import CooccurrenceMatrix, TrainingExample
from zsfc.training import TrainConfig, train

ABLATION_VARIANTS = (Variant.STAMP, Variant.STAMP_ORDERS, Variant.STAMP_CATEGORY, Variant.STAMP_IMAGE, Variant.ZSFC)


@dataclass(frozen=True)
class EvalReport:
    recall_at_k: float
    order_recall_at_k: float | None
    n_total: int
    n_ordered: int
    k: int = 5

    def to_dict(self) -> dict:
        return asdict(self)


Recommender = Callable[[TrainingExample, int], Sequence[int]]


def evaluate(recommender: Recommender, testset: Sequence[TrainingExample], k: int = 5) -> EvalReport:
    """Share of examples whose target is in the recommender's top ``k``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not testset:
        raise ValueError("empty test set")
    hits = ordered = ordered_hits = 0
    for ex in testset:
        hit = ex.target in list(recommender(ex, k))[:k]
        hits += hit
        if ex.ordered_within_day:
            ordered += 1
            ordered_hits += hit
    return EvalReport(
        recall_at_k=hits / len(testset),
        order_recall_at_k=ordered_hits / ordered if ordered else None,
        n_total=len(testset),
        n_ordered=ordered,
        k=k,
    )


def model_recommender(params: ModelParams, catalog: Catalog, variant: Variant | None = None) -> Recommender:
    ranker = Ranker(params, variant or params.variant, catalog)
    return lambda ex, k: ranker.recommend(ex, k)


def mean_candidate_count(testset: Sequence[TrainingExample], catalog: Catalog) -> float:
    """Average size of the complementary-filtered candidate pool over ``testset``."""
    return float(np.mean([catalog.complementary_count(ex.base) for ex in testset]))


class CFModel:
    """Item-to-item cosine similarity over co-occurrence rows."""

    def __init__(self, matrix: CooccurrenceMatrix):
        counts = matrix.counts.astype(np.float64)
        norms = np.sqrt(np.asarray(counts.multiply(counts).sum(axis=1)).ravel())
        inv = np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > 0)
        self.unit = sp.diags(inv) @ counts
        self.unit = self.unit.tocsr()
        self.norms = norms

    @property
    def n_items(self) -> int:
        return self.unit.shape[0]

    def similarities(self, item: int) -> np.ndarray:
        return np.asarray((self.unit @ self.unit[item].T).todense()).ravel()

    def neighbours(self, item: int) -> list[int]:
        """Items with positive cosine to ``item``, most similar first (ties: lower id), excluding itself."""
        sims = self.similarities(item)
        ids = np.flatnonzero(sims > 0)
        ids = ids[ids != item]
        order = np.lexsort((ids, -sims[ids]))
        return [int(i) for i in ids[order]]


def cf_c_recommend(cf: CFModel, base: int, k: int, catalog: Catalog) -> list[int]:
    """Cosine neighbours of ``base`` that are complementary to it, expanded through those neighbours."""
    if not 0 <= base < cf.n_items:
        raise KeyError(f"unknown item id {base}")
    if k < 1:
        raise ValueError("k must be >= 1")
    direct = [i for i in cf.neighbours(base) if catalog.is_complementary(base, i)]
    out = direct[:k]
    seen = set(out)
    for seed_item in direct:
        if len(out) >= k:
            break
        for j in cf.neighbours(seed_item):
            if len(out) >= k:
                break
            if j != base and j not in seen and catalog.is_complementary(base, j):
                out.append(j)
                seen.add(j)
    return out


def cf_recommender(cf: CFModel, catalog: Catalog) -> Recommender:
    cache: dict[tuple[int, int], list[int]] = {}

    def recommend(ex, k):
        key = (ex.base, k)
        if key not in cache:
            cache[key] = cf_c_recommend(cf, ex.base, k, catalog)
        return cache[key]

    return recommend


def run_ablation(
    train_set: Sequence[TrainingExample],
    test_set: Sequence[TrainingExample],
    catalog: Catalog,
    base_config: TrainConfig,
    variants: Sequence[Variant] = ABLATION_VARIANTS,
    k: int = 5,
) -> list[dict]:
    """Train and evaluate each variant with the same seed and data."""
    if not train_set or not test_set:
        raise ValueError("ablation needs non-empty train and test sets")
    rows = []
    for variant in variants:
        cfg = replace(base_config, variant=Variant(variant), init_mode=None)
        params = train(train_set, catalog, cfg).params
        report = evaluate(model_recommender(params, catalog, cfg.variant), test_set, k)
        rows.append(
            {
                "variant": cfg.variant.value,
                "recall_at_k": report.recall_at_k,
                "order_recall_at_k": report.order_recall_at_k,
                "n_total": report.n_total,
                "n_ordered": report.n_ordered,
                "k": k,
            }
        )
    return rows


@dataclass(frozen=True)
class BenchResult:
    p50_ms: float
    p99_ms: float
    mean_ms: float
    reps: int
    n_candidates: int
    k: int
    results: list = field(repr=False)  # per request, in timing order

    @property
    def last_result(self) -> list:
        return self.results[-1] if self.results else []

    def to_dict(self) -> dict:
        out = asdict(self)
        out.pop("results")
        return out


def bench_rank(
    params: ModelParams,
    catalog: Catalog,
    n_candidates: int,
    k: int,
    reps: int,
    requests: Sequence[TrainingExample] | None = None,
    seed: int = 0,
    variant: Variant | None = None,
    check: bool = False,
) -> BenchResult:
    """Time context encoding, scoring and filtered top-``k`` per request.

    Candidate vectors are computed once up front and excluded from timing.
    With ``check`` every result is compared against :func:`rank_candidates`
    (computed once per distinct request, outside the timed region).
    """
    if n_candidates > len(catalog):
        raise ValueError("n_candidates exceeds the catalog size")
    if reps < 1:
        raise ValueError("reps must be >= 1")
    variant = Variant(variant or params.variant)
    rng = np.random.default_rng([seed, 7])
    candidates = np.sort(rng.choice(len(catalog), size=n_candidates, replace=False))
    ranker = Ranker(params, variant, catalog, candidates)
    if requests is None:
        requests = [_random_request(rng, len(catalog)) for _ in range(min(reps, 64))]
    times = np.empty(reps)
    results = []
    for r in range(reps):
        ex = requests[r % len(requests)]
        started = time.perf_counter()
        result = ranker.rank(ranker.encode(ex), k, ex.base, post_filter=True)
        times[r] = (time.perf_counter() - started) * 1000.0
        results.append(result)
    if check:
        for i, ex in enumerate(requests[: min(reps, len(requests))]):
            ref = rank_candidates(ranker.encode(ex), candidates, k, params, variant, True, ex.base, catalog)
            for r in range(i, reps, len(requests)):
                if results[r] != ref:
                    raise AssertionError(f"benchmark ranking diverged from rank_candidates on request {r}")
    return BenchResult(
        p50_ms=float(np.percentile(times, 50)),
        p99_ms=float(np.percentile(times, 99)),
        mean_ms=float(times.mean()),
        reps=reps,
        n_candidates=n_candidates,
        k=k,
        results=results,
    )


def _random_request(rng: np.random.Generator, n_items: int) -> TrainingExample:
    items = rng.choice(n_items, size=21, replace=False)
    return TrainingExample(
        user=0,
        base=int(items[0]),
        target=int(items[1]),
        base_time=0,
        clicks=tuple(int(i) for i in items[1:16]),
        orders=tuple(int(i) for i in items[16:21]),
        ordered_within_day=False,
    )
