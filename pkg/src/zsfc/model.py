"""Session encoder and candidate scoring.

All matrices act on row vectors (``x @ W``), so ``W`` of shape (in, out)
plays the role of the transposed weight in column notation.

Item representation, with the metadata fusion enabled::

    d_i = [m_i, m_i * g_i, g_i]
    x_i = elu(elu(d_i @ W2 + b2) @ W1 + b1) * (1 + t_e)

and ``x_i = m_i`` otherwise. A context is summarised by three tanh heads
(clicks via attention, base item, mean of recent orders) and candidates are
scored either with the three-way product ``sum(h_s * h_t * x_c)`` or with
``(h_o + h_s + h_t) @ x_c`` for variants that use order events.
"""

from __future__ import annotations

import enum
from collections import OrderedDict
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from zsfc.catalog import Catalog


class Variant(str, enum.Enum):
    STAMP = "stamp"
    STAMP_ORDERS = "stamp+orders"
    STAMP_CATEGORY = "stamp+category"
    STAMP_IMAGE = "stamp+image"
    ZSFC = "zsfc"

    @property
    def uses_orders(self) -> bool:
        return self in (Variant.STAMP_ORDERS, Variant.ZSFC)

    @property
    def uses_category(self) -> bool:
        return self in (Variant.STAMP_CATEGORY, Variant.ZSFC)

    @property
    def uses_image(self) -> bool:
        return self in (Variant.STAMP_IMAGE, Variant.ZSFC)

    @property
    def additive_score(self) -> bool:
        # the order head only has a slot in the summed score
        return self.uses_orders

    @property
    def init_mode(self) -> str:
        return "image" if self.uses_image else "xavier"


class Event(enum.IntEnum):
    """Rows of the event-type embedding table."""

    CLICK = 0
    ORDER = 1
    CANDIDATE = 2


# name -> shape builder (n_items, n_categories, d)
PARAM_SHAPES = OrderedDict(
    item_emb=lambda n, g, d: (n, d),
    category_emb=lambda n, g, d: (g, d),
    event_emb=lambda n, g, d: (3, d),
    fuse_w2=lambda n, g, d: (3 * d, d),
    fuse_b2=lambda n, g, d: (d,),
    fuse_w1=lambda n, g, d: (d, d),
    fuse_b1=lambda n, g, d: (d,),
    session_w=lambda n, g, d: (d, d),
    session_b=lambda n, g, d: (d,),
    base_w=lambda n, g, d: (d, d),
    base_b=lambda n, g, d: (d,),
    order_w=lambda n, g, d: (d, d),
    order_b=lambda n, g, d: (d,),
    attn_w1=lambda n, g, d: (d, d),
    attn_w2=lambda n, g, d: (d, d),
    attn_w3=lambda n, g, d: (d, d),
    attn_b=lambda n, g, d: (d,),
    attn_v=lambda n, g, d: (d,),
)


@dataclass
class ModelParams:
    tensors: "OrderedDict[str, np.ndarray]"
    variant: Variant = Variant.ZSFC
    seed: int = 0

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self.tensors[name] = value

    @property
    def d(self) -> int:
        return self.tensors["item_emb"].shape[1]

    @property
    def n_items(self) -> int:
        return self.tensors["item_emb"].shape[0]

    @property
    def n_categories(self) -> int:
        return self.tensors["category_emb"].shape[0]

    @property
    def dtype(self):
        return self.tensors["item_emb"].dtype

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            OrderedDict((k, v.astype(dtype, copy=True)) for k, v in self.tensors.items()), self.variant, self.seed
        )

    def copy(self) -> "ModelParams":
        return self.astype(self.dtype)

    def zeros_like(self) -> "ModelParams":
        return ModelParams(OrderedDict((k, np.zeros_like(v)) for k, v in self.tensors.items()), self.variant, self.seed)

    def check(self) -> None:
        n, g, d = self.n_items, self.n_categories, self.d
        for name, shape_fn in PARAM_SHAPES.items():
            arr = self.tensors[name]
            if arr.shape != shape_fn(n, g, d):
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape_fn(n, g, d)}")
            if not np.isfinite(arr).all():
                raise ValueError(f"{name} contains non-finite values")


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_params(
    catalog: Catalog,
    d: int = 128,
    mode: str = "xavier",
    seed: int = 0,
    variant: Variant = Variant.ZSFC,
    dtype=np.float32,
) -> ModelParams:
    """Xavier-uniform weights, zero biases; ``mode="image"`` copies image features into item rows."""
    if mode not in ("xavier", "image"):
        raise ValueError(f"unknown init mode {mode!r}")
    rng = np.random.default_rng([seed, 2])
    n, g = len(catalog), catalog.n_categories
    tensors = OrderedDict()
    for name, shape_fn in PARAM_SHAPES.items():
        shape = shape_fn(n, g, d)
        if name.endswith("_b") or name.endswith("_b1") or name.endswith("_b2"):
            tensors[name] = np.zeros(shape, dtype=dtype)
            continue
        fan_in, fan_out = shape if len(shape) == 2 else (shape[0], 1)
        bound = xavier_bound(fan_in, fan_out)
        tensors[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    if mode == "image":
        if catalog.image_features is None or not catalog.has_features().all():
            raise ValueError("image initialisation needs image features for every catalog item")
        if catalog.feature_dim != d:
            raise ValueError(f"image features have dimension {catalog.feature_dim}, model uses {d}")
        tensors["item_emb"] = catalog.image_features.astype(dtype, copy=True)
    return ModelParams(tensors, Variant(variant), seed)


def elu(x):
    x = np.asarray(x)
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0)))


def elu_grad(x):
    x = np.asarray(x)
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0))).astype(x.dtype)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def base_vectors(params: ModelParams, variant: Variant, items: np.ndarray, catalog_categories: np.ndarray, cache=None):
    """Event-independent item vectors ``u`` (rows of ``items``).

    When ``cache`` is a dict, intermediates needed for backpropagation are
    stored in it.
    """
    m = params["item_emb"][items]
    if not variant.uses_category:
        if cache is not None:
            cache.update(items=items, m=m)
        return m
    cats = catalog_categories[items]
    gc = params["category_emb"][cats]
    D = np.concatenate([m, m * gc, gc], axis=1)
    A2 = D @ params["fuse_w2"] + params["fuse_b2"]
    H = elu(A2)
    A1 = H @ params["fuse_w1"] + params["fuse_b1"]
    u = elu(A1)
    if cache is not None:
        cache.update(items=items, cats=cats, m=m, gc=gc, D=D, A2=A2, H=H, A1=A1)
    return u


def event_scale(params: ModelParams, variant: Variant, event: Event) -> np.ndarray:
    if not variant.uses_category:
        return np.ones(params.d, dtype=params.dtype)
    return 1.0 + params["event_emb"][int(event)]


def fuse_item_embedding(item: int, event: Event, params: ModelParams, variant: Variant, catalog: Catalog) -> np.ndarray:
    catalog._check(item)
    u = base_vectors(params, variant, np.array([item]), catalog.categories)[0]
    return u * event_scale(params, variant, event)


def attention_pool(session, base, params: ModelParams) -> np.ndarray:
    """Unnormalised attention pooling of session vectors conditioned on the base vector."""
    session = np.asarray(session, dtype=params.dtype).reshape(-1, params.d)
    if session.shape[0] == 0:
        return np.zeros(params.d, dtype=params.dtype)
    mean = session.mean(axis=0)
    pre = session @ params["attn_w1"] + (base @ params["attn_w2"] + mean @ params["attn_w3"] + params["attn_b"])
    weights = sigmoid(pre) @ params["attn_v"]
    return weights @ session


@dataclass
class ContextEncoding:
    h_s: np.ndarray
    h_t: np.ndarray
    h_o: np.ndarray
    x_s: np.ndarray


def _pad(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    width = max(1, max((len(s) for s in seqs), default=0))
    idx = np.zeros((len(seqs), width), dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for r, s in enumerate(seqs):
        idx[r, : len(s)] = s
        mask[r, : len(s)] = True
    return idx, mask


class Batch:
    """Index arrays for a set of examples, remapped onto their unique items."""

    def __init__(self, examples, candidates: Sequence[Sequence[int]] | None = None):
        clicks, self.click_mask = _pad([e.clicks for e in examples])
        orders, self.order_mask = _pad([e.orders for e in examples])
        base = np.array([e.base for e in examples], dtype=np.int64)
        parts = [clicks[self.click_mask], orders[self.order_mask], base]
        cand = None
        if candidates is not None:
            cand = np.asarray(candidates, dtype=np.int64)
            parts.append(cand.ravel())
        self.items = np.unique(np.concatenate(parts))
        lookup = np.zeros(int(self.items[-1]) + 1, dtype=np.int64)
        lookup[self.items] = np.arange(self.items.size)
        remap = lookup.__getitem__
        self.clicks = np.where(self.click_mask, remap(clicks), 0) if clicks.size else clicks
        self.orders = np.where(self.order_mask, remap(orders), 0) if orders.size else orders
        self.base = remap(base)
        self.candidates = remap(cand) if cand is not None else None
        self.size = len(examples)


def encode_batch(params: ModelParams, variant: Variant, batch: Batch, u: np.ndarray, cache=None):
    """Heads for every example in ``batch`` given unique-item vectors ``u``."""
    dt = params.dtype
    e_click = event_scale(params, variant, Event.CLICK)
    e_order = event_scale(params, variant, Event.ORDER)
    e_cand = event_scale(params, variant, Event.CANDIDATE)

    cmask = batch.click_mask.astype(dt)
    Xc = u[batch.clicks] * e_click * cmask[..., None]
    n_clicks = np.maximum(cmask.sum(axis=1), 1.0)
    mean_c = Xc.sum(axis=1) / n_clicks[:, None]
    x_t = u[batch.base] * e_cand

    ctx = x_t @ params["attn_w2"] + mean_c @ params["attn_w3"] + params["attn_b"]
    pre = Xc @ params["attn_w1"] + ctx[:, None, :]
    sig = sigmoid(pre)
    a = (sig @ params["attn_v"]) * cmask
    x_s = np.einsum("bk,bkd->bd", a, Xc)

    h_s = np.tanh(x_s @ params["session_w"] + params["session_b"])
    h_t = np.tanh(x_t @ params["base_w"] + params["base_b"])
    if variant.uses_orders:
        omask = batch.order_mask.astype(dt)
        Xo = u[batch.orders] * e_order * omask[..., None]
        n_orders = np.maximum(omask.sum(axis=1), 1.0)
        x_o = Xo.sum(axis=1) / n_orders[:, None]
        h_o = np.tanh(x_o @ params["order_w"] + params["order_b"])
    else:
        omask = n_orders = Xo = x_o = None
        h_o = np.zeros_like(h_s)

    if cache is not None:
        cache.update(
            e_click=e_click, e_order=e_order, e_cand=e_cand, cmask=cmask, Xc=Xc, n_clicks=n_clicks,
            mean_c=mean_c, x_t=x_t, sig=sig, a=a, x_s=x_s, h_s=h_s, h_t=h_t, h_o=h_o,
            omask=omask, Xo=Xo, n_orders=n_orders, x_o=x_o,
        )
    return h_s, h_t, h_o, x_s


def query_vector(h_s, h_t, h_o, variant: Variant):
    """Vector ``q`` such that the candidate score is ``x_c @ q``."""
    if variant.additive_score:
        return h_o + h_s + h_t
    return h_s * h_t


def forward(params: ModelParams, variant: Variant, batch: Batch, categories: np.ndarray, cache=None):
    """Candidate scores (B, C) for a batch built with candidates."""
    fcache = {} if cache is not None else None
    u = base_vectors(params, variant, batch.items, categories, fcache)
    h_s, h_t, h_o, _ = encode_batch(params, variant, batch, u, cache)
    q = query_vector(h_s, h_t, h_o, variant)
    # score every unique item against every query, then gather per candidate
    table = u @ (q * event_scale(params, variant, Event.CANDIDATE)).T
    z = table[batch.candidates, np.arange(batch.size)[:, None]]
    if cache is not None:
        cache.update(fuse=fcache, u=u, q=q)
    return z


def encode_context(example, params: ModelParams, variant: Variant, catalog: Catalog) -> ContextEncoding:
    for i in (*example.clicks, *example.orders, example.base):
        catalog._check(i)
    batch = Batch([example])
    u = base_vectors(params, variant, batch.items, catalog.categories)
    h_s, h_t, h_o, x_s = encode_batch(params, variant, batch, u)
    return ContextEncoding(h_s[0], h_t[0], h_o[0], x_s[0])


def score_trilinear(h_s, h_t, x) -> float:
    h_s, h_t, x = (np.asarray(v) for v in (h_s, h_t, x))
    if not h_s.shape == h_t.shape == x.shape:
        raise ValueError(f"length mismatch: {h_s.shape}, {h_t.shape}, {x.shape}")
    return float(np.sum(h_s * h_t * x))


def score_sum(h_o, h_s, h_t, x) -> float:
    h_o, h_s, h_t, x = (np.asarray(v) for v in (h_o, h_s, h_t, x))
    if not h_o.shape == h_s.shape == h_t.shape == x.shape:
        raise ValueError(f"length mismatch: {h_o.shape}, {h_s.shape}, {h_t.shape}, {x.shape}")
    return float(np.dot(h_o + h_s + h_t, x))


def top_k(ids: np.ndarray, scores: np.ndarray, k: int) -> list[tuple[int, float]]:
    """Highest ``k`` scores, ties broken by ascending id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    ids = np.asarray(ids)
    scores = np.asarray(scores)
    if ids.size > k:
        part = np.argpartition(-scores, k - 1)[:k]
        threshold = scores[part].min()
        keep = scores >= threshold
        ids, scores = ids[keep], scores[keep]
    order = np.lexsort((ids, -scores))[:k]
    return [(int(ids[i]), float(scores[i])) for i in order]


class Ranker:
    """Scores contexts against a precomputed table of candidate vectors."""

    def __init__(self, params: ModelParams, variant: Variant, catalog: Catalog, candidates=None):
        self.params = params
        self.variant = Variant(variant)
        self.catalog = catalog
        self.candidates = (
            np.arange(len(catalog), dtype=np.int64) if candidates is None else np.asarray(candidates, dtype=np.int64)
        )
        u = base_vectors(params, self.variant, self.candidates, catalog.categories)
        self.table = np.ascontiguousarray(u * event_scale(params, self.variant, Event.CANDIDATE))

    def encode(self, example) -> ContextEncoding:
        return encode_context(example, self.params, self.variant, self.catalog)

    def query(self, ctx: ContextEncoding) -> np.ndarray:
        return query_vector(ctx.h_s, ctx.h_t, ctx.h_o, self.variant)

    def scores(self, ctx: ContextEncoding) -> np.ndarray:
        return self.table @ self.query(ctx)

    def rank(self, ctx: ContextEncoding, k: int, base: int | None = None, post_filter: bool = True):
        scores = self.scores(ctx)
        ids = self.candidates
        if post_filter:
            keep = self.catalog.complementary_mask(base, ids)
            ids, scores = ids[keep], scores[keep]
        return top_k(ids, scores, k)

    def recommend(self, example, k: int, post_filter: bool = True) -> list[int]:
        return [i for i, _ in self.rank(self.encode(example), k, example.base, post_filter)]


def rank_candidates(
    ctx: ContextEncoding,
    candidates: Sequence[int],
    k: int,
    params: ModelParams,
    variant: Variant,
    post_filter: bool,
    base: int,
    catalog: Catalog,
) -> list[tuple[int, float]]:
    """Top-``k`` (item, score) pairs among ``candidates`` for an encoded context."""
    return Ranker(params, variant, catalog, candidates).rank(ctx, k, base, post_filter)
