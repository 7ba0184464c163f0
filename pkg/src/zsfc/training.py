"""Sampled-softmax training with closed-form gradients and Adam."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from zsfc.catalog import Catalog
from zsfc.model import Batch, ModelParams, Variant, elu_grad, forward, init_params

log = logging.getLogger(__name__)

# named random sub-streams derived from one seed
STREAM_WORLD, STREAM_HISTORIES, STREAM_INIT, STREAM_NEGATIVES, STREAM_SHUFFLE = range(5)


def stream(seed: int, which: int) -> np.random.Generator:
    return np.random.default_rng([seed, which])


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    d: int = 128
    epochs: int = 5
    negatives: int = 2048
    batch_size: int = 64
    seed: int = 0
    variant: Variant = Variant.ZSFC
    init_mode: str | None = None  # None: follow the variant

    def __post_init__(self):
        self.variant = Variant(self.variant)
        if self.learning_rate <= 0 or self.d <= 0 or self.negatives <= 0 or self.batch_size <= 0:
            raise ValueError("learning_rate, d, negatives and batch_size must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")

    @property
    def resolved_init(self) -> str:
        return self.init_mode or self.variant.init_mode


def sample_negatives(vocab: int, n: int, exclude, rng: np.random.Generator) -> np.ndarray:
    """``n`` distinct ids drawn uniformly from ``range(vocab)`` minus ``exclude``."""
    excl = np.unique(np.asarray(sorted(exclude), dtype=np.int64))
    excl = excl[(excl >= 0) & (excl < vocab)]
    pool = vocab - excl.size
    if n > pool:
        raise ValueError(f"cannot draw {n} negatives from {pool} eligible items")
    draws = rng.choice(pool, size=n, replace=False).astype(np.int64)
    # shift past excluded ids, ascending, so the map onto allowed ids is a bijection
    for e in excl:
        draws[draws >= e] += 1
    return draws


def scatter_rows(target: np.ndarray, index: np.ndarray, values: np.ndarray) -> None:
    """``target[index[i]] += values[i]``, accumulating repeats (faster than ``np.add.at``)."""
    index = index.ravel()
    values = values.reshape(index.size, -1)
    sel = sp.csr_matrix(
        (np.ones(index.size, dtype=values.dtype), (index, np.arange(index.size))), shape=(target.shape[0], index.size)
    )
    target += sel @ values


def _log_softmax_terms(z: np.ndarray):
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    total = ez.sum(axis=1, keepdims=True)
    lse = np.log(total) + zmax
    return lse[:, 0], ez / total


def _candidates(examples, negatives) -> np.ndarray:
    """(B, 1 + N) ids: the target in column 0, then that example's negatives."""
    negs = np.asarray(negatives, dtype=np.int64).reshape(len(examples), -1)
    targets = np.fromiter((e.target for e in examples), dtype=np.int64, count=len(examples))
    return np.column_stack([targets, negs])


def batch_loss(examples, negatives, params: ModelParams, variant: Variant, catalog: Catalog, reduction="mean"):
    batch = Batch(examples, _candidates(examples, negatives))
    z = forward(params, variant, batch, catalog.categories)
    if not np.isfinite(z).all():
        raise FloatingPointError("non-finite score")
    lse, _ = _log_softmax_terms(z)
    per = lse - z[:, 0]
    return float(per.mean() if reduction == "mean" else per.sum())


def loss(example, negatives, params: ModelParams, variant: Variant, catalog: Catalog) -> float:
    """Cross-entropy of the target against itself plus ``negatives``."""
    if example.target in set(int(n) for n in negatives):
        raise ValueError("target appears among the negatives")
    return batch_loss([example], [list(negatives)], params, variant, catalog)


def gradients(examples, negatives, params: ModelParams, variant: Variant, catalog: Catalog, reduction="mean"):
    """Loss and exact gradient bundle for a batch (``examples`` may be a single example).

    Returns ``(loss, grads)`` where ``grads`` has the same tensor layout as
    ``params``; embedding rows not touched by the batch stay exactly zero.
    """
    if not isinstance(examples, (list, tuple)):
        examples, negatives = [examples], [negatives]
    variant = Variant(variant)
    batch = Batch(examples, _candidates(examples, negatives))
    cache: dict = {}
    z = forward(params, variant, batch, catalog.categories, cache)
    if not np.isfinite(z).all():
        raise FloatingPointError("non-finite score")
    lse, prob = _log_softmax_terms(z)
    per = lse - z[:, 0]
    scale = 1.0 / len(examples) if reduction == "mean" else 1.0
    total = float(per.mean() if reduction == "mean" else per.sum())

    P = params
    G = params.zeros_like()
    dz = prob
    dz[:, 0] -= 1.0
    dz *= scale
    dz = dz.astype(P.dtype)

    u, q = cache["u"], cache["q"]
    e_click, e_order, e_cand = cache["e_click"], cache["e_order"], cache["e_cand"]
    du = np.zeros_like(u)
    de = np.zeros((3, P.d), dtype=P.dtype)

    # z[b, n] = (u[c_bn] * e_cand) . q[b]; dz as a sparse (items x batch) matrix
    n_cand = batch.candidates.shape[1]
    dz_items = sp.csr_matrix(
        (dz.ravel(), (batch.candidates.ravel(), np.repeat(np.arange(batch.size), n_cand))),
        shape=(u.shape[0], batch.size),
    )
    weighted = np.asarray(dz_items.T @ u)
    dq = weighted * e_cand
    du += np.asarray(dz_items @ (q * e_cand))
    de[2] += (weighted * q).sum(axis=0)

    h_s, h_t, h_o = cache["h_s"], cache["h_t"], cache["h_o"]
    if variant.additive_score:
        dh_s = dh_t = dh_o = dq
    else:
        dh_s, dh_t, dh_o = dq * h_t, dq * h_s, None

    # tanh heads
    da_s = dh_s * (1.0 - h_s * h_s)
    G["session_w"] += cache["x_s"].T @ da_s
    G["session_b"] += da_s.sum(axis=0)
    dx_s = da_s @ P["session_w"].T

    da_t = dh_t * (1.0 - h_t * h_t)
    G["base_w"] += cache["x_t"].T @ da_t
    G["base_b"] += da_t.sum(axis=0)
    dx_t = da_t @ P["base_w"].T

    if variant.uses_orders:
        da_o = dh_o * (1.0 - h_o * h_o)
        G["order_w"] += cache["x_o"].T @ da_o
        G["order_b"] += da_o.sum(axis=0)
        dx_o = da_o @ P["order_w"].T
        dXo = (dx_o / cache["n_orders"][:, None])[:, None, :] * cache["omask"][..., None]
        scatter_rows(du, batch.orders, dXo * e_order)
        de[1] += np.einsum("bkd,bkd->d", dXo, u[batch.orders] * cache["omask"][..., None])

    # attention pooling x_s = sum_j a_j Xc_j, a_j = v . sigmoid(pre_j)
    Xc, cmask, sig, a = cache["Xc"], cache["cmask"], cache["sig"], cache["a"]
    dXc = a[..., None] * dx_s[:, None, :]
    d_a = np.einsum("bkd,bd->bk", Xc, dx_s) * cmask
    G["attn_v"] += np.einsum("bk,bkd->d", d_a, sig)
    dpre = d_a[..., None] * P["attn_v"] * sig * (1.0 - sig)
    G["attn_w1"] += np.einsum("bki,bkj->ij", Xc, dpre)
    dXc += dpre @ P["attn_w1"].T
    dctx = dpre.sum(axis=1)
    G["attn_w2"] += cache["x_t"].T @ dctx
    G["attn_w3"] += cache["mean_c"].T @ dctx
    G["attn_b"] += dctx.sum(axis=0)
    dx_t += dctx @ P["attn_w2"].T
    dmean = dctx @ P["attn_w3"].T
    dXc += (dmean / cache["n_clicks"][:, None])[:, None, :]
    dXc *= cmask[..., None]

    # item vectors scaled per event type
    scatter_rows(du, batch.clicks, dXc * e_click)
    de[0] += np.einsum("bkd,bkd->d", dXc, u[batch.clicks] * cmask[..., None])
    scatter_rows(du, batch.base, dx_t * e_cand)
    de[2] += (dx_t * u[batch.base]).sum(axis=0)

    f = cache["fuse"]
    items = batch.items
    if variant.uses_category:
        G["event_emb"] += de
        dA1 = du * elu_grad(f["A1"])
        G["fuse_w1"] += f["H"].T @ dA1
        G["fuse_b1"] += dA1.sum(axis=0)
        dA2 = (dA1 @ P["fuse_w1"].T) * elu_grad(f["A2"])
        G["fuse_w2"] += f["D"].T @ dA2
        G["fuse_b2"] += dA2.sum(axis=0)
        dD = dA2 @ P["fuse_w2"].T
        d = P.d
        d_m, d_mg, d_g = dD[:, :d], dD[:, d : 2 * d], dD[:, 2 * d :]
        G["item_emb"][items] += d_m + d_mg * f["gc"]
        scatter_rows(G["category_emb"], f["cats"], d_mg * f["m"] + d_g)
    else:
        G["item_emb"][items] += du
    return total, G


class Adam:
    def __init__(self, params: ModelParams, lr: float = 5e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.step_count = 0

    def step(self, params: ModelParams, grads: ModelParams) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for name, theta in params.tensors.items():
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            theta -= (self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)).astype(theta.dtype)


def adam_step(params: ModelParams, grads: ModelParams, state: Adam, lr: float | None = None) -> None:
    if lr is not None:
        state.lr = lr
    state.step(params, grads)


@dataclass
class TrainResult:
    params: ModelParams
    epoch_log: list[dict] = field(default_factory=list)
    negatives_used: int = 0


def train(
    dataset: Sequence,
    catalog: Catalog,
    config: TrainConfig,
    log_path=None,
    params: ModelParams | None = None,
) -> TrainResult:
    """Minibatch Adam on the sampled softmax; deterministic for a given seed."""
    if len(dataset) == 0:
        raise ValueError("empty training dataset")
    variant = config.variant
    if params is None:
        params = init_params(catalog, config.d, config.resolved_init, config.seed, variant)
    n_neg = min(config.negatives, len(catalog) - 2)
    if n_neg < config.negatives:
        log.info("negatives capped at %d for a catalog of %d items", n_neg, len(catalog))
    if n_neg < 1:
        raise ValueError("catalog too small to draw negatives")

    opt = Adam(params, config.learning_rate)
    neg_rng = stream(config.seed, STREAM_NEGATIVES)
    shuffle_rng = stream(config.seed, STREAM_SHUFFLE)
    result = TrainResult(params, negatives_used=n_neg)
    log_fh = open(log_path, "w", encoding="utf-8") if log_path is not None else None
    try:
        for epoch in range(1, config.epochs + 1):
            started = time.perf_counter()
            order = shuffle_rng.permutation(len(dataset))
            losses = []
            for lo in range(0, len(order), config.batch_size):
                chunk = [dataset[i] for i in order[lo : lo + config.batch_size]]
                negs = [sample_negatives(len(catalog), n_neg, {e.target, e.base}, neg_rng) for e in chunk]
                value, grads = gradients(chunk, negs, params, variant, catalog)
                if not np.isfinite(value):
                    raise FloatingPointError(f"non-finite loss at epoch {epoch}, batch starting {lo}")
                opt.step(params, grads)
                losses.append(value * len(chunk))
            record = {
                "epoch": epoch,
                "mean_loss": float(np.sum(losses) / len(dataset)),
                "wall_ms": round((time.perf_counter() - started) * 1000.0, 3),
            }
            result.epoch_log.append(record)
            log.info("epoch %d mean loss %.5f", epoch, record["mean_loss"])
            if log_fh is not None:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
    finally:
        if log_fh is not None:
            log_fh.close()
    return result
