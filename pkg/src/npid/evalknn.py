"""Evaluation on frozen features: weighted kNN, retrieval, linear probe, bench.

All neighbor search here is exhaustive. Ties in similarity (and in class
weight) are broken towards the smaller index.
"""
from __future__ import annotations

import os
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

DEFAULT_CHUNK = 1 << 16


@dataclass
class KnnConfig:
    k: int = 200
    tau: float = 0.07

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if not self.tau > 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")


class PackedBank:
    """Immutable row-major little-endian float32 features with class labels."""

    def __init__(self, features, labels=None, check: bool = True):
        feats = np.ascontiguousarray(features, dtype="<f4")
        if feats.ndim != 2 or feats.shape[0] < 1:
            raise ValueError(f"packed bank needs a non-empty n x dim matrix, got {feats.shape}")
        if check:
            norms = np.linalg.norm(feats, axis=1)
            if np.abs(norms - 1).max() > 1e-3:
                raise ValueError("packed bank rows must be unit-norm within 1e-3")
        feats.flags.writeable = False
        self.features = feats
        if labels is None:
            labels = np.full(feats.shape[0], -1, dtype=np.int64)
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (feats.shape[0],):
            raise ValueError(f"labels shape {labels.shape} does not match {feats.shape[0]} rows")
        labels.flags.writeable = False
        self.labels = labels

    @classmethod
    def from_bank(cls, bank, labels=None) -> "PackedBank":
        return cls(bank.export_f32(), labels)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def nbytes(self) -> int:
        return self.n * self.dim * 4

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1


def packed_nbytes(n: int, dim: int) -> int:
    return n * dim * 4


def synth_packed_bank(n: int, dim: int, seed: int = 0, chunk: int = 1 << 18) -> PackedBank:
    """Random unit rows built chunk by chunk, so peak memory stays near ``n * dim * 4``."""
    rng = np.random.default_rng(seed)
    out = np.empty((n, dim), dtype="<f4")
    for s in range(0, n, chunk):
        g = rng.standard_normal((min(chunk, n - s), dim), dtype=np.float32)
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        out[s : s + g.shape[0]] = g
    return PackedBank(out, check=False)


def _as_query(query, dim: int) -> np.ndarray:
    q = np.asarray(query, dtype=np.float32).reshape(-1)
    if q.size != dim:
        raise ValueError(f"query has dim {q.size}, bank has dim {dim}")
    return q


def _select_topk(sims: np.ndarray, offset: int, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Top ``k`` of one chunk, keeping every entry tied with the k-th value."""
    if sims.size <= k:
        keep = np.arange(sims.size)
    else:
        kth = np.partition(sims, sims.size - k)[sims.size - k]
        keep = np.flatnonzero(sims >= kth)
    return sims[keep], keep + offset


def _rank(sims: np.ndarray, idx: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.lexsort((idx, -sims.astype(np.float64)))[:k]
    return idx[order], sims[order]


def _scan(features: np.ndarray, q: np.ndarray, k: int, offset: int, chunk: int):
    vals, ids = [], []
    for s in range(0, features.shape[0], chunk):
        sims = features[s : s + chunk] @ q
        v, i = _select_topk(sims, offset + s, k)
        vals.append(v)
        ids.append(i)
    return np.concatenate(vals), np.concatenate(ids)


def retrieve(bank: PackedBank, query, topk: int, chunk: int = DEFAULT_CHUNK,
             threads: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Indices and cosine similarities of the ``topk`` nearest rows, best first."""
    if topk < 1:
        raise ValueError("topk must be >= 1")
    if topk > bank.n:
        raise ValueError(f"topk={topk} exceeds bank size {bank.n}")
    q = _as_query(query, bank.dim)
    if threads <= 1:
        vals, ids = _scan(bank.features, q, topk, 0, chunk)
    else:
        bounds = np.linspace(0, bank.n, threads + 1).astype(int)
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(
                lambda ab: _scan(bank.features[ab[0] : ab[1]], q, topk, ab[0], chunk),
                zip(bounds[:-1], bounds[1:]),
            ))
        vals = np.concatenate([p[0] for p in parts])
        ids = np.concatenate([p[1] for p in parts])
    return _rank(vals, ids, topk)


def _topk_mask(sims: np.ndarray, k: int) -> np.ndarray:
    """Boolean ``[B, n]`` mask of each row's top ``k``, ties to the smaller index."""
    n = sims.shape[1]
    if k >= n:
        return np.ones_like(sims, dtype=bool)
    kth = np.partition(sims, n - k, axis=1)[:, n - k][:, None]
    above = sims > kth
    need = k - above.sum(axis=1, keepdims=True)
    eq = sims == kth
    return above | (eq & (np.cumsum(eq, axis=1) <= need))


def class_weights(bank: PackedBank, queries, cfg: KnnConfig, query_chunk: int = 256) -> np.ndarray:
    """``w_c = sum_{i in N_k} exp(s_i / tau) [c_i = c]`` for each query row."""
    if cfg.k > bank.n:
        raise ValueError(f"k={cfg.k} exceeds bank size {bank.n}")
    if bank.labels.min() < 0:
        raise ValueError("kNN classification needs a labeled bank")
    q = np.atleast_2d(np.asarray(queries, dtype=np.float32))
    onehot = np.zeros((bank.n, bank.num_classes))
    onehot[np.arange(bank.n), bank.labels] = 1.0
    out = []
    for s in range(0, q.shape[0], query_chunk):
        sims = q[s : s + query_chunk] @ bank.features.T
        mask = _topk_mask(sims, cfg.k)
        alpha = np.where(mask, np.exp(sims.astype(np.float64) / cfg.tau), 0.0)
        out.append(alpha @ onehot)
    return np.concatenate(out, axis=0)


def knn_predict(bank: PackedBank, queries, cfg: KnnConfig) -> np.ndarray:
    return class_weights(bank, queries, cfg).argmax(axis=1)


def knn_classify(bank: PackedBank, query, cfg: KnnConfig) -> tuple[int, np.ndarray]:
    """Predicted class and per-class vote weights for one query."""
    w = class_weights(bank, _as_query(query, bank.dim)[None, :], cfg)[0]
    return int(w.argmax()), w


def knn_accuracy(bank: PackedBank, queries, query_labels, cfg: KnnConfig) -> float:
    labels = np.asarray(query_labels, dtype=np.int64).reshape(-1)
    q = np.asarray(queries)
    if q.shape[0] == 0:
        raise ValueError("knn_accuracy needs at least one query")
    if labels.shape[0] != q.shape[0]:
        raise ValueError(f"{q.shape[0]} queries but {labels.shape[0]} labels")
    return float(np.mean(knn_predict(bank, q, cfg) == labels))


# --- linear probe -------------------------------------------------------------

@dataclass
class ProbeConfig:
    steps: int = 500
    lr: float = 0.5
    momentum: float = 0.9
    weight_decay: float = 1e-4
    holdout: float = 0.2
    seed: int = 0


def _fit_logistic(x: np.ndarray, y: np.ndarray, classes: int, cfg: ProbeConfig):
    n, d = x.shape
    w = np.zeros((d, classes))
    b = np.zeros(classes)
    vw = np.zeros_like(w)
    vb = np.zeros_like(b)
    onehot = np.zeros((n, classes))
    onehot[np.arange(n), y] = 1.0
    for _ in range(cfg.steps):
        logits = x @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        delta = (p - onehot) / n
        vw = cfg.momentum * vw + x.T @ delta + cfg.weight_decay * w
        vb = cfg.momentum * vb + delta.sum(axis=0)
        w -= cfg.lr * vw
        b -= cfg.lr * vb
    return w, b


def linear_probe(features, labels, cfg: ProbeConfig | None = None,
                 test_features=None, test_labels=None) -> float:
    """Held-out top-1 accuracy of a softmax-regression probe on frozen features.

    Without an explicit test set a seeded ``cfg.holdout`` fraction is held out.
    """
    cfg = cfg or ProbeConfig()
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if np.unique(y).size < 2:
        raise ValueError("linear probe needs at least two classes")
    if test_features is None:
        perm = np.random.default_rng(cfg.seed).permutation(len(y))
        cut = int(round(len(y) * (1 - cfg.holdout)))
        tr, te = perm[:cut], perm[cut:]
        x_test, y_test = x[te], y[te]
        x, y = x[tr], y[tr]
    else:
        x_test = np.asarray(test_features, dtype=np.float64)
        y_test = np.asarray(test_labels, dtype=np.int64)
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd[sd == 0] = 1.0
    classes = int(max(y.max(), y_test.max())) + 1
    w, b = _fit_logistic((x - mu) / sd, y, classes, cfg)
    pred = (((x_test - mu) / sd) @ w + b).argmax(axis=1)
    return float(np.mean(pred == y_test))


# --- benchmark ----------------------------------------------------------------

def default_threads() -> int:
    env = os.environ.get("NPID_THREADS")
    return int(env) if env else (os.cpu_count() or 1)


def machine_descriptor() -> dict:
    return {
        "platform": platform.platform(),
        "processor": platform.processor() or platform.machine(),
        "cpu_count": os.cpu_count(),
        "python": platform.python_version(),
        "numpy": np.__version__,
    }


def bench_query(bank: PackedBank, queries, repetitions: int = 1, topk: int = 10,
                threads: int = 1, chunk: int = DEFAULT_CHUNK) -> dict:
    """Latency of exhaustive top-k retrieval per query, plus the bank's byte size."""
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    q = np.atleast_2d(np.asarray(queries, dtype=np.float32))
    retrieve(bank, q[0], topk, chunk, threads)  # warm-up
    lat = []
    t_all = time.perf_counter()
    for _ in range(repetitions):
        for row in q:
            t0 = time.perf_counter()
            retrieve(bank, row, topk, chunk, threads)
            lat.append(time.perf_counter() - t0)
    wall = time.perf_counter() - t_all
    lat_us = np.array(lat) * 1e6
    return {
        "n": bank.n,
        "dim": bank.dim,
        "bytes": bank.nbytes,
        "p50_us": float(np.percentile(lat_us, 50)),
        "p99_us": float(np.percentile(lat_us, 99)),
        "qps": len(lat) / wall,
        "threads": threads,
    }
