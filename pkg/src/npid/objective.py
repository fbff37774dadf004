"""Instance-discrimination losses and their analytic feature gradients.

All losses take features ``f`` that are already unit-norm; the encoder's
normalization layer takes care of projecting gradients onto the sphere. Memory
bank rows are constants here: no gradient ever flows into them.

Every loss returns ``(value, grad)`` where ``grad`` has the shape of the
features it was computed for.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .membank import MemoryBank
from .tensor import LOG_FLOOR


# above this many batch x bank entries, noise rows are gathered instead
_DENSE_LIMIT = 1 << 24
Z_REFRESH = ("never", "epoch", "batch")


class StateError(RuntimeError):
    pass


def _rows(bank) -> np.ndarray:
    return bank.features if isinstance(bank, MemoryBank) else np.asarray(bank, dtype=np.float64)


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ValueError(f"temperature must be > 0, got {tau}")


def _logsumexp_rows(logits: np.ndarray) -> np.ndarray:
    top = logits.max(axis=1, keepdims=True)
    return (top + np.log(np.exp(logits - top).sum(axis=1, keepdims=True)))[:, 0]


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class NceConfig:
    m: int = 4096
    tau: float = 0.07
    z_estimate: float | None = None
    # subset size for the Monte-Carlo partition estimate; None -> use m
    z_samples: int | None = None
    # when to refresh Z: "never" (first batch only), "epoch", or "batch"
    z_refresh: str = "never"

    def __post_init__(self):
        if self.m < 1:
            raise ValueError(f"NCE needs at least one noise sample (m >= 1), got m={self.m}")
        _check_tau(self.tau)
        if self.z_estimate is not None and not self.z_estimate > 0:
            raise ValueError(f"partition estimate must be > 0, got {self.z_estimate}")
        if self.z_samples is not None and self.z_samples < 1:
            raise ValueError(f"z_samples must be >= 1, got {self.z_samples}")
        if self.z_refresh not in Z_REFRESH:
            raise ValueError(f"z_refresh must be one of {Z_REFRESH}, got {self.z_refresh!r}")

    def effective_m(self, n: int) -> int:
        if n < 2:
            raise ValueError(f"NCE needs at least two instances (one distinct noise), got n={n}")
        return min(self.m, n - 1)


@dataclass
class ProximalConfig:
    lam: float = 0.5

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"proximal weight must be >= 0, got {self.lam}")


@dataclass
class ParametricHead:
    """One weight vector per instance-class, ``[n, dim]``."""

    weights: np.ndarray = field(repr=False)

    @classmethod
    def init(cls, n: int, dim: int, rng: np.random.Generator, scale: float = 0.01) -> "ParametricHead":
        return cls(rng.standard_normal((n, dim)) * scale)


def parametric_softmax_loss(head: ParametricHead, features, targets):
    """Mean ``-log P(i|f)`` with ``P(i|f) = softmax_i(W f)``.

    Returns ``(loss, grad_features, grad_weights)``.
    """
    w = head.weights
    f = np.atleast_2d(np.asarray(features, dtype=np.float64))
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if f.shape[1] != w.shape[1] or t.shape[0] != f.shape[0]:
        raise ValueError(f"features {f.shape}, targets {t.shape} do not match head {w.shape}")
    if t.size and (t.min() < 0 or t.max() >= w.shape[0]):
        raise IndexError(f"target out of range for {w.shape[0]} classes")
    b = f.shape[0]
    logits = f @ w.T
    loss = float(np.mean(_logsumexp_rows(logits) - logits[np.arange(b), t]))
    delta = _softmax_rows(logits)
    delta[np.arange(b), t] -= 1.0
    delta /= b
    return loss, delta @ w, delta.T @ f


def np_softmax_prob(bank, f, tau: float) -> np.ndarray:
    """``P(i|f) = exp(v_i . f / tau) / sum_j exp(v_j . f / tau)`` over all bank rows."""
    _check_tau(tau)
    logits = (_rows(bank) @ np.asarray(f, dtype=np.float64)) / tau
    e = np.exp(logits - logits.max())
    return e / e.sum()


def full_softmax_loss(bank, features, targets, tau: float):
    """Mean negative log-likelihood of each feature's own bank row."""
    _check_tau(tau)
    v = _rows(bank)
    f = np.atleast_2d(np.asarray(features, dtype=np.float64))
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    b = f.shape[0]
    logits = (f @ v.T) / tau
    loss = float(np.mean(_logsumexp_rows(logits) - logits[np.arange(b), t]))
    delta = _softmax_rows(logits)
    delta[np.arange(b), t] -= 1.0
    return loss, (delta @ v) / (tau * b)


def estimate_z(bank, f, tau: float, sample_count: int, rng: np.random.Generator | int | None = None,
               indices=None) -> float:
    """Monte-Carlo partition estimate ``(n / m') * sum_k exp(v_{j_k} . f / tau)``.

    ``f`` may be one feature or a batch; for a batch every row draws its own
    ``sample_count`` indices and the per-row estimates are averaged. Passing
    ``indices`` (``[m']`` shared, or ``[B, m']`` per row) replaces the uniform draw.
    """
    _check_tau(tau)
    if sample_count < 1:
        raise ValueError(f"sample_count must be >= 1, got {sample_count}")
    v = _rows(bank)
    n = v.shape[0]
    f = np.atleast_2d(np.asarray(f, dtype=np.float64))
    if indices is None:
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        idx = rng.integers(0, n, size=(f.shape[0], sample_count))
    else:
        idx = np.asarray(indices, dtype=np.int64)
        idx = np.broadcast_to(idx, (f.shape[0], idx.shape[-1]))
    if f.shape[0] * n <= _DENSE_LIMIT:
        sims = np.take_along_axis(f @ v.T, idx, axis=1)
    else:
        sims = np.stack([v[row] @ x for row, x in zip(idx, f)])
    return float(n * np.mean(np.exp(sims / tau)))


def exact_z(bank, f, tau: float) -> float:
    return float(np.exp((_rows(bank) @ np.asarray(f, dtype=np.float64)) / tau).sum())


def nce_posterior(p_model, n: int, m: int):
    """``h = P / (P + m / n)``: posterior that a sample came from the data."""
    return p_model / (p_model + m / n)


def _nce_terms(v: np.ndarray, f: np.ndarray, pos: np.ndarray, noise: np.ndarray,
               tau: float, z: float):
    """Per-row NCE losses ``[B]`` and gradients ``[B, D]`` (not averaged)."""
    n = v.shape[0]
    b, m = noise.shape
    c = m / n
    vp = v[pos]
    dense = b * n <= _DENSE_LIMIT
    if dense:
        sims_all = f @ v.T
        noise_sims = np.take_along_axis(sims_all, noise, axis=1)
    else:
        noise_sims = np.einsum("bkd,bd->bk", v[noise], f)
    # log-odds a = s / tau - log Z - log c, so h = sigmoid(a) and 1 - h = sigmoid(-a)
    shift = np.log(z) + np.log(c)
    a_pos = np.einsum("bd,bd->b", vp, f) / tau - shift
    a_noise = noise_sims / tau - shift
    log_h_pos = -np.logaddexp(0.0, -a_pos)
    log_1mh_noise = -np.logaddexp(0.0, a_noise)
    floor = np.log(LOG_FLOOR)
    loss = -np.maximum(log_h_pos, floor) - np.maximum(log_1mh_noise, floor).sum(axis=1)
    # d(-log h)/ds = -(1 - h), d(-log(1 - h))/ds = h, with s = v . f / tau; zero where clamped
    w_pos = np.where(log_h_pos > floor, -np.exp(-np.logaddexp(0.0, a_pos)), 0.0)
    w_noise = np.where(log_1mh_noise > floor, np.exp(-np.logaddexp(0.0, -a_noise)), 0.0)
    if dense:
        flat = (np.arange(b)[:, None] * n + noise).ravel()
        scatter = np.bincount(flat, weights=w_noise.ravel(), minlength=b * n).reshape(b, n)
        noise_grad = scatter @ v
    else:
        noise_grad = np.einsum("bk,bkd->bd", w_noise, v[noise])
    grad = (w_pos[:, None] * vp + noise_grad) / tau
    return loss, grad


def nce_loss(bank, f, positive_index: int, noise_indices, cfg: NceConfig):
    """``-log h(i, v) - sum_k log(1 - h(i, v'_k))`` for a single feature."""
    if cfg.z_estimate is None:
        raise StateError("partition constant Z is not set; call estimate_z first")
    v = _rows(bank)
    noise = np.asarray(noise_indices, dtype=np.int64).reshape(1, -1)
    loss, grad = _nce_terms(v, np.asarray(f, dtype=np.float64)[None, :],
                            np.array([positive_index]), noise, cfg.tau, cfg.z_estimate)
    return float(loss[0]), grad[0]


def proximal_penalty(f_current, v_previous, lam: float):
    """``lam * ||f - v_prev||^2`` and its gradient ``2 lam (f - v_prev)``."""
    d = np.asarray(f_current, dtype=np.float64) - np.asarray(v_previous, dtype=np.float64)
    return float(lam * np.sum(d * d)), 2.0 * lam * d


def batch_objective(bank, features, indices, noise_indices, nce_cfg: NceConfig,
                    prox_cfg: ProximalConfig):
    """Batch mean of NCE loss plus the proximal term on each positive."""
    if nce_cfg.z_estimate is None:
        raise StateError("partition constant Z is not set; call estimate_z first")
    v = _rows(bank)
    if v.shape[0] < 2:
        raise ValueError("NCE needs at least two instances (one distinct noise)")
    f = np.atleast_2d(np.asarray(features, dtype=np.float64))
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    noise = np.asarray(noise_indices, dtype=np.int64).reshape(idx.size, -1)
    b = f.shape[0]
    loss, grad = _nce_terms(v, f, idx, noise, nce_cfg.tau, nce_cfg.z_estimate)
    if prox_cfg.lam:
        d = f - v[idx]
        loss = loss + prox_cfg.lam * np.einsum("bd,bd->b", d, d)
        grad = grad + 2.0 * prox_cfg.lam * d
    return float(loss.mean()), grad / b


def full_objective(bank, features, indices, tau: float, prox_cfg: ProximalConfig):
    """Exact non-parametric softmax plus the same proximal term."""
    loss, grad = full_softmax_loss(bank, features, indices, tau)
    if prox_cfg.lam:
        f = np.atleast_2d(np.asarray(features, dtype=np.float64))
        d = f - _rows(bank)[np.asarray(indices, dtype=np.int64)]
        b = f.shape[0]
        loss += float(prox_cfg.lam * np.einsum("bd,bd->", d, d) / b)
        grad = grad + 2.0 * prox_cfg.lam * d / b
    return loss, grad
