"""Per-instance feature memory: one unit-norm row per training example."""
from __future__ import annotations

import numpy as np

UNIT_TOL = 1e-6


class InvariantError(ValueError):
    pass


class MemoryBank:
    """``n x dim`` float64 table of instance embeddings.

    Rows are always unit-norm. ``n`` is fixed at construction.
    """

    def __init__(self, features: np.ndarray, blend: float | None = None):
        features = np.array(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] < 1 or features.shape[1] < 1:
            raise ValueError(f"bank needs a non-empty n x dim matrix, got shape {features.shape}")
        _check_unit(features)
        if blend is not None and not 0.0 < blend <= 1.0:
            raise ValueError(f"blend weight must lie in (0, 1], got {blend}")
        self._features = features
        self.blend = blend

    @classmethod
    def init_random(cls, n: int, dim: int, rng: np.random.Generator | int,
                    blend: float | None = None) -> "MemoryBank":
        """Rows i.i.d. uniform on the unit sphere (normalized isotropic Gaussians)."""
        if n < 1 or dim < 1:
            raise ValueError(f"bank size must be positive, got n={n}, dim={dim}")
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        g = rng.standard_normal((n, dim))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        return cls(g, blend=blend)

    @property
    def n(self) -> int:
        return self._features.shape[0]

    @property
    def dim(self) -> int:
        return self._features.shape[1]

    @property
    def features(self) -> np.ndarray:
        """Read-only view of the whole table."""
        view = self._features.view()
        view.flags.writeable = False
        return view

    def _check_index(self, idx: np.ndarray) -> None:
        if idx.size and (idx.min() < 0 or idx.max() >= self.n):
            bad = idx[(idx < 0) | (idx >= self.n)]
            raise IndexError(f"bank index {int(bad[0])} out of range for n={self.n}")

    def read(self, index: int) -> np.ndarray:
        self._check_index(np.asarray([index]))
        return self._features[index].copy()

    def read_rows(self, indices) -> np.ndarray:
        idx = np.asarray(indices, dtype=np.int64).reshape(-1)
        self._check_index(idx)
        return self._features[idx]  # fancy indexing copies

    def update(self, index: int, feature) -> None:
        self.update_rows([index], np.asarray(feature, dtype=np.float64)[None, :])

    def update_rows(self, indices, features) -> None:
        """Write rows in ascending index order; a repeated index keeps its last value.

        With ``blend`` set the stored row becomes
        ``normalize((1 - blend) * old + blend * new)`` instead of ``new``.
        """
        idx = np.asarray(indices, dtype=np.int64).reshape(-1)
        feats = np.asarray(features, dtype=np.float64)
        if feats.shape != (idx.size, self.dim):
            raise ValueError(f"expected features of shape {(idx.size, self.dim)}, got {feats.shape}")
        self._check_index(idx)
        _check_unit(feats)
        order = np.argsort(idx, kind="stable")
        for i in order:
            row = feats[i]
            if self.blend is not None:
                row = (1.0 - self.blend) * self._features[idx[i]] + self.blend * row
                row = row / np.linalg.norm(row)
            self._features[idx[i]] = row

    def copy(self) -> "MemoryBank":
        return MemoryBank(self._features, blend=self.blend)

    def export_f32(self) -> np.ndarray:
        return np.ascontiguousarray(self._features, dtype="<f4")


def _check_unit(features: np.ndarray) -> None:
    if features.size == 0:
        return
    norms = np.linalg.norm(features, axis=1)
    worst = np.abs(norms - 1.0)
    if worst.max() > UNIT_TOL:
        row = int(worst.argmax())
        raise InvariantError(f"row {row} has norm {norms[row]:.9f}; bank rows must be unit-norm")
