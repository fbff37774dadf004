"""Convolutional encoder mapping images to unit-norm embeddings.

The network is a plain stack of ``conv -> bias [-> channel scale] -> relu``
blocks, a linear projection to ``embed_dim`` and a row-wise L2 normalization.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import DegenerateInputError, Tensor


class ConfigError(ValueError):
    pass


@dataclass
class EncoderConfig:
    input_shape: tuple[int, int, int] = (3, 32, 32)
    blocks: list[tuple[int, int, int]] = field(
        default_factory=lambda: [(32, 3, 2), (64, 3, 2), (128, 3, 2)]
    )
    embed_dim: int = 128
    use_batchnorm: bool = False
    channel_affine: bool = False

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.blocks = [tuple(int(v) for v in b) for b in self.blocks]
        self.validate()

    def validate(self) -> None:
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"input_shape must be positive [C, H, W], got {self.input_shape}")
        if self.embed_dim < 1:
            raise ConfigError(f"embed_dim must be >= 1, got {self.embed_dim}")
        if self.use_batchnorm:
            raise ConfigError(
                "batch normalization is not supported by the gradient engine; "
                "set channel_affine = true for a learned per-channel scale"
            )
        for b in self.blocks:
            if len(b) != 3 or min(b) < 1:
                raise ConfigError(f"block must be (filters, kernel, stride) >= 1, got {b}")
        c, h, w = self.feature_shape()
        if h < 1 or w < 1:
            raise ConfigError(f"blocks shrink the {self.input_shape} input below 1x1")

    def feature_shape(self) -> tuple[int, int, int]:
        c, h, w = self.input_shape
        for filters, k, s in self.blocks:
            pad = k // 2
            h = T.conv_output_size(h, k, s, pad)
            w = T.conv_output_size(w, k, s, pad)
            c = filters
        return c, h, w

    @property
    def flat_features(self) -> int:
        c, h, w = self.feature_shape()
        return c * h * w


def init_params(config: EncoderConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Fan-in scaled uniform weights, zero biases, unit channel scales."""
    params: dict[str, np.ndarray] = {}
    c = config.input_shape[0]
    for i, (filters, k, _) in enumerate(config.blocks):
        fan_in = c * k * k
        bound = np.sqrt(6.0 / fan_in)
        params[f"conv{i}.weight"] = rng.uniform(-bound, bound, size=(filters, c, k, k))
        params[f"conv{i}.bias"] = np.zeros(filters)
        if config.channel_affine:
            params[f"conv{i}.scale"] = np.ones(filters)
        c = filters
    fan_in = config.flat_features
    bound = np.sqrt(3.0 / fan_in)
    params["proj.weight"] = rng.uniform(-bound, bound, size=(config.embed_dim, fan_in))
    params["proj.bias"] = np.zeros(config.embed_dim)
    return params


def l2_normalize(x, eps: float = 1e-12) -> np.ndarray:
    """Return ``x / ||x||`` for a vector."""
    x = np.asarray(x, dtype=np.float64)
    norm = float(np.linalg.norm(x))
    if norm <= eps:
        raise DegenerateInputError(f"cannot normalize a vector with norm {norm:.3g} <= {eps}")
    return x / norm


def l2_normalize_jacobian(x) -> np.ndarray:
    """Jacobian ``(I - v v^T) / ||x||`` of :func:`l2_normalize` at ``x``."""
    x = np.asarray(x, dtype=np.float64)
    v = l2_normalize(x)
    return (np.eye(x.size) - np.outer(v, v)) / np.linalg.norm(x)


class Encoder:
    def __init__(self, config: EncoderConfig, params: dict[str, np.ndarray] | None = None,
                 rng: np.random.Generator | None = None):
        self.config = config
        if params is None:
            if rng is None:
                raise ValueError("either params or an rng for initialization is required")
            params = init_params(config, rng)
        self.params = params

    def _check_batch(self, batch: np.ndarray) -> None:
        if batch.ndim != 4 or tuple(batch.shape[1:]) != self.config.input_shape:
            raise T.DimensionError(
                f"batch shape {batch.shape} does not match encoder input [N, {self.config.input_shape}]"
            )

    def leaves(self) -> dict[str, Tensor]:
        return {name: Tensor(value, requires_grad=True) for name, value in self.params.items()}

    def project(self, batch: np.ndarray, leaves: dict[str, Tensor]) -> Tensor:
        """Pre-normalization projection output, shape ``[N, embed_dim]``."""
        batch = np.asarray(batch, dtype=np.float64)
        self._check_batch(batch)
        h = Tensor(batch)
        for i, (_, k, s) in enumerate(self.config.blocks):
            h = T.conv2d(h, leaves[f"conv{i}.weight"], stride=s, pad=k // 2)
            h = T.add_bias(h, leaves[f"conv{i}.bias"])
            if self.config.channel_affine:
                h = T.channel_scale(h, leaves[f"conv{i}.scale"])
            h = T.relu(h)
        h = T.reshape(h, (batch.shape[0], self.config.flat_features))
        h = T.matmul(h, T.transpose(leaves["proj.weight"]))
        return T.add_bias(h, leaves["proj.bias"])

    def forward(self, batch: np.ndarray, leaves: dict[str, Tensor] | None = None
                ) -> tuple[Tensor, dict[str, Tensor]]:
        """Unit-norm embeddings plus the parameter leaves gradients flow into."""
        if leaves is None:
            leaves = self.leaves()
        return T.l2_normalize_rows(self.project(batch, leaves)), leaves

    def embed(self, data: np.ndarray, batch_size: int = 500) -> np.ndarray:
        """Inference-only embeddings for a whole array, ``[N, embed_dim]``."""
        frozen = {name: Tensor(value) for name, value in self.params.items()}
        out = [
            self.forward(data[i : i + batch_size], frozen)[0].data
            for i in range(0, len(data), batch_size)
        ]
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.config.embed_dim))
