"""Mini-batch SGD over instance-discrimination objectives."""
from __future__ import annotations

import csv
import io
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .datapipe import TrainView
from .encoder import Encoder, EncoderConfig
from .membank import MemoryBank
from .objective import (NceConfig, ParametricHead, ProximalConfig, batch_objective, estimate_z,
                        full_objective, parametric_softmax_loss)
from .streams import Streams

OBJECTIVES = ("nce", "full", "parametric")


class NumericalError(ArithmeticError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 256
    lr_initial: float = 0.03
    lr_decay: float = 0.1
    lr_decay_start_epoch: int = 120
    lr_decay_every: int = 40
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    objective: str = "nce"
    nce: NceConfig = field(default_factory=NceConfig)
    prox: ProximalConfig = field(default_factory=ProximalConfig)
    # None: rows are replaced by the new feature; else blended with this weight
    bank_blend: float | None = None
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr_decay_every < 1 or self.lr_decay_start_epoch < 0:
            raise ValueError("lr_decay_every must be >= 1 and lr_decay_start_epoch >= 0")
        if self.lr_initial < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("lr_initial, momentum and weight_decay must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["nce"].pop("z_estimate")
        return d


def lr_at(config: TrainConfig, epoch: int) -> float:
    """Step schedule: constant, then scaled by ``lr_decay`` every ``lr_decay_every`` epochs."""
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    if epoch < config.lr_decay_start_epoch:
        return config.lr_initial
    steps = 1 + (epoch - config.lr_decay_start_epoch) // config.lr_decay_every
    return config.lr_initial * config.lr_decay ** steps


def sample_noise(n: int, m: int, rng: np.random.Generator) -> np.ndarray:
    """``m`` i.i.d. uniform instance indices in ``[0, n)``, with replacement."""
    if n < 2:
        raise ValueError(f"noise sampling needs n >= 2, got {n}")
    if m < 1:
        raise ValueError(f"need at least one noise sample, got m={m}")
    return rng.integers(0, n, size=m)


class SGD:
    """SGD with momentum: ``buf = mu * buf + g + wd * p``; ``p -= lr * buf``."""

    def __init__(self, momentum: float = 0.9, weight_decay: float = 0.0):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        for name, g in grads.items():
            p = params[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient for parameter {name}")
        for name, g in grads.items():
            p = params[name]
            d = g + self.weight_decay * p if self.weight_decay else g
            buf = self.buffers.get(name)
            buf = d.copy() if buf is None else self.momentum * buf + d
            self.buffers[name] = buf
            p -= lr * buf


def sgd_momentum_step(params, grads, buffers, lr, momentum, weight_decay=0.0) -> None:
    """Functional form of :meth:`SGD.step` operating on caller-owned buffers."""
    opt = SGD(momentum, weight_decay)
    opt.buffers = buffers
    opt.step(params, grads, lr)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    seconds: float
    knn_acc: float | None = None


class TrainLog(list):
    FIELDS = ("epoch", "lr", "loss", "seconds", "knn_acc")

    def to_csv(self, config_hash: str | None = None) -> str:
        buf = io.StringIO()
        if config_hash:
            buf.write(f"# config_sha256={config_hash}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.FIELDS)
        for r in self:
            w.writerow([r.epoch, repr(r.lr), repr(r.loss), "" if r.seconds != r.seconds else f"{r.seconds:.3f}",
                        "" if r.knn_acc is None else repr(r.knn_acc)])
        return buf.getvalue()

    def deterministic_view(self) -> list[tuple]:
        """Records without wall-clock time, for reproducibility comparisons."""
        return [(r.epoch, r.lr, r.loss, r.knn_acc) for r in self]


@dataclass
class TrainState:
    encoder: Encoder
    bank: MemoryBank
    optimizer: SGD
    streams: Streams
    epoch: int = 0
    head: ParametricHead | None = None
    z_estimate: float | None = None
    log: TrainLog = field(default_factory=TrainLog)

    @classmethod
    def create(cls, config: TrainConfig, encoder_config: EncoderConfig, n: int) -> "TrainState":
        streams = Streams(config.seed)
        encoder = Encoder(encoder_config, rng=streams["init"])
        bank = MemoryBank.init_random(n, encoder_config.embed_dim, streams["membank"],
                                      blend=config.bank_blend)
        head = None
        if config.objective == "parametric":
            head = ParametricHead.init(n, encoder_config.embed_dim, streams["init"])
        return cls(encoder, bank, SGD(config.momentum, config.weight_decay), streams,
                   z_estimate=config.nce.z_estimate, head=head)

    def parameters(self) -> dict[str, np.ndarray]:
        params = dict(self.encoder.params)
        if self.head is not None:
            params["head.weights"] = self.head.weights
        return params


def train_epoch(state: TrainState, view: TrainView, config: TrainConfig,
                evaluate: Callable[[TrainState], float | None] | None = None) -> EpochRecord:
    """One pass over every instance; appends the record to ``state.log``.

    ``evaluate`` runs after the epoch's last update and may return None to skip.
    """
    epoch = state.epoch
    n = len(view)
    if n != state.bank.n:
        raise ValueError(f"dataset has {n} instances but the bank has {state.bank.n} rows")
    lr = lr_at(config, epoch)
    t0 = time.perf_counter()
    perm = state.streams["shuffle"].permutation(n)
    nce = config.nce
    if config.objective == "nce":
        m = nce.effective_m(n)
        if nce.z_refresh == "epoch":
            state.z_estimate = None

    total = 0.0
    for b, start in enumerate(range(0, n, config.batch_size)):
        idx = perm[start : start + config.batch_size]
        out, leaves = state.encoder.forward(view.batch(idx, epoch))
        f = out.data
        head_grad = None
        if config.objective == "nce":
            noise = sample_noise(n, idx.size * m, state.streams["noise"]).reshape(idx.size, m)
            if nce.z_refresh == "batch":
                # reuse this batch's noise draw as the Monte-Carlo subset
                state.z_estimate = estimate_z(state.bank, f, nce.tau, m, indices=noise)
            elif state.z_estimate is None:
                state.z_estimate = estimate_z(state.bank, f, nce.tau, nce.z_samples or m,
                                              state.streams["z"])
            cfg = NceConfig(m=m, tau=nce.tau, z_estimate=state.z_estimate)
            loss, grad = batch_objective(state.bank, f, idx, noise, cfg, config.prox)
        elif config.objective == "full":
            loss, grad = full_objective(state.bank, f, idx, nce.tau, config.prox)
        else:
            loss, grad, head_grad = parametric_softmax_loss(state.head, f, idx)

        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise NumericalError(
                f"epoch {epoch} batch {b}: non-finite loss {loss}; "
                f"max |grad| = {np.nanmax(np.abs(grad)):.6g}"
            )
        out.backward(grad)
        grads = {name: leaf.grad for name, leaf in leaves.items()}
        if head_grad is not None:
            grads["head.weights"] = head_grad
        state.optimizer.step(state.parameters(), grads, lr)
        state.bank.update_rows(idx, f)
        total += loss * idx.size

    record = EpochRecord(epoch, lr, total / n, time.perf_counter() - t0)
    state.epoch += 1
    if evaluate is not None:
        acc = evaluate(state)
        record.knn_acc = None if acc is None else float(acc)
    state.log.append(record)
    return record


def train(config: TrainConfig, view: TrainView, encoder_config: EncoderConfig | None = None,
          state: TrainState | None = None, evaluate=None, on_epoch_end=None,
          stop_after: int | None = None) -> TrainState:
    """Run (or continue) training until ``config.epochs`` or ``stop_after`` epochs."""
    if state is None:
        encoder_config = encoder_config or EncoderConfig(input_shape=view.input_shape)
        state = TrainState.create(config, encoder_config, len(view))
    done = 0
    while state.epoch < config.epochs:
        if stop_after is not None and done >= stop_after:
            break
        train_epoch(state, view, config, evaluate)
        done += 1
        if on_epoch_end is not None:
            on_epoch_end(state)
    return state
