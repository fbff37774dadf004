"""Binary checkpoints.

Layout::

    b"NPID1" | u32 LE format version | u64 LE header length | JSON header | payload

The header carries the run configuration, epoch, RNG stream states,
normalization constants, training log and an array manifest. Each manifest
entry gives ``name, shape, dtype, offset, nbytes`` with offsets relative to
the payload start; arrays follow in manifest order with no gaps.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .datapipe import Dataset
from .encoder import Encoder
from .membank import MemoryBank
from .objective import ParametricHead
from .streams import Streams
from .trainer import SGD, EpochRecord, TrainLog, TrainState

MAGIC = b"NPID1"
VERSION = 1
_PREFIX = struct.Struct("<5sIQ")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    header: dict
    arrays: dict[str, np.ndarray]

    @property
    def config(self) -> RunConfig:
        return RunConfig.from_dict(self.header["config"])

    @property
    def epoch(self) -> int:
        return self.header["epoch"]

    @property
    def bank_f32(self) -> np.ndarray:
        return self.arrays["bank.f32"]


def _to_le(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    return a.astype(a.dtype.newbyteorder("<"), copy=False)


def write_checkpoint(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write atomically: a sibling temp file is renamed over ``path``."""
    manifest, offset, blobs = [], 0, []
    for name, arr in arrays.items():
        arr = _to_le(arr)
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str,
                         "offset": offset, "nbytes": arr.nbytes})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    head = json.dumps({**header, "manifest": manifest}, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def read_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} does not exist")
    raw = path.read_bytes()
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated ({len(raw)} bytes)")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, this build reads {VERSION}")
    start = _PREFIX.size + hlen
    try:
        header = json.loads(raw[_PREFIX.size : start])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from None
    payload = memoryview(raw)[start:]
    arrays, expect = {}, 0
    for entry in header["manifest"]:
        if entry["offset"] != expect:
            raise CheckpointError(f"{path}: array {entry['name']} at offset {entry['offset']}, "
                                  f"expected {expect}")
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        if count * dtype.itemsize != entry["nbytes"]:
            raise CheckpointError(f"{path}: array {entry['name']} size does not match its shape")
        end = expect + entry["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"{path}: payload truncated inside {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(payload[expect:end], dtype=dtype).reshape(
            entry["shape"]).copy()
        expect = end
    if expect != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - expect} trailing payload bytes")
    return Checkpoint(header, arrays)


# --- training state <-> checkpoint -------------------------------------------

def _log_to_json(log: TrainLog) -> list[dict]:
    # wall-clock time is left out so equal training states give equal files
    return [{"epoch": r.epoch, "lr": r.lr, "loss": r.loss, "knn_acc": r.knn_acc} for r in log]


def save_state(path, state: TrainState, config: RunConfig, normalization: dict) -> None:
    arrays: dict[str, np.ndarray] = {}
    for name, p in state.encoder.params.items():
        arrays[f"param.{name}"] = p.astype("<f8")
    if state.head is not None:
        arrays["param.head.weights"] = state.head.weights.astype("<f8")
    for name, buf in sorted(state.optimizer.buffers.items()):
        arrays[f"momentum.{name}"] = buf.astype("<f8")
    # f64 rows for exact resume; f32 rows are the evaluation export
    arrays["bank.f64"] = state.bank.features.astype("<f8")
    arrays["bank.f32"] = state.bank.export_f32()
    header = {
        "config": config.to_dict(),
        "config_sha256": config.sha256(),
        "epoch": state.epoch,
        "streams": state.streams.state(),
        "z_estimate": state.z_estimate,
        "normalization": {k: (v.tolist() if isinstance(v, np.ndarray) else v)
                          for k, v in normalization.items()},
        "log": _log_to_json(state.log),
    }
    write_checkpoint(path, header, arrays)


def restore_state(ckpt: Checkpoint) -> tuple[RunConfig, TrainState]:
    cfg = ckpt.config
    a = ckpt.arrays
    params = {k[len("param."):]: v.astype(np.float64)
              for k, v in a.items() if k.startswith("param.") and k != "param.head.weights"}
    encoder = Encoder(cfg.encoder, params=params)
    head = ParametricHead(a["param.head.weights"].astype(np.float64)) \
        if "param.head.weights" in a else None
    opt = SGD(cfg.train.momentum, cfg.train.weight_decay)
    opt.buffers = {k[len("momentum."):]: v.astype(np.float64)
                   for k, v in a.items() if k.startswith("momentum.")}
    bank = MemoryBank(a["bank.f64"], blend=cfg.train.bank_blend)
    h = ckpt.header
    log = TrainLog(EpochRecord(seconds=float("nan"), **r) for r in h["log"])
    state = TrainState(encoder, bank, opt, Streams.from_state(h["streams"]), h["epoch"],
                       head=head, z_estimate=h["z_estimate"], log=log)
    return cfg, state


# --- datasets in the same container -------------------------------------------

def save_dataset(path, ds: Dataset) -> None:
    """Store a dataset (images, labels, standardization, extras arrays) for exact reuse."""
    arrays = {"images": ds.images, "labels": ds.labels, "mean": ds.mean, "std": ds.std}
    for k, v in ds.extras.items():
        arrays[f"extra.{k}"] = np.asarray(v)
    write_checkpoint(path, {"kind": "dataset", "name": ds.name, "pixel_scale": ds.pixel_scale}, arrays)


def load_dataset(path) -> Dataset:
    ckpt = read_checkpoint(path)
    if ckpt.header.get("kind") != "dataset":
        raise CheckpointError(f"{path}: not a dataset file")
    a = ckpt.arrays
    extras = {k[len("extra."):]: v for k, v in a.items() if k.startswith("extra.")}
    return Dataset(a["images"], a["labels"], a["mean"], a["std"], ckpt.header["pixel_scale"],
                   ckpt.header["name"], extras)
