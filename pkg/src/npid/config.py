"""INI run configuration mapped onto the library dataclasses.

An empty file gives the library defaults. Sections: ``[data]``, ``[encoder]``,
``[train]``, ``[nce]``, ``[prox]``, ``[augment]``, ``[eval]``.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .datapipe import AugmentConfig, DataError, Dataset, find_cifar10, fraction_subset, load_cifar10
from .datapipe import synth_clusters, train_test_split
from .encoder import ConfigError, EncoderConfig
from .objective import NceConfig, ProximalConfig
from .trainer import TrainConfig

SECTIONS = ("data", "encoder", "train", "nce", "prox", "augment", "eval")


@dataclass
class DataConfig:
    source: str = "cifar10"  # or "synth"
    path: str | None = None
    # cifar10: train on a seeded subset of this many images (0 = all 50k)
    train_subset: int = 0
    subset_seed: int = 0
    fraction: float = 1.0
    # synthetic clusters
    num_clusters: int = 4
    per_cluster: int = 100
    dim: int = 64
    sigma: float = 0.1
    seed: int = 0
    test_fraction: float = 0.2

    def __post_init__(self):
        if self.source not in ("cifar10", "synth"):
            raise ConfigError(f"data.source must be 'cifar10' or 'synth', got {self.source!r}")
        if self.train_subset < 0:
            raise ConfigError("data.train_subset must be >= 0")
        if not 0 < self.fraction <= 1:
            raise ConfigError(f"data.fraction must lie in (0, 1], got {self.fraction}")


@dataclass
class EvalConfig:
    k: int = 200
    tau: float = 0.07
    # run kNN on the test split every this many epochs during training (0 = never)
    every: int = 0
    reencode: bool = False


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        enc = dataclasses.asdict(self.encoder)
        enc["input_shape"] = list(enc["input_shape"])
        enc["blocks"] = [list(b) for b in enc["blocks"]]
        return {
            "data": dataclasses.asdict(self.data),
            "encoder": enc,
            "train": self.train.to_dict(),
            "augment": dataclasses.asdict(self.augment),
            "eval": dataclasses.asdict(self.eval),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        t = dict(d["train"])
        try:
            t["nce"] = NceConfig(**t["nce"])
            t["prox"] = ProximalConfig(**t["prox"])
            return cls(DataConfig(**d["data"]), EncoderConfig(**d["encoder"]), TrainConfig(**t),
                       AugmentConfig(**d["augment"]), EvalConfig(**d["eval"]))
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None

    def sha256(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def diff_configs(a: RunConfig, b: RunConfig, ignore=()) -> list[str]:
    fa, fb = flatten(a.to_dict()), flatten(b.to_dict())
    return [f"{k}: {fa.get(k)!r} != {fb.get(k)!r}"
            for k in sorted(set(fa) | set(fb)) if k not in ignore and fa.get(k) != fb.get(k)]


# --- parsing -----------------------------------------------------------------

def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_optional(conv):
    def parse(s: str):
        return None if s.strip().lower() in ("", "none") else conv(s)
    return parse


def parse_blocks(s: str) -> list[tuple[int, int, int]]:
    """``"32x3x2, 64x3x2"`` -> ``[(32, 3, 2), (64, 3, 2)]``; empty -> no conv blocks."""
    blocks = []
    for part in s.replace(";", ",").split(","):
        part = part.strip()
        if not part:
            continue
        bits = part.lower().split("x")
        if len(bits) != 3:
            raise ValueError(f"block {part!r} is not filters x kernel x stride")
        blocks.append(tuple(int(b) for b in bits))
    return blocks


def parse_int_list(s: str) -> list[int]:
    return [int(v) for v in s.replace(";", ",").split(",") if v.strip()]


def parse_float_list(s: str) -> list[float]:
    return [float(v) for v in s.replace(";", ",").split(",") if v.strip()]


_opt_int = _parse_optional(int)
_opt_float = _parse_optional(float)
_opt_str = _parse_optional(str)

# section -> key -> (target, field, parser)
_KEYS = {
    "data": {
        "source": ("data", "source", str.strip),
        "path": ("data", "path", _opt_str),
        "train_subset": ("data", "train_subset", int),
        "subset_seed": ("data", "subset_seed", int),
        "fraction": ("data", "fraction", float),
        "num_clusters": ("data", "num_clusters", int),
        "per_cluster": ("data", "per_cluster", int),
        "dim": ("data", "dim", int),
        "sigma": ("data", "sigma", float),
        "seed": ("data", "seed", int),
        "test_fraction": ("data", "test_fraction", float),
    },
    "encoder": {
        "blocks": ("encoder", "blocks", parse_blocks),
        "embed_dim": ("encoder", "embed_dim", int),
        "use_batchnorm": ("encoder", "use_batchnorm", _parse_bool),
        "channel_affine": ("encoder", "channel_affine", _parse_bool),
    },
    "train": {
        "epochs": ("train", "epochs", int),
        "batch_size": ("train", "batch_size", int),
        "lr_initial": ("train", "lr_initial", float),
        "lr_decay": ("train", "lr_decay", float),
        "lr_decay_start_epoch": ("train", "lr_decay_start_epoch", int),
        "lr_decay_start": ("train", "lr_decay_start_epoch", int),
        "lr_decay_every": ("train", "lr_decay_every", int),
        "momentum": ("train", "momentum", float),
        "weight_decay": ("train", "weight_decay", float),
        "seed": ("train", "seed", int),
        "objective": ("train", "objective", str.strip),
        "full_softmax": ("train", "full_softmax", _parse_bool),
        "bank_blend": ("train", "bank_blend", _opt_float),
        "checkpoint_every": ("train", "checkpoint_every", int),
    },
    "nce": {
        "m": ("nce", "m", int),
        "tau": ("nce", "tau", float),
        "z_samples": ("nce", "z_samples", _opt_int),
        "z_monte_carlo_samples": ("nce", "z_samples", _opt_int),
        "z_refresh": ("nce", "z_refresh", str.strip),
    },
    "prox": {
        "lam": ("prox", "lam", float),
        "lambda": ("prox", "lam", float),
    },
    "augment": {
        "enabled": ("augment", "enabled", _parse_bool),
        "random_crop": ("augment", "random_crop", _parse_bool),
        "crop_pad": ("augment", "crop_pad", int),
        "crop_size": ("augment", "crop_size", _opt_int),
        "flip_prob": ("augment", "flip_prob", float),
        "grayscale_prob": ("augment", "grayscale_prob", float),
    },
    "eval": {
        "k": ("eval", "k", int),
        "tau": ("eval", "tau", float),
        "every": ("eval", "every", int),
        "reencode": ("eval", "reencode", _parse_bool),
    },
}


def read_ini(text: str, source: str = "<config>") -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return cp


def parse_config(text: str, source: str = "<config>", extra_sections=()) -> RunConfig:
    """Parse INI text; unknown sections or keys raise :class:`ConfigError` naming the key."""
    cp = read_ini(text, source)
    values: dict[str, dict] = {s: {} for s in ("data", "encoder", "train", "nce", "prox",
                                               "augment", "eval")}
    for section in cp.sections():
        if section not in _KEYS:
            if section in extra_sections:
                continue
            raise ConfigError(f"{source}: unknown section [{section}]; expected one of {SECTIONS}")
        for key, raw in cp.items(section):
            spec = _KEYS[section].get(key)
            if spec is None:
                raise ConfigError(f"{source}: unknown key {section}.{key}")
            target, name, conv = spec
            try:
                values[target][name] = conv(raw)
            except ValueError as exc:
                raise ConfigError(f"{source}: bad value for {section}.{key}: {exc}") from None
    return build_config(values, source)


def build_config(values: dict[str, dict], source: str = "<config>") -> RunConfig:
    t = dict(values.get("train", {}))
    if t.pop("full_softmax", False):
        if t.get("objective", "full") != "full":
            raise ConfigError(f"{source}: train.full_softmax conflicts with objective={t['objective']}")
        t["objective"] = "full"
    try:
        t["nce"] = NceConfig(**values.get("nce", {}))
        t["prox"] = ProximalConfig(**values.get("prox", {}))
        return RunConfig(
            data=DataConfig(**values.get("data", {})),
            encoder=EncoderConfig(**values.get("encoder", {})),
            train=TrainConfig(**t),
            augment=AugmentConfig(**values.get("augment", {})),
            eval=EvalConfig(**values.get("eval", {})),
        )
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config(path.read_text(), str(path))


# --- datasets ----------------------------------------------------------------

def load_data(cfg: DataConfig, path_override=None) -> tuple[Dataset, Dataset]:
    """``(train, test)`` datasets as described by ``cfg``."""
    if cfg.source == "synth":
        ds = synth_clusters(cfg.num_clusters, cfg.per_cluster, cfg.dim, cfg.sigma, cfg.seed)
        train_ds, test_ds = train_test_split(ds, cfg.test_fraction, cfg.seed)
    else:
        where = path_override or cfg.path
        found = find_cifar10(where)
        if found is None:
            raise DataError(
                f"CIFAR-10 binary batches not found (looked in {where or '<unset>'} and "
                "$NPID_CIFAR10_DIR). Download cifar-10-binary.tar.gz from "
                "https://www.cs.toronto.edu/~kriz/cifar.html, extract it, and pass the "
                "cifar-10-batches-bin directory with --data or NPID_CIFAR10_DIR."
            )
        train_ds = load_cifar10(found, "train")
        test_ds = load_cifar10(found, "test", stats=train_ds.stats)
        if cfg.train_subset:
            if cfg.train_subset > len(train_ds):
                raise DataError(f"train_subset={cfg.train_subset} exceeds {len(train_ds)} images")
            train_ds = fraction_subset(train_ds, cfg.train_subset / len(train_ds), cfg.subset_seed)
    if cfg.fraction < 1:
        train_ds = fraction_subset(train_ds, cfg.fraction, cfg.subset_seed)
    return train_ds, test_ds
