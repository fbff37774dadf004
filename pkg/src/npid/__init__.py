"""Unsupervised feature learning by non-parametric instance discrimination."""
from .datapipe import AugmentConfig, Dataset, DataError, load_cifar10, synth_clusters
from .encoder import ConfigError, Encoder, EncoderConfig
from .evalknn import KnnConfig, PackedBank, knn_accuracy, knn_classify, linear_probe, retrieve
from .membank import MemoryBank
from .objective import NceConfig, ProximalConfig
from .trainer import TrainConfig, TrainState, train

__version__ = "0.1.0"
