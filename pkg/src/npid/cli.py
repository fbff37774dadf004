"""``npid`` command line: train, eval, retrieve, sweep, bench.

Exit codes: 0 success, 1 sweep finished with failed cells, 2 configuration
error, 3 data error, 4 numerical abort.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, CheckpointError, read_checkpoint, restore_state, save_state
from .config import RunConfig, diff_configs, load_config, load_data
from .datapipe import DataError, Dataset
from .encoder import ConfigError, Encoder
from .evalknn import (KnnConfig, PackedBank, ProbeConfig, bench_query, default_threads,
                      knn_accuracy, linear_probe, machine_descriptor, retrieve, synth_packed_bank)
from .membank import InvariantError
from .tensor import DegenerateInputError
from .trainer import NumericalError, TrainState, train

log = logging.getLogger("npid")

EXIT_OK, EXIT_CELLS, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4
METRIC_FIELDS = ("protocol", "top1", "n_bank", "n_query", "features")
RETRIEVE_FIELDS = ("query_id", "rank", "index", "similarity", "label")
# fields that may change between an interrupted run and its resumption
RESUME_IGNORE = ("train.epochs", "train.checkpoint_every", "data.path", "eval.every")


class OutputExists(ConfigError):
    pass


def guard_outputs(paths, force: bool, allow=()) -> None:
    allow = {Path(p).resolve() for p in allow}
    for p in paths:
        p = Path(p)
        if p.exists() and not force and p.resolve() not in allow:
            raise OutputExists(f"{p} already exists; pass --force to overwrite")


def render_csv(fields, rows, config_hash: str | None) -> str:
    buf = io.StringIO()
    if config_hash:
        buf.write(f"# config_sha256={config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([r.get(f, "") if isinstance(r, dict) else r[i] for i, f in enumerate(fields)])
    return buf.getvalue()


def read_csv(path) -> tuple[str | None, list[dict]]:
    """``(config hash, rows)`` of a CSV written by this tool."""
    lines = Path(path).read_text().splitlines()
    digest = None
    if lines and lines[0].startswith("# config_sha256="):
        digest = lines.pop(0).split("=", 1)[1]
    return digest, list(csv.DictReader(lines))


# --- shared pieces ------------------------------------------------------------

def resolve(cfg: RunConfig, train_ds: Dataset) -> RunConfig:
    """Pin the encoder input shape to the dataset's."""
    enc = dataclasses.replace(cfg.encoder, input_shape=train_ds.input_shape)
    return dataclasses.replace(cfg, encoder=enc)


def normalization_of(ds: Dataset) -> dict:
    return {"mean": ds.mean, "std": ds.std, "pixel_scale": ds.pixel_scale}


def apply_normalization(ds: Dataset, norm: dict) -> None:
    ds.mean = np.asarray(norm["mean"], dtype=np.float64)
    ds.std = np.asarray(norm["std"], dtype=np.float64)
    ds.pixel_scale = norm["pixel_scale"]


def knn_monitor(cfg: RunConfig, train_ds: Dataset, test_ds: Dataset):
    """Per-epoch kNN on a frozen snapshot of the bank; touches no training stream."""
    k = KnnConfig(min(cfg.eval.k, len(train_ds)), cfg.eval.tau)
    test_x = test_ds.all_inputs()

    def evaluate(state: TrainState):
        if (state.epoch % cfg.eval.every) and state.epoch != cfg.train.epochs:
            return None
        bank = PackedBank(state.bank.export_f32(), train_ds.labels)
        return knn_accuracy(bank, state.encoder.embed(test_x), test_ds.labels, k)

    return evaluate


def evaluate_features(cfg: RunConfig, encoder: Encoder, bank_rows: np.ndarray,
                      train_ds: Dataset, test_ds: Dataset, protocol: str,
                      reencode: bool = False) -> dict:
    if bank_rows.shape[1] != encoder.config.embed_dim:
        raise ConfigError(f"checkpoint bank has dim {bank_rows.shape[1]} but the encoder "
                          f"embeds to {encoder.config.embed_dim}")
    if not reencode and bank_rows.shape[0] != len(train_ds):
        raise DataError(f"checkpoint bank has {bank_rows.shape[0]} rows but the training split "
                        f"has {len(train_ds)} images; was it trained on this dataset?")
    feats = encoder.embed(train_ds.all_inputs()) if reencode else bank_rows
    queries = encoder.embed(test_ds.all_inputs())
    if protocol == "knn":
        k = KnnConfig(min(cfg.eval.k, len(train_ds)), cfg.eval.tau)
        top1 = knn_accuracy(PackedBank(feats, train_ds.labels), queries, test_ds.labels, k)
    elif protocol == "probe":
        top1 = linear_probe(feats, train_ds.labels, ProbeConfig(),
                            test_features=queries, test_labels=test_ds.labels)
    else:
        raise ConfigError(f"protocol must be 'knn' or 'probe', got {protocol!r}")
    return {"protocol": protocol, "top1": top1, "n_bank": len(train_ds),
            "n_query": len(test_ds), "features": "reencoded" if reencode else "bank"}


def run_training(cfg: RunConfig, train_ds: Dataset, test_ds: Dataset | None, out_dir: Path,
                 state: TrainState | None = None, stop_after: int | None = None,
                 checkpoint_name: str = "checkpoint.npid") -> TrainState:
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / checkpoint_name
    digest = cfg.sha256()
    norm = normalization_of(train_ds)
    every = cfg.train.checkpoint_every

    def on_epoch_end(st: TrainState):
        r = st.log[-1]
        acc = "" if r.knn_acc is None else f" knn={r.knn_acc:.4f}"
        log.info("epoch %d lr=%.6g loss=%.6f (%.1fs)%s", r.epoch, r.lr, r.loss, r.seconds, acc)
        if every and st.epoch % every == 0 and st.epoch < cfg.train.epochs:
            save_state(ckpt_path, st, cfg, norm)
            (out_dir / "log.csv").write_text(st.log.to_csv(digest))

    evaluate = None
    if cfg.eval.every and test_ds is not None:
        evaluate = knn_monitor(cfg, train_ds, test_ds)
    view = train_ds.train_view(cfg.augment, cfg.train.seed)
    state = train(cfg.train, view, cfg.encoder, state=state, evaluate=evaluate,
                  on_epoch_end=on_epoch_end, stop_after=stop_after)
    save_state(ckpt_path, state, cfg, norm)
    (out_dir / "log.csv").write_text(state.log.to_csv(digest))
    return state


def _data_from_checkpoint(ckpt: Checkpoint, data_path):
    cfg = ckpt.config
    train_ds, test_ds = load_data(cfg.data, data_path)
    apply_normalization(train_ds, ckpt.header["normalization"])
    apply_normalization(test_ds, ckpt.header["normalization"])
    return cfg, train_ds, test_ds


# --- commands -----------------------------------------------------------------

def cmd_train(args) -> int:
    resume = args.checkpoint is not None and Path(args.checkpoint).exists()
    if args.config is None and not resume:
        raise ConfigError("train needs --config (or --checkpoint of a run to resume)")
    out_dir = Path(args.output or "run")
    ckpt = read_checkpoint(args.checkpoint) if resume else None
    cfg = load_config(args.config) if args.config else ckpt.config
    if args.seed is not None:
        cfg.train.seed = args.seed
    train_ds, test_ds = load_data(cfg.data, args.data)
    cfg = resolve(cfg, train_ds)
    state = None
    if ckpt is not None:
        diffs = diff_configs(ckpt.config, cfg, ignore=RESUME_IGNORE)
        if diffs:
            raise ConfigError("config differs from the checkpoint being resumed:\n  "
                              + "\n  ".join(diffs))
        _, state = restore_state(ckpt)
        apply_normalization(train_ds, ckpt.header["normalization"])
        apply_normalization(test_ds, ckpt.header["normalization"])
        log.info("resuming from %s at epoch %d", args.checkpoint, state.epoch)
    allow = [args.checkpoint, out_dir / "log.csv"] if resume else []
    guard_outputs([out_dir / "checkpoint.npid", out_dir / "log.csv"], args.force, allow)
    state = run_training(cfg, train_ds, test_ds, out_dir, state, args.stop_after)
    log.info("wrote %s (epoch %d)", out_dir / "checkpoint.npid", state.epoch)
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = read_checkpoint(args.checkpoint)
    cfg, train_ds, test_ds = _data_from_checkpoint(ckpt, args.data)
    if args.config:
        want = load_config(args.config)
        if want.encoder.embed_dim != cfg.encoder.embed_dim:
            raise ConfigError(f"config embed_dim={want.encoder.embed_dim} but the checkpoint "
                              f"was trained with embed_dim={cfg.encoder.embed_dim}")
    _, state = restore_state(ckpt)
    reencode = args.reencode or cfg.eval.reencode
    rows = [evaluate_features(cfg, state.encoder, ckpt.bank_f32, train_ds, test_ds, p, reencode)
            for p in args.protocol]
    text = render_csv(METRIC_FIELDS, rows, cfg.sha256())
    if args.output:
        guard_outputs([args.output], args.force)
        Path(args.output).write_text(text)
    for r in rows:
        print(f"{r['protocol']}: top-1 {100 * r['top1']:.2f}% "
              f"({r['n_query']} queries, {r['n_bank']} {r['features']} features)")
    return EXIT_OK


def cmd_retrieve(args) -> int:
    ckpt = read_checkpoint(args.checkpoint)
    cfg = ckpt.config
    labels = None
    try:
        train_ds, _ = load_data(cfg.data, args.data)
        labels = train_ds.labels
    except DataError as exc:
        if args.data:
            raise
        log.warning("labels unavailable (%s)", exc)
    bank = PackedBank(ckpt.bank_f32, labels if labels is not None and len(labels) ==
                      len(ckpt.bank_f32) else None)
    rows = []
    for q in args.query_index:
        if not 0 <= q < bank.n:
            raise ConfigError(f"query index {q} outside [0, {bank.n})")
        idx, sims = retrieve(bank, bank.features[q], args.topk, threads=args.threads)
        for rank, (i, s) in enumerate(zip(idx, sims), start=1):
            lab = int(bank.labels[i])
            rows.append({"query_id": q, "rank": rank, "index": int(i),
                         "similarity": repr(float(s)), "label": "" if lab < 0 else lab})
    text = render_csv(RETRIEVE_FIELDS, rows, cfg.sha256())
    if args.output:
        guard_outputs([args.output], args.force)
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _parse_size(s: str) -> tuple[int, int]:
    try:
        n, d = s.lower().split("x")
        return int(float(n)), int(d)
    except ValueError:
        raise ConfigError(f"--size must look like 1280000x128, got {s!r}") from None


def cmd_bench(args) -> int:
    if args.checkpoint:
        bank = PackedBank(read_checkpoint(args.checkpoint).bank_f32)
        source = str(args.checkpoint)
    else:
        n, d = _parse_size(args.size)
        bank = synth_packed_bank(n, d, seed=args.seed or 0)
        source = f"synthetic {n}x{d}"
    rng = np.random.default_rng(args.seed or 0)
    q = rng.standard_normal((args.queries, bank.dim)).astype(np.float32)
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    report = bench_query(bank, q, args.repetitions, topk=args.topk, threads=args.threads)
    if args.threads > 1:
        # the all-core figure is only meaningful next to the single-thread one
        report["single_thread"] = bench_query(bank, q, args.repetitions, topk=args.topk, threads=1)
    report.update({"source": source, "queries": args.queries, "topk": args.topk,
                   "machine": machine_descriptor()})
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.output:
        guard_outputs([args.output], args.force)
        Path(args.output).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .sweep import load_spec, run_sweep

    spec = load_spec(args.config, args.output)
    if args.seed is not None:
        spec.base.train.seed = args.seed
    results = run_sweep(spec, data_path=args.data, force=args.force, workers=args.workers)
    failed = [r for r in results if r["status"] != "ok"]
    print(f"{len(results) - len(failed)}/{len(results)} cells ok; table at "
          f"{Path(spec.output) / 'aggregate.csv'}")
    return EXIT_CELLS if failed else EXIT_OK


# --- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="npid", description="Instance-discrimination toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True, checkpoint=False):
        if config:
            sp.add_argument("--config", help="INI run configuration")
        sp.add_argument("--checkpoint", required=checkpoint)
        sp.add_argument("--data", help="dataset directory (overrides [data] path)")
        sp.add_argument("--output")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int, default=default_threads())
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")

    t = sub.add_parser("train", help="train an encoder (or resume from --checkpoint)")
    common(t)
    t.add_argument("--stop-after", type=int, help="stop after this many epochs (resumable)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="kNN or linear-probe accuracy of a checkpoint")
    common(e, checkpoint=True)
    e.add_argument("--protocol", choices=("knn", "probe"), action="append")
    e.add_argument("--reencode", action="store_true",
                   help="re-encode the training split instead of using the stored bank")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("retrieve", help="nearest training instances of bank rows")
    common(r, config=False, checkpoint=True)
    r.add_argument("--query-index", type=int, action="append", required=True)
    r.add_argument("--topk", type=int, default=10)
    r.set_defaults(func=cmd_retrieve)

    s = sub.add_parser("sweep", help="grid of training runs with an aggregate table")
    common(s)
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_sweep)

    b = sub.add_parser("bench", help="exhaustive retrieval latency and bank size")
    common(b, config=False)
    b.add_argument("--size", default="1280000x128", help="synthetic bank NxD")
    b.add_argument("--queries", type=int, default=20)
    b.add_argument("--repetitions", type=int, default=1)
    b.add_argument("--topk", type=int, default=10)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    if getattr(args, "protocol", "absent") is None:
        args.protocol = ["knn"]
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (DataError, CheckpointError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except (NumericalError, DegenerateInputError, InvariantError) as exc:
        log.error("numerical error: %s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
