"""Command-line orchestration: gen-data, train, prune, eval.

Every command reads one config file, writes only under the configured
output directory, and holds a lock file there so concurrent runs cannot
interleave.  Exit codes: 0 success, 1 runtime or numeric failure,
2 config or usage error.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import io
import os
import sys

import numpy as np

from . import codec, metrics, model as model_mod, pruning
from .autodiff import Rng
from .config import RunConfig, load_config
from .errors import ConfigError, LoopPruneError


def log(level: str, **kv) -> None:
    print(level.upper() + " " + " ".join(f"{k}={v}" for k, v in kv.items()))


@contextlib.contextmanager
def output_lock(output_dir):
    os.makedirs(output_dir, exist_ok=True)
    lock = os.path.join(output_dir, ".loopprune.lock")
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(
            f"output dir is locked by another run: {lock} (remove it if stale)")
    try:
        os.close(fd)
        yield
    finally:
        os.unlink(lock)


def _write_text(path, text: str) -> None:
    os.makedirs(os.path.dirname(path), exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)
    os.replace(tmp, path)


def _data_dir(cfg: RunConfig) -> str:
    return os.path.join(cfg.output_dir, "data")


def _manifest(cfg: RunConfig) -> codec.DatasetManifest:
    path = os.path.join(_data_dir(cfg), "manifest.txt")
    if not os.path.exists(path):
        raise ConfigError(f"dataset manifest not found: {path} (run gen-data first)")
    return codec.DatasetManifest.load(path)


def cmd_gen_data(cfg: RunConfig) -> int:
    if cfg.source_dir is None:
        raise ConfigError("dataset.source_dir is required for gen-data")
    manifest = codec.gen_dataset(cfg.source_dir, _data_dir(cfg), cfg.qps,
                                 patch_size=cfg.patch_size,
                                 stride=cfg.stride or None,
                                 train_fraction=cfg.train_fraction,
                                 seed=cfg.seed)
    for qp in manifest.qps():
        for split in ("train", "val"):
            log("info", cmd="gen-data", qp=qp, split=split,
                patches=len(manifest.by_split(split, qp)))
    log("info", cmd="gen-data", manifest=os.path.join(_data_dir(cfg), "manifest.txt"))
    return 0


def cmd_train(cfg: RunConfig) -> int:
    manifest = _manifest(cfg)
    root = _data_dir(cfg)
    x_train, y_train = codec.load_pairs(manifest, root, "train")
    x_val, y_val = codec.load_pairs(manifest, root, "val")

    model = model_mod.build_default_uclf(cfg.width_scale, seed=cfg.seed,
                                         patch_size=manifest.patch_size)
    report = model_mod.build_report(model)
    train_dir = os.path.join(cfg.output_dir, "train")
    _write_text(os.path.join(train_dir, "build_report.txt"), report)

    ckpt = os.path.join(train_dir, "baseline.ckpt")
    rows = []
    best_psnr = -np.inf
    degraded_psnr = float(np.mean(
        [metrics.psnr(x_val[i], y_val[i], peak=1.0) for i in range(len(x_val))]))
    log("info", cmd="train", degraded_psnr_db=f"{degraded_psnr:.4f}",
        train_patches=len(x_train), val_patches=len(x_val))

    os.makedirs(train_dir, exist_ok=True)
    model_mod.save_model(model, ckpt)  # epoch-0 checkpoint (identity network)
    if cfg.epochs > 0:
        best_psnr, _ = pruning.validation_psnr(model, x_val, y_val)
        rng = Rng(cfg.seed).split()

        def on_epoch(epoch, loss):
            nonlocal best_psnr
            val_psnr, _ = pruning.validation_psnr(model, x_val, y_val)
            rows.append((epoch + 1, loss, val_psnr))
            log("info", cmd="train", epoch=epoch + 1, mae=f"{loss:.6f}",
                val_psnr_db=f"{val_psnr:.4f}")
            if val_psnr > best_psnr:
                best_psnr = val_psnr
                model_mod.save_model(model, ckpt)

        pruning.fine_tune(model, x_train, y_train, cfg.epochs, lr=cfg.lr,
                          batch_size=cfg.batch_size, rng=rng, on_epoch=on_epoch)

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_mae", "val_psnr_db"])
    for row in rows:
        w.writerow([row[0], f"{row[1]:.8f}", f"{row[2]:.6f}"])
    _write_text(os.path.join(train_dir, "train_log.csv"), buf.getvalue())
    log("info", cmd="train", checkpoint=ckpt,
        best_psnr_db="n/a" if cfg.epochs == 0 else f"{best_psnr:.4f}")
    return 0


def cmd_prune(cfg: RunConfig, checkpoint) -> int:
    manifest = _manifest(cfg)
    root = _data_dir(cfg)
    x_train, y_train = codec.load_pairs(manifest, root, "train")
    x_val, y_val = codec.load_pairs(manifest, root, "val")
    model = model_mod.load_model(checkpoint)

    prune_cfg = pruning.PruneConfig(st=cfg.st, ct=cfg.ct, at=cfg.at,
                                    max_drop=cfg.max_drop, pt=cfg.pt,
                                    train_epochs=cfg.prune_train_epochs,
                                    lr=cfg.prune_lr, batch_size=cfg.prune_batch_size,
                                    seed=cfg.seed)
    pruned, trace = pruning.prune_loop(model, prune_cfg, (x_train, y_train),
                                       (x_val, y_val))

    prune_dir = os.path.join(cfg.output_dir, "prune")
    os.makedirs(prune_dir, exist_ok=True)
    out_ckpt = os.path.join(prune_dir, "pruned.ckpt")
    model_mod.save_model(pruned, out_ckpt)
    _write_text(os.path.join(prune_dir, "trace.csv"), trace.to_csv())
    if trace.records:
        _write_text(os.path.join(prune_dir, "trace.svg"), trace.to_svg())

    final_psnr, _ = pruning.validation_psnr(pruned, x_val, y_val)
    log("info", cmd="prune",
        params_before=trace.original_params,
        params_after=model_mod.count_parameters(pruned),
        psnr_before_db=f"{trace.baseline_psnr:.4f}",
        psnr_after_db=f"{final_psnr:.4f}",
        attempts=len(trace.records),
        checkpoint=out_ckpt)
    return 0


def _rd_curve_for(model, manifest, root, qp):
    """(rate, psnr, psnr_degraded) of one QP's validation records."""
    x, y = codec.load_pairs(manifest, root, "val", qp=qp)
    q = codec.QuantSpec(qp)
    rate = sum(codec.rate_proxy((x[i, 0] * 255.0).astype(np.uint8), q)
               for i in range(len(x)))
    degraded = float(np.mean([metrics.psnr(x[i], y[i], peak=1.0) for i in range(len(x))]))
    if model is None:
        return rate, degraded, degraded
    preds = model_mod.apply_model(model, x)
    filtered = float(np.mean([metrics.psnr(preds[i], y[i], peak=1.0) for i in range(len(x))]))
    return rate, filtered, degraded


def cmd_eval(cfg: RunConfig, checkpoint, checkpoint2=None) -> int:
    manifest = _manifest(cfg)
    root = _data_dir(cfg)
    models = [("degraded", None), ("model_a", model_mod.load_model(checkpoint))]
    if checkpoint2 is not None:
        models.append(("model_b", model_mod.load_model(checkpoint2)))

    qps = manifest.qps()
    rows = []
    curves = {}
    for label, model in models:
        pts = []
        for qp in qps:
            rate, val_psnr, _ = _rd_curve_for(model, manifest, root, qp)
            rows.append((label, qp, rate, val_psnr))
            pts.append(metrics.RDPoint(rate, val_psnr))
            log("info", cmd="eval", condition=label, qp=qp,
                rate_bits=f"{rate:.3f}", psnr_db=f"{val_psnr:.4f}")
        curves[label] = pts

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["condition", "qp", "rate_bits", "psnr_db"])
    for label, qp, rate, val_psnr in rows:
        w.writerow([label, qp, f"{rate:.6f}", f"{val_psnr:.6f}"])

    rd_results = {}
    bd_note = ""
    if len(qps) >= 4:
        for label in curves:
            if label == "degraded":
                continue
            rd_results[label] = metrics.bd_metrics(curves["degraded"], curves[label])
    else:
        bd_note = (f"# BD metrics skipped: {len(qps)} QP level(s) in manifest, "
                   "need >= 4 RD points\n")

    a = model_mod.count_parameters(models[1][1])
    b = model_mod.count_parameters(models[2][1]) if checkpoint2 is not None else a
    counts = {"model": (a, b)}
    report = metrics.render_report(rd_results=rd_results or None,
                                   param_counts=counts or None)
    eval_dir = os.path.join(cfg.output_dir, "eval")
    _write_text(os.path.join(eval_dir, "rd.csv"), buf.getvalue())
    _write_text(os.path.join(eval_dir, "report.txt"), bd_note + report.table)
    log("info", cmd="eval", rd_csv=os.path.join(eval_dir, "rd.csv"),
        report=os.path.join(eval_dir, "report.txt"))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="loopprune",
        description="dataset generation, training, pruning and evaluation "
                    "of the codec in-loop restoration filter")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen-data", "train", "prune", "eval"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="path to the run config file")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config key")
        if name == "prune":
            p.add_argument("--checkpoint", default=None,
                           help="model checkpoint to prune (default: trained baseline)")
        if name == "eval":
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--checkpoint2", default=None,
                           help="optional second checkpoint for before/after columns")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.set)
        with output_lock(cfg.output_dir):
            if args.command == "gen-data":
                return cmd_gen_data(cfg)
            if args.command == "train":
                return cmd_train(cfg)
            if args.command == "prune":
                ckpt = args.checkpoint or os.path.join(cfg.output_dir, "train", "baseline.ckpt")
                if not os.path.exists(ckpt):
                    raise ConfigError(f"checkpoint not found: {ckpt}")
                return cmd_prune(cfg, ckpt)
            if args.command == "eval":
                return cmd_eval(cfg, args.checkpoint, args.checkpoint2)
            raise ConfigError(f"unknown command {args.command}")
    except ConfigError as exc:
        print(f"ERROR config: {exc}", file=sys.stderr)
        return 2
    except (LoopPruneError, RuntimeError, OSError) as exc:
        print(f"ERROR runtime: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
