"""``rwta`` command line: synth, train, finetune, eval, gradcheck, dump-filters.

Settings resolve as defaults, then ``--config`` file, then flags. Each
command writes the resolved config next to its outputs.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import config as C
from . import data as D
from . import evaluate as V
from . import train as T
from .engine import SeededRng, dtype_for
from .errors import ConfigError, RwtaError, TrainingError
from .model import TwoStreamNet, loss_gradient_errors

log = logging.getLogger("rwta")

GRADCHECK_THRESHOLD = 1e-4
COMMANDS = ("synth", "train", "finetune", "eval", "gradcheck", "dump-filters")

# flag -> config key, for the flags that map one-to-one
_FLAG_KEYS = {
    "seed": "seed",
    "precision": "precision",
    "frames": "frames",
    "step": "step",
    "out": "out",
    "images": "images",
    "labels": "labels",
    "train_data": "train_data",
    "val_data": "val_data",
    "test_data": "test_data",
    "checkpoint": "checkpoint",
}


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key = value file")
    common.add_argument("--seed", type=int)
    common.add_argument("--precision", type=int, choices=(32, 64))
    common.add_argument("--deterministic", action="store_true", default=None, help="single-threaded, wall times recorded as 0")
    common.add_argument("--mode", help="synth: rotate|scan; eval: svm|vote")
    common.add_argument("--frames", type=int)
    common.add_argument("--step", type=float, help="rotation step in degrees")
    common.add_argument("--out", metavar="DIR")
    common.add_argument("--images", metavar="PATH", help="IDX image file")
    common.add_argument("--labels", metavar="PATH", help="IDX label file")
    common.add_argument("--train-data", dest="train_data", metavar="PATH")
    common.add_argument("--val-data", dest="val_data", metavar="PATH")
    common.add_argument("--test-data", dest="test_data", metavar="PATH")
    common.add_argument("--checkpoint", metavar="PATH")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    common.add_argument("-q", "--quiet", action="store_true")

    parser = argparse.ArgumentParser(prog="rwta", description="Recurrent winner-take-all video autoencoder")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    helps = {
        "synth": "build rotated or scanned videos from IDX files",
        "train": "unsupervised two-stream training",
        "finetune": "supervised training of the recurrent stream plus a linear head",
        "eval": "feature extraction, linear SVM and report",
        "gradcheck": "finite-difference check of every parameter gradient",
        "dump-filters": "write decoder filters as PGM images",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def resolve(args: argparse.Namespace) -> C.RunConfig:
    cfg = C.load(args.config) if args.config else C.RunConfig()
    changes = {key: getattr(args, flag) for flag, key in _FLAG_KEYS.items() if getattr(args, flag) is not None}
    if args.deterministic:
        changes["deterministic"] = True
    if args.mode is not None:
        changes["eval_mode" if args.command == "eval" else "mode"] = args.mode
    cfg = cfg.replace(**changes)
    if args.set:
        cfg = C.parse("\n".join(args.set), base=cfg)
    return cfg


def _require(cfg: C.RunConfig, *keys: str) -> None:
    missing = [k for k in keys if not getattr(cfg, k)]
    if missing:
        raise UsageError(f"missing required setting(s): {', '.join(missing)}")


def _out_dir(cfg: C.RunConfig, command: str) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    C.save(cfg, out / f"{command}.cfg")
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(cfg: C.RunConfig) -> int:
    _require(cfg, "images", "labels")
    images = D.load_idx(cfg.images, cfg.labels)
    if cfg.limit is not None:
        images = images.subset(np.arange(min(cfg.limit, len(images))))
    if cfg.mode == "rotate":
        ds = D.synthesize_rotations(images, cfg.frames, cfg.step)
    else:
        ds = D.synthesize_scans(images, cfg.window, cfg.stride, cfg.pad_to)
    out = _out_dir(cfg, "synth")
    if cfg.zca or cfg.zca_from:
        if cfg.zca_from:
            z = np.load(cfg.zca_from)
            zt = D.ZcaTransform(z["mean"], z["whiten"], float(z["epsilon"]))
        else:
            zt = D.zca_fit(ds.videos.reshape(-1, int(np.prod(ds.videos.shape[2:]))), cfg.zca_epsilon)
            np.savez(out / "zca.npz", mean=zt.mean, whiten=zt.whiten, epsilon=zt.epsilon)
        ds.videos = D.zca_apply(zt, ds.videos)
        ds.meta["zca_epsilon"] = zt.epsilon
    ds = ds.astype(dtype_for(cfg.precision))
    D.save_dataset(ds, out / "videos.rwd")
    print(f"wrote {len(ds)} videos of {ds.frames} frames to {out / 'videos.rwd'}")
    return 0


def cmd_train(cfg: C.RunConfig) -> int:
    _require(cfg, "train_data")
    ds = D.load_dataset(cfg.train_data)
    tc = cfg.train_config()
    out = _out_dir(cfg, "train")
    resume = T.load_checkpoint(cfg.checkpoint) if cfg.checkpoint else None
    net = TwoStreamNet.init(cfg.model_config(), SeededRng(cfg.seed), dtype_for(cfg.precision))
    try:
        ckpt, metrics = T.train_unsupervised(net, ds, tc, resume=resume)
    except TrainingError as exc:
        if exc.checkpoint is not None:
            T.save_checkpoint(exc.checkpoint, out / "last_good.ckpt")
        raise
    T.save_checkpoint(ckpt, out / "checkpoint.ckpt")
    metrics.to_csv(out / "metrics.csv")
    loss = metrics.column("loss_total")
    if len(loss):
        print(f"{len(loss)} updates, loss {loss[0]:.6f} -> {loss[-1]:.6f}")
    return 0


def cmd_finetune(cfg: C.RunConfig) -> int:
    _require(cfg, "train_data")
    train_ds = D.load_dataset(cfg.train_data)
    val_ds = D.load_dataset(cfg.val_data) if cfg.val_data else None
    if cfg.checkpoint:
        net = T.load_checkpoint(cfg.checkpoint).net()
    else:
        net = TwoStreamNet.init(cfg.model_config(), SeededRng(cfg.seed), dtype_for(cfg.precision))
    out = _out_dir(cfg, "finetune")
    ckpt, flog = T.finetune_supervised(net, train_ds, cfg.train_config(), val_ds)
    T.save_checkpoint(ckpt, out / "finetune.ckpt")
    flog.to_csv(out / "finetune_updates.csv", out / "finetune_epochs.csv")
    last = flog.epochs[-1] if flog.epochs else None
    if last:
        print(f"train_acc={last['train_acc']:.4f} val_acc={last['val_acc']:.4f}")
    return 0


def _fit_svm(cfg: C.RunConfig, x: np.ndarray, y: np.ndarray, classes: int) -> V.LinearSvm:
    reg = cfg.svm_reg
    grid = cfg.reg_grid()
    if grid:
        # choose reg on the last fifth of the training rows, then refit on all of them
        cut = len(x) - max(1, len(x) // 5)
        scores = []
        for r in grid:
            svm = V.svm_train(x[:cut], y[:cut], r, cfg.svm_epochs, SeededRng(cfg.seed), classes=classes)
            scores.append(float(np.mean(V.svm_predict(svm, x[cut:])[0] == y[cut:])))
            log.info("svm reg %g: held-out accuracy %.4f", r, scores[-1])
        reg = grid[int(np.argmax(scores))]
    return V.svm_train(x, y, reg, cfg.svm_epochs, SeededRng(cfg.seed), classes=classes)


def _windows(videos: np.ndarray, labels: np.ndarray, length: int):
    n, t = videos.shape[:2]
    if t < length:
        raise ConfigError(f"vote_window {length} exceeds the {t} frames per video")
    starts = range(t - length + 1)
    x = np.concatenate([videos[:, s : s + length] for s in starts])
    return x, np.tile(labels, len(starts))


def cmd_eval(cfg: C.RunConfig) -> int:
    _require(cfg, "checkpoint", "train_data", "test_data")
    net = T.load_checkpoint(cfg.checkpoint).net()
    train_ds, test_ds = D.load_dataset(cfg.train_data), D.load_dataset(cfg.test_data)
    classes = max(train_ds.class_count, test_ds.class_count)
    out = _out_dir(cfg, "eval")
    rule, dense = cfg.wta_rule, cfg.dense_features
    votes = None
    if cfg.eval_mode == "svm":
        if cfg.feature_mode == "pooled":
            raise ConfigError("feature_mode pooled yields per-frame rows; use --mode vote")
        f_train = V.extract_batch(net, train_ds.videos, cfg.feature_mode, dense, rule=rule)
        f_test = V.extract_batch(net, test_ds.videos, cfg.feature_mode, dense, rule=rule)
        svm = _fit_svm(cfg, f_train, train_ds.labels, classes)
        preds, _ = V.svm_predict(svm, f_test)
        if cfg.dump_features:
            V.write_features_csv(out / "features_train.csv", train_ds.source_ids, train_ds.labels, f_train)
            V.write_features_csv(out / "features_test.csv", test_ds.source_ids, test_ds.labels, f_test)
    elif cfg.feature_mode == "pooled":
        rows = [V.extract_features(net, v, "pooled", rule=rule).values for v in train_ds.videos]
        x = np.concatenate(rows)
        y = np.repeat(train_ds.labels, [len(r) for r in rows])
        svm = _fit_svm(cfg, x, y, classes)
        votes = [V.per_frame_vote(net, svm, v, rule=rule) for v in test_ds.videos]
        preds = np.array([v.label for v in votes])
    else:
        x, y = _windows(train_ds.videos, train_ds.labels, cfg.vote_window)
        svm = _fit_svm(cfg, V.extract_batch(net, x, cfg.feature_mode, dense, rule=rule), y, classes)
        votes = [V.sliding_window_vote(net, svm, v, cfg.vote_window, cfg.feature_mode, rule) for v in test_ds.videos]
        preds = np.array([v.label for v in votes])
    rep = V.report(preds, test_ds.labels, classes)
    rep.votes = votes
    rep.to_csv(out / "report.csv")
    print(rep.summary())
    return 0


def cmd_gradcheck(cfg: C.RunConfig) -> int:
    if cfg.precision != 64:
        log.warning("gradient checks always run at 64-bit precision")
    errors = loss_gradient_errors(seed=cfg.seed, rule=cfg.wta_rule)
    for name, err in errors.items():
        print(f"{name:8s} {err:.3e}")
    worst = max(errors.values())
    print(f"max relative error {worst:.3e}")
    return 0 if worst < GRADCHECK_THRESHOLD else 1


def write_pgm(path, image: np.ndarray) -> None:
    """Binary PGM, min-max scaled to 0..255 (a constant image maps to 0)."""
    img = np.asarray(image, dtype=np.float64)
    lo, hi = img.min(), img.max()
    scaled = np.zeros(img.shape) if hi == lo else (img - lo) / (hi - lo) * 255.0
    pixels = np.rint(scaled).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        f.write(pixels.tobytes())


def cmd_dump_filters(cfg: C.RunConfig) -> int:
    _require(cfg, "checkpoint")
    kernel = T.load_checkpoint(cfg.checkpoint).params["dec.k"]  # in_ch x C x k x k
    out = _out_dir(cfg, "dump-filters") / "filters"
    out.mkdir(exist_ok=True)
    ci, c, k, _ = kernel.shape
    # colour inputs are laid side by side
    tiles = [np.concatenate(list(kernel[:, j]), axis=1) for j in range(c)]
    for j, tile in enumerate(tiles):
        write_pgm(out / f"filter_{j:03d}.pgm", tile)
    cols = int(np.ceil(np.sqrt(c)))
    rows = int(np.ceil(c / cols))
    th, tw = k, k * ci
    grid = np.zeros((rows * (th + 1) + 1, cols * (tw + 1) + 1))
    for j, tile in enumerate(tiles):
        lo, hi = tile.min(), tile.max()
        norm = np.zeros_like(tile) if hi == lo else (tile - lo) / (hi - lo)
        r, q = divmod(j, cols)
        grid[1 + r * (th + 1) : 1 + r * (th + 1) + th, 1 + q * (tw + 1) : 1 + q * (tw + 1) + tw] = norm
    write_pgm(out / "grid.pgm", grid)
    print(f"wrote {c} filters to {out}")
    return 0


HANDLERS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "dump-filters": cmd_dump_filters,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
    except (ConfigError, OSError) as exc:
        parser.error(str(exc))
    threads = os.environ.get("RWTA_THREADS")
    limit = 1 if cfg.deterministic else (int(threads) if threads else None)
    try:
        with threadpool_limits(limits=limit):
            return HANDLERS[args.command](cfg)
    except UsageError as exc:
        parser.error(str(exc))
    except (RwtaError, OSError, ValueError) as exc:
        print(f"rwta {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
