"""Adam, unsupervised BPTT training, supervised fine-tuning and checkpoints."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import engine as E
from .data import VideoDataset, batch_order
from .engine import SeededRng
from .errors import ChecksumError, ConfigError, ContractError, DataError, FormatError, TrainingError
from .model import WTA_RULES, ModelConfig, TwoStreamNet, class_scores, forward_loss

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "epoch", "loss_recon", "loss_pred", "loss_total", "wall_ms")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState):
    """One bias-corrected Adam update, applied in place in ``grads`` order."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise ContractError(f"gradient {g.shape} does not match parameter {name!r} {params[name].shape}")
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name] = state.beta1 * state.m[name] + (1 - state.beta1) * g
        v = state.v[name] = state.beta2 * state.v[name] + (1 - state.beta2) * (g * g)
        update = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        params[name] = (p - update).astype(p.dtype, copy=False)
    return params, state


@dataclass
class TrainConfig:
    epochs: int = 1
    batch_size: int = 32
    sequence_length: int | None = None
    precision: int = 32
    seed: int = 0
    wta_rule: str = "mask"
    log_every: int = 10
    lr: float = 0.001
    max_updates: int | None = None
    clip_norm: float | None = None
    shuffle: bool = True
    deterministic: bool = False

    def __post_init__(self):
        if self.sequence_length is not None and not 2 <= self.sequence_length <= 10:
            raise ConfigError(f"sequence_length must lie in [2, 10], got {self.sequence_length}")
        if self.wta_rule not in WTA_RULES:
            raise ConfigError(f"wta_rule must be one of {WTA_RULES}, got {self.wta_rule!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        E.dtype_for(self.precision)


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    adam: AdamState
    rng_state: dict
    step: int = 0

    def net(self) -> TwoStreamNet:
        return TwoStreamNet(self.config, {n: np.array(v, copy=True) for n, v in self.params.items()})


@dataclass
class MetricsLog:
    columns: tuple[str, ...] = METRIC_COLUMNS
    rows: list[dict] = field(default_factory=list)

    def append(self, **row) -> None:
        self.rows.append(row)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(self.columns)
            for r in self.rows:
                w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in self.columns])

    @classmethod
    def from_csv(cls, path) -> "MetricsLog":
        with open(path, newline="") as f:
            reader = csv.reader(f)
            columns = tuple(next(reader))
            rows = [{c: (float(v) if "." in v or "e" in v or "inf" in v or "nan" in v else int(v)) for c, v in zip(columns, line)} for line in reader]
        return cls(columns, rows)


def _clip(grads: dict[str, np.ndarray], max_norm: float | None) -> dict[str, np.ndarray]:
    if max_norm is None:
        return grads
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if norm <= max_norm:
        return grads
    return {n: g * (max_norm / norm) for n, g in grads.items()}


def _param_grads(grads: dict, bound: TwoStreamNet, names: list[str]) -> dict[str, np.ndarray]:
    # parameters the loss never reached (cell.W when T=2) get a zero gradient
    out = {}
    for n in names:
        var = bound.params[n]
        out[n] = grads[var.id] if var.id in grads else np.zeros_like(var.value)
    return out


def _snapshot(net: TwoStreamNet, adam: AdamState, rng: SeededRng, step: int) -> Checkpoint:
    return Checkpoint(
        net.config,
        {n: np.array(net.params[n], copy=True) for n in net.names()},
        AdamState({k: v.copy() for k, v in adam.m.items()}, {k: v.copy() for k, v in adam.v.items()}, adam.t, adam.lr, adam.beta1, adam.beta2, adam.eps),
        rng.get_state(),
        step,
    )


class _Schedule:
    """Maps a global update index to the batch it trains on.

    Epoch ``e`` uses the permutation drawn from ``rng.derive(e)``, so any
    update can be located without replaying earlier ones.
    """

    def __init__(self, n: int, batch_size: int, shuffle: bool, rng: SeededRng):
        self.n, self.batch_size, self.shuffle, self.rng = n, batch_size, shuffle, rng
        self.per_epoch = math.ceil(n / batch_size)
        self._epoch, self._order = -1, None

    def batch(self, step: int) -> tuple[int, np.ndarray]:
        epoch, b = divmod(step, self.per_epoch)
        if epoch != self._epoch:
            self._epoch = epoch
            self._order = batch_order(self.n, self.shuffle, self.rng.derive(epoch))
        return epoch, self._order[b * self.batch_size : (b + 1) * self.batch_size]


def _frames(ds: VideoDataset, idx: np.ndarray, length: int | None, dtype) -> np.ndarray:
    v = ds.videos[idx]
    if length is not None:
        if length > v.shape[1]:
            raise ContractError(f"sequence_length {length} exceeds the {v.shape[1]} frames per video")
        v = v[:, :length]
    return np.ascontiguousarray(v.transpose(1, 0, 2, 3, 4), dtype=dtype)


def train_unsupervised(
    net: TwoStreamNet,
    ds: VideoDataset,
    cfg: TrainConfig,
    resume: Checkpoint | None = None,
    on_update: Callable[[dict], None] | None = None,
) -> tuple[Checkpoint, MetricsLog]:
    """Minimise the two-stream loss with BPTT and Adam.

    Every update is logged. With ``resume`` the run continues from the
    checkpoint's step and reproduces an uninterrupted run exactly.
    """
    if ds.frames < 2:
        raise ContractError("training videos need at least 2 frames")
    dtype = E.dtype_for(cfg.precision)
    rng = SeededRng(cfg.seed)
    sched = _Schedule(len(ds), cfg.batch_size, cfg.shuffle, rng.derive(1))
    total = cfg.max_updates if cfg.max_updates is not None else cfg.epochs * sched.per_epoch
    if resume is not None:
        net = resume.net().astype(dtype)
        adam = _snapshot(net, resume.adam, rng, 0).adam
        rng.set_state(resume.rng_state)
        start = resume.step
    else:
        net = net.astype(dtype)
        adam = AdamState(lr=cfg.lr)
        start = 0
    names = [n for n in net.names() if not n.startswith("head.")]
    metrics = MetricsLog()
    good = _snapshot(net, adam, rng, start)
    for step in range(start, total):
        t0 = time.perf_counter()
        epoch, idx = sched.batch(step)
        tape = E.Tape()
        bound = net.bind(tape)
        rep = forward_loss(bound, _frames(ds, idx, cfg.sequence_length, dtype), cfg.wta_rule)
        if not math.isfinite(rep.loss_total):
            raise TrainingError(f"loss diverged to {rep.loss_total} at update {step + 1}", good)
        grads = E.backward(tape, rep.loss)
        g = _param_grads(grads, bound, names)
        try:
            adam_step(net.params, _clip(g, cfg.clip_norm), adam)
        except TrainingError as exc:
            raise TrainingError(str(exc), good) from None
        wall = 0.0 if cfg.deterministic else (time.perf_counter() - t0) * 1e3
        row = dict(step=step + 1, epoch=epoch, loss_recon=rep.loss_recon, loss_pred=rep.loss_pred, loss_total=rep.loss_total, wall_ms=wall)
        metrics.append(**row)
        if on_update is not None:
            on_update(row)
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            log.info("update %d epoch %d loss %.5f (recon %.5f pred %.5f)", step + 1, epoch, rep.loss_total, rep.loss_recon, rep.loss_pred)
        good = _snapshot(net, adam, rng, step + 1)
    return _snapshot(net, adam, rng, total), metrics


# ---------------------------------------------------------------------------
# supervised fine-tuning
# ---------------------------------------------------------------------------


@dataclass
class FinetuneLog:
    updates: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)

    @property
    def final_val_accuracy(self) -> float:
        return self.epochs[-1]["val_acc"] if self.epochs else float("nan")

    def to_csv(self, updates_path, epochs_path) -> None:
        for path, rows, cols in (
            (updates_path, self.updates, ("step", "epoch", "loss_xent", "wall_ms")),
            (epochs_path, self.epochs, ("epoch", "train_acc", "val_acc")),
        ):
            with open(path, "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(cols)
                for r in rows:
                    w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])


def predict_classes(net: TwoStreamNet, ds: VideoDataset, batch_size: int = 128, length: int | None = None) -> np.ndarray:
    preds = []
    for start in range(0, len(ds), batch_size):
        idx = np.arange(start, min(start + batch_size, len(ds)))
        scores = class_scores(net, _frames(ds, idx, length, net.dtype))
        preds.append(np.argmax(scores.reshape(len(idx), -1), axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def finetune_supervised(
    net: TwoStreamNet,
    train_ds: VideoDataset,
    cfg: TrainConfig,
    val_ds: VideoDataset | None = None,
    classes: int | None = None,
) -> tuple[Checkpoint, FinetuneLog]:
    """Train the recurrent stream plus a linear head end-to-end on labels.

    The head sums the dense recurrent states over time, averages them
    spatially and maps the channel vector to class scores; the loss is
    softmax cross-entropy. The decoder is left untouched.
    """
    classes = classes or train_ds.class_count
    for ds in (train_ds, val_ds):
        if ds is not None and ds.labels.size and (ds.labels.min() < 0 or ds.labels.max() >= classes):
            raise DataError(f"labels must lie in [0, {classes})")
    dtype = E.dtype_for(cfg.precision)
    rng = SeededRng(cfg.seed)
    net = net.astype(dtype)
    if "head.k" not in net.params:
        net.add_head(classes, rng.derive(2))
    names = [n for n in net.names() if not n.startswith("dec.")]
    sched = _Schedule(len(train_ds), cfg.batch_size, cfg.shuffle, rng.derive(1))
    total = cfg.max_updates if cfg.max_updates is not None else cfg.epochs * sched.per_epoch
    adam = AdamState(lr=cfg.lr)
    out = FinetuneLog()
    correct = seen = 0
    for step in range(total):
        t0 = time.perf_counter()
        epoch, idx = sched.batch(step)
        tape = E.Tape()
        bound = net.bind(tape)
        scores = class_scores(bound, _frames(train_ds, idx, cfg.sequence_length, dtype))
        labels = train_ds.labels[idx]
        loss = E.softmax_xent(scores, labels)
        lv = float(loss.value.reshape(-1)[0])
        if not math.isfinite(lv):
            raise TrainingError(f"loss diverged to {lv} at update {step + 1}", _snapshot(net, adam, rng, step))
        correct += int(np.sum(np.argmax(scores.value.reshape(len(idx), -1), axis=1) == labels))
        seen += len(idx)
        grads = E.backward(tape, loss)
        adam_step(net.params, _clip(_param_grads(grads, bound, names), cfg.clip_norm), adam)
        wall = 0.0 if cfg.deterministic else (time.perf_counter() - t0) * 1e3
        out.updates.append(dict(step=step + 1, epoch=epoch, loss_xent=lv, wall_ms=wall))
        if (step + 1) % sched.per_epoch == 0 or step + 1 == total:
            val = float("nan")
            if val_ds is not None and len(val_ds):
                val = float(np.mean(predict_classes(net, val_ds, length=cfg.sequence_length) == val_ds.labels))
            out.epochs.append(dict(epoch=epoch, train_acc=correct / seen, val_acc=val))
            log.info("epoch %d train acc %.4f val acc %.4f", epoch, correct / seen, val)
            correct = seen = 0
    return _snapshot(net, adam, rng, total), out


# ---------------------------------------------------------------------------
# checkpoint file
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"RWTA"
CKPT_VERSION = 1
_CK_HEADER = struct.Struct("<4sIIIQQ16sII8x")
assert _CK_HEADER.size == 64
_KINDS = {0: "param", 1: "m", 2: "v"}


def _tensor_block(name: str, kind: int, arr: np.ndarray, dtype: np.dtype) -> bytes:
    raw = name.encode()
    arr = np.ascontiguousarray(arr, dtype=dtype.newbyteorder("<"))
    head = struct.pack(f"<H{len(raw)}sBB{arr.ndim}I", len(raw), raw, kind, arr.ndim, *arr.shape)
    return head + arr.tobytes()


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    """Serialise a checkpoint.

    64-byte header ``"RWTA" version:u32 precision:u32 tensors:u32 step:u64
    adam_t:u64 config_digest[16] config_len:u32 rng_len:u32 pad[8]``, then
    the model config JSON, the rng state JSON, Adam's lr/beta1/beta2/eps as
    four float64, the tensor blocks (parameters, then first moments, then
    second moments, each in registration order) and a trailing SHA-256 of
    everything before it. All integers and floats are little-endian.
    """
    names = [n for n in TwoStreamNet(ckpt.config, ckpt.params).names()]
    dtype = np.asarray(ckpt.params[names[0]]).dtype
    precision = 64 if dtype == np.float64 else 32
    dtype = E.dtype_for(precision)
    cfg = ckpt.config.to_json().encode()
    rng = json.dumps(ckpt.rng_state, sort_keys=True).encode()
    blocks = [_tensor_block(n, 0, ckpt.params[n], dtype) for n in names]
    moment_names = [n for n in names if n in ckpt.adam.m]
    blocks += [_tensor_block(n, 1, ckpt.adam.m[n], dtype) for n in moment_names]
    blocks += [_tensor_block(n, 2, ckpt.adam.v[n], dtype) for n in moment_names]
    header = _CK_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, precision, len(blocks), ckpt.step, ckpt.adam.t, ckpt.config.digest(), len(cfg), len(rng))
    a = ckpt.adam
    body = header + cfg + rng + struct.pack("<4d", a.lr, a.beta1, a.beta2, a.eps) + b"".join(blocks)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def parse_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < _CK_HEADER.size + 32:
        raise FormatError("checkpoint truncated", len(buf))
    magic, version, precision, count, step, adam_t, digest, cfg_len, rng_len = _CK_HEADER.unpack_from(buf)
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}", 0)
    if version != CKPT_VERSION:
        raise FormatError(f"checkpoint version {version} is not supported (expected {CKPT_VERSION})", 4)
    body, tail = buf[:-32], buf[-32:]
    if hashlib.sha256(body).digest() != tail:
        raise ChecksumError("checkpoint checksum mismatch", len(body))
    if precision not in (32, 64):
        raise FormatError(f"bad precision field {precision}", 8)
    dtype = np.dtype("<f8" if precision == 64 else "<f4")
    pos = _CK_HEADER.size
    try:
        config = ModelConfig.from_json(body[pos : pos + cfg_len].decode())
        pos += cfg_len
        rng_state = json.loads(body[pos : pos + rng_len].decode())
        pos += rng_len
    except (ValueError, TypeError) as exc:
        raise FormatError(f"unreadable config or rng section: {exc}", pos) from None
    if config.digest() != digest:
        raise FormatError("config digest does not match the stored config", 32)
    lr, b1, b2, eps = struct.unpack_from("<4d", body, pos)
    pos += 32
    params, m, v = {}, {}, {}
    for _ in range(count):
        try:
            (nlen,) = struct.unpack_from("<H", body, pos)
            name = body[pos + 2 : pos + 2 + nlen].decode()
            pos += 2 + nlen
            kind, ndim = struct.unpack_from("<BB", body, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
        except struct.error:
            raise FormatError("tensor block header truncated", pos) from None
        nbytes = math.prod(shape) * dtype.itemsize
        if pos + nbytes > len(body) or kind not in _KINDS:
            raise FormatError(f"bad tensor block {name!r}", pos)
        arr = np.frombuffer(body, dtype=dtype, count=math.prod(shape), offset=pos).reshape(shape)
        pos += nbytes
        {0: params, 1: m, 2: v}[kind][name] = arr.astype(dtype.newbyteorder("="))
    if pos != len(body):
        raise FormatError(f"{len(body) - pos} unexpected bytes after tensor blocks", pos)
    return Checkpoint(config, params, AdamState(m, v, adam_t, lr, b1, b2, eps), rng_state, step)


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())
