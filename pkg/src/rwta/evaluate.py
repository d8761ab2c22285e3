"""Feature extraction, linear SVM classification, voting and reports."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from .engine import SeededRng
from .errors import ConfigError, ContractError, ShapeError
from .model import TwoStreamNet, recurrent_encode

FEATURE_MODES = ("sum-collapse", "last-state", "pooled")


@dataclass
class FeatureVector:
    values: np.ndarray  # (D,), or (T, D) per-frame rows for "pooled"
    source: str


def _collapse(net: TwoStreamNet, frames, mode: str, dense: bool, rule: str) -> np.ndarray:
    """frames: T x n x C x H x W -> n x D (or n x T x D for pooled)."""
    out = recurrent_encode(net, frames, rule=rule)
    maps = out.states if dense else out.codes
    n = maps[0].shape[0]
    if mode == "sum-collapse":
        acc = maps[0].copy()
        for m in maps[1:]:
            acc += m
        return acc.reshape(n, -1)
    if mode == "last-state":
        return maps[-1].reshape(n, -1)
    if mode == "pooled":
        return np.stack([E.maxpool2d(m).reshape(n, -1) for m in maps], axis=1)
    raise ConfigError(f"unknown feature mode {mode!r}; expected one of {FEATURE_MODES}")


def extract_features(net: TwoStreamNet, video, mode: str = "sum-collapse", dense: bool = False, rule: str = "mask") -> FeatureVector:
    """Features of one T x C x H x W video.

    ``sum-collapse`` adds the per-frame recurrent WTA codes, ``last-state``
    keeps the code of the final frame, ``pooled`` max-pools every frame's
    code with a 5x5 window and stride 3. ``dense`` swaps codes for the
    dense recurrent states.
    """
    if mode not in FEATURE_MODES:
        raise ConfigError(f"unknown feature mode {mode!r}; expected one of {FEATURE_MODES}")
    video = np.asarray(video)
    if video.ndim != 4 or len(video) < 1:
        raise ContractError(f"video must be a non-empty T x C x H x W array, got {video.shape}")
    frames = video[:, None].astype(net.dtype)
    return FeatureVector(_collapse(net, frames, mode, dense, rule)[0], mode)


def extract_batch(net: TwoStreamNet, videos, mode: str = "sum-collapse", dense: bool = False, batch_size: int = 64, rule: str = "mask") -> np.ndarray:
    """Features for N x T x C x H x W videos, one row per video."""
    if mode not in FEATURE_MODES:
        raise ConfigError(f"unknown feature mode {mode!r}; expected one of {FEATURE_MODES}")
    videos = np.asarray(videos)
    chunks = []
    for start in range(0, len(videos), batch_size):
        frames = np.ascontiguousarray(videos[start : start + batch_size].transpose(1, 0, 2, 3, 4), dtype=net.dtype)
        chunks.append(_collapse(net, frames, mode, dense, rule))
    return np.concatenate(chunks)


# ---------------------------------------------------------------------------
# linear SVM
# ---------------------------------------------------------------------------


@dataclass
class LinearSvm:
    weights: np.ndarray  # K x D
    bias: np.ndarray  # K
    reg: float
    mean: np.ndarray = field(default=None)
    scale: np.ndarray = field(default=None)

    def __post_init__(self):
        k, d = self.weights.shape
        if k < 2:
            raise ContractError("a linear SVM needs at least 2 classes")
        if self.mean is None:
            self.mean = np.zeros(d)
        if self.scale is None:
            self.scale = np.ones(d)

    @property
    def class_count(self) -> int:
        return self.weights.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[1]


def standardize_fit(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    return mean, np.where(std > 1e-12, std, 1.0)


def svm_train(
    features,
    labels,
    reg: float = 1e-4,
    epochs: int = 50,
    rng: SeededRng | None = None,
    batch_size: int = 32,
    classes: int | None = None,
    standardize: bool = True,
) -> LinearSvm:
    """One-vs-rest hinge loss with L2 penalty, by averaged mini-batch subgradient descent.

    Each class k minimises ``reg/2 |w_k|^2 + mean_i max(0, 1 - y_ik (w_k.x_i + b_k))``
    with y_ik = +1 for class k and -1 otherwise. Step sizes follow
    ``eta0 / (1 + eta0 * reg * t)`` with ``eta0 = 1 / mean |x|^2``; the
    returned weights are the iterate average over the second half of the run.
    Features are z-scored with statistics stored on the model.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or len(x) != len(y):
        raise ShapeError(f"features {x.shape} and labels {y.shape} are not aligned")
    k = classes if classes is not None else int(y.max()) + 1
    if len(np.unique(y)) < 2 or k < 2:
        raise ContractError("svm_train needs at least two distinct classes")
    rng = rng or SeededRng(0)
    if standardize:
        mean, scale = standardize_fit(x)
    else:
        mean, scale = np.zeros(x.shape[1]), np.ones(x.shape[1])
    xs = (x - mean) / scale
    n, d = xs.shape
    targets = np.where(y[:, None] == np.arange(k)[None, :], 1.0, -1.0)
    w = np.zeros((k, d))
    b = np.zeros(k)
    w_avg, b_avg, n_avg = np.zeros_like(w), np.zeros_like(b), 0
    eta0 = 1.0 / max(float(np.mean(np.sum(xs * xs, axis=1))), 1e-12)
    t = 0
    avg_from = epochs // 2
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            xb, tb = xs[idx], targets[idx]
            margins = tb * (xb @ w.T + b)
            active = (margins < 1.0) * tb  # B x K
            eta = eta0 / (1.0 + eta0 * reg * t)
            w -= eta * (reg * w - active.T @ xb / len(idx))
            b += eta * active.sum(axis=0) / len(idx)
            t += 1
            if epoch >= avg_from:
                n_avg += 1
                w_avg += (w - w_avg) / n_avg
                b_avg += (b - b_avg) / n_avg
    if n_avg == 0:
        w_avg, b_avg = w, b
    return LinearSvm(w_avg, b_avg, reg, mean, scale)


def svm_scores(svm: LinearSvm, features) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    single = x.ndim == 1
    x = x.reshape(1, -1) if single else x
    if x.shape[1] != svm.feature_dim:
        raise ShapeError(f"feature length {x.shape[1]} does not match the SVM's {svm.feature_dim}")
    s = ((x - svm.mean) / svm.scale) @ svm.weights.T + svm.bias
    return s[0] if single else s


def svm_predict(svm: LinearSvm, features):
    """Return (classes, scores); ties go to the lowest class index."""
    s = svm_scores(svm, features)
    return np.argmax(s, axis=-1), s


# ---------------------------------------------------------------------------
# voting
# ---------------------------------------------------------------------------


@dataclass
class VoteResult:
    label: int
    histogram: np.ndarray
    predictions: np.ndarray


def majority(predictions, class_count: int) -> VoteResult:
    preds = np.asarray(predictions, dtype=np.int64)
    hist = np.bincount(preds, minlength=class_count)
    return VoteResult(int(np.argmax(hist)), hist, preds)


def sliding_window_vote(net: TwoStreamNet, svm: LinearSvm, video, T: int = 5, mode: str = "last-state", rule: str = "mask") -> VoteResult:
    """Classify every length-T window (advanced one frame at a time) and take the modal class."""
    video = np.asarray(video)
    if len(video) < T:
        raise ContractError(f"video has {len(video)} frames, fewer than the window length {T}")
    windows = np.stack([video[s : s + T] for s in range(len(video) - T + 1)])
    preds, _ = svm_predict(svm, extract_batch(net, windows, mode, rule=rule))
    return majority(preds, svm.class_count)


def per_frame_vote(net: TwoStreamNet, svm: LinearSvm, video, rule: str = "mask") -> VoteResult:
    """Classify each frame from its pooled recurrent code (state carried over the video)."""
    rows = extract_features(net, video, "pooled", rule=rule).values
    preds, _ = svm_predict(svm, rows)
    return majority(preds, svm.class_count)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    accuracy: float
    error_rate: float
    confusion: np.ndarray  # rows: true class, cols: predicted
    votes: list | None = None

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    def summary(self) -> str:
        return f"accuracy={self.accuracy:.4f} error_rate={self.error_rate:.4f} n={self.total}"

    def to_csv(self, path) -> None:
        k = self.confusion.shape[0]
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["metric", "value"])
            w.writerow(["accuracy", repr(self.accuracy)])
            w.writerow(["error_rate", repr(self.error_rate)])
            w.writerow(["total", self.total])
            w.writerow([])
            w.writerow(["true\\pred", *range(k)])
            for i in range(k):
                w.writerow([i, *self.confusion[i].tolist()])


def report(preds, labels, class_count: int | None = None) -> EvalReport:
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise ContractError(f"{preds.size} predictions for {labels.size} labels")
    k = class_count or int(max(preds.max(initial=0), labels.max(initial=0))) + 1
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (labels, preds), 1)
    acc = float(np.trace(confusion) / max(confusion.sum(), 1))
    return EvalReport(acc, 1.0 - acc, confusion)


def write_features_csv(path, ids, labels, features) -> None:
    features = np.asarray(features)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["video_id", "label", *(f"f_{i}" for i in range(features.shape[1]))])
        for vid, lab, row in zip(ids, labels, features):
            w.writerow([int(vid), int(lab), *(repr(float(v)) for v in row)])
