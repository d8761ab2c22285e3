"""Two-stream convolutional-recurrent autoencoder with Winner-Take-All codes.

Layout (every convolution uses same padding so maps keep the frame size)::

    features(x) = relu(enc2(relu(enc1(x))))
    stateless   E(x)      = wta(relu(V*features(x) + b))
    recurrent   h_t       = relu(W*h_{t-1} + V*features(x_t) + b),   R(x_t) = wta(h_t)
    decoder     D(code)   = dec(code)            (linear, shared by both streams)

The stateless stream is exactly the W = 0 slice of the recurrent one.
All functions accept a :class:`TwoStreamNet` whose parameters are either
arrays (inference) or tape variables (training, see :meth:`TwoStreamNet.bind`).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from . import engine as E
from .engine import SeededRng, Tape, Var, value_of
from .errors import ConfigError, ContractError, ShapeError

PARAM_ORDER = ("enc1.k", "enc1.b", "enc2.k", "enc2.b", "cell.W", "cell.V", "cell.b", "dec.k", "dec.b")
HEAD_ORDER = ("head.k", "head.b")
WTA_RULES = ("mask", "literal")


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 64
    enc_kernel: int = 3
    dec_kernel: int = 11
    input_channels: int = 1
    depth: int = 4
    activation: str = "relu"

    def __post_init__(self):
        if self.depth != 4:
            raise ConfigError(f"depth is fixed at 4 layers, got {self.depth}")
        if self.activation != "relu":
            raise ConfigError(f"only relu activation is supported, got {self.activation!r}")
        for name in ("enc_kernel", "dec_kernel"):
            k = getattr(self, name)
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"{name} must be a positive odd number, got {k}")
        if self.channels < 1:
            raise ConfigError(f"channels must be positive, got {self.channels}")
        if self.input_channels not in (1, 3):
            raise ConfigError(f"input_channels must be 1 or 3, got {self.input_channels}")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        c, ke, kd, ci = self.channels, self.enc_kernel, self.dec_kernel, self.input_channels
        return {
            "enc1.k": (c, ci, ke, ke),
            "enc1.b": (c,),
            "enc2.k": (c, c, ke, ke),
            "enc2.b": (c,),
            "cell.W": (c, c, ke, ke),
            "cell.V": (c, c, ke, ke),
            "cell.b": (c,),
            "dec.k": (ci, c, kd, kd),
            "dec.b": (ci,),
        }

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_json().encode()).digest()[:16]


@dataclass
class ConvRnnCell:
    W: Any
    V: Any
    b: Any

    @property
    def channels(self) -> int:
        return value_of(self.W).shape[0]


@dataclass
class TwoStreamNet:
    config: ModelConfig
    params: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def init(cls, config: ModelConfig, rng: SeededRng, dtype=np.float64, head_classes: int | None = None):
        """Glorot-uniform kernels, zero biases."""
        params = {}
        for name, shape in config.param_shapes().items():
            if name.endswith(".b"):
                params[name] = np.zeros(shape, dtype=dtype)
            else:
                params[name] = E.glorot_uniform(shape, rng, dtype)
        net = cls(config, params)
        if head_classes is not None:
            net.add_head(head_classes, rng)
        return net

    def add_head(self, classes: int, rng: SeededRng) -> None:
        dtype = value_of(self.params["enc1.k"]).dtype
        self.params["head.k"] = E.glorot_uniform((classes, self.config.channels, 1, 1), rng, dtype)
        self.params["head.b"] = np.zeros(classes, dtype=dtype)

    def names(self) -> list[str]:
        order = list(PARAM_ORDER) + [n for n in HEAD_ORDER if n in self.params]
        return [n for n in order if n in self.params]

    def bind(self, tape: Tape) -> "TwoStreamNet":
        return TwoStreamNet(self.config, {n: tape.leaf(self.params[n], n) for n in self.names()})

    def astype(self, dtype) -> "TwoStreamNet":
        return TwoStreamNet(self.config, {n: np.asarray(v, dtype=dtype) for n, v in self.params.items()})

    def copy(self) -> "TwoStreamNet":
        return TwoStreamNet(self.config, {n: np.array(v, copy=True) for n, v in self.params.items()})

    @property
    def cell(self) -> ConvRnnCell:
        p = self.params
        return ConvRnnCell(p["cell.W"], p["cell.V"], p["cell.b"])

    @property
    def dtype(self):
        return value_of(self.params["enc1.k"]).dtype


@dataclass
class StreamOutputs:
    o_E: list
    o_R: list
    f_E: list
    f_R: list
    h_T: Any


@dataclass
class LossReport:
    loss: Any
    loss_recon: float
    loss_pred: float
    outputs: StreamOutputs

    @property
    def loss_total(self) -> float:
        return float(value_of(self.loss).reshape(-1)[0])


# ---------------------------------------------------------------------------
# winner-take-all
# ---------------------------------------------------------------------------


def _winner_mask(x: np.ndarray) -> np.ndarray:
    n, c = x.shape[:2]
    flat = x.reshape(n, c, -1)
    idx = np.argmax(flat, axis=2)  # first maximum in row-major order
    mask = np.zeros(flat.shape, dtype=x.dtype)
    np.put_along_axis(mask, idx[..., None], 1, axis=2)
    return mask.reshape(x.shape)


def _wta_fwd(x, *, rule="mask"):
    if x.ndim != 4:
        raise ShapeError(f"wta expects a rank-4 map, got {x.shape}")
    mask = _winner_mask(x)
    return np.where(mask > 0, x, 0).astype(x.dtype, copy=False), mask


def _wta_bwd(g, mask, *, rule="mask"):
    if rule == "literal":
        return (g * _winner_mask(g),)
    return (g * mask,)


E.register_op("wta", _wta_fwd, _wta_bwd, piecewise=True)


def wta(x, rule: str = "mask"):
    """Keep each channel's spatial maximum in place and zero everything else.

    Ties go to the first position in row-major order. Returns ``(sparse,
    mask)``; on a tape, ``sparse`` is a variable whose adjoint follows
    ``rule``: ``"mask"`` routes the upstream gradient through the forward
    winner, ``"literal"`` keeps only the largest upstream gradient per
    channel.
    """
    if rule not in WTA_RULES:
        raise ConfigError(f"unknown wta rule {rule!r}")
    out = E._dispatch("wta", x, rule=rule)
    if isinstance(out, Var):
        return out, out.tape.nodes[out.id].saved
    return out, _winner_mask(np.asarray(x))


def wta_backward(mask, upstream) -> np.ndarray:
    mask, upstream = np.asarray(mask), np.asarray(upstream)
    if mask.shape != upstream.shape:
        raise ShapeError(f"wta_backward: mask {mask.shape} vs upstream {upstream.shape}")
    return upstream * mask


# ---------------------------------------------------------------------------
# streams
# ---------------------------------------------------------------------------


def _check_frame(net: TwoStreamNet, x) -> None:
    shape = value_of(x).shape
    if len(shape) != 4 or shape[1] != net.config.input_channels:
        raise ShapeError(f"frame must be (n, {net.config.input_channels}, h, w), got {shape}")


def encode_features(net: TwoStreamNet, x):
    """The two convolutional layers both streams share."""
    p = net.params
    h = E.relu(E.conv2d(x, p["enc1.k"], p["enc1.b"]))
    return E.relu(E.conv2d(h, p["enc2.k"], p["enc2.b"]))


def convrnn_step(cell: ConvRnnCell, h_prev, x):
    """relu(W*h_prev + V*x + b). ``h_prev=None`` stands for the zero state."""
    drive = E.conv2d(x, cell.V, cell.b)
    if h_prev is None:
        return E.relu(drive)
    hs, xs = value_of(h_prev).shape, value_of(x).shape
    if hs[2:] != xs[2:] or hs[0] != xs[0]:
        raise ShapeError(f"state {hs} and input {xs} disagree on batch or spatial size")
    if hs[1] != cell.channels:
        raise ShapeError(f"state {hs} does not have {cell.channels} channels")
    return E.relu(E.add(E.conv2d(h_prev, cell.W), drive))


def stateless_encode(net: TwoStreamNet, x, rule: str = "mask"):
    _check_frame(net, x)
    code, _ = wta(convrnn_step(net.cell, None, encode_features(net, x)), rule)
    return code


@dataclass
class RecurrentOutputs:
    codes: list
    states: list

    @property
    def final_state(self):
        return self.states[-1]


def recurrent_encode(net: TwoStreamNet, frames: Sequence, h0=None, rule: str = "mask") -> RecurrentOutputs:
    """Run the ConvRNN over ``frames``; WTA is applied to a copy of each state."""
    frames = list(frames)
    if not frames:
        raise ContractError("recurrent_encode needs at least one frame")
    h = h0
    codes, states = [], []
    for x in frames:
        _check_frame(net, x)
        h = convrnn_step(net.cell, h, encode_features(net, x))
        states.append(h)
        codes.append(wta(h, rule)[0])
    return RecurrentOutputs(codes, states)


def decode(net: TwoStreamNet, code):
    p = net.params
    shape = value_of(code).shape
    if len(shape) != 4 or shape[1] != net.config.channels:
        raise ShapeError(f"code must be (n, {net.config.channels}, h, w), got {shape}")
    return E.conv2d(code, p["dec.k"], p["dec.b"])


def _as_frames(frames) -> list:
    if isinstance(frames, np.ndarray):
        if frames.ndim != 5:
            raise ShapeError(f"frame stack must be (T, n, c, h, w), got {frames.shape}")
        return list(frames)
    return list(frames)


def forward_loss(net: TwoStreamNet, frames, rule: str = "mask") -> LossReport:
    """Reconstruction plus next-frame prediction error, averaged over t=2..T, batch and pixels.

    For each t the stateless stream reconstructs x_{t-1} from E(x_{t-1}) and
    the recurrent stream predicts x_t from R(x_{t-1}); both go through the
    same decoder. ``frames`` is a (T, n, c, h, w) array or a list of frames.
    """
    frames = _as_frames(frames)
    if len(frames) < 2:
        raise ContractError(f"forward_loss needs T >= 2 frames, got {len(frames)}")
    p = net.params
    count = (len(frames) - 1) * frames[0].size
    out = StreamOutputs([], [], [], [], None)
    rec_terms, pred_terms = [], []
    h = None
    for t in range(len(frames) - 1):
        x = frames[t]
        _check_frame(net, x)
        drive = E.conv2d(encode_features(net, x), p["cell.V"], p["cell.b"])
        stateless = E.relu(drive)
        o_e, _ = wta(stateless, rule)
        h = stateless if h is None else E.relu(E.add(E.conv2d(h, p["cell.W"]), drive))
        o_r, _ = wta(h, rule)
        f_e, f_r = decode(net, o_e), decode(net, o_r)
        rec_terms.append(E.total(E.square(E.sub(x, f_e))))
        pred_terms.append(E.total(E.square(E.sub(frames[t + 1], f_r))))
        out.o_E.append(o_e)
        out.o_R.append(o_r)
        out.f_E.append(f_e)
        out.f_R.append(f_r)
    out.h_T = h
    rec, pred = rec_terms[0], pred_terms[0]
    for r, q in zip(rec_terms[1:], pred_terms[1:]):
        rec, pred = E.add(rec, r), E.add(pred, q)
    rec, pred = E.scale(rec, 1.0 / count), E.scale(pred, 1.0 / count)
    loss = E.add(rec, pred)
    return LossReport(loss, float(value_of(rec).reshape(-1)[0]), float(value_of(pred).reshape(-1)[0]), out)


def class_scores(net: TwoStreamNet, frames, h0=None):
    """Classification head: sum of dense states over time, spatial mean, linear map.

    Returns (n, K, 1, 1) scores; requires ``head.k``/``head.b`` parameters.
    """
    frames = _as_frames(frames)
    if not frames:
        raise ContractError("class_scores needs at least one frame")
    p = net.params
    h, acc = h0, None
    for x in frames:
        _check_frame(net, x)
        h = convrnn_step(net.cell, h, encode_features(net, x))
        acc = h if acc is None else E.add(acc, h)
    return E.conv2d(E.spatial_mean(acc), p["head.k"], p["head.b"])


def loss_gradient_errors(
    config: ModelConfig | None = None,
    frame_size: int = 8,
    batch: int = 2,
    length: int = 3,
    seed: int = 0,
    rule: str = "mask",
    samples: int = 20,
    eps: float = 1e-5,
) -> dict[str, float]:
    """Finite-difference check of the two-stream loss for every parameter tensor, at 64-bit.

    Defaults to an 8-channel model with 3x3 encoder and 5x5 decoder kernels.
    Biases get small random values so ReLU and WTA sit away from their kinks.
    """
    config = config or ModelConfig(channels=8, enc_kernel=3, dec_kernel=5)
    rng = SeededRng(seed)
    net = TwoStreamNet.init(config, rng.derive(0), np.float64)
    bias_rng = rng.derive(1)
    for name in net.names():
        if name.endswith(".b"):
            net.params[name] = bias_rng.normal(0.0, 0.1, net.params[name].shape)
    frames = rng.derive(2).uniform(0.0, 1.0, (length, batch, config.input_channels, frame_size, frame_size))
    return E.grad_errors(
        lambda p: forward_loss(TwoStreamNet(config, p), frames, rule).loss,
        net.params,
        eps=eps,
        samples=samples,
        seed=seed,
    )
