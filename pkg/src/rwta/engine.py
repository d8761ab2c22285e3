"""Rank-4 tensor ops and a tape for reverse-mode differentiation.

Values are plain ``numpy`` arrays laid out as (batch, channels, rows, cols).
Every op accepts either arrays or :class:`Var` handles. With arrays it just
computes the forward value; as soon as one argument is a ``Var`` the op is
recorded on that variable's :class:`Tape` and a new ``Var`` is returned, so
the same model code serves inference and training.

Ops are registered by name in ``OPS`` with a forward and an adjoint. The tape
stores only the op name, input ids, attributes and whatever the forward
saved, which makes it replayable.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, NamedTuple, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ContractError, EvaluationError, ShapeError

# kernels with at least this many taps are convolved through the FFT
FFT_MIN_TAPS = 49


def dtype_for(precision: int) -> np.dtype:
    if precision == 64:
        return np.dtype(np.float64)
    if precision == 32:
        return np.dtype(np.float32)
    raise ConfigError(f"precision must be 32 or 64, got {precision}")


# ---------------------------------------------------------------------------
# random numbers
# ---------------------------------------------------------------------------


class SeededRng:
    """PCG64 stream (numpy's ``Generator``) fixed by a 64-bit seed.

    ``derive(*keys)`` gives an independent child stream that depends only on
    the root seed and the keys, which lets training recompute e.g. the
    permutation of epoch 7 without replaying epochs 0..6.
    """

    def __init__(self, seed: int, keys: Sequence[int] = ()):
        if not 0 <= int(seed) < 2**64:
            raise ConfigError(f"seed must fit in 64 unsigned bits, got {seed}")
        self.seed = int(seed)
        self.keys = tuple(int(k) for k in keys)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, *self.keys])))

    def derive(self, *keys: int) -> "SeededRng":
        return SeededRng(self.seed, self.keys + tuple(keys))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, a, size=None, replace=True):
        return self._gen.choice(a, size=size, replace=replace)

    def get_state(self) -> dict:
        return {"seed": self.seed, "keys": list(self.keys), "bit_generator": self._gen.bit_generator.state}

    def set_state(self, state: Mapping) -> None:
        self._gen.bit_generator.state = state["bit_generator"]

    @classmethod
    def from_state(cls, state: Mapping) -> "SeededRng":
        rng = cls(state["seed"], state.get("keys", ()))
        rng.set_state(state)
        return rng

    def state_bytes(self) -> bytes:
        return json.dumps(self.get_state(), sort_keys=True).encode()


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]
    attrs: dict
    value: np.ndarray
    saved: Any = None
    name: str | None = None


class OpDef(NamedTuple):
    forward: Callable[..., tuple[np.ndarray, Any]]
    backward: Callable[..., tuple]
    piecewise: bool = False


OPS: dict[str, OpDef] = {}


def register_op(kind: str, forward: Callable, backward: Callable, piecewise: bool = False) -> None:
    """Register an op.

    ``forward(*values, **attrs)`` returns ``(out, saved)``;
    ``backward(grad_out, saved, **attrs)`` returns one gradient per input
    (``None`` for inputs that do not receive one). ``piecewise`` marks ops
    whose output support (the nonzero pattern) selects a linear branch,
    such as relu; finite-difference checks use it to spot kink crossings.
    """
    OPS[kind] = OpDef(forward, backward, piecewise)


_branch_log: list | None = None


class Var:
    """Handle to a value recorded on a tape."""

    __slots__ = ("tape", "id")

    def __init__(self, tape: "Tape", id: int):
        self.tape = tape
        self.id = id

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.id].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __repr__(self):
        node = self.tape.nodes[self.id]
        return f"Var(id={self.id}, kind={node.kind}, shape={node.value.shape})"


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)

    def _append(self, node: Node) -> Var:
        self.nodes.append(node)
        return Var(self, len(self.nodes) - 1)

    def leaf(self, value, name: str | None = None) -> Var:
        return self._append(Node("leaf", (), {}, np.asarray(value), name=name))

    def record(self, kind: str, args: Sequence, attrs: dict) -> Var:
        ids = []
        for a in args:
            if isinstance(a, Var):
                if a.tape is not self:
                    raise ContractError("cannot mix variables from different tapes")
                ids.append(a.id)
            else:
                ids.append(self._append(Node("const", (), {}, np.asarray(a))).id)
        values = [self.nodes[i].value for i in ids]
        out, saved = OPS[kind].forward(*values, **attrs)
        return self._append(Node(kind, tuple(ids), dict(attrs), out, saved))

    def leaves(self) -> dict[str, Var]:
        return {n.name: Var(self, i) for i, n in enumerate(self.nodes) if n.kind == "leaf" and n.name}

    def replay(self, overrides: Mapping[int, np.ndarray] | None = None) -> list[np.ndarray]:
        """Recompute every node from the recorded leaves (optionally replaced)."""
        overrides = overrides or {}
        values: list[np.ndarray] = []
        for i, node in enumerate(self.nodes):
            if node.kind in ("leaf", "const"):
                values.append(np.asarray(overrides.get(i, node.value)))
            else:
                out, _ = OPS[node.kind].forward(*(values[j] for j in node.inputs), **node.attrs)
                values.append(out)
        return values


def _dispatch(kind: str, *args, **attrs):
    tape = next((a.tape for a in args if isinstance(a, Var)), None)
    if tape is None:
        op = OPS[kind]
        out, _ = op.forward(*(np.asarray(a) for a in args), **attrs)
        if op.piecewise and _branch_log is not None:
            _branch_log.append(np.packbits(out != 0).tobytes())
        return out
    return tape.record(kind, args, attrs)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x)


def backward(tape: Tape, loss: Var) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar loss.

    Returns the adjoint of every node that the loss depends on, keyed by
    node id. A node used several times (a kernel shared across time steps)
    receives the sum of its per-use adjoints. Accumulation follows the fixed
    reverse recording order, so results are bit-reproducible.
    """
    if not isinstance(loss, Var) or loss.tape is not tape:
        raise ContractError("loss must be a variable recorded on this tape")
    if loss.value.shape != (1, 1, 1, 1):
        raise ContractError(f"loss must be a 1x1x1x1 scalar, got shape {loss.value.shape}")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
    for i in range(loss.id, -1, -1):
        g = grads.get(i)
        node = tape.nodes[i]
        if g is None or node.kind in ("leaf", "const"):
            continue
        in_grads = OPS[node.kind].backward(g, node.saved, **node.attrs)
        for j, gj in zip(node.inputs, in_grads):
            if gj is None:
                continue
            prev = grads.get(j)
            grads[j] = gj if prev is None else prev + gj
    return grads


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _xcorr_direct(xp: np.ndarray, k: np.ndarray) -> np.ndarray:
    kh, kw = k.shape[2:]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # n c Ho Wo kh kw
    return np.tensordot(win, k, axes=((1, 4, 5), (1, 2, 3))).transpose(0, 3, 1, 2)


def _xcorr_fft(xp: np.ndarray, k: np.ndarray) -> np.ndarray:
    kh, kw = k.shape[2:]
    hp, wp = xp.shape[2:]
    xf = np.fft.rfft2(xp)
    kf = np.fft.rfft2(k[:, :, ::-1, ::-1], s=(hp, wp))
    y = np.fft.irfft2(np.einsum("ncuv,fcuv->nfuv", xf, kf, optimize=True), s=(hp, wp))
    return np.ascontiguousarray(y[:, :, kh - 1 :, kw - 1 :], dtype=xp.dtype)


def _xcorr(xp: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Valid cross-correlation: out[n,f,i,j] = sum_{c,p,q} k[f,c,p,q] xp[n,c,i+p,j+q]."""
    if k.shape[2] * k.shape[3] >= FFT_MIN_TAPS:
        return _xcorr_fft(xp, k)
    return _xcorr_direct(xp, k)


def _kernel_corr(xp: np.ndarray, g: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """out[f,c,p,q] = sum_{n,i,j} g[n,f,i,j] xp[n,c,i+p,j+q]."""
    if kh * kw >= FFT_MIN_TAPS:
        hp, wp = xp.shape[2:]
        xf = np.fft.rfft2(xp)
        gf = np.fft.rfft2(g, s=(hp, wp))
        c = np.fft.irfft2(np.einsum("nfuv,ncuv->fcuv", np.conj(gf), xf, optimize=True), s=(hp, wp))
        return np.ascontiguousarray(c[:, :, :kh, :kw], dtype=xp.dtype)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return np.tensordot(g, win, axes=((0, 2, 3), (0, 2, 3)))


def _conv_check(x: np.ndarray, k: np.ndarray, b, padding: str) -> None:
    if x.ndim != 4 or k.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input and kernel, got {x.shape} and {k.shape}")
    if k.shape[1] != x.shape[1]:
        raise ShapeError(f"kernel {k.shape} expects {k.shape[1]} input channels but input {x.shape} has {x.shape[1]}")
    if b is not None and b.shape != (k.shape[0],):
        raise ShapeError(f"bias {b.shape} does not match kernel {k.shape}")
    if padding == "same":
        if k.shape[2] % 2 == 0 or k.shape[3] % 2 == 0:
            raise ConfigError(f"same padding needs odd kernel dims, got {k.shape[2:]}")
    elif padding == "valid":
        if k.shape[2] > x.shape[2] or k.shape[3] > x.shape[3]:
            raise ShapeError(f"kernel {k.shape} larger than input {x.shape}")
    else:
        raise ConfigError(f"unknown padding {padding!r}")


def _conv_pads(k: np.ndarray, padding: str) -> tuple[int, int]:
    return (k.shape[2] // 2, k.shape[3] // 2) if padding == "same" else (0, 0)


def _conv_fwd(x, k, b=None, *, padding="same"):
    _conv_check(x, k, b, padding)
    ph, pw = _conv_pads(k, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x
    # true convolution: correlate with the flipped kernel
    out = _xcorr(xp, k[:, :, ::-1, ::-1])
    if b is not None:
        out = out + b[None, :, None, None]
    return out, (xp, k, x.shape, b is not None)


def _conv_bwd(g, saved, *, padding="same"):
    xp, k, xshape, has_bias = saved
    kh, kw = k.shape[2:]
    dk = _kernel_corr(xp, g, kh, kw)[:, :, ::-1, ::-1]
    gfull = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    dxp = _xcorr(gfull, k.transpose(1, 0, 2, 3))
    ph, pw = _conv_pads(k, padding)
    dx = dxp[:, :, ph : ph + xshape[2], pw : pw + xshape[3]]
    db = g.sum(axis=(0, 2, 3)) if has_bias else None
    return np.ascontiguousarray(dx), np.ascontiguousarray(dk), db


register_op("conv2d", _conv_fwd, _conv_bwd)


def conv2d(x, kernel, bias=None, padding: str = "same"):
    """Multi-channel convolution ``(W*h)[f,i,j] = sum_{a,b,c} W[f,a,b,c] h[a,i-b,j-c]``.

    Kernel taps are indexed from the kernel centre for ``same`` padding
    (zero fill, spatial size preserved) and from the last tap for ``valid``
    padding (output shrinks by ``kernel - 1`` per axis).
    """
    if bias is None:
        return _dispatch("conv2d", x, kernel, padding=padding)
    return _dispatch("conv2d", x, kernel, bias, padding=padding)


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------


def _same_shape(a, b, kind):
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: operand shapes differ, {a.shape} vs {b.shape}")


def _add_fwd(a, b):
    _same_shape(a, b, "add")
    return a + b, None


def _sub_fwd(a, b):
    _same_shape(a, b, "sub")
    return a - b, None


def _mul_fwd(a, b):
    _same_shape(a, b, "mul")
    return a * b, (a, b)


register_op("add", _add_fwd, lambda g, s: (g, g))
register_op("sub", _sub_fwd, lambda g, s: (g, -g))
register_op("mul", _mul_fwd, lambda g, s: (g * s[1], g * s[0]))
register_op("relu", lambda x: (np.maximum(x, 0), x > 0), lambda g, mask: (g * mask,), piecewise=True)
register_op("scale", lambda x, *, alpha: (x * alpha, None), lambda g, s, *, alpha: (g * alpha,))
register_op("square", lambda x: (x * x, x), lambda g, x: (2 * g * x,))
register_op(
    "sum",
    lambda x: (np.sum(x, dtype=x.dtype).reshape(1, 1, 1, 1), x.shape),
    lambda g, shape: (np.broadcast_to(g.reshape(()), shape).copy(),),
)
register_op(
    "mean",
    lambda x: ((np.sum(x, dtype=x.dtype) / x.size).reshape(1, 1, 1, 1), x.shape),
    lambda g, shape: (np.full(shape, g.reshape(()) / math.prod(shape), dtype=g.dtype),),
)
register_op(
    "spatial_mean",
    lambda x: (x.mean(axis=(2, 3), keepdims=True), x.shape),
    lambda g, shape: (np.broadcast_to(g / (shape[2] * shape[3]), shape).copy(),),
)


def relu(x):
    """max(x, 0); the subgradient at 0 is 0."""
    return _dispatch("relu", x)


def add(a, b):
    return _dispatch("add", a, b)


def sub(a, b):
    return _dispatch("sub", a, b)


def mul(a, b):
    return _dispatch("mul", a, b)


def scale(x, alpha: float):
    return _dispatch("scale", x, alpha=float(alpha))


def square(x):
    return _dispatch("square", x)


def total(x):
    """Sum of all entries as a 1x1x1x1 tensor."""
    return _dispatch("sum", x)


def mean(x):
    return _dispatch("mean", x)


def spatial_mean(x):
    return _dispatch("spatial_mean", x)


_ELEMENTWISE = {"relu": relu, "add": add, "sub": sub, "mul": mul, "scale": scale}


def elementwise(kind: str, *args, **kwargs):
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ConfigError(f"unknown elementwise kind {kind!r}") from None
    return fn(*args, **kwargs)


def _xent_fwd(scores, *, labels):
    n, k = scores.shape[:2]
    z = scores.reshape(n, k)
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    nll = -np.log(p[np.arange(n), labels]).sum() / n
    return np.asarray(nll, dtype=scores.dtype).reshape(1, 1, 1, 1), p


def _xent_bwd(g, p, *, labels):
    n, k = p.shape
    d = p.copy()
    d[np.arange(n), labels] -= 1
    return ((g.reshape(()) * d / n).reshape(n, k, 1, 1),)


register_op("softmax_xent", _xent_fwd, _xent_bwd)


def softmax_xent(scores, labels):
    """Mean softmax cross-entropy of (n, K, 1, 1) class scores."""
    labels = np.asarray(labels, dtype=np.int64)
    k = value_of(scores).shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ContractError(f"labels must lie in [0, {k})")
    return _dispatch("softmax_xent", scores, labels=labels)


# ---------------------------------------------------------------------------
# forward-only helpers
# ---------------------------------------------------------------------------


def maxpool2d(x, window=(5, 5), stride=(3, 3)) -> np.ndarray:
    """Per-channel max over strided windows. Not differentiated."""
    x = value_of(x)
    wh, ww = window
    sh, sw = stride
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects rank-4 input, got {x.shape}")
    if wh > x.shape[2] or ww > x.shape[3]:
        raise ShapeError(f"pool window {tuple(window)} exceeds input {x.shape}")
    win = sliding_window_view(x, (wh, ww), axis=(2, 3))[:, :, ::sh, ::sw]
    return win.max(axis=(4, 5))


def glorot_uniform(shape: Sequence[int], rng: SeededRng, dtype=np.float64) -> np.ndarray:
    """Uniform on [-L, L] with L = sqrt(6 / (fan_in + fan_out)).

    For a kernel (out, in, kh, kw) the fans are ``in*kh*kw`` and
    ``out*kh*kw``; for a matrix (out, in) they are ``in`` and ``out``.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) < 2 or min(shape) < 1:
        raise ShapeError(f"glorot_uniform needs at least 2 positive dims, got {shape}")
    area = math.prod(shape[2:])
    fan_in, fan_out = shape[1] * area, shape[0] * area
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


def _scalar(v) -> float:
    f = float(np.asarray(value_of(v)).reshape(-1)[0])
    if not math.isfinite(f):
        raise EvaluationError(f"loss evaluated to {f}")
    return f


def _traced(fn, params) -> tuple[float, tuple]:
    global _branch_log
    _branch_log = []
    try:
        value = _scalar(fn(params))
        return value, tuple(_branch_log)
    finally:
        _branch_log = None


def grad_errors(
    fn: Callable[[Mapping[str, Any]], Any],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    samples: int = 20,
    seed: int = 0,
    floor: float = 1e-7,
) -> dict[str, float]:
    """Max relative error between tape gradients and central differences, per parameter.

    ``fn`` maps a dict of parameters (arrays or tape variables) to a scalar
    loss and must be deterministic. Up to ``samples`` coordinates per
    parameter are checked. The error is ``|a - n| / max(|a|, |n|, floor)``;
    the floor keeps gradients near zero from turning float64 roundoff in
    the difference quotient (about 1e-11 absolute) into a large ratio. A coordinate whose +-eps probes flip the branch of
    any piecewise op (a relu unit or WTA winner) is replaced by the next
    random coordinate, since a central difference across a kink measures
    nothing about the adjoint.
    """
    tape = Tape()
    leaves = {name: tape.leaf(v, name) for name, v in params.items()}
    loss = fn(leaves)
    _scalar(loss)
    grads = backward(tape, loss)
    rng = np.random.default_rng(seed)
    work = {name: np.array(v, copy=True) for name, v in params.items()}
    _, base = _traced(fn, work)
    errors: dict[str, float] = {}
    for name, arr in work.items():
        analytic = grads.get(leaves[name].id)
        if analytic is None:
            analytic = np.zeros_like(arr)
        flat = arr.reshape(-1)
        worst, checked = 0.0, 0
        for idx in rng.permutation(flat.size):
            if checked == samples:
                break
            orig = flat[idx]
            flat[idx] = orig + eps
            up, up_branch = _traced(fn, work)
            flat[idx] = orig - eps
            down, down_branch = _traced(fn, work)
            flat[idx] = orig
            if up_branch != base or down_branch != base:
                continue
            numeric = (up - down) / (2 * eps)
            a = float(analytic.reshape(-1)[idx])
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), floor))
            checked += 1
        errors[name] = worst
    return errors


def grad_check(fn, params, eps: float = 1e-5, samples: int = 20, seed: int = 0, floor: float = 1e-7) -> float:
    return max(grad_errors(fn, params, eps, samples, seed, floor).values())
