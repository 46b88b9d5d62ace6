"""Minimal dense-tensor engine with reverse-mode gradients.

Tensors hold float64 numpy arrays. Operations executed while their inputs
belong to a ``Tape`` are recorded; ``Tape.backward`` replays the records in
reverse, accumulating gradients additively. Everything is single-threaded
per tape; independent tapes never share tracked tensors.

Two ops have deliberately pinned accumulation order: ``seq_matmul`` and the
denominator of ``masked_softmax`` reduce strictly left-to-right, so that
zero-padded trailing entries are exact no-ops. The attention stack relies on
this for its padding guarantees; do not swap them for BLAS calls.
"""

from __future__ import annotations

import struct
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(ArithmeticError):
    """A tensor holds NaN or Inf where finite values are required."""


class Tensor:
    """A dense float64 array, optionally tracked by a Tape."""

    __slots__ = ("data", "grad", "_tape")

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, tracked={self._tape is not None})"


def assert_finite(t: Tensor, what: str = "tensor") -> Tensor:
    """Validation call: raise NumericError if any entry is NaN/Inf."""
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"{what} contains non-finite values")
    return t


class Tape:
    """Recorded op graph for one forward pass.

    Backward walks the records once, in reverse execution order (a valid
    reverse-topological order), accumulating parent gradients additively.
    """

    __slots__ = ("_records", "_used")

    def __init__(self):
        self._records = []
        self._used = False

    def watch(self, *tensors: Tensor):
        """Register leaf tensors (parameters, inputs) for this pass."""
        for t in tensors:
            t._tape = self
            t.grad = None
        return tensors[0] if len(tensors) == 1 else tensors

    def _record(self, out: Tensor, parents, backward_fn):
        out._tape = self
        self._records.append((out, parents, backward_fn))

    def backward(self, loss: Tensor):
        if loss._tape is not self:
            raise ValueError("loss tensor was not computed on this tape")
        if loss.data.size != 1:
            raise ShapeError("backward requires a scalar loss")
        if self._used:
            raise RuntimeError("tape already consumed by a previous backward")
        self._used = True
        loss.grad = np.ones_like(loss.data)
        for out, parents, backward_fn in reversed(self._records):
            g = out.grad
            if g is None:
                continue
            for parent, pg in zip(parents, backward_fn(g)):
                if pg is None or parent._tape is not self:
                    continue
                parent.grad = pg if parent.grad is None else parent.grad + pg


def _tape_of(*tensors) -> Tape | None:
    tape = None
    for t in tensors:
        if isinstance(t, Tensor) and t._tape is not None:
            if tape is None:
                tape = t._tape
            elif tape is not t._tape:
                raise ValueError("operands belong to different tapes")
    return tape


def _emit(out_data, parents, backward_fn) -> Tensor:
    out = Tensor(out_data)
    tape = _tape_of(*parents)
    if tape is not None:
        tape._record(out, parents, backward_fn)
    return out


def _as_array(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to `shape` (undo numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    bd = _as_array(b)
    try:
        out = a.data + bd
    except ValueError as e:
        raise ShapeError(f"add: {a.data.shape} vs {bd.shape}") from e
    if out.shape != a.data.shape:
        raise ShapeError("add: second operand must broadcast into the first")
    parents = (a, b) if isinstance(b, Tensor) else (a,)

    def backward(g):
        if isinstance(b, Tensor):
            return g, _unbroadcast(g, bd.shape)
        return (g,)

    return _emit(out, parents, backward)


def sub(a: Tensor, b) -> Tensor:
    bd = _as_array(b)
    out = a.data - bd
    if out.shape != a.data.shape:
        raise ShapeError("sub: second operand must broadcast into the first")
    parents = (a, b) if isinstance(b, Tensor) else (a,)

    def backward(g):
        if isinstance(b, Tensor):
            return g, -_unbroadcast(g, bd.shape)
        return (g,)

    return _emit(out, parents, backward)


def mul(a: Tensor, b) -> Tensor:
    bd = _as_array(b)
    out = a.data * bd
    if out.shape != a.data.shape:
        raise ShapeError("mul: second operand must broadcast into the first")
    parents = (a, b) if isinstance(b, Tensor) else (a,)
    a_data = a.data

    def backward(g):
        if isinstance(b, Tensor):
            return g * bd, _unbroadcast(g * a_data, bd.shape)
        return (g * bd,)

    return _emit(out, parents, backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return _emit(-a.data, (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0.0
    return _emit(np.where(keep, a.data, 0.0), (a,), lambda g: (g * keep,))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.data.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inv),))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    datas = [p.data for p in parts]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.ascontiguousarray(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis))
                     for i in range(len(parts)))

    return _emit(out, tuple(parts), backward)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape = a.data.shape

    def backward(g):
        out = np.zeros(shape, dtype=np.float64)
        out[idx] = g
        return (out,)

    return _emit(np.ascontiguousarray(a.data[idx]), (a,), backward)


def take_rows(a: Tensor, indices) -> Tensor:
    """Gather rows of a 2-D tensor; repeated indices accumulate gradient."""
    idx = np.asarray(indices, dtype=np.intp)
    if a.data.ndim != 2:
        raise ShapeError("take_rows expects a 2-D tensor")
    n = a.data.shape[0]

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError("take_rows index out of range")
    return _emit(a.data[idx], (a,), backward)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.data.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).astype(np.float64, copy=True),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape).astype(np.float64, copy=True),)

    return _emit(out, (a,), backward)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reduce_max(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max along one axis; gradient flows to the first maximal entry."""
    out = a.data.max(axis=axis, keepdims=keepdims)
    argmax = np.expand_dims(np.argmax(a.data, axis=axis), axis)

    def backward(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        out_g = np.zeros_like(a.data)
        np.put_along_axis(out_g, argmax, gg, axis)
        return (out_g,)

    return _emit(out, (a,), backward)


# ---------------------------------------------------------------------------
# contractions
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, _as_array(b)
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: {ad.shape} @ {bd.shape}")
    out = np.matmul(ad, bd)
    parents = (a, b) if isinstance(b, Tensor) else (a,)

    def backward(g):
        ga = np.matmul(g, bd.swapaxes(-1, -2))
        if ga.shape != ad.shape:
            ga = _unbroadcast(ga, ad.shape)
        if isinstance(b, Tensor):
            gb = np.matmul(ad.swapaxes(-1, -2), g)
            if gb.shape != bd.shape:
                gb = _unbroadcast(gb, bd.shape)
            return ga, gb
        return (ga,)

    return _emit(out, parents, backward)


def seq_matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product accumulated strictly left-to-right over the shared axis.

    Semantically identical to ``matmul`` but the reduction order is pinned,
    so appending zero rows/columns along the contraction axis cannot perturb
    the other entries bit-for-bit.
    """
    ad, bd = a.data, _as_array(b)
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"seq_matmul: {ad.shape} @ {bd.shape}")
    k = ad.shape[-1]
    out_shape = np.broadcast_shapes(ad.shape[:-2], bd.shape[:-2]) + (ad.shape[-2], bd.shape[-1])
    out = np.zeros(out_shape, dtype=np.float64)
    for t in range(k):
        out += ad[..., :, t, None] * bd[..., t, None, :]
    parents = (a, b) if isinstance(b, Tensor) else (a,)

    def backward(g):
        ga = np.matmul(g, bd.swapaxes(-1, -2))
        if ga.shape != ad.shape:
            ga = _unbroadcast(ga, ad.shape)
        if isinstance(b, Tensor):
            gb = np.matmul(ad.swapaxes(-1, -2), g)
            if gb.shape != bd.shape:
                gb = _unbroadcast(gb, bd.shape)
            return ga, gb
        return (ga,)

    return _emit(out, parents, backward)


def _seq_sum_last(x: np.ndarray) -> np.ndarray:
    """Left-to-right sum along the last axis (exact under trailing zeros)."""
    out = np.zeros(x.shape[:-1], dtype=np.float64)
    for t in range(x.shape[-1]):
        out += x[..., t]
    return out


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------

def masked_softmax(logits: Tensor, mask=None, axis: int = -1) -> Tensor:
    """Softmax with optional boolean mask (True = attend, False = drop).

    Masked positions get weight exactly 0 and zero gradient. A fully masked
    row yields an all-zero row (sentinel, not NaN) with zero gradient. The
    normalizer is accumulated left-to-right so trailing masked padding is a
    bitwise no-op.
    """
    x = logits.data
    last_axis = axis == -1 or axis == x.ndim - 1
    if not last_axis:
        x = np.moveaxis(x, axis, -1)
    if mask is not None:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        neg = np.where(m, x, -np.inf)
    else:
        m = None
        neg = x
    mx = neg.max(axis=-1, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    e = np.exp(neg - mx)
    if m is not None:
        e = np.where(m, e, 0.0)
    denom = _seq_sum_last(e)[..., None]
    with np.errstate(invalid="ignore", divide="ignore"):
        y = np.where(denom > 0.0, e / denom, 0.0)
    y_out = y if last_axis else np.moveaxis(y, -1, axis)

    def backward(g):
        gg = g if last_axis else np.moveaxis(g, axis, -1)
        dot = (gg * y).sum(axis=-1, keepdims=True)
        dx = (gg - dot) * y
        if not last_axis:
            dx = np.moveaxis(dx, -1, axis)
        return (dx,)

    return _emit(y_out, (logits,), backward)


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    x = logits.data
    mx = x.max(axis=axis, keepdims=True)
    s = x - mx
    lse = np.log(np.exp(s).sum(axis=axis, keepdims=True))
    out = s - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _emit(out, (logits,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply elementwise gain and bias."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    d = xd.shape[-1]

    def backward(g):
        dgain = _unbroadcast(g * xhat, gain.data.shape)
        dbias = _unbroadcast(g, bias.data.shape)
        dxhat = g * gain.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True) / d)
        return dx, dgain, dbias

    return _emit(out, (x, gain, bias), backward)


# ---------------------------------------------------------------------------
# loss kernels (elementwise; reduce with reduce_sum / reduce_mean)
# ---------------------------------------------------------------------------

def smooth_l1(pred: Tensor, target, beta: float = 1.0) -> Tensor:
    """Elementwise Huber penalty against a constant target."""
    t = _as_array(target)
    d = pred.data - t
    ad = np.abs(d)
    out = np.where(ad < beta, 0.5 * d * d / beta, ad - 0.5 * beta)

    def backward(g):
        return (g * np.clip(d / beta, -1.0, 1.0),)

    return _emit(out, (pred,), backward)


def bce_with_logits(logits: Tensor, target) -> Tensor:
    """Elementwise binary cross-entropy on logits (numerically stable)."""
    t = _as_array(target)
    x = logits.data
    out = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        sig = 1.0 / (1.0 + np.exp(-x))
        return (g * (sig - t),)

    return _emit(out, (logits,), backward)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

class ParamBlock:
    """Named collection of weight tensors with a seeded initializer."""

    def __init__(self, rng_seed: int = 0):
        self.rng_seed = int(rng_seed)
        self._rng = np.random.default_rng(self.rng_seed)
        self._tensors: dict[str, Tensor] = {}

    def tensor(self, name: str, shape, init: str = "zeros") -> Tensor:
        if name in self._tensors:
            raise KeyError(f"parameter {name!r} already exists")
        shape = tuple(int(s) for s in shape)
        if init == "zeros":
            data = np.zeros(shape, dtype=np.float64)
        elif init == "ones":
            data = np.ones(shape, dtype=np.float64)
        elif init == "xavier":
            fan_in = shape[0] if len(shape) >= 1 else 1
            fan_out = shape[-1] if len(shape) >= 2 else shape[0]
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            data = self._rng.uniform(-limit, limit, size=shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        t = Tensor(data)
        self._tensors[name] = t
        return t

    def dense(self, name: str, fan_in: int, fan_out: int):
        """Register an affine layer: `<name>.w` (xavier) and `<name>.b` (zeros)."""
        self.tensor(f"{name}.w", (fan_in, fan_out), init="xavier")
        self.tensor(f"{name}.b", (fan_out,), init="zeros")

    def mlp(self, name: str, dims: Sequence[int]):
        """Register a chain of affine layers `<name>.0 .. <name>.k-1`."""
        if len(dims) < 2:
            raise ValueError("mlp needs at least input and output dims")
        for i in range(len(dims) - 1):
            self.dense(f"{name}.{i}", dims[i], dims[i + 1])

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def names(self):
        return list(self._tensors.keys())

    def items(self):
        return self._tensors.items()

    def tensors(self):
        return list(self._tensors.values())

    def watch_all(self, tape: Tape):
        for t in self._tensors.values():
            tape.watch(t)

    def num_params(self) -> int:
        return sum(t.data.size for t in self._tensors.values())

    def copy(self) -> "ParamBlock":
        out = ParamBlock(self.rng_seed)
        for name, t in self._tensors.items():
            out._tensors[name] = Tensor(t.data.copy())
        return out


def affine(x: Tensor, params: ParamBlock, name: str) -> Tensor:
    return add(matmul(x, params[f"{name}.w"]), params[f"{name}.b"])


def mlp_forward(x: Tensor, params: ParamBlock, name: str) -> Tensor:
    """Run the affine chain registered as `name`: affine -> relu -> ... -> affine."""
    i = 0
    out = x
    while f"{name}.{i}.w" in params:
        if i > 0:
            out = relu(out)
        out = affine(out, params, f"{name}.{i}")
        i += 1
    if i == 0:
        raise KeyError(f"no MLP registered under {name!r}")
    return out


# ---------------------------------------------------------------------------
# checkpoint archive: "NPK1" magic, little-endian,
# per entry: u32 name length, name bytes, u32 rank, u32*rank extents, f64 payload
# ---------------------------------------------------------------------------

_NPK_MAGIC = b"NPK1"


def save_params(params: ParamBlock, path) -> None:
    with open(path, "wb") as f:
        f.write(_NPK_MAGIC)
        for name, t in params.items():
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", t.data.ndim))
            f.write(struct.pack("<" + "I" * t.data.ndim, *t.data.shape))
            f.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_params(path) -> ParamBlock:
    params = ParamBlock(0)
    with open(path, "rb") as f:
        if f.read(4) != _NPK_MAGIC:
            raise ValueError(f"{path}: not a NPK1 archive")
        while True:
            head = f.read(4)
            if not head:
                break
            (nlen,) = struct.unpack("<I", head)
            name = f.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", f.read(4))
            extents = struct.unpack("<" + "I" * rank, f.read(4 * rank))
            count = int(np.prod(extents)) if rank else 1
            payload = f.read(8 * count)
            if len(payload) != 8 * count:
                raise ValueError(f"{path}: truncated entry {name!r}")
            data = np.frombuffer(payload, dtype="<f8").reshape(extents).astype(np.float64)
            params._tensors[name] = Tensor(data)
    return params


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

class SGD:
    def __init__(self, params: ParamBlock, lr: float = 1e-2, momentum: float = 0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self._vel = {n: np.zeros_like(t.data) for n, t in params.items()}

    def step(self):
        for name, t in self.params.items():
            if t.grad is None:
                continue
            v = self._vel[name]
            v *= self.momentum
            v -= self.lr * t.grad
            t.data = t.data + v


class Adam:
    def __init__(self, params: ParamBlock, lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m = {n: np.zeros_like(t.data) for n, t in params.items()}
        self._v = {n: np.zeros_like(t.data) for n, t in params.items()}
        self._step = 0

    def step(self):
        self._step += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self._step
        bias2 = 1.0 - b2 ** self._step
        for name, t in self.params.items():
            g = t.grad
            if g is None:
                continue
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            t.data = t.data - self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    `f` must be a pure scalar-valued function of one tensor; the error for
    each coordinate is |analytic - numeric| / max(1, |analytic|).
    """
    tape = Tape()
    xt = Tensor(x.data.copy())
    tape.watch(xt)
    out = f(xt)
    if out.data.size != 1:
        raise ShapeError("grad_check requires a scalar-valued function")
    tape.backward(out)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x.data)

    numeric = np.zeros_like(x.data)
    flat_num = numeric.reshape(-1)
    base = x.data.copy()
    flat_base = base.reshape(-1)
    for i in range(flat_base.size):
        orig = flat_base[i]
        flat_base[i] = orig + step
        hi = f(Tensor(base.copy())).item()
        flat_base[i] = orig - step
        lo = f(Tensor(base.copy())).item()
        flat_base[i] = orig
        flat_num[i] = (hi - lo) / (2.0 * step)

    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom))


def grad_check_params(loss_fn: Callable[[], Tensor], params: ParamBlock,
                      step: float = 1e-5, sample: int | None = None,
                      seed: int = 0) -> float:
    """Finite-difference check of d(loss)/d(params) for a parameterized model.

    `loss_fn` recomputes the scalar loss from the current parameter values.
    With `sample`, only that many seeded-random coordinates per tensor are
    probed (keeps end-to-end checks tractable).
    """
    tape = Tape()
    params.watch_all(tape)
    loss = loss_fn()
    tape.backward(loss)
    analytic = {n: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for n, t in params.items()}
    for _, t in params.items():
        t._tape = None

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, t in params.items():
        flat = t.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if sample is None or sample >= n else rng.choice(n, size=sample, replace=False)
        a_flat = analytic[name].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            hi = loss_fn().item()
            flat[i] = orig - step
            lo = loss_fn().item()
            flat[i] = orig
            num = (hi - lo) / (2.0 * step)
            err = abs(a_flat[i] - num) / max(1.0, abs(a_flat[i]))
            worst = max(worst, err)
    return worst
