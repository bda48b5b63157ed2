"""Dense tensors with reverse-mode automatic differentiation.

Every operation records its parents and an adjoint closure on the output
tensor. ``backward`` replays the adjoints of the reachable subgraph in exact
reverse creation order, so gradient accumulation is additive and
deterministic. Arrays are float32 unless a :func:`precision` block says
otherwise (gradient checks run in float64).
"""
from __future__ import annotations

import contextlib
import io
import itertools
import math
import threading
import zipfile
from typing import Callable, Iterable, Sequence

import numpy as np


class NumericsError(ValueError):
    """Raised on shape mismatches, non-finite values and misuse of the tape."""


_local = threading.local()
_counter = itertools.count()


def _float_dtype():
    return getattr(_local, "dtype", np.float32)


def is_grad_enabled() -> bool:
    return getattr(_local, "grad", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate operations without recording them."""
    prev = is_grad_enabled()
    _local.grad = False
    try:
        yield
    finally:
        _local.grad = prev


@contextlib.contextmanager
def precision(dtype):
    """Create new tensors with ``dtype`` inside the block."""
    prev = _float_dtype()
    _local.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _local.dtype = prev


@contextlib.contextmanager
def kink_monitor():
    """Track the smallest ``|x|`` fed to :func:`relu` inside the block.

    Yields a one-element list holding that margin. Finite-difference checks
    use it to skip points where a step could cross the kink.
    """
    prev = getattr(_local, "kinks", None)
    record = [math.inf]
    _local.kinks = record
    try:
        yield record
    finally:
        _local.kinks = prev


def _check_finite(data: np.ndarray, where: str) -> None:
    if not np.isfinite(data).all():
        raise NumericsError(f"{where}: non-finite value produced")


class Tensor:
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=_float_dtype())
        _check_finite(arr, name or "tensor")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._adjoint: Callable | None = None
        self._seq = next(_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._adjoint is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise NumericsError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise NumericsError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], adjoint: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._seq = next(_counter)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._adjoint = adjoint
    else:
        out.requires_grad = False
        out._parents = ()
        out._adjoint = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise NumericsError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- primitives

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def adjoint(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), adjoint, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def adjoint(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), adjoint, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def adjoint(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), adjoint, "mul")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise NumericsError(f"matmul: scalar operand, shapes {a.shape} and {b.shape}")
    inner_b = b.shape[-2] if b.ndim > 1 else b.shape[0]
    if a.shape[-1] != inner_b:
        raise NumericsError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise NumericsError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def adjoint(g):
        if a.ndim == 1 and b.ndim == 1:
            return g * b.data, g * a.data
        A = a.data[None, :] if a.ndim == 1 else a.data
        B = b.data[:, None] if b.ndim == 1 else b.data
        if a.ndim == 1:
            g = np.expand_dims(g, -2)
        if b.ndim == 1:
            g = np.expand_dims(g, -1)
        ga = g @ np.swapaxes(B, -1, -2)
        gb = np.swapaxes(A, -1, -2) @ g
        if a.ndim == 1:
            ga = ga.squeeze(-2)
        if b.ndim == 1:
            gb = gb.squeeze(-1)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), adjoint, "matmul")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise NumericsError("concat: no inputs")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except (ValueError, np.exceptions.AxisError):
        raise NumericsError(f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def adjoint(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, ts, adjoint, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise NumericsError("stack: no inputs")
    if len({t.shape for t in ts}) != 1:
        raise NumericsError(f"stack: shapes differ {[t.shape for t in ts]}")
    out = np.stack([t.data for t in ts], axis=axis)

    def adjoint(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _result(out, ts, adjoint, "stack")


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def adjoint(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(out), (x,), adjoint, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if x.size == 0:
        raise NumericsError("mean: empty tensor")
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    count = x.size // max(np.asarray(out).size, 1) if axis is not None else x.size

    def adjoint(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _result(np.asarray(out, dtype=x.data.dtype), (x,), adjoint, "mean")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise NumericsError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None

    def adjoint(g):
        return (g.reshape(x.shape),)

    return _result(out, (x,), adjoint, "reshape")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))

    def adjoint(g):
        return (np.transpose(g, inverse),)

    return _result(np.transpose(x.data, axes), (x,), adjoint, "transpose")


def swapaxes(x, a: int, b: int) -> Tensor:
    axes = list(range(as_tensor(x).ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    out = x.data[index]

    def adjoint(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(out), (x,), adjoint, "getitem")


def take(table, ids) -> Tensor:
    """Row lookup ``table[ids]``; the adjoint scatter-adds into the table."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise NumericsError(f"take: id out of range for table with {table.shape[0]} rows")

    def adjoint(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _result(table.data[ids], (table,), adjoint, "take")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)

    def adjoint(g):
        return (g * (1.0 - out * out),)

    return _result(out, (x,), adjoint, "tanh")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    record = getattr(_local, "kinks", None)
    if record is not None and x.size:
        record[0] = min(record[0], float(np.abs(x.data).min()))

    def adjoint(g):
        return (g * mask,)

    return _result(x.data * mask, (x,), adjoint, "relu")


def layer_norm(x, gain=None, bias=None, eps: float = 1e-6) -> Tensor:
    """Normalise the last axis to zero mean and unit variance, then scale/shift."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv

    def adjoint(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    out = _result(xhat.astype(x.data.dtype), (x,), adjoint, "layer_norm")
    if gain is not None:
        out = mul(out, gain)
    if bias is not None:
        out = add(out, bias)
    return out


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def adjoint(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), adjoint, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def adjoint(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), adjoint, "log_softmax")


def cross_entropy(logits, targets, weights=None, reduction: str = "mean") -> Tensor:
    """Cross-entropy of ``logits[..., V]`` against integer ``targets[...]``.

    ``weights`` (same shape as targets) masks or reweights positions; the
    "mean" reduction divides by the total weight.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise NumericsError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[-1]):
        raise NumericsError("cross_entropy: target id out of range")
    w = np.ones(targets.shape) if weights is None else np.asarray(weights, dtype=np.float64)
    if reduction == "mean":
        total = w.sum()
        if total <= 0:
            raise NumericsError("cross_entropy: zero total weight")
        w = w / total
    elif reduction != "sum":
        raise NumericsError(f"cross_entropy: unknown reduction {reduction!r}")
    w = w.astype(logits.data.dtype)

    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = np.asarray(-(picked * w).sum(), dtype=logits.data.dtype)

    def adjoint(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, targets[..., None],
                          np.take_along_axis(grad, targets[..., None], axis=-1) - 1.0, axis=-1)
        return (grad * (w[..., None] * g),)

    return _result(loss, (logits,), adjoint, "cross_entropy")


# ------------------------------------------------------------------ backward

def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf reachable from the scalar ``loss``."""
    if loss.size != 1:
        raise NumericsError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise NumericsError("backward: loss is not connected to any trainable tensor")

    nodes, seen, stack_ = [], set(), [loss]
    while stack_:
        t = stack_.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack_.extend(p for p in t._parents if p.requires_grad)
    nodes.sort(key=lambda t: t._seq, reverse=True)

    grads = {id(loss): np.ones_like(loss.data)}
    for t in nodes:
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.is_leaf:
            t.grad = g.astype(t.data.dtype, copy=True) if t.grad is None else t.grad + g
            continue
        for parent, pg in zip(t._parents, t._adjoint(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------- optimizers

class Adam:
    """Bias-corrected Adam. ``step`` applies the update and zeroes gradients."""

    def __init__(self, params: Iterable[Tensor], lr: float = 2e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for p in self.params:
            if p.grad is None:
                raise NumericsError(f"adam: parameter {p.name or '<unnamed>'} has no gradient")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype)
            _check_finite(p.data, f"adam update of {p.name or '<unnamed>'}")
            p.grad = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = np.zeros_like(p.data)


class SGD:
    """Plain gradient descent behind the same interface as :class:`Adam`."""

    def __init__(self, params: Iterable[Tensor], lr: float = 2e-3):
        self.params = list(params)
        self.lr = lr

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for p in self.params:
            if p.grad is None:
                raise NumericsError(f"sgd: parameter {p.name or '<unnamed>'} has no gradient")
        for p in self.params:
            p.data -= (lr * p.grad).astype(p.data.dtype)
            p.grad = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = np.zeros_like(p.data)


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if total_steps <= 0:
        raise NumericsError("cosine_lr: total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise NumericsError(f"cosine_lr: step {step} outside [0, {total_steps}]")
    return max(0.0, 0.5 * lr0 * (1.0 + math.cos(math.pi * step / total_steps)))


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ------------------------------------------------------------ gradient check

def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest elementwise difference, relative to the gradient's magnitude."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def finite_difference(fn: Callable[[], Tensor], x: Tensor, step: float = 1e-4,
                      entries: Sequence[int] | None = None) -> np.ndarray:
    """Central differences of the scalar ``fn()`` with respect to ``x.data``.

    With ``entries`` only those flat indices are perturbed; the rest stay zero.
    """
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.data.reshape(-1)
    if not np.shares_memory(flat, x.data):
        raise NumericsError("finite_difference needs a contiguous tensor")
    with no_grad():
        for i in (range(flat.size) if entries is None else entries):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(fn().data)
            flat[i] = orig - step
            lo = float(fn().data)
            flat[i] = orig
            grad.reshape(-1)[i] = (hi - lo) / (2 * step)
    return grad


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-4,
              max_entries: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max relative error between autodiff and central differences over ``inputs``.

    The error is taken over all inputs jointly, relative to the largest
    gradient entry. ``max_entries`` caps how many elements of each input are
    perturbed; they are drawn with ``rng`` and only they are compared.
    """
    for x in inputs:
        x.grad = None
    backward(fn())
    rng = rng or np.random.default_rng(0)
    analytic, numeric = [], []
    for x in inputs:
        a = (np.zeros(x.shape) if x.grad is None else x.grad).reshape(-1)
        if max_entries is None or x.size <= max_entries:
            idx = np.arange(x.size)
        else:
            idx = rng.choice(x.size, size=max_entries, replace=False)
        analytic.append(a[idx])
        numeric.append(finite_difference(fn, x, step, idx).reshape(-1)[idx])
    return max_relative_error(np.concatenate(analytic), np.concatenate(numeric))


# ------------------------------------------------------------------ archives

ARCHIVE_FORMAT = "kgadapter-archive/1"
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def save_archive(path, params: dict, meta: dict | None = None) -> None:
    """Write ``name -> array`` as little-endian float32 blobs plus a text manifest."""
    lines = [f"format={ARCHIVE_FORMAT}"]
    for key, value in (meta or {}).items():
        text = str(value)
        if "\n" in text:
            raise NumericsError(f"archive metadata {key!r} contains a newline")
        lines.append(f"meta.{key}={text}")
    blobs = []
    for name, value in params.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        if "\t" in name or "\n" in name:
            raise NumericsError(f"bad parameter name {name!r}")
        dims = ",".join(str(d) for d in arr.shape)
        lines.append(f"param\t{name}\t{dims}")
        blobs.append((f"data/{name}.f32", np.ascontiguousarray(arr, dtype="<f4").tobytes()))
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo("manifest.txt", _ZIP_DATE), "\n".join(lines) + "\n")
        for name, payload in blobs:
            zf.writestr(zipfile.ZipInfo(name, _ZIP_DATE), payload)


def load_archive(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    params: dict[str, np.ndarray] = {}
    meta: dict[str, str] = {}
    try:
        zf = zipfile.ZipFile(path)
    except zipfile.BadZipFile:
        raise NumericsError(f"{path}: not a {ARCHIVE_FORMAT} archive") from None
    with zf:
        try:
            manifest = zf.read("manifest.txt").decode("utf-8").splitlines()
        except KeyError:
            raise NumericsError(f"{path}: archive has no manifest") from None
        if not manifest or manifest[0] != f"format={ARCHIVE_FORMAT}":
            raise NumericsError(f"{path}: not a {ARCHIVE_FORMAT} archive")
        for line in manifest[1:]:
            if line.startswith("meta."):
                key, _, value = line[5:].partition("=")
                meta[key] = value
            elif line.startswith("param\t"):
                _, name, dims = line.split("\t")
                shape = tuple(int(d) for d in dims.split(",")) if dims else ()
                try:
                    raw = np.frombuffer(zf.read(f"data/{name}.f32"), dtype="<f4")
                    params[name] = raw.reshape(shape).astype(np.float32)
                except (KeyError, ValueError):
                    raise NumericsError(f"{path}: parameter {name!r} is missing or truncated") from None
            elif line:
                raise NumericsError(f"{path}: bad manifest line {line!r}")
    return params, meta


def archive_bytes(params: dict, meta: dict | None = None) -> bytes:
    buf = io.BytesIO()
    save_archive(buf, params, meta)
    return buf.getvalue()
