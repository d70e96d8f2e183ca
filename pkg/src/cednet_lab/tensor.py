"""Dense NCHW tensors with a tape-based reverse-mode autodiff.

Only the operators needed by the CEDNet graphs are provided.  Ops record
onto the innermost active :class:`Tape`; outside a tape they just compute.

    >>> x = Tensor(np.ones((2, 3)), requires_grad=True)
    >>> with Tape():
    ...     loss = sum_all(x)
    >>> backward(loss)
    >>> x.grad.sum()
    6.0
"""

from __future__ import annotations

import io
import json
import struct
import threading
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

DTYPES = {"float32": np.float32, "float64": np.float64}

_local = threading.local()


class ShapeError(ValueError):
    """Operand dimensions do not fit the operator."""


class ConfigError(ValueError):
    """Operator hyperparameters produce an invalid output (e.g. empty)."""


class AutodiffError(RuntimeError):
    pass


class Tensor:
    """A numpy buffer plus optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64 if dtype is None else dtype)
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def sum(self) -> "Tensor":
        return sum_all(self)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


class Tape:
    """Ordered record of executed primitive ops.

    Use as a context manager; ops executed inside the ``with`` block whose
    inputs require gradients are appended in execution order.  A tape can
    be replayed backward exactly once unless :meth:`reset` is called.
    """

    def __init__(self):
        self.entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.entries)

    def reset(self) -> None:
        self.entries.clear()
        self.consumed = False

    def record(self, out: Tensor, inputs: Sequence[Tensor], grad_fn: Callable) -> None:
        out.requires_grad = True
        out._tape = self
        self.entries.append((out, tuple(inputs), grad_fn))

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise AutodiffError("backward already ran on this tape; call reset() first")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, grad_fn in reversed(self.entries):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, grad_fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._tape is None:
                    # leaf: accumulate into the user-visible buffer
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
                else:
                    key = id(inp)
                    grads[key] = gi if key not in grads else grads[key] + gi
        self.consumed = True


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _record(out: Tensor, inputs: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, inputs, grad_fn)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf tensor that contributed to ``loss``."""
    if loss.data.size != 1:
        raise AutodiffError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise AutodiffError("loss is detached: it was not produced under an active Tape")
    loss._tape.backward(loss)


# ---------------------------------------------------------------- elementwise


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} are not compatible") from None
    out = Tensor(a.data + b.data)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} are not compatible") from None
    out = Tensor(a.data * b.data)

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), grad_fn)


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum(), dtype=x.dtype))

    def grad_fn(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _record(out, (x,), grad_fn)


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = Tensor((x.data * cdf).astype(x.dtype))

    def grad_fn(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return ((g * (cdf + x.data * pdf)).astype(x.dtype),)

    return _record(out, (x,), grad_fn)


# ---------------------------------------------------------------- channel ops


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map along axis 1 (channels); works for (N, C) and (N, C, H, W)."""
    if weight.ndim != 2:
        raise ShapeError(f"linear: weight must be 2-D (out, in), got {weight.shape}")
    if x.ndim < 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"linear: input has {x.shape[1] if x.ndim > 1 else '?'} channels, "
            f"weight expects {weight.shape[1]}"
        )
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    xl = np.moveaxis(x.data, 1, -1)
    y = xl @ weight.data.T
    if bias is not None:
        y = y + bias.data
    out = Tensor(np.moveaxis(y, -1, 1))

    def grad_fn(g):
        gl = np.moveaxis(g, 1, -1)
        gx = np.moveaxis(gl @ weight.data, -1, 1)
        flat_g = gl.reshape(-1, gl.shape[-1])
        gw = flat_g.T @ xl.reshape(-1, xl.shape[-1])
        gb = flat_g.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, inputs, grad_fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the channel axis (axis 1) at every spatial position."""
    if eps <= 0:
        raise ConfigError("layer_norm: eps must be positive")
    c = x.shape[1] if x.ndim > 1 else -1
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"layer_norm: gamma/beta shapes {gamma.shape}/{beta.shape} do not match {c} channels"
        )
    bshape = (1, c) + (1,) * (x.ndim - 2)
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape))

    def grad_fn(g):
        red = (0,) + tuple(range(2, x.ndim))
        dgamma = (g * xhat).sum(axis=red)
        dbeta = g.sum(axis=red)
        dxhat = g * gamma.data.reshape(bshape)
        dx = inv * (
            dxhat
            - dxhat.mean(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        )
        return dx, dgamma, dbeta

    return _record(out, (x, gamma, beta), grad_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3)))

    def grad_fn(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(x.dtype),)

    return _record(out, (x,), grad_fn)


# ---------------------------------------------------------------- convolution


def conv_output_size(size: int, kernel: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation over NCHW input with zero padding."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be NCHW, got shape {x.shape}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d: weight must be (out, in/groups, kh, kw), got {weight.shape}")
    n, cin, h, w = x.shape
    cout, cg, kh, kw = weight.shape
    if groups < 1 or cin % groups or cout % groups:
        raise ShapeError(f"conv2d: channels in={cin}, out={cout} not divisible by groups={groups}")
    if cg != cin // groups:
        raise ShapeError(
            f"conv2d: weight dim 1 is {cg}, expected in_channels/groups = {cin // groups}"
        )
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ConfigError("conv2d: stride and dilation must be >= 1, padding >= 0")
    ho = conv_output_size(h, kh, stride, padding, dilation)
    wo = conv_output_size(w, kw, stride, padding, dilation)
    if ho <= 0 or wo <= 0:
        raise ConfigError(
            f"conv2d: non-positive output size {ho}x{wo} for input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}, dilation {dilation}"
        )
    og = cout // groups
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data

    def tap(i, j):
        r0, c0 = i * dilation, j * dilation
        return (
            slice(r0, r0 + stride * (ho - 1) + 1, stride),
            slice(c0, c0 + stride * (wo - 1) + 1, stride),
        )

    # cols: (N, G, Cg*kh*kw, Ho*Wo) with the same (c, i, j) order as weight
    cols = np.empty((n, cin, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            rs, cs = tap(i, j)
            cols[:, :, i, j] = xp[:, :, rs, cs]
    cols = cols.reshape(n, groups, cg * kh * kw, ho * wo)
    wmat = weight.data.reshape(groups, og, cg * kh * kw)
    y = np.matmul(wmat[None], cols).reshape(n, cout, ho, wo)
    if bias is not None:
        y = y + bias.data[None, :, None, None]
    out = Tensor(y)

    def grad_fn(g):
        gm = g.reshape(n, groups, og, ho * wo)
        gw = np.matmul(gm, cols.transpose(0, 1, 3, 2)).sum(axis=0).reshape(weight.shape)
        gcols = np.matmul(wmat.transpose(0, 2, 1)[None], gm)
        gcols = gcols.reshape(n, cin, kh, kw, ho, wo)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                rs, cs = tap(i, j)
                gxp[:, :, rs, cs] += gcols[:, :, i, j]
        gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, inputs, grad_fn)


# ---------------------------------------------------------------- resampling


def bilinear_matrix(size: int, scale: int, dtype=np.float64) -> np.ndarray:
    """(size*scale, size) interpolation matrix, half-pixel centres, edge clamp."""
    out = size * scale
    src = (np.arange(out) + 0.5) / scale - 0.5
    src = np.clip(src, 0.0, None)
    i0 = np.minimum(np.floor(src).astype(int), size - 1)
    i1 = np.minimum(i0 + 1, size - 1)
    frac = src - i0
    m = np.zeros((out, size), dtype=dtype)
    rows = np.arange(out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def bilinear_upsample(x: Tensor, scale: int) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"bilinear_upsample expects NCHW, got {x.shape}")
    if int(scale) != scale or scale < 2:
        raise ConfigError(f"bilinear_upsample: scale must be an integer >= 2, got {scale}")
    scale = int(scale)
    h, w = x.shape[2:]
    mh = bilinear_matrix(h, scale, x.dtype)
    mw = bilinear_matrix(w, scale, x.dtype)
    out = Tensor(mh @ x.data @ mw.T)

    def grad_fn(g):
        return (mh.T @ g @ mw,)

    return _record(out, (x,), grad_fn)


# ---------------------------------------------------------------- loss


def softmax_cross_entropy(logits: Tensor, labels, ignore_index: int = -1) -> Tensor:
    """Mean cross-entropy over positions whose label != ``ignore_index``.

    ``logits`` is (N, K) or (N, K, H, W); ``labels`` is the matching integer
    array without the class axis.
    """
    labels = np.asarray(labels)
    if logits.ndim < 2:
        raise ShapeError(f"softmax_cross_entropy: logits need a class axis, got {logits.shape}")
    k = logits.shape[1]
    expected = logits.shape[:1] + logits.shape[2:]
    if labels.shape != expected:
        raise ShapeError(f"softmax_cross_entropy: labels shape {labels.shape} != {expected}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ShapeError("softmax_cross_entropy: labels must be integers")
    valid = labels != ignore_index
    if np.any((labels[valid] < 0) | (labels[valid] >= k)):
        raise ValueError(f"softmax_cross_entropy: labels outside [0, {k})")
    count = int(valid.sum())
    if count == 0:
        raise ValueError("softmax_cross_entropy: no labelled positions")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    safe = np.where(valid, labels, 0)
    picked = np.take_along_axis(logp, np.expand_dims(safe, 1), axis=1)[:, 0]
    loss = -(picked * valid).sum() / count
    out = Tensor(np.asarray(loss, dtype=logits.dtype))

    def grad_fn(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, np.expand_dims(safe, 1), 1.0, axis=1)
        gl = (p - onehot) * np.expand_dims(valid, 1) * (g / count)
        return (gl.astype(logits.dtype),)

    return _record(out, (logits,), grad_fn)


# ---------------------------------------------------------------- dump format

DUMP_MAGIC = b"CEDT"


def dumps_tensor(t) -> bytes:
    """Serialize to ``magic | u32 header length | JSON header | raw LE buffer``."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    name = {np.dtype(np.float32): "float32", np.dtype(np.float64): "float64"}.get(arr.dtype)
    if name is None:
        raise TypeError(f"unsupported element type {arr.dtype}")
    header = json.dumps(
        {"shape": list(arr.shape), "dtype": name, "byte_order": "little"}, sort_keys=True
    ).encode("utf-8")
    raw = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
    return DUMP_MAGIC + struct.pack("<I", len(header)) + header + raw


def loads_tensor(buf: bytes) -> Tensor:
    stream = io.BytesIO(buf)
    t = read_tensor(stream)
    if stream.read(1):
        raise ValueError("trailing bytes after tensor dump")
    return t


def read_tensor(stream) -> Tensor:
    if stream.read(4) != DUMP_MAGIC:
        raise ValueError("not a tensor dump (bad magic)")
    (hlen,) = struct.unpack("<I", stream.read(4))
    header = json.loads(stream.read(hlen).decode("utf-8"))
    if header.get("byte_order") != "little":
        raise ValueError(f"unsupported byte order {header.get('byte_order')!r}")
    dtype = np.dtype(DTYPES[header["dtype"]]).newbyteorder("<")
    shape = tuple(header["shape"])
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    raw = stream.read(nbytes)
    if len(raw) != nbytes:
        raise ValueError(f"truncated tensor dump: expected {nbytes} bytes, got {len(raw)}")
    arr = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(DTYPES[header["dtype"]])
    return Tensor(arr)
