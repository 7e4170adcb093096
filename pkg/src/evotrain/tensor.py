"""Dense tensor type and the arithmetic primitives the model needs.

Storage is always a float32 numpy buffer; the BF16 dtype means the values
are bfloat16-representable (top 16 bits of the float32 pattern) and the
ledger accounts 2 bytes per element. All arithmetic accumulates in F32
regardless of storage dtype.
"""

from __future__ import annotations

import enum

import numpy as np

from . import runtime

MASK_BIAS = -1e9  # mask enters the logits as (mask - 1) * 1e9


class DimensionError(Exception):
    pass


class ContractError(Exception):
    pass


class DType(enum.Enum):
    F32 = 4
    BF16 = 2

    @property
    def size(self) -> int:
        return self.value


def bf16_round(arr: np.ndarray) -> np.ndarray:
    """Round-to-nearest-even onto the top 16 bits of the F32 bit pattern."""
    u = np.ascontiguousarray(arr, dtype=np.float32).view(np.uint32)
    rounded = (u + np.uint32(0x7FFF) + ((u >> np.uint32(16)) & np.uint32(1))) & np.uint32(
        0xFFFF0000
    )
    return rounded.view(np.float32).reshape(arr.shape)


class Tensor:
    __slots__ = ("data", "dtype", "bid", "released", "is_param", "name")

    def __init__(self, data: np.ndarray, dtype: DType, bid: int):
        self.data = data
        self.dtype = dtype
        self.bid = bid
        self.released = False
        self.is_param = False
        self.name = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def nbytes(self) -> int:
        return self.size * self.dtype.size

    def release(self):
        if not self.released:
            runtime.ctx().ledger.free(self.bid)
            self.released = True

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, bid={self.bid})"


def _register(data: np.ndarray, dtype: DType) -> Tensor:
    if data.ndim > 5:
        raise DimensionError(f"tensors are limited to 5 dims, got shape {data.shape}")
    c = runtime.ctx()
    t = Tensor(np.ascontiguousarray(data, dtype=np.float32), dtype, c.new_bid())
    c.ledger.alloc(t.bid, t.nbytes, tuple(data.shape))
    runtime.adopt(t)
    return t


def tensor(data, dtype: DType = DType.F32) -> Tensor:
    arr = np.asarray(data, dtype=np.float32)
    if dtype is DType.BF16:
        arr = bf16_round(arr)
    return _register(arr, dtype)


def parameter(data, name: str = None) -> Tensor:
    t = tensor(data, DType.F32)
    t.is_param = True
    t.name = name
    return t


def _out(arr: np.ndarray, in_dtypes) -> Tensor:
    """Create an op output honoring the activation-dtype policy."""
    c = runtime.ctx()
    dtype = DType.F32 if any(d is DType.F32 for d in in_dtypes) else DType.BF16
    if c.act_dtype is DType.BF16:
        return _register(bf16_round(arr), DType.BF16)
    return _register(arr, dtype)


def _record(op, inputs, outputs, saved, bwd):
    tape = runtime.ctx().tape
    if tape is not None:
        tape.add(op, inputs, outputs, saved, bwd)


def unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.astype(np.float32)


# ---------------------------------------------------------------------------
# primitive operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(
            f"matmul inner dims differ: {a.data.shape} vs {b.data.shape}"
        )
    runtime.ctx().count_op("matmul")
    out_arr = np.matmul(a.data, b.data)
    out = _out(out_arr, (a.dtype, b.dtype))
    ad, bd, ashape, bshape = a.data, b.data, a.shape, b.shape

    def bwd(gouts):
        g = gouts[0]
        if ad.ndim == 1:
            da = unbroadcast(np.matmul(g[..., None], bd[None, ...].swapaxes(-1, -2))[..., 0, :], ashape)
        else:
            da = unbroadcast(np.matmul(g, bd.swapaxes(-1, -2)), ashape)
        db = unbroadcast(np.matmul(ad.swapaxes(-1, -2), g), bshape)
        return [(a.bid, da), (b.bid, db)]

    _record("matmul", [a, b], [out], [a, b], bwd)
    return out


def softmax_lastdim(x: Tensor) -> Tensor:
    runtime.ctx().count_op("softmax")
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    w = e / e.sum(axis=-1, keepdims=True)
    out = _out(w, (x.dtype,))
    wd = out.data

    def bwd(gouts):
        g = gouts[0]
        dx = wd * (g - (g * wd).sum(axis=-1, keepdims=True))
        return [(x.bid, dx.astype(np.float32))]

    _record("softmax", [x], [out], [out], bwd)
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise DimensionError(
            f"layer_norm affine extents {gamma.shape}/{beta.shape} "
            f"do not match last dim of {x.shape}"
        )
    runtime.ctx().count_op("layer_norm")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = _out(xhat * gamma.data + beta.data, (x.dtype,))
    xd, gd = x.data, gamma.data
    n = x.shape[-1]

    def bwd(gouts):
        g = gouts[0]
        mu_ = xd.mean(axis=-1, keepdims=True)
        inv_ = 1.0 / np.sqrt(xd.var(axis=-1, keepdims=True) + eps)
        xh = (xd - mu_) * inv_
        dgamma = (g * xh).reshape(-1, n).sum(axis=0)
        dbeta = g.reshape(-1, n).sum(axis=0)
        dxh = g * gd
        dx = inv_ * (
            dxh
            - dxh.mean(axis=-1, keepdims=True)
            - xh * (dxh * xh).mean(axis=-1, keepdims=True)
        )
        return [
            (x.bid, dx.astype(np.float32)),
            (gamma.bid, dgamma.astype(np.float32)),
            (beta.bid, dbeta.astype(np.float32)),
        ]

    _record("layer_norm", [x, gamma, beta], [out], [x], bwd)
    return out


def cast_bf16(x: Tensor) -> Tensor:
    if x.dtype is not DType.F32:
        raise ContractError("cast_bf16 expects an F32 tensor")
    runtime.ctx().count_op("cast")
    out = _register(bf16_round(x.data), DType.BF16)

    def bwd(gouts):
        return [(x.bid, gouts[0])]

    _record("cast_bf16", [x], [out], [], bwd)
    return out


def widen(x: Tensor) -> Tensor:
    """BF16 -> F32 (values are already exactly representable)."""
    runtime.ctx().count_op("cast")
    out = _register(x.data.copy(), DType.F32)

    def bwd(gouts):
        return [(x.bid, gouts[0])]

    _record("widen", [x], [out], [], bwd)
    return out


def _binary_shapes_ok(a, b):
    try:
        np.broadcast_shapes(a, b)
        return True
    except ValueError:
        return False


def add(x: Tensor, y) -> Tensor:
    runtime.ctx().count_op("add")
    if isinstance(y, Tensor):
        if not _binary_shapes_ok(x.shape, y.shape):
            raise DimensionError(f"add shapes not broadcastable: {x.shape} vs {y.shape}")
        out = _out(x.data + y.data, (x.dtype, y.dtype))

        def bwd(gouts):
            g = gouts[0]
            return [(x.bid, unbroadcast(g, x.shape)), (y.bid, unbroadcast(g, y.shape))]

        _record("add", [x, y], [out], [], bwd)
    else:
        out = _out(x.data + np.float32(y), (x.dtype,))

        def bwd(gouts):
            return [(x.bid, gouts[0])]

        _record("add", [x], [out], [], bwd)
    return out


def mul(x: Tensor, y) -> Tensor:
    runtime.ctx().count_op("mul")
    if isinstance(y, Tensor):
        if not _binary_shapes_ok(x.shape, y.shape):
            raise DimensionError(f"mul shapes not broadcastable: {x.shape} vs {y.shape}")
        out = _out(x.data * y.data, (x.dtype, y.dtype))
        xd, yd = x.data, y.data

        def bwd(gouts):
            g = gouts[0]
            return [
                (x.bid, unbroadcast(g * yd, x.shape)),
                (y.bid, unbroadcast(g * xd, y.shape)),
            ]

        _record("mul", [x, y], [out], [x, y], bwd)
    else:
        k = np.float32(y)
        out = _out(x.data * k, (x.dtype,))

        def bwd(gouts):
            return [(x.bid, gouts[0] * k)]

        _record("mul", [x], [out], [], bwd)
    return out


def scale(x: Tensor, k: float) -> Tensor:
    return mul(x, k)


def sigmoid(x: Tensor) -> Tensor:
    runtime.ctx().count_op("sigmoid")
    s = 1.0 / (1.0 + np.exp(-x.data))
    out = _out(s, (x.dtype,))
    sd = out.data

    def bwd(gouts):
        return [(x.bid, (gouts[0] * sd * (1.0 - sd)).astype(np.float32))]

    _record("sigmoid", [x], [out], [out], bwd)
    return out


def relu(x: Tensor) -> Tensor:
    runtime.ctx().count_op("relu")
    out = _out(np.maximum(x.data, 0.0), (x.dtype,))
    od = out.data

    def bwd(gouts):
        return [(x.bid, (gouts[0] * (od > 0)).astype(np.float32))]

    _record("relu", [x], [out], [out], bwd)
    return out


def recip(x: Tensor) -> Tensor:
    runtime.ctx().count_op("recip")
    out = _out(1.0 / x.data, (x.dtype,))
    od = out.data

    def bwd(gouts):
        return [(x.bid, (-gouts[0] * od * od).astype(np.float32))]

    _record("recip", [x], [out], [out], bwd)
    return out


_ELEMENTWISE = {"add": add, "mul": mul, "sigmoid": sigmoid, "relu": relu, "scale": scale}


def elementwise(kind: str, x: Tensor, y=None) -> Tensor:
    """Dispatcher over the supported element-wise/broadcast kinds."""
    if kind not in _ELEMENTWISE:
        raise ContractError(f"unknown elementwise kind {kind!r}")
    fn = _ELEMENTWISE[kind]
    return fn(x) if y is None else fn(x, y)


def transpose(x: Tensor, axes) -> Tensor:
    runtime.ctx().count_op("transpose")
    axes = tuple(axes)
    out = _out(np.transpose(x.data, axes).copy(), (x.dtype,))
    inv = tuple(np.argsort(axes))

    def bwd(gouts):
        return [(x.bid, np.transpose(gouts[0], inv).copy())]

    _record("transpose", [x], [out], [], bwd)
    return out


def reshape(x: Tensor, shape) -> Tensor:
    runtime.ctx().count_op("reshape")
    out = _out(x.data.reshape(shape).copy(), (x.dtype,))
    old = x.shape

    def bwd(gouts):
        return [(x.bid, gouts[0].reshape(old))]

    _record("reshape", [x], [out], [], bwd)
    return out


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    runtime.ctx().count_op("sum")
    out = _out(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x.dtype,))
    shape = x.shape

    def bwd(gouts):
        g = gouts[0]
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return [(x.bid, np.broadcast_to(g, shape).astype(np.float32).copy())]

    _record("sum", [x], [out], [], bwd)
    return out


def mean_all(x: Tensor) -> Tensor:
    runtime.ctx().count_op("mean")
    out = _out(np.asarray(x.data.mean()), (x.dtype,))
    n = x.size
    shape = x.shape

    def bwd(gouts):
        g = gouts[0]
        return [(x.bid, np.broadcast_to(g / n, shape).astype(np.float32).copy())]

    _record("mean", [x], [out], [], bwd)
    return out


def concat(tensors, axis: int) -> Tensor:
    runtime.ctx().count_op("concat")
    out = _out(np.concatenate([t.data for t in tensors], axis=axis),
               tuple(t.dtype for t in tensors))
    sizes = [t.shape[axis] for t in tensors]
    bids = [t.bid for t in tensors]

    def bwd(gouts):
        g = gouts[0]
        pieces = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
        return list(zip(bids, [p.copy() for p in pieces]))

    _record("concat", list(tensors), [out], [], bwd)
    return out


def split(x: Tensor, sections, axis: int) -> list[Tensor]:
    """Split along ``axis`` at the given cumulative boundaries (ragged allowed)."""
    runtime.ctx().count_op("split")
    pieces = np.split(x.data, sections, axis=axis)
    outs = [_out(p.copy(), (x.dtype,)) for p in pieces]
    shapes = [p.shape for p in pieces]

    def bwd(gouts):
        gs = [
            g if g is not None else np.zeros(s, dtype=np.float32)
            for g, s in zip(gouts, shapes)
        ]
        return [(x.bid, np.concatenate(gs, axis=axis))]

    _record("split", [x], outs, [], bwd)
    return outs


def detach(x: Tensor) -> Tensor:
    """Copy with no tape linkage (stop-gradient)."""
    return _register(x.data.copy(), x.dtype)
