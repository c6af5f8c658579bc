"""Forward operators and their reverse-mode gradients.

Convolution here is cross-correlation (no kernel flip) over zero-padded
inputs, evaluated through an unfolded-window buffer and a tensordot
contraction. Pooling, normalization, the linear layer and the loss
follow the usual deep-learning definitions. Every operator validates
its shapes up front and raises ConfigError before it could produce a
non-positive extent.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, InputError
from .tensor import Tensor, grad_enabled


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _tuple_of(n: int, value, what: str) -> tuple[int, ...]:
    if isinstance(value, (int, np.integer)):
        return (int(value),) * n
    t = tuple(int(v) for v in value)
    if len(t) != n:
        raise ConfigError(f"{what} needs {n} components, got {value!r}")
    return t


def _same_dtype(*tensors: Tensor) -> None:
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ConfigError(f"mixed tensor dtypes {sorted(d.name for d in dtypes)}")


def _out_extent(extent: int, kernel: int, stride: int, pad: int, what: str) -> int:
    if kernel < 1 or stride < 1 or pad < 0:
        raise ConfigError(f"{what}: kernel={kernel}, stride={stride}, pad={pad} out of range")
    if kernel > extent + 2 * pad:
        raise ConfigError(f"{what}: kernel {kernel} exceeds padded extent {extent + 2 * pad}")
    out = (extent + 2 * pad - kernel) // stride + 1
    if out < 1:
        raise ConfigError(f"{what}: non-positive output extent for input extent {extent}")
    return out


# ---------------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride=(1, 1), padding=(0, 0)) -> Tensor:
    """Cross-correlate an N,C,H,W input with O,C,kH,kW weights."""
    if x.ndim != 4:
        raise ConfigError(f"conv2d expects a 4-d input, got shape {x.shape}")
    if weight.ndim != 4:
        raise ConfigError(f"conv2d expects a 4-d weight, got shape {weight.shape}")
    _same_dtype(*(t for t in (x, weight, bias) if t is not None))
    stride = _tuple_of(2, stride, "conv2d stride")
    padding = _tuple_of(2, padding, "conv2d padding")
    n, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    if ci != c:
        raise ConfigError(f"conv2d: input has {c} channels but weight expects {ci}")
    if bias is not None and bias.shape != (co,):
        raise ConfigError(f"conv2d: bias shape {bias.shape} != ({co},)")
    sh, sw = stride
    ph, pw = padding
    oh = _out_extent(h, kh, sh, ph, "conv2d height")
    ow = _out_extent(w, kw, sw, pw, "conv2d width")

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    col = np.empty((n, c, kh, kw, oh, ow), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            col[:, :, i, j] = xp[:, :, i:i + sh * oh:sh, j:j + sw * ow:sw]
    out = np.tensordot(col, weight.data, axes=([1, 2, 3], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        out += bias.data.reshape(1, co, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g: np.ndarray):
        gw = np.tensordot(g, col, axes=([0, 2, 3], [0, 4, 5]))
        gcol = np.tensordot(weight.data, g, axes=(0, 1)).transpose(3, 0, 1, 2, 4, 5)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + sh * oh:sh, j:j + sw * ow:sw] += gcol[:, :, i, j]
        gx = gxp[:, :, ph:ph + h, pw:pw + w] if (ph or pw) else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _node(out, parents, backward)


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride=(1, 1, 1), padding=(0, 0, 0)) -> Tensor:
    """Cross-correlate an N,C,D,H,W input with O,C,kD,kH,kW weights."""
    if x.ndim != 5:
        raise ConfigError(f"conv3d expects a 5-d input, got shape {x.shape}")
    if weight.ndim != 5:
        raise ConfigError(f"conv3d expects a 5-d weight, got shape {weight.shape}")
    _same_dtype(*(t for t in (x, weight, bias) if t is not None))
    stride = _tuple_of(3, stride, "conv3d stride")
    padding = _tuple_of(3, padding, "conv3d padding")
    n, c, d, h, w = x.shape
    co, ci, kd, kh, kw = weight.shape
    if ci != c:
        raise ConfigError(f"conv3d: input has {c} channels but weight expects {ci}")
    if bias is not None and bias.shape != (co,):
        raise ConfigError(f"conv3d: bias shape {bias.shape} != ({co},)")
    sd, sh, sw = stride
    pd, ph, pw = padding
    od = _out_extent(d, kd, sd, pd, "conv3d depth")
    oh = _out_extent(h, kh, sh, ph, "conv3d height")
    ow = _out_extent(w, kw, sw, pw, "conv3d width")

    pads = ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw))
    xp = np.pad(x.data, pads) if (pd or ph or pw) else x.data
    col = np.empty((n, c, kd, kh, kw, od, oh, ow), dtype=x.data.dtype)
    for a in range(kd):
        for i in range(kh):
            for j in range(kw):
                col[:, :, a, i, j] = xp[:, :, a:a + sd * od:sd,
                                        i:i + sh * oh:sh, j:j + sw * ow:sw]
    out = np.tensordot(col, weight.data, axes=([1, 2, 3, 4], [1, 2, 3, 4]))
    out = np.ascontiguousarray(out.transpose(0, 4, 1, 2, 3))
    if bias is not None:
        out += bias.data.reshape(1, co, 1, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g: np.ndarray):
        gw = np.tensordot(g, col, axes=([0, 2, 3, 4], [0, 5, 6, 7]))
        gcol = np.tensordot(weight.data, g, axes=(0, 1)).transpose(4, 0, 1, 2, 3, 5, 6, 7)
        gxp = np.zeros_like(xp)
        for a in range(kd):
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, a:a + sd * od:sd, i:i + sh * oh:sh, j:j + sw * ow:sw] += \
                        gcol[:, :, a, i, j]
        gx = gxp[:, :, pd:pd + d, ph:ph + h, pw:pw + w] if (pd or ph or pw) else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3, 4))

    return _node(out, parents, backward)


# ---------------------------------------------------------------------------
# pooling


def _pool_windows(xp: np.ndarray, kernel: tuple[int, ...], stride: tuple[int, ...],
                  outs: tuple[int, ...]) -> np.ndarray:
    """Stack pooling windows as (N, C, prod(kernel), *outs)."""
    n, c = xp.shape[:2]
    col = np.empty((n, c, int(np.prod(kernel)), *outs), dtype=xp.dtype)
    if len(kernel) == 2:
        kh, kw = kernel
        sh, sw = stride
        oh, ow = outs
        for i in range(kh):
            for j in range(kw):
                col[:, :, i * kw + j] = xp[:, :, i:i + sh * oh:sh, j:j + sw * ow:sw]
    else:
        kd, kh, kw = kernel
        sd, sh, sw = stride
        od, oh, ow = outs
        for a in range(kd):
            for i in range(kh):
                for j in range(kw):
                    col[:, :, (a * kh + i) * kw + j] = \
                        xp[:, :, a:a + sd * od:sd, i:i + sh * oh:sh, j:j + sw * ow:sw]
    return col


def _max_pool(x: Tensor, kernel, stride, padding, dim: int, what: str) -> Tensor:
    if x.ndim != dim + 2:
        raise ConfigError(f"{what} expects a {dim + 2}-d input, got shape {x.shape}")
    kernel = _tuple_of(dim, kernel, f"{what} kernel")
    stride = kernel if stride is None else _tuple_of(dim, stride, f"{what} stride")
    padding = _tuple_of(dim, padding, f"{what} padding")
    spatial = x.shape[2:]
    outs = tuple(_out_extent(e, k, s, p, what)
                 for e, k, s, p in zip(spatial, kernel, stride, padding))
    if any(padding):
        pads = ((0, 0), (0, 0)) + tuple((p, p) for p in padding)
        # Padding must never win the max, so pad with -inf rather than 0.
        xp = np.pad(x.data, pads, constant_values=-np.inf)
    else:
        xp = x.data
    col = _pool_windows(xp, kernel, stride, outs)
    arg = col.argmax(axis=2)
    out = np.take_along_axis(col, arg[:, :, None], axis=2)[:, :, 0]

    def backward(g: np.ndarray):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        n, c = x.shape[:2]
        nn = np.arange(n).reshape((n,) + (1,) * (dim + 1))
        cc = np.arange(c).reshape((1, c) + (1,) * dim)
        if dim == 2:
            kh, kw = kernel
            oh, ow = outs
            rows = arg // kw + stride[0] * np.arange(oh).reshape(1, 1, oh, 1)
            cols = arg % kw + stride[1] * np.arange(ow).reshape(1, 1, 1, ow)
            np.add.at(gxp, (nn, cc, rows, cols), g)
        else:
            kd, kh, kw = kernel
            od, oh, ow = outs
            wi = arg % kw
            hi = (arg // kw) % kh
            di = arg // (kw * kh)
            deps = di + stride[0] * np.arange(od).reshape(1, 1, od, 1, 1)
            rows = hi + stride[1] * np.arange(oh).reshape(1, 1, 1, oh, 1)
            cols = wi + stride[2] * np.arange(ow).reshape(1, 1, 1, 1, ow)
            np.add.at(gxp, (nn, cc, deps, rows, cols), g)
        if any(padding):
            sl = (slice(None), slice(None)) + tuple(
                slice(p, p + e) for p, e in zip(padding, spatial))
            return (gxp[sl],)
        return (gxp,)

    return _node(out, (x,), backward)


def max_pool2d(x: Tensor, kernel, stride=None, padding=(0, 0)) -> Tensor:
    return _max_pool(x, kernel, stride, padding, 2, "max_pool2d")


def max_pool3d(x: Tensor, kernel, stride=None, padding=(0, 0, 0)) -> Tensor:
    return _max_pool(x, kernel, stride, padding, 3, "max_pool3d")


def _avg_pool(x: Tensor, kernel, stride, dim: int, what: str) -> Tensor:
    if x.ndim != dim + 2:
        raise ConfigError(f"{what} expects a {dim + 2}-d input, got shape {x.shape}")
    kernel = _tuple_of(dim, kernel, f"{what} kernel")
    stride = kernel if stride is None else _tuple_of(dim, stride, f"{what} stride")
    spatial = x.shape[2:]
    outs = tuple(_out_extent(e, k, s, 0, what)
                 for e, k, s in zip(spatial, kernel, stride))
    col = _pool_windows(x.data, kernel, stride, outs)
    out = col.mean(axis=2)
    inv = 1.0 / float(np.prod(kernel))

    def backward(g: np.ndarray):
        gx = np.zeros_like(x.data)
        gshare = g * inv
        if dim == 2:
            kh, kw = kernel
            oh, ow = outs
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i:i + stride[0] * oh:stride[0],
                       j:j + stride[1] * ow:stride[1]] += gshare
        else:
            kd, kh, kw = kernel
            od, oh, ow = outs
            for a in range(kd):
                for i in range(kh):
                    for j in range(kw):
                        gx[:, :, a:a + stride[0] * od:stride[0],
                           i:i + stride[1] * oh:stride[1],
                           j:j + stride[2] * ow:stride[2]] += gshare
        return (gx,)

    return _node(out, (x,), backward)


def avg_pool2d(x: Tensor, kernel, stride=None) -> Tensor:
    return _avg_pool(x, kernel, stride, 2, "avg_pool2d")


def avg_pool3d(x: Tensor, kernel, stride=None) -> Tensor:
    return _avg_pool(x, kernel, stride, 3, "avg_pool3d")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over all spatial axes: N,C,... -> N,C."""
    if x.ndim < 3:
        raise ConfigError(f"global_avg_pool expects at least 3 dims, got shape {x.shape}")
    axes = tuple(range(2, x.ndim))
    out = x.data.mean(axis=axes)
    count = int(np.prod(x.shape[2:]))

    def backward(g: np.ndarray):
        expanded = g.reshape(g.shape + (1,) * (x.ndim - 2))
        return (np.broadcast_to(expanded, x.shape) / count,)

    return _node(out, (x,), backward)


# ---------------------------------------------------------------------------
# normalization


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Normalize per channel (axis 1) over batch and spatial axes.

    Training mode uses batch statistics and folds them into the running
    buffers (variance with the unbiased correction); eval mode reads the
    running buffers only.
    """
    if x.ndim < 2:
        raise ConfigError(f"batch_norm expects at least 2 dims, got shape {x.shape}")
    _same_dtype(x, gamma, beta)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ConfigError(f"batch_norm: scale/shift must have shape ({c},)")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)

    if training:
        count = x.size // c
        if count <= 1:
            raise InputError("batch_norm in training mode needs more than one value per channel")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (count / (count - 1))
    else:
        mean = running_mean
        var = running_var

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(bshape)) * inv.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def backward(g: np.ndarray):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        gs = g * gamma.data.reshape(bshape)
        if training:
            m1 = gs.mean(axis=axes).reshape(bshape)
            m2 = (gs * xhat).mean(axis=axes).reshape(bshape)
            gx = inv.reshape(bshape) * (gs - m1 - xhat * m2)
        else:
            gx = gs * inv.reshape(bshape)
        return gx, dgamma, dbeta

    return _node(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# pointwise, linear algebra, structure


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def backward(g: np.ndarray):
        return ((x.data > 0) * g,)

    return _node(out, (x,), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map of N,F rows by a K,F weight (plus optional K bias)."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ConfigError(f"linear expects 2-d input and weight, got {x.shape} and {weight.shape}")
    _same_dtype(*(t for t in (x, weight, bias) if t is not None))
    k, f = weight.shape
    if x.shape[1] != f:
        raise ConfigError(f"linear: input features {x.shape[1]} != weight features {f}")
    if bias is not None and bias.shape != (k,):
        raise ConfigError(f"linear: bias shape {bias.shape} != ({k},)")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g: np.ndarray):
        gx = g @ weight.data
        gw = g.T @ x.data
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return _node(out, parents, backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ConfigError("concat needs at least one tensor")
    _same_dtype(*tensors)
    ndim = tensors[0].ndim
    if axis < 0:
        axis += ndim
    if not 0 <= axis < ndim:
        raise ConfigError(f"concat: axis {axis} out of range for {ndim}-d tensors")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != ref[i] for i in range(ndim) if i != axis):
            raise ConfigError(f"concat: shape {t.shape} incompatible with {ref} along axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g: np.ndarray):
        return tuple(np.ascontiguousarray(part) for part in np.split(g, offsets, axis=axis))

    return _node(out, tuple(tensors), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    if a.shape != b.shape:
        raise ConfigError(f"add: shapes {a.shape} and {b.shape} differ")

    def backward(g: np.ndarray):
        return g, g

    return _node(a.data + b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    if a.shape != b.shape:
        raise ConfigError(f"mul: shapes {a.shape} and {b.shape} differ")

    def backward(g: np.ndarray):
        return g * b.data, g * a.data

    return _node(a.data * b.data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g: np.ndarray):
        return (g * s,)

    return _node(a.data * s, (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    def backward(g: np.ndarray):
        return (np.full_like(a.data, float(g)),)

    return _node(np.asarray(a.data.sum(), dtype=a.dtype), (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = a.data.reshape(shape)

    def backward(g: np.ndarray):
        return (g.reshape(a.shape),)

    return _node(out, (a,), backward)


# ---------------------------------------------------------------------------
# loss


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], max-stabilized."""
    if logits.ndim != 2:
        raise ConfigError(f"softmax_cross_entropy expects N,K logits, got shape {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise InputError(f"labels must have shape ({n},), got {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise InputError("labels must be integer class indices")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise InputError(f"label out of range [0, {k})")

    z = logits.data
    m = z.max(axis=1, keepdims=True)
    ez = np.exp(z - m)
    se = ez.sum(axis=1, keepdims=True)
    logp = z - m - np.log(se)
    loss = -logp[np.arange(n), labels].mean()

    def backward(g: np.ndarray):
        p = ez / se
        p[np.arange(n), labels] -= 1.0
        return (p * (float(g) / n),)

    return _node(np.asarray(loss, dtype=z.dtype), (logits,), backward)


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    """Plain-numpy row softmax (no graph), for prediction paths."""
    z = np.asarray(logits)
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=1, keepdims=True)


# Operator sugar on Tensor (defined here to avoid an import cycle).


def _tensor_add(self: Tensor, other) -> Tensor:
    if isinstance(other, Tensor):
        return add(self, other)
    return scale(self, 1.0) if other == 0 else add(self, Tensor(np.full(self.shape, other, self.dtype)))


def _tensor_mul(self: Tensor, other) -> Tensor:
    if isinstance(other, Tensor):
        return mul(self, other)
    return scale(self, float(other))


Tensor.__add__ = _tensor_add
Tensor.__mul__ = _tensor_mul
Tensor.__rmul__ = _tensor_mul
Tensor.sum = sum_all
Tensor.reshape = reshape
