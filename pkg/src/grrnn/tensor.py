"""Minimal define-by-run reverse-mode differentiation.

Only the operations the writer-identification graph needs are provided.
Feature maps are laid out ``(batch, height, width, channels)``; every op also
accepts a single unbatched ``(height, width, channels)`` map where that makes
sense.

Graph recording happens only while a :class:`Tape` is active::

    with Tape() as tape:
        y = relu(conv3x3(x, w, b))
        loss = sum_all(y)
    tape.backward(loss)
"""

import threading

import numpy as np
from scipy.linalg import blas

from .errors import DegenerateStatisticsError, DimensionError

_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class SwitchRecorder:
    """Collects the discrete branch choices of relu and maxpool.

    Two forward passes with equal ``signature()`` lie in the same linear
    piece of every kink, which is what finite differences need.
    """

    def __init__(self):
        self.patterns = []

    def __enter__(self):
        _local.switches = self
        return self

    def __exit__(self, *exc):
        _local.switches = None

    def signature(self):
        return b"".join(self.patterns)


def _record_switch(choice):
    rec = getattr(_local, "switches", None)
    if rec is not None:
        rec.patterns.append(np.packbits(choice).tobytes() if choice.dtype == bool
                            else choice.tobytes())


class Tensor:
    """An array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"


class _Record:
    __slots__ = ("inputs", "output", "backward", "op")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered log of executed operations, replayed in reverse by backward."""

    def __init__(self):
        self.records = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse
            stack.remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def backward(self, loss, grad=None):
        """Populate ``.grad`` on every tensor reachable from ``loss``.

        Leaf gradients accumulate; call ``zero_grad`` between steps.
        """
        if grad is None:
            if loss.size != 1:
                raise ValueError("backward without an explicit grad needs a scalar loss")
            grad = np.ones_like(loss.data)
        loss.grad = np.asarray(grad, dtype=loss.dtype).reshape(loss.shape)
        for rec in reversed(self.records):
            g = rec.output.grad
            if g is None:
                continue
            grads = rec.backward(g)
            for t, gi in zip(rec.inputs, grads):
                if gi is None or not t.requires_grad:
                    continue
                if t.grad is None:
                    t.grad = np.array(gi, dtype=t.dtype, copy=True)
                else:
                    t.grad += gi


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op, out_data, inputs, backward):
    """Build the op's output tensor and log it on the active tape."""
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.records.append(_Record(op, inputs, out, backward))
    return out


def _check_same_shape(op, a, b):
    if a.shape != b.shape:
        for i, (m, n) in enumerate(zip(a.shape, b.shape)):
            if m != n:
                raise DimensionError(op, i, m, n)
        raise DimensionError(op, "rank", len(a.shape), len(b.shape))


def _gemm_acc(a, b, c):
    """``c += a @ b`` in place for C-ordered 2-d arrays, via BLAS beta=1."""
    gemm = blas.get_blas_funcs("gemm", (a, b, c))
    res = gemm(1.0, b.T, a.T, beta=1.0, c=c.T, overwrite_c=1)
    if not np.shares_memory(res, c):  # BLAS wrapper had to copy
        c[...] = res.T


def _colsum(a2):
    """Column sums of a 2-d array; a gemv is much faster than sum(axis=0)."""
    return np.ones(a2.shape[0], dtype=a2.dtype) @ a2


def _batched(x, op, rank=4):
    """View a single map as a batch of one; returns (array, squeezed?)."""
    if x.ndim == rank - 1:
        return x[None], True
    if x.ndim != rank:
        raise DimensionError(op, "rank", f"{rank - 1} or {rank}", x.ndim)
    return x, False


# --------------------------------------------------------------------------
# convolution / pooling / normalisation


def _im2col3x3(x):
    b, h, w, c = x.shape
    xp = np.zeros((b, h + 2, w + 2, c), dtype=x.dtype)
    xp[:, 1:-1, 1:-1, :] = x
    cols = np.empty((b, h, w, 3, 3, c), dtype=x.dtype)
    for ky in range(3):
        for kx in range(3):
            cols[:, :, :, ky, kx, :] = xp[:, ky:ky + h, kx:kx + w, :]
    return cols.reshape(b * h * w, 9 * c)


def _col2im3x3(dcols, shape):
    b, h, w, c = shape
    dcols = dcols.reshape(b, h, w, 3, 3, c)
    dxp = np.zeros((b, h + 2, w + 2, c), dtype=dcols.dtype)
    for ky in range(3):
        for kx in range(3):
            dxp[:, ky:ky + h, kx:kx + w, :] += dcols[:, :, :, ky, kx, :]
    return dxp[:, 1:-1, 1:-1, :]


def _pad_flat(x):
    """Zero-pad each map by one pixel and flatten all positions into rows.

    A margin of ``wp + 1`` rows on both ends lets every 3x3 tap be read as
    one contiguous row slice at a fixed offset.
    """
    b, h, w, c = x.shape
    hp, wp = h + 2, w + 2
    margin = wp + 1
    buf = np.zeros((b * hp * wp + 2 * margin, c), dtype=x.dtype)
    buf[margin:margin + b * hp * wp].reshape(b, hp, wp, c)[:, 1:-1, 1:-1] = x
    return buf, margin


def _tap_offsets(wp, margin):
    return [margin + (ky - 1) * wp + (kx - 1) for ky in range(3) for kx in range(3)]


def conv3x3(x, weight, bias):
    """3x3 convolution, stride 1, zero padding 1.

    ``weight`` is ``3 x 3 x c_in x c_out``; output keeps the spatial size.
    Narrow inputs go through im2col; wider ones through the padded flat
    buffer, where output rows on the padding ring are computed and dropped.
    """
    x, weight, bias = _wrap(x), _wrap(weight), _wrap(bias)
    xd, squeeze = _batched(x.data, "conv3x3")
    if weight.data.ndim != 4 or weight.shape[:2] != (3, 3):
        raise DimensionError("conv3x3", "kernel", "3x3xC_inxC_out", weight.shape)
    c_in, c_out = weight.shape[2], weight.shape[3]
    if xd.shape[-1] != c_in:
        raise DimensionError("conv3x3", "channels", c_in, xd.shape[-1])
    if bias.shape != (c_out,):
        raise DimensionError("conv3x3", "bias", (c_out,), bias.shape)
    b, h, w, _ = xd.shape
    if h < 1 or w < 1:
        raise DimensionError("conv3x3", "spatial", ">=1", (h, w))
    in_shape = xd.shape
    wd = weight.data

    if c_in < 8:
        cols = _im2col3x3(xd)
        wmat = wd.reshape(9 * c_in, c_out)
        out = (cols @ wmat + bias.data).reshape(b, h, w, c_out)

        def backward(g):
            g2 = (g[None] if squeeze else g).reshape(-1, c_out)
            gw = (cols.T @ g2).reshape(weight.shape) if weight.requires_grad else None
            gb = _colsum(g2) if bias.requires_grad else None
            gx = None
            if x.requires_grad:
                gx = _col2im3x3(g2 @ wmat.T, in_shape)
                if squeeze:
                    gx = gx[0]
            return gx, gw, gb
    else:
        buf, margin = _pad_flat(xd)
        hp, wp = h + 2, w + 2
        n_rows = b * hp * wp
        offsets = _tap_offsets(wp, margin)
        taps = wd.reshape(9, c_in, c_out)
        acc = np.zeros((n_rows, c_out), dtype=np.result_type(buf, taps))
        for k, off in enumerate(offsets):
            _gemm_acc(buf[off:off + n_rows], taps[k], acc)
        out = acc.reshape(b, hp, wp, c_out)[:, 1:-1, 1:-1] + bias.data

        def backward(g):
            g = g[None] if squeeze else g
            gb = _colsum(g.reshape(-1, c_out)) if bias.requires_grad else None
            gfull = np.zeros((b, hp, wp, c_out), dtype=g.dtype)
            gfull[:, 1:-1, 1:-1] = g
            gfull = gfull.reshape(n_rows, c_out)
            gw = None
            if weight.requires_grad:
                gw = np.empty_like(taps)
                for k, off in enumerate(offsets):
                    gw[k] = buf[off:off + n_rows].T @ gfull
                gw = gw.reshape(weight.shape)
            gx = None
            if x.requires_grad:
                gbuf = np.zeros_like(buf)
                for k, off in enumerate(offsets):
                    _gemm_acc(gfull, taps[k].T, gbuf[off:off + n_rows])
                gx = gbuf[margin:margin + n_rows].reshape(b, hp, wp, c_in)[:, 1:-1, 1:-1]
                if squeeze:
                    gx = gx[0]
            return gx, gw, gb

    return _make("conv3x3", out[0] if squeeze else out, (x, weight, bias), backward)


def maxpool2x2(x):
    """2x2 max pooling with stride 2.

    Ties route the gradient to the first cell in row-major order.
    """
    x = _wrap(x)
    xd, squeeze = _batched(x.data, "maxpool2x2")
    b, h, w, c = xd.shape
    if h % 2:
        raise DimensionError("maxpool2x2", "height", "even", h)
    if w % 2:
        raise DimensionError("maxpool2x2", "width", "even", w)
    # window cells in row-major order: (0,0) (0,1) (1,0) (1,1)
    cells = [xd[:, dy::2, dx::2] for dy in (0, 1) for dx in (0, 1)]
    top = np.maximum(cells[0], cells[1])
    bottom = np.maximum(cells[2], cells[3])
    out = np.maximum(top, bottom)
    idx = np.where(bottom > top,
                   2 + (cells[3] > cells[2]),
                   (cells[1] > cells[0]).astype(np.int8)).astype(np.int8)
    _record_switch(idx)

    def backward(g):
        g = g[None] if squeeze else g
        gx = np.zeros((b, h, w, c), dtype=g.dtype)
        for k, (dy, dx) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
            gx[:, dy::2, dx::2] = g * (idx == k)
        return (gx[0] if squeeze else gx,)

    return _make("maxpool2x2", out[0] if squeeze else out, (x,), backward)


def batchnorm(x, gamma, beta, running_mean, running_var, training,
              momentum=0.1, eps=1e-5):
    """Per-channel normalisation over every axis but the last.

    ``running_mean``/``running_var`` are plain arrays updated in place in
    training mode (unbiased variance, PyTorch convention).
    """
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    c = x.shape[-1]
    for name, t in (("gamma", gamma), ("beta", beta)):
        if t.shape != (c,):
            raise DimensionError("batchnorm", name, (c,), t.shape)
    x2 = x.data.reshape(-1, c)
    m = x2.shape[0]

    if training:
        if m < 2:
            raise DegenerateStatisticsError(
                f"batchnorm: train mode needs >= 2 values per channel, got {m}")
        mean = _colsum(x2) / m
        centered = x2 - mean
        var = _colsum(centered * centered) / m
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (m / (m - 1))
    else:
        mean = running_mean.astype(x.dtype, copy=False)
        var = running_var.astype(x.dtype, copy=False)
        centered = x2 - mean
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype, copy=False)
    xhat = centered
    xhat *= inv_std
    out = xhat * gamma.data
    out += beta.data

    def backward(g):
        g2 = g.reshape(-1, c)
        sum_g = _colsum(g2)
        sum_gx = _colsum(g2 * xhat)
        gx = None
        if x.requires_grad:
            if training:
                # (gamma*inv_std/m) * (m*g - sum(g) - xhat*sum(g*xhat))
                gx = xhat * sum_gx
                gx += sum_g
                gx *= -1.0 / m
                gx += g2
                gx *= gamma.data * inv_std
            else:
                gx = g2 * (gamma.data * inv_std)
            gx = gx.reshape(x.shape)
        return (gx,
                sum_gx if gamma.requires_grad else None,
                sum_g if beta.requires_grad else None)

    return _make("batchnorm", out.reshape(x.shape), (x, gamma, beta), backward)


def gap(x):
    """Global average pooling of ``(..., h, w, c)`` down to ``(..., c)``."""
    x = _wrap(x)
    if x.data.ndim < 3:
        raise DimensionError("gap", "rank", ">=3", x.data.ndim)
    h, w = x.shape[-3], x.shape[-2]
    if h < 1 or w < 1:
        raise DimensionError("gap", "spatial", ">=1", (h, w))
    out = x.data.mean(axis=(-3, -2))

    def backward(g):
        gx = np.broadcast_to(g[..., None, None, :] / (h * w), x.shape)
        return (gx,)

    return _make("gap", out, (x,), backward)


def linear(x, weight, bias=None):
    """Affine map ``x @ weight + bias`` over the last axis; weight is n x m."""
    x, weight = _wrap(x), _wrap(weight)
    if weight.data.ndim != 2:
        raise DimensionError("linear", "weight rank", 2, weight.data.ndim)
    n, m = weight.shape
    if x.shape[-1] != n:
        raise DimensionError("linear", "features", n, x.shape[-1])
    inputs = (x, weight)
    out = x.data @ weight.data
    if bias is not None:
        bias = _wrap(bias)
        if bias.shape != (m,):
            raise DimensionError("linear", "bias", (m,), bias.shape)
        out = out + bias.data
        inputs = (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, m)
        x2 = x.data.reshape(-1, n)
        gx = (g @ weight.data.T) if x.requires_grad else None
        gw = (x2.T @ g2) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = _colsum(g2) if bias.requires_grad else None
        return gx, gw, gb

    return _make("linear", out, inputs, backward)


# --------------------------------------------------------------------------
# pointwise family


def relu(x):
    x = _wrap(x)
    mask = x.data > 0
    _record_switch(mask)
    return _make("relu", x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x):
    x = _wrap(x)
    # tanh form never overflows
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x):
    x = _wrap(x)
    t = np.tanh(x.data)
    return _make("tanh", t, (x,), lambda g: (g * (1.0 - t * t),))


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_same_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_same_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    """Hadamard product."""
    a, b = _wrap(a), _wrap(b)
    _check_same_shape("mul", a, b)
    return _make("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x, c):
    x = _wrap(x)
    return _make("scale", x.data * c, (x,), lambda g: (g * c,))


def one_minus(x):
    x = _wrap(x)
    return _make("one_minus", 1.0 - x.data, (x,), lambda g: (-g,))


def add_bias(x, b):
    """``x + b`` with ``b`` broadcast over the leading axes."""
    x, b = _wrap(x), _wrap(b)
    if b.shape != x.shape[-1:]:
        raise DimensionError("add_bias", "features", x.shape[-1:], b.shape)

    def backward(g):
        return g, g.reshape(-1, b.size).sum(axis=0)

    return _make("add_bias", x.data + b.data, (x, b), backward)


def sequence_sum(xs):
    """Sum of a list of same-shape tensors."""
    xs = [_wrap(x) for x in xs]
    if not xs:
        raise DimensionError("sequence_sum", "length", ">=1", 0)
    out = xs[0].data.copy()
    for x in xs[1:]:
        _check_same_shape("sequence_sum", xs[0], x)
        out += x.data
    return _make("sequence_sum", out, tuple(xs), lambda g: (g,) * len(xs))


def sum_all(x):
    x = _wrap(x)
    return _make("sum_all", np.asarray(x.data.sum()), (x,),
                 lambda g: (np.broadcast_to(g, x.shape),))


def getitem(x, index):
    """Basic (slice) indexing; the gradient is scattered back into place."""
    x = _wrap(x)
    out = x.data[index]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        return (gx,)

    return _make("getitem", np.ascontiguousarray(out), (x,), backward)


def concat(xs, axis):
    xs = [_wrap(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make("concat", out, tuple(xs), backward)


def zeros(shape, dtype=np.float64):
    return Tensor(np.zeros(shape, dtype=dtype))
