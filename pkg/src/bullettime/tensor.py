"""Reverse-mode autodiff on float32 numpy arrays.

Every trainable computation in this package runs through :class:`Tensor`.
The engine is deliberately small: elementwise arithmetic with numpy-style
broadcasting, 2-D matmul, reductions, cumulative sums, and a handful of
image ops (conv2d, bilinear up/down sampling, row scatter) with hand-written
backward passes. Graphs are built eagerly; ``backward()`` on a scalar walks
the tape in reverse topological order and accumulates gradients on every
node that requires them.
"""

from __future__ import annotations

import contextlib

import numpy as np

_GRAD_ENABLED = True
DTYPE = np.float32


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (forward-only evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the engine's float width. Production code runs
    float32; gradient-check oracles run the same graph in float64 so the
    finite-difference baseline is trustworthy."""
    global DTYPE
    prev = DTYPE
    DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        DTYPE = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad over the axes that broadcasting introduced for `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _make(data, parents, backward_fn) -> "Tensor":
        track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out = Tensor(data, requires_grad=track)
        if track:
            out._parents = tuple(parents)
            out._backward = backward_fn
        return out

    @staticmethod
    def as_tensor(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accum(self, grad: np.ndarray, own: bool = False) -> None:
        """Add into the gradient buffer. own=True promises `grad` was built
        fresh for this call, so it can be adopted without copying."""
        if self.grad is None:
            if own and grad.dtype == self.data.dtype \
                    and grad.shape == self.data.shape:
                self.grad = grad
            else:
                self.grad = grad.astype(self.data.dtype, copy=True)
        else:
            self.grad += grad

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- backward -------------------------------------------------------------

    def backward(self) -> None:
        """Populate .grad on every requires_grad ancestor of a scalar loss."""
        if self.data.size != 1:
            raise ValueError(
                f"backward() needs a scalar loss, got shape {self.data.shape}"
            )
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accum(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- elementwise arithmetic -----------------------------------------------

    def __add__(self, other):
        other = Tensor.as_tensor(other)

        def bwd(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g, other.data.shape))

        return Tensor._make(self.data + other.data, (self, other), bwd)

    __radd__ = __add__

    def __neg__(self):
        def bwd(g):
            self._accum(-g)

        return Tensor._make(-self.data, (self,), bwd)

    def __sub__(self, other):
        other = Tensor.as_tensor(other)

        def bwd(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(-g, other.data.shape))

        return Tensor._make(self.data - other.data, (self, other), bwd)

    def __rsub__(self, other):
        return Tensor.as_tensor(other) - self

    def __mul__(self, other):
        other = Tensor.as_tensor(other)

        def bwd(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g * other.data, self.data.shape),
                            own=True)
            if other.requires_grad:
                other._accum(_unbroadcast(g * self.data, other.data.shape),
                             own=True)

        return Tensor._make(self.data * other.data, (self, other), bwd)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor.as_tensor(other)
        out_data = self.data / other.data

        def bwd(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g / other.data, self.data.shape))
            if other.requires_grad:
                other._accum(
                    _unbroadcast(-g * out_data / other.data, other.data.shape)
                )

        return Tensor._make(out_data, (self, other), bwd)

    def __rtruediv__(self, other):
        return Tensor.as_tensor(other) / self

    def __pow__(self, p: float):
        out_data = self.data ** p

        def bwd(g):
            self._accum(g * p * self.data ** (p - 1))

        return Tensor._make(out_data, (self,), bwd)

    def exp(self):
        out_data = np.exp(self.data)

        def bwd(g):
            self._accum(g * out_data)

        return Tensor._make(out_data, (self,), bwd)

    def log(self):
        def bwd(g):
            self._accum(g / self.data)

        return Tensor._make(np.log(self.data), (self,), bwd)

    def sqrt(self):
        out_data = np.sqrt(self.data)

        def bwd(g):
            self._accum(g * 0.5 / np.maximum(out_data, 1e-12))

        return Tensor._make(out_data, (self,), bwd)

    def relu(self):
        mask = self.data > 0

        def bwd(g):
            self._accum(g * mask, own=True)

        return Tensor._make(self.data * mask, (self,), bwd)

    def softplus(self):
        # log(1 + e^x), evaluated stably; derivative is sigmoid(x)
        out_data = np.logaddexp(0.0, self.data).astype(self.data.dtype)

        def bwd(g):
            self._accum(g / (1.0 + np.exp(-self.data)))

        return Tensor._make(out_data, (self,), bwd)

    def sigmoid(self):
        out_data = 1.0 / (1.0 + np.exp(-self.data))

        def bwd(g):
            self._accum(g * out_data * (1.0 - out_data))

        return Tensor._make(out_data, (self,), bwd)

    # -- linear algebra ---------------------------------------------------------

    def matmul(self, other: "Tensor") -> "Tensor":
        other = Tensor.as_tensor(other)
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise ValueError(
                f"matmul expects 2-D operands, got {self.data.shape} @ {other.data.shape}"
            )
        if self.data.shape[1] != other.data.shape[0]:
            raise ValueError(
                f"matmul inner dims disagree: {self.data.shape} @ {other.data.shape}"
            )

        def bwd(g):
            if self.requires_grad:
                self._accum(g @ other.data.T, own=True)
            if other.requires_grad:
                other._accum(self.data.T @ g, own=True)

        return Tensor._make(self.data @ other.data, (self, other), bwd)

    __matmul__ = matmul

    # -- reductions / shape ------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def bwd(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accum(np.broadcast_to(g, self.data.shape).copy(), own=True)

        return Tensor._make(out_data, (self,), bwd)

    def sum_stable(self, axis=None, keepdims: bool = False):
        """Sum with float64 accumulation (order-stable to the output's ULP)."""
        out_data = self.data.sum(axis=axis, keepdims=keepdims,
                                 dtype=np.float64).astype(self.data.dtype)

        def bwd(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accum(np.broadcast_to(g, self.data.shape).copy(), own=True)

        return Tensor._make(out_data, (self,), bwd)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[a] for a in np.atleast_1d(axis)]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape

        def bwd(g):
            self._accum(g.reshape(old))

        return Tensor._make(self.data.reshape(shape), (self,), bwd)

    def transpose(self, *axes):
        if not axes:
            axes = tuple(reversed(range(self.data.ndim)))
        inv = np.argsort(axes)

        def bwd(g):
            self._accum(g.transpose(inv))

        return Tensor._make(self.data.transpose(axes), (self,), bwd)

    def __getitem__(self, idx):
        """Basic slicing only (views with a fixed index expression)."""
        out_data = self.data[idx]

        def bwd(g):
            buf = np.zeros_like(self.data)
            buf[idx] = g
            self._accum(buf)

        return Tensor._make(out_data, (self,), bwd)

    def cumsum(self, axis: int):
        def bwd(g):
            self._accum(np.flip(np.flip(g, axis).cumsum(axis=axis), axis))

        return Tensor._make(self.data.cumsum(axis=axis, dtype=self.data.dtype), (self,), bwd)


# -- free functions ------------------------------------------------------------


def concat(tensors: list, axis: int = 0) -> Tensor:
    tensors = [Tensor.as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, a, b in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(a, b)
                t._accum(g[tuple(sl)])

    return Tensor._make(
        np.concatenate([t.data for t in tensors], axis=axis), tensors, bwd
    )


def stack(tensors: list, axis: int = 0) -> Tensor:
    return concat([t.reshape(*_expanded(t.shape, axis)) for t in tensors], axis=axis)


def _expanded(shape, axis):
    s = list(shape)
    s.insert(axis if axis >= 0 else len(s) + axis + 1, 1)
    return s


def masked_mean_var(h: Tensor, maskf: np.ndarray) -> Tensor:
    """Masked mean and variance across views, fused.

    h is (K, P, H); maskf is (K, P, 1) with 0/1 entries. Returns (P, 2H) as
    [mean | var], where both statistics run over the valid views per point
    (empty slices produce zeros). Single fused op: the unfused graph (nine
    K*P*H-sized nodes) dominates training step time.
    """
    h = Tensor.as_tensor(h)
    k, p, width = h.data.shape
    count = np.maximum(maskf.sum(axis=0), 1.0)        # (P, 1)
    hm = h.data * maskf
    # float64 accumulation across views keeps the pooling bit-stable under
    # reference-view permutation
    mean = (hm.sum(axis=0, dtype=np.float64) / count).astype(h.data.dtype)
    diff = (h.data - mean) * maskf
    var = ((diff * diff).sum(axis=0, dtype=np.float64) / count).astype(
        h.data.dtype
    )
    out_data = np.concatenate([mean, var], axis=1)

    def bwd(g):
        gm = g[:, :width] / count
        gv = g[:, width:] / count
        # d var/d h_k = 2 m_k (h_k - mean)/count; the mean-shift term
        # cancels because sum_k m_k (h_k - mean) = 0
        dh = maskf * (gm + 2.0 * gv * diff)
        h._accum(dh, own=True)

    return Tensor._make(out_data, (h,), bwd)


def pack_views(parts: list) -> Tensor:
    """Assemble per-view rows into one (K*P, D) matrix.

    `parts` is a list of K lists, each holding (P, d_i) tensors to place
    side by side; views stack vertically in order. One op instead of the
    K * len(segments) concat/stack chain.
    """
    k = len(parts)
    segs = [Tensor.as_tensor(t) for t in parts[0]]
    widths = [t.data.shape[1] for t in segs]
    offs = np.cumsum([0] + widths)
    p = segs[0].data.shape[0]
    d = int(offs[-1])
    out_data = np.empty((k * p, d), dtype=DTYPE)
    tensors = []
    for vi, row in enumerate(parts):
        for si, t in enumerate(row):
            t = Tensor.as_tensor(t)
            tensors.append(t)
            out_data[vi * p:(vi + 1) * p, offs[si]:offs[si + 1]] = t.data

    def bwd(g):
        i = 0
        for vi in range(k):
            for si in range(len(widths)):
                t = tensors[i]
                if t.requires_grad:
                    t._accum(g[vi * p:(vi + 1) * p, offs[si]:offs[si + 1]])
                i += 1

    return Tensor._make(out_data, tensors, bwd)


def repeat_rows(t: Tensor, k: int) -> Tensor:
    """Stack a (P, D) tensor vertically k times -> (k*P, D)."""
    p = t.data.shape[0]

    def bwd(g):
        t._accum(g.reshape(k, p, -1).sum(axis=0).reshape(t.data.shape))

    return Tensor._make(np.tile(t.data, (k, 1)), (t,), bwd)


def where_const(cond: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Select a/b by a constant boolean mask (no gradient through cond)."""
    a = Tensor.as_tensor(a)
    b = Tensor.as_tensor(b)
    cond = np.asarray(cond, dtype=bool)

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * cond, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * (~cond), b.data.shape))

    return Tensor._make(np.where(cond, a.data, b.data), (a, b), bwd)


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlate a (C,H,W) or (N,C,H,W) map with (Cout,C,k,k) kernels,
    zero padding.

    Stride must be 1 or 2, k odd. Output extent is
    H' = floor((H + 2*pad - k)/stride) + 1 and likewise W'.
    """
    x = Tensor.as_tensor(x)
    kernels = Tensor.as_tensor(kernels)
    squeeze = x.data.ndim == 3
    x4 = x.reshape(1, *x.data.shape) if squeeze else x
    n, c, h, w = x4.data.shape
    cout, cin, k, k2 = kernels.data.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"kernel must be square with odd size, got {k}x{k2}")
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    if cin != c:
        raise ValueError(f"kernel expects {cin} input channels, map has {c}")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(
            f"conv2d output extent {ho}x{wo} is non-positive "
            f"(input {h}x{w}, k={k}, stride={stride}, pad={pad})"
        )

    xp = (np.pad(x4.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
          if pad else x4.data)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (N, C, Ho, Wo, k, k)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    wmat = kernels.data.reshape(cout, c * k * k)
    out_data = (cols @ wmat.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    def bwd(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        if kernels.requires_grad:
            kernels._accum((g2.T @ cols).reshape(kernels.data.shape))
        if x4.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, c, k, k)
            dxp = np.zeros_like(xp)
            for ki in range(k):
                for kj in range(k):
                    dxp[
                        :, :,
                        ki : ki + stride * ho : stride,
                        kj : kj + stride * wo : stride,
                    ] += dcols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
            if pad:
                dxp = dxp[:, :, pad:-pad, pad:-pad]
            x4._accum(dxp)

    out = Tensor._make(out_data, (x4, kernels), bwd)
    return out.reshape(cout, ho, wo) if squeeze else out


def _upsample_plan(n_in: int, factor: int):
    """Source indices/weights for 1-D align-corners-false bilinear resize."""
    dst = np.arange(n_in * factor, dtype=DTYPE)
    src = (dst + 0.5) / factor - 0.5
    lo = np.clip(np.floor(src), 0, n_in - 1).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    t = np.clip(src - lo, 0.0, 1.0).astype(DTYPE)
    return lo, hi, t


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    """Resize (..., H, W) to (..., factor*H, factor*W), align_corners=False."""
    x = Tensor.as_tensor(x)
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return x * 1.0
    h, w = x.data.shape[-2:]
    lead = x.data.shape[:-2]
    ylo, yhi, ty = _upsample_plan(h, factor)
    xlo, xhi, tx = _upsample_plan(w, factor)
    ty_col = ty[:, None]
    tx_row = tx[None, :]

    rows = x.data[..., ylo, :] * (1 - ty_col) + x.data[..., yhi, :] * ty_col
    out_data = rows[..., xlo] * (1 - tx_row) + rows[..., xhi] * tx_row

    lead_idx = tuple(slice(None) for _ in lead)

    def bwd(g):
        drows = np.zeros((*lead, h * factor, w), dtype=x.data.dtype)
        np.add.at(drows, lead_idx + (slice(None), xlo), g * (1 - tx_row))
        np.add.at(drows, lead_idx + (slice(None), xhi), g * tx_row)
        dx = np.zeros_like(x.data)
        np.add.at(dx, lead_idx + (ylo, slice(None)), drows * (1 - ty_col))
        np.add.at(dx, lead_idx + (yhi, slice(None)), drows * ty_col)
        x._accum(dx)

    return Tensor._make(out_data, (x,), bwd)


def bilinear_sample(img: Tensor, xs: np.ndarray, ys: np.ndarray) -> Tensor:
    """Sample a (C,H,W) map at continuous index coords, clamped to edges.

    xs, ys are (P,) arrays in index space (0..W-1 / 0..H-1); they carry no
    gradient. Returns (P, C).
    """
    img = Tensor.as_tensor(img)
    c, h, w = img.data.shape
    xs = np.clip(np.asarray(xs, dtype=img.data.dtype), 0.0, w - 1.0)
    ys = np.clip(np.asarray(ys, dtype=img.data.dtype), 0.0, h - 1.0)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(np.int64)
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0)[:, None]
    fy = (ys - y0)[:, None]
    w00 = (1 - fx) * (1 - fy)
    w01 = fx * (1 - fy)
    w10 = (1 - fx) * fy
    w11 = fx * fy

    flat = np.ascontiguousarray(img.data.reshape(c, h * w).T)  # (HW, C)
    i00 = y0 * w + x0
    i01 = y0 * w + x1
    i10 = y1 * w + x0
    i11 = y1 * w + x1
    out_data = (
        flat[i00] * w00
        + flat[i01] * w01
        + flat[i10] * w10
        + flat[i11] * w11
    ).astype(img.data.dtype)

    def bwd(g):
        # scatter-add via one bincount over (cell, channel) linear indices;
        # much faster than np.add.at for the training-sized point counts
        ch = np.arange(c, dtype=np.int64)[None, :]
        lin = np.concatenate(
            [(i[:, None] * c + ch).ravel() for i in (i00, i01, i10, i11)]
        )
        vals = np.concatenate(
            [(g * wgt).ravel() for wgt in (w00, w01, w10, w11)]
        )
        dflat = np.bincount(lin, weights=vals, minlength=h * w * c)
        img._accum(dflat.reshape(h * w, c).T.reshape(c, h, w).astype(img.data.dtype))

    return Tensor._make(out_data, (img,), bwd)


def scatter_rows(base: Tensor, idx: np.ndarray, rows: Tensor) -> Tensor:
    """Write `rows` into `base` at row positions `idx` (distinct indices)."""
    base = Tensor.as_tensor(base)
    rows = Tensor.as_tensor(rows)
    idx = np.asarray(idx, dtype=np.int64)
    out_data = base.data.copy()
    out_data[idx] = rows.data

    def bwd(g):
        if rows.requires_grad:
            rows._accum(g[idx])
        if base.requires_grad:
            gb = g.copy()
            gb[idx] = 0.0
            base._accum(gb)

    return Tensor._make(out_data, (base, rows), bwd)


def masked_softmax(logits: Tensor, valid: np.ndarray, axis: int = 0) -> Tensor:
    """Softmax over `axis` with invalid entries forced to weight zero.

    All-invalid slices come out as all-zero weights.
    """
    valid = np.asarray(valid, dtype=np.float32)
    shifted = logits * valid + Tensor((valid - 1.0) * 1e9)
    # shift by the (detached) max: exact for softmax, keeps exp in range
    m = shifted.data.max(axis=axis, keepdims=True)
    e = (shifted - Tensor(m)).exp() * valid
    denom = e.sum_stable(axis=axis, keepdims=True) + 1e-12
    return e / denom
