"""Parameter store, Adam, and the binary checkpoint container.

Checkpoint layout (magic "IBTC1", all integers little-endian):

    bytes 0..4   magic b"IBTC1"
    u32          parameter count P
    P records:
        u16      path length L
        L bytes  utf-8 parameter path
        u8       ndim
        ndim*u32 shape extents
        n*f32    values   (n = product of extents, row-major)
        n*f32    Adam first moment m
        n*f32    Adam second moment v
    u64          global step counter

Round-trips are bit-exact: values are written straight from the float32
buffers without any conversion.
"""

from __future__ import annotations

import struct

import numpy as np

from .tensor import Tensor

MAGIC = b"IBTC1"

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class ParamStore:
    """Named parameters plus per-parameter Adam state and a step counter."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count: int = 0

    def add(self, path: str, tensor: Tensor) -> None:
        if path in self.params:
            raise ValueError(f"duplicate parameter path {path!r}")
        self.params[path] = tensor
        self.m[path] = np.zeros_like(tensor.data)
        self.v[path] = np.zeros_like(tensor.data)

    def add_all(self, mapping: dict) -> None:
        for k, t in mapping.items():
            self.add(k, t)

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.grad = None

    def trainable(self, prefixes=None) -> list:
        """Parameter paths with requires_grad, optionally under prefixes."""
        paths = [k for k, t in self.params.items() if t.requires_grad]
        if prefixes is not None:
            paths = [k for k in paths if any(k.startswith(p) for p in prefixes)]
        return paths

    def copy(self) -> "ParamStore":
        """Deep copy (used for published preview snapshots)."""
        out = ParamStore()
        for k, t in self.params.items():
            nt = Tensor(t.data.copy(), requires_grad=t.requires_grad)
            out.params[k] = nt
            out.m[k] = self.m[k].copy()
            out.v[k] = self.v[k].copy()
        out.step_count = self.step_count
        return out

    def freeze(self, prefix: str) -> None:
        for k, t in self.params.items():
            if k.startswith(prefix):
                t.requires_grad = False


def adam_step(store: ParamStore, lr: float, beta1: float = ADAM_BETA1,
              beta2: float = ADAM_BETA2, eps: float = ADAM_EPS,
              lr_overrides: dict | None = None, paths=None) -> None:
    """One bias-corrected Adam update over the trainable parameters.

    Every selected parameter must carry a gradient; grads are cleared
    afterwards and the step counter advances by exactly one. `lr_overrides`
    maps path prefixes to learning rates (longest matching prefix wins).
    """
    if paths is None:
        paths = store.trainable()
    missing = [k for k in paths if store.params[k].grad is None]
    if missing:
        raise ValueError(f"adam_step: missing gradient for {missing[:3]}")
    t = store.step_count + 1
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for k in paths:
        p = store.params[k]
        g = p.grad
        rate = lr
        if lr_overrides:
            best = -1
            for pref, r in lr_overrides.items():
                if k.startswith(pref) and len(pref) > best:
                    best = len(pref)
                    rate = r
        m = store.m[k]
        v = store.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= rate * (m / bc1) / (np.sqrt(v / bc2) + eps)
    store.step_count = t
    for k in paths:
        store.params[k].grad = None


def save_checkpoint(store: ParamStore, path: str) -> None:
    keys = sorted(store.params)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(keys)))
        for k in keys:
            raw = k.encode("utf-8")
            t = store.params[k]
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", t.data.ndim))
            for d in t.data.shape:
                f.write(struct.pack("<I", d))
            f.write(t.data.astype("<f4", copy=False).tobytes())
            f.write(store.m[k].astype("<f4", copy=False).tobytes())
            f.write(store.v[k].astype("<f4", copy=False).tobytes())
        f.write(struct.pack("<Q", store.step_count))


def load_checkpoint(path: str) -> ParamStore:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:5] != MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {blob[:5]!r}")
    off = 5
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    store = ParamStore()
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", blob, off)
        off += 2
        key = blob[off : off + ln].decode("utf-8")
        off += ln
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arrs = []
        for _ in range(3):
            a = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(shape)
            arrs.append(a.astype(np.float32))
            off += 4 * n
        store.params[key] = Tensor(arrs[0], requires_grad=True)
        store.m[key] = arrs[1]
        store.v[key] = arrs[2]
    (store.step_count,) = struct.unpack_from("<Q", blob, off)
    return store
