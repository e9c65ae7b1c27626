"""Named parameter container, Adam optimiser and checkpoint serialisation.

Checkpoint layout (all integers little-endian)::

    magic    8 bytes   b"CXPARAM\\0"
    version  u32       currently 1
    count    u32       number of tensors
    then per tensor, in sorted name order:
      name_len u16, name utf-8 bytes
      dtype    u8      1 = float64
      ndim     u8
      dims     u32 * ndim
      data     float64 little-endian, C order
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import Tensor

MAGIC = b"CXPARAM\0"
VERSION = 1
_DTYPE_F64 = 1


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


@dataclass
class ParamStore:
    """All trainable tensors of a model, keyed by unique dotted names."""

    tensors: dict = field(default_factory=dict)
    opt_state: dict = field(default_factory=dict)

    def add(self, name: str, value) -> Tensor:
        if name in self.tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        t.zero_grad()
        self.tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self, prefix: str = "") -> list:
        return sorted(n for n in self.tensors if n.startswith(prefix))

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def reset_optimizer(self) -> None:
        self.opt_state.clear()

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name in self.names():
            out.add(name, self.tensors[name].data.copy())
        return out

    def load_values(self, other: "ParamStore", prefix: str = "") -> None:
        for name in other.names(prefix):
            self.tensors[name].data[...] = other.tensors[name].data

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<II", VERSION, len(self.tensors))]
        for name in self.names():
            data = self.tensors[name].data
            raw = name.encode("utf-8")
            parts.append(struct.pack("<H", len(raw)))
            parts.append(raw)
            parts.append(struct.pack("<BB", _DTYPE_F64, data.ndim))
            parts.append(struct.pack(f"<{data.ndim}I", *data.shape))
            parts.append(np.ascontiguousarray(data, dtype="<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def load(cls, path) -> "ParamStore":
        return cls.from_bytes(Path(path).read_bytes())

    @classmethod
    def from_bytes(cls, buf: bytes) -> "ParamStore":
        if buf[:8] != MAGIC:
            raise ValueError("not a parameter checkpoint (bad magic header)")
        version, count = struct.unpack_from("<II", buf, 8)
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        off = 16
        store = cls()
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + nlen].decode("utf-8")
            off += nlen
            dtype, ndim = struct.unpack_from("<BB", buf, off)
            off += 2
            if dtype != _DTYPE_F64:
                raise ValueError(f"unsupported dtype code {dtype} for {name!r}")
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            n = int(np.prod(shape, dtype=np.int64))
            data = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape)
            off += 8 * n
            store.add(name, data.astype(np.float64))
        return store


def global_grad_norm(store: ParamStore, names=None) -> float:
    names = store.names() if names is None else names
    return float(np.sqrt(sum(float(np.sum(store[n].grad ** 2)) for n in names)))


def clip_grad_norm(store: ParamStore, max_norm: float, names=None) -> float:
    """Scale grads in place so their global L2 norm is at most ``max_norm``."""
    names = store.names() if names is None else names
    norm = global_grad_norm(store, names)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for n in names:
            store[n].grad *= scale
    return norm


def adam_step(store: ParamStore, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8, names=None) -> None:
    """One bias-corrected Adam update of ``names`` (default: every parameter)."""
    names = store.names() if names is None else names
    for n in names:
        g = store[n].grad
        if g is None or not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {n!r}; step aborted")
    for n in names:
        p = store[n]
        g = p.grad
        st = store.opt_state.get(n)
        if st is None:
            st = store.opt_state[n] = AdamState(np.zeros_like(p.data), np.zeros_like(p.data))
        st.step += 1
        st.m = beta1 * st.m + (1.0 - beta1) * g
        st.v = beta2 * st.v + (1.0 - beta2) * g * g
        m_hat = st.m / (1.0 - beta1 ** st.step)
        v_hat = st.v / (1.0 - beta2 ** st.step)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
