"""Shared parameter store with Adam statistics, gradient clipping and the
binary snapshot format."""

from __future__ import annotations

import io
import json
import math
import struct
import threading
from pathlib import Path

import numpy as np

from .autodiff import Tensor

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

SNAPSHOT_MAGIC = b"CNAVSNAP"
SNAPSHOT_VERSION = 1


class SnapshotError(ValueError):
    pass


class ParamStore:
    """Named parameters shared by all workers, plus Adam moments and step count.

    Reads (``copy_into``/``arrays``) take no lock; ``apply_adam`` serialises
    writers so moment updates stay consistent.
    """

    def __init__(self, params: dict[str, np.ndarray]):
        self.params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        self.m = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.step = 0
        self._lock = threading.Lock()

    def __contains__(self, name):
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def make_tensors(self) -> dict[str, Tensor]:
        """A private, gradient-tracking copy of every parameter."""
        return {k: Tensor(v.copy(), requires_grad=True, name=k) for k, v in self.params.items()}

    def copy_into(self, tensors: dict[str, Tensor]) -> None:
        for k, t in tensors.items():
            np.copyto(t.data, self.params[k])

    def apply_adam(self, grads: dict[str, np.ndarray], lr: float) -> None:
        for k, g in grads.items():
            if k not in self.params:
                raise KeyError(f"gradient for unknown parameter {k!r}")
            if g.shape != self.params[k].shape:
                raise ValueError(f"gradient shape {g.shape} != parameter {k!r} shape {self.params[k].shape}")
        with self._lock:
            self.step += 1
            bc1 = 1.0 - ADAM_BETA1 ** self.step
            bc2 = 1.0 - ADAM_BETA2 ** self.step
            for k, g in grads.items():
                m, v = self.m[k], self.v[k]
                m *= ADAM_BETA1
                m += (1.0 - ADAM_BETA1) * g
                v *= ADAM_BETA2
                v += (1.0 - ADAM_BETA2) * g * g
                self.params[k] -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)


def adam_apply(store: ParamStore, gradients: dict[str, np.ndarray], lr: float = 1e-4) -> ParamStore:
    store.apply_adam(gradients, lr)
    return store


def collect_grads(tensors: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients keyed by parameter name; parameters the loss never reached get zeros."""
    return {k: (np.zeros_like(t.data) if t.grad is None else t.grad) for k, t in tensors.items()}


def zero_grads(tensors: dict[str, Tensor]) -> None:
    for t in tensors.values():
        t.grad = None


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(float(np.sum([np.vdot(g, g) for g in grads.values()])))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float):
    """Scale all gradients down so their joint L2 norm is at most ``max_norm``."""
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


# -- snapshot format ----------------------------------------------------------------
# magic(8) | version u32 | meta_len u32 | meta json utf-8 | n_tensors u32 |
# per tensor: name_len u16 | name | ndim u8 | dims u32*ndim | float64 LE data

def write_snapshot(path, params: dict[str, np.ndarray], meta: dict | None = None) -> None:
    buf = io.BytesIO()
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    buf.write(SNAPSHOT_MAGIC)
    buf.write(struct.pack("<II", SNAPSHOT_VERSION, len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(params)))
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def read_snapshot(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    try:
        if data[:8] != SNAPSHOT_MAGIC:
            raise SnapshotError("not a snapshot file (bad magic)")
        off = 8
        version, meta_len = struct.unpack_from("<II", data, off)
        off += 8
        if version != SNAPSHOT_VERSION:
            raise SnapshotError(f"unsupported snapshot version {version}")
        meta = json.loads(data[off:off + meta_len].decode())
        off += meta_len
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        params = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + nlen].decode()
            off += nlen
            (ndim,) = struct.unpack_from("<B", data, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            if off + 8 * n > len(data):
                raise SnapshotError(f"truncated data for tensor {name!r}")
            params[name] = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape).copy()
            off += 8 * n
        if off != len(data):
            raise SnapshotError("trailing bytes after last tensor")
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SnapshotError(f"corrupt snapshot: {exc}") from None
    return params, meta
