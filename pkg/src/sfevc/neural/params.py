"""Named parameter store, Adam, and the binary checkpoint format."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import Tensor

CKPT_MAGIC = b"SFEVC-CKPT\x01"


class ModelParams(dict):
    """Ordered map from layer path (``enc.content.conv0.weight``) to leaf tensors."""

    def __init__(self, seed: int = 0):
        super().__init__()
        self.seed = seed
        self._rng = np.random.default_rng(seed)

    def uniform(self, name: str, shape, fan_in: int) -> Tensor:
        """Register a weight drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
        bound = 1.0 / np.sqrt(max(fan_in, 1))
        return self.add(name, self._rng.uniform(-bound, bound, size=shape))

    def zeros(self, name: str, shape) -> Tensor:
        return self.add(name, np.zeros(shape))

    def ones(self, name: str, shape) -> Tensor:
        return self.add(name, np.ones(shape))

    def add(self, name: str, value) -> Tensor:
        if name in self:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self[name] = t
        return t

    def subset(self, prefix: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.items() if k.startswith(prefix)}

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.items()}

    def load(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        for k, arr in arrays.items():
            if k not in self:
                if strict:
                    raise KeyError(f"checkpoint tensor {k!r} has no matching parameter")
                continue
            if self[k].shape != arr.shape:
                raise ValueError(f"{k}: checkpoint shape {arr.shape} != parameter shape {self[k].shape}")
            self[k].data = np.array(arr, dtype=np.float64)
        if strict:
            missing = set(self) - set(arrays)
            if missing:
                raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")


def adam_step(
    param: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    step: int,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
):
    """One bias-corrected Adam update. ``step`` counts from 1. Returns ``(param, m, v)``."""
    if grad.shape != param.shape:
        raise ValueError(f"gradient shape {grad.shape} != parameter shape {param.shape}")
    m = beta1 * m + (1 - beta1) * grad
    v = beta2 * v + (1 - beta2) * grad * grad
    mhat = m / (1 - beta1**step)
    vhat = v / (1 - beta2**step)
    return param - lr * mhat / (np.sqrt(vhat) + eps), m, v


@dataclass
class Adam:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict[str, Tensor]) -> None:
        """Update every parameter that received a gradient, in insertion order."""
        self.step_count += 1
        for name, p in params.items():
            if p.grad is None:
                continue
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            p.data, self.m[name], self.v[name] = adam_step(
                p.data, p.grad, m, self.v[name], self.step_count, self.lr, self.beta1, self.beta2, self.eps
            )


# -------------------------------------------------------------- checkpoint


def _write_table(parts: list, arrays: dict[str, np.ndarray]) -> None:
    parts.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        b = name.encode("utf-8")
        a = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<H", len(b)) + b)
        parts.append(struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())


def _read_table(data: bytes, pos: int):
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, pos)
        name = data[pos + 2 : pos + 2 + n].decode("utf-8")
        pos += 2 + n
        (ndim,) = struct.unpack_from("<B", data, pos)
        shape = struct.unpack_from(f"<{ndim}I", data, pos + 1)
        pos += 1 + 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        if pos + 4 * size > len(data):
            raise ValueError(f"checkpoint truncated inside tensor {name!r}")
        out[name] = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 4 * size
    return out, pos


def save_checkpoint(path, params: dict[str, Tensor], optimizer: Adam | None = None) -> None:
    """Header, named float32 tensor table, then optimizer step count and moment tables."""
    parts = [CKPT_MAGIC]
    _write_table(parts, {k: v.data for k, v in params.items()})
    opt = optimizer or Adam()
    parts.append(struct.pack("<Q", opt.step_count))
    _write_table(parts, opt.m)
    _write_table(parts, opt.v)
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], Adam]:
    data = Path(path).read_bytes()
    if not data.startswith(CKPT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    arrays, pos = _read_table(data, len(CKPT_MAGIC))
    (step,) = struct.unpack_from("<Q", data, pos)
    m, pos = _read_table(data, pos + 8)
    v, pos = _read_table(data, pos)
    return arrays, Adam(step_count=step, m=m, v=v)
