"""Parameter containers, Adam, global-norm clipping and checkpoint I/O."""

from __future__ import annotations

import logging
import struct
from pathlib import Path
from typing import Iterable

import numpy as np

from .autodiff import Tensor, add, matmul

log = logging.getLogger(__name__)


class Module:
    """Holds named parameter tensors in insertion order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, name=name)
        self._params[name] = t
        return t

    def parameters(self) -> list[Tensor]:
        return list(self._params.values())

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self._params)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)}")
        for k, t in self._params.items():
            if state[k].shape != t.shape:
                raise ValueError(f"{k}: checkpoint shape {state[k].shape} != {t.shape}")
            t.data = np.array(state[k], dtype=np.float64)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


class Adam:
    """Adam with bias correction. ``step`` takes gradients of a loss to minimise."""

    def __init__(self, params: list[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(p.shape) for p in params]
        self.v = [np.zeros(p.shape) for p in params]

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            upd = self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            # rebind rather than mutate: recorded tapes may still hold the old array
            p.data = p.data - upd


def global_norm(grads: Iterable[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_by_global_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    """Rescale so the joint L2 norm is at most ``max_norm``; returns (grads, pre-clip norm)."""
    norm = global_norm(grads)
    if norm > max_norm:
        f = max_norm / norm
        grads = [g * f for g in grads]
    return grads, norm


# ---------------------------------------------------------------------------
# checkpoint container: per tensor
#   u32 name length | utf-8 name | u32 ndim | ndim x u64 dims | '<f8' values
# plus "<file>.manifest" with one "name d0xd1x..." line per tensor.

_MAGIC = b"IMTC0001"


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [_MAGIC, struct.pack("<I", len(tensors))]
    lines = []
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
        lines.append(f"{name} {'x'.join(map(str, arr.shape)) or 'scalar'}\n")
    path.write_bytes(b"".join(chunks))
    Path(str(path) + ".manifest").write_text("".join(lines))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:8] != _MAGIC:
        raise ValueError(f"{path}: not a tensor checkpoint")
    off = 8
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    out: dict[str, np.ndarray] = {}
    for _ in range(n):
        (ln,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off : off + ln].decode("utf-8")
        off += ln
        (ndim,) = struct.unpack_from("<I", buf, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}Q", buf, off)
        off += 8 * ndim
        count = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += 8 * count
    return out


def save_modules(path: str | Path, **modules: Module) -> None:
    flat = {}
    for prefix, m in modules.items():
        for k, v in m.state_dict().items():
            flat[f"{prefix}.{k}"] = v
    save_checkpoint(path, flat)


def load_modules(path: str | Path, **modules: Module) -> None:
    flat = load_checkpoint(path)
    for prefix, m in modules.items():
        sub = {k[len(prefix) + 1 :]: v for k, v in flat.items() if k.startswith(prefix + ".")}
        m.load_state_dict(sub)
