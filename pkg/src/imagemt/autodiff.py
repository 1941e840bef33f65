"""Dense float64 tensors with a tape-based reverse-mode differentiator.

Every model in the package (denoiser, visual projector, decoder) is built
from the primitives registered here. A :class:`Tape` records primitive
applications while it is active; :meth:`Tape.backward` walks the record in
reverse and returns a gradient for every node.

    >>> x = Tensor([3.0])
    >>> with Tape() as tape:
    ...     loss = (x * x).sum()
    >>> tape.gradient(loss, [x])[0]
    array([6.])
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "apply_primitive",
    "backward",
    "grad_check",
    "PRIMITIVES",
]


class ShapeError(ValueError):
    """Raised when primitive inputs do not conform to its signature."""


class Tensor:
    __slots__ = ("data", "node_id", "_tape", "name")

    def __init__(self, data: Any, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.node_id: int | None = None
        self._tape: Tape | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar; each maps onto a single primitive
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# computation record


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]
    shape: tuple[int, ...]
    attrs: dict = field(default_factory=dict)
    # forward context: input arrays, output array, primitive-specific cache
    saved: Any = None


_ACTIVE: list["Tape"] = []


def active_tape() -> "Tape | None":
    return _ACTIVE[-1] if _ACTIVE else None


class Tape:
    """Ordered record of primitive applications (single-threaded)."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._leaf_values: dict[int, np.ndarray] = {}

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def _register(self, t: Tensor) -> int:
        if t._tape is self and t.node_id is not None:
            return t.node_id
        nid = len(self.nodes)
        self.nodes.append(Node("leaf", (), t.shape, saved=t.data))
        self._leaf_values[nid] = t.data
        t._tape, t.node_id = self, nid
        return nid

    def _record(self, kind, inputs, out: Tensor, attrs, saved) -> None:
        ids = tuple(self._register(t) for t in inputs)
        nid = len(self.nodes)
        self.nodes.append(Node(kind, ids, out.shape, attrs, saved))
        out._tape, out.node_id = self, nid

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Return ``node_id -> d loss / d node`` for every node in the record.

        Leaves the loss does not depend on receive zero gradients.
        """
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self or loss.node_id is None:
            raise ValueError("loss was not produced under this tape")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[loss.node_id] = np.ones(loss.shape)
        for nid in range(loss.node_id, -1, -1):
            g = grads[nid]
            node = self.nodes[nid]
            if g is None or node.kind == "leaf":
                continue
            _, bwd = PRIMITIVES[node.kind]
            in_arrays, out_array, cache = node.saved
            in_grads = bwd(g, in_arrays, out_array, cache, node.attrs)
            for src, ig in zip(node.inputs, in_grads):
                if ig is None:
                    continue
                if grads[src] is None:
                    grads[src] = ig
                else:
                    grads[src] = grads[src] + ig
        out = {i: g for i, g in enumerate(grads) if g is not None}
        for nid, node in enumerate(self.nodes):
            if node.kind == "leaf" and nid not in out:
                out[nid] = np.zeros(node.shape)
        return out

    def gradient(self, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of ``loss`` for ``params`` in order; zeros if unreachable."""
        grads = self.backward(loss)
        res = []
        for p in params:
            if p._tape is self and p.node_id is not None:
                res.append(grads[p.node_id])
            else:
                res.append(np.zeros(p.shape))
        return res

    def replay(self) -> list[np.ndarray]:
        """Recompute every node's value from the recorded leaves and primitives."""
        values: list[np.ndarray] = []
        for node in self.nodes:
            if node.kind == "leaf":
                values.append(node.saved)
                continue
            fwd, _ = PRIMITIVES[node.kind]
            out, _ = fwd([values[i] for i in node.inputs], node.attrs)
            values.append(out)
        return values


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Differentiate ``loss`` on the tape that produced it."""
    if loss._tape is None:
        raise ValueError("loss was produced with recording disabled")
    return loss._tape.backward(loss)


# ---------------------------------------------------------------------------
# primitives: kind -> (forward(arrays, attrs) -> (out, cache),
#                      backward(g, arrays, out, cache, attrs) -> grads)

PRIMITIVES: dict[str, tuple[Callable, Callable]] = {}


def _primitive(kind):
    def deco(pair):
        fwd, bwd = pair()
        PRIMITIVES[kind] = (fwd, bwd)
        return pair

    return deco


def apply_primitive(kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    if kind not in PRIMITIVES:
        raise KeyError(f"unknown primitive {kind!r}")
    fwd, _ = PRIMITIVES[kind]
    arrays = [t.data for t in inputs]
    out_arr, cache = fwd(arrays, attrs)
    out = Tensor(out_arr)
    tape = active_tape()
    if tape is not None:
        tape._record(kind, inputs, out, attrs, (arrays, out_arr, cache))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_check(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast shapes {a.shape} and {b.shape}") from None


@_primitive("matmul")
def _matmul():
    def fwd(x, attrs):
        a, b = x
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        try:
            return np.matmul(a, b), None
        except ValueError:
            raise ShapeError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None

    def bwd(g, x, out, cache, attrs):
        a, b = x
        if b.ndim == 2 and a.ndim > 2:
            # shared weight: one GEMM over all leading rows
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.T).reshape(a.shape)
            gb = a.reshape(-1, a.shape[-1]).T @ g2
        else:
            ga = np.matmul(g, np.swapaxes(b, -1, -2))
            gb = np.matmul(np.swapaxes(a, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return fwd, bwd


@_primitive("add")
def _add():
    def fwd(x, attrs):
        _broadcast_check("add", *x)
        return x[0] + x[1], None

    def bwd(g, x, out, cache, attrs):
        return _unbroadcast(g, x[0].shape), _unbroadcast(g, x[1].shape)

    return fwd, bwd


@_primitive("sub")
def _sub():
    def fwd(x, attrs):
        _broadcast_check("sub", *x)
        return x[0] - x[1], None

    def bwd(g, x, out, cache, attrs):
        return _unbroadcast(g, x[0].shape), _unbroadcast(-g, x[1].shape)

    return fwd, bwd


@_primitive("mul")
def _mul():
    def fwd(x, attrs):
        _broadcast_check("mul", *x)
        return x[0] * x[1], None

    def bwd(g, x, out, cache, attrs):
        a, b = x
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

    return fwd, bwd


@_primitive("scale")
def _scale():
    # ``div`` divides instead of multiplying, so x / x is exactly 1
    def fwd(x, attrs):
        return (x[0] / attrs["c"] if attrs.get("div") else x[0] * attrs["c"]), None

    def bwd(g, x, out, cache, attrs):
        return (g / attrs["c"] if attrs.get("div") else g * attrs["c"],)

    return fwd, bwd


@_primitive("tanh")
def _tanh():
    def fwd(x, attrs):
        return np.tanh(x[0]), None

    def bwd(g, x, out, cache, attrs):
        return (g * (1.0 - out * out),)

    return fwd, bwd


@_primitive("relu")
def _relu():
    def fwd(x, attrs):
        return np.maximum(x[0], 0.0), None

    def bwd(g, x, out, cache, attrs):
        return (g * (x[0] > 0),)

    return fwd, bwd


@_primitive("softmax")
def _softmax():
    # softmax over the last axis; optional additive mask (e.g. -inf above the diagonal)
    def fwd(x, attrs):
        z = x[0]
        mask = attrs.get("mask")
        if mask is not None:
            z = z + mask
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True), None

    def bwd(g, x, out, cache, attrs):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return fwd, bwd


@_primitive("softmax_cross_entropy")
def _softmax_xent():
    # weighted mean over rows of -log softmax(logits)[target]
    def fwd(x, attrs):
        logits = x[0]
        targets = np.asarray(attrs["targets"])
        if logits.ndim != 2 or targets.shape != logits.shape[:1]:
            raise ShapeError(
                f"softmax_cross_entropy: logits {logits.shape} vs targets {targets.shape}"
            )
        w = attrs.get("weights")
        w = np.ones(len(targets)) if w is None else np.asarray(w, dtype=np.float64)
        z = logits - logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        nll = lse - z[np.arange(len(targets)), targets]
        total = w.sum()
        if total <= 0:
            raise ValueError("softmax_cross_entropy: weights sum to zero")
        return np.asarray(np.dot(w, nll) / total), (z, lse, w, total)

    def bwd(g, x, out, cache, attrs):
        z, lse, w, total = cache
        targets = np.asarray(attrs["targets"])
        p = np.exp(z - lse[:, None])
        p[np.arange(len(targets)), targets] -= 1.0
        return (p * (w / total)[:, None] * g,)

    return fwd, bwd


@_primitive("gather_rows")
def _gather_rows():
    def fwd(x, attrs):
        table = x[0]
        ids = np.asarray(attrs["ids"])
        if table.ndim != 2:
            raise ShapeError(f"gather_rows: table must be 2-d, got {table.shape}")
        if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
            raise ShapeError(f"gather_rows: ids out of range for table {table.shape}")
        return table[ids], None

    def bwd(g, x, out, cache, attrs):
        table = x[0]
        ids = np.asarray(attrs["ids"]).reshape(-1)
        gt = np.zeros_like(table)
        np.add.at(gt, ids, g.reshape(-1, table.shape[1]))
        return (gt,)

    return fwd, bwd


@_primitive("concat")
def _concat():
    def fwd(x, attrs):
        try:
            return np.concatenate(x, axis=attrs["axis"]), None
        except ValueError:
            raise ShapeError(f"concat: shapes {[a.shape for a in x]} on axis {attrs['axis']}") from None

    def bwd(g, x, out, cache, attrs):
        cuts = np.cumsum([a.shape[attrs["axis"]] for a in x])[:-1]
        return tuple(np.split(g, cuts, axis=attrs["axis"]))

    return fwd, bwd


@_primitive("slice")
def _slice():
    def fwd(x, attrs):
        return x[0][attrs["index"]], None

    def bwd(g, x, out, cache, attrs):
        gx = np.zeros_like(x[0])
        if attrs.get("fancy"):
            np.add.at(gx, attrs["index"], g)
        else:
            gx[attrs["index"]] = g
        return (gx,)

    return fwd, bwd


@_primitive("sum")
def _sum():
    def fwd(x, attrs):
        return np.sum(x[0], axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False)), None

    def bwd(g, x, out, cache, attrs):
        axis = attrs.get("axis")
        if axis is not None and not attrs.get("keepdims", False):
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x[0].shape).copy(),)

    return fwd, bwd


@_primitive("mean")
def _mean():
    def fwd(x, attrs):
        return np.mean(x[0], axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False)), None

    def bwd(g, x, out, cache, attrs):
        axis = attrs.get("axis")
        n = x[0].size / max(np.asarray(out).size, 1)
        if axis is not None and not attrs.get("keepdims", False):
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x[0].shape) / n,)

    return fwd, bwd


@_primitive("reshape")
def _reshape():
    def fwd(x, attrs):
        try:
            return x[0].reshape(attrs["shape"]), None
        except ValueError:
            raise ShapeError(f"reshape: cannot view {x[0].shape} as {attrs['shape']}") from None

    def bwd(g, x, out, cache, attrs):
        return (g.reshape(x[0].shape),)

    return fwd, bwd


@_primitive("transpose")
def _transpose():
    def fwd(x, attrs):
        return np.transpose(x[0], attrs["axes"]), None

    def bwd(g, x, out, cache, attrs):
        return (np.transpose(g, np.argsort(attrs["axes"])),)

    return fwd, bwd


@_primitive("layer_norm")
def _layer_norm():
    # normalise over the last axis, then affine (gain, bias)
    def fwd(x, attrs):
        a, gain, bias = x
        eps = attrs.get("eps", 1e-5)
        mu = a.mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(a.var(axis=-1, keepdims=True) + eps)
        xhat = (a - mu) * inv
        return xhat * gain + bias, (xhat, inv)

    def bwd(g, x, out, cache, attrs):
        a, gain, bias = x
        xhat, inv = cache
        lead = tuple(range(a.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gain
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgain, dbias

    return fwd, bwd


# ---------------------------------------------------------------------------
# functional wrappers


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("matmul", [a, b])


def add(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("add", [a, b])


def sub(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("sub", [a, b])


def mul(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("mul", [a, b])


def scale(a: Tensor, c: float) -> Tensor:
    return apply_primitive("scale", [a], c=float(c))


def divide(a: Tensor, c: float) -> Tensor:
    return apply_primitive("scale", [a], c=float(c), div=True)


def tanh(a: Tensor) -> Tensor:
    return apply_primitive("tanh", [a])


def relu(a: Tensor) -> Tensor:
    return apply_primitive("relu", [a])


def softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    return apply_primitive("softmax", [a], mask=mask)


def softmax_cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    return apply_primitive(
        "softmax_cross_entropy", [logits], targets=np.asarray(targets), weights=weights
    )


def gather_rows(table: Tensor, ids) -> Tensor:
    return apply_primitive("gather_rows", [table], ids=np.asarray(ids, dtype=np.int64))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return apply_primitive("concat", list(tensors), axis=axis)


def slice_(a: Tensor, index) -> Tensor:
    if not isinstance(index, tuple):
        index = (index,)
    fancy = any(isinstance(i, (list, np.ndarray)) for i in index)
    return apply_primitive("slice", [a], index=index, fancy=fancy)


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    return apply_primitive("sum", [a], axis=axis, keepdims=keepdims)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    return apply_primitive("mean", [a], axis=axis, keepdims=keepdims)


def reshape(a: Tensor, shape) -> Tensor:
    return apply_primitive("reshape", [a], shape=tuple(shape))


def transpose(a: Tensor, axes) -> Tensor:
    return apply_primitive("transpose", [a], axes=tuple(axes))


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    return apply_primitive("layer_norm", [a, gain, bias], eps=eps)


# ---------------------------------------------------------------------------
# finite-difference check


def grad_check(
    f: Callable[[], Tensor],
    x: Tensor | Sequence[Tensor],
    eps: float = 1e-5,
    coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` is a closure over ``x`` returning a scalar tensor. ``x`` may be one
    tensor or several; each is perturbed in place and restored. With
    ``coords`` set, only that many randomly chosen coordinates (across all
    tensors) are differenced.
    """
    if not 0 < eps <= 1e-2:
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    xs = [x] if isinstance(x, Tensor) else list(x)
    with Tape() as tape:
        out = f()
    if out.size != 1:
        raise ShapeError(f"grad_check needs a scalar-valued f, got shape {out.shape}")
    analytic = tape.gradient(out, xs)

    flat = [(k, i) for k, t in enumerate(xs) for i in range(t.size)]
    if coords is not None and coords < len(flat):
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(flat), size=coords, replace=False)
        flat = [flat[j] for j in sorted(pick)]

    worst = 0.0
    for k, i in flat:
        view = xs[k].data.reshape(-1)
        orig = view[i]
        view[i] = orig + eps
        fp = f().item()
        view[i] = orig - eps
        fm = f().item()
        view[i] = orig
        central = (fp - fm) / (2 * eps)
        a = analytic[k].reshape(-1)[i]
        err = abs(a - central) / (abs(a) + abs(central) + 1e-12)
        worst = max(worst, err)
    return worst


def gaussian_log_prob(x, mu: Tensor, sigma) -> Tensor:
    """Isotropic Gaussian log-density of ``x`` under N(mu, sigma^2 I).

    Sums over the last axis. ``sigma`` is a scalar or an array matching
    ``mu.shape[:-1]`` (one standard deviation per row).
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("gaussian_log_prob needs sigma > 0")
    d = mu.shape[-1]
    diff = sub(_as_tensor(x), mu)
    sq = sum_(mul(diff, diff), axis=-1)
    const = -0.5 * d * np.log(2 * np.pi * sigma * sigma)
    return add(mul(sq, Tensor(-0.5 / (sigma * sigma))), Tensor(np.broadcast_to(const, sq.shape)))
