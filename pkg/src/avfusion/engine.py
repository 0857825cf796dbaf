"""Dense double-precision tensors with reverse-mode differentiation.

The engine is deliberately small: it covers exactly the operations needed to
express patch embedding, pre-norm transformer layers, token fusion, and the
training losses, all in float64. Graphs are recorded dynamically as ops run
(define-by-run) and are single-use: one ``backward`` per graph, after which
the graph is released.

Shape discipline: the only broadcasting allowed is leading-batch expansion,
i.e. a smaller operand whose shape equals a trailing suffix of the larger
operand's shape. Anything else raises ``ShapeError``.

Non-finite values are rejected at graph boundaries (tensors built from raw
data, the loss value, and returned gradients). Set ``CHECK_ALL_OPS = True``
to validate every intermediate as well while debugging.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from pathlib import Path
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np


__all__ = [
    "Tensor",
    "TensorError",
    "ShapeError",
    "GraphError",
    "NonFiniteError",
    "GradientMap",
    "MacCounter",
    "count_macs",
    "matmul",
    "add",
    "mul",
    "scale",
    "gelu",
    "softmax",
    "layer_norm",
    "mean_axis",
    "sum_tensor",
    "concat",
    "slice_axis",
    "reshape",
    "transpose",
    "expand_batch",
    "sigmoid_bce_with_logits",
    "softmax_cross_entropy",
    "backward",
    "grad_check",
    "save_checkpoint",
    "load_checkpoint",
]


class TensorError(Exception):
    """Base class for engine failures."""


class ShapeError(TensorError):
    """Operand shapes are incompatible for the requested op."""


class GraphError(TensorError):
    """Misuse of the computation graph (reuse, unreachable parameter, ...)."""


class NonFiniteError(TensorError):
    """A NaN or Inf crossed a graph boundary."""


_ids = itertools.count()

# Debug switch: finite-check every op output instead of only boundaries.
CHECK_ALL_OPS = False


def _require_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    """A dense float64 array, optionally participating in a gradient graph.

    ``requires_grad`` marks leaves whose gradients ``backward`` should
    produce; derived tensors inherit the flag from their inputs.
    """

    __slots__ = ("data", "node_id", "requires_grad", "_parents", "_vjp", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        _require_finite(arr, "tensor data")
        self.data = arr
        self.node_id = next(_ids)
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None
        self._consumed = False

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple["Tensor", ...], vjp) -> "Tensor":
        out = cls.__new__(cls)
        if CHECK_ALL_OPS:
            _require_finite(data, "op output")
        out.data = data
        out.node_id = next(_ids)
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._vjp = vjp
        else:
            out._parents = ()
            out._vjp = None
        out._consumed = False
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad}, id={self.node_id})"

    # Operator sugar; all routed through the module-level ops.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _is_suffix(big: tuple[int, ...], small: tuple[int, ...]) -> bool:
    return len(small) <= len(big) and big[len(big) - len(small):] == small


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over the leading axes added by batch expansion."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    return g


# ---------------------------------------------------------------------------
# Multiply-accumulate accounting (matmuls only, by convention).

class MacCounter:
    """Counts multiply-accumulates of every matmul run while active."""

    def __init__(self) -> None:
        self.macs = 0

    def add(self, n: int) -> None:
        self.macs += int(n)

    @property
    def flops(self) -> int:
        """FLOPs under the one-MAC-equals-two-FLOPs convention."""
        return 2 * self.macs


_active_counter: MacCounter | None = None


@contextmanager
def count_macs() -> Iterator[MacCounter]:
    global _active_counter
    counter = MacCounter()
    prev = _active_counter
    _active_counter = counter
    try:
        yield counter
    finally:
        _active_counter = prev


# ---------------------------------------------------------------------------
# Primitive operations.

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Leading axes must match exactly, or one operand may be 2-D and is then
    broadcast across the other's leading (batch) axes.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} vs {b.shape}")
    la, lb = a.shape[:-2], b.shape[:-2]
    if la != lb and la != () and lb != ():
        raise ShapeError(f"matmul leading extents differ: {a.shape} vs {b.shape}")
    m, k, n = a.shape[-2], a.shape[-1], b.shape[-1]
    if b.data.ndim == 2 and a.data.ndim > 2:
        # One flat gemm beats numpy's batched loop for a stack times a matrix.
        out = (a.data.reshape(-1, k) @ b.data).reshape(a.shape[:-1] + (n,))
    else:
        out = a.data @ b.data
    if _active_counter is not None:
        lead = la if la else lb
        _active_counter.add(int(np.prod(lead, dtype=np.int64)) * m * k * n)

    def vjp(g: np.ndarray):
        ga = gb = None
        if a.requires_grad:
            if b.data.ndim == 2:
                ga = (g.reshape(-1, n) @ b.data.T).reshape(a.shape)
            else:
                ga = _reduce_to(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.data.ndim == 2 and a.data.ndim >= 2:
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _reduce_to(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return Tensor._from_op(out, (a, b), vjp)


def _elementwise_pair(a: Tensor, b: Tensor, opname: str):
    if a.shape == b.shape:
        return
    if _is_suffix(a.shape, b.shape) or _is_suffix(b.shape, a.shape):
        return
    raise ShapeError(f"{opname} shapes incompatible: {a.shape} vs {b.shape}")


def add(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _elementwise_pair(a, b, "add")
    out = a.data + b.data

    def vjp(g: np.ndarray):
        ga = _reduce_to(g, a.shape) if a.requires_grad else None
        gb = _reduce_to(g, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _elementwise_pair(a, b, "mul")
    out = a.data * b.data

    def vjp(g: np.ndarray):
        ga = _reduce_to(g * b.data, a.shape) if a.requires_grad else None
        gb = _reduce_to(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    out = a.data * c

    def vjp(g: np.ndarray):
        return (g * c,)

    return Tensor._from_op(out, (a,), vjp)


_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """GELU in the tanh form, 0.5 x (1 + tanh(c (x + 0.044715 x^3))).

    The gradient is the exact derivative of this expression, so analytic
    and finite-difference gradients agree to machine precision.
    """
    x = _as_tensor(x)
    v = x.data
    t = v * v
    t *= _GELU_A
    t += 1.0
    t *= v
    t *= _GELU_C
    np.tanh(t, out=t)
    half = t + 1.0
    half *= 0.5                   # half = 0.5 (1 + tanh(...))
    out = v * half

    def vjp(g: np.ndarray):
        # d/dv = half + 0.5 v (1 - t^2) c (1 + 3 a v^2)
        w = v * v
        w *= 3.0 * _GELU_A
        w += 1.0
        w *= 0.5 * _GELU_C
        w *= 1.0 - t * t
        w *= v
        w += half
        w *= g
        return (w,)

    return Tensor._from_op(out, (x,), vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along ``axis`` (max-subtracted)."""
    x = _as_tensor(x)
    ax = axis if axis >= 0 else x.data.ndim + axis
    if not 0 <= ax < x.data.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for shape {x.shape}")
    out = x.data - x.data.max(axis=ax, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=ax, keepdims=True)

    def vjp(g: np.ndarray):
        gx = g - (g * out).sum(axis=ax, keepdims=True)
        gx *= out
        return (gx,)

    return Tensor._from_op(out, (x,), vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match feature dim {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xhat = x.data - mu
    var = (xhat * xhat).mean(axis=-1, keepdims=True)
    var += eps
    inv = 1.0 / np.sqrt(var)
    xhat *= inv
    out = gamma.data * xhat
    out += beta.data

    def vjp(g: np.ndarray):
        gx = ggamma = gbeta = None
        if gamma.requires_grad:
            ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gbeta = g.reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gx = g * gamma.data
            gx -= gx.mean(axis=-1, keepdims=True) + xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            gx *= inv
        return gx, ggamma, gbeta

    return Tensor._from_op(out, (x, gamma, beta), vjp)


def mean_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    ax = axis if axis >= 0 else x.data.ndim + axis
    if not 0 <= ax < x.data.ndim:
        raise ShapeError(f"mean axis {axis} out of range for shape {x.shape}")
    n = x.shape[ax]
    out = x.data.mean(axis=ax, keepdims=keepdims)

    def vjp(g: np.ndarray):
        gg = g if keepdims else np.expand_dims(g, ax)
        return (np.broadcast_to(gg / n, x.shape).copy(),)

    return Tensor._from_op(out, (x,), vjp)


def sum_tensor(x: Tensor, axis: int | None = None) -> Tensor:
    x = _as_tensor(x)
    if axis is None:
        out = np.asarray(x.data.sum())

        def vjp(g: np.ndarray):
            return (np.broadcast_to(g, x.shape).copy(),)

        return Tensor._from_op(out, (x,), vjp)
    ax = axis if axis >= 0 else x.data.ndim + axis
    if not 0 <= ax < x.data.ndim:
        raise ShapeError(f"sum axis {axis} out of range for shape {x.shape}")
    out = x.data.sum(axis=ax)

    def vjp_axis(g: np.ndarray):
        return (np.broadcast_to(np.expand_dims(g, ax), x.shape).copy(),)

    return Tensor._from_op(out, (x,), vjp_axis)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of zero tensors")
    ax = axis if axis >= 0 else parts[0].data.ndim + axis
    ref = list(parts[0].shape)
    for p in parts[1:]:
        other = list(p.shape)
        if len(other) != len(ref) or other[:ax] != ref[:ax] or other[ax + 1:] != ref[ax + 1:]:
            raise ShapeError(f"concat shapes incompatible: {parts[0].shape} vs {p.shape}")
    out = np.concatenate([p.data for p in parts], axis=ax)
    sizes = [p.shape[ax] for p in parts]

    def vjp(g: np.ndarray):
        grads = []
        start = 0
        for p, s in zip(parts, sizes):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[ax] = slice(start, start + s)
                grads.append(g[tuple(idx)])
            else:
                grads.append(None)
            start += s
        return tuple(grads)

    return Tensor._from_op(out, tuple(parts), vjp)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """The half-open slice [start, stop) along one axis."""
    x = _as_tensor(x)
    ax = axis if axis >= 0 else x.data.ndim + axis
    if not 0 <= ax < x.data.ndim:
        raise ShapeError(f"slice axis {axis} out of range for shape {x.shape}")
    if not (0 <= start <= stop <= x.shape[ax]):
        raise ShapeError(f"slice [{start}:{stop}) out of bounds for extent {x.shape[ax]}")
    idx = [slice(None)] * x.data.ndim
    idx[ax] = slice(start, stop)
    idx_t = tuple(idx)
    out = x.data[idx_t].copy()

    def vjp(g: np.ndarray):
        full = np.zeros_like(x.data)
        full[idx_t] = g
        return (full,)

    return Tensor._from_op(out, (x,), vjp)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise ShapeError(f"reshape {x.shape} -> {shape} changes element count")
    out = x.data.reshape(shape)

    def vjp(g: np.ndarray):
        return (g.reshape(x.shape),)

    return Tensor._from_op(out, (x,), vjp)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise ShapeError(f"transpose axes {axes} invalid for rank {x.data.ndim}")
    out = np.ascontiguousarray(x.data.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def vjp(g: np.ndarray):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return Tensor._from_op(out, (x,), vjp)


def expand_batch(x: Tensor, n: int) -> Tensor:
    """Tile ``x`` along a new leading batch axis of extent ``n``."""
    x = _as_tensor(x)
    out = np.broadcast_to(x.data, (int(n),) + x.shape).copy()

    def vjp(g: np.ndarray):
        return (g.sum(axis=0),)

    return Tensor._from_op(out, (x,), vjp)


# ---------------------------------------------------------------------------
# Fused losses (numerically stable, exact analytic gradients).

def sigmoid_bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy between ``sigmoid(logits)`` and targets.

    Computed in log-sum-exp form: per entry, ``max(x, 0) - x*y + log1p(exp(-|x|))``.
    Targets are constants in [0, 1].
    """
    logits = _as_tensor(logits)
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise ShapeError(f"bce target shape {t.shape} != logits shape {logits.shape}")
    if t.min() < 0.0 or t.max() > 1.0:
        raise ValueError("bce targets must lie in [0, 1]")
    x = logits.data
    per = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    n = per.size
    out = np.asarray(per.sum() / n)

    def vjp(g: np.ndarray):
        sig = 1.0 / (1.0 + np.exp(-x))
        return (g * (sig - t) / n, None)

    return Tensor._from_op(out, (logits, Tensor(t)), vjp)


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy of row-wise softmax against soft target rows.

    ``logits`` is (batch, classes); ``targets`` rows are nonnegative and sum
    to 1 (one-hot or mixed). Loss per row is ``logsumexp(x) - sum(t * x)``.
    """
    logits = _as_tensor(logits)
    t = np.asarray(targets, dtype=np.float64)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross-entropy expects (batch, classes) logits, got {logits.shape}")
    if t.shape != logits.shape:
        raise ShapeError(f"cross-entropy target shape {t.shape} != logits shape {logits.shape}")
    x = logits.data
    m = x.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=1))
    rows = lse - (t * x).sum(axis=1)
    b = x.shape[0]
    out = np.asarray(rows.sum() / b)

    def vjp(g: np.ndarray):
        e = np.exp(x - m)
        p = e / e.sum(axis=1, keepdims=True)
        return (g * (p - t) / b, None)

    return Tensor._from_op(out, (logits, Tensor(t)), vjp)


# ---------------------------------------------------------------------------
# Reverse pass.

class GradientMap:
    """Gradients keyed by parameter node-id; shapes match the parameters."""

    def __init__(self, grads: dict[int, Tensor]):
        self._grads = grads

    def get(self, param: Tensor) -> Tensor:
        return self._grads[param.node_id]

    def by_id(self, node_id: int) -> Tensor:
        return self._grads[node_id]

    def __len__(self) -> int:
        return len(self._grads)

    def __contains__(self, param: Tensor) -> bool:
        return param.node_id in self._grads

    def items(self):
        return self._grads.items()


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in node._parents:
            if p.node_id not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Sequence[Tensor]) -> GradientMap:
    """Gradients of a scalar loss w.r.t. each parameter tensor.

    The graph below ``loss`` is consumed: its links are dropped afterwards
    and a second backward on the same loss raises ``GraphError``.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("graph already consumed by a previous backward")
    _require_finite(loss.data, "loss")

    topo = _toposort(loss)
    in_graph = {node.node_id for node in topo}
    for p in params:
        if p.node_id not in in_graph:
            raise GraphError(f"parameter id={p.node_id} shape={p.shape} is not in the loss graph")
        if not p.requires_grad:
            raise GraphError(f"parameter id={p.node_id} does not require grad")

    param_ids = {p.node_id for p in params}
    # Accumulator values carry an "owned" flag: a first contribution may be
    # a view or a tensor shared with another path, so in-place accumulation
    # is only safe once we have allocated the buffer ourselves.
    grads: dict[int, tuple[np.ndarray, bool]] = {loss.node_id: (np.ones_like(loss.data), True)}
    result: dict[int, np.ndarray] = {}
    for node in reversed(topo):
        entry = grads.pop(node.node_id, None)
        if entry is None:
            continue
        g = entry[0]
        if node.node_id in param_ids:
            result[node.node_id] = g
        if node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            acc = grads.get(p.node_id)
            if acc is None:
                grads[p.node_id] = (pg, False)
            elif acc[1]:
                np.add(acc[0], pg, out=acc[0])
            else:
                grads[p.node_id] = (acc[0] + pg, True)

    loss._consumed = True
    for node in topo:
        node._parents = ()
        node._vjp = None

    out: dict[int, Tensor] = {}
    for p in params:
        g = result.get(p.node_id)
        if g is None:
            # Reachable topologically yet starved of gradient flow cannot
            # happen for requires_grad parameters; guard anyway.
            g = np.zeros_like(p.data)
        _require_finite(g, f"gradient of parameter id={p.node_id}")
        out[p.node_id] = Tensor(g)
    return GradientMap(out)


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: np.ndarray,
    eps: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor. Error per entry is
    ``|analytic - central| / max(|analytic|, |central|, 1e-8)``. When
    ``max_entries`` is given, that many entries are sampled (without
    replacement) using ``rng``.
    """
    x = np.asarray(x, dtype=np.float64)
    leaf = Tensor(x.copy(), requires_grad=True)
    analytic = backward(f(leaf), [leaf]).get(leaf).data

    flat = x.reshape(-1)
    indices = np.arange(flat.size)
    if max_entries is not None and max_entries < flat.size:
        gen = rng if rng is not None else np.random.default_rng(0)
        indices = gen.choice(flat.size, size=max_entries, replace=False)

    worst = 0.0
    a_flat = analytic.reshape(-1)
    for i in indices:
        bumped = flat.copy()
        bumped[i] += eps
        up = float(f(Tensor(bumped.reshape(x.shape))).data)
        bumped[i] -= 2 * eps
        down = float(f(Tensor(bumped.reshape(x.shape))).data)
        central = (up - down) / (2.0 * eps)
        denom = max(abs(a_flat[i]), abs(central), 1e-8)
        worst = max(worst, abs(a_flat[i] - central) / denom)
    return worst


# ---------------------------------------------------------------------------
# Parameter archive: ordered (name, shape, little-endian float64 payload)
# entries in `params.bin`, described by the text file `params.manifest`.
#
#   line 1: "avf-ckpt 1"
#   then one line per entry: name<TAB>shape-csv<TAB>byte-offset<TAB>count
#
# Shapes are comma-separated extents ("" for rank-0). Payloads are raw
# row-major little-endian float64, concatenated in manifest order.

CHECKPOINT_MAGIC = "avf-ckpt"
CHECKPOINT_VERSION = 1
_MANIFEST_NAME = "params.manifest"
_PAYLOAD_NAME = "params.bin"


def save_checkpoint(directory: str | Path, entries: Mapping[str, "Tensor | np.ndarray"]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}"]
    offset = 0
    with open(directory / _PAYLOAD_NAME, "wb") as payload:
        for name, value in entries.items():
            if "\t" in name or "\n" in name:
                raise ValueError(f"invalid parameter name {name!r}")
            arr = value.data if isinstance(value, Tensor) else np.asarray(value)
            arr = np.ascontiguousarray(arr, dtype="<f8")
            shape_csv = ",".join(str(s) for s in arr.shape)
            lines.append(f"{name}\t{shape_csv}\t{offset}\t{arr.size}")
            payload.write(arr.tobytes())
            offset += arr.size * 8
    (directory / _MANIFEST_NAME).write_text("\n".join(lines) + "\n")


def load_checkpoint(directory: str | Path) -> dict[str, np.ndarray]:
    directory = Path(directory)
    manifest = (directory / _MANIFEST_NAME).read_text().splitlines()
    if not manifest:
        raise ValueError("empty checkpoint manifest")
    magic = manifest[0].split()
    if magic[0] != CHECKPOINT_MAGIC or int(magic[1]) != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint header: {manifest[0]!r}")
    raw = (directory / _PAYLOAD_NAME).read_bytes()
    out: dict[str, np.ndarray] = {}
    for line in manifest[1:]:
        if not line.strip():
            continue
        name, shape_csv, offset_s, count_s = line.split("\t")
        shape = tuple(int(s) for s in shape_csv.split(",")) if shape_csv else ()
        offset, count = int(offset_s), int(count_s)
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        out[name] = arr.reshape(shape).astype(np.float64)
    return out
