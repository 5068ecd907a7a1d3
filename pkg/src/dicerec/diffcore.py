"""Define-by-run reverse-mode autodiff over float64 numpy arrays.

Every operation computes its forward value eagerly when the node is built and
stores a closure that maps the upstream gradient to one gradient per parent.
Graphs are rebuilt for every training step, so there is no cached state to go
stale between steps.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from collections.abc import Callable, Iterable, Sequence
from pathlib import Path

import numpy as np

CHECKPOINT_VERSION = 1

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        joined = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible operand shapes {joined}")


class GradientError(ArithmeticError):
    """Raised on non-finite values where finite ones are required."""


class Node:
    """A value in the computation graph plus its gradient accumulator."""

    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "op")

    def __init__(
        self,
        value,
        parents: tuple[Node, ...] = (),
        backward_fn: BackwardFn | None = None,
        requires_grad: bool = False,
        op: str = "constant",
    ):
        self.value = np.asarray(value, dtype=np.float64)
        # intermediate accumulators are allocated (zeroed) by backward()
        self.grad = np.zeros(self.value.shape) if requires_grad and not parents else None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(op={self.op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return subtract(self, _lift(other))

    def __rsub__(self, other):
        return subtract(_lift(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return multiply(self, _lift(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __neg__(self):
        return scale(self, -1.0)


def _lift(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _make(value, parents: tuple[Node, ...], backward_fn: BackwardFn, op: str) -> Node:
    if any(p.requires_grad for p in parents):
        return Node(value, parents, backward_fn, True, op)
    return Node(value, op=op)


def constant(value) -> Node:
    return Node(value)


def parameter(value) -> Node:
    return Node(np.array(value, dtype=np.float64), requires_grad=True, op="parameter")


def evaluate(root: Node) -> np.ndarray:
    """Return the forward value of ``root``.

    Values are computed while the graph is built, so this only hands back the
    cached array.
    """
    return root.value


def topological_order(root: Node) -> list[Node]:
    """Nodes reachable from ``root`` ordered so parents precede children."""
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Node) -> None:
    """Write d(root)/d(node) into the accumulator of every differentiable ancestor."""
    if root.value.size != 1:
        raise ShapeError("backward (root must be scalar)", root.shape)
    order = topological_order(root)
    for node in order:
        if node.requires_grad:
            node.grad = np.zeros(node.value.shape)
    if not root.requires_grad:
        return
    root.grad = np.ones(root.value.shape)
    for node in reversed(order):
        if node.backward_fn is None:
            continue
        parent_grads = node.backward_fn(node.grad)
        for parent, g in zip(node.parents, parent_grads):
            if g is not None and parent.requires_grad:
                parent.grad += g


# ---------------------------------------------------------------------------
# primitives


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    grad = grad.sum(axis=tuple(range(lead))) if lead > 0 else grad
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_binary(op: str, a: Node, b: Node) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or len(sa) == 0 or len(sb) == 0:
        return
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if long_[len(long_) - len(short):] != short:
        raise ShapeError(op, sa, sb)


def add(a: Node, b: Node) -> Node:
    _check_binary("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(
        a.value + b.value, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add",
    )


def subtract(a: Node, b: Node) -> Node:
    _check_binary("subtract", a, b)
    sa, sb = a.shape, b.shape
    return _make(
        a.value - b.value, (a, b),
        lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "subtract",
    )


def multiply(a: Node, b: Node) -> Node:
    _check_binary("multiply", a, b)
    av, bv = a.value, b.value
    return _make(
        av * bv, (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
        "multiply",
    )


def scale(x: Node, c: float) -> Node:
    return _make(x.value * c, (x,), lambda g: (g * c,), "scale")


def matmul(a: Node, b: Node) -> Node:
    """``a @ b`` for ``a`` of shape (..., n) and ``b`` of shape (n, m) or (n,)."""
    av, bv = a.value, b.value
    if bv.ndim not in (1, 2) or av.ndim < 1 or av.shape[-1] != bv.shape[0]:
        raise ShapeError("matmul", av.shape, bv.shape)

    def back(g):
        if bv.ndim == 1:
            g = np.asarray(g)
            return g[..., None] * bv, av.reshape(-1, av.shape[-1]).T @ g.reshape(-1)
        ga = g @ bv.T
        a2 = av.reshape(-1, av.shape[-1]) if av.ndim > 1 else av[None, :]
        g2 = g.reshape(-1, bv.shape[1]) if g.ndim > 1 else g[None, :]
        return ga, a2.T @ g2

    return _make(av @ bv, (a, b), back, "matmul")


def transpose(x: Node) -> Node:
    """Swap the last two axes."""
    if x.value.ndim < 2:
        raise ShapeError("transpose", x.shape)
    return _make(np.swapaxes(x.value, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def reshape(x: Node, shape: Sequence[int]) -> Node:
    src = x.shape
    try:
        out = x.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", src, tuple(shape)) from None
    return _make(out, (x,), lambda g: (g.reshape(src),), "reshape")


def concat(nodes: Sequence[Node], axis: int = -1) -> Node:
    values = [n.value for n in nodes]
    try:
        out = np.concatenate(values, axis=axis)
    except ValueError:
        raise ShapeError("concat", *(v.shape for v in values)) from None
    bounds = np.cumsum([v.shape[axis] for v in values])[:-1]

    def back(g):
        return np.split(g, bounds, axis=axis)

    return _make(out, tuple(nodes), back, "concat")


def slice_axis(x: Node, axis: int, start: int, stop: int) -> Node:
    n = x.shape[axis]
    if not 0 <= start < stop <= n:
        raise ShapeError(f"slice[{start}:{stop}] on axis {axis}", x.shape)
    index = [slice(None)] * x.value.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    src = x.shape

    def back(g):
        out = np.zeros(src)
        out[index] = g
        return (out,)

    return _make(x.value[index], (x,), back, "slice")


def row_select(table: Node, ids, padding_idx: int | None = None) -> Node:
    """Gather rows of a 2-D ``table``; output shape is ``ids.shape + (d,)``.

    Positions equal to ``padding_idx`` produce zero rows and send no gradient
    back into the table.
    """
    ids = np.asarray(ids, dtype=np.int64)
    tv = table.value
    if tv.ndim != 2:
        raise ShapeError("row_select (table must be 2-D)", tv.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= tv.shape[0]):
        raise IndexError(f"row_select: ids outside [0, {tv.shape[0] - 1}]")
    out = tv[ids]
    keep = None
    if padding_idx is not None:
        keep = ids != padding_idx
        out = out * keep[..., None]

    def back(g):
        if keep is not None:
            g = g * keep[..., None]
        gt = np.zeros_like(tv)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, tv.shape[1]))
        return (gt,)

    return _make(out, (table,), back, "row_select")


def tanh(x: Node) -> Node:
    y = np.tanh(x.value)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def sigmoid(x: Node) -> Node:
    y = _sigmoid(x.value)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def relu(x: Node) -> Node:
    mask = x.value > 0
    return _make(x.value * mask, (x,), lambda g: (g * mask,), "relu")


def exp(x: Node) -> Node:
    y = np.exp(x.value)
    return _make(y, (x,), lambda g: (g * y,), "exp")


def log(x: Node) -> Node:
    xv = x.value
    return _make(np.log(xv), (x,), lambda g: (g / xv,), "log")


def _softmax(v: np.ndarray) -> np.ndarray:
    z = v - v.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _logsumexp(v: np.ndarray) -> np.ndarray:
    m = v.max(axis=-1, keepdims=True)
    return (m + np.log(np.exp(v - m).sum(axis=-1, keepdims=True)))[..., 0]


def softmax(x: Node) -> Node:
    y = _softmax(x.value)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), back, "softmax")


def logsumexp(x: Node) -> Node:
    """Max-shifted log-sum-exp over the last axis (drops that axis)."""
    xv = x.value
    out = _logsumexp(xv)
    return _make(out, (x,), lambda g: (_softmax(xv) * np.asarray(g)[..., None],), "logsumexp")


def _logmeanexp(v: np.ndarray) -> np.ndarray:
    m = v.max(axis=-1, keepdims=True)
    # expm1/log1p keep full precision when the inputs are nearly equal, where
    # log(sum exp) - log(n) would cancel down to the rounding of log(n)
    return (m + np.log1p(np.expm1(v - m).mean(axis=-1, keepdims=True)))[..., 0]


def logmeanexp(x: Node) -> Node:
    """``log(mean(exp(x)))`` over the last axis (drops that axis)."""
    xv = x.value
    out = _logmeanexp(xv)
    return _make(out, (x,), lambda g: (_softmax(xv) * np.asarray(g)[..., None],), "logmeanexp")


def sum_axis(x: Node, axis: int | None = None) -> Node:
    src = x.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, src).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), src).copy(),)

    return _make(x.value.sum(axis=axis), (x,), back, "sum")


def mean_axis(x: Node, axis: int | None = None) -> Node:
    n = x.value.size if axis is None else x.shape[axis]
    return scale(sum_axis(x, axis), 1.0 / n)


def max_axis(x: Node, axis: int) -> Node:
    xv = x.value
    idx = np.expand_dims(xv.argmax(axis=axis), axis)

    def back(g):
        out = np.zeros_like(xv)
        np.put_along_axis(out, idx, np.expand_dims(g, axis), axis=axis)
        return (out,)

    return _make(np.take_along_axis(xv, idx, axis).squeeze(axis), (x,), back, "max")


def clip(x: Node, lo: float, hi: float) -> Node:
    xv = x.value
    inside = (xv >= lo) & (xv <= hi)
    return _make(np.clip(xv, lo, hi), (x,), lambda g: (g * inside,), "clip")


def gru_cell(x: Node, h: Node, w_in: Node, w_hid: Node, b_in: Node, b_hid: Node, mask=None) -> Node:
    """One gated recurrent step over a batch.

    Gate layout in the 3H columns is (reset, update, candidate). Rows whose
    ``mask`` entry is 0 copy ``h`` through unchanged and are skipped entirely,
    so their ``x`` receives exactly zero gradient.
    """
    xv, hv = x.value, h.value
    H = hv.shape[-1]
    if (w_in.shape != (xv.shape[-1], 3 * H) or w_hid.shape != (H, 3 * H)
            or b_in.shape != (3 * H,) or b_hid.shape != (3 * H,) or xv.shape[0] != hv.shape[0]):
        raise ShapeError("gru_cell", xv.shape, hv.shape, w_in.shape, w_hid.shape, b_in.shape, b_hid.shape)
    B = hv.shape[0]
    if mask is None:
        rows = np.arange(B)
    else:
        rows = np.flatnonzero(np.asarray(mask).reshape(-1))
    full = rows.size == B
    xa = xv if full else xv[rows]
    ha = hv if full else hv[rows]
    wi, wh = w_in.value, w_hid.value
    gx = xa @ wi + b_in.value
    gh = ha @ wh + b_hid.value
    r = _sigmoid(gx[:, :H] + gh[:, :H])
    z = _sigmoid(gx[:, H:2 * H] + gh[:, H:2 * H])
    ghn = gh[:, 2 * H:]
    n = np.tanh(gx[:, 2 * H:] + r * ghn)
    h_new = (1.0 - z) * n + z * ha
    if full:
        out = h_new
    else:
        out = hv.copy()
        out[rows] = h_new

    def back(g):
        ga = g if full else g[rows]
        dn = ga * (1.0 - z)
        dz = ga * (ha - n)
        dan = dn * (1.0 - n * n)
        dar = dan * ghn * r * (1.0 - r)
        daz = dz * z * (1.0 - z)
        dgx = np.concatenate([dar, daz, dan], axis=1)
        dgh = np.concatenate([dar, daz, dan * r], axis=1)
        dha = ga * z + dgh @ wh.T
        dxa = dgx @ wi.T
        if full:
            dx, dh = dxa, dha
        else:
            dx = np.zeros_like(xv)
            dx[rows] = dxa
            dh = g.copy()
            dh[rows] = dha
        return (dx, dh, xa.T @ dgx, ha.T @ dgh, dgx.sum(axis=0), dgh.sum(axis=0))

    return _make(out, (x, h, w_in, w_hid, b_in, b_hid), back, "gru_cell")


# ---------------------------------------------------------------------------
# parameters


class ParamStore:
    """Ordered name -> parameter node mapping with an optional frozen snapshot.

    Views created with :meth:`subset` share the underlying nodes but keep an
    independent snapshot.
    """

    def __init__(self, params: Iterable[tuple[str, Node]] = ()):
        self._params: OrderedDict[str, Node] = OrderedDict()
        self.snapshot: OrderedDict[str, np.ndarray] | None = None
        for name, node in params:
            self.add(name, node)

    def add(self, name: str, value) -> Node:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        node = value if isinstance(value, Node) else parameter(value)
        node.requires_grad = True
        node.op = "parameter"
        self._params[name] = node
        return node

    def __getitem__(self, name: str) -> Node:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def subset(self, prefixes: Sequence[str]) -> ParamStore:
        return ParamStore((n, p) for n, p in self._params.items() if n.startswith(tuple(prefixes)))

    def size(self) -> int:
        return int(np.sum([p.value.size for p in self._params.values()]))

    def values(self) -> dict[str, np.ndarray]:
        return {n: p.value.copy() for n, p in self._params.items()}

    def load(self, values: dict[str, np.ndarray]) -> None:
        for name, node in self._params.items():
            if name not in values:
                raise KeyError(f"missing parameter {name!r}")
            v = np.asarray(values[name], dtype=np.float64)
            if v.shape != node.value.shape:
                raise ShapeError(f"load {name}", node.value.shape, v.shape)
            node.value = v.copy()
            node.grad = np.zeros_like(node.value)

    def zero_grad(self) -> None:
        for node in self._params.values():
            node.grad = np.zeros_like(node.value)

    def flat(self) -> np.ndarray:
        return np.concatenate([p.value.ravel() for p in self._params.values()])

    def flat_grad(self) -> np.ndarray:
        return np.concatenate([p.grad.ravel() for p in self._params.values()])

    def unflatten(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        out, i = {}, 0
        for name, node in self._params.items():
            n = node.value.size
            out[name] = flat[i:i + n].reshape(node.value.shape)
            i += n
        if i != flat.size:
            raise ShapeError("unflatten", (i,), flat.shape)
        return out


def snapshot_params(store: ParamStore) -> None:
    store.snapshot = OrderedDict((n, p.value.copy()) for n, p in store.items())


def param_displacement(store: ParamStore) -> np.ndarray:
    """Current values minus the snapshot, flattened in name order."""
    if store.snapshot is None:
        raise RuntimeError("param_displacement called before snapshot_params")
    return np.concatenate([(p.value - store.snapshot[n]).ravel() for n, p in store.items()])


def sgd_update(store: ParamStore, lr: float, ascent: bool = False) -> None:
    """One plain gradient step on every parameter, then clear gradients."""
    sign = 1.0 if ascent else -1.0
    _check_finite_grads(store)
    for node in store._params.values():
        node.value = node.value + sign * lr * node.grad
        node.grad = np.zeros_like(node.value)


def _check_finite_grads(store: ParamStore) -> None:
    for name, node in store.items():
        if not np.all(np.isfinite(node.grad)):
            raise GradientError(f"non-finite gradient for parameter {name!r}")


class SGD:
    """Stateless wrapper around :func:`sgd_update`."""

    def __init__(self, lr: float):
        self.lr = lr

    def step(self, store: ParamStore, ascent: bool = False) -> None:
        sgd_update(store, self.lr, ascent)


class Adam:
    """Adam with bias correction; moments are kept per parameter name."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, store: ParamStore, ascent: bool = False) -> None:
        _check_finite_grads(store)
        self.t += 1
        sign = 1.0 if ascent else -1.0
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, node in store.items():
            g = node.grad
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            node.value = node.value + sign * self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            node.grad = np.zeros_like(node.value)


OPTIMIZERS = {"sgd": SGD, "adam": Adam}


def make_optimizer(name: str, lr: float):
    if name not in OPTIMIZERS:
        raise ValueError(f"unknown optimizer {name!r}; choose from {sorted(OPTIMIZERS)}")
    return OPTIMIZERS[name](lr)


# ---------------------------------------------------------------------------
# gradient verification


def gradient_errors(build: Callable[[], Node], store: ParamStore, step: float = 1e-5) -> dict[str, float]:
    """Per-parameter max relative error between backprop and central differences."""
    root = build()
    if not np.all(np.isfinite(root.value)):
        raise GradientError("non-finite forward value in gradient check")
    backward(root)
    analytic = {n: p.grad.copy() for n, p in store.items()}
    errors = {}
    for name, node in store.items():
        flat = node.value.reshape(-1)
        numeric = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(build().value)
            flat[i] = orig - step
            f_minus = float(build().value)
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise GradientError(f"non-finite forward value perturbing {name}[{i}]")
            numeric[i] = (f_plus - f_minus) / (2.0 * step)
        a = analytic[name].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
        errors[name] = float(np.max(np.abs(a - numeric) / denom)) if a.size else 0.0
    return errors


def check_gradients(build: Callable[[], Node], store: ParamStore, step: float = 1e-5) -> float:
    """Max over all parameter entries of |analytic - numeric| / max(|a|, |n|, 1e-8)."""
    errors = gradient_errors(build, store, step)
    return max(errors.values()) if errors else 0.0


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, store: ParamStore, manifest: dict | None = None) -> None:
    """Write parameters as little-endian float64 records plus a version tag.

    The container is a numpy ``.npz`` archive: one ``.npy`` record per
    parameter (name, shape, raw ``<f8`` data), ``__version__`` and a UTF-8
    JSON ``__manifest__``.
    """
    arrays = {f"param/{n}": np.ascontiguousarray(p.value, dtype="<f8") for n, p in store.items()}
    arrays["__version__"] = np.array([CHECKPOINT_VERSION], dtype="<i8")
    blob = json.dumps(manifest or {}, sort_keys=True).encode("utf-8")
    arrays["__manifest__"] = np.frombuffer(blob, dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path) -> tuple[OrderedDict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as data:
        if "__version__" not in data.files:
            raise ValueError(f"{path}: not a checkpoint (missing version tag)")
        version = int(data["__version__"][0])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        manifest = json.loads(data["__manifest__"].tobytes().decode("utf-8"))
        params = OrderedDict(
            (k[len("param/"):], data[k].astype(np.float64)) for k in data.files if k.startswith("param/")
        )
    return params, manifest
