"""Reverse-mode autodiff over numpy arrays.

The design is a flat tape: every differentiable operation is a named entry in
a registry (OPS) holding a pure forward rule and a backward rule. Applying an
op records the producing op, its input tensors, and a cache on the output
Tensor; backward() walks the graph in reverse topological order and
accumulates gradients into leaf tensors. ComputationRecord exposes the same
traversal as an inspectable, replayable list of op calls.

Forward rules are pure functions of their input arrays and keyword arguments,
so replaying a record reproduces every intermediate bit for bit. Stateful
bookkeeping (BatchNorm running statistics) is deliberately kept out of the
rules and handled by the layer code using values the rule places in its cache.

Gradient checking ships with the registry: each op carries a case generator,
and grad_check_all() compares analytic gradients against central finite
differences for every registered op. perturb_backward() deliberately corrupts
one backward rule so the harness itself can be tested.
"""

from __future__ import annotations

import dataclasses
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from .errors import GraphError, NumericsError, ShapeError, ValidationError

PRECISIONS = {"single": np.float32, "double": np.float64}
_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_FINITE_CHECKS = True
_GRAD_ENABLED = True


@contextmanager
def finite_checks(enabled: bool):
    """Toggle non-finite detection on tensor creation and op outputs."""
    global _FINITE_CHECKS
    prev, _FINITE_CHECKS = _FINITE_CHECKS, enabled
    try:
        yield
    finally:
        _FINITE_CHECKS = prev


@contextmanager
def no_grad():
    """Run forwards without recording the graph (eval paths, finite diffs)."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "op", "inputs", "cache", "kwargs")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        if _FINITE_CHECKS and not np.all(np.isfinite(arr)):
            raise NumericsError("non-finite values in tensor data")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op: str | None = None
        self.inputs: tuple[Tensor, ...] = ()
        self.cache: dict = {}
        self.kwargs: dict = {}

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # Operator sugar; python scalars become constants of this tensor's dtype.
    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        return apply("add", self, self._coerce(other))

    def __radd__(self, other):
        return apply("add", self._coerce(other), self)

    def __sub__(self, other):
        return apply("sub", self, self._coerce(other))

    def __rsub__(self, other):
        return apply("sub", self._coerce(other), self)

    def __mul__(self, other):
        return apply("mul", self, self._coerce(other))

    def __rmul__(self, other):
        return apply("mul", self._coerce(other), self)

    def __neg__(self):
        return apply("neg", self)


class Parameter:
    """Named trainable leaf. The gradient buffer always exists and starts at zero."""

    def __init__(self, name: str, value):
        if not name:
            raise ValidationError("parameter name must be non-empty")
        self.name = name
        self.value = value if isinstance(value, Tensor) else Tensor(value)
        self.value.requires_grad = True
        self.value.grad = np.zeros_like(self.value.data)

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def grad(self) -> np.ndarray:
        return self.value.grad

    def zero_grad(self) -> None:
        self.value.grad[...] = 0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.data.shape})"


@dataclasses.dataclass(frozen=True)
class OpDef:
    """One registry entry.

    forward: (*arrays, **kwargs) -> (out_array, cache). Pure.
    backward: (cache, grad_out) -> tuple of per-input gradients (None allowed).
    gradcheck: rng -> (arrays, kwargs, differentiable_flags), or None for ops
        excluded from the gradient-check table.
    """

    name: str
    forward: Callable
    backward: Callable
    gradcheck: Callable | None = None


OPS: dict[str, OpDef] = {}


def register(name: str, forward, backward, gradcheck=None) -> None:
    if name in OPS:
        raise ValidationError(f"op {name!r} already registered")
    OPS[name] = OpDef(name, forward, backward, gradcheck)


def apply(name: str, *tensors: Tensor, **kwargs) -> Tensor:
    """Run a registered op on tensors, recording the call if grad is enabled."""
    opdef = OPS.get(name)
    if opdef is None:
        raise ValidationError(f"unknown op {name!r}")
    out_data, cache = opdef.forward(*[t.data for t in tensors], **kwargs)
    if _FINITE_CHECKS and not np.all(np.isfinite(out_data)):
        raise NumericsError(f"op {name!r} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    if _GRAD_ENABLED:
        out.op = name
        out.inputs = tensors
        out.cache = cache
        out.kwargs = kwargs
        out.requires_grad = any(t.requires_grad for t in tensors)
    else:
        out.op = None
        out.inputs = ()
        out.cache = {}
        out.kwargs = {}
        out.requires_grad = False
    return out


def _toposort(root: Tensor) -> list[Tensor]:
    # Iterative DFS; children appear before parents. GRAY revisit means a cycle.
    WHITE, GRAY, BLACK = 0, 1, 2
    color: dict[int, int] = {}
    order: list[Tensor] = []
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        node, idx = stack.pop()
        if idx == 0:
            c = color.get(id(node), WHITE)
            if c == BLACK:
                continue
            color[id(node)] = GRAY
        if idx < len(node.inputs):
            stack.append((node, idx + 1))
            child = node.inputs[idx]
            cc = color.get(id(child), WHITE)
            if cc == GRAY:
                raise GraphError("cycle detected in record")
            if cc == WHITE:
                stack.append((child, 0))
        else:
            color[id(node)] = BLACK
            order.append(node)
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's .grad buffer."""
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise GraphError(f"loss must be scalar, got shape {loss.data.shape}")
    order = _toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.op is None:
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            continue
        if not node.requires_grad:
            continue
        in_grads = OPS[node.op].backward(node.cache, g)
        if len(in_grads) != len(node.inputs):
            raise GraphError(f"op {node.op!r} backward returned {len(in_grads)} "
                             f"gradients for {len(node.inputs)} inputs")
        for t, ig in zip(node.inputs, in_grads):
            if ig is None or not t.requires_grad:
                continue
            if ig.shape != t.data.shape:
                raise GraphError(f"op {node.op!r} gradient shape {ig.shape} "
                                 f"!= input shape {t.data.shape}")
            acc = grads.get(id(t))
            grads[id(t)] = ig if acc is None else acc + ig


@dataclasses.dataclass(frozen=True)
class OpCall:
    op: str
    output: Tensor
    inputs: tuple[Tensor, ...]
    kwargs: dict


class ComputationRecord:
    """The op calls reachable from a root tensor, in forward (topological) order."""

    def __init__(self, entries: list[OpCall]):
        self.entries = entries

    @classmethod
    def trace(cls, root: Tensor) -> "ComputationRecord":
        entries = [OpCall(t.op, t, t.inputs, t.kwargs)
                   for t in _toposort(root) if t.op is not None]
        return cls(entries)

    def __len__(self):
        return len(self.entries)

    def replay(self) -> None:
        """Recompute every entry from its recorded inputs; raise on any bit drift."""
        for call in self.entries:
            out, _ = OPS[call.op].forward(*[t.data for t in call.inputs], **call.kwargs)
            same = (out.dtype == call.output.data.dtype
                    and out.shape == call.output.data.shape
                    and np.array_equal(out, call.output.data))
            if not same:
                raise GraphError(f"replay mismatch in op {call.op!r}")


# ---------------------------------------------------------------------------
# op library
# ---------------------------------------------------------------------------

def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # Sum a broadcasted gradient back down to `shape`.
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _f_add(a, b):
    return a + b, {"sa": a.shape, "sb": b.shape}


def _b_add(cache, g):
    return _unbroadcast(g, cache["sa"]), _unbroadcast(g, cache["sb"])


def _f_sub(a, b):
    return a - b, {"sa": a.shape, "sb": b.shape}


def _b_sub(cache, g):
    return _unbroadcast(g, cache["sa"]), _unbroadcast(-g, cache["sb"])


def _f_mul(a, b):
    return a * b, {"a": a, "b": b}


def _b_mul(cache, g):
    a, b = cache["a"], cache["b"]
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _f_neg(a):
    return -a, {}


def _b_neg(cache, g):
    return (-g,)


def _f_exp(a):
    out = np.exp(a)
    return out, {"out": out}


def _b_exp(cache, g):
    return (g * cache["out"],)


def _f_linear(x, w, b=None):
    if w.ndim != 2:
        raise ShapeError(f"linear weight must be 2-d, got {w.shape}")
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear shapes {x.shape} @ {w.shape} do not align")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear bias shape {b.shape} != ({w.shape[1]},)")
    x2 = x.reshape(-1, w.shape[0])
    out2 = x2 @ w
    if b is not None:
        out2 = out2 + b
    out = out2.reshape(x.shape[:-1] + (w.shape[1],))
    return out, {"x2": x2, "w": w, "xshape": x.shape, "has_bias": b is not None}


def _b_linear(cache, g):
    w = cache["w"]
    g2 = g.reshape(-1, w.shape[1])
    gx = (g2 @ w.T).reshape(cache["xshape"])
    gw = cache["x2"].T @ g2
    if cache["has_bias"]:
        return gx, gw, g2.sum(axis=0)
    return gx, gw


def _f_conv3d(x, k, b):
    # x: [..., D, H, W, Cin] with at most one leading batch axis,
    # k: [3, 3, 3, Cin, Cout], b: [Cout]. Stride 1, zero pad 1.
    if x.ndim not in (4, 5):
        raise ShapeError(f"conv3d input must be [D, H, W, C] or [B, D, H, W, C], "
                         f"got {x.shape}")
    if k.ndim != 5 or k.shape[:3] != (3, 3, 3) or k.shape[3] != x.shape[-1]:
        raise ShapeError(f"conv3d kernel {k.shape} does not match input {x.shape}")
    if b.shape != (k.shape[4],):
        raise ShapeError(f"conv3d bias shape {b.shape} != ({k.shape[4]},)")
    lead = x.shape[:-4]
    D, H, W, ci = x.shape[-4:]
    co = k.shape[4]
    xp = np.pad(x, [(0, 0)] * len(lead) + [(1, 1), (1, 1), (1, 1), (0, 0)])
    out = np.broadcast_to(b, lead + (D, H, W, co)).astype(x.dtype, copy=True)
    flat = out.reshape(-1, co)
    for kd in range(3):
        for kh in range(3):
            for kw in range(3):
                patch = xp[..., kd:kd + D, kh:kh + H, kw:kw + W, :].reshape(-1, ci)
                flat += patch @ k[kd, kh, kw]
    return out, {"xp": xp, "k": k, "dims": (D, H, W)}


def _b_conv3d(cache, g):
    xp, k = cache["xp"], cache["k"]
    D, H, W = cache["dims"]
    ci, co = k.shape[3], k.shape[4]
    lead = xp.shape[:-4]
    g2 = g.reshape(-1, co)
    gk = np.zeros_like(k)
    gxp = np.zeros_like(xp)
    for kd in range(3):
        for kh in range(3):
            for kw in range(3):
                patch = xp[..., kd:kd + D, kh:kh + H, kw:kw + W, :].reshape(-1, ci)
                gk[kd, kh, kw] = patch.T @ g2
                gxp[..., kd:kd + D, kh:kh + H, kw:kw + W, :] += \
                    (g2 @ k[kd, kh, kw].T).reshape(lead + (D, H, W, ci))
    gx = gxp[..., 1:-1, 1:-1, 1:-1, :]
    gb = g2.sum(axis=0)
    return gx, gk, gb


def _bn_axes(x):
    return tuple(range(x.ndim - 1))


def _f_batch_norm(x, gamma, beta, *, mode, eps=1e-5, running_mean=None, running_var=None):
    # Normalizes over every axis except the trailing channel axis.
    if mode not in ("train", "eval"):
        raise ValidationError(f"batch_norm mode must be 'train' or 'eval', got {mode!r}")
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm affine shapes {gamma.shape}/{beta.shape} != ({c},)")
    axes = _bn_axes(x)
    if mode == "train":
        m = int(np.prod([x.shape[a] for a in axes])) if axes else 1
        if m < 2:
            raise ValidationError("batch_norm train mode needs at least 2 "
                                  "positions per channel to estimate statistics")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        invstd = 1.0 / np.sqrt(var + eps)
        xhat = (x - mean) * invstd
        out = gamma * xhat + beta
        cache = {"mode": mode, "xhat": xhat, "invstd": invstd, "gamma": gamma,
                 "axes": axes, "m": m, "batch_mean": mean, "batch_var": var}
        return out, cache
    if running_mean is None or running_var is None:
        raise ValidationError("batch_norm eval mode requires running statistics")
    if running_mean.shape != (c,) or running_var.shape != (c,):
        raise ShapeError("batch_norm running statistics must be per-channel")
    invstd = 1.0 / np.sqrt(running_var + eps)
    xhat = (x - running_mean) * invstd
    out = gamma * xhat + beta
    return out, {"mode": mode, "xhat": xhat, "invstd": invstd, "gamma": gamma,
                 "axes": axes}


def _b_batch_norm(cache, g):
    axes = cache["axes"]
    xhat, invstd, gamma = cache["xhat"], cache["invstd"], cache["gamma"]
    ggamma = (g * xhat).sum(axis=axes)
    gbeta = g.sum(axis=axes)
    if cache["mode"] == "eval":
        gx = g * (gamma * invstd)
        return gx, ggamma, gbeta
    gxhat = g * gamma
    mean_g = gxhat.mean(axis=axes, keepdims=True)
    mean_gx = (gxhat * xhat).mean(axis=axes, keepdims=True)
    gx = invstd * (gxhat - mean_g - xhat * mean_gx)
    return gx, ggamma, gbeta


def _f_layer_norm(x, gamma, beta, *, eps=1e-5):
    # Normalizes the trailing axis of each token independently.
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} != ({c},)")
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * invstd
    out = gamma * xhat + beta
    return out, {"xhat": xhat, "invstd": invstd, "gamma": gamma}


def _b_layer_norm(cache, g):
    xhat, invstd, gamma = cache["xhat"], cache["invstd"], cache["gamma"]
    lead = tuple(range(g.ndim - 1))
    ggamma = (g * xhat).sum(axis=lead)
    gbeta = g.sum(axis=lead)
    gxhat = g * gamma
    mean_g = gxhat.mean(axis=-1, keepdims=True)
    mean_gx = (gxhat * xhat).mean(axis=-1, keepdims=True)
    gx = invstd * (gxhat - mean_g - xhat * mean_gx)
    return gx, ggamma, gbeta


def _f_relu(x):
    mask = x > 0
    return np.where(mask, x, 0.0).astype(x.dtype), {"mask": mask}


def _b_relu(cache, g):
    return (np.where(cache["mask"], g, 0.0),)


def _stable_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _f_silu(x):
    sig = _stable_sigmoid(x)
    return x * sig, {"x": x, "sig": sig}


def _b_silu(cache, g):
    x, sig = cache["x"], cache["sig"]
    return (g * (sig * (1.0 + x * (1.0 - sig))),)


_SOFTPLUS_CLAMP = 20.0


def _f_softplus(x):
    # log1p(exp(x)) overflows for large x; past the clamp the identity is exact
    # to double precision anyway.
    safe = np.minimum(x, _SOFTPLUS_CLAMP)
    out = np.where(x > _SOFTPLUS_CLAMP, x, np.log1p(np.exp(safe)))
    return out.astype(x.dtype), {"x": x}


def _b_softplus(cache, g):
    return (g * _stable_sigmoid(cache["x"]),)


def _f_sigmoid(x):
    out = _stable_sigmoid(x)
    return out, {"out": out}


def _b_sigmoid(cache, g):
    out = cache["out"]
    return (g * out * (1.0 - out),)


def _f_softmax(x, *, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return out, {"out": out, "axis": axis}


def _b_softmax(cache, g):
    out, axis = cache["out"], cache["axis"]
    dot = (g * out).sum(axis=axis, keepdims=True)
    return (out * (g - dot),)


def _f_sum(x, *, axis=None, keepdims=False):
    return x.sum(axis=axis, keepdims=keepdims), {"shape": x.shape, "axis": axis,
                                                 "keepdims": keepdims}


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = axis if isinstance(axis, tuple) else (axis,)
    axes = tuple(a % len(shape) for a in axes)
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def _b_sum(cache, g):
    # np.copy rather than ascontiguousarray: the latter promotes 0-d to 1-d.
    out = _expand_reduced(g, cache["shape"], cache["axis"], cache["keepdims"])
    return (np.copy(out),)


def _f_mean(x, *, axis=None, keepdims=False):
    out = x.mean(axis=axis, keepdims=keepdims)
    count = x.size if axis is None else int(np.prod(
        [x.shape[a % x.ndim] for a in (axis if isinstance(axis, tuple) else (axis,))]))
    return out, {"shape": x.shape, "axis": axis, "keepdims": keepdims, "count": count}


def _b_mean(cache, g):
    out = _expand_reduced(g, cache["shape"], cache["axis"], cache["keepdims"])
    return (np.copy(out) / cache["count"],)


def _f_reshape(x, *, shape):
    return np.reshape(x, shape), {"shape": x.shape}


def _b_reshape(cache, g):
    return (g.reshape(cache["shape"]),)


def _f_transpose(x, *, axes):
    return np.ascontiguousarray(np.transpose(x, axes)), {"axes": axes}


def _b_transpose(cache, g):
    inv = np.argsort(cache["axes"])
    return (np.ascontiguousarray(np.transpose(g, inv)),)


def _f_take(x, *, indices, axis=0):
    idx = np.asarray(indices)
    if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
        raise ValidationError("take indices must be a 1-d integer array")
    n = x.shape[axis]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ValidationError(f"take index out of range for axis length {n}")
    return np.take(x, idx, axis=axis), {"shape": x.shape, "indices": idx, "axis": axis}


def _b_take(cache, g):
    gx = np.zeros(cache["shape"], dtype=g.dtype)
    axis = cache["axis"]
    gm = np.moveaxis(gx, axis, 0)
    np.add.at(gm, cache["indices"], np.moveaxis(g, axis, 0))
    return (gx,)


def _f_concat(*xs, axis=0):
    if not xs:
        raise ValidationError("concat needs at least one input")
    return np.concatenate(xs, axis=axis), {"axis": axis,
                                           "sizes": [x.shape[axis] for x in xs]}


def _b_concat(cache, g):
    splits = np.cumsum(cache["sizes"])[:-1]
    return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=cache["axis"]))


# Gradient-check case generators. Inputs are drawn at O(1) scale and away from
# the kinks of the piecewise ops so central differences are trustworthy.

def _gc_elementwise(rng):
    x = rng.standard_normal((4, 5))
    x = x + np.sign(x) * 0.1  # keep clear of relu's corner
    return [x], {}, (True,)


def _gc_pair(rng):
    a = rng.standard_normal((4, 5))
    b = rng.standard_normal((1, 5))  # exercises broadcasting in the backward
    return [a, b], {}, (True, True)


def _gc_linear(rng):
    x = rng.standard_normal((3, 4, 6))
    w = rng.standard_normal((6, 5))
    b = rng.standard_normal(5)
    return [x, w, b], {}, (True, True, True)


def _gc_conv3d(rng):
    # Alternate between the plain and the batched input layout.
    shape = (3, 4, 5, 2) if rng.integers(2) == 0 else (2, 3, 4, 5, 2)
    x = rng.standard_normal(shape)
    k = rng.standard_normal((3, 3, 3, 2, 3)) * 0.5
    b = rng.standard_normal(3)
    return [x, k, b], {}, (True, True, True)


def _gc_batch_norm(rng):
    x = rng.standard_normal((4, 3, 5))
    gamma = rng.standard_normal(5) + 1.5
    beta = rng.standard_normal(5)
    return [x, gamma, beta], {"mode": "train"}, (True, True, True)


def _gc_layer_norm(rng):
    x = rng.standard_normal((4, 3, 6))
    gamma = rng.standard_normal(6) + 1.5
    beta = rng.standard_normal(6)
    return [x, gamma, beta], {}, (True, True, True)


def _gc_softmax(rng):
    x = rng.standard_normal((4, 5)) * 2.0
    return [x], {"axis": -1}, (True,)


def _gc_sum(rng):
    x = rng.standard_normal((3, 4, 5))
    return [x], {"axis": 1, "keepdims": False}, (True,)


def _gc_reshape(rng):
    x = rng.standard_normal((3, 4, 5))
    return [x], {"shape": (12, 5)}, (True,)


def _gc_transpose(rng):
    x = rng.standard_normal((3, 4, 5))
    return [x], {"axes": (2, 0, 1)}, (True,)


def _gc_take(rng):
    x = rng.standard_normal((6, 4))
    idx = rng.integers(0, 6, size=9)  # repeats force accumulation in backward
    return [x], {"indices": idx, "axis": 0}, (True,)


def _gc_concat(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((2, 4))
    c = rng.standard_normal((4, 4))
    return [a, b, c], {"axis": 0}, (True, True, True)


register("add", _f_add, _b_add, _gc_pair)
register("sub", _f_sub, _b_sub, _gc_pair)
register("mul", _f_mul, _b_mul, _gc_pair)
register("neg", _f_neg, _b_neg, _gc_elementwise)
register("exp", _f_exp, _b_exp, _gc_elementwise)
register("linear", _f_linear, _b_linear, _gc_linear)
register("conv3d", _f_conv3d, _b_conv3d, _gc_conv3d)
register("batch_norm", _f_batch_norm, _b_batch_norm, _gc_batch_norm)
register("layer_norm", _f_layer_norm, _b_layer_norm, _gc_layer_norm)
register("relu", _f_relu, _b_relu, _gc_elementwise)
register("silu", _f_silu, _b_silu, _gc_elementwise)
register("softplus", _f_softplus, _b_softplus, _gc_elementwise)
register("sigmoid", _f_sigmoid, _b_sigmoid, _gc_elementwise)
register("softmax", _f_softmax, _b_softmax, _gc_softmax)
register("sum", _f_sum, _b_sum, _gc_sum)
register("mean", _f_mean, _b_mean, _gc_sum)
register("reshape", _f_reshape, _b_reshape, _gc_reshape)
register("transpose", _f_transpose, _b_transpose, _gc_transpose)
register("take", _f_take, _b_take, _gc_take)
register("concat", _f_concat, _b_concat, _gc_concat)


# Functional wrappers so calling code reads like math instead of apply() strings.

def add(a: Tensor, b: Tensor) -> Tensor:
    return apply("add", a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return apply("sub", a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return apply("mul", a, b)


def scale(x: Tensor, c: float) -> Tensor:
    return apply("mul", x, Tensor(np.asarray(c, dtype=x.data.dtype)))


def exp(x: Tensor) -> Tensor:
    return apply("exp", x)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    if b is None:
        return apply("linear", x, w)
    return apply("linear", x, w, b)


def conv3d(x: Tensor, k: Tensor, b: Tensor) -> Tensor:
    return apply("conv3d", x, k, b)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, *, mode: str,
               eps: float = 1e-5, running_mean=None, running_var=None) -> Tensor:
    return apply("batch_norm", x, gamma, beta, mode=mode, eps=eps,
                 running_mean=running_mean, running_var=running_var)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, *, eps: float = 1e-5) -> Tensor:
    return apply("layer_norm", x, gamma, beta, eps=eps)


def relu(x: Tensor) -> Tensor:
    return apply("relu", x)


def silu(x: Tensor) -> Tensor:
    return apply("silu", x)


def softplus(x: Tensor) -> Tensor:
    return apply("softplus", x)


def sigmoid(x: Tensor) -> Tensor:
    return apply("sigmoid", x)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return apply("softmax", x, axis=axis)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return apply("sum", x, axis=axis, keepdims=keepdims)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return apply("mean", x, axis=axis, keepdims=keepdims)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return apply("reshape", x, shape=tuple(shape))


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    return apply("transpose", x, axes=tuple(axes))


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    return apply("take", x, indices=np.asarray(indices), axis=axis)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    return apply("concat", *xs, axis=axis)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def finite_diff(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar-valued f at x, in double precision."""
    base = x.data.astype(np.float64)
    g = np.zeros_like(base)
    flat = base.reshape(-1)
    gf = g.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = f(Tensor(base)).item()
            flat[i] = orig - h
            lo = f(Tensor(base)).item()
            flat[i] = orig
            gf[i] = (hi - lo) / (2.0 * h)
    return Tensor(g)


def _fd_array(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    x = x.astype(np.float64).copy()
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(x)
        flat[i] = orig - h
        lo = f(x)
        flat[i] = orig
        gf[i] = (hi - lo) / (2.0 * h)
    return g


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(float(np.abs(a).max(initial=0.0)), float(np.abs(b).max(initial=0.0)))
    if denom < 1e-12:
        return 0.0
    return float(np.abs(a - b).max(initial=0.0)) / denom


@dataclasses.dataclass
class GradCheckResult:
    op: str
    trials: int
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def grad_check_op(name: str, *, trials: int = 20, tol: float = 1e-4,
                  seed: int = 0) -> GradCheckResult:
    """Analytic vs central-difference gradients for one registered op.

    The finite-difference side goes through the raw forward rule only, so it
    stays independent of the backward implementation under test.
    """
    opdef = OPS.get(name)
    if opdef is None:
        raise ValidationError(f"unknown op {name!r}")
    if opdef.gradcheck is None:
        raise ValidationError(f"op {name!r} has no gradient-check case")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        arrays, kwargs, diff = opdef.gradcheck(rng)
        arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
        tensors = [Tensor(a, requires_grad=d) for a, d in zip(arrays, diff)]
        out = apply(name, *tensors, **kwargs)
        w = rng.standard_normal(out.data.shape)
        loss = sum_(mul(out, Tensor(w)))
        backward(loss)

        def raw_loss(datas):
            o, _ = opdef.forward(*datas, **kwargs)
            return float((o * w).sum())

        for i, is_diff in enumerate(diff):
            if not is_diff:
                continue

            def f(a, _i=i):
                datas = [t.data for t in tensors]
                datas[_i] = a
                return raw_loss(datas)

            fd = _fd_array(f, arrays[i])
            worst = max(worst, _rel_err(tensors[i].grad, fd.astype(tensors[i].grad.dtype)))
    return GradCheckResult(name, trials, worst, tol)


def grad_check_all(*, trials: int = 20, tol: float = 1e-4,
                   seed: int = 0) -> list[GradCheckResult]:
    """Run grad_check_op for every registered op that carries a case, sorted by name."""
    results = []
    for i, name in enumerate(sorted(OPS)):
        if OPS[name].gradcheck is None:
            continue
        results.append(grad_check_op(name, trials=trials, tol=tol, seed=seed + i))
    return results


@contextmanager
def perturb_backward(name: str, factor: float = 1.5):
    """Deliberately corrupt one op's backward rule; the checker must catch it."""
    opdef = OPS.get(name)
    if opdef is None:
        raise ValidationError(f"unknown op {name!r}")
    orig = opdef.backward

    def corrupted(cache, g):
        grads = orig(cache, g)
        return tuple(None if x is None else x * factor for x in grads)

    OPS[name] = dataclasses.replace(opdef, backward=corrupted)
    try:
        yield
    finally:
        OPS[name] = opdef
