"""Dense float64 tensors with reverse-mode differentiation, MLPs, and Adam.

Everything is 64-bit and deterministic given its inputs; randomness only
enters through explicitly passed numpy Generators. The op set is deliberately
small: affine maps, relu/tanh/exp, concatenation, L1 normalization, L2 norm,
elementwise add/mul, axis sums and means, squared error, and max against a
constant. That is exactly what the reward and agent networks need.

Gradients are accumulated by closure-based backprop over a tape of parents,
micrograd-style but batched over numpy arrays.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, ContractViolation

Array = np.ndarray

_L1_GUARD = 1e-8   # floor for L1 normalization denominators
_L2_GUARD = 1e-12  # floor for L2-norm gradient denominators


class Tensor:
    """A numpy-backed autodiff value. 0-d, 1-d, or 2-d float64."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        self.data: Array = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self._backward: Callable[[], None] | None = None
        self._parents: tuple[Tensor, ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accum(self, g: Array) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Backpropagate from this scalar through the recorded graph."""
        if self.data.size != 1:
            raise ContractViolation("backward() requires a scalar output")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        self._accum(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum gradient g down to `shape` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gs, ts) in enumerate(zip(g.shape, shape)):
        if ts == 1 and gs != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _make(data: Array, parents: tuple[Tensor, ...], backward: Callable[["Tensor"], Callable[[], None]]) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward(out)
    return out


# -- primitive ops ------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(out):
        def run():
            if a.requires_grad:
                a._accum(_unbroadcast(out.grad, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(out.grad, b.data.shape))
        return run

    return _make(a.data + b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(out):
        def run():
            if a.requires_grad:
                a._accum(_unbroadcast(out.grad * b.data, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(out.grad * a.data, b.data.shape))
        return run

    return _make(a.data * b.data, (a, b), bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ConfigurationError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ConfigurationError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(out):
        def run():
            if a.requires_grad:
                a._accum(out.grad @ b.data.T)
            if b.requires_grad:
                b._accum(a.data.T @ out.grad)
        return run

    return _make(a.data @ b.data, (a, b), bw)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0.0

    def bw(out):
        def run():
            x._accum(out.grad * mask)
        return run

    return _make(np.where(mask, x.data, 0.0), (x,), bw)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)

    def bw(out):
        def run():
            x._accum(out.grad * (1.0 - y * y))
        return run

    return _make(y, (x,), bw)


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)

    def bw(out):
        def run():
            x._accum(out.grad * y)
        return run

    return _make(y, (x,), bw)


def maximum_const(x, c: float) -> Tensor:
    """Elementwise max(x, c); subgradient 0 on the clamped branch."""
    x = as_tensor(x)
    mask = x.data > c

    def bw(out):
        def run():
            x._accum(out.grad * mask)
        return run

    return _make(np.where(mask, x.data, c), (x,), bw)


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(p) for p in parts]
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bw(out):
        def run():
            for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    idx = [slice(None)] * out.grad.ndim
                    idx[axis if axis >= 0 else out.grad.ndim + axis] = slice(lo, hi)
                    t._accum(out.grad[tuple(idx)])
        return run

    return _make(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), bw)


def sum_(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)

    def bw(out):
        def run():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            x._accum(np.broadcast_to(g, x.data.shape).copy())
        return run

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), bw)


def mean_(x) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    return mul(sum_(x), 1.0 / n)


def l1_normalize(x) -> Tensor:
    """Rows scaled to unit L1 mass: x / max(sum(x, last axis), 1e-8).

    Intended for nonnegative inputs (post-relu); the guard keeps an all-zero
    row at zero instead of producing NaN.
    """
    x = as_tensor(x)
    s = x.data.sum(axis=-1, keepdims=True)
    denom = np.maximum(s, _L1_GUARD)
    guarded = s <= _L1_GUARD
    y = x.data / denom

    def bw(out):
        def run():
            g = out.grad
            # active guard: denominator is constant
            dot = (g * y).sum(axis=-1, keepdims=True)
            gx = np.where(guarded, g / denom, (g - dot) / denom)
            x._accum(gx)
        return run

    return _make(y, (x,), bw)


def l2_norm(x) -> Tensor:
    """Euclidean norm along the last axis; shape drops one dimension."""
    x = as_tensor(x)
    n = np.sqrt((x.data * x.data).sum(axis=-1))

    def bw(out):
        def run():
            denom = np.maximum(n, _L2_GUARD)[..., None]
            x._accum(out.grad[..., None] * x.data / denom)
        return run

    return _make(n, (x,), bw)


def mse(a, b) -> Tensor:
    """Mean over all elements of the squared difference."""
    d = add(as_tensor(a), mul(as_tensor(b), -1.0))
    return mean_(mul(d, d))


def row_sumsq(x) -> Tensor:
    """Sum of squares along the last axis (squared L2 of each row)."""
    x = as_tensor(x)
    return sum_(mul(x, x), axis=-1)


# -- MLPs ----------------------------------------------------------------

_HIDDEN_ACTS = ("relu", "tanh")
_OUTPUT_ACTS = ("identity", "relu")


@dataclass(frozen=True)
class MLPSpec:
    """Layer widths (input first, output last) and activations."""

    layer_widths: tuple[int, ...]
    hidden_activation: str = "relu"
    output_activation: str = "identity"

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if len(self.layer_widths) < 2:
            raise ConfigurationError("MLPSpec needs at least one layer (two widths)")
        if any(w <= 0 for w in self.layer_widths):
            raise ConfigurationError(f"widths must be positive, got {self.layer_widths}")
        if self.hidden_activation not in _HIDDEN_ACTS:
            raise ConfigurationError(f"hidden_activation must be one of {_HIDDEN_ACTS}")
        if self.output_activation not in _OUTPUT_ACTS:
            raise ConfigurationError(f"output_activation must be one of {_OUTPUT_ACTS}")

    @property
    def in_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def out_dim(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1


ParamSet = dict  # name -> Tensor, iterated in sorted-name order


def param_names(spec: MLPSpec, prefix: str = "") -> list[str]:
    names = []
    for i in range(spec.n_layers):
        names += [f"{prefix}W{i}", f"{prefix}b{i}"]
    return sorted(names)


def init_mlp_params(spec: MLPSpec, rng: np.random.Generator, prefix: str = "") -> ParamSet:
    """Uniform(-sqrt(6/(fan_in+fan_out)), +...) weights, zero biases."""
    params: ParamSet = {}
    for i in range(spec.n_layers):
        fan_in, fan_out = spec.layer_widths[i], spec.layer_widths[i + 1]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        params[f"{prefix}W{i}"] = Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)
        params[f"{prefix}b{i}"] = Tensor(np.zeros(fan_out), requires_grad=True)
    return dict(sorted(params.items()))


def _apply_activation(x: Tensor, name: str) -> Tensor:
    if name == "relu":
        return relu(x)
    if name == "tanh":
        return tanh(x)
    return x


def mlp_forward(spec: MLPSpec, params: ParamSet, x, prefix: str = "") -> Tensor:
    """Run the MLP on a (batch, in_dim) or (in_dim,) input."""
    t = as_tensor(x)
    squeeze = t.data.ndim == 1
    if squeeze:
        t = Tensor(t.data[None, :], requires_grad=t.requires_grad)
        if t.requires_grad:  # pragma: no cover - inputs are constants in practice
            raise ConfigurationError("1-d inputs with gradients are not supported")
    if t.data.ndim != 2 or t.data.shape[1] != spec.in_dim:
        raise ConfigurationError(
            f"input shape {np.asarray(x).shape} incompatible with input width {spec.in_dim}")
    for i in range(spec.n_layers):
        t = add(matmul(t, params[f"{prefix}W{i}"]), params[f"{prefix}b{i}"])
        act = spec.hidden_activation if i < spec.n_layers - 1 else spec.output_activation
        t = _apply_activation(t, act)
    if not np.all(np.isfinite(t.data)):
        raise ContractViolation("mlp_forward produced non-finite values")
    if squeeze:
        out = Tensor(t.data[0])
        return out
    return t


def mlp_forward_array(spec: MLPSpec, params: ParamSet, x: Array, prefix: str = "") -> Array:
    """Graph-free forward pass; bit-identical to mlp_forward on the same input."""
    h = np.asarray(x, dtype=np.float64)
    squeeze = h.ndim == 1
    if squeeze:
        h = h[None, :]
    if h.shape[1] != spec.in_dim:
        raise ConfigurationError(f"input width {h.shape[1]} != {spec.in_dim}")
    for i in range(spec.n_layers):
        h = h @ params[f"{prefix}W{i}"].data + params[f"{prefix}b{i}"].data
        act = spec.hidden_activation if i < spec.n_layers - 1 else spec.output_activation
        if act == "relu":
            h = np.where(h > 0.0, h, 0.0)
        elif act == "tanh":
            h = np.tanh(h)
    return h[0] if squeeze else h


# -- gradients -----------------------------------------------------------

def eval_with_grads(computation: Callable[[ParamSet], Tensor], params: ParamSet) -> tuple[float, dict]:
    """Evaluate a scalar-valued computation and return (value, grads).

    Gradients mirror the shapes of `params`; parameters the computation never
    touches get zero gradients.
    """
    for p in params.values():
        p.grad = None
    out = computation(params)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ContractViolation("computation must produce a scalar Tensor")
    if not np.isfinite(out.data).all():
        raise ContractViolation("computation produced a non-finite loss")
    out.backward()
    grads = {}
    for name in sorted(params):
        g = params[name].grad
        grads[name] = np.zeros_like(params[name].data) if g is None else g
    value = out.item()
    for p in params.values():
        p.grad = None
    return value, grads


def grad_check(computation: Callable[[ParamSet], Tensor], params: ParamSet, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients."""
    if eps <= 0:
        raise ConfigurationError("eps must be positive")
    _, grads = eval_with_grads(computation, params)

    def value_at() -> float:
        out = computation(params)
        return out.item()

    worst = 0.0
    for name in sorted(params):
        flat = params[name].data.reshape(-1)
        gflat = grads[name].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = value_at()
            flat[j] = orig - eps
            down = value_at()
            flat[j] = orig
            numeric = (up - down) / (2.0 * eps)
            analytic = gflat[j]
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


# -- Adam ----------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moments keyed like the ParamSet, plus the step counter."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParamSet, lr: float, **kw) -> "AdamState":
        state = cls(lr=lr, **kw)
        state.m = {k: np.zeros_like(p.data) for k, p in sorted(params.items())}
        state.v = {k: np.zeros_like(p.data) for k, p in sorted(params.items())}
        return state


def adam_step(params: ParamSet, grads: Mapping[str, Array], state: AdamState) -> tuple[ParamSet, AdamState]:
    """One bias-corrected Adam update; returns fresh params and state."""
    if set(params) != set(grads) or set(params) != set(state.m):
        raise ContractViolation("params, grads, and Adam state must share keys")
    t = state.t + 1
    new_params: ParamSet = {}
    new_m, new_v = {}, {}
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name in sorted(params):
        p, g = params[name], np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.data.shape:
            raise ContractViolation(f"gradient shape {g.shape} != param shape {p.data.shape} for {name}")
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        q = Tensor(p.data - step, requires_grad=True)
        if not np.all(np.isfinite(q.data)):
            raise ContractViolation(f"non-finite parameter after Adam step for {name}")
        new_params[name] = q
        new_m[name], new_v[name] = m, v
    new_state = replace(state, t=t, m=new_m, v=new_v)
    return new_params, new_state


def polyak_update(target: ParamSet, online: ParamSet, tau: float) -> ParamSet:
    """target <- (1 - tau) * target + tau * online, as a fresh ParamSet."""
    return {
        name: Tensor((1.0 - tau) * target[name].data + tau * online[name].data)
        for name in sorted(target)
    }


def clone_params(params: ParamSet, requires_grad: bool = False) -> ParamSet:
    return {name: Tensor(p.data.copy(), requires_grad=requires_grad) for name, p in sorted(params.items())}


# -- serialization -------------------------------------------------------

def params_to_doc(params: ParamSet) -> dict:
    """Flat JSON-able document: {name: {shape: [...], values: [...]}}."""
    return {
        name: {"shape": list(p.data.shape), "values": p.data.reshape(-1).tolist()}
        for name, p in sorted(params.items())
    }


def params_from_doc(doc: Mapping, requires_grad: bool = True) -> ParamSet:
    params: ParamSet = {}
    for name in sorted(doc):
        entry = doc[name]
        arr = np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
        params[name] = Tensor(arr, requires_grad=requires_grad)
    return params
