"""Small reverse-mode autodiff engine over numpy arrays.

Every operation records its parents and a vector-Jacobian closure. Input
Jacobians of an MLP are produced by pushing forward-mode tangents through the
network *as ordinary graph operations*, so one reverse sweep over a loss that
contains a Jacobian yields the mixed second derivatives d2F/dx dtheta with no
special casing.

All arithmetic is float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .errors import ContractError, NumericError, ShapeError

Array = np.ndarray


def _as_array(value) -> Array:
    return np.asarray(value, dtype=np.float64)


def _unbroadcast(grad: Array, shape: tuple) -> Array:
    # sum out the axes numpy broadcast over in the forward pass
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        self.data = _as_array(data)
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.data.shape})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> Array:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _node(data: Array, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    out = Tensor(data, op=op)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


# elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                 "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * out / bd, bd.shape)),
                 "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    if exponent == 2:
        return _node(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")
    return _node(ad ** exponent, (a,),
                 lambda g: (g * exponent * ad ** (exponent - 1),), "pow")


def square(a) -> Tensor:
    return power(a, 2)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _node(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def sin(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _node(np.sin(ad), (a,), lambda g: (g * np.cos(ad),), "sin")


def cos(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _node(np.cos(ad), (a,), lambda g: (-g * np.sin(ad),), "cos")


def sigmoid_derivative(x) -> Array:
    """Closed form s(x) * (1 - s(x)) of the logistic derivative."""
    s = expit(_as_array(x))
    return s * (1.0 - s)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = expit(a.data)
    return _node(s, (a,), lambda g: (g * (s * (1.0 - s)),), "sigmoid")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp with a pass-through gradient strictly inside ``[lo, hi]``."""
    a = as_tensor(a)
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return _node(np.clip(ad, lo, hi), (a,), lambda g: (g * inside,), "clip")


def minimum(a, bound: float) -> Tensor:
    a = as_tensor(a)
    keep = a.data <= bound
    return _node(np.minimum(a.data, bound), (a,), lambda g: (g * keep,), "minimum")


# linear algebra / shape ---------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def vjp(g):
        if bd.ndim == 1:
            ga = np.multiply.outer(g, bd) if ad.ndim > 1 else g * bd
            gb = np.tensordot(ad, g, axes=(tuple(range(ad.ndim - 1)), tuple(range(g.ndim))))
            return _unbroadcast(ga, ad.shape), gb
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            k, o = bd.shape
            gb = ad.reshape(-1, k).T @ g.reshape(-1, o)
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _node(ad @ bd, (a, b), vjp, "matmul")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inverse),), "transpose")


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    return _node(np.swapaxes(a.data, i, j), (a,),
                 lambda g: (np.swapaxes(g, i, j),), "swapaxes")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _node(a.data[index], (a,), vjp, "getitem")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp, "concat")


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), vjp, "sum")


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def logsumexp(a, axis=-1, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shift = np.max(a.data, axis=axis, keepdims=True)
    out = log(tsum(exp(a - shift), axis=axis, keepdims=True)) + shift
    if not keepdims:
        out = reshape(out, np.squeeze(out.data, axis=axis).shape)
    return out


def log_softmax(a, axis=-1) -> Tensor:
    return a - logsumexp(a, axis=axis, keepdims=True)


def softmax(a, axis=-1) -> Tensor:
    return exp(log_softmax(a, axis=axis))


# backward pass ------------------------------------------------------------

def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, check_finite: bool = True) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if root.data.size != 1:
        raise ContractError(f"backward needs a scalar, got shape {root.shape}")
    if check_finite and not np.isfinite(root.data).all():
        bad = first_nonfinite(root)
        raise NumericError(f"non-finite loss; first offending node: {bad}")
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(_topological(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if check_finite and not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient flowing into node {node!r}")
        if node._vjp is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def first_nonfinite(root: Tensor) -> Tensor | None:
    """Earliest graph node (in evaluation order) holding a NaN or Inf."""
    for node in _topological(root):
        if not np.isfinite(node.data).all():
            return node
    return None


# MLPs ---------------------------------------------------------------------

@dataclass(frozen=True)
class MLPSpec:
    """Feedforward architecture: sigmoid hidden layers, identity output.

    ``activation="identity"`` turns the whole net linear; it exists for
    checking the Jacobian machinery against closed forms.
    """

    layer_widths: tuple[int, ...]
    activation: str = "sigmoid"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ContractError("an MLP needs at least an input and an output width")
        if any(w < 1 for w in widths):
            raise ContractError(f"layer widths must be positive, got {widths}")
        if self.activation not in ("sigmoid", "identity"):
            raise ContractError(f"unsupported activation {self.activation!r}")

    @property
    def n_in(self) -> int:
        return self.layer_widths[0]

    @property
    def n_out(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def n_params(self) -> int:
        w = self.layer_widths
        return sum(w[i] * w[i + 1] + w[i + 1] for i in range(len(w) - 1))


class Store:
    """Anything owning an ordered list of trainable tensors."""

    def tensors(self) -> list[Tensor]:
        raise NotImplementedError

    @property
    def size(self) -> int:
        return sum(t.data.size for t in self.tensors())

    def flat(self) -> Array:
        return np.concatenate([t.data.ravel() for t in self.tensors()])

    def flat_grad(self) -> Array:
        return np.concatenate([
            (t.grad if t.grad is not None else np.zeros_like(t.data)).ravel()
            for t in self.tensors()])

    def set_flat(self, vec) -> None:
        vec = _as_array(vec)
        if vec.shape != (self.size,):
            raise ShapeError(f"flat vector has length {vec.size}, store holds {self.size}")
        i = 0
        for t in self.tensors():
            n = t.data.size
            t.data = vec[i:i + n].reshape(t.data.shape).copy()
            i += n

    def zero_grad(self) -> None:
        for t in self.tensors():
            t.grad = None


class TensorGroup(Store):
    """Named free-form parameter tensors, flattened in insertion order."""

    def __init__(self, **arrays):
        self.named = {k: Tensor(np.array(v, dtype=float), requires_grad=True)
                      for k, v in arrays.items()}

    def __getitem__(self, name) -> Tensor:
        return self.named[name]

    def tensors(self) -> list[Tensor]:
        return list(self.named.values())

    def copy(self) -> "TensorGroup":
        return TensorGroup(**{k: t.data for k, t in self.named.items()})


@dataclass
class ParamStore(Store):
    """Weights ``W[k]`` of shape (fan_out, fan_in) and biases ``b[k]``.

    Flat order is layer-major, weight before bias, each weight row-major.
    """

    spec: MLPSpec
    weights: list[Tensor]
    biases: list[Tensor]

    def __post_init__(self):
        w = self.spec.layer_widths
        if len(self.weights) != self.spec.n_layers or len(self.biases) != self.spec.n_layers:
            raise ShapeError("parameter count does not match the layer count")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (w[k + 1], w[k]) or b.shape != (w[k + 1],):
                raise ShapeError(
                    f"layer {k}: expected W{(w[k + 1], w[k])} and b{(w[k + 1],)}, "
                    f"got W{W.shape} and b{b.shape}")
            W.requires_grad = True
            b.requires_grad = True

    @classmethod
    def init(cls, spec: MLPSpec, rng: np.random.Generator) -> "ParamStore":
        """Glorot-uniform weights, zero biases."""
        weights, biases = [], []
        w = spec.layer_widths
        for k in range(spec.n_layers):
            a = np.sqrt(6.0 / (w[k] + w[k + 1]))
            weights.append(Tensor(rng.uniform(-a, a, size=(w[k + 1], w[k]))))
            biases.append(Tensor(np.zeros(w[k + 1])))
        return cls(spec, weights, biases)

    @classmethod
    def from_arrays(cls, spec: MLPSpec, weights, biases) -> "ParamStore":
        return cls(spec, [Tensor(np.array(W, dtype=float)) for W in weights],
                   [Tensor(np.array(b, dtype=float)) for b in biases])

    def tensors(self) -> list[Tensor]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend((W, b))
        return out

    def copy(self) -> "ParamStore":
        return ParamStore.from_arrays(self.spec, [W.data for W in self.weights],
                                      [b.data for b in self.biases])


def _check_input(spec: MLPSpec, x) -> Tensor:
    x = as_tensor(x)
    if x.ndim not in (1, 2) or x.shape[-1] != spec.n_in:
        raise ShapeError(f"layer 0: expected input of width {spec.n_in}, got shape {x.shape}")
    return x


def mlp_forward(spec: MLPSpec, params: ParamStore, x) -> Tensor:
    """Evaluate the network on one sample (m,) or a batch (n, m)."""
    h = _check_input(spec, x)
    last = spec.n_layers - 1
    for k, (W, b) in enumerate(zip(params.weights, params.biases)):
        h = matmul(h, transpose(W)) + b
        if k < last and spec.activation == "sigmoid":
            h = sigmoid(h)
    return h


def mlp_forward_with_jacobian(spec: MLPSpec, params: ParamStore, x) -> tuple[Tensor, Tensor]:
    """Network output and input Jacobian in one pass.

    The Jacobian has entry ``[..., i, k] = d out_k / d x_i`` and is built from
    graph operations, so it can itself be differentiated w.r.t. the parameters.
    """
    h = _check_input(spec, x)
    batched = h.ndim == 2
    tangent = None  # None stands for the identity
    last = spec.n_layers - 1
    for k, (W, b) in enumerate(zip(params.weights, params.biases)):
        Wt = transpose(W)
        h = matmul(h, Wt) + b
        tangent = Wt if tangent is None else matmul(tangent, Wt)
        if k < last and spec.activation == "sigmoid":
            h = sigmoid(h)
            slope = h * (1.0 - h)
            if batched:
                slope = reshape(slope, (slope.shape[0], 1, slope.shape[1]))
            tangent = tangent * slope
    if batched and tangent.ndim == 2:
        tangent = tangent * np.ones((h.shape[0], 1, 1))
    return h, tangent


def mlp_input_jacobian(spec: MLPSpec, params: ParamStore, x) -> Tensor:
    return mlp_forward_with_jacobian(spec, params, x)[1]


# gradients and checks -----------------------------------------------------

@dataclass
class GradReport:
    values: Array
    max_rel_error: float | None = None
    labels: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.values)


def _stores(param_stores) -> list[Store]:
    return [param_stores] if isinstance(param_stores, Store) else list(param_stores)


def grad(loss_builder: Callable[..., Tensor], param_stores) -> list[GradReport]:
    """Reverse-mode gradient of ``loss_builder(*stores)`` w.r.t. every store."""
    stores = _stores(param_stores)
    for s in stores:
        s.zero_grad()
    loss = as_tensor(loss_builder(*stores))
    if loss.data.size != 1:
        raise ContractError(f"loss must be a scalar, got shape {loss.shape}")
    backward(loss)
    return [GradReport(s.flat_grad()) for s in stores]


def relative_error(a, b, floor: float = 1e-8) -> Array:
    a, b = _as_array(a), _as_array(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def numerical_grad(loss_builder, param_stores, h: float = 1e-5) -> list[Array]:
    """Central differences of the scalar loss over every flat parameter."""
    if not h > 0:
        raise ContractError("finite-difference step must be positive")
    stores = _stores(param_stores)
    out = []
    for s in stores:
        base = s.flat()
        g = np.empty_like(base)
        for i in range(base.size):
            probe = base.copy()
            probe[i] = base[i] + h
            s.set_flat(probe)
            up = as_tensor(loss_builder(*stores)).item()
            probe[i] = base[i] - h
            s.set_flat(probe)
            down = as_tensor(loss_builder(*stores)).item()
            g[i] = (up - down) / (2.0 * h)
        s.set_flat(base)
        out.append(g)
    return out


def finite_difference_check(loss_builder, param_stores, h: float = 1e-5) -> float:
    """Max relative error between ``grad`` and central differences."""
    if not h > 0:
        raise ContractError("finite-difference step must be positive")
    analytic = grad(loss_builder, param_stores)
    numeric = numerical_grad(loss_builder, param_stores, h)
    worst = 0.0
    for report, fd in zip(analytic, numeric):
        err = float(np.max(relative_error(report.values, fd))) if fd.size else 0.0
        report.max_rel_error = err
        worst = max(worst, err)
    return worst
