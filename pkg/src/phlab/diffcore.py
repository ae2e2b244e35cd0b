"""Small reverse-mode differentiation engine for fixed two-layer dense networks.

Values flow through the same code whether they are plain ``ndarray`` objects or
:class:`Node` objects recorded on a tape. Networks therefore have a single
implementation; wrapping parameters in nodes (see :func:`vjp_params`) is all it
takes to get parameter gradients.

The input-gradient of a :class:`ScalarNet` is written out as an explicit
"gradient network", so differentiating it with respect to the parameters only
needs first-order reverse mode.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

__all__ = [
    "StructureError",
    "Node",
    "affine",
    "lincomb",
    "tanh",
    "tanh_slope",
    "relu",
    "absolute",
    "concat",
    "scatter",
    "total",
    "value_of",
    "ParamVector",
    "ScalarNet",
    "forward",
    "grad_input",
    "vjp_params",
    "value_and_grad",
    "AdamState",
    "adam_step",
]


class StructureError(ValueError):
    """Shape or wiring mismatch between an expression and its inputs."""


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Node:
    """A value on the tape together with the rule to push cotangents to its parents."""

    __slots__ = ("value", "parents", "backward", "key")
    __array_ufunc__ = None

    def __init__(self, value, parents=(), backward=None, key=None):
        self.value = value if type(value) is np.ndarray and value.dtype == np.float64 else np.asarray(value, np.float64)
        self.parents = parents
        self.backward = backward
        self.key = key

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __len__(self) -> int:
        return len(self.value)

    def __repr__(self) -> str:
        return f"Node(shape={self.value.shape}, key={self.key!r})"

    # arithmetic -------------------------------------------------------------
    def __add__(self, other):
        return _add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return _add(self, _neg(other))

    def __rsub__(self, other):
        return _add(other, _neg(self))

    def __neg__(self):
        return _neg(self)

    def __mul__(self, other):
        return _mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Node):
            raise StructureError("division by a tape value is not supported")
        return _mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __pow__(self, exponent):
        if exponent != 2:
            raise StructureError("only squaring is supported")
        return _mul(self, self)

    def __matmul__(self, other):
        return _matmul(self, other)

    def __rmatmul__(self, other):
        return _matmul(other, self)

    def __getitem__(self, index):
        return _getitem(self, index)

    @property
    def T(self):
        return _transpose(self)

    def sum(self, axis=None, keepdims=False):
        return total(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None):
        n = self.value.size if axis is None else self.value.shape[axis]
        return total(self, axis=axis) * (1.0 / n)

    def reshape(self, *shape):
        return _reshape(self, shape[0] if len(shape) == 1 else shape)


def value_of(x):
    """Strip the tape wrapper, if any."""
    return x.value if isinstance(x, Node) else x


def _lift(x):
    return x if isinstance(x, Node) else None


def _add(a, b):
    if not isinstance(a, Node) and not isinstance(b, Node):
        return a + b
    av, bv = value_of(a), value_of(b)
    out = av + bv
    sa, sb = np.shape(av), np.shape(bv)

    a_node, b_node = isinstance(a, Node), isinstance(b, Node)

    def backward(g):
        return (_unbroadcast(g, sa) if a_node else None, _unbroadcast(g, sb) if b_node else None)

    return Node(out, (_lift(a), _lift(b)), backward)


def _neg(a):
    if not isinstance(a, Node):
        return -a
    return Node(-a.value, (a,), lambda g: (-g,))


def _mul(a, b):
    if not isinstance(a, Node) and not isinstance(b, Node):
        return a * b
    av, bv = value_of(a), value_of(b)
    sa, sb = np.shape(av), np.shape(bv)

    def backward(g):
        ga = _unbroadcast(g * bv, sa) if isinstance(a, Node) else None
        gb = _unbroadcast(g * av, sb) if isinstance(b, Node) else None
        return (ga, gb)

    return Node(av * bv, (_lift(a), _lift(b)), backward)


def _matmul(a, b):
    if not isinstance(a, Node) and not isinstance(b, Node):
        return a @ b
    av, bv = value_of(a), value_of(b)
    if av.ndim != 2 or bv.ndim != 2:
        raise StructureError(f"matmul on tape needs 2-D operands, got {av.shape} @ {bv.shape}")
    if av.shape[1] != bv.shape[0]:
        raise StructureError(f"matmul shape mismatch {av.shape} @ {bv.shape}")

    def backward(g):
        ga = g @ bv.T if isinstance(a, Node) else None
        gb = av.T @ g if isinstance(b, Node) else None
        return (ga, gb)

    return Node(av @ bv, (_lift(a), _lift(b)), backward)


def _transpose(a: Node):
    return Node(a.value.T, (a,), lambda g: (g.T,))


def _reshape(a: Node, shape):
    old = a.value.shape
    return Node(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def _getitem(a: Node, index):
    shape = a.value.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return Node(a.value[index], (a,), backward)


def lincomb(coeffs, terms):
    """``sum_i coeffs[i] * terms[i]`` with scalar coefficients, as a single tape node."""
    out = None
    for c, term in zip(coeffs, terms):
        v = c * value_of(term)
        out = v if out is None else out + v
    if not any(isinstance(term, Node) for term in terms):
        return out
    shapes = [np.shape(value_of(term)) for term in terms]

    def backward(g):
        return tuple(_unbroadcast(c * g, sh) if isinstance(term, Node) else None
                     for c, term, sh in zip(coeffs, terms, shapes))

    return Node(out, tuple(_lift(term) for term in terms), backward)


def affine(x, W, b):
    """``x @ W.T + b`` for a batch ``x`` of shape ``(n, fan_in)``."""
    if not any(isinstance(v, Node) for v in (x, W, b)):
        return x @ W.T + b
    xv, Wv, bv = value_of(x), value_of(W), value_of(b)
    if xv.ndim != 2 or xv.shape[1] != Wv.shape[1]:
        raise StructureError(f"affine: input {xv.shape} does not fit weights {Wv.shape}")

    def backward(g):
        return (g @ Wv if isinstance(x, Node) else None,
                g.T @ xv if isinstance(W, Node) else None,
                g.sum(axis=0) if isinstance(b, Node) else None)

    return Node(xv @ Wv.T + bv, (_lift(x), _lift(W), _lift(b)), backward)


def tanh_slope(y):
    """``1 - y**2``: the derivative of tanh expressed through its output ``y``."""
    if not isinstance(y, Node):
        return 1.0 - y * y
    yv = y.value
    return Node(1.0 - yv * yv, (y,), lambda g: (-2.0 * g * yv,))


def tanh(x):
    if not isinstance(x, Node):
        return np.tanh(x)
    y = np.tanh(x.value)
    return Node(y, (x,), lambda g: (g * (1.0 - y * y),))


def relu(x):
    if not isinstance(x, Node):
        return np.maximum(x, 0.0)
    mask = x.value > 0.0
    return Node(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def absolute(x):
    if not isinstance(x, Node):
        return np.abs(x)
    s = np.sign(x.value)
    return Node(np.abs(x.value), (x,), lambda g: (g * s,))


def total(x, axis=None, keepdims=False):
    if not isinstance(x, Node):
        return np.sum(x, axis=axis, keepdims=keepdims)
    shape = x.value.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Node(np.sum(x.value, axis=axis, keepdims=keepdims), (x,), backward)


def concat(parts: Iterable, axis: int = -1):
    parts = list(parts)
    if not any(isinstance(p, Node) for p in parts):
        return np.concatenate(parts, axis=axis)
    values = [np.asarray(value_of(p), dtype=np.float64) for p in parts]
    out = np.concatenate(values, axis=axis)
    edges = np.cumsum([v.shape[axis] for v in values])[:-1]

    def backward(g):
        return tuple(np.split(g, edges, axis=axis))

    return Node(out, tuple(_lift(p) for p in parts), backward)


def scatter(x, index, size: int):
    """Place the last axis of ``x`` at positions ``index`` of a zero array of length ``size``.

    Entries outside ``index`` are exact zeros, and stay zero in every gradient.
    """
    index = np.asarray(index, dtype=np.intp)
    xv = value_of(x)
    if xv.shape[-1] != len(index):
        raise StructureError(f"scatter: {xv.shape[-1]} values for {len(index)} slots")
    out = np.zeros(xv.shape[:-1] + (size,))
    out[..., index] = xv
    if not isinstance(x, Node):
        return out
    return Node(out, (x,), lambda g: (g[..., index],))


def _toposort(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
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
        for p in node.parents:
            if p is not None and id(p) not in seen:
                stack.append((p, False))
    return order


def _backprop(root: Node, cotangent, order=None) -> dict[int, np.ndarray]:
    order = _toposort(root) if order is None else order
    grads: dict[int, np.ndarray] = {
        id(root): np.broadcast_to(np.asarray(cotangent, dtype=np.float64), root.shape).copy()
    }
    for node in reversed(order):
        g = grads.pop(id(node), None) if node.backward is not None else grads.get(id(node))
        if g is None or node.backward is None:
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if parent is None or pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return grads


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


@dataclass
class ParamVector:
    """Flat float64 storage for all trainable scalars of a model.

    ``index`` maps component names to ``(offset, shape)``. Components are
    exposed as reshaped views into ``data``, so in-place updates of ``data`` are
    seen by every network reading from it.
    """

    data: np.ndarray
    index: dict[str, tuple[int, tuple[int, ...]]]
    _views: dict[str, np.ndarray] = field(default=None, repr=False, compare=False)

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "ParamVector":
        index: dict[str, tuple[int, tuple[int, ...]]] = {}
        offset = 0
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype=np.float64)
            index[name] = (offset, tuple(arr.shape))
            offset += arr.size
        data = np.empty(offset)
        for name, arr in arrays.items():
            start, shape = index[name]
            data[start : start + int(np.prod(shape, dtype=int))] = np.ravel(arr)
        return cls(data, index)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        self._rebuild_views()

    def _rebuild_views(self):
        self._views = {}
        for name, (start, shape) in self.index.items():
            n = int(np.prod(shape, dtype=int))
            self._views[name] = self.data[start : start + n].reshape(shape)

    def __len__(self) -> int:
        return self.data.size

    def __contains__(self, name: str) -> bool:
        return name in self.index

    def __getitem__(self, name: str) -> np.ndarray:
        return self._views[name]

    def views(self) -> dict[str, np.ndarray]:
        return self._views

    def slice(self, name: str) -> slice:
        start, shape = self.index[name]
        return slice(start, start + int(np.prod(shape, dtype=int)))

    def names(self) -> list[str]:
        return list(self.index)

    def flatten(self) -> np.ndarray:
        return self.data.copy()

    def unflatten(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != self.data.shape:
            raise StructureError(f"expected {self.data.size} parameters, got {flat.size}")
        return {name: flat[self.slice(name)].reshape(shape).copy() for name, (_, shape) in self.index.items()}

    def assign(self, flat: np.ndarray) -> None:
        """Overwrite all values in place (views stay valid)."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != self.data.shape:
            raise StructureError(f"expected {self.data.size} parameters, got {flat.size}")
        self.data[...] = flat

    def copy(self) -> "ParamVector":
        return ParamVector(self.data.copy(), dict(self.index))

    def merged(self, other: "ParamVector") -> "ParamVector":
        arrays = {name: self[name] for name in self.index}
        for name in other.index:
            if name in arrays:
                raise StructureError(f"duplicate parameter component {name!r}")
            arrays[name] = other[name]
        return ParamVector.from_arrays(arrays)

    # serialization: u64 header length, JSON header, little-endian float64 payload
    def to_bytes(self) -> bytes:
        header = {name: {"offset": start, "length": int(np.prod(shape, dtype=int)), "shape": list(shape)}
                  for name, (start, shape) in self.index.items()}
        raw = json.dumps(header, sort_keys=False).encode()
        return struct.pack("<Q", len(raw)) + raw + self.data.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ParamVector":
        (n,) = struct.unpack_from("<Q", blob, 0)
        header = json.loads(blob[8 : 8 + n].decode())
        data = np.frombuffer(blob, dtype="<f8", offset=8 + n).astype(np.float64)
        index = {}
        covered = 0
        for name, entry in header.items():
            shape = tuple(entry["shape"])
            if int(np.prod(shape, dtype=int)) != entry["length"]:
                raise StructureError(f"component {name!r}: shape/length disagree")
            index[name] = (entry["offset"], shape)
            covered += entry["length"]
        if covered != data.size:
            raise StructureError("header does not partition the payload")
        return cls(data.copy(), index)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ParamVector":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------


@dataclass
class ScalarNet:
    """Dense net ``W3 relu(W2 tanh(W1 x + b1) + b2) + b3``.

    Parameters live in ``params`` under ``prefix + {W1, b1, W2, b2, W3, b3}``;
    several nets can share one :class:`ParamVector` through distinct prefixes.
    """

    d_in: int
    d_out: int
    params: ParamVector
    prefix: str = ""
    hidden: tuple[int, int] = (100, 100)

    @staticmethod
    def init_arrays(d_in: int, d_out: int, rng: np.random.Generator, hidden=(100, 100),
                    prefix: str = "") -> dict[str, np.ndarray]:
        """Glorot-uniform weights, zero biases."""
        sizes = [d_in, hidden[0], hidden[1], d_out]
        arrays = {}
        for i in range(3):
            fan_in, fan_out = sizes[i], sizes[i + 1]
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            arrays[f"{prefix}W{i + 1}"] = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            arrays[f"{prefix}b{i + 1}"] = np.zeros(fan_out)
        return arrays

    @classmethod
    def create(cls, d_in: int, d_out: int, seed=0, hidden=(100, 100)) -> "ScalarNet":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        pv = ParamVector.from_arrays(cls.init_arrays(d_in, d_out, rng, hidden))
        return cls(d_in, d_out, pv, "", tuple(hidden))

    def _weights(self, p):
        p = self.params.views() if p is None else p
        pre = self.prefix
        return (p[pre + "W1"], p[pre + "b1"], p[pre + "W2"], p[pre + "b2"],
                p[pre + "W3"], p[pre + "b3"])

    def _as_batch(self, x):
        xv = value_of(x)
        if np.ndim(xv) == 1:
            if np.shape(xv)[0] != self.d_in:
                raise StructureError(f"expected input of length {self.d_in}, got {np.shape(xv)[0]}")
            return x.reshape(1, -1) if isinstance(x, Node) else np.asarray(x, float)[None, :], True
        if np.ndim(xv) != 2 or np.shape(xv)[1] != self.d_in:
            raise StructureError(f"expected input (batch, {self.d_in}), got {np.shape(xv)}")
        return x, False

    def forward(self, x, p=None):
        """Network output, shape ``(batch, d_out)`` (or ``(d_out,)`` for a single input)."""
        W1, b1, W2, b2, W3, b3 = self._weights(p)
        xb, single = self._as_batch(x)
        h1 = tanh(affine(xb, W1, b1))
        h2 = relu(affine(h1, W2, b2))
        out = affine(h2, W3, b3)
        return out[0] if single else out

    def grad_input(self, x, p=None):
        """Gradient of a scalar output with respect to the input.

        Written as the closed form
        ``W1^T diag(1 - tanh^2(z1)) W2^T diag(relu'(z2)) W3^T`` with
        ``relu'(0) = 0``. The relu mask is piecewise constant in the
        parameters, so it is read off the values and kept off the tape.
        """
        if self.d_out != 1:
            raise StructureError("grad_input needs a scalar-output network")
        W1, b1, W2, b2, W3, b3 = self._weights(p)
        xb, single = self._as_batch(x)
        h1 = tanh(affine(xb, W1, b1))
        z2 = value_of(h1) @ value_of(W2).T + value_of(b2)
        back2 = W3 * (z2 > 0.0)
        back1 = (back2 @ W2) * tanh_slope(h1)
        gx = back1 @ W1
        return gx[0] if single else gx


def forward(net: ScalarNet, x, p=None):
    return net.forward(x, p)


def grad_input(net: ScalarNet, x, p=None):
    return net.grad_input(x, p)


# ---------------------------------------------------------------------------
# parameter gradients
# ---------------------------------------------------------------------------


def value_and_grad(expr: Callable[[Mapping], object], params: ParamVector, cotangent=1.0):
    """Evaluate ``expr(p)`` with ``p`` mapping component names to tape leaves.

    Returns ``(value, grad)`` where ``grad`` is the flat gradient of
    ``<cotangent, expr>`` with respect to ``params.data``.
    """
    owner = id(params)
    leaves = {name: Node(view, key=(owner, name)) for name, view in params.views().items()}
    out = expr(leaves)
    grad = np.zeros(len(params))
    if not isinstance(out, Node):
        return np.asarray(out, dtype=np.float64), grad
    order = _toposort(out)
    for node in order:
        if node.key is None or node.backward is not None:
            continue
        if node.key[0] != owner or node.key[1] not in params:
            raise StructureError(f"expression references a parameter outside this vector: {node.key[1]!r}")
    grads = _backprop(out, cotangent, order)
    for name, leaf in leaves.items():
        g = grads.get(id(leaf))
        if g is not None:
            grad[params.slice(name)] += np.ravel(g)
    return out.value, grad


def vjp_params(expr: Callable[[Mapping], object], params: ParamVector, cotangent=1.0) -> np.ndarray:
    """Flat gradient of ``<cotangent, expr(p)>`` with respect to ``params``."""
    return value_and_grad(expr, params, cotangent)[1]


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(theta: np.ndarray, grad: np.ndarray, state: AdamState, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update. Returns ``(new_theta, new_state)``."""
    step = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    new_theta = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_theta, AdamState(m, v, step)
