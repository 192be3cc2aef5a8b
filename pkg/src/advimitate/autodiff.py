"""Small reverse-mode autodiff engine on top of numpy.

Every backward rule is written with the same differentiable ops as the
forward pass, so a backward run with ``create_graph=True`` records its own
graph. That is what lets the discriminator's gradient penalty differentiate
through an input-gradient norm.
"""

from __future__ import annotations

import contextlib
import struct
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .kernels import adam_update

DTYPE = np.float64
CKPT_MAGIC = b"ADVIMITATE-CKPT-1"


class UsageError(ValueError):
    """Raised when an operation is called with inputs that break its contract."""


class NumericalError(FloatingPointError):
    """Raised when a NaN/Inf appears where training cannot continue."""


class FormatError(ValueError):
    """Raised when an on-disk file does not match its declared format."""


class CompatibilityError(ValueError):
    """Raised when stored data does not fit the environment or network it is bound to."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = ()
        self.backward_fn = None
        self.op = "leaf"

    # -- introspection --------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def T(self):
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op})"

    def backward(self, seed=None):
        backward(self, seed)

    # -- operators ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn, op) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = backward_fn
        out.op = op
    return out


def _unbroadcast(g: Tensor, shape) -> Tensor:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = tsum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = tsum(g, axis=axes, keepdims=True)
    return g


# -- primitive ops -------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (neg(g),), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(mul(g, b), sa), _unbroadcast(mul(g, a), sb)),
                 "mul")


def power(a: Tensor, p: float) -> Tensor:
    return _make(a.data ** p, (a,), lambda g: (mul(g, mul(power(a, p - 1.0), p)),), "pow")


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (mul(g, mul(a, 2.0)),), "square")


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)
    holder = []

    def bw(g):
        return (mul(g, power(mul(holder[0], 2.0), -1.0)),)

    out = _make(out_data, (a,), bw, "sqrt")
    holder.append(out)
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data @ b.data, (a, b),
                 lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)), "matmul")


def transpose(a: Tensor) -> Tensor:
    return _make(a.data.T, (a,), lambda g: (transpose(g),), "transpose")


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else axis
            axes = tuple(ax % len(shape) for ax in axes)
            g = reshape(g, tuple(1 if i in axes else n for i, n in enumerate(shape)))
        elif axis is None:
            g = reshape(g, (1,) * len(shape))
        return (broadcast_to(g, shape),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (reshape(g, old),), "reshape")


def broadcast_to(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(np.broadcast_to(a.data, shape).copy(), (a,),
                 lambda g: (_unbroadcast(g, old),), "broadcast")


def relu(a: Tensor) -> Tensor:
    mask = (a.data > 0).astype(DTYPE)
    return _make(a.data * mask, (a,), lambda g: (mul(g, mask),), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    holder = []

    def bw(g):
        out = holder[0]
        return (mul(g, mul(out, add(1.0, neg(out)))),)

    out = _make(s, (a,), bw, "sigmoid")
    holder.append(out)
    return out


def exp(a: Tensor) -> Tensor:
    holder = []
    out = _make(np.exp(a.data), (a,), lambda g: (mul(g, holder[0]),), "exp")
    holder.append(out)
    return out


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (mul(g, power(a, -1.0)),), "log")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    mask = ((a.data >= lo) & (a.data <= hi)).astype(DTYPE)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (mul(g, mask),), "clip")


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = (a.data <= b.data).astype(DTYPE)
    sa, sb = a.shape, b.shape
    return _make(np.minimum(a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(mul(g, pick_a), sa),
                            _unbroadcast(mul(g, 1.0 - pick_a), sb)),
                 "minimum")


def take(a: Tensor, idx) -> Tensor:
    shape = a.shape

    def bw(g):
        return (scatter(g, idx, shape),)

    return _make(a.data[idx], (a,), bw, "take")


def scatter(g: Tensor, idx, shape) -> Tensor:
    """Adjoint of ``take``: place ``g`` at ``idx`` inside zeros of ``shape``."""
    buf = np.zeros(shape, dtype=DTYPE)
    np.add.at(buf, idx, g.data)
    return _make(buf, (g,), lambda gg: (take(gg, idx),), "scatter")


def log_softmax(a: Tensor) -> Tensor:
    """Row-wise log-softmax with max subtraction."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out_data = shifted - lse
    holder = []

    def bw(g):
        probs = exp(holder[0])
        return (add(g, neg(mul(probs, tsum(g, axis=-1, keepdims=True)))),)

    out = _make(out_data, (a,), bw, "log_softmax")
    holder.append(out)
    return out


def softmax(a: Tensor) -> Tensor:
    return exp(log_softmax(a))


def concat(tensors, axis=-1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(int(lo), int(hi))
            out.append(take(g, tuple(sl)))
        return tuple(out)

    return _make(np.concatenate([t.data for t in tensors], axis=axis),
                 tuple(tensors), bw, "concat")


# -- graph traversal -----------------------------------------------------

@dataclass
class Graph:
    """Topologically ordered view of everything that produced ``output``."""

    output: Tensor
    nodes: list = field(default_factory=list)

    @classmethod
    def trace(cls, output: Tensor) -> "Graph":
        order, seen = [], set()
        stack = [(output, False)]
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
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        return cls(output, order)

    def parent_indices(self):
        pos = {id(n): i for i, n in enumerate(self.nodes)}
        return [[pos[id(p)] for p in n.parents if id(p) in pos] for n in self.nodes]


def grad(output: Tensor, inputs, seed=None, create_graph: bool = False):
    """Return d(seed . output)/d(input) for each tensor in ``inputs``.

    Leaves' ``.grad`` fields are left untouched. Inputs the output does not
    depend on get zero gradients.
    """
    if not output.requires_grad:
        raise UsageError("output has no recorded graph; run a forward pass first")
    if seed is None:
        seed = np.ones(output.shape, dtype=DTYPE)
    seed = as_tensor(seed)
    if seed.shape != output.shape:
        raise UsageError(f"seed shape {seed.shape} != output shape {output.shape}")
    graph = Graph.trace(output)
    wanted = {id(t) for t in inputs}
    for t in inputs:
        if not t.requires_grad:
            raise UsageError("gradient requested for a tensor that is not on the tape")

    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = create_graph
    try:
        grads = {id(output): seed}
        for node in reversed(graph.nodes):
            g = grads.pop(id(node), None) if id(node) not in wanted else grads.get(id(node))
            if g is None or node.backward_fn is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else add(grads[key], pg)
    finally:
        _grad_enabled = prev
    out = []
    for t in inputs:
        g = grads.get(id(t))
        out.append(g if g is not None else Tensor(np.zeros(t.shape)))
    return out


def backward(output: Tensor, seed=None):
    """Accumulate d(seed . output)/d(leaf) into every reachable leaf's ``.grad``."""
    if not output.requires_grad:
        raise UsageError("output has no recorded graph; run a forward pass first")
    leaves = [n for n in Graph.trace(output).nodes if n.backward_fn is None]
    for leaf, g in zip(leaves, grad(output, leaves, seed)):
        leaf.grad = g.data if leaf.grad is None else leaf.grad + g.data


def grad_norm(output: Tensor, wrt: Tensor, eps: float = 1e-12) -> Tensor:
    """Per-row L2 norm of d(sum output)/d(wrt), kept differentiable.

    ``wrt`` must be a leaf on the output's tape; rows are assumed independent
    (true for any MLP applied row-wise), so the gradient of the summed output
    splits into per-sample input gradients.
    """
    if not wrt.requires_grad or wrt not in Graph.trace(output).nodes:
        raise UsageError("wrt is not on the output's tape")
    (g,) = grad(output, [wrt], create_graph=True)
    return sqrt(add(tsum(square(g), axis=-1), eps))


# -- networks ------------------------------------------------------------

ACTIVATIONS = ("identity", "sigmoid", "softmax")


class Mlp:
    """Fully-connected net, ReLU hidden layers, selectable output activation."""

    def __init__(self, sizes, output="identity", rng=None, output_scale=1.0):
        """``output_scale`` shrinks the last layer's initial weights (a policy
        head started near uniform is far less prone to early collapse)."""
        if output not in ACTIVATIONS:
            raise UsageError(f"unknown output activation {output!r}")
        if len(sizes) < 2 or any(int(s) < 1 for s in sizes):
            raise UsageError(f"bad layer sizes {sizes}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.sizes = [int(s) for s in sizes]
        self.output = output
        self.weights, self.biases = [], []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            bound = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, (fan_in, fan_out))
            if len(self.weights) == len(self.sizes) - 2:
                w *= output_scale
            self.weights.append(Tensor(w, True))
            self.biases.append(Tensor(np.zeros(fan_out), True))

    @property
    def in_dim(self):
        return self.sizes[0]

    @property
    def out_dim(self):
        return self.sizes[-1]

    def parameters(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def logits(self, x) -> Tensor:
        x = as_tensor(x)
        if x.shape[-1] != self.in_dim:
            raise UsageError(f"input width {x.shape[-1]} != network in_dim {self.in_dim}")
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = add(matmul(h, w), b)
            if i < last:
                h = relu(h)
        return h

    def __call__(self, x) -> Tensor:
        z = self.logits(x)
        if self.output == "sigmoid":
            return sigmoid(z)
        if self.output == "softmax":
            return softmax(z)
        return z

    def state_dict(self) -> dict:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"layer{i}.weight"] = w.data.copy()
            out[f"layer{i}.bias"] = b.data.copy()
        return out

    def load_state_dict(self, state: dict):
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            for key, t in ((f"layer{i}.weight", w), (f"layer{i}.bias", b)):
                if key not in state:
                    raise CompatibilityError(f"missing key {key}")
                arr = np.asarray(state[key], dtype=DTYPE)
                if arr.shape != t.shape:
                    raise CompatibilityError(f"{key}: shape {arr.shape} != {t.shape}")
                t.data = arr.copy()

    def copy(self) -> "Mlp":
        clone = Mlp(self.sizes, self.output)
        clone.load_state_dict(self.state_dict())
        return clone


def forward(net: Mlp, x) -> tuple[Tensor, Graph]:
    y = net(x)
    return y, Graph.trace(y)


# -- optimiser -----------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 0.003
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, st: AdamState):
    """One bias-corrected Adam update, in place on ``params``. Returns ``st``."""
    if len(params) != len(grads):
        raise UsageError("params and grads differ in length")
    for p, g in zip(params, grads):
        if g is not None and np.shape(g) != p.shape:
            raise UsageError(f"gradient shape {np.shape(g)} != parameter shape {p.shape}")
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericalError("non-finite gradient passed to adam_step")
    if not st.m:
        st.m = [np.zeros(p.shape) for p in params]
        st.v = [np.zeros(p.shape) for p in params]
    st.t += 1
    c1 = 1.0 - st.beta1 ** st.t
    c2 = 1.0 - st.beta2 ** st.t
    for p, g, m, v in zip(params, grads, st.m, st.v):
        g = np.zeros(p.shape) if g is None else np.ascontiguousarray(g, dtype=DTYPE)
        if not p.data.flags.c_contiguous or not p.data.flags.writeable:
            p.data = np.ascontiguousarray(p.data).copy()
        adam_update(p.data.reshape(-1), g.reshape(-1), m.reshape(-1), v.reshape(-1),
                    st.lr, st.beta1, st.beta2, st.eps_adam, c1, c2)
    return st


class Adam:
    """Adam bound to a fixed parameter list."""

    def __init__(self, params, lr=0.003, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = AdamState(lr, beta1, beta2, eps)

    def step(self):
        adam_step(self.params, [p.grad for p in self.params], self.state)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# -- checkpoints ---------------------------------------------------------

def save_arrays(path, arrays: dict, meta: dict | None = None):
    """Write ``arrays`` as ADVIMITATE-CKPT-1: magic line, JSON index, raw f64 blobs."""
    index = {"meta": meta or {}, "arrays": []}
    blobs = []
    for key in sorted(arrays):
        arr = np.ascontiguousarray(arrays[key], dtype="<f8")
        index["arrays"].append({"key": key, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    head = json.dumps(index, sort_keys=True).encode()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC + b"\n")
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def load_arrays(path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    magic = CKPT_MAGIC + b"\n"
    if not raw.startswith(magic):
        raise FormatError(f"{path}: not an {CKPT_MAGIC.decode()} file")
    pos = len(magic)
    try:
        (n,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        index = json.loads(raw[pos:pos + n].decode())
        pos += n
        arrays = {}
        for entry in index["arrays"]:
            shape = tuple(entry["shape"])
            nbytes = 8 * int(np.prod(shape))
            if pos + nbytes > len(raw):
                raise FormatError(f"{path}: truncated at {entry['key']}")
            arrays[entry["key"]] = np.frombuffer(raw, "<f8", int(np.prod(shape)), pos).reshape(shape).copy()
            pos += nbytes
    except (struct.error, ValueError, KeyError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: corrupt checkpoint ({exc})") from exc
    if pos != len(raw):
        raise FormatError(f"{path}: trailing bytes after last array")
    return arrays, index["meta"]
