"""Dense tensors with reverse-mode automatic differentiation.

Small and deliberately boring: a ``Tensor`` wraps a numpy array and
remembers how it was produced, ``backward`` walks the recorded graph
once in reverse topological order, and leaves created with
``requires_grad=True`` accumulate gradients additively.  Float64 by
default so finite-difference checks are meaningful; call
``set_default_dtype(np.float32)`` if you want speed over checkability.

Also home to the optimizer (:class:`Adam`), global-norm gradient
clipping and the named parameter container used for checkpoints.
"""

import json

import numpy as np

_DEFAULT_DTYPE = np.float64

CHECKPOINT_FORMAT_VERSION = 1


def set_default_dtype(dtype):
    global _DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ValueError("supported dtypes: float32, float64")
    _DEFAULT_DTYPE = dtype


def default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    """A dense array plus the bookkeeping needed for backprop.

    ``parents`` and ``backward_rule`` are set by the ops below; user
    code only constructs leaves.  ``grad`` is lazily allocated and
    accumulated into, never overwritten.
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_rule")

    def __init__(self, data, requires_grad=False, parents=(), backward_rule=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents if requires_grad else ()
        self.backward_rule = backward_rule if requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def backward(self, seed=None):
        """Backpropagate from this tensor (scalar unless ``seed`` given).

        Visits each node exactly once via an iterative topological sort,
        so arbitrarily deep decoder chains do not hit the recursion
        limit.
        """
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward() without seed requires a scalar")
            seed = np.ones_like(self.data)
        order = _toposort(self)
        self.accumulate(np.asarray(seed, dtype=self.data.dtype))
        for node in order:
            if node.backward_rule is not None and node.grad is not None:
                node.backward_rule(node.grad)

    # operator sugar; the real work is in the module functions
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _toposort(root):
    """Reverse topological order of the graph rooted at ``root``."""
    order = []
    seen = set()
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
            if id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    """Sum ``g`` back down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _make(data, parents, rule):
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, parents=tuple(parents), backward_rule=rule if req else None)


# ---------------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting rules apply)

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def rule(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), rule)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def rule(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g, b.data.shape))

    return _make(out_data, (a, b), rule)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def rule(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), rule)


def neg(a):
    a = as_tensor(a)

    def rule(g):
        a.accumulate(-g)

    return _make(-a.data, (a,), rule)


def minimum(a, b):
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data <= b.data
    out_data = np.where(take_a, a.data, b.data)

    def rule(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * take_a, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * ~take_a, b.data.shape))

    return _make(out_data, (a, b), rule)


# ---------------------------------------------------------------------------
# linear algebra and shape plumbing

def matmul(a, b):
    """Matrix product with numpy ``@`` batch broadcasting; operands >= 2-D."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(
            f"matmul needs >=2-D operands, got {a.data.shape} @ {b.data.shape}; reshape vectors first")
    try:
        out_data = a.data @ b.data
    except ValueError as e:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}") from e

    def rule(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return _make(out_data, (a, b), rule)


def transpose(a):
    a = as_tensor(a)

    def rule(g):
        a.accumulate(np.swapaxes(g, -1, -2))

    return _make(np.swapaxes(a.data, -1, -2), (a,), rule)


def reshape(a, shape):
    a = as_tensor(a)
    old_shape = a.data.shape

    def rule(g):
        a.accumulate(g.reshape(old_shape))

    return _make(a.data.reshape(shape), (a,), rule)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def rule(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate(g[tuple(idx)])

    return _make(out_data, tuple(tensors), rule)


def split(a, sizes, axis=0):
    """Inverse of :func:`concat`: slice ``a`` into chunks of the given sizes."""
    a = as_tensor(a)
    if sum(sizes) != a.data.shape[axis]:
        raise ValueError(f"split sizes {sizes} do not cover axis {axis} of {a.data.shape}")
    outs = []
    lo = 0
    for size in sizes:
        hi = lo + size
        idx = [slice(None)] * a.data.ndim
        idx[axis] = slice(lo, hi)
        idx = tuple(idx)

        def rule(g, idx=idx):
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[idx] += g

        outs.append(_make(a.data[idx], (a,), rule))
        lo = hi
    return outs


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def rule(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t.accumulate(np.take(g, i, axis=axis))

    return _make(out_data, tuple(tensors), rule)


def rows(table, indices):
    """Row lookup ``table[indices]`` with scatter-add backward (embeddings)."""
    table = as_tensor(table)
    indices = np.asarray(indices, dtype=np.int64)

    def rule(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, indices, g)

    return _make(table.data[indices], (table,), rule)


def pick(a, indices):
    """Per-row gather: ``a[i, indices[i]]`` for a 2-D tensor."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.int64)
    n = a.data.shape[0]
    arange = np.arange(n)

    def rule(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        np.add.at(a.grad, (arange, indices), g)

    return _make(a.data[arange, indices], (a,), rule)


# ---------------------------------------------------------------------------
# nonlinearities

def tanh(a):
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def rule(g):
        a.accumulate(g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), rule)


def sigmoid(a):
    a = as_tensor(a)
    # stable in both tails
    out_data = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                        np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))

    def rule(g):
        a.accumulate(g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), rule)


def exp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def rule(g):
        a.accumulate(g * out_data)

    return _make(out_data, (a,), rule)


def log(a):
    a = as_tensor(a)

    def rule(g):
        a.accumulate(g / a.data)

    return _make(np.log(a.data), (a,), rule)


def elu(a):
    """Smooth rectifier used inside the MLPs: x for x>0, exp(x)-1 below."""
    a = as_tensor(a)
    neg_part = np.exp(np.minimum(a.data, 0.0)) - 1.0
    out_data = np.where(a.data > 0, a.data, neg_part)

    def rule(g):
        a.accumulate(g * np.where(a.data > 0, 1.0, neg_part + 1.0))

    return _make(out_data, (a,), rule)


def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        a.accumulate(out_data * (g - inner))

    return _make(out_data, (a,), rule)


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out_data = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def rule(g):
        a.accumulate(g - np.exp(out_data) * g.sum(axis=axis, keepdims=True))

    return _make(out_data, (a,), rule)


def reduce_sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is None:
            a.accumulate(np.broadcast_to(g, a.data.shape).copy())
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            a.accumulate(np.broadcast_to(g, a.data.shape).copy())

    return _make(out_data, (a,), rule)


def reduce_mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def dropout(a, p, rng, train=True):
    """Inverted dropout: zero with probability ``p``, scale survivors by 1/(1-p)."""
    a = as_tensor(a)
    if not train or p <= 0.0:
        return a
    if p >= 1.0:
        return mul(a, 0.0)
    mask = (rng.random(a.data.shape) >= p) / (1.0 - p)

    def rule(g):
        a.accumulate(g * mask)

    return _make(a.data * mask, (a,), rule)


# ---------------------------------------------------------------------------
# losses

_CLIP = 1e-9


def binary_cross_entropy(probs, targets):
    """Summed BCE over all cells; probabilities clipped to [1e-9, 1-1e-9]."""
    probs = as_tensor(probs)
    t = np.asarray(targets, dtype=probs.data.dtype)
    p = np.clip(probs.data, _CLIP, 1.0 - _CLIP)
    out_data = -(t * np.log(p) + (1.0 - t) * np.log(1.0 - p)).sum()

    def rule(g):
        inside = (probs.data > _CLIP) & (probs.data < 1.0 - _CLIP)
        probs.accumulate(g * inside * (-t / p + (1.0 - t) / (1.0 - p)))

    return _make(out_data, (probs,), rule)


def cross_entropy_logits(logits, targets, axis=-1):
    """Summed categorical cross-entropy from raw scores.

    ``targets`` holds class indices along ``axis`` for every remaining
    position.  Fused log-softmax keeps it stable for confident models.
    """
    logits = as_tensor(logits)
    if axis != -1 and axis != logits.data.ndim - 1:
        raise ValueError("cross_entropy_logits expects class axis last")
    idx = np.asarray(targets, dtype=np.int64)
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    flat = logp.reshape(-1, logp.shape[-1])
    picked = flat[np.arange(flat.shape[0]), idx.reshape(-1)]
    out_data = -picked.sum()

    def rule(g):
        soft = np.exp(logp)
        onehot = np.zeros_like(soft).reshape(-1, soft.shape[-1])
        onehot[np.arange(onehot.shape[0]), idx.reshape(-1)] = 1.0
        logits.accumulate(g * (soft - onehot.reshape(soft.shape)))

    return _make(out_data, (logits,), rule)


def nll_of_probs(probs, targets):
    """Summed -log p[target] over rows of an already-normalized 2-D matrix."""
    picked = pick(probs, targets)
    clipped = _clip_low(picked)
    return neg(reduce_sum(log(clipped)))


def _clip_low(a, lo=_CLIP):
    a = as_tensor(a)
    clipped = np.maximum(a.data, lo)

    def rule(g):
        a.accumulate(g * (a.data >= lo))

    return _make(clipped, (a,), rule)


# ---------------------------------------------------------------------------
# biaffine forms

def bilinear(x, y, u, w, b):
    """x'Uy + W[x;y] + b  ->  scalar."""
    x, y = as_tensor(x), as_tensor(y)
    d1 = x.data.shape[0]
    d2 = y.data.shape[0]
    xr = reshape(x, (1, d1))
    yc = reshape(y, (d2, 1))
    quad = matmul(matmul(xr, u), yc)
    lin = matmul(reshape(as_tensor(w), (1, d1 + d2)), reshape(concat([x, y]), (d1 + d2, 1)))
    return reshape(add(add(quad, lin), b), ())


def bilinear_label(x, y, u_classes, w_classes):
    """Per-class x'U_c y + W_c y (no bias, no x linear term) -> (C,) scores."""
    x, y = as_tensor(x), as_tensor(y)
    d2 = y.data.shape[0]
    yc = reshape(y, (d2, 1))
    # (C, d1, d2) @ (d2, 1) -> (C, d1, 1); contract with x -> (C,)
    uy = matmul(u_classes, yc)
    quad = reshape(matmul(reshape(x, (1, 1, -1)), uy), (-1,))
    lin = reshape(matmul(w_classes, yc), (-1,))
    return add(quad, lin)


# ---------------------------------------------------------------------------
# optimizer and clipping

def clip_gradients(params, max_norm):
    """Scale all gradients uniformly so their global L2 norm is <= max_norm.

    Returns the factor applied (1.0 when already within the bound).
    """
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = np.sqrt(total)
    if norm <= max_norm or norm == 0.0:
        return 1.0
    factor = max_norm / norm
    for p in params:
        if p.grad is not None:
            p.grad *= factor
    return factor


class Adam:
    """Adam with bias correction; one slot pair per parameter."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


# ---------------------------------------------------------------------------
# named parameters and checkpoints

class ParamSet:
    """Ordered name -> parameter tensor registry.

    Serialization is a version-tagged JSON container mapping each name
    to shape + flat values, deterministic for identical parameters.
    """

    def __init__(self):
        self._params = {}

    def new(self, name, shape, rng, scale=None):
        """Create a parameter initialized uniformly in +-scale.

        ``scale`` defaults to 1/sqrt(fan-in), fan-in being the last dim.
        """
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        if scale is None:
            fan = shape[-1] if shape else 1
            scale = 1.0 / np.sqrt(fan)
        data = rng.uniform(-scale, scale, size=shape)
        p = Tensor(data, requires_grad=True)
        self._params[name] = p
        return p

    def new_from(self, name, data):
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        p = Tensor(np.array(data), requires_grad=True)
        self._params[name] = p
        return p

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def names(self):
        return list(self._params)

    def tensors(self):
        return list(self._params.values())

    def state_dict(self):
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_state_dict(self, state, strict=True):
        for name, p in self._params.items():
            if name not in state:
                if strict:
                    raise KeyError(f"checkpoint missing parameter {name}")
                continue
            arr = np.asarray(state[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data[...] = arr

    def save(self, path, extra=None):
        doc = {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "params": {
                name: {"shape": list(p.data.shape), "data": p.data.reshape(-1).tolist()}
                for name, p in self._params.items()
            },
        }
        if extra:
            doc["extra"] = extra
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh)

    @staticmethod
    def read(path):
        """Read a checkpoint file into (state_dict, extra)."""
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        if doc.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version in {path}")
        state = {
            name: np.asarray(entry["data"], dtype=_DEFAULT_DTYPE).reshape(entry["shape"])
            for name, entry in doc["params"].items()
        }
        return state, doc.get("extra", {})
