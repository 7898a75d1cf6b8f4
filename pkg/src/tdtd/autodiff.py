"""Reverse-mode automatic differentiation on dense float64 arrays.

Every operation returns a Tensor that remembers its parent Tensors and a
closure scattering the output gradient back onto them.  The op set is the
minimum needed for GRU cells, attention and softmax heads: affine maps,
elementwise sigmoid/tanh/add/mul, concatenation and slicing of vectors,
embedding-row lookup, (log-)softmax, index picks and summation.

Everything is float64.  backward() is iterative (no recursion limit) and
deterministic: two runs over the same graph produce identical gradients.
"""
from __future__ import annotations

import math

import numpy as np

__all__ = [
    "AutodiffError",
    "CheckpointError",
    "Tensor",
    "ParamStore",
    "no_grad",
    "backward",
    "gradient_check",
    "Sgd",
    "Adam",
    "GruCell",
    "save_params",
    "load_params",
    "parse_params",
    "format_params",
    "init_uniform",
]


class AutodiffError(ValueError):
    """Shape or contract violation in a graph operation."""


class CheckpointError(ValueError):
    """Malformed or inconsistent checkpoint file."""


_grad_enabled = True


class no_grad:
    """Context manager: compute values only, build no graph."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """Dense float64 array, optional same-shape gradient, graph links."""

    __slots__ = ("values", "grad", "_parents", "_backward")

    def __init__(self, values):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = None
        self._parents = ()
        self._backward = None

    @classmethod
    def _wrap(cls, values, parents=(), backward=None):
        t = cls.__new__(cls)
        t.values = values
        t.grad = None
        t._parents = parents
        t._backward = backward
        return t

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def item(self):
        if self.values.size != 1:
            raise AutodiffError("item(): tensor is not a scalar")
        return float(self.values.reshape(()))

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, grad={'set' if self.grad is not None else 'none'})"


def const(values):
    """Leaf tensor that never receives gradient (no graph links)."""
    return Tensor(values)


def _check_vec(t, op):
    if t.values.ndim != 1:
        raise AutodiffError(f"{op}: expected 1-d vector, got shape {tuple(t.shape)}")


def _same_shape(a, b, op):
    if a.values.shape != b.values.shape:
        raise AutodiffError(
            f"{op}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}"
        )


# ---------------------------------------------------------------------------
# elementwise and linear ops


def add(a, b):
    _same_shape(a, b, "add")
    out = a.values + b.values
    if not _grad_enabled:
        return Tensor._wrap(out)

    def bwd(g):
        a.grad += g
        b.grad += g

    return Tensor._wrap(out, (a, b), bwd)


def sub(a, b):
    _same_shape(a, b, "sub")
    out = a.values - b.values
    if not _grad_enabled:
        return Tensor._wrap(out)

    def bwd(g):
        a.grad += g
        b.grad -= g

    return Tensor._wrap(out, (a, b), bwd)


def mul(a, b):
    _same_shape(a, b, "mul")
    out = a.values * b.values
    if not _grad_enabled:
        return Tensor._wrap(out)

    def bwd(g):
        a.grad += g * b.values
        b.grad += g * a.values

    return Tensor._wrap(out, (a, b), bwd)


def neg(a):
    out = -a.values
    if not _grad_enabled:
        return Tensor._wrap(out)

    def bwd(g):
        a.grad -= g

    return Tensor._wrap(out, (a,), bwd)


def scale(a, c):
    """a * c for a python float c."""
    c = float(c)
    out = a.values * c
    if not _grad_enabled:
        return Tensor._wrap(out)

    def bwd(g):
        a.grad += g * c

    return Tensor._wrap(out, (a,), bwd)


def one_minus(a):
    """1 - a, elementwise."""
    out = 1.0 - a.values
    if not _grad_enabled:
        return Tensor._wrap(out)

    def bwd(g):
        a.grad -= g

    return Tensor._wrap(out, (a,), bwd)


def sigmoid(a):
    # tanh form is stable for large |x|
    out = 0.5 * (np.tanh(0.5 * a.values) + 1.0)
    if not _grad_enabled:
        return Tensor._wrap(out)

    def bwd(g):
        a.grad += g * out * (1.0 - out)

    return Tensor._wrap(out, (a,), bwd)


def tanh(a):
    out = np.tanh(a.values)
    if not _grad_enabled:
        return Tensor._wrap(out)

    def bwd(g):
        a.grad += g * (1.0 - out * out)

    return Tensor._wrap(out, (a,), bwd)


def affine(x, w, b):
    """x @ w + b for x (n,), w (n, m), b (m,)."""
    _check_vec(x, "affine")
    if w.values.ndim != 2 or x.values.shape[0] != w.values.shape[0]:
        raise AutodiffError(
            f"affine: x {tuple(x.shape)} incompatible with w {tuple(w.shape)}"
        )
    if b.values.shape != (w.values.shape[1],):
        raise AutodiffError(
            f"affine: b {tuple(b.shape)} incompatible with w {tuple(w.shape)}"
        )
    out = x.values @ w.values + b.values
    if not _grad_enabled:
        return Tensor._wrap(out)

    def bwd(g):
        x.grad += w.values @ g
        w.grad += np.outer(x.values, g)
        b.grad += g

    return Tensor._wrap(out, (x, w, b), bwd)


def matvec(m, v):
    """m @ v for m (L, d), v (d,) -> (L,)."""
    if m.values.ndim != 2 or v.values.ndim != 1 or m.values.shape[1] != v.values.shape[0]:
        raise AutodiffError(
            f"matvec: m {tuple(m.shape)} incompatible with v {tuple(v.shape)}"
        )
    out = m.values @ v.values
    if not _grad_enabled:
        return Tensor._wrap(out)

    def bwd(g):
        m.grad += np.outer(g, v.values)
        v.grad += m.values.T @ g

    return Tensor._wrap(out, (m, v), bwd)


def rows_weighted_sum(m, w):
    """sum_j w[j] * m[j] for m (L, d), w (L,) -> (d,)."""
    if m.values.ndim != 2 or w.values.ndim != 1 or m.values.shape[0] != w.values.shape[0]:
        raise AutodiffError(
            f"rows_weighted_sum: m {tuple(m.shape)} incompatible with w {tuple(w.shape)}"
        )
    out = m.values.T @ w.values
    if not _grad_enabled:
        return Tensor._wrap(out)

    def bwd(g):
        m.grad += np.outer(w.values, g)
        w.grad += m.values @ g

    return Tensor._wrap(out, (m, w), bwd)


def concat(parts):
    """Concatenate 1-d vectors."""
    parts = tuple(parts)
    for p in parts:
        _check_vec(p, "concat")
    out = np.concatenate([p.values for p in parts])
    if not _grad_enabled:
        return Tensor._wrap(out)
    sizes = [p.values.shape[0] for p in parts]

    def bwd(g):
        off = 0
        for p, n in zip(parts, sizes):
            p.grad += g[off : off + n]
            off += n

    return Tensor._wrap(out, parts, bwd)


def slice_vec(a, start, stop):
    _check_vec(a, "slice_vec")
    out = a.values[start:stop].copy()
    if not _grad_enabled:
        return Tensor._wrap(out)

    def bwd(g):
        a.grad[start:stop] += g

    return Tensor._wrap(out, (a,), bwd)


def stack_rows(rows):
    """Stack 1-d vectors into a (L, d) matrix."""
    rows = tuple(rows)
    for r in rows:
        _check_vec(r, "stack_rows")
    out = np.stack([r.values for r in rows])
    if not _grad_enabled:
        return Tensor._wrap(out)

    def bwd(g):
        for i, r in enumerate(rows):
            r.grad += g[i]

    return Tensor._wrap(out, rows, bwd)


def embed_row(table, index):
    """Row lookup in a 2-d embedding table."""
    if table.values.ndim != 2:
        raise AutodiffError("embed_row: table must be 2-d")
    index = int(index)
    if not 0 <= index < table.values.shape[0]:
        raise AutodiffError(f"embed_row: index {index} out of range")
    out = table.values[index]
    if not _grad_enabled:
        return Tensor._wrap(out)

    def bwd(g):
        table.grad[index] += g

    return Tensor._wrap(out, (table,), bwd)


# ---------------------------------------------------------------------------
# softmax family, picks, reductions


def log_softmax(a):
    _check_vec(a, "log_softmax")
    x = a.values
    m = x.max()
    shifted = x - m
    out = shifted - math.log(np.exp(shifted).sum())
    if not _grad_enabled:
        return Tensor._wrap(out)

    def bwd(g):
        a.grad += g - np.exp(out) * g.sum()

    return Tensor._wrap(out, (a,), bwd)


def softmax(a):
    _check_vec(a, "softmax")
    x = a.values
    e = np.exp(x - x.max())
    out = e / e.sum()
    if not _grad_enabled:
        return Tensor._wrap(out)

    def bwd(g):
        a.grad += out * (g - (g * out).sum())

    return Tensor._wrap(out, (a,), bwd)


def pick(a, index):
    """Scalar a[index]."""
    _check_vec(a, "pick")
    index = int(index)
    if not 0 <= index < a.values.shape[0]:
        raise AutodiffError(f"pick: index {index} out of range")
    out = np.asarray(a.values[index])
    if not _grad_enabled:
        return Tensor._wrap(out)

    def bwd(g):
        a.grad[index] += g

    return Tensor._wrap(out, (a,), bwd)


def nll_pick(log_probs, index):
    """Scalar -log_probs[index]: the negative-log-likelihood pick."""
    _check_vec(log_probs, "nll_pick")
    index = int(index)
    if not 0 <= index < log_probs.values.shape[0]:
        raise AutodiffError(f"nll_pick: index {index} out of range")
    out = np.asarray(-log_probs.values[index])
    if not _grad_enabled:
        return Tensor._wrap(out)

    def bwd(g):
        log_probs.grad[index] -= g

    return Tensor._wrap(out, (log_probs,), bwd)


def sum_all(a):
    out = np.asarray(a.values.sum())
    if not _grad_enabled:
        return Tensor._wrap(out)

    def bwd(g):
        a.grad += g

    return Tensor._wrap(out, (a,), bwd)


def add_scalars(terms):
    """Sum a list of scalar tensors into one scalar."""
    terms = tuple(terms)
    total = 0.0
    for t in terms:
        if t.values.size != 1:
            raise AutodiffError("add_scalars: non-scalar term")
        total += float(t.values)
    out = np.asarray(total)
    if not _grad_enabled:
        return Tensor._wrap(out)

    def bwd(g):
        for t in terms:
            t.grad += g

    return Tensor._wrap(out, terms, bwd)


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order  # parents precede children


def backward(loss, store=None):
    """Populate .grad on every tensor reachable from the scalar `loss`.

    Grad fields of reachable tensors are reset, then filled with
    d(loss)/d(tensor).  If `store` is given, its tensors that do not
    participate in the graph get zero gradients, so an optimizer step is
    always well-defined afterwards.
    """
    if loss.values.size != 1:
        raise AutodiffError("backward: loss must be a scalar")
    order = _topo_order(loss)
    for t in order:
        t.grad = np.zeros_like(t.values)
    loss.grad = np.ones_like(loss.values)
    for t in reversed(order):
        if t._backward is not None:
            t._backward(t.grad)
    if store is not None:
        reached = {id(t) for t in order}
        for _, t in store.items():
            if id(t) not in reached:
                t.grad = np.zeros_like(t.values)


# ---------------------------------------------------------------------------
# parameter registry


def init_uniform(rng, shape, fan_in):
    """Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)]."""
    bound = 1.0 / math.sqrt(fan_in)
    return (rng.random(shape) * 2.0 - 1.0) * bound


class ParamStore:
    """Named registry of parameter tensors; each tensor registered once."""

    def __init__(self):
        self._entries: dict[str, Tensor] = {}
        self._ids: set[int] = set()

    def add(self, name, tensor):
        if name in self._entries:
            raise AutodiffError(f"parameter name already registered: {name!r}")
        if id(tensor) in self._ids:
            raise AutodiffError(f"tensor already registered under another name: {name!r}")
        self._entries[name] = tensor
        self._ids.add(id(tensor))
        return tensor

    def param(self, name, shape, rng=None, fan_in=None, zero=False):
        """Create, register and return a new parameter tensor."""
        shape = tuple(shape)
        if zero or rng is None:
            values = np.zeros(shape)
        else:
            if fan_in is None:
                fan_in = shape[0]
            values = init_uniform(rng, shape, fan_in)
        return self.add(name, Tensor(values))

    def __getitem__(self, name):
        return self._entries[name]

    def __contains__(self, name):
        return name in self._entries

    def __len__(self):
        return len(self._entries)

    def names(self):
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def zero_grads(self):
        for t in self._entries.values():
            t.grad = np.zeros_like(t.values)

    def clear_grads(self):
        for t in self._entries.values():
            t.grad = None

    def global_grad_norm(self):
        sq = 0.0
        for t in self._entries.values():
            if t.grad is not None:
                sq += float((t.grad * t.grad).sum())
        return math.sqrt(sq)

    def clip_grads(self, max_norm):
        norm = self.global_grad_norm()
        if norm > max_norm > 0.0:
            factor = max_norm / norm
            for t in self._entries.values():
                if t.grad is not None:
                    t.grad *= factor
        return norm


# ---------------------------------------------------------------------------
# optimizers


class Sgd:
    """Plain stochastic gradient descent."""

    def __init__(self, learning_rate=0.01):
        self.learning_rate = learning_rate

    def step(self, store):
        for name, t in store.items():
            if t.grad is None:
                raise AutodiffError(f"optimizer step: missing gradient for {name!r}")
            t.values -= self.learning_rate * t.grad
        store.clear_grads()


class Adam:
    """Adam with bias correction; moment state keyed by parameter name."""

    def __init__(self, learning_rate=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, store):
        for name, t in store.items():
            if t.grad is None:
                raise AutodiffError(f"optimizer step: missing gradient for {name!r}")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, t in store.items():
            g = t.grad
            m = self._m.get(name)
            if m is None:
                m = self._m[name] = np.zeros_like(t.values)
                self._v[name] = np.zeros_like(t.values)
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            t.values -= self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.eps)
        store.clear_grads()


def make_optimizer(kind, learning_rate):
    if kind == "adam":
        return Adam(learning_rate=learning_rate)
    if kind == "sgd":
        return Sgd(learning_rate=learning_rate)
    raise AutodiffError(f"unknown optimizer: {kind!r}")


# ---------------------------------------------------------------------------
# GRU cell


class GruCell:
    """Single-layer GRU with fused gate weights.

    step(x, h) computes the standard update/reset-gate recurrence:
        z, r = sigmoid([x; h] Wg + bg)
        n    = tanh([x; r*h] Wc + bc)
        h'   = (1 - z) * n + z * h

    The whole step is one graph node with a hand-derived backward; the hot
    loops spend most of their time here.
    """

    def __init__(self, store, prefix, input_size, hidden_size, rng):
        self.input_size = input_size
        self.hidden_size = hidden_size
        total = input_size + hidden_size
        self.wg = store.param(f"{prefix}.wg", (total, 2 * hidden_size), rng)
        self.bg = store.param(f"{prefix}.bg", (2 * hidden_size,), zero=True)
        self.wc = store.param(f"{prefix}.wc", (total, hidden_size), rng)
        self.bc = store.param(f"{prefix}.bc", (hidden_size,), zero=True)

    def step(self, x, h):
        hs = self.hidden_size
        if x.values.shape != (self.input_size,) or h.values.shape != (hs,):
            raise AutodiffError(
                f"gru step: expected x ({self.input_size},) and h ({hs},), got "
                f"{tuple(x.shape)} and {tuple(h.shape)}"
            )
        wg, bg, wc, bc = self.wg, self.bg, self.wc, self.bc
        xh = np.concatenate((x.values, h.values))
        zr = 0.5 * (np.tanh(0.5 * (xh @ wg.values + bg.values)) + 1.0)
        z = zr[:hs]
        r = zr[hs:]
        rh = r * h.values
        xrh = np.concatenate((x.values, rh))
        n = np.tanh(xrh @ wc.values + bc.values)
        out = (1.0 - z) * n + z * h.values
        if not _grad_enabled:
            return Tensor._wrap(out)

        e = self.input_size

        def bwd(g):
            dn = g * (1.0 - z)
            dz = g * (h.values - n)
            dh = g * z
            dc = dn * (1.0 - n * n)
            dxrh = wc.values @ dc
            drh = dxrh[e:]
            dr = drh * h.values
            dh += drh * r
            dzr = np.concatenate((dz * z * (1.0 - z), dr * r * (1.0 - r)))
            dxh = wg.values @ dzr
            dh += dxh[e:]
            x.grad += dxrh[:e] + dxh[:e]
            h.grad += dh
            wg.grad += np.outer(xh, dzr)
            bg.grad += dzr
            wc.grad += np.outer(xrh, dc)
            bc.grad += dc

        return Tensor._wrap(out, (x, h, wg, bg, wc, bc), bwd)


# ---------------------------------------------------------------------------
# gradient checking


def gradient_check(closure, store, eps=1e-5, samples_per_tensor=8, rng=None,
                   min_magnitude=1e-4):
    """Max relative error between backward() and central finite differences.

    `closure` must rebuild the (deterministic) loss graph on every call.  Up
    to `samples_per_tensor` coordinates of each parameter are perturbed; pass
    None to probe every coordinate.  Error is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).

    Central differences cannot resolve derivatives below the cancellation
    floor eps_machine*|loss|/(2*eps), so sampling prefers coordinates with
    |analytic| >= min_magnitude; when a tensor has none (e.g. an all-zero
    gradient), its largest-magnitude coordinate is probed instead, which
    keeps exact zeros in the comparison.  Pass min_magnitude=0 to sample
    uniformly.
    """
    loss = closure()
    backward(loss, store)
    analytic = {name: t.grad.copy() for name, t in store.items()}
    if rng is None:
        rng = np.random.default_rng(0)
    worst = 0.0
    for name, t in store.items():
        n = t.values.size
        a_flat = analytic[name].reshape(-1)
        eligible = np.flatnonzero(np.abs(a_flat) >= min_magnitude)
        if eligible.size == 0:
            eligible = np.array([int(np.argmax(np.abs(a_flat)))])
        if samples_per_tensor is None or n <= samples_per_tensor:
            coords = range(n) if min_magnitude == 0 else list(eligible)
        elif eligible.size <= samples_per_tensor:
            coords = list(eligible)
        else:
            coords = sorted(
                rng.choice(eligible, size=samples_per_tensor, replace=False)
            )
        flat = t.values.reshape(-1)
        for j in coords:
            orig = flat[j]
            flat[j] = orig + eps
            with no_grad():
                up = closure().item()
            flat[j] = orig - eps
            with no_grad():
                down = closure().item()
            flat[j] = orig
            numeric = (up - down) / (2.0 * eps)
            err = abs(a_flat[j] - numeric) / max(abs(a_flat[j]), abs(numeric), 1e-8)
            worst = max(worst, err)
    store.clear_grads()
    return worst


# ---------------------------------------------------------------------------
# checkpoint serialization

CHECKPOINT_MAGIC = "TDTD-CKPT v1"


def format_params(store):
    """Serialize a ParamStore to checkpoint text (17 significant digits)."""
    lines = [CHECKPOINT_MAGIC]
    for name, t in store.items():
        dims = " ".join(str(d) for d in t.values.shape)
        lines.append(f"{name} {t.values.ndim} {dims}".rstrip())
        flat = t.values.reshape(-1)
        for off in range(0, flat.size, 8):
            lines.append(" ".join("%.17g" % v for v in flat[off : off + 8]))
        if flat.size == 0:
            lines.append("")
    return "\n".join(lines) + "\n"


def save_params(store, destination):
    with open(destination, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_params(store))


def parse_params(text, expect_shapes=None):
    """Parse checkpoint text into a ParamStore.

    With `expect_shapes` (name -> shape tuple), missing tensors, extra
    tensors and shape mismatches raise CheckpointError naming the tensor.
    """
    lines = text.splitlines()
    if not lines or lines[0].strip() != CHECKPOINT_MAGIC:
        raise CheckpointError(f"line 1: expected header {CHECKPOINT_MAGIC!r}")
    store = ParamStore()
    i = 1
    n_lines = len(lines)
    while i < n_lines:
        header = lines[i].split()
        if not header:
            i += 1
            continue
        lineno = i + 1
        if len(header) < 2:
            raise CheckpointError(f"line {lineno}: malformed tensor header")
        name = header[0]
        try:
            ndim = int(header[1])
            shape = tuple(int(d) for d in header[2 : 2 + ndim])
        except ValueError:
            raise CheckpointError(f"line {lineno}: malformed tensor header") from None
        if len(shape) != ndim or len(header) != 2 + ndim:
            raise CheckpointError(f"line {lineno}: malformed tensor header")
        count = 1
        for d in shape:
            count *= d
        values = np.empty(count)
        got = 0
        i += 1
        while got < count:
            if i >= n_lines:
                raise CheckpointError(
                    f"line {n_lines}: unexpected end of file in tensor {name!r}"
                )
            for tok in lines[i].split():
                if got >= count:
                    raise CheckpointError(f"line {i + 1}: too many values for {name!r}")
                try:
                    values[got] = float(tok)
                except ValueError:
                    raise CheckpointError(
                        f"line {i + 1}: bad value {tok!r} in tensor {name!r}"
                    ) from None
                got += 1
            i += 1
        if name in store:
            raise CheckpointError(f"duplicate tensor {name!r}")
        if expect_shapes is not None:
            if name not in expect_shapes:
                raise CheckpointError(f"unexpected tensor {name!r}")
            if tuple(expect_shapes[name]) != shape:
                raise CheckpointError(
                    f"tensor {name!r}: expected shape {tuple(expect_shapes[name])}, "
                    f"found {shape}"
                )
        store.add(name, Tensor(values.reshape(shape)))
    if expect_shapes is not None:
        for name in expect_shapes:
            if name not in store:
                raise CheckpointError(f"missing tensor {name!r}")
    return store


def load_params(source, expect_shapes=None):
    with open(source, "r", encoding="utf-8") as fh:
        return parse_params(fh.read(), expect_shapes)
