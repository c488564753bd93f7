"""Reverse-mode automatic differentiation over float64 numpy arrays.

Everything the model touches is a `Tensor`: a float64 ndarray plus the tape
hooks needed for `backward()`. Operations build the tape lazily; results whose
inputs carry no gradient short-circuit to plain constants, so unused branches
(for example blank-filled modality features) never appear in the gradient
support.

All operations are deterministic (identical inputs give bitwise identical
outputs) and map finite inputs to finite outputs. `gradcheck` compares the
tape's gradients against central finite differences.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf


class ShapeError(ValueError):
    """Operand shapes are incompatible with the operation."""


class ConfigError(ValueError):
    """A structural/setting precondition is violated."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite value."""


def _f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _f64(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._vjp = None

    @staticmethod
    def _result(data, parents, vjp) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._vjp = vjp
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable leaf."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.data.shape}")
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._vjp is None:
                continue
            gs = node._vjp(node.grad)
            for p, g in zip(node._parents, gs):
                if g is None or not p.requires_grad:
                    continue
                p.grad = g if p.grad is None else p.grad + g

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_t(other)))

    def __rsub__(self, other):
        return add(_t(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return mul(self, 1.0 / float(other))

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'yes' if self.requires_grad else 'no'})"


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- arithmetic ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Tensor._result(out, (a, b), vjp)


def neg(a) -> Tensor:
    a = _t(a)
    return Tensor._result(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = _t(a)
        s = float(b)
        return Tensor._result(a.data * s, (a,), lambda g: (g * s,))
    a, b = _t(a), _t(b)
    out = a.data * b.data

    def vjp(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return Tensor._result(out, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    out = a.data / b.data

    def vjp(g):
        return (_unbroadcast(g / b.data, a.data.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return Tensor._result(out, (a, b), vjp)


def power(a, p) -> Tensor:
    a = _t(a)
    p = float(p)
    out = a.data ** p

    def vjp(g):
        return (g * p * a.data ** (p - 1.0),)

    return Tensor._result(out, (a,), vjp)


def matmul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.data.shape} x {b.data.shape}")
    out = a.data @ b.data

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return Tensor._result(out, (a, b), vjp)


# -- elementwise nonlinearities -----------------------------------------


def texp(a) -> Tensor:
    a = _t(a)
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,))


def tlog(a) -> Tensor:
    a = _t(a)
    return Tensor._result(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = _t(a)
    out = np.tanh(a.data)
    return Tensor._result(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = _t(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))  # stable logistic
    return Tensor._result(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = _t(a)
    mask = a.data > 0.0
    return Tensor._result(a.data * mask, (a,), lambda g: (g * mask,))


_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a) -> Tensor:
    """Exact-erf GELU; gradient is Phi(x) + x*phi(x)."""
    a = _t(a)
    phi_cdf = 0.5 * (1.0 + erf(a.data / _SQRT2))
    out = a.data * phi_cdf

    def vjp(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * a.data * a.data)
        return (g * (phi_cdf + a.data * pdf),)

    return Tensor._result(out, (a,), vjp)


def tabs(a) -> Tensor:
    # subgradient 0 at the kink
    a = _t(a)
    return Tensor._result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


# -- reductions and shape ops -------------------------------------------


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _t(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return Tensor._result(out, (a,), vjp)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _t(a)
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.data.shape[ax]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = _t(a)
    out = a.data.reshape(shape)
    return Tensor._result(out, (a,), lambda g: (g.reshape(a.data.shape),))


def transpose(a, axes) -> Tensor:
    a = _t(a)
    inv = tuple(np.argsort(axes))
    return Tensor._result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(parts, axis=0) -> Tensor:
    parts = [_t(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.array(piece) for piece in np.split(g, splits, axis=axis))

    return Tensor._result(out, tuple(parts), vjp)


def stack(parts, axis=0) -> Tensor:
    parts = [_t(p) for p in parts]
    out = np.stack([p.data for p in parts], axis=axis)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(parts)))

    return Tensor._result(out, tuple(parts), vjp)


def getitem(a, key) -> Tensor:
    a = _t(a)
    out = a.data[key]

    def vjp(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, key, g)
        return (buf,)

    return Tensor._result(out, (a,), vjp)


def index_rows(a, idx) -> Tensor:
    """Row gather (embedding lookup); gradient scatter-adds duplicates."""
    return getitem(a, (np.asarray(idx, dtype=np.intp),))


# -- fused numeric kernels ----------------------------------------------


def softmax(a, axis=-1) -> Tensor:
    """Shift-invariant softmax along `axis`."""
    a = _t(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return Tensor._result(out, (a,), vjp)


def logsumexp(a, axis=-1, keepdims=False) -> Tensor:
    a = _t(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    soft = e / s
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def vjp(g):
        g = np.asarray(g)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return Tensor._result(out, (a,), vjp)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _t(x), _t(gain), _t(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        axes = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=axes)
        dbias = g.sum(axis=axes)
        return dx, dgain, dbias

    return Tensor._result(out, (x, gain, bias), vjp)


def conv1d_seq(x, kernel, bias) -> Tensor:
    """Same-length 1-D convolution over the sequence axis.

    x: [L, d_in], kernel: [w, d_in, d_out] with odd w, bias: [d_out].
    Zero padding of w//2 rows on both ends keeps the output length L.
    """
    x, kernel, bias = _t(x), _t(kernel), _t(bias)
    if x.data.ndim != 2 or kernel.data.ndim != 3:
        raise ShapeError(f"conv1d_seq expects x [L,d_in], kernel [w,d_in,d_out]; got {x.data.shape}, {kernel.data.shape}")
    w, d_in, d_out = kernel.data.shape
    if w % 2 != 1:
        raise ConfigError(f"conv1d_seq kernel width must be odd, got {w}")
    if x.data.shape[1] != d_in:
        raise ShapeError(f"conv1d_seq channel mismatch: x {x.data.shape} vs kernel {kernel.data.shape}")
    L = x.data.shape[0]
    pad = w // 2
    xp = np.zeros((L + 2 * pad, d_in))
    xp[pad:pad + L] = x.data
    windows = sliding_window_view(xp, w, axis=0)  # [L, d_in, w]
    out = np.einsum("ldw,wdo->lo", windows, kernel.data) + bias.data

    def vjp(g):
        dk = np.einsum("ldw,lo->wdo", windows, g)
        db = g.sum(axis=0)
        dxp = np.zeros_like(xp)
        for k in range(w):
            dxp[k:k + L] += g @ kernel.data[k].T
        return dxp[pad:pad + L], dk, db

    return Tensor._result(out, (x, kernel, bias), vjp)


def pool_windows(L: int, T: int) -> list[tuple[int, int]]:
    """Window [floor(t*L/T), ceil((t+1)*L/T)) per output row; covers every input row."""
    return [((t * L) // T, -((-(t + 1) * L) // T)) for t in range(T)]


def avg_pool_to(x, T: int) -> Tensor:
    """Average-pool the first axis of x down (or up) to length T."""
    x = _t(x)
    L = x.data.shape[0]
    if L < 1 or T < 1:
        raise ShapeError(f"avg_pool_to needs L >= 1 and T >= 1, got L={L}, T={T}")
    wins = pool_windows(L, T)
    out = np.stack([x.data[s:e].mean(axis=0) for s, e in wins])

    def vjp(g):
        dx = np.zeros_like(x.data)
        for t, (s, e) in enumerate(wins):
            dx[s:e] += g[t] / (e - s)
        return (dx,)

    return Tensor._result(out, (x,), vjp)


def multi_head_attention(q, k, v, heads: int, params) -> Tensor:
    """Scaled dot-product attention with per-head projections.

    q: [Lq, d], k/v: [Lk, d]. Per-head q/k/v projections are bias-free; the
    output projection carries the only bias. Scores scale by 1/sqrt(d/heads).
    `params` maps {"wq","wk","wv","wo","bo"} to Tensors.
    """
    q, k, v = _t(q), _t(k), _t(v)
    if q.data.ndim != 2 or k.data.ndim != 2 or v.data.ndim != 2:
        raise ShapeError(f"attention expects 2-D q/k/v, got {q.data.shape}, {k.data.shape}, {v.data.shape}")
    d = q.data.shape[1]
    if k.data.shape[1] != d or v.data.shape[1] != d:
        raise ShapeError(f"attention width mismatch: q {q.data.shape}, k {k.data.shape}, v {v.data.shape}")
    if k.data.shape[0] != v.data.shape[0]:
        raise ShapeError(f"k and v row counts differ: {k.data.shape} vs {v.data.shape}")
    if d % heads != 0:
        raise ConfigError(f"model width {d} not divisible by heads {heads}")
    dh = d // heads
    Lq, Lk = q.data.shape[0], k.data.shape[0]
    Q = matmul(q, params["wq"])
    K = matmul(k, params["wk"])
    V = matmul(v, params["wv"])
    Qh = transpose(reshape(Q, (Lq, heads, dh)), (1, 0, 2))
    Kh = transpose(reshape(K, (Lk, heads, dh)), (1, 0, 2))
    Vh = transpose(reshape(V, (Lk, heads, dh)), (1, 0, 2))
    scores = mul(matmul(Qh, transpose(Kh, (0, 2, 1))), 1.0 / math.sqrt(dh))
    attn = softmax(scores, axis=-1)
    ctx = matmul(attn, Vh)  # [heads, Lq, dh]
    merged = reshape(transpose(ctx, (1, 0, 2)), (Lq, d))
    return add(matmul(merged, params["wo"]), params["bo"])


# -- parameter containers ------------------------------------------------


class ParamTree:
    """Named float64 parameters with deterministic (lexicographic) iteration.

    Names are dot-separated paths; each entry is trainable unless frozen at
    `add` time. Gradients live on the tensors themselves after backward().
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._frozen: set[str] = set()

    def add(self, name: str, value, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name: {name}")
        t = Tensor(value, requires_grad=trainable)
        self._params[name] = t
        if not trainable:
            self._frozen.add(name)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        for name in self.names():
            yield name, self._params[name]

    def is_trainable(self, name: str) -> bool:
        return name not in self._frozen

    def trainable_names(self) -> list[str]:
        return [n for n in self.names() if n not in self._frozen]

    def n_scalars(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        """Gradient tree mirroring names/shapes; zeros where nothing flowed."""
        out = {}
        for name, t in self.items():
            out[name] = np.zeros_like(t.data) if t.grad is None else t.grad
        return out

    def scoped(self, prefix: str) -> "_Scope":
        return _Scope(self, prefix)


class _Scope:
    """Prefix view over a ParamTree, for `p['wq']` style access in modules."""

    def __init__(self, tree: ParamTree, prefix: str):
        self._tree = tree
        self._prefix = prefix

    def __getitem__(self, name: str) -> Tensor:
        return self._tree[f"{self._prefix}.{name}"]

    def add(self, name: str, value, trainable: bool = True) -> Tensor:
        return self._tree.add(f"{self._prefix}.{name}", value, trainable)

    def scoped(self, sub: str) -> "_Scope":
        return _Scope(self._tree, f"{self._prefix}.{sub}")


# -- gradient checking ---------------------------------------------------


@dataclass
class GradCheckEntry:
    name: str
    index: int
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradReport:
    entries: list[GradCheckEntry]
    eps: float

    @property
    def max_rel_err(self) -> float:
        return max((e.rel_err for e in self.entries), default=0.0)

    def ok(self, tol: float = 1e-4) -> bool:
        return self.max_rel_err < tol

    def worst(self) -> GradCheckEntry | None:
        return max(self.entries, key=lambda e: e.rel_err, default=None)


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(1e-8, abs(a) + abs(n))


def gradcheck(loss_fn, params: ParamTree, *, eps: float = 1e-4, samples: int = 50,
              seed: int = 0, prefixes=None) -> GradReport:
    """Compare tape gradients with central finite differences.

    Samples `samples` scalar entries from the trainable parameters (uniform
    over scalars, or round-robin across `prefixes` groups when given) and
    reports per-sample relative errors |a - n| / max(1e-8, |a| + |n|).
    """
    loss = loss_fn()
    base = float(loss.data)
    if not math.isfinite(base):
        raise NumericError("gradcheck: loss is non-finite at the base point")
    params.zero_grad()
    loss.backward()
    analytic = params.grads()

    names = params.trainable_names()
    if not names:
        raise ConfigError("gradcheck: no trainable parameters")
    rng = np.random.default_rng(seed)

    if prefixes:
        groups = []
        for pref in prefixes:
            members = [n for n in names if n == pref or n.startswith(pref + ".")]
            if members:
                groups.append(members)
        rest = [n for n in names if not any(n == p or n.startswith(p + ".") for p in prefixes)]
        if rest:
            groups.append(rest)
        picks = []
        gi = 0
        while len(picks) < samples:
            members = groups[gi % len(groups)]
            name = members[int(rng.integers(len(members)))]
            idx = int(rng.integers(params[name].data.size))
            picks.append((name, idx))
            gi += 1
    else:
        sizes = [params[n].data.size for n in names]
        cum = np.cumsum(sizes)
        total = int(cum[-1])
        picks = []
        for _ in range(samples):
            flat = int(rng.integers(total))
            j = int(np.searchsorted(cum, flat, side="right"))
            prev = 0 if j == 0 else int(cum[j - 1])
            picks.append((names[j], flat - prev))

    entries = []
    for name, idx in picks:
        buf = params[name].data.reshape(-1)
        orig = buf[idx]
        buf[idx] = orig + eps
        lp = float(loss_fn().data)
        buf[idx] = orig - eps
        lm = float(loss_fn().data)
        buf[idx] = orig
        if not (math.isfinite(lp) and math.isfinite(lm)):
            raise NumericError(f"gradcheck: non-finite loss perturbing {name}[{idx}]")
        numeric = (lp - lm) / (2.0 * eps)
        a = float(analytic[name].reshape(-1)[idx])
        entries.append(GradCheckEntry(name, idx, a, numeric, _rel_err(a, numeric)))
    return GradReport(entries, eps)
