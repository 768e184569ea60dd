"""Dense float64 tensors with a reverse-mode autodiff tape.

Every higher-level piece (attention, encoder blocks, the training loop) is
built from the primitives in this module. Ops record themselves onto a
dynamic graph as they run; ``backward`` walks that graph once, in reverse
topological order, and accumulates vector-Jacobian products.

All data is float64 and row-major. Any NaN or Inf entering or leaving an
op is a contract violation and raises ``NonFiniteError`` immediately.
A graph and its tensors belong to a single thread; detached value arrays
are plain numpy and safe to share read-only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf showed up in tensor data."""


class Tensor:
    """Dense float64 array node in the autodiff graph.

    ``requires_grad`` marks tensors whose gradient ``backward`` should
    populate. Tensors produced by ops inherit the flag from their inputs
    and keep a reference to the op that created them, which is all the
    graph structure backward needs.
    """

    __slots__ = ("data", "requires_grad", "grad", "creator")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"tensor data contains NaN/Inf (shape {arr.shape})")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.creator: OpNode | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Copy of the values, cut loose from the graph."""
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class OpNode:
    """One executed primitive op: inputs, output, and its adjoint rule."""

    __slots__ = ("name", "inputs", "output", "vjp")

    def __init__(self, name, inputs, output, vjp):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class Graph:
    """Ordered record of the ops that produce one output tensor.

    ``ops`` is topologically sorted: every op appears after the ops that
    produced its inputs, and each op appears exactly once.
    """

    def __init__(self, ops: list):
        self.ops = ops

    @staticmethod
    def trace(root: Tensor) -> "Graph":
        ops: list[OpNode] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            tensor, ready = stack.pop()
            node = tensor.creator
            if node is None:
                continue
            if ready:
                ops.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((tensor, True))
            for parent in node.inputs:
                stack.append((parent, False))
        return Graph(ops)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into ``grad`` for every tensor that
    requires grad and is reachable from ``loss``.

    Each call adds one more copy of the gradient; callers reset with
    ``zero_grad`` between steps. Leaves with ``requires_grad=False`` are
    simply left alone.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = Graph.trace(loss)
    # Fresh per-call accumulators so repeated backward calls stack cleanly.
    fresh: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    touched: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(graph.ops):
        gout = fresh.get(id(node.output))
        if gout is None:
            continue
        for parent, g in zip(node.inputs, node.vjp(gout)):
            if g is None or not parent.requires_grad:
                continue
            pid = id(parent)
            if pid in fresh:
                fresh[pid] = fresh[pid] + g
            else:
                fresh[pid] = g
                touched[pid] = parent
    for tid, t in touched.items():
        if t.requires_grad:
            t.grad = fresh[tid] if t.grad is None else t.grad + fresh[tid]


def zero_grads(tensors) -> None:
    """Clear ``grad`` on an iterable (or name->Tensor mapping) of tensors."""
    if hasattr(tensors, "values"):
        tensors = tensors.values()
    for t in tensors:
        t.zero_grad()


def _record(name, inputs, out_data, vjp) -> Tensor:
    out = Tensor(out_data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.creator = OpNode(name, tuple(inputs), out, vjp)
    return out


def _swap_last2(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum the leading axes numpy broadcasting added, back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    return g


# ---------------------------------------------------------------------------
# primitive ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    2-D operands give the plain m x k @ k x n product. Higher-rank operands
    are stacks of matrices; leading axes must match exactly, or be absent
    on one side (that side is broadcast across the stack).
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} vs {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul leading axes differ: {a.shape} vs {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        ga = _unbroadcast(g @ _swap_last2(b.data), a.shape)
        gb = _unbroadcast(_swap_last2(a.data) @ g, b.shape)
        return ga, gb

    return _record("matmul", (a, b), out, vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")
    return _record("add", (a, b), a.data + b.data, lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes differ: {a.shape} vs {b.shape}")
    return _record("mul", (a, b), a.data * b.data, lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a python scalar constant."""
    f = float(factor)
    return _record("scale", (x,), x.data * f, lambda g: (g * f,))


def mul_const(x: Tensor, const) -> Tensor:
    """Elementwise product with a constant array (no gradient to the constant)."""
    c = np.asarray(const, dtype=np.float64)
    if c.shape != x.shape and c.ndim != 0:
        raise ShapeError(f"mul_const shapes differ: {x.shape} vs {c.shape}")
    return _record("mul_const", (x,), x.data * c, lambda g: (g * c,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-D bias vector along the last axis of x (.., D)."""
    if b.ndim != 1 or x.ndim < 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias shapes incompatible: {x.shape} vs {b.shape}")
    d = b.shape[0]

    def vjp(g):
        return g, g.reshape(-1, d).sum(axis=0)

    return _record("add_bias", (x, b), x.data + b.data, vjp)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map along the last axis: x @ w (+ b).

    x may carry any number of leading axes; a bare (Din,) vector is also
    accepted and returns (Dout,).
    """
    if w.ndim != 2:
        raise ShapeError(f"linear weight must be 2-D, got {w.shape}")
    if x.ndim < 1 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    if x.ndim == 1:
        y = matmul(reshape(x, (1, x.shape[0])), w)
        if b is not None:
            y = add_bias(y, b)
        return reshape(y, (w.shape[1],))
    y = matmul(x, w)
    return add_bias(y, b) if b is not None else y


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, exact form 0.5 * x * (1 + erf(x / sqrt(2)))."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    xd = x.data

    def vjp(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
        return (g * (cdf + xd * pdf),)

    return _record("gelu", (x,), xd * cdf, vjp)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis, stabilised by per-row max subtraction.

    Output rows are non-negative and sum to 1.
    """
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record("softmax_rows", (x,), y, vjp)


def log_softmax_rows(x: Tensor) -> Tensor:
    """Log of softmax along the last axis, computed stably."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _record("log_softmax_rows", (x,), out, vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then apply
    the gamma/beta affine. Variance is the population variance (divide by D).
    """
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be positive, got {eps}")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match last axis of {x.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv

    def vjp(g):
        dxhat = g * gamma.data
        dgamma = (g * xhat).reshape(-1, d).sum(axis=0)
        dbeta = g.reshape(-1, d).sum(axis=0)
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, dgamma, dbeta

    return _record("layer_norm", (x, gamma, beta), gamma.data * xhat + beta.data, vjp)


def concat(tensors, axis: int) -> Tensor:
    """Concatenate tensors along one axis; all other extents must agree."""
    ts = list(tensors)
    if not ts:
        raise ShapeError("concat needs at least one tensor")
    ndim = ts[0].ndim
    ax = axis if axis >= 0 else axis + ndim
    if not 0 <= ax < ndim:
        raise ShapeError(f"concat axis {axis} out of range for rank {ndim}")
    ref = list(ts[0].shape)
    for t in ts[1:]:
        other = list(t.shape)
        if t.ndim != ndim or other[:ax] + other[ax + 1 :] != ref[:ax] + ref[ax + 1 :]:
            raise ShapeError(f"concat shapes differ off axis {axis}: {ts[0].shape} vs {t.shape}")
    sizes = [t.shape[ax] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=ax))

    return _record("concat", tuple(ts), np.concatenate([t.data for t in ts], axis=ax), vjp)


def concat_patches(a: Tensor, b: Tensor) -> Tensor:
    """Stack two (.., P, D) tensors along the patch axis, a's rows first."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"concat_patches needs rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"concat_patches feature widths differ: {a.shape} vs {b.shape}")
    return concat((a, b), axis=-2)


def mean_pool_patches(x: Tensor) -> Tensor:
    """Average a (.., P, D) tensor over its patch axis, giving (.., D)."""
    if x.ndim < 2:
        raise ShapeError(f"mean_pool_patches needs rank >= 2, got {x.shape}")
    p = x.shape[-2]

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, -2), x.shape) / p,)

    return _record("mean_pool_patches", (x,), x.data.mean(axis=-2), vjp)


def sum_all(x: Tensor) -> Tensor:
    """Sum every entry down to a scalar tensor."""

    def vjp(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record("sum_all", (x,), x.data.sum(), vjp)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise ShapeError(f"reshape {x.shape} -> {shape} changes element count")
    return _record("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(x.shape),))


def swap_axes(x: Tensor, ax1: int, ax2: int) -> Tensor:
    return _record(
        "swap_axes", (x,), np.swapaxes(x.data, ax1, ax2), lambda g: (np.swapaxes(g, ax1, ax2),)
    )


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class ParamCheck:
    """Finite-difference result for one named parameter tensor."""

    name: str
    checked: int
    max_rel_err: float


@dataclass
class FiniteDiffReport:
    h: float
    tol: float
    params: list = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((p.max_rel_err for p in self.params), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def summary(self) -> str:
        lines = [
            f"{p.name}: max rel err {p.max_rel_err:.3e} over {p.checked} entries"
            for p in self.params
        ]
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"worst {self.max_rel_err:.3e} vs tol {self.tol:.1e}: {verdict}")
        return "\n".join(lines)


def finite_diff_check(
    f,
    params,
    h: float = 1e-5,
    tol: float = 1e-4,
    samples_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> FiniteDiffReport:
    """Compare backward gradients of ``f`` against central finite differences.

    ``f`` is a zero-argument callable returning a scalar Tensor; it must be
    deterministic (run stochastic layers in eval mode). ``params`` maps
    names to leaf tensors. By default every entry of every parameter is
    perturbed; ``samples_per_param`` caps the entries per tensor (chosen
    with ``rng``) so large models stay checkable in seconds.

    The error reported per entry is |analytic - numeric| scaled by
    max(1, |analytic|, |numeric|), i.e. relative for large gradients and
    absolute near zero.
    """
    if hasattr(params, "items"):
        named = list(params.items())
    else:
        named = list(params)
    loss = f()
    if loss.size != 1:
        raise ShapeError(f"finite_diff_check needs a scalar f(), got shape {loss.shape}")
    for _, t in named:
        t.zero_grad()
    backward(loss)
    analytic = {name: (np.zeros_like(t.data) if t.grad is None else t.grad.copy()) for name, t in named}
    for _, t in named:
        t.zero_grad()

    report = FiniteDiffReport(h=h, tol=tol)
    if rng is None:
        rng = np.random.default_rng(0)
    for name, t in named:
        flat = t.data.reshape(-1)
        n = flat.size
        if samples_per_param is None or samples_per_param >= n:
            indices = range(n)
        else:
            indices = sorted(rng.choice(n, size=samples_per_param, replace=False).tolist())
        worst = 0.0
        checked = 0
        aflat = analytic[name].reshape(-1)
        for i in indices:
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = aflat[i]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
            checked += 1
        report.params.append(ParamCheck(name=name, checked=checked, max_rel_err=worst))
    return report
