"""Dense 2-D tensors with reverse-mode automatic differentiation.

Every primitive validates shapes, computes its forward value in float64,
and records a vector-Jacobian closure on a thread-local tape whenever a
tracked tensor is involved. `backward` replays the tape in reverse and
returns a gradient map for the participating leaf tensors; the tape is
define-by-run and cleared after each backward pass.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np
import scipy.sparse as sp

from .errors import DomainError, NumericError, ShapeError, ValidationError

STD_EPSILON = 1e-8
NORM_FLOOR = 1e-12


def _finite(arr) -> bool:
    # sum() is NaN/Inf whenever any entry is; far cheaper than isfinite().all()
    return bool(np.isfinite(arr.sum()))


class Tensor:
    """A rows-by-cols float64 array, optionally tracked for gradients.

    Scalars become 1x1, one-dimensional input becomes a single row.
    Tensor data is treated as immutable once wrapped.
    """

    __slots__ = ("data", "requires_grad", "_on_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"tensor: expected at most 2 dimensions, got {arr.ndim}")
        if not _finite(arr):
            raise ValidationError("tensor: values must be finite")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._on_tape = False

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor has shape {self.data.shape}")
        return float(self.data[0, 0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of primitive applications for one reverse pass."""

    __slots__ = ("records",)

    def __init__(self):
        self.records = []

    def clear(self):
        self.records.clear()

    def __len__(self):
        return len(self.records)


_tls = threading.local()


def active_tape() -> Tape:
    tape = getattr(_tls, "tape", None)
    if tape is None:
        tape = _tls.tape = Tape()
    return tape


@contextmanager
def no_grad():
    """Suspend tape recording; forward values are computed as usual."""
    prior = getattr(_tls, "recording_off", False)
    _tls.recording_off = True
    try:
        yield
    finally:
        _tls.recording_off = prior


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _apply(kind, out_data, inputs, vjp) -> Tensor:
    if not _finite(out_data):
        raise NumericError(f"{kind}: produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = False
    out._on_tape = False
    if not getattr(_tls, "recording_off", False) and any(
        t._on_tape or t.requires_grad for t in inputs
    ):
        out._on_tape = True
        active_tape().records.append((out, inputs, vjp))
    return out


def backward(loss: Tensor) -> dict:
    """Reverse-accumulate gradients of a scalar loss.

    Returns a mapping from each contributing requires_grad leaf tensor to
    its gradient array. The ambient tape is cleared afterwards.
    """
    if not isinstance(loss, Tensor) or loss.shape != (1, 1):
        raise ShapeError("backward: loss must be a 1x1 tensor")
    tape = active_tape()
    if not loss._on_tape:
        raise ValidationError("backward: loss is not recorded on the tape")
    try:
        out_ids = {id(rec[0]) for rec in tape.records}
        grads = {id(loss): np.ones((1, 1))}
        result = {}
        for out, inputs, vjp in reversed(tape.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, ig in zip(inputs, vjp(g)):
                if ig is None:
                    continue
                if id(t) in out_ids:
                    prior = grads.get(id(t))
                    # out-of-place adds: vjp outputs may alias upstream buffers
                    grads[id(t)] = ig if prior is None else prior + ig
                elif t.requires_grad:
                    prior = result.get(t)
                    result[t] = ig.copy() if prior is None else prior + ig
    finally:
        tape.clear()
    return result


# ---------------------------------------------------------------------------
# primitives


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        return g @ bd.T, ad.T @ g

    return _apply("matmul", ad @ bd, (a, b), vjp)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    return _apply("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}")
    return _apply("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def scale(a, c) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    if not np.isfinite(c):
        raise ValidationError("scale: factor must be finite")
    return _apply("scale", c * a.data, (a,), lambda g: (c * g,))


def hadamard(a, b) -> Tensor:
    """Elementwise product; a single-column operand broadcasts across columns."""
    a, b = _as_tensor(a), _as_tensor(b)
    ok = a.shape[0] == b.shape[0] and (
        a.shape[1] == b.shape[1] or 1 in (a.shape[1], b.shape[1])
    )
    if not ok:
        raise ShapeError(f"hadamard: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g * bd
        gb = g * ad
        if ga.shape != ad.shape:
            ga = ga.sum(axis=1, keepdims=True)
        if gb.shape != bd.shape:
            gb = gb.sum(axis=1, keepdims=True)
        return ga, gb

    return _apply("hadamard", ad * bd, (a, b), vjp)


def concat_cols(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_cols: {a.shape} vs {b.shape}")
    wa = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _apply("concat_cols", out, (a, b), lambda g: (g[:, :wa], g[:, wa:]))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _apply("relu", np.maximum(ad, 0.0), (a,), lambda g: (g * (ad > 0),))


def leaky_relu(a, slope=0.2) -> Tensor:
    a = _as_tensor(a)
    slope = float(slope)
    ad = a.data
    out = np.where(ad > 0, ad, slope * ad)
    return _apply(
        "leaky_relu", out, (a,), lambda g: (g * np.where(ad > 0, 1.0, slope),)
    )


def exp(a) -> Tensor:
    a = _as_tensor(a)
    # overflow becomes Inf here and is surfaced as NumericError by _apply
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _apply("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    if np.any(ad <= 0):
        raise DomainError("log: requires strictly positive input")
    return _apply("log", np.log(ad), (a,), lambda g: (g / ad,))


def row_softmax(a) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _apply("row_softmax", s, (a,), vjp)


def masked_row_softmax(a, keep) -> Tensor:
    """Row softmax over positions where `keep` is True; others get exactly 0."""
    a = _as_tensor(a)
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != a.shape:
        raise ShapeError(f"masked_row_softmax: {a.shape} vs mask {keep.shape}")
    ad = a.data
    rowmax = np.where(keep, ad, -np.inf).max(axis=1, keepdims=True)
    rowmax = np.where(np.isfinite(rowmax), rowmax, 0.0)
    e = np.zeros_like(ad)
    e[keep] = np.exp((ad - rowmax)[keep])
    denom = e.sum(axis=1, keepdims=True)
    s = e / np.where(denom > 0, denom, 1.0)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _apply("masked_row_softmax", s, (a,), vjp)


def l2_normalize_rows(a) -> Tensor:
    """Scale each row to unit norm; rows with norm below 1e-12 stay zero."""
    a = _as_tensor(a)
    ad = a.data
    norms = np.sqrt((ad * ad).sum(axis=1, keepdims=True))
    inv = np.where(norms >= NORM_FLOOR, 1.0 / np.where(norms > 0, norms, 1.0), 0.0)
    out = ad * inv

    def vjp(g):
        return (inv * (g - out * (out * g).sum(axis=1, keepdims=True)),)

    return _apply("l2_normalize_rows", out, (a,), vjp)


def standardize_columns(a) -> Tensor:
    """Shift/scale each column to mean 0 and unit 2-norm.

    Uses the population standard deviation with a 1e-8 epsilon and divides
    by sqrt(n), so non-degenerate columns come out with norm 1.
    """
    a = _as_tensor(a)
    ad = a.data
    n = ad.shape[0]
    mu = ad.mean(axis=0, keepdims=True)
    xc = ad - mu
    sigma = np.sqrt((xc * xc).mean(axis=0, keepdims=True))
    c = 1.0 / ((sigma + STD_EPSILON) * np.sqrt(n))
    out = xc * c

    def vjp(g):
        p = c * (g - g.mean(axis=0, keepdims=True))
        s = (g * xc).sum(axis=0, keepdims=True)
        safe_sigma = np.where(sigma > 0, sigma, 1.0)
        q = -c * s * xc / ((safe_sigma + STD_EPSILON) * n * safe_sigma)
        return (p + np.where(sigma > 0, q, 0.0),)

    return _apply("standardize_columns", out, (a,), vjp)


def frobenius_sq(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    out = np.array([[float((ad * ad).sum())]])
    return _apply("frobenius_sq", out, (a,), lambda g: (2.0 * g[0, 0] * ad,))


def row_dot(a, b) -> Tensor:
    """Per-row dot product; a single-row operand broadcasts against the other."""
    a, b = _as_tensor(a), _as_tensor(b)
    ok = a.shape[1] == b.shape[1] and (
        a.shape[0] == b.shape[0] or 1 in (a.shape[0], b.shape[0])
    )
    if not ok:
        raise ShapeError(f"row_dot: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    out = (ad * bd).sum(axis=1, keepdims=True)

    def vjp(g):
        ga = g * bd
        gb = g * ad
        if ga.shape != ad.shape:
            ga = ga.sum(axis=0, keepdims=True)
        if gb.shape != bd.shape:
            gb = gb.sum(axis=0, keepdims=True)
        return ga, gb

    return _apply("row_dot", out, (a, b), vjp)


def mean_scalar(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    out = np.array([[float(ad.mean())]])

    def vjp(g):
        return (np.full_like(ad, g[0, 0] / ad.size),)

    return _apply("mean_scalar", out, (a,), vjp)


def power(a, p) -> Tensor:
    a = _as_tensor(a)
    p = float(p)
    ad = a.data
    if p != round(p) and np.any(ad < 0):
        raise DomainError("power: fractional exponent of a negative base")
    if p < 0 and np.any(ad == 0):
        raise DomainError("power: zero base with a negative exponent")
    with np.errstate(over="ignore"):
        out = np.power(ad, p)

    def vjp(g):
        return (g * p * np.power(ad, p - 1.0),)

    return _apply("power", out, (a,), vjp)


class ScatterPlan:
    """Reusable index bundle for repeated gather/scatter along fixed edges.

    Wraps the one-hot selection matrix as CSR so segment sums run as a
    single sparse-dense product with a fixed, reproducible summation order.
    """

    __slots__ = ("idx", "num_rows", "matrix")

    def __init__(self, idx, num_rows):
        idx = np.asarray(idx, dtype=np.int64).ravel()
        num_rows = int(num_rows)
        if idx.size and (idx.min() < 0 or idx.max() >= num_rows):
            raise ValidationError("scatter plan: index out of range")
        self.idx = idx
        self.num_rows = num_rows
        self.matrix = sp.csr_matrix(
            (np.ones(idx.size), (idx, np.arange(idx.size))),
            shape=(num_rows, idx.size),
        )


def gather_rows(a, idx, plan: ScatterPlan | None = None) -> Tensor:
    """Select rows of `a` by index; `plan` speeds up the backward scatter."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64).ravel()
    n = a.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ValidationError("gather_rows: index out of range")
    if plan is not None and (plan.num_rows != n or plan.idx.size != idx.size):
        raise ShapeError("gather_rows: plan does not match index")
    out = a.data[idx]

    def vjp(g):
        mat = plan.matrix if plan is not None else ScatterPlan(idx, n).matrix
        return (mat @ g,)

    return _apply("gather_rows", out, (a,), vjp)


def scatter_add_rows(a, idx, num_rows, plan: ScatterPlan | None = None) -> Tensor:
    """Sum rows of `a` into `num_rows` buckets given by `idx`."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64).ravel()
    if idx.size != a.shape[0]:
        raise ShapeError(f"scatter_add_rows: {a.shape} vs {idx.size} indices")
    if plan is None:
        plan = ScatterPlan(idx, num_rows)
    elif plan.num_rows != int(num_rows) or plan.idx.size != idx.size:
        raise ShapeError("scatter_add_rows: plan does not match index")
    out = plan.matrix @ a.data
    if out.ndim == 1:
        out = out.reshape(-1, 1)

    def vjp(g):
        return (g[idx],)

    return _apply("scatter_add_rows", out, (a,), vjp)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    return _apply("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


# ---------------------------------------------------------------------------
# finite-difference oracle


def finite_difference_gradient(f, x, eps: float = 1e-5) -> Tensor:
    """Central-difference gradient estimate of a scalar function at x."""
    if eps <= 0:
        raise ValidationError("finite_difference_gradient: eps must be positive")
    x = _as_tensor(x)
    base = x.data
    out = np.zeros_like(base)
    for i in range(base.size):
        xp = base.copy()
        xp.flat[i] += eps
        xm = base.copy()
        xm.flat[i] -= eps
        out.flat[i] = (_scalar(f(Tensor(xp))) - _scalar(f(Tensor(xm)))) / (2 * eps)
    return Tensor(out)


def _scalar(v) -> float:
    return v.item() if isinstance(v, Tensor) else float(v)


def gradient_check(f, xs, eps: float = 1e-5) -> float:
    """Max relative error of reverse-mode vs central differences.

    `f` maps the given tensors to a scalar; the error per element is
    |g - g_fd| / max(1, |g_fd|), maximized over all inputs.
    """
    leaves = [Tensor(_as_tensor(x).data.copy(), requires_grad=True) for x in xs]
    grads = backward(f(*leaves))
    worst = 0.0
    for i, leaf in enumerate(leaves):
        def probe(v, _i=i):
            args = [Tensor(l.data) for l in leaves]
            args[_i] = v
            return f(*args)

        fd = finite_difference_gradient(probe, Tensor(leaf.data), eps).data
        g = grads.get(leaf)
        if g is None:
            g = np.zeros_like(fd)
        err = np.abs(g - fd) / np.maximum(1.0, np.abs(fd))
        if err.size:
            worst = max(worst, float(err.max()))
    return worst


def primitive_gradient_suite(seed: int) -> list:
    """Gradient-check every differentiable primitive at random inputs.

    Returns (name, max_relative_error) pairs; used by tests and the CLI.
    """
    rng = np.random.default_rng(seed)

    def mat(r, c, low=-1.0, high=1.0):
        return rng.uniform(low, high, size=(r, c))

    def away_from_zero(r, c):
        x = mat(r, c)
        return x + np.where(x >= 0, 0.2, -0.2)

    contract = Tensor(mat(5, 4))

    def reduced(t):
        return mean_scalar(hadamard(t, contract)) if t.shape == (5, 4) else mean_scalar(t)

    keep = rng.random((5, 4)) < 0.6
    keep[:, 0] = True
    idx = rng.integers(0, 5, size=9)
    plan = ScatterPlan(idx, 5)
    scatter_in = mat(9, 4)
    cases = [
        ("matmul", lambda a, b: reduced(matmul(a, b)), [mat(5, 3), mat(3, 4)]),
        ("add", lambda a, b: reduced(add(a, b)), [mat(5, 4), mat(5, 4)]),
        ("sub", lambda a, b: reduced(sub(a, b)), [mat(5, 4), mat(5, 4)]),
        ("scale", lambda a: reduced(scale(a, -1.7)), [mat(5, 4)]),
        ("hadamard", lambda a, b: reduced(hadamard(a, b)), [mat(5, 4), mat(5, 4)]),
        ("hadamard_bcast", lambda a, b: reduced(hadamard(a, b)), [mat(5, 1), mat(5, 4)]),
        (
            "concat_cols",
            lambda a, b: reduced(concat_cols(a, b)),
            [mat(5, 1), mat(5, 3)],
        ),
        ("relu", lambda a: reduced(relu(a)), [away_from_zero(5, 4)]),
        ("leaky_relu", lambda a: reduced(leaky_relu(a, 0.2)), [away_from_zero(5, 4)]),
        ("exp", lambda a: reduced(exp(a)), [mat(5, 4)]),
        ("log", lambda a: reduced(log(a)), [mat(5, 4, 0.5, 2.0)]),
        ("row_softmax", lambda a: reduced(row_softmax(a)), [mat(5, 4)]),
        (
            "masked_row_softmax",
            lambda a: reduced(masked_row_softmax(a, keep)),
            [mat(5, 4)],
        ),
        (
            "l2_normalize_rows",
            lambda a: reduced(l2_normalize_rows(a)),
            [mat(5, 4) + 2.0],
        ),
        (
            "standardize_columns",
            lambda a: reduced(standardize_columns(a)),
            [mat(5, 4)],
        ),
        ("frobenius_sq", lambda a: frobenius_sq(a), [mat(5, 4)]),
        ("row_dot", lambda a, b: reduced(row_dot(a, b)), [mat(5, 4), mat(5, 4)]),
        ("row_dot_bcast", lambda a, b: reduced(row_dot(a, b)), [mat(1, 4), mat(5, 4)]),
        ("mean_scalar", lambda a: mean_scalar(a), [mat(5, 4)]),
        ("power_square", lambda a: reduced(power(a, 2.0)), [mat(5, 4)]),
        (
            "power_inverse",
            lambda a: reduced(power(a, -1.0)),
            [mat(5, 4, 0.5, 2.0)],
        ),
        (
            "power_fractional",
            lambda a: reduced(power(a, 1.5)),
            [mat(5, 4, 0.5, 2.0)],
        ),
        (
            "gather_rows",
            lambda a: mean_scalar(hadamard(gather_rows(a, idx), scatter_in)),
            [mat(5, 4)],
        ),
        (
            "scatter_add_rows",
            lambda a: reduced(scatter_add_rows(a, idx, 5, plan)),
            [mat(9, 4)],
        ),
        ("transpose", lambda a: mean_scalar(power(transpose(a), 2.0)), [mat(5, 3)]),
    ]
    return [(name, gradient_check(f, xs)) for name, f, xs in cases]
