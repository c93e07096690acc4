"""Dense-matrix reverse-mode differentiation.

Every value is a 2-D float64 matrix wrapped in a :class:`Tensor`.
Primitives applied inside an active :class:`Tape` context record their
backward rule; ``Tape.backward(loss)`` replays the records in reverse to
populate ``.grad`` on every tensor that requires gradients.  Outside a
tape, primitives are plain numpy forward computations.

Numerical conventions: softmax subtracts the row max, logs and divisions
are guarded with ``EPS = 1e-7``, layer normalization uses the same
epsilon inside the square root.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import NonFiniteError, ShapeError, StateError

EPS = 1e-7

# Global toggle for per-op finiteness checks; cheap (min/max scan) and kept
# on so exploding runs fail loudly at the op that produced the NaN.
CHECK_FINITE = True

_TAPES: list["Tape"] = []
_DIAGNOSTICS: list[list] = []


def _as_matrix(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"tensors are 2-D matrices, got ndim={arr.ndim}")
    return arr


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not CHECK_FINITE or arr.size == 0:
        return
    lo, hi = arr.min(), arr.max()
    if not (np.isfinite(lo) and np.isfinite(hi)):
        raise NonFiniteError(f"non-finite values produced by {op}")


class Tensor:
    """A 2-D matrix with an optional gradient slot."""

    __slots__ = ("values", "requires_grad", "grad", "_tape")

    def __init__(self, values, requires_grad: bool = False):
        self.values = _as_matrix(values)
        _check_finite(self.values, "tensor construction")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: "Tape | None" = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; all routing goes through the module-level primitives.
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return elementwise_mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __neg__(self):
        return scale(self, -1.0)


def tensor(values, requires_grad: bool = False) -> Tensor:
    return Tensor(values, requires_grad=requires_grad)


def parameter(values) -> Tensor:
    return Tensor(values, requires_grad=True)


def constant(values) -> Tensor:
    return Tensor(values, requires_grad=False)


class Tape:
    """Execution-ordered record of primitive applications.

    Used as a context manager; primitives run inside the ``with`` block
    are recorded.  Execution order is a valid topological order, so
    backward simply walks the records in reverse.  A tape can be
    differentiated once; a second ``backward`` raises ``StateError``.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], object, str]] = []
        self._consumed = False

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPES.pop()
        assert popped is self
        return False

    def _record(self, out, parents, vjp, name):
        self._records.append((out, parents, vjp, name))

    def __len__(self):
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` of every recorded tensor reachable from ``loss``."""
        if self._consumed:
            raise StateError("backward already ran on this tape")
        self._consumed = True
        if loss.shape != (1, 1):
            raise ShapeError(f"loss must be a 1x1 scalar, got {loss.shape}")
        if not loss.requires_grad:
            raise StateError("loss does not depend on any tensor with requires_grad")
        loss.grad = np.ones((1, 1))
        for out, parents, vjp, name in reversed(self._records):
            g = out.grad
            if g is None:
                continue
            contributions = vjp(g)
            for parent, contrib in zip(parents, contributions):
                if contrib is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.values)
                parent.grad += contrib

    def dump(self) -> str:
        """Human-readable listing of the recorded computation."""
        lines = []
        for i, (out, parents, _vjp, name) in enumerate(self._records):
            ins = ", ".join(f"{p.shape[0]}x{p.shape[1]}" for p in parents)
            lines.append(f"{i:4d}  {name}({ins}) -> {out.shape[0]}x{out.shape[1]}")
        return "\n".join(lines)


def backward(loss: Tensor) -> None:
    """Run backward on the tape that recorded ``loss``."""
    if loss._tape is None:
        raise StateError("loss was not recorded on any tape")
    loss._tape.backward(loss)


@contextlib.contextmanager
def collect_diagnostics():
    """Collect numerical diagnostics (relu kinks, zero-norm rows) from primitives."""
    sink: list = []
    _DIAGNOSTICS.append(sink)
    try:
        yield sink
    finally:
        _DIAGNOSTICS.pop()


def _diag(event: str, value) -> None:
    for sink in _DIAGNOSTICS:
        sink.append((event, value))


def diagnostics_active() -> bool:
    return bool(_DIAGNOSTICS)


def record_diagnostic(event: str, value) -> None:
    """Report a discrete decision (e.g. a selection) to active collectors."""
    _diag(event, value)


def _apply(name, out_values, parents, vjp) -> Tensor:
    _check_finite(np.asarray(out_values), name)
    out = Tensor.__new__(Tensor)
    out.values = _as_matrix(out_values)
    out.requires_grad = False
    out.grad = None
    out._tape = None
    if _TAPES and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._tape = _TAPES[-1]
        _TAPES[-1]._record(out, tuple(parents), vjp, name)
    return out


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul {a.shape} x {b.shape}")
    av, bv = a.values, b.values

    def vjp(g):
        return (g @ bv.T if a.requires_grad else None,
                av.T @ g if b.requires_grad else None)

    return _apply("matmul", av @ bv, (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be a 1-row bias broadcast over the rows of ``a``."""
    if a.shape == b.shape:
        def vjp(g):
            return (g, g)
    elif b.shape == (1, a.shape[1]):
        def vjp(g):
            return (g, g.sum(axis=0, keepdims=True))
    else:
        raise ShapeError(f"add {a.shape} + {b.shape}")
    return _apply("add", a.values + b.values, (a, b), vjp)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def vjp(g):
        return (g * s,)

    return _apply("scale", a.values * s, (a,), vjp)


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"elementwise_mul {a.shape} * {b.shape}")
    av, bv = a.values, b.values

    def vjp(g):
        return (g * bv, g * av)

    return _apply("elementwise_mul", av * bv, (a, b), vjp)


def concat_cols(*tensors: Tensor) -> Tensor:
    if not tensors:
        raise ShapeError("concat_cols needs at least one input")
    rows = tensors[0].shape[0]
    if any(t.shape[0] != rows for t in tensors):
        raise ShapeError("concat_cols inputs must share the row count")
    widths = [t.shape[1] for t in tensors]
    splits = np.cumsum(widths)[:-1]

    def vjp(g):
        blocks = np.split(g, splits, axis=1)
        return tuple(blk for blk in blocks)

    out = np.concatenate([t.values for t in tensors], axis=1)
    return _apply("concat_cols", out, tensors, vjp)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= a.shape[1]):
        raise ShapeError(f"slice_cols [{start}:{stop}] of width {a.shape[1]}")
    cols = a.shape[1]

    def vjp(g):
        full = np.zeros((g.shape[0], cols))
        full[:, start:stop] = g
        return (full,)

    return _apply("slice_cols", a.values[:, start:stop].copy(), (a,), vjp)


def gather_rows(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("gather_rows takes a flat index vector")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError("gather_rows index out of range")
    rows = a.shape[0]

    def vjp(g):
        out = np.zeros((rows, g.shape[1]))
        np.add.at(out, idx, g)
        return (out,)

    return _apply("gather_rows", a.values[idx], (a,), vjp)


def reshape(a: Tensor, rows: int, cols: int) -> Tensor:
    if rows * cols != a.values.size:
        raise ShapeError(f"reshape {a.shape} -> ({rows},{cols})")
    old = a.shape

    def vjp(g):
        return (g.reshape(old),)

    return _apply("reshape", a.values.reshape(rows, cols), (a,), vjp)


def mean_rows(a: Tensor) -> Tensor:
    n = a.shape[0]

    def vjp(g):
        return (np.repeat(g, n, axis=0) / n,)

    return _apply("mean_rows", a.values.mean(axis=0, keepdims=True), (a,), vjp)


def segment_mean_rows(a: Tensor, k: int) -> Tensor:
    """Mean of each consecutive block of ``k`` rows; rows must divide evenly."""
    rows, cols = a.shape
    if k < 1 or rows % k != 0:
        raise ShapeError(f"segment_mean_rows: {rows} rows not divisible by {k}")

    def vjp(g):
        return (np.repeat(g, k, axis=0) / k,)

    out = a.values.reshape(rows // k, k, cols).mean(axis=1)
    return _apply("segment_mean_rows", out, (a,), vjp)


def csr_mean_rows(a: Tensor, offsets: np.ndarray, targets: np.ndarray) -> Tensor:
    """Per-row mean over a CSR neighbor list; empty rows fall back to themselves.

    Row ``i`` of the output is the mean of ``a[targets[offsets[i]:offsets[i+1]]]``,
    or ``a[i]`` when the segment is empty (isolated-node filler).
    """
    n = a.shape[0]
    if offsets.shape[0] != n + 1:
        raise ShapeError("csr_mean_rows: offsets must have n+1 entries")
    degs = np.diff(offsets)
    src = np.repeat(np.arange(n), degs)
    isolated = np.flatnonzero(degs == 0)

    def forward(values):
        out = np.zeros((n, values.shape[1]))
        np.add.at(out, src, values[targets])
        nz = degs > 0
        out[nz] /= degs[nz][:, None]
        out[isolated] = values[isolated]
        return out

    def vjp(g):
        out = np.zeros((n, g.shape[1]))
        np.add.at(out, targets, g[src] / np.maximum(degs, 1)[src][:, None])
        out[isolated] += g[isolated]
        return (out,)

    return _apply("csr_mean_rows", forward(a.values), (a,), vjp)


def softmax_rows(a: Tensor) -> Tensor:
    shifted = a.values - a.values.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - dot),)

    return _apply("softmax_rows", y, (a,), vjp)


def sigmoid(a: Tensor) -> Tensor:
    x = a.values
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)

    def vjp(g):
        return (g * y * (1.0 - y),)

    return _apply("sigmoid", y, (a,), vjp)


def relu(a: Tensor) -> Tensor:
    x = a.values
    mask = x > 0
    if _DIAGNOSTICS and x.size:
        _diag("relu_branch", hash(mask.tobytes()))

    def vjp(g):
        return (g * mask,)

    return _apply("relu", np.where(mask, x, 0.0), (a,), vjp)


def log(a: Tensor) -> Tensor:
    """Natural log with an epsilon floor; the floor zone has slope 1/EPS."""
    safe = np.maximum(a.values, EPS)
    if _DIAGNOSTICS and a.values.size:
        _diag("log_floor_branch", hash((a.values < EPS).tobytes()))

    def vjp(g):
        return (g / safe,)

    return _apply("log", np.log(safe), (a,), vjp)


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape

    def vjp(g):
        return (np.full(shape, float(g[0, 0])),)

    return _apply("sum", np.array([[a.values.sum()]]), (a,), vjp)


def l2_normalize_rows(a: Tensor) -> Tensor:
    """Divide each row by its Euclidean norm.

    Rows with norm below EPS keep the epsilon denominator (so exact zero
    rows stay zero) and receive zero gradient; such rows are reported to
    the diagnostics sink.
    """
    x = a.values
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    degenerate = norms[:, 0] < EPS
    if _DIAGNOSTICS:
        if degenerate.any():
            _diag("l2_zero_row", float(degenerate.sum()))
        _diag("l2_branch", hash(degenerate.tobytes()))
    safe = np.maximum(norms, EPS)
    y = x / safe

    def vjp(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        out = (g - y * dot) / safe
        out[degenerate] = 0.0
        return (out,)

    return _apply("l2_normalize_rows", y, (a,), vjp)


def layer_norm_rows(a: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Normalize each row to zero mean / unit variance, then apply gain and bias."""
    if gain.shape != (1, a.shape[1]) or bias.shape != (1, a.shape[1]):
        raise ShapeError("layer_norm_rows: gain/bias must be (1, cols)")
    x = a.values
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + EPS)
    xhat = (x - mu) * inv_std
    gv = gain.values

    def vjp(g):
        d_gain = (g * xhat).sum(axis=0, keepdims=True) if gain.requires_grad else None
        d_bias = g.sum(axis=0, keepdims=True) if bias.requires_grad else None
        if a.requires_grad:
            dxhat = g * gv
            m1 = dxhat.mean(axis=1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
            dx = inv_std * (dxhat - m1 - xhat * m2)
        else:
            dx = None
        return (dx, d_gain, d_bias)

    return _apply("layer_norm_rows", xhat * gv + bias.values, (a, gain, bias), vjp)


# ---------------------------------------------------------------------------
# gradient verification


class FiniteDiffReport:
    """Per-parameter comparison of analytic vs central-difference gradients."""

    def __init__(self, step: float, tol: float):
        self.step = step
        self.tol = tol
        self.per_param: dict[str, float] = {}
        self.excluded: dict[str, list[tuple[int, int]]] = {}

    @property
    def max_rel_error(self) -> float:
        return max(self.per_param.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def summary(self) -> str:
        lines = [f"finite-difference check (step={self.step:g}, tol={self.tol:g})"]
        for name, err in self.per_param.items():
            mark = "ok" if err < self.tol else "FAIL"
            note = ""
            if name in self.excluded:
                note = f"  [{len(self.excluded[name])} kink-adjacent entries excluded]"
            lines.append(f"  {name}: max rel err {err:.3e} {mark}{note}")
        return "\n".join(lines)


def finite_diff_check(f, params, step: float = 1e-5, tol: float = 1e-4,
                      max_entries: int | None = None, rng=None) -> FiniteDiffReport:
    """Compare analytic gradients of scalar ``f()`` with central differences.

    ``f`` must be deterministic given the current values of ``params``
    (a mapping name -> Tensor with requires_grad).  A coordinate is
    excluded (and listed in the report) when its two perturbed passes
    disagree on any discrete branch — a relu activation pattern, an
    epsilon floor, a degenerate row, or a selection recorded through the
    diagnostics hook — since central differences are meaningless across
    such a flip.  When ``max_entries`` is set, a random subset of
    coordinates per parameter is checked instead of all of them.
    """
    if isinstance(params, dict):
        named = list(params.items())
    else:
        named = [(f"p{i}", p) for i, p in enumerate(params)]

    for _, p in named:
        p.grad = None
    with collect_diagnostics() as base_diag:
        with Tape() as tape:
            loss = f()
    tape.backward(loss)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.values))
                for name, p in named}
    base_branches = [d for d in base_diag if d[0] != "l2_zero_row"]

    report = FiniteDiffReport(step, tol)
    rng = rng or np.random.default_rng(0)
    for name, p in named:
        coords = [(i, j) for i in range(p.shape[0]) for j in range(p.shape[1])]
        if max_entries is not None and len(coords) > max_entries:
            chosen = rng.choice(len(coords), size=max_entries, replace=False)
            coords = [coords[c] for c in chosen]
        worst = 0.0
        excluded = []
        for (i, j) in coords:
            orig = p.values[i, j]
            vals = []
            flipped = False
            for delta in (step, -step):
                p.values[i, j] = orig + delta
                with collect_diagnostics() as diag:
                    out = f()
                vals.append(float(out.values[0, 0]))
                branches = [d for d in diag if d[0] != "l2_zero_row"]
                if branches != base_branches:
                    flipped = True
            p.values[i, j] = orig
            if flipped:
                excluded.append((i, j))
                continue
            fd = (vals[0] - vals[1]) / (2 * step)
            an = analytic[name][i, j]
            # The denominator floor keeps roundoff on near-zero gradients
            # (FD noise ~ eps*f/step) from reading as a relative error.
            rel = abs(an - fd) / max(abs(an) + abs(fd), 1e-6)
            worst = max(worst, rel)
        report.per_param[name] = worst
        if excluded:
            report.excluded[name] = excluded
    return report
