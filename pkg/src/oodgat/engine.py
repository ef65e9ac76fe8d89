"""Reverse-mode automatic differentiation over 2-D float64 matrices.

Every model in this package is expressed through the ops below. Each op
computes its value with numpy and, when a gradient tape is active in the
current thread, records a closure that maps the output gradient back to
input gradients. Tapes are single-use: one backward per recording.

Matrix constants (plain ndarrays or scipy sparse matrices) may be passed
wherever a Tensor is accepted; they take part in the forward computation
but never receive gradients. This is how node features stay sparse all
the way through the first linear layer without materialising a dense
copy.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import EngineError

Array = np.ndarray

_TLS = threading.local()

# Values smaller than this are compared absolutely in grad_check; below it
# relative error loses meaning against finite-difference noise.
_REL_FLOOR = 1e-2

_LOG_CLAMP = 1e-12


def _active_tape() -> "GradTape | None":
    return getattr(_TLS, "tape", None)


class Tensor:
    """A 2-D float64 matrix tracked by the engine.

    `grad` is populated by `backward` for leaves only. `tape_id` is the
    position of the producing op on the recording tape, None for leaves.
    """

    __slots__ = ("values", "requires_grad", "grad", "tape_id", "_tape")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim != 2:
            raise EngineError(f"tensors are 2-D, got shape {arr.shape}")
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self.tape_id: int | None = None
        self._tape: GradTape | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.values.shape}{flag})"


class GradTape:
    """Records ops for one forward pass. Context manager, one per thread."""

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple, Callable]] = []
        self._used = False

    def __enter__(self) -> "GradTape":
        if _active_tape() is not None:
            raise EngineError("a gradient tape is already active in this thread")
        _TLS.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _TLS.tape = None
        return False


def _record(out: Tensor, inputs: tuple, bwd: Callable[[Array], Sequence[Array | None]]):
    """Attach `out` to the active tape if any input needs a gradient."""
    tape = _active_tape()
    if tape is None:
        return
    if not any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        return
    out.requires_grad = True
    out.tape_id = len(tape._nodes)
    out._tape = tape
    tape._nodes.append((out, inputs, bwd))


def _values(x, allow_sparse: bool = False):
    if isinstance(x, Tensor):
        return x.values
    if sp.issparse(x):
        if not allow_sparse:
            raise EngineError("sparse constants are only supported as matmul operands")
        if x.dtype != np.float64:
            raise EngineError("sparse constants must be float64")
        return x
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        return arr
    if arr.ndim != 2:
        raise EngineError(f"constants must be scalars or 2-D, got shape {arr.shape}")
    return arr


def _needs_grad(x) -> bool:
    return isinstance(x, Tensor) and x.requires_grad


def backward(loss: Tensor) -> dict[Tensor, Array]:
    """Run reverse accumulation from a 1x1 loss back to the leaves.

    Returns a map from leaf Tensor to its gradient array. Leaves the loss
    does not depend on are simply absent; callers treat missing as zero.
    The map is also written into each leaf's `.grad`.
    """
    if not isinstance(loss, Tensor):
        raise EngineError("backward expects a Tensor")
    if loss.shape != (1, 1):
        raise EngineError(f"backward needs a 1x1 loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise EngineError("loss is not attached to a tape; run the forward pass "
                          "inside `with GradTape():` and make sure it touches at "
                          "least one requires_grad tensor")
    if tape._used:
        raise EngineError("this tape has already been consumed by backward")
    tape._used = True

    grads: dict[int, Array] = {id(loss): np.ones((1, 1))}
    leaves: dict[int, Tensor] = {}

    # Nodes were appended in forward order, so a single reverse sweep sees
    # every output before any of its producers. Accumulation order across
    # fan-out consumers is therefore fixed by tape order: deterministic.
    for out, inputs, bwd in reversed(tape._nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue  # not on any path to the loss
        for t, gi in zip(inputs, bwd(g)):
            if gi is None or not _needs_grad(t):
                continue
            prev = grads.get(id(t))
            grads[id(t)] = gi if prev is None else prev + gi
            if t._tape is not tape:
                leaves[id(t)] = t

    result: dict[Tensor, Array] = {}
    for tid, t in leaves.items():
        g = grads.get(tid)
        if g is not None:
            t.grad = g
            result[t] = g
    return result


# ---------------------------------------------------------------------------
# pointwise ops


def _broadcast_bwd(x, g: Array) -> Array:
    # inputs are either full-shape or 1x1 scalars; collapse for the latter
    if isinstance(x, Tensor) and x.shape == (1, 1) and g.shape != (1, 1):
        return np.array([[g.sum()]])
    return g


def _check_pointwise_shapes(av, bv):
    sa = (1, 1) if np.ndim(av) == 0 else av.shape
    sb = (1, 1) if np.ndim(bv) == 0 else bv.shape
    if sa != sb and sa != (1, 1) and sb != (1, 1):
        raise EngineError(f"shape mismatch in pointwise op: {sa} vs {sb}")


def add(a, b) -> Tensor:
    av, bv = _values(a), _values(b)
    _check_pointwise_shapes(av, bv)
    out = Tensor(np.atleast_2d(av + bv))
    _record(out, (a, b), lambda g: (_broadcast_bwd(a, g), _broadcast_bwd(b, g)))
    return out


def sub(a, b) -> Tensor:
    av, bv = _values(a), _values(b)
    _check_pointwise_shapes(av, bv)
    out = Tensor(np.atleast_2d(av - bv))
    _record(out, (a, b), lambda g: (_broadcast_bwd(a, g), _broadcast_bwd(b, -g)))
    return out


def mul(a, b) -> Tensor:
    av, bv = _values(a), _values(b)
    _check_pointwise_shapes(av, bv)
    out = Tensor(np.atleast_2d(av * bv))

    def bwd(g):
        return (_broadcast_bwd(a, g * bv), _broadcast_bwd(b, g * av))

    _record(out, (a, b), bwd)
    return out


def div(a, b) -> Tensor:
    av, bv = _values(a), _values(b)
    _check_pointwise_shapes(av, bv)
    out = Tensor(np.atleast_2d(av / bv))

    def bwd(g):
        return (_broadcast_bwd(a, g / bv),
                _broadcast_bwd(b, -g * av / (bv * bv)))

    _record(out, (a, b), bwd)
    return out


def scale(x, c: float) -> Tensor:
    c = float(c)
    out = Tensor(_values(x) * c)
    _record(out, (x,), lambda g: (g * c,))
    return out


def sigmoid(x) -> Tensor:
    v = _values(x)
    # stable logistic: never exponentiates a large positive argument
    y = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))),
                 np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
    out = Tensor(y)
    _record(out, (x,), lambda g: (g * y * (1.0 - y),))
    return out


def exp(x) -> Tensor:
    y = np.exp(_values(x))
    out = Tensor(y)
    _record(out, (x,), lambda g: (g * y,))
    return out


def log(x) -> Tensor:
    """Natural log with the argument clamped at 1e-12.

    Below the clamp the forward is constant, so the derivative there is 0.
    """
    v = _values(x)
    safe = np.maximum(v, _LOG_CLAMP)
    out = Tensor(np.log(safe))
    _record(out, (x,), lambda g: (g * (v > _LOG_CLAMP) / safe,))
    return out


def sqrt(x) -> Tensor:
    v = _values(x)
    y = np.sqrt(v)
    out = Tensor(y)
    # subgradient 0 at the origin keeps zero-variance inputs finite
    _record(out, (x,), lambda g: (g * np.where(v > 0, 0.5 / np.where(y > 0, y, 1.0), 0.0),))
    return out


def absolute(x) -> Tensor:
    v = _values(x)
    out = Tensor(np.abs(v))
    # sign(0) = 0: the subgradient choice that keeps untrained scorers inert
    _record(out, (x,), lambda g: (g * np.sign(v),))
    return out


def relu(x) -> Tensor:
    v = _values(x)
    out = Tensor(np.maximum(v, 0.0))
    _record(out, (x,), lambda g: (g * (v > 0),))
    return out


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    v = _values(x)
    out = Tensor(np.where(v > 0, v, slope * v))
    _record(out, (x,), lambda g: (g * np.where(v > 0, 1.0, slope),))
    return out


def elu(x) -> Tensor:
    v = _values(x)
    neg = np.expm1(np.minimum(v, 0.0))
    out = Tensor(np.where(v > 0, v, neg))
    _record(out, (x,), lambda g: (g * np.where(v > 0, 1.0, neg + 1.0),))
    return out


_POINTWISE = {
    "add": add, "sub": sub, "mul": mul, "div": div,
    "sigmoid": sigmoid, "exp": exp, "log": log, "sqrt": sqrt,
    "abs": absolute, "relu": relu, "leaky_relu": leaky_relu, "elu": elu,
}


def pointwise(op_kind: str, *inputs) -> Tensor:
    """Dispatch a pointwise op by name. Unary ops take one input."""
    try:
        fn = _POINTWISE[op_kind]
    except KeyError:
        raise EngineError(f"unknown pointwise op {op_kind!r}") from None
    return fn(*inputs)


# ---------------------------------------------------------------------------
# matmul and structural ops


def matmul(a, b) -> Tensor:
    """Matrix product. Either side may be a constant; a sparse constant on
    the left is the fast path for (features @ weight)."""
    av, bv = _values(a, allow_sparse=True), _values(b, allow_sparse=True)
    if np.ndim(av) != 2 or np.ndim(bv) != 2:
        raise EngineError("matmul needs 2-D operands")
    if av.shape[1] != bv.shape[0]:
        raise EngineError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")
    y = av @ bv
    out = Tensor(np.asarray(y))

    def bwd(g):
        ga = np.asarray(g @ bv.T) if _needs_grad(a) else None
        gb = np.asarray(av.T @ g) if _needs_grad(b) else None
        return (ga, gb)

    _record(out, (a, b), bwd)
    return out


def gather_rows(x, idx: Array) -> Tensor:
    """Select rows x[idx]; backward scatter-adds into the source rows."""
    v = _values(x)
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(v[idx])

    def bwd(g):
        gx = np.zeros_like(v)
        np.add.at(gx, idx, g)
        return (gx,)

    _record(out, (x,), bwd)
    return out


def pick(x, rows: Array, cols: Array) -> Tensor:
    """Select entries x[rows[i], cols[i]] as a column vector."""
    v = _values(x)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    out = Tensor(v[rows, cols][:, None])

    def bwd(g):
        gx = np.zeros_like(v)
        np.add.at(gx, (rows, cols), g[:, 0])
        return (gx,)

    _record(out, (x,), bwd)
    return out


def hstack(parts: Sequence) -> Tensor:
    vals = [_values(p) for p in parts]
    out = Tensor(np.concatenate(vals, axis=1))
    widths = [v.shape[1] for v in vals]
    edges = np.cumsum([0] + widths)

    def bwd(g):
        return tuple(g[:, edges[i]:edges[i + 1]] for i in range(len(vals)))

    _record(out, tuple(parts), bwd)
    return out


def slice_rows(x, start: int, stop: int) -> Tensor:
    v = _values(x)
    out = Tensor(v[start:stop].copy())

    def bwd(g):
        gx = np.zeros_like(v)
        gx[start:stop] = g
        return (gx,)

    _record(out, (x,), bwd)
    return out


# ---------------------------------------------------------------------------
# reductions


def reduce_sum(x) -> Tensor:
    v = _values(x)
    out = Tensor([[v.sum()]])
    _record(out, (x,), lambda g: (np.full_like(v, g[0, 0]),))
    return out


def reduce_mean(x) -> Tensor:
    v = _values(x)
    out = Tensor([[v.mean()]])
    _record(out, (x,), lambda g: (np.full_like(v, g[0, 0] / v.size),))
    return out


def row_sum(x) -> Tensor:
    v = _values(x)
    out = Tensor(v.sum(axis=1, keepdims=True))
    _record(out, (x,), lambda g: (np.broadcast_to(g, v.shape).copy(),))
    return out


def reduce_op(op_kind: str, x) -> Tensor:
    fns = {"sum": reduce_sum, "mean": reduce_mean, "row_sum": row_sum}
    try:
        return fns[op_kind](x)
    except KeyError:
        raise EngineError(f"unknown reduction {op_kind!r}") from None


def row_softmax(x) -> Tensor:
    v = _values(x)
    z = np.exp(v - v.max(axis=1, keepdims=True))
    y = z / z.sum(axis=1, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    _record(out, (x,), bwd)
    return out


def dropout(x, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: surviving entries are scaled by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise EngineError(f"dropout rate must be in [0, 1), got {p}")
    if p == 0.0:
        out = Tensor(_values(x).copy())
        _record(out, (x,), lambda g: (g,))
        return out
    v = _values(x)
    keep = (rng.random(v.shape) >= p) / (1.0 - p)
    out = Tensor(v * keep)
    _record(out, (x,), lambda g: (g * keep,))
    return out


def cosine_similarity(u, v) -> Tensor:
    """Cosine of the angle between two column vectors, as a 1x1 tensor.

    Returns 0 when either vector has norm below 1e-12 (derivative 0 there).
    """
    uv, vv = _values(u), _values(v)
    if uv.shape != vv.shape or uv.shape[1] != 1:
        raise EngineError(f"cosine expects matching column vectors, got {uv.shape} and {vv.shape}")
    nu = float(np.sqrt((uv * uv).sum()))
    nv = float(np.sqrt((vv * vv).sum()))
    if nu < 1e-12 or nv < 1e-12:
        out = Tensor([[0.0]])
        zero = lambda g: (np.zeros_like(uv), np.zeros_like(vv))
        _record(out, (u, v), zero)
        return out
    dot = float((uv * vv).sum())
    c = dot / (nu * nv)
    out = Tensor([[c]])

    def bwd(g):
        s = g[0, 0]
        gu = s * (vv / (nu * nv) - c * uv / (nu * nu))
        gv = s * (uv / (nu * nv) - c * vv / (nv * nv))
        return (gu, gv)

    _record(out, (u, v), bwd)
    return out


# ---------------------------------------------------------------------------
# segment ops over ragged neighborhoods


@dataclass(frozen=True)
class SegmentIndex:
    """Edge list sorted by target node, with group offsets.

    Entry k is a message from `sources[k]` into `targets[k]`. Rows for a
    node's own self entry are always present, so every group is non-empty.
    `offsets` has num_nodes+1 entries; group i spans offsets[i]:offsets[i+1].
    """

    targets: Array
    sources: Array
    offsets: Array
    num_nodes: int
    self_pos: Array = field(default=None, repr=False)  # entry index of each node's self edge

    def __post_init__(self):
        t = np.asarray(self.targets, dtype=np.int64)
        s = np.asarray(self.sources, dtype=np.int64)
        off = np.asarray(self.offsets, dtype=np.int64)
        object.__setattr__(self, "targets", t)
        object.__setattr__(self, "sources", s)
        object.__setattr__(self, "offsets", off)
        if len(off) != self.num_nodes + 1 or off[0] != 0 or off[-1] != len(t):
            raise EngineError("segment offsets are inconsistent with the entry count")
        if np.any(np.diff(off) < 1):
            raise EngineError("every segment needs at least its self entry")
        if np.any(np.diff(t) < 0):
            raise EngineError("segment entries must be sorted by target")

    @property
    def num_entries(self) -> int:
        return len(self.targets)


def build_segment_index(src: Array, dst: Array, num_nodes: int) -> SegmentIndex:
    """Build the per-target grouping for message passing.

    `src`/`dst` list directed edges (messages flow src -> dst). A self
    entry is added for every node regardless of the edge list. Duplicate
    self loops in the input are dropped so the self entry stays unique.
    """
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    keep = src != dst
    src, dst = src[keep], dst[keep]
    all_src = np.concatenate([src, np.arange(num_nodes, dtype=np.int64)])
    all_dst = np.concatenate([dst, np.arange(num_nodes, dtype=np.int64)])
    order = np.lexsort((all_src, all_dst))
    all_src, all_dst = all_src[order], all_dst[order]
    counts = np.bincount(all_dst, minlength=num_nodes)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    self_pos = np.flatnonzero(all_src == all_dst)
    return SegmentIndex(targets=all_dst, sources=all_src, offsets=offsets,
                        num_nodes=num_nodes, self_pos=self_pos)


def segment_softmax(logits, index: SegmentIndex) -> Tensor:
    """Softmax within each target group of a column vector of logits."""
    v = _values(logits)
    if v.shape != (index.num_entries, 1):
        raise EngineError(f"segment_softmax expects shape ({index.num_entries}, 1), got {v.shape}")
    starts = index.offsets[:-1]
    col = v[:, 0]
    gmax = np.maximum.reduceat(col, starts)
    z = np.exp(col - gmax[index.targets])
    denom = np.add.reduceat(z, starts)
    y = z / denom[index.targets]
    out = Tensor(y[:, None])

    def bwd(g):
        g0 = g[:, 0]
        inner = np.add.reduceat(g0 * y, starts)
        return ((y * (g0 - inner[index.targets]))[:, None],)

    _record(out, (logits,), bwd)
    return out


def segment_weighted_sum(values, weights, index: SegmentIndex) -> Tensor:
    """Sum weights[k] * values[k] over each target group.

    values: (num_entries, d), weights: (num_entries, 1) -> (num_nodes, d).
    """
    vv, wv = _values(values), _values(weights)
    if vv.shape[0] != index.num_entries or wv.shape != (index.num_entries, 1):
        raise EngineError("segment_weighted_sum operands do not match the index")
    starts = index.offsets[:-1]
    out = Tensor(np.add.reduceat(vv * wv, starts, axis=0))

    def bwd(g):
        ge = g[index.targets]
        gv = ge * wv if _needs_grad(values) else None
        gw = (ge * vv).sum(axis=1, keepdims=True) if _needs_grad(weights) else None
        return (gv, gw)

    _record(out, (values, weights), bwd)
    return out


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    passed: bool
    tol: float
    step: float
    worst: float
    per_param: dict[str, float]

    def lines(self) -> list[str]:
        out = []
        for name, err in sorted(self.per_param.items()):
            mark = "ok" if err <= self.tol else "FAIL"
            out.append(f"{mark:4s} {name:24s} max_rel_err={err:.3e}")
        out.append(f"{'PASS' if self.passed else 'FAIL'} worst={self.worst:.3e} tol={self.tol:.1e}")
        return out


def grad_check(build_fn: Callable[[], Tensor], params: dict[str, Tensor],
               step: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare tape gradients against central finite differences.

    `build_fn` must rebuild the scalar loss from the live `params` values
    and be deterministic; a repeated forward pass that is not bit-identical
    raises EngineError before any comparison happens. Relative error uses
    max(|analytic|, |numeric|, 0.01) as denominator so near-zero entries
    are judged on an absolute scale.
    """
    first = build_fn().values.copy()
    second = build_fn().values
    if not np.array_equal(first, second):
        raise EngineError("build_fn is nondeterministic: two forward passes disagree "
                          "bit for bit; fix the model (e.g. seed or disable dropout) "
                          "before checking gradients")

    with GradTape():
        loss = build_fn()
        grads = backward(loss)

    per_param: dict[str, float] = {}
    for name, p in params.items():
        analytic = grads.get(p)
        if analytic is None:
            analytic = np.zeros_like(p.values)
        numeric = np.empty_like(p.values)
        flat = p.values.ravel()
        num_flat = numeric.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = build_fn().values[0, 0]
            flat[i] = orig - step
            down = build_fn().values[0, 0]
            flat[i] = orig
            num_flat[i] = (up - down) / (2.0 * step)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), _REL_FLOOR)
        per_param[name] = float((np.abs(analytic - numeric) / denom).max()) if flat.size else 0.0

    worst = max(per_param.values(), default=0.0)
    return GradCheckReport(passed=worst <= tol, tol=tol, step=step,
                           worst=worst, per_param=per_param)
