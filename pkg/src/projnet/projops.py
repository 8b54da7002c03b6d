"""Orthogonal projections onto the graphs of scalar primitive functions.

Every operator here answers the same question: given a point that pairs
candidate inputs with a candidate output, what is the nearest point whose
output actually equals the function applied to the inputs?  These projections
are the elementary moves of the feasibility solver: a network is trained by
repeatedly snapping edge values onto these sets.

All operators are vectorized.  An "instance" is one scalar application of the
primitive; arrays carry arbitrary leading instance axes.  Conventions:

* ``proj_sum`` / ``proj_sum_relu`` take the summands stacked on axis 0
  (``x0[i]`` is the i-th summand, an array of instance shape).
* ``proj_dot`` / ``proj_max`` reduce along the *last* axis of their operands.
* ``out_weight`` scales the squared-distance penalty on the output
  coordinate.  ``1.0`` is the plain orthogonal projection; the consensus
  wrapper passes the fan-out count when the weighted variant is enabled.

Everything is float64 and pure: no operator mutates its arguments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Tensor = np.ndarray


# ---------------------------------------------------------------------------
# Primitive / target kinds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Identity:
    """f(x) = x."""

    @property
    def fanin(self) -> int:
        return 1


@dataclass(frozen=True)
class Sum:
    """f(x_1..x_n) = sum_i x_i, one incoming edge per summand."""

    n: int

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("sum arity must be >= 1")

    @property
    def fanin(self) -> int:
        return self.n


@dataclass(frozen=True)
class SumReLU:
    """f(x_1..x_n) = max(0, sum_i x_i), one incoming edge per summand."""

    n: int

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("sum_relu arity must be >= 1")

    @property
    def fanin(self) -> int:
        return self.n


@dataclass(frozen=True)
class Dot:
    """f(x, y) = <x, y> over the last axis; two incoming edges of width n."""

    n: int

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("dot width must be >= 1")

    @property
    def fanin(self) -> int:
        return 2


@dataclass(frozen=True)
class Max:
    """f(x) = max_i x_i over the last axis; one incoming edge of width n."""

    n: int

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("max width must be >= 1")

    @property
    def fanin(self) -> int:
        return 1


@dataclass(frozen=True)
class Quantize:
    """f(x) = nearest of k equidistant levels in [-alpha, alpha]."""

    k: int
    alpha: float

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("quantize needs at least 2 levels")
        if self.alpha <= 0:
            raise ValueError("quantize range bound must be positive")

    @property
    def fanin(self) -> int:
        return 1

    def levels(self) -> Tensor:
        return -self.alpha + np.arange(self.k) * (2.0 * self.alpha / (self.k - 1))


PrimKind = Identity | Sum | SumReLU | Dot | Max | Quantize


@dataclass(frozen=True)
class Margin:
    """Per-logit constraint: >= m for the labelled class, <= 0 otherwise."""

    m: float

    def __post_init__(self):
        if self.m <= 0:
            raise ValueError("margin must be positive")


@dataclass(frozen=True)
class CrossEntropyProx:
    """Proximal step on the softmax cross-entropy loss, scale lam."""

    lam: float

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("cross-entropy prox scale must be positive")


TargetKind = Margin | CrossEntropyProx


@dataclass(frozen=True)
class ScalarSolveConfig:
    """Budgets for the two iterative scalar solves.

    ``newton_iters`` bounds the damped-free Newton run for the dot-product
    root; iterates are clamped to ``(-lam_clamp, lam_clamp)`` to keep them
    away from the poles at +-1.  ``fp_iters`` bounds the damped fixed-point
    iteration of the cross-entropy prox; the default is sized so the damped
    contraction (factor (lam-1)/(lam+1) for lam > 2) reaches residuals near
    machine precision for lam <= 5.
    """

    newton_iters: int = 8
    fp_iters: int = 100
    root_tolerance: float = 1e-10
    lam_clamp: float = 1.0 - 1e-9

    def __post_init__(self):
        if self.newton_iters < 1 or self.fp_iters < 1:
            raise ValueError("iteration budgets must be >= 1")
        if not 0.0 < self.lam_clamp < 1.0:
            raise ValueError("lam_clamp must lie in (0, 1)")


DEFAULT_SOLVE = ScalarSolveConfig()


# ---------------------------------------------------------------------------
# Forward semantics (used for state initialization and residuals)
# ---------------------------------------------------------------------------


def forward_primitive(kind: PrimKind, inputs: list[Tensor]) -> Tensor:
    """Plain forward evaluation of a primitive on its incoming edge values."""
    if isinstance(kind, Identity):
        return inputs[0].copy()
    if isinstance(kind, Sum):
        out = inputs[0].copy()
        for x in inputs[1:]:
            out += x
        return out
    if isinstance(kind, SumReLU):
        out = inputs[0].copy()
        for x in inputs[1:]:
            out += x
        return np.maximum(out, 0.0)
    if isinstance(kind, Dot):
        return np.einsum("...i,...i->...", inputs[0], inputs[1])
    if isinstance(kind, Max):
        return inputs[0].max(axis=-1)
    if isinstance(kind, Quantize):
        levels = kind.levels()
        mids = 0.5 * (levels[:-1] + levels[1:])
        idx = np.searchsorted(mids, inputs[0], side="left")
        return levels[idx]
    raise TypeError(f"unknown primitive kind: {kind!r}")


def softmax(x: Tensor) -> Tensor:
    """Numerically stable softmax over the last axis."""
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def shifted_mean(values: Tensor, axis: int = 0) -> Tensor:
    """Mean computed relative to the first slice along ``axis``.

    Identical slices average back to the first slice bitwise, which keeps
    consensus of already-agreeing replicas an exact no-op.
    """
    values = np.asarray(values)
    if values.shape[axis] == 1:
        return np.take(values, 0, axis=axis).copy()
    first = np.take(values, 0, axis=axis)
    return first + (values - np.expand_dims(first, axis)).mean(axis=axis)


# ---------------------------------------------------------------------------
# Projections onto primitive graphs
# ---------------------------------------------------------------------------


def proj_identity(x0: Tensor, y0: Tensor, out_weight: float = 1.0) -> tuple[Tensor, Tensor]:
    """Project onto {(x, x)}: both coordinates move to a (weighted) average."""
    x0 = np.asarray(x0, dtype=np.float64)
    y0 = np.asarray(y0, dtype=np.float64)
    if out_weight == 1.0:
        m = 0.5 * (x0 + y0)
    else:
        m = (x0 + out_weight * y0) / (1.0 + out_weight)
    return m, m.copy()


def proj_sum(x0: Tensor, y0: Tensor, out_weight: float = 1.0) -> tuple[Tensor, Tensor]:
    """Project onto the hyperplane y = sum_i x_i (summands on axis 0)."""
    x0 = np.asarray(x0, dtype=np.float64)
    y0 = np.asarray(y0, dtype=np.float64)
    n = x0.shape[0]
    t = (y0 - x0.sum(axis=0)) / (n + 1.0 / out_weight)
    return x0 + t, y0 - t / out_weight


def proj_sum_relu(x0: Tensor, y0: Tensor, out_weight: float = 1.0) -> tuple[Tensor, Tensor]:
    """Project onto the graph of max(0, sum_i x_i).

    The graph is the union of the flat piece {sum <= 0, y = 0} and the sloped
    piece {sum >= 0, y = sum}; both candidate projections are formed and the
    closer one wins, with ties resolved toward the sloped piece.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    y0 = np.asarray(y0, dtype=np.float64)
    n = x0.shape[0]
    s0 = x0.sum(axis=0)

    # Flat piece: clamp the summand mean down to zero when it is positive.
    shift = np.maximum(s0 / n, 0.0)
    d1 = n * shift**2 + out_weight * y0**2

    # Sloped piece: hyperplane projection, falling back to the boundary
    # (sum = 0, y = 0) when the hyperplane point has a negative sum.
    t = (y0 - s0) / (n + 1.0 / out_weight)
    s_hat = s0 + n * t
    on_plane = s_hat >= 0.0
    d2_plane = (n + 1.0 / out_weight) * t**2
    d2_boundary = s0**2 / n + out_weight * y0**2
    d2 = np.where(on_plane, d2_plane, d2_boundary)

    take_sloped = d2 <= d1
    x_flat = x0 - shift
    x_boundary = x0 - s0 / n
    x_sloped = np.where(on_plane, x0 + t, x_boundary)
    y_sloped = np.where(on_plane, y0 - t / out_weight, 0.0)

    x = np.where(take_sloped, x_sloped, x_flat)
    y = np.where(take_sloped, y_sloped, 0.0)
    return x, y


def dot_root_function(
    lam: Tensor, p: Tensor, q: Tensor, z0: Tensor, out_weight: float = 1.0
) -> Tensor:
    """<x(lam), y(lam)> - z(lam): the scalar residual of the dot projection."""
    one_m = 1.0 - lam * lam
    return ((1.0 + lam * lam) * p + lam * q) / one_m**2 - z0 + lam / out_weight


_SAFEGUARD_ITERS = 72  # enough bisection halvings to pin a root near the poles


def solve_dot_lambda(
    p: Tensor,
    q: Tensor,
    z0: Tensor,
    cfg: ScalarSolveConfig = DEFAULT_SOLVE,
    out_weight: float = 1.0,
) -> Tensor:
    """Safeguarded Newton iteration for the dot-product rescaling parameter.

    Newton from 0 converges in a handful of steps on well-behaved inputs, but
    a first step can overshoot past a pole at +-1 and clamping alone then
    pins the iterate there (a vanished input vector with a far-away output
    estimate does it).  The residual changes sign across the root, so a
    bracket is maintained and any Newton step that leaves it falls back to
    bisection.  The loop exits once every instance meets the tolerance; the
    extra safeguard iterations beyond ``cfg.newton_iters`` only run while
    some instance is still unresolved.
    """
    shape = np.broadcast(p, q, z0).shape
    lam = np.zeros(shape, dtype=np.float64)
    lo = np.full(shape, -cfg.lam_clamp)
    hi = np.full(shape, cfg.lam_clamp)
    tol = cfg.root_tolerance * np.maximum(1.0, q)
    iw = 1.0 / out_weight
    for _ in range(cfg.newton_iters + _SAFEGUARD_ITERS):
        one_m = 1.0 - lam * lam
        num = (1.0 + lam * lam) * p + lam * q
        f = num / one_m**2 - z0 + lam * iw
        if np.all(np.abs(f) <= tol):
            break
        neg = f < 0.0
        lo = np.where(neg, np.maximum(lo, lam), lo)
        hi = np.where(~neg, np.minimum(hi, lam), hi)
        fp = (2.0 * lam * p + q) / one_m**2 + 4.0 * lam * num / one_m**3 + iw
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = lam - f / fp
        mid = 0.5 * (lo + hi)
        out_of_bracket = ~np.isfinite(newton) | (newton <= lo) | (newton >= hi)
        lam = np.where(out_of_bracket, mid, newton)
    return lam


def dot_rescale(
    x0: Tensor, y0: Tensor, z0: Tensor, lam: Tensor, out_weight: float = 1.0
) -> tuple[Tensor, Tensor, Tensor]:
    """Map the solved lambda back to the projected (x, y, z) triple."""
    lam_e = lam[..., None]
    one_m = 1.0 - lam_e * lam_e
    x = (x0 + lam_e * y0) / one_m
    y = (y0 + lam_e * x0) / one_m
    return x, y, z0 - lam / out_weight


def proj_dot(
    x0: Tensor,
    y0: Tensor,
    z0: Tensor,
    cfg: ScalarSolveConfig = DEFAULT_SOLVE,
    out_weight: float = 1.0,
) -> tuple[Tensor, Tensor, Tensor]:
    """Project onto the graph of the dot product z = <x, y> (last axis).

    The stationarity conditions collapse to a scalar root problem per
    instance, solved by Newton from 0.  Inputs with x0 = +-y0 sit outside the
    uniqueness regime; if the root solve stalls there, x0 is perturbed by
    1e-8 on its first coordinate and the solve is retried once, which keeps
    the operator total and deterministic.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    y0 = np.asarray(y0, dtype=np.float64)
    z0 = np.asarray(z0, dtype=np.float64)
    p = np.einsum("...i,...i->...", x0, y0)
    q = np.einsum("...i,...i->...", x0, x0) + np.einsum("...i,...i->...", y0, y0)
    lam = solve_dot_lambda(p, q, z0, cfg, out_weight)

    resid = np.abs(dot_root_function(lam, p, q, z0, out_weight))
    stalled = resid > cfg.root_tolerance * np.maximum(1.0, q)
    if np.any(stalled):
        x0 = np.array(x0, copy=True)
        bumped = x0[stalled]
        bumped[..., 0] += 1e-8
        x0[stalled] = bumped
        p2 = np.einsum("...i,...i->...", x0[stalled], y0[stalled])
        q2 = (
            np.einsum("...i,...i->...", x0[stalled], x0[stalled])
            + np.einsum("...i,...i->...", y0[stalled], y0[stalled])
        )
        lam = np.array(lam, copy=True)
        lam[stalled] = solve_dot_lambda(
            p2, q2, np.asarray(z0)[stalled], cfg, out_weight
        )

    return dot_rescale(x0, y0, z0, lam, out_weight)


def proj_max(x0: Tensor, y0: Tensor, out_weight: float = 1.0) -> tuple[Tensor, Tensor]:
    """Project onto the graph of y = max_i x_i (last axis).

    Candidates are indexed by how many of the sorted coordinates rise to meet
    the output value; invalid candidates are masked out and the closest valid
    one wins, ties toward fewer raised coordinates.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    y0 = np.asarray(y0, dtype=np.float64)
    n = x0.shape[-1]
    order = np.argsort(x0, axis=-1, kind="stable")
    xs = np.take_along_axis(x0, order, axis=-1)

    # suffix[k] = sum of xs[k:], suffix_sq likewise for squares.
    suffix = np.flip(np.flip(xs, -1).cumsum(axis=-1), -1)
    suffix_sq = np.flip(np.flip(xs**2, -1).cumsum(axis=-1), -1)
    m = np.arange(n, 0, -1, dtype=np.float64)  # number of raised coordinates

    y0_e = y0[..., None]
    y_cand = (suffix + out_weight * y0_e) / (m + out_weight)
    dist = (
        suffix_sq
        - 2.0 * y_cand * suffix
        + m * y_cand**2
        + out_weight * (y0_e - y_cand) ** 2
    )

    valid = np.ones(dist.shape, dtype=bool)
    valid[..., 1:] = xs[..., :-1] <= y_cand[..., 1:]
    dist = np.where(valid, dist, np.inf)

    kstar = np.argmin(dist, axis=-1)
    ystar = np.take_along_axis(y_cand, kstar[..., None], axis=-1)

    idx = np.arange(n)
    raised = idx >= kstar[..., None]
    x_sorted = np.where(raised, ystar, xs)
    x = np.empty_like(x0)
    np.put_along_axis(x, order, x_sorted, axis=-1)
    return x, ystar[..., 0]


def proj_quantize(
    x0: Tensor, y0: Tensor, kind: Quantize, out_weight: float = 1.0
) -> tuple[Tensor, Tensor]:
    """Project onto the staircase graph of the quantizer.

    One candidate per level: clamp x0 into the level's preimage interval and
    pair it with the level value.  The nearest candidate wins; ties go to the
    lower level index.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    y0 = np.asarray(y0, dtype=np.float64)
    levels = kind.levels()
    mids = 0.5 * (levels[:-1] + levels[1:])
    lo = np.concatenate(([-np.inf], mids))
    hi = np.concatenate((mids, [np.inf]))

    xg = x0[..., None]
    xc = np.clip(xg, lo, hi)
    dist = (xc - xg) ** 2 + out_weight * (levels - y0[..., None]) ** 2
    istar = np.argmin(dist, axis=-1)

    x = np.take_along_axis(xc, istar[..., None], axis=-1)[..., 0]
    return x, levels[istar]


def proj_margin(x0: Tensor, positive: Tensor, m: float) -> Tensor:
    """Clamp logits into the margin set: >= m where positive, <= 0 elsewhere."""
    x0 = np.asarray(x0, dtype=np.float64)
    return np.where(positive, np.maximum(x0, m), np.minimum(x0, 0.0))


def prox_cross_entropy(
    x0: Tensor,
    y_onehot: Tensor,
    lam: float,
    cfg: ScalarSolveConfig = DEFAULT_SOLVE,
) -> Tensor:
    """Damped fixed-point solve of x = x0 + lam * (y - softmax(x)).

    The undamped update oscillates once lam exceeds ~4 (the softmax Jacobian
    has spectral norm up to 1/2), so the step is damped by
    beta = min(1, 2 / (1 + lam)), which restores a contraction without moving
    the fixed point.  Non-convergence shows up as a residual, never an
    exception; use :func:`cross_entropy_prox_residual` to inspect it.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    y_onehot = np.asarray(y_onehot, dtype=np.float64)
    beta = min(1.0, 2.0 / (1.0 + lam))
    x = x0.copy()
    for _ in range(cfg.fp_iters):
        target = x0 + lam * (y_onehot - softmax(x))
        x += beta * (target - x)
    return x


def cross_entropy_prox_residual(
    x: Tensor, x0: Tensor, y_onehot: Tensor, lam: float
) -> Tensor:
    """Per-instance norm of the fixed-point defect of the prox solution."""
    defect = x - x0 - lam * (y_onehot - softmax(x))
    return np.linalg.norm(defect, axis=-1)


def cross_entropy_loss(logits: Tensor, y_onehot: Tensor) -> Tensor:
    """Softmax cross-entropy per instance (last axis holds the classes)."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1)) + logits.max(axis=-1)
    return lse - (logits * y_onehot).sum(axis=-1)


# ---------------------------------------------------------------------------
# Consensus wrapper and node-level projection
# ---------------------------------------------------------------------------


def proj_consensus(
    base_projection,
    x0,
    y_outs: list[Tensor],
    weighted: bool = False,
):
    """Project when one function output fans out to several edges.

    The fan-out copies are averaged to a single output estimate, the base
    projection runs on (inputs, average), and the projected output is
    replicated to every outgoing slot.  ``weighted`` switches the base call
    to the variant that penalizes the output coordinate by the fan-out count,
    which is the exact projection; the plain call is the default.
    """
    n = len(y_outs)
    ybar = shifted_mean(np.stack(y_outs, axis=0), axis=0)
    w = float(n) if weighted else 1.0
    out = base_projection(x0, ybar, out_weight=w)
    *x_new, y_new = out if isinstance(out, tuple) else (out,)
    return (*x_new, [y_new.copy() for _ in range(n)])


def primitive_projection(
    kind: PrimKind,
    inputs: list[Tensor],
    ybar: Tensor,
    cfg: ScalarSolveConfig = DEFAULT_SOLVE,
    out_weight: float = 1.0,
) -> tuple[list[Tensor], Tensor]:
    """Dispatch the graph projection for one primitive node.

    ``inputs`` are the incoming edge values (one array per edge), ``ybar``
    the consensus output estimate.  Returns updated inputs and output.
    """
    if isinstance(kind, Identity):
        x, y = proj_identity(inputs[0], ybar, out_weight)
        return [x], y
    if isinstance(kind, Sum):
        stacked = np.stack(inputs, axis=0)
        x, y = proj_sum(stacked, ybar, out_weight)
        return list(x), y
    if isinstance(kind, SumReLU):
        stacked = np.stack(inputs, axis=0)
        x, y = proj_sum_relu(stacked, ybar, out_weight)
        return list(x), y
    if isinstance(kind, Dot):
        x, y, z = proj_dot(inputs[0], inputs[1], ybar, cfg, out_weight)
        return [x, y], z
    if isinstance(kind, Max):
        x, y = proj_max(inputs[0], ybar, out_weight)
        return [x], y
    if isinstance(kind, Quantize):
        x, y = proj_quantize(inputs[0], ybar, kind, out_weight)
        return [x], y
    raise TypeError(f"unknown primitive kind: {kind!r}")


def target_projection(
    kind: TargetKind,
    logits: Tensor,
    labels_onehot: Tensor,
    cfg: ScalarSolveConfig = DEFAULT_SOLVE,
) -> Tensor:
    """Apply the output operator of a target node to its incoming logits."""
    if isinstance(kind, Margin):
        return proj_margin(logits, labels_onehot > 0.5, kind.m)
    if isinstance(kind, CrossEntropyProx):
        return prox_cross_entropy(logits, labels_onehot, kind.lam, cfg)
    raise TypeError(f"unknown target kind: {kind!r}")


def node_writes(graph, state, node_id: int, cfg: ScalarSolveConfig = DEFAULT_SOLVE,
                weighted: bool = False) -> list[tuple]:
    """Compute one node's projection as a list of pending bundle writes.

    Each write is either ``("consumer", bid, value)`` with the new canonical
    array, or ``("producer", bid, branch_idx, value)`` with the new value at
    the producing node's own layout (still to be pushed through the bundle's
    transforms).  Keeping producer writes un-pushed lets callers fuse the
    layout expansion with whatever state arithmetic they are doing.
    """
    from . import graph as graph_mod  # local import; graph depends on this module

    node = graph.nodes[node_id]
    kind = node.kind
    writes: list[tuple] = []

    if isinstance(kind, graph_mod.ConstantSpec):
        for b in graph.out_bundles(node_id):
            writes.append(("producer", b.bid, b.branch_of(node_id), kind.value))
        return writes

    if isinstance(kind, graph_mod.ParameterSpec):
        out = graph.out_bundles(node_id)
        if not out:
            return writes
        views = [b.pull_to(node_id, state.bundle(b.bid), ref=kind.value) for b in out]
        theta = shifted_mean(np.stack(views, axis=0), axis=0)
        for b in out:
            writes.append(("producer", b.bid, b.branch_of(node_id), theta))
        return writes

    if isinstance(kind, graph_mod.TargetSpec):
        (b,) = graph.in_bundles(node_id)
        logits = state.bundle(b.bid)
        writes.append(("consumer", b.bid, target_projection(kind.kind, logits, kind.labels, cfg)))
        return writes

    if isinstance(kind, graph_mod.PrimitiveSpec):
        out_bundles = graph.out_bundles(node_id)
        if not out_bundles:
            # No outgoing edges: the output-matching constraint quantifies
            # over an empty set, so the node constrains nothing.
            return writes
        in_bundles = graph.in_bundles(node_id)
        inputs = [state.bundle(b.bid) for b in in_bundles]
        views = [b.pull_to(node_id, state.bundle(b.bid)) for b in out_bundles]
        ybar = shifted_mean(np.stack(views, axis=0), axis=0)
        w = float(len(out_bundles)) if weighted else 1.0
        new_inputs, y_new = primitive_projection(kind.kind, inputs, ybar, cfg, w)
        for b, v in zip(in_bundles, new_inputs):
            writes.append(("consumer", b.bid, v))
        for b in out_bundles:
            writes.append(("producer", b.bid, b.branch_of(node_id), y_new))
        return writes

    raise TypeError(f"node {node_id} has no constraint (kind {kind!r})")


def project_node(graph, state, node_id: int, cfg: ScalarSolveConfig = DEFAULT_SOLVE,
                 weighted: bool = False) -> dict[int, Tensor]:
    """Project the edge state onto one node's constraint set.

    Returns a delta mapping bundle id -> new canonical value; only bundles
    incident to the node (through any shape transforms) appear.  Constants
    force their outgoing values, parameters enforce consensus, primitives run
    their graph projection under the consensus wrapper, and targets apply
    their output operator.
    """
    delta: dict[int, Tensor] = {}
    for w in node_writes(graph, state, node_id, cfg, weighted):
        if w[0] == "consumer":
            _, bid, value = w
            delta[bid] = np.asarray(value, dtype=np.float64)
        else:
            _, bid, branch_idx, value = w
            b = graph.bundles[bid]
            current = delta.get(bid, state.bundle(bid))
            delta[bid] = b.push_from(
                b.branches[branch_idx].producer, value, current=current
            )
    return delta
