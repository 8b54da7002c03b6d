"""Feasibility solvers over the bipartitioned graph and the training loop.

Three iteration schemes move the edge state toward the intersection of all
node constraint sets:

* AP   z <- P_A(P_B(z))
* DR   z <- (z + R_A(R_B(z))) / 2 with R_C = 2 P_C - id; the *shadow*
       sequence P_B(z_k) is the convergent object and is what parameters
       are read from
* CP   one projection per schedule group, ordered by backward BFS from the
       target nodes

P_B / P_A apply every node projection of one partition; those touch disjoint
edges, so order never matters and the work can be spread across threads.
The in-place driver fuses the reflection and averaging arithmetic into the
node write-back to keep the number of passes over the big replicated-weight
arrays minimal; dot nodes additionally route through the compiled kernels.

Training follows the per-batch recipe: rebuild the graph on the batch,
initialize edges from a forward pass, run K solver steps (each counted as
one training step), then read parameters back off the edges.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import _kernels, projops
from .graph import (
    ConstantSpec,
    EdgeState,
    Graph,
    ParamTree,
    ParameterSpec,
    PrimitiveSpec,
    bipartition,
    extract_params,
    init_state,
    trace,
)
from .projops import Dot, ScalarSolveConfig, Tensor

# Bundles smaller than this stay on the generic numpy path; kernel dispatch
# overhead wins only for the large replicated operands.
_KERNEL_MIN_SIZE = 1 << 15


class Method(Enum):
    AP = "ap"
    DR = "dr"
    CP = "cp"


@dataclass
class SolverConfig:
    method: Method = Method.DR
    steps_per_batch: int = 50
    lam: float = 5.0
    margin: float = 1.0
    batch_size: int = 256
    seed: int = 0
    max_steps: int | None = None
    consensus_weighted: bool = False
    reflect_target_partition_first: bool = True
    scalar: ScalarSolveConfig = field(default_factory=ScalarSolveConfig)
    workers: int = 1
    fast_kernels: bool = True
    log_every: int | None = None  # defaults to steps_per_batch

    def __post_init__(self):
        if self.steps_per_batch < 1:
            raise ValueError("steps_per_batch must be >= 1")
        if self.lam <= 0:
            raise ValueError("lam must be positive")


@dataclass
class StepRecord:
    step: int
    split: str  # "train" (log interval) or "val" (validation check)
    loss: float
    accuracy: float
    residual: float
    elapsed_ms: float


@dataclass
class TrainReport:
    records: list[StepRecord]
    params: ParamTree
    steps: int
    stopped_early: bool = False
    best_val_accuracy: float | None = None


class DivergedError(RuntimeError):
    """The edge state left the finite range; training cannot continue."""


# ---------------------------------------------------------------------------
# Node application with fused write modes
# ---------------------------------------------------------------------------


class _Applier:
    """Applies node projections from ``src`` into ``dst`` under a write mode.

    assign   dst[e] = P(src)[e]
    reflect  dst[e] = 2 P(src)[e] - src[e]
    combine  dst[e] = dst[e]/2 + P(src)[e] - src[e]/2

    ``src`` is never mutated unless it is the same state object as ``dst``
    (plain in-place projection).
    """

    def __init__(self, g: Graph, src: EdgeState, dst: EdgeState, mode: str,
                 cfg: SolverConfig):
        self.g = g
        self.src = src
        self.dst = dst
        self.mode = mode
        self.cfg = cfg
        self.in_place = dst is src

    def node(self, nid: int) -> None:
        kind = self.g.nodes[nid].kind
        if self.cfg.fast_kernels:
            if isinstance(kind, PrimitiveSpec) and isinstance(kind.kind, Dot):
                bx, by = self.g.in_bundles(nid)
                if (
                    self.src.bundle(bx.bid).size >= _KERNEL_MIN_SIZE
                    and self.src.bundle(bx.bid).flags.c_contiguous
                    and self.src.bundle(by.bid).flags.c_contiguous
                ):
                    self._dot_fast(nid, kind.kind)
                    return
            if isinstance(kind, ParameterSpec) and any(
                self.src.bundle(b.bid).size >= _KERNEL_MIN_SIZE
                for b in self.g.out_bundles(nid)
            ):
                self._parameter_fast(nid, kind)
                return
        writes = projops.node_writes(
            self.g, self.src, nid, self.cfg.scalar, self.cfg.consensus_weighted
        )
        for w in writes:
            if w[0] == "consumer":
                self._write_full(w[1], np.asarray(w[2], dtype=np.float64))
            else:
                self._write_producer(w[1], w[2], np.asarray(w[3], dtype=np.float64))

    def _parameter_fast(self, nid: int, kind: ParameterSpec) -> None:
        """Consensus with a single-pass replica mean.

        Plain means over the repeat axes instead of the first-replica-shifted
        form; the two agree to one ulp and the shifted form's exactness
        guarantee only matters for the public read-back paths.
        """
        out = self.g.out_bundles(nid)
        views = [
            _fast_pull(b, b.branch_of(nid), self.src.bundle(b.bid), kind.value)
            for b in out
        ]
        theta = views[0] if len(views) == 1 else projops.shifted_mean(
            np.stack(views, axis=0), axis=0
        )
        for b in out:
            self._write_producer(b.bid, b.branch_of(nid), theta)

    # -- write primitives ----------------------------------------------------

    def _write_full(self, bid: int, val: Tensor) -> None:
        """Full-canonical write; ``val`` is fresh and may be consumed."""
        src_arr = self.src.arrays[bid]
        if self.mode == "assign":
            self.dst.arrays[bid] = val
        elif self.mode == "reflect":
            val *= 2.0
            val -= src_arr
            self.dst.arrays[bid] = val
        else:  # combine
            self._ensure_own(bid)
            z = self.dst.arrays[bid]
            if (
                z.flags.c_contiguous
                and val.flags.c_contiguous
                and src_arr.flags.c_contiguous
                and z.size >= _KERNEL_MIN_SIZE
            ):
                _kernels.combine_flat(z.reshape(-1), val.reshape(-1), src_arr.reshape(-1))
            else:
                z *= 0.5
                z += val
                z -= 0.5 * src_arr

    def _write_producer(self, bid: int, branch_idx: int, val: Tensor) -> None:
        b = self.g.bundles[bid]
        if b.join is None:
            expanded = _expand_through(b.branch_pipe(branch_idx), val, b.shape)
            src_arr = self.src.arrays[bid]
            if self.mode == "assign":
                if self.in_place:
                    np.copyto(src_arr, expanded)
                    return
                out = self.dst.arrays[bid]
                if out is src_arr:
                    out = np.empty(b.shape, dtype=np.float64)
                np.copyto(out, expanded)
                self.dst.arrays[bid] = out
            elif self.mode == "reflect":
                out = self.dst.arrays[bid]
                if out is src_arr:
                    out = np.empty(b.shape, dtype=np.float64)
                np.subtract(2.0 * expanded, src_arr, out=out)
                self.dst.arrays[bid] = out
            else:  # combine
                self._ensure_own(bid)
                z = self.dst.arrays[bid]
                z *= 0.5
                z += expanded
                z -= 0.5 * src_arr
            return
        # Joined bundle: this producer owns one slice of the canonical array.
        part = _expand_through(b.branch_pipe(branch_idx), val, None)
        sl = b.branch_slice(branch_idx)
        self._ensure_own(bid)
        dst_view = self.dst.arrays[bid][sl]
        src_view = self.src.arrays[bid][sl]
        if self.mode == "assign":
            dst_view[...] = part
        elif self.mode == "reflect":
            dst_view[...] = 2.0 * part - src_view
        else:
            dst_view[...] = 0.5 * dst_view + part - 0.5 * src_view

    def _ensure_own(self, bid: int) -> None:
        """Give dst its own buffer before a partial or read-modify write."""
        if not self.in_place and self.dst.arrays[bid] is self.src.arrays[bid]:
            self.dst.arrays[bid] = self.src.arrays[bid].copy()

    # -- fused dot-node path ---------------------------------------------------

    def _dot_fast(self, nid: int, kind: Dot) -> None:
        g, src = self.g, self.src
        bx, by = g.in_bundles(nid)
        n = kind.n
        sx = src.arrays[bx.bid]
        sy = src.arrays[by.bid]
        m = sx.size // n
        sx2 = sx.reshape(m, n)
        sy2 = sy.reshape(m, n)

        out_bundles = g.out_bundles(nid)
        views = [b.pull_to(nid, src.bundle(b.bid)) for b in out_bundles]
        zbar = projops.shifted_mean(np.stack(views, axis=0), axis=0)
        w = float(len(out_bundles)) if self.cfg.consensus_weighted else 1.0
        z0 = np.ascontiguousarray(zbar).reshape(m)

        p, q = _kernels.dot_pq(sx2, sy2)
        lam = projops.solve_dot_lambda(p, q, z0, self.cfg.scalar, w)

        # Rare stalls (operands nearly equal up to sign): those instances are
        # redone with the reference operator after the bulk kernel write.
        resid = np.abs(projops.dot_root_function(lam, p, q, z0, w))
        stalled = resid > self.cfg.scalar.root_tolerance * np.maximum(1.0, q)
        idx = np.flatnonzero(stalled) if np.any(stalled) else None

        dx, dy = self._dot_dst_buffers(bx.bid, by.bid)
        dx2 = dx.reshape(m, n)
        dy2 = dy.reshape(m, n)
        if idx is not None and self.mode == "combine":
            saved = (dx2[idx].copy(), dy2[idx].copy())
        if self.mode == "assign":
            _kernels.dot_write_assign(dx2, dy2, sx2, sy2, lam)
        elif self.mode == "reflect":
            _kernels.dot_write_reflect(dx2, dy2, sx2, sy2, lam)
        else:
            _kernels.dot_write_combine(dx2, dy2, sx2, sy2, lam)

        z_new = z0 - lam / w
        if idx is not None:
            vx, vy, vz = projops.proj_dot(
                sx2[idx], sy2[idx], z0[idx], self.cfg.scalar, w
            )
            if self.mode == "assign":
                dx2[idx], dy2[idx] = vx, vy
            elif self.mode == "reflect":
                dx2[idx] = 2.0 * vx - sx2[idx]
                dy2[idx] = 2.0 * vy - sy2[idx]
            else:
                dx2[idx] = 0.5 * saved[0] + vx - 0.5 * sx2[idx]
                dy2[idx] = 0.5 * saved[1] + vy - 0.5 * sy2[idx]
            z_new = np.array(z_new, copy=True)
            z_new[idx] = vz

        z_new = z_new.reshape(zbar.shape)
        for b in out_bundles:
            self._write_producer(b.bid, b.branch_of(nid), z_new)

    def _dot_dst_buffers(self, bidx: int, bidy: int) -> tuple[Tensor, Tensor]:
        out = []
        for bid in (bidx, bidy):
            src_arr = self.src.arrays[bid]
            if self.mode == "combine":
                self._ensure_own(bid)
                out.append(self.dst.arrays[bid])
            else:
                d = self.dst.arrays[bid]
                if d is src_arr and not self.in_place:
                    d = np.empty(src_arr.shape, dtype=np.float64)
                    self.dst.arrays[bid] = d
                out.append(d)
        return out[0], out[1]


def _expand_through(pipe, val: Tensor, target_shape) -> Tensor:
    """Forward a producer value through its pipeline, keeping repeat axes as
    broadcastable length-1 axes when the repeats form a suffix of the pipe."""
    from . import transforms as tf

    i = 0
    while i < len(pipe) and not isinstance(pipe[i], tf.Repeat):
        val = pipe[i].forward(val)
        i += 1
    if all(isinstance(t, tf.Repeat) for t in pipe[i:]):
        for t in pipe[i:]:
            val = np.expand_dims(val, t.axis)
        return val
    for t in pipe[i:]:
        val = t.forward(val)
    return val


def _fast_pull(b, branch_idx: int, canonical: Tensor, ref: Tensor | None) -> Tensor:
    """Producer-side view of a bundle, replica means taken in a single pass."""
    from . import transforms as tf

    arr = canonical
    if b.join is not None:
        arr = np.ascontiguousarray(arr[b.branch_slice(branch_idx)])
    pipe = b.branch_pipe(branch_idx)
    needs_base = any(isinstance(t, tf.Index) for t in pipe)
    bases = b._bases_for(pipe, ref) if needs_base else [None] * len(pipe)
    for i in range(len(pipe) - 1, -1, -1):
        t = pipe[i]
        if isinstance(t, tf.Repeat):
            arr = arr.mean(axis=t.axis)
        else:
            arr = t.inverse(arr, base=bases[i])
    return arr


# ---------------------------------------------------------------------------
# Partition projections and solver steps
# ---------------------------------------------------------------------------


def _apply_nodes(g: Graph, nodes: list[int], src: EdgeState, dst: EdgeState,
                 mode: str, cfg: SolverConfig) -> None:
    applier = _Applier(g, src, dst, mode, cfg)
    if cfg.workers > 1 and len(nodes) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            list(pool.map(applier.node, nodes))
    else:
        for nid in nodes:
            applier.node(nid)


def _inner_label(cfg: SolverConfig) -> str:
    return "B" if cfg.reflect_target_partition_first else "A"


def _outer_label(cfg: SolverConfig) -> str:
    return "A" if cfg.reflect_target_partition_first else "B"


def project_partition(g: Graph, z: EdgeState, part: str,
                      cfg: SolverConfig | None = None) -> EdgeState:
    """Project onto the intersection of one partition's node constraints.

    The touched edge sets are pairwise disjoint, so the result is independent
    of application order and nodes may be processed concurrently.
    """
    cfg = cfg or SolverConfig()
    dst = EdgeState(g, list(z.arrays))
    _apply_nodes(g, g.partition_nodes(part), z, dst, "assign", cfg)
    return dst


def ap_step(g: Graph, z: EdgeState, cfg: SolverConfig | None = None) -> EdgeState:
    """One alternating-projections step: P_outer(P_inner(z))."""
    cfg = cfg or SolverConfig()
    z1 = project_partition(g, z, _inner_label(cfg), cfg)
    return project_partition(g, z1, _outer_label(cfg), cfg)


def dr_step(g: Graph, z: EdgeState,
            cfg: SolverConfig | None = None) -> tuple[EdgeState, EdgeState]:
    """One Douglas-Rachford step; returns (next state, shadow iterate).

    The shadow iterate P_inner(z) is the sequence that approaches the
    constraint intersection and is what parameter extraction should read.
    """
    from dataclasses import replace

    cfg = replace(cfg or SolverConfig(), method=Method.DR)
    shadow = project_partition(g, z, _inner_label(cfg), cfg)
    out = z.copy()
    StepDriver(g, cfg).step(out)
    return out, shadow


def cp_schedule(g: Graph) -> list[list[int]]:
    """Group constraint nodes by backward BFS depth from the target nodes.

    Nodes at equal depth never share edges in a bipartite graph; if a graph
    ever violates that, the offending group is split greedily so every group
    projects over disjoint edges.
    """
    adj = g.constraint_adjacency()
    targets = g.target_nodes()
    starts = targets if targets else [min(adj)] if adj else []
    depth: dict[int, int] = {t: 0 for t in starts}
    frontier = list(starts)
    while frontier:
        nxt = []
        for u in frontier:
            for v in sorted(adj[u]):
                if v not in depth:
                    depth[v] = depth[u] + 1
                    nxt.append(v)
        frontier = nxt
    for nid in adj:
        if nid not in depth:  # disconnected from every target
            depth[nid] = max(depth.values(), default=0) + 1
    groups: dict[int, list[int]] = {}
    for nid, d in depth.items():
        groups.setdefault(d, []).append(nid)
    schedule = []
    for d in sorted(groups):
        for sub in _split_independent(groups[d], adj):
            schedule.append(sub)
    return schedule


def _split_independent(nodes: list[int], adj: dict[int, set[int]]) -> list[list[int]]:
    subs: list[list[int]] = []
    for nid in sorted(nodes):
        for sub in subs:
            if not any(other in adj[nid] for other in sub):
                sub.append(nid)
                break
        else:
            subs.append([nid])
    return subs


def validate_schedule(g: Graph, schedule: list[list[int]]) -> None:
    adj = g.constraint_adjacency()
    for group in schedule:
        for i, u in enumerate(group):
            for v in group[i + 1 :]:
                if v in adj[u]:
                    raise ValueError(
                        f"schedule group contains adjacent nodes {u} and {v}"
                    )


def cp_step(g: Graph, z: EdgeState, schedule: list[list[int]],
            cfg: SolverConfig | None = None) -> EdgeState:
    """One cyclic pass: project each schedule group in order."""
    cfg = cfg or SolverConfig()
    validate_schedule(g, schedule)
    out = z.copy()
    for group in schedule:
        _apply_nodes(g, group, out, out, "assign", cfg)
    return out


def feasibility_residual(g: Graph, z: EdgeState,
                         cfg: SolverConfig | None = None) -> float:
    """Sum over constraint nodes of the squared distance to their sets."""
    cfg = cfg or SolverConfig()
    total = 0.0
    for nid in g.constraint_nodes():
        delta = projops.project_node(
            g, z, nid, cfg.scalar, cfg.consensus_weighted
        )
        for bid, new in delta.items():
            diff = new - z.bundle(bid)
            total += float(np.vdot(diff, diff))
    return total


# ---------------------------------------------------------------------------
# In-place step driver (hot path)
# ---------------------------------------------------------------------------


class StepDriver:
    """Runs solver steps in place, reusing one reflection buffer for DR."""

    def __init__(self, g: Graph, cfg: SolverConfig):
        self.g = g
        self.cfg = cfg
        self.method = cfg.method
        if self.method is Method.CP:
            self.schedule = cp_schedule(g)
        else:
            self.inner = g.partition_nodes(_inner_label(cfg))
            self.outer = g.partition_nodes(_outer_label(cfg))
            # Bundles no node of a partition writes (a node with no outgoing
            # edges constrains nothing) still need the step arithmetic with
            # the projection acting as the identity there.
            self.idle_inner = self._uncovered(self.inner)
            self.idle_outer = self._uncovered(self.outer)
        self._wbuf: EdgeState | None = None

    def _uncovered(self, nodes: list[int]) -> list[int]:
        covered: set[int] = set()
        for nid in nodes:
            kind = self.g.nodes[nid].kind
            out = self.g.out_bundles(nid)
            if isinstance(kind, (ConstantSpec, ParameterSpec)):
                covered.update(b.bid for b in out)
            elif isinstance(kind, PrimitiveSpec):
                if out:
                    covered.update(b.bid for b in out)
                    covered.update(b.bid for b in self.g.in_bundles(nid))
            else:  # target
                covered.update(b.bid for b in self.g.in_bundles(nid))
        return [b.bid for b in self.g.bundles if b.bid not in covered]

    def step(self, z: EdgeState) -> None:
        cfg = self.cfg
        if self.method is Method.AP:
            _apply_nodes(self.g, self.inner, z, z, "assign", cfg)
            _apply_nodes(self.g, self.outer, z, z, "assign", cfg)
        elif self.method is Method.DR:
            if self._wbuf is None:
                self._wbuf = EdgeState(
                    self.g, [np.empty_like(a) for a in z.arrays]
                )
            w = self._wbuf
            # w = 2 P_inner(z) - z, then z = z/2 + P_outer(w) - w/2.
            _apply_nodes(self.g, self.inner, z, w, "reflect", cfg)
            for bid in self.idle_inner:  # reflection of a no-op projection
                np.copyto(w.arrays[bid], z.arrays[bid])
            _apply_nodes(self.g, self.outer, w, z, "combine", cfg)
            for bid in self.idle_outer:
                za = z.arrays[bid]
                za += w.arrays[bid]
                za *= 0.5
        else:
            for group in self.schedule:
                _apply_nodes(self.g, group, z, z, "assign", cfg)

    def extraction_state(self, z: EdgeState) -> EdgeState:
        """State parameters should be read from (the DR shadow, else z)."""
        if self.method is Method.DR:
            return project_partition(self.g, z, _inner_label(self.cfg), self.cfg)
        return z


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def train(
    model,
    data,
    cfg: SolverConfig,
    init_params: ParamTree,
    val_data=None,
    val_every: int = 1000,
    patience: int | None = None,
    time_budget_s: float | None = None,
    stop_at_val_accuracy: float | None = None,
) -> TrainReport:
    """Mini-batch training by iterative projection.

    Per batch: trace the computation graph at the current parameters,
    bipartition it (AP/DR), initialize the edge state from a forward pass,
    run ``steps_per_batch`` solver steps, then carry the extracted parameters
    to the next batch.  Every solver step counts as one training step.

    When ``val_data`` is given, validation accuracy is checked every
    ``val_every`` steps; training stops after ``patience`` checks without
    improvement (or once ``stop_at_val_accuracy`` is reached) and the best
    parameters seen are returned.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in init_params.items()}
    records: list[StepRecord] = []
    rng = np.random.default_rng(cfg.seed)
    n = data.sample_count
    batch = min(cfg.batch_size, n)
    if cfg.max_steps is not None:
        max_steps = cfg.max_steps
    else:  # one epoch by default
        max_steps = cfg.steps_per_batch * ((n + batch - 1) // batch)
    log_every = cfg.log_every or cfg.steps_per_batch

    best_val = -np.inf
    best_params = params
    checks_since_best = 0
    stopped_early = False
    step = 0
    t0 = time.perf_counter()

    def elapsed_ms() -> float:
        return (time.perf_counter() - t0) * 1e3

    def out_of_time() -> bool:
        return time_budget_s is not None and time.perf_counter() - t0 > time_budget_s

    while step < max_steps and not stopped_early and not out_of_time():
        order = rng.permutation(n)
        for start in range(0, n, batch):
            if step >= max_steps or stopped_early or out_of_time():
                break
            idx = order[start : start + batch]
            bx, by = data.batch(idx)
            g = trace(model, params, bx, by)
            if cfg.method is not Method.CP:
                g = bipartition(g)
            z = init_state(g, params)
            driver = StepDriver(g, cfg)

            for _ in range(cfg.steps_per_batch):
                driver.step(z)
                step += 1
                need_val = val_data is not None and step % val_every == 0
                need_log = step % log_every == 0 or step == max_steps
                if need_val or need_log:
                    zx = driver.extraction_state(z)
                    cur = extract_params(g, zx)
                    if not all(np.isfinite(v).all() for v in cur.values()):
                        raise DivergedError(f"non-finite parameters at step {step}")
                    residual = feasibility_residual(g, zx, cfg)
                    if need_log:
                        records.append(
                            StepRecord(
                                step,
                                "train",
                                float(model.batch_loss(cur, bx, by)),
                                float(model.accuracy(cur, bx, by)),
                                residual,
                                elapsed_ms(),
                            )
                        )
                    if need_val:
                        vx, vy = val_data.x, val_data.y
                        acc = float(model.accuracy(cur, vx, vy))
                        records.append(
                            StepRecord(
                                step,
                                "val",
                                float(model.batch_loss(cur, vx, vy)),
                                acc,
                                residual,
                                elapsed_ms(),
                            )
                        )
                        if acc > best_val:
                            best_val = acc
                            best_params = {k: v.copy() for k, v in cur.items()}
                            checks_since_best = 0
                        else:
                            checks_since_best += 1
                            if patience is not None and checks_since_best >= patience:
                                stopped_early = True
                        if (
                            stop_at_val_accuracy is not None
                            and acc >= stop_at_val_accuracy
                        ):
                            stopped_early = True
                    if stopped_early:
                        break
                if step >= max_steps:
                    break

            zx = driver.extraction_state(z)
            params = extract_params(g, zx)
            if not all(np.isfinite(v).all() for v in params.values()):
                raise DivergedError(f"non-finite parameters at step {step}")

    final = best_params if (val_data is not None and best_val > -np.inf) else params
    return TrainReport(
        records=records,
        params=final,
        steps=step,
        stopped_early=stopped_early,
        best_val_accuracy=None if val_data is None else float(best_val),
    )
