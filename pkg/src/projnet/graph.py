"""Computation graph with edge-resident state.

The graph is a DAG of typed nodes: constants, parameters, scalar primitives
(vectorized over instance axes), shape transforms, and targets.  Training
state does not live on nodes: every *edge* carries a tensor, and solvers move
those tensors around.

Transforms impose no constraints, so for the solver the operative connection
is a **bundle**: a maximal run of transforms linking one constraint-bearing
node (or several, joined by a concat) to the next.  The canonical array of a
bundle is stored at the consumer side; values anywhere else along the chain
are recovered exactly through the transform inverses.  This keeps the hot
loop free of redundant layout copies while every fine-grained edge value
remains addressable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import projops
from .projops import PrimKind, TargetKind, Tensor, shifted_mean
from . import transforms as tf
from .transforms import Concat, Transform, TransformContractError

ParamTree = dict[str, Tensor]


class GraphBuildError(ValueError):
    """Model structure and data shapes do not fit together."""


class InitializationError(RuntimeError):
    """Forward initialization produced a non-finite value."""


# ---------------------------------------------------------------------------
# Node kinds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConstantSpec:
    value: Tensor


@dataclass(frozen=True)
class ParameterSpec:
    name: str
    value: Tensor  # snapshot taken at build time; also the base for index reads

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape


@dataclass(frozen=True)
class PrimitiveSpec:
    kind: PrimKind

    @property
    def fanin(self) -> int:
        return self.kind.fanin


@dataclass(frozen=True)
class TransformSpec:
    kind: Transform | Concat


@dataclass(frozen=True)
class TargetSpec:
    kind: TargetKind
    labels: Tensor  # one-hot, same shape as the incoming logits


NodeKind = ConstantSpec | ParameterSpec | PrimitiveSpec | TransformSpec | TargetSpec


@dataclass
class Node:
    nid: int
    kind: NodeKind
    out_shape: tuple[int, ...] | None  # None for targets


@dataclass(frozen=True)
class Edge:
    eid: int
    src: int
    dst: int
    slot: int
    shape: tuple[int, ...]


def is_constraint(kind: NodeKind) -> bool:
    return not isinstance(kind, TransformSpec)


# ---------------------------------------------------------------------------
# Bundles: transform-collapsed connections between constraint nodes
# ---------------------------------------------------------------------------


@dataclass
class Branch:
    producer: int
    pipe: list[Transform]  # applied producer -> join, in order
    edge_ids: list[int] = field(default_factory=list)


@dataclass
class Bundle:
    """A transform-collapsed connection ending at one constraint node.

    Single-branch bundles carry their whole pipeline in ``pipe``.  Bundles
    joined by a concat keep per-branch pipelines and an empty ``pipe``: the
    join must be the last stage, so each branch owns a disjoint slice of the
    canonical array and producer writes never disturb each other.
    """

    bid: int
    branches: list[Branch]
    join: Concat | None  # present iff len(branches) > 1
    pipe: list[Transform]  # empty whenever join is present
    consumer: int
    slot: int
    shape: tuple[int, ...]  # canonical = consumer-side shape
    edge_ids: list[int] = field(default_factory=list)

    def producer_ids(self) -> list[int]:
        return [b.producer for b in self.branches]

    def branch_of(self, node_id: int) -> int:
        for i, b in enumerate(self.branches):
            if b.producer == node_id:
                return i
        raise KeyError(f"node {node_id} is not a producer of bundle {self.bid}")

    def branch_slice(self, i: int) -> tuple[slice, ...]:
        """Canonical-array slice owned by branch ``i`` (join bundles only)."""
        offset = sum(self.join.sizes[:i])
        ax = self.join.axis
        index = [slice(None)] * len(self.shape)
        index[ax] = slice(offset, offset + self.join.sizes[i])
        return tuple(index)

    def branch_pipe(self, i: int) -> list[Transform]:
        if self.join is None:
            return self.branches[i].pipe + self.pipe
        return self.branches[i].pipe

    def _bases_for(self, pipe: list[Transform], ref: Tensor | None) -> list[Tensor | None]:
        """Input-side reference values per transform, for index inverses."""
        if not any(isinstance(t, tf.Index) for t in pipe):
            return [None] * len(pipe)
        if ref is None:
            raise TransformContractError(
                "index transform without a constant/parameter producer cannot be read through"
            )
        bases: list[Tensor | None] = []
        val = ref
        for t in pipe:
            bases.append(val if isinstance(t, tf.Index) else None)
            val = t.forward(val)
        return bases

    def pull_to(self, node_id: int, canonical: Tensor, ref: Tensor | None = None) -> Tensor:
        """Value of this bundle as seen at ``node_id``'s side of the chain."""
        if node_id == self.consumer:
            return canonical
        i = self.branch_of(node_id)
        part = canonical if self.join is None else canonical[self.branch_slice(i)]
        pipe = self.branch_pipe(i)
        return tf.chain_inverse(pipe, part, self._bases_for(pipe, ref))

    def push_from(self, node_id: int, value: Tensor, current: Tensor | None = None) -> Tensor:
        """New canonical array after ``node_id`` rewrites its side to ``value``."""
        if node_id == self.consumer:
            return np.asarray(value, dtype=np.float64)
        i = self.branch_of(node_id)
        part = tf.chain_forward(self.branch_pipe(i), np.asarray(value, dtype=np.float64))
        if self.join is None:
            return part
        if current is None:
            raise ValueError("multi-branch bundle write requires the current canonical")
        out = np.array(current, dtype=np.float64, copy=True)
        out[self.branch_slice(i)] = part
        return out


# ---------------------------------------------------------------------------
# Graph
# ---------------------------------------------------------------------------


class Graph:
    """Immutable-after-build DAG plus its compiled bundle overlay."""

    def __init__(
        self,
        nodes: list[Node],
        edges: list[Edge],
        bundles: list[Bundle],
        partition: dict[int, str] | None = None,
    ):
        self.nodes = nodes
        self.edges = edges
        self.bundles = bundles
        self.partition = partition
        self._in: dict[int, list[Bundle]] = {}
        self._out: dict[int, list[Bundle]] = {}
        for b in bundles:
            self._in.setdefault(b.consumer, []).append(b)
            for br in b.branches:
                self._out.setdefault(br.producer, []).append(b)
        for lst in self._in.values():
            lst.sort(key=lambda b: b.slot)

    # -- structure queries ---------------------------------------------------

    def in_bundles(self, nid: int) -> list[Bundle]:
        return self._in.get(nid, [])

    def out_bundles(self, nid: int) -> list[Bundle]:
        return self._out.get(nid, [])

    def constraint_nodes(self) -> list[int]:
        return [n.nid for n in self.nodes if is_constraint(n.kind)]

    def parameter_nodes(self) -> list[int]:
        return [n.nid for n in self.nodes if isinstance(n.kind, ParameterSpec)]

    def target_nodes(self) -> list[int]:
        return [n.nid for n in self.nodes if isinstance(n.kind, TargetSpec)]

    def partition_nodes(self, label: str) -> list[int]:
        if self.partition is None:
            raise ValueError("graph has not been bipartitioned")
        return [nid for nid in self.constraint_nodes() if self.partition[nid] == label]

    def constraint_adjacency(self) -> dict[int, set[int]]:
        """Adjacency between constraint nodes with transforms collapsed."""
        adj: dict[int, set[int]] = {nid: set() for nid in self.constraint_nodes()}
        for b in self.bundles:
            for br in b.branches:
                adj[br.producer].add(b.consumer)
                adj[b.consumer].add(br.producer)
        return adj

    def node_ref_value(self, nid: int) -> Tensor | None:
        kind = self.nodes[nid].kind
        if isinstance(kind, ConstantSpec):
            return kind.value
        if isinstance(kind, ParameterSpec):
            return kind.value
        return None

    # -- diagnostics ----------------------------------------------------------

    def dump_text(self) -> str:
        """One record per line: nodes (id, kind, shape) then edges."""
        lines = []
        for n in self.nodes:
            kind_name = type(n.kind).__name__.removesuffix("Spec").lower()
            detail = ""
            if isinstance(n.kind, ParameterSpec):
                detail = f" name={n.kind.name}"
            elif isinstance(n.kind, PrimitiveSpec):
                detail = f" op={type(n.kind.kind).__name__.lower()}"
            elif isinstance(n.kind, TransformSpec):
                detail = f" op={type(n.kind.kind).__name__.lower()}"
            elif isinstance(n.kind, TargetSpec):
                detail = f" loss={type(n.kind.kind).__name__.lower()}"
            shape = "-" if n.out_shape is None else "x".join(map(str, n.out_shape))
            part = ""
            if self.partition is not None and n.nid in self.partition:
                part = f" part={self.partition[n.nid]}"
            lines.append(f"node {n.nid} {kind_name}{detail} shape={shape}{part}")
        for e in self.edges:
            shape = "x".join(map(str, e.shape))
            lines.append(f"edge {e.src} {e.dst} slot={e.slot} shape={shape}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Builder
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Ref:
    nid: int
    shape: tuple[int, ...]


class GraphBuilder:
    """Accumulates nodes and edges; identifiers follow insertion order, so a
    fixed build procedure yields identical ids run to run."""

    def __init__(self):
        self._nodes: list[Node] = []
        self._edges: list[Edge] = []
        self._params: dict[str, Ref] = {}

    def _add_node(self, kind: NodeKind, shape: tuple[int, ...] | None) -> int:
        nid = len(self._nodes)
        self._nodes.append(Node(nid, kind, shape))
        return nid

    def _add_edge(self, src: Ref, dst: int, slot: int) -> None:
        self._edges.append(Edge(len(self._edges), src.nid, dst, slot, src.shape))

    def constant(self, value) -> Ref:
        arr = np.asarray(value, dtype=np.float64)
        nid = self._add_node(ConstantSpec(arr), arr.shape)
        return Ref(nid, arr.shape)

    def parameter(self, name: str, value) -> Ref:
        if name in self._params:
            raise GraphBuildError(f"duplicate parameter name: {name}")
        arr = np.asarray(value, dtype=np.float64)
        nid = self._add_node(ParameterSpec(name, arr), arr.shape)
        ref = Ref(nid, arr.shape)
        self._params[name] = ref
        return ref

    def transform(self, src: Ref, t: Transform) -> Ref:
        try:
            out_shape = tf.chain_out_shape([t], src.shape)
        except ValueError as exc:
            raise GraphBuildError(f"{type(t).__name__.lower()}: {exc}") from exc
        nid = self._add_node(TransformSpec(t), out_shape)
        self._add_edge(src, nid, 0)
        return Ref(nid, out_shape)

    def reshape(self, src: Ref, shape: tuple[int, ...]) -> Ref:
        return self.transform(src, tf.Reshape(src.shape, tuple(shape)))

    def transpose(self, src: Ref, axes: tuple[int, ...]) -> Ref:
        return self.transform(src, tf.Transpose(tuple(axes)))

    def repeat(self, src: Ref, axis: int, reps: int) -> Ref:
        return self.transform(src, tf.Repeat(axis, reps))

    def index(self, src: Ref, indices) -> Ref:
        idx = tuple(int(i) for i in np.asarray(indices).ravel())
        return self.transform(src, tf.Index(idx, src.shape[0]))

    def pad(self, src: Ref, width: int) -> Ref:
        return self.transform(src, tf.Pad(width))

    def conv_patch(self, src: Ref, ksize: int) -> Ref:
        return self.transform(src, tf.ConvPatch(ksize))

    def concat(self, srcs: list[Ref], axis: int) -> Ref:
        if len(srcs) < 2:
            raise GraphBuildError("concat needs at least two inputs")
        ax = axis if axis >= 0 else len(srcs[0].shape) + axis
        sizes = tuple(s.shape[ax] for s in srcs)
        kind = Concat(ax, sizes)
        try:
            out_shape = kind.out_shape([s.shape for s in srcs])
        except ValueError as exc:
            raise GraphBuildError(f"concat: {exc}") from exc
        nid = self._add_node(TransformSpec(kind), out_shape)
        for slot, s in enumerate(srcs):
            self._add_edge(s, nid, slot)
        return Ref(nid, out_shape)

    def primitive(self, kind: PrimKind, srcs: list[Ref]) -> Ref:
        if len(srcs) != kind.fanin:
            raise GraphBuildError(
                f"{type(kind).__name__.lower()} expects {kind.fanin} inputs, got {len(srcs)}"
            )
        out_shape = self._primitive_out_shape(kind, [s.shape for s in srcs])
        nid = self._add_node(PrimitiveSpec(kind), out_shape)
        for slot, s in enumerate(srcs):
            self._add_edge(s, nid, slot)
        return Ref(nid, out_shape)

    @staticmethod
    def _primitive_out_shape(kind: PrimKind, shapes: list[tuple[int, ...]]) -> tuple[int, ...]:
        name = type(kind).__name__.lower()
        if isinstance(kind, (projops.Sum, projops.SumReLU)):
            if any(s != shapes[0] for s in shapes):
                raise GraphBuildError(f"{name}: summand shapes differ: {shapes}")
            return shapes[0]
        if isinstance(kind, projops.Dot):
            if shapes[0] != shapes[1]:
                raise GraphBuildError(f"dot: operand shapes differ: {shapes}")
            if not shapes[0] or shapes[0][-1] != kind.n:
                raise GraphBuildError(
                    f"dot: expected last axis {kind.n}, got shape {shapes[0]}"
                )
            return shapes[0][:-1]
        if isinstance(kind, projops.Max):
            if not shapes[0] or shapes[0][-1] != kind.n:
                raise GraphBuildError(
                    f"max: expected last axis {kind.n}, got shape {shapes[0]}"
                )
            return shapes[0][:-1]
        # identity / quantize preserve shape
        return shapes[0]

    def target(self, kind: TargetKind, labels, logits: Ref) -> int:
        arr = np.asarray(labels, dtype=np.float64)
        if arr.shape != logits.shape:
            raise GraphBuildError(
                f"target: labels shape {arr.shape} != logits shape {logits.shape}"
            )
        nid = self._add_node(TargetSpec(kind, arr), None)
        self._add_edge(logits, nid, 0)
        return nid

    # -- finalization ----------------------------------------------------------

    def finish(self) -> Graph:
        self._validate()
        bundles = self._compile_bundles()
        return Graph(self._nodes, self._edges, bundles)

    def _validate(self) -> None:
        out_count: dict[int, int] = {}
        for e in self._edges:
            out_count[e.src] = out_count.get(e.src, 0) + 1
        for n in self._nodes:
            if isinstance(n.kind, TransformSpec) and out_count.get(n.nid, 0) != 1:
                raise GraphBuildError(
                    f"transform node {n.nid} must feed exactly one consumer"
                )
            if isinstance(n.kind, TargetSpec) and out_count.get(n.nid, 0) != 0:
                raise GraphBuildError(f"target node {n.nid} cannot have outputs")

    def _compile_bundles(self) -> list[Bundle]:
        in_edges: dict[int, list[Edge]] = {}
        for e in self._edges:
            in_edges.setdefault(e.dst, []).append(e)
        for lst in in_edges.values():
            lst.sort(key=lambda e: e.slot)

        bundles: list[Bundle] = []
        for n in self._nodes:
            if not is_constraint(n.kind):
                continue
            for e in in_edges.get(n.nid, []):
                bundles.append(
                    self._walk_chain(e, n.nid, e.slot, in_edges, len(bundles))
                )
        return bundles

    def _walk_chain(
        self,
        edge: Edge,
        consumer: int,
        slot: int,
        in_edges: dict[int, list[Edge]],
        bid: int,
    ) -> Bundle:
        pipe_rev: list[Transform] = []
        edge_ids = [edge.eid]
        cur = edge.src
        while isinstance(self._nodes[cur].kind, TransformSpec):
            kind = self._nodes[cur].kind.kind
            if isinstance(kind, Concat):
                if pipe_rev:
                    raise GraphBuildError(
                        "transforms after a concat are not supported; "
                        "apply them to each input before joining"
                    )
                branches = []
                for be in in_edges[cur]:
                    branches.append(self._walk_branch(be, in_edges))
                producers = [b.producer for b in branches]
                if len(set(producers)) != len(producers):
                    raise GraphBuildError(
                        "concat joining the same producer twice is not supported"
                    )
                shape = self._nodes[cur].out_shape
                return Bundle(bid, branches, kind, [], consumer, slot, shape, edge_ids)
            pipe_rev.append(kind)
            (up,) = in_edges[cur]
            edge_ids.append(up.eid)
            cur = up.src
        pipe = list(reversed(pipe_rev))
        shape = tf.chain_out_shape(pipe, self._nodes[cur].out_shape)
        return Bundle(
            bid,
            [Branch(cur, [], [])],
            None,
            pipe,
            consumer,
            slot,
            shape,
            edge_ids,
        )

    def _walk_branch(self, edge: Edge, in_edges: dict[int, list[Edge]]) -> Branch:
        pipe_rev: list[Transform] = []
        edge_ids = [edge.eid]
        cur = edge.src
        while isinstance(self._nodes[cur].kind, TransformSpec):
            kind = self._nodes[cur].kind.kind
            if isinstance(kind, Concat):
                raise GraphBuildError("nested concat transforms are not supported")
            pipe_rev.append(kind)
            (up,) = in_edges[cur]
            edge_ids.append(up.eid)
            cur = up.src
        return Branch(cur, list(reversed(pipe_rev)), edge_ids)


# ---------------------------------------------------------------------------
# Edge state
# ---------------------------------------------------------------------------


class EdgeState:
    """One tensor per bundle, canonically at the consumer-side layout.

    Values of individual fine-grained edges are views derived through the
    transform inverses; they exist for inspection and debugging, while
    solvers operate on the canonical arrays.
    """

    def __init__(self, graph: Graph, arrays: list[Tensor]):
        if len(arrays) != len(graph.bundles):
            raise ValueError("state arity mismatch")
        self.graph = graph
        self.arrays = arrays

    def bundle(self, bid: int) -> Tensor:
        return self.arrays[bid]

    def set_bundle(self, bid: int, value: Tensor) -> None:
        b = self.graph.bundles[bid]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != b.shape:
            raise ValueError(
                f"bundle {bid} expects shape {b.shape}, got {value.shape}"
            )
        self.arrays[bid] = value

    def copy(self) -> "EdgeState":
        return EdgeState(self.graph, [a.copy() for a in self.arrays])

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays)

    def allclose(self, other: "EdgeState", atol: float = 0.0, rtol: float = 0.0) -> bool:
        return all(
            np.allclose(a, b, atol=atol, rtol=rtol)
            for a, b in zip(self.arrays, other.arrays)
        )

    def equal(self, other: "EdgeState") -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.arrays, other.arrays))

    def max_abs_diff(self, other: "EdgeState") -> float:
        diffs = [
            float(np.max(np.abs(a - b))) if a.size else 0.0
            for a, b in zip(self.arrays, other.arrays)
        ]
        return max(diffs) if diffs else 0.0

    def edge_value(self, eid: int) -> Tensor:
        """Value carried by a fine-grained edge, derived from its bundle."""
        for b in self.graph.bundles:
            if eid in b.edge_ids:
                return self._edge_value_in_bundle(b, eid)
            for br in b.branches:
                if eid in br.edge_ids:
                    return self._edge_value_in_branch(b, br, eid)
        raise KeyError(f"edge {eid} not part of any bundle")

    def _edge_value_in_bundle(self, b: Bundle, eid: int) -> Tensor:
        # edge_ids[0] is the terminal edge; edge_ids[i] sits i transforms back.
        depth = b.edge_ids.index(eid)
        val = self.arrays[b.bid]
        for i in range(len(b.pipe) - 1, len(b.pipe) - 1 - depth, -1):
            val = b.pipe[i].inverse(val, base=self._base_for(b, b.pipe, i))
        return val

    def _edge_value_in_branch(self, b: Bundle, br: Branch, eid: int) -> Tensor:
        depth = br.edge_ids.index(eid)
        i = b.branches.index(br)
        val = np.ascontiguousarray(self.arrays[b.bid][b.branch_slice(i)])
        if any(isinstance(t, tf.Index) for t in br.pipe):
            bases = b._bases_for(br.pipe, self.graph.node_ref_value(br.producer))
        else:
            bases = [None] * len(br.pipe)
        for j in range(len(br.pipe) - 1, len(br.pipe) - 1 - depth, -1):
            val = br.pipe[j].inverse(val, base=bases[j])
        return val

    def _base_for(self, b: Bundle, pipe: list[Transform], i: int):
        if not isinstance(pipe[i], tf.Index) or b.join is not None:
            return None
        ref = self.graph.node_ref_value(b.branches[0].producer)
        return b._bases_for(pipe, ref)[i]


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def trace(model, params: ParamTree, batch_inputs: Tensor, batch_targets: Tensor) -> Graph:
    """Build the batch computation graph for a model.

    The model supplies the actual construction (every architecture lowers
    itself to primitives and transforms); this wrapper validates the batch
    agreement contract and is the stable entry point solvers use.
    """
    n_in = np.asarray(batch_inputs).shape[0]
    n_t = np.asarray(batch_targets).shape[0]
    if n_in != n_t:
        raise GraphBuildError(
            f"batch sizes disagree: {n_in} inputs vs {n_t} targets"
        )
    return model.build_graph(params, batch_inputs, batch_targets)


def bipartition(g: Graph) -> Graph:
    """Two-colour the constraint nodes, inserting identities on odd cycles.

    BFS colouring over the transform-collapsed adjacency; every edge whose
    endpoints collide gets an identity primitive spliced in, which always
    repairs the colouring.  Existing node ids are preserved.
    """
    nodes = list(g.nodes)
    bundles = [
        Bundle(b.bid, b.branches, b.join, b.pipe, b.consumer, b.slot, b.shape, b.edge_ids)
        for b in g.bundles
    ]
    edges = list(g.edges)

    def colour(bs: list[Bundle]) -> tuple[dict[int, int], list[Bundle]]:
        adj: dict[int, set[int]] = {}
        by_pair: dict[tuple[int, int], list[Bundle]] = {}
        for b in bs:
            for br in b.branches:
                adj.setdefault(br.producer, set()).add(b.consumer)
                adj.setdefault(b.consumer, set()).add(br.producer)
                by_pair.setdefault((br.producer, b.consumer), []).append(b)
        colours: dict[int, int] = {}
        conflicts: list[Bundle] = []
        for start in sorted(adj):
            if start in colours:
                continue
            colours[start] = 0
            queue = [start]
            while queue:
                u = queue.pop(0)
                for v in sorted(adj[u]):
                    if v not in colours:
                        colours[v] = 1 - colours[u]
                        queue.append(v)
                    elif colours[v] == colours[u]:
                        key = (u, v) if (u, v) in by_pair else (v, u)
                        for b in by_pair[key]:
                            if b not in conflicts:
                                conflicts.append(b)
        return colours, conflicts

    while True:
        colours, conflicts = colour(bundles)
        if not conflicts:
            break
        for b in conflicts:
            nid = len(nodes)
            nodes.append(Node(nid, PrimitiveSpec(projops.Identity()), b.shape))
            orig_consumer, orig_slot = b.consumer, b.slot
            b.consumer, b.slot = nid, 0
            eid = len(edges)
            edges.append(Edge(eid, nid, orig_consumer, orig_slot, b.shape))
            bundles.append(
                Bundle(
                    len(bundles),
                    [Branch(nid, [], [])],
                    None,
                    [],
                    orig_consumer,
                    orig_slot,
                    b.shape,
                    [eid],
                )
            )

    # Isolated constraint nodes (no bundles at all) default to colour 0.
    labels: dict[int, str] = {}
    seen: set[int] = set()
    targets = [n.nid for n in nodes if isinstance(n.kind, TargetSpec)]
    adj: dict[int, set[int]] = {n.nid: set() for n in nodes if is_constraint(n.kind)}
    for b in bundles:
        for br in b.branches:
            adj[br.producer].add(b.consumer)
            adj[b.consumer].add(br.producer)
    for start in sorted(adj):
        if start in seen:
            continue
        comp = [start]
        seen.add(start)
        i = 0
        while i < len(comp):
            for v in sorted(adj[comp[i]]):
                if v not in seen:
                    seen.add(v)
                    comp.append(v)
            i += 1
        comp_targets = [t for t in targets if t in set(comp)]
        anchor = comp_targets[0] if comp_targets else comp[0]
        # The anchor's colour class is labelled B (solvers treat B as the
        # partition holding the targets).
        for nid in comp:
            same = colours.get(nid, 0) == colours.get(anchor, 0)
            labels[nid] = "B" if same else "A"

    return Graph(nodes, edges, bundles, labels)


def init_state(g: Graph, params: ParamTree) -> EdgeState:
    """Forward-evaluate the graph and lay the results onto every bundle."""
    outputs: dict[int, Tensor] = {}
    arrays: list[Tensor | None] = [None] * len(g.bundles)

    def settle_bundle(b: Bundle) -> None:
        parts = [
            tf.chain_forward(br.pipe, outputs[br.producer]) for br in b.branches
        ]
        val = b.join.forward(parts) if b.join is not None else parts[0]
        arrays[b.bid] = tf.chain_forward(b.pipe, val)

    for node in g.nodes:
        kind = node.kind
        if isinstance(kind, ConstantSpec):
            outputs[node.nid] = kind.value
        elif isinstance(kind, ParameterSpec):
            if kind.name not in params:
                raise InitializationError(f"missing parameter: {kind.name}")
            val = np.asarray(params[kind.name], dtype=np.float64)
            if val.shape != kind.shape:
                raise InitializationError(
                    f"parameter {kind.name}: shape {val.shape} != {kind.shape}"
                )
            outputs[node.nid] = val
        elif isinstance(kind, PrimitiveSpec):
            for b in g.in_bundles(node.nid):
                settle_bundle(b)
            ins = [arrays[b.bid] for b in g.in_bundles(node.nid)]
            out = projops.forward_primitive(kind.kind, ins)
            if not np.isfinite(out).all():
                raise InitializationError(
                    f"non-finite forward value at node {node.nid} "
                    f"({type(kind.kind).__name__.lower()})"
                )
            outputs[node.nid] = out
        elif isinstance(kind, TargetSpec):
            for b in g.in_bundles(node.nid):
                settle_bundle(b)
        # transforms are resolved inside settle_bundle

    for b in g.bundles:
        if arrays[b.bid] is None:  # bundles feeding nothing downstream of primitives
            settle_bundle(b)

    # Private, contiguous buffers: solvers mutate the state in place and must
    # never reach back into node-held values or the caller's parameters.
    return EdgeState(g, [np.array(a, dtype=np.float64, order="C") for a in arrays])


def extract_params(g: Graph, z: EdgeState) -> ParamTree:
    """Read each parameter as the mean over its outgoing edge values."""
    out: ParamTree = {}
    for nid in g.parameter_nodes():
        kind = g.nodes[nid].kind
        views = [
            b.pull_to(nid, z.bundle(b.bid), ref=kind.value)
            for b in g.out_bundles(nid)
        ]
        if not views:
            out[kind.name] = kind.value.copy()
            continue
        out[kind.name] = shifted_mean(np.stack(views, axis=0), axis=0)
    return out


def resolve_through_transforms(g: Graph, nid: int, direction: str, z: EdgeState) -> list[Tensor]:
    """Values adjacent to a constraint node, passed through any transforms.

    ``incoming`` yields the node's operand arrays (canonical layout);
    ``outgoing`` yields one view per outgoing edge, pulled back to the node's
    own output layout.
    """
    if direction == "incoming":
        return [z.bundle(b.bid) for b in g.in_bundles(nid)]
    if direction == "outgoing":
        ref = g.node_ref_value(nid)
        return [b.pull_to(nid, z.bundle(b.bid), ref=ref) for b in g.out_bundles(nid)]
    raise ValueError(f"direction must be 'incoming' or 'outgoing', got {direction!r}")
