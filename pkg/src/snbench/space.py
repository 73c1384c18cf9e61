"""Cell-based search-space families, architecture encodings and enumeration.

Two families are supported:

* ``NODE_OP_CONCAT`` -- variable DAG topology over ``n_intermediate + 2``
  nodes, one operation label per intermediate node, concat merge at the
  output.  Intermediate channel widths depend dynamically on the output
  in-degree unless the space is restricted to a fixed in-degree.
* ``EDGE_OP_SUM`` -- fixed complete DAG, one operation label per edge,
  sum merge everywhere, fixed channel widths.  Topologically equivalent
  encodings are deliberately *not* merged for this family: every raw
  encoding is its own canonical class.

Encodings are tiny immutable values; enumeration of a whole space is the
basis for the class-uniform sampler and for the ground-truth oracle.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, replace
from enum import Enum
from functools import lru_cache
from math import comb
from typing import Iterator

from snbench.errors import Disconnected, InvalidK, InvalidSpace, TooLarge

ENUMERATION_CAP = 100_000

DEFAULT_NODE_VOCAB = ("conv3x3", "conv1x1", "avgpool3x3")
DEFAULT_EDGE_VOCAB = ("zeroize", "skip", "conv1x1", "conv3x3", "avgpool3x3")


class Family(str, Enum):
    NODE_OP_CONCAT = "node_op_concat"
    EDGE_OP_SUM = "edge_op_sum"


class ChannelPolicy(str, Enum):
    DYNAMIC = "dynamic"
    FIXED = "fixed"


class Merge(str, Enum):
    CONCAT = "concat"
    SUM = "sum"


@dataclass(frozen=True)
class SearchSpaceDef:
    """Validated family parameters; construct through :func:`define_space`."""

    family: Family
    n_intermediate: int
    op_vocab: tuple[str, ...]
    max_edges: int | None = None
    channel_policy: ChannelPolicy = ChannelPolicy.DYNAMIC
    merge: Merge = Merge.CONCAT
    io_edge: bool = True
    output_in_degree: int | None = None

    @property
    def n_nodes(self) -> int:
        return self.n_intermediate + 2

    @property
    def input_node(self) -> int:
        return 0

    @property
    def output_node(self) -> int:
        return self.n_nodes - 1

    @property
    def intermediate_nodes(self) -> tuple[int, ...]:
        return tuple(range(1, self.n_nodes - 1))

    def possible_edges(self) -> tuple[tuple[int, int], ...]:
        """All structurally allowed edges in canonical (i, j) order."""
        edges = [
            (i, j)
            for i in range(self.n_nodes)
            for j in range(i + 1, self.n_nodes)
        ]
        if self.family is Family.EDGE_OP_SUM and not self.io_edge:
            edges.remove((self.input_node, self.output_node))
        return tuple(edges)

    def to_json(self) -> dict:
        out = {
            "family": self.family.value,
            "n_intermediate": self.n_intermediate,
            "op_vocab": list(self.op_vocab),
        }
        if self.max_edges is not None:
            out["max_edges"] = self.max_edges
        out["channel_policy"] = self.channel_policy.value
        out["merge"] = self.merge.value
        if self.family is Family.EDGE_OP_SUM and not self.io_edge:
            out["io_edge"] = False
        if self.output_in_degree is not None:
            out["output_in_degree"] = self.output_in_degree
        return out

    @staticmethod
    def from_json(obj: dict) -> "SearchSpaceDef":
        space = define_space(
            Family(obj["family"]),
            obj["n_intermediate"],
            tuple(obj["op_vocab"]),
            max_edges=obj.get("max_edges"),
            io_edge=obj.get("io_edge", True),
            channel_policy=ChannelPolicy(obj["channel_policy"]) if "channel_policy" in obj else None,
            merge=Merge(obj["merge"]) if "merge" in obj else None,
        )
        if obj.get("output_in_degree") is not None:
            space = replace(
                space,
                output_in_degree=obj["output_in_degree"],
                channel_policy=ChannelPolicy.FIXED,
            )
        return space


def define_space(
    family: Family,
    n_intermediate: int,
    op_vocab,
    *,
    max_edges: int | None = None,
    io_edge: bool = True,
    channel_policy: ChannelPolicy | None = None,
    merge: Merge | None = None,
) -> SearchSpaceDef:
    """Validate arguments and return an immutable space definition."""
    op_vocab = tuple(op_vocab)
    if not op_vocab:
        raise InvalidSpace("op_vocab must be non-empty")
    if len(set(op_vocab)) != len(op_vocab):
        raise InvalidSpace("op_vocab contains duplicates")
    if n_intermediate < 1:
        raise InvalidSpace("n_intermediate must be >= 1")
    if family is Family.EDGE_OP_SUM:
        if max_edges is not None:
            raise InvalidSpace("max_edges is not applicable to the fixed-topology family")
        merge = merge or Merge.SUM
        channel_policy = channel_policy or ChannelPolicy.FIXED
        if merge is not Merge.SUM or channel_policy is not ChannelPolicy.FIXED:
            raise InvalidSpace("edge-op spaces use sum merge and fixed channels")
    else:
        merge = merge or Merge.CONCAT
        channel_policy = channel_policy or ChannelPolicy.DYNAMIC
        if merge is not Merge.CONCAT:
            raise InvalidSpace("node-op spaces use concat merge")
        if max_edges is not None and max_edges < 1:
            raise InvalidSpace("max_edges must be >= 1")
    return SearchSpaceDef(
        family=family,
        n_intermediate=n_intermediate,
        op_vocab=op_vocab,
        max_edges=max_edges,
        channel_policy=channel_policy,
        merge=merge,
        io_edge=io_edge,
    )


def default_node_space() -> SearchSpaceDef:
    """Three intermediate nodes, three ops, at most 7 of the 10 edges.

    The edge cap keeps a full ground-truth table buildable on one core
    while still admitting every output in-degree 1..4."""
    return define_space(Family.NODE_OP_CONCAT, 3, DEFAULT_NODE_VOCAB, max_edges=7)


def default_edge_space() -> SearchSpaceDef:
    """Complete 4-node DAG (6 op edges) over the 5-op vocabulary."""
    return define_space(Family.EDGE_OP_SUM, 2, DEFAULT_EDGE_VOCAB)


@dataclass(frozen=True)
class ArchEncoding:
    """Raw genotype: upper-triangular adjacency plus op labels.

    Exactly one of ``node_ops`` / ``edge_ops`` is set.  ``edge_ops`` is
    aligned with the (i, j)-sorted edge list of the adjacency.
    """

    adjacency: tuple[tuple[int, ...], ...]
    node_ops: tuple[int, ...] | None = None
    edge_ops: tuple[int, ...] | None = None

    @property
    def n_nodes(self) -> int:
        return len(self.adjacency)

    def edges(self) -> tuple[tuple[int, int], ...]:
        n = self.n_nodes
        return tuple(
            (i, j) for i in range(n) for j in range(i + 1, n) if self.adjacency[i][j]
        )

    def to_json(self) -> dict:
        out: dict = {"adj": [list(row) for row in self.adjacency]}
        if self.node_ops is not None:
            out["node_ops"] = list(self.node_ops)
        else:
            out["edge_ops"] = list(self.edge_ops)
        return out

    @staticmethod
    def from_json(obj: dict) -> "ArchEncoding":
        adj = tuple(tuple(int(v) for v in row) for row in obj["adj"])
        if "node_ops" in obj:
            return ArchEncoding(adj, node_ops=tuple(obj["node_ops"]))
        return ArchEncoding(adj, edge_ops=tuple(obj["edge_ops"]))

    def dumps(self) -> str:
        return json.dumps(self.to_json(), separators=(",", ":"))


def validate_encoding(space: SearchSpaceDef, enc: ArchEncoding) -> None:
    """Raise InvalidSpace when the encoding does not belong to the space."""
    n = space.n_nodes
    if enc.n_nodes != n or any(len(row) != n for row in enc.adjacency):
        raise InvalidSpace("adjacency size does not match the space")
    for i in range(n):
        for j in range(n):
            if enc.adjacency[i][j] not in (0, 1):
                raise InvalidSpace("adjacency entries must be 0/1")
            if enc.adjacency[i][j] and j <= i:
                raise InvalidSpace("adjacency must be strictly upper-triangular")
    o = len(space.op_vocab)
    if space.family is Family.NODE_OP_CONCAT:
        if enc.node_ops is None or enc.edge_ops is not None:
            raise InvalidSpace("node-op family requires node_ops only")
        if len(enc.node_ops) != space.n_intermediate:
            raise InvalidSpace("node_ops length must equal n_intermediate")
        if any(not (0 <= idx < o) for idx in enc.node_ops):
            raise InvalidSpace("op index out of range")
        if space.max_edges is not None and len(enc.edges()) > space.max_edges:
            raise InvalidSpace("edge count exceeds max_edges")
    else:
        if enc.edge_ops is None or enc.node_ops is not None:
            raise InvalidSpace("edge-op family requires edge_ops only")
        expected = space.possible_edges()
        if enc.edges() != expected:
            raise InvalidSpace("edge-op family uses the fixed complete DAG")
        if len(enc.edge_ops) != len(expected):
            raise InvalidSpace("edge_ops length must equal the edge count")
        if any(not (0 <= idx < o) for idx in enc.edge_ops):
            raise InvalidSpace("op index out of range")


def make_edge_encoding(space: SearchSpaceDef, edge_ops) -> ArchEncoding:
    """Encoding for the fixed-topology family from an op list."""
    n = space.n_nodes
    adj = [[0] * n for _ in range(n)]
    for i, j in space.possible_edges():
        adj[i][j] = 1
    enc = ArchEncoding(tuple(tuple(row) for row in adj), edge_ops=tuple(edge_ops))
    validate_encoding(space, enc)
    return enc


def make_node_encoding(space: SearchSpaceDef, edges, node_ops) -> ArchEncoding:
    n = space.n_nodes
    adj = [[0] * n for _ in range(n)]
    for i, j in edges:
        adj[i][j] = 1
    enc = ArchEncoding(tuple(tuple(row) for row in adj), node_ops=tuple(node_ops))
    validate_encoding(space, enc)
    return enc


@dataclass(frozen=True)
class CellGraph:
    """Pruned cell: only nodes on some input-to-output path survive.

    Original node indices are preserved so a cell can address the weight
    banks of the super-net it was sampled from.  ``relabelable`` is False
    for the fixed-topology family, whose node positions are semantic.
    """

    nodes: tuple[int, ...]
    edges: tuple[tuple[int, int], ...]
    node_ops: tuple[tuple[int, str], ...] | None
    edge_ops: tuple[tuple[tuple[int, int], str], ...] | None
    input_node: int
    output_node: int
    relabelable: bool

    def in_edges(self, v: int) -> tuple[tuple[int, int], ...]:
        return tuple(e for e in self.edges if e[1] == v)

    def out_edges(self, v: int) -> tuple[tuple[int, int], ...]:
        return tuple(e for e in self.edges if e[0] == v)

    @property
    def intermediate_nodes(self) -> tuple[int, ...]:
        return tuple(v for v in self.nodes if v not in (self.input_node, self.output_node))

    def output_in_degree(self) -> int:
        return len(self.in_edges(self.output_node))

    def node_op(self, v: int) -> str:
        for node, op in self.node_ops:
            if node == v:
                return op
        raise KeyError(v)

    def edge_op(self, e: tuple[int, int]) -> str:
        for edge, op in self.edge_ops:
            if edge == e:
                return op
        raise KeyError(e)


def _reachable(n: int, edges, sources, forward: bool) -> set[int]:
    adj: dict[int, list[int]] = {v: [] for v in range(n)}
    for i, j in edges:
        if forward:
            adj[i].append(j)
        else:
            adj[j].append(i)
    seen = set(sources)
    stack = list(sources)
    while stack:
        v = stack.pop()
        for u in adj[v]:
            if u not in seen:
                seen.add(u)
                stack.append(u)
    return seen


def prune_to_cell(space: SearchSpaceDef, enc: ArchEncoding) -> CellGraph:
    """Drop nodes that lie on no input-to-output path.

    Raises Disconnected when no such path exists at all.  For the
    fixed-topology family the cell is returned unpruned (every node is
    structurally on a path and equivalent encodings stay distinct).
    """
    validate_encoding(space, enc)
    edges = enc.edges()
    inp, out = space.input_node, space.output_node
    if space.family is Family.EDGE_OP_SUM:
        labeled = tuple((e, space.op_vocab[idx]) for e, idx in zip(edges, enc.edge_ops))
        return CellGraph(
            nodes=tuple(range(space.n_nodes)),
            edges=edges,
            node_ops=None,
            edge_ops=labeled,
            input_node=inp,
            output_node=out,
            relabelable=False,
        )
    fwd = _reachable(space.n_nodes, edges, [inp], forward=True)
    bwd = _reachable(space.n_nodes, edges, [out], forward=False)
    if out not in fwd:
        raise Disconnected("no input-to-output path")
    keep = fwd & bwd
    kept_edges = tuple(e for e in edges if e[0] in keep and e[1] in keep)
    labeled_nodes = tuple(
        (v, space.op_vocab[enc.node_ops[v - 1]])
        for v in sorted(keep)
        if v not in (inp, out)
    )
    return CellGraph(
        nodes=tuple(sorted(keep)),
        edges=kept_edges,
        node_ops=labeled_nodes,
        edge_ops=None,
        input_node=inp,
        output_node=out,
        relabelable=True,
    )


def _node_space_adjacencies(space: SearchSpaceDef) -> Iterator[tuple[tuple[int, int], ...]]:
    possible = space.possible_edges()
    for mask in range(1 << len(possible)):
        if space.max_edges is not None and mask.bit_count() > space.max_edges:
            continue
        yield tuple(e for b, e in enumerate(possible) if mask >> b & 1)


def encoding_count(space: SearchSpaceDef) -> int:
    """Exact raw-encoding count.

    For unconstrained spaces this is the closed-form structural count
    (disconnected node-op encodings included).  For output-in-degree
    restricted sub-spaces it is the number of connected members, so that
    the sub-space counts partition the parent's connected count.
    """
    o = len(space.op_vocab)
    if space.family is Family.EDGE_OP_SUM:
        return o ** len(space.possible_edges())
    if space.output_in_degree is not None:
        return sum(1 for _ in _iter_connected(space))
    n_edges = len(space.possible_edges())
    ops = o**space.n_intermediate
    if space.max_edges is None:
        return (1 << n_edges) * ops
    return sum(comb(n_edges, e) for e in range(min(space.max_edges, n_edges) + 1)) * ops


def _iter_connected(space: SearchSpaceDef) -> Iterator[tuple[ArchEncoding, CellGraph]]:
    """All connected encodings of a node-op space, with their pruned cells."""
    o = len(space.op_vocab)
    for edges in _node_space_adjacencies(space):
        skeleton = make_node_encoding(space, edges, (0,) * space.n_intermediate)
        try:
            prune_to_cell(space, skeleton)
        except Disconnected:
            continue
        for ops in itertools.product(range(o), repeat=space.n_intermediate):
            enc = ArchEncoding(skeleton.adjacency, node_ops=ops)
            cell = prune_to_cell(space, enc)
            if space.output_in_degree is not None and cell.output_in_degree() != space.output_in_degree:
                continue
            yield enc, cell


def enumerate_space(space: SearchSpaceDef, cap: int = ENUMERATION_CAP) -> list[tuple[ArchEncoding, str]]:
    """Every valid (connected) encoding paired with its canonical id.

    Raises TooLarge when the raw count exceeds ``cap``.
    """
    from snbench.canon import canonical_hash

    o = len(space.op_vocab)
    raw = o ** len(space.possible_edges()) if space.family is Family.EDGE_OP_SUM else (
        encoding_count(replace(space, output_in_degree=None))
        if space.output_in_degree is not None
        else encoding_count(space)
    )
    if raw > cap:
        raise TooLarge(f"space has {raw} raw encodings, cap is {cap}")
    out: list[tuple[ArchEncoding, str]] = []
    if space.family is Family.EDGE_OP_SUM:
        for ops in itertools.product(range(o), repeat=len(space.possible_edges())):
            enc = make_edge_encoding(space, ops)
            out.append((enc, canonical_hash(prune_to_cell(space, enc))))
        return out
    cache: dict[CellGraph, str] = {}
    for enc, cell in _iter_connected(space):
        canon = cache.get(cell)
        if canon is None:
            canon = canonical_hash(cell)
            cache[cell] = canon
        out.append((enc, canon))
    return out


class SpaceIndex:
    """Enumeration of a space grouped by canonical class."""

    def __init__(self, space: SearchSpaceDef, pairs: list[tuple[ArchEncoding, str]]):
        self.space = space
        self.pairs = pairs
        self.by_class: dict[str, list[ArchEncoding]] = {}
        for enc, canon in pairs:
            self.by_class.setdefault(canon, []).append(enc)
        self.class_ids = sorted(self.by_class)

    @property
    def n_encodings(self) -> int:
        return len(self.pairs)

    @property
    def n_classes(self) -> int:
        return len(self.class_ids)

    def multiplicity(self, canon: str) -> int:
        return len(self.by_class[canon])

    def representative(self, canon: str) -> ArchEncoding:
        return min(self.by_class[canon], key=lambda e: e.dumps())


@lru_cache(maxsize=32)
def build_index(space: SearchSpaceDef, cap: int = ENUMERATION_CAP) -> SpaceIndex:
    return SpaceIndex(space, enumerate_space(space, cap))


def subspace_by_output_edges(space: SearchSpaceDef, k: int) -> SearchSpaceDef:
    """Restrict a node-op space to cells with exactly k output in-edges.

    The restriction fixes the channel policy: every intermediate node of
    a member cell carries ``floor(C_out / k)`` channels, so the output
    concat no longer depends on the sampled topology.
    """
    if space.family is not Family.NODE_OP_CONCAT:
        raise InvalidK("sub-spaces by output in-degree apply to the node-op family")
    if not 1 <= k <= space.n_intermediate + 1:
        raise InvalidK(f"k must be in [1, {space.n_intermediate + 1}], got {k}")
    return replace(space, output_in_degree=k, channel_policy=ChannelPolicy.FIXED)


def space_digest(space: SearchSpaceDef) -> str:
    import hashlib

    payload = json.dumps(space.to_json(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()[:16]
