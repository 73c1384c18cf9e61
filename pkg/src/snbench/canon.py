"""Isomorphism-invariant canonical identifiers for pruned cells.

Two node-op cells that differ only by a relabeling of their intermediate
nodes denote the same stand-alone network, so they must share an id.
The id is built in two stages: iterative color refinement (op label plus
sorted in/out neighbor colors, iterated to a fixpoint) narrows the
candidate node orderings, then the lexicographically minimal relabeled
serialization over the remaining orderings is hashed.  Because the final
step searches actual relabelings, equal ids imply isomorphism -- the
refinement only prunes the search.  Fixed-topology cells skip all of
this: their node positions are semantic, so the literal structure is
hashed.
"""

from __future__ import annotations

import hashlib
import itertools

from snbench.space import CellGraph


def _refine_colors(cell: CellGraph) -> dict[int, str]:
    colors: dict[int, str] = {}
    for v in cell.nodes:
        if v == cell.input_node:
            colors[v] = "in"
        elif v == cell.output_node:
            colors[v] = "out"
        else:
            colors[v] = f"op:{cell.node_op(v)}"
    in_nbrs = {v: [e[0] for e in cell.in_edges(v)] for v in cell.nodes}
    out_nbrs = {v: [e[1] for e in cell.out_edges(v)] for v in cell.nodes}
    for _ in range(len(cell.nodes)):
        new = {}
        for v in cell.nodes:
            sig = (
                colors[v],
                tuple(sorted(colors[u] for u in in_nbrs[v])),
                tuple(sorted(colors[u] for u in out_nbrs[v])),
            )
            new[v] = repr(sig)
        if new == colors:
            break
        colors = new
    return colors


def _minimal_form(cell: CellGraph) -> str:
    colors = _refine_colors(cell)
    mids = sorted(cell.intermediate_nodes, key=lambda v: (colors[v], v))
    groups: list[list[int]] = []
    for v in mids:
        if groups and colors[groups[-1][0]] == colors[v]:
            groups[-1].append(v)
        else:
            groups.append([v])
    best: str | None = None
    for perm_parts in itertools.product(*(itertools.permutations(g) for g in groups)):
        order = [v for part in perm_parts for v in part]
        relabel = {cell.input_node: 0, cell.output_node: len(order) + 1}
        for new_id, v in enumerate(order, start=1):
            relabel[v] = new_id
        edges = sorted((relabel[i], relabel[j]) for i, j in cell.edges)
        ops = [cell.node_op(v) for v in order]
        form = repr((len(order), edges, ops))
        if best is None or form < best:
            best = form
    assert best is not None
    return best


def canonical_hash(cell: CellGraph) -> str:
    """Canonical id of a pruned cell as lowercase hex."""
    if cell.relabelable:
        payload = "node|" + _minimal_form(cell)
    else:
        ops = [op for _, op in cell.edge_ops]
        payload = "edge|" + repr((len(cell.nodes), sorted(cell.edges), ops))
    return hashlib.sha256(payload.encode()).hexdigest()
