"""Path-sampling policies for super-net training.

Three policies: uniform over raw connected encodings (random_nas),
uniform over canonical classes with a uniform representative inside the
class (random_a, needs a full enumeration index), and a fairness-driven
step that gives every (slot, op) pair exactly one gradient contribution
per update (fairnas).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from snbench import nnops
from snbench.autodiff import ComputeGraph
from snbench.errors import DivergedTraining, IndexMissing, SnbenchError
from snbench.space import (
    ArchEncoding,
    Family,
    SearchSpaceDef,
    SpaceIndex,
    make_edge_encoding,
    prune_to_cell,
)
from snbench.errors import Disconnected
from snbench.optim import SGD
from snbench.supernet import Placement, SuperNet, activate_subnet, apply_path_dropout

REJECTION_BOUND = 10_000


class SamplerKind(str, Enum):
    RANDOM_NAS = "random_nas"
    RANDOM_A = "random_a"
    FAIRNAS = "fairnas"


def random_nas_next(space: SearchSpaceDef, rng: np.random.Generator) -> ArchEncoding:
    """Uniform draw over valid connected raw encodings (rejection)."""
    o = len(space.op_vocab)
    if space.family is Family.EDGE_OP_SUM:
        return make_edge_encoding(space, rng.integers(0, o, size=len(space.possible_edges())))
    possible = space.possible_edges()
    n = space.n_nodes
    for _ in range(REJECTION_BOUND):
        bits = rng.integers(0, 2, size=len(possible))
        if space.max_edges is not None and int(bits.sum()) > space.max_edges:
            continue
        ops = tuple(int(v) for v in rng.integers(0, o, size=space.n_intermediate))
        adj = [[0] * n for _ in range(n)]
        for bit, (i, j) in zip(bits, possible):
            if bit:
                adj[i][j] = 1
        enc = ArchEncoding(tuple(tuple(row) for row in adj), node_ops=ops)
        try:
            cell = prune_to_cell(space, enc)
        except Disconnected:
            continue
        if space.output_in_degree is not None and cell.output_in_degree() != space.output_in_degree:
            continue
        return enc
    raise SnbenchError(f"rejection sampling failed after {REJECTION_BOUND} attempts")


def random_a_next(space: SearchSpaceDef, index: SpaceIndex | None,
                  rng: np.random.Generator) -> ArchEncoding:
    """Uniform class draw, then a uniform representative within it."""
    if index is None or index.space != space:
        raise IndexMissing("class-uniform sampling needs the space's enumeration index")
    canon = index.class_ids[int(rng.integers(0, index.n_classes))]
    members = index.by_class[canon]
    return members[int(rng.integers(0, len(members)))]


@dataclass
class SamplerState:
    """One experiment's sampler: kind, RNG stream, optional class index."""

    kind: SamplerKind
    space: SearchSpaceDef
    rng: np.random.Generator
    index: SpaceIndex | None = None

    def next(self) -> ArchEncoding:
        if self.kind is SamplerKind.RANDOM_A:
            return random_a_next(self.space, self.index, self.rng)
        return random_nas_next(self.space, self.rng)


def make_sampler(kind: SamplerKind, space: SearchSpaceDef, seed,
                 index: SpaceIndex | None = None) -> SamplerState:
    rng = np.random.default_rng(seed)
    if kind is SamplerKind.RANDOM_A and index is None:
        raise IndexMissing("class-uniform sampling needs the space's enumeration index")
    return SamplerState(kind=kind, space=space, rng=rng, index=index)


# ---------------------------------------------------------------------------
# Fairness-driven gradient accumulation


@dataclass
class FairStepStats:
    """Bookkeeping for one averaged-gradient update."""

    losses: list[float] = field(default_factory=list)
    slot_op_counts: dict = field(default_factory=dict)
    n_passes: int = 0

    @property
    def mean_loss(self) -> float:
        return float(np.mean(self.losses))


def _fair_slots(supernet: SuperNet, cell) -> list:
    """Weight-bank positions that receive an op this step."""
    space = supernet.space
    if space.family is Family.NODE_OP_CONCAT:
        return list(cell.intermediate_nodes)
    if supernet.mapping.op_placement is Placement.ON_EDGE:
        return list(space.possible_edges())
    return list(range(1, space.n_nodes))


def fairnas_step(supernet: SuperNet, xb: np.ndarray, yb: np.ndarray,
                 rng: np.random.Generator, sgd: SGD, lr: float) -> FairStepStats:
    """One update: sample a topology, then run |vocab| passes on the same
    batch where every active slot cycles through its own random
    permutation of the ops; apply the averaged gradients once."""
    space = supernet.space
    o = len(space.op_vocab)
    if space.family is Family.NODE_OP_CONCAT:
        topo = random_nas_next(space, rng)
        cell = prune_to_cell(space, topo)
    else:
        topo = make_edge_encoding(space, (0,) * len(space.possible_edges()))
        cell = prune_to_cell(space, topo)
    slots = _fair_slots(supernet, cell)
    perms = {slot: rng.permutation(o) for slot in slots}
    stats = FairStepStats()
    edge_list = space.possible_edges()
    for i in range(o):
        assignment = {slot: int(perms[slot][i]) for slot in slots}
        if space.family is Family.NODE_OP_CONCAT:
            ops = tuple(assignment.get(v, 0) for v in space.intermediate_nodes)
            enc = ArchEncoding(topo.adjacency, node_ops=ops)
        elif supernet.mapping.op_placement is Placement.ON_EDGE:
            enc = make_edge_encoding(space, tuple(assignment[e] for e in edge_list))
        else:
            enc = make_edge_encoding(space, tuple(assignment[v] for (_, v) in edge_list))
        view = activate_subnet(supernet, enc, rng=rng)
        if supernet.mapping.path_dropout_p > 0:
            view = apply_path_dropout(view, supernet.mapping.path_dropout_p, rng)
        g = ComputeGraph("train")
        logits = view.forward(g, xb, rng=rng)
        loss = nnops.softmax_cross_entropy(g, logits, yb)
        if not np.isfinite(loss.data):
            raise DivergedTraining(f"non-finite loss in fairness pass {i}")
        g.backward(loss)
        stats.losses.append(float(loss.data))
        for slot, op in assignment.items():
            key = (slot, op)
            stats.slot_op_counts[key] = stats.slot_op_counts.get(key, 0) + 1
        stats.n_passes += 1
    sgd.step(lr, grad_scale=1.0 / o)
    sgd.zero_grad()
    return stats


# ---------------------------------------------------------------------------
# Coverage analysis


@dataclass
class CoverageHistogram:
    sampler: str
    seed: int
    rank_bins: list[tuple[float, float, int]]
    acc_bins: list[tuple[float, float, int]]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            f.write(f"# sampler={self.sampler} seed={self.seed}\n")
            w = csv.writer(f)
            w.writerow(["kind", "bin_lo", "bin_hi", "count"])
            for lo, hi, c in self.rank_bins:
                w.writerow(["rank", lo, hi, c])
            for lo, hi, c in self.acc_bins:
                w.writerow(["accuracy", lo, hi, c])


def _bin_counts(values: np.ndarray, lo: float, hi: float, n_bins: int):
    if hi <= lo:
        hi = lo + 1.0
    counts, edges = np.histogram(values, bins=n_bins, range=(lo, hi))
    return [(float(edges[i]), float(edges[i + 1]), int(c)) for i, c in enumerate(counts)]


def sampler_coverage_histogram(sampler: SamplerState, space: SearchSpaceDef,
                               oracle, n_draws: int, n_bins: int = 20,
                               seed: int = 0) -> CoverageHistogram:
    """Histograms of drawn architectures' oracle ranks and accuracies.

    ``oracle`` must expose ``rank_of(canon) -> int`` (1 = best) and
    ``mean_acc(canon) -> float``.
    """
    from snbench.canon import canonical_hash

    canon_cache: dict[ArchEncoding, str] = {}
    ranks = np.empty(n_draws)
    accs = np.empty(n_draws)
    for i in range(n_draws):
        enc = sampler.next()
        canon = canon_cache.get(enc)
        if canon is None:
            canon = canonical_hash(prune_to_cell(space, enc))
            canon_cache[enc] = canon
        ranks[i] = oracle.rank_of(canon)
        accs[i] = oracle.mean_acc(canon)
    n_total = oracle.n_records() if hasattr(oracle, "n_records") else (ranks.max() if n_draws else 1)
    return CoverageHistogram(
        sampler=sampler.kind.value,
        seed=seed,
        rank_bins=_bin_counts(ranks, 1.0, float(n_total), n_bins) if n_draws else [],
        acc_bins=_bin_counts(accs, 0.0, 1.0, n_bins) if n_draws else [],
    )
