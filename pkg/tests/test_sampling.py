import numpy as np
import pytest
from scipy import stats

from snbench.canon import canonical_hash
from snbench.errors import IndexMissing
from snbench.optim import SGD, TrainProtocol
from snbench.sampling import (
    SamplerKind,
    fairnas_step,
    make_sampler,
    random_a_next,
    random_nas_next,
    sampler_coverage_histogram,
)
from snbench.space import (
    Family,
    SpaceIndex,
    build_index,
    define_space,
    enumerate_space,
    make_edge_encoding,
    prune_to_cell,
)
from snbench.supernet import Placement, build_supernet, default_mapping
from snbench.oracle import surrogate_table


def _class_counts(space, index, draws):
    counts = {c: 0 for c in index.class_ids}
    lookup = {enc: canon for enc, canon in index.pairs}
    for enc in draws:
        counts[lookup[enc]] += 1
    return counts


class TestRandomNas:
    def test_uniform_over_edge_encodings(self, tiny_edge_space):
        index = build_index(tiny_edge_space)
        rng = np.random.default_rng(0)
        n = 27_000
        draws = [random_nas_next(tiny_edge_space, rng) for _ in range(n)]
        counts = _class_counts(tiny_edge_space, index, draws)
        observed = np.array([counts[c] for c in index.class_ids])
        _, p = stats.chisquare(observed)
        assert p > 0.01

    def test_class_frequency_proportional_to_multiplicity(self, tiny_node_space):
        index = build_index(tiny_node_space)
        rng = np.random.default_rng(1)
        n = 30_000
        draws = [random_nas_next(tiny_node_space, rng) for _ in range(n)]
        counts = _class_counts(tiny_node_space, index, draws)
        observed = np.array([counts[c] for c in index.class_ids])
        expected = np.array([
            n * index.multiplicity(c) / index.n_encodings for c in index.class_ids
        ])
        _, p = stats.chisquare(observed, expected)
        assert p > 0.01
        # oversampling: the most multiple class is drawn more than a singleton
        mults = {c: index.multiplicity(c) for c in index.class_ids}
        big = max(mults, key=mults.get)
        small = min(mults, key=mults.get)
        assert counts[big] > counts[small]

    def test_single_encoding_space(self):
        space = define_space(Family.EDGE_OP_SUM, 1, ("skip",))
        rng = np.random.default_rng(0)
        assert random_nas_next(space, rng) == random_nas_next(space, rng)

    def test_only_connected_encodings(self, tiny_node_space):
        rng = np.random.default_rng(5)
        for _ in range(200):
            enc = random_nas_next(tiny_node_space, rng)
            prune_to_cell(tiny_node_space, enc)  # must not raise


class TestRandomA:
    def test_uniform_over_classes(self, tiny_node_space):
        index = build_index(tiny_node_space)
        rng = np.random.default_rng(2)
        n = 30_000
        draws = [random_a_next(tiny_node_space, index, rng) for _ in range(n)]
        counts = _class_counts(tiny_node_space, index, draws)
        observed = np.array([counts[c] for c in index.class_ids])
        _, p = stats.chisquare(observed)
        assert p > 0.01

    def test_edge_family_matches_random_nas_distribution(self, tiny_edge_space):
        # classes are singletons, so class-uniform == encoding-uniform
        index = build_index(tiny_edge_space)
        assert index.n_classes == index.n_encodings

    def test_requires_index(self, tiny_node_space):
        with pytest.raises(IndexMissing):
            random_a_next(tiny_node_space, None, np.random.default_rng(0))
        with pytest.raises(IndexMissing):
            make_sampler(SamplerKind.RANDOM_A, tiny_node_space, 0)

    def test_single_class_space(self):
        space = define_space(Family.EDGE_OP_SUM, 1, ("skip",))
        index = build_index(space)
        rng = np.random.default_rng(0)
        assert random_a_next(space, index, rng) == random_a_next(space, index, rng)


class TestDeterminism:
    def test_same_seed_same_sequence(self, tiny_node_space):
        a = make_sampler(SamplerKind.RANDOM_NAS, tiny_node_space, 123)
        b = make_sampler(SamplerKind.RANDOM_NAS, tiny_node_space, 123)
        assert [a.next() for _ in range(20)] == [b.next() for _ in range(20)]


class TestFairnas:
    def _setup(self, space, rng_seed=0, placement=None):
        mapping = default_mapping(space, init_channels=4)
        if placement is not None:
            mapping = default_mapping(space, init_channels=4, op_placement=placement)
        sn = build_supernet(space, mapping, 4, seed=1)
        sgd = SGD(sn.params, momentum=0.9, weight_decay=0.0)
        rng = np.random.default_rng(rng_seed)
        xb = rng.standard_normal((8, 3, 8, 8))
        yb = rng.integers(0, 4, 8)
        return sn, sgd, xb, yb

    def test_every_slot_op_pair_contributes_once(self, full_edge_space):
        sn, sgd, xb, yb = self._setup(full_edge_space)
        stats_ = fairnas_step(sn, xb, yb, np.random.default_rng(3), sgd, 0.01)
        o = len(full_edge_space.op_vocab)
        assert stats_.n_passes == o
        counts = {}
        for (slot, op), c in stats_.slot_op_counts.items():
            counts.setdefault(slot, []).append(c)
        for slot, per_op in counts.items():
            assert len(per_op) == o
            assert all(c == 1 for c in per_op)

    def test_node_placement_slots_are_nodes(self, full_edge_space):
        sn, sgd, xb, yb = self._setup(full_edge_space, placement=Placement.ON_NODE)
        stats_ = fairnas_step(sn, xb, yb, np.random.default_rng(3), sgd, 0.01)
        slots = {slot for slot, _ in stats_.slot_op_counts}
        assert slots == {1, 2, 3}

    def test_single_op_vocabulary_equals_plain_step(self):
        space = define_space(Family.EDGE_OP_SUM, 1, ("conv3x3",))
        mapping = default_mapping(space, init_channels=4)
        rng = np.random.default_rng(7)
        xb = rng.standard_normal((8, 3, 8, 8))
        yb = rng.integers(0, 4, 8)

        sn_a = build_supernet(space, mapping, 4, seed=5)
        sgd_a = SGD(sn_a.params, momentum=0.9)
        fairnas_step(sn_a, xb, yb, np.random.default_rng(11), sgd_a, 0.05)

        sn_b = build_supernet(space, mapping, 4, seed=5)
        sgd_b = SGD(sn_b.params, momentum=0.9)
        rng_b = np.random.default_rng(11)
        enc = make_edge_encoding(space, (0, 0, 0))
        from snbench import nnops
        from snbench.autodiff import ComputeGraph
        from snbench.supernet import activate_subnet

        view = activate_subnet(sn_b, enc)
        g = ComputeGraph("train")
        loss = nnops.softmax_cross_entropy(g, view.forward(g, xb), yb)
        g.backward(loss)
        sgd_b.step(0.05)
        sgd_b.zero_grad()
        for name, t in sn_a.params.items():
            np.testing.assert_array_equal(t.data, sn_b.params[name].data)


class TestCoverage:
    def test_histogram_counts(self, tiny_node_space):
        table = surrogate_table(tiny_node_space)
        sampler = make_sampler(SamplerKind.RANDOM_NAS, tiny_node_space, 0)
        hist = sampler_coverage_histogram(sampler, tiny_node_space, table, 500, n_bins=10, seed=0)
        assert sum(c for _, _, c in hist.rank_bins) == 500
        assert sum(c for _, _, c in hist.acc_bins) == 500

    def test_empty_histogram(self, tiny_node_space):
        table = surrogate_table(tiny_node_space)
        sampler = make_sampler(SamplerKind.RANDOM_NAS, tiny_node_space, 0)
        hist = sampler_coverage_histogram(sampler, tiny_node_space, table, 0)
        assert hist.rank_bins == [] and hist.acc_bins == []

    def test_csv_header(self, tiny_node_space, tmp_path):
        table = surrogate_table(tiny_node_space)
        sampler = make_sampler(SamplerKind.RANDOM_A, tiny_node_space, 4, index=build_index(tiny_node_space))
        hist = sampler_coverage_histogram(sampler, tiny_node_space, table, 100, seed=4)
        path = tmp_path / "cov.csv"
        hist.write_csv(path)
        first = path.read_text().splitlines()[0]
        assert first.startswith("#") and "random_a" in first and "seed=4" in first

    def test_multiplicity_weighted_rank_histogram(self, tiny_node_space):
        # uniform-encoding sampling must land on high-multiplicity classes
        # proportionally more often than class-uniform sampling
        index = build_index(tiny_node_space)
        table = surrogate_table(tiny_node_space)
        n = 4000
        nas = sampler_coverage_histogram(
            make_sampler(SamplerKind.RANDOM_NAS, tiny_node_space, 0),
            tiny_node_space, table, n, n_bins=6)
        ra = sampler_coverage_histogram(
            make_sampler(SamplerKind.RANDOM_A, tiny_node_space, 0, index=index),
            tiny_node_space, table, n, n_bins=6)
        # expected mass per rank bin under multiplicity weighting
        ranks = {c: table.rank_of(c) for c in index.class_ids}
        edges = [lo for lo, _, _ in nas.rank_bins] + [nas.rank_bins[-1][1]]
        exp_nas = np.zeros(len(nas.rank_bins))
        exp_ra = np.zeros(len(ra.rank_bins))
        for c in index.class_ids:
            b = min(np.searchsorted(edges, ranks[c], side="right") - 1, len(exp_nas) - 1)
            exp_nas[b] += index.multiplicity(c) / index.n_encodings
            exp_ra[b] += 1.0 / index.n_classes
        obs_nas = np.array([c for _, _, c in nas.rank_bins]) / n
        obs_ra = np.array([c for _, _, c in ra.rank_bins]) / n
        assert np.abs(obs_nas - exp_nas).sum() < 0.1
        assert np.abs(obs_ra - exp_ra).sum() < 0.1
