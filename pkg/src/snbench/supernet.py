"""Shared-weight backbone construction and per-step subnet activation.

A super-net owns one parameter bank per (cell position, op slot) and
never copies weights per subnet: activating an encoding resolves views
into the banks (channel slices, kernel projections) inside the compute
graph so gradients land back in the shared storage.

The forward engine is written once against a small resolver interface
and reused verbatim by the stand-alone network builder, which is what
makes weight-transplant equivalence exact rather than approximate.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from snbench import nnops
from snbench.autodiff import ComputeGraph, RunningStats, Tensor
from snbench.errors import (
    Disconnected,
    IncompatibleMapping,
    ShapeMismatch,
    TooManyChannels,
    UnknownEdge,
)
from snbench.space import ArchEncoding, CellGraph, ChannelPolicy, Family, SearchSpaceDef, prune_to_cell

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

CONV_OPS = ("conv3x3", "conv1x1")
KNOWN_OPS = {"conv3x3", "conv1x1", "avgpool3x3", "skip", "zeroize"}


class Placement(str, Enum):
    ON_NODE = "on_node"
    ON_EDGE = "on_edge"


class ChannelStrategy(str, Enum):
    FIXED_CHUNK = "fixed_chunk"
    SHUFFLE = "shuffle"
    INTERPOLATE = "interpolate"
    DISABLED = "disabled"


@dataclass(frozen=True)
class MappingConfig:
    """All knobs of the encoding-to-network translation."""

    op_placement: Placement
    dynamic_channel_strategy: ChannelStrategy
    wsbn: bool = False
    ofa_kernel: bool = False
    path_dropout_p: float = 0.0
    global_dropout_p: float = 0.0
    layers: int = 1
    init_channels: int = 8
    bn_track: bool = False
    bn_affine: bool = True

    def __post_init__(self):
        if not 0 <= self.path_dropout_p < 1 or not 0 <= self.global_dropout_p < 1:
            raise IncompatibleMapping("dropout probabilities must be in [0, 1)")
        if self.layers < 1 or self.init_channels < 1:
            raise IncompatibleMapping("layers and init_channels must be >= 1")

    def to_json(self) -> dict:
        return {
            "op_placement": self.op_placement.value,
            "dynamic_channel_strategy": self.dynamic_channel_strategy.value,
            "wsbn": self.wsbn,
            "ofa_kernel": self.ofa_kernel,
            "path_dropout_p": self.path_dropout_p,
            "global_dropout_p": self.global_dropout_p,
            "layers": self.layers,
            "init_channels": self.init_channels,
            "bn_track": self.bn_track,
            "bn_affine": self.bn_affine,
        }

    @staticmethod
    def from_json(obj: dict) -> "MappingConfig":
        obj = dict(obj)
        obj["op_placement"] = Placement(obj["op_placement"])
        obj["dynamic_channel_strategy"] = ChannelStrategy(obj["dynamic_channel_strategy"])
        return MappingConfig(**obj)


def default_mapping(space: SearchSpaceDef, **overrides) -> MappingConfig:
    if space.family is Family.NODE_OP_CONCAT:
        strategy = (
            ChannelStrategy.DISABLED
            if space.channel_policy is ChannelPolicy.FIXED
            else ChannelStrategy.FIXED_CHUNK
        )
        base = MappingConfig(op_placement=Placement.ON_NODE, dynamic_channel_strategy=strategy)
    else:
        base = MappingConfig(op_placement=Placement.ON_EDGE, dynamic_channel_strategy=ChannelStrategy.DISABLED)
    return replace(base, **overrides) if overrides else base


def validate_mapping(space: SearchSpaceDef, mapping: MappingConfig) -> None:
    unknown = set(space.op_vocab) - KNOWN_OPS
    if unknown:
        raise IncompatibleMapping(f"unsupported ops: {sorted(unknown)}")
    if space.family is Family.NODE_OP_CONCAT:
        if mapping.op_placement is Placement.ON_EDGE:
            raise IncompatibleMapping(
                "node-op cells merge before applying the op; per-edge weights have no equivalent"
            )
        if mapping.wsbn:
            raise IncompatibleMapping(
                "per-incoming-edge normalization needs per-edge op application; "
                "node-op cells apply the op after the merge"
            )
        if space.channel_policy is ChannelPolicy.DYNAMIC:
            if mapping.dynamic_channel_strategy is ChannelStrategy.DISABLED:
                raise IncompatibleMapping("dynamic-channel spaces need a slicing strategy")
        elif mapping.dynamic_channel_strategy is not ChannelStrategy.DISABLED:
            raise IncompatibleMapping("fixed-channel spaces must disable channel slicing")
    else:
        if mapping.dynamic_channel_strategy is not ChannelStrategy.DISABLED:
            raise IncompatibleMapping("channel slicing applies only to dynamic concat spaces")
    if mapping.bn_track and mapping.dynamic_channel_strategy in (
        ChannelStrategy.SHUFFLE,
        ChannelStrategy.INTERPOLATE,
    ):
        raise IncompatibleMapping(
            "tracked statistics cannot be scattered through shuffled or interpolated channels"
        )
    if mapping.ofa_kernel and not {"conv1x1", "conv3x3"} <= set(space.op_vocab):
        raise IncompatibleMapping("kernel projection needs both conv1x1 and conv3x3 in the vocabulary")


# ---------------------------------------------------------------------------
# Channel arithmetic


def required_channels(space: SearchSpaceDef, enc: ArchEncoding, c_out: int) -> int:
    """Channels per intermediate node so the output concat totals ~c_out."""
    cell = prune_to_cell(space, enc)
    return c_out // cell.output_in_degree()


def interpolation_matrix(c_max: int, c_target: int) -> np.ndarray:
    """Window-averaged linear resampling along the channel axis.

    Target channel j averages a window of ceil(c_max/c_target)
    consecutive source channels starting at floor(j*c_max/c_target);
    c_target == c_max reduces to the identity.
    """
    window = -(-c_max // c_target)
    m = np.zeros((c_target, c_max), dtype=np.float64)
    for j in range(c_target):
        start = min(j * c_max // c_target, c_max - window)
        m[j, start : start + window] = 1.0 / window
    return m


def slice_channels(weight: np.ndarray, c_target: int, strategy: ChannelStrategy,
                   rng: np.random.Generator | None = None) -> np.ndarray:
    """Reduce the leading (output-channel) axis to ``c_target`` entries."""
    c_max = weight.shape[0]
    if c_target > c_max:
        raise TooManyChannels(f"requested {c_target} channels from a {c_max}-wide bank")
    if strategy is ChannelStrategy.DISABLED:
        raise IncompatibleMapping("slicing is disabled for this space")
    if strategy is ChannelStrategy.FIXED_CHUNK:
        return weight[:c_target].copy()
    if strategy is ChannelStrategy.SHUFFLE:
        if rng is None:
            raise IncompatibleMapping("shuffle slicing needs an RNG stream")
        idx = rng.permutation(c_max)[:c_target]
        return weight[idx].copy()
    return np.tensordot(interpolation_matrix(c_max, c_target), weight, axes=(1, 0))


@dataclass(frozen=True)
class ChannelSel:
    """Resolved output-channel selection for one cell activation."""

    kind: str  # full | chunk | perm | mix
    c: int
    idx: np.ndarray | None = None
    matrix: np.ndarray | None = None

    def apply(self, g: ComputeGraph, w: Tensor) -> Tensor:
        if self.kind == "full":
            return nnops.skip(g, w)
        if self.kind == "chunk":
            return nnops.take_out_channels(g, w, np.arange(self.c))
        if self.kind == "perm":
            return nnops.take_out_channels(g, w, self.idx)
        return nnops.mix_out_channels(g, w, self.matrix)


def make_channel_sel(strategy: ChannelStrategy, c_max: int, c_target: int,
                     rng: np.random.Generator | None) -> ChannelSel:
    if c_target > c_max:
        raise TooManyChannels(f"requested {c_target} channels from a {c_max}-wide bank")
    if c_target == c_max and strategy is not ChannelStrategy.SHUFFLE:
        return ChannelSel("full", c_target)
    if strategy is ChannelStrategy.FIXED_CHUNK:
        return ChannelSel("chunk", c_target)
    if strategy is ChannelStrategy.SHUFFLE:
        if rng is None:
            raise IncompatibleMapping("shuffle slicing needs an RNG stream")
        return ChannelSel("perm", c_target, idx=rng.permutation(c_max)[:c_target])
    if strategy is ChannelStrategy.INTERPOLATE:
        return ChannelSel("mix", c_target, matrix=interpolation_matrix(c_max, c_target))
    return ChannelSel("full", c_target)


class _RunningView:
    """Write-through slice of a bank's running statistics."""

    __slots__ = ("mean", "var")

    def __init__(self, stats: RunningStats, c: int):
        self.mean = stats.mean[:c]
        self.var = stats.var[:c]


# ---------------------------------------------------------------------------
# Dropout


def draw_path_masks(cell: CellGraph, p: float, rng: np.random.Generator) -> dict[tuple[int, int], float]:
    """Inverted-dropout factor per active edge.

    Every node keeps at least one incoming edge: an all-dropped mask for
    a node is redrawn.
    """
    masks: dict[tuple[int, int], float] = {}
    if p <= 0:
        return {e: 1.0 for e in cell.edges}
    keep_scale = 1.0 / (1.0 - p)
    for v in cell.nodes:
        incoming = cell.in_edges(v)
        if not incoming:
            continue
        while True:
            keep = rng.random(len(incoming)) >= p
            if keep.any():
                break
        for e, kept in zip(incoming, keep):
            masks[e] = keep_scale if kept else 0.0
    return masks


def apply_global_dropout(g: ComputeGraph, features: Tensor, p: float,
                         rng: np.random.Generator) -> Tensor:
    """Elementwise inverted dropout; identity in eval mode or at p=0."""
    if p <= 0 or not g.training:
        return features
    mask = (rng.random(features.shape) >= p) / (1.0 - p)
    return nnops.scale(g, features, mask)


# ---------------------------------------------------------------------------
# Census


def op_slot_count(space: SearchSpaceDef, mapping: MappingConfig) -> int:
    """Shared op slots per cell: positions times vocabulary size."""
    o = len(space.op_vocab)
    if space.family is Family.NODE_OP_CONCAT:
        positions = space.n_intermediate
    elif mapping.op_placement is Placement.ON_EDGE:
        positions = len(space.possible_edges())
    else:
        positions = space.n_intermediate + 1
    return positions * o


# ---------------------------------------------------------------------------
# Parameter banks


class _ParamStore:
    """Named tensors plus running-stat buffers with deterministic init."""

    def __init__(self, seed: int):
        self.rng = np.random.default_rng(np.random.SeedSequence(seed))
        self.params: dict[str, Tensor] = {}
        self.running: dict[str, RunningStats] = {}

    def conv(self, name: str, c_out: int, c_in: int, k: int) -> None:
        std = np.sqrt(2.0 / (c_in * k * k))
        self.params[name] = Tensor(self.rng.standard_normal((c_out, c_in, k, k)) * std)

    def linear(self, name: str, c_out: int, c_in: int) -> None:
        std = np.sqrt(2.0 / c_in)
        self.params[f"{name}.w"] = Tensor(self.rng.standard_normal((c_out, c_in)) * std)
        self.params[f"{name}.b"] = Tensor(np.zeros(c_out))

    def bn(self, name: str, c: int, affine: bool) -> None:
        if affine:
            self.params[f"{name}.gamma"] = Tensor(np.ones(c))
            self.params[f"{name}.beta"] = Tensor(np.zeros(c))
        self.running[name] = RunningStats(c)

    def identity(self, name: str, c: int) -> None:
        self.params[name] = Tensor(np.eye(c))


def _cell_positions(layers: int) -> list[tuple[str, int]]:
    """(position name, stage) pairs in macro order."""
    out = []
    for stage in (0, 1):
        for i in range(layers):
            out.append((f"s{stage}.c{i}", stage))
    return out


class SuperNet:
    """Shared-weight backbone for one search space and mapping."""

    def __init__(self, space: SearchSpaceDef, mapping: MappingConfig,
                 num_classes: int, seed: int = 0):
        validate_mapping(space, mapping)
        self.space = space
        self.mapping = mapping
        self.num_classes = num_classes
        self.seed = seed
        self.stage_widths = (mapping.init_channels, 2 * mapping.init_channels)
        store = _ParamStore(seed)
        affine = mapping.bn_affine
        store.conv("stem.w", self.stage_widths[0], 3, 3)
        store.bn("stem.bn", self.stage_widths[0], affine)
        for pos, stage in _cell_positions(mapping.layers):
            self._allocate_cell(store, pos, self.stage_widths[stage])
        store.conv("reduce.w", self.stage_widths[1], self.stage_widths[0], 1)
        store.bn("reduce.bn", self.stage_widths[1], affine)
        store.linear("head", num_classes, self.stage_widths[1])
        self.params = store.params
        self.running = store.running

    # -- bank layout ------------------------------------------------------

    def bank_out_width(self, stage: int) -> int:
        """Output-channel capacity of the cell op banks in a stage."""
        w = self.stage_widths[stage]
        if (
            self.space.family is Family.NODE_OP_CONCAT
            and self.space.channel_policy is ChannelPolicy.FIXED
            and self.space.output_in_degree is not None
        ):
            return w // self.space.output_in_degree
        return w

    def _conv_kinds(self) -> list[str]:
        return [op for op in self.space.op_vocab if op in CONV_OPS]

    def _stored_kinds(self) -> list[str]:
        kinds = self._conv_kinds()
        if self.mapping.ofa_kernel:
            return [k for k in kinds if k != "conv1x1"]
        return kinds

    def _allocate_cell(self, store: _ParamStore, pos: str, width: int) -> None:
        space, mapping = self.space, self.mapping
        affine = mapping.bn_affine
        stage = 0 if pos.startswith("s0") else 1
        c_bank = self.bank_out_width(stage)
        kinds = self._stored_kinds()
        if space.family is Family.NODE_OP_CONCAT:
            store.conv(f"{pos}.proj.w", c_bank, width, 1)
            store.bn(f"{pos}.proj.bn", c_bank, affine)
            for v in space.intermediate_nodes:
                for kind in kinds:
                    store.conv(f"{pos}.node{v}.{kind}.w", c_bank, c_bank, _ksize(kind))
                store.bn(f"{pos}.node{v}.bn", c_bank, affine)
        else:
            if mapping.op_placement is Placement.ON_EDGE:
                for u, v in space.possible_edges():
                    for kind in kinds:
                        store.conv(f"{pos}.edge{u}_{v}.{kind}.w", width, width, _ksize(kind))
            else:
                for v in range(1, space.n_nodes):
                    for kind in kinds:
                        store.conv(f"{pos}.node{v}.{kind}.w", width, width, _ksize(kind))
            for v in range(1, space.n_nodes):
                if mapping.wsbn:
                    for u, _ in [e for e in space.possible_edges() if e[1] == v]:
                        store.bn(f"{pos}.bn.n{v}.e{u}", width, affine)
                else:
                    store.bn(f"{pos}.bn.n{v}", width, affine)
        if mapping.ofa_kernel:
            store.identity(f"{pos}.ofa.w", c_bank)

    # -- introspection -----------------------------------------------------

    def param_census(self) -> dict[str, int]:
        """Parameter counts grouped by macro component / cell position."""
        census: dict[str, int] = {}
        for name, t in self.params.items():
            parts = name.split(".")
            group = ".".join(parts[:2]) if parts[0].startswith("s") else parts[0]
            census[group] = census.get(group, 0) + t.size
        return census

    def total_params(self) -> int:
        return sum(t.size for t in self.params.values())

    def bn_param_count(self) -> int:
        return sum(t.size for name, t in self.params.items() if ".bn" in name or name.endswith(("gamma", "beta")))

    def bn_set_name(self, pos: str, node: int, source: int | None) -> str:
        """Name of the normalization set used by ops entering ``node``."""
        if self.space.family is Family.NODE_OP_CONCAT:
            return f"{pos}.node{node}.bn"
        if self.mapping.wsbn:
            if source is None or (source, node) not in self.space.possible_edges():
                raise UnknownEdge(f"no edge into node {node} from {source}")
            return f"{pos}.bn.n{node}.e{source}"
        return f"{pos}.bn.n{node}"

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {name: t.data for name, t in self.params.items()}
        for name, stats in self.running.items():
            out[f"{name}.running_mean"] = stats.mean
            out[f"{name}.running_var"] = stats.var
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self.params.items():
            t.data = arrays[name].copy()
        for name, stats in self.running.items():
            stats.mean = arrays[f"{name}.running_mean"].copy()
            stats.var = arrays[f"{name}.running_var"].copy()


def _ksize(kind: str) -> int:
    return 3 if kind == "conv3x3" else 1


def wsbn_select(supernet: SuperNet, pos: str, node: int, source_edge: int | None):
    """(gamma, beta, running) set for ops entering ``node`` via ``source_edge``.

    With wsbn disabled the node's single shared set is returned no
    matter the source.
    """
    name = supernet.bn_set_name(pos, node, source_edge if supernet.mapping.wsbn else None)
    gamma = supernet.params.get(f"{name}.gamma")
    beta = supernet.params.get(f"{name}.beta")
    return gamma, beta, supernet.running[name]


def build_supernet(space: SearchSpaceDef, mapping: MappingConfig, num_classes: int,
                   seed: int = 0) -> SuperNet:
    return SuperNet(space, mapping, num_classes, seed)


# ---------------------------------------------------------------------------
# Subnet activation and the shared forward engine


@dataclass
class SubnetView:
    """A super-net with one encoding's sub-path selected."""

    supernet: SuperNet
    encoding: ArchEncoding
    cell: CellGraph
    shuffle_rng: np.random.Generator | None = None
    path_masks: dict[tuple[int, int], float] | None = None

    def forward(self, g: ComputeGraph, x, rng: np.random.Generator | None = None) -> Tensor:
        g.params.update(self.supernet.params)
        return _macro_forward(g, _BankResolver(self, g), x, rng)

    def resolved_arrays(self) -> dict[str, np.ndarray]:
        """Concrete per-position weights after slicing/projection.

        Keyed exactly like a stand-alone network's parameters, so the
        result can be transplanted.
        """
        g = ComputeGraph("eval")
        res = _BankResolver(self, g)
        out: dict[str, np.ndarray] = {}
        sn = self.supernet
        out["stem.w"] = sn.params["stem.w"].data.copy()
        out["reduce.w"] = sn.params["reduce.w"].data.copy()
        out["head.w"] = sn.params["head.w"].data.copy()
        out["head.b"] = sn.params["head.b"].data.copy()
        for bn in ("stem.bn", "reduce.bn"):
            for part in ("gamma", "beta"):
                if f"{bn}.{part}" in sn.params:
                    out[f"{bn}.{part}"] = sn.params[f"{bn}.{part}"].data.copy()
        for pos, stage in _cell_positions(sn.mapping.layers):
            for name, tensor in res.cell_weights(pos, stage).items():
                if name.endswith(".__running__"):
                    continue
                out[name] = tensor.data.copy()
        return out


def activate_subnet(supernet: SuperNet, enc: ArchEncoding,
                    rng: np.random.Generator | None = None) -> SubnetView:
    """Resolve an encoding against the banks; raises Disconnected for
    encodings with no input-to-output path."""
    cell = prune_to_cell(supernet.space, enc)
    if (
        supernet.space.output_in_degree is not None
        and cell.output_in_degree() != supernet.space.output_in_degree
    ):
        raise Disconnected(
            f"encoding has output in-degree {cell.output_in_degree()}, "
            f"space requires {supernet.space.output_in_degree}"
        )
    if supernet.mapping.dynamic_channel_strategy is ChannelStrategy.SHUFFLE and rng is None:
        raise IncompatibleMapping("shuffle slicing needs an RNG stream at activation")
    return SubnetView(supernet, enc, cell, shuffle_rng=rng)


def apply_path_dropout(view: SubnetView, p: float, rng: np.random.Generator) -> SubnetView:
    """View with a fixed edge mask drawn for this step."""
    return replace(view, path_masks=draw_path_masks(view.cell, p, rng))


class _BankResolver:
    """Resolves bank tensors (with slicing ops) for one activation."""

    def __init__(self, view: SubnetView, g: ComputeGraph):
        self.view = view
        self.g = g
        self.sn = view.supernet
        self._cache: dict[str, Tensor] = {}

    def _sel(self, stage: int, c_mid: int) -> ChannelSel:
        strategy = self.sn.mapping.dynamic_channel_strategy
        c_bank = self.sn.bank_out_width(stage)
        if strategy is ChannelStrategy.DISABLED:
            if c_mid != c_bank:
                raise ShapeMismatch("fixed-channel bank width does not match the cell")
            return ChannelSel("full", c_mid)
        return make_channel_sel(strategy, c_bank, c_mid, self.view.shuffle_rng)

    def cell_weights(self, pos: str, stage: int) -> dict[str, Tensor]:
        """All resolved tensors this activation uses in one cell."""
        key = f"resolved:{pos}"
        if key in self._cache:
            return self._cache[key]  # type: ignore[return-value]
        sn, cell, g = self.sn, self.view.cell, self.g
        width = sn.stage_widths[stage]
        out: dict[str, Tensor] = {}
        if sn.space.family is Family.NODE_OP_CONCAT:
            c_mid = width // cell.output_in_degree()
            sel = self._sel(stage, c_mid)
            out[f"{pos}.proj.w"] = sel.apply(g, sn.params[f"{pos}.proj.w"])
            self._bn_into(out, f"{pos}.proj.bn", sel)
            for v in cell.intermediate_nodes:
                kind = cell.node_op(v)
                if kind in CONV_OPS:
                    w = self._op_bank(pos, f"node{v}", kind)
                    w = sel.apply(g, w)
                    out[f"{pos}.node{v}.{kind}.w"] = nnops.slice_in_channels(g, w, c_mid)
                    self._bn_into(out, f"{pos}.node{v}.bn", sel)
        else:
            for u, v in cell.edges:
                kind = cell.edge_op((u, v))
                if kind not in CONV_OPS:
                    continue
                slot = f"edge{u}_{v}" if sn.mapping.op_placement is Placement.ON_EDGE else f"node{v}"
                w = self._op_bank(pos, slot, kind)
                out[f"{pos}.edge{u}_{v}.{kind}.w"] = nnops.skip(g, w)
                bn_name = sn.bn_set_name(pos, v, u)
                self._bn_into(out, bn_name, ChannelSel("full", width))
        self._cache[key] = out  # type: ignore[assignment]
        return out

    def _op_bank(self, pos: str, slot: str, kind: str) -> Tensor:
        sn, g = self.sn, self.g
        if sn.mapping.ofa_kernel and kind == "conv1x1":
            bank = sn.params[f"{pos}.{slot}.conv3x3.w"]
            proj = sn.params[f"{pos}.ofa.w"]
            return nnops.ofa_project(g, bank, proj, 1)
        return sn.params[f"{pos}.{slot}.{kind}.w"]

    def _bn_into(self, out: dict[str, Tensor], name: str, sel: ChannelSel) -> None:
        sn, g = self.sn, self.g
        if sn.mapping.bn_affine:
            out[f"{name}.gamma"] = sel.apply(g, sn.params[f"{name}.gamma"])
            out[f"{name}.beta"] = sel.apply(g, sn.params[f"{name}.beta"])
        out[f"{name}.__running__"] = self._running_view(name, sel)  # type: ignore[assignment]

    def _running_view(self, name: str, sel: ChannelSel):
        stats = self.sn.running[name]
        if sel.kind == "full":
            return stats
        if sel.kind == "chunk":
            return _RunningView(stats, sel.c)
        if self.sn.mapping.bn_track:
            raise IncompatibleMapping("tracked statistics with scattered channel selection")
        return _RunningView(stats, sel.c)

    # engine-facing API ----------------------------------------------------

    def macro(self) -> "_MacroHandles":
        sn = self.sn
        return _MacroHandles(
            space=sn.space,
            cell=self.view.cell,
            mapping=sn.mapping,
            stage_widths=sn.stage_widths,
            num_classes=sn.num_classes,
            stem_w=sn.params["stem.w"],
            reduce_w=sn.params["reduce.w"],
            head_w=sn.params["head.w"],
            head_b=sn.params["head.b"],
            stem_bn=self._macro_bn("stem.bn"),
            reduce_bn=self._macro_bn("reduce.bn"),
            path_masks=self.view.path_masks,
        )

    def _macro_bn(self, name: str):
        sn = self.sn
        gamma = sn.params.get(f"{name}.gamma")
        beta = sn.params.get(f"{name}.beta")
        return gamma, beta, sn.running[name]


@dataclass
class _MacroHandles:
    space: SearchSpaceDef
    cell: CellGraph
    mapping: MappingConfig
    stage_widths: tuple[int, int]
    num_classes: int
    stem_w: Tensor
    reduce_w: Tensor
    head_w: Tensor
    head_b: Tensor
    stem_bn: tuple
    reduce_bn: tuple
    path_masks: dict | None


def _apply_bn(g: ComputeGraph, x: Tensor, gamma, beta, running, mapping: MappingConfig) -> Tensor:
    return nnops.batch_norm(
        g, x, gamma, beta, running,
        track=mapping.bn_track, affine=mapping.bn_affine,
        eps=BN_EPS, momentum=BN_MOMENTUM,
    )


def _macro_forward(g: ComputeGraph, res, x, rng: np.random.Generator | None) -> Tensor:
    """Stem, two cell stages with one reduction, pooled classifier."""
    m = res.macro()
    mapping = m.mapping
    t = x if isinstance(x, Tensor) else Tensor(x)
    t = nnops.conv2d(g, t, m.stem_w, stride=1, padding=1)
    t = _apply_bn(g, t, *m.stem_bn, mapping)
    t = nnops.relu(g, t)
    masks = m.path_masks
    if masks is None and g.training and mapping.path_dropout_p > 0:
        if rng is None:
            raise IncompatibleMapping("path dropout needs an RNG stream in train mode")
        masks = draw_path_masks(m.cell, mapping.path_dropout_p, rng)
    for pos, stage in _cell_positions(mapping.layers):
        if pos == "s1.c0":
            t = nnops.conv2d(g, t, m.reduce_w, stride=2, padding=0)
            t = _apply_bn(g, t, *m.reduce_bn, mapping)
            t = nnops.relu(g, t)
        t = _cell_forward(g, res, m, pos, stage, t, masks)
    if mapping.global_dropout_p > 0 and g.training:
        if rng is None:
            raise IncompatibleMapping("global dropout needs an RNG stream in train mode")
        t = apply_global_dropout(g, t, mapping.global_dropout_p, rng)
    t = nnops.global_avg_pool(g, t)
    return nnops.linear(g, t, m.head_w, m.head_b)


def _cell_forward(g: ComputeGraph, res, m: _MacroHandles, pos: str, stage: int,
                  x: Tensor, masks: dict | None) -> Tensor:
    cell = m.cell
    weights = res.cell_weights(pos, stage)
    width = m.stage_widths[stage]
    mapping = m.mapping

    def bn_apply(t: Tensor, name: str) -> Tensor:
        gamma = weights.get(f"{name}.gamma")
        beta = weights.get(f"{name}.beta")
        running = weights[f"{name}.__running__"]
        return _apply_bn(g, t, gamma, beta, running, mapping)

    def masked(t: Tensor, edge: tuple[int, int]) -> Tensor:
        if masks is None:
            return t
        f = masks.get(edge, 1.0)
        return t if f == 1.0 else nnops.scale(g, t, f)

    if m.space.family is Family.NODE_OP_CONCAT:
        proj = nnops.conv2d(g, x, weights[f"{pos}.proj.w"], stride=1, padding=0)
        proj = bn_apply(proj, f"{pos}.proj.bn")
        proj = nnops.relu(g, proj)
        values: dict[int, Tensor] = {cell.input_node: proj}
        for v in cell.intermediate_nodes:
            contribs = [masked(values[u], (u, v)) for u, _ in cell.in_edges(v)]
            merged = nnops.add_n(g, contribs)
            kind = cell.node_op(v)
            if kind in CONV_OPS:
                t = nnops.conv2d(g, merged, weights[f"{pos}.node{v}.{kind}.w"],
                                 stride=1, padding=1 if kind == "conv3x3" else 0)
                t = bn_apply(t, f"{pos}.node{v}.bn")
                t = nnops.relu(g, t)
            elif kind == "avgpool3x3":
                t = nnops.avgpool3x3(g, merged)
            elif kind == "skip":
                t = nnops.skip(g, merged)
            else:
                t = nnops.zeroize(g, merged)
            values[v] = t
        out_parts = [
            masked(values[u], (u, cell.output_node))
            for u, _ in cell.in_edges(cell.output_node)
        ]
        merged = nnops.concat_channels(g, out_parts)
        return nnops.pad_channels(g, merged, width)

    values = {cell.input_node: x}
    for v in cell.nodes[1:]:
        contribs = []
        for u, _ in cell.in_edges(v):
            kind = cell.edge_op((u, v))
            src = values[u]
            if kind in CONV_OPS:
                t = nnops.conv2d(g, src, weights[f"{pos}.edge{u}_{v}.{kind}.w"],
                                 stride=1, padding=1 if kind == "conv3x3" else 0)
                t = bn_apply(t, m_bn_name(m, pos, v, u))
                t = nnops.relu(g, t)
            elif kind == "avgpool3x3":
                t = nnops.avgpool3x3(g, src)
            elif kind == "skip":
                t = nnops.skip(g, src)
            else:
                t = nnops.zeroize(g, src)
            contribs.append(masked(t, (u, v)))
        values[v] = nnops.add_n(g, contribs)
    return values[cell.output_node]


def m_bn_name(m: _MacroHandles, pos: str, node: int, source: int) -> str:
    if m.mapping.wsbn:
        return f"{pos}.bn.n{node}.e{source}"
    return f"{pos}.bn.n{node}"
