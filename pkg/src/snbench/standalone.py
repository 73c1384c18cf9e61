"""Stand-alone network builder.

Translates one encoding into a self-contained network with private,
exactly-sized weights: the recipe used to produce ground-truth records
and the reference side of the weight-transplant equivalence check.  The
forward pass is the same engine the super-net views use, so a
transplanted stand-alone network reproduces a view's arithmetic
operation for operation.
"""

from __future__ import annotations

import numpy as np

from snbench.autodiff import ComputeGraph, Tensor
from snbench.space import ChannelPolicy, Family, SearchSpaceDef, ArchEncoding, prune_to_cell
from snbench.supernet import (
    CONV_OPS,
    MappingConfig,
    ChannelStrategy,
    Placement,
    _MacroHandles,
    _ParamStore,
    _cell_positions,
    _ksize,
    _macro_forward,
)


class StandaloneNet:
    """Private-weight network for a single architecture."""

    def __init__(self, space: SearchSpaceDef, enc: ArchEncoding, num_classes: int,
                 init_channels: int = 8, layers: int = 1, seed: int = 0,
                 bn_affine: bool = True, bn_track: bool = False,
                 wsbn: bool = False):
        self.space = space
        self.encoding = enc
        self.cell = prune_to_cell(space, enc)
        self.num_classes = num_classes
        self.wsbn = wsbn
        self.mapping = MappingConfig(
            op_placement=Placement.ON_NODE,
            dynamic_channel_strategy=ChannelStrategy.DISABLED,
            wsbn=wsbn,
            layers=layers,
            init_channels=init_channels,
            bn_track=bn_track,
            bn_affine=bn_affine,
        )
        self.stage_widths = (init_channels, 2 * init_channels)
        store = _ParamStore(seed)
        store.conv("stem.w", init_channels, 3, 3)
        store.bn("stem.bn", init_channels, bn_affine)
        for pos, stage in _cell_positions(layers):
            self._allocate_cell(store, pos, self.stage_widths[stage])
        store.conv("reduce.w", 2 * init_channels, init_channels, 1)
        store.bn("reduce.bn", 2 * init_channels, bn_affine)
        store.linear("head", num_classes, 2 * init_channels)
        self.params = store.params
        self.running = store.running

    def _allocate_cell(self, store: _ParamStore, pos: str, width: int) -> None:
        cell = self.cell
        affine = self.mapping.bn_affine
        if self.space.family is Family.NODE_OP_CONCAT:
            c_mid = width // cell.output_in_degree()
            store.conv(f"{pos}.proj.w", c_mid, width, 1)
            store.bn(f"{pos}.proj.bn", c_mid, affine)
            for v in cell.intermediate_nodes:
                kind = cell.node_op(v)
                if kind in CONV_OPS:
                    store.conv(f"{pos}.node{v}.{kind}.w", c_mid, c_mid, _ksize(kind))
                    store.bn(f"{pos}.node{v}.bn", c_mid, affine)
        else:
            for u, v in cell.edges:
                kind = cell.edge_op((u, v))
                if kind in CONV_OPS:
                    store.conv(f"{pos}.edge{u}_{v}.{kind}.w", width, width, _ksize(kind))
            for v in cell.nodes[1:]:
                kinds = [cell.edge_op(e) for e in cell.in_edges(v)]
                if not any(k in CONV_OPS for k in kinds):
                    continue
                if self.wsbn:
                    for u, _ in cell.in_edges(v):
                        if cell.edge_op((u, v)) in CONV_OPS:
                            store.bn(f"{pos}.bn.n{v}.e{u}", width, affine)
                else:
                    store.bn(f"{pos}.bn.n{v}", width, affine)

    # resolver interface shared with the super-net views -------------------

    def macro(self) -> _MacroHandles:
        def bn_handle(name):
            return (
                self.params.get(f"{name}.gamma"),
                self.params.get(f"{name}.beta"),
                self.running[name],
            )

        return _MacroHandles(
            space=self.space,
            cell=self.cell,
            mapping=self.mapping,
            stage_widths=self.stage_widths,
            num_classes=self.num_classes,
            stem_w=self.params["stem.w"],
            reduce_w=self.params["reduce.w"],
            head_w=self.params["head.w"],
            head_b=self.params["head.b"],
            stem_bn=bn_handle("stem.bn"),
            reduce_bn=bn_handle("reduce.bn"),
            path_masks=None,
        )

    def cell_weights(self, pos: str, stage: int) -> dict:
        out: dict = {}
        prefix = f"{pos}."
        for name, t in self.params.items():
            if name.startswith(prefix):
                out[name] = t
        for name, stats in self.running.items():
            if name.startswith(prefix):
                out[f"{name}.__running__"] = stats
        return out

    def forward(self, g: ComputeGraph, x, rng: np.random.Generator | None = None) -> Tensor:
        g.params.update(self.params)
        return _macro_forward(g, self, x, rng)

    def total_params(self) -> int:
        return sum(t.size for t in self.params.values())

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """Overwrite parameters with transplanted (resolved) weights."""
        for name, t in self.params.items():
            src = arrays[name]
            if src.shape != t.data.shape:
                raise ValueError(f"shape mismatch for {name}: {src.shape} vs {t.data.shape}")
            t.data = np.asarray(src, dtype=np.float64).copy()
