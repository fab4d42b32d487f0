"""Lower a genotype to a concrete layer graph with shapes, MACs and params."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

from .design_space import CellKind, CellSpec, Genotype, OpKind, genotype_key


class LayerKind(enum.Enum):
    CONV = "Conv"
    DWCONV = "DWConv"
    MAXPOOL = "MaxPool"
    AVGPOOL = "AvgPool"
    GLOBALAVGPOOL = "GlobalAvgPool"
    LINEAR = "Linear"
    ADD = "Add"


class LoweringError(ValueError):
    pass


@dataclass(frozen=True)
class TensorShape:
    height: int
    width: int
    channels: int

    def __post_init__(self):
        if min(self.height, self.width, self.channels) < 1:
            raise LoweringError(f"degenerate tensor shape {self}")

    @property
    def elements(self) -> int:
        return self.height * self.width * self.channels


@dataclass(frozen=True)
class LayerWorkload:
    kind: LayerKind
    in_shape: TensorShape
    out_shape: TensorShape
    kernel: int = 1
    stride: int = 1
    preds: tuple[int, ...] = ()
    op: OpKind | None = None
    cell: int | None = None
    cell_kind: CellKind | None = None

    @property
    def macs(self) -> int:
        o = self.out_shape
        k2 = self.kernel * self.kernel
        if self.kind is LayerKind.CONV:
            return o.height * o.width * o.channels * self.in_shape.channels * k2
        if self.kind is LayerKind.DWCONV:
            return o.height * o.width * o.channels * k2
        if self.kind is LayerKind.LINEAR:
            return self.in_shape.channels * o.channels
        return 0

    @property
    def params(self) -> int:
        k2 = self.kernel * self.kernel
        if self.kind is LayerKind.CONV:
            return self.out_shape.channels * self.in_shape.channels * k2
        if self.kind is LayerKind.DWCONV:
            return self.in_shape.channels * k2
        if self.kind is LayerKind.LINEAR:
            return self.in_shape.channels * self.out_shape.channels
        return 0

    @property
    def input_elements(self) -> int:
        n = self.in_shape.elements
        return 2 * n if self.kind is LayerKind.ADD else n

    def signature(self) -> tuple:
        """Hashable description of everything the cost model depends on."""
        i, o = self.in_shape, self.out_shape
        return (self.kind.value, i.height, i.width, i.channels, o.height, o.width, o.channels, self.kernel, self.stride)


@dataclass(frozen=True)
class LayerGraph:
    layers: tuple[LayerWorkload, ...]
    source: str = ""
    total_macs: int = field(init=False)
    total_params: int = field(init=False)
    depth: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "total_macs", sum(l.macs for l in self.layers))
        object.__setattr__(self, "total_params", sum(l.params for l in self.layers))
        longest = []
        for idx, layer in enumerate(self.layers):
            if any(p >= idx for p in layer.preds):
                raise LoweringError(f"layer {idx} has a non-preceding predecessor")
            w = 0 if layer.kind is LayerKind.ADD else 1
            longest.append(w + max((longest[p] for p in layer.preds), default=0))
        object.__setattr__(self, "depth", max(longest, default=0))

    def __len__(self):
        return len(self.layers)


@dataclass(frozen=True)
class MacroConfig:
    input_shape: TensorShape = TensorShape(32, 32, 3)
    stem_channels: int = 36
    num_classes: int = 10
    # Explicit cell indices of reduction cells; None = evenly interleaved.
    reduction_positions: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.stem_channels < 1:
            raise ValueError("stem_channels must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")


def cell_sequence(n_cells: int, r_cells: int, positions: Sequence[int] | None = None) -> list[CellKind]:
    """Stacking order of cells.

    By default the normal cells are split into ``r_cells`` near-equal groups
    (earlier groups take the remainder), each followed by a reduction cell:
    4 normal + 2 reduction gives N N R N N R.
    """
    total = n_cells + r_cells
    if positions is not None:
        pos = sorted(set(positions))
        if len(pos) != r_cells or pos[0] < 0 or pos[-1] >= total:
            raise ValueError(f"reduction positions {positions} invalid for {n_cells}+{r_cells} cells")
        return [CellKind.REDUCTION if i in pos else CellKind.NORMAL for i in range(total)]
    base, extra = divmod(n_cells, r_cells)
    seq = []
    for g in range(r_cells):
        seq += [CellKind.NORMAL] * (base + (1 if g < extra else 0))
        seq.append(CellKind.REDUCTION)
    return seq


class _Builder:
    def __init__(self):
        self.layers: list[LayerWorkload] = []

    def add(self, layer: LayerWorkload) -> int:
        self.layers.append(layer)
        return len(self.layers) - 1

    def shape(self, refs: tuple[int, ...]) -> TensorShape:
        # A ref tuple is a channel-concatenation of layer outputs.
        shapes = [self.layers[r].out_shape for r in refs]
        h, w = shapes[0].height, shapes[0].width
        if any((s.height, s.width) != (h, w) for s in shapes):
            raise AssertionError("concatenated tensors differ in spatial size")
        return TensorShape(h, w, sum(s.channels for s in shapes))


def _out_dim(d: int, stride: int) -> int:
    return -(-d // stride)


def _op_layer(op: OpKind, shape: TensorShape, stride: int, preds, cell, cell_kind) -> LayerWorkload:
    k = op.kernel
    if shape.height < k or shape.width < k:
        raise LoweringError(f"{op.name} kernel {k} exceeds {shape.height}x{shape.width} feature map")
    out = TensorShape(_out_dim(shape.height, stride), _out_dim(shape.width, stride), shape.channels)
    kind = {
        OpKind.CONV3X3: LayerKind.CONV,
        OpKind.CONV5X5: LayerKind.CONV,
        OpKind.DWCONV3X3: LayerKind.DWCONV,
        OpKind.DWCONV5X5: LayerKind.DWCONV,
        OpKind.MAXPOOL: LayerKind.MAXPOOL,
        OpKind.AVGPOOL: LayerKind.AVGPOOL,
    }[op]
    return LayerWorkload(kind, shape, out, k, stride, tuple(preds), op, cell, cell_kind)


def _project(b: _Builder, refs: tuple[int, ...], target: TensorShape, cell: int) -> tuple[int, ...]:
    """1x1 conv bringing a cell input to the node resolution and width."""
    shape = b.shape(refs)
    if shape == target:
        return refs
    if shape.height == target.height:
        stride = 1
    elif shape.height == 2 * target.height:
        stride = 2
    else:
        raise AssertionError(f"cannot project {shape} onto {target}")
    layer = LayerWorkload(LayerKind.CONV, shape, target, 1, stride, refs, None, cell, None)
    return (b.add(layer),)


def _lower_cell(b: _Builder, spec: CellSpec, s0, s1, channels: int, cell: int) -> tuple[int, ...]:
    reduce = spec.kind is CellKind.REDUCTION
    h1 = b.shape(s1)
    base = TensorShape(h1.height, h1.width, channels)
    states = [_project(b, s0, base, cell), _project(b, s1, base, cell)]
    node_shape = TensorShape(_out_dim(base.height, 2), _out_dim(base.width, 2), channels) if reduce else base
    for k, node in enumerate(spec.nodes):
        branch = []
        for src, op in ((node.in1, node.op1), (node.in2, node.op2)):
            stride = 2 if reduce and src < 2 else 1
            layer = _op_layer(op, b.shape(states[src]), stride, states[src], cell, spec.kind)
            branch.append(b.add(layer))
        shapes = {b.layers[i].out_shape for i in branch}
        if shapes != {node_shape}:
            raise AssertionError(f"node {k + 2}: add of mismatched shapes {shapes}")
        add = LayerWorkload(LayerKind.ADD, node_shape, node_shape, 1, 1, tuple(branch), None, cell, spec.kind)
        states.append((b.add(add),))
    return tuple(states[i][0] for i in spec.loose_ends())


def derive_network(g: Genotype, macro: MacroConfig = MacroConfig()) -> LayerGraph:
    """Expand ``g`` into an ordered layer list.

    Node channels start at ``stem_channels`` and double at every reduction
    cell; a cell's output is the concatenation of its loose-end nodes.
    """
    inp = macro.input_shape
    scale = 2 ** g.r_cells
    if inp.height % scale or inp.width % scale:
        raise LoweringError(f"input {inp.height}x{inp.width} not divisible by 2^{g.r_cells}")
    b = _Builder()
    stem_out = TensorShape(inp.height, inp.width, macro.stem_channels)
    if inp.height < 3 or inp.width < 3:
        raise LoweringError("input smaller than the stem kernel")
    stem = b.add(LayerWorkload(LayerKind.CONV, inp, stem_out, 3, 1))
    s0 = s1 = (stem,)
    channels = macro.stem_channels
    for idx, kind in enumerate(cell_sequence(g.n_cells, g.r_cells, macro.reduction_positions)):
        if kind is CellKind.REDUCTION:
            channels *= 2
        spec = g.reduction if kind is CellKind.REDUCTION else g.normal
        out = _lower_cell(b, spec, s0, s1, channels, idx)
        s0, s1 = s1, out
    last = b.shape(s1)
    gap = b.add(LayerWorkload(LayerKind.GLOBALAVGPOOL, last, TensorShape(1, 1, last.channels), last.height, last.height, s1))
    b.add(LayerWorkload(LayerKind.LINEAR, TensorShape(1, 1, last.channels), TensorShape(1, 1, macro.num_classes), 1, 1, (gap,)))
    return LayerGraph(tuple(b.layers), source=genotype_key(g))


@lru_cache(maxsize=4096)
def derive_network_cached(g: Genotype, macro: MacroConfig = MacroConfig()) -> LayerGraph:
    return derive_network(g, macro)


@dataclass(frozen=True)
class ArchSummary:
    total_macs: int
    total_params: int
    depth: int
    op_histogram: tuple[int, ...]
    reduction_count: int

    @property
    def op_fractions(self) -> tuple[float, ...]:
        total = sum(self.op_histogram)
        return tuple(c / total for c in self.op_histogram)


def arch_summary(graph: LayerGraph) -> ArchSummary:
    hist = [0] * len(OpKind)
    reduction_cells = set()
    for layer in graph.layers:
        if layer.op is not None:
            hist[int(layer.op)] += 1
        if layer.cell_kind is CellKind.REDUCTION:
            reduction_cells.add(layer.cell)
    return ArchSummary(graph.total_macs, graph.total_params, graph.depth, tuple(hist), len(reduction_cells))


def check_shapes(graph: LayerGraph) -> None:
    """Raise AssertionError if any layer's input disagrees with its producers."""
    for idx, layer in enumerate(graph.layers):
        if not layer.preds:
            continue
        shapes = [graph.layers[p].out_shape for p in layer.preds]
        if layer.kind is LayerKind.ADD:
            if any(s != layer.in_shape for s in shapes):
                raise AssertionError(f"layer {idx}: add inputs {shapes} != {layer.in_shape}")
        else:
            h, w = layer.in_shape.height, layer.in_shape.width
            if any((s.height, s.width) != (h, w) for s in shapes) or sum(s.channels for s in shapes) != layer.in_shape.channels:
                raise AssertionError(f"layer {idx}: inputs {shapes} do not concatenate to {layer.in_shape}")


GRAPH_COLUMNS = ("kind", "in_h", "in_w", "in_c", "out_h", "out_w", "out_c", "kernel", "stride", "macs", "params", "preds")


def graph_to_text(graph: LayerGraph) -> str:
    """One tab-separated record per layer, with a header line."""
    lines = ["\t".join(GRAPH_COLUMNS)]
    for layer in graph.layers:
        i, o = layer.in_shape, layer.out_shape
        preds = ",".join(str(p) for p in layer.preds) or "-"
        row = (layer.kind.value, i.height, i.width, i.channels, o.height, o.width, o.channels,
               layer.kernel, layer.stride, layer.macs, layer.params, preds)
        lines.append("\t".join(str(v) for v in row))
    return "\n".join(lines) + "\n"


def graph_from_text(text: str) -> LayerGraph:
    rows = [ln for ln in text.splitlines() if ln.strip()]
    if not rows or tuple(rows[0].split("\t")) != GRAPH_COLUMNS:
        raise ValueError("layer graph text must start with the standard header")
    layers = []
    for n, ln in enumerate(rows[1:], start=2):
        f = ln.split("\t")
        if len(f) != len(GRAPH_COLUMNS):
            raise ValueError(f"line {n}: expected {len(GRAPH_COLUMNS)} fields")
        preds = () if f[11] == "-" else tuple(int(p) for p in f[11].split(","))
        layer = LayerWorkload(
            LayerKind(f[0]),
            TensorShape(int(f[1]), int(f[2]), int(f[3])),
            TensorShape(int(f[4]), int(f[5]), int(f[6])),
            int(f[7]), int(f[8]), preds,
        )
        if layer.macs != int(f[9]) or layer.params != int(f[10]):
            raise ValueError(f"line {n}: macs/params disagree with shapes")
        layers.append(layer)
    return LayerGraph(tuple(layers))
