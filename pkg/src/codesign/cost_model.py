"""Analytical latency/energy model of a systolic-array accelerator.

Three-level hierarchy: DRAM -> global buffer (g_buf) -> per-PE register
file (r_buf). For every MAC layer a tiling over (out rows, out cols, in
channels, out channels) is chosen by exhaustive search over power-of-two
tile sizes; the dataflow decides the spatial mapping onto the PE array,
the loop order at the DRAM level, and which operand accesses are served
from the register file.

Element counts (16-bit elements), per MAC layer with M MACs:

* every MAC performs 3 operand reads and 1 partial-sum write, i.e.
  ``gbuf_accesses + rf_accesses == 4 * M``;
* NLR serves all of them from g_buf;
* WS keeps weights in RF (weights leave g_buf once per channel tile pair);
  OS keeps partial sums in RF; RS keeps one kernel row and one input row per
  PE and forwards partial sums between neighbours (charged at RF cost).

Non-MAC layers (pooling, add) are streamed: compulsory DRAM traffic,
``ceil(out elements / PEs)`` cycles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .design_space import AcceleratorConfig, Dataflow
from .network_lowering import LayerGraph, LayerKind, LayerWorkload


class CapacityError(ValueError):
    """A tiling does not fit the buffers."""


class InfeasibleError(ValueError):
    """No tiling of a layer fits the buffers."""

    def __init__(self, msg, layer_index=None):
        super().__init__(msg)
        self.layer_index = layer_index


@dataclass(frozen=True)
class EnergyTable:
    mac_pj: float = 1.0
    rf_access_pj: float = 1.0
    gbuf_access_pj: float = 6.0
    dram_access_pj: float = 200.0

    def __post_init__(self):
        if not (self.dram_access_pj > self.gbuf_access_pj > self.rf_access_pj > 0 and self.mac_pj > 0):
            raise ValueError("energy table must satisfy dram > gbuf > rf > 0 and mac > 0")


@dataclass(frozen=True)
class HardwareModel:
    accel: AcceleratorConfig
    clock_ghz: float = 1.0
    dram_bandwidth_gbps: float = 16.0
    bytes_per_element: int = 2
    energy_table: EnergyTable = EnergyTable()

    def __post_init__(self):
        if min(self.clock_ghz, self.dram_bandwidth_gbps, self.bytes_per_element) <= 0:
            raise ValueError("hardware rates must be positive")

    @property
    def gbuf_elements(self) -> int:
        return self.accel.g_buf_kb * 1024 // self.bytes_per_element

    @property
    def rf_elements(self) -> int:
        return self.accel.r_buf_bytes // self.bytes_per_element

    def with_accel(self, accel: AcceleratorConfig) -> "HardwareModel":
        return replace(self, accel=accel)


@dataclass(frozen=True)
class Tiling:
    th: int
    tw: int
    tc: int
    tk: int
    dataflow: Dataflow

    @property
    def loop_order(self) -> str:
        return "k,h,w,c" if self.dataflow is Dataflow.OS else "k,c,h,w"


@dataclass(frozen=True)
class LayerCost:
    latency_ms: float
    energy_mj: float
    compute_cycles: int
    dram_elements: int
    gbuf_accesses: int
    rf_accesses: int
    macs: int
    tiling: Tiling | None = None


@dataclass(frozen=True)
class CostReport:
    latency_ms: float
    energy_mj: float
    compute_cycles: int
    dram_elements: int
    gbuf_accesses: int
    rf_accesses: int
    macs: int
    per_layer: tuple[LayerCost, ...] = field(repr=False, default=())

    def as_dict(self) -> dict:
        return {
            "latency_ms": self.latency_ms,
            "energy_mj": self.energy_mj,
            "compute_cycles": self.compute_cycles,
            "dram_elements": self.dram_elements,
            "gbuf_accesses": self.gbuf_accesses,
            "rf_accesses": self.rf_accesses,
            "macs": self.macs,
        }


@dataclass(frozen=True)
class _Dims:
    """Loop bounds of a MAC layer; ``c`` is the per-output reduction width."""

    ho: int
    wo: int
    hi: int
    wi: int
    c: int
    k: int
    r: int
    s: int
    depthwise: bool

    @property
    def macs(self) -> int:
        return self.ho * self.wo * self.k * self.c * self.r * self.r

    @property
    def weights(self) -> int:
        return self.k * self.c * self.r * self.r

    @property
    def outputs(self) -> int:
        return self.ho * self.wo * self.k


def _dims(layer: LayerWorkload) -> _Dims:
    i, o = layer.in_shape, layer.out_shape
    if layer.kind is LayerKind.CONV or layer.kind is LayerKind.LINEAR:
        r = layer.kernel if layer.kind is LayerKind.CONV else 1
        return _Dims(o.height, o.width, i.height, i.width, i.channels, o.channels, r, layer.stride, False)
    if layer.kind is LayerKind.DWCONV:
        return _Dims(o.height, o.width, i.height, i.width, 1, o.channels, layer.kernel, layer.stride, True)
    raise ValueError(f"{layer.kind} has no MAC loop nest")


def is_mac_layer(layer: LayerWorkload) -> bool:
    return layer.kind in (LayerKind.CONV, LayerKind.DWCONV, LayerKind.LINEAR)


def tile_grid(n: int) -> list[int]:
    """Powers of two below ``n``, plus ``n`` itself."""
    out = []
    t = 1
    while t < n:
        out.append(t)
        t *= 2
    out.append(n)
    return out


def _classes(n, t):
    """Tile-size classes along one dimension: (full size, count, tail size, tail count)."""
    full = n // t
    tail = n - full * t
    return t, full, tail, (tail > 0).astype(np.int64)


def _in_extent(t, d: _Dims, full_in: int):
    return np.minimum(full_in, (t - 1) * d.s + max(d.r, d.s))


def _evaluate(d: _Dims, df: Dataflow, th, tw, tc, tk, pe_rows: int, pe_cols: int):
    """Counts for arrays of tilings. Returns a dict of int64 arrays."""
    th, tw, tc, tk = (np.asarray(x, dtype=np.int64) for x in (th, tw, tc, tk))
    nh = -(-d.ho // th)
    nw = -(-d.wo // tw)
    nc = -(-d.c // tc)
    nk = -(-d.k // tk)

    hs = _classes(d.ho, th)
    ws = _classes(d.wo, tw)
    cs = _classes(d.c, tc)
    ks = _classes(d.k, tk)

    # halo-inflated input rows/cols summed over tiles
    sum_ih = hs[1] * _in_extent(hs[0], d, d.hi) + hs[3] * _in_extent(np.maximum(hs[2], 1), d, d.hi)
    sum_iw = ws[1] * _in_extent(ws[0], d, d.wi) + ws[3] * _in_extent(np.maximum(ws[2], 1), d, d.wi)

    M, W, O = d.macs, d.weights, d.outputs
    in_ch = d.k if d.depthwise else d.c * nk
    in_dram = sum_ih * sum_iw * in_ch
    if df is Dataflow.OS:
        w_dram = W * nh * nw
        o_dram = np.full_like(nh, O)
    else:
        w_dram = np.full_like(nh, W)
        o_dram = O * (2 * nc - 1)
    dram = in_dram + w_dram + o_dram

    r2 = d.r * d.r
    if df is Dataflow.NLR:
        gbuf = np.full_like(nh, 4 * M)
    else:
        if d.depthwise:
            in_g = np.full_like(nh, M // d.r if df is Dataflow.RS else M)
        elif df is Dataflow.RS:
            in_g = (M // (d.k * d.r)) * nk
        else:
            in_g = (M // d.k) * nk
        w_g = np.full_like(nh, W) if df is Dataflow.WS else W * nh * nw
        ps_g = np.full_like(nh, O) if df is Dataflow.OS else O * (2 * nc - 1)
        gbuf = in_g + w_g + ps_g
    rf = 4 * M - gbuf

    cycles = np.zeros_like(nh)
    for h, hn in ((hs[0], hs[1]), (hs[2], hs[3])):
        for w, wn in ((ws[0], ws[1]), (ws[2], ws[3])):
            for c, cn in ((cs[0], cs[1]), (cs[2], cs[3])):
                for k, kn in ((ks[0], ks[1]), (ks[2], ks[3])):
                    count = hn * wn * cn * kn
                    if df is Dataflow.OS:
                        per = -(-(h * w) // pe_rows) * -(-k // pe_cols) * c * r2
                    elif df is Dataflow.RS:
                        per = -(-(d.r * c) // pe_rows) * -(-h // pe_cols) * k * w * d.r
                    else:
                        per = -(-c // pe_rows) * -(-k // pe_cols) * h * w * r2
                    cycles = cycles + count * per

    ih_full = _in_extent(th, d, d.hi)
    iw_full = _in_extent(tw, d, d.wi)
    in_tile_ch = tk if d.depthwise else tc
    gbuf_need = ih_full * iw_full * in_tile_ch + tk * tc * r2 + th * tw * tk
    if df is Dataflow.WS:
        rf_need = np.full_like(nh, r2 + 2)
    elif df is Dataflow.OS:
        rf_need = np.full_like(nh, 2 * d.r + 1)
    elif df is Dataflow.RS:
        rf_need = d.r + ((tw - 1) * d.s + d.r) + tw
    else:
        rf_need = np.zeros_like(nh)
    return {
        "cycles": cycles,
        "dram": dram,
        "gbuf": gbuf,
        "rf": rf,
        "gbuf_need": gbuf_need,
        "rf_need": rf_need,
    }


def _energy(macs, rf, gbuf, dram, table: EnergyTable):
    return (macs * table.mac_pj + rf * table.rf_access_pj + gbuf * table.gbuf_access_pj
            + dram * table.dram_access_pj) * 1e-9


def _latency_ms(cycles, dram, hw: HardwareModel):
    compute_ns = cycles / hw.clock_ghz
    transfer_ns = dram * hw.bytes_per_element / hw.dram_bandwidth_gbps
    return np.maximum(compute_ns, transfer_ns) * 1e-6


def _check_tiling(layer, d: _Dims, tiling: Tiling | None, accel: AcceleratorConfig, hw: HardwareModel | None):
    if hw is None:
        hw = HardwareModel(accel)
    if tiling is None:
        tiling = choose_tiling(layer, hw.with_accel(accel))
    for name, t, n in (("th", tiling.th, d.ho), ("tw", tiling.tw, d.wo), ("tc", tiling.tc, d.c), ("tk", tiling.tk, d.k)):
        if not 1 <= t <= n:
            raise ValueError(f"tile {name}={t} outside 1..{n}")
    if tiling.dataflow != accel.dataflow:
        raise ValueError("tiling dataflow differs from the accelerator's")
    ev = _evaluate(d, accel.dataflow, [tiling.th], [tiling.tw], [tiling.tc], [tiling.tk], accel.pe_rows, accel.pe_cols)
    if ev["gbuf_need"][0] > hw.gbuf_elements:
        raise CapacityError(f"tile working set {ev['gbuf_need'][0]} > g_buf {hw.gbuf_elements} elements")
    if ev["rf_need"][0] > hw.rf_elements:
        raise CapacityError(f"per-PE set {ev['rf_need'][0]} > r_buf {hw.rf_elements} elements")
    return ev


def _stream_counts(layer: LayerWorkload):
    out = layer.out_shape.elements
    reads = out * layer.kernel * layer.kernel * (2 if layer.kind is LayerKind.ADD else 1)
    return layer.input_elements + out, reads + out


def mac_cycles(layer: LayerWorkload, accel: AcceleratorConfig, tiling: Tiling | None = None,
               hw: HardwareModel | None = None) -> int:
    """Compute cycles of ``layer`` under ``tiling`` on the accelerator's PE array."""
    pes = accel.pe_rows * accel.pe_cols
    if not is_mac_layer(layer):
        return -(-layer.out_shape.elements // pes)
    d = _dims(layer)
    ev = _check_tiling(layer, d, tiling, accel, hw)
    return int(ev["cycles"][0])


def access_counts(layer: LayerWorkload, accel: AcceleratorConfig, tiling: Tiling | None = None,
                  hw: HardwareModel | None = None) -> tuple[int, int, int]:
    """(dram_elements, gbuf_accesses, rf_accesses) of ``layer`` under ``tiling``."""
    if not is_mac_layer(layer):
        dram, gbuf = _stream_counts(layer)
        return dram, gbuf, 0
    d = _dims(layer)
    ev = _check_tiling(layer, d, tiling, accel, hw)
    return int(ev["dram"][0]), int(ev["gbuf"][0]), int(ev["rf"][0])


def choose_tiling(layer: LayerWorkload, hw: HardwareModel) -> Tiling:
    """Minimum-energy feasible tiling (ties: lower latency, then smaller tiles)."""
    return _choose(layer.signature(), hw)[0]


def _choose_impl(sig, hw: HardwareModel):
    # sig uniquely determines the layer's loop nest, so rebuild from it
    layer = _layer_from_signature(sig)
    accel = hw.accel
    df = Dataflow(accel.dataflow)
    d = _dims(layer)
    grids = np.meshgrid(tile_grid(d.ho), tile_grid(d.wo), tile_grid(d.c), tile_grid(d.k), indexing="ij")
    th, tw, tc, tk = (g.ravel() for g in grids)
    ev = _evaluate(d, df, th, tw, tc, tk, accel.pe_rows, accel.pe_cols)
    ok = (ev["gbuf_need"] <= hw.gbuf_elements) & (ev["rf_need"] <= hw.rf_elements)
    if not ok.any():
        raise InfeasibleError(f"no tiling of {layer.kind.value} layer fits {accel.label()}")
    idx = np.flatnonzero(ok)
    energy = _energy(d.macs, ev["rf"][idx], ev["gbuf"][idx], ev["dram"][idx], hw.energy_table)
    latency = _latency_ms(ev["cycles"][idx], ev["dram"][idx], hw)
    order = np.lexsort((tk[idx], tc[idx], tw[idx], th[idx], latency, energy))
    best = idx[order[0]]
    tiling = Tiling(int(th[best]), int(tw[best]), int(tc[best]), int(tk[best]), df)
    counts = (int(ev["cycles"][best]), int(ev["dram"][best]), int(ev["gbuf"][best]), int(ev["rf"][best]))
    return tiling, counts


_choose = lru_cache(maxsize=1 << 16)(_choose_impl)


def _layer_from_signature(sig) -> LayerWorkload:
    from .network_lowering import TensorShape

    kind, ih, iw, ic, oh, ow, oc, k, s = sig
    return LayerWorkload(LayerKind(kind), TensorShape(ih, iw, ic), TensorShape(oh, ow, oc), k, s)


def layer_cost(layer: LayerWorkload, hw: HardwareModel) -> LayerCost:
    return _layer_cost(layer.signature(), hw)


def _layer_cost_impl(sig, hw: HardwareModel, choose=_choose_impl) -> LayerCost:
    layer = _layer_from_signature(sig)
    macs = layer.macs
    if is_mac_layer(layer):
        tiling, (cycles, dram, gbuf, rf) = choose(sig, hw)
    else:
        tiling = None
        cycles = mac_cycles(layer, hw.accel)
        dram, gbuf = _stream_counts(layer)
        rf = 0
    energy = float(_energy(macs, rf, gbuf, dram, hw.energy_table))
    latency = float(_latency_ms(cycles, dram, hw))
    return LayerCost(latency, energy, cycles, dram, gbuf, rf, macs, tiling)


@lru_cache(maxsize=1 << 16)
def _layer_cost(sig, hw: HardwareModel) -> LayerCost:
    return _layer_cost_impl(sig, hw, _choose)


def clear_cache() -> None:
    _choose.cache_clear()
    _layer_cost.cache_clear()


def simulate(graph: LayerGraph, hw: HardwareModel, use_cache: bool = True) -> CostReport:
    """Per-layer tiling search and cost roll-up for a whole network."""
    per_layer = []
    for idx, layer in enumerate(graph.layers):
        sig = layer.signature()
        try:
            cost = _layer_cost(sig, hw) if use_cache else _layer_cost_impl(sig, hw)
        except InfeasibleError as exc:
            raise InfeasibleError(f"layer {idx}: {exc}", layer_index=idx) from None
        per_layer.append(cost)
    if not per_layer:
        raise ValueError("empty layer graph")
    return CostReport(
        latency_ms=math.fsum(c.latency_ms for c in per_layer),
        energy_mj=math.fsum(c.energy_mj for c in per_layer),
        compute_cycles=sum(c.compute_cycles for c in per_layer),
        dram_elements=sum(c.dram_elements for c in per_layer),
        gbuf_accesses=sum(c.gbuf_accesses for c in per_layer),
        rf_accesses=sum(c.rf_accesses for c in per_layer),
        macs=sum(c.macs for c in per_layer),
        per_layer=tuple(per_layer),
    )


def report_energy(report: CostReport, table: EnergyTable) -> float:
    """Energy recomputed from a report's traffic totals."""
    return (report.macs * table.mac_pj + report.rf_accesses * table.rf_access_pj
            + report.gbuf_accesses * table.gbuf_access_pj + report.dram_elements * table.dram_access_pj) * 1e-9


def report_to_text(report: CostReport, accel: AcceleratorConfig | None = None) -> str:
    lines = []
    if accel is not None:
        lines.append(f"accelerator\t{accel.label()}")
    for k, v in report.as_dict().items():
        lines.append(f"{k}\t{v!r}")
    lines.append("layer\tlatency_ms\tenergy_mj\tcompute_cycles\tdram_elements\tgbuf_accesses\trf_accesses\tmacs\ttiling")
    for i, c in enumerate(report.per_layer):
        t = "-" if c.tiling is None else f"{c.tiling.th}x{c.tiling.tw}x{c.tiling.tc}x{c.tiling.tk}"
        lines.append(f"{i}\t{c.latency_ms!r}\t{c.energy_mj!r}\t{c.compute_cycles}\t{c.dram_elements}"
                     f"\t{c.gbuf_accesses}\t{c.rf_accesses}\t{c.macs}\t{t}")
    return "\n".join(lines) + "\n"
