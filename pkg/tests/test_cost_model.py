import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from codesign.cost_model import (
    CapacityError,
    EnergyTable,
    HardwareModel,
    InfeasibleError,
    Tiling,
    access_counts,
    choose_tiling,
    layer_cost,
    mac_cycles,
    report_energy,
    report_to_text,
    simulate,
    tile_grid,
)
from codesign.design_space import AcceleratorConfig, Dataflow, build_schema, sample_sequences, validate
from codesign.network_lowering import LayerGraph, LayerKind, LayerWorkload, TensorShape, derive_network
from oracles import loop_nest_counts

DATAFLOWS = list(Dataflow)
BIG = dict(g=1024, rb=1024)


def conv(h, c, k, r=3, s=1, kind=LayerKind.CONV):
    ho = h // s
    return LayerWorkload(kind, TensorShape(h, h, c), TensorShape(ho, ho, k), r, s)


def accel(df, pe=(16, 32), g=512, rb=512):
    return AcceleratorConfig(pe, g, rb, Dataflow(df))


def oracle(layer, acc, t):
    i, o = layer.in_shape, layer.out_shape
    dw = layer.kind is LayerKind.DWCONV
    r = 1 if layer.kind is LayerKind.LINEAR else layer.kernel
    c = 1 if dw else i.channels
    return loop_nest_counts(o.height, o.width, i.height, i.width, c, o.channels, r, layer.stride, dw,
                            Dataflow(acc.dataflow).name, t.th, t.tw, t.tc, t.tk, acc.pe_rows, acc.pe_cols)


def random_network(seed):
    s = build_schema()
    seq = sample_sequences(s, 1, np.random.default_rng(seed))[0].tolist()
    return derive_network(validate(seq, s).dnn)


@pytest.mark.parametrize("df", DATAFLOWS)
def test_counts_match_loop_nest_walk(df):
    rng = np.random.default_rng(int(df) + 40)
    layers = [conv(8, 6, 10), conv(9, 5, 7, r=5), conv(8, 12, 12, r=3, s=2), conv(7, 9, 9, kind=LayerKind.DWCONV),
              conv(6, 4, 12, r=1), LayerWorkload(LayerKind.LINEAR, TensorShape(1, 1, 24), TensorShape(1, 1, 10))]
    checked = 0
    for layer in layers:
        o = layer.out_shape
        c = 1 if layer.kind is LayerKind.DWCONV else layer.in_shape.channels
        for _ in range(15):
            t = Tiling(*(int(rng.integers(1, n + 1)) for n in (o.height, o.width, c, o.channels)), df)
            acc = accel(df, pe=(3, 5), **BIG)
            cyc, dram, gbuf, rf = oracle(layer, acc, t)
            assert mac_cycles(layer, acc, t) == cyc
            assert access_counts(layer, acc, t) == (dram, gbuf, rf)
            checked += 1
    assert checked == 90


def _ws_weight_fetches(ho, wo, c, k, r, th, tw, tc, tk):
    """Element-level replay of the WS nest with a one-tile weight buffer."""
    resident, fetched = set(), 0
    for k0 in range(0, k, tk):
        for c0 in range(0, c, tc):
            for h0 in range(0, ho, th):
                for w0 in range(0, wo, tw):
                    need = {(kk, cc, a, b) for kk in range(k0, min(k, k0 + tk)) for cc in range(c0, min(c, c0 + tc))
                            for a in range(r) for b in range(r)}
                    fetched += len(need - resident)
                    resident = need
    return fetched


def test_ws_fetches_each_weight_once():
    layer = conv(8, 6, 10)
    weights = 10 * 6 * 9
    # full spatial and channel tiles: inputs are read once per k tile, outputs written once
    t = Tiling(8, 8, 6, 4, Dataflow.WS)
    assert _ws_weight_fetches(8, 8, 6, 10, 3, 8, 8, 6, 4) == weights
    assert _ws_weight_fetches(8, 8, 6, 10, 3, 4, 2, 3, 4) == weights
    dram, _, _ = access_counts(layer, accel(Dataflow.WS, **BIG), t)
    assert dram - 8 * 8 * 6 * 3 - 8 * 8 * 10 == weights


def test_nlr_serves_everything_from_gbuf():
    layer = conv(16, 8, 16)
    acc = accel(Dataflow.NLR)
    dram, gbuf, rf = access_counts(layer, acc)
    assert rf == 0 and gbuf == 4 * layer.macs


@pytest.mark.parametrize("df", DATAFLOWS)
def test_one_pe_is_fully_serial(df):
    for layer in (conv(8, 6, 10), conv(8, 6, 6, r=5, kind=LayerKind.DWCONV)):
        assert mac_cycles(layer, accel(df, pe=(1, 1), **BIG)) == layer.macs


def test_pooling_cycles():
    pool = LayerWorkload(LayerKind.MAXPOOL, TensorShape(16, 16, 20), TensorShape(16, 16, 20), 3, 1)
    for pe in ((8, 8), (16, 32), (14, 16)):
        assert mac_cycles(pool, accel(Dataflow.WS, pe=pe)) == math.ceil(16 * 16 * 20 / (pe[0] * pe[1]))
    dram, gbuf, rf = access_counts(pool, accel(Dataflow.WS))
    assert rf == 0 and dram == 2 * 16 * 16 * 20


def test_stem_example_and_recomputation():
    stem = conv(32, 3, 16)
    assert stem.macs == 442_368
    acc = accel(Dataflow.OS, pe=(16, 32), g=512, rb=512)
    hw = HardwareModel(acc)
    rep = simulate(LayerGraph((stem,)), hw, use_cache=False)
    assert rep.compute_cycles >= 864
    t = rep.per_layer[0].tiling
    cyc, dram, gbuf, rf = oracle(stem, acc, t)
    assert (rep.compute_cycles, rep.dram_elements, rep.gbuf_accesses, rep.rf_accesses) == (cyc, dram, gbuf, rf)
    energy = (442_368 * 1.0 + rf * 1.0 + gbuf * 6.0 + dram * 200.0) * 1e-9
    latency = max(cyc / 1.0, dram * 2 / 16.0) * 1e-6
    assert rep.energy_mj == pytest.approx(energy, rel=1e-12)
    assert rep.latency_ms == pytest.approx(latency, rel=1e-12)
    # no other grid tiling is cheaper
    d = [32, 32, 3, 16]
    best = min(
        (rf2 * 1 + g2 * 6 + dr2 * 200)
        for th in tile_grid(d[0]) for tw in tile_grid(d[1]) for tc in tile_grid(d[2]) for tk in tile_grid(d[3])
        for (_, dr2, g2, rf2) in [oracle(stem, acc, Tiling(th, tw, tc, tk, Dataflow.OS))]
    )
    assert rf + gbuf * 6 + dram * 200 == best


def test_tiny_layer_takes_single_tile():
    layer = conv(4, 2, 3)
    t = choose_tiling(layer, HardwareModel(accel(Dataflow.WS, g=1024, rb=1024)))
    assert (t.th, t.tw, t.tc, t.tk) == (4, 4, 2, 3)
    assert choose_tiling(layer, HardwareModel(accel(Dataflow.WS))) == t


def test_capacity_and_infeasibility_errors():
    layer = conv(32, 64, 64)
    hw = HardwareModel(accel(Dataflow.WS, g=108, rb=64))
    with pytest.raises(CapacityError):
        access_counts(layer, hw.accel, Tiling(32, 32, 64, 64, Dataflow.WS), hw)
    with pytest.raises(ValueError):
        mac_cycles(layer, hw.accel, Tiling(0, 1, 1, 1, Dataflow.WS))
    squeezed = HardwareModel(accel(Dataflow.WS, rb=64), bytes_per_element=64)
    graph = LayerGraph((conv(8, 3, 4), LayerWorkload(LayerKind.MAXPOOL, TensorShape(8, 8, 4), TensorShape(8, 8, 4), 3),
                        conv(8, 4, 4)))
    with pytest.raises(InfeasibleError) as info:
        simulate(graph, squeezed)
    assert info.value.layer_index == 0
    with pytest.raises(ValueError):
        EnergyTable(dram_access_pj=5.0)
    with pytest.raises(ValueError):
        HardwareModel(accel(Dataflow.WS), clock_ghz=0)


def test_report_text_lists_layers():
    g = random_network(2)
    rep = simulate(g, HardwareModel(accel(Dataflow.RS)))
    text = report_to_text(rep, accel(Dataflow.RS))
    assert text.startswith("accelerator\t16*32/512Kb/512b/RS\n")
    assert len(text.strip().split("\n")) == 1 + 7 + 1 + len(g.layers)


@settings(max_examples=12, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(DATAFLOWS))
def test_report_invariants(seed, df):
    g = random_network(seed)
    hw = HardwareModel(accel(df, pe=(8, 16), g=256, rb=128))
    rep = simulate(g, hw)
    assert rep.latency_ms > 0 and rep.energy_mj > 0
    assert rep.macs == g.total_macs
    for f in ("compute_cycles", "dram_elements", "gbuf_accesses", "rf_accesses", "macs"):
        assert getattr(rep, f) == sum(getattr(c, f) for c in rep.per_layer)
    assert rep.energy_mj == pytest.approx(report_energy(rep, hw.energy_table), rel=1e-9)
    assert rep.latency_ms == pytest.approx(math.fsum(
        max(c.compute_cycles / hw.clock_ghz, c.dram_elements * 2 / hw.dram_bandwidth_gbps) * 1e-6
        for c in rep.per_layer), rel=1e-12)
    for layer, cost in zip(g.layers, rep.per_layer):
        compulsory = layer.input_elements + layer.params + layer.out_shape.elements
        assert cost.dram_elements >= compulsory
        if layer.macs:
            assert cost.compute_cycles >= layer.macs / 128
            assert cost.gbuf_accesses + cost.rf_accesses == 4 * layer.macs
    assert simulate(g, hw, use_cache=False) == rep


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 10_000))
def test_mac_invariance_and_monotonicity(seed):
    g = random_network(seed)
    macs = {simulate(g, HardwareModel(accel(df, pe=pe))).macs for df in DATAFLOWS for pe in ((8, 8), (16, 32))}
    assert macs == {g.total_macs}
    for df in DATAFLOWS:
        energies = [simulate(g, HardwareModel(accel(df, g=gb))).energy_mj for gb in (108, 196, 256, 512, 1024)]
        assert all(b <= a * (1 + 1e-12) for a, b in zip(energies, energies[1:]))
        energies = [simulate(g, HardwareModel(accel(df, rb=rb))).energy_mj for rb in (64, 128, 256, 512, 1024)]
        assert all(b <= a * (1 + 1e-12) for a, b in zip(energies, energies[1:]))
        cycles = [simulate(g, HardwareModel(accel(df, pe=pe))).compute_cycles
                  for pe in ((8, 8), (8, 16), (14, 16), (16, 20), (16, 32))]
        assert all(b <= a for a, b in zip(cycles, cycles[1:]))


def test_layer_cost_is_deterministic():
    layer = conv(16, 24, 48, r=5)
    hw = HardwareModel(accel(Dataflow.RS, g=196, rb=256))
    assert layer_cost(layer, hw) == layer_cost(layer, hw)
    assert choose_tiling(layer, hw) == choose_tiling(layer, hw)
