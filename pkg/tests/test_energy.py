"""Operation counting and the energy model, checked against loop oracles."""

import numpy as np
import pytest
from util_nets import chain_spec, skip_checkpoint, skip_spec

from snnforge.ann import ActivationStats, build_unet, collect_stats, init_checkpoint
from snnforge.conversion import SpikingNetwork, connection_wise_normalize
from snnforge.energy import (
    AnnOpCounts,
    EnergyModel,
    SnnOpCounts,
    ann_flops,
    count_snn_flops,
    energy_report,
    first_layer_macs,
    format_energy_table,
    infer_shapes,
    param_count,
    synaptic_events,
)
from snnforge.errors import ShapeError
from snnforge.neuron import optimal_thresholds
from snnforge.runtime import simulate
from snnforge.tensor import normalize_padding


def test_dense_energy_headline_figure():
    # 6.55E+10 MACs at 4.6 pJ per MAC is about 0.301 J of compute energy
    report = energy_report(AnnOpCounts(macs=65_500_000_000), EnergyModel())
    assert report["ops_energy_j"] == pytest.approx(3.01e-1, rel=0.01)
    assert report["ops_energy_j"] == pytest.approx(65_500_000_000 * 4.6e-12, rel=1e-12)


def test_ann_flops_chain_by_hand():
    spec = chain_spec((1, 3, 3, 2), k=3, pad=1)
    # 8x8 input, same-size convs: Cout*H*W*Cin*K*K per conv, 1x1 head
    want = 3 * 64 * 1 * 9 + 3 * 64 * 3 * 9 + 2 * 64 * 3 * 1
    assert ann_flops(spec, (8, 8)) == want


def test_ann_flops_unet_by_hand():
    spec = build_unet(1.0 / 32.0, in_channels=1, out_channels=3, depth=2)
    conv = lambda co, hw, ci, k: co * hw * hw * ci * k * k
    pool = lambda c, hw: c * hw * hw * 4  # window^2 adds per pooled value
    want = (
        conv(2, 16, 1, 3) + conv(2, 16, 2, 3)          # encoder 1
        + pool(2, 8)
        + conv(4, 8, 2, 3) + conv(4, 8, 4, 3)          # encoder 2
        + pool(4, 4)
        + conv(8, 4, 4, 3) + conv(8, 4, 8, 3)          # bottleneck
        + conv(4, 8, 8, 2)                             # up-conv 2x2
        + conv(4, 8, 8, 3) + conv(4, 8, 4, 3)          # decoder 2
        + conv(2, 16, 4, 2)                            # up-conv 2x2
        + conv(2, 16, 4, 3) + conv(2, 16, 2, 3)        # decoder 1
        + conv(3, 16, 2, 1)                            # head
    )
    assert ann_flops(spec, (16, 16)) == want


def test_param_count_by_hand():
    spec = chain_spec((1, 3, 3, 2), k=3, pad=1)
    assert param_count(spec) == 3 * (1 * 9 + 1) + 3 * (3 * 9 + 1) + 2 * (3 * 1 + 1)


def test_infer_shapes_unet():
    spec = build_unet(1.0 / 32.0, in_channels=1, out_channels=3, depth=2)
    shapes = infer_shapes(spec, (16, 16))
    assert shapes[0] == (1, 16, 16)
    assert shapes[5] == (2, 8, 8)       # first pool
    assert shapes[14] == (8, 4, 4)      # bottleneck relu
    assert shapes[18] == (8, 8, 8)      # first concat
    assert shapes[spec.output_id] == (3, 16, 16)
    with pytest.raises(ShapeError, match="pool window"):
        infer_shapes(spec, (6, 6))


def _unit_chain(channels, k=1, pad=0, kernel_fill=1.0):
    spec = chain_spec(channels, k=k, pad=pad)
    params = {}
    ch = spec.channels()
    for cid in spec.conv_ids():
        layer = spec.layers[cid]
        cin = ch[layer.inputs[0]]
        kh, kw = layer.kernel_size
        params[(cid, "kernel")] = np.full(
            (layer.out_channels, cin, kh, kw), kernel_fill
        )
        params[(cid, "bias")] = np.zeros(layer.out_channels)
    relu_map = spec.relu_of_conv()
    return SpikingNetwork(
        spec=spec,
        params=params,
        schedules={cid: optimal_thresholds(4, 1.0) for cid in relu_map},
        mode="connection",
        stats=ActivationStats(
            percentile=100.0,
            lambdas={r: 1.0 for r in relu_map.values()},
            part_lambdas={},
        ),
    )


def test_zero_input_spends_only_the_input_layer():
    net = _unit_chain((1, 2, 1))
    x = np.zeros((2, 1, 4, 4))
    trace = simulate(net, x, 10)
    counts = count_snn_flops(trace, net)
    assert counts.op_spikes == 0
    assert counts.op_input_layer == first_layer_macs(net.spec, (4, 4)) * 2
    assert counts.batch == 2
    assert synaptic_events(trace, net) == 0


def test_count_snn_flops_totals(rng):
    net = _unit_chain((1, 2, 2, 1), kernel_fill=0.4)
    x = rng.random((3, 1, 4, 4))
    trace = simulate(net, x, 7)
    counts = count_snn_flops(trace, net)
    want = int(sum(float(c.sum()) for c in trace.spike_counts.values()))
    assert counts.op_spikes == want
    assert counts.op_input_layer == first_layer_macs(net.spec, (4, 4)) * 3


def test_single_interior_spike_fan_out():
    # one spike under a 3x3 kernel with 4 output channels triggers 36
    # accumulates; at a corner only 4 windows reach it, so 16
    spec = chain_spec((1, 1, 4, 1), k=3, pad=1)
    delta = np.zeros((1, 1, 3, 3))
    delta[0, 0, 1, 1] = 1.0  # center tap only: conv 1 passes the input through
    params = {
        (1, "kernel"): delta,
        (1, "bias"): np.zeros(1),
        (3, "kernel"): np.full((4, 1, 3, 3), -1.0),  # never spikes downstream
        (3, "bias"): np.zeros(4),
        (5, "kernel"): np.ones((1, 4, 3, 3)),
        (5, "bias"): np.zeros(1),
    }
    relu_map = spec.relu_of_conv()
    net = SpikingNetwork(
        spec=spec,
        params=params,
        schedules={cid: optimal_thresholds(4, 1.0) for cid in relu_map},
        mode="connection",
        stats=ActivationStats(
            percentile=100.0,
            lambdas={r: 1.0 for r in relu_map.values()},
            part_lambdas={},
        ),
    )
    # a lone 0.5 fires the first neuron's 0.5 threshold exactly once in a
    # one-step window
    x = np.zeros((1, 1, 5, 5))
    x[0, 0, 2, 2] = 0.5
    trace = simulate(net, x, 1)
    assert trace.spike_counts[1].sum() == 1
    assert synaptic_events(trace, net) == 36

    x = np.zeros((1, 1, 5, 5))
    x[0, 0, 0, 0] = 0.5
    trace = simulate(net, x, 1)
    assert trace.spike_counts[1][0, 0, 0, 0] == 1
    assert synaptic_events(trace, net) == 16


def _windows_covering(hw, layer, y, x):
    kh, kw = layer.kernel_size
    pt, pb, pl, pr = normalize_padding(layer.padding)
    h, w = hw
    ho = (h + pt + pb - kh) // layer.stride + 1
    wo = (w + pl + pr - kw) // layer.stride + 1
    hits = 0
    for oy in range(ho):
        iy = oy * layer.stride - pt
        if not (iy <= y < iy + kh):
            continue
        for ox in range(wo):
            ix = ox * layer.stride - pl
            if ix <= x < ix + kw:
                hits += 1
    return hits


def events_oracle(trace, net):
    """Walk every recorded spike through the graph, pricing each accumulate.

    Independent of the vectorized implementation: coverage is found by
    enumerating output windows, pools recurse from the pooled position, and
    upsampling copies the spike to its 2x2 block.
    """
    spec = net.spec
    consumers = {}
    for layer in spec.layers[1:]:
        for src in layer.inputs:
            consumers.setdefault(src, []).append(layer)
    total = 0.0

    def walk(node, y, x, k, hw):
        nonlocal total
        for cons in consumers.get(node, []):
            if cons.kind == "conv":
                total += k * _windows_covering(hw, cons, y, x) * cons.out_channels
            elif cons.kind == "avgpool":
                total += k
                walk(cons.id, y // cons.window, x // cons.window, k,
                     (hw[0] // cons.window, hw[1] // cons.window))
            elif cons.kind == "upsample":
                for dy in (0, 1):
                    for dx in (0, 1):
                        walk(cons.id, 2 * y + dy, 2 * x + dx, k,
                             (hw[0] * 2, hw[1] * 2))
            elif cons.kind == "concat":
                walk(cons.id, y, x, k, hw)

    relu_map = spec.relu_of_conv()
    for conv_id, relu_id in relu_map.items():
        counts = trace.spike_counts[conv_id]
        _, _, h, w = counts.shape
        summed = counts.sum(axis=(0, 1))
        for y in range(h):
            for x in range(w):
                if summed[y, x]:
                    walk(relu_id, y, x, float(summed[y, x]), (h, w))
    return int(round(total))


def test_synaptic_events_against_walk_oracle_skip_net(rng):
    ckpt = skip_checkpoint(seed=3)
    images = [rng.random((1, 6, 6)) for _ in range(5)]
    stats = collect_stats(ckpt, images, percentile=100.0)
    net = connection_wise_normalize(ckpt, stats)
    trace = simulate(net, rng.random((2, 1, 6, 6)), 5)
    assert sum(trace.total_spikes().values()) > 0
    assert synaptic_events(trace, net) == events_oracle(trace, net)


def test_synaptic_events_against_walk_oracle_unet(rng):
    ckpt = init_checkpoint(
        build_unet(1.0 / 32.0, in_channels=1, out_channels=2, depth=2), seed=0
    )
    for key, val in ckpt.params.items():
        ckpt.params[key] = np.abs(val) * 0.5
    images = [rng.random((1, 16, 16)) for _ in range(4)]
    stats = collect_stats(ckpt, images, percentile=100.0)
    net = connection_wise_normalize(ckpt, stats)
    trace = simulate(net, rng.random((1, 1, 16, 16)), 3)
    assert sum(trace.total_spikes().values()) > 0
    assert synaptic_events(trace, net) == events_oracle(trace, net)


def test_energy_report_snn_is_per_inference():
    model = EnergyModel()
    counts = SnnOpCounts(op_spikes=1000, op_input_layer=200, batch=4)
    report = energy_report(counts, model, params=100)
    assert report["kind"] == "snn"
    assert report["op_spikes"] == 250.0
    assert report["op_input_layer"] == 50.0
    assert report["flops"] == 300.0
    want_ops = 250.0 * 0.9e-12 + 50.0 * 4.6e-12
    assert report["ops_energy_j"] == pytest.approx(want_ops, rel=1e-12)
    want_mem = (2.0 * 300.0 + 1.0 * 100) * 1.0e-11
    assert report["mem_energy_j"] == pytest.approx(want_mem, rel=1e-12)
    assert report["total_energy_j"] == pytest.approx(want_ops + want_mem, rel=1e-12)


def test_energy_report_ann_fields():
    model = EnergyModel(mac_energy=2e-12, ac_energy=1e-12, mem_access_energy=5e-12)
    report = energy_report(AnnOpCounts(macs=1000, params=50), model)
    assert report["kind"] == "ann"
    assert report["macs"] == 1000.0
    assert report["params"] == 50
    assert report["ops_energy_j"] == pytest.approx(1000 * 2e-12, rel=1e-12)
    # explicit params argument overrides the counts' value
    report = energy_report(AnnOpCounts(macs=1000, params=50), model, params=80)
    assert report["params"] == 80
    with pytest.raises(TypeError, match="unsupported"):
        energy_report({"macs": 3}, model)


def test_energy_model_validation():
    with pytest.raises(ValueError, match="mac_energy"):
        EnergyModel(mac_energy=0.0)
    with pytest.raises(ValueError, match="ac_energy"):
        EnergyModel(ac_energy=-1e-12)
    with pytest.raises(ValueError, match="access factors"):
        EnergyModel(flops_access_factor=-0.5)


def test_format_energy_table():
    model = EnergyModel()
    rows = {
        "ann": energy_report(AnnOpCounts(macs=65_500_000_000), model, params=1000),
        "snn": energy_report(
            SnnOpCounts(op_spikes=500, op_input_layer=100), model, params=1000
        ),
    }
    table = format_energy_table(rows)
    lines = table.splitlines()
    assert len(lines) == 4
    assert "FLOPs" in lines[0] and "Total (J)" in lines[0]
    assert lines[2].startswith("ann") and "6.55E+10" in lines[2]
    assert lines[3].startswith("snn")
