"""Operation counts and energy estimates for spiking and conventional runs.

The operation count of a spiking run is the total number of fired
sub-threshold spikes plus the dense multiply-accumulate count of the first
(analog, statically coded) layer; spikes cost accumulate energy, the first
layer costs multiply-accumulate energy.  A conventional run prices every
dense MAC.  `synaptic_events` additionally reports fan-out-weighted
accumulate counts (each spike priced by the downstream operations it
triggers), which is the finer-grained diagnostic view; the headline count
stays the raw spike total.

The memory-energy model is a deliberately coarse, fully parameterized
proxy: accesses = flops_access_factor * ops + param_access_factor * params,
each access priced at mem_access_energy.  It makes relative comparisons
possible but does not reproduce any published absolute memory figure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ann import NetworkSpec
from .conversion import SpikingNetwork
from .errors import ShapeError
from .runtime import SimulationTrace
from .tensor import ConvParams, conv2d_backward, conv_output_shape


@dataclass(frozen=True)
class EnergyModel:
    """Per-operation energies in joules (45 nm figures by default)."""

    mac_energy: float = 4.6e-12
    ac_energy: float = 0.9e-12
    mem_access_energy: float = 1.0e-11
    flops_access_factor: float = 2.0
    param_access_factor: float = 1.0

    def __post_init__(self):
        for name in ("mac_energy", "ac_energy", "mem_access_energy"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.flops_access_factor < 0 or self.param_access_factor < 0:
            raise ValueError("access factors must be non-negative")


@dataclass(frozen=True)
class SnnOpCounts:
    """Totals over a trace; divide by batch for per-inference figures."""

    op_spikes: int
    op_input_layer: int
    batch: int = 1


@dataclass(frozen=True)
class AnnOpCounts:
    macs: int
    params: int = 0


def infer_shapes(spec: NetworkSpec, input_hw: tuple[int, int]) -> dict[int, tuple[int, int, int]]:
    """(C, H, W) of every layer output for a given input size."""
    h, w = input_hw
    shapes: dict[int, tuple[int, int, int]] = {0: (spec.in_channels, h, w)}
    for layer in spec.layers[1:]:
        if layer.kind == "conv":
            c, hh, ww = shapes[layer.inputs[0]]
            params = ConvParams(
                kernel=np.zeros((layer.out_channels, c) + tuple(layer.kernel_size)),
                bias=np.zeros(layer.out_channels),
                stride=layer.stride,
                padding=layer.padding,
            )
            _, co, ho, wo = conv_output_shape((1, c, hh, ww), params)
            shapes[layer.id] = (co, ho, wo)
        elif layer.kind == "avgpool":
            c, hh, ww = shapes[layer.inputs[0]]
            if hh % layer.window or ww % layer.window:
                raise ShapeError(
                    f"layer {layer.id}: {hh}x{ww} not divisible by pool window {layer.window}"
                )
            shapes[layer.id] = (c, hh // layer.window, ww // layer.window)
        elif layer.kind == "upsample":
            c, hh, ww = shapes[layer.inputs[0]]
            shapes[layer.id] = (c, hh * 2, ww * 2)
        elif layer.kind == "concat":
            parts = [shapes[s] for s in layer.inputs]
            shapes[layer.id] = (sum(p[0] for p in parts), parts[0][1], parts[0][2])
        else:  # relu
            shapes[layer.id] = shapes[layer.inputs[0]]
    return shapes


def _conv_macs(spec: NetworkSpec, shapes, layer) -> int:
    cin = shapes[layer.inputs[0]][0]
    _, ho, wo = shapes[layer.id]
    kh, kw = layer.kernel_size
    return layer.out_channels * ho * wo * cin * kh * kw


def ann_flops(spec: NetworkSpec, input_hw: tuple[int, int]) -> int:
    """Dense MAC count of one conventional inference.

    Convolutions contribute Cout*Ho*Wo*Cin*Kh*Kw; average pooling window^2
    accumulates per output value; upsampling (a copy), relu and concat are
    free.
    """
    shapes = infer_shapes(spec, input_hw)
    total = 0
    for layer in spec.layers[1:]:
        if layer.kind == "conv":
            total += _conv_macs(spec, shapes, layer)
        elif layer.kind == "avgpool":
            c, ho, wo = shapes[layer.id]
            total += c * ho * wo * layer.window * layer.window
    return total


def param_count(spec: NetworkSpec) -> int:
    ch = spec.channels()
    total = 0
    for layer in spec.layers:
        if layer.kind == "conv":
            kh, kw = layer.kernel_size
            total += layer.out_channels * (ch[layer.inputs[0]] * kh * kw + 1)
    return total


def first_layer_macs(spec: NetworkSpec, input_hw: tuple[int, int]) -> int:
    shapes = infer_shapes(spec, input_hw)
    for layer in spec.layers[1:]:
        if layer.kind == "conv":
            return _conv_macs(spec, shapes, layer)
    raise ValueError("network has no convolution layers")


def count_snn_flops(trace: SimulationTrace, net: SpikingNetwork) -> SnnOpCounts:
    """Raw spike total plus the analog first layer's dense MACs.

    The static input current is computed once per inference and reused every
    step, so the first layer is priced as one dense pass per image.
    """
    spikes = sum(trace.total_spikes().values())
    hw = (trace.input.shape[2], trace.input.shape[3])
    first = first_layer_macs(net.spec, hw) * trace.batch
    return SnnOpCounts(op_spikes=spikes, op_input_layer=first, batch=trace.batch)


def _coverage(shape_hw: tuple[int, int], layer, cin: int) -> np.ndarray:
    """How many sliding windows of the consuming conv cover each input position."""
    h, w = shape_hw
    kh, kw = layer.kernel_size
    params = ConvParams(
        kernel=np.ones((1, 1, kh, kw)),
        bias=np.zeros(1),
        stride=layer.stride,
        padding=layer.padding,
    )
    x = np.zeros((1, 1, h, w))
    _, _, ho, wo = conv_output_shape(x.shape, params)
    grad_x, _, _ = conv2d_backward(x, params, np.ones((1, 1, ho, wo)))
    return grad_x[0, 0]


def synaptic_events(trace: SimulationTrace, net: SpikingNetwork) -> int:
    """Fan-out-weighted accumulate count: each spike priced by what it triggers.

    A spike entering a convolution costs one accumulate per kernel window
    covering its position and per output channel (an interior spike under a
    3x3 kernel with 4 output channels triggers 36).  A spike entering an
    average pool costs one accumulate and keeps propagating from the pooled
    position; nearest upsampling copies it to four positions for free;
    concat only routes.  The first layer is analog and excluded here, as in
    :func:`count_snn_flops`.
    """
    spec = net.spec
    consumers: dict[int, list] = {}
    for layer in spec.layers[1:]:
        for src in layer.inputs:
            consumers.setdefault(src, []).append(layer)

    # Spike-count carriers start at the relu sites and move through the
    # routing layers; convolutions absorb them.
    carriers: dict[int, np.ndarray] = {}
    relu_map = spec.relu_of_conv()
    for conv_id, relu_id in relu_map.items():
        if conv_id in trace.spike_counts:
            carriers[relu_id] = trace.spike_counts[conv_id]

    events = 0.0
    for layer in spec.layers[1:]:
        counts = carriers.get(layer.id)
        if counts is None:
            continue
        for consumer in consumers.get(layer.id, []):
            if consumer.kind == "conv":
                cov = _coverage(counts.shape[2:], consumer, counts.shape[1])
                events += float((counts.sum(axis=(0, 1)) * cov).sum()) * consumer.out_channels
            elif consumer.kind == "avgpool":
                events += float(counts.sum())
                pooled = counts.reshape(
                    counts.shape[0],
                    counts.shape[1],
                    counts.shape[2] // consumer.window,
                    consumer.window,
                    counts.shape[3] // consumer.window,
                    consumer.window,
                ).sum(axis=(3, 5))
                carriers[consumer.id] = carriers.get(consumer.id, 0) + pooled
            elif consumer.kind == "upsample":
                up = np.repeat(np.repeat(counts, 2, axis=2), 2, axis=3)
                carriers[consumer.id] = carriers.get(consumer.id, 0) + up
            elif consumer.kind == "concat":
                ch = spec.channels()
                if consumer.id not in carriers:
                    shape = (
                        counts.shape[0],
                        ch[consumer.id],
                        counts.shape[2],
                        counts.shape[3],
                    )
                    carriers[consumer.id] = np.zeros(shape)
                offset = 0
                for src in consumer.inputs:
                    if src == layer.id:
                        carriers[consumer.id][:, offset : offset + counts.shape[1]] += counts
                    offset += ch[src]
    return int(round(events))


def energy_report(counts, model: EnergyModel, params: int | None = None) -> dict:
    """Per-inference energy breakdown for spike counts or dense MAC counts."""
    if isinstance(counts, SnnOpCounts):
        scale = 1.0 / counts.batch
        op_spikes = counts.op_spikes * scale
        op_input = counts.op_input_layer * scale
        flops = op_spikes + op_input
        ops_energy = op_spikes * model.ac_energy + op_input * model.mac_energy
        report = {
            "kind": "snn",
            "flops": flops,
            "op_spikes": op_spikes,
            "op_input_layer": op_input,
        }
    elif isinstance(counts, AnnOpCounts):
        flops = float(counts.macs)
        ops_energy = flops * model.mac_energy
        params = counts.params if params is None else params
        report = {"kind": "ann", "flops": flops, "macs": flops}
    else:
        raise TypeError(f"unsupported counts type {type(counts).__name__}")
    n_params = params or 0
    accesses = model.flops_access_factor * flops + model.param_access_factor * n_params
    mem_energy = accesses * model.mem_access_energy
    report.update(
        {
            "params": n_params,
            "ops_energy_j": ops_energy,
            "mem_energy_j": mem_energy,
            "total_energy_j": ops_energy + mem_energy,
        }
    )
    return report


def format_energy_table(rows: dict[str, dict]) -> str:
    """Aligned text table of energy reports keyed by model name."""
    header = f"{'Model':<16} {'FLOPs':>12} {'Mem (J)':>12} {'Ops (J)':>12} {'Total (J)':>12}"
    lines = [header, "-" * len(header)]
    for name, rep in rows.items():
        lines.append(
            f"{name:<16} {rep['flops']:>12.2E} {rep['mem_energy_j']:>12.2E} "
            f"{rep['ops_energy_j']:>12.2E} {rep['total_energy_j']:>12.2E}"
        )
    return "\n".join(lines)
