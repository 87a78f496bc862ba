"""Time-stepped simulation of a converted spiking network.

Within a step, layers run in graph order, so a spike emitted by one layer
reaches the next layer in the same step; a window of T steps therefore
telescopes cleanly into accumulated flows.  The first convolution sees the
analog image as a constant current (computed once, injected every step).
Every other convolution consumes the weighted spike outputs of its
producers.  The output head has no neuron: it accumulates raw current over
the window, and the decoders read that accumulated flow.

The trace keeps, per gated convolution, the accumulated input current
(in_flow), the accumulated weighted spike output (out_flow), the gate
(in_flow > 0) and per-position spike counts.  out_flow is zeroed where the
gate is closed, matching the flow definition the backward pass relies on.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .ann import forward as ann_forward
from .conversion import SpikingNetwork, normalized_checkpoint, static_encode
from .errors import NumericalError, ShapeError
from .neuron import NeuronState, init_state, mt_step
from .tensor import (
    Tensor,
    avgpool2d_forward,
    concat_channels,
    conv2d_forward,
    save_tensor,
    upsample2x_forward,
)


@dataclass
class SimulationTrace:
    """Accumulated flows of one simulation window."""

    num_steps: int
    input: Tensor
    in_flow: dict[int, Tensor]
    out_flow: dict[int, Tensor]
    gates: dict[int, Tensor]
    spike_counts: dict[int, Tensor]
    output_id: int
    metadata: dict = field(default_factory=dict)

    @property
    def output_flow(self) -> Tensor:
        return self.in_flow[self.output_id]

    @property
    def batch(self) -> int:
        return self.input.shape[0]

    def total_spikes(self) -> dict[int, int]:
        return {lid: int(round(float(c.sum()))) for lid, c in self.spike_counts.items()}


def simulate(net: SpikingNetwork, x: Tensor, num_steps: int) -> SimulationTrace:
    """Run the network for num_steps and return its accumulated flows."""
    if num_steps < 1:
        raise ValueError(f"need at least one step, got {num_steps}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise ShapeError(f"input must be C x H x W or N x C x H x W, got rank {x.ndim}")
    spec = net.spec
    if spec.layers[-1].kind != "conv":
        raise ValueError("simulation expects a convolution output head")
    first_conv = net.first_conv_id()

    static_current = static_encode(x, net.conv_params(spec.layers[first_conv]))
    states: dict[int, NeuronState] = {}
    in_flow: dict[int, Tensor] = {}
    out_flow: dict[int, Tensor] = {}
    spike_counts: dict[int, Tensor] = {}

    for t in range(num_steps):
        values: dict[int, Tensor] = {0: x}
        for layer in spec.layers[1:]:
            kind = layer.kind
            if kind == "conv":
                if layer.id == first_conv:
                    current = static_current
                else:
                    current = conv2d_forward(values[layer.inputs[0]], net.conv_params(layer))
                if not np.all(np.isfinite(current)):
                    raise NumericalError(
                        f"non-finite current in layer {layer.id} at step {t}"
                    )
                if layer.id in in_flow:
                    in_flow[layer.id] += current
                else:
                    in_flow[layer.id] = current.copy()
                values[layer.id] = current
            elif kind == "relu":
                conv_id = layer.inputs[0]
                schedule = net.schedules[conv_id]
                state = states.get(conv_id)
                if state is None:
                    state = init_state(values[conv_id].shape, len(schedule))
                weighted, spikes, state = mt_step(state, values[conv_id], schedule)
                states[conv_id] = state
                step_counts = np.add.reduce(spikes)
                if conv_id in out_flow:
                    out_flow[conv_id] += weighted
                    spike_counts[conv_id] += step_counts
                else:
                    out_flow[conv_id] = weighted.copy()
                    spike_counts[conv_id] = step_counts
                values[layer.id] = weighted
            elif kind == "avgpool":
                values[layer.id] = avgpool2d_forward(values[layer.inputs[0]], layer.window)
            elif kind == "upsample":
                values[layer.id] = upsample2x_forward(values[layer.inputs[0]])
            elif kind == "concat":
                values[layer.id] = concat_channels([values[s] for s in layer.inputs])

    gates = {lid: (in_flow[lid] > 0.0).astype(np.float64) for lid in out_flow}
    for lid, gate in gates.items():
        out_flow[lid] = out_flow[lid] * gate

    return SimulationTrace(
        num_steps=num_steps,
        input=x,
        in_flow=in_flow,
        out_flow=out_flow,
        gates=gates,
        spike_counts=spike_counts,
        output_id=spec.output_id,
        metadata={"mode": net.mode},
    )


def decode_segmentation(trace: SimulationTrace) -> Tensor:
    """Per-pixel argmax of the accumulated output flow; ties go to the lowest class."""
    flow = trace.output_flow
    if flow.shape[1] < 2:
        raise ShapeError(
            f"segmentation decode needs at least 2 output channels, got {flow.shape[1]}"
        )
    return np.argmax(flow, axis=1)


def decode_denoise(trace: SimulationTrace, num_steps: int | None = None) -> Tensor:
    """Average output current per step, i.e. the predicted residual map."""
    steps = trace.num_steps if num_steps is None else num_steps
    return trace.output_flow / float(steps)


def rate_activation_correlation(net: SpikingNetwork, trace: SimulationTrace) -> dict[int, float]:
    """Pearson correlation between spike rates and normalized activations.

    For every gated convolution, compares out_flow / T against the matching
    post-relu activation of a conventional forward pass with the same
    (normalized) weights, over all batch elements and positions.
    """
    ckpt = normalized_checkpoint(net)
    _, rec = ann_forward(ckpt, trace.input, record=True)
    assert rec is not None
    relu_map = net.spec.relu_of_conv()
    out: dict[int, float] = {}
    for conv_id in sorted(net.schedules):
        rate = (trace.out_flow[conv_id] / trace.num_steps).ravel()
        act = rec.activations[relu_map[conv_id]].ravel()
        rate_sd, act_sd = rate.std(), act.std()
        if rate_sd == 0.0 or act_sd == 0.0:
            out[conv_id] = 1.0 if np.allclose(rate, act) else 0.0
        else:
            out[conv_id] = float(np.corrcoef(rate, act)[0, 1])
    return out


def trace_summary(trace: SimulationTrace) -> dict:
    return {
        "num_steps": trace.num_steps,
        "batch": trace.batch,
        "output_id": trace.output_id,
        "output_shape": list(trace.output_flow.shape),
        "total_spikes": {str(k): v for k, v in trace.total_spikes().items()},
    }


def save_trace(trace: SimulationTrace, directory, include_flows: bool = False) -> None:
    """Write the summary JSON, optionally with the flow tensors alongside."""
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "trace.json"), "w") as fh:
        json.dump(trace_summary(trace), fh, indent=2, sort_keys=True)
    if include_flows:
        for lid, arr in trace.in_flow.items():
            save_tensor(os.path.join(directory, f"in_flow_{lid}.snnt"), arr)
        for lid, arr in trace.out_flow.items():
            save_tensor(os.path.join(directory, f"out_flow_{lid}.snnt"), arr)
            save_tensor(os.path.join(directory, f"gate_{lid}.snnt"), trace.gates[lid])
