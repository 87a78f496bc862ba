"""Turn a trained checkpoint into a spiking network via weight normalization.

Both modes rescale layer weights so post-relu activations land in the range
a threshold schedule can represent.  The layer-wise mode uses one input
ceiling per consuming layer; the per-connection mode resolves a separate
ceiling for every channel slice entering through a concat, so decoder
layers fed by parts with very different activation scales keep their spike
rates proportional to the original activations.

Elsewhere in the package a "ceiling" (ActivationStats lambda) is the chosen
percentile of all activation scalars a site produced over a dataset.  The
input image ceiling is pinned to 1 (inputs are normalized to [0, 1]) and
the un-activated output layer's ceiling is pinned to 1 as well, so decoded
outputs stay on the original network's scale.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .ann import ActivationStats, Checkpoint, NetworkSpec, Params
from .errors import MissingArtifactError
from .neuron import ThresholdSchedule, optimal_thresholds
from .tensor import ConvParams, Tensor, conv2d_forward, load_tensor, save_tensor

log = logging.getLogger(__name__)

LAMBDA_FLOOR = 1e-6


@dataclass
class SpikingNetwork:
    """Normalized weights plus a threshold schedule per gated convolution.

    schedules is keyed by conv layer id; exactly the convs that feed a relu
    site get a schedule (the output head stays un-gated and accumulates raw
    current).
    """

    spec: NetworkSpec
    params: Params
    schedules: dict[int, ThresholdSchedule]
    mode: str
    stats: ActivationStats
    metadata: dict = field(default_factory=dict)

    def conv_params(self, layer) -> ConvParams:
        return ConvParams(
            kernel=self.params[(layer.id, "kernel")],
            bias=self.params[(layer.id, "bias")],
            stride=layer.stride,
            padding=layer.padding,
        )

    def first_conv_id(self) -> int:
        for layer in self.spec.layers[1:]:
            if layer.kind == "conv":
                return layer.id
        raise ValueError("network has no convolution layers")


def _clamped(value: float, what: str) -> float:
    if value < LAMBDA_FLOOR:
        log.warning(
            "activation ceiling for %s is %.3g; clamping to %.1e", what, value, LAMBDA_FLOOR
        )
        return LAMBDA_FLOOR
    return value


def _input_scale_vector(
    spec: NetworkSpec, stats: ActivationStats, node_id: int, per_part: bool
) -> np.ndarray:
    """Per-channel activation ceiling of the tensor a layer consumes.

    Pooling and upsampling pass their producer's ceiling through unchanged.
    At a concat, per_part resolves one ceiling per input slice; otherwise the
    ceiling pooled over the whole concatenated tensor applies to every
    channel.
    """
    layer = spec.layers[node_id]
    ch = spec.channels()
    if layer.kind == "input":
        return np.ones(ch[node_id])
    if layer.kind == "relu":
        return np.full(ch[node_id], _clamped(stats.lambdas[node_id], f"layer {node_id}"))
    if layer.kind in ("avgpool", "upsample"):
        return _input_scale_vector(spec, stats, layer.inputs[0], per_part)
    if layer.kind == "concat":
        if per_part:
            pieces = [
                np.full(
                    ch[src],
                    _clamped(
                        stats.part_lambdas[node_id][i], f"concat {node_id} part {i}"
                    ),
                )
                for i, src in enumerate(layer.inputs)
            ]
            return np.concatenate(pieces)
        return np.full(ch[node_id], _clamped(stats.lambdas[node_id], f"concat {node_id}"))
    raise ValueError(
        f"layer {node_id} ({layer.kind}) feeds a convolution without an activation "
        "ceiling; cannot normalize"
    )


def _normalize(
    ckpt: Checkpoint,
    stats: ActivationStats,
    mode: str,
    num_thresholds: int,
    v_max: float,
    schedule_overrides: dict[int, ThresholdSchedule] | None,
) -> SpikingNetwork:
    spec = ckpt.spec
    relu_map = spec.relu_of_conv()
    per_part = mode == "connection"
    params: Params = {}
    schedules: dict[int, ThresholdSchedule] = {}
    for layer in spec.layers:
        if layer.kind != "conv":
            continue
        scale_in = _input_scale_vector(spec, stats, layer.inputs[0], per_part)
        if layer.id in relu_map:
            lam_out = _clamped(stats.lambdas[relu_map[layer.id]], f"layer {layer.id}")
        else:
            lam_out = 1.0
        kernel = ckpt.params[(layer.id, "kernel")]
        bias = ckpt.params[(layer.id, "bias")]
        params[(layer.id, "kernel")] = kernel * (scale_in[None, :, None, None] / lam_out)
        params[(layer.id, "bias")] = bias / lam_out
        if layer.id in relu_map:
            if schedule_overrides and layer.id in schedule_overrides:
                schedules[layer.id] = schedule_overrides[layer.id]
            else:
                schedules[layer.id] = optimal_thresholds(num_thresholds, v_max)
    return SpikingNetwork(
        spec=spec,
        params=params,
        schedules=schedules,
        mode=mode,
        stats=stats,
        metadata=dict(ckpt.metadata),
    )


def layerwise_normalize(
    ckpt: Checkpoint,
    stats: ActivationStats,
    num_thresholds: int = 4,
    v_max: float = 1.0,
    schedule_overrides: dict[int, ThresholdSchedule] | None = None,
) -> SpikingNetwork:
    """Scale each layer by input ceiling over output ceiling, one ratio per layer."""
    return _normalize(ckpt, stats, "layerwise", num_thresholds, v_max, schedule_overrides)


def connection_wise_normalize(
    ckpt: Checkpoint,
    stats: ActivationStats,
    num_thresholds: int = 4,
    v_max: float = 1.0,
    schedule_overrides: dict[int, ThresholdSchedule] | None = None,
) -> SpikingNetwork:
    """Like layer-wise, but weight slices after a concat use per-part ceilings.

    Layers not fed through a concat come out bit-identical to the layer-wise
    mode; only the channel slices of concat-consuming convolutions differ.
    """
    return _normalize(ckpt, stats, "connection", num_thresholds, v_max, schedule_overrides)


def static_encode(x: Tensor, first_layer: ConvParams) -> Tensor:
    """Constant input current for the first layer, reused at every step.

    The image is applied analog through the first convolution; the result
    feeds that layer's neurons unchanged for the whole window.
    """
    return conv2d_forward(x, first_layer)


def normalized_checkpoint(net: SpikingNetwork) -> Checkpoint:
    """View the normalized weights as a plain checkpoint for rate-free forwards."""
    return Checkpoint(
        spec=net.spec,
        params={k: v.copy() for k, v in net.params.items()},
        metadata=dict(net.metadata),
    )


_SNN_FORMAT = "snnforge-spiking"


def save_spiking_network(net: SpikingNetwork, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    ids = sorted({lid for lid, _ in net.params})
    manifest = {
        "format": _SNN_FORMAT,
        "version": 1,
        "spec": net.spec.to_json(),
        "metadata": net.metadata,
        "mode": net.mode,
        "schedules": {str(k): list(v.thresholds) for k, v in net.schedules.items()},
        "stats": net.stats.to_json(),
        "param_ids": ids,
    }
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    for lid in ids:
        save_tensor(os.path.join(directory, f"kernel_{lid}.snnt"), net.params[(lid, "kernel")])
        save_tensor(os.path.join(directory, f"bias_{lid}.snnt"), net.params[(lid, "bias")])


def load_spiking_network(directory) -> SpikingNetwork:
    path = os.path.join(directory, "manifest.json")
    if not os.path.exists(path):
        raise MissingArtifactError(f"no spiking network manifest at {path}")
    with open(path) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != _SNN_FORMAT:
        raise MissingArtifactError(f"{path} is not a spiking network manifest")
    spec = NetworkSpec.from_json(manifest["spec"])
    params: Params = {}
    for lid in manifest["param_ids"]:
        params[(lid, "kernel")] = load_tensor(os.path.join(directory, f"kernel_{lid}.snnt"))
        params[(lid, "bias")] = load_tensor(os.path.join(directory, f"bias_{lid}.snnt"))
    schedules = {
        int(k): ThresholdSchedule(tuple(v)) for k, v in manifest["schedules"].items()
    }
    return SpikingNetwork(
        spec=spec,
        params=params,
        schedules=schedules,
        mode=manifest["mode"],
        stats=ActivationStats.from_json(manifest["stats"]),
        metadata=manifest["metadata"],
    )
