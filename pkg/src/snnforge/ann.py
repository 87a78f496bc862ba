"""Network graphs, U-Net construction, training and activation statistics.

A network is a flat list of layers forming a DAG: each layer names the ids
of the layers feeding it.  Convolutions own parameters; relu, average pool,
nearest upsample and channel concat are parameter-free.  Encoder activations
may feed both the pooled path and a decoder concat, which is the whole point
of the architecture and the reason weight normalization needs per-part
statistics later on.
"""

from __future__ import annotations

import copy
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import MissingArtifactError, NumericalError, ShapeError
from .losses import cross_entropy, mean_abs_error
from .optim import OptimizerConfig, make_optimizer
from .tensor import (
    ConvParams,
    Tensor,
    avgpool2d_backward,
    avgpool2d_forward,
    concat_channels,
    conv2d_backward,
    conv2d_forward,
    load_tensor,
    normalize_padding,
    relu_backward,
    relu_forward,
    save_tensor,
    split_channels,
    upsample2x_backward,
    upsample2x_forward,
)

log = logging.getLogger(__name__)

_KINDS = ("input", "conv", "relu", "avgpool", "upsample", "concat")


@dataclass(frozen=True)
class LayerSpec:
    """One node of the network graph."""

    id: int
    kind: str
    inputs: tuple[int, ...] = ()
    out_channels: int = 0  # conv only
    kernel_size: tuple[int, int] = (0, 0)  # conv only
    stride: int = 1
    padding: tuple[int, int, int, int] = (0, 0, 0, 0)
    window: int = 2  # avgpool only

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layer list plus the skip links feeding decoder concats."""

    layers: tuple[LayerSpec, ...]
    in_channels: int
    skip_links: tuple[tuple[int, int], ...] = ()  # (source id, concat id)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.layers or self.layers[0].kind != "input":
            raise ValueError("layer 0 must be the input placeholder")
        consumed: set[int] = set()
        for i, layer in enumerate(self.layers):
            if layer.id != i:
                raise ValueError(f"layer ids must be consecutive, got {layer.id} at {i}")
            if layer.kind == "input":
                if i != 0:
                    raise ValueError("only layer 0 may be the input")
                continue
            if not layer.inputs:
                raise ValueError(f"layer {i} has no inputs")
            for src in layer.inputs:
                if not 0 <= src < i:
                    raise ValueError(f"layer {i} consumes undefined layer {src}")
                consumed.add(src)
            if layer.kind == "conv":
                if layer.out_channels < 1:
                    raise ValueError(f"conv layer {i} needs out_channels >= 1")
                if min(layer.kernel_size) < 1:
                    raise ValueError(f"conv layer {i} has invalid kernel {layer.kernel_size}")
            if layer.kind == "concat" and len(layer.inputs) < 2:
                raise ValueError(f"concat layer {i} needs at least two inputs")
        dangling = set(range(len(self.layers) - 1)) - consumed
        if dangling:
            raise ValueError(f"layers {sorted(dangling)} are never consumed")
        concat_first = {c: s for s, c in self.skip_links}
        for cid, src in concat_first.items():
            layer = self.layers[cid]
            if layer.kind != "concat" or layer.inputs[0] != src:
                raise ValueError(
                    f"skip link ({src}, {cid}) does not match concat inputs "
                    f"{getattr(layer, 'inputs', ())}"
                )

    @property
    def output_id(self) -> int:
        return self.layers[-1].id

    def conv_ids(self) -> list[int]:
        return [l.id for l in self.layers if l.kind == "conv"]

    def relu_of_conv(self) -> dict[int, int]:
        """Map conv id -> relu id for convs directly followed by a relu."""
        out = {}
        for layer in self.layers:
            if layer.kind == "relu":
                src = layer.inputs[0]
                if self.layers[src].kind == "conv":
                    out[src] = layer.id
        return out

    def channels(self) -> dict[int, int]:
        """Channel count of every layer's output."""
        ch: dict[int, int] = {0: self.in_channels}
        for layer in self.layers[1:]:
            if layer.kind == "conv":
                ch[layer.id] = layer.out_channels
            elif layer.kind == "concat":
                ch[layer.id] = sum(ch[s] for s in layer.inputs)
            else:
                ch[layer.id] = ch[layer.inputs[0]]
        return ch

    def to_json(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "skip_links": [list(p) for p in self.skip_links],
            "layers": [
                {
                    "id": l.id,
                    "kind": l.kind,
                    "inputs": list(l.inputs),
                    "out_channels": l.out_channels,
                    "kernel_size": list(l.kernel_size),
                    "stride": l.stride,
                    "padding": list(l.padding),
                    "window": l.window,
                }
                for l in self.layers
            ],
        }

    @staticmethod
    def from_json(doc: dict) -> "NetworkSpec":
        layers = tuple(
            LayerSpec(
                id=d["id"],
                kind=d["kind"],
                inputs=tuple(d["inputs"]),
                out_channels=d["out_channels"],
                kernel_size=tuple(d["kernel_size"]),
                stride=d["stride"],
                padding=tuple(d["padding"]),
                window=d["window"],
            )
            for d in doc["layers"]
        )
        return NetworkSpec(
            layers=layers,
            in_channels=doc["in_channels"],
            skip_links=tuple(tuple(p) for p in doc["skip_links"]),
        )


# Parameters are a flat dict keyed by (conv layer id, "kernel" | "bias").
Params = dict[tuple[int, str], Tensor]


@dataclass
class Checkpoint:
    spec: NetworkSpec
    params: Params
    metadata: dict = field(default_factory=dict)

    def conv_params(self, layer: LayerSpec) -> ConvParams:
        return ConvParams(
            kernel=self.params[(layer.id, "kernel")],
            bias=self.params[(layer.id, "bias")],
            stride=layer.stride,
            padding=layer.padding,
        )


class _UNetBuilder:
    def __init__(self, in_channels: int):
        self.layers = [LayerSpec(id=0, kind="input")]
        self.skip_links: list[tuple[int, int]] = []
        self.in_channels = in_channels

    def add(self, kind: str, inputs: tuple[int, ...], **kw) -> int:
        lid = len(self.layers)
        self.layers.append(LayerSpec(id=lid, kind=kind, inputs=inputs, **kw))
        return lid

    def conv(self, src: int, out_ch: int, k: int, padding) -> int:
        return self.add(
            "conv",
            (src,),
            out_channels=out_ch,
            kernel_size=(k, k),
            padding=normalize_padding(padding),
        )

    def double_conv(self, src: int, out_ch: int) -> int:
        c1 = self.conv(src, out_ch, 3, 1)
        r1 = self.add("relu", (c1,))
        c2 = self.conv(r1, out_ch, 3, 1)
        return self.add("relu", (c2,))

    def build(self) -> NetworkSpec:
        return NetworkSpec(
            layers=tuple(self.layers),
            in_channels=self.in_channels,
            skip_links=tuple(self.skip_links),
        )


def build_unet(
    width_factor: float,
    in_channels: int,
    out_channels: int,
    depth: int = 4,
    base_channels: int = 64,
) -> NetworkSpec:
    """U-Net graph: `depth` pool stages, a bottleneck, `depth` upsample stages.

    Stage channel counts start at base_channels * width_factor and double per
    stage.  Each decoder stage is nearest 2x upsampling, a 2x2 convolution
    (padded on the trailing sides to keep the size), then a concat of the
    matching encoder activation (skip part first) followed by a double conv.
    The head is an un-activated 1x1 convolution.
    """
    base = base_channels * width_factor
    if abs(base - round(base)) > 1e-9 or round(base) < 1:
        raise ValueError(
            f"width_factor {width_factor} gives non-integer or zero base channels ({base})"
        )
    if depth < 1:
        raise ValueError(f"depth must be >= 1, got {depth}")
    ch = [int(round(base)) * 2**i for i in range(depth + 1)]

    b = _UNetBuilder(in_channels)
    src = 0
    skips: list[int] = []
    for stage in range(depth):
        act = b.double_conv(src, ch[stage])
        skips.append(act)
        src = b.add("avgpool", (act,), window=2)
    src = b.double_conv(src, ch[depth])
    for stage in reversed(range(depth)):
        up = b.add("upsample", (src,))
        c = b.conv(up, ch[stage], 2, (0, 1, 0, 1))
        up_act = b.add("relu", (c,))
        cat = b.add("concat", (skips[stage], up_act))
        b.skip_links.append((skips[stage], cat))
        src = b.double_conv(cat, ch[stage])
    b.conv(src, out_channels, 1, 0)
    return b.build()


def init_checkpoint(spec: NetworkSpec, seed: int, metadata: dict | None = None) -> Checkpoint:
    """Kaiming-uniform kernels (fan-in), zero biases, deterministic in the seed."""
    rng = np.random.default_rng(seed)
    ch = spec.channels()
    params: Params = {}
    for layer in spec.layers:
        if layer.kind != "conv":
            continue
        cin = ch[layer.inputs[0]]
        kh, kw = layer.kernel_size
        fan_in = cin * kh * kw
        bound = np.sqrt(6.0 / fan_in)
        params[(layer.id, "kernel")] = rng.uniform(
            -bound, bound, size=(layer.out_channels, cin, kh, kw)
        )
        params[(layer.id, "bias")] = np.zeros(layer.out_channels)
    meta = {"seed": seed}
    meta.update(metadata or {})
    return Checkpoint(spec=spec, params=params, metadata=meta)


@dataclass
class ForwardRecord:
    """Post-relu activations and concat input parts captured during a forward."""

    activations: dict[int, Tensor]
    concat_parts: dict[tuple[int, int], Tensor]


def _forward_values(ckpt: Checkpoint, x: Tensor) -> dict[int, Tensor]:
    values: dict[int, Tensor] = {0: np.asarray(x, dtype=np.float64)}
    for layer in ckpt.spec.layers[1:]:
        if layer.kind == "conv":
            values[layer.id] = conv2d_forward(values[layer.inputs[0]], ckpt.conv_params(layer))
        elif layer.kind == "relu":
            values[layer.id] = relu_forward(values[layer.inputs[0]])
        elif layer.kind == "avgpool":
            values[layer.id] = avgpool2d_forward(values[layer.inputs[0]], layer.window)
        elif layer.kind == "upsample":
            values[layer.id] = upsample2x_forward(values[layer.inputs[0]])
        elif layer.kind == "concat":
            values[layer.id] = concat_channels([values[s] for s in layer.inputs])
    return values


def forward(
    ckpt: Checkpoint, x: Tensor, record: bool = False
) -> tuple[Tensor, ForwardRecord | None]:
    """Run the network; optionally capture activations for statistics."""
    values = _forward_values(ckpt, x)
    rec = None
    if record:
        acts = {l.id: values[l.id] for l in ckpt.spec.layers if l.kind == "relu"}
        parts = {
            (l.id, i): values[src]
            for l in ckpt.spec.layers
            if l.kind == "concat"
            for i, src in enumerate(l.inputs)
        }
        rec = ForwardRecord(activations=acts, concat_parts=parts)
    return values[ckpt.spec.output_id], rec


def backward(
    ckpt: Checkpoint, values: dict[int, Tensor], grad_out: Tensor
) -> tuple[Params, Tensor]:
    """Backpropagate grad_out through cached forward values.

    Returns parameter gradients (same keys as ckpt.params) and the gradient
    with respect to the network input.
    """
    spec = ckpt.spec
    ch = spec.channels()
    node_grads: dict[int, Tensor] = {spec.output_id: np.asarray(grad_out, dtype=np.float64)}
    grads: Params = {}

    def push(src: int, g: Tensor) -> None:
        if src in node_grads:
            node_grads[src] = node_grads[src] + g
        else:
            node_grads[src] = g

    for layer in reversed(spec.layers[1:]):
        g = node_grads.get(layer.id)
        if g is None:
            continue
        if layer.kind == "conv":
            gx, gk, gb = conv2d_backward(values[layer.inputs[0]], ckpt.conv_params(layer), g)
            grads[(layer.id, "kernel")] = gk
            grads[(layer.id, "bias")] = gb
            push(layer.inputs[0], gx)
        elif layer.kind == "relu":
            push(layer.inputs[0], relu_backward(values[layer.inputs[0]], g))
        elif layer.kind == "avgpool":
            push(layer.inputs[0], avgpool2d_backward(g, layer.window))
        elif layer.kind == "upsample":
            push(layer.inputs[0], upsample2x_backward(g))
        elif layer.kind == "concat":
            parts = split_channels(g, [ch[s] for s in layer.inputs])
            for src, part in zip(layer.inputs, parts):
                push(src, part)
    return grads, node_grads[0]


def _batched(count: int, batch_size: int, rng: np.random.Generator | None):
    order = np.arange(count)
    if rng is not None:
        rng.shuffle(order)
    for at in range(0, count, batch_size):
        yield order[at : at + batch_size]


def train(
    ckpt: Checkpoint,
    dataset: list[tuple[Tensor, Tensor]],
    loss_kind: str,
    optimizer_config: OptimizerConfig,
    epochs: int,
) -> Checkpoint:
    """Mini-batch training; returns a new checkpoint with the loss curve attached.

    dataset entries are (input C x H x W, target); the target is an integer
    class map H x W for "segmentation" and a float map C x H x W for
    "denoise".
    """
    if loss_kind not in ("segmentation", "denoise"):
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    if not dataset:
        raise ValueError("training dataset is empty")
    out = Checkpoint(
        spec=ckpt.spec,
        params={k: v.copy() for k, v in ckpt.params.items()},
        metadata=copy.deepcopy(ckpt.metadata),
    )
    opt = make_optimizer(optimizer_config)
    rng = np.random.default_rng(optimizer_config.seed)
    curve: list[float] = []
    for epoch in range(epochs):
        epoch_losses = []
        for idx in _batched(len(dataset), optimizer_config.batch_size, rng):
            xs = np.stack([dataset[i][0] for i in idx])
            ys = np.stack([dataset[i][1] for i in idx])
            values = _forward_values(out, xs)
            pred = values[out.spec.output_id]
            if loss_kind == "segmentation":
                loss, grad = cross_entropy(pred, ys)
            else:
                loss, grad = mean_abs_error(pred, ys)
            if not np.isfinite(loss):
                raise NumericalError(
                    f"loss became non-finite at epoch {epoch}, batch start {idx[0]}"
                )
            grads, _ = backward(out, values, grad)
            opt.step(out.params, grads)
            epoch_losses.append(loss)
        curve.append(float(np.mean(epoch_losses)))
    history = out.metadata.setdefault("train_loss", [])
    history.extend(curve)
    out.metadata["epochs"] = out.metadata.get("epochs", 0) + epochs
    return out


@dataclass
class ActivationStats:
    """Percentile activation ceilings gathered over a dataset.

    lambdas holds one ceiling per relu site and per concat site (the concat
    value pooled over all parts); part_lambdas holds the per-part ceilings a
    concat-consuming convolution needs for per-connection scaling.
    """

    percentile: float
    lambdas: dict[int, float]
    part_lambdas: dict[int, tuple[float, ...]]

    def to_json(self) -> dict:
        return {
            "percentile": self.percentile,
            "lambdas": {str(k): v for k, v in self.lambdas.items()},
            "part_lambdas": {str(k): list(v) for k, v in self.part_lambdas.items()},
        }

    @staticmethod
    def from_json(doc: dict) -> "ActivationStats":
        return ActivationStats(
            percentile=doc["percentile"],
            lambdas={int(k): float(v) for k, v in doc["lambdas"].items()},
            part_lambdas={int(k): tuple(v) for k, v in doc["part_lambdas"].items()},
        )


def pooled_percentile(chunks: list[Tensor], percentile: float) -> float:
    """Linear-interpolation percentile over every scalar in the chunks."""
    pool = np.concatenate([np.asarray(c, dtype=np.float64).ravel() for c in chunks])
    return float(np.percentile(pool, percentile, method="linear"))


def collect_stats(
    ckpt: Checkpoint, dataset: list[Tensor], percentile: float = 99.9
) -> ActivationStats:
    """Pool every activation scalar over the dataset and take the percentile.

    Buffers are float32 to keep 500-image collections in memory; the
    percentile itself is evaluated in float64.  A layer that never activates
    over the whole dataset is a hard error naming the layer.
    """
    if not 0.0 < percentile <= 100.0:
        raise ValueError(f"percentile must be in (0, 100], got {percentile}")
    if not dataset:
        raise ValueError("stats dataset is empty")
    spec = ckpt.spec
    buffers: dict[int, list[Tensor]] = {
        l.id: [] for l in spec.layers if l.kind == "relu"
    }
    # Concat parts whose producer is not itself a relu site need their own
    # buffers; parts fed directly by a relu reuse that site's buffer.
    extra_parts: dict[tuple[int, int], list[Tensor]] = {}
    concat_layers = [l for l in spec.layers if l.kind == "concat"]
    for layer in concat_layers:
        for i, src in enumerate(layer.inputs):
            if spec.layers[src].kind != "relu":
                extra_parts[(layer.id, i)] = []

    for sample in dataset:
        x = np.asarray(sample, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        _, rec = forward(ckpt, x, record=True)
        assert rec is not None
        for lid, act in rec.activations.items():
            buffers[lid].append(act.astype(np.float32).ravel())
        for key, part in rec.concat_parts.items():
            if key in extra_parts:
                extra_parts[key].append(part.astype(np.float32).ravel())

    lambdas: dict[int, float] = {}
    for lid, chunks in buffers.items():
        pool_max = max(float(c.max()) for c in chunks)
        if pool_max <= 0.0:
            raise NumericalError(
                f"layer {lid} produced all-zero activations over the dataset"
            )
        lambdas[lid] = pooled_percentile(chunks, percentile)

    part_lambdas: dict[int, tuple[float, ...]] = {}
    for layer in concat_layers:
        per_part = []
        all_chunks: list[Tensor] = []
        for i, src in enumerate(layer.inputs):
            chunks = (
                buffers[src]
                if spec.layers[src].kind == "relu"
                else extra_parts[(layer.id, i)]
            )
            per_part.append(pooled_percentile(chunks, percentile))
            all_chunks.extend(chunks)
        part_lambdas[layer.id] = tuple(per_part)
        lambdas[layer.id] = pooled_percentile(all_chunks, percentile)

    return ActivationStats(
        percentile=percentile, lambdas=lambdas, part_lambdas=part_lambdas
    )


_CKPT_FORMAT = "snnforge-checkpoint"


def save_checkpoint(ckpt: Checkpoint, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    ids = sorted({lid for lid, _ in ckpt.params})
    manifest = {
        "format": _CKPT_FORMAT,
        "version": 1,
        "spec": ckpt.spec.to_json(),
        "metadata": ckpt.metadata,
        "param_ids": ids,
    }
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    for lid in ids:
        save_tensor(os.path.join(directory, f"kernel_{lid}.snnt"), ckpt.params[(lid, "kernel")])
        save_tensor(os.path.join(directory, f"bias_{lid}.snnt"), ckpt.params[(lid, "bias")])


def load_checkpoint(directory) -> Checkpoint:
    path = os.path.join(directory, "manifest.json")
    if not os.path.exists(path):
        raise MissingArtifactError(f"no checkpoint manifest at {path}")
    with open(path) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != _CKPT_FORMAT:
        raise MissingArtifactError(f"{path} is not a checkpoint manifest")
    spec = NetworkSpec.from_json(manifest["spec"])
    params: Params = {}
    for lid in manifest["param_ids"]:
        params[(lid, "kernel")] = load_tensor(os.path.join(directory, f"kernel_{lid}.snnt"))
        params[(lid, "bias")] = load_tensor(os.path.join(directory, f"bias_{lid}.snnt"))
    return Checkpoint(spec=spec, params=params, metadata=manifest["metadata"])
