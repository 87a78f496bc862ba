"""Fine-tuning on accumulated spiking flows.

Over a simulation window the flows obey, layer by layer,

    in_flow = conv(out_flow_of_producer) + T * bias

because the per-step bias injection sums T times while everything else is
linear.  The backward pass treats this accumulated network like a relu
network whose derivative masks are the simulation gates (in_flow > 0)
frozen from the forward trace; gradients therefore need a single sweep, not
one per time step.  The bias gradient carries the factor T for the same
reason the identity above does.

The output head is linear and un-gated, so with the upstream spike pattern
fixed the loss is smooth in the head's parameters; deeper parameters see
the quantized flows, which is exactly the approximation the gradient check
oracles quantify.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .conversion import SpikingNetwork
from .errors import NumericalError
from .losses import cross_entropy, mean_abs_error
from .optim import OptimizerConfig, make_optimizer
from .runtime import SimulationTrace, simulate
from .tensor import (
    Tensor,
    avgpool2d_backward,
    avgpool2d_forward,
    concat_channels,
    conv2d_backward,
    split_channels,
    upsample2x_backward,
    upsample2x_forward,
)


@dataclass
class FinetuneConfig:
    num_steps: int = 20
    lr: float = 1e-6
    epochs: int = 1
    loss: str = "segmentation"  # or "denoise"
    optimizer: str = "adam"
    batch_size: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.num_steps < 1:
            raise ValueError(f"num_steps must be >= 1, got {self.num_steps}")
        if self.loss not in ("segmentation", "denoise"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")


def loss_segmentation(output_flow: Tensor, labels: Tensor) -> float:
    """Mean per-pixel cross entropy of the softmaxed accumulated output flow."""
    return cross_entropy(output_flow, labels)[0]


def loss_denoise(output_flow: Tensor, num_steps: int, target: Tensor) -> float:
    """Mean absolute error between the per-step output average and the target map."""
    return mean_abs_error(np.asarray(output_flow) / float(num_steps), target)[0]


def _loss_and_flow_grad(
    kind: str, output_flow: Tensor, target: Tensor, num_steps: int
) -> tuple[float, Tensor]:
    if kind == "segmentation":
        return cross_entropy(output_flow, target)
    loss, g = mean_abs_error(np.asarray(output_flow) / float(num_steps), target)
    return loss, g / float(num_steps)


def _replay_values(trace: SimulationTrace, net: SpikingNetwork) -> dict[int, Tensor]:
    """Accumulated value of every node, rebuilt from the stored flows.

    Node 0 carries T * input (the static current is injected every step), a
    gated conv contributes its masked out_flow, and the routing layers are
    linear so they commute with accumulation over the window.
    """
    spec = net.spec
    values: dict[int, Tensor] = {0: trace.input * float(trace.num_steps)}
    for layer in spec.layers[1:]:
        if layer.kind == "conv":
            values[layer.id] = trace.in_flow[layer.id]
        elif layer.kind == "relu":
            values[layer.id] = trace.out_flow[layer.inputs[0]]
        elif layer.kind == "avgpool":
            values[layer.id] = avgpool2d_forward(values[layer.inputs[0]], layer.window)
        elif layer.kind == "upsample":
            values[layer.id] = upsample2x_forward(values[layer.inputs[0]])
        elif layer.kind == "concat":
            values[layer.id] = concat_channels([values[s] for s in layer.inputs])
    return values


def asf_backward(
    trace: SimulationTrace, net: SpikingNetwork, output_grad: Tensor
) -> dict[tuple[int, str], Tensor]:
    """Parameter gradients from one backward sweep over accumulated flows.

    output_grad is the loss gradient with respect to the accumulated output
    flow.  Gates recorded in the trace stand in for relu derivatives; the
    output head passes its gradient through un-gated.
    """
    spec = net.spec
    ch = spec.channels()
    values = _replay_values(trace, net)
    t_steps = float(trace.num_steps)
    node_grads: dict[int, Tensor] = {
        spec.output_id: np.asarray(output_grad, dtype=np.float64)
    }
    grads: dict[tuple[int, str], Tensor] = {}

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
            gx, gk, gb = conv2d_backward(values[layer.inputs[0]], net.conv_params(layer), g)
            grads[(layer.id, "kernel")] = gk
            grads[(layer.id, "bias")] = gb * t_steps
            push(layer.inputs[0], gx)
        elif layer.kind == "relu":
            conv_id = layer.inputs[0]
            push(conv_id, g * trace.gates[conv_id])
        elif layer.kind == "avgpool":
            push(layer.inputs[0], avgpool2d_backward(g, layer.window))
        elif layer.kind == "upsample":
            push(layer.inputs[0], upsample2x_backward(g))
        elif layer.kind == "concat":
            parts = split_channels(g, [ch[s] for s in layer.inputs])
            for src, part in zip(layer.inputs, parts):
                push(src, part)
    return grads


def finetune(
    net: SpikingNetwork,
    dataset: list[tuple[Tensor, Tensor]],
    config: FinetuneConfig,
    loss_curve_path=None,
) -> SpikingNetwork:
    """Train the normalized weights against the simulated flows.

    dataset entries are (input C x H x W, target), targets as in
    conventional training.  Returns a new network; the per-epoch loss curve
    lands in its metadata and, when a path is given, per-batch losses in a
    CSV of (step, loss) rows.
    """
    if not dataset:
        raise ValueError("fine-tuning dataset is empty")
    out = SpikingNetwork(
        spec=net.spec,
        params={k: v.copy() for k, v in net.params.items()},
        schedules=dict(net.schedules),
        mode=net.mode,
        stats=net.stats,
        metadata=copy.deepcopy(net.metadata),
    )
    opt_cfg = OptimizerConfig(
        kind=config.optimizer,
        lr=config.lr,
        batch_size=config.batch_size,
        seed=config.seed,
    )
    opt = make_optimizer(opt_cfg)
    rng = np.random.default_rng(config.seed)
    curve: list[float] = []
    batch_rows: list[tuple[int, float]] = []
    step = 0
    for epoch in range(config.epochs):
        order = np.arange(len(dataset))
        rng.shuffle(order)
        epoch_losses = []
        for at in range(0, len(order), config.batch_size):
            idx = order[at : at + config.batch_size]
            xs = np.stack([dataset[i][0] for i in idx])
            ys = np.stack([dataset[i][1] for i in idx])
            trace = simulate(out, xs, config.num_steps)
            loss, flow_grad = _loss_and_flow_grad(
                config.loss, trace.output_flow, ys, config.num_steps
            )
            if not np.isfinite(loss):
                raise NumericalError(
                    f"fine-tuning loss became non-finite at epoch {epoch}, step {step}"
                )
            grads = asf_backward(trace, out, flow_grad)
            opt.step(out.params, grads)
            epoch_losses.append(loss)
            batch_rows.append((step, loss))
            step += 1
        curve.append(float(np.mean(epoch_losses)))
    history = out.metadata.setdefault("finetune_loss", [])
    history.extend(curve)
    out.metadata["finetune_steps"] = out.metadata.get("finetune_steps", 0) + step
    if loss_curve_path is not None:
        with open(loss_curve_path, "w") as fh:
            fh.write("step,loss\n")
            for s, l in batch_rows:
                fh.write(f"{s},{l!r}\n")
    return out
