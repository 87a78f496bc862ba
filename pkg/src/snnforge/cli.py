"""Command line pipeline driver.

Each subcommand reads one JSON config (plus SNNFORGE_* environment variables
and repeated --override section.key=value flags), runs a single pipeline
stage, and writes its artifacts plus a summary_<command>.json into
paths.out_dir.  Stages communicate only through those artifacts, so any
stage can be rerun in isolation.

Exit codes: 0 success, 2 bad configuration or arguments, 3 missing
artifact, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys

import numpy as np

from . import ann, datasets, energy, metrics, runtime
from .ann import ActivationStats, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config
from .conversion import (
    connection_wise_normalize,
    layerwise_normalize,
    load_spiking_network,
    save_spiking_network,
)
from .errors import ConfigError, MissingArtifactError, NumericalError, ShapeError
from .finetune import FinetuneConfig, finetune
from .optim import OptimizerConfig

ARTIFACT_DIRS = {"ann": "ann", "converted": "snn", "finetuned": "snn_ft"}


def _sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_json(path, doc: dict) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_summary(
    cfg: ExperimentConfig,
    command: str,
    inputs: list[str],
    outputs: list[str],
    metrics_doc: dict,
) -> str:
    doc = {
        "command": command,
        "config": cfg.to_dict(),
        "inputs": {path: _sha256_file(path) for path in inputs},
        "outputs": sorted(outputs),
        "metrics": metrics_doc,
    }
    path = os.path.join(cfg.paths.out_dir, f"summary_{command}.json")
    _write_json(path, doc)
    return path


def _loss_kind(task: str) -> str:
    return "segmentation" if task == "shapes-seg" else "denoise"


def _load_pairs(cfg: ExperimentConfig, split: str) -> list[tuple]:
    """(input, target) pairs for one split; denoise targets are noise maps."""
    directory = os.path.join(cfg.paths.data_dir, split)
    if cfg.task == "shapes-seg":
        return datasets.load_seg_dataset(directory)
    triples = datasets.load_denoise_dataset(directory, cfg.synthetic.sigma)
    return [(t["noisy"], t["noise"]) for t in triples]


def _load_model(cfg: ExperimentConfig, which: str):
    """(kind, model) where kind is 'ann' or 'snn'."""
    directory = os.path.join(cfg.paths.out_dir, ARTIFACT_DIRS[which])
    if which == "ann":
        return "ann", load_checkpoint(directory)
    return "snn", load_spiking_network(directory)


def _manifest_of(cfg: ExperimentConfig, which: str) -> str:
    return os.path.join(cfg.paths.out_dir, ARTIFACT_DIRS[which], "manifest.json")


def _predict(kind: str, model, xs, cfg: ExperimentConfig):
    """Class map (seg) or residual map (denoise) for a batch of inputs."""
    if kind == "ann":
        out, _ = ann.forward(model, xs)
        if cfg.task == "shapes-seg":
            return np.argmax(out, axis=1)
        return out
    trace = runtime.simulate(model, xs, cfg.simulation.num_steps)
    if cfg.task == "shapes-seg":
        return runtime.decode_segmentation(trace)
    return runtime.decode_denoise(trace)


def cmd_gen_synthetic(cfg: ExperimentConfig) -> dict:
    s = cfg.synthetic
    train_dir = os.path.join(cfg.paths.data_dir, "train")
    test_dir = os.path.join(cfg.paths.data_dir, "test")
    if cfg.task == "shapes-seg":
        datasets.gen_shapes_seg(train_dir, s.train_count, s.seed, s.size)
        datasets.gen_shapes_seg(test_dir, s.test_count, s.seed + 1, s.size)
    else:
        datasets.gen_noisy_images(train_dir, s.train_count, s.seed, s.size)
        datasets.gen_noisy_images(test_dir, s.test_count, s.seed + 1, s.size)
    outputs = [os.path.join(d, "manifest.json") for d in (train_dir, test_dir)]
    _write_summary(
        cfg,
        "gen-synthetic",
        inputs=[],
        outputs=outputs,
        metrics_doc={"train_count": s.train_count, "test_count": s.test_count},
    )
    print(f"generated {s.train_count} train / {s.test_count} test images in {cfg.paths.data_dir}")
    return {}


def cmd_train(cfg: ExperimentConfig) -> dict:
    pairs = _load_pairs(cfg, "train")
    spec = ann.build_unet(
        cfg.model.width_factor,
        cfg.model.in_channels,
        cfg.model.out_channels,
        depth=cfg.model.depth,
    )
    ckpt = ann.init_checkpoint(spec, seed=cfg.training.seed, metadata={"task": cfg.task})
    opt_cfg = OptimizerConfig(
        kind=cfg.training.optimizer,
        lr=cfg.training.lr,
        batch_size=cfg.training.batch_size,
        seed=cfg.training.seed,
    )
    trained = ann.train(ckpt, pairs, _loss_kind(cfg.task), opt_cfg, cfg.training.epochs)
    out_dir = os.path.join(cfg.paths.out_dir, "ann")
    save_checkpoint(trained, out_dir)
    curve = trained.metadata.get("train_loss", [])
    metrics_doc = {
        "train_loss": curve,
        "final_loss": curve[-1] if curve else None,
        "param_count": energy.param_count(spec),
    }
    _write_summary(
        cfg,
        "train",
        inputs=[os.path.join(cfg.paths.data_dir, "train", "manifest.json")],
        outputs=[os.path.join(out_dir, "manifest.json")],
        metrics_doc=metrics_doc,
    )
    final = metrics_doc["final_loss"]
    print(f"trained {cfg.training.epochs} epochs; final loss {final}")
    return metrics_doc


def cmd_stats(cfg: ExperimentConfig) -> dict:
    _, ckpt = _load_model(cfg, "ann")
    images = [x for x, _ in _load_pairs(cfg, "train")]
    stats = ann.collect_stats(ckpt, images, cfg.stats.percentile)
    path = os.path.join(cfg.paths.out_dir, "stats.json")
    _write_json(path, stats.to_json())
    metrics_doc = {"lambdas": {str(k): v for k, v in sorted(stats.lambdas.items())}}
    _write_summary(
        cfg,
        "stats",
        inputs=[
            os.path.join(cfg.paths.data_dir, "train", "manifest.json"),
            _manifest_of(cfg, "ann"),
        ],
        outputs=[path],
        metrics_doc=metrics_doc,
    )
    print(f"collected ceilings for {len(stats.lambdas)} activation sites")
    return metrics_doc


def cmd_convert(cfg: ExperimentConfig) -> dict:
    _, ckpt = _load_model(cfg, "ann")
    stats_path = os.path.join(cfg.paths.out_dir, "stats.json")
    if not os.path.exists(stats_path):
        raise MissingArtifactError(f"no activation stats at {stats_path}; run stats first")
    with open(stats_path) as fh:
        stats = ActivationStats.from_json(json.load(fh))
    normalize = (
        connection_wise_normalize if cfg.conversion.mode == "connection" else layerwise_normalize
    )
    net = normalize(ckpt, stats, cfg.conversion.num_thresholds, cfg.conversion.v_max)
    out_dir = os.path.join(cfg.paths.out_dir, "snn")
    save_spiking_network(net, out_dir)
    metrics_doc = {
        "mode": cfg.conversion.mode,
        "num_thresholds": cfg.conversion.num_thresholds,
        "v_max": cfg.conversion.v_max,
    }
    _write_summary(
        cfg,
        "convert",
        inputs=[_manifest_of(cfg, "ann"), stats_path],
        outputs=[os.path.join(out_dir, "manifest.json")],
        metrics_doc=metrics_doc,
    )
    print(f"converted with {cfg.conversion.mode} normalization -> {out_dir}")
    return metrics_doc


def cmd_simulate(cfg: ExperimentConfig) -> dict:
    which = cfg.simulation.network
    _, net = _load_model(cfg, which)
    pairs = _load_pairs(cfg, "test")
    if not pairs:
        raise MissingArtifactError(f"test split under {cfg.paths.data_dir} is empty")
    xs = np.stack([x for x, _ in pairs[: cfg.simulation.sample_count]])
    trace = runtime.simulate(net, xs, cfg.simulation.num_steps)
    runtime.save_trace(trace, cfg.paths.out_dir)
    corr = runtime.rate_activation_correlation(net, trace)
    metrics_doc = runtime.trace_summary(trace)
    metrics_doc["rate_activation_correlation"] = {str(k): v for k, v in sorted(corr.items())}
    _write_summary(
        cfg,
        "simulate",
        inputs=[
            _manifest_of(cfg, which),
            os.path.join(cfg.paths.data_dir, "test", "manifest.json"),
        ],
        outputs=[os.path.join(cfg.paths.out_dir, "trace.json")],
        metrics_doc=metrics_doc,
    )
    worst = min(corr.values()) if corr else float("nan")
    print(
        f"simulated {trace.batch} inputs for {trace.num_steps} steps; "
        f"worst rate/activation correlation {worst:.4f}"
    )
    return metrics_doc


def cmd_finetune(cfg: ExperimentConfig) -> dict:
    _, net = _load_model(cfg, "converted")
    pairs = _load_pairs(cfg, "train")
    fcfg = FinetuneConfig(
        num_steps=cfg.finetune.num_steps,
        lr=cfg.finetune.lr,
        epochs=cfg.finetune.epochs,
        loss=_loss_kind(cfg.task),
        optimizer=cfg.finetune.optimizer,
        batch_size=cfg.finetune.batch_size,
        seed=cfg.finetune.seed,
    )
    curve_path = os.path.join(cfg.paths.out_dir, "finetune_loss.csv")
    tuned = finetune(net, pairs, fcfg, loss_curve_path=curve_path)
    out_dir = os.path.join(cfg.paths.out_dir, "snn_ft")
    save_spiking_network(tuned, out_dir)
    curve = tuned.metadata.get("finetune_loss", [])
    metrics_doc = {
        "finetune_loss": curve,
        "final_loss": curve[-1] if curve else None,
        "num_steps": cfg.finetune.num_steps,
    }
    _write_summary(
        cfg,
        "finetune",
        inputs=[
            _manifest_of(cfg, "converted"),
            os.path.join(cfg.paths.data_dir, "train", "manifest.json"),
        ],
        outputs=[os.path.join(out_dir, "manifest.json"), curve_path],
        metrics_doc=metrics_doc,
    )
    print(f"fine-tuned {cfg.finetune.epochs} epochs; final loss {metrics_doc['final_loss']}")
    return metrics_doc


def _eval_one(cfg: ExperimentConfig, which: str, pairs: list[tuple]) -> dict:
    kind, model = _load_model(cfg, which)
    bs = cfg.eval.batch_size
    if cfg.task == "shapes-seg":
        conf = np.zeros((cfg.model.out_channels, cfg.model.out_channels))
        for lo in range(0, len(pairs), bs):
            chunk = pairs[lo : lo + bs]
            xs = np.stack([x for x, _ in chunk])
            ys = np.stack([y for _, y in chunk])
            pred = _predict(kind, model, xs, cfg)
            conf += metrics.confusion_matrix(pred, ys, cfg.model.out_channels)
        scores = metrics.scores_from_confusion(conf)
        return {"name": which, **dataclasses.asdict(scores)}
    directory = os.path.join(cfg.paths.data_dir, "test")
    triples = datasets.load_denoise_dataset(directory, cfg.synthetic.sigma)
    psnrs, ssims = [], []
    for lo in range(0, len(triples), bs):
        chunk = triples[lo : lo + bs]
        xs = np.stack([t["noisy"] for t in chunk])
        residual = _predict(kind, model, xs, cfg)
        recon = np.clip(xs - residual, 0.0, 1.0)
        for i, t in enumerate(chunk):
            scored = metrics.image_scores(recon[i, 0], t["clean"][0])
            psnrs.append(scored.psnr)
            ssims.append(scored.ssim)
    return {
        "name": which,
        "psnr": float(np.mean(psnrs)),
        "ssim": float(np.mean(ssims)),
    }


def cmd_eval(cfg: ExperimentConfig) -> dict:
    pairs = _load_pairs(cfg, "test")
    if not pairs:
        raise MissingArtifactError(f"test split under {cfg.paths.data_dir} is empty")
    left = _eval_one(cfg, cfg.eval.left, pairs)
    right = _eval_one(cfg, cfg.eval.right, pairs)
    doc = {
        "task": cfg.task,
        "num_steps": cfg.simulation.num_steps,
        "test_count": len(pairs),
        "left": left,
        "right": right,
    }
    path = os.path.join(
        cfg.paths.out_dir, f"eval_{cfg.eval.left}_{cfg.eval.right}.json"
    )
    _write_json(path, doc)
    inputs = [os.path.join(cfg.paths.data_dir, "test", "manifest.json")]
    for which in dict.fromkeys((cfg.eval.left, cfg.eval.right)):
        inputs.append(_manifest_of(cfg, which))
    _write_summary(cfg, "eval", inputs=inputs, outputs=[path], metrics_doc=doc)
    keys = [k for k in left if k != "name"]
    for side in (left, right):
        cols = "  ".join(f"{k}={side[k]:.4f}" for k in keys)
        print(f"{side['name']:<12} {cols}")
    return doc


def cmd_energy(cfg: ExperimentConfig) -> dict:
    which = cfg.energy.network
    _, net = _load_model(cfg, which)
    pairs = _load_pairs(cfg, "test")
    if not pairs:
        raise MissingArtifactError(f"test split under {cfg.paths.data_dir} is empty")
    xs = np.stack([x for x, _ in pairs[: cfg.energy.sample_count]])
    trace = runtime.simulate(net, xs, cfg.simulation.num_steps)
    model = energy.EnergyModel(
        mac_energy=cfg.energy.mac_energy,
        ac_energy=cfg.energy.ac_energy,
        mem_access_energy=cfg.energy.mem_access_energy,
        flops_access_factor=cfg.energy.flops_access_factor,
        param_access_factor=cfg.energy.param_access_factor,
    )
    input_hw = xs.shape[-2:]
    params = energy.param_count(net.spec)
    snn_counts = energy.count_snn_flops(trace, net)
    snn_rep = energy.energy_report(snn_counts, model, params=params)
    ann_counts = energy.AnnOpCounts(macs=energy.ann_flops(net.spec, input_hw), params=params)
    ann_rep = energy.energy_report(ann_counts, model)
    doc = {
        "ann": ann_rep,
        "snn": snn_rep,
        "flops_ratio": ann_rep["flops"] / snn_rep["flops"],
        "ops_energy_ratio": ann_rep["ops_energy_j"] / snn_rep["ops_energy_j"],
        "total_energy_ratio": ann_rep["total_energy_j"] / snn_rep["total_energy_j"],
        "synaptic_events": energy.synaptic_events(trace, net) / trace.batch,
        "num_steps": cfg.simulation.num_steps,
        "sample_count": int(trace.batch),
        "network": which,
    }
    path = os.path.join(cfg.paths.out_dir, "energy.json")
    _write_json(path, doc)
    _write_summary(
        cfg,
        "energy",
        inputs=[
            _manifest_of(cfg, which),
            os.path.join(cfg.paths.data_dir, "test", "manifest.json"),
        ],
        outputs=[path],
        metrics_doc=doc,
    )
    print(energy.format_energy_table({"ANN": ann_rep, f"SNN ({which})": snn_rep}))
    print(f"ops energy ratio (ANN/SNN): {doc['ops_energy_ratio']:.1f}x")
    return doc


COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic,
    "train": cmd_train,
    "stats": cmd_stats,
    "convert": cmd_convert,
    "simulate": cmd_simulate,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "energy": cmd_energy,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="snnforge",
        description="Convert, simulate, fine-tune and measure spiking U-Nets.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="path to a JSON config")
        p.add_argument(
            "--override",
            action="append",
            default=[],
            metavar="SECTION.KEY=VALUE",
            help="override one config value; may repeat",
        )
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, overrides=args.override)
        COMMANDS[args.command](cfg)
    except (ConfigError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
