"""Synthetic datasets and image ingestion.

Two generators cover the desk-scale experiments: grayscale scenes of
circles and rectangles with a three-class label map, and smooth grayscale
images paired with Gaussian-noised copies at several noise levels.  Both
are fully determined by their seed; a manifest in each dataset directory
lists the files and the generation parameters.
"""

from __future__ import annotations

import json
import os

import numpy as np
from PIL import Image

from .errors import MissingArtifactError, ShapeError
from .tensor import Tensor

SIGMAS = (15, 25, 50)


def save_image_png(path, img: Tensor) -> None:
    """Write a [0, 1] float image as 8-bit grayscale PNG."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8), mode="L").save(path)


def save_label_png(path, labels: Tensor) -> None:
    """Write an integer class map as raw 8-bit PNG values."""
    arr = np.asarray(labels)
    if arr.min() < 0 or arr.max() > 255:
        raise ShapeError(f"labels out of 8-bit range: [{arr.min()}, {arr.max()}]")
    Image.fromarray(arr.astype(np.uint8), mode="L").save(path)


def load_image(path) -> Tensor:
    """Read an 8-bit grayscale PNG or PGM as a [0, 1] float map."""
    if not os.path.exists(path):
        raise MissingArtifactError(f"no image at {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64)
    return arr / 255.0


def load_label(path) -> Tensor:
    if not os.path.exists(path):
        raise MissingArtifactError(f"no label map at {path}")
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.int64)


def _write_manifest(out_dir, doc: dict) -> None:
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


def _read_manifest(directory) -> dict:
    path = os.path.join(directory, "manifest.json")
    if not os.path.exists(path):
        raise MissingArtifactError(f"no dataset manifest at {path}")
    with open(path) as fh:
        return json.load(fh)


def gen_shapes_seg(out_dir, count: int, seed: int, size: int = 64) -> dict:
    """Scenes of bright circles (class 1) and dimmer rectangles (class 2).

    Shapes overlap by draw order; mild pixel noise keeps the task from being
    a pure threshold lookup.  Returns the manifest.
    """
    rng = np.random.default_rng(seed)
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "labels"), exist_ok=True)
    files = []
    yy, xx = np.mgrid[0:size, 0:size]
    # shape dimensions scale with the canvas (radius 6..13 and sides 8..24
    # on the reference 64-pixel canvas)
    r_lo, r_hi = size * 6.0 / 64.0, size * 13.0 / 64.0
    side_lo = max(2, size * 8 // 64)
    side_hi = max(side_lo + 1, size * 25 // 64)
    for i in range(count):
        img = np.full((size, size), 0.05)
        lab = np.zeros((size, size), dtype=np.int64)
        shapes = []
        for _ in range(rng.integers(1, 3)):
            shapes.append(("circle", rng))
        for _ in range(rng.integers(1, 3)):
            shapes.append(("rect", rng))
        order = rng.permutation(len(shapes))
        for k in order:
            kind, _ = shapes[k]
            if kind == "circle":
                r = rng.uniform(r_lo, r_hi)
                cy, cx = rng.uniform(r, size - r, size=2)
                mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
                img[mask] = rng.uniform(0.55, 0.80)
                lab[mask] = 1
            else:
                h, w = rng.integers(side_lo, side_hi, size=2)
                y0 = rng.integers(0, size - h + 1)
                x0 = rng.integers(0, size - w + 1)
                img[y0 : y0 + h, x0 : x0 + w] = rng.uniform(0.25, 0.45)
                lab[y0 : y0 + h, x0 : x0 + w] = 2
        img = np.clip(img + rng.normal(0.0, 0.02, size=img.shape), 0.0, 1.0)
        img_name = f"images/img_{i:04d}.png"
        lab_name = f"labels/lab_{i:04d}.png"
        save_image_png(os.path.join(out_dir, img_name), img)
        save_label_png(os.path.join(out_dir, lab_name), lab)
        files.append({"image": img_name, "label": lab_name})
    manifest = {
        "kind": "shapes-seg",
        "count": count,
        "seed": seed,
        "size": size,
        "num_classes": 3,
        "files": files,
    }
    _write_manifest(out_dir, manifest)
    return manifest


def _smooth_field(rng: np.random.Generator, size: int) -> Tensor:
    """Sum of random Gaussian blobs plus a gradient, squeezed into [0.3, 0.7]."""
    yy, xx = np.mgrid[0:size, 0:size]
    field = rng.uniform(-1, 1) * (xx / size) + rng.uniform(-1, 1) * (yy / size)
    for _ in range(rng.integers(2, 5)):
        cy, cx = rng.uniform(0, size, size=2)
        s = rng.uniform(6, 20)
        amp = rng.uniform(-1.0, 1.0)
        field = field + amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    lo, hi = field.min(), field.max()
    if hi - lo < 1e-9:
        return np.full((size, size), 0.5)
    return 0.3 + 0.4 * (field - lo) / (hi - lo)


def gen_noisy_images(
    out_dir, count: int, seed: int, size: int = 64, sigmas=SIGMAS
) -> dict:
    """Smooth grayscale images plus Gaussian-noised copies per noise level.

    Noise levels are on the 8-bit scale (sigma 25 means 25/255 in [0, 1]).
    Clean values stay in [0.3, 0.7], so at sigma 25 clipping is a sub-percent
    effect and the measured noise deviation stays within a few percent of
    the nominal level.
    """
    rng = np.random.default_rng(seed)
    os.makedirs(os.path.join(out_dir, "clean"), exist_ok=True)
    for s in sigmas:
        os.makedirs(os.path.join(out_dir, f"noisy/sigma{s}"), exist_ok=True)
    files = []
    for i in range(count):
        clean = _smooth_field(rng, size)
        clean_name = f"clean/img_{i:04d}.png"
        save_image_png(os.path.join(out_dir, clean_name), clean)
        entry = {"clean": clean_name, "noisy": {}}
        for s in sigmas:
            noisy = clean + rng.normal(0.0, s / 255.0, size=clean.shape)
            name = f"noisy/sigma{s}/img_{i:04d}.png"
            save_image_png(os.path.join(out_dir, name), noisy)
            entry["noisy"][str(s)] = name
        files.append(entry)
    manifest = {
        "kind": "noisy-images",
        "count": count,
        "seed": seed,
        "size": size,
        "sigmas": list(sigmas),
        "files": files,
    }
    _write_manifest(out_dir, manifest)
    return manifest


def load_seg_dataset(directory) -> list[tuple[Tensor, Tensor]]:
    """(input 1 x H x W, label H x W) pairs from a shapes dataset directory."""
    manifest = _read_manifest(directory)
    if manifest.get("kind") != "shapes-seg":
        raise MissingArtifactError(f"{directory} is not a shapes-seg dataset")
    out = []
    for entry in manifest["files"]:
        img = load_image(os.path.join(directory, entry["image"]))
        lab = load_label(os.path.join(directory, entry["label"]))
        out.append((img[None], lab))
    return out


def load_denoise_dataset(directory, sigma: int) -> list[dict]:
    """Noisy/clean/noise triples at one noise level.

    The noise map is reconstructed from the stored 8-bit images, so it is
    what a residual-predicting network can actually be trained against.
    """
    manifest = _read_manifest(directory)
    if manifest.get("kind") != "noisy-images":
        raise MissingArtifactError(f"{directory} is not a noisy-images dataset")
    if sigma not in manifest["sigmas"]:
        raise MissingArtifactError(
            f"sigma {sigma} not generated; available: {manifest['sigmas']}"
        )
    out = []
    for entry in manifest["files"]:
        clean = load_image(os.path.join(directory, entry["clean"]))
        noisy = load_image(os.path.join(directory, entry["noisy"][str(sigma)]))
        out.append(
            {
                "clean": clean[None],
                "noisy": noisy[None],
                "noise": (noisy - clean)[None],
            }
        )
    return out
