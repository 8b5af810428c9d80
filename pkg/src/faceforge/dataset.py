"""On-disk layout for labelled samples and datasets."""
from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

from . import io
from .params import FaceParams
from .synthesis import DATASET_FORMAT, LabeledSample


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_sample(directory, sample: LabeledSample) -> dict:
    """Write one sample directory; returns its manifest entry."""
    d = io.ensure_dir(directory)
    io.write_pfm(d / "image.pfm", sample.image)
    io.write_png(d / "image.png", sample.image)
    io.save_params(d / "params.json", sample.params)
    io.write_pfm(d / "mask.pfm", sample.mask.astype(float))
    if sample.albedo is not None:
        io.write_pfm(d / "albedo.pfm", sample.albedo)
    if sample.pncc is not None:
        io.write_png(d / "pncc.png", sample.pncc, encode_srgb=False)
        io.write_pfm(d / "pncc.pfm", sample.pncc)
    if sample.prev_params is not None:
        io.save_params(d / "prev_params.json", sample.prev_params)
    if sample.coarse_depth is not None:
        io.write_pfm(d / "coarse_depth.pfm", sample.coarse_depth)
    if sample.displacement is not None:
        io.write_pfm(d / "displacement_gt.pfm", sample.displacement)
    io.write_json(d / "meta.json", sample.meta)
    return {"id": sample.sample_id, "params_sha256": _sha256(d / "params.json"),
            "meta_sha256": _sha256(d / "meta.json")}


def read_sample(directory) -> LabeledSample:
    d = Path(directory)

    def opt_pfm(name):
        p = d / name
        return io.read_pfm(p).astype(float) if p.is_file() else None

    prev = io.load_params(d / "prev_params.json") if (d / "prev_params.json").is_file() else None
    return LabeledSample(
        sample_id=d.name,
        image=io.read_pfm(d / "image.pfm").astype(float),
        params=io.load_params(d / "params.json"),
        mask=io.read_pfm(d / "mask.pfm") > 0.5,
        albedo=opt_pfm("albedo.pfm"),
        pncc=opt_pfm("pncc.pfm"),
        prev_params=prev,
        coarse_depth=opt_pfm("coarse_depth.pfm"),
        displacement=opt_pfm("displacement_gt.pfm"),
        meta=io.read_json(d / "meta.json"),
    )


def write_dataset(root, samples, info: dict) -> dict:
    """Write samples under ``root`` and a canonical manifest describing them."""
    root = io.ensure_dir(root)
    entries = [write_sample(root / s.sample_id, s) for s in samples]
    manifest = dict(info, format=DATASET_FORMAT, samples=entries)
    io.write_json(root / "manifest.json", manifest)
    return manifest


def read_dataset(root):
    """(manifest, list of samples) for a dataset directory."""
    root = Path(root)
    manifest = io.read_json(root / "manifest.json")
    if manifest.get("format") != DATASET_FORMAT:
        raise io.FormatError(f"{root}: not a {DATASET_FORMAT} dataset")
    return manifest, [read_sample(root / e["id"]) for e in manifest["samples"]]


def params_equal(a: FaceParams, b: FaceParams) -> bool:
    return bool(np.array_equal(a.to_vector(), b.to_vector()))
