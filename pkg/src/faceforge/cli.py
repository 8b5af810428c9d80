"""Command-line interface: ``faceforge <command> [options]``.

Errors are reported on stderr as one JSON object.  Exit status is 0 on
success, 1 on runtime or validation failures and 2 on usage errors.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import io
from .model import InvalidArgument

log = logging.getLogger("faceforge")

SECTIONS = ("fitting", "refine", "transfer", "augment", "delta")

DEFAULTS = {
    "seed": 0,
    "width": 128,
    "height": 128,
    "n_vertices": 500,
    "k_id": 10,
    "k_exp": 5,
    "k_alb": 10,
    "transition_width": 8.0,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _emit_error(kind: str, message: str) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message}, sort_keys=True) + "\n")


def _print_json(doc) -> None:
    sys.stdout.write(io.dumps(doc))


# ---------------------------------------------------------------- configuration

def _load_config(args) -> dict:
    cfg = io.read_json(args.config) if args.config else {}
    if not isinstance(cfg, dict):
        raise InvalidArgument("config file must hold a JSON object")
    for key, value in cfg.items():
        if key in SECTIONS:
            continue
        if hasattr(args, key) and getattr(args, key) is None:
            setattr(args, key, value)
    for key, value in DEFAULTS.items():
        if hasattr(args, key) and getattr(args, key) is None:
            setattr(args, key, value)
    return cfg


def _threads(args, cfg) -> int:
    n = args.threads if args.threads is not None else cfg.get("threads")
    if n is None:
        n = os.environ.get("FACEFORGE_THREADS", 1)
    try:
        n = int(n)
    except (TypeError, ValueError) as exc:
        raise InvalidArgument("thread count must be an integer") from exc
    if n < 1:
        raise InvalidArgument("thread count must be at least 1")
    return n


def _fitting_config(cfg):
    from .fitting import FittingConfig
    return FittingConfig(**cfg.get("fitting", {}))


def _refine_config(cfg, args=None):
    from .refine import RefineConfig
    kw = dict(cfg.get("refine", {}))
    if args is not None:
        for k in ("mu1", "mu2"):
            if getattr(args, k, None) is not None:
                kw[k] = getattr(args, k)
    return RefineConfig(**kw)


def _model(args):
    if not args.model:
        raise InvalidArgument("--model is required")
    return io.load_model(args.model)


# ---------------------------------------------------------------- commands

def cmd_gen_model(args, cfg):
    from .model import generate_synthetic_model
    model = generate_synthetic_model(int(args.seed), n_vertices=int(args.n_vertices),
                                     k_id=int(args.k_id), k_exp=int(args.k_exp),
                                     k_alb=int(args.k_alb))
    io.save_model(args.out, model)
    _print_json({"out": str(args.out), "n_vertices": model.n_vertices,
                 "n_triangles": int(model.triangles.shape[0])})


def cmd_render(args, cfg):
    from .fitting import LandmarkSet
    from .raster import render_params
    model = _model(args)
    params = io.load_params(args.params).check(model)
    img, raster = render_params(model, params, int(args.width), int(args.height))
    io.write_image(args.out, img.pixels)
    if args.mask:
        io.write_pfm(args.mask, raster.mask.astype(float))
    if args.landmarks_out:
        io.save_landmarks(args.landmarks_out, LandmarkSet.project(model, params))
    if args.obj:
        from .model import Mesh
        io.write_obj(args.obj, Mesh.from_params(model, params))
    _print_json({"out": str(args.out), "face_pixels": raster.n_pixels})


def cmd_fit(args, cfg):
    from .fitting import fit_model, landmark_error, photometric_rmse
    model = _model(args)
    image = io.read_image(args.image)
    landmarks = io.load_landmarks(args.landmarks)
    init = io.load_params(args.init).check(model) if args.init else None
    res = fit_model(image, landmarks, model, _fitting_config(cfg), init=init)
    io.save_fit(args.out, res)
    _print_json({"out": str(args.out), "status": res.status,
                 "energy": res.energy.e_total if res.trace else None,
                 "landmark_error": landmark_error(landmarks, res.params, model),
                 "rmse": photometric_rmse(image, res.params, model, res.raster)})


def _fit_raster(model, params, image):
    from .raster import rasterize
    return rasterize(params.shape(model), params.pose, model.triangles, image.shape[1],
                     image.shape[0])


def cmd_refine(args, cfg):
    from .refine import ShadingContext, refine_displacement_ctx
    model = _model(args)
    image = io.read_image(args.image)
    params = io.load_params(args.fit).check(model)
    raster = _fit_raster(model, params, image)
    z = np.where(raster.mask, raster.depth, 0.0)
    field = refine_displacement_ctx(image, z, ShadingContext.from_fit(params, model, raster),
                                    _refine_config(cfg, args))
    out = io.ensure_dir(args.out)
    io.write_pfm(out / "coarse_depth.pfm", field.z)
    io.write_pfm(out / "displacement.pfm", field.d)
    io.write_pfm(out / "refined_depth.pfm", np.where(field.mask, field.refined, 0.0))
    io.write_pfm(out / "mask.pfm", field.mask.astype(float))
    rep = {"energies": [float(e) for e in field.energies], "max_abs_displacement":
           float(np.abs(field.d).max())}
    io.write_json(out / "refine.json", rep)
    _print_json(dict(rep, out=str(out)))


def cmd_albedo(args, cfg):
    from .albedo import extract_albedo
    model = _model(args)
    image = io.read_image(args.image)
    params = io.load_params(args.fit).check(model)
    raster = _fit_raster(model, params, image)
    z = np.where(raster.mask, raster.depth, 0.0)
    if args.displacement:
        d = io.read_pfm(args.displacement).astype(float)
        if d.shape != z.shape:
            raise InvalidArgument("displacement size does not match the image")
        z = z + np.where(raster.mask, d, 0.0)
    res = extract_albedo(image, z, raster.mask, params, model, raster,
                         float(args.transition_width))
    out = io.ensure_dir(args.out)
    io.write_pfm(out / "albedo_coarse.pfm", res.coarse)
    io.write_pfm(out / "albedo_fine.pfm", res.fine)
    io.write_pfm(out / "albedo_blended.pfm", res.blended)
    io.write_png(out / "albedo_blended.png", res.blended)
    io.write_pfm(out / "blend_weights.pfm", res.weights.beta)
    io.write_pfm(out / "low_confidence.pfm", res.low_confidence.astype(float))
    _print_json({"out": str(out), "low_confidence_pixels": int(res.low_confidence.sum()),
                 "flags": res.weights.flags})


def cmd_invrender(args, cfg):
    from .pipeline import invrender, save_inverse_rendering
    model = _model(args)
    image = io.read_image(args.image)
    landmarks = io.load_landmarks(args.landmarks)
    init = io.load_params(args.init).check(model) if args.init else None
    res = invrender(image, landmarks, model, _fitting_config(cfg), _refine_config(cfg, args),
                    init=init, transition_width=float(args.transition_width),
                    name=Path(args.out).name)
    rep = save_inverse_rendering(args.out, res, model)
    rep.pop("refine_energy", None)
    _print_json(dict(rep, out=str(args.out)))


def cmd_transfer(args, cfg):
    from .dataset import write_sample
    from .pipeline import load_inverse_rendering
    from .transfer import TransferConfig, synthesize_detail_sample
    model = _model(args)
    kw = dict(cfg.get("transfer", {}))
    if args.scale is not None:
        kw["scale"] = args.scale
    tcfg = TransferConfig(**kw)
    target = load_inverse_rendering(args.target, model)
    source = load_inverse_rendering(args.source, model)
    sample = synthesize_detail_sample(target, source, model, tcfg, seed=int(args.seed),
                                      sample_id=Path(args.out).name)
    write_sample(args.out, sample)
    _print_json(dict(sample.meta, out=str(args.out)))


def _augment_spec(args, cfg):
    from .synthesis import AugmentationSpec
    kw = dict(cfg.get("augment", {}))
    if args.variants is not None:
        kw["variants"] = args.variants
    kw["seed"] = int(args.seed)
    return AugmentationSpec(**kw)


def cmd_augment(args, cfg):
    from .dataset import write_dataset
    from .pipeline import load_inverse_rendering
    from .synthesis import augment_sample
    model = _model(args)
    spec = _augment_spec(args, cfg)
    inputs = [Path(p) for p in args.inputs]

    def job(k):
        ir = load_inverse_rendering(inputs[k], model, name=f"in{k:04d}")
        return augment_sample(ir.image, ir.params, ir.albedo.blended, ir.raster, model, spec,
                              name=ir.name, index_offset=k * int(spec.variants))

    with ThreadPoolExecutor(max_workers=_threads(args, cfg)) as pool:
        batches = list(pool.map(job, range(len(inputs))))
    samples = [s for b in batches for s in b]
    info = {"kind": "augment", "seed": int(args.seed), "spec": spec.to_dict(),
            "inputs": [p.name for p in inputs]}
    man = write_dataset(args.out, samples, info)
    _print_json({"out": str(args.out), "samples": len(man["samples"])})


def cmd_simulate_pairs(args, cfg):
    from .dataset import read_dataset, write_dataset
    from .synthesis import DeltaPoseDistribution, fit_delta_distribution, simulate_pairs
    model = _model(args)
    if args.frames:
        from .params import FaceParams
        frames = [FaceParams.from_dict(f) if isinstance(f, dict) else f
                  for f in io.read_json(args.frames)]
        dist = fit_delta_distribution(frames)
    elif args.dist:
        dist = DeltaPoseDistribution.from_dict(io.read_json(args.dist))
    elif "delta" in cfg:
        dist = DeltaPoseDistribution.from_dict(cfg["delta"])
    else:
        dist = DeltaPoseDistribution.default()
    manifest, samples = read_dataset(args.dataset)
    pairs = simulate_pairs(samples, model, dist, seed=int(args.seed))
    info = {"kind": "tracking-pairs", "seed": int(args.seed), "source": manifest.get("kind"),
            "source_seed": manifest.get("seed"), "delta": dist.to_dict()}
    man = write_dataset(args.out, pairs, info)
    _print_json({"out": str(args.out), "samples": len(man["samples"]),
                 "delta_placeholder": dist.placeholder})


def cmd_pncc(args, cfg):
    from .raster import render_pncc
    model = _model(args)
    params = io.load_params(args.params)
    img = render_pncc(model, params.pose, int(args.width), int(args.height))
    if str(args.out).lower().endswith(".pfm"):
        io.write_pfm(args.out, img.pixels)
    else:
        io.write_png(args.out, img.pixels, encode_srgb=False)
    _print_json({"out": str(args.out), "face_pixels": int(img.mask.sum())})


def cmd_eval_loss(args, cfg):
    from .losses import PixelBasis, loss_col, loss_report
    model = _model(args)
    truth = io.load_params(args.truth).check(model)
    est = io.load_params(args.estimate).check(model)
    w, h = int(args.width), int(args.height)
    l_col = None
    if args.image:
        image = io.read_image(args.image)
        h, w = image.shape[:2]
        l_col = loss_col(model, truth, est.alpha_alb, est.illum, image)
    basis = PixelBasis.from_params(model, truth, w, h)
    row = loss_report(basis, truth, est, l_col, sample_id=args.sample_id or Path(args.estimate).stem)
    if args.out:
        io.write_json(args.out, row)
    _print_json(row)


def cmd_depth_error(args, cfg):
    from .losses import depth_error
    a = io.read_pfm(args.reconstructed).astype(float)
    b = io.read_pfm(args.reference).astype(float)
    mask = io.read_pfm(args.mask) > 0.5 if args.mask else None
    rmse, mae = depth_error(a, b, mask)
    _print_json({"rmse": rmse, "mae": mae})


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON configuration; flags override its values")
    common.add_argument("--threads", type=int, help="worker count (default $FACEFORGE_THREADS or 1)")
    common.add_argument("--seed", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="faceforge", description="Inverse face rendering and training-data synthesis.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(func=func)
        return sp

    s = add("gen-model", cmd_gen_model, "write a synthetic morphable model")
    s.add_argument("--out", required=True)
    for k in ("n_vertices", "k_id", "k_exp", "k_alb"):
        s.add_argument("--" + k.replace("_", "-"), dest=k, type=int)

    def size(sp):
        sp.add_argument("--width", type=int)
        sp.add_argument("--height", type=int)

    s = add("render", cmd_render, "render parameters to an image")
    s.add_argument("--model", required=True)
    s.add_argument("--params", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--mask")
    s.add_argument("--landmarks-out", dest="landmarks_out")
    s.add_argument("--obj")
    size(s)

    s = add("fit", cmd_fit, "fit model, pose and lighting to an image")
    for k in ("model", "image", "landmarks", "out"):
        s.add_argument("--" + k, required=True)
    s.add_argument("--init")

    s = add("refine", cmd_refine, "estimate per-pixel depth displacement")
    for k in ("model", "image", "fit", "out"):
        s.add_argument("--" + k, required=True)
    s.add_argument("--mu1", type=float)
    s.add_argument("--mu2", type=float)

    s = add("albedo", cmd_albedo, "extract and blend fine albedo")
    for k in ("model", "image", "fit", "out"):
        s.add_argument("--" + k, required=True)
    s.add_argument("--displacement")
    s.add_argument("--transition-width", dest="transition_width", type=float)

    s = add("invrender", cmd_invrender, "run all three inverse-rendering stages")
    for k in ("model", "image", "landmarks", "out"):
        s.add_argument("--" + k, required=True)
    s.add_argument("--init")
    s.add_argument("--mu1", type=float)
    s.add_argument("--mu2", type=float)
    s.add_argument("--transition-width", dest="transition_width", type=float)

    s = add("transfer", cmd_transfer, "transfer details from a source onto a target result")
    for k in ("model", "target", "source", "out"):
        s.add_argument("--" + k, required=True)
    s.add_argument("--scale", type=float)

    s = add("augment", cmd_augment, "pose/expression augmentation dataset")
    s.add_argument("--model", required=True)
    s.add_argument("--inputs", nargs="+", required=True, help="invrender output directories")
    s.add_argument("--out", required=True)
    s.add_argument("--variants", type=int)

    s = add("simulate-pairs", cmd_simulate_pairs, "add simulated previous frames to a dataset")
    for k in ("model", "dataset", "out"):
        s.add_argument("--" + k, required=True)
    s.add_argument("--dist", help="JSON delta distribution")
    s.add_argument("--frames", help="JSON list of per-frame parameter documents to fit from")

    s = add("pncc", cmd_pncc, "render the PNCC image of a pose")
    for k in ("model", "params", "out"):
        s.add_argument("--" + k, required=True)
    size(s)

    s = add("eval-loss", cmd_eval_loss, "evaluate training losses for an estimate")
    for k in ("model", "truth", "estimate"):
        s.add_argument("--" + k, required=True)
    s.add_argument("--image")
    s.add_argument("--out")
    s.add_argument("--sample-id", dest="sample_id")
    size(s)

    s = add("depth-error", cmd_depth_error, "RMSE and MAE between two depth maps")
    s.add_argument("--reconstructed", required=True)
    s.add_argument("--reference", required=True)
    s.add_argument("--mask")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        _emit_error("usage", str(exc))
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
        _threads(args, cfg)
        args.func(args, cfg)
    except (InvalidArgument, ValueError, TypeError, KeyError) as exc:
        _emit_error(type(exc).__name__, str(exc))
        return 1
    except (OSError, RuntimeError) as exc:
        _emit_error(type(exc).__name__, str(exc))
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
