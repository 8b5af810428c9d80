"""Three-stage inverse rendering: coarse fit, depth displacement, albedo."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io
from .albedo import AlbedoResult, BlendWeightMap, extract_albedo
from .fitting import FitResult, FittingConfig, LandmarkSet, fit_model, photometric_rmse
from .model import InvalidArgument, MorphableModel
from .raster import RasterMap, rasterize
from .refine import DepthField, RefineConfig, ShadingContext, refine_displacement_ctx
from .transfer import render_detail

log = logging.getLogger(__name__)


@dataclass
class InverseRendering:
    image: np.ndarray
    params: object
    raster: RasterMap
    depth: DepthField
    albedo: AlbedoResult
    fit: FitResult | None = None
    name: str = "input"

    @property
    def mask(self) -> np.ndarray:
        return self.depth.mask

    def stage1_render(self, model: MorphableModel) -> np.ndarray:
        from .raster import render_params
        return render_params(model, self.params, self.raster.width, self.raster.height,
                             background=self.image)[0].pixels

    def stage3_render(self) -> np.ndarray:
        return render_detail(self.albedo.blended, self.depth.refined, self.mask, self.params.illum,
                             self.params.pose.scale, background=self.image)

    def rmse(self, rendered) -> float:
        m = self.mask
        d = np.asarray(rendered)[m] - self.image[m]
        return float(np.sqrt(np.mean(d * d)))

    def report(self, model: MorphableModel) -> dict:
        return {"name": self.name, "face_pixels": int(self.mask.sum()),
                "rmse_stage1": self.rmse(self.stage1_render(model)),
                "rmse_stage3": self.rmse(self.stage3_render()),
                "refine_energy": [float(e) for e in self.depth.energies],
                "low_confidence_pixels": int(self.albedo.low_confidence.sum()),
                "blend_flags": list(self.albedo.weights.flags)}


def invrender(image, landmarks: LandmarkSet, model: MorphableModel,
              fit_config: FittingConfig | None = None, refine_config: RefineConfig | None = None,
              init=None, transition_width: float = 8.0, name: str = "input") -> InverseRendering:
    """Fit the model, estimate per-pixel displacement, then extract blended albedo."""
    image = np.asarray(image, dtype=float)
    fit = fit_model(image, landmarks, model, fit_config, init=init)
    params = fit.params
    raster = fit.raster
    if raster is None:
        raster = rasterize(params.shape(model), params.pose, model.triangles,
                           image.shape[1], image.shape[0])
    ctx = ShadingContext.from_fit(params, model, raster)
    z = np.where(raster.mask, raster.depth, 0.0)
    depth = refine_displacement_ctx(image, z, ctx, refine_config)
    albedo = extract_albedo(image, depth.refined, depth.mask, params, model, raster,
                            transition_width)
    log.info("stage 1 RMSE %.4g", photometric_rmse(image, params, model, raster))
    return InverseRendering(image, params, raster, depth, albedo, fit, name)


def save_inverse_rendering(directory, result: InverseRendering, model: MorphableModel) -> dict:
    d = io.ensure_dir(directory)
    io.write_pfm(d / "input.pfm", result.image)
    if result.fit is not None:
        io.save_fit(d / "fit.json", result.fit)
    else:
        io.save_params(d / "params.json", result.params)
    m = result.mask
    io.write_pfm(d / "mask.pfm", m.astype(float))
    io.write_pfm(d / "coarse_depth.pfm", result.depth.z)
    io.write_pfm(d / "displacement.pfm", result.depth.d)
    io.write_pfm(d / "refined_depth.pfm", np.where(m, result.depth.refined, 0.0))
    io.write_pfm(d / "albedo_coarse.pfm", result.albedo.coarse)
    io.write_pfm(d / "albedo_fine.pfm", result.albedo.fine)
    io.write_pfm(d / "albedo_blended.pfm", result.albedo.blended)
    io.write_png(d / "albedo_blended.png", result.albedo.blended)
    io.write_pfm(d / "blend_weights.pfm", result.albedo.weights.beta)
    io.write_pfm(d / "low_confidence.pfm", result.albedo.low_confidence.astype(float))
    s1 = result.stage1_render(model)
    s3 = result.stage3_render()
    io.write_pfm(d / "render_stage1.pfm", s1)
    io.write_pfm(d / "render_stage3.pfm", s3)
    io.write_png(d / "render_stage3.png", s3)
    rep = result.report(model)
    io.write_json(d / "report.json", rep)
    return rep


def load_inverse_rendering(directory, model: MorphableModel, name: str | None = None) -> InverseRendering:
    """Rebuild a saved result; the raster is recomputed from the stored parameters."""
    d = Path(directory)
    image = io.read_pfm(d / "input.pfm").astype(float)
    if (d / "fit.json").is_file():
        fit = io.load_fit(d / "fit.json")
        params = fit.params
    else:
        fit = None
        params = io.load_params(d / "params.json")
    h, w = image.shape[:2]
    raster = rasterize(params.shape(model), params.pose, model.triangles, w, h)
    mask = io.read_pfm(d / "mask.pfm") > 0.5
    if not np.array_equal(mask, raster.mask):
        raise InvalidArgument(f"{d}: stored mask disagrees with the re-rasterised parameters")
    z = io.read_pfm(d / "coarse_depth.pfm").astype(float)
    disp = io.read_pfm(d / "displacement.pfm").astype(float)
    depth = DepthField(mask, z, disp)
    beta = BlendWeightMap(io.read_pfm(d / "blend_weights.pfm").astype(float), mask,
                          np.zeros_like(mask))
    albedo = AlbedoResult(io.read_pfm(d / "albedo_coarse.pfm").astype(float),
                          io.read_pfm(d / "albedo_fine.pfm").astype(float),
                          io.read_pfm(d / "albedo_blended.pfm").astype(float), beta,
                          io.read_pfm(d / "low_confidence.pfm") > 0.5, None)
    return InverseRendering(image, params, raster, depth, albedo, fit, name or d.name)
