"""Evaluators for the training losses over ground-truth pixel bases, plus depth metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Pose
from .model import InvalidArgument, MorphableModel
from .params import FaceParams
from .raster import RasterMap, rasterize, render_face, triangle_normals


@dataclass(frozen=True)
class PixelBasis:
    """Per-pixel interpolated mean shape and bases from a ground-truth raster."""
    mean: np.ndarray        # (P, 3)
    id_basis: np.ndarray    # (P, 3, K_id)
    exp_basis: np.ndarray   # (P, 3, K_exp)
    pixels: np.ndarray      # (P, 2) pixel-centre coordinates (x, y)
    mask: np.ndarray        # (H, W)

    @property
    def n_pixels(self) -> int:
        return self.mean.shape[0]

    @classmethod
    def from_raster(cls, model: MorphableModel, raster: RasterMap) -> "PixelBasis":
        m = raster.mask
        tri = np.asarray(model.triangles, dtype=np.int64)
        vids = tri[raster.tri_index[m]]                 # (P, 3)
        lam = raster.bary[m]                            # (P, 3)
        n = model.n_vertices
        mean = model.mean_shape.reshape(n, 3)
        A_id = model.id_basis.reshape(n, 3, -1)
        A_exp = model.exp_basis.reshape(n, 3, -1)
        rows, cols = np.nonzero(m)
        return cls(np.einsum("pk,pkc->pc", lam, mean[vids]),
                   np.einsum("pk,pkcj->pcj", lam, A_id[vids]),
                   np.einsum("pk,pkcj->pcj", lam, A_exp[vids]),
                   np.column_stack([cols + 0.5, rows + 0.5]).astype(float), m.copy())

    @classmethod
    def from_params(cls, model: MorphableModel, params: FaceParams, width: int,
                    height: int) -> "PixelBasis":
        raster = rasterize(params.shape(model), params.pose, model.triangles, width, height)
        return cls.from_raster(model, raster)


def _geometry(basis: PixelBasis, alpha_id, alpha_exp) -> np.ndarray:
    alpha_id = np.asarray(alpha_id, dtype=float)
    alpha_exp = np.asarray(alpha_exp, dtype=float)
    if alpha_id.shape != (basis.id_basis.shape[2],) or alpha_exp.shape != (basis.exp_basis.shape[2],):
        raise InvalidArgument("coefficient dimensions do not match the pixel basis")
    return basis.mean + basis.id_basis @ alpha_id + basis.exp_basis @ alpha_exp


def proj_points(basis: PixelBasis, params: FaceParams, pose: Pose | None = None) -> np.ndarray:
    """Project the per-pixel surface points of ``params`` (optionally under another pose)."""
    pose = pose if pose is not None else params.pose
    pts = _geometry(basis, params.alpha_id, params.alpha_exp)
    return pose.scale * pts @ pose.rotation[:2].T + pose.t


def loss_pose(basis: PixelBasis, truth: FaceParams, estimate: FaceParams) -> float:
    """Squared projection error from swapping in the estimated pose (truth geometry)."""
    d = proj_points(basis, truth) - proj_points(basis, truth, pose=estimate.pose)
    return float(np.sum(d * d))


def loss_geo(basis: PixelBasis, truth: FaceParams, estimate: FaceParams) -> float:
    """Squared projection error from swapping in the estimated geometry (truth pose)."""
    d = proj_points(basis, truth) - proj_points(basis, estimate, pose=truth.pose)
    return float(np.sum(d * d))


def _check_losses(*losses):
    vals = [float(x) for x in losses]
    if any(not np.isfinite(v) or v < 0 for v in vals):
        raise InvalidArgument("losses must be finite and non-negative")
    return vals


def loss_total_single(l_pose: float, l_geo: float):
    """Adaptive weighting (w, w * l_pose + (1 - w) * l_geo) with w = l_geo / (l_pose + l_geo)."""
    a, b = _check_losses(l_pose, l_geo)
    if a + b == 0:
        return 0.5, 0.0
    w = b / (a + b)
    # 1 - w written as a / (a + b) avoids cancellation when b >> a
    return w, w * a + (a / (a + b)) * b


def loss_total_tracking(l_pose: float, l_geo: float, l_col: float):
    """Adaptive three-way weighting; returns (w1, w2, total)."""
    a, b, c = _check_losses(l_pose, l_geo, l_col)
    s = a + b + c
    if s == 0:
        return 1.0 / 3.0, 1.0 / 3.0, 0.0
    w1 = (b + c) / (2.0 * s)
    w2 = (a + c) / (2.0 * s)
    w3 = (a + b) / (2.0 * s)     # equals 1 - w1 - w2
    return w1, w2, w1 * a + w2 * b + w3 * c


def loss_col(model: MorphableModel, truth: FaceParams, alpha_alb, illum, image,
             raster: RasterMap | None = None) -> float:
    """Squared RGB difference over the face mask between the frame and a render that
    uses ground-truth geometry and pose with the estimated albedo and lighting."""
    image = np.asarray(image, dtype=float)
    h, w = image.shape[:2]
    pos = truth.shape(model)
    if raster is None:
        raster = rasterize(pos, truth.pose, model.triangles, w, h)
    m = raster.mask
    if not m.any():
        raise InvalidArgument("ground-truth face region is empty")
    est = truth.copy(alpha_alb=np.asarray(alpha_alb, dtype=float), illum=illum)
    est.check(model)
    normals = triangle_normals(pos, truth.pose, model.triangles)
    ren = render_face(raster, model.triangles, est.albedo(model), normals, illum).pixels
    d = ren[m] - image[m]
    return float(np.sum(d * d))


def loss_report(basis: PixelBasis, truth: FaceParams, estimate: FaceParams,
                l_col: float | None = None, sample_id: str = "") -> dict:
    """Raw loss sums, pixel count and both weighted totals as one JSON-ready row."""
    lp = loss_pose(basis, truth, estimate)
    lg = loss_geo(basis, truth, estimate)
    w, total = loss_total_single(lp, lg)
    row = {"sample_id": sample_id, "n_pixels": basis.n_pixels, "loss_pose": lp, "loss_geo": lg,
           "w": w, "loss_single": total}
    if l_col is not None:
        w1, w2, tt = loss_total_tracking(lp, lg, l_col)
        row.update({"loss_col": float(l_col), "w1": w1, "w2": w2, "loss_tracking": tt})
    return row


def depth_error(reconstructed, reference, valid=None):
    """(RMSE, MAE) over pixels where ``valid`` holds and both depths are finite."""
    a = np.asarray(reconstructed, dtype=float)
    b = np.asarray(reference, dtype=float)
    if a.shape != b.shape:
        raise InvalidArgument("depth maps differ in shape")
    ok = np.isfinite(a) & np.isfinite(b)
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != a.shape:
            raise InvalidArgument("valid mask does not match the depth maps")
        ok &= valid
    if not ok.any():
        raise InvalidArgument("no pixel is valid in both depth maps")
    d = a[ok] - b[ok]
    return float(np.sqrt(np.mean(d * d))), float(np.mean(np.abs(d)))
