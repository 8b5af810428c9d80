"""Stage 3: per-pixel fine albedo and region-weighted blending with the coarse albedo."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .camera import Illumination, project_points, shading
from .model import InvalidArgument, MorphableModel
from .raster import RasterMap, normals_from_depth, pixel_albedo

log = logging.getLogger(__name__)

BETA_DETAIL = 0.65
BETA_SMOOTH = 0.35
DENOM_FLOOR = 1e-4
FOREHEAD_HEIGHT = 0.35      # x inter-ocular distance
EYE_CORNER_RADIUS = 0.12    # x inter-ocular distance

BROW_CHAIN = ("brow_l_outer", "brow_l_mid", "brow_l_inner",
              "brow_r_inner", "brow_r_mid", "brow_r_outer")
EYE_CORNERS = ("eye_l_outer", "eye_l_inner", "eye_r_inner", "eye_r_outer")


@dataclass
class BlendWeightMap:
    beta: np.ndarray                 # (H, W)
    mask: np.ndarray                 # (H, W) face region
    detail: np.ndarray               # (H, W) detail-region pixels
    transition_width: float = 8.0
    flags: list = field(default_factory=list)

    @classmethod
    def uniform(cls, mask, beta: float = BETA_SMOOTH, transition_width: float = 8.0):
        mask = np.asarray(mask, dtype=bool)
        return cls(np.full(mask.shape, float(beta)), mask, np.zeros_like(mask), transition_width)


def fine_albedo(image, normals, illum: Illumination, mask=None):
    """Divide the image by the SH shading of ``normals``.

    Returns ``(b_f, low_confidence)``.  Shading values with magnitude below
    1e-4 are clamped to +-1e-4 (sign kept, zero counts as positive) and the
    pixel is flagged.  Off-mask pixels are zero and unflagged.
    """
    image = np.asarray(image, dtype=float)
    normals = np.asarray(normals, dtype=float)
    if image.ndim != 3 or image.shape[2] != 3 or normals.shape != image.shape:
        raise InvalidArgument("image and normals must both be (H, W, 3)")
    mask = np.ones(image.shape[:2], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != image.shape[:2]:
        raise InvalidArgument("mask does not match the image")
    out = np.zeros_like(image)
    flags = np.zeros(mask.shape, dtype=bool)
    if not mask.any():
        return out, flags
    den = shading(normals[mask], illum)
    small = np.abs(den) < DENOM_FLOOR
    den = np.where(small, np.where(den < 0, -DENOM_FLOOR, DENOM_FLOOR), den)
    out[mask] = image[mask] / den
    flags[mask] = small.any(axis=1)
    return out, flags


def blend_albedo(b_c, b_f, beta, low_confidence=None):
    """beta * b_c + (1 - beta) * b_f per pixel; flagged pixels take b_c."""
    b_c = np.asarray(b_c, dtype=float)
    b_f = np.asarray(b_f, dtype=float)
    if b_c.shape != b_f.shape:
        raise InvalidArgument("coarse and fine albedo differ in shape")
    if isinstance(beta, BlendWeightMap):
        if beta.mask.shape != b_c.shape[:2]:
            raise InvalidArgument("blend weights do not match the albedo maps")
        weights = beta.beta
    else:
        weights = np.broadcast_to(np.asarray(beta, dtype=float), b_c.shape[:2])
    if low_confidence is not None:
        low = np.asarray(low_confidence, dtype=bool)
        if low.shape != b_c.shape[:2]:
            raise InvalidArgument("low-confidence mask does not match the albedo maps")
        weights = np.where(low, 1.0, weights)
    w = weights[..., None]
    return w * b_c + (1.0 - w) * b_f


def inside_polygon(polygon, height: int, width: int) -> np.ndarray:
    """Even-odd test of every pixel centre against a closed polygon (k, 2)."""
    poly = np.asarray(polygon, dtype=float)
    ys, xs = np.mgrid[0:height, 0:width] + 0.5
    inside = np.zeros((height, width), dtype=bool)
    x0, y0 = poly[:, 0], poly[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    for ax, ay, bx, by in zip(x0, y0, x1, y1):
        if ay == by:
            continue
        crosses = (ay > ys) != (by > ys)
        x_at = ax + (ys - ay) * (bx - ax) / (by - ay)
        inside ^= crosses & (xs < x_at)
    return inside


def detail_regions(landmarks: dict, height: int, width: int) -> np.ndarray:
    """Forehead band above the brows plus disks at the eye corners."""
    pts = {k: np.asarray(v, dtype=float) for k, v in landmarks.items()}
    eye_l = 0.5 * (pts["eye_l_outer"] + pts["eye_l_inner"])
    eye_r = 0.5 * (pts["eye_r_outer"] + pts["eye_r_inner"])
    axis = eye_r - eye_l
    iod = float(np.linalg.norm(axis))
    if iod == 0:
        raise InvalidArgument("eye landmarks coincide")
    # "up" is perpendicular to the eye axis, pointing away from the mouth
    up = np.array([axis[1], -axis[0]]) / iod
    below = pts.get("mouth_top", pts.get("nose_tip"))
    if below is not None and np.dot(below - 0.5 * (eye_l + eye_r), up) > 0:
        up = -up
    brows = np.array([pts[k] for k in BROW_CHAIN])
    band = np.vstack([brows, (brows + FOREHEAD_HEIGHT * iod * up)[::-1]])
    region = inside_polygon(band, height, width)
    ys, xs = np.mgrid[0:height, 0:width] + 0.5
    r2 = (EYE_CORNER_RADIUS * iod) ** 2
    for k in EYE_CORNERS:
        cx, cy = pts[k]
        region |= (xs - cx) ** 2 + (ys - cy) ** 2 <= r2
    return region


def build_beta_map(landmarks, mask, transition_width: float = 8.0) -> BlendWeightMap:
    """0.65 in detail regions, 0.35 elsewhere, linear in distance across the band.

    ``landmarks`` maps landmark names to pixel positions; ``None`` or empty
    gives a uniform 0.35 map flagged ``"no_landmarks"``.
    """
    mask = np.asarray(mask, dtype=bool)
    if not transition_width > 0:
        raise InvalidArgument("transition width must be positive")
    if not landmarks:
        log.warning("no landmarks; using uniform blend weights")
        out = BlendWeightMap.uniform(mask, BETA_SMOOTH, transition_width)
        out.flags.append("no_landmarks")
        return out
    missing = [k for k in BROW_CHAIN + EYE_CORNERS if k not in landmarks]
    if missing:
        raise InvalidArgument(f"missing landmarks: {', '.join(missing)}")
    h, w = mask.shape
    region = detail_regions(landmarks, h, w)
    if not region.any():
        return BlendWeightMap(np.full(mask.shape, BETA_SMOOTH), mask, region, transition_width)
    dist = ndimage.distance_transform_edt(~region)
    ramp = np.clip(1.0 - dist / transition_width, 0.0, 1.0)
    beta = BETA_SMOOTH + (BETA_DETAIL - BETA_SMOOTH) * ramp
    return BlendWeightMap(beta, mask, region, transition_width)


def projected_landmarks(model: MorphableModel, params) -> dict:
    """Named landmark positions (pixels) of a fitted face."""
    pos = params.shape(model).reshape(-1, 3)[np.asarray(model.landmark_indices)]
    q, _ = project_points(params.pose, pos)
    return {name: q[i] for i, name in enumerate(model.landmark_names)}


@dataclass
class AlbedoResult:
    coarse: np.ndarray
    fine: np.ndarray
    blended: np.ndarray
    weights: BlendWeightMap
    low_confidence: np.ndarray
    normals: np.ndarray


def extract_albedo(image, depth, mask, params, model: MorphableModel, raster: RasterMap,
                   transition_width: float = 8.0, landmarks=None) -> AlbedoResult:
    """Fine albedo from the refined ``depth`` blended with the coarse model albedo."""
    image = np.asarray(image, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != raster.mask.shape or mask.shape != image.shape[:2]:
        raise InvalidArgument("mask, raster and image sizes disagree")
    normals = normals_from_depth(depth, mask, params.pose.scale)
    b_f, low = fine_albedo(image, normals, params.illum, mask)
    b_c = pixel_albedo(raster, model.triangles, params.albedo(model))
    if landmarks is None:
        landmarks = projected_landmarks(model, params)
    beta = build_beta_map(landmarks, mask, transition_width)
    blended = blend_albedo(b_c, b_f, beta, low)
    blended[~mask] = 0.0
    return AlbedoResult(b_c, b_f, blended, beta, low, normals)
