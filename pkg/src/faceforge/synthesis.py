"""Training-sample synthesis: pose/expression augmentation and simulated previous frames."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .camera import POSE_FIELDS, Pose
from .model import InvalidArgument, MorphableModel
from .params import FaceParams
from .raster import pixel_albedo, rasterize, render_face, render_pncc, triangle_normals

log = logging.getLogger(__name__)

DATASET_FORMAT = "faceforge-ds/1"
DEFAULT_DELTA_STD = (0.02, 0.03, 0.015, 2.0, 2.0, 0.005)


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based generator for sample ``index``; independent of generation order."""
    if seed < 0 or index < 0:
        raise InvalidArgument("seed and sample index must be non-negative")
    key = np.array([seed % 2**64, index % 2**64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass
class LabeledSample:
    sample_id: str
    image: np.ndarray                  # (H, W, 3) linear RGB
    params: FaceParams
    mask: np.ndarray
    albedo: np.ndarray | None = None   # per-pixel albedo used for the face region
    pncc: np.ndarray | None = None
    prev_params: FaceParams | None = None
    coarse_depth: np.ndarray | None = None
    displacement: np.ndarray | None = None
    meta: dict = field(default_factory=dict)


def _pair(v, name):
    lo, hi = (float(x) for x in v)
    if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
        raise InvalidArgument(f"{name} range must be finite with lo <= hi")
    return lo, hi


@dataclass
class AugmentationSpec:
    """Sampling ranges for augmented variants.

    Angles (radians) and expression coefficients (in units of sigma_exp) are
    drawn absolutely; ``scale`` multiplies the fitted scale and ``translation``
    is an offset given as a fraction of the image size.  ``exp`` is either one
    (lo, hi) pair or one pair per expression mode.
    """
    pitch: tuple = (-math.radians(30), math.radians(30))
    yaw: tuple = (-math.radians(60), math.radians(60))
    roll: tuple = (-math.radians(20), math.radians(20))
    exp: object = (-2.0, 2.0)
    scale: tuple = (0.9, 1.1)
    translation: tuple = (-0.1, 0.1)
    variants: int = 20
    seed: int = 0
    max_retries: int = 10

    def __post_init__(self):
        for name in ("pitch", "yaw", "roll", "scale", "translation"):
            setattr(self, name, _pair(getattr(self, name), name))
        exp = np.asarray(self.exp, dtype=float)
        if exp.shape != (2,) and (exp.ndim != 2 or exp.shape[1] != 2):
            raise InvalidArgument("exp range must be a pair or one pair per mode")
        if not np.all(np.isfinite(exp)) or np.any(exp[..., 0] > exp[..., 1]):
            raise InvalidArgument("exp range must be finite with lo <= hi")
        self.exp = exp
        if self.scale[0] <= 0:
            raise InvalidArgument("scale multiplier must be positive")
        if int(self.variants) < 1:
            raise InvalidArgument("variants must be at least 1")
        if self.seed < 0:
            raise InvalidArgument("seed must be non-negative")

    @classmethod
    def pinned(cls, params: FaceParams, model: MorphableModel, **kw) -> "AugmentationSpec":
        """Zero-width ranges at the given parameters."""
        p = params.pose
        rel = params.alpha_exp / np.asarray(model.sigma_exp)
        return cls(pitch=(p.pitch, p.pitch), yaw=(p.yaw, p.yaw), roll=(p.roll, p.roll),
                   exp=np.stack([rel, rel], axis=1), scale=(1.0, 1.0), translation=(0.0, 0.0), **kw)

    def to_dict(self) -> dict:
        return {"pitch": list(self.pitch), "yaw": list(self.yaw), "roll": list(self.roll),
                "exp": self.exp.tolist(), "scale": list(self.scale),
                "translation": list(self.translation), "variants": int(self.variants),
                "seed": int(self.seed), "max_retries": int(self.max_retries)}

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationSpec":
        return cls(**d)

    def draw(self, rng: np.random.Generator, params: FaceParams, model: MorphableModel,
             width: int, height: int) -> FaceParams:
        exp = np.broadcast_to(self.exp, (model.k_exp, 2))
        rel = rng.uniform(exp[:, 0], exp[:, 1])
        p = params.pose
        pose = Pose(scale=p.scale * rng.uniform(*self.scale),
                    pitch=rng.uniform(*self.pitch), yaw=rng.uniform(*self.yaw),
                    roll=rng.uniform(*self.roll),
                    tx=p.tx + width * rng.uniform(*self.translation),
                    ty=p.ty + height * rng.uniform(*self.translation))
        return params.copy(alpha_exp=rel * np.asarray(model.sigma_exp), pose=pose)


def _fill_outside(values, mask):
    """Copy each off-mask pixel from its nearest mask pixel (keeps bilinear lookups clean)."""
    _, (r, c) = ndimage.distance_transform_edt(~mask, return_indices=True)
    return values[r, c]


def render_with_albedo_map(model: MorphableModel, params: FaceParams, albedo_map, original,
                           width: int, height: int, background=None):
    """Flat-shaded render of ``params`` using albedo looked up in another view.

    ``original`` supplies (params, raster) of the view that ``albedo_map``
    belongs to.  Surface points hidden in that view use the model albedo.
    Returns (RenderedImage, per-pixel albedo used, raster).
    """
    from .transfer import build_correspondence, sample_bilinear

    orig_params, orig_raster = original
    pos = params.shape(model)
    raster = rasterize(pos, params.pose, model.triangles, width, height)
    m = raster.mask
    alb = pixel_albedo(raster, model.triangles, params.albedo(model))
    if m.any() and orig_raster.mask.any():
        corr = build_correspondence(params, raster, orig_params, orig_raster, model)
        filled = _fill_outside(np.asarray(albedo_map, dtype=float), orig_raster.mask)
        om = corr.omega
        c = corr.coords[om]
        alb[om] = np.stack([sample_bilinear(filled[..., k], c) for k in range(3)], axis=-1)
    normals = triangle_normals(pos, params.pose, model.triangles)
    img = render_face(raster, model.triangles, alb, normals, params.illum, background)
    return img, alb, raster


def rerender_rmse(sample: LabeledSample, model: MorphableModel) -> float:
    """RMSE between the stored image and a re-render from the stored labels."""
    h, w = sample.image.shape[:2]
    pos = sample.params.shape(model)
    raster = rasterize(pos, sample.params.pose, model.triangles, w, h)
    if not np.array_equal(raster.mask, sample.mask):
        return float("inf")
    albedo = sample.albedo if sample.albedo is not None else sample.params.albedo(model)
    normals = triangle_normals(pos, sample.params.pose, model.triangles)
    img = render_face(raster, model.triangles, albedo, normals, sample.params.illum,
                      background=sample.image).pixels
    diff = img[raster.mask] - sample.image[raster.mask]
    return float(np.sqrt(np.mean(diff * diff))) if diff.size else 0.0


def augment_sample(image, params: FaceParams, albedo_map, raster, model: MorphableModel,
                   spec: AugmentationSpec | None = None, background=None, name: str = "input",
                   index_offset: int = 0) -> list:
    """New pose/expression variants of a fitted face re-rendered with its albedo.

    ``background`` defaults to the unwarped input image; pass a colour or
    image to composite over instead.
    """
    spec = spec or AugmentationSpec()
    image = np.asarray(image, dtype=float)
    h, w = image.shape[:2]
    if background is None:
        bg = image
        bg_kind = "unwarped-original"
    else:
        bg = np.broadcast_to(np.asarray(background, dtype=float), image.shape).copy()
        bg_kind = "flat" if np.ndim(background) <= 1 else "supplied"
    out = []
    for v in range(int(spec.variants)):
        rng = sample_rng(spec.seed, index_offset + v)
        for attempt in range(spec.max_retries + 1):
            new = spec.draw(rng, params, model, w, h)
            img, alb, ras = render_with_albedo_map(model, new, albedo_map, (params, raster), w, h, bg)
            if ras.mask.any():
                break
        else:
            log.warning("variant %d of %s stayed off-screen; skipped", v, name)
            continue
        meta = {"kind": "augment", "input": name, "variant": v, "attempts": attempt + 1,
                "seed": int(spec.seed), "background": bg_kind}
        out.append(LabeledSample(f"{name}_{v:03d}", img.pixels, new, ras.mask.copy(), albedo=alb,
                                 meta=meta))
    return out


@dataclass
class DeltaPoseDistribution:
    """Gaussian per pose component, ordered (pitch, yaw, roll, tx, ty, scale)."""
    mean: np.ndarray = field(default_factory=lambda: np.zeros(6))
    std: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_DELTA_STD))
    placeholder: bool = False

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).reshape(-1)
        self.std = np.asarray(self.std, dtype=float).reshape(-1)
        if self.mean.shape != (6,) or self.std.shape != (6,):
            raise InvalidArgument("delta distribution needs 6 means and 6 stddevs")
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.std))):
            raise InvalidArgument("delta distribution must be finite")
        if np.any(self.std < 0):
            raise InvalidArgument("stddevs must be non-negative")

    @classmethod
    def default(cls) -> "DeltaPoseDistribution":
        """Engineering placeholder used when no per-frame fits are available."""
        return cls(np.zeros(6), np.array(DEFAULT_DELTA_STD), placeholder=True)

    def to_dict(self) -> dict:
        return {"fields": list(POSE_FIELDS), "mean": self.mean.tolist(), "std": self.std.tolist(),
                "placeholder": bool(self.placeholder)}

    @classmethod
    def from_dict(cls, d: dict) -> "DeltaPoseDistribution":
        if list(d.get("fields", POSE_FIELDS)) != list(POSE_FIELDS):
            raise InvalidArgument("unexpected pose field order")
        return cls(d["mean"], d["std"], bool(d.get("placeholder", False)))


def _pose_matrix(frames) -> np.ndarray:
    rows = []
    for f in frames:
        if isinstance(f, FaceParams):
            f = f.pose
        rows.append(f.as_vector() if isinstance(f, Pose) else np.asarray(f, dtype=float))
    mat = np.array(rows, dtype=float)
    if mat.ndim != 2 or mat.shape[1] != 6:
        raise InvalidArgument("frames must be poses or 6-vectors")
    return mat


def fit_delta_distribution(frames) -> DeltaPoseDistribution:
    """Mean and unbiased stddev of frame-to-previous-frame pose differences."""
    mat = _pose_matrix(frames)
    if mat.shape[0] < 2:
        raise InvalidArgument("need at least two frames")
    delta = mat[:-1] - mat[1:]
    mean = delta.mean(axis=0)
    std = delta.std(axis=0, ddof=1) if delta.shape[0] > 1 else np.zeros(6)
    return DeltaPoseDistribution(mean, std)


def draw_prev_pose(pose: Pose, dist: DeltaPoseDistribution, rng: np.random.Generator) -> Pose:
    vec = pose.as_vector() + dist.mean + dist.std * rng.standard_normal(6)
    return Pose.from_vector(vec)


def simulate_prev_frame(params: FaceParams, dist: DeltaPoseDistribution, seed: int,
                        model: MorphableModel, width: int, height: int, index: int = 0):
    """(previous-frame params, PNCC image of the mean face under that pose)."""
    rng = sample_rng(seed, index)
    prev = params.copy(pose=draw_prev_pose(params.pose, dist, rng))
    pncc = render_pncc(model, prev.pose, width, height)
    return prev, pncc


def simulate_pairs(samples, model: MorphableModel, dist: DeltaPoseDistribution | None = None,
                   seed: int = 0) -> list:
    """Attach a simulated previous frame and its PNCC to each sample."""
    dist = dist or DeltaPoseDistribution.default()
    out = []
    for i, s in enumerate(samples):
        h, w = s.image.shape[:2]
        prev, pncc = simulate_prev_frame(s.params, dist, seed, model, w, h, index=i)
        meta = dict(s.meta, tracking=True, pair_seed=int(seed), pair_index=i,
                    delta_placeholder=bool(dist.placeholder))
        out.append(LabeledSample(s.sample_id, s.image, s.params, s.mask, albedo=s.albedo,
                                 pncc=pncc.pixels, prev_params=prev, coarse_depth=s.coarse_depth,
                                 displacement=s.displacement, meta=meta))
    return out


def synthetic_sample(model: MorphableModel, rng: np.random.Generator, width: int, height: int,
                     spec: AugmentationSpec | None = None, sample_id: str = "synthetic",
                     light_strength: float = 0.3) -> LabeledSample:
    """Fully synthetic sample: random coefficients within 2 sigma, pose from ``spec``."""
    from .camera import Illumination, default_pose

    spec = spec or AugmentationSpec()
    a_id = rng.uniform(-2, 2, model.k_id) * np.asarray(model.sigma_id)
    a_alb = rng.uniform(-2, 2, model.k_alb) * np.asarray(model.sigma_alb)
    gamma = np.zeros((3, 9))
    gamma[:, 0] = rng.uniform(0.8, 1.1, 3) / 0.282095
    gamma[:, 1:4] = rng.uniform(-light_strength, light_strength, (1, 3))
    base = FaceParams(a_id, np.zeros(model.k_exp), a_alb, default_pose(width, height),
                      Illumination(gamma.ravel()))
    params = spec.draw(rng, base, model, width, height)
    pos = params.shape(model)
    raster = rasterize(pos, params.pose, model.triangles, width, height)
    normals = triangle_normals(pos, params.pose, model.triangles)
    img = render_face(raster, model.triangles, params.albedo(model), normals, params.illum)
    return LabeledSample(sample_id, img.pixels, params, raster.mask.copy(),
                         meta={"kind": "synthetic"})
