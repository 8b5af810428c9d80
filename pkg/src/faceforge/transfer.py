"""Detail transfer: move a source face's displacement onto a target face by a Poisson solve."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy import ndimage
from scipy.sparse.linalg import cg, spsolve

from .camera import project_points, shading
from .model import InvalidArgument, MorphableModel
from .raster import EMPTY, RasterMap, normals_from_depth

log = logging.getLogger(__name__)

SCALE_RANGE = (0.7, 1.3)
VISIBILITY_TOLERANCE = 0.01     # fraction of the source face depth range


@dataclass
class TransferConfig:
    scale: float | None = None      # None: draw uniformly from SCALE_RANGE
    tol: float = 1e-8
    solver: str = "direct"          # or "cg"

    def __post_init__(self):
        if self.scale is not None and not SCALE_RANGE[0] <= self.scale <= SCALE_RANGE[1]:
            raise InvalidArgument(f"transfer scale must lie in {list(SCALE_RANGE)}")
        if self.solver not in ("direct", "cg"):
            raise InvalidArgument("solver must be 'direct' or 'cg'")

    def resolve_scale(self, rng: np.random.Generator) -> float:
        if self.scale is not None:
            return float(self.scale)
        return float(rng.uniform(*SCALE_RANGE))


@dataclass
class CorrespondenceMap:
    coords: np.ndarray      # (H, W, 2) continuous source pixel coordinates, nan where EMPTY
    omega: np.ndarray       # (H, W) bool
    target_mask: np.ndarray

    @property
    def boundary(self) -> np.ndarray:
        """Pixels of omega with at least one 4-neighbour outside omega."""
        inner = ndimage.binary_erosion(self.omega, structure=ndimage.generate_binary_structure(2, 1),
                                       border_value=0)
        return self.omega & ~inner

    @property
    def interior(self) -> np.ndarray:
        return self.omega & ~self.boundary

    @classmethod
    def identity(cls, mask) -> "CorrespondenceMap":
        mask = np.asarray(mask, dtype=bool)
        ys, xs = np.mgrid[0:mask.shape[0], 0:mask.shape[1]] + 0.5
        coords = np.stack([xs, ys], axis=-1)
        coords[~mask] = np.nan
        return cls(coords, mask.copy(), mask.copy())


def build_correspondence(target_params, target_raster: RasterMap, source_params,
                         source_raster: RasterMap, model: MorphableModel,
                         depth_tolerance: float = VISIBILITY_TOLERANCE) -> CorrespondenceMap:
    """Map each target face pixel to a continuous location in the source image.

    The surface point under a target pixel (its triangle and barycentrics) is
    located on the source mesh and projected with the source pose.  It counts
    as visible when the source z-buffer holds the same triangle there, or a
    depth within ``depth_tolerance`` of the source face depth range.
    """
    tri = np.asarray(model.triangles, dtype=np.int64)
    for r in (target_raster, source_raster):
        if np.any(r.tri_index >= tri.shape[0]):
            raise InvalidArgument("raster does not match the model topology")
    target_params.check(model)
    source_params.check(model)
    tm = target_raster.mask
    h, w = tm.shape
    coords = np.full((h, w, 2), np.nan)
    omega = np.zeros((h, w), dtype=bool)
    if not tm.any() or not source_raster.mask.any():
        return CorrespondenceMap(coords, omega, tm.copy())

    src_pos = source_params.shape(model).reshape(-1, 3)
    q, z = project_points(source_params.pose, src_pos)
    t_ids = target_raster.tri_index[tm]
    lam = target_raster.bary[tm]
    vids = tri[t_ids]
    xy = np.einsum("pk,pkc->pc", lam, q[vids])
    depth = np.einsum("pk,pk->p", lam, z[vids])

    sm = source_raster.mask
    col = np.floor(xy[:, 0]).astype(np.int64)
    row = np.floor(xy[:, 1]).astype(np.int64)
    on = (col >= 0) & (col < source_raster.width) & (row >= 0) & (row < source_raster.height)
    col_c = np.clip(col, 0, source_raster.width - 1)
    row_c = np.clip(row, 0, source_raster.height - 1)
    sd = source_raster.depth[sm]
    span = float(sd.max() - sd.min()) if sd.size else 0.0
    tol = depth_tolerance * span
    hit_tri = source_raster.tri_index[row_c, col_c]
    hit_depth = source_raster.depth[row_c, col_c]
    visible = on & (hit_tri != EMPTY) & ((hit_tri == t_ids) | (np.abs(hit_depth - depth) <= tol))

    rows, cols = np.nonzero(tm)
    coords[rows[visible], cols[visible]] = xy[visible]
    omega[rows[visible], cols[visible]] = True
    return CorrespondenceMap(coords, omega, tm.copy())


def sample_bilinear(field2d, coords) -> np.ndarray:
    """Bilinear samples of a pixel grid at continuous (x, y) image coordinates.

    Pixel centres sit at integer + 0.5; samples outside the grid read zero.
    """
    coords = np.asarray(coords, dtype=float)
    return ndimage.map_coordinates(np.asarray(field2d, dtype=float),
                                   [coords[..., 1] - 0.5, coords[..., 0] - 0.5],
                                   order=1, mode="constant", cval=0.0)


def guidance_field(d_s, corr: CorrespondenceMap, scale: float):
    """Scaled forward differences of ``d_s`` taken at the corresponding source locations."""
    wx = np.zeros(corr.omega.shape)
    wy = np.zeros(corr.omega.shape)
    om = corr.omega
    c = corr.coords[om]
    base = sample_bilinear(d_s, c)
    wx[om] = scale * (sample_bilinear(d_s, c + [1.0, 0.0]) - base)
    wy[om] = scale * (sample_bilinear(d_s, c + [0.0, 1.0]) - base)
    return wx, wy


@dataclass
class TransferResult:
    d: np.ndarray
    omega: np.ndarray
    interior: np.ndarray
    scale: float
    flags: list = field(default_factory=list)


def poisson_solve(d_t, omega, wx, wy, tol: float = 1e-8, solver: str = "direct"):
    """Minimise sum over forward edges inside omega of (grad d - w)^2 with d = d_t on the boundary.

    Returns ``(d, interior)``.  Unknowns are the omega pixels whose four
    neighbours are all in omega; the rest of the image keeps ``d_t``.
    """
    d_t = np.asarray(d_t, dtype=float)
    omega = np.asarray(omega, dtype=bool)
    interior = omega & ndimage.binary_erosion(omega, ndimage.generate_binary_structure(2, 1),
                                              border_value=0)
    out = d_t.copy()
    n = int(interior.sum())
    if n == 0:
        return out, interior
    h, w = omega.shape
    idx = np.full(omega.shape, -1, dtype=np.int64)
    idx[interior] = np.arange(n)

    rows, cols, vals = [], [], []
    b = np.zeros(n)
    # each interior pixel couples to its four neighbours (all inside omega)
    r, c = np.nonzero(interior)
    p = idx[r, c]
    rows.append(p); cols.append(p); vals.append(np.full(n, 4.0))
    div = wx[r, c] - wx[r, c - 1] + wy[r, c] - wy[r - 1, c]
    b -= div
    for dr, dc in ((0, 1), (0, -1), (1, 0), (-1, 0)):
        rn, cn = r + dr, c + dc
        q = idx[rn, cn]
        unknown = q >= 0
        rows.append(p[unknown]); cols.append(q[unknown]); vals.append(-np.ones(unknown.sum()))
        b[~unknown] += d_t[rn[~unknown], cn[~unknown]]
    A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n, n))
    if solver == "cg":
        x, info = cg(A, b, rtol=tol, atol=0.0, maxiter=10 * n)
        if info != 0:
            log.debug("CG stalled (info=%d); falling back to a direct solve", info)
            x = spsolve(A.tocsc(), b)
    else:
        x = spsolve(A.tocsc(), b)
    out[interior] = x
    return out, interior


def transfer_displacement(d_s, d_t, corr: CorrespondenceMap, config: TransferConfig | None = None,
                          scale: float | None = None) -> TransferResult:
    """Target displacement whose gradients inside omega follow the scaled source gradients."""
    config = config or TransferConfig()
    s = float(scale if scale is not None else (config.scale if config.scale is not None else 1.0))
    d_t = np.asarray(d_t, dtype=float)
    if d_t.shape != corr.omega.shape:
        raise InvalidArgument("target displacement does not match the correspondence")
    wx, wy = guidance_field(d_s, corr, s)
    d, interior = poisson_solve(d_t, corr.omega, wx, wy, config.tol, config.solver)
    flags = [] if interior.any() else ["empty_interior"]
    if flags:
        log.warning("transfer region has no interior; target displacement kept")
    return TransferResult(d, corr.omega.copy(), interior, s, flags)


def euler_lagrange_residual(d, interior, wx, wy) -> float:
    """max |lap d - div w| over interior pixels (zero at an exact solution)."""
    r, c = np.nonzero(interior)
    if r.size == 0:
        return 0.0
    lap = d[r, c + 1] + d[r, c - 1] + d[r + 1, c] + d[r - 1, c] - 4.0 * d[r, c]
    div = wx[r, c] - wx[r, c - 1] + wy[r, c] - wy[r - 1, c]
    return float(np.max(np.abs(lap - div)))


def render_detail(albedo_map, depth, mask, illum, scale: float, background=None) -> np.ndarray:
    """Shade a depth map with per-pixel albedo; off-mask pixels take ``background``."""
    mask = np.asarray(mask, dtype=bool)
    img = np.zeros(mask.shape + (3,)) if background is None else np.array(background, dtype=float)
    if not mask.any():
        return img
    n = normals_from_depth(depth, mask, scale)
    img[mask] = np.asarray(albedo_map, dtype=float)[mask] * shading(n[mask], illum)
    return img


def synthesize_detail_sample(target, source, model: MorphableModel,
                             config: TransferConfig | None = None, seed: int = 0,
                             sample_id: str = "transfer"):
    """Render the target face carrying the source face's transferred details.

    ``target`` and ``source`` are inverse-rendering results (see
    :class:`faceforge.pipeline.InverseRendering`).  Returns a LabeledSample
    whose ``displacement`` is the transferred field and ``coarse_depth`` the
    target's Stage-1 depth.
    """
    from .synthesis import LabeledSample, sample_rng

    config = config or TransferConfig()
    rng = sample_rng(seed, 0)
    s = config.resolve_scale(rng)
    corr = build_correspondence(target.params, target.raster, source.params, source.raster, model)
    res = transfer_displacement(source.depth.d, target.depth.d, corr, config, scale=s)
    mask = target.depth.mask
    res.d[~mask] = 0.0
    z = target.depth.z
    img = render_detail(target.albedo.blended, z + res.d, mask, target.params.illum,
                        target.params.pose.scale, background=target.image)
    meta = {"kind": "detail-transfer", "source": getattr(source, "name", "source"),
            "target": getattr(target, "name", "target"), "scale": s, "seed": int(seed),
            "flags": res.flags, "omega_pixels": int(res.omega.sum())}
    return LabeledSample(sample_id=sample_id, image=img, params=target.params.copy(), mask=mask.copy(),
                         coarse_depth=np.where(mask, z, 0.0), displacement=res.d,
                         albedo=target.albedo.blended.copy(), meta=meta)
