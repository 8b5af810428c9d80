"""Software rasterisation, shading to images, PNCC and depth normals.

Pixel (col i, row j) has its centre at (i + 0.5, j + 0.5).  Arrays are
indexed ``[row, col]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .camera import Illumination, Pose, project_points, shading
from .model import InvalidArgument, MorphableModel

EMPTY = -1


@dataclass
class RasterMap:
    width: int
    height: int
    tri_index: np.ndarray   # (H, W) int, EMPTY off the face
    bary: np.ndarray        # (H, W, 3)
    depth: np.ndarray       # (H, W) camera depth, -inf off the face
    pose: Pose | None = None

    @property
    def mask(self) -> np.ndarray:
        return self.tri_index != EMPTY

    @property
    def n_pixels(self) -> int:
        return int(np.count_nonzero(self.tri_index != EMPTY))


@dataclass
class RenderedImage:
    pixels: np.ndarray      # (H, W, 3) linear RGB
    mask: np.ndarray        # (H, W) bool

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


def _owns_zero_edge(u, v):
    """Tie rule: of the two opposite orientations of an edge exactly one owns it."""
    dx = v[..., 0] - u[..., 0]
    dy = v[..., 1] - u[..., 1]
    return (dy > 0) | ((dy == 0) & (dx < 0))


def _edge(u, v, px, py):
    return (v[..., 0] - u[..., 0]) * (py - u[..., 1]) - (v[..., 1] - u[..., 1]) * (px - u[..., 0])


def rasterize_projected(q, z, triangles, width: int, height: int, pose: Pose | None = None) -> RasterMap:
    """Z-buffer rasterisation of already-projected vertices.

    ``q`` are (n, 2) pixel positions, ``z`` camera depths (larger is closer).
    Triangles with non-positive signed area (back-facing or degenerate) are
    skipped.  Depth ties go to the lower triangle index.
    """
    if width <= 0 or height <= 0:
        raise InvalidArgument("image size must be positive")
    tri = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    tri_index = np.full((height, width), EMPTY, dtype=np.int64)
    bary = np.zeros((height, width, 3))
    depth = np.full((height, width), -np.inf)
    out = RasterMap(width, height, tri_index, bary, depth, pose)
    if tri.shape[0] == 0:
        return out

    a, b, c = q[tri[:, 0]], q[tri[:, 1]], q[tri[:, 2]]
    area2 = _edge(a, b, c[:, 0], c[:, 1])
    ok = area2 > 1e-12
    lo = np.minimum(np.minimum(a, b), c)
    hi = np.maximum(np.maximum(a, b), c)
    x0 = np.clip(np.ceil(lo[:, 0] - 0.5), 0, width).astype(np.int64)
    x1 = np.clip(np.floor(hi[:, 0] - 0.5), -1, width - 1).astype(np.int64)
    y0 = np.clip(np.ceil(lo[:, 1] - 0.5), 0, height).astype(np.int64)
    y1 = np.clip(np.floor(hi[:, 1] - 0.5), -1, height - 1).astype(np.int64)
    nx = np.maximum(x1 - x0 + 1, 0)
    ny = np.maximum(y1 - y0 + 1, 0)
    counts = np.where(ok, nx * ny, 0)
    total = int(counts.sum())
    if total == 0:
        return out

    t = np.repeat(np.arange(tri.shape[0]), counts)
    starts = np.cumsum(counts) - counts
    local = np.arange(total) - np.repeat(starts, counts)
    px = x0[t] + local % nx[t]
    py = y0[t] + local // nx[t]
    cx = px + 0.5
    cy = py + 0.5
    ta, tb, tc = a[t], b[t], c[t]
    w0 = _edge(tb, tc, cx, cy)
    w1 = _edge(tc, ta, cx, cy)
    w2 = _edge(ta, tb, cx, cy)
    inside = (((w0 > 0) | ((w0 == 0) & _owns_zero_edge(tb, tc)))
              & ((w1 > 0) | ((w1 == 0) & _owns_zero_edge(tc, ta)))
              & ((w2 > 0) | ((w2 == 0) & _owns_zero_edge(ta, tb))))
    if not inside.any():
        return out
    t, px, py = t[inside], px[inside], py[inside]
    lam = np.column_stack([w0[inside], w1[inside], w2[inside]]) / area2[t][:, None]
    zc = np.einsum("ij,ij->i", lam, z[tri[t]])

    pix = py * width + px
    order = np.lexsort((t, -zc, pix))
    pix_sorted = pix[order]
    first = np.ones(pix_sorted.shape[0], dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    win = order[first]
    rows, cols = py[win], px[win]
    tri_index[rows, cols] = t[win]
    bary[rows, cols] = lam[win]
    depth[rows, cols] = zc[win]
    return out


def rasterize(positions, pose: Pose, triangles, width: int, height: int) -> RasterMap:
    q, z = project_points(pose, np.asarray(positions, dtype=float).reshape(-1, 3))
    return rasterize_projected(q, z, triangles, width, height, pose)


def triangle_normals(positions, pose: Pose, triangles) -> np.ndarray:
    """Unit camera-frame normals per triangle; viewer-facing ones have n_z > 0."""
    from .camera import camera_points
    cam = camera_points(pose, positions)
    tri = np.asarray(triangles, dtype=np.int64)
    n = np.cross(cam[tri[:, 1]] - cam[tri[:, 0]], cam[tri[:, 2]] - cam[tri[:, 0]])
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    return np.divide(n, norm, out=np.zeros_like(n), where=norm > 0)


def interpolate_vertex_attr(raster: RasterMap, triangles, attr) -> np.ndarray:
    """Barycentric blend of per-vertex attributes (n, k) -> (H, W, k); zero off-mask."""
    attr = np.asarray(attr, dtype=float)
    attr = attr.reshape(attr.shape[0], -1)
    tri = np.asarray(triangles, dtype=np.int64)
    out = np.zeros((raster.height, raster.width, attr.shape[1]))
    m = raster.mask
    vids = tri[raster.tri_index[m]]                      # (P, 3)
    out[m] = np.einsum("pk,pkc->pc", raster.bary[m], attr[vids])
    return out


def pixel_albedo(raster: RasterMap, triangles, albedo) -> np.ndarray:
    """Per-pixel albedo from a 3n vertex vector, or pass-through of an (H, W, 3) map."""
    albedo = np.asarray(albedo, dtype=float)
    if albedo.ndim == 3:
        if albedo.shape != (raster.height, raster.width, 3):
            raise InvalidArgument("albedo map size does not match the raster")
        return albedo
    return interpolate_vertex_attr(raster, triangles, albedo.reshape(-1, 3))


def pixel_normals(raster: RasterMap, normals) -> np.ndarray:
    """Per-pixel normals from per-triangle (m, 3) or per-pixel (H, W, 3) input."""
    normals = np.asarray(normals, dtype=float)
    if normals.ndim == 3:
        if normals.shape != (raster.height, raster.width, 3):
            raise InvalidArgument("normal map size does not match the raster")
        return normals
    out = np.zeros((raster.height, raster.width, 3))
    m = raster.mask
    out[m] = normals[raster.tri_index[m]]
    return out


def render_face(raster: RasterMap, triangles, albedo, normals, illum: Illumination,
                background=None) -> RenderedImage:
    """Shade every face pixel; unmasked pixels take ``background`` (or black).

    ``background`` is an (H, W, 3) image or a single RGB colour.
    """
    h, w = raster.height, raster.width
    if background is None:
        img = np.zeros((h, w, 3))
    else:
        img = np.array(background, dtype=float, copy=True)
        if img.shape == (3,):
            img = np.broadcast_to(img, (h, w, 3)).copy()
        if img.shape != (h, w, 3):
            raise InvalidArgument("background size does not match the raster")
    m = raster.mask
    if m.any():
        b = pixel_albedo(raster, triangles, albedo)[m]
        n = pixel_normals(raster, normals)[m]
        img[m] = b * shading(n, illum)
    return RenderedImage(img, m.copy())


def render_params(model: MorphableModel, params, width: int, height: int, background=None):
    """Coarse (flat-shaded) render of a parameter set; returns (image, raster)."""
    pos = params.shape(model)
    raster = rasterize(pos, params.pose, model.triangles, width, height)
    normals = triangle_normals(pos, params.pose, model.triangles)
    img = render_face(raster, model.triangles, params.albedo(model), normals, params.illum,
                      background)
    return img, raster


def render_pncc(model: MorphableModel, pose: Pose, width: int, height: int) -> RenderedImage:
    """Projected normalised coordinate code of the mean face under ``pose``."""
    pts = model.mean_shape.reshape(-1, 3)
    raster = rasterize(pts, pose, model.triangles, width, height)
    lo = pts.min(axis=0)
    span = pts.max(axis=0) - lo
    span[span == 0] = 1.0
    ncc = (pts - lo) / span
    img = interpolate_vertex_attr(raster, model.triangles, ncc)
    m = raster.mask
    img[m] = np.clip(img[m], 0.0, 1.0)
    return RenderedImage(img, m.copy())


def normals_from_depth(depth, mask, scale: float = 1.0) -> np.ndarray:
    """Per-pixel unit normals of the triangle (p(i,j), p(i+1,j), p(i,j+1)).

    ``p(i, j) = [i, j, scale * depth[j, i]]``; ``scale`` converts depth units to
    pixels (the pose scale under weak perspective).  Face pixels whose forward
    neighbours leave the mask copy the normal of the nearest such interior
    pixel.  Off-mask pixels are zero.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise InvalidArgument("empty mask")
    zs = scale * np.where(mask, depth, 0.0)
    valid = forward_valid(mask)
    if not valid.any():
        raise InvalidArgument("mask has no pixel with both forward neighbours")
    gx = np.zeros_like(zs)
    gy = np.zeros_like(zs)
    gx[:, :-1] = zs[:, 1:] - zs[:, :-1]
    gy[:-1, :] = zs[1:, :] - zs[:-1, :]
    n = np.stack([-gx, -gy, np.ones_like(zs)], axis=-1)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    src = nearest_valid_index(valid)
    out = np.zeros_like(n)
    out[mask] = n[src[0][mask], src[1][mask]]
    return out


def forward_valid(mask) -> np.ndarray:
    """Mask pixels whose right and lower neighbours are also in the mask."""
    v = np.zeros_like(mask, dtype=bool)
    v[:-1, :-1] = mask[:-1, :-1] & mask[:-1, 1:] & mask[1:, :-1]
    return v


def nearest_valid_index(valid):
    """(rows, cols) of the nearest valid pixel for every pixel (EDT, ties by scan order)."""
    _, idx = ndimage.distance_transform_edt(~valid, return_indices=True)
    return idx[0], idx[1]
