"""Stage 2: per-pixel depth displacement by iteratively reweighted least squares.

Minimises E(d) = E_con(z + d) + (mu1 ||d||^2 + mu2 ||lap d||_1) / |F| where
shading normals come from the refined depth map and albedo/lighting stay at
their Stage-1 values.  By default the photometric term is measured in 8-bit
intensity units and the regularisers are per-pixel averages, so every term is
a per-pixel quantity on the same scale; both choices are configurable.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import cg, spsolve

from .camera import Illumination, sh_basis, sh_basis_grad, shading
from .model import InvalidArgument, MorphableModel
from .raster import (RasterMap, forward_valid, interpolate_vertex_attr, nearest_valid_index,
                     normals_from_depth)

log = logging.getLogger(__name__)


class SingularSystem(RuntimeError):
    """No face pixel has both forward neighbours, so normals are undefined."""


@dataclass
class RefineConfig:
    mu1: float = 1e-3
    mu2: float = 0.3
    max_outer: int = 30
    cg_tol: float = 1e-8
    cg_maxiter: int = 5000
    solver: str = "direct"          # or "cg" (Jacobi-preconditioned)
    eps: float = 1e-4
    intensity_scale: float = 255.0
    per_pixel_regularizers: bool = True
    eps_start: float = 1.0
    eps_decay: float = 0.3
    tol: float = 1e-7
    max_backtrack: int = 12

    def __post_init__(self):
        if self.mu1 < 0 or self.mu2 < 0:
            raise InvalidArgument("mu1 and mu2 must be non-negative")
        if not self.eps > 0:
            raise InvalidArgument("eps must be positive")
        if self.solver not in ("direct", "cg"):
            raise InvalidArgument("solver must be 'direct' or 'cg'")
        if not 0 < self.eps_decay <= 1:
            raise InvalidArgument("eps_decay must lie in (0, 1]")


@dataclass
class DepthField:
    mask: np.ndarray
    z: np.ndarray
    d: np.ndarray
    energies: list = field(default_factory=list)

    @property
    def width(self) -> int:
        return self.mask.shape[1]

    @property
    def height(self) -> int:
        return self.mask.shape[0]

    @property
    def refined(self) -> np.ndarray:
        return np.where(self.mask, self.z + self.d, -np.inf)


@dataclass
class ShadingContext:
    """Everything besides depth that the Stage-2 render needs."""
    mask: np.ndarray
    albedo: np.ndarray      # (H, W, 3)
    illum: Illumination
    scale: float            # pixels per depth unit

    @classmethod
    def from_fit(cls, params, model: MorphableModel, raster: RasterMap) -> "ShadingContext":
        alb = interpolate_vertex_attr(raster, model.triangles, params.albedo(model).reshape(-1, 3))
        return cls(raster.mask.copy(), alb, params.illum, params.pose.scale)

    def render(self, depth, background=None) -> np.ndarray:
        m = self.mask
        img = np.zeros(m.shape + (3,)) if background is None else np.array(background, dtype=float)
        n = normals_from_depth(depth, m, self.scale)
        img[m] = self.albedo[m] * shading(n[m], self.illum)
        return img


def laplacian_matrix(mask) -> sp.csr_matrix:
    """4-neighbour graph Laplacian on mask pixels (row-major order).

    (L d)_p = sum over in-mask neighbours q of (d_p - d_q), so neighbours
    outside the mask are simply dropped.
    """
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    idx = np.full(mask.shape, -1, dtype=np.int64)
    idx[mask] = np.arange(int(mask.sum()))
    rows, cols = [], []
    for dy, dx in ((0, 1), (1, 0)):
        a = mask[: h - dy, : w - dx] & mask[dy:, dx:]
        i = idx[: h - dy, : w - dx][a]
        j = idx[dy:, dx:][a]
        rows += [i, j]
        cols += [j, i]
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    n = int(mask.sum())
    A = sp.csr_matrix((np.ones(rows.shape[0]), (rows, cols)), shape=(n, n))
    deg = np.asarray(A.sum(axis=1)).ravel()
    return (sp.diags(deg) - A).tocsr()


def _check_d(d, mask):
    d = np.asarray(d, dtype=float)
    if d.shape != mask.shape:
        raise InvalidArgument("displacement and mask differ in shape")
    return d


def refine_energy_ctx(image, d, z, ctx: ShadingContext, config: RefineConfig):
    """(e_con, ||d||^2, ||lap d||_1, total) for displacement ``d``."""
    m = ctx.mask
    d = _check_d(d, m)
    if np.any(d[~m] != 0):
        raise InvalidArgument("displacement must vanish outside the mask")
    ren = ctx.render(np.where(m, z + d, 0.0))
    diff = config.intensity_scale * (ren[m] - np.asarray(image, dtype=float)[m])
    P = int(m.sum())
    e_con = float(np.sum(diff * diff) / P)
    dv = d[m]
    d2 = float(dv @ dv)
    l1 = float(np.abs(laplacian_matrix(m) @ dv).sum())
    norm = P if config.per_pixel_regularizers else 1
    return e_con, d2, l1, e_con + (config.mu1 * d2 + config.mu2 * l1) / norm


def refine_energy(image, d, z, params, model: MorphableModel, config: RefineConfig,
                  raster: RasterMap):
    if raster.mask.shape != np.shape(d):
        raise InvalidArgument("displacement does not match the raster")
    return refine_energy_ctx(image, d, z, ShadingContext.from_fit(params, model, raster), config)


def shading_residuals(image, depth, ctx: ShadingContext, jacobian: bool = True,
                      intensity_scale: float = 1.0):
    """k sqrt(1/|F|) (I_ren - I_in) over face pixels x RGB, and d r / d d (sparse).

    ``k`` is ``intensity_scale``.

    Jacobian columns index mask pixels in row-major order.
    """
    m = ctx.mask
    P = int(m.sum())
    valid = forward_valid(m)
    if not valid.any():
        raise SingularSystem("no interior pixels")
    h, w = m.shape
    idx = np.full(m.shape, -1, dtype=np.int64)
    idx[m] = np.arange(P)
    src_r, src_c = nearest_valid_index(valid)
    sr, sc = src_r[m], src_c[m]                      # normal source per face pixel
    zs = ctx.scale * np.where(m, depth, 0.0)
    gx = zs[sr, sc + 1] - zs[sr, sc]
    gy = zs[sr + 1, sc] - zs[sr, sc]
    N = np.column_stack([-gx, -gy, np.ones(P)])
    norm = np.linalg.norm(N, axis=1)
    n = N / norm[:, None]
    phi = sh_basis(n)
    gamma = ctx.illum.gamma
    b = ctx.albedo[m]
    c = intensity_scale * np.sqrt(1.0 / P)
    r = c * (b * (phi @ gamma.T) - np.asarray(image, dtype=float)[m]).ravel()
    if not jacobian:
        return r, None
    dshade_dn = np.einsum("ck,pkj->pcj", gamma, sh_basis_grad(n))        # (P, 3, 3)
    proj = (np.eye(3)[None] - n[:, :, None] * n[:, None, :]) / norm[:, None, None]
    S = ctx.scale
    # dN/d d_self = (S, S, 0); d/d d_right = (-S, 0, 0); d/d d_down = (0, -S, 0)
    dN = np.array([[S, S, 0.0], [-S, 0.0, 0.0], [0.0, -S, 0.0]])         # (3 cols, 3)
    dn = np.einsum("pij,kj->pki", proj, dN)                               # (P, 3 cols, 3)
    vals = c * b[:, :, None] * np.einsum("pcj,pkj->pck", dshade_dn, dn)  # (P, 3 ch, 3 cols)
    col = np.stack([idx[sr, sc], idx[sr, sc + 1], idx[sr + 1, sc]], axis=1)  # (P, 3)
    rows = np.broadcast_to(np.arange(3 * P).reshape(P, 3, 1), (P, 3, 3))
    cols = np.broadcast_to(col[:, None, :], (P, 3, 3))
    J = sp.csr_matrix((vals.ravel(), (rows.ravel(), cols.ravel())), shape=(3 * P, P))
    return r, J


def _solve(A, rhs, x0, config: RefineConfig):
    if config.solver == "cg":
        jacobi = sp.diags(1.0 / A.diagonal())
        sol, info = cg(A, rhs, x0=x0, rtol=config.cg_tol, atol=0.0, maxiter=config.cg_maxiter,
                       M=jacobi)
        if info == 0:
            return sol
        log.debug("CG stalled (info=%d); falling back to a direct solve", info)
    return spsolve(A.tocsc(), rhs)


def refine_displacement_ctx(image, z, ctx: ShadingContext, config: RefineConfig | None = None,
                            d0=None) -> DepthField:
    config = config or RefineConfig()
    m = ctx.mask
    if not forward_valid(m).any():
        raise SingularSystem("no interior pixels")
    image = np.asarray(image, dtype=float)
    z = np.where(m, z, 0.0)
    P = int(m.sum())
    d = np.zeros(m.shape) if d0 is None else _check_d(d0, m).copy()
    d[~m] = 0.0
    L = laplacian_matrix(m)
    eye = sp.identity(P, format="csr")
    norm = P if config.per_pixel_regularizers else 1
    mu1, mu2 = config.mu1 / norm, config.mu2 / norm

    def total(dv):
        full = np.zeros(m.shape)
        full[m] = dv
        return refine_energy_ctx(image, full, z, ctx, config)[3]

    dv = d[m]
    f = total(dv)
    energies = [f]
    eps = max(config.eps_start, config.eps)
    for _ in range(config.max_outer):
        full = np.zeros(m.shape)
        full[m] = dv
        r, J = shading_residuals(image, z + full, ctx, intensity_scale=config.intensity_scale)
        wts = 1.0 / np.maximum(np.abs(L @ dv), eps)
        A = (J.T @ J + mu1 * eye + 0.5 * mu2 * (L.T @ sp.diags(wts) @ L)).tocsr()
        rhs = J.T @ (J @ dv) - J.T @ r
        sol = _solve(A, rhs, dv, config)
        eps = max(eps * config.eps_decay, config.eps)
        step = sol - dv
        t = 1.0
        accepted = False
        for _ in range(config.max_backtrack):
            f_new = total(dv + t * step)
            if f_new <= f:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            if eps > config.eps:
                continue
            break
        rel = (f - f_new) / max(f, 1e-300)
        dv = dv + t * step
        f = f_new
        energies.append(f)
        if rel < config.tol and eps <= config.eps:
            break
    out = np.zeros(m.shape)
    out[m] = dv
    return DepthField(m.copy(), np.where(m, z, 0.0), out, energies)


def refine_displacement(image, z, params, model: MorphableModel, config: RefineConfig | None = None,
                        raster: RasterMap | None = None) -> DepthField:
    """Estimate the displacement field on top of the Stage-1 depth ``z``."""
    if raster is None:
        from .raster import rasterize
        h, w = np.shape(image)[:2]
        raster = rasterize(params.shape(model), params.pose, model.triangles, w, h)
    return refine_displacement_ctx(image, z, ShadingContext.from_fit(params, model, raster), config)
