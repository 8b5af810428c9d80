"""Parametric (morphable) face model: storage and linear assembly.

Vertex data is stored interleaved, ``[x1, y1, z1, x2, y2, z2, ...]``, so a
3n vector reshapes to ``(n, 3)``.  Model coordinates are millimetres in an
image-aligned frame: x right, y down, z towards the viewer.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import Delaunay


class InvalidArgument(ValueError):
    """Raised when inputs violate an operation's preconditions."""


# Canonical landmark layout of the synthetic model, in ellipse-normalised
# coordinates (x / semi_x, y / semi_y).  y grows downwards (chin is +y).
SYNTHETIC_LANDMARKS = {
    "brow_l_outer": (-0.62, -0.42),
    "brow_l_mid": (-0.40, -0.47),
    "brow_l_inner": (-0.16, -0.42),
    "brow_r_inner": (0.16, -0.42),
    "brow_r_mid": (0.40, -0.47),
    "brow_r_outer": (0.62, -0.42),
    "eye_l_outer": (-0.56, -0.24),
    "eye_l_inner": (-0.20, -0.24),
    "eye_r_inner": (0.20, -0.24),
    "eye_r_outer": (0.56, -0.24),
    "nose_bridge": (0.0, -0.20),
    "nose_tip": (0.0, 0.05),
    "nose_l": (-0.16, 0.12),
    "nose_r": (0.16, 0.12),
    "mouth_l": (-0.30, 0.42),
    "mouth_top": (0.0, 0.34),
    "mouth_r": (0.30, 0.42),
    "mouth_bottom": (0.0, 0.50),
    "chin": (0.0, 0.82),
    "jaw_l": (-0.72, 0.45),
    "jaw_r": (0.72, 0.45),
    "cheek_l": (-0.62, 0.10),
    "cheek_r": (0.62, 0.10),
}


@dataclass(frozen=True, eq=False)
class MorphableModel:
    mean_shape: np.ndarray
    id_basis: np.ndarray
    exp_basis: np.ndarray
    mean_albedo: np.ndarray
    alb_basis: np.ndarray
    sigma_id: np.ndarray
    sigma_exp: np.ndarray
    sigma_alb: np.ndarray
    triangles: np.ndarray
    landmark_indices: np.ndarray
    landmark_names: tuple = field(default=())

    def __post_init__(self):
        n3 = self.mean_shape.shape[0]
        if n3 % 3:
            raise InvalidArgument("mean_shape length must be a multiple of 3")
        for name, basis, sigma in (
            ("id", self.id_basis, self.sigma_id),
            ("exp", self.exp_basis, self.sigma_exp),
            ("alb", self.alb_basis, self.sigma_alb),
        ):
            if basis.ndim != 2 or basis.shape[0] != n3:
                raise InvalidArgument(f"{name}_basis must have {n3} rows")
            if basis.shape[1] != sigma.shape[0]:
                raise InvalidArgument(f"{name}_basis columns do not match sigma_{name}")
            if not np.all(sigma > 0):
                raise InvalidArgument(f"sigma_{name} must be positive")
        if self.mean_albedo.shape != (n3,):
            raise InvalidArgument("mean_albedo must match mean_shape")
        tri = self.triangles
        if tri.ndim != 2 or tri.shape[1] != 3:
            raise InvalidArgument("triangles must be an (m, 3) array")
        if tri.size and (tri.min() < 0 or tri.max() >= n3 // 3):
            raise InvalidArgument("triangle index out of range")
        lm = self.landmark_indices
        if lm.size and (lm.min() < 0 or lm.max() >= n3 // 3):
            raise InvalidArgument("landmark index out of range")
        if self.landmark_names and len(self.landmark_names) != len(lm):
            raise InvalidArgument("landmark_names must match landmark_indices")
        for arr in (self.mean_shape, self.id_basis, self.exp_basis, self.mean_albedo,
                    self.alb_basis, self.sigma_id, self.sigma_exp, self.sigma_alb,
                    self.triangles, self.landmark_indices):
            arr.setflags(write=False)

    @property
    def n_vertices(self) -> int:
        return self.mean_shape.shape[0] // 3

    @property
    def k_id(self) -> int:
        return self.id_basis.shape[1]

    @property
    def k_exp(self) -> int:
        return self.exp_basis.shape[1]

    @property
    def k_alb(self) -> int:
        return self.alb_basis.shape[1]

    def landmark_index(self, name: str) -> int:
        return int(self.landmark_indices[self.landmark_names.index(name)])


def _coeffs(alpha, k, what):
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != (k,):
        raise InvalidArgument(f"{what} must have shape ({k},), got {alpha.shape}")
    return alpha


def assemble_shape(model: MorphableModel, alpha_id, alpha_exp) -> np.ndarray:
    """Return the 3n geometry vector ``mean + A_id a_id + A_exp a_exp``."""
    a_id = _coeffs(alpha_id, model.k_id, "alpha_id")
    a_exp = _coeffs(alpha_exp, model.k_exp, "alpha_exp")
    return model.mean_shape + model.id_basis @ a_id + model.exp_basis @ a_exp


def assemble_albedo(model: MorphableModel, alpha_alb) -> np.ndarray:
    a_alb = _coeffs(alpha_alb, model.k_alb, "alpha_alb")
    return model.mean_albedo + model.alb_basis @ a_alb


def _smooth_fields(rng, xy, n_fields, n_bumps, widths, amp):
    """Random vector fields made of Gaussian bumps centred on vertices.

    Returns a ``(3n, n_fields)`` matrix; ``amp`` scales the x/y/z components.
    """
    n = xy.shape[0]
    out = np.empty((3 * n, n_fields))
    for k in range(n_fields):
        field_ = np.zeros((n, 3))
        centers = rng.integers(0, n, size=n_bumps)
        for c in centers:
            w = rng.uniform(*widths)
            g = np.exp(-np.sum((xy - xy[c]) ** 2, axis=1) / (2 * w * w))
            field_ += g[:, None] * (rng.standard_normal(3) * amp)
        out[:, k] = field_.ravel()
    # full column rank for any K <= 3n
    out += 1e-3 * rng.standard_normal(out.shape) * np.abs(out).max()
    return out


def _orthonormal(mat):
    q, r = np.linalg.qr(mat)
    # make the factorisation unique
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


def generate_synthetic_model(seed: int, n_vertices: int = 500, k_id: int = 10,
                             k_exp: int = 5, k_alb: int = 10,
                             semi_axes=(40.0, 50.0), depth: float = 40.0) -> MorphableModel:
    """Build a deterministic face-like test model.

    The mean shape is a concave-down paraboloid cap over an elliptical
    footprint (a convex height field facing +z), triangulated by Delaunay
    over a sunflower point set.  Bases are smooth random fields with
    orthonormal columns.
    """
    if n_vertices < 4:
        raise InvalidArgument("n_vertices must be >= 4")
    for k in (k_id, k_exp, k_alb):
        if k < 1:
            raise InvalidArgument("basis sizes must be >= 1")
        if k > 3 * n_vertices:
            raise InvalidArgument("basis size exceeds 3 * n_vertices")
    rng = np.random.default_rng(seed)
    a, b = semi_axes

    idx = np.arange(n_vertices) + 0.5
    r = np.sqrt(idx / n_vertices)
    theta = idx * np.pi * (3.0 - np.sqrt(5.0))
    u, v = r * np.cos(theta), r * np.sin(theta)
    x, y = a * u, b * v
    z = depth * (1.0 - u * u - v * v)
    xy = np.column_stack([x, y])
    pts = np.column_stack([x, y, z])

    tri = Delaunay(np.column_stack([u, v])).simplices.astype(np.int64)
    e1 = xy[tri[:, 1]] - xy[tri[:, 0]]
    e2 = xy[tri[:, 2]] - xy[tri[:, 0]]
    area2 = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    flip = area2 < 0
    tri[flip] = tri[flip][:, [0, 2, 1]]
    tri = tri[np.abs(area2) > 1e-9 * a * b]
    tri = tri[np.lexsort((tri[:, 2], tri[:, 1], tri[:, 0]))]

    n3 = 3 * n_vertices
    id_basis = _orthonormal(_smooth_fields(rng, xy, k_id, 4, (15.0, 35.0), (1.0, 1.0, 1.5)))
    exp_basis = _orthonormal(_smooth_fields(rng, xy, k_exp, 3, (8.0, 20.0), (0.7, 1.0, 1.0)))
    alb_basis = _orthonormal(_smooth_fields(rng, xy, k_alb, 6, (5.0, 20.0), (1.0, 1.0, 1.0)))

    # sigma: per-mode RMS vertex displacement of ~1 mm (id), ~0.8 mm (exp),
    # ~0.04 albedo units, decaying over modes
    root = np.sqrt(n3)
    sigma_id = 1.0 * root * 0.92 ** np.arange(k_id) * rng.uniform(0.8, 1.2, k_id)
    sigma_exp = 0.8 * root * 0.9 ** np.arange(k_exp) * rng.uniform(0.8, 1.2, k_exp)
    sigma_alb = 0.04 * root * 0.9 ** np.arange(k_alb) * rng.uniform(0.8, 1.2, k_alb)

    skin = np.array([0.72, 0.52, 0.42])
    shade = 1.0 + 0.08 * np.cos(2.5 * u + rng.uniform(0, np.pi)) * np.cos(2.0 * v)
    mean_albedo = skin[None, :] * shade[:, None]
    lips = np.exp(-((u / 0.3) ** 2 + ((v - 0.42) / 0.1) ** 2))
    mean_albedo += lips[:, None] * np.array([0.1, -0.15, -0.1])
    brows = np.exp(-(((np.abs(u) - 0.4) / 0.22) ** 2 + ((v + 0.45) / 0.05) ** 2))
    mean_albedo -= brows[:, None] * np.array([0.35, 0.28, 0.24])

    names = tuple(SYNTHETIC_LANDMARKS)
    canon = np.array([SYNTHETIC_LANDMARKS[k] for k in names])
    d2 = (u[None, :] - canon[:, :1]) ** 2 + (v[None, :] - canon[:, 1:]) ** 2
    lm = np.argmin(d2, axis=1)

    return MorphableModel(
        mean_shape=pts.ravel(),
        id_basis=id_basis,
        exp_basis=exp_basis,
        mean_albedo=mean_albedo.ravel(),
        alb_basis=alb_basis,
        sigma_id=sigma_id,
        sigma_exp=sigma_exp,
        sigma_alb=sigma_alb,
        triangles=tri,
        landmark_indices=lm.astype(np.int64),
        landmark_names=names,
    )


@dataclass
class Mesh:
    """Positions and colours (stored unclamped) over a shared triangle list."""
    positions: np.ndarray
    colors: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=float).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.colors.shape != self.positions.shape:
            raise InvalidArgument("colours must match positions")
        if not np.all(np.isfinite(self.positions)):
            raise InvalidArgument("mesh positions must be finite")
        if self.triangles.size and (self.triangles.min() < 0
                                    or self.triangles.max() >= self.positions.shape[0]):
            raise InvalidArgument("triangle index out of range")

    @classmethod
    def from_params(cls, model: MorphableModel, params) -> "Mesh":
        return cls(params.shape(model), params.albedo(model), model.triangles)
