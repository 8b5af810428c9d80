"""Weak-perspective camera and second-order SH Lambertian shading."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import InvalidArgument

# Real spherical-harmonic constants, bands 0-2.
SH_C0 = 0.282095
SH_C1 = 0.488603
SH_C2 = 1.092548
SH_C3 = 0.315392
SH_C4 = 0.546274

N_SH = 9


@dataclass
class Pose:
    """Weak-perspective pose: q = s * R[:2] @ p + t (pixels)."""
    scale: float = 1.0
    pitch: float = 0.0
    yaw: float = 0.0
    roll: float = 0.0
    tx: float = 0.0
    ty: float = 0.0

    def __post_init__(self):
        if not self.scale > 0:
            raise InvalidArgument("pose scale must be positive")
        if not np.all(np.isfinite(self.as_vector())):
            raise InvalidArgument("pose entries must be finite")

    @property
    def t(self) -> np.ndarray:
        return np.array([self.tx, self.ty])

    @property
    def rotation(self) -> np.ndarray:
        return rotation_from_euler(self.pitch, self.yaw, self.roll)

    def as_vector(self) -> np.ndarray:
        """(pitch, yaw, roll, tx, ty, scale) -- the ordering used for pose deltas."""
        return np.array([self.pitch, self.yaw, self.roll, self.tx, self.ty, self.scale], dtype=float)

    @classmethod
    def from_vector(cls, vec) -> "Pose":
        pitch, yaw, roll, tx, ty, scale = (float(v) for v in vec)
        return cls(scale=scale, pitch=pitch, yaw=yaw, roll=roll, tx=tx, ty=ty)


POSE_FIELDS = ("pitch", "yaw", "roll", "tx", "ty", "scale")


def default_pose(width: int, height: int, face_extent: float = 100.0) -> Pose:
    """Frontal pose centring a face of ``face_extent`` model units in the frame."""
    return Pose(scale=0.7 * min(width, height) / face_extent, tx=width / 2.0, ty=height / 2.0)


@dataclass
class Illumination:
    """27 SH coefficients: 9 for red, then green, then blue."""
    coeffs: np.ndarray = field(default_factory=lambda: np.zeros(3 * N_SH))

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float).reshape(-1)
        if self.coeffs.shape != (3 * N_SH,):
            raise InvalidArgument("illumination needs 27 coefficients")
        if not np.all(np.isfinite(self.coeffs)):
            raise InvalidArgument("illumination coefficients must be finite")

    @property
    def gamma(self) -> np.ndarray:
        """(3, 9) view: one row of SH coefficients per colour channel."""
        return self.coeffs.reshape(3, N_SH)

    @classmethod
    def ambient(cls, level) -> "Illumination":
        """DC-only lighting giving irradiance factor ``level`` (scalar or RGB)."""
        c = np.zeros((3, N_SH))
        c[:, 0] = np.broadcast_to(np.asarray(level, dtype=float), (3,)) / SH_C0
        return cls(c.ravel())


def _rx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _ry(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rz(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _drx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[0.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]])


def _dry(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]])


def _drz(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])


def rotation_from_euler(pitch: float, yaw: float, roll: float) -> np.ndarray:
    """R = Rz(roll) @ Ry(yaw) @ Rx(pitch)."""
    return _rz(roll) @ _ry(yaw) @ _rx(pitch)


def rotation_derivatives(pitch: float, yaw: float, roll: float) -> np.ndarray:
    """dR/d(pitch, yaw, roll) stacked as a (3, 3, 3) array."""
    rx, ry, rz = _rx(pitch), _ry(yaw), _rz(roll)
    return np.stack([
        rz @ ry @ _drx(pitch),
        rz @ _dry(yaw) @ rx,
        _drz(roll) @ ry @ rx,
    ])


def camera_points(pose: Pose, points) -> np.ndarray:
    """Rotate (n, 3) model points into the camera frame (no scale/translation)."""
    return np.asarray(points, dtype=float).reshape(-1, 3) @ pose.rotation.T


def project_points(pose: Pose, points):
    """Project (n, 3) points; returns ((n, 2) pixel coords, (n,) camera depth).

    Larger depth means closer to the viewer.
    """
    cam = camera_points(pose, points)
    q = pose.scale * cam[:, :2] + pose.t
    return q, cam[:, 2]


def project_vertex(pose: Pose, p) -> tuple[np.ndarray, float]:
    q, z = project_points(pose, np.asarray(p, dtype=float).reshape(1, 3))
    return q[0], float(z[0])


def _as_unit(normals):
    n = np.asarray(normals, dtype=float)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise InvalidArgument("zero-length normal")
    if np.any(np.abs(norm - 1.0) > 1e-6):
        n = n / norm
    return n


def sh_basis(normals) -> np.ndarray:
    """Evaluate the 9 real SH basis functions at unit normals (..., 3) -> (..., 9)."""
    n = _as_unit(normals)
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    return np.stack([
        np.full_like(x, SH_C0),
        SH_C1 * y,
        SH_C1 * z,
        SH_C1 * x,
        SH_C2 * x * y,
        SH_C2 * y * z,
        SH_C3 * (3.0 * z * z - 1.0),
        SH_C2 * x * z,
        SH_C4 * (x * x - y * y),
    ], axis=-1)


def sh_basis_grad(normals) -> np.ndarray:
    """Ambient-space gradient of each basis polynomial: (..., 3) -> (..., 9, 3).

    Callers chain this with the derivative of the normalised normal.
    """
    n = np.asarray(normals, dtype=float)
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    zero = np.zeros_like(x)
    g = np.stack([
        np.stack([zero, zero, zero], -1),
        np.stack([zero, zero + SH_C1, zero], -1),
        np.stack([zero, zero, zero + SH_C1], -1),
        np.stack([zero + SH_C1, zero, zero], -1),
        np.stack([SH_C2 * y, SH_C2 * x, zero], -1),
        np.stack([zero, SH_C2 * z, SH_C2 * y], -1),
        np.stack([zero, zero, 6.0 * SH_C3 * z], -1),
        np.stack([SH_C2 * z, zero, SH_C2 * x], -1),
        np.stack([2.0 * SH_C4 * x, -2.0 * SH_C4 * y, zero], -1),
    ], axis=-2)
    return g


def shading(normals, illum: Illumination) -> np.ndarray:
    """Per-channel irradiance factor r^T phi(n): (..., 3) normals -> (..., 3)."""
    return sh_basis(normals) @ illum.gamma.T


def shade(albedo, normals, illum: Illumination) -> np.ndarray:
    """Lambertian SH irradiance b_c * sum_k gamma_ck phi_k(n), unclamped."""
    return np.asarray(albedo, dtype=float) * shading(normals, illum)
