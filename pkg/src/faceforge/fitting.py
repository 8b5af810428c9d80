"""Stage 1: fit model, pose and lighting to an image by damped Gauss-Newton.

Energy: E = E_con + w_l * E_lan + w_r * E_reg with

* E_con = (1/|F|) sum over face pixels and RGB of (I_ren - I_in)^2
* E_lan = (1/|L|) sum of squared landmark reprojection errors (pixels)
* E_reg = sum (alpha / sigma)^2 over identity, albedo and expression modes
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .camera import (SH_C0, Illumination, Pose, camera_points, rotation_derivatives,
                     sh_basis, sh_basis_grad)
from .model import InvalidArgument, MorphableModel
from .params import FaceParams, param_slices
from .raster import RasterMap, rasterize

log = logging.getLogger(__name__)


class FaceOffScreen(RuntimeError):
    """The face region is empty, so the photometric term is undefined."""


@dataclass
class FittingConfig:
    w_l: float = 10.0
    w_r: float = 5e-5
    max_iter_pose: int = 50
    max_iter_light: int = 20
    max_iter_joint: int = 150
    lambda_init: float = 1e-3
    lambda_up: float = 10.0
    lambda_down: float = 2.0
    lambda_max: float = 1e10
    tol: float = 1e-10

    def __post_init__(self):
        if self.w_l < 0 or self.w_r < 0:
            raise InvalidArgument("weights must be non-negative")
        if not self.tol > 0:
            raise InvalidArgument("tolerance must be positive")


@dataclass
class LandmarkSet:
    indices: np.ndarray     # vertex ids
    points: np.ndarray      # (L, 2) pixels

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 2)
        if self.indices.shape[0] != self.points.shape[0]:
            raise InvalidArgument("landmark indices and points differ in length")
        if not np.all(np.isfinite(self.points)):
            raise InvalidArgument("landmark points must be finite")

    def __len__(self):
        return self.indices.shape[0]

    def check(self, model: MorphableModel) -> "LandmarkSet":
        if len(self) == 0:
            raise InvalidArgument("empty landmark set")
        if not np.all(np.isin(self.indices, model.landmark_indices)):
            raise InvalidArgument("landmark index outside the model's landmark scheme")
        return self

    @classmethod
    def project(cls, model: MorphableModel, params: FaceParams) -> "LandmarkSet":
        """Landmarks obtained by projecting a parameter set (synthetic ground truth)."""
        pts = params.shape(model).reshape(-1, 3)[model.landmark_indices]
        cam = camera_points(params.pose, pts)
        q = params.pose.scale * cam[:, :2] + params.pose.t
        return cls(model.landmark_indices.copy(), q)


@dataclass
class EnergyBreakdown:
    e_con: float
    e_lan: float
    e_reg: float
    e_total: float
    phase: str = ""
    lam: float = float("nan")

    def to_dict(self) -> dict:
        return {"phase": self.phase, "e_con": self.e_con, "e_lan": self.e_lan,
                "e_reg": self.e_reg, "e_total": self.e_total, "lambda": self.lam}


@dataclass
class FitResult:
    params: FaceParams
    trace: list = field(default_factory=list)
    status: str = "converged"
    raster: RasterMap | None = None

    @property
    def energy(self) -> EnergyBreakdown:
        return self.trace[-1]


def _check_image(image):
    image = np.asarray(image, dtype=float)
    if image.ndim != 3 or image.shape[2] != 3:
        raise InvalidArgument("image must be (H, W, 3)")
    if not np.all(np.isfinite(image)):
        raise InvalidArgument("image must be finite")
    return image


def energy_con(image, params: FaceParams, model: MorphableModel, raster: RasterMap | None = None) -> float:
    """Mean (over face pixels) squared RGB difference between render and image."""
    from .raster import render_face, triangle_normals
    image = _check_image(image)
    h, w = image.shape[:2]
    pos = params.shape(model)
    if raster is None:
        raster = rasterize(pos, params.pose, model.triangles, w, h)
    m = raster.mask
    if not m.any():
        raise FaceOffScreen("face region is empty")
    ren = render_face(raster, model.triangles, params.albedo(model),
                      triangle_normals(pos, params.pose, model.triangles), params.illum)
    diff = ren.pixels[m] - image[m]
    return float(np.sum(diff * diff) / m.sum())


def energy_lan(landmarks: LandmarkSet, params: FaceParams, model: MorphableModel) -> float:
    if len(landmarks) == 0:
        raise InvalidArgument("empty landmark set")
    pts = params.shape(model).reshape(-1, 3)[landmarks.indices]
    cam = camera_points(params.pose, pts)
    q = params.pose.scale * cam[:, :2] + params.pose.t
    return float(np.sum((landmarks.points - q) ** 2) / len(landmarks))


def energy_reg(params: FaceParams, model: MorphableModel) -> float:
    return float(np.sum((params.alpha_id / model.sigma_id) ** 2)
                 + np.sum((params.alpha_alb / model.sigma_alb) ** 2)
                 + np.sum((params.alpha_exp / model.sigma_exp) ** 2))


def energy(image, landmarks, params, model, config: FittingConfig, raster=None,
           phase: str = "") -> EnergyBreakdown:
    e_con = energy_con(image, params, model, raster)
    e_lan = energy_lan(landmarks, params, model)
    e_reg = energy_reg(params, model)
    return EnergyBreakdown(e_con, e_lan, e_reg, e_con + config.w_l * e_lan + config.w_r * e_reg,
                           phase)


def photometric_rmse(image, params, model, raster=None) -> float:
    """Root mean square per-channel error over the face region."""
    return float(np.sqrt(energy_con(image, params, model, raster) / 3.0))


def landmark_error(landmarks: LandmarkSet, params, model) -> float:
    """Mean Euclidean landmark reprojection error in pixels."""
    pts = params.shape(model).reshape(-1, 3)[landmarks.indices]
    cam = camera_points(params.pose, pts)
    q = params.pose.scale * cam[:, :2] + params.pose.t
    return float(np.mean(np.linalg.norm(q - landmarks.points, axis=1)))


# ---------------------------------------------------------------------------
# residuals and Jacobians (columns follow FaceParams.to_vector ordering)

def landmark_residuals(landmarks: LandmarkSet, params: FaceParams, model: MorphableModel,
                       w_l: float = 1.0, jacobian: bool = True):
    """Residuals sqrt(w_l/|L|) (proj(p_i) - q_i), shape (2L,), and their Jacobian."""
    sl = param_slices(model)
    n_par = sl["illum"].stop
    pose = params.pose
    R = pose.rotation
    idx = landmarks.indices
    pts = params.shape(model).reshape(-1, 3)[idx]
    cam = pts @ R.T
    q = pose.scale * cam[:, :2] + pose.t
    c = np.sqrt(w_l / len(landmarks))
    r = c * (q - landmarks.points).ravel()
    if not jacobian:
        return r, None
    L = len(landmarks)
    J = np.zeros((L, 2, n_par))
    rows = (3 * idx[:, None] + np.arange(3)[None, :])            # (L, 3)
    a_id = model.id_basis[rows]                                   # (L, 3, K)
    a_exp = model.exp_basis[rows]
    P2 = pose.scale * R[:2]
    J[:, :, sl["alpha_id"]] = np.einsum("ij,ljk->lik", P2, a_id)
    J[:, :, sl["alpha_exp"]] = np.einsum("ij,ljk->lik", P2, a_exp)
    dR = rotation_derivatives(pose.pitch, pose.yaw, pose.roll)
    J[:, :, sl["angles"]] = pose.scale * np.einsum("aij,lj->lia", dR[:, :2], pts)
    J[:, :, sl["scale"]] = cam[:, :2, None]
    J[:, 0, sl["t"].start] = 1.0
    J[:, 1, sl["t"].start + 1] = 1.0
    return r, c * J.reshape(2 * L, n_par)


def _normal_jacobians(model, params, tri_ids):
    """Unit camera normals of the given triangles and d n / d (alpha_id, alpha_exp, angles)."""
    pose = params.pose
    R = pose.rotation
    dR = rotation_derivatives(pose.pitch, pose.yaw, pose.roll)
    p = params.shape(model).reshape(-1, 3)
    tri = model.triangles[tri_ids]
    verts = np.unique(tri)
    n = model.n_vertices
    k1, k2 = model.k_id, model.k_exp
    rows = 3 * verts[:, None] + np.arange(3)[None, :]
    # dc_v / dtheta for each involved vertex: (V, 3, k1 + k2 + 3)
    D = np.empty((verts.shape[0], 3, k1 + k2 + 3))
    D[:, :, :k1] = np.einsum("ij,vjk->vik", R, model.id_basis[rows])
    D[:, :, k1:k1 + k2] = np.einsum("ij,vjk->vik", R, model.exp_basis[rows])
    D[:, :, k1 + k2:] = np.einsum("aij,vj->via", dR, p[verts])
    lut = np.full(n, -1, dtype=np.int64)
    lut[verts] = np.arange(verts.shape[0])
    cam = p @ R.T
    ca, cb, cc = cam[tri[:, 0]], cam[tri[:, 1]], cam[tri[:, 2]]
    e1, e2 = cb - ca, cc - ca
    Da, Db, Dc = D[lut[tri[:, 0]]], D[lut[tri[:, 1]]], D[lut[tri[:, 2]]]
    de1, de2 = Db - Da, Dc - Da
    N = np.cross(e1, e2)
    dN = np.cross(e1[:, :, None], de2, axis=1) - np.cross(e2[:, :, None], de1, axis=1)
    norm = np.linalg.norm(N, axis=1)
    nrm = N / norm[:, None]
    proj = np.eye(3)[None] - nrm[:, :, None] * nrm[:, None, :]
    dn = np.einsum("tij,tjk->tik", proj, dN) / norm[:, None, None]
    return nrm, dn


def photometric_residuals(image, params: FaceParams, model: MorphableModel, raster: RasterMap,
                          jacobian: bool = True):
    """Residuals sqrt(1/|F|) (I_ren - I_in) over face pixels x RGB, shape (3|F|,).

    Barycentric assignments and the mask are held fixed (the raster is an
    input); normals are differentiated through the vertex positions.
    """
    sl = param_slices(model)
    n_par = sl["illum"].stop
    m = raster.mask
    P = int(m.sum())
    if P == 0:
        raise FaceOffScreen("face region is empty")
    t = raster.tri_index[m]
    lam = raster.bary[m]
    tri_u, inv = np.unique(t, return_inverse=True)
    if jacobian:
        nrm_t, dn_t = _normal_jacobians(model, params, tri_u)
    else:
        pos = params.shape(model).reshape(-1, 3)
        cam = camera_points(params.pose, pos)
        tri = model.triangles[tri_u]
        N = np.cross(cam[tri[:, 1]] - cam[tri[:, 0]], cam[tri[:, 2]] - cam[tri[:, 0]])
        nrm_t = N / np.linalg.norm(N, axis=1, keepdims=True)
    phi = sh_basis(nrm_t)[inv]                                   # (P, 9)
    gamma = params.illum.gamma                                   # (3, 9)
    shade = phi @ gamma.T                                        # (P, 3)
    vids = model.triangles[t]                                    # (P, 3)
    alb_v = params.albedo(model).reshape(-1, 3)
    b = np.einsum("pk,pkc->pc", lam, alb_v[vids])                # (P, 3)
    color = b * shade
    c = np.sqrt(1.0 / P)
    r = c * (color - image[m]).ravel()
    if not jacobian:
        return r, None
    J = np.zeros((P, 3, n_par))
    # albedo coefficients
    rows = 3 * vids[:, :, None] + np.arange(3)[None, None, :]    # (P, 3 verts, 3 ch)
    a_pix = np.einsum("pk,pkcj->pcj", lam, model.alb_basis[rows])
    J[:, :, sl["alpha_alb"]] = shade[:, :, None] * a_pix
    # lighting
    ill = sl["illum"].start
    for ch in range(3):
        J[:, ch, ill + 9 * ch: ill + 9 * ch + 9] = b[:, ch:ch + 1] * phi
    # geometry and rotation through the triangle normal
    grad = sh_basis_grad(nrm_t)                                  # (T, 9, 3)
    dshade_dn = np.einsum("ck,tkj->tcj", gamma, grad)           # (T, 3, 3)
    dshade = np.einsum("tcj,tjk->tck", dshade_dn, dn_t)[inv]     # (P, 3, K1+K2+3)
    g = b[:, :, None] * dshade
    k12 = model.k_id + model.k_exp
    J[:, :, sl["alpha_id"]] = g[:, :, :model.k_id]
    J[:, :, sl["alpha_exp"]] = g[:, :, model.k_id:k12]
    J[:, :, sl["angles"]] = g[:, :, k12:]
    return r, c * J.reshape(3 * P, n_par)


def reg_residuals(params: FaceParams, model: MorphableModel, w_r: float = 1.0):
    sl = param_slices(model)
    n_par = sl["illum"].stop
    c = np.sqrt(w_r)
    r = c * np.concatenate([params.alpha_id / model.sigma_id,
                            params.alpha_exp / model.sigma_exp,
                            params.alpha_alb / model.sigma_alb])
    k = r.shape[0]
    J = np.zeros((k, n_par))
    J[np.arange(k), np.arange(k)] = c / np.concatenate([model.sigma_id, model.sigma_exp,
                                                        model.sigma_alb])
    return r, J


# ---------------------------------------------------------------------------
# initialisation

def estimate_pose_from_landmarks(landmarks: LandmarkSet, model: MorphableModel,
                                 params: FaceParams | None = None) -> Pose:
    """Linear affine-camera fit projected onto a scaled rotation."""
    if params is None:
        pts = model.mean_shape.reshape(-1, 3)[landmarks.indices]
    else:
        pts = params.shape(model).reshape(-1, 3)[landmarks.indices]
    q = landmarks.points
    if len(landmarks) < 4:
        raise InvalidArgument("need at least 4 landmarks for a pose estimate")
    A = np.column_stack([pts, np.ones(len(landmarks))])
    sol, *_ = np.linalg.lstsq(A, q, rcond=None)
    M = sol[:3].T                                                # (2, 3)
    U, S, Vt = np.linalg.svd(M, full_matrices=False)
    r12 = U @ Vt
    s = float(S.mean())
    R = np.vstack([r12, np.cross(r12[0], r12[1])])
    yaw = -np.arcsin(np.clip(R[2, 0], -1.0, 1.0))
    pitch = np.arctan2(R[2, 1], R[2, 2])
    roll = np.arctan2(R[1, 0], R[0, 0])
    t = q.mean(axis=0) - s * (R[:2] @ pts.mean(axis=0))
    return Pose(scale=s, pitch=float(pitch), yaw=float(yaw), roll=float(roll),
                tx=float(t[0]), ty=float(t[1]))


def initial_illumination(image, params: FaceParams, model: MorphableModel,
                         raster: RasterMap) -> Illumination:
    """Grey DC-only lighting matching the mean face-region intensity."""
    from .raster import interpolate_vertex_attr
    m = raster.mask
    if not m.any():
        raise FaceOffScreen("face region is empty")
    b = interpolate_vertex_attr(raster, model.triangles, params.albedo(model).reshape(-1, 3))[m]
    level = float(np.mean(image[m])) / max(float(np.mean(b)), 1e-6)
    c = np.zeros((3, 9))
    c[:, 0] = level / SH_C0
    return Illumination(c.ravel())


# ---------------------------------------------------------------------------
# optimiser

class _Problem:
    def __init__(self, image, landmarks, model, config):
        self.image = image
        self.h, self.w = image.shape[:2]
        self.landmarks = landmarks
        self.model = model
        self.config = config
        self.k = (model.k_id, model.k_exp, model.k_alb)
        sigma = np.concatenate([model.sigma_id, model.sigma_exp, model.sigma_alb])
        n_par = param_slices(model)["illum"].stop
        # LM works in sigma-whitened coefficients
        self.col_scale = np.ones(n_par)
        self.col_scale[:sigma.shape[0]] = sigma

    def params(self, x):
        return FaceParams.from_vector(x, *self.k)

    def raster(self, params):
        return rasterize(params.shape(self.model), params.pose, self.model.triangles, self.w, self.h)

    def evaluate(self, x, phase):
        """Breakdown at x, or None when x is invalid (off-screen, bad scale)."""
        try:
            params = self.params(x)
        except InvalidArgument:
            return None, None
        raster = self.raster(params)
        if not raster.mask.any():
            return None, None
        return energy(self.image, self.landmarks, params, self.model, self.config, raster,
                      phase), raster

    @staticmethod
    def objective(e: EnergyBreakdown, phase: str, config: FittingConfig) -> float:
        if phase == "pose":
            return config.w_l * e.e_lan + config.w_r * e.e_reg
        return e.e_total

    def system(self, x, raster, phase):
        params = self.params(x)
        cfg = self.config
        blocks = [landmark_residuals(self.landmarks, params, self.model, cfg.w_l)]
        if phase != "pose":
            blocks.append(photometric_residuals(self.image, params, self.model, raster))
        blocks.append(reg_residuals(params, self.model, cfg.w_r))
        r = np.concatenate([b[0] for b in blocks])
        J = np.vstack([b[1] for b in blocks])
        return r, J


def _lm_phase(prob: _Problem, x, active, phase, trace, max_iter):
    cfg = prob.config
    e, raster = prob.evaluate(x, phase)
    if e is None:
        raise FaceOffScreen(f"face region empty at start of phase {phase!r}")
    f = prob.objective(e, phase, cfg)
    lam = cfg.lambda_init
    e.lam = lam
    trace.append(e)
    scale = prob.col_scale[active]
    status = "max-iterations"
    for _ in range(max_iter):
        r, J = prob.system(x, raster, phase)
        Js = J[:, active] * scale
        g = Js.T @ r
        H = Js.T @ Js
        accepted = False
        while lam <= cfg.lambda_max:
            try:
                step = np.linalg.solve(H + lam * np.eye(H.shape[0]), -g)
            except np.linalg.LinAlgError:
                lam *= cfg.lambda_up
                continue
            x_new = x.copy()
            x_new[active] += scale * step
            e_new, raster_new = prob.evaluate(x_new, phase)
            if e_new is not None:
                f_new = prob.objective(e_new, phase, cfg)
                if f_new <= f:
                    accepted = True
                    break
            lam *= cfg.lambda_up
        if not accepted:
            status = "converged"
            break
        rel = (f - f_new) / max(f, 1e-300)
        x, raster, f = x_new, raster_new, f_new
        lam = max(lam / cfg.lambda_down, 1e-12)
        e_new.lam = lam
        trace.append(e_new)
        if rel < cfg.tol:
            status = "converged"
            break
    return x, raster, status


def _light_phase(prob: _Problem, x, raster, trace, max_iter):
    """Alternate exact least squares for SH lighting and albedo coefficients.

    Geometry (hence mask, barycentrics and normals) is fixed, and each block
    solve minimises the full energy in its variables, so E never increases.
    """
    model, image, cfg = prob.model, prob.image, prob.config
    sl = param_slices(model)
    params = prob.params(x)
    m = raster.mask
    P = int(m.sum())
    t = raster.tri_index[m]
    lam_b = raster.bary[m]
    pos = params.shape(model)
    from .raster import triangle_normals
    nrm = triangle_normals(pos, params.pose, model.triangles)[t]
    phi = sh_basis(nrm)
    vids = model.triangles[t]
    rows = 3 * vids[:, :, None] + np.arange(3)[None, None, :]
    a_pix = np.einsum("pk,pkcj->pcj", lam_b, model.alb_basis[rows])          # (P, 3, K)
    b_mean = np.einsum("pk,pkc->pc", lam_b, model.mean_albedo.reshape(-1, 3)[vids])
    I = image[m]
    e = energy(image, prob.landmarks, params, model, cfg, raster, "light")
    f = e.e_total
    trace.append(e)
    for _ in range(max_iter):
        # lighting, per channel
        b = b_mean + a_pix @ params.alpha_alb
        gamma = np.empty((3, 9))
        for ch in range(3):
            A = b[:, ch:ch + 1] * phi
            gamma[ch], *_ = np.linalg.lstsq(A, I[:, ch], rcond=None)
        cand = params.copy(illum=Illumination(gamma.ravel()))
        # albedo, given the new lighting
        shade = phi @ gamma.T
        A = (shade[:, :, None] * a_pix).reshape(3 * P, -1)
        rhs = (I - shade * b_mean).ravel()
        H = A.T @ A / P + cfg.w_r * np.diag(1.0 / model.sigma_alb ** 2)
        alpha = np.linalg.solve(H, A.T @ rhs / P)
        cand2 = cand.copy(alpha_alb=alpha)
        e_new = energy(image, prob.landmarks, cand2, model, cfg, raster, "light")
        if not e_new.e_total <= f:
            e1 = energy(image, prob.landmarks, cand, model, cfg, raster, "light")
            if e1.e_total <= f:
                cand2, e_new = cand, e1
            else:
                break
        rel = (f - e_new.e_total) / max(f, 1e-300)
        params, f = cand2, e_new.e_total
        trace.append(e_new)
        if rel < prob.config.tol:
            break
    x = x.copy()
    x[sl["illum"]] = params.illum.coeffs
    x[sl["alpha_alb"]] = params.alpha_alb
    return x


def fit_model(image, landmarks: LandmarkSet, model: MorphableModel,
              config: FittingConfig | None = None, init: FaceParams | Pose | None = None) -> FitResult:
    """Estimate FaceParams for ``image`` given landmark correspondences.

    ``init`` may be a full parameter set, a pose (coefficients start at the
    mean face, lighting at matched grey ambient), or None (pose from the
    landmarks as well).  Phases: pose on the landmark energy, lighting and
    albedo with geometry frozen, then all parameters jointly.
    """
    config = config or FittingConfig()
    image = _check_image(image)
    landmarks.check(model)
    prob = _Problem(image, landmarks, model, config)
    sl = param_slices(model)
    n_par = sl["illum"].stop

    full_init = isinstance(init, FaceParams)
    if full_init:
        params = init.copy().check(model)
    else:
        pose = init if isinstance(init, Pose) else estimate_pose_from_landmarks(landmarks, model)
        params = FaceParams.neutral(model, pose)
    trace: list[EnergyBreakdown] = []

    x = params.to_vector()
    pose_cols = np.r_[sl["angles"], sl["scale"], sl["t"]]
    x, raster, _ = _lm_phase(prob, x, pose_cols, "pose", trace, config.max_iter_pose)
    if not full_init:
        p = prob.params(x)
        x[sl["illum"]] = initial_illumination(image, p, model, raster).coeffs
    x = _light_phase(prob, x, raster, trace, config.max_iter_light)
    x, raster, status = _lm_phase(prob, x, np.arange(n_par), "joint", trace,
                                  config.max_iter_joint)
    if status == "max-iterations":
        log.warning("fit stopped at the iteration limit")
    return FitResult(prob.params(x), trace, status, raster)
