"""The full rendering parameter set and its flat-vector packing."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .camera import N_SH, Illumination, Pose
from .model import InvalidArgument, MorphableModel, assemble_albedo, assemble_shape


@dataclass
class FaceParams:
    alpha_id: np.ndarray
    alpha_exp: np.ndarray
    alpha_alb: np.ndarray
    pose: Pose
    illum: Illumination

    def __post_init__(self):
        self.alpha_id = np.asarray(self.alpha_id, dtype=float)
        self.alpha_exp = np.asarray(self.alpha_exp, dtype=float)
        self.alpha_alb = np.asarray(self.alpha_alb, dtype=float)
        for a in (self.alpha_id, self.alpha_exp, self.alpha_alb):
            if a.ndim != 1 or not np.all(np.isfinite(a)):
                raise InvalidArgument("coefficients must be finite 1-D vectors")

    @classmethod
    def neutral(cls, model: MorphableModel, pose: Pose | None = None,
                illum: Illumination | None = None) -> "FaceParams":
        return cls(np.zeros(model.k_id), np.zeros(model.k_exp), np.zeros(model.k_alb),
                   pose if pose is not None else Pose(),
                   illum if illum is not None else Illumination.ambient(1.0))

    def check(self, model: MorphableModel) -> "FaceParams":
        if (self.alpha_id.shape != (model.k_id,) or self.alpha_exp.shape != (model.k_exp,)
                or self.alpha_alb.shape != (model.k_alb,)):
            raise InvalidArgument("parameter dimensions do not match the model")
        return self

    def shape(self, model: MorphableModel) -> np.ndarray:
        return assemble_shape(model, self.alpha_id, self.alpha_exp)

    def albedo(self, model: MorphableModel) -> np.ndarray:
        return assemble_albedo(model, self.alpha_alb)

    def copy(self, **changes) -> "FaceParams":
        base = FaceParams(self.alpha_id.copy(), self.alpha_exp.copy(), self.alpha_alb.copy(),
                          replace(self.pose), Illumination(self.illum.coeffs.copy()))
        return replace(base, **changes)

    # flat packing: [alpha_id | alpha_exp | alpha_alb | pitch yaw roll | scale tx ty | r]
    def to_vector(self) -> np.ndarray:
        p = self.pose
        return np.concatenate([self.alpha_id, self.alpha_exp, self.alpha_alb,
                               [p.pitch, p.yaw, p.roll, p.scale, p.tx, p.ty],
                               self.illum.coeffs])

    @classmethod
    def from_vector(cls, vec, k_id: int, k_exp: int, k_alb: int) -> "FaceParams":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (k_id + k_exp + k_alb + 6 + 3 * N_SH,):
            raise InvalidArgument("parameter vector has the wrong length")
        o = 0
        a_id = vec[o:o + k_id]; o += k_id
        a_exp = vec[o:o + k_exp]; o += k_exp
        a_alb = vec[o:o + k_alb]; o += k_alb
        pitch, yaw, roll, scale, tx, ty = vec[o:o + 6]; o += 6
        pose = Pose(scale=float(scale), pitch=float(pitch), yaw=float(yaw), roll=float(roll),
                    tx=float(tx), ty=float(ty))
        return cls(a_id.copy(), a_exp.copy(), a_alb.copy(), pose, Illumination(vec[o:].copy()))

    def to_dict(self) -> dict:
        p = self.pose
        return {
            "alpha_id": self.alpha_id.tolist(),
            "alpha_exp": self.alpha_exp.tolist(),
            "alpha_alb": self.alpha_alb.tolist(),
            "pose": {"scale": p.scale, "pitch": p.pitch, "yaw": p.yaw, "roll": p.roll,
                     "tx": p.tx, "ty": p.ty},
            "illum": self.illum.coeffs.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FaceParams":
        try:
            pose = Pose(**{k: float(v) for k, v in d["pose"].items()})
            return cls(d["alpha_id"], d["alpha_exp"], d["alpha_alb"], pose,
                       Illumination(d["illum"]))
        except (KeyError, TypeError) as exc:
            raise InvalidArgument(f"malformed parameter document: {exc}") from exc


def param_slices(model: MorphableModel) -> dict:
    """Named slices into the flat parameter vector."""
    k1, k2, k3 = model.k_id, model.k_exp, model.k_alb
    o = k1 + k2 + k3
    return {
        "alpha_id": slice(0, k1),
        "alpha_exp": slice(k1, k1 + k2),
        "alpha_alb": slice(k1 + k2, o),
        "angles": slice(o, o + 3),
        "scale": slice(o + 3, o + 4),
        "t": slice(o + 4, o + 6),
        "illum": slice(o + 6, o + 6 + 3 * N_SH),
    }
