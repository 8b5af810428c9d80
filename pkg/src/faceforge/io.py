"""File formats: PFM, sRGB PNG, OBJ, the model container and JSON documents."""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
from PIL import Image
from PIL.PngImagePlugin import PngInfo

from .model import InvalidArgument, Mesh, MorphableModel
from .params import FaceParams

MODEL_FORMAT = "faceforge-mm/1"
FIT_FORMAT = "faceforge-fit/1"
PARAMS_FORMAT = "faceforge-params/1"

# blob name -> (attribute, dtype, shape description)
MODEL_BLOBS = (
    ("mean_shape", "<f4", "3n"),
    ("id_basis", "<f4", "3n x K_id, row-major"),
    ("exp_basis", "<f4", "3n x K_exp, row-major"),
    ("mean_albedo", "<f4", "3n"),
    ("alb_basis", "<f4", "3n x K_alb, row-major"),
    ("sigma_id", "<f4", "K_id"),
    ("sigma_exp", "<f4", "K_exp"),
    ("sigma_alb", "<f4", "K_alb"),
    ("triangles", "<i4", "m x 3, row-major"),
)


class FormatError(InvalidArgument):
    """A file does not follow the expected layout."""


# ---------------------------------------------------------------- JSON

def dumps(doc) -> str:
    """Canonical JSON: sorted keys, two-space indent, trailing newline."""
    return json.dumps(doc, sort_keys=True, indent=2, allow_nan=True) + "\n"


def write_json(path, doc) -> None:
    Path(path).write_text(dumps(doc), encoding="utf-8")


def read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc


# ---------------------------------------------------------------- PFM

def write_pfm(path, data) -> None:
    """Little-endian PFM; (H, W) is greyscale ``Pf``, (H, W, 3) colour ``PF``."""
    arr = np.asarray(data, dtype="<f4")
    if arr.ndim == 2:
        tag = b"Pf"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        tag = b"PF"
    else:
        raise InvalidArgument("PFM data must be (H, W) or (H, W, 3)")
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(tag + b"\n%d %d\n-1.0\n" % (w, h))
        f.write(np.ascontiguousarray(arr[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    """Read a PFM file into a float32 array with the top row first."""
    with open(path, "rb") as f:
        raw = f.read()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] not in (b"PF", b"Pf"):
        raise FormatError(f"{path}: not a PFM file")
    try:
        w, h = (int(v) for v in parts[1].split())
        scale = float(parts[2])
    except ValueError as exc:
        raise FormatError(f"{path}: malformed PFM header") from exc
    ch = 3 if parts[0] == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    body = parts[3]
    if len(body) != w * h * ch * 4:
        raise FormatError(f"{path}: PFM payload has the wrong size")
    arr = np.frombuffer(body, dtype=dtype).reshape((h, w, ch) if ch == 3 else (h, w))
    return arr[::-1].astype(np.float32)


# ---------------------------------------------------------------- PNG

def linear_to_srgb(x):
    x = np.clip(np.asarray(x, dtype=float), 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1.0 / 2.4) - 0.055)


def srgb_to_linear(x):
    x = np.asarray(x, dtype=float)
    return np.where(x <= 0.04045, x / 12.92, np.power((x + 0.055) / 1.055, 2.4))


def write_png(path, linear, encode_srgb: bool = True) -> None:
    """8-bit PNG tagged sRGB; values are clamped to [0, 1] first.

    With ``encode_srgb=False`` the values are written as-is (for data images
    such as PNCC or masks) and no colour chunk is added.
    """
    arr = np.asarray(linear, dtype=float)
    if arr.ndim not in (2, 3):
        raise InvalidArgument("PNG data must be (H, W) or (H, W, 3)")
    enc = linear_to_srgb(arr) if encode_srgb else np.clip(arr, 0.0, 1.0)
    img = Image.fromarray(np.round(enc * 255.0).astype(np.uint8))
    info = PngInfo()
    if encode_srgb:
        info.add(b"sRGB", b"\x00")
    img.save(path, format="PNG", pnginfo=info)


def read_png(path, decode_srgb: bool = True) -> np.ndarray:
    """PNG as float RGB in [0, 1]; sRGB-decoded to linear by default."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=float) / 255.0
    return srgb_to_linear(arr) if decode_srgb else arr


def read_image(path) -> np.ndarray:
    """Linear RGB float64 image from PFM or PNG."""
    p = str(path).lower()
    if p.endswith(".pfm"):
        arr = read_pfm(path).astype(float)
        if arr.ndim == 2:
            arr = np.repeat(arr[..., None], 3, axis=2)
        return arr
    return read_png(path)


def write_image(path, linear) -> None:
    if str(path).lower().endswith(".pfm"):
        write_pfm(path, linear)
    else:
        write_png(path, linear)


# ---------------------------------------------------------------- OBJ

def write_obj(path, mesh: Mesh) -> None:
    """Wavefront OBJ with per-vertex colours (clamped to [0, 1] on export)."""
    col = np.clip(mesh.colors, 0.0, 1.0)
    lines = [f"v {p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {c[0]:.6g} {c[1]:.6g} {c[2]:.6g}"
             for p, c in zip(mesh.positions, col)]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_obj(path) -> Mesh:
    pos, col, tri = [], [], []
    for line in Path(path).read_text(encoding="ascii").splitlines():
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "v":
            vals = [float(v) for v in tok[1:]]
            pos.append(vals[:3])
            col.append(vals[3:6] if len(vals) >= 6 else [1.0, 1.0, 1.0])
        elif tok[0] == "f":
            tri.append([int(t.split("/")[0]) - 1 for t in tok[1:4]])
    return Mesh(np.array(pos), np.array(col), np.array(tri, dtype=np.int64).reshape(-1, 3))


# ---------------------------------------------------------------- model container

def save_model(directory, model: MorphableModel) -> None:
    """Write the manifest plus one little-endian blob per array."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    blobs = {}
    for name, dtype, layout in MODEL_BLOBS:
        arr = np.asarray(getattr(model, name)).astype(dtype)
        fname = f"{name}.{'i32' if dtype == '<i4' else 'f32'}"
        (d / fname).write_bytes(arr.tobytes())
        blobs[name] = {"file": fname, "dtype": dtype, "layout": layout, "count": int(arr.size)}
    manifest = {
        "format": MODEL_FORMAT,
        "n_vertices": model.n_vertices,
        "k_id": model.k_id,
        "k_exp": model.k_exp,
        "k_alb": model.k_alb,
        "n_triangles": int(model.triangles.shape[0]),
        "landmark_indices": [int(i) for i in model.landmark_indices],
        "landmark_names": list(model.landmark_names),
        "units": "millimetres",
        "vertex_layout": "interleaved x, y, z per vertex",
        "blobs": blobs,
    }
    write_json(d / "manifest.json", manifest)


def load_model(directory) -> MorphableModel:
    d = Path(directory)
    if not (d / "manifest.json").is_file():
        raise FormatError(f"{d}: no manifest.json")
    man = read_json(d / "manifest.json")
    if man.get("format") != MODEL_FORMAT:
        raise FormatError(f"{d}: unsupported model format {man.get('format')!r}")
    n3 = 3 * int(man["n_vertices"])
    shapes = {
        "mean_shape": (n3,), "id_basis": (n3, man["k_id"]), "exp_basis": (n3, man["k_exp"]),
        "mean_albedo": (n3,), "alb_basis": (n3, man["k_alb"]),
        "sigma_id": (man["k_id"],), "sigma_exp": (man["k_exp"],), "sigma_alb": (man["k_alb"],),
        "triangles": (man["n_triangles"], 3),
    }
    arrays = {}
    for name, dtype, _ in MODEL_BLOBS:
        info = man["blobs"][name]
        raw = (d / info["file"]).read_bytes()
        arr = np.frombuffer(raw, dtype=dtype)
        if arr.size != int(np.prod(shapes[name])):
            raise FormatError(f"{d}: blob {info['file']} has the wrong size")
        arrays[name] = arr.reshape(shapes[name]).astype(np.int64 if dtype == "<i4" else float)
    return MorphableModel(landmark_indices=np.asarray(man["landmark_indices"], dtype=np.int64),
                          landmark_names=tuple(man.get("landmark_names", ())), **arrays)


# ---------------------------------------------------------------- parameters, fits, landmarks

def save_params(path, params: FaceParams) -> None:
    write_json(path, dict(params.to_dict(), format=PARAMS_FORMAT))


def load_params(path) -> FaceParams:
    doc = read_json(path)
    if doc.get("format") == FIT_FORMAT:
        doc = doc["params"]
    return FaceParams.from_dict(doc)


def fit_document(result) -> dict:
    return {"format": FIT_FORMAT, "params": result.params.to_dict(), "status": result.status,
            "trace": [e.to_dict() for e in result.trace]}


def save_fit(path, result) -> None:
    write_json(path, fit_document(result))


def load_fit(path):
    from .fitting import EnergyBreakdown, FitResult

    doc = read_json(path)
    if doc.get("format") != FIT_FORMAT:
        raise FormatError(f"{path}: not a {FIT_FORMAT} document")
    trace = [EnergyBreakdown(e["e_con"], e["e_lan"], e["e_reg"], e["e_total"], e.get("phase", ""),
                             e.get("lambda", float("nan"))) for e in doc.get("trace", [])]
    return FitResult(FaceParams.from_dict(doc["params"]), trace, doc.get("status", ""))


def load_landmarks(path):
    """Landmarks from a JSON array of [vertex_index, x, y] rows."""
    from .fitting import LandmarkSet

    rows = read_json(path)
    try:
        arr = np.asarray(rows, dtype=float).reshape(-1, 3)
    except ValueError as exc:
        raise FormatError(f"{path}: landmarks must be [index, x, y] rows") from exc
    if np.any(arr[:, 0] != np.round(arr[:, 0])):
        raise FormatError(f"{path}: landmark indices must be integers")
    return LandmarkSet(arr[:, 0].astype(np.int64), arr[:, 1:])


def save_landmarks(path, landmarks) -> None:
    write_json(path, [[int(i), float(x), float(y)]
                      for i, (x, y) in zip(landmarks.indices, landmarks.points)])


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
