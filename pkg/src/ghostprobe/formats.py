"""On-disk formats: PFM depth maps, PPM images, JSON sidecars, dataset layout.

A dataset directory holds `index.json` (sample id list), one directory per
sample (`<id>/depth.pfm`, `<id>/image.ppm`, `<id>/intrinsics.json`), and a
top-level `annotations.json` mapping id -> [[x_min, y_min, x_max, y_max],
...].  Readers and writers are mutual inverses at the byte level.
"""

import json
import os

import numpy as np

from .errors import ConfigError
from .geometry import CameraIntrinsics, DepthFrame

INDEX_NAME = "index.json"
ANNOTATIONS_NAME = "annotations.json"
DEPTH_NAME = "depth.pfm"
IMAGE_NAME = "image.ppm"
INTRINSICS_NAME = "intrinsics.json"


def _read_token(fh):
    """Next whitespace-delimited header token; '#' starts a comment line."""
    tok = b""
    c = fh.read(1)
    while c:
        if c == b"#":
            while c and c != b"\n":
                c = fh.read(1)
        elif c.isspace():
            if tok:
                break
            c = fh.read(1)
        else:
            tok += c
            c = fh.read(1)
    return tok


# -- PFM: grayscale float maps ------------------------------------------------


def write_pfm(path, data):
    """Grayscale little-endian PFM; rows stored bottom-up per the format."""
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim != 2:
        raise ConfigError(f"PFM writer takes a 2-d map, got shape {arr.shape}")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{w} {h}\n".encode("ascii"))
        fh.write(b"-1.0\n")
        fh.write(np.flipud(arr).astype("<f4").tobytes())


def read_pfm(path):
    """Read a grayscale PFM back into a float32 [H, W] array."""
    with open(path, "rb") as fh:
        magic = _read_token(fh)
        if magic == b"PF":
            raise ConfigError(f"{path}: color PFM not supported, expected grayscale 'Pf'")
        if magic != b"Pf":
            raise ConfigError(f"{path}: not a PFM file (magic {magic!r})")
        try:
            w = int(_read_token(fh))
            h = int(_read_token(fh))
            scale = float(_read_token(fh))
        except ValueError as exc:
            raise ConfigError(f"{path}: malformed PFM header") from exc
        if w <= 0 or h <= 0 or scale == 0.0:
            raise ConfigError(f"{path}: invalid PFM header values")
        dtype = "<f4" if scale < 0 else ">f4"
        buf = fh.read(4 * w * h)
        if len(buf) != 4 * w * h:
            raise ConfigError(f"{path}: truncated PFM data")
        return np.flipud(np.frombuffer(buf, dtype=dtype).reshape(h, w)).astype(np.float32)


# -- PPM: 8-bit binary RGB ----------------------------------------------------


def write_ppm(path, rgb):
    """Binary P6 image; float inputs in [0,1] are quantized to 8 bits."""
    arr = np.asarray(rgb)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ConfigError(f"PPM writer takes [H, W, 3], got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if np.any(arr < 0) or np.any(arr > 1):
            raise ConfigError("float PPM input must lie in [0, 1]")
        arr = np.round(arr * 255.0).astype(np.uint8)
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_ppm(path):
    """Read a P6 image into float32 [H, W, 3] in [0, 1]."""
    with open(path, "rb") as fh:
        if _read_token(fh) != b"P6":
            raise ConfigError(f"{path}: not a binary PPM (P6) file")
        try:
            w = int(_read_token(fh))
            h = int(_read_token(fh))
            maxval = int(_read_token(fh))
        except ValueError as exc:
            raise ConfigError(f"{path}: malformed PPM header") from exc
        if maxval != 255:
            raise ConfigError(f"{path}: only 8-bit PPM supported, maxval was {maxval}")
        buf = fh.read(3 * w * h)
        if len(buf) != 3 * w * h:
            raise ConfigError(f"{path}: truncated PPM data")
        return np.frombuffer(buf, dtype=np.uint8).reshape(h, w, 3).astype(np.float32) / 255.0


# -- JSON sidecars ------------------------------------------------------------

_INTRINSICS_KEYS = ("fx", "fy", "cx", "cy", "width", "height")


def write_intrinsics(path, intr):
    doc = {"fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy,
           "width": intr.width, "height": intr.height}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def read_intrinsics(path):
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON") from exc
    if not isinstance(doc, dict) or set(doc) != set(_INTRINSICS_KEYS):
        raise ConfigError(f"{path}: intrinsics must have exactly keys {_INTRINSICS_KEYS}")
    return CameraIntrinsics(fx=float(doc["fx"]), fy=float(doc["fy"]),
                            cx=float(doc["cx"]), cy=float(doc["cy"]),
                            width=int(doc["width"]), height=int(doc["height"]))


def write_annotations(path, boxes_by_id):
    """boxes_by_id: sample id -> list of (x_min, y_min, x_max, y_max)."""
    doc = {sid: [[float(v) for v in box] for box in boxes] for sid, boxes in boxes_by_id.items()}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_annotations(path):
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON") from exc
    out = {}
    for sid, boxes in doc.items():
        parsed = []
        for box in boxes:
            if len(box) != 4:
                raise ConfigError(f"{path}: box for '{sid}' must have 4 coordinates, got {box}")
            parsed.append(tuple(float(v) for v in box))
        out[sid] = parsed
    return out


# -- dataset layout -----------------------------------------------------------


def write_index(dataset_dir, sample_ids):
    with open(os.path.join(dataset_dir, INDEX_NAME), "w", encoding="utf-8") as fh:
        json.dump({"samples": list(sample_ids)}, fh, indent=2)
        fh.write("\n")


def read_index(dataset_dir):
    path = os.path.join(dataset_dir, INDEX_NAME)
    if not os.path.exists(path):
        raise ConfigError(f"{dataset_dir}: no {INDEX_NAME}; not a dataset directory")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON") from exc
    if not isinstance(doc, dict) or "samples" not in doc or not isinstance(doc["samples"], list):
        raise ConfigError(f"{path}: index must be an object with a 'samples' list")
    return [str(s) for s in doc["samples"]]


def sample_dir(dataset_dir, sample_id):
    return os.path.join(dataset_dir, sample_id)


def write_sample_files(dataset_dir, frame):
    """Write one frame's depth/image/intrinsics under its sample directory."""
    d = sample_dir(dataset_dir, frame.sample_id)
    os.makedirs(d, exist_ok=True)
    write_pfm(os.path.join(d, DEPTH_NAME), frame.depth)
    write_ppm(os.path.join(d, IMAGE_NAME), frame.rgb)
    write_intrinsics(os.path.join(d, INTRINSICS_NAME), frame.intrinsics)


def read_sample_files(dataset_dir, sample_id):
    """Load one sample directory back into a DepthFrame."""
    d = sample_dir(dataset_dir, sample_id)
    depth = read_pfm(os.path.join(d, DEPTH_NAME))
    rgb = read_ppm(os.path.join(d, IMAGE_NAME))
    intr = read_intrinsics(os.path.join(d, INTRINSICS_NAME))
    return DepthFrame(depth=depth, rgb=rgb, intrinsics=intr, sample_id=sample_id)
