"""File formats used across the library.

Binary containers (all little-endian):
  corr.bin    "GCOR" + u32 W + u32 H + W*H records of (u16 x, u16 y),
              row-major, sentinel (0xFFFF, 0xFFFF) for background.
  mirror.bin  "GMIR" + u32 N + N u32 partner indices.
  *.gnet      "GNET" + u32 json_len + UTF-8 JSON header + f32 payload.
  *.ghmp      "GHMP" + u32 W + u32 H + W*H f32, row-major.

JSON written through this module is canonical (sorted keys, fixed
separators) so identical content is byte-identical on disk.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

CORR_SENTINEL = 0xFFFF


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_json(path, obj) -> None:
    Path(path).write_text(canonical_json(obj) + "\n", encoding="utf-8")


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# PNG helpers

def write_png(path, array: np.ndarray) -> None:
    """8-bit grayscale (H, W) or RGB (H, W, 3)."""
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        raise ValueError(f"expected uint8 array, got {arr.dtype}")
    mode = "L" if arr.ndim == 2 else "RGB"
    Image.fromarray(arr, mode=mode).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    return np.asarray(Image.open(path))


# ---------------------------------------------------------------------------
# Correspondence map: (H, W, 2) float array of (x, y) canonical-image pixel
# coordinates; NaN marks background.

def _write_pixel_records(path, magic: bytes, pix: np.ndarray) -> None:
    h, w = pix.shape[:2]
    rec = np.empty((h, w, 2), dtype="<u2")
    bg = ~np.isfinite(pix[..., 0])
    rounded = np.rint(np.where(np.isfinite(pix), pix, 0.0)).astype(np.int64)
    valid = rounded[~bg]
    if valid.size and ((valid < 0).any() or (valid >= CORR_SENTINEL).any()):
        raise ValueError("pixel record outside u16 range")
    rec[..., 0] = rounded[..., 0]
    rec[..., 1] = rounded[..., 1]
    rec[bg] = CORR_SENTINEL
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<II", w, h))
        f.write(rec.tobytes())


def _read_pixel_records(path, magic: bytes) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != magic:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    w, h = struct.unpack_from("<II", raw, 4)
    rec = np.frombuffer(raw, dtype="<u2", offset=12).reshape(h, w, 2)
    out = rec.astype(np.float64)
    out[(rec[..., 0] == CORR_SENTINEL) & (rec[..., 1] == CORR_SENTINEL)] = np.nan
    return out


def write_corr(path, corr: np.ndarray) -> None:
    _write_pixel_records(path, b"GCOR", corr)


def read_corr(path) -> np.ndarray:
    return _read_pixel_records(path, b"GCOR")


# ---------------------------------------------------------------------------
# Mirror map: per-pixel (x, y) of the left/right partner on the canonical
# image, NaN off-mask. Same record layout as the correspondence map.

def write_mirror(path, partner: np.ndarray) -> None:
    _write_pixel_records(path, b"GMIR", partner)


def read_mirror(path) -> np.ndarray:
    return _read_pixel_records(path, b"GMIR")


# ---------------------------------------------------------------------------
# Network checkpoints

def write_checkpoint(path, header: dict, payload: np.ndarray) -> None:
    """header: JSON-serializable metadata; payload: flat f32 weight vector."""
    payload = np.ascontiguousarray(payload, dtype="<f4")
    blob = canonical_json(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(b"GNET")
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(payload.tobytes())


def read_checkpoint(path) -> tuple[dict, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != b"GNET":
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    (n,) = struct.unpack_from("<I", raw, 4)
    header = json.loads(raw[8:8 + n].decode("utf-8"))
    payload = np.frombuffer(raw, dtype="<f4", offset=8 + n).copy()
    return header, payload


# ---------------------------------------------------------------------------
# Probability heatmaps

def write_heatmap_raw(path, probs: np.ndarray) -> None:
    h, w = probs.shape
    with open(path, "wb") as f:
        f.write(b"GHMP")
        f.write(struct.pack("<II", w, h))
        f.write(np.ascontiguousarray(probs, dtype="<f4").tobytes())


def read_heatmap_raw(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != b"GHMP":
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    w, h = struct.unpack_from("<II", raw, 4)
    return np.frombuffer(raw, dtype="<f4", offset=12).reshape(h, w).astype(np.float32)


# Fixed 17-anchor approximation of the familiar blue-green-yellow colormap;
# embedded so heatmap PNGs do not depend on plotting-library versions.
_CMAP_ANCHORS = np.array([
    [68, 1, 84], [71, 24, 106], [72, 40, 120], [69, 55, 129],
    [64, 70, 136], [57, 85, 140], [51, 99, 141], [45, 112, 142],
    [40, 125, 142], [35, 138, 141], [31, 151, 139], [32, 163, 134],
    [41, 175, 127], [59, 187, 117], [86, 198, 103], [116, 208, 85],
    [253, 231, 37],
], dtype=np.float64)


def colorize(values: np.ndarray) -> np.ndarray:
    """Map scalar grid to 8-bit RGB via the embedded colormap (min-max scaled)."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    t = np.zeros_like(v) if hi <= lo else (v - lo) / (hi - lo)
    pos = t * (len(_CMAP_ANCHORS) - 1)
    i0 = np.clip(pos.astype(np.int64), 0, len(_CMAP_ANCHORS) - 2)
    frac = (pos - i0)[..., None]
    rgb = _CMAP_ANCHORS[i0] * (1 - frac) + _CMAP_ANCHORS[i0 + 1] * frac
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def write_heatmap_png(path, probs: np.ndarray) -> None:
    write_png(path, colorize(probs))
