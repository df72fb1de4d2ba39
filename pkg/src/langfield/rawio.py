"""Shared low-level asset I/O: raw little-endian float32 blobs, PNG images, JSON manifests.

Every multi-byte value on disk is little-endian. Raw blobs are bit-exact
round-trippable; PNG-backed channels quantize to their bit depth.
"""

from __future__ import annotations

import json
from pathlib import Path

import cv2
import numpy as np


def write_f32(path: Path | str, arr: np.ndarray) -> None:
    """Write an array as a flat little-endian float32 blob (row-major)."""
    data = np.ascontiguousarray(arr, dtype="<f4")
    Path(path).write_bytes(data.tobytes())


def read_f32(path: Path | str, shape: tuple[int, ...]) -> np.ndarray:
    """Read a little-endian float32 blob and reshape; raises on length mismatch."""
    raw = Path(path).read_bytes()
    expected = int(np.prod(shape)) * 4
    if len(raw) != expected:
        raise ValueError(
            f"blob {path}: expected {expected} bytes for shape {shape}, got {len(raw)}"
        )
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)


def write_json(path: Path | str, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_json(path: Path | str) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def write_rgb8_png(path: Path | str, img: np.ndarray) -> None:
    """Write an (H, W, 3) float image in [0, 1] as 8-bit RGB PNG."""
    img = np.asarray(img, dtype=np.float64)
    u8 = np.clip(np.rint(np.clip(img, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    ok = cv2.imwrite(str(path), u8[..., ::-1])
    if not ok:
        raise IOError(f"failed to write PNG {path}")


def read_rgb8_png(path: Path | str) -> np.ndarray:
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise IOError(f"failed to read PNG {path}")
    if raw.ndim != 3 or raw.shape[2] != 3 or raw.dtype != np.uint8:
        raise ValueError(f"PNG {path}: expected 8-bit 3-channel image, got {raw.dtype} {raw.shape}")
    return (raw[..., ::-1].astype(np.float32)) / 255.0


def write_unit16_png(path: Path | str, vec: np.ndarray) -> None:
    """Write an (H, W, 3) float image in [-1, 1] (e.g. normals) as 16-bit RGB PNG.

    The mapping runs in float64 so the round trip stays within one
    quantization half-step (1/65535) of the input.
    """
    vec = np.asarray(vec, dtype=np.float64)
    u16 = np.clip(np.rint((np.clip(vec, -1.0, 1.0) + 1.0) * 0.5 * 65535.0), 0, 65535)
    ok = cv2.imwrite(str(path), u16.astype(np.uint16)[..., ::-1])
    if not ok:
        raise IOError(f"failed to write PNG {path}")


def read_unit16_png(path: Path | str) -> np.ndarray:
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise IOError(f"failed to read PNG {path}")
    if raw.ndim != 3 or raw.shape[2] != 3 or raw.dtype != np.uint16:
        raise ValueError(f"PNG {path}: expected 16-bit 3-channel image, got {raw.dtype} {raw.shape}")
    # float64 keeps the decode within the 1/65535 quantization bound
    return raw[..., ::-1].astype(np.float64) / 65535.0 * 2.0 - 1.0


def write_id16_png(path: Path | str, ids: np.ndarray) -> None:
    """Write an (H, W) integer ID map as 16-bit single-channel PNG (exact for IDs < 65536)."""
    if ids.min() < 0 or ids.max() > 65535:
        raise ValueError(f"ID map out of uint16 range: [{ids.min()}, {ids.max()}]")
    ok = cv2.imwrite(str(path), ids.astype(np.uint16))
    if not ok:
        raise IOError(f"failed to write PNG {path}")


def read_id16_png(path: Path | str) -> np.ndarray:
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise IOError(f"failed to read PNG {path}")
    if raw.ndim != 2 or raw.dtype != np.uint16:
        raise ValueError(f"PNG {path}: expected 16-bit single-channel image, got {raw.dtype} {raw.shape}")
    return raw.astype(np.int32)
