"""Writers for the frame-bundle interchange format.

Deliberately independent of the consumer package: this reimplements the
documented on-disk contract (manifest.json + PNG assets + little-endian
float32 blobs) so the two sides only meet at the files.
"""

from __future__ import annotations

import json
from pathlib import Path

import cv2
import numpy as np

MASK_LEVELS = ("s", "m", "l")


def write_f32(path: Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def write_rgb_png(path: Path, img01: np.ndarray) -> None:
    u8 = np.clip(np.rint(np.asarray(img01, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    if not cv2.imwrite(str(path), u8[..., ::-1]):
        raise IOError(f"could not write {path}")


def write_normal_png(path: Path, normals: np.ndarray) -> None:
    v = np.clip(np.asarray(normals, dtype=np.float64), -1.0, 1.0)
    u16 = np.clip(np.rint((v + 1.0) * 0.5 * 65535.0), 0, 65535).astype(np.uint16)
    if not cv2.imwrite(str(path), u16[..., ::-1]):
        raise IOError(f"could not write {path}")


def write_mask_png(path: Path, ids: np.ndarray) -> None:
    if ids.min() < 0 or ids.max() > 65535:
        raise ValueError("mask IDs out of uint16 range")
    if not cv2.imwrite(str(path), ids.astype(np.uint16)):
        raise IOError(f"could not write {path}")


def write_bundle_dir(out: Path, scene: str, frames: list[dict], points_xyz: np.ndarray,
                     points_rgb: np.ndarray, feature_channels: int, extra: dict) -> None:
    """frames: list of dicts with keys camera(dict), rgb, normal, masks(dict), features."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    manifest_frames = []
    for i, fr in enumerate(frames):
        fdir = out / "frames" / f"{i:03d}"
        fdir.mkdir(parents=True, exist_ok=True)
        write_rgb_png(fdir / "rgb.png", fr["rgb"])
        write_normal_png(fdir / "normal.png", fr["normal"])
        for lvl in MASK_LEVELS:
            write_mask_png(fdir / f"mask_{lvl}.png", fr["masks"][lvl])
        write_f32(fdir / "features.f32", fr["features"])
        fh, fw, fc = fr["features"].shape
        rel = f"frames/{i:03d}"
        manifest_frames.append({
            "camera": fr["camera"],
            "rgb": f"{rel}/rgb.png",
            "normal": f"{rel}/normal.png",
            "masks": {lvl: f"{rel}/mask_{lvl}.png" for lvl in MASK_LEVELS},
            "features": {"file": f"{rel}/features.f32", "height": fh, "width": fw, "channels": fc},
        })
    write_f32(out / "points_xyz.f32", points_xyz)
    write_f32(out / "points_rgb.f32", points_rgb)
    manifest = {
        "format": "framebundle",
        "version": 1,
        "scene": scene,
        "units": "scene",
        "feature_channels": feature_channels,
        "normal_space": "camera",
        "feature_normalization": "unit",
        "extra": extra,
        "frames": manifest_frames,
        "init_points": {"xyz": "points_xyz.f32", "rgb": "points_rgb.f32",
                        "count": int(points_xyz.shape[0])},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
