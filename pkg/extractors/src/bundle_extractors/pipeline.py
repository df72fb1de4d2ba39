"""Frame-sequence to frame-bundle conversion with per-frame caching."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from . import __version__, modalities, writer


@dataclass
class ExtractorJob:
    input_dir: Path
    output_dir: Path
    clip_model: str = "hash"            # hash | a CLIP vision checkpoint name
    mask_model: str = "felzenszwalb"    # felzenszwalb | sam-video
    normal_model: str = "shading"       # shading | pretrained
    feature_channels: int = 512
    feature_downsample: int = 2
    device: str = "cpu"
    normal_weights: str | None = None
    mask_weights: str | None = None
    seed: int = 0
    points_count: int = 512             # fallback cloud size when none is ingested

    def config_digest(self) -> str:
        payload = json.dumps({
            "clip": self.clip_model, "mask": self.mask_model, "normal": self.normal_model,
            "channels": self.feature_channels, "downsample": self.feature_downsample,
            "seed": self.seed, "version": __version__,
        }, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:12]


def list_frames(input_dir: Path) -> list[Path]:
    frames = sorted(p for p in Path(input_dir).iterdir()
                    if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if len(frames) < 2:
        raise ValueError(f"{input_dir}: need >= 2 frames, found {len(frames)}")
    return frames


def load_rgb01(path: Path) -> np.ndarray:
    raw = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if raw is None:
        raise ValueError(f"cannot read frame {path}")
    return raw[..., ::-1].astype(np.float64) / 255.0


def load_cameras(input_dir: Path, frames: list[Path], shape: tuple[int, int]) -> list[dict]:
    """poses.json when present; otherwise a placeholder stereo layout (poses are
    ingested, never estimated here)."""
    h, w = shape
    poses_path = Path(input_dir) / "poses.json"
    if poses_path.exists():
        payload = json.loads(poses_path.read_text())
        by_name = {e["file"]: e for e in payload["frames"]}
        cams = []
        for fp in frames:
            if fp.name not in by_name:
                raise ValueError(f"poses.json has no entry for {fp.name}")
            e = by_name[fp.name]
            cams.append({"fx": float(e["fx"]), "fy": float(e["fy"]),
                         "cx": float(e["cx"]), "cy": float(e["cy"]),
                         "width": w, "height": h, "w2c": e["w2c"]})
        return cams
    cams = []
    baseline = 0.08
    for i in range(len(frames)):
        w2c = [[1.0, 0.0, 0.0, -baseline * i],
               [0.0, 1.0, 0.0, 0.0],
               [0.0, 0.0, 1.0, 0.0]]
        cams.append({"fx": float(max(h, w)), "fy": float(max(h, w)),
                     "cx": w / 2.0, "cy": h / 2.0, "width": w, "height": h, "w2c": w2c})
    return cams


def load_or_make_points(input_dir: Path, cams: list[dict], first_rgb: np.ndarray,
                        count: int, seed: int):
    """Ingest points_xyz/points_rgb blobs if present; otherwise scatter a
    deterministic placeholder cloud inside the first camera's frustum."""
    xyz_path = Path(input_dir) / "points_xyz.f32"
    rgb_path = Path(input_dir) / "points_rgb.f32"
    if xyz_path.exists() and rgb_path.exists():
        xyz = np.frombuffer(xyz_path.read_bytes(), dtype="<f4").reshape(-1, 3)
        rgb = np.frombuffer(rgb_path.read_bytes(), dtype="<f4").reshape(-1, 3)
        if xyz.shape != rgb.shape:
            raise ValueError("ingested point blobs disagree in length")
        return xyz.copy(), rgb.copy()
    rng = np.random.default_rng(np.random.PCG64(seed ^ 0xC10D))
    h, w = first_rgb.shape[:2]
    cam = cams[0]
    px = rng.integers(0, w, count)
    py = rng.integers(0, h, count)
    z = rng.uniform(1.0, 3.0, count)
    x = (px + 0.5 - cam["cx"]) / cam["fx"] * z
    y = (py + 0.5 - cam["cy"]) / cam["fy"] * z
    xyz = np.stack([x, y, z], axis=1).astype(np.float32)
    rgb = first_rgb[py, px].astype(np.float32)
    return xyz, rgb


class _Cache:
    def __init__(self, root: Path, digest: str):
        self.dir = Path(root) / ".cache" / digest
        self.dir.mkdir(parents=True, exist_ok=True)
        self.hits = 0
        self.misses = 0

    def get_or_compute(self, key: str, compute):
        path = self.dir / f"{key}.npz"
        if path.exists():
            self.hits += 1
            with np.load(path) as z:
                return {k: z[k] for k in z.files}
        self.misses += 1
        value = compute()
        np.savez(path, **value)
        return value


def extract_bundle(job: ExtractorJob) -> Path:
    """Run all modality extractors over the input frames and write a bundle."""
    frames = list_frames(job.input_dir)
    images = [load_rgb01(p) for p in frames]
    shape = images[0].shape[:2]
    for p, img in zip(frames, images):
        if img.shape[:2] != shape:
            raise ValueError(f"{p.name}: resolution {img.shape[:2]} differs from {shape}")
    cams = load_cameras(job.input_dir, frames, shape)
    cache = _Cache(job.output_dir, job.config_digest())

    frame_payloads = []
    for path, rgb, cam in zip(frames, images, cams):
        digest = modalities.frame_digest(path)

        def compute():
            if job.normal_model == "shading":
                normal = modalities.normals_shading(rgb)
            else:
                normal = modalities.normals_pretrained(rgb, job.normal_weights, job.device)
            if job.mask_model == "felzenszwalb":
                masks = modalities.masks_felzenszwalb(rgb)
            else:
                masks = modalities.masks_pretrained(rgb, job.mask_weights, job.device)
            if job.clip_model == "hash":
                feats = modalities.clip_hash_features(rgb, job.feature_channels,
                                                      job.feature_downsample, job.seed)
            else:
                feats = modalities.clip_pretrained_features(rgb, job.clip_model,
                                                            job.feature_channels,
                                                            job.feature_downsample, job.device)
            return {"normal": normal.astype(np.float32),
                    "mask_s": masks["s"], "mask_m": masks["m"], "mask_l": masks["l"],
                    "features": feats.astype(np.float32)}

        arrs = cache.get_or_compute(digest, compute)
        frame_payloads.append({
            "camera": cam,
            "rgb": rgb,
            "normal": arrs["normal"],
            "masks": {lvl: arrs[f"mask_{lvl}"] for lvl in ("s", "m", "l")},
            "features": arrs["features"],
        })

    xyz, rgbp = load_or_make_points(job.input_dir, cams, images[0], job.points_count, job.seed)
    writer.write_bundle_dir(
        Path(job.output_dir), scene=Path(job.input_dir).name, frames=frame_payloads,
        points_xyz=xyz, points_rgb=rgbp, feature_channels=job.feature_channels,
        extra={
            "extractor": f"bundle-extractors {__version__}",
            "models": {"clip": job.clip_model, "mask": job.mask_model,
                       "normal": job.normal_model},
            "cache": {"hits": cache.hits, "misses": cache.misses},
        })
    return Path(job.output_dir)
