"""On-disk scene interchange format consumed by training and evaluation.

A frame bundle is a directory with a ``manifest.json`` plus per-frame assets:

* ``rgb.png``      8-bit RGB in [0, 1]
* ``normal.png``   16-bit RGB mapping [-1, 1] per channel (camera space by default)
* ``mask_{s,m,l}.png``  16-bit single-channel integer ID maps, 0 = unlabeled
* ``features.f32`` raw little-endian float32 blob, row-major H*W*C
* ``points_xyz.f32`` / ``points_rgb.f32``  initial point cloud blobs

Raw blobs round-trip bit-exactly; PNG channels round-trip within their
quantization step (1/255 for RGB, 1/65535 for normals; masks are exact).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rawio

MASK_LEVELS = ("s", "m", "l")

MANIFEST_NAME = "manifest.json"
FORMAT_NAME = "framebundle"
FORMAT_VERSION = 1


class BundleValidationError(ValueError):
    """A bundle (or one of its parts) violates a format invariant."""


@dataclass
class Camera:
    """Pinhole camera: intrinsics in pixels, extrinsics as a 3x4 world-to-camera matrix."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    w2c: np.ndarray  # (3, 4), rows [R | t]

    @property
    def R(self) -> np.ndarray:
        return self.w2c[:, :3]

    @property
    def t(self) -> np.ndarray:
        return self.w2c[:, 3]

    def validate(self, where: str = "camera") -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise BundleValidationError(f"{where}: focal lengths must be positive (fx={self.fx}, fy={self.fy})")
        if not (0 <= self.cx < self.width):
            raise BundleValidationError(f"{where}: cx={self.cx} outside [0, width={self.width})")
        if not (0 <= self.cy < self.height):
            raise BundleValidationError(f"{where}: cy={self.cy} outside [0, height={self.height})")
        w2c = np.asarray(self.w2c, dtype=np.float64)
        if w2c.shape != (3, 4):
            raise BundleValidationError(f"{where}: extrinsics must be 3x4, got {w2c.shape}")
        if not np.all(np.isfinite(w2c)):
            raise BundleValidationError(f"{where}: extrinsics contain non-finite values")
        rt_r = w2c[:, :3].T @ w2c[:, :3]
        if np.abs(rt_r - np.eye(3)).max() > 1e-6:
            raise BundleValidationError(f"{where}: rotation block is not orthonormal within 1e-6")

    def to_dict(self) -> dict:
        return {
            "fx": float(self.fx), "fy": float(self.fy),
            "cx": float(self.cx), "cy": float(self.cy),
            "width": int(self.width), "height": int(self.height),
            "w2c": np.asarray(self.w2c, dtype=np.float64).tolist(),
        }

    @staticmethod
    def from_dict(d: dict) -> "Camera":
        return Camera(
            fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]),
            width=int(d["width"]), height=int(d["height"]),
            w2c=np.asarray(d["w2c"], dtype=np.float64),
        )


@dataclass
class FeatureMap:
    """Dense row-major (H, W, C) float map; all values finite."""

    data: np.ndarray

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def validate(self, where: str = "feature map") -> None:
        if self.data.ndim != 3:
            raise BundleValidationError(f"{where}: expected (H, W, C) array, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise BundleValidationError(f"{where}: contains non-finite values")


@dataclass
class MaskStack:
    """Per-hierarchy-level integer ID maps; 0 is reserved for unlabeled pixels."""

    levels: dict[str, np.ndarray]

    def validate(self, where: str = "mask stack") -> None:
        if set(self.levels.keys()) != set(MASK_LEVELS):
            raise BundleValidationError(
                f"{where} (MaskStack): levels must be exactly {MASK_LEVELS}, got {sorted(self.levels)}"
            )
        shapes = {lvl: m.shape for lvl, m in self.levels.items()}
        if len(set(shapes.values())) != 1:
            raise BundleValidationError(f"{where} (MaskStack): level dimensions differ: {shapes}")
        for lvl, m in self.levels.items():
            if m.ndim != 2:
                raise BundleValidationError(f"{where} (MaskStack): level {lvl} must be 2-D, got {m.shape}")
            if m.min() < 0:
                raise BundleValidationError(f"{where} (MaskStack): level {lvl} has negative IDs")
            present = np.unique(m)
            present = present[present > 0]
            if present.size and not np.array_equal(present, np.arange(1, present.size + 1)):
                raise BundleValidationError(
                    f"{where} (MaskStack): level {lvl} IDs not contiguous from 1: {present.tolist()}"
                )

    @property
    def shape(self) -> tuple[int, int]:
        return next(iter(self.levels.values())).shape


@dataclass
class Frame:
    camera: Camera
    rgb: FeatureMap
    normal: FeatureMap
    masks: MaskStack
    clip_features: FeatureMap


@dataclass
class BundleMeta:
    scene: str
    feature_channels: int
    units: str = "scene"
    normal_space: str = "camera"
    feature_normalization: str = "none"
    extra: dict = field(default_factory=dict)


@dataclass
class FrameBundle:
    """Posed multi-view frames plus the initial point cloud standing in for generated video output."""

    frames: list[Frame]
    init_points: np.ndarray   # (N, 3) float32 positions
    init_colors: np.ndarray   # (N, 3) float32 colors in [0, 1]
    meta: BundleMeta

    def validate(self) -> None:
        if len(self.frames) < 2:
            raise BundleValidationError(f"bundle needs >= 2 frames, got {len(self.frames)}")
        rgb_shape = self.frames[0].rgb.data.shape[:2]
        for i, fr in enumerate(self.frames):
            where = f"frame {i}"
            fr.camera.validate(f"{where}: camera")
            fr.rgb.validate(f"{where}: rgb")
            fr.normal.validate(f"{where}: normal")
            fr.clip_features.validate(f"{where}: clip_features")
            if fr.rgb.channels != 3:
                raise BundleValidationError(f"{where}: rgb must have 3 channels, got {fr.rgb.channels}")
            if fr.normal.channels != 3:
                raise BundleValidationError(f"{where}: normal must have 3 channels, got {fr.normal.channels}")
            if fr.rgb.data.shape[:2] != rgb_shape:
                raise BundleValidationError(
                    f"{where}: rgb dims {fr.rgb.data.shape[:2]} differ from frame 0 {rgb_shape}"
                )
            if (fr.camera.height, fr.camera.width) != rgb_shape:
                raise BundleValidationError(
                    f"{where}: camera size {(fr.camera.height, fr.camera.width)} != rgb dims {rgb_shape}"
                )
            if fr.normal.data.shape[:2] != rgb_shape:
                raise BundleValidationError(f"{where}: normal dims differ from rgb dims")
            fr.masks.validate(where)
            if fr.masks.shape != rgb_shape:
                raise BundleValidationError(f"{where} (MaskStack): mask dims {fr.masks.shape} != rgb dims {rgb_shape}")
            norms = np.linalg.norm(fr.normal.data, axis=-1)
            defined = norms > 0.5
            if defined.any():
                err = np.abs(norms[defined] - 1.0).max()
                if err > 1e-3:
                    raise BundleValidationError(
                        f"{where}: normal vectors deviate from unit length by {err:.2e} (> 1e-3)"
                    )
            if fr.clip_features.channels != self.meta.feature_channels:
                raise BundleValidationError(
                    f"{where}: clip_features channels {fr.clip_features.channels} != manifest C {self.meta.feature_channels}"
                )
            fh, fw = fr.clip_features.data.shape[:2]
            if rgb_shape[0] % fh != 0 or rgb_shape[1] % fw != 0:
                raise BundleValidationError(
                    f"{where}: clip_features resolution {(fh, fw)} does not divide rgb resolution {rgb_shape}"
                )
        pts = np.asarray(self.init_points)
        cols = np.asarray(self.init_colors)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise BundleValidationError(f"init_points must be (N, 3), got {pts.shape}")
        if cols.shape != pts.shape:
            raise BundleValidationError(f"init_colors shape {cols.shape} != init_points shape {pts.shape}")
        if not np.all(np.isfinite(pts)) or not np.all(np.isfinite(cols)):
            raise BundleValidationError("init point cloud contains non-finite values")


def write_bundle(bundle: FrameBundle, path: Path | str) -> None:
    """Validate and serialize a bundle into ``path`` (created if missing)."""
    bundle.validate()
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    frames_manifest = []
    for i, fr in enumerate(bundle.frames):
        fdir = root / "frames" / f"{i:03d}"
        fdir.mkdir(parents=True, exist_ok=True)
        rawio.write_rgb8_png(fdir / "rgb.png", fr.rgb.data)
        rawio.write_unit16_png(fdir / "normal.png", fr.normal.data)
        for lvl in MASK_LEVELS:
            rawio.write_id16_png(fdir / f"mask_{lvl}.png", fr.masks.levels[lvl])
        rawio.write_f32(fdir / "features.f32", fr.clip_features.data)
        rel = f"frames/{i:03d}"
        fh, fw, fc = fr.clip_features.data.shape
        frames_manifest.append({
            "camera": fr.camera.to_dict(),
            "rgb": f"{rel}/rgb.png",
            "normal": f"{rel}/normal.png",
            "masks": {lvl: f"{rel}/mask_{lvl}.png" for lvl in MASK_LEVELS},
            "features": {"file": f"{rel}/features.f32", "height": fh, "width": fw, "channels": fc},
        })
    rawio.write_f32(root / "points_xyz.f32", bundle.init_points)
    rawio.write_f32(root / "points_rgb.f32", bundle.init_colors)
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "scene": bundle.meta.scene,
        "units": bundle.meta.units,
        "feature_channels": bundle.meta.feature_channels,
        "normal_space": bundle.meta.normal_space,
        "feature_normalization": bundle.meta.feature_normalization,
        "extra": bundle.meta.extra,
        "frames": frames_manifest,
        "init_points": {
            "xyz": "points_xyz.f32",
            "rgb": "points_rgb.f32",
            "count": int(bundle.init_points.shape[0]),
        },
    }
    rawio.write_json(root / MANIFEST_NAME, manifest)


def read_bundle(path: Path | str) -> FrameBundle:
    """Load and re-validate a bundle directory produced by :func:`write_bundle` or an extractor."""
    root = Path(path)
    mpath = root / MANIFEST_NAME
    if not mpath.is_file():
        raise BundleValidationError(f"missing manifest: {mpath}")
    manifest = rawio.read_json(mpath)
    if manifest.get("format") != FORMAT_NAME:
        raise BundleValidationError(f"{mpath}: unexpected format tag {manifest.get('format')!r}")
    frames = []
    for i, fm in enumerate(manifest["frames"]):
        where = f"frame {i}"
        try:
            rgb = FeatureMap(rawio.read_rgb8_png(root / fm["rgb"]))
            normal = FeatureMap(rawio.read_unit16_png(root / fm["normal"]))
            masks = MaskStack({lvl: rawio.read_id16_png(root / fm["masks"][lvl]) for lvl in MASK_LEVELS})
            feat_info = fm["features"]
            fshape = (int(feat_info["height"]), int(feat_info["width"]), int(feat_info["channels"]))
            feats = FeatureMap(rawio.read_f32(root / feat_info["file"], fshape))
        except (IOError, ValueError) as e:
            if isinstance(e, BundleValidationError):
                raise
            raise BundleValidationError(f"{where}: {e}") from e
        frames.append(Frame(
            camera=Camera.from_dict(fm["camera"]),
            rgb=rgb, normal=normal, masks=masks, clip_features=feats,
        ))
    pinfo = manifest["init_points"]
    n = int(pinfo["count"])
    try:
        pts = rawio.read_f32(root / pinfo["xyz"], (n, 3))
        cols = rawio.read_f32(root / pinfo["rgb"], (n, 3))
    except (IOError, ValueError) as e:
        raise BundleValidationError(f"init points: {e}") from e
    meta = BundleMeta(
        scene=manifest["scene"],
        feature_channels=int(manifest["feature_channels"]),
        units=manifest.get("units", "scene"),
        normal_space=manifest.get("normal_space", "camera"),
        feature_normalization=manifest.get("feature_normalization", "none"),
        extra=manifest.get("extra", {}),
    )
    bundle = FrameBundle(frames=frames, init_points=pts, init_colors=cols, meta=meta)
    bundle.validate()
    return bundle


def upsample_bilinear(data: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinearly resample an (h, w, C) map to (height, width, C); identity when sizes match."""
    h, w = data.shape[:2]
    if (h, w) == (height, width):
        return data
    ys = (np.arange(height) + 0.5) * (h / height) - 0.5
    xs = (np.arange(width) + 0.5) * (w / width) - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
    top = data[y0][:, x0] * (1 - wx) + data[y0][:, x1] * wx
    bot = data[y1][:, x0] * (1 - wx) + data[y1][:, x1] * wx
    return (top * (1 - wy) + bot * wy).astype(data.dtype)
