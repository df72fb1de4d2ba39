"""Per-modality extractors.

Each modality has offline builtins (deterministic, no weights needed) plus
adapters for real pretrained models that raise :class:`ModalityError` naming
the modality when weights are unavailable.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import cv2
import numpy as np

from . import ModalityError


# ---------------------------------------------------------------------------
# normals

def normals_shading(rgb01: np.ndarray, strength: float = 4.0) -> np.ndarray:
    """Shading-gradient normal estimate in camera space (visible surfaces face -z)."""
    gray = (0.299 * rgb01[..., 0] + 0.587 * rgb01[..., 1] + 0.114 * rgb01[..., 2]).astype(np.float32)
    gx = cv2.Sobel(gray, cv2.CV_32F, 1, 0, ksize=3)
    gy = cv2.Sobel(gray, cv2.CV_32F, 0, 1, ksize=3)
    n = np.stack([-strength * gx, -strength * gy, -np.ones_like(gray)], axis=-1).astype(np.float64)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    return n


def normals_pretrained(rgb01: np.ndarray, weights: str | None, device: str) -> np.ndarray:
    if not weights or not Path(weights).exists():
        raise ModalityError(f"normal: pretrained normal-estimator weights not found at {weights!r}")
    import torch
    try:
        model = torch.jit.load(weights, map_location=device)
    except Exception as e:
        raise ModalityError(f"normal: could not load estimator from {weights!r}: {e}") from e
    with torch.no_grad():
        inp = torch.as_tensor(rgb01.astype(np.float32)).permute(2, 0, 1)[None].to(device)
        out = model(inp)[0].permute(1, 2, 0).cpu().numpy().astype(np.float64)
    out /= np.clip(np.linalg.norm(out, axis=-1, keepdims=True), 1e-9, None)
    return out


# ---------------------------------------------------------------------------
# hierarchical masks

FELZENSZWALB_SCALES = {"s": 80.0, "m": 300.0, "l": 900.0}


def masks_felzenszwalb(rgb01: np.ndarray) -> dict[str, np.ndarray]:
    """Graph-based segmentation at three granularities; IDs contiguous from 1.

    Per-frame only: IDs are not tracked across frames (a video segmenter is
    needed for that), which the downstream majority-vote assignment tolerates.
    """
    from skimage.segmentation import felzenszwalb
    out = {}
    hw = rgb01.shape[0] * rgb01.shape[1]
    for lvl, scale in FELZENSZWALB_SCALES.items():
        seg = felzenszwalb(rgb01.astype(np.float64), scale=scale,
                           sigma=0.6, min_size=max(8, hw // 4096))
        _, relabeled = np.unique(seg, return_inverse=True)
        ids = (relabeled.reshape(seg.shape) + 1).astype(np.int32)
        if ids.max() > 65535:
            raise ModalityError(f"mask: felzenszwalb produced {ids.max()} segments (> uint16)")
        out[lvl] = ids
    return out


def masks_pretrained(rgb01: np.ndarray, weights: str | None, device: str) -> dict[str, np.ndarray]:
    if not weights or not Path(weights).exists():
        raise ModalityError(f"mask: video-segmenter weights not found at {weights!r}")
    raise ModalityError("mask: pretrained video segmentation requires the upstream package; "
                        "use --masks felzenszwalb for the builtin")


# ---------------------------------------------------------------------------
# dense language features

def _bucket_embeddings(buckets: int, channels: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.PCG64(seed))
    e = rng.standard_normal((buckets, channels))
    return (e / np.linalg.norm(e, axis=1, keepdims=True)).astype(np.float32)


def clip_hash_features(rgb01: np.ndarray, channels: int, downsample: int,
                       seed: int = 0, bins: int = 6) -> np.ndarray:
    """Deterministic pseudo-language features: color-bucket lookup into a random
    unit dictionary. Stands in for a dense feature extractor in offline runs."""
    h, w = rgb01.shape[:2]
    small = cv2.resize(rgb01.astype(np.float32), (w // downsample, h // downsample),
                       interpolation=cv2.INTER_AREA)
    q = np.clip((small * bins).astype(np.int64), 0, bins - 1)
    bucket = (q[..., 0] * bins + q[..., 1]) * bins + q[..., 2]
    table = _bucket_embeddings(bins ** 3, channels, seed)
    return table[bucket]


def clip_pretrained_features(rgb01: np.ndarray, model_name: str, channels: int,
                             downsample: int, device: str) -> np.ndarray:
    try:
        from transformers import CLIPImageProcessor, CLIPVisionModel
        processor = CLIPImageProcessor.from_pretrained(model_name)
        model = CLIPVisionModel.from_pretrained(model_name)
    except Exception as e:
        raise ModalityError(f"clip: could not load dense feature extractor "
                            f"{model_name!r}: {e}") from e
    import torch
    model = model.to(device).eval()
    with torch.no_grad():
        inputs = processor(images=(rgb01 * 255).astype(np.uint8), return_tensors="pt").to(device)
        hidden = model(**inputs).last_hidden_state[0, 1:]          # patch tokens
    side = int(np.sqrt(hidden.shape[0]))
    feat = hidden.reshape(side, side, -1).cpu().numpy().astype(np.float32)
    if feat.shape[-1] != channels:
        raise ModalityError(f"clip: extractor width {feat.shape[-1]} != requested {channels}")
    h, w = rgb01.shape[:2]
    feat = cv2.resize(feat, (w // downsample, h // downsample), interpolation=cv2.INTER_LINEAR)
    feat /= np.clip(np.linalg.norm(feat, axis=-1, keepdims=True), 1e-9, None)
    return feat


def frame_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]
