"""Differentiable 3D Gaussian splatting with RGB, normal, depth, alpha, and
language-latent channels.

Forward: perspective-project means, build 2D covariances via the local affine
(Jacobian) approximation, depth-sort front-to-back, and alpha-composite per
pixel in image tiles. All channels share the per-pixel blend weights; normals
are rotated into the render camera's frame and renormalized after blending.
Backward uses autograd on the same graph, so gradients are analytic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import rawio
from .bundle import Camera

HIERARCHY_LEVELS = ("s", "m", "l")


@dataclass
class Gaussian:
    """Single-primitive view; clouds store these fields as stacked arrays."""

    position: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray       # quaternion (w, x, y, z)
    opacity_logit: float
    color: np.ndarray
    normal: np.ndarray
    f_sem: np.ndarray          # (levels, D)


@dataclass
class GaussianCloud:
    positions: np.ndarray      # (N, 3)
    log_scales: np.ndarray     # (N, 3)
    rotations: np.ndarray      # (N, 4)
    opacity_logits: np.ndarray # (N,)
    colors: np.ndarray         # (N, 3), in [0, 1]
    normals: np.ndarray        # (N, 3), unit
    f_sem: np.ndarray          # (N, levels, D)
    active_level: str = "l"
    feature_background: np.ndarray | None = None   # (D,) latent for empty pixels

    @property
    def size(self) -> int:
        return self.positions.shape[0]

    @property
    def latent_channels(self) -> int:
        return self.f_sem.shape[2]

    def opacities(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.opacity_logits))

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(self.positions[i], self.log_scales[i], self.rotations[i],
                        float(self.opacity_logits[i]), self.colors[i], self.normals[i], self.f_sem[i])

    def validate(self) -> None:
        n = self.size
        if n == 0:
            raise ValueError("cloud is empty")
        for name in ("positions", "log_scales", "rotations", "opacity_logits", "colors", "normals", "f_sem"):
            arr = getattr(self, name)
            if arr.shape[0] != n:
                raise ValueError(f"{name}: leading dimension {arr.shape[0]} != {n}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name}: non-finite values")
        qn = np.linalg.norm(self.rotations, axis=1)
        if np.abs(qn - 1.0).max() > 1e-6:
            raise ValueError("rotations must be unit quaternions within 1e-6")
        nn = np.linalg.norm(self.normals, axis=1)
        if np.abs(nn - 1.0).max() > 1e-3:
            raise ValueError("normals must be unit within 1e-3")
        if self.active_level not in HIERARCHY_LEVELS:
            raise ValueError(f"active_level must be one of {HIERARCHY_LEVELS}")

    @staticmethod
    def from_gaussians(gaussians: list[Gaussian], active_level: str = "l") -> "GaussianCloud":
        return GaussianCloud(
            positions=np.stack([g.position for g in gaussians]).astype(np.float64),
            log_scales=np.stack([g.log_scale for g in gaussians]).astype(np.float64),
            rotations=np.stack([g.rotation for g in gaussians]).astype(np.float64),
            opacity_logits=np.array([g.opacity_logit for g in gaussians], dtype=np.float64),
            colors=np.stack([g.color for g in gaussians]).astype(np.float64),
            normals=np.stack([g.normal for g in gaussians]).astype(np.float64),
            f_sem=np.stack([g.f_sem for g in gaussians]).astype(np.float64),
            active_level=active_level,
        )


@dataclass
class RenderOutput:
    rgb: np.ndarray       # (H, W, 3)
    normal: np.ndarray    # (H, W, 3), camera space, renormalized
    feature: np.ndarray   # (H, W, D)
    alpha: np.ndarray     # (H, W, 1)
    depth: np.ndarray     # (H, W, 1), alpha-weighted camera depth


@dataclass
class RenderConfig:
    tile: int = 16
    support_sigma: float = 3.0   # screen support cutoff
    cov_eps: float = 0.3         # added to the 2D covariance diagonal (px^2)
    znear: float = 0.01


def _quat_to_rotmat(q: torch.Tensor) -> torch.Tensor:
    q = q / q.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    return torch.stack([
        torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


def _pair_lists(x0, x1, y0, y1, tile, n_tx, n_ty):
    """Depth-ordered (gaussian, tile) pairs grouped by tile (numpy, index-only)."""
    tx0 = np.clip(np.floor(x0 / tile).astype(np.int64), 0, n_tx - 1)
    tx1 = np.clip(np.floor(x1 / tile).astype(np.int64), 0, n_tx - 1)
    ty0 = np.clip(np.floor(y0 / tile).astype(np.int64), 0, n_ty - 1)
    ty1 = np.clip(np.floor(y1 / tile).astype(np.int64), 0, n_ty - 1)
    spans_x = tx1 - tx0 + 1
    counts = spans_x * (ty1 - ty0 + 1)
    total = int(counts.sum())
    gi = np.repeat(np.arange(counts.size, dtype=np.int64), counts)
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    r = np.arange(total, dtype=np.int64) - np.repeat(offsets, counts)
    lx = r % spans_x[gi]
    ly = r // spans_x[gi]
    tiles = (ty0[gi] + ly) * n_tx + (tx0[gi] + lx)
    order = np.argsort(tiles, kind="stable")    # stable keeps depth order per tile
    return gi[order], tiles[order]


def _forward(params: dict[str, torch.Tensor], camera: Camera,
             bg_rgb: torch.Tensor, bg_feat: torch.Tensor,
             cfg: RenderConfig, want_center_weights: bool = False,
             channels: tuple = ("rgb", "normal", "feature", "alpha", "depth")):
    """Differentiable splatting forward. Returns dict of (H, W, *) images."""
    dt = params["positions"].dtype
    H, W = camera.height, camera.width
    R = torch.as_tensor(np.ascontiguousarray(camera.R), dtype=dt)
    t = torch.as_tensor(np.ascontiguousarray(camera.t), dtype=dt)
    n_total = params["positions"].shape[0]
    n_feat = params["features"].shape[1]

    p_cam = params["positions"] @ R.T + t
    z = p_cam[:, 2]
    front = z > cfg.znear
    zs = torch.where(front, z, torch.ones_like(z))   # guard for the culled
    inv_z = 1.0 / zs
    u = camera.fx * p_cam[:, 0] * inv_z + camera.cx
    v = camera.fy * p_cam[:, 1] * inv_z + camera.cy

    rot = _quat_to_rotmat(params["rotations"])
    scale = torch.exp(params["log_scales"])
    M = rot * scale[:, None, :]
    cov3 = M @ M.transpose(1, 2)

    fx_z = camera.fx * inv_z
    fy_z = camera.fy * inv_z
    zero = torch.zeros_like(inv_z)
    J = torch.stack([
        torch.stack([fx_z, zero, -fx_z * p_cam[:, 0] * inv_z], -1),
        torch.stack([zero, fy_z, -fy_z * p_cam[:, 1] * inv_z], -1),
    ], -2)                                     # (N, 2, 3)
    A = J @ R.unsqueeze(0)
    cov2 = A @ cov3 @ A.transpose(1, 2)
    a = cov2[:, 0, 0] + cfg.cov_eps
    b = cov2[:, 0, 1]
    c = cov2[:, 1, 1] + cfg.cov_eps
    det = a * c - b * b
    ia, ib, ic = c / det, -b / det, a / det

    mid = 0.5 * (a + c)
    lam_max = mid + torch.sqrt(torch.clamp((0.5 * (a - c)) ** 2 + b * b, min=1e-12))
    radius = cfg.support_sigma * torch.sqrt(lam_max)

    x0 = u - radius
    x1 = u + radius
    y0 = v - radius
    y1 = v + radius
    visible = front & (x1 > 0) & (x0 < W) & (y1 > 0) & (y0 < H)

    alpha = torch.sigmoid(params["opacity_logits"])

    want_normal = "normal" in channels
    want_feature = "feature" in channels
    empty = {
        "rgb": torch.zeros((H, W, 3), dtype=dt),
        "normal": torch.zeros((H, W, 3), dtype=dt),
        "feature": torch.zeros((H, W, n_feat), dtype=dt),
        "alpha": torch.zeros((H, W, 1), dtype=dt),
        "depth": torch.zeros((H, W, 1), dtype=dt),
    }
    center_w = torch.zeros(n_total, dtype=dt)

    vis_idx = torch.nonzero(visible, as_tuple=False).squeeze(1)
    if vis_idx.numel() == 0:
        trans = torch.ones((H, W, 1), dtype=dt)
        empty["rgb"] = empty["rgb"] + trans * bg_rgb
        empty["feature"] = empty["feature"] + trans * bg_feat
        empty["transmittance"] = trans
        if want_center_weights:
            empty["center_weight"] = center_w
        return empty

    order = torch.argsort(z[vis_idx], stable=True)
    sel = vis_idx[order]                     # depth-sorted visible gaussians

    parts = [params["colors"][sel]]
    if want_normal:
        n_unit = params["normals"] / params["normals"].norm(dim=-1, keepdim=True)
        parts.append((n_unit @ R.T)[sel])
    if want_feature:
        parts.append(params["features"][sel])
    parts.append(z[sel][:, None])
    payload = torch.cat(parts, dim=1)        # (G, C)
    pc = payload.shape[1]
    gmat = torch.stack([u[sel], v[sel], ia[sel], ib[sel], ic[sel], alpha[sel]], dim=1)

    tile = cfg.tile
    n_tx = (W + tile - 1) // tile
    n_ty = (H + tile - 1) // tile
    with torch.no_grad():
        pair_g, pair_tile = _pair_lists(
            x0[sel].numpy(), x1[sel].numpy(), y0[sel].numpy(), y1[sel].numpy(),
            tile, n_tx, n_ty)
        starts = np.searchsorted(pair_tile, np.arange(n_tx * n_ty + 1))
        pair_g_t = torch.from_numpy(pair_g)
        if want_center_weights:
            cu = np.floor(u[sel].numpy())
            cv = np.floor(v[sel].numpy())
            in_img = (cu >= 0) & (cu < W) & (cv >= 0) & (cv < H)
            c_tile = (np.clip(cv, 0, H - 1).astype(np.int64) // tile) * n_tx \
                + np.clip(cu, 0, W - 1).astype(np.int64) // tile
            is_center = in_img[pair_g] & (pair_tile == c_tile[pair_g])

    sq_cut = cfg.support_sigma ** 2
    pix1 = torch.arange(tile, dtype=dt) + 0.5
    tile_out = []
    tile_trans = []
    empty_canvas = torch.zeros((tile * tile, pc), dtype=dt)
    empty_trans = torch.ones(tile * tile, dtype=dt)
    for ti in range(n_tx * n_ty):
        s, e = int(starts[ti]), int(starts[ti + 1])
        if s == e:
            tile_out.append(empty_canvas)
            tile_trans.append(empty_trans)
            continue
        idx = pair_g_t[s:e]
        gm = gmat[idx]                               # (G_t, 6)
        px = pix1 + (ti % n_tx) * tile
        py = pix1 + (ti // n_tx) * tile
        dx = px[None, None, :] - gm[:, 0][:, None, None]
        dy = py[None, :, None] - gm[:, 1][:, None, None]
        maha = (gm[:, 2][:, None, None] * dx * dx
                + 2.0 * gm[:, 3][:, None, None] * dx * dy
                + gm[:, 4][:, None, None] * dy * dy)
        # hard support cutoff keeps the result independent of tiling and
        # makes untouched pixels exactly empty
        gval = torch.where(maha <= sq_cut, torch.exp(-0.5 * maha),
                           torch.zeros_like(maha)).reshape(e - s, -1)
        w_raw = gm[:, 5][:, None] * gval
        t_inc = torch.cumprod(1.0 - w_raw, dim=0)
        t_exc = torch.cat([torch.ones((1, w_raw.shape[1]), dtype=dt), t_inc[:-1]], dim=0)
        w = w_raw * t_exc                            # (G_t, P)
        tile_out.append(w.T @ payload[idx])
        tile_trans.append(t_inc[-1])
        if want_center_weights:
            with torch.no_grad():
                rows = np.nonzero(is_center[s:e])[0]
                if rows.size:
                    gsel = pair_g[s:e][rows]
                    lx = np.clip(cu[gsel], 0, W - 1).astype(np.int64) - (ti % n_tx) * tile
                    ly = np.clip(cv[gsel], 0, H - 1).astype(np.int64) - (ti // n_tx) * tile
                    center_w[sel[gsel]] = w[rows, ly * tile + lx]

    canvas = torch.stack(tile_out).reshape(n_ty, n_tx, tile, tile, pc) \
        .permute(0, 2, 1, 3, 4).reshape(n_ty * tile, n_tx * tile, pc)[:H, :W]
    trans = torch.stack(tile_trans).reshape(n_ty, n_tx, tile, tile, 1) \
        .permute(0, 2, 1, 3, 4).reshape(n_ty * tile, n_tx * tile, 1)[:H, :W]

    col = 3
    out = dict(empty)
    out["rgb"] = canvas[..., 0:3] + trans * bg_rgb
    if want_normal:
        blend_n = canvas[..., col:col + 3]
        norm = blend_n.norm(dim=-1, keepdim=True)
        ok = norm > 1e-12
        out["normal"] = torch.where(ok, blend_n / torch.clamp(norm, min=1e-12),
                                    torch.zeros_like(blend_n))
        col += 3
    if want_feature:
        out["feature"] = canvas[..., col:col + n_feat] + trans * bg_feat
        col += n_feat
    out["alpha"] = 1.0 - trans
    out["depth"] = canvas[..., -1:]
    out["transmittance"] = trans
    if want_center_weights:
        out["center_weight"] = center_w
    return out


def _cloud_tensors(cloud: GaussianCloud, dtype, requires_grad=False) -> dict[str, torch.Tensor]:
    level = HIERARCHY_LEVELS.index(cloud.active_level)
    arrs = {
        "positions": cloud.positions,
        "log_scales": cloud.log_scales,
        "rotations": cloud.rotations,
        "opacity_logits": cloud.opacity_logits,
        "colors": cloud.colors,
        "normals": cloud.normals,
        "features": cloud.f_sem[:, level, :],
    }
    out = {}
    for k, v in arrs.items():
        t = torch.as_tensor(np.ascontiguousarray(v), dtype=dtype)
        if requires_grad:
            t = t.clone().requires_grad_(True)
        out[k] = t
    return out


def _backgrounds(cloud: GaussianCloud, background, dtype):
    bg_rgb = torch.as_tensor(np.asarray(background, dtype=np.float64), dtype=dtype)
    fb = cloud.feature_background
    if fb is None:
        fb = np.zeros(cloud.latent_channels)
    bg_feat = torch.as_tensor(np.asarray(fb, dtype=np.float64), dtype=dtype)
    return bg_rgb, bg_feat


def render(cloud: GaussianCloud, camera: Camera, background=(0.0, 0.0, 0.0),
           config: RenderConfig | None = None, dtype=torch.float64) -> RenderOutput:
    """Rasterize the cloud; deterministic for fixed inputs."""
    cloud.validate()
    camera.validate()
    cfg = config or RenderConfig()
    params = _cloud_tensors(cloud, dtype)
    bg_rgb, bg_feat = _backgrounds(cloud, background, dtype)
    with torch.no_grad():
        out = _forward(params, camera, bg_rgb, bg_feat, cfg)
    return RenderOutput(
        rgb=out["rgb"].numpy(), normal=out["normal"].numpy(), feature=out["feature"].numpy(),
        alpha=out["alpha"].numpy(), depth=out["depth"].numpy(),
    )


def render_backward(cloud: GaussianCloud, camera: Camera, upstream: dict[str, np.ndarray],
                    background=(0.0, 0.0, 0.0), config: RenderConfig | None = None,
                    dtype=torch.float64) -> dict[str, np.ndarray]:
    """Analytic per-Gaussian gradients for upstream gradients on any output channels.

    ``upstream`` maps channel names (rgb/normal/feature/alpha/depth) to arrays of
    the channel's shape. Returns gradients for every parameter class; the feature
    gradient is reported for the active hierarchy level.
    """
    cloud.validate()
    camera.validate()
    cfg = config or RenderConfig()
    params = _cloud_tensors(cloud, dtype, requires_grad=True)
    bg_rgb, bg_feat = _backgrounds(cloud, background, dtype)
    out = _forward(params, camera, bg_rgb, bg_feat, cfg)
    total = None
    for key, g in upstream.items():
        if key not in ("rgb", "normal", "feature", "alpha", "depth"):
            raise ValueError(f"unknown upstream channel {key!r}")
        term = (out[key] * torch.as_tensor(np.ascontiguousarray(g), dtype=dtype)).sum()
        total = term if total is None else total + term
    if total is None:
        raise ValueError("upstream gradients are empty")
    total.backward()
    return {k: (p.grad.numpy().copy() if p.grad is not None else np.zeros(p.shape))
            for k, p in params.items()}


def center_weights(cloud: GaussianCloud, camera: Camera, config: RenderConfig | None = None,
                   dtype=torch.float64) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-Gaussian composited weight at its own projected center pixel.

    Returns (weights (N,), rows (N,), cols (N,)); weight is 0 for Gaussians
    that are culled or project outside the image.
    """
    cfg = config or RenderConfig()
    params = _cloud_tensors(cloud, dtype)
    bg_rgb, bg_feat = _backgrounds(cloud, (0.0, 0.0, 0.0), dtype)
    with torch.no_grad():
        out = _forward(params, camera, bg_rgb, bg_feat, cfg, want_center_weights=True)
        R = torch.as_tensor(np.ascontiguousarray(camera.R), dtype=dtype)
        t = torch.as_tensor(np.ascontiguousarray(camera.t), dtype=dtype)
        p_cam = params["positions"] @ R.T + t
        zsafe = torch.where(p_cam[:, 2] > cfg.znear, p_cam[:, 2], torch.ones_like(p_cam[:, 2]))
        u = camera.fx * p_cam[:, 0] / zsafe + camera.cx
        v = camera.fy * p_cam[:, 1] / zsafe + camera.cy
    rows = np.clip(np.floor(v.numpy()), 0, camera.height - 1).astype(np.int64)
    cols = np.clip(np.floor(u.numpy()), 0, camera.width - 1).astype(np.int64)
    return out["center_weight"].numpy(), rows, cols


def prune(cloud: GaussianCloud, opacity_threshold: float) -> GaussianCloud:
    """Drop Gaussians with opacity below the threshold, preserving order."""
    if not (0 <= opacity_threshold < 1):
        raise ValueError(f"opacity threshold must be in [0, 1), got {opacity_threshold}")
    keep = cloud.opacities() >= opacity_threshold
    if not keep.any():
        raise ValueError("pruning would remove every Gaussian")
    return GaussianCloud(
        positions=cloud.positions[keep], log_scales=cloud.log_scales[keep],
        rotations=cloud.rotations[keep], opacity_logits=cloud.opacity_logits[keep],
        colors=cloud.colors[keep], normals=cloud.normals[keep], f_sem=cloud.f_sem[keep],
        active_level=cloud.active_level, feature_background=cloud.feature_background,
    )


# ---------------------------------------------------------------------------
# checkpoints

def save_cloud(cloud: GaussianCloud, path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    arrays = {
        "positions": cloud.positions, "log_scales": cloud.log_scales,
        "rotations": cloud.rotations, "opacity_logits": cloud.opacity_logits,
        "colors": cloud.colors, "normals": cloud.normals, "f_sem": cloud.f_sem,
    }
    manifest = {
        "format": "gaussian-cloud", "version": 1,
        "count": cloud.size, "latent_channels": cloud.latent_channels,
        "active_level": cloud.active_level,
        "feature_background": (cloud.feature_background.tolist()
                               if cloud.feature_background is not None else None),
        "arrays": {k: {"file": f"{k}.f32", "shape": list(v.shape)} for k, v in arrays.items()},
    }
    for k, v in arrays.items():
        rawio.write_f32(root / f"{k}.f32", v)
    rawio.write_json(root / "manifest.json", manifest)


def load_cloud(path) -> GaussianCloud:
    root = Path(path)
    manifest = rawio.read_json(root / "manifest.json")
    if manifest.get("format") != "gaussian-cloud":
        raise ValueError(f"{root}: not a Gaussian cloud checkpoint")

    def arr(k):
        info = manifest["arrays"][k]
        return rawio.read_f32(root / info["file"], tuple(info["shape"])).astype(np.float64)

    fb = manifest.get("feature_background")
    cloud = GaussianCloud(
        positions=arr("positions"), log_scales=arr("log_scales"), rotations=arr("rotations"),
        opacity_logits=arr("opacity_logits"), colors=arr("colors"), normals=arr("normals"),
        f_sem=arr("f_sem"), active_level=manifest["active_level"],
        feature_background=np.asarray(fb, dtype=np.float64) if fb is not None else None,
    )
    cloud.validate()
    return cloud
