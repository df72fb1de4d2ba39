"""Two-phase Gaussian surface-field training against a frame bundle.

Phase 1 fits geometry and appearance with an RGB loss plus progressive
normal regularization: before step ``t_n`` the normal loss is a plain
per-pixel L1; afterwards pixels whose rendered-vs-prior angle exceeds
``tau_thr`` are dropped from both the sum and the denominator. Phase 2 adds
semantic supervision in the compressor's latent space: an L2 term against
the quantized latents of the per-frame language features, a same-mask 2D
pair loss, and a 3D loss pulling each Gaussian's latent toward its
segment's mean under softmax (KL).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.spatial import cKDTree

from . import lqc as lqc_mod
from .bundle import FrameBundle, MaskStack, upsample_bilinear
from .optim import Adam, TrainingDivergedError
from .splat import (HIERARCHY_LEVELS, GaussianCloud, RenderConfig,
                    _backgrounds, _cloud_tensors, _forward, center_weights)


@dataclass
class FieldConfig:
    phase1_steps: int = 5000
    phase2_steps: int = 5000
    t_n: int = 2000                       # normal-filter switch step
    tau_thr: float = math.radians(30.0)   # angle threshold, radians
    pair_samples: int = 32                # P pixel pairs per mask
    level: str = "l"
    w_rgb: float = 1.0
    w_normal: float = 0.05
    w_latent: float = 1.0
    w_s2d: float = 0.1
    w_s3d: float = 0.1
    lr_position: float = 2e-4
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_opacity: float = 5e-2
    lr_color: float = 1e-2
    lr_normal: float = 1e-2
    lr_feature: float = 2.5e-2
    prune_every: int = 1000
    prune_opacity: float = 0.005
    assign_every: int = 500
    assign_weight_threshold: float = 0.05
    seed: int = 0
    background: tuple = (0.0, 0.0, 0.0)
    holdout_views: tuple = ()
    eval_every: int = 0                  # 0 disables held-out PSNR during training
    checkpoint_every: int = 0
    log_every: int = 1
    render: RenderConfig = field(default_factory=RenderConfig)

    def validate(self):
        if not (0.0 < self.tau_thr <= math.pi):
            raise ValueError(f"tau_thr must be in (0, pi], got {self.tau_thr}")
        if self.t_n > self.phase1_steps + self.phase2_steps:
            raise ValueError("t_n exceeds the total step budget")
        if self.level not in HIERARCHY_LEVELS:
            raise ValueError(f"level must be one of {HIERARCHY_LEVELS}")
        if self.pair_samples < 1:
            raise ValueError("pair_samples must be >= 1")


@dataclass
class SegmentAssignment:
    """Per-Gaussian segment membership for one hierarchy level."""

    level: str
    per_view_ids: np.ndarray          # (N, V) mask ID seen per view, 0 = none
    ids: np.ndarray                   # (N,) majority-vote segment ID, 0 = unassigned
    means: dict[int, np.ndarray]      # segment ID -> mean latent (D,)


# ---------------------------------------------------------------------------
# losses

def angle_difference(n_p: np.ndarray, n: np.ndarray) -> float:
    """Angle in radians between two non-zero vectors (clamped arccos)."""
    a = np.asarray(n_p, dtype=np.float64)
    b = np.asarray(n, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("angle_difference: zero-length vector")
    return float(np.arccos(np.clip(a @ b / (na * nb), -1.0, 1.0)))


def _normal_loss_t(rendered: torch.Tensor, prior: torch.Tensor, step: int,
                   t_n: int, tau_thr: float) -> torch.Tensor:
    diff = (rendered - prior).abs().sum(-1)           # per-pixel L1 norm
    if step < t_n:
        return diff.mean()
    with torch.no_grad():
        dot = (rendered * prior).sum(-1)
        denom = rendered.norm(dim=-1) * prior.norm(dim=-1)
        cos = torch.clamp(dot / torch.clamp(denom, min=1e-12), -1.0, 1.0)
        valid = torch.arccos(cos) <= tau_thr          # zero-norm pixels get pi/2
    count = int(valid.sum())
    if count == 0:
        return torch.zeros((), dtype=rendered.dtype)
    return (diff * valid).sum() / count


def normal_loss(rendered: np.ndarray, prior: np.ndarray, step: int, config: FieldConfig) -> float:
    """Progressive normal regularization (maps must share shape)."""
    if rendered.shape != prior.shape:
        raise ValueError(f"normal maps differ in shape: {rendered.shape} vs {prior.shape}")
    r = torch.as_tensor(np.ascontiguousarray(rendered, dtype=np.float64))
    p = torch.as_tensor(np.ascontiguousarray(prior, dtype=np.float64))
    with torch.no_grad():
        return float(_normal_loss_t(r, p, step, config.t_n, config.tau_thr))


def sample_mask_pairs(mask: np.ndarray, pair_count: int,
                      rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """P flat-index pixel pairs per mask ID (IDs ascending, ID 0 and <2-pixel masks skipped)."""
    flat = mask.reshape(-1)
    pa, pb = [], []
    for mid in np.unique(flat):
        if mid == 0:
            continue
        pix = np.nonzero(flat == mid)[0]
        if pix.size < 2:
            continue
        pa.append(pix[rng.integers(0, pix.size, pair_count)])
        pb.append(pix[rng.integers(0, pix.size, pair_count)])
    if not pa:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    return np.concatenate(pa), np.concatenate(pb)


def _pair_distance_t(feat_flat: torch.Tensor, pa, pb) -> torch.Tensor:
    d = feat_flat[pa] - feat_flat[pb]
    ss = (d * d).sum(-1)
    nz = ss > 0
    safe = torch.where(nz, ss, torch.ones_like(ss))
    return torch.where(nz, torch.sqrt(safe), torch.zeros_like(ss)).mean()


def s2d_loss(rendered_feature: np.ndarray, masks: MaskStack, level: str,
             pair_count: int, rng: np.random.Generator | int) -> float:
    """Mean L2 distance of rendered features over same-mask pixel pairs."""
    if level not in masks.levels:
        raise ValueError(f"mask level {level!r} missing")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(np.random.PCG64(int(rng)))
    h, w = masks.shape
    if rendered_feature.shape[:2] != (h, w):
        raise ValueError("rendered feature resolution differs from masks")
    pa, pb = sample_mask_pairs(masks.levels[level], pair_count, rng)
    if pa.size == 0:
        return 0.0
    flat = torch.as_tensor(rendered_feature.reshape(h * w, -1).astype(np.float64))
    with torch.no_grad():
        return float(_pair_distance_t(flat, pa, pb))


def _softmax_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def s3d_loss(cloud: GaussianCloud, assignment: SegmentAssignment) -> float:
    """Mean KL between each assigned Gaussian's softmaxed latent and its segment mean's."""
    level = HIERARCHY_LEVELS.index(assignment.level)
    f = cloud.f_sem[:, level, :].astype(np.float64)
    total, count = 0.0, 0
    for i, sid in enumerate(assignment.ids):
        if sid == 0 or sid not in assignment.means:
            continue
        p = _softmax_np(f[i])
        q = _softmax_np(assignment.means[sid].astype(np.float64))
        total += float(np.sum(p * (np.log(p) - np.log(q))))
        count += 1
    return total / count if count else 0.0


def _s3d_loss_t(features: torch.Tensor, seg_index: torch.Tensor,
                seg_means: torch.Tensor) -> torch.Tensor:
    """seg_index: (N,) index into seg_means rows, -1 = unassigned; means are constants."""
    assigned = seg_index >= 0
    if not bool(assigned.any()):
        return torch.zeros((), dtype=features.dtype)
    f = features[assigned]
    q_log = torch.log_softmax(seg_means[seg_index[assigned]], dim=-1)
    p_log = torch.log_softmax(f, dim=-1)
    p = torch.exp(p_log)
    return (p * (p_log - q_log)).sum(-1).mean()


# ---------------------------------------------------------------------------
# segment assignment

def assign_segments(cloud: GaussianCloud, bundle: FrameBundle, level: str,
                    weight_threshold: float = 0.05,
                    render_config: RenderConfig | None = None,
                    dtype=torch.float32) -> SegmentAssignment:
    """Majority-vote mask IDs over views where the Gaussian's center weight clears the threshold."""
    n = cloud.size
    views = len(bundle.frames)
    per_view = np.zeros((n, views), dtype=np.int32)
    voted = np.zeros((n, views), dtype=bool)
    for vi, fr in enumerate(bundle.frames):
        w, rows, cols = center_weights(cloud, fr.camera, config=render_config, dtype=dtype)
        ok = w > weight_threshold
        ids = fr.masks.levels[level][rows, cols]
        per_view[:, vi] = np.where(ok, ids, 0)
        voted[:, vi] = ok
    ids = np.zeros(n, dtype=np.int32)
    for i in range(n):
        votes = per_view[i, voted[i]]
        if votes.size == 0:
            continue
        ids[i] = int(np.argmax(np.bincount(votes)))   # ties resolve to the lowest ID
    lidx = HIERARCHY_LEVELS.index(level)
    means = {}
    for sid in np.unique(ids):
        if sid == 0:
            continue
        means[int(sid)] = cloud.f_sem[ids == sid, lidx, :].mean(axis=0)
    return SegmentAssignment(level=level, per_view_ids=per_view, ids=ids, means=means)


# ---------------------------------------------------------------------------
# initialization

def init_cloud_from_bundle(bundle: FrameBundle, latent_channels: int,
                           level: str = "l") -> GaussianCloud:
    """One Gaussian per initial point: color from the point, isotropic scale from
    the mean 3-nearest-neighbor distance, opacity 0.5, normal from the prior at
    the first view seeing the point, zero language latents."""
    pts = bundle.init_points.astype(np.float64)
    n = pts.shape[0]
    tree = cKDTree(pts)
    dist, _ = tree.query(pts, k=min(4, n))
    if dist.ndim == 1:
        dist = dist[:, None]
    nn = dist[:, 1:].mean(axis=1) if dist.shape[1] > 1 else np.full(n, 0.01)
    log_scales = np.log(np.clip(nn, 1e-4, None))[:, None].repeat(3, axis=1)

    normals = np.zeros((n, 3))
    have = np.zeros(n, dtype=bool)
    for fr in bundle.frames:
        if have.all():
            break
        cam = fr.camera
        p_cam = pts @ cam.R.T + cam.t
        z = p_cam[:, 2]
        front = z > 1e-6
        zs = np.where(front, z, 1.0)
        u = cam.fx * p_cam[:, 0] / zs + cam.cx
        v = cam.fy * p_cam[:, 1] / zs + cam.cy
        inside = front & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
        rows = np.clip(np.floor(v), 0, cam.height - 1).astype(int)
        cols = np.clip(np.floor(u), 0, cam.width - 1).astype(int)
        n_cam = fr.normal.data[rows, cols].astype(np.float64)
        defined = np.linalg.norm(n_cam, axis=1) > 0.5
        take = inside & defined & ~have
        if take.any():
            normals[take] = n_cam[take] @ cam.R   # rows of R are camera axes
            have[take] = True
    normals[~have] = (0.0, 0.0, 1.0)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)

    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    cloud = GaussianCloud(
        positions=pts,
        log_scales=log_scales,
        rotations=rot,
        opacity_logits=np.zeros(n),          # sigmoid(0) = 0.5
        colors=np.clip(bundle.init_colors.astype(np.float64), 0.0, 1.0),
        normals=normals,
        f_sem=np.zeros((n, len(HIERARCHY_LEVELS), latent_channels)),
        active_level=level,
    )
    cloud.validate()
    return cloud


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]."""
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if mse == 0:
        return float("inf")
    return -10.0 * math.log10(mse)


# ---------------------------------------------------------------------------
# training

def _latent_targets(bundle: FrameBundle, model: lqc_mod.LqcModel) -> list[np.ndarray]:
    """Quantized compressor latents of each frame's language features, upsampled to RGB size."""
    targets = []
    for fr in bundle.frames:
        z_e = lqc_mod.encode(model, fr.clip_features.data.astype(np.float64))
        z_q, _ = lqc_mod.quantize(model.codebook, z_e)
        h, w = fr.rgb.data.shape[:2]
        targets.append(upsample_bilinear(z_q.astype(np.float32), h, w))
    return targets


def train_field(bundle: FrameBundle, lqc_model: lqc_mod.LqcModel, config: FieldConfig,
                checkpoint_cb=None):
    """Fit a Gaussian cloud to the bundle; returns (cloud, per-step history)."""
    config.validate()
    bundle.validate()
    lqc_model.validate()
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(np.random.PCG64(config.seed))
    dt = torch.float32

    cloud = init_cloud_from_bundle(bundle, lqc_model.D, config.level)
    zero_latent = lqc_mod.encode(lqc_model, np.zeros((1, 1, lqc_model.C)))
    zero_latent, _ = lqc_mod.quantize(lqc_model.codebook, zero_latent)
    cloud.feature_background = zero_latent.reshape(-1).astype(np.float64)

    params = _cloud_tensors(cloud, dt, requires_grad=True)
    lrs = {
        "positions": config.lr_position, "log_scales": config.lr_scale,
        "rotations": config.lr_rotation, "opacity_logits": config.lr_opacity,
        "colors": config.lr_color, "normals": config.lr_normal,
        "features": config.lr_feature,
    }
    opt = Adam(params, lrs=lrs)

    train_views = [i for i in range(len(bundle.frames)) if i not in set(config.holdout_views)]
    if not train_views:
        raise ValueError("holdout_views leaves no training views")
    frames = bundle.frames
    rgb_t = [torch.as_tensor(frames[i].rgb.data.astype(np.float32)) for i in range(len(frames))]
    normal_t = [torch.as_tensor(frames[i].normal.data.astype(np.float32)) for i in range(len(frames))]
    bg_rgb, bg_feat = _backgrounds(cloud, config.background, dt)

    latent_t: list[torch.Tensor] | None = None
    seg_index_t: torch.Tensor | None = None
    seg_means_t: torch.Tensor | None = None
    assignment: SegmentAssignment | None = None

    def np_cloud() -> GaussianCloud:
        lidx = HIERARCHY_LEVELS.index(config.level)
        f_sem = cloud.f_sem.copy()
        f_sem[:, lidx, :] = params["features"].detach().numpy().astype(np.float64)
        return GaussianCloud(
            positions=params["positions"].detach().numpy().astype(np.float64),
            log_scales=params["log_scales"].detach().numpy().astype(np.float64),
            rotations=params["rotations"].detach().numpy().astype(np.float64),
            opacity_logits=params["opacity_logits"].detach().numpy().astype(np.float64),
            colors=params["colors"].detach().numpy().astype(np.float64),
            normals=params["normals"].detach().numpy().astype(np.float64),
            f_sem=f_sem, active_level=config.level,
            feature_background=cloud.feature_background,
        )

    def refresh_assignment():
        nonlocal assignment, seg_index_t, seg_means_t
        snapshot = np_cloud()
        assignment = assign_segments(snapshot, bundle, config.level,
                                     config.assign_weight_threshold, config.render, dtype=dt)
        sids = sorted(assignment.means.keys())
        if sids:
            lut = {sid: k for k, sid in enumerate(sids)}
            idx = np.array([lut.get(int(s), -1) for s in assignment.ids], dtype=np.int64)
            seg_index_t = torch.as_tensor(idx)
            seg_means_t = torch.as_tensor(
                np.stack([assignment.means[s] for s in sids]).astype(np.float32))
        else:
            seg_index_t = torch.full((assignment.ids.size,), -1, dtype=torch.int64)
            seg_means_t = torch.zeros((1, lqc_model.D), dtype=dt)

    total_steps = config.phase1_steps + config.phase2_steps
    history: list[dict] = []
    for step in range(total_steps):
        phase2 = step >= config.phase1_steps
        if phase2 and latent_t is None:
            latent_t = [torch.as_tensor(t) for t in _latent_targets(bundle, lqc_model)]
            refresh_assignment()
        elif phase2 and config.assign_every and (step - config.phase1_steps) % config.assign_every == 0 \
                and step != config.phase1_steps:
            refresh_assignment()

        vi = train_views[int(rng.integers(len(train_views)))]
        cam = frames[vi].camera
        channels = ("rgb", "normal", "feature") if phase2 else ("rgb", "normal")
        out = _forward(params, cam, bg_rgb, bg_feat, config.render, channels=channels)

        l_rgb = ((out["rgb"] - rgb_t[vi]) ** 2).mean()
        l_norm = _normal_loss_t(out["normal"], normal_t[vi], step, config.t_n, config.tau_thr)
        loss = config.w_rgb * l_rgb + config.w_normal * l_norm
        rec = {"step": step, "phase": 2 if phase2 else 1,
               "l_rgb": float(l_rgb.detach()), "l_normal": float(l_norm.detach()),
               "l_latent": 0.0, "l_s2d": 0.0, "l_s3d": 0.0}
        if phase2:
            l_lat = ((out["feature"] - latent_t[vi]) ** 2).mean()
            pa, pb = sample_mask_pairs(frames[vi].masks.levels[config.level],
                                       config.pair_samples, rng)
            h, w = cam.height, cam.width
            feat_flat = out["feature"].reshape(h * w, -1)
            l_s2d = _pair_distance_t(feat_flat, pa, pb) if pa.size else torch.zeros((), dtype=dt)
            l_s3d = _s3d_loss_t(params["features"], seg_index_t, seg_means_t)
            loss = loss + config.w_latent * l_lat + config.w_s2d * l_s2d + config.w_s3d * l_s3d
            rec.update(l_latent=float(l_lat.detach()), l_s2d=float(l_s2d.detach()),
                       l_s3d=float(l_s3d.detach()))
        rec["total"] = float(loss.detach())
        if not math.isfinite(rec["total"]):
            raise TrainingDivergedError(step, rec)
        if not loss.requires_grad:
            raise TrainingDivergedError(step, {**rec, "error": "no visible Gaussians left"})

        for p in params.values():
            p.grad = None
        loss.backward()
        opt.step({k: p.grad for k, p in params.items()})
        with torch.no_grad():
            params["rotations"].div_(params["rotations"].norm(dim=-1, keepdim=True))
            params["normals"].div_(params["normals"].norm(dim=-1, keepdim=True).clamp(min=1e-12))
            params["colors"].clamp_(0.0, 1.0)
            params["log_scales"].clamp_(-10.0, 4.0)

        if config.prune_every and (step + 1) % config.prune_every == 0 and step + 1 < total_steps:
            with torch.no_grad():
                keep = torch.sigmoid(params["opacity_logits"]) >= config.prune_opacity
            if not bool(keep.any()):
                raise TrainingDivergedError(step, {"error": "pruning removed every Gaussian"})
            if not bool(keep.all()):
                opt.select_rows(keep, list(params.keys()))
                for k in params:
                    params[k] = opt.params[k].detach().clone().requires_grad_(True)
                    opt.params[k] = params[k]
                keep_np = keep.numpy()
                cloud.f_sem = cloud.f_sem[keep_np]
                if assignment is not None:
                    refresh_assignment()

        if config.eval_every and config.holdout_views and (step + 1) % config.eval_every == 0:
            rec["psnr_holdout"] = evaluate_psnr(np_cloud(), bundle, config)
        if checkpoint_cb and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            checkpoint_cb(step, np_cloud())
        if config.log_every <= 1 or step % config.log_every == 0 or step == total_steps - 1:
            history.append(rec)

    final = np_cloud()
    final.validate()
    return final, history


def evaluate_psnr(cloud: GaussianCloud, bundle: FrameBundle, config: FieldConfig,
                  views: tuple | None = None) -> float:
    """Mean PSNR of rendered RGB against ground truth over the given views (default: holdouts)."""
    views = tuple(views if views is not None else config.holdout_views)
    if not views:
        raise ValueError("no views to evaluate")
    params = _cloud_tensors(cloud, torch.float32)
    bg_rgb, bg_feat = _backgrounds(cloud, config.background, torch.float32)
    vals = []
    for vi in views:
        fr = bundle.frames[vi]
        with torch.no_grad():
            out = _forward(params, fr.camera, bg_rgb, bg_feat, config.render, channels=("rgb",))
        vals.append(psnr(out["rgb"].numpy(), fr.rgb.data))
    return float(np.mean(vals))
