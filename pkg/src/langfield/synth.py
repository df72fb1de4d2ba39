"""Procedural multi-view fixture generator with exact ground truth.

Ray-traces sphere/box scenes into full frame bundles: Lambertian RGB,
analytic camera-space normals, hierarchical label masks, per-pixel
"pseudo-CLIP" feature maps from a synthetic label dictionary, and a noisy
surface point cloud for Gaussian initialization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bundle import BundleMeta, Camera, FeatureMap, Frame, FrameBundle, MaskStack


class SynthSceneError(ValueError):
    pass


@dataclass
class Primitive:
    shape: str                      # "sphere" | "box"
    center: np.ndarray
    color: np.ndarray
    label: int
    radius: float = 0.5             # spheres
    half_extents: np.ndarray | None = None   # boxes
    rotation: np.ndarray | None = None       # boxes, 3x3 world-from-box

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.color = np.asarray(self.color, dtype=np.float64)
        if self.shape not in ("sphere", "box"):
            raise SynthSceneError(f"unknown primitive shape {self.shape!r}")
        if self.shape == "box":
            if self.half_extents is None:
                raise SynthSceneError("box primitive needs half_extents")
            self.half_extents = np.asarray(self.half_extents, dtype=np.float64)
            self.rotation = np.eye(3) if self.rotation is None else np.asarray(self.rotation, dtype=np.float64)

    def outer_radius(self) -> float:
        if self.shape == "sphere":
            return float(self.radius)
        return float(np.linalg.norm(self.half_extents))

    def contains(self, p: np.ndarray) -> bool:
        if self.shape == "sphere":
            return bool(np.linalg.norm(p - self.center) <= self.radius)
        local = self.rotation.T @ (p - self.center)
        return bool(np.all(np.abs(local) <= self.half_extents))

    def surface_area(self) -> float:
        if self.shape == "sphere":
            return 4.0 * math.pi * self.radius ** 2
        a, b, c = self.half_extents
        return 8.0 * (a * b + b * c + c * a)


@dataclass
class CameraRing:
    count: int
    radius: float
    elevation_deg: float


@dataclass
class SynthScene:
    name: str
    primitives: list[Primitive]
    ring: CameraRing
    height: int = 128
    width: int = 128
    fov_deg: float = 50.0
    background: tuple = (0.05, 0.05, 0.08)
    light_dir: tuple = (0.4, 0.2, 1.0)
    ambient: float = 0.3
    feature_channels: int = 512
    feature_downsample: int = 2
    n_points: int = 2200
    dictionary_cos_max: float = 0.3
    label_dictionary: dict[int, np.ndarray] | None = None

    def validate(self):
        if not self.primitives:
            raise SynthSceneError("scene needs >= 1 primitive")
        if self.height % self.feature_downsample or self.width % self.feature_downsample:
            raise SynthSceneError("feature_downsample must divide the image size")

    def labels(self) -> list[int]:
        return sorted({p.label for p in self.primitives})

    def diameter(self) -> float:
        lo = np.min([p.center - p.outer_radius() for p in self.primitives], axis=0)
        hi = np.max([p.center + p.outer_radius() for p in self.primitives], axis=0)
        return float(np.linalg.norm(hi - lo))


def make_label_dictionary(labels: list[int], channels: int, seed: int,
                          cos_max: float = 0.3, max_tries: int = 10000) -> dict[int, np.ndarray]:
    """Random unit embeddings with enforced pairwise cosine <= cos_max."""
    rng = np.random.default_rng(np.random.PCG64(seed ^ 0x5EED))
    chosen: list[np.ndarray] = []
    for _ in labels:
        for _ in range(max_tries):
            v = rng.standard_normal(channels)
            v /= np.linalg.norm(v)
            if all(abs(float(v @ u)) <= cos_max for u in chosen):
                chosen.append(v)
                break
        else:
            raise SynthSceneError(
                f"could not place {len(labels)} embeddings with pairwise cosine <= {cos_max}"
            )
    return {lab: vec.astype(np.float32) for lab, vec in zip(labels, chosen)}


def ring_cameras(scene: SynthScene) -> list[Camera]:
    """Evenly spaced look-at-origin cameras on a tilted ring (OpenCV axes: x right, y down, z forward)."""
    fx = scene.width / (2.0 * math.tan(math.radians(scene.fov_deg) / 2.0))
    cams = []
    elev = math.radians(scene.ring.elevation_deg)
    for k in range(scene.ring.count):
        az = 2.0 * math.pi * k / scene.ring.count
        pos = scene.ring.radius * np.array([
            math.cos(az) * math.cos(elev),
            math.sin(az) * math.cos(elev),
            math.sin(elev),
        ])
        fwd = -pos / np.linalg.norm(pos)  # look at origin
        up = np.array([0.0, 0.0, 1.0])
        x_cam = np.cross(fwd, up)
        x_cam /= np.linalg.norm(x_cam)
        y_cam = np.cross(fwd, x_cam)
        R = np.stack([x_cam, y_cam, fwd])
        t = -R @ pos
        cams.append(Camera(
            fx=fx, fy=fx, cx=scene.width / 2.0, cy=scene.height / 2.0,
            width=scene.width, height=scene.height,
            w2c=np.concatenate([R, t[:, None]], axis=1),
        ))
    return cams


def _intersect_sphere(origins, dirs, prim):
    oc = origins - prim.center
    a = np.sum(dirs * dirs, axis=-1)
    b = 2.0 * np.sum(dirs * oc, axis=-1)
    c = np.sum(oc * oc, axis=-1) - prim.radius ** 2
    disc = b * b - 4 * a * c
    hit = disc > 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t = (-b - sq) / (2 * a)
    hit &= t > 1e-6
    t = np.where(hit, t, np.inf)
    with np.errstate(invalid="ignore"):
        pts = origins + np.where(hit, t, 0.0)[..., None] * dirs
        normals = (pts - prim.center) / prim.radius
    return t, normals


def _intersect_box(origins, dirs, prim):
    Rb = prim.rotation
    o = (origins - prim.center) @ Rb        # into box frame
    d = dirs @ Rb
    h = prim.half_extents
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-h - o) * inv
        t2 = (h - o) * inv
    tmin = np.nanmax(np.minimum(t1, t2), axis=-1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=-1)
    hit = (tmax >= tmin) & (tmax > 1e-6) & (tmin > 1e-6)
    t = np.where(hit, tmin, np.inf)
    local = o + np.where(hit, t, 0.0)[..., None] * d
    # face = axis where the hit point sits on the slab boundary
    ratio = np.abs(local) / h
    axis = np.argmax(ratio, axis=-1)
    n_local = np.zeros_like(local)
    idx = np.indices(axis.shape)
    n_local[(*idx, axis)] = np.sign(local[(*idx, axis)])
    normals = n_local @ Rb.T
    return t, normals


def ray_cast(scene: SynthScene, camera: Camera, height: int, width: int):
    """Trace pixel-center rays; returns (t, primitive index or -1, world normals)."""
    R, t = camera.w2c[:, :3], camera.w2c[:, 3]
    pos = -R.T @ t
    scale_y = camera.height / height
    scale_x = camera.width / width
    jj, ii = np.meshgrid(np.arange(width), np.arange(height))
    u = (jj + 0.5) * scale_x
    v = (ii + 0.5) * scale_y
    d_cam = np.stack([(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, np.ones_like(u)], axis=-1)
    dirs = d_cam @ R        # rows of R are camera axes in world coords
    origins = np.broadcast_to(pos, dirs.shape)
    best_t = np.full((height, width), np.inf)
    best_prim = np.full((height, width), -1, dtype=np.int32)
    best_n = np.zeros((height, width, 3))
    for pi, prim in enumerate(scene.primitives):
        if prim.shape == "sphere":
            ti, ni = _intersect_sphere(origins, dirs, prim)
        else:
            ti, ni = _intersect_box(origins, dirs, prim)
        closer = ti < best_t
        best_t = np.where(closer, ti, best_t)
        best_prim = np.where(closer, pi, best_prim)
        best_n = np.where(closer[..., None], ni, best_n)
    return best_t, best_prim, best_n


def _shade(scene: SynthScene, prim_index, normals):
    light = np.asarray(scene.light_dir, dtype=np.float64)
    light = light / np.linalg.norm(light)
    lam = np.clip(np.sum(normals * light, axis=-1), 0.0, None)
    shade = scene.ambient + (1.0 - scene.ambient) * lam
    albedo = np.array([p.color for p in scene.primitives])
    rgb = np.where(
        (prim_index >= 0)[..., None],
        albedo[np.clip(prim_index, 0, None)] * shade[..., None],
        np.asarray(scene.background, dtype=np.float64),
    )
    return np.clip(rgb, 0.0, 1.0)


def _sample_surface_points(scene: SynthScene, rng: np.random.Generator):
    areas = np.array([p.surface_area() for p in scene.primitives])
    counts = rng.multinomial(scene.n_points, areas / areas.sum())
    pts, cols = [], []
    for prim, n in zip(scene.primitives, counts):
        if n == 0:
            continue
        if prim.shape == "sphere":
            v = rng.standard_normal((n, 3))
            v /= np.linalg.norm(v, axis=1, keepdims=True)
            p = prim.center + prim.radius * v
        else:
            h = prim.half_extents
            face_areas = 4.0 * np.array([h[1] * h[2], h[1] * h[2], h[0] * h[2],
                                         h[0] * h[2], h[0] * h[1], h[0] * h[1]])
            faces = rng.choice(6, size=n, p=face_areas / face_areas.sum())
            uv = rng.uniform(-1.0, 1.0, size=(n, 2))
            local = np.zeros((n, 3))
            for f in range(6):
                sel = faces == f
                axis, sign = divmod(f, 2)
                others = [a for a in range(3) if a != axis]
                local[sel, axis] = (1.0 if sign == 0 else -1.0) * h[axis]
                local[sel, others[0]] = uv[sel, 0] * h[others[0]]
                local[sel, others[1]] = uv[sel, 1] * h[others[1]]
            p = prim.center + local @ prim.rotation.T
        pts.append(p)
        cols.append(np.tile(prim.color, (n, 1)))
    pts = np.concatenate(pts, axis=0)
    cols = np.concatenate(cols, axis=0)
    sigma = 0.01 * scene.diameter()
    pts = pts + rng.normal(0.0, sigma, size=pts.shape)
    return pts.astype(np.float32), cols.astype(np.float32)


def generate(scene: SynthScene, seed: int = 0) -> FrameBundle:
    """Deterministically render the scene into a validated FrameBundle."""
    scene.validate()
    rng = np.random.default_rng(np.random.PCG64(seed))
    labels = scene.labels()
    dictionary = scene.label_dictionary or make_label_dictionary(
        labels, scene.feature_channels, seed, scene.dictionary_cos_max)
    label_to_lid = {lab: i + 1 for i, lab in enumerate(labels)}   # l-level mask IDs

    cameras = ring_cameras(scene)
    for ci, cam in enumerate(cameras):
        pos = -cam.R.T @ cam.t
        for prim in scene.primitives:
            if prim.contains(pos):
                raise SynthSceneError(f"camera {ci} is inside a primitive (degenerate view)")

    f = scene.feature_downsample
    fh, fw = scene.height // f, scene.width // f
    emb = np.zeros((len(scene.primitives) + 1, scene.feature_channels), dtype=np.float32)
    for pi, prim in enumerate(scene.primitives):
        emb[pi + 1] = dictionary[prim.label]

    frames = []
    for cam in cameras:
        _, prim_idx, normals_w = ray_cast(scene, cam, scene.height, scene.width)
        rgb = _shade(scene, prim_idx, normals_w)
        hitmask = prim_idx >= 0
        n_cam = normals_w @ cam.R.T
        n_cam = np.where(hitmask[..., None], n_cam, 0.0)

        prim_ids = np.where(hitmask, prim_idx + 1, 0).astype(np.int32)
        lid_lut = np.array([0] + [label_to_lid[p.label] for p in scene.primitives], dtype=np.int32)
        masks = MaskStack({
            "s": prim_ids.copy(),
            "m": prim_ids.copy(),
            "l": lid_lut[prim_ids],
        })
        _, fprim_idx, _ = ray_cast(scene, cam, fh, fw)
        feats = emb[fprim_idx + 1]

        frames.append(Frame(
            camera=cam,
            rgb=FeatureMap(rgb.astype(np.float32)),
            normal=FeatureMap(n_cam.astype(np.float32)),
            masks=masks,
            clip_features=FeatureMap(feats),
        ))

    pts, cols = _sample_surface_points(scene, rng)
    meta = BundleMeta(
        scene=scene.name,
        feature_channels=scene.feature_channels,
        units="scene",
        normal_space="camera",
        feature_normalization="unit",
        extra={
            "generator": "synth",
            "seed": seed,
            "labels": labels,
            "l_level_ids": {str(lab): label_to_lid[lab] for lab in labels},
        },
    )
    bundle = FrameBundle(frames=frames, init_points=pts, init_colors=cols, meta=meta)
    bundle.validate()
    return bundle


def two_spheres_box(name: str = "two-sphere-box", views: int = 17, size: int = 128,
                    feature_channels: int = 512, n_points: int = 2200) -> SynthScene:
    """Built-in acceptance fixture: two spheres and a box with distinct labels."""
    prims = [
        Primitive(shape="sphere", center=(0.55, 0.25, 0.05), color=(0.85, 0.25, 0.2), label=1, radius=0.42),
        Primitive(shape="sphere", center=(-0.58, 0.48, -0.08), color=(0.2, 0.5, 0.85), label=2, radius=0.45),
        Primitive(shape="box", center=(0.0, -0.5, -0.05), color=(0.3, 0.75, 0.3), label=3,
                  half_extents=(0.38, 0.3, 0.3),
                  rotation=_rot_z(math.radians(25.0))),
    ]
    return SynthScene(
        name=name,
        primitives=prims,
        ring=CameraRing(count=views, radius=3.2, elevation_deg=28.0),
        height=size, width=size,
        feature_channels=feature_channels,
        n_points=n_points,
    )


def _rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def scene_from_spec(spec: dict) -> SynthScene:
    """Build a SynthScene from a JSON scene spec (see README for the schema)."""
    prims = []
    for p in spec["primitives"]:
        rot = None
        if "rotation_z_deg" in p:
            rot = _rot_z(math.radians(float(p["rotation_z_deg"])))
        prims.append(Primitive(
            shape=p["shape"],
            center=p["center"],
            color=p["color"],
            label=int(p["label"]),
            radius=float(p.get("radius", 0.5)),
            half_extents=p.get("half_extents"),
            rotation=rot,
        ))
    ring = spec.get("camera_ring", {})
    return SynthScene(
        name=spec.get("name", "synthetic"),
        primitives=prims,
        ring=CameraRing(
            count=int(ring.get("count", 17)),
            radius=float(ring.get("radius", 3.2)),
            elevation_deg=float(ring.get("elevation_deg", 28.0)),
        ),
        height=int(spec.get("height", 128)),
        width=int(spec.get("width", 128)),
        fov_deg=float(spec.get("fov_deg", 50.0)),
        background=tuple(spec.get("background", (0.05, 0.05, 0.08))),
        light_dir=tuple(spec.get("light_dir", (0.4, 0.2, 1.0))),
        ambient=float(spec.get("ambient", 0.3)),
        feature_channels=int(spec.get("feature_channels", 512)),
        feature_downsample=int(spec.get("feature_downsample", 2)),
        n_points=int(spec.get("n_points", 2200)),
        dictionary_cos_max=float(spec.get("dictionary_cos_max", 0.3)),
    )
