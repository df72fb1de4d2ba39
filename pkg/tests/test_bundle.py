import numpy as np
import pytest

from langfield import rawio
from langfield.bundle import (BundleValidationError, Camera, FeatureMap, Frame,
                              FrameBundle, BundleMeta, MaskStack, read_bundle,
                              upsample_bilinear, write_bundle)


def _identity_camera(w=16, h=12):
    return Camera(fx=10.0, fy=10.0, cx=w / 2, cy=h / 2, width=w, height=h,
                  w2c=np.concatenate([np.eye(3), np.zeros((3, 1))], axis=1))


def _minimal_bundle(rng, frames=2, w=16, h=12, c=8, feat_div=2):
    frs = []
    for _ in range(frames):
        n = rng.normal(size=(h, w, 3))
        n /= np.linalg.norm(n, axis=-1, keepdims=True)
        ids = np.zeros((h, w), dtype=np.int32)
        ids[2:6, 3:9] = 1
        ids[8:11, 1:5] = 2
        frs.append(Frame(
            camera=_identity_camera(w, h),
            rgb=FeatureMap(rng.uniform(0, 1, (h, w, 3)).astype(np.float32)),
            normal=FeatureMap(n.astype(np.float32)),
            masks=MaskStack({lvl: ids.copy() for lvl in ("s", "m", "l")}),
            clip_features=FeatureMap(rng.normal(size=(h // feat_div, w // feat_div, c)).astype(np.float32)),
        ))
    return FrameBundle(
        frames=frs,
        init_points=rng.normal(size=(20, 3)).astype(np.float32),
        init_colors=rng.uniform(0, 1, (20, 3)).astype(np.float32),
        meta=BundleMeta(scene="unit", feature_channels=c),
    )


def test_write_creates_manifest_with_frames(tmp_path, rng):
    b = _minimal_bundle(rng)
    write_bundle(b, tmp_path)
    manifest = rawio.read_json(tmp_path / "manifest.json")
    assert manifest["format"] == "framebundle"
    assert len(manifest["frames"]) == 2
    assert manifest["feature_channels"] == 8


def test_mask_dim_mismatch_names_maskstack(tmp_path, rng):
    b = _minimal_bundle(rng)
    bad = b.frames[1].masks.levels["m"]
    b.frames[1].masks.levels["m"] = bad[:-2]
    with pytest.raises(BundleValidationError, match="MaskStack"):
        write_bundle(b, tmp_path)
    with pytest.raises(BundleValidationError, match="frame 1"):
        b.validate()


def test_feature_blob_roundtrip_bitexact(tmp_path, rng):
    blob = rng.normal(size=(7, 5, 9)).astype(np.float32)
    rawio.write_f32(tmp_path / "x.f32", blob)
    back = rawio.read_f32(tmp_path / "x.f32", (7, 5, 9))
    assert (tmp_path / "x.f32").read_bytes() == blob.astype("<f4").tobytes()
    assert np.array_equal(back, blob)


def test_bundle_roundtrip_tolerances(tmp_path, rng):
    b = _minimal_bundle(rng)
    write_bundle(b, tmp_path)
    b2 = read_bundle(tmp_path)
    for f1, f2 in zip(b.frames, b2.frames):
        assert np.abs(f1.rgb.data - f2.rgb.data).max() <= 1 / 255
        assert np.abs(f1.normal.data - f2.normal.data).max() <= 1 / 65535
        for lvl in ("s", "m", "l"):
            assert np.array_equal(f1.masks.levels[lvl], f2.masks.levels[lvl])
        assert np.array_equal(f1.clip_features.data, f2.clip_features.data)
    assert np.array_equal(b.init_points, b2.init_points)
    assert np.array_equal(b.init_colors, b2.init_colors)


def test_read_missing_manifest(tmp_path):
    with pytest.raises(BundleValidationError, match="manifest"):
        read_bundle(tmp_path)


def test_truncated_blob_is_shape_mismatch(tmp_path, rng):
    b = _minimal_bundle(rng)
    write_bundle(b, tmp_path)
    blob = tmp_path / "frames" / "000" / "features.f32"
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(BundleValidationError, match="frame 0"):
        read_bundle(tmp_path)


def test_manifest_c512_blob_shapes(tmp_path, rng):
    b = _minimal_bundle(rng, c=512, w=8, h=8, feat_div=1)
    write_bundle(b, tmp_path)
    b2 = read_bundle(tmp_path)
    assert b2.frames[0].clip_features.channels == 512
    assert b2.meta.feature_channels == 512


def test_nonfinite_feature_rejected(rng):
    b = _minimal_bundle(rng)
    b.frames[0].clip_features.data[0, 0, 0] = np.nan
    with pytest.raises(BundleValidationError, match="frame 0"):
        b.validate()


def test_single_frame_rejected(rng):
    b = _minimal_bundle(rng)
    b.frames = b.frames[:1]
    with pytest.raises(BundleValidationError, match=">= 2 frames"):
        b.validate()


def test_noncontiguous_mask_ids_rejected(rng):
    b = _minimal_bundle(rng)
    for lvl in ("s", "m", "l"):
        b.frames[0].masks.levels[lvl][b.frames[0].masks.levels[lvl] == 1] = 3
    with pytest.raises(BundleValidationError, match="contiguous"):
        b.validate()


def test_non_unit_normals_rejected(rng):
    b = _minimal_bundle(rng)
    b.frames[1].normal.data[3, 4] = (0.7, 0.0, 0.0)
    with pytest.raises(BundleValidationError, match="frame 1"):
        b.validate()


def test_feature_resolution_must_divide(rng):
    b = _minimal_bundle(rng)
    f = b.frames[0].clip_features.data
    b.frames[0].clip_features = FeatureMap(f[:-1])
    with pytest.raises(BundleValidationError, match="divide"):
        b.validate()


def test_camera_invariants():
    cam = _identity_camera()
    cam.validate()
    bad = Camera(fx=-1.0, fy=1.0, cx=1, cy=1, width=4, height=4, w2c=np.eye(3, 4))
    with pytest.raises(BundleValidationError, match="focal"):
        bad.validate()
    skew = np.eye(3, 4)
    skew[0, 1] = 1e-3
    with pytest.raises(BundleValidationError, match="orthonormal"):
        Camera(fx=1, fy=1, cx=1, cy=1, width=4, height=4, w2c=skew).validate()
    with pytest.raises(BundleValidationError, match="cx"):
        Camera(fx=1, fy=1, cx=4, cy=1, width=4, height=4, w2c=np.eye(3, 4)).validate()


def test_upsample_bilinear_identity_and_shape(rng):
    x = rng.normal(size=(6, 8, 3)).astype(np.float32)
    assert upsample_bilinear(x, 6, 8) is x
    up = upsample_bilinear(x, 12, 16)
    assert up.shape == (12, 16, 3)
    const = np.full((4, 4, 2), 3.25, dtype=np.float32)
    assert np.allclose(upsample_bilinear(const, 8, 8), 3.25)
