import math

import numpy as np
import pytest
from scipy import ndimage

from embryobench import imaging as im
from embryobench import rng as rngs
from embryobench.dynamics import SimObject


def spatial_convolve(v, k):
    """Direct 'same'-size linear convolution with zero boundary (oracle)."""
    out = np.zeros_like(v, dtype=np.float64)
    cx, cy, cz = (s // 2 for s in k.shape)
    X, Y, Z = v.shape
    for x in range(X):
        for y in range(Y):
            for z in range(Z):
                acc = 0.0
                for i in range(k.shape[0]):
                    xi = x + cx - i
                    if not 0 <= xi < X:
                        continue
                    for j in range(k.shape[1]):
                        yj = y + cy - j
                        if not 0 <= yj < Y:
                            continue
                        for m in range(k.shape[2]):
                            zm = z + cz - m
                            if 0 <= zm < Z:
                                acc += v[xi, yj, zm] * k[i, j, m]
                out[x, y, z] = acc
    return out


# -- videos ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def video():
    return im.synthesize_object_video(im.VideoSpec(frames=8, radius=6.0), seed=2, video_id=3)


def test_video_components(video):
    assert ndimage.label(video.frames[0][1])[1] == 1
    assert ndimage.label(video.frames[-1][1])[1] == 2


def test_video_first_frame_volume(video):
    r = 0.8 * 6.0
    want = 4.0 / 3.0 * math.pi * r ** 3
    assert abs(video.frames[0][1].sum() - want) / want < 0.10


def test_video_deterministic(video):
    other = im.synthesize_object_video(im.VideoSpec(frames=8, radius=6.0), seed=2, video_id=3)
    for (a, m), (b, n) in zip(video.frames, other.frames):
        assert np.array_equal(a, b) and np.array_equal(m, n)


def test_video_axis_is_unit(video):
    assert math.isclose(np.linalg.norm(video.principal_axis()), 1.0)


def test_video_degenerate_spec():
    with pytest.raises(im.VideoValidationError):
        im.synthesize_object_video(im.VideoSpec(frames=2), 0)


def test_video_dir_roundtrip(tmp_path):
    lib = im.synthesize_library(im.VideoSpec(frames=4, radius=3.0, count=3), seed=1)
    im.write_object_videos(lib, tmp_path)
    loaded = im.load_object_videos(tmp_path)
    assert len(loaded) == 3
    assert loaded[1].nucleus_radius == lib[1].nucleus_radius
    assert np.array_equal(loaded[2].frames[3][0], lib[2].frames[3][0])


def test_video_mask_beyond_support():
    inten = np.zeros((5, 5, 5), np.float32)
    inten[2, 2, 2] = 1
    mask = np.zeros((5, 5, 5), bool)
    mask[2, 2, 1:4] = True
    with pytest.raises(im.VideoValidationError):
        im.ObjectVideo(1, [(inten, mask), (inten, mask)]).validate()


def test_video_empty_dir(tmp_path):
    with pytest.raises(im.VideoValidationError):
        im.load_object_videos(tmp_path)


# -- rasterization ----------------------------------------------------------------

@pytest.mark.parametrize("s,l,F,want", [(1, 30, 12, 0), (30, 30, 12, 11), (2, 3, 5, 2), (1, 1, 5, 4)])
def test_video_frame_index(s, l, F, want):
    assert im.video_frame_index(s, l, F) == want


def sim(i, pos, r=6.0, s=1, l=10, vid=1):
    return SimObject(i, tuple(float(v) for v in pos), r, l, s, vid)


def test_single_object_region(video):
    vs = im.VolumeSpec((40, 40, 40), (1.0, 1.0, 1.0))
    p = im.rasterize_frame([sim(7, (20, 20, 20), vid=1)], [video], vs)
    labels, n = ndimage.label(p.label > 0)
    assert n == 1
    assert set(np.unique(p.label)) == {0, 7}
    rec = p.records[0]
    assert rec["labeled_voxels"] == int((p.label == 7).sum()) > 0
    assert not rec["clipped"]


def test_two_far_objects(video):
    vs = im.VolumeSpec((140, 30, 30), (1.0, 1.0, 1.0))
    a, b = sim(1, (20, 15, 15)), sim(2, (120, 15, 15))
    both = im.rasterize_frame([a, b], [video], vs)
    pa = im.rasterize_frame([a], [video], vs)
    pb = im.rasterize_frame([b], [video], vs)
    assert ndimage.label(both.label > 0)[1] == 2
    assert np.array_equal(both.raw, np.maximum(pa.raw, pb.raw))


def test_overlap_goes_to_brighter(video):
    vs = im.VolumeSpec((40, 40, 40), (1.0, 1.0, 1.0))
    p = im.rasterize_frame([sim(1, (18, 20, 20)), sim(2, (22, 20, 20))], [video], vs)
    # the voxel at each center belongs to that object
    assert p.label[18, 20, 20] == 1 and p.label[22, 20, 20] == 2


def test_clipped_object(video):
    vs = im.VolumeSpec((20, 20, 20), (1.0, 1.0, 1.0))
    p = im.rasterize_frame([sim(1, (0, 10, 10)), sim(2, (500, 10, 10))], [video], vs)
    r1, r2 = p.records
    assert r1["clipped"] and r1["labeled_voxels"] > 0
    assert r2["clipped"] and r2["labeled_voxels"] == 0


def test_centroid_fidelity_random_objects():
    lib = im.synthesize_library(im.VideoSpec(frames=12, radius=8.0, count=6), seed=4)
    vs = im.VolumeSpec((64, 64, 32), (1.0, 1.0, 2.0))
    rng = np.random.default_rng(5)
    worst = 0.0
    for i in range(50):
        pos = rng.uniform([15, 15, 15], [49, 49, 49])
        l = int(rng.integers(2, 40))
        o = sim(i + 1, pos, r=rng.uniform(7, 10), s=int(rng.integers(1, l + 1)), l=l, vid=int(rng.integers(1, 7)))
        p = im.rasterize_frame([o], lib, vs)
        c = ndimage.center_of_mass(p.label == o.id)
        worst = max(worst, float(np.linalg.norm(np.asarray(c) - vs.to_voxel(o.position))))
    assert worst <= 1.5


# -- acquisition ------------------------------------------------------------------

def test_attenuation_ramps():
    assert im.attenuation_factors(5, "forward").tolist() == [1, 0.75, 0.5, 0.25, 0]
    assert im.attenuation_factors(5, "inverted").tolist() == [0, 0.25, 0.5, 0.75, 1]


def test_attenuation_views_sum():
    for n in (2, 5, 9, 64):
        assert np.all(im.attenuation_factors(n, "forward") + im.attenuation_factors(n, "inverted") == 1.0)
    v = np.random.default_rng(0).uniform(0, 1000, (6, 7, 9))
    # a few ulps at most: each product and the sum round once
    assert np.allclose(im.attenuate(v, "forward") + im.attenuate(v, "inverted"), v, rtol=1e-15, atol=0)


@pytest.mark.parametrize("ks", [3, 5])
def test_convolution_matches_spatial(ks):
    rng = np.random.default_rng(ks)
    v = rng.uniform(0, 100, (10, 9, 8))
    k = rng.uniform(0, 1, (ks, ks, ks))
    k /= k.sum()
    got = im.convolve_psf(v, k)
    want = spatial_convolve(v, k)
    assert np.allclose(got, want, rtol=1e-9, atol=1e-9 * np.abs(want).max())


def test_convolution_asymmetric_kernel_orientation():
    v = np.zeros((9, 9, 9))
    v[4, 4, 4] = 1
    k = np.zeros((3, 3, 3))
    k[2, 1, 1] = 1
    out = im.convolve_psf(v, k)
    assert out[5, 4, 4] == pytest.approx(1.0)


def test_convolution_delta_identity():
    v = np.random.default_rng(1).uniform(0, 1000, (12, 12, 12))
    assert np.allclose(im.convolve_psf(v, im.delta_psf(5)), v, rtol=1e-6)


def test_convolution_preserves_mass():
    v = np.zeros((32, 32, 32))
    v[12:20, 12:20, 12:20] = np.random.default_rng(2).uniform(0, 10, (8, 8, 8))
    out = im.convolve_psf(v, im.gaussian_psf(1.0, 1.5))
    assert out.sum() == pytest.approx(v.sum(), rel=1e-6)


def test_convolution_psf_too_large():
    with pytest.raises(ValueError):
        im.convolve_psf(np.zeros((4, 4, 4)), np.ones((5, 5, 5)) / 125)


def test_dark_current():
    v = np.random.default_rng(3).uniform(0, 10, (4, 4, 4))
    assert np.array_equal(im.add_dark_current(v, 0), v)
    assert np.all(im.add_dark_current(np.zeros((3, 3, 3)), 100) == 100)
    assert im.add_dark_current(v, 100).mean() - v.mean() == pytest.approx(100, abs=1e-12)


def test_shot_noise():
    assert not im.apply_shot_noise(np.zeros((4, 4, 4)), rngs.stream(0, 9)).any()
    v = np.full((100, 100, 10), 50.0)
    out = im.apply_shot_noise(v, rngs.stream(1, 9))
    assert abs(out.mean() - 50) <= 3 * math.sqrt(50 / out.size)
    assert abs(out.var() - 50) / 50 <= 0.05
    assert np.array_equal(out, im.apply_shot_noise(v, rngs.stream(1, 9)))
    with pytest.raises(ValueError):
        im.apply_shot_noise(-v, rngs.stream(1, 9))


def test_gaussian_noise():
    v = np.full((100, 100, 10), 1000.0)
    assert np.array_equal(im.add_gaussian_noise(v, 0, rngs.stream(0, 9)), v)
    out = im.add_gaussian_noise(v, 10.0, rngs.stream(2, 9))
    assert abs(out.std() - 10) / 10 <= 0.05
    assert np.array_equal(out, im.add_gaussian_noise(v, 10.0, rngs.stream(2, 9)))
    assert im.add_gaussian_noise(np.zeros((50, 50, 4)), 10.0, rngs.stream(3, 9)).min() == 0


def test_quantize():
    q = im.quantize(np.array([-3.0, 0.49, 0.5, 1.5, 70000.0]).reshape(1, 1, 5))
    assert q.dtype == np.uint16
    assert q.ravel().tolist() == [0, 0, 1, 2, 65535]
    assert im.quantize(np.array([300.0]).reshape(1, 1, 1), bits=8).ravel().tolist() == [255]


def quiet_cfg(**kw):
    base = dict(psf=im.delta_psf(1), dark_offset=0.0, sigma_agn=0.0, shot_noise=False, attenuation="none")
    base.update(kw)
    return im.AcquisitionConfig(**base)


def test_acquire_identity():
    raw = np.random.default_rng(4).uniform(0, 3000, (8, 8, 8))
    (out,) = im.acquire(raw, quiet_cfg())
    assert np.array_equal(out, im.quantize(raw))


def test_acquire_point_source_reproduces_psf():
    psf = im.gaussian_psf(1.0, 1.5)
    raw = np.zeros((21, 21, 21))
    raw[10, 10, 10] = 1e5
    (out,) = im.acquire(raw, quiet_cfg(psf=psf, dark_offset=100.0))
    want = np.zeros_like(raw)
    h = [s // 2 for s in psf.shape]
    want[10 - h[0]:11 + h[0], 10 - h[1]:11 + h[1], 10 - h[2]:11 + h[2]] = 1e5 * psf
    assert np.array_equal(out, im.quantize(want + 100.0))


def test_acquire_multiview():
    rng = np.random.default_rng(5)
    raw = rng.uniform(0, 3000, (16, 16, 12))
    psf = rng.uniform(0, 1, (3, 5, 3))
    psf /= psf.sum()
    views = im.acquire(raw, quiet_cfg(psf=psf, attenuation="forward", multiview=True))
    assert len(views) == 2
    want2 = im.quantize(np.maximum(im.convolve_psf(im.attenuate(raw, "inverted"), psf[::-1, ::-1, ::-1]), 0))
    assert np.array_equal(views[1], want2)


def test_acquire_deterministic_noise():
    raw = np.random.default_rng(6).uniform(0, 3000, (8, 8, 8))
    cfg = im.AcquisitionConfig(psf=im.delta_psf(3), multiview=True)
    a = im.acquire(raw, cfg, seed=1, frame=2)
    b = im.acquire(raw, cfg, seed=1, frame=2)
    c = im.acquire(raw, cfg, seed=1, frame=3)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not np.array_equal(a[0], c[0])


def test_acquisition_config_rejects_unnormalized_psf():
    with pytest.raises(ValueError):
        im.AcquisitionConfig(psf=np.ones((3, 3, 3))).validate()
