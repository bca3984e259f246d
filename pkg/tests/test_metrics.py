import numpy as np
import pytest
from skimage.metrics import structural_similarity

from exblurf.metrics import TrajectorySamples, ate, pooled_ate, psnr, rigid_alignment, ssim
from exblurf.se3 import BezierTrajectory, Pose, Twist, exp_map


def test_psnr_values(rng):
    a = np.full((8, 8, 3), 0.3)
    assert psnr(a, a) == float("inf")
    assert abs(psnr(a, a + 0.1) - 20.0) < 1e-9
    b = rng.random((8, 8, 3))
    assert psnr(a, b) == psnr(b, a)
    with pytest.raises(ValueError):
        psnr(a, np.zeros((8, 7, 3)))


def test_psnr_monotone_in_noise(rng):
    img = rng.random((16, 16, 3))
    noise = rng.uniform(-1, 1, img.shape)
    vals = [psnr(img, img + a * noise) for a in (0.01, 0.02, 0.05, 0.1, 0.2)]
    assert all(x > y for x, y in zip(vals, vals[1:]))


def test_ssim_identity_symmetry_negative(rng):
    a = rng.random((24, 24, 3))
    b = rng.random((24, 24, 3))
    assert abs(ssim(a, a) - 1.0) < 1e-9
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-12
    checker = (np.indices((24, 24)).sum(axis=0) // 3 % 2).astype(float)
    img = np.repeat(checker[..., None], 3, axis=2)
    assert ssim(img, 1 - img) < 0.5
    with pytest.raises(ValueError):
        ssim(np.zeros((10, 10, 3)), np.zeros((10, 10, 3)))


def test_ssim_matches_reference_implementation(rng):
    a = rng.random((32, 40, 3))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    ref = structural_similarity(a, b, data_range=1.0, channel_axis=2, gaussian_weights=True,
                                sigma=1.5, use_sample_covariance=False)
    assert abs(ssim(a, b) - ref) < 1e-6


def random_samples(rng, n=10):
    rot = np.stack([exp_map(Twist(rng.normal(size=3) * 0.5, np.zeros(3))).rotation
                    for _ in range(n)])
    return TrajectorySamples(rot, rng.normal(size=(n, 3)), np.linspace(0, 1, n))


def test_ate_identity_and_rigid_invariance(rng):
    gt = random_samples(rng)
    assert ate(gt, gt).pos < 1e-12 and ate(gt, gt).rot < 1e-12
    g = exp_map(Twist([0.3, -1.0, 0.5], [1.0, 2.0, -3.0]))
    moved = TrajectorySamples(np.einsum("ij,njk->nik", g.rotation, gt.rotations),
                              gt.positions @ g.rotation.T + g.translation, gt.times)
    res = ate(moved, gt)
    assert res.pos < 1e-9 and res.rot < 1e-7 and not res.degenerate


def test_ate_alternating_offset_exact():
    # symmetric square; alternating +-x offsets cannot be removed rigidly
    base = np.array([[1, 1, 0], [-1, 1, 0], [-1, -1, 0], [1, -1, 0],
                     [1, 1, 1], [-1, 1, 1], [-1, -1, 1], [1, -1, 1]], float)
    sign = np.array([1, -1, 1, -1, -1, 1, -1, 1], float)
    est = base + np.outer(sign, [0.1, 0, 0])
    rot = np.repeat(np.eye(3)[None], 8, axis=0)
    t = np.linspace(0, 1, 8)
    res = ate(TrajectorySamples(rot, est, t), TrajectorySamples(rot, base, t))
    assert abs(res.pos - 0.1) < 1e-9


def test_ate_validation_and_degenerate(rng):
    gt = random_samples(rng, 5)
    with pytest.raises(ValueError):
        ate(random_samples(rng, 4), gt)
    with pytest.raises(ValueError):
        TrajectorySamples(gt.rotations, gt.positions, np.array([0, 0.5, 0.4, 0.8, 1.0]))
    line = np.outer(np.linspace(0, 1, 5), [1.0, 2.0, 0.5])
    rot = np.repeat(np.eye(3)[None], 5, axis=0)
    res = ate(TrajectorySamples(rot, line + 0.3, gt.times), TrajectorySamples(rot, line, gt.times))
    assert res.degenerate and res.pos < 1e-12


def test_pooled_ate_reversal_and_pooling(rng):
    trajs = [BezierTrajectory.from_array(rng.normal(size=(4, 6)) * 0.2) for _ in range(3)]
    reversed_ = [BezierTrajectory.from_array(t.controls[::-1]) for t in trajs]
    res = pooled_ate(reversed_, trajs, 11)
    assert res.pos < 1e-9 and res.reversed_views == [0, 1, 2]
    strict = pooled_ate(reversed_, trajs, 11, allow_reversal=False)
    assert strict.pos > 0.01
    noisy = [BezierTrajectory.from_array(t.controls + rng.normal(size=(4, 6)) * 0.01)
             for t in trajs]
    res = pooled_ate(noisy, trajs, 11)
    assert abs(res.pos - np.sqrt(np.mean(np.square(res.per_view_pos)))) < 1e-15
