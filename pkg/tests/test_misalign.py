"""Five-level misalignment protocol: exact level constants, sampling
law, warp-then-crop semantics."""

import numpy as np
import pytest

from dgrlab import misalign as M
from dgrlab import warp as W
from dgrlab.synthdata import ImagePair


class TestLevelSpec:
    @pytest.mark.parametrize("level,rot,trans,scale", [
        (1, 1.0, 0.02, 0.02),
        (2, 2.0, 0.04, 0.04),
        (3, 3.0, 0.06, 0.06),
        (4, 4.0, 0.08, 0.08),
        (5, 5.0, 0.10, 0.10),
    ])
    def test_exact_bounds(self, level, rot, trans, scale):
        spec = M.level_spec(level)
        assert spec.rot_max == rot
        assert spec.trans_max == trans
        assert spec.scale_max == scale

    def test_level_zero(self):
        spec = M.level_spec(0)
        assert (spec.rot_max, spec.trans_max, spec.scale_max) == (0.0, 0.0, 0.0)

    @pytest.mark.parametrize("bad", [-1, 6, 100])
    def test_out_of_range(self, bad):
        with pytest.raises(ValueError):
            M.level_spec(bad)


class TestSampleAffine:
    def test_level_zero_identity_always(self):
        rng = np.random.default_rng(0)
        spec = M.level_spec(0)
        for _ in range(50):
            p = M.sample_affine(spec, rng)
            assert p.is_identity

    def test_monte_carlo_bounds_and_mean(self):
        rng = np.random.default_rng(1)
        spec = M.level_spec(3)
        rots = np.empty(100_000)
        for i in range(100_000):
            p = M.sample_affine(spec, rng)
            rots[i] = p.rotation_deg
        assert rots.min() >= -3.0 and rots.max() <= 3.0
        assert abs(rots.mean()) < 0.05

    def test_bounds_all_params(self):
        rng = np.random.default_rng(2)
        spec = M.level_spec(5)
        for _ in range(2000):
            p = M.sample_affine(spec, rng)
            assert -5.0 <= p.rotation_deg <= 5.0
            assert -0.1 <= p.ty <= 0.1 and -0.1 <= p.tx <= 0.1
            assert 0.9 <= p.scale <= 1.1

    def test_fixed_seed_reproduces(self):
        spec = M.level_spec(2)
        seq1 = [M.sample_affine(spec, np.random.default_rng(7)).to_dict() for _ in range(1)]
        seq1 += [None]
        rng_a, rng_b = np.random.default_rng(7), np.random.default_rng(7)
        for _ in range(20):
            assert M.sample_affine(spec, rng_a).to_dict() == M.sample_affine(spec, rng_b).to_dict()

    def test_levels_share_unit_noise(self):
        # same rng state at different levels gives proportional draws
        p3 = M.sample_affine(M.level_spec(3), np.random.default_rng(9))
        p5 = M.sample_affine(M.level_spec(5), np.random.default_rng(9))
        assert p5.rotation_deg == pytest.approx(p3.rotation_deg * 5 / 3, rel=1e-9)
        assert p5.tx == pytest.approx(p3.tx * 10 / 6, rel=1e-9)


def make_pair(h=96, w=96, seed=3):
    rng = np.random.default_rng(seed)
    x = rng.random((3, h, w)).astype(np.float32)
    y = rng.random((3, h, w)).astype(np.float32)
    return ImagePair(x=x, y=y, y_ideal=y.copy(), split="train")


class TestApplyMisalignment:
    def test_identity_is_center_crop(self):
        pair = make_pair()
        out = M.apply_misalignment(pair, W.AffineParams(), 64)
        np.testing.assert_array_equal(out.x, pair.x[:, 16:80, 16:80])
        np.testing.assert_array_equal(out.y, pair.y[:, 16:80, 16:80])
        assert out.gt_affine.is_identity

    def test_pure_translation_oracle(self):
        pair = make_pair()
        # tx = 4 px on a 96-wide image
        params = W.AffineParams(tx=4.0 / 96.0)
        out = M.apply_misalignment(pair, params, 64)
        # warped(i, j) = x(i, j+4); crop offset 16
        expect = pair.x[:, 16:80, 20:84]
        np.testing.assert_allclose(out.x, expect, atol=1e-5)

    def test_target_never_warped(self):
        pair = make_pair()
        params = W.AffineParams(rotation_deg=4.0, tx=0.05, scale=1.05)
        out = M.apply_misalignment(pair, params, 64)
        np.testing.assert_array_equal(out.y, pair.y[:, 16:80, 16:80])
        np.testing.assert_array_equal(out.y_ideal, pair.y_ideal[:, 16:80, 16:80])

    def test_crop_validation(self):
        pair = make_pair()
        with pytest.raises(ValueError, match="divisible"):
            M.apply_misalignment(pair, W.AffineParams(), 60)
        with pytest.raises(ValueError, match="exceeds"):
            M.apply_misalignment(pair, W.AffineParams(), 128)

    def test_level_monotonicity(self):
        # mean ground-truth displacement over the crop strictly increases
        # with level (Monte Carlo, shared noise across levels)
        means = []
        for level in range(6):
            spec = M.level_spec(level)
            acc = 0.0
            n = 1000
            for i in range(n):
                p = M.sample_affine(spec, np.random.default_rng([11, i]))
                fld = W.affine_field(p, 96, 96)
                mag = np.hypot(fld.tensor.data[0, 0, 16:80, 16:80],
                               fld.tensor.data[0, 1, 16:80, 16:80])
                acc += float(mag.mean())
            means.append(acc / n)
        assert all(b > a for a, b in zip(means, means[1:])), means
