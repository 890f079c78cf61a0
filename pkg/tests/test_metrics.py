import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from mosaicflow import metrics
from mosaicflow.degradation import PAPER_SRF, SfaPattern, apply_mosaic, apply_spectral


@pytest.fixture
def pair(rng):
    ref = rng.random((4, 16, 16)) * 0.8 + 0.1
    x = np.clip(ref + 0.05 * rng.standard_normal(ref.shape), 0, 1)
    return x, ref


class TestOracles:
    def test_psnr(self, pair):
        assert metrics.psnr(*pair) == pytest.approx(oracles.psnr(*pair), abs=1e-10)

    def test_ssim(self, pair):
        assert metrics.ssim(*pair) == pytest.approx(oracles.ssim(*pair), abs=1e-10)

    def test_sam(self, pair):
        assert metrics.sam(*pair) == pytest.approx(oracles.sam(*pair), abs=1e-10)

    def test_ergas(self, pair):
        assert metrics.ergas(*pair) == pytest.approx(oracles.ergas(*pair), abs=1e-10)

    @pytest.mark.parametrize("block", [32, 8, 4])
    def test_uiqi(self, pair, block):
        x, ref = pair
        for b in range(4):
            assert metrics.uiqi(x[b], ref[b], block) == pytest.approx(
                oracles.uiqi(x[b], ref[b], block), abs=1e-10)


class TestClosedForms:
    def test_psnr_20db(self):
        ref = np.full((2, 8, 8), 0.5)
        assert metrics.psnr(ref + 0.1, ref) == pytest.approx(20.0, abs=1e-10)

    def test_psnr_identical_capped(self):
        x = np.ones((2, 4, 4))
        assert metrics.psnr(x, x) == metrics.PSNR_CAP

    def test_ssim_identical(self, pair):
        assert metrics.ssim(pair[1], pair[1]) == pytest.approx(1.0)

    def test_sam_identical_and_orthogonal(self):
        a = np.zeros((2, 1, 2))
        b = np.zeros((2, 1, 2))
        a[0] = 1.0
        b[1] = 1.0
        assert metrics.sam(a, a) == pytest.approx(0.0)
        assert metrics.sam(a, b) == pytest.approx(90.0)

    def test_sam_skips_zero_pixels(self):
        a = np.ones((3, 2, 2))
        b = np.ones((3, 2, 2))
        a[:, 0, 0] = 0.0
        value, skipped = metrics.sam(a, b, return_skipped=True)
        assert value == pytest.approx(0.0, abs=1e-6) and skipped == 1

    def test_sam_all_zero_raises(self):
        with pytest.raises(ValueError):
            metrics.sam(np.zeros((2, 2, 2)), np.ones((2, 2, 2)))

    def test_ergas_zero_for_identical(self, pair):
        assert metrics.ergas(pair[1], pair[1]) == 0.0

    def test_uiqi_identical_is_one(self, pair):
        assert metrics.uiqi(pair[1][0], pair[1][0]) == pytest.approx(1.0)

    def test_uiqi_constant_blocks(self):
        a = np.full((4, 4), 0.5)
        assert metrics.uiqi(a, a) == pytest.approx(1.0)
        assert metrics.uiqi(a, np.full((4, 4), 0.25)) == pytest.approx(0.8)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            metrics.psnr(np.zeros((2, 4, 4)), np.zeros((2, 4, 5)))

    def test_ssim_window_too_large(self):
        with pytest.raises(ValueError):
            metrics.ssim(np.zeros((1, 8, 8)), np.zeros((1, 8, 8)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.01, 100.0), st.floats(0.01, 100.0))
def test_sam_scale_invariance(seed, a, b):
    rng = np.random.default_rng(seed)
    x, y = rng.random((4, 6, 6)) + 0.01, rng.random((4, 6, 6)) + 0.01
    assert metrics.sam(a * x, b * y) == pytest.approx(metrics.sam(x, y), abs=1e-8)


class TestQnr:
    @pytest.fixture
    def scene(self, rng):
        pat = SfaPattern.default(16)
        h = rng.random((16, 64, 64)) * 0.5 + 0.25
        return h, apply_mosaic(h, pat), apply_spectral(h, PAPER_SRF), pat

    @pytest.mark.parametrize("preblur", [False, True])
    def test_identity(self, scene, preblur):
        h, m, pan, pat = scene
        fused = np.clip(h + 0.02 * np.random.default_rng(3).standard_normal(h.shape), 0, 1)
        r = metrics.qnr_suite(fused, m, pan, pat, preblur=preblur)
        assert r.qnr == pytest.approx((1 - r.d_lambda) * (1 - r.d_s), abs=1e-15)
        assert 0 <= r.d_lambda <= 1 and 0 <= r.d_s <= 1

    def test_lr_cube_reassembly(self, scene):
        _, m, _, pat = scene
        lr = metrics.lr_cube_from_mosaic(m, pat)
        assert lr.shape == (16, 32, 32)
        for b in range(16):
            rows, cols = pat.sites(b)
            np.testing.assert_array_equal(lr[b, rows[0]::4, cols[0]::4], m[rows[0]::4, cols[0]::4])

    def test_blur_preserves_constants(self):
        np.testing.assert_allclose(metrics.gaussian_blur(np.full((9, 9), 0.3)), 0.3, atol=1e-15)
        k = metrics.gaussian_kernel(5, 1.0)
        assert k.sum() == pytest.approx(1.0) and k.shape == (5, 5)


class TestReport:
    def test_csv_and_json(self, pair):
        rep = metrics.MetricReport(meta={"seed": 1})
        rep.add("s0", "ours", metrics.full_reference(*pair))
        rep.add("s1", "ours", metrics.full_reference(pair[1], pair[1]))
        lines = rep.to_csv().strip().splitlines()
        assert lines[0] == "scene,method,psnr,ssim,sam,ergas"
        assert len(lines) == 3
        doc = json.loads(rep.to_json())
        assert doc["mean"]["ours"]["ergas"] == pytest.approx(rep.rows[0]["ergas"] / 2)
        again = metrics.MetricReport.from_json(rep.to_json())
        assert again.rows == rep.rows
