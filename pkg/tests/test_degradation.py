import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mosaicflow import tensor as T
from mosaicflow.degradation import (PAPER_SRF, Observation, SfaPattern, SpectralResponse,
                                    apply_mosaic, apply_spectral, expand_pan, highpass_pan,
                                    interpolate_mosaic, srf_for_bands)

PAT = SfaPattern.default(16)


@pytest.fixture
def cube(rng):
    return rng.random((16, 16, 16))


class TestSrf:
    def test_numerators_sum_to_107(self):
        assert round(PAPER_SRF.sum() * 107) == 107
        assert np.allclose(PAPER_SRF * 107, [1, 1, 2, 4, 8, 9, 10, 12, 16, 12, 10, 9, 7, 3, 2, 1])

    def test_exactly_normalised(self):
        assert math.fsum(PAPER_SRF) == 1.0
        assert abs(PAPER_SRF.sum() - 1.0) <= 2 * np.finfo(float).eps

    @pytest.mark.parametrize("bands", [2, 4, 8, 16, 24])
    def test_truncated_srf_normalised(self, bands):
        w = srf_for_bands(bands)
        assert w.shape == (bands,) and w.min() > 0
        assert w.sum() == pytest.approx(1.0, abs=1e-15)

    def test_response_weights(self):
        r = SpectralResponse.uniform(4)
        np.testing.assert_allclose(r.weights, 0.25)
        r = SpectralResponse(np.log(PAPER_SRF))
        np.testing.assert_allclose(r.weights, PAPER_SRF, rtol=1e-12)


class TestPattern:
    def test_physical_duplicates_cells(self):
        phys = PAT.physical()
        assert phys.shape == (8, 8)
        np.testing.assert_array_equal(phys[::2, ::2], PAT.array)
        np.testing.assert_array_equal(phys[1::2, 1::2], PAT.array)

    def test_each_pixel_one_band(self):
        mask = PAT.mask(16, 24)
        np.testing.assert_array_equal(mask.sum(axis=0), 1.0)

    def test_rejects_missing_band(self):
        with pytest.raises(ValueError):
            SfaPattern(tuple(tuple([0] * 4) for _ in range(4)), 2)

    def test_rejects_bad_shape(self):
        with pytest.raises(ValueError):
            SfaPattern(((0, 1), (1, 0)), 2)

    def test_modulo_default(self):
        p = SfaPattern.default(4)
        np.testing.assert_array_equal(p.array, np.arange(16).reshape(4, 4) % 4)

    def test_round_trip(self, tmp_path):
        PAT.save(tmp_path / "p.txt")
        assert SfaPattern.load(tmp_path / "p.txt") == PAT


class TestOperators:
    def test_mosaic_selects_band_per_site(self):
        cube = np.broadcast_to(np.arange(16.0)[:, None, None], (16, 16, 16))
        m = apply_mosaic(cube, PAT)
        np.testing.assert_array_equal(m, np.tile(PAT.array, (2, 2)).astype(float))

    def test_mosaic_is_pooled_masked_sum(self, cube):
        mask = PAT.mask(16, 16)
        ref = (mask * cube).sum(0).reshape(8, 2, 8, 2).mean(axis=(1, 3))
        np.testing.assert_allclose(apply_mosaic(cube, PAT), ref, atol=1e-15)

    def test_linearity(self, rng):
        a, b = rng.random((16, 16, 16)), rng.random((16, 16, 16))
        s, u = 1.7, -0.3
        np.testing.assert_allclose(apply_mosaic(s * a + u * b, PAT),
                                   s * apply_mosaic(a, PAT) + u * apply_mosaic(b, PAT), atol=1e-12)
        np.testing.assert_allclose(apply_spectral(s * a + u * b, PAPER_SRF),
                                   s * apply_spectral(a, PAPER_SRF) + u * apply_spectral(b, PAPER_SRF),
                                   atol=1e-12)

    def test_constants_preserved(self):
        c = np.full((16, 8, 8), 0.5)
        np.testing.assert_allclose(apply_mosaic(c, PAT), 0.5, atol=1e-15)
        np.testing.assert_allclose(apply_spectral(c, PAPER_SRF), 0.5, atol=1e-15)
        np.testing.assert_allclose(interpolate_mosaic(np.full((8, 8), 0.5), PAT), 0.5, atol=1e-15)

    def test_expand_then_spectral_recovers_pan(self, rng):
        pan = rng.random((16, 16))
        w = SpectralResponse(rng.standard_normal(16)).weights
        np.testing.assert_allclose(apply_spectral(expand_pan(pan, 16), w), pan, atol=1e-14)

    def test_interpolation_hits_samples(self, rng):
        m = rng.random((8, 8))
        interp = interpolate_mosaic(m, PAT)
        assert interp.shape == (16, 16, 16)
        for b in range(16):
            rows, cols = PAT.sites(b)
            for r in range(rows[0], 8, 4):
                for c in range(cols[0], 8, 4):
                    assert interp[b, 2 * r, 2 * c] == pytest.approx(m[r, c], abs=1e-14)

    def test_highpass(self, rng):
        pan = rng.random((8, 8))
        hp = highpass_pan(pan)
        i, j = 3, 4
        assert hp[i, j] == pytest.approx(pan[i - 1, j] + pan[i + 1, j] + pan[i, j - 1]
                                         + pan[i, j + 1] - 4 * pan[i, j])
        assert hp[0, 0] == pytest.approx(pan[1, 0] + pan[0, 1] - 4 * pan[0, 0])
        np.testing.assert_allclose(highpass_pan(np.ones((8, 8)))[1:-1, 1:-1], 0.0)


class TestErrors:
    def test_extent_not_divisible(self):
        with pytest.raises(T.ShapeError):
            apply_mosaic(np.zeros((16, 12, 16)), PAT)

    def test_band_mismatch(self):
        with pytest.raises(T.ShapeError):
            apply_mosaic(np.zeros((8, 16, 16)), PAT)
        with pytest.raises(T.ShapeError):
            apply_spectral(np.zeros((8, 16, 16)), PAPER_SRF)

    def test_observation_extents(self):
        with pytest.raises(T.ShapeError):
            Observation(np.zeros((8, 8)), np.zeros((15, 16)), PAT)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_spectral_convex_bound(seed):
    rng = np.random.default_rng(seed)
    cube = rng.standard_normal((16, 8, 8))
    w = SpectralResponse(rng.standard_normal(16) * 3).weights
    p = apply_spectral(cube, w)
    assert np.all(p >= cube.min(axis=0) - 1e-12)
    assert np.all(p <= cube.max(axis=0) + 1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_mosaic_within_band_range(seed):
    cube = np.random.default_rng(seed).random((16, 16, 16))
    m = apply_mosaic(cube, PAT)
    assert cube.min() - 1e-15 <= m.min() and m.max() <= cube.max() + 1e-15
