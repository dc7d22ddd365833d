import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from skimage.metrics import structural_similarity

from oracles import naive_psnr
from pconvnet.errors import ContractError, DimensionError
from pconvnet.metrics import MetricReport, dice, format_value, psnr, ssim


@pytest.fixture
def texture(rng):
    from scipy import ndimage
    return np.clip(ndimage.gaussian_filter(rng.random((48, 48)), 2) * 3 - 1, 0, 1)


class TestPSNR:
    def test_identical_is_infinite(self, rng):
        a = rng.random((8, 8))
        assert psnr(a, a) == math.inf

    def test_uniform_error(self, rng):
        a = rng.random((16, 16))
        assert abs(psnr(a, a + 0.1) - 20.0) < 1e-6

    def test_more_noise_is_worse(self, rng):
        a = rng.random((32, 32))
        n = rng.standard_normal(a.shape)
        assert psnr(a, a + 0.01 * n) > psnr(a, a + 0.05 * n)

    @given(st.integers(0, 2**16))
    def test_region_equals_extracted_pixels(self, seed):
        r = np.random.default_rng(seed)
        a, b = r.random((6, 7)), r.random((6, 7))
        region = r.random((6, 7)) < 0.5
        region[0, 0] = True
        assert psnr(a, b, 1.0, region) == pytest.approx(psnr(a[region], b[region]), rel=1e-12)
        assert psnr(a, b, 1.0, region) == pytest.approx(naive_psnr(a, b, 1.0, region), rel=1e-12)

    def test_symmetric(self, rng):
        a, b = rng.random((5, 5)), rng.random((5, 5))
        assert psnr(a, b) == psnr(b, a)

    def test_empty_region(self, rng):
        with pytest.raises(ContractError):
            psnr(rng.random((3, 3)), rng.random((3, 3)), 1.0, np.zeros((3, 3)))


class TestSSIM:
    def test_self_similarity(self, texture):
        assert abs(ssim(texture, texture) - 1.0) < 1e-9

    def test_constant_images_reduce_to_luminance(self):
        c1, c2 = 0.3, 0.7
        k = (0.01 * 1.0) ** 2
        expected = (2 * c1 * c2 + k) / (c1 * c1 + c2 * c2 + k)
        assert ssim(np.full((16, 16), c1), np.full((16, 16), c2)) == pytest.approx(expected,
                                                                                   rel=1e-9)

    def test_matches_scikit_image(self, texture, rng):
        noisy = np.clip(texture + 0.05 * rng.standard_normal(texture.shape), 0, 1)
        ref = structural_similarity(texture, noisy, data_range=1.0, gaussian_weights=True,
                                    sigma=1.5, use_sample_covariance=False)
        assert ssim(texture, noisy) == pytest.approx(ref, abs=1e-9)

    def test_decreases_with_noise(self, texture, rng):
        n = rng.standard_normal(texture.shape)
        assert 1 > ssim(texture, texture + 0.02 * n) > ssim(texture, texture + 0.1 * n)

    def test_structure_sensitivity(self, texture, rng):
        c = 0.05
        n = rng.standard_normal(texture.shape)
        n *= c / np.sqrt((n * n).mean())
        assert ssim(texture, texture + c) > ssim(texture, texture + n)

    def test_symmetric(self, texture, rng):
        b = texture + 0.05 * rng.standard_normal(texture.shape)
        assert ssim(texture, b) == pytest.approx(ssim(b, texture), abs=1e-12)

    def test_region_uses_windows_inside(self, texture, rng):
        b = texture.copy()
        b[:20] = rng.random((20, 48))
        region = np.zeros(texture.shape)
        region[24:, :] = 1
        assert ssim(texture, b, region=region) == pytest.approx(1.0, abs=1e-12)

    def test_too_small(self):
        with pytest.raises(DimensionError):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))


class TestDice:
    def test_half_overlap(self):
        a = np.zeros((4, 4), int)
        b = np.zeros((4, 4), int)
        a[0, :4] = 1
        b[0, 2:4] = 1
        b[1, :2] = 1
        assert dice(a, b) == 0.5

    def test_identical_and_disjoint(self):
        a = np.eye(4, dtype=int)
        assert dice(a, a) == 1.0
        assert dice(a, 1 - a) == 0.0

    def test_both_empty_convention(self, caplog):
        with caplog.at_level("INFO"):
            assert dice(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0
        assert "absent" in caplog.text

    def test_exclusion(self):
        a = np.array([[1, 1], [0, 0]])
        b = np.array([[1, 0], [0, 0]])
        assert dice(a, b, exclusion=np.array([[0, 1], [0, 0]])) == 1.0

    @given(st.integers(0, 2**16), st.integers(0, 3))
    def test_symmetric(self, seed, label):
        r = np.random.default_rng(seed)
        a, b = r.integers(0, 4, (5, 5)), r.integers(0, 4, (5, 5))
        assert dice(a, b, label) == dice(b, a, label)


class TestReport:
    def test_infinite_value_serializes(self):
        line = MetricReport("s1", "psnr", "hole", math.inf).line()
        assert line == "s1\tpsnr\thole\tinf"
        assert MetricReport.parse(line).value == math.inf

    def test_format(self):
        assert format_value(20.0) == "20"
        assert format_value(float("nan")) == "nan"
