import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as hst
from skimage.metrics import structural_similarity

from opmicro.fieldstore import FrameStack, ScalarField
from opmicro.imetrics import autocorr2d, mse, psnr, ssim, stack_metrics


def test_mse_examples():
    a = np.random.default_rng(0).random((8, 8))
    assert mse(a, a) == 0.0
    assert mse(a, a + 0.1) == pytest.approx(0.01)
    assert mse(np.zeros((4, 4)), np.ones((4, 4))) == 1.0
    with pytest.raises(ValueError):
        mse(np.zeros((2, 2)), np.zeros((3, 3)))


def test_psnr_examples():
    a = np.zeros((10, 10))
    assert psnr(a, a + 0.1, 1.0) == pytest.approx(20.0, abs=1e-12)
    assert psnr(a, a, 1.0) == float("inf")
    rng = np.random.default_rng(1)
    n = rng.standard_normal((10, 10)) * 0.1
    assert psnr(a, a + n / 2, 1.0) - psnr(a, a + n, 1.0) == pytest.approx(20 * np.log10(2), abs=1e-10)
    with pytest.raises(ValueError):
        psnr(a, a, 0.0)


def test_psnr_uses_declared_range():
    a = ScalarField(np.zeros((4, 4)), value_range=(0, 2))
    b = ScalarField(np.full((4, 4), 0.2))
    assert psnr(a, b) == pytest.approx(10 * np.log10(4 / 0.04))


def test_psnr_decreases_with_mse():
    a = np.zeros((8, 8))
    vals = [psnr(a, a + e, 1.0) for e in (0.01, 0.02, 0.05, 0.1)]
    assert all(x > y for x, y in zip(vals, vals[1:]))


def test_ssim_identical_and_constant_pair():
    a = np.random.default_rng(2).random((32, 32))
    assert ssim(a, a, 1.0) == pytest.approx(1.0, abs=1e-12)
    c1 = 0.01**2
    assert ssim(np.zeros((16, 16)), np.ones((16, 16)), 1.0) == pytest.approx(c1 / (1 + c1), rel=1e-9)
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)), 1.0)


def test_ssim_matches_reference_implementation():
    rng = np.random.default_rng(3)
    a = rng.random((48, 40))
    b = np.clip(a + 0.2 * rng.standard_normal(a.shape), 0, 1)
    ref = structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                use_sample_covariance=False)
    assert ssim(a, b, 1.0) == pytest.approx(ref, abs=1e-10)


@settings(max_examples=25, deadline=None)
@given(hst.integers(0, 10**6))
def test_ssim_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((16, 16)), rng.random((16, 16))
    s = ssim(a, b, 1.0)
    assert s == ssim(b, a, 1.0)
    assert -1.0 <= s <= 1.0


def test_autocorr_white_noise():
    x = np.random.default_rng(4).standard_normal((128, 128))
    r = autocorr2d(x)
    c = (127, 127)
    assert r[c] == 1.0
    assert abs(r[c[0], c[1] + 1]) < 3 / 128 and abs(r[c[0] + 1, c[1]]) < 3 / 128


def test_autocorr_horizontal_streaks():
    rows = np.random.default_rng(5).standard_normal(64)
    x = np.repeat(rows[:, None], 48, axis=1)
    r = autocorr2d(x)
    cy, cx = 63, 47
    np.testing.assert_allclose(r[cy, cx:cx + 20], 1.0, atol=1e-10)
    assert abs(r[cy + 1, cx]) < 0.4


def test_autocorr_even_and_rejects_constant():
    x = np.random.default_rng(6).random((9, 13))
    r = autocorr2d(x)
    np.testing.assert_array_equal(r, r[::-1, ::-1])
    with pytest.raises(ValueError):
        autocorr2d(np.ones((5, 5)))


def test_stack_metrics_shapes():
    rng = np.random.default_rng(7)
    ref = FrameStack(rng.random((5, 16, 16)), value_range=(0, 1))
    test = ref.replace(data=np.clip(ref.data + 0.05 * rng.standard_normal(ref.data.shape), 0, 1))
    m = stack_metrics(ref, test)
    assert len(m["psnr_per_frame"]) == 5 and len(m["ssim_per_frame"]) == 5
    assert m["data_range"] == 1.0
    assert np.isfinite(m["psnr_concatenated"])
    assert stack_metrics(ref, ref)["psnr_concatenated"] == float("inf")
