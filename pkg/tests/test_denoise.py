import numpy as np
import pytest

from opmicro import chsim
from opmicro.denoise import (KINDS, BlindSpotModel, DenoiseError, DenoiserSpec, SingularSystemError,
                             denoise_stack, fit_blind_spot, mask_offsets, tv_denoise)
from opmicro.fieldstore import FrameStack
from opmicro.imetrics import psnr
from opmicro.noisegen import NoiseSpec, add_impulse, corrupt, frame_rng


@pytest.fixture(scope="module")
def ch_frames():
    """Phase-separated 128x128 frames (50 steps apart, early ones dropped)."""
    p = chsim.ChParams(grid=(128, 128), n_frames=11, frame_stride=50)
    st = chsim.simulate(p, chsim.ground_truth_law(), chsim.initial_condition(p, 0))
    return FrameStack(st.gray()[4:])


def impulse_video(p, n_frames=30, n=64, seed=0):
    clean = np.full((n_frames, n, n), 0.5)
    noisy = np.stack([add_impulse(clean[t], p, frame_rng(seed, t, "impulse")) for t in range(n_frames)])
    return clean, FrameStack(noisy)


def impulse_median_mse(p, w):
    # exact MSE of a w-frame median on 0.5 with salt/pepper at rate p: wrong iff a majority shares one extreme
    from scipy.stats import binom

    return 2 * 0.25 * binom.sf(w // 2, w, p / 2)


@pytest.mark.parametrize("kind", KINDS)
def test_shape_and_finite(kind, ch_frames):
    out = denoise_stack(ch_frames, DenoiserSpec(kind), seed=0)
    assert out.data.shape == ch_frames.data.shape
    assert np.all(np.isfinite(out.data))


def test_identity_returns_input():
    st = FrameStack(np.random.default_rng(0).random((3, 8, 8)))
    assert denoise_stack(st, DenoiserSpec("identity")) is st


@pytest.mark.parametrize("kind", KINDS)
def test_zero_noise_bias_bound(kind, ch_frames):
    out = denoise_stack(ch_frames, DenoiserSpec(kind), seed=0)
    worst = min(psnr(a, b, 1.0) for a, b in zip(ch_frames.gray(), out.gray()))
    assert worst >= 40.0


def test_median_temporal_matches_majority_oracle():
    clean, noisy = impulse_video(0.2)
    out = denoise_stack(noisy, DenoiserSpec("median_temporal", {"window": 3}))
    # interior frames only: the edge-replicated ends see duplicated samples
    mse = np.mean((out.gray()[1:-1] - clean[1:-1]) ** 2)
    assert mse == pytest.approx(impulse_median_mse(0.2, 3), rel=0.05)
    gain = psnr(clean[1:-1], out.gray()[1:-1], 1.0) - psnr(clean, noisy.gray(), 1.0)
    expected = 10 * np.log10(0.25 * 0.2 / impulse_median_mse(0.2, 3))
    assert gain == pytest.approx(expected, abs=0.3)


def test_median_temporal_wider_window_gain():
    clean, noisy = impulse_video(0.2)
    out = denoise_stack(noisy, DenoiserSpec("median_temporal", {"window": 5}))
    gain = psnr(clean[2:-2], out.gray()[2:-2], 1.0) - psnr(clean, noisy.gray(), 1.0)
    assert gain >= 10.0


def test_tv_improves_noisy_ch_frame(ch_frames):
    clean = FrameStack(ch_frames.gray()[-1:])
    noisy = corrupt(clean, NoiseSpec("gaussian", 0.3), seed=0)
    out = denoise_stack(noisy, DenoiserSpec("total_variation", {"tv_weight": 0.08}))
    assert psnr(clean.gray(), out.gray(), 1.0) > psnr(clean.gray(), noisy.gray(), 1.0)


def test_tv_constant_fixed_point_and_weight_monotone():
    np.testing.assert_allclose(tv_denoise(np.full((16, 16), 0.3), 0.1), 0.3, atol=1e-12)
    f = np.random.default_rng(1).random((32, 32))
    tv = [np.abs(np.diff(tv_denoise(f, w, 100), axis=1)).sum() for w in (0.01, 0.05, 0.2)]
    assert tv[0] > tv[1] > tv[2]
    # the mean is preserved by the ROF dual update
    assert tv_denoise(f, 0.1).mean() == pytest.approx(f.mean(), abs=1e-12)


def test_mask_offsets():
    assert mask_offsets("point", 7) == {(0, 0)}
    assert mask_offsets("horizontal", 7) == {(0, d) for d in range(-3, 4)}


@pytest.fixture(scope="module")
def noisy_model(ch_frames):
    noisy = corrupt(ch_frames, NoiseSpec("gaussian", 0.3), seed=2)
    return noisy, fit_blind_spot(noisy, DenoiserSpec("blind_spot"), seed=0)


def test_horizontal_mask_weights_are_zero(noisy_model):
    _, model = noisy_model
    w = model.weight_map()
    r = model.patch_radius
    assert w.shape == (2 * r + 1, 2 * r + 1)
    assert np.all(w[r, r - 3: r + 4] == 0.0)
    assert np.count_nonzero(w) == w.size - 7
    assert len(model.offsets) == w.size - 7


def test_blind_spot_fuzz_invariance(noisy_model):
    noisy, model = noisy_model
    frame = noisy.gray()[0]
    base = model.predict(frame)
    rng = np.random.default_rng(7)
    H, W = frame.shape
    for _ in range(1000):
        i, j = int(rng.integers(H)), int(rng.integers(W))
        fuzzed = frame.copy()
        cols = np.arange(max(j - 3, 0), min(j + 4, W))
        fuzzed[i, cols] = rng.uniform(-10, 10, cols.size)
        assert model.predict(fuzzed)[i, j] == base[i, j]


def test_blind_spot_weights_sum_to_one_on_constant_plus_noise():
    rng = np.random.default_rng(3)
    st = FrameStack(0.5 + 0.05 * rng.standard_normal((4, 48, 48)))
    model = fit_blind_spot(st, DenoiserSpec("blind_spot"), seed=0)
    assert model.weights.sum() == pytest.approx(1.0, abs=0.02)


def test_blind_spot_denoises_and_is_deterministic(noisy_model, ch_frames):
    noisy, model = noisy_model
    spec = DenoiserSpec("blind_spot")
    a = denoise_stack(noisy, spec, seed=0)
    b = denoise_stack(noisy, spec, seed=0)
    np.testing.assert_array_equal(a.data, b.data)
    assert psnr(ch_frames.gray(), a.gray(), 1.0) > psnr(ch_frames.gray(), noisy.gray(), 1.0) + 3
    assert isinstance(model, BlindSpotModel) and model.to_dict()["mask_width"] == 7


def test_singular_system_raises():
    st = FrameStack(np.zeros((2, 24, 24)))
    with pytest.raises(SingularSystemError):
        fit_blind_spot(st, DenoiserSpec("blind_spot", {"ridge_lambda": 0.0}), seed=0)


@pytest.mark.parametrize("kind,params", [("wavelet", {}), ("median_spatial", {"size": 4}),
                                         ("gaussian_blur", {"blur_sigma": 0.0}),
                                         ("total_variation", {"radius": 1}),
                                         ("blind_spot", {"mask_width": 9, "patch_radius": 3}),
                                         ("blind_spot", {"mask_shape": "cross"}),
                                         ("blind_spot", {"ridge_lambda": -1.0})])
def test_spec_validation(kind, params):
    with pytest.raises(DenoiseError):
        DenoiserSpec(kind, params)


def test_metadata_records_denoiser(ch_frames):
    out = denoise_stack(ch_frames, DenoiserSpec("gaussian_blur"), seed=4)
    assert out.meta["denoiser"]["kind"] == "gaussian_blur" and out.meta["denoise_seed"] == 4
