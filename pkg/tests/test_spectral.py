import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffusese.spectral import (
    AmplitudeTransform,
    StftConfig,
    flatten,
    istft,
    read_wav,
    stft,
    unflatten,
    wiener_postfilter,
    write_wav,
)

CFG = StftConfig()


class TestStft:
    def test_default_config_bins(self):
        assert CFG.n_freq == 256

    def test_zero_signal(self):
        X = stft(np.zeros(16000), CFG)
        assert X.shape == (256, CFG.n_frames(16000))
        assert not np.any(X)

    def test_too_short_rejected(self):
        with pytest.raises(ValueError, match="short"):
            stft(np.zeros(100), CFG)

    def test_bin_centred_sinusoid(self):
        k0 = 40
        n = np.arange(16000)
        X = stft(np.cos(2 * np.pi * k0 * n / CFG.window_len), CFG)
        frame = X[:, X.shape[1] // 2]
        # reference DFT of one windowed frame, straight from the definition
        seg = np.cos(2 * np.pi * k0 * np.arange(CFG.window_len) / CFG.window_len) * CFG.window_array()
        k = np.arange(CFG.n_freq)[:, None]
        ref = np.exp(-2j * np.pi * k * np.arange(CFG.window_len) / CFG.window_len) @ seg
        assert np.argmax(np.abs(frame)) == k0
        assert np.allclose(np.abs(frame), np.abs(ref), atol=1e-9 * np.abs(ref).max())
        # Hann main lobe spans k0 +- 1; everything beyond must be 40 dB down
        off = np.delete(np.abs(frame), [k0 - 1, k0, k0 + 1])
        assert 20 * np.log10(off.max() / np.abs(frame[k0])) < -40

    def test_linearity(self, rng):
        x, y = rng.standard_normal((2, 4000))
        lhs = stft(2.5 * x - 0.7 * y, CFG)
        assert np.allclose(lhs, 2.5 * stft(x, CFG) - 0.7 * stft(y, CFG), atol=1e-12)


class TestIstft:
    @pytest.mark.parametrize("n", [16000, 16077, 510])
    def test_round_trip(self, rng, n):
        x = rng.standard_normal(n)
        assert np.max(np.abs(istft(stft(x, CFG), CFG, n) - x)) < 1e-6

    def test_zero_spectrogram(self):
        assert not np.any(istft(np.zeros((256, 20), complex), CFG, 2432))

    def test_linearity(self, rng):
        X = stft(rng.standard_normal(3000), CFG)
        assert np.allclose(istft(-3.0 * X, CFG, 3000), -3.0 * istft(X, CFG, 3000))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            istft(np.zeros((100, 10), complex), CFG, 1000)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(min_value=510, max_value=3000), st.integers(0, 2**31 - 1))
    def test_round_trip_any_length(self, n, seed):
        x = np.random.default_rng(seed).standard_normal(n)
        assert np.max(np.abs(istft(stft(x, CFG), CFG, n) - x)) < 1e-6


class TestConfig:
    def test_hop_longer_than_window(self):
        with pytest.raises(ValueError):
            StftConfig(window_len=64, hop=128)

    def test_flatten_round_trip(self, rng):
        X = rng.standard_normal((5, 7)) + 1j * rng.standard_normal((5, 7))
        v = flatten(X)
        assert v.shape == (35,)
        assert np.array_equal(unflatten(v, 5, 7), X)

    def test_transform_inverse(self, rng):
        X = rng.standard_normal((6, 4)) + 1j * rng.standard_normal((6, 4))
        tr = AmplitudeTransform(0.5, 0.15)
        assert np.allclose(tr.inverse(tr.forward(X)), X)
        assert np.array_equal(AmplitudeTransform().forward(X), X)


class TestWiener:
    def test_degenerate_split(self, rng):
        x = rng.standard_normal((3, 4)) + 1j * rng.standard_normal((3, 4))
        s, n = wiener_postfilter(x, np.zeros_like(x), x)
        assert np.allclose(s, x) and not np.any(n)

    def test_scalar_example(self):
        s, n = wiener_postfilter(np.array([3.0]), np.array([4.0]), np.array([10.0]))
        assert np.allclose(s, 6.0) and np.allclose(n, 8.0)

    def test_silent_bins(self):
        s, n = wiener_postfilter(np.zeros(2), np.zeros(2), np.array([1 + 1j, 2.0]))
        assert np.array_equal(s, [1 + 1j, 2.0]) and not np.any(n)

    def test_energy_identity_and_phase(self, rng):
        shape = (64, 30)
        s0, n0, x = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape) for _ in range(3))
        s, n = wiener_postfilter(s0, n0, x)
        err = np.abs(np.abs(s) ** 2 + np.abs(n) ** 2 - np.abs(x) ** 2) / np.abs(x) ** 2
        assert err.max() < 1e-9
        assert np.allclose(np.angle(s), np.angle(s0)) and np.allclose(np.angle(n), np.angle(n0))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            wiener_postfilter(np.zeros(2), np.zeros(3), np.zeros(2))


class TestWav:
    def test_float_round_trip_and_clipping(self, tmp_path):
        x = np.array([0.0, 0.5, -0.25, 1.5, -2.0])
        assert write_wav(tmp_path / "a.wav", x) == 2
        y, rate = read_wav(tmp_path / "a.wav")
        assert rate == 16000
        assert np.allclose(y, np.clip(x, -1, 1))

    def test_pcm16_accepted(self, tmp_path):
        from scipy.io import wavfile

        wavfile.write(tmp_path / "p.wav", 16000, np.array([0, 16384, -32768], dtype=np.int16))
        y, _ = read_wav(tmp_path / "p.wav")
        assert np.allclose(y, [0.0, 0.5, -1.0])

    def test_wrong_rate_rejected(self, tmp_path):
        write_wav(tmp_path / "r.wav", np.zeros(10), rate=8000)
        with pytest.raises(ValueError, match="8000"):
            read_wav(tmp_path / "r.wav")
