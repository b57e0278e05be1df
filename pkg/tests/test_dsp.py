import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mtse import dsp
from mtse.dsp import ComplexSpectrogram, StftParams, Waveform
from mtse.errors import ConfigurationError, DomainError, LengthError, ShapeError


def dft_oracle(frames: np.ndarray) -> np.ndarray:
    """Direct O(n^2) DFT of each row, non-negative bins only."""
    n = frames.shape[-1]
    k = np.arange(n // 2 + 1)[:, None]
    t = np.arange(n)[None, :]
    basis = np.exp(-2j * np.pi * k * t / n)
    return frames @ basis.T


def hann_periodic(n):
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


class TestStftParams:
    def test_defaults(self):
        p = StftParams()
        assert (p.fft_size, p.hop, p.window, p.bins) == (512, 256, "sqrt_hann", 257)

    @pytest.mark.parametrize("kw", [dict(fft_size=500), dict(hop=0), dict(hop=1024), dict(window="rect")])
    def test_invalid(self, kw):
        with pytest.raises(ConfigurationError):
            StftParams(**kw)

    def test_frame_count(self):
        assert StftParams(512, 256).n_frames(16000) == 1 + (16000 - 512) // 256

    def test_short_signal(self):
        with pytest.raises(LengthError):
            dsp.stft(torch.zeros(100), StftParams())


class TestWaveform:
    def test_rejects_nan(self):
        with pytest.raises(DomainError):
            Waveform(np.array([0.0, np.nan]))

    def test_rejects_rate(self):
        with pytest.raises(DomainError):
            Waveform(np.zeros(4), 0)

    def test_duration(self):
        assert Waveform(np.zeros(8000)).duration == 0.5


class TestStft:
    def test_dc_signal(self, f64):
        s = dsp.stft(torch.ones(8), StftParams(8, 4, "hann"))
        mag = torch.sqrt(s.power())[0]
        assert mag[0] > 1
        # periodic hann has non-zero only at bins 0 and 1
        assert torch.allclose(mag[2:], torch.zeros(3), atol=1e-12)

    def test_cosine_peak_matches_oracle(self, f64):
        n = 16
        x = np.cos(2 * np.pi * 2 * np.arange(n) / n)
        s = dsp.stft(torch.tensor(x), StftParams(n, n // 2, "hann"))
        ref = dft_oracle(x[None, :] * hann_periodic(n))
        got = (s.real + 1j * s.imag).numpy()
        assert np.allclose(got, ref, atol=1e-12)
        assert int(np.argmax(np.abs(got[0]))) == 2

    def test_random_frames_match_oracle(self, f64, rng):
        p = StftParams(64, 16, "sqrt_hann")
        x = rng.standard_normal(300)
        s = dsp.stft(torch.tensor(x), p)
        frames = np.stack([x[i * 16 : i * 16 + 64] for i in range(p.n_frames(300))])
        ref = dft_oracle(frames * np.sqrt(hann_periodic(64)))
        assert np.allclose((s.real + 1j * s.imag).numpy(), ref, atol=1e-10)

    def test_zero_signal(self):
        s = dsp.stft(torch.zeros(1024))
        assert torch.count_nonzero(s.real) == 0 and torch.count_nonzero(s.imag) == 0

    def test_batched_shape(self):
        s = dsp.stft(torch.zeros(3, 2, 1024))
        assert s.shape == (3, 2, 3, 257)

    def test_linearity(self, f64, rng):
        x, y = torch.tensor(rng.standard_normal(2048)), torch.tensor(rng.standard_normal(2048))
        a, b = 0.7, -1.3
        lhs = dsp.stft(a * x + b * y)
        sx, sy = dsp.stft(x), dsp.stft(y)
        assert torch.allclose(lhs.real, a * sx.real + b * sy.real, atol=1e-12)
        assert torch.allclose(lhs.imag, a * sx.imag + b * sy.imag, atol=1e-12)

    def test_parseval(self, f64, rng):
        p = StftParams(256, 128, "hann")
        x = torch.tensor(rng.standard_normal(2048))
        s = dsp.stft(x, p)
        frame_energy = (dsp.frame(x, p) * dsp.window(p)).pow(2).sum(-1)
        w = torch.ones(p.bins)
        w[1:-1] = 2.0
        spec_energy = (s.power() * w).sum(-1) / p.fft_size
        assert torch.allclose(spec_energy, frame_energy, rtol=1e-6)


class TestIstft:
    def _roundtrip_error(self, x, p):
        y = dsp.istft(dsp.stft(x, p))
        lo, hi = p.fft_size, y.shape[-1] - p.fft_size
        return float((y[lo:hi] - x[lo:hi]).norm() / x[lo:hi].norm())

    def test_roundtrip_64bit(self, f64, rng):
        x = torch.tensor(rng.standard_normal(16000))
        assert self._roundtrip_error(x, StftParams()) < 1e-6

    def test_roundtrip_32bit(self, rng):
        x = torch.tensor(rng.standard_normal(16000), dtype=torch.float32)
        assert self._roundtrip_error(x, StftParams()) < 1e-3

    @pytest.mark.parametrize("p", [StftParams(256, 64, "hann"), StftParams(512, 128, "sqrt_hann"),
                                   StftParams(128, 64, "sqrt_hann")])
    def test_roundtrip_other_cola_pairs(self, f64, rng, p):
        x = torch.tensor(rng.standard_normal(8 * p.fft_size))
        assert self._roundtrip_error(x, p) < 1e-6

    def test_zero_spectrogram(self):
        s = ComplexSpectrogram(torch.zeros(5, 257), torch.zeros(5, 257))
        assert torch.count_nonzero(dsp.istft(s)) == 0

    def test_cola_violation(self):
        s = ComplexSpectrogram(torch.zeros(5, 257), torch.zeros(5, 257), StftParams(512, 512, "hann"))
        with pytest.raises(ConfigurationError):
            dsp.istft(s)

    def test_params_mismatch(self):
        s = ComplexSpectrogram(torch.zeros(5, 257), torch.zeros(5, 257))
        with pytest.raises(ConfigurationError):
            dsp.istft(s, StftParams(512, 128))

    def test_cola_gains(self):
        assert dsp.cola_gain(StftParams(512, 256, "sqrt_hann")) == pytest.approx(1.0)
        assert dsp.cola_gain(StftParams(512, 128, "hann")) == pytest.approx(1.5)

    def test_length_argument(self, rng):
        s = dsp.stft(torch.tensor(rng.standard_normal(2048), dtype=torch.float32))
        assert dsp.istft(s, length=1000).shape[-1] == 1000
        assert dsp.istft(s, length=5000).shape[-1] == 5000


class TestMel:
    def test_htk_scale(self):
        assert dsp.hz_to_mel(700.0) == pytest.approx(2595 * math.log10(2))
        assert dsp.mel_to_hz(dsp.hz_to_mel(1234.5)) == pytest.approx(1234.5)

    def test_filterbank_shape_and_rows(self):
        fb = dsp.mel_filterbank(80, 512, 16000)
        assert fb.shape == (80, 257)
        assert np.all(fb.sum(1) > 0)
        assert fb.max() <= 1.0

    def test_adjacent_triangles_cross_at_half(self):
        # between the first and last centre the triangles form a partition of unity,
        # which is the 50 % crossover of every adjacent pair
        n_mels, fft, sr = 20, 512, 16000
        fb = dsp.mel_filterbank(n_mels, fft, sr)
        edges = dsp.mel_to_hz(np.linspace(0, dsp.hz_to_mel(sr / 2), n_mels + 2))
        freqs = np.arange(fft // 2 + 1) * sr / fft
        inside = (freqs >= edges[1]) & (freqs <= edges[-2])
        assert np.allclose(fb[:, inside].sum(0), 1.0, atol=1e-12)

    @pytest.mark.parametrize("n", [0, 257, 300])
    def test_band_count_bounds(self, n):
        with pytest.raises(ShapeError):
            dsp.mel_filterbank(n, 512, 16000)

    def test_zero_spectrogram_hits_floor(self):
        s = ComplexSpectrogram(torch.zeros(4, 257), torch.zeros(4, 257))
        m = dsp.log_mel(s, 80)
        assert torch.allclose(m.values, torch.full((4, 80), math.log(1e-10)))

    def test_impulse_support(self, f64):
        fb = dsp.mel_filterbank(40, 512, 16000)
        k = 37
        real = torch.zeros(1, 257)
        real[0, k] = 1.0
        m = dsp.log_mel(ComplexSpectrogram(real, torch.zeros_like(real)), 40)
        active = m.values[0] > math.log(1e-10) + 1e-9
        assert torch.equal(active, torch.tensor(fb[:, k] > 0))

    def test_frame_shift(self):
        s = dsp.stft(torch.zeros(1600), StftParams(512, 160, "hann"))
        assert dsp.log_mel(s).frame_shift == pytest.approx(0.01)

    @settings(max_examples=25, deadline=None)
    @given(alpha=st.floats(1.0, 50.0), seed=st.integers(0, 2**16))
    def test_monotone_in_gain(self, alpha, seed):
        x = torch.tensor(np.random.default_rng(seed).standard_normal(2048), dtype=torch.float64)
        p = StftParams(512, 160, "hann")
        lo = dsp.log_mel(dsp.stft(x, p)).values
        hi = dsp.log_mel(dsp.stft(alpha * x, p)).values
        assert torch.all(hi >= lo - 1e-9)


class TestStacking:
    def _m(self, frames, dims=80):
        return dsp.MelFeatures(torch.arange(frames * dims, dtype=torch.float64).reshape(frames, dims), 0.01)

    def test_identity(self):
        m = self._m(5)
        assert dsp.stack_frames(m, 1) is m

    def test_six_by_three(self):
        out = dsp.stack_frames(self._m(6), 3)
        assert out.values.shape == (2, 240)
        assert out.frame_shift == pytest.approx(0.03)
        assert torch.equal(out.values[1, :80], self._m(6).values[3])

    def test_tail_padding(self):
        m = self._m(7, 4)
        out = dsp.stack_frames(m, 3)
        assert out.values.shape == (3, 12)
        assert torch.equal(out.values[2, :4], m.values[6])
        assert torch.count_nonzero(out.values[2, 4:]) == 0

    def test_bad_factor(self):
        with pytest.raises(ConfigurationError):
            dsp.stack_frames(self._m(3), 0)


class TestMvn:
    def test_self_stats(self, f64, rng):
        m = dsp.MelFeatures(torch.tensor(rng.normal(3, 2, size=(50, 6))), 0.01)
        out = dsp.global_mvn(m, *dsp.mvn_stats(m.values))
        assert torch.allclose(out.values.mean(0), torch.zeros(6), atol=1e-12)
        assert torch.allclose(out.values.var(0, unbiased=False), torch.ones(6), atol=1e-12)

    def test_identity_stats(self, rng):
        m = dsp.MelFeatures(torch.tensor(rng.normal(size=(5, 3))), 0.01)
        assert torch.equal(dsp.global_mvn(m, torch.zeros(3), torch.ones(3)).values, m.values)

    def test_zero_variance(self):
        m = dsp.MelFeatures(torch.zeros(2, 3), 0.01)
        with pytest.raises(ConfigurationError):
            dsp.global_mvn(m, torch.zeros(3), torch.tensor([1.0, 0.0, 1.0]))

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            dsp.global_mvn(dsp.MelFeatures(torch.zeros(2, 3), 0.01), torch.zeros(4), torch.ones(4))

    def test_corpus_stats_on_held_out(self):
        from mtse import datasim

        p = StftParams(512, 160, "hann")
        noise_rng = np.random.default_rng(0)

        def features(tokens, seed):
            clean = datasim.synth_utterance(tokens, seed=seed)
            noise = Waveform(noise_rng.standard_normal(len(clean)))
            noisy, _ = datasim.mix_at_snr(clean, noise, 20.0)
            return dsp.stack_frames(dsp.log_mel(dsp.stft(noisy.tensor(torch.float64), p)), 3).values

        feats = [features([i % 10, (3 * i) % 10], i) for i in range(100)]
        mean, var = dsp.mvn_stats(torch.cat(feats))
        out = dsp.global_mvn(dsp.MelFeatures(features([4, 7, 1], 999), 0.03), mean, var)
        assert torch.all(torch.isfinite(out.values))
        assert float((out.values.abs() < 10).double().mean()) > 0.99


class TestWav:
    def test_roundtrip(self, tmp_path, rng):
        x = np.clip(rng.normal(0, 0.2, 1000), -1, 1)
        dsp.write_wav(tmp_path / "a.wav", Waveform(x))
        y = dsp.read_wav(tmp_path / "a.wav")
        assert y.sample_rate == 16000
        assert np.max(np.abs(y.samples - x)) <= 0.5 / 32768 + 1e-12

    def test_rate_mismatch(self, tmp_path):
        dsp.write_wav(tmp_path / "b.wav", Waveform(np.zeros(10), 8000))
        with pytest.raises(DomainError):
            dsp.read_wav(tmp_path / "b.wav")
