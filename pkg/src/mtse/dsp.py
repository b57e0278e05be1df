"""Framing, STFT/ISTFT, log-mel features and WAV I/O.

Every transform operates on torch tensors with arbitrary leading batch
dimensions so that the same code path serves feature extraction inside a
differentiable graph and plain offline processing.
"""

from __future__ import annotations

import math
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigurationError, DomainError, LengthError, ShapeError

CANONICAL_RATE = 16000
LOG_FLOOR = 1e-10
WINDOWS = ("hann", "sqrt_hann")


@dataclass(frozen=True)
class StftParams:
    fft_size: int = 512
    hop: int = 256
    window: str = "sqrt_hann"

    def __post_init__(self):
        if self.fft_size <= 0 or self.fft_size & (self.fft_size - 1):
            raise ConfigurationError(f"fft_size must be a power of two, got {self.fft_size}")
        if not 0 < self.hop <= self.fft_size:
            raise ConfigurationError(f"hop must lie in (0, fft_size], got {self.hop}")
        if self.window not in WINDOWS:
            raise ConfigurationError(f"unknown window {self.window!r}")

    @property
    def bins(self) -> int:
        return self.fft_size // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.fft_size:
            raise LengthError(f"signal of {n_samples} samples is shorter than one frame ({self.fft_size})")
        return 1 + (n_samples - self.fft_size) // self.hop


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = CANONICAL_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.sample_rate <= 0:
            raise DomainError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise DomainError("waveform contains non-finite samples")

    def __len__(self):
        return self.samples.shape[-1]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def tensor(self, dtype=None) -> torch.Tensor:
        return torch.as_tensor(self.samples, dtype=dtype or torch.get_default_dtype())


@dataclass
class ComplexSpectrogram:
    """Real and imaginary planes shaped ``(..., frames, bins)``."""

    real: torch.Tensor
    imag: torch.Tensor
    params: StftParams = field(default_factory=StftParams)
    sample_rate: int = CANONICAL_RATE

    def __post_init__(self):
        if self.real.shape != self.imag.shape:
            raise ShapeError(f"real {tuple(self.real.shape)} vs imag {tuple(self.imag.shape)}")
        if self.real.shape[-1] != self.params.bins:
            raise ShapeError(f"expected {self.params.bins} bins, got {self.real.shape[-1]}")

    @property
    def shape(self):
        return self.real.shape

    @property
    def n_frames(self) -> int:
        return self.real.shape[-2]

    def power(self) -> torch.Tensor:
        return self.real**2 + self.imag**2

    def with_planes(self, real: torch.Tensor, imag: torch.Tensor) -> "ComplexSpectrogram":
        return ComplexSpectrogram(real, imag, self.params, self.sample_rate)


@dataclass
class MelFeatures:
    values: torch.Tensor  # (..., frames, dims)
    frame_shift: float

    @property
    def dims(self) -> int:
        return self.values.shape[-1]

    @property
    def n_frames(self) -> int:
        return self.values.shape[-2]


def window(params: StftParams, dtype=None, device=None) -> torch.Tensor:
    # periodic hann so that shifted copies sum to a constant
    w = torch.hann_window(params.fft_size, periodic=True, dtype=dtype or torch.get_default_dtype(), device=device)
    if params.window == "sqrt_hann":
        w = w.sqrt()
    return w


def cola_gain(params: StftParams) -> float:
    """Constant value of the overlapped squared window, or raise if it is not constant."""
    w2 = window(params, dtype=torch.float64).numpy() ** 2
    n_shift = 2 * math.ceil(params.fft_size / params.hop) + 1
    total = np.zeros(params.hop * (n_shift - 1) + params.fft_size)
    for k in range(n_shift):
        total[k * params.hop : k * params.hop + params.fft_size] += w2
    # one hop-long stretch where every overlapping frame is present
    steady = total[params.fft_size : params.fft_size + params.hop]
    gain = float(steady.mean())
    if gain <= 0 or np.max(np.abs(steady - gain)) > 1e-9 * max(gain, 1.0):
        raise ConfigurationError(
            f"window {params.window!r} with hop {params.hop}/{params.fft_size} violates constant overlap-add"
        )
    return gain


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, Waveform):
        return x.tensor()
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x), dtype=torch.get_default_dtype())


def frame(x: torch.Tensor, params: StftParams) -> torch.Tensor:
    """Slice ``(..., n)`` into ``(..., frames, fft_size)`` without padding."""
    params.n_frames(x.shape[-1])
    return x.unfold(-1, params.fft_size, params.hop)


def stft(x, params: StftParams = StftParams(), sample_rate: int | None = None) -> ComplexSpectrogram:
    if sample_rate is None:
        sample_rate = x.sample_rate if isinstance(x, Waveform) else CANONICAL_RATE
    x = _as_tensor(x)
    frames = frame(x, params) * window(params, x.dtype, x.device)
    spec = torch.fft.rfft(frames, dim=-1)
    return ComplexSpectrogram(spec.real, spec.imag, params, sample_rate)


def istft(spec: ComplexSpectrogram, params: StftParams | None = None, length: int | None = None) -> torch.Tensor:
    """Weighted overlap-add synthesis; returns ``(..., (frames-1)*hop + fft_size)`` samples."""
    if params is not None and params != spec.params:
        raise ConfigurationError(f"spectrogram params {spec.params} do not match {params}")
    params = spec.params
    gain = cola_gain(params)
    z = torch.complex(spec.real, spec.imag)
    frames = torch.fft.irfft(z, n=params.fft_size, dim=-1)
    frames = frames * window(params, frames.dtype, frames.device)
    lead = frames.shape[:-2]
    n_frames = frames.shape[-2]
    out_len = (n_frames - 1) * params.hop + params.fft_size
    cols = frames.reshape(-1, n_frames, params.fft_size).transpose(1, 2)
    y = F.fold(cols, output_size=(1, out_len), kernel_size=(1, params.fft_size), stride=(1, params.hop))
    y = y.reshape(*lead, out_len) / gain
    if length is not None:
        y = y[..., :length] if length <= out_len else F.pad(y, (0, length - out_len))
    return y


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, fft_size: int, sample_rate: int, fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """HTK-scale triangular filters, peak 1, shape ``(n_mels, fft_size//2 + 1)``."""
    bins = fft_size // 2 + 1
    if not 1 <= n_mels < bins:
        raise ShapeError(f"n_mels must lie in [1, {bins}), got {n_mels}")
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(bins) * sample_rate / fft_size
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def log_mel(spec: ComplexSpectrogram, n_mels: int = 80) -> MelFeatures:
    fb = mel_filterbank(n_mels, spec.params.fft_size, spec.sample_rate)
    fb = torch.as_tensor(fb, dtype=spec.real.dtype, device=spec.real.device)
    energy = spec.power() @ fb.T
    values = torch.log(torch.clamp(energy, min=LOG_FLOOR))
    return MelFeatures(values, spec.params.hop / spec.sample_rate)


def stack_frames(m: MelFeatures, factor: int) -> MelFeatures:
    if factor < 1:
        raise ConfigurationError("stack factor must be >= 1")
    if factor == 1:
        return m
    v = m.values
    n = v.shape[-2]
    pad = -n % factor
    v = F.pad(v, (0, 0, 0, pad))
    v = v.reshape(*v.shape[:-2], (n + pad) // factor, factor * v.shape[-1])
    return MelFeatures(v, m.frame_shift * factor)


def mvn_stats(values: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-dimension mean and (biased) variance over every leading axis."""
    flat = values.reshape(-1, values.shape[-1])
    return flat.mean(0), flat.var(0, unbiased=False)


def global_mvn(m: MelFeatures, mean: torch.Tensor, variance: torch.Tensor) -> MelFeatures:
    mean = torch.as_tensor(mean, dtype=m.values.dtype)
    variance = torch.as_tensor(variance, dtype=m.values.dtype)
    if mean.shape[-1] != m.dims or variance.shape[-1] != m.dims:
        raise ShapeError(f"stats have {mean.shape[-1]} dims, features have {m.dims}")
    if torch.any(variance <= 0):
        raise ConfigurationError("variance entries must be strictly positive")
    return MelFeatures((m.values - mean) / torch.sqrt(variance), m.frame_shift)


def read_wav(path, expected_rate: int | None = CANONICAL_RATE) -> Waveform:
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1 or f.getsampwidth() != 2:
            raise DomainError(f"{path}: only 16-bit mono PCM is supported")
        rate = f.getframerate()
        data = f.readframes(f.getnframes())
    if expected_rate is not None and rate != expected_rate:
        raise DomainError(f"{path}: sample rate {rate} != {expected_rate} (resampling not supported)")
    pcm = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(pcm, rate)


def to_pcm16(samples) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64)
    return np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")


def write_wav(path, w: Waveform) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate)
        f.writeframes(to_pcm16(w.samples).tobytes())
