"""DCCRN-style complex-masking enhancer.

The network maps the real/imag planes of a noisy spectrogram to a complex
ratio mask through a complex conv encoder, a complex LSTM bottleneck and a
mirrored transposed-conv decoder with concatenated skips. The mask is
applied by complex multiplication and the result is resynthesized.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import autodiff, config, dsp
from .cnn import (
    ComplexBatchNorm,
    ComplexConv2d,
    ComplexConvTranspose2d,
    ComplexLinear,
    ComplexLSTM,
    ComplexTensor,
    leaky,
    reset_seeded,
)
from .dsp import ComplexSpectrogram, StftParams, Waveform
from .errors import ConfigurationError, ShapeError

CRM_FLOOR = 1e-10
MASK_ACTIVATIONS = ("tanh_bounded", "unbounded")


@dataclass
class SeModelConfig:
    """Enhancer hyper-parameters.

    Channel counts and ``lstm_hidden`` follow the DCCRN convention of
    counting real and imaginary halves together, so ``encoder_channels =
    (16, 32, 64)`` means 8, 16 and 32 complex channels.
    """

    encoder_channels: tuple[int, ...] = (16, 32, 64)
    kernel: tuple[int, ...] = (5, 2)
    stride: tuple[int, ...] = (2, 1)
    lstm_hidden: int = 128
    lstm_layers: int = 2
    causal: bool = True
    mask_activation: str = "tanh_bounded"
    architecture: str = "dccrn"
    fft_size: int = 512
    hop: int = 256
    window: str = "sqrt_hann"

    def __post_init__(self):
        self.encoder_channels = tuple(self.encoder_channels)
        self.kernel = tuple(self.kernel)
        self.stride = tuple(self.stride)
        if not self.encoder_channels or any(c <= 0 or c % 2 for c in self.encoder_channels):
            raise ConfigurationError(f"encoder_channels must be positive even counts, got {self.encoder_channels}")
        if len(self.kernel) != 2 or len(self.stride) != 2 or self.stride[1] != 1:
            raise ConfigurationError("kernel/stride are (freq, time) pairs with time stride 1")
        if self.lstm_hidden % 2 or self.lstm_hidden <= 0:
            raise ConfigurationError("lstm_hidden must be a positive even count")
        if self.mask_activation not in MASK_ACTIVATIONS:
            raise ConfigurationError(f"mask_activation must be one of {MASK_ACTIVATIONS}")
        if self.architecture not in ("dccrn", "dcunet"):
            raise ConfigurationError(f"unknown architecture {self.architecture!r}")

    @property
    def stft_params(self) -> StftParams:
        return StftParams(self.fft_size, self.hop, self.window)

    @property
    def padding_mode(self) -> str:
        return "causal_time" if self.causal else "same"

    def freq_sizes(self) -> list[int]:
        sizes = [self.fft_size // 2 + 1]
        pad = (self.kernel[0] - 1) // 2
        for _ in self.encoder_channels:
            sizes.append((sizes[-1] + 2 * pad - self.kernel[0]) // self.stride[0] + 1)
        return sizes


@dataclass
class CRMask:
    real: torch.Tensor
    imag: torch.Tensor

    def __post_init__(self):
        if self.real.shape != self.imag.shape:
            raise ShapeError("mask planes differ in shape")

    @property
    def shape(self):
        return self.real.shape

    def magnitude(self) -> torch.Tensor:
        return torch.sqrt(self.real**2 + self.imag**2)


class SeModel(nn.Module):
    def __init__(self, cfg: SeModelConfig):
        super().__init__()
        self.cfg = cfg
        mode = cfg.padding_mode
        parts = [c // 2 for c in cfg.encoder_channels]
        ins = [1] + parts[:-1]
        sizes = cfg.freq_sizes()
        if sizes[-1] < 1:
            raise ConfigurationError("encoder reduces frequency axis below one bin")

        self.encoder = nn.ModuleList()
        for cin, cout in zip(ins, parts):
            block = nn.Module()
            block.conv = ComplexConv2d(cin, cout, cfg.kernel, cfg.stride, mode)
            block.norm = ComplexBatchNorm(cout)
            self.encoder.append(block)

        self.rnn = nn.ModuleList()
        self.project = None
        if cfg.architecture == "dccrn":
            width = parts[-1] * sizes[-1]
            hidden = cfg.lstm_hidden // 2
            bidir = not cfg.causal
            d = width
            for _ in range(cfg.lstm_layers):
                layer = ComplexLSTM(d, hidden, bidirectional=bidir)
                self.rnn.append(layer)
                d = layer.output_size
            self.project = ComplexLinear(d, width)

        self.decoder = nn.ModuleList()
        n = len(parts)
        for i in reversed(range(n)):
            block = nn.Module()
            out_pad = sizes[i] - ((sizes[i + 1] - 1) * cfg.stride[0] - 2 * ((cfg.kernel[0] - 1) // 2) + cfg.kernel[0])
            block.conv = ComplexConvTranspose2d(2 * parts[i], ins[i], cfg.kernel, cfg.stride, mode, output_padding=out_pad)
            if i > 0:
                block.norm = ComplexBatchNorm(ins[i])
            self.decoder.append(block)

    def reset_parameters(self, seed: int) -> None:
        reset_seeded(self, torch.Generator().manual_seed(int(seed)))

    def forward(self, real: torch.Tensor, imag: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """``(B, frames, bins)`` planes in, raw (pre-activation) mask planes out."""
        x = ComplexTensor(real.transpose(-1, -2).unsqueeze(1), imag.transpose(-1, -2).unsqueeze(1))
        skips = []
        for block in self.encoder:
            x = leaky(block.norm(block.conv(x)))
            skips.append(x)
        if self.project is not None:
            B, C, Fb, T = x.real.shape
            h = ComplexTensor(x.real.permute(0, 3, 1, 2).reshape(B, T, C * Fb),
                              x.imag.permute(0, 3, 1, 2).reshape(B, T, C * Fb))
            for layer in self.rnn:
                h = layer(h)
            h = self.project(h)
            x = ComplexTensor(h.real.reshape(B, T, C, Fb).permute(0, 2, 3, 1),
                              h.imag.reshape(B, T, C, Fb).permute(0, 2, 3, 1))
        for block, skip in zip(self.decoder, reversed(skips)):
            x = block.conv(x.cat(skip, 1))
            if hasattr(block, "norm"):
                x = leaky(block.norm(x))
        return x.real[:, 0].transpose(-1, -2), x.imag[:, 0].transpose(-1, -2)


def build_se_model(cfg: SeModelConfig | None = None, seed: int = 0) -> SeModel:
    model = SeModel(cfg or SeModelConfig())
    model.reset_parameters(seed)
    return model


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def _bound(mr: torch.Tensor, mi: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    # tanh on the magnitude, phase direction kept; tanh(m)/m -> 1 as m -> 0
    mag = torch.sqrt(mr**2 + mi**2 + 1e-12)
    scale = torch.tanh(mag) / mag
    return mr * scale, mi * scale


def estimate_mask(model: SeModel, noisy: ComplexSpectrogram) -> CRMask:
    if noisy.params != model.cfg.stft_params:
        raise ShapeError(f"spectrogram params {noisy.params} do not match model {model.cfg.stft_params}")
    real, imag = noisy.real, noisy.imag
    squeeze = real.dim() == 2
    if squeeze:
        real, imag = real.unsqueeze(0), imag.unsqueeze(0)
    mr, mi = model(real, imag)
    if model.cfg.mask_activation == "tanh_bounded":
        mr, mi = _bound(mr, mi)
    if squeeze:
        mr, mi = mr[0], mi[0]
    return CRMask(mr, mi)


def apply_mask(mask: CRMask, noisy: ComplexSpectrogram) -> ComplexSpectrogram:
    if mask.shape != noisy.shape:
        raise ShapeError(f"mask {tuple(mask.shape)} vs spectrogram {tuple(noisy.shape)}")
    yr, yi = noisy.real, noisy.imag
    return noisy.with_planes(mask.real * yr - mask.imag * yi, mask.real * yi + mask.imag * yr)


def crm_ideal(noisy: ComplexSpectrogram, clean: ComplexSpectrogram) -> CRMask:
    if noisy.shape != clean.shape:
        raise ShapeError(f"noisy {tuple(noisy.shape)} vs clean {tuple(clean.shape)}")
    yr, yi, sr, si = noisy.real, noisy.imag, clean.real, clean.imag
    denom = torch.clamp(yr**2 + yi**2, min=CRM_FLOOR)
    return CRMask((yr * sr + yi * si) / denom, (yr * si - yi * sr) / denom)


def edge_padding(n: int, params: StftParams) -> tuple[int, int]:
    """Zero padding that puts every original sample inside full frame overlap."""
    left = params.fft_size - params.hop
    frames = -(-(n + left) // params.hop) + 1
    right = (frames - 1) * params.hop + params.fft_size - n - left
    return left, right


def analysis(x: torch.Tensor, params: StftParams) -> ComplexSpectrogram:
    left, right = edge_padding(x.shape[-1], params)
    return dsp.stft(F.pad(x, (left, right)), params)


def synthesis(spec: ComplexSpectrogram, n: int) -> torch.Tensor:
    left, _ = edge_padding(n, spec.params)
    return dsp.istft(spec)[..., left : left + n]


def enhance_tensor(model: SeModel, x: torch.Tensor) -> torch.Tensor:
    """Batch enhancement of ``(B, n)`` waveforms; output has the input length."""
    noisy = analysis(x, model.cfg.stft_params)
    return synthesis(apply_mask(estimate_mask(model, noisy), noisy), x.shape[-1])


def enhance(model: SeModel, noisy: Waveform) -> Waveform:
    if noisy.sample_rate != dsp.CANONICAL_RATE:
        raise ConfigurationError(f"enhancer expects {dsp.CANONICAL_RATE} Hz input, got {noisy.sample_rate}")
    was_training = model.training
    model.eval()
    with torch.no_grad():
        y = enhance_tensor(model, noisy.tensor().unsqueeze(0))[0]
    model.train(was_training)
    return Waveform(y.double().numpy(), noisy.sample_rate)


def identity_model(cfg: SeModelConfig | None = None) -> SeModel:
    """Unbounded-mask model whose final layer emits exactly 1 + 0j; a test probe."""
    cfg = cfg or SeModelConfig(mask_activation="unbounded")
    if cfg.mask_activation != "unbounded":
        raise ConfigurationError("identity probe needs mask_activation = unbounded")
    model = build_se_model(cfg, 0)
    last = model.decoder[-1].conv
    with torch.no_grad():
        last.w_real.zero_()
        last.w_imag.zero_()
        last.b_real.fill_(1.0)
        last.b_imag.zero_()
    return model


def save_se_model(path, model: SeModel) -> Path:
    path = Path(path)
    autodiff.save_module(path, model)
    config.save_config(path.with_suffix(".cfg"), model.cfg)
    return path


def load_se_model(path) -> SeModel:
    path = Path(path)
    cfg = config.load_config(SeModelConfig, path.with_suffix(".cfg"))
    model = SeModel(cfg)
    autodiff.load_module(path, model)
    return model
