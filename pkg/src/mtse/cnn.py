"""Complex-valued layers built from paired real tensors.

Complex feature maps are ``ComplexTensor(real, imag)`` pairs laid out as
``(batch, channels, freq, time)`` for the convolutional layers and
``(batch, time, features)`` for the recurrent ones.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, ContractError, ShapeError

PADDING_MODES = ("same", "causal_time")


class ComplexTensor(NamedTuple):
    real: torch.Tensor
    imag: torch.Tensor

    def __mul__(self, alpha):
        return ComplexTensor(self.real * alpha, self.imag * alpha)

    def cat(self, other: "ComplexTensor", dim: int = 1) -> "ComplexTensor":
        return ComplexTensor(torch.cat([self.real, other.real], dim), torch.cat([self.imag, other.imag], dim))


def _check_pair(x: ComplexTensor) -> None:
    if x.real.shape != x.imag.shape:
        raise ShapeError(f"real {tuple(x.real.shape)} and imag {tuple(x.imag.shape)} differ")


def init_uniform_(t: torch.Tensor, fan_in: int, generator: torch.Generator | None = None) -> torch.Tensor:
    k = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        return t.uniform_(-k, k, generator=generator)


def leaky(x: ComplexTensor, slope: float = 0.01) -> ComplexTensor:
    return ComplexTensor(F.leaky_relu(x.real, slope), F.leaky_relu(x.imag, slope))


def time_padding(kernel_t: int, mode: str) -> tuple[int, int]:
    if mode not in PADDING_MODES:
        raise ConfigurationError(f"padding_mode must be one of {PADDING_MODES}, got {mode!r}")
    if mode == "causal_time":
        return kernel_t - 1, 0
    left = (kernel_t - 1) // 2
    return left, kernel_t - 1 - left


class ComplexConv2d(nn.Module):
    """Complex 2-D convolution over (freq, time).

    ``out_real = conv(Wr, xr) - conv(Wi, xi)`` and
    ``out_imag = conv(Wr, xi) + conv(Wi, xr)``; evaluated as a single real
    convolution on the stacked ``[xr; xi]`` channels.
    """

    def __init__(self, in_channels, out_channels, kernel=(5, 2), stride=(2, 1), padding_mode="same", bias=True):
        super().__init__()
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride = tuple(kernel), tuple(stride)
        self.padding_mode = padding_mode
        self.time_pad = time_padding(self.kernel[1], padding_mode)
        self.freq_pad = (self.kernel[0] - 1) // 2
        self.w_real = nn.Parameter(torch.empty(out_channels, in_channels, *self.kernel))
        self.w_imag = nn.Parameter(torch.empty(out_channels, in_channels, *self.kernel))
        if bias:
            self.b_real = nn.Parameter(torch.zeros(out_channels))
            self.b_imag = nn.Parameter(torch.zeros(out_channels))
        else:
            self.register_parameter("b_real", None)
            self.register_parameter("b_imag", None)
        self.reset_parameters()

    def reset_parameters(self, generator=None):
        fan_in = self.in_channels * self.kernel[0] * self.kernel[1]
        init_uniform_(self.w_real, fan_in, generator)
        init_uniform_(self.w_imag, fan_in, generator)
        if self.b_real is not None:
            init_uniform_(self.b_real, fan_in, generator)
            init_uniform_(self.b_imag, fan_in, generator)

    def weight(self) -> torch.Tensor:
        wr, wi = self.w_real, self.w_imag
        return torch.cat([torch.cat([wr, -wi], 1), torch.cat([wi, wr], 1)], 0)

    def bias(self):
        if self.b_real is None:
            return None
        return torch.cat([self.b_real, self.b_imag])

    def forward(self, x: ComplexTensor) -> ComplexTensor:
        _check_pair(x)
        if x.real.dim() != 4 or x.real.shape[1] != self.in_channels:
            raise ShapeError(f"expected (B, {self.in_channels}, F, T), got {tuple(x.real.shape)}")
        h = torch.cat([x.real, x.imag], 1)
        h = F.pad(h, (*self.time_pad, self.freq_pad, self.freq_pad))
        y = F.conv2d(h, self.weight(), self.bias(), stride=self.stride)
        return ComplexTensor(y[:, : self.out_channels], y[:, self.out_channels :])


class ComplexConvTranspose2d(nn.Module):
    """Transposed counterpart of :class:`ComplexConv2d` with the same complex rule.

    Frequency size maps ``F -> (F-1)*stride - 2*pad + kernel + output_padding``;
    time length is preserved by trimming the extra ``kernel_t - 1`` frames on
    the future side (causal) or the past side (same).
    """

    def __init__(self, in_channels, out_channels, kernel=(5, 2), stride=(2, 1), padding_mode="same",
                 output_padding=0, bias=True):
        super().__init__()
        if stride[1] != 1:
            raise ConfigurationError("time stride must be 1")
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride = tuple(kernel), tuple(stride)
        self.padding_mode = padding_mode
        time_padding(self.kernel[1], padding_mode)
        self.freq_pad = (self.kernel[0] - 1) // 2
        self.output_padding = output_padding
        self.w_real = nn.Parameter(torch.empty(in_channels, out_channels, *self.kernel))
        self.w_imag = nn.Parameter(torch.empty(in_channels, out_channels, *self.kernel))
        if bias:
            self.b_real = nn.Parameter(torch.zeros(out_channels))
            self.b_imag = nn.Parameter(torch.zeros(out_channels))
        else:
            self.register_parameter("b_real", None)
            self.register_parameter("b_imag", None)
        self.reset_parameters()

    def reset_parameters(self, generator=None):
        fan_in = self.in_channels * self.kernel[0] * self.kernel[1]
        init_uniform_(self.w_real, fan_in, generator)
        init_uniform_(self.w_imag, fan_in, generator)
        if self.b_real is not None:
            init_uniform_(self.b_real, fan_in, generator)
            init_uniform_(self.b_imag, fan_in, generator)

    def weight(self) -> torch.Tensor:
        wr, wi = self.w_real, self.w_imag
        return torch.cat([torch.cat([wr, wi], 1), torch.cat([-wi, wr], 1)], 0)

    def forward(self, x: ComplexTensor) -> ComplexTensor:
        _check_pair(x)
        if x.real.dim() != 4 or x.real.shape[1] != self.in_channels:
            raise ShapeError(f"expected (B, {self.in_channels}, F, T), got {tuple(x.real.shape)}")
        T = x.real.shape[-1]
        h = torch.cat([x.real, x.imag], 1)
        bias = None if self.b_real is None else torch.cat([self.b_real, self.b_imag])
        y = F.conv_transpose2d(h, self.weight(), bias, stride=self.stride,
                               padding=(self.freq_pad, 0), output_padding=(self.output_padding, 0))
        extra = self.kernel[1] - 1
        if extra:
            past, _ = time_padding(self.kernel[1], self.padding_mode)
            # trimming `extra - past` leading frames undoes the forward padding layout
            start = extra - past
            y = y[..., start : start + T]
        return ComplexTensor(y[:, : self.out_channels], y[:, self.out_channels :])


class ComplexBatchNorm(nn.Module):
    """Per-channel 2x2 whitening of (real, imag) followed by a complex affine map."""

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.channels, self.eps, self.momentum = channels, eps, momentum
        s = 1.0 / math.sqrt(2.0)
        self.gamma_rr = nn.Parameter(torch.full((channels,), s))
        self.gamma_ri = nn.Parameter(torch.zeros(channels))
        self.gamma_ii = nn.Parameter(torch.full((channels,), s))
        self.beta_r = nn.Parameter(torch.zeros(channels))
        self.beta_i = nn.Parameter(torch.zeros(channels))
        self.register_buffer("running_mean_r", torch.zeros(channels))
        self.register_buffer("running_mean_i", torch.zeros(channels))
        self.register_buffer("running_vrr", torch.ones(channels))
        self.register_buffer("running_vri", torch.zeros(channels))
        self.register_buffer("running_vii", torch.ones(channels))

    def forward(self, x: ComplexTensor) -> ComplexTensor:
        _check_pair(x)
        xr, xi = x.real, x.imag
        if xr.dim() < 2 or xr.shape[1] != self.channels:
            raise ShapeError(f"expected {self.channels} channels, got {tuple(xr.shape)}")
        shape = [1, self.channels] + [1] * (xr.dim() - 2)
        axes = [0] + list(range(2, xr.dim()))

        def col(v):
            return v.view(shape)

        if self.training:
            if xr.shape[0] < 2:
                raise ContractError("training-mode complex batch norm needs batch >= 2")
            mr, mi = xr.mean(axes), xi.mean(axes)
            cr, ci = xr - col(mr), xi - col(mi)
            vrr = (cr * cr).mean(axes)
            vri = (cr * ci).mean(axes)
            vii = (ci * ci).mean(axes)
            with torch.no_grad():
                m = self.momentum
                self.running_mean_r.mul_(1 - m).add_(m * mr.detach())
                self.running_mean_i.mul_(1 - m).add_(m * mi.detach())
                self.running_vrr.mul_(1 - m).add_(m * vrr.detach())
                self.running_vri.mul_(1 - m).add_(m * vri.detach())
                self.running_vii.mul_(1 - m).add_(m * vii.detach())
        else:
            mr, mi = self.running_mean_r, self.running_mean_i
            cr, ci = xr - col(mr), xi - col(mi)
            vrr, vri, vii = self.running_vrr, self.running_vri, self.running_vii

        vrr = vrr + self.eps
        vii = vii + self.eps
        # closed-form inverse square root of [[vrr, vri], [vri, vii]]
        s = torch.sqrt(vrr * vii - vri * vri)
        t = torch.sqrt(vrr + vii + 2 * s)
        inv = 1.0 / (s * t)
        wrr, wii, wri = (vii + s) * inv, (vrr + s) * inv, -vri * inv
        nr = col(wrr) * cr + col(wri) * ci
        ni = col(wri) * cr + col(wii) * ci
        out_r = col(self.gamma_rr) * nr + col(self.gamma_ri) * ni + col(self.beta_r)
        out_i = col(self.gamma_ri) * nr + col(self.gamma_ii) * ni + col(self.beta_i)
        return ComplexTensor(out_r, out_i)


class ComplexLSTM(nn.Module):
    """One complex recurrent layer from two real LSTMs ``L_r`` and ``L_i``.

    ``out = (L_r(xr) - L_i(xi)) + j (L_r(xi) + L_i(xr))`` on batch-first
    sequences. The bidirectional variant concatenates the reversed pass
    along the feature axis, so the output width doubles.
    """

    def __init__(self, input_size: int, hidden_size: int, bidirectional: bool = False):
        super().__init__()
        self.input_size, self.hidden_size, self.bidirectional = input_size, hidden_size, bidirectional
        self.lstm_r = nn.LSTM(input_size, hidden_size, batch_first=True, bidirectional=bidirectional)
        self.lstm_i = nn.LSTM(input_size, hidden_size, batch_first=True, bidirectional=bidirectional)

    @property
    def output_size(self) -> int:
        return self.hidden_size * (2 if self.bidirectional else 1)

    def reset_parameters(self, generator=None):
        for p in self.parameters():
            init_uniform_(p, self.hidden_size, generator)

    def forward(self, x: ComplexTensor) -> ComplexTensor:
        _check_pair(x)
        if x.real.dim() != 3 or x.real.shape[-1] != self.input_size:
            raise ShapeError(f"expected (B, T, {self.input_size}), got {tuple(x.real.shape)}")
        B = x.real.shape[0]
        both = torch.cat([x.real, x.imag], 0)
        yr, _ = self.lstm_r(both)
        yi, _ = self.lstm_i(both)
        return ComplexTensor(yr[:B] - yi[B:], yr[B:] + yi[:B])


class ComplexLinear(nn.Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        self.w_real = nn.Parameter(torch.empty(out_features, in_features))
        self.w_imag = nn.Parameter(torch.empty(out_features, in_features))
        self.b_real = nn.Parameter(torch.zeros(out_features)) if bias else None
        self.b_imag = nn.Parameter(torch.zeros(out_features)) if bias else None
        self.reset_parameters()

    def reset_parameters(self, generator=None):
        for p in (self.w_real, self.w_imag, self.b_real, self.b_imag):
            if p is not None:
                init_uniform_(p, self.in_features, generator)

    def forward(self, x: ComplexTensor) -> ComplexTensor:
        _check_pair(x)
        wr, wi = self.w_real, self.w_imag
        out_r = x.real @ wr.T - x.imag @ wi.T
        out_i = x.imag @ wr.T + x.real @ wi.T
        if self.b_real is not None:
            out_r, out_i = out_r + self.b_real, out_i + self.b_imag
        return ComplexTensor(out_r, out_i)


class Dense(nn.Linear):
    """Real affine layer with the package-wide uniform init."""

    def reset_parameters(self, generator=None):
        init_uniform_(self.weight, self.in_features, generator)
        if self.bias is not None:
            init_uniform_(self.bias, self.in_features, generator)


SEEDED_LAYERS = (ComplexConv2d, ComplexConvTranspose2d, ComplexLSTM, ComplexLinear, Dense)


def reset_seeded(module: nn.Module, generator: torch.Generator) -> None:
    """Re-initialize every package layer inside ``module`` from one generator, in module order."""
    for m in module.modules():
        if isinstance(m, SEEDED_LAYERS):
            m.reset_parameters(generator=generator)
