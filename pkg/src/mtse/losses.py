"""Differentiable training objectives."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .dsp import ComplexSpectrogram
from .errors import ContractError, DomainError, ShapeError

PHASEN_P = 0.3
MAG_FLOOR = 1e-8
SNR_CAP_DB = 60.0


@dataclass
class PhasenLossValue:
    total: torch.Tensor
    amplitude_part: torch.Tensor
    phase_part: torch.Tensor


def _planes(s):
    if isinstance(s, ComplexSpectrogram):
        return s.real, s.imag
    return s


def compressed(real: torch.Tensor, imag: torch.Tensor, p: float = PHASEN_P):
    """``|X|^p`` and ``|X|^p e^{j phase(X)}`` with a 1e-8 magnitude floor inside the power.

    Working on the power ``re^2 + im^2`` keeps the gradient finite at zero,
    and zero-magnitude bins come out exactly zero.
    """
    power = real**2 + imag**2
    floored = torch.clamp(power, min=MAG_FLOOR**2)
    amp = power * floored ** (p / 2 - 1)
    gain = floored ** ((p - 1) / 2)
    return amp, real * gain, imag * gain


def phasen_loss(est, ref, p: float = PHASEN_P) -> PhasenLossValue:
    """Compressed-magnitude MSE plus compressed complex-spectrum MSE, each averaged over bins."""
    er, ei = _planes(est)
    rr, ri = _planes(ref)
    if er.shape != rr.shape or ei.shape != ri.shape:
        raise ShapeError(f"estimate {tuple(er.shape)} vs reference {tuple(rr.shape)}")
    if not 0 < p <= 1:
        raise DomainError(f"compression factor must lie in (0, 1], got {p}")
    a_est, cr_est, ci_est = compressed(er, ei, p)
    a_ref, cr_ref, ci_ref = compressed(rr, ri, p)
    amplitude = ((a_ref - a_est) ** 2).mean()
    phase = ((cr_ref - cr_est) ** 2 + (ci_ref - ci_est) ** 2).mean()
    return PhasenLossValue(amplitude + phase, amplitude, phase)


def si_snr(est: torch.Tensor, ref: torch.Tensor, cap_db: float = SNR_CAP_DB) -> torch.Tensor:
    """Scale-invariant SNR in dB over the last axis, capped at ``cap_db``."""
    if est.shape != ref.shape:
        raise ShapeError(f"estimate {tuple(est.shape)} vs reference {tuple(ref.shape)}")
    est = est - est.mean(-1, keepdim=True)
    ref = ref - ref.mean(-1, keepdim=True)
    ref_energy = (ref**2).sum(-1, keepdim=True)
    if torch.any(ref_energy == 0):
        raise DomainError("reference signal is zero")
    target = (est * ref).sum(-1, keepdim=True) / ref_energy * ref
    noise = est - target
    t = (target**2).sum(-1)
    n = (noise**2).sum(-1)
    tiny = torch.finfo(est.dtype).tiny
    db = 10 * torch.log10(torch.clamp(t, min=tiny) / torch.clamp(n, min=tiny))
    return torch.clamp(db, max=cap_db)


def label_smoothed_ce(logits: torch.Tensor, ref, smoothing: float = 0.1, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean token cross-entropy against ``(1 - smoothing) * onehot + smoothing / V``.

    ``logits`` is ``(..., L, V)`` and ``ref`` holds ``(..., L)`` token ids;
    ``mask`` (same shape as ``ref``) excludes padded positions from the mean.
    """
    ref = torch.as_tensor(ref, dtype=torch.long)
    if logits.shape[:-1] != ref.shape:
        raise ContractError(f"logits rows {tuple(logits.shape[:-1])} do not match reference {tuple(ref.shape)}")
    if not 0 <= smoothing < 1:
        raise DomainError("smoothing must lie in [0, 1)")
    logp = F.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, ref.clamp(min=0).unsqueeze(-1)).squeeze(-1)
    uniform = -logp.mean(-1)
    per_token = (1 - smoothing) * nll + smoothing * uniform
    if mask is None:
        return per_token.mean()
    mask = mask.to(per_token.dtype)
    return (per_token * mask).sum() / mask.sum()
