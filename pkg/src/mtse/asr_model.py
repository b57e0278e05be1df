"""Attention encoder-decoder recognizer with an in-graph feature front-end.

STFT, log-mel energies, frame stacking and global mean-variance
normalization all run inside the autograd graph, so a loss on the decoder
output back-propagates to whatever produced the waveform.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from . import autodiff, config, dsp
from .cnn import Dense, init_uniform_, reset_seeded
from .dsp import ComplexSpectrogram, StftParams, Waveform
from .errors import ContractError, ShapeError, TokenError
from .tokens import EOS_ID, VOCAB, TokenSequence


@dataclass
class AsrModelConfig:
    vocab_size: int = len(VOCAB)
    n_mels: int = 80
    stack: int = 3
    fft_size: int = 512
    hop: int = 160
    window: str = "hann"
    encoder_hidden: int = 128
    encoder_layers: int = 2
    decoder_hidden: int = 128
    embed_dim: int = 32
    attention_dim: int = 64

    @property
    def stft_params(self) -> StftParams:
        return StftParams(self.fft_size, self.hop, self.window)

    @property
    def feature_dim(self) -> int:
        return self.n_mels * self.stack


PRESETS = {
    "strong": AsrModelConfig(),
    "medium": AsrModelConfig(encoder_hidden=96, decoder_hidden=96),
    "weak": AsrModelConfig(encoder_hidden=48, encoder_layers=1, decoder_hidden=64),
}


class AdditiveAttention(nn.Module):
    """Content-based score ``v . tanh(W_k h_t + W_q s)`` with a length mask."""

    def __init__(self, key_dim: int, query_dim: int, attn_dim: int):
        super().__init__()
        self.key = Dense(key_dim, attn_dim, bias=True)
        self.query = Dense(query_dim, attn_dim, bias=False)
        self.score = Dense(attn_dim, 1, bias=False)

    def project_keys(self, keys: torch.Tensor) -> torch.Tensor:
        return self.key(keys)

    def forward(self, query, keys, projected_keys=None, mask=None):
        if projected_keys is None:
            projected_keys = self.project_keys(keys)
        e = self.score(torch.tanh(projected_keys + self.query(query).unsqueeze(1))).squeeze(-1)
        if mask is not None:
            e = e.masked_fill(~mask, float("-inf"))
        alpha = torch.softmax(e, dim=-1)
        return torch.bmm(alpha.unsqueeze(1), keys).squeeze(1), alpha


class AsrModel(nn.Module):
    def __init__(self, cfg: AsrModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.feature_dim
        self.register_buffer("mvn_mean", torch.zeros(d))
        self.register_buffer("mvn_var", torch.ones(d))
        self.encoder = nn.LSTM(d, cfg.encoder_hidden, cfg.encoder_layers, batch_first=True, bidirectional=True)
        enc_out = 2 * cfg.encoder_hidden
        self.embed = nn.Embedding(cfg.vocab_size, cfg.embed_dim)
        self.decoder = nn.LSTMCell(cfg.embed_dim + enc_out, cfg.decoder_hidden)
        self.attention = AdditiveAttention(enc_out, cfg.decoder_hidden, cfg.attention_dim)
        self.pre_output = Dense(cfg.decoder_hidden + enc_out, cfg.decoder_hidden)
        self.output = Dense(cfg.decoder_hidden, cfg.vocab_size)

    def reset_parameters(self, seed: int) -> None:
        g = torch.Generator().manual_seed(int(seed))
        for lstm, h in ((self.encoder, self.cfg.encoder_hidden), (self.decoder, self.cfg.decoder_hidden)):
            for p in lstm.parameters():
                init_uniform_(p, h, g)
        with torch.no_grad():
            self.embed.weight.normal_(0.0, 1.0, generator=g)
        reset_seeded(self, g)

    # --- front-end ---------------------------------------------------------

    def features(self, audio, n_samples: torch.Tensor | None = None) -> torch.Tensor:
        """Normalized stacked log-mel features ``(B, frames, n_mels*stack)``.

        With ``n_samples`` (valid lengths of a zero-padded batch), frames past
        each item's end are zeroed before stacking, exactly as the tail of an
        unpadded signal is, so batched and single inference agree.
        """
        spec = audio if isinstance(audio, ComplexSpectrogram) else dsp.stft(audio, self.cfg.stft_params)
        if spec.params != self.cfg.stft_params:
            raise ShapeError(f"spectrogram params {spec.params} do not match recognizer {self.cfg.stft_params}")
        m = dsp.log_mel(spec, self.cfg.n_mels)
        if n_samples is not None and m.values.dim() == 3:
            valid = self.frame_counts(torch.as_tensor(n_samples))
            keep = torch.arange(m.n_frames).unsqueeze(0) < valid.unsqueeze(1)
            m = dsp.MelFeatures(m.values * keep.unsqueeze(-1).to(m.values.dtype), m.frame_shift)
        m = dsp.stack_frames(m, self.cfg.stack)
        return dsp.global_mvn(m, self.mvn_mean, self.mvn_var).values

    def frame_counts(self, n_samples: torch.Tensor) -> torch.Tensor:
        p = self.cfg.stft_params
        return torch.clamp((n_samples - p.fft_size) // p.hop + 1, min=1)

    def feature_lengths(self, n_samples: torch.Tensor) -> torch.Tensor:
        return -(-self.frame_counts(n_samples) // self.cfg.stack)

    # --- encoder / decoder -------------------------------------------------

    def encode(self, feats: torch.Tensor, lengths: torch.Tensor | None = None):
        B, T, _ = feats.shape
        if lengths is None:
            lengths = torch.full((B,), T, dtype=torch.long)
        lengths = torch.clamp(lengths.cpu(), max=T)
        packed = pack_padded_sequence(feats, lengths, batch_first=True, enforce_sorted=False)
        out, _ = self.encoder(packed)
        out, _ = pad_packed_sequence(out, batch_first=True, total_length=T)
        mask = torch.arange(T).unsqueeze(0) < lengths.unsqueeze(1)
        return out, mask

    def _init_state(self, enc: torch.Tensor):
        B = enc.shape[0]
        z = enc.new_zeros(B, self.cfg.decoder_hidden)
        return (z, z.clone()), enc.new_zeros(B, enc.shape[-1])

    def _step(self, prev_tokens, state, context, enc, keys, mask):
        x = torch.cat([self.embed(prev_tokens), context], -1)
        h, c = self.decoder(x, state)
        context, _ = self.attention(h, enc, keys, mask)
        logits = self.output(torch.tanh(self.pre_output(torch.cat([h, context], -1))))
        return logits, (h, c), context

    def decode_teacher(self, enc, mask, teacher: torch.Tensor) -> torch.Tensor:
        B, L = teacher.shape
        keys = self.attention.project_keys(enc)
        state, context = self._init_state(enc)
        prev = torch.full((B,), EOS_ID, dtype=torch.long)
        out = []
        for i in range(L):
            logits, state, context = self._step(prev, state, context, enc, keys, mask)
            out.append(logits)
            prev = teacher[:, i].clamp(min=0)
        return torch.stack(out, 1)


def _as_batch(audio):
    if isinstance(audio, Waveform):
        return audio.tensor().unsqueeze(0), None
    if isinstance(audio, ComplexSpectrogram):
        return audio, None
    x = torch.as_tensor(audio)
    return (x.unsqueeze(0) if x.dim() == 1 else x), None


def _teacher_tensor(teacher, vocab_size: int) -> torch.Tensor:
    if isinstance(teacher, TokenSequence):
        t = torch.tensor([teacher.ids], dtype=torch.long)
    elif isinstance(teacher, (list, tuple)) and teacher and isinstance(teacher[0], TokenSequence):
        width = max(len(s) for s in teacher)
        t = torch.full((len(teacher), width), -1, dtype=torch.long)
        for i, s in enumerate(teacher):
            t[i, : len(s)] = torch.tensor(s.ids)
    else:
        t = torch.as_tensor(teacher, dtype=torch.long)
        t = t.unsqueeze(0) if t.dim() == 1 else t
    if t.numel() == 0:
        raise ContractError("teacher sequence is empty")
    if int(t.max()) >= vocab_size:
        raise TokenError(f"token id {int(t.max())} exceeds vocabulary of {vocab_size}")
    return t


def asr_forward(model: AsrModel, audio, teacher, lengths: torch.Tensor | None = None) -> torch.Tensor:
    """Teacher-forced logits ``(B, L, V)``; ``teacher`` rows end with ``<eos>`` (``-1`` pads).

    ``audio`` may be a waveform batch ``(B, n)``, a :class:`Waveform` or a
    spectrogram computed with the recognizer's own STFT parameters;
    ``lengths`` gives valid sample counts for zero-padded batches.
    """
    teacher = _teacher_tensor(teacher, model.cfg.vocab_size)
    x, _ = _as_batch(audio)
    feats = model.features(x, lengths)
    if feats.dim() == 2:
        feats = feats.unsqueeze(0)
    flen = model.feature_lengths(torch.as_tensor(lengths)) if lengths is not None else None
    enc, mask = model.encode(feats, flen)
    return model.decode_teacher(enc, mask, teacher)


@torch.no_grad()
def decode_greedy_batch(model: AsrModel, x: torch.Tensor, lengths: torch.Tensor | None = None,
                        max_len: int | None = None) -> list[tuple[TokenSequence, bool]]:
    """Step-wise argmax decoding; each item is ``(hypothesis, truncated)``."""
    x, _ = _as_batch(x)
    feats = model.features(x, lengths)
    if feats.dim() == 2:
        feats = feats.unsqueeze(0)
    flen = model.feature_lengths(torch.as_tensor(lengths)) if lengths is not None else None
    enc, mask = model.encode(feats, flen)
    B = enc.shape[0]
    limit = max_len or 2 * enc.shape[1]
    keys = model.attention.project_keys(enc)
    state, context = model._init_state(enc)
    prev = torch.full((B,), EOS_ID, dtype=torch.long)
    hyps = [[] for _ in range(B)]
    done = [False] * B
    for _ in range(limit):
        logits, state, context = model._step(prev, state, context, enc, keys, mask)
        prev = logits.argmax(-1)
        for b in range(B):
            if not done[b]:
                if int(prev[b]) == EOS_ID:
                    done[b] = True
                else:
                    hyps[b].append(int(prev[b]))
        if all(done):
            break
    return [(TokenSequence.from_content(h), not d) for h, d in zip(hyps, done)]


def decode_greedy(model: AsrModel, audio) -> tuple[TokenSequence, bool]:
    was_training = model.training
    model.eval()
    out = decode_greedy_batch(model, audio)[0]
    model.train(was_training)
    return out


def build_asr_model(cfg: AsrModelConfig | None = None, seed: int = 0) -> AsrModel:
    model = AsrModel(cfg or AsrModelConfig())
    model.reset_parameters(seed)
    return model


def set_mvn_stats(model: AsrModel, mean: torch.Tensor, var: torch.Tensor) -> None:
    with torch.no_grad():
        model.mvn_mean.copy_(mean)
        model.mvn_var.copy_(torch.clamp(var, min=1e-8))


def save_asr_model(path, model: AsrModel) -> Path:
    path = Path(path)
    autodiff.save_module(path, model)
    config.save_config(path.with_suffix(".cfg"), model.cfg)
    return path


def load_asr_model(path, frozen: bool = True) -> AsrModel:
    path = Path(path)
    cfg = config.load_config(AsrModelConfig, path.with_suffix(".cfg"))
    model = AsrModel(cfg)
    autodiff.load_module(path, model)
    if frozen:
        autodiff.freeze(model)
        model.eval()
    return model
