import numpy as np
import pytest
import torch

from mtse import autodiff, dsp
from mtse.asr_model import (
    PRESETS,
    AdditiveAttention,
    AsrModelConfig,
    asr_forward,
    build_asr_model,
    decode_greedy,
    decode_greedy_batch,
    load_asr_model,
    save_asr_model,
)
from mtse.dsp import Waveform
from mtse.errors import ContractError, TokenError
from mtse.losses import label_smoothed_ce
from mtse.tokens import EOS_ID, UNK_ID, VOCAB, TokenSequence, read_vocab, write_vocab

SMALL = AsrModelConfig(encoder_hidden=16, encoder_layers=1, decoder_hidden=16, embed_dim=8, attention_dim=8)


class TestTokens:
    def test_vocabulary(self):
        assert len(VOCAB) == 12 and VOCAB[EOS_ID] == "<eos>" and VOCAB[UNK_ID] == "<unk>"

    def test_sequence(self):
        s = TokenSequence.from_text("three one four")
        assert s.ids == (3, 1, 4, EOS_ID) and len(s) == 4 and s.text() == "three one four"
        assert TokenSequence.from_text("three <eos>") == TokenSequence.from_content([3])

    @pytest.mark.parametrize("ids", [(), (1, 2), (EOS_ID, EOS_ID)])
    def test_must_end_with_single_eos(self, ids):
        with pytest.raises(ContractError):
            TokenSequence(ids)

    def test_out_of_vocabulary(self):
        with pytest.raises(TokenError):
            TokenSequence((12, EOS_ID))
        with pytest.raises(TokenError):
            TokenSequence.from_text("eleven")

    def test_vocab_file(self, tmp_path):
        p = write_vocab(tmp_path / "vocab.txt")
        assert read_vocab(p) == VOCAB
        assert p.read_text().splitlines()[EOS_ID] == "<eos>"


class TestForward:
    def test_logit_shape(self, rng):
        model = build_asr_model(SMALL)
        teacher = TokenSequence.from_content([1, 2, 3])
        out = asr_forward(model, Waveform(rng.normal(0, 0.1, 8000)), teacher)
        assert out.shape == (1, 4, 12)

    def test_padded_batch_matches_single(self, f64, rng):
        model = build_asr_model(SMALL).eval()
        a, b = rng.normal(0, 0.1, 8000), rng.normal(0, 0.1, 5000)
        x = torch.zeros(2, 8000)
        x[0], x[1, :5000] = torch.tensor(a), torch.tensor(b)
        ta, tb = TokenSequence.from_content([1, 2, 3]), TokenSequence.from_content([4])
        both = asr_forward(model, x, [ta, tb], torch.tensor([8000, 5000]))
        single = asr_forward(model, torch.tensor(b)[None], tb)
        assert torch.allclose(both[1, :2], single[0], atol=1e-10)

    def test_waveform_and_spectrogram_agree(self, rng):
        model = build_asr_model(SMALL)
        w = Waveform(rng.normal(0, 0.1, 6000))
        t = TokenSequence.from_content([7])
        a = asr_forward(model, w, t)
        b = asr_forward(model, dsp.stft(w.tensor()[None], model.cfg.stft_params), t)
        assert torch.allclose(a, b, atol=1e-6)

    def test_gradient_reaches_waveform(self, rng):
        model = autodiff.freeze(build_asr_model(SMALL))
        x = torch.tensor(rng.normal(0, 0.1, (1, 6000)), dtype=torch.float32, requires_grad=True)
        t = TokenSequence.from_content([2, 5])
        label_smoothed_ce(asr_forward(model, x, t)[0], torch.tensor(t.ids)).backward()
        assert float(x.grad.norm()) > 0
        assert all(p.grad is None for p in model.parameters())

    def test_vocabulary_overflow(self):
        model = build_asr_model(SMALL)
        with pytest.raises(TokenError):
            asr_forward(model, torch.zeros(1, 4000), torch.tensor([[3, 12]]))

    def test_empty_teacher(self):
        with pytest.raises(ContractError):
            asr_forward(build_asr_model(SMALL), torch.zeros(1, 4000), torch.zeros(1, 0, dtype=torch.long))

    def test_feature_dims(self):
        model = build_asr_model()
        assert model.features(torch.zeros(1, 16000)).shape[-1] == 240
        assert model.cfg.stft_params.hop / 16000 == 0.01

    def test_presets_build(self):
        for cfg in PRESETS.values():
            build_asr_model(cfg)


class TestAttention:
    def test_mask_zeroes_weights(self, rng):
        att = AdditiveAttention(6, 4, 5)
        keys = torch.randn(2, 7, 6)
        mask = torch.ones(2, 7, dtype=torch.bool)
        mask[1, 4:] = False
        ctx, alpha = att(torch.randn(2, 4), keys, mask=mask)
        assert torch.all(alpha[1, 4:] == 0)
        assert torch.allclose(alpha.sum(-1), torch.ones(2))
        assert torch.allclose(ctx[1], alpha[1] @ keys[1])

    def test_gradients(self, f64):
        torch.manual_seed(0)
        att = AdditiveAttention(4, 3, 5)
        keys, query = torch.randn(2, 6, 4), torch.randn(2, 3)
        w = torch.randn(2, 4)
        f = lambda _: (att(query, keys)[0] * w).sum()  # noqa: E731
        for name, p in att.named_parameters():
            assert autodiff.grad_check(f, p) < 1e-4, name
        assert autodiff.grad_check(lambda k: (att(query, k)[0] * w).sum(), keys.clone()) < 1e-4
        assert autodiff.grad_check(lambda q: (att(q, keys)[0] * w).sum(), query.clone()) < 1e-4


class TestDecode:
    def test_forced_sequence_stub(self, monkeypatch):
        model = build_asr_model(SMALL).eval()
        script = [4, 2, 9, EOS_ID]
        step = {"i": 0}
        real_step = model._step

        def stub(*args):
            logits, state, context = real_step(*args)
            forced = torch.full_like(logits, -1e9)
            forced[:, script[min(step["i"], len(script) - 1)]] = 0.0
            step["i"] += 1
            return forced, state, context

        monkeypatch.setattr(model, "_step", stub)
        hyp, truncated = decode_greedy(model, Waveform(np.zeros(8000)))
        assert hyp.content == (4, 2, 9) and not truncated

    def test_truncation_flag(self, monkeypatch):
        model = build_asr_model(SMALL).eval()
        with torch.no_grad():
            model.output.weight.zero_()
            model.output.bias.zero_()
            model.output.bias[3] = 10.0
        hyp, truncated = decode_greedy_batch(model, torch.zeros(1, 8000))[0]
        frames = int(model.feature_lengths(torch.tensor([8000]))[0])
        assert truncated and len(hyp.content) == 2 * frames

    def test_deterministic(self, rng):
        model = build_asr_model(SMALL)
        w = Waveform(rng.normal(0, 0.1, 8000))
        assert decode_greedy(model, w) == decode_greedy(model, w)

    def test_restores_mode(self):
        model = build_asr_model(SMALL).train()
        decode_greedy(model, Waveform(np.zeros(4000)))
        assert model.training


class TestCheckpoint:
    def test_reload_is_bitwise(self, tmp_path, rng):
        model = build_asr_model(SMALL, seed=2).eval()
        with torch.no_grad():
            model.mvn_mean.fill_(0.5)
            model.mvn_var.fill_(2.0)
        path = save_asr_model(tmp_path / "asr.mtse", model)
        again = load_asr_model(path)
        assert all(not p.requires_grad for p in again.parameters()) and not again.training
        x = torch.tensor(rng.normal(0, 0.1, (1, 6000)), dtype=torch.float32)
        t = TokenSequence.from_content([1, 1])
        assert torch.equal(asr_forward(model, x, t), asr_forward(again, x, t))
        assert autodiff.checksum(model) == autodiff.checksum(again)

    def test_seeded_init(self):
        assert autodiff.checksum(build_asr_model(SMALL, 1)) == autodiff.checksum(build_asr_model(SMALL, 1))
        assert autodiff.checksum(build_asr_model(SMALL, 1)) != autodiff.checksum(build_asr_model(SMALL, 2))
