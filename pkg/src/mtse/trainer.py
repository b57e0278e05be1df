"""Pre-training and the alternating SE-step / ASR-step update loop.

Each multi-task iteration draws its step kind from a seeded Bernoulli
stream: an SE-step minimizes the PHASEN loss on freshly mixed clean/noise
pairs, an ASR-step pushes enhanced noisy audio through the frozen
recognizer and back-propagates its cross-entropy into the enhancer only.
"""

from __future__ import annotations

import copy
import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import autodiff, datasim, dsp, metrics
from .asr_model import AsrModel, asr_forward, decode_greedy_batch, save_asr_model, set_mvn_stats
from .datasim import Manifest
from .errors import ConfigurationError, ContractError, DomainError, NumericError
from .losses import label_smoothed_ce, phasen_loss
from .se_model import SeModel, analysis, apply_mask, enhance_tensor, estimate_mask, save_se_model
from .tokens import TokenSequence

log = logging.getLogger(__name__)

SE, ASR = "SE", "ASR"


@dataclass
class TrainSchedule:
    iterations: int = 2000
    batch_size: int = 4
    learning_rate: float = 1e-3
    se_step_probability: float = 0.5
    seed: int = 0
    checkpoint_every: int = 500
    eval_every: int = 0
    crop_seconds: float = 1.0
    grad_clip: float = 5.0
    snr_low: float = -5.0
    snr_high: float = 20.0
    label_smoothing: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.se_step_probability <= 1.0:
            raise ConfigurationError("se_step_probability must lie in [0, 1]")
        if self.iterations <= 0:
            raise ConfigurationError("iterations must be positive")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2 (complex batch norm)")


@dataclass
class StepLog:
    iteration: int
    step_kind: str
    loss: float
    grad_norm: float


def write_step_log(path, entries) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{e.iteration}\t{e.step_kind}\t{e.loss:.6f}\t{e.grad_norm:.6f}\n" for e in entries))
    return path


def read_step_log(path) -> list[StepLog]:
    out = []
    for line in Path(path).read_text().splitlines():
        i, k, loss, g = line.split("\t")
        out.append(StepLog(int(i), k, float(loss), float(g)))
    return out


class TrainingDiverged(NumericError):
    def __init__(self, message: str, last_good: Path | None = None):
        super().__init__(message)
        self.last_good = last_good


def step_kinds(p: float, n: int, seed: int) -> list[str]:
    """The seeded Bernoulli sequence of step kinds used by :func:`mtl_train`."""
    u = np.random.default_rng([int(seed), 0x5E]).random(n)
    return [SE if x < p else ASR for x in u]


# --- data ------------------------------------------------------------------


@dataclass
class Utterance:
    id: str
    audio: np.ndarray
    transcript: TokenSequence


def load_utterances(manifest: Manifest) -> list[Utterance]:
    return [Utterance(r.id, manifest.load(r).samples.astype(np.float32), r.transcript) for r in manifest]


def pad_batch(signals) -> tuple[torch.Tensor, torch.Tensor]:
    n = max(len(s) for s in signals)
    x = torch.zeros(len(signals), n)
    for i, s in enumerate(signals):
        x[i, : len(s)] = torch.as_tensor(s, dtype=x.dtype)
    return x, torch.tensor([len(s) for s in signals])


def pad_tokens(seqs) -> torch.Tensor:
    width = max(len(s) for s in seqs)
    t = torch.full((len(seqs), width), -1, dtype=torch.long)
    for i, s in enumerate(seqs):
        t[i, : len(s)] = torch.tensor(s.ids)
    return t


@dataclass
class SeStream:
    """On-the-fly mixtures of clean utterances and noise recordings."""

    clean: list[Utterance]
    noises: list[np.ndarray]
    snr_low: float
    snr_high: float
    crop: int

    def batch(self, rng: np.random.Generator, size: int) -> tuple[torch.Tensor, torch.Tensor]:
        noisy, target = [], []
        for _ in range(size):
            utt = self.clean[int(rng.integers(len(self.clean)))]
            noise = self.noises[int(rng.integers(len(self.noises)))]
            snr = float(rng.uniform(self.snr_low, self.snr_high))
            y, s, _, _ = datasim.render_mixture(dsp.Waveform(utt.audio), dsp.Waveform(noise), snr, rng)
            y, s = y.samples, s.samples
            if len(y) > self.crop:
                o = int(rng.integers(0, len(y) - self.crop + 1))
                y, s = y[o : o + self.crop], s[o : o + self.crop]
            noisy.append(y)
            target.append(s)
        return pad_batch(noisy)[0], pad_batch(target)[0]

    def mix(self, rng: np.random.Generator, utt: Utterance) -> np.ndarray:
        noise = self.noises[int(rng.integers(len(self.noises)))]
        snr = float(rng.uniform(self.snr_low, self.snr_high))
        y, _, _, _ = datasim.render_mixture(dsp.Waveform(utt.audio), dsp.Waveform(noise), snr, rng)
        return y.samples


# --- steps -------------------------------------------------------------------


def se_loss(model: SeModel, noisy: torch.Tensor, clean: torch.Tensor) -> torch.Tensor:
    params = model.cfg.stft_params
    y = analysis(noisy, params)
    s = analysis(clean, params)
    est = apply_mask(estimate_mask(model, y), y)
    return phasen_loss(est, s).total


def asr_loss(se: SeModel, asr: AsrModel, noisy: torch.Tensor, lengths: torch.Tensor, teacher: torch.Tensor,
             smoothing: float = 0.1) -> torch.Tensor:
    enhanced = enhance_tensor(se, noisy)
    logits = asr_forward(asr, enhanced, teacher, lengths)
    return label_smoothed_ce(logits, teacher, smoothing, mask=teacher >= 0)


def _update(loss: torch.Tensor, params, opt, clip: float) -> float:
    if not torch.isfinite(loss):
        raise NumericError("non-finite loss")
    opt.zero_grad(set_to_none=True)
    autodiff.backward(loss)
    norm = autodiff.grad_norm(params)
    if clip > 0:
        torch.nn.utils.clip_grad_norm_(params, clip)
    opt.step()
    return norm


def _check_frozen(asr: AsrModel) -> None:
    live = [n for n, p in asr.named_parameters() if p.requires_grad]
    if live:
        raise ContractError(f"recognizer must be frozen; trainable parameters: {live[:3]}...")


def pretrain_se(model: SeModel, stream: SeStream, schedule: TrainSchedule, out_dir=None) -> list[StepLog]:
    """Minimize the PHASEN loss on on-the-fly mixtures; writes ``se_seed.mtse`` under ``out_dir``."""
    torch.manual_seed(schedule.seed)
    rng = np.random.default_rng([schedule.seed, 0x5EED])
    params = autodiff.trainable(model)
    opt = autodiff.make_optimizer(params, schedule.learning_rate)
    out_dir = Path(out_dir) if out_dir is not None else None
    last_good = None
    logs = []
    model.train()
    for it in range(1, schedule.iterations + 1):
        noisy, clean = stream.batch(rng, schedule.batch_size)
        loss = se_loss(model, noisy, clean)
        try:
            norm = _update(loss, params, opt, schedule.grad_clip)
        except NumericError as exc:
            raise TrainingDiverged(f"SE pre-training diverged at iteration {it}", last_good) from exc
        logs.append(StepLog(it, SE, loss.item(), norm))
        if out_dir is not None and (it % schedule.checkpoint_every == 0 or it == schedule.iterations):
            last_good = save_se_model(out_dir / "se_seed.mtse", model)
        if it % 100 == 0:
            log.info("se-pretrain %d loss %.4f", it, np.mean([e.loss for e in logs[-100:]]))
    if out_dir is not None:
        write_step_log(out_dir / "se_pretrain.log.tsv", logs)
    return logs


def compute_mvn(asr: AsrModel, signals, batch: int = 16) -> tuple[torch.Tensor, torch.Tensor]:
    feats = []
    with torch.no_grad():
        for i in range(0, len(signals), batch):
            for s in signals[i : i + batch]:
                spec = dsp.stft(torch.as_tensor(s, dtype=torch.get_default_dtype()), asr.cfg.stft_params)
                m = dsp.stack_frames(dsp.log_mel(spec, asr.cfg.n_mels), asr.cfg.stack)
                feats.append(m.values.double())
    return dsp.mvn_stats(torch.cat(feats, 0))


def pretrain_asr(model: AsrModel, clean: list[Utterance], noisy: list[Utterance], stream: SeStream | None,
                 schedule: TrainSchedule, out_dir=None, multi_condition: bool = True) -> list[StepLog]:
    """Label-smoothed CE training on clean plus noisy audio (clean only when ``multi_condition`` is off).

    Multi-condition batches draw each item from the clean set, the rendered
    noisy set or a fresh on-the-fly remix, with equal odds.
    """
    torch.manual_seed(schedule.seed)
    rng = np.random.default_rng([schedule.seed, 0xA5])
    pool = [u.audio for u in clean] + ([u.audio for u in noisy] if multi_condition else [])
    mean, var = compute_mvn(model, pool)
    set_mvn_stats(model, mean, var)
    params = autodiff.trainable(model)
    opt = autodiff.make_optimizer(params, schedule.learning_rate)
    logs = []
    model.train()
    for it in range(1, schedule.iterations + 1):
        sigs, seqs = [], []
        for _ in range(schedule.batch_size):
            k = int(rng.integers(len(clean)))
            source = int(rng.integers(3)) if multi_condition else 0
            if source == 0:
                sig = clean[k].audio
            elif source == 1 or stream is None:
                sig = noisy[k % len(noisy)].audio
                k = k % len(noisy)
            else:
                sig = stream.mix(rng, clean[k])
            sigs.append(sig)
            seqs.append(clean[k].transcript if source != 1 else noisy[k].transcript)
        x, lengths = pad_batch(sigs)
        teacher = pad_tokens(seqs)
        logits = asr_forward(model, x, teacher, lengths)
        loss = label_smoothed_ce(logits, teacher, schedule.label_smoothing, mask=teacher >= 0)
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"ASR pre-training diverged at iteration {it}")
        norm = _update(loss, params, opt, schedule.grad_clip)
        logs.append(StepLog(it, ASR, loss.item(), norm))
        if it % 100 == 0:
            log.info("asr-pretrain %d loss %.4f", it, np.mean([e.loss for e in logs[-100:]]))
    model.eval()
    if out_dir is not None:
        save_asr_model(Path(out_dir) / "asr.mtse", model)
        write_step_log(Path(out_dir) / "asr_pretrain.log.tsv", logs)
    return logs


def mtl_train(se: SeModel, asr: AsrModel, stream: SeStream, asr_data: list[Utterance], schedule: TrainSchedule,
              out_dir=None, asr_batch_size: int | None = None) -> list[StepLog]:
    """Alternate SE-steps and ASR-steps; only enhancer parameters are ever updated."""
    _check_frozen(asr)
    asr.eval()
    torch.manual_seed(schedule.seed)
    kinds = step_kinds(schedule.se_step_probability, schedule.iterations, schedule.seed)
    se_rng = np.random.default_rng([schedule.seed, 0x5E5E])
    asr_rng = np.random.default_rng([schedule.seed, 0xA5A5])
    params = autodiff.trainable(se)
    opt = autodiff.make_optimizer(params, schedule.learning_rate)
    asr_batch_size = asr_batch_size or schedule.batch_size
    out_dir = Path(out_dir) if out_dir is not None else None
    logs = []
    se.train()
    for it, kind in enumerate(kinds, 1):
        if kind == SE:
            noisy, clean = stream.batch(se_rng, schedule.batch_size)
            loss = se_loss(se, noisy, clean)
        else:
            picks = [asr_data[int(i)] for i in asr_rng.integers(0, len(asr_data), asr_batch_size)]
            x, lengths = pad_batch([u.audio for u in picks])
            loss = asr_loss(se, asr, x, lengths, pad_tokens([u.transcript for u in picks]), schedule.label_smoothing)
        try:
            norm = _update(loss, params, opt, schedule.grad_clip)
        except NumericError as exc:
            raise TrainingDiverged(f"multi-task training diverged at iteration {it}") from exc
        logs.append(StepLog(it, kind, loss.item(), norm))
        if out_dir is not None and it % schedule.checkpoint_every == 0:
            save_se_model(out_dir / f"se_mt_{it:06d}.mtse", se)
        if it % 100 == 0:
            recent = logs[-100:]
            means = [[e.loss for e in recent if e.step_kind == k] for k in (SE, ASR)]
            log.info("mtl %d SE-steps %d loss-se %s loss-asr %s", it, len(means[0]),
                     *(f"{np.mean(m):.4f}" if m else "-" for m in means))
    se.eval()
    if out_dir is not None:
        save_se_model(out_dir / "se_mt.mtse", se)
        write_step_log(out_dir / "mtl.log.tsv", logs)
    return logs


# --- evaluation --------------------------------------------------------------


@torch.no_grad()
def evaluate(se: SeModel | None, asr: AsrModel, noisy: list[Utterance], clean: list[Utterance] | None = None,
             system: str = "system", signal_metrics: bool = True) -> metrics.EvalReport:
    """Per-utterance SI-SDR/SDR/STOI (when clean references exist) and token errors.

    ``se=None`` scores the unprocessed input, i.e. the no-enhancement row.
    """
    refs = {u.id: u.audio for u in clean} if clean else {}
    if se is not None:
        se.eval()
    asr.eval()
    rows = []
    for utt in noisy:
        x = torch.as_tensor(utt.audio, dtype=torch.get_default_dtype()).unsqueeze(0)
        y = enhance_tensor(se, x) if se is not None else x
        hyp, _ = decode_greedy_batch(asr, y)[0]
        counts = metrics.error_rate(utt.transcript, hyp)
        s_i = s_d = s_t = None
        if signal_metrics and utt.id in refs:
            est = y[0].double().numpy()
            ref = refs[utt.id].astype(np.float64)
            s_i, s_d = metrics.si_sdr(est, ref), metrics.sdr(est, ref)
            try:
                s_t = metrics.stoi(est, ref, dsp.CANONICAL_RATE)
            except DomainError:  # too little active speech for a STOI segment
                s_t = None
        rows.append(metrics.UtteranceRow(system, utt.id, s_i, s_d, s_t, len(utt.transcript.content),
                                         counts.substitutions, counts.deletions, counts.insertions, hyp.text()))
    return metrics.EvalReport(rows)


def evaluate_systems(systems: dict, asr: AsrModel, noisy, clean=None, signal_metrics: bool = True) -> metrics.EvalReport:
    report = metrics.EvalReport()
    for name, se in systems.items():
        report.rows.extend(evaluate(se, asr, noisy, clean, name, signal_metrics).rows)
    return report


@dataclass
class SweepRow:
    se_step_probability: float
    ter: float
    si_sdr: float | None
    seconds: float = 0.0  # wall time of the training run, evaluation excluded
    logs: list[StepLog] = field(default_factory=list, repr=False)


def sweep_se_probability(probabilities, seed_model: SeModel, asr: AsrModel, stream: SeStream,
                         asr_data: list[Utterance], test_noisy: list[Utterance], test_clean: list[Utterance],
                         schedule: TrainSchedule, out_dir=None, **kw) -> list[SweepRow]:
    """One multi-task run per probability, each starting from a copy of ``seed_model``."""
    probabilities = list(probabilities)
    if len(probabilities) < 2:
        raise ConfigurationError("a sweep needs at least two probabilities")
    rows = []
    for p in probabilities:
        model = copy.deepcopy(seed_model)
        sched = dataclasses.replace(schedule, se_step_probability=p)
        sub = Path(out_dir) / f"p{p:.2f}" if out_dir is not None else None
        start = time.perf_counter()
        logs = mtl_train(model, asr, stream, asr_data, sched, sub, **kw)
        seconds = time.perf_counter() - start
        summary = evaluate(model, asr, test_noisy, test_clean, f"p={p:.2f}").summary(f"p={p:.2f}")
        log.info("sweep p=%.2f TER %.2f SI-SDR %s", p, summary.ter, summary.si_sdr)
        rows.append(SweepRow(p, summary.ter, summary.si_sdr, seconds, logs))
    if out_dir is not None:
        lines = ["se_step_probability\tter_pct\tsi_sdr_db\n"]
        fmt = lambda v: "-" if v is None else f"{v:.4f}"  # noqa: E731
        lines += [f"{r.se_step_probability:.4f}\t{r.ter:.4f}\t{fmt(r.si_sdr)}\n" for r in rows]
        (Path(out_dir) / "sweep.tsv").write_text("".join(lines))
    return rows
