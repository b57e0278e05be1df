"""Synthetic tone-word corpus, noise generators and SNR-exact mixing.

Everything here is a pure function of its arguments and a seed; per
utterance randomness comes from ``derive_rng(master_seed, utt_id)`` so the
rendered corpus does not depend on the order or number of workers.
"""

from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

from . import config
from .dsp import CANONICAL_RATE, Waveform, read_wav, write_wav
from .errors import DomainError, ShapeError, TokenError
from .tokens import VOCAB, WORDS, TokenSequence, write_vocab

log = logging.getLogger(__name__)

PEAK = 0.5
MIX_PEAK = 0.9
NOISE_TYPES = ("white", "pink", "babble")

# (base duration s, formant frequencies Hz, relative amplitudes, AM rates Hz)
TOKEN_TABLE = (
    (0.34, (340.0, 1150.0, 2600.0), (1.0, 0.6, 0.3), (4.0, 6.0, 9.0)),
    (0.40, (370.0, 1800.0), (1.0, 0.7), (5.0, 7.0)),
    (0.30, (265.0, 2200.0, 3000.0), (1.0, 0.5, 0.4), (6.0, 4.0, 8.0)),
    (0.46, (460.0, 1000.0, 2400.0), (1.0, 0.8, 0.3), (3.0, 5.0, 7.0)),
    (0.36, (365.0, 1500.0), (1.0, 0.4), (7.0, 5.0)),
    (0.42, (600.0, 1250.0, 2750.0), (1.0, 0.6, 0.5), (4.0, 8.0, 6.0)),
    (0.32, (480.0, 2000.0), (1.0, 0.9), (6.0, 3.0)),
    (0.48, (390.0, 900.0, 2200.0), (1.0, 0.7, 0.2), (5.0, 4.0, 9.0)),
    (0.38, (660.0, 1700.0, 3100.0), (1.0, 0.5, 0.5), (3.0, 7.0, 5.0)),
    (0.44, (450.0, 1300.0, 2450.0), (1.0, 0.3, 0.6), (8.0, 6.0, 4.0)),
)


def derive_rng(master_seed: int, key: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{master_seed}:{key}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def spectral_centroid(token_id: int) -> float:
    """Power-weighted mean frequency of a token's design-table entry."""
    _, freqs, amps, _ = TOKEN_TABLE[token_id]
    a2 = np.square(amps)
    return float(np.dot(a2, freqs) / a2.sum())


def _fade(n: int, sr: int, ms: float = 20.0) -> np.ndarray:
    env = np.ones(n)
    k = min(n // 2, int(sr * ms / 1000))
    ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(k) / k)
    env[:k] = ramp
    env[n - k :] = ramp[::-1]
    return env


def synth_token_audio(token_id: int, seed: int, sample_rate: int = CANONICAL_RATE) -> Waveform:
    if not 0 <= token_id < len(WORDS):
        raise TokenError(f"token id {token_id} has no audio pattern")
    rng = np.random.default_rng([int(seed), int(token_id)])
    base, freqs, amps, rates = TOKEN_TABLE[token_id]
    pitch = 1.0 + rng.uniform(-0.03, 0.03)
    dur = base * (1.0 + rng.uniform(-0.1, 0.1))
    n = int(round(dur * sample_rate))
    t = np.arange(n) / sample_rate
    x = np.zeros(n)
    for f, a, r in zip(freqs, amps, rates):
        am = 1.0 + 0.5 * np.sin(2 * np.pi * r * t + rng.uniform(0, 2 * np.pi))
        x += a * am * np.sin(2 * np.pi * f * pitch * t + rng.uniform(0, 2 * np.pi))
    x *= _fade(n, sample_rate)
    x *= PEAK / np.max(np.abs(x))
    return Waveform(x, sample_rate)


def concat(parts, sample_rate: int = CANONICAL_RATE) -> Waveform:
    return Waveform(np.concatenate([p.samples for p in parts]) if parts else np.zeros(0), sample_rate)


def synth_utterance(tokens, seed: int, sample_rate: int = CANONICAL_RATE) -> Waveform:
    """Tokens separated by 60-120 ms gaps, with 100-200 ms of silence at each end."""
    rng = np.random.default_rng([int(seed), 7919])
    parts = [Waveform(np.zeros(int(rng.uniform(0.1, 0.2) * sample_rate)), sample_rate)]
    for i, tok in enumerate(tokens):
        if i:
            parts.append(Waveform(np.zeros(int(rng.uniform(0.06, 0.12) * sample_rate)), sample_rate))
        parts.append(synth_token_audio(int(tok), int(rng.integers(2**31)), sample_rate))
    parts.append(Waveform(np.zeros(int(rng.uniform(0.1, 0.2) * sample_rate)), sample_rate))
    return concat(parts, sample_rate)


# --- noise -----------------------------------------------------------------


def white_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal(n)


def pink_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(spec.size, dtype=np.float64)
    f[0] = 1.0
    return np.fft.irfft(spec / np.sqrt(f), n)


def babble_noise(n: int, rng: np.random.Generator, sample_rate: int = CANONICAL_RATE, talkers: int = 6) -> np.ndarray:
    """Overlapping syllable-rate AM tone clusters over a faint noise floor."""
    t = np.arange(n) / sample_rate
    x = 0.05 * pink_noise(n, rng)
    for _ in range(talkers):
        f0 = rng.uniform(250, 800)
        am = np.clip(np.sin(2 * np.pi * rng.uniform(2.0, 6.0) * t + rng.uniform(0, 2 * np.pi)), 0, None)
        for h, f in enumerate((f0, f0 * rng.uniform(2.0, 4.0), f0 * rng.uniform(4.0, 6.0))):
            drift = 1.0 + 0.05 * np.sin(2 * np.pi * rng.uniform(0.1, 0.5) * t)
            phase = 2 * np.pi * np.cumsum(f * drift) / sample_rate
            x += am * np.sin(phase + rng.uniform(0, 2 * np.pi)) / (h + 1)
    return x


def make_noise(kind: str, n: int, rng: np.random.Generator, sample_rate: int = CANONICAL_RATE) -> Waveform:
    if kind == "white":
        x = white_noise(n, rng)
    elif kind == "pink":
        x = pink_noise(n, rng)
    elif kind == "babble":
        x = babble_noise(n, rng, sample_rate)
    else:
        raise DomainError(f"unknown noise type {kind!r}")
    return Waveform(PEAK * x / np.max(np.abs(x)), sample_rate)


def synth_rir(rng: np.random.Generator, t60: float = 0.3, sample_rate: int = CANONICAL_RATE,
              reflections: int = 12) -> Waveform:
    """Exponentially decaying diffuse tail plus a few sparse early reflections."""
    n = int(t60 * sample_rate)
    t = np.arange(n) / sample_rate
    h = 0.2 * rng.standard_normal(n) * np.exp(-6.908 * t / t60)
    idx = rng.integers(int(0.002 * sample_rate), max(int(0.05 * sample_rate), 2), reflections)
    h[idx] += rng.uniform(-0.5, 0.5, reflections) * np.exp(-6.908 * idx / sample_rate / t60)
    h[0] = 1.0
    return Waveform(h, sample_rate)


# --- mixing ----------------------------------------------------------------


def power(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean(x * x))


def snr_db(clean, noise) -> float:
    return 10.0 * np.log10(power(clean) / power(noise))


def mix_at_snr(clean: Waveform, noise: Waveform, snr: float, rng: np.random.Generator | None = None):
    """Return ``(noisy, noise_scale)``; the noise is cropped at a random offset when longer."""
    c = np.asarray(clean.samples, dtype=np.float64)
    n = np.asarray(noise.samples, dtype=np.float64)
    if n.size < c.size:
        raise ShapeError(f"noise ({n.size}) shorter than clean ({c.size})")
    if not np.isfinite(snr):
        raise DomainError("snr must be finite")
    offset = int(rng.integers(0, n.size - c.size + 1)) if rng is not None and n.size > c.size else 0
    n = n[offset : offset + c.size]
    pc, pn = power(c), power(n)
    if pc == 0 or pn == 0:
        raise DomainError("clean and noise must both carry energy")
    scale = float(np.sqrt(pc / (pn * 10.0 ** (snr / 10.0))))
    return Waveform(c + scale * n, clean.sample_rate), scale


def convolve_rir(x: Waveform, rir: Waveform) -> Waveform:
    h = np.asarray(rir.samples, dtype=np.float64)
    if h.size == 0:
        raise DomainError("empty room impulse response")
    if h.size >= len(x):
        raise ShapeError("impulse response must be shorter than the signal")
    d = int(np.argmax(np.abs(h)))
    y = signal.fftconvolve(np.asarray(x.samples, dtype=np.float64), h)
    return Waveform(y[d : d + len(x)], x.sample_rate)


# --- corpus ----------------------------------------------------------------


@dataclass
class CorpusConfig:
    train_utterances: int = 200
    test_utterances: int = 300
    min_tokens: int = 1
    max_tokens: int = 3
    train_snr_low: float = -10.0
    train_snr_high: float = 30.0
    test_snr_low: float = 0.0
    test_snr_high: float = 10.0
    noise_types: tuple[str, ...] = NOISE_TYPES
    noise_seconds: float = 20.0
    noise_files_per_type: int = 2
    rir_probability: float = 0.0
    t60: float = 0.3
    sample_rate: int = CANONICAL_RATE

    def __post_init__(self):
        self.noise_types = tuple(self.noise_types)
        for k in self.noise_types:
            if k not in NOISE_TYPES:
                raise DomainError(f"unknown noise type {k!r}")
        if not 1 <= self.min_tokens <= self.max_tokens:
            raise DomainError("need 1 <= min_tokens <= max_tokens")


@dataclass
class MixtureSpec:
    id: str
    clean_id: str
    noise_id: str
    snr_db: float
    rir_id: str | None
    seed: int
    noise_offset: int = 0
    gain: float = 1.0


@dataclass
class ManifestRecord:
    id: str
    path: Path  # absolute once loaded
    transcript: TokenSequence
    duration: float


@dataclass
class Manifest:
    records: list[ManifestRecord] = field(default_factory=list)
    root: Path | None = None

    def __post_init__(self):
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise DomainError("manifest ids must be unique")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def by_id(self) -> dict[str, ManifestRecord]:
        return {r.id: r for r in self.records}

    def load(self, record: ManifestRecord) -> Waveform:
        return read_wav(record.path)


def write_manifest(path, manifest: Manifest) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for r in manifest.records:
        rel = Path(os.path.relpath(Path(r.path).resolve(), path.parent.resolve()))
        lines.append(f"{r.id}\t{rel.as_posix()}\t{r.transcript.text()}\t{r.duration:.6f}\n")
    path.write_text("".join(lines))
    return path


def read_manifest(path, check_files: bool = True) -> Manifest:
    path = Path(path)
    records = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != 4:
            raise DomainError(f"{path}:{n}: expected 4 tab-separated columns, got {len(cols)}")
        uid, rel, text, dur = cols
        wav = (path.parent / rel).resolve()
        if check_files and not wav.exists():
            raise DomainError(f"{path}:{n}: missing audio file {wav}")
        records.append(ManifestRecord(uid, wav, TokenSequence.from_text(text), float(dur)))
    return Manifest(records, path.parent)


MIXTURE_COLUMNS = ("id", "clean_id", "noise_id", "snr_db", "rir_id", "seed", "noise_offset", "gain")


def write_mixtures(path, specs) -> Path:
    path = Path(path)
    rows = []
    for s in specs:
        d = asdict(s)
        d["rir_id"] = d["rir_id"] or "-"
        d["snr_db"] = repr(float(d["snr_db"]))
        d["gain"] = repr(float(d["gain"]))
        rows.append("\t".join(str(d[c]) for c in MIXTURE_COLUMNS) + "\n")
    path.write_text("".join(rows))
    return path


def read_mixtures(path) -> list[MixtureSpec]:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        c = line.split("\t")
        out.append(MixtureSpec(c[0], c[1], c[2], float(c[3]), None if c[4] == "-" else c[4], int(c[5]),
                               int(c[6]), float(c[7])))
    return out


def render_mixture(clean: Waveform, noise: Waveform, snr: float, rng: np.random.Generator,
                   rir: Waveform | None = None) -> tuple[Waveform, Waveform, int, float]:
    """Mix (optionally reverberant) clean speech with noise at ``snr`` and rescale to avoid clipping.

    Returns the noisy mixture, its clean target (same gain, reverberant when
    an RIR is used), the noise crop offset and the applied gain. The SNR is
    measured against the reverberant clean signal.
    """
    target = convolve_rir(clean, rir) if rir is not None else clean
    n = len(target)
    offset = int(rng.integers(0, len(noise) - n + 1))
    crop = Waveform(noise.samples[offset : offset + n], noise.sample_rate)
    noisy, _ = mix_at_snr(target, crop, snr)
    peak = np.max(np.abs(noisy.samples))
    gain = min(1.0, MIX_PEAK / peak) if peak > 0 else 1.0
    return (Waveform(noisy.samples * gain, noisy.sample_rate), Waveform(target.samples * gain, target.sample_rate),
            offset, gain)


def _draw_tokens(rng: np.random.Generator, cfg: CorpusConfig) -> list[int]:
    k = int(rng.integers(cfg.min_tokens, cfg.max_tokens + 1))
    return [int(t) for t in rng.integers(0, len(WORDS), k)]


def build_corpus(cfg: CorpusConfig, root, seed: int = 0) -> dict[str, tuple[Manifest, Manifest]]:
    """Render train/test splits under ``root``; returns ``{split: (clean manifest, noisy manifest)}``.

    Layout: ``noise/<split>_<kind>_<k>.wav`` and, per split, ``clean/`` and
    ``noisy/`` wav folders with ``clean.tsv``, ``noisy.tsv`` and
    ``mixtures.tsv`` alongside. Clean and noisy records share ids.
    """
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
        probe = root / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"corpus directory {root} is not writable: {exc}") from exc
    config.save_config(root / "corpus.cfg", cfg)
    (root / "seed.txt").write_text(f"{seed}\n")
    write_vocab(root / "vocab.txt", VOCAB)

    out = {}
    splits = (("train", cfg.train_utterances, cfg.train_snr_low, cfg.train_snr_high),
              ("test", cfg.test_utterances, cfg.test_snr_low, cfg.test_snr_high))
    for split, count, lo, hi in splits:
        noises = {}
        for kind in cfg.noise_types:
            for k in range(cfg.noise_files_per_type):
                nid = f"{split}_{kind}_{k}"
                w = make_noise(kind, int(cfg.noise_seconds * cfg.sample_rate), derive_rng(seed, "noise/" + nid),
                               cfg.sample_rate)
                write_wav(root / "noise" / f"{nid}.wav", w)
                noises[nid] = read_wav(root / "noise" / f"{nid}.wav", cfg.sample_rate)
        noise_ids = sorted(noises)
        clean_recs, noisy_recs, specs = [], [], []
        for i in range(count):
            uid = f"{split}{i:05d}"
            rng = derive_rng(seed, uid)
            tokens = _draw_tokens(rng, cfg)
            utt_seed = int(rng.integers(2**31))
            clean = synth_utterance(tokens, utt_seed, cfg.sample_rate)
            nid = noise_ids[int(rng.integers(len(noise_ids)))]
            snr = float(rng.uniform(lo, hi))
            rir, rir_id = None, None
            if rng.uniform() < cfg.rir_probability:
                rir_id = f"rir_{uid}"
                rir = synth_rir(derive_rng(seed, rir_id), cfg.t60, cfg.sample_rate)
            noisy, target, offset, gain = render_mixture(clean, noises[nid], snr, rng, rir)
            transcript = TokenSequence.from_content(tokens)
            cpath = root / split / "clean" / f"{uid}.wav"
            npath = root / split / "noisy" / f"{uid}.wav"
            write_wav(cpath, target)
            write_wav(npath, noisy)
            clean_recs.append(ManifestRecord(uid, cpath, transcript, target.duration))
            noisy_recs.append(ManifestRecord(uid, npath, transcript, noisy.duration))
            specs.append(MixtureSpec(uid, uid, nid, snr, rir_id, utt_seed, offset, gain))
        cm, nm = Manifest(clean_recs, root / split), Manifest(noisy_recs, root / split)
        write_manifest(root / split / "clean.tsv", cm)
        write_manifest(root / split / "noisy.tsv", nm)
        write_mixtures(root / split / "mixtures.tsv", specs)
        log.info("rendered %d %s mixtures", count, split)
        out[split] = (cm, nm)
    return out


def load_noises(root, split: str = "train") -> list[Waveform]:
    paths = sorted((Path(root) / "noise").glob(f"{split}_*.wav"))
    if not paths:
        raise DomainError(f"no {split} noise files under {root}/noise")
    return [read_wav(p) for p in paths]
