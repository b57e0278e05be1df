"""Evaluation metrics (numpy, outside the autograd graph) and the report table."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

from .errors import DomainError, ShapeError
from .tokens import TokenSequence

CAP_DB = 60.0

# STOI constants from the original publication
STOI_FS = 10000
STOI_FRAME = 256
STOI_NFFT = 512
STOI_BANDS = 15
STOI_MIN_FREQ = 150.0
STOI_SEGMENT = 30
STOI_BETA = -15.0
STOI_DYN_RANGE = 40.0


def _pair(est, ref):
    est = np.asarray(getattr(est, "samples", est), dtype=np.float64)
    ref = np.asarray(getattr(ref, "samples", ref), dtype=np.float64)
    if est.shape != ref.shape:
        raise ShapeError(f"estimate {est.shape} vs reference {ref.shape}")
    return est, ref


def _projection_ratio_db(est: np.ndarray, ref: np.ndarray) -> float:
    ref_energy = float(np.dot(ref, ref))
    if ref_energy == 0.0:
        raise DomainError("reference signal is zero")
    target = np.dot(est, ref) / ref_energy * ref
    residual = est - target
    t, r = float(np.dot(target, target)), float(np.dot(residual, residual))
    if r == 0.0:
        return CAP_DB
    if t == 0.0:
        return -CAP_DB
    return float(np.clip(10.0 * math.log10(t / r), -CAP_DB, CAP_DB))


def si_sdr(est, ref) -> float:
    est, ref = _pair(est, ref)
    return _projection_ratio_db(est - est.mean(), ref - ref.mean())


def sdr(est, ref) -> float:
    """Energy ratio of the best scalar-scaled reference to the remaining residual."""
    est, ref = _pair(est, ref)
    return _projection_ratio_db(est, ref)


# --- STOI ----------------------------------------------------------------


def _third_octave_matrix(fs: int, nfft: int, bands: int, min_freq: float) -> np.ndarray:
    f = np.linspace(0, fs, nfft + 1)[: nfft // 2 + 1]
    k = np.arange(bands)
    lo = min_freq * 2.0 ** ((2 * k - 1) / 6)
    hi = min_freq * 2.0 ** ((2 * k + 1) / 6)
    obm = np.zeros((bands, f.size))
    for i in range(bands):
        a = int(np.argmin((f - lo[i]) ** 2))
        b = int(np.argmin((f - hi[i]) ** 2))
        obm[i, a:b] = 1.0
    return obm


def _frames(x: np.ndarray, n: int, hop: int) -> np.ndarray:
    w = np.hanning(n + 2)[1:-1]
    count = (x.size - n) // hop + 1
    if count <= 0:
        return np.zeros((0, n))
    idx = np.arange(n)[None, :] + hop * np.arange(count)[:, None]
    return x[idx] * w


def _overlap_add(frames: np.ndarray, hop: int) -> np.ndarray:
    count, n = frames.shape
    out = np.zeros((count - 1) * hop + n)
    for i in range(count):
        out[i * hop : i * hop + n] += frames[i]
    return out


def _remove_silent_frames(x, y, dyn_range, n, hop):
    fx, fy = _frames(x, n, hop), _frames(y, n, hop)
    energy = 20 * np.log10(np.linalg.norm(fx, axis=1) + np.finfo(float).eps)
    keep = (np.max(energy) - dyn_range - energy) < 0
    if not np.any(keep):
        return np.zeros(0), np.zeros(0)
    return _overlap_add(fx[keep], hop), _overlap_add(fy[keep], hop)


def stoi(est, ref, sample_rate: int) -> float:
    """Short-time objective intelligibility of ``est`` against the clean ``ref``."""
    est, ref = _pair(est, ref)
    if sample_rate != STOI_FS:
        g = math.gcd(int(sample_rate), STOI_FS)
        ref = resample_poly(ref, STOI_FS // g, sample_rate // g)
        est = resample_poly(est, STOI_FS // g, sample_rate // g)
    ref, est = _remove_silent_frames(ref, est, STOI_DYN_RANGE, STOI_FRAME, STOI_FRAME // 2)
    spec_x = np.fft.rfft(_frames(ref, STOI_FRAME, STOI_FRAME // 2), STOI_NFFT).T
    spec_y = np.fft.rfft(_frames(est, STOI_FRAME, STOI_FRAME // 2), STOI_NFFT).T
    if spec_x.shape[1] < STOI_SEGMENT:
        raise DomainError("not enough speech-active signal for STOI (need 384 ms after silence removal)")
    obm = _third_octave_matrix(STOI_FS, STOI_NFFT, STOI_BANDS, STOI_MIN_FREQ)
    x_tob = np.sqrt(obm @ np.abs(spec_x) ** 2)
    y_tob = np.sqrt(obm @ np.abs(spec_y) ** 2)
    clip = 10 ** (-STOI_BETA / 20)
    eps = np.finfo(float).eps
    scores = []
    for m in range(STOI_SEGMENT, x_tob.shape[1] + 1):
        xs = x_tob[:, m - STOI_SEGMENT : m]
        ys = y_tob[:, m - STOI_SEGMENT : m]
        scale = np.linalg.norm(xs, axis=1, keepdims=True) / (np.linalg.norm(ys, axis=1, keepdims=True) + eps)
        yp = np.minimum(ys * scale, xs * (1 + clip))
        xs = xs - xs.mean(1, keepdims=True)
        yp = yp - yp.mean(1, keepdims=True)
        xs = xs / (np.linalg.norm(xs, axis=1, keepdims=True) + eps)
        yp = yp / (np.linalg.norm(yp, axis=1, keepdims=True) + eps)
        scores.append(np.mean(np.sum(xs * yp, axis=1)))
    return float(np.mean(scores))


# --- error rate ----------------------------------------------------------


@dataclass(frozen=True)
class EditCounts:
    rate: float
    substitutions: int
    deletions: int
    insertions: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    def __iter__(self):
        return iter((self.rate, self.substitutions, self.deletions, self.insertions))


def _content(seq):
    return list(seq.content) if isinstance(seq, TokenSequence) else list(seq)


def edit_distance(ref, hyp) -> tuple[int, int, int]:
    """Minimal-cost (S, D, I) alignment; among equal totals, prefers fewer edits of later kinds."""
    ref, hyp = _content(ref), _content(hyp)
    n, m = len(ref), len(hyp)
    # each cell holds (total, S, D, I)
    prev = [(j, 0, 0, j) for j in range(m + 1)]
    for i in range(1, n + 1):
        cur = [(i, 0, i, 0)]
        for j in range(1, m + 1):
            diag = prev[j - 1]
            if ref[i - 1] == hyp[j - 1]:
                best = diag
            else:
                best = (diag[0] + 1, diag[1] + 1, diag[2], diag[3])
            up = prev[j]
            left = cur[j - 1]
            best = min(best, (up[0] + 1, up[1], up[2] + 1, up[3]), (left[0] + 1, left[1], left[2], left[3] + 1))
            cur.append(best)
        prev = cur
    _, s, d, ins = prev[m]
    return s, d, ins


def error_rate(ref, hyp) -> EditCounts:
    ref_c = _content(ref)
    if not ref_c:
        raise DomainError("reference sequence is empty")
    s, d, i = edit_distance(ref_c, hyp)
    return EditCounts((s + d + i) / len(ref_c), s, d, i)


def relative_improvement(before: float, after: float) -> float:
    """Percentage change ``100 * (before - after) / before``."""
    return 100.0 * (before - after) / before


# --- report ------------------------------------------------------------------

REPORT_COLUMNS = ("system", "id", "si_sdr", "sdr", "stoi", "ref_tokens", "substitutions", "deletions",
                  "insertions", "hypothesis")


@dataclass
class UtteranceRow:
    system: str
    id: str
    si_sdr: float | None
    sdr: float | None
    stoi: float | None
    ref_tokens: int
    substitutions: int
    deletions: int
    insertions: int
    hypothesis: str = ""


@dataclass
class SystemSummary:
    system: str
    utterances: int
    si_sdr: float | None
    sdr: float | None
    stoi: float | None
    ter: float


@dataclass
class EvalReport:
    rows: list[UtteranceRow] = field(default_factory=list)

    def systems(self) -> list[str]:
        seen = []
        for r in self.rows:
            if r.system not in seen:
                seen.append(r.system)
        return seen

    def summary(self, system: str) -> SystemSummary:
        rows = [r for r in self.rows if r.system == system]
        if not rows:
            raise KeyError(system)

        def mean(attr):
            vals = [getattr(r, attr) for r in rows if getattr(r, attr) is not None]
            return float(np.mean(vals)) if vals else None

        tokens = sum(r.ref_tokens for r in rows)
        errors = sum(r.substitutions + r.deletions + r.insertions for r in rows)
        return SystemSummary(system, len(rows), mean("si_sdr"), mean("sdr"), mean("stoi"), 100.0 * errors / tokens)

    def summaries(self) -> list[SystemSummary]:
        return [self.summary(s) for s in self.systems()]

    def to_tsv(self) -> str:
        def fmt(v):
            if v is None:
                return "-"
            return f"{v:.6f}" if isinstance(v, float) else str(v)

        lines = ["\t".join(REPORT_COLUMNS)]
        for r in self.rows:
            lines.append("\t".join(fmt(getattr(r, c)) for c in REPORT_COLUMNS))
        lines.append("")
        lines.append("# summary")
        lines.append("\t".join(("system", "utterances", "si_sdr_db", "sdr_db", "stoi", "ter_pct")))
        for s in self.summaries():
            lines.append("\t".join((s.system, str(s.utterances), fmt(s.si_sdr), fmt(s.sdr), fmt(s.stoi),
                                    f"{s.ter:.4f}")))
        return "\n".join(lines) + "\n"

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_tsv())
        return path

    @classmethod
    def from_tsv(cls, text: str) -> "EvalReport":
        rows = []
        lines = text.splitlines()
        for line in lines[1:]:
            if not line or line.startswith("#"):
                break
            c = line.split("\t")
            opt = lambda v: None if v == "-" else float(v)  # noqa: E731
            rows.append(UtteranceRow(c[0], c[1], opt(c[2]), opt(c[3]), opt(c[4]), int(c[5]), int(c[6]), int(c[7]),
                                     int(c[8]), c[9] if len(c) > 9 else ""))
        return cls(rows)
