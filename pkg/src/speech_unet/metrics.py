"""Objective quality measures: SNR, segmental SNR and STOI, plus report assembly."""
from __future__ import annotations

import logging
import re
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .audio import AudioBuffer, resample, write_wav

log = logging.getLogger(__name__)

SNR_CAP_DB = 100.0
SSNR_FRAME_SECONDS = 0.016
SSNR_MIN_DB, SSNR_MAX_DB = -10.0, 35.0

# STOI constants (Taal et al. 2011)
STOI_FS = 10000
STOI_FRAME = 256
STOI_NFFT = 512
STOI_BANDS = 15
STOI_MIN_FREQ = 150
STOI_SEGMENT = 30
STOI_BETA = -15.0
STOI_DYN_RANGE = 40.0
_EPS = np.finfo(np.float64).eps


class MetricError(ValueError):
    pass


def _pair(clean, test):
    clean = np.asarray(clean, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if clean.shape != test.shape or clean.ndim != 1:
        raise MetricError(f"signals must be 1-D and equally long ({clean.shape} vs {test.shape})")
    return clean, test


def snr(clean, test):
    """``10 log10(sum clean^2 / sum (clean - test)^2)`` in dB, capped at +100."""
    clean, test = _pair(clean, test)
    signal = np.sum(clean**2)
    if signal <= 0:
        raise MetricError("clean signal has zero power")
    noise = np.sum((clean - test) ** 2)
    if noise == 0:
        return SNR_CAP_DB
    return float(min(10.0 * np.log10(signal / noise), SNR_CAP_DB))


def ssnr(clean, test, sample_rate=16000, frame_seconds=SSNR_FRAME_SECONDS):
    """Mean of per-frame SNRs over non-overlapping frames, each clamped to [-10, 35] dB.

    Frames where the clean signal is silent are skipped; a trailing partial
    frame is dropped.
    """
    clean, test = _pair(clean, test)
    frame = int(round(frame_seconds * sample_rate))
    n = clean.shape[0] // frame
    c = clean[: n * frame].reshape(n, frame)
    e = c - test[: n * frame].reshape(n, frame)
    ce = np.sum(c**2, axis=1)
    ee = np.sum(e**2, axis=1)
    keep = ce > 0
    if not np.any(keep):
        raise MetricError("no frame with nonzero clean energy")
    ce, ee = ce[keep], ee[keep]
    with np.errstate(divide="ignore"):
        per_frame = np.where(ee > 0, 10.0 * np.log10(ce / np.where(ee > 0, ee, 1.0)), SSNR_MAX_DB)
    return float(np.mean(np.clip(per_frame, SSNR_MIN_DB, SSNR_MAX_DB)))


# ---------------------------------------------------------------- STOI


def third_octave_bands(fs=STOI_FS, nfft=STOI_NFFT, num_bands=STOI_BANDS, min_freq=STOI_MIN_FREQ):
    """Binary band matrix ``(num_bands, nfft // 2 + 1)`` and the centre frequencies."""
    f = np.linspace(0, fs, nfft + 1)[: nfft // 2 + 1]
    k = np.arange(num_bands)
    centres = 2.0 ** (k / 3.0) * min_freq
    lows = min_freq * 2.0 ** ((2 * k - 1) / 6.0)
    highs = min_freq * 2.0 ** ((2 * k + 1) / 6.0)
    obm = np.zeros((num_bands, f.size))
    for i in range(num_bands):
        lo = int(np.argmin((f - lows[i]) ** 2))
        hi = int(np.argmin((f - highs[i]) ** 2))
        obm[i, lo:hi] = 1.0
    return obm, centres


def _frames(x, size, hop, window):
    starts = range(0, x.shape[0] - size, hop)
    return np.array([window * x[i : i + size] for i in starts]).reshape(-1, size)


def _overlap_add(frames, hop):
    n, size = frames.shape
    out = np.zeros((n - 1) * hop + size if n else 0)
    for i in range(n):
        out[i * hop : i * hop + size] += frames[i]
    return out


def _drop_silent_frames(x, y, dyn_range, size, hop):
    window = np.hanning(size + 2)[1:-1]
    xf = _frames(x, size, hop, window)
    yf = _frames(y, size, hop, window)
    if xf.shape[0] == 0:
        return np.zeros(0), np.zeros(0)
    energy = 20 * np.log10(np.linalg.norm(xf, axis=1) + _EPS)
    keep = energy > energy.max() - dyn_range
    return _overlap_add(xf[keep], hop), _overlap_add(yf[keep], hop)


def _spectrogram(x, size, nfft, hop):
    window = np.hanning(size + 2)[1:-1]
    frames = _frames(x, size, hop, window)
    return np.fft.rfft(frames, n=nfft, axis=1).T


def stoi(clean, test, sample_rate=16000):
    """Short-time objective intelligibility in [0, 1].

    Both signals are taken to 10 kHz; frames more than 40 dB below the
    loudest clean frame are dropped from both; one-third-octave envelopes
    over 30-frame segments are correlated after normalizing the test
    envelope and clipping it at -15 dB signal-to-distortion.
    """
    clean, test = _pair(clean, test)
    if sample_rate != STOI_FS:
        clean = resample(AudioBuffer(sample_rate, clean), STOI_FS).samples
        test = resample(AudioBuffer(sample_rate, test), STOI_FS).samples
    hop = STOI_FRAME // 2
    x, y = _drop_silent_frames(clean, test, STOI_DYN_RANGE, STOI_FRAME, hop)
    obm, _ = third_octave_bands()
    x_spec = _spectrogram(x, STOI_FRAME, STOI_NFFT, hop)
    y_spec = _spectrogram(y, STOI_FRAME, STOI_NFFT, hop)
    if x_spec.shape[1] < STOI_SEGMENT:
        raise MetricError(
            f"signal too short for STOI: {x_spec.shape[1]} frames after silence removal, need {STOI_SEGMENT}"
        )
    x_tob = np.sqrt(obm @ np.abs(x_spec) ** 2)
    y_tob = np.sqrt(obm @ np.abs(y_spec) ** 2)
    n = STOI_SEGMENT
    xs = np.stack([x_tob[:, m - n : m] for m in range(n, x_tob.shape[1] + 1)])
    ys = np.stack([y_tob[:, m - n : m] for m in range(n, y_tob.shape[1] + 1)])
    gain = np.linalg.norm(xs, axis=2, keepdims=True) / (np.linalg.norm(ys, axis=2, keepdims=True) + _EPS)
    clip = 10 ** (-STOI_BETA / 20)
    yp = np.minimum(ys * gain, xs * (1 + clip))
    yp = yp - yp.mean(axis=2, keepdims=True)
    xs = xs - xs.mean(axis=2, keepdims=True)
    yp /= np.linalg.norm(yp, axis=2, keepdims=True) + _EPS
    xs /= np.linalg.norm(xs, axis=2, keepdims=True) + _EPS
    d = float(np.sum(yp * xs) / (xs.shape[0] * xs.shape[1]))
    return float(np.clip(d, 0.0, 1.0))


# ---------------------------------------------------------------- PESQ adapter

_NUMBER = re.compile(r"[-+]?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?")


def pesq_external(clean_path, test_path, command, timeout=120):
    """Score from an external PESQ tool, or ``None`` when unavailable.

    ``command`` is a template with ``{clean}`` and ``{test}`` placeholders; the
    last number printed on stdout is taken as the score.
    """
    if not command:
        return None
    argv = [part.format(clean=str(clean_path), test=str(test_path)) for part in shlex.split(command)]
    try:
        proc = subprocess.run(argv, capture_output=True, text=True, timeout=timeout, check=False)
    except (OSError, subprocess.TimeoutExpired) as exc:
        log.warning("pesq command failed to run: %s", exc)
        return None
    if proc.returncode != 0:
        log.warning("pesq command exited with %d: %s", proc.returncode, proc.stderr.strip()[:200])
        return None
    numbers = _NUMBER.findall(proc.stdout)
    if not numbers:
        log.warning("pesq command printed no score: %r", proc.stdout[:200])
        return None
    return float(numbers[-1])


# ---------------------------------------------------------------- reports


class Utterance(NamedTuple):
    id: str
    clean: np.ndarray
    noisy: np.ndarray


@dataclass
class MetricsRow:
    id: str
    snr: float
    ssnr: float
    stoi: float
    pesq: float | None = None


COLUMNS = ("snr", "ssnr", "pesq", "stoi")
COLUMN_TITLES = {"snr": "SNR", "ssnr": "SSNR", "pesq": "PESQ", "stoi": "STOI"}


@dataclass
class MetricsReport:
    label: str
    rows: list = field(default_factory=list)

    def mean(self, column):
        vals = [getattr(r, column) for r in self.rows]
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def means(self):
        return {c: self.mean(c) for c in COLUMNS}


@dataclass
class EvaluationReport:
    """The ``Input`` report (raw noisy signals) followed by one report per system."""

    reports: list = field(default_factory=list)

    def __getitem__(self, label):
        for r in self.reports:
            if r.label == label:
                return r
        raise KeyError(label)

    def to_tsv(self):
        lines = ["system\tid\t" + "\t".join(COLUMNS)]
        for rep in self.reports:
            for row in rep.rows:
                lines.append("\t".join([rep.label, row.id] + [_fmt(getattr(row, c)) for c in COLUMNS]))
            lines.append("\t".join([rep.label, "MEAN"] + [_fmt(rep.mean(c)) for c in COLUMNS]))
        return "\n".join(lines) + "\n"

    def to_table(self):
        width = max(12, *(len(r.label) for r in self.reports))
        head = f"{'Model':<{width}} | " + " ".join(f"{COLUMN_TITLES[c]:>8}" for c in COLUMNS)
        lines = [head, "-" * len(head)]
        for rep in self.reports:
            cells = []
            for c in COLUMNS:
                v = rep.mean(c)
                cells.append(f"{'-':>8}" if v is None else f"{v:>8.3f}")
            lines.append(f"{rep.label:<{width}} | " + " ".join(cells))
        return "\n".join(lines) + "\n"


def _fmt(v):
    return "" if v is None else repr(float(v))


def score_row(uid, clean, test, sample_rate=16000, pesq_command=None):
    row = MetricsRow(uid, snr(clean, test), ssnr(clean, test, sample_rate), stoi(clean, test, sample_rate))
    if pesq_command:
        with tempfile.TemporaryDirectory() as tmp:
            cp, tp = Path(tmp) / "clean.wav", Path(tmp) / "test.wav"
            write_wav(cp, AudioBuffer(sample_rate, clean))
            write_wav(tp, AudioBuffer(sample_rate, test))
            row.pesq = pesq_external(cp, tp, pesq_command)
    return row


def evaluate(utterances, enhanced, sample_rate=16000, label="Enhanced", pesq_command=None):
    """Score the raw noisy inputs and the enhanced outputs against the clean references.

    ``enhanced`` is a list of signals aligned with ``utterances``, already
    mapped back to the original amplitude scale.
    """
    utterances = list(utterances)
    enhanced = list(enhanced)
    if len(utterances) != len(enhanced):
        raise MetricError(f"{len(utterances)} utterances but {len(enhanced)} enhanced signals")
    inp = MetricsReport("Input")
    out = MetricsReport(label)
    for u, e in zip(utterances, enhanced):
        inp.rows.append(score_row(u.id, u.clean, u.noisy, sample_rate, pesq_command))
        out.rows.append(score_row(u.id, u.clean, e, sample_rate, pesq_command))
    return EvaluationReport([inp, out])
