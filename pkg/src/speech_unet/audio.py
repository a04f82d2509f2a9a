"""Audio I/O and the data pipeline: resampling, scaling, clipping, mixing, splitting."""
from __future__ import annotations

import math
import wave
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np


SPLITS = ("train", "val", "test")
NOISE_KINDS = ("white", "pink", "babble")
# training SNR grid of the Noisy VCTK corpus
SNR_GRID = (15.0, 10.0, 5.0, 0.0)


class WavError(ValueError):
    pass


@dataclass
class AudioBuffer:
    sample_rate: int
    samples: np.ndarray

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError("sample rate must be positive")
        if self.samples.ndim != 1:
            raise ValueError("AudioBuffer holds mono audio only")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self):
        return len(self) / self.sample_rate


# ---------------------------------------------------------------- WAV


def load_wav(path):
    """Read a mono 16- or 24-bit PCM WAV file into [-1, 1)."""
    try:
        with wave.open(str(path), "rb") as fh:
            channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            nframes = fh.getnframes()
            raw = fh.readframes(nframes)
    except wave.Error as exc:
        raise WavError(f"{path}: unsupported or malformed WAV ({exc})") from exc
    except EOFError as exc:
        raise WavError(f"{path}: truncated WAV header") from exc
    if channels != 1:
        raise WavError(f"{path}: {channels} channels; only mono input is accepted")
    if width not in (2, 3):
        raise WavError(f"{path}: {8 * width}-bit samples; only 16- and 24-bit PCM are supported")
    if len(raw) != nframes * width:
        raise WavError(f"{path}: truncated data chunk ({len(raw)} of {nframes * width} bytes)")
    if width == 2:
        ints = np.frombuffer(raw, dtype="<i2").astype(np.int32)
    else:
        b = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        ints = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        ints = np.where(ints >= 1 << 23, ints - (1 << 24), ints)
    return AudioBuffer(rate, ints / float(1 << (8 * width - 1)))


def write_wav(path, buffer, bits=16):
    """Write 16-bit (default) or 24-bit PCM; samples are clipped to the representable range."""
    if bits not in (16, 24):
        raise WavError("only 16- and 24-bit output is supported")
    full = 1 << (bits - 1)
    ints = np.clip(np.round(buffer.samples * full), -full, full - 1).astype(np.int32)
    if bits == 16:
        raw = ints.astype("<i2").tobytes()
    else:
        u = (ints & 0xFFFFFF).astype(np.uint32)
        raw = np.stack([u & 0xFF, (u >> 8) & 0xFF, (u >> 16) & 0xFF], axis=1).astype(np.uint8).tobytes()
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(bits // 8)
        fh.setframerate(int(buffer.sample_rate))
        fh.writeframes(raw)


# ---------------------------------------------------------------- resampling

RESAMPLE_TAPS = 64
KAISER_BETA = 8.6


def resample(buffer, target_rate, taps=RESAMPLE_TAPS, beta=KAISER_BETA, rolloff=0.9):
    """Band-limited interpolation with a Kaiser-windowed sinc.

    Each output sample is a weighted sum of ``taps`` neighbouring input
    samples; the cutoff sits at ``rolloff`` times the Nyquist frequency of the
    lower of the two rates.
    """
    src = buffer.sample_rate
    if target_rate <= 0:
        raise ValueError("target rate must be positive")
    if target_rate == src:
        return buffer
    x = buffer.samples
    n_in = x.shape[0]
    n_out = int(round(n_in * target_rate / src))
    # cutoff in cycles per input sample
    fc = rolloff * 0.5 * min(src, target_rate) / src
    half = taps // 2
    xp = np.concatenate([np.zeros(half + 1), x, np.zeros(half + 1)])
    out = np.empty(n_out)
    offsets = np.arange(-half + 1, half + 1)
    norm = np.i0(beta)
    for lo in range(0, n_out, 8192):
        n = np.arange(lo, min(lo + 8192, n_out))
        t = n * (src / target_rate)
        base = np.floor(t).astype(np.int64)
        idx = base[:, None] + offsets[None, :]
        tau = t[:, None] - idx
        win = np.i0(beta * np.sqrt(np.clip(1.0 - (tau / half) ** 2, 0.0, None))) / norm
        h = 2.0 * fc * np.sinc(2.0 * fc * tau) * win
        out[n] = np.sum(h * xp[idx + half + 1], axis=1)
    return AudioBuffer(target_rate, out)


# ---------------------------------------------------------------- normalization


@dataclass(frozen=True)
class NormMeta:
    """Affine map ``y = x * scale + offset``."""

    scale: float = 1.0
    offset: float = 0.0


def norm_meta(samples):
    peak = float(np.max(np.abs(samples))) if len(samples) else 0.0
    if peak == 0.0:
        return NormMeta()
    return NormMeta(scale=1.0 / (2.0 * peak), offset=0.5)


def normalize(buffer, meta=None):
    """Map a waveform into [0, 1] with silence at 0.5.

    Uses the buffer's own peak unless ``meta`` is given (e.g. the noisy
    signal's, applied to its clean partner). An all-zero signal gets the
    identity map.
    """
    if meta is None:
        meta = norm_meta(buffer.samples)
    return AudioBuffer(buffer.sample_rate, buffer.samples * meta.scale + meta.offset), meta


def denormalize(buffer, meta):
    return AudioBuffer(buffer.sample_rate, (buffer.samples - meta.offset) / meta.scale)


# ---------------------------------------------------------------- clips


@dataclass
class ClipPair:
    clean: np.ndarray
    noisy: np.ndarray
    source: str
    start: int
    valid_length: int
    meta: NormMeta = field(default_factory=NormMeta)


def clip_starts(length, clip, hop, min_keep):
    """Start offsets of the kept clips, and how many samples of each are real.

    Full clips start every ``hop`` samples. When samples remain after the last
    full clip, one more clip starts a hop later and is kept if it holds at
    least ``min_keep`` real samples.
    """
    starts = []
    s = 0
    while s + clip <= length:
        starts.append((s, clip))
        s += hop
    covered = starts[-1][0] + clip if starts else 0
    if length > covered and length - s >= min_keep:
        starts.append((s, length - s))
    return starts


def segment(clean, noisy, clip_seconds=1.0, hop_seconds=0.5, min_seconds=0.5, meta=None, source=""):
    """Cut aligned clean/noisy buffers into fixed-length clips.

    A short trailing clip is zero-padded to full length and its
    ``valid_length`` records the real samples. For normalized buffers the
    padding is the normalization offset, i.e. zero in the signal domain.
    """
    if len(clean) != len(noisy):
        raise ValueError(f"clean and noisy lengths differ ({len(clean)} vs {len(noisy)})")
    if clean.sample_rate != noisy.sample_rate:
        raise ValueError("clean and noisy sample rates differ")
    rate = clean.sample_rate
    clip = int(round(clip_seconds * rate))
    hop = int(round(hop_seconds * rate))
    min_keep = int(round(min_seconds * rate))
    meta = meta or NormMeta()
    pairs = []
    for start, valid in clip_starts(len(clean), clip, hop, min_keep):
        c = np.full(clip, meta.offset)
        n = np.full(clip, meta.offset)
        c[:valid] = clean.samples[start : start + valid]
        n[:valid] = noisy.samples[start : start + valid]
        pairs.append(ClipPair(c, n, source, start, valid, meta))
    return pairs


def prepare_pair(clean, noisy, clip_seconds=1.0, hop_seconds=0.5, min_seconds=0.5, source=""):
    """Normalize a pair with the noisy signal's peak, then segment it."""
    meta = norm_meta(noisy.samples)
    c, _ = normalize(clean, meta)
    n, _ = normalize(noisy, meta)
    return segment(c, n, clip_seconds, hop_seconds, min_seconds, meta=meta, source=source)


# ---------------------------------------------------------------- mixing


def power(x):
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean(x * x))


def fit_noise(noise, length, rng=None):
    """Crop or tile ``noise`` to ``length`` samples from a seeded random offset."""
    noise = np.asarray(noise, dtype=np.float64)
    rng = rng if rng is not None else np.random.default_rng(0)
    if noise.shape[0] == 0:
        raise ValueError("empty noise signal")
    if noise.shape[0] >= length:
        start = int(rng.integers(0, noise.shape[0] - length + 1))
        return noise[start : start + length]
    start = int(rng.integers(0, noise.shape[0]))
    reps = -(-(length + start) // noise.shape[0])
    return np.tile(noise, reps)[start : start + length]


def noise_gain(clean, noise, snr_db):
    pc, pn = power(clean), power(noise)
    if pc <= 0:
        raise ValueError("clean signal has zero power")
    if pn <= 0:
        raise ValueError("noise signal has zero power")
    return math.sqrt(pc / pn) * 10.0 ** (-snr_db / 20.0)


def mix_at_snr(clean, noise, snr_db, rng=None):
    """``clean + alpha * noise`` with alpha chosen so the mix has the target SNR."""
    clean = np.asarray(clean, dtype=np.float64)
    noise = fit_noise(noise, clean.shape[0], rng)
    return clean + noise_gain(clean, noise, snr_db) * noise


# ---------------------------------------------------------------- manifests


@dataclass
class ManifestEntry:
    clean: str
    noisy: str
    split: str = "train"
    noise_kind: str = "unknown"
    snr_db: float = float("nan")


MANIFEST_COLUMNS = ("clean", "noisy", "split", "noise_kind", "snr_db")


@dataclass
class DatasetManifest:
    """Clean/noisy file pairs; paths are stored relative to ``root``."""

    entries: list = field(default_factory=list)
    seed: int = 0
    sample_rate: int = 16000
    root: Path = Path(".")

    def resolve(self, rel):
        return self.root / rel

    def split(self, name):
        return [e for e in self.entries if e.split == name]

    def write(self, path):
        """Tab-separated text. Line 1 carries ``# key=value`` metadata, line 2 the column names."""
        path = Path(path)
        lines = [
            f"# speech-unet manifest v1\tseed={self.seed}\tsample_rate={self.sample_rate}",
            "\t".join(MANIFEST_COLUMNS),
        ]
        for e in self.entries:
            lines.append("\t".join([e.clean, e.noisy, e.split, e.noise_kind, _fmt_snr(e.snr_db)]))
        path.write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path):
        path = Path(path)
        text = path.read_text().splitlines()
        if len(text) < 2 or not text[0].startswith("# speech-unet manifest"):
            raise ValueError(f"{path}: not a manifest file")
        meta = dict(kv.split("=", 1) for kv in text[0].split("\t")[1:])
        if tuple(text[1].split("\t")) != MANIFEST_COLUMNS:
            raise ValueError(f"{path}: unexpected column header {text[1]!r}")
        entries = []
        for n, line in enumerate(text[2:], start=3):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != len(MANIFEST_COLUMNS):
                raise ValueError(f"{path}:{n}: expected {len(MANIFEST_COLUMNS)} fields, got {len(parts)}")
            clean, noisy, split, kind, snr = parts
            if split not in SPLITS:
                raise ValueError(f"{path}:{n}: unknown split {split!r}")
            entries.append(ManifestEntry(clean, noisy, split, kind, float(snr)))
        return cls(entries, int(meta.get("seed", 0)), int(meta.get("sample_rate", 16000)), path.parent)

    def check_files(self):
        missing = [p for e in self.entries for p in (e.clean, e.noisy) if not self.resolve(p).exists()]
        if missing:
            raise FileNotFoundError(f"{len(missing)} manifest files missing, e.g. {missing[0]}")


def _fmt_snr(x):
    return "nan" if math.isnan(x) else f"{x:g}"


def split_sizes(n, ratios=(8, 1, 1)):
    total = sum(ratios)
    n_train = n * ratios[0] // total
    n_val = n * ratios[1] // total
    return n_train, n_val, n - n_train - n_val


def split_dataset(manifest, ratios=(8, 1, 1), seed=None):
    """Shuffle under ``seed`` and label entries train/val/test by the floor rule."""
    n = len(manifest.entries)
    if n < 10:
        raise ValueError(f"need at least 10 entries to split, got {n}")
    seed = manifest.seed if seed is None else seed
    n_train, n_val, _ = split_sizes(n, ratios)
    order = np.random.default_rng(seed).permutation(n)
    labels = np.empty(n, dtype=object)
    labels[order[:n_train]] = "train"
    labels[order[n_train : n_train + n_val]] = "val"
    labels[order[n_train + n_val :]] = "test"
    entries = [replace(e, split=str(lab)) for e, lab in zip(manifest.entries, labels)]
    return replace(manifest, entries=entries, seed=seed)


# ---------------------------------------------------------------- synthetic corpus


@dataclass
class SynthSpec:
    n_utterances: int = 20
    snr_levels: tuple = SNR_GRID
    noise_kinds: tuple = NOISE_KINDS
    sample_rate: int = 16000
    min_seconds: float = 2.0
    max_seconds: float = 3.0
    seed: int = 0


def synth_speech(rate, seconds, rng):
    """Speech-like clean signal: voiced harmonic syllables, glides, AM tones, pauses."""
    n = int(round(seconds * rate))
    out = np.zeros(n)
    t0 = int(rng.integers(int(0.05 * rate), int(0.15 * rate)))
    while t0 < n - int(0.06 * rate):
        dur = int(rng.integers(int(0.08 * rate), int(0.28 * rate)))
        dur = min(dur, n - t0)
        t = np.arange(dur) / rate
        kind = rng.choice(3, p=[0.6, 0.2, 0.2])
        if kind == 0:
            f0 = rng.uniform(100, 220) * (1 + rng.uniform(-0.15, 0.15) * t / max(t[-1], 1e-9))
            phase = 2 * np.pi * np.cumsum(f0) / rate
            formants = rng.uniform([300, 900, 2000], [800, 1800, 3000])
            seg = np.zeros(dur)
            for k in range(1, int(3800 // f0.max()) + 1):
                fk = k * f0.mean()
                gain = sum(np.exp(-(((fk - fm) / 250.0) ** 2)) for fm in formants) + 0.05
                seg += gain / k**0.5 * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
        elif kind == 1:
            f_a, f_b = rng.uniform(250, 1200), rng.uniform(800, 3000)
            phase = 2 * np.pi * (f_a * t + 0.5 * (f_b - f_a) / max(t[-1], 1e-9) * t**2)
            seg = np.sin(phase)
        else:
            fc, fm = rng.uniform(300, 2500), rng.uniform(3, 12)
            seg = (1 + 0.8 * np.sin(2 * np.pi * fm * t)) * np.sin(2 * np.pi * fc * t)
        env = np.sin(np.pi * np.arange(dur) / dur) ** 2
        out[t0 : t0 + dur] += rng.uniform(0.4, 1.0) * env * seg / (np.max(np.abs(seg)) + 1e-12)
        t0 += dur + int(rng.integers(int(0.02 * rate), int(0.12 * rate)))
    peak = np.max(np.abs(out))
    return out * (0.5 / peak) if peak > 0 else out


def synth_noise(kind, rate, n, rng):
    if kind == "white":
        return rng.standard_normal(n)
    if kind == "pink":
        spec = np.fft.rfft(rng.standard_normal(n))
        f = np.fft.rfftfreq(n, 1.0 / rate)
        f[0] = f[1] if n > 1 else 1.0
        return np.fft.irfft(spec / np.sqrt(f), n)
    if kind == "babble":
        # detuned tone clusters with slow amplitude modulation
        t = np.arange(n) / rate
        out = np.zeros(n)
        for base in rng.uniform(150, 3000, size=6):
            for detune in (-3.0, 0.0, 3.0):
                am = 1 + 0.7 * np.sin(2 * np.pi * rng.uniform(0.5, 4.0) * t + rng.uniform(0, 2 * np.pi))
                out += am * np.sin(2 * np.pi * (base + detune + rng.uniform(-1, 1)) * t + rng.uniform(0, 2 * np.pi))
        return out
    raise ValueError(f"unknown noise kind {kind!r}")


@dataclass
class SynthPair:
    utterance: int
    clean: np.ndarray
    noisy: np.ndarray
    noise_kind: str
    snr_db: float
    measured_snr_db: float


def synth_pairs(spec):
    """Generate the corpus in memory; each utterance draws from its own seed."""
    pairs = []
    for u in range(spec.n_utterances):
        rng = np.random.default_rng([spec.seed, u])
        seconds = rng.uniform(spec.min_seconds, spec.max_seconds)
        clean = synth_speech(spec.sample_rate, seconds, rng)
        for snr in spec.snr_levels:
            kind = spec.noise_kinds[int(rng.integers(len(spec.noise_kinds)))]
            noise = synth_noise(kind, spec.sample_rate, clean.shape[0], rng)
            noisy = mix_at_snr(clean, noise, snr, rng)
            measured = 10 * np.log10(np.sum(clean**2) / np.sum((noisy - clean) ** 2))
            # keep the mix inside the 16-bit range; joint scaling leaves the SNR unchanged
            g = min(1.0, 0.9 / max(np.max(np.abs(noisy)), 1e-12))
            pairs.append(SynthPair(u, clean * g, noisy * g, kind, float(snr), float(measured)))
    return pairs


def synth_corpus(spec, out_dir, manifest_name="manifest.tsv"):
    """Write clean/noisy WAV pairs plus a manifest (all entries labelled ``train``)."""
    out_dir = Path(out_dir)
    (out_dir / "clean").mkdir(parents=True, exist_ok=True)
    (out_dir / "noisy").mkdir(parents=True, exist_ok=True)
    entries = []
    pairs = synth_pairs(spec)
    for p in pairs:
        clean_rel = f"clean/utt{p.utterance:04d}_{_snr_tag(p.snr_db)}.wav"
        noisy_rel = f"noisy/utt{p.utterance:04d}_{p.noise_kind}_{_snr_tag(p.snr_db)}.wav"
        write_wav(out_dir / clean_rel, AudioBuffer(spec.sample_rate, p.clean))
        write_wav(out_dir / noisy_rel, AudioBuffer(spec.sample_rate, p.noisy))
        entries.append(ManifestEntry(clean_rel, noisy_rel, "train", p.noise_kind, p.snr_db))
    manifest = DatasetManifest(entries, spec.seed, spec.sample_rate, out_dir)
    manifest.write(out_dir / manifest_name)
    return manifest, pairs


def _snr_tag(snr):
    return ("m" if snr < 0 else "") + f"{abs(snr):g}dB".replace(".", "p")


def list_wavs(directory):
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() == ".wav")


def ensure_rate(buffer, rate):
    return buffer if buffer.sample_rate == rate else resample(buffer, rate)
