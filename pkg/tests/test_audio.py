import wave

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from speech_unet.audio import (
    AudioBuffer,
    DatasetManifest,
    ManifestEntry,
    NormMeta,
    SynthSpec,
    WavError,
    denormalize,
    fit_noise,
    load_wav,
    mix_at_snr,
    noise_gain,
    normalize,
    prepare_pair,
    resample,
    segment,
    split_dataset,
    split_sizes,
    synth_corpus,
    synth_pairs,
    write_wav,
)
from speech_unet.metrics import snr

RATE = 16000


def _raw_wav(path, data, width, channels=1, rate=RATE):
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(channels)
        fh.setsampwidth(width)
        fh.setframerate(rate)
        fh.writeframes(data)


# ---------------------------------------------------------------- WAV


def test_16bit_ramp_round_trip(tmp_path):
    ramp = np.linspace(-1.0, 1.0 - 2**-15, 5000)
    write_wav(tmp_path / "r.wav", AudioBuffer(RATE, ramp))
    back = load_wav(tmp_path / "r.wav")
    assert back.sample_rate == RATE
    assert np.max(np.abs(back.samples - ramp)) <= 2**-15


def test_24bit_full_scale(tmp_path):
    values = [(1 << 23) - 1, -(1 << 23), 1, -1, 0]
    raw = b"".join(v.to_bytes(3, "little", signed=True) for v in values)
    _raw_wav(tmp_path / "a.wav", raw, 3)
    got = load_wav(tmp_path / "a.wav").samples
    np.testing.assert_array_equal(got, np.array(values) / 2**23)
    assert abs(got[0] - 0.99999988) < 1e-8


def test_24bit_writer_round_trip(tmp_path):
    x = np.random.default_rng(0).uniform(-0.9, 0.9, 300)
    write_wav(tmp_path / "x.wav", AudioBuffer(RATE, x), bits=24)
    assert np.max(np.abs(load_wav(tmp_path / "x.wav").samples - x)) <= 2**-23


def test_stereo_is_rejected(tmp_path):
    _raw_wav(tmp_path / "s.wav", b"\x00\x00" * 20, 2, channels=2)
    with pytest.raises(WavError, match="mono"):
        load_wav(tmp_path / "s.wav")


def test_unsupported_width(tmp_path):
    _raw_wav(tmp_path / "u8.wav", b"\x80" * 20, 1)
    with pytest.raises(WavError, match="8-bit"):
        load_wav(tmp_path / "u8.wav")


def test_truncated_file(tmp_path):
    write_wav(tmp_path / "t.wav", AudioBuffer(RATE, np.zeros(1000)))
    blob = (tmp_path / "t.wav").read_bytes()
    (tmp_path / "cut.wav").write_bytes(blob[:500])
    with pytest.raises(WavError):
        load_wav(tmp_path / "cut.wav")
    (tmp_path / "hdr.wav").write_bytes(blob[:20])
    with pytest.raises(WavError):
        load_wav(tmp_path / "hdr.wav")


def test_buffer_validation():
    with pytest.raises(ValueError):
        AudioBuffer(0, np.zeros(3))
    with pytest.raises(ValueError):
        AudioBuffer(RATE, np.zeros((2, 3)))


# ---------------------------------------------------------------- resampling


def test_same_rate_is_identity():
    buf = AudioBuffer(RATE, np.arange(10.0))
    assert resample(buf, RATE) is buf


def test_downsample_length_and_peak():
    t = np.arange(48000) / 48000
    out = resample(AudioBuffer(48000, np.sin(2 * np.pi * 440 * t)), 16000)
    assert len(out) == 16000 and out.sample_rate == 16000
    spec = np.abs(np.fft.rfft(out.samples))
    freqs = np.fft.rfftfreq(len(out), 1 / 16000)
    assert abs(freqs[np.argmax(spec)] - 440) <= freqs[1]


@pytest.mark.parametrize("src,dst,n", [(48000, 16000, 1001), (8000, 16000, 777), (44100, 16000, 4410)])
def test_length_rule(src, dst, n):
    assert len(resample(AudioBuffer(src, np.zeros(n)), dst)) == round(n * dst / src)


def test_downsample_suppresses_aliases():
    # 9 kHz is above the 8 kHz output Nyquist and would fold to 7 kHz
    t = np.arange(48000) / 48000
    tone = np.sin(2 * np.pi * 9000 * t)
    out = resample(AudioBuffer(48000, tone), 16000)
    assert np.sqrt(np.mean(out.samples[200:-200] ** 2)) < 0.01


def test_upsample_reproduces_tone():
    t = np.arange(8000) / 8000
    out = resample(AudioBuffer(8000, np.sin(2 * np.pi * 300 * t)), 16000)
    ref = np.sin(2 * np.pi * 300 * np.arange(16000) / 16000)
    assert np.max(np.abs(out.samples[100:-100] - ref[100:-100])) < 1e-2


# ---------------------------------------------------------------- normalization


def test_normalize_examples():
    y, meta = normalize(AudioBuffer(RATE, [-1.0, 0.0, 1.0]))
    np.testing.assert_array_equal(y.samples, [0.0, 0.5, 1.0])
    assert meta == NormMeta(0.5, 0.5)
    y, _ = normalize(AudioBuffer(RATE, [-0.5, 0.5]))
    np.testing.assert_array_equal(y.samples, [0.0, 1.0])


def test_all_zero_gets_identity_meta():
    y, meta = normalize(AudioBuffer(RATE, np.zeros(5)))
    assert meta == NormMeta()
    np.testing.assert_array_equal(y.samples, np.zeros(5))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=200).filter(lambda v: max(map(abs, v)) > 1e-6))
def test_normalize_is_invertible(values):
    buf = AudioBuffer(RATE, values)
    y, meta = normalize(buf)
    assert y.samples.min() >= 0.0 and y.samples.max() <= 1.0
    np.testing.assert_allclose(denormalize(y, meta).samples, buf.samples, atol=1e-6 * max(1.0, np.max(np.abs(values))))


def test_pair_uses_noisy_peak():
    clean = AudioBuffer(RATE, np.full(RATE, 0.1))
    noisy = AudioBuffer(RATE, np.full(RATE, 0.4))
    (clip,) = prepare_pair(clean, noisy)
    assert clip.meta == NormMeta(1 / 0.8, 0.5)
    np.testing.assert_allclose(clip.noisy, 1.0)
    np.testing.assert_allclose(clip.clean, 0.1 / 0.8 + 0.5)


# ---------------------------------------------------------------- segmentation


def _pair(n):
    x = np.arange(n, dtype=np.float64)
    return AudioBuffer(RATE, x), AudioBuffer(RATE, -x)


def test_segment_two_and_a_quarter_seconds():
    clips = segment(*_pair(36000))
    assert [c.start for c in clips] == [0, 8000, 16000, 24000]
    assert [c.valid_length for c in clips] == [16000, 16000, 16000, 12000]
    last = clips[-1]
    assert np.all(last.clean[12000:] == 0) and last.clean[11999] == 35999


@pytest.mark.parametrize("n,expected", [(16000, 1), (6400, 0), (0, 0), (8000, 1)])
def test_segment_short_inputs(n, expected):
    assert len(segment(*_pair(n))) == expected


def test_segment_length_mismatch():
    with pytest.raises(ValueError, match="lengths differ"):
        segment(AudioBuffer(RATE, np.zeros(10)), AudioBuffer(RATE, np.zeros(11)))


def _expected_clip_count(n, clip=16000, hop=8000, keep=8000):
    full = max(0, (n - clip) // hop + 1) if n >= clip else 0
    next_start = full * hop
    covered = (full - 1) * hop + clip if full else 0
    trailing = n - next_start
    return full + (1 if n > covered and trailing >= keep else 0)


def test_clip_count_closed_form_exhaustive():
    for k in range(61):
        n = 800 * k
        clips = segment(*_pair(n))
        assert len(clips) == _expected_clip_count(n), k * 0.05
        for c in clips:
            assert c.valid_length >= 8000
            assert len(c.clean) == len(c.noisy) == 16000


@settings(max_examples=30, deadline=None)
@given(st.integers(8000, 48000), st.integers(0, 3))
def test_clips_stay_aligned(n, seed):
    rng = np.random.default_rng(seed)
    clean = rng.standard_normal(n)
    noisy = clean + 0.3 * rng.standard_normal(n)
    for c in prepare_pair(AudioBuffer(RATE, clean), AudioBuffer(RATE, noisy)):
        a = c.clean[: c.valid_length] - 0.5
        b = c.noisy[: c.valid_length] - 0.5
        xc = np.correlate(b, a, mode="full")
        assert np.argmax(xc) - (c.valid_length - 1) == 0
        np.testing.assert_allclose(a, clean[c.start : c.start + c.valid_length] * c.meta.scale, atol=1e-12)


def test_padding_is_silence_after_normalization():
    clean = AudioBuffer(RATE, np.sin(np.arange(12000)))
    clips = prepare_pair(clean, clean)
    assert np.all(clips[-1].noisy[clips[-1].valid_length :] == 0.5)


# ---------------------------------------------------------------- mixing


def test_noise_gain_examples():
    x = np.array([1.0, -1.0, 1.0, -1.0])
    assert noise_gain(x, x, 0.0) == pytest.approx(1.0, abs=1e-15)
    assert noise_gain(x, x, 20.0) == pytest.approx(0.1, abs=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.floats(-10, 40), st.integers(0, 1000))
def test_mix_reaches_target_snr(target, seed):
    rng = np.random.default_rng(seed)
    clean = rng.standard_normal(4000)
    noise = rng.standard_normal(3000)
    noisy = mix_at_snr(clean, noise, target, np.random.default_rng(seed))
    assert abs(snr(clean, noisy) - target) < 1e-6


def test_mix_roundtrip_7p5():
    rng = np.random.default_rng(1)
    clean = rng.standard_normal(16000)
    assert abs(snr(clean, mix_at_snr(clean, rng.standard_normal(20000), 7.5, rng)) - 7.5) < 1e-6


def test_zero_power_errors():
    with pytest.raises(ValueError, match="clean"):
        mix_at_snr(np.zeros(10), np.ones(10), 5.0)
    with pytest.raises(ValueError, match="noise"):
        mix_at_snr(np.ones(10), np.zeros(10), 5.0)


def test_fit_noise_tiles_and_crops():
    noise = np.arange(5.0)
    tiled = fit_noise(noise, 12, np.random.default_rng(0))
    assert len(tiled) == 12
    assert np.all(np.diff(tiled) % 5 == 1) or np.all((np.diff(tiled) == 1) | (np.diff(tiled) == -4))
    cropped = fit_noise(np.arange(100.0), 10, np.random.default_rng(0))
    assert len(cropped) == 10 and np.all(np.diff(cropped) == 1)


# ---------------------------------------------------------------- splitting and manifests


def _manifest(n, seed=0):
    return DatasetManifest([ManifestEntry(f"c{i}.wav", f"n{i}.wav") for i in range(n)], seed=seed)


@pytest.mark.parametrize("n,sizes", [(100, (80, 10, 10)), (11, (8, 1, 2)), (10, (8, 1, 1))])
def test_split_sizes(n, sizes):
    assert split_sizes(n) == sizes
    m = split_dataset(_manifest(n))
    assert tuple(len(m.split(s)) for s in ("train", "val", "test")) == sizes


def test_split_is_deterministic_and_exhaustive():
    a, b = split_dataset(_manifest(57, 3)), split_dataset(_manifest(57, 3))
    assert [e.split for e in a.entries] == [e.split for e in b.entries]
    c = split_dataset(_manifest(57, 4))
    assert [e.split for e in a.entries] != [e.split for e in c.entries]
    names = [e.clean for s in ("train", "val", "test") for e in a.split(s)]
    assert sorted(names) == sorted(e.clean for e in a.entries)


def test_split_needs_ten_entries():
    with pytest.raises(ValueError, match="at least 10"):
        split_dataset(_manifest(9))


def test_manifest_round_trip(tmp_path):
    m = split_dataset(_manifest(12, 5))
    m.entries[0].snr_db = 7.5
    m.write(tmp_path / "m.tsv")
    lines = (tmp_path / "m.tsv").read_text().splitlines()
    assert lines[0].startswith("# speech-unet manifest v1")
    assert lines[1] == "clean\tnoisy\tsplit\tnoise_kind\tsnr_db"
    back = DatasetManifest.read(tmp_path / "m.tsv")
    assert back.seed == 5 and back.root == tmp_path
    assert [e.split for e in back.entries] == [e.split for e in m.entries]
    assert back.entries[0].snr_db == 7.5


def test_manifest_rejects_garbage(tmp_path):
    (tmp_path / "bad.tsv").write_text("hello\n")
    with pytest.raises(ValueError):
        DatasetManifest.read(tmp_path / "bad.tsv")


# ---------------------------------------------------------------- synthetic corpus


def test_synth_corpus_counts_and_provenance(tmp_path):
    spec = SynthSpec(n_utterances=20, min_seconds=0.5, max_seconds=0.6, seed=2)
    manifest, pairs = synth_corpus(spec, tmp_path)
    assert len(manifest.entries) == len(pairs) == 80
    manifest.check_files()
    back = DatasetManifest.read(tmp_path / "manifest.tsv")
    assert sorted({e.snr_db for e in back.entries}) == [0.0, 5.0, 10.0, 15.0]
    assert {e.noise_kind for e in back.entries} <= {"white", "pink", "babble"}
    for p in pairs:
        assert abs(p.measured_snr_db - p.snr_db) < 1e-6
        assert abs(snr(p.clean, p.noisy) - p.snr_db) < 1e-6
        assert np.max(np.abs(p.noisy)) <= 0.9 + 1e-12


def test_synth_is_bit_identical_per_seed(tmp_path):
    spec = SynthSpec(n_utterances=3, min_seconds=0.3, max_seconds=0.4, seed=9)
    synth_corpus(spec, tmp_path / "a")
    synth_corpus(spec, tmp_path / "b")
    for f in sorted((tmp_path / "a").rglob("*.wav")):
        assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()
    other = synth_pairs(SynthSpec(n_utterances=3, min_seconds=0.3, max_seconds=0.4, seed=10))
    assert not np.array_equal(other[0].noisy[:100], synth_pairs(spec)[0].noisy[:100])
