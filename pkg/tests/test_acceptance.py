"""Acceptance criteria, one test per criterion.

Each test prints a PASS/FAIL line (also collected into the terminal summary)
before asserting. Criteria 6 and 7 train networks and take minutes.
"""
import time

import numpy as np

from conftest import record
from oracles import FD_EPS, FD_RTOL, gradcheck, leaf
from speech_unet import experiment as ex
from speech_unet import tensor as T
from speech_unet.audio import (
    AudioBuffer,
    DatasetManifest,
    ManifestEntry,
    SynthSpec,
    denormalize,
    mix_at_snr,
    normalize,
    prepare_pair,
    segment,
    split_dataset,
    synth_pairs,
    synth_speech,
)
from speech_unet.cli import main
from speech_unet.config import load_config
from speech_unet.estimator import SpeechUNetEnhancer
from speech_unet.metrics import snr, ssnr, stoi
from speech_unet.model import VARIANTS, UNetConfig, build_model, load_checkpoint, param_count
from speech_unet.receptive_field import (
    LayerSpec,
    baseline_encoder_specs,
    connectivity_pool,
    empirical_rf,
    receptive_field,
    stack_forward,
)

# reduced-width network used for the training criteria
SMALL_WIDTHS = (4, 4, 8, 8, 16, 16)


def _elapsed(t0):
    return time.perf_counter() - t0


# ---------------------------------------------------------------- 1


def test_c01_rf_formula_reproduction(capsys):
    t0 = time.perf_counter()
    assert main(["rf-report", "--sample-rate", "16000"]) == 0
    out16 = capsys.readouterr().out
    assert main(["rf-report", "--sample-rate", "48000"]) == 0
    out48 = capsys.readouterr().out
    final = receptive_field(baseline_encoder_specs()).final
    ok = (
        final == 3686
        and "3686 samples = 0.2304 s at 16000 Hz" in out16
        and "3686 samples = 0.0768 s at 48000 Hz" in out48
        and _elapsed(t0) < 1.0
    )
    detail = f"final RF {final} samples; {out16.splitlines()[-1]}; {out48.splitlines()[-1]}; {_elapsed(t0):.3f} s"
    assert record(1, "RF formula reproduction", ok, detail)


# ---------------------------------------------------------------- 2


def test_c02_dilated_stack():
    t0 = time.perf_counter()
    stack = [LayerSpec("conv", 3, 1, 1), LayerSpec("conv", 3, 1, 2), LayerSpec("conv", 3, 1, 4)]
    rfs = [e.rf for e in receptive_field(stack)[1:]]
    ok = rfs == [3, 7, 15] and _elapsed(t0) < 1.0
    assert record(2, "dilated 3-layer stack", ok, f"RFs {rfs}; {_elapsed(t0):.3f} s")


# ---------------------------------------------------------------- 3


def _random_stack(rng):
    layers = []
    for _ in range(int(rng.integers(1, 9))):
        if rng.random() < 0.7:
            layers.append(LayerSpec("conv", int(rng.integers(1, 9)), int(rng.integers(1, 4)), int(rng.integers(1, 5))))
        else:
            layers.append(LayerSpec("pool", int(rng.integers(1, 5)), int(rng.integers(1, 4))))
    return layers


def test_c03_empirical_matches_analytic():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    matches = 0
    n_stacks = 30
    for _ in range(n_stacks):
        layers = _random_stack(rng)
        report = receptive_field(layers)
        n = 3 * report.final + 2 * report[-1].stride_product + 8
        matches += empirical_rf(stack_forward(layers), n) == report.final
    model = build_model(UNetConfig(widths=(4, 4, 4, 4, 4, 4), dtype="float64"))
    for t in model.parameters():
        t.data[...] = 0.01
    encoder_rf = empirical_rf(lambda x: model.encode(x, pool=connectivity_pool), 8192)
    ok = matches == n_stacks and encoder_rf == 3686 and _elapsed(t0) < 60
    detail = f"{matches}/{n_stacks} random stacks exact; reduced-width encoder {encoder_rf}; {_elapsed(t0):.1f} s"
    assert record(3, "empirical vs analytic RF", ok, detail)


# ---------------------------------------------------------------- 4


def test_c04_parameter_parity():
    t0 = time.perf_counter()
    counts = {v: param_count(UNetConfig(variant=v)) for v in VARIANTS}
    ok = len(set(counts.values())) == 1 and _elapsed(t0) < 1.0
    detail = ", ".join(f"{k}={v}" for k, v in counts.items()) + f"; {_elapsed(t0):.3f} s"
    assert record(4, "parameter parity", ok, detail)


# ---------------------------------------------------------------- 5


def _away_from_zero(rng, shape, lo=0.05):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(lo, 1.0, size=shape)


def _op_cases(rng):
    """(name, op, inputs) triples over randomized small shapes."""
    cases = []
    for _ in range(6):
        b, ci, co = (int(v) for v in rng.integers(1, 4, size=3))
        f, s, d = int(rng.integers(1, 5)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        pad = (int(rng.integers(0, 3)), int(rng.integers(0, 3)))
        n = d * (f - 1) + 1 + int(rng.integers(0, 12))
        x, w, bias = leaf(rng.standard_normal((b, ci, n))), leaf(rng.standard_normal((co, ci, f))), leaf(rng.standard_normal(co))
        cases.append(("conv1d", lambda x, w, bias, s=s, d=d, pad=pad: T.conv1d(x, T.ConvParams(w, bias, s, d, pad)), [x, w, bias]))

        n = int(rng.integers(1, 8))
        xt, wt, bt = leaf(rng.standard_normal((b, ci, n))), leaf(rng.standard_normal((co, ci, 2))), leaf(rng.standard_normal(co))
        cases.append(("transposed_conv1d", lambda x, w, bias: T.transposed_conv1d(x, T.ConvParams(w, bias, stride=2)), [xt, wt, bt]))

        c, m = int(rng.integers(1, 4)), 2 * int(rng.integers(1, 8))
        # distinct values spaced well beyond the finite-difference step keep the argmax fixed
        vals = (rng.permutation(b * c * m) * 0.01).reshape(b, c, m)
        cases.append(("maxpool1d", lambda x: T.maxpool1d(x, 2, 2), [leaf(vals)]))

        c2 = int(rng.integers(0, 3))
        cases.append(("concat_channels", T.concat_channels, [leaf(rng.standard_normal((b, c, m))), leaf(rng.standard_normal((b, c2, m)))]))

        order = rng.permutation(c)
        cases.append(("permute_channels", lambda x, order=order: T.permute_channels(x, order), [leaf(rng.standard_normal((b, c, m)))]))

        cases.append(("leaky_relu", lambda x: T.leaky_relu(x, 0.2), [leaf(_away_from_zero(rng, (b, c, m)))]))

        target = rng.standard_normal((b, 1, m))
        pred = target + _away_from_zero(rng, target.shape)
        mask = (rng.random(target.shape) < 0.7).astype(float)
        mask[0, 0, 0] = 1.0
        cases.append(("l1_loss", lambda p, t=target, mk=mask: T.l1_loss(p, T.Tensor(t), mk), [leaf(pred)]))
    return cases


def test_c05_gradient_correctness():
    t0 = time.perf_counter()
    worst = {}
    for name, op, inputs in _op_cases(np.random.default_rng(5)):
        worst[name] = max(worst.get(name, 0.0), gradcheck(op, inputs))
    ok = max(worst.values()) < FD_RTOL and _elapsed(t0) < 120
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f" (eps={FD_EPS}); {_elapsed(t0):.1f} s"
    assert record(5, "finite-difference gradient checks", ok, detail)


# ---------------------------------------------------------------- 6

OVERFIT = dict(widths=SMALL_WIDTHS, batch_size=1, lr=1e-3, lr_schedule="cosine", max_steps=2000, eval_every=100)


def overfit_clips():
    """Eight 1 s synthetic clip pairs at 15 dB SNR in white noise, normalized."""
    spec = SynthSpec(n_utterances=8, snr_levels=(15.0,), noise_kinds=("white",), min_seconds=1.0, max_seconds=1.0, seed=1)
    noisy, clean = [], []
    for p in synth_pairs(spec):
        clip = prepare_pair(AudioBuffer(16000, p.clean), AudioBuffer(16000, p.noisy))[0]
        noisy.append(clip.noisy)
        clean.append(clip.clean)
    return np.stack(noisy), np.stack(clean)


def test_c06_overfit():
    t0 = time.perf_counter()
    X, y = overfit_clips()
    results = {}
    for variant in ("baseline", "aspp-middle"):
        est = SpeechUNetEnhancer(variant=variant, **OVERFIT).fit(X, y)
        results[variant] = (est, est.l1(X, y), float(np.mean(np.abs(est.predict(X) - y))))
    again = SpeechUNetEnhancer(variant="baseline", **OVERFIT).fit(X, y)
    first = results["baseline"][0]
    same = again.history_ == first.history_ and all(
        np.array_equal(p.data, q.data)
        for (_, p), (_, q) in zip(first.model_.named_parameters(), again.model_.named_parameters())
    )
    steps = {v: r[0].n_steps_ for v, r in results.items()}
    ok = all(r[1] < 0.01 and r[2] < 0.01 for r in results.values()) and same and max(steps.values()) <= 2000
    ok = ok and _elapsed(t0) <= 30 * 60
    detail = "; ".join(f"{v} train L1 {r[1]:.5f} (clamped {r[2]:.5f}) after {r[0].n_steps_} steps" for v, r in results.items())
    detail += f"; identity L1 {np.mean(np.abs(X - y)):.5f}; rerun identical={same}; {_elapsed(t0) / 60:.1f} min"
    assert record(6, "overfit capability", ok, detail)


# ---------------------------------------------------------------- 7

DESK_CONFIG = """\
seed = 0
widths = 4, 4, 8, 8, 16, 16
synth_utterances = 25
lr = 1e-3
lr_schedule = cosine
batch_size = 4
max_steps = 5000
eval_every = 250
patience = 10
"""


def _mean_snr(report_tsv, system):
    for line in report_tsv.read_text().splitlines():
        parts = line.split("\t")
        if parts[0] == system and parts[1] == "MEAN":
            return float(parts[2])
    raise KeyError(system)


def test_c07_desk_scale_denoising(tmp_path):
    t0 = time.perf_counter()
    cfg = tmp_path / "desk.cfg"
    cfg.write_text(DESK_CONFIG + f"data_dir = {tmp_path / 'data'}\n")
    assert main(["prepare", "--config", str(cfg)]) == 0
    n_train = len(DatasetManifest.read(tmp_path / "data" / "manifest.tsv").split("train"))
    means = {}
    for variant in ("baseline", "aspp-middle"):
        sets = ["--set", f"variant={variant}", "--set", f"checkpoint_dir={tmp_path / variant}"]
        assert main(["train", "--config", str(cfg), *sets]) == 0
        out = tmp_path / f"report_{variant}"
        assert main(["evaluate", "--config", str(cfg), *sets, "--out-dir", str(out)]) == 0
        means[variant] = (_mean_snr(out / "report.tsv", "Input"), _mean_snr(out / "report.tsv", variant))
    inp = means["baseline"][0]
    base, aspp = means["baseline"][1], means["aspp-middle"][1]
    ok = n_train == 80 and base >= inp + 3.0 and aspp >= inp + 3.0 and aspp >= base - 0.5
    ok = ok and _elapsed(t0) <= 2 * 3600
    detail = (
        f"{n_train} train pairs; test mean SNR Input {inp:.3f} dB, baseline {base:.3f} dB (+{base - inp:.3f}), "
        f"aspp-middle {aspp:.3f} dB (+{aspp - inp:.3f}); {_elapsed(t0) / 60:.1f} min"
    )
    assert record(7, "desk-scale denoising", ok, detail)


# ---------------------------------------------------------------- 8


def test_c08_metric_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    clean = rng.standard_normal(16000)
    noise = rng.standard_normal(16000)
    errs = {t: abs(snr(clean, mix_at_snr(clean, noise, t, np.random.default_rng(1))) - t) for t in (-10, 0, 2.5, 7.5, 17.5, 40)}
    speech = synth_speech(16000, 3.0, np.random.default_rng(9))
    sweep_noise = np.random.default_rng(10).standard_normal(speech.shape)
    sweep = [stoi(speech, mix_at_snr(speech, sweep_noise, s)) for s in (-5, 0, 5, 10, 15)]
    self_ssnr, self_stoi = ssnr(speech, speech), stoi(speech, speech)
    ok = (
        max(errs.values()) < 1e-6
        and self_ssnr == 35.0
        and self_stoi >= 0.99
        and all(a <= b for a, b in zip(sweep, sweep[1:]))
        and _elapsed(t0) < 60
    )
    detail = (
        f"max SNR roundtrip error {max(errs.values()):.1e} dB; ssnr(c,c)={self_ssnr}; stoi(c,c)={self_stoi:.4f}; "
        f"stoi sweep {[round(v, 4) for v in sweep]}; {_elapsed(t0):.1f} s"
    )
    assert record(8, "metric oracles", ok, detail)


# ---------------------------------------------------------------- 9


def _closed_form_count(n, clip=16000, hop=8000, keep=8000):
    full = (n - clip) // hop + 1 if n >= clip else 0
    covered = (full - 1) * hop + clip if full else 0
    return full + (1 if n > covered and n - full * hop >= keep else 0)


def test_c09_pipeline_rules():
    t0 = time.perf_counter()
    mismatches = []
    for k in range(61):
        n = 800 * k
        x = AudioBuffer(16000, np.ones(n))
        got = len(segment(x, x))
        if got != _closed_form_count(n):
            mismatches.append((k * 0.05, got))
    split_ok = True
    for n in (10, 11, 19, 100, 101, 257):
        m = split_dataset(DatasetManifest([ManifestEntry(f"{i}", f"{i}") for i in range(n)]))
        sizes = tuple(len(m.split(s)) for s in ("train", "val", "test"))
        split_ok &= sizes == (n * 8 // 10, n // 10, n - n * 8 // 10 - n // 10)
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(50):
        x = rng.standard_normal(int(rng.integers(1, 5000))) * 10 ** rng.uniform(-3, 3)
        y, meta = normalize(AudioBuffer(16000, x))
        worst = max(worst, np.max(np.abs(denormalize(y, meta).samples - x)))
    ok = not mismatches and split_ok and worst < 1e-6 and _elapsed(t0) < 60
    detail = f"61 durations, {len(mismatches)} clip-count mismatches; split floor rule {split_ok}; max round-trip error {worst:.1e}; {_elapsed(t0):.1f} s"
    assert record(9, "pipeline rules", ok, detail)


# ---------------------------------------------------------------- 10

DET_CONFIG = """\
seed = 7
widths = 4, 4, 4, 4, 4, 4
kernel_size = 9
synth_utterances = 3
synth_min_seconds = 1.5
synth_max_seconds = 2.0
batch_size = 2
max_steps = 30
eval_every = 10
lr = 1e-3
"""


def test_c10_determinism_and_persistence(tmp_path):
    reports, logs = [], []
    for run in ("a", "b"):
        cfg = tmp_path / f"{run}.cfg"
        cfg.write_text(DET_CONFIG + f"data_dir = {tmp_path / run / 'data'}\ncheckpoint_dir = {tmp_path / run / 'ck'}\n")
        for cmd in (["prepare"], ["train"], ["evaluate", "--out-dir", str(tmp_path / run / "rep")]):
            assert main([cmd[0], "--config", str(cfg), *cmd[1:]]) == 0
        reports.append((tmp_path / run / "rep" / "report.tsv").read_text())
        logs.append((tmp_path / run / "ck" / "train_log.tsv").read_text())
    identical = reports[0] == reports[1] and logs[0] == logs[1]

    cfg = load_config(tmp_path / "a.cfg", {"checkpoint_dir": tmp_path / "c"})
    est, path = ex.train(cfg)
    in_memory = ex.evaluate_split(cfg, ex.model_enhancer(est.model_)).to_tsv()
    loaded, _ = load_checkpoint(path)
    from_disk = ex.evaluate_split(cfg, ex.model_enhancer(loaded)).to_tsv()
    bit_exact = in_memory == from_disk
    ok = identical and bit_exact
    detail = f"two prepare+train+evaluate runs identical={identical}; save/load evaluation bit-exact={bit_exact}"
    assert record(10, "determinism and persistence", ok, detail)
