"""The experiment workflows behind the command-line tool."""
from __future__ import annotations

from dataclasses import replace
from pathlib import Path

import numpy as np

from .audio import (
    AudioBuffer,
    DatasetManifest,
    ManifestEntry,
    SynthSpec,
    _snr_tag,
    ensure_rate,
    list_wavs,
    load_wav,
    mix_at_snr,
    prepare_pair,
    split_dataset,
    synth_corpus,
    write_wav,
)
from .estimator import SpeechUNetEnhancer
from .metrics import Utterance, evaluate
from .model import build_model, enhance, load_checkpoint, param_count, save_checkpoint
from .receptive_field import receptive_field


BEST_CHECKPOINT = "best.ckpt"
TRAIN_LOG = "train_log.tsv"


class DataError(ValueError):
    pass


# ---------------------------------------------------------------- prepare


def prepare(cfg):
    """Materialize the corpus under ``cfg.data_dir`` and write the split manifest.

    With ``raw_clean_dir`` set, clean files are paired by name with
    ``raw_noisy_dir``, or mixed with files from ``raw_noise_dir`` at every
    level of ``snr_levels``; everything is resampled to ``sample_rate``.
    Otherwise a synthetic corpus is generated.
    """
    out = Path(cfg.data_dir)
    if cfg.raw_clean_dir:
        manifest = _prepare_raw(cfg, out)
    else:
        if cfg.synth_utterances < 1 or not cfg.snr_levels or not cfg.noise_kinds:
            raise DataError("empty corpus: synthetic spec has no utterances, SNR levels or noise kinds")
        spec = SynthSpec(
            n_utterances=cfg.synth_utterances,
            snr_levels=tuple(cfg.snr_levels),
            noise_kinds=tuple(cfg.noise_kinds),
            sample_rate=cfg.sample_rate,
            min_seconds=cfg.synth_min_seconds,
            max_seconds=cfg.synth_max_seconds,
            seed=cfg.seed,
        )
        manifest, _ = synth_corpus(spec, out)
    manifest = split_dataset(manifest, seed=cfg.seed)
    manifest.write(cfg.manifest_path)
    return manifest


def _read(path, rate):
    return ensure_rate(load_wav(path), rate)


def _prepare_raw(cfg, out):
    clean_files = list_wavs(cfg.raw_clean_dir)
    if not clean_files:
        raise DataError(f"empty corpus: no WAV files in {cfg.raw_clean_dir}")
    (out / "clean").mkdir(parents=True, exist_ok=True)
    (out / "noisy").mkdir(parents=True, exist_ok=True)
    rate = cfg.sample_rate
    entries = []
    if cfg.raw_noise_dir:
        noises = [_read(p, rate).samples for p in list_wavs(cfg.raw_noise_dir)]
        if not noises:
            raise DataError(f"empty corpus: no WAV files in {cfg.raw_noise_dir}")
        for u, path in enumerate(clean_files):
            clean = _read(path, rate)
            rel = f"clean/{path.stem}.wav"
            write_wav(out / rel, clean)
            for k, snr_db in enumerate(cfg.snr_levels):
                rng = np.random.default_rng([cfg.seed, u, k])
                noise_id = int(rng.integers(len(noises)))
                noisy = AudioBuffer(rate, mix_at_snr(clean.samples, noises[noise_id], snr_db, rng))
                noisy_rel = f"noisy/{path.stem}_{_snr_tag(snr_db)}.wav"
                write_wav(out / noisy_rel, noisy)
                entries.append(ManifestEntry(rel, noisy_rel, "train", f"noise{noise_id}", float(snr_db)))
    else:
        if not cfg.raw_noisy_dir:
            raise DataError("raw_clean_dir needs raw_noisy_dir or raw_noise_dir")
        for path in clean_files:
            partner = Path(cfg.raw_noisy_dir) / path.name
            if not partner.exists():
                raise DataError(f"no noisy partner for {path.name} in {cfg.raw_noisy_dir}")
            clean, noisy = _read(path, rate), _read(partner, rate)
            if len(clean) != len(noisy):
                raise DataError(f"{path.name}: clean and noisy lengths differ")
            write_wav(out / "clean" / path.name, clean)
            write_wav(out / "noisy" / path.name, noisy)
            entries.append(ManifestEntry(f"clean/{path.name}", f"noisy/{path.name}"))
    return DatasetManifest(entries, cfg.seed, rate, out)


# ---------------------------------------------------------------- clips


def load_manifest(cfg):
    path = cfg.manifest_path
    if not path.exists():
        raise FileNotFoundError(f"manifest {path} not found; run prepare first")
    manifest = DatasetManifest.read(path)
    manifest.check_files()
    return manifest


def split_clips(cfg, manifest, split, limit=0):
    """Normalized clip arrays ``(noisy, clean, valid_lengths)`` for one split."""
    noisy, clean, lengths = [], [], []
    for e in manifest.split(split):
        c = _read(manifest.resolve(e.clean), cfg.sample_rate)
        n = _read(manifest.resolve(e.noisy), cfg.sample_rate)
        for clip in prepare_pair(c, n, cfg.clip_seconds, cfg.hop_seconds, cfg.min_seconds, source=e.noisy):
            noisy.append(clip.noisy)
            clean.append(clip.clean)
            lengths.append(clip.valid_length)
    if limit:
        noisy, clean, lengths = noisy[:limit], clean[:limit], lengths[:limit]
    if not noisy:
        return None
    return np.stack(noisy), np.stack(clean), np.array(lengths)


# ---------------------------------------------------------------- train


def make_estimator(cfg):
    return SpeechUNetEnhancer(
        variant=cfg.variant,
        widths=tuple(cfg.widths),
        kernel_size=cfg.kernel_size,
        factors=tuple(cfg.factors),
        lr=cfg.lr,
        lr_schedule=cfg.lr_schedule,
        batch_size=cfg.batch_size,
        max_steps=cfg.max_steps,
        eval_every=cfg.eval_every,
        patience=cfg.patience,
        seed=cfg.seed,
    )


def train(cfg):
    """Fit on the train split, keeping the best-validation checkpoint.

    Writes ``best.ckpt`` and ``train_log.tsv`` into the checkpoint directory.
    Without a validation split the final parameters are saved.
    """
    manifest = load_manifest(cfg)
    train_set = split_clips(cfg, manifest, "train", cfg.max_clips)
    if train_set is None:
        raise DataError("empty train split")
    val_set = None if cfg.max_clips else split_clips(cfg, manifest, "val")
    ckpt_dir = cfg.checkpoint_path
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    best_path = ckpt_dir / BEST_CHECKPOINT
    est = make_estimator(cfg)

    n_params = param_count(cfg.model_config())
    n_base = param_count(replace(cfg.model_config(), variant="baseline"))
    header = [
        f"# variant={cfg.variant}\tparams={n_params}\tbaseline_params={n_base}\tdelta={n_params - n_base}",
        f"# train_clips={len(train_set[0])}\tval_clips={0 if val_set is None else len(val_set[0])}\tseed={cfg.seed}",
        "step\ttrain_l1\tval_l1\tbest_val_l1\tcheckpoint",
    ]
    rows = []

    def on_eval(state, model, improved):
        ckpt = ""
        if improved:
            _save(best_path, model, cfg, state.step, state.best_val_l1)
            state.lineage.append((state.step, state.best_val_l1))
            ckpt = BEST_CHECKPOINT
        row = est.history_[-1]
        val = row.get("val_l1")
        rows.append(
            f"{state.step}\t{row['train_l1']:.6f}\t{'' if val is None else f'{val:.6f}'}\t"
            f"{'' if val is None else f'{state.best_val_l1:.6f}'}\t{ckpt}"
        )

    fit_args = {}
    if val_set is not None:
        fit_args = dict(X_val=val_set[0], y_val=val_set[1], val_lengths=val_set[2])
    est.fit(train_set[0], train_set[1], train_set[2], on_eval=on_eval, **fit_args)
    if val_set is None:
        _save(best_path, est.model_, cfg, est.n_steps_, None)
        rows[-1] += BEST_CHECKPOINT
    (ckpt_dir / TRAIN_LOG).write_text("\n".join(header + rows) + "\n")
    return est, best_path


def _save(path, model, cfg, step, val_l1):
    meta = {"sample_rate": cfg.sample_rate, "step": step, "seed": cfg.seed, "val_l1": val_l1}
    save_checkpoint(path, model, meta)


def resolve_checkpoint(cfg, checkpoint=None):
    return Path(checkpoint) if checkpoint else cfg.checkpoint_path / BEST_CHECKPOINT


# ---------------------------------------------------------------- enhance / evaluate


def enhance_file(checkpoint, src, dst, allow_resample=False):
    """Enhance one WAV file; the output keeps the input length (after resampling)."""
    model, meta = load_checkpoint(checkpoint)
    wav = load_wav(src)
    rate = meta.get("sample_rate", 16000)
    if wav.sample_rate != rate:
        if not allow_resample:
            raise DataError(f"{src} is {wav.sample_rate} Hz but the model expects {rate} Hz (use --resample)")
        wav = ensure_rate(wav, rate)
    out = enhance(model, wav)
    write_wav(dst, out)
    return out


def model_enhancer(model):
    return lambda noisy: enhance(model, noisy).samples


def evaluate_split(cfg, enhancer, split="test", label="Enhanced"):
    """Score ``enhancer`` (noisy AudioBuffer -> samples) on every utterance of ``split``."""
    manifest = load_manifest(cfg)
    entries = manifest.split(split)
    if not entries:
        raise DataError(f"empty {split} split")
    utterances, outputs = [], []
    for e in entries:
        clean = _read(manifest.resolve(e.clean), cfg.sample_rate)
        noisy = _read(manifest.resolve(e.noisy), cfg.sample_rate)
        utterances.append(Utterance(e.noisy, clean.samples, noisy.samples))
        outputs.append(enhancer(noisy))
    pesq = cfg.pesq_command if "pesq" in cfg.metrics else None
    return evaluate(utterances, outputs, cfg.sample_rate, label=label, pesq_command=pesq)


def write_report(report, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.tsv").write_text(report.to_tsv())
    (out_dir / "report.txt").write_text(report.to_table())
    return out_dir / "report.tsv", out_dir / "report.txt"


# ---------------------------------------------------------------- rf-report


def rf_report(model_cfg, sample_rate):
    """Per-layer receptive-field table with the final encoder entry marked."""
    report = receptive_field(build_model(model_cfg).encoder_layer_specs())
    final = report[-1]
    lines = report.table(sample_rate).splitlines()
    lines[-1] += "  <== final encoder RF"
    lines.append(
        f"final encoder RF: {final.rf} samples = {float(final.seconds(sample_rate)):.4f} s at {sample_rate} Hz"
    )
    return report, "\n".join(lines) + "\n"


# ---------------------------------------------------------------- plot


def plot_window(clean, pred, start, end):
    """Sample times and both traces over ``[start, end)`` seconds."""
    if clean.sample_rate != pred.sample_rate:
        raise DataError("clean and predicted sample rates differ")
    if len(clean) != len(pred):
        raise DataError(f"clean and predicted lengths differ ({len(clean)} vs {len(pred)})")
    rate = clean.sample_rate
    lo, hi = int(round(start * rate)), int(round(end * rate))
    if not 0 <= lo < hi <= len(clean):
        raise DataError(f"window [{start}, {end}) s is outside the {len(clean) / rate:.3f} s signal")
    return np.arange(lo, hi) / rate, clean.samples[lo:hi], pred.samples[lo:hi]


def plot_comparison(clean, pred, start, end, out_svg):
    """SVG overlay of ground truth (blue) and prediction (red), plus a TSV of the plotted points."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    t, c, p = plot_window(clean, pred, start, end)
    out_svg = Path(out_svg)
    fig, ax = plt.subplots(figsize=(10, 3.5))
    ax.plot(t, c, color="blue", linewidth=0.6, label="clean")
    ax.plot(t, p, color="red", linewidth=0.6, label="prediction")
    ax.set_xlabel("time (s)")
    ax.set_ylabel("amplitude")
    ax.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(out_svg, format="svg")
    plt.close(fig)
    tsv = out_svg.with_suffix(".tsv")
    lines = ["time_s\tclean\tprediction"] + [f"{a:.6f}\t{b!r}\t{q!r}" for a, b, q in zip(t, c.tolist(), p.tolist())]
    tsv.write_text("\n".join(lines) + "\n")
    return out_svg, tsv
