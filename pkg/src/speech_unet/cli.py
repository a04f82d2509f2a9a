"""``speech-unet`` command-line tool.

Every failure ends with one line on stderr, ``error: <category>: <message>``,
and a nonzero exit status that identifies the category.
"""
from __future__ import annotations

import argparse
import logging
import sys

from . import experiment as ex
from .audio import WavError, load_wav
from .config import ConfigFileError, load_config
from .estimator import TrainingDiverged
from .metrics import MetricError
from .model import VARIANTS, CheckpointError, ConfigError, UNetConfig, load_checkpoint

# category name and exit status, most specific first
ERRORS = [
    ((ConfigFileError, ConfigError), "config", 3),
    ((CheckpointError,), "checkpoint", 4),
    ((WavError,), "wav", 5),
    ((ex.DataError,), "data", 6),
    ((MetricError,), "metric", 7),
    ((TrainingDiverged,), "diverged", 8),
    ((OSError,), "io", 9),
    ((ValueError,), "invalid", 10),
]


def _overrides(pairs):
    out = {}
    for p in pairs or []:
        if "=" not in p:
            raise ConfigFileError(f"--set expects key=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _config(args):
    return load_config(args.config, _overrides(args.set))


def cmd_prepare(args):
    cfg = _config(args)
    manifest = ex.prepare(cfg)
    sizes = {s: len(manifest.split(s)) for s in ("train", "val", "test")}
    print(f"wrote {cfg.manifest_path}: {len(manifest.entries)} pairs "
          f"(train {sizes['train']}, val {sizes['val']}, test {sizes['test']})")


def cmd_train(args):
    cfg = _config(args)
    est, path = ex.train(cfg)
    state = est.state_
    best = "" if state.best_step == 0 else f", best val L1 {state.best_val_l1:.6f} at step {state.best_step}"
    print(f"trained {est.n_steps_} steps, final train L1 {state.running_l1:.6f}{best}")
    print(f"checkpoint {path}")


def cmd_enhance(args):
    out = ex.enhance_file(args.checkpoint, args.input, args.output, allow_resample=args.resample)
    print(f"wrote {args.output} ({len(out)} samples at {out.sample_rate} Hz)")


def cmd_evaluate(args):
    cfg = _config(args)
    if args.identity:
        enhancer, label = (lambda noisy: noisy.samples), "Identity"
    else:
        model, _ = load_checkpoint(ex.resolve_checkpoint(cfg, args.checkpoint))
        enhancer, label = ex.model_enhancer(model), cfg.variant
    report = ex.evaluate_split(cfg, enhancer, args.split, label=label)
    tsv, txt = ex.write_report(report, args.out_dir)
    sys.stdout.write(report.to_table())
    print(f"wrote {tsv} and {txt}")


def cmd_rf_report(args):
    if args.config:
        model_cfg = _config(args).model_config()
    else:
        model_cfg = UNetConfig(variant=args.variant, kernel_size=args.kernel_size)
    _, text = ex.rf_report(model_cfg, args.sample_rate)
    sys.stdout.write(text)


def cmd_plot(args):
    svg, tsv = ex.plot_comparison(load_wav(args.clean), load_wav(args.predicted), args.start, args.end, args.output)
    print(f"wrote {svg} and {tsv}")


def build_parser():
    p = argparse.ArgumentParser(prog="speech-unet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp, required=True):
        sp.add_argument("--config", required=required, help="key = value experiment file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    sp = sub.add_parser("prepare", help="materialize the corpus and its split manifest")
    with_config(sp)
    sp.set_defaults(func=cmd_prepare)

    sp = sub.add_parser("train", help="train with the L1 objective")
    with_config(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("enhance", help="enhance one WAV file")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--resample", action="store_true", help="resample input to the model rate")
    sp.add_argument("input")
    sp.add_argument("output")
    sp.set_defaults(func=cmd_enhance)

    sp = sub.add_parser("evaluate", help="score Input vs Enhanced on a split")
    with_config(sp)
    sp.add_argument("--checkpoint", help="defaults to best.ckpt in the checkpoint directory")
    sp.add_argument("--split", default="test", choices=("train", "val", "test"))
    sp.add_argument("--out-dir", default="report")
    sp.add_argument("--identity", action="store_true", help="score the unprocessed input as the system")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("rf-report", help="receptive field of the encoding path")
    with_config(sp, required=False)
    sp.add_argument("--variant", default="baseline", choices=VARIANTS)
    sp.add_argument("--kernel-size", type=int, default=30)
    sp.add_argument("--sample-rate", type=int, default=16000)
    sp.set_defaults(func=cmd_rf_report)

    sp = sub.add_parser("plot", help="SVG overlay of clean and predicted waveforms")
    sp.add_argument("clean")
    sp.add_argument("predicted")
    sp.add_argument("output", help="output .svg; a .tsv of the points is written alongside")
    sp.add_argument("--start", type=float, default=1.0, help="window start in seconds")
    sp.add_argument("--end", type=float, default=1.5, help="window end in seconds")
    sp.set_defaults(func=cmd_plot)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        args.func(args)
    except Exception as exc:
        for kinds, category, code in ERRORS:
            if isinstance(exc, kinds):
                msg = " ".join(str(exc).split()) or type(exc).__name__
                print(f"error: {category}: {msg}", file=sys.stderr)
                return code
        raise
    return 0


if __name__ == "__main__":
    sys.exit(main())
