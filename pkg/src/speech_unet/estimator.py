"""Scikit-learn style wrapper around the network and its L1 training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import tensor as T
from .model import LENGTH_MULTIPLE, UNetConfig, build_model, enhance, param_count

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainState:
    step: int = 0
    running_l1: float = float("nan")
    best_val_l1: float = float("inf")
    best_step: int = 0
    evals_since_best: int = 0
    lineage: list = field(default_factory=list)


def _check_clips(X, name="X"):
    X = check_array(X, dtype=np.float64, ensure_all_finite=True, input_name=name)
    if X.shape[1] % LENGTH_MULTIPLE:
        raise ValueError(f"clip length {X.shape[1]} is not divisible by {LENGTH_MULTIPLE}")
    return X


def _mask(lengths, n, length, dtype):
    m = np.ones((n, 1, length), dtype=dtype)
    if lengths is not None:
        lengths = np.asarray(lengths)
        if lengths.shape != (n,):
            raise ValueError("one valid length per clip expected")
        m[np.arange(length)[None, None, :] >= lengths[:, None, None]] = 0
    return m


class SpeechUNetEnhancer(TransformerMixin, BaseEstimator):
    """Waveform-to-waveform denoiser trained with a masked L1 objective.

    ``fit`` takes clips in normalized units, shape ``(n_clips, length)`` with
    ``length`` a multiple of 32: noisy clips as ``X`` and clean targets as
    ``y``. Batches are drawn from a seeded permutation stream, so two fits with
    the same parameters and data give identical loss curves. With validation
    clips, the parameters with the best validation L1 are kept and training
    stops after ``patience`` evaluations without improvement.
    """

    def __init__(
        self,
        variant="baseline",
        widths=(16, 32, 64, 128, 256, 256),
        kernel_size=30,
        factors=(1, 2, 3, 4),
        slope=0.2,
        lr=1e-4,
        batch_size=8,
        max_steps=1000,
        eval_every=100,
        patience=10,
        lr_schedule="constant",
        seed=0,
        dtype="float32",
    ):
        self.variant = variant
        self.widths = widths
        self.kernel_size = kernel_size
        self.factors = factors
        self.slope = slope
        self.lr = lr
        self.batch_size = batch_size
        self.max_steps = max_steps
        self.eval_every = eval_every
        self.patience = patience
        self.lr_schedule = lr_schedule
        self.seed = seed
        self.dtype = dtype

    def config(self):
        return UNetConfig(
            widths=tuple(self.widths),
            kernel_size=self.kernel_size,
            variant=self.variant,
            factors=tuple(self.factors),
            slope=self.slope,
            seed=self.seed,
            dtype=self.dtype,
        )

    def fit(self, X, y, lengths=None, X_val=None, y_val=None, val_lengths=None, on_eval=None):
        """Train from scratch.

        ``lengths`` gives the number of real samples per clip; padded tails are
        excluded from the loss. ``on_eval(state, model, improved)`` runs after
        every evaluation, e.g. to write checkpoints.
        """
        X = _check_clips(X)
        y = _check_clips(y, "y")
        if X.shape != y.shape:
            raise ValueError(f"X and y shapes differ: {X.shape} vs {y.shape}")
        has_val = X_val is not None
        if has_val:
            X_val, y_val = _check_clips(X_val, "X_val"), _check_clips(y_val, "y_val")
        self.model_ = build_model(self.config())
        self.param_count_ = param_count(self.model_)
        dt = np.dtype(self.dtype)
        n, length = X.shape
        xb = X.astype(dt)[:, None, :]
        yb = y.astype(dt)[:, None, :]
        mask = _mask(lengths, n, length, dt)
        opt = T.Adam(self.model_.parameters(), lr=self.lr)
        rng = np.random.default_rng(self.seed)
        state = TrainState()
        self.history_ = []
        best = None
        order = np.empty(0, dtype=int)
        window = []
        bs = min(self.batch_size, n)
        while state.step < self.max_steps:
            if order.size < bs:
                order = np.concatenate([order, rng.permutation(n)])
            idx, order = order[:bs], order[bs:]
            opt.state.lr = self._lr_at(state.step)
            opt.zero_grad()
            pred = self.model_.forward(T.Tensor(xb[idx]))
            loss = T.l1_loss(pred, T.Tensor(yb[idx]), mask[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite training loss at step {state.step + 1}")
            loss.backward()
            opt.step()
            state.step += 1
            window.append(value)
            if state.step % self.eval_every == 0 or state.step == self.max_steps:
                state.running_l1 = float(np.mean(window))
                window = []
                row = {"step": state.step, "train_l1": state.running_l1}
                improved = False
                if has_val:
                    val = self.l1(X_val, y_val, val_lengths)
                    row["val_l1"] = val
                    if val < state.best_val_l1:
                        state.best_val_l1, state.best_step = val, state.step
                        state.evals_since_best = 0
                        best = {k: v.copy() for k, v in self.model_.state_dict().items()}
                        improved = True
                    else:
                        state.evals_since_best += 1
                self.history_.append(row)
                log.info("step %d %s", state.step, " ".join(f"{k}={v:.6f}" for k, v in row.items() if k != "step"))
                if on_eval is not None:
                    on_eval(state, self.model_, improved)
                if has_val and state.evals_since_best >= self.patience:
                    log.info("early stop at step %d (best %d)", state.step, state.best_step)
                    break
        if best is not None:
            self.model_.load_state_dict(best)
        self.state_ = state
        self.n_steps_ = state.step
        return self

    def _lr_at(self, step):
        if self.lr_schedule == "constant":
            return self.lr
        if self.lr_schedule == "cosine":
            return 0.5 * self.lr * (1.0 + math.cos(math.pi * step / self.max_steps))
        raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")

    def _forward(self, X, training):
        dt = np.dtype(self.dtype)
        out = np.empty(X.shape, dtype=np.float64)
        step = max(1, self.batch_size)
        for lo in range(0, X.shape[0], step):
            xb = X[lo : lo + step].astype(dt)[:, None, :]
            out[lo : lo + step] = self.model_.forward(T.Tensor(xb), training=training).data[:, 0]
        return out

    def predict(self, X):
        """Enhanced clips, clamped to the normalized range [0, 1]."""
        check_is_fitted(self, "model_")
        return self._forward(_check_clips(X), training=False)

    transform = predict

    def l1(self, X, y, lengths=None):
        """Masked mean absolute error of the unclamped network output."""
        check_is_fitted(self, "model_")
        X, y = _check_clips(X), _check_clips(y, "y")
        pred = self._forward(X, training=True)
        m = _mask(lengths, X.shape[0], X.shape[1], np.float64)[:, 0]
        return float(np.sum(np.abs(pred - y) * m) / np.sum(m))

    def score(self, X, y, lengths=None):
        return -self.l1(X, y, lengths)

    def enhance(self, waveform, meta=None):
        check_is_fitted(self, "model_")
        return enhance(self.model_, waveform, meta)

    @classmethod
    def from_model(cls, model, **params):
        """Wrap an already trained model (e.g. loaded from a checkpoint)."""
        cfg = model.cfg
        est = cls(
            variant=cfg.variant,
            widths=cfg.widths,
            kernel_size=cfg.kernel_size,
            factors=cfg.factors,
            slope=cfg.slope,
            seed=cfg.seed,
            dtype=cfg.dtype,
            **params,
        )
        est.model_ = model
        est.param_count_ = param_count(model)
        return est
