"""Receptive-field bookkeeping along the encoding path.

Each conv layer grows the field by ``(f - 1) * d * S`` samples, where ``S`` is
the product of all earlier strides; pooling counts as a window-``f``,
stride-``s`` layer.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import tensor as T

KINDS = ("conv", "pool", "upsample")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    f: int
    s: int = 1
    d: int = 1
    name: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.f < 1 or self.s < 1 or self.d < 1:
            raise ValueError(f"f, s and d must be positive (got f={self.f}, s={self.s}, d={self.d})")
        if self.kind == "pool" and self.d != 1:
            raise ValueError("pooling layers have no dilation")


@dataclass(frozen=True)
class RFEntry:
    index: int
    layer: LayerSpec | None
    rf: int
    stride_product: int

    def seconds(self, sample_rate):
        return coverage_seconds(self.rf, sample_rate)


class RFReport(list):
    """``RFEntry`` rows, starting with the input itself (index 0, R = 1)."""

    @property
    def final(self):
        return self[-1].rf

    def table(self, sample_rate):
        lines = [f"{'layer':>5}  {'name':<14} {'kind':<8} {'f':>4} {'s':>3} {'d':>3} {'R_k':>7} {'stride':>6} {'seconds':>9}"]
        for e in self:
            if e.layer is None:
                lines.append(f"{0:>5}  {'input':<14} {'-':<8} {'-':>4} {'-':>3} {'-':>3} {e.rf:>7} {e.stride_product:>6} {float(e.seconds(sample_rate)):>9.4f}")
                continue
            ly = e.layer
            lines.append(
                f"{e.index:>5}  {(ly.name or ''):<14} {ly.kind:<8} {ly.f:>4} {ly.s:>3} {ly.d:>3} "
                f"{e.rf:>7} {e.stride_product:>6} {float(e.seconds(sample_rate)):>9.4f}"
            )
        return "\n".join(lines)


def receptive_field(layers):
    layers = list(layers)
    if not layers:
        raise ValueError("empty layer list")
    report = RFReport([RFEntry(0, None, 1, 1)])
    rf, stride = 1, 1
    for k, layer in enumerate(layers, start=1):
        if layer.kind == "upsample":
            raise ValueError("receptive fields are defined along the encoding path only (upsample layer given)")
        rf += (layer.f - 1) * layer.d * stride
        stride *= layer.s
        report.append(RFEntry(k, layer, rf, stride))
    return report


def coverage_seconds(rf, sample_rate):
    """Exact duration ``rf / sample_rate`` as a :class:`~fractions.Fraction`."""
    if rf < 1 or sample_rate <= 0:
        raise ValueError("rf must be >= 1 and the sample rate positive")
    return Fraction(rf) / Fraction(sample_rate)


class ClippedReceptiveField(ValueError):
    pass


def connectivity_pool(x, window, stride):
    """Pooling stand-in for gradient-support measurements.

    Max pooling routes gradient to a single argmax per window, which would
    hide most of the field; a per-channel all-ones strided convolution has the
    same connectivity and passes gradient to every sample in the window.
    """
    c = x.shape[1]
    w = np.zeros((c, c, window), dtype=x.dtype)
    w[np.arange(c), np.arange(c), :] = 1.0
    return T.conv1d(x, T.ConvParams(T.Tensor(w), None, stride=stride))


def stack_forward(layers, dtype=np.float64):
    """Forward function for a single-channel conv/pool stack with unit weights.

    Convolutions are unpadded with weights 1 and no bias; pools use
    :func:`connectivity_pool`.
    """
    params = []
    for layer in layers:
        if layer.kind == "conv":
            w = T.Tensor(np.ones((1, 1, layer.f), dtype=dtype))
            params.append(T.ConvParams(w, None, stride=layer.s, dilation=layer.d))
        elif layer.kind == "pool":
            params.append(None)
        else:
            raise ValueError("upsample layers are not part of the encoding path")

    def forward(x):
        h = x
        for layer, p in zip(layers, params):
            h = connectivity_pool(h, layer.f, layer.s) if p is None else T.conv1d(h, p)
        return h

    return forward


def empirical_rf(forward, input_length, position=None, channels=1, seed=0, dtype=np.float64):
    """Width of the input span that influences one output unit.

    Back-propagates a one-hot gradient from output ``position`` (default: the
    middle) of channel 0 and measures the extent of the nonzero input
    gradient, first to last sample inclusive. Dilated taps leave holes in the
    support, so the extent, not the count, is what matches the analytic field.
    Raises :class:`ClippedReceptiveField` when the support touches either
    input edge.
    """
    rng = np.random.default_rng(seed)
    x = T.Tensor(rng.uniform(1.0, 2.0, size=(1, channels, input_length)).astype(dtype), requires_grad=True)
    y = forward(x)
    n_out = y.shape[2]
    if position is None:
        position = n_out // 2
    if not 0 <= position < n_out:
        raise ValueError(f"output position {position} outside [0, {n_out})")
    seed_grad = np.zeros(y.shape, dtype=y.dtype)
    seed_grad[0, 0, position] = 1.0
    y.backward(seed_grad)
    support = np.flatnonzero(np.any(x.grad[0] != 0, axis=0))
    if support.size == 0:
        raise ValueError("output unit does not depend on the input")
    if support[0] == 0 or support[-1] == input_length - 1:
        raise ClippedReceptiveField(f"receptive field reaches the input boundary (length {input_length})")
    return int(support[-1] - support[0] + 1)


def baseline_encoder_specs(kernel_size=30, blocks=6):
    """Six blocks of two convolutions, pooling after all but the last."""
    specs = []
    for i in range(1, blocks + 1):
        specs.append(LayerSpec("conv", kernel_size, 1, 1, name=f"enc{i}.conv1"))
        specs.append(LayerSpec("conv", kernel_size, 1, 1, name=f"enc{i}.conv2"))
        if i < blocks:
            specs.append(LayerSpec("pool", 2, 2, 1, name=f"enc{i}.pool"))
    return specs
