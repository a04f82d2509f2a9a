"""Speech-U-Net and its ASPP variants, built from a declarative config."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ConvParams, Tensor

VARIANTS = ("baseline", "aspp-middle", "aspp-end", "aspp-middle+end")
# names used in result tables
VARIANT_LABELS = {
    "baseline": "Speech-U-Net",
    "aspp-middle": "ASPP-middle",
    "aspp-end": "ASPP-end",
    "aspp-middle+end": "ASPP-middle+end",
}
N_POOLS = 5
LENGTH_MULTIPLE = 2**N_POOLS


class ConfigError(ValueError):
    pass


@dataclass
class UNetConfig:
    """Encoder widths per block (six blocks), mirrored by the decoder."""

    widths: tuple = (16, 32, 64, 128, 256, 256)
    kernel_size: int = 30
    variant: str = "baseline"
    factors: tuple = (1, 2, 3, 4)
    slope: float = 0.2
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.factors = tuple(int(d) for d in self.factors)
        self.validate()

    def validate(self):
        if len(self.widths) != N_POOLS + 1:
            raise ConfigError(f"need {N_POOLS + 1} encoder widths, got {len(self.widths)}")
        if min(self.widths) < 1:
            raise ConfigError("widths must be positive")
        if self.kernel_size < 1:
            raise ConfigError("kernel_size must be >= 1")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if not self.factors or min(self.factors) < 1:
            raise ConfigError("dilation factors must be positive")
        n = len(self.factors)
        if self.variant in ("aspp-middle", "aspp-middle+end") and self.widths[-1] % n:
            raise ConfigError(f"bottleneck width {self.widths[-1]} not divisible by {n} dilation factors")
        if self.variant in ("aspp-end", "aspp-middle+end") and self.widths[0] % n:
            raise ConfigError(f"output-head width {self.widths[0]} not divisible by {n} dilation factors")
        if not 0.0 <= self.slope < 1.0:
            raise ConfigError("activation slope must lie in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["factors"] = list(self.factors)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class AsppLayerSpec:
    c_in: int
    c_out: int
    f: int
    factors: tuple = (1, 2, 3, 4)

    def __post_init__(self):
        if self.c_out % len(self.factors):
            raise ConfigError(f"c_out={self.c_out} not divisible by {len(self.factors)} dilation factors")

    @property
    def groups(self):
        return self.c_out // len(self.factors)

    def param_count(self):
        return self.c_out * self.c_in * self.f + self.c_out


class Conv:
    """Same-padded stride-1 convolution."""

    kind = "conv"

    def __init__(self, name, c_in, c_out, f, rng, dtype, dilation=1):
        self.name = name
        self.c_in, self.c_out, self.f = c_in, c_out, f
        self.params = _init_conv(name, c_in, c_out, f, rng, dtype, dilation, T.same_padding(f, dilation))

    def __call__(self, x):
        return T.conv1d(x, self.params)

    def tensors(self):
        return self.params.tensors()

    def describe(self):
        return {"kind": self.kind, "c_in": self.c_in, "c_out": self.c_out, "f": self.f, "dilations": [self.params.dilation]}


class Aspp:
    """Parallel dilated convolutions; output channel ``4*g + j`` uses ``factors[j]``."""

    kind = "aspp"

    def __init__(self, name, spec, rng, dtype):
        self.name = name
        self.spec = spec
        self.c_in, self.c_out, self.f = spec.c_in, spec.c_out, spec.f
        self.branches = [
            _init_conv(f"{name}.d{d}", spec.c_in, spec.groups, spec.f, rng, dtype, d, T.same_padding(spec.f, d))
            for d in spec.factors
        ]
        n = len(spec.factors)
        # concat gives [branch0 groups..., branch1 groups...]; interleave to group-major
        self._order = [j * spec.groups + g for g in range(spec.groups) for j in range(n)]

    def __call__(self, x):
        return aspp_forward(x, self.branches, self._order)

    def tensors(self):
        return [t for p in self.branches for t in p.tensors()]

    def describe(self):
        return {"kind": self.kind, "c_in": self.c_in, "c_out": self.c_out, "f": self.f, "dilations": list(self.spec.factors)}


class Upsample:
    """Stride-2, kernel-2 transposed convolution doubling the length."""

    kind = "upsample"

    def __init__(self, name, c_in, c_out, rng, dtype):
        self.name = name
        self.c_in, self.c_out, self.f = c_in, c_out, 2
        p = _init_conv(name, c_in, c_out, 2, rng, dtype, 1, (0, 0))
        p.stride = 2
        self.params = p

    def __call__(self, x):
        return T.transposed_conv1d(x, self.params)

    def tensors(self):
        return self.params.tensors()

    def describe(self):
        return {"kind": self.kind, "c_in": self.c_in, "c_out": self.c_out, "f": 2, "dilations": [1]}


def _init_conv(name, c_in, c_out, f, rng, dtype, dilation, padding):
    if rng is None:
        w, b = np.zeros((c_out, c_in, f), dtype=dtype), np.zeros(c_out, dtype=dtype)
    else:
        bound = np.sqrt(1.0 / (c_in * f))
        w = rng.uniform(-bound, bound, size=(c_out, c_in, f)).astype(dtype)
        b = rng.uniform(-bound, bound, size=(c_out,)).astype(dtype)
    return ConvParams(
        Tensor(w, requires_grad=True, name=f"{name}.weight"),
        Tensor(b, requires_grad=True, name=f"{name}.bias"),
        stride=1,
        dilation=dilation,
        padding=padding,
    )


def aspp_forward(x, branches, order=None):
    """Run one dilated convolution per factor and fuse the results channel-wise.

    ``branches`` holds one :class:`ConvParams` per dilation factor, each with
    ``c_out / len(branches)`` filters and same-padding for its dilation.
    Without ``order`` the output is laid out group-major: channel ``4*g + j``
    is filter ``g`` of branch ``j``.
    """
    outs = [T.conv1d(x, p) for p in branches]
    n = len(branches)
    groups = outs[0].shape[1]
    if order is None:
        order = [j * groups + g for g in range(groups) for j in range(n)]
    return T.permute_channels(T.concat_channels(*outs), order)


class Model:
    """Ordered layers plus the wiring of the encoder/decoder path."""

    def __init__(self, cfg, init=True):
        self.cfg = cfg
        self.layers = {}
        # init=False leaves all weights zero (cheap; for shape and count queries)
        rng = np.random.default_rng(cfg.seed) if init else None
        dtype = np.dtype(cfg.dtype)
        w, f = cfg.widths, cfg.kernel_size
        aspp_mid = cfg.variant in ("aspp-middle", "aspp-middle+end")
        aspp_end = cfg.variant in ("aspp-end", "aspp-middle+end")

        def conv(name, c_in, c_out, aspp=False):
            if aspp:
                self.layers[name] = Aspp(name, AsppLayerSpec(c_in, c_out, f, cfg.factors), rng, dtype)
            else:
                self.layers[name] = Conv(name, c_in, c_out, f, rng, dtype)

        c = 1
        for i, width in enumerate(w, start=1):
            bottleneck = i == len(w)
            conv(f"enc{i}.conv1", c, width, aspp=bottleneck and aspp_mid)
            conv(f"enc{i}.conv2", width, width, aspp=bottleneck and aspp_mid)
            c = width
        for i in range(len(w) - 1, 0, -1):
            self.layers[f"dec{i}.up"] = Upsample(f"dec{i}.up", c, w[i - 1], rng, dtype)
            conv(f"dec{i}.conv1", 2 * w[i - 1], w[i - 1])
            conv(f"dec{i}.conv2", w[i - 1], w[i - 1])
            c = w[i - 1]
        conv("head.conv1", c, c, aspp=aspp_end)
        conv("head.conv2", c, 1)

    # -- introspection

    def parameters(self):
        return [t for layer in self.layers.values() for t in layer.tensors()]

    def named_parameters(self):
        return [(t.name, t) for t in self.parameters()]

    def state_dict(self):
        return {name: t.data for name, t in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise ValueError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, t in own.items():
            arr = np.asarray(state[name])
            if arr.shape != t.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {t.shape}")
            t.data = arr.astype(t.dtype, copy=True)

    def zero_grad(self):
        for t in self.parameters():
            t.grad = None

    def audit(self):
        """Per-layer description including the exact parameter count."""
        rows = []
        for name, layer in self.layers.items():
            row = {"name": name, **layer.describe()}
            row["params"] = sum(t.data.size for t in layer.tensors())
            rows.append(row)
        return rows

    def encoder_layer_specs(self):
        """Encoder path as receptive-field layer specs (conv/pool only)."""
        from .receptive_field import LayerSpec

        specs = []
        for i in range(1, len(self.cfg.widths) + 1):
            for j in (1, 2):
                layer = self.layers[f"enc{i}.conv{j}"]
                if layer.kind == "aspp":
                    d = max(layer.spec.factors)
                else:
                    d = layer.params.dilation
                specs.append(LayerSpec("conv", layer.f, 1, d, name=layer.name))
            if i < len(self.cfg.widths):
                specs.append(LayerSpec("pool", 2, 2, 1, name=f"enc{i}.pool"))
        return specs

    # -- computation

    def forward(self, x, training=True):
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.cfg.dtype))
        if x.data.ndim != 3 or x.shape[1] != 1:
            raise ValueError(f"expected input of shape (batch, 1, length), got {x.shape}")
        if x.shape[2] % LENGTH_MULTIPLE:
            raise ValueError(f"input length {x.shape[2]} not divisible by {LENGTH_MULTIPLE}")
        act = self._act
        L = self.layers
        n = len(self.cfg.widths)
        h, skips = self._encode(x, T.maxpool1d)
        for i in range(n - 1, 0, -1):
            h = act(L[f"dec{i}.up"](h))
            h = T.concat_channels(skips[i - 1], h)
            h = act(L[f"dec{i}.conv1"](h))
            h = act(L[f"dec{i}.conv2"](h))
        h = act(L["head.conv1"](h))
        out = L["head.conv2"](h)
        if not training:
            out = Tensor(np.clip(out.data, 0.0, 1.0))
        return out

    __call__ = forward

    def encode(self, x, pool=None):
        """Bottleneck feature map; ``pool(h, window, stride)`` replaces max pooling if given."""
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.cfg.dtype))
        return self._encode(x, pool or T.maxpool1d)[0]

    def _encode(self, x, pool):
        act = self._act
        n = len(self.cfg.widths)
        skips = []
        h = x
        for i in range(1, n + 1):
            h = act(self.layers[f"enc{i}.conv1"](h))
            h = act(self.layers[f"enc{i}.conv2"](h))
            if i < n:
                skips.append(h)
                h = pool(h, 2, 2)
        return h, skips

    def _act(self, h):
        return T.leaky_relu(h, self.cfg.slope)


def build_model(cfg, init=True):
    if isinstance(cfg, dict):
        cfg = UNetConfig.from_dict(cfg)
    cfg.validate()
    return Model(cfg, init)


def param_count(model, per_layer=False):
    """Trainable scalars of a model, or of the model a :class:`UNetConfig` describes."""
    if isinstance(model, UNetConfig):
        model = build_model(model, init=False)
    total = sum(t.data.size for t in model.parameters())
    if per_layer:
        return total, {row["name"]: row["params"] for row in model.audit()}
    return total


def audit_diff(a, b):
    """Layers whose description differs between two models (by name)."""
    rows_a = {r["name"]: r for r in a.audit()}
    rows_b = {r["name"]: r for r in b.audit()}
    names = list(dict.fromkeys(list(rows_a) + list(rows_b)))
    return [(n, rows_a.get(n), rows_b.get(n)) for n in names if rows_a.get(n) != rows_b.get(n)]


def enhance(model, waveform, meta=None):
    """Enhance a whole utterance.

    ``waveform`` is an :class:`~speech_unet.audio.AudioBuffer` holding the raw
    noisy signal. It is normalized (or normalized with ``meta`` when given),
    zero-padded on the right to a multiple of 32, run through the network in
    one piece, cropped and mapped back to the original amplitude scale.
    """
    from .audio import AudioBuffer, denormalize, normalize

    rate = getattr(model, "sample_rate", None)
    if rate is not None and waveform.sample_rate != rate:
        raise ValueError(f"sample-rate mismatch: model trained at {rate} Hz, input is {waveform.sample_rate} Hz")
    if meta is None:
        norm, meta = normalize(waveform)
    else:
        norm = AudioBuffer(waveform.sample_rate, waveform.samples * meta.scale + meta.offset)
    y = enhance_normalized(model, norm.samples, fill=meta.offset)
    return denormalize(AudioBuffer(waveform.sample_rate, y), meta)


def enhance_normalized(model, samples, fill=0.5):
    """Network output for a 1-D signal already in normalized units.

    The right-hand padding up to a multiple of 32 uses ``fill`` (silence).
    """
    samples = np.asarray(samples, dtype=np.float64)
    n = samples.shape[0]
    padded = -(-max(n, 1) // LENGTH_MULTIPLE) * LENGTH_MULTIPLE
    x = np.full((1, 1, padded), fill, dtype=model.cfg.dtype)
    x[0, 0, :n] = samples
    out = model.forward(x, training=False).data[0, 0, :n]
    return out.astype(np.float64)


# --------------------------------------------------------------------------
# checkpoints
#
# layout (all little-endian):
#   8s   magic  b"SUNETCKP"
#   u32  format version
#   u32  n    length of the UTF-8 JSON header, then n bytes of JSON
#          {"config": {...}, "meta": {...}}
#   u32  number of arrays, then per array:
#          u16 name length, name bytes (UTF-8), u8 ndim, ndim * u32 dims,
#          prod(dims) * f32 values

MAGIC = b"SUNETCKP"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model, meta=None):
    header = json.dumps({"config": model.cfg.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        fh.write(header)
        params = model.named_parameters()
        fh.write(struct.pack("<I", len(params)))
        for name, t in params:
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", t.data.ndim))
            fh.write(struct.pack(f"<{t.data.ndim}I", *t.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Return ``(model, meta)``; the model carries its config and sample rate."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    try:
        version, hlen = struct.unpack_from("<II", blob, 8)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 16
        header = json.loads(blob[pos : pos + hlen])
        pos += hlen
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        state = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos : pos + nlen].decode()
            pos += nlen
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            dims = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            size = int(np.prod(dims)) if dims else 1
            if pos + 4 * size > len(blob):
                raise CheckpointError("truncated checkpoint")
            state[name] = np.frombuffer(blob, dtype="<f4", count=size, offset=pos).reshape(dims)
            pos += 4 * size
    except (struct.error, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    model = build_model(UNetConfig.from_dict(header["config"]))
    model.load_state_dict(state)
    meta = header.get("meta", {})
    model.sample_rate = meta.get("sample_rate")
    return model, meta
