"""Gaussian-mixture deep generative model: networks, parameters, checkpoints.

The model has four parts sharing one feature trunk:

* classifier ``q(y|x)``: trunk -> linear -> softmax over all C classes
  (known classes first, then the augmented cluster slots),
* encoder ``q(z|x,y)``: linear heads on ``trunk(x) ++ onehot(y)``,
* prior ``p(z|y)``: one diagonal Gaussian per class, stored as a table,
* decoder ``p(x|z)``: mirror of the trunk, linear output (no squashing).

The ``conv`` variant uses stride-2 1d convolutions in the trunk and transposed
convolutions in the decoder; the ``mlp`` variant uses dense layers.
"""
from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import diffcore as dc

VARIANTS = ("conv", "mlp")
PRIOR_KEYS = ("prior_mean", "prior_logvar")
CHECKPOINT_MAGIC = b"SUSLCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    channels: int
    length: int
    n_known_classes: int
    n_augmented_classes: int = 0
    latent_dim: int = 10
    layers: int = 2
    filters: int = 32
    units: int = 256
    kernel_size: int = 5
    variant: str = "conv"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.channels < 1 or self.length < 1:
            raise ValueError("channels and length must be positive")
        if self.n_known_classes < 0 or self.n_augmented_classes < 0:
            raise ValueError("class counts must be non-negative")
        if self.n_classes < 1:
            raise ValueError("model needs at least one class slot")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if not 1 <= self.layers <= 3:
            raise ValueError("layers must be in 1..3")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        if self.filters < 1 or self.units < 1:
            raise ValueError("filters and units must be positive")

    @property
    def n_classes(self):
        return self.n_known_classes + self.n_augmented_classes

    @property
    def padding(self):
        return self.kernel_size // 2

    @property
    def conv_lengths(self):
        """Sequence lengths before the first and after every conv block."""
        lengths = [self.length]
        for _ in range(self.layers):
            lengths.append(dc.conv1d_output_length(lengths[-1], self.kernel_size, 2, self.padding))
        return lengths

    @property
    def feature_dim(self):
        if self.variant == "conv":
            return self.filters * self.conv_lengths[-1]
        return self.units

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def _shapes(cfg: ModelConfig):
    """Ordered (name, shape, init) triples; init is 'relu', 'head', 'prior' or 'zero'."""
    c, d, f = cfg.n_classes, cfg.latent_dim, cfg.feature_dim
    out = []
    if cfg.variant == "conv":
        cin = cfg.channels
        for i in range(cfg.layers):
            out.append((f"enc_conv{i}_w", (cfg.filters, cin, cfg.kernel_size), "relu"))
            out.append((f"enc_conv{i}_b", (cfg.filters,), "zero"))
            cin = cfg.filters
    else:
        fan = cfg.channels * cfg.length
        for i in range(cfg.layers):
            out.append((f"enc_fc{i}_w", (fan, cfg.units), "relu"))
            out.append((f"enc_fc{i}_b", (cfg.units,), "zero"))
            fan = cfg.units
    out += [
        ("cls_w", (f, c), "head"), ("cls_b", (c,), "zero"),
        ("mu_w", (f + c, d), "head"), ("mu_b", (d,), "zero"),
        ("logvar_w", (f + c, d), "head"), ("logvar_b", (d,), "zero"),
    ]
    if cfg.variant == "conv":
        out.append(("dec_in_w", (d, f), "relu"))
        out.append(("dec_in_b", (f,), "zero"))
        for i in range(cfg.layers):
            out.append((f"dec_deconv{i}_w", (cfg.filters, cfg.filters, cfg.kernel_size), "relu"))
            out.append((f"dec_deconv{i}_b", (cfg.filters,), "zero"))
        out.append(("dec_out_w", (cfg.channels, cfg.filters, 1), "head"))
        out.append(("dec_out_b", (cfg.channels,), "zero"))
    else:
        fan = d
        for i in range(cfg.layers):
            out.append((f"dec_fc{i}_w", (fan, cfg.units), "relu"))
            out.append((f"dec_fc{i}_b", (cfg.units,), "zero"))
            fan = cfg.units
        out.append(("dec_out_w", (fan, cfg.channels * cfg.length), "head"))
        out.append(("dec_out_b", (cfg.channels * cfg.length,), "zero"))
    out.append(("prior_mean", (c, d), "prior"))
    out.append(("prior_logvar", (c, d), "zero"))
    return out


def _fan_in(name, shape):
    if name.startswith(("enc_conv", "dec_out")) and len(shape) == 3:
        return shape[1] * shape[2]
    if name.startswith("dec_deconv"):
        return shape[0] * shape[2]
    return shape[0]


def parameter_count(cfg: ModelConfig) -> int:
    return sum(math.prod(shape) for _, shape, _ in _shapes(cfg))


class Parameters:
    """All trainable arrays of one model, keyed by name, plus its config."""

    def __init__(self, config: ModelConfig, arrays: dict):
        expected = [name for name, _, _ in _shapes(config)]
        if list(arrays) != expected:
            raise ValueError("parameter names/order do not match the config")
        for name, shape, _ in _shapes(config):
            if arrays[name].shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {arrays[name].shape}")
        self.config = config
        self.arrays = arrays

    @classmethod
    def init(cls, config: ModelConfig, seed=0, dtype=np.float64):
        rng = np.random.default_rng(seed)
        arrays = {}
        for name, shape, kind in _shapes(config):
            if kind == "zero":
                a = np.zeros(shape)
            elif kind == "prior":
                a = rng.standard_normal(shape)
            elif kind == "relu":
                a = rng.standard_normal(shape) * math.sqrt(2.0 / _fan_in(name, shape))
            else:
                a = rng.standard_normal(shape) * (0.02 / math.sqrt(_fan_in(name, shape)))
            arrays[name] = a.astype(dtype)
        return cls(config, arrays)

    def __getitem__(self, name):
        return self.arrays[name]

    def __iter__(self):
        return iter(self.arrays)

    def items(self):
        return self.arrays.items()

    @property
    def dtype(self):
        return next(iter(self.arrays.values())).dtype

    def copy(self):
        return Parameters(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def astype(self, dtype):
        return Parameters(self.config, {k: v.astype(dtype) for k, v in self.arrays.items()})

    def n_values(self):
        return sum(a.size for a in self.arrays.values())

    def is_finite(self):
        return all(np.all(np.isfinite(a)) for a in self.arrays.values())

    def __eq__(self, other):
        if not isinstance(other, Parameters) or other.config != self.config:
            return NotImplemented
        return all(
            a.dtype == other.arrays[k].dtype and np.array_equal(a, other.arrays[k])
            for k, a in self.arrays.items()
        )

    def watch(self):
        """Graph leaves for every array, ready to be used inside a Tape."""
        return {k: dc.Array(v, requires_grad=True) for k, v in self.arrays.items()}

    def constants(self):
        return {k: dc.Array(v) for k, v in self.arrays.items()}


# ---------------------------------------------------------------- graph parts


def trunk(P, cfg: ModelConfig, x):
    """Feature vector per sample, shape (batch, feature_dim)."""
    h = x
    if cfg.variant == "conv":
        for i in range(cfg.layers):
            h = dc.relu(dc.conv1d(h, P[f"enc_conv{i}_w"], P[f"enc_conv{i}_b"],
                                  stride=2, padding=cfg.padding))
        return dc.reshape(h, (h.shape[0], -1))
    h = dc.reshape(h, (h.shape[0], cfg.channels * cfg.length))
    for i in range(cfg.layers):
        h = dc.relu(h @ P[f"enc_fc{i}_w"] + P[f"enc_fc{i}_b"])
    return h


def class_logits(P, h):
    return h @ P["cls_w"] + P["cls_b"]


def encoder_heads(P, h, onehot):
    hy = dc.concat([h, onehot], axis=1)
    return hy @ P["mu_w"] + P["mu_b"], hy @ P["logvar_w"] + P["logvar_b"]


def sample_latent(mean, logvar, noise):
    return mean + dc.exp(dc.scale(logvar, 0.5)) * noise


def decoder(P, cfg: ModelConfig, z):
    n = z.shape[0]
    if cfg.variant == "conv":
        lengths = cfg.conv_lengths
        h = dc.relu(z @ P["dec_in_w"] + P["dec_in_b"])
        h = dc.reshape(h, (n, cfg.filters, lengths[-1]))
        for i in range(cfg.layers):
            target = lengths[cfg.layers - 1 - i]
            out_pad = target - dc.conv_transpose1d_output_length(
                h.shape[2], cfg.kernel_size, 2, cfg.padding)
            h = dc.relu(dc.conv_transpose1d(h, P[f"dec_deconv{i}_w"], P[f"dec_deconv{i}_b"],
                                            stride=2, padding=cfg.padding, output_padding=out_pad))
        return dc.conv1d(h, P["dec_out_w"], P["dec_out_b"])
    h = z
    for i in range(cfg.layers):
        h = dc.relu(h @ P[f"dec_fc{i}_w"] + P[f"dec_fc{i}_b"])
    h = h @ P["dec_out_w"] + P["dec_out_b"]
    return dc.reshape(h, (n, cfg.channels, cfg.length))


# ------------------------------------------------------------ numpy-level API


def _as_batch(cfg, x):
    x = np.asarray(x)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (cfg.channels, cfg.length):
        raise dc.ShapeError("model input", x.shape, (cfg.channels, cfg.length))
    return x, single


def _check_class(cfg, y):
    y = np.asarray(y)
    if np.any(y < 0) or np.any(y >= cfg.n_classes):
        raise IndexError(f"class index out of range 0..{cfg.n_classes - 1}: {y}")
    return y


def classify(params: Parameters, x):
    """q(y|x) for one series (channels, length) or a batch of them."""
    cfg = params.config
    xb, single = _as_batch(cfg, x)
    P = params.constants()
    probs = dc.softmax(class_logits(P, trunk(P, cfg, dc.Array(xb.astype(params.dtype))))).value
    return probs[0] if single else probs


def encode(params: Parameters, x, y):
    """Mean and log-variance of q(z|x, y)."""
    cfg = params.config
    xb, single = _as_batch(cfg, x)
    y = _check_class(cfg, np.broadcast_to(y, (len(xb),)))
    P = params.constants()
    onehot = np.eye(cfg.n_classes, dtype=params.dtype)[y]
    mean, logvar = encoder_heads(P, trunk(P, cfg, dc.Array(xb.astype(params.dtype))), dc.Array(onehot))
    if single:
        return mean.value[0], logvar.value[0]
    return mean.value, logvar.value


def reparameterize(z_mean, z_logvar, noise):
    z_mean, z_logvar, noise = (np.asarray(a, dtype=float) for a in (z_mean, z_logvar, noise))
    if not (z_mean.shape == z_logvar.shape == noise.shape):
        raise dc.ShapeError("reparameterize", z_mean.shape, z_logvar.shape, noise.shape)
    return z_mean + np.exp(0.5 * z_logvar) * noise


def decode(params: Parameters, z):
    cfg = params.config
    z = np.asarray(z, dtype=params.dtype)
    single = z.ndim == 1
    zb = z[None] if single else z
    if zb.ndim != 2 or zb.shape[1] != cfg.latent_dim:
        raise dc.ShapeError("decode", z.shape, (cfg.latent_dim,))
    out = decoder(params.constants(), cfg, dc.Array(zb)).value
    return out[0] if single else out


def prior(params: Parameters, y):
    _check_class(params.config, y)
    return params["prior_mean"][y].copy(), params["prior_logvar"][y].copy()


# ---------------------------------------------------------------- checkpoints
#
# Layout (all integers little-endian):
#   8 bytes   magic "SUSLCKPT"
#   u32       format version
#   u64       length of the UTF-8 JSON header that follows
#   header    {"config": ..., "dtype": "<f8", "arrays": [[name, shape], ...],
#              "meta": {...}}  (keys sorted, no whitespace)
#   payload   every array's raw bytes, C order, in header order


def save_checkpoint(path, params: Parameters, meta=None):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(params, meta))


def checkpoint_bytes(params: Parameters, meta=None) -> bytes:
    dtype = np.dtype(params.dtype).newbyteorder("<")
    header = {
        "config": params.config.to_dict(),
        "dtype": dtype.str,
        "arrays": [[k, list(v.shape)] for k, v in params.items()],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
    buf.write(blob)
    for v in params.arrays.values():
        buf.write(np.ascontiguousarray(v, dtype=dtype).tobytes())
    return buf.getvalue()


def load_checkpoint(path):
    """Returns ``(params, meta)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, n = struct.unpack_from("<IQ", data, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    start = 8 + struct.calcsize("<IQ")
    header = json.loads(data[start:start + n].decode())
    dtype = np.dtype(header["dtype"])
    offset = start + n
    arrays = {}
    for name, shape in header["arrays"]:
        count = math.prod(shape)
        arrays[name] = np.frombuffer(data, dtype=dtype, count=count, offset=offset).reshape(shape).astype(dtype.newbyteorder("="))
        offset += count * dtype.itemsize
    if offset != len(data):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return Parameters(ModelConfig.from_dict(header["config"]), arrays), header["meta"]
