"""Multimodal separable-convolution autoencoder.

Each modality gets its own encoder/decoder stream. Encoder level ``l`` runs
conv -> mid-flow -> "down"conv and halves every spatial dim; channels follow
``base_channels * 2**(l-1)``. The deepest maps of all modalities are stacked
on the channel axis and mixed by a 1x1x1 convolution into the shared
embedding. Each decoder mirrors its encoder ("up"conv -> skip concat ->
mid-flow -> conv) and ends in a 1-channel conv + sigmoid.
"""
import hashlib
import io
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from . import nncore as nn


@dataclass(frozen=True)
class ModelConfig:
    n_modalities: int = 2
    input_dims: tuple = (128, 128, 96)
    depth: int = 5
    base_channels: int = 2
    kernel: int = 5
    dropout_rate: float = 0.1
    embedding_channels: int = None  # defaults to the deepest encoder width

    def __post_init__(self):
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        if self.embedding_channels is None:
            object.__setattr__(self, "embedding_channels", self.base_channels * 2 ** (self.depth - 1))
        if len(self.input_dims) != 3:
            raise ValueError("input_dims must have three entries")
        step = 2 ** self.depth
        bad = [d for d in self.input_dims if d % step]
        if bad:
            raise ValueError(f"input dims {self.input_dims} not divisible by 2**depth={step}")
        if self.kernel % 2 == 0:
            raise ValueError("kernel must be odd")
        if self.n_modalities < 1 or self.depth < 1 or self.base_channels < 1:
            raise ValueError("n_modalities, depth and base_channels must be positive")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must be in [0, 1)")

    def channels(self, level):
        """Feature channels at encoder level 1..depth."""
        return self.base_channels * 2 ** (level - 1)

    def level_dims(self, level):
        return tuple(d // 2 ** level for d in self.input_dims)

    @property
    def bottleneck_shape(self):
        return (self.channels(self.depth),) + self.level_dims(self.depth)

    @property
    def embedding_shape(self):
        return (self.embedding_channels,) + self.level_dims(self.depth)

    @property
    def embedding_length(self):
        return int(np.prod(self.embedding_shape))


def _uniform(rng, shape, fan_in, dtype):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Block:
    """Base for blocks: named parameters and BN buffers in declaration order."""

    def named_parameters(self):
        for name, child in self._children():
            for sub, p in child.named_parameters():
                yield f"{name}.{sub}", p

    def named_buffers(self):
        for name, child in self._children():
            for sub, b in child.named_buffers():
                yield f"{name}.{sub}", b

    def _children(self):
        return []

    def batchnorm_states(self):
        if isinstance(getattr(self, "bn", None), nn.BatchNormState):
            yield self.bn
        for _, child in self._children():
            yield from child.batchnorm_states()

    def conv_param_count(self, include_bias=True):
        return sum(c.conv_param_count(include_bias) for _, c in self._children())


class ConvBlock(Block):
    """(sep)conv -> batchnorm -> elu -> optional dropout."""

    def __init__(self, c_in, c_out, k, separable, rng, dropout_rate=0.0, dtype=np.float32):
        self.c_in, self.c_out, self.k = c_in, c_out, k
        self.separable = separable
        self.dropout_rate = dropout_rate
        if separable:
            self.dw = nn.parameter(_uniform(rng, (c_in, k, k, k), k ** 3, dtype))
            self.pw = nn.parameter(_uniform(rng, (c_out, c_in, 1, 1, 1), c_in, dtype))
        else:
            self.w = nn.parameter(_uniform(rng, (c_out, c_in, k, k, k), c_in * k ** 3, dtype))
        self.b = nn.parameter(np.zeros(c_out, dtype=dtype))
        self.gamma = nn.parameter(np.ones(c_out, dtype=dtype))
        self.beta = nn.parameter(np.zeros(c_out, dtype=dtype))
        self.bn = nn.BatchNormState.fresh(c_out, dtype)

    def __call__(self, x, training=False, rng=None):
        if x.shape[0] != self.c_in:
            raise nn.ShapeError(f"block expects {self.c_in} channels, got {x.shape[0]}")
        if self.separable:
            h = nn.conv3d(nn.depthwise_conv3d(x, self.dw), self.pw, self.b)
        else:
            h = nn.conv3d(x, self.w, self.b)
        h = nn.elu(nn.batchnorm3d(h, self.gamma, self.beta, self.bn, training))
        return nn.dropout(h, self.dropout_rate, training, rng)

    def named_parameters(self):
        if self.separable:
            yield "dw", self.dw
            yield "pw", self.pw
        else:
            yield "w", self.w
        yield "b", self.b
        yield "gamma", self.gamma
        yield "beta", self.beta

    def named_buffers(self):
        yield "bn_mean", self.bn.mean
        yield "bn_var", self.bn.var

    def conv_param_count(self, include_bias=True):
        if self.separable:
            n = self.dw.data.size + self.pw.data.size
        else:
            n = self.w.data.size
        return n + (self.b.data.size if include_bias else 0)


class MidFlow(Block):
    """Three separable conv blocks plus an identity shortcut."""

    def __init__(self, channels, k, rng, separable=True, dtype=np.float32):
        self.channels = channels
        self.convs = [ConvBlock(channels, channels, k, separable, rng, dtype=dtype) for _ in range(3)]

    def __call__(self, x, training=False, rng=None):
        if x.shape[0] != self.channels:
            raise nn.ShapeError(f"mid-flow expects {self.channels} channels, got {x.shape[0]}")
        h = x
        for conv in self.convs:
            h = conv(h, training, rng)
        return nn.add(x, h)

    def _children(self):
        return [(f"sep{i}", c) for i, c in enumerate(self.convs)]


class DownConv(Block):
    def __init__(self, c_in, c_out, k, rng, dropout_rate=0.0, dtype=np.float32):
        self.conv = ConvBlock(c_in, c_out, k, False, rng, dropout_rate, dtype)

    def __call__(self, x, training=False, rng=None):
        if any(n % 2 for n in x.shape[1:]):
            raise nn.ShapeError(f"downconv needs even spatial dims, got {x.shape[1:]}")
        return nn.maxpool3d(self.conv(x, training, rng), window=3, stride=2)

    def _children(self):
        return [("conv", self.conv)]


class UpConv(Block):
    def __init__(self, c_in, c_out, k, rng, dropout_rate=0.0, dtype=np.float32):
        self.conv = ConvBlock(c_in, c_out, k, False, rng, dropout_rate, dtype)

    def __call__(self, x, training=False, rng=None):
        return self.conv(nn.upsample3d(x), training, rng)

    def _children(self):
        return [("conv", self.conv)]


class EncoderLevel(Block):
    def __init__(self, c_in, c_out, k, rng, dropout_rate, dtype):
        self.conv = ConvBlock(c_in, c_out, k, False, rng, dropout_rate, dtype)
        self.mid = MidFlow(c_out, k, rng, dtype=dtype)
        self.down = DownConv(c_out, c_out, k, rng, dropout_rate, dtype)

    def __call__(self, x, training=False, rng=None):
        return self.down(self.mid(self.conv(x, training, rng), training, rng), training, rng)

    def _children(self):
        return [("conv", self.conv), ("mid", self.mid), ("down", self.down)]


class DecoderLevel(Block):
    """"up"conv, then (when a skip exists) channel concat, mid-flow, conv."""

    def __init__(self, c_in, c_out, k, rng, dropout_rate, dtype, has_skip):
        self.has_skip = has_skip
        mixed = 2 * c_out if has_skip else c_out
        self.up = UpConv(c_in, c_out, k, rng, dropout_rate, dtype)
        self.mid = MidFlow(mixed, k, rng, dtype=dtype)
        self.conv = ConvBlock(mixed, c_out, k, False, rng, dropout_rate, dtype)

    def __call__(self, x, skip=None, training=False, rng=None):
        h = self.up(x, training, rng)
        if self.has_skip:
            if skip is None:
                raise nn.ShapeError("decoder level needs a skip tensor")
            if skip.shape != h.shape:
                raise nn.ShapeError(f"skip shape {skip.shape} does not match {h.shape}")
            h = nn.concat([h, skip], axis=0)
        return self.conv(self.mid(h, training, rng), training, rng)

    def _children(self):
        return [("up", self.up), ("mid", self.mid), ("conv", self.conv)]


class Encoder(Block):
    def __init__(self, cfg, rng, dtype):
        self.levels = []
        c_prev = 1
        for level in range(1, cfg.depth + 1):
            c = cfg.channels(level)
            self.levels.append(EncoderLevel(c_prev, c, cfg.kernel, rng, cfg.dropout_rate, dtype))
            c_prev = c

    def __call__(self, x, training=False, rng=None):
        feats = []
        for level in self.levels:
            x = level(x, training, rng)
            feats.append(x)
        return feats

    def _children(self):
        return [(f"level{i + 1}", lv) for i, lv in enumerate(self.levels)]


class Decoder(Block):
    def __init__(self, cfg, rng, dtype):
        self.levels = []
        c_prev = cfg.embedding_channels
        # decoder level l produces spatial level l-1
        for level in range(cfg.depth, 0, -1):
            target = level - 1
            c = cfg.channels(target) if target >= 1 else cfg.channels(1)
            self.levels.append(DecoderLevel(c_prev, c, cfg.kernel, rng, cfg.dropout_rate,
                                            dtype, has_skip=target >= 1))
            c_prev = c
        self.out_w = nn.parameter(_uniform(rng, (1, c_prev, cfg.kernel, cfg.kernel, cfg.kernel),
                                           c_prev * cfg.kernel ** 3, dtype))
        self.out_b = nn.parameter(np.zeros(1, dtype=dtype))

    def __call__(self, x, skips, training=False, rng=None):
        # skips[i] is the encoder output at spatial level i+1
        depth = len(self.levels)
        for i, level in enumerate(self.levels):
            target = depth - 1 - i
            skip = None
            if target >= 1:
                if target - 1 >= len(skips) or skips[target - 1] is None:
                    raise nn.ShapeError(f"missing skip for level {target}")
                skip = skips[target - 1]
            x = level(x, skip, training, rng)
        return nn.sigmoid(nn.conv3d(x, self.out_w, self.out_b))

    def _children(self):
        return [(f"level{len(self.levels) - i - 1}", lv) for i, lv in enumerate(self.levels)]

    def named_parameters(self):
        yield from super().named_parameters()
        yield "out.w", self.out_w
        yield "out.b", self.out_b

    def conv_param_count(self, include_bias=True):
        return super().conv_param_count(include_bias) + self.out_w.data.size + (1 if include_bias else 0)


@dataclass
class EncodeResult:
    bottlenecks: list
    skips: list = field(default_factory=list)


class FuseModel(Block):
    def __init__(self, config=None, seed=0, dtype=np.float32):
        self.config = config or ModelConfig()
        self.dtype = np.dtype(dtype)
        self.seed = seed
        cfg = self.config
        rng = np.random.default_rng(seed)
        self.encoders = [Encoder(cfg, rng, self.dtype) for _ in range(cfg.n_modalities)]
        c_cat = cfg.n_modalities * cfg.channels(cfg.depth)
        self.fuse_w = nn.parameter(_uniform(rng, (cfg.embedding_channels, c_cat, 1, 1, 1), c_cat, self.dtype))
        self.fuse_b = nn.parameter(np.zeros(cfg.embedding_channels, dtype=self.dtype))
        self.decoders = [Decoder(cfg, rng, self.dtype) for _ in range(cfg.n_modalities)]
        self._check_skips()

    def _check_skips(self):
        cfg = self.config
        for level in range(1, cfg.depth):
            dec = self.decoders[0].levels[cfg.depth - level - 1]
            if dec.up.conv.c_out != cfg.channels(level):
                raise AssertionError(f"decoder level {level} channels do not mirror the encoder")

    def _children(self):
        kids = [(f"enc{m}", e) for m, e in enumerate(self.encoders)]
        return kids + [(f"dec{m}", d) for m, d in enumerate(self.decoders)]

    def named_parameters(self):
        for m, e in enumerate(self.encoders):
            for n, p in e.named_parameters():
                yield f"enc{m}.{n}", p
        yield "fuse.w", self.fuse_w
        yield "fuse.b", self.fuse_b
        for m, d in enumerate(self.decoders):
            for n, p in d.named_parameters():
                yield f"dec{m}.{n}", p

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def conv_param_count(self, include_bias=True):
        n = super().conv_param_count(include_bias) + self.fuse_w.data.size
        return n + (self.fuse_b.data.size if include_bias else 0)

    def _as_inputs(self, volumes):
        cfg = self.config
        if len(volumes) != cfg.n_modalities:
            raise nn.ShapeError(f"expected {cfg.n_modalities} modalities, got {len(volumes)}")
        out = []
        for v in volumes:
            a = v.data if isinstance(v, nn.Tensor) else np.asarray(v)
            if a.shape == cfg.input_dims:
                a = a[None]
            if a.shape != (1,) + cfg.input_dims:
                raise nn.ShapeError(f"volume shape {a.shape} does not match input dims {cfg.input_dims}")
            out.append(v if isinstance(v, nn.Tensor) and v.shape == a.shape
                       else nn.Tensor(a.astype(self.dtype, copy=False)))
        return out

    def encode(self, volumes, training=False, rng=None):
        feats = [enc(x, training, rng) for enc, x in zip(self.encoders, self._as_inputs(volumes))]
        return EncodeResult([f[-1] for f in feats], [f[:-1] for f in feats])

    def fuse(self, bottlenecks):
        if len(bottlenecks) != self.config.n_modalities:
            raise nn.ShapeError("one bottleneck per modality is required")
        shapes = {b.shape for b in bottlenecks}
        if len(shapes) != 1:
            raise nn.ShapeError(f"bottleneck shapes differ: {shapes}")
        mixed = nn.conv3d(nn.concat(bottlenecks, axis=0), self.fuse_w, self.fuse_b)
        return nn.reshape(mixed, (-1,))

    def decode(self, embedding, skips, training=False, rng=None):
        cfg = self.config
        if embedding.shape != (cfg.embedding_length,):
            raise nn.ShapeError(f"embedding length {embedding.shape} != {cfg.embedding_length}")
        if len(skips) != cfg.n_modalities:
            raise nn.ShapeError("one skip stack per modality is required")
        x = nn.reshape(embedding, cfg.embedding_shape)
        return [dec(x, s, training, rng) for dec, s in zip(self.decoders, skips)]

    def forward(self, volumes, training=False, rng=None):
        enc = self.encode(volumes, training, rng)
        emb = self.fuse(enc.bottlenecks)
        return self.decode(emb, enc.skips, training, rng), emb

    def reconstruct(self, volumes):
        recs, _ = self.forward(volumes, training=False)
        return [r.data[0] for r in recs]

    def embed(self, volumes):
        enc = self.encode(volumes, training=False)
        return self.fuse(enc.bottlenecks).data.copy()


# --------------------------------------------------------------------------
# parameter accounting

def midflow_counts(channels, k=5):
    """Conv parameter counts of a separable mid-flow vs its standard twin."""
    sep_w = 3 * (k ** 3 * channels + channels * channels)
    std_w = 3 * (k ** 3 * channels * channels)
    sep = sep_w + 3 * channels
    std = std_w + 3 * channels
    return {
        "channels": channels,
        "kernel": k,
        "separable_weights": sep_w,
        "standard_weights": std_w,
        "separable": sep,
        "standard": std,
        "ratio_weights": Fraction(std_w, sep_w),
        "ratio": Fraction(std, sep),
    }


def count_params(obj):
    """Exact parameter enumeration for a model or block.

    Returns per-block counts, the total of every trainable scalar, and the
    standard-vs-separable ratio summed over all mid-flow blocks inside ``obj``
    (conv weights+biases; batchnorm affine terms are identical in both
    variants and left out of the ratio).
    """
    blocks = {}
    for name, p in obj.named_parameters():
        head = name.rsplit(".", 1)[0] if "." in name else name
        blocks[head] = blocks.get(head, 0) + int(p.data.size)
    total = sum(blocks.values())
    mids = list(_midflows(obj))
    out = {"blocks": blocks, "total": total}
    if mids:
        sep = sum(midflow_counts(m.channels, m.convs[0].k)["separable"] for m in mids)
        std = sum(midflow_counts(m.channels, m.convs[0].k)["standard"] for m in mids)
        out["midflow_separable"] = sep
        out["midflow_standard"] = std
        out["separable_vs_standard_ratio"] = Fraction(std, sep)
    return out


def _midflows(obj):
    if isinstance(obj, MidFlow):
        yield obj
        return
    for _, child in obj._children():
        yield from _midflows(child)


# --------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"FSCK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _state_arrays(model):
    arrays = [(n, p.data) for n, p in model.named_parameters()]
    arrays += [(n, b) for n, b in model.named_buffers()]
    return arrays


def save_checkpoint(model, path):
    """Header (magic, version, JSON config) + LE f32 payload + SHA-256 footer."""
    arrays = _state_arrays(model)
    header = json.dumps({
        "config": asdict(model.config),
        "seed": model.seed,
        "tensors": [[n, list(a.shape)] for n, a in arrays],
    }, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(header)))
    buf.write(header)
    for _, a in arrays:
        buf.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
    body = buf.getvalue()
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(hashlib.sha256(body).digest())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 44 or raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch")
    version, hlen = struct.unpack_from("<II", body, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    header = json.loads(body[12:12 + hlen])
    cfg = ModelConfig(**header["config"])
    model = FuseModel(cfg, seed=header["seed"])
    offset = 12 + hlen
    targets = dict(_state_arrays(model))
    for name, shape in header["tensors"]:
        n = int(np.prod(shape))
        vals = np.frombuffer(body, dtype="<f4", count=n, offset=offset).reshape(shape)
        offset += 4 * n
        if name not in targets or targets[name].shape != tuple(shape):
            raise CheckpointError(f"{path}: unexpected tensor {name} {shape}")
        targets[name][...] = vals
    if offset != len(body):
        raise CheckpointError(f"{path}: trailing bytes in payload")
    return model
