"""3D ENet: encoder/decoder segmentation network assembled from tensornet ops.

The layout transposes the 2D original to 3D at configurable scale: an
initial block (strided conv concatenated with pooling), a downsampling
stage of regular bottlenecks, a repeated dilated/asymmetric stage, and a
smaller expanding path back to full resolution. Batch statistics are
replaced by per-channel trainable scale+shift, and every convolution is
followed by one; nonlinearities are PReLU.

Stage channel counts default to ``{F, 4F, 8F}`` for ``F`` initial
filters and can be overridden. Max-pooling indices from the two
downsampling bottlenecks feed the paired unpooling bottlenecks in the
decoder; with average pooling the decoder upsamples with transposed
convolutions instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .augment import AugConfig
from .tensornet import (
    Param,
    conv3d_bwd,
    conv3d_fwd,
    conv3d_input_grad,
    load_checkpoint,
    pool3d,
    pool3d_bwd,
    prelu_bwd,
    prelu_fwd,
    save_checkpoint,
    unpool3d,
    unpool3d_bwd,
)


class ConfigError(ValueError):
    """A network hyperparameter is out of range or inconsistent."""


@dataclass
class NetConfig:
    initial_filters: int = 16
    asym_kernel: int = 5
    n_stage1_bottlenecks: int = 4
    n_stage2_repeats: int = 2
    pool_kind: str = "max"
    projection_scale: int = 4
    dropout: float = 0.1
    lr: float = 1e-3
    out_channels: int = 6
    stage1_channels: int | None = None   # defaults to 4 * initial_filters
    stage2_channels: int | None = None   # defaults to 8 * initial_filters
    aug: AugConfig = field(default_factory=AugConfig)

    def __post_init__(self):
        if self.initial_filters < 1:
            raise ConfigError(f"initial_filters must be >= 1, got {self.initial_filters}")
        if self.asym_kernel < 3 or self.asym_kernel % 2 == 0:
            raise ConfigError(f"asym_kernel must be odd and >= 3, got {self.asym_kernel}")
        if self.n_stage1_bottlenecks < 0 or self.n_stage2_repeats < 0:
            raise ConfigError("stage block counts must be >= 0")
        if self.pool_kind not in ("max", "avg"):
            raise ConfigError(f"pool_kind must be 'max' or 'avg', got {self.pool_kind!r}")
        if self.projection_scale < 1:
            raise ConfigError(f"projection_scale must be >= 1, got {self.projection_scale}")
        if not (0 <= self.dropout < 1):
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.out_channels not in (2, 6):
            raise ConfigError(f"out_channels must be 2 (bbox) or 6 (landmarks), got {self.out_channels}")
        if isinstance(self.aug, dict):
            self.aug = AugConfig.from_json(self.aug)

    @property
    def c1(self) -> int:
        return self.stage1_channels or 4 * self.initial_filters

    @property
    def c2(self) -> int:
        return self.stage2_channels or 8 * self.initial_filters

    def to_json(self) -> dict:
        d = dict(self.__dict__)
        d["aug"] = self.aug.to_json()
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "NetConfig":
        obj = dict(obj)
        if "aug" in obj and isinstance(obj["aug"], dict):
            obj["aug"] = AugConfig.from_json(obj["aug"])
        return cls(**obj)


def _glorot(rng, shape, fan_in, fan_out, dtype):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(dtype)


class Conv3d:
    def __init__(self, name, rng, c_in, c_out, kernel, stride=1, dilation=1,
                 padding=0, bias=False, dtype=np.float32):
        kernel = (kernel,) * 3 if np.isscalar(kernel) else tuple(kernel)
        k3 = int(np.prod(kernel))
        self.w = Param(f"{name}.w", _glorot(rng, (c_out, c_in) + kernel,
                                            c_in * k3, c_out * k3, dtype))
        self.bias = Param(f"{name}.b", np.zeros(c_out, dtype)) if bias else None
        self.stride, self.dilation, self.padding = stride, dilation, padding

    def forward(self, x, train=False):
        self._x = x
        b = self.bias.value if self.bias is not None else None
        return conv3d_fwd(x, self.w.value, b, self.stride, self.dilation, self.padding)

    def backward(self, g):
        b = self.bias.value if self.bias is not None else None
        gx, gw, gb = conv3d_bwd(g, self._x, self.w.value, b,
                                self.stride, self.dilation, self.padding)
        self.w.add_grad(gw)
        if self.bias is not None:
            self.bias.add_grad(gb)
        return gx

    def params(self):
        return [self.w] + ([self.bias] if self.bias is not None else [])


class ConvTranspose3d:
    """2x upsampling transposed convolution (kernel 2, stride 2)."""

    def __init__(self, name, rng, c_in, c_out, bias=False, dtype=np.float32):
        self.w = Param(f"{name}.w", _glorot(rng, (c_in, c_out, 2, 2, 2),
                                            c_in * 8, c_out * 8, dtype))
        self.bias = Param(f"{name}.b", np.zeros(c_out, dtype)) if bias else None

    def forward(self, x, train=False):
        self._x = x
        out_sp = tuple(2 * s for s in x.shape[2:])
        y = conv3d_input_grad(x, self.w.value, out_sp, stride=2)
        if self.bias is not None:
            y = y + self.bias.value.reshape(1, -1, 1, 1, 1)
        return y

    def backward(self, g):
        gx = conv3d_fwd(g, self.w.value, None, stride=2, _allow_even=True)
        _, gw, _ = conv3d_bwd(self._x, g, self.w.value, None, stride=2,
                              _allow_even=True, _only_weight=True)
        self.w.add_grad(gw)
        if self.bias is not None:
            self.bias.add_grad(g.sum(axis=(0, 2, 3, 4)))
        return gx

    def params(self):
        return [self.w] + ([self.bias] if self.bias is not None else [])


class ChannelAffine:
    """Trainable per-channel scale and shift (batch-statistics-free norm stand-in)."""

    def __init__(self, name, channels, dtype=np.float32):
        self.scale = Param(f"{name}.scale", np.ones(channels, dtype))
        self.shift = Param(f"{name}.shift", np.zeros(channels, dtype))

    def forward(self, x, train=False):
        self._x = x
        s = self.scale.value.reshape(1, -1, 1, 1, 1)
        return x * s + self.shift.value.reshape(1, -1, 1, 1, 1)

    def backward(self, g):
        axes = (0, 2, 3, 4)
        self.scale.add_grad((g * self._x).sum(axis=axes))
        self.shift.add_grad(g.sum(axis=axes))
        return g * self.scale.value.reshape(1, -1, 1, 1, 1)

    def params(self):
        return [self.scale, self.shift]


class PReLU:
    def __init__(self, name, channels, init=0.25, dtype=np.float32):
        self.slope = Param(f"{name}.slope", np.full(channels, init, dtype))

    def forward(self, x, train=False):
        self._x = x
        return prelu_fwd(x, self.slope.value)

    def backward(self, g):
        gx, gs = prelu_bwd(g, self._x, self.slope.value)
        self.slope.add_grad(gs)
        return gx

    def params(self):
        return [self.slope]


class Pool:
    def __init__(self, kind):
        self.kind = kind
        self.last_indices = None
        self.in_spatial = None

    def forward(self, x, train=False):
        self._shape = x.shape
        self.in_spatial = x.shape[2:]
        out, idx = pool3d(x, self.kind, 2, 2)
        self.last_indices = idx
        return out

    def backward(self, g):
        return pool3d_bwd(g, self._shape, self.kind, 2, self.last_indices)

    def params(self):
        return []


class MaxUnpoolFrom:
    """Unpooling that reuses the argmax indices of a paired downsampling pool."""

    def __init__(self, pool: Pool):
        self.pool = pool

    def forward(self, x, train=False):
        idx = self.pool.last_indices
        if idx is None:
            raise RuntimeError("paired pool has not run forward yet")
        if idx.shape != x.shape:
            raise ValueError(
                f"unpool input {x.shape} does not match paired pool indices {idx.shape}"
            )
        self._idx = idx
        self._in_spatial = x.shape[2:]
        return unpool3d(x, idx, self.pool.in_spatial)

    def backward(self, g):
        return unpool3d_bwd(g, self._idx, self._in_spatial)

    def params(self):
        return []


class PadChannels:
    def __init__(self, extra):
        self.extra = extra

    def forward(self, x, train=False):
        if self.extra == 0:
            return x
        pad = np.zeros((x.shape[0], self.extra) + x.shape[2:], dtype=x.dtype)
        return np.concatenate([x, pad], axis=1)

    def backward(self, g):
        return g if self.extra == 0 else np.ascontiguousarray(g[:, : g.shape[1] - self.extra])

    def params(self):
        return []


class SpatialDropout:
    """Drops whole feature maps with probability p during training."""

    def __init__(self, p, rng_box):
        self.p = p
        self.rng_box = rng_box

    def forward(self, x, train=False):
        if not train or self.p == 0:
            self._mask = None
            return x
        keep = (self.rng_box["rng"].random(x.shape[:2]) >= self.p)
        self._mask = keep.astype(x.dtype).reshape(x.shape[:2] + (1, 1, 1)) / (1 - self.p)
        return x * self._mask

    def backward(self, g):
        return g if self._mask is None else g * self._mask

    def params(self):
        return []


class Chain:
    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, g):
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def params(self):
        return [p for layer in self.layers for p in layer.params()]


class InitialBlock:
    """Strided 3^3 conv concatenated with 2x pooling of the raw input."""

    def __init__(self, name, rng, c_in, c_out, pool_kind, dtype):
        if c_out < 2:
            raise ConfigError("initial_filters must be >= 2 to leave room for the pooled channel")
        self.conv = Conv3d(f"{name}.conv", rng, c_in, c_out - c_in, 3,
                           stride=2, padding=1, dtype=dtype)
        self.pool = Pool(pool_kind)
        self.post = Chain([ChannelAffine(f"{name}.affine", c_out, dtype),
                           PReLU(f"{name}.act", c_out, dtype=dtype)])
        self.c_conv = c_out - c_in

    def forward(self, x, train=False):
        c = self.conv.forward(x, train)
        p = self.pool.forward(x, train)
        return self.post.forward(np.concatenate([c, p], axis=1), train)

    def backward(self, g):
        g = self.post.backward(g)
        gc = np.ascontiguousarray(g[:, : self.c_conv])
        gp = np.ascontiguousarray(g[:, self.c_conv:])
        return self.conv.backward(gc) + self.pool.backward(gp)

    def params(self):
        return self.conv.params() + self.post.params()

    def describe(self):
        return f"initial conv3s2+{self.pool.kind}pool -> {self.c_conv + 1}ch"


class Bottleneck:
    """Residual bottleneck: project, main convolution, expand, merge with skip.

    kind is one of regular | dilated | asymmetric | downsample | upsample.
    Downsampling halves each spatial extent, upsampling doubles them.
    """

    def __init__(self, name, rng, kind, c_in, c_out, cfg: NetConfig,
                 dilation=1, paired_pool: Pool | None = None, rng_box=None,
                 dtype=np.float32):
        if c_in % cfg.projection_scale != 0:
            raise ConfigError(
                f"projection_scale {cfg.projection_scale} does not divide "
                f"{c_in} channels at {name}"
            )
        internal = max(1, c_in // cfg.projection_scale)
        self.kind = kind
        self.name = name
        self.dilation = dilation
        rngbox = rng_box if rng_box is not None else {"rng": np.random.default_rng(0)}

        def affine_act(tag, ch):
            return [ChannelAffine(f"{name}.{tag}.affine", ch, dtype),
                    PReLU(f"{name}.{tag}.act", ch, dtype=dtype)]

        if kind == "downsample":
            proj = [Conv3d(f"{name}.proj", rng, c_in, internal, 3, stride=2,
                           padding=1, dtype=dtype)]
        else:
            proj = [Conv3d(f"{name}.proj", rng, c_in, internal, 1, dtype=dtype)]
        proj += affine_act("proj", internal)

        if kind == "asymmetric":
            k = cfg.asym_kernel
            main = []
            for tag, kern, pad in (
                ("ax", (k, 1, 1), (k // 2, 0, 0)),
                ("ay", (1, k, 1), (0, k // 2, 0)),
                ("az", (1, 1, k), (0, 0, k // 2)),
            ):
                main.append(Conv3d(f"{name}.{tag}", rng, internal, internal,
                                   kern, padding=pad, dtype=dtype))
                main += affine_act(tag, internal)
        elif kind == "upsample":
            main = [ConvTranspose3d(f"{name}.deconv", rng, internal, internal,
                                    dtype=dtype)] + affine_act("main", internal)
        else:
            d = dilation
            main = [Conv3d(f"{name}.main", rng, internal, internal, 3,
                           dilation=d, padding=d, dtype=dtype)]
            main += affine_act("main", internal)

        expand = [Conv3d(f"{name}.expand", rng, internal, c_out, 1, dtype=dtype),
                  ChannelAffine(f"{name}.expand.affine", c_out, dtype),
                  SpatialDropout(cfg.dropout, rngbox)]
        self.ext = Chain(proj + main + expand)

        if kind == "downsample":
            if c_out < c_in:
                raise ConfigError(f"downsample at {name} must not shrink channels")
            self.skip_pool = Pool(cfg.pool_kind)
            self.skip = Chain([self.skip_pool, PadChannels(c_out - c_in)])
        elif kind == "upsample":
            pieces = [Conv3d(f"{name}.skipconv", rng, c_in, c_out, 1, dtype=dtype),
                      ChannelAffine(f"{name}.skip.affine", c_out, dtype)]
            if cfg.pool_kind == "max":
                if paired_pool is None:
                    raise ConfigError(f"upsample at {name} needs a paired pool")
                pieces.append(MaxUnpoolFrom(paired_pool))
            else:
                pieces.append(ConvTranspose3d(f"{name}.skipdeconv", rng, c_out,
                                              c_out, dtype=dtype))
            self.skip_pool = None
            self.skip = Chain(pieces)
        else:
            if c_in != c_out:
                raise ConfigError(f"{kind} bottleneck at {name} must keep channels")
            self.skip_pool = None
            self.skip = Chain([])

        self.act = PReLU(f"{name}.out.act", c_out, dtype=dtype)

    def forward(self, x, train=False):
        s = self.skip.forward(x, train)
        e = self.ext.forward(x, train)
        return self.act.forward(s + e, train)

    def backward(self, g):
        g = self.act.backward(g)
        return self.skip.backward(g) + self.ext.backward(g)

    def params(self):
        return self.ext.params() + self.skip.params() + self.act.params()

    def describe(self):
        extra = f" d{self.dilation}" if self.kind == "dilated" else ""
        return f"{self.name} {self.kind}{extra}"


class ENet3d:
    """The assembled network; built via :func:`build_net`."""

    def __init__(self, cfg: NetConfig, seed: int, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.rng_box = {"rng": rng}
        box = self.rng_box

        F, C1, C2 = cfg.initial_filters, cfg.c1, cfg.c2
        for ch, fieldname in ((F, "initial_filters"), (C1, "stage1_channels"),
                              (C2, "stage2_channels")):
            if ch % cfg.projection_scale != 0:
                raise ConfigError(
                    f"projection_scale must divide {fieldname} ({ch})")

        contracting: list = [InitialBlock("initial", rng, 1, F, cfg.pool_kind, dtype)]
        b10 = Bottleneck("s1.0", rng, "downsample", F, C1, cfg, rng_box=box,
                         dtype=dtype)
        contracting.append(b10)
        for i in range(cfg.n_stage1_bottlenecks):
            contracting.append(
                Bottleneck(f"s1.{i + 1}", rng, "regular", C1, C1, cfg,
                           rng_box=box, dtype=dtype))
        b20 = Bottleneck("s2.0", rng, "downsample", C1, C2, cfg, rng_box=box,
                         dtype=dtype)
        contracting.append(b20)
        schedule = [("regular", 1), ("dilated", 2), ("asymmetric", 1),
                    ("dilated", 4), ("asymmetric", 1), ("dilated", 8)]
        for r in range(cfg.n_stage2_repeats):
            for i, (kind, d) in enumerate(schedule):
                contracting.append(
                    Bottleneck(f"s2.r{r}.{i}", rng, kind, C2, C2, cfg,
                               dilation=d, rng_box=box, dtype=dtype))

        expanding: list = [
            Bottleneck("s4.0", rng, "upsample", C2, C1, cfg,
                       paired_pool=b20.skip_pool, rng_box=box, dtype=dtype),
            Bottleneck("s4.1", rng, "regular", C1, C1, cfg, rng_box=box,
                       dtype=dtype),
            Bottleneck("s5.0", rng, "upsample", C1, F, cfg,
                       paired_pool=b10.skip_pool, rng_box=box, dtype=dtype),
            Bottleneck("s5.1", rng, "regular", F, F, cfg, rng_box=box,
                       dtype=dtype),
            ConvTranspose3d("final", rng, F, cfg.out_channels, bias=True,
                            dtype=dtype),
        ]
        self.contracting = contracting
        self.expanding = expanding
        self.blocks = contracting + expanding

    def forward(self, x, train=False):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 5 or x.shape[1] != 1:
            raise ValueError(f"input must be (B, 1, E, E, E), got {x.shape}")
        ex, ey, ez = x.shape[2:]
        if not (ex == ey == ez) or ex % 8 != 0 or ex < 16:
            raise ValueError(
                f"spatial extent must be cubic, divisible by 8 and >= 16, got {x.shape[2:]}")
        for block in self.blocks:
            x = block.forward(x, train)
        return x

    def backward(self, g):
        for block in reversed(self.blocks):
            g = block.backward(g)
        return g

    def params(self):
        return [p for block in self.blocks for p in block.params()]

    def named_params(self):
        return [(p.name, p) for p in self.params()]

    def zero_grads(self):
        for p in self.params():
            p.zero_grad()

    def param_count(self) -> int:
        return sum(p.value.size for p in self.params())

    def path_param_counts(self) -> tuple[int, int]:
        contract = sum(p.value.size for b in self.contracting for p in b.params())
        expand = sum(p.value.size for b in self.expanding for p in b.params())
        return contract, expand

    def describe(self) -> str:
        lines = []
        for b in self.blocks:
            if hasattr(b, "describe"):
                lines.append(b.describe())
            else:
                lines.append(f"final deconv -> {self.cfg.out_channels}ch")
        lines.append(f"pool={self.cfg.pool_kind} dropout={self.cfg.dropout} "
                     f"lr={self.cfg.lr}")
        return "\n".join(lines)

    def save(self, path):
        save_checkpoint(path, self.cfg.to_json(), self.named_params())

    @staticmethod
    def load(path, dtype=np.float32) -> "ENet3d":
        cfg_json, loaded = load_checkpoint(path)
        net = build_net(NetConfig.from_json(cfg_json), seed=0, dtype=dtype)
        for p in net.params():
            if p.name not in loaded:
                raise ValueError(f"checkpoint missing tensor {p.name}")
            q = loaded[p.name]
            if q.value.shape != p.value.shape:
                raise ValueError(
                    f"checkpoint tensor {p.name} has shape {q.value.shape}, "
                    f"net expects {p.value.shape}")
            p.value = q.value.astype(dtype)
            p.m = q.m.astype(dtype)
            p.v = q.v.astype(dtype)
            p.t = q.t
        return net


def build_net(cfg: NetConfig, seed: int = 0, dtype=np.float32) -> ENet3d:
    """Construct the network; raises ConfigError naming any bad field."""
    return ENet3d(cfg, seed, dtype)
