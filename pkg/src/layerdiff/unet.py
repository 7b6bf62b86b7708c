"""Layered multi-resolution U-Net.

Each resolution level gets its own input convolution and residual blocks.
Levels above the lowest are never downsampled into the trunk: their
activations are retained only as skip tensors, concatenated back after the
trunk is upsampled to their resolution (isolated downsampling). The lowest
level runs a conventional down/mid/up U-Net. Every level has an output
convolution; at inference only the highest-resolution output is consumed.

Parameter names count levels from the lowest resolution ("level0." is the
base) so that stacking a taller model on a trained shorter one preserves
names. Pyramid data (latents, outputs) is ordered highest resolution first,
matching the noise and image pyramids.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .crops import CropPlan
from .data import VOCAB
from .params import ParamStore
from .tensor import Tensor, ShapeError

__all__ = [
    "ModelConfig",
    "LayeredModel",
    "FlopsReport",
    "build_model",
    "stack_init",
    "count_flops",
    "single_resolution_config",
]


@dataclass(frozen=True)
class ModelConfig:
    resolutions: tuple  # highest resolution first, halving
    hidden_dims: tuple  # same order as resolutions
    inner_dims: tuple = (64, 64)  # trunk stages below the base resolution
    blocks_per_level: int = 2
    attention: bool = True  # self-attention at the inner bottleneck
    channels: int = 3
    embed_dim: int = 64
    vocab_size: int = len(VOCAB)
    groups: int = 8
    precision: str = "f32"

    def __post_init__(self):
        object.__setattr__(self, "resolutions", tuple(int(r) for r in self.resolutions))
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))
        object.__setattr__(self, "inner_dims", tuple(int(d) for d in self.inner_dims))
        if not self.resolutions:
            raise ValueError("need at least one resolution level")
        if len(self.resolutions) != len(self.hidden_dims):
            raise ValueError("resolutions and hidden_dims length mismatch")
        for a, b in zip(self.resolutions, self.resolutions[1:]):
            if a != 2 * b:
                raise ValueError(f"resolutions must halve: {self.resolutions}")
        if self.base_res % (2 ** len(self.inner_dims)):
            raise ValueError(
                f"base resolution {self.base_res} too small for "
                f"{len(self.inner_dims)} inner stages"
            )
        for d in self.hidden_dims + self.inner_dims:
            if d <= 0 or d % self.groups:
                raise ValueError(
                    f"channel dim {d} must be a positive multiple of groups={self.groups}"
                )
        if self.embed_dim % 2:
            raise ValueError("embed_dim must be even")
        if self.precision not in ("f32", "f64"):
            raise ValueError(f"precision must be f32 or f64, got {self.precision}")

    @property
    def num_levels(self) -> int:
        return len(self.resolutions)

    @property
    def base_res(self) -> int:
        return self.resolutions[-1]

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    def hidden_at_depth(self, depth: int) -> int:
        """Hidden dim for the level `depth` steps above the base."""
        return self.hidden_dims[self.num_levels - 1 - depth]

    def to_dict(self) -> dict:
        return {
            "resolutions": list(self.resolutions),
            "hidden_dims": list(self.hidden_dims),
            "inner_dims": list(self.inner_dims),
            "blocks_per_level": self.blocks_per_level,
            "attention": self.attention,
            "channels": self.channels,
            "embed_dim": self.embed_dim,
            "vocab_size": self.vocab_size,
            "groups": self.groups,
            "precision": self.precision,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        allowed = set(cls.__dataclass_fields__)
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("resolutions", "hidden_dims", "inner_dims"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def single_resolution_config(cfg: ModelConfig) -> ModelConfig:
    """Conventional U-Net at the same target resolution and hidden dims.

    The layered model's lower levels become ordinary strided trunk stages,
    so the two models see identical resolutions and channel widths; the
    only structural difference is how high-resolution information reaches
    the trunk.
    """
    return replace(
        cfg,
        resolutions=(cfg.resolutions[0],),
        hidden_dims=(cfg.hidden_dims[0],),
        inner_dims=tuple(cfg.hidden_dims[1:]) + cfg.inner_dims,
    )


# ---------------------------------------------------------------------------
# parameter construction
# ---------------------------------------------------------------------------


class _Init:
    def __init__(self, store: ParamStore, seed: int):
        self.store = store
        self.rng = np.random.Generator(np.random.PCG64(seed))

    def conv(self, name: str, c_out: int, c_in: int, k: int, zero: bool = False):
        if zero:
            w = np.zeros((c_out, c_in, k, k))
        else:
            std = 1.0 / math.sqrt(c_in * k * k)
            w = self.rng.normal(0.0, std, size=(c_out, c_in, k, k))
        self.store.add(f"{name}.weight", w)
        self.store.add(f"{name}.bias", np.zeros(c_out))

    def linear(self, name: str, c_out: int, c_in: int):
        std = 1.0 / math.sqrt(c_in)
        self.store.add(f"{name}.weight", self.rng.normal(0.0, std, (c_in, c_out)))
        self.store.add(f"{name}.bias", np.zeros(c_out))

    def norm(self, name: str, c: int):
        self.store.add(f"{name}.gamma", np.ones(c))
        self.store.add(f"{name}.beta", np.zeros(c))

    def resblock(self, name: str, c_in: int, c_out: int, embed_dim: int):
        self.norm(f"{name}.norm1", c_in)
        self.conv(f"{name}.conv1", c_out, c_in, 3)
        self.linear(f"{name}.emb", c_out, embed_dim)
        self.norm(f"{name}.norm2", c_out)
        self.conv(f"{name}.conv2", c_out, c_out, 3)
        if c_in != c_out:
            self.conv(f"{name}.skip", c_out, c_in, 1)

    def attention(self, name: str, c: int):
        self.norm(f"{name}.norm", c)
        # q/k/v carry no bias: a key bias shifts every softmax row by a
        # constant and would be a permanently gradient-free parameter
        for proj in ("q", "k", "v"):
            std = 1.0 / math.sqrt(c)
            self.store.add(f"{name}.{proj}.weight",
                           self.rng.normal(0.0, std, (c, c, 1, 1)))
        self.conv(f"{name}.proj", c, c, 1)


def _build_params(cfg: ModelConfig, seed: int) -> ParamStore:
    store = ParamStore(dtype=cfg.dtype)
    init = _Init(store, seed)
    e = cfg.embed_dim

    init.linear("base.time_mlp.fc1", e, e)
    init.linear("base.time_mlp.fc2", e, e)
    store.add("base.cond.table",
              init.rng.normal(0.0, 1.0 / math.sqrt(e), (cfg.vocab_size, e)))
    init.linear("base.cond.fc", e, e)

    k = cfg.num_levels - 1
    for depth in range(cfg.num_levels):
        hd = cfg.hidden_at_depth(depth)
        lv = f"level{depth}"
        init.conv(f"{lv}.in_conv", hd, cfg.channels, 3)
        for b in range(cfg.blocks_per_level):
            init.resblock(f"{lv}.enc.block{b}", hd, hd, e)
        if depth > 0:
            lower = cfg.hidden_at_depth(depth - 1)
            init.conv(f"{lv}.upsample", hd, lower, 3)
            for b in range(cfg.blocks_per_level):
                c_in = 2 * hd if b == 0 else hd
                init.resblock(f"{lv}.up.block{b}", c_in, hd, e)
        init.conv(f"{lv}.out_conv", cfg.channels, hd, 3, zero=True)

    # inner down/mid/up path of the base level
    prev = cfg.hidden_at_depth(0)
    dims = list(cfg.inner_dims)
    for d, dim in enumerate(dims):
        init.conv(f"level0.inner.down{d}", dim, prev, 3)  # stride 2
        for b in range(cfg.blocks_per_level):
            init.resblock(f"level0.inner.down{d}.block{b}", dim, dim, e)
        prev = dim
    init.resblock("level0.inner.mid.block0", prev, prev, e)
    if cfg.attention:
        init.attention("level0.inner.mid.attn", prev)
    init.resblock("level0.inner.mid.block1", prev, prev, e)
    for d in range(len(dims) - 1, -1, -1):
        out_dim = cfg.hidden_at_depth(0) if d == 0 else dims[d - 1]
        init.conv(f"level0.inner.up{d}", out_dim, dims[d], 3)  # after nearest x2
        for b in range(cfg.blocks_per_level):
            c_in = 2 * out_dim if b == 0 else out_dim
            init.resblock(f"level0.inner.up{d}.block{b}", c_in, out_dim, e)
    return store


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------


def _group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int,
                eps: float = 1e-5) -> Tensor:
    n, c, h, w = x.shape
    xg = x.reshape((n, groups, (c // groups) * h * w))
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    xn = xc * (var + eps) ** -0.5
    xn = xn.reshape((n, c, h, w))
    return xn * gamma.reshape((1, c, 1, 1)) + beta.reshape((1, c, 1, 1))


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.matmul(x, w) + b


class _Net:
    """Forward-pass helper bound to one parameter store."""

    def __init__(self, model: "LayeredModel"):
        self.p = model.params
        self.cfg = model.config

    def conv(self, name: str, x: Tensor, stride: int = 1, padding: int = 1) -> Tensor:
        return T.conv2d(x, self.p[f"{name}.weight"], self.p[f"{name}.bias"],
                        stride=stride, padding=padding)

    def resblock(self, name: str, x: Tensor, emb: Tensor) -> Tensor:
        g = self.cfg.groups
        h = _group_norm(x, self.p[f"{name}.norm1.gamma"],
                        self.p[f"{name}.norm1.beta"], g).silu()
        h = self.conv(f"{name}.conv1", h)
        proj = _linear(emb.silu(), self.p[f"{name}.emb.weight"],
                       self.p[f"{name}.emb.bias"])
        nb, ce = proj.shape
        h = h + proj.reshape((nb, ce, 1, 1))
        h = _group_norm(h, self.p[f"{name}.norm2.gamma"],
                        self.p[f"{name}.norm2.beta"], g).silu()
        h = self.conv(f"{name}.conv2", h)
        if f"{name}.skip.weight" in self.p:
            x = T.conv2d(x, self.p[f"{name}.skip.weight"],
                         self.p[f"{name}.skip.bias"], padding=0)
        return x + h

    def blocks(self, prefix: str, x: Tensor, emb: Tensor) -> Tensor:
        for b in range(self.cfg.blocks_per_level):
            x = self.resblock(f"{prefix}.block{b}", x, emb)
        return x

    def attention(self, name: str, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        hn = _group_norm(x, self.p[f"{name}.norm.gamma"],
                         self.p[f"{name}.norm.beta"], self.cfg.groups)
        q = T.conv2d(hn, self.p[f"{name}.q.weight"], None).reshape((n, c, h * w))
        k = T.conv2d(hn, self.p[f"{name}.k.weight"], None).reshape((n, c, h * w))
        v = T.conv2d(hn, self.p[f"{name}.v.weight"], None).reshape((n, c, h * w))
        scores = T.matmul(q.transpose((0, 2, 1)), k) * (c ** -0.5)
        attn = T.softmax(scores, axis=2)  # (n, hw_query, hw_key)
        out = T.matmul(v, attn.transpose((0, 2, 1))).reshape((n, c, h, w))
        return x + self.conv(f"{name}.proj", out, padding=0)

    def embedding(self, t, tokens) -> Tensor:
        cfg = self.cfg
        t = np.atleast_1d(np.asarray(t, dtype=cfg.dtype))
        half = cfg.embed_dim // 2
        freqs = np.exp(
            -math.log(10000.0) * np.arange(half, dtype=cfg.dtype) / max(half - 1, 1)
        )
        arg = t[:, None] * 1000.0 * freqs[None, :]
        sin_cos = np.concatenate([np.sin(arg), np.cos(arg)], axis=1).astype(cfg.dtype)
        temb = Tensor(sin_cos)
        temb = _linear(temb, self.p["base.time_mlp.fc1.weight"],
                       self.p["base.time_mlp.fc1.bias"]).silu()
        temb = _linear(temb, self.p["base.time_mlp.fc2.weight"],
                       self.p["base.time_mlp.fc2.bias"])

        tokens = np.asarray(tokens, dtype=np.int64)
        tok = T.gather_rows(self.p["base.cond.table"], tokens)  # (n, L, e)
        mask = (tokens != 0).astype(cfg.dtype)[:, :, None]
        cemb = (tok * Tensor(mask)).sum(axis=1)
        cemb = _linear(cemb, self.p["base.cond.fc.weight"],
                       self.p["base.cond.fc.bias"])
        return temb + cemb


@dataclass
class LayeredModel:
    config: ModelConfig
    params: ParamStore

    def forward(self, latents: Sequence, t, tokens,
                crop_plan: Optional[CropPlan] = None,
                probe: Optional[dict] = None) -> List[Tensor]:
        """Per-level clean-image predictions, highest resolution first.

        latents are [N,C,H,W] arrays or Tensors ordered like the noise
        pyramid. With a crop plan, levels above the base arrive cropped to
        the plan's image rectangles while the base level stays full; the
        base trunk is cropped to the plan's base rectangle just before the
        first upsampling convolution.
        """
        cfg = self.config
        if len(latents) != cfg.num_levels:
            raise ShapeError(
                f"expected {cfg.num_levels} latents, got {len(latents)}"
            )
        plan = None if (crop_plan is None or crop_plan.is_full) else crop_plan
        lat: List[Tensor] = []
        rects = plan.image_rects if plan else None
        for i, z in enumerate(latents):
            z = z if isinstance(z, Tensor) else Tensor(
                np.asarray(z, dtype=cfg.dtype))
            res = cfg.resolutions[i]
            if plan and i < cfg.num_levels - 1:
                res = rects[i][2]
            if z.shape[-2:] != (res, res) or z.shape[-3] != cfg.channels:
                raise ShapeError(
                    f"latent {i} has shape {z.shape}, expected "
                    f"[N,{cfg.channels},{res},{res}]"
                )
            lat.append(z)

        net = _Net(self)
        emb = net.embedding(t, tokens)
        k = cfg.num_levels - 1

        # per-level encoders; levels above the base are retained as skips only
        skips: Dict[int, Tensor] = {}
        for i, z in enumerate(lat):
            depth = k - i
            h = net.conv(f"level{depth}.in_conv", z)
            h = net.blocks(f"level{depth}.enc", h, emb)
            skips[depth] = h

        # conventional U-Net at the base resolution
        trunk = skips[0]
        inner_skips = []
        for d in range(len(cfg.inner_dims)):
            inner_skips.append(trunk)
            trunk = net.conv(f"level0.inner.down{d}", trunk, stride=2)
            trunk = net.blocks(f"level0.inner.down{d}", trunk, emb)
        if probe is not None:
            probe["inner.bottom"] = trunk.data.copy()
        trunk = net.resblock("level0.inner.mid.block0", trunk, emb)
        if cfg.attention:
            trunk = net.attention("level0.inner.mid.attn", trunk)
        trunk = net.resblock("level0.inner.mid.block1", trunk, emb)
        for d in range(len(cfg.inner_dims) - 1, -1, -1):
            trunk = net.conv(f"level0.inner.up{d}", T.nearest_upsample(trunk, 2))
            trunk = T.concat([trunk, inner_skips[d]], axis=1)
            trunk = net.blocks(f"level0.inner.up{d}", trunk, emb)

        outputs: Dict[int, Tensor] = {}
        outputs[0] = net.conv("level0.out_conv", trunk)
        if probe is not None:
            probe["trunk.pre_upsample.depth0"] = trunk.data.copy()

        for depth in range(1, cfg.num_levels):
            if depth == 1 and plan is not None:
                trunk = _crop_tensor(trunk, plan.feature_rect)
            trunk = net.conv(f"level{depth}.upsample",
                             T.nearest_upsample(trunk, 2))
            trunk = T.concat([trunk, skips[depth]], axis=1)
            trunk = net.blocks(f"level{depth}.up", trunk, emb)
            if probe is not None:
                probe[f"trunk.pre_upsample.depth{depth}"] = trunk.data.copy()
            outputs[depth] = net.conv(f"level{depth}.out_conv", trunk)

        return [outputs[k - i] for i in range(cfg.num_levels)]


def _crop_tensor(x: Tensor, rect) -> Tensor:
    cx, cy, w, h = rect
    if cy + h > x.shape[-2] or cx + w > x.shape[-1]:
        raise ShapeError(f"feature rect {rect} outside trunk {x.shape}")
    return x[:, :, cy : cy + h, cx : cx + w]


def build_model(config: ModelConfig, seed: int) -> LayeredModel:
    return LayeredModel(config=config, params=_build_params(config, seed))


def stack_init(tall_config: ModelConfig, checkpoint: Dict[str, np.ndarray],
               seed: int) -> tuple[LayeredModel, Dict[str, list]]:
    """Initialize a taller model from a shorter one's parameter snapshot.

    Shared names are copied bit-exactly; everything else is freshly seeded.
    Returns the model and a manifest partitioning names into copied/fresh.
    """
    model = build_model(tall_config, seed)
    copied, fresh = [], []
    for name, p in model.params.items():
        if name in checkpoint:
            src = checkpoint[name]
            if src.shape != p.data.shape:
                raise ShapeError(
                    f"stack_init shape mismatch for {name}: "
                    f"checkpoint {src.shape} vs model {p.data.shape}"
                )
            p.data = src.astype(model.params.dtype).copy()
            copied.append(name)
        else:
            fresh.append(name)
    return model, {"copied": copied, "fresh": fresh}


# ---------------------------------------------------------------------------
# analytic FLOPs model
# ---------------------------------------------------------------------------


@dataclass
class FlopsReport:
    entries: List[tuple]  # (name, flops)
    per_level: Dict[str, int] = field(default_factory=dict)
    total: int = 0

    def __post_init__(self):
        per_level: Dict[str, int] = {}
        for name, flops in self.entries:
            level = name.split(".")[0]
            per_level[level] = per_level.get(level, 0) + flops
        self.per_level = per_level
        self.total = sum(f for _, f in self.entries)


class _Counter:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.entries: List[tuple] = []

    def conv(self, name, res_out, c_in, c_out, k):
        self.entries.append((name, 2 * res_out * res_out * c_in * c_out * k * k))

    def linear(self, name, c_in, c_out):
        self.entries.append((name, 2 * c_in * c_out))

    def resblock(self, name, res, c_in, c_out):
        self.conv(f"{name}.conv1", res, c_in, c_out, 3)
        self.linear(f"{name}.emb", self.cfg.embed_dim, c_out)
        self.conv(f"{name}.conv2", res, c_out, c_out, 3)
        if c_in != c_out:
            self.conv(f"{name}.skip", res, c_in, c_out, 1)

    def blocks(self, prefix, res, c_in, c_out):
        for b in range(self.cfg.blocks_per_level):
            self.resblock(f"{prefix}.block{b}", res, c_in if b == 0 else c_out, c_out)

    def attention(self, name, res, c):
        hw = res * res
        for proj in ("q", "k", "v", "proj"):
            self.conv(f"{name}.{proj}", res, c, c, 1)
        # scores and value aggregation, 2 FLOPs per multiply-add
        self.entries.append((f"{name}.scores", 2 * hw * hw * c))
        self.entries.append((f"{name}.values", 2 * hw * hw * c))


def count_flops(cfg: ModelConfig) -> FlopsReport:
    """Per-image multiply-add count x2, mirroring build_model's wiring."""
    ctr = _Counter(cfg)
    e = cfg.embed_dim
    ctr.linear("base.time_mlp.fc1", e, e)
    ctr.linear("base.time_mlp.fc2", e, e)
    ctr.linear("base.cond.fc", e, e)

    k = cfg.num_levels - 1
    for depth in range(cfg.num_levels):
        hd = cfg.hidden_at_depth(depth)
        res = cfg.resolutions[k - depth]
        lv = f"level{depth}"
        ctr.conv(f"{lv}.in_conv", res, cfg.channels, hd, 3)
        ctr.blocks(f"{lv}.enc", res, hd, hd)
        if depth > 0:
            lower = cfg.hidden_at_depth(depth - 1)
            ctr.conv(f"{lv}.upsample", res, lower, hd, 3)
            ctr.blocks(f"{lv}.up", res, 2 * hd, hd)
        ctr.conv(f"{lv}.out_conv", res, hd, cfg.channels, 3)

    prev = cfg.hidden_at_depth(0)
    res = cfg.base_res
    dims = list(cfg.inner_dims)
    for d, dim in enumerate(dims):
        res //= 2
        ctr.conv(f"level0.inner.down{d}", res, prev, dim, 3)
        ctr.blocks(f"level0.inner.down{d}", res, dim, dim)
        prev = dim
    ctr.resblock("level0.inner.mid.block0", res, prev, prev)
    if cfg.attention:
        ctr.attention("level0.inner.mid.attn", res, prev)
    ctr.resblock("level0.inner.mid.block1", res, prev, prev)
    for d in range(len(dims) - 1, -1, -1):
        out_dim = cfg.hidden_at_depth(0) if d == 0 else dims[d - 1]
        res *= 2
        ctr.conv(f"level0.inner.up{d}", res, dims[d], out_dim, 3)
        ctr.blocks(f"level0.inner.up{d}", res, 2 * out_dim, out_dim)
    return FlopsReport(entries=ctr.entries)
