"""Block / layer / unit UNet with every unit's residual branch addressable.

A layer is one ResUnit optionally followed by one AttnUnit.  Down blocks
push every layer output (plus the downsampled output) onto a skip stack;
up blocks pop one entry per layer, so an up block needs one layer more than
its mirrored down block.
"""

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import condconv as _cc
from . import kernels as K
from .kernels import Tensor

RES = "RES"
ATTN = "ATTN"
UNIT_KINDS = (RES, ATTN)

SHALLOW_BLOCKS = ("dn0", "dn1", "up2", "up3")
DEEP_BLOCKS = ("dn2", "dn3", "mid", "up0", "up1")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class SiteId:
    block: str
    layer: int
    unit: str

    def __str__(self):
        return f"{self.block}.L{self.layer}.{self.unit}"

    @classmethod
    def parse(cls, text):
        try:
            block, layer, unit = text.split(".")
            if not layer.startswith("L") or unit not in UNIT_KINDS:
                raise ValueError
            return cls(block, int(layer[1:]), unit)
        except ValueError:
            raise ValueError(f"malformed site id {text!r}, expected e.g. 'dn0.L1.RES'") from None


@dataclass(frozen=True)
class BlockSpec:
    name: str
    layers: int
    with_attention: bool
    resolution_change: str = "none"

    def __post_init__(self):
        if not 1 <= self.layers <= 4:
            raise ConfigError(f"block {self.name}: layers must be in 1..4, got {self.layers}")
        if self.resolution_change not in ("down", "up", "none"):
            raise ConfigError(f"block {self.name}: bad resolution_change {self.resolution_change!r}")


@dataclass(frozen=True)
class UNetConfig:
    down_blocks: tuple
    up_blocks: tuple
    has_middle: bool = True
    middle_spec: BlockSpec = BlockSpec("mid", 2, True, "none")
    base_channels: tuple = (32, 64, 128, 128)
    latent_channels: int = 4
    sample_size: int = 16
    cond_dim: int = 64
    cond_tokens: int = 4
    num_classes: int = 8
    time_embed_dim: int = 128
    attn_heads: int = 4
    norm_groups: int = 8
    condconv_experts: int = 0

    def __post_init__(self):
        object.__setattr__(self, "down_blocks", tuple(self.down_blocks))
        object.__setattr__(self, "up_blocks", tuple(self.up_blocks))
        object.__setattr__(self, "base_channels", tuple(int(c) for c in self.base_channels))

    def blocks(self):
        mid = (self.middle_spec,) if self.has_middle else ()
        return self.down_blocks + mid + self.up_blocks

    def block_names(self):
        return [b.name for b in self.blocks()]

    def block(self, name):
        for b in self.blocks():
            if b.name == name:
                return b
        raise KeyError(name)

    def block_channels(self, name):
        depth = len(self.base_channels)
        if name == "mid":
            return self.block_channels(self.down_blocks[-1].name)
        idx = int(name[2:])
        if name.startswith("dn"):
            return self.base_channels[idx]
        return self.base_channels[depth - 1 - idx]

    def to_dict(self):
        def spec(b):
            return {"name": b.name, "layers": b.layers, "with_attention": b.with_attention,
                    "resolution_change": b.resolution_change}
        return {
            "down_blocks": [spec(b) for b in self.down_blocks],
            "up_blocks": [spec(b) for b in self.up_blocks],
            "has_middle": self.has_middle,
            "middle_spec": spec(self.middle_spec),
            "base_channels": list(self.base_channels),
            "latent_channels": self.latent_channels,
            "sample_size": self.sample_size,
            "cond_dim": self.cond_dim,
            "cond_tokens": self.cond_tokens,
            "num_classes": self.num_classes,
            "time_embed_dim": self.time_embed_dim,
            "attn_heads": self.attn_heads,
            "norm_groups": self.norm_groups,
            "condconv_experts": self.condconv_experts,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("down_blocks", "up_blocks"):
            d[key] = tuple(BlockSpec(**b) for b in d[key])
        if "middle_spec" in d:
            d["middle_spec"] = BlockSpec(**d["middle_spec"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown UNet config keys: {sorted(unknown)}")
        return cls(**d)


def standard_config(**overrides):
    """The 4-down / middle / 4-up layout; the deepest blocks carry no attention."""
    down = tuple(BlockSpec(f"dn{i}", 2, i < 3, "down" if i < 3 else "none") for i in range(4))
    up = tuple(BlockSpec(f"up{i}", 3, i > 0, "up" if i < 3 else "none") for i in range(4))
    return UNetConfig(down_blocks=down, up_blocks=up, **overrides)


# -- structural layout ---------------------------------------------------------


@dataclass(frozen=True)
class LayerPlan:
    index: int
    in_ch: int
    out_ch: int
    skip_ch: int
    attention: bool


@dataclass(frozen=True)
class BlockPlan:
    name: str
    kind: str
    channels: int
    size: int
    layers: tuple
    resample: str

    @property
    def out_size(self):
        if self.resample == "down":
            return self.size // 2
        if self.resample == "up":
            return self.size * 2
        return self.size


def layout(config):
    """Resolve a config into per-block channel/resolution plans.

    Raises ConfigError when the skip stack does not pair up by resolution.
    """
    if not config.down_blocks or not config.up_blocks:
        raise ConfigError("need at least one down and one up block")
    for spec in config.blocks():
        if spec.name != "mid" and (spec.name[:2] not in ("dn", "up") or not spec.name[2:].isdigit()):
            raise ConfigError(f"block names must be dnK/upK/mid, got {spec.name!r}")
        if spec.name != "mid" and int(spec.name[2:]) >= len(config.base_channels):
            raise ConfigError(f"block {spec.name} has no entry in base_channels")
    names = config.block_names()
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate block names: {names}")
    if config.cond_dim < 1 or config.cond_tokens < 1 or config.num_classes < 1:
        raise ConfigError("cond_dim, cond_tokens and num_classes must be positive")

    plans = []
    size = config.sample_size
    ch = config.base_channels[0]
    stack = [(ch, size)]
    for spec in config.down_blocks:
        if spec.resolution_change == "up":
            raise ConfigError(f"down block {spec.name} cannot upsample")
        out = config.block_channels(spec.name)
        layers = []
        for j in range(spec.layers):
            layers.append(LayerPlan(j, ch if j == 0 else out, out, 0, spec.with_attention))
            stack.append((out, size))
        plans.append(BlockPlan(spec.name, "down", out, size, tuple(layers), spec.resolution_change))
        if spec.resolution_change == "down":
            if size % 2:
                raise ConfigError(f"cannot downsample odd resolution {size} in {spec.name}")
            size //= 2
            stack.append((out, size))
        ch = out
    if config.has_middle:
        spec = config.middle_spec
        layers = tuple(LayerPlan(j, ch, ch, 0, spec.with_attention and j < spec.layers - 1)
                       for j in range(spec.layers))
        plans.append(BlockPlan("mid", "mid", ch, size, layers, "none"))
    for spec in config.up_blocks:
        if spec.resolution_change == "down":
            raise ConfigError(f"up block {spec.name} cannot downsample")
        out = config.block_channels(spec.name)
        layers = []
        for j in range(spec.layers):
            if not stack:
                raise ConfigError(f"{spec.name} layer {j} has no skip connection left to consume")
            skip_ch, skip_size = stack.pop()
            if skip_size != size:
                raise ConfigError(
                    f"{spec.name} layer {j}: skip resolution {skip_size} != block resolution {size}")
            layers.append(LayerPlan(j, (ch if j == 0 else out) + skip_ch, out, skip_ch, spec.with_attention))
        plans.append(BlockPlan(spec.name, "up", out, size, tuple(layers), spec.resolution_change))
        if spec.resolution_change == "up":
            size *= 2
        ch = out
    if stack:
        raise ConfigError(f"{len(stack)} skip connections left unconsumed")
    if size != config.sample_size:
        raise ConfigError(f"output resolution {size} != sample_size {config.sample_size}")
    for plan in plans:
        for lp in plan.layers:
            for c in (lp.in_ch, lp.out_ch):
                if c % config.norm_groups:
                    raise ConfigError(f"{plan.name}: {c} channels not divisible by norm_groups")
        if plan.channels % config.attn_heads:
            raise ConfigError(f"{plan.name}: {plan.channels} channels not divisible by attn_heads")
    if config.time_embed_dim < 2 or config.time_embed_dim % 2:
        raise ConfigError("time_embed_dim sets the sinusoid width and must be even")
    return tuple(plans)


def unit_sites(config):
    """All unit addresses in forward order."""
    sites = []
    for plan in layout(config):
        for lp in plan.layers:
            sites.append(SiteId(plan.name, lp.index, RES))
            if lp.attention:
                sites.append(SiteId(plan.name, lp.index, ATTN))
    return sites


def unit_census(config):
    census = {}
    for s in unit_sites(config):
        census.setdefault(s.block, {RES: 0, ATTN: 0})[s.unit] += 1
    return census


def _res_shapes(prefix, in_ch, out_ch, temb, experts):
    shapes = {f"{prefix}.norm1.g": (in_ch,), f"{prefix}.norm1.b": (in_ch,)}
    shapes.update(_conv3_shapes(f"{prefix}.conv1", out_ch, in_ch, experts))
    shapes[f"{prefix}.temb.w"] = (temb, out_ch)
    shapes[f"{prefix}.temb.b"] = (out_ch,)
    shapes[f"{prefix}.norm2.g"] = (out_ch,)
    shapes[f"{prefix}.norm2.b"] = (out_ch,)
    shapes.update(_conv3_shapes(f"{prefix}.conv2", out_ch, out_ch, experts))
    if in_ch != out_ch:
        shapes[f"{prefix}.skip.w"] = (out_ch, in_ch, 1, 1)
        shapes[f"{prefix}.skip.b"] = (out_ch,)
    return shapes


def _conv3_shapes(prefix, out_ch, in_ch, experts):
    if experts:
        return {
            f"{prefix}.experts.w": (experts, out_ch, in_ch, 3, 3),
            f"{prefix}.experts.b": (experts, out_ch),
            f"{prefix}.router.w": (in_ch, experts),
            f"{prefix}.router.b": (experts,),
        }
    return {f"{prefix}.w": (out_ch, in_ch, 3, 3), f"{prefix}.b": (out_ch,)}


def _attn_shapes(prefix, c, cond_dim):
    shapes = {
        f"{prefix}.norm.g": (c,), f"{prefix}.norm.b": (c,),
        f"{prefix}.proj_in.w": (c, c, 1, 1), f"{prefix}.proj_in.b": (c,),
    }
    for ln in ("ln1", "ln2", "ln3"):
        shapes[f"{prefix}.{ln}.g"] = (c,)
        shapes[f"{prefix}.{ln}.b"] = (c,)
    for w in ("q", "k", "v"):
        shapes[f"{prefix}.sa.{w}.w"] = (c, c)
    shapes[f"{prefix}.sa.o.w"] = (c, c)
    shapes[f"{prefix}.sa.o.b"] = (c,)
    shapes[f"{prefix}.ca.q.w"] = (c, c)
    shapes[f"{prefix}.ca.k.w"] = (cond_dim, c)
    shapes[f"{prefix}.ca.v.w"] = (cond_dim, c)
    shapes[f"{prefix}.ca.o.w"] = (c, c)
    shapes[f"{prefix}.ca.o.b"] = (c,)
    shapes[f"{prefix}.ff.w1"] = (c, 4 * c)
    shapes[f"{prefix}.ff.b1"] = (4 * c,)
    shapes[f"{prefix}.ff.w2"] = (4 * c, c)
    shapes[f"{prefix}.ff.b2"] = (c,)
    shapes[f"{prefix}.proj_out.w"] = (c, c, 1, 1)
    shapes[f"{prefix}.proj_out.b"] = (c,)
    return shapes


def param_shapes(config):
    """Ordered map of parameter name -> shape implied by the config."""
    plans = layout(config)
    c0 = config.base_channels[0]
    temb = config.time_embed_dim
    experts = config.condconv_experts
    shapes = {
        "time.lin1.w": (temb, temb), "time.lin1.b": (temb,),
        "time.lin2.w": (temb, temb), "time.lin2.b": (temb,),
        "cond.table": (config.num_classes + 1, config.cond_tokens, config.cond_dim),
        "conv_in.w": (c0, config.latent_channels, 3, 3), "conv_in.b": (c0,),
    }
    for plan in plans:
        for lp in plan.layers:
            key = f"{plan.name}.L{lp.index}"
            shapes.update(_res_shapes(f"{key}.res", lp.in_ch, lp.out_ch, temb, experts))
            if lp.attention:
                shapes.update(_attn_shapes(f"{key}.attn", lp.out_ch, config.cond_dim))
        if plan.resample in ("down", "up"):
            c = plan.channels
            shapes[f"{plan.name}.{plan.resample}.w"] = (c, c, 3, 3)
            shapes[f"{plan.name}.{plan.resample}.b"] = (c,)
    c_last = plans[-1].channels
    shapes["out.norm.g"] = (c_last,)
    shapes["out.norm.b"] = (c_last,)
    shapes["out.conv.w"] = (config.latent_channels, c_last, 3, 3)
    shapes["out.conv.b"] = (config.latent_channels,)
    return shapes


def block_of(name):
    """Block that owns a parameter name, or None for global params."""
    head = name.split(".", 1)[0]
    if head == "mid" or (head[:2] in ("dn", "up") and head[2:].isdigit()):
        return head
    return None


# -- the model -------------------------------------------------------------------


class ParamView(Mapping):
    """Read-only prefix view over a parameter map."""

    def __init__(self, params, prefix):
        self._params = params
        self._prefix = prefix + "."

    def __getitem__(self, key):
        return self._params[self._prefix + key]

    def __iter__(self):
        n = len(self._prefix)
        return (k[n:] for k in self._params if k.startswith(self._prefix))

    def __len__(self):
        return sum(1 for _ in self)

    def __contains__(self, key):
        return self._prefix + key in self._params


class UNet:
    def __init__(self, config, params, freeze_mask=()):
        self.config = config
        self.params = dict(params)
        self.freeze_mask = frozenset(freeze_mask)
        expected = param_shapes(config)
        missing = set(expected) - set(self.params)
        extra = set(self.params) - set(expected)
        if missing or extra:
            raise ConfigError(f"parameter names do not match config: missing={sorted(missing)[:5]} "
                              f"extra={sorted(extra)[:5]}")
        for name, shape in expected.items():
            if tuple(self.params[name].shape) != tuple(shape):
                raise ConfigError(f"{name}: shape {self.params[name].shape} != expected {shape}")
        if not self.freeze_mask <= set(self.params):
            raise ConfigError(f"freeze_mask names unknown params: {sorted(self.freeze_mask - set(self.params))[:5]}")
        self._plans = layout(config)

    def __getitem__(self, name):
        return self.params[name]

    def view(self, prefix):
        return ParamView(self.params, prefix)

    def num_params(self):
        return int(sum(p.data.size for p in self.params.values()))

    def block_params(self, block):
        return [n for n in self.params if block_of(n) == block]

    def trainable_names(self):
        return [n for n in self.params if n not in self.freeze_mask]

    def clone(self):
        return UNet(self.config, {n: Tensor(p.data.copy()) for n, p in self.params.items()}, self.freeze_mask)

    def astype(self, dtype):
        return UNet(self.config, {n: Tensor(p.data.astype(dtype)) for n, p in self.params.items()},
                    self.freeze_mask)

    def dtype_name(self):
        kinds = {p.data.dtype.name for p in self.params.values()}
        return kinds.pop() if len(kinds) == 1 else "mixed"

    @property
    def null_class(self):
        return self.config.num_classes

    def embed_condition(self, class_ids):
        """Token sequences [N, tokens, cond_dim]; class id ``num_classes`` is the null condition."""
        ids = np.atleast_1d(np.asarray(class_ids, dtype=np.int64))
        if ids.min() < 0 or ids.max() > self.config.num_classes:
            raise ValueError(f"class ids must lie in 0..{self.config.num_classes}")
        return K.gather_rows(self.params["cond.table"], ids)

    def __repr__(self):
        return f"UNet(blocks={self.config.block_names()}, params={self.num_params()})"


def build_unet(config, seed=0, zero_out=True):
    """Seeded initialization; the output conv starts at zero unless ``zero_out`` is False."""
    shapes = param_shapes(config)
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in shapes.items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "cond.table":
            arr = rng.standard_normal(shape)
        elif leaf == "g":
            arr = np.ones(shape)
        elif leaf in ("b", "b1", "b2") or name.endswith(".router.w"):
            arr = np.zeros(shape)
        elif name.endswith(".experts.w"):
            fan_in = int(np.prod(shape[2:]))
            arr = rng.standard_normal(shape) / math.sqrt(fan_in)
        elif len(shape) == 4:
            fan_in = int(np.prod(shape[1:]))
            arr = rng.standard_normal(shape) / math.sqrt(fan_in)
        else:
            arr = rng.standard_normal(shape) / math.sqrt(shape[0])
        if name.startswith("out.conv") and zero_out:
            arr = np.zeros(shape)
        params[name] = Tensor(arr.astype(np.float32))
    return UNet(config, params)


# -- unit forwards ---------------------------------------------------------------


def _conv3(p, key, x, stride=1):
    if f"{key}.experts.w" in p:
        bank = _cc.ExpertBank(p[f"{key}.experts.w"], p[f"{key}.experts.b"],
                              p[f"{key}.router.w"], p[f"{key}.router.b"])
        return _cc.me_cond_conv(x, bank, stride=stride, pad=1)
    return K.conv2d(x, p[f"{key}.w"], p[f"{key}.b"], stride=stride, pad=1)


def res_branch(p, x, temb_act, groups=8):
    """F(x, t): GN -> SiLU -> conv -> +time -> GN -> SiLU -> conv."""
    n = x.shape[0]
    h = _conv3(p, "conv1", K.silu(K.group_norm(x, groups, p["norm1.g"], p["norm1.b"])))
    t = K.linear(temb_act, p["temb.w"], p["temb.b"])
    h = K.add(h, K.reshape(t, (n, t.shape[1], 1, 1)))
    return _conv3(p, "conv2", K.silu(K.group_norm(h, groups, p["norm2.g"], p["norm2.b"])))


def res_shortcut(p, x):
    if "skip.w" in p:
        return K.conv2d(x, p["skip.w"], p["skip.b"])
    return x


def res_unit_forward(p, x, temb_act, groups=8):
    """Returns ``(residual, out)`` with ``out = residual + shortcut(x)``."""
    x = K.as_tensor(x)
    expected = p["norm1.g"].shape[0]
    if x.ndim != 4 or x.shape[1] != expected:
        raise K.ShapeError(f"ResUnit expects {expected} input channels, got shape {x.shape}")
    r = res_branch(p, x, temb_act, groups)
    return r, K.add(r, res_shortcut(p, x))


def attn_branch(p, x, cond, heads=4, groups=8):
    """Transformer sub-block between 1x1 projections: self-attn, cross-attn, feed-forward."""
    n, c, h, w = x.shape
    hid = K.conv2d(K.group_norm(x, groups, p["norm.g"], p["norm.b"]), p["proj_in.w"], p["proj_in.b"])
    tok = K.transpose(K.reshape(hid, (n, c, h * w)), (0, 2, 1))
    a = K.layer_norm(tok, p["ln1.g"], p["ln1.b"])
    sa = K.attention(K.linear(a, p["sa.q.w"]), K.linear(a, p["sa.k.w"]), K.linear(a, p["sa.v.w"]), heads)
    tok = K.add(tok, K.linear(sa, p["sa.o.w"], p["sa.o.b"]))
    a = K.layer_norm(tok, p["ln2.g"], p["ln2.b"])
    ca = K.attention(K.linear(a, p["ca.q.w"]), K.linear(cond, p["ca.k.w"]), K.linear(cond, p["ca.v.w"]), heads)
    tok = K.add(tok, K.linear(ca, p["ca.o.w"], p["ca.o.b"]))
    a = K.layer_norm(tok, p["ln3.g"], p["ln3.b"])
    tok = K.add(tok, K.linear(K.silu(K.linear(a, p["ff.w1"], p["ff.b1"])), p["ff.w2"], p["ff.b2"]))
    hid = K.reshape(K.transpose(tok, (0, 2, 1)), (n, c, h, w))
    return K.conv2d(hid, p["proj_out.w"], p["proj_out.b"])


def _check_cond(p, cond, n):
    cond = K.as_tensor(cond)
    dim = p["ca.k.w"].shape[0]
    if cond.ndim == 2:
        cond = Tensor(np.broadcast_to(cond.data, (n,) + cond.shape).copy())
    if cond.ndim != 3 or cond.shape[-1] != dim or cond.shape[0] != n:
        raise K.ShapeError(f"condition must be [tokens, {dim}] or [{n}, tokens, {dim}], got {cond.shape}")
    return cond


def attn_unit_forward(p, x, cond, heads=4, groups=8):
    """Returns ``(residual, out)`` with ``out = residual + x``."""
    x = K.as_tensor(x)
    cond = _check_cond(p, cond, x.shape[0])
    r = attn_branch(p, x, cond, heads, groups)
    return r, K.add(r, x)


# -- full forward ------------------------------------------------------------------


class Tap:
    """Interception hook offered every unit of a forward pass.

    ``residual`` decides the residual branch value (call ``compute()`` to run
    it); ``unit_output`` observes the summed result.  The base class is a no-op.
    """

    def residual(self, site, identity, compute):
        return compute()

    def unit_output(self, site, identity, residual, shortcut, out):
        pass


def timestep_embedding(t, dim):
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1).astype(np.float32)


def _time_mlp(unet, t, n, dtype):
    t = np.asarray(t)
    if t.ndim == 0:
        t = np.full(n, t)
    if t.shape != (n,):
        raise K.ShapeError(f"timestep must be a scalar or have shape ({n},), got {t.shape}")
    emb = Tensor(timestep_embedding(t, unet.config.time_embed_dim).astype(dtype))
    h = K.silu(K.linear(emb, unet["time.lin1.w"], unet["time.lin1.b"]))
    return K.linear(h, unet["time.lin2.w"], unet["time.lin2.b"])


def _run_unit(site, x, compute, shortcut, tap):
    if tap is None:
        r = compute()
        return K.add(r, shortcut())
    r = tap.residual(site, x, compute)
    r = K.as_tensor(r)
    s = shortcut()
    if r.shape != s.shape:
        raise K.ShapeError(f"{site}: substituted residual has shape {r.shape}, expected {s.shape}")
    out = K.add(r, s)
    tap.unit_output(site, x, r, s, out)
    return out


def forward(unet, x_t, t, cond, tap=None, block_outputs=None):
    """Predict epsilon for ``x_t`` at timestep ``t`` under condition tokens ``cond``.

    When ``block_outputs`` is a dict it receives each block's output tensor.
    """
    cfg = unet.config
    x = K.as_tensor(x_t)
    s = cfg.sample_size
    if x.ndim != 4 or x.shape[1:] != (cfg.latent_channels, s, s):
        raise K.ShapeError(f"x_t must be [N, {cfg.latent_channels}, {s}, {s}], got {x.shape}")
    n = x.shape[0]
    groups, heads = cfg.norm_groups, cfg.attn_heads
    temb_act = K.silu(_time_mlp(unet, t, n, x.dtype))
    cond_t = None

    h = K.conv2d(x, unet["conv_in.w"], unet["conv_in.b"], pad=1)
    stack = [h]
    for plan in unet._plans:
        for lp in plan.layers:
            key = f"{plan.name}.L{lp.index}"
            if plan.kind == "up":
                h = K.concat([h, stack.pop()], axis=1)
            p = unet.view(f"{key}.res")
            h = _run_unit(SiteId(plan.name, lp.index, RES), h,
                          lambda p=p, h=h: res_branch(p, h, temb_act, groups),
                          lambda p=p, h=h: res_shortcut(p, h), tap)
            if lp.attention:
                p = unet.view(f"{key}.attn")
                if cond_t is None:
                    cond_t = _check_cond(p, cond, n)
                h = _run_unit(SiteId(plan.name, lp.index, ATTN), h,
                              lambda p=p, h=h: attn_branch(p, h, cond_t, heads, groups),
                              lambda h=h: h, tap)
            if plan.kind == "down":
                stack.append(h)
        if plan.resample == "down":
            h = K.conv2d(h, unet[f"{plan.name}.down.w"], unet[f"{plan.name}.down.b"], stride=2, pad=1)
            stack.append(h)
        elif plan.resample == "up":
            h = K.upsample_nearest(h, 2)
            h = K.conv2d(h, unet[f"{plan.name}.up.w"], unet[f"{plan.name}.up.b"], pad=1)
        if block_outputs is not None:
            block_outputs[plan.name] = h
    h = K.silu(K.group_norm(h, groups, unet["out.norm.g"], unet["out.norm.b"]))
    return K.conv2d(h, unet["out.conv.w"], unet["out.conv.b"], pad=1)


# -- analytic cost census --------------------------------------------------------


@dataclass
class CostCensus:
    """Multiply-accumulate counts of one forward pass.

    ``residual`` holds the residual-branch MACs per unit site, ``shortcut`` the
    1x1 shortcut MACs, ``other`` everything outside units.
    """

    residual: dict = field(default_factory=dict)
    shortcut: dict = field(default_factory=dict)
    other: int = 0

    @property
    def total(self):
        return sum(self.residual.values()) + sum(self.shortcut.values()) + self.other


def _conv3_macs(config, n, size_out, out_ch, in_ch):
    macs = n * size_out * size_out * out_ch * in_ch * 9
    e = config.condconv_experts
    if e:
        macs += n * in_ch * e              # router
        macs += n * e * (out_ch * in_ch * 9)  # kernel mixing
        macs += n * e * out_ch             # bias mixing
    return macs


def cost_census(config, batch=1):
    n = batch
    c0 = config.base_channels[0]
    temb = config.time_embed_dim
    tokens, cdim = config.cond_tokens, config.cond_dim
    census = CostCensus()
    census.other += n * 2 * temb * temb
    s = config.sample_size
    census.other += n * s * s * c0 * config.latent_channels * 9
    plans = layout(config)
    for plan in plans:
        size = plan.size
        hw = size * size
        for lp in plan.layers:
            res = _conv3_macs(config, n, size, lp.out_ch, lp.in_ch)
            res += n * temb * lp.out_ch
            res += _conv3_macs(config, n, size, lp.out_ch, lp.out_ch)
            census.residual[SiteId(plan.name, lp.index, RES)] = res
            census.shortcut[SiteId(plan.name, lp.index, RES)] = (
                n * hw * lp.out_ch * lp.in_ch if lp.in_ch != lp.out_ch else 0)
            if lp.attention:
                c = lp.out_ch
                attn = n * hw * c * c * 2                 # proj_in / proj_out
                attn += n * hw * c * c * 4                # self-attn q k v o
                attn += n * 2 * hw * hw * c               # self-attn scores + values
                attn += n * hw * c * c * 2                # cross-attn q o
                attn += n * tokens * cdim * c * 2         # cross-attn k v
                attn += n * 2 * hw * tokens * c           # cross-attn scores + values
                attn += n * hw * c * 4 * c * 2            # feed-forward
                census.residual[SiteId(plan.name, lp.index, ATTN)] = attn
        if plan.resample != "none":
            so = plan.out_size
            census.other += n * so * so * plan.channels * plan.channels * 9
    census.other += n * s * s * config.latent_channels * plans[-1].channels * 9
    return census

