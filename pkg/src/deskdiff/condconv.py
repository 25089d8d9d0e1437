"""Multi-expert conditional convolution.

Each input sample gets routing weights from its pooled features; the expert
kernels are mixed with those weights and a single convolution runs per
sample.  ``upgrade_model`` swaps every 3x3 conv inside the UNet's ResUnits for
an expert bank whose first slot keeps the original weights.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from . import kernels as K
from . import unet as _unet
from .kernels import Tensor

PRESERVED_EXPERT = 0


@dataclass
class ExpertBank:
    kernels: Tensor   # [E, O, C, kh, kw]
    biases: Tensor    # [E, O]
    router: Tensor    # [C, E]
    router_bias: Tensor = None  # [E]
    gating: str = "sigmoid"

    def __post_init__(self):
        self.kernels = K.as_tensor(self.kernels)
        self.biases = K.as_tensor(self.biases)
        self.router = K.as_tensor(self.router)
        e = self.kernels.shape[0]
        if self.router_bias is None:
            self.router_bias = Tensor(np.zeros(e, dtype=np.float32))
        self.router_bias = K.as_tensor(self.router_bias)
        if self.kernels.ndim != 5:
            raise K.ShapeError(f"expert kernels must be [E, O, C, kh, kw], got {self.kernels.shape}")
        if self.biases.shape != (e, self.kernels.shape[1]):
            raise K.ShapeError(f"expert biases must be {(e, self.kernels.shape[1])}, got {self.biases.shape}")
        if self.router.shape != (self.kernels.shape[2], e):
            raise K.ShapeError(f"router must be {(self.kernels.shape[2], e)}, got {self.router.shape}")
        if self.gating not in ("sigmoid", "softmax"):
            raise ValueError(f"gating must be 'sigmoid' or 'softmax', got {self.gating!r}")

    @property
    def n_experts(self):
        return self.kernels.shape[0]


def route(x, bank):
    """Routing weights r[N, E] = gate(avgpool(x) @ router + bias)."""
    x = K.as_tensor(x)
    if x.ndim != 4 or x.shape[1] != bank.router.shape[0]:
        raise K.ShapeError(f"route: input channels {x.shape[1:2]} != router inputs {bank.router.shape[0]}")
    logits = K.linear(K.global_avg_pool(x), bank.router, bank.router_bias)
    if bank.gating == "softmax":
        return _softmax_rows(logits)
    return K.sigmoid(logits)


def _softmax_rows(logits):
    p = K.softmax(logits.data, axis=-1).astype(logits.dtype)

    def bw(g):
        K._accum(logits, p * (g - (g * p).sum(axis=-1, keepdims=True)))

    return K._make(p, (logits,), bw)


def combine_kernels(bank, r):
    """Per-sample ``(sum_i r_i W_i, sum_i r_i b_i)``."""
    r = K.as_tensor(r)
    if r.ndim == 1:
        r = K.reshape(r, (1, -1))
    if r.shape[1] != bank.n_experts:
        raise K.ShapeError(f"combine_kernels: {r.shape[1]} weights for {bank.n_experts} experts")
    return K.mix(r, bank.kernels), K.mix(r, bank.biases)


def me_cond_conv(x, bank, stride=1, pad=None, r=None):
    """Routed convolution; ``r`` overrides the router (used to force a route)."""
    x = K.as_tensor(x)
    kh = bank.kernels.shape[3]
    if pad is None:
        pad = kh // 2
    if r is None:
        r = route(x, bank)
    kernels, biases = combine_kernels(bank, r)
    n = x.shape[0]
    # identical routes collapse to one batched conv, which also keeps a forced
    # single-expert route bit-identical to the plain convolution
    shared = all(np.array_equal(kernels.data[0], kernels.data[i]) and
                 np.array_equal(biases.data[0], biases.data[i]) for i in range(1, n))
    if shared:
        return K.conv2d(x, _row(kernels, 0), _row(biases, 0), stride=stride, pad=pad)
    outs = [K.conv2d(K.take(x, i), _row(kernels, i), _row(biases, i), stride=stride, pad=pad)
            for i in range(n)]
    return K.concat(outs, axis=0)


def _row(t, i):
    return K.reshape(K.take(t, i), t.shape[1:])


def upgrade_model(unet, n_experts=2, seed=0, gating="sigmoid"):
    """Replace every 3x3 ResUnit conv with an ``n_experts`` bank.

    Slot 0 carries the original weights bit-for-bit; the other experts are
    drawn at 0.1x the usual init scale.  Router weights start near zero so the
    sigmoid gates begin close to 0.5.
    """
    if n_experts < 2:
        raise ValueError(f"n_experts must be >= 2, got {n_experts}")
    if unet.config.condconv_experts:
        raise ValueError("model already carries expert banks")
    if gating != "sigmoid":
        raise ValueError("upgrade_model initializes sigmoid gates only")
    config = replace(unet.config, condconv_experts=n_experts)
    rng = np.random.default_rng(seed)
    params = {}
    for name, p in unet.params.items():
        stem, leaf = name.rsplit(".", 1)
        is_conv3 = (".res.conv1" in name or ".res.conv2" in name)
        if not is_conv3:
            params[name] = Tensor(p.data.copy())
            continue
        if leaf == "b":
            continue
        w = p.data
        b = unet.params[f"{stem}.b"].data
        o, c, kh, kw = w.shape
        fan_in = c * kh * kw
        kernels = np.empty((n_experts, o, c, kh, kw), dtype=np.float32)
        biases = np.zeros((n_experts, o), dtype=np.float32)
        kernels[PRESERVED_EXPERT] = w
        biases[PRESERVED_EXPERT] = b
        for e in range(n_experts):
            if e != PRESERVED_EXPERT:
                kernels[e] = 0.1 * rng.standard_normal((o, c, kh, kw)) / math.sqrt(fan_in)
        params[f"{stem}.experts.w"] = Tensor(kernels)
        params[f"{stem}.experts.b"] = Tensor(biases)
        params[f"{stem}.router.w"] = Tensor((0.01 * rng.standard_normal((c, n_experts))).astype(np.float32))
        params[f"{stem}.router.b"] = Tensor(np.zeros(n_experts, dtype=np.float32))
    return _unet.UNet(config, params, frozenset())

