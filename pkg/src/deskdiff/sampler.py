"""Noise schedule, ancestral denoising and the multi-model switching sampler."""

import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels as K
from . import unet as U

DEFAULT_T = 1000
DEFAULT_BETA_START = 8.5e-4
DEFAULT_BETA_END = 1.2e-2
DEFAULT_STEPS = 50
DEFAULT_GUIDANCE = 7.5


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    # training timestep fed to the model at each index (identity unless respaced)
    timesteps: np.ndarray = None

    @property
    def T(self):
        return len(self.beta)

    def model_timestep(self, t):
        return int(t if self.timesteps is None else self.timesteps[t])


def schedule_from_betas(beta, timesteps=None):
    beta = np.asarray(beta, dtype=np.float64)
    if beta.ndim != 1 or len(beta) < 1:
        raise ScheduleError("beta must be a non-empty 1-d array")
    if np.any(beta <= 0) or np.any(beta >= 1):
        raise ScheduleError("every beta must lie in (0, 1)")
    alpha = 1.0 - beta
    return NoiseSchedule(beta, alpha, np.cumprod(alpha),
                         None if timesteps is None else np.asarray(timesteps, dtype=np.int64))


def make_schedule(T=DEFAULT_T, beta_start=DEFAULT_BETA_START, beta_end=DEFAULT_BETA_END):
    if int(T) != T or T < 1:
        raise ScheduleError(f"T must be a positive integer, got {T}")
    if not (0 < beta_start <= beta_end < 1):
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return schedule_from_betas(np.linspace(beta_start, beta_end, int(T), dtype=np.float64))


def respace(sched, steps):
    """Evenly strided sub-schedule of ``steps`` indices sharing the same alpha_bar."""
    if steps < 1 or steps > sched.T:
        raise ScheduleError(f"steps must be in [1, {sched.T}], got {steps}")
    ts = np.array([i * sched.T // steps for i in range(steps)], dtype=np.int64)
    ab = sched.alpha_bar[ts]
    prev = np.concatenate([[1.0], ab[:-1]])
    return schedule_from_betas(1.0 - ab / prev, ts)


def _check_t(t, sched):
    if int(t) != t or not 0 <= t < sched.T:
        raise ScheduleError(f"t={t} outside [0, {sched.T})")
    return int(t)


def _arr(x):
    return x.data if isinstance(x, K.Tensor) else np.asarray(x)


def add_noise(x0, t, eps, sched):
    t = _check_t(t, sched)
    x0, eps = _arr(x0), _arr(eps)
    try:
        np.broadcast_shapes(x0.shape, eps.shape)
    except ValueError:
        raise K.ShapeError(f"add_noise: eps {eps.shape} does not fit x0 {x0.shape}") from None
    ab = sched.alpha_bar[t]
    dtype = np.result_type(x0, eps, np.float32)
    out = np.sqrt(ab) * x0.astype(np.float64) + np.sqrt(1.0 - ab) * eps.astype(np.float64)
    return out.astype(dtype)


def denoise_step(eps_pred, x_t, t, sched, noise=None):
    t = _check_t(t, sched)
    eps_pred, x_t = _arr(eps_pred), _arr(x_t)
    if eps_pred.shape != x_t.shape:
        raise K.ShapeError(f"denoise_step: eps {eps_pred.shape} != x_t {x_t.shape}")
    a, b, ab = sched.alpha[t], sched.beta[t], sched.alpha_bar[t]
    x = x_t.astype(np.float64)
    if 1.0 - ab > 0:
        x = x - (b / np.sqrt(1.0 - ab)) * eps_pred.astype(np.float64)
    x = x / np.sqrt(a)
    if t > 0 and noise is not None:
        noise = _arr(noise)
        if noise.shape != x_t.shape:
            raise K.ShapeError(f"denoise_step: noise {noise.shape} != x_t {x_t.shape}")
        x = x + np.sqrt(b) * noise.astype(np.float64)
    return x.astype(np.result_type(x_t, np.float32))


def cfg_combine(uncond, cond, scale):
    uncond, cond = _arr(uncond), _arr(cond)
    if uncond.shape != cond.shape:
        raise K.ShapeError(f"cfg_combine: shapes differ {uncond.shape} vs {cond.shape}")
    return uncond + uncond.dtype.type(scale) * (cond - uncond)


@dataclass(frozen=True)
class SwitchPolicy:
    segments: tuple  # ((steps, model_id), ...)

    def __post_init__(self):
        segs = tuple((int(n), str(m)) for n, m in self.segments)
        if not segs:
            raise ValueError("a switch policy needs at least one segment")
        if any(n < 1 for n, _ in segs):
            raise ValueError("segment step counts must be positive")
        object.__setattr__(self, "segments", segs)

    @property
    def total_steps(self):
        return sum(n for n, _ in self.segments)

    def model_ids(self):
        return list(dict.fromkeys(m for _, m in self.segments))

    def trace(self):
        return [m for n, m in self.segments for _ in range(n)]

    @classmethod
    def single(cls, model_id, steps):
        return cls(((steps, model_id),))

    @classmethod
    def parse(cls, text):
        """``"base:10,standard:15"`` -> segments in order."""
        segs = []
        for part in text.split(","):
            part = part.strip()
            if not part:
                continue
            model, sep, n = part.rpartition(":")
            if not sep or not model:
                raise ValueError(f"bad policy segment {part!r}; expected model:steps")
            try:
                segs.append((int(n), model.strip()))
            except ValueError:
                raise ValueError(f"bad step count in policy segment {part!r}") from None
        return cls(tuple(segs))

    def __str__(self):
        return ",".join(f"{m}:{n}" for n, m in self.segments)


# The three switching orders compared at 25 steps.
def policy_s1(base="base", std="standard"):
    return SwitchPolicy(((10, base), (15, std)))


def policy_s2(base="base", std="standard"):
    return SwitchPolicy(((15, std), (10, base)))


def policy_s3(base="base", std="standard"):
    return SwitchPolicy(((10, std), (15, base)))


NAMED_POLICIES = {"S1": policy_s1, "S2": policy_s2, "S3": policy_s3}


@dataclass
class StepRecord:
    step: int
    timestep: int
    model_id: str
    role: str
    forward_ns: int


@dataclass
class SampleTrace:
    records: list = field(default_factory=list)

    @property
    def model_ids(self):
        return [r.model_id for r in self.records]

    @property
    def forward_ns(self):
        return np.array([r.forward_ns for r in self.records], dtype=np.int64)


def class_ids(cond, n):
    ids = np.atleast_1d(np.asarray(cond, dtype=np.int64))
    if ids.shape == (1,) and n > 1:
        ids = np.repeat(ids, n)
    if ids.shape != (n,):
        raise ValueError(f"expected {n} class ids, got {ids.shape}")
    return ids


def sample(models, policy, sched, steps, cond, seed, inherit_ctx=None,
           guidance_scale=DEFAULT_GUIDANCE, trace=None, batch=None):
    """Ancestral sampling from seeded noise, switching models per ``policy``.

    ``cond`` is one class id per sample.  Every step runs one batched forward
    over [conditional; unconditional] inputs and combines them with guidance.
    """
    if policy.total_steps != steps:
        raise ValueError(f"policy covers {policy.total_steps} steps but sampler runs {steps}")
    missing = [m for m in policy.model_ids() if m not in models]
    if missing:
        raise KeyError(f"policy references unknown models {missing}")
    ref = models[policy.segments[0][1]].config
    for m in policy.model_ids():
        c = models[m].config
        if (c.latent_channels, c.sample_size) != (ref.latent_channels, ref.sample_size):
            raise K.ShapeError(f"model {m!r} latent shape differs from {policy.segments[0][1]!r}")
    n = batch if batch is not None else np.size(cond)
    ids = class_ids(cond, n)
    sub = respace(sched, steps)
    rng = np.random.default_rng(seed)
    shape = (n, ref.latent_channels, ref.sample_size, ref.sample_size)
    x = rng.standard_normal(shape).astype(np.float32)
    embeds = {}
    plan = policy.trace()
    if inherit_ctx is not None:
        inherit_ctx.begin(steps)
    with K.no_grad():
        for i, model_id in enumerate(plan):
            unet = models[model_id]
            if model_id not in embeds:
                null = np.full(n, unet.null_class, dtype=np.int64)
                embeds[model_id] = unet.embed_condition(np.concatenate([ids, null]))
            t = steps - 1 - i
            mt = sub.model_timestep(t)
            xin = np.concatenate([x, x], axis=0)
            t0 = time.perf_counter_ns()
            if inherit_ctx is None:
                out = U.forward(unet, xin, mt, embeds[model_id])
                role = "FULL"
            else:
                out, role = inherit_ctx.forward(model_id, unet, xin, mt, embeds[model_id], i)
            dt = time.perf_counter_ns() - t0
            eps = cfg_combine(out.data[n:], out.data[:n], guidance_scale)
            noise = rng.standard_normal(shape).astype(np.float32)
            x = denoise_step(eps, x, t, sub, noise)
            if trace is not None:
                trace.records.append(StepRecord(i, mt, model_id, role, dt))
    return x


def reference_sample(unet, sched, steps, cond, seed, guidance_scale=DEFAULT_GUIDANCE):
    """Plain single-model loop, written independently of ``sample``."""
    ids = np.atleast_1d(np.asarray(cond, dtype=np.int64))
    n = len(ids)
    sub = respace(sched, steps)
    rng = np.random.default_rng(seed)
    cfg = unet.config
    shape = (n, cfg.latent_channels, cfg.sample_size, cfg.sample_size)
    x = rng.standard_normal(shape).astype(np.float32)
    emb = unet.embed_condition(np.concatenate([ids, np.full(n, unet.null_class)]))
    with K.no_grad():
        for t in reversed(range(steps)):
            out = U.forward(unet, np.concatenate([x, x]), int(sub.timesteps[t]), emb).data
            eps = out[n:] + np.float32(guidance_scale) * (out[:n] - out[n:])
            noise = rng.standard_normal(shape).astype(np.float32)
            x = denoise_step(eps, x, t, sub, noise)
    return x
