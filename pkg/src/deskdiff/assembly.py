"""Pruned variants, reconstructed (assembled) models, distillation and the toy dataset."""

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels as K
from . import sampler as S
from . import unet as U
from .kernels import Tensor

COMPRESSED_KINDS = ("base", "small", "tiny")
PRUNED_LAYER = 1  # same index in down and up blocks


class AssemblyError(ValueError):
    pass


def _is_standard_layout(cfg):
    ref = U.standard_config()
    return (cfg.down_blocks == ref.down_blocks and cfg.up_blocks == ref.up_blocks
            and cfg.has_middle and cfg.middle_spec == ref.middle_spec)


def compress_config(kind, full):
    if kind not in COMPRESSED_KINDS:
        raise AssemblyError(f"unknown compressed kind {kind!r}; choose from {COMPRESSED_KINDS}")
    if not _is_standard_layout(full):
        raise AssemblyError("compression starts from the standard block layout")
    down = tuple(replace(b, layers=b.layers - 1) for b in full.down_blocks)
    up = tuple(replace(b, layers=b.layers - 1) for b in full.up_blocks)
    cfg = replace(full, down_blocks=down, up_blocks=up)
    if kind == "base":
        return cfg
    cfg = replace(cfg, has_middle=False)
    if kind == "small":
        return cfg
    # tiny: drop the deepest pair; the new deepest down block stops downsampling
    deepest_dn, deepest_up = down[-1].name, up[0].name
    down = tuple(b for b in down if b.name != deepest_dn)
    down = down[:-1] + (replace(down[-1], resolution_change="none"),)
    up = tuple(b for b in up if b.name != deepest_up)
    return replace(cfg, down_blocks=down, up_blocks=up)


def layer_map(student_cfg, teacher_cfg):
    """student (block, layer) -> teacher layer index, dropping PRUNED_LAYER where a block shrank."""
    mapping = {}
    for spec in student_cfg.blocks():
        try:
            tspec = teacher_cfg.block(spec.name)
        except KeyError:
            raise AssemblyError(f"student block {spec.name} has no teacher counterpart") from None
        if spec.layers == tspec.layers:
            idx = list(range(spec.layers))
        elif spec.layers == tspec.layers - 1 and tspec.layers > PRUNED_LAYER:
            idx = [i for i in range(tspec.layers) if i != PRUNED_LAYER]
        else:
            raise AssemblyError(f"block {spec.name}: cannot derive {spec.layers} layers from {tspec.layers}")
        for j, i in enumerate(idx):
            mapping[(spec.name, j)] = i
    return mapping


def _teacher_name(name, lmap):
    parts = name.split(".")
    block = U.block_of(name)
    if block is not None and len(parts) > 1 and parts[1].startswith("L") and parts[1][1:].isdigit():
        parts[1] = f"L{lmap[(block, int(parts[1][1:]))]}"
    return ".".join(parts)


@dataclass
class StudentInit:
    unet: U.UNet
    copied: dict      # student name -> teacher name
    seams: list       # student names re-initialized because shapes differ


def init_student_from_teacher(student_cfg, teacher, seed=0):
    """Copy retained layers verbatim; re-initialize only shape-incompatible seams."""
    if student_cfg.condconv_experts != teacher.config.condconv_experts:
        raise AssemblyError("student and teacher disagree on expert banks")
    lmap = layer_map(student_cfg, teacher.config)
    fresh = U.build_unet(student_cfg, seed=seed, zero_out=False)
    params, copied, seams = {}, {}, []
    for name, shape in U.param_shapes(student_cfg).items():
        src = _teacher_name(name, lmap)
        tp = teacher.params.get(src)
        if tp is not None and tp.shape == tuple(shape):
            params[name] = Tensor(tp.data.copy())
            copied[name] = src
        else:
            params[name] = fresh.params[name]
            seams.append(name)
    return StudentInit(U.UNet(student_cfg, params), copied, seams)


@dataclass(frozen=True)
class AssemblyScheme:
    name: str
    student_blocks: frozenset
    freeze_teacher_part: bool = True

    def partition(self, block_names):
        return {b: ("student" if b in self.student_blocks else "teacher") for b in block_names}


SCHEMES = {
    "M1": AssemblyScheme("M1", frozenset({"dn0", "up3"})),
    "M2": AssemblyScheme("M2", frozenset({"dn0", "dn1", "up2", "up3"})),
    "M3": AssemblyScheme("M3", frozenset({"dn0", "dn1", "dn2", "up1", "up2", "up3"})),
}


def get_scheme(name, freeze=True):
    if name not in SCHEMES:
        raise AssemblyError(f"unknown scheme {name!r}; choose from {sorted(SCHEMES)}")
    return replace(SCHEMES[name], freeze_teacher_part=freeze)


def assemble(student, teacher, scheme):
    """Blocks from their designated source; global params come from the student."""
    tcfg, scfg = teacher.config, student.config
    if tcfg.condconv_experts != scfg.condconv_experts:
        raise AssemblyError("student and teacher disagree on expert banks")
    part = scheme.partition(tcfg.block_names())
    missing = [b for b, src in part.items() if src == "student" and b not in scfg.block_names()]
    if missing:
        raise AssemblyError(f"scheme {scheme.name} takes {missing} from a student that lacks them")

    def pick(spec):
        return scfg.block(spec.name) if part[spec.name] == "student" else spec

    cfg = replace(tcfg, down_blocks=tuple(pick(b) for b in tcfg.down_blocks),
                  up_blocks=tuple(pick(b) for b in tcfg.up_blocks),
                  middle_spec=pick(tcfg.middle_spec) if tcfg.has_middle else tcfg.middle_spec)
    try:
        shapes = U.param_shapes(cfg)
    except U.ConfigError as e:
        raise AssemblyError(f"scheme {scheme.name}: blocks do not connect: {e}") from None
    params, frozen = {}, set()
    for name, shape in shapes.items():
        block = U.block_of(name)
        source = student if block is None or part[block] == "student" else teacher
        p = source.params.get(name)
        if p is None or p.shape != tuple(shape):
            got = None if p is None else p.shape
            raise AssemblyError(f"scheme {scheme.name}: {name} expects {tuple(shape)}, source has {got}")
        params[name] = Tensor(p.data.copy())
        if source is teacher and scheme.freeze_teacher_part:
            frozen.add(name)
    return U.UNet(cfg, params, frozen)


# -- distillation ------------------------------------------------------------


@dataclass
class DistillConfig:
    w_task: float = 1.0
    w_kd: float = 1.0
    w_feat: float = 1.0
    lr: float = 1e-3
    batch_size: int = 4
    iterations: int = 200
    seed: int = 0
    cond_drop: float = 0.1

    def __post_init__(self):
        if min(self.w_task, self.w_kd, self.w_feat) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.lr <= 0 or self.batch_size < 1 or self.iterations < 0:
            raise ValueError("need lr > 0, batch_size >= 1, iterations >= 0")
        if not 0 <= self.cond_drop < 1:
            raise ValueError("cond_drop must lie in [0, 1)")


@dataclass
class LossReport:
    task: float
    kd: float
    feat: float
    total: float
    compared_blocks: list = field(default_factory=list)
    skipped_blocks: list = field(default_factory=list)


@dataclass
class DrawnBatch:
    """A training batch with its diffusion draws fixed."""
    x0: np.ndarray
    class_ids: np.ndarray
    t: np.ndarray
    eps: np.ndarray

    def noisy(self, sched):
        ab = sched.alpha_bar[self.t][:, None, None, None]
        x = np.sqrt(ab) * self.x0.astype(np.float64) + np.sqrt(1.0 - ab) * self.eps.astype(np.float64)
        return x.astype(self.x0.dtype)


def draw_batch(x0, class_ids, sched, rng, cond_drop=0.0, null_class=None):
    x0 = np.asarray(x0)
    ids = np.asarray(class_ids, dtype=np.int64).copy()
    if cond_drop > 0:
        drop = rng.random(len(ids)) < cond_drop
        ids[drop] = null_class
    t = rng.integers(0, sched.T, size=len(ids))
    eps = rng.standard_normal(x0.shape).astype(x0.dtype)
    return DrawnBatch(x0, ids, t, eps)


def _losses(teacher, student, batch, sched, cfg):
    x_t = batch.noisy(sched)
    s_blocks = {}
    s_eps = U.forward(student, x_t, batch.t, student.embed_condition(batch.class_ids), block_outputs=s_blocks)
    terms = [(cfg.w_task, K.mse(s_eps, batch.eps))]
    kd = feat = None
    compared, skipped = [], []
    if teacher is not None:
        t_blocks = {}
        with K.no_grad():
            t_eps = U.forward(teacher, x_t, batch.t, teacher.embed_condition(batch.class_ids),
                              block_outputs=t_blocks)
        kd = K.mse(s_eps, t_eps)
        feats = []
        for name, s_out in s_blocks.items():
            t_out = t_blocks.get(name)
            if t_out is None:
                continue
            if t_out.shape != s_out.shape:
                skipped.append(name)
                continue
            compared.append(name)
            feats.append((1.0, K.mse(s_out, t_out)))
        if skipped:
            warnings.warn(f"featKD skips blocks with mismatched shapes: {skipped}")
        feat = K.weighted_sum(feats) if feats else None
        terms.append((cfg.w_kd, kd))
        if feat is not None:
            terms.append((cfg.w_feat, feat))
    total = K.weighted_sum(terms)
    report = LossReport(float(terms[0][1].data), 0.0 if kd is None else float(kd.data),
                        0.0 if feat is None else float(feat.data), float(total.data), compared, skipped)
    return total, report


def distill_step(teacher, student, batch, sched, cfg, rng=None):
    """One plain gradient-descent step on the student's trainable params.

    ``batch`` is a DrawnBatch or an ``(x0, class_ids)`` pair (draws come from
    ``rng``).  ``teacher=None`` trains on the denoising loss alone.
    """
    if not isinstance(batch, DrawnBatch):
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        batch = draw_batch(*batch, sched, rng, cfg.cond_drop, student.null_class)
    trainable = [student.params[n] for n in student.trainable_names()]
    for p in student.params.values():
        p.requires_grad = p in trainable
        p.grad = None
    total, report = _losses(teacher, student, batch, sched, cfg)
    total.backward()
    lr = np.float64(cfg.lr)
    for p in trainable:
        if p.grad is not None:
            p.data = (p.data - lr * p.grad).astype(p.data.dtype)
        p.grad = None
    for p in student.params.values():
        p.requires_grad = False
    return report


def evaluate_losses(teacher, student, batch, sched, cfg=None):
    cfg = cfg or DistillConfig()
    with K.no_grad():
        return _losses(teacher, student, batch, sched, cfg)[1]


def distill(teacher, student, dataset, sched, cfg, log=None):
    """Run ``cfg.iterations`` steps over seeded minibatches; returns the loss reports."""
    rng = np.random.default_rng(cfg.seed)
    reports = []
    n = len(dataset)
    for it in range(cfg.iterations):
        idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        batch = draw_batch(dataset.latents[idx], dataset.class_ids[idx], sched, rng,
                           cfg.cond_drop, student.null_class)
        reports.append(distill_step(teacher, student, batch, sched, cfg))
        if log is not None:
            log(it, reports[-1])
    return reports


# -- toy dataset ---------------------------------------------------------------

# Fixed RGB -> 4-channel latent projection and its pseudo-inverse decoder.
LATENT_PROJECTION = np.array([[0.60, 0.30, 0.10],
                              [-0.35, 0.55, -0.20],
                              [0.10, -0.45, 0.65],
                              [0.40, -0.10, -0.35]], dtype=np.float64) * 1.5
LATENT_DECODER = np.linalg.pinv(LATENT_PROJECTION)

_PALETTE = np.array([[0.9, 0.2, 0.2], [0.2, 0.8, 0.3], [0.25, 0.35, 0.95], [0.95, 0.85, 0.2],
                     [0.8, 0.3, 0.85], [0.2, 0.85, 0.85], [0.95, 0.55, 0.15], [0.9, 0.9, 0.9]])
SHAPES = ("disc", "square", "triangle", "cross")


@dataclass
class ToyDataset:
    seed: int
    num_classes: int
    size: int
    images: np.ndarray      # [n, 3, size, size] in [-1, 1]
    latents: np.ndarray     # [n, 4, size, size]
    class_ids: np.ndarray

    def __len__(self):
        return len(self.class_ids)

    def split(self, n_holdout):
        """Hold out the last ``n_holdout`` samples."""
        cut = len(self) - n_holdout

        def part(sl):
            return ToyDataset(self.seed, self.num_classes, self.size, self.images[sl],
                              self.latents[sl], self.class_ids[sl])
        return part(slice(0, cut)), part(slice(cut, None))


def encode_images(images):
    return np.einsum("lc,nchw->nlhw", LATENT_PROJECTION, images).astype(np.float32)


def decode_latents(latents):
    return np.einsum("cl,nlhw->nchw", LATENT_DECODER, np.asarray(latents, dtype=np.float64))


def _render(shape, color, size, rng):
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    r = size * rng.uniform(0.2, 0.32)
    cy, cx = rng.uniform(r, size - r, size=2)
    dy, dx = yy - cy, xx - cx
    if shape == "disc":
        mask = dy ** 2 + dx ** 2 <= r ** 2
    elif shape == "square":
        mask = (np.abs(dy) <= r * 0.85) & (np.abs(dx) <= r * 0.85)
    elif shape == "triangle":
        mask = (dy <= r * 0.8) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    else:
        w = r * 0.35
        mask = ((np.abs(dy) <= w) & (np.abs(dx) <= r)) | ((np.abs(dx) <= w) & (np.abs(dy) <= r))
    img = np.full((3, size, size), -0.6)
    img[:, mask] = (color * 2.0 - 1.0)[:, None]
    return img


def make_toy_dataset(seed=0, K=8, n_samples=64, size=16):
    if K < 2:
        raise ValueError(f"need at least 2 classes, got {K}")
    if K > len(_PALETTE) * len(SHAPES):
        raise ValueError(f"at most {len(_PALETTE) * len(SHAPES)} classes")
    rng = np.random.default_rng(seed)
    ids = np.arange(n_samples) % K
    images = np.stack([_render(SHAPES[k % len(SHAPES)], _PALETTE[(k + k // len(SHAPES)) % len(_PALETTE)],
                               size, rng) for k in ids]) if n_samples else np.zeros((0, 3, size, size))
    return ToyDataset(seed, K, size, images.astype(np.float32), encode_images(images), ids.astype(np.int64))


# -- model kinds ---------------------------------------------------------------

MODEL_KINDS = ("standard", "base", "small", "tiny", "M1", "M2", "M3", "condconv")


def build_kind(kind, teacher, seed=0, n_experts=2):
    """Derive any supported model kind from a standard-layout teacher."""
    from . import condconv
    if kind == "standard":
        return teacher.clone()
    if kind in COMPRESSED_KINDS:
        return init_student_from_teacher(compress_config(kind, teacher.config), teacher, seed).unet
    if kind in SCHEMES:
        base = init_student_from_teacher(compress_config("base", teacher.config), teacher, seed).unet
        return assemble(base, teacher, get_scheme(kind))
    if kind == "condconv":
        base = init_student_from_teacher(compress_config("base", teacher.config), teacher, seed).unet
        return condconv.upgrade_model(base, n_experts, seed)
    raise AssemblyError(f"unknown model kind {kind!r}; choose from {MODEL_KINDS}")
