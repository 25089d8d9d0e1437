"""Command-line entry point: ``deskdiff <command> ...``."""

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml
from threadpoolctl import threadpool_limits

from . import assembly as A
from . import checkpoint as C
from . import condconv
from . import inherit as I
from . import sampler as S
from . import unet as U

log = logging.getLogger("deskdiff")

EXIT_OK, EXIT_USAGE, EXIT_INVALID = 0, 2, 3


class ValidationError(ValueError):
    pass


# -- config files --------------------------------------------------------------

_MODEL_KEYS = {"base_channels", "latent_channels", "sample_size", "cond_dim", "cond_tokens",
               "num_classes", "time_embed_dim", "attn_heads", "norm_groups"}
_SCHEMA = {
    "seed": int,
    "model": _MODEL_KEYS,
    "schedule": {"T", "beta_start", "beta_end"},
    "sampler": {"steps", "guidance"},
    "dataset": {"seed", "samples", "holdout"},
    "pretrain": {"iterations", "lr", "batch_size"},
    "distill": {"w_task", "w_kd", "w_feat", "lr", "batch_size", "iterations", "seed", "cond_drop"},
    "bench": {"models", "plans", "modes", "seeds", "class_id", "period_sweep", "sweep_plan", "sweep_seeds"},
}

DEFAULTS = {
    "seed": 0,
    "model": {},
    "schedule": {"T": S.DEFAULT_T, "beta_start": S.DEFAULT_BETA_START, "beta_end": S.DEFAULT_BETA_END},
    "sampler": {"steps": S.DEFAULT_STEPS, "guidance": S.DEFAULT_GUIDANCE},
    "dataset": {"seed": 0, "samples": 64, "holdout": 8},
    "pretrain": {"iterations": 0, "lr": 5e-2, "batch_size": 4},
    "distill": {},
    "bench": {"models": {}, "plans": [], "modes": [], "seeds": [0], "class_id": 0,
              "period_sweep": False, "sweep_plan": "CO6", "sweep_seeds": [0]},
}


def check_schema(doc):
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ValidationError("config must be a mapping at the top level")
    for key, value in doc.items():
        if key not in _SCHEMA:
            raise ValidationError(f"unknown config section {key!r}; expected one of {sorted(_SCHEMA)}")
        allowed = _SCHEMA[key]
        if allowed is int:
            if not isinstance(value, int):
                raise ValidationError(f"{key} must be an integer")
            continue
        if not isinstance(value, dict):
            raise ValidationError(f"section {key!r} must be a mapping")
        extra = set(value) - allowed
        if extra:
            raise ValidationError(f"unknown keys in {key!r}: {sorted(extra)}")
    return doc


def load_config(path):
    cfg = {k: (dict(v) if isinstance(v, dict) else v) for k, v in DEFAULTS.items()}
    if path is None:
        return cfg
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except OSError as e:
        raise ValidationError(f"cannot read config {path}: {e.strerror}") from None
    except yaml.YAMLError as e:
        raise ValidationError(f"config {path} is not valid YAML: {e}") from None
    for key, value in check_schema(doc).items():
        if isinstance(value, dict):
            cfg[key].update(value)
        else:
            cfg[key] = value
    return cfg


def unet_config(cfg):
    return U.standard_config(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in cfg["model"].items()})


def schedule(cfg):
    return S.make_schedule(**cfg["schedule"])


# -- helpers -------------------------------------------------------------------


def digest(arr):
    return hashlib.blake2b(np.ascontiguousarray(arr, dtype="<f4").tobytes(), digest_size=8).hexdigest()


def write_ppm(path, latents, scale=8):
    """Decode the first latent to RGB and write a binary P6 image."""
    rgb = A.decode_latents(np.asarray(latents)[:1])[0]
    img = np.clip((rgb + 1.0) * 127.5 + 0.5, 0, 255).astype(np.uint8).transpose(1, 2, 0)
    if scale > 1:
        img = img.repeat(scale, axis=0).repeat(scale, axis=1)
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def read_ppm(path):
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValidationError(f"{path} is not a P6 image")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8).reshape(h, w, 3)


def parse_model_args(items):
    """``id=path`` pairs (a bare path gets the id ``model``)."""
    models = {}
    for item in items:
        mid, sep, path = item.partition("=")
        if not sep:
            mid, path = "model", item
        if mid in models:
            raise ValidationError(f"model id {mid!r} given twice")
        models[mid] = C.load_model(path)
    return models


def resolve_mode(text, steps):
    if text is None:
        return I.make_mode(1, 0, steps)
    try:
        return I.parse_mode(text, steps)
    except ValueError as e:
        raise ValidationError(str(e)) from None


def run_sampling(models, policy, sched, steps, class_id, seed, plan, mode, guidance):
    trace = S.SampleTrace()
    ctx = None
    if plan != "none" or mode.period != 1:
        ctx = I.InheritanceContext(plan, mode)
    x = S.sample(models, policy, sched, steps, [class_id], seed, inherit_ctx=ctx,
                 guidance_scale=guidance, trace=trace)
    return x, trace


def flop_rows(models, trace, plan, mode):
    """Per-step analytic MACs for the model actually used at each step."""
    out = []
    for rec in trace.records:
        unet = models[rec.model_id]
        p = I.compile_plan(plan, unet.config) if isinstance(plan, str) else plan
        census = U.cost_census(unet.config, batch=2)
        skipped = sum(census.residual[s] for s in p.sites) if rec.role == "INHERIT" else 0
        out.append(census.total - skipped)
    return out


def write_report(path, trace, macs, plan, mode, seed, final_digest):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "timestep", "model_id", "role", "wall_ns", "macs", "plan", "mode", "seed", "digest"])
        for rec, m in zip(trace.records, macs):
            w.writerow([rec.step, rec.timestep, rec.model_id, rec.role, rec.forward_ns, m, plan, mode.name,
                        seed, final_digest])


# -- commands --------------------------------------------------------------------


def cmd_init(args):
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg["seed"]
    ucfg = unet_config(cfg)
    pre = cfg["pretrain"]
    iters = args.pretrain_iters if args.pretrain_iters is not None else pre["iterations"]
    net = U.build_unet(ucfg, seed=seed, zero_out=False)
    if iters:
        ds_cfg = cfg["dataset"]
        data = A.make_toy_dataset(ds_cfg["seed"], ucfg.num_classes, ds_cfg["samples"], ucfg.sample_size)
        dc = A.DistillConfig(lr=pre["lr"], batch_size=pre["batch_size"], iterations=iters, seed=seed)
        reports = A.distill(None, net, data, schedule(cfg), dc)
        log.info("pretrain: task loss %.4f -> %.4f", reports[0].task, reports[-1].task)
    C.save_model(args.out, net, {"kind": "standard", "seed": seed, "pretrain_iterations": iters})
    print(f"wrote {args.out} ({net.num_params()} params)")
    return EXIT_OK


def _write_losses(path, stage, reports, mode="a"):
    new = mode == "w" or not Path(path).exists()
    with open(path, mode, newline="") as f:
        w = csv.writer(f)
        if new:
            w.writerow(["stage", "iteration", "task", "kd", "feat", "total"])
        for i, r in enumerate(reports):
            w.writerow([stage, i, f"{r.task:.8g}", f"{r.kd:.8g}", f"{r.feat:.8g}", f"{r.total:.8g}"])


def cmd_distill(args):
    cfg = load_config(args.config)
    teacher = C.load_model(args.teacher)
    sched = schedule(cfg)
    ds_cfg = cfg["dataset"]
    data_seed = args.dataset_seed if args.dataset_seed is not None else ds_cfg["seed"]
    data = A.make_toy_dataset(data_seed, teacher.config.num_classes, ds_cfg["samples"],
                              teacher.config.sample_size)
    dist = dict(cfg["distill"])
    if args.iters is not None:
        dist["iterations"] = args.iters
    if args.seed is not None:
        dist["seed"] = args.seed
    dc = A.DistillConfig(**dist)
    out = Path(args.out)
    loss_csv = Path(args.loss_csv) if args.loss_csv else out.with_suffix(".losses.csv")
    if loss_csv.exists():
        loss_csv.unlink()
    kind = args.student
    if kind in A.COMPRESSED_KINDS:
        student = A.init_student_from_teacher(A.compress_config(kind, teacher.config), teacher, dc.seed).unet
        _write_losses(loss_csv, kind, A.distill(teacher, student, data, sched, dc))
        C.save_model(out, student, {"kind": kind, "stage": 1})
        print(f"wrote {out}")
    elif kind in A.SCHEMES:
        # step 1: compressed student; step 2: reconstructed model with the teacher's deep part frozen
        base = A.init_student_from_teacher(A.compress_config("base", teacher.config), teacher, dc.seed).unet
        _write_losses(loss_csv, "base", A.distill(teacher, base, data, sched, dc))
        stage1 = out.with_name(out.stem + ".stage1" + out.suffix)
        C.save_model(stage1, base, {"kind": "base", "stage": 1})
        model = A.assemble(base, teacher, A.get_scheme(kind, freeze=not args.no_freeze))
        _write_losses(loss_csv, kind, A.distill(teacher, model, data, sched, dc))
        C.save_model(out, model, {"kind": kind, "stage": 2})
        print(f"wrote {stage1} and {out}")
    else:
        raise ValidationError(f"unknown student kind {kind!r}")
    print(f"losses in {loss_csv}")
    return EXIT_OK


def cmd_upgrade(args):
    net = C.load_model(args.model)
    up = condconv.upgrade_model(net, args.experts, args.seed)
    C.save_model(args.out, up, {"kind": "condconv", "experts": args.experts})
    print(f"wrote {args.out} ({up.num_params()} params)")
    return EXIT_OK


def cmd_sample(args):
    cfg = load_config(args.config)
    steps = args.steps or cfg["sampler"]["steps"]
    models = parse_model_args(args.model)
    if args.policy:
        if args.policy in S.NAMED_POLICIES:
            ids = list(models)
            policy = S.NAMED_POLICIES[args.policy](*ids[:2])
        else:
            policy = S.SwitchPolicy.parse(args.policy)
    else:
        if len(models) != 1:
            raise ValidationError("several models need a --policy")
        policy = S.SwitchPolicy.single(next(iter(models)), steps)
    if policy.total_steps != steps:
        if args.steps:
            raise ValidationError(f"policy covers {policy.total_steps} steps, --steps is {steps}")
        steps = policy.total_steps
    mode = resolve_mode(args.mode, steps)
    for m in models.values():
        I.compile_plan(args.plan, m.config)
    sched = schedule(cfg)
    guidance = cfg["sampler"]["guidance"]
    with threadpool_limits(1):
        x, trace = run_sampling(models, policy, sched, steps, args.class_id, args.seed, args.plan, mode, guidance)
        base_total = None
        if args.compare_baseline:
            _, btrace = run_sampling(models, policy, sched, steps, args.class_id, args.seed, "none",
                                     I.make_mode(1, 0, steps), guidance)
            base_total = int(btrace.forward_ns.sum())
    d = digest(x)
    out = Path(args.out)
    write_ppm(out, x)
    report = Path(args.report) if args.report else out.with_suffix(".csv")
    macs = flop_rows(models, trace, args.plan, mode)
    write_report(report, trace, macs, args.plan, mode, args.seed, d)
    roles = [r.role for r in trace.records]
    summary = {
        "digest": d, "seed": args.seed, "steps": steps, "policy": str(policy), "plan": args.plan,
        "mode": mode.name, "role_counts": {r: roles.count(r) for r in ("EXTRACT", "INHERIT", "FULL")},
        "total_wall_ns": int(trace.forward_ns.sum()), "total_macs": int(sum(macs)),
    }
    if base_total is not None:
        summary["baseline_wall_ns"] = base_total
        summary["measured_saved_fraction"] = 1.0 - summary["total_wall_ns"] / base_total
    report.with_suffix(".json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary))
    return EXIT_OK


def _bench_model(spec, teacher_cache):
    if Path(str(spec)).suffix == ".asdm" or Path(str(spec)).exists():
        return C.load_model(spec)
    kind = str(spec)
    if "teacher" not in teacher_cache:
        raise ValidationError(f"model kind {kind!r} needs a --teacher checkpoint")
    return A.build_kind(kind, teacher_cache["teacher"])


def _median_sampling(models, mid, sched, steps, class_id, seed, plan, mode, guidance, repeats):
    policy = S.SwitchPolicy.single(mid, steps)
    run_sampling(models, policy, sched, steps, class_id, seed, plan, mode, guidance)  # warm-up
    totals, final = [], None
    for _ in range(repeats):
        final, trace = run_sampling(models, policy, sched, steps, class_id, seed, plan, mode, guidance)
        totals.append(int(trace.forward_ns.sum()))
    return float(np.median(totals)), final


BENCH_HEADER = ["model", "plan", "mode", "seed", "median_wall_ms", "baseline_wall_ms", "measured_saved_fraction",
                "mac_saved_fraction", "deviation_mse", "digest"]


def cmd_bench(args):
    cfg = load_config(args.config)
    b = cfg["bench"]
    steps = args.steps or cfg["sampler"]["steps"]
    sched = schedule(cfg)
    guidance = cfg["sampler"]["guidance"]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cache = {}
    if args.teacher:
        cache["teacher"] = C.load_model(args.teacher)
    models = {mid: _bench_model(spec, cache) for mid, spec in (b["models"] or {}).items()}
    modes = [resolve_mode(m, steps) for m in b["modes"]]
    for mid, m in models.items():
        for plan in b["plans"]:
            I.compile_plan(plan, m.config)
    rows = []
    with threadpool_limits(1):
        for mid in models:
            for seed in b["seeds"]:
                base_ms, base_x = None, None
                for plan in b["plans"]:
                    for mode in modes:
                        if base_ms is None:
                            base_ms, base_x = _median_sampling(models, mid, sched, steps, b["class_id"], seed, "none",
                                                               I.make_mode(1, 0, steps), guidance, args.repeats)
                        ms, x = _median_sampling(models, mid, sched, steps, b["class_id"], seed, plan, mode,
                                                 guidance, args.repeats)
                        _, saved = I.flop_estimate(models[mid].config, I.compile_plan(plan, models[mid].config),
                                                   mode, batch=2)
                        dev = float(np.mean((x.astype(np.float64) - base_x) ** 2))
                        rows.append([mid, plan, mode.name, seed, f"{ms / 1e6:.3f}", f"{base_ms / 1e6:.3f}",
                                     f"{1 - ms / base_ms:.4f}", f"{saved:.6f}", f"{dev:.6g}", digest(x)])
                        log.info("bench %s", rows[-1])
        table = out / "bench.csv"
        with open(table, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(BENCH_HEADER)
            w.writerows(rows)
        print(f"wrote {table} ({len(rows)} rows)")
        if b["period_sweep"] and models:
            sweep = out / "period_sweep.csv"
            with open(sweep, "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["model", "plan", "seed", "period", "deviation_mse", "mac_saved_fraction"])
                for mid, m in models.items():
                    plan = I.compile_plan(b["sweep_plan"], m.config)
                    for seed in b["sweep_seeds"]:
                        base, _ = run_sampling(models, S.SwitchPolicy.single(mid, steps), sched, steps,
                                               b["class_id"], seed, "none", I.make_mode(1, 0, steps), guidance)
                        for period in PERIOD_SWEEP:
                            mode = I.make_mode(period, 0, steps)
                            x, _ = run_sampling(models, S.SwitchPolicy.single(mid, steps), sched, steps,
                                                b["class_id"], seed, plan, mode, guidance)
                            _, saved = I.flop_estimate(m.config, plan, mode, batch=2)
                            dev = float(np.mean((x.astype(np.float64) - base) ** 2))
                            w.writerow([mid, plan.name, seed, period, f"{dev:.6g}", f"{saved:.6f}"])
            print(f"wrote {sweep}")
    return EXIT_OK


PERIOD_SWEEP = (2, 5, 8, 10, 15)
MIN_REPEATS = 5


def _plan_config(args):
    cfg = unet_config(load_config(args.config))
    if args.kind and args.kind != "standard":
        if args.kind in A.COMPRESSED_KINDS:
            return A.compress_config(args.kind, cfg)
        if args.kind in A.SCHEMES:
            t = U.build_unet(cfg)
            return A.build_kind(args.kind, t).config
        raise ValidationError(f"unknown kind {args.kind!r}")
    return cfg


def cmd_plan(args):
    catalog = I.load_catalog(args.catalog) if args.catalog else I.default_catalog()
    if args.action == "list":
        for name in I.catalog_names(catalog, include_comparison=args.all):
            e = catalog[name]
            tag = "" if e.canonical else " (non-canonical)"
            print(f"{name:6s} {e.description}{tag}")
        return EXIT_OK
    cfg = _plan_config(args)
    if args.action == "show":
        if not args.name:
            raise ValidationError("plan show needs a plan name")
        plan = I.compile_plan(args.name, cfg, catalog)
        by_block = {}
        for s in plan.sorted_sites():
            by_block.setdefault(s.block, []).append(s)
        print(f"{plan.name}: {len(plan)} unit sites")
        for block in cfg.block_names():
            sites = by_block.get(block, [])
            if sites:
                res = sum(s.unit == U.RES for s in sites)
                print(f"  {block}: {res} RES, {len(sites) - res} ATTN  [{', '.join(map(str, sites))}]")
        return EXIT_OK
    names = [args.name] if args.name else I.catalog_names(catalog, include_comparison=True)
    failed = 0
    for name in names:
        plan, unresolved = I.resolve_plan(name, cfg, catalog)
        if unresolved:
            failed += 1
            print(f"{name}: UNRESOLVED {', '.join(unresolved)}")
        else:
            print(f"{name}: ok ({len(plan)} sites)")
    return EXIT_INVALID if failed else EXIT_OK


def cmd_export_dataset(args):
    data = A.make_toy_dataset(args.seed, args.classes, args.samples, args.size)
    C.save_arrays(args.out, {"images": data.images, "latents": data.latents,
                             "class_ids": data.class_ids.astype(np.float32)},
                  {"seed": args.seed, "classes": args.classes, "samples": args.samples})
    print(f"wrote {args.out} ({len(data)} samples)")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="deskdiff", description="Toy latent-diffusion acceleration workbench.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="YAML config file")
        if seed:
            sp.add_argument("--seed", type=int)

    sp = sub.add_parser("init", help="build (and optionally pretrain) a seeded standard model")
    common(sp)
    sp.add_argument("--pretrain-iters", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_init)

    sp = sub.add_parser("distill", help="distill a compressed or reconstructed student")
    common(sp)
    sp.add_argument("--teacher", required=True)
    sp.add_argument("--student", required=True, help="base|small|tiny|M1|M2|M3")
    sp.add_argument("--dataset-seed", type=int)
    sp.add_argument("--iters", type=int)
    sp.add_argument("--no-freeze", action="store_true", help="train the teacher-sourced part too")
    sp.add_argument("--loss-csv")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_distill)

    sp = sub.add_parser("upgrade", help="swap 3x3 ResUnit convs for expert banks")
    sp.add_argument("--model", required=True)
    sp.add_argument("--experts", type=int, default=2)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_upgrade)

    sp = sub.add_parser("sample", help="generate one image with optional switching and inheritance")
    common(sp, seed=False)
    sp.add_argument("--model", action="append", required=True, help="checkpoint, or id=checkpoint")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--policy", help='"base:10,std:15" or S1/S2/S3')
    sp.add_argument("--plan", default="none")
    sp.add_argument("--mode", help="pN[+tail], e.g. p5+10")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--class-id", type=int, default=0)
    sp.add_argument("--compare-baseline", action="store_true")
    sp.add_argument("--report")
    sp.add_argument("--out", required=True, help="output .ppm")
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("bench", help="plan x mode x model timing table plus period sweep")
    common(sp, seed=False)
    sp.add_argument("--teacher", help="checkpoint used to derive models named by kind")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--repeats", type=int, default=5)
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("plan", help="inspect the skip-plan catalog")
    sp.add_argument("action", choices=("list", "show", "validate"))
    sp.add_argument("name", nargs="?")
    sp.add_argument("--config")
    sp.add_argument("--kind", help="validate against a derived config (base, small, tiny, M1..M3)")
    sp.add_argument("--catalog", help="alternative catalog file")
    sp.add_argument("--all", action="store_true", help="include comparison-only plans")
    sp.set_defaults(func=cmd_plan)

    sp = sub.add_parser("export-dataset", help="write the toy dataset as a checkpoint container")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--classes", type=int, default=8)
    sp.add_argument("--samples", type=int, default=64)
    sp.add_argument("--size", type=int, default=16)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_export_dataset)
    return p


# config, checkpoint, plan, schedule and assembly errors all derive from ValueError
_VALIDATION_ERRORS = (ValueError, KeyError, OSError, I.InheritanceProtocolError)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "repeats", MIN_REPEATS) < MIN_REPEATS:
        parser.error(f"--repeats must be >= {MIN_REPEATS}")
    try:
        return args.func(args)
    except _VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
