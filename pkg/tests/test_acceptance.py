"""Acceptance suite: one test per criterion; conftest prints a PASS/FAIL line for each.

Timing criteria run single-threaded (threadpoolctl) with warm-up runs excluded and medians taken.
"""

import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from deskdiff import assembly as A
from deskdiff import checkpoint as C
from deskdiff import cli
from deskdiff import condconv as CC
from deskdiff import inherit as I
from deskdiff import kernels as K
from deskdiff import sampler as S
from deskdiff import unet as U
from deskdiff.inherit import Role
from deskdiff.unet import ATTN, BlockSpec

STEPS = 50
SEEDS = range(5)


def crit(number, title):
    return pytest.mark.criterion(number, title)


@pytest.fixture(scope="module")
def sched():
    return S.make_schedule()


@pytest.fixture(scope="module")
def data():
    return A.make_toy_dataset(0, 8, 72).split(8)


@pytest.fixture(scope="module")
def teacher(sched, data):
    """Standard toy teacher, briefly trained on the toy dataset so sampling is non-trivial."""
    net = U.build_unet(U.standard_config(), seed=0, zero_out=False)
    pre = cli.DEFAULTS["pretrain"]
    A.distill(None, net, data[0], sched, A.DistillConfig(lr=pre["lr"], batch_size=pre["batch_size"],
                                                         iterations=200, seed=1))
    return net


def run(net, sched, seed, plan=None, mode=None, trace=None, steps=STEPS):
    ctx = None if plan is None else I.InheritanceContext(plan, mode)
    return S.sample({"m": net}, S.SwitchPolicy.single("m", steps), sched, steps, [seed % 8], seed,
                    inherit_ctx=ctx, trace=trace)


# -- 1 -------------------------------------------------------------------------------


@crit(1, "inherited unit output minus shortcut equals the stored residual, every plan")
def test_c1_inherit_exactness(teacher, record_property):
    start = time.perf_counter()
    net = teacher
    rng = np.random.default_rng(11)
    checked = literal_ok = additive_ok = stored_ok = sites_seen = 0
    names = I.catalog_names(include_comparison=True)
    for name in names:
        plan = I.compile_plan(name, net.config)
        if not plan.sites:
            continue
        store = I.FeatureStore()
        step = 0
        for k in range(20):
            if k % 5 == 0:
                x = rng.standard_normal((1, 4, 16, 16)).astype(np.float32)
                I.inherited_forward(net, x, int(rng.integers(0, 1000)), net.embed_condition([k % 8]), plan,
                                    Role.EXTRACT, store, step)
                step += 1
            x = rng.standard_normal((1, 4, 16, 16)).astype(np.float32)
            seen = []

            def obs(site, ident, r, s, out):
                if site not in plan.sites:
                    return
                if site.unit == ATTN:
                    shortcut = ident.data
                else:
                    with K.no_grad():
                        shortcut = U.res_shortcut(net.view(f"{site.block}.L{site.layer}.res"), ident).data
                seen.append((store.entries[site].residual, r.data, shortcut, out.data))

            I.inherited_forward(net, x, int(rng.integers(0, 1000)), net.embed_condition([k % 8]), plan,
                                Role.INHERIT, store, step, obs)
            step += 1
            assert len(seen) == len(plan.sites)
            for stored, used, shortcut, out in seen:
                sites_seen += 1
                checked += stored.size
                literal_ok += int(np.count_nonzero(out - shortcut == stored))
                additive_ok += int(np.array_equal(out, np.add(stored, shortcut)))
                stored_ok += int(np.array_equal(used, stored))
    elapsed = time.perf_counter() - start
    frac = literal_ok / checked
    detail = (f"out-shortcut bit-equal to stored on {frac:.4%} of {checked} elements; "
              f"out == fl32(stored+shortcut) at {additive_ok}/{sites_seen} sites; "
              f"stored tensor reused verbatim at {stored_ok}/{sites_seen}; {elapsed:.0f}s")
    record_property("detail", detail)
    assert stored_ok == sites_seen and additive_ok == sites_seen
    assert elapsed < 60
    assert literal_ok == checked, detail


# -- 2 -------------------------------------------------------------------------------


@crit(2, "no-op equivalence: plan none and period 1 match the baseline sampler")
def test_c2_noop_equivalence(teacher, sched, record_property):
    start = time.perf_counter()
    plans = ["CO6", "LI1", "AI", "EX1", "IN3"]
    equal = 0
    for seed in SEEDS:
        base = run(teacher, sched, seed)
        a = run(teacher, sched, seed, "none", I.make_mode(5, 10, STEPS))
        b = run(teacher, sched, seed, plans[seed], I.make_mode(1, 0, STEPS))
        equal += int(np.array_equal(a, base)) + int(np.array_equal(b, base))
    elapsed = time.perf_counter() - start
    record_property("detail", f"{equal}/10 trajectories bit-identical; {elapsed:.0f}s")
    assert equal == 10 and elapsed < 120


# -- 3 -------------------------------------------------------------------------------


@crit(3, "mode census")
def test_c3_mode_census(record_property):
    p5, p2 = I.parse_mode("P5†", STEPS).counts(), I.parse_mode("P2†", STEPS).counts()
    record_property("detail", f"P5† {p5}, P2† {p2}")
    assert p5 == (8, 32, 10) and p2 == (20, 20, 10)


# -- 4 -------------------------------------------------------------------------------


def per_step_ms(models, repeats=21, warmup=3):
    x = np.random.default_rng(0).standard_normal((2, 4, 16, 16)).astype(np.float32)
    times = {k: [] for k in models}
    conds = {k: m.embed_condition([0, m.null_class]) for k, m in models.items()}
    with threadpool_limits(1), K.no_grad():
        for i in range(warmup + repeats):
            for k, m in models.items():   # interleaved so drift hits every model alike
                t0 = time.perf_counter_ns()
                U.forward(m, x, 500, conds[k])
                if i >= warmup:
                    times[k].append(time.perf_counter_ns() - t0)
    return {k: np.median(v) / 1e6 for k, v in times.items()}


def step_macs(config):
    per_step, _ = I.flop_estimate(config, I.SkipPlan("none"), I.make_mode(1, 0, 1), batch=2)
    return int(per_step[0])


@crit(4, "speed ordering tiny < small < base < M2 < standard; M2/standard vs MAC ratio")
def test_c4_structural_speed(teacher, record_property):
    start = time.perf_counter()
    kinds = ["tiny", "small", "base", "M2", "standard"]
    models = {k: A.build_kind(k, teacher) for k in kinds}
    ms = per_step_ms(models)
    measured = ms["M2"] / ms["standard"]
    predicted = step_macs(models["M2"].config) / step_macs(models["standard"].config)
    elapsed = time.perf_counter() - start
    order = all(ms[a] < ms[b] for a, b in zip(kinds, kinds[1:]))
    record_property("detail", ", ".join(f"{k} {ms[k]:.1f}ms" for k in kinds)
                    + f"; M2/std {measured:.3f} vs MAC {predicted:.3f}; {elapsed:.0f}s")
    assert order and abs(measured - predicted) <= 0.10 and elapsed < 300


# -- 5 -------------------------------------------------------------------------------


@crit(5, "CO6 under P5† saves wall time in line with flop_estimate")
def test_c5_inheritance_speedup(teacher, sched, record_property):
    start = time.perf_counter()
    mode = I.parse_mode("P5†", STEPS)

    def total_ns(plan):
        trace = S.SampleTrace()
        run(teacher, sched, 0, plan, mode if plan else None, trace)
        return int(trace.forward_ns.sum())

    base, co6 = [], []
    with threadpool_limits(1):
        total_ns(None), total_ns("CO6")   # warm-up
        for _ in range(5):
            base.append(total_ns(None))
            co6.append(total_ns("CO6"))
    measured = 1.0 - np.median(co6) / np.median(base)
    _, predicted = I.flop_estimate(teacher.config, I.compile_plan("CO6", teacher.config), mode, batch=2)
    elapsed = time.perf_counter() - start
    record_property("detail", f"measured {measured:.3f} vs predicted {predicted:.3f} "
                              f"(baseline {np.median(base) / 1e9:.2f}s); {elapsed:.0f}s")
    assert measured > 0 and abs(measured - predicted) <= 0.10 and elapsed < 300


# -- 6 -------------------------------------------------------------------------------


@crit(6, "ME-CondConv degeneracy, linearity and neutral upgrade")
def test_c6_condconv(teacher, record_property):
    start = time.perf_counter()
    rng = np.random.default_rng(6)
    # single expert, route forced to 1
    bank = CC.ExpertBank(rng.standard_normal((1, 5, 3, 3, 3)).astype(np.float32),
                         rng.standard_normal((1, 5)).astype(np.float32),
                         rng.standard_normal((3, 1)).astype(np.float32))
    bank.router_bias = K.Tensor(np.full(1, 40.0, np.float32))
    x = rng.standard_normal((2, 3, 9, 9)).astype(np.float32)
    single = np.abs(CC.me_cond_conv(x, bank).data
                    - K.conv2d(x, bank.kernels.data[0], bank.biases.data[0], pad=1).data).max()
    worst = 0.0
    for _ in range(100):
        e, c, o, h = (int(v) for v in rng.integers(1, 5, size=4))
        h += 2
        stride = int(rng.integers(1, 3))
        bank = CC.ExpertBank(rng.standard_normal((e, o, c, 3, 3)).astype(np.float32),
                             rng.standard_normal((e, o)).astype(np.float32),
                             rng.standard_normal((c, e)).astype(np.float32))
        x = rng.standard_normal((2, c, h, h)).astype(np.float32)
        r = CC.route(x, bank).data.astype(np.float64)
        y = CC.me_cond_conv(x, bank, stride=stride).data
        x64 = x.astype(np.float64)
        for n in range(2):
            ref = sum(r[n, i] * K.conv2d(x64[n:n + 1], bank.kernels.data[i].astype(np.float64),
                                         bank.biases.data[i].astype(np.float64), stride=stride, pad=1).data[0]
                      for i in range(e))
            worst = max(worst, float(np.abs(y[n] - ref).max()))
    up = CC.upgrade_model(teacher, n_experts=2, seed=5)
    for name, p in up.params.items():
        if name.endswith((".experts.w", ".experts.b")):
            p.data[1:] = 0
        elif name.endswith(".router.w"):
            p.data[:] = 0
        elif name.endswith(".router.b"):
            p.data[:] = np.array([40.0, -40.0], np.float32)
    xs = rng.standard_normal((2, 4, 16, 16)).astype(np.float32)
    with K.no_grad():
        same = np.array_equal(U.forward(teacher, xs, 321, teacher.embed_condition([2, 8])).data,
                              U.forward(up, xs, 321, up.embed_condition([2, 8])).data)
    elapsed = time.perf_counter() - start
    record_property("detail", f"single-expert err {single:.2e}, linearity worst {worst:.2e}, "
                              f"neutral upgrade bit-identical={same}; {elapsed:.0f}s")
    assert single <= 1e-6 and worst <= 1e-5 and same and elapsed < 60


# -- 7, 8 ----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def pipeline(teacher, sched, data):
    """Step 1 distils a Base student; step 2 assembles M2 and distils it with the deep part frozen."""
    train, hold = data
    held = A.draw_batch(hold.latents, hold.class_ids, sched, np.random.default_rng(123))
    t0 = time.perf_counter()
    base = A.init_student_from_teacher(A.compress_config("base", teacher.config), teacher).unet
    initial = A.evaluate_losses(teacher, base, held, sched)
    A.distill(teacher, base, train, sched, A.DistillConfig(seed=2))
    m2 = A.assemble(base, teacher, A.get_scheme("M2"))
    before = {n: p.data.copy() for n, p in m2.params.items()}
    t1 = time.perf_counter()
    A.distill(teacher, m2, train, sched, A.DistillConfig(seed=3))
    t2 = time.perf_counter()
    final = A.evaluate_losses(teacher, m2, held, sched)
    return dict(held=held, initial=initial, final=final, m2=m2, before=before,
                stage2_s=t2 - t1, total_s=t2 - t0)


@crit(7, "freeze contract after 200 M2 distill steps")
def test_c7_freeze_contract(pipeline, record_property):
    m2, before = pipeline["m2"], pipeline["before"]
    frozen_same = sum(np.array_equal(m2[n].data, before[n]) for n in m2.freeze_mask)
    trainable = m2.trainable_names()
    changed = sum(not np.array_equal(m2[n].data, before[n]) for n in trainable)
    record_property("detail", f"frozen unchanged {frozen_same}/{len(m2.freeze_mask)}, "
                              f"trainable changed {changed}/{len(trainable)}; {pipeline['stage2_s']:.0f}s")
    assert frozen_same == len(m2.freeze_mask) and changed == len(trainable)
    assert pipeline["stage2_s"] < 300


@crit(8, "two-stage distillation halves held-out loss; self-distillation is exactly zero")
def test_c8_distillation(pipeline, teacher, sched, record_property):
    init, final = pipeline["initial"], pipeline["final"]
    selfd = A.evaluate_losses(teacher, teacher.clone(), pipeline["held"], sched)
    record_property("detail", f"combined loss {init.total:.3f} -> {final.total:.3f} "
                              f"(ratio {final.total / init.total:.3f}); self KD {selfd.kd}, featKD {selfd.feat}; "
                              f"{pipeline['total_s']:.0f}s")
    assert final.total < 0.5 * init.total
    assert selfd.kd == 0.0 and selfd.feat == 0.0
    assert pipeline["total_s"] < 900


# -- 9 -------------------------------------------------------------------------------


@crit(9, "analytic gradients of a 2-depth UNet vs finite differences")
def test_c9_gradients(record_property):
    start = time.perf_counter()
    cfg = U.UNetConfig(down_blocks=(BlockSpec("dn0", 1, True, "down"), BlockSpec("dn1", 1, False, "none")),
                       up_blocks=(BlockSpec("up0", 2, False, "up"), BlockSpec("up1", 2, True, "none")),
                       base_channels=(8, 16), time_embed_dim=16, cond_dim=8, norm_groups=4, sample_size=8)
    net = U.build_unet(cfg, seed=4, zero_out=False).astype(np.float64)
    rng = np.random.default_rng(9)
    x = rng.standard_normal((2, 4, 8, 8))
    eps = rng.standard_normal((2, 4, 8, 8))
    t = np.array([100, 700])

    def loss():
        return K.mse(U.forward(net, x, t, net.embed_condition([1, net.null_class])), eps)

    names = sorted(net.params)
    for n in names:
        net[n].requires_grad = True
        net[n].grad = None
    loss().backward()
    sizes = np.array([net[n].data.size for n in names])
    flat = rng.choice(sizes.sum(), size=50, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    h, worst = 1e-5, 0.0
    with K.no_grad():
        for f in flat:
            i = int(np.searchsorted(offsets, f, side="right") - 1)
            p = net[names[i]]
            j = int(f - offsets[i])
            view = p.data.reshape(-1)
            old = view[j]
            view[j] = old + h
            up = float(loss().data)
            view[j] = old - h
            down = float(loss().data)
            view[j] = old
            num = (up - down) / (2 * h)
            ana = float(p.grad.reshape(-1)[j])
            # relative error, with an absolute floor for gradients that are numerically zero
            worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-8))
    elapsed = time.perf_counter() - start
    record_property("detail", f"worst relative error {worst:.2e} over 50 probes; {elapsed:.0f}s")
    assert worst <= 1e-2 and elapsed < 300


# -- 10 ------------------------------------------------------------------------------


@crit(10, "CO6 deviation non-decreasing over periods 2,5,8,10,15")
def test_c10_period_sweep(teacher, sched, record_property):
    start = time.perf_counter()
    monotone, rows = 0, []
    for seed in SEEDS:
        base = run(teacher, sched, seed).astype(np.float64)
        devs = [float(np.mean((run(teacher, sched, seed, "CO6", I.make_mode(p, 0, STEPS)) - base) ** 2))
                for p in cli.PERIOD_SWEEP]
        monotone += int(all(b >= a for a, b in zip(devs, devs[1:])))
        rows.append("/".join(f"{d:.3g}" for d in devs))
    elapsed = time.perf_counter() - start
    record_property("detail", f"{monotone}/5 seeds monotone [{'; '.join(rows)}]; {elapsed:.0f}s")
    assert monotone >= 4 and elapsed < 600


# -- 11 ------------------------------------------------------------------------------


@crit(11, "schedule algebra and reconstruction")
def test_c11_schedule(record_property):
    start = time.perf_counter()
    s = S.make_schedule()
    prod = np.cumprod(1.0 - s.beta)
    cum_err = float(np.max(np.abs(s.alpha_bar - prod) / prod))
    mono = bool(np.all(np.diff(s.alpha_bar) < 0) and np.all(s.alpha == 1.0 - s.beta))
    rng = np.random.default_rng(0)
    worst = 0.0
    for t in range(s.T):
        x0 = rng.standard_normal((2, 4, 4, 4))
        eps = rng.standard_normal((2, 4, 4, 4))
        x_t = S.add_noise(x0, t, eps, s)
        ab = s.alpha_bar[t]
        worst = max(worst, float(np.abs((x_t - np.sqrt(1 - ab) * eps) / np.sqrt(ab) - x0).max()))
    one = S.schedule_from_betas([s.beta[0]])
    x0 = rng.standard_normal((2, 4, 4, 4))
    eps = rng.standard_normal((2, 4, 4, 4))
    worst = max(worst, float(np.abs(S.denoise_step(eps, S.add_noise(x0, 0, eps, one), 0, one) - x0).max()))
    elapsed = time.perf_counter() - start
    record_property("detail", f"cumprod rel err {cum_err:.1e}, monotone {mono}, reconstruction {worst:.1e}; "
                              f"{elapsed:.1f}s")
    assert cum_err <= 1e-12 and mono and worst <= 1e-5 and elapsed < 10


# -- 12 ------------------------------------------------------------------------------


@crit(12, "checkpoint round trip for all model kinds")
def test_c12_checkpoints(teacher, tmp_path, record_property):
    start = time.perf_counter()
    exact = []
    for kind in A.MODEL_KINDS:
        m = A.build_kind(kind, teacher)
        C.save_model(tmp_path / f"{kind}.asdm", m, {"kind": kind})
        back = C.load_model(tmp_path / f"{kind}.asdm")
        ok = (back.config == m.config and back.freeze_mask == m.freeze_mask and set(back.params) == set(m.params)
              and all(back[n].data.tobytes() == p.data.tobytes() for n, p in m.params.items()))
        if ok:
            exact.append(kind)
    elapsed = time.perf_counter() - start
    record_property("detail", f"{len(exact)}/{len(A.MODEL_KINDS)} kinds bit-exact; {elapsed:.0f}s")
    assert len(exact) == len(A.MODEL_KINDS) and elapsed < 60
