"""Feature inheritance: skip plans, sampling modes, the feature store and the
forward-pass interception that reuses stored residual branches."""

import enum
import fnmatch
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import kernels as K
from . import unet as U
from .unet import SiteId

MIDDLE = "mid"


class PlanError(ValueError):
    pass


class InheritanceProtocolError(RuntimeError):
    """An INHERIT step found no usable stored residual."""


class Role(enum.Enum):
    FULL = "FULL"
    EXTRACT = "EXTRACT"
    INHERIT = "INHERIT"

    def __str__(self):
        return self.value


# -- plan catalog ---------------------------------------------------------------


@dataclass(frozen=True)
class SkipPlan:
    name: str
    sites: frozenset = frozenset()

    def __len__(self):
        return len(self.sites)

    def __contains__(self, site):
        return site in self.sites

    def sorted_sites(self):
        return sorted(self.sites)


@dataclass(frozen=True)
class PlanEntry:
    name: str
    description: str
    canonical: bool
    comparison: bool
    include: tuple
    exclude: tuple


_SELECTOR_KEYS = {"blocks", "layers", "units"}


def _parse_selector(plan, sel):
    if not isinstance(sel, dict) or "blocks" not in sel:
        raise PlanError(f"plan {plan}: each selector needs a 'blocks' list, got {sel!r}")
    extra = set(sel) - _SELECTOR_KEYS
    if extra:
        raise PlanError(f"plan {plan}: unknown selector keys {sorted(extra)}")
    blocks = sel["blocks"]
    if not isinstance(blocks, list) or not all(isinstance(b, str) for b in blocks):
        raise PlanError(f"plan {plan}: 'blocks' must be a list of names or globs")
    layers = sel.get("layers")
    if layers is not None and not (isinstance(layers, list) and all(isinstance(i, int) and i >= 0 for i in layers)):
        raise PlanError(f"plan {plan}: 'layers' must be a list of non-negative integers")
    units = sel.get("units")
    if units is not None and not (isinstance(units, list) and set(units) <= set(U.UNIT_KINDS)):
        raise PlanError(f"plan {plan}: 'units' must list RES and/or ATTN")
    return {"blocks": tuple(blocks),
            "layers": None if layers is None else tuple(layers),
            "units": None if units is None else tuple(units)}


def parse_catalog(doc):
    if not isinstance(doc, dict) or not isinstance(doc.get("plans"), dict):
        raise PlanError("plan catalog needs a top-level 'plans' mapping")
    catalog = {}
    for name, body in doc["plans"].items():
        name = str(name)
        if not isinstance(body, dict):
            raise PlanError(f"plan {name}: body must be a mapping")
        extra = set(body) - {"canonical", "comparison", "description", "include", "exclude"}
        if extra:
            raise PlanError(f"plan {name}: unknown keys {sorted(extra)}")
        inc = body.get("include") or []
        exc = body.get("exclude") or []
        if not isinstance(inc, list) or not isinstance(exc, list):
            raise PlanError(f"plan {name}: include/exclude must be lists")
        catalog[name] = PlanEntry(
            name, str(body.get("description", "")), bool(body.get("canonical", False)),
            bool(body.get("comparison", False)),
            tuple(_parse_selector(name, s) for s in inc),
            tuple(_parse_selector(name, s) for s in exc))
    return catalog


def load_catalog(path=None):
    if path is None:
        text = resources.files(__package__).joinpath("plans.yaml").read_text()
    else:
        text = Path(path).read_text()
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise PlanError(f"plan catalog is not valid YAML: {e}") from None
    return parse_catalog(doc)


_DEFAULT_CATALOG = None


def default_catalog():
    global _DEFAULT_CATALOG
    if _DEFAULT_CATALOG is None:
        _DEFAULT_CATALOG = load_catalog()
    return _DEFAULT_CATALOG


def catalog_names(catalog=None, include_comparison=False):
    catalog = catalog or default_catalog()
    return [n for n, e in catalog.items() if include_comparison or not e.comparison]


def _is_glob(pattern):
    return any(ch in pattern for ch in "*?[")


def _select(sel, plans):
    """Sites picked by one selector, plus the explicit references that failed."""
    by_name = {p.name: p for p in plans}
    picked, unresolved = set(), []
    blocks = []
    for pat in sel["blocks"]:
        if _is_glob(pat):
            blocks += [p for p in plans if p.name != MIDDLE and fnmatch.fnmatchcase(p.name, pat)]
        elif pat in by_name:
            blocks.append(by_name[pat])
        else:
            unresolved.append(pat)
    for plan in blocks:
        indices = [lp.index for lp in plan.layers]
        wanted = indices if sel["layers"] is None else sel["layers"]
        for i in wanted:
            if i not in indices:
                unresolved.append(f"{plan.name}.L{i}")
                continue
            lp = plan.layers[i]
            kinds = [U.RES] + ([U.ATTN] if lp.attention else [])
            for kind in kinds:
                if sel["units"] is None or kind in sel["units"]:
                    picked.add(SiteId(plan.name, i, kind))
    return picked, unresolved


def resolve_plan(name, config, catalog=None):
    """Return ``(SkipPlan, unresolved references)`` for ``name`` on ``config``."""
    catalog = catalog or default_catalog()
    if name not in catalog:
        raise PlanError(f"unknown plan {name!r}; valid names: {', '.join(catalog)}")
    entry = catalog[name]
    plans = U.layout(config)
    sites, unresolved = set(), []
    for sel in entry.include:
        s, u = _select(sel, plans)
        sites |= s
        unresolved += u
    for sel in entry.exclude:
        s, _ = _select(sel, plans)
        sites -= s
    return SkipPlan(name, frozenset(sites)), unresolved


def compile_plan(name, config, catalog=None):
    plan, unresolved = resolve_plan(name, config, catalog)
    if unresolved:
        raise PlanError(f"plan {name!r} does not resolve on this config: missing {', '.join(unresolved)}")
    return plan


def plan_from_sites(name, sites, config):
    """Ad-hoc plan from explicit site ids, validated against ``config``."""
    valid = set(U.unit_sites(config))
    sites = frozenset(SiteId.parse(s) if isinstance(s, str) else s for s in sites)
    bad = sorted(str(s) for s in sites - valid)
    if bad:
        raise PlanError(f"plan {name!r}: sites not in config: {', '.join(bad)}")
    return SkipPlan(name, sites)


# -- sampling modes ---------------------------------------------------------------


@dataclass(frozen=True)
class SamplingMode:
    period: int
    tail_full_steps: int
    total_steps: int
    roles: tuple

    def counts(self):
        return tuple(sum(r is role for r in self.roles) for role in (Role.EXTRACT, Role.INHERIT, Role.FULL))

    @property
    def name(self):
        return f"P{self.period}+{self.tail_full_steps}"


def make_mode(period, tail_full_steps, total_steps):
    for label, v in (("period", period), ("tail_full_steps", tail_full_steps), ("total_steps", total_steps)):
        if int(v) != v:
            raise ValueError(f"{label} must be an integer, got {v!r}")
    if period < 1:
        raise ValueError(f"period must be >= 1, got {period}")
    if tail_full_steps < 0 or total_steps < tail_full_steps:
        raise ValueError(f"need 0 <= tail_full_steps <= total_steps, got {tail_full_steps} and {total_steps}")
    prefix = total_steps - tail_full_steps
    roles = [Role.EXTRACT if i % period == 0 else Role.INHERIT for i in range(prefix)]
    roles += [Role.FULL] * tail_full_steps
    return SamplingMode(int(period), int(tail_full_steps), int(total_steps), tuple(roles))


DAGGER_TAIL = 10
_MODE_RE = re.compile(r"^[Pp](\d+)(?:(†|d|dag)|\+(\d+))?$")


def parse_mode(text, total_steps):
    """``P5`` (no tail), ``P5+10`` or ``P5†`` / ``P5d`` (last 10 steps full)."""
    m = _MODE_RE.match(text.strip())
    if not m:
        raise ValueError(f"bad sampling mode {text!r}; expected e.g. P5, P5+10 or P5d")
    period = int(m.group(1))
    tail = DAGGER_TAIL if m.group(2) else int(m.group(3) or 0)
    return make_mode(period, tail, total_steps)


# -- feature store and interception -------------------------------------------------------


@dataclass
class StoreEntry:
    step: int
    residual: np.ndarray


@dataclass
class FeatureStore:
    entries: dict = field(default_factory=dict)
    last_extract: int = None

    def begin_extract(self, step):
        self.last_extract = step

    def record(self, site, step, residual):
        self.entries[site] = StoreEntry(step, residual)

    def fetch(self, site):
        entry = self.entries.get(site)
        if entry is None:
            raise InheritanceProtocolError(f"INHERIT at {site} with no stored residual")
        if entry.step != self.last_extract:
            raise InheritanceProtocolError(
                f"stale residual at {site}: recorded at step {entry.step}, last EXTRACT was {self.last_extract}")
        return entry

    def clear(self):
        self.entries.clear()
        self.last_extract = None


class InheritanceTap(U.Tap):
    def __init__(self, plan, role, store, step, observer=None):
        self.plan, self.role, self.store, self.step = plan, role, store, step
        self.observer = observer

    def residual(self, site, identity, compute):
        if site not in self.plan.sites:
            return compute()
        if self.role is Role.INHERIT:
            return K.Tensor(self.store.fetch(site).residual)
        r = compute()
        if self.role is Role.EXTRACT:
            self.store.record(site, self.step, r.data)
        return r

    def unit_output(self, site, identity, residual, shortcut, out):
        if self.observer is not None:
            self.observer(site, identity, residual, shortcut, out)


def inherited_forward(unet, x_t, t, cond, plan, role, store, step=0, observer=None):
    """One forward under ``role``; plan sites record or reuse residual branches."""
    role = Role(role)
    bad = plan.sites - set(U.unit_sites(unet.config))
    if bad:
        raise PlanError(f"plan {plan.name!r} has sites outside this model: {sorted(map(str, bad))[:4]}")
    if role is Role.FULL and observer is None:
        return U.forward(unet, x_t, t, cond)
    if role is Role.INHERIT:
        missing = [s for s in plan.sites if s not in store.entries]
        if missing:
            raise InheritanceProtocolError(
                f"INHERIT at step {step} but {len(missing)} plan sites were never stored, e.g. {min(missing)}")
    if role is Role.EXTRACT:
        store.begin_extract(step)
    tap = InheritanceTap(plan, role, store, step, observer)
    return U.forward(unet, x_t, t, cond, tap=tap)


class InheritanceContext:
    """Drives inherited forwards across a sampling run, one store per model.

    ``plans`` is a catalog name, a SkipPlan, or a mapping model_id -> either.
    Names compile lazily against each model's config.
    """

    def __init__(self, plans, mode, catalog=None, observer=None):
        self.plans, self.mode, self.catalog = plans, mode, catalog
        self.observer = observer
        self.stores = {}
        self._compiled = {}

    def begin(self, steps):
        if steps != self.mode.total_steps:
            raise ValueError(f"mode covers {self.mode.total_steps} steps but sampler runs {steps}")
        self.stores = {}

    def plan_for(self, model_id, unet):
        if model_id not in self._compiled:
            spec = self.plans[model_id] if isinstance(self.plans, dict) else self.plans
            if isinstance(spec, SkipPlan):
                plan = spec
            else:
                plan = compile_plan(spec, unet.config, self.catalog)
            self._compiled[model_id] = plan
        return self._compiled[model_id]

    def role(self, step):
        return self.mode.roles[step]

    def forward(self, model_id, unet, x, t, cond, step):
        role = self.mode.roles[step]
        store = self.stores.setdefault(model_id, FeatureStore())
        out = inherited_forward(unet, x, t, cond, self.plan_for(model_id, unet), role, store, step,
                                self.observer)
        return out, role.value


# -- analytic cost ------------------------------------------------------------------------


def flop_estimate(config, plan, mode, batch=1):
    """Per-step MACs under ``mode`` and the fraction saved over the whole run."""
    bad = plan.sites - set(U.unit_sites(config))
    if bad:
        raise PlanError(f"plan {plan.name!r} does not resolve on this config")
    census = U.cost_census(config, batch)
    full = census.total
    skipped = sum(census.residual[s] for s in plan.sites)
    per_step = np.array([full - skipped if r is Role.INHERIT else full for r in mode.roles], dtype=np.int64)
    baseline = full * mode.total_steps
    saved = float(baseline - per_step.sum()) / baseline if baseline else 0.0
    return per_step, saved
