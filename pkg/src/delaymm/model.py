"""Problem configuration: loading, records, and hypothesis validation.

A configuration is INI-style text with ``[model]``, ``[numerics]`` and an
optional ``[run]`` section.  Rates and data are expressions in ``x``, ``a``
and ``t`` (see :mod:`delaymm.expr`).  ``rho_I = well_prepared`` selects the
limit profile rho_0(x, a, 0) as initial density.

The time step is never read: it is always ``epsilon * delta_a``.
"""
from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.optimize import brentq

from .expr import ExprError, RateExpr, eval_expr, parse_rate_expression
from .grids import Grids, age_cell_count, step_count

WELL_PREPARED = "well_prepared"
UNIT_NORM_TOL = 1e-9
SAMPLING_FACTOR = 4


class ConfigError(ValueError):
    pass


class HypothesisError(ValueError):
    def __init__(self, report):
        failed = "; ".join(f"{c.name} violated ({c.detail})" for c in report.failures)
        super().__init__(failed)
        self.report = report


@dataclass(frozen=True)
class Bounds:
    beta_min: float
    beta_max: float
    zeta_min: float
    zeta_max: float
    M: float
    mu_I_min: float
    mu0_min: float


@dataclass(frozen=True)
class ModelProblem:
    beta: RateExpr
    zeta: RateExpr
    beta0: RateExpr
    zeta0: RateExpr
    rho_I: Optional[RateExpr]  # None: well-prepared, rho_I = rho_0(., ., 0)
    z_p: tuple
    d: int
    epsilon: float
    T: float
    bounds: Bounds

    @property
    def well_prepared(self) -> bool:
        return self.rho_I is None

    @property
    def constant_rates(self) -> bool:
        return all(e.is_constant for e in (self.beta, self.zeta, self.beta0, self.zeta0))


def tail_bound(A: float, b: Bounds) -> float:
    """Exponential bound on the density mass beyond age A."""
    return b.beta_max * (1.0 + A) * math.exp(-b.zeta_min * A) / b.zeta_min


def age_horizon(tol_age: float, b: Bounds) -> float:
    """Smallest A on the decreasing branch of ``tail_bound`` below ``tol_age``."""
    start = max(0.0, 1.0 / b.zeta_min - 1.0)
    if tail_bound(start, b) < tol_age:
        return start
    hi = start + 1.0
    while tail_bound(hi, b) >= tol_age:
        hi *= 2.0
    return brentq(lambda A: tail_bound(A, b) - tol_age, start, hi, xtol=1e-12)


@dataclass(frozen=True)
class NumericsParams:
    delta_a: float
    Nx: int
    A_max: float
    tol_age: float
    epsilon: float
    tol_grad: float = 1e-10
    max_inner: int = 10000
    limit_dt_safety: float = 0.9
    inner_method: str = "preconditioned"
    armijo_c: float = 1e-4
    backtrack: float = 0.5

    @property
    def delta_x(self) -> float:
        return 1.0 / (self.Nx - 1)

    @property
    def delta_t(self) -> float:
        return self.epsilon * self.delta_a

    @property
    def J_max(self) -> int:
        return age_cell_count(self.A_max, self.delta_a)


def make_grids(p: ModelProblem, n: NumericsParams) -> Grids:
    return Grids(Nx=n.Nx, delta_a=n.delta_a, A_max=n.A_max, epsilon=p.epsilon, T=p.T)


def with_epsilon(p: ModelProblem, n: NumericsParams, epsilon: float, delta_a=None):
    """Copies of the records at a new eps (and optionally a new age step)."""
    p2 = replace(p, epsilon=epsilon)
    n2 = replace(n, epsilon=epsilon, delta_a=n.delta_a if delta_a is None else delta_a)
    return p2, n2


# --- loading -----------------------------------------------------------------

_MODEL_KEYS = ("beta", "zeta", "beta0", "zeta0", "rho_I", "d", "epsilon", "T", "bounds")
_BOUND_KEYS = ("beta_min", "beta_max", "zeta_min", "zeta_max", "M", "mu_I_min", "mu0_min")


@dataclass
class RunSettings:
    values: dict = field(default_factory=dict)

    def get(self, key, default=None):
        return self.values.get(key, default)

    def floats(self, key, default=None):
        raw = self.values.get(key)
        if raw is None:
            return default
        return [float(v) for v in raw.split(",") if v.strip()]

    def float(self, key, default=None):
        raw = self.values.get(key)
        return default if raw is None else float(raw)


def _expr(section, key):
    try:
        return parse_rate_expression(section[key])
    except ExprError as exc:
        raise ConfigError(f"[{section.name}] {key}: {exc}") from exc


def _parse_bounds(text: str) -> Bounds:
    vals = {}
    for item in text.split(","):
        if not item.strip():
            continue
        if "=" not in item:
            raise ConfigError(f"bounds entry {item.strip()!r} is not name=value")
        k, v = (s.strip() for s in item.split("=", 1))
        if k in vals:
            raise ConfigError(f"duplicate key bounds.{k}")
        if k not in _BOUND_KEYS:
            raise ConfigError(f"unknown key bounds.{k}")
        vals[k] = float(v)
    missing = [k for k in _BOUND_KEYS if k not in vals]
    if missing:
        raise ConfigError(f"missing key bounds.{missing[0]}")
    return Bounds(**vals)


def parse_config(text: str):
    """Parse config text into (ModelProblem, NumericsParams, RunSettings) without validation."""
    cp = configparser.ConfigParser(
        strict=True, interpolation=None, comment_prefixes=("#",), inline_comment_prefixes=("#",)
    )
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"duplicate key {exc.option!r} in [{exc.section}]") from exc
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"duplicate section [{exc.section}]") from exc
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc

    for sec in cp.sections():
        if "delta_t" in cp[sec]:
            raise ConfigError("delta_t is derived by CFL (delta_t = epsilon * delta_a); remove it")
    for sec in ("model", "numerics"):
        if sec not in cp:
            raise ConfigError(f"missing section [{sec}]")
    m = cp["model"]
    for key in _MODEL_KEYS:
        if key not in m:
            raise ConfigError(f"missing key model.{key}")
    d = int(m["d"])
    if d < 2:
        raise ConfigError("d must be an integer >= 2")
    zp = []
    for i in range(1, d + 1):
        if f"zp_{i}" not in m:
            raise ConfigError(f"missing key model.zp_{i}")
        zp.append(_expr(m, f"zp_{i}"))
    if f"zp_{d + 1}" in m:
        raise ConfigError(f"model.zp_{d + 1} given but d = {d}")
    rho_I = None if m["rho_I"].strip() == WELL_PREPARED else _expr(m, "rho_I")
    bounds = _parse_bounds(m["bounds"])
    epsilon = float(m["epsilon"])
    T = float(m["T"])
    if not epsilon > 0 or not T > 0:
        raise ConfigError("epsilon and T must be positive")
    problem = ModelProblem(
        beta=_expr(m, "beta"),
        zeta=_expr(m, "zeta"),
        beta0=_expr(m, "beta0"),
        zeta0=_expr(m, "zeta0"),
        rho_I=rho_I,
        z_p=tuple(zp),
        d=d,
        epsilon=epsilon,
        T=T,
        bounds=bounds,
    )

    nm = cp["numerics"]
    for key in ("delta_a", "Nx"):
        if key not in nm:
            raise ConfigError(f"missing key numerics.{key}")
    if "A_max" not in nm and "tol_age" not in nm:
        raise ConfigError("missing key numerics.A_max or numerics.tol_age")
    delta_a = float(nm["delta_a"])
    if not delta_a > 0:
        raise ConfigError("delta_a must be positive")
    if "A_max" in nm:
        A_max = float(nm["A_max"])
        tol_age = float(nm["tol_age"]) if "tol_age" in nm else tail_bound(A_max, bounds) * (1 + 1e-9)
    else:
        tol_age = float(nm["tol_age"])
        A_max = age_horizon(tol_age, bounds)
    known = {"delta_a", "Nx", "A_max", "tol_age", "tol_grad", "max_inner", "limit_dt_safety",
             "inner_method", "armijo_c", "backtrack"}
    extra = set(nm) - known
    if extra:
        raise ConfigError(f"unknown key numerics.{sorted(extra)[0]}")
    numerics = NumericsParams(
        delta_a=delta_a,
        Nx=int(nm["Nx"]),
        A_max=A_max,
        tol_age=tol_age,
        epsilon=epsilon,
        tol_grad=float(nm.get("tol_grad", 1e-10)),
        max_inner=int(nm.get("max_inner", 10000)),
        limit_dt_safety=float(nm.get("limit_dt_safety", 0.9)),
        inner_method=nm.get("inner_method", "preconditioned"),
        armijo_c=float(nm.get("armijo_c", 1e-4)),
        backtrack=float(nm.get("backtrack", 0.5)),
    )
    if numerics.Nx < 2:
        raise ConfigError("Nx must be at least 2")
    run = RunSettings(dict(cp["run"]) if "run" in cp else {})
    return problem, numerics, run


def load_problem(config: str, validate: bool = True):
    """Parse and (by default) validate; returns (problem, numerics, run settings).

    Raises ConfigError for format problems and HypothesisError when a
    standing hypothesis fails on the sampling grid.
    """
    p, n, run = parse_config(config)
    if validate:
        validate_hypotheses(p, n).raise_if_failed()
    return p, n, run


# --- validation --------------------------------------------------------------


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class ValidationReport:
    checks: list = field(default_factory=list)
    mu_I: Optional[np.ndarray] = None
    x_samples: Optional[np.ndarray] = None
    C_zp: Optional[np.ndarray] = None
    C_zp_l2: float = float("nan")
    rho_I_bv: float = float("nan")
    A_max: float = float("nan")
    J_max: int = 0

    def add(self, name, passed, detail=""):
        self.checks.append(Check(name, bool(passed), detail))

    @property
    def failures(self):
        return [c for c in self.checks if not c.passed]

    @property
    def ok(self) -> bool:
        return not self.failures

    def raise_if_failed(self):
        if not self.ok:
            raise HypothesisError(self)
        return self

    def as_dict(self):
        return {
            "ok": self.ok,
            "checks": [{"name": c.name, "passed": c.passed, "detail": c.detail} for c in self.checks],
            "mu_I_min": float(np.min(self.mu_I)) if self.mu_I is not None else None,
            "C_zp_l2": self.C_zp_l2,
            "rho_I_bv": self.rho_I_bv,
            "A_max": self.A_max,
            "J_max": self.J_max,
        }


def _extremes(expr, x, a, t_values):
    """(min, argmin-desc, max, argmax-desc) of ``expr`` over the tensor grid."""
    lo, hi = math.inf, -math.inf
    lo_at = hi_at = ""
    for t in t_values:
        v = np.asarray(eval_expr(expr, x, a, t), dtype=float)
        vb = np.broadcast_to(v, np.broadcast_shapes(v.shape, np.shape(x), np.shape(a)))
        i_lo, i_hi = np.unravel_index(np.argmin(vb), vb.shape), np.unravel_index(np.argmax(vb), vb.shape)
        if vb[i_lo] < lo:
            lo, lo_at = float(vb[i_lo]), _where(x, a, t, i_lo)
        if vb[i_hi] > hi:
            hi, hi_at = float(vb[i_hi]), _where(x, a, t, i_hi)
    return lo, lo_at, hi, hi_at


def _where(x, a, t, idx):
    shape = np.broadcast_shapes(np.shape(x), np.shape(a))
    xs = np.broadcast_to(x, shape)[idx] if shape else x
    as_ = np.broadcast_to(a, shape)[idx] if shape else a
    return f"x={float(xs):.6g}, a={float(as_):.6g}, t={float(t):.6g}"


def initial_density_sampler(p: ModelProblem):
    """Callable (x_1d, a_1d) -> rho_I on the (a, x) tensor grid, untruncated."""
    if p.rho_I is not None:
        def sample(x, a):
            v = eval_expr(p.rho_I, x[None, :], a[:, None], 0.0)
            return np.broadcast_to(v, (a.size, x.size)).astype(float)
        return sample

    from .limit_density import rho0_slice

    def sample(x, a):
        # the limit profile needs its age grid anchored at 0
        a = np.asarray(a, dtype=float)
        grid = np.union1d(a, np.linspace(0.0, a.max(), 4 * a.size + 1))
        vals = rho0_slice(p.beta0, p.zeta0, x, grid, 0.0).rho0
        return vals[np.searchsorted(grid, a)]
    return sample


def validate_hypotheses(p: ModelProblem, n: NumericsParams) -> ValidationReport:
    """Check the standing hypotheses on a grid 4x finer than (delta_x, delta_a)."""
    rep = ValidationReport()
    b = p.bounds
    J_max = n.J_max
    rep.A_max, rep.J_max = n.A_max, J_max
    x = np.linspace(0.0, 1.0, SAMPLING_FACTOR * (n.Nx - 1) + 1)
    rep.x_samples = x
    h_a = n.delta_a / SAMPLING_FACTOR
    a = np.arange(0.0, n.A_max + 0.5 * h_a, h_a)
    t = np.linspace(0.0, p.T, 129)

    rep.add("epsilon>0", p.epsilon > 0, f"epsilon={p.epsilon}")
    rep.add("T>0", p.T > 0, f"T={p.T}")
    rep.add("d>=2", p.d >= 2 and len(p.z_p) == p.d, f"d={p.d}, components={len(p.z_p)}")
    rep.add("J_max>=2", J_max >= 2, f"J_max={J_max}")
    rep.add("delta_t=epsilon*delta_a", n.epsilon == p.epsilon, "numerics built for a different epsilon")

    # Hypotheses 1(ii): rate bounds
    rep.add("beta_min>0", b.beta_min > 0, f"beta_min={b.beta_min}")
    rep.add("beta_min<=beta_max", b.beta_min <= b.beta_max, f"{b.beta_min} > {b.beta_max}")
    rep.add("zeta_min>0", b.zeta_min > 0, f"zeta_min={b.zeta_min}")
    rep.add("zeta_min<=zeta_max", b.zeta_min <= b.zeta_max, f"{b.zeta_min} > {b.zeta_max}")
    for name, expr in (("beta", p.beta), ("beta0", p.beta0)):
        lo, lo_at, hi, hi_at = _extremes(expr, x, 0.0, t)
        if lo <= 0:
            rep.add("beta_min>0", False, f"{name}={lo:.6g} at {lo_at}")
        rep.add(f"{name} in [beta_min, beta_max]",
                lo >= b.beta_min * (1 - 1e-12) and hi <= b.beta_max * (1 + 1e-12),
                f"range [{lo:.6g}, {hi:.6g}], worst at {lo_at if lo < b.beta_min else hi_at}")
    for name, expr in (("zeta", p.zeta), ("zeta0", p.zeta0)):
        lo, lo_at, hi, hi_at = _extremes(expr, x[:, None].T, a[:, None], t)
        if lo <= 0:
            rep.add("zeta_min>0", False, f"{name}={lo:.6g} at {lo_at}")
        rep.add(f"{name} in [zeta_min, zeta_max]",
                lo >= b.zeta_min * (1 - 1e-12) and hi <= b.zeta_max * (1 + 1e-12),
                f"range [{lo:.6g}, {hi:.6g}], worst at {lo_at if lo < b.zeta_min else hi_at}")

    # Hypotheses 2: initial density
    rep.add("M>beta_max", b.M > b.beta_max, f"M={b.M}, beta_max={b.beta_max}")
    sample = initial_density_sampler(p)
    rho = sample(x, a)
    k_lo = np.unravel_index(np.argmin(rho), rho.shape)
    k_hi = np.unravel_index(np.argmax(rho), rho.shape)
    rep.add("rho_I>=0", rho[k_lo] >= 0, f"min {rho[k_lo]:.6g} at x={x[k_lo[1]]:.6g}, a={a[k_lo[0]]:.6g}")
    rep.add("rho_I<=M", rho[k_hi] <= b.M, f"max {rho[k_hi]:.6g} at x={x[k_hi[1]]:.6g}, a={a[k_hi[0]]:.6g}")
    mu_I = np.trapezoid(rho, a, axis=0)
    rep.mu_I = mu_I
    k = int(np.argmin(mu_I))
    rep.add("0<mu_I<1", np.all(mu_I > 0) and np.all(mu_I < 1),
            f"range [{mu_I.min():.6g}, {mu_I.max():.6g}], worst x={x[k]:.6g}")
    rep.add("mu_I>=mu_I_min", mu_I.min() >= b.mu_I_min, f"min mu_I={mu_I.min():.6g} at x={x[k]:.6g}")
    cap = min(b.mu_I_min, b.beta_min / (b.beta_min + b.zeta_max))
    rep.add("0<mu0_min<min(mu_I_min, beta_min/(beta_min+zeta_max))",
            0 < b.mu0_min < cap, f"mu0_min={b.mu0_min}, cap={cap:.6g}")
    # support in [0, A_max]: mass beyond A_max must sit below the truncation tolerance
    a_tail = np.linspace(n.A_max, 3.0 * n.A_max, 4 * max(J_max, 8) + 1)
    tail = sample(x, a_tail)
    tail_mass = float(np.trapezoid(np.abs(tail).max(axis=1), a_tail))
    rep.add("supp rho_I in [0, A_max]", tail_mass <= n.tol_age,
            f"mass beyond A_max={tail_mass:.3g}, tol_age={n.tol_age:.3g}")
    rep.add("age truncation rule", tail_bound(n.A_max, b) <= n.tol_age * (1 + 1e-9),
            f"bound={tail_bound(n.A_max, b):.3g}, tol_age={n.tol_age:.3g}")
    # discrete BV proxy for the age derivative (the limsup itself is not certifiable)
    rep.rho_I_bv = float(np.sum(np.abs(np.diff(rho, axis=0)).max(axis=1)) + np.abs(rho[-1]).max())

    # Hypotheses 3: past data on the sphere, Lipschitz in time
    depth = (J_max + 2) * n.delta_t
    tp = np.linspace(-depth, 0.0, SAMPLING_FACTOR * (J_max + 2) + 1)
    comps = np.stack(
        [np.broadcast_to(eval_expr(e, x[None, :], 0.0, tp[:, None]), (tp.size, x.size)) for e in p.z_p],
        axis=-1,
    )
    norms = np.sqrt(np.sum(comps * comps, axis=-1))
    dev = np.abs(norms - 1.0)
    kt, kx = np.unravel_index(np.argmax(dev), dev.shape)
    rep.add("|z_p|=1", dev[kt, kx] <= UNIT_NORM_TOL,
            f"| |z_p| - 1 | = {dev[kt, kx]:.3g} at x={x[kx]:.6g}, t={tp[kt]:.6g}")
    if tp.size > 1:
        dz = np.sqrt(np.sum(np.diff(comps, axis=0) ** 2, axis=-1)) / np.diff(tp)[:, None]
        rep.C_zp = dz.max(axis=0)
        rep.C_zp_l2 = float(math.sqrt(np.trapezoid(rep.C_zp**2, x)))
        rep.add("C_zp in L2", math.isfinite(rep.C_zp_l2), f"||C_zp||_L2={rep.C_zp_l2:.6g}")
    return rep


def describe(p: ModelProblem, n: NumericsParams) -> dict:
    """Plain record echo, used in run summaries."""
    return {
        "beta": str(p.beta.source),
        "zeta": str(p.zeta.source),
        "beta0": str(p.beta0.source),
        "zeta0": str(p.zeta0.source),
        "rho_I": WELL_PREPARED if p.rho_I is None else p.rho_I.source,
        "z_p": [e.source for e in p.z_p],
        "d": p.d,
        "epsilon": p.epsilon,
        "T": p.T,
        "bounds": vars(p.bounds),
        "delta_a": n.delta_a,
        "delta_t": n.delta_t,
        "Nx": n.Nx,
        "A_max": n.A_max,
        "J_max": n.J_max,
        "N": step_count(p.T, n.delta_t),
        "tol_age": n.tol_age,
        "tol_grad": n.tol_grad,
        "max_inner": n.max_inner,
        "limit_dt_safety": n.limit_dt_safety,
    }


DEFAULT_BOUNDS = "beta_min=1, beta_max=1, zeta_min=1, zeta_max=1, M=2, mu_I_min=0.2, mu0_min=0.1"


def config_text(model: dict, numerics: dict, run: Optional[dict] = None) -> str:
    """Render section dictionaries as configuration text."""
    parts = []
    for name, sec in (("model", model), ("numerics", numerics), ("run", run)):
        if sec is None:
            continue
        parts.append(f"[{name}]")
        parts.extend(f"{k} = {v}" for k, v in sec.items())
        parts.append("")
    return "\n".join(parts)


def make_problem(validate: bool = True, run: Optional[dict] = None, **overrides):
    """Build (problem, numerics, run) from keyword overrides of a unit-rate default.

    Keys of both the model and numerics sections are accepted; ``zp`` may be a
    list of component expressions.
    """
    model = {
        "beta": "1", "zeta": "1", "beta0": "1", "zeta0": "1",
        "rho_I": "0.25*exp(-a)", "d": 2, "epsilon": 0.05, "T": 1.0,
        "bounds": DEFAULT_BOUNDS,
    }
    numerics = {"delta_a": 0.02, "Nx": 17}
    zp = overrides.pop("zp", ["cos(0.5*cos(pi*x))", "sin(0.5*cos(pi*x))"])
    for key, val in overrides.items():
        if key in model or key.startswith("zp_"):
            model[key] = val
        else:
            numerics[key] = val
    if "A_max" not in numerics and "tol_age" not in numerics:
        numerics["tol_age"] = 1e-13
    model["d"] = len(zp)
    for i, e in enumerate(zp, start=1):
        model[f"zp_{i}"] = e
    return load_problem(config_text(model, numerics, run), validate=validate)
