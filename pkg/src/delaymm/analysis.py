"""Sweeps, cross-model errors, the transposed kernel and the layer fit.

Sweep members are independent runs; with ``threads > 1`` they go to a
process pool and results are gathered in input order, so outputs do not
depend on the worker count.
"""
from __future__ import annotations

import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .density import discrete_steady, iter_density, oracle_yt_error
from .expr import eval_expr
from .flow import run_flow
from .grids import Grids, node_weights, yt_slab
from .harmonic import run_limit
from .limit_density import layer_decay_series, rho0_slice, solve_rho0
from .model import make_grids, with_epsilon

ORDER_FLOOR = 1e-13


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    if isinstance(v, str):
        return v
    return format(float(v), ".17g")


@dataclass
class ConvergenceTable:
    """Rows keyed by a swept parameter; order columns are added per error column."""

    key: str
    columns: list
    rows: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def add(self, **row):
        self.rows.append(row)

    def values(self, col):
        return [r[col] for r in self.rows]

    def halvings(self):
        keys = self.values(self.key)
        return [math.isclose(keys[i + 1], keys[i] / 2.0, rel_tol=1e-12) for i in range(len(keys) - 1)]

    def ratios(self, col):
        v = self.values(col)
        return [v[i + 1] / v[i] if v[i] != 0 else math.nan for i in range(len(v) - 1)]

    def orders(self, col):
        """log2(err_i / err_{i+1}) between consecutive halvings; NaN where undefined."""
        v = self.values(col)
        out = []
        for i, halved in enumerate(self.halvings()):
            if halved and v[i] >= ORDER_FLOOR and v[i + 1] >= ORDER_FLOOR:
                out.append(math.log2(v[i] / v[i + 1]))
            else:
                out.append(math.nan)
        return out

    def header(self):
        return [self.key] + self.columns + [f"order_{c}" for c in self.columns]

    def records(self):
        orders = {c: [math.nan] + self.orders(c) for c in self.columns}
        for i, r in enumerate(self.rows):
            yield [r[self.key]] + [r[c] for c in self.columns] + [orders[c][i] for c in self.columns]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(self.header()) + "\n")
        for rec in self.records():
            buf.write(",".join(_fmt(v) for v in rec) + "\n")
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "key": self.key,
            "columns": list(self.columns),
            "rows": [dict(r) for r in self.rows],
            "orders": {c: self.orders(c) for c in self.columns},
            "meta": dict(self.meta),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["key"], list(d["columns"]), [dict(r) for r in d["rows"]], dict(d.get("meta", {})))


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def emit(obj, path, fmt: str = "csv"):
    """Write a table (or anything with ``to_csv``/``to_dict``) with LF line endings."""
    if fmt == "csv":
        text = obj.to_csv() if hasattr(obj, "to_csv") else str(obj)
    elif fmt == "json":
        text = dumps_json(obj.to_dict() if hasattr(obj, "to_dict") else obj)
    else:
        raise ValueError(f"unknown format {fmt!r}")
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def parallel_map(fn, items, threads: int = 1):
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=min(threads, len(items))) as pool:
        return list(pool.map(fn, items))


# --- epsilon sweep -------------------------------------------------------------


class LimitDensityCache:
    """Cell means of rho_0 on a grid, cached when the limit rates do not depend on t."""

    def __init__(self, p, g: Grids):
        self.p, self.g = p, g
        self.static = not any("t" in e.variables for e in (p.beta0, p.zeta0))
        self._cached = solve_rho0(p, g, 0.0).cell_mean[: g.J_max + 1] if self.static else None

    def at(self, t: float) -> np.ndarray:
        if self.static:
            return self._cached
        return solve_rho0(self.p, self.g, t).cell_mean[: self.g.J_max + 1]


def sample_indices(times, delta_t: float):
    idx = []
    for t in times:
        n = int(round(t / delta_t))
        if not math.isclose(n * delta_t, t, rel_tol=1e-9, abs_tol=1e-12):
            raise ValueError(f"sample time {t} is not a multiple of delta_t = {delta_t}")
        idx.append(n)
    return idx


def _eps_member(args):
    p, n, sample_times, limit_z, density_mode = args
    g = make_grids(p, n)
    lim = LimitDensityCache(p, g)
    weight = (1.0 + g.ages)[:, None]
    acc = [0.0]

    def hook(m, rho):
        # density slab m stands for time (m + 1) * delta_t
        if 0 <= m < g.N:
            diff = weight * (rho - lim.at((m + 1) * g.delta_t))
            acc[0] += g.delta_t * yt_slab(diff, g.delta_a)

    traj = run_flow(p, n, g, density_mode=density_mode, density_hook=hook)
    idx = sample_indices(sample_times, g.delta_t)
    pos = {m: i for i, m in enumerate(traj.n_values)}
    z = np.stack([traj.z[pos[m]] for m in idx])
    diff = z - limit_z
    err = float(np.max(np.sqrt(np.sum(diff * diff, axis=-1)))) if len(idx) else math.nan
    summ = traj.summary()
    return {
        "epsilon": p.epsilon,
        "delta_a": g.delta_a,
        "delta_t": g.delta_t,
        "J_max": g.J_max,
        "N": g.N,
        "err_z_c0": err,
        "err_rho_weighted": acc[0],
        "lambda_l1_sup": traj.sup_lambda_l1,
        "Ldotz_l1": traj.Ldotz_l1_xt,
        "h1_time_sum": traj.dz_sum,
        "max_lambda": summ["max_lambda"],
        "min_Ldotz": summ["min_Ldotz"],
        "max_energy_excess": summ["max_energy_excess"],
        "tol_energy": summ["tol_energy"],
        "max_unit_defect": summ["max_unit_defect"],
        "E_0": summ["E_0"],
        "E_N": summ["E_N"],
    }


EPS_COLUMNS = ["err_z_c0", "err_rho_weighted", "lambda_l1_sup", "Ldotz_l1", "h1_time_sum"]


def epsilon_sweep(p, n, eps_list, delta_a_scale=None, sample_dt=None, threads: int = 1,
                  density_mode: str = "cell_average") -> ConvergenceTable:
    """One coupled run per eps against one limit run.

    With ``delta_a_scale`` the age step is tied to eps (delta_a = scale * eps);
    otherwise every member shares ``n.delta_a``.  z is compared at multiples of
    ``sample_dt`` (default: the coarsest member's delta_t), which must be
    multiples of every member's delta_t.
    """
    eps_list = [float(e) for e in eps_list]
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError("eps_list must be strictly decreasing")
    members = []
    for eps in eps_list:
        da = n.delta_a if delta_a_scale is None else delta_a_scale * eps
        members.append(with_epsilon(p, n, eps, da))
    if sample_dt is None:
        sample_dt = members[0][1].delta_t
    count = int(math.floor(p.T / sample_dt * (1 + 1e-12)))
    sample_times = [round(k * sample_dt, 14) for k in range(1, count + 1)]
    # limit run on the finest member's grid
    pf, nf = members[-1]
    gf = make_grids(pf, nf)
    limit = run_limit(pf, nf, gf, np.array(sample_times))
    rows = parallel_map(
        _eps_member, [(pm, nm, sample_times, limit.z, density_mode) for pm, nm in members], threads
    )
    table = ConvergenceTable("epsilon", list(EPS_COLUMNS))
    for r in rows:
        table.add(**r)
    table.meta.update(
        {
            "sample_times": len(sample_times),
            "sample_dt": sample_dt,
            "limit_dt": limit.dt,
            "limit_steps": limit.steps,
            "delta_a_scale": delta_a_scale,
            "shared_delta_a": None if delta_a_scale is not None else n.delta_a,
            "note": "z_eps -> z_0 has no proven rate; ratio checks are an empirical surrogate",
        }
    )
    return table


# --- delta_a refinement ----------------------------------------------------------


def oracle_amplitude(p, n) -> float:
    """c such that rho_I = c * exp(-zeta * a) (x-independent); raises otherwise."""
    if not all(e.is_constant for e in (p.beta, p.zeta)):
        raise ValueError("the analytic oracle needs constant beta and zeta")
    beta, zeta = p.beta(), p.zeta()
    if p.rho_I is None:
        return beta * zeta / (beta + zeta)
    a = np.linspace(0.0, min(n.A_max, 10.0), 41)
    x = np.linspace(0.0, 1.0, 9)
    vals = np.broadcast_to(eval_expr(p.rho_I, x[None, :], a[:, None], 0.0), (a.size, x.size))
    c = float(vals[0, 0])
    ref = c * np.exp(-zeta * a)[:, None]
    if not np.allclose(vals, ref, rtol=1e-12, atol=1e-14):
        raise ValueError("the analytic oracle needs rho_I = c*exp(-zeta*a)")
    return c


def _da_member(args):
    p, n, mode, c = args
    g = make_grids(p, n)
    if mode == "discrete_steady":
        ref = discrete_steady(p.beta(), p.zeta(), g)
        total = 0.0
        for state in iter_density(p, g, mode):
            if 0 <= state.n < g.N:
                total += g.delta_t * yt_slab(state.rho - ref, g.delta_a)
        err = total
    else:
        err = oracle_yt_error(p, g, c, mode)
    return {"delta_a": g.delta_a, "delta_t": g.delta_t, "epsilon": p.epsilon, "J_max": g.J_max,
            "N": g.N, "err_yt": err, "cfl": g.delta_t / (p.epsilon * g.delta_a)}


def delta_a_refinement(p, n, da_list, mode: str = "cell_average", threads: int = 1) -> ConvergenceTable:
    c = oracle_amplitude(p, n)
    members = [with_epsilon(p, n, p.epsilon, float(da)) for da in da_list]
    rows = parallel_map(_da_member, [(pm, nm, mode, c) for pm, nm in members], threads)
    table = ConvergenceTable("delta_a", ["err_yt"])
    for r in rows:
        table.add(**r)
    table.meta.update({"mode": mode, "oracle_c": c, "epsilon": p.epsilon})
    return table


# --- transposed kernel -----------------------------------------------------------


class KernelAccumulator:
    """Streams sum over {n >= 0, j <= J, n + j <= N} of psi(x, a_j, t_n) (rho^{n+j}_j - rho^n_j) / eps.

    Each slab m enters twice: as rho^{n+j}_j with n = m - j (j <= m) and as
    rho^m_j with n = m (j <= N - m), so no trajectory is stored.
    """

    def __init__(self, psi, g: Grids):
        self.g = g
        self.psi = psi
        self.total = 0.0
        self.wt = node_weights(g.Nx)
        self._static = "t" not in psi.variables
        if self._static:
            self._psi0 = np.broadcast_to(eval_expr(psi, g.x[None, :], g.ages[:, None], 0.0), (g.J_max + 1, g.Nx))

    def _psi(self, j, times):
        g = self.g
        if self._static:
            return self._psi0[j]
        v = eval_expr(self.psi, g.x[None, :], g.ages[j][:, None], np.asarray(times)[:, None])
        return np.broadcast_to(v, (j.size, g.Nx))

    def add(self, m: int, rho: np.ndarray):
        g = self.g
        if m < 0 or m > g.N:
            return
        j_hi = min(m, g.J_max)
        j = np.arange(j_hi + 1)
        plus = np.sum(self._psi(j, (m - j) * g.delta_t) * rho[: j_hi + 1], axis=0)
        j_lo = min(g.N - m, g.J_max)
        j = np.arange(j_lo + 1)
        minus = np.sum(self._psi(j, np.full(j.size, m * g.delta_t)) * rho[: j_lo + 1], axis=0)
        self.total += float(np.sum(self.wt * (plus - minus)))

    def value(self) -> float:
        g = self.g
        return self.total * g.delta_a * g.delta_t / g.epsilon


def kernel_limit(p, g: Grids, psi, n_t: int = 400, n_a: int = 4000) -> float:
    """Integral of a * psi * d(rho_0)/dt over x, age and [0, T]; centred differences in t."""
    x = g.x
    ages = np.linspace(0.0, g.A_max, n_a + 1)
    ts = np.linspace(0.0, p.T, n_t + 1)
    rho = np.stack([rho0_slice(p.beta0, p.zeta0, x, ages, t).rho0 for t in ts])
    drho = np.gradient(rho, ts, axis=0, edge_order=2)
    psi_v = np.broadcast_to(
        eval_expr(psi, x[None, None, :], ages[None, :, None], ts[:, None, None]), drho.shape
    )
    f = ages[None, :, None] * psi_v * drho
    wa = np.full(ages.size, 2.0)
    wa[1::2] = 4.0
    wa[0] = wa[-1] = 1.0
    wa *= (ages[1] - ages[0]) / 3.0  # Simpson in age
    per_t = np.einsum("a,tak->tk", wa, f)
    per_t = np.sum(per_t * node_weights(g.Nx), axis=1)
    return float(np.trapezoid(per_t, ts))


def _kernel_member(args):
    p, n, psi, mode = args
    g = make_grids(p, n)
    acc = KernelAccumulator(psi, g)
    for state in iter_density(p, g, mode):
        acc.add(state.n, state.rho)
    return {"epsilon": p.epsilon, "delta_a": g.delta_a, "K_eps": acc.value()}


def transposed_kernel(p, n, psi, eps_list=None, delta_a_scale=None, threads: int = 1,
                      mode: str = "cell_average") -> ConvergenceTable:
    """K_eps integral per eps, its limit value, and the gap between them."""
    eps_list = [p.epsilon] if eps_list is None else [float(e) for e in eps_list]
    members = []
    for eps in eps_list:
        da = n.delta_a if delta_a_scale is None else delta_a_scale * eps
        members.append(with_epsilon(p, n, eps, da))
    rows = parallel_map(_kernel_member, [(pm, nm, psi, mode) for pm, nm in members], threads)
    pf, nf = members[-1]
    limit = kernel_limit(pf, make_grids(pf, nf), psi)
    table = ConvergenceTable("epsilon", ["gap"])
    for r in rows:
        table.add(**r, limit=limit, gap=abs(r["K_eps"] - limit))
    table.meta.update({"psi": psi.source, "limit": limit, "delta_a_scale": delta_a_scale})
    return table


# --- initial layer ---------------------------------------------------------------


def initial_layer_report(p, g: Grids, fit=(1.0, 5.0)) -> dict:
    """Least-squares slope of log(mass) against fast time on ``fit``."""
    tt, mass = layer_decay_series(p, g, fit[1])
    if np.all(mass == 0.0):
        return {"status": "exact", "slope": None, "mass0": 0.0, "ttilde": tt.tolist(), "mass": mass.tolist()}
    sel = (tt >= fit[0] - 1e-12) & (tt <= fit[1] + 1e-12)
    m = mass[sel]
    if np.any(m <= 0.0):
        # underflow before the end of the window counts as decay
        return {"status": "underflow", "slope": -math.inf, "mass0": float(mass[0]),
                "ttilde": tt.tolist(), "mass": mass.tolist()}
    slope = float(np.polyfit(tt[sel], np.log(m), 1)[0])
    return {"status": "fit", "slope": slope, "mass0": float(mass[0]), "ttilde": tt.tolist(), "mass": mass.tolist()}


def layer_csv(report: dict) -> str:
    lines = ["ttilde,mass"]
    lines += [f"{_fmt(t)},{_fmt(m)}" for t, m in zip(report["ttilde"], report["mass"])]
    return "\n".join(lines) + "\n"


def limit_moments_csv(p, g: Grids, times) -> str:
    lines = ["t,k,x,mu00,mu10"]
    for t in times:
        lim = solve_rho0(p, g, float(t))
        for k in range(g.Nx):
            lines.append(f"{_fmt(t)},{k},{_fmt(g.x[k])},{_fmt(lim.mu00[k])},{_fmt(lim.mu10[k])}")
    return "\n".join(lines) + "\n"
