"""Age-structured bond density at fixed eps.

Implicit upwind in age at CFL number one (delta_t = eps * delta_a), implicit
off-rate, and a saturating nonlocal birth term at age zero.  Cell ``J_max``
is the last one kept; what it holds leaves the grid at the next step.

State ``n`` starts at -1 (the initial cell averages); the step to ``n + 1``
evaluates the rates at time (n + 1) * delta_t.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from .expr import eval_expr
from .grids import Grids, yt_slab

RHO_TOL = 1e-14
S_TOL = 1e-14

# 4-point Gauss-Legendre on [0, 1]
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(4)
_GL_NODES = 0.5 * (_GL_NODES + 1.0)
_GL_WEIGHTS = 0.5 * _GL_WEIGHTS


class InvariantViolation(RuntimeError):
    def __init__(self, what: str, n: int, j: Optional[int], k: int, value: float):
        where = f"n={n}, k={k}" if j is None else f"n={n}, j={j}, k={k}"
        super().__init__(f"{what} at {where}: {value!r}")
        self.n, self.j, self.k, self.value = n, j, k, value


@dataclass
class DensityState:
    n: int
    rho: np.ndarray  # (J_max + 1, Nx)
    s: np.ndarray  # (Nx,)


def moment(rho: np.ndarray, delta_a: float) -> np.ndarray:
    return delta_a * np.sum(rho, axis=0)


def cell_averages(rho_I, g: Grids) -> np.ndarray:
    """Cell means of ``rho_I * 1_{a < A_max}`` over [j da, (j+1) da), by 4-point Gauss."""
    da = g.delta_a
    lo = g.ages
    hi = np.minimum(lo + da, g.A_max)
    width = np.maximum(hi - lo, 0.0)
    x = g.x
    out = np.zeros((g.J_max + 1, g.Nx))
    for node, w in zip(_GL_NODES, _GL_WEIGHTS):
        a = lo + node * width
        vals = np.broadcast_to(eval_expr(rho_I, x[None, :], a[:, None], 0.0), out.shape)
        out += w * vals
    return out * (width / da)[:, None]


def discrete_steady(beta: float, zeta: float, g: Grids) -> np.ndarray:
    """Fixed point of the truncated scheme for constant rates.

    Starts from the closed form rho_j = rho_0 alpha^j, alpha = 1/(1 + da zeta),
    then searches the floats next to rho_0 for the one that the scheme's own
    floating-point operations map back to itself (or closest to it).
    """
    da = g.delta_a
    alpha = 1.0 / (1.0 + da * zeta)
    J = g.J_max
    G = float(np.sum(alpha ** np.arange(J + 1)))
    rho0 = beta / (1.0 + da * zeta + beta * da * G)
    decay = 1.0 + da * zeta
    gain = beta / (1.0 + da * (beta + zeta))

    def column(r0):
        rho = np.empty((J + 1, g.Nx))
        rho[0] = r0
        for j in range(1, J + 1):
            rho[j] = rho[j - 1] / decay
        return rho

    best, best_gap = None, math.inf
    for k in range(-16, 17):
        cand = rho0 + k * math.ulp(rho0)
        rho = column(cand)
        gap = float(np.max(np.abs(gain * (1.0 - da * np.sum(rho[1:], axis=0)) - rho[0])))
        if gap < best_gap:
            best, best_gap = rho, gap
        if gap == 0.0:
            break
    return best


def init_density(p, g: Grids, mode: str = "cell_average") -> DensityState:
    if mode == "cell_average":
        if p.rho_I is None:
            from .limit_density import solve_rho0

            rho = solve_rho0(p, g, 0.0).cell_mean.copy()
        else:
            rho = cell_averages(p.rho_I, g)
    elif mode == "discrete_steady":
        if not (p.beta.is_constant and p.zeta.is_constant):
            raise ValueError("discrete_steady needs constant beta and zeta")
        rho = discrete_steady(p.beta(), p.zeta(), g)
    else:
        raise ValueError(f"unknown init mode {mode!r}")
    return DensityState(-1, rho, moment(rho, g.delta_a))


class RateTable:
    """Rates on the (age, x) grid at a given time; reused when time-independent."""

    def __init__(self, p, g: Grids):
        self.p, self.g = p, g
        self._x = g.x
        self._ages = g.ages
        self._zeta_const = None if "t" in p.zeta.variables else self._zeta(0.0)
        self._beta_const = None if "t" in p.beta.variables else self._beta(0.0)

    def _zeta(self, t):
        v = eval_expr(self.p.zeta, self._x[None, :], self._ages[:, None], t)
        return np.array(np.broadcast_to(v, (self.g.J_max + 1, self.g.Nx)), dtype=float)

    def _beta(self, t):
        v = eval_expr(self.p.beta, self._x, 0.0, t)
        return np.array(np.broadcast_to(v, (self.g.Nx,)), dtype=float)

    def zeta(self, t):
        return self._zeta_const if self._zeta_const is not None else self._zeta(t)

    def beta(self, t):
        return self._beta_const if self._beta_const is not None else self._beta(t)


def step_density(state: DensityState, p, g: Grids, rates: Optional[RateTable] = None) -> DensityState:
    rates = rates or RateTable(p, g)
    t = (state.n + 1) * g.delta_t
    zeta = rates.zeta(t)
    beta = rates.beta(t)
    da = g.delta_a
    new = np.empty_like(state.rho)
    new[1:] = state.rho[:-1] / (1.0 + da * zeta[1:])
    interior = da * np.sum(new[1:], axis=0)
    new[0] = beta / (1.0 + da * (beta + zeta[0])) * (1.0 - interior)
    return DensityState(state.n + 1, new, moment(new, da))


def zeroth_moment_residual(prev: DensityState, nxt: DensityState, p, g: Grids, rates=None) -> float:
    """Max over x of the moment-recursion residual, truncation outflow included."""
    rates = rates or RateTable(p, g)
    t = nxt.n * g.delta_t
    zeta = rates.zeta(t)
    beta = rates.beta(t)
    da = g.delta_a
    outflow = da * prev.rho[-1]
    r = nxt.s + da * da * np.sum(zeta * nxt.rho, axis=0) - (prev.s - outflow) - da * beta * (1.0 - nxt.s)
    return float(np.max(np.abs(r)))


def analytic_constant_rate_density(beta, zeta, c, epsilon, a, t, A_max=math.inf):
    """Exact density for constant rates and rho_I(a) = c exp(-zeta a) 1_{a < A_max}."""
    a = np.asarray(a, dtype=float)
    t = np.asarray(t, dtype=float)
    mu_star = beta / (beta + zeta)
    mu_I = c * -math.expm1(-zeta * A_max) / zeta if math.isfinite(A_max) else c / zeta
    born = t > epsilon * a
    tau = np.where(born, t - epsilon * a, 0.0)
    mu = mu_star + (mu_I - mu_star) * np.exp(-(beta + zeta) * tau / epsilon)
    inside = (a - t / epsilon) < A_max
    old = np.where(inside, c * np.exp(-zeta * a), 0.0)
    out = np.where(born, beta * (1.0 - mu) * np.exp(-zeta * a), old)
    return out if out.ndim else float(out)


def iter_density(p, g: Grids, mode: str = "cell_average", state: Optional[DensityState] = None) -> Iterator[DensityState]:
    """Yield states n = -1 .. N."""
    rates = RateTable(p, g)
    state = state or init_density(p, g, mode)
    yield state
    for _ in range(g.N + 1):
        state = step_density(state, p, g, rates)
        yield state


def check_state(state: DensityState):
    rho = state.rho
    if rho.min() < -RHO_TOL:
        j, k = np.unravel_index(np.argmin(rho), rho.shape)
        raise InvariantViolation("negative density", state.n, int(j), int(k), float(rho[j, k]))
    s = state.s
    if s.min() < -S_TOL or s.max() > 1.0 + S_TOL:
        k = int(np.argmin(s)) if s.min() < -S_TOL else int(np.argmax(s))
        raise InvariantViolation("moment outside [0, 1]", state.n, None, k, float(s[k]))


@dataclass
class DensityTrajectory:
    grids: Grids
    stride: int
    n_values: list = field(default_factory=list)
    rho: list = field(default_factory=list)
    s: list = field(default_factory=list)
    s_all: list = field(default_factory=list)
    min_rho: float = math.inf
    max_rho: float = -math.inf
    min_s: float = math.inf
    max_s: float = -math.inf
    max_residual: float = 0.0
    discarded_mass: float = 0.0

    def times(self):
        return [n * self.grids.delta_t for n in self.n_values]

    def summary(self) -> dict:
        return {
            "stored_slabs": len(self.n_values),
            "stride": self.stride,
            "min_rho": self.min_rho,
            "max_rho": self.max_rho,
            "min_s": self.min_s,
            "max_s": self.max_s,
            "max_moment_residual": self.max_residual,
            "discarded_mass": self.discarded_mass,
        }


def run_density(p, g: Grids, mode: str = "cell_average", stride: int = 1, check: bool = True) -> DensityTrajectory:
    """Iterate to n = N, storing every ``stride``-th slab plus the last.

    The full moment series is always kept.  Invariant violations abort.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    rates = RateTable(p, g)
    traj = DensityTrajectory(grids=g, stride=stride)
    prev = None
    last = g.N
    for state in iter_density(p, g, mode):
        if check:
            check_state(state)
        traj.min_rho = min(traj.min_rho, float(state.rho.min()))
        traj.max_rho = max(traj.max_rho, float(state.rho.max()))
        traj.min_s = min(traj.min_s, float(state.s.min()))
        traj.max_s = max(traj.max_s, float(state.s.max()))
        traj.s_all.append(state.s)
        if prev is not None:
            traj.max_residual = max(traj.max_residual, zeroth_moment_residual(prev, state, p, g, rates))
            traj.discarded_mass += g.delta_t * g.delta_a * float(prev.rho[-1].max())
        if (state.n + 1) % stride == 0 or state.n == last:
            traj.n_values.append(state.n)
            traj.rho.append(state.rho)
            traj.s.append(state.s)
        prev = state
    return traj


def oracle_yt_error(p, g: Grids, c: float, mode: str = "cell_average", age_weight: bool = False) -> float:
    """yt distance to the constant-rate oracle, streamed over states n = 0 .. N-1.

    State n is compared at time (n + 1) delta_t and at cell centres.
    """
    beta, zeta = p.beta(), p.zeta()
    centres = g.ages + 0.5 * g.delta_a
    total = 0.0
    for state in iter_density(p, g, mode):
        if state.n < 0 or state.n >= g.N:
            continue
        exact = analytic_constant_rate_density(beta, zeta, c, g.epsilon, centres, (state.n + 1) * g.delta_t, g.A_max)
        total += yt_slab(state.rho - exact[:, None], g.delta_a, age_weight)
    return total * g.delta_t


def _fmt(v) -> str:
    return format(float(v), ".17g")


def write_density_csv(traj: DensityTrajectory, fh):
    g = traj.grids
    x = g.x
    ages = g.ages
    fh.write("n,t,j,a,k,x,rho\n")
    for n, rho in zip(traj.n_values, traj.rho):
        t = _fmt(n * g.delta_t)
        for j in range(rho.shape[0]):
            a = _fmt(ages[j])
            for k in range(rho.shape[1]):
                fh.write(f"{n},{t},{j},{a},{k},{_fmt(x[k])},{_fmt(rho[j, k])}\n")


def write_moment_csv(traj: DensityTrajectory, fh):
    g = traj.grids
    x = g.x
    fh.write("n,t,k,x,s\n")
    for i, s in enumerate(traj.s_all):
        n = i - 1
        t = _fmt(n * g.delta_t)
        for k in range(s.size):
            fh.write(f"{n},{t},{k},{_fmt(x[k])},{_fmt(s[k])}\n")
