"""The friction-limit bond density and its initial layer.

At eps = 0 the age profile solves a linear age ODE with a self-consistent
birth term, so its zeroth moment is the closed-form fixed point
``mu00 = beta0*I / (1 + beta0*I)`` where ``I`` is the integral of the
survival function.  Age integrals use an exponentially fitted rule (exact
for piecewise-constant off-rates in age), see ``_cell_integrals``.

The initial layer corrects a non-equilibrium initial density on the fast
time scale t/eps; it is discretised with the same implicit upwind stencil
as the eps-scheme, at unit speed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .expr import eval_expr
from .grids import Grids


@dataclass
class LimitDensity:
    """One time slice of the limit density on an age grid.

    ``rho0`` and ``survival`` have shape (n_ages, Nx); moments have shape (Nx,).
    ``cell_mean`` holds exact cell averages of ``rho0`` over [a_j, a_{j+1}).
    """

    t: float
    ages: np.ndarray
    rho0: np.ndarray
    survival: np.ndarray
    cell_mean: np.ndarray
    mu00: np.ndarray
    mu10: np.ndarray
    I: np.ndarray
    K: np.ndarray
    beta0: np.ndarray


def _phi1(r):
    """(1 - exp(-r)) / r, accurate near r = 0."""
    small = r < 1e-3
    rs = np.where(small, 1.0, r)
    big = -np.expm1(-rs) / rs
    ser = 1.0 - r / 2.0 + r * r / 6.0 - r**3 / 24.0
    return np.where(small, ser, big)


def _phi2(r):
    """(1 - exp(-r) * (1 + r)) / r**2, accurate near r = 0."""
    small = r < 1e-2
    rs = np.where(small, 1.0, r)
    big = (-np.expm1(-rs) - rs * np.exp(-rs)) / (rs * rs)
    ser = 0.5 - r / 3.0 + r * r / 8.0 - r**3 / 30.0 + r**4 / 144.0
    return np.where(small, ser, big)


def _cell_integrals(zeta_vals, ages):
    """Survival at the age nodes and its integrals over each cell.

    Log-survival is accumulated with the trapezoid rule; between nodes the
    survival is taken exponential, which integrates exactly.
    Returns (S, int_S, int_aS) with shapes (Na, Nx), (Na-1, Nx), (Na-1, Nx).
    """
    h = np.diff(ages)[:, None]
    r = 0.5 * (zeta_vals[1:] + zeta_vals[:-1]) * h
    logS = np.zeros_like(zeta_vals)
    logS[1:] = -np.cumsum(r, axis=0)
    S = np.exp(logS)
    p1 = _phi1(r)
    int_S = S[:-1] * h * p1
    int_aS = S[:-1] * (ages[:-1, None] * h * p1 + h * h * _phi2(r))
    return S, int_S, int_aS


def rho0_slice(beta0, zeta0, x, ages, t: float) -> LimitDensity:
    """Limit density at time ``t`` on explicit node and age arrays.

    ``ages`` must start at 0; integrals are truncated at ``ages[-1]``.
    """
    x = np.asarray(x, dtype=float)
    ages = np.asarray(ages, dtype=float)
    Nx = x.size
    z = np.broadcast_to(eval_expr(zeta0, x[None, :], ages[:, None], t), (ages.size, Nx))
    b = np.broadcast_to(eval_expr(beta0, x, 0.0, t), (Nx,)).astype(float)
    S, int_S, int_aS = _cell_integrals(np.array(z, dtype=float), ages)
    I = np.sum(int_S, axis=0)
    K = np.sum(int_aS, axis=0)
    mu00 = b * I / (1.0 + b * I)
    birth = b * (1.0 - mu00)
    h = np.diff(ages)[:, None]
    return LimitDensity(
        t=t,
        ages=ages,
        rho0=birth * S,
        survival=S,
        cell_mean=birth * int_S / h,
        mu00=mu00,
        mu10=birth * K,
        I=I,
        K=K,
        beta0=b,
    )


def solve_rho0(p, g: Grids, t: float) -> LimitDensity:
    """Limit density on the grid's age nodes (one extra node closes the last cell)."""
    ages = np.arange(g.J_max + 2) * g.delta_a
    return rho0_slice(p.beta0, p.zeta0, g.x, ages, t)


@dataclass
class InitialLayerState:
    m: int
    ttilde: float
    rho: np.ndarray  # (J_max + 1, Nx)

    def mass(self, delta_a: float) -> float:
        """Trapezoid integral over age of max_x |rho|."""
        sup = np.abs(self.rho).max(axis=1)
        return float(delta_a * (np.sum(sup) - 0.5 * (sup[0] + sup[-1])))


class _LayerRates:
    def __init__(self, p, g: Grids):
        x = g.x
        self.zeta = np.broadcast_to(
            eval_expr(p.zeta0, x[None, :], g.ages[:, None], 0.0), (g.J_max + 1, g.Nx)
        ).copy()
        self.beta = np.broadcast_to(eval_expr(p.beta0, x, 0.0, 0.0), (g.Nx,)).copy()


def init_layer_setup(p, g: Grids) -> InitialLayerState:
    """Cell averages of rho_I minus cell averages of rho_0 at t = 0."""
    if p.rho_I is None:
        return InitialLayerState(0, 0.0, np.zeros((g.J_max + 1, g.Nx)))
    from .density import cell_averages

    lim = solve_rho0(p, g, 0.0)
    rho = cell_averages(p.rho_I, g) - lim.cell_mean
    return InitialLayerState(0, 0.0, rho)


def step_initial_layer(state: InitialLayerState, p, g: Grids, rates=None) -> InitialLayerState:
    rates = rates or _LayerRates(p, g)
    da = g.delta_a
    new = np.empty_like(state.rho)
    new[1:] = state.rho[:-1] / (1.0 + da * rates.zeta[1:])
    tail = da * np.sum(new[1:], axis=0)
    new[0] = -rates.beta * tail / (1.0 + da * (rates.zeta[0] + rates.beta))
    return InitialLayerState(state.m + 1, (state.m + 1) * da, new)


def layer_decay_series(p, g: Grids, ttilde_max: float):
    """(ttilde, mass) pairs from the layer set-up up to ``ttilde_max``."""
    state = init_layer_setup(p, g)
    rates = _LayerRates(p, g)
    steps = int(round(ttilde_max / g.delta_a))
    tt = np.empty(steps + 1)
    mass = np.empty(steps + 1)
    tt[0], mass[0] = 0.0, state.mass(g.delta_a)
    for m in range(steps):
        state = step_initial_layer(state, p, g, rates)
        tt[m + 1] = state.ttilde
        mass[m + 1] = state.mass(g.delta_a)
    return tt, mass
