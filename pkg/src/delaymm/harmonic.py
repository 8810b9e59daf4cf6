"""Friction-limit flow: harmonic map heat flow with a space-dependent friction.

mu10 * dz/dt = z_xx + |z_x|^2 z on [0, 1] with Neumann ends and |z| = 1,
discretised by an explicit heat step followed by per-node normalization.
The friction mu10 is the first age moment of the limit density.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .expr import eval_expr
from .grids import Grids, dirichlet_energy, discrete_laplacian
from .limit_density import solve_rho0


class LimitStepError(RuntimeError):
    pass


def step_limit(z: np.ndarray, mu10: np.ndarray, dt: float, delta_x: float) -> np.ndarray:
    """One explicit heat step on each component, then projection onto the sphere."""
    bound = stable_dt(mu10, delta_x, 1.0)
    if dt > bound * (1.0 + 1e-12):
        raise LimitStepError(f"time step {dt:.3g} above the explicit stability bound {bound:.3g}")
    zs = z + (dt / mu10)[:, None] * discrete_laplacian(z, delta_x)
    norm = np.sqrt(np.sum(zs * zs, axis=1))
    k = int(np.argmin(norm))
    if norm[k] < 0.5:
        raise LimitStepError(f"predictor norm {norm[k]:.3g} < 0.5 at node {k}: time step too large")
    return zs / norm[:, None]


def exact_circle_solution(theta0: float, mu: float, x, t):
    """(cos, sin) of the phase theta0 * exp(-pi^2 t / mu) * cos(pi x)."""
    x = np.asarray(x, dtype=float)
    phase = theta0 * math.exp(-math.pi**2 * t / mu) * np.cos(math.pi * x)
    return np.stack([np.cos(phase), np.sin(phase)], axis=-1)


def stable_dt(mu10: np.ndarray, delta_x: float, safety: float) -> float:
    return safety * float(np.min(mu10)) * delta_x * delta_x / 2.0


class FrictionProfile:
    """mu10(x, t), refreshed on a fixed cadence and frozen in between."""

    def __init__(self, p, g: Grids, refresh: Optional[float] = None):
        self.p, self.g = p, g
        self.static = not any("t" in e.variables for e in (p.beta0, p.zeta0))
        self.refresh = refresh if refresh is not None else g.delta_t
        self._key = None
        self._value = None

    def at(self, t: float) -> np.ndarray:
        key = 0 if self.static else int(math.floor(t / self.refresh + 1e-9))
        if key != self._key:
            tk = 0.0 if self.static else key * self.refresh
            mu = solve_rho0(self.p, self.g, tk).mu10
            if not np.all(mu > 0):
                raise LimitStepError(f"first age moment not positive at t={tk}: min {mu.min():.3g}")
            self._key, self._value = key, mu
        return self._value


@dataclass
class LimitTrajectory:
    grids: Grids
    times: np.ndarray
    z: np.ndarray  # (n_samples, Nx, d)
    dt: float
    steps: int
    energy: list = field(default_factory=list)
    max_energy_increase: float = 0.0
    max_unit_defect: float = 0.0  # over internal steps; interpolated samples are chords


def initial_field(p, g: Grids) -> np.ndarray:
    comps = [np.broadcast_to(eval_expr(e, g.x, 0.0, 0.0), (g.Nx,)) for e in p.z_p]
    z = np.stack(comps, axis=-1).astype(float)
    return z / np.sqrt(np.sum(z * z, axis=1))[:, None]


def run_limit(p, n, g: Grids, sample_times=None, dt: Optional[float] = None,
              z0: Optional[np.ndarray] = None, friction=None, refresh: Optional[float] = None) -> LimitTrajectory:
    """Integrate to T with uniform internal steps and interpolate linearly to ``sample_times``.

    ``friction`` overrides mu10: a constant or a callable t -> (Nx,) array.
    Without ``dt`` the step is the largest uniform one below the stability bound.
    """
    T = p.T
    if sample_times is None:
        sample_times = np.arange(g.N + 1) * g.delta_t
    sample_times = np.asarray(sample_times, dtype=float)
    if friction is None:
        prof = FrictionProfile(p, g, refresh)
        mu_at = prof.at
    elif callable(friction):
        mu_at = friction
    else:
        const = np.full(g.Nx, float(friction))
        mu_at = lambda t: const  # noqa: E731
    bound = stable_dt(mu_at(0.0), g.delta_x, n.limit_dt_safety if dt is None else 1.0)
    target = dt if dt is not None else bound
    t_end = max(T, float(sample_times.max()) if sample_times.size else 0.0)
    steps = max(1, int(math.ceil(t_end / target * (1.0 - 1e-12))))
    h = t_end / steps
    z = initial_field(p, g) if z0 is None else np.array(z0, dtype=float)
    out = np.empty((sample_times.size, g.Nx, z.shape[1]))
    order = np.argsort(sample_times, kind="stable")
    si = 0
    energies = [dirichlet_energy(z, g.delta_x)]
    worst = 0.0
    defect = 0.0
    prev_z, prev_t = z, 0.0
    for i in range(steps + 1):
        t = i * h
        while si < order.size and sample_times[order[si]] <= t + 1e-12 * max(1.0, t_end):
            ts = sample_times[order[si]]
            if i == 0 or t == prev_t:
                out[order[si]] = z
            else:
                w = (ts - prev_t) / (t - prev_t)
                out[order[si]] = (1.0 - w) * prev_z + w * z
            si += 1
        if i == steps:
            break
        mu = mu_at(t)
        if dt is None and h > stable_dt(mu, g.delta_x, n.limit_dt_safety) * (1 + 1e-12):
            raise LimitStepError(f"friction dropped below the value used for the step size at t={t:.6g}")
        prev_z, prev_t = z, t
        z = step_limit(z, mu, h, g.delta_x)
        energies.append(dirichlet_energy(z, g.delta_x))
        worst = max(worst, energies[-1] - energies[-2])
        defect = max(defect, float(np.max(np.abs(np.sqrt(np.sum(z * z, axis=1)) - 1.0))))
    return LimitTrajectory(g, sample_times, out, h, steps, energies, worst, defect)


def write_limit_csv(traj: LimitTrajectory, fh):
    """Same layout as the flow export, without the multiplier column."""
    g = traj.grids
    d = traj.z.shape[2]
    fh.write("n,t,k,x," + ",".join(f"z_{i}" for i in range(1, d + 1)) + "\n")
    for i, t in enumerate(traj.times):
        for k in range(g.Nx):
            comps = ",".join(format(float(v), ".17g") for v in traj.z[i, k])
            fh.write(f"{i},{format(float(t), '.17g')},{k},{format(float(g.x[k]), '.17g')},{comps}\n")
