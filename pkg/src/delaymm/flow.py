"""Minimizing movements for sphere-valued fields with an age-structured delay.

At each step the new field minimizes the Dirichlet energy plus a quadratic
memory term that ties it to past fields, weighted by the bond density.
Only the unit-norm constraint is nonlinear, so the inner solver is a
projected descent on the product of spheres, preconditioned by the
tridiagonal Hessian of the (convex) unconstrained energy.

The memory term regroups by past field: with omega_1 = rho_0 + rho_1,
omega_m = rho_{m-1} + rho_m and omega_{J+1} = rho_J it reads
(da / 4 eps) sum_k w_k sum_m omega_m |w_k - z^{n-m}_k|^2.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import solveh_banded

from .density import RateTable, init_density, step_density
from .expr import eval_expr
from .grids import Grids, dirichlet_energy, l1_x, l2_x, node_weights, stiffness_apply

# 4-point Gauss-Legendre on [0, 1] for time averages of the past data
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(4)
_GL_NODES = 0.5 * (_GL_NODES + 1.0)
_GL_WEIGHTS = 0.5 * _GL_WEIGHTS

UNIT_TOL = 1e-12


class MinimizerError(RuntimeError):
    pass


class EnergyInequalityError(RuntimeError):
    pass


def normalize(w: np.ndarray) -> np.ndarray:
    return w / np.sqrt(np.sum(w * w, axis=-1))[:, None]


def tangent(w: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Per-node projection of ``v`` on the tangent space at the unit field ``w``."""
    return v - np.sum(w * v, axis=-1)[:, None] * w


def past_average(z_p, x: np.ndarray, t0: float, dt: float) -> np.ndarray:
    """(1/dt) * integral of z_p over [t0, t0 + dt], by 4-point Gauss."""
    out = np.zeros((x.size, len(z_p)))
    for node, w in zip(_GL_NODES, _GL_WEIGHTS):
        t = t0 + node * dt
        for i, comp in enumerate(z_p):
            out[:, i] += w * np.broadcast_to(eval_expr(comp, x, 0.0, t), x.shape)
    return out


class HistoryBuffer:
    """The last J_max + 2 fields, newest first, as one contiguous array view.

    Pushing shifts a window down a buffer twice the window length, so the
    view ``window()[j]`` is z^{n-j} without any per-step copy.
    """

    def __init__(self, J_max: int, Nx: int, d: int):
        self.L = J_max + 2
        self._buf = np.zeros((2 * self.L, Nx, d))
        self._p = self.L
        self.count = 0

    def push(self, z: np.ndarray):
        if self._p == 0:
            self._buf[self.L:] = self._buf[: self.L]
            self._p = self.L
        self._p -= 1
        self._buf[self._p] = z
        self.count += 1

    def window(self) -> np.ndarray:
        return self._buf[self._p : self._p + self.L]

    def entry(self, j: int) -> np.ndarray:
        if not 0 <= j < self.L:
            raise IndexError(j)
        return self._buf[self._p + j]

    @classmethod
    def from_past(cls, p, g: Grids) -> "HistoryBuffer":
        """Filled with time averages of the past data over the J_max + 2 slabs before t = 0."""
        h = cls(g.J_max, g.Nx, p.d)
        dt = g.delta_t
        # cache one slab when the past data does not depend on t
        static = all("t" not in comp.variables for comp in p.z_p)
        avg = past_average(p.z_p, g.x, 0.0, dt) if static else None
        for i in range(-h.L, 0):
            h.push(avg if static else past_average(p.z_p, g.x, i * dt, dt))
        return h


def elongation_V(h: HistoryBuffer, j: int, epsilon: float) -> np.ndarray:
    """(z^n - (z^{n-j} + z^{n-j-1}) / 2) / eps, with z^n = entry 0."""
    z = h.entry(0)
    return (z - 0.5 * (h.entry(j) + h.entry(j + 1))) / epsilon


def elongation_all(h: HistoryBuffer, epsilon: float) -> np.ndarray:
    """V_j for j = 0 .. J_max, shape (J_max + 1, Nx, d)."""
    win = h.window()
    return (win[0][None] - 0.5 * (win[:-1] + win[1:])) / epsilon


def delay_operator_L(h: HistoryBuffer, rho: np.ndarray, delta_a: float, epsilon: float) -> np.ndarray:
    V = elongation_all(h, epsilon)
    return delta_a * np.sum(rho[:, :, None] * V, axis=0)


def delay_weights(rho: np.ndarray) -> np.ndarray:
    """omega_m for m = 1 .. J+1 (row m-1), shape (J_max + 1, Nx)."""
    om = rho.copy()
    om[:-1] += rho[1:]
    return om


def energy(w, h: HistoryBuffer, rho: np.ndarray, g: Grids) -> float:
    """Dirichlet energy plus the density-weighted memory term, evaluated term by term.

    ``h.entry(0)`` must be z^{n-1}: the history before the current step.
    """
    w = np.asarray(w, dtype=float)
    wt = node_weights(g.Nx)
    win = h.window()
    J = rho.shape[0] - 1
    d0 = w - win[0]
    near = w[None] - win[: J]  # w - z^{n-j}, j = 1..J
    far = w[None] - win[1 : J + 1]  # w - z^{n-j-1}
    terms = (np.sum(near * near, axis=2) + np.sum(far * far, axis=2)) * rho[1:]
    acc = np.sum(d0 * d0, axis=1) * rho[0] + np.sum(terms, axis=0)
    return dirichlet_energy(w, g.delta_x) + g.delta_a / (4.0 * g.epsilon) * float(np.sum(wt * acc))


class StepQuadratic:
    """The energy of one step as a quadratic form in w.

    E(w) = Dir(w) + s * sum_k wt_k (c_k |w_k|^2 - 2 b_k.w_k + q_k), s = da / (4 eps).
    """

    def __init__(self, h: HistoryBuffer, rho: np.ndarray, g: Grids):
        win = h.window()[: rho.shape[0]]
        om = delay_weights(rho)
        self.g = g
        self.wt = node_weights(g.Nx)
        self.scale = g.delta_a / (4.0 * g.epsilon)
        self.c = np.sum(om, axis=0)
        self.b = np.sum(om[:, :, None] * win, axis=0)
        self.q = np.sum(om * np.sum(win * win, axis=2), axis=0)
        self.diag_mass = 2.0 * self.scale * self.wt * self.c
        # banded upper form of K + diag(mass), K the stiffness matrix
        Nx = g.Nx
        inv_dx = 1.0 / g.delta_x
        ab = np.zeros((2, Nx))
        main = np.full(Nx, 2.0 * inv_dx)
        main[0] = main[-1] = inv_dx
        ab[0, 1:] = -inv_dx
        ab[1] = main + self.diag_mass
        self.banded = ab

    def value(self, w) -> float:
        per = self.c * np.sum(w * w, axis=1) - 2.0 * np.sum(self.b * w, axis=1) + self.q
        return dirichlet_energy(w, self.g.delta_x) + self.scale * float(np.sum(self.wt * per))

    def gradient(self, w) -> np.ndarray:
        return stiffness_apply(w, self.g.delta_x) + (2.0 * self.scale * self.wt)[:, None] * (self.c[:, None] * w - self.b)

    def hess_apply(self, v) -> np.ndarray:
        return stiffness_apply(v, self.g.delta_x) + self.diag_mass[:, None] * v

    def change(self, grad, delta, w=None) -> float:
        """E(w + delta) - E(w), exact for a quadratic.

        With ``w`` given (unit field, unit trial point) the normal part of the
        gradient enters through w.delta = -|delta|^2 / 2, which avoids the
        cancellation between its large normal and tiny tangential parts.
        """
        if w is None:
            lin = float(np.sum(grad * delta))
        else:
            mu = np.sum(w * grad, axis=1)
            lin = float(np.sum(tangent(w, grad) * delta)) - 0.5 * float(np.sum(mu * np.sum(delta * delta, axis=1)))
        return lin + 0.5 * float(np.sum(delta * self.hess_apply(delta)))

    def lipschitz(self) -> float:
        ab = self.banded
        off = np.abs(ab[0])
        rows = ab[1] + off + np.concatenate([off[1:], [0.0]])
        return float(rows.max())

    def precondition(self, v) -> np.ndarray:
        return solveh_banded(self.banded, v, check_finite=False)


def energy_gradient(w, h: HistoryBuffer, rho: np.ndarray, g: Grids) -> np.ndarray:
    return StepQuadratic(h, rho, g).gradient(np.asarray(w, dtype=float))


@dataclass
class InnerResult:
    z: np.ndarray
    iterations: int
    grad_norm: float
    energy_drop: float


def minimize_step(
    h: HistoryBuffer,
    rho: np.ndarray,
    g: Grids,
    tol_grad: float = 1e-10,
    max_inner: int = 10000,
    method: str = "preconditioned",
    armijo_c: float = 1e-4,
    backtrack: float = 0.5,
    w0: Optional[np.ndarray] = None,
    quad: Optional[StepQuadratic] = None,
) -> InnerResult:
    """Descent on the product of unit spheres with Armijo backtracking.

    The search direction is the projected gradient, optionally mapped through
    the inverse Hessian of the unconstrained energy (``method="preconditioned"``)
    and projected again.  Trial points are renormalized per node.  Stops once
    max_k |P_k grad_k| <= tol_grad.
    """
    quad = quad or StepQuadratic(h, rho, g)
    w = normalize(h.entry(0) if w0 is None else np.asarray(w0, dtype=float))
    if method == "preconditioned":
        step0 = 1.0
    elif method == "gradient":
        step0 = 1.0 / quad.lipschitz()
    else:
        raise ValueError(f"unknown inner method {method!r}")
    drop = 0.0
    for it in range(max_inner + 1):
        grad = quad.gradient(w)
        pg = tangent(w, grad)
        gnorm = float(np.max(np.sqrt(np.sum(pg * pg, axis=1))))
        if not math.isfinite(gnorm):
            raise MinimizerError(f"non-finite gradient at inner iteration {it}")
        if gnorm <= tol_grad:
            return InnerResult(w, it, gnorm, drop)
        if it == max_inner:
            break
        direction = -pg if method == "gradient" else -tangent(w, quad.precondition(pg))
        # direction is tangent, so grad.direction = pg.direction without the normal part
        slope = float(np.sum(pg * direction))
        if not slope < 0.0:
            raise MinimizerError(f"no descent direction at inner iteration {it} (slope {slope:.3g})")
        tau = step0
        for _ in range(80):
            trial = normalize(w + tau * direction)
            delta = trial - w
            dE = quad.change(grad, delta, w)
            if not math.isfinite(dE):
                raise MinimizerError(f"non-finite energy at inner iteration {it}")
            if dE <= armijo_c * tau * slope:
                break
            tau *= backtrack
        else:
            # line search exhausted: roundoff floor reached above tol_grad
            raise MinimizerError(
                f"line search failed at inner iteration {it}, |P grad| = {gnorm:.3e} > tol_grad = {tol_grad:.1e}"
            )
        w = trial
        drop += dE
    raise MinimizerError(f"no convergence in {max_inner} inner iterations (|P grad| = {gnorm:.3e})")


def lagrange_multiplier(z: np.ndarray, L: np.ndarray, delta_x: float) -> np.ndarray:
    """lambda_k = (Lap z)_k . z_k - L_k . z_k.

    For unit z, z_k.(z_{k+1} - z_k) = -|z_{k+1} - z_k|^2 / 2; that form is
    used for the Laplacian part so the sign survives roundoff.
    """
    e = np.sum(np.diff(z, axis=0) ** 2, axis=1)
    h2 = delta_x * delta_x
    lapz = np.empty(z.shape[0])
    lapz[1:-1] = -(e[1:] + e[:-1]) / (2.0 * h2)
    lapz[0] = -e[0] / h2
    lapz[-1] = -e[-1] / h2
    return lapz - np.sum(L * z, axis=1)


def dissipation(h: HistoryBuffer, rho_next: np.ndarray, zeta_next: np.ndarray, g: Grids) -> float:
    """(da/2) sum_k wt_k sum_{j<J} |V_j|^2 zeta^{n+1}_{j+1} rho^{n+1}_{j+1}; entry 0 of ``h`` is z^n."""
    V = elongation_all(h, g.epsilon)[:-1]
    v2 = np.sum(V * V, axis=2)
    per = np.sum(v2 * zeta_next[1:] * rho_next[1:], axis=0)
    return 0.5 * g.delta_a * float(np.sum(node_weights(g.Nx) * per))


@dataclass
class EnergyReport:
    n: list = field(default_factory=list)
    t: list = field(default_factory=list)
    E: list = field(default_factory=list)
    D: list = field(default_factory=list)
    lambda_l1: list = field(default_factory=list)
    Ldotz_l1: list = field(default_factory=list)
    dz_l2sq: list = field(default_factory=list)
    inner_iterations: list = field(default_factory=list)

    def rows(self):
        return zip(self.n, self.t, self.E, self.D, self.lambda_l1, self.Ldotz_l1, self.dz_l2sq)


@dataclass
class FlowTrajectory:
    grids: Grids
    n_values: list = field(default_factory=list)
    z: list = field(default_factory=list)
    lam: list = field(default_factory=list)
    report: EnergyReport = field(default_factory=EnergyReport)
    tol_energy: float = 0.0
    max_energy_excess: float = -math.inf
    max_unit_defect: float = 0.0
    max_lambda: float = -math.inf
    min_Ldotz: float = math.inf
    sup_lambda_l1: float = 0.0
    Ldotz_l1_xt: float = 0.0
    dz_sum: float = 0.0
    density_yt_sq: float = 0.0

    def times(self):
        return [n * self.grids.delta_t for n in self.n_values]

    def summary(self) -> dict:
        r = self.report
        return {
            "steps": len(r.n),
            "E_0": r.E[0] if r.E else None,
            "E_N": r.E[-1] if r.E else None,
            "tol_energy": self.tol_energy,
            "max_energy_excess": self.max_energy_excess,
            "max_unit_defect": self.max_unit_defect,
            "max_lambda": self.max_lambda,
            "min_Ldotz": self.min_Ldotz,
            "sup_lambda_l1": self.sup_lambda_l1,
            "Ldotz_l1_xt": self.Ldotz_l1_xt,
            "dz_sum": self.dz_sum,
            "max_inner_iterations": max(r.inner_iterations) if r.inner_iterations else 0,
        }


def run_flow(
    p,
    n,
    g: Grids,
    density_mode: str = "cell_average",
    store_stride: int = 1,
    check_energy: bool = True,
    density_hook=None,
) -> FlowTrajectory:
    """Run the coupled scheme for n = 0 .. N.

    The density is stepped alongside (one step ahead, for the dissipation).
    ``density_hook(n, rho)`` is called with every density slab n = -1 .. N
    and may accumulate statistics without storing the trajectory.
    """
    rates = RateTable(p, g)
    h = HistoryBuffer.from_past(p, g)
    traj = FlowTrajectory(grids=g)
    rep = traj.report
    dt = g.delta_t
    N = g.N

    state = init_density(p, g, density_mode)
    if density_hook:
        density_hook(state.n, state.rho)
    state = step_density(state, p, g, rates)  # rho^0
    if density_hook:
        density_hook(state.n, state.rho)
    E_prev = None
    for step in range(N + 1):
        rho = state.rho
        quad = StepQuadratic(h, rho, g)
        res = minimize_step(
            h, rho, g, n.tol_grad, n.max_inner, n.inner_method, n.armijo_c, n.backtrack, quad=quad
        )
        z = res.z
        E = energy(z, h, rho, g)
        z_prev = h.entry(0).copy()
        h.push(z)
        L = delay_operator_L(h, rho, g.delta_a, g.epsilon)
        Ldotz = np.sum(L * z, axis=1)
        lam = lagrange_multiplier(z, L, g.delta_x)
        dz = l2_x((z - z_prev) / dt) ** 2

        if step == 0:
            traj.tol_energy = 10.0 * n.tol_grad * (1.0 + E)
        # advance the density; D_n needs rho^{n+1} and zeta^{n+1}
        nxt = step_density(state, p, g, rates)
        if density_hook and nxt.n <= N:
            density_hook(nxt.n, nxt.rho)
        D = dissipation(h, nxt.rho, rates.zeta(nxt.n * dt), g)

        if E_prev is not None:
            excess = E + dt * rep.D[-1] - E_prev
            traj.max_energy_excess = max(traj.max_energy_excess, excess)
            if check_energy and excess > traj.tol_energy:
                raise EnergyInequalityError(
                    f"energy chain broken at n={step}: E_n + dt*D_(n-1) - E_(n-1) = {excess:.3e} > {traj.tol_energy:.3e}"
                )
        E_prev = E

        rep.n.append(step)
        rep.t.append(step * dt)
        rep.E.append(E)
        rep.D.append(D)
        lam_l1 = l1_x(lam)
        Lz_l1 = l1_x(Ldotz)
        rep.lambda_l1.append(lam_l1)
        rep.Ldotz_l1.append(Lz_l1)
        rep.dz_l2sq.append(dz)
        rep.inner_iterations.append(res.iterations)

        traj.max_unit_defect = max(traj.max_unit_defect, float(np.max(np.abs(np.sqrt(np.sum(z * z, axis=1)) - 1.0))))
        traj.max_lambda = max(traj.max_lambda, float(lam.max()))
        traj.min_Ldotz = min(traj.min_Ldotz, float(Ldotz.min()))
        traj.sup_lambda_l1 = max(traj.sup_lambda_l1, lam_l1)
        traj.Ldotz_l1_xt += dt * Lz_l1
        if step >= 2:
            # differences z^{m+1} - z^m for m >= 1: the first two steps carry the start-up jump
            traj.dz_sum += dt * dz
        if step % store_stride == 0 or step == N:
            traj.n_values.append(step)
            traj.z.append(z)
            traj.lam.append(lam)
        state = nxt
    return traj


def warm_start_probe(h: HistoryBuffer, rho: np.ndarray, g: Grids, size: float = 1e-3,
                     tol_grad: float = 1e-12, max_inner: int = 10000, seed: int = 0) -> float:
    """C0 distance between minimizers started at z^{n-1} and at a tangential perturbation of it."""
    quad = StepQuadratic(h, rho, g)
    base = minimize_step(h, rho, g, tol_grad, max_inner, quad=quad).z
    w = normalize(h.entry(0))
    rng = np.random.default_rng(seed)
    bump = tangent(w, rng.standard_normal(w.shape))
    other = minimize_step(h, rho, g, tol_grad, max_inner, quad=quad, w0=normalize(w + size * bump)).z
    return float(np.max(np.sqrt(np.sum((base - other) ** 2, axis=1))))


def _fmt(v) -> str:
    return format(float(v), ".17g")


def write_flow_csv(traj: FlowTrajectory, fh):
    g = traj.grids
    d = traj.z[0].shape[1] if traj.z else 0
    x = g.x
    fh.write("n,t,k,x," + ",".join(f"z_{i}" for i in range(1, d + 1)) + ",lambda\n")
    for n, z, lam in zip(traj.n_values, traj.z, traj.lam):
        t = _fmt(n * g.delta_t)
        for k in range(g.Nx):
            comps = ",".join(_fmt(v) for v in z[k])
            fh.write(f"{n},{t},{k},{_fmt(x[k])},{comps},{_fmt(lam[k])}\n")


def write_energy_csv(traj: FlowTrajectory, fh):
    fh.write("n,t,E,D,lambda_l1,Ldotz_l1,dz_l2sq\n")
    for row in traj.report.rows():
        fh.write(",".join([str(row[0])] + [_fmt(v) for v in row[1:]]) + "\n")
