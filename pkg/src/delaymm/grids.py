"""Grids, the discrete Dirichlet energy and Laplacian, and diagnostic norms.

Space is a uniform node grid on [0, 1] with trapezoid node weights; the
Laplacian uses a reflected ghost node at each end, which makes it exactly
minus the weighted gradient of the edge-based Dirichlet energy.  All
reductions sum in a fixed order so results do not depend on thread count.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class GridMismatch(ValueError):
    pass


def age_cell_count(A_max: float, delta_a: float) -> int:
    return int(math.ceil(A_max / delta_a * (1.0 - 1e-12)))


def step_count(T: float, delta_t: float) -> int:
    # absorb the representation error of T/delta_t (0.05*0.02 is not 0.001)
    return int(math.floor(T / delta_t * (1.0 + 1e-12)))


@dataclass(frozen=True)
class Grids:
    Nx: int
    delta_a: float
    A_max: float
    epsilon: float
    T: float

    def __post_init__(self):
        if self.Nx < 2:
            raise ValueError("Nx must be at least 2")
        if self.J_max < 2:
            raise ValueError("J_max = ceil(A_max/delta_a) must be at least 2")

    @property
    def J_max(self) -> int:
        return age_cell_count(self.A_max, self.delta_a)

    @property
    def delta_x(self) -> float:
        return 1.0 / (self.Nx - 1)

    @property
    def delta_t(self) -> float:
        return self.epsilon * self.delta_a

    @property
    def N(self) -> int:
        return step_count(self.T, self.delta_t)

    @property
    def x(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.Nx)

    @property
    def ages(self) -> np.ndarray:
        """Left edges j*delta_a of the J_max + 1 age cells."""
        return np.arange(self.J_max + 1) * self.delta_a

    @property
    def weights(self) -> np.ndarray:
        return node_weights(self.Nx)

    def time(self, n: int) -> float:
        return n * self.delta_t


def node_weights(Nx: int) -> np.ndarray:
    w = np.full(Nx, 1.0 / (Nx - 1))
    w[0] *= 0.5
    w[-1] *= 0.5
    return w


def _as_field(z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    return z[:, None] if z.ndim == 1 else z


def dirichlet_energy(z, delta_x: float) -> float:
    """Half the edge sum of |z_{k+1} - z_k|^2 / delta_x."""
    z = _as_field(z)
    dz = np.diff(z, axis=0)
    return 0.5 * float(np.sum(np.sum(dz * dz, axis=1))) / delta_x


def discrete_laplacian(z, delta_x: float) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.shape[0] < 2:
        raise ValueError("need at least two nodes")
    lap = np.empty_like(z)
    h2 = delta_x * delta_x
    lap[1:-1] = (z[2:] - 2.0 * z[1:-1] + z[:-2]) / h2
    lap[0] = 2.0 * (z[1] - z[0]) / h2
    lap[-1] = 2.0 * (z[-2] - z[-1]) / h2
    return lap


def stiffness_apply(z, delta_x: float) -> np.ndarray:
    """Gradient of ``dirichlet_energy``: equals -weights * Laplacian."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    dz = (z[1:] - z[:-1]) / delta_x
    out[0] = -dz[0]
    out[-1] = dz[-1]
    out[1:-1] = dz[:-1] - dz[1:]
    return out


def _pointwise(f) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    if f.ndim == 1:
        return np.abs(f)
    return np.sqrt(np.sum(f * f, axis=-1))


def linf_x(f) -> float:
    return float(np.max(_pointwise(f)))


def l1_x(f) -> float:
    p = _pointwise(f)
    return float(np.sum(node_weights(p.shape[0]) * p))


def l2_x(f) -> float:
    p = _pointwise(f)
    return math.sqrt(float(np.sum(node_weights(p.shape[0]) * p * p)))


def yt_norm(traj, delta_t: float, delta_a: float, age_weight: bool = False) -> float:
    """Sum over time slabs and age cells of dt*da*max_x|f|.

    ``traj`` has shape (n_times, n_ages, Nx). With ``age_weight`` the cell
    at left edge a_j is weighted by (1 + a_j).
    """
    f = np.abs(np.asarray(traj, dtype=float))
    per_cell = f.max(axis=2)
    if age_weight:
        per_cell = per_cell * (1.0 + np.arange(f.shape[1]) * delta_a)
    return float(np.sum(np.sum(per_cell, axis=1))) * delta_a * delta_t


def yt_slab(slab, delta_a: float, age_weight: bool = False) -> float:
    """Age part of ``yt_norm`` for a single (n_ages, Nx) slab, without dt."""
    per_cell = np.abs(np.asarray(slab, dtype=float)).max(axis=1)
    if age_weight:
        per_cell = per_cell * (1.0 + np.arange(per_cell.shape[0]) * delta_a)
    return float(np.sum(per_cell)) * delta_a


def c0_error(zA, zB) -> float:
    """Max over nodes and shared times of the pointwise distance."""
    zA = np.asarray(zA, dtype=float)
    zB = np.asarray(zB, dtype=float)
    if zA.shape != zB.shape:
        raise GridMismatch(f"shapes differ: {zA.shape} vs {zB.shape}")
    d = zA - zB
    if d.ndim == 1:
        return float(np.max(np.abs(d)))
    return float(np.max(np.sqrt(np.sum(d * d, axis=-1))))
