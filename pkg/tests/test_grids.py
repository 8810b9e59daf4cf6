import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from delaymm.grids import (
    GridMismatch,
    Grids,
    c0_error,
    dirichlet_energy,
    discrete_laplacian,
    l1_x,
    l2_x,
    linf_x,
    node_weights,
    stiffness_apply,
    yt_norm,
)


def test_grid_layout():
    g = Grids(Nx=11, delta_a=0.1, A_max=1.0, epsilon=0.05, T=0.33)
    x = g.x
    assert x[0] == 0.0 and x[-1] == 1.0
    assert np.all(np.diff(x) > 0)
    assert np.allclose(np.diff(x), 0.1)
    assert g.J_max == 10
    assert g.delta_t == 0.05 * 0.1
    assert g.N * g.delta_t <= g.T * (1 + 1e-12) < (g.N + 1) * g.delta_t


def test_step_count_absorbs_representation_error():
    g = Grids(Nx=3, delta_a=0.02, A_max=1.0, epsilon=0.05, T=1.0)
    assert g.N == 1000


def test_j_max_too_small():
    with pytest.raises(ValueError):
        Grids(Nx=3, delta_a=1.0, A_max=1.0, epsilon=0.1, T=1.0)


def test_dirichlet_constant_and_two_nodes():
    assert dirichlet_energy(np.tile([0.0, 1.0], (7, 1)), 1 / 6) == 0.0
    assert dirichlet_energy(np.array([[1.0, 0.0], [0.0, 1.0]]), 1.0) == 1.0


def test_dirichlet_circle():
    x = np.linspace(0, 1, 101)
    z = np.stack([np.cos(math.pi * x), np.sin(math.pi * x)], axis=1)
    assert abs(dirichlet_energy(z, 0.01) - math.pi**2 / 2) < 1e-3


def test_laplacian_quadratic_and_constant():
    x = np.linspace(0, 1, 21)
    lap = discrete_laplacian((x**2)[:, None], x[1] - x[0])
    assert np.allclose(lap[1:-1], 2.0, atol=1e-9)
    assert np.all(discrete_laplacian(np.ones((5, 3)), 0.25) == 0.0)


def test_laplacian_is_weighted_energy_gradient():
    rng = np.random.default_rng(1)
    Nx, dx = 12, 1 / 11
    z = rng.standard_normal((Nx, 3))
    grad = stiffness_apply(z, dx)
    assert np.allclose(grad, -node_weights(Nx)[:, None] * discrete_laplacian(z, dx), rtol=1e-12, atol=1e-12)
    h = 1e-6
    fd = np.zeros_like(z)
    for k in range(Nx):
        for i in range(3):
            zp, zm = z.copy(), z.copy()
            zp[k, i] += h
            zm[k, i] -= h
            fd[k, i] = (dirichlet_energy(zp, dx) - dirichlet_energy(zm, dx)) / (2 * h)
    assert np.max(np.abs(fd - grad)) <= 1e-6 * np.max(np.abs(grad))


@given(arrays(float, (9, 2), elements=st.floats(-3, 3)), arrays(float, (9, 2), elements=st.floats(-3, 3)))
def test_bilinear_identity(u, v):
    dx = 1 / 8
    lhs = float(np.sum(node_weights(9)[:, None] * u * (-discrete_laplacian(v, dx))))
    rhs = float(np.sum(np.diff(u, axis=0) * np.diff(v, axis=0))) / dx
    assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(rhs), float(np.sum(u * u) + np.sum(v * v)) / dx)


def test_norm_examples():
    assert l1_x(np.ones(17)) == pytest.approx(1.0, rel=1e-15)
    assert l2_x(np.ones(17)) == pytest.approx(1.0, rel=1e-15)
    assert linf_x(np.array([[3.0, 4.0], [0.0, 1.0]])) == 5.0
    z = np.random.default_rng(0).standard_normal((4, 5, 2))
    assert c0_error(z, z) == 0.0
    with pytest.raises(GridMismatch):
        c0_error(z, z[:2])


def test_yt_norm_box():
    A, T, da, dt = 2.0, 0.5, 0.1, 0.05
    traj = np.ones((int(T / dt), int(A / da), 3))
    assert yt_norm(traj, dt, da) == pytest.approx(A * T, abs=da * T)


_field = arrays(float, (7, 2), elements=st.floats(-10, 10))


@given(_field, _field, st.floats(-5, 5))
def test_norm_properties(f, h, c):
    for norm in (linf_x, l1_x, l2_x):
        assert norm(c * f) == pytest.approx(abs(c) * norm(f), rel=1e-12, abs=1e-12)
        assert norm(f + h) <= norm(f) + norm(h) + 1e-12
