import io
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from delaymm.density import RateTable
from delaymm.flow import (
    HistoryBuffer,
    StepQuadratic,
    delay_operator_L,
    dissipation,
    elongation_all,
    elongation_V,
    energy,
    energy_gradient,
    lagrange_multiplier,
    minimize_step,
    normalize,
    run_flow,
    warm_start_probe,
    write_energy_csv,
    write_flow_csv,
)
from delaymm.grids import Grids, dirichlet_energy
from delaymm.model import make_grids, make_problem

G = Grids(Nx=7, delta_a=0.25, A_max=1.0, epsilon=0.1, T=0.1)  # J_max = 4


def _history(fields):
    """HistoryBuffer whose entry(j) is fields[j]."""
    h = HistoryBuffer(len(fields) - 2, fields[0].shape[0], fields[0].shape[1])
    for f in reversed(fields):
        h.push(np.asarray(f, dtype=float))
    return h


def _random_setup(rng, g=G, d=3, unit=True):
    L = g.J_max + 2
    fields = [rng.standard_normal((g.Nx, d)) for _ in range(L)]
    if unit:
        fields = [normalize(f) for f in fields]
    else:
        # z^n on the sphere, older fields inside the ball
        fields = [normalize(fields[0])] + [normalize(f) * rng.random((g.Nx, 1)) for f in fields[1:]]
    rho = rng.random((g.J_max + 1, g.Nx))
    return _history(fields), rho


def test_history_indexing_across_wraps():
    h = HistoryBuffer(2, 3, 2)  # window of 4, buffer of 8
    for n in range(25):
        h.push(np.full((3, 2), float(n)))
        for j in range(min(n + 1, h.L)):
            assert np.all(h.entry(j) == n - j)
            assert np.all(h.window()[j] == n - j)
    with pytest.raises(IndexError):
        h.entry(h.L)


def test_past_fill_is_averaged_and_bounded():
    p, n, _ = make_problem(zp=["cos(30*t)", "sin(30*t)"], T=0.1, validate=False)
    g = make_grids(p, n)
    h = HistoryBuffer.from_past(p, g)
    norms = np.sqrt(np.sum(h.window() ** 2, axis=2))
    assert norms.max() <= 1 + 1e-12
    # entry(0) averages z_p over [-dt, 0]
    dt = g.delta_t
    exact = (math.sin(0.0) - math.sin(-30 * dt)) / (30 * dt)
    assert h.entry(0)[0, 0] == pytest.approx(exact, rel=1e-10)


def test_elongation_examples():
    e1, e2 = np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])
    h = _history([e1, e2, e2, e2])
    assert np.allclose(elongation_V(h, 1, 0.1), (e1 - e2) / 0.1)
    assert np.allclose(elongation_V(h, 0, 0.1), (e1 - e2) / 0.2)
    h = _history([e1, e1, e2, e2])
    assert np.all(elongation_V(h, 0, 0.3) == 0.0)
    h = _history([e1] * 4)
    assert np.all(elongation_all(h, 0.1) == 0.0)


def test_delay_operator_single_cell():
    rng = np.random.default_rng(3)
    h, _ = _random_setup(rng)
    rho = np.zeros((G.J_max + 1, G.Nx))
    rho[2] = 0.7
    L = delay_operator_L(h, rho, G.delta_a, G.epsilon)
    assert np.allclose(L, G.delta_a * 0.7 * elongation_V(h, 2, G.epsilon), rtol=1e-14)


@given(st.integers(0, 2**32 - 1), st.booleans())
def test_Ldotz_identity_and_sign(seed, unit):
    rng = np.random.default_rng(seed)
    h, rho = _random_setup(rng, unit=unit)
    win = h.window()
    z = win[0]
    L = delay_operator_L(h, rho, G.delta_a, G.epsilon)
    lhs = np.sum(L * z, axis=1)
    sq = lambda a: np.sum(a * a, axis=-1)  # noqa: E731
    J = G.J_max
    rhs = sq(z - win[1]) * rho[0]
    rhs = rhs + np.sum((sq(z[None] - win[1 : J + 1]) + sq(z[None] - win[2 : J + 2]))[: J] * rho[1:], axis=0)
    rhs *= G.delta_a / (4 * G.epsilon)
    if unit:
        assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-12)
    assert lhs.min() >= -1e-12


def test_energy_trivial_cases():
    e = np.tile([0.0, 1.0, 0.0], (G.Nx, 1))
    h = _history([e] * (G.J_max + 2))
    rho = np.random.default_rng(0).random((G.J_max + 1, G.Nx))
    assert energy(e, h, rho, G) == 0.0
    assert np.all(energy_gradient(e, h, rho, G) == 0.0)
    w = normalize(np.random.default_rng(1).standard_normal((G.Nx, 3)))
    assert energy(w, h, np.zeros_like(rho), G) == pytest.approx(dirichlet_energy(w, G.delta_x), rel=1e-15)


def test_quadratic_form_matches_direct_energy():
    rng = np.random.default_rng(5)
    for _ in range(20):
        h, rho = _random_setup(rng, unit=False)
        w = rng.standard_normal((G.Nx, 3))
        q = StepQuadratic(h, rho, G)
        assert q.value(w) == pytest.approx(energy(w, h, rho, G), rel=1e-12)
        delta = 1e-3 * rng.standard_normal(w.shape)
        assert q.change(q.gradient(w), delta) == pytest.approx(
            energy(w + delta, h, rho, G) - energy(w, h, rho, G), rel=1e-6, abs=1e-12
        )


def gradient_fd_error(rng, g=G, d=3):
    """Max relative deviation of the gradient from central differences of the energy."""
    h, rho = _random_setup(rng, g, d, unit=bool(rng.integers(2)))
    w = 2.0 * rng.standard_normal((g.Nx, d))  # off the manifold
    grad = energy_gradient(w, h, rho, g)
    step = 1e-5
    fd = np.empty_like(w)
    for k in range(g.Nx):
        for i in range(d):
            wp, wm = w.copy(), w.copy()
            wp[k, i] += step
            wm[k, i] -= step
            fd[k, i] = (energy(wp, h, rho, g) - energy(wm, h, rho, g)) / (2 * step)
    return float(np.max(np.abs(fd - grad)) / np.max(np.abs(grad)))


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(2024)
    errs = [gradient_fd_error(rng) for _ in range(100)]
    assert max(errs) <= 1e-6


def test_minimizer_constant_history():
    e = normalize(np.tile([0.3, -0.4, 0.5], (G.Nx, 1)))
    h = _history([e] * (G.J_max + 2))
    rho = 0.5 + np.random.default_rng(0).random((G.J_max + 1, G.Nx))
    res = minimize_step(h, rho, G)
    assert np.max(np.abs(res.z - e)) <= 1e-12
    assert res.iterations == 0


@pytest.mark.parametrize("method", ["preconditioned", "gradient"])
def test_minimizer_contract(method):
    rng = np.random.default_rng(11)
    h, rho = _random_setup(rng)
    q = StepQuadratic(h, rho, G)
    res = minimize_step(h, rho, G, tol_grad=1e-10, method=method, quad=q)
    z = res.z
    assert np.max(np.abs(np.sqrt(np.sum(z * z, axis=1)) - 1)) <= 1e-12
    grad = q.gradient(z)
    pg = grad - np.sum(z * grad, axis=1)[:, None] * z
    assert np.max(np.sqrt(np.sum(pg * pg, axis=1))) <= 1e-10
    assert energy(z, h, rho, G) <= energy(normalize(h.entry(0)), h, rho, G) + 1e-14
    tight = minimize_step(h, rho, G, tol_grad=5e-11, method=method, quad=q)
    assert energy(tight.z, h, rho, G) <= energy(z, h, rho, G) + 1e-14


def test_multiplier_sign_and_zero():
    e = np.tile([1.0, 0.0], (5, 1))
    assert np.all(lagrange_multiplier(e, np.zeros((5, 2)), 0.25) == 0.0)
    rng = np.random.default_rng(8)
    for _ in range(20):
        h, rho = _random_setup(rng)
        z = minimize_step(h, rho, G).z
        h.push(z)
        L = delay_operator_L(h, rho, G.delta_a, G.epsilon)
        assert lagrange_multiplier(z, L, G.delta_x).max() <= 1e-12


def test_dissipation_examples():
    rng = np.random.default_rng(4)
    e = np.tile([1.0, 0.0], (G.Nx, 1))
    zeta = np.ones((G.J_max + 1, G.Nx))
    rho = rng.random((G.J_max + 1, G.Nx))
    assert dissipation(_history([e] * (G.J_max + 2)), rho, zeta, G) == 0.0
    # a jump between z^n and every older field: only the j = 0 term sees |z^n - z^{n-1}|^2 / (2 eps)^2
    f = np.tile([0.0, 1.0], (G.Nx, 1))
    h = _history([e] + [f] * (G.J_max + 1))
    rho_one = np.zeros_like(rho)
    rho_one[1] = 1.0
    expected = 0.5 * G.delta_a * 1.0 * (2.0 / (2 * G.epsilon) ** 2) * 1.0
    assert dissipation(h, rho_one, zeta, G) == pytest.approx(expected, rel=1e-14)
    for _ in range(10):
        h, rho = _random_setup(rng)
        assert dissipation(h, rho, zeta, G) >= 0.0


def test_trivial_flow():
    p, n, _ = make_problem(zp=["0", "0", "1"], T=0.05, Nx=9)
    g = make_grids(p, n)
    traj = run_flow(p, n, g)
    for z in traj.z:
        assert np.max(np.abs(z - np.array([0.0, 0.0, 1.0]))) <= 1e-8
    assert max(traj.report.E) <= 1e-16
    assert max(traj.report.D) <= 1e-28
    assert max(np.max(np.abs(lam)) for lam in traj.lam) <= 1e-12


def test_spatially_constant_rotation_stays_constant():
    p, n, _ = make_problem(zp=["cos(0.3*t)", "sin(0.3*t)"], T=0.02, Nx=9)
    traj = run_flow(p, n, make_grids(p, n))
    for z in traj.z:
        assert np.max(np.abs(z - z[0])) <= 1e-8


def test_flow_energy_decreases_and_invariants():
    p, n, _ = make_problem(T=0.1, Nx=9)
    g = make_grids(p, n)
    traj = run_flow(p, n, g, store_stride=25)
    E = traj.report.E
    assert E[-1] < E[0]
    assert traj.max_energy_excess <= traj.tol_energy
    assert traj.max_unit_defect <= 1e-12
    assert traj.max_lambda <= 1e-12
    assert traj.min_Ldotz >= -1e-12
    assert traj.n_values == list(range(0, g.N + 1, 25)) + ([g.N] if g.N % 25 else [])
    buf = io.StringIO()
    write_flow_csv(traj, buf)
    assert buf.getvalue().startswith("n,t,k,x,z_1,z_2,lambda\n0,0,0,0,")
    buf = io.StringIO()
    write_energy_csv(traj, buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "n,t,E,D,lambda_l1,Ldotz_l1,dz_l2sq"
    assert len(lines) == g.N + 2


def test_warm_start_probe_small():
    rng = np.random.default_rng(21)
    h, rho = _random_setup(rng)
    assert warm_start_probe(h, rho, G, tol_grad=1e-12) <= 1e-8
