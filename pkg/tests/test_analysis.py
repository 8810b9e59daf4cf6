import json
import math

import numpy as np
import pytest

from delaymm.analysis import (
    ConvergenceTable,
    KernelAccumulator,
    delta_a_refinement,
    dumps_json,
    emit,
    initial_layer_report,
    kernel_limit,
    layer_csv,
    limit_moments_csv,
    sample_indices,
    transposed_kernel,
)
from delaymm.expr import parse_rate_expression
from delaymm.model import make_grids, make_problem


def test_orders_and_nan():
    t = ConvergenceTable("h", ["err"])
    for h, e in [(0.4, 1e-2), (0.2, 2.5e-3), (0.1, 1e-14), (0.03, 1e-15)]:
        t.add(h=h, err=e)
    o = t.orders("err")
    assert o[0] == pytest.approx(2.0)
    assert math.isnan(o[1]) and math.isnan(o[2])
    assert t.halvings() == [True, True, False]


def test_empty_table_header_only(tmp_path):
    t = ConvergenceTable("epsilon", ["err_z_c0", "Ldotz_l1"])
    emit(t, tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_bytes() == b"epsilon,err_z_c0,Ldotz_l1,order_err_z_c0,order_Ldotz_l1\n"


def test_json_round_trip(tmp_path):
    t = ConvergenceTable("delta_a", ["err_yt"], meta={"mode": "cell_average"})
    t.add(delta_a=0.04, err_yt=0.1, N=3)
    t.add(delta_a=0.02, err_yt=0.05, N=6)
    emit(t, tmp_path / "t.json", "json")
    back = ConvergenceTable.from_dict(json.loads((tmp_path / "t.json").read_text()))
    assert back == t
    assert dumps_json({"v": 0.1}) == '{\n  "v": 0.1\n}\n'


def test_csv_is_bit_stable(tmp_path):
    t = ConvergenceTable("h", ["err"])
    t.add(h=0.1, err=1 / 3)
    emit(t, tmp_path / "a.csv")
    assert (tmp_path / "a.csv").read_bytes().split(b"\n")[1] == b"0.10000000000000001,0.33333333333333331,nan"


def test_sample_indices():
    assert sample_indices([0.01, 0.02], 0.001) == [10, 20]
    with pytest.raises(ValueError):
        sample_indices([0.0105], 0.001)


def test_da_refinement_metadata_and_steady():
    p, n, _ = make_problem(epsilon=0.1, T=0.2, Nx=3)
    tab = delta_a_refinement(p, n, [0.04, 0.02], mode="discrete_steady")
    assert all(e <= 1e-12 for e in tab.values("err_yt"))
    dts = tab.values("delta_t")
    assert dts[1] == pytest.approx(dts[0] / 2, rel=1e-14)
    assert all(c == pytest.approx(1.0) for c in tab.values("cfl"))
    with pytest.raises(ValueError):
        delta_a_refinement(*make_problem(beta="1+0.1*t", validate=False)[:2], [0.04])


def test_kernel_zero_cases():
    p, n, _ = make_problem(rho_I="well_prepared", epsilon=0.1, T=0.2, Nx=3)
    g = make_grids(p, n)
    tab = transposed_kernel(p, n, parse_rate_expression("exp(-a)"), mode="discrete_steady")
    assert abs(tab.rows[0]["K_eps"]) <= 1e-8
    assert abs(tab.rows[0]["limit"]) <= 1e-8
    acc = KernelAccumulator(parse_rate_expression("0"), g)
    acc.add(0, np.ones((g.J_max + 1, g.Nx)))
    assert acc.value() == 0.0
    assert kernel_limit(p, g, parse_rate_expression("0")) == 0.0


def test_layer_reports():
    p, n, _ = make_problem(Nx=3)
    rep = initial_layer_report(p, make_grids(p, n))
    assert rep["status"] == "fit" and rep["slope"] <= -0.9
    assert layer_csv(rep).startswith("ttilde,mass\n0,")
    p2, n2, _ = make_problem(Nx=3, zeta="2", zeta0="2", rho_I="0.25*exp(-2*a)",
                             bounds="beta_min=1, beta_max=1, zeta_min=2, zeta_max=2, M=2, mu_I_min=0.12, mu0_min=0.05")
    assert initial_layer_report(p2, make_grids(p2, n2))["slope"] <= -1.8
    p3, n3, _ = make_problem(Nx=3, rho_I="well_prepared")
    assert initial_layer_report(p3, make_grids(p3, n3))["status"] == "exact"


def test_limit_moments_csv():
    p, n, _ = make_problem(Nx=3)
    text = limit_moments_csv(p, make_grids(p, n), [0.0])
    assert text.splitlines()[0] == "t,k,x,mu00,mu10"
    assert len(text.splitlines()) == 4
