import warnings

import numpy as np
import pytest

import dampc.simulate as simulate
from dampc.errors import InconsistentData, SetpointUnderdetermined
from dampc.model import build_two_state_model, eval_matrices, offline_design
from dampc.simulate import (
    CONTROLLERS,
    SimTrace,
    batch_compare,
    run_closed_loop,
    sample_disturbances,
    sample_theta,
    stage_costs,
    true_setpoint_cost,
    true_setpoints,
)


@pytest.fixture(scope="module")
def tiny():
    model = build_two_state_model(T=8, N=3, N_theta=2)
    return model, offline_design(model, 0.96)


@pytest.fixture(scope="module")
def tiny_traces(tiny):
    model, design = tiny
    theta = sample_theta(model, 7, 0)
    w = sample_disturbances(model, 7, 0, 0)
    return theta, {c: run_closed_loop(model, design, c, theta, w) for c in CONTROLLERS}


def test_zero_everything_gives_zero_input_and_cost():
    T = 8
    model = build_two_state_model(T=T, N=3, N_theta=2, refs=np.zeros((T + 1, 2))).with_(theta_bar0=np.zeros(2))
    design = offline_design(model, 0.96)
    for c in CONTROLLERS:
        tr = run_closed_loop(model, design, c, np.zeros(2), np.zeros((T + 1, 2)))
        assert np.abs(tr.u).max() <= 1e-9
        assert tr.total_cost <= 1e-9


def test_trace_invariants(tiny, tiny_traces):
    model, _ = tiny
    theta, traces = tiny_traces
    A, B = eval_matrices(model, theta)
    for tr in traces.values():
        assert np.max(tr.x @ model.F.T + tr.u @ model.G.T) <= 1 + 1e-7
        assert np.allclose(tr.x[1:], tr.x[:-1] @ A.T + tr.u[:-1] @ B.T + tr.w[:-1], atol=1e-12)
        assert np.all(tr.h_theta - tr.H_theta @ theta >= -1e-8)
        assert np.all(np.diff(tr.h_theta, axis=0) <= 1e-12)
        assert np.all(np.diff(tr.h_theta.sum(axis=1)) <= 1e-12)
        assert np.nanmax(tr.shift_violation) <= 1e-7


def test_cost_matches_independent_recomputation(tiny, tiny_traces):
    model, _ = tiny
    theta, traces = tiny_traces
    A, B = eval_matrices(model, theta)
    # true setpoints by a direct solve: C = I and B invertible pin x* = r and u* uniquely
    r = model.refs[: model.T + 1]
    u_star = np.array([np.linalg.solve(B, (r[t + 1] if t < model.T else r[t]) - A @ r[t]) for t in range(model.T + 1)])
    # the chain starts at x0 = 0 = r_0 for this reference
    for tr in traces.values():
        ref = np.abs((tr.x - r) @ model.Q.T).max(axis=1) + np.abs((tr.u - u_star) @ model.R.T).max(axis=1)
        assert np.allclose(tr.stage_cost, ref, atol=1e-9)
        assert true_setpoint_cost(model, theta, tr) == pytest.approx(tr.total_cost, abs=1e-9)


def test_perfect_tracking_costs_zero(tiny):
    model, _ = tiny
    theta = np.array([0.3, 0.1])
    xs, us, resid, under = true_setpoints(model, theta)
    assert resid < 1e-9 and not under
    T = model.T
    tr = SimTrace("dual", theta, xs, us, np.zeros_like(xs), model.refs[: T + 1], np.zeros(T + 1), ["Optimal"] * (T + 1), np.zeros(T + 1, int),
                  np.zeros((T + 1, 4)), np.zeros((T + 1, 2)), np.zeros((4, 2)), np.zeros(T + 1), np.zeros(T + 1))
    assert true_setpoint_cost(model, theta, tr) == pytest.approx(0.0, abs=1e-9)


def test_constant_output_offset_formula(tiny):
    model, _ = tiny
    theta = np.array([0.3, 0.1])
    xs, us, _, _ = true_setpoints(model, theta)
    delta = np.array([0.05, -0.2])
    r = model.refs[: model.T + 1]
    costs = stage_costs(model, xs + delta, us, r, us)
    assert costs.sum() == pytest.approx((model.T + 1) * np.abs(model.Q @ delta).max())


def test_underdetermined_setpoints_warn():
    model = build_two_state_model(T=5).with_(C=np.array([[1.0, 0.0]]), Q=np.eye(1), refs=np.zeros((6, 1)))
    with pytest.warns(SetpointUnderdetermined):
        _, _, _, under = true_setpoints(model, np.zeros(2))
    assert under


def test_sampling_is_reproducible_and_in_bounds(tiny):
    model, _ = tiny
    a = [sample_theta(model, 11, i) for i in range(5)]
    b = [sample_theta(model, 11, i) for i in range(5)]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not np.array_equal(a[0], a[1])
    assert all(np.all(np.abs(t) <= 1) for t in a)
    w = sample_disturbances(model, 11, 2, 1)
    assert w.shape == (model.T + 1, 2)
    assert np.all(np.abs(w) <= 0.1)
    assert np.array_equal(w, sample_disturbances(model, 11, 2, 1))
    assert not np.array_equal(w, sample_disturbances(model, 11, 2, 0))
    assert not np.array_equal(a[0], sample_theta(model, 12, 0))


def test_csv_round_trip_is_exact(tiny_traces, tmp_path):
    _, traces = tiny_traces
    tr = traces["dual"]
    path = tmp_path / "t.csv"
    tr.to_csv(path)
    back = SimTrace.from_csv(path)
    for name in ("x", "u", "w", "r", "stage_cost", "h_theta", "theta_bar", "H_theta", "theta_star", "outer_iters"):
        assert np.array_equal(getattr(back, name), getattr(tr, name)), name
    assert list(back.status) == list(tr.status)
    header = [ln for ln in path.read_text().splitlines() if not ln.startswith("#")][0].split(",")
    assert header[:3] == ["t", "x0", "x1"]
    assert header.index("stage_cost") < header.index("status") < header.index("outer_iters") < header.index("h_theta0")


def test_batch_pairs_draws_and_reports_failures(tiny, monkeypatch, tmp_path):
    model, design = tiny
    res = batch_compare(model, design, 2, 2, ("dual", "passive"), master_seed=5, out_dir=tmp_path / "b")
    assert len(res.rows) == 8
    assert [(r["run"], r["controller"]) for r in res.rows] == [(i, c) for i in range(4) for c in ("dual", "passive")]
    for run in range(4):
        a, b = res.traces[("dual", run)], res.traces[("passive", run)]
        assert np.array_equal(a.w, b.w) and np.array_equal(a.theta_star, b.theta_star)
    agg = res.aggregate()
    assert agg["dual"]["n"] == 4 and agg["dual"]["failed"] == 0
    assert (tmp_path / "b" / "summary.csv").exists() and (tmp_path / "b" / "summary_footer.csv").exists()

    real = simulate.run_closed_loop

    def broken(model, design, controller, theta, w, *a, **k):
        if controller == "dual" and theta[0] == sample_theta(model, 5, 1)[0]:
            raise InconsistentData("injected")
        return real(model, design, controller, theta, w, *a, **k)

    monkeypatch.setattr(simulate, "run_closed_loop", broken)
    res2 = batch_compare(model, design, 2, 1, ("dual",), master_seed=5)
    assert [bool(r["error"]) for r in res2.rows] == [False, True]
    assert res2.aggregate()["dual"]["failed"] == 1


def test_parallel_batch_matches_serial(tiny):
    model, design = tiny
    a = batch_compare(model, design, 2, 1, ("passive", "oracle"), master_seed=9, jobs=1)
    b = batch_compare(model, design, 2, 1, ("passive", "oracle"), master_seed=9, jobs=2)
    assert [r["cost"] for r in a.rows] == [r["cost"] for r in b.rows]


def test_rejects_bad_disturbance_shape(tiny):
    model, design = tiny
    with pytest.raises(ValueError):
        run_closed_loop(model, design, "dual", np.zeros(2), np.zeros((3, 2)))


def test_dual_probes_before_first_setpoint_change(two_state):
    model, design = two_state
    theta = np.array([-0.06, 0.07])
    w = sample_disturbances(model, 2024, 0, 0)
    change = int(np.argmax(np.any(model.refs != model.refs[0], axis=1)))
    energy = {}
    for c in ("dual", "passive"):
        tr = run_closed_loop(model, design, c, theta, w)
        energy[c] = float((tr.u[: change - 1] ** 2).sum())
    assert energy["dual"] > energy["passive"]
