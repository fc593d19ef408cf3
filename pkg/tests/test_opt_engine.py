import numpy as np
import pytest

import dampc.simulate as simulate
from dampc.backend import NUMERICAL_FAILURE, OPTIMAL
from dampc.errors import ControllerInfeasible
from dampc.model import build_two_state_model, offline_design
from dampc.opt_engine import (
    FALLBACK_USED,
    EngineOptions,
    SuccessiveResult,
    assemble_dampc,
    dump_program,
    make_step,
    plan_from_x,
    shift_solution,
    solve_successive,
    verify_plan,
    warm_vector,
)
from dampc.opt_engine import max_violation, plan_cost
from dampc.polytope import Polytope
from dampc.simulate import run_closed_loop, sample_disturbances, sample_theta, true_setpoints
from dampc.tube_builder import offline_terminal_design

OPTS = EngineOptions()


def _first_step(model, design, mode, x=(0.0, 0.0)):
    tt = offline_terminal_design(model, design)[0] if mode == "passive" else None
    pins = None
    if mode == "oracle":
        xs, us, _, _ = true_setpoints(model, model.theta_bar0, np.zeros(model.n))
        pins = (xs, us)
    H, h = model.Theta0.H, model.Theta0.h
    if mode == "oracle":
        t = model.theta_bar0
        H, h = np.vstack([np.eye(2), -np.eye(2)]), np.concatenate([t, -t])
    return make_step(model, design, 0, np.asarray(x), H, h, model.theta_bar0, mode, OPTS, terminal_tuple=tt, pins=pins)


def test_passive_program_is_a_pure_lp(short_two_state):
    model, design = short_two_state
    prog = assemble_dampc(_first_step(model, design, "passive"))
    assert prog.skeleton.n_bilinear == 0
    res = solve_successive(prog, OPTS)
    assert res.status == OPTIMAL and res.outer_iters == 1


def test_dual_program_has_bilinear_terms(short_two_state):
    model, design = short_two_state
    assert assemble_dampc(_first_step(model, design, "dual")).skeleton.n_bilinear > 0


@pytest.mark.parametrize("mode", ["dual", "passive", "oracle"])
def test_returned_plan_is_certified(short_two_state, mode):
    model, design = short_two_state
    step = _first_step(model, design, mode, x=(0.3, -0.2))
    prog = assemble_dampc(step)
    res = solve_successive(prog, OPTS)
    assert res.status == OPTIMAL
    plan = plan_from_x(prog, res.x)
    assert max_violation(verify_plan(plan, step)) <= 1e-6
    # the epigraph objective equals the exact worst-case cost of the returned tubes
    assert plan_cost(plan, step) == pytest.approx(res.objective, abs=1e-6)


def test_accepted_objectives_do_not_increase(short_two_state):
    model, design = short_two_state
    res = solve_successive(assemble_dampc(_first_step(model, design, "dual", x=(0.5, 0.5))), OPTS)
    acc = np.asarray(res.accepted)
    assert len(acc) >= 1
    assert np.all(np.diff(acc) <= 1e-12)
    assert res.objective == acc[-1]
    assert res.residual <= OPTS.residual_tol


def test_adversarial_warm_start_is_harmless(short_two_state, rng):
    model, design = short_two_state
    prog = assemble_dampc(_first_step(model, design, "dual"))
    junk = rng.normal(scale=50.0, size=prog.layout.n)
    base = solve_successive(prog, OPTS)
    res = solve_successive(prog, OPTS, warm_starts=[junk])
    assert res.status == OPTIMAL
    assert res.objective <= base.objective + 1e-9
    assert res.residual <= OPTS.residual_tol


def test_warm_vector_round_trip(short_two_state):
    model, design = short_two_state
    prog = assemble_dampc(_first_step(model, design, "dual"))
    plan = plan_from_x(prog, solve_successive(prog, OPTS).x)
    x = warm_vector(prog, plan)
    assert np.array_equal(x[prog.layout["v"]], plan.v)
    assert np.array_equal(x[prog.layout["xbar"]], plan.xbar)


def test_stationary_shift_is_optimal_again():
    T = 30
    theta = np.array([0.2, -0.3])
    model = build_two_state_model(T=T, N=4, N_theta=3, refs=np.tile([0.5, -0.5], (T + 1, 1)))
    model = model.with_(Theta0=Polytope.box(theta - 1e-4, theta + 1e-4), theta_bar0=theta, W=Polytope.inf_ball(1e-9, 2))
    design = offline_design(model, 0.96)
    log = []
    run_closed_loop(model, design, "passive", theta, np.zeros((T + 1, 2)), plan_log=log)
    for k in (10, 11, 12, 27):
        step, plan = log[k]
        cand = shift_solution(log[k - 1][1], step)
        assert max_violation(verify_plan(cand, step)) <= 1e-7
        assert plan_cost(cand, step) == pytest.approx(plan.objective, abs=1e-6)


def test_shift_requires_consecutive_steps(short_two_state):
    model, design = short_two_state
    step = _first_step(model, design, "dual")
    prog = assemble_dampc(step)
    plan = plan_from_x(prog, solve_successive(prog, OPTS).x)
    with pytest.raises(ValueError):
        shift_solution(plan, step)


def test_make_step_preconditions(short_two_state):
    model, design = short_two_state
    H, h = model.Theta0.H, model.Theta0.h
    with pytest.raises(ValueError):
        make_step(model, design, 0, np.zeros(2), H, h, model.theta_bar0, "passive")
    with pytest.raises(ValueError):
        make_step(model, design, 0, np.zeros(2), H, h, model.theta_bar0, "oracle")
    with pytest.raises(ValueError):
        make_step(model, design, model.T + 1, np.zeros(2), H, h, model.theta_bar0, "dual")
    with pytest.raises(ValueError):
        make_step(model, design, 0, np.zeros(2), H, h, model.theta_bar0, "greedy")


def test_horizon_truncation(short_two_state):
    model, design = short_two_state
    H, h = model.Theta0.H, model.Theta0.h
    late = make_step(model, design, model.T - 1, np.zeros(2), H, h, model.theta_bar0, "dual")
    assert late.Np == 1 and not late.terminal
    xs, us, _, _ = true_setpoints(model, model.theta_bar0, np.zeros(2))
    t = model.theta_bar0
    orc = make_step(model, design, model.T - 1, np.zeros(2), np.vstack([np.eye(2), -np.eye(2)]), np.concatenate([t, -t]), t, "oracle", pins=(xs, us))
    assert orc.Np == 1 and not orc.terminal


def test_dump_one_row_per_line(short_two_state, tmp_path):
    model, design = short_two_state
    prog = assemble_dampc(_first_step(model, design, "passive"))
    path = tmp_path / "dump.txt"
    dump_program(prog, path)
    lines = path.read_text().splitlines()
    sk = prog.skeleton
    assert len(lines) == 1 + sk.A_ub.shape[0] + sk.A_eq.shape[0]
    assert any(" inclusion_ineq " in ln for ln in lines)


def test_infeasible_first_step_raises(short_two_state):
    model, design = short_two_state
    theta = sample_theta(model, 0, 0)
    w = sample_disturbances(model, 0, 0, 0)
    with pytest.raises(ControllerInfeasible):
        run_closed_loop(model, design, "dual", theta, w, simulate.SimOptions(x0=np.array([10.0, 0.0])))


def test_fallback_keeps_the_loop_running(short_two_state, monkeypatch):
    model, design = short_two_state
    real = simulate.solve_successive
    calls = {"n": 0}

    def flaky(program, options=OPTS, warm_starts=()):
        calls["n"] += 1
        if program.step.k in (3, 4):
            return SuccessiveResult(NUMERICAL_FAILURE, None, np.nan, 1)
        return real(program, options, warm_starts)

    monkeypatch.setattr(simulate, "solve_successive", flaky)
    theta = sample_theta(model, 3, 1)
    w = sample_disturbances(model, 3, 1, 0)
    for ctrl in ("dual", "passive"):
        tr = run_closed_loop(model, design, ctrl, theta, w)
        assert tr.status[3] == FALLBACK_USED and tr.status[4] == FALLBACK_USED
        assert np.max(tr.x @ model.F.T + tr.u @ model.G.T) <= 1 + 1e-7
        assert np.nanmax(tr.plan_violation) <= 1e-6
