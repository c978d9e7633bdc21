import numpy as np
import pytest

from perimeter_deepc import deepc, lti, qp

import oracles


def closed_loop_deviation(case, steps=50):
    """Largest per-step output gap between DeePC and the model-based controller on the true plant."""
    mdl = case["model"]
    blocks = lti.split_past_future(case["u_d"], case["y_d"], case["T_ini"], case["T_f"])
    cfg = deepc.DeePCConfig(T_ini=case["T_ini"], T_f=case["T_f"], lambda1=0.0, lambda2=0.0, lambda_y=0.0,
                            Q=case["Q"], R=case["R"], lambda_lb=0.0, lambda_ub=0.99, y_min=-np.inf)
    ctl = deepc.DeePCController(cfg, blocks, case["y_ref"], case["u_ref"])
    x = case["x_init"].copy()
    for u in case["warm"]:
        ctl.update_window(u, mdl.C @ x + mdl.D @ u)
        x = mdl.A @ x + mdl.B @ u
    xm = x.copy()
    worst = 0.0
    for _ in range(steps):
        step = ctl.receding_horizon_step()
        assert not step.degraded
        u = step.inputs[0]
        um = oracles.model_based_plan(mdl.A, mdl.B, mdl.C, mdl.D, xm, case["y_ref"], case["u_ref"],
                                      case["Q"], case["R"], case["T_f"])[0]
        y, ym = mdl.C @ x + mdl.D @ u, mdl.C @ xm + mdl.D @ um
        worst = max(worst, float(np.max(np.abs(y - ym))))
        ctl.update_window(u, y)
        x, xm = mdl.A @ x + mdl.B @ u, mdl.A @ xm + mdl.B @ um
    return worst


@pytest.mark.parametrize("seed", range(5))
def test_unregularized_deepc_matches_model_based_control(seed):
    case = oracles.interior_tracking_case(np.random.default_rng(seed), lti)
    assert closed_loop_deviation(case) <= 1e-4


def test_projection_identities():
    rng = np.random.default_rng(0)
    Z = rng.standard_normal((6, 10))
    blocks = lti.HankelBlocks(U_p=Z[:2], Y_p=Z[2:4], U_f=Z[4:], Y_f=np.zeros((1, 10)), T_ini=1, T_f=1)
    Pi = deepc.build_projection(blocks)
    assert np.allclose(Pi @ Pi, Pi, atol=1e-10)
    assert np.allclose(Pi, Pi.T, atol=1e-12)
    assert np.allclose(Pi @ Z.T, Z.T, atol=1e-10)


def test_projection_edge_cases():
    eye = lti.HankelBlocks(U_p=np.eye(4)[:2], Y_p=np.eye(4)[2:3], U_f=np.eye(4)[3:], Y_f=np.zeros((1, 4)),
                           T_ini=1, T_f=1)
    assert np.allclose(deepc.build_projection(eye), np.eye(4))
    zero = lti.HankelBlocks(U_p=np.zeros((1, 3)), Y_p=np.zeros((1, 3)), U_f=np.zeros((1, 3)),
                            Y_f=np.zeros((1, 3)), T_ini=1, T_f=1)
    assert np.all(deepc.build_projection(zero) == 0)


def _traffic_like(rng, T_ini=3, T_f=4, l=2, nd=2, p=2, T=120):
    """Random affine input/output data with actuator and demand channels."""
    m = l + nd
    u = np.vstack([rng.uniform(0.2, 0.9, (l, T)), rng.uniform(0.5, 1.5, (nd, T))])
    mdl = lti.random_minimal_system(rng, 3, m, p)
    y = lti.simulate_lti(mdl, np.zeros(3), u) + 5.0
    return lti.split_past_future(u, y, T_ini, T_f), u, y


def _controller(blocks, u, y, **kw):
    cfg = deepc.DeePCConfig(T_ini=blocks.T_ini, T_f=blocks.T_f, **kw)
    ctl = deepc.DeePCController(cfg, blocks, y_ref=np.full(blocks.p, 5.0), lambda_ref=np.full(2, 0.5), n_demand=2)
    for k in range(blocks.T_ini):
        ctl.update_window(u[:, k], y[:, k])
    return ctl


def test_demand_rows_equal_forecast():
    blocks, u, y = _traffic_like(np.random.default_rng(1))
    ctl = _controller(blocks, u, y, lambda1=1.0, lambda2=0.1, lambda_y=10.0, y_min=-np.inf)
    d_bar = np.linspace(0.6, 1.4, 8)
    qp_, lay = ctl.build_problem(d_bar)
    sol = qp.solve(qp_)
    plan = sol.x[lay.u].reshape(4, 4)
    assert np.allclose(plan[:, 2:].reshape(-1), d_bar, atol=1e-6)


def test_hold_constraint_with_two_step_cycles():
    blocks, u, y = _traffic_like(np.random.default_rng(2))
    ctl = _controller(blocks, u, y, lambda1=1.0, lambda2=0.1, lambda_y=10.0, duty_cycle_steps=2, apply_steps=2,
                      y_min=-np.inf)
    step = ctl.receding_horizon_step(np.ones(8))
    lam = step.plan[:, :2]
    assert np.allclose(lam[0], lam[1], atol=1e-6) and np.allclose(lam[2], lam[3], atol=1e-6)
    assert step.inputs.shape == (2, 4)
    assert np.all(lam >= -1e-9) and np.all(lam <= 0.95 + 1e-9)


def test_feasible_for_arbitrary_window_with_slack():
    rng = np.random.default_rng(3)
    blocks, u, y = _traffic_like(rng)
    ctl = _controller(blocks, u, y, lambda1=1.0, lambda2=0.5, lambda_y=100.0, y_min=-np.inf)
    for _ in range(3):
        ctl.update_window(rng.uniform(0, 2, 4), rng.uniform(-50, 50, 2))
    step = ctl.receding_horizon_step(np.ones(8))
    assert step.status == qp.OPTIMAL and not step.degraded


def test_full_horizon_application_and_repeatability():
    blocks, u, y = _traffic_like(np.random.default_rng(4))
    a = _controller(blocks, u, y, lambda1=1.0, lambda2=0.1, lambda_y=10.0, apply_steps=4, y_min=-np.inf)
    b = _controller(blocks, u, y, lambda1=1.0, lambda2=0.1, lambda_y=10.0, apply_steps=4, y_min=-np.inf)
    sa, sb = a.receding_horizon_step(np.ones(8)), b.receding_horizon_step(np.ones(8))
    assert sa.inputs.shape == (4, 4)
    assert np.array_equal(sa.inputs, sb.inputs)


def test_degraded_step_falls_back_to_reference():
    blocks, u, y = _traffic_like(np.random.default_rng(5))
    cfg = deepc.DeePCConfig(T_ini=3, T_f=4, lambda1=1.0, lambda2=0.1, lambda_y=10.0, y_min=-np.inf)
    ctl = deepc.DeePCController(cfg, blocks, np.full(2, 5.0), np.full(2, 0.5), n_demand=2,
                                settings=qp.QpSettings(max_iter=1, polish=False))
    for k in range(3):
        ctl.update_window(u[:, k], y[:, k])
    step = ctl.receding_horizon_step(np.ones(8))
    assert step.degraded and ctl.degraded_steps == 1
    assert np.allclose(step.inputs[0], [0.5, 0.5, 1.0, 1.0])


def test_config_validation():
    with pytest.raises(ValueError):
        deepc.DeePCConfig(T_f=4, duty_cycle_steps=3)
    with pytest.raises(ValueError):
        deepc.DeePCConfig(lambda_ub=1.0)
    with pytest.raises(ValueError):
        deepc.DeePCConfig(apply_steps=5, T_f=4)
    with pytest.raises(ValueError):
        deepc.DeePCConfig(lambda1=-1.0)


def test_window_must_be_full():
    blocks, u, y = _traffic_like(np.random.default_rng(6))
    cfg = deepc.DeePCConfig(T_ini=3, T_f=4)
    ctl = deepc.DeePCController(cfg, blocks, np.full(2, 5.0), np.full(2, 0.5), n_demand=2)
    with pytest.raises(RuntimeError):
        ctl.receding_horizon_step(np.ones(8))
