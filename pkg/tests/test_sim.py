import json

import numpy as np
import pytest

from deepempc.dynamics import wrap_state
from deepempc.nn import MlpArchitecture, MlpParams, forward, init_params
from deepempc.sim import (LOG_COLUMNS, ExactMpcPolicy, NetworkPolicy, SimConfig, TrajectoryLog,
                          compare_policies, comparison_table, parse_comparison_table, report_json,
                          run_closed_loop, settling_time, violation_stats)

ARCH = MlpArchitecture(hidden_layers=2, hidden_width=8)


@pytest.fixture(scope="module")
def net():
    return MlpParams(ARCH, init_params(ARCH, 3) * 0.5)


class _Bounds:
    """Stand-in for the MPC config fields that violation_stats reads."""
    state_upper = np.array([1.0, np.inf, 6.0, 15.0])
    control_bound = 6.0
    feas_tol = 1e-6


def toy_log(rows):
    """Log from rows of (q1, q1dot, q2dot, u); the other fields are filled with zeros."""
    rows = np.asarray(rows, dtype=float)
    n = len(rows)
    states = np.column_stack([rows[:, 0], np.zeros(n), rows[:, 1], rows[:, 2]])
    viol = np.maximum(np.abs(rows) - [1.0, 6.0, 15.0, 6.0], 0.0)
    return TrajectoryLog("toy", np.arange(n) * 0.01, states, rows[:, 3], viol, np.zeros(n), [""] * n,
                         states[-1], "duration")


def test_origin_stays_at_origin(model, mpc_config):
    log = run_closed_loop(model, ExactMpcPolicy(model, mpc_config), mpc_config,
                          SimConfig(x0=np.zeros(4), duration=0.1))
    assert len(log) == 10
    assert np.all(log.states == 0) and np.all(log.controls == 0)


def test_network_controls_replay(model, mpc_config, net):
    log = run_closed_loop(model, NetworkPolicy(net), mpc_config, SimConfig(duration=0.5))
    assert log.policy == "network"
    np.testing.assert_array_equal(log.controls, [forward(ARCH, net.theta, x) for x in log.states])


def test_one_step_matches_manual_composition(model, mpc_config, net):
    cfg = SimConfig(duration=0.02)
    log = run_closed_loop(model, NetworkPolicy(net), mpc_config, cfg)
    x0 = wrap_state(cfg.x0)
    u0 = forward(ARCH, net.theta, x0)
    np.testing.assert_array_equal(log.states[0], x0)
    np.testing.assert_array_equal(log.states[1], wrap_state(model.step(x0, u0)))
    np.testing.assert_array_equal(log.final_state, wrap_state(model.step(log.states[1], log.controls[1])))


def test_time_axis_and_lengths(model, mpc_config, net):
    log = run_closed_loop(model, NetworkPolicy(net), mpc_config, SimConfig(duration=0.3))
    assert len(log.t) == len(log.states) == len(log.controls) == len(log.violations) == 30
    np.testing.assert_allclose(np.diff(log.t), 0.01)


def test_clamped_network(model, mpc_config, net):
    big = MlpParams(ARCH, net.theta * 40)
    log = run_closed_loop(model, NetworkPolicy(big, clamp=6.0, name="clamped"), mpc_config, SimConfig(duration=0.3))
    assert log.policy == "clamped" and np.all(np.abs(log.controls) <= 6.0)


def test_divergence_stops_run(model, mpc_config):
    class Runaway:
        name = "runaway"

        def reset(self):
            pass

        def __call__(self, x):
            return 1e7, ""

    log = run_closed_loop(model, Runaway(), mpc_config, SimConfig(duration=3.0))
    assert log.termination == "diverged" and len(log) < 300


def test_infeasible_solve_holds_previous_control(model, mpc_config):
    pol = ExactMpcPolicy(model, mpc_config)
    u, flag = pol(np.array([0.05, 0.1, 0, 0]))
    held, flag2 = pol(np.array([1.5, 3.0, 6.0, 15.0]))
    assert flag == "" and flag2 == "fallback_hold" and held == u


def test_exact_mpc_from_feasible_starts_never_violates(model, mpc_config):
    pol = ExactMpcPolicy(model, mpc_config)
    cfg = SimConfig(duration=0.5)
    logs = [run_closed_loop(model, pol, mpc_config, cfg, x0)
            for x0 in ([0.05, 0.1, 0, 0], [-0.05, -0.1, 0.2, -0.3])]
    stats = violation_stats(logs, mpc_config)
    assert stats.counts == [0, 0] and stats.max_amplitude_pct == 0.0
    assert all(f == "" for l in logs for f in l.flags)


def test_violation_stats_feasible():
    stats = violation_stats([toy_log([[0.5, 1, 1, 1]] * 5)], _Bounds())
    assert stats.counts == [0] and stats.max_amplitude_pct == 0.0


def test_violation_stats_single_excursion():
    stats = violation_stats([toy_log([[0, 0, 0, 0], [0, 6.6, 0, 0], [0, 0, 0, 0]])], _Bounds())
    assert stats.counts == [1]
    assert stats.max_amplitude_pct == pytest.approx(10.0)
    assert stats.amplitude_by_row["q1dot"] == pytest.approx(10.0)


def test_round_off_on_a_bound_is_not_counted():
    stats = violation_stats([toy_log([[1.0 + 1e-14, 6.0, 0, 6.0 + 5e-7], [1.1, 0, 0, 0]])], _Bounds())
    assert stats.counts == [1]


def test_violation_stats_hand_count():
    logs = [toy_log([[1.2, 0, 0, 0], [0, 0, 16, 6.3], [0, 0, 0, 0]]),
            toy_log([[0, 0, 0, 0]] * 4),
            toy_log([[-1.05, 0, 0, 0], [0, -6.3, 0, 0], [0, 0, 0, -7.2], [0, 0, 0, 0]])]
    stats = violation_stats(logs, _Bounds())
    assert stats.counts == [2, 0, 3]
    assert stats.mean_count == pytest.approx(5 / 3)
    assert stats.std_count == pytest.approx(np.std([2, 0, 3]))
    assert stats.amplitude_by_row == pytest.approx({"q1": 20.0, "q1dot": 5.0, "q2dot": 100 / 15, "u": 20.0})
    assert stats.max_amplitude_pct == pytest.approx(20.0)
    assert stats.total_steps == [3, 4, 4]


def test_settling_time():
    log = toy_log([[0.5, 0, 0, 0]] * 10 + [[0.01, 0, 0, 0]] * 120)
    assert settling_time(log, 0.01) == pytest.approx(0.10)
    assert settling_time(toy_log([[0.5, 0, 0, 0]] * 10 + [[0.01, 0, 0, 0]] * 50), 0.01) is None


def test_initial_states(mpc_config):
    cfg = SimConfig(repetitions=10, jitter=0.02, seed=4)
    S = cfg.initial_states(mpc_config)
    assert S.shape == (10, 4)
    np.testing.assert_array_equal(S, cfg.initial_states(mpc_config))
    assert np.all(S[:, 0] >= -1.0) and np.all(np.abs(S[:, 1]) <= np.pi)
    # -1 * (1 + j) leaves the box for j > 0 and is clipped back
    assert len({tuple(s) for s in S}) == 10
    assert not np.array_equal(S, SimConfig(repetitions=10, seed=5).initial_states(mpc_config))


def test_config_invariants():
    with pytest.raises(ValueError):
        SimConfig(duration=0)
    with pytest.raises(ValueError):
        SimConfig(repetitions=0)


def test_log_csv_round_trip(tmp_path, model, mpc_config, net):
    log = run_closed_loop(model, NetworkPolicy(net), mpc_config, SimConfig(duration=0.2))
    path = tmp_path / "log.csv"
    log.to_csv(path)
    assert path.read_text().splitlines()[0] == ",".join(LOG_COLUMNS)
    back = TrajectoryLog.read_csv(path)
    np.testing.assert_array_equal(back.states, log.states)
    np.testing.assert_array_equal(back.controls, log.controls)
    np.testing.assert_array_equal(back.violations, log.violations)


def test_replay_is_deterministic(model, mpc_config, net):
    cfg = SimConfig(duration=0.3)
    a = run_closed_loop(model, ExactMpcPolicy(model, mpc_config.with_terminal_mode("cost_only")), mpc_config, cfg)
    b = run_closed_loop(model, ExactMpcPolicy(model, mpc_config.with_terminal_mode("cost_only")), mpc_config, cfg)
    np.testing.assert_array_equal(a.states, b.states)
    np.testing.assert_array_equal(a.controls, b.controls)


@pytest.fixture(scope="module")
def comparison(model, mpc_config, net):
    cfg = SimConfig(duration=0.2, repetitions=2)
    swing = mpc_config.with_terminal_mode("cost_only")
    pols = {"exact": ExactMpcPolicy(model, swing), "network": NetworkPolicy(net),
            "again": NetworkPolicy(net, name="again")}
    return compare_policies(model, mpc_config, cfg, pols)


def test_policy_against_itself(comparison):
    a, b = comparison["policies"]["network"], comparison["policies"]["again"]
    assert a["violations"] == b["violations"]
    assert a["settling_time"] == b["settling_time"]
    for la, lb in zip(comparison["logs"]["network"], comparison["logs"]["again"]):
        np.testing.assert_array_equal(la.states, lb.states)


def test_speedup_definition(comparison):
    p = comparison["policies"]
    assert p["network"]["speedup"] == p["exact"]["mean_step_ms"] / p["network"]["mean_step_ms"]
    assert p["exact"]["speedup"] == 1.0


def test_network_faster_than_exact_in_every_run(comparison):
    for le, ln in zip(comparison["logs"]["exact"], comparison["logs"]["network"]):
        assert ln.solve_ms.mean() < le.solve_ms.mean()


def test_comparison_table_round_trip(comparison):
    parsed = parse_comparison_table(comparison_table(comparison))
    data = json.loads(report_json(comparison))
    assert set(parsed) == set(data["policies"])
    for name, row in parsed.items():
        ref = data["policies"][name]
        assert row["mean_count"] == pytest.approx(ref["violations"]["mean_count"], abs=5e-3)
        assert row["max_amplitude_pct"] == pytest.approx(ref["violations"]["max_amplitude_pct"], abs=5e-4)
        assert row["mean_step_ms"] == pytest.approx(ref["mean_step_ms"], abs=5e-5)
        assert row["speedup"] == pytest.approx(ref["speedup"], abs=5e-3)
