"""Closed-loop simulation of exact-MPC and learned policies on the nominal plant."""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .dynamics import STATE_NAMES, wrap_state
from .mpc import INFEASIBLE, OPTIMAL, shifted_warm_start, solve_mpc
from .nn import forward

LOG_COLUMNS = ["t", "q1", "q2", "q1dot", "q2dot", "u",
               "viol_q1", "viol_q1dot", "viol_q2dot", "viol_u", "solve_ms"]
DIVERGENCE_NORM = 1e3


@dataclass
class SimConfig:
    x0: np.ndarray = field(default_factory=lambda: np.array([-1.0, math.pi, 0.0, 0.0]))
    duration: float = 3.0
    repetitions: int = 10
    # uniform relative jitter of x0 per component, per repetition
    jitter: float = 0.02
    terminal_mode: str = "cost_only"
    seed: int = 0

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float)
        if not self.duration > 0:
            raise ValueError("duration must be positive")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.jitter < 0:
            raise ValueError("jitter must be non-negative")

    @classmethod
    def from_section(cls, section: dict, seed: int = 0) -> "SimConfig":
        names = cls.__dataclass_fields__
        kw = {k: v for k, v in section.items() if k in names}
        kw["seed"] = seed
        return cls(**kw)

    def initial_states(self, mpc_config) -> np.ndarray:
        """One jittered start per repetition, clipped into the state box."""
        out = []
        for r in range(self.repetitions):
            rng = np.random.default_rng([self.seed, r])
            x = self.x0 * (1.0 + rng.uniform(-self.jitter, self.jitter, self.x0.shape))
            x = np.clip(x, mpc_config.state_lower, mpc_config.state_upper)
            out.append(wrap_state(x))
        return np.array(out)


class ExactMpcPolicy:
    """Receding-horizon exact MPC with shifted warm starts.

    When a solve reports Infeasible the previous control is held.
    """

    name = "exact"

    def __init__(self, model, mpc_config):
        self.model = model
        self.config = mpc_config
        self.reset()

    def reset(self):
        self._warm = None
        self._last_u = 0.0

    def __call__(self, x):
        sol = solve_mpc(self.model, self.config, x, self._warm)
        if sol.status == INFEASIBLE:
            self._warm = None
            return self._last_u, "fallback_hold"
        self._warm = shifted_warm_start(self.config, sol)
        self._last_u = sol.u0
        return sol.u0, "" if sol.status == OPTIMAL else sol.status


class NetworkPolicy:
    name = "network"

    def __init__(self, params, clamp: float | None = None, name: str | None = None):
        self.arch, self.theta = params.arch, params.theta
        self.clamp = clamp
        if name:
            self.name = name

    def reset(self):
        pass

    def __call__(self, x):
        u = forward(self.arch, self.theta, x)
        if self.clamp is not None:
            u = min(max(u, -self.clamp), self.clamp)
        return u, ""


@dataclass
class TrajectoryLog:
    policy: str
    t: np.ndarray
    states: np.ndarray        # state at the start of each step
    controls: np.ndarray
    violations: np.ndarray    # per step: q1, q1dot, q2dot, u (amount beyond bound, >= 0)
    solve_ms: np.ndarray
    flags: list
    final_state: np.ndarray
    termination: str

    def __len__(self):
        return len(self.t)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_COLUMNS)
            for k in range(len(self)):
                w.writerow([repr(float(v)) for v in (self.t[k], *self.states[k], self.controls[k],
                                                     *self.violations[k], self.solve_ms[k])])

    @classmethod
    def read_csv(cls, path, policy: str = "") -> "TrajectoryLog":
        with open(path, newline="") as fh:
            r = csv.reader(fh)
            if next(r) != LOG_COLUMNS:
                raise ValueError(f"{path}: unexpected header")
            a = np.array([[float(v) for v in row] for row in r]).reshape(-1, len(LOG_COLUMNS))
        return cls(policy, a[:, 0], a[:, 1:5], a[:, 5], a[:, 6:10], a[:, 10], [""] * len(a),
                   a[-1, 1:5] if len(a) else np.zeros(4), "")


def _violations(mpc_config, x, u):
    lo, hi = mpc_config.state_lower, mpc_config.state_upper
    over = np.maximum(np.maximum(x - hi, lo - x), 0.0)
    ub = mpc_config.control_bound
    return [over[0], over[2], over[3], max(abs(u) - ub, 0.0)]


def run_closed_loop(model, policy, mpc_config, sim_config: SimConfig, x0=None) -> TrajectoryLog:
    """Simulate ``policy`` on ``model`` for ``sim_config.duration`` seconds.

    The pendulum angle is wrapped to (-pi, pi] before the policy sees each
    state. Stops early when ``|x| > 1e3``.
    """
    x = wrap_state(sim_config.x0 if x0 is None else x0)
    steps = int(round(sim_config.duration / model.dt))
    policy.reset()
    T, X, U, Vl, S, F = [], [], [], [], [], []
    reason = "duration"
    for k in range(steps):
        t0 = time.perf_counter()
        u, flag = policy(x)
        S.append((time.perf_counter() - t0) * 1e3)
        T.append(k * model.dt)
        X.append(x)
        U.append(float(u))
        Vl.append(_violations(mpc_config, x, u))
        F.append(flag)
        x = wrap_state(model.step(x, u))
        if not np.all(np.isfinite(x)) or np.linalg.norm(x) > DIVERGENCE_NORM:
            reason = "diverged"
            break
    return TrajectoryLog(getattr(policy, "name", "policy"), np.array(T), np.array(X).reshape(-1, 4),
                         np.array(U), np.array(Vl).reshape(-1, 4), np.array(S), F, x, reason)


@dataclass
class ViolationStats:
    counts: list
    mean_count: float
    std_count: float
    max_amplitude_pct: float
    # largest amplitude per constrained quantity, percent of its bound
    amplitude_by_row: dict
    total_steps: list

    def to_dict(self) -> dict:
        return dict(self.__dict__)


_VIOLATION_NAMES = ("q1", "q1dot", "q2dot", "u")


def violation_stats(logs, mpc_config) -> ViolationStats:
    """Violation counts (steps with any row beyond its bound) and amplitudes.

    A step counts only when some row exceeds its bound by more than the MPC
    feasibility tolerance, so round-off on an active bound is not a violation.
    """
    bounds = np.array([mpc_config.state_upper[0], mpc_config.state_upper[2],
                       mpc_config.state_upper[3], mpc_config.control_bound])
    counts, amps = [], np.zeros(4)
    for log in logs:
        V = log.violations
        counts.append(int(np.sum(np.any(V > mpc_config.feas_tol, axis=1))))
        if len(V):
            amps = np.maximum(amps, V.max(axis=0) / bounds * 100.0)
    return ViolationStats(counts=counts, mean_count=float(np.mean(counts)),
                          std_count=float(np.std(counts)), max_amplitude_pct=float(amps.max()),
                          amplitude_by_row=dict(zip(_VIOLATION_NAMES, map(float, amps))),
                          total_steps=[len(l) for l in logs])


def settling_time(log: TrajectoryLog, dt: float, tol: float = 0.05, hold: float = 1.0):
    """First time after which ``|x| < tol`` for ``hold`` seconds, or None."""
    norms = np.linalg.norm(log.states, axis=1)
    need = int(round(hold / dt))
    inside = norms < tol
    run = 0
    for k in range(len(inside) - 1, -1, -1):
        run = run + 1 if inside[k] else 0
        inside[k] = run >= need
    idx = np.flatnonzero(inside)
    return float(log.t[idx[0]]) if idx.size else None


def compare_policies(model, mpc_config, sim_config: SimConfig, policies: dict) -> dict:
    """Run every policy from the same jittered starts and summarise.

    ``policies`` maps a name to a policy callable. The speedup of a policy is
    the exact-MPC mean step time divided by its own (when ``"exact"`` is present).
    """
    starts = sim_config.initial_states(mpc_config)
    report, logs_by = {}, {}
    for name, pol in policies.items():
        logs = [run_closed_loop(model, pol, mpc_config, sim_config, x0) for x0 in starts]
        logs_by[name] = logs
        stats = violation_stats(logs, mpc_config)
        ms = np.concatenate([l.solve_ms for l in logs])
        report[name] = {
            "violations": stats.to_dict(),
            "settling_time": [settling_time(l, model.dt) for l in logs],
            "mean_step_ms": float(ms.mean()),
            "max_step_ms": float(ms.max()),
            "fallback_steps": sum(f == "fallback_hold" for l in logs for f in l.flags),
            "terminations": [l.termination for l in logs],
        }
    if "exact" in report:
        for name, r in report.items():
            r["speedup"] = report["exact"]["mean_step_ms"] / r["mean_step_ms"]
    return {"policies": report, "starts": starts.tolist(), "logs": logs_by}


def comparison_table(report: dict) -> str:
    rows = [("policy", "viol mean", "viol std", "max ampl %", "step ms", "speedup")]
    for name, r in report["policies"].items():
        v = r["violations"]
        rows.append((name, f"{v['mean_count']:.2f}", f"{v['std_count']:.2f}",
                     f"{v['max_amplitude_pct']:.3f}", f"{r['mean_step_ms']:.4f}",
                     f"{r.get('speedup', float('nan')):.2f}"))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths)))
                     for r in rows)


def parse_comparison_table(text: str) -> dict:
    """Inverse of :func:`comparison_table` (numbers as printed)."""
    lines = text.strip().splitlines()
    out = {}
    for line in lines[1:]:
        name, *vals = line.split()
        out[name] = dict(zip(("mean_count", "std_count", "max_amplitude_pct", "mean_step_ms", "speedup"),
                             map(float, vals)))
    return out


def report_json(report: dict) -> str:
    return json.dumps({k: v for k, v in report.items() if k != "logs"}, indent=2)
