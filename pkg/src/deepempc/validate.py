"""Sampled validation of a learned policy against exact-MPC labels.

Per sample two indicators are evaluated: near-optimality (``|u* - u_hat| <=
eta``) and single-step constraint satisfaction. Their empirical means are
turned into probability lower bounds with Hoeffding's inequality.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .nn import forward
from .train import single_step_constraint


@dataclass
class ValidationConfig:
    opt_tolerance: float = 0.3
    epsilon_h: float = 0.01
    use_training_set: bool = False
    # tolerance on constraint rows before a sample counts as violating
    feas_tol: float = 1e-6

    def __post_init__(self):
        if not self.opt_tolerance > 0:
            raise ValueError("opt_tolerance must be positive")
        if not 0 < self.epsilon_h < 1:
            raise ValueError("epsilon_h must lie in (0, 1)")

    @classmethod
    def from_section(cls, section: dict) -> "ValidationConfig":
        names = cls.__dataclass_fields__
        return cls(**{k: v for k, v in section.items() if k in names})


def indicator_optimality(u_star, u_hat, eta_opt: float) -> int:
    """1 when the control error is within ``eta_opt`` (boundary included)."""
    return int(np.max(np.abs(np.asarray(u_star, dtype=float) - np.asarray(u_hat, dtype=float))) <= eta_opt)


def indicator_constraint(rows, tol: float = 1e-6) -> int:
    """1 when every constraint row is <= tol."""
    return int(np.all(np.asarray(rows, dtype=float) <= tol))


def hoeffding_bound(i_bar: float, n: int, epsilon_h: float):
    """Return ``(i_bar - epsilon_h, 1 - exp(-2 n epsilon_h^2))``.

    With probability at least the second value, the true mean of the indicator
    exceeds the first.
    """
    if not 0.0 <= i_bar <= 1.0:
        raise ValueError("empirical mean must lie in [0, 1]")
    if n < 1:
        raise ValueError("need at least one sample")
    return i_bar - epsilon_h, 1.0 - math.exp(-2.0 * n * epsilon_h * epsilon_h)


@dataclass
class ValidationReport:
    n: int
    max_voltage: float
    error_mean_pct: float
    error_std_pct: float
    error_abs_mean_pct: float
    state_violation_pct: float
    control_violation_pct: float
    total_violation_pct: float
    i_opt: float
    i_con: float
    opt_lower: float
    con_lower: float
    delta_h: float
    opt_tolerance: float
    epsilon_h: float
    row_violation_pct: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table(self, label: str = "policy") -> str:
        rows = [
            ("Optimality error", "Mean", f"{self.error_mean_pct:.2f}%"),
            ("", "STD", f"{self.error_std_pct:.2f}%"),
            ("Constraint violation", "State", f"{self.state_violation_pct:.2f}%"),
            ("", "Control", f"{self.control_violation_pct:.2f}%"),
            ("", "Total", f"{self.total_violation_pct:.2f}%"),
            ("Indicator means", "I_o", f"{self.i_opt:.4f}"),
            ("", "I_c", f"{self.i_con:.4f}"),
            ("Hoeffding lower bound", "Pr(I_o=1) >", f"{self.opt_lower:.4f}"),
            ("", "Pr(I_c=1) >", f"{self.con_lower:.4f}"),
            ("", "confidence", f"{self.delta_h:.6f}"),
            ("Samples", "n", str(self.n)),
        ]
        w0 = max(len(r[0]) for r in rows)
        w1 = max(len(r[1]) for r in rows)
        w2 = max(max(len(r[2]) for r in rows), len(label))
        out = [f"{'':<{w0}}  {'':<{w1}}  {label:>{w2}}"]
        out += [f"{a:<{w0}}  {b:<{w1}}  {c:>{w2}}" for a, b, c in rows]
        return "\n".join(out)


def validate_policy(dataset, arch, params, model, mpc_config, vconfig: ValidationConfig) -> ValidationReport:
    """Indicator statistics of the network ``(arch, params)`` on a labelled dataset.

    ``params`` may be an :class:`MlpParams` or a bare parameter vector.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    theta = getattr(params, "theta", params)
    X, u_star = dataset.X, dataset.u_star
    u_hat = forward(arch, theta, X)
    vmax = mpc_config.control_bound
    err = (u_hat - u_star) / vmax * 100.0
    C = single_step_constraint(model, mpc_config, X, u_hat)
    bad = C > vconfig.feas_tol
    ncx = mpc_config.constraints.n_cx
    state_bad = bad[:, :ncx].any(axis=1)
    ctrl_bad = bad[:, ncx:].any(axis=1)
    any_bad = bad.any(axis=1)
    n = len(X)
    i_opt = float(np.mean(np.abs(u_hat - u_star) <= vconfig.opt_tolerance))
    total_pct = 100.0 * float(any_bad.mean())
    # derived from the printed rate so the two always agree exactly
    i_con = 1.0 - total_pct / 100.0
    opt_lower, delta = hoeffding_bound(i_opt, n, vconfig.epsilon_h)
    con_lower, _ = hoeffding_bound(i_con, n, vconfig.epsilon_h)
    names = mpc_config.constraints.row_names
    return ValidationReport(
        n=n, max_voltage=vmax,
        error_mean_pct=float(err.mean()), error_std_pct=float(err.std()),
        error_abs_mean_pct=float(np.abs(err).mean()),
        state_violation_pct=100.0 * float(state_bad.mean()),
        control_violation_pct=100.0 * float(ctrl_bad.mean()),
        total_violation_pct=total_pct,
        i_opt=i_opt, i_con=i_con, opt_lower=opt_lower, con_lower=con_lower, delta_h=delta,
        opt_tolerance=vconfig.opt_tolerance, epsilon_h=vconfig.epsilon_h,
        row_violation_pct={nm: 100.0 * float(b) for nm, b in zip(names, bad.mean(axis=0))},
    )
