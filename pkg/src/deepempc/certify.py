"""Sampled checks of the robustness conditions for a learned MPC policy.

All constants here (Lipschitz constants, policy error, value-function bounds,
level sets) are estimated from finite samples. Sampled Lipschitz constants
and maximum errors are lower bounds on the true quantities, so a passing
report is evidence rather than proof; every report says so in ``rigor``.

Conditions, with ``a = alpha * l_f * e`` and ``a_f = alpha_f * l_f * e``:

* L1  ``a_f <= (1 - gamma_f) c_f``   MPC stays feasible under the learned policy
* L2  ``a   <= (1 - gamma) c``       the level set R_c is robust invariant
* L3  ``a   <= (1 - gamma) b``       the level set R_b is robust invariant
* L4  ``a   <= (gamma* - gamma) b``  V* decays by gamma* outside R_b
* T2  L1 and L4                      local robust stability on R_c
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .dynamics import wrap_angle
from .mpc import OPTIMAL, sequence_cost, solve_mpc
from .nn import forward

RIGOR = "sampled-estimate"


@dataclass
class CertificateConfig:
    n_lipschitz_samples: int = 2000
    radius: float = 0.05
    n_value_samples: int = 300
    n_boundary_samples: int = 64
    # float in (gamma, 1), or "auto" for the midpoint between the estimated gamma and 1
    gamma_star: float | str = "auto"
    # value samples are drawn as s * (uniform box point), s = U(0,1)**shrink
    shrink: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if min(self.n_lipschitz_samples, self.n_value_samples) < 100:
            raise ValueError("sample counts must be >= 100")
        if self.n_boundary_samples < 1:
            raise ValueError("need at least one boundary sample")
        if self.gamma_star != "auto" and not (isinstance(self.gamma_star, (int, float))
                                              and 0 < self.gamma_star < 1):
            raise ValueError("gamma_star must lie in (0, 1) or be 'auto'")
        if not self.radius > 0:
            raise ValueError("radius must be positive")

    @classmethod
    def from_section(cls, section: dict) -> "CertificateConfig":
        names = cls.__dataclass_fields__
        return cls(**{k: v for k, v in section.items() if k in names})


def resolve_gamma_star(value, gamma: float) -> float:
    """``value`` itself, or ``(1 + gamma) / 2`` when it is ``"auto"``."""
    return 0.5 * (1.0 + gamma) if value == "auto" else float(value)


def pool_sampler(points):
    """Draws uniformly from a fixed set of points."""
    points = np.asarray(points, dtype=float)
    return lambda rng: points[rng.integers(len(points))].copy()


def estimate_lipschitz(fn, sampler, n: int, radius: float, seed: int = 0, split: int | None = None) -> float:
    """Largest sampled ratio ``|fn(z) - fn(z')| / |z - z'|`` with ``|z - z'| <= radius``.

    ``sampler(rng)`` returns one point. Pair ``i`` is drawn from its own RNG
    seeded by ``(seed, i)``, so the first ``n`` pairs are shared by every
    larger ``n`` and the estimate never decreases in ``n``. With ``split = k``
    the denominator is ``|dz[:k]| + |dz[k:]|``, the two-argument form of a
    Lipschitz condition in ``(x, u)``.
    """
    best = 0.0
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        z = np.atleast_1d(np.asarray(sampler(rng), dtype=float))
        d = rng.standard_normal(z.shape)
        d *= radius * rng.uniform() ** (1.0 / z.size) / np.linalg.norm(d)
        if split is None:
            den = np.linalg.norm(d)
        else:
            den = np.linalg.norm(d[:split]) + np.linalg.norm(d[split:])
        if den == 0:
            continue
        num = np.linalg.norm(np.atleast_1d(fn(z + d)) - np.atleast_1d(fn(z)))
        best = max(best, float(num / den))
    return best


def estimate_policy_error(dataset, arch, params):
    """``(max |u_hat - u_star|, n)`` over a labelled dataset."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    theta = getattr(params, "theta", params)
    u_hat = forward(arch, theta, dataset.X)
    return float(np.max(np.abs(u_hat - dataset.u_star))), len(dataset)


@dataclass
class ValueGeometry:
    c1: float
    c2: float
    gamma: float
    b: float
    c: float
    n_feasible: int
    n_infeasible: int
    n_boundary: int
    # sampled states and their values, kept for the descent check
    states: np.ndarray = field(repr=False, default=None)
    values: np.ndarray = field(repr=False, default=None)

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if k not in ("states", "values")}


def box_sampler(lower, upper, shrink: float = 2.0):
    """Uniform box points scaled toward the origin by ``U(0,1)**shrink``."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)

    def sample(rng):
        x = rng.uniform(lower, upper) * rng.uniform() ** shrink
        if len(x) == 4:
            x[1] = wrap_angle(x[1])
        return x
    return sample


def _boundary_points(config, n):
    # n points on the level set V_f = c_f, from a fixed RNG
    rng = np.random.default_rng(12345)
    D = rng.standard_normal((n, len(config.Qf)))
    D /= np.sqrt(np.einsum("ki,ij,kj->k", D, config.Qf, D))[:, None]
    return math.sqrt(config.c_f) * D


def estimate_value_geometry(model, mpc_config, sampler, n: int, n_boundary: int = 64,
                            seed: int = 0) -> ValueGeometry:
    """Quadratic bounds of ``V*`` and the level sets ``R_b`` and ``R_c``.

    ``c1 = min V*/|x|^2`` and ``c2 = max V*/|x|^2`` over feasible samples;
    ``b`` is the largest ``V*`` on sampled points of ``V_f = c_f``; ``c`` is the
    largest feasible value below the smallest level reached by an infeasible
    sample. An infeasible sample's level is the value of the same problem with
    the terminal set and state bounds dropped, a lower bound on the cost of
    any admissible control sequence from it.
    """
    hard = mpc_config.with_terminal_mode("hard")
    relax = replace(mpc_config, terminal_mode="cost_only",
                    state_lower=np.full_like(mpc_config.state_lower, -np.inf),
                    state_upper=np.full_like(mpc_config.state_upper, np.inf))
    rng = np.random.default_rng(seed)
    feas_x, feas_v, infeas_v = [], [], []
    for _ in range(n):
        x = np.asarray(sampler(rng), dtype=float)
        if not np.any(x):
            continue
        sol = solve_mpc(model, hard, x)
        if sol.status == OPTIMAL:
            feas_x.append(x)
            feas_v.append(sol.value)
        else:
            infeas_v.append(solve_mpc(model, relax, x).value)
    if len(feas_x) < 10:
        raise ValueError(f"only {len(feas_x)} feasible samples; need at least 10")
    X = np.array(feas_x)
    V = np.array(feas_v)
    ratio = V / np.einsum("ki,ki->k", X, X)
    c1, c2 = float(ratio.min()), float(ratio.max())
    levels_bad = min(infeas_v) if infeas_v else math.inf
    below = V[V < levels_bad]
    c = float(below.max()) if below.size else 0.0
    b = 0.0
    for xb in _boundary_points(mpc_config, n_boundary):
        sol = solve_mpc(model, hard, xb)
        if sol.status != OPTIMAL:
            raise ValueError("terminal set boundary point is infeasible; c_f is too large")
        b = max(b, sol.value)
    return ValueGeometry(c1=c1, c2=c2, gamma=1.0 - c1 / c2, b=float(b), c=c,
                         n_feasible=len(feas_x), n_infeasible=len(infeas_v), n_boundary=n_boundary,
                         states=X, values=V)


@dataclass
class CertificateInputs:
    l_f: float
    alpha: float
    alpha_f: float
    e: float
    c1: float
    c2: float
    gamma: float
    b: float
    c: float
    c_f: float
    gamma_f: float
    samples: dict = field(default_factory=dict)


@dataclass
class Check:
    lhs: float
    rhs: float
    margin: float
    passed: bool


@dataclass
class CertificateReport:
    inputs: CertificateInputs
    gamma_star: float
    checks: dict
    theorem2: bool
    rigor: str = RIGOR

    @property
    def all_passed(self) -> bool:
        return self.theorem2 and all(ch.passed for ch in self.checks.values())

    def to_dict(self) -> dict:
        return {"inputs": asdict(self.inputs), "gamma_star": self.gamma_star,
                "checks": {k: asdict(v) for k, v in self.checks.items()},
                "theorem2": self.theorem2, "all_passed": self.all_passed, "rigor": self.rigor}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table(self) -> str:
        lines = [f"{'check':<6} {'lhs':>12} {'rhs':>12} {'margin':>12}  result"]
        for k, ch in self.checks.items():
            lines.append(f"{k:<6} {ch.lhs:>12.5g} {ch.rhs:>12.5g} {ch.margin:>12.5g}  "
                         f"{'pass' if ch.passed else 'FAIL'}")
        lines.append(f"{'T2':<6} {'':>12} {'':>12} {'':>12}  {'pass' if self.theorem2 else 'FAIL'}")
        lines.append(f"rigor: {self.rigor}")
        return "\n".join(lines)


def _check(lhs, rhs) -> Check:
    return Check(float(lhs), float(rhs), float(rhs - lhs), bool(lhs <= rhs))


def check_certificates(inputs: CertificateInputs, gamma_star: float) -> CertificateReport:
    if not gamma_star > inputs.gamma:
        raise ValueError(f"gamma_star={gamma_star} must exceed the estimated gamma={inputs.gamma}")
    i = inputs
    a = i.alpha * i.l_f * i.e
    a_f = i.alpha_f * i.l_f * i.e
    checks = {
        "L1": _check(a_f, (1.0 - i.gamma_f) * i.c_f),
        "L2": _check(a, (1.0 - i.gamma) * i.c),
        "L3": _check(a, (1.0 - i.gamma) * i.b),
        "L4": _check(a, (gamma_star - i.gamma) * i.b),
    }
    return CertificateReport(i, gamma_star, checks, checks["L1"].passed and checks["L4"].passed)


def estimate_constants(model, mpc_config, cconfig: CertificateConfig, state_sampler):
    """Sampled ``(l_f, alpha, alpha_f)`` around states drawn by ``state_sampler``.

    ``l_f`` is the Lipschitz constant of the dynamics in ``(x, u)``;
    ``alpha`` and ``alpha_f`` those of the open-loop cost and of the terminal
    cost of the predicted final state, both as functions of ``(x, U)``.
    Controls are drawn uniformly from the control box.
    """
    ub, N = mpc_config.control_bound, mpc_config.N
    xs = state_sampler
    n, r, seed = cconfig.n_lipschitz_samples, cconfig.radius, cconfig.seed

    def s_xu(rng):
        return np.concatenate([xs(rng), rng.uniform(-ub, ub, 1)])

    def s_xU(rng):
        return np.concatenate([xs(rng), rng.uniform(-ub, ub, N)])

    l_f = estimate_lipschitz(lambda z: model.step(z[:4], z[4]), s_xu, n, r, seed, split=4)
    alpha = estimate_lipschitz(lambda z: sequence_cost(model, mpc_config, z[:4], z[4:]),
                               s_xU, n, r, seed + 1, split=4)

    def terminal(z):
        x = z[:4]
        for u in z[4:]:
            x = model.step(x, u)
        return x @ mpc_config.Qf @ x

    alpha_f = estimate_lipschitz(terminal, s_xU, n, r, seed + 2, split=4)
    return l_f, alpha, alpha_f


@dataclass
class DescentResult:
    passed: bool
    values: list
    reasons: list


def empirical_descent_check(model, policy, mpc_config, starts, steps: int, gamma_star: float,
                            b: float = 0.0, c: float = math.inf) -> list:
    """Roll ``policy`` from each start and check the decay of ``V*`` along the way.

    At each visited state outside ``R_b`` (``V* > b``) the next value must
    satisfy ``V*(x+) <= gamma_star V*(x)``; every visited state must stay
    feasible with ``V* <= c``. Returns one :class:`DescentResult` per start.
    """
    hard = mpc_config.with_terminal_mode("hard")
    out = []
    for x0 in starts:
        x = np.asarray(x0, dtype=float)
        sol = solve_mpc(model, hard, x)
        values, reasons = [], []
        ok = sol.status == OPTIMAL
        if not ok:
            reasons.append("start infeasible")
        v = sol.value
        values.append(v)
        for k in range(steps if ok else 0):
            x = model.step(x, policy(x))
            nxt = solve_mpc(model, hard, x)
            if nxt.status != OPTIMAL:
                ok = False
                reasons.append(f"step {k + 1}: infeasible")
                break
            values.append(nxt.value)
            if nxt.value > c:
                ok = False
                reasons.append(f"step {k + 1}: left R_c")
            if v > b and nxt.value > gamma_star * v:
                ok = False
                reasons.append(f"step {k + 1}: ratio {nxt.value / v:.4f} > {gamma_star}")
            v = nxt.value
        out.append(DescentResult(ok, values, reasons))
    return out


def certify_policy(model, mpc_config, cconfig: CertificateConfig, box_lower, box_upper,
                   e_hat: float, n_e: int, policy=None):
    """Estimate every constant, run the checks and, given a policy, the descent check.

    Returns ``(CertificateReport, ValueGeometry, [DescentResult])``.
    """
    cc = cconfig
    geo = estimate_value_geometry(model, mpc_config, box_sampler(box_lower, box_upper, cc.shrink),
                                  cc.n_value_samples, cc.n_boundary_samples, cc.seed)
    # Lipschitz constants are local: probe around sampled states of R_c
    in_rc = geo.states[geo.values <= geo.c]
    xs = pool_sampler(in_rc) if len(in_rc) >= 10 else box_sampler(box_lower, box_upper, cc.shrink)
    l_f, alpha, alpha_f = estimate_constants(model, mpc_config, cc, xs)
    inputs = CertificateInputs(
        l_f=l_f, alpha=alpha, alpha_f=alpha_f, e=e_hat, c1=geo.c1, c2=geo.c2, gamma=geo.gamma,
        b=geo.b, c=geo.c, c_f=mpc_config.c_f, gamma_f=mpc_config.gamma_f,
        samples={"lipschitz": cc.n_lipschitz_samples, "value": cc.n_value_samples,
                 "feasible_value": geo.n_feasible, "rc_points": int(len(in_rc)),
                 "boundary": geo.n_boundary, "policy_error": n_e})
    gamma_star = resolve_gamma_star(cc.gamma_star, geo.gamma)
    report = check_certificates(inputs, gamma_star)
    descent = []
    if policy is not None:
        starts = geo.states[(geo.values <= geo.c) & (geo.values > geo.b)][:10]
        descent = empirical_descent_check(model, policy, mpc_config, starts, 50, gamma_star,
                                          geo.b, geo.c)
    return report, geo, descent
