"""Exact nonlinear MPC: quadratic costs, box constraints, DARE terminal ingredients.

The optimal control problem over the control sequence ``U`` (single shooting)
is solved by sequential quadratic programming: the dynamics are linearized
along the current rollout, the resulting box/terminal constrained QP is solved
with an augmented-Lagrangian inner loop, and the step is globalized with a
backtracking line search on an l1 merit function.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import STATE_NAMES, linearize

OPTIMAL = "Optimal"
MAX_ITER = "MaxIter"
INFEASIBLE = "Infeasible"

TERMINAL_MODES = ("hard", "cost_only")


class DareError(RuntimeError):
    """Fixed-point Riccati iteration did not converge."""

    def __init__(self, message, residual):
        super().__init__(f"{message} (last residual {residual:.3e})")
        self.residual = residual


def riccati_map(A, B, Q, R, P):
    """One application of the discrete Riccati operator to ``P``."""
    BtPA = B.T @ P @ A
    return A.T @ P @ A - BtPA.T @ np.linalg.solve(R + B.T @ P @ B, BtPA) + Q


def solve_dare(A, B, Q, R, tol=1e-8, max_iter=200_000):
    """Solve ``P = A'PA - A'PB (R + B'PB)^-1 B'PA + Q`` by fixed-point iteration.

    Iterates the Riccati operator from ``P = Q``, symmetrizing after each step,
    until the infinity-norm residual drops below ``tol``.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(len(A), -1)
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    P = Q.copy()
    res = np.inf
    for _ in range(max_iter):
        P_next = riccati_map(A, B, Q, R, P)
        P_next = 0.5 * (P_next + P_next.T)
        res = np.max(np.abs(P_next - P))
        P = P_next
        if res <= 0.1 * tol:
            break
    res = dare_residual(A, B, Q, R, P)
    if not res <= tol:
        raise DareError("Riccati iteration did not converge", res)
    return P


def dare_residual(A, B, Q, R, P) -> float:
    A = np.atleast_2d(A)
    B = np.asarray(B).reshape(len(A), -1)
    return float(np.max(np.abs(P - riccati_map(A, B, np.atleast_2d(Q), np.atleast_2d(R), P))))


def lqr_gain(A, B, R, P):
    """Feedback gain K of ``u = -K x`` for the terminal cost ``x'Px``."""
    B = np.asarray(B).reshape(len(A), -1)
    R = np.atleast_2d(R)
    return np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)


class ConstraintSpec:
    """Affine box rows ``g(z) <= 0`` on the state and the (scalar) control.

    State rows come first, one ``(upper, lower)`` pair per bounded component in
    state order; then the control rows ``u - ub`` and ``lb - u``.
    """

    def __init__(self, lower, upper, u_lower, u_upper):
        lower = np.asarray(lower, dtype=float)
        upper = np.asarray(upper, dtype=float)
        if np.any(lower >= upper) or not u_lower < u_upper:
            raise ValueError("every bounded component needs lower < upper")
        idx, sign, off, names = [], [], [], []
        for i in range(len(lower)):
            name = STATE_NAMES[i] if len(lower) == 4 else f"x{i}"
            if np.isfinite(upper[i]):
                idx.append(i), sign.append(1.0), off.append(-upper[i]), names.append(f"{name}_upper")
            if np.isfinite(lower[i]):
                idx.append(i), sign.append(-1.0), off.append(lower[i]), names.append(f"{name}_lower")
        self.lower, self.upper = lower, upper
        self.u_lower, self.u_upper = float(u_lower), float(u_upper)
        self.state_index = np.array(idx, dtype=int)
        self.state_sign = np.array(sign)
        self.state_offset = np.array(off)
        self.bounds = np.concatenate([np.abs(self.state_offset), [abs(self.u_upper), abs(self.u_lower)]])
        self.row_names = names + ["u_upper", "u_lower"]
        self.n_cx = len(idx)
        self.n_cu = 2

    @property
    def n_c(self) -> int:
        return self.n_cx + self.n_cu

    def state_rows(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.state_sign * x[..., self.state_index] + self.state_offset

    def control_rows(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        return np.stack([u - self.u_upper, self.u_lower - u], axis=-1)

    def bounded_components(self):
        """Indices of state components with at least one finite bound."""
        return sorted(set(self.state_index.tolist()))


@dataclass
class MpcConfig:
    N: int
    Q: np.ndarray
    R: float
    Qf: np.ndarray
    state_lower: np.ndarray
    state_upper: np.ndarray
    control_bound: float
    c_f: float = math.inf
    gamma_f: float = float("nan")
    K: np.ndarray | None = None
    terminal_mode: str = "hard"
    feas_tol: float = 1e-6
    infeas_tol: float = 1e-4
    max_sqp_iter: int = 60
    sqp_tol: float = 1e-7
    constraints: ConstraintSpec = field(init=False, repr=False)

    def __post_init__(self):
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.Qf = np.atleast_2d(np.asarray(self.Qf, dtype=float))
        self.state_lower = np.asarray(self.state_lower, dtype=float)
        self.state_upper = np.asarray(self.state_upper, dtype=float)
        self.R = float(self.R)
        if self.N < 1:
            raise ValueError("horizon N must be >= 1")
        if not self.R > 0:
            raise ValueError("R must be positive")
        for name in ("Q", "Qf"):
            M = getattr(self, name)
            if not np.allclose(M, M.T) or np.linalg.eigvalsh(M).min() <= 0:
                raise ValueError(f"{name} must be symmetric positive definite")
        if self.terminal_mode not in TERMINAL_MODES:
            raise ValueError(f"terminal_mode must be one of {TERMINAL_MODES}")
        if not self.c_f > 0:
            raise ValueError("c_f must be positive")
        self.constraints = ConstraintSpec(self.state_lower, self.state_upper,
                                          -self.control_bound, self.control_bound)

    @property
    def n_rows(self) -> int:
        """Number of per-row violation entries reported by :func:`check_feasibility`."""
        return self.constraints.n_c + (1 if self.terminal_mode == "hard" else 0)

    def with_terminal_mode(self, mode: str) -> "MpcConfig":
        return replace(self, terminal_mode=mode)

    def terminal_cost(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.einsum("...i,ij,...j->...", x, self.Qf, x)

    def terminal_control(self, x) -> np.ndarray:
        """LQR terminal controller ``u_f = clip(-K x)``."""
        if self.K is None:
            raise ValueError("config has no terminal gain K")
        u = -np.asarray(x, dtype=float) @ self.K[0]
        return np.clip(u, -self.control_bound, self.control_bound)

    def to_dict(self) -> dict:
        return {
            "N": self.N, "Q": self.Q.tolist(), "R": self.R, "Qf": self.Qf.tolist(),
            "state_lower": [None if not np.isfinite(v) else v for v in self.state_lower],
            "state_upper": [None if not np.isfinite(v) else v for v in self.state_upper],
            "control_bound": self.control_bound, "c_f": self.c_f, "gamma_f": self.gamma_f,
            "K": None if self.K is None else self.K.tolist(), "terminal_mode": self.terminal_mode,
            "feas_tol": self.feas_tol, "infeas_tol": self.infeas_tol,
            "max_sqp_iter": self.max_sqp_iter, "sqp_tol": self.sqp_tol,
        }


@dataclass
class MpcSolution:
    u_star_seq: np.ndarray
    value: float
    predicted_states: np.ndarray
    status: str
    iterations: int
    solve_time: float
    violation: float = 0.0

    @property
    def u0(self) -> float:
        return float(self.u_star_seq[0])

    def to_dict(self) -> dict:
        return {
            "u_star_seq": self.u_star_seq.tolist(), "value": self.value,
            "predicted_states": self.predicted_states.tolist(), "status": self.status,
            "iterations": self.iterations, "solve_time": self.solve_time,
            "violation": self.violation,
        }


def rollout(model, x, U) -> np.ndarray:
    """States ``x_0..x_N`` obtained by applying ``U`` from ``x_0 = x``."""
    x = np.asarray(x, dtype=float)
    U = np.asarray(U, dtype=float).reshape(-1)
    if hasattr(model, "rollout"):
        return model.rollout(x, U)
    X = np.empty((len(U) + 1, len(x)))
    X[0] = x
    for k in range(len(U)):
        X[k + 1] = model.step(X[k], U[k])
    return X


def sequence_cost(model, config: MpcConfig, x, U) -> float:
    """Open-loop cost ``sum_k l(x_k, u_k) + V_f(x_N)`` of ``U`` from ``x``."""
    X = rollout(model, x, U)
    U = np.asarray(U, dtype=float).reshape(-1)
    Xs = X[:-1]
    return float(np.einsum("ki,ij,kj->", Xs, config.Q, Xs) + config.R * U @ U
                 + X[-1] @ config.Qf @ X[-1])


def check_feasibility(config: MpcConfig, states, controls):
    """Row-wise worst violation over the horizon.

    Box rows are evaluated on ``x_1..x_{N-1}``, the terminal level condition on
    ``x_N`` (hard terminal mode only) and control rows on ``u_0..u_{N-1}``.
    Returns ``(feasible, violations)`` with ``violations`` ordered as
    ``config.constraints.row_names`` followed by the terminal row.
    """
    X = np.atleast_2d(np.asarray(states, dtype=float))
    U = np.asarray(controls, dtype=float).reshape(-1)
    if len(X) != len(U) + 1:
        raise ValueError(f"expected {len(U) + 1} states for {len(U)} controls, got {len(X)}")
    cs = config.constraints
    inner = X[1:-1]
    sx = cs.state_rows(inner).max(axis=0) if len(inner) else np.full(cs.n_cx, -np.inf)
    su = cs.control_rows(U).max(axis=0) if len(U) else np.full(cs.n_cu, -np.inf)
    parts = [sx, su]
    if config.terminal_mode == "hard":
        parts.append([config.terminal_cost(X[-1]) - config.c_f])
    viol = np.concatenate(parts)
    return bool(np.all(viol <= config.feas_tol)), viol


# ---------------------------------------------------------------------------
# QP inner solver


def _al_inner(H, g, G, h, mu, rho, d, max_iter=50):
    """Minimize the (convex, piecewise quadratic) augmented Lagrangian in ``d``.

    Semismooth Newton steps on the active set, safeguarded by backtracking.
    """
    def phi(d):
        z = np.maximum(0.0, mu + rho * (G @ d - h))
        return 0.5 * d @ H @ d + g @ d + (z @ z) / (2.0 * rho)

    f = phi(d)
    for _ in range(max_iter):
        act = (mu + rho * (G @ d - h)) > 0
        Ga = G[act]
        d_new = np.linalg.solve(H + rho * (Ga.T @ Ga), -g - Ga.T @ (mu[act] - rho * h[act]))
        if np.array_equal((mu + rho * (G @ d_new - h)) > 0, act):
            return d_new
        p = d_new - d
        t = 1.0
        while t > 1e-12:
            f_try = phi(d + t * p)
            if f_try <= f - 1e-12 * abs(f):
                break
            t *= 0.5
        else:
            return d_new
        d, f = d + t * p, f_try
    return d


def solve_qp_auglag(H, g, G, h, mu=None, tol=1e-9, rho=None, rho_max=1e12, max_outer=40):
    """Minimize ``0.5 d'Hd + g'd`` subject to ``G d <= h`` by augmented Lagrangian.

    Rows are scaled to unit norm internally; rows with a vanishing gradient are
    constants and only enter the returned violation. Returns ``(d, mu,
    violation, feasible)`` where ``feasible`` is False when the penalty reaches
    ``rho_max`` with rows still violated.
    """
    m = len(h)
    mu_out = np.zeros(m)
    scale = np.linalg.norm(G, axis=1)
    live = scale > 1e-12
    const_viol = max(0.0, float(-h[~live].max(initial=0.0)))
    if not live.any():
        return np.linalg.solve(H, -g), mu_out, const_viol, const_viol <= tol
    Gs, hs, sc = G[live] / scale[live, None], h[live] / scale[live], scale[live]
    mu = np.zeros(len(hs)) if mu is None else np.maximum(mu[live], 0.0) * sc
    if rho is None:
        rho = 1e4 * float(np.mean(np.diag(H)))
    d = np.linalg.solve(H, -g)
    prev_viol = np.inf
    viol = np.inf
    for _ in range(max_outer):
        d = _al_inner(H, g, Gs, hs, mu, rho, d)
        r = Gs @ d - hs
        mu_new = np.maximum(0.0, mu + rho * r)
        viol = max(0.0, float(r.max()))
        comp = float(np.max(np.abs(np.minimum(mu_new, -r))))
        mu = mu_new
        if viol <= tol and comp <= tol * (1.0 + float(mu.max())):
            break
        if viol > 0.25 * prev_viol:
            if rho >= rho_max:
                break
            rho = min(rho * 10.0, rho_max)
        prev_viol = viol
    mu_out[live] = mu / sc
    viol = max(viol, const_viol)
    return d, mu_out, viol, viol <= 1e3 * tol


# ---------------------------------------------------------------------------
# SQP


class _Problem:
    """Cost, constraints and their single-shooting derivatives at one U."""

    def __init__(self, model, config: MpcConfig, x0):
        self.model = model
        self.cfg = config
        self.x0 = np.asarray(x0, dtype=float)
        cs = config.constraints
        self.hard = config.terminal_mode == "hard"
        self.n = len(self.x0)
        self.N = config.N

    def evaluate(self, U):
        """Rollout, cost and nonlinear constraint vector at ``U``."""
        cfg = self.cfg
        X = rollout(self.model, self.x0, U)
        Xs = X[:-1]
        cost = float(np.einsum("ki,ij,kj->", Xs, cfg.Q, Xs) + cfg.R * U @ U
                     + X[-1] @ cfg.Qf @ X[-1])
        return X, cost, self.constraint_values(X, U)

    def constraint_values(self, X, U):
        cs = self.cfg.constraints
        parts = [cs.state_rows(X[1:-1]).ravel(), cs.control_rows(U).ravel()]
        if self.hard:
            parts.append([X[-1] @ self.cfg.Qf @ X[-1] - self.cfg.c_f])
        return np.concatenate(parts)

    def derivatives(self, X, U):
        """Gradient, Gauss-Newton Hessian, constraint Jacobian and the
        Gauss-Newton Hessian of the terminal row (None without one)."""
        cfg, N, n = self.cfg, self.N, self.n
        A, B = self.model.jacobians(X[:-1], U)
        S = np.zeros((N + 1, n, N))
        for k in range(N):
            S[k + 1] = A[k] @ S[k]
            S[k + 1][:, k] += B[k][:, 0]
        Sm, Xm = S[1:N], X[1:N]
        QS = np.einsum("ij,kjl->kil", cfg.Q, Sm)
        QfS = cfg.Qf @ S[N]
        g = 2.0 * (np.einsum("ki,kil->l", Xm, QS) + cfg.R * U + X[N] @ QfS)
        H = 2.0 * (np.einsum("kil,kim->lm", Sm, QS) + S[N].T @ QfS)
        H[np.diag_indices(N)] += 2.0 * cfg.R
        cs = cfg.constraints
        Jx = (cs.state_sign[None, :, None] * Sm[:, cs.state_index, :]).reshape(-1, N)
        eye = np.eye(N)
        Ju = np.stack([eye, -eye], axis=1).reshape(-1, N)
        rows = [Jx, Ju]
        Ht = None
        if self.hard:
            rows.append((2.0 * X[N] @ QfS)[None, :])
            Ht = 2.0 * S[N].T @ QfS
        return g, H, np.vstack(rows), Ht


def _l1(c):
    return float(np.sum(np.maximum(c, 0.0)))


def solve_mpc(model, config: MpcConfig, x, warm_start=None) -> MpcSolution:
    """Solve the finite-horizon problem from state ``x``.

    ``warm_start`` is an initial control sequence (length N); zeros otherwise.
    Returns status ``Infeasible`` immediately when ``x`` violates the state box.
    """
    t0 = time.perf_counter()
    cfg = config
    x = np.asarray(x, dtype=float)
    N = cfg.N
    if not np.all(np.isfinite(x)):
        raise ValueError("state must be finite")
    if np.any(cfg.constraints.state_rows(x) > cfg.feas_tol):
        return MpcSolution(np.zeros(N), math.inf, np.tile(x, (N + 1, 1)), INFEASIBLE, 0,
                           time.perf_counter() - t0, float(cfg.constraints.state_rows(x).max()))
    prob = _Problem(model, cfg, x)
    ub = cfg.control_bound
    U = np.zeros(N) if warm_start is None else np.clip(np.asarray(warm_start, dtype=float), -ub, ub)
    X, cost, c = prob.evaluate(U)
    mu = None
    mu_t = 0.0
    nu = 1.0
    status = MAX_ITER
    it = 0
    for it in range(1, cfg.max_sqp_iter + 1):
        g, H, Jc, Ht = prob.derivatives(X, U)
        if Ht is not None and mu_t > 0:
            # curvature of the active terminal row, weighted by its multiplier
            H = H + mu_t * Ht
        stuck = (np.abs(Jc).max(axis=1) == 0.0) & (c > cfg.infeas_tol)
        if stuck.any():
            # violated rows that no control sequence can influence
            break
        d, mu, _, qp_ok = solve_qp_auglag(H, g, Jc, -c, mu)
        # multipliers of an infeasible QP are penalty artefacts, not curvature weights
        mu_t = min(float(mu[-1]), 1e3) if prob.hard and qp_ok else 0.0
        d = np.clip(U + d, -ub, ub) - U
        viol = _l1(c)
        step = float(np.max(np.abs(d)))
        if step <= cfg.sqp_tol and float(np.max(c, initial=0.0)) <= cfg.feas_tol:
            status = OPTIMAL
            break
        nu = max(nu, 1.5 * float(np.max(mu, initial=0.0)) + 1e-3)
        merit = cost + nu * viol
        slope = float(g @ d) - nu * viol
        alpha = 1.0
        accepted = False
        while alpha >= 1e-8:
            U_try = U + alpha * d
            X_try, cost_try, c_try = prob.evaluate(U_try)
            if cost_try + nu * _l1(c_try) <= merit + 1e-4 * alpha * min(slope, 0.0):
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            # no merit decrease along the QP direction: a stationary point up to roundoff
            if float(np.max(c, initial=0.0)) <= cfg.feas_tol:
                status = OPTIMAL
            break
        moved = alpha * step
        U, X, cost, c = U_try, X_try, cost_try, c_try
        if moved <= cfg.sqp_tol and float(np.max(c, initial=0.0)) <= cfg.feas_tol:
            status = OPTIMAL
            break
    max_viol = float(np.max(c, initial=0.0))
    if max_viol > cfg.infeas_tol:
        status = INFEASIBLE
    elif status == OPTIMAL and max_viol > cfg.feas_tol:
        status = MAX_ITER
    return MpcSolution(U.copy(), cost, X, status, it, time.perf_counter() - t0, max_viol)


def shifted_warm_start(config: MpcConfig, solution: MpcSolution) -> np.ndarray:
    """Candidate ``[u_1*, ..., u_{N-1}*, u_f(x_N)]`` for the next time step."""
    tail = config.terminal_control(solution.predicted_states[-1])
    return np.concatenate([solution.u_star_seq[1:], [float(tail)]])


def mpc_policy(model, config: MpcConfig, x, warm_start=None):
    """Receding-horizon control: the first element of the optimal sequence."""
    sol = solve_mpc(model, config, x, warm_start)
    return float(sol.u_star_seq[0]), sol


# ---------------------------------------------------------------------------
# Terminal ingredients


def _terminal_directions(P, n_dirs, seed):
    rng = np.random.default_rng(seed)
    D = rng.standard_normal((n_dirs, len(P)))
    # unit vectors in the P-metric: d'Pd = 1
    return D / np.sqrt(np.einsum("ki,ij,kj->k", D, P, D))[:, None]


_TERMINAL_SCALES = np.array([0.2, 0.4, 0.6, 0.8, 0.9, 1.0])


def _terminal_ok(model, cs, P, K, ub, D, c):
    Xs = (np.sqrt(c) * _TERMINAL_SCALES[:, None, None] * D[None]).reshape(-1, D.shape[1])
    u = -Xs @ K[0]
    if np.any(np.abs(u) > ub) or np.any(cs.state_rows(Xs) > 0):
        return False
    Xn = model.step(Xs, u)
    if np.any(cs.state_rows(Xn) > 0):
        return False
    v0 = np.einsum("ki,ij,kj->k", Xs, P, Xs)
    v1 = np.einsum("ki,ij,kj->k", Xn, P, Xn)
    return bool(np.all(v1 < v0))


def terminal_level(model, cs: ConstraintSpec, P, K, ub, n_dirs=2000, seed=0, iters=60):
    """Largest level ``c_f`` of ``x'Px`` on which ``u = -Kx`` is admissible.

    On sampled points of the level set (and of scaled copies inside it) the
    LQR input must respect the control bound, the state and its successor
    must respect the state box, and ``x'Px`` must strictly decrease.
    """
    D = _terminal_directions(P, n_dirs, seed)
    lo, hi = 0.0, 1.0
    while _terminal_ok(model, cs, P, K, ub, D, hi):
        lo, hi = hi, hi * 4.0
        if hi > 1e12:
            return lo
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if _terminal_ok(model, cs, P, K, ub, D, mid):
            lo = mid
        else:
            hi = mid
    if lo <= 0:
        raise RuntimeError("no admissible terminal level found")
    return lo


def terminal_contraction(model, P, K, ub, c_f, n_dirs=2000, seed=1):
    """Largest sampled ratio ``V_f(f(x, u_f)) / V_f(x)`` over the terminal set."""
    D = _terminal_directions(P, n_dirs, seed)
    Xs = (np.sqrt(c_f) * _TERMINAL_SCALES[:, None, None] * D[None]).reshape(-1, D.shape[1])
    u = np.clip(-Xs @ K[0], -ub, ub)
    Xn = model.step(Xs, u)
    v0 = np.einsum("ki,ij,kj->k", Xs, P, Xs)
    v1 = np.einsum("ki,ij,kj->k", Xn, P, Xn)
    return float(np.max(v1 / v0))


def build_mpc_config(model, section: dict) -> MpcConfig:
    """Assemble an :class:`MpcConfig` from a config ``mpc`` section.

    The terminal weight is the DARE solution for the model linearized at the
    origin; ``c_f`` and ``gamma_f`` are designed numerically when set to
    ``"auto"``.
    """
    n = model.state_dim
    Q = np.diag(np.asarray(section["Q"], dtype=float))
    R = float(section["R"])
    bounds = section.get("state_bounds", {})
    names = list(STATE_NAMES) if n == 4 else [f"x{i}" for i in range(n)]
    unknown = set(bounds) - set(names)
    if unknown:
        raise KeyError(f"unknown state bound names: {sorted(unknown)}")
    upper = np.array([float(bounds.get(nm, np.inf)) for nm in names])
    lower = -upper
    ub = float(section["control_bound"])
    A, B = linearize(model, np.zeros(n), 0.0)
    P = solve_dare(A, B, Q, R)
    K = lqr_gain(A, B, R, P)
    cs = ConstraintSpec(lower, upper, -ub, ub)
    c_f = section.get("c_f", "auto")
    c_f = terminal_level(model, cs, P, K, ub) if c_f == "auto" else float(c_f)
    gamma_f = section.get("gamma_f", "auto")
    gamma_f = terminal_contraction(model, P, K, ub, c_f) if gamma_f == "auto" else float(gamma_f)
    return MpcConfig(
        N=int(section["N"]), Q=Q, R=R, Qf=P, state_lower=lower, state_upper=upper,
        control_bound=ub, c_f=c_f, gamma_f=gamma_f, K=K,
        terminal_mode=section.get("terminal_mode", "hard"),
        feas_tol=float(section.get("feas_tol", 1e-6)),
        infeas_tol=float(section.get("infeas_tol", 1e-4)),
        max_sqp_iter=int(section.get("max_sqp_iter", 60)),
        sqp_tol=float(section.get("sqp_tol", 1e-7)),
    )
