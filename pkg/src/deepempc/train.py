"""Policy training: plain regression and Lagrangian max-min constrained training.

The constrained trainer works on the single-step constraint of the learned
first control: the state rows of the successor ``x+ = f(x, u_hat)`` and the
control rows of ``u_hat``. Per-row violations are aggregated as the batch mean
of ``max(C_r, 0)``, which is zero exactly when every sample satisfies row
``r``; each aggregated row gets a non-negative multiplier that is raised by
gradient ascent while the network descends the Lagrangian.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .nn import MlpArchitecture, MlpParams, forward, forward_backward, init_params, param_count

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass
class TrainConfig:
    epochs: int = 2000
    warmup_fraction: float = 0.60
    constraint_fraction: float = 0.35
    finetune_fraction: float = 0.05
    inner_steps: int = 5
    inner_step_increment: int = 1
    alpha_theta: float = 3e-3
    alpha_lambda_0: float = 3000.0
    decay_eta: float = 0.01
    stop_threshold: float = 1e-4
    max_outer_iters: int = 10_000
    optimizer: str = "adam"
    loss: str = "squared"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if min(self.alpha_theta, self.alpha_lambda_0, self.stop_threshold) <= 0 or self.decay_eta < 0:
            raise ValueError("rates and threshold must be positive")
        if self.inner_steps < 1 or self.inner_step_increment < 0:
            raise ValueError("inner_steps must be >= 1 and inner_step_increment >= 0")
        fr = (self.warmup_fraction, self.constraint_fraction, self.finetune_fraction)
        if min(fr) < 0 or abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError("phase fractions must be non-negative and sum to 1")
        if self.optimizer not in ("adam", "lbfgs"):
            raise ValueError("optimizer must be 'adam' or 'lbfgs'")
        if self.loss != "squared":
            raise ValueError("only the squared loss is supported")

    @property
    def warmup_epochs(self) -> int:
        return int(round(self.epochs * self.warmup_fraction))

    @property
    def constraint_epochs(self) -> int:
        return int(round(self.epochs * (self.warmup_fraction + self.constraint_fraction))) - self.warmup_epochs

    @property
    def fine_tune_epochs(self) -> int:
        return self.epochs - self.warmup_epochs - self.constraint_epochs

    @classmethod
    def from_section(cls, section: dict, seed: int = 0) -> "TrainConfig":
        names = cls.__dataclass_fields__
        kw = {k: v for k, v in section.items() if k in names}
        kw["seed"] = seed
        return cls(**kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(warmup_epochs=self.warmup_epochs, constraint_epochs=self.constraint_epochs,
                 fine_tune_epochs=self.fine_tune_epochs)
        return d


def lambda_rate(alpha0: float, eta: float, t: int) -> float:
    """Multiplier step size ``alpha0 / (1 + eta t)``."""
    return alpha0 / (1.0 + eta * t)


@dataclass
class LagrangeState:
    lam: np.ndarray
    t_outer: int = 0
    history: list = field(default_factory=list)      # multiplier vector after each ascent
    increments: list = field(default_factory=list)   # aggregated constraint used in each ascent
    rates: list = field(default_factory=list)        # alpha_Lambda used in each ascent
    delta_inf: list = field(default_factory=list)    # ||Lambda_t - Lambda_{t-1}||_inf
    status: str = "not_started"

    def to_dict(self) -> dict:
        return {"lambda": self.lam.tolist(), "t_outer": self.t_outer,
                "history": [h.tolist() for h in self.history],
                "increments": [c.tolist() for c in self.increments],
                "rates": list(self.rates), "delta_inf": list(self.delta_inf),
                "status": self.status}


@dataclass
class LossReport:
    loss: list = field(default_factory=list)         # regression loss after each epoch
    lagrangian: list = field(default_factory=list)
    phase: list = field(default_factory=list)

    def record(self, phase, loss, lagr):
        self.phase.append(phase)
        self.loss.append(float(loss))
        self.lagrangian.append(float(lagr))

    def to_dict(self) -> dict:
        return {"loss": self.loss, "lagrangian": self.lagrangian, "phase": self.phase}


# ---------------------------------------------------------------------------
# constraint rows


def single_step_constraint(model, mpc_config, x, u_hat) -> np.ndarray:
    """Rows ``[C_x(f(x, u_hat)); C_u(u_hat)]``; a row is satisfied when <= 0.

    Row order follows ``mpc_config.constraints.row_names``. Broadcasts over a
    leading batch axis.
    """
    cs = mpc_config.constraints
    x_next = model.step(x, u_hat)
    return np.concatenate([cs.state_rows(x_next), cs.control_rows(u_hat)], axis=-1)


class TrainingProblem:
    """Regression loss, aggregated constraints and gradients on a fixed batch."""

    def __init__(self, X, u_star, model, mpc_config, arch: MlpArchitecture):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        u_star = np.asarray(u_star, dtype=float).reshape(-1)
        if len(X) == 0:
            raise ValueError("empty batch")
        if X.shape[1] != arch.input_dim or arch.output_dim != 1:
            raise ValueError(f"architecture {arch.input_dim}->{arch.output_dim} does not match "
                             f"{X.shape[1]}-dimensional states with scalar controls")
        self.X, self.u_star = X, u_star
        self.model, self.cfg, self.arch = model, mpc_config, arch
        cs = mpc_config.constraints
        # the Euler step is affine in the input, so d x+ / d u depends on x only
        gain = model.jacobians(X, np.zeros(len(X)))[1][:, :, 0]
        self.row_grad = np.concatenate(
            [cs.state_sign * gain[:, cs.state_index],
             np.tile([1.0, -1.0], (len(X), 1))], axis=1)
        self.n_c = cs.n_c

    def rows(self, u_hat) -> np.ndarray:
        return single_step_constraint(self.model, self.cfg, self.X, u_hat)

    def evaluate(self, theta, lam=None, grad=True):
        """Return ``(lagrangian, loss, aggregated_constraints, d_theta)``."""
        n = len(self.X)
        lam = np.zeros(self.n_c) if lam is None else np.asarray(lam, dtype=float)
        out = {}

        def upstream(u_hat):
            err = u_hat - self.u_star
            C = self.rows(u_hat)
            pos = C > 0
            agg = np.where(pos, C, 0.0).mean(axis=0)
            loss = float(err @ err) / n
            out.update(loss=loss, agg=agg)
            dy = (2.0 * err + (pos * self.row_grad) @ lam) / n
            return loss + float(lam @ agg), dy

        if not grad:
            u_hat = forward(self.arch, theta, self.X)
            value, _ = upstream(u_hat)
            return value, out["loss"], out["agg"], None
        value, _, d_theta, _ = forward_backward(self.arch, theta, self.X, upstream)
        return value, out["loss"], out["agg"], d_theta


def aggregate_constraints(X, model, mpc_config, arch, theta) -> np.ndarray:
    """Per-row batch mean of ``max(C_r, 0)`` for the network's controls."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if len(X) == 0:
        raise ValueError("empty batch")
    u_hat = forward(arch, theta, X)
    C = single_step_constraint(model, mpc_config, X, u_hat)
    return np.maximum(C, 0.0).mean(axis=0)


def lagrangian(X, u_star, model, mpc_config, arch, theta, lam) -> float:
    """Mean squared control error plus ``sum_r lam_r * aggregated_r``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    u_hat = forward(arch, theta, X)
    err = u_hat - np.asarray(u_star, dtype=float)
    agg = np.maximum(single_step_constraint(model, mpc_config, X, u_hat), 0.0).mean(axis=0)
    return float(np.mean(err * err) + np.asarray(lam, dtype=float) @ agg)


# ---------------------------------------------------------------------------
# optimizers


class Adam:
    def __init__(self, size, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta, grad):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        return theta - self.lr * mhat / (np.sqrt(vhat) + self.eps)


class _ThetaUpdater:
    """Runs a number of full-batch theta updates on the Lagrangian for fixed Lambda."""

    def __init__(self, problem: TrainingProblem, config: TrainConfig, report: LossReport):
        self.problem, self.config, self.report = problem, config, report
        self.adam = Adam(param_count(problem.arch), config.alpha_theta)

    def run(self, theta, lam, epochs, phase):
        if epochs <= 0:
            return theta
        if self.config.optimizer == "lbfgs":
            return self._lbfgs(theta, lam, epochs, phase)
        for _ in range(epochs):
            value, loss, _, g = self.problem.evaluate(theta, lam)
            self._check(value, loss, phase)
            theta = self.adam.step(theta, g)
            self.report.record(phase, loss, value)
        return theta

    def _lbfgs(self, theta, lam, epochs, phase):
        from scipy.optimize import minimize

        def fun(th):
            value, loss, _, g = self.problem.evaluate(th, lam)
            self._check(value, loss, phase)
            return value, g

        def callback(th):
            value, loss, _, _ = self.problem.evaluate(th, lam, grad=False)
            self.report.record(phase, loss, value)

        res = minimize(fun, theta, jac=True, method="L-BFGS-B", callback=callback,
                       options={"maxiter": epochs, "maxcor": 20, "gtol": 0.0, "ftol": 0.0})
        return res.x

    def _check(self, value, loss, phase):
        if not (math.isfinite(value) and math.isfinite(loss)):
            raise TrainingDivergedError(f"non-finite loss during {phase} training", self.report.to_dict())


def _check_inputs(dataset, arch):
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if arch.input_dim != dataset.X.shape[1] or arch.output_dim != 1:
        raise ValueError("architecture does not match the dataset dimensions")


def train_normal(dataset, arch: MlpArchitecture, config: TrainConfig, model, mpc_config):
    """Minimize the regression loss alone for ``config.epochs`` epochs.

    ``model`` and ``mpc_config`` are only used to report constraint statistics.
    Returns ``(MlpParams, LossReport)``.
    """
    _check_inputs(dataset, arch)
    problem = TrainingProblem(dataset.X, dataset.u_star, model, mpc_config, arch)
    report = LossReport()
    theta = init_params(arch, config.seed)
    theta = _ThetaUpdater(problem, config, report).run(theta, None, config.epochs, "normal")
    meta = {"mode": "normal", "seed": config.seed}
    return MlpParams(arch, theta, meta), report


def train_constrained(dataset, arch: MlpArchitecture, config: TrainConfig, model, mpc_config):
    """Warm-up regression, alternating multiplier ascent / theta descent, fine-tune.

    The constraint phase repeats: ``Lambda += alpha_Lambda * C(theta)``; ``s``
    theta updates on the Lagrangian; ``s += d``; ``alpha_Lambda = alpha0 / (1 +
    eta t)`` with ``t`` the number of theta updates in this phase. It stops when
    ``||Delta Lambda||_inf <= threshold``, when the phase's epoch budget is used
    up, or after ``max_outer_iters`` ascents. The fine-tune phase keeps Lambda
    frozen. Returns ``(MlpParams, LagrangeState, LossReport)``.
    """
    _check_inputs(dataset, arch)
    cfg = config
    problem = TrainingProblem(dataset.X, dataset.u_star, model, mpc_config, arch)
    report = LossReport()
    updater = _ThetaUpdater(problem, cfg, report)
    theta = init_params(arch, cfg.seed)
    state = LagrangeState(lam=np.zeros(problem.n_c))
    state.history.append(state.lam.copy())

    theta = updater.run(theta, None, cfg.warmup_epochs, "warmup")

    budget = cfg.constraint_epochs
    s = cfg.inner_steps
    t = 0
    alpha = cfg.alpha_lambda_0
    state.status = "running"
    while True:
        agg = problem.evaluate(theta, grad=False)[2]
        lam_new = state.lam + alpha * agg
        delta = float(np.max(np.abs(lam_new - state.lam)))
        state.increments.append(agg.copy())
        state.rates.append(alpha)
        state.lam = lam_new
        state.t_outer += 1
        state.history.append(lam_new.copy())
        state.delta_inf.append(delta)
        if delta <= cfg.stop_threshold:
            state.status = "converged"
            break
        steps = min(s, budget - t)
        if steps <= 0:
            state.status = "budget_exhausted"
            break
        theta = updater.run(theta, state.lam, steps, "constraint")
        t += steps
        s += cfg.inner_step_increment
        alpha = lambda_rate(cfg.alpha_lambda_0, cfg.decay_eta, t)
        if state.t_outer >= cfg.max_outer_iters:
            state.status = "max_outer_iters"
            log.warning("constraint phase stopped after %d outer iterations without meeting "
                        "the multiplier threshold", state.t_outer)
            break

    fine = cfg.fine_tune_epochs + (budget - t)
    theta = updater.run(theta, state.lam, fine, "finetune")
    meta = {"mode": "constrained", "seed": cfg.seed}
    return MlpParams(arch, theta, meta), state, report
