"""Furuta pendulum model, Euler discretization and linearization.

State convention: ``x = [q1, q2, q1_dot, q2_dot]`` with ``q1`` the arm angle
and ``q2`` the pendulum angle measured from the upright position, so the
origin is the (unstable) upright equilibrium and ``q2 = pi`` is hanging.
The input is the motor voltage.

Two discrete-time models share one small interface (``state_dim``,
``step(x, u)`` and ``jacobians(X, U)``) so the MPC solver can run on either:

* :class:`DiscreteModel` -- the Furuta pendulum under forward Euler.
* :class:`LinearModel` -- ``x+ = A x + B u``, used for solver test instances.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

STATE_NAMES = ("q1", "q2", "q1dot", "q2dot")


class SingularMassMatrixError(ArithmeticError):
    """Raised when the pendulum mass matrix is numerically singular."""


@dataclass(frozen=True)
class FurutaParams:
    m1: float
    m2: float
    L1: float
    L2: float
    l1: float
    l2: float
    I1: float
    I2: float
    c1: float
    c2: float
    Kg: float
    Kt: float
    Kv: float
    Rm: float
    eta_m: float
    eta_g: float
    g: float

    def __post_init__(self):
        for name in ("m1", "m2", "L1", "L2", "l1", "l2", "I1", "I2", "Rm", "g"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive, got {getattr(self, name)}")
        for name in ("eta_m", "eta_g"):
            if not 0 < getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in (0, 1], got {getattr(self, name)}")
        for name in ("c1", "c2", "Kg", "Kt", "Kv"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "FurutaParams":
        names = [f.name for f in fields(cls)]
        missing = [n for n in names if n not in d]
        if missing:
            raise KeyError(f"physics section is missing fields: {', '.join(missing)}")
        unknown = sorted(set(d) - set(names))
        if unknown:
            raise KeyError(f"unknown physics fields: {', '.join(unknown)}")
        return cls(**{n: float(d[n]) for n in names})

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def back_emf(self) -> float:
        """Viscous torque coefficient induced by the motor back-emf."""
        return self.eta_m * self.eta_g * self.Kg**2 * self.Kt * self.Kv / self.Rm

    @property
    def voltage_gain(self) -> float:
        """Torque per volt on the arm joint."""
        return self.eta_m * self.eta_g * self.Kt * self.Kg / self.Rm


def mass_matrix(params: FurutaParams, q2) -> np.ndarray:
    """Return M(q) with shape ``q2.shape + (2, 2)``."""
    p = params
    s, c = np.sin(q2), np.cos(q2)
    m11 = p.m1 * p.l1**2 + p.I1 + p.m2 * p.L1**2 + p.m2 * p.l2**2 * s**2
    m12 = p.m2 * p.L1 * p.l2 * c
    m22 = np.full_like(m11, p.m2 * p.l2**2 + p.I2)
    return np.stack([np.stack([m11, m12], -1), np.stack([m12, m22], -1)], -2)


def mechanical_energy(params: FurutaParams, x) -> np.ndarray:
    """Kinetic plus gravitational energy (zero reference at the pivot height)."""
    x = np.asarray(x, dtype=float)
    qd = x[..., 2:]
    M = mass_matrix(params, x[..., 1])
    kin = 0.5 * np.einsum("...i,...ij,...j->...", qd, M, qd)
    return kin + params.m2 * params.g * params.l2 * np.cos(x[..., 1])


def furuta_rhs(params: FurutaParams, x, v) -> np.ndarray:
    """Continuous-time state derivative ``[q_dot, M^-1 (-C q_dot - G + B v)]``.

    Broadcasts over leading axes of ``x`` (last axis of size 4) and ``v``.
    Complex inputs are accepted, which the solver uses for complex-step
    Jacobians.
    """
    x = np.asarray(x)
    v = np.asarray(v)
    p = params
    q2, dq1, dq2 = x[..., 1], x[..., 2], x[..., 3]
    s, c = np.sin(q2), np.cos(q2)
    m2l2sq = p.m2 * p.l2**2
    m2L1l2 = p.m2 * p.L1 * p.l2
    m11 = p.m1 * p.l1**2 + p.I1 + p.m2 * p.L1**2 + m2l2sq * s * s
    m12 = m2L1l2 * c
    m22 = m2l2sq + p.I2
    c11 = 2.0 * m2l2sq * s * c * dq2 + p.c1 + p.back_emf
    c12 = -m2L1l2 * s * dq2
    c21 = -m2l2sq * s * c * dq1
    g2 = -p.m2 * p.g * p.l2 * s
    r1 = -(c11 * dq1 + c12 * dq2) + p.voltage_gain * v
    r2 = -(c21 * dq1 + p.c2 * dq2) - g2
    det = m11 * m22 - m12 * m12
    if not np.all(np.real(det) > 1e-12 * np.abs(np.real(m11 * m22))):
        raise SingularMassMatrixError("mass matrix is singular or indefinite")
    ddq1 = (m22 * r1 - m12 * r2) / det
    ddq2 = (m11 * r2 - m12 * r1) / det
    return np.stack(np.broadcast_arrays(dq1, dq2, ddq1, ddq2), axis=-1)


def _rhs_scalar(p: FurutaParams, x, v: float):
    # math-module twin of furuta_rhs for the single-state hot path of rollouts
    _, q2, dq1, dq2 = x
    s, c = math.sin(q2), math.cos(q2)
    m2l2sq = p.m2 * p.l2 * p.l2
    m2L1l2 = p.m2 * p.L1 * p.l2
    m11 = p.m1 * p.l1 * p.l1 + p.I1 + p.m2 * p.L1 * p.L1 + m2l2sq * s * s
    m12 = m2L1l2 * c
    m22 = m2l2sq + p.I2
    c11 = 2.0 * m2l2sq * s * c * dq2 + p.c1 + p.back_emf
    r1 = -(c11 * dq1 - m2L1l2 * s * dq2 * dq2) + p.voltage_gain * v
    r2 = -(-m2l2sq * s * c * dq1 * dq1 + p.c2 * dq2) + p.m2 * p.g * p.l2 * s
    det = m11 * m22 - m12 * m12
    if not det > 1e-12 * abs(m11 * m22):
        raise SingularMassMatrixError("mass matrix is singular or indefinite")
    return dq1, dq2, (m22 * r1 - m12 * r2) / det, (m11 * r2 - m12 * r1) / det


def wrap_angle(a):
    """Wrap angles to the half-open interval (-pi, pi]."""
    w = np.pi - np.mod(np.pi - np.asarray(a, dtype=float), 2 * np.pi)
    return float(w) if np.ndim(w) == 0 else w


def wrap_state(x) -> np.ndarray:
    x = np.array(x, dtype=float)
    x[..., 1] = wrap_angle(x[..., 1])
    return x


class DiscreteModel:
    """Forward-Euler discretization ``x+ = x + dt * furuta_rhs(x, v)``."""

    state_dim = 4

    def __init__(self, params: FurutaParams, dt: float = 0.01):
        if not dt >= 0:
            raise ValueError("dt must be non-negative")
        self.params = params
        self.dt = float(dt)

    def __repr__(self):
        return f"DiscreteModel(dt={self.dt})"

    def rhs(self, x, v):
        return furuta_rhs(self.params, x, v)

    def step(self, x, u):
        x = np.asarray(x)
        if x.ndim == 1 and np.isrealobj(x) and np.ndim(u) <= 1 and np.size(u) == 1:
            u = float(np.reshape(u, ()))
            d = _rhs_scalar(self.params, x.tolist(), u)
            dt = self.dt
            return np.array([x[0] + dt * d[0], x[1] + dt * d[1], x[2] + dt * d[2], x[3] + dt * d[3]])
        u = np.asarray(u)
        if u.ndim == x.ndim and u.shape[-1:] == (1,):
            u = u[..., 0]
        return x + self.dt * furuta_rhs(self.params, x, u)

    def rollout(self, x, U) -> np.ndarray:
        """States ``x_0..x_N`` under the control sequence ``U``."""
        p, dt = self.params, self.dt
        cur = [float(v) for v in x]
        out = [cur]
        for u in np.asarray(U, dtype=float).reshape(-1).tolist():
            d = _rhs_scalar(p, cur, u)
            cur = [cur[0] + dt * d[0], cur[1] + dt * d[1], cur[2] + dt * d[2], cur[3] + dt * d[3]]
            out.append(cur)
        return np.array(out)

    def jacobians(self, X, U):
        """Exact Jacobians of ``step`` at each row of ``X`` (complex step).

        Returns ``A`` with shape (k, 4, 4) and ``B`` with shape (k, 4, 1).
        """
        X = np.atleast_2d(np.asarray(X, dtype=float))
        U = np.reshape(np.asarray(U, dtype=float), (len(X),))
        h = 1e-30
        n = self.state_dim
        Xc = np.repeat(X[:, None, :].astype(complex), n + 1, axis=1)
        Uc = np.repeat(U[:, None].astype(complex), n + 1, axis=1)
        idx = np.arange(n)
        Xc[:, idx, idx] += 1j * h
        Uc[:, n] += 1j * h
        F = furuta_rhs(self.params, Xc, Uc)  # (k, n+1, n)
        J = np.imag(F) / h
        A = np.eye(n) + self.dt * np.transpose(J[:, :n, :], (0, 2, 1))
        B = self.dt * J[:, n, :][:, :, None]
        return A, B


class LinearModel:
    """Linear discrete-time system ``x+ = A x + B u`` with the model interface."""

    def __init__(self, A, B):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.B = np.asarray(B, dtype=float).reshape(len(self.A), -1)
        self.state_dim = self.A.shape[0]

    def step(self, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if u.ndim < x.ndim or u.shape[-1:] != (self.B.shape[1],):
            u = u[..., None]
        return x @ self.A.T + u @ self.B.T

    def jacobians(self, X, U):
        k = len(np.atleast_2d(X))
        return np.repeat(self.A[None], k, 0), np.repeat(self.B[None], k, 0)


def euler_step(model: DiscreteModel, x, v) -> np.ndarray:
    return model.step(x, v)


def linearize(model, x, v, h: float = 1e-6):
    """Central finite-difference Jacobians ``(A, B)`` of ``model.step`` at (x, v)."""
    x = np.asarray(x, dtype=float)
    v = float(np.reshape(v, ()))
    n = len(x)
    A = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = h
        A[:, j] = (model.step(x + e, v) - model.step(x - e, v)) / (2 * h)
    B = ((model.step(x, v + h) - model.step(x, v - h)) / (2 * h)).reshape(n, 1)
    return A, B
