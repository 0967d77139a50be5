"""Labelled (state -> optimal first control) samples from closed-loop exact MPC."""
from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dynamics import STATE_NAMES, wrap_angle
from .mpc import OPTIMAL, solve_mpc

log = logging.getLogger(__name__)

CSV_HEADER = ["q1", "q2", "q1dot", "q2dot", "u_star", "v_star"]


class DatasetGenerationError(RuntimeError):
    pass


class DatasetFormatError(ValueError):
    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.line = line


@dataclass
class Dataset:
    X: np.ndarray
    u_star: np.ndarray
    v_star: np.ndarray
    # trajectory index and step of each sample; in-memory provenance only
    traj: np.ndarray | None = None
    step: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float).reshape(-1, 4)
        self.u_star = np.asarray(self.u_star, dtype=float).reshape(-1)
        self.v_star = np.asarray(self.v_star, dtype=float).reshape(-1)
        if not len(self.X) == len(self.u_star) == len(self.v_star):
            raise ValueError("dataset columns differ in length")

    def __len__(self):
        return len(self.X)

    def subset(self, idx) -> "Dataset":
        pick = lambda a: None if a is None else a[idx]
        return Dataset(self.X[idx], self.u_star[idx], self.v_star[idx],
                       pick(self.traj), pick(self.step), dict(self.info))

    @classmethod
    def empty(cls) -> "Dataset":
        z = np.zeros(0)
        return cls(np.zeros((0, 4)), z, z, z.astype(int), z.astype(int))


@dataclass
class GenConfig:
    n_samples: int
    box_lower: np.ndarray
    box_upper: np.ndarray
    max_length: int = 100
    seed: int = 0
    # separates independent streams (train / test) under one seed
    stream: int = 0
    acceptance_floor: float = 0.10
    # attempts before the acceptance floor is enforced
    min_attempts: int = 200

    def __post_init__(self):
        self.box_lower = np.asarray(self.box_lower, dtype=float)
        self.box_upper = np.asarray(self.box_upper, dtype=float)
        if self.n_samples < 0 or self.max_length < 1:
            raise ValueError("n_samples must be >= 0 and max_length >= 1")
        if np.any(self.box_lower > self.box_upper):
            raise ValueError("sampling box lower corner exceeds upper corner")

    def check_against(self, mpc_config) -> None:
        """The sampling box must stay inside the state bounds."""
        if np.any(self.box_lower < mpc_config.state_lower) or np.any(self.box_upper > mpc_config.state_upper):
            raise ValueError("sampling box exceeds the MPC state bounds")
        if self.box_lower[1] < -np.pi or self.box_upper[1] > np.pi:
            raise ValueError("q2 sampling range must lie in [-pi, pi]")

    @classmethod
    def from_section(cls, section: dict, n_samples: int, seed: int, stream: int = 0) -> "GenConfig":
        box = section["box"]
        lo = np.array([box[n][0] for n in STATE_NAMES], dtype=float)
        hi = np.array([box[n][1] for n in STATE_NAMES], dtype=float)
        return cls(n_samples=n_samples, box_lower=lo, box_upper=hi,
                   max_length=int(section["max_length"]), seed=seed, stream=stream,
                   acceptance_floor=float(section.get("acceptance_floor", 0.10)))


def _trajectory(model, mpc_config, gen: GenConfig, index: int):
    """Closed-loop exact-MPC trajectory number ``index`` of the stream."""
    rng = np.random.default_rng([gen.seed, gen.stream, index])
    x = rng.uniform(gen.box_lower, gen.box_upper)
    x[1] = wrap_angle(x[1])
    length = int(rng.integers(1, gen.max_length + 1))
    rows, rejected = [], 0
    for _ in range(length):
        # cold start so each label is a function of the state alone
        sol = solve_mpc(model, mpc_config, x)
        if sol.status != OPTIMAL:
            rejected = 1
            break
        rows.append((x, sol.u0, sol.value))
        x = model.step(x, sol.u0)
    return rows, rejected


def _chunk(args):
    model, mpc_config, gen, indices = args
    return [_trajectory(model, mpc_config, gen, i) for i in indices]


def generate_dataset(model, mpc_config, gen: GenConfig, threads: int = 1, chunk: int = 8) -> Dataset:
    """Run exact MPC along random trajectories and keep every Optimal solve.

    Trajectory ``j`` draws its initial state and length from an RNG seeded by
    ``(seed, stream, j)``, so the result does not depend on the number of workers.
    """
    gen.check_against(mpc_config)
    t0 = time.perf_counter()
    if gen.n_samples == 0:
        ds = Dataset.empty()
        ds.info = {"accepted": 0, "rejected": 0, "acceptance_rate": 1.0, "trajectories": 0,
                   "wall_time": 0.0}
        return ds
    X, U, V, T, K = [], [], [], [], []
    accepted = rejected = 0
    next_index = 0
    pool = ProcessPoolExecutor(threads) if threads > 1 else None
    try:
        while accepted < gen.n_samples:
            batches = []
            for _ in range(max(threads, 1)):
                batches.append(list(range(next_index, next_index + chunk)))
                next_index += chunk
            jobs = [(model, mpc_config, gen, b) for b in batches]
            results = pool.map(_chunk, jobs) if pool else map(_chunk, jobs)
            for b, res in zip(batches, results):
                for j, (rows, rej) in zip(b, res):
                    rejected += rej
                    for k, (x, u, v) in enumerate(rows):
                        if accepted >= gen.n_samples:
                            break
                        X.append(x), U.append(u), V.append(v), T.append(j), K.append(k)
                        accepted += 1
            attempts = accepted + rejected
            rate = accepted / attempts if attempts else 1.0
            if attempts >= gen.min_attempts and rate < gen.acceptance_floor:
                raise DatasetGenerationError(
                    f"acceptance rate {rate:.3f} below floor {gen.acceptance_floor} after "
                    f"{attempts} solves ({accepted} accepted, {rejected} rejected); the sampling "
                    "box probably exceeds the feasible region of the MPC problem")
            log.debug("generated %d/%d samples", accepted, gen.n_samples)
    finally:
        if pool:
            pool.shutdown()
    ds = Dataset(np.array(X), np.array(U), np.array(V), np.array(T), np.array(K))
    ds.info = {"accepted": accepted, "rejected": rejected,
               "acceptance_rate": accepted / (accepted + rejected),
               "trajectories": int(len(set(T))), "wall_time": time.perf_counter() - t0}
    return ds


def save_dataset(ds: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for x, u, v in zip(ds.X, ds.u_star, ds.v_star):
            w.writerow([repr(float(a)) for a in (*x, u, v)])


def load_dataset(path) -> Dataset:
    rows = []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header != CSV_HEADER:
            raise DatasetFormatError(path, 1, f"expected header {','.join(CSV_HEADER)}")
        for line, row in enumerate(r, start=2):
            if len(row) != len(CSV_HEADER):
                raise DatasetFormatError(path, line, f"expected {len(CSV_HEADER)} fields, got {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError as e:
                raise DatasetFormatError(path, line, str(e)) from None
    if not rows:
        return Dataset(np.zeros((0, 4)), np.zeros(0), np.zeros(0))
    a = np.array(rows)
    return Dataset(a[:, :4], a[:, 4], a[:, 5])
