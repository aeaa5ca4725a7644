"""Trajectory <-> weight-vector codec using normalized Gaussian RBFs.

A movement is represented by per-joint basis weights over a phase
variable in [0, 1] plus one extra slot holding the raw duration, so a
d-joint movement with n basis functions becomes a vector of length
d*n + 1.  Encoding is ridge regression of the sampled joint positions
onto the basis; decoding evaluates the basis on a uniform phase grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Decoded durations are clamped to keep executed movements physical.
DURATION_MIN = 0.1
DURATION_MAX = 30.0


@dataclass(frozen=True)
class BasisConfig:
    """Normalized Gaussian basis over phase in [0, 1].

    Centers are evenly spaced on [0, 1].  The default bandwidth matches
    the center spacing 1/(n_basis-1); ridge_lambda guards against
    ill-conditioned fits on short trajectories.
    """

    n_basis: int = 20
    width: float | None = None
    ridge_lambda: float = 1e-6

    def __post_init__(self):
        if self.n_basis < 1:
            raise ValueError(f"n_basis must be >= 1, got {self.n_basis}")
        if self.width is not None and self.width <= 0:
            raise ValueError(f"width must be positive, got {self.width}")
        if self.ridge_lambda < 0:
            raise ValueError("ridge_lambda must be nonnegative")

    @property
    def centers(self) -> np.ndarray:
        if self.n_basis == 1:
            return np.array([0.5])
        return np.linspace(0.0, 1.0, self.n_basis)

    @property
    def bandwidth(self) -> float:
        if self.width is not None:
            return self.width
        if self.n_basis == 1:
            return 1.0
        return 1.0 / (self.n_basis - 1)


@dataclass
class Trajectory:
    """Time-stamped joint positions: times (T,), positions (T, d)."""

    times: np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.positions = np.asarray(self.positions, dtype=float)
        if self.positions.ndim == 1:
            self.positions = self.positions[:, None]
        if self.times.ndim != 1 or self.positions.ndim != 2:
            raise ValueError("times must be 1-d and positions 2-d")
        if self.times.shape[0] != self.positions.shape[0]:
            raise ValueError("times and positions length mismatch")
        if self.times.shape[0] < 2:
            raise ValueError("trajectory needs at least 2 samples")
        if not (np.all(np.isfinite(self.times)) and np.all(np.isfinite(self.positions))):
            raise ValueError("trajectory contains non-finite values")
        if self.times[0] < 0:
            raise ValueError("times must start at >= 0")
        if not np.all(np.diff(self.times) > 0):
            raise ValueError("times must be strictly increasing")

    @property
    def n_joints(self) -> int:
        return self.positions.shape[1]

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0])


@dataclass
class MovementParams:
    """Basis weights (joint-major) plus the raw duration slot."""

    weights: np.ndarray
    duration_raw: float

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if not (np.all(np.isfinite(self.weights)) and np.isfinite(self.duration_raw)):
            raise ValueError("movement parameters must be finite")

    @property
    def dim(self) -> int:
        return self.weights.size + 1

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.weights, [self.duration_raw]])

    @classmethod
    def from_vector(cls, vec: np.ndarray) -> "MovementParams":
        vec = np.asarray(vec, dtype=float)
        return cls(weights=vec[:-1].copy(), duration_raw=float(vec[-1]))


def rbf_features(phase: float, config: BasisConfig) -> np.ndarray:
    """Normalized Gaussian basis values at a single phase in [0, 1]."""
    if not 0.0 <= phase <= 1.0:
        raise ValueError(f"phase must be in [0, 1], got {phase}")
    return rbf_matrix(np.array([phase]), config)[0]


def rbf_matrix(phases: np.ndarray, config: BasisConfig) -> np.ndarray:
    """Feature matrix (len(phases), n_basis); rows sum to 1."""
    phases = np.asarray(phases, dtype=float)
    if np.any(phases < 0.0) or np.any(phases > 1.0):
        raise ValueError("phases must lie in [0, 1]")
    c = config.centers
    w = config.bandwidth
    g = np.exp(-((phases[:, None] - c[None, :]) ** 2) / (2.0 * w * w))
    return g / g.sum(axis=1, keepdims=True)


def encode(traj: Trajectory, config: BasisConfig) -> MovementParams:
    """Fit per-joint basis weights by ridge regression on phase features."""
    duration = traj.duration
    if duration <= 0:
        raise ValueError("trajectory has zero duration")
    phases = (traj.times - traj.times[0]) / duration
    phi = rbf_matrix(phases, config)
    gram = phi.T @ phi + config.ridge_lambda * np.eye(config.n_basis)
    if config.ridge_lambda > 0:
        w = np.linalg.solve(gram, phi.T @ traj.positions)
    else:
        w = np.linalg.lstsq(phi, traj.positions, rcond=None)[0]
    # joint-major layout: all weights of joint 0, then joint 1, ...
    return MovementParams(weights=w.T.ravel(), duration_raw=duration)


def decode(params: MovementParams, config: BasisConfig, n_steps: int) -> Trajectory:
    """Evaluate the weights on a uniform phase grid over the clamped duration."""
    if n_steps < 2:
        raise ValueError("n_steps must be >= 2")
    if params.weights.size % config.n_basis != 0:
        raise ValueError("weight vector length incompatible with basis size")
    n_joints = params.weights.size // config.n_basis
    w = params.weights.reshape(n_joints, config.n_basis)
    duration = float(np.clip(params.duration_raw, DURATION_MIN, DURATION_MAX))
    phases = np.linspace(0.0, 1.0, n_steps)
    phi = rbf_matrix(phases, config)
    return Trajectory(times=phases * duration, positions=phi @ w.T)
