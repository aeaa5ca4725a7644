"""Planar two-link reacher with multimodal goal clusters.

Both links have unit length, so the reachable set is the disk of radius
2.  Contexts are goal positions drawn from a mixture of Gaussian
clusters; demonstrations are minimum-jerk joint-space motions to an
analytic inverse-kinematics solution, with the elbow branch alternating
across clusters so that the demonstrated movements are genuinely
multimodal in joint space.  An optional circular obstacle turns any
intersecting episode into a failure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .promp import BasisConfig, MovementParams, Trajectory, decode

REACH_MARGIN = 0.05
DEMO_SAMPLES = 100
DEMO_DURATION_RANGE = (1.5, 2.5)
DEMO_NOISE_STD = 0.005
DEMO_TREMOR_STD = 0.12
DEMO_TREMOR_CYCLES = 17
COLLISION_REWARD = -2.0


@dataclass
class Obstacle:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        if self.center.shape != (2,) or self.radius <= 0:
            raise ValueError("obstacle needs a 2-d center and positive radius")


@dataclass
class ReacherConfig:
    cluster_centers: np.ndarray = field(
        default_factory=lambda: np.array([[1.1, 0.7], [-0.4, 1.25], [0.3, -1.25], [-1.05, -0.55]]))
    cluster_std: float = 0.1
    success_radius: float = 0.1
    q_start: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0]))
    obstacle: Obstacle | None = None

    def __post_init__(self):
        self.cluster_centers = np.atleast_2d(np.asarray(self.cluster_centers, dtype=float))
        self.q_start = np.asarray(self.q_start, dtype=float)
        norms = np.linalg.norm(self.cluster_centers, axis=1)
        if np.any(norms <= 0) or np.any(norms > 2.0):
            raise ValueError("cluster centers must satisfy 0 < |p| <= 2")
        if not 1 <= self.n_goal_clusters <= 4:
            raise ValueError("between 1 and 4 goal clusters supported")
        if self.success_radius <= 0:
            raise ValueError("success_radius must be positive")

    @property
    def n_goal_clusters(self) -> int:
        return self.cluster_centers.shape[0]


@dataclass
class EpisodeResult:
    reward: float
    success: bool
    final_ee: np.ndarray
    collided: bool


def forward_kinematics(q: np.ndarray) -> np.ndarray:
    """End-effector position of the unit-link arm."""
    q = np.asarray(q, dtype=float)
    return np.array([
        np.cos(q[0]) + np.cos(q[0] + q[1]),
        np.sin(q[0]) + np.sin(q[0] + q[1]),
    ])


def inverse_kinematics(p: np.ndarray, elbow: str = "up") -> np.ndarray:
    """Joint angles reaching p; the elbow flag picks the sign of the
    second joint."""
    p = np.asarray(p, dtype=float)
    r2 = float(p @ p)
    if r2 > 4.0 + 1e-9 or r2 <= 0.0:
        raise ValueError(f"point {p} is not reachable")
    cos_q2 = np.clip((r2 - 2.0) / 2.0, -1.0, 1.0)
    q2 = np.arccos(cos_q2)
    if elbow == "down":
        q2 = -q2
    elif elbow != "up":
        raise ValueError("elbow must be 'up' or 'down'")
    q1 = np.arctan2(p[1], p[0]) - np.arctan2(np.sin(q2), 1.0 + np.cos(q2))
    return np.array([q1, q2])


def sample_context(config: ReacherConfig, rng: np.random.Generator) -> np.ndarray:
    """Goal drawn from a uniformly chosen cluster, rejected until it is
    reachable with margin."""
    for _ in range(1000):
        k = int(rng.integers(config.n_goal_clusters))
        goal = config.cluster_centers[k] + config.cluster_std * rng.standard_normal(2)
        if REACH_MARGIN <= np.linalg.norm(goal) <= 2.0 - REACH_MARGIN:
            return goal
    raise ValueError("context sampling rejected 1000 draws; check cluster geometry")


def cluster_of(config: ReacherConfig, c: np.ndarray) -> int:
    return int(np.argmin(np.linalg.norm(config.cluster_centers - c, axis=1)))


def elbow_branch(cluster: int) -> str:
    """Alternate branches across clusters to make the dataset multimodal."""
    return "up" if cluster % 2 == 0 else "down"


def _min_jerk_profile(s: np.ndarray) -> np.ndarray:
    return 10.0 * s**3 - 15.0 * s**4 + 6.0 * s**5


def _min_jerk_trajectory(q0, q1, duration, n_samples):
    s = np.linspace(0.0, 1.0, n_samples)
    prof = _min_jerk_profile(s)
    positions = q0[None, :] + prof[:, None] * (q1 - q0)[None, :]
    return s * duration, positions, s


def demonstrate(config: ReacherConfig, c: np.ndarray, rng: np.random.Generator,
                noise_std: float = DEMO_NOISE_STD,
                tremor_std: float = DEMO_TREMOR_STD) -> Trajectory:
    """Minimum-jerk joint motion from the start posture to the IK solution.

    Demonstrator variability has two parts: small jitter and a smooth
    per-joint tremor mode, both shaped to vanish at the endpoints so the
    demonstration still starts and lands exactly.  With an obstacle
    configured, candidate motions are rejection-sampled (flipping the
    elbow branch halfway through the budget) until one is collision-free.
    """
    cluster = cluster_of(config, c)
    branches = [elbow_branch(cluster), "down" if elbow_branch(cluster) == "up" else "up"]
    attempts = 200 if config.obstacle is not None else 1
    for attempt in range(attempts):
        branch = branches[0] if attempt < attempts // 2 or attempts == 1 else branches[1]
        q_goal = inverse_kinematics(c, branch)
        duration = rng.uniform(*DEMO_DURATION_RANGE)
        times, positions, s = _min_jerk_trajectory(config.q_start, q_goal,
                                                   duration, DEMO_SAMPLES)
        if tremor_std > 0:
            amps = tremor_std * rng.standard_normal(positions.shape[1])
            positions = positions + np.sin(DEMO_TREMOR_CYCLES * np.pi * s)[:, None] * amps
        if noise_std > 0:
            bump = np.sin(np.pi * s) ** 2
            positions = positions + noise_std * bump[:, None] * rng.standard_normal(positions.shape)
        if config.obstacle is None or not trajectory_collides(positions, config.obstacle):
            return Trajectory(times=times, positions=positions)
    raise ValueError("no collision-free demonstration found for this context")


def _segment_min_dist2(a: np.ndarray, b: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Squared distance from point p to segments a[i]->b[i]."""
    ab = b - a
    ap = p[None, :] - a
    denom = np.maximum(np.sum(ab * ab, axis=1), 1e-300)
    t = np.clip(np.sum(ap * ab, axis=1) / denom, 0.0, 1.0)
    closest = a + t[:, None] * ab
    return np.sum((closest - p[None, :]) ** 2, axis=1)


def trajectory_collides(positions: np.ndarray, obstacle: Obstacle) -> bool:
    """True if either arm link sweeps through the obstacle disk at any sample."""
    q1 = positions[:, 0]
    q12 = positions[:, 0] + positions[:, 1]
    joint1 = np.stack([np.cos(q1), np.sin(q1)], axis=1)
    ee = joint1 + np.stack([np.cos(q12), np.sin(q12)], axis=1)
    base = np.zeros_like(joint1)
    r2 = obstacle.radius**2
    return bool(
        np.any(_segment_min_dist2(base, joint1, obstacle.center) < r2)
        or np.any(_segment_min_dist2(joint1, ee, obstacle.center) < r2)
    )


def evaluate(config: ReacherConfig, basis: BasisConfig, omega: MovementParams | np.ndarray,
             c: np.ndarray) -> EpisodeResult:
    """Roll out a movement and score it against the goal context."""
    if not isinstance(omega, MovementParams):
        omega = MovementParams.from_vector(omega)
    traj = decode(omega, basis, DEMO_SAMPLES)
    final_ee = forward_kinematics(traj.positions[-1])
    dist = float(np.linalg.norm(final_ee - np.asarray(c, dtype=float)))
    collided = (config.obstacle is not None
                and trajectory_collides(traj.positions, config.obstacle))
    reward = COLLISION_REWARD if collided else -dist
    success = dist < config.success_radius and not collided
    return EpisodeResult(reward=reward, success=success, final_ee=final_ee,
                         collided=collided)
