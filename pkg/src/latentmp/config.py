"""Experiment configuration: one strict JSON file drives every command.

Unknown keys are rejected anywhere in the tree so that a typo in a long
batch run fails immediately instead of silently using a default.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mppca import EmOptions
from .offpolicy import LampoConfig
from .promp import BasisConfig
from .reacher import Obstacle, ReacherConfig


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    K: int = 4
    d_z: int = 3
    em: EmOptions = field(default_factory=EmOptions)


@dataclass
class RlConfig:
    lampo: LampoConfig = field(default_factory=LampoConfig)
    n_iterations: int = 15
    eval_episodes: int = 200

    def __post_init__(self):
        if self.n_iterations < 1:
            raise ConfigError("n_iterations must be >= 1")


@dataclass
class ExperimentConfig:
    env: ReacherConfig = field(default_factory=ReacherConfig)
    basis: BasisConfig = field(default_factory=BasisConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    rl: RlConfig = field(default_factory=RlConfig)
    seed: int = 0
    output_dir: str = "out"
    n_demos: int = 200


def _take(obj: dict, allowed: set[str], where: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {where}")


def _parse_env(obj: dict) -> ReacherConfig:
    _take(obj, {"n_goal_clusters", "cluster_centers", "cluster_std",
                "success_radius", "q_start", "obstacle"}, "env")
    kwargs = {}
    centers = obj.get("cluster_centers")
    if centers is not None:
        kwargs["cluster_centers"] = np.array(centers, dtype=float)
    if "n_goal_clusters" in obj:
        n = int(obj["n_goal_clusters"])
        base = (np.array(centers, dtype=float) if centers is not None
                else ReacherConfig().cluster_centers)
        if n > base.shape[0]:
            raise ConfigError("n_goal_clusters exceeds available cluster_centers")
        kwargs["cluster_centers"] = base[:n]
    for key in ("cluster_std", "success_radius"):
        if key in obj:
            kwargs[key] = float(obj[key])
    if "q_start" in obj:
        kwargs["q_start"] = np.array(obj["q_start"], dtype=float)
    if obj.get("obstacle") is not None:
        ob = obj["obstacle"]
        _take(ob, {"center", "radius"}, "env.obstacle")
        kwargs["obstacle"] = Obstacle(center=np.array(ob["center"], dtype=float),
                                      radius=float(ob["radius"]))
    return ReacherConfig(**kwargs)


def _parse_basis(obj: dict) -> BasisConfig:
    _take(obj, {"n_basis", "width", "ridge_lambda"}, "basis")
    kwargs = {k: obj[k] for k in ("n_basis", "width", "ridge_lambda") if k in obj}
    if "n_basis" in kwargs:
        kwargs["n_basis"] = int(kwargs["n_basis"])
    return BasisConfig(**kwargs)


def _parse_model(obj: dict) -> ModelConfig:
    _take(obj, {"K", "d_z", "em"}, "model")
    em_obj = obj.get("em", {})
    _take(em_obj, {"max_iters", "rel_tol", "kmeans_restarts", "kmeans_iters"}, "model.em")
    em = EmOptions(**{k: em_obj[k] for k in em_obj})
    return ModelConfig(K=int(obj.get("K", 4)), d_z=int(obj.get("d_z", 3)), em=em)


def _parse_rl(obj: dict) -> RlConfig:
    _take(obj, {"gamma", "chi", "n_per_iter", "n_iterations", "eval_episodes"}, "rl")
    lampo = LampoConfig(
        gamma=float(obj.get("gamma", 1.0)),
        chi=float(obj.get("chi", 0.2)),
        n_per_iter=int(obj.get("n_per_iter", 50)),
    )
    return RlConfig(lampo=lampo,
                    n_iterations=int(obj.get("n_iterations", 15)),
                    eval_episodes=int(obj.get("eval_episodes", 200)))


def parse_config(obj: dict) -> ExperimentConfig:
    _take(obj, {"env", "basis", "model", "rl", "seed", "output_dir", "n_demos"},
          "config root")
    try:
        cfg = ExperimentConfig(
            env=_parse_env(obj.get("env", {})),
            basis=_parse_basis(obj.get("basis", {})),
            model=_parse_model(obj.get("model", {})),
            rl=_parse_rl(obj.get("rl", {})),
            seed=int(obj.get("seed", 0)),
            output_dir=str(obj.get("output_dir", "out")),
            n_demos=int(obj.get("n_demos", 200)),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    if cfg.n_demos < cfg.model.K * (cfg.model.d_z + 1):
        raise ConfigError("n_demos too small for the requested mixture size")
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ConfigError("config root must be an object")
    return parse_config(obj)
