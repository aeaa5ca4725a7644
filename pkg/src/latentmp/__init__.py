"""Latent-space movement-primitive policies with off-policy improvement."""

from .mppca import EmOptions, MppcaModel, fit_em
from .offpolicy import ExperienceBuffer, LampoConfig, improve
from .policy import PolicyParams, condition, initial_params, sample_movement
from .promp import BasisConfig, MovementParams, Trajectory, decode, encode
from .reacher import ReacherConfig, forward_kinematics, inverse_kinematics

__all__ = [
    "BasisConfig", "MovementParams", "Trajectory", "encode", "decode",
    "MppcaModel", "EmOptions", "fit_em",
    "PolicyParams", "initial_params", "condition", "sample_movement",
    "ExperienceBuffer", "LampoConfig", "improve",
    "ReacherConfig", "forward_kinematics", "inverse_kinematics",
]
