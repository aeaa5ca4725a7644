"""File formats: model+policy bundles, demonstration datasets, experience dumps.

Everything is JSON (one object per file, or one object per line for
datasets).  Floats round-trip bit-exactly at double precision because the
encoder emits shortest-repr decimals.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .mppca import MppcaModel
from .policy import PolicyParams
from .promp import Trajectory

FORMAT_VERSION = 1


def _arr(a) -> list:
    return np.asarray(a, dtype=float).tolist()


def save_model(path, model: MppcaModel, theta: PolicyParams | None = None) -> None:
    obj = {
        "format_version": FORMAT_VERSION,
        "dims": {"K": model.n_components, "d_z": model.d_z, "m": model.m,
                 "d_c": model.d_c},
        "mppca": {
            "pi": _arr(model.pi),
            "Omega": _arr(model.Omega),
            "omega_bar": _arr(model.omega_bar),
            "C": _arr(model.C),
            "c_bar": _arr(model.c_bar),
            "sigma2": _arr(model.sigma2),
            "mu": _arr(model.mu),
            "Sigma_diag": _arr(model.Sigma_diag),
        },
        "policy": None if theta is None else {
            "logits": _arr(theta.logits),
            "mu": _arr(theta.mu),
            "log_var": _arr(theta.log_var),
        },
    }
    Path(path).write_text(json.dumps(obj) + "\n")


def load_model(path) -> tuple[MppcaModel, PolicyParams | None]:
    obj = json.loads(Path(path).read_text())
    if obj.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {obj.get('format_version')}")
    p = obj["mppca"]
    model = MppcaModel(
        pi=np.array(p["pi"]), Omega=np.array(p["Omega"]),
        omega_bar=np.array(p["omega_bar"]), C=np.array(p["C"]),
        c_bar=np.array(p["c_bar"]), sigma2=np.array(p["sigma2"]),
        mu=np.array(p["mu"]), Sigma_diag=np.array(p["Sigma_diag"]),
    )
    theta = None
    if obj.get("policy") is not None:
        q = obj["policy"]
        theta = PolicyParams(logits=np.array(q["logits"]), mu=np.array(q["mu"]),
                             log_var=np.array(q["log_var"]))
    return model, theta


def write_dataset(path, records: list[tuple[np.ndarray, Trajectory]]) -> None:
    """One record per line: goal context plus (time, q1..qd) rows."""
    lines = []
    for context, traj in records:
        rows = np.column_stack([traj.times, traj.positions])
        lines.append(json.dumps({"context": _arr(context), "trajectory": _arr(rows)}))
    Path(path).write_text("\n".join(lines) + "\n")


def read_dataset(path) -> list[tuple[np.ndarray, Trajectory]]:
    records = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        rows = np.array(obj["trajectory"], dtype=float)
        records.append((np.array(obj["context"], dtype=float),
                        Trajectory(times=rows[:, 0], positions=rows[:, 1:])))
    return records


def save_buffer(path, buffer, iteration_reports: list[dict]) -> None:
    """Audit dump: episodes, policy snapshots, density cache, step reports."""
    obj = {
        "format_version": FORMAT_VERSION,
        "episodes": {
            "contexts": _arr(buffer.contexts),
            "ks": buffer.ks.tolist(),
            "zs": _arr(buffer.zs),
            "omegas": _arr(buffer.omegas),
            "rewards": _arr(buffer.rewards),
            "policy_index": buffer.policy_index.tolist(),
        },
        "policies": [
            {"logits": _arr(t.logits), "mu": _arr(t.mu), "log_var": _arr(t.log_var)}
            for t in buffer.policies
        ],
        "logdens": _arr(buffer.logdens),
        "iterations": iteration_reports,
    }
    Path(path).write_text(json.dumps(obj) + "\n")


def load_buffer_dump(path) -> dict:
    return json.loads(Path(path).read_text())
