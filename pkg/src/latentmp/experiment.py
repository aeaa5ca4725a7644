"""End-to-end workflow: demonstrations -> imitation -> improvement -> evaluation.

Every stage is deterministic under the experiment seed: per-episode RNG
streams are derived from (seed, stage, index) so episodes can be
re-generated independently of execution order.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import beta as beta_dist

from . import mppca, offpolicy, policy, promp, reacher, serialize
from .config import ExperimentConfig

log = logging.getLogger(__name__)

# stream tags for deterministic per-episode RNGs
_DEMO, _EVAL, _RL, _HOLDOUT = 1, 2, 3, 4

CSV_COLUMNS = ["iteration", "mean_reward", "success_rate", "J_hat", "eta",
               "mean_g", "ess", "wall_time_s"]

HOLDOUT_FRACTION = 0.1


def _rng(seed: int, stream: int, *idx: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream, *idx]))


def generate_demos(cfg: ExperimentConfig) -> list[tuple[np.ndarray, promp.Trajectory]]:
    records = []
    for i in range(cfg.n_demos):
        rng = _rng(cfg.seed, _DEMO, i)
        for _ in range(100):
            c = reacher.sample_context(cfg.env, rng)
            try:
                traj = reacher.demonstrate(cfg.env, c, rng)
            except ValueError:
                continue
            records.append((c, traj))
            break
        else:
            raise RuntimeError(f"could not demonstrate any context for record {i}")
    return records


def cmd_gen_demos(cfg: ExperimentConfig, out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "demos.jsonl"
    serialize.write_dataset(path, generate_demos(cfg))
    log.info("wrote %d demonstrations to %s", cfg.n_demos, path)
    return path


def imitate(cfg: ExperimentConfig, records) -> tuple[mppca.MppcaModel, policy.PolicyParams, float]:
    """Encode demos, fit the mixture, and return the imitation policy with
    the held-out log-likelihood."""
    omegas = np.array([promp.encode(traj, cfg.basis).to_vector() for _, traj in records])
    contexts = np.array([c for c, _ in records])
    n = len(records)
    n_hold = max(1, int(round(HOLDOUT_FRACTION * n)))
    perm = _rng(cfg.seed, _HOLDOUT).permutation(n)
    hold, train = perm[:n_hold], perm[n_hold:]

    opts = cfg.model.em
    opts.seed = cfg.seed
    model = mppca.fit_em(omegas[train], contexts[train], cfg.model.K, cfg.model.d_z, opts)
    theta0 = policy.initial_params(model)
    held_x = np.hstack([omegas[hold], contexts[hold]])
    holdout_ll = mppca.log_likelihood(model, held_x) / n_hold
    return model, theta0, holdout_ll


def cmd_imitate(cfg: ExperimentConfig, dataset_path: Path, out_dir: Path) -> Path:
    records = serialize.read_dataset(dataset_path)
    model, theta0, holdout_ll = imitate(cfg, records)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "model.json"
    serialize.save_model(path, model, theta0)
    print(f"held-out log-likelihood per demo: {holdout_ll:.4f}")
    log.info("wrote imitation model to %s", path)
    return path


@dataclass
class Batch:
    contexts: np.ndarray
    ks: np.ndarray
    zs: np.ndarray
    omegas: np.ndarray
    rewards: np.ndarray
    successes: np.ndarray
    n_resampled: int


def collect_batch(cfg: ExperimentConfig, model, theta, iteration: int, n: int,
                  stream: int = _RL) -> Batch:
    contexts, ks, zs, omegas, rewards, successes = [], [], [], [], [], []
    n_resampled = 0
    for e in range(n):
        rng = _rng(cfg.seed, stream, iteration, e)
        for _ in range(100):
            c = reacher.sample_context(cfg.env, rng)
            try:
                k, z, omega = policy.sample_movement(model, theta, c, rng)
            except policy.OutOfSupportError:
                n_resampled += 1
                continue
            break
        else:
            raise RuntimeError("policy support does not cover the context distribution")
        result = reacher.evaluate(cfg.env, cfg.basis, omega, c)
        contexts.append(c)
        ks.append(k)
        zs.append(z)
        omegas.append(omega)
        rewards.append(result.reward)
        successes.append(result.success)
    return Batch(np.array(contexts), np.array(ks), np.array(zs), np.array(omegas),
                 np.array(rewards), np.array(successes), n_resampled)


def improvement_loop(cfg: ExperimentConfig, model, theta0: policy.PolicyParams,
                     out_dir: Path | None = None):
    """Run the full improvement schedule; returns (final policy, csv rows,
    iteration reports, buffer)."""
    buffer = offpolicy.ExperienceBuffer(model)
    theta = theta0.copy()
    rows, reports = [], []
    for t in range(1, cfg.rl.n_iterations + 1):
        tic = time.perf_counter()
        buffer.add_policy(theta)
        batch = collect_batch(cfg, model, theta, t, cfg.rl.lampo.n_per_iter)
        buffer.add_episodes(batch.contexts, batch.ks, batch.zs, batch.omegas,
                            batch.rewards)
        theta_new, rep = offpolicy.improve(buffer, theta, model, cfg.rl.lampo)
        wall = time.perf_counter() - tic
        rows.append({
            "iteration": t,
            "mean_reward": float(batch.rewards.mean()),
            "success_rate": float(batch.successes.mean()),
            "J_hat": rep.j_hat,
            "eta": rep.eta,
            "mean_g": rep.mean_g,
            "ess": rep.ess,
            "wall_time_s": wall,
        })
        reports.append({
            "iteration": t,
            "accepted": rep.accepted,
            "nu": rep.nu,
            "n_resampled": batch.n_resampled,
            "solver_status": rep.solver_status,
            "solver_iterations": rep.solver_iterations,
            "theta_after": theta_new.to_vector().tolist(),
        })
        log.info("iter %d: success=%.2f J=%.4f eta=%.4g g=%.4g ess=%.1f",
                 t, rows[-1]["success_rate"], rep.j_hat, rep.eta, rep.mean_g, rep.ess)
        theta = theta_new
    if out_dir is not None:
        write_learning_curve(out_dir / "learning_curve.csv", rows)
        serialize.save_buffer(out_dir / "buffer.json", buffer, reports)
        serialize.save_model(out_dir / "model_final.json", model, theta)
    return theta, rows, reports, buffer


def write_learning_curve(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


def cmd_improve(cfg: ExperimentConfig, model_path: Path, out_dir: Path) -> Path:
    model, theta = serialize.load_model(model_path)
    if theta is None:
        raise ValueError(f"{model_path} carries no policy block")
    out_dir.mkdir(parents=True, exist_ok=True)
    improvement_loop(cfg, model, theta, out_dir)
    return out_dir / "model_final.json"


@dataclass
class EvalSummary:
    n_episodes: int
    mean_reward: float
    success_rate: float
    ci_low: float
    ci_high: float


def binomial_ci(successes: int, n: int, confidence: float = 0.95) -> tuple[float, float]:
    """Exact (Clopper-Pearson) binomial interval."""
    alpha = 1.0 - confidence
    lo = 0.0 if successes == 0 else float(beta_dist.ppf(alpha / 2, successes,
                                                        n - successes + 1))
    hi = 1.0 if successes == n else float(beta_dist.ppf(1 - alpha / 2, successes + 1,
                                                        n - successes))
    return lo, hi


def evaluate_policy(cfg: ExperimentConfig, model, theta: policy.PolicyParams,
                    n_episodes: int, eval_tag: int = 0) -> EvalSummary:
    batch = collect_batch(cfg, model, theta, eval_tag, n_episodes, stream=_EVAL)
    n_succ = int(batch.successes.sum())
    lo, hi = binomial_ci(n_succ, n_episodes)
    return EvalSummary(
        n_episodes=n_episodes,
        mean_reward=float(batch.rewards.mean()),
        success_rate=n_succ / n_episodes,
        ci_low=lo,
        ci_high=hi,
    )


def cmd_eval(cfg: ExperimentConfig, model_path: Path, out_dir: Path) -> EvalSummary:
    model, theta = serialize.load_model(model_path)
    if theta is None:
        raise ValueError(f"{model_path} carries no policy block")
    summary = evaluate_policy(cfg, model, theta, cfg.rl.eval_episodes)
    print(f"episodes={summary.n_episodes} mean_reward={summary.mean_reward:.4f} "
          f"success_rate={summary.success_rate:.4f} "
          f"ci95=[{summary.ci_low:.4f}, {summary.ci_high:.4f}]")
    return summary


def cmd_full_run(cfg: ExperimentConfig, out_dir: Path) -> dict:
    demos_path = cmd_gen_demos(cfg, out_dir)
    model_path = cmd_imitate(cfg, demos_path, out_dir)
    final_path = cmd_improve(cfg, model_path, out_dir)
    model, theta0 = serialize.load_model(model_path)
    _, theta_final = serialize.load_model(final_path)
    il = evaluate_policy(cfg, model, theta0, cfg.rl.eval_episodes)
    rl = evaluate_policy(cfg, model, theta_final, cfg.rl.eval_episodes)
    summary = {
        "imitation": {"mean_reward": il.mean_reward, "success_rate": il.success_rate,
                      "ci95": [il.ci_low, il.ci_high]},
        "final": {"mean_reward": rl.mean_reward, "success_rate": rl.success_rate,
                  "ci95": [rl.ci_low, rl.ci_high]},
    }
    import json
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"imitation success_rate={il.success_rate:.4f} -> "
          f"final success_rate={rl.success_rate:.4f}")
    return summary
