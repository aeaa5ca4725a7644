"""Off-policy improvement of the latent policy from replayed episodes.

All episodes ever collected stay in one buffer; the importance-sampling
denominator is the equal-weight mixture of every behavior policy, so the
per-policy latent log-densities are cached once per (episode, policy)
pair.  The improvement step maximizes the self-normalized importance
sampling estimate of the expected reward, minus a KL regularizer that
keeps the context marginal near the imitation policy, subject to a KL
trust region between consecutive policies.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import logsumexp

from . import policy as pol
from . import sqp

log = logging.getLogger(__name__)

LOG_DEN_FLOOR = -700.0


@dataclass
class LampoConfig:
    """Improvement-step knobs: KL regularizer weight, trust-region bound,
    and the number of episodes collected per iteration."""

    gamma: float = 1.0
    chi: float = 0.2
    n_per_iter: int = 50

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if self.chi <= 0:
            raise ValueError("chi must be positive")
        if self.n_per_iter < 1:
            raise ValueError("n_per_iter must be >= 1")


class ExperienceBuffer:
    """Episodes from every past policy plus cached latent log-densities.

    The cache is an (n_episodes, n_policies) matrix of
    log p_t(z_i, k_i | c_i); registering a new policy extends every row
    exactly once, and new episodes get a full row on insertion.
    """

    def __init__(self, model):
        self.model = model
        d_z, d_c, m = model.d_z, model.d_c, model.m
        self.contexts = np.empty((0, d_c))
        self.zs = np.empty((0, d_z))
        self.ks = np.empty(0, dtype=int)
        self.omegas = np.empty((0, m))
        self.rewards = np.empty(0)
        self.policy_index = np.empty(0, dtype=int)
        self.policies: list[pol.PolicyParams] = []
        self.logdens = np.empty((0, 0))

    def __len__(self) -> int:
        return self.rewards.shape[0]

    @property
    def n_policies(self) -> int:
        return len(self.policies)

    def add_policy(self, theta: pol.PolicyParams) -> None:
        """Register the policy about to collect the next batch."""
        self.policies.append(theta.copy())
        col = np.empty((len(self), 1))
        if len(self):
            col[:, 0] = pol.log_density_batch(
                self.model, theta, self.zs, self.ks, self.contexts)
        self.logdens = np.hstack([self.logdens, col]) if self.logdens.size or len(self) else (
            np.empty((0, self.n_policies)))

    def add_episodes(self, contexts, ks, zs, omegas, rewards) -> None:
        """Append a batch collected under the most recently added policy."""
        if not self.policies:
            raise ValueError("add_policy must be called before add_episodes")
        contexts = np.atleast_2d(np.asarray(contexts, dtype=float))
        zs = np.atleast_2d(np.asarray(zs, dtype=float))
        ks = np.asarray(ks, dtype=int)
        omegas = np.atleast_2d(np.asarray(omegas, dtype=float))
        rewards = np.asarray(rewards, dtype=float)
        n = rewards.shape[0]
        rows = np.empty((n, self.n_policies))
        for t, theta in enumerate(self.policies):
            rows[:, t] = pol.log_density_batch(self.model, theta, zs, ks, contexts)
        self.contexts = np.vstack([self.contexts, contexts])
        self.zs = np.vstack([self.zs, zs])
        self.ks = np.concatenate([self.ks, ks])
        self.omegas = np.vstack([self.omegas, omegas])
        self.rewards = np.concatenate([self.rewards, rewards])
        self.policy_index = np.concatenate(
            [self.policy_index, np.full(n, self.n_policies - 1, dtype=int)])
        self.logdens = np.vstack([self.logdens, rows]) if self.logdens.size else rows


def log_importance_ratios(buffer: ExperienceBuffer, theta: pol.PolicyParams) -> np.ndarray:
    """log rho_i with the equal-weight mixture of past policies in the
    denominator; underflowing denominators are clamped (and logged)."""
    if len(buffer) == 0:
        raise ValueError("buffer is empty")
    log_num = pol.log_density_batch(buffer.model, theta, buffer.zs, buffer.ks,
                                    buffer.contexts)
    log_den = logsumexp(buffer.logdens, axis=1) - np.log(buffer.n_policies)
    n_clamped = int(np.sum(log_den < LOG_DEN_FLOOR))
    if n_clamped:
        log.warning("clamped %d underflowing importance denominators", n_clamped)
        log_den = np.maximum(log_den, LOG_DEN_FLOOR)
    return log_num - log_den


def importance_ratios(buffer: ExperienceBuffer, theta: pol.PolicyParams) -> np.ndarray:
    """Importance ratios rho_i, finite and positive."""
    return np.exp(np.clip(log_importance_ratios(buffer, theta), LOG_DEN_FLOOR,
                          -LOG_DEN_FLOOR))


def _normalized_weights(log_rho: np.ndarray) -> tuple[np.ndarray, float]:
    """(rho_i / nu, nu) computed from max-shifted ratios; overflow-safe and
    exactly invariant to common rescaling of the ratios."""
    shifted = np.exp(log_rho - np.max(log_rho))
    nu = float(np.sum(shifted))
    return shifted / nu, nu


def snis_objective(buffer: ExperienceBuffer, theta: pol.PolicyParams) -> float:
    """Self-normalized estimate of the expected reward under theta."""
    log_rho = log_importance_ratios(buffer, theta)
    shifted = np.exp(log_rho - np.max(log_rho))
    # single final division so the on-policy case reduces to the sample mean
    return float(np.sum(shifted * buffer.rewards) / np.sum(shifted))

def snis_gradient(buffer: ExperienceBuffer, theta: pol.PolicyParams) -> np.ndarray:
    """Gradient of the self-normalized estimate: baseline-subtracted
    score-weighted average."""
    log_rho = log_importance_ratios(buffer, theta)
    weights, _ = _normalized_weights(log_rho)
    j_hat = float(weights @ buffer.rewards)
    grads = pol.grad_log_density_batch(buffer.model, theta, buffer.zs, buffer.ks,
                                       buffer.contexts)
    return grads.T @ (weights * (buffer.rewards - j_hat))


def effective_sample_size(buffer: ExperienceBuffer, theta: pol.PolicyParams) -> float:
    """nu^2 / sum(rho^2), invariant to common rescaling of the ratios."""
    log_rho = log_importance_ratios(buffer, theta)
    shifted = np.exp(log_rho - np.max(log_rho))
    return float(np.sum(shifted) ** 2 / np.sum(shifted**2))


def _gauss_kl(mean_a, cov_a, mean_b, cho_b, logdet_a, logdet_b):
    """KL(N_a || N_b) with cho_b a Cholesky factor pair of cov_b."""
    d = mean_a.shape[0]
    diff = mean_b - mean_a
    tr = float(np.trace(cho_solve(cho_b, cov_a)))
    maha = float(diff @ cho_solve(cho_b, diff))
    return 0.5 * (tr + maha - d + logdet_b - logdet_a)


def context_regularizer(model, theta: pol.PolicyParams,
                        theta0: pol.PolicyParams) -> tuple[float, np.ndarray]:
    """KL between the (context, component) marginals of theta and theta0,
    and its gradient in theta.  Zero exactly at theta = theta0."""
    if (np.array_equal(theta.logits, theta0.logits)
            and np.array_equal(theta.mu, theta0.mu)
            and np.array_equal(theta.log_var, theta0.log_var)):
        return 0.0, np.zeros(theta.dim)
    cond = pol._Conditioner(model, theta)
    cond0 = pol._Conditioner(model, theta0)
    K, d_z = model.n_components, model.d_z
    piw = np.exp(cond.log_pi)
    V = theta.var

    kl_g = np.empty(K)
    g_mu = np.zeros((K, d_z))
    g_lv = np.zeros((K, d_z))
    for k in range(K):
        cov = cond.ctx_cov[k]
        cho0 = cond0.ctx_cho[k]
        logdet = 2.0 * np.sum(np.log(np.diag(cond.ctx_cho[k][0])))
        logdet0 = 2.0 * np.sum(np.log(np.diag(cho0[0])))
        kl_g[k] = _gauss_kl(cond.ctx_mean[k], cov, cond0.ctx_mean[k], cho0,
                            logdet, logdet0)
        C = model.C[k]
        diff = cond.ctx_mean[k] - cond0.ctx_mean[k]
        g_mu[k] = piw[k] * (C.T @ cho_solve(cho0, diff))
        P0_C = cho_solve(cho0, C)
        P_C = cho_solve(cond.ctx_cho[k], C)
        g_lv[k] = piw[k] * V[k] * 0.5 * (np.sum(C * P0_C, axis=0) - np.sum(C * P_C, axis=0))

    s = cond.log_pi - cond0.log_pi
    kl_cat = float(piw @ s)
    eta = float(piw @ kl_g) + kl_cat
    total_k = kl_g + s
    g_logits = piw * (total_k - float(piw @ total_k))
    return eta, np.concatenate([g_logits, g_mu.ravel(), g_lv.ravel()])


def trust_region(model, theta_prev: pol.PolicyParams, theta: pol.PolicyParams,
                 contexts: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over contexts of KL(p_prev(z,k|c) || p_theta(z,k|c)) and its
    gradient in theta."""
    contexts = np.atleast_2d(np.asarray(contexts, dtype=float))
    N = contexts.shape[0]
    cond_p = pol._Conditioner(model, theta_prev)
    cond_t = pol._Conditioner(model, theta)
    K, d_z = model.n_components, model.d_z
    V = theta.var

    log_r, _ = cond_p.comp_log_posterior(contexts)
    log_w, _ = cond_t.comp_log_posterior(contexts)
    r = np.exp(log_r)
    w = np.exp(log_w)
    means_p = cond_p.post_means(contexts)    # (N, K, d_z)
    means_t = cond_t.post_means(contexts)

    g_total = 0.0
    g_logits = np.sum(w - r, axis=0) / N
    g_mu = np.zeros((K, d_z))
    g_lv = np.zeros((K, d_z))

    # categorical part of the KL
    g_total += float(np.sum(r * (log_r - log_w))) / N

    for k in range(K):
        S_t = cond_t.post_cov[k]
        S_p = cond_p.post_cov[k]
        cho_t = (cond_t.post_cho[k], True)
        logdet_t = 2.0 * np.sum(np.log(np.diag(cond_t.post_cho[k])))
        logdet_p = 2.0 * np.sum(np.log(np.diag(cond_p.post_cho[k])))
        St_inv_Sp = cho_solve(cho_t, S_p)
        tr_term = float(np.trace(St_inv_Sp))
        delta = means_t[:, k, :] - means_p[:, k, :]          # (N, d_z)
        sol = cho_solve(cho_t, delta.T).T                    # rows S_t^{-1} delta
        maha = np.sum(delta * sol, axis=1)
        kl_gauss = 0.5 * (tr_term + maha - d_z + logdet_t - logdet_p)
        g_total += float(r[:, k] @ kl_gauss) / N

        # gradient pieces; posterior mean/cov derivatives collapse to
        # coordinate-wise expressions in the diagonal-prior parameterization
        rk = r[:, k][:, None]
        # d mean / d mu through S V^{-1}, times dKL/dmean = S^{-1} delta
        g_mu[k] += np.sum(rk * (delta / V[k]), axis=0) / N
        # d/d log_var of the Gaussian KL
        m_minus_mu = means_t[:, k, :] - theta.mu[k]
        diag_part = 0.5 * (np.diag(S_t) - np.diag(S_p) - delta**2) / V[k]
        g_lv[k] += np.sum(rk * (diag_part + delta * m_minus_mu / V[k]), axis=0) / N

        # categorical part: (w_k - r_k) times gradient of log [pi_k p(c|k)]
        C = model.C[k]
        coeff = (w[:, k] - r[:, k])[:, None]
        dctx = contexts - cond_t.ctx_mean[k]
        a = cho_solve(cond_t.ctx_cho[k], dctx.T).T
        Ca = a @ C
        P_C = cho_solve(cond_t.ctx_cho[k], C)
        quad_diag = np.sum(C * P_C, axis=0)
        g_mu[k] += np.sum(coeff * Ca, axis=0) / N
        g_lv[k] += np.sum(coeff * (-0.5 * V[k] * (quad_diag[None, :] - Ca**2)), axis=0) / N

    return g_total, np.concatenate([g_logits, g_mu.ravel(), g_lv.ravel()])


@dataclass
class ImproveReport:
    accepted: bool
    j_hat: float
    eta: float
    mean_g: float
    nu: float
    ess: float
    solver_status: str
    solver_iterations: int
    message: str = ""


def improve(buffer: ExperienceBuffer, theta: pol.PolicyParams, model,
            config: LampoConfig,
            solver_opts: sqp.SolveOptions | None = None,
            theta0: pol.PolicyParams | None = None) -> tuple[pol.PolicyParams, ImproveReport]:
    """One constrained improvement step starting from the current policy.

    Falls back to the unchanged policy if the solver result violates the
    trust region or fails to improve the penalized objective.
    """
    if len(buffer) == 0:
        raise ValueError("buffer has no episodes")
    theta0 = theta0 or buffer.policies[0]
    K, d_z = theta.n_components, theta.d_z

    bad = (np.nan, np.zeros(theta.dim))

    def objective(x):
        try:
            th = pol.PolicyParams.from_vector(x, K, d_z)
            j = snis_objective(buffer, th)
            gj = snis_gradient(buffer, th)
            eta, geta = context_regularizer(model, th, theta0)
        except (np.linalg.LinAlgError, FloatingPointError, ValueError):
            return bad
        return j - config.gamma * eta, gj - config.gamma * geta

    def constraint(x):
        try:
            th = pol.PolicyParams.from_vector(x, K, d_z)
            return trust_region(model, theta, th, buffer.contexts)
        except (np.linalg.LinAlgError, FloatingPointError, ValueError):
            return bad

    problem = sqp.NlpProblem(
        dim=theta.dim, objective=objective, constraint=constraint,
        bound=config.chi, x0=theta.to_vector(),
    )
    report = sqp.solve(problem, solver_opts)

    theta_new = pol.PolicyParams.from_vector(report.x_star, K, d_z)
    f_old, _ = objective(theta.to_vector())
    f_new, _ = objective(report.x_star)
    g_new, _ = constraint(report.x_star)

    accepted = (report.status != "failed" and g_new <= config.chi + 1e-4
                and f_new >= f_old - 1e-8)
    if not accepted:
        log.warning("improvement step rejected (%s); keeping current policy",
                    report.message or report.status)
        theta_new = theta.copy()
        g_new, _ = constraint(theta_new.to_vector())

    log_rho = log_importance_ratios(buffer, theta_new)
    _, nu = _normalized_weights(log_rho)
    eta_new, _ = context_regularizer(model, theta_new, theta0)
    return theta_new, ImproveReport(
        accepted=accepted,
        j_hat=snis_objective(buffer, theta_new),
        eta=eta_new,
        mean_g=float(g_new),
        nu=float(np.sum(np.exp(np.clip(log_rho, LOG_DEN_FLOOR, -LOG_DEN_FLOOR)))),
        ess=effective_sample_size(buffer, theta_new),
        solver_status=report.status,
        solver_iterations=report.iterations,
        message=report.message,
    )
