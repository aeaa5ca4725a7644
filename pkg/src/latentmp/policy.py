"""Conditional latent policy over a fixed set of mixture projections.

Given fitted projections {Omega_k, omega_bar_k, C_k, c_bar_k, sigma2_k},
the trainable parameters are the mixture logits and per-component latent
Gaussians (mean, diagonal covariance).  Conditioning on a context c gives
component probabilities p(k|c) and Gaussian posteriors p(z|k,c); movements
are generated as omega = Omega_k z + omega_bar_k with the isotropic noise
dropped.

The joint latent log-density log p(z, k | c) is evaluated in the stable
form

    log p(c|z,k) + log p(z|k) + log pi_k - log sum_j pi_j p(c|j)

which avoids inverting the posterior covariance, and its gradient with
respect to the unconstrained parameter vector is computed analytically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import logsumexp

LOG_SUPPORT_FLOOR = -700.0


class OutOfSupportError(ValueError):
    """Context so far outside the model that all component weights underflow."""


class ConditioningError(np.linalg.LinAlgError):
    """A posterior covariance factorization failed (ill-conditioned model)."""


@dataclass
class PolicyParams:
    """Unconstrained trainable parameters: logits (K,), mu (K, d_z), log_var (K, d_z)."""

    logits: np.ndarray
    mu: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=float)
        self.mu = np.asarray(self.mu, dtype=float)
        self.log_var = np.asarray(self.log_var, dtype=float)
        if not (np.all(np.isfinite(self.logits)) and np.all(np.isfinite(self.mu))
                and np.all(np.isfinite(self.log_var))):
            raise ValueError("policy parameters must be finite")
        if self.mu.shape != self.log_var.shape or self.mu.shape[0] != self.logits.shape[0]:
            raise ValueError("inconsistent parameter shapes")

    @property
    def n_components(self) -> int:
        return self.logits.shape[0]

    @property
    def d_z(self) -> int:
        return self.mu.shape[1]

    @property
    def dim(self) -> int:
        return self.logits.size + self.mu.size + self.log_var.size

    @property
    def weights(self) -> np.ndarray:
        """Softmax of the logits."""
        e = np.exp(self.logits - self.logits.max())
        return e / e.sum()

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.log_var)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.logits, self.mu.ravel(), self.log_var.ravel()])

    @classmethod
    def from_vector(cls, vec: np.ndarray, K: int, d_z: int) -> "PolicyParams":
        vec = np.asarray(vec, dtype=float)
        if vec.size != K + 2 * K * d_z:
            raise ValueError("parameter vector length mismatch")
        return cls(
            logits=vec[:K].copy(),
            mu=vec[K:K + K * d_z].reshape(K, d_z).copy(),
            log_var=vec[K + K * d_z:].reshape(K, d_z).copy(),
        )

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.logits.copy(), self.mu.copy(), self.log_var.copy())


def initial_params(model) -> PolicyParams:
    """Start the policy from the model's own latent distribution."""
    return PolicyParams(
        logits=np.log(np.maximum(model.pi, 1e-300)),
        mu=model.mu.copy(),
        log_var=np.log(model.Sigma_diag),
    )


@dataclass
class ConditionalPosterior:
    comp_probs: np.ndarray      # (K,)
    post_mean: np.ndarray       # (K, d_z)
    post_cov: np.ndarray        # (K, d_z, d_z)


class _Conditioner:
    """Everything about (model, theta) that does not depend on the context.

    Context marginals p(c|k) share one covariance per component, and the
    posterior covariance of z given (k, c) is context-independent; only the
    posterior mean is an affine function of c.
    """

    def __init__(self, model, theta: PolicyParams):
        if theta.n_components != model.n_components or theta.d_z != model.d_z:
            raise ValueError("policy/model shape mismatch")
        self.model = model
        self.theta = theta
        K, d_z, d_c = model.n_components, model.d_z, model.d_c
        V = theta.var
        self.log_pi = theta.logits - logsumexp(theta.logits)

        self.ctx_mean = np.empty((K, d_c))
        self.ctx_cov = np.empty((K, d_c, d_c))
        self.ctx_cho = []
        self.post_cov = np.empty((K, d_z, d_z))
        self.post_cho = []
        self.post_A = np.empty((K, d_z, d_c))   # mean map: m_k(c) = A_k (c - c_bar_k) + r_k
        self.post_r = np.empty((K, d_z))
        for k in range(K):
            C = model.C[k]
            s2 = model.sigma2[k]
            self.ctx_mean[k] = C @ theta.mu[k] + model.c_bar[k]
            self.ctx_cov[k] = s2 * np.eye(d_c) + (C * V[k]) @ C.T
            prec = np.diag(1.0 / V[k]) + (C.T @ C) / s2
            try:
                cho_prec = cho_factor(prec, lower=True)
                self.ctx_cho.append(cho_factor(self.ctx_cov[k], lower=True))
                S = cho_solve(cho_prec, np.eye(d_z))
                self.post_cov[k] = 0.5 * (S + S.T)
                self.post_cho.append(np.linalg.cholesky(self.post_cov[k]))
            except np.linalg.LinAlgError as exc:
                raise ConditioningError(
                    f"posterior factorization failed for component {k}"
                ) from exc
            self.post_A[k] = S @ C.T / s2
            self.post_r[k] = S @ (theta.mu[k] / V[k])

    def ctx_log_pdf(self, Cs: np.ndarray) -> np.ndarray:
        """(N, K) log p(c|k) for context rows."""
        N = Cs.shape[0]
        d_c = self.model.d_c
        out = np.empty((N, self.model.n_components))
        for k in range(self.model.n_components):
            diff = Cs - self.ctx_mean[k]
            sol = cho_solve(self.ctx_cho[k], diff.T)
            logdet = 2.0 * np.sum(np.log(np.diag(self.ctx_cho[k][0])))
            out[:, k] = -0.5 * (d_c * np.log(2 * np.pi) + logdet + np.sum(diff.T * sol, axis=0))
        return out

    def comp_log_posterior(self, Cs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Normalized (N, K) log p(k|c) and the (N,) evidence log sum_j pi_j p(c|j)."""
        joint = self.ctx_log_pdf(Cs) + self.log_pi
        evidence = logsumexp(joint, axis=1)
        return joint - evidence[:, None], evidence

    def post_means(self, Cs: np.ndarray) -> np.ndarray:
        """(N, K, d_z) posterior means of z for context rows."""
        diff = Cs[:, None, :] - self.model.c_bar[None, :, :]
        return np.einsum("kij,nkj->nki", self.post_A, diff) + self.post_r[None, :, :]


def condition(model, theta: PolicyParams, c: np.ndarray) -> ConditionalPosterior:
    """Component probabilities p(k|c) and Gaussian posteriors over z."""
    c = np.asarray(c, dtype=float)
    if c.shape != (model.d_c,) or not np.all(np.isfinite(c)):
        raise ValueError("context must be a finite vector of length d_c")
    cond = _Conditioner(model, theta)
    joint = cond.ctx_log_pdf(c[None, :])[0] + cond.log_pi
    if np.max(joint) < LOG_SUPPORT_FLOOR:
        raise OutOfSupportError(
            f"context {c} is outside the support of every component"
        )
    comp_probs = np.exp(joint - logsumexp(joint))
    return ConditionalPosterior(
        comp_probs=comp_probs,
        post_mean=cond.post_means(c[None, :])[0],
        post_cov=cond.post_cov.copy(),
    )


def sample_movement(model, theta: PolicyParams, c: np.ndarray,
                    rng: np.random.Generator) -> tuple[int, np.ndarray, np.ndarray]:
    """Draw (k, z, omega) for a context; omega is deterministic given (k, z)."""
    post = condition(model, theta, c)
    k = int(rng.choice(model.n_components, p=post.comp_probs))
    chol = np.linalg.cholesky(post.post_cov[k])
    z = post.post_mean[k] + chol @ rng.standard_normal(model.d_z)
    omega = model.Omega[k] @ z + model.omega_bar[k]
    return k, z, omega


def _validate_batch(model, Z, ks, Cs):
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    Cs = np.atleast_2d(np.asarray(Cs, dtype=float))
    ks = np.atleast_1d(np.asarray(ks, dtype=int))
    if Z.shape[1] != model.d_z or Cs.shape[1] != model.d_c:
        raise ValueError("z/context dimension mismatch")
    if not (len(Z) == len(ks) == len(Cs)):
        raise ValueError("batch length mismatch")
    if np.any(ks < 0) or np.any(ks >= model.n_components):
        raise ValueError("component index out of range")
    if not (np.all(np.isfinite(Z)) and np.all(np.isfinite(Cs))):
        raise ValueError("non-finite inputs")
    return Z, ks, Cs


def log_density_batch(model, theta: PolicyParams, Z, ks, Cs) -> np.ndarray:
    """log p(z_i, k_i | c_i) for a batch, shape (N,)."""
    Z, ks, Cs = _validate_batch(model, Z, ks, Cs)
    cond = _Conditioner(model, theta)
    _, evidence = cond.comp_log_posterior(Cs)
    V = theta.var
    N = len(Z)
    out = np.empty(N)
    d_c = model.d_c
    for k in range(model.n_components):
        idx = np.flatnonzero(ks == k)
        if idx.size == 0:
            continue
        s2 = model.sigma2[k]
        # log p(c | z, k): isotropic Gaussian around C_k z + c_bar_k
        resid = Cs[idx] - Z[idx] @ model.C[k].T - model.c_bar[k]
        lp_c = -0.5 * (d_c * np.log(2 * np.pi * s2) + np.sum(resid**2, axis=1) / s2)
        # log p(z | k): diagonal Gaussian
        dz = Z[idx] - theta.mu[k]
        lp_z = -0.5 * (np.sum(np.log(2 * np.pi * V[k])) + np.sum(dz**2 / V[k], axis=1))
        out[idx] = lp_c + lp_z + cond.log_pi[k] - evidence[idx]
    return out


def log_density(model, theta: PolicyParams, z, k: int, c) -> float:
    return float(log_density_batch(model, theta, [z], [k], [c])[0])


def grad_log_density_batch(model, theta: PolicyParams, Z, ks, Cs) -> np.ndarray:
    """Per-sample gradients of log p(z_i, k_i | c_i) w.r.t. the flat
    parameter vector [logits, mu, log_var]; shape (N, dim)."""
    Z, ks, Cs = _validate_batch(model, Z, ks, Cs)
    cond = _Conditioner(model, theta)
    log_post, _ = cond.comp_log_posterior(Cs)
    w = np.exp(log_post)                      # (N, K) responsibilities p(j|c_i)
    K, d_z = model.n_components, model.d_z
    V = theta.var
    N = len(Z)

    g_logits = -w.copy()
    g_logits[np.arange(N), ks] += 1.0
    g_mu = np.zeros((N, K, d_z))
    g_lv = np.zeros((N, K, d_z))

    for j in range(K):
        C = model.C[j]
        delta = Cs - cond.ctx_mean[j]                    # (N, d_c)
        a = cho_solve(cond.ctx_cho[j], delta.T).T        # (N, d_c) rows of P_j delta
        Ca = a @ C                                       # (N, d_z)
        P_C = cho_solve(cond.ctx_cho[j], C)              # (d_c, d_z)
        quad_diag = np.sum(C * P_C, axis=0)              # diag(C^T P_j C)
        # evidence term: -w_j * d/dtheta_j log N(c | ctx_mean_j, ctx_cov_j)
        g_mu[:, j, :] = -w[:, j, None] * Ca
        g_lv[:, j, :] = w[:, j, None] * V[j] * 0.5 * (quad_diag[None, :] - Ca**2)

    # own-component terms from log p(c|z,k) + log p(z|k)
    dz = Z - theta.mu[ks]
    g_mu[np.arange(N), ks, :] += dz / V[ks]
    g_lv[np.arange(N), ks, :] += -0.5 + dz**2 / (2.0 * V[ks])

    return np.concatenate(
        [g_logits, g_mu.reshape(N, -1), g_lv.reshape(N, -1)], axis=1
    )


def grad_log_density(model, theta: PolicyParams, z, k: int, c) -> np.ndarray:
    return grad_log_density_batch(model, theta, [z], [k], [c])[0]
