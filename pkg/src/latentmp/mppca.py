"""Mixture of probabilistic principal component analyzers over joint
(movement, context) vectors.

Each component k generates a stacked observation x = [omega; c] as

    x = W_k z + b_k + eps,   z ~ N(mu_k, Sigma_k),  eps ~ N(0, sigma2_k I)

with W_k = [Omega_k; C_k] and b_k = [omega_bar_k; c_bar_k].  EM fits the
projection parameters under the standard latent normalization mu_k = 0,
Sigma_k = I; the latent parameters stay in the model so downstream code
can re-parameterize the latent distribution without touching the
projections.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.special import logsumexp

log = logging.getLogger(__name__)

SIGMA2_FLOOR = 1e-8
EMPTY_COMPONENT_FRACTION = 1e-6


@dataclass
class EmOptions:
    max_iters: int = 500
    rel_tol: float = 1e-6
    seed: int = 0
    kmeans_restarts: int = 5
    kmeans_iters: int = 100

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.rel_tol <= 0:
            raise ValueError("rel_tol must be positive")


@dataclass
class MppcaModel:
    """Mixture weights, per-component loadings/offsets/noise, latent Gaussians.

    Shapes: pi (K,), Omega (K, m, d_z), omega_bar (K, m), C (K, d_c, d_z),
    c_bar (K, d_c), sigma2 (K,), mu (K, d_z), Sigma_diag (K, d_z).
    """

    pi: np.ndarray
    Omega: np.ndarray
    omega_bar: np.ndarray
    C: np.ndarray
    c_bar: np.ndarray
    sigma2: np.ndarray
    mu: np.ndarray
    Sigma_diag: np.ndarray
    loglik_history: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=float)
        self.Omega = np.asarray(self.Omega, dtype=float)
        self.omega_bar = np.asarray(self.omega_bar, dtype=float)
        self.C = np.asarray(self.C, dtype=float)
        self.c_bar = np.asarray(self.c_bar, dtype=float)
        self.sigma2 = np.asarray(self.sigma2, dtype=float)
        self.mu = np.asarray(self.mu, dtype=float)
        self.Sigma_diag = np.asarray(self.Sigma_diag, dtype=float)
        K = self.pi.shape[0]
        if not np.isclose(self.pi.sum(), 1.0, atol=1e-8) or np.any(self.pi < -1e-12):
            raise ValueError("pi must be a probability simplex")
        if np.any(self.sigma2 < SIGMA2_FLOOR * (1 - 1e-9)):
            raise ValueError(f"sigma2 entries must be >= {SIGMA2_FLOOR}")
        if np.any(self.Sigma_diag <= 0):
            raise ValueError("Sigma_diag entries must be positive")
        shapes = (
            self.Omega.shape[0], self.omega_bar.shape[0], self.C.shape[0],
            self.c_bar.shape[0], self.sigma2.shape[0], self.mu.shape[0],
            self.Sigma_diag.shape[0],
        )
        if any(s != K for s in shapes):
            raise ValueError("component count mismatch across parameter arrays")
        if self.Omega.shape[2] != self.C.shape[2] or self.mu.shape[1] != self.Omega.shape[2]:
            raise ValueError("latent dimension mismatch across parameter arrays")

    @property
    def n_components(self) -> int:
        return self.pi.shape[0]

    @property
    def d_z(self) -> int:
        return self.Omega.shape[2]

    @property
    def m(self) -> int:
        return self.Omega.shape[1]

    @property
    def d_c(self) -> int:
        return self.C.shape[1]

    def joint_loading(self, k: int) -> np.ndarray:
        """Stacked loading [Omega_k; C_k], shape (m + d_c, d_z)."""
        return np.vstack([self.Omega[k], self.C[k]])

    def joint_offset(self, k: int) -> np.ndarray:
        return np.concatenate([self.omega_bar[k], self.c_bar[k]])


def _gaussian_logpdf(X: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """Log N(x | mean, cov) for rows of X, via Cholesky."""
    D = mean.shape[0]
    chol = np.linalg.cholesky(cov)
    diff = X - mean
    sol = solve_triangular(chol, diff.T, lower=True)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (D * np.log(2 * np.pi) + logdet + np.sum(sol**2, axis=0))


def component_log_probs(model: MppcaModel, X: np.ndarray) -> np.ndarray:
    """(N, K) matrix of log pi_k + log N(x | b_k + W_k mu_k, W_k Sigma_k W_k^T + sigma2_k I)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != model.m + model.d_c:
        raise ValueError("joint vector dimension mismatch")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite input")
    N = X.shape[0]
    D = model.m + model.d_c
    out = np.empty((N, model.n_components))
    logpi = np.log(np.maximum(model.pi, 1e-300))
    for k in range(model.n_components):
        W = model.joint_loading(k)
        mean = model.joint_offset(k) + W @ model.mu[k]
        cov = (W * model.Sigma_diag[k]) @ W.T + model.sigma2[k] * np.eye(D)
        out[:, k] = logpi[k] + _gaussian_logpdf(X, mean, cov)
    return out


def joint_density(model: MppcaModel, x: np.ndarray) -> float:
    """Mixture density of a stacked [omega; c] vector."""
    return float(np.exp(logsumexp(component_log_probs(model, x), axis=1)[0]))


def log_likelihood(model: MppcaModel, X: np.ndarray) -> float:
    """Total data log-likelihood of stacked rows."""
    return float(np.sum(logsumexp(component_log_probs(model, X), axis=1)))


def responsibilities(model: MppcaModel, x: np.ndarray) -> np.ndarray:
    """Posterior component probabilities for one stacked vector."""
    lp = component_log_probs(model, x)[0]
    return np.exp(lp - logsumexp(lp))


def _kmeans(X: np.ndarray, K: int, rng: np.random.Generator,
            n_restarts: int, max_iters: int) -> np.ndarray:
    """Plain Lloyd's algorithm with kmeans++ seeding; returns assignments."""
    N = X.shape[0]
    best_assign, best_inertia = None, np.inf
    for _ in range(max(1, n_restarts)):
        centers = np.empty((K, X.shape[1]))
        centers[0] = X[rng.integers(N)]
        d2 = np.sum((X - centers[0]) ** 2, axis=1)
        for k in range(1, K):
            total = d2.sum()
            if total > 0:
                centers[k] = X[rng.choice(N, p=d2 / total)]
            else:
                centers[k] = X[rng.integers(N)]
            d2 = np.minimum(d2, np.sum((X - centers[k]) ** 2, axis=1))
        assign = np.zeros(N, dtype=int)
        for _ in range(max_iters):
            dists = np.sum((X[:, None, :] - centers[None, :, :]) ** 2, axis=2)
            new_assign = np.argmin(dists, axis=1)
            for k in range(K):
                mask = new_assign == k
                if np.any(mask):
                    centers[k] = X[mask].mean(axis=0)
                else:
                    centers[k] = X[rng.integers(N)]
            if np.array_equal(new_assign, assign):
                break
            assign = new_assign
        inertia = np.sum((X - centers[assign]) ** 2)
        if inertia < best_inertia:
            best_inertia, best_assign = inertia, assign.copy()
    return best_assign


def _ppca_closed_form(S: np.ndarray, d_z: int) -> tuple[np.ndarray, float]:
    """Loading and noise variance maximizing the Gaussian likelihood with
    covariance W W^T + sigma2 I against a (weighted) sample covariance S."""
    D = S.shape[0]
    evals, evecs = np.linalg.eigh(S)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    sigma2 = float(np.mean(evals[d_z:])) if d_z < D else 0.0
    sigma2 = max(sigma2, SIGMA2_FLOOR)
    scale = np.sqrt(np.maximum(evals[:d_z] - sigma2, 0.0))
    W = evecs[:, :d_z] * scale
    return W, sigma2


def fit_em(omegas: np.ndarray, contexts: np.ndarray, K: int, d_z: int,
           opts: EmOptions | None = None) -> MppcaModel:
    """EM fit of the mixture over stacked [omega; c] rows.

    Latent parameters are normalized to mu_k = 0, Sigma_k = I.  Empty
    components are reseeded from the worst-fit datapoint.  The per-iteration
    log-likelihood trace is stored on the returned model.
    """
    opts = opts or EmOptions()
    omegas = np.asarray(omegas, dtype=float)
    contexts = np.asarray(contexts, dtype=float)
    X = np.hstack([omegas, contexts])
    N, D = X.shape
    m = omegas.shape[1]
    if N < K * (d_z + 1):
        raise ValueError(f"need at least K*(d_z+1)={K * (d_z + 1)} points, got {N}")
    if not 1 <= d_z < D:
        raise ValueError(f"d_z must be in [1, {D - 1}], got {d_z}")

    rng = np.random.default_rng(opts.seed)
    # cluster on the top principal subspace: per-dimension whitening would
    # inflate the many small noise dimensions until they swamp the cluster
    # separation, so project without rescaling instead
    centered = X - X.mean(axis=0)
    r = min(D, max(2 * K, 8))
    _, _, Vt = np.linalg.svd(centered, full_matrices=False)
    assign = _kmeans(centered @ Vt[:r].T, K, rng,
                     opts.kmeans_restarts, opts.kmeans_iters)

    pi = np.full(K, 1.0 / K)
    b = np.empty((K, D))
    W = np.empty((K, D, d_z))
    sigma2 = np.empty(K)
    global_cov = np.cov(X.T, bias=True).reshape(D, D)
    for k in range(K):
        mask = assign == k
        if mask.sum() < d_z + 1:
            b[k] = X[rng.integers(N)]
            W[k], sigma2[k] = _ppca_closed_form(global_cov, d_z)
        else:
            pi[k] = mask.sum() / N
            b[k] = X[mask].mean(axis=0)
            diff = X[mask] - b[k]
            W[k], sigma2[k] = _ppca_closed_form(diff.T @ diff / mask.sum(), d_z)
    pi /= pi.sum()

    def build(loglik_hist=None):
        return MppcaModel(
            pi=pi.copy(), Omega=W[:, :m, :].copy(), omega_bar=b[:, :m].copy(),
            C=W[:, m:, :].copy(), c_bar=b[:, m:].copy(), sigma2=sigma2.copy(),
            mu=np.zeros((K, d_z)), Sigma_diag=np.ones((K, d_z)),
            loglik_history=loglik_hist,
        )

    history = []
    prev_ll = -np.inf
    for it in range(opts.max_iters):
        lp = component_log_probs(build(), X)
        row_lse = logsumexp(lp, axis=1)
        ll = float(np.sum(row_lse))
        history.append(ll)
        if prev_ll > -np.inf and abs(ll - prev_ll) <= opts.rel_tol * abs(prev_ll):
            break
        prev_ll = ll

        r = np.exp(lp - row_lse[:, None])
        mass = r.sum(axis=0)
        empty = np.flatnonzero(mass < EMPTY_COMPONENT_FRACTION * N)
        if empty.size:
            worst = int(np.argmin(row_lse))
            for k in empty:
                log.warning("reinitializing empty component %d from worst-fit point", k)
                b[k] = X[worst]
                W[k], sigma2[k] = _ppca_closed_form(global_cov, d_z)
                pi[k] = 1.0 / N
            pi /= pi.sum()
            prev_ll = -np.inf
            continue

        pi = mass / N
        for k in range(K):
            b[k] = (r[:, k] @ X) / mass[k]
            diff = X - b[k]
            S = (diff * r[:, k, None]).T @ diff / mass[k]
            W[k], sigma2[k] = _ppca_closed_form(S, d_z)

    return build(np.asarray(history))
