"""Full-covariance Gaussian mixtures fitted by Expectation-Maximization.

Prototypes for the heterogeneity alignment are the component means and
covariances of one mixture per modality.
"""

import json
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import DimensionMismatch, EmptyComponent, TooFewSamples
from .linalg import cholesky, logsumexp

COV_FLOOR = 1e-6
RESP_FLOOR_FRAC = 1e-8
LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class GmmModel:
    pi: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    log_likelihood_trace: list = field(default_factory=list)

    @property
    def K(self):
        return len(self.pi)

    @property
    def dim(self):
        return self.means.shape[1]

    def to_dict(self):
        return {
            "K": int(self.K),
            "pi": self.pi.tolist(),
            "means": self.means.tolist(),
            "covs": self.covs.tolist(),
        }

    @classmethod
    def from_dict(cls, doc):
        model = cls(
            pi=np.asarray(doc["pi"], dtype=np.float64),
            means=np.asarray(doc["means"], dtype=np.float64).reshape(int(doc["K"]), -1),
            covs=np.asarray(doc["covs"], dtype=np.float64),
        )
        if model.covs.shape != (model.K, model.dim, model.dim):
            raise DimensionMismatch(f"covs shape {model.covs.shape} does not match "
                                    f"K={model.K}, d={model.dim}")
        return model

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def log_gaussian_pdf(x, mu, sigma):
    """Log density of ``N(mu, sigma)`` at ``x``."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    mu = np.asarray(mu, dtype=np.float64).reshape(-1)
    sigma = np.asarray(sigma, dtype=np.float64)
    d = x.shape[0]
    if mu.shape[0] != d or sigma.shape != (d, d):
        raise DimensionMismatch(
            f"x has dim {d}, mu {mu.shape}, sigma {sigma.shape}")
    L, logdet = cholesky(sigma, return_logdet=True)
    z = np.linalg.solve(L, x - mu)
    return -0.5 * (float(z @ z) + logdet + d * LOG_2PI)


def _log_weighted_densities(X, model):
    """``log(pi_k) + log N(x_n; mu_k, Sigma_k)`` as an (N, K) array."""
    N, d = X.shape
    if d != model.dim:
        raise DimensionMismatch(f"features have dim {d}, model has dim {model.dim}")
    out = np.empty((N, model.K))
    for k in range(model.K):
        L, logdet = cholesky(model.covs[k], return_logdet=True)
        z = np.linalg.solve(L, (X - model.means[k]).T)
        maha = np.sum(z * z, axis=0)
        with np.errstate(divide="ignore"):
            out[:, k] = np.log(model.pi[k]) - 0.5 * (maha + logdet + d * LOG_2PI)
    return out


def e_step(X, model):
    """Posterior component memberships, one row-stochastic row per sample."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    logp = _log_weighted_densities(X, model)
    return np.exp(logp - logsumexp(logp, axis=1)[:, None])


def log_likelihood(X, model):
    """Mean per-sample log-likelihood."""
    logp = _log_weighted_densities(np.atleast_2d(np.asarray(X, dtype=np.float64)), model)
    return float(np.mean(logsumexp(logp, axis=1)))


def m_step(X, w, cov_floor=COV_FLOOR, resp_floor=None):
    """Closed-form maximizer of the expected complete-data log-likelihood."""
    X = np.asarray(X, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    N, d = X.shape
    if w.shape[0] != N:
        raise DimensionMismatch(f"{N} samples but responsibilities of shape {w.shape}")
    if resp_floor is None:
        resp_floor = RESP_FLOOR_FRAC * N
    Nk = w.sum(axis=0)
    empty = np.flatnonzero(Nk < resp_floor)
    if empty.size:
        raise EmptyComponent(f"components {empty.tolist()} have no support", empty)
    means = (w.T @ X) / Nk[:, None]
    covs = np.empty((w.shape[1], d, d))
    for k in range(w.shape[1]):
        diff = X - means[k]
        c = (w[:, k, None] * diff).T @ diff / Nk[k]
        covs[k] = 0.5 * (c + c.T) + cov_floor * np.eye(d)
    return GmmModel(pi=Nk / N, means=means, covs=covs)


def _kmeanspp_means(X, K, rng):
    """Greedy k-means++: each step samples a few candidates and keeps the best."""
    N = X.shape[0]
    trials = 2 + int(np.log(K))
    centers = [X[rng.integers(N)]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total > 0:
            cand = rng.choice(N, size=trials, p=d2 / total)
        else:
            cand = rng.integers(N, size=trials)
        cand_d2 = np.minimum(d2[None], np.sum((X[None] - X[cand][:, None]) ** 2, axis=-1))
        best = int(np.argmin(cand_d2.sum(axis=1)))
        centers.append(X[cand[best]])
        d2 = cand_d2[best]
    return np.array(centers)


def _global_cov(X, cov_floor):
    diff = X - X.mean(axis=0)
    c = diff.T @ diff / X.shape[0]
    return 0.5 * (c + c.T) + cov_floor * np.eye(X.shape[1])


def _initial_model(X, K, rng, cov_floor):
    """k-means++ seeds, then one hard-assignment M-step around them."""
    centers = _kmeanspp_means(X, K, rng)
    d2 = np.sum((X[:, None, :] - centers[None]) ** 2, axis=-1)
    w = np.eye(K)[np.argmin(d2, axis=1)]
    if np.all(w.sum(axis=0) >= 2):
        return m_step(X, w, cov_floor)
    # duplicated seeds leave a cell (nearly) empty; fall back to the pooled covariance
    return GmmModel(pi=np.full(K, 1.0 / K), means=centers,
                    covs=np.repeat(_global_cov(X, cov_floor)[None], K, axis=0))


def _reseed(X, model, w, empty, cov_floor):
    """Move empty components onto the samples the current mixture explains worst."""
    dens = logsumexp(_log_weighted_densities(X, model), axis=1)
    worst = np.argsort(dens, kind="stable")
    gcov = _global_cov(X, cov_floor)
    w = w.copy()
    for slot, k in enumerate(empty):
        n = worst[slot]
        w[n] = 0.0
        w[n, k] = 1.0
    model = m_step(X, w, cov_floor, resp_floor=0.0)
    for k in empty:
        model.covs[k] = gcov
    return model


def fit(X, K, seed=0, max_iters=100, tol=1e-6, cov_floor=COV_FLOOR):
    """Fit a K-component full-covariance mixture by EM.

    Stops once the mean log-likelihood improves by less than ``tol`` or after
    ``max_iters`` M-steps. The trace holds the mean log-likelihood of every
    evaluated model; its last entry belongs to the returned model.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise DimensionMismatch(f"features must be 2-d, got shape {X.shape}")
    N = X.shape[0]
    if K < 1 or N < K:
        raise TooFewSamples(f"need at least K={K} >= 1 samples, got {N}")
    rng = np.random.default_rng(seed)
    model = _initial_model(X, K, rng, cov_floor)
    trace = []
    for it in range(max_iters + 1):
        ll = log_likelihood(X, model)
        trace.append(ll)
        if it == max_iters or (it > 0 and ll - trace[-2] < tol):
            break
        w = e_step(X, model)
        try:
            model = m_step(X, w, cov_floor)
        except EmptyComponent as exc:
            model = _reseed(X, model, w, exc.components, cov_floor)
    model.log_likelihood_trace = trace
    return model


class GaussianMixtureEM(BaseEstimator):
    """Estimator wrapper around :func:`fit` for pipeline use.

    Parameters
    ----------
    n_components : int
        Number of prototypes; set to the class count downstream.
    max_iter : int
    tol : float
        Stopping threshold on the mean log-likelihood gain.
    cov_floor : float
        Added to every covariance diagonal.
    random_state : int
        Seed for k-means++ initialization.
    """

    def __init__(self, n_components=3, max_iter=100, tol=1e-6, cov_floor=COV_FLOOR,
                 random_state=0):
        self.n_components = n_components
        self.max_iter = max_iter
        self.tol = tol
        self.cov_floor = cov_floor
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.model_ = fit(X, self.n_components, seed=self.random_state,
                          max_iters=self.max_iter, tol=self.tol, cov_floor=self.cov_floor)
        self.weights_ = self.model_.pi
        self.means_ = self.model_.means
        self.covariances_ = self.model_.covs
        self.log_likelihood_trace_ = list(self.model_.log_likelihood_trace)
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return e_step(check_array(X, dtype=np.float64), self.model_)

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)

    def score_samples(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        return logsumexp(_log_weighted_densities(X, self.model_), axis=1)

    def score(self, X, y=None):
        return float(np.mean(self.score_samples(X)))
