"""Prototype cost tensors and entropic multi-marginal optimal transport."""

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .exceptions import MismatchedK, NoConvergence, NonPositiveLambda, ShapeMismatch
from .linalg import logsumexp, sqrtm_psd

MAX_TENSOR_ENTRIES = 10 ** 7


@dataclass
class TransportPlan:
    """Joint coupling over the prototypes of all modalities.

    ``lam`` is the entropy weight relative to the cost tensor divided by
    ``cost_scale``; ``effective_lambda`` is the weight in raw cost units.
    """

    values: np.ndarray
    lam: float
    iterations: int
    marginal_residual: float
    cost_scale: float = 1.0
    converged: bool = True

    @property
    def shape(self):
        return self.values.shape

    @property
    def effective_lambda(self):
        return self.lam * self.cost_scale

    def marginal(self, i):
        axes = tuple(a for a in range(self.values.ndim) if a != i)
        return self.values.sum(axis=axes)

    def to_dict(self):
        return {
            "shape": list(self.values.shape),
            "values": self.values.reshape(-1).tolist(),
            "lambda": self.lam,
            "cost_scale": self.cost_scale,
            "iterations": self.iterations,
            "residual": self.marginal_residual,
            "converged": self.converged,
        }

    @classmethod
    def from_dict(cls, doc):
        return cls(
            values=np.asarray(doc["values"], dtype=np.float64).reshape(doc["shape"]),
            lam=float(doc["lambda"]),
            iterations=int(doc["iterations"]),
            marginal_residual=float(doc["residual"]),
            cost_scale=float(doc.get("cost_scale", 1.0)),
            converged=bool(doc.get("converged", True)),
        )


def pairwise_cost(p, q):
    """Squared 2-Wasserstein distance between two Gaussians.

    ``p`` and ``q`` are ``(mean, cov)`` pairs. The trace of
    ``(Sp Sq)^(1/2)`` is evaluated through the symmetric form
    ``(Sp^(1/2) Sq Sp^(1/2))^(1/2)``, which has the same spectrum.
    """
    mp, Sp = np.asarray(p[0], dtype=np.float64), np.asarray(p[1], dtype=np.float64)
    mq, Sq = np.asarray(q[0], dtype=np.float64), np.asarray(q[1], dtype=np.float64)
    if mp.shape != mq.shape or Sp.shape != Sq.shape or Sp.shape != (mp.size, mp.size):
        raise ShapeMismatch(f"gaussians differ in shape: {mp.shape}/{Sp.shape} "
                            f"vs {mq.shape}/{Sq.shape}")
    root_p = sqrtm_psd(Sp)
    cross = root_p @ Sq @ root_p
    cross = sqrtm_psd(0.5 * (cross + cross.T))
    diff = mp - mq
    cost = float(diff @ diff) + float(np.trace(Sp) + np.trace(Sq) - 2.0 * np.trace(cross))
    return max(cost, 0.0)


def pairwise_cost_matrix(a, b):
    """(K_a, K_b) matrix of :func:`pairwise_cost` between two mixtures' components."""
    return np.array([[pairwise_cost((a.means[k], a.covs[k]), (b.means[l], b.covs[l]))
                      for l in range(b.K)] for k in range(a.K)])


def build_cost_tensor(models):
    """Joint cost ``C(k_1..k_M) = sum_{i<j} C_ij(k_i, k_j)`` over M mixtures."""
    models = list(models)
    M = len(models)
    if M == 0:
        raise ValueError("need at least one model")
    K = models[0].K
    for m in models[1:]:
        if m.K != K:
            raise MismatchedK(f"models have different component counts: {[x.K for x in models]}")
        if m.dim != models[0].dim:
            raise ShapeMismatch(f"models have different feature dims: "
                                f"{[x.dim for x in models]}")
    if K ** M > MAX_TENSOR_ENTRIES:
        raise ValueError(f"cost tensor of {K}^{M} entries exceeds {MAX_TENSOR_ENTRIES}")
    C = np.zeros((K,) * M)
    for i, j in combinations(range(M), 2):
        shape = [1] * M
        shape[i] = shape[j] = K
        C = C + pairwise_cost_matrix(models[i], models[j]).reshape(shape)
    return np.maximum(C, 0.0)


def _check_marginals(nu, K, M):
    nu = [np.asarray(v, dtype=np.float64) for v in nu]
    if len(nu) != M:
        raise ShapeMismatch(f"{M}-way cost tensor but {len(nu)} marginals")
    for i, v in enumerate(nu):
        if v.shape != (K,):
            raise ShapeMismatch(f"marginal {i} has shape {v.shape}, expected ({K},)")
        if np.any(v < 0) or abs(v.sum() - 1.0) > 1e-10:
            raise ValueError(f"marginal {i} is not a probability vector (sum {v.sum():.12g})")
    return nu


def uniform_marginals(M, K):
    return [np.full(K, 1.0 / K) for _ in range(M)]


def _residual(logT, nu):
    T = np.exp(logT)
    M = T.ndim
    return max(float(np.max(np.abs(T.sum(axis=tuple(a for a in range(M) if a != i)) - nu[i])))
               for i in range(M))


def sinkhorn_mm(C, nu, lam=0.1, max_iters=500, tol=1e-6, normalize=True, raise_on_fail=True):
    """Entropic multi-marginal transport by cyclic log-domain scaling.

    Parameters
    ----------
    C : ndarray, shape (K,) * M
        Joint cost tensor.
    nu : sequence of M probability vectors of length K
    lam : float
        Entropy weight. With ``normalize`` the cost is divided by its max
        entry first, so ``lam`` is relative to that scale.
    max_iters : int
        Number of full sweeps over the M marginals.
    tol : float
        Stop once the largest marginal violation (inf-norm) drops below it.

    Returns
    -------
    TransportPlan
        Raises :class:`NoConvergence` carrying the plan when the sweep cap is
        hit, unless ``raise_on_fail`` is False.
    """
    C = np.asarray(C, dtype=np.float64)
    if lam <= 0:
        raise NonPositiveLambda(f"entropy weight must be positive, got {lam}")
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")
    M = C.ndim
    K = C.shape[0] if M else 1
    if any(s != K for s in C.shape):
        raise ShapeMismatch(f"cost tensor must be (K,)*M, got {C.shape}")
    nu = _check_marginals(nu, K, M)
    cmax = float(np.max(C)) if C.size else 0.0
    scale = cmax if normalize and cmax > 0 else 1.0
    kernel = -C / (scale * lam)
    with np.errstate(divide="ignore"):
        log_nu = [np.log(v) for v in nu]
    pots = [np.zeros(K) for _ in range(M)]

    def shaped(i):
        s = [1] * M
        s[i] = K
        return pots[i].reshape(s)

    def log_plan():
        out = kernel
        for i in range(M):
            out = out + shaped(i)
        return out

    residual = np.inf
    sweeps = 0
    for sweeps in range(1, max_iters + 1):
        for i in range(M):
            pots[i] = np.zeros(K)
            others = tuple(a for a in range(M) if a != i)
            lse = logsumexp(log_plan(), axis=others) if others else log_plan()
            with np.errstate(invalid="ignore"):
                pots[i] = np.where(np.isneginf(log_nu[i]), -np.inf, log_nu[i] - lse)
        residual = _residual(log_plan(), nu)
        if residual < tol:
            break
    plan = TransportPlan(values=np.exp(log_plan()), lam=float(lam), iterations=sweeps,
                         marginal_residual=residual, cost_scale=scale,
                         converged=residual < tol)
    if not plan.converged and raise_on_fail:
        raise NoConvergence(
            f"marginal residual {residual:.3e} >= {tol:g} after {sweeps} sweeps", plan)
    return plan


def ot_objective(T, C, lam=None):
    """Return ``(sum T*C, lam * sum T log T)`` with ``0 log 0 = 0``.

    ``lam`` defaults to the plan's effective entropy weight.
    """
    if isinstance(T, TransportPlan):
        lam = T.effective_lambda if lam is None else lam
        T = T.values
    T = np.asarray(T, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    if T.shape != C.shape:
        raise ShapeMismatch(f"plan shape {T.shape} != cost shape {C.shape}")
    lam = 1.0 if lam is None else float(lam)
    transport = float(np.sum(T * C))
    pos = T > 0
    entropy = lam * float(np.sum(T[pos] * np.log(T[pos])))
    return transport, entropy
