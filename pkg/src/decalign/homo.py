"""Homogeneity alignment on modality-common features.

Moment matching (mean, covariance, per-dimension skewness) and a
Gaussian-kernel maximum mean discrepancy, both averaged over modality pairs.
"""

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from . import autodiff as ad
from .exceptions import MismatchedDims, NonPositiveBandwidth, ShapeMismatch, TooFewSamples

SKEW_EPS = 1e-6


@dataclass
class MomentStats:
    mean: ad.Tensor
    cov: ad.Tensor
    skew: ad.Tensor
    eps: float = SKEW_EPS

    def to_dict(self):
        return {"mean": self.mean.data.tolist(), "cov": self.cov.data.tolist(),
                "skew": self.skew.data.tolist(), "eps": self.eps}


@dataclass
class KernelConfig:
    """``bandwidth`` is a positive float or ``"median"``."""

    bandwidth: object = "median"
    estimator: str = "biased"

    def __post_init__(self):
        if self.bandwidth != "median" and not float(self.bandwidth) > 0:
            raise NonPositiveBandwidth(f"bandwidth must be positive, got {self.bandwidth}")
        if self.estimator not in ("biased", "unbiased"):
            raise ValueError(f"unknown estimator {self.estimator!r}")


def moments(F, eps=SKEW_EPS):
    """Population mean, covariance and standardized third moment of the rows of ``F``."""
    F = ad.as_tensor(F)
    if F.ndim != 2:
        raise ShapeMismatch(f"features must be (N, d), got {F.shape}")
    N, d = F.shape
    if N < 2:
        raise TooFewSamples(f"moments need N >= 2, got {N}")
    mu = ad.mean(F, axis=0)
    centered = F - ad.broadcast_to(ad.reshape(mu, (1, d)), (N, d))
    cov = ad.scale(ad.matmul(ad.transpose(centered), centered), 1.0 / N)
    idx = np.arange(d)
    std = ad.sqrt(ad.slice_(cov, (idx, idx)))
    denom = ad.broadcast_to(ad.reshape(std + eps, (1, d)), (N, d))
    skew = ad.mean((centered / denom) ** 3, axis=0)
    return MomentStats(mu, cov, skew, eps)


def l_sem(stats):
    """Pairwise moment discrepancy normalized by ``M (M - 1)``."""
    M = len(stats)
    if M < 2:
        raise ValueError(f"need at least two modalities, got {M}")
    d = stats[0].mean.shape
    for s in stats[1:]:
        if s.mean.shape != d or s.cov.shape != stats[0].cov.shape:
            raise MismatchedDims(f"moment dims differ: {s.mean.shape} vs {d}")
    total = ad.Tensor(0.0)
    for i, j in combinations(range(M), 2):
        a, b = stats[i], stats[j]
        total = (total + ad.sum_((a.mean - b.mean) ** 2) + ad.sum_((a.cov - b.cov) ** 2)
                 + ad.sum_((a.skew - b.skew) ** 2))
    return ad.scale(total, 1.0 / (M * (M - 1)))


def gaussian_kernel(x, y, sigma):
    if not sigma > 0:
        raise NonPositiveBandwidth(f"bandwidth must be positive, got {sigma}")
    diff = np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    return float(np.exp(-np.dot(diff, diff) / (2.0 * sigma * sigma)))


def pairwise_sqdist(X, Y):
    """(n, m) squared Euclidean distances between rows, via explicit differences."""
    X, Y = ad.as_tensor(X), ad.as_tensor(Y)
    (n, d), (m, d2) = X.shape, Y.shape
    if d != d2:
        raise MismatchedDims(f"feature dims differ: {d} vs {d2}")
    diff = (ad.broadcast_to(ad.reshape(X, (n, 1, d)), (n, m, d))
            - ad.broadcast_to(ad.reshape(Y, (1, m, d)), (n, m, d)))
    return ad.sum_(diff ** 2, axis=-1)


def median_bandwidth(X, Y):
    """Median pairwise distance over the pooled samples, divided by sqrt(2).

    Falls back to 1.0 when every pooled sample coincides.
    """
    Z = np.concatenate([np.asarray(X, dtype=np.float64), np.asarray(Y, dtype=np.float64)])
    diff = Z[:, None, :] - Z[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    iu = np.triu_indices(len(Z), k=1)
    med = float(np.median(dist[iu])) if iu[0].size else 0.0
    return med / np.sqrt(2.0) if med > 0 else 1.0


def _kernel_mean(D, sigma, exclude_diagonal):
    Kmat = ad.exp(ad.scale(D, -1.0 / (2.0 * sigma * sigma)))
    n, m = D.shape
    if not exclude_diagonal:
        return ad.mean(Kmat)
    mask = 1.0 - np.eye(n, m)
    return ad.scale(ad.sum_(ad.mul(Kmat, ad.Tensor(mask))), 1.0 / (n * (n - 1)))


def mmd_pair(X, Y, sigma, estimator="biased"):
    """Squared MMD between two sample sets under the Gaussian kernel."""
    unbiased = estimator == "unbiased"
    kxx = _kernel_mean(pairwise_sqdist(X, X), sigma, unbiased)
    kyy = _kernel_mean(pairwise_sqdist(Y, Y), sigma, unbiased)
    kxy = _kernel_mean(pairwise_sqdist(X, Y), sigma, False)
    return kxx + kyy - ad.scale(kxy, 2.0)


def l_mmd(features, cfg=None):
    """Pair-averaged squared MMD, scaled by ``2 / (M (M - 1))``.

    With the median heuristic the bandwidth is computed per pair from the
    current values and treated as a constant during differentiation.
    """
    cfg = KernelConfig() if cfg is None else cfg
    feats = [ad.as_tensor(f) for f in features]
    M = len(feats)
    if M < 2:
        raise ValueError(f"need at least two modalities, got {M}")
    for f in feats:
        if f.ndim != 2 or f.shape[0] < 2:
            raise TooFewSamples(f"each modality needs (N >= 2, d) samples, got {f.shape}")
        if f.shape[1] != feats[0].shape[1]:
            raise MismatchedDims(f"feature dims differ: {f.shape[1]} vs {feats[0].shape[1]}")
    total = ad.Tensor(0.0)
    for i, j in combinations(range(M), 2):
        if cfg.bandwidth == "median":
            sigma = median_bandwidth(feats[i].data, feats[j].data)
        else:
            sigma = float(cfg.bandwidth)
        total = total + mmd_pair(feats[i], feats[j], sigma, cfg.estimator)
    return ad.scale(total, 2.0 / (M * (M - 1)))


def pde_project(F, weight, bias):
    """Rowwise ``tanh(F W + b)``: the learned distribution encoder ahead of MMD."""
    F, weight, bias = ad.as_tensor(F), ad.as_tensor(weight), ad.as_tensor(bias)
    if F.ndim != 2 or weight.shape != (F.shape[1], bias.shape[0]) or bias.ndim != 1:
        raise ShapeMismatch(f"pde_project: F {F.shape}, W {weight.shape}, b {bias.shape}")
    N = F.shape[0]
    return ad.tanh(ad.matmul(F, weight)
                   + ad.broadcast_to(ad.reshape(bias, (1, -1)), (N, bias.shape[0])))
