"""Heterogeneity alignment: global prototype transport plus sample-to-prototype calibration.

Mixture parameters and the transport plan enter as constants. Only the
calibration term sends gradient into the modality-unique features, unless
``differentiate_ot`` is requested (see :func:`l_ot`).
"""

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from . import autodiff as ad
from .exceptions import DimensionMismatch, MismatchedK, ShapeMismatch
from .gmm import e_step
from .mmot import pairwise_cost_matrix


@dataclass
class HeteroContext:
    models: list
    plan: object
    cost: np.ndarray

    def __post_init__(self):
        Ks = {m.K for m in self.models}
        dims = {m.dim for m in self.models}
        if len(Ks) != 1:
            raise MismatchedK(f"models have different component counts: {sorted(Ks)}")
        if len(dims) != 1:
            raise DimensionMismatch(f"models have different feature dims: {sorted(dims)}")
        K, M = Ks.pop(), len(self.models)
        plan_shape = np.shape(getattr(self.plan, "values", self.plan))
        if plan_shape != (K,) * M or np.shape(self.cost) != (K,) * M:
            raise ShapeMismatch(f"plan {plan_shape} / cost {np.shape(self.cost)} "
                                f"inconsistent with M={M}, K={K}")

    @property
    def plan_values(self):
        return np.asarray(getattr(self.plan, "values", self.plan), dtype=np.float64)


def ordered_pairs(M, pairing="all-pairs", target=0):
    if pairing == "all-pairs":
        return [(i, j) for i in range(M) for j in range(M) if i != j]
    if pairing == "fixed-target":
        return [(i, target) for i in range(M) if i != target]
    raise ValueError(f"unknown pairing {pairing!r}")


def _weighted_prototype_means(F, w):
    """Responsibility-weighted means of ``F`` with ``w`` held constant."""
    Nk = w.sum(axis=0)
    return ad.div(ad.matmul(ad.Tensor(w.T), F),
                  ad.Tensor(np.repeat(Nk[:, None], F.shape[1], axis=1)))


def l_ot(ctx, features=None, differentiate=False):
    """Transport cost ``sum_k T*(k) C(k)`` of the solved plan.

    By default a constant. With ``differentiate`` the mean-offset part of each
    pairwise cost is rebuilt from responsibility-weighted means of the live
    ``features`` (plan, responsibilities and covariance terms stay fixed), so
    the value is unchanged at the fitted means but gradients reach the
    features through the prototype locations.
    """
    T = ctx.plan_values
    value = float(np.sum(T * ctx.cost))
    if not differentiate:
        return ad.Tensor(value)
    if features is None:
        raise ValueError("differentiating the OT term needs the features")
    M, K = len(ctx.models), ctx.models[0].K
    means = [_weighted_prototype_means(features[i], e_step(features[i].data, ctx.models[i]))
             for i in range(M)]
    total = ad.Tensor(0.0)
    for i, j in combinations(range(M), 2):
        axes = tuple(a for a in range(M) if a not in (i, j))
        Tij = T.sum(axis=axes) if axes else T
        const = pairwise_cost_matrix(ctx.models[i], ctx.models[j])
        fixed_means = ctx.models[i].means[:, None, :] - ctx.models[j].means[None, :, :]
        const = const - np.sum(fixed_means ** 2, axis=-1)
        a = ad.broadcast_to(ad.reshape(means[i], (K, 1, -1)), (K, K, means[i].shape[1]))
        b = ad.broadcast_to(ad.reshape(means[j], (1, K, -1)), (K, K, means[j].shape[1]))
        d2 = ad.sum_((a - b) ** 2, axis=-1)
        total = total + ad.sum_(ad.mul(ad.Tensor(Tij), d2)) + float(np.sum(Tij * const))
    return total


def l_proto(features, ctx, pairing="all-pairs", target=0):
    """Mean responsibility-weighted squared distance from source samples to target prototypes.

    For each ordered pair (i, j) the responsibilities come from modality i's
    mixture evaluated at its own features and the prototype means from
    modality j; the pair losses are averaged.
    """
    M = len(ctx.models)
    if len(features) != M:
        raise DimensionMismatch(f"{len(features)} feature blocks for {M} models")
    pairs = ordered_pairs(M, pairing, target)
    if not pairs:
        return ad.Tensor(0.0)
    total = ad.Tensor(0.0)
    for i, j in pairs:
        F = ad.as_tensor(features[i])
        N, d = F.shape
        mu = ctx.models[j].means
        if mu.shape[1] != d:
            raise DimensionMismatch(f"features of dim {d} vs prototypes of dim {mu.shape[1]}")
        K = mu.shape[0]
        w = e_step(F.data, ctx.models[i])
        diff = (ad.broadcast_to(ad.reshape(F, (N, 1, d)), (N, K, d))
                - ad.Tensor(np.broadcast_to(mu[None], (N, K, d))))
        d2 = ad.sum_(diff ** 2, axis=-1)
        total = total + ad.scale(ad.sum_(ad.mul(ad.Tensor(w), d2)), 1.0 / N)
    return ad.scale(total, 1.0 / len(pairs))


def l_hete(features, ctx, pairing="all-pairs", target=0, differentiate_ot=False):
    """Return ``(total, {"ot": ..., "proto": ...})`` with ``total = ot + proto``."""
    ot = l_ot(ctx, features, differentiate=differentiate_ot)
    proto = l_proto(features, ctx, pairing, target)
    return ot + proto, {"ot": ot, "proto": proto}
