"""Cosine-overlap penalty between modality-unique and modality-common features."""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .exceptions import ShapeMismatch

logger = logging.getLogger(__name__)

ZERO_NORM = 1e-12
MODES = ("squared", "paper-literal")
GRANULARITIES = ("rowwise", "global")


@dataclass
class DecoupledFeatures:
    """Pooled per-modality features; ``uni_tokens`` keeps the (N, T, d) unique sequences."""

    uni: list
    com: list
    uni_tokens: list = field(default=None)

    def __post_init__(self):
        if len(self.uni) != len(self.com):
            raise ShapeMismatch(f"{len(self.uni)} unique vs {len(self.com)} common blocks")
        for m, (u, c) in enumerate(zip(self.uni, self.com)):
            if u.shape != c.shape:
                raise ShapeMismatch(f"modality {m}: unique {u.shape} vs common {c.shape}")

    @property
    def M(self):
        return len(self.uni)


def _cosine_rows(u, c):
    dot = ad.sum_(ad.mul(u, c), axis=1)
    norms = ad.mul(ad.l2_norm(u, axis=1), ad.l2_norm(c, axis=1))
    ok = norms.data >= ZERO_NORM
    if not ok.all():
        logger.warning("%d zero-norm rows contribute 0 to the decoupling loss",
                       int((~ok).sum()))
    safe = ad.add(norms, ad.Tensor(np.where(ok, 0.0, 1.0)))
    return ad.mul(ad.div(dot, safe), ad.Tensor(ok.astype(np.float64)))


def l_dec(feats, mode="squared", granularity="rowwise"):
    """Sum over modalities of the mean (squared) cosine between paired features.

    ``granularity="global"`` flattens each block to a single vector first.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if granularity not in GRANULARITIES:
        raise ValueError(f"unknown granularity {granularity!r}")
    total = ad.Tensor(0.0)
    for u, c in zip(feats.uni, feats.com):
        u, c = ad.as_tensor(u), ad.as_tensor(c)
        if granularity == "global":
            u, c = ad.reshape(u, (1, -1)), ad.reshape(c, (1, -1))
        cos = _cosine_rows(u, c)
        if mode == "squared":
            cos = ad.mul(cos, cos)
        total = total + ad.mean(cos)
    return total


def mean_abs_cosine(feats):
    """Diagnostic: mean |cos(F_uni, F_com)| over all rows and modalities."""
    vals = []
    for u, c in zip(feats.uni, feats.com):
        u, c = np.asarray(getattr(u, "data", u)), np.asarray(getattr(c, "data", c))
        nu = np.linalg.norm(u, axis=1) * np.linalg.norm(c, axis=1)
        ok = nu >= ZERO_NORM
        cos = np.zeros(len(u))
        cos[ok] = np.sum(u * c, axis=1)[ok] / nu[ok]
        vals.append(np.abs(cos))
    return float(np.mean(np.concatenate(vals)))
