"""Total objective, the training loop, metrics, and the estimator front-end."""

import logging
import warnings
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .data import MultimodalDataset, make_rng
from .decouple import l_dec, mean_abs_cosine
from .exceptions import ConfigError, IncompatibleCheckpoint, NoConvergence, ShapeMismatch
from .gmm import fit as fit_gmm
from .hetero import HeteroContext, l_hete
from .homo import KernelConfig, l_mmd, l_sem, moments
from .mmot import build_cost_tensor, sinkhorn_mm, uniform_marginals
from .model import ModelConfig, forward, init_params, pde_outputs

logger = logging.getLogger(__name__)

LOSS_FIELDS = ("loss_task", "loss_dec", "loss_ot", "loss_proto", "loss_sem", "loss_mmd",
               "loss_total")
METRIC_FIELDS = ("mae", "acc2", "f1")
HISTORY_FIELDS = ("seed", "epoch") + LOSS_FIELDS + METRIC_FIELDS


@dataclass
class AblationMask:
    mfd: bool = True
    hete: bool = True
    homo: bool = True
    proto_ot: bool = True
    sem: bool = True
    mmd: bool = True
    ct: bool = False

    def __post_init__(self):
        if self.ct:
            raise ConfigError("the contrastive-training ablation slot is reserved and has "
                              "no implementation; leave 'ct' false")

    @property
    def hete_active(self):
        return self.hete and self.proto_ot

    @property
    def sem_active(self):
        return self.homo and self.sem

    @property
    def mmd_active(self):
        return self.homo and self.mmd


# Left half of the component ablation table: (mfd, hete, homo).
ABLATION_MASKS = {
    "no_homo": AblationMask(mfd=True, hete=True, homo=False),
    "no_hete": AblationMask(mfd=True, hete=False, homo=True),
    "no_hete_homo": AblationMask(mfd=True, hete=False, homo=False),
    "no_mfd_hete_homo": AblationMask(mfd=False, hete=False, homo=False),
}


@dataclass
class TrainConfig:
    alpha: float = 0.05
    beta: float = 0.05
    lam: float = 0.1
    K: int = None
    M: int = None
    d_s: int = 16
    T_s: int = 8
    hidden: int = 32
    kernel_width: int = 3
    heads: int = 2
    seeds: list = field(default_factory=lambda: [1, 2, 3, 4, 5])
    epochs: int = 50
    batch_size: int = 32
    lr: float = 0.02
    momentum: float = 0.9
    task: str = "regression"
    ablation: AblationMask = field(default_factory=AblationMask)
    gmm_refit_every: int = 1
    gmm_max_iters: int = 100
    gmm_tol: float = 1e-6
    hetero_pairing: str = "all-pairs"
    hetero_differentiate_ot: bool = False
    ot_marginals: str = "pi"
    ot_max_iters: int = 500
    ot_tol: float = 1e-6
    homo_estimator: str = "biased"
    homo_bandwidth: object = "median"
    homo_mmd_on_raw: bool = False
    decouple_mode: str = "squared"
    decouple_granularity: str = "rowwise"

    def __post_init__(self):
        if isinstance(self.ablation, dict):
            self.ablation = AblationMask(**self.ablation)
        self.seeds = [int(s) for s in self.seeds]
        self.validate()

    def validate(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError(f"alpha and beta must be non-negative, got {self.alpha}, {self.beta}")
        if self.lam <= 0:
            raise ConfigError(f"lam must be positive, got {self.lam}")
        if self.task not in ("regression", "classification"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.hetero_pairing not in ("all-pairs", "fixed-target"):
            raise ConfigError(f"unknown hetero pairing {self.hetero_pairing!r}")
        if self.ot_marginals not in ("pi", "uniform"):
            raise ConfigError(f"unknown OT marginals {self.ot_marginals!r}")
        if self.batch_size < 2 or self.epochs < 1 or self.gmm_refit_every < 1:
            raise ConfigError("batch_size >= 2, epochs >= 1 and gmm_refit_every >= 1 required")
        KernelConfig(self.homo_bandwidth, self.homo_estimator)

    def model_config(self, modality_dims, n_classes):
        if self.K is not None and self.K != n_classes:
            raise ConfigError(f"config K={self.K} but data has {n_classes} classes")
        if self.M is not None and self.M != len(modality_dims):
            raise ConfigError(f"config M={self.M} but data has {len(modality_dims)} modalities")
        return ModelConfig(modality_dims=[list(md) for md in modality_dims],
                           n_classes=n_classes, d_s=self.d_s, T_s=self.T_s,
                           hidden=self.hidden, kernel_width=self.kernel_width,
                           heads=self.heads, decoupled=self.ablation.mfd)

    def to_dict(self):
        return asdict(self)


@dataclass
class LossReport:
    loss_task: float = 0.0
    loss_dec: float = 0.0
    loss_ot: float = 0.0
    loss_proto: float = 0.0
    loss_sem: float = 0.0
    loss_mmd: float = 0.0
    loss_total: float = 0.0
    epoch: int = 0
    step: int = 0

    def expected_total(self, alpha, beta):
        return (self.loss_task + self.loss_dec + alpha * (self.loss_ot + self.loss_proto)
                + beta * (self.loss_sem + self.loss_mmd))

    def additivity_error(self, alpha, beta):
        return abs(self.loss_total - self.expected_total(alpha, beta))


# -- losses and metrics -------------------------------------------------------
def l_task(pred, target, task="regression"):
    """MSE for regression; softmax cross-entropy (integer targets) for classification."""
    pred = ad.as_tensor(pred)
    target = np.asarray(target)
    if task == "regression":
        if pred.shape != target.shape:
            raise ShapeMismatch(f"predictions {pred.shape} vs targets {target.shape}")
        return ad.mean((pred - ad.Tensor(target)) ** 2)
    if task == "classification":
        N = pred.shape[0]
        if pred.ndim != 2 or target.shape != (N,):
            raise ShapeMismatch(f"logits {pred.shape} vs labels {target.shape}")
        onehot = np.zeros(pred.shape)
        onehot[np.arange(N), target.astype(int)] = 1.0
        return ad.scale(ad.sum_(ad.mul(ad.log_softmax(pred, axis=1), ad.Tensor(onehot))), -1.0 / N)
    raise ValueError(f"unknown task {task!r}")


def binary_metrics(pred, target):
    """MAE, Acc-2 and binary F1 with "non-negative" as the positive class."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    p, t = pred >= 0, target >= 0
    tp = int(np.sum(p & t))
    fp = int(np.sum(p & ~t))
    fn = int(np.sum(~p & t))
    denom = 2 * tp + fp + fn
    return {
        "mae": float(np.mean(np.abs(pred - target))),
        "acc2": float(np.mean(p == t)),
        "f1": 2.0 * tp / denom if denom else 1.0,
    }


def _regression_output(out, task, class_scores):
    if task == "regression":
        return out.regression.data
    logits = out.logits.data
    z = np.exp(logits - logits.max(axis=1, keepdims=True))
    return (z / z.sum(axis=1, keepdims=True)) @ np.asarray(class_scores)


def _predicted_classes(out, task, class_scores):
    if task == "classification":
        return np.argmax(out.logits.data, axis=1)
    scores = np.asarray(class_scores)
    return np.argmin(np.abs(out.regression.data[:, None] - scores[None, :]), axis=1)


def modality_gap(common):
    """Per-pair and overall mean paired distance between modalities' common features."""
    common = [np.asarray(getattr(c, "data", c)) for c in common]
    pairs = {}
    for i in range(len(common)):
        for j in range(i + 1, len(common)):
            pairs[f"{i}-{j}"] = float(np.mean(np.linalg.norm(common[i] - common[j], axis=1)))
    mean_gap = float(np.mean(list(pairs.values()))) if pairs else 0.0
    return {"pairs": pairs, "mean": mean_gap}


def evaluate(params, model_cfg, dataset, task="regression", class_scores=None):
    """Metrics plus modality-gap statistics of a trained network on ``dataset``."""
    if len(dataset.X) != model_cfg.M:
        raise IncompatibleCheckpoint(
            f"checkpoint expects {model_cfg.M} modalities, data has {len(dataset.X)}")
    for m, x in enumerate(dataset.X):
        if x.shape[2] != model_cfg.modality_dims[m][1]:
            raise IncompatibleCheckpoint(
                f"modality {m}: checkpoint expects dim {model_cfg.modality_dims[m][1]}, "
                f"data has {x.shape[2]}")
    if class_scores is None:
        class_scores = np.arange(model_cfg.n_classes) - model_cfg.n_classes // 2 + 0.5
    with ad.no_grad():
        out = forward(dataset.X, params, model_cfg)
    pred = _regression_output(out, task, class_scores)
    result = binary_metrics(pred, dataset.y)
    classes = _predicted_classes(out, task, class_scores)
    result["per_class_accuracy"] = [
        float(np.mean(classes[dataset.labels == c] == c)) if np.any(dataset.labels == c)
        else float("nan") for c in range(model_cfg.n_classes)]
    result["mean_abs_cos_uni_com"] = mean_abs_cosine(out.feats)
    result["modality_gap"] = {
        "stats": [moments(c).to_dict() for c in out.feats.com],
        "distance": modality_gap(out.feats.com),
    }
    return result


# -- training -----------------------------------------------------------------
@dataclass
class TrainResult:
    params: object
    model_config: ModelConfig
    history: list
    steps: list
    warnings: list
    seed: int


def _hetero_context(cfg, params, model_cfg, train, seed, epoch):
    with ad.no_grad():
        feats = forward(train.X, params, model_cfg).feats
    models = [fit_gmm(u.data, model_cfg.n_classes, seed=seed, max_iters=cfg.gmm_max_iters,
                      tol=cfg.gmm_tol) for u in feats.uni]
    cost = build_cost_tensor(models)
    nu = ([m.pi / m.pi.sum() for m in models] if cfg.ot_marginals == "pi"
          else uniform_marginals(len(models), model_cfg.n_classes))
    warn = None
    try:
        plan = sinkhorn_mm(cost, nu, lam=cfg.lam, max_iters=cfg.ot_max_iters, tol=cfg.ot_tol)
    except NoConvergence as exc:
        plan = exc.payload
        warn = {"epoch": epoch, "kind": "NoConvergence", "message": str(exc)}
        logger.warning("epoch %d: %s", epoch, exc)
    return HeteroContext(models, plan, cost), warn


def compute_losses(out, params, cfg, target, ctx=None):
    """Weighted total objective and the unweighted parts (ablated parts are exact zeros)."""
    mask = cfg.ablation
    pred = out.regression if cfg.task == "regression" else out.logits
    parts = {"task": l_task(pred, target, cfg.task)}
    zero = ad.Tensor(0.0)
    parts["dec"] = (l_dec(out.feats, cfg.decouple_mode, cfg.decouple_granularity)
                    if mask.mfd else zero)
    if mask.hete_active and ctx is not None:
        _, hp = l_hete(out.feats.uni, ctx, cfg.hetero_pairing,
                       differentiate_ot=cfg.hetero_differentiate_ot)
        parts["ot"], parts["proto"] = hp["ot"], hp["proto"]
    else:
        parts["ot"] = parts["proto"] = zero
    parts["sem"] = l_sem([moments(c) for c in out.feats.com]) if mask.sem_active else zero
    if mask.mmd_active:
        blocks = out.feats.com if cfg.homo_mmd_on_raw else pde_outputs(out.feats, params)
        parts["mmd"] = l_mmd(blocks, KernelConfig(cfg.homo_bandwidth, cfg.homo_estimator))
    else:
        parts["mmd"] = zero
    total = (parts["task"] + parts["dec"]
             + ad.scale(parts["ot"] + parts["proto"], cfg.alpha)
             + ad.scale(parts["sem"] + parts["mmd"], cfg.beta))
    return total, parts


def _report(total, parts, epoch, step):
    return LossReport(loss_task=parts["task"].item(), loss_dec=parts["dec"].item(),
                      loss_ot=parts["ot"].item(), loss_proto=parts["proto"].item(),
                      loss_sem=parts["sem"].item(), loss_mmd=parts["mmd"].item(),
                      loss_total=total.item(), epoch=epoch, step=step)


def train_run(cfg, train, test, seed, class_scores=None, n_classes=None):
    """One seeded optimization run; returns parameters and per-epoch history."""
    n_classes = int(n_classes or (np.max(train.labels) + 1))
    model_cfg = cfg.model_config([x.shape[1:] for x in train.X], n_classes)
    params = init_params(model_cfg, seed)
    velocity = {k: np.zeros_like(v.data) for k, v in params.items()}
    rng = make_rng(seed, 7)
    target = train.y if cfg.task == "regression" else train.labels
    N = len(train)
    history, steps, warns = [], [], []
    ctx = None
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        if cfg.ablation.hete_active and (epoch - 1) % cfg.gmm_refit_every == 0:
            ctx, warn = _hetero_context(cfg, params, model_cfg, train, seed, epoch)
            if warn:
                warns.append(warn)
        perm = rng.permutation(N)
        epoch_reports = []
        for start in range(0, N, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            if idx.size < 2:
                continue
            out = forward([x[idx] for x in train.X], params, model_cfg)
            total, parts = compute_losses(out, params, cfg, target[idx], ctx)
            params.zero_grad()
            ad.backward(total)
            for name, p in params.items():
                if p.grad is None:
                    continue
                velocity[name] = cfg.momentum * velocity[name] + p.grad
                p.data = p.data - cfg.lr * velocity[name]
            step += 1
            rep = _report(total, parts, epoch, step)
            epoch_reports.append(rep)
            steps.append(rep)
        metrics = evaluate(params, model_cfg, test, cfg.task, class_scores)
        row = {"seed": seed, "epoch": epoch}
        for f in LOSS_FIELDS:
            row[f] = float(np.mean([getattr(r, f) for r in epoch_reports]))
        row.update({k: metrics[k] for k in METRIC_FIELDS})
        row["mean_abs_cos_uni_com"] = metrics["mean_abs_cos_uni_com"]
        history.append(row)
    params.zero_grad()
    return TrainResult(params, model_cfg, history, steps, warns, seed)


# -- estimator ----------------------------------------------------------------
def _check_modalities(X):
    if isinstance(X, np.ndarray) and X.ndim == 3:
        X = [X]
    X = [np.asarray(x, dtype=np.float64) for x in X]
    if not X:
        raise ValueError("need at least one modality")
    N = X[0].shape[0]
    for m, x in enumerate(X):
        if x.ndim != 3:
            raise ValueError(f"modality {m} must be (N, T, d), got shape {x.shape}")
        if x.shape[0] != N:
            raise ValueError(f"modality {m} has {x.shape[0]} samples, expected {N}")
        if not np.all(np.isfinite(x)):
            raise ValueError(f"modality {m} contains non-finite values")
    return X


class DecAlignRegressor(RegressorMixin, BaseEstimator):
    """Decoupled, hierarchically aligned multimodal network.

    ``X`` is a list with one ``(N, T_m, d_m)`` array per modality. ``fit``
    takes continuous targets ``y`` and integer class labels ``labels``; the
    label count fixes the number of prototypes per modality.
    """

    def __init__(self, alpha=0.05, beta=0.05, lam=0.1, d_s=16, T_s=8, hidden=32,
                 kernel_width=3, heads=2, epochs=50, batch_size=32, lr=0.02,
                 momentum=0.9, task="regression", ablation=None, gmm_refit_every=1,
                 hetero_pairing="all-pairs", hetero_differentiate_ot=False,
                 homo_estimator="biased", homo_bandwidth="median",
                 decouple_mode="squared", random_state=1):
        self.alpha = alpha
        self.beta = beta
        self.lam = lam
        self.d_s = d_s
        self.T_s = T_s
        self.hidden = hidden
        self.kernel_width = kernel_width
        self.heads = heads
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.task = task
        self.ablation = ablation
        self.gmm_refit_every = gmm_refit_every
        self.hetero_pairing = hetero_pairing
        self.hetero_differentiate_ot = hetero_differentiate_ot
        self.homo_estimator = homo_estimator
        self.homo_bandwidth = homo_bandwidth
        self.decouple_mode = decouple_mode
        self.random_state = random_state

    def _train_config(self):
        names = {f.name for f in fields(TrainConfig)}
        kw = {k: v for k, v in self.get_params().items() if k in names}
        mask = self.ablation
        kw["ablation"] = (AblationMask() if mask is None
                          else AblationMask(**mask) if isinstance(mask, dict) else mask)
        kw["seeds"] = [self.random_state]
        return TrainConfig(**kw)

    def fit(self, X, y, labels=None):
        X = _check_modalities(X)
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        if y.shape[0] != X[0].shape[0]:
            raise ValueError(f"{y.shape[0]} targets for {X[0].shape[0]} samples")
        if labels is None:
            if self.task != "classification":
                raise ValueError("regression fitting needs class labels for the prototypes")
            labels = y
        labels = np.asarray(labels).astype(np.int64).reshape(-1)
        cfg = self._train_config()
        data = MultimodalDataset(X, y, labels)
        n_classes = int(labels.max()) + 1
        scores = np.array([y[labels == c].mean() if np.any(labels == c) else 0.0
                           for c in range(n_classes)])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            result = train_run(cfg, data, data, self.random_state, scores, n_classes)
        self.params_ = result.params
        self.model_config_ = result.model_config
        self.history_ = result.history
        self.loss_reports_ = result.steps
        self.class_scores_ = scores
        self.n_modalities_ = len(X)
        return self

    def _forward(self, X):
        check_is_fitted(self, "params_")
        X = _check_modalities(X)
        if len(X) != self.n_modalities_:
            raise ValueError(f"fitted on {self.n_modalities_} modalities, got {len(X)}")
        with ad.no_grad():
            return forward(X, self.params_, self.model_config_)

    def predict(self, X):
        return _regression_output(self._forward(X), self.task, self.class_scores_)

    def predict_class(self, X):
        return _predicted_classes(self._forward(X), self.task, self.class_scores_)

    def transform(self, X):
        """Fused representation (N, 2 M d_s) fed to the prediction head."""
        return self._forward(X).fused.data
