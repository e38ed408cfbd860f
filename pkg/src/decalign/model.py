"""The trainable network.

Per-modality temporal convolution to a shared (T_s, d_s) grid, modality-unique
encoders plus one shared common encoder, a single cross-modal attention layer
over the unique token sequences, and a linear head producing a regression
output and class logits.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .decouple import DecoupledFeatures
from .exceptions import IncompatibleCheckpoint, SequenceTooShort, ShapeMismatch
from .homo import pde_project

CHECKPOINT_FORMAT = "decalign-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    modality_dims: list
    n_classes: int = 3
    d_s: int = 16
    T_s: int = 8
    hidden: int = 32
    kernel_width: int = 3
    heads: int = 2
    decoupled: bool = True

    def __post_init__(self):
        self.modality_dims = [tuple(int(v) for v in md) for md in self.modality_dims]
        if self.kernel_width % 2 != 1:
            raise ValueError(f"kernel_width must be odd, got {self.kernel_width}")
        if self.d_s % self.heads:
            raise ValueError(f"d_s={self.d_s} is not divisible by heads={self.heads}")

    @property
    def M(self):
        return len(self.modality_dims)

    @property
    def fused_dim(self):
        return 2 * self.M * self.d_s

    def to_dict(self):
        d = asdict(self)
        d["modality_dims"] = [list(md) for md in self.modality_dims]
        return d


@dataclass
class ModelParams:
    tensors: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def items(self):
        return self.tensors.items()

    def values(self):
        return self.tensors.values()

    @property
    def n_parameters(self):
        return int(sum(t.size for t in self.tensors.values()))

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def copy(self):
        return ModelParams({k: ad.Tensor(v.data.copy(), requires_grad=v.requires_grad)
                            for k, v in self.tensors.items()})


class ForwardOutput(NamedTuple):
    batch: list
    feats: DecoupledFeatures
    fused: ad.Tensor
    regression: ad.Tensor
    logits: ad.Tensor
    attention: dict


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg, seed=0):
    """Seeded uniform(+-1/sqrt(fan_in)) initialization; the PDE starts at identity."""
    rng = np.random.Generator(np.random.Philox(seed))
    p = {}
    d, h, w = cfg.d_s, cfg.hidden, cfg.kernel_width
    for m, (_, d_m) in enumerate(cfg.modality_dims):
        p[f"conv.{m}"] = _uniform(rng, (w, d_m, d), w * d_m)
    encoders = [f"uni.{m}" for m in range(cfg.M)] + ["com"]
    for name in encoders:
        p[f"{name}.W1"] = _uniform(rng, (d, h), d)
        p[f"{name}.b1"] = _uniform(rng, (h,), d)
        p[f"{name}.W2"] = _uniform(rng, (h, d), h)
        p[f"{name}.b2"] = _uniform(rng, (d,), h)
    for i in range(cfg.M):
        for j in range(cfg.M):
            if i != j:
                for part in ("q", "k", "v"):
                    p[f"attn.{i}.{j}.W{part}"] = _uniform(rng, (d, d), d)
    p["pde.W"] = np.eye(d)
    p["pde.b"] = np.zeros(d)
    out = 1 + cfg.n_classes
    p["head.W"] = _uniform(rng, (cfg.fused_dim, out), cfg.fused_dim)
    p["head.b"] = _uniform(rng, (out,), cfg.fused_dim)
    return ModelParams({k: ad.Tensor(v, requires_grad=True) for k, v in p.items()})


def resample_matrix(T_in, T_out):
    """(T_out, T_in) linear-interpolation operator along time."""
    R = np.zeros((T_out, T_in))
    if T_out == 1:
        R[0] = 1.0 / T_in
        return R
    pos = np.linspace(0.0, T_in - 1.0, T_out)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, T_in - 1)
    frac = pos - lo
    R[np.arange(T_out), lo] += 1.0 - frac
    R[np.arange(T_out), hi] += frac
    return R


def _bias(b, lead):
    n = b.shape[0]
    return ad.broadcast_to(ad.reshape(b, (1,) * len(lead) + (n,)), tuple(lead) + (n,))


def temporal_project(raw, params, cfg):
    """Convolve every modality to d_s channels and resample it to T_s steps."""
    if len(raw) != cfg.M:
        raise ShapeMismatch(f"expected {cfg.M} modalities, got {len(raw)}")
    out = []
    N = None
    for m, x in enumerate(raw):
        x = ad.as_tensor(x)
        T_m, d_m = cfg.modality_dims[m]
        if x.ndim != 3 or x.shape[2] != d_m:
            raise ShapeMismatch(f"modality {m}: expected (N, T, {d_m}), got {x.shape}")
        if N is not None and x.shape[0] != N:
            raise ShapeMismatch(f"modality {m} has {x.shape[0]} samples, expected {N}")
        N = x.shape[0]
        if x.shape[1] < cfg.kernel_width:
            raise SequenceTooShort(
                f"modality {m}: length {x.shape[1]} < kernel width {cfg.kernel_width}")
        h = ad.conv1d(x, params[f"conv.{m}"])
        T = x.shape[1]
        if T != cfg.T_s:
            R = ad.Tensor(resample_matrix(T, cfg.T_s).T)
            h = ad.transpose(ad.matmul(ad.transpose(h, (0, 2, 1)), R), (0, 2, 1))
        out.append(h)
    return out


def _mlp(x, params, name):
    lead = x.shape[:-1]
    h = ad.tanh(ad.matmul(x, params[f"{name}.W1"]) + _bias(params[f"{name}.b1"], lead))
    return ad.matmul(h, params[f"{name}.W2"]) + _bias(params[f"{name}.b2"], lead)


def encode(batch, params, cfg):
    """Unique and common encoders applied per timestep, then mean-pooled over time."""
    uni, com, tokens = [], [], []
    for m, x in enumerate(batch):
        if x.ndim != 3 or x.shape[2] != cfg.d_s:
            raise ShapeMismatch(f"modality {m}: expected (N, T_s, {cfg.d_s}), got {x.shape}")
        c_tok = _mlp(x, params, "com")
        u_tok = _mlp(x, params, f"uni.{m}") if cfg.decoupled else c_tok
        tokens.append(u_tok)
        uni.append(ad.mean(u_tok, axis=1))
        com.append(ad.mean(c_tok, axis=1))
    return DecoupledFeatures(uni=uni, com=com, uni_tokens=tokens)


def _split_heads(x, heads):
    N, T, d = x.shape
    return ad.transpose(ad.reshape(x, (N, T, heads, d // heads)), (0, 2, 1, 3))


def cross_attention(query_tokens, context_tokens, Wq, Wk, Wv, heads):
    """Multi-head attention of one modality's tokens over another's.

    Returns the (N, T, d) attended values and the (N, heads, T, T_ctx)
    attention weights.
    """
    N, T, d = query_tokens.shape
    dh = d // heads
    q = _split_heads(ad.matmul(query_tokens, Wq), heads)
    k = _split_heads(ad.matmul(context_tokens, Wk), heads)
    v = _split_heads(ad.matmul(context_tokens, Wv), heads)
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    weights = ad.softmax(scores, axis=-1)
    attended = ad.matmul(weights, v)
    return ad.reshape(ad.transpose(attended, (0, 2, 1, 3)), (N, T, d)), weights


def fuse(feats, params, cfg):
    """Refine unique tokens with residual cross-attention, pool, and concatenate with common features."""
    tokens = feats.uni_tokens
    if tokens is None:
        tokens = [ad.reshape(u, (u.shape[0], 1, u.shape[1])) for u in feats.uni]
    refined, attention = [], {}
    for i in range(feats.M):
        acc = tokens[i]
        for j in range(feats.M):
            if j == i:
                continue
            out, wts = cross_attention(tokens[i], tokens[j], params[f"attn.{i}.{j}.Wq"],
                                       params[f"attn.{i}.{j}.Wk"], params[f"attn.{i}.{j}.Wv"],
                                       cfg.heads)
            acc = acc + out
            attention[(i, j)] = wts.data
        refined.append(ad.mean(acc, axis=1))
    return ad.concat(refined + list(feats.com), axis=1), attention


def predict(fused, params):
    """Linear head: column 0 is the regression output, the rest are class logits."""
    W, b = params["head.W"], params["head.b"]
    if fused.ndim != 2 or fused.shape[1] != W.shape[0]:
        raise ShapeMismatch(f"fused features {fused.shape} do not match head {W.shape}")
    out = ad.matmul(fused, W) + _bias(b, (fused.shape[0],))
    return ad.reshape(out[:, 0:1], (fused.shape[0],)), out[:, 1:]


def forward(raw, params, cfg):
    batch = temporal_project(raw, params, cfg)
    feats = encode(batch, params, cfg)
    fused, attention = fuse(feats, params, cfg)
    reg, logits = predict(fused, params)
    return ForwardOutput(batch, feats, fused, reg, logits, attention)


def pde_outputs(feats, params):
    return [pde_project(c, params["pde.W"], params["pde.b"]) for c in feats.com]


# -- checkpoints --------------------------------------------------------------
def config_hash(doc):
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def save_checkpoint(path, params, cfg, extra=None, config_digest=None):
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config_hash": config_digest or config_hash(cfg.to_dict()),
        "model": cfg.to_dict(),
        "extra": extra or {},
        "params": {k: {"shape": list(v.shape), "values": v.data.reshape(-1).tolist()}
                   for k, v in params.items()},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)
    return doc


def load_checkpoint(path):
    """Return ``(params, model_config, extra, config_hash)``."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise IncompatibleCheckpoint(
            f"{path}: unsupported checkpoint {doc.get('format')!r} v{doc.get('version')}")
    cfg = ModelConfig(**doc["model"])
    params = ModelParams({k: ad.Tensor(np.asarray(v["values"], dtype=np.float64)
                                       .reshape(v["shape"]), requires_grad=True)
                          for k, v in doc["params"].items()})
    expected = init_params(cfg, 0)
    for k, v in expected.items():
        if k not in params or params[k].shape != v.shape:
            raise IncompatibleCheckpoint(f"{path}: parameter {k} missing or misshapen")
    return params, cfg, doc.get("extra", {}), doc.get("config_hash")
