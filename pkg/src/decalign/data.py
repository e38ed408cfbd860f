"""Synthetic multimodal data and the little-endian tensor dump format."""

import json
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import InvalidSpec

MAGIC = b"DALN"
FORMAT_VERSION = 1


def make_rng(seed, stream=0):
    """Counter-based generator; ``stream`` selects an independent substream."""
    return np.random.Generator(np.random.Philox(key=[int(seed), int(stream)]))


@dataclass
class SyntheticSpec:
    """Generative recipe for a labelled multimodal dataset.

    Each modality observes the class latent through its own fixed random map
    and temporal profile, plus a modality-specific per-sample nuisance latent
    and isotropic noise. ``class_scores`` default to half-integers centred on
    zero, so no class sits on the Acc-2 decision boundary.
    """

    n_classes: int = 3
    samples_per_class: int = 100
    latent_dim: int = 4
    shared_strength: float = 1.0
    unique_strength: list = field(default_factory=lambda: [4.0, 4.0, 4.0])
    noise: float = 2.0
    target_noise: float = 0.1
    modality_dims: list = field(default_factory=lambda: [[12, 8], [10, 6], [16, 10]])
    class_scores: list = None
    train_fraction: float = 0.7
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.unique_strength, (int, float)):
            self.unique_strength = [float(self.unique_strength)] * len(self.modality_dims)
        self.modality_dims = [[int(t), int(d)] for t, d in self.modality_dims]
        self.validate()

    @property
    def M(self):
        return len(self.modality_dims)

    def scores(self):
        if self.class_scores is not None:
            return np.asarray(self.class_scores, dtype=np.float64)
        return np.arange(self.n_classes) - self.n_classes // 2 + 0.5

    def validate(self):
        problems = []
        if self.n_classes < 2:
            problems.append("n_classes must be >= 2")
        if self.samples_per_class < 2:
            problems.append("samples_per_class must be >= 2")
        if self.M < 1:
            problems.append("need at least one modality")
        if len(self.unique_strength) != self.M:
            problems.append("unique_strength needs one entry per modality")
        if any(t < 1 or d < 1 for t, d in self.modality_dims):
            problems.append("modality dims must be positive")
        if min(self.shared_strength, self.noise, self.target_noise,
               *self.unique_strength) < 0:
            problems.append("strengths and noise levels must be non-negative")
        if not 0.0 < self.train_fraction < 1.0:
            problems.append("train_fraction must lie in (0, 1)")
        if self.class_scores is not None and len(self.class_scores) != self.n_classes:
            problems.append("class_scores needs one entry per class")
        if problems:
            raise InvalidSpec("; ".join(problems))

    def to_dict(self):
        return asdict(self)


@dataclass
class MultimodalDataset:
    X: list
    y: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.y)

    def subset(self, idx):
        return MultimodalDataset([x[idx] for x in self.X], self.y[idx], self.labels[idx])


def generate(spec):
    """Return ``(train, test)`` datasets, bit-reproducible from the spec."""
    spec.validate()
    rng = make_rng(spec.seed, 0)
    K, L = spec.n_classes, spec.latent_dim
    centroids = rng.standard_normal((K, L))
    maps, profiles, nuisance_maps = [], [], []
    for T_m, d_m in spec.modality_dims:
        maps.append(rng.standard_normal((L, d_m)) / np.sqrt(L))
        phase = rng.uniform(0.0, 2.0 * np.pi)
        freq = rng.uniform(0.5, 1.5)
        profiles.append(1.0 + 0.5 * np.sin(freq * np.linspace(0.0, np.pi, T_m) + phase))
        nuisance_maps.append(rng.standard_normal((L, d_m)) / np.sqrt(L))

    labels = np.repeat(np.arange(K), spec.samples_per_class)
    N = labels.size
    X = []
    for m, (T_m, d_m) in enumerate(spec.modality_dims):
        srng = make_rng(spec.seed, 1 + m)
        shared = (centroids[labels] @ maps[m])[:, None, :] * profiles[m][None, :, None]
        latent = srng.standard_normal((N, L))
        drift = np.linspace(-1.0, 1.0, T_m)[None, :, None]
        unique = (latent @ nuisance_maps[m])[:, None, :] * (1.0 + drift)
        noise = srng.standard_normal((N, T_m, d_m))
        X.append(spec.shared_strength * shared + spec.unique_strength[m] * unique
                 + spec.noise * noise)
    trng = make_rng(spec.seed, 1000)
    y = spec.scores()[labels] + spec.target_noise * trng.standard_normal(N)
    perm = trng.permutation(N)
    n_train = int(round(spec.train_fraction * N))
    data = MultimodalDataset(X, y, labels)
    return data.subset(perm[:n_train]), data.subset(perm[n_train:])


# -- binary tensor files ------------------------------------------------------
def write_tensor(path, array):
    """``DALN`` | u32 version | u32 ndim | u64 dims[ndim] | f64 payload, little-endian."""
    a = np.ascontiguousarray(np.asarray(array, dtype="<f8"))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, a.ndim))
        fh.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        fh.write(a.tobytes())


def read_tensor(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:4]!r}")
    version, ndim = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported tensor format version {version}")
    shape = struct.unpack_from(f"<{ndim}Q", blob, 12)
    offset = 12 + 8 * ndim
    count = int(np.prod(shape)) if ndim else 1
    if len(blob) - offset != 8 * count:
        raise ValueError(f"{path}: payload size does not match shape {shape}")
    return np.frombuffer(blob, dtype="<f8", offset=offset).reshape(shape).astype(np.float64)


def save_dataset(out_dir, train, test, spec=None, config_hash=None):
    """Write every array as a tensor file and a ``manifest.json`` describing them."""
    os.makedirs(out_dir, exist_ok=True)
    files = []
    for split, ds in (("train", train), ("test", test)):
        arrays = [(f"{split}_x{m}.bin", f"modality_{m}", x) for m, x in enumerate(ds.X)]
        arrays += [(f"{split}_y.bin", "target", ds.y),
                   (f"{split}_labels.bin", "label", ds.labels.astype(np.float64))]
        for name, kind, arr in arrays:
            write_tensor(os.path.join(out_dir, name), arr)
            files.append({"name": name, "split": split, "kind": kind,
                          "shape": list(np.shape(arr))})
    manifest = {
        "format_version": FORMAT_VERSION,
        "n_modalities": len(train.X),
        "counts": {"train": len(train), "test": len(test)},
        "files": files,
    }
    if spec is not None:
        manifest["spec"] = spec.to_dict()
    if config_hash is not None:
        manifest["config_hash"] = config_hash
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def load_dataset(data_dir, split):
    with open(os.path.join(data_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    M = manifest["n_modalities"]
    X = [read_tensor(os.path.join(data_dir, f"{split}_x{m}.bin")) for m in range(M)]
    y = read_tensor(os.path.join(data_dir, f"{split}_y.bin"))
    labels = read_tensor(os.path.join(data_dir, f"{split}_labels.bin")).astype(np.int64)
    return MultimodalDataset(X, y, labels)
