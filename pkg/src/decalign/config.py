"""Run-configuration files: schema validation, defaults, and content hashing."""

import json
from dataclasses import dataclass, fields

import jsonschema

from .data import SyntheticSpec
from .exceptions import ConfigError, InvalidSpec
from .model import config_hash
from .trainer import AblationMask, TrainConfig

_num = {"type": "number"}
_int = {"type": "integer"}
_bool = {"type": "boolean"}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required),
            "additionalProperties": False}


SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "decalign run configuration",
    **_obj({
        "output_dir": {"type": "string"},
        "data": _obj({
            "n_classes": {"type": "integer", "minimum": 2},
            "samples_per_class": {"type": "integer", "minimum": 2},
            "latent_dim": {"type": "integer", "minimum": 1},
            "shared_strength": {"type": "number", "minimum": 0},
            "unique_strength": {"oneOf": [{"type": "number", "minimum": 0},
                                          {"type": "array", "items": {"type": "number",
                                                                      "minimum": 0}}]},
            "noise": {"type": "number", "minimum": 0},
            "target_noise": {"type": "number", "minimum": 0},
            "modality_dims": {"type": "array", "minItems": 1,
                              "items": {"type": "array", "minItems": 2, "maxItems": 2,
                                        "items": {"type": "integer", "minimum": 1}}},
            "class_scores": {"type": ["array", "null"], "items": _num},
            "train_fraction": {"type": "number", "exclusiveMinimum": 0,
                               "exclusiveMaximum": 1},
            "seed": _int,
        }),
        "train": _obj({
            "alpha": {"type": "number", "minimum": 0},
            "beta": {"type": "number", "minimum": 0},
            "lam": {"type": "number", "exclusiveMinimum": 0},
            "K": {"type": ["integer", "null"]},
            "M": {"type": ["integer", "null"]},
            "d_s": {"type": "integer", "minimum": 1},
            "T_s": {"type": "integer", "minimum": 1},
            "hidden": {"type": "integer", "minimum": 1},
            "kernel_width": {"type": "integer", "minimum": 1},
            "heads": {"type": "integer", "minimum": 1},
            "seeds": {"type": "array", "items": _int, "minItems": 1},
            "epochs": {"type": "integer", "minimum": 1},
            "batch_size": {"type": "integer", "minimum": 2},
            "lr": {"type": "number", "exclusiveMinimum": 0},
            "momentum": {"type": "number", "minimum": 0},
            "task": {"enum": ["regression", "classification"]},
            "ablation": _obj({k: _bool for k in
                              ("mfd", "hete", "homo", "proto_ot", "sem", "mmd", "ct")}),
            "gmm": _obj({"refit_every": {"type": "integer", "minimum": 1},
                         "max_iters": {"type": "integer", "minimum": 1},
                         "tol": {"type": "number", "exclusiveMinimum": 0}}),
            "hetero": _obj({"pairing": {"enum": ["all-pairs", "fixed-target"]},
                            "differentiate_ot": _bool,
                            "marginals": {"enum": ["pi", "uniform"]},
                            "max_iters": {"type": "integer", "minimum": 1},
                            "tol": {"type": "number", "exclusiveMinimum": 0}}),
            "homo": _obj({"estimator": {"enum": ["biased", "unbiased"]},
                          "bandwidth": {"oneOf": [{"const": "median"},
                                                  {"type": "number", "exclusiveMinimum": 0}]},
                          "mmd_on_raw": _bool}),
            "decouple": _obj({"mode": {"enum": ["squared", "paper-literal"]},
                              "granularity": {"enum": ["rowwise", "global"]}}),
        }),
    }, required=("data", "train")),
}

# nested JSON section -> flat TrainConfig field prefix
_SECTIONS = {
    "gmm": {"refit_every": "gmm_refit_every", "max_iters": "gmm_max_iters", "tol": "gmm_tol"},
    "hetero": {"pairing": "hetero_pairing", "differentiate_ot": "hetero_differentiate_ot",
               "marginals": "ot_marginals", "max_iters": "ot_max_iters", "tol": "ot_tol"},
    "homo": {"estimator": "homo_estimator", "bandwidth": "homo_bandwidth",
             "mmd_on_raw": "homo_mmd_on_raw"},
    "decouple": {"mode": "decouple_mode", "granularity": "decouple_granularity"},
}


@dataclass
class RunConfig:
    train: TrainConfig
    spec: SyntheticSpec
    output_dir: str = None

    def to_dict(self):
        """Normalized document (defaults filled in), nested like the file format."""
        flat = self.train.to_dict()
        doc = {k: v for k, v in flat.items()
               if not any(v2 == k for sec in _SECTIONS.values() for v2 in sec.values())}
        for section, mapping in _SECTIONS.items():
            doc[section] = {key: flat[attr] for key, attr in mapping.items()}
        return {"data": self.spec.to_dict(), "train": doc}

    @property
    def hash(self):
        return config_hash(self.to_dict())


def _validation_message(err):
    path = ".".join(str(p) for p in err.absolute_path)
    return f"{path or '<root>'}: {err.message}"


def parse_run_config(doc):
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as err:
        raise ConfigError(f"invalid config: {_validation_message(err)}") from None
    train_doc = dict(doc["train"])
    flat = {}
    for section, mapping in _SECTIONS.items():
        for key, value in train_doc.pop(section, {}).items():
            flat[mapping[key]] = value
    if "ablation" in train_doc:
        flat["ablation"] = AblationMask(**train_doc.pop("ablation"))
    known = {f.name for f in fields(TrainConfig)}
    flat.update({k: v for k, v in train_doc.items() if k in known})
    try:
        spec = SyntheticSpec(**doc["data"])
        train = TrainConfig(**flat)
    except InvalidSpec as exc:
        raise ConfigError(f"invalid data spec: {exc}") from None
    return RunConfig(train=train, spec=spec, output_dir=doc.get("output_dir"))


def load_run_config(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    return parse_run_config(doc)
