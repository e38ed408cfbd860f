"""Command-line entry point.

Exit codes: 0 success, 1 I/O error, 2 configuration error, 3 numerical
failure while fitting, 4 transport solver did not converge.
"""

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from datetime import datetime, timezone

import numpy as np

from . import __version__
from . import autodiff as ad
from .config import load_run_config
from .data import generate, load_dataset, read_tensor, save_dataset
from .exceptions import ConfigError, DecAlignError, IncompatibleCheckpoint, NoConvergence
from .gmm import GmmModel, fit as fit_gmm
from .homo import moments
from .mmot import build_cost_tensor, ot_objective, sinkhorn_mm, uniform_marginals
from .model import forward, load_checkpoint, save_checkpoint
from .trainer import (ABLATION_MASKS, HISTORY_FIELDS, LOSS_FIELDS, METRIC_FIELDS, evaluate,
                      modality_gap, train_run)

logger = logging.getLogger("decalign")

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_FIT, EXIT_SOLVER = 0, 1, 2, 3, 4


class CommandError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _file_digest(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _write_json(path, doc, args):
    if not getattr(args, "no_timestamp", False):
        doc = {**doc, "created_at": datetime.now(timezone.utc).isoformat()}
    d = os.path.dirname(path)
    if d:
        os.makedirs(d, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(row[h]) for h in header])


def worker_count(n_jobs):
    try:
        cap = int(os.environ.get("DECALIGN_THREADS", "1"))
    except ValueError:
        raise CommandError("DECALIGN_THREADS must be an integer", EXIT_CONFIG)
    return max(1, min(cap, n_jobs))


# -- commands -----------------------------------------------------------------
def cmd_generate(args):
    run = load_run_config(args.config)
    train, test = generate(run.spec)
    manifest = save_dataset(args.out, train, test, run.spec, run.hash)
    print(f"wrote {manifest['counts']['train']} train / {manifest['counts']['test']} "
          f"test samples to {args.out}")


def _load_features(path):
    if path.endswith(".npy"):
        X = np.load(path)
    else:
        X = read_tensor(path)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X.mean(axis=1)
    if X.ndim != 2:
        raise CommandError(f"{path}: features must be (N, d) or (N, T, d), got {X.shape}",
                           EXIT_CONFIG)
    return X


def cmd_fit_gmm(args):
    X = _load_features(args.features)
    try:
        model = fit_gmm(X, args.k, seed=args.seed, max_iters=args.max_iters, tol=args.tol)
    except DecAlignError as exc:
        raise CommandError(f"EM failed: {exc}", EXIT_FIT)
    doc = model.to_dict()
    doc["input_sha256"] = _file_digest(args.features)
    doc["log_likelihood_trace"] = model.log_likelihood_trace
    with open(args.out, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"fitted K={args.k} mixture on {X.shape[0]} samples "
          f"(final mean log-likelihood {model.log_likelihood_trace[-1]:.6f})")


def cmd_align(args):
    models = []
    for path in args.gmm:
        with open(path) as fh:
            models.append(GmmModel.from_dict(json.load(fh)))
    try:
        C = build_cost_tensor(models)
    except DecAlignError as exc:
        raise CommandError(str(exc), EXIT_CONFIG)
    if args.marginals == "pi":
        nu = [m.pi / m.pi.sum() for m in models]
    else:
        nu = uniform_marginals(len(models), models[0].K)
    code = EXIT_OK
    try:
        plan = sinkhorn_mm(C, nu, lam=args.lam, max_iters=args.max_iters, tol=args.tol)
    except NoConvergence as exc:
        plan = exc.payload
        code = EXIT_SOLVER
    transport, entropy = ot_objective(plan, C)
    doc = plan.to_dict()
    doc.update({
        "transport_cost": transport,
        "entropy_term": entropy,
        "marginals": [v.tolist() for v in nu],
        "cost": C.reshape(-1).tolist(),
        "inputs_sha256": [_file_digest(p) for p in args.gmm],
    })
    _write_json(args.out, doc, args)
    print(f"plan over {len(models)} modalities: transport cost {transport:.6g}, "
          f"residual {plan.marginal_residual:.3e}")
    if code:
        raise CommandError(f"Sinkhorn did not converge (residual "
                           f"{plan.marginal_residual:.3e}); plan written and flagged", code)


def _run_one(payload):
    cfg, spec, seed, mask_name = payload
    if mask_name is not None:
        cfg = _with_mask(cfg, ABLATION_MASKS[mask_name])
    train, test = generate(spec)
    return train_run(cfg, train, test, seed, spec.scores(), spec.n_classes)


def _with_mask(cfg, mask):
    return replace(cfg, ablation=mask)


def _map(jobs):
    n = worker_count(len(jobs))
    if n == 1:
        return [_run_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(_run_one, jobs))


def cmd_train(args):
    run = load_run_config(args.config)
    cfg = run.train
    if args.seeds:
        try:
            cfg.seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError:
            raise CommandError(f"--seeds must be comma-separated integers: {args.seeds!r}",
                               EXIT_CONFIG)
    out = args.out or run.output_dir
    if not out:
        raise CommandError("no output directory (--out or output_dir in the config)",
                           EXIT_CONFIG)
    os.makedirs(out, exist_ok=True)
    digest = run.hash
    train, test = generate(run.spec)
    save_dataset(os.path.join(out, "data"), train, test, run.spec, digest)

    results = _map([(cfg, run.spec, s, None) for s in cfg.seeds])
    rows = []
    summary = {"config_hash": digest, "config": run.to_dict(), "seeds": {}}
    for res in results:
        for r in res.history:
            rows.append({**r, "config_hash": digest})
        ckpt = os.path.join(out, f"checkpoint_seed{res.seed}.json")
        save_checkpoint(ckpt, res.params, res.model_config,
                        extra={"task": cfg.task, "class_scores": run.spec.scores().tolist(),
                               "seed": res.seed},
                        config_digest=digest)
        final = res.history[-1]
        summary["seeds"][str(res.seed)] = {
            "final": {k: final[k] for k in METRIC_FIELDS + ("mean_abs_cos_uni_com",)},
            "warnings": res.warnings,
            "checkpoint": os.path.basename(ckpt),
        }
        metrics = evaluate(res.params, res.model_config, test, cfg.task, run.spec.scores())
        _write_json(os.path.join(out, f"modality_gap_seed{res.seed}.json"),
                    {"config_hash": digest, **metrics["modality_gap"]}, args)
    _write_csv(os.path.join(out, "metrics.csv"), list(HISTORY_FIELDS) + ["config_hash"], rows)

    if args.sweep:
        jobs = [(cfg, run.spec, s, name) for s in cfg.seeds for name in ABLATION_MASKS]
        sweep_rows = []
        for (_, _, s, name), res in zip(jobs, _map(jobs)):
            mask = ABLATION_MASKS[name]
            sweep_rows.append({"seed": s, "mask": name, "mfd": int(mask.mfd),
                               "hete": int(mask.hete), "homo": int(mask.homo),
                               **{k: res.history[-1][k] for k in LOSS_FIELDS + METRIC_FIELDS},
                               "config_hash": digest})
        header = (["seed", "mask", "mfd", "hete", "homo"] + list(LOSS_FIELDS)
                  + list(METRIC_FIELDS) + ["config_hash"])
        _write_csv(os.path.join(out, "ablation.csv"), header, sweep_rows)
    _write_json(os.path.join(out, "run.json"), summary, args)
    for s, info in summary["seeds"].items():
        f = info["final"]
        print(f"seed {s}: acc2={f['acc2']:.4f} f1={f['f1']:.4f} mae={f['mae']:.4f}")


def _load_for_eval(args):
    try:
        params, model_cfg, extra, digest = load_checkpoint(args.checkpoint)
    except (KeyError, TypeError, ValueError) as exc:
        raise CommandError(f"{args.checkpoint}: unreadable checkpoint ({exc})", EXIT_CONFIG)
    data = load_dataset(args.data, args.split)
    return params, model_cfg, extra, digest, data


def cmd_eval(args):
    params, model_cfg, extra, digest, data = _load_for_eval(args)
    metrics = evaluate(params, model_cfg, data, extra.get("task", "regression"),
                       extra.get("class_scores"))
    doc = {"config_hash": digest, "split": args.split,
           **{k: metrics[k] for k in METRIC_FIELDS},
           "per_class_accuracy": metrics["per_class_accuracy"],
           "mean_abs_cos_uni_com": metrics["mean_abs_cos_uni_com"],
           "modality_gap": metrics["modality_gap"]}
    _write_json(args.out, doc, args)
    print(f"acc2={doc['acc2']:.4f} f1={doc['f1']:.4f} mae={doc['mae']:.4f}")


def modality_stats(params, model_cfg, data):
    with ad.no_grad():
        feats = forward(data.X, params, model_cfg).feats
    return {
        "moments": [moments(c).to_dict() for c in feats.com],
        "distance": modality_gap(feats.com),
    }


def cmd_stats(args):
    params, model_cfg, _, digest, data = _load_for_eval(args)
    doc = {"config_hash": digest, "split": args.split, **modality_stats(params, model_cfg, data)}
    _write_json(args.out, doc, args)
    print(f"mean modality gap {doc['distance']['mean']:.6g}")


# -- parser -------------------------------------------------------------------
def build_parser():
    p = argparse.ArgumentParser(prog="decalign", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--no-timestamp", action="store_true",
                        help="omit the created_at field from JSON outputs")

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    f = sub.add_parser("fit-gmm", help="fit a Gaussian mixture to a feature file")
    f.add_argument("--features", required=True)
    f.add_argument("--k", type=int, required=True)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--max-iters", type=int, default=100)
    f.add_argument("--tol", type=float, default=1e-6)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fit_gmm)

    a = sub.add_parser("align", help="solve multi-marginal OT between fitted mixtures")
    a.add_argument("--gmm", nargs="+", required=True)
    a.add_argument("--lambda", dest="lam", type=float, default=0.1)
    a.add_argument("--marginals", choices=("pi", "uniform"), default="pi")
    a.add_argument("--max-iters", type=int, default=500)
    a.add_argument("--tol", type=float, default=1e-6)
    a.add_argument("--out", required=True)
    common(a)
    a.set_defaults(func=cmd_align)

    t = sub.add_parser("train", help="train on synthetic data for every configured seed")
    t.add_argument("--config", required=True)
    t.add_argument("--out")
    t.add_argument("--seeds", help="comma-separated seeds overriding the config")
    t.add_argument("--sweep", action="store_true",
                   help="also run the four component-ablation masks (ablation.csv)")
    common(t)
    t.set_defaults(func=cmd_train)

    for name, func, text in (("eval", cmd_eval, "evaluate a checkpoint"),
                             ("stats", cmd_stats, "modality-gap statistics of a checkpoint")):
        e = sub.add_parser(name, help=text)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--data", required=True)
        e.add_argument("--split", choices=("train", "test"), default="test")
        e.add_argument("--out", required=True)
        common(e)
        e.set_defaults(func=func)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, IncompatibleCheckpoint) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NoConvergence as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except DecAlignError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FIT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
