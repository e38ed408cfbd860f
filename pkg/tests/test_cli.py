import csv
import json
import os

import numpy as np
import pytest

from decalign import cli
from decalign.data import MultimodalDataset, load_dataset, save_dataset, write_tensor
from decalign.model import ModelConfig, init_params, save_checkpoint

TINY = {
    "data": {"samples_per_class": 10, "modality_dims": [[6, 3], [5, 4], [7, 2]], "seed": 4},
    "train": {"d_s": 4, "T_s": 4, "hidden": 6, "epochs": 2, "batch_size": 8, "lr": 0.01,
              "seeds": [1, 2]},
}


def write_config(tmp_path, doc=TINY, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def run(*argv):
    return cli.main([str(a) for a in argv])


def read_bytes(directory):
    return {f: open(os.path.join(directory, f), "rb").read() for f in sorted(os.listdir(directory))}


# -- generate -----------------------------------------------------------------
def test_generate_is_byte_identical(tmp_path):
    cfg = write_config(tmp_path)
    assert run("generate", "--config", cfg, "--out", tmp_path / "a") == 0
    assert run("generate", "--config", cfg, "--out", tmp_path / "b") == 0
    assert read_bytes(tmp_path / "a") == read_bytes(tmp_path / "b")


def test_generate_manifest_counts(tmp_path):
    cfg = write_config(tmp_path)
    run("generate", "--config", cfg, "--out", tmp_path / "d")
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    total = 3 * TINY["data"]["samples_per_class"]
    assert manifest["counts"] == {"train": 21, "test": total - 21}
    for split, n in manifest["counts"].items():
        assert len(load_dataset(tmp_path / "d", split)) == n
    assert len(manifest["config_hash"]) == 64


def test_missing_key_exit_code(tmp_path, capsys):
    cfg = write_config(tmp_path, {"data": {}})
    assert run("generate", "--config", cfg, "--out", tmp_path / "x") == 2
    assert "train" in capsys.readouterr().err


def test_unknown_key_rejected(tmp_path, capsys):
    cfg = write_config(tmp_path, {"data": {"bogus": 1}, "train": {}})
    assert run("generate", "--config", cfg, "--out", tmp_path / "x") == 2
    assert "bogus" in capsys.readouterr().err


def test_missing_config_is_io_error(tmp_path):
    assert run("generate", "--config", tmp_path / "nope.json", "--out", tmp_path / "x") == 1


# -- fit-gmm ------------------------------------------------------------------
def test_fit_gmm_single_component(tmp_path, rng):
    X = rng.standard_normal((30, 3))
    write_tensor(tmp_path / "f.bin", X)
    out = tmp_path / "g.json"
    assert run("fit-gmm", "--features", tmp_path / "f.bin", "--k", 1, "--out", out) == 0
    doc = json.loads(out.read_text())
    np.testing.assert_allclose(doc["means"][0], X.mean(0), atol=1e-12)
    first = out.read_bytes()
    run("fit-gmm", "--features", tmp_path / "f.bin", "--k", 1, "--out", out)
    assert out.read_bytes() == first


def test_fit_gmm_recovers_centers(tmp_path, rng):
    centers = np.array([[0.0, 0.0], [1.0, 1.0]])
    X = np.concatenate([c + 0.1 * rng.standard_normal((200, 2)) for c in centers])
    np.save(tmp_path / "f.npy", X)
    run("fit-gmm", "--features", tmp_path / "f.npy", "--k", 2, "--seed", 3,
        "--out", tmp_path / "g.json")
    means = np.array(json.loads((tmp_path / "g.json").read_text())["means"])
    for c in centers:
        assert np.min(np.max(np.abs(means - c), axis=1)) < 0.05


def test_fit_gmm_failure_exit(tmp_path):
    write_tensor(tmp_path / "f.bin", np.zeros((2, 2)))
    assert run("fit-gmm", "--features", tmp_path / "f.bin", "--k", 5,
               "--out", tmp_path / "g.json") == 3


# -- align --------------------------------------------------------------------
def _gmm_file(path, pi, means, covs):
    path.write_text(json.dumps({"K": len(pi), "pi": pi, "means": means, "covs": covs}))
    return path


def test_align_identical_models(tmp_path):
    g = _gmm_file(tmp_path / "g.json", [0.3, 0.7], [[0.0, 0.0], [4.0, 1.0]],
                  [np.eye(2).tolist(), (2 * np.eye(2)).tolist()])
    out = tmp_path / "plan.json"
    assert run("align", "--gmm", g, g, "--lambda", 1e-3, "--out", out, "--no-timestamp") == 0
    doc = json.loads(out.read_text())
    assert abs(doc["transport_cost"]) < 1e-8
    T = np.array(doc["values"]).reshape(doc["shape"])
    for i, nu in enumerate(doc["marginals"]):
        axes = tuple(a for a in range(T.ndim) if a != i)
        assert np.max(np.abs(T.sum(axis=axes) - np.array([0.3, 0.7]))) < 1e-6
        assert nu == [0.3, 0.7]


def test_align_single_component(tmp_path):
    gs = [_gmm_file(tmp_path / f"g{i}.json", [1.0], [[float(i), 0.0]], [np.eye(2).tolist()])
          for i in range(3)]
    out = tmp_path / "plan.json"
    assert run("align", "--gmm", *gs, "--out", out) == 0
    assert json.loads(out.read_text())["values"] == [1.0]


def test_align_no_convergence_still_writes(tmp_path, rng):
    gs = [_gmm_file(tmp_path / f"g{i}.json", [0.2, 0.3, 0.5], rng.standard_normal((3, 2)).tolist(),
                    [np.eye(2).tolist()] * 3) for i in range(3)]
    out = tmp_path / "plan.json"
    assert run("align", "--gmm", *gs, "--lambda", 1e-3, "--max-iters", 1, "--tol", 1e-14,
               "--out", out) == 4
    assert json.loads(out.read_text())["converged"] is False


# -- train / eval / stats -----------------------------------------------------
@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("train")
    cfg = write_config(tmp)
    out = tmp / "run"
    assert run("train", "--config", cfg, "--out", out, "--sweep", "--no-timestamp") == 0
    return cfg, out


def test_train_outputs(trained):
    _, out = trained
    rows = list(csv.DictReader(open(out / "metrics.csv")))
    assert len(rows) == 2 * TINY["train"]["epochs"]
    assert {"seed", "epoch", "loss_total", "acc2", "config_hash"} <= set(rows[0])
    for s in (1, 2):
        assert (out / f"checkpoint_seed{s}.json").exists()
        assert (out / f"modality_gap_seed{s}.json").exists()


def test_train_deterministic(trained, tmp_path):
    cfg, out = trained
    assert run("train", "--config", cfg, "--out", tmp_path / "again", "--no-timestamp") == 0
    assert (tmp_path / "again" / "metrics.csv").read_bytes() == (out / "metrics.csv").read_bytes()


def test_thread_count_does_not_change_output(trained, tmp_path, monkeypatch):
    cfg, out = trained
    monkeypatch.setenv("DECALIGN_THREADS", "4")
    assert run("train", "--config", cfg, "--out", tmp_path / "t4") == 0
    assert (tmp_path / "t4" / "metrics.csv").read_bytes() == (out / "metrics.csv").read_bytes()


def test_sweep_rows(trained):
    _, out = trained
    rows = list(csv.DictReader(open(out / "ablation.csv")))
    assert len(rows) == 4 * 2
    for s in ("1", "2"):
        assert len([r for r in rows if r["seed"] == s]) == 4


def test_eval_reproduces_history(trained, tmp_path):
    _, out = trained
    res = tmp_path / "eval.json"
    assert run("eval", "--checkpoint", out / "checkpoint_seed2.json", "--data", out / "data",
               "--out", res) == 0
    doc = json.loads(res.read_text())
    last = list(csv.DictReader(open(out / "metrics.csv")))[-1]
    assert last["seed"] == "2"
    for k in ("mae", "acc2", "f1"):
        assert doc[k] == float(last[k])


def test_stats_repeatable(trained, tmp_path):
    _, out = trained
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    for p in (a, b):
        assert run("stats", "--checkpoint", out / "checkpoint_seed1.json", "--data",
                   out / "data", "--out", p, "--no-timestamp") == 0
    assert a.read_bytes() == b.read_bytes()


def test_stats_zero_gap_and_loop_oracle(tmp_path, rng):
    cfg = ModelConfig(modality_dims=[[5, 3], [5, 3]], d_s=4, T_s=4, hidden=5)
    params = init_params(cfg, 0)
    params.tensors["conv.1"] = params["conv.0"]
    save_checkpoint(tmp_path / "c.json", params, cfg)
    x = rng.standard_normal((6, 5, 3))
    ds = MultimodalDataset([x, x.copy()], np.zeros(6), np.zeros(6, dtype=int))
    save_dataset(tmp_path / "d", ds, ds)
    assert run("stats", "--checkpoint", tmp_path / "c.json", "--data", tmp_path / "d",
               "--out", tmp_path / "s.json") == 0
    assert json.loads((tmp_path / "s.json").read_text())["distance"]["mean"] == 0.0

    y = rng.standard_normal((6, 5, 3))
    ds = MultimodalDataset([x, y], np.zeros(6), np.zeros(6, dtype=int))
    save_dataset(tmp_path / "e", ds, ds)
    run("stats", "--checkpoint", tmp_path / "c.json", "--data", tmp_path / "e",
        "--out", tmp_path / "s2.json")
    got = json.loads((tmp_path / "s2.json").read_text())["distance"]["mean"]
    feats = cli.modality_stats(params, cfg, load_dataset(tmp_path / "e", "test"))
    assert got == feats["distance"]["mean"]
    from decalign.model import forward
    com = forward([x, y], params, cfg).feats.com
    loop = sum(np.sqrt(sum((com[0].data[n, a] - com[1].data[n, a]) ** 2 for a in range(4)))
               for n in range(6)) / 6
    assert abs(got - loop) < 1e-10


def test_eval_incompatible_checkpoint(trained, tmp_path):
    _, out = trained
    cfg = ModelConfig(modality_dims=[[5, 3]], d_s=4, T_s=4, hidden=5)
    save_checkpoint(tmp_path / "c.json", init_params(cfg), cfg)
    assert run("eval", "--checkpoint", tmp_path / "c.json", "--data", out / "data",
               "--out", tmp_path / "e.json") == 2


def test_bad_thread_setting(trained, tmp_path, monkeypatch):
    cfg, _ = trained
    monkeypatch.setenv("DECALIGN_THREADS", "many")
    assert run("train", "--config", cfg, "--out", tmp_path / "z") == 2
