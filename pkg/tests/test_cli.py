import json

import numpy as np
import pytest

from lpsl import cli
from lpsl.config import RunConfig, build_config, read_config_file
from lpsl.errors import ValidationError
from lpsl.graph import write_edge_list
from lpsl.solver import load_structure

from conftest import random_graph


@pytest.fixture
def toy(tmp_path):
    rng = np.random.default_rng(0)
    n, k = 90, 3
    g = random_graph(n, 0.06, rng)
    write_edge_list(g, tmp_path / "g.edges")
    classes = np.arange(n) % k
    X = (rng.random((n, 12)) < 0.2).astype(float)
    X[np.arange(n), classes] += 1.0
    np.savetxt(tmp_path / "x.csv", X, delimiter=",", fmt="%g")
    (tmp_path / "y.txt").write_text("".join(f"{i} {c}\n" for i, c in enumerate(classes)))
    data = ["--graph", str(tmp_path / "g.edges"), "--features", str(tmp_path / "x.csv"),
            "--labels", str(tmp_path / "y.txt")]
    split = ["--per-class", "5", "--n-val", "20", "--n-test", "40"]
    return tmp_path, data, split


def run(argv, capsys=None):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr() if capsys else None
    return code, out


def test_lps_with_train_labels(toy):
    tmp, data, _ = toy
    (tmp / "train.txt").write_text("0\n5\n9\n")
    code, _ = run(["lps", "--graph", tmp / "g.edges", "--train-labels", tmp / "train.txt",
                   "--alpha", "0.1", "--out", tmp / "lps.json"])
    assert code == 0
    doc = json.loads((tmp / "lps.json").read_text())
    assert doc["alpha"] == 0.1 and len(doc["scores"]) == 90
    assert doc["config"]["alpha"] == 0.1


def test_pipeline(toy, capsys):
    tmp, data, split = toy
    out = tmp / "run"
    assert run(["groups", *data, *split, "--metric", "spd", "--min-group-size", "1", "--out-dir", out])[0] == 0
    assert json.loads((out / "groups_spd.json").read_text())["metric"] == "spd"

    code, _ = run(["learn", *data, *split, "--mode", "sparse", "--lambda", "10", "--c", "1.0", "--beta", "1e-5",
                   "--block-size", "64", "--rho", "0.1", "--gamma", "0.02", "--out", out / "B.coo"])
    assert code == 0
    header = (out / "B.coo").read_text().splitlines()[0]
    assert header.startswith("#lpsl n=90 nnz=") and header.endswith("lambda=10.0 c=1.0 beta=1e-05")
    B = load_structure(out / "B.coo")
    assert B.meta["run"]["block_size"] == 64

    code, _ = run(["propagate", *data, *split, "--structure", out / "B.coo", "--out", out / "lp.json"])
    assert code == 0
    assert "config" in json.loads((out / "lp.json").read_text())

    code, res = run(["report", *data, *split, "--predictions", out / "lp.json", "--metric", "lps",
                     "--min-group-size", "3", "--out", out / "rep.json", "--csv", out / "rep.csv"], capsys)
    assert code == 0 and "WDP" in res.out
    rep = json.loads((out / "rep.json").read_text())
    assert {"metric", "groups", "wdp", "wsd", "wcv", "boundaries", "config"} <= set(rep)
    assert (out / "rep.csv").read_text().startswith("group,low,high,n,acc")

    code, _ = run(["train", *data, *split, "--operator", "adj", "--arch", "gcn", "--max-epochs", "30",
                   "--out", out / "gcn.json"])
    assert code == 0
    assert (out / "gcn.head").read_bytes()[:8] == b"LPSLHEAD"


def test_rerun_is_byte_identical(toy):
    tmp, data, split = toy
    paths = []
    for name in ("a", "b"):
        d = tmp / name
        assert run(["learn", *data, *split, "--mode", "dense", "--max-outer", "20", "--out", d / "B.dense",
                    "--out-dir", tmp])[0] == 0
        assert run(["train", *data, *split, "--operator", "ppr", "--max-epochs", "20", "--out", d / "p.json",
                    "--out-dir", tmp])[0] == 0
        paths.append(d)
    for f in ("B.dense", "p.json", "p.scores.csv", "p.head"):
        a = (paths[0] / f).read_bytes().replace(b"/a/", b"/x/")
        b = (paths[1] / f).read_bytes().replace(b"/b/", b"/x/")
        assert a == b, f


def test_sweep_prints_mean_std(toy, capsys):
    tmp, data, split = toy
    code, res = run(["sweep", *data, *split, "--seeds", "3", "--task", "lp", "--rho", "0.1", "--gamma", "0.02",
                     "--min-group-size", "3", "--out-dir", tmp / "sw"], capsys)
    assert code == 0
    lines = [l for l in res.out.splitlines() if "accuracy" in l]
    assert len(lines) == 2 and all("±" in l for l in lines)
    summary = json.loads((tmp / "sw" / "sweep_summary.json").read_text())
    assert summary["seeds"] == [0, 1, 2]
    assert set(summary["lpsl"]["acc"]) == {"mean", "std"}
    assert (tmp / "sw" / "sweep_seed2.json").exists()


def test_config_file_precedence(toy):
    tmp, data, split = toy
    (tmp / "cfg.json").write_text(json.dumps({"graph": "g.edges", "labels": "y.txt", "alpha": 0.3, "seed": 4,
                                              "per_class": 5, "n_val": 20, "n_test": 40}))
    doc = read_config_file(tmp / "cfg.json")
    assert doc["graph"] == str(tmp / "g.edges")
    cfg = build_config(doc, {"alpha": 0.2, "seed": None})
    assert (cfg.alpha, cfg.seed, cfg.lam) == (0.2, 4, RunConfig().lam)

    code, _ = run(["lps", "--config", tmp / "cfg.json", "--out", tmp / "l.json"])
    assert code == 0
    assert json.loads((tmp / "l.json").read_text())["alpha"] == 0.3
    code, _ = run(["lps", "--config", tmp / "cfg.json", "--alpha", "0.5", "--out", tmp / "l.json"])
    assert json.loads((tmp / "l.json").read_text())["alpha"] == 0.5


def test_unknown_config_key(toy):
    tmp, _, _ = toy
    (tmp / "bad.json").write_text(json.dumps({"graph": "g.edges", "lamda": 3}))
    with pytest.raises(ValidationError, match="lamda"):
        read_config_file(tmp / "bad.json")
    assert run(["lps", "--config", tmp / "bad.json"])[0] == 1


def test_exit_codes(toy, capsys):
    tmp, data, split = toy
    assert run(["nonsense"])[0] == 1
    assert run(["lps", "--bogus"])[0] == 1
    assert run(["lps", "--graph", tmp / "missing.edges"])[0] == 1
    assert run(["lps", *data, "--alpha", "0"])[0] == 1
    assert run(["learn", *data, *split, "--split", tmp / "s.json"])[0] == 1  # conflicting sources
    assert run(["learn", *data, *split, "--gamma", "5", "--max-outer", "100", "--out", tmp / "x"])[0] == 2
    err = capsys.readouterr().err
    assert "numerical failure" in err


def test_split_file_is_used(toy):
    tmp, data, split = toy
    from lpsl.graph import make_split

    s = make_split(np.arange(90) % 3, per_class=4, n_val=10, n_test=30, seed=7)
    s.save(tmp / "s.json")
    code, _ = run(["propagate", *data, "--split", tmp / "s.json", "--operator", "ppr", "--out", tmp / "p.json"])
    assert code == 0
    cfg = json.loads((tmp / "p.json").read_text())["config"]
    assert cfg["split"] == str(tmp / "s.json")
