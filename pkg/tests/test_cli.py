import csv

import numpy as np
import pytest
import yaml
from scipy.sparse import csgraph, csr_matrix

from mpcno.checkpoint import load_checkpoint
from mpcno.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, main, validate, SCHEMAS, ConfigError
from mpcno.data import load_sampleset
from mpcno.geometry import build_neighbor_lists
from mpcno.operator import flatten
from mpcno.train import TrainConfig, train_adam


def _config(tmp_path, name, body):
    path = tmp_path / f"{name}.yaml"
    path.write_text(yaml.safe_dump(body, sort_keys=False))
    return str(path)


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    cfg = _config(out, "gen", {"kernel": "SingleLayer2D", "n": 10, "n_points": 48, "output": "train.bin"})
    assert main(["gen-data", "--config", cfg, "--out", str(out)]) == EXIT_OK
    return out / "train.bin"


def test_gen_data_is_deterministic(tmp_path, dataset):
    cfg = _config(tmp_path, "gen", {"kernel": "SingleLayer2D", "n": 10, "n_points": 48, "output": "again.bin"})
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "again.bin").read_bytes() == dataset.read_bytes()
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path), "--seed", "1"]) == EXIT_OK
    assert (tmp_path / "again.bin").read_bytes() != dataset.read_bytes()


def test_gen_data_prints_summary(tmp_path, capsys):
    cfg = _config(tmp_path, "gen", {"task": "neumann", "n": 2, "n_points": 48})
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path)]) == EXIT_OK
    line = capsys.readouterr().out
    assert "n=2" in line and "N_max=48" in line and "generator_hash=" in line


def test_two_curve_samples_have_two_components(tmp_path):
    cfg = _config(tmp_path, "gen", {"n": 3, "n_points": 48, "two_curve": True, "output": "two.bin"})
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path)]) == EXIT_OK
    ds = load_sampleset(tmp_path / "two.bin")
    for i in range(len(ds)):
        c = build_neighbor_lists(ds.cloud(i), 6)
        rows = np.repeat(np.arange(c.n), 6)
        graph = csr_matrix((np.ones(rows.size), (rows, c.neighbors.ravel())), shape=(c.n, c.n))
        assert csgraph.connected_components(graph, directed=False)[0] == 2


def test_unknown_key_is_rejected_without_output(tmp_path):
    cfg = _config(tmp_path, "gen", {"n": 2, "bogus": 1})
    out = tmp_path / "never"
    assert main(["gen-data", "--config", cfg, "--out", str(out)]) == EXIT_CONFIG
    assert not out.exists()


def test_schema_validation():
    with pytest.raises(ConfigError):
        validate(SCHEMAS["fit"], {})
    with pytest.raises(ConfigError):
        validate(SCHEMAS["gen-data"], {"n": "ten"})
    with pytest.raises(ConfigError):
        validate(SCHEMAS["gen-data"], {"n": True})
    with pytest.raises(ConfigError):
        validate(SCHEMAS["train"], {"dataset": "x", "model": {"width": 3}})
    cfg = validate(SCHEMAS["train"], {"dataset": "x"})
    assert cfg["model"]["d_f"] == 16 and cfg["train"]["batch_size"] == 8


def test_bad_arguments_exit_config(tmp_path):
    assert main(["no-such-command"]) == EXIT_CONFIG
    assert main(["gen-data", "--config", str(tmp_path / "missing.yaml")]) == EXIT_IO


def test_fit_then_eval(tmp_path, dataset):
    fit = _config(tmp_path, "fit", {"dataset": str(dataset), "p": 2, "checkpoint": "lin.ckpt"})
    assert main(["fit", "--config", fit, "--out", str(tmp_path)]) == EXIT_OK
    model, _, extra = load_checkpoint(tmp_path / "lin.ckpt")
    assert extra["complete"] and model.p == 2
    other = tmp_path / "other.bin"
    assert main(["gen-data", "--config", _config(tmp_path, "g2", {"n": 3, "n_points": 48, "seed": 7, "output": "other.bin"}), "--out", str(tmp_path)]) == EXIT_OK
    ev = _config(tmp_path, "eval", {"checkpoint": str(tmp_path / "lin.ckpt"), "datasets": {"train": str(dataset), "other": str(other)}})
    assert main(["eval", "--config", ev, "--out", str(tmp_path)]) == EXIT_OK
    rows = _rows(tmp_path / "eval.csv")
    assert [r["dataset"] for r in rows] == ["train", "other"]
    train_err = float(_rows(tmp_path / "fit_metrics.csv")[0]["train_rel_l2"])
    assert abs(float(rows[0]["mean_rel_l2"]) - train_err) <= 1e-12
    per = [float(x) for x in rows[1]["per_sample"].split(";")]
    assert len(per) == 3 and float(rows[1]["mean_rel_l2"]) == pytest.approx(np.mean(per), rel=1e-12)


def test_eval_empty_dataset_fails(tmp_path, dataset):
    fit = _config(tmp_path, "fit", {"dataset": str(dataset), "p": 2})
    assert main(["fit", "--config", fit, "--out", str(tmp_path)]) == EXIT_OK
    empty = load_sampleset(dataset).subset([])
    from mpcno.data import save_sampleset

    save_sampleset(empty, tmp_path / "empty.bin")
    ev = _config(tmp_path, "eval", {"checkpoint": str(tmp_path / "linear.ckpt"), "datasets": {"e": str(tmp_path / "empty.bin")}})
    assert main(["eval", "--config", ev, "--out", str(tmp_path)]) != EXIT_OK


TRAIN_BODY = {"model": {"d_f": 4, "n_layers": 1, "p": 2}, "train": {"batch_size": 4, "epochs": 4, "peak_lr": 3e-3}, "seed": 2}


def test_train_resume_matches_uninterrupted(tmp_path, dataset):
    full = _config(tmp_path, "train", dict(TRAIN_BODY, dataset=str(dataset), checkpoint="full.ckpt", metrics="full.csv"))
    assert main(["train", "--config", full, "--out", str(tmp_path)]) == EXIT_OK
    assert not (tmp_path / "full.ckpt.partial").exists()
    ref, _, _ = load_checkpoint(tmp_path / "full.ckpt")
    # interrupt an identical run after two epochs, then resume through the CLI
    from mpcno.operator import ModelConfig, init_model

    ds = load_sampleset(dataset)
    mp = init_model(ModelConfig(d_f=4, n_layers=1, p=2), seed=2)
    tc = TrainConfig(seed=2, batch_size=4, epochs=4, peak_lr=3e-3)
    train_adam(mp, ds, tc, stop_epoch=2, checkpoint_path=tmp_path / "cut.ckpt.partial")
    assert load_checkpoint(tmp_path / "cut.ckpt.partial")[2] == {"complete": False}
    res = _config(tmp_path, "resume", dict(TRAIN_BODY, dataset=str(dataset), resume=str(tmp_path / "cut.ckpt.partial"), checkpoint="resumed.ckpt", metrics="resumed.csv"))
    assert main(["train", "--config", res, "--out", str(tmp_path)]) == EXIT_OK
    got, _, _ = load_checkpoint(tmp_path / "resumed.ckpt")
    assert np.array_equal(flatten(got), flatten(ref))
    a = [float(r["loss"]) for r in _rows(tmp_path / "full.csv")]
    b = [float(r["loss"]) for r in _rows(tmp_path / "resumed.csv")]
    assert len(a) == 4 and np.max(np.abs(np.subtract(a, b))) <= 1e-12


def test_train_is_deterministic(tmp_path, dataset):
    digests = []
    for name in ("a", "b"):
        cfg = _config(tmp_path, name, dict(TRAIN_BODY, dataset=str(dataset), checkpoint=f"{name}.ckpt"))
        assert main(["train", "--config", cfg, "--out", str(tmp_path)]) == EXIT_OK
        digests.append((tmp_path / f"{name}.ckpt").read_bytes())
    assert digests[0] == digests[1]


def test_ewald_sweep(tmp_path):
    assert main(["ewald-sweep", "--out", str(tmp_path)]) == EXIT_OK
    rows = _rows(tmp_path / "ewald_sweep.csv")
    assert [int(r["p"]) for r in rows] == [8, 16, 32]
    errs = [float(r["l1_error"]) for r in rows]
    assert errs[0] > errs[1] > errs[2]
    assert list(rows[0]) == ["kernel", "p", "delta", "epsilon", "l1_error"]


def test_flow(tmp_path):
    assert main(["flow", "--out", str(tmp_path)]) == EXIT_OK
    rep = _rows(tmp_path / "flow_report.csv")
    assert len(rep) == 1 and float(rep[0]["max_abs_err"]) <= 0.05
    assert len(_rows(tmp_path / "flow_cp.csv")) == 1280


def test_flow_missing_mesh(tmp_path):
    cfg = _config(tmp_path, "flow", {"mesh": str(tmp_path / "nope.obj")})
    assert main(["flow", "--config", cfg, "--out", str(tmp_path)]) == EXIT_IO


def test_verify(capsys):
    assert main(["verify", "--threads", "1"]) == EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 5 and all(line.startswith("PASS") for line in lines)


def test_corrupt_dataset_is_io_error(tmp_path, dataset):
    raw = bytearray(dataset.read_bytes())
    raw[-1] ^= 1
    (tmp_path / "bad.bin").write_bytes(bytes(raw))
    fit = _config(tmp_path, "fit", {"dataset": str(tmp_path / "bad.bin")})
    assert main(["fit", "--config", fit, "--out", str(tmp_path)]) == EXIT_IO
