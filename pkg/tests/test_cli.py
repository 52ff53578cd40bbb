import dataclasses
import json
import os

import numpy as np
import pytest

from contactdyn import formats as fm
from contactdyn.cli import run_command
from contactdyn.config import SEED_ENV, ConfigError, from_dict, load_config
from contactdyn.model import DynamicsModel
from contactdyn.selfcheck import tiny_model_config
from contactdyn.simenv import EnvConfig, generate_dataset

TINY = {
    "model": dataclasses.asdict(tiny_model_config()),
    "env": {"n_points": 8},
    "data": {"n_traj": 4, "T": 20, "stride": 2},
    "train": {"epochs": 2, "finetune_epochs": 2, "batch_size": 8, "val_fraction": 0.0},
    "eval": {"T_roll": 8, "samples": 2},
    "baselines": {"sim_epochs": 1, "real_epochs": 1, "seeds": [0, 1]},
}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "run.json"
    cfg.write_text(json.dumps(TINY))
    c = ["--config", str(cfg)]
    assert run_command(["gen-data", "--domain", "sim", "--out", str(d / "sim.jsonl"), "--seed", "0", *c]) == 0
    assert run_command(["gen-data", "--domain", "real-twin", "--out", str(d / "real.jsonl"), "--seed", "100", *c]) == 0
    assert run_command(["gen-data", "--domain", "real-twin", "--n", "3", "--out", str(d / "test.jsonl"), "--seed", "200", *c]) == 0
    assert run_command(["train", "--data", str(d / "sim.jsonl"), "--out", str(d / "pre.ckpt"), *c]) == 0
    assert run_command(["finetune", "--init", str(d / "pre.ckpt"), "--data", str(d / "real.jsonl"), "--out", str(d / "ft.ckpt"), *c]) == 0
    return d, c


def _bytes(path):
    with open(path, "rb") as fh:
        return fh.read()


class TestDatasetFormat:
    def test_round_trip_is_exact(self, tmp_path):
        env = EnvConfig(domain="real-twin", n_points=8)
        trajs = generate_dataset(env, 3, 20, seed=4)
        path = str(tmp_path / "d.jsonl")
        fm.write_dataset(path, fm.dataset_manifest("real-twin", 3, {"n": 1}, 9, 8, None, 4), trajs)
        assert fm.read_dataset(path).trajectories == trajs

    def test_empty_dataset(self, tmp_path):
        path = str(tmp_path / "e.jsonl")
        fm.write_dataset(path, fm.dataset_manifest("sim", 0, {}, 9, 8, None, 0), [])
        assert fm.read_dataset(path).trajectories == []

    def test_truncation_detected(self, work):
        d, _ = work
        lines = _bytes(d / "sim.jsonl").split(b"\n")
        bad = d / "trunc.jsonl"
        bad.write_bytes(b"\n".join(lines[:-3]) + b"\n")
        with pytest.raises(fm.FormatError, match="truncated"):
            fm.read_dataset(str(bad))

    def test_nan_rejected_on_write_and_read(self, tmp_path):
        tr = generate_dataset(EnvConfig(n_points=8), 1, 20, seed=0)[0]
        tr.q[3, 0] = np.nan
        with pytest.raises(fm.FormatError):
            fm.write_dataset(str(tmp_path / "n.jsonl"), fm.dataset_manifest("sim", 1, {}, 9, 8, None, 0), [tr])
        with pytest.raises(fm.FormatError):
            fm.loads('{"x": NaN}')

    def test_domain_mismatch(self, tmp_path):
        tr = generate_dataset(EnvConfig(n_points=8), 1, 20, seed=0)
        with pytest.raises(fm.DomainMismatchError):
            fm.write_dataset(str(tmp_path / "m.jsonl"), fm.dataset_manifest("real-twin", 1, {}, 9, 8, None, 0), tr)

    def test_tampered_env(self, work):
        d, _ = work
        lines = _bytes(d / "sim.jsonl").split(b"\n")
        head = json.loads(lines[0])
        head["env"]["mu"] = 9.0
        bad = d / "tampered.jsonl"
        bad.write_bytes(b"\n".join([json.dumps(head).encode()] + lines[1:]))
        with pytest.raises(fm.FormatError, match="hash"):
            fm.read_dataset(str(bad))


class TestCheckpointFormat:
    def test_restore_within_float32_bound(self, work, tmp_path):
        from contactdyn.model import init_params

        cfg = tiny_model_config()
        params = init_params(cfg, 3)
        path = str(tmp_path / "c.ckpt")
        fm.write_checkpoint(path, params, dataclasses.asdict(cfg), "pretrain", 1, 0, None)
        back = fm.read_checkpoint(path)
        for k in params:
            assert np.all(np.abs(back.params[k] - params[k]) <= np.abs(params[k]) * 2.0**-24)
        d, _ = work
        test = fm.read_dataset(str(d / "test.jsonl")).trajectories
        from contactdyn.evaluation import RolloutConfig, rollout_metrics

        rc = RolloutConfig(T_roll=8)
        a = rollout_metrics(DynamicsModel(cfg, params), test, cfg.K, cfg.H, rc, 0.05, 0.025)
        b = rollout_metrics(DynamicsModel(back.model_config, back.params), test, cfg.K, cfg.H, rc, 0.05, 0.025)
        assert np.sqrt(np.mean((np.array([r["mse"] for r in a.per_trajectory]) - [r["mse"] for r in b.per_trajectory]) ** 2)) <= 1e-5

    def test_truncated_blob(self, work):
        d, _ = work
        bad = d / "short.ckpt"
        bad.write_bytes(_bytes(d / "pre.ckpt")[:-10])
        with pytest.raises(fm.FormatError, match="truncated"):
            fm.read_checkpoint(str(bad))

    def test_parent_hash_links_finetune(self, work):
        d, _ = work
        ft = fm.read_checkpoint(str(d / "ft.ckpt"))
        assert ft.manifest["phase"] == "finetune"
        assert ft.manifest["parent_hash"] == fm.file_hash(str(d / "pre.ckpt"))
        assert fm.read_checkpoint(str(d / "pre.ckpt")).manifest["parent_hash"] is None

    def test_finetune_requires_parent(self, tmp_path):
        cfg = tiny_model_config()
        with pytest.raises(fm.FormatError):
            fm.write_checkpoint(str(tmp_path / "x.ckpt"), {}, dataclasses.asdict(cfg), "finetune", 1, 0, None)


class TestCommands:
    def test_gen_data_rerun_is_bitwise(self, work, tmp_path):
        d, c = work
        out = tmp_path / "again.jsonl"
        assert run_command(["gen-data", "--domain", "sim", "--out", str(out), "--seed", "0", *c]) == 0
        assert _bytes(out) == _bytes(d / "sim.jsonl")

    def test_train_rerun_is_reproducible(self, work, tmp_path):
        d, c = work
        out = tmp_path / "again.ckpt"
        assert run_command(["train", "--data", str(d / "sim.jsonl"), "--out", str(out), *c]) == 0
        assert _bytes(out) == _bytes(d / "pre.ckpt")
        assert _bytes(str(out) + ".log.jsonl") == _bytes(str(d / "pre.ckpt") + ".log.jsonl")

    def test_log_has_consistent_epochs(self, work):
        d, _ = work
        rows = [json.loads(x) for x in _bytes(str(d / "pre.ckpt") + ".log.jsonl").decode().splitlines()]
        assert "header" in rows[0] and [r["epoch"] for r in rows[1:]] == [1, 2]
        for r in rows[1:]:
            assert abs(r["L"] - (r["L_cnt"] + r["lam"] * r["L_diff"])) <= 1e-12

    def test_eval_and_rollout(self, work):
        d, c = work
        out = d / "eval.json"
        assert run_command(["eval", "--ckpt", str(d / "ft.ckpt"), "--data", str(d / "test.jsonl"), "--out", str(out), *c]) == 0
        rep = json.loads(out.read_text())
        assert rep["rollout"]["config"]["samples"] == 2 and " MSE / " in rep["cell"]
        assert len((d / "eval.csv").read_text().splitlines()) == 1 + 3
        first = _bytes(out)
        assert run_command(["eval", "--ckpt", str(d / "ft.ckpt"), "--data", str(d / "test.jsonl"), "--out", str(out), *c]) == 0
        assert _bytes(out) == first
        roll = d / "roll.jsonl"
        assert run_command(["rollout", "--ckpt", str(d / "ft.ckpt"), "--data", str(d / "test.jsonl"), "--out", str(roll),
                            "--h-apply", "1", "--feedback", "oracle", *c]) == 0
        rows = [json.loads(x) for x in roll.read_text().splitlines()]
        assert len(rows) == 4 and len(rows[1]["s"][0]) == 12

    def test_baselines_table(self, work):
        d, c = work
        out = d / "base.json"
        argv = ["baselines", "--sim", str(d / "sim.jsonl"), "--real", str(d / "real.jsonl"), "--test", str(d / "test.jsonl"),
                "--kinds", "diffusion-contact,direct-mlp", "--out", str(out), *c]
        assert run_command(argv) == 0
        rep = json.loads(out.read_text())
        assert rep["rows"][0][0] == "Method" and len(rep["rows"]) == 3 and len(rep["per_seed"]) == 2
        first = _bytes(d / "base.csv")
        assert run_command(argv) == 0
        assert _bytes(d / "base.csv") == first

    def test_finetune_refuses_sim_data(self, work, tmp_path):
        d, c = work
        assert run_command(["finetune", "--init", str(d / "pre.ckpt"), "--data", str(d / "sim.jsonl"), "--out", str(tmp_path / "x"), *c]) == 5

    def test_selfcheck(self, tmp_path):
        assert run_command(["selfcheck", "--out", str(tmp_path / "s.json")]) == 0


@pytest.mark.parametrize("argv,code", [
    (["no-such-command"], 2),
    (["gen-data", "--out", "x"], 2),
    (["eval", "--ckpt", "/nonexistent.ckpt", "--data", "/nonexistent.jsonl", "--out", "o.json"], 3),
])
def test_exit_codes(argv, code, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert run_command(argv) == code


def test_bad_config_and_h_apply(work, tmp_path, capsys):
    d, c = work
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {"widht": 3}}))
    assert run_command(["gen-data", "--domain", "sim", "--out", str(tmp_path / "x"), "--config", str(bad)]) == 4
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["code"] == 4 and err["error"] == "config"
    assert run_command(["eval", "--ckpt", str(d / "ft.ckpt"), "--data", str(d / "test.jsonl"), "--out", str(tmp_path / "e.json"),
                        "--h-apply", "99", *c]) == 4


def test_format_error_exit(work, tmp_path):
    d, c = work
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"not a checkpoint")
    assert run_command(["eval", "--ckpt", str(junk), "--data", str(d / "test.jsonl"), "--out", str(tmp_path / "e.json"), *c]) == 5


class TestConfig:
    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            from_dict({"train": {"epoch": 3}})

    def test_seed_from_environment(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"seed": 3}))
        assert load_config(str(p), environ={}).seed == 3
        assert load_config(str(p), environ={SEED_ENV: "11"}).seed == 11

    def test_round_trip(self):
        cfg = from_dict(TINY)
        assert from_dict(cfg.to_dict()) == cfg
        assert cfg.model.unet_widths == (3, 4)

    def test_invalid_values(self):
        with pytest.raises(ConfigError):
            from_dict({"eval": {"samples": 0}})


def test_atomic_write_leaves_no_temp_files(tmp_path):
    fm.atomic_write(str(tmp_path / "a.txt"), "hello")
    assert os.listdir(tmp_path) == ["a.txt"]
