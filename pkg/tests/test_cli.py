"""Command-line interface: exit codes, config-file handling, dataset
generation, training artifacts, evaluation, and the diagnostic subcommands."""

import json

import numpy as np
import pytest

from qhnet import cli, data, train
from qhnet.errors import ConfigurationError
from qhnet.nn import ModelConfig, QHNet

SMALL_CFG_TEXT = """\
# small architecture for fast tests
channels = 2
n_interaction_layers = 2
max_steps = 4
warmup_steps = 1
eval_every = 2
batch_size = 2
"""


@pytest.fixture()
def small_cfg(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text(SMALL_CFG_TEXT)
    return str(p)


def _last_json(capsys):
    out = capsys.readouterr().out.strip().splitlines()
    for line in reversed(out):
        try:
            return json.loads(line)
        except json.JSONDecodeError:
            continue
    raise AssertionError(f"no JSON line in output: {out!r}")


# ---------------------------------------------------------------------------
# run-config parsing


def test_read_run_config_parses_types(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("channels = 4  # inline comment\nrbf_r_max=6.5\nuse_norm_gate = false\n\n")
    got = cli.read_run_config(p)
    assert got == {"channels": 4, "rbf_r_max": 6.5, "use_norm_gate": False}


def test_read_run_config_rejects_malformed_line(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("channels 4\n")
    with pytest.raises(ConfigurationError, match="key=value"):
        cli.read_run_config(p)


def test_build_configs_rejects_unknown_key():
    with pytest.raises(ConfigurationError, match="unknown"):
        cli.build_configs({"chanels": 4}, {})


def test_build_configs_cli_overrides_file():
    mc, tc, _ = cli.build_configs(
        {"channels": 4, "max_steps": 100, "warmup_steps": 10}, {"channels": 8}
    )
    assert mc.channels == 8
    assert tc.max_steps == 100


def test_unknown_config_key_exit_code(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("not_a_real_key = 1\n")
    assert cli.main(["count-tp", "--config", str(p)]) == 2


# ---------------------------------------------------------------------------
# count-tp


def test_count_tp_default(capsys):
    assert cli.main(["count-tp"]) == 0
    assert _last_json(capsys) == {"total": 9, "max_sequential": 6}


def test_count_tp_layer_override(capsys):
    assert cli.main(["count-tp", "--layers", "3"]) == 0
    assert _last_json(capsys) == {"total": 7, "max_sequential": 4}


# ---------------------------------------------------------------------------
# generate-data


def test_generate_data_deterministic_bytes(tmp_path, small_cfg, capsys):
    a = tmp_path / "a.jsonl"
    b = tmp_path / "b.jsonl"
    args = ["generate-data", "--template", "water", "--n", "2", "--seed", "3", "--config", small_cfg]
    assert cli.main(args + ["--out", str(a)]) == 0
    assert cli.main(args + ["--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    confs, manifest = data.load_dataset(a)
    assert len(confs) == 2 and manifest.seed == 3


def test_generate_data_unknown_template(tmp_path, small_cfg):
    rc = cli.main(
        ["generate-data", "--template", "benzene", "--n", "1", "--out",
         str(tmp_path / "x.jsonl"), "--config", small_cfg]
    )
    assert rc == 2


# ---------------------------------------------------------------------------
# check-equivariance


def test_check_equivariance_random_weights(small_cfg, capsys):
    rc = cli.main(
        ["check-equivariance", "--random", "--config", small_cfg,
         "--template", "water", "--trials", "2", "--seed", "1"]
    )
    assert rc == 0
    report = _last_json(capsys)
    assert report["rotation_residual"] < 1e-10
    assert report["translation_residual"] == 0.0
    assert report["permutation_residual"] == 0.0


def test_check_equivariance_negative_control(small_cfg, capsys):
    # corrupting one Clebsch-Gordan block must be caught
    rc = cli.main(
        ["check-equivariance", "--random", "--config", small_cfg,
         "--trials", "2", "--corrupt-cg"]
    )
    assert rc == 1
    assert _last_json(capsys)["rotation_residual"] > 1e-10


def test_check_equivariance_needs_weights_source():
    assert cli.main(["check-equivariance"]) == 2


# ---------------------------------------------------------------------------
# gradcheck


def test_gradcheck_passes(small_cfg, capsys):
    rc = cli.main(["gradcheck", "--config", small_cfg, "--samples", "10", "--seed", "0"])
    assert rc == 0
    assert _last_json(capsys)["worst_rel_err"] < 1e-5


def test_gradcheck_tol_override_can_fail(small_cfg):
    rc = cli.main(
        ["gradcheck", "--config", small_cfg, "--samples", "5", "--tol", "1e-30"]
    )
    assert rc == 1


# ---------------------------------------------------------------------------
# train


def _make_dataset(tmp_path, small_cfg, n=4, seed=5):
    out = tmp_path / "train.jsonl"
    rc = cli.main(
        ["generate-data", "--template", "water", "--n", str(n), "--seed",
         str(seed), "--out", str(out), "--config", small_cfg]
    )
    assert rc == 0
    return out


def test_train_end_to_end_artifacts(tmp_path, small_cfg, capsys):
    ds = _make_dataset(tmp_path, small_cfg)
    out_dir = tmp_path / "run"
    rc = cli.main(
        ["train", "--config", small_cfg, "--data", str(ds), "--out",
         str(out_dir), "--val-n", "1", "--seed", "0"]
    )
    assert rc == 0
    assert (out_dir / "ckpt.last").exists()
    assert (out_dir / "ckpt.best").exists()
    lines = (out_dir / "metrics.jsonl").read_text().strip().splitlines()
    assert len(lines) == 4  # one record per step
    steps = [json.loads(l)["step"] for l in lines]
    assert steps == [1, 2, 3, 4]


def test_train_missing_data_file(tmp_path, small_cfg):
    rc = cli.main(
        ["train", "--config", small_cfg, "--data", str(tmp_path / "nope.jsonl"),
         "--out", str(tmp_path / "run")]
    )
    assert rc == 2


def test_train_accepts_reduce_on_plateau(tmp_path, small_cfg):
    ds = _make_dataset(tmp_path, small_cfg)
    rc = cli.main(
        ["train", "--config", small_cfg, "--data", str(ds), "--out",
         str(tmp_path / "run"), "--val-n", "1", "--scheduler", "reduce_on_plateau"]
    )
    assert rc == 0


def test_train_resume_from_checkpoint(tmp_path, small_cfg):
    ds = _make_dataset(tmp_path, small_cfg)
    first = tmp_path / "first"
    rc = cli.main(
        ["train", "--config", small_cfg, "--data", str(ds), "--out", str(first),
         "--val-n", "1", "--max-steps", "2", "--warmup-steps", "1"]
    )
    assert rc == 0
    resumed = tmp_path / "resumed"
    rc = cli.main(
        ["train", "--config", small_cfg, "--data", str(ds), "--out", str(resumed),
         "--val-n", "1", "--resume", str(first / "ckpt.last")]
    )
    assert rc == 0
    lines = (resumed / "metrics.jsonl").read_text().strip().splitlines()
    assert [json.loads(l)["step"] for l in lines] == [3, 4]


# ---------------------------------------------------------------------------
# eval


def test_eval_teacher_checkpoint_self_consistent(tmp_path, small_cfg, capsys):
    # evaluating the exact teacher weights on teacher-labeled data must give
    # (numerically) zero Hamiltonian error and perfect subspace overlap
    mc = ModelConfig(channels=2, n_interaction_layers=2)
    confs, manifest = data.teacher_generate(mc, seed=7, n_samples=2, template="water")
    ds = tmp_path / "d.jsonl"
    data.save_dataset(ds, confs, manifest)
    model = QHNet(mc)
    store = model.init_params(seed=7)
    ckpt = tmp_path / "teacher.ckpt"
    train.save_checkpoint(ckpt, mc, store, train.AdamState(store), step=0,
                          scheduler_state={}, seed=7)
    assert cli.main(["eval", "--ckpt", str(ckpt), "--data", str(ds)]) == 0
    report = _last_json(capsys)
    assert report["mae_H_microHartree"] < 1e-6  # mae_H below 1e-12 Hartree
    assert report["cos_psi"] > 1.0 - 1e-12


def test_eval_all_orbitals_flag(tmp_path, small_cfg, capsys):
    mc = ModelConfig(channels=2, n_interaction_layers=2)
    confs, manifest = data.teacher_generate(mc, seed=7, n_samples=1, template="water")
    ds = tmp_path / "d.jsonl"
    data.save_dataset(ds, confs, manifest)
    model = QHNet(mc)
    store = model.init_params(seed=1)  # different weights: nonzero error
    ckpt = tmp_path / "s.ckpt"
    train.save_checkpoint(ckpt, mc, store, train.AdamState(store), step=0,
                          scheduler_state={}, seed=1)
    assert cli.main(["eval", "--ckpt", str(ckpt), "--data", str(ds)]) == 0
    occ = _last_json(capsys)
    assert cli.main(["eval", "--ckpt", str(ckpt), "--data", str(ds), "--all-orbitals"]) == 0
    allorb = _last_json(capsys)
    assert occ["mae_eps_microHartree"] != allorb["mae_eps_microHartree"]
    assert occ["mae_H_microHartree"] == allorb["mae_H_microHartree"]


def test_eval_missing_checkpoint(tmp_path):
    rc = cli.main(["eval", "--ckpt", str(tmp_path / "no.ckpt"), "--data", str(tmp_path / "no.jsonl")])
    assert rc == 2
