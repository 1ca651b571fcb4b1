"""Command-line driver: every subcommand against a tiny dataset."""

import numpy as np
import pytest

from conftest import small_experiment_config
from condenser.cli import _parse_classes, main
from condenser.config import to_ini
from condenser.data import make_toy_dataset
from condenser.models import save_checkpoint
from condenser.relabel import load_archive


def run_cli(capsys, *argv):
    rc = main(list(argv))
    captured = capsys.readouterr()
    return rc, captured.out, captured.err


def test_parse_classes():
    assert _parse_classes("0-3,7") == [0, 1, 2, 3, 7]
    assert _parse_classes("5") == [5]
    assert _parse_classes("1-2, 4-5") == [1, 2, 4, 5]
    with pytest.raises(ValueError):
        _parse_classes("a-b")


def test_usage_errors_exit_with_one(capsys):
    with pytest.raises(SystemExit) as e:
        main([])
    assert e.value.code == 1
    with pytest.raises(SystemExit) as e:
        main(["recover", "--no-such-flag"])
    assert e.value.code == 1


def test_icb_subcommand(capsys):
    rc, out, _ = run_cli(capsys, "analyze", "icb", "--info-bits", "0",
                         "--delta", "1.0", "--n-train", "50")
    assert rc == 0
    assert "generalization bound: 0.100000" in out


def test_mi_subcommand_nats_and_bits(capsys, tmp_path):
    path = tmp_path / "densities.csv"
    np.savetxt(path, np.array([[9.0, 1.0], [1.0, 9.0]]), delimiter=",")
    rc, out, _ = run_cli(capsys, "analyze", "mi", "--densities", str(path))
    assert rc == 0
    assert "mutual information upper bound: 2.197225 nats" in out
    rc, out, _ = run_cli(capsys, "analyze", "mi", "--densities", str(path), "--bits")
    assert rc == 0
    assert "3.169925 bits" in out


def test_missing_inputs_exit_with_one(capsys, tmp_path):
    rc, _, err = run_cli(capsys, "analyze", "mi",
                         "--densities", str(tmp_path / "none.csv"))
    assert rc == 1
    assert "error:" in err
    rc, _, err = run_cli(capsys, "relabel", "--condensed", str(tmp_path / "no"),
                         "--teacher", str(tmp_path / "no.ckpt"),
                         "--tau", "20", "--epochs", "2", "--out", str(tmp_path / "a.zip"))
    assert rc == 1
    assert "error:" in err


@pytest.fixture(scope="module")
def cli_root(tmp_path_factory):
    return make_toy_dataset(
        tmp_path_factory.mktemp("toy-cli"),
        num_classes=2, train_per_class=10, val_per_class=4, resolution=32, seed=5,
    )


@pytest.fixture(scope="module")
def cli_artifacts(cli_root, tmp_path_factory):
    """squeeze -> recover -> relabel chained through the real CLI."""
    work = tmp_path_factory.mktemp("cli-chain")
    ckpt = work / "teacher.ckpt"
    rc = main(["squeeze", "--data", str(cli_root), "--dataset-name", "toy",
               "--out", str(ckpt), "--epochs", "2", "--batch-size", "20",
               "--lr", "0.05"])
    assert rc == 0
    recover_dir = work / "recover"
    rc = main(["recover", "--ckpt", str(ckpt), "--out", str(recover_dir),
               "--ipc", "1", "--iters", "5", "--batch-size", "4",
               "--alpha-bn", "1.0", "--lr", "0.1", "--classes", "0-1"])
    assert rc == 0
    archive = work / "labels.zip"
    rc = main(["relabel", "--condensed", str(recover_dir / "condensed"),
               "--teacher", str(ckpt), "--tau", "20", "--epochs", "3",
               "--precision", "float32", "--out", str(archive)])
    assert rc == 0
    return {"root": work, "ckpt": ckpt, "recover": recover_dir, "archive": archive}


def test_chain_artifacts_exist(cli_artifacts, capsys):
    assert (cli_artifacts["recover"] / "condensed" / "images.bin").is_file()
    assert (cli_artifacts["recover"] / "loss.csv").is_file()
    archive = load_archive(cli_artifacts["archive"])
    assert archive.num_images == 2 and archive.epochs == 3


def test_eval_and_continual_subcommands(cli_artifacts, cli_root, capsys, tmp_path):
    report = tmp_path / "eval.csv"
    student = tmp_path / "student.ckpt"
    rc, out, _ = run_cli(
        capsys, "eval", "--condensed", str(cli_artifacts["recover"] / "condensed"),
        "--archive", str(cli_artifacts["archive"]), "--epochs", "2",
        "--batch-size", "2", "--data", str(cli_root), "--dataset-name", "toy",
        "--report", str(report), "--save-student", str(student))
    assert rc == 0
    assert "final val top-1:" in out
    assert report.read_text().splitlines()[0] == "epoch,train_loss,val_top1"
    assert student.is_file()

    curve = tmp_path / "curve.csv"
    rc, out, _ = run_cli(
        capsys, "continual", "--condensed", str(cli_artifacts["recover"] / "condensed"),
        "--archive", str(cli_artifacts["archive"]), "--steps", "2", "--epochs", "2",
        "--batch-size", "2", "--data", str(cli_root), "--dataset-name", "toy",
        "--report", str(curve))
    assert rc == 0
    assert "final seen-class top-1:" in out
    assert len(curve.read_text().splitlines()) == 3


def test_eval_without_val_split_flag(cli_artifacts, capsys, tmp_path):
    report = tmp_path / "eval.csv"
    rc, out, _ = run_cli(
        capsys, "eval", "--condensed", str(cli_artifacts["recover"] / "condensed"),
        "--archive", str(cli_artifacts["archive"]), "--epochs", "1",
        "--batch-size", "2", "--report", str(report))
    assert rc == 0
    assert "top-1" not in out
    assert "wrote per-epoch report" in out


def test_embeddings_and_report_subcommands(cli_artifacts, capsys, tmp_path):
    emb = tmp_path / "emb.bin"
    rc, out, _ = run_cli(
        capsys, "analyze", "embeddings", "--ckpt", str(cli_artifacts["ckpt"]),
        "--condensed", str(cli_artifacts["recover"] / "condensed"), "--out", str(emb))
    assert rc == 0
    assert "wrote 2x" in out
    rc, _, err = run_cli(
        capsys, "analyze", "embeddings", "--ckpt", str(cli_artifacts["ckpt"]),
        "--out", str(emb))
    assert rc == 1
    assert "exactly one" in err

    out_dir = tmp_path / "report"
    rc, out, _ = run_cli(
        capsys, "analyze", "report",
        "--recover-csv", str(cli_artifacts["recover"] / "loss.csv"),
        "--out", str(out_dir))
    assert rc == 0
    assert (out_dir / "recover_loss.png").is_file()
    assert "1 inputs" in out


def test_run_resume_inspect_roundtrip(cli_root, capsys, tmp_path):
    cfg = small_experiment_config("cli-run", cli_root, tmp_path / "runs",
                                  stages=("squeeze", "recover"))
    ini = to_ini(cfg, tmp_path / "exp.ini")
    rc, out, _ = run_cli(capsys, "run", "--config", str(ini),
                         "--stages", "squeeze")
    assert rc == 0
    assert "pipeline completed under" in out
    exp_dir = tmp_path / "runs" / "cli-run"
    rc, out, _ = run_cli(capsys, "resume", str(exp_dir))
    assert rc == 0
    assert "is complete" in out
    rc, out, _ = run_cli(capsys, "inspect", str(exp_dir))
    assert rc == 0
    assert "experiment: cli-run" in out
    assert "squeeze" in out
    rc, _, err = run_cli(capsys, "inspect", str(tmp_path / "empty"))
    assert rc == 1
    assert "no experiment manifest" in err


def test_divergence_exits_with_two(mini_teacher, capsys, tmp_path):
    state = {k: v.clone() for k, v in mini_teacher.state.items()}
    next(v for v in state.values() if v.dtype.is_floating_point)[...] = float("nan")
    bad = type(mini_teacher)(spec=mini_teacher.spec, state=state,
                             bn_stats=mini_teacher.bn_stats, meta=dict(mini_teacher.meta))
    ckpt = tmp_path / "bad.ckpt"
    save_checkpoint(bad, ckpt)
    rc, _, err = run_cli(capsys, "recover", "--ckpt", str(ckpt),
                         "--out", str(tmp_path / "out"), "--ipc", "1",
                         "--iters", "3", "--batch-size", "4")
    assert rc == 2
    assert "runtime failure" in err
    assert "diagnostics" in err
