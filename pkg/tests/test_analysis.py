"""Embeddings, the leave-one-out information bound, and report emission."""

import json
import math

import numpy as np
import pytest
import torch

from condenser.analysis import (
    extract_embeddings,
    emit_report,
    generalization_bound_icb,
    mutual_info_upper_bound,
    read_embeddings,
    write_embeddings,
)
from condenser.errors import ConfigurationError, DataError
from condenser.recover import write_loss_csv


# ---------------------------------------------------------------- embeddings


def test_embeddings_shape_and_duplicates(mini_teacher):
    g = torch.Generator().manual_seed(0)
    x = torch.randn(3, 3, 32, 32, generator=g)
    batch = torch.cat([x, x[:1]])  # row 3 duplicates row 0
    emb = extract_embeddings(mini_teacher, batch, batch_size=2)
    assert emb.ndim == 2 and emb.shape[0] == 4
    assert emb.dtype == np.float32
    assert np.array_equal(emb[3], emb[0])
    assert not np.array_equal(emb[0], emb[1])


def test_embeddings_separate_zero_and_one_inputs(mini_teacher):
    batch = torch.stack([torch.zeros(3, 32, 32), torch.ones(3, 32, 32)])
    emb = extract_embeddings(mini_teacher, batch)
    assert not np.array_equal(emb[0], emb[1])


def test_embeddings_accept_datasets(mini_teacher, mini_val):
    emb = extract_embeddings(mini_teacher, mini_val)
    assert emb.shape[0] == len(mini_val)


def test_embeddings_file_roundtrip(tmp_path):
    emb = np.arange(12, dtype=np.float32).reshape(3, 4)
    path = write_embeddings(tmp_path / "e.bin", emb, source_id="unit")
    back, header = read_embeddings(path)
    assert np.array_equal(back, emb)
    assert header["count"] == 3 and header["dim"] == 4
    assert header["source"] == "unit"


def test_embeddings_file_rejects_corruption(tmp_path):
    emb = np.ones((2, 3), dtype=np.float32)
    path = write_embeddings(tmp_path / "e.bin", emb)
    data = path.read_bytes()
    (tmp_path / "short.bin").write_bytes(data[:-4])
    with pytest.raises(DataError, match="floats"):
        read_embeddings(tmp_path / "short.bin")
    (tmp_path / "magic.bin").write_bytes(b'{"kind": "other"}\n' + data.split(b"\n", 1)[1])
    with pytest.raises(DataError, match="not an embeddings file"):
        read_embeddings(tmp_path / "magic.bin")
    with pytest.raises(ConfigurationError):
        write_embeddings(tmp_path / "bad.bin", np.ones(5, dtype=np.float32))


# ---------------------------------------------------------------- MI bound


def test_mi_bound_is_zero_for_indistinct_densities():
    assert mutual_info_upper_bound(np.full((4, 4), 0.37)) == pytest.approx(0.0, abs=1e-12)


def test_mi_bound_two_sample_hand_case():
    m = [[9.0, 1.0], [1.0, 9.0]]
    assert mutual_info_upper_bound(m) == pytest.approx(math.log(9.0), abs=1e-9)
    assert mutual_info_upper_bound(m, log_base=2.0) == pytest.approx(
        math.log2(9.0), abs=1e-9)


def test_mi_bound_matches_loop_reference():
    rng = np.random.default_rng(0)
    m = rng.uniform(0.1, 5.0, size=(3, 3))
    expected = 0.0
    for i in range(3):
        off = [m[i, j] for j in range(3) if j != i]
        expected += math.log(m[i, i] / (sum(off) / 2.0))
    expected /= 3.0
    assert mutual_info_upper_bound(m) == pytest.approx(expected, abs=1e-9)


def test_mi_bound_is_row_scale_invariant():
    rng = np.random.default_rng(1)
    m = rng.uniform(0.5, 2.0, size=(5, 5))
    scaled = m * rng.uniform(0.1, 10.0, size=(5, 1))
    assert mutual_info_upper_bound(scaled) == pytest.approx(
        mutual_info_upper_bound(m), abs=1e-9)


def test_mi_bound_input_validation():
    with pytest.raises(ValueError, match="square"):
        mutual_info_upper_bound(np.ones((2, 3)))
    with pytest.raises(ValueError, match="2 samples"):
        mutual_info_upper_bound(np.ones((1, 1)))
    with pytest.raises(ValueError, match="positive"):
        mutual_info_upper_bound([[1.0, 0.0], [1.0, 1.0]])
    with pytest.raises(ValueError, match="positive"):
        mutual_info_upper_bound([[1.0, math.inf], [1.0, 1.0]])
    with pytest.raises(ValueError, match="log_base"):
        mutual_info_upper_bound(np.ones((2, 2)), log_base=1.0)


# ---------------------------------------------------------------- ICB


def test_icb_hand_cases():
    assert generalization_bound_icb(0.0, 1.0, 50) == pytest.approx(0.1, abs=1e-9)
    expected = math.sqrt((8.0 + math.log(20.0)) / 1000.0)
    assert generalization_bound_icb(3.0, 0.05, 500) == pytest.approx(expected, abs=1e-9)
    assert expected == pytest.approx(0.10486, abs=5e-6)


def test_icb_monotonicity():
    base = generalization_bound_icb(2.0, 0.1, 100)
    assert generalization_bound_icb(3.0, 0.1, 100) > base
    assert generalization_bound_icb(2.0, 0.01, 100) > base
    assert generalization_bound_icb(2.0, 0.1, 400) < base


def test_icb_input_validation():
    with pytest.raises(ValueError, match="info_bits"):
        generalization_bound_icb(-1.0, 0.5, 10)
    with pytest.raises(ValueError, match="delta"):
        generalization_bound_icb(1.0, 0.0, 10)
    with pytest.raises(ValueError, match="delta"):
        generalization_bound_icb(1.0, 1.5, 10)
    with pytest.raises(ValueError, match="n_train"):
        generalization_bound_icb(1.0, 0.5, 0)


# ---------------------------------------------------------------- report


def stage_csvs(tmp_path):
    recover = tmp_path / "loss.csv"
    write_loss_csv(recover, [(0, i, 2.0 - 0.1 * i, 0.5, 0.0, 0.0, 2.5 - 0.1 * i)
                             for i in range(5)])
    eval_csv = tmp_path / "report_eval.csv"
    eval_csv.write_text(
        "epoch,train_loss,val_top1\n0,1.5,0.4\n1,1.2,0.55\n2,1.1,0.5\n")
    continual = tmp_path / "curve.csv"
    continual.write_text(
        "step,classes_seen,top1,train_loss\n1,2,0.9,0.3\n2,4,0.7,0.4\n")
    return recover, eval_csv, continual


def test_report_merges_all_stages(tmp_path):
    recover, eval_csv, continual = stage_csvs(tmp_path)
    out = tmp_path / "report"
    manifest = emit_report(out, recover_csv=recover, eval_csv=eval_csv,
                           continual_csv=continual)
    assert manifest["summary"]["recover_final_total"] == pytest.approx(2.1)
    assert manifest["summary"]["eval_final_top1"] == 0.5
    assert manifest["summary"]["eval_best_top1"] == 0.55
    assert manifest["summary"]["continual_final_top1"] == 0.7
    assert set(manifest["inputs"]) == {"recover", "eval", "continual"}
    for fig in ("recover_loss.png", "student_training.png", "continual_accuracy.png"):
        assert (out / fig).stat().st_size > 0
    lines = (out / "report.csv").read_text().splitlines()
    assert lines[0] == "stage,series,step,value"
    stages = {line.split(",")[0] for line in lines[1:]}
    assert stages == {"recover", "eval", "continual"}
    on_disk = json.loads((out / "report.json").read_text())
    assert on_disk == manifest


def test_report_is_idempotent(tmp_path):
    recover, eval_csv, continual = stage_csvs(tmp_path)
    out = tmp_path / "report"
    emit_report(out, recover_csv=recover, eval_csv=eval_csv, continual_csv=continual)
    first = {p.name: p.read_bytes() for p in out.iterdir()}
    emit_report(out, recover_csv=recover, eval_csv=eval_csv, continual_csv=continual)
    second = {p.name: p.read_bytes() for p in out.iterdir()}
    assert first == second


def test_report_with_single_stage(tmp_path):
    recover, _, _ = stage_csvs(tmp_path)
    manifest = emit_report(tmp_path / "r", recover_csv=recover)
    assert set(manifest["inputs"]) == {"recover"}
    assert "eval_final_top1" not in manifest["summary"]
    assert not (tmp_path / "r" / "student_training.png").exists()


def test_report_input_errors(tmp_path):
    with pytest.raises(ConfigurationError, match="at least one"):
        emit_report(tmp_path / "r")
    with pytest.raises(DataError, match="not found"):
        emit_report(tmp_path / "r", recover_csv=tmp_path / "missing.csv")
