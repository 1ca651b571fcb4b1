"""Information-theoretic diagnostics and the experiment report writer.

The mutual-information bound works on a matrix of conditional densities
p(d_i | x_j) supplied by the caller; estimating those densities is out
of scope here. The report writer merges per-stage CSVs into one tidy
table plus a JSON manifest and renders one PNG figure per stage next to
them.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import numpy as np
import torch

from .data import LabeledDataset
from .errors import ConfigurationError, DataError
from .hashing import sha256_file
from .models import Checkpoint

EMBEDDINGS_MAGIC = "condenser-embeddings"


def extract_embeddings(model, images, batch_size: int = 256) -> np.ndarray:
    """Penultimate-layer features for a stack of images, as float32 rows."""
    if isinstance(model, Checkpoint):
        model = model.build_model()
    if isinstance(images, LabeledDataset):
        images = images.images
    model.eval()
    dtype = next(model.parameters()).dtype
    chunks = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            feats = model.features(images[start : start + batch_size].to(dtype))
            chunks.append(feats.to(torch.float32).numpy())
    return np.concatenate(chunks, axis=0)


def write_embeddings(path, embeddings: np.ndarray, source_id: str = "") -> Path:
    """Binary embeddings file: one JSON header line, then raw float32 rows."""
    embeddings = np.ascontiguousarray(embeddings, dtype="<f4")
    if embeddings.ndim != 2:
        raise ConfigurationError("embeddings must be a 2-d array")
    header = {
        "kind": EMBEDDINGS_MAGIC,
        "count": int(embeddings.shape[0]),
        "dim": int(embeddings.shape[1]),
        "dtype": "float32_le",
        "source": source_id,
    }
    path = Path(path)
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        f.write(embeddings.tobytes())
    return path


def read_embeddings(path):
    with open(path, "rb") as f:
        header_line = f.readline()
        payload = f.read()
    try:
        header = json.loads(header_line)
    except json.JSONDecodeError as e:
        raise DataError(f"{path} is not an embeddings file: {e}") from e
    if header.get("kind") != EMBEDDINGS_MAGIC:
        raise DataError(f"{path} is not an embeddings file")
    count, dim = header["count"], header["dim"]
    data = np.frombuffer(payload, dtype="<f4")
    if data.size != count * dim:
        raise DataError(
            f"{path}: payload holds {data.size} floats, header says {count * dim}"
        )
    return data.reshape(count, dim).copy(), header


def mutual_info_upper_bound(conditional_densities, log_base: float = math.e) -> float:
    """Leave-one-out bound on I(X; D) from a density matrix.

    ``conditional_densities[i, j]`` is p(d_i | x_j). For each sample the
    diagonal density is compared against the mean off-diagonal density
    of its row; the bound is the average log ratio. The default is nats;
    pass ``log_base=2.0`` for bits. Rescaling any row by a positive
    constant leaves the value unchanged.
    """
    m = np.asarray(conditional_densities, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"density matrix must be square, got shape {m.shape}")
    n = m.shape[0]
    if n < 2:
        raise ValueError("need at least 2 samples for a leave-one-out bound")
    if not np.all(np.isfinite(m)) or np.any(m <= 0):
        raise ValueError("conditional densities must be finite and strictly positive")
    if log_base <= 1.0:
        raise ValueError("log_base must exceed 1")
    off_sum = m.sum(axis=1) - np.diag(m)
    ratios = np.log(np.diag(m) / (off_sum / (n - 1)))
    return float(ratios.mean() / math.log(log_base))


def generalization_bound_icb(
    info_bits: float, delta: float, n_train: int
) -> float:
    """Information-compression bound on the generalization gap.

    sqrt((2**I + ln(1/delta)) / (2 * n_train)): the information term is
    exponentiated base 2, so ``info_bits`` must be in bits; the
    confidence term uses the natural log. Convert nats with
    ``nats / ln 2`` before calling.
    """
    if info_bits < 0 or not math.isfinite(info_bits):
        raise ValueError("info_bits must be finite and non-negative")
    if not (0.0 < delta <= 1.0):
        raise ValueError("delta must lie in (0, 1]")
    if n_train < 1:
        raise ValueError("n_train must be >= 1")
    return math.sqrt((2.0 ** info_bits + math.log(1.0 / delta)) / (2.0 * n_train))


def _read_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _float_or_none(value):
    if value in (None, ""):
        return None
    return float(value)


def _plot_recover(rows, out_path):
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    iters = [int(r["iter"]) for r in rows]
    for key in ("ce", "r_bn", "r_tv", "r_l2", "total"):
        ax.plot(iters, [float(r[key]) for r in rows], label=key, linewidth=1.0)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    ax.set_title("recovery loss terms")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def _plot_eval(rows, out_path):
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = [int(r["epoch"]) for r in rows]
    ax.plot(epochs, [float(r["train_loss"]) for r in rows], label="train loss")
    acc = [_float_or_none(r.get("val_top1")) for r in rows]
    if any(a is not None for a in acc):
        ax2 = ax.twinx()
        ax2.plot(epochs, [a if a is not None else float("nan") for a in acc],
                 color="tab:orange", label="val top-1")
        ax2.set_ylabel("val top-1")
    ax.set_xlabel("epoch")
    ax.set_ylabel("train loss")
    ax.set_title("student training")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def _plot_continual(rows, out_path):
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(
        [int(r["step"]) for r in rows],
        [float(r["top1"]) for r in rows],
        marker="o",
    )
    ax.set_xlabel("step")
    ax.set_ylabel("top-1 on seen classes")
    ax.set_ylim(0.0, 1.0)
    ax.set_title("class-incremental accuracy")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def emit_report(
    out_dir,
    recover_csv=None,
    eval_csv=None,
    continual_csv=None,
) -> dict:
    """Merge stage CSVs into report.csv + report.json and render figures.

    At least one input is required; a named input that does not exist is
    an error rather than a silent skip. Re-running with the same inputs
    rewrites identical report files.
    """
    sources = {
        "recover": recover_csv,
        "eval": eval_csv,
        "continual": continual_csv,
    }
    sources = {k: Path(v) for k, v in sources.items() if v is not None}
    if not sources:
        raise ConfigurationError("emit_report needs at least one stage CSV")
    for name, p in sources.items():
        if not p.is_file():
            raise DataError(f"report input for {name!r} not found: {p}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    merged = []
    manifest = {"kind": "report", "inputs": {}, "summary": {}, "figures": {}}
    for name, p in sorted(sources.items()):
        rows = _read_csv(p)
        manifest["inputs"][name] = {
            "path": str(p),
            "sha256": sha256_file(p),
            "rows": len(rows),
        }
        if name == "recover":
            for r in rows:
                for key in ("ce", "r_bn", "r_tv", "r_l2", "total"):
                    merged.append((name, key, int(r["iter"]), float(r[key])))
            if rows:
                manifest["summary"]["recover_final_total"] = float(rows[-1]["total"])
            fig_path = out_dir / "recover_loss.png"
            _plot_recover(rows, fig_path)
            manifest["figures"][name] = fig_path.name
        elif name == "eval":
            for r in rows:
                merged.append((name, "train_loss", int(r["epoch"]), float(r["train_loss"])))
                acc = _float_or_none(r.get("val_top1"))
                if acc is not None:
                    merged.append((name, "val_top1", int(r["epoch"]), acc))
            accs = [_float_or_none(r.get("val_top1")) for r in rows]
            accs = [a for a in accs if a is not None]
            if accs:
                manifest["summary"]["eval_final_top1"] = accs[-1]
                manifest["summary"]["eval_best_top1"] = max(accs)
            fig_path = out_dir / "student_training.png"
            _plot_eval(rows, fig_path)
            manifest["figures"][name] = fig_path.name
        else:
            for r in rows:
                merged.append((name, "top1", int(r["step"]), float(r["top1"])))
            if rows:
                manifest["summary"]["continual_final_top1"] = float(rows[-1]["top1"])
            fig_path = out_dir / "continual_accuracy.png"
            _plot_continual(rows, fig_path)
            manifest["figures"][name] = fig_path.name
    with open(out_dir / "report.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(("stage", "series", "step", "value"))
        for row in merged:
            writer.writerow([row[0], row[1], row[2], repr(row[3])])
    (out_dir / "report.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return manifest
