"""Run the squeeze / recover / relabel / eval / continual stages end to end.

Each experiment directory holds the resolved config, one subdirectory
per stage, and a manifest recording per-stage status, wall time, peak
RSS, and artifact checksums. Stages are write-once: a completed stage is
never re-executed, and resuming continues from the first incomplete one.
"""

from __future__ import annotations

import json
import os
import resource
import time
from dataclasses import replace
from pathlib import Path

import torch

from . import config as config_mod
from .config import STAGE_ORDER, ExperimentConfig
from .crops import CropParams
from .continual import class_incremental_run
from .data import load_condensed, load_dataset
from .errors import ConfigurationError, IntegrityError
from .evaluate import EvalConfig, train_student
from .hashing import sha256_file
from .models import BackboneSpec, load_checkpoint, save_checkpoint
from .recover import recover
from .relabel import load_archive, relabel, save_archive
from .squeeze import squeeze_train

MANIFEST_NAME = "manifest.json"
CONFIG_NAME = "config.ini"
MANIFEST_VERSION = 1


def _peak_rss_kb() -> int:
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss


def _write_manifest(exp_dir: Path, manifest: dict):
    tmp = exp_dir / (MANIFEST_NAME + ".tmp")
    tmp.write_text(json.dumps(manifest, sort_keys=True, indent=1))
    os.replace(tmp, exp_dir / MANIFEST_NAME)


def _read_manifest(exp_dir: Path) -> dict:
    path = exp_dir / MANIFEST_NAME
    if not path.is_file():
        raise ConfigurationError(f"no experiment manifest under {exp_dir}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise IntegrityError(
            f"experiment manifest {path} is corrupt ({e}); refusing to resume"
        ) from e
    if manifest.get("version") != MANIFEST_VERSION:
        raise IntegrityError(f"manifest version {manifest.get('version')} not supported")
    return manifest


def _checksum_artifacts(exp_dir: Path, artifacts: dict) -> dict:
    out = {}
    for name, rel in artifacts.items():
        path = exp_dir / rel
        if path.is_dir():
            # directory artifacts are identified by their manifest + blob
            parts = sorted(p for p in path.rglob("*") if p.is_file() and "previews" not in p.parts)
            digest = {str(p.relative_to(exp_dir)): sha256_file(p) for p in parts}
            out[name] = {"path": rel, "sha256": digest}
        else:
            out[name] = {"path": rel, "sha256": sha256_file(path)}
    return out


def _dataset_cache(config: ExperimentConfig, cache: dict, split: str):
    if split not in cache:
        ds = load_dataset(config.data_root, config.dataset, split)
        if ds.resolution != config.resolution:
            raise ConfigurationError(
                f"{split} split is {ds.resolution}px but config declares "
                f"{config.resolution}px"
            )
        cache[split] = ds
    return cache[split]


def _teacher_checkpoint(config: ExperimentConfig, exp_dir: Path, manifest: dict):
    if config.provided_checkpoint:
        return load_checkpoint(config.provided_checkpoint)
    rec = manifest["stages"].get("squeeze", {})
    if rec.get("status") != "completed":
        raise ConfigurationError(
            "no squeeze checkpoint available; run the squeeze stage or provide one"
        )
    return load_checkpoint(exp_dir / rec["artifacts"]["checkpoint"]["path"])


def _condensed_set(config: ExperimentConfig, exp_dir: Path, manifest: dict):
    if config.provided_condensed:
        return load_condensed(config.provided_condensed)
    rec = manifest["stages"].get("recover", {})
    if rec.get("status") != "completed":
        raise ConfigurationError(
            "no condensed set available; run the recover stage or provide one"
        )
    return load_condensed(exp_dir / rec["artifacts"]["condensed"]["path"])


def _label_archive(config: ExperimentConfig, exp_dir: Path, manifest: dict):
    if config.provided_archive:
        return load_archive(config.provided_archive)
    rec = manifest["stages"].get("relabel", {})
    if rec.get("status") != "completed":
        raise ConfigurationError(
            "no label archive available; run the relabel stage or provide one"
        )
    return load_archive(exp_dir / rec["artifacts"]["archive"]["path"])


def _stage_squeeze(config, exp_dir, manifest, cache):
    train = _dataset_cache(config, cache, "train")
    val = _dataset_cache(config, cache, "val")
    spec = BackboneSpec(
        arch_id=config.squeeze_arch,
        input_resolution=config.resolution,
        num_classes=train.num_classes,
    )
    ckpt = squeeze_train(train, val, spec, config.squeeze)
    out = exp_dir / "squeeze"
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, out / "checkpoint.ckpt")
    return (
        {"checkpoint": "squeeze/checkpoint.ckpt"},
        {"val_top1": ckpt.meta["val_top1"], "final_train_loss": ckpt.meta["final_train_loss"]},
    )


def _stage_recover(config, exp_dir, manifest, cache):
    ckpt = _teacher_checkpoint(config, exp_dir, manifest)
    out = exp_dir / "recover"
    start = time.perf_counter()
    cd = recover(ckpt, config.recover, out_dir=out)
    elapsed = time.perf_counter() - start
    per_image_ms = 1000.0 * elapsed / max(1, len(cd))
    return (
        {"condensed": "recover/condensed", "loss_csv": "recover/loss.csv"},
        {
            "final_total_mean": sum(cd.provenance["final_totals"]) / len(cd.provenance["final_totals"]),
            "images": len(cd),
            "per_image_ms": per_image_ms,
        },
    )


def _stage_relabel(config, exp_dir, manifest, cache):
    cd = _condensed_set(config, exp_dir, manifest)
    teacher = _teacher_checkpoint(config, exp_dir, manifest)
    params = CropParams(
        output_size=config.resolution,
        scale_range=config.relabel.crop_scale_range,
        ratio_range=config.relabel.crop_ratio_range,
        hflip_prob=config.relabel.hflip_prob,
    )
    archive = relabel(
        cd, teacher, tau=config.relabel.tau, epochs=config.relabel.epochs,
        crop_params=params, seed=config.seed,
    )
    out = exp_dir / "relabel"
    out.mkdir(parents=True, exist_ok=True)
    path = out / "archive.zip"
    save_archive(
        archive, path,
        precision=config.relabel.precision,
        topk=config.relabel.topk or None,
    )
    return (
        {"archive": "relabel/archive.zip"},
        {
            "size_bytes": os.path.getsize(path),
            "labels": archive.num_images * archive.epochs,
            "temperature": config.relabel.tau,
        },
    )


def _eval_config(config: ExperimentConfig, num_classes: int) -> EvalConfig:
    spec = BackboneSpec(
        arch_id=config.eval.arch,
        input_resolution=config.resolution,
        num_classes=num_classes,
    )
    return EvalConfig(
        student=spec,
        epochs=config.eval.epochs,
        optimizer=config.eval.optimizer,
        lr=config.eval.lr,
        momentum=config.eval.momentum,
        betas=config.eval.betas,
        weight_decay=config.eval.weight_decay,
        batch_size=config.eval.batch_size,
        cutmix_prob=config.eval.cutmix_prob,
        cutmix_beta=config.eval.cutmix_beta,
        seed=config.seed,
    )


def _write_history_csv(path, history):
    import csv

    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(("epoch", "train_loss", "val_top1"))
        for row in history:
            writer.writerow(
                (row["epoch"], repr(row["train_loss"]),
                 repr(row["val_top1"]) if "val_top1" in row else "")
            )


def _stage_eval(config, exp_dir, manifest, cache):
    cd = _condensed_set(config, exp_dir, manifest)
    archive = _label_archive(config, exp_dir, manifest)
    val = _dataset_cache(config, cache, "val")
    student_cfg = _eval_config(config, cd.num_classes)
    student, history = train_student(cd, archive, student_cfg, val=val)
    out = exp_dir / "eval"
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(student, out / "student.ckpt")
    _write_history_csv(out / "report.csv", history)
    return (
        {"student": "eval/student.ckpt", "report_csv": "eval/report.csv"},
        {"final_val_top1": history[-1]["val_top1"], "epochs": config.eval.epochs},
    )


def _stage_continual(config, exp_dir, manifest, cache):
    cd = _condensed_set(config, exp_dir, manifest)
    archive = _label_archive(config, exp_dir, manifest)
    val = _dataset_cache(config, cache, "val")
    student_cfg = _eval_config(config, cd.num_classes)
    if config.continual.epochs:
        student_cfg = replace(student_cfg, epochs=config.continual.epochs)
    curve = class_incremental_run(
        cd, archive, config.continual.steps, student_cfg, val,
        seed=config.seed,
        classes_per_step=config.continual.classes_per_step or None,
        memory_per_class=config.continual.memory_per_class or None,
    )
    out = exp_dir / "continual"
    out.mkdir(parents=True, exist_ok=True)
    import csv

    with open(out / "curve.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(("step", "classes_seen", "top1", "train_loss"))
        for row in curve:
            writer.writerow(
                (row["step"], row["classes_seen"], repr(row["top1"]), repr(row["train_loss"]))
            )
    return (
        {"curve_csv": "continual/curve.csv"},
        {"final_top1": curve[-1]["top1"], "steps": config.continual.steps},
    )


_STAGE_FNS = {
    "squeeze": _stage_squeeze,
    "recover": _stage_recover,
    "relabel": _stage_relabel,
    "eval": _stage_eval,
    "continual": _stage_continual,
}

_PROVIDED = {
    "squeeze": "provided_checkpoint",
    "recover": "provided_condensed",
    "relabel": "provided_archive",
}


def _execute(config: ExperimentConfig, exp_dir: Path, manifest: dict, stages):
    cache: dict = {}
    torch.manual_seed(config.seed)
    for stage in stages:
        rec = manifest["stages"].get(stage, {})
        if rec.get("status") == "completed":
            continue
        provided_attr = _PROVIDED.get(stage)
        if provided_attr and getattr(config, provided_attr):
            manifest["stages"][stage] = {
                "status": "skipped",
                "provided": getattr(config, provided_attr),
            }
            _write_manifest(exp_dir, manifest)
            continue
        start = time.perf_counter()
        try:
            artifacts, metrics = _STAGE_FNS[stage](config, exp_dir, manifest, cache)
        except Exception as e:
            manifest["stages"][stage] = {
                "status": "failed",
                "error": f"{type(e).__name__}: {e}",
            }
            _write_manifest(exp_dir, manifest)
            raise
        manifest["stages"][stage] = {
            "status": "completed",
            "wall_time_s": time.perf_counter() - start,
            "peak_rss_kb": _peak_rss_kb(),
            "artifacts": _checksum_artifacts(exp_dir, artifacts),
            "metrics": metrics,
        }
        _write_manifest(exp_dir, manifest)
    manifest["status"] = "completed"
    _write_manifest(exp_dir, manifest)
    return exp_dir


def run_pipeline(config: ExperimentConfig, stages=None, output_root=None) -> Path:
    """Execute the configured stages into a fresh experiment directory.

    ``output_root`` (or the CONDENSER_OUTPUT_ROOT environment variable)
    overrides the config's output root. Refuses a directory that already
    holds a manifest; that is what resume is for.
    """
    config.validate()
    root = output_root or os.environ.get("CONDENSER_OUTPUT_ROOT") or config.output_root
    exp_dir = Path(root) / config.name
    if (exp_dir / MANIFEST_NAME).exists():
        raise ConfigurationError(
            f"{exp_dir} already holds an experiment; use resume to continue it"
        )
    exp_dir.mkdir(parents=True, exist_ok=True)
    run_stages = tuple(stages) if stages else config.stages
    bad = [s for s in run_stages if s not in config.stages]
    if bad:
        raise ConfigurationError(f"stages {bad} not in configured stages {config.stages}")
    config_mod.to_ini(config, exp_dir / CONFIG_NAME)
    manifest = {
        "version": MANIFEST_VERSION,
        "name": config.name,
        "config_hash": config.config_hash(),
        "seed": config.seed,
        "status": "running",
        "stages": {},
    }
    _write_manifest(exp_dir, manifest)
    return _execute(config, exp_dir, manifest, run_stages)


def resume(exp_dir) -> Path:
    """Continue an interrupted experiment from its first incomplete stage."""
    exp_dir = Path(exp_dir)
    manifest = _read_manifest(exp_dir)
    config_path = exp_dir / CONFIG_NAME
    if not config_path.is_file():
        raise ConfigurationError(f"missing {CONFIG_NAME} under {exp_dir}")
    config = config_mod.from_ini(config_path)
    if manifest.get("config_hash") != config.config_hash():
        raise IntegrityError(
            f"stored config under {exp_dir} no longer matches the manifest hash"
        )
    for stage, rec in manifest["stages"].items():
        if rec.get("status") != "completed":
            continue
        for art in rec.get("artifacts", {}).values():
            path = exp_dir / art["path"]
            if isinstance(art["sha256"], dict):
                for rel, digest in art["sha256"].items():
                    f = exp_dir / rel
                    if not f.is_file() or sha256_file(f) != digest:
                        raise IntegrityError(
                            f"artifact {rel} of completed stage {stage!r} is "
                            f"missing or modified; refusing to resume"
                        )
            elif not path.is_file() or sha256_file(path) != art["sha256"]:
                raise IntegrityError(
                    f"artifact {art['path']} of completed stage {stage!r} is "
                    f"missing or modified; refusing to resume"
                )
    return _execute(config, exp_dir, manifest, config.stages)


def inspect_experiment(exp_dir) -> str:
    """Human-readable status summary of an experiment directory."""
    exp_dir = Path(exp_dir)
    manifest = _read_manifest(exp_dir)
    lines = [
        f"experiment: {manifest.get('name')}",
        f"directory:  {exp_dir}",
        f"status:     {manifest.get('status')}",
        f"config:     {manifest.get('config_hash', '')[:16]}",
        "",
        f"{'stage':<10} {'status':<10} {'wall_s':>8}  key metrics",
    ]
    for stage in STAGE_ORDER:
        rec = manifest["stages"].get(stage)
        if rec is None:
            continue
        wall = rec.get("wall_time_s")
        wall_s = f"{wall:8.1f}" if wall is not None else f"{'-':>8}"
        metrics = rec.get("metrics", {})
        shown = ", ".join(
            f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}"
            for k, v in sorted(metrics.items())
        )
        if rec.get("status") == "skipped":
            shown = f"provided: {rec.get('provided')}"
        if rec.get("status") == "failed":
            shown = rec.get("error", "")
        lines.append(f"{stage:<10} {rec.get('status', '?'):<10} {wall_s}  {shown}")
    sizes = []
    for stage in STAGE_ORDER:
        rec = manifest["stages"].get(stage) or {}
        for name, art in rec.get("artifacts", {}).items():
            path = exp_dir / art["path"]
            if path.is_file():
                sizes.append(f"  {art['path']}: {os.path.getsize(path)} bytes")
            elif path.is_dir():
                total = sum(p.stat().st_size for p in path.rglob("*") if p.is_file())
                sizes.append(f"  {art['path']}/: {total} bytes")
    if sizes:
        lines.append("")
        lines.append("artifacts:")
        lines.extend(sizes)
    return "\n".join(lines)
