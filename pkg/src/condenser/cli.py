"""Command-line interface.

One subcommand per stage plus pipeline orchestration and analysis
helpers. Exit codes: 0 on success, 1 for configuration/validation
problems (including bad arguments and unreadable artifacts), 2 for
runtime failures such as divergence.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis, config as config_mod, pipeline
from .crops import CropParams
from .continual import class_incremental_run
from .data import load_condensed, load_dataset
from .errors import CondenserError, ConfigurationError, DataError, DivergenceError, IntegrityError
from .evaluate import EvalConfig, train_student
from .models import BackboneSpec, load_checkpoint, save_checkpoint
from .recover import RecoverConfig, recover
from .relabel import load_archive, relabel, save_archive
from .squeeze import SqueezeConfig, squeeze_train


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; remap to the validation code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _parse_aug(value: str) -> tuple:
    tokens = [t.strip() for t in value.split(",") if t.strip()]
    if tokens == ["none"] or not tokens:
        return ()
    return tuple(tokens)


def _parse_classes(value: str) -> list[int]:
    """Accept '0-9' ranges and comma lists: '0-4,7,9'."""
    out = []
    for part in value.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return out


def build_parser() -> _Parser:
    parser = _Parser(prog="condenser", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("squeeze", parents=[], help="train a compression model",
                       description="Train a backbone on the full dataset and save it as a checkpoint.")
    p.add_argument("--data", required=True, help="dataset root (folder tree or npz splits)")
    p.add_argument("--dataset-name", default="default", help="normalization registry key")
    p.add_argument("--arch", default="convnet4", choices=config_mod.ARCH_CHOICES)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--aug", default="none", help="none or comma list of "
                   "random_resized_crop,mixup,cutmix")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint path to write")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--optimizer", default=None, choices=("sgd", "adamw"))
    p.add_argument("--weight-decay", type=float, default=None)

    p = sub.add_parser("recover", help="synthesize a condensed set from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--ipc", type=int, default=10, help="images per class")
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--alpha-bn", type=float, default=None)
    p.add_argument("--alpha-tv", type=float, default=0.0)
    p.add_argument("--alpha-l2", type=float, default=0.0)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=100)
    p.add_argument("--classes", default=None, help="e.g. '0-9' or '0,3,5' (default: all)")
    p.add_argument("--clamp", action="store_true", help="clamp pixels to the raw [0,1] range")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("relabel", help="generate crop-level soft labels")
    p.add_argument("--condensed", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--tau", type=float, default=20.0, help="softmax temperature")
    p.add_argument("--epochs", type=int, required=True, help="training epochs to cover")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--precision", default="float16", choices=("float16", "float32"))
    p.add_argument("--topk", type=int, default=None, help="store only the k largest probs")

    p = sub.add_parser("eval", help="train a student on a condensed set")
    p.add_argument("--condensed", required=True)
    p.add_argument("--archive", required=True)
    p.add_argument("--student", default="convnet4", choices=config_mod.ARCH_CHOICES)
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", required=True, help="per-epoch CSV to write")
    p.add_argument("--data", default=None, help="dataset root for validation accuracy")
    p.add_argument("--dataset-name", default="default")
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--optimizer", default="sgd", choices=("sgd", "adamw"))
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--label-mode", default="soft", choices=("soft", "hard"))
    p.add_argument("--cutmix", type=float, default=0.0, help="cutmix probability")
    p.add_argument("--save-student", default=None, help="optional checkpoint path")

    p = sub.add_parser("continual", help="class-incremental evaluation")
    p.add_argument("--condensed", required=True)
    p.add_argument("--archive", required=True)
    p.add_argument("--steps", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", required=True)
    p.add_argument("--data", required=True, help="dataset root for validation accuracy")
    p.add_argument("--dataset-name", default="default")
    p.add_argument("--student", default="convnet4", choices=config_mod.ARCH_CHOICES)
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--classes-per-step", type=int, default=None)
    p.add_argument("--memory-per-class", type=int, default=None)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--batch-size", type=int, default=64)

    p = sub.add_parser("analyze", help="diagnostics and reporting")
    asub = p.add_subparsers(dest="analysis", required=True)

    a = asub.add_parser("embeddings", help="extract penultimate features")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--condensed", default=None)
    a.add_argument("--data", default=None)
    a.add_argument("--dataset-name", default="default")
    a.add_argument("--split", default="val")
    a.add_argument("--out", required=True)

    a = asub.add_parser("mi", help="leave-one-out mutual information bound")
    a.add_argument("--densities", required=True, help="square matrix (.npy or .csv)")
    a.add_argument("--bits", action="store_true", help="report bits instead of nats")

    a = asub.add_parser("icb", help="information-compression generalization bound")
    a.add_argument("--info-bits", type=float, required=True)
    a.add_argument("--delta", type=float, required=True)
    a.add_argument("--n-train", type=int, required=True)

    a = asub.add_parser("report", help="merge stage CSVs and render figures")
    a.add_argument("--experiment", default=None, help="experiment dir (auto-discovers CSVs)")
    a.add_argument("--recover-csv", default=None)
    a.add_argument("--eval-csv", default=None)
    a.add_argument("--continual-csv", default=None)
    a.add_argument("--out", required=True)

    p = sub.add_parser("run", help="run the configured pipeline")
    p.add_argument("--config", required=True)
    p.add_argument("--stages", default=None, help="comma subset of configured stages")
    p.add_argument("--output-root", default=None,
                   help="overrides config and CONDENSER_OUTPUT_ROOT")

    p = sub.add_parser("resume", help="continue an interrupted experiment")
    p.add_argument("experiment", help="experiment directory")

    p = sub.add_parser("inspect", help="summarize an experiment directory")
    p.add_argument("experiment", help="experiment directory")

    return parser


def _load_val(args):
    if args.data is None:
        return None
    return load_dataset(args.data, args.dataset_name, "val")


def _cmd_squeeze(args) -> int:
    train = load_dataset(args.data, args.dataset_name, "train")
    val = load_dataset(args.data, args.dataset_name, "val")
    recipe = config_mod.recipe_defaults(train.resolution)["squeeze"]
    cfg = SqueezeConfig(
        optimizer=args.optimizer or recipe["optimizer"],
        lr=args.lr if args.lr is not None else recipe["lr"],
        momentum=recipe.get("momentum", 0.9),
        weight_decay=args.weight_decay if args.weight_decay is not None else recipe["weight_decay"],
        batch_size=args.batch_size or recipe["batch_size"],
        epochs=args.epochs or recipe["epochs"],
        augmentations=_parse_aug(args.aug),
        seed=args.seed,
    )
    spec = BackboneSpec(
        arch_id=args.arch, input_resolution=train.resolution, num_classes=train.num_classes
    )
    ckpt = squeeze_train(train, val, spec, cfg)
    save_checkpoint(ckpt, args.out)
    print(f"saved checkpoint to {args.out} (val top-1 {ckpt.meta['val_top1']:.4f})")
    return 0


def _cmd_recover(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    recipe = config_mod.recipe_defaults(ckpt.spec.input_resolution)["recover"]
    cfg = RecoverConfig(
        ipc=args.ipc,
        iterations=args.iters or recipe["iterations"],
        batch_size=args.batch_size,
        lr=args.lr if args.lr is not None else recipe["lr"],
        alpha_bn=args.alpha_bn if args.alpha_bn is not None else recipe["alpha_bn"],
        alpha_tv=args.alpha_tv,
        alpha_l2=args.alpha_l2,
        clamp_unit_range=args.clamp,
        seed=args.seed,
    )
    class_ids = _parse_classes(args.classes) if args.classes else None
    cd = recover(ckpt, cfg, class_ids=class_ids, out_dir=args.out)
    print(f"recovered {len(cd)} images into {args.out} "
          f"(final loss {cd.provenance['final_totals'][-1]:.4f})")
    return 0


def _cmd_relabel(args) -> int:
    cd = load_condensed(args.condensed)
    teacher = load_checkpoint(args.teacher)
    archive = relabel(cd, teacher, tau=args.tau, epochs=args.epochs, seed=args.seed)
    save_archive(archive, args.out, precision=args.precision, topk=args.topk)
    size = os.path.getsize(args.out)
    print(f"wrote {archive.num_images * archive.epochs} soft labels to {args.out} "
          f"({size} bytes)")
    return 0


def _cmd_eval(args) -> int:
    cd = load_condensed(args.condensed)
    archive = load_archive(args.archive)
    val = _load_val(args)
    spec = BackboneSpec(
        arch_id=args.student, input_resolution=cd.resolution, num_classes=cd.num_classes
    )
    cfg = EvalConfig(
        student=spec, epochs=args.epochs, optimizer=args.optimizer, lr=args.lr,
        weight_decay=args.weight_decay, batch_size=args.batch_size,
        label_mode=args.label_mode, cutmix_prob=args.cutmix, seed=args.seed,
    )
    student, history = train_student(cd, archive, cfg, val=val)
    Path(args.report).parent.mkdir(parents=True, exist_ok=True)
    pipeline._write_history_csv(args.report, history)
    if args.save_student:
        save_checkpoint(student, args.save_student)
    last = history[-1]
    if "val_top1" in last:
        print(f"final val top-1: {last['val_top1']:.4f}")
    print(f"wrote per-epoch report to {args.report}")
    return 0


def _cmd_continual(args) -> int:
    cd = load_condensed(args.condensed)
    archive = load_archive(args.archive)
    val = load_dataset(args.data, args.dataset_name, "val")
    spec = BackboneSpec(
        arch_id=args.student, input_resolution=cd.resolution, num_classes=cd.num_classes
    )
    cfg = EvalConfig(
        student=spec, epochs=args.epochs, lr=args.lr, batch_size=args.batch_size,
        seed=args.seed,
    )
    curve = class_incremental_run(
        cd, archive, args.steps, cfg, val, seed=args.seed,
        classes_per_step=args.classes_per_step, memory_per_class=args.memory_per_class,
    )
    import csv

    Path(args.report).parent.mkdir(parents=True, exist_ok=True)
    with open(args.report, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(("step", "classes_seen", "top1", "train_loss"))
        for row in curve:
            writer.writerow((row["step"], row["classes_seen"],
                             repr(row["top1"]), repr(row["train_loss"])))
    print(f"final seen-class top-1: {curve[-1]['top1']:.4f}")
    return 0


def _cmd_analyze(args) -> int:
    if args.analysis == "embeddings":
        ckpt = load_checkpoint(args.ckpt)
        if (args.condensed is None) == (args.data is None):
            raise ConfigurationError("provide exactly one of --condensed or --data")
        if args.condensed:
            images = load_condensed(args.condensed).images
        else:
            images = load_dataset(args.data, args.dataset_name, args.split).images
        emb = analysis.extract_embeddings(ckpt, images)
        analysis.write_embeddings(args.out, emb, source_id=ckpt.content_id())
        print(f"wrote {emb.shape[0]}x{emb.shape[1]} embeddings to {args.out}")
        return 0
    if args.analysis == "mi":
        path = Path(args.densities)
        if not path.is_file():
            raise DataError(f"density matrix not found: {path}")
        if path.suffix == ".npy":
            m = np.load(path)
        else:
            m = np.loadtxt(path, delimiter=",")
        value = analysis.mutual_info_upper_bound(m, log_base=2.0 if args.bits else math.e)
        unit = "bits" if args.bits else "nats"
        print(f"mutual information upper bound: {value:.6f} {unit}")
        return 0
    if args.analysis == "icb":
        bound = analysis.generalization_bound_icb(args.info_bits, args.delta, args.n_train)
        print(f"generalization bound: {bound:.6f}")
        return 0
    # report
    kwargs = {
        "recover_csv": args.recover_csv,
        "eval_csv": args.eval_csv,
        "continual_csv": args.continual_csv,
    }
    if args.experiment:
        exp = Path(args.experiment)
        candidates = {
            "recover_csv": exp / "recover" / "loss.csv",
            "eval_csv": exp / "eval" / "report.csv",
            "continual_csv": exp / "continual" / "curve.csv",
        }
        for key, p in candidates.items():
            if kwargs[key] is None and p.is_file():
                kwargs[key] = p
    manifest = analysis.emit_report(args.out, **kwargs)
    print(f"report written to {args.out} ({len(manifest['inputs'])} inputs, "
          f"{len(manifest['figures'])} figures)")
    return 0


def _cmd_run(args) -> int:
    cfg = config_mod.from_ini(args.config)
    stages = None
    if args.stages:
        stages = tuple(s.strip() for s in args.stages.split(",") if s.strip())
    exp_dir = pipeline.run_pipeline(cfg, stages=stages, output_root=args.output_root)
    print(f"pipeline completed under {exp_dir}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "squeeze": _cmd_squeeze,
        "recover": _cmd_recover,
        "relabel": _cmd_relabel,
        "eval": _cmd_eval,
        "continual": _cmd_continual,
        "analyze": _cmd_analyze,
        "run": _cmd_run,
    }
    try:
        if args.command == "resume":
            exp_dir = pipeline.resume(args.experiment)
            print(f"experiment {exp_dir} is complete")
            return 0
        if args.command == "inspect":
            print(pipeline.inspect_experiment(args.experiment))
            return 0
        return handlers[args.command](args)
    except (ConfigurationError, DataError, IntegrityError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except DivergenceError as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        if e.diagnostics:
            print(f"diagnostics: {e.diagnostics}", file=sys.stderr)
        return 2
    except CondenserError as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
