"""Command-line orchestration: `dakd generate-data|pretrain|distill|evaluate|ladder`.

Every command is a pure function of (config file, flags, seed). The seed
defaults to the DAKD_SEED environment variable, then 0. Output tree:
``out/<experiment>/{config.resolved.toml, checkpoints/, logs/, reports/,
plots/}``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from .config import ExperimentConfig, load_config, write_resolved
from .core import DistillConfig, Paradigm
from .data import (DatasetManifest, Domain, PALETTE, Split, write_dataset)
from .models import (build_discriminator, build_segnet, freeze,
                     load_checkpoint, save_checkpoint)
from .train import (TrainPlan, distill, evaluate_confusion, pretrain_da,
                    run_paradigm_ladder)
from .metrics import compute_report

# Hyperparameter grids for the loss-weight ablations.
ABLATION_GRIDS = {
    "kl": [0.1, 0.4, 0.7, 1.0],
    "mse": [0.005, 0.01, 0.05],
    "pseudo": [0.001, 0.01, 0.05, 0.1, 0.5, 1.0],
}


def _default_seed() -> int:
    return int(os.environ.get("DAKD_SEED", "0"))


def _resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "out", None):
        cfg = replace(cfg, out_dir=args.out)
    return cfg


def _exp_dir(cfg: ExperimentConfig) -> Path:
    d = Path(cfg.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, d)
    for sub in ("checkpoints", "logs", "reports", "plots"):
        (d / sub).mkdir(exist_ok=True)
    return d


def _dataset_root(cfg: ExperimentConfig) -> Path:
    root = Path(cfg.dataset.root)
    if not root.is_absolute():
        root = Path(cfg.out_dir) / root
    return root


def _manifest(cfg: ExperimentConfig, domain: Domain, split: Split) -> DatasetManifest:
    path = _dataset_root(cfg) / domain.value / split.value / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(
            f"dataset manifest {path} not found; run `dakd generate-data` first")
    return DatasetManifest.load(path)


def _scene_spec(cfg: ExperimentConfig):
    return replace(cfg.scene, seed=cfg.seed)


def cmd_generate_data(args) -> int:
    cfg = _resolve_config(args)
    counts = {"train": cfg.dataset.train_count, "val": cfg.dataset.val_count}
    root = _dataset_root(cfg)
    if args.dry_run:
        print(f"would write to {root}:")
        for domain in ("source", "target"):
            for split, n in counts.items():
                print(f"  {domain}/{split}: {n} images")
        return 0
    manifests = write_dataset(_scene_spec(cfg), cfg.shift_source,
                              cfg.shift_target, counts, root)
    _exp_dir(cfg)
    for (domain, split), m in manifests.items():
        print(f"{domain.value}/{split.value}: {len(m.entries)} entries "
              f"-> {m.root / 'manifest.json'}")
    return 0


def _make_plan(cfg: ExperimentConfig, loop, paradigm=None,
               max_iters=None, init_from=None,
               distill_cfg=None) -> TrainPlan:
    return TrainPlan(
        paradigm=paradigm or cfg.distill.paradigm,
        distill_cfg=distill_cfg or cfg.distill,
        gen_optim=cfg.gen_optim,
        disc_optim=cfg.disc_optim,
        batch_size=loop.batch_size,
        max_iters=loop.max_iters if max_iters is None else max_iters,
        seed=cfg.seed,
        adv_weight_out=cfg.adv_weight_out,
        adv_weight_feat=cfg.adv_weight_feat,
        eval_every=loop.eval_every,
        init_from=init_from,
    )


def cmd_pretrain(args) -> int:
    cfg = _resolve_config(args)
    exp = _exp_dir(cfg)
    src_train = _manifest(cfg, Domain.SOURCE, Split.TRAIN)
    tgt_train = _manifest(cfg, Domain.TARGET, Split.TRAIN)
    net_cfg = cfg.teacher if args.role == "teacher" else cfg.student
    seed_off = 1 if args.role == "teacher" else 2
    net = build_segnet(net_cfg, seed=cfg.seed + seed_off)
    d_feat = build_discriminator(cfg.discriminator, seed=cfg.seed + 11)
    d_out = build_discriminator(cfg.discriminator, seed=cfg.seed + 12)
    plan = _make_plan(cfg, cfg.pretrain_loop, max_iters=args.max_iters)
    log = pretrain_da(net, d_feat, d_out, src_train, tgt_train, plan)
    stem = exp / "checkpoints" / f"{args.role}_pretrained"
    save_checkpoint(stem, net, iteration=plan.max_iters)
    log.save(exp / "logs" / f"{args.role}_pretrain.jsonl")
    print(f"checkpoint: {stem}.json")
    return 0


def resolve_distill_cfg(base: DistillConfig, paradigm: Paradigm,
                        lambda_kl=None, lambda_kl_feat=None, lambda_mse=None,
                        lambda_pseudo=None, lambda_target=None) -> DistillConfig:
    """Overlay CLI flags on the config; omitted flags keep the config
    defaults, and the feature-level KL tracks one-tenth of an explicitly
    overridden output-level KL."""
    lam_kl = base.lambda_kl_out if lambda_kl is None else lambda_kl
    lam_feat = lambda_kl_feat
    if lam_feat is None:
        lam_feat = base.lambda_kl_feat if lambda_kl is None else lam_kl / 10.0
    return replace(
        base,
        lambda_kl_out=lam_kl,
        lambda_kl_feat=lam_feat,
        lambda_mse=base.lambda_mse if lambda_mse is None else lambda_mse,
        lambda_pseudo=base.lambda_pseudo if lambda_pseudo is None else lambda_pseudo,
        lambda_target=base.lambda_target if lambda_target is None else lambda_target,
        paradigm=paradigm,
    )


def cmd_distill(args) -> int:
    cfg = _resolve_config(args)
    exp = _exp_dir(cfg)
    src_train = _manifest(cfg, Domain.SOURCE, Split.TRAIN)
    tgt_train = _manifest(cfg, Domain.TARGET, Split.TRAIN)
    paradigm = Paradigm(args.paradigm)
    if paradigm is Paradigm.D and not args.init_from:
        print("error: paradigm d requires --init-from <paradigm-c checkpoint>",
              file=sys.stderr)
        return 2

    dcfg = resolve_distill_cfg(cfg.distill, paradigm,
                               lambda_kl=args.lambda_kl,
                               lambda_kl_feat=args.lambda_kl_feat,
                               lambda_mse=args.lambda_mse,
                               lambda_pseudo=args.lambda_pseudo,
                               lambda_target=args.lambda_target)

    teacher, _ = load_checkpoint(args.teacher)
    freeze(teacher)
    init = args.init_from if paradigm is Paradigm.D else args.student
    student, _ = load_checkpoint(init)
    if teacher.cfg.num_classes != student.cfg.num_classes:
        print("error: teacher/student class-count mismatch", file=sys.stderr)
        return 2
    d_feat = build_discriminator(cfg.discriminator, seed=cfg.seed + 21)
    d_out = build_discriminator(cfg.discriminator, seed=cfg.seed + 22)
    plan = _make_plan(cfg, cfg.distill_loop, paradigm=paradigm,
                      max_iters=args.max_iters, init_from=init,
                      distill_cfg=dcfg)
    log = distill(teacher, student, d_feat, d_out, src_train, tgt_train, plan)
    stem = exp / "checkpoints" / f"distilled_{paradigm.value}"
    save_checkpoint(stem, student, iteration=plan.max_iters)
    log.save(exp / "logs" / f"distill_{paradigm.value}.jsonl")
    print(f"checkpoint: {stem}.json")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _resolve_config(args)
    exp = _exp_dir(cfg)
    manifest = DatasetManifest.load(args.dataset) if args.dataset else \
        _manifest(cfg, Domain.TARGET, Split.VAL)
    net, iteration = load_checkpoint(args.checkpoint)
    cm = evaluate_confusion(net, manifest)
    report = compute_report(cm, num_images=len(manifest.entries),
                            class_names=list(cfg.scene.classes))
    out = {
        "checkpoint": str(args.checkpoint),
        "iteration": iteration,
        "report": json.loads(report.to_json()),
        "confusion_matrix": cm.counts.tolist(),
        "ignored_pixels": cm.ignored_pixels,
    }
    name = Path(args.checkpoint).stem
    path = exp / "reports" / f"eval_{name}.json"
    path.write_text(json.dumps(out, indent=1))
    if args.save_predictions:
        from PIL import Image
        from .train import predict
        from .data import load_entry
        pred_dir = exp / "reports" / f"predictions_{name}"
        pred_dir.mkdir(exist_ok=True)
        for i in range(len(manifest.entries)):
            img, _ = load_entry(manifest, i)
            pred = predict(net, img.data)
            Image.fromarray(PALETTE[pred]).save(pred_dir / f"{i:06d}.png")
    print(f"mIoU {report.miou:.4f}  pixel acc {report.pixel_accuracy:.4f}"
          f"  -> {path}")
    return 0


def _ladder_table(rows: dict, class_names) -> str:
    lines = ["| model | mIoU | pixel acc |", "|---|---|---|"]
    for name in ("teacher", "student", "a", "b", "c", "d"):
        r = rows[name]
        label = name if name in ("teacher", "student") else f"distill ({name})"
        lines.append(f"| {label} | {r.miou:.4f} | {r.pixel_accuracy:.4f} |")
    return "\n".join(lines) + "\n"


def _ladder_plot(rows: dict, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = ["teacher", "student", "a", "b", "c", "d"]
    values = [rows[n].miou for n in names]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(names, values, color=["#888", "#888", "#4a7", "#4a7", "#4a7", "#4a7"])
    ax.set_ylabel("target val mIoU")
    ax.set_title("paradigm ladder")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def cmd_ladder(args) -> int:
    cfg = _resolve_config(args)
    exp = _exp_dir(cfg)
    root = _dataset_root(cfg)
    if not (root / "source" / "train" / "manifest.json").exists():
        counts = {"train": cfg.dataset.train_count, "val": cfg.dataset.val_count}
        write_dataset(_scene_spec(cfg), cfg.shift_source, cfg.shift_target,
                      counts, root)
    src_train = _manifest(cfg, Domain.SOURCE, Split.TRAIN)
    tgt_train = _manifest(cfg, Domain.TARGET, Split.TRAIN)
    tgt_val = _manifest(cfg, Domain.TARGET, Split.VAL)
    pre_plan = _make_plan(cfg, cfg.pretrain_loop)
    dis_plan = _make_plan(cfg, cfg.distill_loop)
    teacher_plan = None
    if args.teacher_pretrain_iters:
        teacher_plan = _make_plan(cfg, cfg.pretrain_loop,
                                  max_iters=args.teacher_pretrain_iters)
    result = run_paradigm_ladder(cfg.teacher, cfg.student, cfg.discriminator,
                                 src_train, tgt_train, tgt_val,
                                 pre_plan, dis_plan, exp / "checkpoints",
                                 class_names=list(cfg.scene.classes),
                                 teacher_pretrain_plan=teacher_plan)
    (exp / "reports" / "ladder.json").write_text(
        json.dumps(result.report_dict(), indent=1))
    table = _ladder_table(result.rows, cfg.scene.classes)
    (exp / "reports" / "ladder.md").write_text(table)
    _ladder_plot(result.rows, exp / "plots" / "ladder.png")
    print(table)

    if args.ablation:
        grid = ABLATION_GRIDS[args.ablation]
        teacher, _ = load_checkpoint(result.checkpoints["teacher"])
        freeze(teacher)
        sweep = {}
        for value in grid:
            if args.ablation == "kl":
                dcfg = DistillConfig(lambda_kl_out=value,
                                     lambda_kl_feat=value / 10.0,
                                     lambda_mse=0.0, lambda_pseudo=0.0)
            elif args.ablation == "mse":
                dcfg = DistillConfig(lambda_kl_out=0.0, lambda_kl_feat=0.0,
                                     lambda_mse=value, lambda_pseudo=0.0)
            else:
                dcfg = DistillConfig(lambda_kl_out=0.0, lambda_kl_feat=0.0,
                                     lambda_mse=0.0, lambda_pseudo=value)
            student, _ = load_checkpoint(result.checkpoints["student"])
            d_feat = build_discriminator(cfg.discriminator, seed=cfg.seed + 21)
            d_out = build_discriminator(cfg.discriminator, seed=cfg.seed + 22)
            plan = _make_plan(cfg, cfg.distill_loop, paradigm=Paradigm.A,
                              distill_cfg=dcfg)
            distill(teacher, student, d_feat, d_out, src_train, tgt_train, plan)
            from .train import evaluate
            sweep[str(value)] = json.loads(
                evaluate(student, tgt_val, list(cfg.scene.classes)).to_json())
            print(f"ablation {args.ablation}={value}: "
                  f"mIoU {sweep[str(value)]['miou']:.4f}")
        (exp / "reports" / f"ablation_{args.ablation}.json").write_text(
            json.dumps(sweep, indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dakd",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=str, default=None,
                       help="TOML or JSON experiment config")
        p.add_argument("--out", type=str, default=None,
                       help="experiment output directory")
        p.add_argument("--seed", type=int, default=None)
        return p

    p = common(sub.add_parser("generate-data", help="write the two-domain dataset"))
    p.add_argument("--dry-run", action="store_true")
    p.set_defaults(func=cmd_generate_data)

    p = common(sub.add_parser("pretrain", help="adversarial DA pretraining"))
    p.add_argument("--role", choices=["teacher", "student"], required=True)
    p.add_argument("--max-iters", type=int, default=None)
    p.set_defaults(func=cmd_pretrain)

    p = common(sub.add_parser("distill", help="distillation training"))
    p.add_argument("--paradigm", choices=["a", "b", "c", "d"], required=True)
    p.add_argument("--teacher", type=str, required=True,
                   help="frozen teacher checkpoint stem")
    p.add_argument("--student", type=str, required=True,
                   help="DA-pretrained student checkpoint stem")
    p.add_argument("--init-from", type=str, default=None,
                   help="paradigm-c checkpoint (required for paradigm d)")
    p.add_argument("--lambda-kl", type=float, default=None)
    p.add_argument("--lambda-kl-feat", type=float, default=None)
    p.add_argument("--lambda-mse", type=float, default=None)
    p.add_argument("--lambda-pseudo", type=float, default=None)
    p.add_argument("--lambda-target", type=float, default=None)
    p.add_argument("--max-iters", type=int, default=None)
    p.set_defaults(func=cmd_distill)

    p = common(sub.add_parser("evaluate", help="evaluate a checkpoint"))
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--dataset", type=str, default=None,
                   help="manifest path (default: target val of the config)")
    p.add_argument("--save-predictions", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = common(sub.add_parser("ladder", help="run all paradigms and compare"))
    p.add_argument("--ablation", choices=sorted(ABLATION_GRIDS), default=None)
    p.add_argument("--teacher-pretrain-iters", type=int, default=None,
                   help="longer pretraining budget for the teacher role")
    p.set_defaults(func=cmd_ladder)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.seed is None and "DAKD_SEED" in os.environ:
        args.seed = _default_seed()
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
