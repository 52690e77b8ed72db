"""Training loops: adversarial domain-adaptation pretraining, distillation
with the four-paradigm scheduler, optimizer schedules, logging and the
paradigm ladder.

Both loops share one implementation (`_run_loop`); DA pretraining is the
degenerate case with no teacher. That makes the zero-lambda distillation
trace bitwise identical to the baseline continuation by construction.
Everything is single-threaded and deterministic given the plan seed.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .core import DistillConfig, Paradigm
from .data import DatasetManifest, load_batches, load_entry
from .losses import (adv_generator, disc_bce, distill_objective, kl_distill,
                     mse_distill, pseudo_ce, seg_ce)
from .metrics import ConfusionMatrix, EvalReport, accumulate, compute_report
from .models import (Discriminator, DiscriminatorConfig, ParamSnapshot,
                     SegmentationNet, SegNetConfig, build_discriminator,
                     build_segnet, freeze, load_checkpoint, save_checkpoint,
                     snapshot)

# Level weights for the multi-level baseline; the published method never
# states its baseline's values, so these are repo defaults.
AUX_SEG_WEIGHT = 0.1
ADV_WEIGHT_OUT = 1e-3
ADV_WEIGHT_FEAT = 2e-4


class OptimKind(enum.Enum):
    SGD_NESTEROV = "sgd_nesterov"
    ADAM = "adam"


@dataclass(frozen=True)
class OptimSpec:
    kind: OptimKind = OptimKind.SGD_NESTEROV
    base_lr: float = 2.5e-4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    poly_power: float = 0.9
    max_iters: int = 5000


DEFAULT_GEN_OPTIM = OptimSpec()
DEFAULT_DISC_OPTIM = OptimSpec(kind=OptimKind.ADAM, base_lr=1e-4,
                               weight_decay=0.0)


def poly_lr(spec: OptimSpec, iteration: int) -> float:
    """base_lr * (1 - iter/max_iters) ** poly_power."""
    if not 0 <= iteration <= spec.max_iters:
        raise ValueError(f"iteration {iteration} outside [0, {spec.max_iters}]")
    return spec.base_lr * (1.0 - iteration / spec.max_iters) ** spec.poly_power


@dataclass
class TrainPlan:
    paradigm: Paradigm = Paradigm.C
    distill_cfg: DistillConfig = field(default_factory=DistillConfig)
    gen_optim: OptimSpec = DEFAULT_GEN_OPTIM
    disc_optim: OptimSpec = DEFAULT_DISC_OPTIM
    batch_size: int = 2
    max_iters: int = 5000
    seed: int = 0
    adv_weight_out: float = ADV_WEIGHT_OUT
    adv_weight_feat: float = ADV_WEIGHT_FEAT
    eval_every: int = 0
    train_discriminators: bool = True
    init_from: str | None = None

    def __post_init__(self):
        if self.gen_optim.max_iters != self.max_iters:
            self.gen_optim = replace(self.gen_optim, max_iters=self.max_iters)
        if self.disc_optim.max_iters != self.max_iters:
            self.disc_optim = replace(self.disc_optim, max_iters=self.max_iters)


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    eval_records: list = field(default_factory=list)

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w") as f:
            for rec in self.records:
                f.write(json.dumps({"kind": "train", **rec}) + "\n")
            for rec in self.eval_records:
                f.write(json.dumps({"kind": "eval", **rec}) + "\n")


class DivergenceError(RuntimeError):
    """Raised when a loss turns non-finite; carries the diagnostic record."""

    def __init__(self, iteration: int, record: dict):
        super().__init__(f"non-finite loss at iteration {iteration}: {record}")
        self.iteration = iteration
        self.record = record


def _make_optimizer(spec: OptimSpec, params):
    params = [p for p in params if p.requires_grad]
    if spec.kind is OptimKind.SGD_NESTEROV:
        return torch.optim.SGD(params, lr=spec.base_lr, momentum=spec.momentum,
                               weight_decay=spec.weight_decay, nesterov=True)
    return torch.optim.Adam(params, lr=spec.base_lr,
                            weight_decay=spec.weight_decay)


def _set_lr(optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def batch_to_tensors(batch):
    """DomainBatch -> (images (N,H,W,3) float32, labels (N,H,W) int64 | None)."""
    images = torch.from_numpy(
        np.stack([im.data for im in batch.images])).to(torch.float32)
    labels = None
    if batch.labels is not None:
        labels = torch.from_numpy(np.stack([lm.data for lm in batch.labels]))
    return images, labels


def _probs(logits: torch.Tensor) -> torch.Tensor:
    return torch.softmax(logits, dim=-1)


def _set_requires_grad(module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)


def _distill_terms(cfg: DistillConfig, s_out, t_out) -> dict:
    """Per-domain weighted distillation terms; zero-weight terms are
    skipped entirely so a zero-lambda run matches the baseline bitwise."""
    terms = {}
    s_main, t_main = _probs(s_out.main_logits), _probs(t_out.main_logits)
    if cfg.lambda_kl_out > 0:
        terms["kl_out"] = kl_distill(s_main, t_main, cfg.lambda_kl_out,
                                     cfg.kl_direction, cfg.reduction, "kl_out")
    if cfg.lambda_kl_feat > 0:
        terms["kl_feat"] = kl_distill(_probs(s_out.aux_logits),
                                      _probs(t_out.aux_logits),
                                      cfg.lambda_kl_feat, cfg.kl_direction,
                                      cfg.reduction, "kl_feat")
    if cfg.lambda_mse > 0:
        terms["mse"] = mse_distill(s_out.feature, t_out.feature,
                                   cfg.lambda_mse, cfg.reduction)
    if cfg.lambda_pseudo > 0:
        pseudo = t_main.argmax(dim=-1)
        terms["pseudo"] = pseudo_ce(s_main, pseudo, cfg.lambda_pseudo,
                                    cfg.reduction)
    return terms


def _run_loop(student: SegmentationNet, teacher, disc_feat: Discriminator,
              disc_out: Discriminator, src_manifest: DatasetManifest,
              tgt_manifest: DatasetManifest, plan: TrainPlan,
              eval_fn=None) -> TrainLog:
    if teacher is not None and not getattr(teacher, "frozen", False):
        raise ValueError("teacher must be frozen before distillation")
    cfg = plan.distill_cfg
    reduction = cfg.reduction
    src_stream = load_batches(src_manifest, plan.batch_size,
                              seed=plan.seed * 2 + 1)
    tgt_stream = load_batches(tgt_manifest, plan.batch_size,
                              seed=plan.seed * 2 + 2)
    gen_opt = _make_optimizer(plan.gen_optim, student.parameters())
    disc_params = list(disc_feat.parameters()) + list(disc_out.parameters())
    disc_opt = _make_optimizer(plan.disc_optim, disc_params)
    log = TrainLog()

    use_src = cfg.paradigm in (Paradigm.A, Paradigm.C)
    use_tgt = cfg.paradigm in (Paradigm.B, Paradigm.C, Paradigm.D)
    any_lambda = (cfg.lambda_kl_out > 0 or cfg.lambda_kl_feat > 0
                  or cfg.lambda_mse > 0 or cfg.lambda_pseudo > 0)
    distilling = teacher is not None and any_lambda

    for it in range(plan.max_iters):
        lr_g = poly_lr(plan.gen_optim, it)
        lr_d = poly_lr(plan.disc_optim, it)
        _set_lr(gen_opt, lr_g)
        _set_lr(disc_opt, lr_d)

        src_batch = next(src_stream)
        tgt_batch = next(tgt_stream)
        if src_batch.labels is None:
            raise ValueError("source training batches must carry labels")
        src_images, src_labels = batch_to_tensors(src_batch)
        tgt_images, _ = batch_to_tensors(tgt_batch)

        # (i) generator step, discriminators fixed
        _set_requires_grad(disc_feat, False)
        _set_requires_grad(disc_out, False)
        gen_opt.zero_grad()

        s_src = student(src_images)
        src_main_p = _probs(s_src.main_logits)
        src_aux_p = _probs(s_src.aux_logits)
        seg_main = seg_ce(src_main_p, src_labels, reduction)
        seg_aux = seg_ce(src_aux_p, src_labels, reduction)

        s_tgt = student(tgt_images)
        tgt_main_p = _probs(s_tgt.main_logits)
        tgt_aux_p = _probs(s_tgt.aux_logits)
        adv_out = adv_generator(disc_out(tgt_main_p), reduction)
        adv_feat = adv_generator(disc_feat(tgt_aux_p), reduction)

        total = (seg_main.value + AUX_SEG_WEIGHT * seg_aux.value
                 + plan.adv_weight_out * adv_out.value
                 + plan.adv_weight_feat * adv_feat.value)
        breakdown = {
            "seg_main": seg_main.item(),
            "seg_aux": AUX_SEG_WEIGHT * seg_aux.item(),
            "adv_out": plan.adv_weight_out * adv_out.item(),
            "adv_feat": plan.adv_weight_feat * adv_feat.item(),
        }

        if distilling:
            src_terms, tgt_terms = {}, {}
            if use_src:
                with torch.no_grad():
                    t_src = teacher(src_images)
                src_terms = _distill_terms(cfg, s_src, t_src)
            if use_tgt:
                with torch.no_grad():
                    t_tgt = teacher(tgt_images)
                tgt_terms = _distill_terms(cfg, s_tgt, t_tgt)
            obj = distill_objective(src_terms, tgt_terms, cfg)
            if src_terms or tgt_terms:
                total = total + obj.value
            breakdown.update(obj.breakdown)

        if not torch.isfinite(total):
            record = {"iter": it, "lr": lr_g, "total": float(total.detach()),
                      "breakdown": breakdown}
            log.records.append({**record, "diverged": True})
            raise DivergenceError(it, record)

        total.backward()
        gen_opt.step()

        # (ii) discriminator step, generator fixed
        disc_losses = {}
        if plan.train_discriminators:
            _set_requires_grad(disc_feat, True)
            _set_requires_grad(disc_out, True)
            disc_opt.zero_grad()
            d_loss = None
            for name, disc, src_p, tgt_p in (
                    ("disc_out", disc_out, src_main_p, tgt_main_p),
                    ("disc_feat", disc_feat, src_aux_p, tgt_aux_p)):
                l_src = disc_bce(disc(src_p.detach()), True, reduction)
                l_tgt = disc_bce(disc(tgt_p.detach()), False, reduction)
                l = 0.5 * (l_src.value + l_tgt.value)
                disc_losses[name] = float(l.detach())
                d_loss = l if d_loss is None else d_loss + l
            d_loss.backward()
            disc_opt.step()

        log.records.append({
            "iter": it,
            "lr": lr_g,
            "lr_disc": lr_d,
            "total": float(total.detach()),
            "breakdown": breakdown,
            "disc": disc_losses,
        })

        if plan.eval_every and (it + 1) % plan.eval_every == 0 and eval_fn:
            report = eval_fn(student)
            log.eval_records.append({
                "iter": it + 1,
                "per_class_iou": report.per_class_iou,
                "miou": report.miou,
                "pixel_accuracy": report.pixel_accuracy,
            })
    return log


def pretrain_da(net: SegmentationNet, disc_feat: Discriminator,
                disc_out: Discriminator, src_manifest, tgt_manifest,
                plan: TrainPlan, eval_fn=None) -> TrainLog:
    """Adversarial DA pretraining: supervised CE on source plus adversarial
    alignment on target, alternating with discriminator BCE steps."""
    return _run_loop(net, None, disc_feat, disc_out, src_manifest,
                     tgt_manifest, plan, eval_fn)


def distill(teacher: SegmentationNet, student: SegmentationNet,
            disc_feat: Discriminator, disc_out: Discriminator,
            src_manifest, tgt_manifest, plan: TrainPlan,
            eval_fn=None) -> TrainLog:
    """Distillation training: the DA objective plus the paradigm-scheduled
    multi-level distillation terms, with pseudo labels generated online
    from the frozen teacher."""
    if plan.paradigm is Paradigm.D and plan.init_from is None:
        raise ValueError(
            "paradigm D requires init_from pointing at a paradigm-C checkpoint")
    if teacher.cfg.num_classes != student.cfg.num_classes:
        raise ValueError("teacher/student class-count mismatch")
    cfg = replace(plan.distill_cfg, paradigm=plan.paradigm)
    plan = replace_plan(plan, distill_cfg=cfg)
    return _run_loop(student, teacher, disc_feat, disc_out, src_manifest,
                     tgt_manifest, plan, eval_fn)


def replace_plan(plan: TrainPlan, **kw) -> TrainPlan:
    d = {**plan.__dict__, **kw}
    return TrainPlan(**d)


def predict(net: SegmentationNet, image_data: np.ndarray) -> np.ndarray:
    """Main-head argmax prediction for one (H, W, 3) image."""
    with torch.no_grad():
        images = torch.from_numpy(image_data[None].copy()).to(torch.float32)
        out = net(images)
        return out.main_logits[0].argmax(dim=-1).numpy()


def evaluate_confusion(net: SegmentationNet,
                       manifest: DatasetManifest) -> ConfusionMatrix:
    from .core import LabelMap

    was_training = net.training
    net.eval()
    C = net.cfg.num_classes
    cm = ConfusionMatrix(C)
    for i in range(len(manifest.entries)):
        img, label = load_entry(manifest, i)
        pred = predict(net, img.data)
        cm = accumulate(cm, LabelMap(pred, num_classes=C), label)
    if was_training:
        net.train()
    return cm


def evaluate(net: SegmentationNet, manifest: DatasetManifest,
             class_names=None) -> EvalReport:
    """Run the main head over a manifest split and report IoU metrics."""
    cm = evaluate_confusion(net, manifest)
    return compute_report(cm, num_images=len(manifest.entries),
                          class_names=class_names)


@dataclass
class LadderResult:
    rows: dict                    # name -> EvalReport
    checkpoints: dict             # name -> checkpoint path (stem)
    logs: dict                    # name -> TrainLog
    d_init: "ParamSnapshot | None" = None  # paradigm D warm-start state

    def report_dict(self) -> dict:
        return {name: json.loads(r.to_json()) for name, r in self.rows.items()}


def run_paradigm_ladder(teacher_cfg: SegNetConfig, student_cfg: SegNetConfig,
                        disc_cfg: DiscriminatorConfig,
                        src_train, tgt_train, tgt_val,
                        pretrain_plan: TrainPlan, distill_plan: TrainPlan,
                        out_dir, class_names=None,
                        teacher_pretrain_plan: TrainPlan | None = None) -> LadderResult:
    """DA-pretrain teacher and student, then run distillation paradigms
    a-c independently and d warm-started from c; evaluate everything on
    the target validation split.

    The teacher may get its own (typically longer) pretraining plan: it is
    meant to be a fully trained high-capacity model, while the student's
    budget stays modest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = pretrain_plan.seed
    rows, ckpts, logs = {}, {}, {}

    def _eval(net):
        return evaluate(net, tgt_val, class_names)

    # DA pretraining for both roles; each gets its own discriminators.
    nets = {}
    plans = {"teacher": teacher_pretrain_plan or pretrain_plan,
             "student": pretrain_plan}
    for role, cfg in (("teacher", teacher_cfg), ("student", student_cfg)):
        plan = plans[role]
        net = build_segnet(cfg, seed=seed + (1 if role == "teacher" else 2))
        d_feat = build_discriminator(disc_cfg, seed=seed + 11)
        d_out = build_discriminator(disc_cfg, seed=seed + 12)
        logs[role] = pretrain_da(net, d_feat, d_out, src_train, tgt_train,
                                 plan)
        stem = out_dir / f"{role}_pretrained"
        save_checkpoint(stem, net, iteration=plan.max_iters)
        ckpts[role] = str(stem)
        rows[role] = _eval(net)
        nets[role] = net

    teacher = freeze(nets["teacher"])
    teacher_before = snapshot(teacher)
    student_ckpt = ckpts["student"]

    for paradigm in (Paradigm.A, Paradigm.B, Paradigm.C, Paradigm.D):
        name = paradigm.value
        init = ckpts["c"] if paradigm is Paradigm.D else student_ckpt
        student, _ = load_checkpoint(init)
        if paradigm is Paradigm.D:
            d_init = snapshot(student)
        d_feat = build_discriminator(disc_cfg, seed=seed + 21)
        d_out = build_discriminator(disc_cfg, seed=seed + 22)
        plan = replace_plan(distill_plan, paradigm=paradigm, init_from=init)
        logs[name] = distill(teacher, student, d_feat, d_out, src_train,
                             tgt_train, plan)
        stem = out_dir / f"distilled_{name}"
        save_checkpoint(stem, student, iteration=plan.max_iters)
        ckpts[name] = str(stem)
        rows[name] = _eval(student)

    if snapshot(teacher) != teacher_before:
        raise AssertionError("frozen teacher parameters changed during ladder")

    result = LadderResult(rows=rows, checkpoints=ckpts, logs=logs,
                          d_init=d_init)
    (out_dir / "ladder_report.json").write_text(
        json.dumps(result.report_dict(), indent=1))
    return result
