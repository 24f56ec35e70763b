"""Semi-supervised training loop: burn-in, EMA teacher, SGD student.

Each joint iteration: the teacher infers on weakly augmented unlabeled
views; its detections are filtered, weighted, fused, and mapped into
the strongly augmented student views; the student takes one SGD step on
the assembled supervised + unsupervised loss; the teacher then tracks
the student by exponential moving average. During burn-in (and whenever
the effective unsupervised weight is zero) the unlabeled stream is
skipped entirely. The teacher is never touched by the optimizer.
"""
from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .config import ExperimentConfig, derive_rng
from .data import DatasetManifest, load_batch, split as split_manifest
from .detector import (
    AnchorConfig,
    Detector,
    DetectorConfig,
    DexEncoderConfig,
    anchor_array,
    assign_targets,
    decode_boxes,
    flatten_cls,
    flatten_deltas,
)
from .evaluate import evaluate_detections, pseudo_quality
from .augment import AugmentedSample
from .geometry import Detection
from .losses import BranchTargets, LossBreakdown, assemble
from .pseudo import PseudoConfig, build_pseudo_set, confidence_filter

# rng stream tags
_TAG_INIT = 3
_TAG_SAMPLER = 2
_TAG_AUG = 1

CSV_HEADER = (
    "iteration,l_sup_cls,l_sup_reg,l_unsup_cls,l_unsup_reg,total,"
    "mAP,AP50,AP75,n_pseudo,mean_pseudo_conf"
)


@dataclass
class UnlabeledPair:
    """Two views of one unlabeled image: weak for the teacher, strong
    for the student."""

    teacher: AugmentedSample
    student: AugmentedSample


@dataclass
class TrainState:
    config: ExperimentConfig
    student: Detector
    teacher: Detector
    iteration: int = 0
    momentum_buffers: dict = field(default_factory=dict)
    last_tape: Tape | None = None
    last_pseudo_count: int = 0
    last_pseudo_conf: float = 0.0
    teacher_live: bool = False  # becomes true once burn-in hands over


def ema_update(teacher: Detector, student: Detector, alpha: float) -> None:
    """t <- alpha * t + (1 - alpha) * s for every parameter pair."""
    t_params = teacher.parameters()
    s_params = student.parameters()
    if len(t_params) != len(s_params):
        raise ValueError("teacher/student parameter lists differ in length")
    a = teacher.np_dtype(alpha)
    one_minus = teacher.np_dtype(1.0) - a
    for (tn, tp), (sn, sp) in zip(t_params, s_params):
        if tn != sn or tp.shape != sp.shape:
            raise ValueError(f"parameter mismatch {tn}{tp.shape} vs {sn}{sp.shape}")
        tp.data = a * tp.data + one_minus * sp.data


def sgd_step(state: TrainState, lr: float) -> None:
    cfg = state.config
    dt = state.student.np_dtype
    mom = dt(cfg.momentum)
    wd = dt(cfg.weight_decay)
    for name, p in state.student.parameters():
        g = p.grad
        if g is None:
            continue
        g = g + wd * p.data
        buf = state.momentum_buffers.get(name)
        buf = g if buf is None else mom * buf + g
        state.momentum_buffers[name] = buf
        p.data = p.data - dt(lr) * buf
        p.grad = None


def lr_at(cfg: ExperimentConfig, iteration: int) -> float:
    lr = cfg.base_lr
    if cfg.warmup_iters > 0 and iteration < cfg.warmup_iters:
        lr *= (iteration + 1) / cfg.warmup_iters
    for frac in cfg.milestones:
        if iteration >= frac * cfg.iterations:
            lr *= cfg.lr_gamma
    return lr


def sr_at(cfg: ExperimentConfig, iteration: int) -> float:
    """Labeled fraction of the mixed batch, decaying to 0 at the end."""
    window = max(1, int(round(cfg.sr_decay_frac * cfg.iterations)))
    start = cfg.iterations - window
    if iteration < start:
        return cfg.sr
    remaining = cfg.iterations - iteration
    return cfg.sr * remaining / (window + 1)


def _stack_images(samples: list[AugmentedSample], dtype) -> Tensor:
    arr = np.stack([s.image for s in samples])[:, None, :, :].astype(dtype)
    return Tensor(arr)


def train_step(
    state: TrainState,
    labeled_batch: list[AugmentedSample],
    unlabeled_batch: list[UnlabeledPair] | None,
) -> LossBreakdown:
    """One optimization step; mutates ``state`` and returns the breakdown."""
    cfg = state.config
    student = state.student
    dt = student.np_dtype
    lam = cfg.effective_lambda
    in_burn_in = state.iteration < cfg.burn_in
    use_unsup = bool(unlabeled_batch) and lam != 0.0 and not in_burn_in

    pseudo_sets = []
    state.last_pseudo_count = 0
    state.last_pseudo_conf = 0.0
    if use_unsup:
        t_imgs = _stack_images([p.teacher for p in unlabeled_batch], dt)
        teacher_dets = state.teacher.infer_batch(t_imgs)
        pcfg = PseudoConfig(
            sigma=cfg.sigma,
            mu=cfg.mu,
            r_i=cfg.r_i,
            adso_enabled=cfg.adso,
            fusion_enabled=cfg.fusion_box,
        )
        retained_scores: list[float] = []
        for pair, dets in zip(unlabeled_batch, teacher_dets):
            retained_scores.extend(
                d.score for d in confidence_filter(dets, cfg.sigma)
            )
            pseudo_sets.append(
                build_pseudo_set(dets, pair.teacher.view, pair.student.view, pcfg)
            )
        state.last_pseudo_count = len(retained_scores)
        if retained_scores:
            state.last_pseudo_conf = float(np.mean(retained_scores))

    student_samples = list(labeled_batch)
    if use_unsup:
        student_samples += [p.student for p in unlabeled_batch]
    if not student_samples:
        state.iteration += 1
        if state.teacher_live:
            ema_update(state.teacher, student, cfg.ema_alpha)
        return LossBreakdown(0.0, 0.0, 0.0, 0.0, 0.0, 0, 0, 0)

    x = _stack_images(student_samples, dt)
    student.zero_grad()
    with Tape() as tape:
        out = student.forward(x)
        fh, fw = out.cls_logits.shape[2], out.cls_logits.shape[3]
        anchors = anchor_array(fh, fw, student.config.anchors)
        probs = ad.sigmoid(flatten_cls(out.cls_logits))
        deltas = flatten_deltas(out.box_deltas, student.config.anchors.num_anchors)
        pred_boxes = [
            decode_boxes(anchors, deltas.data[i]) for i in range(len(student_samples))
        ]

        sup_targets = []
        for i, sample in enumerate(labeled_batch):
            assign = assign_targets(anchors, sample.boxes, pred_boxes[i])
            sup_targets.append(
                BranchTargets(
                    row=i,
                    cls_assign=assign,
                    cls_weights=np.ones(assign.gt_boxes.shape[0]),
                    reg_assign=assign,
                )
            )
        unsup_targets = []
        if use_unsup:
            offset = len(labeled_batch)
            for j, ps in enumerate(pseudo_sets):
                row = offset + j
                cls_boxes = np.array(
                    [d.box.as_tuple() for d, _ in ps.cls_branch]
                ).reshape(-1, 4)
                weights = np.array([w for _, w in ps.cls_branch])
                reg_boxes = np.array(
                    [b.as_tuple() for b in ps.reg_branch]
                ).reshape(-1, 4)
                unsup_targets.append(
                    BranchTargets(
                        row=row,
                        cls_assign=assign_targets(anchors, cls_boxes, pred_boxes[row]),
                        cls_weights=weights,
                        reg_assign=assign_targets(anchors, reg_boxes, pred_boxes[row]),
                    )
                )

        total, breakdown = assemble(
            probs, deltas, anchors, sup_targets, unsup_targets, lam,
            gamma=cfg.focal_gamma, alpha=cfg.focal_alpha,
        )
        ad.backward(total)
    state.last_tape = tape

    sgd_step(state, lr_at(cfg, state.iteration))
    state.iteration += 1
    if state.teacher_live:
        ema_update(state.teacher, student, cfg.ema_alpha)
    return breakdown


# -------------------------------------------------------------------- run


@dataclass
class RunArtifacts:
    out_dir: str
    metrics_csv: str
    student_final: str | None
    teacher_final: str | None
    eval_final: str | None
    final_report: dict | None = None


def build_detector_config(cfg: ExperimentConfig) -> DetectorConfig:
    return DetectorConfig(
        anchors=AnchorConfig(stride=cfg.anchor_stride, scales=tuple(cfg.anchor_scales)),
        encoder=DexEncoderConfig(
            num_dilated_blocks=len(cfg.dilation_rates),
            dilation_rates=tuple(cfg.dilation_rates),
            use_deformable=cfg.dex,
        ),
        dtype=cfg.precision,
    )


def _fmt(v: float) -> str:
    return repr(float(v))


def _evaluate_model(model: Detector, manifest: DatasetManifest, ids: list[int],
                    batch: int = 8):
    dets_all: list[list[Detection]] = []
    gts_all: list[np.ndarray] = []
    rng = np.random.default_rng(0)  # profile "none" ignores randomness
    for i in range(0, len(ids), batch):
        chunk = ids[i : i + batch]
        samples = load_batch(manifest, chunk, "none", rng)
        imgs = _stack_images(samples, model.np_dtype)
        dets_all.extend(model.infer_batch(imgs))
        gts_all.extend(s.boxes for s in samples)
    return dets_all, gts_all


def run(config: ExperimentConfig) -> RunArtifacts:
    """Execute a full training run and write all artifacts."""
    config.validate()
    out_dir = config.out_dir
    os.makedirs(out_dir, exist_ok=True)
    config.save(os.path.join(out_dir, "config.txt"))

    manifest = DatasetManifest.load(os.path.join(config.dataset_dir, "manifest.json"))
    if config.labeled_fraction > 0:
        manifest = split_manifest(manifest, config.labeled_fraction, config.seed)
    if not manifest.labeled_ids and not manifest.unlabeled_ids:
        manifest = split_manifest(manifest, 1.0, config.seed)
    test_path = os.path.join(config.dataset_dir, "test_manifest.json")
    test_manifest = DatasetManifest.load(test_path) if os.path.exists(test_path) else None

    student = Detector(build_detector_config(config), derive_rng(config.seed, _TAG_INIT))
    teacher = student.clone()
    state = TrainState(config=config, student=student, teacher=teacher)

    ckpt = lambda name: os.path.join(out_dir, name)
    student.save(ckpt("student_init.ckpt"), {"iteration": 0})

    metrics_path = os.path.join(out_dir, "metrics.csv")
    csv_lines = [CSV_HEADER]

    if config.iterations == 0:
        with open(metrics_path, "w", encoding="utf-8") as f:
            f.write("\n".join(csv_lines) + "\n")
        return RunArtifacts(out_dir, metrics_path, None, None, None)

    sampler = derive_rng(config.seed, _TAG_SAMPLER)
    labeled_pool = list(manifest.labeled_ids)
    unlabeled_pool = list(manifest.unlabeled_ids)
    if not labeled_pool:
        raise ValueError("dataset has no labeled images")

    t_start = time.monotonic()
    for it in range(config.iterations):
        if it == config.burn_in and config.iterations > config.burn_in:
            # hand the burned-in student to the teacher, then track by EMA
            teacher.load_state_arrays(
                [(n, a.copy()) for n, a in student.state_arrays()]
            )
            state.teacher_live = True

        in_burn_in = it < config.burn_in
        use_unsup = (not in_burn_in) and config.effective_lambda != 0.0
        # round half up so sr=0.5 with batch 2 still draws one labeled image
        k_sr = int(np.floor(sr_at(config, it) * config.batch_size + 0.5))
        if in_burn_in or not use_unsup:
            k_lab = config.batch_size if in_burn_in else k_sr
            k_unlab = 0
        else:
            k_lab = k_sr
            k_unlab = config.batch_size - k_lab
        k_lab = min(k_lab, len(labeled_pool)) if labeled_pool else 0
        k_unlab = min(k_unlab, len(unlabeled_pool)) if unlabeled_pool else 0

        lab_ids = sorted(
            int(i) for i in sampler.choice(labeled_pool, size=k_lab, replace=False)
        ) if k_lab else []
        unlab_ids = sorted(
            int(i) for i in sampler.choice(unlabeled_pool, size=k_unlab, replace=False)
        ) if k_unlab else []

        aug_rng = derive_rng(config.seed, _TAG_AUG, it)
        labeled_batch = load_batch(manifest, lab_ids, "labeled", aug_rng)
        unlabeled_batch = None
        if unlab_ids:
            teacher_samples = load_batch(
                manifest, unlab_ids, "unlabeled_teacher", aug_rng,
                teacher_strong=config.teacher_strong_aug,
            )
            student_samples = load_batch(manifest, unlab_ids, "unlabeled_student", aug_rng)
            unlabeled_batch = [
                UnlabeledPair(t, s) for t, s in zip(teacher_samples, student_samples)
            ]

        bd = train_step(state, labeled_batch, unlabeled_batch)

        do_eval = ((it + 1) % config.eval_interval == 0) or (it == config.iterations - 1)
        map_s = ap50_s = ap75_s = ""
        if do_eval and test_manifest is not None:
            eval_model = teacher if state.teacher_live else student
            dets, gts = _evaluate_model(eval_model, test_manifest,
                                        [e.id for e in test_manifest.images])
            report = evaluate_detections(dets, gts)
            map_s, ap50_s, ap75_s = _fmt(report.map), _fmt(report.ap50), _fmt(report.ap75)
        csv_lines.append(
            f"{it},{_fmt(bd.l_sup_cls)},{_fmt(bd.l_sup_reg)},"
            f"{_fmt(bd.l_unsup_cls)},{_fmt(bd.l_unsup_reg)},{_fmt(bd.total)},"
            f"{map_s},{ap50_s},{ap75_s},"
            f"{state.last_pseudo_count},{_fmt(state.last_pseudo_conf)}"
        )

        if config.checkpoint_interval and (it + 1) % config.checkpoint_interval == 0:
            student.save(ckpt(f"student_{it + 1:06d}.ckpt"), {"iteration": it + 1})
            teacher.save(ckpt(f"teacher_{it + 1:06d}.ckpt"), {"iteration": it + 1})

    with open(metrics_path, "w", encoding="utf-8") as f:
        f.write("\n".join(csv_lines) + "\n")

    student.save(ckpt("student_final.ckpt"), {"iteration": config.iterations})
    teacher.save(ckpt("teacher_final.ckpt"), {"iteration": config.iterations})

    final_report = None
    eval_path = None
    if test_manifest is not None:
        eval_model = teacher if state.teacher_live else student
        dets, gts = _evaluate_model(eval_model, test_manifest,
                                    [e.id for e in test_manifest.images])
        pstats = None
        if unlabeled_pool:
            sample_ids = unlabeled_pool[: min(50, len(unlabeled_pool))]
            psets = []
            pgts = []
            rng = np.random.default_rng(0)
            for i in range(0, len(sample_ids), 8):
                chunk = sample_ids[i : i + 8]
                samples = load_batch(manifest, chunk, "none", rng)
                imgs = _stack_images(samples, eval_model.np_dtype)
                for img_id, det_list in zip(chunk, eval_model.infer_batch(imgs)):
                    psets.append(confidence_filter(det_list, config.sigma))
                    pgts.append(manifest.boxes_for(img_id))
            pstats = pseudo_quality(psets, pgts)
        report = evaluate_detections(dets, gts, pseudo_stats=pstats)
        eval_path = os.path.join(out_dir, "eval_final.json")
        report.save(eval_path)
        final_report = report.to_json_dict()

    elapsed = time.monotonic() - t_start
    print(f"run complete: {config.iterations} iterations in {elapsed:.1f}s -> {out_dir}")
    return RunArtifacts(
        out_dir=out_dir,
        metrics_csv=metrics_path,
        student_final=ckpt("student_final.ckpt"),
        teacher_final=ckpt("teacher_final.ckpt"),
        eval_final=eval_path,
        final_report=final_report,
    )
