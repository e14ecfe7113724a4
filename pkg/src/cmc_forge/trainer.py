"""Two-stage dual student-teacher training loop.

Per step: strong-augment student inputs and weak-augment teacher inputs,
forward all four nets, combine supervised cross-entropy, confidence-
weighted KL consistency and (once the ramp is active) the bidirectional
cross-modal loss into per-student gradients, take one adaptive-moment step
per student, then EMA both teachers. Every random decision derives from
(run seed, epoch, step, view, purpose), so runs are bit-reproducible,
resumable, and the two branches stay decoupled whenever the cross-modal
weight is zero.
"""

import csv
import hashlib
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from cmc_forge import container, evalharness
from cmc_forge.config import ExperimentConfig, Schedule, config_hash, save_config
from cmc_forge.dataset import Benchmark
from cmc_forge.errors import ConfigError, NumericError
from cmc_forge.losses import (
    LossReport,
    cmc_loss,
    confidence_weight,
    consistency_kl,
    supervised_ce,
    total_objective,
)
from cmc_forge.nets import (
    IDENTITY_SPEC,
    BranchState,
    augment_points,
    augment_view,
    ema_update,
    init_branch,
    optimizer_step,
    point_inputs,
)
from cmc_forge.sampling import (
    correspondences_only_sample,
    eligible_pools,
    random_sample,
    view_aware_sample,
)
from cmc_forge.seeding import rng_for

LOSS_COLUMNS = ["epoch", "step", "lambda_2d", "lambda_3d"] + LossReport.csv_header()
METRIC_COLUMNS = [
    "epoch",
    "miou_2d_teacher",
    "miou_2d_student",
    "miou_3d_teacher_true",
    "miou_3d_teacher_unproj",
]


def lambda_at(epoch: int, schedule: Schedule) -> tuple[float, float]:
    """Cross-modal weights for a (0-indexed) epoch: zero during base
    training, linear over the ramp, then constant."""
    if epoch < 0:
        raise ConfigError("epoch must be >= 0")
    if epoch < schedule.base_epochs:
        return 0.0, 0.0
    if schedule.ramp_epochs == 0:
        frac = 1.0
    else:
        frac = min(1.0, (epoch - schedule.base_epochs) / schedule.ramp_epochs)
    return frac * schedule.lambda_max_2d, frac * schedule.lambda_max_3d


def draw_sample(cloud, view, config: ExperimentConfig, sample_seed: int, pools=None):
    radius = config.context_radius_factor * cloud.scene_scale
    if config.sampling_strategy == "view_aware":
        return view_aware_sample(
            cloud, view, config.sample_budget, config.view_fraction, radius, sample_seed, pools=pools
        )
    if config.sampling_strategy == "random":
        return random_sample(cloud, view, config.sample_budget, sample_seed)
    return correspondences_only_sample(cloud, view, config.sample_budget, sample_seed)


@dataclass
class StepItem:
    """One view's worth of inputs for a training step."""

    view: object
    label_map: object
    cloud: object
    sample: object


def train_step(
    branches: dict,
    batch: list,
    *,
    config: ExperimentConfig,
    lambda_2d: float,
    lambda_3d: float,
    run_seed: int,
    epoch: int,
    step: int,
) -> LossReport:
    """One optimization step over a batch of views; mutates ``branches``.

    Branch objectives are means over the whole batch; the cross-modal terms
    are weight-normalized over the batch correspondence set. Teachers are
    constants throughout and receive only their EMA update at the end.
    """
    if not batch:
        raise ConfigError("empty batch")
    b2d = branches["2d"]
    b3d = branches.get("3d") if config.enable_3d else None
    class_count = batch[0].view.class_count
    weak_spec = config.augment_weak if config.teacher_augmentation == "weak" else IDENTITY_SPEC
    use_cmc = b3d is not None and (lambda_2d > 0.0 or lambda_3d > 0.0)

    per_view = []
    for item in batch:
        view = item.view
        vid = view.view_id
        h, w, f = view.features.shape
        strong, idx_s = augment_view(
            view.features, config.augment_strong, rng_for(run_seed, epoch, step, vid, "aug2d-student")
        )
        weak, idx_t = augment_view(view.features, weak_spec, rng_for(run_seed, epoch, step, vid, "aug2d-teacher"))
        ann = item.label_map.labels.ravel()
        inc_s = idx_s >= 0
        inc_t = idx_t >= 0
        rec = {
            "x2": strong.reshape(h * w, f),
            "xt2": weak.reshape(h * w, f),
            "labeled2": (ann < class_count) & inc_s,
            "unlabeled2": (ann >= class_count) & inc_s & inc_t,
            "ann": ann,
            "inc_s": inc_s,
            "inc_t": inc_t,
            "n2": h * w,
        }
        if b3d is not None:
            cloud, sample = item.cloud, item.sample
            idx = sample.point_indices
            pos = cloud.positions[idx]
            pos_s, _ = augment_points(pos, config.augment_strong, rng_for(run_seed, epoch, step, vid, "aug3d-student"))
            pos_t, _ = augment_points(pos, weak_spec, rng_for(run_seed, epoch, step, vid, "aug3d-teacher"))
            rec["x3"] = point_inputs(cloud, idx, positions=pos_s)
            rec["xt3"] = point_inputs(cloud, idx, positions=pos_t)
            rec["labels3"] = cloud.sparse_labels[idx]
            rec["n3"] = idx.size
        per_view.append(rec)

    # One forward per net over the concatenated batch.
    x2 = np.concatenate([r["x2"] for r in per_view])
    ls2, hidden2 = b2d.student.forward(x2, return_hidden=True)
    lt2 = b2d.teacher.forward(np.concatenate([r["xt2"] for r in per_view]))
    labeled2 = np.concatenate([r["labeled2"] for r in per_view])
    unlabeled2 = np.concatenate([r["unlabeled2"] for r in per_view])
    ann2 = np.concatenate([r["ann"] for r in per_view])
    sup_labels = np.where(labeled2, ann2, class_count)
    sup_2d, g_sup2 = supervised_ce(ls2, sup_labels)
    cons_2d, g_cons2 = consistency_kl(ls2, lt2, unlabeled2)
    w2d = confidence_weight(lt2[unlabeled2], config.tau)
    grad_logits2 = (1.0 - config.beta) * g_sup2 + config.beta * w2d * g_cons2

    sup_3d = cons_3d = w3d = 0.0
    cross_2d = cross_3d = 0.0
    n_corr2 = n_corr3 = 0
    n_lab3 = n_unl3 = 0
    grad_logits3 = None
    if b3d is not None:
        x3 = np.concatenate([r["x3"] for r in per_view])
        ls3, hidden3 = b3d.student.forward(x3, return_hidden=True)
        lt3 = b3d.teacher.forward(np.concatenate([r["xt3"] for r in per_view]))
        labels3 = np.concatenate([r["labels3"] for r in per_view])
        unlabeled3 = labels3 >= class_count
        sup_3d, g_sup3 = supervised_ce(ls3, labels3)
        cons_3d, g_cons3 = consistency_kl(ls3, lt3, unlabeled3)
        w3d = confidence_weight(lt3[unlabeled3], config.tau)
        grad_logits3 = (1.0 - config.beta) * g_sup3 + config.beta * w3d * g_cons3
        n_lab3 = int(np.count_nonzero(~unlabeled3))
        n_unl3 = int(np.count_nonzero(unlabeled3))

    if use_cmc:
        # Correspondence rows, batch-concatenated per direction.
        to2d_student_rows, to2d_teacher, to2d_conf = [], [], []
        to3d_student_rows, to3d_teacher, to3d_conf = [], [], []
        pix_base = 0
        pt_base = 0
        for item, rec in zip(batch, per_view):
            view, cloud, sample = item.view, item.cloud, item.sample
            w_img = view.intrinsics.width
            corr = np.nonzero(sample.correspondence_mask)[0]
            pts = sample.point_indices[corr]
            pix = cloud.source_v[pts] * w_img + cloud.source_u[pts]
            conf = cloud.rec_confidence[pts]
            keep_s = rec["inc_s"][pix]  # 2D student pixels surviving strong crop/cutout
            keep_t = rec["inc_t"][pix]  # 2D teacher pixels surviving weak augmentation
            to2d_student_rows.append(pix_base + pix[keep_s])
            to2d_teacher.append(lt3[pt_base + corr[keep_s]])
            to2d_conf.append(conf[keep_s])
            to3d_student_rows.append(pt_base + corr[keep_t])
            to3d_teacher.append(lt2[pix_base + pix[keep_t]])
            to3d_conf.append(conf[keep_t])
            pix_base += rec["n2"]
            pt_base += rec["n3"]

        rows2 = np.concatenate(to2d_student_rows)
        n_corr2 = rows2.size
        cross_2d, g_c2 = cmc_loss(
            ls2[rows2],
            np.concatenate(to2d_teacher),
            np.concatenate(to2d_conf),
            mode=config.confidence_mode,
            normalize=not config.cmc_raw_sum,
        )
        np.add.at(grad_logits2, rows2, lambda_2d * g_c2)

        rows3 = np.concatenate(to3d_student_rows)
        n_corr3 = rows3.size
        cross_3d, g_c3 = cmc_loss(
            ls3[rows3],
            np.concatenate(to3d_teacher),
            np.concatenate(to3d_conf),
            mode=config.confidence_mode,
            normalize=not config.cmc_raw_sum,
        )
        np.add.at(grad_logits3, rows3, lambda_3d * g_c3)

    # Backward through the students over the whole batch at once.
    grad2 = b2d.student.backward(x2, grad_logits2, hidden=hidden2)
    if b3d is not None:
        grad3 = b3d.student.backward(x3, grad_logits3, hidden=hidden3)

    report = total_objective(
        sup_2d=sup_2d,
        cons_2d=cons_2d,
        conf_weight_2d=w2d,
        sup_3d=sup_3d,
        cons_3d=cons_3d,
        conf_weight_3d=w3d,
        cross_2d=cross_2d,
        cross_3d=cross_3d,
        beta=config.beta,
        lambda_2d=lambda_2d if use_cmc else 0.0,
        lambda_3d=lambda_3d if use_cmc else 0.0,
        counts={
            "n_labeled_2d": int(np.count_nonzero(labeled2)),
            "n_unlabeled_2d": int(np.count_nonzero(unlabeled2)),
            "n_corr_2d": n_corr2,
            "n_labeled_3d": n_lab3,
            "n_unlabeled_3d": n_unl3,
            "n_corr_3d": n_corr3,
        },
    )
    if not np.isfinite(report.total):
        raise NumericError(f"non-finite loss at epoch {epoch} step {step}")

    optimizer_step(b2d, grad2, lr=config.schedule.lr_2d, weight_decay=config.weight_decay_2d)
    if b3d is not None:
        optimizer_step(b3d, grad3, lr=config.schedule.lr_3d, weight_decay=config.weight_decay_3d)
    ema_update(b2d, config.ema_alpha)
    if b3d is not None:
        ema_update(b3d, config.ema_alpha)
    return report


def init_branches(config: ExperimentConfig, feature_dim: int, class_count: int) -> dict:
    """Fresh branch states; identical across variants that share seed and
    model dimensions (the derivation ignores every other config field)."""
    branches = {
        "2d": init_branch("2d", feature_dim, config.hidden_dim, class_count, rng_for(config.seed, "init-2d"))
    }
    if config.enable_3d:
        branches["3d"] = init_branch(
            "3d", feature_dim + 3, config.hidden_dim, class_count, rng_for(config.seed, "init-3d")
        )
    return branches


def save_checkpoint(path, branches: dict, epoch: int, cfg_hash: str) -> None:
    tensors = {}
    meta = {"kind": "checkpoint", "epoch": epoch, "config_hash": cfg_hash, "modalities": sorted(branches)}
    for name, state in branches.items():
        tensors[f"{name}_student"] = state.student.params
        tensors[f"{name}_teacher"] = state.teacher.params
        tensors[f"{name}_moment1"] = state.moment1
        tensors[f"{name}_moment2"] = state.moment2
        meta[f"{name}_step_count"] = state.step_count
        meta[f"{name}_dims"] = [state.student.in_dim, state.student.hidden_dim, state.student.out_dim]
    container.save_tensors(path, tensors, meta)


def load_checkpoint(path) -> tuple[dict, int, str]:
    from cmc_forge.nets import MicroNet

    tensors, meta = container.load_tensors(path)
    if meta.get("kind") != "checkpoint":
        raise ConfigError(f"{path} is not a checkpoint")
    branches = {}
    for name in meta["modalities"]:
        i, h, o = meta[f"{name}_dims"]
        branches[name] = BranchState(
            modality=name,
            student=MicroNet(i, h, o, tensors[f"{name}_student"]),
            teacher=MicroNet(i, h, o, tensors[f"{name}_teacher"]),
            moment1=tensors[f"{name}_moment1"],
            moment2=tensors[f"{name}_moment2"],
            step_count=int(meta[f"{name}_step_count"]),
        )
    return branches, int(meta["epoch"]), str(meta["config_hash"])


def _evaluate(branches: dict, benchmark: Benchmark, epoch: int) -> dict:
    b2d = branches["2d"]
    row = {
        "epoch": epoch,
        "miou_2d_teacher": evalharness.eval_2d(b2d.teacher, benchmark.views),
        "miou_2d_student": evalharness.eval_2d(b2d.student, benchmark.views),
        "miou_3d_teacher_true": float("nan"),
        "miou_3d_teacher_unproj": float("nan"),
    }
    if "3d" in branches:
        row["miou_3d_teacher_true"] = evalharness.eval_3d_benchmark(branches["3d"].teacher, benchmark, "true_3d")
        row["miou_3d_teacher_unproj"] = evalharness.eval_3d_benchmark(
            branches["3d"].teacher, benchmark, "unprojected_2d"
        )
    return row


def _write_csv_atomic(path: Path, columns: list, rows: list) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow(row)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(buf.getvalue())
    tmp.replace(path)


@dataclass
class RunResult:
    out_dir: Path
    config_hash: str
    metrics: list  # metric rows as dicts, initial state first
    loss_rows: list

    @property
    def final(self) -> dict:
        return self.metrics[-1]


def run_experiment(
    config: ExperimentConfig,
    benchmark: Benchmark,
    out_dir,
    resume_from=None,
) -> RunResult:
    """Execute a full training run and write its artifact directory.

    Layout: config.json (canonical), losses.csv (one row per step),
    metrics.csv (initial state plus the evaluation cadence),
    checkpoints/epoch_NNN.bin and MANIFEST with content hashes. All writes
    go through temp-file-plus-rename; the config hash is recorded in every
    artifact.
    """
    config.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "checkpoints").mkdir(exist_ok=True)
    cfg_hash = config_hash(config)
    save_config(config, out_dir / "config.json")

    feature_dim = config.data.features.feature_dim
    class_count = config.data.scene.class_count
    start_epoch = 0
    if resume_from is None:
        branches = init_branches(config, feature_dim, class_count)
    else:
        branches, start_epoch, ckpt_hash = load_checkpoint(resume_from)
        if ckpt_hash != cfg_hash:
            raise ConfigError(f"checkpoint config hash {ckpt_hash} does not match config {cfg_hash}")

    loss_rows = []
    metric_rows = [_evaluate(branches, benchmark, start_epoch)]
    views = benchmark.views
    schedule = config.schedule
    last_checkpoint = None

    # Sampling pools are static per (cloud, view); compute them once.
    pool_cache = {}
    if config.enable_3d and config.sampling_strategy == "view_aware":
        radius = config.context_radius_factor * config.data.scene.scene_scale
        for view in views:
            cloud = benchmark.bundle_of_view(view.view_id).cloud_for_view(view.view_id)
            pool_cache[view.view_id] = eligible_pools(cloud, view, radius)

    try:
        for epoch in range(start_epoch, schedule.total_epochs):
            lam2, lam3 = lambda_at(epoch, schedule)
            order = rng_for(config.seed, "epoch-order", epoch).permutation(len(views))
            sample_seed = int(rng_for(config.seed, "sample-seed", epoch).integers(0, 2**31 - 1))
            for step, start in enumerate(range(0, len(order), schedule.batch_size)):
                batch = []
                for vi in order[start : start + schedule.batch_size]:
                    view = views[vi]
                    bundle = benchmark.bundle_of_view(view.view_id)
                    cloud = bundle.cloud_for_view(view.view_id)
                    sample = (
                        draw_sample(cloud, view, config, sample_seed, pools=pool_cache.get(view.view_id))
                        if config.enable_3d
                        else None
                    )
                    batch.append(
                        StepItem(
                            view=view,
                            label_map=bundle.label_maps[view.view_id],
                            cloud=cloud,
                            sample=sample,
                        )
                    )
                report = train_step(
                    branches,
                    batch,
                    config=config,
                    lambda_2d=lam2,
                    lambda_3d=lam3,
                    run_seed=config.seed,
                    epoch=epoch,
                    step=step,
                )
                loss_rows.append(
                    [str(epoch), str(step), f"{lam2:.17g}", f"{lam3:.17g}"] + report.csv_row()
                )

            done = epoch + 1
            if done % config.eval_every == 0 or done == schedule.total_epochs:
                metric_rows.append(_evaluate(branches, benchmark, done))
            if done % config.checkpoint_every == 0 or done == schedule.total_epochs:
                ckpt = out_dir / "checkpoints" / f"epoch_{done:03d}.bin"
                save_checkpoint(ckpt, branches, done, cfg_hash)
                last_checkpoint = ckpt
    except NumericError as exc:
        note = out_dir / "ABORTED"
        note.write_text(f"{exc}\nlast good checkpoint: {last_checkpoint}\n")
        raise

    if schedule.total_epochs == 0 and last_checkpoint is None:
        ckpt = out_dir / "checkpoints" / "epoch_000.bin"
        save_checkpoint(ckpt, branches, 0, cfg_hash)

    _write_csv_atomic(
        out_dir / "losses.csv",
        ["config_hash"] + LOSS_COLUMNS,
        [[cfg_hash] + row for row in loss_rows],
    )
    _write_csv_atomic(
        out_dir / "metrics.csv",
        ["config_hash"] + METRIC_COLUMNS,
        [[cfg_hash] + [f"{row[c]:.17g}" if isinstance(row[c], float) else str(row[c]) for c in METRIC_COLUMNS] for row in metric_rows],
    )

    manifest = []
    for path in sorted(out_dir.rglob("*")):
        if path.is_file() and path.name != "MANIFEST":
            digest = hashlib.sha256(path.read_bytes()).hexdigest()
            manifest.append(f"{digest}  {path.relative_to(out_dir)}")
    tmp = out_dir / "MANIFEST.tmp"
    tmp.write_text("\n".join(manifest) + "\n")
    tmp.replace(out_dir / "MANIFEST")

    return RunResult(out_dir=out_dir, config_hash=cfg_hash, metrics=metric_rows, loss_rows=loss_rows)
