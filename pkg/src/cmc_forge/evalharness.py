"""Metrics, paired trend statistics, and the ablation suites.

mIoU is computed from a ground-truth-by-prediction confusion matrix with
void/unlabeled ground truth excluded. Trend experiments run variant pairs
on shared per-seed datasets and initializations (fingerprint-verified) and
report mean improvement plus a one-sided sign test.
"""

import csv
import dataclasses
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from cmc_forge import worldgen
from cmc_forge.errors import ConfigError, ContractError, DomainError
from cmc_forge.nets import MicroNet, forward_2d, point_inputs


def confusion_matrix(gt: np.ndarray, pred: np.ndarray, class_count: int) -> np.ndarray:
    """C x C counts, rows = ground truth, cols = prediction.

    Ground-truth entries >= class_count (void / unlabeled) are excluded;
    predictions must be valid class ids.
    """
    gt = np.asarray(gt).ravel()
    pred = np.asarray(pred).ravel()
    if gt.shape != pred.shape:
        raise ContractError("ground truth and prediction sizes differ")
    keep = gt < class_count
    gt, pred = gt[keep], pred[keep]
    if pred.size and (pred.min() < 0 or pred.max() >= class_count):
        raise ContractError("prediction contains an invalid class id")
    flat = gt * class_count + pred
    counts = np.bincount(flat, minlength=class_count * class_count)
    return counts.reshape(class_count, class_count)


def miou(confusion: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-class IoU (nan where the class has no mass) and mean IoU in percent.

    IoU_c = TP / (TP + FP + FN); classes absent from both ground truth and
    predictions are excluded from the mean.
    """
    confusion = np.asarray(confusion, dtype=np.float64)
    if confusion.ndim != 2 or confusion.shape[0] != confusion.shape[1]:
        raise ContractError("confusion matrix must be square")
    tp = np.diag(confusion)
    denom = confusion.sum(axis=1) + confusion.sum(axis=0) - tp
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(denom > 0, tp / denom, np.nan)
    if not np.any(denom > 0):
        raise DomainError("confusion matrix has no class with any mass")
    return iou, float(np.nanmean(iou) * 100.0)


def supervision_gap(weak_miou: float, full_miou: float) -> float:
    """Weakly supervised score as a percentage of the fully supervised one."""
    if full_miou == 0:
        raise DomainError("fully supervised mIoU must be nonzero")
    return 100.0 * weak_miou / full_miou


def predict_view(net: MicroNet, view) -> np.ndarray:
    return forward_2d(net, view.features).argmax(axis=2)


def eval_2d(net: MicroNet, views) -> float:
    """Teacher/student 2D mIoU over full ground-truth rasters (void excluded)."""
    class_count = views[0].class_count
    feats = np.concatenate([v.features.reshape(-1, v.features.shape[2]) for v in views])
    gt = np.concatenate([v.gt_labels.ravel() for v in views])
    pred = net.forward(feats).argmax(axis=1)
    return miou(confusion_matrix(gt, pred, class_count))[1]


def _cloud_reference(cloud, reference: str, scene=None, views=None) -> np.ndarray:
    if reference == "true_3d":
        if scene is None:
            raise ConfigError("true_3d reference needs the scene geometry")
        return worldgen.nearest_class(scene, cloud.positions)
    if reference == "unprojected_2d":
        if views is None:
            raise ConfigError("unprojected_2d reference needs the source views")
        by_id = {v.view_id: v for v in views}
        labels = np.empty(len(cloud), dtype=np.int64)
        for view_id in np.unique(cloud.source_view):
            sel = cloud.source_view == view_id
            raster = by_id[int(view_id)].gt_labels
            labels[sel] = raster[cloud.source_v[sel], cloud.source_u[sel]]
        return labels
    raise ConfigError(f"unknown 3D reference {reference!r}")


def eval_3d(net: MicroNet, cloud, reference: str, scene=None, views=None) -> float:
    """3D mIoU of a point head against true geometry or unprojected masks."""
    ref = _cloud_reference(cloud, reference, scene=scene, views=views)
    if not np.any(ref < cloud.class_count):
        raise DomainError("3D reference labels cover no points")
    idx = np.arange(len(cloud))
    pred = net.forward(point_inputs(cloud, idx)).argmax(axis=1)
    return miou(confusion_matrix(ref, pred, cloud.class_count))[1]


def eval_3d_benchmark(net: MicroNet, benchmark, reference: str) -> float:
    """3D mIoU accumulated over every cloud of a benchmark.

    Reference labels and stacked point inputs are static per benchmark and
    cached on it across evaluation calls.
    """
    class_count = benchmark.params.scene.class_count
    cache = getattr(benchmark, "_eval3d_cache", None)
    if cache is None:
        cache = {}
        benchmark._eval3d_cache = cache
    key = reference
    if key not in cache:
        inputs, refs = [], []
        for bundle in benchmark.bundles:
            clouds = [bundle.cloud] if bundle.cloud is not None else list(bundle.per_view_clouds.values())
            for cloud in clouds:
                refs.append(_cloud_reference(cloud, reference, scene=bundle.scene, views=bundle.views))
                inputs.append(point_inputs(cloud, np.arange(len(cloud))))
        cache[key] = (np.concatenate(inputs), np.concatenate(refs))
    inputs, refs = cache[key]
    pred = net.forward(inputs).argmax(axis=1)
    return miou(confusion_matrix(refs, pred, class_count))[1]


def sign_test_p(diffs) -> float:
    """One-sided sign test p-value for the hypothesis 'variant > baseline'.

    Zero differences are dropped; with no informative pairs p = 1.
    """
    diffs = [d for d in diffs if d != 0]
    n = len(diffs)
    if n == 0:
        return 1.0
    wins = sum(1 for d in diffs if d > 0)
    return sum(math.comb(n, k) for k in range(wins, n + 1)) / 2.0**n


def spearman_rho(x, y) -> float:
    rho = stats.spearmanr(x, y).statistic
    return float(rho)


@dataclass(frozen=True)
class TrendResult:
    """Paired comparison of one variant against its baseline across seeds."""

    variant: str
    baseline: str
    seeds: tuple
    variant_scores: tuple
    baseline_scores: tuple
    mean: float
    baseline_mean: float
    mean_improvement: float
    p_value: float

    @property
    def improvements(self) -> list:
        return [v - b for v, b in zip(self.variant_scores, self.baseline_scores)]

    @property
    def max_regression(self) -> float:
        return max(0.0, -min(self.improvements))

    def passes(self, regression_tolerance: float = 1.0) -> bool:
        """Relaxed acceptance rule: significant, or non-negative on average
        with no seed regressing beyond the tolerance."""
        if self.p_value <= 0.05:
            return True
        return self.mean_improvement >= 0.0 and self.max_regression <= regression_tolerance


def paired_trend(variant: str, baseline: str, seeds, variant_scores, baseline_scores) -> TrendResult:
    if len(variant_scores) != len(baseline_scores) or len(variant_scores) != len(seeds):
        raise ContractError("paired comparison requires one score per seed on both sides")
    improvements = [v - b for v, b in zip(variant_scores, baseline_scores)]
    return TrendResult(
        variant=variant,
        baseline=baseline,
        seeds=tuple(seeds),
        variant_scores=tuple(variant_scores),
        baseline_scores=tuple(baseline_scores),
        mean=float(np.mean(variant_scores)),
        baseline_mean=float(np.mean(baseline_scores)),
        mean_improvement=float(np.mean(improvements)),
        p_value=sign_test_p(improvements),
    )


# ---------------------------------------------------------------------------
# Ablation suites


def _edit(config, **changes):
    return dataclasses.replace(config, **changes)


def _edit_data(config, **changes):
    return dataclasses.replace(config, data=dataclasses.replace(config.data, **changes))


def _ema_variant(config):
    schedule = dataclasses.replace(config.schedule, lambda_max_2d=0.0, lambda_max_3d=0.0)
    return dataclasses.replace(config, schedule=schedule)


def suite_variants(suite: str, base_config) -> tuple[dict, list]:
    """Variant configs plus the (variant, baseline) comparison pairs."""
    if suite == "baseline":
        variants = {"ema": _ema_variant(base_config), "cross_modal": base_config}
        pairs = [("cross_modal", "ema")]
    elif suite == "confidence":
        variants = {
            "no_filtering": _edit(base_config, confidence_mode="none"),
            "prediction_conf": _edit(base_config, confidence_mode="pred"),
            "reconstruction_conf": _edit(base_config, confidence_mode="recon"),
            "dual_conf": _edit(base_config, confidence_mode="both"),
        }
        pairs = [
            ("prediction_conf", "no_filtering"),
            ("reconstruction_conf", "no_filtering"),
            ("dual_conf", "no_filtering"),
        ]
    elif suite == "sampling":
        variants = {
            "random_sampling": _edit(base_config, sampling_strategy="random"),
            "view_aware": _edit(base_config, sampling_strategy="view_aware"),
        }
        pairs = [("view_aware", "random_sampling")]
    elif suite == "recon_quality":
        variants = {
            "single_frame": _edit_data(base_config, recon_scope="single_frame"),
            "multi_view": _edit_data(base_config, recon_scope="multi_view"),
        }
        pairs = [("multi_view", "single_frame")]
    elif suite == "simulated_lidar":
        variants = {
            "simulated_lidar": _edit(
                _edit_data(base_config, recon_density="single_scan"), confidence_mode="pred"
            ),
            "dense_dual": _edit(_edit_data(base_config, recon_density="full"), confidence_mode="both"),
        }
        pairs = [("dense_dual", "simulated_lidar")]
    elif suite == "scribble_length":
        variants = {}
        pairs = []
        for length in (0.1, 0.4, 0.7, 1.0):
            tag = f"{length:.2f}"
            with_len = _edit_data(base_config, annotation_kind="scribbles", scribble_length=length)
            variants[f"cross_modal@{tag}"] = with_len
            variants[f"ema@{tag}"] = _ema_variant(with_len)
            pairs.append((f"cross_modal@{tag}", f"ema@{tag}"))
    else:
        raise ConfigError(f"unknown ablation suite {suite!r}")
    return variants, pairs


SUITES = ("baseline", "confidence", "sampling", "recon_quality", "scribble_length", "simulated_lidar")


def run_ablation_suite(
    suite: str,
    seeds,
    base_config,
    out_dir,
    threads: int = 1,
    metric: str = "miou_2d_teacher",
) -> list[TrendResult]:
    """Run every suite variant on shared per-seed data and pair the results.

    Each (variant, seed) run writes a full artifact directory under
    out_dir/runs. Paired runs are fingerprint-checked: both sides must see
    byte-identical views and annotations. Results land in
    out_dir/<suite>_trends.csv; the returned TrendResults use ``metric``
    from the final evaluation row.
    """
    import json

    from cmc_forge import trainer
    from cmc_forge.config import _to_jsonable
    from cmc_forge.dataset import build_benchmark, dataset_fingerprint

    seeds = list(seeds)
    if len(seeds) < 5:
        raise ConfigError("trend suites need at least 5 seeds")
    variants, pairs = suite_variants(suite, base_config)
    if len(variants) < 2:
        raise ConfigError("a suite needs at least 2 variants")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def bench_key(seed, config):
        return (seed, json.dumps(_to_jsonable(config.data), sort_keys=True))

    # One benchmark per distinct (seed, data params); variants reuse them.
    benchmarks = {}
    fingerprints = {}
    for seed in seeds:
        for config in variants.values():
            key = bench_key(seed, config)
            if key not in benchmarks:
                benchmarks[key] = build_benchmark(config.data, seed, threads=1)

    jobs = []
    for name, config in variants.items():
        for seed in seeds:
            jobs.append((name, seed, dataclasses.replace(config, seed=seed)))

    scores = {}

    def run_job(job):
        name, seed, config = job
        benchmark = benchmarks[bench_key(seed, config)]
        run_dir = out_dir / "runs" / name.replace("@", "_") / f"seed_{seed}"
        result = trainer.run_experiment(config, benchmark, run_dir)
        return name, seed, result.final[metric], dataset_fingerprint(benchmark)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(run_job, jobs))
    else:
        outcomes = [run_job(j) for j in jobs]
    for name, seed, value, fingerprint in outcomes:
        scores[(name, seed)] = value
        fingerprints[(name, seed)] = fingerprint

    trends = []
    for variant, baseline in pairs:
        for seed in seeds:
            if fingerprints[(variant, seed)] != fingerprints[(baseline, seed)]:
                raise ContractError(
                    f"paired runs {variant}/{baseline} (seed {seed}) saw different datasets"
                )
        trends.append(
            paired_trend(
                variant,
                baseline,
                seeds,
                [scores[(variant, seed)] for seed in seeds],
                [scores[(baseline, seed)] for seed in seeds],
            )
        )

    write_trends_csv(out_dir / f"{suite}_trends.csv", suite, trends)
    return trends


def write_trends_csv(path, suite: str, trends: list) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "suite",
                "variant",
                "baseline",
                "seeds",
                "variant_scores",
                "baseline_scores",
                "variant_mean",
                "baseline_mean",
                "mean_improvement",
                "sign_test_p",
            ]
        )
        for t in trends:
            writer.writerow(
                [
                    suite,
                    t.variant,
                    t.baseline,
                    " ".join(str(s) for s in t.seeds),
                    " ".join(f"{v:.4f}" for v in t.variant_scores),
                    " ".join(f"{v:.4f}" for v in t.baseline_scores),
                    f"{t.mean:.4f}",
                    f"{t.baseline_mean:.4f}",
                    f"{t.mean_improvement:.4f}",
                    f"{t.p_value:.6f}",
                ]
            )


def format_trend_table(trends: list) -> str:
    """Aligned text table, one row per paired comparison."""
    headers = ["variant", "baseline", "mean", "base mean", "improvement", "p"]
    rows = [
        [
            t.variant,
            t.baseline,
            f"{t.mean:.2f}",
            f"{t.baseline_mean:.2f}",
            f"{t.mean_improvement:+.2f}",
            f"{t.p_value:.4f}",
        ]
        for t in trends
    ]
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for r in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)))
    return "\n".join(lines)
