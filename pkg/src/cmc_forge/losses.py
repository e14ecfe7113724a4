"""Loss terms with analytic gradients.

Four ingredients: supervised cross-entropy on labeled elements, KL
consistency from teacher to student on unlabeled elements, the batch
confidence weight (fraction of unlabeled elements where the teacher is
sure), and the dual-confidence cross-modal cross-entropy. Teacher logits
are constants everywhere: no gradient ever flows to a teacher.

All gradients are taken w.r.t. student logits; every term is >= 0.
"""

from dataclasses import dataclass, fields

import numpy as np

from cmc_forge.errors import ConfigError, ContractError


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    e /= e.sum(axis=-1, keepdims=True)
    return e


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    shifted -= np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return shifted


def supervised_ce(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log-probability of the true class over labeled rows.

    Labels >= C are the unlabeled sentinel and are skipped; with no labeled
    rows the loss and gradient are zero.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ContractError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    labeled = labels < c
    if labels[labeled].size and labels[labeled].min() < 0:
        raise ContractError("negative label id")
    grad = np.zeros_like(logits)
    count = int(np.count_nonzero(labeled))
    if count == 0:
        return 0.0, grad
    rows = np.nonzero(labeled)[0]
    lp = log_softmax(logits[rows])
    loss = float(-lp[np.arange(rows.size), labels[rows]].mean())
    g = np.exp(lp)
    g[np.arange(rows.size), labels[rows]] -= 1.0
    grad[rows] = g / count
    return loss, grad


def consistency_kl(
    student_logits: np.ndarray, teacher_logits: np.ndarray, unlabeled_mask: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean KL(teacher || student) over unlabeled rows; teacher is constant."""
    student_logits = np.asarray(student_logits, dtype=np.float64)
    teacher_logits = np.asarray(teacher_logits, dtype=np.float64)
    if student_logits.shape != teacher_logits.shape:
        raise ContractError("student and teacher logits must share a shape")
    unlabeled_mask = np.asarray(unlabeled_mask, dtype=bool)
    if unlabeled_mask.shape != student_logits.shape[:1]:
        raise ContractError("mask shape does not match logits")
    grad = np.zeros_like(student_logits)
    rows = np.nonzero(unlabeled_mask)[0]
    if rows.size == 0:
        return 0.0, grad
    lp_t = log_softmax(teacher_logits[rows])
    p_t = np.exp(lp_t)
    lp_s = log_softmax(student_logits[rows])
    loss = float((p_t * (lp_t - lp_s)).sum(axis=1).mean())
    grad[rows] = (np.exp(lp_s) - p_t) / rows.size
    return max(loss, 0.0), grad


def confidence_weight(teacher_logits: np.ndarray, tau: float) -> float:
    """Fraction of rows whose max softmax probability reaches tau.

    Empty input returns 0 by convention: no unlabeled evidence means no
    consistency signal.
    """
    if not (0.0 < tau < 1.0):
        raise ConfigError(f"tau must be in (0, 1), got {tau}")
    teacher_logits = np.asarray(teacher_logits, dtype=np.float64)
    if teacher_logits.shape[0] == 0:
        return 0.0
    max_prob = softmax(teacher_logits).max(axis=1)
    return float(np.count_nonzero(max_prob >= tau)) / teacher_logits.shape[0]


def branch_objective(sup_loss: float, cons_loss: float, weight: float, beta: float) -> float:
    """(1 - beta) * supervised + beta * weight * consistency."""
    if not (0.0 <= beta <= 1.0):
        raise ConfigError(f"beta must be in [0, 1], got {beta}")
    return (1.0 - beta) * sup_loss + beta * weight * cons_loss


def dual_confidence(teacher_logits: np.ndarray, rec_confidence: np.ndarray, mode: str = "both") -> np.ndarray:
    """Per-correspondence weight combining teacher certainty and recon quality.

    mode selects the ablation variant: "both" multiplies the teacher's max
    softmax probability with the reconstruction confidence, "pred" and
    "recon" keep a single factor, "none" weights uniformly.
    """
    if mode not in ("both", "pred", "recon", "none"):
        raise ConfigError(f"unknown confidence mode {mode!r}")
    n = teacher_logits.shape[0]
    rec_confidence = np.asarray(rec_confidence, dtype=np.float64)
    if rec_confidence.shape != (n,):
        raise ContractError("rec_confidence length does not match teacher logits")
    weights = np.ones(n, dtype=np.float64)
    if mode in ("both", "pred"):
        weights *= softmax(teacher_logits).max(axis=1)
    if mode in ("both", "recon"):
        weights *= rec_confidence
    return weights


def cmc_loss(
    student_logits: np.ndarray,
    teacher_logits: np.ndarray,
    rec_confidence: np.ndarray,
    mode: str = "both",
    normalize: bool = True,
) -> tuple[float, np.ndarray]:
    """Confidence-weighted cross-entropy against the other modality's teacher.

    Row i pairs one student output with one teacher output through a 2D-3D
    correspondence. The teacher's argmax is the hard pseudo-label, weighted
    by dual_confidence; the loss only sees the teacher through (argmax, max
    probability), so any logit change preserving both leaves it invariant.

    With normalize=True (default) the weighted sum is divided by the total
    weight so the scale is independent of the correspondence count; the raw
    sum stays available for fidelity experiments. Zero total weight or zero
    correspondences give a zero loss and gradient.
    """
    student_logits = np.asarray(student_logits, dtype=np.float64)
    teacher_logits = np.asarray(teacher_logits, dtype=np.float64)
    if student_logits.shape[0] != teacher_logits.shape[0]:
        raise ContractError("correspondence arrays must pair one student row with one teacher row")
    grad = np.zeros_like(student_logits)
    n = student_logits.shape[0]
    if n == 0:
        return 0.0, grad
    weights = dual_confidence(teacher_logits, rec_confidence, mode)
    total = float(weights.sum())
    if total <= 0.0:
        return 0.0, grad
    pseudo = teacher_logits.argmax(axis=1)
    lp = log_softmax(student_logits)
    per_row = -lp[np.arange(n), pseudo]
    denom = total if normalize else 1.0
    loss = float((weights * per_row).sum() / denom)
    g = np.exp(lp)
    g[np.arange(n), pseudo] -= 1.0
    grad = g * (weights / denom)[:, None]
    return loss, grad


@dataclass(frozen=True)
class LossReport:
    """All loss components of one step, plus the element counts behind them."""

    sup_2d: float = 0.0
    cons_2d: float = 0.0
    sup_3d: float = 0.0
    cons_3d: float = 0.0
    cross_2d: float = 0.0
    cross_3d: float = 0.0
    conf_weight_2d: float = 0.0
    conf_weight_3d: float = 0.0
    total: float = 0.0
    n_labeled_2d: int = 0
    n_unlabeled_2d: int = 0
    n_corr_2d: int = 0
    n_labeled_3d: int = 0
    n_unlabeled_3d: int = 0
    n_corr_3d: int = 0

    @classmethod
    def csv_header(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def csv_row(self) -> list[str]:
        return [f"{getattr(self, f.name):.17g}" for f in fields(self)]


def total_objective(
    *,
    sup_2d: float,
    cons_2d: float,
    conf_weight_2d: float,
    sup_3d: float,
    cons_3d: float,
    conf_weight_3d: float,
    cross_2d: float,
    cross_3d: float,
    beta: float,
    lambda_2d: float,
    lambda_3d: float,
    counts: dict | None = None,
) -> LossReport:
    """Combine per-branch objectives and cross-modal terms into one total.

    Each modality contributes its confidence-weighted branch objective; the
    cross-modal terms are added with their ramp weights.
    """
    total = (
        branch_objective(sup_2d, cons_2d, conf_weight_2d, beta)
        + branch_objective(sup_3d, cons_3d, conf_weight_3d, beta)
        + lambda_2d * cross_2d
        + lambda_3d * cross_3d
    )
    return LossReport(
        sup_2d=sup_2d,
        cons_2d=cons_2d,
        sup_3d=sup_3d,
        cons_3d=cons_3d,
        cross_2d=cross_2d,
        cross_3d=cross_3d,
        conf_weight_2d=conf_weight_2d,
        conf_weight_3d=conf_weight_3d,
        total=total,
        **(counts or {}),
    )
