"""Tiny segmentation heads, their hand-derived gradients, and training state.

Both modalities use the same two-layer tanh perceptron over a flat
parameter vector (affine -> tanh -> affine). The 2D head runs per pixel on
feature channels; the 3D head runs per point on scale-normalized position
concatenated with the point's features. Gradients are written out by hand
and checked against central finite differences in the tests.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from cmc_forge.errors import ConfigError, ContractError, NumericError
from cmc_forge.sampling import ViewSample
from cmc_forge.worldgen import ScenePointCloud


class MicroNet:
    """Two-layer perceptron: in_dim -> hidden_dim (tanh) -> out_dim logits."""

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int, params: np.ndarray):
        self.in_dim = in_dim
        self.hidden_dim = hidden_dim
        self.out_dim = out_dim
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.n_params(in_dim, hidden_dim, out_dim),):
            raise ContractError(
                f"expected {self.n_params(in_dim, hidden_dim, out_dim)} parameters, got {params.shape}"
            )
        self.params = params

    @staticmethod
    def n_params(in_dim: int, hidden_dim: int, out_dim: int) -> int:
        return in_dim * hidden_dim + hidden_dim + hidden_dim * out_dim + out_dim

    @classmethod
    def init(cls, in_dim: int, hidden_dim: int, out_dim: int, rng) -> "MicroNet":
        """Scaled-normal weights, zero biases."""
        w1 = rng.normal(0.0, 1.0 / math.sqrt(in_dim), size=(in_dim, hidden_dim))
        w2 = rng.normal(0.0, 1.0 / math.sqrt(hidden_dim), size=(hidden_dim, out_dim))
        params = np.concatenate(
            [w1.ravel(), np.zeros(hidden_dim), w2.ravel(), np.zeros(out_dim)]
        )
        return cls(in_dim, hidden_dim, out_dim, params)

    def _unpack(self):
        i, h, o = self.in_dim, self.hidden_dim, self.out_dim
        p = self.params
        w1 = p[: i * h].reshape(i, h)
        b1 = p[i * h : i * h + h]
        w2 = p[i * h + h : i * h + h + h * o].reshape(h, o)
        b2 = p[i * h + h + h * o :]
        return w1, b1, w2, b2

    def forward(self, x: np.ndarray, return_hidden: bool = False):
        """(N, in_dim) -> (N, out_dim) logits.

        With return_hidden=True also returns the post-tanh activations so a
        following backward can skip recomputing them.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ContractError(f"expected (N, {self.in_dim}) inputs, got {x.shape}")
        w1, b1, w2, b2 = self._unpack()
        hidden = np.tanh(x @ w1 + b1)
        logits = hidden @ w2 + b2
        return (logits, hidden) if return_hidden else logits

    def backward(self, x: np.ndarray, upstream: np.ndarray, hidden: np.ndarray | None = None) -> np.ndarray:
        """Gradient of sum(forward(x) * upstream) w.r.t. the flat parameters."""
        x = np.asarray(x, dtype=np.float64)
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape != (x.shape[0], self.out_dim):
            raise ContractError(f"upstream shape {upstream.shape} does not match outputs")
        w1, b1, w2, _ = self._unpack()
        if hidden is None:
            hidden = np.tanh(x @ w1 + b1)
        d_w2 = hidden.T @ upstream
        d_b2 = upstream.sum(axis=0)
        d_hidden = (upstream @ w2.T) * (1.0 - hidden * hidden)
        d_w1 = x.T @ d_hidden
        d_b1 = d_hidden.sum(axis=0)
        return np.concatenate([d_w1.ravel(), d_b1, d_w2.ravel(), d_b2])

    def copy(self) -> "MicroNet":
        return MicroNet(self.in_dim, self.hidden_dim, self.out_dim, self.params.copy())


@dataclass
class BranchState:
    """Student/teacher pair for one modality plus the student's optimizer moments.

    The teacher is never gradient-updated and carries no moments; only
    ema_update may change its parameters.
    """

    modality: str  # "2d" | "3d"
    student: MicroNet
    teacher: MicroNet
    moment1: np.ndarray = field(default=None)
    moment2: np.ndarray = field(default=None)
    step_count: int = 0

    def __post_init__(self):
        if self.student.params.shape != self.teacher.params.shape:
            raise ContractError("student and teacher must have identical shapes")
        if self.moment1 is None:
            self.moment1 = np.zeros_like(self.student.params)
        if self.moment2 is None:
            self.moment2 = np.zeros_like(self.student.params)


def init_branch(modality: str, in_dim: int, hidden_dim: int, out_dim: int, rng) -> BranchState:
    """New branch; the teacher starts as an exact copy of the student."""
    student = MicroNet.init(in_dim, hidden_dim, out_dim, rng)
    return BranchState(modality=modality, student=student, teacher=student.copy())


def forward_2d(net: MicroNet, view_features: np.ndarray) -> np.ndarray:
    """(H, W, F) features -> (H, W, C) logits."""
    h, w, f = view_features.shape
    return net.forward(view_features.reshape(h * w, f)).reshape(h, w, net.out_dim)


def point_inputs(cloud: ScenePointCloud, indices: np.ndarray, positions: np.ndarray | None = None) -> np.ndarray:
    """3D head inputs: scale-normalized position concatenated with features."""
    pos = cloud.positions[indices] if positions is None else positions
    return np.concatenate([pos / cloud.scene_scale, cloud.features[indices]], axis=1)


def forward_3d(net: MicroNet, sample: ViewSample, cloud: ScenePointCloud) -> np.ndarray:
    """(sample size, C) logits over the sampled points."""
    return net.forward(point_inputs(cloud, sample.point_indices))


def optimizer_step(
    state: BranchState,
    grad: np.ndarray,
    lr: float,
    weight_decay: float = 0.0,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> BranchState:
    """Bias-corrected adaptive-moment update with decoupled weight decay.

    Mutates the student parameters and moments in place (single writer per
    branch); the teacher is untouched. Raises NumericError on non-finite
    gradients so the run can abort with a diagnostic.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != state.student.params.shape:
        raise ContractError(f"gradient shape {grad.shape} does not match parameters")
    if not np.all(np.isfinite(grad)):
        raise NumericError(f"non-finite gradient in {state.modality} branch")
    b1, b2 = betas
    state.step_count += 1
    t = state.step_count
    state.moment1 = b1 * state.moment1 + (1.0 - b1) * grad
    state.moment2 = b2 * state.moment2 + (1.0 - b2) * grad * grad
    m_hat = state.moment1 / (1.0 - b1**t)
    v_hat = state.moment2 / (1.0 - b2**t)
    params = state.student.params
    params -= lr * m_hat / (np.sqrt(v_hat) + eps)
    params -= lr * weight_decay * params
    return state


def ema_update(state: BranchState, alpha: float) -> BranchState:
    """teacher <- alpha * teacher + (1 - alpha) * student, elementwise."""
    if not (0.0 <= alpha <= 1.0):
        raise ConfigError(f"EMA alpha must be in [0, 1], got {alpha}")
    state.teacher.params *= alpha
    state.teacher.params += (1.0 - alpha) * state.student.params
    return state


EXCLUDED = -1  # index-map marker for pixels removed by crop/cutout


@dataclass(frozen=True)
class AugmentationSpec:
    """One strength tier of the asymmetric augmentation pipeline.

    2D fields: crop_fraction keeps a centered-at-random window of that
    relative size (1.0 disables), cutout removes a random square, and
    feature_noise adds bounded uniform noise to every channel. 3D fields:
    rotation about the vertical axis, isotropic scale, per-point jitter
    clipped at jitter_clip, and a mirror flip. The strong tier must meet
    or exceed the weak tier in every magnitude (checked by ``dominates``).
    """

    tier: str = "weak"
    crop_fraction: float = 1.0
    cutout_size: int = 0
    cutout_prob: float = 0.0
    feature_noise: float = 0.0
    rotation_max: float = 0.0
    scale_range: tuple[float, float] = (1.0, 1.0)
    jitter_sigma: float = 0.0
    jitter_clip: float = 0.0
    flip_prob: float = 0.0

    def __post_init__(self):
        if not (0 < self.crop_fraction <= 1):
            raise ConfigError("crop_fraction must be in (0, 1]")
        if self.scale_range[0] > self.scale_range[1]:
            raise ConfigError("scale_range must be (lo, hi) with lo <= hi")


IDENTITY_SPEC = AugmentationSpec(tier="identity")


def default_weak_spec() -> AugmentationSpec:
    return AugmentationSpec(
        tier="weak",
        crop_fraction=1.0,
        cutout_size=0,
        cutout_prob=0.0,
        feature_noise=0.05,
        rotation_max=0.1,
        scale_range=(0.98, 1.02),
        jitter_sigma=0.0,
        jitter_clip=0.0,
        flip_prob=0.5,
    )


def default_strong_spec() -> AugmentationSpec:
    return AugmentationSpec(
        tier="strong",
        crop_fraction=0.9,
        cutout_size=6,
        cutout_prob=0.5,
        feature_noise=0.25,
        rotation_max=0.2,
        scale_range=(0.9, 1.1),
        jitter_sigma=0.005,
        jitter_clip=0.02,
        flip_prob=0.5,
    )


def dominates(strong: AugmentationSpec, weak: AugmentationSpec) -> bool:
    """True iff ``strong`` meets or exceeds ``weak`` in every magnitude."""
    return (
        strong.crop_fraction <= weak.crop_fraction
        and strong.cutout_size >= weak.cutout_size
        and strong.cutout_prob >= weak.cutout_prob
        and strong.feature_noise >= weak.feature_noise
        and strong.rotation_max >= weak.rotation_max
        and strong.scale_range[0] <= weak.scale_range[0]
        and strong.scale_range[1] >= weak.scale_range[1]
        and strong.jitter_sigma >= weak.jitter_sigma
        and strong.jitter_clip >= weak.jitter_clip
        and strong.flip_prob >= weak.flip_prob
    )


def augment_view(features: np.ndarray, spec: AugmentationSpec, rng) -> tuple[np.ndarray, np.ndarray]:
    """Augmented copy of (H, W, F) features plus a flat inverse index map.

    index_map[i] is the flat original pixel behind output pixel i, or
    EXCLUDED where crop/cutout removed it. No augmentation moves pixels,
    so surviving indices are the identity; excluded pixels have their
    features zeroed and must be dropped from any loss.
    """
    h, w, _ = features.shape
    out = features.copy()
    index_map = np.arange(h * w, dtype=np.int64)
    excluded = np.zeros((h, w), dtype=bool)

    if spec.crop_fraction < 1.0:
        ch = max(1, int(round(h * spec.crop_fraction)))
        cw = max(1, int(round(w * spec.crop_fraction)))
        top = int(rng.integers(h - ch + 1))
        left = int(rng.integers(w - cw + 1))
        keep = np.zeros((h, w), dtype=bool)
        keep[top : top + ch, left : left + cw] = True
        excluded |= ~keep

    if spec.cutout_size > 0 and rng.random() < spec.cutout_prob:
        s = min(spec.cutout_size, h, w)
        top = int(rng.integers(h - s + 1))
        left = int(rng.integers(w - s + 1))
        excluded[top : top + s, left : left + s] = True

    if spec.feature_noise > 0:
        out += rng.uniform(-spec.feature_noise, spec.feature_noise, size=out.shape)

    out[excluded] = 0.0
    index_map[excluded.ravel()] = EXCLUDED
    return out, index_map


def augment_points(positions: np.ndarray, spec: AugmentationSpec, rng) -> tuple[np.ndarray, np.ndarray]:
    """Augmented copy of (N, 3) positions plus the (identity) index map.

    Rotation about the vertical axis, isotropic scaling and the mirror
    flip are applied about the sample centroid; jitter is per point and
    clipped to +/- jitter_clip per coordinate.
    """
    n = positions.shape[0]
    out = positions.astype(np.float64, copy=True)
    index_map = np.arange(n, dtype=np.int64)
    if n == 0:
        return out, index_map

    centroid = out.mean(axis=0)
    angle = float(rng.uniform(-spec.rotation_max, spec.rotation_max))
    scale = float(rng.uniform(spec.scale_range[0], spec.scale_range[1]))
    flip = rng.random() < spec.flip_prob

    if flip or angle != 0.0 or scale != 1.0:
        centered = out - centroid
        if flip:
            centered[:, 0] = -centered[:, 0]
        if angle != 0.0:
            c, s = math.cos(angle), math.sin(angle)
            rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
            centered = centered @ rot.T
        out = centered * scale + centroid

    if spec.jitter_sigma > 0:
        jitter = rng.normal(0.0, spec.jitter_sigma, size=out.shape)
        out += np.clip(jitter, -spec.jitter_clip, spec.jitter_clip)
    return out, index_map
