"""Procedural labeled scenes, multi-view rendering, reconstruction simulation.

A scene is a ground plane plus axis-aligned boxes resting on it, each
primitive carrying a semantic class id. Views are rendered by per-pixel
nearest-hit ray casting; the reconstruction simulator unprojects every
valid pixel with depth-proportional noise and emits a per-point
confidence that decreases with the true geometric error, so downstream
confidence filtering has something real to filter.

World frame: z is up, the ground plane is z = 0. The reserved id
``class_count`` marks void pixels (no geometry hit) in ground-truth
rasters and unlabeled entries in annotation rasters.
"""

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from cmc_forge import container
from cmc_forge.errors import ConfigError, ContractError
from cmc_forge.geometry import CameraIntrinsics, CameraPose, unproject_pixels
from cmc_forge.seeding import rng_for

RAY_EPS = 1e-9


def sentinel_id(class_count: int) -> int:
    """Reserved id for void ground truth and unlabeled annotations."""
    return class_count


@dataclass(frozen=True)
class Box:
    """Axis-aligned solid box [lo, hi] with one semantic class."""

    lo: np.ndarray  # (3,)
    hi: np.ndarray  # (3,)
    class_id: int


@dataclass(frozen=True)
class Plane:
    """Infinite axis-aligned plane x[axis] == offset."""

    axis: int
    offset: float
    class_id: int


@dataclass(frozen=True)
class SyntheticScene:
    primitives: tuple
    class_count: int
    scene_scale: float
    seed: int


@dataclass(frozen=True)
class SceneParams:
    """Knobs for generate_scene. Box sizes are fractions of scene_scale.

    Box heights are class-banded: the [min_height, max_height] range is
    split among the box classes and each box draws its height from its
    class band. Height (hence the z coordinate of box tops) is the one
    geometric cue that identifies a class across scenes;
    height_band_overlap blends adjacent bands so geometry stays informative
    without being a perfect class code.
    """

    class_count: int = 5
    box_count: int = 6
    scene_scale: float = 4.0
    min_half_extent: float = 0.08
    max_half_extent: float = 0.17
    min_height: float = 0.1
    max_height: float = 0.6
    height_band_overlap: float = 0.0
    placement_radius: float = 0.55


@dataclass(frozen=True)
class FeatureParams:
    """Per-pixel feature model: class prototype + noise + spatial cues.

    separation scales the distance between class prototypes while noise is
    the additive channel sigma; their ratio is the classification
    difficulty dial. A fraction of pixels receives outlier_scale times the
    noise (an isotropic scale mixture), which keeps small labeled sets from
    pinning the class means precisely; that headroom is what dense pseudo-
    labels can close. Two extra channels carry normalized (u, v).
    """

    semantic_dim: int = 6
    separation: float = 2.0
    noise: float = 0.9
    outlier_fraction: float = 0.2
    outlier_scale: float = 3.0
    prototype_seed: int = 0

    @property
    def feature_dim(self) -> int:
        return self.semantic_dim + 2


@dataclass(frozen=True)
class CameraView:
    """One rendered view: features, ground-truth labels and depth."""

    view_id: int
    intrinsics: CameraIntrinsics
    pose: CameraPose
    features: np.ndarray  # (H, W, F) float64
    gt_labels: np.ndarray  # (H, W) int64, sentinel_id(class_count) = void
    gt_depth: np.ndarray  # (H, W) float64, +inf at void pixels
    class_count: int


@dataclass(frozen=True)
class ScenePointCloud:
    """Reconstructed points with provenance, confidence and sparse labels."""

    positions: np.ndarray  # (N, 3)
    rec_confidence: np.ndarray  # (N,) in (0, 1]
    source_view: np.ndarray  # (N,) int64
    source_u: np.ndarray  # (N,) int64 column of the source pixel
    source_v: np.ndarray  # (N,) int64 row of the source pixel
    features: np.ndarray  # (N, F) copied from the source pixels
    sparse_labels: np.ndarray  # (N,) int64 with sentinel for unlabeled
    class_count: int
    scene_scale: float

    def __len__(self) -> int:
        return self.positions.shape[0]


def generate_scene(params: SceneParams, seed: int) -> SyntheticScene:
    """Ground plane (class 0) plus boxes with disjoint footprints.

    Every box class in [1, class_count) receives at least one box; extra
    boxes get uniformly random box classes. Deterministic per seed.
    """
    if params.class_count < 2:
        raise ConfigError(f"need at least 2 classes, got {params.class_count}")
    if params.box_count < params.class_count - 1:
        raise ConfigError(
            f"{params.box_count} boxes cannot cover {params.class_count - 1} box classes"
        )
    if params.scene_scale <= 0:
        raise ConfigError("scene_scale must be positive")

    rng = rng_for(seed, "scene-layout")
    s = params.scene_scale
    box_classes = list(range(1, params.class_count))
    box_classes += list(rng.integers(1, params.class_count, size=params.box_count - len(box_classes)))

    n_bands = params.class_count - 1
    ov = params.height_band_overlap
    if not (0.0 <= ov < 1.0):
        raise ConfigError("height_band_overlap must be in [0, 1)")
    span = params.max_height - params.min_height
    band_width = span / (1.0 + (n_bands - 1) * (1.0 - ov))
    band_stride = band_width * (1.0 - ov)

    primitives = [Plane(axis=2, offset=0.0, class_id=0)]
    placed = []  # (cx, cy, half_x, half_y)
    for class_id in box_classes:
        half = rng.uniform(params.min_half_extent, params.max_half_extent, size=2) * s
        band_lo = params.min_height + (int(class_id) - 1) * band_stride
        height = rng.uniform(band_lo, band_lo + band_width) * s
        for attempt in range(600):
            # Crowded layouts: progressively shrink boxes and widen the disc.
            shrink = 0.85 ** (attempt // 30)
            hx, hy = np.maximum(half * shrink, 0.03 * s)
            radius = params.placement_radius * s * min(1.25, 1.0 + attempt / 300.0)
            r = rng.uniform(0, radius)
            phi = rng.uniform(0, 2 * math.pi)
            cx, cy = r * math.cos(phi), r * math.sin(phi)
            margin = 0.03 * s
            ok = all(
                abs(cx - px) > hx + phx + margin or abs(cy - py) > hy + phy + margin
                for px, py, phx, phy in placed
            )
            if ok:
                placed.append((cx, cy, hx, hy))
                lo = np.array([cx - hx, cy - hy, 0.0])
                hi = np.array([cx + hx, cy + hy, height])
                primitives.append(Box(lo=lo, hi=hi, class_id=int(class_id)))
                break
        else:
            raise ConfigError("could not place boxes with disjoint footprints; reduce box_count")

    return SyntheticScene(
        primitives=tuple(primitives),
        class_count=params.class_count,
        scene_scale=params.scene_scale,
        seed=seed,
    )


def class_prototypes(params: FeatureParams, class_count: int) -> np.ndarray:
    """Unit prototype per class scaled by separation; void row is zero."""
    rng = rng_for(params.prototype_seed, "class-prototypes")
    raw = rng.normal(size=(class_count, params.semantic_dim))
    raw /= np.linalg.norm(raw, axis=1, keepdims=True)
    protos = np.zeros((class_count + 1, params.semantic_dim))
    protos[:class_count] = raw * params.separation
    return protos


def _ray_grid(intrinsics: CameraIntrinsics, pose: CameraPose):
    """World-space origin and per-pixel direction with unit camera-z.

    With the z-component of the camera-space direction fixed to 1, the ray
    parameter t equals camera depth, so hits can be stored directly into a
    depth raster.
    """
    h, w = intrinsics.height, intrinsics.width
    us, vs = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    d_cam = np.stack(
        [(us - intrinsics.cx) / intrinsics.fx, (vs - intrinsics.cy) / intrinsics.fy, np.ones_like(us)],
        axis=-1,
    )
    d_world = d_cam.reshape(-1, 3) @ pose.rotation  # R^T applied row-wise
    origin = -pose.rotation.T @ pose.translation
    return origin, d_world


def _intersect(primitive, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Ray parameter of the nearest forward hit per ray; +inf for a miss."""
    with np.errstate(divide="ignore", invalid="ignore"):
        if isinstance(primitive, Plane):
            t = (primitive.offset - origin[primitive.axis]) / dirs[:, primitive.axis]
            t = np.where(np.isfinite(t) & (t > RAY_EPS), t, np.inf)
            return t
        inv = 1.0 / dirs
        t1 = (primitive.lo - origin) * inv
        t2 = (primitive.hi - origin) * inv
    near = np.nanmax(np.minimum(t1, t2), axis=1)
    far = np.nanmin(np.maximum(t1, t2), axis=1)
    hit = (near <= far) & (far > RAY_EPS)
    entry = np.where(near > RAY_EPS, near, far)
    return np.where(hit, entry, np.inf)


def render_view(
    scene: SyntheticScene,
    intrinsics: CameraIntrinsics,
    pose: CameraPose,
    view_id: int,
    feature_params: FeatureParams,
) -> CameraView:
    """Nearest-hit ray cast producing labels, depth and noisy features.

    The camera must be outside every box. Feature noise is drawn from a
    per-view stream keyed on (scene.seed, view_id), so rendering views in
    any order or in parallel yields identical results.
    """
    origin = -pose.rotation.T @ pose.translation
    for prim in scene.primitives:
        if isinstance(prim, Box) and np.all(origin >= prim.lo) and np.all(origin <= prim.hi):
            raise ConfigError(f"camera center {origin} is inside a box primitive")

    h, w = intrinsics.height, intrinsics.width
    origin, dirs = _ray_grid(intrinsics, pose)
    best_t = np.full(dirs.shape[0], np.inf)
    labels = np.full(dirs.shape[0], sentinel_id(scene.class_count), dtype=np.int64)
    for prim in scene.primitives:
        t = _intersect(prim, origin, dirs)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        labels = np.where(closer, prim.class_id, labels)

    protos = class_prototypes(feature_params, scene.class_count)
    rng = rng_for(scene.seed, view_id, "pixel-noise")
    sigma = np.full(h * w, feature_params.noise)
    if feature_params.outlier_fraction > 0:
        outliers = rng.random(h * w) < feature_params.outlier_fraction
        sigma[outliers] *= feature_params.outlier_scale
    semantic = protos[labels] + rng.normal(size=(h * w, feature_params.semantic_dim)) * sigma[:, None]
    us, vs = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    cues = np.stack([us.ravel() / max(w - 1, 1), vs.ravel() / max(h - 1, 1)], axis=-1)
    features = np.concatenate([semantic, cues], axis=1).reshape(h, w, feature_params.feature_dim)

    return CameraView(
        view_id=view_id,
        intrinsics=intrinsics,
        pose=pose,
        features=features,
        gt_labels=labels.reshape(h, w),
        gt_depth=best_t.reshape(h, w),
        class_count=scene.class_count,
    )


def simulate_reconstruction(
    views: Sequence[CameraView],
    noise_sigma: float,
    density: str = "full",
    *,
    scene_scale: float,
    seed: int = 0,
    scan_stride: int = 4,
) -> ScenePointCloud:
    """Unproject every valid pixel into one cloud with noisy depth.

    Each point sits at unproject(pixel, depth + eps) with
    eps ~ Normal(0, noise_sigma * depth) and carries the confidence
    exp(-|eps| / (noise_sigma * depth + tiny)), which is 1 in the noiseless
    limit and strictly decreasing in |eps|. density="single_scan" keeps
    every scan_stride-th row and column to mimic sparse LiDAR coverage.
    """
    if not views:
        raise ConfigError("simulate_reconstruction needs at least one view")
    if noise_sigma < 0:
        raise ConfigError("noise_sigma must be >= 0")
    if density not in ("full", "single_scan"):
        raise ConfigError(f"unknown density {density!r}")

    tiny = 1e-12
    chunks = {k: [] for k in ("pos", "conf", "view", "u", "v", "feat")}
    for view in views:
        valid = np.isfinite(view.gt_depth)
        if density == "single_scan":
            rows, cols = np.indices(valid.shape)
            valid &= (rows % scan_stride == 0) & (cols % scan_stride == 0)
        vv, uu = np.nonzero(valid)
        if vv.size == 0:
            continue
        depth = view.gt_depth[vv, uu]
        rng = rng_for(seed, view.view_id, "recon-noise")
        eps = rng.normal(0.0, 1.0, size=depth.shape) * noise_sigma * depth
        eps = np.maximum(eps, -0.99 * depth)  # keep noisy depth positive
        noisy = depth + eps
        pos = unproject_pixels(uu.astype(np.float64), vv.astype(np.float64), noisy, view.pose, view.intrinsics)
        conf = np.exp(-np.abs(eps) / (noise_sigma * depth + tiny))
        chunks["pos"].append(pos)
        chunks["conf"].append(conf)
        chunks["view"].append(np.full(depth.shape, view.view_id, dtype=np.int64))
        chunks["u"].append(uu.astype(np.int64))
        chunks["v"].append(vv.astype(np.int64))
        chunks["feat"].append(view.features[vv, uu])

    if not chunks["pos"]:
        raise ConfigError("no valid pixels in any view; cannot reconstruct")

    n = sum(c.shape[0] for c in chunks["pos"])
    class_count = views[0].class_count
    return ScenePointCloud(
        positions=np.concatenate(chunks["pos"]),
        rec_confidence=np.concatenate(chunks["conf"]),
        source_view=np.concatenate(chunks["view"]),
        source_u=np.concatenate(chunks["u"]),
        source_v=np.concatenate(chunks["v"]),
        features=np.concatenate(chunks["feat"]),
        sparse_labels=np.full(n, sentinel_id(class_count), dtype=np.int64),
        class_count=class_count,
        scene_scale=scene_scale,
    )


def nearest_class(scene: SyntheticScene, points: np.ndarray) -> np.ndarray:
    """Class of the geometrically nearest primitive surface per point.

    Independent 3D reference for evaluation: unlike label transfer through
    source pixels, this reflects where a (possibly noise-displaced) point
    actually ended up.
    """
    points = np.asarray(points, dtype=np.float64)
    best = np.full(points.shape[0], np.inf)
    labels = np.zeros(points.shape[0], dtype=np.int64)
    for prim in scene.primitives:
        if isinstance(prim, Plane):
            dist = np.abs(points[:, prim.axis] - prim.offset)
        else:
            clamped = np.clip(points, prim.lo, prim.hi)
            dist = np.linalg.norm(points - clamped, axis=1)
        closer = dist < best
        best = np.where(closer, dist, best)
        labels = np.where(closer, prim.class_id, labels)
    return labels


def save_views(path, views: Sequence[CameraView]) -> None:
    """Serialize a view list into one container file plus JSON sidecar."""
    intr = views[0].intrinsics
    tensors = {
        "features": np.stack([v.features for v in views]),
        "gt_labels": np.stack([v.gt_labels for v in views]),
        "gt_depth": np.stack([v.gt_depth for v in views]),
        "rotations": np.stack([v.pose.rotation for v in views]),
        "translations": np.stack([v.pose.translation for v in views]),
        "view_ids": np.array([v.view_id for v in views], dtype=np.int64),
    }
    meta = {
        "kind": "views",
        "class_count": views[0].class_count,
        "intrinsics": [intr.fx, intr.fy, intr.cx, intr.cy, intr.width, intr.height],
    }
    container.save_tensors(path, tensors, meta)


def load_views(path) -> list[CameraView]:
    tensors, meta = container.load_tensors(path)
    if meta.get("kind") != "views":
        raise ContractError(f"{path} does not hold views")
    fx, fy, cx, cy, w, h = meta["intrinsics"]
    intr = CameraIntrinsics(fx=fx, fy=fy, cx=cx, cy=cy, width=int(w), height=int(h))
    views = []
    for i, view_id in enumerate(tensors["view_ids"]):
        pose = CameraPose(rotation=tensors["rotations"][i], translation=tensors["translations"][i])
        views.append(
            CameraView(
                view_id=int(view_id),
                intrinsics=intr,
                pose=pose,
                features=tensors["features"][i],
                gt_labels=tensors["gt_labels"][i],
                gt_depth=tensors["gt_depth"][i],
                class_count=int(meta["class_count"]),
            )
        )
    return views


def save_cloud(path, cloud: ScenePointCloud) -> None:
    tensors = {
        "positions": cloud.positions,
        "rec_confidence": cloud.rec_confidence,
        "source_view": cloud.source_view,
        "source_u": cloud.source_u,
        "source_v": cloud.source_v,
        "features": cloud.features,
        "sparse_labels": cloud.sparse_labels,
    }
    meta = {"kind": "cloud", "class_count": cloud.class_count, "scene_scale": cloud.scene_scale}
    container.save_tensors(path, tensors, meta)


def load_cloud(path) -> ScenePointCloud:
    tensors, meta = container.load_tensors(path)
    if meta.get("kind") != "cloud":
        raise ContractError(f"{path} does not hold a point cloud")
    return ScenePointCloud(
        positions=tensors["positions"],
        rec_confidence=tensors["rec_confidence"],
        source_view=tensors["source_view"],
        source_u=tensors["source_u"],
        source_v=tensors["source_v"],
        features=tensors["features"],
        sparse_labels=tensors["sparse_labels"],
        class_count=int(meta["class_count"]),
        scene_scale=float(meta["scene_scale"]),
    )


def scene_to_dict(scene: SyntheticScene) -> dict:
    prims = []
    for p in scene.primitives:
        if isinstance(p, Plane):
            prims.append({"type": "plane", "axis": p.axis, "offset": p.offset, "class_id": p.class_id})
        else:
            prims.append({"type": "box", "lo": p.lo.tolist(), "hi": p.hi.tolist(), "class_id": p.class_id})
    return {
        "primitives": prims,
        "class_count": scene.class_count,
        "scene_scale": scene.scene_scale,
        "seed": scene.seed,
    }


def scene_from_dict(data: dict) -> SyntheticScene:
    prims = []
    for p in data["primitives"]:
        if p["type"] == "plane":
            prims.append(Plane(axis=int(p["axis"]), offset=float(p["offset"]), class_id=int(p["class_id"])))
        else:
            prims.append(Box(lo=np.array(p["lo"]), hi=np.array(p["hi"]), class_id=int(p["class_id"])))
    return SyntheticScene(
        primitives=tuple(prims),
        class_count=int(data["class_count"]),
        scene_scale=float(data["scene_scale"]),
        seed=int(data["seed"]),
    )


def relabel_cloud(cloud: ScenePointCloud, labels: np.ndarray) -> ScenePointCloud:
    """New cloud with replaced sparse labels; everything else untouched."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != cloud.sparse_labels.shape:
        raise ContractError("label array shape does not match cloud size")
    return replace(cloud, sparse_labels=labels)
