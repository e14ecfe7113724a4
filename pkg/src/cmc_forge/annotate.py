"""Sparse 2D annotations and their transfer onto reconstructed points.

Three annotation kinds: one random pixel per class (points), random-walk
strokes inside class regions (scribbles), and eroded region interiors
(coarse). Annotations are correct by construction: every labeled pixel
carries the ground-truth class at that pixel, and the reserved id
``class_count`` marks everything else.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from cmc_forge.errors import ConfigError, ContractError, DomainError
from cmc_forge.seeding import rng_for
from cmc_forge.worldgen import CameraView, ScenePointCloud, relabel_cloud, sentinel_id

# 8-neighborhood steps used by the scribble walk.
_STEPS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


@dataclass(frozen=True)
class SparseLabelMap:
    labels: np.ndarray  # (H, W) int64 with sentinel for unlabeled
    kind: str  # points | scribbles | coarse
    coverage: float  # labeled pixels / (H * W)


def _finish(labels: np.ndarray, kind: str, class_count: int) -> SparseLabelMap:
    coverage = float(np.count_nonzero(labels != sentinel_id(class_count))) / labels.size
    return SparseLabelMap(labels=labels, kind=kind, coverage=coverage)


def _present_classes(view: CameraView) -> np.ndarray:
    classes = np.unique(view.gt_labels)
    return classes[classes < view.class_count]


def gen_point_labels(view: CameraView, seed: int) -> SparseLabelMap:
    """Exactly one labeled pixel per class present in the view."""
    classes = _present_classes(view)
    if classes.size == 0:
        raise DomainError("view contains no non-void pixels to annotate")
    rng = rng_for(seed, view.view_id, "point-labels")
    out = np.full_like(view.gt_labels, sentinel_id(view.class_count))
    for class_id in classes:
        rows, cols = np.nonzero(view.gt_labels == class_id)
        pick = rng.integers(rows.size)
        out[rows[pick], cols[pick]] = class_id
    return _finish(out, "points", view.class_count)


def _region_walk(interior: np.ndarray, steps: int, rng) -> list[tuple[int, int]]:
    """Random walk over True cells of ``interior``, 8-connected.

    The walk is generated incrementally so that for a fixed rng stream a
    longer walk is a strict extension of a shorter one (coverage is then
    monotone in the requested length).
    """
    rows, cols = np.nonzero(interior)
    start = rng.integers(rows.size)
    r, c = int(rows[start]), int(cols[start])
    path = [(r, c)]
    h, w = interior.shape
    heading = int(rng.integers(len(_STEPS)))
    for _ in range(steps):
        # Momentum: mostly keep heading so strokes look like strokes.
        if rng.random() > 0.6:
            heading = int(rng.integers(len(_STEPS)))
        candidates = [heading] + list(rng.permutation(len(_STEPS)))
        for idx in candidates:
            dr, dc = _STEPS[idx]
            nr, nc = r + dr, c + dc
            if 0 <= nr < h and 0 <= nc < w and interior[nr, nc]:
                r, c, heading = nr, nc, idx
                path.append((r, c))
                break
        else:
            break  # isolated cell, nowhere to go
    return path


def gen_scribble_labels(
    view: CameraView,
    length_scale: float,
    thickness: int = 1,
    seed: int = 0,
    min_region_area: int = 16,
) -> SparseLabelMap:
    """One random-walk stroke per connected class region.

    The stroke length is length_scale times the region's bounding-box
    diagonal; it is confined to the region eroded by the stamp radius so a
    thickness-wide rasterization never leaves the region. Regions smaller
    than min_region_area (or emptied by the erosion) are skipped.
    """
    if not (0 < length_scale <= 1):
        raise ConfigError(f"length_scale must be in (0, 1], got {length_scale}")
    if thickness < 1:
        raise ConfigError("thickness must be >= 1")

    out = np.full_like(view.gt_labels, sentinel_id(view.class_count))
    radius = thickness // 2
    stamp = 2 * radius + 1
    for class_id in _present_classes(view):
        mask = view.gt_labels == class_id
        regions, n_regions = ndimage.label(mask)
        for region_idx in range(1, n_regions + 1):
            region = regions == region_idx
            if np.count_nonzero(region) < min_region_area:
                continue
            if radius > 0:
                interior = ndimage.binary_erosion(region, structure=np.ones((stamp, stamp)), border_value=0)
            else:
                interior = region
            if not interior.any():
                continue
            rows, cols = np.nonzero(region)
            diag = float(np.hypot(rows.max() - rows.min() + 1, cols.max() - cols.min() + 1))
            steps = max(1, int(round(length_scale * diag)))
            rng = rng_for(seed, view.view_id, "scribble", int(class_id), region_idx)
            for r, c in _region_walk(interior, steps, rng):
                out[max(0, r - radius) : r + radius + 1, max(0, c - radius) : c + radius + 1] = class_id
    return _finish(out, "scribbles", view.class_count)


def gen_coarse_labels(view: CameraView, erosion_radius: int) -> SparseLabelMap:
    """Keep each class region's interior after a square erosion.

    A pixel stays labeled iff every pixel within Chebyshev distance
    erosion_radius (including positions outside the image) shares its
    class; the boundary band becomes unlabeled.
    """
    if erosion_radius < 1:
        raise ConfigError(f"erosion_radius must be >= 1, got {erosion_radius}")
    out = np.full_like(view.gt_labels, sentinel_id(view.class_count))
    size = 2 * erosion_radius + 1
    structure = np.ones((size, size))
    for class_id in _present_classes(view):
        eroded = ndimage.binary_erosion(view.gt_labels == class_id, structure=structure, border_value=0)
        out[eroded] = class_id
    return _finish(out, "coarse", view.class_count)


def transfer_labels_to_3d(cloud: ScenePointCloud, maps: dict) -> ScenePointCloud:
    """Copy each point's source-pixel annotation onto the point.

    ``maps`` is keyed by view id. Labeled pixels label their points, the
    rest stay unlabeled; positions, confidences and point count never
    change. Aggregating over all source views yields one unified sparsely
    labeled cloud.
    """
    missing = set(np.unique(cloud.source_view).tolist()) - set(maps.keys())
    if missing:
        raise ConfigError(f"no label map for source views {sorted(missing)}")
    labels = np.full(len(cloud), sentinel_id(cloud.class_count), dtype=np.int64)
    for view_id, label_map in maps.items():
        sel = cloud.source_view == view_id
        if not sel.any():
            continue
        raster = label_map.labels
        labels[sel] = raster[cloud.source_v[sel], cloud.source_u[sel]]
    return relabel_cloud(cloud, labels)


def save_label_maps(path, maps: dict, class_count: int) -> None:
    """Serialize per-view label maps in the shared container format."""
    from cmc_forge import container

    view_ids = sorted(maps.keys())
    if not view_ids:
        raise ContractError("no label maps to save")
    tensors = {
        "labels": np.stack([maps[v].labels for v in view_ids]),
        "view_ids": np.array(view_ids, dtype=np.int64),
    }
    meta = {
        "kind": "label_maps",
        "class_count": class_count,
        "kinds": [maps[v].kind for v in view_ids],
    }
    container.save_tensors(path, tensors, meta)


def load_label_maps(path) -> dict:
    from cmc_forge import container

    tensors, meta = container.load_tensors(path)
    if meta.get("kind") != "label_maps":
        raise ContractError(f"{path} does not hold label maps")
    out = {}
    for i, view_id in enumerate(tensors["view_ids"]):
        out[int(view_id)] = _finish(tensors["labels"][i], meta["kinds"][i], int(meta["class_count"]))
    return out
