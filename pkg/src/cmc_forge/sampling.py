"""Per-view point subsampling strategies for the 3D branch.

The view-aware strategy fills a fixed quota of the budget with points
unprojected from the target view itself (dense 2D-3D correspondences for
the cross-modal loss) and the remainder with scene context drawn within a
radius of the camera center. Cross-modal supervision uses exactly the
correspondence part; context points feed only the 3D branch.
"""

from dataclasses import dataclass

import numpy as np

from cmc_forge.errors import ConfigError, DomainError
from cmc_forge.geometry import camera_center
from cmc_forge.seeding import rng_for
from cmc_forge.worldgen import CameraView, ScenePointCloud


@dataclass(frozen=True)
class ViewSample:
    """Indices into a ScenePointCloud picked for one target view.

    correspondence_mask marks points that originate from the target view;
    view_fraction records the requested quota (view-aware) or the realized
    fraction (strategies without a quota).
    """

    target_view_id: int
    point_indices: np.ndarray  # (M,) int64
    correspondence_mask: np.ndarray  # (M,) bool
    budget: int
    view_fraction: float
    context_radius: float

    def __len__(self) -> int:
        return self.point_indices.shape[0]


def _check(cloud: ScenePointCloud, budget: int) -> None:
    if len(cloud) == 0:
        raise DomainError("cannot sample from an empty cloud")
    if budget < 1:
        raise ConfigError(f"budget must be >= 1, got {budget}")


def eligible_pools(cloud: ScenePointCloud, target_view: CameraView, context_radius: float):
    """(same-view pool, in-radius context pool) index arrays for one view.

    Static for a given cloud and view; callers that sample every epoch can
    compute these once and pass them back in.
    """
    from_view = cloud.source_view == target_view.view_id
    view_pool = np.nonzero(from_view)[0]
    center = camera_center(target_view.pose)
    dist = np.linalg.norm(cloud.positions - center, axis=1)
    context_pool = np.nonzero(~from_view & (dist <= context_radius))[0]
    return view_pool, context_pool


def view_aware_sample(
    cloud: ScenePointCloud,
    target_view: CameraView,
    budget: int,
    view_fraction: float,
    context_radius: float,
    seed: int,
    pools: tuple | None = None,
) -> ViewSample:
    """Quota of same-view points plus uniform context within a radius.

    round(budget * view_fraction) points come uniformly without
    replacement from the target view's own points (all of them if fewer
    exist, with the shortfall refilled from context); the remainder comes
    uniformly from other-view points within context_radius of the camera
    center. The view quota is a cap: when the context pool cannot fill its
    share the sample undershoots the budget rather than letting extra
    same-view points masquerade as context.
    """
    _check(cloud, budget)
    if not (0.0 <= view_fraction <= 1.0):
        raise ConfigError(f"view_fraction must be in [0, 1], got {view_fraction}")

    rng = rng_for(seed, target_view.view_id, "view-aware-sample")
    view_pool, context_pool = pools if pools is not None else eligible_pools(cloud, target_view, context_radius)

    quota = int(round(budget * view_fraction))
    take_view = min(quota, view_pool.size)
    chosen_view = rng.choice(view_pool, size=take_view, replace=False) if take_view else np.empty(0, dtype=np.int64)
    take_ctx = min(budget - take_view, context_pool.size)
    chosen_ctx = rng.choice(context_pool, size=take_ctx, replace=False) if take_ctx else np.empty(0, dtype=np.int64)

    indices = np.concatenate([chosen_view, chosen_ctx]).astype(np.int64)
    mask = np.zeros(indices.size, dtype=bool)
    mask[:take_view] = True
    return ViewSample(
        target_view_id=target_view.view_id,
        point_indices=indices,
        correspondence_mask=mask,
        budget=budget,
        view_fraction=view_fraction,
        context_radius=context_radius,
    )


def random_sample(cloud: ScenePointCloud, target_view: CameraView, budget: int, seed: int) -> ViewSample:
    """Uniform global subsample; correspondences are whatever happens to land."""
    _check(cloud, budget)
    rng = rng_for(seed, target_view.view_id, "random-sample")
    n = len(cloud)
    if budget >= n:
        indices = np.arange(n, dtype=np.int64)
    else:
        indices = rng.choice(n, size=budget, replace=False).astype(np.int64)
    mask = cloud.source_view[indices] == target_view.view_id
    return ViewSample(
        target_view_id=target_view.view_id,
        point_indices=indices,
        correspondence_mask=mask,
        budget=budget,
        view_fraction=float(mask.mean()),
        context_radius=float("inf"),
    )


def correspondences_only_sample(
    cloud: ScenePointCloud, target_view: CameraView, budget: int, seed: int
) -> ViewSample:
    """Target-view points only, no context refill (may undershoot budget)."""
    _check(cloud, budget)
    rng = rng_for(seed, target_view.view_id, "view-aware-sample")
    view_pool = np.nonzero(cloud.source_view == target_view.view_id)[0]
    take = min(budget, view_pool.size)
    indices = rng.choice(view_pool, size=take, replace=False).astype(np.int64) if take else np.empty(0, dtype=np.int64)
    return ViewSample(
        target_view_id=target_view.view_id,
        point_indices=indices,
        correspondence_mask=np.ones(indices.size, dtype=bool),
        budget=budget,
        view_fraction=1.0,
        context_radius=0.0,
    )
