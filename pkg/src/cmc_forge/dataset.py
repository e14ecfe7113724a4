"""Benchmark assembly: scenes, a ring camera rig, annotations, clouds.

A benchmark is fully determined by (DataParams, seed). Scenes, views and
label maps are shared across ablation variants of the same seed; clouds
derive deterministically from the views plus the reconstruction settings,
so variants that change density or scope rebuild only that part.
"""

import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from cmc_forge import annotate, worldgen
from cmc_forge.config import DataParams
from cmc_forge.errors import ConfigError
from cmc_forge.geometry import CameraIntrinsics, CameraPose
from cmc_forge.seeding import rng_for


def look_at_pose(eye: np.ndarray, target: np.ndarray) -> CameraPose:
    """World-to-camera pose for a camera at eye looking at target, z-up world."""
    forward = np.asarray(target, dtype=np.float64) - np.asarray(eye, dtype=np.float64)
    norm = np.linalg.norm(forward)
    if norm == 0:
        raise ConfigError("camera eye and target coincide")
    forward = forward / norm
    world_up = np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, world_up)
    r_norm = np.linalg.norm(right)
    if r_norm < 1e-12:
        raise ConfigError("camera looking straight up/down is unsupported by the rig")
    right = right / r_norm
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward])
    return CameraPose(rotation=rotation, translation=-rotation @ np.asarray(eye, dtype=np.float64))


def ring_rig(params: DataParams, scene_seed: int) -> list[CameraPose]:
    """Evenly spaced cameras on a circle, all looking at the scene center.

    A small seeded phase offset decorrelates rigs across scenes.
    """
    s = params.scene.scene_scale
    phase = float(rng_for(scene_seed, "rig-phase").uniform(0, 2 * math.pi))
    target = np.array([0.0, 0.0, params.rig_target_height * s])
    poses = []
    for i in range(params.views_per_scene):
        angle = phase + 2 * math.pi * i / params.views_per_scene
        eye = np.array(
            [params.rig_radius * s * math.cos(angle), params.rig_radius * s * math.sin(angle), params.rig_height * s]
        )
        poses.append(look_at_pose(eye, target))
    return poses


def default_intrinsics(image_size: int) -> CameraIntrinsics:
    return CameraIntrinsics(
        fx=float(image_size),
        fy=float(image_size),
        cx=image_size / 2.0,
        cy=image_size / 2.0,
        width=image_size,
        height=image_size,
    )


@dataclass
class SceneBundle:
    scene: worldgen.SyntheticScene
    views: list  # CameraView, view_ids unique across the whole benchmark
    label_maps: dict  # view_id -> SparseLabelMap
    cloud: worldgen.ScenePointCloud | None = None  # multi_view scope
    per_view_clouds: dict | None = None  # single_frame scope: view_id -> cloud

    def cloud_for_view(self, view_id: int) -> worldgen.ScenePointCloud:
        if self.per_view_clouds is not None:
            return self.per_view_clouds[view_id]
        return self.cloud


@dataclass
class Benchmark:
    params: DataParams
    seed: int
    bundles: list

    @property
    def views(self):
        return [v for b in self.bundles for v in b.views]

    def bundle_of_view(self, view_id: int) -> SceneBundle:
        return self._view_index[view_id]

    def build_index(self) -> "Benchmark":
        self._view_index = {v.view_id: b for b in self.bundles for v in b.views}
        return self


def _annotate_view(view, params: DataParams, seed: int):
    if params.annotation_kind == "points":
        return annotate.gen_point_labels(view, seed)
    if params.annotation_kind == "scribbles":
        return annotate.gen_scribble_labels(
            view,
            params.scribble_length,
            params.scribble_thickness,
            seed,
            min_region_area=params.min_region_area,
        )
    return annotate.gen_coarse_labels(view, params.coarse_erosion)


def _build_bundle(params: DataParams, seed: int, scene_idx: int) -> SceneBundle:
    scene_seed = int(rng_for(seed, "scene-seed", scene_idx).integers(0, 2**31 - 1))
    scene = worldgen.generate_scene(params.scene, scene_seed)
    intr = default_intrinsics(params.image_size)
    base_id = scene_idx * params.views_per_scene
    views = [
        worldgen.render_view(scene, intr, pose, base_id + i, params.features)
        for i, pose in enumerate(ring_rig(params, scene_seed))
    ]
    label_maps = {v.view_id: _annotate_view(v, params, seed) for v in views}

    bundle = SceneBundle(scene=scene, views=views, label_maps=label_maps)
    recon_seed = int(rng_for(seed, "recon-seed", scene_idx).integers(0, 2**31 - 1))
    if params.recon_scope == "multi_view":
        cloud = worldgen.simulate_reconstruction(
            views,
            params.recon_noise,
            params.recon_density,
            scene_scale=scene.scene_scale,
            seed=recon_seed,
            scan_stride=params.scan_stride,
        )
        bundle.cloud = annotate.transfer_labels_to_3d(cloud, label_maps)
    else:
        bundle.per_view_clouds = {}
        for view in views:
            cloud = worldgen.simulate_reconstruction(
                [view],
                params.recon_noise,
                params.recon_density,
                scene_scale=scene.scene_scale,
                seed=recon_seed,
                scan_stride=params.scan_stride,
            )
            bundle.per_view_clouds[view.view_id] = annotate.transfer_labels_to_3d(
                cloud, {view.view_id: label_maps[view.view_id]}
            )
    return bundle


def build_benchmark(params: DataParams, seed: int, threads: int = 1) -> Benchmark:
    """Generate the full benchmark for one seed; deterministic and
    independent of thread count (per-scene streams are key-derived)."""
    if params.num_scenes < 1:
        raise ConfigError("num_scenes must be >= 1")
    indices = range(params.num_scenes)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            bundles = list(pool.map(lambda i: _build_bundle(params, seed, i), indices))
    else:
        bundles = [_build_bundle(params, seed, i) for i in indices]
    return Benchmark(params=params, seed=seed, bundles=bundles).build_index()


def dataset_fingerprint(benchmark: Benchmark) -> str:
    """Hash of the shared part of a benchmark (views + annotations).

    Paired ablation variants must agree on this even when their clouds
    differ (density/scope are part of the variant, not the shared data).
    """
    h = hashlib.sha256()
    for bundle in benchmark.bundles:
        for view in bundle.views:
            h.update(view.features.tobytes())
            h.update(view.gt_labels.tobytes())
            h.update(view.gt_depth.tobytes())
            h.update(bundle.label_maps[view.view_id].labels.tobytes())
    return h.hexdigest()[:16]


def save_benchmark(benchmark: Benchmark, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, bundle in enumerate(benchmark.bundles):
        scene_dir = out_dir / f"scene_{i:03d}"
        scene_dir.mkdir(exist_ok=True)
        worldgen.save_views(scene_dir / "views.bin", bundle.views)
        annotate.save_label_maps(scene_dir / "labels.bin", bundle.label_maps, bundle.scene.class_count)
        if bundle.cloud is not None:
            worldgen.save_cloud(scene_dir / "cloud.bin", bundle.cloud)
        else:
            for view_id, cloud in bundle.per_view_clouds.items():
                worldgen.save_cloud(scene_dir / f"cloud_view_{view_id:04d}.bin", cloud)
