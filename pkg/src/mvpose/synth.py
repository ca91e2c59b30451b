"""Synthetic capture generator with exact ground truth.

Objects are sparse sets of parts, each carrying a distinct unit descriptor.
Views are rendered onto the patch grid by a z-buffered pinhole projection,
with block-constant depth, so every geometric stage of the pipeline has a
known right answer. All randomness derives from (category_seed, seed), and
reference rendering ignores ``seed`` entirely: one category always yields the
same reference scan no matter which target instance is drawn.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .capture import (
    CameraIntrinsics,
    CameraPose,
    CaptureBundle,
    DepthMap,
    DescriptorMap,
    SaliencyMap,
    ViewRecord,
    l2_normalize,
)
from .errors import ConfigInvalid
from .solve import AffineTransform, SimilarityTransform

_REF_CAM_TAG = 0xA1
_REF_BG_TAG = 0xA2
_TGT_TAG = 0xB1
_CAT_TAG = 0xC0


@dataclass(frozen=True)
class SyntheticSceneConfig:
    """Everything that determines a synthetic reference/target scene pair."""

    num_parts: int = 40
    descriptor_dim: int = 64
    grid_size: int = 16
    image_size: int = 128
    views_ref: int = 10
    views_tgt: int = 10
    noise_deg: float = 0.0
    outlier_fraction: float = 0.0
    visible_fraction: float = 1.0
    cls_noise_deg: float = 10.0
    transform: SimilarityTransform | AffineTransform | None = None
    object_radius: float = 0.5
    camera_distance: float = 2.0
    focal_factor: float = 1.2
    signal_dim: int | None = None
    noise_floor: float = 0.0
    category_seed: int = 0
    seed: int = 0

    def check(self) -> None:
        if self.num_parts < 4:
            raise ConfigInvalid("need at least 4 parts")
        if self.views_ref < 1 or self.views_tgt < 1:
            raise ConfigInvalid("need at least one view on each side")
        if not (0.0 <= self.outlier_fraction <= 1.0):
            raise ConfigInvalid(f"outlier fraction {self.outlier_fraction} outside [0, 1]")
        if not (0.0 < self.visible_fraction <= 1.0):
            raise ConfigInvalid(f"visible fraction {self.visible_fraction} outside (0, 1]")
        if self.grid_size < 2 or self.descriptor_dim < 2:
            raise ConfigInvalid("grid and descriptor dim must be at least 2")
        if self.image_size % self.grid_size:
            raise ConfigInvalid("image size must be a multiple of the grid size")
        if self.signal_dim is not None and not (2 <= self.signal_dim <= self.descriptor_dim):
            raise ConfigInvalid(f"signal dim {self.signal_dim} outside [2, {self.descriptor_dim}]")
        if self.noise_floor < 0:
            raise ConfigInvalid(f"noise floor must be non-negative, got {self.noise_floor}")


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _random_units(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    v = rng.normal(size=(n, dim))
    return l2_normalize(v.astype(np.float64))


def _rotate_towards(vecs: np.ndarray, angles_rad: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Rotate each unit row by its angle within a random plane containing it."""
    r = rng.normal(size=vecs.shape)
    u = r - np.einsum("nd,nd->n", r, vecs)[:, None] * vecs
    nu = np.linalg.norm(u, axis=1)
    ok = nu > 1e-12
    u = np.where(ok[:, None], u / np.where(ok, nu, 1.0)[:, None], 0.0)
    a = np.asarray(angles_rad)[:, None]
    out = np.cos(a) * vecs + np.sin(a) * u
    return np.where(ok[:, None], out, vecs)


@dataclass(frozen=True)
class _CategoryContent:
    part_offsets: np.ndarray
    part_descriptors: np.ndarray
    cls_centroid: np.ndarray
    subspace: np.ndarray | None


def _category_content(cfg: SyntheticSceneConfig) -> _CategoryContent:
    rng = np.random.default_rng([cfg.category_seed, _CAT_TAG])
    dirs = _random_units(rng, cfg.num_parts, 3)
    radii = cfg.object_radius * rng.random(cfg.num_parts) ** (1.0 / 3.0)
    offsets = dirs * radii[:, None]
    offsets -= offsets.mean(axis=0)
    subspace = None
    if cfg.signal_dim is not None and cfg.signal_dim < cfg.descriptor_dim:
        subspace, _ = np.linalg.qr(rng.normal(size=(cfg.descriptor_dim, cfg.signal_dim)))
    if subspace is None:
        descs = _random_units(rng, cfg.num_parts, cfg.descriptor_dim)
    else:
        descs = _random_units(rng, cfg.num_parts, cfg.signal_dim) @ subspace.T
    centroid = _random_units(rng, 1, cfg.descriptor_dim)[0]
    return _CategoryContent(offsets, descs, centroid, subspace)


def _unit_sampler(content: _CategoryContent, dim: int):
    """Random unit descriptors, confined to the signal subspace when one exists."""

    def sample(rng: np.random.Generator, n: int) -> np.ndarray:
        if content.subspace is not None:
            return _random_units(rng, n, content.subspace.shape[1]) @ content.subspace.T
        return _random_units(rng, n, dim)

    return sample


def _look_at_pose(position: np.ndarray, center: np.ndarray) -> CameraPose:
    z = _unit(center - position)
    x = np.cross(np.array([0.0, 0.0, 1.0]), z)
    x = _unit(x)
    y = np.cross(z, x)
    rot = np.stack([x, y, z], axis=1)
    return CameraPose(rotation=rot, translation=position.astype(np.float64))


def _hemisphere_cameras(
    rng: np.random.Generator, count: int, center: np.ndarray, distance: float
) -> list[CameraPose]:
    poses = []
    for _ in range(count):
        az = rng.uniform(0.0, 2.0 * math.pi)
        el = rng.uniform(math.radians(25.0), math.radians(70.0))
        d = np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
        poses.append(_look_at_pose(center + distance * d, center))
    return poses


def _render_view(
    cfg: SyntheticSceneConfig,
    points: np.ndarray,
    descriptors: np.ndarray,
    pose: CameraPose,
    intr: CameraIntrinsics,
    rng: np.random.Generator,
    visible: np.ndarray,
    outlier_fraction: float,
    cls_centroid: np.ndarray,
    cls_noise_deg: float,
    far_depth: float,
    sampler,
) -> ViewRecord:
    g = cfg.grid_size
    img = cfg.image_size
    ppx = img // g

    cam = (points - pose.translation) @ pose.rotation
    z = cam[:, 2]
    x = intr.fx * cam[:, 0] / z + intr.cx
    y = intr.fy * cam[:, 1] / z + intr.cy
    col = np.floor(x / ppx).astype(np.int64)
    row = np.floor(y / ppx).astype(np.int64)
    ok = visible & (z > 0) & (col >= 0) & (col < g) & (row >= 0) & (row < g)

    desc = sampler(rng, g * g).reshape(g, g, -1)
    sal = np.zeros((g, g), dtype=np.float32)
    depth = np.full((img, img), far_depth, dtype=np.float32)

    order = np.argsort(-z)  # far to near so near parts overwrite
    part_cells: dict[tuple[int, int], int] = {}
    for idx in order:
        if not ok[idx]:
            continue
        r, c = int(row[idx]), int(col[idx])
        part_cells[(r, c)] = idx
        desc[r, c] = descriptors[idx]
        sal[r, c] = 1.0
        depth[r * ppx : (r + 1) * ppx, c * ppx : (c + 1) * ppx] = z[idx]

    if part_cells and outlier_fraction > 0:
        cells = sorted(part_cells)
        junk = rng.random(len(cells)) < outlier_fraction
        fresh = sampler(rng, int(junk.sum()))
        fi = 0
        for cell, is_junk in zip(cells, junk):
            if is_junk:
                desc[cell] = fresh[fi]
                fi += 1

    if cfg.noise_floor > 0:
        desc = l2_normalize(desc + cfg.noise_floor * rng.normal(size=desc.shape))

    cls = cls_centroid
    if cls_noise_deg > 0:
        ang = np.array([math.radians(cls_noise_deg) * rng.random()])
        cls = _rotate_towards(cls_centroid[None], ang, rng)[0]

    return ViewRecord(
        descriptor_map=DescriptorMap(l2_normalize(desc.astype(np.float32))),
        saliency=SaliencyMap(sal),
        depth=DepthMap(data=depth, valid=np.ones_like(depth, dtype=bool)),
        intrinsics=intr,
        pose=pose,
        crop_rect=(0.0, 0.0, float(img), float(img)),
        cls_token=cls.astype(np.float32),
    )


def _intrinsics(cfg: SyntheticSceneConfig) -> CameraIntrinsics:
    f = cfg.focal_factor * cfg.image_size
    c = cfg.image_size / 2.0
    return CameraIntrinsics(fx=f, fy=f, cx=c, cy=c, width=cfg.image_size, height=cfg.image_size)


def synth_reference(cfg: SyntheticSceneConfig) -> CaptureBundle:
    """Reference scan of the canonical object; independent of ``cfg.seed``."""
    cfg.check()
    content = _category_content(cfg)
    intr = _intrinsics(cfg)
    cam_rng = np.random.default_rng([cfg.category_seed, _REF_CAM_TAG])
    render_rng = np.random.default_rng([cfg.category_seed, _REF_BG_TAG])
    center = np.zeros(3)
    poses = _hemisphere_cameras(cam_rng, cfg.views_ref, center, cfg.camera_distance)
    far = cfg.camera_distance + 4.0 * cfg.object_radius
    sampler = _unit_sampler(content, cfg.descriptor_dim)
    views = [
        _render_view(
            cfg,
            content.part_offsets,
            content.part_descriptors,
            pose,
            intr,
            render_rng,
            np.ones(cfg.num_parts, dtype=bool),
            0.0,
            content.cls_centroid,
            cfg.cls_noise_deg,
            far,
            sampler,
        )
        for pose in poses
    ]
    return CaptureBundle(
        object_id=f"synth_ref_c{cfg.category_seed}",
        views=views,
        category_label=f"cat{cfg.category_seed}",
    )


def synth_target(cfg: SyntheticSceneConfig) -> tuple[CaptureBundle, SimilarityTransform | AffineTransform]:
    """Target scan of a transformed instance plus the exact ground truth."""
    cfg.check()
    content = _category_content(cfg)
    intr = _intrinsics(cfg)
    truth = cfg.transform if cfg.transform is not None else SimilarityTransform.identity()
    rng = np.random.default_rng([cfg.category_seed, cfg.seed, _TGT_TAG])

    points = truth.apply(content.part_offsets)
    descs = content.part_descriptors
    if cfg.noise_deg > 0:
        angles = np.deg2rad(cfg.noise_deg) * rng.random(cfg.num_parts)
        descs = _rotate_towards(descs, angles, rng)

    if isinstance(truth, AffineTransform):
        scale = float(np.abs(truth.scales).mean())
    else:
        scale = float(truth.scale)
    center = truth.apply(np.zeros((1, 3)))[0]
    poses = _hemisphere_cameras(rng, cfg.views_tgt, center, cfg.camera_distance * scale)
    far = (cfg.camera_distance + 4.0 * cfg.object_radius) * scale

    sampler = _unit_sampler(content, cfg.descriptor_dim)
    views = []
    for pose in poses:
        visible = np.ones(cfg.num_parts, dtype=bool)
        if cfg.visible_fraction < 1.0:
            n_vis = max(4, int(round(cfg.visible_fraction * cfg.num_parts)))
            chosen = rng.choice(cfg.num_parts, size=n_vis, replace=False)
            visible = np.zeros(cfg.num_parts, dtype=bool)
            visible[chosen] = True
        views.append(
            _render_view(
                cfg,
                points,
                descs,
                pose,
                intr,
                rng,
                visible,
                cfg.outlier_fraction,
                content.cls_centroid,
                cfg.cls_noise_deg,
                far,
                sampler,
            )
        )
    bundle = CaptureBundle(
        object_id=f"synth_tgt_c{cfg.category_seed}_s{cfg.seed}",
        views=views,
        category_label=f"cat{cfg.category_seed}",
    )
    return bundle, truth


def synth_scene(
    cfg: SyntheticSceneConfig,
) -> tuple[CaptureBundle, CaptureBundle, SimilarityTransform | AffineTransform]:
    """Reference bundle, target bundle and the ground-truth transform."""
    ref = synth_reference(cfg)
    tgt, truth = synth_target(cfg)
    return ref, tgt, truth


def random_similarity(
    rng: np.random.Generator,
    scale_range: tuple[float, float] = (0.7, 1.4),
    translation_range: float = 1.0,
) -> SimilarityTransform:
    """Uniform random ground-truth similarity transform."""
    from .so3 import random_rotations

    rot = random_rotations(1, rng)[0]
    scale = rng.uniform(*scale_range)
    t = rng.uniform(-translation_range, translation_range, size=3)
    return SimilarityTransform(scale=float(scale), rotation=rot, translation=t)


def make_token_clusters(
    num_categories: int,
    dim: int,
    rng: np.random.Generator,
    max_mutual_cos: float = 0.3,
    max_tries: int = 10_000,
) -> np.ndarray:
    """Unit centroids with pairwise cosine at most ``max_mutual_cos``."""
    out: list[np.ndarray] = []
    for _ in range(max_tries):
        cand = _random_units(rng, 1, dim)[0]
        if all(abs(float(cand @ c)) <= max_mutual_cos for c in out):
            out.append(cand)
            if len(out) == num_categories:
                return np.stack(out)
    raise ConfigInvalid(
        f"could not place {num_categories} centroids at cosine <= {max_mutual_cos} in {dim} dims"
    )


def draw_cluster_tokens(
    centroid: np.ndarray,
    count: int,
    max_angle_deg: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Unit tokens within ``max_angle_deg`` of their centroid.

    ``centroid`` is either one vector, used for every token, or a (count, D)
    array giving each token its own centre.
    """
    centroid = np.asarray(centroid, dtype=np.float64)
    if centroid.ndim == 1:
        centroid = np.repeat(centroid[None], count, axis=0)
    elif centroid.shape[0] != count:
        raise ConfigInvalid(f"{centroid.shape[0]} centroids for {count} tokens")
    angles = np.deg2rad(max_angle_deg) * rng.random(count)
    return _rotate_towards(centroid, angles, rng)
