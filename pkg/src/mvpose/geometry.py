"""Depth completion, back-projection, crops, point-cloud cleanup and boxes."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull, QhullError, cKDTree

from .capture import CameraIntrinsics, CameraPose, CaptureBundle, DepthMap, SaliencyMap
from .errors import (
    DegenerateCloud,
    EmptyDepth,
    MissingGeometry,
    NonPositiveDepth,
    NoSalientRegion,
    OutOfGrid,
)
from .solve import Correspondence3D

_FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


def complete_depth(
    depth: DepthMap,
    small_kernel: int = 5,
    small_passes: int = 2,
    large_kernel: int = 31,
) -> DepthMap:
    """Fill depth holes without touching valid pixels.

    Holes are filled by repeated min-pooling over a small window, then a wide
    max-pool dilation, then the mean of the originally valid depths for
    whatever is left. Every filled value therefore stays within the valid
    input range.
    """
    if not depth.valid.any():
        raise EmptyDepth("depth map has no valid pixels")
    data = depth.data.astype(np.float32, copy=True)
    valid = depth.valid.copy()
    if valid.all():
        return DepthMap(data=data, valid=valid)

    for _ in range(small_passes):
        if valid.all():
            break
        pooled = ndimage.minimum_filter(
            np.where(valid, data, np.inf), size=small_kernel, mode="nearest"
        )
        fresh = ~valid & np.isfinite(pooled)
        data[fresh] = pooled[fresh]
        valid |= fresh

    if not valid.all():
        pooled = ndimage.maximum_filter(
            np.where(valid, data, -np.inf), size=large_kernel, mode="nearest"
        )
        fresh = ~valid & np.isfinite(pooled)
        data[fresh] = pooled[fresh]
        valid |= fresh

    if not valid.all():
        data[~valid] = depth.data[depth.valid].mean()
        valid[:] = True
    return DepthMap(data=data, valid=valid)


def backproject(pixels: np.ndarray, depths: np.ndarray, intrinsics: CameraIntrinsics, pose: CameraPose) -> np.ndarray:
    """Pixel coordinates plus depth to world points.

    ``pixels`` is (..., 2) as (x, y); ``depths`` broadcasts against its lead
    dimensions. Depth is distance along the camera z axis, which must be
    positive.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    depths = np.asarray(depths, dtype=np.float64)
    if np.any(depths <= 0):
        raise NonPositiveDepth("depth values must be positive")
    x = (pixels[..., 0] - intrinsics.cx) / intrinsics.fx * depths
    y = (pixels[..., 1] - intrinsics.cy) / intrinsics.fy * depths
    cam = np.stack([x, y, depths], axis=-1)
    rot = pose.rotation
    return cam @ rot.T + pose.translation


def project_point(world: np.ndarray, intrinsics: CameraIntrinsics, pose: CameraPose) -> np.ndarray:
    """World points to (x, y, cam_depth); the forward map of :func:`backproject`."""
    world = np.asarray(world, dtype=np.float64)
    cam = (world - pose.translation) @ pose.rotation
    z = cam[..., 2]
    x = intrinsics.fx * cam[..., 0] / z + intrinsics.cx
    y = intrinsics.fy * cam[..., 1] / z + intrinsics.cy
    return np.stack([x, y, z], axis=-1)


def patch_to_pixel(patch: tuple[int, int], crop_rect, grid_size: int) -> tuple[float, float]:
    """Centre pixel of a patch cell, mapped through the crop rectangle."""
    row, col = patch
    if not (0 <= row < grid_size and 0 <= col < grid_size):
        raise OutOfGrid(f"patch {patch} outside {grid_size}x{grid_size} grid")
    x0, y0, x1, y1 = crop_rect
    px = x0 + (col + 0.5) * (x1 - x0) / grid_size
    py = y0 + (row + 0.5) * (y1 - y0) / grid_size
    return px, py


def patch_footprint(patch: tuple[int, int], crop_rect, grid_size: int, width: int, height: int):
    """Integer pixel ranges (rows, cols) covered by a patch cell, clipped."""
    row, col = patch
    x0, y0, x1, y1 = crop_rect
    xs = x0 + col * (x1 - x0) / grid_size
    xe = x0 + (col + 1) * (x1 - x0) / grid_size
    ys = y0 + row * (y1 - y0) / grid_size
    ye = y0 + (row + 1) * (y1 - y0) / grid_size
    c0 = max(0, min(width - 1, math.floor(xs)))
    c1 = max(c0 + 1, min(width, math.ceil(xe)))
    r0 = max(0, min(height - 1, math.floor(ys)))
    r1 = max(r0 + 1, min(height, math.ceil(ye)))
    return (r0, r1), (c0, c1)


def detect_object_crop(
    saliency: SaliencyMap,
    image_width: int,
    image_height: int,
    threshold: float = 0.05,
    margin: float = 0.10,
) -> tuple[float, float, float, float]:
    """Bounding rectangle of the dominant salient region, padded and clamped.

    Thresholding is strict, the largest 4-connected component wins (lowest
    label on ties), and the rectangle grows by ``margin`` of its size on each
    side before clamping to the frame.
    """
    mask = saliency.data > threshold
    if not mask.any():
        raise NoSalientRegion(f"no saliency above {threshold}")
    labels, count = ndimage.label(mask, structure=_FOUR_CONN)
    sizes = np.bincount(labels.ravel())[1:]
    pick = int(sizes.argmax()) + 1
    rows, cols = np.nonzero(labels == pick)
    g = saliency.data.shape[0]
    sx = image_width / g
    sy = image_height / g
    x0, x1 = cols.min() * sx, (cols.max() + 1) * sx
    y0, y1 = rows.min() * sy, (rows.max() + 1) * sy
    dx = margin * (x1 - x0)
    dy = margin * (y1 - y0)
    return (
        max(0.0, x0 - dx),
        max(0.0, y0 - dy),
        min(float(image_width), x1 + dx),
        min(float(image_height), y1 + dy),
    )


@dataclass(eq=False)
class PointCloud:
    """World points with an optional (view, x, y) provenance row per point."""

    points: np.ndarray
    sources: np.ndarray | None = None

    def __len__(self) -> int:
        return self.points.shape[0]

    def subset(self, keep: np.ndarray) -> "PointCloud":
        return PointCloud(
            points=self.points[keep],
            sources=None if self.sources is None else self.sources[keep],
        )


def knn_outlier_removal(cloud: PointCloud, k: int = 10, max_radius: float = 5e-5) -> PointCloud:
    """Drop points whose k-th nearest neighbour is farther than ``max_radius``.

    Points with fewer than k neighbours are judged by the farthest neighbour
    they do have (distance 0 when alone), so tiny clouds are never removed
    outright by the rule.
    """
    n = len(cloud)
    if n <= 1:
        return cloud.subset(np.ones(n, dtype=bool))
    kk = min(k, n - 1)
    tree = cKDTree(cloud.points)
    dists, _ = tree.query(cloud.points, k=kk + 1)
    keep = dists[:, kk] <= max_radius
    return cloud.subset(keep)


@dataclass(eq=False)
class OrientedBox:
    """Oriented bounding box; ``axes`` rows are a right-handed orthonormal triad."""

    center: np.ndarray
    axes: np.ndarray
    half_extents: np.ndarray

    @property
    def volume(self) -> float:
        return float(8.0 * np.prod(self.half_extents))

    def corners(self) -> np.ndarray:
        signs = np.array(
            [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
            dtype=np.float64,
        )
        return self.center + (signs * self.half_extents) @ self.axes

    def to_dict(self) -> dict:
        return {
            "center": self.center.tolist(),
            "axes": self.axes.tolist(),
            "half_extents": self.half_extents.tolist(),
            "volume": self.volume,
        }


def _calipers_2d(pts2: np.ndarray) -> np.ndarray:
    """Minimum-area box directions of 2D points; returns two unit rows."""
    try:
        hull = ConvexHull(pts2)
        ring = pts2[hull.vertices]
    except QhullError:
        # collinear fallback: spread direction and its normal
        c = pts2 - pts2.mean(axis=0)
        _, _, vt = np.linalg.svd(c, full_matrices=False)
        d = vt[0] / np.linalg.norm(vt[0])
        return np.stack([d, np.array([-d[1], d[0]])])
    best = None
    m = ring.shape[0]
    for i in range(m):
        edge = ring[(i + 1) % m] - ring[i]
        nrm = np.linalg.norm(edge)
        if nrm == 0:
            continue
        d = edge / nrm
        p = np.array([-d[1], d[0]])
        a = ring @ d
        b = ring @ p
        area = (a.max() - a.min()) * (b.max() - b.min())
        if best is None or area < best[0] - 1e-15:
            best = (area, d, p)
    _, d, p = best
    return np.stack([d, p])


def _largest_facet_normal(hull: ConvexHull) -> np.ndarray:
    """Outward normal of the largest merged (parallel-grouped) facet family."""
    normals = hull.equations[:, :3]
    pts = hull.points
    tris = pts[hull.simplices]
    areas = 0.5 * np.linalg.norm(
        np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]), axis=1
    )
    groups: list[tuple[np.ndarray, float]] = []
    for nrm, area in zip(normals, areas):
        for gi, (gn, ga) in enumerate(groups):
            if abs(float(gn @ nrm)) > 1.0 - 1e-9:
                groups[gi] = (gn, ga + area)
                break
        else:
            groups.append((nrm, area))
    return max(groups, key=lambda g: g[1])[0]


def fit_obb(points: np.ndarray) -> OrientedBox:
    """Tight oriented box from the principal directions of the hull vertices.

    Near-equal covariance eigenvalues make plain PCA directions arbitrary, so
    a degenerate pair is refined with a minimum-area box in its plane, and a
    fully isotropic spectrum anchors one axis to the largest hull facet.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 4:
        raise DegenerateCloud(f"need at least 4 points of shape (n, 3), got {pts.shape}")
    try:
        hull = ConvexHull(pts)
    except QhullError as exc:
        raise DegenerateCloud("points are coplanar or otherwise degenerate") from exc
    verts = pts[hull.vertices]
    centred = verts - verts.mean(axis=0)
    cov = centred.T @ centred / verts.shape[0]
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    lam = eigvals[order]
    pca_axes = eigvecs[:, order].T

    rel = 1e-6 * max(lam[0], 1e-300)
    eq01 = (lam[0] - lam[1]) <= rel
    eq12 = (lam[1] - lam[2]) <= rel

    if eq01 and eq12:
        n1 = _largest_facet_normal(hull)
        n1 = n1 / np.linalg.norm(n1)
        axes = _plane_refined_axes(verts, n1)
    elif eq01:
        axes = _plane_refined_axes(verts, pca_axes[2])
    elif eq12:
        axes = _plane_refined_axes(verts, pca_axes[0])
    else:
        axes = pca_axes

    axes = _canonical_axes(axes)
    coords = verts @ axes.T
    lo = coords.min(axis=0)
    hi = coords.max(axis=0)
    half = (hi - lo) / 2.0
    if np.any(half <= 0):
        raise DegenerateCloud("zero extent along a box axis")
    # order: longest extent first, deterministic and rotation independent
    idx = np.argsort(-half, kind="stable")
    axes = _canonical_axes(axes[idx])
    coords = verts @ axes.T
    lo = coords.min(axis=0)
    hi = coords.max(axis=0)
    center = ((lo + hi) / 2.0) @ axes
    return OrientedBox(center=center, axes=axes, half_extents=(hi - lo) / 2.0)


def _plane_refined_axes(verts: np.ndarray, fixed_axis: np.ndarray) -> np.ndarray:
    """Minimum-area in-plane directions plus the fixed out-of-plane axis."""
    n = fixed_axis / np.linalg.norm(fixed_axis)
    seed = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(n, seed)
    u /= np.linalg.norm(u)
    v = np.cross(n, u)
    pts2 = np.stack([verts @ u, verts @ v], axis=1)
    d2 = _calipers_2d(pts2)
    a = d2[0, 0] * u + d2[0, 1] * v
    b = d2[1, 0] * u + d2[1, 1] * v
    return np.stack([a, b, n])


def _canonical_axes(axes: np.ndarray) -> np.ndarray:
    """Fix signs (largest |entry| positive) and enforce a right-handed triad."""
    out = axes.copy()
    for i in range(2):
        j = int(np.abs(out[i]).argmax())
        if out[i, j] < 0:
            out[i] = -out[i]
    out[2] = np.cross(out[0], out[1])
    return out


def _block_median_grid(depth: DepthMap, grid_size: int) -> np.ndarray | None:
    """(G, G) per-patch median depth when the frame divides evenly, else None."""
    h, w = depth.data.shape
    if h % grid_size or w % grid_size:
        return None
    ph, pw = h // grid_size, w // grid_size
    blocks = depth.data.reshape(grid_size, ph, grid_size, pw).transpose(0, 2, 1, 3)
    return np.median(blocks.reshape(grid_size, grid_size, ph * pw), axis=2)


def _patch_world_points(view, patches, completed: DepthMap, depth_lookup: str, median_grid=None) -> np.ndarray:
    g = view.descriptor_map.grid_size
    h, w = completed.data.shape
    rect = view.crop_rect
    rc = np.asarray(patches, dtype=np.int64).reshape(-1, 2)
    px = rect[0] + (rc[:, 1] + 0.5) * (rect[2] - rect[0]) / g
    py = rect[1] + (rc[:, 0] + 0.5) * (rect[3] - rect[1]) / g
    if depth_lookup == "center":
        cols = np.clip(px.astype(np.int64), 0, w - 1)
        rows = np.clip(py.astype(np.int64), 0, h - 1)
        depths = completed.data[rows, cols].astype(np.float64)
    else:
        full_frame = rect == (0.0, 0.0, float(w), float(h))
        if full_frame and median_grid is not None:
            depths = median_grid[rc[:, 0], rc[:, 1]].astype(np.float64)
        else:
            depths = np.empty(rc.shape[0])
            for i, (r, c) in enumerate(rc):
                (r0, r1), (c0, c1) = patch_footprint((r, c), rect, g, w, h)
                depths[i] = np.median(completed.data[r0:r1, c0:c1])
    return backproject(np.stack([px, py], axis=1), depths, view.intrinsics, view.pose)


def patch_centers_3d(view, completed: DepthMap, depth_lookup: str = "median") -> np.ndarray:
    """World point of every patch cell in a view, shape (G^2, 3)."""
    g = view.descriptor_map.grid_size
    rr, cc = np.meshgrid(np.arange(g), np.arange(g), indexing="ij")
    patches = np.stack([rr.ravel(), cc.ravel()], axis=1)
    grid = _block_median_grid(completed, g) if depth_lookup == "median" else None
    return _patch_world_points(view, patches, completed, depth_lookup, grid)


def correspondences_to_3d(
    pairs,
    ref_bundle: CaptureBundle,
    tgt_bundle: CaptureBundle,
    depth_lookup: str = "median",
    completed_ref: dict[int, DepthMap] | None = None,
    completed_tgt: dict[int, DepthMap] | None = None,
) -> list[Correspondence3D]:
    """Lift patch matches of the given view pairs to 3D point correspondences.

    Each match contributes one pair: the patch centre pixel, back-projected
    with the median completed depth over the patch footprint (or the centre
    pixel's depth when ``depth_lookup='center'``). Pass the completed-depth
    caches to avoid refilling holes per call.
    """
    if depth_lookup not in ("median", "center"):
        raise MissingGeometry(f"unknown depth lookup {depth_lookup!r}")
    completed_ref = {} if completed_ref is None else completed_ref
    completed_tgt = {} if completed_tgt is None else completed_tgt
    median_grids: dict[int, np.ndarray | None] = {}

    def _completed(bundle, cache, idx):
        if idx not in cache:
            cache[idx] = complete_depth(bundle.views[idx].depth)
        return cache[idx]

    out: list[Correspondence3D] = []
    for pair in pairs:
        if not pair.matches:
            continue
        i, j = pair.ref_index, pair.tgt_index
        ref_view = ref_bundle.views[i]
        tgt_view = tgt_bundle.views[j]
        dep_r = _completed(ref_bundle, completed_ref, i)
        dep_t = _completed(tgt_bundle, completed_tgt, j)
        if depth_lookup == "median":
            if ("r", i) not in median_grids:
                median_grids[("r", i)] = _block_median_grid(dep_r, ref_view.descriptor_map.grid_size)
            if ("t", j) not in median_grids:
                median_grids[("t", j)] = _block_median_grid(dep_t, tgt_view.descriptor_map.grid_size)
        ref_pts = _patch_world_points(
            ref_view, [m.u for m in pair.matches], dep_r, depth_lookup, median_grids.get(("r", i))
        )
        tgt_pts = _patch_world_points(
            tgt_view, [m.v for m in pair.matches], dep_t, depth_lookup, median_grids.get(("t", j))
        )
        for m, rp, tp in zip(pair.matches, ref_pts, tgt_pts):
            out.append(
                Correspondence3D(
                    ref_point=rp, tgt_point=tp, similarity=m.similarity, ref_view=i, tgt_view=j
                )
            )
    return out


def export_ply(cloud: PointCloud, path) -> None:
    """Write the cloud as ASCII PLY."""
    pts = np.asarray(cloud.points, dtype=np.float64)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {pts.shape[0]}",
        "property float x",
        "property float y",
        "property float z",
        "end_header",
    ]
    body = ["%.8g %.8g %.8g" % (p[0], p[1], p[2]) for p in pts]
    with open(path, "w") as fh:
        fh.write("\n".join(lines + body) + "\n")
