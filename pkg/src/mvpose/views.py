"""Cross-view retrieval: score every reference/target view pair, pick the
best reference per target, and filter the survivors by rotation consensus."""

from __future__ import annotations

import functools
import time

import numpy as np

from . import matching
from .capture import CaptureBundle
from .errors import DegenerateConfiguration, DimensionMismatch, MissingGeometry
from .so3 import chordal_mean, geodesic_distance, geodesic_distances, random_rotations

DEFAULT_CONSENSUS_SAMPLES = 10_000


@functools.lru_cache(maxsize=8)
def _consensus_centers(num_samples: int, seed: int) -> np.ndarray:
    """Uniform rotation samples for consensus voting, memoized per seed."""
    rots = random_rotations(num_samples, np.random.default_rng(seed))
    rots.setflags(write=False)
    return rots


class ViewPairScore:
    """Matching summary of one (reference view, target view) pairing.

    ``score`` is the sum of the match similarities; ``implied_rotation`` is
    the relative rotation R_tgt R_ref^T suggested by treating the two camera
    frames as aligned through the match. The per-patch match list builds on
    first access: most pairings are scored, lose retrieval, and never need
    it, so :func:`build_view_matrix` hands over the selection arrays instead.
    """

    __slots__ = ("ref_index", "tgt_index", "score", "implied_rotation", "_matches", "_arrays")

    def __init__(
        self,
        ref_index: int,
        tgt_index: int,
        score: float,
        implied_rotation: np.ndarray,
        matches: list[matching.PatchMatch] | None = None,
        match_arrays: tuple | None = None,
    ):
        self.ref_index = ref_index
        self.tgt_index = tgt_index
        self.score = score
        self.implied_rotation = implied_rotation
        self._matches = matches
        self._arrays = match_arrays

    @property
    def matches(self) -> list[matching.PatchMatch]:
        if self._matches is None:
            self._matches = matching._as_matches(*self._arrays) if self._arrays else []
            self._arrays = None
        return self._matches

    def __repr__(self) -> str:
        return (
            f"ViewPairScore(ref_index={self.ref_index}, tgt_index={self.tgt_index}, "
            f"score={self.score:.4f})"
        )

    def to_dict(self) -> dict:
        return {
            "ref_index": self.ref_index,
            "tgt_index": self.tgt_index,
            "score": self.score,
            "implied_rotation": self.implied_rotation.tolist(),
            "matches": [m.to_dict() for m in self.matches],
        }


def implied_relative_rotation(ref_pose_rot: np.ndarray, tgt_pose_rot: np.ndarray) -> np.ndarray:
    """Relative rotation carrying the reference camera frame onto the target's."""
    return np.asarray(tgt_pose_rot) @ np.asarray(ref_pose_rot).T


def build_view_matrix(
    ref_bundle: CaptureBundle,
    tgt_bundle: CaptureBundle,
    p: int,
    cyclical: str = "2d",
    ref_points: list[np.ndarray] | None = None,
    dtype=np.float32,
    ref_maps=None,
    tgt_maps=None,
) -> tuple[np.ndarray, list[list[ViewPairScore]]]:
    """Score all M x N view pairings with exactly ``p`` matches each.

    Returns the score matrix (M, N) and the per-pair details. Candidate
    search runs in ``dtype`` (float32 by default); the similarities of the
    selected pairs are recomputed in float64 so reported scores are stable.

    ``cyclical`` picks the fill metric: "2d" ranks by patch-space gap, "3d"
    by the distance between back-projected reference patch points, which then
    must be supplied per reference view via ``ref_points``. Projected
    descriptor maps can be swapped in through ``ref_maps``/``tgt_maps``
    without touching the bundles; poses still come from the bundles.
    """
    ref_maps = ref_maps if ref_maps is not None else [v.descriptor_map for v in ref_bundle.views]
    tgt_maps = tgt_maps if tgt_maps is not None else [v.descriptor_map for v in tgt_bundle.views]
    if ref_maps[0].dim != tgt_maps[0].dim:
        raise DimensionMismatch(f"map dims differ: {ref_maps[0].dim} vs {tgt_maps[0].dim}")
    if cyclical not in ("2d", "3d"):
        raise DegenerateConfiguration(f"unknown cyclical mode {cyclical!r}")
    if cyclical == "3d" and ref_points is None:
        raise MissingGeometry("cyclical='3d' needs back-projected reference points")

    m, n = ref_bundle.num_views, tgt_bundle.num_views
    g_ref = ref_maps[0].grid_size
    g_tgt = tgt_maps[0].grid_size
    n_ref_patches = g_ref**2
    n_tgt_patches = g_tgt**2

    ref_flat = np.concatenate([r.flat().astype(dtype) for r in ref_maps])  # (M*G^2, k)
    tgt_flat = np.concatenate([t.flat().astype(dtype) for t in tgt_maps])  # (N*G^2, k)
    ref_valid = [r.flat_valid() for r in ref_maps]
    tgt_valid = [t.flat_valid() for t in tgt_maps]
    # float64 rows of the original maps for the exact rescore, upcast once
    ref64 = np.concatenate([r.flat().astype(np.float64, copy=False) for r in ref_maps])
    tgt64 = np.concatenate([t.flat().astype(np.float64, copy=False) for t in tgt_maps])

    # every pairing in one GEMM per direction; selection only compares
    # values, so the raw products go unclipped (clipping is monotone) and the
    # reported similarities are clipped after the exact rescore below
    block = ref_flat @ tgt_flat.T
    block_t = tgt_flat @ ref_flat.T
    # one batched argmax per direction for all M x N tiles; masks the blocks
    # in place, which is fine: only valid entries are ever read back out
    row_best, col_best = matching._blockwise_mutual_argmax(block, block_t, ref_valid, tgt_valid)
    ref_any = [bool(v.any()) for v in ref_valid]
    tgt_any = [bool(v.any()) for v in tgt_valid]
    neg_ones = np.full(max(n_ref_patches, n_tgt_patches), -1, dtype=np.int64)
    rel_rots = np.einsum(
        "jab,icb->ijac",
        np.stack([v.pose.rotation for v in tgt_bundle.views]),
        np.stack([v.pose.rotation for v in ref_bundle.views]),
    )  # rel_rots[i, j] = R_tgt_j @ R_ref_i^T

    selected = []
    for i in range(m):
        rows = block[i * n_ref_patches : (i + 1) * n_ref_patches]
        for j in range(n):
            sim = rows[:, j * n_tgt_patches : (j + 1) * n_tgt_patches]
            rb = np.ascontiguousarray(row_best[i * n_ref_patches : (i + 1) * n_ref_patches, j])
            cb = np.ascontiguousarray(col_best[j * n_tgt_patches : (j + 1) * n_tgt_patches, i])
            if not tgt_any[j]:
                rb = neg_ones[:n_ref_patches]
            if not ref_any[i]:
                cb = neg_ones[:n_tgt_patches]
            if cyclical == "3d":
                u_lin, v_lin, _, flags = _select_3d(
                    sim, ref_valid[i], tgt_valid[j], p, ref_points[i], nn=(rb, cb)
                )
            else:
                u_lin, v_lin, _, flags = matching._match_arrays(
                    sim, ref_valid[i], tgt_valid[j], p=p, grid_cols=g_ref, nn=(rb, cb)
                )
            selected.append((u_lin, v_lin, flags))

    # exact float64 rescore of every selected pair at once
    lengths = [u.size for u, _, _ in selected]
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    gather_u = np.concatenate(
        [u + (idx // n) * n_ref_patches for idx, (u, _, _) in enumerate(selected)]
    )
    gather_v = np.concatenate(
        [v + (idx % n) * n_tgt_patches for idx, (_, v, _) in enumerate(selected)]
    )
    all_sims = np.einsum("ij,ij->i", ref64[gather_u], tgt64[gather_v])
    np.clip(all_sims, -1.0, 1.0, out=all_sims)

    scores = np.zeros((m, n))
    pairs: list[list[ViewPairScore]] = []
    for i in range(m):
        row: list[ViewPairScore] = []
        for j in range(n):
            idx = i * n + j
            u_lin, v_lin, flags = selected[idx]
            sims = all_sims[offsets[idx] : offsets[idx + 1]]
            score = float(sims.sum())
            row.append(
                ViewPairScore(
                    ref_index=i,
                    tgt_index=j,
                    score=score,
                    implied_rotation=rel_rots[i, j],
                    match_arrays=(u_lin, v_lin, sims, flags, g_ref, g_tgt),
                )
            )
            scores[i, j] = score
        pairs.append(row)
    return scores, pairs


def _select_3d(sim, ref_ok, tgt_ok, p, ref_pts, nn=None):
    n = sim.shape[0]
    ref_pts = np.asarray(ref_pts, dtype=np.float64)
    if nn is None:
        nn = matching._mutual_argmax(sim, ref_ok, tgt_ok)
    gaps = matching._cycle_gaps_3d(nn, ref_pts, n)
    return matching._match_arrays(sim, ref_ok, tgt_ok, p=p, cyc_dist=gaps, nn=nn)


def best_reference_per_target(scores: np.ndarray) -> np.ndarray:
    """Index of the highest-scoring reference view for each target view.

    Ties resolve to the lowest reference index.
    """
    scores = np.asarray(scores)
    if scores.ndim != 2 or scores.size == 0:
        raise DimensionMismatch(f"expected a non-empty (M, N) score matrix, got {scores.shape}")
    return scores.argmax(axis=0)


def consensus_filter(
    pairs: list[ViewPairScore],
    theta_deg: float = 30.0,
    num_samples: int = DEFAULT_CONSENSUS_SAMPLES,
    seed: int = 0,
) -> list[ViewPairScore]:
    """Keep the largest subset of pairs whose implied rotations agree.

    Candidate consensus centres are ``num_samples`` uniformly random rotations
    plus each pair's own rotation; a pair agrees with a centre when their
    geodesic distance is at most ``theta_deg``. The best centre keeps the most
    pairs; ties keep the higher total pair score. Order is preserved.
    """
    if not pairs:
        return []
    if theta_deg <= 0:
        raise DegenerateConfiguration(f"theta must be positive, got {theta_deg}")
    rots = np.stack([p.implied_rotation for p in pairs])
    centers = np.concatenate([_consensus_centers(num_samples, seed), rots])
    dist = geodesic_distances(rots, centers)  # (len(pairs), num_centers)
    within = dist <= np.deg2rad(theta_deg)
    counts = within.sum(axis=0)
    scores = np.array([p.score for p in pairs])
    totals = within.T @ scores
    # argmax over (count, then total score); scan keeps the earliest centre on exact ties
    best = np.lexsort((-totals, -counts))[0]
    keep = within[:, best]
    return [p for p, k in zip(pairs, keep) if k]


def retrieval_estimate(
    pairs: list[ViewPairScore],
    mode: str = "R",
    theta_deg: float = 30.0,
) -> np.ndarray:
    """Pose-from-retrieval baseline: average the implied rotations.

    Mode "R" takes the chordal mean of all given pairs. Mode "RC" first
    discards outliers by iteratively removing the rotation farthest from the
    running mean until every survivor is within ``theta_deg``.
    """
    if not pairs:
        raise DegenerateConfiguration("no pairs to average")
    rots = np.stack([p.implied_rotation for p in pairs])
    if mode == "R":
        return chordal_mean(rots)
    if mode != "RC":
        raise DegenerateConfiguration(f"unknown retrieval mode {mode!r}")
    limit = np.deg2rad(theta_deg)
    while True:
        mean = chordal_mean(rots)
        d = geodesic_distances(rots, mean[None])[:, 0]
        if rots.shape[0] == 1 or d.max() <= limit:
            return mean
        rots = np.delete(rots, int(d.argmax()), axis=0)


def timed_stage(fn, *args, **kwargs):
    """Run ``fn`` and return (result, elapsed_ms)."""
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, (time.perf_counter() - t0) * 1000.0
