"""Patch correspondence search between two descriptor maps.

Matching is cosine similarity on unit descriptors, so every score is a plain
dot product. Mutual nearest neighbours come first; when a fixed budget P of
pairs is requested the remainder is filled by cyclical-distance ranking.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .capture import DescriptorMap
from .errors import DimensionMismatch, MissingGeometry


class RankSource(str, Enum):
    MUTUAL = "mutual_nn"
    CYCLICAL = "cyclical_fill"


@dataclass(frozen=True)
class PatchMatch:
    """One matched patch pair: u in the reference grid, v in the target grid."""

    u: tuple[int, int]
    v: tuple[int, int]
    similarity: float
    rank_source: RankSource = RankSource.MUTUAL

    def to_dict(self) -> dict:
        return {
            "u": list(self.u),
            "v": list(self.v),
            "similarity": self.similarity,
            "rank_source": self.rank_source.value,
        }


def _grid_shape(n: int) -> tuple[int, int]:
    g = math.isqrt(n)
    if g * g == n:
        return g, g
    return 1, n


def _to_rc(idx: np.ndarray, cols: int) -> np.ndarray:
    return np.stack([idx // cols, idx % cols], axis=1)


def similarity_matrix(
    ref_map: DescriptorMap,
    tgt_map: DescriptorMap,
    dtype=np.float64,
) -> np.ndarray:
    """All-pairs cosine similarity, shape (G_ref^2, G_tgt^2), clipped to [-1, 1].

    The underlying product is always evaluated with the smaller operand on the
    left so that swapping the two maps yields the exact transpose.
    """
    if ref_map.dim != tgt_map.dim:
        raise DimensionMismatch(f"descriptor dims differ: {ref_map.dim} vs {tgt_map.dim}")
    a = ref_map.flat().astype(dtype, copy=False)
    b = tgt_map.flat().astype(dtype, copy=False)
    if a.shape[0] <= b.shape[0]:
        sim = a @ b.T
    else:
        sim = (b @ a.T).T
    return np.clip(sim, -1.0, 1.0, out=sim)


def _mutual_argmax(
    sim: np.ndarray, row_ok: np.ndarray, col_ok: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Row- and column-argmax over the valid submatrix, from one masked copy.

    Returns (row_best, col_best); entries are -1 for invalid rows/columns and
    wherever the other side has no valid entry at all. Ties go to the lowest
    index. The copy is contiguous on purpose: ``sim`` is usually a column
    slice of a wider block and both argmax passes want cache-friendly rows.
    """
    masked = np.array(sim, order="C", copy=True)
    if not row_ok.all():
        masked[~row_ok, :] = -np.inf
    if not col_ok.all():
        masked[:, ~col_ok] = -np.inf
    row_best = masked.argmax(axis=1)
    col_best = masked.argmax(axis=0)
    row_best[~row_ok] = -1
    col_best[~col_ok] = -1
    if not col_ok.any():
        row_best[:] = -1
    if not row_ok.any():
        col_best[:] = -1
    return row_best, col_best


def _blockwise_mutual_argmax(
    block: np.ndarray,
    block_t: np.ndarray,
    ref_valid: list[np.ndarray],
    tgt_valid: list[np.ndarray],
) -> tuple[np.ndarray, np.ndarray]:
    """Per-pair argmaxes for stacked similarity blocks, one per direction.

    ``block`` is (M*Gr^2, N*Gt^2); ``block_t`` is the independently computed
    transposed product (argmax over numpy's non-contiguous axis is several
    times slower than a second GEMM, so the caller supplies both). Invalid
    rows and columns are masked to -inf in place in both. Returns
    ``(row_best, col_best)``: ``row_best[i*Gr^2 + u, j]`` is the local best
    target patch of reference patch u in pairing (i, j), -1 on invalid u;
    ``col_best[j*Gt^2 + v, i]`` mirrors it for target patches. The
    all-invalid edge (a view with no valid patches on the other side) is the
    caller's to handle, since it is per pairing.
    """
    m, n = len(ref_valid), len(tgt_valid)
    gr2 = block.shape[0] // m
    gt2 = block.shape[1] // n
    rmask = np.concatenate(ref_valid)
    cmask = np.concatenate(tgt_valid)
    if not rmask.all():
        block[~rmask, :] = -np.inf
        block_t[:, ~rmask] = -np.inf
    if not cmask.all():
        block[:, ~cmask] = -np.inf
        block_t[~cmask, :] = -np.inf
    row_best = block.reshape(m * gr2, n, gt2).argmax(axis=2)
    col_best = block_t.reshape(n * gt2, m, gr2).argmax(axis=2)
    row_best[~rmask, :] = -1
    col_best[~cmask, :] = -1
    return row_best, col_best


def _match_arrays(
    sim: np.ndarray,
    ref_ok: np.ndarray,
    tgt_ok: np.ndarray,
    p: int | None,
    cyc_dist: "np.ndarray | None" = None,
    grid_cols: int | None = None,
    nn: "tuple[np.ndarray, np.ndarray] | None" = None,
):
    """Shared selection core.

    Returns (u_lin, v_lin, sims, mutual_mask) arrays. With ``p`` None, only
    mutual pairs are returned; otherwise the list is padded to ``p`` pairs by
    cyclical-distance ranking (or truncated to the top-p mutual ones).

    ``cyc_dist`` overrides the cycle-gap metric for each candidate non-mutual
    u (already computed, e.g. from back-projected 3D points); by default the
    gap is Euclidean distance in patch coordinates, which needs ``grid_cols``.
    ``nn`` short-circuits the argmax passes when the caller already has them.
    """
    n_ref = sim.shape[0]
    row_best, col_best = nn if nn is not None else _mutual_argmax(sim, ref_ok, tgt_ok)

    u_all = np.arange(n_ref)
    has_nn = row_best >= 0
    cycle_u = np.full(n_ref, -1, dtype=np.int64)
    cycle_u[has_nn] = col_best[row_best[has_nn]]
    mutual = has_nn & (cycle_u == u_all)

    mu = u_all[mutual]
    mv = row_best[mutual]
    msim = sim[mu, mv]
    order = np.lexsort((mu, -msim))  # similarity desc, then lowest patch index
    mu, mv, msim = mu[order], mv[order], msim[order]

    if p is None:
        return mu, mv, msim, np.ones(mu.size, dtype=bool)

    if mu.size >= p:
        return mu[:p], mv[:p], msim[:p], np.ones(p, dtype=bool)

    cand = u_all[has_nn & ~mutual]
    if cand.size:
        cv = row_best[cand]
        cu2 = cycle_u[cand]
        if cyc_dist is not None:
            gap = cyc_dist[cand]
        else:
            cols = grid_cols if grid_cols is not None else _grid_shape(n_ref)[1]
            d = _to_rc(cu2, cols).astype(np.float64) - _to_rc(cand, cols)
            gap = np.hypot(d[:, 0], d[:, 1])
        csim = sim[cand, cv]
        corder = np.lexsort((cand, -csim, gap))  # gap asc, sim desc, row-major u
        take = min(p - mu.size, cand.size)
        cand, cv, csim = cand[corder[:take]], cv[corder[:take]], csim[corder[:take]]
        u_lin = np.concatenate([mu, cand])
        v_lin = np.concatenate([mv, cv])
        sims = np.concatenate([msim, csim])
        flags = np.concatenate([np.ones(mu.size, dtype=bool), np.zeros(take, dtype=bool)])
        return u_lin, v_lin, sims, flags
    return mu, mv, msim, np.ones(mu.size, dtype=bool)


def _as_matches(u_lin, v_lin, sims, mutual_flags, ref_cols: int, tgt_cols: int) -> list[PatchMatch]:
    # tolist() up front: per-element numpy scalar conversion is the bottleneck
    ur, uc = (a.tolist() for a in np.divmod(u_lin, ref_cols))
    vr, vc = (a.tolist() for a in np.divmod(v_lin, tgt_cols))
    return [
        PatchMatch(
            u=(a, b),
            v=(c, d),
            similarity=s,
            rank_source=RankSource.MUTUAL if m else RankSource.CYCLICAL,
        )
        for a, b, c, d, s, m in zip(
            ur, uc, vr, vc, np.asarray(sims).tolist(), np.asarray(mutual_flags).tolist()
        )
    ]


def mutual_nearest(
    sim: np.ndarray,
    ref_valid: np.ndarray | None = None,
    tgt_valid: np.ndarray | None = None,
) -> list[PatchMatch]:
    """Mutual nearest-neighbour pairs of a similarity matrix.

    Each patch appears at most once on either side; argmax ties resolve to the
    lowest linear patch index. Rows/columns marked invalid never match.
    """
    sim = np.asarray(sim, dtype=np.float64)
    n_ref, n_tgt = sim.shape
    ref_ok = np.ones(n_ref, dtype=bool) if ref_valid is None else ref_valid.ravel()
    tgt_ok = np.ones(n_tgt, dtype=bool) if tgt_valid is None else tgt_valid.ravel()
    u_lin, v_lin, sims, flags = _match_arrays(sim, ref_ok, tgt_ok, p=None)
    return _as_matches(u_lin, v_lin, sims, flags, _grid_shape(n_ref)[1], _grid_shape(n_tgt)[1])


def cyclical_top_p(
    ref_map: DescriptorMap,
    tgt_map: DescriptorMap,
    p: int,
    dtype=np.float64,
) -> list[PatchMatch]:
    """Exactly ``p`` matches: mutual pairs first, then cyclical-distance fill.

    A non-mutual reference patch u maps to v = NN(u) and back to u' = NN(v);
    fill candidates are ranked by the patch-space gap |u' - u| (ascending),
    then similarity (descending). Requires p <= G^2; if fewer than p reference
    patches are valid the list is shorter and callers must cope.
    """
    n = ref_map.grid_size**2
    if p > n:
        raise DimensionMismatch(f"p={p} exceeds {n} patches")
    sim = similarity_matrix(ref_map, tgt_map, dtype=dtype)
    u_lin, v_lin, sims, flags = _match_arrays(
        sim,
        ref_map.flat_valid(),
        tgt_map.flat_valid(),
        p=p,
        grid_cols=ref_map.grid_size,
    )
    if dtype != np.float64:
        sims = _exact_pair_similarity(ref_map, tgt_map, u_lin, v_lin)
    return _as_matches(u_lin, v_lin, sims, flags, ref_map.grid_size, tgt_map.grid_size)


def cyclical_top_p_3d(
    ref_map: DescriptorMap,
    tgt_map: DescriptorMap,
    p: int,
    ref_points: np.ndarray,
    dtype=np.float64,
) -> list[PatchMatch]:
    """Like :func:`cyclical_top_p` but the fill gap is measured in 3D.

    ``ref_points`` holds the back-projected world point of every reference
    patch, shape (G^2, 3); the gap for a candidate u is ||x(u') - x(u)||.
    """
    n = ref_map.grid_size**2
    if ref_points is None:
        raise MissingGeometry("3D cyclical ranking needs back-projected reference points")
    ref_points = np.asarray(ref_points, dtype=np.float64)
    if ref_points.shape != (n, 3):
        raise MissingGeometry(f"expected ({n}, 3) reference points, got {ref_points.shape}")
    if p > n:
        raise DimensionMismatch(f"p={p} exceeds {n} patches")

    sim = similarity_matrix(ref_map, tgt_map, dtype=dtype)
    ref_ok = ref_map.flat_valid()
    tgt_ok = tgt_map.flat_valid()
    nn = _mutual_argmax(sim, ref_ok, tgt_ok)
    gaps = _cycle_gaps_3d(nn, ref_points, n)
    u_lin, v_lin, sims, flags = _match_arrays(sim, ref_ok, tgt_ok, p=p, cyc_dist=gaps, nn=nn)
    if dtype != np.float64:
        sims = _exact_pair_similarity(ref_map, tgt_map, u_lin, v_lin)
    return _as_matches(u_lin, v_lin, sims, flags, ref_map.grid_size, tgt_map.grid_size)


def _cycle_gaps_3d(nn, ref_points: np.ndarray, n: int) -> np.ndarray:
    """Per-row 3D cycle gap ||x(NN(NN(u))) - x(u)||; inf where the cycle breaks."""
    row_best, col_best = nn
    cycle_u = np.where(row_best >= 0, col_best[row_best], -1)
    gaps = np.full(n, np.inf)
    ok = cycle_u >= 0
    gaps[ok] = np.linalg.norm(ref_points[cycle_u[ok]] - ref_points[np.flatnonzero(ok)], axis=1)
    return gaps


def _exact_pair_similarity(ref_map, tgt_map, u_lin, v_lin) -> np.ndarray:
    """Recompute selected pair similarities in float64 (fast-path refinement)."""
    a = ref_map.flat().astype(np.float64)[u_lin]
    b = tgt_map.flat().astype(np.float64)[v_lin]
    return np.clip(np.einsum("ij,ij->i", a, b), -1.0, 1.0)
