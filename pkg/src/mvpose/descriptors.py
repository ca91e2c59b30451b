"""Descriptor post-processing: reference-fitted PCA projection."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .capture import DescriptorMap
from .errors import DimensionMismatch, InsufficientSamples, RankDeficientWarning

_NEGLIGIBLE_REL = 1e-12


@dataclass(eq=False)
class ProjectionBasis:
    """Top-k principal directions of the reference patch descriptors.

    ``components`` rows are orthonormal and ordered by descending explained
    variance. ``mean`` is the reference descriptor mean (zeros when fitting
    was uncentred).
    """

    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray

    @property
    def k(self) -> int:
        return self.components.shape[0]

    @property
    def input_dim(self) -> int:
        return self.components.shape[1]

    def to_blob(self) -> np.ndarray:
        """Flatten to a single float32 payload: mean, components, variances."""
        parts = [
            self.mean.astype("<f4").ravel(),
            self.components.astype("<f4").ravel(),
            self.explained_variance.astype("<f4").ravel(),
        ]
        return np.concatenate(parts)

    @staticmethod
    def from_blob(blob: np.ndarray, k: int, input_dim: int) -> "ProjectionBasis":
        blob = np.asarray(blob, dtype=np.float64).ravel()
        expected = input_dim + k * input_dim + k
        if blob.size != expected:
            raise DimensionMismatch(
                f"basis blob has {blob.size} floats, expected {expected} for k={k}, D={input_dim}"
            )
        mean = blob[:input_dim]
        comps = blob[input_dim : input_dim + k * input_dim].reshape(k, input_dim)
        ev = blob[input_dim + k * input_dim :]
        return ProjectionBasis(mean=mean, components=comps, explained_variance=ev)


def _fix_signs(components: np.ndarray) -> np.ndarray:
    # deterministic SVD sign convention: largest-|entry| of each row positive
    idx = np.abs(components).argmax(axis=1)
    signs = np.sign(components[np.arange(components.shape[0]), idx])
    signs[signs == 0] = 1.0
    return components * signs[:, None]


def fit_projection(
    reference_maps: list[DescriptorMap],
    k: int,
    center: bool = True,
) -> ProjectionBasis:
    """Fit the top-k principal directions over all reference patches.

    Target maps must be projected with this basis, never refitted. When the
    data has fewer than ``k`` non-negligible directions, k is reduced and a
    ``RankDeficientWarning`` is emitted.
    """
    if not reference_maps:
        raise InsufficientSamples("no reference maps given")
    dim = reference_maps[0].dim
    for m in reference_maps:
        if m.dim != dim:
            raise DimensionMismatch(f"mixed descriptor dims {m.dim} and {dim}")
    if k > dim:
        raise DimensionMismatch(f"k={k} exceeds descriptor dim {dim}")
    if k < 1:
        raise InsufficientSamples(f"k must be positive, got {k}")

    x = np.concatenate([m.flat() for m in reference_maps]).astype(np.float64)
    n = x.shape[0]
    if n < k:
        raise InsufficientSamples(f"{n} patches cannot support k={k}")

    mean = x.mean(axis=0) if center else np.zeros(dim)
    xc = x - mean

    if n > dim:
        # D x D eigenproblem is cheaper than an n x D SVD for big n
        cov = (xc.T @ xc) / n
        eigvals, eigvecs = np.linalg.eigh(cov)
        order = np.argsort(eigvals)[::-1]
        variances = np.clip(eigvals[order], 0.0, None)
        components = eigvecs[:, order].T
    else:
        _, svals, vt = np.linalg.svd(xc, full_matrices=False)
        variances = (svals**2) / n
        components = vt

    usable = int((variances > variances[0] * _NEGLIGIBLE_REL).sum()) if variances[0] > 0 else 0
    if usable < k:
        warnings.warn(
            f"only {usable} non-negligible principal directions, reducing k from {k}",
            RankDeficientWarning,
        )
        k = max(usable, 1)

    return ProjectionBasis(
        mean=mean,
        components=_fix_signs(components[:k]),
        explained_variance=variances[:k],
    )


def project(
    dmap: DescriptorMap,
    basis: ProjectionBasis,
    renormalize: bool = True,
) -> DescriptorMap:
    """Centre, project to the basis, and (by default) re-normalize patches.

    Patches that project to a zero vector are flagged invalid and excluded
    from matching downstream.
    """
    if dmap.dim != basis.input_dim:
        raise DimensionMismatch(f"map dim {dmap.dim} != basis dim {basis.input_dim}")
    g = dmap.grid_size
    flat = dmap.flat().astype(np.float64) - basis.mean
    proj = flat @ basis.components.T

    norms = np.linalg.norm(proj, axis=1)
    nonzero = norms > 1e-12
    valid = dmap.flat_valid() & nonzero
    if renormalize:
        proj = np.where(nonzero[:, None], proj / np.where(nonzero, norms, 1.0)[:, None], 0.0)
    data = proj.reshape(g, g, basis.k).astype(np.float32)
    return DescriptorMap(data, valid=valid.reshape(g, g))


def project_bundle_maps(
    maps: list[DescriptorMap],
    basis: ProjectionBasis,
    renormalize: bool = True,
) -> list[DescriptorMap]:
    return [project(m, basis, renormalize=renormalize) for m in maps]
