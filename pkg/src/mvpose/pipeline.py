"""End-to-end pose estimation and the continual discovery step.

The estimation chain is: project target descriptors into the reference-fitted
basis, score all view pairings, keep the best reference per target view,
filter those by rotation consensus, lift the surviving matches to 3D and
solve robustly. Reference-side work (basis fit, projection, depth completion,
patch back-projection) happens once per reference bundle and is cached.
"""

from __future__ import annotations

import logging
import time
import weakref
from dataclasses import asdict, dataclass, field

import numpy as np

from . import geometry, memory as memory_mod, views
from .capture import CaptureBundle
from .descriptors import fit_projection, project
from .errors import ConfigInvalid
from .solve import AffineTransform, SimilarityTransform, ransac

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineConfig:
    """Every knob of the estimation chain, JSON-friendly."""

    k_dims: int = 32
    patches: int = 50
    consensus_theta_deg: float = 30.0
    consensus_samples: int = views.DEFAULT_CONSENSUS_SAMPLES
    ransac_trials: int = 1000
    inlier_threshold: float = 0.2
    model: str = "similarity7"
    cyclical: str = "2d"
    center: bool = True
    renormalize: bool = True
    matching_dtype: str = "float32"
    depth_lookup: str = "median"
    global_topk: bool = False
    classify_theta: float = memory_mod.DEFAULT_THETA
    scoring: str = "mean"
    seed: int = 0

    def validate(self) -> None:
        if self.k_dims < 1:
            raise ConfigInvalid(f"k_dims must be positive, got {self.k_dims}")
        if self.patches < 1:
            raise ConfigInvalid(f"patches must be positive, got {self.patches}")
        if self.consensus_theta_deg <= 0:
            raise ConfigInvalid(f"consensus theta must be positive, got {self.consensus_theta_deg}")
        if self.ransac_trials < 1:
            raise ConfigInvalid(f"ransac trials must be positive, got {self.ransac_trials}")
        if self.inlier_threshold <= 0:
            raise ConfigInvalid(f"inlier threshold must be positive, got {self.inlier_threshold}")
        if self.model not in ("similarity7", "affine9"):
            raise ConfigInvalid(f"unknown model {self.model!r}")
        if self.cyclical not in ("2d", "3d"):
            raise ConfigInvalid(f"unknown cyclical mode {self.cyclical!r}")
        if self.matching_dtype not in ("float32", "float64"):
            raise ConfigInvalid(f"matching dtype must be float32 or float64, got {self.matching_dtype!r}")
        if self.depth_lookup not in ("median", "center"):
            raise ConfigInvalid(f"unknown depth lookup {self.depth_lookup!r}")
        if not (-1.0 < self.classify_theta < 1.0):
            raise ConfigInvalid(f"classify theta must lie in (-1, 1), got {self.classify_theta}")
        if self.scoring not in ("mean", "sum"):
            raise ConfigInvalid(f"unknown scoring {self.scoring!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(data: dict) -> "PipelineConfig":
        known = {f for f in PipelineConfig.__dataclass_fields__}
        bad = set(data) - known
        if bad:
            raise ConfigInvalid(f"unknown config keys {sorted(bad)}")
        cfg = PipelineConfig(**data)
        cfg.validate()
        return cfg

    def prep_key(self) -> tuple:
        # fields that change the cached reference-side preparation
        return (self.k_dims, self.center, self.renormalize, self.cyclical, self.depth_lookup)


@dataclass(eq=False)
class PoseEstimate:
    """Estimation outcome with provenance: timings, counts and the config."""

    transform: SimilarityTransform | AffineTransform
    inlier_count: int
    correspondence_count: int
    trials_run: int
    best_reference: list[int]
    consensus_pairs: list[tuple[int, int]]
    timings_ms: dict[str, float]
    config: dict
    warnings: list[str] = field(default_factory=list)

    @property
    def rotation(self) -> np.ndarray:
        return self.transform.rotation

    def to_dict(self) -> dict:
        return {
            "transform": self.transform.to_dict(),
            "inlier_count": self.inlier_count,
            "correspondence_count": self.correspondence_count,
            "trials_run": self.trials_run,
            "best_reference": list(self.best_reference),
            "consensus_pairs": [list(p) for p in self.consensus_pairs],
            "timings_ms": self.timings_ms,
            "config": self.config,
            "warnings": list(self.warnings),
        }


class PoseEstimator:
    """Reference-side state fitted once, reused across target estimates."""

    def __init__(self, ref_bundle: CaptureBundle, config: PipelineConfig | None = None):
        self.config = config or PipelineConfig()
        self.config.validate()
        self.ref_bundle = ref_bundle
        k = min(self.config.k_dims, ref_bundle.descriptor_dim)
        self.basis = fit_projection(ref_bundle.descriptor_maps(), k=k, center=self.config.center)
        self.ref_maps = [
            project(m, self.basis, renormalize=self.config.renormalize)
            for m in ref_bundle.descriptor_maps()
        ]
        self.completed_ref: dict[int, object] = {}
        self.ref_points: list[np.ndarray] | None = None
        if self.config.cyclical == "3d":
            self.ref_points = []
            for i, view in enumerate(ref_bundle.views):
                self.completed_ref[i] = geometry.complete_depth(view.depth)
                self.ref_points.append(
                    geometry.patch_centers_3d(
                        view, self.completed_ref[i], self.config.depth_lookup
                    )
                )

    def estimate(
        self,
        tgt_bundle: CaptureBundle,
        config: PipelineConfig | None = None,
        debug_sink: dict | None = None,
    ) -> PoseEstimate:
        """Estimate the target's pose; ``debug_sink`` collects intermediates.

        When a dict is passed as ``debug_sink`` it gains the view score
        matrix, the kept pairs, the lifted correspondences and the raw
        robust-fit result, for diagnostic dumps.
        """
        cfg = config or self.config
        if config is not None and config.prep_key() != self.config.prep_key():
            raise ConfigInvalid("estimate() override must match the fitted preparation settings")
        warnings_out: list[str] = []
        timings: dict[str, float] = {}
        t_start = time.perf_counter()
        dtype = np.float32 if cfg.matching_dtype == "float32" else np.float64

        t0 = time.perf_counter()
        tgt_maps = [
            project(m, self.basis, renormalize=cfg.renormalize)
            for m in tgt_bundle.descriptor_maps()
        ]
        timings["project"] = (time.perf_counter() - t0) * 1000.0

        t0 = time.perf_counter()
        scores, pairs = views.build_view_matrix(
            self.ref_bundle,
            tgt_bundle,
            p=cfg.patches,
            cyclical=cfg.cyclical,
            ref_points=self.ref_points,
            dtype=dtype,
            ref_maps=self.ref_maps,
            tgt_maps=tgt_maps,
        )
        timings["match"] = (time.perf_counter() - t0) * 1000.0

        t0 = time.perf_counter()
        if cfg.global_topk:
            kept = self._global_pairs(pairs, cfg)
            best = views.best_reference_per_target(scores)
        else:
            best = views.best_reference_per_target(scores)
            best_pairs = [pairs[int(best[j])][j] for j in range(tgt_bundle.num_views)]
            kept = views.consensus_filter(
                best_pairs,
                theta_deg=cfg.consensus_theta_deg,
                num_samples=cfg.consensus_samples,
                seed=cfg.seed,
            )
            if not kept:
                warnings_out.append("consensus kept no pairs; falling back to all best pairs")
                log.warning("consensus kept no pairs; falling back to all best pairs")
                kept = best_pairs
        timings["consensus"] = (time.perf_counter() - t0) * 1000.0

        t0 = time.perf_counter()
        completed_tgt: dict[int, object] = {}
        corrs = geometry.correspondences_to_3d(
            kept,
            self.ref_bundle,
            tgt_bundle,
            depth_lookup=cfg.depth_lookup,
            completed_ref=self.completed_ref,
            completed_tgt=completed_tgt,
        )
        timings["lift"] = (time.perf_counter() - t0) * 1000.0

        t0 = time.perf_counter()
        result = ransac(
            corrs,
            trials=cfg.ransac_trials,
            inlier_threshold=cfg.inlier_threshold,
            model=cfg.model,
            seed=cfg.seed,
        )
        timings["solve"] = (time.perf_counter() - t0) * 1000.0
        timings["total"] = (time.perf_counter() - t_start) * 1000.0

        if debug_sink is not None:
            debug_sink["scores"] = scores
            debug_sink["kept"] = kept
            debug_sink["correspondences"] = corrs
            debug_sink["result"] = result

        return PoseEstimate(
            transform=result.transform,
            inlier_count=result.inlier_count,
            correspondence_count=len(corrs),
            trials_run=result.trials_run,
            best_reference=[int(b) for b in best],
            consensus_pairs=[(p.ref_index, p.tgt_index) for p in kept],
            timings_ms=timings,
            config=cfg.to_dict(),
            warnings=warnings_out,
        )

    def _global_pairs(self, pairs, cfg: PipelineConfig):
        """Ablation route: pool the globally best matches across all pairings."""
        flat = []
        for row in pairs:
            for p in row:
                for m in p.matches:
                    flat.append((-m.similarity, p.ref_index, p.tgt_index, m.u, m))
        flat.sort(key=lambda t: t[:4])
        budget = cfg.patches * len(pairs[0])
        regrouped: dict[tuple[int, int], list] = {}
        for _, ri, ti, _, m in flat[:budget]:
            regrouped.setdefault((ri, ti), []).append(m)
        out = []
        for row in pairs:
            for p in row:
                sel = regrouped.get((p.ref_index, p.tgt_index))
                if sel:
                    out.append(
                        views.ViewPairScore(
                            ref_index=p.ref_index,
                            tgt_index=p.tgt_index,
                            matches=sel,
                            score=float(sum(m.similarity for m in sel)),
                            implied_rotation=p.implied_rotation,
                        )
                    )
        return out


_prepared: "weakref.WeakKeyDictionary[CaptureBundle, dict]" = weakref.WeakKeyDictionary()


def estimator_for(ref_bundle: CaptureBundle, config: PipelineConfig | None = None) -> PoseEstimator:
    """Cached estimator per (reference bundle, preparation settings)."""
    cfg = config or PipelineConfig()
    per_bundle = _prepared.setdefault(ref_bundle, {})
    key = cfg.prep_key()
    if key not in per_bundle:
        per_bundle[key] = PoseEstimator(ref_bundle, cfg)
    est = per_bundle[key]
    est.config = cfg
    return est


def estimate_pose(
    ref_bundle: CaptureBundle,
    tgt_bundle: CaptureBundle,
    config: PipelineConfig | None = None,
) -> PoseEstimate:
    """One-shot pose of the target scan against the reference scan.

    Deterministic: the same bundles, config and seed give the same estimate.
    """
    return estimator_for(ref_bundle, config).estimate(tgt_bundle, config)


@dataclass(eq=False)
class ContinualOutcome:
    """Result of one continual step: verdict plus pose or enrollment."""

    classification: memory_mod.ClassificationOutcome
    pose: PoseEstimate | None
    enrolled_id: str | None

    def to_dict(self) -> dict:
        return {
            "category_id": self.classification.category_id,
            "is_novel": self.classification.is_novel,
            "best_score": self.classification.best_score
            if np.isfinite(self.classification.best_score)
            else None,
            "scores": self.classification.scores,
            "pose": None if self.pose is None else self.pose.to_dict(),
            "enrolled_id": self.enrolled_id,
        }


def continual_step(
    tgt_bundle: CaptureBundle,
    store: memory_mod.MemoryStore,
    config: PipelineConfig | None = None,
) -> ContinualOutcome:
    """Classify a scan against memory; estimate pose if known, enroll if novel."""
    cfg = config or PipelineConfig()
    cfg.validate()
    tokens = tgt_bundle.cls_tokens()
    outcome = memory_mod.classify(tokens, store, theta=cfg.classify_theta)
    if outcome.is_novel:
        rec = memory_mod.enroll(tokens, tgt_bundle, store, basis_k=cfg.k_dims)
        return ContinualOutcome(classification=outcome, pose=None, enrolled_id=rec.category_id)
    rec = store.find(outcome.category_id)
    ref = memory_mod.resolve_bundle(rec, store)
    pose = estimate_pose(ref, tgt_bundle, cfg)
    memory_mod.assign_observation(rec.category_id, tokens, store)
    return ContinualOutcome(classification=outcome, pose=pose, enrolled_id=None)
