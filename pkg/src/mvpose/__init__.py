"""Multi-view one-shot category-level 6D pose estimation.

Submodules import lazily so the CLI can pin BLAS thread-pool environment
variables before numpy loads.
"""

from __future__ import annotations

import importlib

__version__ = "0.1.0"

_EXPORTS = {
    # capture
    "CameraIntrinsics": "capture",
    "CameraPose": "capture",
    "DescriptorMap": "capture",
    "SaliencyMap": "capture",
    "DepthMap": "capture",
    "ViewRecord": "capture",
    "CaptureBundle": "capture",
    "ValidationReport": "capture",
    "validate_bundle": "capture",
    "inspect_bundle": "capture",
    "save_bundle": "capture",
    "load_bundle": "capture",
    "l2_normalize": "capture",
    # descriptors
    "ProjectionBasis": "descriptors",
    "fit_projection": "descriptors",
    "project": "descriptors",
    # matching
    "PatchMatch": "matching",
    "RankSource": "matching",
    "similarity_matrix": "matching",
    "mutual_nearest": "matching",
    "cyclical_top_p": "matching",
    "cyclical_top_p_3d": "matching",
    # views
    "ViewPairScore": "views",
    "build_view_matrix": "views",
    "best_reference_per_target": "views",
    "consensus_filter": "views",
    "retrieval_estimate": "views",
    # solve
    "Correspondence3D": "solve",
    "SimilarityTransform": "solve",
    "AffineTransform": "solve",
    "RansacResult": "solve",
    "umeyama": "solve",
    "affine9": "solve",
    "ransac": "solve",
    "rms_residual": "solve",
    # geometry
    "complete_depth": "geometry",
    "backproject": "geometry",
    "project_point": "geometry",
    "patch_to_pixel": "geometry",
    "detect_object_crop": "geometry",
    "PointCloud": "geometry",
    "knn_outlier_removal": "geometry",
    "OrientedBox": "geometry",
    "fit_obb": "geometry",
    "patch_centers_3d": "geometry",
    "correspondences_to_3d": "geometry",
    "export_ply": "geometry",
    # memory
    "MemoryStore": "memory",
    "CategoryRecord": "memory",
    "ClassificationOutcome": "memory",
    "category_similarity": "memory",
    "classify": "memory",
    "enroll": "memory",
    "assign_observation": "memory",
    "save_memory": "memory",
    "load_memory": "memory",
    # pipeline
    "PipelineConfig": "pipeline",
    "PoseEstimate": "pipeline",
    "PoseEstimator": "pipeline",
    "estimate_pose": "pipeline",
    "estimator_for": "pipeline",
    "ContinualOutcome": "pipeline",
    "continual_step": "pipeline",
    # synth
    "SyntheticSceneConfig": "synth",
    "synth_reference": "synth",
    "synth_target": "synth",
    "synth_scene": "synth",
    "random_similarity": "synth",
    "make_token_clusters": "synth",
    "draw_cluster_tokens": "synth",
    # bench
    "BenchmarkSuite": "bench",
    "BenchmarkReport": "bench",
    "run_benchmark": "bench",
    "brute_force_pose_oracle": "bench",
    "rotation_error_deg": "bench",
    "translation_error": "bench",
    "accuracy_at": "bench",
    "DiscoveryProtocol": "bench",
    "run_discovery_episodes": "bench",
    "threshold_sweep": "bench",
    "time_matching_core": "bench",
    # so3
    "is_rotation": "so3",
    "geodesic_distance": "so3",
    "random_rotations": "so3",
    "chordal_mean": "so3",
    "axis_angle": "so3",
    "project_to_so3": "so3",
}

__all__ = sorted(_EXPORTS) + ["__version__"]


def __getattr__(name: str):
    if name in _EXPORTS:
        module = importlib.import_module(f".{_EXPORTS[name]}", __name__)
        value = getattr(module, name)
        globals()[name] = value
        return value
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return __all__
