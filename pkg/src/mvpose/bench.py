"""Error metrics, the synthetic benchmark harness, pose oracle and the
continual-discovery episode protocol."""

from __future__ import annotations

import io
import itertools
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigInvalid, EmptyErrorList, MvposeError, TooFewCorrespondences
from .pipeline import PipelineConfig, PoseEstimator
from .so3 import geodesic_distance
from .solve import SimilarityTransform, _corr_arrays, umeyama
from .synth import (
    SyntheticSceneConfig,
    draw_cluster_tokens,
    make_token_clusters,
    random_similarity,
    synth_reference,
    synth_target,
)

ROTATION_ACC_DEG = (30.0, 15.0, 7.5)
TRANSLATION_ACC = (1.0, 0.5, 0.2)
_ORACLE_MAX = 12


def _rotation_of(x) -> np.ndarray:
    return x.rotation if hasattr(x, "rotation") else np.asarray(x)


def rotation_error_deg(est, truth) -> float:
    """Geodesic distance between the two rotations, in degrees."""
    return float(np.degrees(geodesic_distance(_rotation_of(est), _rotation_of(truth))))


def translation_error(est, truth) -> float:
    """Euclidean distance between the two translations."""
    a = est.translation if hasattr(est, "translation") else np.asarray(est)
    b = truth.translation if hasattr(truth, "translation") else np.asarray(truth)
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)))


def accuracy_at(errors, thresholds) -> dict[float, float]:
    """Percentage of errors at or below each threshold."""
    arr = np.asarray(list(errors), dtype=np.float64)
    if arr.size == 0:
        raise EmptyErrorList("no errors to aggregate")
    return {float(t): float(100.0 * (arr <= t).mean()) for t in thresholds}


@dataclass(frozen=True)
class CategoryResult:
    """One benchmark row: pose metrics for a single synthetic category."""

    name: str
    med_err_deg: float
    acc30: float
    acc15: float
    acc7_5: float
    med_trans: float
    acc1_0: float
    acc0_5: float
    acc0_2: float
    ms_total: float

    def csv_row(self) -> str:
        return ",".join(
            [self.name]
            + [
                f"{v:.4f}"
                for v in (
                    self.med_err_deg,
                    self.acc30,
                    self.acc15,
                    self.acc7_5,
                    self.med_trans,
                    self.acc1_0,
                    self.acc0_5,
                    self.acc0_2,
                    self.ms_total,
                )
            ]
        )


CSV_HEADER = "category,med_err_deg,acc30,acc15,acc7.5,med_trans,acc1.0,acc0.5,acc0.2,ms_total"


@dataclass(eq=False)
class BenchmarkReport:
    """Per-category rows plus their plain average, as in the paper-style tables."""

    categories: list[CategoryResult]
    failures: list[str] = field(default_factory=list)

    @property
    def average(self) -> CategoryResult:
        rows = self.categories
        def avg(attr):
            return float(np.mean([getattr(r, attr) for r in rows]))
        return CategoryResult(
            name="average",
            med_err_deg=avg("med_err_deg"),
            acc30=avg("acc30"),
            acc15=avg("acc15"),
            acc7_5=avg("acc7_5"),
            med_trans=avg("med_trans"),
            acc1_0=avg("acc1_0"),
            acc0_5=avg("acc0_5"),
            acc0_2=avg("acc0_2"),
            ms_total=avg("ms_total"),
        )

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write(CSV_HEADER + "\n")
        for row in self.categories:
            out.write(row.csv_row() + "\n")
        if self.categories:
            out.write(self.average.csv_row() + "\n")
        return out.getvalue()

    def format_table(self) -> str:
        cols = [
            "category",
            "med_err_deg",
            "acc@30",
            "acc@15",
            "acc@7.5",
            "med_trans",
            "acc@1.0",
            "acc@0.5",
            "acc@0.2",
            "ms",
        ]
        listed = self.categories + [self.average] if self.categories else []
        rows = [
            [
                r.name,
                f"{r.med_err_deg:.2f}",
                f"{r.acc30:.1f}",
                f"{r.acc15:.1f}",
                f"{r.acc7_5:.1f}",
                f"{r.med_trans:.3f}",
                f"{r.acc1_0:.1f}",
                f"{r.acc0_5:.1f}",
                f"{r.acc0_2:.1f}",
                f"{r.ms_total:.1f}",
            ]
            for r in listed
        ]
        widths = [max([len(c)] + [len(row[i]) for row in rows]) for i, c in enumerate(cols)]
        def fmt(cells):
            return "  ".join(c.rjust(w) for c, w in zip(cells, widths))
        lines = [fmt(cols), fmt(["-" * w for w in widths])]
        lines += [fmt(row) for row in rows]
        return "\n".join(lines)


@dataclass(frozen=True)
class BenchmarkSuite:
    """Synthetic evaluation protocol: categories x pairings with random truths."""

    num_categories: int = 10
    pairings: int = 10
    scene: SyntheticSceneConfig = field(default_factory=SyntheticSceneConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    scale_range: tuple[float, float] = (0.7, 1.4)
    translation_range: float = 1.0
    seed: int = 0

    def check(self):
        if self.num_categories < 1 or self.pairings < 1:
            raise ConfigInvalid("need at least one category and one pairing")


def _run_category(suite: BenchmarkSuite, c: int) -> CategoryResult:
    scene = replace(suite.scene, category_seed=suite.scene.category_seed + c)
    ref = synth_reference(scene)
    estimator = PoseEstimator(ref, suite.pipeline)
    rot_err, trans_err, times = [], [], []
    for p in range(suite.pairings):
        truth_rng = np.random.default_rng([suite.seed, c, p, 0xF1])
        truth = random_similarity(truth_rng, suite.scale_range, suite.translation_range)
        tgt, _ = synth_target(replace(scene, seed=suite.seed * 1000 + p, transform=truth))
        est = estimator.estimate(tgt)
        rot_err.append(rotation_error_deg(est.transform, truth))
        trans_err.append(translation_error(est.transform, truth))
        times.append(est.timings_ms["total"])
    acc_r = accuracy_at(rot_err, ROTATION_ACC_DEG)
    acc_t = accuracy_at(trans_err, TRANSLATION_ACC)
    return CategoryResult(
        name=f"cat{scene.category_seed:03d}",
        med_err_deg=float(np.median(rot_err)),
        acc30=acc_r[30.0],
        acc15=acc_r[15.0],
        acc7_5=acc_r[7.5],
        med_trans=float(np.median(trans_err)),
        acc1_0=acc_t[1.0],
        acc0_5=acc_t[0.5],
        acc0_2=acc_t[0.2],
        ms_total=float(np.median(times)),
    )


def run_benchmark(suite: BenchmarkSuite, keep_going: bool = False) -> BenchmarkReport:
    """Estimate every category's pairings and aggregate per category.

    Each category gets one reference scan (fitted once) and ``pairings``
    target instances with independently drawn ground-truth transforms.
    With ``keep_going`` a failing category is recorded in ``failures``
    instead of aborting the run.
    """
    suite.check()
    rows = []
    failures = []
    for c in range(suite.num_categories):
        try:
            rows.append(_run_category(suite, c))
        except MvposeError as exc:
            if not keep_going:
                raise
            failures.append(f"category {c}: {type(exc).__name__}: {exc}")
    return BenchmarkReport(categories=rows, failures=failures)


def brute_force_pose_oracle(correspondences, inlier_threshold: float = 0.2) -> SimilarityTransform:
    """Optimal minimal-sample similarity fit by full subset enumeration.

    Fits every 4-point subset, scores all correspondences, and returns the
    transform with the most inliers; ties fall to the lower RMS residual over
    its inliers. Limited to 12 correspondences to bound the combinatorics.
    """
    src, dst = _corr_arrays(correspondences)
    n = src.shape[0]
    if n < 4:
        raise TooFewCorrespondences(f"need at least 4 correspondences, got {n}")
    if n > _ORACLE_MAX:
        raise ConfigInvalid(f"oracle is bounded to {_ORACLE_MAX} correspondences, got {n}")
    best = None
    for subset in itertools.combinations(range(n), 4):
        idx = list(subset)
        try:
            model = umeyama(src[idx], dst[idx])
        except Exception:
            continue
        resid = model.residuals(src, dst)
        mask = resid <= inlier_threshold
        count = int(mask.sum())
        rms = float(np.sqrt(np.mean(resid[mask] ** 2))) if count else np.inf
        key = (-count, rms)
        if best is None or key < best[0]:
            best = (key, model)
    if best is None:
        raise TooFewCorrespondences("no 4-point subset produced a valid model")
    return best[1]


@dataclass(frozen=True)
class DiscoveryProtocol:
    """Token-level continual-discovery episode settings."""

    num_categories: int = 20
    episodes: int = 1000
    draws: int = 250
    tokens_per_draw: int = 10
    dim: int = 64
    max_token_angle_deg: float = 18.0
    max_centroid_cos: float = 0.3
    seed: int = 0


@dataclass(frozen=True)
class DiscoveryRates:
    theta: float
    fp_rate: float
    fn_rate: float
    fp_count: int
    fn_count: int
    eligible_fn: int
    total_draws: int


def _episode_inputs(proto: DiscoveryProtocol):
    """Per-episode draw labels and the draw-level pairwise score matrix.

    With mean scoring, the score of a draw against a stored category is the
    mean over the category's member draws of the draw-pair scores, so one
    draws x draws Gram matrix per episode covers every theta in a sweep.
    """
    world_rng = np.random.default_rng([proto.seed, 0xD1])
    centroids = make_token_clusters(
        proto.num_categories, proto.dim, world_rng, proto.max_centroid_cos
    )
    for ep in range(proto.episodes):
        rng = np.random.default_rng([proto.seed, 0xD2, ep])
        labels = rng.integers(0, proto.num_categories, size=proto.draws)
        per_token = centroids[labels].repeat(proto.tokens_per_draw, axis=0)
        flat = draw_cluster_tokens(per_token, per_token.shape[0], proto.max_token_angle_deg, rng)
        sums = flat.reshape(proto.draws, proto.tokens_per_draw, proto.dim).sum(axis=1)
        pair = (sums @ sums.T) / float(proto.tokens_per_draw**2)
        yield labels, pair


def _replay_episode(labels: np.ndarray, pair: np.ndarray, theta: float, num_categories: int):
    """Run one episode's assignment bookkeeping at a fixed theta."""
    draws = labels.shape[0]
    score_rows = np.zeros((draws, draws))  # running sum of pair scores per stored set
    counts = np.zeros(draws, dtype=np.int64)
    majority = np.zeros((draws, num_categories), dtype=np.int64)
    n_sets = 0
    fp = fn = 0
    eligible = 0
    for d in range(draws):
        true_label = int(labels[d])
        known_majorities = majority[:n_sets].argmax(axis=1) if n_sets else np.empty(0, np.int64)
        represented = bool(np.any(known_majorities == true_label)) if n_sets else False
        if represented:
            eligible += 1
        if n_sets:
            scores = score_rows[:n_sets, d] / counts[:n_sets]
            best = int(scores.argmax())
            best_score = float(scores[best])
        else:
            best_score = -np.inf
        if n_sets and best_score > theta:
            if int(known_majorities[best]) != true_label:
                fp += 1
            majority[best, true_label] += 1
            counts[best] += 1
            score_rows[best] += pair[d]
        else:
            if represented:
                fn += 1
            majority[n_sets, true_label] += 1
            counts[n_sets] = 1
            score_rows[n_sets] = pair[d]
            n_sets += 1
    return fp, fn, eligible


def run_discovery_episodes(
    proto: DiscoveryProtocol | None = None,
    thetas=(0.55,),
) -> list[DiscoveryRates]:
    """FP/FN rates of the episode protocol at each decision threshold.

    A draw is a false positive when it gets assigned to a stored set whose
    majority true category differs; a false negative when it is declared
    novel although its category is already the majority of some stored set.
    The FN rate is over the draws that could have been recognized.
    """
    proto = proto or DiscoveryProtocol()
    thetas = [float(t) for t in thetas]
    fp = {t: 0 for t in thetas}
    fn = {t: 0 for t in thetas}
    eligible = {t: 0 for t in thetas}
    total = proto.episodes * proto.draws
    for labels, pair in _episode_inputs(proto):
        for t in thetas:
            f, m, e = _replay_episode(labels, pair, t, proto.num_categories)
            fp[t] += f
            fn[t] += m
            eligible[t] += e
    return [
        DiscoveryRates(
            theta=t,
            fp_rate=fp[t] / total,
            fn_rate=(fn[t] / eligible[t]) if eligible[t] else 0.0,
            fp_count=fp[t],
            fn_count=fn[t],
            eligible_fn=eligible[t],
            total_draws=total,
        )
        for t in thetas
    ]


def threshold_sweep(
    proto: DiscoveryProtocol | None = None,
    thetas=None,
) -> tuple[list[DiscoveryRates], DiscoveryRates | None]:
    """Sweep thresholds; pick the zero-FP point with the lowest FN rate."""
    if thetas is None:
        thetas = [round(0.05 * i, 2) for i in range(-2, 20)]
    rates = run_discovery_episodes(proto, thetas)
    zero_fp = [r for r in rates if r.fp_count == 0]
    best = min(zero_fp, key=lambda r: (r.fn_rate, r.theta)) if zero_fp else None
    return rates, best


def time_matching_core(ref_bundle, tgt_bundle, config: PipelineConfig, repeats: int = 11) -> dict:
    """Median wall time of the match + consensus + solve chain, in ms."""
    from . import geometry, views as views_mod
    from .descriptors import project
    from .solve import ransac

    estimator = PoseEstimator(ref_bundle, config)
    tgt_maps = [
        project(m, estimator.basis, renormalize=config.renormalize)
        for m in tgt_bundle.descriptor_maps()
    ]
    dtype = np.float32 if config.matching_dtype == "float32" else np.float64
    samples = {"match": [], "consensus": [], "solve": []}
    for _ in range(repeats):
        t0 = time.perf_counter()
        scores, pairs = views_mod.build_view_matrix(
            ref_bundle,
            tgt_bundle,
            p=config.patches,
            cyclical=config.cyclical,
            ref_points=estimator.ref_points,
            dtype=dtype,
            ref_maps=estimator.ref_maps,
            tgt_maps=tgt_maps,
        )
        t1 = time.perf_counter()
        best = views_mod.best_reference_per_target(scores)
        best_pairs = [pairs[int(best[j])][j] for j in range(tgt_bundle.num_views)]
        kept = views_mod.consensus_filter(
            best_pairs,
            theta_deg=config.consensus_theta_deg,
            num_samples=config.consensus_samples,
            seed=config.seed,
        )
        t2 = time.perf_counter()
        corrs = geometry.correspondences_to_3d(
            kept or best_pairs,
            ref_bundle,
            tgt_bundle,
            depth_lookup=config.depth_lookup,
            completed_ref=estimator.completed_ref,
        )
        t3 = time.perf_counter()
        ransac(
            corrs,
            trials=config.ransac_trials,
            inlier_threshold=config.inlier_threshold,
            model=config.model,
            seed=config.seed,
        )
        t4 = time.perf_counter()
        samples["match"].append((t1 - t0) * 1000.0)
        samples["consensus"].append((t2 - t1) * 1000.0)
        samples["solve"].append((t4 - t3) * 1000.0)
    medians = {k: float(np.median(v)) for k, v in samples.items()}
    medians["core_total"] = medians["match"] + medians["consensus"] + medians["solve"]
    return medians
