"""Continual category memory: summary-token sets, scoring and persistence.

A category is remembered as the set of global summary tokens of every
observation assigned to it. Similarity between token sets is the mean
pairwise cosine, which by linearity is just the dot product of the two token
means, so scoring stays O(D) per category no matter how many observations
have accumulated.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .capture import CaptureBundle, load_bundle, save_bundle
from .descriptors import ProjectionBasis, fit_projection
from .errors import (
    ConfigInvalid,
    DuplicateCategoryId,
    EmptyTokenSet,
    IoFailure,
    MissingFile,
    UnknownCategory,
)

MEMORY_MANIFEST = "memory.json"
MEMORY_VERSION = 1
DEFAULT_THETA = 0.55
DEFAULT_BASIS_K = 32


@dataclass(eq=False)
class CategoryRecord:
    """One remembered category: its tokens plus the enrolled reference scan."""

    category_id: str
    tokens: np.ndarray
    bundle: CaptureBundle | None = None
    bundle_path: str | None = None
    basis: ProjectionBasis | None = None

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64).reshape(-1, self.tokens.shape[-1])
        if self.tokens.shape[0] == 0:
            raise EmptyTokenSet(f"category {self.category_id} has no tokens")

    @property
    def token_sum(self) -> np.ndarray:
        return self.tokens.sum(axis=0)

    def add_tokens(self, tokens: np.ndarray) -> None:
        tokens = np.asarray(tokens, dtype=np.float64).reshape(-1, self.tokens.shape[1])
        self.tokens = np.concatenate([self.tokens, tokens])


@dataclass(eq=False)
class MemoryStore:
    """Ordered collection of category records with the decision threshold."""

    theta: float = DEFAULT_THETA
    scoring: str = "mean"
    records: list[CategoryRecord] = field(default_factory=list)
    root: Path | None = None

    def __post_init__(self):
        if not (-1.0 < self.theta < 1.0):
            raise ConfigInvalid(f"theta must lie in (-1, 1), got {self.theta}")
        if self.scoring not in ("mean", "sum"):
            raise ConfigInvalid(f"scoring must be 'mean' or 'sum', got {self.scoring!r}")

    def find(self, category_id: str) -> CategoryRecord:
        for rec in self.records:
            if rec.category_id == category_id:
                return rec
        raise UnknownCategory(f"no category {category_id!r}")

    def has(self, category_id: str) -> bool:
        return any(r.category_id == category_id for r in self.records)


@dataclass(frozen=True)
class ClassificationOutcome:
    """Classifier verdict: matched category (or None for novel) plus scores."""

    category_id: str | None
    best_score: float
    scores: dict[str, float]

    @property
    def is_novel(self) -> bool:
        return self.category_id is None


def category_similarity(stored: np.ndarray, query: np.ndarray, scoring: str = "mean") -> float:
    """Mean (or summed) pairwise cosine between two unit-token sets."""
    stored = np.asarray(stored, dtype=np.float64).reshape(-1, stored.shape[-1])
    query = np.asarray(query, dtype=np.float64).reshape(-1, query.shape[-1])
    if stored.shape[0] == 0 or query.shape[0] == 0:
        raise EmptyTokenSet("similarity needs non-empty token sets on both sides")
    total = float(stored.sum(axis=0) @ query.sum(axis=0))
    if scoring == "sum":
        return total
    return total / (stored.shape[0] * query.shape[0])


def classify(query_tokens: np.ndarray, memory: MemoryStore, theta: float | None = None) -> ClassificationOutcome:
    """Match query tokens against the memory; below-threshold means novel.

    The best score must strictly exceed theta to count as a known category.
    Ties on the score keep the earliest enrolled category. An empty memory
    always reports novel with a -inf best score.
    """
    theta = memory.theta if theta is None else theta
    query = np.asarray(query_tokens, dtype=np.float64).reshape(-1, query_tokens.shape[-1])
    if query.shape[0] == 0:
        raise EmptyTokenSet("cannot classify an empty token set")
    if not memory.records:
        return ClassificationOutcome(category_id=None, best_score=-np.inf, scores={})
    qsum = query.sum(axis=0)
    scores = {}
    best_id = None
    best = -np.inf
    for rec in memory.records:
        s = float(rec.token_sum @ qsum)
        if memory.scoring == "mean":
            s /= rec.tokens.shape[0] * query.shape[0]
        scores[rec.category_id] = s
        if s > best:
            best, best_id = s, rec.category_id
    if best > theta:
        return ClassificationOutcome(category_id=best_id, best_score=best, scores=scores)
    return ClassificationOutcome(category_id=None, best_score=best, scores=scores)


def enroll(
    query_tokens: np.ndarray,
    bundle: CaptureBundle | None,
    memory: MemoryStore,
    category_id: str | None = None,
    basis_k: int = DEFAULT_BASIS_K,
) -> CategoryRecord:
    """Add a new category from its first observation.

    Fits the descriptor projection basis for the category from the enrolled
    bundle (when given) so later pose queries reuse it. The record is
    appended, keeping enrollment order for tie-breaks.
    """
    if category_id is None:
        base = len(memory.records)
        while memory.has(f"cat_{base:04d}"):
            base += 1
        category_id = f"cat_{base:04d}"
    elif memory.has(category_id):
        raise DuplicateCategoryId(f"category {category_id!r} already enrolled")
    basis = None
    if bundle is not None:
        k = min(basis_k, bundle.descriptor_dim)
        basis = fit_projection(bundle.descriptor_maps(), k=k)
    rec = CategoryRecord(
        category_id=category_id,
        tokens=np.asarray(query_tokens, dtype=np.float64),
        bundle=bundle,
        basis=basis,
    )
    memory.records.append(rec)
    return rec


def assign_observation(category_id: str, query_tokens: np.ndarray, memory: MemoryStore) -> CategoryRecord:
    """Append an observation's tokens to an existing category."""
    rec = memory.find(category_id)
    rec.add_tokens(np.asarray(query_tokens, dtype=np.float64))
    return rec


def save_memory(memory: MemoryStore, root) -> None:
    """Persist the store under ``root``: manifest, token blobs, bundles, bases."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    cats = []
    for rec in memory.records:
        cat_dir = root / rec.category_id
        cat_dir.mkdir(exist_ok=True)
        token_file = f"{rec.category_id}/tokens.f64"
        tokens = np.ascontiguousarray(rec.tokens.astype("<f8"))
        try:
            (root / token_file).write_bytes(tokens.tobytes())
        except OSError as exc:
            raise IoFailure(f"cannot write {token_file}: {exc}") from exc
        bundle_path = rec.bundle_path
        if rec.bundle is not None:
            bundle_path = f"{rec.category_id}/bundle"
            save_bundle(rec.bundle, root / bundle_path)
        basis_file = None
        if rec.basis is not None:
            basis_file = f"{rec.category_id}/basis.f32"
            blob = rec.basis.to_blob()
            (root / basis_file).write_bytes(np.ascontiguousarray(blob).tobytes())
        cats.append(
            {
                "id": rec.category_id,
                "token_file": token_file,
                "token_count": int(rec.tokens.shape[0]),
                "token_dim": int(rec.tokens.shape[1]),
                "bundle_path": bundle_path,
                "basis_file": basis_file,
                "basis_k": None if rec.basis is None else rec.basis.k,
                "basis_dim": None if rec.basis is None else rec.basis.input_dim,
            }
        )
    manifest = {
        "version": MEMORY_VERSION,
        "theta": memory.theta,
        "scoring": memory.scoring,
        "categories": cats,
    }
    (root / MEMORY_MANIFEST).write_text(json.dumps(manifest, indent=2))


def load_memory(root, load_bundles: bool = False) -> MemoryStore:
    """Load a persisted store; bundles stay on disk unless asked for."""
    root = Path(root)
    manifest_path = root / MEMORY_MANIFEST
    if not manifest_path.exists():
        raise MissingFile(f"no {MEMORY_MANIFEST} in {root}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise IoFailure(f"unreadable memory manifest: {exc}") from exc
    store = MemoryStore(
        theta=float(manifest["theta"]),
        scoring=manifest.get("scoring", "mean"),
        root=root,
    )
    for cat in manifest["categories"]:
        token_path = root / cat["token_file"]
        if not token_path.exists():
            raise MissingFile(f"missing token blob {cat['token_file']}")
        raw = np.frombuffer(token_path.read_bytes(), dtype="<f8")
        tokens = raw.reshape(cat["token_count"], cat["token_dim"]).copy()
        basis = None
        if cat.get("basis_file"):
            blob = np.frombuffer((root / cat["basis_file"]).read_bytes(), dtype="<f4")
            basis = ProjectionBasis.from_blob(blob, k=cat["basis_k"], input_dim=cat["basis_dim"])
        bundle = None
        if load_bundles and cat.get("bundle_path"):
            bundle = load_bundle(root / cat["bundle_path"])
        store.records.append(
            CategoryRecord(
                category_id=cat["id"],
                tokens=tokens,
                bundle=bundle,
                bundle_path=cat.get("bundle_path"),
                basis=basis,
            )
        )
    return store


def resolve_bundle(rec: CategoryRecord, store: MemoryStore) -> CaptureBundle:
    """Give back the category's reference bundle, loading it lazily if needed."""
    if rec.bundle is not None:
        return rec.bundle
    if rec.bundle_path and store.root is not None:
        rec.bundle = load_bundle(store.root / rec.bundle_path)
        return rec.bundle
    raise MissingFile(f"category {rec.category_id} has no reference bundle attached")
