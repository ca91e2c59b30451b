"""View/bundle domain types and the on-disk bundle directory format.

A bundle directory holds ``manifest.json`` plus, per view i, four raw
little-endian blobs: ``desc_i.f32``, ``sal_i.f32``, ``depth_i.f32`` and
``depthmask_i.u8``. The manifest records object identity, grid geometry,
per-view intrinsics, 4x4 camera-to-world poses, crop rectangles, CLS
vectors and the blob filenames/shapes/dtypes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvariantViolation, IoFailure, MissingFile, ShapeMismatch
from .so3 import is_rotation

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1

# Vectors whose norm is already within this of 1 are left untouched, which
# keeps save->load bit-exact on normalized payloads.
NORM_SKIP_TOL = 1e-6
ZERO_NORM_TOL = 1e-12


def l2_normalize(array: np.ndarray, skip_tol: float = NORM_SKIP_TOL) -> np.ndarray:
    """Normalize along the last axis; rows already unit-norm pass through.

    Zero rows are left as zeros; callers decide whether that is an error.
    """
    arr = np.asarray(array)
    norms = np.linalg.norm(arr.astype(np.float64), axis=-1)
    needs = np.abs(norms - 1.0) > skip_tol
    if not needs.any():
        return arr
    safe = norms > ZERO_NORM_TOL
    scale = np.where(needs & safe, norms, 1.0)
    return (arr / scale[..., None]).astype(arr.dtype)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def violations(self) -> list[str]:
        out = []
        if not self.fx > 0 or not self.fy > 0:
            out.append(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width):
            out.append(f"principal point x {self.cx} outside [0, {self.width})")
        if not (0 <= self.cy < self.height):
            out.append(f"principal point y {self.cy} outside [0, {self.height})")
        return out


@dataclass(frozen=True)
class CameraPose:
    """Camera-to-world rotation and translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @staticmethod
    def from_matrix(m: np.ndarray) -> "CameraPose":
        m = np.asarray(m, dtype=np.float64)
        return CameraPose(rotation=m[:3, :3].copy(), translation=m[:3, 3].copy())

    def violations(self) -> list[str]:
        out = []
        r = self.rotation
        if r.shape != (3, 3) or self.translation.shape != (3,):
            out.append("pose must be a 3x3 rotation plus 3-vector translation")
            return out
        if not is_rotation(r):
            err = np.abs(r.T @ r - np.eye(3)).max()
            out.append(
                f"rotation not orthonormal with det +1 (|R'R - I|_max={err:.2e}, det={np.linalg.det(r):.6f})"
            )
        return out


@dataclass(eq=False)
class DescriptorMap:
    """G x G grid of D-dimensional patch descriptors.

    ``valid`` marks patches usable for matching; ``None`` means all patches.
    """

    data: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or self.data.shape[0] != self.data.shape[1]:
            raise InvariantViolation(f"descriptor map must be (G, G, D), got {self.data.shape}")

    @property
    def grid_size(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[2]

    def flat(self) -> np.ndarray:
        """Row-major (G*G, D) view of the patch descriptors."""
        return self.data.reshape(-1, self.data.shape[2])

    def flat_valid(self) -> np.ndarray:
        """Row-major boolean patch mask, all-true when ``valid`` is unset."""
        if self.valid is None:
            return np.ones(self.grid_size * self.grid_size, dtype=bool)
        return self.valid.reshape(-1)

    def normalized(self) -> "DescriptorMap":
        return DescriptorMap(l2_normalize(self.data), valid=self.valid)


@dataclass(eq=False)
class SaliencyMap:
    """G x G map of foreground scores in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2 or self.data.shape[0] != self.data.shape[1]:
            raise InvariantViolation(f"saliency map must be (G, G), got {self.data.shape}")

    @property
    def grid_size(self) -> int:
        return self.data.shape[0]


@dataclass(eq=False)
class DepthMap:
    """Per-pixel depth with an explicit validity mask (False = hole)."""

    data: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.data.ndim != 2 or self.valid.shape != self.data.shape:
            raise InvariantViolation(
                f"depth map and mask shapes disagree: {self.data.shape} vs {self.valid.shape}"
            )

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def violations(self) -> list[str]:
        if self.valid.any() and not (self.data[self.valid] > 0).all():
            bad = int((self.data[self.valid] <= 0).sum())
            return [f"{bad} valid depth pixels are not positive"]
        return []


@dataclass(eq=False)
class ViewRecord:
    """One captured view: descriptors, saliency, depth and camera geometry."""

    descriptor_map: DescriptorMap
    saliency: SaliencyMap
    depth: DepthMap
    intrinsics: CameraIntrinsics
    pose: CameraPose
    crop_rect: tuple[float, float, float, float]
    cls_token: np.ndarray

    def __post_init__(self):
        self.crop_rect = tuple(float(v) for v in self.crop_rect)
        self.cls_token = np.asarray(self.cls_token)


@dataclass(eq=False)
class CaptureBundle:
    """All views of one object; immutable by convention after construction."""

    object_id: str
    views: list[ViewRecord]
    category_label: str | None = None

    @property
    def num_views(self) -> int:
        return len(self.views)

    @property
    def grid_size(self) -> int:
        return self.views[0].descriptor_map.grid_size

    @property
    def descriptor_dim(self) -> int:
        return self.views[0].descriptor_map.dim

    def descriptor_maps(self) -> list[DescriptorMap]:
        return [v.descriptor_map for v in self.views]

    def cls_tokens(self) -> np.ndarray:
        return np.stack([v.cls_token for v in self.views]).astype(np.float64)


@dataclass
class ValidationIssue:
    view_index: int | None
    field: str
    message: str

    def __str__(self) -> str:
        where = "bundle" if self.view_index is None else f"view {self.view_index}"
        return f"{where}: {self.field}: {self.message}"


@dataclass
class ValidationReport:
    issues: list[ValidationIssue] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.issues

    def add(self, view_index: int | None, field_name: str, message: str) -> None:
        self.issues.append(ValidationIssue(view_index, field_name, message))

    def __str__(self) -> str:
        if self.ok:
            return "bundle valid"
        return "\n".join(str(issue) for issue in self.issues)


def validate_bundle(bundle: CaptureBundle) -> ValidationReport:
    """Check every type invariant; returns a report instead of raising."""
    report = ValidationReport()
    if not bundle.views:
        report.add(None, "views", "bundle has no views")
        return report

    grid = bundle.views[0].descriptor_map.grid_size
    dim = bundle.views[0].descriptor_map.dim
    for i, view in enumerate(bundle.views):
        desc = view.descriptor_map
        if desc.grid_size != grid:
            report.add(i, "descriptor_map", f"grid size {desc.grid_size} != {grid} of view 0")
        if desc.dim != dim:
            report.add(i, "descriptor_map", f"descriptor dim {desc.dim} != {dim} of view 0")

        norms = np.linalg.norm(desc.flat().astype(np.float64), axis=1)
        mask = desc.flat_valid()
        zero = (norms <= ZERO_NORM_TOL) & mask
        if zero.any():
            idx = int(np.flatnonzero(zero)[0])
            report.add(
                i,
                "descriptor_map",
                f"{int(zero.sum())} zero-norm patch descriptors (first at patch "
                f"({idx // grid}, {idx % grid}))",
            )
        off = (np.abs(norms - 1.0) > 1e-5) & mask & ~zero
        if off.any():
            report.add(i, "descriptor_map", f"{int(off.sum())} patch descriptors are not unit norm")

        if view.saliency.grid_size != grid:
            report.add(i, "saliency", f"grid size {view.saliency.grid_size} != {grid}")
        sal = view.saliency.data
        if sal.size and (np.nanmin(sal) < 0.0 or np.nanmax(sal) > 1.0):
            report.add(i, "saliency", "values outside [0, 1]")

        for msg in view.depth.violations():
            report.add(i, "depth", msg)
        for msg in view.intrinsics.violations():
            report.add(i, "intrinsics", msg)
        for msg in view.pose.violations():
            report.add(i, "pose", msg)

        x0, y0, x1, y1 = view.crop_rect
        w, h = view.intrinsics.width, view.intrinsics.height
        if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
            report.add(i, "crop_rect", f"rect {view.crop_rect} not inside {w}x{h} frame")

        cls_norm = float(np.linalg.norm(view.cls_token.astype(np.float64)))
        if abs(cls_norm - 1.0) > 1e-5:
            report.add(i, "cls_token", f"norm {cls_norm:.6f} not unit")
        if view.cls_token.shape != (dim,):
            report.add(i, "cls_token", f"shape {view.cls_token.shape} != ({dim},)")
    return report


_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


def _write_blob(path: Path, array: np.ndarray, dtype_tag: str) -> dict:
    data = np.ascontiguousarray(array.astype(_DTYPES[dtype_tag], copy=False))
    path.write_bytes(data.tobytes())
    return {"file": path.name, "shape": list(array.shape), "dtype": dtype_tag}


def save_bundle(bundle: CaptureBundle, path: str | Path) -> None:
    """Write ``bundle`` as a manifest + blob directory (created if needed)."""
    root = Path(path)
    try:
        root.mkdir(parents=True, exist_ok=True)
        views_meta = []
        for i, view in enumerate(bundle.views):
            intr = view.intrinsics
            meta = {
                "intrinsics": [intr.fx, intr.fy, intr.cx, intr.cy, intr.width, intr.height],
                "pose": view.pose.matrix().tolist(),
                "crop_rect": list(view.crop_rect),
                "cls": view.cls_token.astype(np.float64).tolist(),
                "blobs": {
                    "desc": _write_blob(root / f"desc_{i}.f32", view.descriptor_map.data, "f32"),
                    "sal": _write_blob(root / f"sal_{i}.f32", view.saliency.data, "f32"),
                    "depth": _write_blob(root / f"depth_{i}.f32", view.depth.data, "f32"),
                    "depthmask": _write_blob(
                        root / f"depthmask_{i}.u8", view.depth.valid.astype(np.uint8), "u8"
                    ),
                },
            }
            views_meta.append(meta)
        manifest = {
            "version": MANIFEST_VERSION,
            "object_id": bundle.object_id,
            "category_label": bundle.category_label,
            "grid_size": bundle.grid_size,
            "descriptor_dim": bundle.descriptor_dim,
            "views": views_meta,
        }
        with open(root / MANIFEST_NAME, "w") as f:
            json.dump(manifest, f, indent=1)
    except OSError as exc:
        raise IoFailure(f"cannot write bundle at {root}: {exc}") from exc


def _read_blob(root: Path, meta: dict) -> np.ndarray:
    blob_path = root / meta["file"]
    if not blob_path.is_file():
        raise MissingFile(f"blob {blob_path} referenced by manifest is missing")
    dtype = _DTYPES[meta["dtype"]]
    shape = tuple(int(s) for s in meta["shape"])
    raw = blob_path.read_bytes()
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(raw) != expected:
        raise ShapeMismatch(
            f"{blob_path.name}: manifest shape {shape} needs {expected} bytes, file has {len(raw)}"
        )
    return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


def _load_raw(path: str | Path) -> tuple[CaptureBundle, dict]:
    """Read a bundle directory without validating; returns (bundle, manifest).

    IO-level problems (missing manifest/blob, unreadable JSON, blob byte
    counts) still raise; semantic invariants are the caller's job.
    """
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise MissingFile(f"no {MANIFEST_NAME} in {root}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise IoFailure(f"cannot read manifest at {manifest_path}: {exc}") from exc

    views = []
    for meta in manifest.get("views", []):
        blobs = meta["blobs"]
        desc_data = _read_blob(root, blobs["desc"])
        sal_data = _read_blob(root, blobs["sal"])
        depth_data = _read_blob(root, blobs["depth"])
        mask_data = _read_blob(root, blobs["depthmask"]).astype(bool)

        fx, fy, cx, cy, w, h = meta["intrinsics"]
        intr = CameraIntrinsics(fx=fx, fy=fy, cx=cx, cy=cy, width=int(w), height=int(h))
        pose = CameraPose.from_matrix(np.array(meta["pose"], dtype=np.float64))
        cls = l2_normalize(np.array(meta["cls"], dtype=np.float64))
        views.append(
            ViewRecord(
                descriptor_map=DescriptorMap(l2_normalize(desc_data)),
                saliency=SaliencyMap(sal_data),
                depth=DepthMap(depth_data, mask_data),
                intrinsics=intr,
                pose=pose,
                crop_rect=tuple(meta["crop_rect"]),
                cls_token=cls,
            )
        )
    bundle = CaptureBundle(
        object_id=manifest.get("object_id", root.name),
        category_label=manifest.get("category_label"),
        views=views,
    )
    return bundle, manifest


def _manifest_dim_issues(bundle: CaptureBundle, manifest: dict, report: ValidationReport) -> None:
    if not bundle.views:
        return
    if manifest.get("grid_size") != bundle.grid_size:
        report.add(
            None,
            "grid_size",
            f"manifest says {manifest.get('grid_size')}, blobs give {bundle.grid_size}",
        )
    if manifest.get("descriptor_dim") != bundle.descriptor_dim:
        report.add(
            None,
            "descriptor_dim",
            f"manifest says {manifest.get('descriptor_dim')}, blobs give {bundle.descriptor_dim}",
        )


def inspect_bundle(path: str | Path) -> ValidationReport:
    """Load a bundle and report every invariant violation without raising.

    Only IO-level failures (missing files, undecodable manifest, blob size
    mismatches) still raise, since then there is nothing to report on.
    """
    bundle, manifest = _load_raw(path)
    report = validate_bundle(bundle)
    _manifest_dim_issues(bundle, manifest, report)
    return report


def load_bundle(path: str | Path) -> CaptureBundle:
    """Load and validate a bundle directory; descriptors/CLS re-normalized."""
    bundle, manifest = _load_raw(path)
    report = validate_bundle(bundle)
    if not report.ok:
        raise InvariantViolation(f"loaded bundle violates invariants:\n{report}")
    dim_report = ValidationReport()
    _manifest_dim_issues(bundle, manifest, dim_report)
    if not dim_report.ok:
        raise ShapeMismatch(f"manifest disagrees with blob shapes:\n{dim_report}")
    return bundle
