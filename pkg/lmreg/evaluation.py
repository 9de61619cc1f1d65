"""
Evaluation metrics and report files: spatial matching error of predicted
correspondences against a known simulation field, target registration
error, deformation-binned landmark histograms, Jacobian statistics,
complementary-color slice overlays, and CSV/JSON writers.
"""

import csv
import json
import logging
import math
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, Field

from lmreg.deform_sim import DenseDVF, invert_dvf, jacobian_determinant
from lmreg.errors import DomainError, GridMismatchError, OutOfBoundsError, ShapeError
from lmreg.registration import transform_points
from lmreg.volume import Volume3

logger = logging.getLogger(__name__)


def nearest_rank(values: np.ndarray, p: float) -> float:
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest value"""
    ordered = np.sort(np.asarray(values, dtype=np.float64))
    rank = max(1, math.ceil(p / 100.0 * len(ordered)))
    return float(ordered[rank - 1])


class ErrorReport(BaseModel):
    """Per-point errors in mm with summary statistics"""
    errors: List[float] = Field(default_factory=list, description="Per-point errors in mm")
    mean: Optional[float] = Field(default=None, description="Mean error, None when empty")
    std: Optional[float] = Field(default=None, description="Population standard deviation")
    percentile_5: Optional[float] = Field(default=None, description="Nearest-rank 5th percentile")
    percentile_95: Optional[float] = Field(default=None, description="Nearest-rank 95th percentile")
    count: int = Field(default=0, description="Number of contributing points")
    dropped: int = Field(default=0, description="Points lost to inversion failure")

    @classmethod
    def from_errors(cls, errors, dropped: int = 0) -> "ErrorReport":
        e = np.asarray(errors, dtype=np.float64).reshape(-1)
        if len(e) == 0:
            return cls(dropped=dropped)
        return cls(
            errors=e.tolist(),
            mean=float(e.mean()),
            std=float(e.std()),
            percentile_5=nearest_rank(e, 5),
            percentile_95=nearest_rank(e, 95),
            count=len(e),
            dropped=dropped,
        )

    def summary(self) -> Dict[str, Optional[float]]:
        return self.model_dump(exclude={"errors"})


class ErrorCDF(BaseModel):
    edges: List[float]
    fractions: List[float]

    def at(self, edge: float) -> float:
        return self.fractions[self.edges.index(edge)]


class DeformationHistogram(BaseModel):
    """Pairs binned by deformation magnitude at the source landmark; values past the last edge fall in the last bin"""
    edges: List[float]
    total: List[int]
    accurate: List[int]
    error_threshold: float


class JacobianReport(BaseModel):
    min_determinant: float
    max_determinant: float
    fraction_nonpositive: float = Field(..., ge=0, le=1)
    histogram_edges: List[float]
    histogram_counts: List[int]
    interior_margin: int = 0


class RunManifest(BaseModel):
    """Everything needed to repeat a run"""
    command: str
    argv: List[str]
    config_hash: str
    config: str = Field(default="", description="key=value dump of the effective configuration")
    seed: int
    inputs: Dict[str, str] = Field(default_factory=dict)
    outputs: Dict[str, str] = Field(default_factory=dict)
    started: str
    finished: Optional[str] = None
    code_version: str
    threads: int = 1
    precision: str = "float32"


class RunSummary(BaseModel):
    """Headline numbers of one run; this is what the results service stores"""
    command: str
    out_dir: str
    seed: int
    config_hash: str
    variant: Optional[str] = None
    guidance: Optional[bool] = None
    n_pairs: Optional[int] = None
    matching_error_mean: Optional[float] = None
    tre_before: Optional[float] = None
    tre_after: Optional[float] = None
    elapsed_seconds: float = 0.0
    timestamp: str = Field(default_factory=lambda: datetime.now(timezone.utc).isoformat())


# Metrics
def spatial_matching_error(pairs, D: DenseDVF, tol: float = 0.01, max_iter: int = 100) -> ErrorReport:
    """
    Project each predicted target landmark through the inverse of the known
    field and measure the distance to the predicted source landmark. Pairs
    whose inversion does not converge are dropped and counted.
    """
    if len(pairs) == 0:
        return ErrorReport()
    inv = invert_dvf(D, pairs.target, tol, max_iter)
    dropped = int((~inv.converged).sum())
    if dropped:
        logger.warning("Dropped %d of %d pairs whose inverse projection did not converge", dropped, len(pairs))
    diff = inv.points[inv.converged] - pairs.source[inv.converged]
    return ErrorReport.from_errors(np.linalg.norm(diff, axis=1), dropped)


def pair_errors(pairs, D: DenseDVF, tol: float = 0.01, max_iter: int = 100):
    """Per-pair matching error with NaN where the projection failed"""
    inv = invert_dvf(D, pairs.target, tol, max_iter)
    err = np.linalg.norm(inv.points - pairs.source, axis=1)
    return np.where(inv.converged, err, np.nan)


def cumulative_error_distribution(errors, bin_edges: Sequence[float]) -> ErrorCDF:
    """Fraction of errors <= each edge"""
    e = np.asarray(errors, dtype=np.float64).reshape(-1)
    if len(e) == 0:
        raise DomainError("cannot build an error distribution from no errors")
    edges = np.asarray(bin_edges, dtype=np.float64)
    if len(edges) == 0 or np.any(np.diff(edges) <= 0):
        raise DomainError("bin edges must be strictly increasing")
    counts = np.searchsorted(np.sort(e), edges, side="right")
    return ErrorCDF(edges=edges.tolist(), fractions=(counts / len(e)).tolist())


def tre(points_target, points_source, transform=None) -> ErrorReport:
    """||transform(t_i) - s_i||; transform None is the identity (TRE before registration)"""
    t = np.atleast_2d(np.asarray(points_target, dtype=np.float64))
    s = np.atleast_2d(np.asarray(points_source, dtype=np.float64))
    if t.shape != s.shape:
        raise ShapeError(f"target points {t.shape} and source points {s.shape} differ")
    if len(t) == 0:
        return ErrorReport()
    mapped = transform_points(transform, t)
    return ErrorReport.from_errors(np.linalg.norm(mapped - s, axis=1))


def landmark_deformation_histogram(pairs, D: DenseDVF, bin_edges: Sequence[float],
                                   error_threshold: float = 4.0, tol: float = 0.01,
                                   max_iter: int = 100) -> DeformationHistogram:
    edges = np.asarray(bin_edges, dtype=np.float64)
    n_bins = len(edges) - 1
    if n_bins < 1 or np.any(np.diff(edges) <= 0):
        raise DomainError("bin edges must be strictly increasing with at least two entries")
    total = np.zeros(n_bins, dtype=int)
    accurate = np.zeros(n_bins, dtype=int)
    if len(pairs):
        magnitude = np.linalg.norm(D.sample(pairs.source), axis=1)
        errors = pair_errors(pairs, D, tol, max_iter)
        bins = np.clip(np.searchsorted(edges, magnitude, side="right") - 1, 0, n_bins - 1)
        np.add.at(total, bins, 1)
        good = np.nan_to_num(errors, nan=np.inf) < error_threshold
        np.add.at(accurate, bins[good], 1)
    return DeformationHistogram(edges=edges.tolist(), total=total.tolist(), accurate=accurate.tolist(),
                                error_threshold=error_threshold)


def jacobian_report(D: DenseDVF, interior_margin: int = 0, bins: int = 20) -> JacobianReport:
    det = jacobian_determinant(D).data
    m = int(interior_margin)
    if m:
        det = det[m:-m, m:-m, m:-m]
        if det.size == 0:
            raise DomainError(f"interior margin {m} leaves no voxels")
    counts, edges = np.histogram(det, bins=bins)
    return JacobianReport(
        min_determinant=float(det.min()),
        max_determinant=float(det.max()),
        fraction_nonpositive=float(np.mean(det <= 0)),
        histogram_edges=edges.tolist(),
        histogram_counts=counts.tolist(),
        interior_margin=m,
    )


# Overlays
def overlay_rgb(target_slice: np.ndarray, warped_slice: np.ndarray) -> np.ndarray:
    """Target in red, warped source in green and blue; aligned [0,1] intensities look grey"""
    r = np.rint(255 * np.clip(target_slice, 0, 1))
    gb = np.rint(255 * np.clip(warped_slice, 0, 1))
    return np.stack([r, gb, gb], axis=-1).astype(np.uint8)


def write_ppm(path: Union[str, Path], rgb: np.ndarray) -> Path:
    path = Path(path)
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())
    return path


def read_ppm(path: Union[str, Path]) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.find(b"\n", pos) + 1 or len(raw)
            continue
        end = pos
        while end < len(raw) and not raw[end:end + 1].isspace():
            end += 1
        if end == pos:
            raise DomainError(f"{path} has a truncated PPM header")
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P6":
        raise DomainError(f"{path} is not a binary PPM")
    w, h = int(fields[1]), int(fields[2])
    # exactly one whitespace byte separates maxval from the pixels
    payload = raw[pos + 1: pos + 1 + w * h * 3]
    if len(payload) != w * h * 3:
        raise DomainError(f"{path} holds {len(payload)} pixel bytes, expected {w * h * 3}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)


def overlay_slices(target: Volume3, warped_source: Volume3, axis: int, slice_indices: Sequence[int],
                   out_dir: Union[str, Path], prefix: str = "overlay") -> List[Path]:
    if not target.geometry.matches(warped_source.geometry):
        raise GridMismatchError("overlay inputs must share a grid")
    if axis not in (0, 1, 2):
        raise OutOfBoundsError(f"axis must be 0, 1 or 2, got {axis}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for index in slice_indices:
        if not 0 <= index < target.dims[axis]:
            raise OutOfBoundsError(f"slice {index} outside [0, {target.dims[axis]}) on axis {axis}")
        rgb = overlay_rgb(np.take(target.data, index, axis=axis), np.take(warped_source.data, index, axis=axis))
        paths.append(write_ppm(out_dir / f"{prefix}_axis{axis}_{index:03d}.ppm", rgb))
    return paths


# Writers
def write_error_csv(path: Union[str, Path], report: ErrorReport) -> Path:
    """Columns: index, error_mm"""
    path = Path(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["index", "error_mm"])
        for i, e in enumerate(report.errors):
            writer.writerow([i, repr(float(e))])
    return path


def read_error_csv(path: Union[str, Path]) -> np.ndarray:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return np.array([float(r["error_mm"]) for r in rows])


def write_paired_csv(path: Union[str, Path], columns: Mapping[str, Sequence[float]]) -> Path:
    """Equal-length named columns, one row per case, for paired statistical testing"""
    lengths = {len(v) for v in columns.values()}
    if len(lengths) > 1:
        raise ShapeError(f"paired columns differ in length: {sorted(lengths)}")
    path = Path(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(list(columns))
        for row in zip(*columns.values()):
            writer.writerow([repr(float(v)) for v in row])
    return path


def write_json(path: Union[str, Path], payload: Union[BaseModel, Mapping]) -> Path:
    path = Path(path)
    if isinstance(payload, BaseModel):
        path.write_text(payload.model_dump_json(indent=2))
    else:
        path.write_text(json.dumps(payload, indent=2, default=float))
    return path
