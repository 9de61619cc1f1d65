"""
Random affine and elastic deformations, warping, inversion and ground truth.

Displacement fields use pull-back sampling: warped(x) = original(x + D(x)),
where x is a voxel center of the warped image. A simulated source is
source = warp_volume(target, D), so a target point p corresponds to the
source point q solving q + D(q) = p.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from lmreg.config import DeformationConfig
from lmreg.errors import DomainError, GridMismatchError, InversionError, TableFormatError, VolumeFormatError
from lmreg.volume import GridGeometry, Volume3, map_linear, read_metaimage, write_metaimage

logger = logging.getLogger(__name__)

BIT_GENERATORS = {
    "PCG64": np.random.PCG64,
    "Philox": np.random.Philox,
    "SFC64": np.random.SFC64,
}


def make_rng(seed: int, algorithm: str = "PCG64") -> np.random.Generator:
    """Seeded generator; the same seed and algorithm give the same stream on every platform"""
    if algorithm not in BIT_GENERATORS:
        raise DomainError(f"unknown bit generator {algorithm!r}")
    return np.random.Generator(BIT_GENERATORS[algorithm](int(seed)))


@dataclass(frozen=True)
class AffineTransform3:
    """y = linear @ x + translation, in world mm, (d, h, w) components"""

    linear: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "linear", np.asarray(self.linear, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "AffineTransform3":
        return cls()

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.linear.T + self.translation

    def inverse(self) -> "AffineTransform3":
        inv = np.linalg.inv(self.linear)
        return AffineTransform3(inv, -inv @ self.translation)

    def compose(self, inner: "AffineTransform3") -> "AffineTransform3":
        """self(inner(x))"""
        return AffineTransform3(self.linear @ inner.linear, self.linear @ inner.translation + self.translation)


def _rotation_dhw(angles_xyz_deg: np.ndarray) -> np.ndarray:
    """Rx @ Ry @ Rz built in x, y, z (= w, h, d) and reordered to (d, h, w)"""
    ax, ay, az = np.deg2rad(angles_xyz_deg)
    cx, sx, cy, sy, cz, sz = np.cos(ax), np.sin(ax), np.cos(ay), np.sin(ay), np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return (rx @ ry @ rz)[::-1, ::-1].copy()


def sample_affine(
    rng: np.random.Generator,
    cfg: DeformationConfig,
    center: Optional[Sequence[float]] = None,
    kinds: Sequence[str] = ("translation", "rotation", "scale"),
) -> AffineTransform3:
    """
    Random translation, rotation and isotropic scale about center.

    All three components are always drawn, in that order, so the stream
    position does not depend on which kinds are enabled; disabled kinds are
    replaced by their identity value.
    """
    t = rng.uniform(-cfg.translation_range, cfg.translation_range, size=3)
    angles = rng.uniform(-cfg.rotation_range, cfg.rotation_range, size=3)
    scale = rng.uniform(*cfg.scale_range)
    if "translation" not in kinds:
        t = np.zeros(3)
    if "rotation" not in kinds:
        angles = np.zeros(3)
    if "scale" not in kinds:
        scale = 1.0
    linear = scale * _rotation_dhw(angles)
    c = np.zeros(3) if center is None else np.asarray(center, dtype=np.float64)
    return AffineTransform3(linear, c - linear @ c + t[::-1])


@dataclass(eq=False)
class DenseDVF:
    """Per-voxel displacement in mm, data shaped (D, H, W, 3)"""

    data: np.ndarray
    geometry: GridGeometry

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.shape != self.geometry.dims + (3,):
            raise GridMismatchError(f"DVF data {data.shape} does not match grid {self.geometry.dims}")
        if not np.all(np.isfinite(data)):
            raise DomainError("DVF contains non-finite displacements")
        view = data.view()
        view.flags.writeable = False
        self.data = view

    @classmethod
    def zeros(cls, geometry: GridGeometry) -> "DenseDVF":
        return cls(np.zeros(geometry.dims + (3,)), geometry)

    def sample(self, points) -> np.ndarray:
        """Displacement at world points; zero outside the lattice"""
        idx = self.geometry.world_to_index(points)
        return map_linear(self.data, idx, mode="zero")

    def magnitude(self) -> np.ndarray:
        return np.linalg.norm(self.data, axis=-1)

    def __neg__(self) -> "DenseDVF":
        return DenseDVF(-self.data, self.geometry)


def affine_to_dvf(transform: AffineTransform3, geometry: GridGeometry) -> DenseDVF:
    """D(x) = A(x) - x on the grid"""
    x = geometry.world_points()
    return DenseDVF(transform.apply(x) - x, geometry)


@dataclass(frozen=True)
class GaussianBump:
    center: np.ndarray
    direction: np.ndarray
    magnitude: float
    sigma: float

    def evaluate(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        r2 = np.sum((points - self.center) ** 2, axis=-1)
        return (self.magnitude * np.exp(-r2 / (2.0 * self.sigma ** 2)))[..., None] * self.direction


def sample_gaussian_bump(rng: np.random.Generator, cfg: DeformationConfig, geometry: GridGeometry) -> GaussianBump:
    lo, hi = geometry.bounds()
    center = rng.uniform(lo, hi)
    direction = rng.standard_normal(3)
    norm = np.linalg.norm(direction)
    direction = direction / norm if norm > 0 else np.array([1.0, 0.0, 0.0])
    magnitude = rng.uniform(*cfg.bump_magnitude_range)
    sigma = rng.uniform(*cfg.bump_sigma_range)
    return GaussianBump(center, direction, float(magnitude), float(sigma))


def gaussian_bump_dvf(rng: np.random.Generator, cfg: DeformationConfig, geometry: GridGeometry) -> DenseDVF:
    """Large smooth deformation: one Gaussian bump with random center, direction, peak and width"""
    bump = sample_gaussian_bump(rng, cfg, geometry)
    logger.debug("Gaussian bump: magnitude=%.2f mm sigma=%.1f mm", bump.magnitude, bump.sigma)
    return DenseDVF(bump.evaluate(geometry.world_points()), geometry)


def smoothed_random_dvf(rng: np.random.Generator, cfg: DeformationConfig, geometry: GridGeometry) -> DenseDVF:
    """Small deformation: i.i.d. per-voxel noise, amplitude drawn per axis, then Gaussian smoothing"""
    amplitude = rng.uniform(*cfg.small_dvf_max, size=3)
    noise = rng.uniform(-1.0, 1.0, size=geometry.dims + (3,)) * amplitude
    if cfg.small_dvf_smoothing_sigma > 0:
        sigma = cfg.small_dvf_smoothing_sigma / np.asarray(geometry.spacing)
        noise = np.stack(
            [ndimage.gaussian_filter(noise[..., c], sigma=sigma, mode="nearest") for c in range(3)],
            axis=-1,
        )
    return DenseDVF(noise, geometry)


def compose_additive(a: DenseDVF, b: DenseDVF) -> DenseDVF:
    if not a.geometry.matches(b.geometry):
        raise GridMismatchError(f"cannot add DVFs on grids {a.geometry} and {b.geometry}")
    return DenseDVF(a.data + b.data, a.geometry)


def simulate_elastic(rng: np.random.Generator, cfg: DeformationConfig, geometry: GridGeometry) -> DenseDVF:
    """Gaussian bump plus smoothed random field"""
    large = gaussian_bump_dvf(rng, cfg, geometry)
    small = smoothed_random_dvf(rng, cfg, geometry)
    return compose_additive(large, small)


def sample_training_dvf(
    rng: np.random.Generator, cfg: DeformationConfig, geometry: GridGeometry, kind: str
) -> DenseDVF:
    if kind == "elastic":
        return simulate_elastic(rng, cfg, geometry)
    if kind in ("translation", "rotation", "scale"):
        affine = sample_affine(rng, cfg, center=geometry.center(), kinds=(kind,))
        return affine_to_dvf(affine, geometry)
    raise DomainError(f"unknown transform kind {kind!r}")


def warp_volume(vol: Volume3, D: DenseDVF) -> Volume3:
    """Pull-back warp onto the DVF's grid: out(x) = vol(x + D(x))"""
    g = D.geometry
    spacing_v = np.asarray(vol.spacing)
    idx = (
        np.moveaxis(np.indices(g.dims, dtype=np.float64), 0, -1) * (np.asarray(g.spacing) / spacing_v)
        + (np.asarray(g.origin) - np.asarray(vol.origin)) / spacing_v
        + D.data / spacing_v
    )
    out_dtype = np.float64 if vol.data.dtype == np.float64 else np.float32
    return Volume3.on_grid(map_linear(vol.data, idx, "edge").astype(out_dtype), g)


@dataclass
class InversionResult:
    points: np.ndarray
    converged: np.ndarray
    residual: np.ndarray
    iterations: int


def invert_dvf(D: DenseDVF, points, tol: float = 0.01, max_iter: int = 100) -> InversionResult:
    """
    Solve q + D(q) = p for each p by the fixed-point iteration q <- p - D(q).

    Converged points are frozen; the rest report their last residual.
    """
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    q = p.copy()
    converged = np.zeros(len(p), dtype=bool)
    residual = np.full(len(p), np.inf)
    iterations = 0
    for iterations in range(max_iter + 1):
        active = ~converged
        d = D.sample(q[active])
        r = np.linalg.norm(q[active] + d - p[active], axis=-1)
        residual[active] = r
        hit = r < tol
        converged[np.flatnonzero(active)[hit]] = True
        if converged.all() or iterations == max_iter:
            break
        still = np.flatnonzero(active)[~hit]
        q[still] = p[still] - d[~hit]
    return InversionResult(q, converged, residual, iterations)


def invert_dvf_at(D: DenseDVF, p: Sequence[float], tol: float = 0.01, max_iter: int = 100) -> np.ndarray:
    result = invert_dvf(D, np.asarray(p, dtype=np.float64)[None, :], tol, max_iter)
    if not result.converged[0]:
        raise InversionError(
            f"DVF inversion at {tuple(p)} did not converge in {max_iter} iterations "
            f"(residual {result.residual[0]:.4g} mm)",
            residual=float(result.residual[0]),
        )
    return result.points[0]


def ground_truth_correspondence(points_target, D: DenseDVF, tol: float = 0.01, max_iter: int = 100) -> np.ndarray:
    """Source-space correspondents of target points; raises if any inversion fails"""
    result = invert_dvf(D, points_target, tol, max_iter)
    if not result.converged.all():
        worst = float(result.residual[~result.converged].max())
        raise InversionError(
            f"{int((~result.converged).sum())} of {len(result.converged)} points did not converge",
            residual=worst,
        )
    return result.points


def jacobian_determinant(D: DenseDVF) -> Volume3:
    """det(I + grad D), central differences inside and one-sided at the border"""
    if any(n < 3 for n in D.geometry.dims):
        raise DomainError(f"jacobian needs at least 3 voxels per axis, got {D.geometry.dims}")
    jac = np.empty(D.geometry.dims + (3, 3))
    for c in range(3):
        grads = np.gradient(D.data[..., c], *D.geometry.spacing, edge_order=1)
        for k in range(3):
            jac[..., c, k] = grads[k] + (1.0 if c == k else 0.0)
    return Volume3.on_grid(np.linalg.det(jac), D.geometry)


def make_phantom(
    geometry: GridGeometry,
    rng: np.random.Generator,
    kind: str = "ellipsoid",
    n_blobs: int = 6,
    n_spots: int = 12,
) -> Volume3:
    """
    Smooth synthetic volume in [0, 1].

    Large soft-edged ellipsoids (or spheres) give structure for the
    intensity metric, small bright spots give distinct landmarks.
    """
    if kind not in ("ellipsoid", "sphere"):
        raise DomainError(f"unknown phantom kind {kind!r}")
    x = geometry.world_points()
    lo, hi = geometry.bounds()
    extent = np.maximum(hi - lo, np.asarray(geometry.spacing))
    out = np.full(geometry.dims, 0.05)

    for _ in range(n_blobs):
        center = rng.uniform(lo + 0.2 * extent, hi - 0.2 * extent)
        radii = rng.uniform(0.1, 0.3, size=3) * extent
        if kind == "sphere":
            radii[:] = radii.mean()
        level = rng.uniform(0.2, 0.8)
        r = np.sqrt(np.sum(((x - center) / radii) ** 2, axis=-1))
        out += level * 0.5 * (1.0 + np.tanh((1.0 - r) / 0.1))

    spot_radius = 2.0 * np.asarray(geometry.spacing)
    for _ in range(n_spots):
        center = rng.uniform(lo + 0.1 * extent, hi - 0.1 * extent)
        r2 = np.sum(((x - center) / spot_radius) ** 2, axis=-1)
        out += rng.uniform(0.3, 0.7) * np.exp(-0.5 * r2)

    return Volume3.on_grid(np.clip(out, 0.0, 1.0).astype(np.float32), geometry)


@dataclass(eq=False)
class SimulatedPair:
    target: Volume3
    source: Volume3
    dvf: DenseDVF
    points_target: np.ndarray
    points_source: np.ndarray
    dropped: int = 0


def simulate_pair(
    rng: np.random.Generator,
    cfg: DeformationConfig,
    target: Volume3,
    n_points: int = 100,
    kind: str = "elastic",
    margin_voxels: float = 2.0,
) -> SimulatedPair:
    """
    Deform target into a source image and sample oracle correspondences.

    Target points are drawn uniformly inside the grid, away from the border;
    points whose inversion does not converge are dropped and counted.
    """
    D = sample_training_dvf(rng, cfg, target.geometry, kind)
    source = warp_volume(target, D)
    lo, hi = target.geometry.bounds()
    inset = margin_voxels * np.asarray(target.spacing)
    pts = rng.uniform(lo + inset, hi - inset, size=(n_points, 3))
    inv = invert_dvf(D, pts, cfg.inversion_tol, cfg.inversion_max_iter)
    dropped = int((~inv.converged).sum())
    if dropped:
        logger.warning("Dropped %d of %d oracle points: inversion did not converge", dropped, n_points)
    return SimulatedPair(target, source, D, pts[inv.converged], inv.points[inv.converged], dropped)


def save_dvf(D: DenseDVF, path: Union[str, Path]) -> Path:
    """3-channel MetaImage, vector components stored x y z"""
    return write_metaimage(path, D.data[..., ::-1], D.geometry.spacing, D.geometry.origin)


def load_dvf(path: Union[str, Path]) -> DenseDVF:
    data, spacing, origin = read_metaimage(path)
    if data.ndim != 4 or data.shape[3] != 3:
        raise VolumeFormatError(f"{path}: expected a 3-channel displacement field")
    return DenseDVF(data[..., ::-1].astype(np.float64), GridGeometry(data.shape[:3], spacing, origin))


def save_points(path: Union[str, Path], points: np.ndarray) -> Path:
    """Plain text, one `x y z` row per point in mm"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, np.asarray(points)[:, ::-1], fmt="%.6f", header="x y z (mm)")
    return path


def load_points(path: Union[str, Path]) -> np.ndarray:
    try:
        pts = np.loadtxt(path, ndmin=2)
    except (OSError, ValueError) as e:
        raise TableFormatError(f"cannot read points from {path}: {e}") from e
    if pts.size == 0:
        return np.zeros((0, 3))
    if pts.shape[1] != 3:
        raise TableFormatError(f"{path}: expected 3 columns, got {pts.shape[1]}")
    return pts[:, ::-1].copy()
