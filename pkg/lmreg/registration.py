"""
Affine and multi-resolution B-spline registration.

The deformable objective is

    f = w0 * (-MI) + w1 * bending energy + w2 * mean ||T(t_i) - s_i||

where MI is a Parzen-window (Mattes) mutual information between the target
and the transformed source, and the last term pulls target landmarks onto
their source correspondents. T maps target coordinates into source
coordinates; the rendered DVF is T(x) - x on the target grid, which is the
pull-back convention used by warp_volume.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import sparse

from lmreg.config import RegistrationConfig
from lmreg.deform_sim import AffineTransform3, DenseDVF
from lmreg.errors import (
    DegenerateIntensityError,
    EmptyOverlapError,
    GradcheckError,
    NonFiniteError,
    OutOfSupportError,
)
from lmreg.volume import GridGeometry, Volume3, gaussian_smooth, resample_to_spacing, sample_world

logger = logging.getLogger(__name__)

PARZEN_PADDING = 2


# Cubic B-spline basis, value and first two derivatives on t in [0, 1)
def _cubic_weights(t: np.ndarray, order: int = 0) -> np.ndarray:
    """Weights of the four supporting knots, shape t.shape + (4,)"""
    t = np.asarray(t, dtype=np.float64)
    s = 1.0 - t
    if order == 0:
        w = (s ** 3 / 6.0, (3 * t ** 3 - 6 * t ** 2 + 4) / 6.0, (-3 * t ** 3 + 3 * t ** 2 + 3 * t + 1) / 6.0, t ** 3 / 6.0)
    elif order == 1:
        w = (-0.5 * s ** 2, 1.5 * t ** 2 - 2 * t, -1.5 * t ** 2 + t + 0.5, 0.5 * t ** 2)
    elif order == 2:
        w = (s, 3 * t - 2, 1 - 3 * t, t)
    else:
        raise ValueError(f"unsupported derivative order {order}")
    return np.stack(w, axis=-1)


@dataclass(eq=False)
class BSplineTransform:
    """
    T(x) = x + sum_i c_i * beta(u_0 - i_0) beta(u_1 - i_1) beta(u_2 - i_2),
    u = (x - grid_origin) / grid_spacing. coefficients has shape (n0, n1, n2, 3), mm.
    """

    grid_origin: np.ndarray
    grid_spacing: np.ndarray
    coefficients: np.ndarray

    def __post_init__(self):
        self.grid_origin = np.asarray(self.grid_origin, dtype=np.float64).reshape(3)
        self.grid_spacing = np.asarray(self.grid_spacing, dtype=np.float64).reshape(3)
        self.coefficients = np.asarray(self.coefficients, dtype=np.float64)
        if self.coefficients.ndim != 4 or self.coefficients.shape[3] != 3:
            raise ValueError(f"coefficients must be (n0, n1, n2, 3), got {self.coefficients.shape}")
        if any(n < 4 for n in self.coefficients.shape[:3]):
            raise ValueError("a cubic lattice needs at least 4 control points per axis")

    @classmethod
    def covering(cls, geometry: GridGeometry, spacing: Union[float, Sequence[float]]) -> "BSplineTransform":
        """Zero lattice reaching two control points past the first and last voxel centers on every axis"""
        spacing = np.broadcast_to(np.asarray(spacing, dtype=np.float64), (3,)).copy()
        lo, hi = geometry.bounds()
        n = np.floor((hi - lo) / spacing + 1e-9).astype(int) + 5
        return cls(lo - 2.0 * spacing, spacing, np.zeros(tuple(n) + (3,)))

    @property
    def lattice_dims(self) -> Tuple[int, int, int]:
        return tuple(self.coefficients.shape[:3])

    @property
    def n_parameters(self) -> int:
        return self.coefficients.size

    def copy(self) -> "BSplineTransform":
        return BSplineTransform(self.grid_origin.copy(), self.grid_spacing.copy(), self.coefficients.copy())

    def _locate(self, points: np.ndarray):
        u = (np.asarray(points, dtype=np.float64) - self.grid_origin) / self.grid_spacing
        floor = np.floor(u)
        return (floor.astype(np.intp) - 1), u - floor

    def support_mask(self, points) -> np.ndarray:
        base, _ = self._locate(np.atleast_2d(points))
        return np.all((base >= 0) & (base + 3 <= np.asarray(self.lattice_dims) - 1), axis=-1)

    def basis(self, points, orders: Tuple[int, int, int] = (0, 0, 0)) -> sparse.csr_matrix:
        """
        Sparse (N, n0*n1*n2) matrix of tensor-product basis values (or their
        derivatives, per-axis orders, in 1/mm^order) at world points.
        """
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        base, t = self._locate(points)
        dims = np.asarray(self.lattice_dims)
        if not np.all((base >= 0) & (base + 3 <= dims - 1)):
            bad = int((~self.support_mask(points)).sum())
            raise OutOfSupportError(f"{bad} point(s) outside the B-spline support")
        w = [_cubic_weights(t[:, k], orders[k]) / self.grid_spacing[k] ** orders[k] for k in range(3)]
        offsets = np.arange(4)
        i0 = base[:, 0, None, None, None] + offsets[None, :, None, None]
        i1 = base[:, 1, None, None, None] + offsets[None, None, :, None]
        i2 = base[:, 2, None, None, None] + offsets[None, None, None, :]
        cols = np.ravel_multi_index(np.broadcast_arrays(i0, i1, i2), tuple(dims)).reshape(len(points), 64)
        vals = (w[0][:, :, None, None] * w[1][:, None, :, None] * w[2][:, None, None, :]).reshape(len(points), 64)
        rows = np.repeat(np.arange(len(points)), 64)
        return sparse.csr_matrix((vals.ravel(), (rows, cols.ravel())), shape=(len(points), int(np.prod(dims))))

    def displacement(self, points, basis: Optional[sparse.csr_matrix] = None) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        w = self.basis(points) if basis is None else basis
        return np.asarray(w @ self.coefficients.reshape(-1, 3))

    def evaluate(self, points) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return points + self.displacement(points)

    apply = evaluate

    def _axis_basis(self, coords: np.ndarray, axis: int) -> np.ndarray:
        u = (coords - self.grid_origin[axis]) / self.grid_spacing[axis]
        floor = np.floor(u)
        base = floor.astype(np.intp) - 1
        n = self.lattice_dims[axis]
        if np.any(base < 0) or np.any(base + 3 > n - 1):
            raise OutOfSupportError(f"grid exceeds the B-spline support along axis {axis}")
        m = np.zeros((len(coords), n))
        w = _cubic_weights(u - floor)
        rows = np.arange(len(coords))
        for a in range(4):
            m[rows, base + a] = w[:, a]
        return m

    def render(self, geometry: GridGeometry) -> np.ndarray:
        """Displacement on every voxel center of geometry, (D, H, W, 3); separable evaluation"""
        mats = [
            self._axis_basis(o + s * np.arange(n), k)
            for k, (n, s, o) in enumerate(zip(geometry.dims, geometry.spacing, geometry.origin))
        ]
        out = self.coefficients
        for axis, m in enumerate(mats):
            out = np.moveaxis(np.tensordot(m, out, axes=([1], [axis])), 0, axis)
        return out

    def refine(self, geometry: GridGeometry) -> "BSplineTransform":
        """
        Same displacement on a lattice with half the spacing (exact dyadic
        subdivision). The lattice must have been built by covering(geometry, ...).
        """
        finer = BSplineTransform.covering(geometry, self.grid_spacing / 2.0)
        if not np.allclose(finer.grid_origin, self.grid_origin + self.grid_spacing):
            raise OutOfSupportError("lattice was not created by covering() on this geometry")
        coeffs = self.coefficients
        for axis in range(3):
            coeffs = _subdivide_axis(coeffs, axis, finer.lattice_dims[axis], offset=2)
        finer.coefficients = coeffs
        return finer


def _subdivide_axis(c: np.ndarray, axis: int, n_out: int, offset: int) -> np.ndarray:
    """
    Fine coefficient j sits at coarse coordinate (j + offset) / 2. On a
    coarse knot m: (c[m-1] + 6 c[m] + c[m+1]) / 8; halfway between knots m
    and m+1: (c[m] + c[m+1]) / 2. The coarse lattice is extended by two
    linearly extrapolated knots per side.
    """
    c = np.moveaxis(c, axis, 0)
    head = [3 * c[0] - 2 * c[1], 2 * c[0] - c[1]]
    tail = [2 * c[-1] - c[-2], 3 * c[-1] - 2 * c[-2]]
    p = np.concatenate([np.stack(head), c, np.stack(tail)], axis=0)
    q = np.arange(n_out) + offset
    m = q // 2 + 2
    top = len(p) - 1
    on_knot = (p[np.clip(m - 1, 0, top)] + 6 * p[np.clip(m, 0, top)] + p[np.clip(m + 1, 0, top)]) / 8.0
    between = (p[np.clip(m, 0, top)] + p[np.clip(m + 1, 0, top)]) / 2.0
    is_knot = (q % 2 == 0).reshape((-1,) + (1,) * (c.ndim - 1))
    return np.moveaxis(np.where(is_knot, on_knot, between), 0, axis)


def bspline_evaluate(T: BSplineTransform, x) -> np.ndarray:
    """T(x) for one or more world points"""
    pts = np.asarray(x, dtype=np.float64)
    out = T.evaluate(pts.reshape(-1, 3))
    return out.reshape(pts.shape)


@dataclass
class ComposedTransform:
    """affine(bspline(x)); either part may be absent"""

    affine: Optional[AffineTransform3] = None
    bspline: Optional[BSplineTransform] = None

    def apply(self, points) -> np.ndarray:
        out = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if self.bspline is not None:
            out = self.bspline.evaluate(out)
        if self.affine is not None:
            out = self.affine.apply(out)
        return out


# Mutual information
def intensity_range(vol: Volume3, percentiles: Tuple[float, float] = (0.1, 99.9)) -> Tuple[float, float]:
    lo, hi = np.percentile(vol.data, percentiles)
    if not hi > lo:
        raise DegenerateIntensityError(f"intensity range collapsed to {lo:g}")
    return float(lo), float(hi)


@dataclass
class MIEvaluation:
    value: float
    point_gradient: np.ndarray
    overlap: np.ndarray
    joint: np.ndarray


def _parzen_mi(fixed: np.ndarray, moving: np.ndarray, moving_grad: np.ndarray, bins: int,
               fixed_range: Tuple[float, float], moving_range: Tuple[float, float]) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    Mutual information of sample intensities with a zero-order window on the
    fixed side and a cubic B-spline window on the moving side. Also returns
    dMI/dy per sample (y = moving sample position) and the joint histogram.
    """
    n = len(fixed)
    pad = PARZEN_PADDING
    f_lo, f_hi = fixed_range
    m_lo, m_hi = moving_range
    f_width = (f_hi - f_lo) / (bins - 2 * pad - 1)
    m_width = (m_hi - m_lo) / (bins - 2 * pad - 1)

    f_xi = (np.clip(fixed, f_lo, f_hi) - f_lo) / f_width + pad
    f_bin = np.minimum(np.floor(f_xi).astype(np.intp), bins - pad - 1)
    clipped = (moving < m_lo) | (moving > m_hi)
    m_xi = (np.clip(moving, m_lo, m_hi) - m_lo) / m_width + pad
    m_floor = np.floor(m_xi)
    m_base = m_floor.astype(np.intp) - 1
    t = m_xi - m_floor
    w = _cubic_weights(t)
    dw = _cubic_weights(t, order=1)

    joint = np.zeros((bins, bins))
    for a in range(4):
        np.add.at(joint, (f_bin, m_base + a), w[:, a])
    joint /= n
    pf = joint.sum(axis=1)
    pm = joint.sum(axis=0)
    nz = joint > 0
    ratio = np.zeros_like(joint)
    ratio[nz] = np.log(joint[nz] / (pf[:, None] * pm[None, :])[nz])
    mi = float(np.sum(joint[nz] * ratio[nz]))

    q = np.zeros(n)
    for a in range(4):
        q += dw[:, a] * ratio[f_bin, m_base + a]
    q = np.where(clipped, 0.0, q / (n * m_width))
    return mi, q[:, None] * moving_grad, joint


def mutual_information(target: Volume3, source: Volume3, x: np.ndarray, y: np.ndarray, bins: int = 32,
                       fixed_range: Optional[Tuple[float, float]] = None,
                       moving_range: Optional[Tuple[float, float]] = None,
                       percentiles: Tuple[float, float] = (0.1, 99.9)) -> MIEvaluation:
    """MI between target(x) and source(y) over samples whose y lands inside the source"""
    if bins < 2 * PARZEN_PADDING + 2:
        raise DegenerateIntensityError(f"{bins} histogram bins leave no room for the Parzen padding")
    fixed_range = fixed_range or intensity_range(target, percentiles)
    moving_range = moving_range or intensity_range(source, percentiles)
    if not fixed_range[1] > fixed_range[0] or not moving_range[1] > moving_range[0]:
        raise DegenerateIntensityError("intensity range collapsed")
    overlap = source.geometry.contains(y)
    if not overlap.any():
        raise EmptyOverlapError("no sample maps inside the source image")
    fixed = sample_world(target, x[overlap])
    moving, moving_grad = sample_world(source, y[overlap], gradient=True)
    mi, dy, joint = _parzen_mi(fixed, moving, moving_grad, bins, fixed_range, moving_range)
    grad = np.zeros_like(y)
    grad[overlap] = dy
    return MIEvaluation(mi, grad, overlap, joint)


def mattes_mi(target: Volume3, source: Volume3, T: BSplineTransform, samples: Union[int, np.ndarray],
              bins: int = 32, rng: Optional[np.random.Generator] = None,
              fixed_range: Optional[Tuple[float, float]] = None,
              moving_range: Optional[Tuple[float, float]] = None,
              percentiles: Tuple[float, float] = (0.1, 99.9),
              basis: Optional[sparse.csr_matrix] = None) -> Tuple[float, np.ndarray]:
    """
    Negative MI and its gradient with respect to the control displacements
    (same shape as T.coefficients). samples is either a count drawn with rng
    inside the target grid or a fixed (N, 3) array of world points.
    """
    if isinstance(samples, (int, np.integer)):
        rng = rng if rng is not None else np.random.default_rng()
        x = sample_coordinates(target.geometry, int(samples), rng)
    else:
        x = np.asarray(samples, dtype=np.float64)
    w = T.basis(x) if basis is None else basis
    y = x + np.asarray(w @ T.coefficients.reshape(-1, 3))
    ev = mutual_information(target, source, x, y, bins, fixed_range, moving_range, percentiles)
    grad = np.asarray(w.T @ ev.point_gradient).reshape(T.coefficients.shape)
    return -ev.value, -grad


# Regularization and guidance
SECOND_DERIVATIVES = (
    ((2, 0, 0), 1.0), ((0, 2, 0), 1.0), ((0, 0, 2), 1.0),
    ((1, 1, 0), 2.0), ((1, 0, 1), 2.0), ((0, 1, 1), 2.0),
)


def bending_energy(T: BSplineTransform, points: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean over points of the squared Frobenius norm of the displacement Hessian, with its gradient"""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    c = T.coefficients.reshape(-1, 3)
    value = 0.0
    grad = np.zeros_like(c)
    n = len(points)
    for orders, weight in SECOND_DERIVATIVES:
        h = T.basis(points, orders)
        d = np.asarray(h @ c)
        value += weight * float(np.sum(d * d)) / n
        grad += (2.0 * weight / n) * np.asarray(h.T @ d)
    return value, grad.reshape(T.coefficients.shape)


def corresponding_points_metric(T: BSplineTransform, target_points: np.ndarray,
                                source_points: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean distance ||T(t_i) - s_i|| and its gradient; zero-length residuals contribute no gradient"""
    t = np.atleast_2d(np.asarray(target_points, dtype=np.float64))
    s = np.atleast_2d(np.asarray(source_points, dtype=np.float64))
    if len(t) == 0:
        return 0.0, np.zeros_like(T.coefficients)
    w = T.basis(t)
    r = t + np.asarray(w @ T.coefficients.reshape(-1, 3)) - s
    dist = np.linalg.norm(r, axis=1)
    unit = np.divide(r, dist[:, None], out=np.zeros_like(r), where=dist[:, None] > 0)
    grad = np.asarray(w.T @ unit) / len(t)
    return float(dist.mean()), grad.reshape(T.coefficients.shape)


# Optimization
def sample_coordinates(geometry: GridGeometry, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random world points inside the voxel-center box"""
    lo, hi = geometry.bounds()
    return rng.uniform(lo, hi, size=(n, 3))


def image_pyramid(vol: Volume3, levels: int) -> List[Volume3]:
    """Coarse to fine: Gaussian smoothing (sigma = half the factor, in voxels) then decimation by 2^k"""
    out = []
    for level in range(levels):
        factor = 2 ** (levels - 1 - level)
        if factor == 1:
            out.append(vol)
            continue
        smoothed = gaussian_smooth(vol, 0.5 * factor * np.asarray(vol.spacing))
        out.append(resample_to_spacing(smoothed, tuple(factor * np.asarray(vol.spacing))))
    return out


@dataclass
class TraceEntry:
    level: int
    iteration: int
    objective: float
    mi: float
    bending: float
    points: float


@dataclass
class RegistrationResult:
    transform: Union[BSplineTransform, AffineTransform3, ComposedTransform]
    dense_dvf: Optional[DenseDVF]
    trace: List[TraceEntry] = field(default_factory=list)
    elapsed: float = 0.0
    dropped_guidance: int = 0
    affine: Optional[AffineTransform3] = None
    bspline: Optional[BSplineTransform] = None


def _gain(a: float, A: float, alpha: float, k: int) -> float:
    return a / max(A + k, 1.0) ** alpha


def affine_register(target: Volume3, source: Volume3, cfg: RegistrationConfig,
                    rng: np.random.Generator) -> AffineTransform3:
    """
    MI-driven affine registration (translation, rotation, scale, shear) over a
    Gaussian pyramid. Starts from aligned image origins and takes
    max-normalized gradient steps whose length decays from affine_gain_a mm.
    """
    center = target.geometry.center()
    radius = float(np.linalg.norm(target.geometry.extent)) / 2.0
    linear = np.eye(3)
    translation = np.asarray(source.origin) - np.asarray(target.origin)
    pyr_t = image_pyramid(target, cfg.affine_resolutions)
    pyr_s = image_pyramid(source, cfg.affine_resolutions)

    for level, (tgt, src) in enumerate(zip(pyr_t, pyr_s)):
        bins = cfg.histogram_bins[min(level, len(cfg.histogram_bins) - 1)]
        f_range = intensity_range(tgt, cfg.intensity_percentiles)
        m_range = intensity_range(src, cfg.intensity_percentiles)
        for k in range(cfg.affine_iterations):
            x = sample_coordinates(tgt.geometry, cfg.affine_spatial_samples, rng)
            y = (x - center) @ linear.T + center + translation
            ev = mutual_information(tgt, src, x, y, bins, f_range, m_range)
            # descend on -MI; linear part scaled to mm at the domain radius
            g_lin = -(ev.point_gradient.T @ (x - center)) / radius
            g_t = -ev.point_gradient.sum(axis=0)
            g = np.concatenate([g_lin.ravel(), g_t])
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"affine gradient became non-finite at level {level}, iteration {k}")
            peak = np.abs(g).max()
            if peak == 0:
                continue
            step = cfg.affine_gain_a * ((cfg.affine_gain_A + 1.0) / (cfg.affine_gain_A + k + 1.0)) ** cfg.affine_gain_alpha
            delta = -step * g / peak
            linear = linear + delta[:9].reshape(3, 3) / radius
            translation = translation + delta[9:]
        logger.info("Affine level %d/%d done", level + 1, cfg.affine_resolutions)
    return AffineTransform3(linear, center - linear @ center + translation)


def resample_affine(vol: Volume3, transform: AffineTransform3, geometry: GridGeometry) -> Volume3:
    """out(x) = vol(transform(x)) on geometry"""
    values = sample_world(vol, transform.apply(geometry.world_points()))
    out_dtype = np.float64 if vol.data.dtype == np.float64 else np.float32
    return Volume3.on_grid(values.astype(out_dtype), geometry)


def register_deformable(target: Volume3, source: Volume3, guidance, cfg: RegistrationConfig,
                        rng: np.random.Generator) -> RegistrationResult:
    """
    Multi-resolution B-spline registration with optional landmark guidance.

    guidance is anything with .target/.source point arrays (a
    CorrespondenceSet) or None. The control lattice starts at
    final_grid_spacing * 2^(levels-1) and halves at every level.
    """
    started = time.perf_counter()
    levels = cfg.resolutions
    w0, w1, w2 = cfg.metric0_weight, cfg.metric1_weight, cfg.metric2_weight
    g_target = np.zeros((0, 3)) if guidance is None else np.asarray(guidance.target, dtype=np.float64)
    g_source = np.zeros((0, 3)) if guidance is None else np.asarray(guidance.source, dtype=np.float64)
    use_guidance = w2 > 0 and len(g_target) > 0
    pyr_t = image_pyramid(target, levels)
    pyr_s = image_pyramid(source, levels)
    trace: List[TraceEntry] = []
    dropped_total = 0
    T: Optional[BSplineTransform] = None

    for level, (tgt, src) in enumerate(zip(pyr_t, pyr_s)):
        spacing = cfg.final_grid_spacing * 2 ** (levels - 1 - level)
        T = BSplineTransform.covering(target.geometry, spacing) if T is None else T.refine(target.geometry)
        f_range = intensity_range(tgt, cfg.intensity_percentiles)
        m_range = intensity_range(src, cfg.intensity_percentiles)
        bins = cfg.histogram_bins[level]
        a, A = cfg.gain_a[level], cfg.gain_A[level]

        pt, ps = g_target, g_source
        if use_guidance:
            keep = T.support_mask(pt)
            dropped = int((~keep).sum())
            if dropped:
                logger.warning("Level %d: dropped %d guidance pair(s) outside the transform support", level, dropped)
                dropped_total = max(dropped_total, dropped)
            pt, ps = pt[keep], ps[keep]

        logger.info("Deformable level %d/%d: grid %s at %.1f mm, %d iterations, %d guidance pairs",
                    level + 1, levels, T.lattice_dims, spacing, cfg.iterations[level], len(pt) if use_guidance else 0)
        for k in range(cfg.iterations[level]):
            x = sample_coordinates(tgt.geometry, cfg.spatial_samples, rng)
            basis = T.basis(x)
            mi, g = mattes_mi(tgt, src, T, x, bins, fixed_range=f_range, moving_range=m_range, basis=basis)
            g = w0 * g
            be = cp = 0.0
            if w1 > 0:
                be, g_be = bending_energy(T, x)
                g = g + w1 * g_be
            if use_guidance and len(pt):
                cp, g_cp = corresponding_points_metric(T, pt, ps)
                g = g + w2 * g_cp
            objective = w0 * mi + w1 * be + w2 * cp
            if not np.isfinite(objective) or not np.all(np.isfinite(g)):
                raise NonFiniteError(f"objective became non-finite at level {level}, iteration {k}")
            step = _gain(a, A, cfg.gain_alpha, k) * g
            longest = np.linalg.norm(step, axis=-1).max()
            if longest > cfg.max_step_length:
                step *= cfg.max_step_length / longest
            T.coefficients -= step
            trace.append(TraceEntry(level, k, objective, mi, be, cp))
        if trace:
            last = trace[-1]
            logger.info("Level %d done: f=%.5f  -MI=%.5f  BE=%.5f  CP=%.4f mm",
                        level + 1, last.objective, last.mi, last.bending, last.points)

    dvf = render_dense_dvf(T, target.geometry)
    return RegistrationResult(T, dvf, trace, time.perf_counter() - started, dropped_total, bspline=T)


def render_dense_dvf(T: Union[BSplineTransform, ComposedTransform, AffineTransform3], geometry: GridGeometry) -> DenseDVF:
    """T(x) - x on every voxel center of geometry"""
    if isinstance(T, BSplineTransform):
        return DenseDVF(T.render(geometry), geometry)
    x = geometry.world_points()
    if isinstance(T, ComposedTransform) and T.bspline is not None:
        moved = x + T.bspline.render(geometry)
        if T.affine is not None:
            moved = T.affine.apply(moved)
        return DenseDVF(moved - x, geometry)
    return DenseDVF(T.apply(x.reshape(-1, 3)).reshape(x.shape) - x, geometry)


def transform_points(T, points) -> np.ndarray:
    """Apply any transform (B-spline, affine, composed, or a DVF as x + D(x)); None is the identity"""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if T is None:
        return pts.copy()
    if isinstance(T, DenseDVF):
        return pts + T.sample(pts)
    return T.apply(pts)


@dataclass
class _Guidance:
    target: np.ndarray
    source: np.ndarray


def register_pipeline(target: Volume3, source: Volume3, guidance, cfg: RegistrationConfig,
                      rng: np.random.Generator, affine: bool = True) -> RegistrationResult:
    """
    Affine stage, affine resampling of the source, deformable stage with the
    guidance carried into the affinely aligned source space, then the composed
    transform x -> A(T_b(x)) rendered on the target grid.
    """
    started = time.perf_counter()
    A = affine_register(target, source, cfg, rng) if affine else AffineTransform3.identity()
    aligned = resample_affine(source, A, target.geometry)
    moved_guidance = None
    if guidance is not None and len(guidance.target):
        moved_guidance = _Guidance(np.asarray(guidance.target), A.inverse().apply(guidance.source))
    deformable = register_deformable(target, aligned, moved_guidance, cfg, rng)
    composed = ComposedTransform(A, deformable.bspline)
    return RegistrationResult(
        composed,
        render_dense_dvf(composed, target.geometry),
        deformable.trace,
        time.perf_counter() - started,
        deformable.dropped_guidance,
        affine=A,
        bspline=deformable.bspline,
    )


def gradcheck_metrics(seed: int = 0, n_params: int = 20) -> Dict[str, float]:
    """
    Finite-difference check of the MI, bending energy and landmark terms on a
    small smooth case with frozen samples. Raises GradcheckError on failure.
    """
    rng = np.random.default_rng(seed)
    geometry = GridGeometry((16, 16, 16), (2.0, 2.0, 2.0))
    x = geometry.world_points()
    centre = geometry.center()
    target = Volume3.on_grid(np.exp(-np.sum((x - centre) ** 2, axis=-1) / 200.0)
                             + 0.3 * np.sin(x[..., 2] / 5.0), geometry)
    source = Volume3.on_grid(np.exp(-np.sum((x - centre - 1.5) ** 2, axis=-1) / 180.0)
                             + 0.3 * np.sin(x[..., 2] / 5.0 + 0.2), geometry)
    T = BSplineTransform.covering(geometry, 8.0)
    T.coefficients = rng.normal(scale=0.3, size=T.coefficients.shape)
    samples = sample_coordinates(geometry, 4000, rng)
    f_range, m_range = (float(target.data.min()), float(target.data.max())), (float(source.data.min()), float(source.data.max()))
    lo, hi = geometry.bounds()
    t_pts = rng.uniform(lo + 4, hi - 4, size=(12, 3))
    s_pts = t_pts + rng.normal(scale=3.0, size=t_pts.shape)

    terms = {
        "mattes_mi": (lambda: mattes_mi(target, source, T, samples, 32, fixed_range=f_range, moving_range=m_range), 1e-3),
        "bending_energy": (lambda: bending_energy(T, samples), 1e-4),
        "corresponding_points": (lambda: corresponding_points_metric(T, t_pts, s_pts), 1e-4),
    }
    flat = T.coefficients.reshape(-1)
    picks = rng.choice(flat.size, size=min(n_params, flat.size), replace=False)
    errors: Dict[str, float] = {}
    eps = 1e-5
    for name, (fn, tol) in terms.items():
        _, grad = fn()
        numeric = []
        for i in picks:
            saved = flat[i]
            flat[i] = saved + eps
            plus = fn()[0]
            flat[i] = saved - eps
            minus = fn()[0]
            flat[i] = saved
            numeric.append((plus - minus) / (2 * eps))
        analytic = grad.reshape(-1)[picks]
        scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
        errors[name] = float(np.max(np.abs(analytic - np.asarray(numeric))) / scale)
        logger.info("gradcheck %-20s max relative error %.3e", name, errors[name])
        if not errors[name] < tol:
            raise GradcheckError(f"{name} gradient check failed: {errors[name]:.3e} >= {tol:g}")
    return errors
