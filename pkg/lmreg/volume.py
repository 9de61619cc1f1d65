"""
3D scalar volumes with physical coordinates.

Arrays are indexed (depth, height, width) everywhere, width fastest. World
points are given in the same (d, h, w) component order, in mm. MetaImage
headers list sizes and vectors in x y z order (x = width), so the reader and
writer reverse them at the file boundary and nowhere else.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
import SimpleITK as sitk
from scipy import ndimage

from lmreg.errors import (
    DomainError,
    OutOfBoundsError,
    UnsupportedElementTypeError,
    VolumeFormatError,
    VolumeSizeError,
)

logger = logging.getLogger(__name__)

Vec3 = Tuple[float, float, float]

ELEMENT_TYPES = {
    "MET_SHORT": np.dtype(np.int16),
    "MET_FLOAT": np.dtype(np.float32),
}
REQUIRED_KEYS = ("NDims", "DimSize", "ElementType", "ElementDataFile")


@dataclass(frozen=True)
class GridGeometry:
    """Voxel lattice: dims (voxels), spacing (mm/voxel), origin (mm of voxel 0)"""

    dims: Tuple[int, int, int]
    spacing: Vec3 = (1.0, 1.0, 1.0)
    origin: Vec3 = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
            raise DomainError("dims, spacing and origin need three components")
        if any(d <= 0 for d in dims):
            raise DomainError(f"dims must be positive, got {dims}")
        if any(not s > 0 for s in spacing):
            raise DomainError(f"spacing must be positive, got {spacing}")
        if not all(np.isfinite(origin)):
            raise DomainError(f"origin must be finite, got {origin}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))

    @property
    def extent(self) -> np.ndarray:
        """Physical size covered by the voxels, dims * spacing"""
        return np.asarray(self.dims) * np.asarray(self.spacing)

    def index_to_world(self, idx) -> np.ndarray:
        return np.asarray(idx, dtype=np.float64) * np.asarray(self.spacing) + np.asarray(self.origin)

    def world_to_index(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - np.asarray(self.origin)) / np.asarray(self.spacing)

    def world_points(self) -> np.ndarray:
        """World coordinates of every voxel center, shape (D, H, W, 3)"""
        axes = [o + s * np.arange(n) for n, s, o in zip(self.dims, self.spacing, self.origin)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        """World coordinates of the first and last voxel centers"""
        lo = np.asarray(self.origin)
        return lo, lo + (np.asarray(self.dims) - 1) * np.asarray(self.spacing)

    def center(self) -> np.ndarray:
        lo, hi = self.bounds()
        return 0.5 * (lo + hi)

    def contains(self, points, margin_voxels: float = 0.0) -> np.ndarray:
        """Mask of points inside the voxel-center box, optionally shrunk by a margin"""
        idx = self.world_to_index(points)
        n = np.asarray(self.dims)
        return np.all((idx >= margin_voxels) & (idx <= n - 1 - margin_voxels), axis=-1)

    def matches(self, other: "GridGeometry", atol: float = 1e-6) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, rtol=0, atol=atol)
            and np.allclose(self.origin, other.origin, rtol=0, atol=atol)
        )


@dataclass(eq=False)
class Volume3:
    """Scalar volume; data is exposed as a read-only view"""

    data: np.ndarray
    spacing: Vec3 = (1.0, 1.0, 1.0)
    origin: Vec3 = (0.0, 0.0, 0.0)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise VolumeSizeError(f"volume data must be 3D, got shape {arr.shape}")
        self.geometry = GridGeometry(arr.shape, self.spacing, self.origin)
        self.spacing = self.geometry.spacing
        self.origin = self.geometry.origin
        view = arr.view()
        view.flags.writeable = False
        self.data = view

    @classmethod
    def on_grid(cls, data, geometry: GridGeometry) -> "Volume3":
        data = np.asarray(data)
        if tuple(data.shape) != geometry.dims:
            raise VolumeSizeError(f"data shape {data.shape} does not match grid {geometry.dims}")
        return cls(data, geometry.spacing, geometry.origin)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.geometry.dims

    def with_data(self, data) -> "Volume3":
        """New volume on the same grid"""
        return Volume3.on_grid(data, self.geometry)

    def __repr__(self) -> str:
        return f"Volume3(dims={self.dims}, spacing={self.spacing}, origin={self.origin}, dtype={self.data.dtype})"


def _expand(w: np.ndarray, extra: int) -> np.ndarray:
    return w.reshape(w.shape + (1,) * extra) if extra else w


def _trilinear(data: np.ndarray, idx: np.ndarray, mode: str = "edge", gradient: bool = False):
    """
    Trilinear interpolation at continuous voxel indices.

    data may carry trailing channel axes after the three spatial ones. mode
    "edge" clamps to the border value; "zero" treats everything outside the
    lattice as zero. Returns values, plus derivatives with respect to the
    index coordinates (trailing axis of length 3) when gradient is set.
    """
    data = np.asarray(data)
    idx = np.asarray(idx, dtype=np.float64)
    n = np.asarray(data.shape[:3])
    extra = data.ndim - 3

    if mode == "edge":
        c = np.clip(idx, 0, n - 1)
        i0 = np.clip(np.floor(c).astype(np.intp), 0, np.maximum(n - 2, 0))
        f = c - i0
        i1 = np.minimum(i0 + 1, n - 1)
        valid = None
    elif mode == "zero":
        i0 = np.floor(idx).astype(np.intp)
        f = idx - i0
        i1 = i0 + 1
        valid = ((i0 >= 0) & (i0 < n), (i1 >= 0) & (i1 < n))
        i0 = np.clip(i0, 0, n - 1)
        i1 = np.clip(i1, 0, n - 1)
    else:
        raise DomainError(f"unknown sampling mode {mode!r}")

    corner = (i0, i1)
    weights = (1.0 - f, f)
    value = np.zeros(idx.shape[:-1] + data.shape[3:], dtype=np.float64)
    grad = np.zeros(value.shape + (3,), dtype=np.float64) if gradient else None

    for a in (0, 1):
        for b in (0, 1):
            for c_ in (0, 1):
                v = data[corner[a][..., 0], corner[b][..., 1], corner[c_][..., 2]].astype(np.float64)
                if valid is not None:
                    inside = valid[a][..., 0] & valid[b][..., 1] & valid[c_][..., 2]
                    v = v * _expand(inside, extra)
                w0, w1, w2 = weights[a][..., 0], weights[b][..., 1], weights[c_][..., 2]
                value += v * _expand(w0 * w1 * w2, extra)
                if gradient:
                    s0, s1, s2 = (1.0 if a else -1.0), (1.0 if b else -1.0), (1.0 if c_ else -1.0)
                    grad[..., 0] += v * _expand(s0 * w1 * w2, extra)
                    grad[..., 1] += v * _expand(w0 * s1 * w2, extra)
                    grad[..., 2] += v * _expand(w0 * w1 * s2, extra)

    if not gradient:
        return value
    if mode == "edge":
        outside = (idx < 0) | (idx > n - 1)
        grad = np.where(outside.reshape(idx.shape[:-1] + (1,) * extra + (3,)), 0.0, grad)
    return value, grad


SCIPY_MODES = {"edge": "nearest", "zero": "grid-constant"}


def map_linear(data: np.ndarray, idx, mode: str = "edge") -> np.ndarray:
    """
    Linear interpolation at continuous voxel indices (..., 3) via
    ndimage.map_coordinates. A single trailing channel axis on data is
    interpolated channel by channel.
    """
    if mode not in SCIPY_MODES:
        raise DomainError(f"unknown sampling mode {mode!r}")
    data = np.asarray(data, dtype=np.float64)
    idx = np.asarray(idx, dtype=np.float64)
    coords = idx.reshape(-1, 3).T
    channels = [data] if data.ndim == 3 else [data[..., c] for c in range(data.shape[3])]
    out = np.stack(
        [ndimage.map_coordinates(ch, coords, order=1, mode=SCIPY_MODES[mode], cval=0.0) for ch in channels],
        axis=-1,
    )
    return out.reshape(idx.shape[:-1] + data.shape[3:])


def sample_world(vol: Volume3, points, mode: str = "edge", gradient: bool = False):
    """
    Interpolate vol at world points (..., 3).

    With gradient=True also returns the spatial intensity gradient in
    value/mm, shape (..., 3).
    """
    idx = vol.geometry.world_to_index(points)
    if not gradient:
        return map_linear(vol.data, idx, mode)
    value, grad = _trilinear(vol.data, idx, mode, gradient=True)
    return value, grad / np.asarray(vol.spacing)


def trilinear_sample(vol: Volume3, p: Sequence[float]) -> float:
    """Intensity at a single world point, clamped to the border outside the volume"""
    return float(sample_world(vol, np.asarray(p, dtype=np.float64)[None, :])[0])


# MetaImage I/O
def _parse_header(lines: Sequence[str], source: Path) -> Dict[str, str]:
    header: Dict[str, str] = {}
    for line in lines:
        line = line.strip()
        if not line:
            continue
        if "=" not in line:
            raise VolumeFormatError(f"{source}: malformed header line {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        header[key] = value
    missing = [k for k in REQUIRED_KEYS if k not in header]
    if missing:
        raise VolumeFormatError(f"{source}: header missing {', '.join(missing)}")
    return header


def _check_metaimage(path: Path) -> None:
    """Header and payload checks ahead of the SimpleITK read, so each failure keeps its own error type"""
    blob = path.read_bytes()
    pos = blob.find(b"ElementDataFile")
    if pos < 0:
        raise VolumeFormatError(f"{path}: header missing ElementDataFile")
    eol = blob.find(b"\n", pos)
    header_end = len(blob) if eol < 0 else eol + 1
    try:
        header = _parse_header(blob[:header_end].decode("ascii").splitlines(), path)
    except UnicodeDecodeError:
        raise VolumeFormatError(f"{path}: header is not ASCII text")

    if header["NDims"] != "3":
        raise VolumeFormatError(f"{path}: NDims must be 3, got {header['NDims']}")
    if header["ElementType"] not in ELEMENT_TYPES:
        raise UnsupportedElementTypeError(f"{path}: unsupported ElementType {header['ElementType']}")
    try:
        dim_size = tuple(int(v) for v in header["DimSize"].split())
    except ValueError:
        raise VolumeFormatError(f"{path}: DimSize is not integral: {header['DimSize']!r}")
    if len(dim_size) != 3 or any(d <= 0 for d in dim_size):
        raise VolumeFormatError(f"{path}: DimSize needs 3 positive values, got {dim_size}")

    if header["ElementDataFile"] == "LOCAL":
        n_bytes = len(blob) - header_end
    else:
        raw_path = path.parent / header["ElementDataFile"]
        if not raw_path.is_file():
            raise VolumeFormatError(f"{path}: data file not found: {raw_path}")
        n_bytes = raw_path.stat().st_size
    if header.get("CompressedData", "False").lower() == "true":
        return
    itemsize = ELEMENT_TYPES[header["ElementType"]].itemsize
    expected = int(np.prod(dim_size)) * int(header.get("ElementNumberOfChannels", "1"))
    if n_bytes != expected * itemsize:
        raise VolumeSizeError(f"{path}: header declares {expected} values, payload holds {n_bytes / itemsize:g}")


def read_metaimage(path: Union[str, Path]) -> Tuple[np.ndarray, Vec3, Vec3]:
    """
    Read a .mhd/.raw pair or a single .mha file.

    Returns (data, spacing, origin) with data shaped (D, H, W) or
    (D, H, W, C) for multi-channel images, and spacing/origin in (d, h, w).
    """
    path = Path(path)
    if path.suffix.lower() == ".raw":
        path = path.with_suffix(".mhd")
    if not path.is_file():
        raise VolumeFormatError(f"volume file not found: {path}")
    _check_metaimage(path)

    try:
        image = sitk.ReadImage(str(path))
    except RuntimeError as e:
        raise VolumeFormatError(f"{path}: {e}")
    if not np.allclose(image.GetDirection(), np.eye(3).ravel()):
        logger.warning("%s has a non-identity direction matrix; it is ignored", path)
    data = sitk.GetArrayFromImage(image)
    return data, tuple(reversed(image.GetSpacing())), tuple(reversed(image.GetOrigin()))


def write_metaimage(path: Union[str, Path], data: np.ndarray, spacing: Vec3, origin: Vec3) -> Path:
    """Write data as MetaImage; .mha embeds the payload, anything else gets a .mhd/.raw pair"""
    path = Path(path)
    data = np.asarray(data)
    if data.dtype != np.int16:
        data = data.astype(np.float32)
    if path.suffix.lower() not in (".mha", ".mhd"):
        path = path.with_suffix(".mhd")

    image = sitk.GetImageFromArray(np.ascontiguousarray(data), isVector=data.ndim == 4)
    image.SetSpacing(tuple(float(v) for v in reversed(spacing)))
    image.SetOrigin(tuple(float(v) for v in reversed(origin)))
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        sitk.WriteImage(image, str(path))
    except RuntimeError as e:
        raise VolumeFormatError(f"cannot write {path}: {e}")
    return path


def load_volume(path: Union[str, Path], format: Optional[str] = None) -> Volume3:
    """Load a scalar volume; integer data keeps its HU values"""
    if format not in (None, "metaimage", "raw+header"):
        raise VolumeFormatError(f"unknown volume format {format!r}")
    data, spacing, origin = read_metaimage(path)
    if data.ndim != 3:
        raise VolumeFormatError(f"{path}: expected a scalar volume, found {data.shape[3]} channels")
    logger.debug("Loaded %s: dims=%s spacing=%s", path, data.shape, spacing)
    return Volume3(data, spacing, origin)


def save_volume(vol: Volume3, path: Union[str, Path]) -> Path:
    return write_metaimage(path, vol.data, vol.spacing, vol.origin)


# Resampling and intensity
def resample_to_spacing(vol: Volume3, target_spacing: Sequence[float]) -> Volume3:
    """Trilinear resample onto a new spacing; the world position of voxel 0 is kept"""
    target = tuple(float(s) for s in target_spacing)
    if len(target) != 3 or any(not s > 0 for s in target):
        raise DomainError(f"target spacing must be three positive values, got {target_spacing}")
    if target == vol.spacing:
        return Volume3(vol.data.copy(), vol.spacing, vol.origin)

    dims = tuple(max(1, int(round(e / t))) for e, t in zip(vol.geometry.extent, target))
    ratio = np.asarray(target) / np.asarray(vol.spacing)
    idx = np.moveaxis(np.indices(dims, dtype=np.float64), 0, -1) * ratio
    out_dtype = np.float64 if vol.data.dtype == np.float64 else np.float32
    data = map_linear(vol.data, idx, "edge").astype(out_dtype)
    logger.debug("Resampled %s -> %s at spacing %s", vol.dims, dims, target)
    return Volume3(data, target, vol.origin)


def window_and_normalize(vol: Volume3, lo: float, hi: float) -> Volume3:
    """Map [lo, hi] linearly onto [0, 1] and clamp"""
    if not lo < hi:
        raise DomainError(f"window lower bound {lo} must be below upper bound {hi}")
    scaled = (vol.data.astype(np.float64) - lo) / (hi - lo)
    return vol.with_data(np.clip(scaled, 0.0, 1.0).astype(np.float32))


def crop_patch(vol: Volume3, start: Sequence[int], patch_dims: Sequence[int]) -> Volume3:
    start = np.asarray(start, dtype=np.intp)
    size = np.asarray(patch_dims, dtype=np.intp)
    if np.any(start < 0) or np.any(size <= 0) or np.any(start + size > np.asarray(vol.dims)):
        raise OutOfBoundsError(f"crop start={tuple(start)} size={tuple(size)} exceeds volume {vol.dims}")
    sl = tuple(slice(s, s + n) for s, n in zip(start, size))
    origin = vol.geometry.index_to_world(start)
    return Volume3(vol.data[sl].copy(), vol.spacing, tuple(origin))


def pad_volume(vol: Volume3, pad: Sequence[Tuple[int, int]]) -> Volume3:
    """Edge-replicate padding; the origin moves so existing voxels keep their world positions"""
    pad = [(int(a), int(b)) for a, b in pad]
    data = np.pad(vol.data, pad, mode="edge")
    origin = vol.geometry.index_to_world([-a for a, _ in pad])
    return Volume3(data, vol.spacing, tuple(origin))


def gaussian_smooth(vol: Volume3, sigma_mm: Union[float, Sequence[float]]) -> Volume3:
    sigma = np.broadcast_to(np.asarray(sigma_mm, dtype=np.float64), (3,)) / np.asarray(vol.spacing)
    data = ndimage.gaussian_filter(vol.data.astype(np.float64), sigma=sigma, mode="nearest")
    out_dtype = np.float64 if vol.data.dtype == np.float64 else np.float32
    return vol.with_data(data.astype(out_dtype))
