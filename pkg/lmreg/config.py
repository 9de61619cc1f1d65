"""
Experiment configuration for lmreg.

Configuration lives in a flat key=value text file with section prefixes:

    seed = 7
    sim.translation_range = 12
    net.patch_dims = 24 48 48
    reg.MaximumNumberOfIterations = 300 600 900 1200

Registration keys accept the parameter-map vocabulary (MaximumNumberOfIterations,
SP_a, Metric2Weight, ...) as well as the snake_case field names. Runtime knobs that
should not change results (threads, log level, results service URL) come from the
environment instead.
"""

import hashlib
import json
import os
from pathlib import Path
from typing import Any, Dict, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from lmreg.errors import ConfigError

# Configuration from environment
LMREG_THREADS = max(1, int(os.getenv("LMREG_THREADS", "1")))
LMREG_LOG_LEVEL = os.getenv("LMREG_LOG_LEVEL", "INFO").upper()
LMREG_RESULTS_URL = os.getenv("LMREG_RESULTS_URL", "")

Range = Tuple[float, float]
TRANSFORM_KINDS = ("translation", "rotation", "scale", "elastic")
LOSS_VARIANTS = ("hinge", "ce", "hinge-ce", "hinge01-ce", "hinge02-ce")


def _as_tuple(value: Any) -> Any:
    """Wrap scalars so that single-token config values fill tuple fields"""
    if isinstance(value, (list, tuple)):
        return tuple(value)
    return (value,)


def _check_range(name: str, value: Range, positive: bool = False) -> Range:
    lo, hi = value
    if lo > hi:
        raise ValueError(f"{name}: low {lo} exceeds high {hi}")
    if lo < 0 or (positive and lo <= 0):
        raise ValueError(f"{name}: bounds must be {'positive' if positive else 'non-negative'}")
    return value


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True, frozen=True)


class VolumeConfig(_Section):
    """Intensity window and working spacing"""

    window_lo: float = Field(default=-100.0, description="Lower HU bound of the intensity window")
    window_hi: float = Field(default=300.0, description="Upper HU bound of the intensity window")
    spacing: Tuple[float, float, float] = Field(default=(2.0, 2.0, 2.0), description="Working spacing in mm (d, h, w)")

    @field_validator("spacing", mode="before")
    @classmethod
    def _wrap_scalars(cls, v):
        return _as_tuple(v)

    @field_validator("spacing")
    @classmethod
    def _positive_spacing(cls, v):
        if any(s <= 0 for s in v):
            raise ValueError("spacing components must be > 0")
        return v

    @model_validator(mode="after")
    def _window_order(self):
        if self.window_lo >= self.window_hi:
            raise ValueError("window_lo must be below window_hi")
        return self


class DeformationConfig(_Section):
    """Ranges for simulated training and evaluation deformations"""

    translation_range: float = Field(default=12.0, ge=0, description="Translation drawn from U(-r, r) mm per axis")
    rotation_range: float = Field(default=20.0, ge=0, description="Rotation drawn from U(-r, r) degrees per axis")
    scale_range: Range = Field(default=(0.9, 1.1), description="Isotropic scale bounds")
    bump_magnitude_range: Range = Field(default=(2.0, 24.0), description="Gaussian bump peak magnitude in mm")
    bump_sigma_range: Range = Field(default=(64.0, 128.0), description="Gaussian bump width in mm")
    small_dvf_max: Range = Field(default=(1.0, 12.0), description="Per-axis amplitude bound of the random field in mm")
    small_dvf_smoothing_sigma: float = Field(default=8.0, ge=0, description="Gaussian smoothing of the random field in mm")
    rng_algorithm: Literal["PCG64", "Philox", "SFC64"] = Field(default="PCG64", description="numpy bit generator")
    transform_kinds: Tuple[str, ...] = Field(default=TRANSFORM_KINDS, description="Training transform kinds")
    margin_voxels: int = Field(default=8, ge=0, description="Extra simulation border around training patches")
    inversion_tol: float = Field(default=0.01, gt=0, description="Fixed-point inversion tolerance in mm")
    inversion_max_iter: int = Field(default=100, gt=0, description="Fixed-point inversion iteration cap")

    @field_validator("transform_kinds", mode="before")
    @classmethod
    def _wrap_scalars(cls, v):
        return _as_tuple(v)

    @field_validator("scale_range", "bump_sigma_range")
    @classmethod
    def _positive_range(cls, v, info):
        return _check_range(info.field_name, v, positive=True)

    @field_validator("bump_magnitude_range", "small_dvf_max")
    @classmethod
    def _nonneg_range(cls, v, info):
        return _check_range(info.field_name, v)

    @field_validator("transform_kinds")
    @classmethod
    def _known_kinds(cls, v):
        unknown = [k for k in v if k not in TRANSFORM_KINDS]
        if unknown or not v:
            raise ValueError(f"transform_kinds must be drawn from {TRANSFORM_KINDS}, got {v}")
        return v


class NetworkConfig(_Section):
    """Siamese matcher architecture and sampling"""

    levels: int = Field(default=3, ge=2, description="Number of encoder levels")
    base_channels: int = Field(default=8, gt=0, description="Channels at the first level, doubled per level")
    K: int = Field(default=64, gt=0, description="Landmarks sampled per patch during training")
    patch_dims: Tuple[int, int, int] = Field(default=(24, 48, 48), description="Patch size in voxels (d, h, w)")
    inference_threshold: float = Field(default=0.5, gt=0, lt=1, description="Landmark probability threshold")
    gt_radius_voxels: float = Field(default=2.0, ge=0, description="Ground-truth match radius in voxels")
    inference_max_landmarks: int = Field(default=512, gt=0, description="Per-tile landmark cap at inference")
    dedup_radius_voxels: float = Field(default=1.0, ge=0, description="Duplicate suppression radius after stitching")

    @field_validator("patch_dims", mode="before")
    @classmethod
    def _wrap_scalars(cls, v):
        return _as_tuple(v)

    @model_validator(mode="after")
    def _divisible_patch(self):
        step = 2 ** self.levels
        if any(p <= 0 or p % step for p in self.patch_dims):
            raise ValueError(f"patch_dims {self.patch_dims} must be positive multiples of {step}")
        return self

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level

    @property
    def descriptor_length(self) -> int:
        return self.channels(self.levels - 2) + self.channels(self.levels - 1)


class TrainConfig(_Section):
    """Optimizer and loop settings for self-supervised training"""

    variant: Literal["hinge", "ce", "hinge-ce", "hinge01-ce", "hinge02-ce"] = Field(default="ce")
    steps: int = Field(default=2000, ge=0)
    lr: float = Field(default=1e-4, gt=0, description="Adam learning rate")
    weight_decay: float = Field(default=1e-4, ge=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    eps: float = Field(default=1e-8, gt=0)
    decoupled_weight_decay: bool = Field(default=True, description="False applies coupled L2 through the gradient")
    log_every: int = Field(default=50, gt=0)
    smoothing_window: int = Field(default=20, gt=0)
    max_empty_positive_steps: int = Field(default=100, gt=0, description="Consecutive steps without positives before aborting")


class RegistrationConfig(_Section):
    """Affine and B-spline registration parameters (parameter-map names as aliases)"""

    metric0_weight: float = Field(default=1.0, ge=0, alias="Metric0Weight")
    metric1_weight: float = Field(default=1.0, ge=0, alias="Metric1Weight")
    metric2_weight: float = Field(default=0.01, ge=0, alias="Metric2Weight")
    resolutions: int = Field(default=4, gt=0, alias="NumberOfResolutions")
    iterations: Tuple[int, ...] = Field(default=(300, 600, 900, 1200), alias="MaximumNumberOfIterations")
    spatial_samples: int = Field(default=5000, gt=0, alias="NumberOfSpatialSamples")
    histogram_bins: Tuple[int, ...] = Field(default=(32, 32, 32, 32), alias="NumberOfHistogramBins")
    final_grid_spacing: float = Field(default=8.0, gt=0, alias="FinalGridSpacingInPhysicalUnits")
    gain_a: Tuple[float, ...] = Field(default=(35000.0, 30000.0, 25000.0, 20000.0), alias="SP_a")
    gain_A: Tuple[float, ...] = Field(default=(100.0, 200.0, 300.0, 400.0), alias="SP_A")
    gain_alpha: float = Field(default=0.602, gt=0, alias="SP_alpha")
    max_step_length: float = Field(default=1.0, gt=0, alias="MaximumStepLength",
                                   description="Per-iteration control point update cap in mm")
    intensity_percentiles: Tuple[float, float] = Field(default=(0.1, 99.9))

    affine_iterations: int = Field(default=1024, ge=0)
    affine_spatial_samples: int = Field(default=4096, gt=0)
    affine_resolutions: int = Field(default=4, gt=0)
    affine_gain_a: float = Field(default=1.0, gt=0, description="First-step length scale in mm")
    affine_gain_A: float = Field(default=20.0, ge=0)
    affine_gain_alpha: float = Field(default=0.602, gt=0)

    @field_validator(
        "iterations", "histogram_bins", "gain_a", "gain_A", "intensity_percentiles", mode="before"
    )
    @classmethod
    def _wrap_scalars(cls, v):
        return _as_tuple(v)

    @model_validator(mode="after")
    def _expand_levels(self):
        n = self.resolutions
        for name in ("iterations", "histogram_bins", "gain_a", "gain_A"):
            value = getattr(self, name)
            if len(value) == 1:
                object.__setattr__(self, name, value * n)
            elif len(value) != n:
                raise ValueError(f"{name} has {len(value)} entries for {n} resolutions")
        if any(b < 6 for b in self.histogram_bins):
            raise ValueError("histogram_bins must be at least 6 per level")
        if any(i < 0 for i in self.iterations):
            raise ValueError("iterations must be non-negative")
        lo, hi = self.intensity_percentiles
        if not 0 <= lo < hi <= 100:
            raise ValueError("intensity_percentiles must satisfy 0 <= lo < hi <= 100")
        return self


class EvalConfig(_Section):
    """Evaluation bins and thresholds"""

    deformation_bin_edges: Tuple[float, ...] = Field(default=tuple(float(v) for v in range(0, 26, 2)))
    error_threshold: float = Field(default=4.0, gt=0, description="Accurate-match threshold in mm")
    cdf_bin_edges: Tuple[float, ...] = Field(default=tuple(float(v) for v in range(0, 42, 2)))
    n_eval_points: int = Field(default=100, gt=0, description="Random target points per simulated pair")

    @field_validator("deformation_bin_edges", "cdf_bin_edges", mode="before")
    @classmethod
    def _wrap_scalars(cls, v):
        return _as_tuple(v)

    @field_validator("deformation_bin_edges", "cdf_bin_edges")
    @classmethod
    def _increasing(cls, v):
        if len(v) < 2 or any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("bin edges must be strictly increasing with at least two entries")
        return v


class ExperimentConfig(BaseModel):
    """Full experiment configuration"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    seed: int = Field(default=0, ge=0)
    vol: VolumeConfig = Field(default_factory=VolumeConfig)
    sim: DeformationConfig = Field(default_factory=DeformationConfig)
    net: NetworkConfig = Field(default_factory=NetworkConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    reg: RegistrationConfig = Field(default_factory=RegistrationConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)


SECTIONS = ("vol", "sim", "net", "train", "reg", "eval")


def _parse_token(token: str) -> Union[bool, int, float, str]:
    lowered = token.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    for cast in (int, float):
        try:
            return cast(token)
        except ValueError:
            pass
    return token


def _parse_value(raw: str) -> Any:
    raw = raw.strip()
    if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "\"'":
        return raw[1:-1]
    tokens = [t.strip("\"'") for t in raw.split()]
    if not tokens:
        raise ConfigError("empty value")
    values = [_parse_token(t) for t in tokens]
    return values[0] if len(values) == 1 else tuple(values)


def parse_config_text(text: str, overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """Parse key=value text into an ExperimentConfig"""
    data: Dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        try:
            value = _parse_value(raw)
        except ConfigError as e:
            raise ConfigError(f"line {lineno}: {e}") from e
        if "." not in key:
            data[key] = value
            continue
        section, name = key.split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(f"line {lineno}: unknown section {section!r}")
        data.setdefault(section, {})[name] = value

    for key, value in (overrides or {}).items():
        if "." in key:
            section, name = key.split(".", 1)
            data.setdefault(section, {})[name] = value
        else:
            data[key] = value

    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def load_config(path: Optional[Union[str, Path]] = None, overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """Load a config file; None yields the defaults plus overrides"""
    if path is None:
        return parse_config_text("", overrides)
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(), overrides)


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return " ".join(_format_value(v) for v in value)
    return str(value)


def dump_config(cfg: ExperimentConfig) -> str:
    """Render the config back to key=value text"""
    lines = [f"seed = {cfg.seed}"]
    for section in SECTIONS:
        for name, value in getattr(cfg, section).model_dump(mode="json").items():
            lines.append(f"{section}.{name} = {_format_value(value)}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: ExperimentConfig) -> str:
    """SHA-256 of the canonical JSON form"""
    canonical = json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
