"""
Siamese landmark matcher.

Two weight-shared CNN branches map a target and a source patch to landmark
probability maps and multi-level feature maps. A parameter-free sampling
step picks landmark voxels (top-K while training, thresholded at
inference), descriptors are read from the feature maps of the two deepest
encoder levels, and a small fully connected head scores descriptor pairs.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from lmreg import tensorcore as tc
from lmreg.config import ExperimentConfig, NetworkConfig, dump_config, parse_config_text
from lmreg.deform_sim import DenseDVF, invert_dvf, sample_training_dvf, warp_volume
from lmreg.errors import (
    CheckpointFormatError,
    ConfigError,
    DomainError,
    GridMismatchError,
    InversionError,
    NonFiniteError,
    OutOfBoundsError,
    ShapeError,
    TableFormatError,
)
from lmreg.volume import GridGeometry, Volume3, crop_patch, pad_volume

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossVariant:
    """Descriptor loss recipe; m_pos only matters when a hinge term is present"""

    kind: str
    m_pos: float = 0.0
    m_neg: float = 1.0

    def __post_init__(self):
        if not self.m_pos < self.m_neg:
            raise DomainError(f"m_pos {self.m_pos} must be below m_neg {self.m_neg}")

    @property
    def uses_hinge(self) -> bool:
        return self.kind.startswith("hinge")

    @property
    def uses_ce(self) -> bool:
        return self.kind.endswith("ce")

    @property
    def match_mode(self) -> str:
        return "ce" if self.uses_ce else "hinge"

    @property
    def score_threshold(self) -> float:
        """Mutual-best acceptance: probability 0.5, or exp(-d^2) with d^2 < 0.5 for hinge scores"""
        return 0.5 if self.uses_ce else math.exp(-0.5)

    @classmethod
    def from_name(cls, name: str) -> "LossVariant":
        try:
            return LOSS_VARIANTS[name]
        except KeyError:
            raise ConfigError(f"unknown loss variant {name!r}; choose from {', '.join(LOSS_VARIANTS)}")


LOSS_VARIANTS: Dict[str, LossVariant] = {
    "hinge": LossVariant("hinge", 0.0),
    "ce": LossVariant("ce", 0.0),
    "hinge-ce": LossVariant("hinge-ce", 0.0),
    "hinge01-ce": LossVariant("hinge01-ce", 0.1),
    "hinge02-ce": LossVariant("hinge02-ce", 0.2),
}


@dataclass
class BranchOutput:
    prob: tc.Tensor
    features: List[tc.Tensor]
    feature_levels: Tuple[int, int]


class SiameseMatcher:
    """Parameter set and forward pass of the shared branch plus the matching head"""

    def __init__(self, cfg: NetworkConfig, params: Dict[str, tc.Tensor]):
        self.cfg = cfg
        self.params = params
        expected = self.parameter_shapes(cfg)
        if set(expected) != set(params):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise CheckpointFormatError(f"parameter mismatch: missing={missing} unexpected={extra}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise CheckpointFormatError(f"{name}: shape {params[name].shape}, expected {shape}")

    @staticmethod
    def parameter_shapes(cfg: NetworkConfig) -> Dict[str, Tuple[int, ...]]:
        c = cfg.channels
        shapes: Dict[str, Tuple[int, ...]] = {}

        def conv(prefix: str, cout: int, cin: int, k: int = 3):
            shapes[f"{prefix}.weight"] = (cout, cin, k, k, k)
            shapes[f"{prefix}.bias"] = (cout,)

        for level in range(cfg.levels):
            conv(f"enc{level}.conv1", c(level), 1 if level == 0 else c(level - 1))
            conv(f"enc{level}.conv2", c(level), c(level))
        for level in range(cfg.levels - 2, -1, -1):
            conv(f"dec{level}.conv1", c(level), c(level + 1) + c(level))
            conv(f"dec{level}.conv2", c(level), c(level))
        conv("head", 1, c(0), k=1)
        f = cfg.descriptor_length
        shapes["desc.fc1.weight"] = (f, f)
        shapes["desc.fc1.bias"] = (f,)
        shapes["desc.fc2.weight"] = (1, f)
        shapes["desc.fc2.bias"] = (1,)
        return shapes

    @classmethod
    def initialize(cls, cfg: NetworkConfig, rng: np.random.Generator) -> "SiameseMatcher":
        """He-normal weights, zero biases"""
        params: Dict[str, tc.Tensor] = {}
        for name, shape in cls.parameter_shapes(cfg).items():
            if name.endswith(".bias"):
                params[name] = tc.Tensor(np.zeros(shape), requires_grad=True, name=name)
            else:
                fan_in = int(np.prod(shape[1:]))
                params[name] = tc.he_init(shape, fan_in, rng, name=name)
        return cls(cfg, params)

    def head_parameters(self) -> Dict[str, tc.Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith("desc.")}

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def save(self, path: Union[str, Path], config: Optional[ExperimentConfig] = None) -> Path:
        echo = dump_config(config if config is not None else ExperimentConfig(net=self.cfg))
        return tc.save_checkpoint(path, self.snapshot(), echo)

    @classmethod
    def load(cls, path: Union[str, Path]) -> Tuple["SiameseMatcher", ExperimentConfig]:
        arrays, echo = tc.load_checkpoint(path)
        try:
            config = parse_config_text(echo)
        except ConfigError as e:
            raise CheckpointFormatError(f"{path}: unreadable config echo: {e}") from e
        params = {k: tc.Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}
        return cls(config.net, params), config

    def _block(self, prefix: str, x: tc.Tensor) -> tc.Tensor:
        p = self.params
        x = tc.relu(tc.conv3d(x, p[f"{prefix}.conv1.weight"], p[f"{prefix}.conv1.bias"]))
        return tc.relu(tc.conv3d(x, p[f"{prefix}.conv2.weight"], p[f"{prefix}.conv2.bias"]))

    def forward_branch(self, patch: Union[Volume3, np.ndarray], enforce_dims: bool = True) -> BranchOutput:
        """Probability map (1, 1, D, H, W) and the two deepest encoder feature maps"""
        data = patch.data if isinstance(patch, Volume3) else np.asarray(patch)
        if data.ndim != 3:
            raise ShapeError(f"branch input must be 3D, got {data.shape}")
        if enforce_dims and tuple(data.shape) != self.cfg.patch_dims:
            raise ShapeError(f"patch dims {data.shape} do not match configured {self.cfg.patch_dims}")
        step = 2 ** (self.cfg.levels - 1)
        if any(n % step for n in data.shape):
            raise ShapeError(f"branch input dims {data.shape} must be multiples of {step}")

        x = tc.Tensor(data[None, None])
        encoded = []
        for level in range(self.cfg.levels):
            if level:
                x = tc.maxpool3d(x)
            x = self._block(f"enc{level}", x)
            encoded.append(x)
        for level in range(self.cfg.levels - 2, -1, -1):
            x = tc.concat_channels(tc.upsample_trilinear(x, 2), encoded[level])
            x = self._block(f"dec{level}", x)
        prob = tc.sigmoid(tc.conv3d(x, self.params["head.weight"], self.params["head.bias"], padding=0))
        levels = (self.cfg.levels - 2, self.cfg.levels - 1)
        return BranchOutput(prob, [encoded[levels[0]], encoded[levels[1]]], levels)

    def match_probabilities(self, desc_a: tc.Tensor, desc_b: tc.Tensor, mode: str) -> tc.Tensor:
        """
        Pair scores (K_target, K_source).

        "ce": learned head on |f_i - f_j|, sigmoid output.
        "hinge": exp(-||f_i - f_j||^2), no parameters involved.
        """
        if desc_a.ndim != 2 or desc_b.ndim != 2 or desc_a.shape[1] != desc_b.shape[1]:
            raise ShapeError(f"descriptor shapes {desc_a.shape} and {desc_b.shape} do not conform")
        if mode == "hinge":
            return tc.exp(-tc.pairwise_l2sq(desc_a, desc_b))
        if mode != "ce":
            raise DomainError(f"unknown match mode {mode!r}")
        k1, k2, f = desc_a.shape[0], desc_b.shape[0], desc_a.shape[1]
        pairs = tc.reshape(tc.pairwise_absdiff(desc_a, desc_b), (k1 * k2, f))
        p = self.params
        hidden = tc.relu(tc.linear(pairs, p["desc.fc1.weight"], p["desc.fc1.bias"]))
        out = tc.sigmoid(tc.linear(hidden, p["desc.fc2.weight"], p["desc.fc2.bias"]))
        return tc.reshape(out, (k1, k2))


def receptive_field_margin(cfg: NetworkConfig) -> int:
    """
    Voxels beyond which a patch border cannot change a probability or
    descriptor value. Sums the reach of every conv, pool and upsample on
    the way down and back up, plus the descriptor upsampling.
    """
    margin = 0
    for level in range(cfg.levels):
        margin += 2 * 2 ** level
    for level in range(cfg.levels - 1):
        margin += 2 ** level + 2 ** (level + 1) + 2 * 2 ** level
    return margin + 2 ** (cfg.levels - 1)


# Sampling layer
@dataclass
class LandmarkSet:
    indices: np.ndarray
    probabilities: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)


def _prob_array(prob_map) -> np.ndarray:
    data = prob_map.data if isinstance(prob_map, (tc.Tensor, Volume3)) else np.asarray(prob_map)
    data = np.asarray(data)
    while data.ndim > 3:
        data = data[0]
    return data


def sample_topk(prob_map, K: int) -> LandmarkSet:
    """K most probable voxels; equal probabilities keep the lower linear index first"""
    p = _prob_array(prob_map)
    if K > p.size or K < 0:
        raise DomainError(f"K={K} exceeds the {p.size} available voxels")
    order = np.argsort(-p.reshape(-1), kind="stable")[:K]
    idx = np.stack(np.unravel_index(order, p.shape), axis=-1)
    return LandmarkSet(idx, p.reshape(-1)[order])


def sample_threshold(prob_map, theta: float = 0.5) -> LandmarkSet:
    """All voxels with probability above theta, in linear index order"""
    if not 0 < theta < 1:
        raise DomainError(f"threshold must lie in (0, 1), got {theta}")
    p = _prob_array(prob_map)
    flat = np.flatnonzero(p.reshape(-1) > theta)
    idx = np.stack(np.unravel_index(flat, p.shape), axis=-1) if flat.size else np.zeros((0, 3), dtype=np.intp)
    return LandmarkSet(idx, p.reshape(-1)[flat])


def build_descriptors(branch: BranchOutput, landmarks: Union[LandmarkSet, np.ndarray]) -> tc.Tensor:
    """Upsample both feature maps to patch resolution and concatenate their vectors at each landmark"""
    idx = landmarks.indices if isinstance(landmarks, LandmarkSet) else np.asarray(landmarks)
    dims = branch.prob.shape[2:]
    idx = np.asarray(idx, dtype=np.intp).reshape(-1, 3)
    if idx.size and (np.any(idx < 0) or np.any(idx >= np.asarray(dims))):
        raise OutOfBoundsError("landmark outside the patch")
    parts = []
    for fmap, level in zip(branch.features, branch.feature_levels):
        parts.append(tc.gather_voxels(tc.upsample_trilinear(fmap, 2 ** level), idx))
    return tc.concat(parts, axis=1)


# Ground truth and losses
@dataclass
class MatchGroundTruth:
    c: np.ndarray
    k_pos: int
    k_neg: int
    hit_target: np.ndarray
    hit_source: np.ndarray
    unresolved: int = 0


def make_ground_truth(
    lm_target: Union[LandmarkSet, np.ndarray],
    lm_source: Union[LandmarkSet, np.ndarray],
    D: DenseDVF,
    target_grid: GridGeometry,
    source_grid: GridGeometry,
    radius: float,
    tol: float = 0.01,
    max_iter: int = 100,
    strict: bool = False,
) -> MatchGroundTruth:
    """
    c_ij = 1 when target landmark i, carried into source space by inverting D,
    lies within radius (mm) of source landmark j.

    Target landmarks whose inversion fails get an all-zero row, unless strict.
    """
    t_idx = lm_target.indices if isinstance(lm_target, LandmarkSet) else np.asarray(lm_target)
    s_idx = lm_source.indices if isinstance(lm_source, LandmarkSet) else np.asarray(lm_source)
    t_world = target_grid.index_to_world(np.asarray(t_idx).reshape(-1, 3))
    s_world = source_grid.index_to_world(np.asarray(s_idx).reshape(-1, 3))
    inv = invert_dvf(D, t_world, tol, max_iter) if len(t_world) else None
    if inv is None:
        c = np.zeros((0, len(s_world)), dtype=np.uint8)
        unresolved = 0
    else:
        unresolved = int((~inv.converged).sum())
        if unresolved and strict:
            raise InversionError(
                f"{unresolved} target landmarks could not be projected",
                residual=float(inv.residual[~inv.converged].max()),
            )
        c = (cdist(inv.points, s_world) <= radius) if len(s_world) else np.zeros((len(t_world), 0), dtype=bool)
        c[~inv.converged] = False
        c = c.astype(np.uint8)
    k_pos = int(c.sum())
    return MatchGroundTruth(c, k_pos, int(c.size - k_pos), c.any(axis=1), c.any(axis=0), unresolved)


def landmark_probability_loss(prob_map: tc.Tensor, landmarks: Union[LandmarkSet, np.ndarray], gt_hit) -> tc.Tensor:
    """Mean BCE of the sampled probabilities against hit / no-hit targets"""
    idx = landmarks.indices if isinstance(landmarks, LandmarkSet) else np.asarray(landmarks)
    idx = np.asarray(idx, dtype=np.intp).reshape(-1, 3)
    hit = np.asarray(gt_hit, dtype=np.float64).reshape(-1)
    if len(hit) != len(idx):
        raise ShapeError(f"{len(hit)} hit labels for {len(idx)} landmarks")
    probs = tc.reshape(tc.gather_voxels(prob_map, idx), (len(idx),))
    return tc.bce(probs, hit)


def descriptor_hinge_loss(desc_a: tc.Tensor, desc_b: tc.Tensor, gt: MatchGroundTruth,
                          m_pos: float = 0.0, m_neg: float = 1.0) -> tc.Tensor:
    """
    Positive pairs pay max(0, d^2 - m_pos) / K_pos, negative pairs
    max(0, m_neg - d^2) / K_neg. An empty class contributes nothing.
    """
    if not m_pos < m_neg:
        raise DomainError(f"m_pos {m_pos} must be below m_neg {m_neg}")
    d2 = tc.pairwise_l2sq(desc_a, desc_b)
    c = gt.c.astype(np.float64)
    total = tc.Tensor(0.0)
    if gt.k_pos:
        total = total + (tc.relu(d2 - m_pos) * c).sum() * (1.0 / gt.k_pos)
    else:
        logger.warning("No positive descriptor pairs; skipping positive hinge term")
    if gt.k_neg:
        total = total + (tc.relu(m_neg - d2) * (1.0 - c)).sum() * (1.0 / gt.k_neg)
    else:
        logger.warning("No negative descriptor pairs; skipping negative hinge term")
    return total


def descriptor_ce_loss(match_probs: tc.Tensor, gt: MatchGroundTruth) -> tc.Tensor:
    """Class-balanced BCE: positives weighted by K_neg / K, negatives by K_pos / K"""
    k = gt.k_pos + gt.k_neg
    if k == 0:
        raise DomainError("descriptor CE loss needs at least one pair")
    return tc.bce(match_probs, gt.c, pos_weight=gt.k_neg / k, neg_weight=gt.k_pos / k)


@dataclass
class LossParts:
    prob_target: Optional[tc.Tensor] = None
    prob_source: Optional[tc.Tensor] = None
    hinge: Optional[tc.Tensor] = None
    ce: Optional[tc.Tensor] = None


def total_loss(variant: LossVariant, parts: LossParts) -> tc.Tensor:
    """Both landmark probability terms plus the variant's descriptor terms, unit weights"""
    needed = {"prob_target": True, "prob_source": True, "hinge": variant.uses_hinge, "ce": variant.uses_ce}
    missing = [k for k, want in needed.items() if want and getattr(parts, k) is None]
    if missing:
        raise DomainError(f"variant {variant.kind} is missing loss parts: {', '.join(missing)}")
    loss = parts.prob_target + parts.prob_source
    if variant.uses_hinge:
        loss = loss + parts.hinge
    if variant.uses_ce:
        loss = loss + parts.ce
    return loss


# Training
@dataclass
class TrainResult:
    matcher: SiameseMatcher
    losses: List[float] = field(default_factory=list)

    def smoothed(self, window: int = 20) -> np.ndarray:
        return smooth_losses(self.losses, window)


def smooth_losses(losses: Sequence[float], window: int = 20) -> np.ndarray:
    values = np.asarray(losses, dtype=np.float64)
    if len(values) < window:
        return np.array([values.mean()]) if len(values) else values
    return np.convolve(values, np.ones(window) / window, mode="valid")


def _training_region(vol: Volume3, size: np.ndarray, rng: np.random.Generator) -> Volume3:
    short = np.maximum(size - np.asarray(vol.dims), 0)
    if short.any():
        vol = pad_volume(vol, [(int(s // 2), int(s - s // 2)) for s in short])
    start = rng.integers(0, np.asarray(vol.dims) - size + 1)
    return crop_patch(vol, start, size)


def training_step_loss(
    matcher: SiameseMatcher,
    variant: LossVariant,
    target: Volume3,
    source: Volume3,
    D: DenseDVF,
    config: ExperimentConfig,
) -> Tuple[tc.Tensor, MatchGroundTruth]:
    """Forward both branches, sample top-K, build ground truth and the variant's loss"""
    net = config.net
    out_t = matcher.forward_branch(target)
    out_s = matcher.forward_branch(source)
    lm_t = sample_topk(out_t.prob, net.K)
    lm_s = sample_topk(out_s.prob, net.K)
    desc_t = build_descriptors(out_t, lm_t)
    desc_s = build_descriptors(out_s, lm_s)
    radius = net.gt_radius_voxels * min(target.spacing)
    gt = make_ground_truth(lm_t, lm_s, D, target.geometry, source.geometry, radius,
                           config.sim.inversion_tol, config.sim.inversion_max_iter)
    parts = LossParts(
        prob_target=landmark_probability_loss(out_t.prob, lm_t, gt.hit_target),
        prob_source=landmark_probability_loss(out_s.prob, lm_s, gt.hit_source),
    )
    if variant.uses_hinge:
        parts.hinge = descriptor_hinge_loss(desc_t, desc_s, gt, variant.m_pos, variant.m_neg)
    if variant.uses_ce:
        parts.ce = descriptor_ce_loss(matcher.match_probabilities(desc_t, desc_s, "ce"), gt)
    return total_loss(variant, parts), gt


def train(
    volumes: Sequence[Volume3],
    config: ExperimentConfig,
    rng: np.random.Generator,
    steps: Optional[int] = None,
    matcher: Optional[SiameseMatcher] = None,
) -> TrainResult:
    """
    Self-supervised training on simulated pairs.

    Each step crops a region (patch plus simulation margin), deforms it with
    one randomly chosen transform kind, and trains on the centered patch pair.
    """
    if not volumes:
        raise ConfigError("training needs at least one volume")
    net, sim, opt = config.net, config.sim, config.train
    variant = LossVariant.from_name(opt.variant)
    steps = opt.steps if steps is None else steps
    matcher = matcher or SiameseMatcher.initialize(net, rng)
    state = tc.AdamState(opt.lr, opt.weight_decay, opt.beta1, opt.beta2, opt.eps, opt.decoupled_weight_decay)
    patch = np.asarray(net.patch_dims)
    margin = sim.margin_voxels
    result = TrainResult(matcher)
    empty_run = 0

    for step in range(1, steps + 1):
        vol = volumes[int(rng.integers(len(volumes)))]
        region = _training_region(vol, patch + 2 * margin, rng)
        kind = sim.transform_kinds[int(rng.integers(len(sim.transform_kinds)))]
        D = sample_training_dvf(rng, sim, region.geometry, kind)
        warped = warp_volume(region, D)
        target = crop_patch(region, (margin,) * 3, patch)
        source = crop_patch(warped, (margin,) * 3, patch)

        matcher.zero_grad()
        try:
            loss, gt = training_step_loss(matcher, variant, target, source, D, config)
            tc.backward(loss)
        except NonFiniteError:
            logger.error("Non-finite values at step %d (transform=%s, last losses=%s)",
                         step, kind, result.losses[-5:])
            raise
        value = loss.item()
        if not np.isfinite(value):
            raise NonFiniteError(f"loss became {value} at step {step}")
        tc.adam_step(matcher.params, None, state)
        result.losses.append(value)

        empty_run = empty_run + 1 if gt.k_pos == 0 else 0
        if empty_run > opt.max_empty_positive_steps:
            raise ConfigError(
                f"no positive landmark pairs for {empty_run} consecutive steps; "
                "increase net.gt_radius_voxels or net.K"
            )
        if step % opt.log_every == 0 or step == steps:
            recent = result.losses[-opt.smoothing_window:]
            logger.info("step %5d/%d  loss %.4f  (mean of last %d: %.4f)  K_pos=%d",
                        step, steps, value, len(recent), float(np.mean(recent)), gt.k_pos)
    return result


# Inference
@dataclass
class CorrespondenceSet:
    """Paired world points (mm, (d, h, w)) with match scores"""

    target: np.ndarray
    source: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=np.float64).reshape(-1, 3)
        self.source = np.asarray(self.source, dtype=np.float64).reshape(-1, 3)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if not len(self.target) == len(self.source) == len(self.scores):
            raise ShapeError("target, source and scores must have equal length")
        if not np.all(np.isfinite(self.scores)):
            raise DomainError("correspondence scores must be finite")

    @classmethod
    def empty(cls) -> "CorrespondenceSet":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0))

    def __len__(self) -> int:
        return len(self.scores)

    def swapped(self) -> "CorrespondenceSet":
        return CorrespondenceSet(self.source, self.target, self.scores)

    def subset(self, mask) -> "CorrespondenceSet":
        return CorrespondenceSet(self.target[mask], self.source[mask], self.scores[mask])


def save_correspondences(pairs: CorrespondenceSet, path: Union[str, Path]) -> Path:
    """One `tx ty tz sx sy sz score` line per pair, world mm"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = np.column_stack([pairs.target[:, ::-1], pairs.source[:, ::-1], pairs.scores])
    np.savetxt(path, rows, fmt="%.6f", header="tx ty tz sx sy sz score")
    return path


def load_correspondences(path: Union[str, Path]) -> CorrespondenceSet:
    try:
        rows = np.loadtxt(path, ndmin=2)
    except (OSError, ValueError) as e:
        raise TableFormatError(f"cannot read correspondences from {path}: {e}") from e
    if rows.size == 0:
        return CorrespondenceSet.empty()
    if rows.shape[1] != 7:
        raise TableFormatError(f"{path}: expected 7 columns, got {rows.shape[1]}")
    return CorrespondenceSet(rows[:, 2::-1], rows[:, 5:2:-1], rows[:, 6])


def mutual_best(scores: np.ndarray, threshold: float) -> Tuple[np.ndarray, np.ndarray]:
    """Index pairs (i, j) that are each other's best match with score above threshold"""
    if scores.size == 0:
        return np.zeros(0, dtype=np.intp), np.zeros(0, dtype=np.intp)
    best_j = scores.argmax(axis=1)
    best_i = scores.argmax(axis=0)
    rows = np.arange(scores.shape[0])
    keep = (best_i[best_j] == rows) & (scores[rows, best_j] > threshold)
    return rows[keep], best_j[keep]


def _tile_count(n: int, p: int) -> int:
    return 1 + max(0, math.ceil((n - p) / (p // 2)))


def tile_starts(dims: Sequence[int], patch: Sequence[int]) -> Tuple[Tuple[int, int, int], ...]:
    """Patch origins on a 50%-overlap lattice covering dims (after padding to the lattice)"""
    axes = [[i * (p // 2) for i in range(_tile_count(n, p))] for n, p in zip(dims, patch)]
    return tuple(product(*axes))


def _padded_dims(dims: Sequence[int], patch: Sequence[int]) -> Tuple[int, int, int]:
    return tuple(p + (_tile_count(n, p) - 1) * (p // 2) for n, p in zip(dims, patch))


def _pad_to(vol: Volume3, dims: Sequence[int]) -> Volume3:
    extra = [(0, int(d - n)) for d, n in zip(dims, vol.dims)]
    return pad_volume(vol, extra) if any(b for _, b in extra) else vol


def tile_ownership(start: Sequence[int], dims: Sequence[int], patch: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    """
    Voxel box [lo, hi) a tile keeps pairs from: its central half, stretched
    to the volume edge for the first and last tile on an axis. The boxes of
    all tiles partition the volume.
    """
    lo, hi = [], []
    for s, n, p in zip(start, dims, patch):
        quarter, half = p // 4, p // 2
        last = (_tile_count(n, p) - 1) * half
        lo.append(0 if s == 0 else s + quarter)
        hi.append(n if s == last else s + quarter + half)
    return np.asarray(lo), np.asarray(hi)


def _tile_landmarks(out: BranchOutput, cfg: NetworkConfig, offset: np.ndarray, valid_dims) -> LandmarkSet:
    lm = sample_threshold(out.prob, cfg.inference_threshold)
    inside = np.all(lm.indices + offset < np.asarray(valid_dims), axis=1)
    lm = LandmarkSet(lm.indices[inside], lm.probabilities[inside])
    if len(lm) > cfg.inference_max_landmarks:
        order = np.argsort(-lm.probabilities, kind="stable")[: cfg.inference_max_landmarks]
        order.sort()
        lm = LandmarkSet(lm.indices[order], lm.probabilities[order])
    return lm


def _match_tile(matcher: SiameseMatcher, variant: LossVariant, target: np.ndarray, source: np.ndarray,
                start: Tuple[int, int, int], valid_dims: Tuple[int, int, int]):
    cfg = matcher.cfg
    offset = np.asarray(start)
    empty = np.zeros((0, 3), dtype=np.intp), np.zeros((0, 3), dtype=np.intp), np.zeros(0)
    with tc.no_grad():
        out_t = matcher.forward_branch(target)
        out_s = matcher.forward_branch(source)
        lm_t = _tile_landmarks(out_t, cfg, offset, valid_dims)
        lm_s = _tile_landmarks(out_s, cfg, offset, valid_dims)
        if not len(lm_t) or not len(lm_s):
            return empty
        desc_t, desc_s = build_descriptors(out_t, lm_t), build_descriptors(out_s, lm_s)
        scores = matcher.match_probabilities(desc_t, desc_s, variant.match_mode).data.astype(np.float64)
        if variant.match_mode == "ce":
            # average both orientations so rounding does not depend on argument order
            back = matcher.match_probabilities(desc_s, desc_t, "ce").data.astype(np.float64)
            scores = 0.5 * (scores + back.T)
    i, j = mutual_best(scores, variant.score_threshold)
    t_idx, s_idx = lm_t.indices[i] + offset, lm_s.indices[j] + offset
    own_lo, own_hi = tile_ownership(start, valid_dims, cfg.patch_dims)
    mid = 0.5 * (t_idx + s_idx)
    owned = np.all((mid >= own_lo) & (mid < own_hi), axis=1)
    return t_idx[owned], s_idx[owned], scores[i, j][owned]


def _unordered_key(target: np.ndarray, source: np.ndarray) -> Tuple[np.ndarray, ...]:
    """Lexsort keys identifying a pair regardless of which side is the target"""
    swap = np.zeros(len(target), dtype=bool)
    for c in range(3):
        undecided = ~swap & np.all(target[:, :c] == source[:, :c], axis=1)
        swap |= undecided & (source[:, c] < target[:, c])
    lo = np.where(swap[:, None], source, target)
    hi = np.where(swap[:, None], target, source)
    return tuple(hi[:, c] for c in (2, 1, 0)) + tuple(lo[:, c] for c in (2, 1, 0))


def suppress_duplicates(target: np.ndarray, source: np.ndarray, scores: np.ndarray, radius: float) -> np.ndarray:
    """
    Greedy by descending score: keep a pair unless its target or its source
    lies within radius of an already kept pair. Equal scores are ordered by
    the unordered pair's coordinates, so swapping target and source keeps
    the same pairs. Returns kept indices.
    """
    if len(scores) == 0:
        return np.zeros(0, dtype=np.intp)
    order = np.lexsort(_unordered_key(target, source) + (-scores,))
    tree_t, tree_s = cKDTree(target), cKDTree(source)
    suppressed = np.zeros(len(scores), dtype=bool)
    kept = []
    for k in order:
        if suppressed[k]:
            continue
        kept.append(k)
        suppressed[tree_t.query_ball_point(target[k], radius)] = True
        suppressed[tree_s.query_ball_point(source[k], radius)] = True
    return np.asarray(kept, dtype=np.intp)


def infer_pairs(
    target: Volume3,
    source: Volume3,
    matcher: SiameseMatcher,
    variant: Union[str, LossVariant],
    threads: int = 1,
) -> CorrespondenceSet:
    """
    Landmark correspondences between two volumes on the same grid.

    Both volumes are padded to a 50%-overlap patch lattice and every tile
    pair is matched independently. A tile keeps a pair only when the pair's
    midpoint lies in the box it owns (see tile_ownership), so swapping the
    volumes gives the same pairs reversed. The merged pairs are de-duplicated.
    """
    if not target.geometry.matches(source.geometry):
        raise GridMismatchError("target and source must share a grid for matching")
    if isinstance(variant, str):
        variant = LossVariant.from_name(variant)
    cfg = matcher.cfg
    dims = _padded_dims(target.dims, cfg.patch_dims)
    tgt = _pad_to(target, dims)
    src = _pad_to(source, dims)
    starts = tile_starts(target.dims, cfg.patch_dims)
    margin = receptive_field_margin(cfg)
    if min(cfg.patch_dims) // 4 < margin:
        logger.warning("Patch %s keeps landmarks %d voxels from tile borders, below the receptive field margin %d; "
                       "stitched results may differ slightly from a whole-volume pass",
                       cfg.patch_dims, min(cfg.patch_dims) // 4, margin)

    def job(start):
        sl = tuple(slice(s, s + p) for s, p in zip(start, cfg.patch_dims))
        return _match_tile(matcher, variant, tgt.data[sl], src.data[sl], start, target.dims)

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(job, starts))
    else:
        results = [job(s) for s in starts]

    for start, (ti, _, _) in zip(starts, results):
        logger.debug("tile %s: %d mutual matches", start, len(ti))
    t_idx = np.concatenate([r[0] for r in results]) if results else np.zeros((0, 3))
    s_idx = np.concatenate([r[1] for r in results]) if results else np.zeros((0, 3))
    scores = np.concatenate([r[2] for r in results]) if results else np.zeros(0)
    t_world = target.geometry.index_to_world(t_idx)
    s_world = source.geometry.index_to_world(s_idx)
    keep = suppress_duplicates(t_world, s_world, scores, cfg.dedup_radius_voxels * min(target.spacing))
    logger.info("Matched %d pairs over %d tiles (%d before duplicate suppression)",
                len(keep), len(starts), len(scores))
    return CorrespondenceSet(t_world[keep], s_world[keep], scores[keep])
