"""
End-to-end checks on simulated data: training progress and matching
accuracy, the benefit of oracle landmark guidance, and plausibility of the
registered fields. Slow; run with `pytest -m slow`.
"""

import numpy as np
import pytest

from lmreg.config import DeformationConfig, ExperimentConfig, NetworkConfig, RegistrationConfig, TrainConfig
from lmreg.dcnn_match import CorrespondenceSet, infer_pairs, train
from lmreg.deform_sim import make_phantom, simulate_pair
from lmreg.evaluation import jacobian_report, pair_errors, tre
from lmreg.registration import register_pipeline
from lmreg.volume import GridGeometry

pytestmark = pytest.mark.slow

DESK_DEFORMATION = DeformationConfig(bump_magnitude_range=(2.0, 12.0), bump_sigma_range=(16.0, 32.0))
N_PAIRS = 10


@pytest.fixture
def volume():
    geometry = GridGeometry((32, 32, 32), (2.0, 2.0, 2.0))
    return make_phantom(geometry, np.random.default_rng(21))


@pytest.fixture(scope="module")
def registrations():
    """Ten seeded 64^3 pairs, each registered with oracle guidance (w2 = 0.01) and without (w2 = 0)"""
    geometry = GridGeometry((64, 64, 64), (2.0, 2.0, 2.0))
    base = dict(resolutions=2, iterations=(150, 150), spatial_samples=3000, histogram_bins=(32, 32),
                final_grid_spacing=16.0, gain_a=(200.0, 200.0), gain_A=(20.0, 20.0),
                affine_resolutions=2, affine_iterations=200, affine_spatial_samples=3000)
    guided_cfg = RegistrationConfig(**base, Metric2Weight=0.01)
    plain_cfg = RegistrationConfig(**base, Metric2Weight=0.0)

    runs = []
    for seed in range(N_PAIRS):
        target = make_phantom(geometry, np.random.default_rng(100 + seed))
        pair = simulate_pair(np.random.default_rng(seed), DESK_DEFORMATION, target, n_points=60, kind="elastic")
        oracle = CorrespondenceSet(pair.points_target, pair.points_source, np.ones(len(pair.points_target)))
        guided = register_pipeline(pair.target, pair.source, oracle, guided_cfg, np.random.default_rng(seed))
        plain = register_pipeline(pair.target, pair.source, None, plain_cfg, np.random.default_rng(seed))
        runs.append((pair, guided, plain))
    return runs


class TestTrainingProgress:
    """Test that training lowers the loss"""

    def test_smoothed_loss_decreases(self, volume):
        """200 steps end below where they started"""
        config = ExperimentConfig(
            net=NetworkConfig(levels=2, base_channels=4, K=16, patch_dims=(16, 16, 16)),
            train=TrainConfig(variant="ce", steps=200, lr=1e-3),
        )
        result = train([volume], config, np.random.default_rng(0))
        smoothed = result.smoothed(20)
        assert smoothed[-1] < smoothed[0]


class TestDeskScaleTraining:
    """Test the desk-scale network after a full training run"""

    def test_loss_halves_and_matches_are_accurate(self):
        """2000 CE steps halve the smoothed loss; half the held-out matches land within 2 voxels"""
        geometry = GridGeometry((48, 48, 48), (2.0, 2.0, 2.0))
        volumes = [make_phantom(geometry, np.random.default_rng(seed), kind=kind)
                   for seed, kind in enumerate(["sphere", "ellipsoid"] * 4)]
        config = ExperimentConfig(
            sim=DESK_DEFORMATION,
            net=NetworkConfig(levels=3, base_channels=8, K=32, patch_dims=(16, 32, 32)),
            train=TrainConfig(variant="ce", steps=2000, lr=1e-3),
        )
        result = train(volumes, config, np.random.default_rng(0))
        smoothed = result.smoothed(20)
        assert smoothed[-1] < 0.5 * smoothed[0]

        errors = []
        for seed in range(5):
            target = make_phantom(geometry, np.random.default_rng(500 + seed), kind=("sphere", "ellipsoid")[seed % 2])
            pair = simulate_pair(np.random.default_rng(600 + seed), DESK_DEFORMATION, target, n_points=10)
            pairs = infer_pairs(pair.target, pair.source, result.matcher, "ce")
            if len(pairs):
                errors.append(pair_errors(pairs, pair.dvf))
        errors = np.concatenate(errors)
        assert len(errors) > 0
        accurate = np.nan_to_num(errors, nan=np.inf) < 2 * geometry.spacing[0]
        assert accurate.mean() >= 0.5


class TestGuidanceBenefit:
    """Test that correct landmark guidance improves registration"""

    def test_guided_beats_unguided_on_heldout(self, volume):
        """Strong oracle guidance lowers TRE on points it never saw"""
        sim = DeformationConfig(bump_magnitude_range=(6.0, 10.0), bump_sigma_range=(24.0, 32.0))
        pair = simulate_pair(np.random.default_rng(4), sim, volume, n_points=60, kind="elastic")
        guide, held = slice(0, 40), slice(40, None)
        guidance = CorrespondenceSet(pair.points_target[guide], pair.points_source[guide],
                                     np.ones(len(pair.points_target[guide])))
        base = dict(resolutions=2, iterations=(60, 60), spatial_samples=2000, histogram_bins=(32,),
                    final_grid_spacing=16.0,
                    gain_a=(200.0,), gain_A=(20.0,))
        guided_cfg = RegistrationConfig(**base, Metric2Weight=0.5)
        plain_cfg = RegistrationConfig(**base, Metric2Weight=0.0)

        guided = register_pipeline(pair.target, pair.source, guidance, guided_cfg, np.random.default_rng(1),
                                   affine=False)
        plain = register_pipeline(pair.target, pair.source, None, plain_cfg, np.random.default_rng(1),
                                  affine=False)

        before = tre(pair.points_target[held], pair.points_source[held]).mean
        after_guided = tre(pair.points_target[held], pair.points_source[held], guided.transform).mean
        after_plain = tre(pair.points_target[held], pair.points_source[held], plain.transform).mean
        assert after_guided < after_plain
        assert after_guided < before

    def test_oracle_guidance_on_seeded_pairs(self, registrations):
        """With w2 = 0.01 and the affine stage on, guided TRE < unguided TRE < TRE before on 9 of 10 pairs"""
        wins = 0
        for pair, guided, plain in registrations:
            before = tre(pair.points_target, pair.points_source).mean
            after_guided = tre(pair.points_target, pair.points_source, guided.transform).mean
            after_plain = tre(pair.points_target, pair.points_source, plain.transform).mean
            wins += after_guided < after_plain and after_guided < before and after_plain < before
        assert wins >= N_PAIRS - 1


class TestPlausibility:
    """Test that registered fields never fold"""

    def test_jacobian_positive_inside(self, registrations):
        """Every interior voxel of every registered field has a positive Jacobian determinant"""
        for _, guided, plain in registrations:
            for result in (guided, plain):
                report = jacobian_report(result.dense_dvf, interior_margin=1)
                assert report.fraction_nonpositive == 0
                assert report.min_determinant > 0
