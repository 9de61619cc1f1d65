"""
Tests for matching error, TRE, histograms, Jacobian statistics, overlays and report files
"""

import json
from datetime import datetime

import numpy as np
import pytest

from lmreg.dcnn_match import CorrespondenceSet
from lmreg.deform_sim import DenseDVF
from lmreg.errors import DomainError, GridMismatchError, OutOfBoundsError, ShapeError
from lmreg.evaluation import (
    ErrorReport,
    RunSummary,
    cumulative_error_distribution,
    jacobian_report,
    landmark_deformation_histogram,
    nearest_rank,
    overlay_rgb,
    overlay_slices,
    read_error_csv,
    read_ppm,
    write_ppm,
    spatial_matching_error,
    tre,
    write_error_csv,
    write_json,
    write_paired_csv,
)
from lmreg.registration import BSplineTransform
from lmreg.volume import Volume3


def constant_dvf(geometry, value):
    data = np.zeros(geometry.dims + (3,))
    data[...] = value
    return DenseDVF(data, geometry)


class TestErrorReport:
    """Test summary statistics"""

    def test_statistics(self):
        """Mean, population std and nearest-rank percentiles"""
        report = ErrorReport.from_errors(np.arange(1.0, 21.0))
        assert report.mean == pytest.approx(10.5)
        assert report.std == pytest.approx(np.arange(1.0, 21.0).std())
        assert report.percentile_5 == 1.0
        assert report.percentile_95 == 19.0
        assert report.count == 20

    def test_empty(self):
        """No errors leaves the statistics unset"""
        report = ErrorReport.from_errors([], dropped=3)
        assert report.mean is None and report.count == 0 and report.dropped == 3

    def test_nearest_rank(self):
        """Nearest rank picks an observed value"""
        assert nearest_rank([5.0, 1.0, 3.0], 50) == 3.0
        assert nearest_rank([5.0, 1.0, 3.0], 100) == 5.0
        assert nearest_rank([5.0, 1.0, 3.0], 0) == 1.0


class TestMatchingError:
    """Test the spatial matching error of predicted pairs"""

    def test_perfect_pairs(self, geometry):
        """Pairs consistent with the field have zero error"""
        D = constant_dvf(geometry, [0.0, 0.0, 2.0])
        target = np.array([[10.0, 10.0, 10.0], [20.0, 14.0, 30.0]])
        pairs = CorrespondenceSet(target, target - [0.0, 0.0, 2.0], [0.9, 0.8])
        report = spatial_matching_error(pairs, D)
        assert report.mean == pytest.approx(0.0, abs=1e-6)
        assert report.dropped == 0

    def test_known_offset(self, geometry):
        """A 3-4-5 mistake gives 5 mm"""
        D = DenseDVF.zeros(geometry)
        target = np.array([[10.0, 10.0, 10.0]])
        pairs = CorrespondenceSet(target, target + [3.0, 4.0, 0.0], [1.0])
        assert spatial_matching_error(pairs, D).mean == pytest.approx(5.0)

    def test_no_pairs(self, geometry):
        """An empty set gives an empty report"""
        assert spatial_matching_error(CorrespondenceSet.empty(), DenseDVF.zeros(geometry)).count == 0


class TestCDF:
    """Test cumulative error distributions"""

    def test_fractions(self):
        """Fractions of errors at or below each edge"""
        cdf = cumulative_error_distribution([0.5, 1.5, 2.0, 7.0], [0.0, 1.0, 2.0, 4.0, 8.0])
        assert cdf.fractions == [0.0, 0.25, 0.75, 0.75, 1.0]
        assert cdf.at(2.0) == 0.75

    def test_empty(self):
        """No errors is a domain error"""
        with pytest.raises(DomainError):
            cumulative_error_distribution([], [0.0, 1.0])

    def test_edges_increasing(self):
        """Edges must increase"""
        with pytest.raises(DomainError):
            cumulative_error_distribution([1.0], [2.0, 1.0])


class TestTRE:
    """Test target registration error"""

    def test_identity(self):
        """Without a transform TRE is the plain point distance"""
        report = tre([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]], [[6.0, 8.0, 0.0], [1.0, 1.0, 1.0]])
        assert report.errors == [10.0, 0.0]
        assert report.mean == pytest.approx(5.0)

    def test_transform(self, geometry):
        """A transform matching the offset removes the error"""
        T = BSplineTransform.covering(geometry, 8.0)
        T.coefficients[:] = [0.0, 2.0, 0.0]
        t = np.array([[10.0, 10.0, 10.0], [30.0, 20.0, 12.0]])
        assert tre(t, t + [0.0, 2.0, 0.0], T).mean == pytest.approx(0.0, abs=1e-12)

    def test_shape_mismatch(self):
        """Point sets must pair up"""
        with pytest.raises(ShapeError):
            tre(np.zeros((2, 3)), np.zeros((3, 3)))


class TestDeformationHistogram:
    """Test landmark counts binned by deformation magnitude"""

    def test_bins(self, geometry):
        """A uniform 5 mm field puts every pair in the 4-6 mm bin"""
        D = constant_dvf(geometry, [3.0, 4.0, 0.0])
        target = np.array([[20.0, 20.0, 20.0], [24.0, 20.0, 16.0]])
        good = target - [3.0, 4.0, 0.0]
        source = np.vstack([good[0], good[1] + [10.0, 0.0, 0.0]])
        hist = landmark_deformation_histogram(CorrespondenceSet(target, source, [1.0, 1.0]), D,
                                              [0.0, 2.0, 4.0, 6.0, 8.0], error_threshold=4.0)
        assert hist.total == [0, 0, 2, 0]
        assert hist.accurate == [0, 0, 1, 0]

    def test_overflow_goes_to_last_bin(self, geometry):
        """Magnitudes beyond the last edge land in the last bin"""
        D = constant_dvf(geometry, [0.0, 0.0, 30.0])
        pairs = CorrespondenceSet([[20.0, 20.0, 40.0]], [[20.0, 20.0, 10.0]], [1.0])
        hist = landmark_deformation_histogram(pairs, D, [0.0, 12.0, 24.0])
        assert hist.total == [0, 1]


class TestJacobian:
    """Test Jacobian determinant statistics"""

    def test_identity(self, geometry):
        """A zero field has unit determinant everywhere"""
        report = jacobian_report(DenseDVF.zeros(geometry))
        assert report.min_determinant == pytest.approx(1.0)
        assert report.max_determinant == pytest.approx(1.0)
        assert report.fraction_nonpositive == 0.0

    def test_folding(self, geometry):
        """A field compressing x by more than its length folds"""
        x = geometry.world_points()
        D = DenseDVF(np.stack([np.zeros(geometry.dims), np.zeros(geometry.dims), -2.0 * x[..., 2]], axis=-1),
                     geometry)
        report = jacobian_report(D, interior_margin=2)
        assert report.max_determinant == pytest.approx(-1.0)
        assert report.fraction_nonpositive == 1.0

    def test_margin_too_large(self, geometry):
        """A margin eating the whole grid is rejected"""
        with pytest.raises(DomainError):
            jacobian_report(DenseDVF.zeros(geometry), interior_margin=12)


class TestOverlays:
    """Test complementary-color slice overlays"""

    def test_aligned_is_grey(self):
        """Equal intensities give equal channels"""
        rgb = overlay_rgb(np.full((2, 2), 0.5), np.full((2, 2), 0.5))
        assert rgb.dtype == np.uint8
        assert np.all(rgb == 128)

    def test_colors(self):
        """Target shows red, warped source shows cyan"""
        rgb = overlay_rgb(np.array([[1.0]]), np.array([[0.0]]))
        assert rgb[0, 0].tolist() == [255, 0, 0]

    def test_write_slices(self, phantom, tmp_path):
        """One PPM per requested slice with the slice's shape"""
        paths = overlay_slices(phantom, phantom, axis=0, slice_indices=[3, 12], out_dir=tmp_path)
        assert [p.name for p in paths] == ["overlay_axis0_003.ppm", "overlay_axis0_012.ppm"]
        image = read_ppm(paths[1])
        assert image.shape == (24, 24, 3)
        np.testing.assert_array_equal(image[..., 0], image[..., 1])

    def test_ppm_whitespace_pixels(self, tmp_path):
        """Pixel bytes that look like whitespace are read back unchanged"""
        rgb = np.array([[[32, 10, 9], [13, 11, 12]], [[0, 255, 32], [10, 10, 10]]], dtype=np.uint8)
        np.testing.assert_array_equal(read_ppm(write_ppm(tmp_path / "ws.ppm", rgb)), rgb)

    def test_ppm_header_comment(self, tmp_path):
        """Header comments are skipped"""
        path = tmp_path / "c.ppm"
        path.write_bytes(b"P6\n# made by hand\n1 1\n255\n" + bytes([32, 9, 10]))
        assert read_ppm(path).tolist() == [[[32, 9, 10]]]

    def test_ppm_truncated(self, tmp_path):
        """Short pixel payloads are rejected"""
        path = tmp_path / "t.ppm"
        path.write_bytes(b"P6\n2 2\n255\n" + bytes(5))
        with pytest.raises(DomainError):
            read_ppm(path)

    def test_bad_slice(self, phantom, tmp_path):
        """Slices outside the volume are rejected"""
        with pytest.raises(OutOfBoundsError):
            overlay_slices(phantom, phantom, axis=1, slice_indices=[24], out_dir=tmp_path)

    def test_grid_mismatch(self, phantom, tmp_path):
        """Both volumes must share a grid"""
        other = Volume3(phantom.data, spacing=(1.0, 1.0, 1.0))
        with pytest.raises(GridMismatchError):
            overlay_slices(phantom, other, axis=0, slice_indices=[0], out_dir=tmp_path)


class TestWriters:
    """Test CSV and JSON report files"""

    def test_error_csv(self, tmp_path):
        """Errors survive a CSV round trip"""
        report = ErrorReport.from_errors([0.25, 1.5, 3.0])
        path = write_error_csv(tmp_path / "errors.csv", report)
        assert path.read_text().splitlines()[0] == "index,error_mm"
        np.testing.assert_allclose(read_error_csv(path), [0.25, 1.5, 3.0])

    def test_paired_csv(self, tmp_path):
        """Paired columns are written row by row"""
        path = write_paired_csv(tmp_path / "paired.csv", {"before": [1.0, 2.0], "after": [0.5, 0.25]})
        lines = path.read_text().splitlines()
        assert lines[0] == "before,after"
        assert lines[2] == "2.0,0.25"

    def test_paired_length(self, tmp_path):
        """Paired columns must have equal length"""
        with pytest.raises(ShapeError):
            write_paired_csv(tmp_path / "p.csv", {"a": [1.0], "b": [1.0, 2.0]})

    def test_json_model(self, tmp_path):
        """Models are written as JSON"""
        summary = RunSummary(command="register", out_dir="out", seed=1, config_hash="abc", tre_after=1.25)
        data = json.loads(write_json(tmp_path / "s.json", summary).read_text())
        assert data["command"] == "register"
        assert data["tre_after"] == 1.25

    def test_summary_timestamp_is_utc(self):
        """Default timestamps carry a UTC offset"""
        summary = RunSummary(command="match", out_dir="out", seed=0, config_hash="abc")
        stamp = datetime.fromisoformat(summary.timestamp)
        assert stamp.tzinfo is not None
        assert stamp.utcoffset().total_seconds() == 0
