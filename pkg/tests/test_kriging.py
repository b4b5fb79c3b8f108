"""Tests for the ordinary kriging baseline."""

import numpy as np
import pytest

from remseq.channel_synth import sample_shadow_field
from remseq.config import KrigingConfig, ShadowingConfig
from remseq.dataset import MeasurementSet
from remseq.errors import DataError
from remseq.geometry import CartesianPoint
from remseq.kriging import (
    EmpiricalVariogram,
    OrdinaryKriging,
    Semivariogram,
    empirical_semivariogram,
    fit_semivariogram,
    fit_variogram,
    krige_point,
    krige_points,
    kriging_weights,
)

VG = Semivariogram("exponential", nugget=0.0, sill=4.0, range_m=50.0)


def _field(n: int = 60, seed: int = 0) -> MeasurementSet:
    rng = np.random.default_rng(seed)
    xyz = rng.uniform(-100.0, 100.0, size=(n, 3))
    values = -80.0 + 0.05 * xyz[:, 0] + rng.normal(0.0, 2.0, size=n)
    return MeasurementSet(xyz=xyz, rsrp_dbm=values)


class TestEmpiricalSemivariogram:
    """Binned semivariance estimates."""

    def test_two_points(self) -> None:
        """Test values 0 and 4 at 10 m give 8 at the 10 m lag."""
        data = MeasurementSet(
            xyz=np.array([[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]]),
            rsrp_dbm=np.array([0.0, 4.0]),
        )
        emp = empirical_semivariogram(data, 10.0, 30.0)
        assert emp.lags.tolist() == [10.0]
        assert emp.gamma.tolist() == [8.0]
        assert emp.counts.tolist() == [1]

    def test_bins_and_cutoff(self) -> None:
        """Test pairs beyond the max lag are dropped."""
        data = MeasurementSet(
            xyz=np.array([[0.0, 0, 0], [4.0, 0, 0], [100.0, 0, 0]]),
            rsrp_dbm=np.array([0.0, 2.0, 6.0]),
        )
        emp = empirical_semivariogram(data, 5.0, 20.0)
        assert emp.lags.tolist() == [5.0]
        assert emp.gamma.tolist() == [2.0]

    def test_anisotropy_scales_height(self) -> None:
        """Test vertical offsets are stretched before binning."""
        data = MeasurementSet(
            xyz=np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 10.0]]),
            rsrp_dbm=np.array([0.0, 2.0]),
        )
        emp = empirical_semivariogram(data, 10.0, 40.0, anisotropy=2.0)
        assert emp.lags.tolist() == [20.0]

    def test_too_few_points(self) -> None:
        """Test a single sample is rejected."""
        data = MeasurementSet(xyz=np.zeros((1, 3)), rsrp_dbm=[0.0])
        with pytest.raises(DataError):
            empirical_semivariogram(data, 10.0, 100.0)


class TestFitVariogram:
    """Least-squares model fits."""

    @pytest.mark.parametrize("model", ["exponential", "gaussian"])
    def test_recovers_exact_curve(self, model: str) -> None:
        """Test a noise-free curve is recovered."""
        truth = Semivariogram(model, nugget=1.0, sill=5.0, range_m=40.0)
        lags = np.arange(5.0, 205.0, 5.0)
        emp = EmpiricalVariogram(
            lags=lags,
            gamma=truth(lags),
            counts=np.full(lags.shape, 10, dtype=np.int64),
        )
        fitted = fit_variogram(emp, model)
        assert fitted.nugget == pytest.approx(1.0, abs=1e-6)
        assert fitted.sill == pytest.approx(5.0, rel=1e-6)
        assert fitted.range_m == pytest.approx(40.0, rel=1e-6)

    def test_constant_field(self) -> None:
        """Test all-zero semivariances give a zero variogram."""
        data = MeasurementSet(
            xyz=np.random.default_rng(1).uniform(0, 100, size=(30, 3)),
            rsrp_dbm=np.full(30, -70.0),
        )
        vg = fit_semivariogram(data, KrigingConfig())
        assert vg.sill == 0.0
        assert vg.nugget == 0.0

    def test_needs_three_lags(self) -> None:
        """Test a fit over two lags is refused."""
        emp = EmpiricalVariogram(
            lags=np.array([10.0, 20.0]),
            gamma=np.array([1.0, 2.0]),
            counts=np.array([3, 3], dtype=np.int64),
        )
        with pytest.raises(DataError):
            fit_variogram(emp)

    def test_recovers_shadowing_field(self) -> None:
        """Test range and sill of a noisy exponential field are recovered."""
        ranges, sills = [], []
        for seed in range(3):
            rng = np.random.default_rng(seed)
            xyz = rng.uniform(0.0, [600.0, 600.0, 200.0], size=(2000, 3))
            shadow = sample_shadow_field(
                xyz,
                ShadowingConfig(
                    sigma_db=6.0, corr_length_m=50.0, seed=100 + seed
                ),
            )
            noisy = -80.0 + shadow + rng.normal(0.0, 0.5, size=2000)
            vg = fit_semivariogram(
                MeasurementSet(xyz=xyz, rsrp_dbm=noisy),
                KrigingConfig(lag_width_m=10.0, max_lag_m=250.0),
            )
            ranges.append(vg.range_m)
            sills.append(vg.sill)
        assert np.median(ranges) == pytest.approx(50.0, rel=0.25)
        assert np.median(sills) == pytest.approx(36.0, rel=0.30)

    def test_model_validation(self) -> None:
        """Test invalid variogram parameters."""
        with pytest.raises(ValueError):
            Semivariogram("cubic", 0.0, 1.0, 10.0)
        with pytest.raises(ValueError):
            Semivariogram("exponential", 2.0, 1.0, 10.0)
        with pytest.raises(ValueError):
            Semivariogram("exponential", 0.0, 1.0, 0.0)

    def test_zero_at_origin(self) -> None:
        """Test every model vanishes at zero lag, even with a nugget."""
        for model in ("exponential", "gaussian", "spherical"):
            vg = Semivariogram(model, nugget=1.0, sill=3.0, range_m=10.0)
            assert vg(np.array([0.0]))[0] == 0.0
        spherical = Semivariogram("spherical", 0.5, 3.0, 10.0)
        assert spherical(np.array([10.0, 50.0])).tolist() == [3.0, 3.0]


class TestKrigingWeights:
    """The ordinary kriging system."""

    def test_dense_oracle(self) -> None:
        """Test a 3-point system against a direct dense solve."""
        pts = np.array([[0.0, 0.0, 0.0], [30.0, 0.0, 0.0], [0.0, 40.0, 5.0]])
        q = np.array([10.0, 10.0, 1.0])
        weights, mu = kriging_weights(pts, q, VG)

        def gamma(h: float) -> float:
            return 0.0 if h == 0 else 4.0 * (1.0 - np.exp(-h / 50.0))

        lhs = np.ones((4, 4))
        lhs[3, 3] = 0.0
        for i in range(3):
            for j in range(3):
                lhs[i, j] = gamma(float(np.linalg.norm(pts[i] - pts[j])))
        rhs = np.ones(4)
        for i in range(3):
            rhs[i] = gamma(float(np.linalg.norm(pts[i] - q)))
        expected = np.linalg.solve(lhs, rhs)
        np.testing.assert_allclose(weights, expected[:3], atol=1e-9)
        assert mu == pytest.approx(expected[3], abs=1e-9)

    def test_weights_sum_to_one(self) -> None:
        """Test the unbiasedness constraint."""
        data = _field()
        q = np.array([5.0, -20.0, 30.0])
        weights, _ = kriging_weights(data.xyz, q, VG)
        assert abs(weights.sum() - 1.0) < 1e-10

    def test_singular_system_regularized(self) -> None:
        """Test a flat variogram falls back to uniform weights."""
        flat = Semivariogram("exponential", 0.0, 0.0, 10.0)
        pts = np.random.default_rng(2).uniform(size=(4, 3))
        weights, _ = kriging_weights(pts, np.zeros(3), flat)
        np.testing.assert_allclose(weights, 0.25, atol=1e-9)

    def test_no_samples(self) -> None:
        """Test an empty neighbourhood is a data error."""
        with pytest.raises(DataError):
            kriging_weights(np.zeros((0, 3)), np.zeros(3), VG)


class TestOrdinaryKriging:
    """Neighbourhood kriging over a measurement set."""

    def test_exact_at_samples(self) -> None:
        """Test zero-nugget kriging reproduces the samples."""
        data = _field()
        values, variances = krige_points(
            data.xyz[:10], data, VG, KrigingConfig(neighborhood_k=16)
        )
        np.testing.assert_allclose(values, data.rsrp_dbm[:10], atol=1e-6)
        np.testing.assert_allclose(variances, 0.0, atol=1e-6)

    def test_constant_data(self) -> None:
        """Test a constant field is reproduced everywhere."""
        data = MeasurementSet(
            xyz=np.random.default_rng(3).uniform(0, 50, size=(12, 3)),
            rsrp_dbm=np.full(12, -65.0),
        )
        cfg = KrigingConfig()
        vg = fit_semivariogram(data, cfg)
        value, _ = krige_point(CartesianPoint(7.0, 8.0, 9.0), data, vg, cfg)
        assert value == pytest.approx(-65.0, abs=1e-9)

    def test_neighbourhood_and_variance(self) -> None:
        """Test the neighbour count and a positive variance off-sample."""
        data = _field()
        kr = OrdinaryKriging(data, VG, KrigingConfig(neighborhood_k=8))
        est = kr.estimate(np.array([1.0, 2.0, 3.0]))
        assert est.neighbors.shape == (8,)
        assert abs(est.weights.sum() - 1.0) < 1e-10
        assert est.variance > 0.0

    def test_threads_match_serial(self) -> None:
        """Test threaded prediction keeps input order."""
        data = _field()
        queries = np.random.default_rng(4).uniform(-50, 50, size=(20, 3))
        kr = OrdinaryKriging(data, VG, KrigingConfig(neighborhood_k=12))
        serial = kr.predict(queries)
        threaded = kr.predict(queries, workers=3)
        assert serial[0].tolist() == threaded[0].tolist()
        assert serial[1].tolist() == threaded[1].tolist()

    def test_empty_data(self) -> None:
        """Test kriging needs data."""
        empty = MeasurementSet(xyz=np.zeros((0, 3)), rsrp_dbm=np.zeros(0))
        with pytest.raises(DataError):
            OrdinaryKriging(empty, VG, KrigingConfig())
