"""End-to-end learning experiments on synthetic worlds.

These train real models and take minutes; run them with ``-m slow``.
"""

import math
from typing import List, Tuple

import numpy as np
import pytest

from remseq.analysis import (
    MetricsReport,
    altitude_split_eval,
    radial_correlogram,
)
from remseq.channel_synth import (
    sample_altitude_slices,
    sample_ray_points,
    sample_shadow_field,
    synthesize_measurements,
)
from remseq.config import (
    AntennaPattern,
    ChannelConfig,
    KrigingConfig,
    ModelConfig,
    NoiseConfig,
    ShadowingConfig,
    StageConfig,
)
from remseq.dataset import MeasurementSet
from remseq.geometry import RangeArray
from remseq.model import EncoderModel, init_model, predict_points
from remseq.training import (
    evaluate_reconstruction,
    finetune,
    pretrain,
    sample_directions,
)

pytestmark = pytest.mark.slow

SEEDS = range(5)

DELTA = RangeArray(64.0, 1.0)
SMALL = ModelConfig(
    d_model=32, n_layers=2, n_heads=4, d_ff=64, max_seq=64, dropout=0.0
)
SECTOR = ChannelConfig(
    antenna=AntennaPattern(kind="parametric", peak_gain_dbi=12.0)
)

# four slices up to 110 m still fit 64 bins at 4 m
ALTITUDES = {"A": 50.0, "B": 70.0, "C": 90.0, "D": 110.0}
WIDE = RangeArray(256.0, 4.0)
WIDE_MODEL = ModelConfig(
    d_model=32, n_layers=2, n_heads=4, d_ff=128, max_seq=64, dropout=0.0
)
UPWARD = AntennaPattern(
    kind="parametric",
    peak_gain_dbi=12.0,
    boresight_theta=0.6,
    beamwidth_az=2.0 * math.pi,
    beamwidth_el=0.5,
    front_to_back_db=25.0,
)


def _pretrained(n_directions: int, epochs: int) -> EncoderModel:
    cfg = StageConfig.pretrain_defaults(
        n_directions=n_directions, epochs=epochs, seed=1
    )
    model, _ = pretrain(
        init_model(SMALL, seed=1), ChannelConfig(), cfg, DELTA
    )
    return model


@pytest.fixture(scope="module")
def free_space_model() -> EncoderModel:
    """Small model pretrained on an isotropic world."""
    return _pretrained(n_directions=400, epochs=4)


@pytest.fixture(scope="module")
def upward_model() -> EncoderModel:
    """Model pretrained on the deterministic upward-beam channel."""
    cfg = StageConfig.pretrain_defaults(
        n_directions=2000, epochs=10, mask_ratio=0.9, seed=1
    )
    directions = sample_directions(2000, 1.3, seed=1)
    model, _ = pretrain(
        init_model(WIDE_MODEL, seed=1),
        ChannelConfig(antenna=UPWARD),
        cfg,
        WIDE,
        directions=directions,
    )
    return model


def _sector_measurements(n_per_slice: int, seed: int) -> MeasurementSet:
    xyz, labels = sample_altitude_slices(
        {"A": 15.0, "B": 25.0, "C": 35.0}, n_per_slice, 30.0, seed
    )
    return synthesize_measurements(
        xyz, SECTOR, NoiseConfig(sigma_db=0.5, seed=seed), labels
    )


def _upward_world(seed: int) -> MeasurementSet:
    xyz, labels = sample_altitude_slices(ALTITUDES, 150, 80.0, seed)
    world = ChannelConfig(
        antenna=UPWARD,
        shadowing=ShadowingConfig(
            sigma_db=2.5, corr_length_m=50.0, seed=seed
        ),
    )
    return synthesize_measurements(
        xyz, world, NoiseConfig(sigma_db=0.5, seed=seed), labels
    )


def test_stage1_learns_free_space() -> None:
    """Test fully masked reconstruction is within 1 dB on new rays."""
    model = _pretrained(n_directions=2000, epochs=10)
    held_out = sample_directions(100, math.pi / 2 + 0.1, seed=99)
    error = evaluate_reconstruction(
        model, held_out, ChannelConfig(), DELTA, mask_ratio=1.0
    )
    assert error < 1.0


def test_finetune_adapts_to_unseen_antenna(
    free_space_model: EncoderModel,
) -> None:
    """Test 500 samples cut held-out RMSE by 30% and raise R²."""
    passed = 0
    for seed in SEEDS:
        data = _sector_measurements(250, seed=seed)
        order = np.random.default_rng(seed).permutation(len(data))
        train, test = data.subset(order[:500]), data.subset(order[500:])
        before = MetricsReport.from_predictions(
            predict_points(free_space_model, test.xyz, DELTA), test.rsrp_dbm
        )
        cfg = StageConfig.finetune_defaults(
            lr_max=1e-3, lr_min=1e-4, batch_size=16, epochs=20, seed=seed
        )
        tuned, _ = finetune(free_space_model.copy(), train, cfg, DELTA)
        after = MetricsReport.from_predictions(
            predict_points(tuned, test.xyz, DELTA), test.rsrp_dbm
        )
        if (
            after.rmse_db <= 0.7 * before.rmse_db
            and after.r_squared > before.r_squared
        ):
            passed += 1
    assert passed >= 4


def _cross_altitude_gaps(
    model: EncoderModel, seed: int
) -> List[Tuple[str, float]]:
    data = _upward_world(seed)
    cfg = StageConfig.finetune_defaults(
        lr_max=2e-4, lr_min=2e-5, batch_size=8, epochs=30, seed=seed
    )
    gaps = []
    for test_altitude in ("C", "D"):
        common = dict(
            data=data,
            train_altitudes=["B", "C", "D"],
            test_altitude=test_altitude,
            holdout_fraction=0.2,
            seed=seed,
            holdout="sector",
        )
        transformer = altitude_split_eval(
            method="transformer",
            model=model,
            delta=WIDE,
            finetune_cfg=cfg,
            **common,
        )
        kriging = altitude_split_eval(
            method="kriging",
            kriging_cfg=KrigingConfig(neighborhood_k=32, max_lag_m=150.0),
            **common,
        )
        gaps.append(
            (test_altitude, transformer.median_ae_db - kriging.median_ae_db)
        )
    return gaps


def test_cross_altitude_against_kriging(upward_model: EncoderModel) -> None:
    """Test BCD->C' and BCD->D' stay within 0.5 dB of kriging."""
    wins = {"C": 0, "D": 0}
    for seed in SEEDS:
        for altitude, gap in _cross_altitude_gaps(upward_model, seed):
            if gap <= 0.5:
                wins[altitude] += 1
    assert wins["C"] >= 4
    assert wins["D"] >= 4


def _shadowed_rays(n_rays: int, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    radii = np.arange(2.0, 502.0, 2.0)
    points, values = [], []
    for i in range(n_rays):
        ray = sample_ray_points([(-3.0 + 0.3 * i, 1.05)], radii)
        shadow = ShadowingConfig(
            sigma_db=6.0, corr_length_m=50.0, seed=seed + i
        )
        points.append(ray)
        values.append(sample_shadow_field(ray, shadow))
    return np.vstack(points), np.concatenate(values)


def _ray_correlogram(seed: int) -> Tuple[np.ndarray, np.ndarray, int]:
    xyz, shadow = _shadowed_rays(20, seed=seed)
    result = radial_correlogram(
        MeasurementSet(xyz=xyz, rsrp_dbm=-70.0 + shadow),
        angular_res=0.1,
        radial_bin=4.0,
        normalization="global",
    )
    return result.lags_m, result.correlation, result.groups_used


def test_correlogram_recovers_correlation_length() -> None:
    """Test the 50 m lag of an exponential field sits near 1/e."""
    lags, correlation, groups = _ray_correlogram(seed=10)
    assert groups == 20
    at_50 = int(np.flatnonzero(lags == 50.0)[0])
    assert correlation[at_50] == pytest.approx(math.exp(-1), abs=0.15)


def test_correlogram_decreases_at_short_lags() -> None:
    """Test the seed-averaged first three bins do not increase."""
    runs = [_ray_correlogram(seed=1000 * k) for k in range(10)]
    lags = runs[0][0]
    assert all(np.array_equal(run[0], lags) for run in runs)
    mean = np.mean([run[1] for run in runs], axis=0)
    assert mean[0] >= mean[1] >= mean[2]
    at_50 = int(np.flatnonzero(lags == 50.0)[0])
    assert mean[at_50] == pytest.approx(math.exp(-1), abs=0.15)
