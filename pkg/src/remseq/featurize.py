"""Radial propagation feature sequences, masks and training examples.

A feature sequence is a ``6 x n_bins`` matrix for one direction:

    row 0  log10(delta)
    row 1  theta (constant)
    row 2  phi (constant)
    row 3  x along the ray
    row 4  y along the ray
    row 5  z along the ray

Masked columns are replaced by ``SENTINEL`` after normalization; the
boolean mask (True = visible) is what downstream code trusts.
"""

from dataclasses import dataclass
from typing import Literal, Optional, Sequence, Tuple

import numpy as np
import numpy.typing as npt

from .channel_synth import rsrp_sequence
from .config import ChannelConfig
from .errors import DataError, GeometryError
from .geometry import (
    CartesianPoint,
    RangeArray,
    direction_unit_vector,
    radial_bin,
    to_spherical,
)

FloatArray = npt.NDArray[np.float64]
BoolArray = npt.NDArray[np.bool_]

N_FEATURES = 6
SENTINEL = 0.0


@dataclass(frozen=True)
class FeatureSequence:
    """Feature matrix for one propagation direction."""

    gamma: FloatArray
    direction: Tuple[float, float]
    delta: RangeArray

    @property
    def length(self) -> int:
        """Sequence length (radial bins)."""
        return int(self.gamma.shape[1])


@dataclass(frozen=True)
class MaskSpec:
    """How to hide feature columns.

    ``random_positions`` hides ``floor(mask_ratio * n_bins)`` distinct columns
    drawn from ``default_rng((seed, stream))``; ``all_but_k`` hides every
    column except ``k``.
    """

    kind: Literal["random_positions", "all_but_k"]
    mask_ratio: Optional[float] = None
    k: Optional[int] = None
    seed: int = 0
    stream: int = 0

    def __post_init__(self) -> None:
        if self.kind == "random_positions":
            if self.mask_ratio is None or self.k is not None:
                raise ValueError("random_positions takes mask_ratio only")
            if not 0.0 <= self.mask_ratio <= 1.0:
                raise ValueError(
                    f"mask_ratio must lie in [0, 1], got {self.mask_ratio}"
                )
        elif self.kind == "all_but_k":
            if self.k is None or self.mask_ratio is not None:
                raise ValueError("all_but_k takes k only")
        else:
            raise ValueError(f"unknown mask kind {self.kind!r}")


@dataclass(frozen=True)
class TrainingExample:
    """One (features, masks, target) pair."""

    features: FeatureSequence
    input_mask: BoolArray
    target: FloatArray
    target_mask: BoolArray


@dataclass
class FeatureNormalizer:
    """Per-row feature z-scores and a scalar target z-score.

    Fitted once on the stage-1 corpus and frozen afterwards.
    """

    feature_mean: FloatArray
    feature_std: FloatArray
    target_mean: float
    target_std: float

    @classmethod
    def identity(cls) -> "FeatureNormalizer":
        """No-op statistics."""
        return cls(np.zeros(N_FEATURES), np.ones(N_FEATURES), 0.0, 1.0)

    @classmethod
    def fit(
        cls, gammas: Sequence[FloatArray], targets: Sequence[FloatArray]
    ) -> "FeatureNormalizer":
        """Statistics over a corpus of feature matrices and targets."""
        if not gammas:
            raise DataError("cannot fit normalization on an empty corpus")
        stacked = np.concatenate([np.asarray(g) for g in gammas], axis=1)
        mean = stacked.mean(axis=1)
        std = stacked.std(axis=1)
        std = np.where(std > 1e-12, std, 1.0)
        t = np.concatenate([np.asarray(v).ravel() for v in targets])
        t_std = float(t.std())
        return cls(
            feature_mean=mean,
            feature_std=std,
            target_mean=float(t.mean()),
            target_std=t_std if t_std > 1e-12 else 1.0,
        )

    def normalize_features(self, gamma: FloatArray) -> FloatArray:
        """Row-wise z-score of a ``6 x L`` (or ``B x 6 x L``) matrix."""
        return np.asarray(
            (gamma - self.feature_mean[:, None]) / self.feature_std[:, None],
            dtype=np.float64,
        )

    def normalize_targets(self, target: FloatArray) -> FloatArray:
        """dBm -> model units."""
        return np.asarray(
            (np.asarray(target) - self.target_mean) / self.target_std,
            dtype=np.float64,
        )

    def denormalize_targets(self, value: FloatArray) -> FloatArray:
        """Model units -> dBm."""
        return np.asarray(
            np.asarray(value) * self.target_std + self.target_mean,
            dtype=np.float64,
        )


def example_seed(base_seed: int, index: int) -> int:
    """Per-example seed: ``base_seed XOR index``."""
    return int(base_seed) ^ int(index)


def build_features(
    direction: Tuple[float, float], delta: RangeArray
) -> FeatureSequence:
    """Feature matrix for the ray leaving the BS along ``(phi, theta)``."""
    phi, theta = direction
    radii = delta.values
    unit = direction_unit_vector(phi, theta)
    gamma = np.empty((N_FEATURES, len(delta)), dtype=np.float64)
    gamma[0] = np.log10(radii)
    gamma[1] = theta
    gamma[2] = phi
    gamma[3:6] = unit[:, None] * radii[None, :]
    return FeatureSequence(gamma=gamma, direction=(phi, theta), delta=delta)


def mask_columns(length: int, m: MaskSpec) -> BoolArray:
    """Visibility vector (True = visible) for a sequence of ``length``."""
    visible = np.ones(length, dtype=bool)
    if m.kind == "all_but_k":
        assert m.k is not None
        if not 0 <= m.k < length:
            raise GeometryError(f"k={m.k} outside [0, {length})")
        visible[:] = False
        visible[m.k] = True
        return visible
    assert m.mask_ratio is not None
    count = int(np.floor(m.mask_ratio * length + 1e-9))
    if count:
        rng = np.random.default_rng((m.seed, m.stream))
        visible[rng.choice(length, size=count, replace=False)] = False
    return visible


def apply_mask(
    f: FeatureSequence,
    m: MaskSpec,
    normalizer: Optional[FeatureNormalizer] = None,
) -> Tuple[FloatArray, BoolArray]:
    """Masked feature matrix and its visibility vector.

    With a ``normalizer`` the matrix is normalized before the sentinel is
    written, which is the form the encoder consumes.
    """
    visible = mask_columns(f.length, m)
    gamma = (
        normalizer.normalize_features(f.gamma)
        if normalizer is not None
        else f.gamma.copy()
    )
    gamma[:, ~visible] = SENTINEL
    return gamma, visible


def make_stage1_example(
    direction: Tuple[float, float],
    delta: RangeArray,
    cfg: ChannelConfig,
    mask_ratio: float,
    seed: int,
    stream: int = 0,
    loss_on_masked_only: bool = False,
) -> TrainingExample:
    """Synthetic FSPL sequence with randomly masked inputs.

    The loss covers every position unless ``loss_on_masked_only`` is set
    (and at least one column is masked).
    """
    features = build_features(direction, delta)
    spec = MaskSpec(
        "random_positions", mask_ratio=mask_ratio, seed=seed, stream=stream
    )
    visible = mask_columns(features.length, spec)
    target = rsrp_sequence(direction, delta, cfg, include_shadowing=False)
    if loss_on_masked_only and not visible.all():
        target_mask = ~visible
    else:
        target_mask = np.ones(features.length, dtype=bool)
    return TrainingExample(features, visible, target, target_mask)


def make_stage2_example(
    sample: Tuple[CartesianPoint, float], delta: RangeArray
) -> TrainingExample:
    """Single measurement: only column ``k`` is visible and scored."""
    point, rsrp_dbm = sample
    sph = to_spherical(point)
    k = radial_bin(sph.rho, delta)
    features = build_features(sph.direction, delta)
    visible = mask_columns(features.length, MaskSpec("all_but_k", k=k))
    target = np.full(features.length, SENTINEL, dtype=np.float64)
    target[k] = rsrp_dbm
    return TrainingExample(features, visible, target, visible.copy())


def encode_batch(
    examples: Sequence[TrainingExample], normalizer: FeatureNormalizer
) -> Tuple[FloatArray, BoolArray, FloatArray, BoolArray]:
    """Stack examples into encoder inputs.

    Returns ``(x, input_mask, target, target_mask)`` with ``x`` shaped
    ``(B, L, 6)`` (columns as tokens), normalized and sentinel-masked, and
    targets in normalized units.
    """
    gammas = np.stack([ex.features.gamma for ex in examples])
    visible = np.stack([ex.input_mask for ex in examples])
    x = normalizer.normalize_features(gammas)
    x = np.where(visible[:, None, :], x, SENTINEL)
    targets = np.stack([ex.target for ex in examples])
    t_mask = np.stack([ex.target_mask for ex in examples])
    y = np.where(t_mask, normalizer.normalize_targets(targets), SENTINEL)
    return np.transpose(x, (0, 2, 1)).copy(), visible, y, t_mask
