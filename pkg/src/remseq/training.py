"""Two-stage training: synthetic pretraining and measurement fine-tuning."""

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt
import pandas as pd

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .channel_synth import rsrp_sequence
from .config import ChannelConfig, StageConfig
from .dataset import MeasurementSet
from .errors import ConfigError, DataError, GeometryError, NumericalError
from .featurize import (
    FeatureNormalizer,
    TrainingExample,
    build_features,
    encode_batch,
    example_seed,
    make_stage1_example,
    make_stage2_example,
)
from .geometry import CartesianPoint, RangeArray
from .model import EncoderModel, encode

logger = logging.getLogger(__name__)

FloatArray = npt.NDArray[np.float64]
BoolArray = npt.NDArray[np.bool_]
IndexArray = npt.NDArray[np.int64]
ExampleSource = Callable[[int], List[TrainingExample]]


def lr_lwsrd(
    step: int,
    total_steps: int,
    lr_max: float,
    lr_min: float,
    warmup_frac: float = 0.1,
) -> float:
    """Linear warm-up, then square-root decay clamped at ``lr_min``."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    warmup = max(1, int(round(warmup_frac * total_steps)))
    if step < warmup:
        return lr_max * step / warmup
    return max(lr_min, lr_max * math.sqrt(warmup / step))


def lr_step_decay(
    epoch: int,
    epochs: int,
    lr_max: float,
    lr_min: float,
    n_drops: int = 4,
) -> float:
    """Piecewise-constant geometric decay from ``lr_max`` to ``lr_min``.

    The epochs are cut into ``n_drops + 1`` equal intervals; each boundary
    multiplies the rate by ``(lr_min / lr_max) ** (1 / n_drops)``.
    """
    if n_drops < 1:
        raise ValueError(f"n_drops must be >= 1, got {n_drops}")
    if not 0 <= epoch < epochs:
        raise ValueError(f"epoch {epoch} outside [0, {epochs})")
    level = min(n_drops, (epoch * (n_drops + 1)) // epochs)
    return float(lr_max * (lr_min / lr_max) ** (level / n_drops))


class AdamOptimizer:
    """Adam with global gradient-norm clipping."""

    def __init__(
        self,
        params: Sequence[Tensor],
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        grad_clip: Optional[float] = 1.0,
    ) -> None:
        """Initialize moment buffers for ``params``."""
        self.params = list(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.grad_clip = grad_clip
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        """Clear every parameter gradient."""
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float) -> float:
        """Apply one update and return the pre-clip gradient norm."""
        grads = [
            p.grad if p.grad is not None else np.zeros_like(p.data)
            for p in self.params
        ]
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
        if not math.isfinite(norm):
            raise NumericalError("non-finite gradient norm")
        if self.grad_clip is not None and norm > self.grad_clip:
            grads = [g * (self.grad_clip / norm) for g in grads]
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm


@dataclass
class TrainReport:
    """Per-epoch loss and learning-rate traces of one stage."""

    stage: str
    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    lr: List[float] = field(default_factory=list)
    lr_steps: List[float] = field(default_factory=list)
    best_epoch: int = -1
    wall_time_s: float = 0.0

    @property
    def epochs(self) -> int:
        """Number of completed epochs."""
        return len(self.train_loss)

    def to_frame(self) -> pd.DataFrame:
        """Columns: epoch, train_loss, val_loss, lr."""
        return pd.DataFrame(
            {
                "epoch": list(range(self.epochs)),
                "train_loss": self.train_loss,
                "val_loss": self.val_loss,
                "lr": self.lr,
            }
        )

    def to_csv(self, path: Union[str, Path]) -> None:
        """Write the per-epoch trace."""
        self.to_frame().to_csv(path, index=False, float_format="%.17g")


def sample_directions(n: int, theta_max: float, seed: int) -> FloatArray:
    """``n`` directions ``(phi, theta)`` uniform on the sphere cap.

    The cap is ``theta <= theta_max`` (inclination from +z).
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    theta_max = min(max(theta_max, 0.0), math.pi)
    rng = np.random.default_rng(seed)
    phi = rng.uniform(-math.pi, math.pi, size=n)
    phi = np.where(phi <= -math.pi, math.pi, phi)
    cos_t = rng.uniform(math.cos(theta_max), 1.0, size=n)
    theta = np.arccos(np.clip(cos_t, -1.0, 1.0))
    return np.column_stack([phi, theta])


def _loss(
    cfg: StageConfig, pred: Tensor, y: FloatArray, mask: BoolArray
) -> Tensor:
    if cfg.loss == "mse":
        return ad.mse_loss(pred, y, mask)
    return ad.smooth_l1_loss(pred, y, mask, cfg.smooth_l1_beta)


def _batches(n: int, batch_size: int) -> List[slice]:
    return [slice(s, s + batch_size) for s in range(0, n, batch_size)]


class StageTrainer:
    """Runs the optimisation loop shared by both training stages."""

    def __init__(self, model: EncoderModel, cfg: StageConfig) -> None:
        """Bind a model and its stage settings."""
        self.model = model
        self.cfg = cfg
        self.logger = logging.getLogger(__name__)
        self.optimizer = AdamOptimizer(
            model.parameters(), grad_clip=cfg.grad_clip
        )
        self.dropout_rng = np.random.default_rng([cfg.seed, 1])

    def learning_rate(
        self, step: int, epoch: int, steps_per_epoch: int
    ) -> float:
        """Schedule value for the given step."""
        cfg = self.cfg
        if cfg.lr_schedule == "lwsrd":
            return lr_lwsrd(
                step,
                cfg.epochs * steps_per_epoch,
                cfg.lr_max,
                cfg.lr_min,
                cfg.warmup_frac,
            )
        return lr_step_decay(
            epoch, cfg.epochs, cfg.lr_max, cfg.lr_min, cfg.n_drops
        )

    def evaluate(self, examples: Sequence[TrainingExample]) -> float:
        """Loss over ``examples`` with dropout disabled."""
        total, count = 0.0, 0
        for part in _batches(len(examples), max(self.cfg.batch_size, 64)):
            x, _, y, mask = encode_batch(
                examples[part], self.model.normalizer
            )
            n = int(mask.sum())
            loss = _loss(self.cfg, encode(self.model, x), y, mask)
            total += loss.item() * n
            count += n
        return total / count if count else math.nan

    def fit(
        self,
        train_source: ExampleSource,
        val_examples: Sequence[TrainingExample],
    ) -> TrainReport:
        """Train for ``cfg.epochs`` and keep the best-validation weights.

        ``train_source(epoch)`` returns that epoch's examples in a fixed
        order; they are shuffled here with a seeded generator.
        """
        cfg = self.cfg
        report = TrainReport(stage=cfg.stage)
        started = time.perf_counter()
        best_loss = math.inf
        best_state = self.model.state()
        step = 0
        for epoch in range(cfg.epochs):
            examples = train_source(epoch)
            if not examples:
                raise DataError("no training examples")
            order = np.random.default_rng([cfg.seed, 2, epoch]).permutation(
                len(examples)
            )
            batches = _batches(len(examples), cfg.batch_size)
            batch_losses = []
            lr = 0.0
            for part in batches:
                lr = self.learning_rate(step, epoch, len(batches))
                batch = [examples[i] for i in order[part]]
                x, _, y, mask = encode_batch(batch, self.model.normalizer)
                with Tape() as tape:
                    pred = encode(
                        self.model, x, training=True, rng=self.dropout_rng
                    )
                    loss = _loss(cfg, pred, y, mask)
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericalError(
                        f"{cfg.stage}: loss became non-finite at epoch "
                        f"{epoch}, step {step}"
                    )
                tape.backward(loss)
                self.optimizer.step(lr)
                self.optimizer.zero_grad()
                batch_losses.append(value)
                report.lr_steps.append(lr)
                self.logger.debug(
                    f"{cfg.stage} step {step}: loss={value:.6f} lr={lr:.3g}"
                )
                step += 1

            train_loss = float(np.mean(batch_losses))
            val_loss = (
                self.evaluate(val_examples) if val_examples else train_loss
            )
            report.train_loss.append(train_loss)
            report.val_loss.append(val_loss)
            report.lr.append(lr)
            if val_loss < best_loss:
                best_loss = val_loss
                best_state = self.model.state()
                report.best_epoch = epoch
            self.logger.info(
                f"{cfg.stage} epoch {epoch + 1}/{cfg.epochs}: "
                f"train={train_loss:.5f} val={val_loss:.5f} lr={lr:.3g}"
            )

        self.model.load_state(best_state)
        report.wall_time_s = time.perf_counter() - started
        return report


def _check_sequence_length(model: EncoderModel, delta: RangeArray) -> None:
    if len(delta) != model.config.max_seq:
        raise ConfigError(
            f"range array has {len(delta)} bins but the model expects "
            f"{model.config.max_seq}"
        )


def _holdout(
    n: int, fraction: float, seed: int
) -> Tuple[IndexArray, IndexArray]:
    order = np.random.default_rng([seed, 3]).permutation(n)
    n_val = int(round(fraction * n)) if n > 1 else 0
    return order[n_val:], order[:n_val]


def pretrain(
    model: EncoderModel,
    world: ChannelConfig,
    cfg: StageConfig,
    delta: RangeArray,
    directions: Optional[FloatArray] = None,
) -> Tuple[EncoderModel, TrainReport]:
    """Stage 1: reconstruct synthetic FSPL sequences under random masks.

    Normalization statistics are fitted on the training directions and
    frozen on the model. Masks are redrawn every epoch.
    """
    _check_sequence_length(model, delta)
    if directions is None:
        directions = sample_directions(
            cfg.n_directions, math.pi / 2 + cfg.theta_margin, cfg.seed
        )
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, 2)
    train_idx, val_idx = _holdout(len(directions), cfg.val_fraction, cfg.seed)
    train_dirs = [tuple(directions[i]) for i in train_idx]
    val_dirs = [tuple(directions[i]) for i in val_idx]

    model.normalizer = FeatureNormalizer.fit(
        [build_features(d, delta).gamma for d in train_dirs],
        [
            rsrp_sequence(d, delta, world, include_shadowing=False)
            for d in train_dirs
        ],
    )

    def stage1(
        dirs: Sequence[Tuple[float, ...]], stream: int
    ) -> List[TrainingExample]:
        return [
            make_stage1_example(
                (d[0], d[1]),
                delta,
                world,
                cfg.mask_ratio,
                seed=example_seed(cfg.seed, i),
                stream=stream,
                loss_on_masked_only=cfg.loss_on_masked_only,
            )
            for i, d in enumerate(dirs)
        ]

    val_examples = stage1(val_dirs, stream=0)
    logger.info(
        f"Pretraining on {len(train_dirs)} directions "
        f"({len(val_dirs)} held out), sequence length {len(delta)}"
    )
    report = StageTrainer(model, cfg).fit(
        lambda epoch: stage1(train_dirs, stream=epoch + 1), val_examples
    )
    return model, report


def _stage2_examples(
    data: MeasurementSet, delta: RangeArray
) -> List[TrainingExample]:
    examples = []
    skipped = 0
    for xyz, rsrp in zip(data.xyz, data.rsrp_dbm):
        try:
            examples.append(
                make_stage2_example(
                    (CartesianPoint(*map(float, xyz)), float(rsrp)), delta
                )
            )
        except GeometryError:
            skipped += 1
    if skipped:
        logger.warning(
            f"Skipped {skipped} measurement(s) outside the region of interest"
        )
    return examples


def finetune(
    model: EncoderModel,
    data: MeasurementSet,
    cfg: StageConfig,
    delta: RangeArray,
    val: Optional[MeasurementSet] = None,
) -> Tuple[EncoderModel, TrainReport]:
    """Stage 2: one all-but-k example per measurement, loss at ``k`` only.

    Without an explicit ``val`` set, ``cfg.val_fraction`` of ``data`` is
    held out for model selection. All parameters are trained.
    """
    _check_sequence_length(model, delta)
    if len(data) == 0:
        raise DataError("cannot fine-tune on an empty measurement set")
    if val is None and cfg.val_fraction > 0:
        train_idx, val_idx = _holdout(len(data), cfg.val_fraction, cfg.seed)
        data, val = data.subset(train_idx), data.subset(val_idx)
    train_examples = _stage2_examples(data, delta)
    if not train_examples:
        raise DataError("no measurements inside the region of interest")
    val_examples = _stage2_examples(val, delta) if val is not None else []
    logger.info(
        f"Fine-tuning on {len(train_examples)} measurements "
        f"({len(val_examples)} for validation)"
    )
    report = StageTrainer(model, cfg).fit(
        lambda epoch: train_examples, val_examples
    )
    return model, report


def split_dataset(
    data: MeasurementSet,
    ratios: Tuple[float, float, float] = (0.75, 0.05, 0.2),
    seed: int = 0,
) -> Tuple[MeasurementSet, MeasurementSet, MeasurementSet]:
    """Seeded random train/val/test partition."""
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ConfigError(f"split ratios must be 3 non-negatives: {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9 or ratios[0] <= 0:
        raise ConfigError(
            f"split ratios must sum to 1 with a non-empty train share: "
            f"{ratios}"
        )
    n = len(data)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(ratios[0] * n))
    n_val = min(n - n_train, int(round(ratios[1] * n)))
    return (
        data.subset(order[:n_train]),
        data.subset(order[n_train : n_train + n_val]),
        data.subset(order[n_train + n_val :]),
    )


def evaluate_reconstruction(
    model: EncoderModel,
    directions: FloatArray,
    world: ChannelConfig,
    delta: RangeArray,
    mask_ratio: float = 1.0,
    seed: int = 0,
) -> float:
    """RMSE (dB) of stage-1 reconstruction over held-out directions.

    Scored on masked positions, or on every position when nothing is
    masked.
    """
    _check_sequence_length(model, delta)
    examples = [
        make_stage1_example(
            (float(d[0]), float(d[1])),
            delta,
            world,
            mask_ratio,
            seed=example_seed(seed, i),
            loss_on_masked_only=True,
        )
        for i, d in enumerate(np.asarray(directions).reshape(-1, 2))
    ]
    sq_err, count = 0.0, 0
    for part in _batches(len(examples), 64):
        batch = examples[part]
        x, _, _, _ = encode_batch(batch, model.normalizer)
        pred = model.normalizer.denormalize_targets(encode(model, x).data)
        truth = np.stack([ex.target for ex in batch])
        mask = np.stack([ex.target_mask for ex in batch])
        sq_err += float(np.sum((pred - truth)[mask] ** 2))
        count += int(mask.sum())
    if count == 0:
        raise DataError("no directions to evaluate")
    return math.sqrt(sq_err / count)
