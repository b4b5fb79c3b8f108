"""Encoder-only transformer mapping masked feature sequences to RSRP.

Each of the ``n_bins`` feature columns is one token. The stack is

    input projection (6 -> d_model) + sinusoidal positions
    n_layers x [self-attention -> add & norm -> feed-forward -> add & norm]
    per-position linear head (d_model -> 1), denormalized to dBm

Masked columns carry the sentinel and still take part in attention, so the
model produces an output at every position.
"""

import json
import logging
import math
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import numpy.typing as npt
from pydantic import ValidationError

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .errors import (
    ConfigError,
    DataError,
    ModelFormatError,
    NumericalError,
)
from .featurize import (
    N_FEATURES,
    SENTINEL,
    FeatureNormalizer,
    build_features,
)
from .geometry import (
    CartesianPoint,
    RangeArray,
    radial_bins,
    to_spherical_array,
)

logger = logging.getLogger(__name__)

FloatArray = npt.NDArray[np.float64]
BoolArray = npt.NDArray[np.bool_]

CHECKPOINT_MAGIC = b"RSEQ"
CHECKPOINT_VERSION = 1
LN_EPS = 1e-5
_HEADER = struct.Struct("<4sHI")
_CRC = struct.Struct("<I")


@dataclass(frozen=True)
class PredictionResult:
    """Denormalized per-position output for one sequence."""

    rsrp_dbm: FloatArray
    valid: BoolArray


@dataclass
class EncoderModel:
    """Parameters, configuration and frozen normalization statistics."""

    config: ModelConfig
    params: Dict[str, Tensor]
    normalizer: FeatureNormalizer = field(
        default_factory=FeatureNormalizer.identity
    )

    def parameters(self) -> List[Tensor]:
        """Trainable tensors in a fixed order."""
        return list(self.params.values())

    @property
    def n_parameters(self) -> int:
        """Total scalar parameter count."""
        return sum(int(p.data.size) for p in self.params.values())

    def state(self) -> Dict[str, FloatArray]:
        """Copy of every parameter array."""
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state(self, state: Dict[str, FloatArray]) -> None:
        """Overwrite parameters from ``state``."""
        for name, value in state.items():
            self.params[name].data = np.array(value, dtype=np.float64)

    def copy(self) -> "EncoderModel":
        """Independent deep copy."""
        return EncoderModel(
            config=self.config.model_copy(),
            params={
                k: Tensor(p.data.copy(), requires_grad=True, name=k)
                for k, p in self.params.items()
            },
            normalizer=FeatureNormalizer(
                self.normalizer.feature_mean.copy(),
                self.normalizer.feature_std.copy(),
                self.normalizer.target_mean,
                self.normalizer.target_std,
            ),
        )


def _checked_config(cfg: ModelConfig) -> ModelConfig:
    # re-validate: model_construct() skips validators
    try:
        return ModelConfig.model_validate(cfg.model_dump())
    except ValidationError as e:
        raise ConfigError(f"Invalid model configuration: {e}") from e


def param_shapes(cfg: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Ordered parameter names and shapes for ``cfg``."""
    d, ff = cfg.d_model, cfg.d_ff
    shapes: Dict[str, Tuple[int, ...]] = {
        "input.weight": (N_FEATURES, d),
        "input.bias": (d,),
    }
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        for proj in ("q", "k", "v", "o"):
            shapes[f"{p}attn.{proj}.weight"] = (d, d)
            shapes[f"{p}attn.{proj}.bias"] = (d,)
        shapes[f"{p}norm1.gain"] = (d,)
        shapes[f"{p}norm1.bias"] = (d,)
        shapes[f"{p}ff1.weight"] = (d, ff)
        shapes[f"{p}ff1.bias"] = (ff,)
        shapes[f"{p}ff2.weight"] = (ff, d)
        shapes[f"{p}ff2.bias"] = (d,)
        shapes[f"{p}norm2.gain"] = (d,)
        shapes[f"{p}norm2.bias"] = (d,)
    shapes["head.weight"] = (d, 1)
    shapes["head.bias"] = (1,)
    return shapes


def parameter_count(cfg: ModelConfig) -> int:
    """Number of scalar parameters implied by ``cfg``."""
    return sum(
        int(np.prod(shape)) for shape in param_shapes(cfg).values()
    )


def init_model(cfg: ModelConfig, seed: int) -> EncoderModel:
    """Xavier-uniform weights, zero biases, unit norm gains."""
    cfg = _checked_config(cfg)
    rng = np.random.default_rng(seed)
    params: Dict[str, Tensor] = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".weight"):
            fan_in, fan_out = shape
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            value = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(".gain"):
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        params[name] = Tensor(value, requires_grad=True, name=name)
    model = EncoderModel(config=cfg, params=params)
    logger.debug(
        f"Initialized encoder with {model.n_parameters} parameters "
        f"(seed {seed})"
    )
    return model


@lru_cache(maxsize=8)
def sinusoidal_table(length: int, d_model: int) -> FloatArray:
    """Fixed positional table: sin on even, cos on odd channels."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    div = np.exp(
        -math.log(10000.0)
        * np.arange(0, d_model, 2, dtype=np.float64)
        / d_model
    )
    table = np.zeros((length, d_model), dtype=np.float64)
    table[:, 0::2] = np.sin(pos * div)
    table[:, 1::2] = np.cos(pos * div[: d_model // 2])
    table.setflags(write=False)
    return table


def _linear(x: Tensor, params: Dict[str, Tensor], prefix: str) -> Tensor:
    return ad.add(
        ad.matmul(x, params[f"{prefix}.weight"]), params[f"{prefix}.bias"]
    )


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, length, d = x.shape
    return ad.transpose(
        ad.reshape(x, (b, length, n_heads, d // n_heads)), (0, 2, 1, 3)
    )


def _self_attention(
    h: Tensor, params: Dict[str, Tensor], prefix: str, cfg: ModelConfig
) -> Tensor:
    b, length, d = h.shape
    q = _split_heads(_linear(h, params, f"{prefix}.q"), cfg.n_heads)
    k = _split_heads(_linear(h, params, f"{prefix}.k"), cfg.n_heads)
    v = _split_heads(_linear(h, params, f"{prefix}.v"), cfg.n_heads)
    scores = ad.scale(
        ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))),
        1.0 / math.sqrt(cfg.head_dim),
    )
    context = ad.matmul(ad.softmax_rows(scores), v)
    merged = ad.reshape(ad.transpose(context, (0, 2, 1, 3)), (b, length, d))
    return _linear(merged, params, f"{prefix}.o")


def encode(
    model: EncoderModel,
    x: FloatArray,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Run the encoder on a ``(B, L, 6)`` normalized, masked batch.

    Returns normalized predictions shaped ``(B, L)``. Dropout is applied
    only when ``training`` is set and an ``rng`` is supplied.
    """
    cfg = model.config
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[1:] != (cfg.max_seq, N_FEATURES):
        raise DataError(
            f"expected input shaped (B, {cfg.max_seq}, {N_FEATURES}), "
            f"got {x.shape}"
        )
    p = model.params
    drop_p = cfg.dropout if training else 0.0
    drop_rng = rng if training else None
    act = ad.gelu if cfg.activation == "gelu" else ad.relu

    h = _linear(Tensor(x), p, "input")
    if cfg.positional_encoding:
        h = ad.add(h, sinusoidal_table(cfg.max_seq, cfg.d_model))
    h = ad.dropout(h, drop_p, drop_rng)
    for i in range(cfg.n_layers):
        pre = f"layers.{i}"
        attn = ad.dropout(
            _self_attention(h, p, f"{pre}.attn", cfg), drop_p, drop_rng
        )
        h = ad.layer_norm(
            ad.add(h, attn),
            p[f"{pre}.norm1.gain"],
            p[f"{pre}.norm1.bias"],
            LN_EPS,
        )
        ff = _linear(act(_linear(h, p, f"{pre}.ff1")), p, f"{pre}.ff2")
        ff = ad.dropout(ff, drop_p, drop_rng)
        h = ad.layer_norm(
            ad.add(h, ff),
            p[f"{pre}.norm2.gain"],
            p[f"{pre}.norm2.bias"],
            LN_EPS,
        )
    out = _linear(h, p, "head")
    return ad.reshape(out, (x.shape[0], x.shape[1]))


def forward(
    model: EncoderModel,
    masked_features: FloatArray,
    input_mask: BoolArray,
) -> PredictionResult:
    """Inference on one normalized, sentinel-masked ``6 x n_bins`` matrix."""
    gamma = np.asarray(masked_features, dtype=np.float64)
    mask = np.asarray(input_mask, dtype=bool)
    if gamma.shape != (N_FEATURES, model.config.max_seq):
        raise DataError(
            f"expected features shaped ({N_FEATURES}, "
            f"{model.config.max_seq}), got {gamma.shape}"
        )
    if mask.shape != (model.config.max_seq,):
        raise DataError(f"input mask length {mask.shape} != max_seq")
    out = encode(model, gamma.T[None, :, :])
    rsrp = model.normalizer.denormalize_targets(out.data[0])
    if not np.all(np.isfinite(rsrp)):
        raise NumericalError("non-finite model output")
    return PredictionResult(rsrp_dbm=rsrp, valid=mask.copy())


def _query_batch(
    model: EncoderModel,
    sph: FloatArray,
    k: npt.NDArray[np.int64],
    delta: RangeArray,
) -> FloatArray:
    norm = model.normalizer
    x = np.empty((sph.shape[0], len(delta), N_FEATURES))
    for i, (_, phi, theta) in enumerate(sph):
        gamma = norm.normalize_features(
            build_features((float(phi), float(theta)), delta).gamma
        )
        visible = np.zeros(len(delta), dtype=bool)
        visible[k[i]] = True
        gamma[:, ~visible] = SENTINEL
        x[i] = gamma.T
    out = encode(model, x).data
    picked = out[np.arange(sph.shape[0]), k]
    return norm.denormalize_targets(picked)


def predict_points(
    model: EncoderModel,
    points: FloatArray,
    delta: RangeArray,
    batch_size: int = 64,
    workers: int = 1,
) -> FloatArray:
    """Single-shot RSRP estimates (dBm) at many ``(n, 3)`` points.

    Each point gets its own all-but-k forward pass; batches are evaluated
    on ``workers`` threads and reassembled in input order.
    """
    if len(delta) != model.config.max_seq:
        raise ConfigError(
            f"range array has {len(delta)} bins but the model expects "
            f"{model.config.max_seq}"
        )
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if points.shape[0] == 0:
        return np.zeros(0)
    sph = to_spherical_array(points)
    k = radial_bins(sph[:, 0], delta)
    chunks = [
        slice(start, start + batch_size)
        for start in range(0, points.shape[0], batch_size)
    ]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(
                pool.map(
                    lambda s: _query_batch(model, sph[s], k[s], delta),
                    chunks,
                )
            )
    else:
        parts = [_query_batch(model, sph[s], k[s], delta) for s in chunks]
    return np.concatenate(parts)


def predict_point(
    model: EncoderModel, p: CartesianPoint, delta: RangeArray
) -> float:
    """Single-shot RSRP estimate (dBm) at ``p``."""
    return float(predict_points(model, p.as_array()[None, :], delta)[0])


def _pack_array(name: str, value: FloatArray) -> bytes:
    encoded = name.encode("utf-8")
    arr = np.ascontiguousarray(value, dtype="<f8")
    head = struct.pack("<H", len(encoded)) + encoded
    head += struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def save_model(model: EncoderModel, path: Union[str, Path]) -> None:
    """Write a versioned, checksummed little-endian checkpoint."""
    config_json = json.dumps(
        model.config.model_dump(mode="json"), sort_keys=True
    ).encode("utf-8")
    body = bytearray(
        _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(config_json))
    )
    body += config_json
    body += struct.pack("<I", len(model.params))
    for name, tensor in model.params.items():
        body += _pack_array(name, tensor.data)
    norm = model.normalizer
    body += _pack_array("norm.feature_mean", norm.feature_mean)
    body += _pack_array("norm.feature_std", norm.feature_std)
    body += struct.pack("<2d", norm.target_mean, norm.target_std)
    body += _CRC.pack(zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(body))
    logger.info(f"Saved checkpoint ({model.n_parameters} params) to {path}")


class _Reader:
    def __init__(self, payload: bytes, offset: int) -> None:
        self.payload = payload
        self.offset = offset

    def take(self, fmt: str) -> Tuple[Any, ...]:
        size = struct.calcsize(fmt)
        if self.offset + size > len(self.payload):
            raise ModelFormatError("checkpoint ends unexpectedly")
        values = struct.unpack_from(fmt, self.payload, self.offset)
        self.offset += size
        return values

    def array(self) -> Tuple[str, FloatArray]:
        (name_len,) = self.take("<H")
        name = self.payload[self.offset : self.offset + name_len]
        self.offset += name_len
        (ndim,) = self.take("<B")
        shape = self.take(f"<{ndim}I")
        count = int(np.prod(shape)) if ndim else 1
        (raw,) = self.take(f"<{8 * count}s")
        value = np.frombuffer(raw, dtype="<f8").astype(np.float64)
        return name.decode("utf-8"), value.reshape(shape)


def load_model(path: Union[str, Path]) -> EncoderModel:
    """Read a checkpoint written by ``save_model``."""
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise ModelFormatError(f"Cannot read checkpoint {path}: {e}") from e
    if len(data) < _HEADER.size + _CRC.size:
        raise ModelFormatError(f"{path} is too short to be a checkpoint")
    magic, version, config_len = _HEADER.unpack_from(data, 0)
    if magic != CHECKPOINT_MAGIC:
        raise ModelFormatError(f"{path} is not a remseq checkpoint")
    payload, trailer = data[: -_CRC.size], data[-_CRC.size :]
    (stored_crc,) = _CRC.unpack(trailer)
    if zlib.crc32(payload) & 0xFFFFFFFF != stored_crc:
        raise ModelFormatError(f"checksum mismatch in {path}")
    if version != CHECKPOINT_VERSION:
        raise ModelFormatError(
            f"checkpoint version {version} is not supported "
            f"(expected {CHECKPOINT_VERSION})"
        )

    start = _HEADER.size
    try:
        config = ModelConfig.model_validate(
            json.loads(payload[start : start + config_len].decode("utf-8"))
        )
    except (ValueError, ValidationError) as e:
        raise ModelFormatError(f"bad config block in {path}: {e}") from e
    reader = _Reader(payload, start + config_len)
    (n_params,) = reader.take("<I")
    expected = param_shapes(config)
    params: Dict[str, Tensor] = {}
    for _ in range(n_params):
        name, value = reader.array()
        if expected.get(name) != value.shape:
            raise ModelFormatError(
                f"unexpected parameter {name} {value.shape} in {path}"
            )
        params[name] = Tensor(value, requires_grad=True, name=name)
    if list(params) != list(expected):
        raise ModelFormatError(f"parameter set mismatch in {path}")
    _, feature_mean = reader.array()
    _, feature_std = reader.array()
    target_mean, target_std = reader.take("<2d")
    logger.info(f"Loaded checkpoint from {path}")
    return EncoderModel(
        config=config,
        params=params,
        normalizer=FeatureNormalizer(
            feature_mean, feature_std, target_mean, target_std
        ),
    )
