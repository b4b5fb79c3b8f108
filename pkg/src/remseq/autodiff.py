"""Minimal reverse-mode differentiation over float64 numpy arrays.

Operations run eagerly. While a ``Tape`` is active, every operation that
touches a tensor with ``requires_grad`` appends a node holding its backward
rule; ``Tape.backward`` then walks the nodes in reverse order, once each::

    with Tape() as tape:
        loss = mse_loss(matmul(x, w), y, mask)
    tape.backward(loss)
    w.grad
"""

import math
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt
from scipy.special import erf

FloatArray = npt.NDArray[np.float64]
BackwardFn = Callable[[FloatArray], Sequence[Optional[FloatArray]]]

_ACTIVE_TAPE: ContextVar[Optional["Tape"]] = ContextVar(
    "remseq_active_tape", default=None
)


class Tensor:
    """A float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "tracked", "name")

    def __init__(
        self,
        data: Union[FloatArray, float, Sequence[float]],
        requires_grad: bool = False,
        name: str = "",
    ) -> None:
        self.data = np.array(data, dtype=np.float64)
        self.grad: Optional[FloatArray] = None
        self.requires_grad = requires_grad
        # tracked: a gradient must flow through this tensor
        self.tracked = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        """Dimension tuple."""
        return tuple(self.data.shape)

    def zero_grad(self) -> None:
        """Drop the accumulated gradient."""
        self.grad = None

    def item(self) -> float:
        """Scalar value."""
        return float(self.data)

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


@dataclass
class _Node:
    output: Tensor
    inputs: Tuple[Tensor, ...]
    backward: BackwardFn


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self) -> None:
        self.nodes: List[_Node] = []
        self._token: Optional[object] = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc: object) -> None:
        if self._token is not None:
            _ACTIVE_TAPE.reset(self._token)  # type: ignore[arg-type]
            self._token = None

    def record(
        self, output: Tensor, inputs: Tuple[Tensor, ...], fn: BackwardFn
    ) -> None:
        """Append one operation."""
        self.nodes.append(_Node(output, inputs, fn))

    def backward(
        self, loss: Tensor, grad: Optional[FloatArray] = None
    ) -> None:
        """Accumulate d(loss)/d(leaf) into every ``requires_grad`` leaf."""
        seed = np.ones_like(loss.data) if grad is None else grad
        grads: Dict[int, FloatArray] = {id(loss): seed}
        if loss.requires_grad:
            _accumulate_leaf(loss, seed)
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for tensor, g_in in zip(node.inputs, node.backward(g)):
                if g_in is None or not tensor.tracked:
                    continue
                key = id(tensor)
                grads[key] = grads[key] + g_in if key in grads else g_in
                if tensor.requires_grad:
                    _accumulate_leaf(tensor, g_in)


def _accumulate_leaf(tensor: Tensor, g: FloatArray) -> None:
    tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g


def _result(
    data: FloatArray, inputs: Tuple[Tensor, ...], fn: BackwardFn
) -> Tensor:
    out = Tensor(data)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.tracked for t in inputs):
        out.tracked = True
        tape.record(out, inputs, fn)
    return out


def _as_tensor(x: Union[Tensor, FloatArray, float]) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: FloatArray, shape: Tuple[int, ...]) -> FloatArray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: Tensor, b: Union[Tensor, FloatArray]) -> Tensor:
    """Element-wise sum with broadcasting."""
    b = _as_tensor(b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Union[Tensor, FloatArray]) -> Tensor:
    """Element-wise difference with broadcasting."""
    b = _as_tensor(b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a: Tensor, b: Union[Tensor, FloatArray]) -> Tensor:
    """Element-wise product with broadcasting."""
    b = _as_tensor(b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        ),
    )


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a constant."""
    return _result(a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(Batched) matrix product; dA = dC.B^T, dB = A^T.dC."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul needs operands with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(
            f"matmul shape mismatch: {a.shape} @ {b.shape}"
        )

    def backward(g: FloatArray) -> Tuple[FloatArray, FloatArray]:
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(np.matmul(a.data, b.data), (a, b), backward)


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    """Reshape without copying semantics."""
    return _result(
        a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),)
    )


def transpose(a: Tensor, axes: Tuple[int, ...]) -> Tensor:
    """Permute dimensions."""
    inverse = tuple(np.argsort(axes))
    return _result(
        np.transpose(a.data, axes),
        (a,),
        lambda g: (np.transpose(g, inverse),),
    )


def sum_all(a: Tensor) -> Tensor:
    """Sum of every element (scalar)."""
    return _result(
        np.array(a.data.sum()),
        (a,),
        lambda g: (np.broadcast_to(g, a.shape).copy(),),
    )


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-shifted for stability."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g: FloatArray) -> Tuple[FloatArray]:
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), backward)


def layer_norm(
    x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5
) -> Tensor:
    """Standardize over the last axis, then apply ``gain`` and ``bias``."""
    if x.shape[-1] < 2:
        raise ValueError("layer_norm needs a feature dimension >= 2")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    x_hat = centered * inv_std
    out = x_hat * gain.data + bias.data

    def backward(g: FloatArray) -> Tuple[FloatArray, FloatArray, FloatArray]:
        d_hat = g * gain.data
        dx = inv_std * (
            d_hat
            - d_hat.mean(axis=-1, keepdims=True)
            - x_hat * (d_hat * x_hat).mean(axis=-1, keepdims=True)
        )
        return (
            dx,
            _unbroadcast(g * x_hat, gain.shape),
            _unbroadcast(g, bias.shape),
        )

    return _result(out, (x, gain, bias), backward)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data**2)
    return _result(
        x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),)
    )


def relu(x: Tensor) -> Tensor:
    """Rectified linear unit."""
    positive = x.data > 0
    return _result(
        np.where(positive, x.data, 0.0),
        (x,),
        lambda g: (np.where(positive, g, 0.0),),
    )


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; identity when ``p == 0`` or ``rng`` is None."""
    if p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


def _masked_count(mask: npt.NDArray[np.bool_]) -> int:
    count = int(np.count_nonzero(mask))
    if count == 0:
        raise ValueError("loss mask selects no positions")
    return count


def mse_loss(
    pred: Tensor, target: FloatArray, mask: npt.NDArray[np.bool_]
) -> Tensor:
    """Mean squared error over mask-true positions."""
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != np.shape(target) or pred.shape != mask.shape:
        raise ValueError(
            f"shape mismatch: pred {pred.shape}, target "
            f"{np.shape(target)}, mask {mask.shape}"
        )
    n = _masked_count(mask)
    diff = np.where(mask, pred.data - np.asarray(target), 0.0)
    return _result(
        np.array((diff**2).sum() / n),
        (pred,),
        lambda g: (g * 2.0 * diff / n,),
    )


def smooth_l1_loss(
    pred: Tensor,
    target: FloatArray,
    mask: npt.NDArray[np.bool_],
    beta: float = 1.0,
) -> Tensor:
    """Huber-style loss: quadratic below ``beta``, linear above."""
    if beta <= 0:
        raise ValueError(f"beta must be > 0, got {beta}")
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != np.shape(target) or pred.shape != mask.shape:
        raise ValueError(
            f"shape mismatch: pred {pred.shape}, target "
            f"{np.shape(target)}, mask {mask.shape}"
        )
    n = _masked_count(mask)
    diff = np.where(mask, pred.data - np.asarray(target), 0.0)
    small = np.abs(diff) < beta
    per = np.where(small, 0.5 * diff**2 / beta, np.abs(diff) - 0.5 * beta)
    per = np.where(mask, per, 0.0)
    slope = np.where(small, diff / beta, np.sign(diff))
    slope = np.where(mask, slope, 0.0)
    return _result(
        np.array(per.sum() / n), (pred,), lambda g: (g * slope / n,)
    )
