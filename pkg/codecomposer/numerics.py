"""Dense float64 tensors with reverse-mode automatic differentiation.

Every primitive records the inputs it needs for its gradient and a backward
function mapping the output gradient to one gradient per parent. `backward()`
walks the graph in reverse topological order, accumulating into the `grad`
buffers of leaves created with `requires_grad=True`.

All data is float64. Any primitive producing NaN or Inf raises NumericsError.
"""

import math
import struct
from contextlib import contextmanager
from contextvars import ContextVar
from pathlib import Path
from typing import Callable, Iterator, Mapping, Optional, Sequence, Union

import numpy as np

from codecomposer.errors import CheckpointError, NumericsError, ShapeError


ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

DEFAULT_EPSILON = 1e-5

CHECKPOINT_MAGIC = b"VQDT"
CHECKPOINT_VERSION = 1

_grad_enabled: ContextVar[bool] = ContextVar("grad_enabled", default=True)


@contextmanager
def no_grad() -> Iterator[None]:
  """Disable graph recording inside the block (inference only)."""
  token = _grad_enabled.set(False)
  try:
    yield
  finally:
    _grad_enabled.reset(token)


class Tensor:
  """Row-major float64 array that can take part in a computation graph."""

  __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

  def __init__(self, data: ArrayLike, requires_grad: bool = False):
    if isinstance(data, Tensor):
      data = data.data
    array = np.array(data, dtype=np.float64)
    if not np.all(np.isfinite(array)):
      raise NumericsError("Tensor created with non-finite values")
    self.data: np.ndarray = array
    self.requires_grad = requires_grad
    self.grad: Optional[np.ndarray] = np.zeros_like(array) if requires_grad else None
    self.op = "leaf"
    self._parents: tuple["Tensor", ...] = ()
    self._backward: Optional[BackwardFn] = None

  def __repr__(self) -> str:
    return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

  @property
  def shape(self) -> tuple[int, ...]:
    return tuple(self.data.shape)

  @property
  def ndim(self) -> int:
    return self.data.ndim

  def numpy(self) -> np.ndarray:
    return self.data.copy()

  def item(self) -> float:
    if self.data.size != 1:
      raise ShapeError(f"item() needs a single element, got shape {self.shape}")
    return float(self.data.reshape(()))

  def zero_grad(self) -> None:
    if self.requires_grad:
      self.grad = np.zeros_like(self.data)

  def backward(self) -> None:
    backward(self)

  # Arithmetic

  def __add__(self, other: ArrayLike) -> "Tensor":
    return add(self, other)

  def __radd__(self, other: ArrayLike) -> "Tensor":
    return add(other, self)

  def __sub__(self, other: ArrayLike) -> "Tensor":
    return sub(self, other)

  def __rsub__(self, other: ArrayLike) -> "Tensor":
    return sub(other, self)

  def __mul__(self, other: ArrayLike) -> "Tensor":
    return mul(self, other)

  def __rmul__(self, other: ArrayLike) -> "Tensor":
    return mul(other, self)

  def __truediv__(self, other: ArrayLike) -> "Tensor":
    return div(self, other)

  def __rtruediv__(self, other: ArrayLike) -> "Tensor":
    return div(other, self)

  def __neg__(self) -> "Tensor":
    return neg(self)

  def __pow__(self, exponent: float) -> "Tensor":
    return power(self, exponent)

  def __matmul__(self, other: ArrayLike) -> "Tensor":
    return matmul(self, other)

  # Shape and reductions

  def sum(self, axis: Optional[Union[int, tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
    return tensor_sum(self, axis, keepdims)

  def mean(self, axis: Optional[Union[int, tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
    return tensor_mean(self, axis, keepdims)

  def reshape(self, *shape: int) -> "Tensor":
    return reshape(self, shape)

  def transpose(self, *axes: int) -> "Tensor":
    return transpose(self, axes or None)

  # Elementwise

  def exp(self) -> "Tensor":
    return exp(self)

  def log(self) -> "Tensor":
    return log(self)

  def relu(self) -> "Tensor":
    return relu(self)

  def sigmoid(self) -> "Tensor":
    return sigmoid(self)

  def gelu(self) -> "Tensor":
    return gelu(self)

  def abs(self) -> "Tensor":
    return tensor_abs(self)


def as_tensor(value: ArrayLike) -> Tensor:
  return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
  """Wrap a primitive's output, recording the graph edge when gradients flow."""
  if not np.all(np.isfinite(data)):
    raise NumericsError(f"{op} produced non-finite values")
  out = Tensor.__new__(Tensor)
  out.data = np.asarray(data, dtype=np.float64)
  out.grad = None
  out.op = op
  needs_grad = _grad_enabled.get() and any(p.requires_grad for p in parents)
  out.requires_grad = needs_grad
  if needs_grad:
    out._parents = tuple(parents)
    out._backward = backward_fn
  else:
    out._parents = ()
    out._backward = None
  return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
  """Sum a gradient over the axes that broadcasting expanded."""
  while grad.ndim > len(shape):
    grad = grad.sum(axis=0)
  for axis, size in enumerate(shape):
    if size == 1 and grad.shape[axis] != 1:
      grad = grad.sum(axis=axis, keepdims=True)
  return grad


def _normalize_axis(axis: int, ndim: int) -> int:
  if not -ndim <= axis < ndim:
    raise ShapeError(f"axis {axis} out of range for rank {ndim}")
  return axis % ndim


# Elementwise binary primitives

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
  a, b = as_tensor(a), as_tensor(b)
  return _make(
    a.data + b.data, (a, b),
    lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    "add",
  )


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
  a, b = as_tensor(a), as_tensor(b)
  return _make(
    a.data - b.data, (a, b),
    lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    "sub",
  )


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
  a, b = as_tensor(a), as_tensor(b)
  return _make(
    a.data * b.data, (a, b),
    lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    "mul",
  )


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
  a, b = as_tensor(a), as_tensor(b)
  if np.any(b.data == 0):
    raise NumericsError("division by zero")
  out = a.data / b.data
  return _make(
    out, (a, b),
    lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    "div",
  )


def neg(a: ArrayLike) -> Tensor:
  a = as_tensor(a)
  return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: ArrayLike, exponent: float) -> Tensor:
  a = as_tensor(a)
  return _make(
    a.data ** exponent, (a,),
    lambda g: (g * exponent * a.data ** (exponent - 1),),
    "power",
  )


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
  """Batched matrix product over the last two axes, with broadcasting."""
  a, b = as_tensor(a), as_tensor(b)
  if a.ndim < 2 or b.ndim < 2:
    raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
  if a.shape[-1] != b.shape[-2]:
    raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

  def _grad(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ga = g @ np.swapaxes(b.data, -1, -2)
    gb = np.swapaxes(a.data, -1, -2) @ g
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

  return _make(a.data @ b.data, (a, b), _grad, "matmul")


# Shape primitives and reductions

def tensor_sum(a: ArrayLike, axis: Optional[Union[int, tuple[int, ...]]] = None,
               keepdims: bool = False) -> Tensor:
  a = as_tensor(a)
  out = a.data.sum(axis=axis, keepdims=keepdims)

  def _grad(g: np.ndarray) -> tuple[np.ndarray]:
    if axis is not None and not keepdims:
      axes = (axis,) if isinstance(axis, int) else axis
      for ax in sorted(_normalize_axis(x, a.ndim) for x in axes):
        g = np.expand_dims(g, ax)
    return (np.broadcast_to(g, a.shape).copy(),)

  return _make(np.asarray(out), (a,), _grad, "sum")


def tensor_mean(a: ArrayLike, axis: Optional[Union[int, tuple[int, ...]]] = None,
                keepdims: bool = False) -> Tensor:
  a = as_tensor(a)
  if axis is None:
    count = a.data.size
  else:
    axes = (axis,) if isinstance(axis, int) else axis
    count = int(np.prod([a.shape[_normalize_axis(x, a.ndim)] for x in axes]))
  if count == 0:
    raise ShapeError("mean over an empty axis")
  return tensor_sum(a, axis, keepdims) * (1.0 / count)


def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
  a = as_tensor(a)
  original = a.shape
  return _make(a.data.reshape(tuple(shape)), (a,), lambda g: (g.reshape(original),), "reshape")


def transpose(a: ArrayLike, axes: Optional[Sequence[int]] = None) -> Tensor:
  a = as_tensor(a)
  perm = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
  inverse = tuple(np.argsort(perm))
  return _make(a.data.transpose(perm), (a,), lambda g: (g.transpose(inverse),), "transpose")


def embedding(table: Tensor, indices: np.ndarray) -> Tensor:
  """Gather rows of `table` (V x d) at integer `indices` of any shape."""
  indices = np.asarray(indices, dtype=np.int64)
  vocab = table.shape[0]
  if indices.size and (indices.min() < 0 or indices.max() >= vocab):
    raise ShapeError(f"embedding index out of range [0, {vocab})")

  def _grad(g: np.ndarray) -> tuple[np.ndarray]:
    out = np.zeros_like(table.data)
    np.add.at(out, indices.reshape(-1), g.reshape(-1, table.shape[-1]))
    return (out,)

  return _make(table.data[indices], (table,), _grad, "embedding")


# Elementwise unary primitives

def exp(a: ArrayLike) -> Tensor:
  a = as_tensor(a)
  out = np.exp(a.data)
  return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: ArrayLike) -> Tensor:
  a = as_tensor(a)
  if np.any(a.data <= 0):
    raise NumericsError("log of a non-positive value")
  return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a: ArrayLike) -> Tensor:
  a = as_tensor(a)
  return _make(np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0),), "relu")


def sigmoid(a: ArrayLike) -> Tensor:
  a = as_tensor(a)
  # Split by sign so neither branch overflows
  positive = a.data >= 0
  out = np.empty_like(a.data)
  out[positive] = 1.0 / (1.0 + np.exp(-a.data[positive]))
  ex = np.exp(a.data[~positive])
  out[~positive] = ex / (1.0 + ex)
  return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: ArrayLike) -> Tensor:
  """Tanh approximation of GELU."""
  a = as_tensor(a)
  x = a.data
  inner = _GELU_C * (x + 0.044715 * x ** 3)
  th = np.tanh(inner)
  out = 0.5 * x * (1.0 + th)

  def _grad(g: np.ndarray) -> tuple[np.ndarray]:
    sech2 = 1.0 - th ** 2
    d = 0.5 * (1.0 + th) + 0.5 * x * sech2 * _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
    return (g * d,)

  return _make(out, (a,), _grad, "gelu")


def tensor_abs(a: ArrayLike) -> Tensor:
  a = as_tensor(a)
  return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


# Gradient routing

def stop_gradient(a: ArrayLike) -> Tensor:
  """Same values, no graph edge (sg[.])."""
  a = as_tensor(a)
  return Tensor(a.data)


def straight_through(value: Tensor, route: Tensor) -> Tensor:
  """Forward the values of `value`; send the whole gradient to `route`.

  This is the copy-gradient path past the quantizer: decoder gradients land on
  the encoder output instead of the codebook entry.
  """
  if value.shape != route.shape:
    raise ShapeError(f"straight_through shapes differ: {value.shape} vs {route.shape}")
  return _make(value.data.copy(), (value, route), lambda g: (None, g), "straight_through")


def dropout(a: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
  if not training or rate <= 0.0:
    return a
  if rng is None:
    raise NumericsError("dropout in training mode needs an rng")
  keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
  return _make(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


# Normalized outputs and losses

def softmax(logits: ArrayLike, axis: int = -1) -> Tensor:
  logits = as_tensor(logits)
  axis = _normalize_axis(axis, logits.ndim)
  if logits.shape[axis] == 0:
    raise ShapeError("softmax over an empty axis")
  shifted = logits.data - logits.data.max(axis=axis, keepdims=True)
  e = np.exp(shifted)
  out = e / e.sum(axis=axis, keepdims=True)

  def _grad(g: np.ndarray) -> tuple[np.ndarray]:
    return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

  return _make(out, (logits,), _grad, "softmax")


def log_softmax(logits: ArrayLike, axis: int = -1) -> Tensor:
  logits = as_tensor(logits)
  axis = _normalize_axis(axis, logits.ndim)
  if logits.shape[axis] == 0:
    raise ShapeError("log_softmax over an empty axis")
  shifted = logits.data - logits.data.max(axis=axis, keepdims=True)
  lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
  out = shifted - lse
  probs = np.exp(out)

  def _grad(g: np.ndarray) -> tuple[np.ndarray]:
    return (g - probs * g.sum(axis=axis, keepdims=True),)

  return _make(out, (logits,), _grad, "log_softmax")


def layer_norm(x: ArrayLike, gain: ArrayLike, bias: ArrayLike,
               epsilon: float = DEFAULT_EPSILON) -> Tensor:
  """Normalize over the last axis, then apply gain and bias."""
  x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
  n = x.shape[-1] if x.ndim else 0
  if n == 0:
    raise ShapeError("layer_norm over a zero-length row")
  mu = x.data.mean(axis=-1, keepdims=True)
  centered = x.data - mu
  var = (centered ** 2).mean(axis=-1, keepdims=True)
  if np.any(var + epsilon <= 0):
    raise NumericsError("layer_norm of a constant row needs epsilon > 0")
  inv_std = 1.0 / np.sqrt(var + epsilon)
  xhat = centered * inv_std
  out = xhat * gain.data + bias.data

  def _grad(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    dxhat = g * gain.data
    dx = inv_std / n * (
      n * dxhat
      - dxhat.sum(axis=-1, keepdims=True)
      - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
    )
    return dx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

  return _make(out, (x, gain, bias), _grad, "layer_norm")


def batch_norm(x: Tensor, gain: Tensor, bias: Tensor,
               epsilon: float = DEFAULT_EPSILON) -> tuple[Tensor, np.ndarray, np.ndarray]:
  """Training-mode batch normalization of (B, C, L) over the batch and time axes.

  Returns the output plus the batch mean and (biased) variance per channel so the
  caller can keep running statistics.
  """
  if x.ndim != 3:
    raise ShapeError(f"batch_norm expects (B, C, L), got {x.shape}")
  n = x.shape[0] * x.shape[2]
  if n == 0:
    raise ShapeError("batch_norm over an empty batch")
  mu = x.data.mean(axis=(0, 2), keepdims=True)
  centered = x.data - mu
  var = (centered ** 2).mean(axis=(0, 2), keepdims=True)
  inv_std = 1.0 / np.sqrt(var + epsilon)
  xhat = centered * inv_std
  g3 = gain.data.reshape(1, -1, 1)
  out = xhat * g3 + bias.data.reshape(1, -1, 1)

  def _grad(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    dxhat = g * g3
    dx = inv_std / n * (
      n * dxhat
      - dxhat.sum(axis=(0, 2), keepdims=True)
      - xhat * (dxhat * xhat).sum(axis=(0, 2), keepdims=True)
    )
    return dx, (g * xhat).sum(axis=(0, 2)), g.sum(axis=(0, 2))

  return _make(out, (x, gain, bias), _grad, "batch_norm"), mu.reshape(-1), var.reshape(-1)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
  """Mean negative log-likelihood of integer `targets` under softmax(logits)."""
  targets = np.asarray(targets, dtype=np.int64)
  if logits.shape[:-1] != targets.shape:
    raise ShapeError(f"cross_entropy targets {targets.shape} do not match logits {logits.shape}")
  classes = logits.shape[-1]
  if targets.size and (targets.min() < 0 or targets.max() >= classes):
    raise ShapeError(f"cross_entropy target out of range [0, {classes})")
  flat = logits.data.reshape(-1, classes)
  shifted = flat - flat.max(axis=1, keepdims=True)
  log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
  rows = np.arange(flat.shape[0])
  flat_targets = targets.reshape(-1)
  count = max(flat.shape[0], 1)
  loss = -log_probs[rows, flat_targets].sum() / count

  def _grad(g: np.ndarray) -> tuple[np.ndarray]:
    d = np.exp(log_probs)
    d[rows, flat_targets] -= 1.0
    return ((g * d / count).reshape(logits.shape),)

  return _make(np.asarray(loss), (logits,), _grad, "cross_entropy")


def categorical_kl(p: ArrayLike, q: ArrayLike, tolerance: float = 1e-9) -> Tensor:
  """KL(p || q) along the last axis, with 0 * log(0 / x) = 0.

  Returns one divergence per row. A row where p puts mass on a state q rules
  out has infinite divergence and raises NumericsError.
  """
  p, q = as_tensor(p), as_tensor(q)
  if p.shape != q.shape:
    raise ShapeError(f"categorical_kl shapes differ: {p.shape} vs {q.shape}")
  if p.shape[-1] == 0:
    raise ShapeError("categorical_kl over an empty axis")
  if np.any(p.data < 0) or np.any(q.data < 0):
    raise NumericsError("categorical_kl needs non-negative probabilities")
  for name, dist in (("p", p.data), ("q", q.data)):
    if np.any(np.abs(dist.sum(axis=-1) - 1.0) > tolerance):
      raise NumericsError(f"categorical_kl: {name} does not sum to 1")
  support = p.data > 0
  if np.any(support & (q.data == 0)):
    raise NumericsError("categorical_kl: p > 0 where q = 0 (infinite divergence)")
  safe_p = np.where(support, p.data, 1.0)
  safe_q = np.where(support, q.data, 1.0)
  ratio_log = np.where(support, np.log(safe_p) - np.log(safe_q), 0.0)
  out = (p.data * ratio_log).sum(axis=-1)

  def _grad(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ge = g[..., None]
    gp = np.where(support, ge * (ratio_log + 1.0), 0.0)
    gq = np.where(support, -ge * p.data / safe_q, 0.0)
    return gp, gq

  return _make(out, (p, q), _grad, "categorical_kl")


# Convolutions over (B, C, L)

def _check_conv_input(x: Tensor, channels: int, name: str) -> None:
  if x.ndim != 3:
    raise ShapeError(f"{name} expects (B, C, L), got {x.shape}")
  if x.shape[1] != channels:
    raise ShapeError(f"{name} expects {channels} input channels, got {x.shape[1]}")


def conv1d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
  """Cross-correlation of (B, Cin, L) with weight (Cout, Cin, K)."""
  c_out, c_in, k = weight.shape
  _check_conv_input(x, c_in, "conv1d")
  length = x.shape[2] + 2 * padding
  if length < k:
    raise ShapeError(f"conv1d input length {x.shape[2]} too short for kernel {k}")
  l_out = (length - k) // stride + 1
  xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding)))
  cols = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)[:, :, ::stride, :][:, :, :l_out, :]
  out = np.einsum("bclk,ock->bol", cols, weight.data)
  if bias is not None:
    out = out + bias.data.reshape(1, -1, 1)
  parents: tuple[Tensor, ...] = (x, weight) if bias is None else (x, weight, bias)

  def _grad(g: np.ndarray) -> tuple[np.ndarray, ...]:
    dcols = np.einsum("bol,ock->bclk", g, weight.data)
    dxp = np.zeros_like(xp)
    for j in range(k):
      dxp[:, :, j:j + stride * l_out:stride] += dcols[..., j]
    dx = dxp[:, :, padding:padding + x.shape[2]]
    dw = np.einsum("bol,bclk->ock", g, cols)
    if bias is None:
      return dx, dw
    return dx, dw, g.sum(axis=(0, 2))

  return _make(out, parents, _grad, "conv1d")


def conv_transpose1d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
                     stride: int = 1, padding: int = 0) -> Tensor:
  """Transposed convolution of (B, Cin, L) with weight (Cin, Cout, K).

  Output length is (L - 1) * stride - 2 * padding + K.
  """
  c_in, c_out, k = weight.shape
  _check_conv_input(x, c_in, "conv_transpose1d")
  l_in = x.shape[2]
  full_len = (l_in - 1) * stride + k
  l_out = full_len - 2 * padding
  if l_out <= 0:
    raise ShapeError(f"conv_transpose1d output length {l_out} is not positive")
  contrib = np.einsum("bil,iok->bolk", x.data, weight.data)
  full = np.zeros((x.shape[0], c_out, full_len))
  for j in range(k):
    full[:, :, j:j + stride * l_in:stride] += contrib[..., j]
  out = full[:, :, padding:padding + l_out]
  if bias is not None:
    out = out + bias.data.reshape(1, -1, 1)
  parents: tuple[Tensor, ...] = (x, weight) if bias is None else (x, weight, bias)

  def _grad(g: np.ndarray) -> tuple[np.ndarray, ...]:
    gfull = np.zeros((x.shape[0], c_out, full_len))
    gfull[:, :, padding:padding + l_out] = g
    gcontrib = np.stack([gfull[:, :, j:j + stride * l_in:stride] for j in range(k)], axis=-1)
    dx = np.einsum("bolk,iok->bil", gcontrib, weight.data)
    dw = np.einsum("bil,bolk->iok", x.data, gcontrib)
    if bias is None:
      return dx, dw
    return dx, dw, g.sum(axis=(0, 2))

  return _make(out, parents, _grad, "conv_transpose1d")


# Graph traversal

class ComputationGraph:
  """Topologically ordered nodes reachable from a scalar loss."""

  def __init__(self, nodes: list[Tensor]):
    self.nodes = nodes

  @classmethod
  def trace(cls, loss: Tensor) -> "ComputationGraph":
    """Collect nodes in topological order, parents before children.

    Iterative DFS with three-colour marking so deep graphs do not hit the
    recursion limit and a cycle is reported rather than looping.
    """
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack: list[tuple[Tensor, int]] = [(loss, 0)]
    state[id(loss)] = 1
    while stack:
      node, child_index = stack.pop()
      if child_index < len(node._parents):
        stack.append((node, child_index + 1))
        parent = node._parents[child_index]
        mark = state.get(id(parent), 0)
        if mark == 1:
          raise NumericsError(f"cycle detected in computation graph at {parent.op}")
        if mark == 0:
          state[id(parent)] = 1
          stack.append((parent, 0))
      else:
        state[id(node)] = 2
        order.append(node)
    return cls(order)

  def __len__(self) -> int:
    return len(self.nodes)


def backward(loss: Tensor, graph: Optional[ComputationGraph] = None) -> None:
  """Accumulate d(loss)/d(leaf) into every requires_grad leaf's `grad`."""
  if loss.data.size != 1:
    raise NumericsError(f"backward needs a scalar loss, got shape {loss.shape}")
  if not loss.requires_grad:
    return
  if graph is None:
    graph = ComputationGraph.trace(loss)

  grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
  for node in reversed(graph.nodes):
    g = grads.pop(id(node), None)
    if g is None:
      continue
    if node._backward is None:
      if node.requires_grad:
        node.grad = g if node.grad is None else node.grad + g
      continue
    for parent, pg in zip(node._parents, node._backward(g)):
      if pg is None or not parent.requires_grad:
        continue
      key = id(parent)
      grads[key] = grads[key] + pg if key in grads else np.array(pg, dtype=np.float64)


def numerical_gradient(fn: Callable[[], Tensor], target: Tensor, step: float = 1e-5) -> np.ndarray:
  """Central finite differences of scalar fn() with respect to target.data."""
  grad = np.zeros_like(target.data)
  flat = target.data.reshape(-1)
  out = grad.reshape(-1)
  with no_grad():
    for i in range(flat.size):
      original = flat[i]
      flat[i] = original + step
      plus = fn().item()
      flat[i] = original - step
      minus = fn().item()
      flat[i] = original
      out[i] = (plus - minus) / (2 * step)
  return grad


def gradient_check(fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-5) -> float:
  """Largest relative error between analytic and finite-difference gradients."""
  for tensor in inputs:
    tensor.zero_grad()
  backward(fn())
  worst = 0.0
  for tensor in inputs:
    analytic = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
    numeric = numerical_gradient(fn, tensor, step)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
    worst = max(worst, float(np.linalg.norm(analytic - numeric) / scale))
  return worst


def directional_gradient_check(fn: Callable[[], Tensor], inputs: Sequence[Tensor], rng: np.random.Generator,
                               directions: int = 100, step: float = 1e-6,
                               reference: Optional[Callable[[], Tensor]] = None) -> float:
  """Relative error of analytic derivatives along random unit directions.

  Every direction perturbs all inputs at once, so a model with thousands of
  parameters costs two evaluations per direction. `reference` is differentiated
  numerically in place of fn when fn routes gradients past a non-differentiable
  step (stop-gradient, straight-through); it must agree with fn's routing at
  the current point.
  """
  for tensor in inputs:
    tensor.zero_grad()
  backward(fn())
  grads = [tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data) for tensor in inputs]
  target = fn if reference is None else reference

  analytic = np.empty(directions)
  numeric = np.empty(directions)
  originals = [tensor.data.copy() for tensor in inputs]
  with no_grad():
    for i in range(directions):
      draws = [rng.normal(size=tensor.shape) for tensor in inputs]
      norm = math.sqrt(sum(float(np.sum(d * d)) for d in draws))
      unit = [d / norm for d in draws]
      analytic[i] = sum(float(np.sum(g * d)) for g, d in zip(grads, unit))
      values = []
      for sign in (1.0, -1.0):
        for tensor, original, d in zip(inputs, originals, unit):
          tensor.data[...] = original + sign * step * d
        values.append(target().item())
      numeric[i] = (values[0] - values[1]) / (2 * step)
      for tensor, original in zip(inputs, originals):
        tensor.data[...] = original
  scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), 1e-12)
  return float(np.linalg.norm(analytic - numeric) / scale)


# Parameters and optimization

def glorot(rng: np.random.Generator, shape: Sequence[int], fan_in: int, fan_out: int) -> np.ndarray:
  limit = math.sqrt(6.0 / (fan_in + fan_out))
  return rng.uniform(-limit, limit, size=tuple(shape))


class Module:
  """Named parameter container shared by the VQ-VAE, denoiser and classifier."""

  def __init__(self) -> None:
    self.params: dict[str, Tensor] = {}

  def add_param(self, name: str, value: np.ndarray) -> Tensor:
    if name in self.params:
      raise NumericsError(f"duplicate parameter name: {name}")
    tensor = Tensor(value, requires_grad=True)
    self.params[name] = tensor
    return tensor

  def parameters(self) -> list[Tensor]:
    return list(self.params.values())

  def zero_grad(self) -> None:
    for tensor in self.params.values():
      tensor.zero_grad()

  def state_dict(self) -> dict[str, np.ndarray]:
    return {name: tensor.data.copy() for name, tensor in self.params.items()}

  def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
    missing = set(self.params) - set(state)
    unexpected = set(state) - set(self.params)
    if missing or unexpected:
      raise CheckpointError(
        f"checkpoint parameters do not match architecture "
        f"(missing: {sorted(missing)}, unexpected: {sorted(unexpected)})"
      )
    for name, tensor in self.params.items():
      value = np.asarray(state[name], dtype=np.float64)
      if value.shape != tensor.shape:
        raise CheckpointError(f"parameter {name}: checkpoint shape {value.shape} != {tensor.shape}")
      tensor.data = value.copy()
      tensor.zero_grad()


class AdamW:
  """Adam with decoupled weight decay and linear learning-rate warmup."""

  def __init__(self, params: Sequence[Tensor], lr: float, betas: tuple[float, float] = (0.9, 0.96),
               eps: float = 1e-8, weight_decay: float = 0.01, warmup_steps: int = 0):
    self.params = list(params)
    self.lr = lr
    self.beta1, self.beta2 = betas
    self.eps = eps
    self.weight_decay = weight_decay
    self.warmup_steps = warmup_steps
    self.step_count = 0
    self._m = [np.zeros_like(p.data) for p in self.params]
    self._v = [np.zeros_like(p.data) for p in self.params]

  def current_lr(self) -> float:
    if self.warmup_steps <= 0:
      return self.lr
    return self.lr * min(1.0, self.step_count / self.warmup_steps)

  def zero_grad(self) -> None:
    for p in self.params:
      p.zero_grad()

  def step(self) -> None:
    self.step_count += 1
    lr = self.current_lr()
    c1 = 1.0 - self.beta1 ** self.step_count
    c2 = 1.0 - self.beta2 ** self.step_count
    for p, m, v in zip(self.params, self._m, self._v):
      if p.grad is None:
        continue
      g = p.grad
      m *= self.beta1
      m += (1.0 - self.beta1) * g
      v *= self.beta2
      v += (1.0 - self.beta2) * g * g
      p.data = p.data * (1.0 - lr * self.weight_decay) - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# Checkpoint format: "VQDT", u32 version, u32 count, then per tensor
# u32 name length, UTF-8 name, u32 rank, u32 dims, float64 payload. Little-endian.

def encode_checkpoint(tensors: Mapping[str, np.ndarray]) -> bytes:
  chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
  for name, value in tensors.items():
    array = np.ascontiguousarray(value, dtype="<f8")
    encoded = name.encode("utf-8")
    chunks.append(struct.pack("<I", len(encoded)))
    chunks.append(encoded)
    chunks.append(struct.pack("<I", array.ndim))
    chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
    chunks.append(array.tobytes())
  return b"".join(chunks)


def decode_checkpoint(payload: bytes) -> dict[str, np.ndarray]:
  offset = 0

  def take(size: int) -> bytes:
    nonlocal offset
    if offset + size > len(payload):
      raise CheckpointError(f"checkpoint truncated at byte {offset}")
    chunk = payload[offset:offset + size]
    offset += size
    return chunk

  if take(4) != CHECKPOINT_MAGIC:
    raise CheckpointError("not a checkpoint file (bad magic)")
  version, count = struct.unpack("<II", take(8))
  if version != CHECKPOINT_VERSION:
    raise CheckpointError(f"unsupported checkpoint version {version}")
  tensors: dict[str, np.ndarray] = {}
  for _ in range(count):
    (name_len,) = struct.unpack("<I", take(4))
    try:
      name = take(name_len).decode("utf-8")
    except UnicodeDecodeError as exc:
      raise CheckpointError(f"tensor name is not UTF-8 near byte {offset}") from exc
    (rank,) = struct.unpack("<I", take(4))
    dims = struct.unpack(f"<{rank}I", take(4 * rank))
    size = int(np.prod(dims)) if rank else 1
    array = np.frombuffer(take(8 * size), dtype="<f8").reshape(dims)
    tensors[name] = array.astype(np.float64)
  if offset != len(payload):
    raise CheckpointError(f"{len(payload) - offset} trailing bytes after checkpoint")
  return tensors


def save_checkpoint(path: Union[str, Path], tensors: Mapping[str, np.ndarray]) -> bytes:
  payload = encode_checkpoint(tensors)
  Path(path).write_bytes(payload)
  return payload


def load_checkpoint(path: Union[str, Path]) -> dict[str, np.ndarray]:
  return decode_checkpoint(Path(path).read_bytes())
