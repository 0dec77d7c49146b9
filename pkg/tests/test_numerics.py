"""Unit tests for tensors, autodiff primitives, the optimizer and checkpoints."""

import math
import struct

import numpy as np
import pytest

from codecomposer.errors import CheckpointError, NumericsError, ShapeError
from codecomposer.numerics import (
  AdamW, ComputationGraph, Module, Tensor, backward, batch_norm, categorical_kl, conv1d,
  conv_transpose1d, cross_entropy, decode_checkpoint, directional_gradient_check, encode_checkpoint, exp, gelu,
  gradient_check, layer_norm, log, matmul, no_grad, sigmoid, softmax, straight_through, tensor_sum,
)


def leaf(rng, *shape):
  return Tensor(rng.normal(size=shape), requires_grad=True)


# softmax

def test_softmax_symmetric():
  """Equal logits give equal probabilities."""
  np.testing.assert_allclose(softmax(np.array([0.0, 0.0])).data, [0.5, 0.5])


def test_softmax_large_logits_do_not_overflow():
  """Max subtraction keeps [1000, 0] finite."""
  out = softmax(np.array([1000.0, 0.0])).data
  assert out[0] == pytest.approx(1.0)
  assert out[1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_shift_invariance(rng):
  x = rng.normal(size=(4, 7)) * 100
  np.testing.assert_allclose(softmax(x).data, softmax(x + 12.5).data, atol=1e-12)


def test_softmax_rows_sum_to_one(rng):
  x = rng.uniform(-1e3, 1e3, size=(50, 9))
  out = softmax(x, axis=-1).data
  assert np.all(np.abs(out.sum(axis=-1) - 1.0) < 1e-12)


def test_softmax_empty_axis():
  with pytest.raises(ShapeError):
    softmax(np.zeros((2, 0)))


# layer_norm

def test_layer_norm_constant_row():
  """Zero variance is handled by epsilon."""
  out = layer_norm(np.full((1, 4), 3.0), np.ones(4), np.zeros(4)).data
  np.testing.assert_allclose(out, np.zeros((1, 4)))


def test_layer_norm_two_points():
  out = layer_norm(np.array([[1.0, 3.0]]), np.ones(2), np.zeros(2), epsilon=0.0).data
  np.testing.assert_allclose(out, [[-1.0, 1.0]])


def test_layer_norm_affine():
  out = layer_norm(np.array([[1.0, 3.0]]), np.full(2, 2.0), np.full(2, 5.0), epsilon=0.0).data
  np.testing.assert_allclose(out, [[3.0, 7.0]])


def test_layer_norm_unit_statistics(rng):
  out = layer_norm(rng.normal(2.0, 5.0, size=(8, 16)), np.ones(16), np.zeros(16), epsilon=0.0).data
  np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-10)
  np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-10)


def test_layer_norm_zero_length_row():
  with pytest.raises(ShapeError):
    layer_norm(np.zeros((2, 0)), np.ones(0), np.zeros(0))


# categorical_kl

def test_kl_identical_is_zero():
  assert categorical_kl([0.3, 0.7], [0.3, 0.7]).item() == 0.0


def test_kl_point_mass_against_uniform():
  assert categorical_kl([1.0, 0.0], [0.5, 0.5]).item() == pytest.approx(math.log(2), abs=1e-12)


def test_kl_is_asymmetric():
  forward = categorical_kl([0.9, 0.1], [0.5, 0.5]).item()
  reverse = categorical_kl([0.5, 0.5], [0.9, 0.1]).item()
  assert forward > 0 and reverse > 0
  assert forward != pytest.approx(reverse)


def test_kl_infinite_divergence():
  with pytest.raises(NumericsError):
    categorical_kl([0.5, 0.5], [1.0, 0.0])


def test_kl_rejects_unnormalized():
  with pytest.raises(NumericsError):
    categorical_kl([0.5, 0.6], [0.5, 0.5])


# backward

def test_backward_square():
  x = Tensor(3.0, requires_grad=True)
  backward(x * x)
  assert x.grad == pytest.approx(6.0)


def test_backward_disconnected_leaf_is_zero():
  x = Tensor(2.0, requires_grad=True)
  unused = Tensor([1.0, 2.0], requires_grad=True)
  (x * 4.0).backward()
  assert x.grad == pytest.approx(4.0)
  assert np.array_equal(unused.grad, np.zeros(2))


def test_backward_non_scalar_loss(rng):
  with pytest.raises(NumericsError):
    backward(leaf(rng, 3) * 2.0)


def test_backward_detects_cycle():
  x = Tensor(1.0, requires_grad=True)
  b = x * 2.0
  c = b * 3.0
  b._parents = (c,)
  with pytest.raises(NumericsError):
    ComputationGraph.trace(c)


def test_backward_shared_subexpression():
  """A node used twice accumulates both contributions."""
  x = Tensor(2.0, requires_grad=True)
  y = x * 3.0
  backward(y * y + y)
  assert x.grad == pytest.approx(2 * 6.0 * 3.0 + 3.0)


def test_backward_deterministic(rng):
  data = rng.normal(size=(4, 5))

  def run():
    x = Tensor(data, requires_grad=True)
    backward(cross_entropy(softmax(x) @ np.ones((5, 3)), np.array([0, 1, 2, 0])))
    return x.grad

  assert np.array_equal(run(), run())


def test_no_grad_records_nothing():
  x = Tensor(2.0, requires_grad=True)
  with no_grad():
    y = x * x
  assert not y.requires_grad


def test_non_finite_results_raise():
  with pytest.raises(NumericsError):
    exp(Tensor([1000.0]))
  with pytest.raises(NumericsError):
    log(Tensor([0.0]))
  with pytest.raises(NumericsError):
    Tensor([float("nan")])


def test_straight_through_routes_gradient():
  value = Tensor([1.0, 2.0], requires_grad=True)
  route = Tensor([5.0, 6.0], requires_grad=True)
  out = straight_through(value, route)
  np.testing.assert_array_equal(out.data, [1.0, 2.0])
  backward(tensor_sum(out * 2.0))
  np.testing.assert_array_equal(value.grad, [0.0, 0.0])
  np.testing.assert_array_equal(route.grad, [2.0, 2.0])


def test_matmul_shape_mismatch(rng):
  with pytest.raises(ShapeError):
    matmul(rng.normal(size=(2, 3)), rng.normal(size=(4, 2)))


# Gradient checks

GRADIENT_TOLERANCE = 1e-4


@pytest.mark.parametrize("seed", range(100))
def test_gradient_matmul_add_mul(seed):
  rng = np.random.default_rng(seed)
  a, b, c = leaf(rng, 2, 3, 4), leaf(rng, 4, 5), leaf(rng, 5)
  weights = rng.normal(size=(2, 3, 5))
  error = gradient_check(lambda: tensor_sum((a @ b + c) * weights), [a, b, c])
  assert error < GRADIENT_TOLERANCE


@pytest.mark.parametrize("seed", range(100))
def test_gradient_softmax_cross_entropy(seed):
  rng = np.random.default_rng(seed)
  x = leaf(rng, 6, 4)
  w = leaf(rng, 4, 3)
  targets = rng.integers(0, 3, size=6)
  error = gradient_check(lambda: cross_entropy(softmax(x) @ w, targets), [x, w])
  assert error < GRADIENT_TOLERANCE


@pytest.mark.parametrize("seed", range(100))
def test_gradient_layer_norm(seed):
  rng = np.random.default_rng(seed)
  x, gain, bias = leaf(rng, 3, 6), leaf(rng, 6), leaf(rng, 6)
  weights = rng.normal(size=(3, 6))
  error = gradient_check(lambda: tensor_sum(layer_norm(x, gain, bias) * weights), [x, gain, bias])
  assert error < GRADIENT_TOLERANCE


@pytest.mark.parametrize("seed", range(100))
def test_gradient_kl(seed):
  rng = np.random.default_rng(seed)
  a, b = leaf(rng, 4, 5), leaf(rng, 4, 5)
  error = gradient_check(lambda: tensor_sum(categorical_kl(softmax(a), softmax(b))), [a, b])
  assert error < GRADIENT_TOLERANCE


@pytest.mark.parametrize("seed", range(100))
def test_gradient_conv1d(seed):
  rng = np.random.default_rng(seed)
  x, w, b = leaf(rng, 2, 3, 8), leaf(rng, 4, 3, 4), leaf(rng, 4)
  weights = rng.normal(size=(2, 4, 4))
  error = gradient_check(lambda: tensor_sum(conv1d(x, w, b, stride=2, padding=1) * weights), [x, w, b])
  assert error < GRADIENT_TOLERANCE


@pytest.mark.parametrize("seed", range(100))
def test_gradient_conv_transpose1d(seed):
  rng = np.random.default_rng(seed)
  x, w, b = leaf(rng, 2, 3, 4), leaf(rng, 3, 5, 4), leaf(rng, 5)
  weights = rng.normal(size=(2, 5, 8))
  error = gradient_check(
    lambda: tensor_sum(conv_transpose1d(x, w, b, stride=2, padding=1) * weights), [x, w, b]
  )
  assert error < GRADIENT_TOLERANCE


@pytest.mark.parametrize("seed", range(100))
def test_gradient_batch_norm(seed):
  rng = np.random.default_rng(seed)
  x, gain, bias = leaf(rng, 3, 2, 5), leaf(rng, 2), leaf(rng, 2)
  weights = rng.normal(size=(3, 2, 5))
  error = gradient_check(lambda: tensor_sum(batch_norm(x, gain, bias)[0] * weights), [x, gain, bias])
  assert error < GRADIENT_TOLERANCE


@pytest.mark.parametrize("seed", range(100))
def test_gradient_smooth_activations(seed):
  rng = np.random.default_rng(seed)
  x = leaf(rng, 10)
  weights = rng.normal(size=10)
  assert gradient_check(lambda: tensor_sum(gelu(x) * weights), [x]) < GRADIENT_TOLERANCE
  assert gradient_check(lambda: tensor_sum(sigmoid(x) * weights), [x]) < GRADIENT_TOLERANCE


def test_directional_check_agrees_on_smooth_loss(rng):
  x, w = leaf(rng, 5, 4), leaf(rng, 4, 3)
  targets = rng.integers(0, 3, size=5)
  error = directional_gradient_check(lambda: cross_entropy(gelu(x) @ w, targets), [x, w], rng, directions=100)
  assert error < GRADIENT_TOLERANCE


def test_directional_check_flags_rerouted_gradient(rng):
  """straight_through sends gradient to the route, which the forward value does not depend on."""
  value, route = leaf(rng, 6), leaf(rng, 6)
  weights = rng.normal(size=6)

  def loss():
    return tensor_sum(straight_through(value, route) * weights)

  assert directional_gradient_check(loss, [value, route], rng, directions=20) > 0.1
  matching = directional_gradient_check(loss, [value, route], rng, directions=20,
                                        reference=lambda: tensor_sum(route * weights))
  assert matching < GRADIENT_TOLERANCE


def test_conv_shapes(rng):
  x = Tensor(rng.normal(size=(2, 3, 16)))
  assert conv1d(x, Tensor(rng.normal(size=(5, 3, 4))), stride=2, padding=1).shape == (2, 5, 8)
  assert conv_transpose1d(Tensor(rng.normal(size=(2, 5, 8))), Tensor(rng.normal(size=(5, 3, 4))),
                          stride=2, padding=1).shape == (2, 3, 16)
  with pytest.raises(ShapeError):
    conv1d(x, Tensor(rng.normal(size=(5, 4, 3))))


# Optimizer

def test_adamw_minimizes_quadratic():
  x = Tensor([0.0], requires_grad=True)
  opt = AdamW([x], lr=0.1, weight_decay=0.0)
  for _ in range(300):
    opt.zero_grad()
    backward(tensor_sum((x - 3.0) ** 2))
    opt.step()
  assert abs(x.data[0] - 3.0) < 0.2


def test_adamw_warmup_is_linear():
  opt = AdamW([Tensor([1.0], requires_grad=True)], lr=1.0, warmup_steps=10)
  assert opt.current_lr() == 0.0
  opt.step_count = 5
  assert opt.current_lr() == pytest.approx(0.5)
  opt.step_count = 50
  assert opt.current_lr() == pytest.approx(1.0)


# Checkpoints

def test_checkpoint_bit_exact(rng):
  tensors = {"w": rng.normal(size=(3, 4)), "b": rng.normal(size=4), "scalar": np.array(2.5)}
  payload = encode_checkpoint(tensors)
  assert payload[:4] == b"VQDT"
  assert struct.unpack("<II", payload[4:12]) == (1, 3)
  restored = decode_checkpoint(payload)
  assert list(restored) == ["w", "b", "scalar"]
  for name, value in tensors.items():
    assert restored[name].tobytes() == np.asarray(value, dtype="<f8").tobytes()


def test_checkpoint_rejects_bad_magic():
  with pytest.raises(CheckpointError):
    decode_checkpoint(b"NOPE" + bytes(8))


def test_checkpoint_rejects_truncation(rng):
  payload = encode_checkpoint({"w": rng.normal(size=5)})
  with pytest.raises(CheckpointError):
    decode_checkpoint(payload[:-3])
  with pytest.raises(CheckpointError):
    decode_checkpoint(payload + b"\x00")


def test_module_state_dict_mismatch():
  module = Module()
  module.add_param("w", np.zeros(3))
  with pytest.raises(CheckpointError):
    module.load_state_dict({"w": np.zeros(4)})
  with pytest.raises(CheckpointError):
    module.load_state_dict({"v": np.zeros(3)})
  with pytest.raises(NumericsError):
    module.add_param("w", np.zeros(1))
