"""Unit tests for the AdaLN-conditioned transformer denoiser."""

import numpy as np
import pytest

from codecomposer.config import DenoiserConfig, DiffusionConfig
from codecomposer.denoiser import DenoiserArchitecture, DenoiserModel, adaln, denoiser_forward, timestep_embedding
from codecomposer.diffusion import build_schedule, train_diffusion, vlb_loss
from codecomposer.errors import CheckpointError, DenoiserError, DiffusionError
from codecomposer.numerics import (
  Tensor, backward, cross_entropy, directional_gradient_check, layer_norm, tensor_sum,
)
from codecomposer.vqvae import TokenSequence


K, L, STYLES, T = 6, 8, 3, 10


@pytest.fixture
def architecture():
  return DenoiserArchitecture(codebook_size=K, length=L, styles=STYLES, timesteps=T,
                              config=DenoiserConfig(blocks=2, d_model=16, heads=2))


@pytest.fixture
def model(architecture):
  return DenoiserModel(architecture, np.random.default_rng(0))


def random_batch(rng, batch=4):
  xt = rng.integers(0, K + 1, size=(batch, L))
  t = rng.integers(1, T + 1, size=batch)
  y = rng.integers(0, STYLES, size=batch)
  return xt, t, y


# AdaLN

def test_adaln_identity_modulation(rng):
  """Scale 1 and shift 0 reduce to plain layer norm."""
  h = Tensor(rng.normal(size=(2, 5, 4)))
  t_embed, y_embed = Tensor(rng.normal(size=(2, 4))), Tensor(rng.normal(size=(2, 4)))
  out = adaln(h, t_embed, y_embed, Tensor(np.zeros((4, 4))), Tensor(np.ones(4)),
              Tensor(np.zeros((4, 4))), Tensor(np.zeros(4)))
  np.testing.assert_allclose(out.data, layer_norm(h, np.ones(4), np.zeros(4)).data, atol=1e-12)


def test_adaln_distinguishes_styles(rng):
  h = Tensor(np.repeat(rng.normal(size=(1, 5, 4)), 2, axis=0))
  t_embed = Tensor(np.repeat(rng.normal(size=(1, 4)), 2, axis=0))
  y_embed = Tensor(rng.normal(size=(2, 4)))
  weights = [Tensor(rng.normal(size=shape)) for shape in ((4, 4), (4,), (4, 4), (4,))]
  out = adaln(h, t_embed, y_embed, *weights).data
  assert not np.allclose(out[0], out[1])


def test_timestep_embedding_shape():
  embed = timestep_embedding(np.array([0, 1, 50]), 8)
  assert embed.shape == (3, 8)
  np.testing.assert_array_equal(embed[0], [0, 0, 0, 0, 1, 1, 1, 1])


# Forward pass

def test_rows_are_distributions(model, rng):
  xt, t, y = random_batch(rng)
  probs = model.predict(xt, t, y)
  assert probs.shape == (4, L, K)
  assert np.all(np.abs(probs.sum(axis=-1) - 1.0) < 1e-9)


def test_zero_head_gives_uniform(model, rng):
  model.params["head.weight"].data[:] = 0.0
  model.params["head.bias"].data[:] = 0.0
  xt, t, y = random_batch(rng)
  assert np.array_equal(model.predict(xt, t, y), np.full((4, L, K), 1.0 / K))


def test_timestep_changes_output(model, rng):
  xt = rng.integers(0, K + 1, size=L)
  early = denoiser_forward(xt, 1, 0, model)
  late = denoiser_forward(xt, T, 0, model)
  assert not np.allclose(early, late)


def test_style_changes_output(model, rng):
  xt = TokenSequence(rng.integers(0, K, size=L), K)
  assert not np.allclose(denoiser_forward(xt, 3, 0, model), denoiser_forward(xt, 3, 2, model))


def test_forward_is_deterministic(model, rng):
  xt, t, y = random_batch(rng)
  np.testing.assert_array_equal(model.predict(xt, t, y), model.predict(xt, t, y))


def test_mask_tokens_accepted(model):
  probs = denoiser_forward(np.full(L, K), T, 1, model)
  assert probs.shape == (L, K)


@pytest.mark.parametrize("xt, t, y", [
  (np.full((1, L), K + 1), [1], [0]),
  (np.zeros((1, L + 1)), [1], [0]),
  (np.zeros((1, L)), [0], [0]),
  (np.zeros((1, L)), [T + 1], [0]),
  (np.zeros((1, L)), [1], [STYLES]),
  (np.zeros((2, L)), [1], [0]),
])
def test_invalid_inputs(model, xt, t, y):
  with pytest.raises(DenoiserError):
    model.logits(xt, t, y)


def test_forward_single_sequence_only(model):
  with pytest.raises(DenoiserError):
    denoiser_forward(np.zeros((2, L), dtype=np.int64), 1, 0, model)


def test_attention_rows(model, rng):
  attention: list = []
  xt, t, y = random_batch(rng, batch=3)
  model.logits(xt, t, y, collect_attention=attention)
  assert len(attention) == 2
  for weights in attention:
    assert weights.shape == (3, 2, L, L)
    assert np.all(weights >= 0)
    np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-12)


def test_permutation_equivariance_without_positions(model, rng):
  model.params["position_embedding"].data[:] = 0.0
  xt, t, y = random_batch(rng, batch=2)
  perm = rng.permutation(L)
  np.testing.assert_allclose(model.predict(xt[:, perm], t, y), model.predict(xt, t, y)[:, perm], atol=1e-12)


def test_positions_break_equivariance(model, rng):
  xt = np.arange(L) % K
  perm = np.roll(np.arange(L), 1)
  shifted = model.predict(xt[None, perm], np.array([2]), np.array([0]))[0]
  assert not np.allclose(shifted, model.predict(xt[None], np.array([2]), np.array([0]))[0][perm])


# Gradients

def test_every_parameter_receives_gradient(model, rng):
  xt, t, y = random_batch(rng, batch=6)
  xt[:, 0] = K  # make sure [MASK] is embedded too
  targets = rng.integers(0, K, size=(6, L))
  backward(cross_entropy(model.logits(xt, t, y), targets))
  silent = [name for name, param in model.params.items() if not np.any(param.grad)]
  assert silent == []


def test_style_embedding_gradient(model, rng):
  xt, t, _ = random_batch(rng, batch=2)
  y = np.array([1, 1])
  weights = rng.normal(size=(2, L, K))
  backward(tensor_sum(model.logits(xt, t, y) * weights))
  grad = model.params["style_embedding"].grad
  assert np.any(grad[1])
  assert not np.any(grad[[0, 2]])


def test_dropout_only_in_training(architecture, rng):
  arch = architecture.model_copy(update={"config": DenoiserConfig(blocks=1, d_model=16, heads=2, dropout=0.5)})
  model = DenoiserModel(arch, np.random.default_rng(0))
  xt, t, y = random_batch(rng)
  train_a = model.logits(xt, t, y, training=True, rng=np.random.default_rng(1)).data
  train_b = model.logits(xt, t, y, training=True, rng=np.random.default_rng(2)).data
  assert not np.allclose(train_a, train_b)
  np.testing.assert_array_equal(model.logits(xt, t, y).data, model.logits(xt, t, y).data)


@pytest.mark.parametrize("seed", range(5))
def test_vlb_loss_gradient_matches_finite_differences(architecture, seed):
  """The full training loss, with t and x_t drawn from the same seed on every evaluation."""
  rng = np.random.default_rng(seed)
  model = DenoiserModel(architecture, rng)
  schedule = build_schedule(T, K, gamma_bar_final=0.9, alpha_bar_final=0.01)
  x0 = rng.integers(0, K, size=(3, L))
  y = rng.integers(0, STYLES, size=3)

  def loss():
    return vlb_loss(x0, model, schedule, y, np.random.default_rng(100 + seed), aux_weight=1e-2).total

  assert directional_gradient_check(loss, model.parameters(), rng, directions=100) < 1e-4


# Persistence

def test_save_load_round_trip(model, tmp_path, rng):
  path = tmp_path / "denoiser.vqdt"
  model.save(path)
  restored = DenoiserModel.load(path)
  assert restored.architecture == model.architecture
  xt, t, y = random_batch(rng)
  np.testing.assert_array_equal(restored.predict(xt, t, y), model.predict(xt, t, y))


def test_load_rejects_mismatched_weights(model, tmp_path):
  path = tmp_path / "denoiser.vqdt"
  model.save(path)
  other = DenoiserArchitecture(codebook_size=K + 1, length=L, styles=STYLES, timesteps=T,
                               config=model.architecture.config)
  path.with_suffix(".json").write_text(other.model_dump_json())
  with pytest.raises(CheckpointError):
    DenoiserModel.load(path)


# Training

def toy_tokens():
  """Each style repeats its own fixed sequence."""
  patterns = np.array([[0, 1, 2, 3, 0, 1, 2, 3], [4, 4, 5, 5, 4, 4, 5, 5], [1, 3, 5, 1, 3, 5, 1, 3]])
  labels = np.repeat(np.arange(STYLES), 6)
  return patterns[labels], labels


def test_training_is_deterministic(architecture, fast_optimizer):
  tokens, labels = toy_tokens()
  schedule = build_schedule(T, K, gamma_bar_final=0.9, alpha_bar_final=0.01)
  config = DiffusionConfig(timesteps=T, steps=5)
  histories = []
  for _ in range(2):
    model = DenoiserModel(architecture, np.random.default_rng(0))
    result = train_diffusion(model, tokens, labels, schedule, config, fast_optimizer, np.random.default_rng(4))
    histories.append(result.history)
  assert histories[0] == histories[1]
  assert len(histories[0]) == 5


def test_training_rejects_empty_tokens(model, fast_optimizer, rng):
  schedule = build_schedule(T, K, gamma_bar_final=0.9, alpha_bar_final=0.01)
  with pytest.raises(DiffusionError):
    train_diffusion(model, np.zeros((0, L)), np.zeros(0), schedule, DiffusionConfig(timesteps=T),
                    fast_optimizer, rng)


@pytest.mark.slow
def test_training_reduces_loss(architecture, fast_optimizer):
  tokens, labels = toy_tokens()
  schedule = build_schedule(T, K, gamma_bar_final=0.9, alpha_bar_final=0.01)
  model = DenoiserModel(architecture, np.random.default_rng(0))
  result = train_diffusion(model, tokens, labels, schedule, DiffusionConfig(timesteps=T, steps=300),
                           fast_optimizer, np.random.default_rng(0))
  assert np.mean(result.history[-50:]) < 0.7 * np.mean(result.history[:50])
  assert result.prior_term > 0
