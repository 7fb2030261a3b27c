import csv
import math

import numpy as np
import pytest
import torch
import torch.nn as nn

from exceptions import AuxModeMismatchError, MaskBoundaryError, ParameterError, ShapeMismatchError
from Ingestion.auxiliary_knowledge import AuxKnowledge, MaskSpec, blur_image, render_mask
from Prior.gan_networks import DiscriminatorSet, build_prior_networks, build_toy_networks
from Prior.gan_trainer import (
    GanTrainConfig,
    PriorCheckpoint,
    blur_tensor,
    diversity_loss,
    gradient_penalty,
    local_patch,
    patch_window,
    sample_prior,
    save_traces_csv,
    train_prior,
    wasserstein_estimate,
    wgan_losses,
)


class SumCritic(nn.Module):
    def __init__(self, scale=1.0):
        super().__init__()
        self.scale = scale

    def forward(self, x):
        return self.scale * x.flatten(1).sum(dim=1)


class LinearCritic(nn.Module):
    def __init__(self, weight):
        super().__init__()
        self.weight = weight

    def forward(self, x):
        return x.flatten(1) @ self.weight


def two_mode_data(n=256, seed=0):
    rng = np.random.default_rng(seed)
    centers = np.array([[0.2, 0.2], [0.8, 0.8]], dtype=np.float32)
    points = centers[rng.integers(2, size=n)] + rng.normal(0, 0.03, size=(n, 2))
    return np.clip(points, 0.0, 1.0).astype(np.float32)


def toy_config(**overrides):
    settings = dict(lambda_div=0.0, learning_rate=1e-3, batch_size=32, iterations=5,
                    critic_steps=2, seed=0)
    settings.update(overrides)
    return GanTrainConfig(**settings)


# Loss terms

def test_wasserstein_estimate_of_ones_versus_zeros():
    real, fake = torch.ones(3, 1, 64, 64), torch.zeros(3, 1, 64, 64)
    critic = SumCritic()
    assert float(wasserstein_estimate(critic, real, fake)) == pytest.approx(4096.0)
    assert float(wasserstein_estimate(critic, fake, real)) == pytest.approx(-4096.0)


def test_wgan_losses_signs():
    d_set = DiscriminatorSet(SumCritic())
    critic_loss, gen_loss = wgan_losses(d_set, torch.ones(2, 1, 64, 64), torch.zeros(2, 1, 64, 64))
    assert float(critic_loss) == pytest.approx(-4096.0)
    assert float(gen_loss) == pytest.approx(0.0)


def test_wgan_losses_validate_batches():
    d_set = DiscriminatorSet(SumCritic())
    with pytest.raises(ShapeMismatchError):
        wgan_losses(d_set, torch.ones(2, 1, 4, 4), torch.ones(3, 1, 4, 4))
    with pytest.raises(ParameterError):
        wgan_losses(d_set, torch.ones(0, 1, 4, 4), torch.ones(0, 1, 4, 4))


def test_local_critic_adds_patch_terms():
    d_set = DiscriminatorSet(SumCritic(), SumCritic())
    d_set.local_d.input_shape = (1, 2, 2)
    critic_loss, _ = wgan_losses(d_set, torch.ones(1, 1, 4, 4), torch.zeros(1, 1, 4, 4), (0, 0))
    assert float(critic_loss) == pytest.approx(-(16.0 + 4.0))


def test_diversity_of_scaled_identity():
    z1, z2 = torch.randn(8, 5), torch.randn(8, 5)
    identity = lambda x: x
    assert float(diversity_loss(lambda z: 2 * z, identity, z1, z2)) == pytest.approx(2.0, rel=1e-5)
    assert float(diversity_loss(lambda z: -3 * z, identity, z1, z2)) == pytest.approx(3.0, rel=1e-5)
    constant = lambda z: torch.ones(z.shape[0], 4)
    assert float(diversity_loss(constant, identity, z1, z2)) == 0.0


def test_diversity_zero_distance_pairs():
    z = torch.randn(4, 3)
    z2 = z.clone()
    z2[0] += 1.0
    value = diversity_loss(lambda x: x, lambda x: x, z, z2)
    assert float(value) == pytest.approx(1.0, rel=1e-5)
    with pytest.raises(ParameterError):
        diversity_loss(lambda x: x, lambda x: x, z, z2, strict=True)
    assert float(diversity_loss(lambda x: x, lambda x: x, z, z.clone())) == 0.0


def test_diversity_gradient_matches_finite_differences():
    torch.manual_seed(0)
    weight = torch.randn(4, 3, dtype=torch.float64, requires_grad=True)
    z1 = torch.randn(6, 3, dtype=torch.float64)
    z2 = torch.randn(6, 3, dtype=torch.float64)
    features = torch.tanh

    def loss(w):
        return diversity_loss(lambda z: z @ w.T, features, z1, z2)

    analytic, = torch.autograd.grad(loss(weight), weight)
    eps = 1e-6
    numeric = torch.zeros_like(weight)
    with torch.no_grad():
        for i in range(4):
            for j in range(3):
                bump = torch.zeros_like(weight)
                bump[i, j] = eps
                numeric[i, j] = (loss(weight + bump) - loss(weight - bump)) / (2 * eps)
    torch.testing.assert_close(analytic, numeric, rtol=1e-5, atol=1e-7)


def test_penalty_with_zero_weight():
    real = torch.rand(4, 1, 4, 4)
    assert float(gradient_penalty(SumCritic(), real, torch.rand(4, 1, 4, 4), weight=0.0)) == 0.0


def test_penalty_vanishes_for_unit_norm_linear_critic():
    weight = torch.randn(16)
    critic = LinearCritic(weight / weight.norm())
    penalty = gradient_penalty(critic, torch.rand(5, 1, 4, 4), torch.rand(5, 1, 4, 4), weight=10.0)
    assert float(penalty) == pytest.approx(0.0, abs=1e-8)


def test_penalty_for_doubled_sum_critic():
    n = 16
    penalty = gradient_penalty(SumCritic(2.0), torch.rand(3, 1, 4, 4), torch.rand(3, 1, 4, 4), weight=10.0)
    assert float(penalty) == pytest.approx(10.0 * (2 * math.sqrt(n) - 1) ** 2, rel=1e-5)


def test_penalty_rejects_negative_weight():
    with pytest.raises(ParameterError):
        gradient_penalty(SumCritic(), torch.rand(2, 2), torch.rand(2, 2), weight=-1.0)


# Boundary patches

def test_patch_always_straddles_the_mask_boundary():
    mask = render_mask(MaskSpec('center'), 28, 28)
    rng = np.random.default_rng(0)
    for _ in range(1000):
        top, left = patch_window(mask, 14, rng)
        window = mask[top:top + 14, left:left + 14]
        assert window.shape == (14, 14)
        assert 0 < window.sum() < 14 * 14


def test_patch_window_is_seeded():
    mask = render_mask(MaskSpec('face_t'), 64, 64)
    assert patch_window(mask, 32, 7) == patch_window(mask, 32, 7)


def test_local_patch_crops_image():
    mask = render_mask(MaskSpec('center'), 28, 28)
    image = np.arange(28 * 28, dtype=np.float32).reshape(1, 28, 28)
    patch, (top, left) = local_patch(image, mask, 14, seed=3)
    assert patch.shape == (1, 14, 14)
    assert patch[0, 0, 0] == image[0, top, left]


def test_maskless_image_has_no_boundary():
    with pytest.raises(MaskBoundaryError):
        patch_window(np.zeros((28, 28), dtype=np.uint8), 14)
    with pytest.raises(MaskBoundaryError):
        patch_window(np.ones((28, 28), dtype=np.uint8), 14)
    with pytest.raises(ParameterError):
        patch_window(render_mask(MaskSpec('center'), 28, 28), 40)


def test_torch_blur_matches_image_blur():
    image = np.random.default_rng(1).random((1, 16, 16)).astype(np.float32)
    expected = blur_image(image, 1.5, 5)
    got = blur_tensor(torch.from_numpy(image[None]), 1.5, 5)[0].numpy()
    np.testing.assert_allclose(got, expected, atol=1e-5)


# Training

def test_training_without_diversity_records_traces():
    data = two_mode_data()
    prior = train_prior(build_toy_networks((2,), latent_dim=2, seed=0), data, train_config=toy_config())
    assert len(prior.traces) == 5
    assert all(row['diversity'] is None for row in prior.traces)
    assert all(row['reconstruction'] is None for row in prior.traces)
    assert all(row['wasserstein'] == -row['critic_loss'] for row in prior.traces)
    assert prior.feature_digest is None


def test_training_is_deterministic():
    data = two_mode_data()
    a = train_prior(build_toy_networks((2,), 2, seed=0), data, train_config=toy_config())
    b = train_prior(build_toy_networks((2,), 2, seed=0), data, train_config=toy_config())
    assert a.traces == b.traces


def test_diversity_needs_feature_extractor():
    with pytest.raises(ParameterError):
        train_prior(build_toy_networks((2,), 2), two_mode_data(), train_config=toy_config(lambda_div=0.5))


def test_diversity_term_is_traced():
    prior = train_prior(build_toy_networks((2,), 2), two_mode_data(), feature_extractor=lambda x: x,
                        train_config=toy_config(lambda_div=0.5))
    assert all(row['diversity'] >= 0 for row in prior.traces)


def test_public_shape_must_match_generator():
    with pytest.raises(ShapeMismatchError):
        train_prior(build_toy_networks((3,), 2), two_mode_data(), train_config=toy_config())


def test_corrupted_conv_prior_trains_a_few_steps(toy_samples):
    networks = build_prior_networks((1, 28, 28), latent_dim=8, aux_mode='corrupted', seed=0)
    settings = toy_config(batch_size=4, iterations=2, critic_steps=1, mask_spec=MaskSpec('center'))
    prior = train_prior(networks, toy_samples, train_config=settings)
    assert prior.aux_mode == 'corrupted'
    assert all(row['reconstruction'] is not None for row in prior.traces)

    sample = toy_samples[0]
    mask = render_mask(MaskSpec('center'), 28, 28)
    aux = AuxKnowledge('corrupted', image=sample.image * (1 - mask), mask=mask)
    images = sample_prior(prior.generator, np.zeros((2, 8)), aux)
    assert images.shape == (2, 1, 28, 28)
    with pytest.raises(AuxModeMismatchError):
        sample_prior(prior.generator, np.zeros(8))


def test_checkpoint_round_trip(tmp_path):
    prior = train_prior(build_toy_networks((2,), 2), two_mode_data(), train_config=toy_config())
    path = str(tmp_path / 'prior.pt')
    prior.save(path)
    restored = PriorCheckpoint.load(path)
    z = np.random.default_rng(0).normal(size=(6, 2))
    np.testing.assert_allclose(sample_prior(restored.generator, z), sample_prior(prior.generator, z))
    assert restored.traces == prior.traces
    assert restored.config_digest == prior.config_digest


def test_local_critic_must_match_aux_mode():
    generator, _ = build_prior_networks((1, 28, 28), latent_dim=8, aux_mode='none')
    _, corrupted_set = build_prior_networks((1, 28, 28), latent_dim=8, aux_mode='corrupted')
    with pytest.raises(AuxModeMismatchError):
        PriorCheckpoint(generator, corrupted_set, 'digest')


def test_traces_csv_leaves_absent_terms_empty(tmp_path):
    path = str(tmp_path / 'traces.csv')
    save_traces_csv([{'step': 0, 'critic_loss': 1.0, 'gen_loss': 2.0, 'diversity': None,
                      'penalty': 0.5, 'wasserstein': -1.0, 'reconstruction': None}], path)
    with open(path) as f:
        rows = list(csv.DictReader(f))
    assert rows[0]['diversity'] == '' and rows[0]['penalty'] == '0.5'


@pytest.mark.slow
def test_critic_estimate_shrinks_on_two_mode_data():
    data = two_mode_data(n=1024)
    prior = train_prior(build_toy_networks((2,), 2, hidden_dim=32, seed=0), data,
                        train_config=toy_config(iterations=1500, critic_steps=5, batch_size=64))
    early = np.mean([row['wasserstein'] for row in prior.traces[:50]])
    late = np.mean([row['wasserstein'] for row in prior.traces[-50:]])
    assert late < early
