import json
import math
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
import torch
import torch.nn as nn

import config
from exceptions import AttackFailedError, AuxModeMismatchError, ParameterError
from Attacks.inversion import (
    InversionConfig,
    emi_invert,
    gmi_invert,
    identity_loss,
    pii_inpaint,
    prior_loss,
    save_attack_result,
)
from Ingestion.auxiliary_knowledge import AuxKnowledge
from Models.classifiers import build_classifier
from Prior.gan_networks import DiscriminatorSet, PriorGenerator, build_toy_networks
from Prior.gan_trainer import PriorCheckpoint

SHAPE = (1, 1, 2)


class SumCritic(nn.Module):
    def forward(self, x):
        return x.flatten(1).sum(dim=1)


class ZeroCritic(nn.Module):
    def forward(self, x):
        return torch.zeros(x.shape[0], dtype=x.dtype)


class TwoModeGenerator(PriorGenerator):
    """z > 0 decodes to (1, 0), z < 0 to (0, 1)."""

    data_shape = SHAPE
    latent_dim = 1

    def forward(self, z, aux_image=None, aux_mask=None):
        w = torch.sigmoid(4.0 * z[:, :1])
        return torch.cat([w, 1 - w], dim=1).view(-1, *SHAPE)


class NanGenerator(PriorGenerator):
    data_shape = SHAPE
    latent_dim = 1

    def forward(self, z, aux_image=None, aux_mask=None):
        return (z * float('nan')).repeat(1, 2).view(-1, *SHAPE)


def biased_target(biases, input_shape=SHAPE):
    """softmax_net with zero weights, so probabilities come from the bias alone."""
    model = build_classifier('softmax_net', num_classes=len(biases), input_shape=input_shape)
    with torch.no_grad():
        model.net.classifier.weight.zero_()
        model.net.classifier.bias.copy_(torch.tensor(biases, dtype=torch.float32))
    return model


def pixel_target():
    """Class 0 likes the first pixel, class 1 the second."""
    model = build_classifier('softmax_net', num_classes=2, input_shape=SHAPE)
    with torch.no_grad():
        model.net.classifier.weight.copy_(torch.tensor([[5.0, -5.0], [-5.0, 5.0]]))
        model.net.classifier.bias.zero_()
    return model


def toy_prior(seed=0):
    generator, d_set = build_toy_networks(SHAPE, latent_dim=2, seed=seed)
    return PriorCheckpoint(generator, d_set, 'toy')


QUICK = InversionConfig(restarts=2, iterations=5, batch_size=4, learning_rate=0.01)


# Losses

@pytest.mark.parametrize('biases, expected', [
    ((100.0, -100.0), 0.0),
    ((0.0, 0.0), math.log(2.0)),
    ((-1000.0, 1000.0), -math.log(config.PROBABILITY_FLOOR)),
])
def test_identity_loss_values(biases, expected):
    target = biased_target(biases)
    loss = identity_loss(target, torch.rand(3, *SHAPE), 0)
    assert float(loss) == pytest.approx(expected, abs=1e-5)


def test_identity_loss_floor_is_about_27_63():
    assert -math.log(config.PROBABILITY_FLOOR) == pytest.approx(27.63, abs=0.01)


def test_identity_loss_rejects_unknown_label():
    with pytest.raises(ParameterError):
        identity_loss(biased_target((0.0, 0.0)), torch.rand(1, *SHAPE), 7)


def test_identity_loss_gradient_matches_finite_differences():
    target = build_classifier('softmax_net', num_classes=3, input_shape=(1, 2, 2), seed=1)
    target.net.double()
    x = torch.rand(1, 1, 2, 2, dtype=torch.float64, requires_grad=True)
    analytic, = torch.autograd.grad(identity_loss(target, x, 2), x)

    eps = 1e-6
    numeric = torch.zeros_like(x)
    with torch.no_grad():
        for idx in np.ndindex(*x.shape):
            bump = torch.zeros_like(x)
            bump[idx] = eps
            numeric[idx] = (identity_loss(target, x + bump, 2) - identity_loss(target, x - bump, 2)) / (2 * eps)
    torch.testing.assert_close(analytic, numeric, rtol=1e-5, atol=1e-8)


def test_prior_loss_is_negative_critic_score():
    d_set = DiscriminatorSet(SumCritic())
    assert float(prior_loss(d_set, torch.ones(1, 1, 28, 28))) == pytest.approx(-784.0)
    assert prior_loss(d_set, torch.ones(2, 1, 4, 4), reduction='none').tolist() == [-16.0, -16.0]
    with pytest.raises(ParameterError):
        prior_loss(d_set, torch.ones(1, 1, 4, 4), reduction='max')


# GMI / PII

def test_gmi_without_identity_term_equals_pii():
    prior, target = toy_prior(), pixel_target()
    settings = InversionConfig(lambda_id=0.0, restarts=2, iterations=5, batch_size=4, learning_rate=0.01)
    gmi = gmi_invert(prior, target, 1, None, settings)
    pii = pii_inpaint(prior, None, settings, label=1)
    np.testing.assert_array_equal(gmi.image, pii.image)
    np.testing.assert_array_equal(gmi.latent, pii.latent)
    assert gmi.chosen_restart == pii.chosen_restart
    assert pii.identity_loss is None


def test_gmi_keeps_restart_with_lowest_identity_loss():
    result = gmi_invert(toy_prior(), pixel_target(), 0, None, QUICK)
    finals = [r['identity'] for r in result.restart_losses]
    assert result.identity_loss == min(finals)
    assert len(result.traces) == 2 and len(result.traces[0]) == 5
    assert result.image.shape == SHAPE


def test_gmi_is_seeded():
    a = gmi_invert(toy_prior(), pixel_target(), 0, None, QUICK)
    b = gmi_invert(toy_prior(), pixel_target(), 0, None, QUICK)
    np.testing.assert_array_equal(a.image, b.image)


def test_gmi_finds_the_labelled_mode():
    prior = PriorCheckpoint(TwoModeGenerator(), DiscriminatorSet(ZeroCritic()), 'two-mode')
    settings = InversionConfig(restarts=3, iterations=200, batch_size=8, learning_rate=0.02, seed=0)
    for label, pixel in ((0, 0), (1, 1)):
        result = gmi_invert(prior, pixel_target(), label, None, settings)
        assert result.image.reshape(-1)[pixel] > 0.9


def test_concurrent_attacks_share_networks_without_touching_them():
    prior, target = toy_prior(), pixel_target()
    sequential = [gmi_invert(prior, target, label, None, QUICK).image for label in (0, 1)]
    with ThreadPoolExecutor(max_workers=2) as pool:
        concurrent = list(pool.map(lambda label: gmi_invert(prior, target, label, None, QUICK).image,
                                   (0, 1)))
    emi_invert(target, 0, None, QUICK)

    for a, b in zip(sequential, concurrent):
        np.testing.assert_allclose(a, b, atol=1e-6)
    networks = (prior.generator, prior.discriminators, target.net)
    params = [p for net in networks for p in net.parameters()]
    assert all(p.requires_grad and p.grad is None for p in params)


def test_aux_mode_must_match_prior():
    aux = AuxKnowledge('blurred', image=np.zeros(SHAPE, dtype=np.float32))
    with pytest.raises(AuxModeMismatchError):
        gmi_invert(toy_prior(), pixel_target(), 0, aux, QUICK)


def test_label_must_be_a_target_class():
    with pytest.raises(ParameterError):
        gmi_invert(toy_prior(), pixel_target(), 4, None, QUICK)


def test_all_restarts_aborting_fails_the_attack():
    prior = PriorCheckpoint(NanGenerator(), DiscriminatorSet(SumCritic()), 'nan')
    with pytest.raises(AttackFailedError):
        pii_inpaint(prior, None, QUICK)


# EMI

def test_emi_without_iterations_returns_mid_gray():
    result = emi_invert(pixel_target(), 0, None, InversionConfig(restarts=1, iterations=0))
    assert np.all(result.image == config.EMI_INIT_VALUE)
    assert result.prior_loss is None


def test_emi_without_iterations_returns_aux_image():
    aux_image = np.array([[[0.2, 0.7]]], dtype=np.float32)
    aux = AuxKnowledge('blurred', image=aux_image)
    result = emi_invert(pixel_target(), 0, aux, InversionConfig(restarts=1, iterations=0))
    np.testing.assert_array_equal(result.image, aux_image)


def test_emi_first_step_follows_negative_gradient():
    target = build_classifier('softmax_net', num_classes=3, input_shape=(1, 2, 2), seed=2)
    lr = 0.01
    x0 = torch.full((1, 1, 2, 2), config.EMI_INIT_VALUE, requires_grad=True)
    grad, = torch.autograd.grad(identity_loss(target, x0, 1, reduction='sum'), x0)

    settings = InversionConfig(restarts=1, iterations=1, learning_rate=lr, optimizer='sgd_momentum')
    result = emi_invert(target, 1, None, settings)
    step = result.image - config.EMI_INIT_VALUE
    np.testing.assert_allclose(step, -lr * grad[0].numpy(), rtol=1e-4, atol=1e-7)


def test_emi_moves_only_hidden_pixels_and_stays_in_range():
    aux_image = np.array([[[0.0, 0.6]]], dtype=np.float32)
    mask = np.array([[1, 0]], dtype=np.uint8)
    aux = AuxKnowledge('corrupted', image=aux_image, mask=mask)
    settings = InversionConfig(restarts=2, iterations=50, learning_rate=5.0, check_pixel_range=True)
    result = emi_invert(pixel_target(), 0, aux, settings)
    assert result.image[0, 0, 1] == pytest.approx(0.6)
    assert result.image[0, 0, 0] > 0.0
    assert 0.0 <= result.image.min() and result.image.max() <= 1.0


# Config and output

def test_mnist_preset():
    preset = InversionConfig.for_mnist(restarts=2)
    assert preset.optimizer == 'sgd_nesterov'
    assert preset.learning_rate == 0.01
    assert preset.iterations == 3000
    assert preset.restarts == 2


@pytest.mark.parametrize('kwargs', [
    {'restarts': 0},
    {'iterations': -1},
    {'lambda_id': -1.0},
    {'optimizer': 'adam'},
    {'latent_clamp': 0.0},
])
def test_invalid_inversion_config(kwargs):
    with pytest.raises(ParameterError):
        InversionConfig(**kwargs)


def test_attack_result_directory(tmp_path):
    result = gmi_invert(toy_prior(), pixel_target(), 0, None, QUICK)
    out = save_attack_result(result, str(tmp_path / 'gmi'))
    assert sorted(os.listdir(out)) == ['metadata.json', 'recon.png', 'restart_0.csv', 'restart_1.csv']
    with open(os.path.join(out, 'metadata.json')) as f:
        metadata = json.load(f)
    assert metadata['chosen_restart'] == result.chosen_restart
    assert metadata['attack'] == 'gmi'
