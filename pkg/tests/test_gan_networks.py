import pytest
import torch

import config
from exceptions import AuxModeMismatchError, ParameterError, ShapeMismatchError
from Prior.gan_networks import build_prior_networks, build_toy_networks, composite, local_patch_size


@pytest.mark.parametrize('data_shape', config.SUPPORTED_PRIOR_SHAPES)
@pytest.mark.parametrize('aux_mode', config.AUX_MODES)
def test_generator_and_critics_fit_the_data_shape(data_shape, aux_mode):
    generator, d_set = build_prior_networks(data_shape, latent_dim=8, aux_mode=aux_mode, seed=0)
    generator.eval()
    z = torch.randn(2, 8)
    aux_image = torch.rand(2, *data_shape) if aux_mode != 'none' else None
    aux_mask = torch.zeros(2, 1, *data_shape[1:]) if aux_mode == 'corrupted' else None

    with torch.no_grad():
        images = generator.generate(z, aux_image, aux_mask)
        assert images.shape == (2, *data_shape)
        assert float(images.min()) >= 0.0 and float(images.max()) <= 1.0
        assert d_set.global_d(images).shape == (2,)

    if aux_mode == 'corrupted':
        p = local_patch_size(data_shape)
        assert d_set.patch_size == p
        assert d_set.local_d(images[..., :p, :p]).shape == (2,)
    else:
        assert d_set.local_d is None


def test_corrupted_generation_keeps_visible_pixels():
    generator, _ = build_prior_networks((1, 28, 28), latent_dim=8, aux_mode='corrupted')
    generator.eval()
    aux_image = torch.full((1, 1, 28, 28), 0.3)
    aux_mask = torch.zeros(1, 1, 28, 28)
    aux_mask[..., 7:21, 7:21] = 1
    with torch.no_grad():
        out = generator.generate(torch.randn(3, 8), aux_image, aux_mask)
    visible = (aux_mask == 0).expand_as(out)
    assert torch.all(out[visible] == 0.3)


def test_composite_takes_generated_pixels_under_mask():
    raw = torch.ones(1, 1, 2, 2)
    aux = torch.zeros(1, 1, 2, 2)
    mask = torch.tensor([[[[1.0, 0.0], [0.0, 1.0]]]])
    assert composite(raw, aux, mask).flatten().tolist() == [1.0, 0.0, 0.0, 1.0]


def test_aux_generator_requires_payload():
    generator, _ = build_prior_networks((1, 28, 28), latent_dim=8, aux_mode='blurred')
    generator.eval()
    with pytest.raises(AuxModeMismatchError):
        generator.generate(torch.randn(2, 8))
    with pytest.raises(ShapeMismatchError):
        generator.generate(torch.randn(2, 8), torch.rand(2, 1, 20, 20))


def test_latent_shape_checked():
    generator, _ = build_prior_networks((1, 28, 28), latent_dim=8)
    with pytest.raises(ShapeMismatchError):
        generator(torch.randn(2, 9))


@pytest.mark.parametrize('kwargs', [
    {'data_shape': (1, 32, 32)},
    {'data_shape': (1, 28, 28), 'latent_dim': 0},
    {'data_shape': (1, 28, 28), 'aux_mode': 'inpainted'},
])
def test_invalid_prior_arguments(kwargs):
    with pytest.raises(ParameterError):
        build_prior_networks(**kwargs)


def test_toy_networks_are_seeded():
    g1, d1 = build_toy_networks((2,), latent_dim=3, seed=5)
    g2, d2 = build_toy_networks((2,), latent_dim=3, seed=5)
    z = torch.randn(4, 3)
    torch.testing.assert_close(g1(z), g2(z))
    assert g1(z).shape == (4, 2)
    assert d1.global_d(g1(z)).shape == (4,)
    assert d1.local_d is None
