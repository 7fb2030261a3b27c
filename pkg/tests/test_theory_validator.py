import math

import numpy as np
import pytest

from exceptions import ParameterError, ShapeMismatchError, StrictPositivityError
from Theory.theory_validator import (
    DiscreteJoint,
    ModelLikelihood,
    feature_posterior,
    interpolate_likelihood,
    kl_similarity,
    load_instances,
    model_marginal,
    model_posterior,
    predictive_power,
    random_instance,
    run_theory_check,
    save_instances,
    theorem1_verify,
    true_likelihood,
    uniform_likelihood,
)


@pytest.fixture
def two_by_one_by_two():
    """p(X_s | y=0) = (0.9, 0.1), p(X_s) = (0.5, 0.5), p_f(y=0 | x_s) = (0.8, 0.2)."""
    joint = np.zeros((2, 1, 2))
    joint[0, 0] = [0.45, 0.05]
    joint[1, 0] = [0.05, 0.45]
    model = np.zeros((2, 1, 2))
    model[0, 0] = [0.8, 0.2]
    model[1, 0] = [0.2, 0.8]
    return DiscreteJoint(joint), ModelLikelihood(model)


def test_hand_computed_predictive_power(two_by_one_by_two):
    joint, model = two_by_one_by_two
    np.testing.assert_allclose(feature_posterior(joint, 0, 0), [0.9, 0.1])
    assert model_marginal(model, joint, 0, 0) == pytest.approx(0.5, abs=1e-12)
    expected = 0.9 * math.log(1.6) + 0.1 * math.log(0.4)
    assert predictive_power(model, joint, 0, 0) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.3314, abs=1e-4)


def test_relabeling_feature_values_keeps_power(two_by_one_by_two):
    joint, model = two_by_one_by_two
    swapped = predictive_power(ModelLikelihood(model.table[::-1]), DiscreteJoint(joint.table[::-1]), 0, 0)
    assert swapped == pytest.approx(predictive_power(model, joint, 0, 0), abs=1e-12)


def test_feature_blind_model_has_no_power(two_by_one_by_two):
    joint, _ = two_by_one_by_two
    blind = uniform_likelihood(joint.sizes)
    assert predictive_power(blind, joint, 0, 1) == 0.0
    assert model_marginal(blind, joint, 1, 0) == pytest.approx(0.5)
    np.testing.assert_allclose(model_posterior(blind, joint, 0, 0), joint.feature_given_xns(0))


def test_marginal_over_labels_sums_to_one():
    rng = np.random.default_rng(0)
    instance = random_instance(rng, (5, 4, 3))
    joint, model = instance['joint'], instance['model_1']
    total = sum(model_marginal(model, joint, y, 0) for y in range(joint.sizes[2]))
    assert total == pytest.approx(1.0, abs=1e-12)


def test_independent_feature_posterior_is_marginal():
    p_s = np.array([0.2, 0.3, 0.5])
    p_rest = np.array([[0.1, 0.3], [0.4, 0.2]])
    joint = DiscreteJoint(p_s[:, None, None] * p_rest[None, :, :])
    np.testing.assert_allclose(feature_posterior(joint, 1, 0), p_s, atol=1e-12)


def test_feature_posterior_matches_long_hand_normalization():
    rng = np.random.default_rng(4)
    table = rng.random((3, 2, 2))
    joint = DiscreteJoint(table / table.sum())
    column = joint.table[:, 1, 0]
    np.testing.assert_allclose(feature_posterior(joint, 0, 1), column / column.sum(), atol=1e-12)


def test_perfect_model_recovers_true_posterior():
    rng = np.random.default_rng(1)
    joint = random_instance(rng, (4, 3, 3))['joint']
    perfect = true_likelihood(joint)
    for y in range(joint.sizes[2]):
        np.testing.assert_allclose(model_posterior(perfect, joint, y, 0),
                                   feature_posterior(joint, y, 0), atol=1e-12)


def test_one_hot_atom_gives_one_hot_posterior():
    table = np.zeros((2, 1, 2))
    table[1, 0, 0] = 1.0
    joint = DiscreteJoint(table)
    np.testing.assert_array_equal(feature_posterior(joint, 0, 0), [0.0, 1.0])
    with pytest.raises(StrictPositivityError):
        feature_posterior(joint, 1, 0)


def test_kl_similarity_values():
    assert kl_similarity([0.3, 0.7], [0.3, 0.7]) == 0.0
    expected = -(0.5 * math.log(2.0) + 0.5 * math.log(2.0 / 3.0))
    assert kl_similarity([0.5, 0.5], [0.25, 0.75]) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(-0.1438, abs=1e-4)
    with pytest.raises(StrictPositivityError):
        kl_similarity([0.5, 0.5], [1.0, 0.0])
    with pytest.raises(ShapeMismatchError):
        kl_similarity([1.0], [0.5, 0.5])


def test_table_validation():
    with pytest.raises(ParameterError):
        DiscreteJoint(np.full((2, 1, 2), 0.3))
    with pytest.raises(ShapeMismatchError):
        DiscreteJoint(np.ones((2, 2)) / 4)
    with pytest.raises(StrictPositivityError):
        ModelLikelihood(np.array([[[1.0, 0.0]]]))
    assert ModelLikelihood(np.array([[[1.0, 0.0]]]), strict=False).strict is False
    with pytest.raises(ParameterError):
        ModelLikelihood(np.array([[[0.5, 0.6]]]))


def test_identical_models_have_zero_difference(two_by_one_by_two):
    joint, model = two_by_one_by_two
    report = theorem1_verify(model, model, joint, 0)
    assert report.hypothesis_holds and report.ordering_holds
    assert all(row['kl_difference'] == 0.0 for row in report.per_y)
    assert report.passed


def test_identity_holds_on_random_instances():
    summary = run_theory_check(n_instances=1000, seed=0)
    assert summary['identity_failures'] == 0
    assert summary['ordering_violations'] == 0
    assert summary['max_identity_gap'] <= 1e-9
    assert summary['hypothesis_checks'] > 0
    assert summary['passed']


def test_sharpening_toward_truth_orders_similarity():
    rng = np.random.default_rng(2)
    instance = random_instance(rng, (5, 4, 3))
    joint, base = instance['joint'], instance['model_1']
    sharper = interpolate_likelihood(base, joint, 1.0)
    for x_ns in range(joint.sizes[1]):
        report = theorem1_verify(sharper, uniform_likelihood(joint.sizes), joint, x_ns)
        assert report.hypothesis_holds
        assert report.ordering_holds


def test_interpolation_weight_bounds(two_by_one_by_two):
    joint, model = two_by_one_by_two
    with pytest.raises(ParameterError):
        interpolate_likelihood(model, joint, 1.5)


def test_instance_fixture_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    instances = [random_instance(rng) for _ in range(3)]
    path = str(tmp_path / 'instances.json')
    save_instances(instances, path)
    summary = run_theory_check(instances=load_instances(path))
    assert summary['instances'] == 3
    assert summary['passed']
    with pytest.raises(FileNotFoundError):
        load_instances(str(tmp_path / 'missing.json'))
