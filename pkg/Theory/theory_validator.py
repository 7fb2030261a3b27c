"""
Theory Validation Module
Exact checks on finite distributions: predictive power of a model, the
model-induced posterior of the sensitive feature, negative-KL similarity,
and the identity tying the two together.

Tables are indexed [x_s, x_ns, y]. All logarithms are natural.
"""

import json
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import rel_entr

# Add parent directory to path to import config
sys.path.append(str(Path(__file__).parent.parent))
import config
from exceptions import ParameterError, ShapeMismatchError, StrictPositivityError

MASS_TOLERANCE = 1e-12


class DiscreteJoint:
    """
    Joint table p(x_s, x_ns, y).
    """

    def __init__(self, table):
        table = np.asarray(table, dtype=np.float64)
        if table.ndim != 3:
            raise ShapeMismatchError(f"Joint table must be 3-D [x_s, x_ns, y], got {table.shape}")
        if (table < 0).any():
            raise ParameterError("Joint table has negative entries")
        if abs(table.sum() - 1.0) > MASS_TOLERANCE:
            raise ParameterError(f"Joint table mass is {table.sum()!r}, expected 1")
        self.table = table

    @property
    def sizes(self):
        return self.table.shape

    def mass_xns(self, x_ns):
        return float(self.table[:, x_ns, :].sum())

    def mass_y_xns(self, y, x_ns):
        return float(self.table[:, x_ns, y].sum())

    def feature_given_xns(self, x_ns):
        """p(X_s | x_ns)"""
        mass = self.mass_xns(x_ns)
        if mass <= 0:
            raise StrictPositivityError(f"p(x_ns={x_ns}) is zero")
        return self.table[:, x_ns, :].sum(axis=1) / mass

    def label_given_features(self):
        """p(y | x_s, x_ns) table (requires every (x_s, x_ns) to have mass)."""
        mass = self.table.sum(axis=2, keepdims=True)
        if (mass <= 0).any():
            raise StrictPositivityError("Some (x_s, x_ns) has zero mass")
        return self.table / mass

    def to_dict(self):
        return {'table': self.table.tolist()}


class ModelLikelihood:
    """
    Model conditional p_f(y | x_s, x_ns); each [x_s, x_ns, :] slice sums to 1.

    strict=True (the default) also requires every entry to be positive.
    """

    def __init__(self, table, strict=True):
        table = np.asarray(table, dtype=np.float64)
        if table.ndim != 3:
            raise ShapeMismatchError(f"Likelihood table must be 3-D [x_s, x_ns, y], got {table.shape}")
        if (table < 0).any():
            raise ParameterError("Likelihood table has negative entries")
        if np.abs(table.sum(axis=2) - 1.0).max() > MASS_TOLERANCE:
            raise ParameterError("Each likelihood slice p_f(. | x_s, x_ns) must sum to 1")
        if strict and (table <= 0).any():
            raise StrictPositivityError("Model likelihood table has zero entries")
        self.table = table
        self.strict = strict

    def check_compatible(self, joint):
        if self.table.shape != joint.table.shape:
            raise ShapeMismatchError(f"Likelihood {self.table.shape} vs joint {joint.table.shape}")

    def to_dict(self):
        return {'table': self.table.tolist(), 'strict': self.strict}


def feature_posterior(joint, y, x_ns):
    """
    p(X_s | y, x_ns).

    Raises:
        StrictPositivityError: p(y, x_ns) = 0
    """
    column = joint.table[:, x_ns, y]
    mass = column.sum()
    if mass <= 0:
        raise StrictPositivityError(f"p(y={y}, x_ns={x_ns}) is zero")
    return column / mass


def model_marginal(model, joint, y, x_ns):
    """
    p_f(y | x_ns) = sum_{x_s} p_f(y | x_s, x_ns) p(x_s | x_ns).
    """
    model.check_compatible(joint)
    return float(np.dot(model.table[:, x_ns, y], joint.feature_given_xns(x_ns)))


def predictive_power(model, joint, x_ns, y):
    """
    Expected log-likelihood gain from observing x_s:
    E_{x_s ~ p(.|y, x_ns)} [log p_f(y|x_s, x_ns) - log p_f(y|x_ns)].

    Raises:
        StrictPositivityError: Zero model likelihood at a supported x_s
    """
    posterior = feature_posterior(joint, y, x_ns)
    supported = posterior > 0
    likelihood = model.table[:, x_ns, y]
    if (likelihood[supported] <= 0).any():
        raise StrictPositivityError(f"p_f(y={y} | x_s, x_ns={x_ns}) is zero on the posterior support")

    marginal = model_marginal(model, joint, y, x_ns)
    gain = np.log(likelihood[supported]) - np.log(marginal)
    return float(np.dot(posterior[supported], gain))


def model_posterior(model, joint, y, x_ns):
    """
    p_f(X_s | y, x_ns), proportional to p_f(y | X_s, x_ns) p(X_s | x_ns).

    Raises:
        StrictPositivityError: Zero normalizer
    """
    model.check_compatible(joint)
    unnormalized = model.table[:, x_ns, y] * joint.feature_given_xns(x_ns)
    total = unnormalized.sum()
    if total <= 0:
        raise StrictPositivityError(f"Model posterior normalizer is zero at y={y}, x_ns={x_ns}")
    return unnormalized / total


def kl_divergence(p, q):
    """D_KL(p || q) in nats."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeMismatchError(f"Distributions differ in shape: {p.shape} vs {q.shape}")
    if ((q <= 0) & (p > 0)).any():
        raise StrictPositivityError("q is zero where p has mass")
    return float(rel_entr(p, q).sum())


def kl_similarity(p, q):
    """S_KL(p || q) = -D_KL(p || q); at most 0, and 0 iff p = q."""
    return -kl_divergence(p, q)


@dataclass
class Theorem1Report:
    """Per-y identity checks plus the ordering check for one x_ns."""
    x_ns: int
    per_y: list = field(default_factory=list)
    hypothesis_holds: bool = False
    ordering_holds: object = None
    max_identity_gap: float = 0.0

    @property
    def identity_holds(self):
        return all(row['identity_holds'] for row in self.per_y)

    @property
    def passed(self):
        return self.identity_holds and self.ordering_holds is not False

    def to_dict(self):
        payload = asdict(self)
        payload['identity_holds'] = self.identity_holds
        payload['passed'] = self.passed
        return payload


def theorem1_verify(model_1, model_2, joint, x_ns,
                    identity_tolerance=config.THEORY_IDENTITY_TOLERANCE,
                    ordering_tolerance=config.THEORY_ORDERING_TOLERANCE):
    """
    Check, for every y with p(y, x_ns) > 0:

    (a) D_KL(p || p_f1) - D_KL(p || p_f2) == U_f2 - U_f1 (always holds);
    (b) if U_f1 >= U_f2 for every y, S_KL(p || p_f1) >= S_KL(p || p_f2).

    Here p = p(X_s | y, x_ns) and p_f = p_f(X_s | y, x_ns).

    Returns:
        Theorem1Report: ordering_holds is None when the hypothesis fails
    """
    model_1.check_compatible(joint)
    model_2.check_compatible(joint)

    rows = []
    for y in range(joint.sizes[2]):
        if joint.mass_y_xns(y, x_ns) <= 0:
            continue
        truth = feature_posterior(joint, y, x_ns)
        kl_1 = kl_divergence(truth, model_posterior(model_1, joint, y, x_ns))
        kl_2 = kl_divergence(truth, model_posterior(model_2, joint, y, x_ns))
        u_1 = predictive_power(model_1, joint, x_ns, y)
        u_2 = predictive_power(model_2, joint, x_ns, y)
        gap = abs((kl_1 - kl_2) - (u_2 - u_1))
        rows.append({
            'y': y,
            'u_1': u_1,
            'u_2': u_2,
            's_kl_1': -kl_1,
            's_kl_2': -kl_2,
            'kl_difference': kl_1 - kl_2,
            'power_difference': u_2 - u_1,
            'identity_gap': gap,
            'identity_holds': gap <= identity_tolerance,
        })

    hypothesis = bool(rows) and all(r['u_1'] >= r['u_2'] for r in rows)
    ordering = None
    if hypothesis:
        ordering = all(r['s_kl_1'] >= r['s_kl_2'] - ordering_tolerance for r in rows)

    return Theorem1Report(
        x_ns=x_ns,
        per_y=rows,
        hypothesis_holds=hypothesis,
        ordering_holds=ordering,
        max_identity_gap=max((r['identity_gap'] for r in rows), default=0.0),
    )


def random_simplex(rng, shape, floor=config.THEORY_PROBABILITY_FLOOR):
    """
    Random distributions along the last axis with every entry >= floor.
    """
    shape = tuple(shape)
    n = shape[-1]
    if n * floor >= 1.0:
        raise ParameterError(f"Floor {floor} too large for {n} outcomes")
    draws = rng.dirichlet(np.ones(n), size=shape[:-1])
    return floor + (1.0 - n * floor) * draws


def random_joint(rng, sizes, floor=config.THEORY_PROBABILITY_FLOOR):
    """Strictly positive random joint table of the given sizes."""
    flat = random_simplex(rng, (int(np.prod(sizes)),), floor)
    return DiscreteJoint(flat.reshape(sizes))


def random_likelihood(rng, sizes, floor=config.THEORY_PROBABILITY_FLOOR):
    """Strictly positive random model likelihood table."""
    return ModelLikelihood(random_simplex(rng, sizes, floor))


def uniform_likelihood(sizes):
    """p_f(y | x_s, x_ns) = 1/|Y|: a model that ignores every feature."""
    return ModelLikelihood(np.full(sizes, 1.0 / sizes[2]))


def true_likelihood(joint):
    """p(y | x_s, x_ns) from the joint, as a model likelihood."""
    return ModelLikelihood(joint.label_given_features())


def interpolate_likelihood(model, joint, weight):
    """
    (1 - weight) * p_f + weight * p(y | x_s, x_ns): moves a model toward the
    true conditional as weight goes from 0 to 1.
    """
    if not 0.0 <= weight <= 1.0:
        raise ParameterError(f"weight must lie in [0, 1], got {weight}")
    table = (1.0 - weight) * model.table + weight * joint.label_given_features()
    return ModelLikelihood(table / table.sum(axis=2, keepdims=True), strict=model.strict)


def random_sizes(rng, max_sizes=config.THEORY_MAX_SIZES):
    """Random (|X_s|, |X_ns|, |Y|) with |X_s|, |Y| >= 2 and |X_ns| >= 1."""
    max_s, max_ns, max_y = max_sizes
    return (int(rng.integers(2, max_s + 1)), int(rng.integers(1, max_ns + 1)),
            int(rng.integers(2, max_y + 1)))


def random_instance(rng, max_sizes=config.THEORY_MAX_SIZES, floor=config.THEORY_PROBABILITY_FLOOR):
    """
    A random (joint, model_1, model_2) triple.

    Returns:
        dict: {'joint', 'model_1', 'model_2'}
    """
    sizes = random_sizes(rng, max_sizes)
    return {
        'joint': random_joint(rng, sizes, floor),
        'model_1': random_likelihood(rng, sizes, floor),
        'model_2': random_likelihood(rng, sizes, floor),
    }


def sharpened_instance(rng, max_sizes=config.THEORY_MAX_SIZES, floor=config.THEORY_PROBABILITY_FLOOR):
    """
    A triple where model_1 is the true conditional and model_2 ignores x_s,
    so U_f2 = 0 <= U_f1 for every y.
    """
    sizes = random_sizes(rng, max_sizes)
    joint = random_joint(rng, sizes, floor)
    return {'joint': joint, 'model_1': true_likelihood(joint), 'model_2': uniform_likelihood(sizes)}


def instance_to_dict(instance):
    return {name: value.to_dict() for name, value in instance.items()}


def instance_from_dict(payload):
    return {
        'joint': DiscreteJoint(payload['joint']['table']),
        'model_1': ModelLikelihood(payload['model_1']['table'], payload['model_1'].get('strict', True)),
        'model_2': ModelLikelihood(payload['model_2']['table'], payload['model_2'].get('strict', True)),
    }


def save_instances(instances, output_path):
    """Write instance fixtures as JSON."""
    os.makedirs(os.path.dirname(output_path) or '.', exist_ok=True)
    with open(output_path, 'w') as f:
        json.dump([instance_to_dict(i) for i in instances], f)


def load_instances(input_path):
    if not os.path.exists(input_path):
        raise FileNotFoundError(f"Instance fixture not found: {input_path}")
    with open(input_path) as f:
        return [instance_from_dict(p) for p in json.load(f)]


def verify_instance(instance):
    """theorem1_verify over every x_ns of one instance."""
    joint = instance['joint']
    return [theorem1_verify(instance['model_1'], instance['model_2'], joint, x_ns)
            for x_ns in range(joint.sizes[1]) if joint.mass_xns(x_ns) > 0]


def run_theory_check(n_instances=config.THEORY_INSTANCES, seed=0,
                     max_sizes=config.THEORY_MAX_SIZES, instances=None, verbose=False):
    """
    Randomized sweep of the identity and ordering checks.

    Half the instances pair two random models; the other half pair the true
    conditional with a feature-blind model so the ordering hypothesis holds.

    Args:
        n_instances (int): Number of random instances (ignored with `instances`)
        seed (int): RNG seed
        max_sizes (tuple): Size caps (|X_s|, |X_ns|, |Y|)
        instances (list): Fixed instances to check instead of random ones
        verbose (bool): Stream one PASS/FAIL line per instance

    Returns:
        dict: Summary counts and per-instance reports
    """
    rng = np.random.default_rng(seed)
    if instances is None:
        instances = [
            (sharpened_instance if i % 2 else random_instance)(rng, max_sizes)
            for i in range(n_instances)
        ]

    summary = {
        'instances': len(instances),
        'checks': 0,
        'identity_failures': 0,
        'hypothesis_checks': 0,
        'ordering_violations': 0,
        'max_identity_gap': 0.0,
        'reports': [],
    }

    for i, instance in enumerate(instances):
        reports = verify_instance(instance)
        passed = all(r.passed for r in reports)
        for report in reports:
            summary['checks'] += 1
            summary['identity_failures'] += int(not report.identity_holds)
            summary['hypothesis_checks'] += int(report.hypothesis_holds)
            summary['ordering_violations'] += int(report.ordering_holds is False)
            summary['max_identity_gap'] = max(summary['max_identity_gap'], report.max_identity_gap)
        summary['reports'].append({'instance': i, 'sizes': list(instance['joint'].sizes),
                                   'passed': passed, 'checks': [r.to_dict() for r in reports]})
        if verbose:
            mark = "✓ PASS" if passed else "✗ FAIL"
            gap = max((r.max_identity_gap for r in reports), default=0.0)
            print(f"{mark} instance {i} sizes={instance['joint'].sizes} max gap={gap:.2e}")

    summary['passed'] = summary['identity_failures'] == 0 and summary['ordering_violations'] == 0
    return summary
