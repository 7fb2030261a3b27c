"""
Experiment Configuration Module
Reads declarative INI experiment files into a validated ExperimentConfig.
"""

import configparser
import os
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

# Add parent directory to path to import config
sys.path.append(str(Path(__file__).parent.parent))
import config
from exceptions import ConfigError
from Attacks.inversion import InversionConfig
from Ingestion.auxiliary_knowledge import MASK_KINDS, MaskSpec
from Models.classifiers import ARCHITECTURES, ARCHITECTURE_FLAGS
from Models.dp_trainer import DPConfig
from Models.trainer import TrainConfig
from Prior.gan_trainer import GanTrainConfig

SECTIONS = ('experiment', 'data', 'target', 'evaluation', 'prior', 'attack', 'metrics', 'sweep')
TARGET_MODES = ('plain', 'dp')
POWER_AXES = ('train_size', 'dropout', 'batch_norm')


@dataclass
class ExperimentConfig:
    """
    Everything a run needs. Typed sub-configs carry the optimizer settings;
    the flat fields carry data, labels and file locations.
    """
    name: str = 'experiment'
    seed: int = 0
    output_dir: str = config.OUTPUT_DIR
    cache_dir: str = config.CACHE_DIR
    attacks: tuple = config.ATTACKS
    attacked_labels: tuple = ()
    images_per_label: int = config.IMAGES_PER_LABEL
    parallel_labels: int = 1

    # data
    dataset: str = 'mnist'
    test_dataset: Optional[str] = None
    normalization: tuple = config.DEFAULT_NORMALIZATION
    private_labels: tuple = config.MNIST_PRIVATE_LABELS
    public_labels: tuple = config.MNIST_PUBLIC_LABELS
    train_fraction: float = config.PRIVATE_TRAIN_FRACTION
    public_fraction: float = 1.0
    augment_pairs: int = 0
    augment_points: int = 1

    # target
    target_architecture: str = 'mnist_cnn_target'
    target_mode: str = 'plain'
    target_flags: dict = field(default_factory=dict)
    target_train_size: float = 1.0
    target_train: TrainConfig = field(default_factory=TrainConfig)
    target_dp: Optional[DPConfig] = None

    # evaluation classifier
    eval_architecture: str = 'mnist_eval_cnn3'
    eval_dataset: Optional[str] = None
    eval_test_dataset: Optional[str] = None
    eval_train: TrainConfig = field(default_factory=TrainConfig)

    # prior
    aux_mode: str = 'none'
    latent_dim: int = config.LATENT_DIM
    mask_spec: MaskSpec = field(default_factory=MaskSpec)
    prior_train: GanTrainConfig = field(default_factory=GanTrainConfig)

    # attack
    inversion: InversionConfig = field(default_factory=InversionConfig)

    # metrics
    top_k: int = config.TOP_K
    psnr_max_value: float = config.PSNR_MAX_VALUE

    # sweeps
    noise_ratios: tuple = ()
    power_axis: Optional[str] = None
    power_values: tuple = ()

    source_path: Optional[str] = None

    # Stage payloads feeding the cache digests

    def data_section(self):
        return {
            'dataset': self.dataset, 'test_dataset': self.test_dataset,
            'normalization': list(self.normalization),
            'private_labels': sorted(self.private_labels), 'public_labels': sorted(self.public_labels),
            'train_fraction': self.train_fraction, 'public_fraction': self.public_fraction,
            'augment_pairs': self.augment_pairs, 'augment_points': self.augment_points,
            'seed': self.seed,
        }

    def target_section(self):
        return {
            'architecture': self.target_architecture, 'mode': self.target_mode,
            'flags': self.target_flags, 'train_size': self.target_train_size,
            'train': self.target_train.to_dict() if self.target_mode == 'plain' else None,
            'dp': self.target_dp.to_dict() if self.target_mode == 'dp' else None,
        }

    def eval_section(self):
        return {
            'architecture': self.eval_architecture, 'dataset': self.eval_dataset or self.dataset,
            'test_dataset': self.eval_test_dataset, 'normalization': list(self.normalization),
            'train': self.eval_train.to_dict(),
        }

    def prior_section(self):
        return {
            'aux_mode': self.aux_mode, 'latent_dim': self.latent_dim,
            'mask': asdict(self.mask_spec), 'train': self.prior_train.to_dict(),
        }

    def attack_section(self):
        return {
            'attacks': list(self.attacks), 'labels': list(self.attacked_labels),
            'images_per_label': self.images_per_label, 'inversion': self.inversion.to_dict(),
            'mask': asdict(self.mask_spec), 'aux_mode': self.aux_mode,
        }

    def to_dict(self):
        return {
            'name': self.name, 'seed': self.seed,
            'data': self.data_section(), 'target': self.target_section(),
            'evaluation': self.eval_section(), 'prior': self.prior_section(),
            'attack': self.attack_section(),
            'metrics': {'top_k': self.top_k, 'psnr_max_value': self.psnr_max_value},
            'sweep': {'noise_ratios': list(self.noise_ratios), 'power_axis': self.power_axis,
                      'power_values': list(self.power_values)},
        }

    @property
    def digest(self):
        return config.digest(self.to_dict())

    @property
    def setting(self):
        """Short label of the attack setting for result tables."""
        if self.aux_mode == 'corrupted':
            return f"corrupted-{self.mask_spec.kind}"
        return self.aux_mode

    def validate(self):
        """
        Schema checks that must pass before any stage runs.

        Raises:
            ConfigError: On the first violation found
        """
        for role, architecture in (('target', self.target_architecture),
                                   ('evaluation', self.eval_architecture)):
            if architecture not in ARCHITECTURES:
                raise ConfigError(f"Unknown {role} architecture '{architecture}'")
        unknown_flags = set(self.target_flags) - set(ARCHITECTURE_FLAGS.get(self.target_architecture, ()))
        if unknown_flags:
            raise ConfigError(f"Architecture '{self.target_architecture}' does not accept {sorted(unknown_flags)}")

        for name in (self.dataset, self.test_dataset, self.eval_dataset, self.eval_test_dataset):
            if name is not None and name not in config.DATASET_REGISTRY and not os.path.isdir(name):
                raise ConfigError(f"Dataset '{name}' is neither a registry id nor a directory")

        overlap = set(self.private_labels) & set(self.public_labels)
        if overlap:
            raise ConfigError(f"Private and public labels overlap on {sorted(overlap)}")
        if not self.private_labels:
            raise ConfigError("No private labels configured")
        stray = set(self.attacked_labels) - set(self.private_labels)
        if stray:
            raise ConfigError(f"Attacked labels {sorted(stray)} are not private labels")

        unknown_attacks = set(self.attacks) - set(config.ATTACKS)
        if unknown_attacks:
            raise ConfigError(f"Unknown attacks {sorted(unknown_attacks)}")
        if self.aux_mode not in config.AUX_MODES:
            raise ConfigError(f"Unknown aux mode '{self.aux_mode}'")
        if self.target_mode not in TARGET_MODES:
            raise ConfigError(f"Unknown target mode '{self.target_mode}'")
        if self.target_mode == 'dp' and self.target_dp is None:
            raise ConfigError("target mode 'dp' needs DP settings")
        if self.images_per_label < 1 or self.parallel_labels < 1:
            raise ConfigError("images_per_label and parallel_labels must be >= 1")
        if not 0.0 < self.public_fraction <= 1.0 or not 0.0 < self.target_train_size <= 1.0:
            raise ConfigError("public_fraction and train_size must lie in (0, 1]")
        if self.top_k < 1:
            raise ConfigError("top_k must be >= 1")
        if any(r < 0 for r in self.noise_ratios):
            raise ConfigError("Noise ratios must be >= 0")
        if self.power_axis is not None and self.power_axis not in POWER_AXES:
            raise ConfigError(f"Unknown power-sweep axis '{self.power_axis}', expected one of {POWER_AXES}")
        return self


def _split_list(text, cast):
    return tuple(cast(item.strip()) for item in text.split(',') if item.strip())


def _parse_bool(text):
    lowered = str(text).strip().lower()
    if lowered in ('1', 'true', 'yes', 'on'):
        return True
    if lowered in ('0', 'false', 'no', 'off'):
        return False
    raise ValueError(f"Not a boolean: {text}")


class _SectionReader:
    """Typed getters over one INI section with defaults."""

    def __init__(self, parser, section):
        self.name = section
        self.values = parser[section] if parser.has_section(section) else {}
        self.used = set()

    def get(self, key, cast, default):
        if key not in self.values or str(self.values[key]).strip() == '':
            return default
        self.used.add(key)
        raw = self.values[key]
        try:
            return cast(raw)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"[{self.name}] {key} = {raw!r}: {e}") from e

    def get_list(self, key, cast, default):
        return self.get(key, lambda raw: _split_list(raw, cast), default)

    def unused(self):
        return set(self.values) - self.used


def _optional_str(raw):
    return raw.strip() or None


def load_experiment_config(config_path, seed=None, output_dir=None, cache_dir=None):
    """
    Parse and validate an INI experiment file.

    Args:
        config_path (str): Path to the .ini file
        seed (int): Overrides [experiment] seed
        output_dir (str): Overrides [experiment] output_dir
        cache_dir (str): Overrides [experiment] cache_dir

    Returns:
        ExperimentConfig

    Raises:
        ConfigError: Unreadable file, unknown keys or invalid values
    """
    if not os.path.exists(config_path):
        raise ConfigError(f"Config file not found: {config_path}")

    parser = configparser.ConfigParser()
    try:
        parser.read(config_path)
    except configparser.Error as e:
        raise ConfigError(f"Cannot parse {config_path}: {e}") from e

    unknown_sections = set(parser.sections()) - set(SECTIONS)
    if unknown_sections:
        raise ConfigError(f"Unknown sections {sorted(unknown_sections)}")

    readers = {name: _SectionReader(parser, name) for name in SECTIONS}
    ex, data, tgt, ev, pr, at, me, sw = (readers[n] for n in SECTIONS)
    defaults = ExperimentConfig()

    try:
        global_seed = seed if seed is not None else ex.get('seed', int, 0)

        train_defaults = TrainConfig()
        target_train = TrainConfig(
            optimizer=tgt.get('optimizer', str, train_defaults.optimizer),
            learning_rate=tgt.get('learning_rate', float, train_defaults.learning_rate),
            batch_size=tgt.get('batch_size', int, train_defaults.batch_size),
            momentum=tgt.get('momentum', float, train_defaults.momentum),
            weight_decay=tgt.get('weight_decay', float, train_defaults.weight_decay),
            epochs=tgt.get('epochs', int, train_defaults.epochs),
            seed=global_seed,
        )

        target_mode = tgt.get('mode', str, 'plain')
        target_dp = None
        if target_mode == 'dp' or tgt.get('noise_ratio', float, None) is not None:
            target_dp = DPConfig(
                clip_norm=tgt.get('clip_norm', float, config.DP_CLIP_NORM),
                noise_ratio=tgt.get('noise_ratio', float, 1.0),
                delta=tgt.get('delta', float, config.DP_DELTA),
                epochs=tgt.get('dp_epochs', int, config.DP_EPOCHS),
                batch_size=tgt.get('dp_batch_size', int, config.DP_BATCH_SIZE),
                learning_rate=tgt.get('dp_learning_rate', float, None),
                seed=global_seed,
            )

        flags = {}
        dropout = tgt.get('dropout', float, None)
        if dropout is not None:
            flags['dropout'] = dropout
        batch_norm = tgt.get('batch_norm', _parse_bool, None)
        if batch_norm is not None:
            flags['batch_norm'] = batch_norm

        eval_train = TrainConfig(
            optimizer=ev.get('optimizer', str, train_defaults.optimizer),
            learning_rate=ev.get('learning_rate', float, train_defaults.learning_rate),
            batch_size=ev.get('batch_size', int, train_defaults.batch_size),
            momentum=ev.get('momentum', float, train_defaults.momentum),
            weight_decay=ev.get('weight_decay', float, train_defaults.weight_decay),
            epochs=ev.get('epochs', int, train_defaults.epochs),
            seed=global_seed + 1,
        )

        mask_kind = pr.get('mask_kind', str, 'center')
        geometry = {}
        if mask_kind in MASK_KINDS:
            for key in config.default_mask_geometry(mask_kind):
                value = pr.get(f'mask_{key}', float, None)
                if value is not None:
                    geometry[key] = value
        mask_spec = MaskSpec(kind=mask_kind, geometry=geometry)
        gan_defaults = GanTrainConfig()
        prior_train = GanTrainConfig(
            lambda_div=pr.get('lambda_div', float, gan_defaults.lambda_div),
            learning_rate=pr.get('learning_rate', float, gan_defaults.learning_rate),
            beta1=pr.get('beta1', float, gan_defaults.beta1),
            beta2=pr.get('beta2', float, gan_defaults.beta2),
            batch_size=pr.get('batch_size', int, gan_defaults.batch_size),
            iterations=pr.get('iterations', int, gan_defaults.iterations),
            critic_steps=pr.get('critic_steps', int, gan_defaults.critic_steps),
            gp_weight=pr.get('gp_weight', float, gan_defaults.gp_weight),
            reconstruction_weight=pr.get('reconstruction_weight', float, gan_defaults.reconstruction_weight),
            seed=global_seed,
            mask_spec=mask_spec,
            blur_sigma=pr.get('blur_sigma', float, gan_defaults.blur_sigma),
            blur_kernel_size=pr.get('blur_kernel_size', int, gan_defaults.blur_kernel_size),
        )

        preset = at.get('preset', str, 'default')
        base_inversion = InversionConfig.for_mnist() if preset == 'mnist' else InversionConfig()
        inversion = replace(
            base_inversion,
            lambda_id=at.get('lambda_id', float, base_inversion.lambda_id),
            restarts=at.get('restarts', int, base_inversion.restarts),
            iterations=at.get('iterations', int, base_inversion.iterations),
            optimizer=at.get('optimizer', str, base_inversion.optimizer),
            learning_rate=at.get('learning_rate', float, base_inversion.learning_rate),
            momentum=at.get('momentum', float, base_inversion.momentum),
            batch_size=at.get('batch_size', int, base_inversion.batch_size),
            latent_clamp=at.get('latent_clamp', float, None),
            seed=global_seed,
        )

        private_labels = data.get_list('private_labels', int, defaults.private_labels)
        experiment = ExperimentConfig(
            name=ex.get('name', str, defaults.name),
            seed=global_seed,
            output_dir=output_dir or ex.get('output_dir', str, defaults.output_dir),
            cache_dir=cache_dir or ex.get('cache_dir', str, defaults.cache_dir),
            attacks=ex.get_list('attacks', str, defaults.attacks),
            attacked_labels=ex.get_list('attacked_labels', int,
                                        tuple(sorted(private_labels))[:config.ATTACK_LABELS_PER_RUN]),
            images_per_label=ex.get('images_per_label', int, defaults.images_per_label),
            parallel_labels=ex.get('parallel_labels', int, 1),
            dataset=data.get('dataset', str, defaults.dataset),
            test_dataset=data.get('test_dataset', _optional_str, None),
            normalization=data.get_list('normalization', float, defaults.normalization),
            private_labels=private_labels,
            public_labels=data.get_list('public_labels', int, defaults.public_labels),
            train_fraction=data.get('train_fraction', float, defaults.train_fraction),
            public_fraction=data.get('public_fraction', float, 1.0),
            augment_pairs=data.get('augment_pairs', int, 0),
            augment_points=data.get('augment_points', int, 1),
            target_architecture=tgt.get('architecture', str, defaults.target_architecture),
            target_mode=target_mode,
            target_flags=flags,
            target_train_size=tgt.get('train_size', float, 1.0),
            target_train=target_train,
            target_dp=target_dp,
            eval_architecture=ev.get('architecture', str, defaults.eval_architecture),
            eval_dataset=ev.get('dataset', _optional_str, None),
            eval_test_dataset=ev.get('test_dataset', _optional_str, None),
            eval_train=eval_train,
            aux_mode=pr.get('aux_mode', str, 'none'),
            latent_dim=pr.get('latent_dim', int, config.LATENT_DIM),
            mask_spec=mask_spec,
            prior_train=prior_train,
            inversion=inversion,
            top_k=me.get('top_k', int, config.TOP_K),
            psnr_max_value=me.get('psnr_max_value', float, config.PSNR_MAX_VALUE),
            noise_ratios=sw.get_list('noise_ratios', float, ()),
            power_axis=sw.get('power_axis', _optional_str, None),
            power_values=sw.get_list('power_values', float, ()),
            source_path=str(config_path),
        )
    except ConfigError:
        raise
    except ValueError as e:
        # ParameterError from the typed sub-configs
        raise ConfigError(str(e)) from e

    for reader in readers.values():
        stray = reader.unused()
        if stray:
            raise ConfigError(f"Unknown keys in [{reader.name}]: {sorted(stray)}")

    return experiment.validate()
