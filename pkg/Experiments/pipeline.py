"""
Experiment Pipeline Module
Runs the staged experiment (data -> target -> evaluation -> prior ->
attacks -> metrics) with a digest-keyed checkpoint cache and an atomically
written run manifest, plus the DP and predictive-power sweeps.
"""

import json
import math
import os
import sys
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import cv2
import numpy as np
import torch
from scipy.stats import spearmanr

# Add parent directory to path to import config
sys.path.append(str(Path(__file__).parent.parent))
import config
from exceptions import ParameterError, ReportError, StageError
from Attacks.inversion import (AttackResult, emi_invert, gmi_invert, image_to_uint8,
                               pii_inpaint, save_attack_result)
from Comparison.attack_metrics import AttackMetricsCalculator
from Ingestion.augmentation import augment_public_autoencoder
from Ingestion.auxiliary_knowledge import make_aux, render_mask, save_mask_png
from Ingestion.dataset_loader import (ImageSample, SplitSpec, load_dataset, samples_by_label,
                                      split_private_public, subsample, train_test_split)
from Models.classifiers import (build_classifier, canonical_flags, load_classifier,
                                save_classifier)
from Models.dp_trainer import DPConfig, train_classifier_dp
from Models.trainer import evaluate_accuracy, predictive_power_empirical, train_classifier
from Output.reporter import DP_SWEEP_FIELDS, POWER_SWEEP_FIELDS, ExperimentReporter
from Prior.gan_networks import build_prior_networks
from Prior.gan_trainer import PriorCheckpoint, save_traces_csv, train_prior

# Stages each pipeline target depends on, in execution order
STAGE_PLAN = {
    'data': ('data',),
    'target': ('data', 'target'),
    'evaluation': ('data', 'evaluation'),
    'prior': ('data', 'target', 'prior'),
    'attacks': ('data', 'target', 'prior', 'attacks'),
    'metrics': ('data', 'target', 'evaluation', 'prior', 'attacks', 'metrics'),
}

PRIOR_ATTACKS = ('gmi', 'pii')


@dataclass
class RunManifest:
    """
    Record of one run: what was computed, where it lives and how long it took.
    Every referenced path must exist when the manifest is written.
    """
    name: str
    run_dir: str
    config_digest: str
    seed: int
    tool_version: str = config.TOOL_VERSION
    config_path: Optional[str] = None
    model: str = ''
    setting: str = ''
    attacks: list = field(default_factory=list)
    stages: list = field(default_factory=list)
    checkpoints: dict = field(default_factory=dict)
    reports: dict = field(default_factory=dict)
    attack_images: list = field(default_factory=list)
    completed: bool = False
    error: Optional[str] = None

    def referenced_paths(self):
        paths = list(self.checkpoints.values())
        for stage in self.stages:
            paths.extend(stage.get('paths', {}).values())
        for key, value in self.reports.items():
            if isinstance(value, dict):
                paths.extend(value.values())
            elif value:
                paths.append(value)
        for item in self.attack_images:
            paths.extend(p for p in [item.get('target'), item.get('aux')] if p)
            paths.extend(item.get('recon', {}).values())
        return [p for p in paths if p]

    def missing_paths(self):
        return [p for p in self.referenced_paths() if not os.path.exists(p)]

    def stage(self, name):
        for record in self.stages:
            if record['name'] == name:
                return record
        return None

    def to_dict(self):
        return asdict(self)

    def write(self, output_path=None):
        """
        Atomically write manifest.json (temp file in the same directory, then rename).

        Raises:
            ReportError: A referenced path does not exist
        """
        missing = self.missing_paths()
        if missing:
            raise ReportError(missing)
        output_path = output_path or os.path.join(self.run_dir, config.MANIFEST_NAME)
        directory = os.path.dirname(output_path) or '.'
        os.makedirs(directory, exist_ok=True)

        fd, temp_path = tempfile.mkstemp(dir=directory, prefix='.manifest-', suffix='.json')
        try:
            with os.fdopen(fd, 'w') as f:
                json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            os.replace(temp_path, output_path)
        except BaseException:
            if os.path.exists(temp_path):
                os.remove(temp_path)
            raise
        return output_path

    @classmethod
    def load(cls, manifest_path):
        if not os.path.exists(manifest_path):
            raise FileNotFoundError(f"Manifest not found: {manifest_path}")
        with open(manifest_path) as f:
            return cls(**json.load(f))


@dataclass
class DataBundle:
    """Output of the data stage."""
    private_train: list
    private_test: list
    public: list
    data_shape: tuple
    # (label, index, ImageSample) for every attacked image
    attacked: list
    digest: str


@dataclass
class Artifact:
    """A stage product plus where it came from."""
    value: object
    digest: str
    path: str
    cache_hit: bool
    info: dict = field(default_factory=dict)


class ExperimentPipeline:
    """
    Staged model-inversion experiment.
    """

    def __init__(self, experiment_config, verbose=True):
        """
        Args:
            experiment_config (ExperimentConfig): Validated configuration
            verbose (bool): Print stage banners and progress bars
        """
        self.cfg = experiment_config.validate()
        self.verbose = verbose
        self.reporter = ExperimentReporter(verbose=verbose)
        self.run_dir = os.path.join(self.cfg.output_dir, self.cfg.name)
        self.cache_dir = self.cfg.cache_dir
        self._datasets = {}
        self._data = None
        self._step = 0
        self._current = None

        self.manifest = RunManifest(
            name=self.cfg.name,
            run_dir=self.run_dir,
            config_digest=self.cfg.digest,
            seed=self.cfg.seed,
            config_path=self.cfg.source_path,
            model=self.model_name(),
            setting=self.cfg.setting,
            attacks=list(self.cfg.attacks),
        )

    # ------------------------------------------------------------------
    # Bookkeeping
    # ------------------------------------------------------------------

    def _banner(self, title):
        self._step += 1
        if self.verbose:
            print(f"\n{'=' * 70}")
            print(f"Step {self._step}: {title}")
            print('=' * 70)

    def _record(self, name, artifact, started, paths=None):
        record = {
            'name': name,
            'digest': artifact.digest,
            'cache_hit': artifact.cache_hit,
            'seconds': round(time.perf_counter() - started, 3),
            'paths': dict(paths or ({'checkpoint': artifact.path} if artifact.path else {})),
        }
        self.manifest.stages.append(record)
        if self.verbose:
            state = "cache hit" if artifact.cache_hit else "computed"
            print(f"✓ {name}: {state} ({record['seconds']:.1f}s, digest {artifact.digest})")
        return record

    def _cache_path(self, stage, digest, suffix='.pt'):
        os.makedirs(self.cache_dir, exist_ok=True)
        return os.path.join(self.cache_dir, f"{stage}-{digest}{suffix}")

    def _load_info(self, path):
        with open(path) as f:
            return json.load(f)

    def _save_augmented(self, generated, path):
        images = np.stack([s.image for s in generated]).astype(np.float32)
        tmp = path + '.tmp.npz'
        np.savez_compressed(tmp, images=images)
        os.replace(tmp, path)

    def _load_augmented(self, path):
        with np.load(path) as data:
            return [ImageSample(image, config.UNLABELED) for image in data['images']]

    def _dataset(self, name):
        if name not in self._datasets:
            self._datasets[name] = load_dataset(name, self.cfg.normalization, verbose=self.verbose)
        return self._datasets[name]

    def model_name(self, dp_config=None):
        mode_dp = dp_config is not None or self.cfg.target_mode == 'dp'
        return f"{self.cfg.target_architecture}-dp" if mode_dp else self.cfg.target_architecture

    def image_seed(self, label, index):
        """Seed of the inversion run for one attacked image."""
        return self.cfg.seed + 1000 * int(label) + int(index)

    # ------------------------------------------------------------------
    # Stages
    # ------------------------------------------------------------------

    def load_data(self):
        """
        Data stage: load, split private/public, hold out the private test
        part, subsample/augment the public set and choose attacked images.
        Sources are re-read on every run; the autoencoder interpolations are
        cached by the data digest.

        Returns:
            DataBundle
        """
        if self._data is not None:
            return self._data
        cfg = self.cfg
        self._current = 'data'
        self._banner("Loading data")
        started = time.perf_counter()
        digest = config.digest(cfg.data_section())

        samples = self._dataset(cfg.dataset)
        spec = SplitSpec(frozenset(cfg.private_labels), frozenset(cfg.public_labels))
        private, public = split_private_public(samples, spec)
        if cfg.test_dataset:
            private_train = private
            private_test, _ = split_private_public(
                self._dataset(cfg.test_dataset), SplitSpec(frozenset(cfg.private_labels), frozenset()))
        else:
            private_train, private_test = train_test_split(private, cfg.train_fraction, cfg.seed)

        public = subsample(public, cfg.public_fraction, cfg.seed)
        summary_path = self._cache_path('data', digest, '.json')
        augmented_path = self._cache_path('data', digest, '-augmented.npz')
        hit = os.path.exists(summary_path)
        if cfg.augment_pairs > 0:
            if hit and os.path.exists(augmented_path):
                public = public + self._load_augmented(augmented_path)
            else:
                hit = False
                original = len(public)
                public = augment_public_autoencoder(public, pairs=cfg.augment_pairs,
                                                    interpolation_points=cfg.augment_points,
                                                    seed=cfg.seed, verbose=self.verbose)
                self._save_augmented(public[original:], augmented_path)

        attacked = []
        rng = np.random.default_rng(cfg.seed)
        grouped = samples_by_label(private_train)
        for label in sorted(cfg.attacked_labels):
            pool = grouped.get(label, [])
            if not pool:
                raise ParameterError(f"Attacked label {label} has no private training images")
            count = min(cfg.images_per_label, len(pool))
            chosen = sorted(rng.choice(len(pool), size=count, replace=False).tolist())
            attacked.extend((label, i, pool[j]) for i, j in enumerate(chosen))

        counts = {'private_train': len(private_train), 'private_test': len(private_test),
                  'public': len(public), 'attacked': len(attacked)}
        hit = hit and self._load_info(summary_path) == counts
        if not hit:
            self.reporter.save_json(counts, summary_path)

        self._data = DataBundle(private_train, private_test, public,
                                tuple(private_train[0].image.shape), attacked, digest)
        paths = {'summary': summary_path}
        if cfg.augment_pairs > 0:
            paths['augmented'] = augmented_path
        self._record('data', Artifact(self._data, digest, summary_path, hit), started, paths)
        if self.verbose:
            print(f"  private train {counts['private_train']}, private test {counts['private_test']}, "
                  f"public {counts['public']}, attacked images {counts['attacked']}")
        return self._data

    def train_target(self, flags=None, train_size=None, dp_config=None, stage_name='target'):
        """
        Target stage: plain or DP training, reused from cache on a digest match.

        Args:
            flags (dict): Architecture flag overrides
            train_size (float): Fraction of the private training set per label
            dp_config (DPConfig): Forces DP training with these settings

        Returns:
            Artifact: value is the ClassifierModel; info holds accuracies and
            the privacy report for DP targets
        """
        cfg = self.cfg
        bundle = self.load_data()
        self._current = stage_name
        self._banner(f"Target network ({stage_name})")
        started = time.perf_counter()

        flags = canonical_flags(cfg.target_architecture, {**cfg.target_flags, **(flags or {})})
        train_size = cfg.target_train_size if train_size is None else float(train_size)
        if dp_config is None and cfg.target_mode == 'dp':
            dp_config = cfg.target_dp
        payload = {
            'data': bundle.digest,
            'architecture': cfg.target_architecture,
            'flags': flags,
            'train_size': train_size,
            'mode': 'dp' if dp_config is not None else 'plain',
            'train': cfg.target_train.to_dict() if dp_config is None else None,
            'dp': dp_config.to_dict() if dp_config is not None else None,
        }
        digest = config.digest(payload)
        path = self._cache_path('target', digest)
        info_path = self._cache_path('target', digest, '.json')

        if os.path.exists(path) and os.path.exists(info_path):
            model, info, hit = load_classifier(path), self._load_info(info_path), True
        else:
            train_set = subsample(bundle.private_train, train_size, cfg.seed)
            model = build_classifier(cfg.target_architecture, input_shape=bundle.data_shape,
                                     seed=cfg.seed, classes=sorted(cfg.private_labels), **flags)
            if dp_config is None:
                model, info = train_classifier(model, train_set, bundle.private_test,
                                               cfg.target_train, verbose=self.verbose)
            else:
                model, privacy = train_classifier_dp(model, train_set, dp_config, verbose=self.verbose)
                info = {'train_acc': evaluate_accuracy(model, train_set),
                        'test_acc': evaluate_accuracy(model, bundle.private_test),
                        'privacy': privacy.to_dict()}
            save_classifier(model, path, payload)
            self.reporter.save_json(info, info_path)
            hit = False

        artifact = Artifact(model, digest, path, hit, info)
        self.manifest.checkpoints[stage_name] = path
        self._record(stage_name, artifact, started, {'checkpoint': path, 'info': info_path})
        return artifact

    def train_evaluation(self):
        """
        Evaluation stage: an independent classifier over every label of its dataset.

        Returns:
            Artifact: value is the ClassifierModel
        """
        cfg = self.cfg
        bundle = self.load_data()
        self._current = 'evaluation'
        self._banner("Evaluation classifier")
        started = time.perf_counter()

        digest = config.digest({'evaluation': cfg.eval_section(), 'seed': cfg.seed})
        path = self._cache_path('evaluation', digest)
        info_path = self._cache_path('evaluation', digest, '.json')

        if os.path.exists(path) and os.path.exists(info_path):
            model, info, hit = load_classifier(path), self._load_info(info_path), True
        else:
            samples = [s for s in self._dataset(cfg.eval_dataset or cfg.dataset)
                       if s.label != config.UNLABELED]
            if cfg.eval_test_dataset:
                train_set, test_set = samples, self._dataset(cfg.eval_test_dataset)
            else:
                train_set, test_set = train_test_split(samples, cfg.train_fraction, cfg.seed + 1)
            classes = sorted({s.label for s in train_set})
            test_set = [s for s in test_set if s.label in classes]
            model = build_classifier(cfg.eval_architecture, input_shape=bundle.data_shape,
                                     seed=cfg.seed + 1, classes=classes)
            model, info = train_classifier(model, train_set, test_set, cfg.eval_train,
                                           verbose=self.verbose)
            save_classifier(model, path, cfg.eval_section())
            self.reporter.save_json(info, info_path)
            hit = False

        artifact = Artifact(model, digest, path, hit, info)
        self.manifest.checkpoints['evaluation'] = path
        self._record('evaluation', artifact, started, {'checkpoint': path, 'info': info_path})
        return artifact

    def train_prior(self, target=None, lambda_div=None, stage_name='prior'):
        """
        Prior stage: WGAN-GP prior on the public set.

        Args:
            target (Artifact): Target artifact, required when lambda_div > 0
            lambda_div (float): Overrides the configured diversity weight

        Returns:
            Artifact: value is the PriorCheckpoint
        """
        cfg = self.cfg
        bundle = self.load_data()
        self._current = stage_name
        self._banner(f"GAN prior ({cfg.aux_mode})")
        started = time.perf_counter()

        train_config = cfg.prior_train
        if lambda_div is not None:
            train_config = replace(train_config, lambda_div=float(lambda_div))
        uses_target = train_config.lambda_div > 0
        if uses_target and target is None:
            raise ParameterError("A diversity-weighted prior needs the target network")

        payload = {
            'data': bundle.digest,
            'aux_mode': cfg.aux_mode,
            'latent_dim': cfg.latent_dim,
            'train': train_config.to_dict(),
            'target': target.digest if uses_target else None,
        }
        digest = config.digest(payload)
        path = self._cache_path('prior', digest)
        traces_path = self._cache_path('prior', digest, '-traces.csv')

        if os.path.exists(path):
            prior, hit = PriorCheckpoint.load(path), True
        else:
            networks = build_prior_networks(bundle.data_shape, cfg.latent_dim, cfg.aux_mode, cfg.seed)
            prior = train_prior(networks, bundle.public, target.value if uses_target else None,
                                train_config, verbose=self.verbose)
            prior.save(path)
            hit = False
        if not os.path.exists(traces_path):
            save_traces_csv(prior.traces, traces_path)

        artifact = Artifact(prior, digest, path, hit)
        self.manifest.checkpoints[stage_name] = path
        self._record(stage_name, artifact, started, {'checkpoint': path, 'traces': traces_path})
        return artifact

    def _aux_for(self, sample):
        cfg = self.cfg
        mask = None
        if cfg.aux_mode == 'corrupted':
            _, height, width = sample.image.shape
            mask = render_mask(cfg.mask_spec, height, width)
        return make_aux(sample, cfg.aux_mode, mask, cfg.prior_train.blur_sigma,
                        cfg.prior_train.blur_kernel_size)

    def _attack_image(self, target_model, prior, label, index, sample, attacks):
        """Every requested attack on one private image."""
        aux = self._aux_for(sample)
        inversion = replace(self.cfg.inversion, seed=self.image_seed(label, index))
        results = {}
        for attack in attacks:
            if attack == 'gmi':
                results[attack] = gmi_invert(prior, target_model, label, aux, inversion)
            elif attack == 'pii':
                results[attack] = pii_inpaint(prior, aux, inversion, label=label)
            elif attack == 'emi':
                results[attack] = emi_invert(target_model, label, aux, inversion)
        return results

    def _attack_label(self, target_model, prior, items, attacks):
        return [(label, index, self._attack_image(target_model, prior, label, index, sample, attacks))
                for label, index, sample in items]

    def run_attacks(self, target, prior=None, attacks=None, stage_name='attacks'):
        """
        Attacks stage: every requested attack on every attacked image.

        Labels run in parallel threads when parallel_labels > 1; each image
        has its own seed, so the results do not depend on scheduling.

        Returns:
            Artifact: value maps attack -> list of (label, index, AttackResult)
        """
        cfg = self.cfg
        bundle = self.load_data()
        attacks = [a for a in config.ATTACKS if a in (attacks or cfg.attacks)]
        if prior is None and any(a in PRIOR_ATTACKS for a in attacks):
            raise ParameterError(f"Attacks {PRIOR_ATTACKS} need a trained prior")
        self._current = stage_name
        self._banner(f"Attacks ({', '.join(a.upper() for a in attacks)})")
        started = time.perf_counter()

        payload = {
            'data': bundle.digest,
            'target': target.digest,
            'prior': prior.digest if prior is not None else None,
            'attack': cfg.attack_section(),
            'attacks': attacks,
            'blur': [cfg.prior_train.blur_sigma, cfg.prior_train.blur_kernel_size],
        }
        digest = config.digest(payload)
        path = self._cache_path('attacks', digest)

        if os.path.exists(path):
            stored = torch.load(path, map_location='cpu', weights_only=False)
            outcomes = {attack: [(label, index, AttackResult(**result))
                                 for label, index, result in stored[attack]]
                        for attack in attacks}
            hit = True
        else:
            grouped = {}
            for label, index, sample in bundle.attacked:
                grouped.setdefault(label, []).append((label, index, sample))
            prior_value = prior.value if prior is not None else None
            jobs = [grouped[label] for label in sorted(grouped)]

            if cfg.parallel_labels > 1:
                with ThreadPoolExecutor(max_workers=cfg.parallel_labels) as pool:
                    per_label = list(pool.map(
                        lambda items: self._attack_label(target.value, prior_value, items, attacks), jobs))
            else:
                per_label = [self._attack_label(target.value, prior_value, items, attacks) for items in jobs]

            outcomes = {attack: [] for attack in attacks}
            for rows in per_label:
                for label, index, results in rows:
                    for attack in attacks:
                        outcomes[attack].append((label, index, results[attack]))
            torch.save({attack: [(label, index, asdict(result)) for label, index, result in rows]
                        for attack, rows in outcomes.items()}, path)
            hit = False

        artifact = Artifact(outcomes, digest, path, hit)
        attack_images = self._write_attack_outputs(stage_name, outcomes)
        if stage_name == 'attacks':
            self.manifest.attack_images = attack_images
        self.manifest.checkpoints[stage_name] = path
        self._record(stage_name, artifact, started, {'results': path})
        return artifact

    def _write_attack_outputs(self, stage_name, outcomes):
        """Result directories plus target/aux PNGs for every attacked image."""
        base = os.path.join(self.run_dir, stage_name)
        images = []
        samples = {(label, index): sample for label, index, sample in self.load_data().attacked}
        for (label, index), sample in sorted(samples.items()):
            key = f"label_{label}_img_{index}"
            inputs = os.path.join(base, 'inputs', key)
            os.makedirs(inputs, exist_ok=True)
            target_png = os.path.join(inputs, 'target.png')
            cv2.imwrite(target_png, image_to_uint8(sample.image))
            aux_png = None
            if self.cfg.aux_mode != 'none':
                aux_png = os.path.join(inputs, 'aux.png')
                cv2.imwrite(aux_png, image_to_uint8(self._aux_for(sample).image))
            images.append({'label': int(label), 'index': int(index), 'target': target_png,
                           'aux': aux_png, 'recon': {}})

        if self.cfg.aux_mode == 'corrupted' and samples:
            _, height, width = next(iter(samples.values())).image.shape
            self.manifest.reports['mask'] = save_mask_png(
                render_mask(self.cfg.mask_spec, height, width), os.path.join(base, 'inputs', 'mask.png'))

        lookup = {(item['label'], item['index']): item for item in images}
        for attack, rows in outcomes.items():
            for label, index, result in rows:
                directory = save_attack_result(
                    result, os.path.join(base, attack, f"label_{label}_img_{index}"))
                lookup[(int(label), int(index))]['recon'][attack] = os.path.join(directory, 'recon.png')
        return images

    def evaluate(self, target, evaluation, attacks, stage_name='metrics'):
        """
        Metrics stage: one MetricsReport and one results row per attack.

        Returns:
            Artifact: value maps attack -> {'row', 'report'}
        """
        cfg = self.cfg
        bundle = self.load_data()
        self._current = stage_name
        self._banner("Attack metrics")
        started = time.perf_counter()

        payload = {
            'evaluation': evaluation.digest,
            'attacks': attacks.digest,
            'top_k': cfg.top_k,
            'psnr_max_value': cfg.psnr_max_value,
            'model': self.model_name(),
            'setting': cfg.setting,
        }
        digest = config.digest(payload)
        path = self._cache_path('metrics', digest, '.json')

        if os.path.exists(path):
            scored, hit = self._load_info(path), True
        else:
            calculator = AttackMetricsCalculator(evaluation.value, bundle.private_train,
                                                 target_digest=target.value.architecture_digest,
                                                 top_k=cfg.top_k, max_value=cfg.psnr_max_value)
            samples = {(label, index): sample for label, index, sample in bundle.attacked}
            scored = {}
            for attack, rows in attacks.value.items():
                results = [result for _, _, result in rows]
                truth = [samples[(label, index)].image for label, index, _ in rows]
                report = calculator.evaluate(results, ground_truth=truth)
                if self.verbose:
                    print(calculator.generate_report(report, f"{attack.upper()} METRICS"))
                scored[attack] = {
                    'row': report.to_csv_row(self.model_name(), attack, cfg.setting),
                    'report': report.to_dict(),
                }
            self.reporter.save_json(scored, path)
            scored = self._load_info(path)
            hit = False

        metric_paths = {}
        for attack, entry in scored.items():
            metric_paths[attack] = self.reporter.save_json(
                entry, os.path.join(self.run_dir, stage_name, f"{attack}.json"))
        if stage_name == 'metrics':
            self.manifest.reports['metrics'] = metric_paths

        artifact = Artifact(scored, digest, path, hit)
        self._record(stage_name, artifact, started, {'metrics': path})
        return artifact

    # ------------------------------------------------------------------
    # Runs
    # ------------------------------------------------------------------

    def _fail(self, error):
        self.manifest.completed = False
        self.manifest.error = f"{type(error).__name__}: {error}"
        try:
            self.manifest.write()
        except (OSError, ReportError):
            pass
        return StageError(f"Stage '{self._current}' failed: {error}", self.manifest)

    def run_stages(self, until='metrics'):
        """
        Run every stage `until` depends on and write the manifest.

        Args:
            until (str): One of STAGE_PLAN

        Returns:
            RunManifest

        Raises:
            StageError: A stage failed; the partial manifest is written
        """
        if until not in STAGE_PLAN:
            raise ParameterError(f"Unknown stage '{until}', expected one of {sorted(STAGE_PLAN)}")
        plan = STAGE_PLAN[until]
        cfg = self.cfg
        needs_prior = any(a in PRIOR_ATTACKS for a in cfg.attacks)

        try:
            self.load_data()
            target = self.train_target() if 'target' in plan else None
            evaluation = self.train_evaluation() if 'evaluation' in plan else None
            prior = None
            if 'prior' in plan and (needs_prior or until == 'prior'):
                prior = self.train_prior(target)
            if 'attacks' in plan:
                attacks = self.run_attacks(target, prior)
            if 'metrics' in plan:
                scored = self.evaluate(target, evaluation, attacks)
                rows = [scored.value[a]['row'] for a in config.ATTACKS if a in scored.value]
                results_path = os.path.join(self.run_dir, config.RESULTS_CSV_NAME)
                self.manifest.reports['results_csv'] = self.reporter.save_results_csv(rows, results_path)
                if self.verbose:
                    print(self.reporter.format_console_output(rows))
        except Exception as e:
            raise self._fail(e) from e

        self.manifest.completed = until == 'metrics'
        self.manifest.error = None
        path = self.manifest.write()
        if self.verbose:
            hits = sum(1 for s in self.manifest.stages if s['cache_hit'])
            print(f"\n✓ Manifest written to {path} ({hits}/{len(self.manifest.stages)} stages from cache)")
        return self.manifest

    def run(self):
        """Full experiment: every stage, results CSV and manifest."""
        return self.run_stages('metrics')

    # ------------------------------------------------------------------
    # Sweeps
    # ------------------------------------------------------------------

    def _sweep_prior(self):
        """Shared prior for sweeps: no diversity term, so no target dependence."""
        return self.train_prior(None, lambda_div=0.0, stage_name="prior[shared]")

    def _attack_accuracy(self, target, evaluation, attacks, tag):
        scored = self.evaluate(target, evaluation, attacks, stage_name=f'metrics[{tag}]')
        return {attack: float(entry['report']['attack_acc_top1']) for attack, entry in scored.value.items()}

    def dp_sweep(self, noise_ratios=None):
        """
        Train one DP target per noise ratio and attack each with GMI and PII.

        Args:
            noise_ratios (list): sigma values (>= 0); defaults to [sweep] noise_ratios

        Returns:
            dict: {'rows', 'csv', 'plot', 'json'}; empty rows and no
            training for an empty list
        """
        ratios = list(self.cfg.noise_ratios if noise_ratios is None else noise_ratios)
        if any(r < 0 for r in ratios):
            raise ParameterError(f"Noise ratios must be >= 0, got {ratios}")

        sweep_dir = os.path.join(self.run_dir, 'sweeps')
        report = {'kind': 'dp', 'rows': [], 'csv': None, 'plot': None, 'json': None}
        if not ratios:
            return report

        base = self.cfg.target_dp or DPConfig(seed=self.cfg.seed)
        try:
            evaluation = self.train_evaluation()
            prior = self._sweep_prior()
            for sigma in ratios:
                tag = f"sigma={sigma:g}"
                dp_config = replace(base, noise_ratio=float(sigma), learning_rate=None)
                target = self.train_target(dp_config=dp_config, stage_name=f'target[{tag}]')
                attacks = self.run_attacks(target, prior, attacks=PRIOR_ATTACKS,
                                           stage_name=f'attacks[{tag}]')
                acc = self._attack_accuracy(target, evaluation, attacks, tag)
                report['rows'].append({
                    'noise_ratio': float(sigma),
                    'epsilon': float(target.info['privacy']['epsilon']),
                    'target_test_acc': float(target.info['test_acc']),
                    'gmi_acc': acc['gmi'],
                    'pii_acc': acc['pii'],
                })
        except Exception as e:
            raise self._fail(e) from e

        report['csv'] = self.reporter.save_rows_csv(report['rows'], DP_SWEEP_FIELDS,
                                                    os.path.join(sweep_dir, 'dp_sweep.csv'))
        report['plot'] = self.reporter.plot_dp_sweep(report['rows'], os.path.join(sweep_dir, 'dp_sweep.png'))
        report['json'] = self.reporter.save_json(report, os.path.join(sweep_dir, 'dp_sweep.json'))
        self.manifest.reports['dp_sweep'] = {k: report[k] for k in ('csv', 'plot', 'json')}
        self.manifest.write()
        return report

    def predictive_power_sweep(self, axis=None, values=None):
        """
        Train one target per axis value, measure its empirical predictive
        power and its GMI attack accuracy, and rank-correlate the two.

        Args:
            axis (str): 'train_size', 'dropout' or 'batch_norm'
            values (list): Axis values

        Returns:
            dict: {'axis', 'rows', 'spearman' (None when undefined), 'csv', 'plot', 'json'}
        """
        axis = axis or self.cfg.power_axis
        values = list(self.cfg.power_values if values is None else values)
        overrides = [_axis_override(axis, v) for v in values]

        sweep_dir = os.path.join(self.run_dir, 'sweeps')
        report = {'kind': 'power', 'axis': axis, 'rows': [], 'spearman': None,
                  'csv': None, 'plot': None, 'json': None}
        if not values:
            return report

        try:
            evaluation = self.train_evaluation()
            prior = self._sweep_prior()
            for value, override in zip(values, overrides):
                tag = f"{axis}={value}"
                target = self.train_target(stage_name=f'target[{tag}]', **override)
                attacks = self.run_attacks(target, prior, attacks=('gmi',), stage_name=f'attacks[{tag}]')
                acc = self._attack_accuracy(target, evaluation, attacks, tag)
                power = predictive_power_empirical(target.value, self.load_data().private_test,
                                                   self.cfg.mask_spec)
                report['rows'].append({
                    'axis': axis,
                    'value': value,
                    'predictive_power': float(power),
                    'gmi_acc': acc['gmi'],
                    'target_test_acc': float(target.info['test_acc']),
                })
        except Exception as e:
            raise self._fail(e) from e

        report['spearman'] = rank_correlation([r['predictive_power'] for r in report['rows']],
                                              [r['gmi_acc'] for r in report['rows']])
        if self.verbose:
            rho = 'undefined' if report['spearman'] is None else f"{report['spearman']:.3f}"
            print(f"✓ Spearman correlation (power vs GMI accuracy): {rho}")

        stem = f'power_sweep_{axis}'
        report['csv'] = self.reporter.save_rows_csv(report['rows'], POWER_SWEEP_FIELDS,
                                                    os.path.join(sweep_dir, f'{stem}.csv'))
        report['plot'] = self.reporter.plot_power_sweep(report['rows'], os.path.join(sweep_dir, f'{stem}.png'),
                                                        report['spearman'])
        report['json'] = self.reporter.save_json(report, os.path.join(sweep_dir, f'{stem}.json'))
        self.manifest.reports[stem] = {k: report[k] for k in ('csv', 'plot', 'json')}
        self.manifest.write()
        return report


def rank_correlation(x, y):
    """Spearman rho, or None with fewer than two points or a constant column."""
    if len(x) < 2 or len(set(x)) < 2 or len(set(y)) < 2:
        return None
    rho = spearmanr(x, y).statistic
    return None if math.isnan(rho) else float(rho)


def _axis_override(axis, value):
    """train_target keyword arguments for one power-sweep value."""
    if axis == 'train_size':
        if not 0.0 < float(value) <= 1.0:
            raise ParameterError(f"train_size must lie in (0, 1], got {value}")
        return {'train_size': float(value)}
    if axis == 'dropout':
        if not 0.0 <= float(value) < 1.0:
            raise ParameterError(f"dropout must lie in [0, 1), got {value}")
        return {'flags': {'dropout': float(value)}}
    if axis == 'batch_norm':
        if float(value) not in (0.0, 1.0):
            raise ParameterError(f"batch_norm values must be 0 or 1, got {value}")
        return {'flags': {'batch_norm': bool(value)}}
    raise ParameterError(f"Unknown power-sweep axis '{axis}'")
