"""
Model-Inversion Attack Lab
Command-line entry point for the staged experiment pipeline.

Usage:
    python run_experiment.py run --config configs/mnist_default.ini
    python run_experiment.py train-target-dp --config configs/mnist_dp.ini --seed 1
    python run_experiment.py dp-sweep --config configs/mnist_dp.ini --noise-ratios 0,0.694,0.92,3,28
    python run_experiment.py power-sweep --config configs/mnist_default.ini --axis train_size --values 0.25,0.5,1.0
    python run_experiment.py theory-check --instances 1000
    python run_experiment.py report --manifest runs/mnist_default/manifest.json
"""

import argparse
import dataclasses
import os
import sys
from pathlib import Path

# Add module paths
sys.path.append(str(Path(__file__).parent))

import config
from exceptions import ConfigError, ParameterError, ReportError, StageError
from Experiments.experiment_config import load_experiment_config
from Experiments.pipeline import ExperimentPipeline
from Models.dp_trainer import DPConfig
from Output.reporter import ExperimentReporter, emit_report
from Theory.theory_validator import load_instances, run_theory_check

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG_ERROR = 2
EXIT_STAGE_ERROR = 3

# Subcommand -> last pipeline stage it runs
STAGE_COMMANDS = {
    'train-target': 'target',
    'train-target-dp': 'target',
    'train-prior': 'prior',
    'attack': 'attacks',
    'evaluate': 'metrics',
    'run': 'metrics',
}


def _float_list(text):
    try:
        return [float(item) for item in text.split(',') if item.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"Expected comma-separated numbers: {text}") from e


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=str, help='Experiment INI file')
    common.add_argument('--seed', type=int, default=None, help='Override the global seed')
    common.add_argument('--out', type=str, default=None, help='Override the output directory')
    common.add_argument('--cache', type=str, default=None, help='Override the checkpoint cache directory')
    common.add_argument('--quiet', action='store_true', help='Suppress progress output')

    parser = argparse.ArgumentParser(
        description='Model-inversion attack lab: train targets and priors, run GMI/EMI/PII, score and sweep',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Full MNIST experiment (data, target, evaluation, prior, attacks, metrics, report)
  python run_experiment.py run --config configs/mnist_default.ini

  # DP sweep over noise ratios
  python run_experiment.py dp-sweep --config configs/mnist_dp.ini --noise-ratios 0,0.694,0.92,3,28

  # Randomized check of the predictive-power / posterior identity
  python run_experiment.py theory-check --instances 1000 --seed 0
        """
    )
    sub = parser.add_subparsers(dest='command', required=True)

    for name, help_text in (
        ('train-target', 'Train (or reuse) the plain target network'),
        ('train-target-dp', 'Train (or reuse) the DP-SGD target network'),
        ('train-prior', 'Train (or reuse) the GAN prior'),
        ('attack', 'Run the configured attacks'),
        ('evaluate', 'Run attacks and score them'),
        ('run', 'Run every stage and emit the report'),
    ):
        sub.add_parser(name, parents=[common], help=help_text)

    dp = sub.add_parser('dp-sweep', parents=[common], help='Attack DP targets across noise ratios')
    dp.add_argument('--noise-ratios', type=_float_list, default=None,
                    help='Comma-separated sigma values (default: [sweep] noise_ratios)')

    power = sub.add_parser('power-sweep', parents=[common],
                           help='Correlate predictive power with GMI accuracy')
    power.add_argument('--axis', choices=['train_size', 'dropout', 'batch_norm'], default=None)
    power.add_argument('--values', type=_float_list, default=None)

    theory = sub.add_parser('theory-check', parents=[common],
                            help='Verify the predictive-power identity on random finite instances')
    theory.add_argument('--instances', type=int, default=config.THEORY_INSTANCES)
    theory.add_argument('--fixture', type=str, default=None, help='JSON instance fixture to check instead')

    report = sub.add_parser('report', parents=[common], help='Emit grids, tables and plots for a run')
    report.add_argument('--manifest', type=str, default=None,
                        help='manifest.json (default: <out>/<name>/manifest.json from --config)')

    return parser


def _load_config(args, force_dp=False):
    if not args.config:
        raise ConfigError(f"'{args.command}' needs --config")
    experiment = load_experiment_config(args.config, seed=args.seed, output_dir=args.out,
                                        cache_dir=args.cache)
    if force_dp:
        dp_config = experiment.target_dp or DPConfig(seed=experiment.seed)
        experiment = dataclasses.replace(experiment, target_mode='dp', target_dp=dp_config)
    return experiment.validate()


def run_theory(args, verbose):
    instances = load_instances(args.fixture) if args.fixture else None
    seed = args.seed if args.seed is not None else 0
    summary = run_theory_check(n_instances=args.instances, seed=seed, instances=instances,
                               verbose=verbose)

    print(f"\n{'=' * 70}")
    print("THEORY CHECK")
    print('=' * 70)
    print(f"  Instances: {summary['instances']}   checks: {summary['checks']}")
    print(f"  Identity failures: {summary['identity_failures']}   "
          f"max gap: {summary['max_identity_gap']:.2e}")
    print(f"  Hypothesis held: {summary['hypothesis_checks']}   "
          f"ordering violations: {summary['ordering_violations']}")
    print(f"  {'✓ PASS' if summary['passed'] else '✗ FAIL'}")

    if args.out:
        ExperimentReporter(verbose=verbose).save_json(
            {k: v for k, v in summary.items() if k != 'reports'} | {'seed': seed},
            os.path.join(args.out, 'theory_check.json'))
    return EXIT_OK if summary['passed'] else EXIT_FAILURE


def main(argv=None):
    """
    Main entry point.

    Returns:
        int: 0 success, 2 config error, 3 stage failure
    """
    args = build_parser().parse_args(argv)
    verbose = not args.quiet

    try:
        if args.command == 'theory-check':
            return run_theory(args, verbose)

        if args.command == 'report':
            manifest = args.manifest
            if manifest is None:
                experiment = _load_config(args)
                manifest = os.path.join(experiment.output_dir, experiment.name, config.MANIFEST_NAME)
            emit_report(manifest, verbose=verbose)
            return EXIT_OK

        experiment = _load_config(args, force_dp=args.command == 'train-target-dp')
        if verbose:
            print(f"\nModel-Inversion Attack Lab v{config.TOOL_VERSION}: {experiment.name} "
                  f"(config digest {experiment.digest}, seed {experiment.seed})")
        pipeline = ExperimentPipeline(experiment, verbose=verbose)

        if args.command == 'dp-sweep':
            pipeline.dp_sweep(args.noise_ratios)
        elif args.command == 'power-sweep':
            pipeline.predictive_power_sweep(args.axis, args.values)
        else:
            manifest = pipeline.run_stages(STAGE_COMMANDS[args.command])
            if args.command == 'run':
                emit_report(manifest, verbose=verbose)
        return EXIT_OK

    except (ConfigError, ParameterError) as e:
        print(f"\n✗ Config error: {e}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except (StageError, ReportError) as e:
        print(f"\n✗ {e}", file=sys.stderr)
        return EXIT_STAGE_ERROR
    except KeyboardInterrupt:
        print("\n\n⚠ Interrupted by user")
        return EXIT_FAILURE


if __name__ == '__main__':
    sys.exit(main())
