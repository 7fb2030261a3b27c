import json

import config
import run_experiment
from run_experiment import EXIT_CONFIG_ERROR, EXIT_OK, EXIT_STAGE_ERROR, main


def test_run_then_report(tiny_experiment, tmp_path):
    path = tiny_experiment()
    assert main(['run', '--config', path, '--quiet']) == EXIT_OK
    manifest = tmp_path / 'runs' / 'tiny' / config.MANIFEST_NAME
    assert manifest.exists()
    assert (tmp_path / 'runs' / 'tiny' / 'report' / 'metrics.csv').exists()
    assert main(['report', '--manifest', str(manifest), '--quiet']) == EXIT_OK
    assert main(['report', '--config', path, '--quiet']) == EXIT_OK


def test_out_and_seed_flags(tiny_experiment, tmp_path):
    out = tmp_path / 'other'
    assert main(['train-target', '--config', tiny_experiment(), '--out', str(out),
                 '--seed', '3', '--quiet']) == EXIT_OK
    with open(out / 'tiny' / config.MANIFEST_NAME) as f:
        manifest = json.load(f)
    assert manifest['seed'] == 3
    assert [s['name'] for s in manifest['stages']] == ['data', 'target']


def test_train_target_dp_forces_dp_mode(tiny_experiment, tmp_path):
    path = tiny_experiment({'target': {'noise_ratio': '1.0', 'dp_epochs': '1', 'dp_batch_size': '8'}})
    assert main(['train-target-dp', '--config', path, '--quiet']) == EXIT_OK
    with open(tmp_path / 'runs' / 'tiny' / config.MANIFEST_NAME) as f:
        assert json.load(f)['model'] == 'softmax_net-dp'


def test_config_error_exit_code(tiny_experiment, tmp_path):
    bad = tiny_experiment({'target': {'architecture': 'alexnet'}})
    assert main(['run', '--config', bad, '--quiet']) == EXIT_CONFIG_ERROR
    assert main(['train-prior', '--quiet']) == EXIT_CONFIG_ERROR
    assert main(['run', '--config', str(tmp_path / 'missing.ini'), '--quiet']) == EXIT_CONFIG_ERROR


def test_stage_failure_exit_code(tiny_experiment, tmp_path):
    bad = tiny_experiment({'data': {'private_labels': '2, 3, 7'}})
    assert main(['attack', '--config', bad, '--quiet']) == EXIT_STAGE_ERROR
    assert main(['report', '--manifest', str(tmp_path / 'nope.json'), '--quiet']) == EXIT_STAGE_ERROR


def test_theory_check_writes_summary(tmp_path):
    assert main(['theory-check', '--instances', '20', '--seed', '1', '--out', str(tmp_path), '--quiet']) == EXIT_OK
    with open(tmp_path / 'theory_check.json') as f:
        summary = json.load(f)
    assert summary['instances'] == 20
    assert summary['identity_failures'] == 0
    assert summary['seed'] == 1


def test_sweep_subcommands(tiny_experiment, tmp_path):
    path = tiny_experiment()
    assert main(['dp-sweep', '--config', path, '--noise-ratios', '', '--quiet']) == EXIT_OK
    assert main(['power-sweep', '--config', path, '--axis', 'train_size', '--values', '1.0',
                 '--quiet']) == EXIT_OK
    sweeps = tmp_path / 'runs' / 'tiny' / 'sweeps'
    assert (sweeps / 'power_sweep_train_size.csv').exists()
    assert not (sweeps / 'dp_sweep.csv').exists()


def test_parser_knows_every_subcommand():
    parser = run_experiment.build_parser()
    for command in ('train-target', 'train-target-dp', 'train-prior', 'attack', 'evaluate', 'run',
                    'dp-sweep', 'power-sweep', 'theory-check', 'report'):
        assert parser.parse_args([command]).command == command
