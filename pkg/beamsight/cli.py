"""Command line entry point.

Usage: ``beamsight <command> [--config PATH] [--seed N] [--out DIR]`` where command is one of
``gen``, ``train-id``, ``train-beam``, ``oracle-sweep``, ``eval``, ``ablate`` and ``report``.
"""
import argparse
import dataclasses
import json
import os

from beamsight.pipeline import config, harness, logs
from beamsight.pipeline.errors import BeamsightError, ConfigError

EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_STRICT = 3


def gen(client, args):
    client.generate()


def train_id(client, args):
    client.train_identification(client.load('a'))


def train_beam(client, args):
    client.train_beam(client.load('a'))


def oracle_sweep(client, args):
    result = harness.oracle_sweep(client.config, args.trials, client.config.seed)
    os.makedirs(client.out_dir, exist_ok=True)
    with open(client.path('oracle_sweep.json'), 'w') as out:
        json.dump(result, out, indent=2, sort_keys=True)


def evaluate(client, args):
    datasets = {s: client.load(s) for s in harness.SCENARIOS}
    models = client.load_models(datasets['a'])
    report = client.evaluate(datasets, models).merged(client.ablations())
    client.report(report, client.overlays(datasets['a']))
    if args.strict:
        failures = harness.acceptance_failures(report)
        for failure in failures:
            logs.client.logger.error('Acceptance: {}'.format(failure))
        if failures:
            return EXIT_STRICT
    return 0


def ablate(client, args):
    dataset = client.load('a')
    for which in args.which or harness.ABLATIONS:
        client.ablate(dataset, which)


def report(client, args):
    path = client.path('report', 'metrics.json')
    try:
        base = harness.read_report(path)
    except OSError as e:
        raise BeamsightError('no evaluation found at {}; run eval first'.format(path)) from e
    base.ablations.clear()
    client.report(base.merged(client.ablations()))


COMMANDS = {
    'gen': (gen, 'render both scenarios and write the datasets'),
    'train-id': (train_id, 'train the TX scorer on scenario a'),
    'train-beam': (train_beam, 'train the beam predictor on scenario a'),
    'oracle-sweep': (oracle_sweep, 'check the exhaustive sweep against the nearest steer angle'),
    'eval': (evaluate, 'run the end-to-end evaluation and write the report'),
    'ablate': (ablate, 'retrain and measure ablation variants'),
    'report': (report, 'rewrite the report from saved metrics and ablations'),
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='JSON experiment configuration (schema_version 1)')
    common.add_argument('--seed', type=int, help='experiment seed, overrides the configuration')
    common.add_argument('--out', help='output directory, overrides the configuration')

    parser = argparse.ArgumentParser(prog='beamsight', description='Vision-aided mmWave beam selection testbed')
    commands = parser.add_subparsers(dest='command', required=True)
    for name, (_, text) in COMMANDS.items():
        sub = commands.add_parser(name, parents=[common], help=text)
        if name == 'eval':
            sub.add_argument('--strict', action='store_true', help='exit 3 when an acceptance threshold is missed')
        elif name == 'ablate':
            sub.add_argument('--which', action='append', choices=harness.ABLATIONS,
                             help='ablation to run; repeatable, defaults to all')
        elif name == 'oracle-sweep':
            sub.add_argument('--trials', type=int, default=1000, help='number of random LOS geometries')
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = config.load_config(args.config)
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, seed=args.seed)
        client = harness.Client(cfg, args.out)
        command, _ = COMMANDS[args.command]
        return command(client, args) or 0
    except ConfigError as e:
        logs.client.logger.error('Invalid configuration: {}'.format(e))
        return EXIT_CONFIG
    except BeamsightError as e:
        logs.client.logger.error('{} failed: {}'.format(args.command, e))
        return EXIT_FAILURE
