import json
import os
import unittest
from unittest import mock

from beamsight import cli
from beamsight.pipeline import harness
from beamsight.pipeline.errors import IOFailure
from tests.setup import setup


def tearDownModule():
    setup.cleanup()


class TestParser(unittest.TestCase):

    def test_commands(self):
        parser = cli.build_parser()
        for name in cli.COMMANDS:
            self.assertEqual(parser.parse_args([name]).command, name)

    def test_ablate_choices(self):
        args = cli.build_parser().parse_args(['ablate', '--which', '1', '--which', 'id-zero'])
        self.assertEqual(args.which, ['1', 'id-zero'])
        with self.assertRaises(SystemExit):
            cli.build_parser().parse_args(['ablate', '--which', '7'])


class TestMain(unittest.TestCase):

    def setUp(self):
        self.out = setup.scratch('cli')

    def test_bad_config(self):
        path = os.path.join(self.out, 'bad.json')
        with open(path, 'w') as out:
            json.dump({'schema_version': 2}, out)
        self.assertEqual(cli.main(['gen', '--config', path, '--out', self.out]), cli.EXIT_CONFIG)

    def test_missing_config(self):
        missing = os.path.join(self.out, 'missing.json')
        self.assertEqual(cli.main(['gen', '--config', missing]), cli.EXIT_CONFIG)

    def test_wrong_value_type(self):
        path = os.path.join(self.out, 'typed.json')
        with open(path, 'w') as out:
            json.dump({'schema_version': 1, 'split_ratio': 'x'}, out)
        self.assertEqual(cli.main(['gen', '--config', path, '--out', self.out]), cli.EXIT_CONFIG)

    @mock.patch.object(harness.Client, 'generate')
    def test_seed_override(self, generate):
        with mock.patch.object(harness, 'Client', wraps=harness.Client) as client:
            self.assertEqual(cli.main(['gen', '--seed', '7', '--out', self.out]), 0)
        cfg, out_dir = client.call_args.args
        self.assertEqual(cfg.seed, 7)
        self.assertEqual(out_dir, self.out)
        generate.assert_called_once_with()

    @mock.patch.object(harness.Client, 'load', side_effect=IOFailure('incomplete dataset'))
    def test_failure(self, load):
        self.assertEqual(cli.main(['train-beam', '--out', self.out]), cli.EXIT_FAILURE)

    def test_report_without_eval(self):
        self.assertEqual(cli.main(['report', '--out', os.path.join(self.out, 'empty')]), cli.EXIT_FAILURE)

    def test_strict(self):
        report = harness.MetricsReport(rates={'a_e2e_top5': 0.5})
        with mock.patch.multiple(harness.Client, load=mock.DEFAULT, load_models=mock.DEFAULT,
                                 evaluate=mock.DEFAULT, ablations=mock.DEFAULT, overlays=mock.DEFAULT,
                                 report=mock.DEFAULT) as patched:
            patched['evaluate'].return_value = report
            patched['ablations'].return_value = harness.MetricsReport()
            self.assertEqual(cli.main(['eval', '--out', self.out]), 0)
            self.assertEqual(cli.main(['eval', '--strict', '--out', self.out]), cli.EXIT_STRICT)
        self.assertEqual(patched['report'].call_count, 2)

    def test_oracle_sweep(self):
        with mock.patch.object(harness, 'oracle_sweep', return_value={'trials': 5, 'ties': 0, 'agreement': 1.0,
                                                                      'seconds': 0.1}) as sweep:
            self.assertEqual(cli.main(['oracle-sweep', '--trials', '5', '--out', self.out]), 0)
        self.assertEqual(sweep.call_args.args[1], 5)
        with open(os.path.join(self.out, 'oracle_sweep.json')) as source:
            self.assertEqual(json.load(source)['agreement'], 1.0)
