import json
import os

import pandas as pd
import pytest

from cli import CHECKPOINT_FILE, RESOLVED_CONFIG_FILE, build_parser, resolve_config, run
from config import Config

TINY = [
    'dataset.C=2', 'dataset.H=16', 'dataset.W=16', 'dataset.n_train=32', 'dataset.n_val=16', 'dataset.n_test=16',
    'model.width=2', 'model.head_channels=2', 'model.head_hidden=8', 'model.pool=2',
    'train.batch_size=16', 'train.pretrain_epochs=1', 'train.train_epochs=1', 'train.lr0=0.05',
    'attack.epsilon=0.0157', 'attack.iterations=1',
    'eval.attack.iterations=2', 'eval.attack.restarts=1', 'eval.attack.square_queries=2',
    'eval.benchmarks=false', 'eval.epsilon_grid=[0, 0.0157]',
    'sweep.lr0=[0.05]', 'sweep.weight_decay=[0]',
]


def tiny_args(*extra):
    args = []
    for item in TINY + list(extra):
        args += ['--set', item]
    return args


def read_json(path):
    with open(path, encoding='utf-8') as handle:
        return json.load(handle)


@pytest.fixture(autouse=True)
def quiet_env(monkeypatch):
    for name in ('PARTROBUST_SEED', 'PARTROBUST_WORKERS', 'PARTROBUST_OUTPUT_DIR'):
        monkeypatch.delenv(name, raising=False)
    monkeypatch.setenv('PARTROBUST_PROGRESS', 'false')
    Config.reload()


@pytest.fixture(scope='module')
def trained_dir(tmp_path_factory):
    out = str(tmp_path_factory.mktemp('train'))
    assert run(['train', *tiny_args(), '--out', out]) == 0
    return out


class TestParser:
    def test_commands(self):
        parser = build_parser()
        for command in ('gen-data', 'train', 'attack', 'eval', 'sweep', 'report'):
            assert parser.parse_args([command]).command == command

    def test_unknown_command(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(['serve'])

    def test_output_dir_precedence(self, monkeypatch):
        monkeypatch.setenv('PARTROBUST_OUTPUT_DIR', 'env_runs')
        Config.reload()
        parser = build_parser()
        assert resolve_config(parser.parse_args(['train'])).output_dir == 'env_runs'
        assert resolve_config(parser.parse_args(['train', '--set', 'output_dir="mine"'])).output_dir == 'mine'
        assert resolve_config(parser.parse_args(['train', '--out', 'flag'])).output_dir == 'flag'

    def test_env_workers(self, monkeypatch):
        monkeypatch.setenv('PARTROBUST_WORKERS', '2')
        Config.reload()
        resolved = resolve_config(build_parser().parse_args(['eval']))
        assert resolved.eval.workers == 2 and resolved.sweep.workers == 2


class TestValidation:
    def test_unknown_key_writes_nothing(self, tmp_path):
        out = tmp_path / 'run'
        assert run(['train', '--set', 'model.depth=3', '--out', str(out)]) == 2
        assert not out.exists()

    def test_invalid_value(self, tmp_path):
        out = tmp_path / 'run'
        assert run(['train', '--set', 'train.batch_size=0', '--out', str(out)]) == 2
        assert not out.exists()

    def test_missing_checkpoint(self, tmp_path):
        assert run(['eval', *tiny_args(), '--out', str(tmp_path)]) == 1

    def test_missing_report_input(self, tmp_path):
        assert run(['report', '--input', str(tmp_path / 'absent.csv'), '--out', str(tmp_path)]) == 1

    def test_unexpected_error_exits_one(self, tmp_path, monkeypatch):
        import cli

        def broken(run_config, args, out):
            raise RuntimeError("disk vanished")

        monkeypatch.setitem(cli.HANDLERS, 'gen-data', broken)
        assert run(['gen-data', *tiny_args(), '--out', str(tmp_path)]) == 1
        with open(tmp_path / 'run.log', encoding='utf-8') as handle:
            assert 'crashed (RuntimeError): disk vanished' in handle.read()


class TestCommands:
    def test_gen_data(self, tmp_path):
        out = str(tmp_path)
        assert run(['gen-data', *tiny_args(), '--out', out]) == 0
        manifest = read_json(os.path.join(out, 'data', 'manifest.json'))
        resolved = read_json(os.path.join(out, RESOLVED_CONFIG_FILE))
        assert manifest['spec'] == resolved['dataset']
        assert manifest['counts'] == {'train': 32, 'val': 16, 'test': 16}
        for split in ('train', 'val', 'test'):
            assert os.path.isfile(os.path.join(out, 'data', f'{split}.bin'))
        assert os.path.getsize(os.path.join(out, 'run.log')) > 0

    def test_train_artifacts(self, trained_dir):
        for name in (CHECKPOINT_FILE, 'history.jsonl', 'metrics.json', RESOLVED_CONFIG_FILE, 'run.log'):
            assert os.path.isfile(os.path.join(trained_dir, name))
        metrics = read_json(os.path.join(trained_dir, 'metrics.json'))
        assert metrics['epoch'] == 2
        assert set(metrics) == {'epoch', 'val_clean_acc', 'val_adv_acc'}

    def test_eval_reproduces_validation_metrics(self, trained_dir, tmp_path):
        out = str(tmp_path)
        checkpoint = os.path.join(trained_dir, CHECKPOINT_FILE)
        args = ['eval', *tiny_args('eval.split=val'), '--use-train-attack', '--checkpoint', checkpoint, '--out', out]
        assert run(args) == 0
        recorded = read_json(os.path.join(trained_dir, 'metrics.json'))
        metrics = read_json(os.path.join(out, 'metrics.json'))
        assert metrics['clean_acc'] == recorded['val_clean_acc']
        assert metrics['adv_acc'] == recorded['val_adv_acc']
        assert metrics['n_samples'] == 16
        with open(os.path.join(out, 'outcomes.jsonl'), encoding='utf-8') as handle:
            assert len(handle.readlines()) == 16

    def test_eval_with_benchmarks(self, trained_dir, tmp_path):
        out = str(tmp_path)
        extra = ('eval.benchmarks=true', 'eval.corruptions=["blur"]', 'eval.severities=[1]', 'eval.limit=8')
        args = ['eval', *tiny_args(*extra), '--checkpoint', os.path.join(trained_dir, CHECKPOINT_FILE), '--out', out]
        assert run(args) == 0
        table = pd.read_csv(os.path.join(out, 'benchmark.csv'))
        assert set(table['benchmark']) == {'clean', 'corruption', 'corruption_mean', 'background_swap', 'shape_bias'}
        metrics = read_json(os.path.join(out, 'metrics.json'))
        assert metrics['n_samples'] == 8
        assert 'corruption/blur/1' in metrics['benchmarks']

    def test_eval_rejects_other_model(self, trained_dir, tmp_path):
        args = ['eval', *tiny_args('model.head="bbox"'), '--checkpoint',
                os.path.join(trained_dir, CHECKPOINT_FILE), '--out', str(tmp_path)]
        assert run(args) == 1

    def test_attack(self, trained_dir, tmp_path):
        out = str(tmp_path)
        args = ['attack', *tiny_args('eval.attack_c_seg=[0, 0.5]', 'eval.limit=8'),
                '--checkpoint', os.path.join(trained_dir, CHECKPOINT_FILE), '--out', out]
        assert run(args) == 0
        curve = pd.read_csv(os.path.join(out, 'epsilon_curve.csv'))
        assert curve['epsilon'].tolist() == pytest.approx([0.0, 0.0157])
        assert set(read_json(os.path.join(out, 'attack_comparison.json'))) == {'epsilon', 'pgd_acc', 'square_acc'}
        assert pd.read_csv(os.path.join(out, 'attack_cseg.csv'))['attack_c_seg'].tolist() == [0.0, 0.5]

    def test_train_from_export(self, tmp_path):
        data_out, train_out = str(tmp_path / 'gen'), str(tmp_path / 'train')
        assert run(['gen-data', *tiny_args(), '--out', data_out]) == 0
        data = os.path.join(data_out, 'data')
        assert run(['train', *tiny_args(), '--data', data, '--out', train_out]) == 0
        assert run(['train', *tiny_args('dataset.seed=5'), '--data', data, '--out', train_out]) == 2

    def test_sweep_and_report(self, tmp_path):
        out = str(tmp_path)
        assert run(['sweep', *tiny_args('sweep.c_seg=[0.0, 1.0]'), '--out', out]) == 0
        rows = pd.read_csv(os.path.join(out, 'sweep.csv'))
        assert rows['cell'].tolist() == [0, 1]
        assert set(rows['status']) == {'ok'}
        assert os.path.isfile(os.path.join(out, 'tradeoff.csv'))

        shifted = rows.copy()
        shifted['seed'] = 1
        other = os.path.join(out, 'sweep_seed1.csv')
        shifted.to_csv(other, index=False)
        report_out = str(tmp_path / 'report')
        args = ['report', '--input', os.path.join(out, 'sweep.csv'), '--input', other, '--out', report_out]
        assert run(args) == 0
        seeds = pd.read_csv(os.path.join(report_out, 'seeds.csv'))
        assert set(seeds['n_seeds']) == {2}
        assert len(pd.read_csv(os.path.join(report_out, 'tradeoff.csv'))) == 4
