"""
Command-line front end: gen-data, train, attack, eval, sweep and report.

Every command resolves its config (file or preset, --set overrides,
PARTROBUST_SEED), validates it before touching the output directory, then
writes resolved_config.json and run.log next to its artifacts.
"""

import argparse
import os
from dataclasses import replace
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from config import Config, RunConfig, load_run_config, preset_names
from core.datagen import Dataset, DatasetSplits, export_dataset, generate_dataset, load_export, verify_export
from core.evalreport import (aggregate_seeds, attack_cseg_table, benchmark_eval, benchmark_summary, evaluate,
                             obfuscation_check, read_csv, tradeoff_report, write_csv, write_json)
from core.exceptions import ConfigurationError, PartRobustError, UsageError
from core.logging import LOGGER, attach_run_log, detach_run_log
from core.trainer import Checkpoint, sweep, train, write_history

logger = LOGGER(__name__)

COMMANDS = ('gen-data', 'train', 'attack', 'eval', 'sweep', 'report')

CHECKPOINT_FILE = 'checkpoint.bin'
RESOLVED_CONFIG_FILE = 'resolved_config.json'


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='partrobust', description='Part-based robust classification pipeline')
    sub = parser.add_subparsers(dest='command', required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument('--config', help=f"config file or preset ({', '.join(preset_names()) or 'none shipped'})")
        cmd.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                         help='override a config field, e.g. --set train.lr0=0.05')
        cmd.add_argument('--out', help='output directory (default: output_dir from the config)')
        if name in ('train', 'attack', 'eval', 'sweep'):
            cmd.add_argument('--data', help='read an exported dataset instead of regenerating it')
        if name in ('attack', 'eval'):
            cmd.add_argument('--checkpoint', help=f"checkpoint path (default: <out>/{CHECKPOINT_FILE})")
        if name == 'eval':
            cmd.add_argument('--use-train-attack', action='store_true',
                             help="attack with the checkpoint's validation attack and no square search")
        if name == 'report':
            cmd.add_argument('--input', dest='inputs', action='append', default=[],
                             help='sweep.csv to include (repeatable; default <out>/sweep.csv)')
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    run = load_run_config(args.config, args.overrides, Config.seed())
    out = args.out or (Config.OUTPUT_DIR if run.output_dir == 'runs' else run.output_dir)
    return replace(
        run,
        output_dir=out,
        eval=replace(run.eval, workers=Config.workers(run.eval.workers)),
        sweep=replace(run.sweep, workers=Config.workers(run.sweep.workers)),
    )


def _data(run: RunConfig, args: argparse.Namespace) -> DatasetSplits:
    if getattr(args, 'data', None):
        splits = load_export(args.data)
        if splits.spec != run.dataset:
            raise ConfigurationError(f"dataset in {args.data} was generated from a different spec")
        return splits
    return generate_dataset(run.dataset)


def _split(run: RunConfig, args: argparse.Namespace, split: Optional[str] = None) -> Dataset:
    dataset = _data(run, args)[split or run.eval.split]
    if run.eval.limit is not None:
        dataset = dataset.subset(np.arange(min(run.eval.limit, len(dataset))))
    return dataset


def _checkpoint(run: RunConfig, args: argparse.Namespace, out: str) -> Checkpoint:
    path = args.checkpoint or os.path.join(out, CHECKPOINT_FILE)
    return Checkpoint.load(path, expected=run.train_config())


def cmd_gen_data(run: RunConfig, args: argparse.Namespace, out: str):
    directory = os.path.join(out, 'data')
    paths = export_dataset(generate_dataset(run.dataset), directory)
    if not verify_export(directory):
        raise UsageError(f"export in {directory} does not regenerate byte-identically")
    logger.info(f"✅ Dataset written: {', '.join(os.path.basename(p) for p in paths.values())}")


def cmd_train(run: RunConfig, args: argparse.Namespace, out: str):
    result = train(run.train_config(), _data(run, args), progress=Config.PROGRESS, workers=run.eval.workers)
    result.best.save(os.path.join(out, CHECKPOINT_FILE))
    write_history(result.history, os.path.join(out, 'history.jsonl'))
    write_json({'epoch': result.best.epoch, **result.best.metrics}, os.path.join(out, 'metrics.json'))
    logger.info(f"💾 Checkpoint from epoch {result.best.epoch} saved to {out}")


def cmd_attack(run: RunConfig, args: argparse.Namespace, out: str):
    model = _checkpoint(run, args, out).model()
    dataset = _split(run, args)
    curve, comparison = obfuscation_check(model, dataset, run.eval.attack, run.eval.epsilon_grid)
    write_csv(curve, os.path.join(out, 'epsilon_curve.csv'))
    write_json(comparison, os.path.join(out, 'attack_comparison.json'))
    if run.eval.attack_c_seg:
        table = attack_cseg_table(model, dataset, run.eval.attack, run.eval.attack_c_seg, run.eval.workers)
        write_csv(table, os.path.join(out, 'attack_cseg.csv'))


def cmd_eval(run: RunConfig, args: argparse.Namespace, out: str):
    checkpoint = _checkpoint(run, args, out)
    eval_config = run.eval
    if args.use_train_attack:
        eval_config = replace(eval_config, attack=checkpoint.train_config().eval_attack, use_square=False)
    splits = _data(run, args)
    metrics, _ = evaluate(checkpoint, splits[eval_config.split], eval_config,
                          outcomes_path=os.path.join(out, 'outcomes.jsonl'))
    if eval_config.benchmarks:
        base = splits[eval_config.split]
        if eval_config.limit is not None:
            base = base.subset(np.arange(min(eval_config.limit, len(base))))
        table = benchmark_eval(checkpoint, base, run.dataset, eval_config)
        write_csv(table, os.path.join(out, 'benchmark.csv'))
        metrics.benchmarks = benchmark_summary(table)
    write_json(metrics.to_dict(), os.path.join(out, 'metrics.json'))


def cmd_sweep(run: RunConfig, args: argparse.Namespace, out: str):
    rows = sweep(run.train_config(), run.sweep, _data(run, args), progress=Config.PROGRESS)
    write_csv(pd.DataFrame(rows), os.path.join(out, 'sweep.csv'))
    ok = [r for r in rows if r['status'] == 'ok']
    if len(ok) >= 2:
        tradeoff_report(rows, os.path.join(out, 'tradeoff.csv'))
    else:
        logger.warning(f"⚠️ Only {len(ok)} successful cell(s); no trade-off report")


def cmd_report(run: RunConfig, args: argparse.Namespace, out: str):
    inputs: List[str] = args.inputs or [os.path.join(out, 'sweep.csv')]
    missing = [path for path in inputs if not os.path.isfile(path)]
    if missing:
        raise UsageError(f"missing sweep results: {', '.join(missing)}")
    table = pd.concat([read_csv(path) for path in inputs], ignore_index=True)
    tradeoff_report(table, os.path.join(out, 'tradeoff.csv'))
    ok = table[table['status'] == 'ok'] if 'status' in table else table
    if 'seed' in ok and ok['seed'].nunique() > 1:
        keys = [c for c in ('model', 'head', 'loss', 'c_seg', 'beta', 'lr0', 'weight_decay') if c in ok]
        write_csv(aggregate_seeds(ok, keys, ['clean_acc', 'adv_acc']), os.path.join(out, 'seeds.csv'))


HANDLERS: Dict[str, Callable[[RunConfig, argparse.Namespace, str], None]] = {
    'gen-data': cmd_gen_data,
    'train': cmd_train,
    'attack': cmd_attack,
    'eval': cmd_eval,
    'sweep': cmd_sweep,
    'report': cmd_report,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse, validate, execute; returns the process exit status"""
    args = build_parser().parse_args(argv)
    Config.reload()
    handler = None
    try:
        run_config = resolve_config(args)
        out = run_config.output_dir
        os.makedirs(out, exist_ok=True)
        handler = attach_run_log(os.path.join(out, 'run.log'))
        for warning in Config.validate():
            logger.warning(f"⚠️ {warning}")
        write_json(run_config.to_dict(), os.path.join(out, RESOLVED_CONFIG_FILE))
        logger.info(f"🚀 partrobust {args.command} → {out}")
        HANDLERS[args.command](run_config, args, out)
        logger.info(f"✅ {args.command} finished")
        return 0
    except PartRobustError as e:
        logger.error(f"❌ {args.command} failed ({type(e).__name__}): {e}")
        return e.exit_code
    except Exception as e:
        logger.error(f"❌ {args.command} crashed ({type(e).__name__}): {e}")
        return 1
    finally:
        if handler is not None:
            detach_run_log(handler)
