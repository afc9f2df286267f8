"""
Evaluation: clean / adversarial / segmentation metrics from per-sample
outcomes, benchmark suites built from datagen transforms, trade-off frontiers
and seed aggregation.
"""

import json
import os
import threading
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from . import attacks
from .attacks import EPSILON_GRID, EVAL_CHUNK, AttackConfig, PGDAttack, SquareRandomAttack
from .datagen import (CORRUPTIONS, Dataset, DatasetSpec, background_swap_dataset, corrupt_dataset, one_hot,
                      texture_swap_dataset)
from .exceptions import ConfigurationError, UsageError
from .logging import LOGGER
from .models import PartModel
from .partfeat import bbox_features, mask_to_logits
from .schema import canonical_json
from .trainer import Checkpoint

logger = LOGGER(__name__)


@dataclass(frozen=True)
class EvalConfig:
    attack: AttackConfig = field(default_factory=AttackConfig.for_eval)
    use_square: bool = True
    split: str = 'test'
    # Evaluate only the first n samples of the split
    limit: Optional[int] = None
    benchmarks: bool = True
    corruptions: Tuple[str, ...] = tuple(CORRUPTIONS)
    severities: Tuple[int, ...] = (1, 2, 3, 4, 5)
    attack_c_seg: Tuple[float, ...] = ()
    epsilon_grid: Tuple[float, ...] = EPSILON_GRID
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.split not in ('train', 'val', 'test'):
            raise ConfigurationError(f"unknown split {self.split!r}")
        unknown = sorted(set(self.corruptions) - set(CORRUPTIONS))
        if unknown:
            raise ConfigurationError(f"unknown corruptions {unknown}")
        if any(not 0 <= s <= 5 for s in self.severities):
            raise ConfigurationError("severities must lie in 0..5")
        if self.limit is not None and self.limit < 0:
            raise ConfigurationError("limit must be ≥ 0")
        if self.workers < 1:
            raise ConfigurationError("workers must be ≥ 1")


@dataclass
class Metrics:
    clean_acc: float
    adv_acc: float
    n_samples: int
    attack_acc: Dict[str, float] = field(default_factory=dict)
    seg_pixel_acc_clean: Optional[float] = None
    seg_pixel_acc_adv: Optional[float] = None
    benchmarks: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


# ---------------------------------------------------------------------------
# Per-sample evaluation
# ---------------------------------------------------------------------------

def _as_model(source: Union[Checkpoint, PartModel]) -> PartModel:
    return source.model() if isinstance(source, Checkpoint) else source


def _seg_accuracy(model: PartModel, x: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Fraction of pixels whose argmax channel matches the label, per sample"""
    out = []
    for start in range(0, len(x), EVAL_CHUNK):
        seg = model.forward(x[start:start + EVAL_CHUNK]).seg.data
        match = np.argmax(seg, axis=-3) == labels[start:start + EVAL_CHUNK]
        out.append(match.mean(axis=(-2, -1)))
    return np.concatenate(out) if out else np.zeros(0)


def collect_outcomes(model: PartModel, dataset: Dataset, attack: AttackConfig, use_square: bool = True,
                     workers: int = 1) -> List[Dict[str, Any]]:
    """One record per sample: label, clean prediction, every attack's predictions, seg accuracy"""
    pgd = attacks.run_chunked(PGDAttack(attack), model, dataset.x, dataset.y, dataset.labels,
                              dataset.ids, workers=workers)
    square = None
    if use_square and attack.square_queries > 0:
        square = attacks.run_chunked(SquareRandomAttack(attack), model, dataset.x, dataset.y,
                                     sample_ids=dataset.ids, workers=workers)

    seg_clean = seg_adv = None
    if model.config.is_part_model and model.config.K == dataset.K:
        seg_clean = _seg_accuracy(model, dataset.x, dataset.labels)
        seg_adv = _seg_accuracy(model, pgd.x_adv, dataset.labels)

    clean_pred = ModelPredictor(model)(dataset.x, dataset.labels)
    outcomes = []
    for i in range(len(dataset)):
        record = {
            'id': int(dataset.ids[i]),
            'y': int(dataset.y[i]),
            'pred_clean': int(clean_pred[i]),
            'pred_pgd': [int(p) for p in pgd.restart_pred[:, i]],
        }
        if square is not None:
            record['pred_square'] = [int(p) for p in square.restart_pred[:, i]]
        if seg_clean is not None:
            record['seg_acc_clean'] = float(seg_clean[i])
            record['seg_acc_adv'] = float(seg_adv[i])
        outcomes.append(record)
    return outcomes


def metrics_from_outcomes(outcomes: Sequence[Dict[str, Any]]) -> Metrics:
    """Every fraction recomputed from the per-sample log"""
    n = len(outcomes)
    if n == 0:
        return Metrics(0.0, 0.0, 0)
    clean = np.array([o['pred_clean'] == o['y'] for o in outcomes])
    attack_names = [key[len('pred_'):] for key in outcomes[0] if key.startswith('pred_') and key != 'pred_clean']
    robust = clean.copy()
    attack_acc = {}
    for name in attack_names:
        correct = np.array([all(p == o['y'] for p in o[f'pred_{name}']) for o in outcomes])
        attack_acc[name] = float(np.mean(clean & correct))
        robust &= correct
    seg_clean = seg_adv = None
    if 'seg_acc_clean' in outcomes[0]:
        seg_clean = float(np.mean([o['seg_acc_clean'] for o in outcomes]))
        seg_adv = float(np.mean([o['seg_acc_adv'] for o in outcomes]))
    return Metrics(float(np.mean(clean)), float(np.mean(robust)), n, attack_acc, seg_clean, seg_adv)


def evaluate(source: Union[Checkpoint, PartModel], dataset: Dataset, config: EvalConfig = EvalConfig(),
             outcomes_path: Optional[str] = None) -> Tuple[Metrics, List[Dict[str, Any]]]:
    """Clean accuracy, worst-case accuracy over PGD restarts (and square search), seg accuracy"""
    model = _as_model(source)
    if config.limit is not None:
        dataset = dataset.subset(np.arange(min(config.limit, len(dataset))))
    logger.info(f"🎯 Evaluating on {len(dataset)} samples (ε={config.attack.epsilon:.4f}, "
                f"{config.attack.restarts} restarts, square={'on' if config.use_square else 'off'})")
    outcomes = collect_outcomes(model, dataset, config.attack, config.use_square, config.workers)
    if outcomes_path:
        write_jsonl(outcomes, outcomes_path)
    metrics = metrics_from_outcomes(outcomes)
    logger.info(f"✅ clean {metrics.clean_acc:.3f} | adv {metrics.adv_acc:.3f}")
    return metrics, outcomes


# ---------------------------------------------------------------------------
# Benchmarks
# ---------------------------------------------------------------------------

Predictor = Callable[[np.ndarray, np.ndarray], np.ndarray]


class ModelPredictor:
    """Adapts a model to the (x, labels) → predictions interface"""

    def __init__(self, model: PartModel):
        self.model = model

    def __call__(self, x: np.ndarray, labels: np.ndarray) -> np.ndarray:
        preds = [self.model.predict(x[start:start + EVAL_CHUNK]) for start in range(0, len(x), EVAL_CHUNK)]
        return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


class MaskOracle:
    """Nearest-centroid classifier on bbox features of ground-truth masks"""

    def __init__(self, scale: float = 50.0):
        self.scale = scale
        self.mean = self.std = self.centroids = self.classes = None
        self.k = 0

    def features(self, labels: np.ndarray, k: int) -> np.ndarray:
        chunks = []
        for start in range(0, len(labels), EVAL_CHUNK):
            masks = one_hot(labels[start:start + EVAL_CHUNK], k)
            chunks.append(bbox_features(mask_to_logits(masks, self.scale)).data)
        return np.concatenate(chunks) if chunks else np.zeros((0, 5 * k))

    def fit(self, dataset: Dataset) -> 'MaskOracle':
        self.k = dataset.K
        feats = self.features(dataset.labels, dataset.K)
        self.mean = feats.mean(axis=0)
        self.std = np.maximum(feats.std(axis=0), 1e-6)
        z = (feats - self.mean) / self.std
        classes = np.unique(dataset.y)
        self.centroids = np.stack([z[dataset.y == c].mean(axis=0) for c in classes])
        self.classes = classes
        return self

    def __call__(self, x: np.ndarray, labels: np.ndarray) -> np.ndarray:
        if self.centroids is None:
            raise UsageError("MaskOracle.fit must run before prediction")
        z = (self.features(labels, self.k) - self.mean) / self.std
        distances = ((z[:, None, :] - self.centroids[None]) ** 2).sum(axis=-1)
        return self.classes[np.argmin(distances, axis=1)]


BENCHMARK_CACHE_SIZE = 64

_benchmark_cache: 'OrderedDict[Tuple[str, int, str], Dataset]' = OrderedDict()
_cache_lock = threading.Lock()


def benchmark_key(base: Dataset, spec: DatasetSpec) -> str:
    """Cache identity of a base set: its content plus the spec that drives swaps"""
    return f"{base.fingerprint()}:{canonical_json(spec)}"


def benchmark_set(base: Dataset, spec: DatasetSpec, name: str, seed: int, base_key: Optional[str] = None) -> Dataset:
    """Benchmark variant of a base set, generated once per (base content, spec, seed, name)"""
    key = (base_key or benchmark_key(base, spec), seed, name)
    with _cache_lock:
        if key in _benchmark_cache:
            _benchmark_cache.move_to_end(key)
            return _benchmark_cache[key]
    if name == 'background_swap':
        derived = background_swap_dataset(base, spec, seed)
    elif name == 'texture_swap':
        derived = texture_swap_dataset(base, spec.C, seed)
    else:
        kind, _, severity = name.rpartition('-')
        derived = corrupt_dataset(base, kind, int(severity), seed)
    with _cache_lock:
        _benchmark_cache[key] = derived
        while len(_benchmark_cache) > BENCHMARK_CACHE_SIZE:
            _benchmark_cache.popitem(last=False)
    return derived


def clear_benchmark_cache():
    with _cache_lock:
        _benchmark_cache.clear()


def benchmark_eval(predictor: Union[Predictor, Checkpoint, PartModel], base: Dataset, spec: DatasetSpec,
                   config: EvalConfig = EvalConfig()) -> pd.DataFrame:
    """Corruption grid + mean, background-swap and shape-bias accuracies, seed-stamped"""
    if isinstance(predictor, (Checkpoint, PartModel)):
        predictor = ModelPredictor(_as_model(predictor))

    def accuracy(dataset: Dataset) -> float:
        return float(np.mean(predictor(dataset.x, dataset.labels) == dataset.y)) if len(dataset) else 0.0

    base_key = benchmark_key(base, spec)
    rows = [{'benchmark': 'clean', 'kind': '', 'severity': 0, 'accuracy': accuracy(base)}]
    for kind in config.corruptions:
        for severity in config.severities:
            dataset = benchmark_set(base, spec, f"{kind}-{severity}", config.seed, base_key)
            rows.append({'benchmark': 'corruption', 'kind': kind, 'severity': severity, 'accuracy': accuracy(dataset)})
    grid = [r['accuracy'] for r in rows if r['benchmark'] == 'corruption']
    if grid:
        rows.append({'benchmark': 'corruption_mean', 'kind': '', 'severity': 0, 'accuracy': float(np.mean(grid))})
    rows.append({'benchmark': 'background_swap', 'kind': '', 'severity': 0,
                 'accuracy': accuracy(benchmark_set(base, spec, 'background_swap', config.seed, base_key))})
    rows.append({'benchmark': 'shape_bias', 'kind': '', 'severity': 0,
                 'accuracy': accuracy(benchmark_set(base, spec, 'texture_swap', config.seed, base_key))})

    table = pd.DataFrame(rows)
    table['seed'] = config.seed
    table['n'] = len(base)
    return table


def benchmark_summary(table: pd.DataFrame) -> Dict[str, float]:
    """Flat benchmark accuracies keyed "benchmark[/kind/severity]" for Metrics"""
    summary = {}
    for row in table.itertuples(index=False):
        key = row.benchmark if not row.kind else f"{row.benchmark}/{row.kind}/{row.severity}"
        summary[key] = float(row.accuracy)
    return summary


# ---------------------------------------------------------------------------
# Attack studies
# ---------------------------------------------------------------------------

def attack_cseg_table(model: PartModel, dataset: Dataset, attack: AttackConfig,
                      values: Sequence[float], workers: int = 1) -> pd.DataFrame:
    """PGD accuracy when the attack mixes in the segmentation loss with weight c"""
    rows = []
    for c in values:
        cfg = replace(attack, objective='cls' if c == 0 else 'combined', attack_c_seg=float(c))
        result = attacks.run_chunked(PGDAttack(cfg), model, dataset.x, dataset.y, dataset.labels,
                                     dataset.ids, workers=workers)
        rows.append({'attack_c_seg': float(c), 'adv_acc': float(np.mean(result.robust_correct))})
    return pd.DataFrame(rows)


def obfuscation_check(model: PartModel, dataset: Dataset, attack: AttackConfig,
                      grid: Sequence[float] = EPSILON_GRID) -> Tuple[pd.DataFrame, Dict[str, float]]:
    """ε-growth curve plus PGD vs square-search accuracy at the configured ε"""
    curve = pd.DataFrame(attacks.epsilon_sweep(model, dataset.x, dataset.y, dataset.labels, attack,
                                               grid, dataset.ids))
    pgd = attacks.run_chunked(PGDAttack(attack), model, dataset.x, dataset.y, dataset.labels, dataset.ids)
    queries = attack.square_queries or 100
    square = attacks.run_chunked(SquareRandomAttack(attack, queries), model, dataset.x, dataset.y,
                                 sample_ids=dataset.ids)
    comparison = {'epsilon': attack.epsilon, 'pgd_acc': float(np.mean(pgd.robust_correct)),
                  'square_acc': float(np.mean(square.robust_correct))}
    if comparison['square_acc'] < comparison['pgd_acc'] - 0.01:
        logger.warning(f"⚠️ Square search beats PGD ({comparison['square_acc']:.3f} < {comparison['pgd_acc']:.3f}); "
                       f"gradients may be obfuscated")
    return curve, comparison


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

TRADEOFF_COLUMNS = ['model', 'head', 'loss', 'beta', 'c_seg', 'clean_acc', 'adv_acc', 'pareto']


def pareto_flags(clean: np.ndarray, adv: np.ndarray) -> np.ndarray:
    """True where no other row is strictly better in both accuracies"""
    clean, adv = np.asarray(clean, dtype=float), np.asarray(adv, dtype=float)
    dominated = (clean[None, :] > clean[:, None]) & (adv[None, :] > adv[:, None])
    return ~dominated.any(axis=1)


def tradeoff_report(rows: Union[pd.DataFrame, Sequence[Dict[str, Any]]], path: Optional[str] = None) -> pd.DataFrame:
    """Sweep rows sorted by clean accuracy with the Pareto frontier flagged"""
    table = pd.DataFrame(rows).copy()
    if 'status' in table:
        table = table[table['status'] == 'ok']
    if len(table) < 2:
        raise UsageError(f"a trade-off report needs at least two successful rows, got {len(table)}")
    for column in TRADEOFF_COLUMNS[:-1]:
        if column not in table:
            table[column] = np.nan
    table = table.sort_values('clean_acc', kind='mergesort').reset_index(drop=True)
    table['pareto'] = pareto_flags(table['clean_acc'].to_numpy(), table['adv_acc'].to_numpy())
    extra = [c for c in table.columns if c not in TRADEOFF_COLUMNS]
    table = table[TRADEOFF_COLUMNS + extra]
    if path:
        write_csv(table, path)
    return table


def aggregate_seeds(table: pd.DataFrame, by: Sequence[str], metrics: Sequence[str]) -> pd.DataFrame:
    """Mean ± std over seeds for each group"""
    grouped = table.groupby(list(by), sort=True, dropna=False)
    out = grouped[list(metrics)].agg(['mean', 'std'])
    out.columns = [f"{metric}_{stat}" for metric, stat in out.columns]
    out = out.fillna({f"{m}_std": 0.0 for m in metrics})
    out['n_seeds'] = grouped.size()
    return out.reset_index()


def _atomic_text(path: str, text: str):
    tmp = f"{path}.tmp"
    with open(tmp, 'w', encoding='utf-8') as handle:
        handle.write(text)
    os.replace(tmp, path)


def write_csv(table: pd.DataFrame, path: str) -> str:
    tmp = f"{path}.tmp"
    table.to_csv(tmp, index=False)
    os.replace(tmp, path)
    return path


def read_csv(path: str) -> pd.DataFrame:
    return pd.read_csv(path, float_precision='round_trip', keep_default_na=True)


def write_json(data: Dict[str, Any], path: str) -> str:
    _atomic_text(path, json.dumps(data, indent=2, sort_keys=True) + '\n')
    return path


def write_jsonl(records: Sequence[Dict[str, Any]], path: str) -> str:
    _atomic_text(path, ''.join(json.dumps(r, sort_keys=True) + '\n' for r in records))
    return path


def read_jsonl(path: str) -> List[Dict[str, Any]]:
    with open(path, encoding='utf-8') as handle:
        return [json.loads(line) for line in handle if line.strip()]
