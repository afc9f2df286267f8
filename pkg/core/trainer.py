"""
Training protocol: clean pretraining, then PGD-adversarial or TRADES training
under a cosine schedule, early stopping on validation accuracy, binary
checkpoints and hyperparameter sweeps.
"""

import itertools
import json
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from . import attacks, diffcore as dc
from .attacks import AttackConfig, PGDAttack
from .datagen import Dataset, DatasetSplits
from .exceptions import CheckpointLoadError, ConfigurationError, NumericError, PartRobustError
from .logging import LOGGER
from .losses import LossConfig, compute_loss
from .models import ModelConfig, ModelParams, PartModel, init_params, param_shapes
from .schema import canonical_json, from_dict, set_path, to_dict

logger = LOGGER(__name__)

CHECKPOINT_MAGIC = b'PRCK'
CHECKPOINT_VERSION = 1
SELECT_ON = ('adv', 'clean')


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    eval_attack: AttackConfig = field(default_factory=AttackConfig)
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    pretrain_epochs: int = 15
    train_epochs: int = 40
    select_on: str = 'adv'
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be ≥ 1, got {self.batch_size}")
        if self.pretrain_epochs < 0 or self.train_epochs < 0:
            raise ConfigurationError("epoch counts must be ≥ 0")
        if self.pretrain_epochs + self.train_epochs == 0:
            raise ConfigurationError("at least one training epoch is required")
        if self.lr0 < 0 or self.weight_decay < 0 or not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError("lr0 and weight_decay must be ≥ 0 and momentum in [0, 1)")
        if self.select_on not in SELECT_ON:
            raise ConfigurationError(f"select_on must be one of {SELECT_ON}, got {self.select_on!r}")

    def loss_config(self) -> LossConfig:
        return self.loss if self.loss.attack is not None else replace(self.loss, attack=self.attack)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    params: ModelParams
    config: Dict[str, Any]
    epoch: int
    metrics: Dict[str, float]
    rng_state: Dict[str, Any] = field(default_factory=dict)

    def train_config(self) -> TrainConfig:
        return from_dict(TrainConfig, self.config)

    def model(self) -> PartModel:
        return PartModel(self.train_config().model, self.params)

    def header(self) -> str:
        return canonical_json({'config': self.config, 'epoch': self.epoch,
                               'metrics': self.metrics, 'rng_state': self.rng_state})

    def to_bytes(self) -> bytes:
        header = self.header().encode('utf-8')
        tensors = list(self.params.tensors.items())
        tensors += [(f"velocity/{name}", v) for name, v in self.params.velocity.items()]
        chunks = [CHECKPOINT_MAGIC, struct.pack('<II', CHECKPOINT_VERSION, len(header)), header,
                  struct.pack('<I', len(tensors))]
        for name, array in tensors:
            encoded = name.encode('utf-8')
            chunks.append(struct.pack('<I', len(encoded)) + encoded)
            chunks.append(struct.pack(f'<I{array.ndim}I', array.ndim, *array.shape))
            chunks.append(np.ascontiguousarray(array, dtype='<f8').tobytes())
        return b''.join(chunks)

    def save(self, path: str) -> str:
        tmp = f"{path}.tmp"
        with open(tmp, 'wb') as handle:
            handle.write(self.to_bytes())
        os.replace(tmp, path)
        logger.info(f"💾 Checkpoint saved: {path} (epoch {self.epoch})")
        return path

    @classmethod
    def from_bytes(cls, raw: bytes) -> 'Checkpoint':
        try:
            if raw[:4] != CHECKPOINT_MAGIC:
                raise CheckpointLoadError("not a partrobust checkpoint (bad magic)")
            version, header_len = struct.unpack_from('<II', raw, 4)
            if version != CHECKPOINT_VERSION:
                raise CheckpointLoadError(f"unsupported checkpoint version {version}")
            offset = 12
            header = json.loads(raw[offset:offset + header_len].decode('utf-8'))
            offset += header_len
            (count,) = struct.unpack_from('<I', raw, offset)
            offset += 4
            tensors, velocity = {}, {}
            for _ in range(count):
                (name_len,) = struct.unpack_from('<I', raw, offset)
                offset += 4
                name = raw[offset:offset + name_len].decode('utf-8')
                offset += name_len
                (rank,) = struct.unpack_from('<I', raw, offset)
                shape = struct.unpack_from(f'<{rank}I', raw, offset + 4)
                offset += 4 + 4 * rank
                size = int(np.prod(shape)) if rank else 1
                array = np.frombuffer(raw, dtype='<f8', count=size, offset=offset).reshape(shape).astype(np.float64)
                offset += 8 * size
                if name.startswith('velocity/'):
                    velocity[name[len('velocity/'):]] = array
                else:
                    tensors[name] = array
            if offset != len(raw):
                raise CheckpointLoadError(f"{len(raw) - offset} trailing bytes after tensors")
            return cls(ModelParams(tensors, velocity), header['config'], header['epoch'],
                       header['metrics'], header.get('rng_state', {}))
        except (struct.error, ValueError, KeyError, UnicodeDecodeError) as e:
            raise CheckpointLoadError(f"corrupt checkpoint: {e}")

    @classmethod
    def load(cls, path: str, expected: Optional[TrainConfig] = None) -> 'Checkpoint':
        """Read a checkpoint; with `expected`, its model config must match exactly"""
        try:
            with open(path, 'rb') as handle:
                raw = handle.read()
        except OSError as e:
            raise CheckpointLoadError(f"cannot read checkpoint {path}: {e}")
        checkpoint = cls.from_bytes(raw)

        try:
            config = checkpoint.train_config()
        except ConfigurationError as e:
            raise CheckpointLoadError(f"checkpoint config invalid: {e}")
        if expected is not None and canonical_json(expected.model) != canonical_json(config.model):
            raise CheckpointLoadError("checkpoint model config does not match the requested config")

        shapes = param_shapes(config.model)
        actual = {name: a.shape for name, a in checkpoint.params.tensors.items()}
        if actual != dict(shapes):
            raise CheckpointLoadError("checkpoint tensors do not match the model's parameter layout")
        return checkpoint


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    best: Checkpoint
    history: List[Dict[str, Any]]
    final: ModelParams


def validate(model: PartModel, dataset: Dataset, attack: AttackConfig, workers: int = 1) -> Dict[str, float]:
    """Clean and PGD accuracy on a split"""
    if len(dataset) == 0:
        return {'val_clean_acc': 0.0, 'val_adv_acc': 0.0}
    result = attacks.run_chunked(PGDAttack(attack), model, dataset.x, dataset.y,
                                 dataset.labels, dataset.ids, workers=workers)
    return {'val_clean_acc': float(np.mean(result.clean_correct)),
            'val_adv_acc': float(np.mean(result.robust_correct))}


def _attack_seed(base: int, step: int) -> int:
    return int(np.random.SeedSequence([base, step]).generate_state(1)[0])


def write_history(history: List[Dict[str, Any]], path: str):
    tmp = f"{path}.tmp"
    with open(tmp, 'w', encoding='utf-8') as handle:
        for record in history:
            handle.write(json.dumps(record, sort_keys=True) + '\n')
    os.replace(tmp, path)


def read_history(path: str) -> List[Dict[str, Any]]:
    with open(path, encoding='utf-8') as handle:
        return [json.loads(line) for line in handle if line.strip()]


class Trainer:
    """Owns the parameters for one training run"""

    def __init__(self, config: TrainConfig, data: DatasetSplits, progress: bool = False, workers: int = 1):
        if len(data.train) == 0:
            raise ConfigurationError("the training split is empty")
        if config.model.is_part_model and config.model.K != data.train.K:
            raise ConfigurationError(f"model expects K={config.model.K}, labels carry K={data.train.K}")
        if set(data.train.ids) & set(data.val.ids):
            raise ConfigurationError("train and val splits overlap")
        self.config = config
        self.data = data
        self.progress = progress
        self.workers = workers
        self.rng = np.random.default_rng(config.seed)
        self.params = init_params(config.model)
        self.history: List[Dict[str, Any]] = []
        self.best: Optional[Checkpoint] = None
        self._best_score = -math.inf
        # Loss terms of the most recent finite step, reported when a step fails
        self.last_components: Optional[Dict[str, Any]] = None

    def _steps_per_epoch(self) -> int:
        return math.ceil(len(self.data.train) / self.config.batch_size)

    def _run_epoch(self, phase: str, loss_config: LossConfig, epoch: int, first_step: int, total_steps: int) -> Tuple[float, int]:
        cfg, train = self.config, self.data.train
        losses, step = [], first_step
        for batch, index in enumerate(train.batches(cfg.batch_size, self.rng)):
            lr = dc.cosine_lr(step, total_steps, cfg.lr0)
            try:
                terms = compute_loss(train.x[index], train.y[index], train.labels[index], self.params,
                                     cfg.model, loss_config, sample_weight=train.seg_weight[index],
                                     sample_ids=train.ids[index], attack_seed=_attack_seed(cfg.attack.seed, step))
                grads = terms.param_grads()
            except NumericError as e:
                raise NumericError(f"non-finite values in {phase} epoch {epoch}, batch {batch} ({e}); "
                                   f"last finite loss {self.last_components}") from e
            components = terms.components()
            if not math.isfinite(components['total']):
                raise NumericError(f"non-finite loss in {phase} epoch {epoch}, batch {batch}: {components}; "
                                   f"last finite loss {self.last_components}")
            self.last_components = components
            self.params = self.params.step(grads, lr, cfg.momentum, cfg.weight_decay)
            losses.append(components['total'])
            step += 1
        return float(np.mean(losses)), step

    def _phase(self, phase: str, epochs: int, loss_config: LossConfig, selecting: bool, epoch_offset: int):
        if epochs == 0:
            return
        total = epochs * self._steps_per_epoch()
        step = 0
        bar = tqdm(range(epochs), desc=phase, disable=not self.progress, leave=False)
        for local_epoch in bar:
            epoch = epoch_offset + local_epoch + 1
            lr = dc.cosine_lr(step, total, self.config.lr0)
            train_loss, step = self._run_epoch(phase, loss_config, epoch, step, total)
            metrics = validate(PartModel(self.config.model, self.params), self.data.val,
                               self.config.eval_attack, self.workers)
            record = {'phase': phase, 'epoch': epoch, 'step': step - self._steps_per_epoch(),
                      'lr': lr, 'train_loss': train_loss, **metrics}
            self.history.append(record)
            bar.set_postfix(loss=f"{train_loss:.3f}", val_adv=f"{metrics['val_adv_acc']:.3f}")
            logger.info(f"📈 {phase} epoch {epoch}: loss {train_loss:.4f}, val clean "
                        f"{metrics['val_clean_acc']:.3f}, val adv {metrics['val_adv_acc']:.3f}, lr {lr:.5f}")
            if selecting:
                self._select(epoch, metrics)

    def _select(self, epoch: int, metrics: Dict[str, float]):
        score = metrics['val_adv_acc'] if self.config.select_on == 'adv' else metrics['val_clean_acc']
        if score > self._best_score:
            self._best_score = score
            self.best = Checkpoint(self.params.copy(), to_dict(self.config), epoch, dict(metrics),
                                   _rng_state(self.rng))

    def run(self) -> TrainResult:
        cfg = self.config
        logger.info(f"🚀 Training {cfg.model.arch}/{cfg.model.head} with {cfg.loss.kind} loss "
                    f"({cfg.pretrain_epochs} + {cfg.train_epochs} epochs, seed {cfg.seed})")
        pretrain_loss = replace(cfg.loss_config(), kind='normal')
        self._phase('pretrain', cfg.pretrain_epochs, pretrain_loss, cfg.train_epochs == 0, 0)
        self._phase('train', cfg.train_epochs, cfg.loss_config(), True, cfg.pretrain_epochs)
        logger.info(f"✅ Best epoch {self.best.epoch}: val clean {self.best.metrics['val_clean_acc']:.3f}, "
                    f"val adv {self.best.metrics['val_adv_acc']:.3f}")
        return TrainResult(self.best, self.history, self.params)


def _rng_state(rng: np.random.Generator) -> Dict[str, Any]:
    return json.loads(json.dumps(rng.bit_generator.state))


def train(config: TrainConfig, data: DatasetSplits, progress: bool = False, workers: int = 1) -> TrainResult:
    """Train and return (best checkpoint, per-epoch history, final params)"""
    return Trainer(config, data, progress, workers).run()


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepConfig:
    lr0: Tuple[float, ...] = (0.1, 0.05, 0.02)
    weight_decay: Tuple[float, ...] = (1e-4, 5e-4)
    c_seg: Tuple[float, ...] = ()
    beta: Tuple[float, ...] = ()
    # Extra axes keyed by dotted TrainConfig path, e.g. {"model.pool": [1, 2, 4, 8]}
    grid: Dict[str, List[Any]] = field(default_factory=dict)
    # Whole-cell overrides crossed innermost, for axes that only exist together
    # (e.g. the baseline has no head): [{"model.arch": "baseline"}, {"model.head": "bbox"}]
    variants: Tuple[Dict[str, Any], ...] = ()
    # Pick lr0/weight_decay first, then sweep c_seg/beta/grid at the winner
    staged: bool = False
    epoch_scale: float = 1.0
    workers: int = 1

    def __post_init__(self):
        if not self.lr0 or not self.weight_decay:
            raise ConfigurationError("sweep grid must not be empty")
        if self.epoch_scale <= 0:
            raise ConfigurationError("epoch_scale must be positive")
        if self.workers < 1:
            raise ConfigurationError("workers must be ≥ 1")

    def second_axes(self) -> Dict[str, List[Any]]:
        axes: Dict[str, List[Any]] = {}
        if self.c_seg:
            axes['loss.c_seg'] = list(self.c_seg)
        if self.beta:
            axes['loss.beta'] = list(self.beta)
        axes.update({key: list(values) for key, values in self.grid.items()})
        return axes


def _scaled(epochs: int, scale: float) -> int:
    return 0 if epochs == 0 else max(1, int(round(epochs * scale)))


def _cell(base: TrainConfig, assignment: Dict[str, Any], sweep_config: SweepConfig) -> TrainConfig:
    cfg = replace(base, pretrain_epochs=_scaled(base.pretrain_epochs, sweep_config.epoch_scale),
                  train_epochs=_scaled(base.train_epochs, sweep_config.epoch_scale))
    if 'loss.beta' in assignment and 'loss.c_seg' not in assignment:
        cfg = set_path(cfg, 'loss.c_seg', 0.5)
    for key, value in assignment.items():
        cfg = set_path(cfg, key, value)
    return cfg


def _product(axes: Dict[str, List[Any]]) -> List[Dict[str, Any]]:
    keys = list(axes)
    return [dict(zip(keys, values)) for values in itertools.product(*(axes[k] for k in keys))]


def _with_variants(assignments: List[Dict[str, Any]], variants) -> List[Dict[str, Any]]:
    if not variants:
        return assignments
    return [{**a, **v} for a in assignments for v in variants]


def sweep_cells(base: TrainConfig, sweep_config: SweepConfig,
                first_stage: Optional[Dict[str, Any]] = None) -> List[Tuple[Dict[str, Any], TrainConfig]]:
    """(assignment, config) per cell in deterministic grid order"""
    optimiser = {'lr0': list(sweep_config.lr0), 'weight_decay': list(sweep_config.weight_decay)}
    if sweep_config.staged:
        if first_stage is None:
            return [(a, _cell(base, a, sweep_config)) for a in _product(optimiser)]
        assignments = [{**first_stage, **a} for a in _product(sweep_config.second_axes())]
    else:
        assignments = _product({**optimiser, **sweep_config.second_axes()})
    assignments = _with_variants(assignments, sweep_config.variants)
    return [(a, _cell(base, a, sweep_config)) for a in assignments]


def _row(index: int, assignment: Dict[str, Any], cfg: TrainConfig) -> Dict[str, Any]:
    return {'cell': index, 'model': cfg.model.arch, 'head': cfg.model.head if cfg.model.arch == 'part' else '-',
            'loss': cfg.loss.kind, 'lr0': cfg.lr0, 'weight_decay': cfg.weight_decay,
            'c_seg': cfg.loss.c_seg, 'beta': cfg.loss.beta, 'seed': cfg.seed,
            **{key: value for key, value in assignment.items()
               if key not in ('lr0', 'weight_decay', 'loss.c_seg', 'loss.beta')}}


def run_cell(index: int, assignment: Dict[str, Any], cfg: TrainConfig, data: DatasetSplits) -> Dict[str, Any]:
    """Train one cell; failures become a row with status 'failed'"""
    row = _row(index, assignment, cfg)
    try:
        result = train(cfg, data)
        row.update(status='ok', epoch=result.best.epoch,
                   clean_acc=result.best.metrics['val_clean_acc'], adv_acc=result.best.metrics['val_adv_acc'])
    except (PartRobustError, ArithmeticError, ValueError) as e:
        logger.error(f"❌ Sweep cell {index} failed: {e}")
        row.update(status='failed', error=str(e), epoch=None, clean_acc=float('nan'), adv_acc=float('nan'))
    return row


def _run_cells(cells, data: DatasetSplits, workers: int, offset: int, progress: bool) -> List[Dict[str, Any]]:
    indexed = [(offset + i, a, c) for i, (a, c) in enumerate(cells)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run_cell, i, a, c, data) for i, a, c in indexed]
            rows = [f.result() for f in tqdm(futures, desc='sweep', disable=not progress)]
    else:
        rows = [run_cell(i, a, c, data) for i, a, c in tqdm(indexed, desc='sweep', disable=not progress)]
    return sorted(rows, key=lambda r: r['cell'])


def sweep(base: TrainConfig, sweep_config: SweepConfig, data: DatasetSplits, progress: bool = False) -> List[Dict[str, Any]]:
    """One result row per grid cell; a failing cell does not stop the others"""
    cells = sweep_cells(base, sweep_config)
    logger.info(f"🔍 Sweeping {len(cells)} cells with {sweep_config.workers} worker(s)")
    rows = _run_cells(cells, data, sweep_config.workers, 0, progress)

    if sweep_config.staged and sweep_config.second_axes():
        ok = [r for r in rows if r['status'] == 'ok']
        if not ok:
            logger.error("❌ Every first-stage cell failed; skipping the second stage")
            return rows
        metric = 'adv_acc' if base.select_on == 'adv' else 'clean_acc'
        winner = max(ok, key=lambda r: (r[metric], -r['cell']))
        first = {'lr0': winner['lr0'], 'weight_decay': winner['weight_decay']}
        logger.info(f"🏁 Stage one picked lr0={first['lr0']}, weight_decay={first['weight_decay']}")
        second = sweep_cells(base, sweep_config, first_stage=first)
        rows += _run_cells(second, data, sweep_config.workers, len(rows), progress)
    return rows
