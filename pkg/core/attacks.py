"""
L∞ attacks against a frozen model.

PGDAttack follows signed gradients of a selectable objective and projects back
onto B∞(x, ε) ∩ [0, 1]. SquareRandomAttack only queries class scores and is
the gradient-free cross-check for gradient obfuscation.

Every sample draws its noise from np.random.default_rng([seed, sample_id, restart]),
so results do not depend on batch composition or order.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import diffcore as dc
from . import losses
from .exceptions import ConfigurationError, UsageError
from .logging import LOGGER
from .models import PartModel, predict

logger = LOGGER(__name__)

OBJECTIVES = ('cls', 'combined', 'kl')

EPSILON_GRID = tuple(e / 255 for e in (0, 2, 4, 8, 16, 24, 32))

# Stream tag separating square-attack draws from PGD's
_SQUARE_STREAM = 1

# Samples per forward during evaluation; fixed so results do not depend on worker count
EVAL_CHUNK = 64


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 8 / 255
    # Absolute step; when unset the step is epsilon * step_fraction
    step_size: Optional[float] = None
    step_fraction: float = 0.25
    iterations: int = 10
    restarts: int = 1
    objective: str = 'cls'
    attack_c_seg: float = 0.5
    random_init: bool = True
    square_queries: int = 0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigurationError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.iterations < 0:
            raise ConfigurationError(f"iterations must be ≥ 0, got {self.iterations}")
        if self.restarts < 1:
            raise ConfigurationError(f"restarts must be ≥ 1, got {self.restarts}")
        if self.objective not in OBJECTIVES:
            raise ConfigurationError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if not 0.0 <= self.attack_c_seg <= 1.0:
            raise ConfigurationError(f"attack_c_seg must lie in [0, 1], got {self.attack_c_seg}")
        if self.square_queries < 0:
            raise ConfigurationError("square_queries must be ≥ 0")
        if self.step_size is not None and self.step_size < 0:
            raise ConfigurationError("step_size must be ≥ 0")

    @property
    def step(self) -> float:
        return self.step_size if self.step_size is not None else self.epsilon * self.step_fraction

    @classmethod
    def for_eval(cls, epsilon: float = 8 / 255, **overrides) -> 'AttackConfig':
        """Evaluation defaults: 40 iterations, step ε/10, 3 restarts"""
        settings = dict(epsilon=epsilon, step_fraction=0.1, iterations=40, restarts=3, square_queries=100)
        settings.update(overrides)
        return cls(**settings)


@dataclass
class AttackResult:
    x_adv: np.ndarray                 # best restart per sample
    objective: np.ndarray             # objective value at x_adv, per sample
    clean_correct: np.ndarray         # (N,)
    restart_correct: np.ndarray       # (R, N), correctness at each restart's final point
    restart_pred: np.ndarray          # (R, N)

    @property
    def robust_correct(self) -> np.ndarray:
        """Correct on the clean input and on every restart"""
        return self.clean_correct & np.all(self.restart_correct, axis=0)


def _sample_ids(sample_ids, n: int) -> np.ndarray:
    if sample_ids is None:
        return np.arange(n)
    ids = np.asarray(sample_ids, dtype=np.int64)
    if ids.shape != (n,):
        raise UsageError(f"expected {n} sample ids, got shape {ids.shape}")
    return ids


def _project(x_t: np.ndarray, x: np.ndarray, epsilon: float) -> np.ndarray:
    return np.clip(np.clip(x_t, x - epsilon, x + epsilon), 0.0, 1.0)


def _objective(out, y, mask, cfg: AttackConfig, reference) -> dc.Tensor:
    """Per-sample attack objective (N,)"""
    cls_term = dc.cross_entropy(out.class_logits, y, reduction='none')
    if cfg.objective == 'cls':
        return cls_term
    if cfg.objective == 'kl':
        return dc.kl_divergence(reference, out.class_logits, reduction='none')
    if out.seg is None:
        raise UsageError("the combined objective needs a model with a segmentation output")
    if mask is None:
        raise UsageError("the combined objective needs ground-truth masks")
    seg_term = losses.per_sample_seg_loss(out.seg, mask)
    return cls_term * (1.0 - cfg.attack_c_seg) + seg_term * cfg.attack_c_seg


class PGDAttack:
    """Projected signed-gradient ascent with restarts"""

    def __init__(self, config: AttackConfig):
        self.config = config

    def _value(self, model: PartModel, x_t, y, mask, reference) -> np.ndarray:
        return _objective(model.forward(x_t), y, mask, self.config, reference).data

    def _gradient(self, model: PartModel, x_t, y, mask, reference) -> np.ndarray:
        graph, x_leaf, _, out = model.graph_forward(x_t, x_grad=True)
        total = dc.reduce_sum(_objective(out, y, mask, self.config, reference))
        graph.backward(total)
        return x_leaf.grad

    def _init(self, x: np.ndarray, ids: np.ndarray, restart: int) -> np.ndarray:
        cfg = self.config
        if not cfg.random_init:
            return x.copy()
        noise = np.stack([
            np.random.default_rng([cfg.seed, int(i), restart]).uniform(-cfg.epsilon, cfg.epsilon, size=x.shape[1:])
            for i in ids
        ])
        return np.clip(x + noise, 0.0, 1.0)

    def run(self, model: PartModel, x, y, mask=None, sample_ids=None, reference=None) -> AttackResult:
        cfg = self.config
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        ids = _sample_ids(sample_ids, len(x))

        clean_logits = model.logits(x)
        clean_correct = predict(clean_logits) == y
        if cfg.objective == 'kl' and reference is None:
            reference = clean_logits

        if cfg.epsilon == 0.0:
            objective = self._value(model, x, y, mask, reference)
            repeated = np.repeat(clean_correct[None], cfg.restarts, axis=0)
            pred = np.repeat(predict(clean_logits)[None], cfg.restarts, axis=0)
            return AttackResult(x.copy(), objective, clean_correct, repeated, pred)

        best_x = x.copy()
        best_obj = np.full(len(x), -np.inf)
        restart_correct, restart_pred = [], []
        for restart in range(cfg.restarts):
            x_t = self._init(x, ids, restart)
            for _ in range(cfg.iterations):
                grad = self._gradient(model, x_t, y, mask, reference)
                x_t = _project(x_t + cfg.step * np.sign(grad), x, cfg.epsilon)

            out = model.forward(x_t)
            objective = _objective(out, y, mask, cfg, reference).data
            pred = predict(out.class_logits.data)
            restart_pred.append(pred)
            restart_correct.append(pred == y)

            better = objective > best_obj
            best_x[better] = x_t[better]
            best_obj[better] = objective[better]

        logger.debug(f"PGD ε={cfg.epsilon:.4f} × {cfg.restarts} restarts on {len(x)} samples")
        return AttackResult(best_x, best_obj, clean_correct, np.array(restart_correct), np.array(restart_pred))


class SquareRandomAttack:
    """Greedy random search over ±ε square patches, using class scores only"""

    def __init__(self, config: AttackConfig, queries: Optional[int] = None):
        self.config = config
        self.queries = config.square_queries if queries is None else queries

    def side_schedule(self, height: int) -> List[int]:
        """Square side per query, annealed geometrically from H/2 down to 1"""
        start = max(1, height // 2)
        if self.queries <= 1:
            return [start] * self.queries
        fractions = np.arange(self.queries) / (self.queries - 1)
        return [max(1, int(round(start ** (1.0 - f)))) for f in fractions]

    def _loss(self, model: PartModel, x_t, y) -> np.ndarray:
        return dc.cross_entropy(model.logits(x_t), y, reduction='none').data

    def run(self, model: PartModel, x, y, mask=None, sample_ids=None, reference=None) -> AttackResult:
        cfg = self.config
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        ids = _sample_ids(sample_ids, len(x))

        clean_logits = model.logits(x)
        clean_correct = predict(clean_logits) == y
        best_x = x.copy()
        best_loss = dc.cross_entropy(clean_logits, y, reduction='none').data.copy()

        if cfg.epsilon > 0.0 and self.queries > 0:
            rngs = [np.random.default_rng([cfg.seed, int(i), 0, _SQUARE_STREAM]) for i in ids]
            n_channels, height, width = x.shape[1:]
            for side in self.side_schedule(height):
                candidate = best_x.copy()
                for n, rng in enumerate(rngs):
                    r = rng.integers(0, height - side + 1)
                    c = rng.integers(0, width - side + 1)
                    signs = rng.choice((-1.0, 1.0), size=(n_channels, 1, 1))
                    patch = x[n, :, r:r + side, c:c + side] + signs * cfg.epsilon
                    candidate[n, :, r:r + side, c:c + side] = np.clip(patch, 0.0, 1.0)
                loss = self._loss(model, candidate, y)
                accept = loss > best_loss
                best_x[accept] = candidate[accept]
                best_loss[accept] = loss[accept]

        pred = model.predict(best_x)
        return AttackResult(best_x, best_loss, clean_correct, (pred == y)[None], pred[None])


def pgd_attack(model: PartModel, x, y, mask=None, config: AttackConfig = AttackConfig(),
               sample_ids=None, reference=None) -> np.ndarray:
    """x* from PGDAttack; the restart with the largest objective per sample"""
    return PGDAttack(config).run(model, x, y, mask, sample_ids, reference).x_adv


def square_random_attack(model: PartModel, x, y, config: AttackConfig = AttackConfig(),
                         sample_ids=None, queries: Optional[int] = None) -> np.ndarray:
    return SquareRandomAttack(config, queries).run(model, x, y, sample_ids=sample_ids).x_adv


def epsilon_sweep(model: PartModel, x, y, mask=None, config: AttackConfig = AttackConfig(),
                  grid: Sequence[float] = EPSILON_GRID, sample_ids=None) -> List[Dict[str, float]]:
    """Robust PGD accuracy at each radius of the grid"""
    rows = []
    for epsilon in grid:
        result = PGDAttack(replace(config, epsilon=float(epsilon))).run(model, x, y, mask, sample_ids)
        rows.append({'epsilon': float(epsilon), 'adv_acc': float(np.mean(result.robust_correct))})
        logger.info(f"📉 ε={epsilon * 255:.0f}/255 → adv acc {rows[-1]['adv_acc']:.3f}")
    return rows


def _concat(results: List[AttackResult], x: np.ndarray, restarts: int) -> AttackResult:
    if not results:
        empty = np.zeros((restarts, 0), dtype=bool)
        return AttackResult(x.copy(), np.zeros(0), np.zeros(0, dtype=bool), empty, empty.astype(np.int64))
    return AttackResult(
        np.concatenate([r.x_adv for r in results]),
        np.concatenate([r.objective for r in results]),
        np.concatenate([r.clean_correct for r in results]),
        np.concatenate([r.restart_correct for r in results], axis=1),
        np.concatenate([r.restart_pred for r in results], axis=1),
    )


def run_chunked(attack, model: PartModel, x, y, mask=None, sample_ids=None,
                chunk: int = EVAL_CHUNK, workers: int = 1) -> AttackResult:
    """Run an attack over fixed-size chunks, optionally on a thread pool, merged in order"""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    ids = _sample_ids(sample_ids, len(x))
    spans = [(start, min(start + chunk, len(x))) for start in range(0, len(x), chunk)]

    def job(span):
        start, stop = span
        return attack.run(model, x[start:stop], y[start:stop],
                          None if mask is None else mask[start:stop], ids[start:stop])

    if workers > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, spans))
    else:
        results = [job(span) for span in spans]
    restarts = attack.config.restarts if isinstance(attack, PGDAttack) else 1
    return _concat(results, x, restarts)
