"""
Training objectives: normal, PGD-adversarial and TRADES, each mixing a
classification cross-entropy with a pixel-wise segmentation cross-entropy.

All losses are batch means. Ground-truth masks are accepted either one-hot
(…, K+1, H, W) or as channel-index maps (…, H, W).
"""

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from . import attacks
from . import diffcore as dc
from .diffcore import Graph, Tensor
from .exceptions import ConfigurationError, DataError, UsageError
from .logging import LOGGER
from .models import ModelConfig, ModelParams, PartModel, model_forward

logger = LOGGER(__name__)

LOSS_KINDS = ('normal', 'pgd_adv', 'trades')


@dataclass(frozen=True)
class LossConfig:
    kind: str = 'pgd_adv'
    c_seg: float = 0.5
    beta: float = 1.0
    # Inner maximisation; filled from the training attack when left unset
    attack: Optional['attacks.AttackConfig'] = None

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ConfigurationError(f"loss kind must be one of {LOSS_KINDS}, got {self.kind!r}")
        if not 0.0 <= self.c_seg <= 1.0:
            raise ConfigurationError(f"c_seg must lie in [0, 1], got {self.c_seg}")
        if self.beta < 0:
            raise ConfigurationError(f"beta must be non-negative, got {self.beta}")

    def inner_attack(self) -> 'attacks.AttackConfig':
        if self.attack is None:
            raise UsageError(f"{self.kind} loss needs attack settings")
        objective = 'kl' if self.kind == 'trades' else 'cls'
        return replace(self.attack, objective=objective)


@dataclass
class LossTerms:
    """Scalar total plus its components, all nodes of `graph`"""

    total: Tensor
    cls: Tensor
    seg: Optional[Tensor]
    kl: Optional[Tensor]
    graph: Graph
    weights: dict
    x_adv: Optional[np.ndarray] = None

    @property
    def value(self) -> float:
        return self.total.item()

    def components(self) -> dict:
        return {
            'total': self.total.item(),
            'cls': self.cls.item(),
            'seg': None if self.seg is None else self.seg.item(),
            'kl': None if self.kl is None else self.kl.item(),
        }

    def param_grads(self) -> dict:
        """Run backward and collect gradients keyed by parameter name"""
        self.graph.backward(self.total)
        return {name: t.grad for name, t in self.weights.items()}


def mask_indices(mask, n_channels: int) -> np.ndarray:
    """Channel index per pixel from a one-hot mask or an index map"""
    mask = np.asarray(mask)
    if np.issubdtype(mask.dtype, np.integer):
        if mask.size and (mask.min() < 0 or mask.max() >= n_channels):
            raise DataError(f"mask indices outside [0, {n_channels})")
        return mask.astype(np.int64)
    if mask.ndim < 3 or mask.shape[-3] != n_channels:
        raise DataError(f"one-hot mask needs {n_channels} channels on axis -3, got {mask.shape}")
    if not np.all((mask == 0) | (mask == 1)) or not np.all(mask.sum(axis=-3) == 1):
        raise DataError("mask is not one-hot over its channels")
    return np.argmax(mask, axis=-3)


def per_sample_seg_loss(seg: Tensor, mask) -> Tensor:
    """Mean pixel cross-entropy of each sample, shape (…,)"""
    labels = mask_indices(mask, seg.shape[-3])
    if labels.shape != seg.shape[:-3] + seg.shape[-2:]:
        raise DataError(f"mask shape {labels.shape} does not match logits {seg.shape}")
    pixel = dc.cross_entropy(seg, labels, axis=-3, reduction='none')
    return dc.reduce_mean(pixel, axis=(-2, -1))


def seg_loss(seg: Tensor, mask, sample_weight: Optional[Sequence[float]] = None) -> Tensor:
    """Pixel-wise cross-entropy, averaged over pixels and then over the batch.

    With sample_weight (0/1 per sample) unlabelled samples contribute zero and
    the sum is still divided by the batch size.
    """
    per_sample = per_sample_seg_loss(seg, mask)
    if sample_weight is None:
        return dc.reduce_mean(per_sample)
    weight = np.asarray(sample_weight, dtype=np.float64)
    if weight.shape != per_sample.shape:
        raise DataError(f"sample weights {weight.shape} do not match batch {per_sample.shape}")
    return dc.reduce_mean(per_sample * weight)


def _mix(cls_term: Tensor, seg_term: Optional[Tensor], c_seg: float) -> Tensor:
    if seg_term is None:
        return cls_term
    return cls_term * (1.0 - c_seg) + seg_term * c_seg


def _setup(x, params: ModelParams):
    graph = Graph()
    x_leaf = graph.leaf(x, name='x')
    weights = params.bind(graph, requires_grad=True)
    return graph, x_leaf, weights


def normal_loss(x, y, mask, params: ModelParams, model_config: ModelConfig, config: LossConfig,
                sample_weight=None, **_) -> LossTerms:
    """(1 - c_seg)·L_cls + c_seg·L_seg on clean inputs"""
    graph, x_leaf, weights = _setup(x, params)
    out = model_forward(x_leaf, weights, model_config)
    cls_term = dc.cross_entropy(out.class_logits, y)
    seg_term = None if out.seg is None else seg_loss(out.seg, mask, sample_weight)
    return LossTerms(_mix(cls_term, seg_term, config.c_seg), cls_term, seg_term, None, graph, weights)


def adv_loss(x, y, mask, params: ModelParams, model_config: ModelConfig, config: LossConfig,
             sample_weight=None, sample_ids=None, attack_seed: Optional[int] = None) -> LossTerms:
    """Both terms on the x* that maximises the classification loss alone"""
    attack = config.inner_attack()
    if attack_seed is not None:
        attack = replace(attack, seed=attack_seed)
    model = PartModel(model_config, params)
    x_adv = attacks.pgd_attack(model, x, y, mask, attack, sample_ids=sample_ids)

    graph, x_leaf, weights = _setup(x_adv, params)
    out = model_forward(x_leaf, weights, model_config)
    cls_term = dc.cross_entropy(out.class_logits, y)
    seg_term = None if out.seg is None else seg_loss(out.seg, mask, sample_weight)
    return LossTerms(_mix(cls_term, seg_term, config.c_seg), cls_term, seg_term, None, graph, weights, x_adv)


def trades_loss(x, y, mask, params: ModelParams, model_config: ModelConfig, config: LossConfig,
                sample_weight=None, sample_ids=None, attack_seed: Optional[int] = None) -> LossTerms:
    """(1 - c_seg)·L_cls(x) + c_seg·L_seg(x*) + β·KL(f(x) ‖ f(x*)), x* maximising the KL"""
    attack = config.inner_attack()
    if attack_seed is not None:
        attack = replace(attack, seed=attack_seed)
    model = PartModel(model_config, params)
    x_adv = attacks.pgd_attack(model, x, y, mask, attack, sample_ids=sample_ids)

    graph, x_leaf, weights = _setup(x, params)
    clean = model_forward(x_leaf, weights, model_config)
    adv = model_forward(graph.leaf(x_adv, name='x_adv'), weights, model_config)

    cls_term = dc.cross_entropy(clean.class_logits, y)
    seg_term = None if adv.seg is None else seg_loss(adv.seg, mask, sample_weight)
    kl_term = dc.kl_divergence(clean.class_logits, adv.class_logits)
    total = _mix(cls_term, seg_term, config.c_seg) + kl_term * config.beta
    return LossTerms(total, cls_term, seg_term, kl_term, graph, weights, x_adv)


LOSSES = {
    'normal': normal_loss,
    'pgd_adv': adv_loss,
    'trades': trades_loss,
}


def compute_loss(x, y, mask, params: ModelParams, model_config: ModelConfig, config: LossConfig,
                 **kwargs) -> LossTerms:
    """Dispatch on config.kind"""
    return LOSSES[config.kind](x, y, mask, params, model_config, config, **kwargs)
