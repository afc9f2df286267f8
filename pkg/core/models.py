"""
Segmenter, classifier heads and the composed part model f = f_cls ∘ f_seg.

The segmenter is a small encoder-decoder: two stride-2 convolutions take the
image to a quarter-resolution bottleneck, nearest-neighbour upsampling brings
it back, and a 1×1 convolution emits K+1 mask logits. The baseline shares the
same trunk but pools it globally into a linear classifier.
"""

from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Dict, Mapping, Optional, Tuple, Union

import numpy as np

from . import diffcore as dc
from .diffcore import Graph, Tensor
from .exceptions import ConfigurationError, UsageError
from .logging import LOGGER
from .partfeat import (HEAD_VARIANTS, PartFeatures, bbox_features, downsample_features,
                       pixel_logits)

logger = LOGGER(__name__)

ARCHITECTURES = ('part', 'baseline')


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs; head-specific fields only matter for their head"""

    arch: str = 'part'
    K: int = 6
    C: int = 8
    H: int = 32
    W: int = 32
    head: str = 'downsampled'
    pool: int = 4
    include_background: bool = True
    concat_input: bool = False
    width: int = 16
    head_channels: int = 8
    head_hidden: int = 32
    bbox_hidden: Tuple[int, int] = (64, 64)
    two_headed_hidden: int = 64
    part_to_class: Optional[Tuple[int, ...]] = None
    seed: int = 0

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ConfigurationError(f"arch must be one of {ARCHITECTURES}, got {self.arch!r}")
        if self.head not in HEAD_VARIANTS:
            raise ConfigurationError(f"head must be one of {HEAD_VARIANTS}, got {self.head!r}")
        if self.C < 2:
            raise ConfigurationError("at least two classes are required")
        if self.K < 1:
            raise ConfigurationError("at least one part is required")
        if self.H % 4 or self.W % 4 or self.H < 4 or self.W < 4:
            raise ConfigurationError(f"image extents must be positive multiples of 4, got {self.H}×{self.W}")
        if self.width < 1 or 4 * self.width > 64:
            raise ConfigurationError("segmenter width must lie in [1, 16] (≤ 64 channels)")
        if self.concat_input and self.head != 'downsampled':
            raise ConfigurationError("concat_input is only defined for the downsampled head")
        if not 1 <= self.pool <= min(self.H, self.W):
            raise ConfigurationError(f"pool size {self.pool} outside [1, {min(self.H, self.W)}]")
        if len(self.bbox_hidden) != 2:
            raise ConfigurationError("bbox_hidden needs exactly two widths")
        if self.part_to_class is not None and len(self.part_to_class) != self.K:
            raise ConfigurationError("part_to_class needs one class per part")
        if self.part_to_class is not None and not all(0 <= c < self.C for c in self.part_to_class):
            raise ConfigurationError(f"part_to_class entries must lie in [0, {self.C})")

    @property
    def is_part_model(self) -> bool:
        return self.arch == 'part'

    def class_map(self) -> Tuple[int, ...]:
        """Pixel-head part→class map; default sends part i to class (i-1) mod C"""
        if self.part_to_class is not None:
            return tuple(self.part_to_class)
        return tuple(i % self.C for i in range(self.K))

    def unmapped_classes(self) -> Tuple[int, ...]:
        """Classes the pixel head can never predict because no part maps to them"""
        if not self.is_part_model or self.head != 'pixel':
            return ()
        mapped = set(self.class_map())
        return tuple(c for c in range(self.C) if c not in mapped)

    def feature_channels(self) -> int:
        channels = self.K + 1 if self.include_background else self.K
        return channels + 3 if self.concat_input else channels


@dataclass
class ModelParams:
    """Named parameter arrays plus SGD velocity buffers"""

    tensors: Dict[str, np.ndarray]
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)

    def names(self):
        return list(self.tensors)

    def count(self, prefix: str = '') -> int:
        return int(sum(a.size for n, a in self.tensors.items() if n.startswith(prefix)))

    def copy(self) -> 'ModelParams':
        return ModelParams({n: a.copy() for n, a in self.tensors.items()},
                           {n: v.copy() for n, v in self.velocity.items()})

    def step(self, grads: Mapping[str, np.ndarray], lr: float, momentum: float,
             weight_decay: float) -> 'ModelParams':
        tensors, velocity = dc.sgd_step(self.tensors, grads, self.velocity, lr, momentum, weight_decay)
        return ModelParams(tensors, velocity)

    def bind(self, graph: Optional[Graph] = None, requires_grad: bool = False) -> Dict[str, Tensor]:
        """Wrap every parameter as a tensor, as graph leaves when a graph is given"""
        if graph is None:
            return {n: Tensor(a, name=n) for n, a in self.tensors.items()}
        return {n: graph.leaf(a, requires_grad=requires_grad, name=n) for n, a in self.tensors.items()}


Weights = Union[ModelParams, Mapping[str, Tensor]]


def param_shapes(config: ModelConfig) -> 'OrderedDict[str, Tuple[int, ...]]':
    """Parameter names and shapes, a pure function of the config"""
    w = config.width
    shapes: 'OrderedDict[str, Tuple[int, ...]]' = OrderedDict()

    def conv(name, out_c, in_c, k):
        shapes[f'{name}.weight'] = (out_c, in_c, k, k)
        shapes[f'{name}.bias'] = (out_c,)

    def fc(name, out_f, in_f):
        shapes[f'{name}.weight'] = (out_f, in_f)
        shapes[f'{name}.bias'] = (out_f,)

    conv('seg.enc1', w, 3, 3)
    conv('seg.enc2', 2 * w, w, 3)
    conv('seg.enc3', 4 * w, 2 * w, 3)
    conv('seg.bottleneck', 4 * w, 4 * w, 3)
    conv('seg.dec1', 2 * w, 4 * w, 3)
    conv('seg.dec2', w, 2 * w, 3)

    if not config.is_part_model:
        fc('head.fc', config.C, w)
        return shapes

    conv('seg.out', config.K + 1, w, 1)
    if config.head == 'downsampled':
        conv('head.conv', config.head_channels, config.feature_channels(), 3)
        fc('head.fc1', config.head_hidden, config.head_channels * config.pool * config.pool)
        fc('head.fc2', config.C, config.head_hidden)
    elif config.head == 'bbox':
        h1, h2 = config.bbox_hidden
        fc('head.fc1', h1, 5 * config.K)
        fc('head.fc2', h2, h1)
        fc('head.fc3', config.C, h2)
    elif config.head == 'two_headed':
        fc('head.fc1', config.two_headed_hidden, 4 * w)
        fc('head.fc2', config.C, config.two_headed_hidden)
    return shapes


def init_params(config: ModelConfig) -> ModelParams:
    """He-normal weights, zero biases, deterministic in config.seed"""
    rng = np.random.default_rng(config.seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name.endswith('.bias'):
            tensors[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            tensors[name] = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    params = ModelParams(tensors)
    unmapped = config.unmapped_classes()
    if unmapped:
        logger.warning(f"⚠️ Pixel head maps no part to classes {list(unmapped)} (K={config.K}, C={config.C}); "
                       f"their logits stay at zero")
    logger.debug(f"Initialised {config.arch}/{config.head} model with {params.count()} parameters")
    return params


def _weights(weights: Weights) -> Mapping[str, Tensor]:
    return weights.bind() if isinstance(weights, ModelParams) else weights


def _check_input(x: Tensor, config: ModelConfig):
    if x.shape[-3:] != (3, config.H, config.W):
        raise ConfigurationError(f"expected images of shape 3×{config.H}×{config.W}, got {x.shape}")


def _conv(x, weights, name, stride=1, padding=1):
    return dc.conv2d(x, weights[f'{name}.weight'], weights[f'{name}.bias'], stride=stride, padding=padding)


def _fc(x, weights, name):
    return dc.linear(x, weights[f'{name}.weight'], weights[f'{name}.bias'])


def _trunk(x: Tensor, weights: Mapping[str, Tensor]) -> Tuple[Tensor, Tensor]:
    h = dc.relu(_conv(x, weights, 'seg.enc1'))
    h = dc.relu(_conv(h, weights, 'seg.enc2', stride=2))
    h = dc.relu(_conv(h, weights, 'seg.enc3', stride=2))
    bottleneck = dc.relu(_conv(h, weights, 'seg.bottleneck'))
    h = dc.relu(_conv(dc.upsample_nearest2x(bottleneck), weights, 'seg.dec1'))
    h = dc.relu(_conv(dc.upsample_nearest2x(h), weights, 'seg.dec2'))
    return h, bottleneck


def segmenter_forward(x, weights: Weights, config: ModelConfig) -> Tuple[Tensor, Tensor]:
    """Image (…, 3, H, W) → (K+1 mask logits, bottleneck activations)"""
    x = dc._as_tensor(x)
    _check_input(x, config)
    if not config.is_part_model:
        raise UsageError("the baseline model has no segmentation output")
    weights = _weights(weights)
    features, bottleneck = _trunk(x, weights)
    seg = _conv(features, weights, 'seg.out', padding=0)
    return seg, bottleneck


def build_features(seg: Tensor, bottleneck: Tensor, config: ModelConfig, x: Optional[Tensor] = None) -> PartFeatures:
    """The head input the configured variant reads from the segmenter"""
    if config.head == 'downsampled':
        payload = downsample_features(seg, config.pool, config.include_background)
        if config.concat_input:
            if x is None:
                raise UsageError("concat_input needs the input image")
            payload = dc.concat([payload, dc.adaptive_avg_pool(x, config.pool, config.pool)], axis=-3)
    elif config.head == 'bbox':
        payload = bbox_features(seg)
    elif config.head == 'pixel':
        payload = pixel_logits(seg, config.class_map(), config.C)
    else:
        payload = bottleneck
    return PartFeatures(config.head, payload)


def head_forward(features: PartFeatures, weights: Weights, config: ModelConfig) -> Tensor:
    """Class logits (…, C) from the head's features"""
    if features.variant != config.head:
        raise UsageError(f"features of variant {features.variant!r} passed to a {config.head!r} head")
    weights = _weights(weights)
    f = features.payload

    if config.head == 'pixel':
        return f
    if config.head == 'downsampled':
        h = dc.relu(_conv(f, weights, 'head.conv'))
        h = dc.reshape(h, h.shape[:-3] + (h.shape[-3] * h.shape[-2] * h.shape[-1],))
        h = dc.relu(_fc(h, weights, 'head.fc1'))
        return _fc(h, weights, 'head.fc2')
    if config.head == 'bbox':
        h = dc.relu(_fc(f, weights, 'head.fc1'))
        h = dc.relu(_fc(h, weights, 'head.fc2'))
        return _fc(h, weights, 'head.fc3')
    pooled = dc.reduce_mean(f, axis=(-2, -1))
    h = dc.relu(_fc(pooled, weights, 'head.fc1'))
    return _fc(h, weights, 'head.fc2')


@dataclass
class ModelOutput:
    class_logits: Tensor
    seg: Optional[Tensor] = None
    bottleneck: Optional[Tensor] = None


def model_forward(x, weights: Weights, config: ModelConfig) -> ModelOutput:
    """Full forward pass; seg is None for the baseline"""
    x = dc._as_tensor(x)
    _check_input(x, config)
    weights = _weights(weights)

    if not config.is_part_model:
        features, _ = _trunk(x, weights)
        pooled = dc.reduce_mean(features, axis=(-2, -1))
        return ModelOutput(_fc(pooled, weights, 'head.fc'))

    seg, bottleneck = segmenter_forward(x, weights, config)
    features = build_features(seg, bottleneck, config, x if config.concat_input else None)
    return ModelOutput(head_forward(features, weights, config), seg, bottleneck)


def predict(logits: np.ndarray) -> np.ndarray:
    """argmax over classes; ties go to the lowest index"""
    return np.argmax(np.asarray(logits), axis=-1)


class PartModel:
    """Frozen (config, params) pair with convenience forwards for evaluation and attacks"""

    def __init__(self, config: ModelConfig, params: ModelParams):
        self.config = config
        self.params = params
        self._weights = params.bind()

    def forward(self, x) -> ModelOutput:
        return model_forward(x, self._weights, self.config)

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x).class_logits.data

    def predict(self, x: np.ndarray) -> np.ndarray:
        return predict(self.logits(x))

    def with_params(self, params: ModelParams) -> 'PartModel':
        return PartModel(self.config, params)

    def graph_forward(self, x: np.ndarray, x_grad: bool = False,
                      params_grad: bool = False) -> Tuple[Graph, Tensor, Dict[str, Tensor], ModelOutput]:
        """Forward inside a fresh graph; returns (graph, x leaf, weight leaves, output)"""
        graph = Graph()
        x_leaf = graph.leaf(x, requires_grad=x_grad, name='x')
        weights = self.params.bind(graph, requires_grad=params_grad)
        return graph, x_leaf, weights, model_forward(x_leaf, weights, self.config)


def baseline_config(config: ModelConfig) -> ModelConfig:
    """The parameter-matched non-part counterpart of a part-model config"""
    return replace(config, arch='baseline', concat_input=False)
