"""
Procedural part-annotated dataset, benchmark transforms and label transforms.

Every class is a fixed set of parts drawn around a body (head, legs, tail,
horns, wings). Instances vary position, scale, rotation, textures and
background. Parts are rasterised as polygons into a channel-index label map
and the image is painted from that same map, so masks are pixel-exact.

Each sample is a pure function of (seed, global index): train, val and test
occupy consecutive, disjoint index ranges of one generator stream.
"""

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, replace
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
from PIL import Image, ImageColor, ImageDraw
from scipy import ndimage

from .exceptions import ConfigurationError, DataError, UsageError
from .logging import LOGGER

logger = LOGGER(__name__)

SPLITS = ('train', 'val', 'test')
BACKGROUNDS = ('solid', 'textured')
LABEL_MODES = ('parts', 'part_bbox', 'object_seg')
TEXTURES = ('stripes', 'dots', 'checker', 'noise')

PART_NAMES = {1: 'body', 2: 'head', 3: 'legs', 4: 'tail', 5: 'horns', 6: 'wings'}

# Part sets per class; every class has a body
DEFAULT_GRAMMAR: Tuple[Tuple[int, ...], ...] = (
    (1, 2),
    (1, 2, 3),
    (1, 2, 4),
    (1, 2, 5),
    (1, 2, 6),
    (1, 3, 4),
    (1, 2, 3, 5),
    (1, 4, 6),
)

# Severity 1..5 parameters per corruption kind
CORRUPTIONS: Dict[str, Tuple[float, ...]] = {
    'gaussian_noise': (0.04, 0.06, 0.08, 0.10, 0.12),   # noise std
    'shot_noise': (500, 250, 100, 75, 50),              # photon count
    'blur': (0.4, 0.6, 0.8, 1.0, 1.5),                  # gaussian sigma, pixels
    'brightness': (0.05, 0.10, 0.15, 0.20, 0.30),       # additive shift
    'contrast': (0.75, 0.60, 0.45, 0.30, 0.20),         # factor around the image mean
    'pixelate': (0.9, 0.8, 0.7, 0.6, 0.5),              # downsampling factor
}

# Draw order; later parts cover earlier ones
_DRAW_ORDER = (1, 3, 4, 6, 2, 5)
_ELLIPSE_POINTS = 24


@dataclass(frozen=True)
class DatasetSpec:
    C: int = 8
    K: int = 6
    H: int = 32
    W: int = 32
    n_train: int = 4096
    n_val: int = 512
    n_test: int = 1024
    seed: int = 0
    background: str = 'textured'
    # Probability that a background takes its class's hue
    background_correlation: float = 0.5
    grammar: Optional[Tuple[Tuple[int, ...], ...]] = None
    labels: str = 'parts'
    label_fraction: float = 1.0

    def __post_init__(self):
        if self.C < 2:
            raise ConfigurationError("at least two classes are required")
        if not 1 <= self.K <= 255:
            raise ConfigurationError(f"part count must lie in [1, 255], got {self.K}")
        if self.H < 8 or self.W < 8:
            raise ConfigurationError(f"images must be at least 8×8, got {self.H}×{self.W}")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ConfigurationError("split sizes must be non-negative")
        if self.background not in BACKGROUNDS:
            raise ConfigurationError(f"background must be one of {BACKGROUNDS}, got {self.background!r}")
        if not 0.0 <= self.background_correlation <= 1.0:
            raise ConfigurationError("background_correlation must lie in [0, 1]")
        if self.labels not in LABEL_MODES:
            raise ConfigurationError(f"labels must be one of {LABEL_MODES}, got {self.labels!r}")
        if not 0.0 <= self.label_fraction <= 1.0:
            raise ConfigurationError(f"label_fraction must lie in [0, 1], got {self.label_fraction}")
        self.class_parts()

    def class_parts(self) -> Tuple[Tuple[int, ...], ...]:
        grammar = self.grammar if self.grammar is not None else DEFAULT_GRAMMAR[:self.C]
        if len(grammar) < self.C:
            raise ConfigurationError(f"grammar defines {len(grammar)} classes, {self.C} required")
        grammar = tuple(tuple(int(p) for p in parts) for parts in grammar[:self.C])
        for c, parts in enumerate(grammar):
            if 1 not in parts:
                raise ConfigurationError(f"class {c} has no body part")
            bad = [p for p in parts if not 1 <= p <= min(self.K, 6)]
            if bad:
                raise ConfigurationError(f"class {c} uses parts {bad} outside 1..{min(self.K, 6)}")
        return grammar

    def offsets(self) -> Dict[str, int]:
        return {'train': 0, 'val': self.n_train, 'test': self.n_train + self.n_val}

    def sizes(self) -> Dict[str, int]:
        return {'train': self.n_train, 'val': self.n_val, 'test': self.n_test}

    @property
    def label_channels(self) -> int:
        """K of the label maps after the configured label transform"""
        return 1 if self.labels == 'object_seg' else self.K


@dataclass
class Sample:
    x: np.ndarray          # (3, H, W) in [0, 1]
    y: int
    labels: np.ndarray     # (H, W) channel index, 0 = background
    K: int
    seg_weight: float = 1.0

    @property
    def M(self) -> np.ndarray:
        """One-hot (K+1, H, W) mask"""
        return one_hot(self.labels, self.K)

    @property
    def foreground(self) -> np.ndarray:
        return self.labels > 0


@dataclass
class Dataset:
    x: np.ndarray            # (N, 3, H, W)
    y: np.ndarray            # (N,)
    labels: np.ndarray       # (N, H, W) uint8
    K: int
    ids: np.ndarray          # global generator indices
    seg_weight: np.ndarray = None
    name: str = ''

    def __post_init__(self):
        if self.seg_weight is None:
            self.seg_weight = np.ones(len(self.y))

    def __len__(self) -> int:
        return len(self.y)

    def sample(self, i: int) -> Sample:
        return Sample(self.x[i], int(self.y[i]), self.labels[i], self.K, float(self.seg_weight[i]))

    def masks(self, index=slice(None)) -> np.ndarray:
        return one_hot(self.labels[index], self.K)

    def subset(self, index) -> 'Dataset':
        index = np.asarray(index)
        return Dataset(self.x[index], self.y[index], self.labels[index], self.K, self.ids[index],
                       self.seg_weight[index], self.name)

    def with_images(self, x: np.ndarray, name: Optional[str] = None) -> 'Dataset':
        return replace(self, x=x, name=self.name if name is None else name)

    def batches(self, batch_size: int, rng: Optional[np.random.Generator] = None) -> Iterator[np.ndarray]:
        """Index arrays of at most batch_size, shuffled when an rng is given"""
        if batch_size < 1:
            raise ConfigurationError(f"batch_size must be ≥ 1, got {batch_size}")
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(self), batch_size):
            yield order[start:start + batch_size]

    def fingerprint(self) -> str:
        """Content digest over images, labels, part labels and ids"""
        digest = hashlib.sha256(f"{self.name}:{self.K}:{self.x.shape}".encode('utf-8'))
        for array in (self.x, self.y, self.labels, self.ids):
            digest.update(np.ascontiguousarray(array).tobytes())
        return digest.hexdigest()


@dataclass
class DatasetSplits:
    spec: DatasetSpec
    train: Dataset
    val: Dataset
    test: Dataset

    def __getitem__(self, split: str) -> Dataset:
        if split not in SPLITS:
            raise UsageError(f"unknown split {split!r}")
        return getattr(self, split)


def one_hot(labels: np.ndarray, k: int) -> np.ndarray:
    """(…, H, W) channel indices → (…, K+1, H, W) float one-hot"""
    labels = np.asarray(labels)
    if labels.size and labels.max() > k:
        raise DataError(f"label index {labels.max()} exceeds part count {k}")
    eye = np.eye(k + 1)
    return np.moveaxis(eye[labels], -1, -3)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def _hsv(hue: float, saturation: float, value: float) -> np.ndarray:
    rgb = ImageColor.getrgb(f"hsv({int(round(hue * 360)) % 360},{int(saturation * 100)}%,{int(value * 100)}%)")
    return np.asarray(rgb, dtype=np.float64) / 255.0


def _ellipse(cy, cx, ry, rx) -> List[Tuple[float, float]]:
    angles = np.linspace(0.0, 2 * math.pi, _ELLIPSE_POINTS, endpoint=False)
    return [(cy + ry * math.sin(a), cx + rx * math.cos(a)) for a in angles]


def _box(cy, cx, half_h, half_w) -> List[Tuple[float, float]]:
    return [(cy - half_h, cx - half_w), (cy - half_h, cx + half_w), (cy + half_h, cx + half_w), (cy + half_h, cx - half_w)]


def part_templates(cls: int) -> Dict[int, List[List[Tuple[float, float]]]]:
    """Polygons per part in body coordinates (row, col), unit = image height.

    Odd classes are mirrored so the head and tail swap sides.
    """
    side = 1.0 if cls % 2 == 0 else -1.0
    return {
        1: [_ellipse(0.0, 0.0, 0.15, 0.23)],
        2: [_ellipse(-0.09, 0.27 * side, 0.10, 0.10)],
        3: [_box(0.20, -0.12, 0.09, 0.035), _box(0.20, 0.12, 0.09, 0.035)],
        4: [_box(-0.03, -0.31 * side, 0.035, 0.10)],
        5: [[(-0.17, 0.22 * side), (-0.34, 0.27 * side), (-0.17, 0.32 * side)]],
        6: [[(-0.08, -0.20 * side), (-0.36, -0.10 * side), (-0.08, 0.04 * side)]],
    }


def render_labels(spec: DatasetSpec, cls: int, rng: np.random.Generator) -> np.ndarray:
    """Rasterise one instance of class `cls` into an (H, W) uint8 label map"""
    scale = rng.uniform(0.75, 1.25)
    angle = math.radians(rng.uniform(-20.0, 20.0))
    cy = spec.H / 2 + rng.uniform(-spec.H / 10, spec.H / 10)
    cx = spec.W / 2 + rng.uniform(-spec.W / 10, spec.W / 10)
    cos, sin = math.cos(angle), math.sin(angle)

    canvas = Image.new('L', (spec.W, spec.H), 0)
    draw = ImageDraw.Draw(canvas)
    parts = set(spec.class_parts()[cls])
    templates = part_templates(cls)
    for part in _DRAW_ORDER:
        if part not in parts:
            continue
        for polygon in templates[part]:
            points = []
            for dy, dx in polygon:
                ry, rx = dx * sin + dy * cos, dx * cos - dy * sin
                points.append((cx + scale * spec.H * rx, cy + scale * spec.H * ry))
            draw.polygon(points, fill=part)
    return np.asarray(canvas, dtype=np.uint8).copy()


def _pattern(kind: int, cls: int, height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    rows, cols = np.mgrid[0:height, 0:width].astype(np.float64)
    freq = 3.0 + cls // len(TEXTURES)
    phase = rng.uniform(0, 2 * math.pi)
    name = TEXTURES[kind]
    if name == 'stripes':
        theta = math.pi * cls / 8
        return 0.5 + 0.5 * np.sin(2 * math.pi * freq * (rows * math.cos(theta) + cols * math.sin(theta)) / height + phase)
    if name == 'dots':
        wave = np.cos(2 * math.pi * freq * rows / height + phase) * np.cos(2 * math.pi * freq * cols / width + phase)
        return (wave > 0.3).astype(np.float64)
    if name == 'checker':
        period = max(1, int(height // (2 * freq)))
        offset = rng.integers(0, period)
        return (((rows + offset) // period + (cols + offset) // period) % 2).astype(np.float64)
    return rng.uniform(0.0, 1.0, size=(height, width))


def paint_parts(labels: np.ndarray, palette: int, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    """(3, H, W) fill for every part pixel using the texture palette of class `palette`"""
    height, width = labels.shape
    image = np.zeros((3, height, width))
    pattern = _pattern(palette % len(TEXTURES), palette, height, width, rng)
    for part in (int(p) for p in np.unique(labels)):
        if part == 0:
            continue
        hue = palette / n_classes + 0.04 * (part - 1) + rng.normal(0.0, 0.01)
        color = _hsv(hue % 1.0, 0.75, 0.55 + 0.06 * (part % 5))
        inside = labels == part
        image[:, inside] = color[:, None] * (0.55 + 0.45 * pattern[inside])[None]
    return np.clip(image, 0.0, 1.0)


def render_background(spec: DatasetSpec, cls: int, rng: np.random.Generator) -> np.ndarray:
    """(3, H, W) background; the first draws of every sample's generator"""
    if rng.uniform() < spec.background_correlation:
        hue = (cls / spec.C + 0.5 + rng.normal(0.0, 0.03)) % 1.0
    else:
        hue = rng.uniform()
    base = _hsv(hue, rng.uniform(0.2, 0.6), rng.uniform(0.3, 0.9))
    if spec.background == 'solid':
        return np.broadcast_to(base[:, None, None], (3, spec.H, spec.W)).copy()
    second = _hsv((hue + rng.uniform(0.05, 0.2)) % 1.0, rng.uniform(0.2, 0.6), rng.uniform(0.3, 0.9))
    rows, cols = np.mgrid[0:spec.H, 0:spec.W].astype(np.float64)
    angle = rng.uniform(0, math.pi)
    freq = rng.uniform(0.5, 2.0)
    t = 0.5 + 0.5 * np.sin(2 * math.pi * freq * (rows * math.cos(angle) + cols * math.sin(angle)) / spec.H
                           + rng.uniform(0, 2 * math.pi))
    grain = rng.normal(0.0, 0.02, size=(spec.H, spec.W))
    image = base[:, None, None] * (1 - t) + second[:, None, None] * t + grain
    return np.clip(image, 0.0, 1.0)


def _sample_rng(spec: DatasetSpec, global_index: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, int(global_index)])


def generate_sample(spec: DatasetSpec, global_index: int, cls: int) -> Sample:
    rng = _sample_rng(spec, global_index)
    background = render_background(spec, cls, rng)
    labels = render_labels(spec, cls, rng)
    fill = paint_parts(labels, cls, spec.C, rng)
    x = np.where(labels[None] > 0, fill, background)
    return Sample(x, cls, labels, spec.K)


def background_of(spec: DatasetSpec, global_index: int, cls: int) -> np.ndarray:
    """Regenerate a sample's background without its object"""
    return render_background(spec, cls, _sample_rng(spec, global_index))


def generate_split(spec: DatasetSpec, split: str) -> Dataset:
    start, size = spec.offsets()[split], spec.sizes()[split]
    xs = np.zeros((size, 3, spec.H, spec.W))
    labels = np.zeros((size, spec.H, spec.W), dtype=np.uint8)
    ys = np.arange(size) % spec.C
    for i in range(size):
        sample = generate_sample(spec, start + i, int(ys[i]))
        xs[i], labels[i] = sample.x, sample.labels
    return Dataset(xs, ys.astype(np.int64), labels, spec.K, np.arange(start, start + size), name=split)


def generate_dataset(spec: DatasetSpec, apply_labels: bool = True) -> DatasetSplits:
    """Train/val/test sets; label transforms from the DatasetSpec applied unless disabled"""
    logger.info(f"🧩 Generating {spec.n_train}/{spec.n_val}/{spec.n_test} samples "
                f"(C={spec.C}, K={spec.K}, {spec.H}×{spec.W}, seed={spec.seed})")
    splits = DatasetSplits(spec, *(generate_split(spec, split) for split in SPLITS))
    if apply_labels:
        splits = prepare_labels(splits)
    return splits


def prepare_labels(splits: DatasetSplits) -> DatasetSplits:
    spec = splits.spec
    train, val, test = splits.train, splits.val, splits.test
    if spec.labels != 'parts':
        train, val, test = (transform_labels(ds, spec.labels, spec.seed) for ds in (train, val, test))
    if spec.label_fraction < 1.0:
        train = transform_labels(train, 'drop_fraction', spec.seed, fraction=spec.label_fraction)
    return DatasetSplits(spec, train, val, test)


# ---------------------------------------------------------------------------
# Benchmark transforms
# ---------------------------------------------------------------------------

def _pixelate(image: np.ndarray, factor: float) -> np.ndarray:
    height, width = image.shape[-2:]
    small = (max(1, int(width * factor)), max(1, int(height * factor)))
    out = np.empty_like(image)
    for c in range(image.shape[0]):
        channel = Image.fromarray(image[c].astype(np.float32))
        channel = channel.resize(small, Image.Resampling.BOX).resize((width, height), Image.Resampling.NEAREST)
        out[c] = np.asarray(channel, dtype=np.float64)
    return out


def corrupt(x: np.ndarray, kind: str, severity: int, seed=0) -> np.ndarray:
    """Apply one corruption to an image (3, H, W) or batch (N, 3, H, W).

    Severity 0 is the identity. Output is clipped to [0, 1].
    """
    if kind not in CORRUPTIONS:
        raise UsageError(f"unknown corruption {kind!r}; expected one of {sorted(CORRUPTIONS)}")
    if not 0 <= severity <= 5:
        raise ConfigurationError(f"severity must lie in 0..5, got {severity}")
    x = np.asarray(x, dtype=np.float64)
    if severity == 0:
        return x.copy()

    param = CORRUPTIONS[kind][severity - 1]
    rng = np.random.default_rng(seed)
    if kind == 'gaussian_noise':
        out = x + rng.normal(0.0, param, size=x.shape)
    elif kind == 'shot_noise':
        out = rng.poisson(x * param) / param
    elif kind == 'blur':
        sigma = (0,) * (x.ndim - 2) + (param, param)
        out = ndimage.gaussian_filter(x, sigma=sigma, mode='reflect')
    elif kind == 'brightness':
        out = x + param
    elif kind == 'contrast':
        mean = x.mean(axis=(-3, -2, -1), keepdims=True)
        out = (x - mean) * param + mean
    else:
        images = x.reshape((-1,) + x.shape[-3:])
        out = np.stack([_pixelate(image, param) for image in images]).reshape(x.shape)
    return np.clip(out, 0.0, 1.0)


def corrupt_dataset(dataset: Dataset, kind: str, severity: int, seed: int) -> Dataset:
    """Per-sample seeds [seed, id] keep results independent of batching"""
    x = np.stack([corrupt(dataset.x[i], kind, severity, [seed, int(dataset.ids[i])]) for i in range(len(dataset))]) \
        if len(dataset) else dataset.x.copy()
    return dataset.with_images(x, f"{dataset.name}/{kind}-{severity}")


def background_swap(s: Sample, donor: Sample, allow_same_class: bool = False) -> Sample:
    """Keep s's foreground and mask, take every background pixel from donor"""
    if donor.y == s.y and not allow_same_class:
        raise UsageError(f"background donor shares class {s.y}")
    x = np.where(s.foreground[None], s.x, donor.x)
    return Sample(x, s.y, s.labels.copy(), s.K, s.seg_weight)


def background_swap_dataset(dataset: Dataset, spec: DatasetSpec, seed: int) -> Dataset:
    """Pair each sample with the object-free background of a sample from another class"""
    x = dataset.x.copy()
    for i in range(len(dataset)):
        rng = np.random.default_rng([seed, int(dataset.ids[i]), 2])
        donor_cls = int(rng.choice([c for c in range(spec.C) if c != dataset.y[i]]))
        donor_index = int(rng.integers(0, 2 ** 31))
        donor = Sample(background_of(spec, donor_index, donor_cls), donor_cls,
                       np.zeros_like(dataset.labels[i]), dataset.K)
        x[i] = background_swap(dataset.sample(i), donor).x
    return dataset.with_images(x, f"{dataset.name}/background_swap")


def texture_swap(s: Sample, texture_seed, n_classes: int) -> Sample:
    """Repaint every part with another class's texture palette; silhouette and label kept"""
    rng = np.random.default_rng(texture_seed)
    palette = int(rng.choice([c for c in range(n_classes) if c != s.y]))
    fill = paint_parts(s.labels, palette, n_classes, rng)
    x = np.where(s.foreground[None], fill, s.x)
    return Sample(x, s.y, s.labels.copy(), s.K, s.seg_weight)


def texture_swap_dataset(dataset: Dataset, n_classes: int, seed: int) -> Dataset:
    x = dataset.x.copy()
    for i in range(len(dataset)):
        x[i] = texture_swap(dataset.sample(i), [seed, int(dataset.ids[i]), 3], n_classes).x
    return dataset.with_images(x, f"{dataset.name}/texture_swap")


# ---------------------------------------------------------------------------
# Label transforms
# ---------------------------------------------------------------------------

def _part_boxes(labels: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros_like(labels)
    for part in range(1, k + 1):
        rows, cols = np.nonzero(labels == part)
        if rows.size:
            out[rows.min():rows.max() + 1, cols.min():cols.max() + 1] = part
    return out


def transform_labels(dataset: Dataset, mode: str, seed: int, fraction: Optional[float] = None) -> Dataset:
    """part_bbox, object_seg or drop_fraction (keep segmentation labels on a fraction of samples)"""
    if mode == 'part_bbox':
        labels = np.stack([_part_boxes(l, dataset.K) for l in dataset.labels]) if len(dataset) else dataset.labels.copy()
        return replace(dataset, labels=labels)
    if mode == 'object_seg':
        return replace(dataset, labels=(dataset.labels > 0).astype(np.uint8), K=1)
    if mode == 'drop_fraction':
        if fraction is None or not 0.0 <= fraction <= 1.0:
            raise ConfigurationError(f"drop_fraction needs a fraction in [0, 1], got {fraction}")
        n_drop = int(round((1.0 - fraction) * len(dataset)))
        weight = dataset.seg_weight.copy()
        if n_drop:
            dropped = np.random.default_rng([seed, 4]).permutation(len(dataset))[:n_drop]
            weight[dropped] = 0.0
        return replace(dataset, seg_weight=weight)
    raise UsageError(f"unknown label transform {mode!r}")


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

RECORD_DTYPE_NOTE = 'u4 label (LE) | f4 image 3×H×W (LE, row-major) | u1 channel index H×W'


def shard_bytes(dataset: Dataset) -> bytes:
    chunks = []
    for i in range(len(dataset)):
        chunks.append(np.asarray(dataset.y[i], dtype='<u4').tobytes())
        chunks.append(np.ascontiguousarray(dataset.x[i], dtype='<f4').tobytes())
        chunks.append(np.ascontiguousarray(dataset.labels[i], dtype=np.uint8).tobytes())
    return b''.join(chunks)


def _spec_dict(spec: DatasetSpec) -> dict:
    data = asdict(spec)
    if data['grammar'] is not None:
        data['grammar'] = [list(parts) for parts in data['grammar']]
    return data


def manifest(splits: DatasetSplits) -> dict:
    spec = splits.spec
    return {
        'spec': _spec_dict(spec),
        'seed': spec.seed,
        'counts': {split: len(splits[split]) for split in SPLITS},
        'indices': {split: [int(spec.offsets()[split]), int(spec.offsets()[split] + spec.sizes()[split])]
                    for split in SPLITS},
        'label_channels': splits.train.K,
        'record': RECORD_DTYPE_NOTE,
    }


def _write_atomic(path: str, data: bytes):
    tmp = f"{path}.tmp"
    with open(tmp, 'wb') as handle:
        handle.write(data)
    os.replace(tmp, path)


def export_dataset(splits: DatasetSplits, directory: str) -> Dict[str, str]:
    """manifest.json plus one <split>.bin shard per split"""
    os.makedirs(directory, exist_ok=True)
    paths = {}
    for split in SPLITS:
        paths[split] = os.path.join(directory, f"{split}.bin")
        _write_atomic(paths[split], shard_bytes(splits[split]))
    paths['manifest'] = os.path.join(directory, 'manifest.json')
    _write_atomic(paths['manifest'], json.dumps(manifest(splits), indent=2, sort_keys=True).encode('utf-8'))
    logger.info(f"💾 Dataset exported to {directory}")
    return paths


def load_export(directory: str) -> DatasetSplits:
    """Read an export back; images come back at 32-bit precision"""
    with open(os.path.join(directory, 'manifest.json'), encoding='utf-8') as handle:
        meta = json.load(handle)
    spec_data = dict(meta['spec'])
    if spec_data.get('grammar') is not None:
        spec_data['grammar'] = tuple(tuple(parts) for parts in spec_data['grammar'])
    spec = DatasetSpec(**spec_data)
    k = int(meta['label_channels'])
    record = np.dtype([('y', '<u4'), ('x', '<f4', (3, spec.H, spec.W)), ('labels', 'u1', (spec.H, spec.W))])

    datasets = []
    for split in SPLITS:
        with open(os.path.join(directory, f"{split}.bin"), 'rb') as handle:
            raw = handle.read()
        if len(raw) != record.itemsize * meta['counts'][split]:
            raise DataError(f"{split}.bin has {len(raw)} bytes, expected {record.itemsize * meta['counts'][split]}")
        records = np.frombuffer(raw, dtype=record)
        start, stop = meta['indices'][split]
        datasets.append(Dataset(records['x'].astype(np.float64), records['y'].astype(np.int64),
                                records['labels'].copy(), k, np.arange(start, stop), name=split))
    train, val, test = datasets
    # Shards carry transformed labels but not the per-sample weights
    if spec.label_fraction < 1.0:
        train = transform_labels(train, 'drop_fraction', spec.seed, fraction=spec.label_fraction)
    return DatasetSplits(spec, train, val, test)


def verify_export(directory: str) -> bool:
    """Regenerate from the manifest's spec and compare shard bytes"""
    with open(os.path.join(directory, 'manifest.json'), encoding='utf-8') as handle:
        meta = json.load(handle)
    spec_data = dict(meta['spec'])
    if spec_data.get('grammar') is not None:
        spec_data['grammar'] = tuple(tuple(parts) for parts in spec_data['grammar'])
    splits = generate_dataset(DatasetSpec(**spec_data))
    for split in SPLITS:
        with open(os.path.join(directory, f"{split}.bin"), 'rb') as handle:
            if handle.read() != shard_bytes(splits[split]):
                logger.error(f"❌ {split}.bin differs from regenerated data")
                return False
    return True
