"""Directional reproductions on a reduced synthetic task; run with --runslow."""

from dataclasses import replace

import numpy as np
import pytest

from core.attacks import AttackConfig, EVAL_CHUNK
from core.datagen import DatasetSpec, DatasetSplits, export_dataset, generate_dataset, transform_labels, verify_export
from core.evalreport import EvalConfig, attack_cseg_table, benchmark_eval, benchmark_summary, evaluate, obfuscation_check
from core.losses import LossConfig
from core.models import ModelConfig, PartModel
from core.schema import canonical_json
from core.trainer import SweepConfig, TrainConfig, sweep, train

pytestmark = pytest.mark.slow

SPEC = DatasetSpec(C=4, H=16, W=16, n_train=512, n_val=128, n_test=256, seed=21)
TRAIN_ATTACK = AttackConfig(epsilon=8 / 255, step_fraction=0.25, iterations=5)
EVAL_ATTACK = AttackConfig.for_eval(8 / 255, iterations=10, restarts=1, square_queries=50)
SEEDS = (0, 1, 2)
BETAS = (0.05, 0.25, 0.5, 1.0, 2.0)


def trend_config(loss=None, seed=0, **model_overrides):
    model = dict(K=6, C=4, H=16, W=16, width=8, pool=4, seed=seed)
    model.update(model_overrides)
    return TrainConfig(model=ModelConfig(**model), loss=loss or LossConfig(kind='pgd_adv', c_seg=0.5),
                       attack=TRAIN_ATTACK, eval_attack=TRAIN_ATTACK, lr0=0.05, batch_size=32,
                       pretrain_epochs=3, train_epochs=6, seed=seed)


def mean_of(values):
    return float(np.mean(values))


@pytest.fixture(scope='module')
def data():
    return generate_dataset(SPEC)


@pytest.fixture(scope='module')
def robust_part_model(data):
    return train(trend_config(), data).best.model()


@pytest.fixture(scope='module')
def scored(data):
    """Train once per (config, data) and cache test-set metrics"""
    cache = {}

    def score(config, splits=None):
        splits = splits or data
        key = (canonical_json(config), splits.train.fingerprint(), splits.train.seg_weight.tobytes())
        if key not in cache:
            model = train(config, splits).best.model()
            cache[key] = evaluate(model, splits.test, EvalConfig(attack=EVAL_ATTACK, benchmarks=False))[0]
        return cache[key]

    return score


def test_segmentation_term_weakens_the_attack(robust_part_model, data):
    table = attack_cseg_table(robust_part_model, data.test, EVAL_ATTACK, [0.0, 0.5, 0.9])
    acc = table['adv_acc'].to_numpy()
    assert np.all(np.diff(acc) >= -0.01)


def test_no_gradient_obfuscation(robust_part_model, data):
    grid = tuple(e / 255 for e in (0, 2, 4, 8, 16))
    curve, comparison = obfuscation_check(robust_part_model, data.test, EVAL_ATTACK, grid)
    acc = curve['adv_acc'].to_numpy()
    assert np.all(np.diff(acc) <= 0.02)
    assert comparison['square_acc'] >= comparison['pgd_acc'] - 0.01


def test_zero_radius_matches_clean(robust_part_model, data):
    config = EvalConfig(attack=AttackConfig.for_eval(0.0, iterations=2, restarts=1), benchmarks=False)
    metrics, _ = evaluate(robust_part_model, data.test.subset(np.arange(EVAL_CHUNK)), config)
    assert metrics.adv_acc == metrics.clean_acc


def test_pool_size_insensitivity(data):
    clean, adv = [], []
    for pool in (1, 2, 4, 8):
        metrics = train(trend_config(pool=pool), data).best.metrics
        clean.append(metrics['val_clean_acc'])
        adv.append(metrics['val_adv_acc'])
    assert max(clean) - min(clean) <= 0.03
    assert max(adv) - min(adv) <= 0.03


@pytest.mark.parametrize('head', ['downsampled', 'bbox'])
def test_part_models_gain_clean_accuracy_at_matched_robustness(scored, head):
    baseline = [scored(trend_config(seed=s, arch='baseline')) for s in SEEDS]
    base_clean, base_adv = mean_of([m.clean_acc for m in baseline]), mean_of([m.adv_acc for m in baseline])
    matched = []
    for c_seg in (0.3, 0.5, 0.7):
        runs = [scored(trend_config(LossConfig(kind='pgd_adv', c_seg=c_seg), seed=s, head=head)) for s in SEEDS]
        clean, adv = mean_of([m.clean_acc for m in runs]), mean_of([m.adv_acc for m in runs])
        if abs(adv - base_adv) <= 0.02:
            matched.append(clean)
    assert matched, f"no c_seg matched the baseline's adversarial accuracy {base_adv:.3f}"
    assert max(matched) >= base_clean + 0.03


def test_segmentation_labels_carry_most_of_the_gain(scored):
    def clean(**overrides):
        return mean_of([scored(trend_config(seed=s, **overrides)).clean_acc for s in SEEDS])

    baseline = clean(arch='baseline')
    unsupervised = mean_of([scored(trend_config(LossConfig(kind='pgd_adv', c_seg=0.0), seed=s)).clean_acc
                            for s in SEEDS])
    supervised = clean()
    assert baseline < unsupervised < supervised


def test_trades_frontiers(data):
    sweep_config = SweepConfig(lr0=(0.05,), weight_decay=(5e-4,), beta=BETAS)
    frontiers = {}
    for arch in ('baseline', 'part'):
        rows = sweep(trend_config(LossConfig(kind='trades'), arch=arch), sweep_config, data)
        assert [r['status'] for r in rows] == ['ok'] * len(BETAS)
        assert {r['c_seg'] for r in rows} == {0.5}
        frontiers[arch] = rows

    for row in frontiers['baseline']:
        assert any(p['clean_acc'] >= row['clean_acc'] - 0.01 and p['adv_acc'] >= row['adv_acc'] - 0.01
                   for p in frontiers['part'])

    for rows in frontiers.values():
        clean = np.array([r['clean_acc'] for r in rows])
        adv = np.array([r['adv_acc'] for r in rows])
        assert np.all(np.diff(clean) <= 0.02)
        assert np.all(np.diff(adv) >= -0.02)
        assert clean[int(np.argmax(adv))] <= clean.min() + 0.02


def test_label_variants(scored, data):
    def clean(config, splits=None):
        return mean_of([scored(replace(config, seed=s, model=replace(config.model, seed=s)), splits).clean_acc
                        for s in SEEDS])

    fractions = []
    for fraction in (0.1, 0.5, 1.0):
        train_split = transform_labels(data.train, 'drop_fraction', SPEC.seed, fraction=fraction)
        fractions.append(clean(trend_config(), DatasetSplits(SPEC, train_split, data.val, data.test)))
    assert np.all(np.diff(fractions) >= -0.01)

    baseline = clean(trend_config(arch='baseline'))
    supervised = fractions[-1]
    for mode, k in (('part_bbox', SPEC.K), ('object_seg', 1)):
        splits = DatasetSplits(SPEC, *(transform_labels(data[split], mode, SPEC.seed)
                                       for split in ('train', 'val', 'test')))
        accuracy = clean(trend_config(K=k), splits)
        assert baseline + 0.02 <= accuracy <= supervised, mode


def test_part_models_resist_distribution_shift(data):
    config = EvalConfig(severities=(1, 3, 5))

    def benchmarks(arch):
        summaries = []
        for seed in SEEDS:
            model = train(trend_config(LossConfig(kind='normal', c_seg=0.5), seed=seed, arch=arch), data).best.model()
            summaries.append(benchmark_summary(benchmark_eval(model, data.test, SPEC, config)))
        return {key: mean_of([s[key] for s in summaries])
                for key in ('corruption_mean', 'background_swap', 'shape_bias')}

    baseline, part = benchmarks('baseline'), benchmarks('part')
    for key, value in baseline.items():
        assert part[key] >= value + 0.02, key


def test_large_generation_invariants(tmp_path):
    spec = DatasetSpec(H=16, W=16, n_train=10_000, n_val=0, n_test=0, seed=8)
    splits = generate_dataset(spec)
    train_split = splits.train
    assert len(train_split) == 10_000
    assert np.all(train_split.masks().sum(axis=1) == 1)
    assert train_split.x.min() >= 0.0 and train_split.x.max() <= 1.0
    counts = np.bincount(train_split.y, minlength=spec.C)
    assert counts.max() - counts.min() <= 1
    export_dataset(splits, str(tmp_path / 'export'))
    assert verify_export(str(tmp_path / 'export'))


def test_separable_toy_is_fit_exactly():
    spec = DatasetSpec(C=2, H=16, W=16, n_train=64, n_val=16, n_test=0, seed=2,
                       background='solid', background_correlation=1.0)
    splits = generate_dataset(spec)
    config = replace(trend_config(LossConfig(kind='normal', c_seg=0.5), C=2), pretrain_epochs=20, train_epochs=0,
                     select_on='clean')
    params = train(config, splits).final
    predictions = PartModel(config.model, params).predict(splits.train.x)
    assert np.mean(predictions == splits.train.y) == 1.0
