import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from conftest import tiny_model_config
from core import diffcore as dc
from core.attacks import (EPSILON_GRID, AttackConfig, PGDAttack, SquareRandomAttack, epsilon_sweep, pgd_attack,
                          run_chunked, square_random_attack)
from core.exceptions import ConfigurationError, UsageError
from core.models import PartModel, init_params

EPS = 8 / 255


@pytest.fixture
def batch(tiny_data):
    test = tiny_data.test
    return test.x[:8], test.y[:8], test.masks(slice(0, 8)), test.ids[:8]


def assert_feasible(x_adv, x, epsilon):
    assert np.all(np.abs(x_adv - x) <= epsilon + 1e-12)
    assert np.all((x_adv >= 0.0) & (x_adv <= 1.0))


class TestAttackConfig:
    @pytest.mark.parametrize('overrides', [
        {'epsilon': -0.1}, {'epsilon': 1.5}, {'iterations': -1}, {'restarts': 0},
        {'objective': 'margin'}, {'attack_c_seg': 2.0}, {'square_queries': -5}, {'step_size': -1.0},
    ])
    def test_rejects_invalid(self, overrides):
        with pytest.raises(ConfigurationError):
            AttackConfig(**overrides)

    def test_step(self):
        assert AttackConfig(epsilon=0.04).step == pytest.approx(0.01)
        assert AttackConfig(epsilon=0.04, step_size=0.003).step == 0.003

    def test_eval_defaults(self):
        config = AttackConfig.for_eval(4 / 255, seed=7)
        assert (config.iterations, config.restarts, config.seed) == (40, 3, 7)
        assert config.step == pytest.approx(0.4 / 255)


class TestPGD:
    def test_zero_radius_is_identity(self, trained_toy, batch):
        x, y, mask, ids = batch
        result = PGDAttack(AttackConfig(epsilon=0.0, iterations=5, restarts=2)).run(trained_toy, x, y, mask, ids)
        assert_array_equal(result.x_adv, x)
        assert_array_equal(result.robust_correct, trained_toy.predict(x) == y)
        assert result.restart_correct.shape == (2, 8)

    def test_no_steps_without_random_start(self, trained_toy, batch):
        x, y, mask, ids = batch
        x_adv = pgd_attack(trained_toy, x, y, mask, AttackConfig(iterations=0, random_init=False), sample_ids=ids)
        assert_array_equal(x_adv, x)

    def test_random_start_only(self, trained_toy, batch):
        x, y, mask, ids = batch
        x_adv = pgd_attack(trained_toy, x, y, mask, AttackConfig(iterations=0), sample_ids=ids)
        assert not np.array_equal(x_adv, x)
        assert_feasible(x_adv, x, EPS)

    @pytest.mark.parametrize('objective', ['cls', 'combined', 'kl'])
    def test_feasible(self, trained_toy, batch, objective):
        x, y, mask, ids = batch
        config = AttackConfig(epsilon=EPS, iterations=3, restarts=2, objective=objective)
        result = PGDAttack(config).run(trained_toy, x, y, mask, ids)
        assert_feasible(result.x_adv, x, EPS)
        assert np.all(np.isfinite(result.objective))

    def test_large_step_stays_feasible(self, trained_toy, batch):
        x, y, mask, ids = batch
        x_adv = pgd_attack(trained_toy, x, y, mask, AttackConfig(epsilon=EPS, step_size=1.0, iterations=2),
                           sample_ids=ids)
        assert_feasible(x_adv, x, EPS)

    def test_deterministic(self, trained_toy, batch):
        x, y, mask, ids = batch
        config = AttackConfig(epsilon=EPS, iterations=2, seed=4)
        assert_array_equal(pgd_attack(trained_toy, x, y, mask, config, ids),
                           pgd_attack(trained_toy, x, y, mask, config, ids))

    def test_noise_follows_sample_ids(self, trained_toy, batch):
        x, y, mask, ids = batch
        config = AttackConfig(epsilon=EPS, iterations=0, seed=4)
        forward = pgd_attack(trained_toy, x, y, mask, config, ids)
        order = np.arange(len(x))[::-1]
        backward = pgd_attack(trained_toy, x[order], y[order], mask[order], config, ids[order])
        assert_array_equal(backward, forward[order])

    def test_increases_classification_loss(self, trained_toy, batch):
        x, y, mask, ids = batch
        x_adv = pgd_attack(trained_toy, x, y, mask, AttackConfig(epsilon=EPS, iterations=5), sample_ids=ids)
        clean = dc.cross_entropy(trained_toy.logits(x), y).item()
        adv = dc.cross_entropy(trained_toy.logits(x_adv), y).item()
        assert adv > clean

    def test_robust_implies_clean(self, trained_toy, batch):
        x, y, mask, ids = batch
        result = PGDAttack(AttackConfig(epsilon=EPS, iterations=2, restarts=2)).run(trained_toy, x, y, mask, ids)
        assert np.all(result.clean_correct[result.robust_correct])

    def test_combined_objective_needs_masks(self, trained_toy, batch):
        x, y, _, _ = batch
        with pytest.raises(UsageError):
            pgd_attack(trained_toy, x, y, None, AttackConfig(iterations=1, objective='combined'))

    def test_combined_objective_needs_segmenter(self, batch):
        x, y, mask, _ = batch
        config = tiny_model_config(arch='baseline')
        model = PartModel(config, init_params(config))
        with pytest.raises(UsageError):
            pgd_attack(model, x, y, mask, AttackConfig(iterations=1, objective='combined'))

    def test_sample_id_count(self, trained_toy, batch):
        x, y, mask, ids = batch
        with pytest.raises(UsageError):
            pgd_attack(trained_toy, x, y, mask, AttackConfig(iterations=1), sample_ids=ids[:3])


class TestSquareRandom:
    def test_side_schedule(self):
        sides = SquareRandomAttack(AttackConfig(square_queries=20)).side_schedule(16)
        assert len(sides) == 20
        assert sides[0] == 8 and sides[-1] == 1
        assert all(a >= b for a, b in zip(sides, sides[1:]))

    def test_no_queries_is_identity(self, trained_toy, batch):
        x, y, _, ids = batch
        assert_array_equal(square_random_attack(trained_toy, x, y, AttackConfig(), ids, queries=0), x)

    def test_feasible_and_monotone(self, trained_toy, batch):
        x, y, _, ids = batch
        result = SquareRandomAttack(AttackConfig(epsilon=EPS), queries=15).run(trained_toy, x, y, sample_ids=ids)
        assert_feasible(result.x_adv, x, EPS)
        clean_loss = dc.cross_entropy(trained_toy.logits(x), y, reduction='none').data
        assert np.all(result.objective >= clean_loss)
        final_loss = dc.cross_entropy(trained_toy.logits(result.x_adv), y, reduction='none').data
        assert_allclose(result.objective, final_loss, atol=1e-12)

    def test_accepts_improving_candidates(self, trained_toy, batch):
        x, y, _, ids = batch
        result = SquareRandomAttack(AttackConfig(epsilon=EPS), queries=20).run(trained_toy, x, y, sample_ids=ids)
        clean_loss = dc.cross_entropy(trained_toy.logits(x), y, reduction='none').data
        assert np.any(result.objective > clean_loss)
        assert np.any(result.x_adv != x)
        assert result.objective.flags.writeable

    def test_deterministic(self, trained_toy, batch):
        x, y, _, ids = batch
        config = AttackConfig(epsilon=EPS, seed=9)
        assert_array_equal(square_random_attack(trained_toy, x, y, config, ids, queries=5),
                           square_random_attack(trained_toy, x, y, config, ids, queries=5))


class TestSweepAndChunks:
    def test_epsilon_sweep(self, trained_toy, batch):
        x, y, mask, ids = batch
        rows = epsilon_sweep(trained_toy, x, y, mask, AttackConfig(iterations=2), EPSILON_GRID[:3], ids)
        assert [r['epsilon'] for r in rows] == list(EPSILON_GRID[:3])
        assert rows[0]['adv_acc'] == pytest.approx(np.mean(trained_toy.predict(x) == y))
        assert all(0.0 <= r['adv_acc'] <= rows[0]['adv_acc'] for r in rows)

    def test_workers_do_not_change_results(self, trained_toy, batch):
        x, y, mask, ids = batch
        attack = PGDAttack(AttackConfig(epsilon=EPS, iterations=2, restarts=2))
        serial = run_chunked(attack, trained_toy, x, y, mask, ids, chunk=3, workers=1)
        threaded = run_chunked(attack, trained_toy, x, y, mask, ids, chunk=3, workers=3)
        assert_array_equal(serial.x_adv, threaded.x_adv)
        assert_array_equal(serial.restart_correct, threaded.restart_correct)
        assert serial.restart_correct.shape == (2, 8)

    def test_chunking_matches_whole_batch(self, trained_toy, batch):
        x, y, mask, ids = batch
        attack = PGDAttack(AttackConfig(epsilon=EPS, iterations=0))
        whole = attack.run(trained_toy, x, y, mask, ids)
        chunked = run_chunked(attack, trained_toy, x, y, mask, ids, chunk=3)
        assert_array_equal(chunked.x_adv, whole.x_adv)
        assert_array_equal(chunked.clean_correct, whole.clean_correct)

    def test_empty_input(self, trained_toy):
        result = run_chunked(PGDAttack(AttackConfig()), trained_toy, np.zeros((0, 3, 16, 16)), np.zeros(0))
        assert result.x_adv.shape == (0, 3, 16, 16)
        assert result.robust_correct.shape == (0,)

    def test_square_through_chunks(self, trained_toy, batch):
        x, y, _, ids = batch
        attack = SquareRandomAttack(AttackConfig(epsilon=EPS), queries=3)
        chunked = run_chunked(attack, trained_toy, x, y, None, ids, chunk=5)
        assert_array_equal(chunked.x_adv, attack.run(trained_toy, x, y, sample_ids=ids).x_adv)
