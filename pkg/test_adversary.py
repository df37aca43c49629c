"""
Tests for honest local training and the attack families
"""

import numpy as np
import pytest
from scipy.stats import norm

from adversary import (AttackSpec, ClientPopulation, ClientReport, RoundContext, attack_global_param,
                       attack_inverse_gradient, attack_lie, client_update, lie_z, poison_backdoor,
                       poison_flip_labels, schedule_double_attack)
from conftest import build_federation
from models import Batch, ModelArch, gradient, loss
from utils import ConfigError, DomainError


@pytest.fixture
def shard(rng):
    return Batch(rng.normal(size=(6, 4)), np.array([0, 1, 2, 1, 0, 2]))


class TestClientUpdate:
    def test_zero_local_epochs(self, rng, small_arch, shard):
        theta = rng.normal(size=small_arch.param_count())
        report = client_update(RoundContext(0, theta, 0.1, 0, 2, seed=3), shard, small_arch)
        np.testing.assert_array_equal(report.gradient, np.zeros_like(theta))
        assert report.loss == loss(theta, small_arch, shard)

    def test_full_batch_single_epoch_is_the_gradient(self, rng, small_arch, shard):
        theta = rng.normal(size=small_arch.param_count())
        report = client_update(RoundContext(0, theta, 0.05, 1, 6, seed=0), shard, small_arch)
        np.testing.assert_allclose(report.gradient, gradient(theta, small_arch, shard), atol=1e-14)
        psi = theta - 0.05 * gradient(theta, small_arch, shard)
        assert report.loss == pytest.approx(loss(psi, small_arch, shard), abs=1e-14)

    def test_minibatch_trace(self, rng, small_arch, shard):
        theta = rng.normal(size=small_arch.param_count())
        alpha, seed = 0.1, 42
        report = client_update(RoundContext(0, theta, alpha, 3, 2, seed), shard, small_arch)

        order_rng = np.random.default_rng(seed)
        psi = theta.copy()
        for _ in range(3):
            order = order_rng.permutation(6)
            for start in range(0, 6, 2):
                idx = order[start:start + 2]
                psi = psi - alpha * gradient(psi, small_arch, Batch(shard.features[idx], shard.labels[idx]))
        np.testing.assert_allclose(report.gradient, (theta - psi) / alpha, atol=1e-10)
        assert report.loss == pytest.approx(loss(psi, small_arch, shard), abs=1e-12)

    def test_input_parameters_untouched(self, rng, small_arch, shard):
        theta = rng.normal(size=small_arch.param_count())
        before = theta.copy()
        client_update(RoundContext(0, theta, 0.1, 2, 2, seed=1), shard, small_arch)
        np.testing.assert_array_equal(theta, before)

    def test_empty_shard(self, small_arch):
        empty = Batch(np.zeros((0, 4)), np.zeros(0, dtype=np.int64))
        with pytest.raises(DomainError):
            client_update(RoundContext(0, np.zeros(small_arch.param_count()), 0.1, 1, 2, 0), empty, small_arch)

    def test_bad_context(self):
        with pytest.raises(DomainError):
            RoundContext(0, np.zeros(3), 0.0, 1, 2, 0)
        with pytest.raises(DomainError):
            RoundContext(0, np.zeros(3), 0.1, 1, 0, 0)


class TestDataPoisoning:
    def test_flip_labels(self, shard):
        flipped = poison_flip_labels(shard, 3)
        assert flipped.labels.tolist() == [2, 1, 0, 1, 2, 0]
        np.testing.assert_array_equal(flipped.features, shard.features)

    def test_flip_labels_ten_classes(self):
        batch = Batch(np.zeros((3, 1)), np.array([3, 0, 9]))
        flipped = poison_flip_labels(batch, 10)
        assert flipped.labels.tolist() == [6, 9, 0]
        assert poison_flip_labels(flipped, 10).labels.tolist() == [3, 0, 9]

    def test_backdoor_centre_of_28(self, rng):
        images = rng.uniform(0.1, 1.0, size=(2, 784))
        grid = poison_backdoor(Batch(images, np.zeros(2, dtype=np.int64)), 28, 10, seed=0).features.reshape(2, 28, 28)
        assert np.all(grid[:, 10:18, 10:18] == 0)
        outside = np.ones((28, 28), dtype=bool)
        outside[10:18, 10:18] = False
        np.testing.assert_array_equal(grid[:, outside], images.reshape(2, 28, 28)[:, outside])

    def test_backdoor_on_black_images(self):
        black = Batch(np.zeros((4, 784)), np.full(4, 3, dtype=np.int64))
        np.testing.assert_array_equal(poison_backdoor(black, 28, 10, seed=1).features, black.features)

    def test_backdoor_patch(self, rng):
        images = rng.uniform(0.1, 1.0, size=(6, 100))
        poisoned = poison_backdoor(Batch(images, np.zeros(6, dtype=np.int64)), 10, 4, seed=5)
        grid = poisoned.features.reshape(6, 10, 10)
        original = images.reshape(6, 10, 10)
        assert np.all(grid[:, 1:9, 1:9] == 0)
        np.testing.assert_array_equal(grid[:, 0, :], original[:, 0, :])
        np.testing.assert_array_equal(grid[:, :, 9], original[:, :, 9])
        assert np.all((poisoned.labels >= 0) & (poisoned.labels < 4))

    def test_backdoor_is_seeded(self, rng):
        batch = Batch(rng.uniform(size=(50, 64)), np.zeros(50, dtype=np.int64))
        first = poison_backdoor(batch, 8, 10, seed=2)
        second = poison_backdoor(batch, 8, 10, seed=2)
        np.testing.assert_array_equal(first.labels, second.labels)
        assert len(set(first.labels.tolist())) > 1

    def test_backdoor_needs_images(self, rng):
        with pytest.raises(DomainError):
            poison_backdoor(Batch(rng.uniform(size=(2, 50)), np.zeros(2, dtype=np.int64)), 7, 10, seed=0)
        with pytest.raises(DomainError):
            poison_backdoor(Batch(rng.uniform(size=(2, 36)), np.zeros(2, dtype=np.int64)), 6, 10, seed=0)


class TestModelPoisoning:
    def test_inverse_gradient(self):
        report = attack_inverse_gradient(ClientReport(np.array([1.0, -2.0]), 0.7))
        np.testing.assert_array_equal(report.gradient, [-1.0, 2.0])
        assert report.loss == 0.7
        twice = attack_inverse_gradient(report)
        np.testing.assert_array_equal(twice.gradient, [1.0, -2.0])

    def test_global_param_is_seeded(self, rng):
        theta = rng.normal(size=50)
        np.testing.assert_array_equal(attack_global_param(theta, -5.0, 1.5, seed=3),
                                      attack_global_param(theta, -5.0, 1.5, seed=3))

    def test_global_param_vanishing_noise(self, rng):
        theta = rng.normal(size=50)
        np.testing.assert_allclose(attack_global_param(theta, 0.0, 1e-20, seed=0), theta, atol=1e-8)

    def test_global_param_moments(self):
        theta = np.random.default_rng(0).normal(2.0, 3.0, size=1_000_000)
        noise = attack_global_param(theta, -5.0, 1.5, seed=1) - theta
        assert noise.mean() == pytest.approx(-5.0 * theta.mean(), abs=0.02)
        assert noise.var() == pytest.approx(1.5 * theta.var(), rel=0.01)

    def test_global_param_keeps_dtype(self):
        theta = np.linspace(-1, 1, 10, dtype=np.float32)
        assert attack_global_param(theta, -5.0, 1.5, seed=0).dtype == np.float32

    def test_global_param_bad_variance(self):
        with pytest.raises(DomainError):
            attack_global_param(np.ones(3), 1.0, 0.0, seed=0)


class TestLittleIsEnough:
    def test_fallback_z(self):
        assert lie_z(10, 4) == 0.1

    def test_quantile_z(self):
        assert lie_z(10, 1) == pytest.approx(norm.ppf(1.0 / 3.0))

    def test_no_honest_clients(self):
        with pytest.raises(ConfigError):
            lie_z(4, 4)

    def test_identical_reports(self):
        reports = [ClientReport(np.array([1.0, 2.0, 3.0]), 0.5) for _ in range(5)]
        forged = attack_lie(reports, {0, 1}, 5, 2)
        for r in forged:
            np.testing.assert_allclose(r.gradient, [1.0, 2.0, 3.0])

    def test_zero_z_is_the_mean(self, rng):
        reports = [ClientReport(rng.normal(size=4), float(i)) for i in range(6)]
        forged = attack_lie(reports, {4, 5}, 6, 2, z=0.0)
        mean = np.mean([r.gradient for r in reports], axis=0)
        np.testing.assert_allclose(forged[4].gradient, mean)
        np.testing.assert_allclose(forged[5].gradient, mean)
        assert forged[4].loss == pytest.approx(2.5)
        np.testing.assert_array_equal(forged[0].gradient, reports[0].gradient)
        assert forged[0].loss == 0.0

    def test_shift_is_z_sigma(self, rng):
        reports = [ClientReport(rng.normal(size=4), 0.0) for _ in range(6)]
        stacked = np.stack([r.gradient for r in reports])
        forged = attack_lie(reports, {0}, 6, 1, z=1.5)
        np.testing.assert_allclose(forged[0].gradient, stacked.mean(axis=0) + 1.5 * stacked.std(axis=0))

    def test_degenerate(self):
        reports = [ClientReport(np.zeros(2), 0.0) for _ in range(3)]
        with pytest.raises(ConfigError):
            attack_lie(reports, {0, 1, 2}, 3, 3)
        with pytest.raises(DomainError):
            attack_lie(reports, {0}, 4, 1)


class TestDoubleAttack:
    def test_schedule(self):
        malicious = {1, 3, 5, 7}
        assert set(schedule_double_attack(1, malicious, seed=0).values()) == {'none'}
        middle = list(schedule_double_attack(3, malicious, seed=0).values())
        assert sorted(middle) == ['inverse_gradient', 'inverse_gradient', 'none', 'none']
        late = list(schedule_double_attack(5, malicious, seed=0).values())
        assert sorted(late) == ['global_param', 'global_param', 'inverse_gradient', 'inverse_gradient']

    def test_halves_are_stable_across_rounds(self):
        malicious = {0, 2, 4}
        early = schedule_double_attack(3, malicious, seed=7)
        late = schedule_double_attack(9, malicious, seed=7)
        inverters = {c for c, a in early.items() if a == 'inverse_gradient'}
        assert len(inverters) == 2
        assert {c for c, a in late.items() if a == 'inverse_gradient'} == inverters

    def test_custom_rounds(self):
        schedule = schedule_double_attack(1, {0, 1}, seed=0, inverse_round=1, global_round=1)
        assert sorted(schedule.values()) == ['global_param', 'inverse_gradient']


class TestAttackSpec:
    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            AttackSpec(kind='gaussian')

    def test_poisons_data(self):
        assert AttackSpec(kind='flip_labels').poisons_data
        assert not AttackSpec(kind='lie').poisons_data


class TestClientPopulation:
    def test_thread_count_does_not_change_reports(self):
        serial, arch, _, _ = build_federation(threads=1, local_epochs=2, batch_size=3)
        pooled, _, _, _ = build_federation(threads=4, local_epochs=2, batch_size=3)
        theta = np.full(arch.param_count(), 0.1)
        for a, b in zip(serial.collect(theta, 0), pooled.collect(theta, 0)):
            np.testing.assert_array_equal(a.gradient, b.gradient)
            assert a.loss == b.loss

    def test_inverse_attackers_negate_honest_reports(self):
        honest, arch, _, _ = build_federation(local_epochs=2, batch_size=3)
        attacked, _, _, _ = build_federation(local_epochs=2, batch_size=3, malicious={0, 4},
                                             attack='inverse_gradient')
        theta = np.zeros(arch.param_count())
        clean = honest.collect(theta, 3, phase=1)
        dirty = attacked.collect(theta, 3, phase=1)
        for c in range(6):
            sign = -1.0 if c in (0, 4) else 1.0
            np.testing.assert_array_equal(dirty[c].gradient, sign * clean[c].gradient)

    def test_lie_reports_are_identical(self):
        population, arch, _, _ = build_federation(malicious={1, 2}, attack='lie')
        reports = population.collect(np.zeros(arch.param_count()), 0)
        np.testing.assert_array_equal(reports[1].gradient, reports[2].gradient)

    def test_flip_labels_poisons_only_attackers(self):
        clean, _, _, _ = build_federation()
        flipped, _, _, _ = build_federation(malicious={0}, attack='flip_labels')
        np.testing.assert_array_equal(flipped.shards[0].labels, 2 - clean.shards[0].labels)
        np.testing.assert_array_equal(flipped.shards[1].labels, clean.shards[1].labels)

    def test_active_attacks(self):
        population, _, _, _ = build_federation(malicious={3}, attack='global_param')
        assert population.active_attacks(1) == {3: 'global_param'}
        assert build_federation()[0].active_attacks(1) == {}

    def test_collect_counts_calls(self):
        population, arch, _, _ = build_federation()
        for epoch in range(3):
            population.collect(np.zeros(arch.param_count()), epoch)
        assert population.collect_calls == 3

    def test_empty_shard(self, small_arch):
        shards = [Batch(np.ones((2, 4)), np.array([0, 1])), Batch(np.zeros((0, 4)), np.zeros(0, dtype=np.int64))]
        with pytest.raises(ConfigError):
            ClientPopulation(shards, small_arch, AttackSpec(), set(), 0.1, 1, 2, seed=0)

    def test_malicious_out_of_range(self, small_arch):
        shards = [Batch(np.ones((2, 4)), np.array([0, 1]))]
        with pytest.raises(DomainError):
            ClientPopulation(shards, small_arch, AttackSpec(kind='inverse_gradient'), {1}, 0.1, 1, 2, seed=0)


def test_mlp_clients_train(rng):
    arch = ModelArch('mlp', 4, 3, (5,))
    theta = rng.normal(scale=0.1, size=arch.param_count())
    batch = Batch(rng.normal(size=(12, 4)), rng.integers(0, 3, size=12))
    report = client_update(RoundContext(0, theta, 0.1, 5, 4, seed=0), batch, arch)
    assert report.loss < loss(theta, arch, batch)
