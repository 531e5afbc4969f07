import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slimnas.data import Dataset, DatasetSpec, ingest_dataset
from slimnas.network import SupernetConfig, build_supernet
from slimnas.proxies import ProxyKind
from slimnas.space import tiny_space
from slimnas.training import (
    PriorCache,
    SGD,
    ScheduleKind,
    ScheduleSpec,
    ScheduleError,
    TrainConfig,
    TrainStrategy,
    TrainingError,
    distill_loss,
    distill_loss_grad,
    lambda_at,
    lr_at,
    rank_loss,
    rank_loss_grad,
    softmax,
    softmax_cross_entropy,
    train_step,
    train_supernet,
)


def toy_config(**kw):
    defaults = dict(space=tiny_space(), stem_channels=16)
    defaults.update(kw)
    return SupernetConfig(**defaults)


def tiny_dataset(train=128, val=64, classes=10, seed=0):
    return ingest_dataset(
        DatasetSpec(num_classes=classes, train_count=train, val_count=val, seed=seed,
                    noise=0.3)
    )


class TestLambdaSchedules:
    def test_warmup_paper_values(self):
        sched = ScheduleSpec(kind=ScheduleKind.WARMUP, lambda_max=2.0, warmup_epochs=20)
        assert lambda_at(sched, 0, 70) == 0.0
        assert lambda_at(sched, 10, 70) == 1.0
        assert lambda_at(sched, 20, 70) == 2.0
        assert lambda_at(sched, 45, 70) == 2.0

    def test_constant(self):
        sched = ScheduleSpec(kind=ScheduleKind.CONSTANT, lambda_max=1.5)
        assert all(lambda_at(sched, e, 10) == 1.5 for e in range(10))

    def test_cosine_rises_then_falls(self):
        sched = ScheduleSpec(kind=ScheduleKind.COSINE, lambda_max=2.0)
        values = [lambda_at(sched, e, 40) for e in range(40)]
        assert values[0] == 0.0
        assert values[20] == pytest.approx(2.0)
        assert values[:21] == sorted(values[:21])
        assert values[20:] == sorted(values[20:], reverse=True)

    def test_multistage_boundaries(self):
        sched = ScheduleSpec(
            kind=ScheduleKind.MULTISTAGE, lambda_max=2.0,
            stage_fractions=(0.25, 0.25, 0.25, 0.25),
        )
        total = 40
        assert lambda_at(sched, 0, total) == 0.0
        assert lambda_at(sched, 9, total) == 0.0
        assert lambda_at(sched, 15, total) == pytest.approx(1.0)
        assert lambda_at(sched, 20, total) == 2.0
        assert lambda_at(sched, 29, total) == 2.0
        assert lambda_at(sched, 35, total) == pytest.approx(1.0)
        assert lambda_at(sched, 39, total) == pytest.approx(0.2)

    def test_epoch_domain_errors(self):
        sched = ScheduleSpec()
        with pytest.raises(ScheduleError):
            lambda_at(sched, -1, 30)
        with pytest.raises(ScheduleError):
            lambda_at(sched, 30, 30)

    def test_warmup_longer_than_run_rejected(self):
        with pytest.raises(ScheduleError):
            lambda_at(ScheduleSpec(warmup_epochs=20), 0, 10)

    def test_spec_validation(self):
        with pytest.raises(TrainingError):
            ScheduleSpec(lambda_max=-1.0)
        with pytest.raises(TrainingError):
            ScheduleSpec(stage_fractions=(0.5, 0.5, 0.5, -0.5))
        with pytest.raises(TrainingError):
            ScheduleSpec(stage_fractions=(0.5, 0.5, 0.5, 0.5))

    @given(
        epoch=st.integers(min_value=0, max_value=69),
        lam=st.floats(min_value=0.0, max_value=10.0, allow_nan=False),
    )
    @settings(max_examples=100)
    def test_values_bounded_by_lambda_max(self, epoch, lam):
        for kind in ScheduleKind:
            sched = ScheduleSpec(kind=kind, lambda_max=lam, warmup_epochs=20)
            assert 0.0 <= lambda_at(sched, epoch, 70) <= lam + 1e-12


class TestRankLoss:
    def test_consistent_ordering_is_free(self):
        assert rank_loss(k_a=2.0, k_b=1.0, loss_a=0.5, loss_b=0.9) == 0.0

    def test_inconsistent_ordering_pays_the_gap(self):
        assert rank_loss(k_a=2.0, k_b=1.0, loss_a=0.9, loss_b=0.5) == pytest.approx(0.4)

    def test_roles_swap_with_priors(self):
        assert rank_loss(k_a=1.0, k_b=2.0, loss_a=0.9, loss_b=0.5) == 0.0

    def test_equal_priors_rejected(self):
        with pytest.raises(TrainingError):
            rank_loss(1.0, 1.0, 0.2, 0.3)

    def test_non_finite_rejected(self):
        with pytest.raises(TrainingError):
            rank_loss(float("nan"), 1.0, 0.2, 0.3)

    def test_margin_shifts_the_hinge(self):
        assert rank_loss(2.0, 1.0, 0.5, 0.6, margin=0.3) == pytest.approx(0.2)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(0)
        eps = 1e-6
        for _ in range(200):
            k_a, k_b = rng.uniform(1, 10, 2)
            if k_a == k_b:
                continue
            loss_a, loss_b = rng.uniform(0.1, 3.0, 2)
            if abs(loss_a - loss_b) < 1e-3:  # keep away from the kink
                continue
            _, g_a, g_b = rank_loss_grad(k_a, k_b, loss_a, loss_b)
            num_a = (rank_loss(k_a, k_b, loss_a + eps, loss_b)
                     - rank_loss(k_a, k_b, loss_a - eps, loss_b)) / (2 * eps)
            num_b = (rank_loss(k_a, k_b, loss_a, loss_b + eps)
                     - rank_loss(k_a, k_b, loss_a, loss_b - eps)) / (2 * eps)
            assert abs(g_a - num_a) <= 1e-4 * max(1.0, abs(num_a))
            assert abs(g_b - num_b) <= 1e-4 * max(1.0, abs(num_b))

    def test_convex_piecewise_linear_in_loss_gap(self):
        gaps = np.linspace(-2, 2, 101)
        vals = [rank_loss(2.0, 1.0, 1.0 + g, 1.0) for g in gaps]
        assert vals == sorted(vals)
        # slopes only ever increase (0 then 1)
        slopes = np.diff(vals) / np.diff(gaps)
        assert np.all(np.diff(slopes) >= -1e-12)

    def test_zero_iff_orderings_agree(self):
        rng = np.random.default_rng(1)
        for _ in range(300):
            k_a, k_b = rng.uniform(0, 5, 2)
            la, lb = rng.uniform(0, 2, 2)
            if k_a == k_b or la == lb:
                continue
            agree = (k_a > k_b) == (la < lb)
            assert (rank_loss(k_a, k_b, la, lb) == 0.0) == agree


class TestDistillLoss:
    def test_matching_logits_give_teacher_entropy(self):
        rng = np.random.default_rng(0)
        logits = rng.standard_normal((6, 5))
        p = softmax(logits)
        entropy = float(-(p * np.log(p)).sum(axis=1).mean())
        assert distill_loss(logits, logits) == pytest.approx(entropy, rel=1e-10)

    def test_sharp_teacher_uniform_student_is_log_classes(self):
        teacher = np.full((4, 10), -1e4)
        teacher[:, 3] = 1e4
        student = np.zeros((4, 10))
        assert distill_loss(teacher, student) == pytest.approx(math.log(10), rel=1e-9)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(TrainingError):
            distill_loss(np.zeros((2, 3)), np.zeros((2, 4)))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        teacher = rng.standard_normal((5, 7))
        student = rng.standard_normal((5, 7))
        _, grad = distill_loss_grad(teacher, student)
        eps = 1e-6
        for idx in [(0, 0), (2, 3), (4, 6), (1, 5)]:
            bumped = student.copy()
            bumped[idx] += eps
            hi = distill_loss(teacher, bumped)
            bumped[idx] -= 2 * eps
            lo = distill_loss(teacher, bumped)
            num = (hi - lo) / (2 * eps)
            assert abs(grad[idx] - num) <= 1e-4 * max(1.0, abs(num))

    def test_loss_bounded_below_by_teacher_entropy(self):
        rng = np.random.default_rng(4)
        teacher = rng.standard_normal((4, 6))
        p = softmax(teacher)
        entropy = float(-(p * np.log(p)).sum(axis=1).mean())
        for _ in range(50):
            student = rng.standard_normal((4, 6))
            assert distill_loss(teacher, student) >= entropy - 1e-9


class TestOptimizer:
    def test_momentum_follows_classical_recursion(self):
        p = __import__("slimnas.layers", fromlist=["Parameter"]).Parameter(np.array([1.0]))
        opt = SGD([p], lr=0.1, momentum=0.9)
        p.grad[:] = 2.0
        opt.step()  # v = 2.0, p = 1 - 0.2 = 0.8
        assert p.value[0] == pytest.approx(0.8)
        p.grad[:] = 1.0
        opt.step()  # v = 0.9*2 + 1 = 2.8, p = 0.8 - 0.28 = 0.52
        assert p.value[0] == pytest.approx(0.52)

    def test_weight_decay_adds_l2_pull(self):
        p = __import__("slimnas.layers", fromlist=["Parameter"]).Parameter(np.array([2.0]))
        opt = SGD([p], lr=0.1, momentum=0.0, weight_decay=0.5)
        p.grad[:] = 0.0
        opt.step()
        assert p.value[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)

    def test_lr_schedule_warmup_then_cosine(self):
        cfg = TrainConfig(total_epochs=25, lr=0.1, lr_warmup_epochs=5,
                          schedule=ScheduleSpec(warmup_epochs=5))
        assert lr_at(cfg, 0) == pytest.approx(0.02)
        assert lr_at(cfg, 4) == pytest.approx(0.1)
        assert lr_at(cfg, 5) == pytest.approx(0.1)
        assert lr_at(cfg, 15) == pytest.approx(0.05)
        assert lr_at(cfg, 24) < 0.002


def make_step_fixture(n_subnets, m_pairs, prior=ProxyKind.FLOPS, seed=0, classes=10):
    cfg = toy_config()
    state = build_supernet(cfg, seed)
    state.train()
    tc = TrainConfig(
        total_epochs=4, batch_size=16, lr=0.01, n_subnets=n_subnets, m_pairs=m_pairs,
        prior=prior, schedule=ScheduleSpec(warmup_epochs=2), balanced_candidates=4,
    )
    opt = SGD(state.parameters(), 0.01)
    priors = PriorCache(cfg, prior, zen_seed=0)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((16, 3, 8, 8)).astype(np.float32)
    y = rng.integers(0, classes, 16)
    return state, (x, y), tc, opt, priors, rng


class TestTrainStep:
    def test_n2_m0_is_plain_sandwich(self):
        state, batch, tc, opt, priors, rng = make_step_fixture(2, 0)
        log = train_step(state, batch, tc, 0, rng, opt, priors)
        assert log.middle_distill_losses == ()
        assert log.rank_pairs == ()
        assert log.n_forwards == 2
        assert log.optimizer_steps == 1

    def test_forward_counts_follow_algorithm(self):
        for n, m in [(2, 0), (4, 2), (6, 4)]:
            state, batch, tc, opt, priors, rng = make_step_fixture(n, m,
                                                                   prior=ProxyKind.ZEN_SCORE)
            log = train_step(state, batch, tc, 1, rng, opt, priors)
            assert log.skipped_pairs == 0
            assert log.n_forwards == 2 + (n - 2) + 2 * m
            assert len(log.arch_encodings) == 2 + (n - 2) + 2 * m
            assert log.optimizer_steps == 1

    def test_lambda_logged_matches_schedule(self):
        state, batch, tc, opt, priors, rng = make_step_fixture(4, 1)
        for epoch in range(tc.total_epochs):
            log = train_step(state, batch, tc, epoch, rng, opt, priors)
            assert log.lambda_value == lambda_at(tc.schedule, epoch, tc.total_epochs)

    def test_rank_pair_logs_priors_and_losses(self):
        state, batch, tc, opt, priors, rng = make_step_fixture(2, 3)
        log = train_step(state, batch, tc, 1, rng, opt, priors)
        for pair in log.rank_pairs:
            assert pair.prior_a != pair.prior_b
            assert pair.value >= 0.0
            assert math.isfinite(pair.loss_a) and math.isfinite(pair.loss_b)

    def test_consistent_pair_contributes_zero_gradient(self):
        assert rank_loss_grad(2.0, 1.0, 0.2, 0.9) == (0.0, 0.0, 0.0)

    def test_requires_training_mode(self):
        state, batch, tc, opt, priors, rng = make_step_fixture(2, 0)
        state.eval()
        with pytest.raises(TrainingError):
            train_step(state, batch, tc, 0, rng, opt, priors)

    def test_non_finite_loss_aborts_without_stepping(self):
        state, batch, tc, opt, priors, rng = make_step_fixture(2, 0)
        state.stem_conv.weight.value[0, 0, 0, 0] = np.nan
        before = state.head.weight.value.copy()
        log = train_step(state, batch, tc, 0, rng, opt, priors)
        assert log.aborted and log.optimizer_steps == 0
        np.testing.assert_array_equal(state.head.weight.value, before)
        assert all(g == 0 for g in np.abs(state.head.weight.grad).ravel())

    def test_uniform_strategy_single_forward(self):
        state, batch, tc, opt, priors, rng = make_step_fixture(2, 0)
        tc = dataclasses.replace(tc, strategy=TrainStrategy.UNIFORM)
        log = train_step(state, batch, tc, 0, rng, opt, priors)
        assert log.n_forwards == 1
        assert log.single_path_loss is not None
        assert log.max_loss is None


class TestTrainSupernet:
    def test_same_seed_identical_trajectory(self):
        cfg = toy_config()
        ds = tiny_dataset()
        tc = TrainConfig(total_epochs=2, batch_size=32, lr=0.02, n_subnets=3, m_pairs=1,
                         seed=7, schedule=ScheduleSpec(warmup_epochs=1))
        runs = []
        for _ in range(2):
            state = build_supernet(cfg, 7)
            result = train_supernet(tc, ds, state)
            runs.append([log.max_loss for log in result.step_logs])
        assert runs[0] == runs[1]

    def test_lambda_trace_over_epochs(self, tmp_path):
        cfg = toy_config()
        ds = ingest_dataset(DatasetSpec(num_classes=10, train_count=64, val_count=64))
        tc = TrainConfig(total_epochs=22, batch_size=64, lr=0.01, n_subnets=2, m_pairs=1,
                         schedule=ScheduleSpec(kind=ScheduleKind.WARMUP, lambda_max=2.0,
                                               warmup_epochs=20))
        state = build_supernet(cfg, 0)
        result = train_supernet(tc, ds, state, log_path=tmp_path / "log.jsonl")
        by_epoch = {log.epoch: log.lambda_value for log in result.step_logs}
        assert by_epoch[0] == 0.0
        assert by_epoch[10] == 1.0
        assert by_epoch[20] == 2.0
        assert by_epoch[21] == 2.0
        assert (tmp_path / "log.jsonl").read_text().count("\n") == len(result.step_logs)

    def test_max_path_loss_drops_on_toy_data(self):
        cfg = toy_config()
        ds = ingest_dataset(DatasetSpec(num_classes=10, train_count=512, val_count=64,
                                        noise=0.25))
        tc = TrainConfig(total_epochs=5, batch_size=64, lr=0.05, n_subnets=3, m_pairs=0,
                         seed=1, schedule=ScheduleSpec(warmup_epochs=2))
        state = build_supernet(cfg, 1)
        result = train_supernet(tc, ds, state)
        steps_per_epoch = 512 // 64
        first = np.mean([log.max_loss for log in result.step_logs[:steps_per_epoch]])
        last = np.mean([log.max_loss for log in result.step_logs[-steps_per_epoch:]])
        assert last < 0.8 * first

    def test_prior_cache_reused_across_steps(self):
        cfg = toy_config()
        calls = []
        cache = PriorCache(cfg, ProxyKind.FLOPS)
        original = cache.flops

        def counting(arch):
            calls.append(arch)
            return original(arch)

        cache.flops = counting
        ds = ingest_dataset(DatasetSpec(num_classes=10, train_count=64, val_count=64))
        tc = TrainConfig(total_epochs=2, batch_size=64, lr=0.01, n_subnets=4, m_pairs=0,
                         schedule=ScheduleSpec(warmup_epochs=1), balanced_candidates=4)
        state = build_supernet(cfg, 0)
        train_supernet(tc, ds, state, priors=cache)
        assert len(calls) == 2 * 2 * 4  # epochs * middles * candidates


class TestTrainConfigValidation:
    def test_rejects_single_subnet(self):
        with pytest.raises(TrainingError):
            TrainConfig(total_epochs=1, n_subnets=1)

    def test_rejects_negative_pairs(self):
        with pytest.raises(TrainingError):
            TrainConfig(total_epochs=1, m_pairs=-1)

    def test_paper_defaults(self):
        tc = TrainConfig(total_epochs=70)
        assert tc.momentum == 0.9
        assert tc.weight_decay == 0.0
        assert tc.lr == 0.001
        assert tc.schedule.lambda_max == 2.0
        assert tc.schedule.warmup_epochs == 20
