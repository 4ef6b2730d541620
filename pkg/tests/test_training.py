import math

import numpy as np
import pytest

from nodeformer import autodiff as ad
from nodeformer.autodiff import ParameterSet, Tape, Tensor
from nodeformer.data import gen_dataset
from nodeformer.model import ModelConfig
from nodeformer.odeint import SolverConfig
from nodeformer.training import (
    Adam,
    EnsembleSummary,
    RunRecord,
    TrainConfig,
    Trainer,
    accuracy_histogram,
    cross_entropy,
    default_lambda_grid,
    run_ensemble,
    summarize_ensemble,
    train_run,
    trimmed_records,
)


def vanilla_cfg(d=4, n=1):
    return ModelConfig(d=d, n_blocks=n, architecture="vanilla")


def node_cfg(d=4, n=1, **kw):
    return ModelConfig(d=d, n_blocks=n, architecture="node", **kw)


def make_record(acc, lr=1e-3, seed=0, valid=True, time_to_best=1.0, reg=0.0):
    return RunRecord(
        best_accuracy=acc, time_to_best=time_to_best, epoch_of_best=1,
        mean_steps_per_block=None, steps_std_per_block=[], final_reg_integral=reg,
        failed_batches=0, total_batches=10, valid=valid, learning_rate=lr, seed=seed,
        lam=0.0, model_config={}, wall_time=1.0,
    )


class TestCrossEntropy:
    def test_matches_manual_nll(self, rng):
        logits = rng.normal(size=(2, 5))
        labels = rng.integers(0, 2, size=5)
        z = logits - logits.max(axis=0, keepdims=True)
        p = np.exp(z) / np.exp(z).sum(axis=0, keepdims=True)
        manual = -np.mean(np.log(p[labels, np.arange(5)]))
        loss = cross_entropy(Tensor(logits), labels)
        assert loss.item() == pytest.approx(manual, rel=1e-12)

    def test_uniform_logits_give_log2(self):
        loss = cross_entropy(Tensor(np.zeros((2, 4))), np.array([0, 1, 0, 1]))
        assert loss.item() == pytest.approx(math.log(2.0))

    def test_gradient_is_softmax_minus_onehot(self, rng):
        logits = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        labels = np.array([1, 0, 1])
        with Tape():
            ad.backward(cross_entropy(logits, labels))
        z = logits.data - logits.data.max(axis=0, keepdims=True)
        p = np.exp(z) / np.exp(z).sum(axis=0, keepdims=True)
        onehot = np.zeros((2, 3))
        onehot[labels, np.arange(3)] = 1.0
        np.testing.assert_allclose(logits.grad, (p - onehot) / 3.0, atol=1e-12)

    def test_label_count_mismatch_rejected(self):
        with pytest.raises(ad.ContractError):
            cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 1]))


class TestAdam:
    def test_minimizes_quadratic(self):
        pset = ParameterSet()
        w = pset.add("w", np.array([[3.0], [-2.0]]))
        opt = Adam(pset, lr=0.1)
        for _ in range(300):
            pset.zero_grad()
            with Tape():
                ad.backward(ad.frobenius_sq(w))
            opt.step()
        assert np.abs(w.data).max() < 1e-3

    def test_zero_lr_freezes_parameters(self, rng):
        pset = ParameterSet()
        w = pset.add("w", rng.normal(size=(2, 2)))
        before = w.data.copy()
        opt = Adam(pset, lr=0.0)
        pset.zero_grad()
        with Tape():
            ad.backward(ad.frobenius_sq(w))
        opt.step()
        np.testing.assert_array_equal(w.data, before)


class TestTrainRun:
    def test_zero_learning_rate_stays_at_chance(self):
        data = gen_dataset(3)
        rec = train_run(vanilla_cfg(d=4, n=1),
                        TrainConfig(learning_rate=0.0, max_epochs=5, seed=0), data)
        assert rec.epoch_of_best == 1  # accuracy never changes after epoch 1
        assert 0.2 <= rec.best_accuracy <= 0.8  # untrained, label-balanced data
        assert rec.valid

    def test_same_seed_reproduces_bitwise(self):
        data = gen_dataset(3)
        mcfg = vanilla_cfg(d=4, n=1)
        tcfg = TrainConfig(learning_rate=3e-3, max_epochs=4, seed=7)
        t1 = Trainer(mcfg, tcfg, data)
        r1 = t1.run()
        t2 = Trainer(mcfg, tcfg, data)
        r2 = t2.run()
        assert t1.loss_trace == t2.loss_trace
        assert r1.best_accuracy == r2.best_accuracy
        assert r1.epoch_of_best == r2.epoch_of_best

    def test_different_seeds_differ(self):
        data = gen_dataset(3)
        mcfg = vanilla_cfg(d=4, n=1)
        t1 = Trainer(mcfg, TrainConfig(learning_rate=3e-3, max_epochs=3, seed=0), data)
        t1.run()
        t2 = Trainer(mcfg, TrainConfig(learning_rate=3e-3, max_epochs=3, seed=1), data)
        t2.run()
        assert t1.loss_trace != t2.loss_trace

    def test_node_run_records_depth_telemetry(self):
        data = gen_dataset(2)
        rec = train_run(node_cfg(d=4, n=2),
                        TrainConfig(learning_rate=3e-3, max_epochs=2, seed=0), data)
        assert rec.mean_steps_per_block is not None and rec.mean_steps_per_block >= 1.0
        assert len(rec.steps_std_per_block) == 2
        assert rec.final_reg_integral >= 0.0

    def test_vanilla_run_has_no_depth_telemetry(self):
        data = gen_dataset(2)
        rec = train_run(vanilla_cfg(), TrainConfig(learning_rate=3e-3, max_epochs=2, seed=0),
                        data)
        assert rec.mean_steps_per_block is None
        assert rec.steps_std_per_block == []
        assert rec.final_reg_integral == 0.0

    def test_solver_budget_failures_mark_run_invalid(self):
        data = gen_dataset(2)
        cfg = node_cfg(d=4, n=1, solver=SolverConfig(max_steps=1))
        rec = train_run(cfg, TrainConfig(learning_rate=1e-3, max_epochs=2, seed=0), data)
        assert rec.failed_batches == rec.total_batches
        assert not rec.valid

    def test_huge_lambda_crushes_dynamics(self):
        data = gen_dataset(2)
        mcfg = node_cfg(d=4, n=1)
        free = train_run(mcfg, TrainConfig(learning_rate=3e-3, max_epochs=40, seed=3), data)
        crushed = train_run(mcfg, TrainConfig(learning_rate=3e-3, max_epochs=40, seed=3,
                                              lam=1e6), data)
        assert crushed.final_reg_integral < 0.1 * max(free.final_reg_integral, 1e-12)
        assert crushed.final_reg_integral < 1e-3
        assert 0.2 <= crushed.best_accuracy <= 0.8


class TestTrimmedMean:
    def test_matches_sort_oracle(self, rng):
        records = [make_record(a) for a in rng.uniform(0.4, 1.0, size=12)]
        kept = trimmed_records(records, 3)
        oracle = sorted(r.best_accuracy for r in records)[3:]
        assert sorted(r.best_accuracy for r in kept) == oracle

    def test_invalid_runs_count_as_zero(self):
        records = [make_record(0.9), make_record(0.95, valid=False), make_record(0.6)]
        kept = trimmed_records(records, 1)
        # the invalid 0.95 run scores 0 and is dropped first
        assert all(r.valid for r in kept)
        assert sorted(r.best_accuracy for r in kept) == [0.6, 0.9]

    def test_drop_k_bounds(self):
        records = [make_record(0.5)] * 3
        with pytest.raises(ValueError):
            trimmed_records(records, 3)


class TestHistogram:
    def test_low_scores_land_in_leftmost_bin(self):
        counts = accuracy_histogram([0.0, 0.3, 0.5, 0.54, 0.55])
        assert counts[0] == 5
        assert sum(counts) == 5

    def test_above_threshold_bins_are_width_005(self):
        counts = accuracy_histogram([0.551, 0.60, 0.61, 0.99, 1.0])
        assert counts[0] == 0
        assert counts[1] == 2   # (0.55, 0.60]
        assert counts[2] == 1   # (0.60, 0.65]
        assert counts[9] == 2   # (0.95, 1.00]

    def test_counts_partition_the_runs(self, rng):
        accs = rng.uniform(0.0, 1.0, size=97)
        assert sum(accuracy_histogram(accs)) == 97

    def test_constant_half_ensemble_all_leftmost(self):
        counts = accuracy_histogram([0.5] * 72)
        assert counts == [72] + [0] * 9


class TestEnsemble:
    def test_average_invariant_under_run_permutation(self, rng):
        records = [make_record(a, time_to_best=t)
                   for a, t in zip(rng.uniform(0.5, 1.0, 10), rng.uniform(1, 9, 10))]
        s1 = summarize_ensemble(records, 2)
        shuffled = list(records)
        rng.shuffle(shuffled)
        s2 = summarize_ensemble(shuffled, 2)
        assert s1.avg_accuracy == pytest.approx(s2.avg_accuracy, rel=1e-15)
        assert s1.avg_time == pytest.approx(s2.avg_time, rel=1e-15)
        assert s1.histogram == s2.histogram

    def test_trim_average_over_expected_count(self):
        records = [make_record(a) for a in (0.5, 0.6, 0.7, 0.8, 0.9, 1.0)]
        s = summarize_ensemble(records, 2)
        assert s.avg_accuracy == pytest.approx(np.mean([0.7, 0.8, 0.9, 1.0]))

    def test_run_grid_seeds_are_distinct_and_sorted(self):
        data = gen_dataset(2)
        s = run_ensemble(vanilla_cfg(), data, [1e-2, 1e-3], 2, drop_k=1, max_epochs=1,
                         seed_base=10)
        assert len(s.runs) == 4
        seeds = [r.seed for r in s.runs]
        assert len(set(seeds)) == 4
        assert [(r.learning_rate, r.seed) for r in s.runs] == sorted(
            (r.learning_rate, r.seed) for r in s.runs
        )

    def test_parallel_equals_sequential(self):
        data = gen_dataset(2)
        kwargs = dict(lam=0.0, drop_k=1, max_epochs=2, seed_base=0)
        s1 = run_ensemble(vanilla_cfg(), data, [3e-3, 1e-3], 2, workers=1, **kwargs)
        s2 = run_ensemble(vanilla_cfg(), data, [3e-3, 1e-3], 2, workers=2, **kwargs)
        assert [r.best_accuracy for r in s1.runs] == [r.best_accuracy for r in s2.runs]
        assert s1.avg_accuracy == s2.avg_accuracy
        assert s1.histogram == s2.histogram

    def test_repeat_invocation_bit_identical(self):
        data = gen_dataset(2)
        kwargs = dict(lam=0.0, drop_k=0, max_epochs=2, seed_base=4)
        s1 = run_ensemble(vanilla_cfg(), data, [1e-3], 3, **kwargs)
        s2 = run_ensemble(vanilla_cfg(), data, [1e-3], 3, **kwargs)
        assert [r.best_accuracy for r in s1.runs] == [r.best_accuracy for r in s2.runs]
        assert s1.avg_accuracy == s2.avg_accuracy


class TestLambdaGrid:
    def test_default_grid_endpoints(self):
        grid = default_lambda_grid()
        assert grid[0] == 4.0
        assert grid[-1] == pytest.approx(4.0 ** -13)
        assert len(grid) == 15
        assert all(a > b for a, b in zip(grid, grid[1:]))

    def test_sweep_zero_lambda_equals_plain_ensemble(self):
        from nodeformer.training import lambda_sweep

        data = gen_dataset(2)
        mcfg = node_cfg(d=4, n=1)
        kwargs = dict(drop_k=0, max_epochs=2, seed_base=0)
        swept = lambda_sweep(mcfg, data, [0.0, 0.25], [3e-3], 2, **kwargs)
        baseline = run_ensemble(mcfg, data, [3e-3], 2, lam=0.0, **kwargs)
        lam0 = dict(swept)[0.0]
        assert [r.best_accuracy for r in lam0.runs] == [
            r.best_accuracy for r in baseline.runs
        ]
        assert lam0.avg_accuracy == baseline.avg_accuracy
        assert dict(swept)[0.25].runs[0].lam == 0.25


class TestLearningSmoke:
    def test_vanilla_learns_above_chance(self):
        data = gen_dataset(3)
        rec = train_run(vanilla_cfg(d=8, n=1),
                        TrainConfig(learning_rate=1e-2, max_epochs=40, seed=0), data)
        assert rec.best_accuracy >= 0.75
