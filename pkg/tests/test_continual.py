import numpy as np
import pytest

from bayescl.bnn import init_mean_field
from bayescl.config import ExperimentConfig
from bayescl.continual import (
    evaluate,
    finetune_prediction_model,
    linreg_trajectory,
    load_snapshots,
    mse_grid,
    prepare_posterior,
    run_continual,
    save_snapshots,
    train_task,
    variance_heatmap,
)
from bayescl.core_math import make_rng
from bayescl.tasks import TaskData, TaskSplit, permuted_tasks, split_tasks


def toy_stream(n_tasks=2, n=300, d=12, n_classes=3, seed=0, split=False):
    rng = make_rng(seed, "toy")
    # blob per class so the tasks are actually learnable
    centers = rng.uniform(0.2, 0.8, size=(n_classes, d))

    def draw(count):
        y = rng.integers(0, n_classes, size=count)
        x = np.clip(centers[y] + 0.08 * rng.standard_normal((count, d)), 0, 1)
        return TaskData(x, y)

    base = TaskSplit(train=draw(n), test=draw(n // 3))
    if split:
        return split_tasks(base, [(0, 1), (1, 2)][:n_tasks])
    return permuted_tasks(base, n_tasks, seed=seed)


def toy_config(**kw):
    defaults = dict(experiment="permuted", n_tasks=2, hidden=[16],
                    head_width=3, epochs=3, batch_size=64, train_mc=2,
                    eval_samples=8, lr=5e-3, seeds=[0])
    defaults.update(kw)
    return ExperimentConfig(**defaults)


class TestPreparePosterior:
    def test_first_task_unit_prior(self):
        task = toy_stream()[0]
        cfg = toy_config()
        q, prior = prepare_posterior(None, task, cfg, seed=0, task_index=0)
        assert q.trunk_widths == (12, 16)
        for k in prior.keys():
            np.testing.assert_array_equal(prior.mu[k], 0.0)
            np.testing.assert_array_equal(prior.v[k], 0.0)

    def test_warm_start_anchors_to_previous(self):
        task = toy_stream()[0]
        cfg = toy_config()
        q0, _ = prepare_posterior(None, task, cfg, seed=0, task_index=0)
        q1, prior = prepare_posterior(q0, task, cfg, seed=0, task_index=1)
        for k in q0.keys():
            np.testing.assert_array_equal(q1.mu[k], q0.mu[k])
            np.testing.assert_array_equal(prior.mu[k], q0.mu[k])
        q1.mu["trunk0.w"][...] = 5.0
        assert not np.any(q0.mu["trunk0.w"] == 5.0)

    def test_new_head_gets_unit_prior(self):
        cfg = toy_config(head_width=2)
        s = toy_stream(split=True, n_classes=3)
        q0, _ = prepare_posterior(None, s[0], cfg, seed=0, task_index=0)
        q1, prior = prepare_posterior(q0, s[1], cfg, seed=0, task_index=1)
        assert q1.n_heads == 2
        np.testing.assert_array_equal(prior.mu["head1.w"], 0.0)
        np.testing.assert_array_equal(prior.v["head1.w"], 0.0)
        assert np.any(q1.mu["head1.w"] != 0.0)


class TestTrainTask:
    def test_loss_decreases(self):
        task = toy_stream()[0]
        cfg = toy_config(epochs=6)
        _, losses = train_task(None, task, [], "none", cfg)
        assert losses[-1] < losses[0]

    def test_regret_equals_none_with_empty_coresets(self):
        # identical loss trace and identical posterior, bit for bit
        task = toy_stream()[0]
        cfg = toy_config()
        q_a, loss_a = train_task(None, task, [], "none", cfg, seed=3)
        q_b, loss_b = train_task(None, task, [], "regret", cfg, seed=3)
        assert loss_a == loss_b
        for k in q_a.keys():
            np.testing.assert_array_equal(q_a.mu[k], q_b.mu[k])
            np.testing.assert_array_equal(q_a.v[k], q_b.v[k])

    def test_regret_changes_training_with_coresets(self):
        stream = toy_stream()
        cfg = toy_config()
        core = stream[0].train.subset(np.arange(20))
        _, loss_none = train_task(None, stream[1], [(core, 0)], "none", cfg, seed=1)
        _, loss_regret = train_task(None, stream[1], [(core, 0)], "regret", cfg, seed=1)
        assert loss_none != loss_regret

    def test_frozen_head_bitwise_untouched(self):
        cfg = toy_config(head_width=2)
        s = toy_stream(split=True, n_classes=3)
        q0, _ = train_task(None, s[0], [], "none", cfg, seed=0, task_index=0)
        q1, _ = train_task(q0, s[1], [], "none", cfg, seed=0, task_index=1)
        for k in q0.head_keys(0):
            np.testing.assert_array_equal(q1.mu[k], q0.mu[k])
            np.testing.assert_array_equal(q1.v[k], q0.v[k])
        assert np.any(q1.mu["trunk0.w"] != q0.mu["trunk0.w"])

    def test_deterministic_given_seed(self):
        task = toy_stream()[0]
        cfg = toy_config()
        q_a, loss_a = train_task(None, task, [], "none", cfg, seed=7)
        q_b, loss_b = train_task(None, task, [], "none", cfg, seed=7)
        assert loss_a == loss_b
        for k in q_a.keys():
            np.testing.assert_array_equal(q_a.mu[k], q_b.mu[k])

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            train_task(None, toy_stream()[0], [], "replay", toy_config())


class TestFinetune:
    def test_live_posterior_untouched(self):
        task = toy_stream()[0]
        cfg = toy_config()
        q, _ = train_task(None, task, [], "none", cfg)
        mu_before = {k: a.copy() for k, a in q.mu.items()}
        core = task.train.subset(np.arange(30))
        finetune_prediction_model(q, [(core, 0)], cfg)
        for k in q.keys():
            np.testing.assert_array_equal(q.mu[k], mu_before[k])

    def test_empty_coresets_returns_live_model(self):
        task = toy_stream()[0]
        cfg = toy_config()
        q, _ = train_task(None, task, [], "none", cfg)
        assert finetune_prediction_model(q, [], cfg) is q

    def test_improves_coreset_fit(self):
        from bayescl.bnn import categorical_loglik, forward, make_noise
        task = toy_stream()[0]
        cfg = toy_config(finetune_epochs=8)
        q, _ = train_task(None, task, [], "none", cfg)
        core = task.train.subset(np.arange(40))
        tuned = finetune_prediction_model(q, [(core, 0)], cfg)
        zero = {k: np.zeros_like(a) for k, a in
                make_noise(q, make_rng(0)).items()}
        before = categorical_loglik(forward(q, core.x, zero), core.y)
        after = categorical_loglik(forward(tuned, core.x, zero), core.y)
        assert after > before


class TestEvaluate:
    def test_accuracy_hand_check(self):
        # deterministic net (sigma ~ 0) that routes class = argmax of input
        q = init_mean_field((3,), 3, 1, 1e-9, make_rng(0))
        q.mu["head0.w"][...] = 10.0 * np.eye(3)
        q.mu["head0.b"][...] = 0.0
        x = np.eye(3)
        good = TaskSplit(train=TaskData(x, np.array([0, 1, 2])),
                         test=TaskData(x, np.array([0, 1, 2])))
        bad = TaskSplit(train=good.train,
                        test=TaskData(x, np.array([1, 2, 0])))
        accs = evaluate(q, [good, bad], 4, make_rng(1))
        np.testing.assert_allclose(accs, [1.0, 0.0])

    def test_gaussian_reports_mse(self):
        q = init_mean_field((1,), 1, 1, 1e-9, make_rng(0), likelihood="gaussian")
        q.mu["head0.w"][...] = 0.0
        q.mu["head0.b"][...] = 0.0
        x = np.ones((4, 1))
        t = TaskSplit(train=TaskData(x, 2.0 * np.ones((4, 1))),
                      test=TaskData(x, 2.0 * np.ones((4, 1))))
        mse = evaluate(q, [t], 4, make_rng(1))
        np.testing.assert_allclose(mse, [4.0], atol=1e-6)


class TestRunContinual:
    def test_metric_rows_complete(self):
        stream = toy_stream(n_tasks=3)
        cfg = toy_config(n_tasks=3)
        res = run_continual(stream, cfg)
        keys = {(tr, ev) for (_, tr, ev, _) in res.metrics}
        assert keys == {(tr, ev) for tr in range(3) for ev in range(tr + 1)}
        assert len(res.losses) == 3 * cfg.epochs

    def test_rerun_bitwise_identical(self):
        stream = toy_stream()
        cfg = toy_config(coreset="random", coreset_size=20, coreset_mode="finetune")
        r1 = run_continual(stream, cfg)
        r2 = run_continual(stream, cfg)
        assert r1.metrics == r2.metrics
        assert r1.losses == r2.losses

    def test_learns_toy_blobs(self):
        stream = toy_stream(n_tasks=2)
        cfg = toy_config(epochs=6)
        res = run_continual(stream, cfg)
        assert res.accuracy(0, 0, 0) > 0.9
        assert res.avg_final_accuracy(0) > 0.8

    def test_stein_regret_pipeline_runs(self):
        stream = toy_stream(n_tasks=2)
        cfg = toy_config(coreset="stein", coreset_size=15, coreset_mode="regret",
                         stein_steps=4, stein_mc=1)
        res = run_continual(stream, cfg)
        assert res.avg_final_accuracy(0) > 0.5

    def test_subsample_respected(self):
        stream = toy_stream(n_tasks=1, n=300)
        cfg = toy_config(n_tasks=1, subsample=100, epochs=1, batch_size=1000)
        res = run_continual(stream, cfg)
        # one epoch, one batch of exactly the subsample
        assert len(res.losses) == 1

    def test_snapshots_track_first_tasks_keys(self):
        stream = toy_stream(n_tasks=2, split=True, n_classes=3)
        cfg = toy_config(experiment="split", head_width=2)
        res = run_continual(stream, cfg)
        snaps = res.snapshots[0]
        assert len(snaps) == 2
        assert "head1.w" in snaps[1] and "head1.w" not in snaps[0]

    def test_records_timings_and_coresets(self):
        stream = toy_stream(n_tasks=2)
        cfg = toy_config(coreset="random", coreset_size=10,
                         coreset_mode="regret")
        res = run_continual(stream, cfg)
        assert res.timings[0] > 0
        assert [t for t, _ in res.coresets[0]] == [0, 1]
        assert all(len(d) == 10 for _, d in res.coresets[0])
        none = run_continual(stream, toy_config())
        assert none.coresets[0] == []


class TestSnapshotFile:
    def test_roundtrip(self, tmp_path):
        rng = make_rng(31)
        snaps = [
            {"trunk0.w": rng.uniform(0.1, 1.0, size=(3, 4)),
             "head0.b": rng.uniform(0.1, 1.0, size=2)},
            {"trunk0.w": rng.uniform(0.1, 1.0, size=(3, 4)),
             "head0.b": rng.uniform(0.1, 1.0, size=2),
             "head1.b": rng.uniform(0.1, 1.0, size=2)},
        ]
        path = tmp_path / "snaps.npz"
        save_snapshots(path, snaps)
        back = load_snapshots(path)
        assert len(back) == 2
        for orig, got in zip(snaps, back):
            assert sorted(orig) == sorted(got)
            for k in orig:
                np.testing.assert_array_equal(got[k], orig[k])

    def test_empty_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            save_snapshots(tmp_path / "snaps.npz", [])


class TestVarianceHeatmap:
    def test_formula_exact(self):
        snaps = [
            {"a": np.array([0.2, 0.4]), "b": np.array([0.1])},
            {"a": np.array([0.2, 0.2]), "b": np.array([0.4])},
        ]
        delta, labels = variance_heatmap(snaps)
        assert delta.shape == (3, 2)
        assert labels == ["a", "a", "b"]
        # anchor: max sigma in first snapshot is 0.4 (a[1])
        np.testing.assert_allclose(delta[1, 0], 0.0, atol=1e-15)
        # halved from the anchor reads -0.5
        np.testing.assert_allclose(delta[1, 1], -0.5, atol=1e-15)
        np.testing.assert_allclose(delta[0, 0], (0.2 - 0.4) / 0.4, atol=1e-15)
        np.testing.assert_allclose(delta[2, 1], (0.4 - 0.4) / 0.4, atol=1e-15)

    def test_later_keys_ignored(self):
        snaps = [
            {"a": np.array([1.0])},
            {"a": np.array([0.5]), "new": np.array([9.0])},
        ]
        delta, labels = variance_heatmap(snaps)
        assert delta.shape == (1, 2)
        np.testing.assert_allclose(delta[0], [0.0, -0.5], atol=1e-15)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            variance_heatmap([])


class TestLinreg:
    def cfg(self):
        return ExperimentConfig(experiment="linreg", linreg_steps=40,
                                linreg_n=80, sigma0=float(np.exp(-1.0)),
                                eval_samples=8,
                                true_params=[[1.8, 1.0], [1.5, 1.2]])

    def test_shapes_and_rows(self):
        res = linreg_trajectory(0, self.cfg())
        assert set(res.trajectories) == {"sgd", "adam", "sgd_gng", "adam_gng"}
        n_steps = 2 * 40
        for v, tr in res.trajectories.items():
            assert tr.shape == (n_steps, 2)
            assert res.update_norms[v].shape == (n_steps,)
        rows = res.trajectory_rows()
        assert len(rows) == 4 * n_steps
        assert rows[0][0] == "sgd" and rows[0][1] == 0

    def test_deterministic(self):
        r1 = linreg_trajectory(3, self.cfg())
        r2 = linreg_trajectory(3, self.cfg())
        for v in r1.trajectories:
            np.testing.assert_array_equal(r1.trajectories[v], r2.trajectories[v])

    def test_variants_share_init(self):
        res = linreg_trajectory(0, self.cfg())
        # all variants take their first step from the same initialization,
        # so early points cluster tightly
        first = np.stack([res.trajectories[v][0] for v in res.trajectories])
        assert first.std(axis=0).max() < 0.05

    def test_moves_toward_truth(self):
        from dataclasses import replace
        res = linreg_trajectory(0, replace(self.cfg(), linreg_steps=250))
        end = res.trajectories["adam"][-1]
        assert abs(end[0] - 1.5) < 0.6
        assert abs(end[1] - 1.2) < 0.6

    def test_mse_grid_minimum_near_truth(self):
        cfg = self.cfg()
        rows = mse_grid(cfg, n_grid=21)
        assert len(rows) == 21 * 21
        best = min(rows, key=lambda r: r[2])
        # best grid cell sits between the two task optima
        assert 1.1 < best[0] < 1.9 and 0.8 < best[1] < 1.4
