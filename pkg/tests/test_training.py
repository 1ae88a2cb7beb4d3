from dataclasses import replace

import numpy as np
import pytest

from mpcnet import model, solver, training
from mpcnet.losses import HamiltonianBatch, LossKind
from mpcnet.policy import MenConfig, MenPolicy
from mpcnet.training import (METRICS_HEADER, MetricsRecord, MpcController, ReplayBuffer,
                             TrainConfig, alpha_schedule, behavioral_action, buffer_push, buffer_sample,
                             generate_data, metrics_csv, metrics_rollout, run_job, sample_task, train)

TROT = model.get_gait("trot-analog")
WALK = model.get_gait("walk")

# a few seconds of work: short rollouts, few jobs
TINY = TrainConfig(duration=0.2, n_threads=2, n_jobs=2, data_runs=2, iterations=400, metrics_decimation=200,
                   batch_size=8, seed=3)


def _task(seed=0, gait=TROT, config=TINY):
    return sample_task(np.random.default_rng(seed), [gait], config)


class TestAlpha:
    def test_examples(self):
        assert alpha_schedule(0, 100) == 1.0
        assert alpha_schedule(100, 100) == 0.0
        assert alpha_schedule(50, 100) == 0.5

    def test_clamped(self):
        assert alpha_schedule(150, 100) == 0.0
        assert alpha_schedule(0, 0) == 0.0


@pytest.fixture(scope="module")
def setup():
    task = _task()
    sol = training.make_solver(TINY, task).solve(task.x0, 0.0)
    cfg = MenConfig(output_offset=(0.0,) * 6)
    pol = MenPolicy(cfg)
    pol.params["experts.2.W"][...] = 0.0
    pol.params["experts.2.b"][...] = 0.0
    pol.version += 1
    return task, sol, pol


class TestBehavioralAction:
    def test_pure_mpc(self, setup):
        task, sol, pol = setup
        u = behavioral_action(1.0, sol, pol, task.x0, 0.0, task.gait.schedule, task.reference)
        np.testing.assert_array_equal(u, solver.mpc_policy_eval(sol, task.x0, 0.0))

    def test_pure_learned(self, setup):
        task, sol, pol = setup
        u = behavioral_action(0.0, sol, pol, task.x0, 0.0, task.gait.schedule, task.reference)
        np.testing.assert_array_equal(u, np.zeros(6))

    def test_midpoint(self, setup, monkeypatch):
        task, sol, pol = setup
        monkeypatch.setattr(solver, "mpc_policy_eval", lambda s, x, t: np.full(6, 2.0))
        u = behavioral_action(0.5, sol, pol, task.x0, 0.0, task.gait.schedule, task.reference)
        assert u[0] == 1.0
        np.testing.assert_array_equal(u, np.ones(6))


class TestBuffer:
    def test_ring_eviction(self):
        buf = ReplayBuffer(3)
        buffer_push(buf, [1, 2, 3, 4])
        assert len(buf) == 3
        assert buf.contents() == [2, 3, 4]

    def test_insertion_order(self):
        buf = ReplayBuffer(10)
        buffer_push(buf, [5, 6])
        buffer_push(buf, [7])
        assert buf.contents() == [5, 6, 7]

    def test_sampling_with_replacement(self):
        buf = ReplayBuffer(100, seed=1)
        buffer_push(buf, list(range(10)))
        batch = buffer_sample(buf, 32)
        assert len(batch) == 32 and set(batch) <= set(range(10))

    def test_uniform(self):
        buf = ReplayBuffer(100, seed=2)
        buffer_push(buf, list(range(4)))
        counts = np.bincount(buffer_sample(buf, 8000), minlength=4)
        assert np.all(np.abs(counts / 8000 - 0.25) < 0.03)

    def test_errors(self):
        with pytest.raises(ValueError):
            ReplayBuffer(0)
        buf = ReplayBuffer(3)
        with pytest.raises(ValueError):
            buffer_sample(buf, 1)
        buffer_push(buf, [1])
        with pytest.raises(ValueError):
            buffer_sample(buf, 0)


class TestDataGeneration:
    def test_emission_steps(self):
        cfg = replace(TINY, duration=12 * TINY.dt, data_decimation=4, n_samples=1)
        task = _task(1, config=cfg)
        res = run_job(cfg, task, None, 1.0, np.random.default_rng(0))
        assert not res.failed
        assert len(res.tuples) == 6  # steps 0, 4, 8 with nominal + one sample each
        nominal = res.tuples[::2]
        starts = [t.t_abs - 0.5 * cfg.ocp_dt for t in nominal]
        np.testing.assert_allclose(starts, [0.0, 4 * cfg.dt, 8 * cfg.dt], atol=1e-12)

    def test_samples_per_emission(self):
        cfg = replace(TINY, duration=12 * TINY.dt, n_samples=0)
        assert len(run_job(cfg, _task(1, config=cfg), None, 1.0, np.random.default_rng(0)).tuples) == 3

    def test_failed_job_discarded(self):
        task = _task(2)
        x0 = task.x0.copy()
        x0[model.PZ] = model.Z_DEFAULT + 0.25
        res = run_job(TINY, replace(task, x0=x0), None, 1.0, np.random.default_rng(0))
        assert res.failed and res.tuples == []

    def test_tuples_valid(self):
        res = run_job(TINY, _task(3), None, 1.0, np.random.default_rng(0))
        for t in res.tuples:
            rows = model.mode_constraints(t.mode)[0].shape[0]
            assert t.nu.shape == (rows,)
            for v in (t.gt, t.xr, t.x_abs, t.dVdx, t.nu, t.u_mpc):
                assert np.all(np.isfinite(v))
            assert t.mode_probs[int(t.mode)] == 1.0

    def test_pure_mpc_runs_repeat(self):
        a = run_job(TINY, _task(4), None, 1.0, np.random.default_rng(5))
        b = run_job(TINY, _task(4), None, 1.0, np.random.default_rng(5))
        assert len(a.tuples) == len(b.tuples)
        for s, t in zip(a.tuples, b.tuples):
            np.testing.assert_array_equal(s.x_abs, t.x_abs)
            np.testing.assert_array_equal(s.dVdx, t.dVdx)

    def test_tuple_recomputes_hamiltonian(self):
        task = _task(6, WALK)
        res = run_job(TINY, task, None, 1.0, np.random.default_rng(1))
        cost = model.walker_cost(task.reference)
        hb = HamiltonianBatch.from_tuples(res.tuples, model.walker_cost())
        H, dH = hb.evaluate(np.array([t.u_mpc for t in res.tuples]))
        for j, t in enumerate(res.tuples):
            data = solver.HamiltonianData(t.x_abs, t.t_abs, t.dVdx, t.dVdt, t.nu, t.mode)
            Hs, dHs = solver.eval_hamiltonian(data, t.u_mpc, cost)
            assert abs(H[j] - Hs) <= 1e-8 * max(1.0, abs(Hs))
            np.testing.assert_allclose(dH[j], dHs, rtol=1e-8, atol=1e-8)

    def test_diagnostics_account_for_tuples(self):
        diag = training.Diagnostics()
        out = generate_data(0, TINY, [TROT], None, 1.0, diagnostics=diag)
        assert diag.jobs == TINY.n_jobs
        assert diag.tuples == len(out)


class TestMetricsRollout:
    def test_teacher_survives_with_tiny_violation(self):
        cfg = replace(TINY, duration=1.0)
        rec = metrics_rollout(MpcController(), [TROT], cfg, 0.0, np.random.default_rng(0))
        assert rec.completed and rec.survival_time == cfg.duration
        assert rec.constraint_violation <= 1e-6
        untrained = metrics_rollout(MenPolicy(), [TROT], cfg, 0.0, np.random.default_rng(0))
        assert untrained.constraint_violation > rec.constraint_violation

    def test_failed_rollout_time(self):
        class Quits:
            def reset(self, task, config):
                self.inner = MpcController()
                self.inner.reset(task, config)

            def __call__(self, x, t, i):
                if t >= 1.3:
                    raise solver.SolverFailure("stop")
                return self.inner(x, t, i)

        rec = metrics_rollout(Quits(), [TROT], replace(TINY, duration=2.0), 0.0, np.random.default_rng(0))
        assert rec.survival_time == pytest.approx(1.3) and not rec.completed

    def test_fall_is_failure(self):
        class Drops:
            def reset(self, task, config):
                pass

            def __call__(self, x, t, i):
                return np.zeros(6)

        rec = metrics_rollout(Drops(), [TROT], replace(TINY, duration=2.0), 0.0, np.random.default_rng(0))
        assert not rec.completed and 0 < rec.survival_time < 2.0

    def test_disturbances_reproducible(self):
        cfg = replace(TINY, duration=0.5)
        pol = MenPolicy()
        a = metrics_rollout(pol, [TROT], cfg, 0.3, np.random.default_rng(9))
        b = metrics_rollout(pol, [TROT], cfg, 0.3, np.random.default_rng(9))
        assert a == b

    def test_poisson_times(self):
        times = training.disturbance_times(np.random.default_rng(0), 1.0, 2000.0)
        assert 1800 < len(times) < 2200
        assert training.disturbance_times(np.random.default_rng(0), 0.0, 10.0) == []


class TestTrain:
    def test_zero_iterations(self):
        res = train(replace(TINY, iterations=0), [TROT], LossKind())
        assert res.history == [] and res.policy.step_count == 0

    def test_cadence(self):
        res = train(replace(TINY, iterations=1000), [TROT], LossKind())
        assert [r.iteration for r in res.history] == [200, 400, 600, 800, 1000]
        assert res.policy.step_count == 1000

    def test_deterministic_bitwise(self):
        a = train(TINY, [TROT], LossKind("l3"))
        b = train(TINY, [TROT], LossKind("l3"))
        assert metrics_csv(a.history) == metrics_csv(b.history)
        np.testing.assert_array_equal(a.policy.flat_parameters(), b.policy.flat_parameters())

    def test_seed_changes_run(self):
        a = train(TINY, [TROT], LossKind("l3"))
        b = train(replace(TINY, seed=4), [TROT], LossKind("l3"))
        assert not np.array_equal(a.policy.flat_parameters(), b.policy.flat_parameters())

    def test_async(self):
        res = train(replace(TINY, iterations=200, metrics_decimation=100), [TROT], LossKind("l2"),
                    deterministic=False)
        assert len(res.history) == 2
        assert res.diagnostics.jobs > 0

    def test_multi_gait_and_guided(self):
        res = train(replace(TINY, iterations=200), [TROT, WALK], LossKind("l3", guided=True))
        assert len(res.history) == 1
        assert np.all(np.isfinite(res.policy.flat_parameters()))

    def test_bc(self):
        res = train(replace(TINY, iterations=200), [TROT], LossKind("bc"))
        assert np.all(np.isfinite(res.losses))

    def test_empty_gait_set(self):
        with pytest.raises(ValueError):
            train(TINY, [], LossKind())

    def test_all_jobs_fail(self, monkeypatch):
        monkeypatch.setattr(training, "run_job", lambda *a, **k: training.JobResult([], failed=True))
        with pytest.raises(RuntimeError):
            train(TINY, [TROT], LossKind())


def test_metrics_csv_format():
    text = metrics_csv([MetricsRecord(200, 0.5, 3.0, 4.0, True), MetricsRecord(400, 0.25, 2.0, 1.5, False)])
    lines = text.splitlines()
    assert lines[0] == METRICS_HEADER
    assert lines[1] == "200,0.5,3.0,4.0,1"
    assert lines[2] == "400,0.25,2.0,1.5,0"


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(ocp_dt=0.011)
    with pytest.raises(ValueError):
        TrainConfig(time_features="other")
