from dataclasses import replace

import numpy as np
import pytest

from mpcnet import bench, model
from mpcnet.bench import (ABLATION_HEADER, BC_HEADER, MULTIGAIT_HEADER, AblationRow, MultigaitReport,
                          percentage, responsibility_from_weights, switch_time)
from mpcnet.policy import MenConfig, MenPolicy
from mpcnet.training import TrainConfig

TINY = TrainConfig(duration=0.2, n_threads=1, n_jobs=2, data_runs=1, iterations=200, metrics_decimation=200,
                   batch_size=8)
WALK, TROT = model.WALK, model.TROT_ANALOG


class TestResponsibility:
    def test_one_hot_distinct(self):
        modes = [0, 1, 2, 0, 1, 2]
        p = np.eye(4)[[2, 0, 3, 2, 0, 3]]
        rep = responsibility_from_weights(p, modes)
        assert rep.single_responsibility
        assert rep.assignment[model.Mode.STANCE] == (2, 1.0)

    def test_uniform(self):
        rep = responsibility_from_weights(np.full((6, 4), 0.25), [0, 1, 2, 0, 1, 2])
        assert not rep.single_responsibility

    def test_shared_expert(self):
        p = np.eye(4)[[1, 1, 2]]
        rep = responsibility_from_weights(p, [0, 1, 2])
        assert not rep.single_responsibility

    def test_threshold(self):
        p = np.array([[0.85, 0.15, 0, 0], [0.15, 0.85, 0, 0]])
        assert responsibility_from_weights(p, [0, 1]).single_responsibility
        assert not responsibility_from_weights(p, [0, 1], threshold=0.9).single_responsibility

    def test_describe(self):
        rep = responsibility_from_weights(np.eye(2)[[0, 1]], [1, 2])
        assert rep.describe() == "swing1->0(1.00) swing2->1(1.00)"

    def test_policy_with_constant_gating(self):
        pol = MenPolicy(MenConfig(num_experts=4))
        pol.params["gating.1.W"][...] = 0.0
        pol.params["gating.1.b"][...] = 0.0
        rep = bench.responsibility_stats(pol, TROT, 20, TINY)
        assert not rep.single_responsibility
        for _, w in rep.assignment.values():
            assert w == pytest.approx(0.25)

    def test_teacher_points_cover_modes(self):
        pts = bench.teacher_points(WALK, replace(TINY, duration=1.0), 50)
        assert len(pts) == 50
        assert {m for _, _, m, _ in pts} == {0, 1, 2}


def test_percentage():
    assert percentage([True, False, True, True]) == 75.0
    assert percentage([]) == 0.0


class TestSwitchTime:
    def test_walk_to_trot(self):
        assert switch_time(WALK, TROT) == 3.0

    def test_trot_to_walk(self):
        t = switch_time(TROT, WALK)
        assert t >= 2 * 0.6 and t % 1.0 == pytest.approx(0.0, abs=1e-9)

    def test_same_gait(self):
        assert switch_time(WALK, WALK) == 2.0


def test_ablation_row_format():
    row = AblationRow("l3", 1.0, "walk", 2, True, 0.5, 4.0)
    assert row.csv_row() == "l3,1.0,walk,2,1,0.5,4.0"
    assert ABLATION_HEADER == "loss,beta,gait,seed,single_resp,violation,survival"


def test_trace_format():
    rep = MultigaitReport([], [(0.5, 1, 2, np.array([0.1, 0.2, 0.7]))])
    lines = rep.trace_csv(3).splitlines()
    assert lines[0] == "time,active_mode,argmax_expert,p0,p1,p2"
    assert lines[1] == "0.5,swing1,2,0.1,0.2,0.7"


@pytest.fixture(autouse=True)
def _fresh_cache():
    bench.clear_cache()
    yield
    bench.clear_cache()


def test_ablation_end_to_end(tmp_path):
    rep = bench.run_ablation(TINY, [0, 1], betas=(1.0,), n_eval_points=40, final_runs=2, out_dir=str(tmp_path))
    assert len(rep.rows) == 2 * 2 * 2 and len(rep.bumps_rows) == 4
    lines = (tmp_path / "ablation.csv").read_text().splitlines()
    assert lines[0] == ABLATION_HEADER and len(lines) == 9
    # summary percentages agree with the rows
    for (loss, beta, gait), pct in rep.percentages.items():
        flags = [r.single_resp for r in rep.rows if (r.loss, r.beta, r.gait) == (loss, beta, gait)]
        assert pct == percentage(flags)
    summary = (tmp_path / "summary.txt").read_text()
    assert summary.count("PASS") + summary.count("FAIL") == len(rep.checks) == 5
    assert (tmp_path / "ablation_table.csv").read_text().startswith("loss,beta,trot-analog,walk")
    assert (tmp_path / "time_features.csv").exists()
    with pytest.raises(ValueError):
        bench.run_ablation(TINY, [0])


def test_ablation_failures_not_fatal(monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("no data")

    monkeypatch.setattr(bench, "train", boom)
    rep = bench.run_ablation(TINY, [0, 1], gaits=[TROT], betas=(1.0,), bumps=False, n_eval_points=10, final_runs=1)
    assert all(not r.single_resp and np.isnan(r.violation) for r in rep.rows)


def test_bc_benchmark(tmp_path):
    rep = bench.run_bc_benchmark(TINY, [0, 1], scales=(0.0, 0.3), n_runs=4, teacher_runs=2, duration=0.5,
                                 out_dir=str(tmp_path))
    lines = (tmp_path / "survival.csv").read_text().splitlines()
    assert lines[0] == BC_HEADER and len(lines) == 7
    assert {r[1] for r in rep.rows} == {"MPC", "MPC-Net", "BC"}
    assert rep.mean(0.0, "MPC") == 0.5 and rep.std(0.0, "MPC") == 0.0
    for s, c, n, m, sd in rep.rows:
        assert 0.0 <= m <= 0.5 and n == (2 if c == "MPC" else 4)
    assert len(rep.checks) == 2


def test_multigait(tmp_path):
    rep = bench.run_multigait(TINY, [0], n_eval_points=30, final_runs=1, variants=("l3",), out_dir=str(tmp_path))
    lines = (tmp_path / "multigait.csv").read_text().splitlines()
    assert lines[0] == MULTIGAIT_HEADER
    # guided l3, unguided l3, two single-gait baselines
    assert len(lines) == 5
    assert lines[1].startswith("l3,1,walk+trot-analog,0,")
    trace = (tmp_path / "expert_trace.csv").read_text().splitlines()
    assert trace[0].startswith(bench.TRACE_HEADER_PREFIX)
    times = [float(r.split(",")[0]) for r in trace[1:]]
    assert max(times) > switch_time(WALK, TROT)
    assert len(rep.checks) == 2


def test_multigait_uses_doubled_iterations(monkeypatch):
    seen = []
    real = bench.trained

    def spy(config, gaits, kind, mode_map=None):
        seen.append((len(gaits), config.iterations))
        return real(config, gaits, kind, mode_map)

    monkeypatch.setattr(bench, "trained", spy)
    bench.run_multigait(TINY, [0], n_eval_points=10, final_runs=1, variants=("l2",), unguided=False)
    assert (2, 2 * TINY.iterations) in seen and (1, TINY.iterations) in seen


def test_reports_reproducible(tmp_path):
    a = bench.run_ablation(TINY, [0, 1], gaits=[TROT], betas=(1.0,), bumps=False, n_eval_points=20, final_runs=1)
    bench.clear_cache()
    b = bench.run_ablation(TINY, [0, 1], gaits=[TROT], betas=(1.0,), bumps=False, n_eval_points=20, final_runs=1)
    assert a.csv() == b.csv()
