import csv
import io
import json
import math

import pytest

from distreach.coordinator import MetricsRow, StopCriterion, TrainingMetrics
from distreach.experiment import (SUMMARY_HEADER, CellResult, ExperimentPlan, ExperimentSummary,
                                  default_config, deterministic_view, read_run_manifest, replay_check,
                                  report, run_experiment, threshold_crossing)
from distreach.ppo import PpoConfig

TINY = PpoConfig(horizon=16, min_steps_per_task=32, timesteps_per_batch=32, sgd_batchsize=16,
                 num_sgd_iter=1, hidden_sizes=(8,))


def metrics(*rewards, dt=1.0, steps=100):
    m = TrainingMetrics()
    for i, r in enumerate(rewards):
        m.append(MetricsRow(i, steps * (i + 1), dt * (i + 1), r, 1, 0))
    return m


class TestThresholdCrossing:
    def test_interpolates_time(self):
        hit = threshold_crossing(metrics(-0.5, -0.1, 0.1), 0.0)
        assert hit[0] == 2 and hit[2] == 300
        assert hit[1] == pytest.approx(2.5)

    def test_first_row(self):
        assert threshold_crossing(metrics(0.0, -1.0), -0.01) == (0, 1.0, 100)

    def test_exact_hit(self):
        assert threshold_crossing(metrics(-1.0, -0.01), -0.01) == (1, 2.0, 200)

    def test_never(self):
        assert threshold_crossing(metrics(-1.0, -0.5), -0.01) is None


class TestSummary:
    def cells(self):
        return [CellResult(1, 0, True, 10, -0.005, 7, 3.0, 700),
                CellResult(1, 1, False, 10, -0.2),
                CellResult(1, 2, True, 10, -0.009, 9, 5.0, 900),
                CellResult(4, 0, False, 10, -0.3),
                CellResult(4, 1, False, 10, -0.3),
                CellResult(4, 2, True, 10, -0.001, 2, 1.0, 800, status="ok")]

    def test_unreached_counts_as_infinite(self):
        s = ExperimentSummary("scara3", self.cells())
        assert s.median(1, "rounds_to_threshold") == 9
        assert s.median(4, "rounds_to_threshold") is None

    def test_failed_cells_excluded(self):
        cells = self.cells() + [CellResult(2, 0, False, status="failed: boom")]
        assert ExperimentSummary("scara3", cells).median(2, "rounds_to_threshold") is None

    def test_unreached_clears_threshold_fields(self):
        c = CellResult(1, 0, False, rounds_to_threshold=3, time_to_threshold_s=1.0)
        assert c.rounds_to_threshold is None and c.time_to_threshold_s is None

    def test_csv(self):
        text = ExperimentSummary("scara3", list(reversed(self.cells()))).to_csv()
        rows = list(csv.reader(io.StringIO(text)))
        assert tuple(rows[0]) == SUMMARY_HEADER
        assert [(r[0], r[1]) for r in rows[1:4]] == [("1", "0"), ("1", "1"), ("1", "2")]
        assert rows[2][2] == "false" and rows[2][3] == ""

    def test_report_columns(self):
        text = report(ExperimentSummary("scara3", self.cells()))
        head = text.splitlines()[0].split()
        assert head == ["workers", "seed", "accuracy_mm", "repeatability_mm", "time_to_threshold_s",
                        "timesteps_to_threshold"]
        assert len(text.splitlines()) == 7
        assert text.splitlines()[2].split()[-1] == "-"

    def test_report_empty(self):
        with pytest.raises(ValueError):
            report(ExperimentSummary("scara3"))


class TestPlan:
    def test_arm6_defaults(self):
        assert default_config("arm6").sgd_stepsize == 1e-4
        assert default_config("scara3", 4).num_workers == 4

    def test_default_stop(self):
        assert ExperimentPlan("arm6").stop.max_rounds == 2000
        assert ExperimentPlan("scara3").stop.max_rounds == 300

    @pytest.mark.parametrize("kw", [{"worker_grid": ()}, {"worker_grid": (0,)}, {"seeds": ()},
                                    {"eval_runs": 1}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ExperimentPlan("scara3", **kw)


def test_deterministic_view_drops_wall_clock():
    text = "round,timesteps,wall_clock_s,mean_reward,workers,seed\n0,10,0.5,-1.0,1,0\n"
    assert deterministic_view(text) == "round,timesteps,mean_reward,workers,seed\n0,10,-1.0,1,0\n"


@pytest.fixture(scope="module")
def grid(tmp_path_factory):
    out = tmp_path_factory.mktemp("grid")
    plan = ExperimentPlan("scara3", (1, 2), (0,), TINY, StopCriterion(-0.01, 2), out, eval_runs=2)
    lines = []
    return plan, run_experiment(plan, progress=lines.append), lines


class TestRunExperiment:
    def test_layout(self, grid):
        plan, summary, lines = grid
        root = plan.output_dir / "scara3"
        assert (root / "summary.csv").exists()
        for w in (1, 2):
            cell = root / f"{w}w_s0"
            assert {p.name for p in cell.iterdir()} == {f"curves_{w}_0.csv", "params.rgp", "cell.json",
                                                       "run.json"}
        assert len(lines) == 2

    def test_cells(self, grid):
        _, summary, _ = grid
        assert [(c.workers, c.rounds, c.status) for c in summary.cells] == [(1, 2, "ok"), (2, 2, "ok")]
        assert all(c.accuracy_mm >= 0 and c.repeatability_mm >= 0 for c in summary.cells)

    def test_resume_skips_finished_cells(self, grid):
        plan, summary, _ = grid
        lines = []
        again = run_experiment(plan, progress=lines.append)
        assert lines == []
        assert again.to_csv() == summary.to_csv()

    def test_run_manifest(self, grid):
        plan, _, _ = grid
        env, workers, seed, cfg, stop, mode = read_run_manifest(plan.cell_dir(2, 0) / "run.json")
        assert (env, workers, seed, mode) == ("scara3", 2, 0, "in-process")
        assert cfg == TINY.replace(num_workers=2)
        assert stop == StopCriterion(-0.01, 2)
        doc = json.loads((plan.cell_dir(2, 0) / "run.json").read_text())
        assert doc["stop"]["max_wall_clock_seconds"] == math.inf

    def test_replay_identical(self, grid, tmp_path):
        plan, _, _ = grid
        verdict = replay_check(plan.cell_dir(2, 0), tmp_path)
        assert verdict.identical and verdict.detail == "identical"

    def test_replay_detects_tampering(self, grid, tmp_path):
        plan, _, _ = grid
        src = plan.cell_dir(1, 0)
        copy = tmp_path / "run"
        copy.mkdir()
        for name in ("run.json", "params.rgp"):
            (copy / name).write_bytes((src / name).read_bytes())
        lines = (src / "curves_1_0.csv").read_text().splitlines()
        lines[-1] = lines[-1][:-1] + "9"
        (copy / "curves_1_0.csv").write_text("\n".join(lines) + "\n")
        verdict = replay_check(copy, tmp_path / "scratch")
        assert not verdict.identical and not verdict.curve_identical and verdict.params_identical
