import csv
import json

import numpy as np
import pytest

from branchmpc.bench_cli import (
    CSV_COLUMNS,
    TIMING_COLUMNS,
    RunConfig,
    UsageError,
    check_report,
    main,
    run_experiment,
    verify,
)
from branchmpc.models_scenarios import problem_from_dict
from branchmpc.msilqr_tree import SolverOptions, SolverReport


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_horizon_sweep(tmp_path):
    cfg = RunConfig(horizons=[63, 127], output=str(tmp_path), warmup=False, scan_report=False)
    records = run_experiment(cfg)
    assert [r.status for r in records] == ["converged", "converged"]
    rows = _rows(tmp_path / "horizon-sweep-pmsilqr.csv")
    assert len(rows) == 2
    assert tuple(rows[0]) == CSV_COLUMNS
    for r in records:
        phases = r.t_setup_ms + r.t_bp1_ms + r.t_bp2_ms + r.t_fwd_ms + r.t_ls_ms
        assert min(getattr(r, c) for c in TIMING_COLUMNS) >= 0
        assert r.t_total_ms >= phases - 1.0


def test_leaf_sweep_rows(tmp_path):
    cfg = RunConfig(experiment="leaf-sweep", horizons=[255], leaves=[2, 4, 6, 9, 12], output=str(tmp_path),
                    warmup=False, scan_report=False, solver_options={"max_iter": 2, "max_outer": 1})
    records = run_experiment(cfg)
    assert [r.leaves for r in records] == [2, 4, 6, 9, 12]
    assert {r.status for r in records} <= {"converged", "max-iter", "error"}


def test_reproducible_except_timing(tmp_path):
    out = []
    for name in ("a", "b"):
        cfg = RunConfig(experiment="latency-sweep", horizons=[64], T_sh1=[0.5, 1.0], repetitions=2,
                        output=str(tmp_path / name), scan_report=False, solver="hypmsilqr")
        run_experiment(cfg)
        rows = _rows(tmp_path / name / "latency-sweep-hypmsilqr.csv")
        out.append([{k: v for k, v in r.items() if k not in TIMING_COLUMNS} for r in rows])
    assert out[0] == out[1]
    assert len(out[0]) == 4


def test_env_overrides_output(tmp_path, monkeypatch):
    monkeypatch.setenv("BRANCHMPC_OUTPUT_DIR", str(tmp_path / "env"))
    cfg = RunConfig(horizons=[16], output=str(tmp_path / "cfg"), warmup=False)
    run_experiment(cfg)
    assert (tmp_path / "env" / "horizon-sweep-pmsilqr.csv").exists()
    rep = _rows(tmp_path / "env" / "scan_report.csv")[0]
    assert rep["N"] == "511" and float(rep["blelloch_ms"]) > 0


@pytest.mark.parametrize("bad", [{"solver": "foo"}, {"experiment": "bar"}, {"horizons": []}, {"repetitions": 0},
                                 {"nonsense": 1}, {"solver_options": {"beta": 2.0}}])
def test_bad_configs_exit_2(tmp_path, bad):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(bad))
    assert main(["run", "--config", str(path)]) == 2


def test_usage_errors_exit_2():
    with pytest.raises(SystemExit) as err:
        main(["frobnicate"])
    assert err.value.code == 2
    with pytest.raises(UsageError):
        RunConfig(solver="foo")


def test_verify_suites():
    rep = verify()
    assert rep["passed"]
    assert rep["suites"]["scan-riccati"]["max_error"] <= 1e-8
    assert not verify(mutate=True)["passed"]
    assert verify([])["passed"]
    assert main(["verify", "--suite", "tree-qp"]) == 0
    assert main(["verify", "--mutate", "--suite", "scan-riccati"]) == 1
    assert main(["verify", "--suite"]) == 0
    assert main(["verify", "--suite", "nope"]) == 2


def test_gen_writes_loadable_problem(tmp_path):
    out = tmp_path / "p.json"
    assert main(["gen", "--scenario", "latency", "--N", "64", "--out", str(out)]) == 0
    p = problem_from_dict(json.loads(out.read_text()))
    assert p.topology.n_leaves == 4
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"experiment": "custom", "problem_file": str(out), "output": str(tmp_path),
                               "warmup": False, "scan_report": False}))
    assert main(["run", "--config", str(cfg)]) == 0
    assert len(_rows(tmp_path / "custom-pmsilqr.csv")) == 1
    assert main(["gen", "--scenario", "intersection", "--leaves", "5", "--out", str(out)]) == 2


def test_check_report_flags_violations():
    rep = SolverReport()
    h = rep.history
    h["merit_before"] += [10.0, 9.0]
    h["merit_after"] += [9.0, 9.5]
    h["alpha"] += [1.0, 1.0]
    h["expected"] += [-1.0, -1.0]
    h["mu"] += [2.0, 1.0]
    h["defect_norm_before"] += [0.0, 0.0]
    issues = check_report(rep, SolverOptions())
    assert any("mu" in s for s in issues)
    assert any("iteration 1" in s for s in issues)
    assert not any("iteration 0" in s for s in issues)
    assert np.isfinite(len(issues))
