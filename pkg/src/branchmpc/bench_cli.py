"""``bench``: experiment sweeps, oracle verification and scenario export.

    bench run --config sweep.json [--output DIR]
    bench verify [--suite NAME ...] [--mutate] [--json]
    bench gen --scenario intersection|latency --out problem.json

Results go to the configured output directory; ``BRANCHMPC_OUTPUT_DIR``
overrides it. Usage errors exit with status 2.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import _kernels
from .condensed import build_prediction, condense, condense_tree, solve_dense
from .lqr_scan import (
    ScanElementFwd,
    StageModel,
    ValueFunction,
    backward_scan,
    combine_bwd,
    combine_fwd,
    forward_scan,
    init_bwd_element,
    solve_lqr,
)
from .models_scenarios import (
    LatencySpec,
    ScenarioSpec,
    build_intersection_case,
    build_latency_case,
    intersection_counts,
    problem_from_dict,
    problem_to_dict,
)
from .msilqr_tree import PRESETS, SolverOptions, SolverReport, backward_pass, linear_rollout, solve
from .riccati import TreeStageModels, riccati_path, riccati_tree
from .tree_core import build_tree

EXPERIMENTS = ("horizon-sweep", "leaf-sweep", "latency-sweep", "custom")
CSV_COLUMNS = (
    "experiment", "solver", "N", "leaves", "T_sh1", "rep", "iters", "cost", "violation",
    "t_setup_ms", "t_bp1_ms", "t_bp2_ms", "t_fwd_ms", "t_ls_ms", "t_total_ms", "status",
)
TIMING_COLUMNS = tuple(c for c in CSV_COLUMNS if c.startswith("t_") and c.endswith("_ms"))


class UsageError(ValueError):
    pass


@dataclass
class RunConfig:
    experiment: str = "horizon-sweep"
    solver: str = "pmsilqr"
    horizons: list = field(default_factory=lambda: [63])
    leaves: list = field(default_factory=lambda: [4])
    T_sh1: list = field(default_factory=lambda: [0.5])
    repetitions: int = 1
    seed: int = 0
    output: str = "bench_out"
    warmup: bool = True
    parallel: bool = False
    scan_report: bool = True
    problem_file: str | None = None
    solver_options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise UsageError(f"unknown experiment {self.experiment!r}; choose from {list(EXPERIMENTS)}")
        if self.solver not in PRESETS:
            raise UsageError(f"unknown solver {self.solver!r}; choose from {sorted(PRESETS)}")
        for name in ("horizons", "leaves", "T_sh1"):
            if not list(getattr(self, name)):
                raise UsageError(f"{name} must be non-empty")
        if int(self.repetitions) < 1:
            raise UsageError("repetitions must be >= 1")
        if self.experiment == "custom" and not self.problem_file:
            raise UsageError("custom experiments need problem_file")
        try:
            self.options()
        except ValueError as err:
            raise UsageError(str(err)) from None

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def options(self) -> SolverOptions:
        return SolverOptions.preset(self.solver, **self.solver_options)

    def output_dir(self) -> Path:
        return Path(os.environ.get("BRANCHMPC_OUTPUT_DIR") or self.output)


@dataclass
class RunRecord:
    experiment: str
    solver: str
    N: int
    leaves: int
    T_sh1: float | None
    rep: int
    iters: int
    cost: float
    violation: float
    t_setup_ms: float
    t_bp1_ms: float
    t_bp2_ms: float
    t_fwd_ms: float
    t_ls_ms: float
    t_total_ms: float
    status: str

    def row(self) -> dict:
        d = asdict(self)
        d["T_sh1"] = "" if self.T_sh1 is None else self.T_sh1
        return d


def check_report(report: SolverReport, options: SolverOptions, rtol: float = 1e-9) -> list[str]:
    """Post-hoc checks on a convergence report: merit descent and mu monotonicity."""
    h = report.history
    issues = []
    mu = np.asarray(h["mu"])
    if mu.size and np.any(np.diff(mu) < 0):
        issues.append("mu decreased")
    for i, (m0, m1, a, ec, mu_i, d) in enumerate(zip(
        h["merit_before"], h["merit_after"], h["alpha"], h["expected"], h["mu"], h["defect_norm_before"]
    )):
        bound = m0 + options.beta * (ec - a * mu_i * d)
        if not m1 <= bound + rtol * (1.0 + abs(bound)):
            issues.append(f"iteration {i}: merit {m1!r} above bound {bound!r}")
    return issues


def _status(report: SolverReport, options: SolverOptions) -> str:
    if report.status not in ("converged", "max-iter"):
        return "error"
    if check_report(report, options):
        return "error"
    return report.status


def _build_point(config: RunConfig, point: dict):
    if config.experiment == "custom":
        return problem_from_dict(json.loads(Path(config.problem_file).read_text()))
    if config.experiment == "latency-sweep":
        return build_latency_case(LatencySpec(N=point["N"], T_sh1=point["T_sh1"]))
    return build_intersection_case(ScenarioSpec(N=point["N"]), *intersection_counts(point["leaves"]))


def _points(config: RunConfig) -> list[dict]:
    if config.experiment == "horizon-sweep":
        return [dict(N=int(n), leaves=int(config.leaves[0]), T_sh1=None) for n in config.horizons]
    if config.experiment == "leaf-sweep":
        return [dict(N=int(config.horizons[0]), leaves=int(m), T_sh1=None) for m in config.leaves]
    if config.experiment == "latency-sweep":
        return [dict(N=int(config.horizons[0]), leaves=4, T_sh1=float(t)) for t in config.T_sh1]
    return [dict(N=None, leaves=None, T_sh1=None)]


def _run_point(config: RunConfig, point: dict) -> list[RunRecord]:
    options = config.options()
    try:
        problem = _build_point(config, point)
    except Exception as err:  # recorded in-row, not raised
        print(f"problem generation failed at {point}: {err}", file=sys.stderr)
        return [RunRecord(config.experiment, config.solver, point["N"] or 0, point["leaves"] or 0,
                          point["T_sh1"], r, 0, float("nan"), float("nan"), 0, 0, 0, 0, 0, 0, "error")
                for r in range(config.repetitions)]
    N = problem.topology.horizon
    leaves = problem.topology.n_leaves
    records = []
    for rep in range(-1 if config.warmup else 0, config.repetitions):
        t0 = time.perf_counter()
        try:
            _, report = solve(problem, options)
            status = _status(report, options)
        except Exception as err:
            print(f"solver failed at {point} rep {rep}: {err}", file=sys.stderr)
            report, status = SolverReport(), "error"
        total = time.perf_counter() - t0
        if rep < 0:
            continue
        tm = report.timings
        records.append(RunRecord(
            config.experiment, config.solver, N, leaves, point["T_sh1"], rep, report.iterations,
            report.cost, report.violation,
            1e3 * tm["setup"], 1e3 * tm["bp1"], 1e3 * tm["bp2"], 1e3 * tm["fwd"], 1e3 * tm["ls"],
            1e3 * total, status,
        ))
    return records


def write_csv(path: Path, records: Sequence[RunRecord]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for rec in records:
            writer.writerow(rec.row())


def random_lqr(rng: np.random.Generator, nx: int, nu: int, N: int) -> tuple[StageModel, ValueFunction]:
    """Stable-ish random time-varying LQR with PD costs."""

    def spd(n, *lead):
        X = rng.standard_normal(lead + (n, n))
        return X @ np.swapaxes(X, -1, -2) / n + np.eye(n)

    A = np.eye(nx) + 0.2 * rng.standard_normal((N, nx, nx)) / np.sqrt(nx)
    B = rng.standard_normal((N, nx, nu)) / np.sqrt(nx)
    Q, R = spd(nx, N), spd(nu, N)
    # cross terms small enough to keep [[Q, M'], [M, R]] positive definite
    M = 0.1 * rng.standard_normal((N, nu, nx)) / np.sqrt(nx * nu)
    stages = StageModel(A, B, 0.1 * rng.standard_normal((N, nx)), Q, R, M,
                        rng.standard_normal((N, nx)), rng.standard_normal((N, nu)))
    return stages, ValueFunction(spd(nx), rng.standard_normal(nx))


def scan_report(seed: int, N: int = 511, nx: int = 4, nu: int = 2, reps: int = 3) -> dict:
    """Wall time of the blelloch scan vs the sequential fold at one size (non-binding)."""
    rng = np.random.default_rng(seed)
    stages, term = random_lqr(rng, nx, nu, N)
    x0 = rng.standard_normal(nx)
    out = {"N": N, "nx": nx, "nu": nu, "backend": _kernels.get_backend().BACKEND}
    for method in ("blelloch", "sequential"):
        solve_lqr(stages, term, x0, method=method)
        best = min(_timed(lambda: solve_lqr(stages, term, x0, method=method)) for _ in range(reps))
        out[f"{method}_ms"] = 1e3 * best
    t = min(_timed(lambda: riccati_path(stages, term)) for _ in range(reps))
    out["riccati_ms"] = 1e3 * t
    return out


def _timed(fn: Callable) -> float:
    t0 = time.perf_counter()
    fn()
    return time.perf_counter() - t0


def run_experiment(config: RunConfig) -> list[RunRecord]:
    """Run every sweep point; write ``<experiment>-<solver>.csv`` to the output directory."""
    points = _points(config)
    if config.parallel and len(points) > 1:
        with ProcessPoolExecutor() as pool:
            chunks = list(pool.map(_run_point, [config] * len(points), points))
    else:
        chunks = [_run_point(config, p) for p in points]
    records = [r for chunk in chunks for r in chunk]
    out = config.output_dir()
    write_csv(out / f"{config.experiment}-{config.solver}.csv", records)
    if config.scan_report:
        rep = scan_report(config.seed)
        with open(out / "scan_report.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rep))
            writer.writeheader()
            writer.writerow(rep)
    return records


# ---------------------------------------------------------------------------
# verification suites


def _rel(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))


def dense_tree_qp(models: TreeStageModels, x0: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Brute-force KKT solve of the LQR-Tree over all node states and inputs."""
    topo = models.topology
    n, n_nl, nx, nu = topo.node_count, topo.n_nonleaf, models.nx, models.nu
    nz = n * nx + n_nl * nu
    xi = lambda i: slice(i * nx, (i + 1) * nx)  # noqa: E731
    ui = lambda i: slice(n * nx + i * nu, n * nx + (i + 1) * nu)  # noqa: E731
    H = np.zeros((nz, nz))
    g = np.zeros(nz)
    for i in range(n):
        H[xi(i), xi(i)] += models.Q[i]
        g[xi(i)] += models.q[i]
    for i in range(n_nl):
        H[ui(i), ui(i)] += models.R[i]
        H[ui(i), xi(i)] += models.M[i]
        H[xi(i), ui(i)] += models.M[i].T
        g[ui(i)] += models.r[i]
    E = np.zeros((n * nx, nz))
    e = np.zeros(n * nx)
    E[xi(0), xi(0)] = np.eye(nx)
    e[xi(0)] = x0
    for i in range(1, n):
        j = topo.parent[i]
        E[xi(i), xi(i)] = -np.eye(nx)
        E[xi(i), xi(j)] = models.A[j]
        E[xi(i), ui(j)] = models.B[j]
        e[xi(i)] = -models.c[i]
    K = np.block([[H, E.T], [E, np.zeros((n * nx, n * nx))]])
    sol = np.linalg.solve(K, np.concatenate([-g, e]))
    return sol[: n * nx].reshape(n, nx), sol[n * nx: nz].reshape(n_nl, nu)


def random_tree_models(rng, topo, nx, nu) -> TreeStageModels:
    n, n_nl = topo.node_count, topo.n_nonleaf

    def spd(k, m):
        X = rng.standard_normal((m, k, k))
        return X @ np.swapaxes(X, -1, -2) / k + np.eye(k)

    w = topo.weight
    c = 0.1 * rng.standard_normal((n, nx))
    c[0] = 0.0
    return TreeStageModels(
        topo,
        A=np.eye(nx) + 0.2 * rng.standard_normal((n_nl, nx, nx)) / np.sqrt(nx),
        B=rng.standard_normal((n_nl, nx, nu)) / np.sqrt(nx),
        c=c,
        Q=spd(nx, n) * w[:, None, None],
        R=spd(nu, n_nl) * w[:n_nl, None, None],
        M=0.1 * rng.standard_normal((n_nl, nu, nx)) / np.sqrt(nx * nu) * w[:n_nl, None, None],
        q=rng.standard_normal((n, nx)) * w[:, None],
        r=rng.standard_normal((n_nl, nu)) * w[:n_nl, None],
    )


def _suite_scan_riccati(rng):
    err = 0.0
    for nx, nu, N in [(2, 1, 8), (4, 2, 64), (8, 4, 64), (4, 2, 511)]:
        st, term = random_lqr(rng, nx, nu, N)
        vs = backward_scan(st, term)
        vr, _ = riccati_path(st, term)
        for a, b in zip(vs, vr):
            err = max(err, _rel(a.P, b.P), _rel(a.p, b.p))
    return err, 1e-8


def _suite_forward_scan(rng):
    err = 0.0
    for nx, N in [(2, 8), (4, 64), (8, 511)]:
        A = 0.9 * rng.standard_normal((N, nx, nx)) / np.sqrt(nx)
        c = rng.standard_normal((N, nx))
        x0 = rng.standard_normal(nx)
        X = forward_scan(ScanElementFwd(A, c), x0)
        x = x0
        for k in range(N):
            x = A[k] @ x + c[k]
            err = max(err, _rel(X[k], x))
    return err, 1e-10


def _suite_associativity(rng):
    err = 0.0
    for _ in range(50):
        nx = int(rng.choice([2, 4]))
        st, _ = random_lqr(rng, nx, 2, 3)
        e = init_bwd_element(st)
        a, b, c = (tuple(x[i] for x in e) for i in range(3))
        left = combine_bwd(combine_bwd(a, b), c)
        right = combine_bwd(a, combine_bwd(b, c))
        err = max(err, max(_rel(x, y) for x, y in zip(left, right)))
        f = [(rng.standard_normal((nx, nx)), rng.standard_normal(nx)) for _ in range(3)]
        left = combine_fwd(combine_fwd(f[0], f[1]), f[2])
        right = combine_fwd(f[0], combine_fwd(f[1], f[2]))
        err = max(err, max(_rel(x, y) for x, y in zip(left, right)))
    return err, 1e-9


def _suite_condensing(rng):
    st, term = random_lqr(rng, 4, 2, 20)
    x0 = rng.standard_normal(4)
    pred = build_prediction(st)
    X = np.zeros((21, 4))
    X[0] = x0
    U = rng.standard_normal((20, 2))
    for k in range(20):
        X[k + 1] = st.A[k] @ X[k] + st.B[k] @ U[k] + st.c[k]
    err = _rel(pred.Phi @ x0 + pred.S @ U.reshape(-1) + pred.F @ st.c.reshape(-1), X.reshape(-1))
    u = solve_dense(condense(st, term, x0, pred)).reshape(20, 2)
    _, _, _, inputs = solve_lqr(st, term, x0)
    err = max(err, _rel(u, inputs))
    topo = build_tree(5, [(1, 2, None), (3, 2, None)])
    models = random_tree_models(rng, topo, 3, 2)
    x0 = rng.standard_normal(3)
    qp, gamma = condense_tree(models, x0)
    u_tree = solve_dense(qp).reshape(gamma.n_tree, 2)
    _, pol = riccati_tree(models)
    dx, du = linear_rollout(models, pol, x0, method="sequential")
    err = max(err, _rel(u_tree, du))
    return err, 1e-7


def _suite_tree_qp(rng):
    err = 0.0
    for topo in (build_tree(7, [(3, 2, [0.5, 0.5])]), build_tree(6, [(1, 2, [0.3, 0.7]), (3, 2, None)])):
        models = random_tree_models(rng, topo, 3, 2)
        x0 = rng.standard_normal(3)
        Xd, Ud = dense_tree_qp(models, x0)
        _, pol = riccati_tree(models)
        X, U = linear_rollout(models, pol, x0, method="sequential")
        err = max(err, _rel(X, Xd), _rel(U, Ud))
    return err, 1e-7


def _suite_cross_strategy(rng):
    err = 0.0
    for topo in (build_tree(7, [(3, 2, None)]), build_tree(15, [(2, 3, None), (5, 2, None)]), build_tree(9)):
        models = random_tree_models(rng, topo, 4, 2)
        x0 = rng.standard_normal(4)
        Xd, Ud = dense_tree_qp(models, x0)
        for strategy in ("scan+tree-riccati", "scan+condensed", "tree-riccati"):
            bw = backward_pass(models, strategy, x0)
            X, U = linear_rollout(models, bw.policy, x0)
            err = max(err, _rel(X, Xd), _rel(U, Ud))
    return err, 1e-6


SUITES = {
    "scan-riccati": _suite_scan_riccati,
    "forward-scan": _suite_forward_scan,
    "associativity": _suite_associativity,
    "condensing": _suite_condensing,
    "tree-qp": _suite_tree_qp,
    "cross-strategy": _suite_cross_strategy,
}


@contextlib.contextmanager
def mutated_combine_bwd():
    """Flip the sign of the composed ``A`` in every backward combination."""
    original = _kernels.combine_bwd

    def bad(*args):
        P, p, C, A, c = original(*args)
        return P, p, C, -A, c

    _kernels.combine_bwd = bad
    try:
        yield
    finally:
        _kernels.combine_bwd = original


def verify(suites: Sequence[str] | None = None, seed: int = 0, mutate: bool = False) -> dict:
    """Run oracle suites; returns ``{"passed": bool, "suites": {...}}``."""
    names = list(SUITES) if suites is None else list(suites)
    unknown = [s for s in names if s not in SUITES]
    if unknown:
        raise UsageError(f"unknown suites {unknown}; choose from {list(SUITES)}")
    results = {}
    ctx = mutated_combine_bwd() if mutate else contextlib.nullcontext()
    with ctx:
        for name in names:
            rng = np.random.default_rng(seed)
            try:
                err, tol = SUITES[name](rng)
                ok = bool(np.isfinite(err) and err <= tol)
            except Exception as exc:  # a crashing suite is a failing suite
                err, tol, ok = float("nan"), float("nan"), False
                results[name] = {"passed": False, "max_error": err, "tol": tol, "error": str(exc)}
                continue
            results[name] = {"passed": ok, "max_error": err, "tol": tol}
    return {"passed": all(r["passed"] for r in results.values()), "suites": results}


# ---------------------------------------------------------------------------
# command line


def _gen(args) -> int:
    try:
        return _gen_checked(args)
    except ValueError as err:
        raise UsageError(str(err)) from None


def _gen_checked(args) -> int:
    if args.scenario == "intersection":
        spec = ScenarioSpec(N=args.N or 63)
        problem = build_intersection_case(spec, *intersection_counts(args.leaves))
    else:
        spec = LatencySpec(N=args.N or 255, T_sh1=args.T_sh1)
        problem = build_latency_case(spec)
    doc = problem_to_dict(problem)
    doc["scenario"] = {"name": args.scenario, **spec.to_dict()}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(doc))
    print(f"wrote {out} ({problem.topology.node_count} nodes, {problem.topology.n_leaves} leaves)")
    return 0


def _run(args) -> int:
    try:
        cfg = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as err:
        print(f"cannot read config: {err}", file=sys.stderr)
        return 2
    if args.output:
        cfg["output"] = args.output
    try:
        config = RunConfig.from_dict(cfg)
    except (UsageError, TypeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    records = run_experiment(config)
    for r in records:
        print(f"{r.experiment} {r.solver} N={r.N} leaves={r.leaves} T_sh1={r.T_sh1} rep={r.rep} "
              f"iters={r.iters} cost={r.cost:.6g} viol={r.violation:.2e} total={r.t_total_ms:.1f}ms {r.status}")
    print(f"results in {config.output_dir()}")
    return 0


def _verify(args) -> int:
    suites = None if args.suite is None else [s for group in args.suite for s in group]
    try:
        report = verify(suites, seed=args.seed, mutate=args.mutate)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    if args.json:
        print(json.dumps(report, indent=2))
    else:
        for name, r in report["suites"].items():
            tag = "PASS" if r["passed"] else "FAIL"
            print(f"{tag} {name}: max_error={r['max_error']:.3e} tol={r['tol']:.0e}")
        print("all passed" if report["passed"] else "verification FAILED")
    return 0 if report["passed"] else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bench", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment sweep")
    run.add_argument("--config", required=True)
    run.add_argument("--output", help="output directory (env BRANCHMPC_OUTPUT_DIR wins)")
    run.set_defaults(func=_run)

    ver = sub.add_parser("verify", help="run oracle-equivalence suites")
    ver.add_argument("--suite", action="append", nargs="*", help=f"one of {list(SUITES)}; repeatable")
    ver.add_argument("--mutate", action="store_true", help="inject a sign error into the backward combinator")
    ver.add_argument("--seed", type=int, default=0)
    ver.add_argument("--json", action="store_true")
    ver.set_defaults(func=_verify)

    gen = sub.add_parser("gen", help="write a scenario problem as JSON")
    gen.add_argument("--scenario", required=True, choices=("intersection", "latency"))
    gen.add_argument("--out", required=True)
    gen.add_argument("--leaves", type=int, default=4)
    gen.add_argument("--N", type=int)
    gen.add_argument("--T-sh1", dest="T_sh1", type=float, default=0.5)
    gen.set_defaults(func=_gen)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
