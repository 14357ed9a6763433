"""Multiple-shooting iLQR on trajectory trees with an augmented Lagrangian.

One inner iteration linearizes the problem into an LQR-Tree, solves it with
the backward split (per-branch scans below the last branching step N_b,
then Riccati or condensing above it), rolls the linear model forward and
takes the largest step on a fixed grid that decreases the L1 merit
``J + mu*||d||_1``. The outer loop updates multipliers and penalty.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping, NamedTuple

import numpy as np

from .condensed import condense_tree, solve_dense
from .errors import BranchMPCError, FactorizationError
from .lqr_scan import (
    FeedbackPolicy,
    ScanElementFwd,
    ValueFunction,
    backward_scan_stacked,
    feedback_from_values,
    forward_scan_stacked,
)
from .problem import ALState, BmpcProblem, nonlinear_rollout
from .riccati import TreeStageModels, riccati_tree
from .tree_core import TrajectoryTree, TreeTopology, segments

BACKWARD_STRATEGIES = ("scan+tree-riccati", "scan+condensed", "tree-riccati")
FORWARD_STRATEGIES = ("linear-scan", "linear-sequential", "nonlinear")
LINE_SEARCHES = ("parallel", "sequential")

PRESETS = {
    "pmsilqr": dict(backward="scan+tree-riccati", forward="linear-scan", line_search="parallel"),
    "hypmsilqr": dict(backward="scan+condensed", forward="linear-scan", line_search="parallel"),
    "smsilqr": dict(backward="tree-riccati", forward="linear-sequential", line_search="sequential"),
    "sssilqr": dict(backward="tree-riccati", forward="nonlinear", line_search="sequential"),
}


def _mv(X, v):
    return (X @ v[..., None])[..., 0]


def _mT(X):
    return np.swapaxes(X, -1, -2)


@dataclass
class SolverOptions:
    backward: str = "scan+tree-riccati"
    forward: str = "linear-scan"
    line_search: str = "parallel"
    scan_method: str = "blelloch"
    alphas: tuple = tuple(2.0 ** -i for i in range(11))
    beta: float = 1e-4
    gamma: float = 0.5
    mu0: float = 1.0
    eps_defect: float = 1e-8
    tol_defect: float = 1e-8
    tol_cost: float = 1e-8
    tol_step: float = 1e-6
    max_iter: int = 100
    reg_init: float = 0.0
    reg_min: float = 1e-6
    reg_factor: float = 10.0
    reg_max: float = 1e10
    rho0: float = 10.0
    rho_growth: float = 10.0
    rho_max: float = 1e8
    tol_con: float = 1e-4
    max_outer: int = 10

    def __post_init__(self):
        self.alphas = tuple(float(a) for a in self.alphas)
        if self.backward not in BACKWARD_STRATEGIES:
            raise ValueError(f"unknown backward strategy {self.backward!r}")
        if self.forward not in FORWARD_STRATEGIES:
            raise ValueError(f"unknown forward strategy {self.forward!r}")
        if self.line_search not in LINE_SEARCHES:
            raise ValueError(f"unknown line search {self.line_search!r}")
        if not self.alphas or any(not 0.0 < a <= 1.0 for a in self.alphas):
            raise ValueError("alpha grid must be non-empty and inside (0, 1]")
        if list(self.alphas) != sorted(self.alphas, reverse=True):
            raise ValueError("alpha grid must be descending")
        if not 0.0 < self.beta < 1.0 or not 0.0 < self.gamma < 1.0:
            raise ValueError("beta and gamma must lie in (0, 1)")
        if self.mu0 <= 0.0 or self.eps_defect <= 0.0 or self.rho0 <= 0.0:
            raise ValueError("mu0, eps_defect and rho0 must be positive")

    @classmethod
    def preset(cls, solver: str, **overrides) -> "SolverOptions":
        if solver not in PRESETS:
            raise ValueError(f"unknown solver {solver!r}; choose from {sorted(PRESETS)}")
        return cls(**{**PRESETS[solver], **overrides})

    @classmethod
    def from_dict(cls, cfg: Mapping) -> "SolverOptions":
        cfg = dict(cfg)
        base = PRESETS[cfg.pop("solver")] if "solver" in cfg else {}
        known = {f.name for f in fields(cls)}
        unknown = set(cfg) - known
        if unknown:
            raise ValueError(f"unknown solver options: {sorted(unknown)}")
        return cls(**{**base, **cfg})

    @classmethod
    def from_json(cls, text: str) -> "SolverOptions":
        return cls.from_dict(json.loads(text))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["alphas"] = list(self.alphas)
        return d


@dataclass
class SolverState:
    trajectory: TrajectoryTree
    defects: np.ndarray
    mu: float
    cost: float
    iteration: int = 0
    reg: float = 0.0


@dataclass
class SolverReport:
    status: str = "max-iter"
    iterations: int = 0
    outer_iterations: int = 0
    cost: float = float("nan")
    al_cost: float = float("nan")
    violation: float = float("nan")
    defect_norm: float = float("nan")
    step_norm: float = float("nan")
    rho: float = float("nan")
    eta_max: float = float("nan")
    timings: dict = field(default_factory=lambda: dict.fromkeys(("setup", "bp1", "bp2", "fwd", "ls"), 0.0))
    history: dict = field(default_factory=lambda: {k: [] for k in (
        "outer", "cost", "al_cost", "defect_norm", "violation", "alpha", "mu", "reg",
        "merit_before", "merit_after", "expected", "defect_norm_before",
    )})

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


class Evaluation(NamedTuple):
    """Costs, constraints and defects of a trajectory (or a batch of them)."""

    cost: np.ndarray  # weighted raw objective
    al_cost: np.ndarray  # weighted AL objective
    defects: np.ndarray  # (..., node_count - 1, nx)
    g_stage: np.ndarray
    g_terminal: np.ndarray

    @property
    def defect_norm(self):
        return np.abs(self.defects).sum(axis=(-1, -2))

    @property
    def violation(self):
        parts = [np.zeros(self.cost.shape)]
        for g in (self.g_stage, self.g_terminal):
            if g.shape[-1]:
                parts.append(np.max(g, axis=(-1, -2)))
        return np.maximum(0.0, np.max(np.stack(parts), axis=0))


def _al_terms(g, eta, rho):
    active = np.where((g < 0.0) & (eta == 0.0), 0.0, rho)
    return np.sum((eta + 0.5 * active * g) * g, axis=-1)


def evaluate_batch(problem: BmpcProblem, al: ALState, states: np.ndarray, inputs: np.ndarray) -> Evaluation:
    """Evaluate ``(n_batch, ...)`` stacks of states and inputs in batched calls."""
    topo = problem.topology
    nb = states.shape[0]
    n, n_nl = topo.node_count, topo.n_nonleaf
    w = topo.weight
    stage = np.tile(np.arange(n_nl), nb)
    leaf = np.tile(topo.leaves, nb)
    xs = states[:, :n_nl].reshape(-1, problem.nx)
    us = inputs.reshape(-1, problem.nu)
    xl = states[:, n_nl:].reshape(-1, problem.nx)

    ls = problem.stage_cost(stage, xs, us).reshape(nb, n_nl)
    lf = problem.terminal_cost(leaf, xl).reshape(nb, -1)
    gs = problem.stage_constraints(stage, xs, us).reshape(nb, n_nl, -1)
    gt = problem.terminal_constraints(leaf, xl).reshape(nb, topo.n_leaves, -1)
    cost = ls @ w[:n_nl] + lf @ w[n_nl:]
    al_cost = cost + _al_terms(gs, al.eta_stage, al.rho) @ w[:n_nl] + _al_terms(gt, al.eta_terminal, al.rho) @ w[n_nl:]

    child = np.arange(1, n)
    par = topo.parent[child]
    par_t = np.tile(par, nb)
    f = problem.dynamics(
        par_t, states[:, par].reshape(-1, problem.nx), inputs[:, par].reshape(-1, problem.nu)
    ).reshape(nb, n - 1, problem.nx)
    defects = f - states[:, child]
    bad = ~np.isfinite(cost) | ~np.isfinite(al_cost) | ~np.all(np.isfinite(defects), axis=(-1, -2))
    al_cost = np.where(bad, np.inf, al_cost)
    return Evaluation(cost, al_cost, defects, gs, gt)


def evaluate(problem: BmpcProblem, al: ALState, traj: TrajectoryTree) -> Evaluation:
    ev = evaluate_batch(problem, al, traj.states[None], traj.inputs[None])
    return Evaluation(*(x[0] for x in ev))


def merit(problem: BmpcProblem, al: ALState, traj: TrajectoryTree, mu: float) -> float:
    """``M = J_AL + mu * ||d||_1`` over all non-root defects."""
    ev = evaluate(problem, al, traj)
    return float(ev.al_cost + mu * ev.defect_norm)


# ---------------------------------------------------------------------------
# linearization


def linearize(problem: BmpcProblem, nominal: TrajectoryTree, al: ALState) -> TreeStageModels:
    """LQR-Tree approximation of the AL objective around ``nominal``.

    Constraint curvature uses Gauss-Newton ``g_x' I_rho g_x``; all terms of a
    node are scaled by its weight.
    """
    topo = problem.topology
    n, n_nl = topo.node_count, topo.n_nonleaf
    nx, nu = problem.nx, problem.nu
    X, U = nominal.states, nominal.inputs
    if X.shape != (n, nx) or U.shape != (n_nl, nu):
        raise ValueError(f"nominal has shapes {X.shape}, {U.shape}; expected {(n, nx)}, {(n_nl, nu)}")
    stage = np.arange(n_nl)
    leaf = topo.leaves
    xs, xl = X[:n_nl], X[n_nl:]

    A, B = problem.dynamics_jacobians(stage, xs, U)
    lx, lu, lxx, luu, lux = problem.stage_cost_derivatives(stage, xs, U)
    tx, txx = problem.terminal_cost_derivatives(leaf, xl)

    gs = problem.stage_constraints(stage, xs, U)
    gsx, gsu = problem.stage_constraint_jacobians(stage, xs, U)
    gt = problem.terminal_constraints(leaf, xl)
    gtx = problem.terminal_constraint_jacobians(leaf, xl)
    Is, It = al.active(gs, gt)
    ms = al.eta_stage + Is * gs
    mt = al.eta_terminal + It * gt

    q = np.empty((n, nx))
    Q = np.empty((n, nx, nx))
    q[:n_nl] = lx + _mv(_mT(gsx), ms)
    Q[:n_nl] = lxx + _mT(gsx) @ (Is[..., None] * gsx)
    r = lu + _mv(_mT(gsu), ms)
    R = luu + _mT(gsu) @ (Is[..., None] * gsu)
    M = lux + _mT(gsu) @ (Is[..., None] * gsx)
    q[n_nl:] = tx + _mv(_mT(gtx), mt)
    Q[n_nl:] = txx + _mT(gtx) @ (It[..., None] * gtx)

    w = topo.weight
    wn = w[:n_nl]
    Q *= w[:, None, None]
    q *= w[:, None]
    R = R * wn[:, None, None]
    M = M * wn[:, None, None]
    r = r * wn[:, None]

    c = np.zeros((n, nx))
    par = topo.parent[1:]
    c[1:] = problem.dynamics(par, X[par], U[par]) - X[1:]

    for name, arr, rows in (("A", A, stage), ("B", B, stage), ("Q", Q, np.arange(n)), ("q", q, np.arange(n)),
                            ("R", R, stage), ("M", M, stage), ("r", r, stage), ("defect", c, np.arange(n))):
        ok = np.all(np.isfinite(arr.reshape(arr.shape[0], -1)), axis=1)
        if not ok.all():
            raise BranchMPCError(f"non-finite {name} at node {int(rows[np.argmin(ok)])}")
    return TreeStageModels(topo, np.asarray(A, float), np.asarray(B, float), c, Q, R, M, q, r)


# ---------------------------------------------------------------------------
# backward pass


class BackwardResult(NamedTuple):
    policy: FeedbackPolicy  # (n_nonleaf, ...) node-indexed
    values: ValueFunction  # (node_count, ...); NaN where not formed
    shared_inputs: np.ndarray | None  # condensed strategy: inputs of nodes above the cut
    t_bp1: float
    t_bp2: float


def _branch_chains(topo: TreeTopology) -> np.ndarray:
    """``(length, n_branches)`` node indices from step ``N_b + 1`` to the leaves."""
    start = topo.last_branch_step + 1
    heads = np.arange(topo.step_range(start).start, topo.step_range(start).stop)
    length = topo.horizon - start + 1
    # every chain below N_b is a run of single children: offset by level size
    offs = np.array([topo.step_range(start + t).start for t in range(length)])
    return offs[:, None] + (heads - heads[0])[None, :]


def backward_pass(
    models: TreeStageModels,
    strategy: str = "scan+tree-riccati",
    dx0: np.ndarray | None = None,
    scan_method: str = "blelloch",
) -> BackwardResult:
    """Backward split: per-branch scans (P1) then the shared tree (P2).

    ``tree-riccati`` runs one sequential sweep over the whole tree instead.
    ``scan+condensed`` solves P2 as a dense QP in the root deviation ``dx0``;
    those nodes get ``K = 0`` and ``k`` equal to the optimal input.
    """
    if strategy not in BACKWARD_STRATEGIES:
        raise ValueError(f"unknown backward strategy {strategy!r}")
    topo = models.topology
    nx, nu = models.nx, models.nu
    n, n_nl = topo.node_count, topo.n_nonleaf
    dx0 = np.zeros(nx) if dx0 is None else np.asarray(dx0, float)

    if strategy == "tree-riccati":
        t0 = time.perf_counter()
        values, policy = riccati_tree(models)
        return BackwardResult(policy, values, None, 0.0, time.perf_counter() - t0)

    t0 = time.perf_counter()
    P = np.full((n, nx, nx), np.nan)
    p = np.full((n, nx), np.nan)
    K = np.zeros((n_nl, nu, nx))
    k = np.zeros((n_nl, nu))
    chains = _branch_chains(topo)
    leaves = chains[-1]
    P[leaves], p[leaves] = models.Q[leaves], models.q[leaves]
    if chains.shape[0] > 1:
        stages = models.chain_stages(chains)
        Vp, vp = backward_scan_stacked(stages, ValueFunction(models.Q[leaves], models.q[leaves]), method=scan_method)
        P[chains], p[chains] = Vp, vp
        pol = feedback_from_values(stages, ValueFunction(Vp[1:], vp[1:]))
        K[chains[:-1]], k[chains[:-1]] = pol
    t1 = time.perf_counter()

    shared = None
    top = int(chains[0, 0])
    if top > 0:
        boundary = {int(j): ValueFunction(P[j], p[j]) for j in chains[0]}
        if strategy == "scan+tree-riccati":
            vals, pol = riccati_tree(models, boundary_values=boundary)
            P[:top], p[:top] = vals.P[:top], vals.p[:top]
            K[:top], k[:top] = pol.K[:top], pol.k[:top]
        else:
            qp, gamma = condense_tree(models, dx0, boundary_values=boundary)
            shared = solve_dense(qp).reshape(gamma.n_tree, nu)
            K[:top] = 0.0
            k[:top] = shared
    t2 = time.perf_counter()
    return BackwardResult(FeedbackPolicy(K, k), ValueFunction(P, p), shared, t1 - t0, t2 - t1)


# ---------------------------------------------------------------------------
# forward pass


def _segment_groups(topo: TreeTopology) -> list[np.ndarray]:
    groups: dict[int, list] = {}
    for seg in segments(topo):
        groups.setdefault(int(topo.time_step[seg[0]]), []).append(seg)
    return [np.asarray(groups[s]) for s in sorted(groups)]


def linear_rollout(
    models: TreeStageModels,
    policy: FeedbackPolicy,
    dx0: np.ndarray | None = None,
    method: str = "scan",
    scan_method: str = "blelloch",
    groups: list[np.ndarray] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Closed-loop propagation of the LQR-Tree, returning ``(dx, du)``.

    With ``method="scan"`` each maximal chain is a forward scan that starts
    from its parent's already computed state; chains of equal depth are
    scanned together. ``method="sequential"`` walks the nodes in order.
    """
    topo = models.topology
    nx = models.nx
    n, n_nl = topo.node_count, topo.n_nonleaf
    K, k = policy
    dx = np.zeros((n, nx))
    if dx0 is not None:
        dx[0] = dx0

    if method == "sequential":
        for i in range(1, n):
            j = topo.parent[i]
            du = K[j] @ dx[j] + k[j]
            dx[i] = models.A[j] @ dx[j] + models.B[j] @ du + models.c[i]
    elif method == "scan":
        for segs in groups if groups is not None else _segment_groups(topo):
            if segs[0, 0] == 0:
                src, dst = segs[:, :-1], segs[:, 1:]
                start = dx[segs[:, 0]]
            else:
                src = np.concatenate([topo.parent[segs[:, :1]], segs[:, :-1]], axis=1)
                dst = segs
                start = dx[src[:, 0]]
            if dst.shape[1] == 0:
                continue
            src, dst = src.T, dst.T  # (length, batch)
            Bs = models.B[src]
            elems = ScanElementFwd(models.A[src] + Bs @ K[src], models.c[dst] + _mv(Bs, k[src]))
            dx[dst] = forward_scan_stacked(elems, start, method=scan_method)
    else:
        raise ValueError(f"unknown rollout method {method!r}")
    du = _mv(K, dx[:n_nl]) + k
    return dx, du


def expected_change_coeffs(models: TreeStageModels, dx: np.ndarray, du: np.ndarray) -> tuple[float, float]:
    """``(a1, a2)`` with ``EC(alpha) = alpha*a1 + alpha^2*a2`` on the quadratic model."""
    n_nl = models.topology.n_nonleaf
    a1 = float(np.sum(models.q * dx) + np.sum(models.r * du))
    a2 = 0.5 * float(
        np.einsum("ni,nij,nj->", dx, models.Q, dx)
        + np.einsum("ni,nij,nj->", du, models.R, du)
        + 2.0 * np.einsum("ni,nij,nj->", du, models.M, dx[:n_nl])
    )
    return a1, a2


def update_mu(mu: float, ec1: float, defect_norm: float, options: SolverOptions) -> float:
    if defect_norm <= options.eps_defect:
        return mu
    trial = ec1 / ((1.0 - options.gamma) * defect_norm) + options.mu0
    return max(trial, mu)


class LineSearchResult(NamedTuple):
    accepted: bool
    alpha: float
    trajectory: TrajectoryTree | None
    evaluation: Evaluation | None
    merit: float


def line_search(
    problem: BmpcProblem,
    al: ALState,
    nominal: TrajectoryTree,
    merit0: float,
    defect_norm: float,
    mu: float,
    ec: tuple[float, float],
    options: SolverOptions,
    step: tuple[np.ndarray, np.ndarray] | None = None,
    policy: FeedbackPolicy | None = None,
) -> LineSearchResult:
    """Largest grid step satisfying sufficient decrease of the merit.

    Multiple-shooting trials ``(x + a dx, u + a du)`` come from ``step``.
    With ``policy`` instead, each trial is a closed-loop nonlinear rollout.
    """
    a1, a2 = ec
    alphas = np.asarray(options.alphas)

    def trials(sel):
        if step is not None:
            dx, du = step
            X = nominal.states[None] + sel[:, None, None] * dx[None]
            U = nominal.inputs[None] + sel[:, None, None] * du[None]
            return X, U
        X, U = [], []
        for a in sel:
            try:
                t = nonlinear_rollout(problem, policy=policy, nominal=nominal, alpha=float(a))
                X.append(t.states)
                U.append(t.inputs)
            except BranchMPCError:
                X.append(np.full_like(nominal.states, np.nan))
                U.append(np.full_like(nominal.inputs, np.nan))
        return np.stack(X), np.stack(U)

    def accept(sel, ev):
        with np.errstate(invalid="ignore"):
            m = ev.al_cost + mu * ev.defect_norm
            bound = merit0 + options.beta * (sel * a1 + sel ** 2 * a2 - sel * mu * defect_norm)
            return m, np.isfinite(m) & (m <= bound)

    if options.line_search == "parallel":
        X, U = trials(alphas)
        with np.errstate(all="ignore"):
            ev = evaluate_batch(problem, al, X, U)
        m, ok = accept(alphas, ev)
        if ok.any():
            i = int(np.argmax(ok))  # grid is descending
            return LineSearchResult(True, float(alphas[i]), TrajectoryTree(X[i], U[i]),
                                    Evaluation(*(x[i] for x in ev)), float(m[i]))
        return LineSearchResult(False, 0.0, None, None, float("nan"))

    for a in alphas:
        sel = np.array([a])
        X, U = trials(sel)
        with np.errstate(all="ignore"):
            ev = evaluate_batch(problem, al, X, U)
        m, ok = accept(sel, ev)
        if ok[0]:
            return LineSearchResult(True, float(a), TrajectoryTree(X[0], U[0]),
                                    Evaluation(*(x[0] for x in ev)), float(m[0]))
    return LineSearchResult(False, 0.0, None, None, float("nan"))


# ---------------------------------------------------------------------------
# driver


def _inner(problem, al, state, options, report, outer, groups):
    """Inner loop on a fixed AL state. Returns the status string."""
    tm = report.timings
    dx0 = np.zeros(problem.nx)
    rollout_method = "sequential" if options.forward == "linear-sequential" else "scan"
    iters = 0
    while True:
        t0 = time.perf_counter()
        ev = evaluate(problem, al, state.trajectory)
        models = linearize(problem, state.trajectory, al)
        J = float(ev.al_cost)
        dnorm = float(ev.defect_norm)
        tm["setup"] += time.perf_counter() - t0
        report.al_cost, report.cost = J, float(ev.cost)
        report.defect_norm, report.violation = dnorm, float(ev.violation)

        while True:
            try:
                bw = backward_pass(models.regularized(state.reg), options.backward, dx0, options.scan_method)
                break
            except FactorizationError:
                state.reg = max(state.reg * options.reg_factor, options.reg_min)
                if state.reg > options.reg_max:
                    return "stalled"
        tm["bp1"] += bw.t_bp1
        tm["bp2"] += bw.t_bp2

        t0 = time.perf_counter()
        dx, du = linear_rollout(models, bw.policy, dx0, rollout_method, options.scan_method, groups)
        a1, a2 = expected_change_coeffs(models, dx, du)
        tm["fwd"] += time.perf_counter() - t0
        step_norm = float(np.max(np.abs(bw.policy.k))) if bw.policy.k.size else 0.0
        report.step_norm = step_norm

        if (dnorm <= options.tol_defect and abs(a1 + a2) <= options.tol_cost * (1.0 + abs(J))
                and step_norm <= options.tol_step):
            return "converged"
        if iters >= options.max_iter:
            return "max-iter"

        state.mu = update_mu(state.mu, a1 + a2, dnorm, options)
        merit0 = J + state.mu * dnorm
        t0 = time.perf_counter()
        if options.forward == "nonlinear":
            ls = line_search(problem, al, state.trajectory, merit0, dnorm, state.mu, (a1, a2), options,
                             policy=bw.policy)
        else:
            ls = line_search(problem, al, state.trajectory, merit0, dnorm, state.mu, (a1, a2), options,
                             step=(dx, du))
        tm["ls"] += time.perf_counter() - t0

        if not ls.accepted:
            state.reg = max(state.reg * options.reg_factor, options.reg_min)
            if state.reg > options.reg_max:
                return "stalled"
            continue

        a = ls.alpha
        h = report.history
        h["outer"].append(outer)
        h["cost"].append(float(ls.evaluation.cost))
        h["al_cost"].append(float(ls.evaluation.al_cost))
        h["defect_norm"].append(float(ls.evaluation.defect_norm))
        h["defect_norm_before"].append(dnorm)
        h["violation"].append(float(ls.evaluation.violation))
        h["alpha"].append(a)
        h["mu"].append(state.mu)
        h["reg"].append(state.reg)
        h["merit_before"].append(merit0)
        h["merit_after"].append(ls.merit)
        h["expected"].append(a * a1 + a * a * a2)

        state.trajectory = ls.trajectory
        state.defects = ls.evaluation.defects
        state.cost = float(ls.evaluation.cost)
        state.iteration += 1
        report.iterations += 1
        iters += 1
        state.reg = state.reg / options.reg_factor
        if state.reg < options.reg_min:
            state.reg = 0.0


def solve(
    problem: BmpcProblem,
    options: SolverOptions | None = None,
    initial_inputs: np.ndarray | None = None,
) -> tuple[TrajectoryTree, SolverReport]:
    """Solve the branch MPC problem; never raises on non-convergence.

    The initial guess is the nonlinear rollout of ``initial_inputs`` (zeros
    by default), so the first iterate has no defects.
    """
    options = options or SolverOptions()
    report = SolverReport()
    t_start = time.perf_counter()
    traj = nonlinear_rollout(problem, inputs=initial_inputs)
    al = ALState.initial(problem, options.rho0)
    ev = evaluate(problem, al, traj)
    state = SolverState(traj, ev.defects, options.mu0, float(ev.cost), 0, options.reg_init)
    groups = _segment_groups(problem.topology)
    report.timings["setup"] += time.perf_counter() - t_start
    constrained = problem.n_stage_con + problem.n_terminal_con > 0

    status = "max-iter"
    for outer in range(options.max_outer):
        report.outer_iterations = outer + 1
        inner_status = _inner(problem, al, state, options, report, outer, groups)
        ev = evaluate(problem, al, state.trajectory)
        viol = float(ev.violation)
        if inner_status == "stalled":
            status = "stalled"
            break
        if not constrained:
            status = inner_status
            break
        if viol <= options.tol_con and inner_status == "converged":
            status = "converged"
            break
        t0 = time.perf_counter()
        al = al.updated(ev.g_stage, ev.g_terminal, options.rho_growth, options.rho_max)
        report.timings["setup"] += time.perf_counter() - t0

    ev = evaluate(problem, al, state.trajectory)
    report.status = status
    report.cost = float(ev.cost)
    report.al_cost = float(ev.al_cost)
    report.violation = float(ev.violation)
    report.defect_norm = float(ev.defect_norm)
    report.timings["total"] = time.perf_counter() - t_start
    report.rho = al.rho
    report.eta_max = float(max([0.0] + [e.max() for e in (al.eta_stage, al.eta_terminal) if e.size]))
    return state.trajectory, report
