import json

import numpy as np
import pytest

from branchmpc.errors import RegularizationRequired
from branchmpc.lqr_scan import ScanElementFwd, forward_scan
from branchmpc.models_scenarios import ScenarioSpec, UnicycleProblem, build_intersection_case
from branchmpc.msilqr_tree import (
    SolverOptions,
    SolverReport,
    backward_pass,
    evaluate,
    expected_change_coeffs,
    line_search,
    linear_rollout,
    linearize,
    merit,
    solve,
    update_mu,
)
from branchmpc.problem import ALState, LinearQuadraticProblem, nonlinear_rollout
from branchmpc.riccati import riccati_path
from branchmpc.tree_core import TrajectoryTree, build_tree, flatten, path_graph

from oracles import (
    central_diff,
    constrained_lq_cvxpy,
    dense_tree_kkt,
    random_lq_problem,
    random_tree_models,
    sequential_tree_rollout,
)

SINGLE_BRANCH = dict(horizon=7, branching_spec=[(3, 2, [0.5, 0.5])])


def _zero_nominal(problem):
    topo = problem.topology
    return TrajectoryTree(np.zeros((topo.node_count, problem.nx)), np.zeros((topo.n_nonleaf, problem.nu)))


# -- linearize ---------------------------------------------------------------


def test_linearize_reproduces_lq_data(rng):
    topo = build_tree(**SINGLE_BRANCH)
    p = random_lq_problem(rng, topo)
    p.b[:] = 0.0
    m = linearize(p, _zero_nominal(p), ALState.initial(p, 10.0))
    w = topo.weight
    n_nl = topo.n_nonleaf
    np.testing.assert_array_equal(m.A, p.A)
    np.testing.assert_allclose(m.Q[:n_nl], p.Q * w[:n_nl, None, None])
    np.testing.assert_allclose(m.Q[n_nl:], p.Qf * w[n_nl:, None, None])
    np.testing.assert_allclose(m.R, p.R * w[:n_nl, None, None])
    np.testing.assert_allclose(m.r, p.r * w[:n_nl, None])
    np.testing.assert_array_equal(m.c, 0.0)


def test_linearize_single_active_constraint():
    topo = path_graph(1)
    one = np.ones((1, 1, 1))
    p = LinearQuadraticProblem(topo, [2.0], one, one, np.zeros((1, 1)), one, one, 0 * one, np.zeros((1, 1)),
                               np.zeros((1, 1)), one, np.zeros((1, 1)), Gx=one, Gu=0 * one, g0=-np.ones((1, 1)))
    nominal = TrajectoryTree(np.array([[2.0], [0.0]]), np.zeros((1, 1)))
    m = linearize(p, nominal, ALState.initial(p, 10.0))
    # g = x - 1 = 1 at x = 2: I_rho = 10, gradient 10 * 1 * 1, Gauss-Newton curvature 10
    assert m.q[0, 0] == pytest.approx(2.0 + 10.0)
    assert m.Q[0, 0, 0] == pytest.approx(1.0 + 10.0)


def test_linearize_rejects_bad_shapes(rng):
    p = random_lq_problem(rng, path_graph(3))
    with pytest.raises(ValueError):
        linearize(p, TrajectoryTree(np.zeros((3, 3)), np.zeros((3, 2))), ALState.initial(p, 1.0))


def test_al_gradient_random_lq(rng):
    topo = build_tree(4, [(1, 2, [0.4, 0.6])])
    p = random_lq_problem(rng, topo, n_con=3)
    al = ALState(np.abs(rng.standard_normal((topo.n_nonleaf, 3))) * (rng.random((topo.n_nonleaf, 3)) < 0.5),
                 np.zeros((topo.n_leaves, 0)), 7.0)
    nominal = TrajectoryTree(rng.standard_normal((topo.node_count, 3)), rng.standard_normal((topo.n_nonleaf, 2)))
    m = linearize(p, nominal, al)
    for i in range(topo.n_nonleaf):
        def J(z, i=i):
            X, U = nominal.states.copy(), nominal.inputs.copy()
            X[i], U[i] = z[:3], z[3:]
            return float(evaluate(p, al, TrajectoryTree(X, U)).al_cost)
        fd = central_diff(J, np.concatenate([nominal.states[i], nominal.inputs[i]]))
        np.testing.assert_allclose(fd, np.concatenate([m.q[i], m.r[i]]), rtol=1e-6, atol=1e-6)


# -- merit and mu ------------------------------------------------------------


def test_merit_hand_example():
    topo = path_graph(1)
    p = LinearQuadraticProblem(
        topo, [0.0, 0.0], np.eye(2)[None], np.zeros((1, 2, 1)), np.zeros((1, 2)), np.zeros((1, 2, 2)),
        2.0 * np.ones((1, 1, 1)), np.zeros((1, 1, 2)), np.zeros((1, 2)), np.zeros((1, 1)),
        np.zeros((1, 2, 2)), np.zeros((1, 2)),
    )
    traj = TrajectoryTree(np.array([[0.0, 0.0], [-0.5, 0.5]]), np.array([[1.0]]))
    assert merit(p, ALState.initial(p, 1.0), traj, 2.0) == pytest.approx(3.0)
    feasible = TrajectoryTree(np.zeros((2, 2)), np.array([[1.0]]))
    assert merit(p, ALState.initial(p, 1.0), feasible, 2.0) == pytest.approx(1.0)


def test_update_mu():
    o = SolverOptions()
    assert update_mu(1.0, 2.0, 0.0, o) == 1.0
    assert update_mu(1.0, 2.0, 1.0, o) == pytest.approx(5.0)
    assert update_mu(10.0, 2.0, 1.0, o) == 10.0


# -- backward pass and rollout ----------------------------------------------


@pytest.mark.parametrize("strategy", ["scan+tree-riccati", "scan+condensed", "tree-riccati"])
def test_path_graph_backward_pass_equals_path_riccati(rng, strategy):
    topo = path_graph(11)
    m = random_tree_models(rng, topo, 3, 2)
    bw = backward_pass(m, strategy)
    assert bw.shared_inputs is None
    _, pols = riccati_path(m.chain_stages(np.arange(12)), m.terminal(11))
    for k in range(11):
        np.testing.assert_allclose(bw.policy.K[k], pols[k].K, rtol=1e-9, atol=1e-10)
        np.testing.assert_allclose(bw.policy.k[k], pols[k].k, rtol=1e-9, atol=1e-10)


@pytest.mark.parametrize(
    "topo",
    [build_tree(**SINGLE_BRANCH), build_tree(6, [(2, 2, None), (4, 2, None)]), build_tree(15, [(3, 3, None), (6, 4, None)]),
     build_tree(5, [(4, 2, None)]), build_tree(5, [(0, 2, None)])],
    ids=["single-branch", "two-stage", "12-leaf-reduced", "last-step", "root"],
)
def test_strategies_match_dense_oracle(rng, topo):
    m = random_tree_models(rng, topo, 3, 2)
    x0 = rng.standard_normal(3)
    Xd, Ud = dense_tree_kkt(m, x0)
    for strategy in ("scan+tree-riccati", "scan+condensed", "tree-riccati"):
        bw = backward_pass(m, strategy, x0)
        X, U = linear_rollout(m, bw.policy, x0)
        np.testing.assert_allclose(X, Xd, atol=1e-8, err_msg=strategy)
        np.testing.assert_allclose(U, Ud, atol=1e-8, err_msg=strategy)


@pytest.mark.slow
def test_strategies_agree_on_large_tree(rng):
    topo = build_tree(255, [(1, 3, None), (2, 4, None)])
    m = random_tree_models(rng, topo, 4, 2)
    x0 = rng.standard_normal(4)
    a = linear_rollout(m, backward_pass(m, "scan+tree-riccati", x0).policy, x0)
    b = linear_rollout(m, backward_pass(m, "scan+condensed", x0).policy, x0)
    for u, v in zip(a, b):
        np.testing.assert_allclose(u, v, atol=1e-6)


def test_backward_pass_propagates_regularization_request(rng):
    topo = build_tree(**SINGLE_BRANCH)
    m = random_tree_models(rng, topo, 2, 1)
    m.R[2] = -50.0
    with pytest.raises(RegularizationRequired):
        backward_pass(m, "tree-riccati")


def test_linear_rollout_matches_sequential(rng):
    topo = build_tree(9, [(2, 2, None), (5, 3, None)])
    m = random_tree_models(rng, topo, 3, 2)
    pol = backward_pass(m).policy
    pol = pol._replace(K=pol.K + 0.1 * rng.standard_normal(pol.K.shape))
    x0 = rng.standard_normal(3)
    dx, du = linear_rollout(m, pol, x0)
    ox, ou = sequential_tree_rollout(m, pol, x0)
    np.testing.assert_allclose(dx, ox, atol=1e-10)
    np.testing.assert_allclose(du, ou, atol=1e-10)
    # the linear dynamics hold on every edge
    par = topo.parent[1:]
    np.testing.assert_allclose(dx[1:], np.einsum("nij,nj->ni", m.A[par], dx[par]) +
                               np.einsum("nij,nj->ni", m.B[par], du[par]) + m.c[1:], atol=1e-10)


def test_linear_rollout_fixed_point_and_path(rng):
    topo = build_tree(**SINGLE_BRANCH)
    m = random_tree_models(rng, topo, 2, 1)
    m.c[:] = 0.0
    pol = backward_pass(m).policy._replace(k=np.zeros((topo.n_nonleaf, 1)))
    dx, du = linear_rollout(m, pol, np.zeros(2))
    assert not dx.any() and not du.any()

    path = path_graph(6)
    m = random_tree_models(rng, path, 2, 1)
    pol = backward_pass(m).policy
    x0 = rng.standard_normal(2)
    dx, _ = linear_rollout(m, pol, x0)
    A = m.A + m.B @ pol.K
    c = m.c[1:] + np.einsum("nij,nj->ni", m.B, pol.k)
    np.testing.assert_allclose(dx[1:], np.array(forward_scan(ScanElementFwd(A, c), x0)), atol=1e-12)


# -- line search ------------------------------------------------------------


def test_line_search_rejects_ascent(rng):
    topo = build_tree(**SINGLE_BRANCH)
    p = random_lq_problem(rng, topo)
    al = ALState.initial(p, 10.0)
    nominal = nonlinear_rollout(p)
    m = linearize(p, nominal, al)
    bw = backward_pass(m)
    dx, du = linear_rollout(m, bw.policy)
    a1, a2 = expected_change_coeffs(m, dx, du)
    assert a1 < 0
    ev = evaluate(p, al, nominal)
    # reverse the Newton step: the merit rises for every alpha
    res = line_search(p, al, nominal, float(ev.al_cost), 0.0, 1.0, (-a1, a2), SolverOptions(), step=(-dx, -du))
    assert not res.accepted


def test_parallel_and_sequential_line_search_agree():
    p = build_intersection_case(ScenarioSpec(N=31), 2, 2)
    a = solve(p, SolverOptions(line_search="parallel", max_iter=1, max_outer=1))[1]
    b = solve(p, SolverOptions(line_search="sequential", max_iter=1, max_outer=1))[1]
    assert a.history["alpha"] == b.history["alpha"]
    assert a.history["merit_after"] == b.history["merit_after"]


# -- solve ------------------------------------------------------------------


@pytest.mark.parametrize("preset", ["pmsilqr", "hypmsilqr", "smsilqr", "sssilqr"])
@pytest.mark.parametrize(
    "topo", [build_tree(**SINGLE_BRANCH), build_tree(6, [(2, 2, None), (4, 2, None)]), path_graph(8)],
    ids=["single-branch", "two-stage", "path"],
)
def test_lq_one_newton_step(rng, preset, topo):
    p = random_lq_problem(rng, topo)
    traj, rep = solve(p, SolverOptions.preset(preset))
    assert rep.status == "converged"
    assert rep.iterations == 1
    assert rep.history["alpha"] == [1.0]
    assert rep.defect_norm <= 1e-10
    # oracle: dense KKT of the exact tree QP
    m = linearize(p, _zero_nominal(p), ALState.initial(p, 1.0))
    Xd, Ud = dense_tree_kkt(m, p.x0)
    np.testing.assert_allclose(traj.states, Xd, atol=1e-7)
    np.testing.assert_allclose(traj.inputs, Ud, atol=1e-7)


def test_constrained_lq_matches_convex_solver(rng):
    topo = build_tree(6, [(1, 2, [0.4, 0.6])])
    p = random_lq_problem(rng, topo, n_con=4)
    traj, rep = solve(p)
    assert rep.status == "converged"
    assert rep.violation <= 1e-4
    X, U, val = constrained_lq_cvxpy(p)
    np.testing.assert_allclose(traj.inputs, U, atol=2e-3)
    assert rep.cost == pytest.approx(val, rel=1e-3)


def test_report_consistency_and_json(rng):
    from branchmpc.bench_cli import check_report

    p = build_intersection_case(ScenarioSpec(N=31), 1, 2)
    opts = SolverOptions()
    _, rep = solve(p, opts)
    assert rep.status == "converged"
    assert check_report(rep, opts) == []
    assert np.all(np.diff(rep.history["mu"]) >= 0)
    d = json.loads(rep.to_json())
    assert len(d["history"]["alpha"]) == rep.iterations
    assert rep.eta_max >= 0.0


def test_iteration_cap_is_reported_not_raised():
    p = build_intersection_case(ScenarioSpec(N=31), 2, 2)
    _, rep = solve(p, SolverOptions(max_iter=2, max_outer=1))
    assert rep.status == "max-iter"
    assert isinstance(rep, SolverReport)


def test_causality_of_tree_inputs():
    p = build_intersection_case(ScenarioSpec(N=31), 2, 2)
    traj, _ = solve(p, SolverOptions(max_iter=5, max_outer=1))
    per_path = [traj.inputs[list(pth.node_sequence[:-1])] for pth in flatten(p.topology)]
    kb = p.topology.last_branch_step
    for u in per_path[1:]:
        np.testing.assert_array_equal(u[: kb + 1], per_path[0][: kb + 1])


def test_multipliers_stay_nonnegative(rng):
    al = ALState(np.zeros((4, 3)), np.zeros((2, 1)), 10.0)
    for _ in range(5):
        al = al.updated(rng.standard_normal((4, 3)), rng.standard_normal((2, 1)), 10.0, 1e8)
        assert (al.eta_stage >= 0).all() and (al.eta_terminal >= 0).all()
    assert al.rho == 1e6


def test_rollout_of_converged_policy_reproduces_solution():
    topo = build_tree(30, [(2, 2, None)])
    t = topo.time_step * 0.1
    ref = np.zeros((topo.node_count, 4))
    ref[:, 0] = 4.0 * t
    ref[:, 1] = np.where(topo.weight < 1.0, np.sign(np.arange(topo.node_count) % 2 - 0.5), 0.0) * 0.2 * t
    ref[:, 3] = 4.0
    p = UnicycleProblem(topo, [0.0, 0.0, 0.0, 3.0], 0.1, ref, a_max=50, omega_max=50, v_max=100)
    traj, rep = solve(p)
    assert rep.status == "converged"
    al = ALState.initial(p, 10.0)
    pol = backward_pass(linearize(p, traj, al)).policy
    again = nonlinear_rollout(p, policy=pol, nominal=traj)
    np.testing.assert_allclose(again.states, traj.states, atol=1e-6)


def test_options_roundtrip_and_validation():
    o = SolverOptions.from_json(json.dumps({"solver": "hypmsilqr", "beta": 1e-3}))
    assert o.backward == "scan+condensed" and o.beta == 1e-3
    assert SolverOptions.from_dict(o.to_dict()) == o
    with pytest.raises(ValueError):
        SolverOptions.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        SolverOptions(alphas=(0.5, 1.0))
    with pytest.raises(ValueError):
        SolverOptions.preset("foo")
