import json

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from branchmpc.errors import BranchMPCError
from branchmpc.models_scenarios import (
    LatencySpec,
    ScenarioSpec,
    UnicycleProblem,
    build_intersection_case,
    build_latency_case,
    intersection_counts,
    nonlinear_rollout,
    problem_from_dict,
    problem_to_dict,
    unicycle_step,
    unicycle_step_jacobians,
)
from branchmpc.msilqr_tree import evaluate
from branchmpc.problem import ALState, LinearQuadraticProblem
from branchmpc.tree_core import TrajectoryTree, check_invariants, path_graph

from oracles import central_diff


def test_equilibrium():
    x = np.array([3.0, -1.0, 0.7, 0.0])
    np.testing.assert_array_equal(unicycle_step(x, np.zeros(2), 0.1), x)


def test_straight_motion():
    out = unicycle_step(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(2), 0.1)
    np.testing.assert_allclose(out, [0.1, 0.0, 0.0, 1.0], atol=1e-15)


def test_jacobians_match_finite_differences(rng):
    for _ in range(20):
        x = rng.standard_normal(4) * [5, 5, 2, 4]
        u = rng.standard_normal(2)
        dt = rng.uniform(0.01, 0.3)
        A, B = unicycle_step_jacobians(x, u, dt)
        np.testing.assert_allclose(A, central_diff(lambda z: unicycle_step(z, u, dt), x), rtol=1e-6, atol=1e-8)
        np.testing.assert_allclose(B, central_diff(lambda z: unicycle_step(x, z, dt), u), rtol=1e-6, atol=1e-8)


def test_jacobians_batched(rng):
    x = rng.standard_normal((7, 4))
    u = rng.standard_normal((7, 2))
    A, B = unicycle_step_jacobians(x, u, 0.1)
    A3, B3 = unicycle_step_jacobians(x[3], u[3], 0.1)
    np.testing.assert_allclose(A[3], A3)
    np.testing.assert_allclose(B[3], B3)


def test_rk4_local_error_order():
    x = np.array([0.0, 0.0, 0.3, 2.0])
    u = np.array([0.8, 0.6])

    def exact(dt):
        f = lambda t, z: [z[3] * np.cos(z[2]), z[3] * np.sin(z[2]), u[1], u[0]]  # noqa: E731
        return solve_ivp(f, (0, dt), x, rtol=1e-13, atol=1e-14, method="DOP853").y[:, -1]

    dts = [0.4, 0.2, 0.1]
    errs = [np.linalg.norm(unicycle_step(x, u, dt) - exact(dt)) for dt in dts]
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert rates.min() >= 4.5


def test_intersection_shapes():
    p = build_intersection_case(ScenarioSpec(N=63), 1, 2)
    assert p.topology.n_leaves == 2
    assert p.topology.branchings[0].step == 1
    assert build_intersection_case(ScenarioSpec(N=20), 3, 4).topology.n_leaves == 12
    single = build_intersection_case(ScenarioSpec(N=20), 1, 1)
    assert single.topology.n_leaves == 1 and single.topology.last_branch_step == -1
    for leaves in (2, 4, 6, 9, 12):
        t = build_intersection_case(ScenarioSpec(N=12), *intersection_counts(leaves)).topology
        check_invariants(t)
        np.testing.assert_allclose(t.weight[t.leaves], 1.0 / leaves)


@pytest.mark.parametrize("counts", [(0, 2), (4, 1), (1, 5), (2, 4)])
def test_intersection_rejects_counts(counts):
    with pytest.raises(ValueError):
        build_intersection_case(ScenarioSpec(N=12), *counts)


def test_shared_nodes_see_identical_traffic():
    p = build_intersection_case(ScenarioSpec(N=30, T_sh=1.0), 2, 2)
    kb = p.topology.last_branch_step
    assert kb == 3
    top = p.topology.step_range(kb).stop
    # before the branch every scenario predicts the same traffic; after it they differ
    last = p.topology.step_range(30)
    assert np.ptp(p.obstacles[list(last)], axis=0).max() > 1.0
    assert np.isfinite(p.obstacles[:top]).all()


def test_latency_branch_steps():
    p = build_latency_case(LatencySpec(T_sh1=0.5))
    assert [b.step for b in p.topology.branchings] == [3, 26]
    assert build_latency_case(LatencySpec(T_sh1=2.0)).topology.branchings[1].step == 102
    assert p.topology.n_leaves == 4
    check_invariants(p.topology)
    with pytest.raises(ValueError):
        build_latency_case(LatencySpec(T_sh1=0.05))


def test_collision_sign_far_from_traffic():
    p = build_intersection_case(ScenarioSpec(N=40), 3, 4)
    n = p.topology.node_count
    X = np.zeros((n, 4))
    X[:, 0] = 500.0
    X[:, 1] = p.topology.time_step * 1.0
    X[:, 3] = 1.0
    traj = TrajectoryTree(X, np.zeros((p.topology.n_nonleaf, 2)))
    ev = evaluate(p, ALState.initial(p, 1.0), traj)
    assert (ev.g_stage[:, -2:] < 0).all() and (ev.g_terminal[:, -2:] < 0).all()
    assert ev.violation == 0.0


def test_zero_input_rollout_from_rest():
    topo = path_graph(5)
    p = UnicycleProblem(topo, [1.0, 2.0, 0.3, 0.0], 0.1, np.zeros((6, 4)))
    traj = nonlinear_rollout(p)
    np.testing.assert_array_equal(traj.states, np.tile([1.0, 2.0, 0.3, 0.0], (6, 1)))


def test_rollout_matches_repeated_steps(rng):
    topo = path_graph(10)
    p = UnicycleProblem(topo, [0.0, 0.0, 0.0, 2.0], 0.2, np.zeros((11, 4)))
    U = rng.standard_normal((10, 2))
    traj = nonlinear_rollout(p, inputs=U)
    x = p.x0
    for k in range(10):
        x = unicycle_step(x, U[k], 0.2)
        np.testing.assert_array_equal(traj.states[k + 1], x)


def test_rollout_reports_non_finite_node():
    topo = path_graph(4)
    big = 1e200 * np.ones((4, 1, 1))
    z = np.zeros((4, 1))
    one = np.ones((4, 1, 1))
    p = LinearQuadraticProblem(topo, [1.0], big, one, z, one, one, 0 * one, z, z, one[:1], z[:1])
    with pytest.raises(BranchMPCError, match="node 2"):
        nonlinear_rollout(p)


def test_problem_serialization_roundtrip(rng):
    p = build_intersection_case(ScenarioSpec(N=15), 2, 2)
    q = problem_from_dict(json.loads(json.dumps(problem_to_dict(p))))
    traj = TrajectoryTree(rng.standard_normal((p.topology.node_count, 4)), rng.standard_normal((p.topology.n_nonleaf, 2)))
    al = ALState.initial(p, 3.0)
    a, b = evaluate(p, al, traj), evaluate(q, al, traj)
    assert a.al_cost == b.al_cost
    np.testing.assert_array_equal(a.g_stage, b.g_stage)
    with pytest.raises(ValueError):
        problem_from_dict({"kind": "car"})


def test_spec_json_roundtrip():
    s = ScenarioSpec(N=31, sv1_speeds=(1.0, 2.0))
    assert ScenarioSpec.from_dict(json.loads(json.dumps(s.to_dict()))) == s
    with pytest.raises(ValueError):
        ScenarioSpec(T_sh=20.0)


@pytest.mark.slow
def test_twelve_leaf_intersection_converges():
    from branchmpc.msilqr_tree import SolverOptions, solve

    p = build_intersection_case(ScenarioSpec(N=255), 3, 4)
    _, rep = solve(p, SolverOptions.preset("pmsilqr", max_iter=1000))
    assert rep.status == "converged"
    assert rep.violation <= 1e-4
