"""Branch MPC problem definitions and the nonlinear tree rollout.

Problems expose batched callbacks: ``nodes`` is an integer array and the
state/input arrays carry one row per entry of ``nodes``. Stage callbacks
receive non-leaf nodes, terminal callbacks leaf nodes. Costs returned by the
callbacks are unweighted; node weights are applied by the solver.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BranchMPCError
from .lqr_scan import FeedbackPolicy
from .tree_core import TrajectoryTree, TreeTopology


class BmpcProblem:
    """Base class; subclasses implement dynamics, costs and constraints."""

    nx: int
    nu: int
    n_stage_con: int = 0
    n_terminal_con: int = 0

    def __init__(self, topology: TreeTopology, x0: np.ndarray):
        self.topology = topology
        self.x0 = np.asarray(x0, dtype=float)

    # dynamics ---------------------------------------------------------------
    def dynamics(self, nodes, x, u):
        raise NotImplementedError

    def dynamics_jacobians(self, nodes, x, u):
        """Return ``(A, B)`` stacks."""
        raise NotImplementedError

    # costs ------------------------------------------------------------------
    def stage_cost(self, nodes, x, u):
        raise NotImplementedError

    def stage_cost_derivatives(self, nodes, x, u):
        """Return ``(lx, lu, lxx, luu, lux)``; ``lux`` has shape ``(m, nu, nx)``."""
        raise NotImplementedError

    def terminal_cost(self, nodes, x):
        raise NotImplementedError

    def terminal_cost_derivatives(self, nodes, x):
        """Return ``(lx, lxx)``."""
        raise NotImplementedError

    # constraints g <= 0 -----------------------------------------------------
    def stage_constraints(self, nodes, x, u):
        return np.zeros((len(nodes), 0))

    def stage_constraint_jacobians(self, nodes, x, u):
        m = len(nodes)
        return np.zeros((m, 0, self.nx)), np.zeros((m, 0, self.nu))

    def terminal_constraints(self, nodes, x):
        return np.zeros((len(nodes), 0))

    def terminal_constraint_jacobians(self, nodes, x):
        return np.zeros((len(nodes), 0, self.nx))


class LinearQuadraticProblem(BmpcProblem):
    """Affine dynamics, quadratic costs and affine constraints per node.

    ``x+ = A_i x + B_i u + b_i`` for every child of node ``i``. Stage cost
    ``1/2 x'Qx + u'Mx + 1/2 u'Ru + q'x + r'u``, terminal cost
    ``1/2 x'Qf x + qf'x``. Optional constraints ``Gx x + Gu u + g0 <= 0``
    (stage) and ``Gfx x + gf0 <= 0`` (leaves). All arrays are indexed by
    node: stage data has ``n_nonleaf`` rows, terminal data ``n_leaves``.
    """

    def __init__(self, topology, x0, A, B, b, Q, R, M, q, r, Qf, qf,
                 Gx=None, Gu=None, g0=None, Gfx=None, gf0=None):
        super().__init__(topology, x0)
        self.A, self.B, self.b = np.asarray(A, float), np.asarray(B, float), np.asarray(b, float)
        self.Q, self.R, self.M = np.asarray(Q, float), np.asarray(R, float), np.asarray(M, float)
        self.q, self.r = np.asarray(q, float), np.asarray(r, float)
        self.Qf, self.qf = np.asarray(Qf, float), np.asarray(qf, float)
        self.nx = self.A.shape[-1]
        self.nu = self.B.shape[-1]
        n_nl = topology.n_nonleaf
        n_lf = topology.n_leaves
        if Gx is None:
            Gx, Gu, g0 = np.zeros((n_nl, 0, self.nx)), np.zeros((n_nl, 0, self.nu)), np.zeros((n_nl, 0))
        if Gfx is None:
            Gfx, gf0 = np.zeros((n_lf, 0, self.nx)), np.zeros((n_lf, 0))
        self.Gx, self.Gu, self.g0 = np.asarray(Gx, float), np.asarray(Gu, float), np.asarray(g0, float)
        self.Gfx, self.gf0 = np.asarray(Gfx, float), np.asarray(gf0, float)
        self.n_stage_con = self.g0.shape[-1]
        self.n_terminal_con = self.gf0.shape[-1]

    def _leaf(self, nodes):
        return np.asarray(nodes) - self.topology.n_nonleaf

    def dynamics(self, nodes, x, u):
        return _mv(self.A[nodes], x) + _mv(self.B[nodes], u) + self.b[nodes]

    def dynamics_jacobians(self, nodes, x, u):
        return self.A[nodes], self.B[nodes]

    def stage_cost(self, nodes, x, u):
        Q, R, M = self.Q[nodes], self.R[nodes], self.M[nodes]
        return (
            0.5 * np.einsum("mi,mij,mj->m", x, Q, x)
            + 0.5 * np.einsum("mi,mij,mj->m", u, R, u)
            + np.einsum("mi,mij,mj->m", u, M, x)
            + np.einsum("mi,mi->m", self.q[nodes], x)
            + np.einsum("mi,mi->m", self.r[nodes], u)
        )

    def stage_cost_derivatives(self, nodes, x, u):
        Q, R, M = self.Q[nodes], self.R[nodes], self.M[nodes]
        lx = _mv(Q, x) + _mv(np.swapaxes(M, -1, -2), u) + self.q[nodes]
        lu = _mv(R, u) + _mv(M, x) + self.r[nodes]
        return lx, lu, Q, R, M

    def terminal_cost(self, nodes, x):
        j = self._leaf(nodes)
        return 0.5 * np.einsum("mi,mij,mj->m", x, self.Qf[j], x) + np.einsum("mi,mi->m", self.qf[j], x)

    def terminal_cost_derivatives(self, nodes, x):
        j = self._leaf(nodes)
        return _mv(self.Qf[j], x) + self.qf[j], self.Qf[j]

    def stage_constraints(self, nodes, x, u):
        return _mv(self.Gx[nodes], x) + _mv(self.Gu[nodes], u) + self.g0[nodes]

    def stage_constraint_jacobians(self, nodes, x, u):
        return self.Gx[nodes], self.Gu[nodes]

    def terminal_constraints(self, nodes, x):
        j = self._leaf(nodes)
        return _mv(self.Gfx[j], x) + self.gf0[j]

    def terminal_constraint_jacobians(self, nodes, x):
        return self.Gfx[self._leaf(nodes)]


def _mv(X, v):
    return (X @ v[..., None])[..., 0]


@dataclass
class ALState:
    """Multipliers (non-negative) and penalty of the augmented Lagrangian."""

    eta_stage: np.ndarray
    eta_terminal: np.ndarray
    rho: float

    @classmethod
    def initial(cls, problem: BmpcProblem, rho: float) -> "ALState":
        topo = problem.topology
        return cls(
            np.zeros((topo.n_nonleaf, problem.n_stage_con)),
            np.zeros((topo.n_leaves, problem.n_terminal_con)),
            float(rho),
        )

    def active(self, g_stage, g_terminal):
        """Diagonals of ``I_rho``: 0 where ``g < 0`` and ``eta == 0``, else rho."""
        i_s = np.where((g_stage < 0.0) & (self.eta_stage == 0.0), 0.0, self.rho)
        i_t = np.where((g_terminal < 0.0) & (self.eta_terminal == 0.0), 0.0, self.rho)
        return i_s, i_t

    def updated(self, g_stage, g_terminal, rho_growth: float, rho_max: float) -> "ALState":
        """Projected multiplier step, then penalty growth."""
        return ALState(
            np.maximum(0.0, self.eta_stage + self.rho * g_stage),
            np.maximum(0.0, self.eta_terminal + self.rho * g_terminal),
            min(self.rho * rho_growth, rho_max),
        )


def nonlinear_rollout(
    problem: BmpcProblem,
    inputs: np.ndarray | None = None,
    policy: FeedbackPolicy | None = None,
    nominal: TrajectoryTree | None = None,
    alpha: float = 1.0,
    x0: np.ndarray | None = None,
) -> TrajectoryTree:
    """Propagate the exact dynamics through the tree, level by level.

    With ``inputs`` the inputs are applied open loop. With ``policy`` and
    ``nominal`` the closed-loop law ``u = u_bar + alpha k + K (x - x_bar)``
    is applied. With neither, zero inputs are used. The result has zero
    defects by construction.
    """
    topo = problem.topology
    n_nl = topo.n_nonleaf
    X = np.zeros((topo.node_count, problem.nx))
    U = np.zeros((n_nl, problem.nu))
    X[0] = problem.x0 if x0 is None else x0
    for k in range(topo.horizon):
        lvl = topo.step_range(k)
        nodes = np.arange(lvl.start, lvl.stop)
        if policy is not None:
            if nominal is None:
                raise ValueError("closed-loop rollout needs the nominal trajectory")
            dx = X[nodes] - nominal.states[nodes]
            U[nodes] = nominal.inputs[nodes] + alpha * policy.k[nodes] + _mv(policy.K[nodes], dx)
        elif inputs is not None:
            U[nodes] = inputs[nodes]
        nxt = topo.step_range(k + 1)
        child = np.arange(nxt.start, nxt.stop)
        par = topo.parent[child]
        with np.errstate(over="ignore", invalid="ignore"):
            X[child] = problem.dynamics(par, X[par], U[par])
        if not np.all(np.isfinite(X[child])):
            bad = child[~np.all(np.isfinite(X[child]), axis=1)][0]
            raise BranchMPCError(f"non-finite state at node {bad} during rollout")
    return TrajectoryTree(X, U)
