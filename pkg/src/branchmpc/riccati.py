"""Sequential Riccati recursion on paths and on scenario trees."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .errors import RegularizationRequired
from .lqr_scan import FeedbackPolicy, StageModel, ValueFunction, stack_stages
from .tree_core import TreeTopology


@dataclass
class TreeStageModels:
    """LQR-Tree data indexed by node.

    Costs are already scaled by node weight. ``A, B, R, M, r`` have one row
    per non-leaf node; ``Q, q`` one row per node (leaf rows are the terminal
    cost); ``c[i]`` is the defect on the edge entering node ``i`` (row 0 is
    unused and kept at zero).
    """

    topology: TreeTopology
    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    M: np.ndarray
    q: np.ndarray
    r: np.ndarray

    @property
    def nx(self) -> int:
        return self.Q.shape[-1]

    @property
    def nu(self) -> int:
        return self.R.shape[-1]

    def stage(self, i: int, child: int) -> StageModel:
        return StageModel(
            self.A[i], self.B[i], self.c[child], self.Q[i], self.R[i], self.M[i], self.q[i], self.r[i]
        )

    def terminal(self, leaf: int) -> ValueFunction:
        return ValueFunction(self.Q[leaf], self.q[leaf])

    def chain_stages(self, chain: Sequence[int] | np.ndarray) -> StageModel:
        """Stacked stages along ``chain`` (last node excluded as a stage).

        ``chain`` may be 2-D, ``(length, batch)``, to stack several
        equal-length chains side by side.
        """
        chain = np.asarray(chain)
        src, dst = chain[:-1], chain[1:]
        return StageModel(
            self.A[src], self.B[src], self.c[dst], self.Q[src], self.R[src], self.M[src], self.q[src], self.r[src]
        )

    def regularized(self, lam: float) -> "TreeStageModels":
        """Copy with ``lam*I`` added to every ``R`` and to the leaf ``Q``."""
        if lam == 0.0:
            return self
        n_nl = self.topology.n_nonleaf
        R = self.R + lam * np.eye(self.nu)
        Q = self.Q.copy()
        Q[n_nl:] += lam * np.eye(self.nx)
        return replace(self, R=R, Q=Q)


def _mT(X):
    return np.swapaxes(X, -1, -2)


def riccati_step(stage_costs, Pt, pt, where=None):
    """One Bellman backup with the continuation already summed.

    ``stage_costs`` is ``(A, B, Q, R, M, q, r)``. ``Pt`` is the sum of the
    successor value Hessians and ``pt`` the sum of ``p_j + P_j c_j``, so a
    branching node and a chain node run the same arithmetic.
    """
    A, B, Q, R, M, q, r = stage_costs
    BtP = B.T @ Pt
    Quu = R + BtP @ B
    Quu = 0.5 * (Quu + Quu.T)
    Qux = M + BtP @ A
    qu = r + B.T @ pt
    try:
        L = np.linalg.cholesky(Quu)
    except np.linalg.LinAlgError:
        raise RegularizationRequired(
            f"R + B'PB is not positive definite at {where}", stage=where
        ) from None
    sol = np.linalg.solve(L.T, np.linalg.solve(L, np.column_stack([Qux, qu])))
    K = -sol[:, :-1]
    k = -sol[:, -1]
    P = Q + A.T @ Pt @ A + Qux.T @ K
    P = 0.5 * (P + P.T)
    p = q + A.T @ pt + Qux.T @ k
    return P, p, K, k


def riccati_path(
    stages: Sequence[StageModel] | StageModel, terminal: ValueFunction
) -> tuple[list[ValueFunction], list[FeedbackPolicy]]:
    """Backward recursion for one path; values ``V_0..V_N``, policies ``0..N-1``."""
    st = stack_stages(stages)
    N = st.A.shape[0]
    P, p = np.asarray(terminal.P, float), np.asarray(terminal.p, float)
    values = [ValueFunction(P, p)]
    policies = []
    for k in range(N - 1, -1, -1):
        P, p, K, kk = riccati_step(
            (st.A[k], st.B[k], st.Q[k], st.R[k], st.M[k], st.q[k], st.r[k]), P, p + P @ st.c[k], where=k
        )
        values.append(ValueFunction(P, p))
        policies.append(FeedbackPolicy(K, kk))
    return values[::-1], policies[::-1]


def riccati_tree(
    models: TreeStageModels,
    boundary_values: Mapping[int, ValueFunction] | None = None,
) -> tuple[ValueFunction, FeedbackPolicy]:
    """Leaf-to-root Riccati sweep over the tree.

    At a branching node the children's values are summed before the gain is
    formed; their costs already carry the branch weights, so the sum is the
    expected continuation. Returns stacked node-indexed arrays: values for
    all nodes, policies for non-leaf nodes.

    With ``boundary_values`` (all nodes at one step ``s``) only nodes above
    ``s`` are solved; entries that were not computed are NaN.
    """
    topo = models.topology
    nx, nu = models.nx, models.nu
    n_nodes, n_nl = topo.node_count, topo.n_nonleaf
    P = np.full((n_nodes, nx, nx), np.nan)
    p = np.full((n_nodes, nx), np.nan)
    K = np.full((n_nl, nu, nx), np.nan)
    k = np.full((n_nl, nu), np.nan)

    if boundary_values is None:
        P[n_nl:] = models.Q[n_nl:]
        p[n_nl:] = models.q[n_nl:]
        top = n_nl
    else:
        steps = {int(topo.time_step[j]) for j in boundary_values}
        if len(steps) != 1:
            raise ValueError("boundary values must all sit at one time step")
        (s,) = steps
        rng = topo.step_range(s)
        if set(boundary_values) != set(rng):
            raise ValueError(f"boundary values must cover every node at step {s}")
        for j, v in boundary_values.items():
            P[j], p[j] = v
        top = rng.start

    # reverse index order visits children before parents
    for i in range(top - 1, -1, -1):
        ch = topo.children[i]
        Pt = np.zeros((nx, nx))
        pt = np.zeros(nx)
        for j in ch:
            Pt += P[j]
            pt += p[j] + P[j] @ models.c[j]
        P[i], p[i], K[i], k[i] = riccati_step(
            (models.A[i], models.B[i], models.Q[i], models.R[i], models.M[i], models.q[i], models.r[i]),
            Pt,
            pt,
            where=i,
        )
    return ValueFunction(P, p), FeedbackPolicy(K, k)
