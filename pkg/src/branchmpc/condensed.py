"""Condensed (dense) LQR on paths and trees.

States are eliminated through the prediction identity
``x = Phi x0 + S u + F c`` so that only inputs remain. Tree problems are
condensed path by path and reassembled with the sharing map ``Gamma``,
which copies each tree input into every path through that node:
``u_stacked = Gamma u_tree`` and ``H_tree = Gamma' blkdiag(H^i) Gamma``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Mapping, NamedTuple, Sequence

import numpy as np
import scipy.linalg

from .errors import FactorizationError
from .lqr_scan import StageModel, ValueFunction, stack_stages
from .riccati import TreeStageModels
from .scan import associative_scan
from .tree_core import flatten, truncated_paths


class PredictionMatrices(NamedTuple):
    Phi: np.ndarray
    S: np.ndarray
    F: np.ndarray


class CondensedQP(NamedTuple):
    """``min 1/2 u'Hu + h'u``."""

    H: np.ndarray
    h: np.ndarray


def _matprod_op(a, b):
    # a is the earlier map; the later one multiplies from the left
    return (b[0] @ a[0],)


def build_prediction(stages: Sequence[StageModel] | StageModel) -> PredictionMatrices:
    st = stack_stages(stages)
    N, nx, nu = st.A.shape[0], st.A.shape[-1], st.B.shape[-1]
    eye = np.eye(nx)

    (phi,) = associative_scan(_matprod_op, (np.concatenate([eye[None], st.A]),))

    # Block row r of F_{p,0} holds A_{j+1} in columns j < r-1 and I elsewhere;
    # a reverse scan along each row gives the products A_{r-1}..A_{j+1}.
    cols = np.arange(N)
    rows = np.arange(1, N + 1)
    F0 = np.broadcast_to(eye, (N, N, nx, nx)).copy()  # (col, row, nx, nx)
    shifted = np.concatenate([st.A[1:], eye[None]])  # A_{j+1}; the last column never uses it
    use = cols[:, None] < rows[None, :] - 1
    F0[use] = np.broadcast_to(shifted[:, None], (N, N, nx, nx))[use]
    (F1,) = associative_scan(_matprod_op, (F0,), reverse=True)
    F1[cols[:, None] >= rows[None, :]] = 0.0  # adding F_{p,c}

    F = np.zeros((N + 1, nx, N, nx))
    F[1:] = np.transpose(F1, (1, 2, 0, 3))
    S = np.einsum("aibj,bjk->aibk", F, st.B)
    return PredictionMatrices(
        Phi=phi.reshape((N + 1) * nx, nx),
        S=S.reshape((N + 1) * nx, N * nu),
        F=F.reshape((N + 1) * nx, N * nx),
    )


def condense(
    stages: Sequence[StageModel] | StageModel,
    terminal: ValueFunction,
    x0: np.ndarray,
    prediction: PredictionMatrices | None = None,
) -> CondensedQP:
    st = stack_stages(stages)
    N, nx, nu = st.A.shape[0], st.A.shape[-1], st.B.shape[-1]
    pred = prediction if prediction is not None else build_prediction(st)
    S = pred.S.reshape(N + 1, nx, N * nu)
    e = (pred.Phi @ np.asarray(x0, float) + pred.F @ st.c.reshape(-1)).reshape(N + 1, nx)

    Qb = np.concatenate([st.Q, np.asarray(terminal.P, float)[None]])
    qb = np.concatenate([st.q, np.asarray(terminal.p, float)[None]])
    QS = np.einsum("kij,kjm->kim", Qb, S)
    MS = np.einsum("kuj,kjm->kum", st.M, S[:N]).reshape(N * nu, N * nu)

    H = np.einsum("kim,kin->mn", S, QS) + MS + MS.T
    H += scipy.linalg.block_diag(*st.R)
    H = 0.5 * (H + H.T)

    Qe = np.einsum("kij,kj->ki", Qb, e) + qb
    h = np.einsum("kim,ki->m", S, Qe) + np.einsum("kuj,kj->ku", st.M, e[:N]).reshape(-1) + st.r.reshape(-1)
    return CondensedQP(H, h)


@dataclass(frozen=True)
class SharingMap:
    """Index form of ``Gamma``: stacked slot ``(path, step)`` -> tree node.

    Tree input slots are the nodes ``0..n_tree-1`` (breadth-first order puts
    every node above the cut there).
    """

    slot_node: np.ndarray  # (n_paths, n_steps)
    n_tree: int
    nu: int

    @property
    def n_paths(self) -> int:
        return self.slot_node.shape[0]

    def matrix(self) -> np.ndarray:
        """Dense ``Gamma`` with ``u_stacked = Gamma @ u_tree``."""
        nu = self.nu
        nodes = self.slot_node.reshape(-1)
        G = np.zeros((nodes.size * nu, self.n_tree * nu))
        for s, node in enumerate(nodes):
            G[s * nu:(s + 1) * nu, node * nu:(node + 1) * nu] = np.eye(nu)
        return G

    def expand(self, u_tree: np.ndarray) -> np.ndarray:
        u = np.asarray(u_tree).reshape(self.n_tree, self.nu)
        return u[self.slot_node.reshape(-1)].reshape(-1)

    def reduce(self, v: np.ndarray) -> np.ndarray:
        """``Gamma' v`` for a stacked vector ``v``."""
        out = np.zeros((self.n_tree, self.nu))
        np.add.at(out, self.slot_node.reshape(-1), np.asarray(v).reshape(-1, self.nu))
        return out.reshape(-1)

    def multiplicity(self) -> np.ndarray:
        return np.bincount(self.slot_node.reshape(-1), minlength=self.n_tree)


def condense_tree(
    models: TreeStageModels,
    x0: np.ndarray,
    boundary_values: Mapping[int, ValueFunction] | None = None,
) -> tuple[CondensedQP, SharingMap]:
    """Condense the tree above a cut and assemble the tree QP.

    Without ``boundary_values`` the whole tree is condensed and the leaf
    costs terminate each path. Otherwise every path ends at one node of the
    boundary step and uses that node's value as terminal cost. Costs of a
    shared node are divided by the number of paths through it, so the
    assembled objective counts each node once.
    """
    topo = models.topology
    if boundary_values is None:
        paths = [pth.node_sequence for pth in flatten(topo)]
        terminals = {seq[-1]: models.terminal(seq[-1]) for seq in paths}
    else:
        steps = {int(topo.time_step[j]) for j in boundary_values}
        if len(steps) != 1:
            raise ValueError("boundary values must all sit at one time step")
        (s,) = steps
        if s < 1:
            raise ValueError("nothing to condense above step 0")
        paths = [pth.node_sequence for pth in truncated_paths(topo, s)]
        if {seq[-1] for seq in paths} != set(boundary_values):
            raise ValueError(f"boundary values must cover every node at step {s}")
        terminals = dict(boundary_values)

    slot_node = np.asarray([seq[:-1] for seq in paths], dtype=int)
    n_tree = int(slot_node.max()) + 1
    mult = np.bincount(slot_node.reshape(-1), minlength=n_tree).astype(float)
    nu = models.nu
    n_steps = slot_node.shape[1]

    H_tree = np.zeros((n_tree, nu, n_tree, nu))
    h_tree = np.zeros((n_tree, nu))
    for seq in paths:
        src = np.asarray(seq[:-1])
        dst = np.asarray(seq[1:])
        w = (1.0 / mult[src])
        stages = StageModel(
            models.A[src],
            models.B[src],
            models.c[dst],
            models.Q[src] * w[:, None, None],
            models.R[src] * w[:, None, None],
            models.M[src] * w[:, None, None],
            models.q[src] * w[:, None],
            models.r[src] * w[:, None],
        )
        qp = condense(stages, terminals[seq[-1]], x0)
        Hb = qp.H.reshape(n_steps, nu, n_steps, nu)
        # Gamma' blkdiag(H^i) Gamma: scatter each path's blocks onto its nodes
        H_tree[np.ix_(src, np.arange(nu), src, np.arange(nu))] += Hb
        np.add.at(h_tree, src, qp.h.reshape(n_steps, nu))

    H = H_tree.reshape(n_tree * nu, n_tree * nu)
    return CondensedQP(0.5 * (H + H.T), h_tree.reshape(-1)), SharingMap(slot_node, n_tree, nu)


def solve_dense(qp: CondensedQP) -> np.ndarray:
    """Minimizer ``-H^{-1} h`` by Cholesky, falling back to pivoted LU."""
    H, h = qp
    try:
        factor = scipy.linalg.cho_factor(H, lower=True, check_finite=False)
        return -scipy.linalg.cho_solve(factor, h, check_finite=False)
    except np.linalg.LinAlgError:
        pass
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(H, check_finite=False)
    if not np.all(np.isfinite(lu)) or np.any(np.diag(lu) == 0.0):
        raise FactorizationError("condensed Hessian is singular; regularize")
    return -scipy.linalg.lu_solve((lu, piv), h, check_finite=False)
