"""Parallel-scan solution of a single time-varying LQR problem.

The backward pass scans conditional value elements ``(P, p, C, A, c)``
describing the optimal cost of steering ``x_k`` to a fixed ``x_i``::

    V_{k->i}(x_k, x_i) = max_lam  1/2 x_k' P x_k + p' x_k
                                  - 1/2 lam' C lam + lam' (x_i - A x_k - c)

A value function ``(P, p)`` is embedded as the element ``(P, p, 0, 0, 0)``,
so the suffix scan over ``[e_0, ..., e_{N-1}, V_N]`` returns every ``V_k``.
The forward pass scans closed-loop affine maps ``x -> A x + c``.

All element types are named tuples of arrays; a leading axis (or several)
turns them into stacks, and every function here accepts stacks.
"""
from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np

from . import _kernels
from .errors import FactorizationError, RegularizationRequired, SingularBlockError
from .scan import associative_scan


class StageModel(NamedTuple):
    """Linear dynamics ``x+ = A x + B u + c`` and the quadratic stage cost
    ``1/2 x'Qx + u'Mx + 1/2 u'Ru + q'x + r'u``."""

    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    M: np.ndarray
    q: np.ndarray
    r: np.ndarray


class ScanElementBwd(NamedTuple):
    P: np.ndarray
    p: np.ndarray
    C: np.ndarray
    A: np.ndarray
    c: np.ndarray


class ValueFunction(NamedTuple):
    """Quadratic value ``1/2 x'Px + p'x``; the constant is not tracked."""

    P: np.ndarray
    p: np.ndarray


class FeedbackPolicy(NamedTuple):
    """Affine law ``u = K x + k``."""

    K: np.ndarray
    k: np.ndarray


class ScanElementFwd(NamedTuple):
    A: np.ndarray
    c: np.ndarray


def stack_stages(stages: Sequence[StageModel] | StageModel) -> StageModel:
    """Stack a list of stages along a new leading axis (no-op for stacks)."""
    if isinstance(stages, StageModel):
        return stages
    return StageModel(*(np.stack(f) for f in zip(*stages)))


def _mT(X):
    return np.swapaxes(X, -1, -2)


def _mv(X, v):
    return (X @ v[..., None])[..., 0]


def _chol_check(S, what, error=FactorizationError):
    """Raise ``error`` naming the first stage where ``S`` is not PD."""
    try:
        np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        flat = S.reshape((-1,) + S.shape[-2:])
        for idx in range(flat.shape[0]):
            try:
                np.linalg.cholesky(flat[idx])
            except np.linalg.LinAlgError:
                stage = np.unravel_index(idx, S.shape[:-2]) if S.ndim > 2 else None
                if stage is not None and len(stage) == 1:
                    stage = int(stage[0])
                raise error(f"{what} is not positive definite at stage {stage}", stage=stage) from None
        raise


# ---------------------------------------------------------------------------
# backward pass


def init_bwd_element(stage: StageModel) -> ScanElementBwd:
    """One-step conditional value element of a stage (or a stack of stages)."""
    A, B, c, Q, R, M, q, r = stage
    _chol_check(R, "R")
    n_x = M.shape[-1]
    X = np.linalg.solve(R, np.concatenate([M, r[..., None], _mT(B)], axis=-1))
    RiM, Rir, RiBT = X[..., :n_x], X[..., n_x], X[..., n_x + 1 :]
    P = Q - _mT(M) @ RiM
    P = 0.5 * (P + _mT(P))
    C = B @ RiBT
    C = 0.5 * (C + _mT(C))
    return ScanElementBwd(
        P=P,
        p=q - _mv(_mT(M), Rir),
        C=C,
        A=A - B @ RiM,
        c=c - _mv(B, Rir),
    )


def value_as_element(value: ValueFunction) -> ScanElementBwd:
    P, p = value
    n = P.shape[-1]
    return ScanElementBwd(P, p, np.zeros_like(P), np.zeros_like(P), np.zeros(p.shape[:-1] + (n,)))


def _flat(x, tail):
    return np.ascontiguousarray(x).reshape((-1,) + tail)


def _combine_bwd_stacks(first, second, spans=None):
    n = first[0].shape[-1]
    lead = first[0].shape[:-2]
    mat, vec = (n, n), (n,)
    tails = (mat, vec, mat, mat, vec)
    args = [_flat(x, t) for x, t in zip(first, tails)] + [_flat(x, t) for x, t in zip(second, tails)]
    try:
        out = _kernels.combine_bwd(*args)
    except SingularBlockError as err:
        if spans is None:
            raise FactorizationError("I + P C is singular in backward combination") from None
        s1, s2 = spans
        per = int(np.prod(lead[1:], dtype=int)) if len(lead) > 1 else 1
        pos = err.index // per
        kji = (int(s1[pos, 0]), int(s1[pos, 1]), int(s2[pos, 1]))
        raise FactorizationError(
            f"I + P C singular combining {kji[0]}->{kji[1]} with {kji[1]}->{kji[2]}", indices=kji
        ) from None
    return ScanElementBwd(*(o.reshape(lead + t) for o, t in zip(out, tails)))


def combine_bwd(first: ScanElementBwd, second: ScanElementBwd) -> ScanElementBwd:
    """``V_{k->i} = min_{x_j} V_{k->j} + V_{j->i}`` for elements (or stacks).

    A single LU factorization of ``I + P_{j,i} C_{k,j}`` serves both inverses.
    """
    first = ScanElementBwd(*(np.asarray(x, dtype=float) for x in first))
    second = ScanElementBwd(*(np.asarray(x, dtype=float) for x in second))
    if first.P.ndim == 2:
        out = _combine_bwd_stacks(
            ScanElementBwd(*(x[None] for x in first)), ScanElementBwd(*(x[None] for x in second))
        )
        return ScanElementBwd(*(x[0] for x in out))
    return _combine_bwd_stacks(first, second)


def combine_with_terminal(elem: ScanElementBwd, terminal: ValueFunction) -> ValueFunction:
    """``V_k = min_{x_i} V_{k->i}(x_k, x_i) + V_i(x_i)``."""
    out = combine_bwd(elem, value_as_element(terminal))
    return ValueFunction(out.P, out.p)


def _bwd_op(a, b):
    *ea, sa = a
    *eb, sb = b
    out = _combine_bwd_stacks(ScanElementBwd(*ea), ScanElementBwd(*eb), spans=(sa, sb))
    spans = np.stack([sa[:, 0], sb[:, 1]], axis=1)
    return (*out, spans)


def backward_scan_stacked(
    stages: StageModel, terminal: ValueFunction, method: str = "blelloch"
) -> ValueFunction:
    """Scan a stacked stage model; returns stacked ``(P, p)`` for steps 0..N.

    Extra axes after the leading stage axis are independent problems solved
    in the same batched kernel calls.
    """
    elems = init_bwd_element(stages)
    term = value_as_element(ValueFunction(np.asarray(terminal.P, float), np.asarray(terminal.p, float)))
    N = elems.P.shape[0]
    seq = tuple(np.concatenate([e, t[None]], axis=0) for e, t in zip(elems, term))
    spans = np.stack([np.arange(N + 1), np.arange(1, N + 2)], axis=1)
    out = associative_scan(_bwd_op, (*seq, spans), reverse=True, method=method)
    return ValueFunction(out[0], out[1])


def backward_scan(
    stages: Sequence[StageModel] | StageModel, terminal: ValueFunction, method: str = "blelloch"
) -> list[ValueFunction]:
    """Value functions ``V_0 .. V_N`` of the LQR defined by ``stages``.

    ``method`` is ``"blelloch"`` (tree-shaped reduction) or ``"sequential"``
    (right-to-left fold); both use the same combinator.
    """
    stacked = stack_stages(stages)
    if stacked.A.shape[0] < 1:
        raise ValueError("need at least one stage")
    P, p = backward_scan_stacked(stacked, terminal, method=method)
    return [ValueFunction(P[k], p[k]) for k in range(P.shape[0])]


def feedback_from_values(stage: StageModel, next_value: ValueFunction) -> FeedbackPolicy:
    """Gain and affine term of step ``k`` given ``V_{k+1}``; stacks allowed."""
    A, B, c, Q, R, M, q, r = stage
    P, p = next_value
    BtP = _mT(B) @ P
    Quu = R + BtP @ B
    Quu = 0.5 * (Quu + _mT(Quu))
    _chol_check(Quu, "R + B'PB", error=RegularizationRequired)
    Qux = M + BtP @ A
    qu = r + _mv(_mT(B), p + _mv(P, c))
    sol = np.linalg.solve(Quu, np.concatenate([Qux, qu[..., None]], axis=-1))
    return FeedbackPolicy(K=-sol[..., :-1], k=-sol[..., -1])


# ---------------------------------------------------------------------------
# forward pass


def init_fwd_element(stage: StageModel, policy: FeedbackPolicy) -> ScanElementFwd:
    return ScanElementFwd(
        A=stage.A + stage.B @ policy.K,
        c=stage.c + _mv(stage.B, policy.k),
    )


def _combine_fwd_stacks(first, second):
    n = first[0].shape[-1]
    lead = first[0].shape[:-2]
    A, c = _kernels.combine_fwd(
        _flat(first[0], (n, n)), _flat(first[1], (n,)), _flat(second[0], (n, n)), _flat(second[1], (n,))
    )
    return ScanElementFwd(A.reshape(lead + (n, n)), c.reshape(lead + (n,)))


def combine_fwd(first: ScanElementFwd, second: ScanElementFwd) -> ScanElementFwd:
    """Affine composition: ``first`` maps ``k->j``, ``second`` maps ``j->i``."""
    first = ScanElementFwd(*(np.asarray(x, dtype=float) for x in first))
    second = ScanElementFwd(*(np.asarray(x, dtype=float) for x in second))
    if first.A.ndim == 2:
        out = _combine_fwd_stacks(
            ScanElementFwd(*(x[None] for x in first)), ScanElementFwd(*(x[None] for x in second))
        )
        return ScanElementFwd(out.A[0], out.c[0])
    return _combine_fwd_stacks(first, second)


def forward_scan_stacked(elements: ScanElementFwd, x0: np.ndarray, method: str = "blelloch") -> np.ndarray:
    """States ``x_1..x_N`` as an ``(N, n_x)`` array."""
    A, c = associative_scan(_combine_fwd_stacks, tuple(elements), method=method)
    return _mv(A, np.asarray(x0, float)) + c


def forward_scan(
    elements: Sequence[ScanElementFwd] | ScanElementFwd, x0: np.ndarray, method: str = "blelloch"
) -> list[np.ndarray]:
    if not isinstance(elements, ScanElementFwd):
        elements = ScanElementFwd(*(np.stack(f) for f in zip(*elements)))
    if elements.A.shape[0] < 1:
        raise ValueError("need at least one element")
    X = forward_scan_stacked(elements, x0, method=method)
    return list(X)


def solve_lqr(
    stages: Sequence[StageModel] | StageModel,
    terminal: ValueFunction,
    x0: np.ndarray,
    method: str = "blelloch",
):
    """Backward scan, feedback laws and forward scan in one call.

    Returns ``(values, policy, states, inputs)`` with stacked arrays:
    states ``(N+1, n_x)``, inputs ``(N, n_u)``.
    """
    st = stack_stages(stages)
    P, p = backward_scan_stacked(st, terminal, method=method)
    pol = feedback_from_values(st, ValueFunction(P[1:], p[1:]))
    X = forward_scan_stacked(init_fwd_element(st, pol), x0, method=method)
    states = np.concatenate([np.asarray(x0, float)[None], X], axis=0)
    inputs = _mv(pol.K, states[:-1]) + pol.k
    return ValueFunction(P, p), pol, states, inputs
