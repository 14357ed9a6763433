"""Numpy implementation of the batched scan combinators.

Every function takes stacked arrays whose leading axis is the batch and
returns freshly allocated stacked arrays. Used when the compiled module is
unavailable or disabled.
"""
import numpy as np

from ..errors import SingularBlockError

BACKEND = "python"


def _first_singular(G):
    for b in range(G.shape[0]):
        try:
            np.linalg.inv(G[b])
        except np.linalg.LinAlgError:
            return b
    return 0


def combine_bwd(P1, p1, C1, A1, c1, P2, p2, C2, A2, c2):
    """Combine conditional value elements ``k->j`` and ``j->i`` into ``k->i``."""
    n = P1.shape[-1]
    G = np.eye(n) + P2 @ C1  # (I + P_ji C_kj)
    try:
        Gi = np.linalg.inv(G)
    except np.linalg.LinAlgError:
        raise SingularBlockError(_first_singular(G), "I + P C") from None
    GiT = np.swapaxes(Gi, -1, -2)
    A1T = np.swapaxes(A1, -1, -2)
    A2T = np.swapaxes(A2, -1, -2)

    left = A1T @ Gi
    P = left @ P2 @ A1 + P1
    p = (left @ (p2 + (P2 @ c1[..., None])[..., 0])[..., None])[..., 0] + p1

    right = A2 @ GiT
    A = right @ A1
    c = (right @ (c1 - (C1 @ p2[..., None])[..., 0])[..., None])[..., 0] + c2
    C = right @ C1 @ A2T + C2

    P = 0.5 * (P + np.swapaxes(P, -1, -2))
    C = 0.5 * (C + np.swapaxes(C, -1, -2))
    return P, p, C, A, c


def combine_fwd(A1, c1, A2, c2):
    """Compose affine maps: apply ``(A1, c1)`` first, then ``(A2, c2)``."""
    return A2 @ A1, (A2 @ c1[..., None])[..., 0] + c2
