"""Unicycle vehicle model and the intersection and latency scenario trees.

State ``(px, py, psi, v)``, input ``(a, omega)``. The step map is one RK4
step; its Jacobians are differentiated through the integrator by hand.
Surrounding vehicles keep their initial speed until the branching time and
then approach their scenario's target speed with a first-order lag.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from .problem import BmpcProblem, nonlinear_rollout
from .tree_core import TreeTopology, build_tree, flatten, tree_from_dict

__all__ = [
    "unicycle_step",
    "unicycle_step_jacobians",
    "UnicycleProblem",
    "ScenarioSpec",
    "LatencySpec",
    "branch_step",
    "intersection_counts",
    "build_intersection_case",
    "build_latency_case",
    "nonlinear_rollout",
    "problem_to_dict",
    "problem_from_dict",
]

NX, NU = 4, 2
FAR = 1e6  # placeholder obstacle position / stop line that never binds


def _rhs(x, u):
    psi, v = x[..., 2], x[..., 3]
    return np.stack([v * np.cos(psi), v * np.sin(psi), u[..., 1], u[..., 0]], axis=-1)


def _rhs_jac(x):
    psi, v = x[..., 2], x[..., 3]
    J = np.zeros(x.shape[:-1] + (NX, NX))
    c, s = np.cos(psi), np.sin(psi)
    J[..., 0, 2] = -v * s
    J[..., 0, 3] = c
    J[..., 1, 2] = v * c
    J[..., 1, 3] = s
    return J


_FU = np.array([[0.0, 0.0], [0.0, 0.0], [0.0, 1.0], [1.0, 0.0]])


def unicycle_step(x, u, dt: float):
    """One RK4 step of ``(v cos psi, v sin psi, omega, a)``; batched over leading axes."""
    x = np.asarray(x, float)
    u = np.asarray(u, float)
    k1 = _rhs(x, u)
    k2 = _rhs(x + 0.5 * dt * k1, u)
    k3 = _rhs(x + 0.5 * dt * k2, u)
    k4 = _rhs(x + dt * k3, u)
    return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def unicycle_step_jacobians(x, u, dt: float):
    """``(A, B)`` of :func:`unicycle_step` by the chain rule through each stage."""
    x = np.asarray(x, float)
    u = np.asarray(u, float)
    eye = np.eye(NX)
    k1 = _rhs(x, u)
    x2 = x + 0.5 * dt * k1
    k2 = _rhs(x2, u)
    x3 = x + 0.5 * dt * k2
    k3 = _rhs(x3, u)
    x4 = x + dt * k3

    F1, F2, F3, F4 = _rhs_jac(x), _rhs_jac(x2), _rhs_jac(x3), _rhs_jac(x4)
    k1x, k1u = F1, np.broadcast_to(_FU, x.shape[:-1] + (NX, NU))
    k2x = F2 @ (eye + 0.5 * dt * k1x)
    k2u = F2 @ (0.5 * dt * k1u) + _FU
    k3x = F3 @ (eye + 0.5 * dt * k2x)
    k3u = F3 @ (0.5 * dt * k2u) + _FU
    k4x = F4 @ (eye + dt * k3x)
    k4u = F4 @ (dt * k3u) + _FU
    A = eye + dt / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
    B = dt / 6.0 * (k1u + 2.0 * k2u + 2.0 * k3u + k4u)
    return A, B


class UnicycleProblem(BmpcProblem):
    """Reference tracking with input bounds, speed bounds, keep-out discs and
    an optional stop line ``px <= px_max`` per node.

    Stage constraints, in order: ``a <= a_max``, ``-a <= a_max``,
    ``omega <= omega_max``, ``-omega <= omega_max``, ``-v <= 0``,
    ``v <= v_max``, ``px <= px_max``, then one
    ``r^2 - |p - o_j|^2 <= 0`` per obstacle. Leaves keep the last five kinds.
    """

    nx = NX
    nu = NU

    def __init__(
        self,
        topology: TreeTopology,
        x0,
        dt: float,
        x_ref,
        obstacles=None,
        px_max=None,
        Q=(1.0, 1.0, 0.1, 0.1),
        R=(0.5, 0.5),
        Qf=None,
        a_max: float = 3.0,
        omega_max: float = 0.5,
        v_max: float = 15.0,
        radius: float = 3.0,
    ):
        super().__init__(topology, x0)
        n = topology.node_count
        self.dt = float(dt)
        self.x_ref = np.asarray(x_ref, float).reshape(n, NX)
        obstacles = np.zeros((n, 0, 2)) if obstacles is None else np.asarray(obstacles, float)
        self.obstacles = obstacles.reshape(n, -1, 2)
        self.px_max = np.full(n, FAR) if px_max is None else np.asarray(px_max, float).reshape(n)
        self.Qd = np.asarray(Q, float)
        self.Rd = np.asarray(R, float)
        self.Qfd = self.Qd if Qf is None else np.asarray(Qf, float)
        self.a_max, self.omega_max, self.v_max, self.radius = float(a_max), float(omega_max), float(v_max), float(radius)
        n_obs = self.obstacles.shape[1]
        self.n_stage_con = 7 + n_obs
        self.n_terminal_con = 3 + n_obs

    def dynamics(self, nodes, x, u):
        return unicycle_step(x, u, self.dt)

    def dynamics_jacobians(self, nodes, x, u):
        return unicycle_step_jacobians(x, u, self.dt)

    def stage_cost(self, nodes, x, u):
        e = x - self.x_ref[nodes]
        return 0.5 * (e * e) @ self.Qd + 0.5 * (u * u) @ self.Rd

    def stage_cost_derivatives(self, nodes, x, u):
        m = len(nodes)
        e = x - self.x_ref[nodes]
        return (
            e * self.Qd,
            u * self.Rd,
            np.broadcast_to(np.diag(self.Qd), (m, NX, NX)),
            np.broadcast_to(np.diag(self.Rd), (m, NU, NU)),
            np.zeros((m, NU, NX)),
        )

    def terminal_cost(self, nodes, x):
        e = x - self.x_ref[nodes]
        return 0.5 * (e * e) @ self.Qfd

    def terminal_cost_derivatives(self, nodes, x):
        e = x - self.x_ref[nodes]
        return e * self.Qfd, np.broadcast_to(np.diag(self.Qfd), (len(nodes), NX, NX))

    def _state_con(self, nodes, x):
        v = x[:, 3]
        d = x[:, None, :2] - self.obstacles[nodes]
        coll = self.radius ** 2 - np.sum(d * d, axis=-1)
        return np.column_stack([-v, v - self.v_max, x[:, 0] - self.px_max[nodes], coll])

    def _state_con_jac(self, nodes, x):
        m = len(nodes)
        n_obs = self.obstacles.shape[1]
        G = np.zeros((m, 3 + n_obs, NX))
        G[:, 0, 3] = -1.0
        G[:, 1, 3] = 1.0
        G[:, 2, 0] = 1.0
        G[:, 3:, :2] = -2.0 * (x[:, None, :2] - self.obstacles[nodes])
        return G

    def stage_constraints(self, nodes, x, u):
        a, om = u[:, 0], u[:, 1]
        box = np.column_stack([a - self.a_max, -a - self.a_max, om - self.omega_max, -om - self.omega_max])
        return np.concatenate([box, self._state_con(nodes, x)], axis=1)

    def stage_constraint_jacobians(self, nodes, x, u):
        m = len(nodes)
        gx = np.zeros((m, self.n_stage_con, NX))
        gu = np.zeros((m, self.n_stage_con, NU))
        gu[:, 0, 0], gu[:, 1, 0], gu[:, 2, 1], gu[:, 3, 1] = 1.0, -1.0, 1.0, -1.0
        gx[:, 4:] = self._state_con_jac(nodes, x)
        return gx, gu

    def terminal_constraints(self, nodes, x):
        return self._state_con(nodes, x)

    def terminal_constraint_jacobians(self, nodes, x):
        return self._state_con_jac(nodes, x)


# ---------------------------------------------------------------------------
# scenario generation


def branch_step(t_shared: float, dt: float) -> int:
    """Step index of a branching time, rounding halves up."""
    return int(np.floor(t_shared / dt + 0.5))


def _sv_distance(t, v0, v_target, t_branch, tau):
    """Distance covered by a vehicle that lags toward ``v_target`` after ``t_branch``."""
    t = np.asarray(t, float)
    s = t - t_branch
    after = v0 * t_branch + v_target * s + (v0 - v_target) * tau * (1.0 - np.exp(-np.maximum(s, 0.0) / tau))
    return np.where(s <= 0.0, v0 * t, after)


@dataclass
class ScenarioSpec:
    """Intersection case: ego turns left across two surrounding vehicles."""

    T: float = 10.0
    T_sh: float = 0.1
    N: int = 63
    ego_x0: tuple = (0.0, -20.0, np.pi / 2, 5.0)
    v_ref: float = 5.0
    turn_radius: float = 12.0
    sv1_start: tuple = (-45.0, 6.0)  # eastbound
    sv1_v0: float = 6.0
    sv1_speeds: tuple = (8.0, 3.0, 5.5)
    sv2_start: tuple = (-6.0, 40.0)  # southbound
    sv2_v0: float = 5.0
    sv2_speeds: tuple = (4.0, 7.0, 2.5, 9.0)
    tau: float = 1.0
    Q: tuple = (1.0, 1.0, 0.1, 0.1)
    R: tuple = (0.5, 0.5)
    a_max: float = 3.0
    omega_max: float = 0.5
    v_max: float = 15.0
    radius: float = 3.0

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if not 0.0 <= self.T_sh < self.T:
            raise ValueError("T_sh must lie in [0, T)")

    @property
    def dt(self) -> float:
        return self.T / self.N

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ScenarioSpec":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def intersection_counts(leaves: int) -> tuple[int, int]:
    """``(|V1|, |V2|)`` used for a requested leaf count."""
    table = {1: (1, 1), 2: (1, 2), 4: (2, 2), 6: (2, 3), 9: (3, 3), 12: (3, 4)}
    if leaves not in table:
        raise ValueError(f"leaf count {leaves} not in {sorted(table)}")
    return table[leaves]


def _left_turn_reference(spec: ScenarioSpec, t):
    """Ego reference: north to the origin, quarter circle left, then west."""
    x0, y0 = spec.ego_x0[0], spec.ego_x0[1]
    R = spec.turn_radius
    s = spec.v_ref * np.asarray(t, float)
    straight = -y0
    arc = 0.5 * np.pi * R
    ref = np.zeros(s.shape + (4,))
    ref[..., 3] = spec.v_ref
    a = s < straight
    ref[a, 0] = x0
    ref[a, 1] = y0 + s[a]
    ref[a, 2] = 0.5 * np.pi
    b = (s >= straight) & (s < straight + arc)
    th = (s[b] - straight) / R
    ref[b, 0] = x0 - R + R * np.cos(th)
    ref[b, 1] = R * np.sin(th)
    ref[b, 2] = 0.5 * np.pi + th
    c = s >= straight + arc
    ref[c, 0] = x0 - R - (s[c] - straight - arc)
    ref[c, 1] = R
    ref[c, 2] = np.pi
    return ref


def build_intersection_case(spec: ScenarioSpec, V1_count: int, V2_count: int) -> UnicycleProblem:
    if not 1 <= V1_count <= len(spec.sv1_speeds) or not 1 <= V2_count <= len(spec.sv2_speeds):
        raise ValueError(
            f"counts ({V1_count}, {V2_count}) exceed the speed sets "
            f"({len(spec.sv1_speeds)}, {len(spec.sv2_speeds)})"
        )
    leaves = V1_count * V2_count
    if leaves not in (1, 2, 4, 6, 9, 12):
        raise ValueError(f"leaf count {leaves} not in (1, 2, 4, 6, 9, 12)")
    dt = spec.dt
    kb = branch_step(spec.T_sh, dt)
    if leaves > 1 and kb >= spec.N:
        raise ValueError("branching step falls outside the horizon")
    topo = build_tree(spec.N, [(kb, leaves, None)] if leaves > 1 else [])
    t = topo.time_step * dt
    tb = kb * dt

    x_ref = _left_turn_reference(spec, t)
    obstacles = np.zeros((topo.node_count, 2, 2))
    for j, path in enumerate(flatten(topo)):
        v1 = spec.sv1_speeds[j // V2_count]
        v2 = spec.sv2_speeds[j % V2_count]
        nodes = np.asarray(path.node_sequence)
        tt = t[nodes]
        s1 = _sv_distance(tt, spec.sv1_v0, v1, tb, spec.tau)
        s2 = _sv_distance(tt, spec.sv2_v0, v2, tb, spec.tau)
        obstacles[nodes, 0, 0] = spec.sv1_start[0] + s1
        obstacles[nodes, 0, 1] = spec.sv1_start[1]
        obstacles[nodes, 1, 0] = spec.sv2_start[0]
        obstacles[nodes, 1, 1] = spec.sv2_start[1] - s2
    return UnicycleProblem(
        topo, np.asarray(spec.ego_x0, float), dt, x_ref, obstacles, None, spec.Q, spec.R,
        a_max=spec.a_max, omega_max=spec.omega_max, v_max=spec.v_max, radius=spec.radius,
    )


@dataclass
class LatencySpec:
    """Straight-road case with a delayed high-level decision.

    The first branching splits ``proceed`` / ``cautious`` speed targets; the
    second splits ``continue`` / ``backup``, where backup stops before a
    stop line.
    """

    T: float = 5.0
    N: int = 255
    T_sh0: float = 0.05
    T_sh1: float = 0.5
    v0: float = 10.0
    v_first: tuple = (10.0, 6.0)  # proceed, cautious
    stop_line: float = 50.0
    backup_decel: float = 2.0
    weights_first: tuple = (0.5, 0.5)
    weights_second: tuple = (0.5, 0.5)
    Q: tuple = (1.0, 1.0, 0.1, 0.1)
    R: tuple = (0.5, 0.5)
    a_max: float = 3.0
    omega_max: float = 0.5
    v_max: float = 15.0
    radius: float = 3.0

    @property
    def dt(self) -> float:
        return self.T / self.N

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "LatencySpec":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def build_latency_case(spec: LatencySpec) -> UnicycleProblem:
    if not 0.0 <= spec.T_sh0 < spec.T_sh1 < spec.T:
        raise ValueError(f"need 0 <= T_sh0 < T_sh1 < T, got {spec.T_sh0}, {spec.T_sh1}, {spec.T}")
    dt = spec.dt
    k0, k1 = branch_step(spec.T_sh0, dt), branch_step(spec.T_sh1, dt)
    if not k0 < k1 < spec.N:
        raise ValueError(f"branching steps {k0}, {k1} must be increasing and below N={spec.N}")
    topo = build_tree(spec.N, [(k0, 2, spec.weights_first), (k1, 2, spec.weights_second)])
    t0, t1 = k0 * dt, k1 * dt
    steps = np.arange(spec.N + 1)

    x_ref = np.zeros((topo.node_count, NX))
    px_max = np.full(topo.node_count, FAR)
    for j, path in enumerate(flatten(topo)):
        first, backup = j // 2, j % 2 == 1
        v = np.where(steps * dt <= t0, spec.v0, spec.v_first[first])
        if backup:
            ramp = np.maximum(0.0, spec.v_first[first] - spec.backup_decel * (steps * dt - t1))
            v = np.where(steps * dt <= t1, v, ramp)
        px = np.concatenate([[0.0], np.cumsum(v[:-1] * dt)])
        nodes = np.asarray(path.node_sequence)
        x_ref[nodes, 0] = np.minimum(px, spec.stop_line - spec.radius) if backup else px
        x_ref[nodes, 3] = v
        if backup:
            px_max[nodes[k1 + 1:]] = spec.stop_line
    x0 = np.array([0.0, 0.0, 0.0, spec.v0])
    return UnicycleProblem(
        topo, x0, dt, x_ref, None, px_max, spec.Q, spec.R,
        a_max=spec.a_max, omega_max=spec.omega_max, v_max=spec.v_max, radius=spec.radius,
    )


# ---------------------------------------------------------------------------
# serialization


def problem_to_dict(problem: UnicycleProblem) -> dict:
    """Everything needed to rebuild the problem (topology, profiles, weights)."""
    return {
        "kind": "unicycle",
        "topology": problem.topology.to_dict(),
        "x0": problem.x0.tolist(),
        "dt": problem.dt,
        "x_ref": problem.x_ref.tolist(),
        "obstacles": problem.obstacles.tolist(),
        "px_max": problem.px_max.tolist(),
        "Q": problem.Qd.tolist(),
        "R": problem.Rd.tolist(),
        "Qf": problem.Qfd.tolist(),
        "a_max": problem.a_max,
        "omega_max": problem.omega_max,
        "v_max": problem.v_max,
        "radius": problem.radius,
    }


def problem_from_dict(d: Mapping) -> UnicycleProblem:
    if d.get("kind") != "unicycle":
        raise ValueError(f"unsupported problem kind {d.get('kind')!r}")
    topo = tree_from_dict(d["topology"])
    obs = np.asarray(d["obstacles"], float).reshape(topo.node_count, -1, 2)
    return UnicycleProblem(
        topo, d["x0"], d["dt"], d["x_ref"], obs, d["px_max"], d["Q"], d["R"], d["Qf"],
        a_max=d["a_max"], omega_max=d["omega_max"], v_max=d["v_max"], radius=d["radius"],
    )
