"""Contingency planner: one ego plan per predicted TV mode, sharing the first
control input across all branches.

The program optimises stacked per-branch acceleration sequences under
double-integrator dynamics.  Per branch: quadratic lane-centre tracking,
desired-speed tracking, control effort, and a soft TV-proximity penalty
(hinge-squared of the longitudinal gap, gated laterally); branch costs are
weighted by mode probability.  The first control of every branch is the same
decision variable, so the equality holds exactly.  Gates and gap directions
are fixed from the proximity-free solution, keeping the objective convex
piecewise-quadratic; it is solved with an active-set Newton method with
monotone backtracking.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, NumericalError
from .model import ModePrediction
from .scene import Scene

KKT_TOL = 1e-9
MAX_NEWTON_ITER = 100


@dataclass(frozen=True)
class EgoState:
    position: tuple[float, float]
    velocity: tuple[float, float]

    def __post_init__(self) -> None:
        values = (*self.position, *self.velocity)
        if not all(np.isfinite(v) for v in values):
            raise ValueError("ego state must be finite")


@dataclass(frozen=True)
class PlannerConfig:
    dt: float = 0.2
    w_track: float = 1.0
    w_speed: float = 0.5
    w_effort: float = 0.1
    w_prox: float = 4.0
    margin_long: float = 10.0
    margin_lat: float = 2.0
    a_max: float = 4.0
    target_lat: float | None = None
    desired_speed: float | None = None
    horizon: int | None = None
    tv_id: int | None = None
    frame: int = 0

    def __post_init__(self) -> None:
        if self.dt <= 0 or self.a_max <= 0:
            raise ConfigError("dt and a_max must be positive")
        if min(self.w_track, self.w_speed, self.w_prox) < 0 or self.w_effort <= 0:
            raise ConfigError("weights must be non-negative, effort strictly positive")


@dataclass
class PlanningProblem:
    """Semantic description of the stacked program; both solvers consume this."""

    dt: float
    horizon: int
    n_branches: int
    ego_position: np.ndarray       # (2,)
    ego_velocity: np.ndarray       # (2,)
    lat_ref: float
    desired_speed: float
    branch_weights: np.ndarray     # (N,) mode probabilities, normalised
    tv_trajs: np.ndarray           # (N, T, 2) absolute TV mean positions
    prox_gates: np.ndarray         # (N, T) bool, lateral gate open
    prox_signs: np.ndarray         # (N, T) +1 TV ahead / -1 TV behind
    w_track: float
    w_speed: float
    w_effort: float
    w_prox: float
    margin_long: float
    a_max: float

    @property
    def n_vars(self) -> int:
        return 2 + self.n_branches * (self.horizon - 1) * 2


@dataclass
class PlanBranch:
    controls: np.ndarray    # (T, 2) accelerations
    states: np.ndarray      # (T + 1, 4): x, lat, vx, vlat rolled from controls
    cost: float             # unweighted branch cost
    mode_prob: float


@dataclass
class ContingencyPlan:
    branches: list[PlanBranch]
    shared_control: np.ndarray
    objective: float
    kkt_residual: float
    objective_trace: list[float] = field(default_factory=list)
    problem: PlanningProblem | None = None

    def to_json_dict(self) -> dict:
        return {
            "shared_control": self.shared_control.tolist(),
            "objective": self.objective,
            "kkt_residual": self.kkt_residual,
            "branches": [
                {
                    "controls": np.round(b.controls, 12).tolist(),
                    "states": np.round(b.states, 12).tolist(),
                    "cost": b.cost,
                    "mode_prob": b.mode_prob,
                }
                for b in self.branches
            ],
        }


def plan_to_json(plan: ContingencyPlan, run_config: dict | None = None, seed: int | None = None) -> str:
    obj = plan.to_json_dict()
    if run_config is not None:
        obj["run_config"] = run_config
    if seed is not None:
        obj["seed"] = seed
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def plan_from_json_dict(obj: dict) -> ContingencyPlan:
    """Re-inflate a plan from its JSON form (problem/trace are not persisted)."""
    branches = [
        PlanBranch(
            controls=np.asarray(b["controls"], dtype=float),
            states=np.asarray(b["states"], dtype=float),
            cost=float(b["cost"]),
            mode_prob=float(b["mode_prob"]),
        )
        for b in obj["branches"]
    ]
    return ContingencyPlan(
        branches=branches,
        shared_control=np.asarray(obj["shared_control"], dtype=float),
        objective=float(obj["objective"]),
        kkt_residual=float(obj["kkt_residual"]),
    )


# ----------------------------------------------------------------------
# Target-vehicle selection
# ----------------------------------------------------------------------

def select_target_vehicle(scene: Scene, ego: EgoState, frame: int) -> int:
    """Nearest vehicle behind the ego in the adjacent left lane.

    Falls back to the overall nearest vehicle (Euclidean) when the
    left-following slot is empty; ties break on the lower vehicle id.
    """
    present = scene.ids_present_at(frame)
    if not present:
        raise DataError(f"no vehicles present at frame {frame}")
    ego_lane = scene.geometry.lane_index_of(ego.position[1])
    left_lane = ego_lane + 1
    candidates = []
    for vid in present:
        sv = scene.state_of(vid, frame)
        if scene.geometry.lane_index_of(sv.position[1]) != left_lane:
            continue
        gap = ego.position[0] - sv.position[0]
        if gap > 0:
            candidates.append((gap, vid))
    if candidates:
        return min(candidates)[1]
    dists = [
        (float(np.hypot(sv.position[0] - ego.position[0], sv.position[1] - ego.position[1])), vid)
        for vid, sv in ((v, scene.state_of(v, frame)) for v in present)
    ]
    return min(dists)[1]


# ----------------------------------------------------------------------
# Problem assembly
# ----------------------------------------------------------------------

def _dynamics_maps(horizon: int, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Lower-triangular maps from controls to positions and velocities.

    pos[t] = pos0 + vel0*(t+1)*dt + (G_pos @ u)[t];
    vel[t] = vel0 + (G_vel @ u)[t], for t = 0..T-1 (state after control t).
    """
    steps = np.arange(horizon)
    lag = steps[:, None] - steps[None, :]
    g_pos = np.where(lag >= 0, (lag + 0.5) * dt * dt, 0.0)
    g_vel = np.where(lag >= 0, dt, 0.0)
    return g_pos, g_vel


def _branch_columns(problem: PlanningProblem, branch: int) -> np.ndarray:
    """Flat z indices of the branch's (T, 2) control entries."""
    t = problem.horizon
    idx = np.empty((t, 2), dtype=np.int64)
    idx[0] = (0, 1)
    base = 2 + branch * (t - 1) * 2
    tail = base + np.arange((t - 1) * 2).reshape(t - 1, 2)
    idx[1:] = tail
    return idx


@dataclass
class _Assembled:
    """Dense quadratic + hinge representation: f(z) = 0.5 z'Hz + q'z + c
    + sum_i w_i * max(0, a_i'z + b_i)^2."""

    h_quad: np.ndarray
    q_lin: np.ndarray
    const: float
    hinge_rows: np.ndarray   # (M, D)
    hinge_offsets: np.ndarray  # (M,)
    hinge_weights: np.ndarray  # (M,)
    branch_terms: list[dict]

    def objective(self, z: np.ndarray) -> float:
        val = 0.5 * z @ self.h_quad @ z + self.q_lin @ z + self.const
        if self.hinge_rows.size:
            act = np.maximum(0.0, self.hinge_rows @ z + self.hinge_offsets)
            val += float(self.hinge_weights @ (act * act))
        return float(val)

    def gradient(self, z: np.ndarray) -> np.ndarray:
        g = self.h_quad @ z + self.q_lin
        if self.hinge_rows.size:
            act = np.maximum(0.0, self.hinge_rows @ z + self.hinge_offsets)
            g = g + self.hinge_rows.T @ (2.0 * self.hinge_weights * act)
        return g

    def hessian(self, z: np.ndarray) -> np.ndarray:
        h = self.h_quad.copy()
        if self.hinge_rows.size:
            active = (self.hinge_rows @ z + self.hinge_offsets) > 0.0
            if active.any():
                rows = self.hinge_rows[active]
                h += rows.T @ (2.0 * self.hinge_weights[active, None] * rows)
        return h


def _assemble(problem: PlanningProblem) -> _Assembled:
    d = problem.n_vars
    t = problem.horizon
    g_pos, g_vel = _dynamics_maps(t, problem.dt)
    steps = np.arange(1, t + 1)

    h = np.zeros((d, d))
    q = np.zeros(d)
    const = 0.0
    hinge_rows, hinge_offsets, hinge_weights = [], [], []
    branch_terms = []

    for n in range(problem.n_branches):
        cols = _branch_columns(problem, n)
        w_n = float(problem.branch_weights[n])
        terms = []

        # Lateral tracking: residual = G_pos @ u_lat + (lat0 + v_lat0 * k * dt - lat_ref)
        a_lat = np.zeros((t, d))
        a_lat[:, cols[:, 1]] = g_pos
        b_lat = -(problem.ego_position[1] + problem.ego_velocity[1] * steps * problem.dt
                  - problem.lat_ref)
        terms.append((problem.w_track, a_lat, b_lat))

        # Speed tracking: residual = G_vel @ u_long + (v_long0 - v_des)
        a_spd = np.zeros((t, d))
        a_spd[:, cols[:, 0]] = g_vel
        b_spd = -np.full(t, problem.ego_velocity[0] - problem.desired_speed)
        terms.append((problem.w_speed, a_spd, b_spd))

        # Control effort on every control entry of the branch.
        a_eff = np.zeros((2 * t, d))
        a_eff[np.arange(2 * t), cols.reshape(-1)] = 1.0
        terms.append((problem.w_effort, a_eff, np.zeros(2 * t)))

        for weight, a_mat, b_vec in terms:
            h += 2.0 * w_n * weight * a_mat.T @ a_mat
            q += -2.0 * w_n * weight * a_mat.T @ b_vec
            const += w_n * weight * float(b_vec @ b_vec)

        # Gated proximity hinges: violation = margin - sign * (tv_long - e_long).
        gate_rows = []
        for k in np.flatnonzero(problem.prox_gates[n]):
            sign = problem.prox_signs[n, k]
            row = np.zeros(d)
            row[cols[:, 0]] = sign * g_pos[k]
            e_free = problem.ego_position[0] + problem.ego_velocity[0] * steps[k] * problem.dt
            offset = problem.margin_long - sign * (problem.tv_trajs[n, k, 0] - e_free)
            gate_rows.append((row, offset))
            hinge_rows.append(row)
            hinge_offsets.append(offset)
            hinge_weights.append(w_n * problem.w_prox)
        branch_terms.append({"terms": terms, "hinges": gate_rows})

    return _Assembled(
        h_quad=h,
        q_lin=q,
        const=const,
        hinge_rows=np.array(hinge_rows) if hinge_rows else np.zeros((0, d)),
        hinge_offsets=np.array(hinge_offsets),
        hinge_weights=np.array(hinge_weights),
        branch_terms=branch_terms,
    )


def _branch_cost(problem: PlanningProblem, assembled: _Assembled, branch: int, z: np.ndarray) -> float:
    """Unweighted cost of one branch at the solution."""
    total = 0.0
    for weight, a_mat, b_vec in assembled.branch_terms[branch]["terms"]:
        res = a_mat @ z - b_vec
        total += weight * float(res @ res)
    for row, offset in assembled.branch_terms[branch]["hinges"]:
        total += problem.w_prox * max(0.0, float(row @ z) + offset) ** 2
    return total


def build_problem(
    ego: EgoState,
    modes: list[ModePrediction],
    scene: Scene | None,
    cfg: PlannerConfig,
) -> PlanningProblem:
    """Resolve references, absolutise TV trajectories, and fix proximity gates.

    Mode mean trajectories are TV-relative; when cfg.tv_id is set the TV state
    at cfg.frame anchors them, otherwise they are taken as absolute already.
    """
    if not modes:
        raise ConfigError("need at least one predicted mode")
    horizon = cfg.horizon or modes[0].mean_traj.shape[0]
    if any(m.mean_traj.shape[0] < horizon for m in modes):
        raise ConfigError("mode trajectories shorter than the planning horizon")
    n = len(modes)

    if cfg.tv_id is not None:
        if scene is None:
            raise ConfigError("tv_id given but no scene to resolve it against")
        tv_state = scene.state_of(cfg.tv_id, cfg.frame)
        anchor = np.asarray(tv_state.position)
    else:
        anchor = np.zeros(2)
    tv_trajs = np.stack([anchor + m.mean_traj[:horizon] for m in modes])
    if not np.all(np.isfinite(tv_trajs)):
        raise NumericalError("non-finite TV predictions")

    # Probabilities are floored so every branch's subproblem stays
    # well-conditioned even for near-zero-probability modes.
    probs = np.maximum(np.array([m.prob for m in modes], dtype=float), 1e-6)
    weights = probs / probs.sum()

    if cfg.target_lat is not None:
        lat_ref = cfg.target_lat
    elif scene is not None:
        lat_ref = scene.geometry.lane_center(scene.geometry.lane_index_of(ego.position[1]))
    else:
        lat_ref = ego.position[1]
    desired_speed = cfg.desired_speed if cfg.desired_speed is not None else ego.velocity[0]

    problem = PlanningProblem(
        dt=cfg.dt,
        horizon=horizon,
        n_branches=n,
        ego_position=np.asarray(ego.position, dtype=float),
        ego_velocity=np.asarray(ego.velocity, dtype=float),
        lat_ref=float(lat_ref),
        desired_speed=float(desired_speed),
        branch_weights=weights,
        tv_trajs=tv_trajs,
        prox_gates=np.zeros((n, horizon), dtype=bool),
        prox_signs=np.ones((n, horizon)),
        w_track=cfg.w_track,
        w_speed=cfg.w_speed,
        w_effort=cfg.w_effort,
        w_prox=cfg.w_prox,
        margin_long=cfg.margin_long,
        a_max=cfg.a_max,
    )

    if cfg.w_prox > 0:
        # Proximity-free nominal ego path fixes the lateral gates and the gap
        # direction per (branch, step); the gated program is then convex.
        nominal = _assemble(problem)
        z0 = np.linalg.solve(nominal.h_quad, -nominal.q_lin)
        g_pos, _ = _dynamics_maps(horizon, cfg.dt)
        steps = np.arange(1, horizon + 1)
        for b in range(n):
            cols = _branch_columns(problem, b)
            e_long = problem.ego_position[0] + problem.ego_velocity[0] * steps * cfg.dt \
                + g_pos @ z0[cols[:, 0]]
            e_lat = problem.ego_position[1] + problem.ego_velocity[1] * steps * cfg.dt \
                + g_pos @ z0[cols[:, 1]]
            gap_lat = np.abs(tv_trajs[b, :, 1] - e_lat)
            problem.prox_gates[b] = gap_lat < cfg.margin_lat
            problem.prox_signs[b] = np.where(tv_trajs[b, :, 0] >= e_long, 1.0, -1.0)
    return problem


# ----------------------------------------------------------------------
# Solver
# ----------------------------------------------------------------------

def kkt_residual(z: np.ndarray, gradient: np.ndarray, a_max: float) -> float:
    """Infinity norm of the projected-gradient fixed-point residual."""
    return float(np.max(np.abs(z - np.clip(z - gradient, -a_max, a_max))))


def _solve_newton(assembled: _Assembled, a_max: float, d: int) -> tuple[np.ndarray, list[float], float]:
    z = np.clip(np.linalg.solve(assembled.h_quad, -assembled.q_lin), -a_max, a_max)
    trace = [assembled.objective(z)]
    residual = np.inf
    for _ in range(MAX_NEWTON_ITER):
        g = assembled.gradient(z)
        residual = kkt_residual(z, g, a_max)
        if residual < KKT_TOL:
            break
        at_lo = (z <= -a_max + 1e-12) & (g > 0)
        at_hi = (z >= a_max - 1e-12) & (g < 0)
        free = ~(at_lo | at_hi)
        direction = np.zeros(d)
        if free.any():
            h = assembled.hessian(z)[np.ix_(free, free)]
            direction[free] = np.linalg.solve(h, -g[free])
        if direction @ g >= 0:
            direction = -g
        f0 = trace[-1]
        step = 1.0
        accepted = False
        while step > 1e-14:
            z_new = np.clip(z + step * direction, -a_max, a_max)
            f_new = assembled.objective(z_new)
            if f_new <= f0 + 1e-4 * min(0.0, float(g @ (z_new - z))):
                z = z_new
                trace.append(f_new)
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
    if not np.all(np.isfinite(z)):
        raise NumericalError("planner solution is non-finite")
    return z, trace, residual


def plan_contingency(
    ego: EgoState,
    modes: list[ModePrediction],
    scene: Scene | None,
    cfg: PlannerConfig,
) -> ContingencyPlan:
    """Plan one trajectory per mode with a shared first control input.

    Branches with bit-identical TV trajectories are solved once and
    replicated, so identical modes yield identical plans exactly.
    """
    problem = build_problem(ego, modes, scene, cfg)
    n, t = problem.n_branches, problem.horizon

    groups: dict[bytes, list[int]] = {}
    for b in range(n):
        groups.setdefault(problem.tv_trajs[b].tobytes(), []).append(b)
    unique = [members[0] for members in groups.values()]

    if len(unique) < n:
        reduced = PlanningProblem(
            dt=problem.dt, horizon=t, n_branches=len(unique),
            ego_position=problem.ego_position, ego_velocity=problem.ego_velocity,
            lat_ref=problem.lat_ref, desired_speed=problem.desired_speed,
            branch_weights=np.array([
                sum(problem.branch_weights[m] for m in groups[problem.tv_trajs[u].tobytes()])
                for u in unique
            ]),
            tv_trajs=problem.tv_trajs[unique],
            prox_gates=problem.prox_gates[unique],
            prox_signs=problem.prox_signs[unique],
            w_track=problem.w_track, w_speed=problem.w_speed,
            w_effort=problem.w_effort, w_prox=problem.w_prox,
            margin_long=problem.margin_long, a_max=problem.a_max,
        )
        rep_of = {}
        for u_idx, u in enumerate(unique):
            for member in groups[problem.tv_trajs[u].tobytes()]:
                rep_of[member] = u_idx
        assembled = _assemble(reduced)
        z, trace, residual = _solve_newton(assembled, reduced.a_max, reduced.n_vars)
        branch_controls = [
            _extract_controls(reduced, z, rep_of[b]) for b in range(n)
        ]
        branch_costs = [_branch_cost(reduced, assembled, rep_of[b], z) for b in range(n)]
        objective = assembled.objective(z)
    else:
        assembled = _assemble(problem)
        z, trace, residual = _solve_newton(assembled, problem.a_max, problem.n_vars)
        branch_controls = [_extract_controls(problem, z, b) for b in range(n)]
        branch_costs = [_branch_cost(problem, assembled, b, z) for b in range(n)]
        objective = assembled.objective(z)

    shared = z[0:2].copy()
    branches = []
    for b in range(n):
        controls = branch_controls[b]
        controls[0] = shared
        branches.append(PlanBranch(
            controls=controls,
            states=roll_dynamics(problem.ego_position, problem.ego_velocity, controls, problem.dt),
            cost=branch_costs[b],
            mode_prob=float(problem.branch_weights[b]),
        ))
    return ContingencyPlan(
        branches=branches,
        shared_control=shared,
        objective=objective,
        kkt_residual=residual,
        objective_trace=trace,
        problem=problem,
    )


def _extract_controls(problem: PlanningProblem, z: np.ndarray, branch: int) -> np.ndarray:
    cols = _branch_columns(problem, branch)
    return z[cols.reshape(-1)].reshape(problem.horizon, 2).copy()


def roll_dynamics(position, velocity, controls: np.ndarray, dt: float) -> np.ndarray:
    """Discrete double-integrator rollout; states[k] is before control k."""
    t = controls.shape[0]
    states = np.empty((t + 1, 4))
    states[0] = (*position, *velocity)
    for k in range(t):
        x, y, vx, vy = states[k]
        ax, ay = controls[k]
        states[k + 1] = (
            x + vx * dt + 0.5 * ax * dt * dt,
            y + vy * dt + 0.5 * ay * dt * dt,
            vx + ax * dt,
            vy + ay * dt,
        )
    return states
