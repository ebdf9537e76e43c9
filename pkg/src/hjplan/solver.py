"""Saddle-point solver for the pointwise value of the planning PDE.

The terminal-value problem is discretized on a uniform reversed-time grid
``t_j = j*dt`` and posed as a finite-dimensional inf/sup over per-agent state
trajectories ``x[i][j]`` and costates ``p[i][j]``:

    inf_x sup_p  sum_{i,j} <p[i][j], x[i][j] - x[i][j-1]>
                 - dt * sum_j HolisticH({x[.][j]}, {p[.][j]}, t_j)

with ``x[i][0]`` pinned to the goal configuration and ``x[i][J]`` pinned to
the query point (so trajectories are stored in reversed time). The holistic
Hamiltonian couples the agents' individual Hamiltonians through the goal,
collision and obstacle indicators of the scene:

    HolisticH = chi_goal * (C_pairs * sum_i O_i * H_i  -  1)

The saddle point is found by a primal-dual hybrid gradient iteration:
closed-form proximal ascent in every costate, one gradient-descent step from
the extrapolated anchor in every free state, then over-relaxation. Updates
within a sweep read only pre-sweep arrays (Jacobi style), which makes
sequential and partitioned-parallel execution bit-identical.

Two equivalent sweep implementations exist: a stacked one used when every
agent shares one model (states fit a single (agents, steps, dim) array), and
a ragged per-agent one for heterogeneous ensembles. Tests pin them to each
other; ``force_ragged`` selects the latter explicitly.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from .dynamics import CostateProxInput, DynamicsModel
from .scene import Scene

__all__ = [
    "SolverParams",
    "Problem",
    "SaddleState",
    "SolveDiagnostics",
    "Plan",
    "holistic_hamiltonian",
    "holistic_hamiltonian_agent_gradient",
    "initialize",
    "costate_sweep",
    "state_descent",
    "value_of",
    "solve",
]


@dataclass
class SolverParams:
    """Iteration parameters and schedules.

    The proximal steps must satisfy sigma*tau <= 0.25. The goal-indicator
    sharpness and the descent rate follow staircase schedules: every
    ``schedule_period`` iterations A1 grows by ``a1_step`` (capped at
    ``a1_cap``) and the state-descent rate halves.

    ``freeze_indicators`` is a test-only mode that pins every indicator to 1
    while keeping the constant running cost, reducing the problem to the
    classical space-independent form.
    """

    sigma: float = 1.0
    tau: float = 0.25
    dt: float = 0.1
    max_iters: int = 20000
    conv_tol: float = 1e-5
    conv_window: int = 10
    a1_start: float = 10.0
    a1_step: float = 50.0
    a1_cap: float = 1000.0
    schedule_period: int = 1000
    descent_rate: float = 0.1
    seed: int = 0
    init_noise: float = 0.1
    value_sample_every: int = 100
    parallel: bool = False
    workers: int = 4
    freeze_indicators: bool = False

    def __post_init__(self):
        if self.sigma * self.tau > 0.25 + 1e-12:
            raise ValueError("step sizes must satisfy sigma*tau <= 0.25")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.conv_window < 1 or self.max_iters < 1:
            raise ValueError("conv_window and max_iters must be positive")

    def a1_at(self, iteration: int) -> float:
        return min(
            self.a1_start + self.a1_step * (iteration // self.schedule_period),
            self.a1_cap,
        )

    def rate_at(self, iteration: int) -> float:
        return self.descent_rate * 0.5 ** (iteration // self.schedule_period)


@dataclass
class Problem:
    """One solve: scene (with goals), agent models, query states, horizon."""

    scene: Scene
    models: list[DynamicsModel]
    starts: list[np.ndarray]
    horizon: float

    def __post_init__(self):
        self.starts = [np.asarray(s, dtype=float) for s in self.starts]
        if not (len(self.models) == len(self.starts) == self.scene.n_agents):
            raise ValueError("models, starts and scene goals must agree in length")
        for m, s, g in zip(self.models, self.starts, self.scene.goal):
            if s.shape != (m.state_dim,) or g.shape != (m.state_dim,):
                raise ValueError(
                    f"start/goal shape mismatch for {m.kind}: expected ({m.state_dim},)"
                )
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")


@dataclass
class SaddleState:
    """Discrete trajectories in reversed time.

    ``x[i]`` has shape (J+1, n_i) with row 0 pinned to the goal and row J to
    the query point; ``p[i]`` mirrors it with row 0 pinned to zero; ``z`` is
    the extrapolation copy of ``x``.
    """

    x: list[np.ndarray]
    p: list[np.ndarray]
    z: list[np.ndarray]
    times: np.ndarray

    @property
    def J(self) -> int:
        return len(self.times) - 1


@dataclass
class SolveDiagnostics:
    iterations: int = 0
    final_residual: float = np.inf
    converged: bool = False
    value_history: list[tuple[int, float]] = field(default_factory=list)
    wall_time: float = 0.0
    horizon_requested: float = 0.0
    horizon: float = 0.0
    a1_final: float = 0.0
    attempts: int = 1


@dataclass
class Plan:
    """Converged (or best-effort) trajectories in forward time.

    ``states[i]`` runs from the agent's start (row 0) to its goal (row J);
    ``controls[i]`` holds the J per-segment controls extracted from the
    converged costates. ``value`` approximates the minimal travel time.
    """

    states: list[np.ndarray]
    controls: list[np.ndarray]
    times: np.ndarray
    value: float
    horizon: float
    diagnostics: SolveDiagnostics
    saddle: SaddleState

    @property
    def converged(self) -> bool:
        return self.diagnostics.converged


# ----------------------------------------------------------------------
# holistic Hamiltonian (reference implementation; also the public op)
# ----------------------------------------------------------------------


def _spatial(scene: Scene, i: int, x: np.ndarray) -> np.ndarray:
    return x[..., scene.spatial_projection[i]]


def holistic_hamiltonian(
    scene: Scene,
    models: Sequence[DynamicsModel],
    states: Sequence[np.ndarray],
    costates: Sequence[np.ndarray],
    t: float | np.ndarray = 0.0,
    a1: float | None = None,
    freeze: bool = False,
) -> np.ndarray:
    """Ensemble Hamiltonian chi * (C * sum_i O_i H_i - 1), broadcast over
    leading axes. With ``freeze`` the indicators are pinned to 1 and the
    value is sum_i H_i - 1."""
    hams = [m.hamiltonian(x, p, t) for m, x, p in zip(models, states, costates)]
    if freeze:
        return sum(hams) - 1.0
    chi, _ = scene.goal_indicator(states, a1)
    positions = [_spatial(scene, i, x) for i, x in enumerate(states)]
    coll = np.ones(np.shape(chi))
    for k in range(len(models)):
        for l in range(k + 1, len(models)):
            coll = coll * scene.pair_value(positions[k], positions[l])
    gated = 0.0
    for q, h in zip(positions, hams):
        gated = gated + scene.obstacle_value(q, t) * h
    return chi * (coll * gated - 1.0)


def holistic_hamiltonian_agent_gradient(
    scene: Scene,
    models: Sequence[DynamicsModel],
    states: Sequence[np.ndarray],
    costates: Sequence[np.ndarray],
    agent: int,
    t: float | np.ndarray = 0.0,
    a1: float | None = None,
    freeze: bool = False,
) -> np.ndarray:
    """Gradient of ``holistic_hamiltonian`` w.r.t. one agent's state, the
    other agents' states held fixed."""
    model = models[agent]
    if freeze:
        return model.hamiltonian_state_gradient(states[agent], costates[agent], t)

    chi, chi_grads = scene.goal_indicator(states, a1)
    positions = [_spatial(scene, i, x) for i, x in enumerate(states)]
    coll, coll_grads = scene.holistic_collision(positions)

    gated = 0.0
    o_agent = g_o_agent = h_agent = None
    for i, m in enumerate(models):
        o, g_o = scene.obstacle_indicator(positions[i], t)
        h = m.hamiltonian(states[i], costates[i], t)
        gated = gated + o * h
        if i == agent:
            o_agent, g_o_agent, h_agent = o, g_o, h

    proj = scene.spatial_projection[agent]
    grad_gated = np.zeros_like(np.asarray(states[agent], dtype=float))
    grad_gated[..., proj] = g_o_agent * np.asarray(h_agent)[..., None]
    grad_gated += o_agent[..., None] * model.hamiltonian_state_gradient(
        states[agent], costates[agent], t
    )

    grad_coll = np.zeros_like(grad_gated)
    grad_coll[..., proj] = coll_grads[agent]

    return (
        chi_grads[agent] * np.asarray(coll * gated - 1.0)[..., None]
        + np.asarray(chi)[..., None]
        * (grad_coll * np.asarray(gated)[..., None] + np.asarray(coll)[..., None] * grad_gated)
    )


# ----------------------------------------------------------------------
# initialization
# ----------------------------------------------------------------------


def initialize(problem: Problem, params: SolverParams) -> SaddleState:
    """Seeded initial saddle state.

    States interpolate linearly from the goal (j=0) to the query point (j=J)
    with Gaussian noise of std ``init_noise`` on the free entries; costates
    start uniform in [-0.01, 0.01] with the j=0 row pinned to zero.
    """
    J = int(round(problem.horizon / params.dt))
    if J < 2:
        raise ValueError("horizon must span at least two time steps")
    times = params.dt * np.arange(J + 1)
    rng = np.random.default_rng(params.seed)
    xs, ps, zs = [], [], []
    for model, start, goal in zip(problem.models, problem.starts, problem.scene.goal):
        line = np.linspace(goal, start, J + 1)
        line[1:J] += rng.normal(0.0, params.init_noise, size=(J - 1, model.state_dim))
        p = rng.uniform(-0.01, 0.01, size=(J + 1, model.state_dim))
        p[0] = 0.0
        xs.append(line)
        ps.append(p)
        zs.append(line.copy())
    return SaddleState(x=xs, p=ps, z=zs, times=times)


# ----------------------------------------------------------------------
# sweep dispatch
# ----------------------------------------------------------------------


def _uniform_ensemble(scene: Scene, models: Sequence[DynamicsModel]) -> bool:
    """True when every agent runs the identical model with a plain prefix
    spatial projection, so states stack into one array."""
    m0 = models[0]
    if any(m is not m0 and m != m0 for m in models[1:]):
        return False
    d = scene.dim
    prefix = np.arange(d)
    if any(not np.array_equal(ix, prefix) for ix in scene.spatial_projection):
        return False
    return scene.goal_projection is None


@lru_cache(maxsize=None)
def _pair_index(n: int) -> tuple[np.ndarray, np.ndarray]:
    return np.triu_indices(n, k=1)


def costate_sweep(
    state: SaddleState,
    scene: Scene,
    models: Sequence[DynamicsModel],
    params: SolverParams,
    iteration: int = 0,
    force_ragged: bool = False,
) -> list[np.ndarray]:
    """Proximal ascent of every costate p[i][j], j = 1..J.

    For each entry the gating factor alpha = chi*C*O_i is evaluated at the
    current states of step j, the anchor is beta = p + sigma*(z_j - z_{j-1}),
    and the model's exact prox does the rest. All entries are updated from
    the pre-sweep arrays.
    """
    if not force_ragged and _uniform_ensemble(scene, models):
        return _costate_sweep_stacked(state, scene, models, params, iteration)
    return _costate_sweep_ragged(state, scene, models, params, iteration)


def state_descent(
    state: SaddleState,
    new_p: list[np.ndarray],
    scene: Scene,
    models: Sequence[DynamicsModel],
    params: SolverParams,
    iteration: int = 0,
    force_ragged: bool = False,
) -> tuple[list[np.ndarray], list[np.ndarray], float]:
    """One extrapolated descent step of every free state x[i][j], j = 1..J-1.

    The anchor is xi = x - tau*(p_j - p_{j+1}); since the quadratic term of
    the proximal objective has zero gradient at the anchor, a single
    gradient-descent step lands at xi + rate*dt*grad_H evaluated at xi (other
    agents held at their current states). Pinned rows never move. Returns the
    new x, the extrapolation z = 2*x_new - x_old and the max-norm residual.
    """
    if not force_ragged and _uniform_ensemble(scene, models):
        return _state_descent_stacked(state, new_p, scene, models, params, iteration)
    return _state_descent_ragged(state, new_p, scene, models, params, iteration)


# ----------------------------------------------------------------------
# stacked implementation (uniform ensembles)
# ----------------------------------------------------------------------


def _costate_sweep_stacked(state, scene, models, params, iteration):
    model = models[0]
    J = state.J
    d = scene.dim
    X = np.stack([x[1:] for x in state.x])  # (I, J, n)
    tj = state.times[1:]
    if params.freeze_indicators:
        alpha = np.ones(X.shape[:2])
    else:
        G = np.stack(scene.goal)
        diff = X - G[:, None, :]
        chi = 1.0 - np.exp(-params.a1_at(iteration) * np.einsum("ijn,ijn->j", diff, diff))
        pos = X[..., :d]
        if len(models) > 1:
            kk, ll = _pair_index(len(models))
            chi = chi * np.prod(scene.pair_value(pos[kk], pos[ll]), axis=0)
        alpha = chi[None, :] * scene.obstacle_value(pos, tj)

    P = np.stack(state.p)
    Z = np.stack(state.z)
    beta = P[:, 1:] + params.sigma * (Z[:, 1:] - Z[:, :J])
    prox = model.costate_prox(
        CostateProxInput(
            x=X, beta=beta, alpha=alpha, sigma=params.sigma, dt=params.dt, t=tj
        )
    )
    out = np.zeros_like(P)
    out[:, 1:] = prox
    return [row for row in out]


def _state_descent_stacked(state, new_p, scene, models, params, iteration):
    model = models[0]
    J = state.J
    d = scene.dim
    a1 = params.a1_at(iteration)
    rate = params.rate_at(iteration)
    X = np.stack(state.x)  # (I, J+1, n)
    P = np.stack(new_p)
    tj = state.times[1:J]

    Xm = X[:, 1:J]
    Pm = P[:, 1:J]
    XI = Xm - params.tau * (Pm - P[:, 2 : J + 1])

    if params.freeze_indicators:
        grad = model.hamiltonian_state_gradient(XI, Pm, tj)
    else:
        n_agents = len(models)
        G = np.stack(scene.goal)
        diff = Xm - G[:, None, :]
        sq = np.einsum("ijn,ijn->ij", diff, diff)
        total_sq = np.sum(sq, axis=0)

        pos = Xm[..., :d]
        oh = scene.obstacle_value(pos, tj) * model.hamiltonian(Xm, Pm, tj)
        oh_sum = np.sum(oh, axis=0)

        # goal indicator with each agent displaced to its own anchor
        d_i = XI - G[:, None, :]
        sq_i = np.einsum("ijn,ijn->ij", d_i, d_i)
        decay = np.exp(-a1 * (total_sq[None, :] - sq + sq_i))
        chi = 1.0 - decay
        grad_chi = (2.0 * a1) * decay[..., None] * d_i

        q_i = XI[..., :d]
        if n_agents > 1:
            kk, ll = _pair_index(n_agents)
            c_all = scene.pair_value(pos[kk], pos[ll])  # (pairs, Jm)
            # pair values with agent i displaced, against the others in place
            rows = np.repeat(np.arange(n_agents), n_agents - 1)
            cols = np.concatenate(
                [[l for l in range(n_agents) if l != i] for i in range(n_agents)]
            ).astype(int)
            dif = q_i[rows] - pos[cols]
            s = np.sum(dif * dif, axis=-1)
            th = np.tanh(scene.A2 * (s - scene.delta**2))
            cc = (0.5 * (1.0 + th)).reshape(n_agents, n_agents - 1, -1)
            g_cc = (scene.A2 * (1.0 - th * th))[..., None] * dif
            g_cc = g_cc.reshape(n_agents, n_agents - 1, -1, d)

            # product of pairs not involving agent i
            prod_other = np.empty((n_agents,) + c_all.shape[1:])
            for i in range(n_agents):
                mask = (kk != i) & (ll != i)
                prod_other[i] = np.prod(c_all[mask], axis=0)

            # leave-one-out products along the partner axis
            pref = np.concatenate(
                [np.ones_like(cc[:, :1]), np.cumprod(cc, axis=1)[:, :-1]], axis=1
            )
            rcum = np.cumprod(cc[:, ::-1], axis=1)[:, ::-1]
            suf = np.concatenate([rcum[:, 1:], np.ones_like(cc[:, :1])], axis=1)
            loo = prod_other[:, None] * pref * suf
            coll = prod_other * np.prod(cc, axis=1)
            grad_coll_sp = np.einsum("ikj,ikjd->ijd", loo, g_cc)
        else:
            coll = np.ones_like(chi)
            grad_coll_sp = np.zeros_like(q_i)

        o, g_o = scene.obstacle_indicator(q_i, tj)
        h = model.hamiltonian(XI, Pm, tj)
        g_h = model.hamiltonian_state_gradient(XI, Pm, tj)
        gated = oh_sum[None, :] - oh + o * h

        grad_gated = o[..., None] * g_h
        grad_gated[..., :d] += g_o * h[..., None]
        grad_coll = np.zeros_like(grad_gated)
        grad_coll[..., :d] = grad_coll_sp

        grad = grad_chi * (coll * gated - 1.0)[..., None] + chi[..., None] * (
            grad_coll * gated[..., None] + coll[..., None] * grad_gated
        )

    X_new = X.copy()
    X_new[:, 1:J] = XI + rate * params.dt * grad
    residual = float(np.max(np.abs(X_new - X)))
    Z_new = 2.0 * X_new - X
    return [row for row in X_new], [row for row in Z_new], residual


# ----------------------------------------------------------------------
# ragged implementation (heterogeneous ensembles)
# ----------------------------------------------------------------------


def _map_agents(fn, n_agents, params):
    if params.parallel and n_agents > 1:
        with ThreadPoolExecutor(max_workers=min(params.workers, n_agents)) as pool:
            return list(pool.map(fn, range(n_agents)))
    return [fn(i) for i in range(n_agents)]


def _costate_sweep_ragged(state, scene, models, params, iteration):
    a1 = params.a1_at(iteration)
    J = state.J
    rows = slice(1, J + 1)
    tj = state.times[rows]
    if not params.freeze_indicators:
        states_j = [x[rows] for x in state.x]
        chi, _ = scene.goal_indicator(states_j, a1)
        positions = [_spatial(scene, i, x) for i, x in enumerate(states_j)]
        coll = np.ones(chi.shape)
        for k in range(len(models)):
            for l in range(k + 1, len(models)):
                coll = coll * scene.pair_value(positions[k], positions[l])

    def update(i):
        model = models[i]
        if params.freeze_indicators:
            alpha = np.ones(J)
        else:
            alpha = chi * coll * scene.obstacle_value(positions[i], tj)
        beta = state.p[i][rows] + params.sigma * (state.z[i][rows] - state.z[i][0:J])
        prox = model.costate_prox(
            CostateProxInput(
                x=state.x[i][rows],
                beta=beta,
                alpha=alpha,
                sigma=params.sigma,
                dt=params.dt,
                t=tj,
            )
        )
        out = np.zeros_like(state.p[i])
        out[rows] = prox
        return out

    return _map_agents(update, len(models), params)


def _state_descent_ragged(state, new_p, scene, models, params, iteration):
    a1 = params.a1_at(iteration)
    rate = params.rate_at(iteration)
    J = state.J
    mid = slice(1, J)
    tj = state.times[mid]
    n_agents = len(models)

    if not params.freeze_indicators:
        goal_sq = []
        for i in range(n_agents):
            di = state.x[i][mid] - scene.goal[i]
            if scene.goal_projection is not None:
                mask = np.zeros(di.shape[-1])
                mask[scene.goal_projection[i]] = 1.0
                di = di * mask
            goal_sq.append(np.sum(di * di, axis=-1))
        total_sq = sum(goal_sq)

        positions = [_spatial(scene, i, state.x[i][mid]) for i in range(n_agents)]
        pair_vals = {}
        for k in range(n_agents):
            for l in range(k + 1, n_agents):
                pair_vals[(k, l)] = scene.pair_value(positions[k], positions[l])

        gated_terms = [
            scene.obstacle_value(positions[i], tj)
            * models[i].hamiltonian(state.x[i][mid], new_p[i][mid], tj)
            for i in range(n_agents)
        ]
        gated_sum = sum(gated_terms)

    def update(i):
        model = models[i]
        xi = state.x[i][mid] - params.tau * (new_p[i][mid] - new_p[i][2 : J + 1])
        if params.freeze_indicators:
            grad = model.hamiltonian_state_gradient(xi, new_p[i][mid], tj)
        else:
            proj = scene.spatial_projection[i]
            di = xi - scene.goal[i]
            if scene.goal_projection is not None:
                mask = np.zeros(di.shape[-1])
                mask[scene.goal_projection[i]] = 1.0
                di = di * mask
            decay = np.exp(-a1 * (total_sq - goal_sq[i] + np.sum(di * di, axis=-1)))
            chi = 1.0 - decay
            grad_chi = 2.0 * a1 * decay[..., None] * di

            others = [l for l in range(n_agents) if l != i]
            prod_other = np.ones_like(chi)
            for (k, l), c in pair_vals.items():
                if k != i and l != i:
                    prod_other = prod_other * c
            q_i = xi[..., proj]
            c_vals, c_grads = [], []
            for l in others:
                c, gk, _ = scene.pair_collision_indicator(q_i, positions[l])
                c_vals.append(c)
                c_grads.append(gk)
            coll = prod_other
            for c in c_vals:
                coll = coll * c
            grad_coll_sp = np.zeros_like(q_i)
            m = len(c_vals)
            if m:
                prefix = [np.ones_like(chi)]
                for c in c_vals[:-1]:
                    prefix.append(prefix[-1] * c)
                suffix = [np.ones_like(chi)]
                for c in reversed(c_vals[1:]):
                    suffix.append(suffix[-1] * c)
                suffix.reverse()
                for idx in range(m):
                    loo = prod_other * prefix[idx] * suffix[idx]
                    grad_coll_sp = grad_coll_sp + loo[..., None] * c_grads[idx]

            o, g_o = scene.obstacle_indicator(q_i, tj)
            h = model.hamiltonian(xi, new_p[i][mid], tj)
            g_h = model.hamiltonian_state_gradient(xi, new_p[i][mid], tj)
            gated = gated_sum - gated_terms[i] + o * h

            grad_gated = o[..., None] * g_h
            grad_gated[..., proj] += g_o * h[..., None]
            grad_coll = np.zeros_like(grad_gated)
            grad_coll[..., proj] = grad_coll_sp

            grad = grad_chi * (coll * gated - 1.0)[..., None] + chi[..., None] * (
                grad_coll * gated[..., None] + coll[..., None] * grad_gated
            )

        x_new = state.x[i].copy()
        x_new[mid] = xi + rate * params.dt * grad
        return x_new

    new_x = _map_agents(update, n_agents, params)
    residual = 0.0
    new_z = []
    for i in range(n_agents):
        residual = max(residual, float(np.max(np.abs(new_x[i] - state.x[i]))))
        new_z.append(2.0 * new_x[i] - state.x[i])
    return new_x, new_z, residual


# ----------------------------------------------------------------------
# value extraction and the outer loop
# ----------------------------------------------------------------------


def value_of(
    state: SaddleState,
    scene: Scene,
    models: Sequence[DynamicsModel],
    params: SolverParams,
    a1: float | None = None,
) -> float:
    """Discrete saddle objective at the given state (the value estimate)."""
    J = state.J
    rows = slice(1, J + 1)
    total = 0.0
    for i in range(len(models)):
        incr = state.x[i][rows] - state.x[i][0:J]
        total += float(np.sum(state.p[i][rows] * incr))
    ham = holistic_hamiltonian(
        scene,
        models,
        [x[rows] for x in state.x],
        [p[rows] for p in state.p],
        state.times[rows],
        a1=a1,
        freeze=params.freeze_indicators,
    )
    return total - params.dt * float(np.sum(ham))


def solve(problem: Problem, params: SolverParams) -> Plan:
    """Run the primal-dual iteration to convergence and extract the plan.

    Convergence is declared when the max-norm state change stays below
    ``conv_tol`` for ``conv_window`` consecutive iterations. The returned
    plan is forward-time ordered (row 0 = query/start, row J = goal) with
    per-segment controls recovered from the converged costates. On
    non-convergence the plan is still returned, flagged.
    """
    t0 = time.perf_counter()
    state = initialize(problem, params)
    J = state.J
    diag = SolveDiagnostics(
        horizon_requested=problem.horizon, horizon=float(J * params.dt)
    )

    streak = 0
    iteration = -1
    residual = np.inf
    for iteration in range(params.max_iters):
        new_p = costate_sweep(state, problem.scene, problem.models, params, iteration)
        new_x, new_z, residual = state_descent(
            state, new_p, problem.scene, problem.models, params, iteration
        )
        state = SaddleState(x=new_x, p=new_p, z=new_z, times=state.times)
        streak = streak + 1 if residual < params.conv_tol else 0
        if params.value_sample_every and iteration % params.value_sample_every == 0:
            diag.value_history.append(
                (
                    iteration,
                    value_of(
                        state,
                        problem.scene,
                        problem.models,
                        params,
                        a1=params.a1_at(iteration),
                    ),
                )
            )
        if streak >= params.conv_window:
            diag.converged = True
            break

    diag.iterations = iteration + 1
    diag.final_residual = residual
    diag.a1_final = params.a1_at(max(iteration, 0))
    value = value_of(state, problem.scene, problem.models, params, a1=diag.a1_final)
    diag.value_history.append((diag.iterations, value))
    diag.wall_time = time.perf_counter() - t0

    # forward-time extraction: reversed rows, controls at each segment start
    fwd_states, fwd_controls = [], []
    for i, model in enumerate(problem.models):
        fwd_states.append(state.x[i][::-1].copy())
        xs = state.x[i][J:0:-1]
        ps = state.p[i][J:0:-1]
        ts = state.times[J:0:-1]
        fwd_controls.append(model.optimal_control(xs, ps, ts))
    return Plan(
        states=fwd_states,
        controls=fwd_controls,
        times=state.times.copy(),
        value=value,
        horizon=diag.horizon,
        diagnostics=diag,
        saddle=state,
    )
