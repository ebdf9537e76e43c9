"""Scenario-level orchestration: horizons, validation, replanning rollouts.

``plan_once`` wraps a single solve with horizon selection and hard-geometry
validation, retrying with a doubled horizon when an auto-horizon attempt
fails. ``rollout_with_discovery`` executes a plan step by step, reveals
hidden obstacles that come within sensing range, and replans from the
current states whenever that happens.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING

import numpy as np

from .dynamics import DynamicsModel
from .scene import Scene
from .solver import Plan, Problem, SolverParams, solve

if TYPE_CHECKING:  # pragma: no cover
    from .scenario_io import Scenario

__all__ = [
    "ValidationReport",
    "PlanResult",
    "RolloutEvent",
    "Rollout",
    "horizon_estimate",
    "validate",
    "plan_once",
    "rollout_with_discovery",
]

#: Second-order models get this much slack on top of feasibility bounds.
FEASIBILITY_SLACK = 1e-2
#: Gating threshold below which feasibility of a step is not enforced.
GATING_ACTIVE = 0.9


@dataclass
class ValidationReport:
    """Hard-geometry and feasibility audit of one plan."""

    collision_free: bool
    min_pair_distance: float
    min_obstacle_clearance: float
    goal_errors: list[float]
    feasibility_violations: list[tuple[int, int, str]]
    pair_hits: list[tuple[int, int]] = field(default_factory=list)
    obstacle_hits: list[tuple[int, int]] = field(default_factory=list)

    def ok(self, goal_tol: float) -> bool:
        return (
            self.collision_free
            and not self.feasibility_violations
            and all(e < goal_tol for e in self.goal_errors)
        )


@dataclass
class PlanResult:
    plan: Plan
    validation: ValidationReport
    attempts: int
    goal_tol: float

    @property
    def ok(self) -> bool:
        return self.plan.converged and self.validation.ok(self.goal_tol)


@dataclass
class RolloutEvent:
    """Timeline entry of a rollout: a discovery, a replan, or arrival."""

    kind: str  # "discovery" | "replan" | "arrival"
    time: float
    obstacle: int | None = None
    plan_index: int | None = None


@dataclass
class Rollout:
    plans: list[Plan]
    events: list[RolloutEvent]
    executed: list[np.ndarray]
    times: np.ndarray
    arrived: bool
    aborted: bool = False


def horizon_estimate(problem_or_scenario, kappa: float = 1.5, dt: float = 0.1) -> float:
    """Optimistic ensemble horizon: slack factor times the slowest agent's
    straight-line lower bound, rounded up to a multiple of dt."""
    models = problem_or_scenario.models
    starts = problem_or_scenario.starts
    scene = problem_or_scenario.scene if hasattr(problem_or_scenario, "scene") else None
    if scene is None:
        scene = problem_or_scenario.build_scene()
    bound = 0.0
    for i, model in enumerate(models):
        proj = scene.spatial_projection[i]
        dist = float(
            np.linalg.norm(np.asarray(starts[i])[proj] - scene.goal[i][proj])
        )
        bound = max(bound, model.travel_time_lower_bound(dist))
    t = kappa * bound
    steps = max(2, math.ceil(t / dt - 1e-9))
    return steps * dt


def _interpolate(states: np.ndarray, substeps: int) -> np.ndarray:
    """Densify a trajectory with ``substeps`` linear sub-points per segment."""
    if substeps <= 1:
        return states
    J = states.shape[0] - 1
    frac = np.arange(substeps) / substeps
    fine = (
        states[:-1, None, :] * (1.0 - frac)[None, :, None]
        + states[1:, None, :] * frac[None, :, None]
    ).reshape(J * substeps, -1)
    return np.vstack([fine, states[-1]])


def validate(
    plan: Plan,
    scene: Scene,
    models: list[DynamicsModel],
    include_hidden: bool = False,
    substeps: int = 4,
) -> ValidationReport:
    """Audit a plan against exact geometry and per-step feasibility bounds.

    Segments are sampled at ``substeps`` linear sub-points. Pair distance is
    measured between spatial positions; a pair passing at exactly delta is
    legal. Feasibility (speed/turn-rate bounds on the discrete increments) is
    enforced only where the gating factor is effectively active, i.e. away
    from the goal and outside obstacles.
    """
    n = len(models)
    fine = [
        _interpolate(plan.states[i], substeps)[:, scene.spatial_projection[i]]
        for i in range(n)
    ]
    min_pair = np.inf
    pair_hits = []
    for k in range(n):
        for l in range(k + 1, n):
            d = np.linalg.norm(fine[k] - fine[l], axis=-1)
            min_pair = min(min_pair, float(d.min()))
            if np.any(d < scene.delta):
                pair_hits.append((k, l))

    obstacles = scene.obstacles if include_hidden else scene.known_obstacles()
    min_clear = np.inf
    obstacle_hits = []
    for i in range(n):
        for j, obs in enumerate(scene.obstacles):
            if obs.hidden and not include_hidden:
                continue
            d = obs.signed_distance(fine[i])
            min_clear = min(min_clear, float(d.min()))
            if np.any(d < 0):
                obstacle_hits.append((i, j))

    goal_errors = [
        float(
            np.linalg.norm(
                plan.states[i][-1][scene.spatial_projection[i]]
                - scene.goal[i][scene.spatial_projection[i]]
            )
        )
        for i in range(n)
    ]

    # feasibility of the raw discrete increments, where gating is active
    # (sharp goal indicator: parked steps at the goal are exempt by design)
    chi, _ = scene.goal_indicator([s[:-1] for s in plan.states], a1=1000.0)
    coarse = [
        plan.states[i][:-1][:, scene.spatial_projection[i]] for i in range(n)
    ]
    coll = np.ones_like(chi)
    for k in range(n):
        for l in range(k + 1, n):
            c, _, _ = scene.pair_collision_indicator(coarse[k], coarse[l])
            coll = coll * c
    feas = []
    for i, model in enumerate(models):
        steps = np.diff(plan.states[i], axis=0) / (plan.times[1] - plan.times[0])
        q = plan.states[i][:-1][:, scene.spatial_projection[i]]
        o, _ = scene.obstacle_indicator(q)
        active = (chi * coll * o) > GATING_ACTIVE
        if model.kind == "isotropic":
            speed = np.linalg.norm(steps, axis=-1)
            bad = active & (speed > model.V * (1 + FEASIBILITY_SLACK))
            feas += [(i, int(k), "speed") for k in np.nonzero(bad)[0]]
        elif model.kind == "simple_car":
            speed = np.linalg.norm(steps[:, :2], axis=-1)
            turn = np.abs(steps[:, 2])
            bad = active & (speed > model.V * (1 + FEASIBILITY_SLACK))
            feas += [(i, int(k), "speed") for k in np.nonzero(bad)[0]]
            bad = active & (turn > model.W * (1 + FEASIBILITY_SLACK))
            feas += [(i, int(k), "turn_rate") for k in np.nonzero(bad)[0]]
        # acceleration-level models carry no state-only speed bound

    return ValidationReport(
        collision_free=not pair_hits and not obstacle_hits,
        min_pair_distance=min_pair,
        min_obstacle_clearance=min_clear,
        goal_errors=goal_errors,
        feasibility_violations=feas,
        pair_hits=pair_hits,
        obstacle_hits=obstacle_hits,
    )


def _inflated(scene: Scene, margin: float) -> Scene:
    """Scene with obstacle radii grown by ``margin`` (planning safety pad)."""
    if margin <= 0:
        return scene
    obstacles = [replace(o, radius=o.radius + margin) for o in scene.obstacles]
    return replace(scene, obstacles=obstacles)


def plan_once(scenario: "Scenario", params: SolverParams | None = None) -> PlanResult:
    """Solve one scenario: pick the horizon, solve, validate.

    The solve runs against obstacles inflated by the scenario's
    ``obstacle_margin`` (smooth gating has a soft boundary, so plans can
    shave a few hundredths off an obstacle; the pad absorbs that), while
    validation always uses the true geometry. With an auto horizon, a failed
    attempt (non-converged, colliding, infeasible, or short of the goal)
    doubles the horizon and retries, at most three times.
    """
    scene = scenario.build_scene()
    solve_scene = _inflated(scene, scenario.obstacle_margin)
    params = params if params is not None else scenario.solver
    auto = scenario.horizon == "auto"
    if auto:
        t = horizon_estimate(scenario, kappa=scenario.kappa, dt=params.dt)
    else:
        t = float(scenario.horizon)

    attempts = 0
    while True:
        attempts += 1
        problem = Problem(
            scene=solve_scene, models=scenario.models, starts=scenario.starts, horizon=t
        )
        plan = solve(problem, params)
        report = validate(plan, scene, scenario.models)
        result = PlanResult(
            plan=plan, validation=report, attempts=attempts, goal_tol=scenario.goal_tol
        )
        result.plan.diagnostics.attempts = attempts
        if result.ok or not auto or attempts > 3:
            return result
        t *= 2.0


def _discoveries(scene: Scene, positions: list[np.ndarray], sense_radius: float):
    found = []
    for j, obs in enumerate(scene.obstacles):
        if not obs.hidden:
            continue
        for q in positions:
            if obs.signed_distance(q) <= sense_radius:
                found.append(j)
                break
    return found


def rollout_with_discovery(
    scenario: "Scenario",
    sense_radius: float | None = None,
    max_steps: int = 100000,
) -> Rollout:
    """Execute with en-route obstacle discovery and replanning.

    The current plan is executed one time step at a time. After each step,
    any hidden obstacle whose surface lies within ``sense_radius`` of any
    agent's position is discovered; the agents then stop following the stale
    plan, the remaining horizon is re-estimated from the current states, and
    a new plan is solved. The rollout ends at arrival (all spatial goal
    errors below the scenario tolerance) or when the step budget runs out.
    Replanning failure aborts the rollout, keeping the partial trace.
    """
    if sense_radius is None:
        sense_radius = (
            scenario.sense_radius
            if scenario.sense_radius is not None
            else 3.0 * scenario.delta
        )
    if sense_radius <= 0:
        raise ValueError("sense_radius must be positive")

    # private obstacle copies: discoveries flip flags in place without
    # touching the caller's scenario
    current = replace(scenario, obstacles=[copy.deepcopy(o) for o in scenario.obstacles])
    scene = current.build_scene()
    goal_sp = [scene.goal[i][scene.spatial_projection[i]] for i in range(scene.n_agents)]

    plans: list[Plan] = []
    events: list[RolloutEvent] = []
    executed = [[np.asarray(s, dtype=float).copy()] for s in scenario.starts]
    dt = scenario.solver.dt
    t_glob = 0.0
    arrived = False
    aborted = False

    result = plan_once(current)
    plans.append(result.plan)
    if not result.plan.converged:
        aborted = True

    k = 0
    steps = 0
    while not aborted and steps < max_steps:
        steps += 1
        k += 1
        plan = plans[-1]
        if k >= len(plan.times):
            aborted = True  # plan exhausted without reaching the goal
            break
        states_now = [plan.states[i][k] for i in range(scene.n_agents)]
        for i, s in enumerate(states_now):
            executed[i].append(s.copy())
        t_glob += dt

        positions = [
            states_now[i][scene.spatial_projection[i]] for i in range(scene.n_agents)
        ]
        errors = [np.linalg.norm(positions[i] - goal_sp[i]) for i in range(scene.n_agents)]
        if max(errors) < scenario.goal_tol:
            events.append(RolloutEvent(kind="arrival", time=t_glob))
            arrived = True
            break

        found = _discoveries(scene, positions, sense_radius)
        if found:
            for j in found:
                scene.discover(j)
                events.append(RolloutEvent(kind="discovery", time=t_glob, obstacle=j))
            current = replace(
                current,
                starts=[s.copy() for s in states_now],
                horizon="auto",
                solver=replace(current.solver, seed=current.solver.seed + 1),
            )
            result = plan_once(current)
            plans.append(result.plan)
            events.append(
                RolloutEvent(kind="replan", time=t_glob, plan_index=len(plans) - 1)
            )
            if not result.plan.converged:
                aborted = True
                break
            k = 0

    times = dt * np.arange(len(executed[0]))
    return Rollout(
        plans=plans,
        events=events,
        executed=[np.asarray(traj) for traj in executed],
        times=times,
        arrived=arrived,
        aborted=aborted,
    )
