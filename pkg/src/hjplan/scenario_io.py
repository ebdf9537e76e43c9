"""Scenario file parsing, output serialization, and plot-data emission.

Scenarios are JSON. Unknown keys are rejected with their location, defaults
are filled exactly as documented on ``SolverParams``, and the step-size
constraint sigma*tau <= 0.25 is enforced at parse time.

Outputs are a self-describing JSON document plus one flat CSV per agent
(columns ``t,x1..xn``, nine fixed decimals) suitable for any plotter. Output
files contain no timing information, so identical seeded runs serialize
byte-identically; wall times are reported by the CLI and the bench harness.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .dynamics import DynamicsModel, model_from_config
from .planner import PlanResult, Rollout
from .scene import Obstacle, Scene
from .solver import Plan, SolverParams

__all__ = [
    "Scenario",
    "ScenarioError",
    "parse_scenario",
    "scenario_from_dict",
    "scenario_to_dict",
    "write_scenario",
    "write_outputs",
    "read_output",
]


class ScenarioError(ValueError):
    """Malformed scenario or output file; message carries the location."""


@dataclass
class Scenario:
    """Parsed scenario: agents, environment, solver configuration."""

    models: list[DynamicsModel]
    starts: list[np.ndarray]
    goals: list[np.ndarray]
    obstacles: list[Obstacle] = field(default_factory=list)
    delta: float = 0.2
    A1: float = 10.0
    A2: float = 100.0
    A3: float = 100.0
    solver: SolverParams = field(default_factory=SolverParams)
    horizon: float | str = "auto"
    sense_radius: float | None = None
    goal_tol: float = 0.05
    kappa: float = 1.5
    obstacle_margin: float = 0.0
    goal_components: list[list[int] | None] | None = None

    def __post_init__(self):
        self.starts = [np.asarray(s, dtype=float) for s in self.starts]
        self.goals = [np.asarray(g, dtype=float) for g in self.goals]

    def build_scene(self) -> Scene:
        """Scene over this scenario's obstacle objects (shared, not copied,
        so in-place discovery is visible to subsequent builds)."""
        goal_projection = None
        if self.goal_components is not None:
            goal_projection = [
                np.arange(m.state_dim) if c is None else np.asarray(c, dtype=int)
                for m, c in zip(self.models, self.goal_components)
            ]
        return Scene(
            obstacles=self.obstacles,
            delta=self.delta,
            goal=[g.copy() for g in self.goals],
            spatial_projection=[m.spatial_indices for m in self.models],
            A1=self.A1,
            A2=self.A2,
            A3=self.A3,
            goal_projection=goal_projection,
        )


_AGENT_KEYS = {
    "isotropic": {"kind", "V", "start", "goal", "goal_components"},
    "simple_car": {"kind", "V", "W", "start", "goal", "goal_components"},
    "quadcopter": {"kind", "g", "speed_proxy", "start", "goal", "goal_components"},
}
_OBSTACLE_KEYS = {
    "disk": {"shape", "center", "radius", "hidden"},
    "sphere": {"shape", "center", "radius", "hidden"},
    "cylinder": {"shape", "center", "radius", "z", "hidden"},
}
_SOLVER_KEYS = {f.name for f in dataclasses.fields(SolverParams)}
_TOP_KEYS = {
    "agents",
    "obstacles",
    "delta",
    "A1",
    "A2",
    "A3",
    "solver",
    "horizon",
    "sense_radius",
    "goal_tol",
    "kappa",
    "obstacle_margin",
    "seed",
}


def _reject_unknown(d: dict, allowed: set, where: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ScenarioError(f"{where}: unknown key(s) {sorted(unknown)}")


def _state_vector(raw, model: DynamicsModel, where: str) -> np.ndarray:
    vec = np.asarray(raw, dtype=float)
    if vec.ndim != 1:
        raise ScenarioError(f"{where}: expected a flat list of numbers")
    if vec.shape[0] == model.state_dim:
        return vec
    spatial = len(model.spatial_indices)
    if vec.shape[0] == spatial and spatial != model.state_dim:
        full = np.zeros(model.state_dim)
        full[model.spatial_indices] = vec
        return full
    raise ScenarioError(
        f"{where}: expected {model.state_dim} components "
        f"(or {spatial} spatial ones), got {vec.shape[0]}"
    )


def _parse_agent(rec: dict, where: str):
    if not isinstance(rec, dict):
        raise ScenarioError(f"{where}: agent record must be an object")
    kind = rec.get("kind")
    if kind not in _AGENT_KEYS:
        raise ScenarioError(
            f"{where}.kind: expected one of {sorted(_AGENT_KEYS)}, got {kind!r}"
        )
    _reject_unknown(rec, _AGENT_KEYS[kind], where)
    for required in ("start", "goal"):
        if required not in rec:
            raise ScenarioError(f"{where}: missing {required!r}")
    try:
        if kind == "isotropic":
            dim = len(rec["start"]) if len(rec["start"]) in (2, 3) else 2
            model = model_from_config(kind, V=rec.get("V", 1.0), dim=dim)
        elif kind == "simple_car":
            model = model_from_config(kind, V=rec.get("V", 1.0), W=rec.get("W", 2.0))
        else:
            model = model_from_config(
                kind, g=rec.get("g", 0.1), speed_proxy=rec.get("speed_proxy")
            )
    except ValueError as err:
        raise ScenarioError(f"{where}: {err}") from None
    start = _state_vector(rec["start"], model, f"{where}.start")
    goal = _state_vector(rec["goal"], model, f"{where}.goal")
    comps = rec.get("goal_components")
    return model, start, goal, comps


def _parse_obstacle(rec: dict, where: str) -> Obstacle:
    if not isinstance(rec, dict):
        raise ScenarioError(f"{where}: obstacle record must be an object")
    shape = rec.get("shape")
    if shape not in _OBSTACLE_KEYS:
        raise ScenarioError(
            f"{where}.shape: expected one of {sorted(_OBSTACLE_KEYS)}, got {shape!r}"
        )
    _reject_unknown(rec, _OBSTACLE_KEYS[shape], where)
    try:
        z = rec.get("z")
        return Obstacle(
            shape=shape,
            center=np.asarray(rec["center"], dtype=float),
            radius=float(rec["radius"]),
            z_interval=None if z is None else (float(z[0]), float(z[1])),
            hidden=bool(rec.get("hidden", False)),
        )
    except (KeyError, ValueError, TypeError, IndexError) as err:
        raise ScenarioError(f"{where}: {err}") from None


def scenario_from_dict(data: dict, where: str = "scenario") -> Scenario:
    if not isinstance(data, dict):
        raise ScenarioError(f"{where}: top level must be an object")
    _reject_unknown(data, _TOP_KEYS, where)
    agents = data.get("agents")
    if not agents:
        raise ScenarioError(f"{where}.agents: at least one agent is required")

    models, starts, goals, comps = [], [], [], []
    for idx, rec in enumerate(agents):
        m, s, g, c = _parse_agent(rec, f"{where}.agents[{idx}]")
        models.append(m)
        starts.append(s)
        goals.append(g)
        comps.append(c)
    goal_components = comps if any(c is not None for c in comps) else None

    obstacles = [
        _parse_obstacle(rec, f"{where}.obstacles[{idx}]")
        for idx, rec in enumerate(data.get("obstacles", []))
    ]

    solver_cfg = dict(data.get("solver", {}))
    _reject_unknown(solver_cfg, _SOLVER_KEYS, f"{where}.solver")
    if "seed" in data:
        if "seed" in solver_cfg:
            raise ScenarioError(
                f"{where}: seed given both at top level and in solver block"
            )
        solver_cfg["seed"] = data["seed"]
    try:
        solver = SolverParams(**solver_cfg)
    except (TypeError, ValueError) as err:
        raise ScenarioError(f"{where}.solver: {err}") from None

    horizon = data.get("horizon", "auto")
    if horizon != "auto":
        try:
            horizon = float(horizon)
        except (TypeError, ValueError):
            raise ScenarioError(
                f"{where}.horizon: expected a number or \"auto\""
            ) from None
        if horizon <= 0:
            raise ScenarioError(f"{where}.horizon: must be positive")

    try:
        return Scenario(
            models=models,
            starts=starts,
            goals=goals,
            obstacles=obstacles,
            delta=float(data.get("delta", 0.2)),
            A1=float(data.get("A1", 10.0)),
            A2=float(data.get("A2", 100.0)),
            A3=float(data.get("A3", 100.0)),
            solver=solver,
            horizon=horizon,
            sense_radius=(
                None if data.get("sense_radius") is None else float(data["sense_radius"])
            ),
            goal_tol=float(data.get("goal_tol", 0.05)),
            kappa=float(data.get("kappa", 1.5)),
            obstacle_margin=float(data.get("obstacle_margin", 0.0)),
            goal_components=goal_components,
        )
    except ValueError as err:
        raise ScenarioError(f"{where}: {err}") from None


def parse_scenario(path: str | Path) -> Scenario:
    """Parse and validate a scenario file (strict: unknown keys rejected)."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ScenarioError(f"{path}:{err.lineno}:{err.colno}: {err.msg}") from None
    return scenario_from_dict(data, where=str(path))


def _agent_dict(model: DynamicsModel, start, goal, comps) -> dict:
    rec: dict = {"kind": model.kind}
    if model.kind == "isotropic":
        rec["V"] = model.V
    elif model.kind == "simple_car":
        rec["V"] = model.V
        rec["W"] = model.W
    else:
        rec["g"] = model.g
        if model.speed_proxy is not None:
            rec["speed_proxy"] = model.speed_proxy
    rec["start"] = np.asarray(start, dtype=float).tolist()
    rec["goal"] = np.asarray(goal, dtype=float).tolist()
    if comps is not None:
        rec["goal_components"] = list(comps)
    return rec


def scenario_to_dict(sc: Scenario) -> dict:
    comps = sc.goal_components or [None] * len(sc.models)
    return {
        "agents": [
            _agent_dict(m, s, g, c)
            for m, s, g, c in zip(sc.models, sc.starts, sc.goals, comps)
        ],
        "obstacles": [
            {
                "shape": o.shape,
                "center": o.center.tolist(),
                "radius": o.radius,
                **({"z": list(o.z_interval)} if o.z_interval is not None else
                   ({"z": None} if o.shape == "cylinder" else {})),
                "hidden": o.hidden,
            }
            for o in sc.obstacles
        ],
        "delta": sc.delta,
        "A1": sc.A1,
        "A2": sc.A2,
        "A3": sc.A3,
        "solver": dataclasses.asdict(sc.solver),
        "horizon": sc.horizon,
        "sense_radius": sc.sense_radius,
        "goal_tol": sc.goal_tol,
        "kappa": sc.kappa,
        "obstacle_margin": sc.obstacle_margin,
    }


def write_scenario(sc: Scenario, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(sc), indent=2, sort_keys=True))


# ----------------------------------------------------------------------
# outputs
# ----------------------------------------------------------------------


def _diag_dict(plan: Plan) -> dict:
    d = plan.diagnostics
    return {
        "iterations": d.iterations,
        "final_residual": d.final_residual,
        "converged": d.converged,
        "horizon_requested": d.horizon_requested,
        "horizon": d.horizon,
        "a1_final": d.a1_final,
        "attempts": d.attempts,
        "value_history": [[it, v] for it, v in d.value_history],
    }


def _plan_dict(plan: Plan, models: list[DynamicsModel]) -> dict:
    return {
        "value": plan.value,
        "horizon": plan.horizon,
        "times": plan.times.tolist(),
        "agents": [
            {
                "kind": models[i].kind,
                "states": plan.states[i].tolist(),
                "controls": plan.controls[i].tolist(),
            }
            for i in range(len(models))
        ],
        "diagnostics": _diag_dict(plan),
    }


def _write_csv(path: Path, times: np.ndarray, states: np.ndarray) -> None:
    n = states.shape[1]
    header = "t," + ",".join(f"x{k + 1}" for k in range(n))
    rows = [header]
    for t, row in zip(times, states):
        rows.append(",".join(f"{v:.9f}" for v in np.concatenate([[t], row])))
    path.write_text("\n".join(rows) + "\n")


def write_outputs(
    result: PlanResult | Rollout, outdir: str | Path, scenario: Scenario
) -> Path:
    """Serialize a plan or rollout: ``result.json`` plus per-agent CSVs.

    Deterministic by construction (sorted keys, no timing fields), so two
    identically seeded sequential runs produce byte-identical files.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    doc: dict = {
        "tool": "hjplan",
        "version": __version__,
        "scenario": scenario_to_dict(scenario),
    }
    if isinstance(result, PlanResult):
        doc["kind"] = "plan"
        doc.update(_plan_dict(result.plan, scenario.models))
        doc["validation"] = _validation_dict(result)
        traj = result.plan.states
        times = result.plan.times
    else:
        doc["kind"] = "rollout"
        doc["arrived"] = result.arrived
        doc["aborted"] = result.aborted
        doc["times"] = result.times.tolist()
        doc["agents"] = [
            {"kind": m.kind, "states": traj.tolist()}
            for m, traj in zip(scenario.models, result.executed)
        ]
        doc["events"] = [
            {
                "kind": e.kind,
                "time": e.time,
                **({"obstacle": e.obstacle} if e.obstacle is not None else {}),
                **({"plan_index": e.plan_index} if e.plan_index is not None else {}),
            }
            for e in result.events
        ]
        doc["plans"] = [_plan_dict(p, scenario.models) for p in result.plans]
        traj = result.executed
        times = result.times
    out = outdir / "result.json"
    out.write_text(json.dumps(doc, indent=1, sort_keys=True))
    for i, states in enumerate(traj):
        _write_csv(outdir / f"agent_{i:02d}.csv", times, np.asarray(states))
    return out


def _validation_dict(result: PlanResult) -> dict:
    v = result.validation
    return {
        "collision_free": v.collision_free,
        "min_pair_distance": v.min_pair_distance,
        "min_obstacle_clearance": v.min_obstacle_clearance,
        "goal_errors": v.goal_errors,
        "feasibility_violations": [list(f) for f in v.feasibility_violations],
        "pair_hits": [list(h) for h in v.pair_hits],
        "obstacle_hits": [list(h) for h in v.obstacle_hits],
        "ok": result.ok,
    }


def read_output(path: str | Path) -> dict:
    """Reload a result file written by ``write_outputs``."""
    path = Path(path)
    if path.is_dir():
        path = path / "result.json"
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ScenarioError(f"{path}:{err.lineno}:{err.colno}: {err.msg}") from None
    if data.get("tool") != "hjplan":
        raise ScenarioError(f"{path}: not an hjplan output file")
    return data
