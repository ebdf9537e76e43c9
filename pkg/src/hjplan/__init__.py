"""Grid-free, time-optimal, collisionless multi-agent path planning.

The planner evaluates the value function of a terminal-cost optimal control
problem at a single point by solving a discrete saddle-point problem with a
primal-dual hybrid gradient iteration, returning both the minimal travel
time and explicit trajectories for heterogeneous agents (isotropic points,
simple cars, quadcopters) among static obstacles.
"""

__version__ = "0.1.0"

from .dynamics import (
    CostateProxInput,
    DynamicsModel,
    IsotropicModel,
    QuadcopterModel,
    SimpleCarModel,
    model_from_config,
)
from .scene import CollisionReport, Obstacle, Scene
from .solver import (
    Plan,
    Problem,
    SaddleState,
    SolveDiagnostics,
    SolverParams,
    holistic_hamiltonian,
    holistic_hamiltonian_agent_gradient,
    initialize,
    solve,
    value_of,
)
from .planner import (
    PlanResult,
    Rollout,
    RolloutEvent,
    ValidationReport,
    horizon_estimate,
    plan_once,
    rollout_with_discovery,
    validate,
)
from .scenario_io import (
    Scenario,
    ScenarioError,
    parse_scenario,
    read_output,
    scenario_from_dict,
    scenario_to_dict,
    write_outputs,
    write_scenario,
)

__all__ = [
    "__version__",
    "CollisionReport",
    "CostateProxInput",
    "DynamicsModel",
    "IsotropicModel",
    "Obstacle",
    "Plan",
    "PlanResult",
    "Problem",
    "QuadcopterModel",
    "Rollout",
    "RolloutEvent",
    "SaddleState",
    "Scenario",
    "ScenarioError",
    "Scene",
    "SimpleCarModel",
    "SolveDiagnostics",
    "SolverParams",
    "ValidationReport",
    "holistic_hamiltonian",
    "holistic_hamiltonian_agent_gradient",
    "horizon_estimate",
    "initialize",
    "model_from_config",
    "parse_scenario",
    "plan_once",
    "read_output",
    "rollout_with_discovery",
    "scenario_from_dict",
    "scenario_to_dict",
    "solve",
    "validate",
    "value_of",
    "write_outputs",
    "write_scenario",
]
