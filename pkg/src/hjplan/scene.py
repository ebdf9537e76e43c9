"""Obstacle geometry, signed distances, and the smooth gating indicators.

The planner never imposes hard state constraints. Instead, three smooth
indicator functions multiply the agent dynamics and shut them off in illegal
or terminal configurations:

* ``goal_indicator``      -- 0 exactly when every agent sits at its goal state,
                             approaching 1 far away,
* ``pair_collision_indicator`` -- ~0 when two agents are closer than the
                             collision radius ``delta``, ~1 when separated,
* ``obstacle_indicator``  -- ~0 inside an obstacle, ~1 in free space.

All indicators are smooth, map into [0, 1], and come with analytic gradients.
Hard (exact-geometry) collision checks live in ``hard_collision_report`` and
are used for trajectory validation, never inside the solver.

Every evaluation helper broadcasts over leading axes: a point argument of
shape ``(..., d)`` yields values of shape ``(...,)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "Obstacle",
    "Scene",
    "CollisionReport",
]

#: Signed distance reported when a scene has no visible obstacles.
NO_OBSTACLE_DISTANCE = np.inf


@dataclass
class Obstacle:
    """A single static obstacle of simple geometry.

    shape:
        ``"disk"`` (2-D), ``"sphere"`` (3-D) or ``"cylinder"`` (3-D, vertical
        axis through ``center``; infinite in z unless ``z_interval`` caps it).
    hidden:
        Hidden obstacles are invisible to planning (signed distance and
        indicators skip them) until discovered, at which point the flag is
        flipped in place.
    """

    shape: str
    center: np.ndarray
    radius: float
    z_interval: tuple[float, float] | None = None
    hidden: bool = False

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        if self.shape not in ("disk", "sphere", "cylinder"):
            raise ValueError(f"unknown obstacle shape {self.shape!r}")
        if self.radius <= 0:
            raise ValueError("obstacle radius must be positive")
        expected = {"disk": 2, "sphere": 3, "cylinder": 2}[self.shape]
        if self.center.shape != (expected,):
            raise ValueError(
                f"{self.shape} center must have {expected} components, "
                f"got shape {self.center.shape}"
            )
        if self.z_interval is not None:
            if self.shape != "cylinder":
                raise ValueError("z_interval only applies to cylinders")
            z0, z1 = self.z_interval
            if not z1 > z0:
                raise ValueError("cylinder z-interval must be nonempty")

    @property
    def dim(self) -> int:
        """Ambient spatial dimension this obstacle lives in."""
        return 2 if self.shape == "disk" else 3

    def signed_distance(self, q: np.ndarray) -> np.ndarray:
        """Exact signed distance from points ``q`` (negative inside)."""
        q = np.asarray(q, dtype=float)
        if self.shape in ("disk", "sphere"):
            return np.linalg.norm(q - self.center, axis=-1) - self.radius
        # vertical cylinder: radial distance in the xy-plane
        a = np.linalg.norm(q[..., :2] - self.center, axis=-1) - self.radius
        if self.z_interval is None:
            return a
        z0, z1 = self.z_interval
        b = np.maximum(z0 - q[..., 2], q[..., 2] - z1)
        # exact SDF of the intersection of the infinite cylinder and the slab
        return np.minimum(np.maximum(a, b), 0.0) + np.hypot(
            np.maximum(a, 0.0), np.maximum(b, 0.0)
        )

    def signed_distance_gradient(self, q: np.ndarray) -> np.ndarray:
        """Gradient of the signed distance; zero at non-differentiable points."""
        return self.signed_distance_and_gradient(q)[1]

    def signed_distance_and_gradient(
        self, q: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        """Signed distance and its gradient in one pass."""
        q = np.asarray(q, dtype=float)
        if self.shape in ("disk", "sphere"):
            diff = q - self.center
            n = np.sqrt(np.sum(diff * diff, axis=-1, keepdims=True))
            grad = np.divide(diff, n, out=np.zeros_like(diff), where=n > 0)
            return n[..., 0] - self.radius, grad

        grad = np.zeros_like(q)
        diff = q[..., :2] - self.center
        n = np.sqrt(np.sum(diff * diff, axis=-1, keepdims=True))
        radial = np.divide(diff, n, out=np.zeros_like(diff), where=n > 0)
        a = n[..., 0] - self.radius
        if self.z_interval is None:
            grad[..., :2] = radial
            return a, grad

        z0, z1 = self.z_interval
        b = np.maximum(z0 - q[..., 2], q[..., 2] - z1)
        zsign = np.where(q[..., 2] - z1 >= z0 - q[..., 2], 1.0, -1.0)
        dist = np.minimum(np.maximum(a, b), 0.0) + np.hypot(
            np.maximum(a, 0.0), np.maximum(b, 0.0)
        )

        outside = (a > 0) | (b > 0)
        ap = np.maximum(a, 0.0)
        bp = np.maximum(b, 0.0)
        h = np.hypot(ap, bp)
        h = np.where(h > 0, h, 1.0)
        grad[..., :2] = np.where(
            outside[..., None], (ap / h)[..., None] * radial, 0.0
        )
        grad[..., 2] = np.where(outside, (bp / h) * zsign, 0.0)
        # inside: gradient of max(a, b)
        a_active = a >= b
        grad[..., :2] = np.where(
            (~outside & a_active)[..., None], radial, grad[..., :2]
        )
        grad[..., 2] = np.where(~outside & ~a_active, zsign, grad[..., 2])
        return dist, grad


@dataclass
class CollisionReport:
    """Exact-geometry violation report for one ensemble configuration.

    ``pair_violations`` lists agent index pairs with center distance strictly
    below delta; ``obstacle_violations`` lists (agent, obstacle) pairs with
    strictly negative signed distance. Boundary contact is legal.
    """

    pair_violations: list[tuple[int, int]] = field(default_factory=list)
    obstacle_violations: list[tuple[int, int]] = field(default_factory=list)

    @property
    def clean(self) -> bool:
        return not self.pair_violations and not self.obstacle_violations


@dataclass
class Scene:
    """Static environment: obstacles, collision radius, goal configuration.

    ``goal`` holds one full goal state per agent; ``spatial_projection`` holds
    the index set selecting the spatial components of each agent's state (the
    components obstacle and pair indicators act on). ``goal_projection``
    optionally restricts which components the goal indicator measures
    (default: the full state, so dynamic agents must arrive stopped).

    A scene is immutable during a solve. The only sanctioned mutation is
    ``discover``, flipping a hidden obstacle to known between solves.
    """

    obstacles: list[Obstacle]
    delta: float
    goal: list[np.ndarray]
    spatial_projection: list[np.ndarray]
    A1: float = 10.0
    A2: float = 100.0
    A3: float = 100.0
    goal_projection: list[np.ndarray] | None = None

    def __post_init__(self):
        self.goal = [np.asarray(g, dtype=float) for g in self.goal]
        self.spatial_projection = [
            np.asarray(ix, dtype=int) for ix in self.spatial_projection
        ]
        if self.delta <= 0:
            raise ValueError("collision radius delta must be positive")
        if min(self.A1, self.A2, self.A3) <= 0:
            raise ValueError("sharpness constants A1, A2, A3 must be positive")
        if len(self.goal) != len(self.spatial_projection):
            raise ValueError("one spatial projection required per agent")
        dims = {len(ix) for ix in self.spatial_projection}
        if not dims <= {2, 3} or len(dims) > 1:
            raise ValueError("spatial projections must select 2 or 3 coordinates, uniformly")
        for g, ix in zip(self.goal, self.spatial_projection):
            if ix.size and ix.max() >= g.shape[0]:
                raise ValueError("spatial projection indexes past the agent state")
        for obs in self.obstacles:
            if obs.dim != self.dim:
                raise ValueError(
                    f"{obs.shape} obstacle is {obs.dim}-D but the scene is {self.dim}-D"
                )
        if self.goal_projection is not None:
            self.goal_projection = [
                np.asarray(ix, dtype=int) for ix in self.goal_projection
            ]
            if len(self.goal_projection) != len(self.goal):
                raise ValueError("one goal projection required per agent")

    @property
    def dim(self) -> int:
        """Ambient spatial dimension (2 or 3)."""
        return len(self.spatial_projection[0])

    @property
    def n_agents(self) -> int:
        return len(self.goal)

    def known_obstacles(self) -> list[Obstacle]:
        return [o for o in self.obstacles if not o.hidden]

    def discover(self, index: int) -> None:
        """Flip obstacle ``index`` from hidden to known (in place)."""
        self.obstacles[index].hidden = False

    def _check_point(self, q: np.ndarray) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        if q.shape[-1] != self.dim:
            raise ValueError(
                f"point dimension {q.shape[-1]} does not match scene dimension {self.dim}"
            )
        return q

    # ------------------------------------------------------------------
    # signed distance and smooth indicators
    # ------------------------------------------------------------------

    def signed_distance(
        self, q: np.ndarray, t: float = 0.0, include_hidden: bool = False
    ) -> np.ndarray:
        """Min signed distance over visible obstacles (+inf when there are none)."""
        q = self._check_point(q)
        obstacles = self.obstacles if include_hidden else self.known_obstacles()
        if not obstacles:
            return np.full(q.shape[:-1], NO_OBSTACLE_DISTANCE)
        return np.min([o.signed_distance(q) for o in obstacles], axis=0)

    def signed_distance_and_gradient(
        self, q: np.ndarray, t: float = 0.0
    ) -> tuple[np.ndarray, np.ndarray]:
        """Signed distance to known obstacles and its spatial gradient.

        Obstacle unions take the pointwise min, so the gradient follows the
        closest obstacle (ties broken by obstacle order).
        """
        q = self._check_point(q)
        obstacles = self.known_obstacles()
        if not obstacles:
            return (
                np.full(q.shape[:-1], NO_OBSTACLE_DISTANCE),
                np.zeros_like(q),
            )
        both = [o.signed_distance_and_gradient(q) for o in obstacles]
        if len(both) == 1:
            return both[0]
        dists = np.stack([d for d, _ in both], axis=0)
        winner = np.argmin(dists, axis=0)
        d = np.take_along_axis(dists, winner[None], axis=0)[0]
        grads = np.stack([g for _, g in both], axis=0)
        grad = np.take_along_axis(grads, winner[None, ..., None], axis=0)[0]
        return d, grad

    def obstacle_value(self, q: np.ndarray, t: float = 0.0) -> np.ndarray:
        """Value of ``obstacle_indicator`` without the gradient (cheaper)."""
        q = self._check_point(q)
        obstacles = self.known_obstacles()
        if not obstacles:
            return np.ones(q.shape[:-1])
        d = np.min([o.signed_distance(q) for o in obstacles], axis=0)
        return 0.5 * (1.0 + np.tanh(self.A3 * d * np.abs(d)))

    def pair_value(self, q_k: np.ndarray, q_l: np.ndarray) -> np.ndarray:
        """Value of ``pair_collision_indicator`` without gradients (cheaper)."""
        diff = np.asarray(q_k, dtype=float) - np.asarray(q_l, dtype=float)
        s = np.sum(diff * diff, axis=-1)
        return 0.5 * (1.0 + np.tanh(self.A2 * (s - self.delta**2)))

    def obstacle_indicator(
        self, q: np.ndarray, t: float = 0.0
    ) -> tuple[np.ndarray, np.ndarray]:
        """Smooth free-space indicator: ~0 inside obstacles, ~1 outside.

        Uses the sign-preserving sharpening 0.5*(1 + tanh(A3 * d|d|)) of the
        signed distance d, so the value is exactly 0.5 on obstacle boundaries.
        Returns (value, gradient w.r.t. q).
        """
        q = self._check_point(q)
        if not self.known_obstacles():
            return np.ones(q.shape[:-1]), np.zeros_like(q)
        d, dgrad = self.signed_distance_and_gradient(q, t)
        th = np.tanh(self.A3 * d * np.abs(d))
        value = 0.5 * (1.0 + th)
        coeff = self.A3 * np.abs(d) * (1.0 - th * th)
        return value, coeff[..., None] * dgrad

    def pair_collision_indicator(
        self, q_k: np.ndarray, q_l: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Smooth separation indicator for one agent pair.

        0.5*(1 + tanh(A2*(|q_k - q_l|^2 - delta^2))): ~0 when closer than
        delta, 0.5 at exactly delta, ~1 when well separated. Returns
        (value, gradient w.r.t. q_k, gradient w.r.t. q_l); the value is
        symmetric and the gradients are opposite.
        """
        q_k = self._check_point(q_k)
        q_l = self._check_point(q_l)
        diff = q_k - q_l
        s = np.sum(diff * diff, axis=-1)
        th = np.tanh(self.A2 * (s - self.delta**2))
        value = 0.5 * (1.0 + th)
        grad_k = (self.A2 * (1.0 - th * th))[..., None] * diff
        return value, grad_k, -grad_k

    def goal_indicator(
        self, states: Sequence[np.ndarray], a1: float | None = None
    ) -> tuple[np.ndarray, list[np.ndarray]]:
        """Smooth arrival indicator: 0 at the goal configuration, ->1 far away.

        1 - exp(-A1 * sum_i |x_i - x_{i,f}|^2), measured over each agent's
        goal-projection components (the full state by default). ``a1``
        overrides the scene constant; the solver passes its scheduled value.
        Returns (value, per-agent gradients).
        """
        a1 = self.A1 if a1 is None else a1
        diffs = []
        total = 0.0
        for i, x in enumerate(states):
            x = np.asarray(x, dtype=float)
            d = x - self.goal[i]
            if self.goal_projection is not None:
                mask = np.zeros(x.shape[-1])
                mask[self.goal_projection[i]] = 1.0
                d = d * mask
            diffs.append(d)
            total = total + np.sum(d * d, axis=-1)
        decay = np.exp(-a1 * total)
        grads = [2.0 * a1 * decay[..., None] * d for d in diffs]
        return 1.0 - decay, grads

    def holistic_collision(
        self, positions: Sequence[np.ndarray]
    ) -> tuple[np.ndarray, list[np.ndarray]]:
        """Product of all pairwise separation indicators, with gradients.

        Empty product (fewer than two agents) is 1 with zero gradients.
        Gradients use the product rule, so pairs at exactly 0 are handled.
        """
        n = len(positions)
        positions = [self._check_point(q) for q in positions]
        shape = np.broadcast_shapes(*(q.shape[:-1] for q in positions)) if n else ()
        value = np.ones(shape)
        grads = [np.zeros(shape + (q.shape[-1],)) for q in positions]
        pair_vals = {}
        pair_grads = {}
        for k in range(n):
            for l in range(k + 1, n):
                c, gk, gl = self.pair_collision_indicator(positions[k], positions[l])
                pair_vals[(k, l)] = c
                pair_grads[(k, l)] = (gk, gl)
                value = value * c
        for (k, l), (gk, gl) in pair_grads.items():
            rest = np.ones(shape)
            for other, c in pair_vals.items():
                if other != (k, l):
                    rest = rest * c
            grads[k] = grads[k] + rest[..., None] * gk
            grads[l] = grads[l] + rest[..., None] * gl
        return value, grads

    # ------------------------------------------------------------------
    # exact checks
    # ------------------------------------------------------------------

    def hard_collision_report(
        self,
        positions: Sequence[np.ndarray],
        t: float = 0.0,
        include_hidden: bool = False,
    ) -> CollisionReport:
        """Exact violation report: pair distance < delta, obstacle depth < 0.

        Boundary contact (distance exactly delta, or signed distance exactly
        zero) is legal. With ``include_hidden`` the check also covers hidden
        obstacles, assessing ground-truth safety of a plan made in ignorance.
        """
        positions = [self._check_point(q) for q in positions]
        report = CollisionReport()
        for k in range(len(positions)):
            for l in range(k + 1, len(positions)):
                if np.linalg.norm(positions[k] - positions[l]) < self.delta:
                    report.pair_violations.append((k, l))
        for i, q in enumerate(positions):
            for j, obs in enumerate(self.obstacles):
                if obs.hidden and not include_hidden:
                    continue
                if obs.signed_distance(q) < 0:
                    report.obstacle_violations.append((i, j))
        return report
