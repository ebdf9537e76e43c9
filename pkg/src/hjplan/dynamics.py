"""Agent motion models and their control-theoretic machinery.

Each model bundles, for one kind of agent:

* ``flow``          -- the motion law xdot = f(x, a, t),
* ``hamiltonian``   -- H(x, p) = sup_a <-f(x, a, t), p>, in closed form,
* ``hamiltonian_state_gradient`` -- analytic dH/dx (subgradient choice
                       sign(0) = 0 at absolute-value kinks),
* ``costate_prox``  -- the exact minimizer of
                       dt*alpha*H(x, p) + |p - beta|^2 / (2*sigma),
* ``optimal_control`` -- the control achieving the supremum in H.

Three models ship: isotropic point motion (speed field V, unit direction
control), a simple car (tangential speed in [-V, V], turn rate in [-W, W]),
and a quadcopter controlled in thrust and angular accelerations, all
normalized to [-1, 1].

Every operation is a pure function of its arguments and broadcasts over
leading axes (states of shape ``(..., n)``).
"""

from __future__ import annotations

import warnings
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "DynamicsModel",
    "IsotropicModel",
    "SimpleCarModel",
    "QuadcopterModel",
    "CostateProxInput",
    "model_from_config",
]


@dataclass
class CostateProxInput:
    """Inputs of one costate proximal update.

    ``x`` is the state at which the Hamiltonian is frozen, ``beta`` the prox
    anchor, ``alpha`` the gating factor in [0, 1] (goal x collision x
    obstacle), ``sigma`` the prox step and ``dt`` the time step. ``alpha``
    may be an array broadcasting against the leading axes of ``beta``.
    """

    x: np.ndarray
    beta: np.ndarray
    alpha: np.ndarray | float
    sigma: float
    dt: float
    t: np.ndarray | float = 0.0

    def __post_init__(self):
        if self.sigma <= 0 or self.dt <= 0:
            raise ValueError("sigma and dt must be positive")
        if np.any(np.asarray(self.alpha) < 0) or np.any(np.asarray(self.alpha) > 1):
            raise ValueError("alpha must lie in [0, 1]")

    @property
    def shrink(self) -> np.ndarray:
        """Combined soft-threshold weight sigma*dt*alpha."""
        return np.asarray(self.sigma * self.dt * np.asarray(self.alpha, dtype=float))


def _check_state(x: np.ndarray, n: int, what: str = "state") -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != n:
        raise ValueError(f"{what} must have {n} components, got {x.shape[-1]}")
    if np.any(np.isnan(x)):
        raise ValueError(f"NaN in {what}")
    return x


def _soft_threshold(v: np.ndarray, k: np.ndarray) -> np.ndarray:
    return np.sign(v) * np.maximum(np.abs(v) - k, 0.0)


class DynamicsModel(ABC):
    """Common interface of all agent motion models."""

    kind: str
    state_dim: int
    control_dim: int

    @property
    @abstractmethod
    def spatial_indices(self) -> np.ndarray:
        """Indices of the spatial (collision-relevant) state components."""

    @abstractmethod
    def flow(self, x, a, t=0.0) -> np.ndarray:
        """State derivative f(x, a, t); controls are clamped with a warning."""

    @abstractmethod
    def hamiltonian(self, x, p, t=0.0) -> np.ndarray:
        """H(x, p) = sup over admissible a of <-f(x, a, t), p>."""

    @abstractmethod
    def hamiltonian_state_gradient(self, x, p, t=0.0) -> np.ndarray:
        """Analytic dH/dx with the sign(0) = 0 subgradient convention."""

    @abstractmethod
    def costate_prox(self, inp: CostateProxInput) -> np.ndarray:
        """argmin_p dt*alpha*H(x, p) + |p - beta|^2 / (2 sigma), exactly."""

    @abstractmethod
    def optimal_control(self, x, p, t=0.0) -> np.ndarray:
        """The control achieving the supremum in ``hamiltonian``."""

    @abstractmethod
    def travel_time_lower_bound(self, distance: float) -> float:
        """Optimistic time to cover a straight-line spatial distance."""

    def clamp_control(self, a: np.ndarray) -> np.ndarray:
        return a


@dataclass
class IsotropicModel(DynamicsModel):
    """Point agent moving at speed V(x) in a freely chosen unit direction."""

    V: float | Callable[[np.ndarray], np.ndarray] = 1.0
    dim: int = 2
    kind: str = "isotropic"

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ValueError("isotropic agents live in 2 or 3 dimensions")
        if not callable(self.V) and self.V <= 0:
            raise ValueError("speed V must be positive")
        self.state_dim = self.dim
        self.control_dim = self.dim

    @property
    def spatial_indices(self) -> np.ndarray:
        return np.arange(self.dim)

    def speed(self, x) -> np.ndarray:
        if callable(self.V):
            return np.asarray(self.V(x), dtype=float)
        return np.asarray(self.V, dtype=float)

    def clamp_control(self, a):
        a = np.asarray(a, dtype=float)
        norm = np.linalg.norm(a, axis=-1, keepdims=True)
        if np.any(np.abs(norm - 1.0) > 1e-9):
            warnings.warn("isotropic control renormalized to unit length")
            a = np.divide(a, norm, out=np.zeros_like(a), where=norm > 0)
        return a

    def flow(self, x, a, t=0.0):
        x = _check_state(x, self.state_dim)
        a = self.clamp_control(_check_state(a, self.control_dim, "control"))
        return self.speed(x)[..., None] * a if callable(self.V) else self.speed(x) * a

    def hamiltonian(self, x, p, t=0.0):
        x = _check_state(x, self.state_dim)
        p = _check_state(p, self.state_dim, "costate")
        return self.speed(x) * np.linalg.norm(p, axis=-1)

    def hamiltonian_state_gradient(self, x, p, t=0.0):
        x = _check_state(x, self.state_dim)
        if callable(self.V):
            raise NotImplementedError(
                "state gradients for non-constant speed fields are not supported"
            )
        return np.zeros_like(x)

    def costate_prox(self, inp: CostateProxInput):
        beta = _check_state(inp.beta, self.state_dim, "beta")
        k = inp.shrink * self.speed(inp.x)
        norm = np.linalg.norm(beta, axis=-1, keepdims=True)
        scale = np.maximum(0.0, 1.0 - np.divide(
            np.broadcast_to(np.asarray(k, dtype=float)[..., None], norm.shape),
            norm, out=np.ones_like(norm), where=norm > 0,
        ))
        return scale * beta

    def optimal_control(self, x, p, t=0.0):
        p = _check_state(p, self.state_dim, "costate")
        norm = np.linalg.norm(p, axis=-1, keepdims=True)
        # arbitrary fixed unit direction when p = 0 (any control is optimal)
        fallback = np.zeros_like(p)
        fallback[..., 0] = 1.0
        return np.where(norm > 0, -np.divide(p, norm, where=norm > 0), fallback)

    def travel_time_lower_bound(self, distance: float) -> float:
        if callable(self.V):
            raise NotImplementedError("horizon bound needs a constant speed")
        return float(distance) / self.V


@dataclass
class SimpleCarModel(DynamicsModel):
    """Planar car (x, y, heading) with bounded speed and turn rate.

    Controls are tangential speed v in [-V, V] and angular speed w in
    [-W, W]; the Hamiltonian is V|cos(th) p1 + sin(th) p2| + W|p3|.
    """

    V: float = 1.0
    W: float = 2.0
    kind: str = "simple_car"
    state_dim: int = 3
    control_dim: int = 2

    def __post_init__(self):
        if self.V <= 0 or self.W <= 0:
            raise ValueError("speed bounds V, W must be positive")

    @property
    def spatial_indices(self) -> np.ndarray:
        return np.arange(2)

    def clamp_control(self, a):
        a = np.asarray(a, dtype=float)
        lo = np.array([-self.V, -self.W])
        hi = np.array([self.V, self.W])
        if np.any(a < lo) or np.any(a > hi):
            warnings.warn("car control clamped to its bounds")
            a = np.clip(a, lo, hi)
        return a

    def flow(self, x, a, t=0.0):
        x = _check_state(x, self.state_dim)
        a = self.clamp_control(_check_state(a, self.control_dim, "control"))
        theta = x[..., 2]
        v, w = a[..., 0], a[..., 1]
        return np.stack([v * np.cos(theta), v * np.sin(theta), w], axis=-1)

    def _heading_momentum(self, x, p):
        theta = x[..., 2]
        return np.cos(theta) * p[..., 0] + np.sin(theta) * p[..., 1]

    def hamiltonian(self, x, p, t=0.0):
        x = _check_state(x, self.state_dim)
        p = _check_state(p, self.state_dim, "costate")
        return self.V * np.abs(self._heading_momentum(x, p)) + self.W * np.abs(p[..., 2])

    def hamiltonian_state_gradient(self, x, p, t=0.0):
        x = _check_state(x, self.state_dim)
        p = _check_state(p, self.state_dim, "costate")
        theta = x[..., 2]
        grad = np.zeros_like(x)
        grad[..., 2] = self.V * np.sign(self._heading_momentum(x, p)) * (
            -np.sin(theta) * p[..., 0] + np.cos(theta) * p[..., 1]
        )
        return grad

    def costate_prox(self, inp: CostateProxInput):
        x = _check_state(inp.x, self.state_dim)
        beta = _check_state(inp.beta, self.state_dim, "beta")
        k = np.asarray(inp.shrink, dtype=float)
        theta = x[..., 2]
        c = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
        s = np.sum(beta[..., :2] * c, axis=-1)
        # shrink the along-heading component, keep the orthogonal part
        s_new = _soft_threshold(s, k * self.V)
        out = np.empty_like(beta)
        out[..., :2] = beta[..., :2] + (s_new - s)[..., None] * c
        out[..., 2] = _soft_threshold(beta[..., 2], k * self.W)
        return out

    def optimal_control(self, x, p, t=0.0):
        x = _check_state(x, self.state_dim)
        p = _check_state(p, self.state_dim, "costate")
        v = -self.V * np.sign(self._heading_momentum(x, p))
        w = -self.W * np.sign(p[..., 2])
        return np.stack([v, w], axis=-1)

    def travel_time_lower_bound(self, distance: float) -> float:
        return float(distance) / self.V


def thrust_direction(angles: np.ndarray) -> np.ndarray:
    """Unit thrust direction of the quadcopter body, from (psi, theta, phi)."""
    psi, theta, phi = angles[..., 0], angles[..., 1], angles[..., 2]
    return np.stack(
        [
            np.sin(phi) * np.sin(psi) + np.cos(phi) * np.cos(psi) * np.sin(theta),
            np.cos(phi) * np.sin(theta) * np.sin(psi) - np.cos(psi) * np.sin(phi),
            np.cos(theta) * np.cos(phi),
        ],
        axis=-1,
    )


def thrust_direction_jacobian(angles: np.ndarray) -> np.ndarray:
    """d(thrust direction)/d(angles), shape (..., 3 components, 3 angles)."""
    psi, theta, phi = angles[..., 0], angles[..., 1], angles[..., 2]
    sps, cps = np.sin(psi), np.cos(psi)
    sth, cth = np.sin(theta), np.cos(theta)
    sph, cph = np.sin(phi), np.cos(phi)
    zeros = np.zeros_like(psi)
    d_psi = np.stack(
        [sph * cps - sps * sth * cph, sph * sps + sth * cph * cps, zeros], axis=-1
    )
    d_theta = np.stack([cph * cps * cth, sps * cph * cth, -sth * cph], axis=-1)
    d_phi = np.stack(
        [-sph * sth * cps + sps * cph, -sph * sps * sth - cph * cps, -sph * cth],
        axis=-1,
    )
    return np.stack([d_psi, d_theta, d_phi], axis=-1)


@dataclass
class QuadcopterModel(DynamicsModel):
    """Quadcopter with acceleration-level control, all bounds scaled to [-1, 1].

    State is (x, y, z, psi, theta, phi, and their six rates); the control is
    (thrust v, angular accelerations tau_psi, tau_theta, tau_phi). Thrust acts
    along the body direction ``thrust_direction`` and gravity g pulls along
    -z, so the translational accelerations are v*gamma - (0, 0, g).
    """

    g: float = 0.1
    speed_proxy: float | None = None
    kind: str = "quadcopter"
    state_dim: int = 12
    control_dim: int = 4

    def __post_init__(self):
        if self.g < 0:
            raise ValueError("gravity must be nonnegative")

    @property
    def spatial_indices(self) -> np.ndarray:
        return np.arange(3)

    def clamp_control(self, a):
        a = np.asarray(a, dtype=float)
        if np.any(np.abs(a) > 1.0):
            warnings.warn("quadcopter control clamped to [-1, 1]")
            a = np.clip(a, -1.0, 1.0)
        return a

    def flow(self, x, a, t=0.0):
        x = _check_state(x, self.state_dim)
        a = self.clamp_control(_check_state(a, self.control_dim, "control"))
        lead = np.broadcast_shapes(x.shape[:-1], a.shape[:-1])
        gamma = thrust_direction(x[..., 3:6])
        out = np.empty(lead + (self.state_dim,))
        out[..., :6] = x[..., 6:12]
        out[..., 6:9] = a[..., :1] * gamma
        out[..., 8] -= self.g
        out[..., 9:12] = a[..., 1:4]
        return out

    def hamiltonian(self, x, p, t=0.0):
        x = _check_state(x, self.state_dim)
        p = _check_state(p, self.state_dim, "costate")
        gamma = thrust_direction(x[..., 3:6])
        rates, pos_costate, rate_costate = x[..., 6:12], p[..., :6], p[..., 6:12]
        return (
            -np.sum(rates * pos_costate, axis=-1)
            + np.abs(np.sum(rate_costate[..., :3] * gamma, axis=-1))
            + self.g * rate_costate[..., 2]
            + np.sum(np.abs(rate_costate[..., 3:6]), axis=-1)
        )

    def hamiltonian_state_gradient(self, x, p, t=0.0):
        x = _check_state(x, self.state_dim)
        p = _check_state(p, self.state_dim, "costate")
        grad = np.zeros_like(x)
        gamma = thrust_direction(x[..., 3:6])
        jac = thrust_direction_jacobian(x[..., 3:6])
        pd3 = p[..., 6:9]
        inner = np.sum(pd3 * gamma, axis=-1)
        grad[..., 3:6] = np.sign(inner)[..., None] * np.einsum(
            "...c,...ca->...a", pd3, jac
        )
        grad[..., 6:12] = -p[..., :6]
        return grad

    def costate_prox(self, inp: CostateProxInput):
        x = _check_state(inp.x, self.state_dim)
        beta = _check_state(inp.beta, self.state_dim, "beta")
        k = np.asarray(inp.shrink, dtype=float)
        out = np.empty_like(beta)
        # position-costate block: quadratic plus a linear term only
        out[..., :6] = beta[..., :6] + k[..., None] * x[..., 6:12]
        # translational rate-costate block: gravity shift then a directional shrink
        gamma = thrust_direction(x[..., 3:6])
        b = beta[..., 6:9].copy()
        b[..., 2] -= k * self.g
        inner = np.sum(gamma * b, axis=-1)
        shrink = np.minimum(
            1.0,
            np.divide(k, np.abs(inner), out=np.ones_like(np.abs(inner) + k), where=inner != 0),
        )
        out[..., 6:9] = b - (shrink * inner)[..., None] * gamma
        # angular rate-costate block: plain soft threshold
        out[..., 9:12] = _soft_threshold(beta[..., 9:12], k[..., None])
        return out

    def optimal_control(self, x, p, t=0.0):
        x = _check_state(x, self.state_dim)
        p = _check_state(p, self.state_dim, "costate")
        gamma = thrust_direction(x[..., 3:6])
        v = -np.sign(np.sum(p[..., 6:9] * gamma, axis=-1))
        return np.concatenate([v[..., None], -np.sign(p[..., 9:12])], axis=-1)

    def travel_time_lower_bound(self, distance: float) -> float:
        """Rest-to-rest bang-bang bound 2*sqrt(d) at unit acceleration,
        unless an explicit speed proxy is configured."""
        if self.speed_proxy is not None:
            return float(distance) / self.speed_proxy
        return 2.0 * float(np.sqrt(distance))


_MODEL_KINDS = {
    "isotropic": IsotropicModel,
    "simple_car": SimpleCarModel,
    "quadcopter": QuadcopterModel,
}


def model_from_config(kind: str, **kwargs) -> DynamicsModel:
    """Construct a model by kind name (scenario-file entry point)."""
    try:
        cls = _MODEL_KINDS[kind]
    except KeyError:
        raise ValueError(
            f"unknown agent kind {kind!r}; expected one of {sorted(_MODEL_KINDS)}"
        ) from None
    return cls(**kwargs)
