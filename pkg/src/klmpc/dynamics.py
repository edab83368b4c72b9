"""Ground-truth unicycle plant, RK4 discretization and the obstacle barrier.

Everything here is a pure function over small value types; the same code is
used to generate identification data and to advance the true plant in the
closed loop. Heading is never wrapped during integration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "State",
    "Input",
    "ObstacleSpec",
    "AugmentedState",
    "BoxBounds",
    "unicycle_deriv",
    "rk4_step",
    "barrier",
    "augment",
    "aug_step",
]


@dataclass(frozen=True)
class State:
    """Unicycle state: planar position [m], heading [rad], speed [m/s]."""

    x: float
    y: float
    theta: float
    v: float

    def to_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta, self.v], dtype=float)

    @staticmethod
    def from_array(arr) -> "State":
        x, y, theta, v = np.asarray(arr, dtype=float).reshape(4)
        return State(float(x), float(y), float(theta), float(v))


@dataclass(frozen=True)
class Input:
    """Control input: angular velocity [rad/s] and linear acceleration [m/s^2]."""

    u1: float
    u2: float

    def to_array(self) -> np.ndarray:
        return np.array([self.u1, self.u2], dtype=float)

    @staticmethod
    def from_array(arr) -> "Input":
        u1, u2 = np.asarray(arr, dtype=float).reshape(2)
        return Input(float(u1), float(u2))


@dataclass(frozen=True)
class ObstacleSpec:
    """Circular obstacle with center (cx, cy) and radius r > 0."""

    cx: float
    cy: float
    r: float

    def __post_init__(self):
        if not self.r > 0:
            raise ValueError(f"obstacle radius must be positive, got {self.r}")


@dataclass(frozen=True)
class AugmentedState:
    """State with its barrier value appended as an extra coordinate."""

    state: State
    h: float

    def to_array(self) -> np.ndarray:
        return np.append(self.state.to_array(), self.h)


@dataclass(frozen=True)
class BoxBounds:
    """Componentwise state and input boxes (lo <= hi)."""

    state_lo: np.ndarray
    state_hi: np.ndarray
    input_lo: np.ndarray
    input_hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "state_lo", np.asarray(self.state_lo, dtype=float).reshape(4))
        object.__setattr__(self, "state_hi", np.asarray(self.state_hi, dtype=float).reshape(4))
        object.__setattr__(self, "input_lo", np.asarray(self.input_lo, dtype=float).reshape(2))
        object.__setattr__(self, "input_hi", np.asarray(self.input_hi, dtype=float).reshape(2))
        if np.any(self.state_lo > self.state_hi) or np.any(self.input_lo > self.input_hi):
            raise ValueError("box bounds require lo <= hi componentwise")

    @staticmethod
    def symmetric(state_mag: float = 3.0, input_mag: float = 3.0) -> "BoxBounds":
        s = abs(state_mag) * np.ones(4)
        u = abs(input_mag) * np.ones(2)
        return BoxBounds(-s, s, -u, u)


def _deriv_arrays(s: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Vectorized unicycle vector field; s has shape (4, ...), u (2, ...)."""
    out = np.empty_like(s)
    out[0] = s[3] * np.cos(s[2])
    out[1] = s[3] * np.sin(s[2])
    out[2] = u[0]
    out[3] = u[1]
    return out


def _rk4_arrays(s: np.ndarray, u: np.ndarray, dt: float) -> np.ndarray:
    """Classical RK4 step with zero-order hold on u."""
    k1 = _deriv_arrays(s, u)
    k2 = _deriv_arrays(s + 0.5 * dt * k1, u)
    k3 = _deriv_arrays(s + 0.5 * dt * k2, u)
    k4 = _deriv_arrays(s + dt * k3, u)
    return s + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _barrier_arrays(s: np.ndarray, obs: ObstacleSpec) -> np.ndarray:
    return (s[0] - obs.cx) ** 2 + (s[1] - obs.cy) ** 2 - obs.r**2


def unicycle_deriv(s: State, u: Input) -> State:
    """Continuous-time vector field [v cos(theta), v sin(theta), u1, u2]."""
    return State.from_array(_deriv_arrays(s.to_array(), u.to_array()))


def rk4_step(s: State, u: Input, dt: float) -> State:
    """Advance the unicycle one sampling step; u held constant over [0, dt]."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    return State.from_array(_rk4_arrays(s.to_array(), u.to_array(), dt))


def barrier(s: State, obs: ObstacleSpec) -> float:
    """Quadratic clearance (x-cx)^2 + (y-cy)^2 - r^2; >= 0 means safe."""
    return float(_barrier_arrays(s.to_array(), obs))


def augment(s: State, obs: ObstacleSpec) -> AugmentedState:
    """Append the barrier value to the state."""
    return AugmentedState(s, barrier(s, obs))


def aug_step(a: AugmentedState, u: Input, dt: float, obs: ObstacleSpec) -> AugmentedState:
    """One step of the barrier-augmented plant.

    The state part advances by RK4 and the barrier coordinate is recomputed
    at the new state, so the output is always self-consistent.
    """
    nxt = rk4_step(a.state, u, dt)
    return AugmentedState(nxt, barrier(nxt, obs))
