"""Quintic boundary-value solves and heuristic trajectory cluster generation.

Candidates pair a longitudinal quintic s(t) with a lateral quintic d(s); the
lateral span is the longitudinal progress over the horizon, and lateral
boundary derivatives are taken with respect to s (time derivatives from the
ego state are converted via the chain rule before the solve).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInput, OutOfDomain, SingularSystem
from .geometry import CartesianState, FrenetState, ReferenceLine, _transform_arrays

LON = "longitudinal-in-time"
LAT = "lateral-in-s"


@dataclass(frozen=True)
class QuinticPoly:
    """Fifth-order polynomial c0 + c1 u + ... + c5 u^5 on [0, span]."""

    coeffs: np.ndarray
    span: float
    axis: str = LON

    def __post_init__(self):
        if self.span <= 0.0:
            raise InvalidInput(f"span must be positive, got {self.span}")
        object.__setattr__(self, "coeffs", np.asarray(self.coeffs, dtype=float))

    def _powers(self, u):
        u = np.asarray(u, dtype=float)
        return np.stack([u**j for j in range(6)], axis=-1)

    def value(self, u):
        return self._powers(u) @ self.coeffs

    def deriv1(self, u):
        c = self.coeffs
        u = np.asarray(u, dtype=float)
        return c[1] + 2 * c[2] * u + 3 * c[3] * u**2 + 4 * c[4] * u**3 + 5 * c[5] * u**4

    def deriv2(self, u):
        c = self.coeffs
        u = np.asarray(u, dtype=float)
        return 2 * c[2] + 6 * c[3] * u + 12 * c[4] * u**2 + 20 * c[5] * u**3

    def deriv3(self, u):
        c = self.coeffs
        u = np.asarray(u, dtype=float)
        return 6 * c[3] + 24 * c[4] * u + 60 * c[5] * u**2


@dataclass(frozen=True)
class SamplingGrid:
    lateral_offsets: tuple
    horizons: tuple
    terminal_speeds: tuple
    terminal_accels: tuple = (0.0,)

    def __post_init__(self):
        for name in ("lateral_offsets", "horizons", "terminal_speeds", "terminal_accels"):
            vals = tuple(float(v) for v in getattr(self, name))
            if not vals:
                raise InvalidInput(f"grid axis {name} is empty")
            object.__setattr__(self, name, vals)
        if any(h <= 0.0 for h in self.horizons):
            raise InvalidInput("all horizons must be positive")

    @property
    def size(self) -> int:
        return (len(self.lateral_offsets) * len(self.horizons)
                * len(self.terminal_speeds) * len(self.terminal_accels))

    @classmethod
    def default(cls, speed: float, v_law: float, lateral_bound: float = 3.0,
                horizons=(2.0, 3.0, 4.0, 5.0)) -> "SamplingGrid":
        """Stop/keep/accelerate speeds and lane-keeping/avoidance offsets.

        Offsets are clipped to the lane bound; duplicate entries collapsing
        after the clip (or for near-zero speeds) are removed.
        """
        offsets = sorted({round(max(-lateral_bound, min(lateral_bound, o)), 9)
                          for o in (-3.0, -1.5, 0.0, 1.5, 3.0)})
        speeds = sorted({round(v, 9) for v in
                         (0.5 * speed, speed, min(1.5 * speed, v_law)) if v > 1e-6})
        if not speeds:
            speeds = [0.5 * v_law]
        return cls(tuple(offsets), tuple(horizons), tuple(speeds), (0.0,))


@dataclass
class TrajectoryCandidate:
    lon: QuinticPoly
    lat: QuinticPoly
    horizon: float
    dt: float
    times: np.ndarray
    frenet: dict = field(repr=False)   # arrays: s, s_dot, s_ddot, d, d_dot, d_ddot, d_prime, d_pprime
    cartesian: dict = field(repr=False)  # arrays: x, y, theta, kappa, v, a

    @property
    def n_samples(self) -> int:
        return len(self.times)

    def frenet_state(self, k: int) -> FrenetState:
        f = self.frenet
        return FrenetState(s=f["s"][k], s_dot=f["s_dot"][k], s_ddot=f["s_ddot"][k],
                           d=f["d"][k], d_dot=f["d_dot"][k], d_ddot=f["d_ddot"][k],
                           d_prime=f["d_prime"][k], d_pprime=f["d_pprime"][k])

    def cartesian_state(self, k: int) -> CartesianState:
        c = self.cartesian
        return CartesianState(x=c["x"][k], y=c["y"][k], theta=c["theta"][k],
                              kappa=c["kappa"][k], v=max(c["v"][k], 0.0), a=c["a"][k])


def solve_quintic_boundary(start, end, span: float) -> QuinticPoly:
    """Fit a quintic to (position, velocity, acceleration) triplets at 0 and span.

    c0..c2 come directly from the start triplet; c3..c5 from the 3x3 system of
    terminal conditions.
    """
    if span <= 0.0:
        raise InvalidInput(f"span must be positive, got {span}")
    p0, v0, a0 = (float(v) for v in start)
    p1, v1, a1 = (float(v) for v in end)
    c0, c1, c2 = p0, v0, 0.5 * a0
    T = float(span)
    A = np.array([
        [T**3, T**4, T**5],
        [3 * T**2, 4 * T**3, 5 * T**4],
        [6 * T, 12 * T**2, 20 * T**3],
    ])
    scale = max(1.0, abs(T) ** 9)
    if abs(np.linalg.det(A)) < 1e-12 * scale:
        raise SingularSystem(f"quintic boundary system singular for span {span}")
    b = np.array([
        p1 - c0 - c1 * T - c2 * T**2,
        v1 - c1 - 2 * c2 * T,
        a1 - 2 * c2,
    ])
    c345 = np.linalg.solve(A, b)
    return QuinticPoly(np.array([c0, c1, c2, *c345]), span=T)


def interpolate_state_triplet(poly: QuinticPoly, u: float):
    """Evaluate (value, first derivative, second derivative) at u in [0, span]."""
    if u < -1e-12 or u > poly.span + 1e-12:
        raise OutOfDomain(f"u={u} outside [0, {poly.span}]")
    u = min(max(u, 0.0), poly.span)
    return float(poly.value(u)), float(poly.deriv1(u)), float(poly.deriv2(u))


def _time_grid(T: float, dt: float) -> np.ndarray:
    n = int(np.floor(T / dt + 1e-9))
    times = dt * np.arange(n + 1)
    if T - times[-1] > 1e-9:
        times = np.concatenate([times, [T]])
    else:
        times[-1] = T
    return times


def discretize_candidate(lon: QuinticPoly, lat: QuinticPoly, T: float, dt: float,
                         ref: ReferenceLine) -> TrajectoryCandidate:
    """Sample both polynomials at t = 0, dt, ..., T and transform each state."""
    if dt <= 0.0 or dt > T:
        raise InvalidInput(f"dt must satisfy 0 < dt <= T, got dt={dt}, T={T}")
    times = _time_grid(T, dt)
    s = lon.value(times)
    s_dot = lon.deriv1(times)
    s_ddot = lon.deriv2(times)
    u = np.clip(s - s[0], 0.0, lat.span)
    d = lat.value(u)
    d_prime = lat.deriv1(u)
    d_pprime = lat.deriv2(u)
    d_dot = d_prime * s_dot
    d_ddot = d_pprime * s_dot**2 + d_prime * s_ddot
    x, y, theta, kappa, v, a = _transform_arrays(ref, s, d, d_prime, d_pprime,
                                                 s_dot, s_ddot)
    return TrajectoryCandidate(
        lon=lon, lat=lat, horizon=T, dt=dt, times=times,
        frenet=dict(s=s, s_dot=s_dot, s_ddot=s_ddot, d=d, d_dot=d_dot,
                    d_ddot=d_ddot, d_prime=d_prime, d_pprime=d_pprime),
        cartesian=dict(x=x, y=y, theta=theta, kappa=kappa, v=v, a=a),
    )


def generate_htsc(ego: FrenetState, grid: SamplingGrid, ref: ReferenceLine,
                  dt: float = 0.1) -> list[TrajectoryCandidate]:
    """Generate the heuristic trajectory sampling cluster for one planning cycle.

    Candidate count equals the grid-axis product; ordering follows grid index
    (lateral outermost, terminal accel innermost). The longitudinal terminal
    position is the trapezoidal estimate s0 + (s_dot0 + v_T)/2 * T.
    """
    if ego.s < 0.0 or ego.s > ref.total_length:
        raise OutOfDomain(f"ego s={ego.s} outside reference line domain")
    out = []
    for d_t, T, v_t, a_t in itertools.product(grid.lateral_offsets, grid.horizons,
                                              grid.terminal_speeds, grid.terminal_accels):
        s_t = ego.s + 0.5 * (ego.s_dot + v_t) * T
        lon = solve_quintic_boundary((ego.s, ego.s_dot, ego.s_ddot),
                                     (s_t, v_t, a_t), T)
        span = s_t - ego.s
        if span > 1e-9:
            lat = solve_quintic_boundary((ego.d, ego.d_prime, ego.d_pprime),
                                         (d_t, 0.0, 0.0), span)
            lat = QuinticPoly(lat.coeffs, span=span, axis=LAT)
        else:
            # no longitudinal progress: hold the current offset
            lat = QuinticPoly(np.array([ego.d, 0, 0, 0, 0, 0]), span=1.0, axis=LAT)
        out.append(discretize_candidate(lon, lat, T, dt, ref))
    return out
