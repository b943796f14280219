"""Momentum-constrained trajectory refinement.

Force models (guidance and anisotropic crowd repulsion), per-axis Lagrangian
action by trapezoidal quadrature, Euler-Lagrange residual diagnostics, and a
projected-gradient refinement of candidate terminal states.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateGeometry, InvalidInput, SingularSystem
from .geometry import CartesianState, ReferenceLine
from .sampling import LAT, QuinticPoly, TrajectoryCandidate, discretize_candidate, \
    solve_quintic_boundary


@dataclass(frozen=True)
class AgentParams:
    """Physical and regularization constants of the planning agent.

    Defaults target a pedestrian-scale assistive device.
    """

    mass: float = 75.0
    gravity: float = 9.81
    lambda_smooth: float = 0.1
    lambda_uncertainty: float = 0.01
    b_bump: float = 0.5
    b_type: float = 1.0
    b_safe_s: float = 1.5
    b_safe_d: float = 0.5
    lane_width: float = 3.5
    sigma_perception: np.ndarray = field(
        default_factory=lambda: np.diag([0.04, 0.04]))
    v_law: float = 2.0
    v_desire: float = 2.0
    lambda_slope: float = 1.0

    def __post_init__(self):
        if self.mass <= 0 or self.gravity <= 0 or self.lane_width <= 0:
            raise InvalidInput("mass, gravity and lane width must be positive")
        if self.lambda_smooth < 0 or self.lambda_uncertainty < 0:
            raise InvalidInput("regularization weights must be non-negative")
        sig = np.asarray(self.sigma_perception, dtype=float)
        if sig.shape != (2, 2) or not np.allclose(sig, sig.T):
            raise InvalidInput("perception covariance must be symmetric 2x2")
        if np.any(np.linalg.eigvalsh(sig) < -1e-12):
            raise InvalidInput("perception covariance must be positive semidefinite")
        object.__setattr__(self, "sigma_perception", sig)

    @property
    def trace_sigma(self) -> float:
        return float(np.trace(self.sigma_perception))


@dataclass(frozen=True)
class NeighborState:
    position: tuple
    velocity: tuple
    mass: float = 75.0

    def __post_init__(self):
        if self.mass <= 0:
            raise InvalidInput("neighbor mass must be positive")


@dataclass
class MtoEnvironment:
    """Static neighborhood snapshot used while evaluating one candidate."""

    neighbors: list = field(default_factory=list)


def guidance_force(r_li: float, p: AgentParams) -> tuple[float, float]:
    """Longitudinal slope-surrogate force and lateral lane-centering force.

    r_li is the distance to the right lane boundary, in [0, w]. The slope
    surrogate sin(phi) = lambda * B_bump * v_desire / v_law is clamped to
    physical range.
    """
    if p.v_law <= 0.0:
        raise InvalidInput("prescribed speed v_law must be positive")
    if r_li < -1e-9 or r_li > p.lane_width + 1e-9:
        raise InvalidInput(f"lane offset {r_li} outside [0, {p.lane_width}]")
    sin_phi = p.lambda_slope * p.b_bump * p.v_desire / p.v_law
    sin_phi = min(max(sin_phi, -1.0), 1.0)
    f_s = p.mass * p.gravity * sin_phi
    f_d = p.mass * p.b_type * (0.5 * p.lane_width - r_li)
    return f_s, f_d


def crowd_force(ego: CartesianState, nb: NeighborState, p: AgentParams) -> np.ndarray:
    """Anisotropic repulsion from one neighbor, directed neighbor -> ego.

    Longitudinal/lateral separations (in the ego heading frame) are inflated
    by asymmetric safety buffers; the bracket (1/r_s^2 - 1/r_d^2) modulates
    strength directionally.
    """
    r_vec = ego.position - np.asarray(nb.position, dtype=float)
    r = float(np.linalg.norm(r_vec))
    if r < 1e-9:
        raise DegenerateGeometry("ego and neighbor positions coincide")
    e_s = np.array([math.cos(ego.theta), math.sin(ego.theta)])
    e_d = np.array([-e_s[1], e_s[0]])
    r_s = abs(float(r_vec @ e_s)) + p.b_safe_s
    r_d = abs(float(r_vec @ e_d)) + p.b_safe_d
    speed2 = float(np.asarray(nb.velocity, dtype=float) @ np.asarray(nb.velocity, dtype=float))
    magnitude = 0.5 * nb.mass * speed2 * r * (1.0 / r_s**2 - 1.0 / r_d**2)
    return magnitude * (r_vec / r)


def _crowd_force_arrays(x, y, theta, env: MtoEnvironment, p: AgentParams):
    """Total crowd force projected on the (heading, left-normal) axes, per sample."""
    f_s = np.zeros_like(x)
    f_d = np.zeros_like(x)
    cos_t = np.cos(theta)
    sin_t = np.sin(theta)
    for nb in env.neighbors:
        rx = x - nb.position[0]
        ry = y - nb.position[1]
        r = np.hypot(rx, ry)
        r = np.maximum(r, 1e-9)
        comp_s = rx * cos_t + ry * sin_t
        comp_d = -rx * sin_t + ry * cos_t
        r_s = np.abs(comp_s) + p.b_safe_s
        r_d = np.abs(comp_d) + p.b_safe_d
        speed2 = float(np.dot(nb.velocity, nb.velocity))
        mag = 0.5 * nb.mass * speed2 * r * (1.0 / r_s**2 - 1.0 / r_d**2)
        fx = mag * rx / r
        fy = mag * ry / r
        f_s += fx * cos_t + fy * sin_t
        f_d += -fx * sin_t + fy * cos_t
    return f_s, f_d


def lagrangian_integrands(cand: TrajectoryCandidate, env: MtoEnvironment,
                          p: AgentParams) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample longitudinal and lateral Lagrangian integrands."""
    f = cand.frenet
    c = cand.cartesian
    r_li = np.clip(0.5 * p.lane_width + f["d"], 0.0, p.lane_width)
    sin_phi = min(max(p.lambda_slope * p.b_bump * p.v_desire / p.v_law, -1.0), 1.0)
    fg_s = p.mass * p.gravity * sin_phi * np.ones_like(r_li)
    fg_d = p.mass * p.b_type * (0.5 * p.lane_width - r_li)
    fc_s, fc_d = _crowd_force_arrays(c["x"], c["y"], c["theta"], env, p)
    tr = p.trace_sigma
    ls = (0.5 * p.mass * f["s_dot"] ** 2 - (fg_s + fc_s) * f["s_dot"]
          + p.lambda_smooth * f["s_ddot"] ** 2 + p.lambda_uncertainty * tr)
    ld = (0.5 * p.mass * f["d_dot"] ** 2 - (fg_d + fc_d) * f["d_dot"]
          + p.lambda_smooth * f["d_ddot"] ** 2 + p.lambda_uncertainty * tr)
    return ls, ld


def lagrangian_cost(cand: TrajectoryCandidate, env: MtoEnvironment,
                    p: AgentParams) -> tuple[float, float]:
    """Trapezoidal quadrature of the two Lagrangian integrands over the horizon."""
    ls, ld = lagrangian_integrands(cand, env, p)
    return (float(np.trapezoid(ls, cand.times)), float(np.trapezoid(ld, cand.times)))


def uncertainty_score(cand: TrajectoryCandidate, env: MtoEnvironment,
                      p: AgentParams) -> float:
    """Horizon length times the mean sampled Lagrangian."""
    ls, ld = lagrangian_integrands(cand, env, p)
    return float((cand.times[-1] - cand.times[0]) * np.mean(ls + ld))


def lagrangian_partials(cand: TrajectoryCandidate, env: MtoEnvironment,
                        p: AgentParams) -> dict:
    """Analytic partials of the integrands w.r.t. velocities and accelerations."""
    f = cand.frenet
    c = cand.cartesian
    r_li = np.clip(0.5 * p.lane_width + f["d"], 0.0, p.lane_width)
    sin_phi = min(max(p.lambda_slope * p.b_bump * p.v_desire / p.v_law, -1.0), 1.0)
    fg_s = p.mass * p.gravity * sin_phi * np.ones_like(r_li)
    fg_d = p.mass * p.b_type * (0.5 * p.lane_width - r_li)
    fc_s, fc_d = _crowd_force_arrays(c["x"], c["y"], c["theta"], env, p)
    return {
        "dls_dsdot": p.mass * f["s_dot"] - (fg_s + fc_s),
        "dls_dsddot": 2.0 * p.lambda_smooth * f["s_ddot"],
        "dld_dddot": p.mass * f["d_dot"] - (fg_d + fc_d),
        "dld_ddddot": 2.0 * p.lambda_smooth * f["d_ddot"],
    }


def _position_partials(cand: TrajectoryCandidate, env: MtoEnvironment,
                       p: AgentParams, h: float = 1e-4) -> tuple[np.ndarray, np.ndarray]:
    """Central-difference partials of the integrands w.r.t. the coordinates.

    The longitudinal coordinate shifts the sample along the heading; the
    lateral one along the left normal (also perturbing the lane feedback).
    """
    f = cand.frenet
    c = cand.cartesian
    cos_t = np.cos(c["theta"])
    sin_t = np.sin(c["theta"])

    def crowd_terms(x, y):
        fc_s, fc_d = _crowd_force_arrays(x, y, c["theta"], env, p)
        return -fc_s * f["s_dot"], -fc_d * f["d_dot"]

    ls_p, _ = crowd_terms(c["x"] + h * cos_t, c["y"] + h * sin_t)
    ls_m, _ = crowd_terms(c["x"] - h * cos_t, c["y"] - h * sin_t)
    dls_ds = (ls_p - ls_m) / (2 * h)

    _, ld_p = crowd_terms(c["x"] - h * sin_t, c["y"] + h * cos_t)
    _, ld_m = crowd_terms(c["x"] + h * sin_t, c["y"] - h * cos_t)
    dld_dd = (ld_p - ld_m) / (2 * h)
    # lane feedback: d(-F_d*d_dot)/dd with F_d = -m*B_type*d (interior of the lane)
    r_li = 0.5 * p.lane_width + f["d"]
    interior = (r_li > 0.0) & (r_li < p.lane_width)
    dld_dd += np.where(interior, p.mass * p.b_type * f["d_dot"], 0.0)
    return dls_ds, dld_dd


def euler_lagrange_residual(cand: TrajectoryCandidate, env: MtoEnvironment,
                            p: AgentParams) -> np.ndarray:
    """Per-sample norm of the fourth-order Euler-Lagrange residual, both axes."""
    if cand.n_samples < 5:
        raise InvalidInput("need at least 5 samples for central differences")
    parts = lagrangian_partials(cand, env, p)
    dls_ds, dld_dd = _position_partials(cand, env, p)
    t = cand.times
    res_s = (np.gradient(parts["dls_dsdot"], t) - dls_ds
             + np.gradient(np.gradient(parts["dls_dsddot"], t), t))
    res_d = (np.gradient(parts["dld_dddot"], t) - dld_dd
             + np.gradient(np.gradient(parts["dld_ddddot"], t), t))
    return np.hypot(res_s, res_d)


def mto_action(cand: TrajectoryCandidate, env: MtoEnvironment, p: AgentParams,
               targets: np.ndarray | None = None,
               terminal_weight: float = 1.0) -> float:
    """Refinement objective: Lagrangian action plus quadratic terminal deviation."""
    l_s, l_d = lagrangian_cost(cand, env, p)
    total = l_s + l_d
    if targets is not None:
        term = _terminal_vector(cand)
        total += terminal_weight * float(np.sum((term - targets) ** 2))
    return total


def _terminal_vector(cand: TrajectoryCandidate) -> np.ndarray:
    """(s_T, s_dot_T, s_ddot_T, d_T, d'_T, d''_T) of the candidate's boundary solve."""
    lon, lat = cand.lon, cand.lat
    return np.array([
        float(lon.value(lon.span)), float(lon.deriv1(lon.span)),
        float(lon.deriv2(lon.span)),
        float(lat.value(lat.span)), float(lat.deriv1(lat.span)),
        float(lat.deriv2(lat.span)),
    ])


def _rebuild(cand: TrajectoryCandidate, terminal: np.ndarray,
             ref: ReferenceLine) -> TrajectoryCandidate:
    start_lon = (float(cand.lon.value(0.0)), float(cand.lon.deriv1(0.0)),
                 float(cand.lon.deriv2(0.0)))
    start_lat = (float(cand.lat.value(0.0)), float(cand.lat.deriv1(0.0)),
                 float(cand.lat.deriv2(0.0)))
    T = cand.horizon
    lon = solve_quintic_boundary(start_lon, terminal[:3], T)
    span = terminal[0] - start_lon[0]
    if span <= 1e-6:
        raise SingularSystem("refined terminal state removes longitudinal progress")
    lat = solve_quintic_boundary(start_lat, terminal[3:], span)
    lat = QuinticPoly(lat.coeffs, span=span, axis=LAT)
    return discretize_candidate(lon, lat, T, cand.dt, ref)


def refine_candidate(cand: TrajectoryCandidate, env: MtoEnvironment, p: AgentParams,
                     ref: ReferenceLine, iters: int = 5, step: float = 0.1,
                     min_step: float = 1e-6) -> TrajectoryCandidate:
    """Gradient descent on the action over the terminal boundary triplets.

    The start triplets stay frozen; each trial terminal state re-solves the
    quintics. Backtracking halves the step until the action decreases, so the
    returned candidate's action never exceeds the input's. A singular re-solve
    returns the original candidate unrefined.
    """
    if iters < 0:
        raise InvalidInput("iters must be non-negative")
    targets = _terminal_vector(cand)
    current = cand
    current_val = mto_action(cand, env, p, targets)
    theta = targets.copy()
    h = 1e-4
    for _ in range(iters):
        grad = np.zeros(6)
        try:
            for j in range(6):
                up = theta.copy(); up[j] += h
                dn = theta.copy(); dn[j] -= h
                grad[j] = (mto_action(_rebuild(current, up, ref), env, p, targets)
                           - mto_action(_rebuild(current, dn, ref), env, p, targets)) / (2 * h)
        except SingularSystem:
            return cand
        gnorm = float(np.linalg.norm(grad))
        if gnorm < 1e-12:
            break
        stp = step
        improved = False
        while stp >= min_step:
            trial_theta = theta - stp * grad / gnorm
            try:
                trial = _rebuild(current, trial_theta, ref)
            except SingularSystem:
                stp *= 0.5
                continue
            trial_val = mto_action(trial, env, p, targets)
            if trial_val < current_val:
                current, current_val, theta = trial, trial_val, trial_theta
                improved = True
                break
            stp *= 0.5
        if not improved:
            break
    return current


def state_space_propagate(xi: np.ndarray, u: tuple, dt: float) -> np.ndarray:
    """Exact triple-integrator update of (s, s_dot, s_ddot, d, d_dot, d_ddot)."""
    if dt <= 0.0:
        raise InvalidInput("dt must be positive")
    xi = np.asarray(xi, dtype=float)
    out = xi.copy()
    for axis, jerk in enumerate(u):
        p_, v_, a_ = xi[3 * axis: 3 * axis + 3]
        out[3 * axis] = p_ + v_ * dt + 0.5 * a_ * dt**2 + jerk * dt**3 / 6.0
        out[3 * axis + 1] = v_ + a_ * dt + 0.5 * jerk * dt**2
        out[3 * axis + 2] = a_ + jerk * dt
    return out
