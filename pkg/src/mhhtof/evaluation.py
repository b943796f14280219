"""Feasibility screening and two-stage multi-objective trajectory cost.

Stage 1 scores candidates in the Frenet frame (lateral irregularity plus a
velocity-tracking longitudinal term) and prunes the cluster; stage 2 evaluates
the seven Cartesian cost descriptors and selects the weighted argmin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInput, NoFeasiblePlan
from .sampling import TrajectoryCandidate

EPS_DISTANCE = 0.1     # m, floor for the proximity reciprocal
EPS_MAHALANOBIS = 1e-3  # floor for the social-compliance denominator
STAGE1_EPS = 1e-6       # guard for the weight-transfer ratio
N1_DEFAULT = 30

COST_TERM_NAMES = ("ae", "jm", "vo", "pd", "opp", "rfp", "sc")


@dataclass(frozen=True)
class KinematicLimits:
    a_max: float = 1.5
    j_max: float = 2.5
    kappa_max: float = 1.0
    yaw_rate_max: float = 1.0
    v_max: float = 2.5

    def __post_init__(self):
        for name in ("a_max", "j_max", "kappa_max", "yaw_rate_max", "v_max"):
            if getattr(self, name) <= 0.0:
                raise InvalidInput(f"{name} must be strictly positive")


@dataclass(frozen=True)
class CostVector:
    """The seven descriptors: acceleration energy, jerk, velocity offset,
    path deviation, obstacle proximity penalty, risk-field penalty, social
    compliance."""

    ae: float
    jm: float
    vo: float
    pd: float
    opp: float
    rfp: float
    sc: float

    def __post_init__(self):
        for name in COST_TERM_NAMES:
            v = float(getattr(self, name))
            if not math.isfinite(v) or v < 0.0:
                raise InvalidInput(f"cost term {name} must be finite and >= 0")
            object.__setattr__(self, name, v)

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in COST_TERM_NAMES])


@dataclass(frozen=True)
class WeightVector:
    lam: np.ndarray = field(default_factory=lambda: np.ones(7))
    lam_min: np.ndarray = field(default_factory=lambda: np.zeros(7))
    lam_max: np.ndarray = field(default_factory=lambda: np.full(7, 10.0))

    def __post_init__(self):
        lam = np.asarray(self.lam, dtype=float)
        lo = np.asarray(self.lam_min, dtype=float)
        hi = np.asarray(self.lam_max, dtype=float)
        if lam.shape != (7,) or lo.shape != (7,) or hi.shape != (7,):
            raise InvalidInput("weight vectors must have exactly 7 components")
        if np.any(lo < 0.0) or np.any(lo > hi):
            raise InvalidInput("require 0 <= lam_min <= lam_max componentwise")
        if np.any(lam < lo - 1e-12) or np.any(lam > hi + 1e-12):
            raise InvalidInput("weights outside [lam_min, lam_max]")
        object.__setattr__(self, "lam", np.clip(lam, lo, hi))
        object.__setattr__(self, "lam_min", lo)
        object.__setattr__(self, "lam_max", hi)

    def with_lam(self, lam) -> "WeightVector":
        return WeightVector(np.clip(np.asarray(lam, dtype=float),
                                    self.lam_min, self.lam_max),
                            self.lam_min, self.lam_max)


@dataclass(frozen=True)
class FeasibilityReport:
    passed: bool
    violations: tuple
    min_clearance: float


@dataclass(frozen=True)
class ObstacleTrack:
    """A disc obstacle following a scripted polyline of poses.

    Positions are linearly interpolated between script samples and held at the
    endpoints outside the scripted window.
    """

    radius: float
    times: np.ndarray
    positions: np.ndarray  # (n, 2)

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        p = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        if self.radius <= 0.0:
            raise InvalidInput("obstacle radius must be positive")
        if len(t) != len(p) or len(t) == 0:
            raise InvalidInput("times and positions must align and be non-empty")
        if np.any(np.diff(t) <= 0) and len(t) > 1:
            raise InvalidInput("script times must be strictly increasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "positions", p)
        if len(t) >= 2:
            vel = np.stack([np.gradient(p[:, 0], t), np.gradient(p[:, 1], t)],
                           axis=-1)
        else:
            vel = np.zeros((len(t), 2))
        object.__setattr__(self, "_script_vel", vel)
        object.__setattr__(self, "_sample_cache", {})

    @classmethod
    def static(cls, x: float, y: float, radius: float) -> "ObstacleTrack":
        return cls(radius, np.array([0.0]), np.array([[x, y]]))

    @classmethod
    def from_script(cls, poses, dt: float, radius: float) -> "ObstacleTrack":
        poses = np.asarray(poses, dtype=float).reshape(-1, 2)
        return cls(radius, dt * np.arange(len(poses)), poses)

    def _sampled(self, t):
        """(positions, velocities, headings) at t, cached per time grid.

        Planning cycles evaluate many candidates on a handful of shared
        horizon grids; the cache keys on the grid fingerprint.
        """
        t = np.atleast_1d(np.asarray(t, dtype=float))
        key = (float(t[0]), float(t[-1]), len(t))
        hit = self._sample_cache.get(key)
        if hit is not None:
            return hit
        pos = np.stack([np.interp(t, self.times, self.positions[:, 0]),
                        np.interp(t, self.times, self.positions[:, 1])], axis=-1)
        vel = np.stack([np.interp(t, self.times, self._script_vel[:, 0]),
                        np.interp(t, self.times, self._script_vel[:, 1])], axis=-1)
        # held pose beyond the script -> zero velocity
        vel[(t < self.times[0]) | (t > self.times[-1])] = 0.0
        head = np.where(np.hypot(vel[:, 0], vel[:, 1]) > 1e-9,
                        np.arctan2(vel[:, 1], vel[:, 0]), 0.0)
        if len(self._sample_cache) > 64:
            self._sample_cache.clear()
        self._sample_cache[key] = (pos, vel, head)
        return pos, vel, head

    def positions_at(self, t) -> np.ndarray:
        return self._sampled(t)[0]

    def velocities_at(self, t) -> np.ndarray:
        return self._sampled(t)[1]

    def headings_at(self, t) -> np.ndarray:
        return self._sampled(t)[2]


@dataclass
class Scene:
    """Evaluation-time environment: obstacle scripts and the desired speed."""

    obstacles: list = field(default_factory=list)
    v_desire: float = 1.0
    sigma_rot_diag: tuple = (4.0, 1.0)
    sigma_v: np.ndarray = field(default_factory=lambda: np.eye(2))


def kinematic_check(cand: TrajectoryCandidate,
                    limits: KinematicLimits) -> FeasibilityReport:
    """Per-sample limit screen; boundary-equal values pass."""
    c = cand.cartesian
    jerk = np.gradient(c["a"], cand.times) if cand.n_samples > 1 else np.zeros(1)
    checks = (
        ("acceleration", np.abs(c["a"]), limits.a_max),
        ("jerk", np.abs(jerk), limits.j_max),
        ("curvature", np.abs(c["kappa"]), limits.kappa_max),
        ("yaw_rate", np.abs(c["kappa"] * c["v"]), limits.yaw_rate_max),
        ("speed", c["v"], limits.v_max),
    )
    violations = []
    for name, values, bound in checks:
        for k in np.flatnonzero(values > bound):
            violations.append((int(k), name, float(values[k]), float(bound)))
    violations.sort()
    return FeasibilityReport(passed=not violations,
                             violations=tuple(violations),
                             min_clearance=math.inf)


def collision_check(cand: TrajectoryCandidate, obstacles,
                    ego_radius: float) -> tuple[bool, float]:
    """Minimum disc-disc clearance over time-aligned samples; pass iff > 0."""
    if ego_radius <= 0.0:
        raise InvalidInput("ego radius must be positive")
    if not obstacles:
        return True, math.inf
    ego = np.stack([cand.cartesian["x"], cand.cartesian["y"]], axis=-1)
    min_clear = math.inf
    for obs in obstacles:
        centers = obs.positions_at(cand.times)
        gap = np.hypot(*(ego - centers).T) - ego_radius - obs.radius
        min_clear = min(min_clear, float(np.min(gap)))
    return min_clear > 0.0, min_clear


def _gaussian_field(delta: np.ndarray, headings: np.ndarray,
                    sigma_diag: tuple) -> np.ndarray:
    """Bivariate normal density of the displacement, covariance rotated to the
    obstacle heading."""
    s_long, s_lat = sigma_diag
    cos_h = np.cos(headings)
    sin_h = np.sin(headings)
    # components of delta in the obstacle frame
    u = delta[:, 0] * cos_h + delta[:, 1] * sin_h
    w = -delta[:, 0] * sin_h + delta[:, 1] * cos_h
    quad = u**2 / s_long + w**2 / s_lat
    norm = 1.0 / (2.0 * math.pi * math.sqrt(s_long * s_lat))
    return norm * np.exp(-0.5 * quad)


def cost_terms(cand: TrajectoryCandidate, scene: Scene) -> CostVector:
    """The seven descriptors by trapezoidal quadrature on the candidate grid."""
    t = cand.times
    T = float(t[-1] - t[0])
    c = cand.cartesian
    f = cand.frenet
    jerk = np.gradient(c["a"], t)
    phi1 = float(np.trapezoid(c["a"] ** 2, t))
    phi2 = float(np.trapezoid(jerk**2, t))
    vd = float(scene.v_desire)
    phi3 = float(np.trapezoid(np.abs(c["v"] - vd), t)) + (float(c["v"][-1]) - vd) ** 2
    phi4 = float(np.trapezoid(f["d"] ** 2, t))

    phi5 = phi6 = phi7 = 0.0
    if scene.obstacles:
        ego = np.stack([c["x"], c["y"]], axis=-1)
        ego_vel = np.stack([c["v"] * np.cos(c["theta"]),
                            c["v"] * np.sin(c["theta"])], axis=-1)
        sv_inv = np.linalg.inv(np.asarray(scene.sigma_v, dtype=float))
        decay = 1.0 - (t - t[0]) / max(T, 1e-12)
        for obs in scene.obstacles:
            delta = ego - obs.positions_at(t)
            dist2 = delta[:, 0] ** 2 + delta[:, 1] ** 2
            phi5 += float(np.trapezoid(1.0 / np.maximum(dist2, EPS_DISTANCE**2), t))
            phi6 += float(np.trapezoid(
                _gaussian_field(delta, obs.headings_at(t), scene.sigma_rot_diag), t))
            dv = obs.velocities_at(t) - ego_vel
            d_m = np.sqrt(np.einsum("ki,ij,kj->k", dv, sv_inv, dv))
            phi7 += float(np.trapezoid(decay / np.maximum(d_m, EPS_MAHALANOBIS), t))
    return CostVector(phi1, phi2, phi3, phi4, phi5, phi6, phi7)


def weighted_cost(cv: CostVector, wv: WeightVector) -> float:
    return float(wv.lam @ cv.as_array())


def select_trajectory(candidates, cost_vectors, wv: WeightVector,
                      feasible=None):
    """Weighted argmin over feasible candidates; lowest index wins ties."""
    if len(candidates) != len(cost_vectors):
        raise InvalidInput("candidates and cost vectors must align")
    if feasible is None:
        feasible = [True] * len(candidates)
    best_idx = -1
    best_cost = math.inf
    for i, (cv, ok) in enumerate(zip(cost_vectors, feasible)):
        if not ok:
            continue
        cost = weighted_cost(cv, wv)
        if cost < best_cost:
            best_idx, best_cost = i, cost
    if best_idx < 0:
        raise NoFeasiblePlan("no feasible candidate in the cluster")
    return best_idx, candidates[best_idx]


def stage1_frenet_cost(cand: TrajectoryCandidate, wv: WeightVector,
                       v_desire: float) -> float:
    """Frenet-frame pre-score J_d + k_s * J_s with the weight-transfer ratio."""
    t = cand.times
    f = cand.frenet
    lat_jerk = np.gradient(f["d_ddot"], t)
    j_d = float(np.trapezoid(lat_jerk**2, t)) + float(np.trapezoid(f["d"] ** 2, t))
    vo = (float(np.trapezoid(np.abs(f["s_dot"] - v_desire), t))
          + (float(f["s_dot"][-1]) - v_desire) ** 2)
    j_s = float(np.trapezoid(f["s_ddot"] ** 2, t)) + vo
    lam = wv.lam
    k_s = (lam[0] + lam[2]) / max(lam[1] + lam[3], STAGE1_EPS)
    return j_d + k_s * j_s


def prune_stage1(candidates, wv: WeightVector, v_desire: float,
                 n1: int = N1_DEFAULT) -> list[int]:
    """Indices of the n1 best candidates by stage-1 cost, ascending, stable."""
    if n1 <= 0:
        raise InvalidInput("n1 must be positive")
    scores = [stage1_frenet_cost(c, wv, v_desire) for c in candidates]
    order = sorted(range(len(candidates)), key=lambda i: (scores[i], i))
    return sorted(order[:n1])
