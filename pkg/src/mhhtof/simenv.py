"""Deterministic 2D episodic environment with a planner in the loop.

A Scenario (JSON, schema "mhhtof-scenario/1") fixes the reference line, lane,
goal, scripted obstacles and deadline. Each episode step replans over one
control period: sample a cluster, screen feasibility, score the seven-term
cost, advance the ego along the selected candidate, and emit the cognitive
observation plus the three-layer hierarchical reward.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    InvalidInput,
    NoFeasiblePlan,
    ProtocolError,
    ScenarioValidationError,
)
from .evaluation import (
    KinematicLimits,
    ObstacleTrack,
    Scene,
    WeightVector,
    collision_check,
    cost_terms,
    kinematic_check,
    prune_stage1,
    select_trajectory,
    weighted_cost,
    _gaussian_field,
)
from .geometry import (
    CartesianState,
    build_reference_line,
    cartesian_to_frenet,
    normalize_angle,
)
from .sampling import SamplingGrid, generate_htsc

SCENARIO_SCHEMA = "mhhtof-scenario/1"
TRACE_HEADER = "step,x,y,v,a,reward,cost,ego_risk,obs_risk,cause"
OBSERVATION_DIM = 15
EMERGENCY_DECEL = 1.0  # m/s^2, comfortable maximal braking
SPEED_BAND = 0.5       # m/s tolerance around a target-speed goal


# ---------------------------------------------------------------------------
# scenario model


@dataclass
class Goal:
    center: tuple
    radius: float
    deadline: int
    target_speed: float | None = None


@dataclass
class Scenario:
    reference_waypoints: list
    lane_width: float
    v_law: float
    ego_start: CartesianState
    ego_radius: float
    goal: Goal
    obstacles: list  # of ObstacleTrack
    dt: float = 0.1
    seed: int = 0
    name: str = "unnamed"

    def to_dict(self) -> dict:
        e = self.ego_start
        return {
            "schema": SCENARIO_SCHEMA,
            "name": self.name,
            "reference_waypoints": [[float(x), float(y)]
                                    for x, y in self.reference_waypoints],
            "lane_width": self.lane_width,
            "v_law": self.v_law,
            "ego_start": {"x": e.x, "y": e.y, "theta": e.theta, "v": e.v,
                          "a": e.a, "kappa": e.kappa},
            "ego_radius": self.ego_radius,
            "goal": {
                "center": [float(self.goal.center[0]), float(self.goal.center[1])],
                "radius": self.goal.radius,
                "deadline": self.goal.deadline,
                **({"target_speed": self.goal.target_speed}
                   if self.goal.target_speed is not None else {}),
            },
            "dynamic_obstacles": [
                {"radius": o.radius,
                 "poses": [[float(x), float(y)] for x, y in o.positions]}
                for o in self.obstacles
            ],
            "dt": self.dt,
            "seed": self.seed,
        }


def _require(cond: bool, fieldpath: str, message: str):
    if not cond:
        raise ScenarioValidationError(fieldpath, message)


def _finite(value, fieldpath: str) -> float:
    try:
        v = float(value)
    except (TypeError, ValueError):
        raise ScenarioValidationError(fieldpath, "not a number") from None
    _require(math.isfinite(v), fieldpath, "must be finite")
    return v


def scenario_from_dict(data: dict) -> Scenario:
    _require(isinstance(data, dict), "", "scenario must be a JSON object")
    _require(data.get("schema") == SCENARIO_SCHEMA, "schema",
             f"expected {SCENARIO_SCHEMA!r}")
    wps = data.get("reference_waypoints")
    _require(isinstance(wps, list) and len(wps) >= 2, "reference_waypoints",
             "need at least two waypoints")
    waypoints = []
    for i, wp in enumerate(wps):
        _require(isinstance(wp, list) and len(wp) == 2,
                 f"reference_waypoints[{i}]", "expected [x, y]")
        waypoints.append((_finite(wp[0], f"reference_waypoints[{i}][0]"),
                          _finite(wp[1], f"reference_waypoints[{i}][1]")))
    w = _finite(data.get("lane_width"), "lane_width")
    _require(w > 0, "lane_width", "must be positive")
    v_law = _finite(data.get("v_law"), "v_law")
    _require(v_law > 0, "v_law", "must be positive")
    es = data.get("ego_start")
    _require(isinstance(es, dict), "ego_start", "expected an object")
    ego = CartesianState(
        x=_finite(es.get("x"), "ego_start.x"),
        y=_finite(es.get("y"), "ego_start.y"),
        theta=_finite(es.get("theta", 0.0), "ego_start.theta"),
        kappa=_finite(es.get("kappa", 0.0), "ego_start.kappa"),
        v=_finite(es.get("v", 0.0), "ego_start.v"),
        a=_finite(es.get("a", 0.0), "ego_start.a"),
    )
    ego_radius = _finite(data.get("ego_radius"), "ego_radius")
    _require(ego_radius > 0, "ego_radius", "must be positive")
    g = data.get("goal")
    _require(isinstance(g, dict), "goal", "expected an object")
    deadline = g.get("deadline")
    _require(isinstance(deadline, int) and deadline >= 1, "goal.deadline",
             "must be an integer >= 1")
    center = g.get("center")
    _require(isinstance(center, list) and len(center) == 2, "goal.center",
             "expected [x, y]")
    goal = Goal(
        center=(_finite(center[0], "goal.center[0]"),
                _finite(center[1], "goal.center[1]")),
        radius=_finite(g.get("radius"), "goal.radius"),
        deadline=deadline,
        target_speed=(None if g.get("target_speed") is None
                      else _finite(g["target_speed"], "goal.target_speed")),
    )
    _require(goal.radius > 0, "goal.radius", "must be positive")
    dt = _finite(data.get("dt", 0.1), "dt")
    _require(dt > 0, "dt", "must be positive")
    obstacles = []
    for i, ob in enumerate(data.get("dynamic_obstacles", [])):
        path = f"dynamic_obstacles[{i}]"
        _require(isinstance(ob, dict), path, "expected an object")
        radius = _finite(ob.get("radius"), f"{path}.radius")
        _require(radius > 0, f"{path}.radius", "must be positive")
        poses = ob.get("poses")
        _require(isinstance(poses, list) and len(poses) >= 1, f"{path}.poses",
                 "script must be non-empty")
        pts = []
        for k, pose in enumerate(poses):
            _require(isinstance(pose, list) and len(pose) == 2,
                     f"{path}.poses[{k}]", "expected [x, y]")
            pts.append([_finite(pose[0], f"{path}.poses[{k}][0]"),
                        _finite(pose[1], f"{path}.poses[{k}][1]")])
        obstacles.append(ObstacleTrack.from_script(pts, dt, radius))
    seed = data.get("seed", 0)
    _require(isinstance(seed, int), "seed", "must be an integer")
    scn = Scenario(waypoints, w, v_law, ego, ego_radius, goal, obstacles,
                   dt=dt, seed=seed, name=str(data.get("name", "unnamed")))
    for i, obs in enumerate(scn.obstacles):
        gap = (math.dist((ego.x, ego.y), tuple(obs.positions_at(0.0)[0]))
               - ego_radius - obs.radius)
        _require(gap > 0, f"dynamic_obstacles[{i}]",
                 "ego start is in collision with this obstacle")
    return scn


def load_scenario(path) -> Scenario:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ScenarioValidationError("", f"invalid JSON: {exc}") from exc
    return scenario_from_dict(data)


def save_scenario(scn: Scenario, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scn.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# observation / reward / risk


@dataclass(frozen=True)
class ClusterSummary:
    """Per-cycle evaluation statistics fed into the observation."""

    n_total: int = 0
    n_feasible: int = 0
    min_cost: float = 0.0
    mean_cost: float = 0.0
    std_cost: float = 0.0

    @classmethod
    def from_costs(cls, n_total: int, feasible_costs) -> "ClusterSummary":
        costs = np.asarray(feasible_costs, dtype=float)
        if costs.size == 0:
            return cls(n_total=n_total)
        return cls(n_total=n_total, n_feasible=int(costs.size),
                   min_cost=float(np.min(costs)),
                   mean_cost=float(np.mean(costs)),
                   std_cost=float(np.std(costs)))


@dataclass(frozen=True)
class RewardConfig:
    lambda_task: float = 1.0
    lambda_behav: float = 1.0
    lambda_risk: float = 1.0
    success_reward: float = 1000.0
    early_bonus_rate: float = 0.5
    failure_penalty: float = -100.0
    timeout_penalty: float = -50.0
    align_coeff: float = 1.0
    speed_coeff: float = 1.0
    progress_coeff: float = 1.0
    cost_gap_coeff: float = 1.0
    self_risk_coeff: float = 10.0
    obs_risk_coeff: float = 10.0

    def __post_init__(self):
        if min(self.lambda_task, self.lambda_behav, self.lambda_risk) < 0:
            raise InvalidInput("layer weights must be non-negative")


@dataclass(frozen=True)
class RiskMetrics:
    ego_risk: float
    obstacle_risk: float

    def __post_init__(self):
        if self.ego_risk < 0 or self.obstacle_risk < 0:
            raise InvalidInput("risk metrics must be non-negative")


@dataclass(frozen=True)
class Transition:
    """Everything hierarchical_reward needs about one executed step."""

    cause: str | None
    t_remain_frac: float
    align_err: float
    speed_err: float
    progress: float
    cost_gap: float
    ego_risk: float
    obs_risk: float


def hierarchical_reward(tr: Transition, cfg: RewardConfig):
    """Three-layer reward; returns (scalar, breakdown) with exact layer sums."""
    if tr.cause == "success":
        task = cfg.success_reward * (1.0 + cfg.early_bonus_rate * tr.t_remain_frac)
    elif tr.cause in ("collision", "infeasible"):
        task = cfg.failure_penalty
    elif tr.cause == "timeout":
        task = cfg.timeout_penalty
    else:
        task = 0.0
    behav = (-cfg.align_coeff * tr.align_err
             - cfg.speed_coeff * tr.speed_err
             + cfg.progress_coeff * tr.progress
             + cfg.cost_gap_coeff * tr.cost_gap)
    risk = -cfg.self_risk_coeff * tr.ego_risk - cfg.obs_risk_coeff * tr.obs_risk
    breakdown = {
        "task": cfg.lambda_task * task,
        "behavior": cfg.lambda_behav * behav,
        "risk": cfg.lambda_risk * risk,
    }
    return breakdown["task"] + breakdown["behavior"] + breakdown["risk"], breakdown


def risk_metrics(v, a, kappa, positions, times, limits: KinematicLimits,
                 obstacles, sigma_rot_diag=(4.0, 1.0)) -> RiskMetrics:
    """Normalized limit-violation and Gaussian-field exposures, sample means."""
    v = np.atleast_1d(np.asarray(v, dtype=float))
    a = np.atleast_1d(np.asarray(a, dtype=float))
    kappa = np.atleast_1d(np.asarray(kappa, dtype=float))
    hinge = (np.maximum(0.0, np.abs(a) / limits.a_max - 1.0) ** 2
             + np.maximum(0.0, v / limits.v_max - 1.0) ** 2
             + np.maximum(0.0, np.abs(kappa) / limits.kappa_max - 1.0) ** 2)
    ego_risk = float(np.mean(hinge))
    obs_risk = 0.0
    if obstacles:
        pos = np.asarray(positions, dtype=float).reshape(-1, 2)
        t = np.atleast_1d(np.asarray(times, dtype=float))
        s_long, s_lat = sigma_rot_diag
        peak = 1.0 / (2.0 * math.pi * math.sqrt(s_long * s_lat))
        total = np.zeros(len(pos))
        for obs in obstacles:
            delta = pos - obs.positions_at(t)
            total += _gaussian_field(delta, obs.headings_at(t), sigma_rot_diag)
        obs_risk = float(np.mean(total / peak))
    return RiskMetrics(ego_risk=ego_risk, obstacle_risk=obs_risk)


def build_observation(ego: CartesianState, ref, scn: Scenario, step: int,
                      summary: ClusterSummary, limits: KinematicLimits) -> np.ndarray:
    """The 15-feature cognitive observation vector.

    Features 0-9 are normalized into [0, 1] or [-1, 1]; the cluster cost
    statistics (indices 11-13) are raw, finite, unbounded reals.
    """
    from .geometry import project_point

    v_hat = min(max(ego.v / limits.v_max, 0.0), 1.0)
    a_hat = min(max(ego.a / limits.a_max, -1.0), 1.0)
    omega_hat = min(max(ego.kappa * ego.v / limits.yaw_rate_max, -1.0), 1.0)
    s_ref, d_ref = project_point(ref, ego.x, ego.y)
    heading_err = normalize_angle(ego.theta - ref.heading_at(s_ref)) / math.pi
    gap = math.dist((ego.x, ego.y), scn.goal.center) - scn.goal.radius
    d_goal = max(gap, 0.0)
    in_goal = 1.0 if d_goal == 0.0 else 0.0
    t_remain = max(0.0, 1.0 - step / scn.goal.deadline)
    half = 0.5 * scn.lane_width
    lane_l = min(max((half - d_ref) / scn.lane_width, 0.0), 1.0)
    lane_r = min(max((half + d_ref) / scn.lane_width, 0.0), 1.0)
    rho_obs = 0.0
    p_risk = 0.0
    if scn.obstacles:
        t = step * scn.dt
        dists = []
        s_long, s_lat = 4.0, 1.0
        peak = 1.0 / (2.0 * math.pi * math.sqrt(s_long * s_lat))
        for obs in scn.obstacles:
            center = obs.positions_at(t)[0]
            dists.append(math.dist((ego.x, ego.y), tuple(center)) - obs.radius)
            delta = np.array([[ego.x - center[0], ego.y - center[1]]])
            p_risk += float(_gaussian_field(delta, obs.headings_at(t),
                                            (s_long, s_lat))[0]) / peak
        rho_obs = min(1.0 / max(min(dists), 0.1), 10.0) / 10.0
        p_risk = min(p_risk, 1.0)
    eta_valid = summary.n_feasible / summary.n_total if summary.n_total else 0.0
    obs = np.array([
        v_hat, a_hat, omega_hat, heading_err, d_goal, t_remain, in_goal,
        lane_l, lane_r, rho_obs, eta_valid,
        summary.min_cost, summary.mean_cost, summary.std_cost, p_risk,
    ])
    if not np.all(np.isfinite(obs)):
        raise InvalidInput("non-finite observation feature")
    return obs


# ---------------------------------------------------------------------------
# planner + episode


@dataclass
class PlanResult:
    candidate: object        # TrajectoryCandidate or None for emergency stop
    index: int
    summary: ClusterSummary
    cost_vector: object      # CostVector of the selection
    weighted: float


class Planner:
    """One receding-horizon planning cycle over the scenario's reference line."""

    def __init__(self, scn: Scenario, limits: KinematicLimits | None = None,
                 n1: int = 20, ref_ds: float = 0.5, horizons=(2.0, 3.5)):
        self.scn = scn
        self.ref = build_reference_line(scn.reference_waypoints, ref_ds)
        self.limits = limits or KinematicLimits(
            a_max=1.5, j_max=2.5, kappa_max=1.0, yaw_rate_max=1.0,
            v_max=scn.v_law + SPEED_BAND)
        self.n1 = n1
        # two horizons keep the per-step cluster small enough for online
        # training; batch planning can pass the full (2, 3, 4, 5) ladder
        self.horizons = tuple(horizons)

    def scene_at(self, step: int) -> Scene:
        return Scene(obstacles=self.scn.obstacles, v_desire=self.scn.v_law)

    def plan(self, ego: CartesianState, wv: WeightVector, step: int) -> PlanResult:
        scn = self.scn
        frenet = cartesian_to_frenet(self.ref, ego,
                                     d_max=max(2.0 * scn.lane_width, 5.0))
        speed = max(ego.v, 0.3)
        grid = SamplingGrid.default(speed, scn.v_law,
                                    lateral_bound=0.5 * scn.lane_width - scn.ego_radius,
                                    horizons=self.horizons)
        cluster = generate_htsc(frenet, grid, self.ref, dt=scn.dt)
        keep = prune_stage1(cluster, wv, v_desire=scn.v_law, n1=self.n1)
        pruned = [cluster[i] for i in keep]
        scene = self.scene_at(step)
        t0 = step * scn.dt
        obstacles = _shift_obstacles(scene.obstacles, t0)
        stage2 = Scene(obstacles=obstacles, v_desire=scn.v_law)
        feasible, cvs = [], []
        for cand in pruned:
            ok = (kinematic_check(cand, self.limits).passed
                  and collision_check(cand, obstacles, scn.ego_radius)[0])
            feasible.append(ok)
            cvs.append(cost_terms(cand, stage2) if ok else None)
        costs = [weighted_cost(cv, wv) for cv in cvs if cv is not None]
        summary = ClusterSummary.from_costs(len(cluster), costs)
        live = [(i, cv) for i, (cv, ok) in enumerate(zip(cvs, feasible)) if ok]
        if not live:
            raise NoFeasiblePlan("every pruned candidate failed screening")
        sel, _ = select_trajectory([pruned[i] for i, _ in live],
                                   [cv for _, cv in live], wv)
        idx = live[sel][0]
        return PlanResult(candidate=pruned[idx], index=keep[idx], summary=summary,
                          cost_vector=cvs[idx],
                          weighted=weighted_cost(cvs[idx], wv))


def _shift_obstacles(obstacles, t0: float):
    """Obstacle tracks re-based so candidate-local time 0 is episode time t0."""
    if t0 == 0.0:
        return list(obstacles)
    return [ObstacleTrack(o.radius, o.times - t0, o.positions)
            for o in obstacles]


class Episode:
    """Planner-in-the-loop episode over one scenario. Fully deterministic."""

    def __init__(self, scn: Scenario, reward_cfg: RewardConfig | None = None,
                 limits: KinematicLimits | None = None, n1: int = 30):
        self.scn = scn
        self.cfg = reward_cfg or RewardConfig()
        self.planner = Planner(scn, limits=limits, n1=n1)
        self.limits = self.planner.limits
        self.reset()

    def reset(self) -> np.ndarray:
        self.step_count = 0
        self.ego = self.scn.ego_start
        self.done = False
        self.cause = None
        self.emergency_streak = 0
        self.last_summary = ClusterSummary()
        self.trace = []
        return self.observe()

    def observe(self) -> np.ndarray:
        return build_observation(self.ego, self.planner.ref, self.scn,
                                 self.step_count, self.last_summary, self.limits)

    def plan(self, wv: WeightVector) -> PlanResult | None:
        """Run one planning cycle; None signals the emergency-stop fallback."""
        try:
            result = self.planner.plan(self.ego, wv, self.step_count)
        except NoFeasiblePlan:
            self.last_summary = ClusterSummary()
            return None
        self.last_summary = result.summary
        return result

    def _advance_emergency(self) -> CartesianState:
        e = self.ego
        dt = self.scn.dt
        v_new = max(0.0, e.v - EMERGENCY_DECEL * dt)
        dist = 0.5 * (e.v + v_new) * dt
        return CartesianState(
            x=e.x + dist * math.cos(e.theta), y=e.y + dist * math.sin(e.theta),
            theta=e.theta, kappa=e.kappa, v=v_new,
            a=-EMERGENCY_DECEL if e.v > 0 else 0.0)

    def step(self, plan: PlanResult | None):
        """Execute one control period of the selected candidate (or brake)."""
        if self.done:
            raise ProtocolError("step() called on a finished episode")
        scn = self.scn
        prev = self.ego
        if plan is None:
            self.emergency_streak += 1
            self.ego = self._advance_emergency()
            cost_gap = 0.0
            weighted_sel = 0.0
            cost_vector = None
        else:
            self.emergency_streak = 0
            self.ego = plan.candidate.cartesian_state(1)
            cost_gap = plan.summary.min_cost - plan.weighted
            weighted_sel = plan.weighted
            cost_vector = plan.cost_vector
        self.step_count += 1
        t_now = self.step_count * scn.dt

        # termination checks
        cause = None
        for obs in scn.obstacles:
            center = obs.positions_at(t_now)[0]
            if (math.dist((self.ego.x, self.ego.y), tuple(center))
                    <= scn.ego_radius + obs.radius):
                cause = "collision"
                break
        if cause is None and self.emergency_streak >= 2:
            cause = "infeasible"
        if cause is None:
            in_region = (math.dist((self.ego.x, self.ego.y), scn.goal.center)
                         <= scn.goal.radius)
            speed_ok = (scn.goal.target_speed is None
                        or abs(self.ego.v - scn.goal.target_speed) <= SPEED_BAND)
            if in_region and speed_ok:
                cause = "success"
        if cause is None and self.step_count >= scn.goal.deadline:
            cause = "timeout"

        risks = risk_metrics(
            self.ego.v, self.ego.a, self.ego.kappa,
            [[self.ego.x, self.ego.y]], [t_now], self.limits, scn.obstacles)
        ref = self.planner.ref
        from .geometry import project_point
        s_prev, _ = project_point(ref, prev.x, prev.y)
        s_now, _ = project_point(ref, self.ego.x, self.ego.y)
        align = abs(normalize_angle(self.ego.theta - ref.heading_at(s_now))) / math.pi
        target_v = scn.goal.target_speed if scn.goal.target_speed is not None else scn.v_law
        tr = Transition(
            cause=cause,
            t_remain_frac=max(0.0, 1.0 - self.step_count / scn.goal.deadline),
            align_err=align,
            speed_err=abs(self.ego.v - target_v),
            progress=s_now - s_prev,
            cost_gap=cost_gap,
            ego_risk=risks.ego_risk,
            obs_risk=risks.obstacle_risk,
        )
        reward, breakdown = hierarchical_reward(tr, self.cfg)
        self.done = cause is not None
        self.cause = cause
        self.trace.append((self.step_count, self.ego.x, self.ego.y, self.ego.v,
                           self.ego.a, reward, weighted_sel, risks.ego_risk,
                           risks.obstacle_risk, cause or ""))
        info = {
            "cause": cause,
            "cost_vector": cost_vector,
            "weighted_cost": weighted_sel,
            "risk": risks,
            "summary": self.last_summary,
            "reward_breakdown": breakdown,
            "transition": tr,
        }
        return self.observe(), reward, self.done, info

    def step_with_weights(self, wv: WeightVector):
        """Plan + execute in one call; the agent-facing transition."""
        return self.step(self.plan(wv))

    def write_trace(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(TRACE_HEADER + "\n")
            for row in self.trace:
                step, x, y, v, a, r, c, er, orisk, cause = row
                fh.write(f"{step},{x:.9f},{y:.9f},{v:.9f},{a:.9f},"
                         f"{r:.9f},{c:.9f},{er:.9f},{orisk:.9f},{cause}\n")
