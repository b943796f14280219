"""Frenet-frame trajectory sampling, momentum-constrained refinement, and
learned cost-weight adaptation for 2D motion planning."""

from .errors import (CorruptCheckpoint, DegenerateGeometry, InvalidInput,
                     MhhtofError, NoFeasiblePlan, OutOfDomain, ProtocolError,
                     ScenarioValidationError, ShapeError, Singularity,
                     SingularSystem)
from .geometry import (CartesianState, FrenetState, ReferenceLine,
                       build_reference_line, cartesian_to_frenet,
                       frenet_to_cartesian, normalize_angle, project_point)
from .sampling import (QuinticPoly, SamplingGrid, TrajectoryCandidate,
                       discretize_candidate, generate_htsc,
                       solve_quintic_boundary)
from .mto import (AgentParams, MtoEnvironment, NeighborState, crowd_force,
                  guidance_force, lagrangian_cost, mto_action,
                  refine_candidate, state_space_propagate)
from .evaluation import (CostVector, KinematicLimits, ObstacleTrack, Scene,
                         WeightVector, collision_check, cost_terms,
                         kinematic_check, prune_stage1, select_trajectory,
                         weighted_cost)
from .simenv import (Episode, Planner, RewardConfig, Scenario,
                     build_observation, hierarchical_reward, load_scenario,
                     risk_metrics, save_scenario, scenario_from_dict)
from .neural import (NetworkSpec, SequenceNet, load_params, save_params)
from .ppo import (Checkpoint, TrainConfig, apply_action_to_weights,
                  compute_gae, evaluate_policy, load_checkpoint,
                  save_checkpoint, train)

__version__ = "0.1.0"
