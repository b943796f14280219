"""Clipped-surrogate PPO with GAE over the episodic simulator.

The agent's action is a 7-vector of weight deltas applied to the trajectory
evaluator's WeightVector each step. Policy and value nets are the recurrent
SequenceNet assemblies; training uses stored-carry replay (each update
re-forwards episode segments from their snapshotted carries, so BPTT spans
exactly the collected segment). Optimization is manual Adam with global
gradient-norm clipping.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInput, ShapeError
from .evaluation import WeightVector
from .neural import NetworkSpec, SequenceNet, load_params, save_params
from .simenv import Episode, Scenario

LOG_2PI = math.log(2.0 * math.pi)

METRICS_HEADER = ("step,mean_reward,mean_ep_len,policy_loss,value_loss,"
                  "entropy,clip_frac,approx_kl,mean_cost,cost_var,"
                  "ego_risk,obs_risk")


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters.

    gamma defaults to 0.97; 0.80 is a documented alternative discount for
    short-horizon variants and can be set explicitly.
    """

    learning_rate: float = 3e-4
    clip_eps: float = 0.1
    gamma: float = 0.97
    gae_lambda: float = 0.97
    batch_size: int = 2352
    epochs: int = 5
    entropy_coeff: float = 0.01
    value_coeff: float = 0.5
    grad_clip: float = 0.5
    total_steps: int = 100_000
    eval_interval: int = 5000
    eval_episodes: int = 8
    patience: int = 10
    improve_tol: float = 1e-3
    checkpoint_interval: int = 40_000
    n_envs: int = 8
    minibatches: int = 4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    action_scale: float = 0.05
    cell: str = "lstm"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise InvalidInput("require 0 < gamma <= 1")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise InvalidInput("require 0 <= gae_lambda <= 1")
        if self.clip_eps <= 0.0:
            raise InvalidInput("clip_eps must be positive")
        if self.batch_size <= 0:
            raise InvalidInput("batch_size must be positive")
        if self.total_steps < 0 or self.n_envs <= 0 or self.epochs <= 0:
            raise InvalidInput("counts must be positive (total_steps >= 0)")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in sorted(self.__dataclass_fields__)}

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


def apply_action_to_weights(prev: WeightVector, delta) -> WeightVector:
    """Clipped additive weight update."""
    delta = np.asarray(delta, dtype=float)
    if delta.shape != (7,):
        raise ShapeError("weight delta must have 7 components")
    return prev.with_lam(prev.lam + delta)


def compute_gae(rewards, values, dones, bootstrap: float, gamma: float,
                lam: float):
    """Reverse-recursive GAE with episode-boundary masking."""
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=float)
    if not (len(rewards) == len(values) == len(dones)):
        raise ShapeError("rewards, values and dones must have equal length")
    n = len(rewards)
    adv = np.zeros(n)
    next_value = float(bootstrap)
    gae = 0.0
    for t in range(n - 1, -1, -1):
        mask = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * mask - values[t]
        gae = delta + gamma * lam * mask * gae
        adv[t] = gae
        next_value = values[t]
    return adv, adv + values


def gaussian_log_prob(actions, means, log_std):
    """Diagonal-Gaussian log density, summed over action dims."""
    inv_var = np.exp(-2.0 * log_std)
    diff = actions - means
    return -0.5 * np.sum(diff**2 * inv_var + 2.0 * log_std + LOG_2PI, axis=-1)


def gaussian_entropy(log_std) -> float:
    return float(np.sum(log_std + 0.5 * (LOG_2PI + 1.0)))


@dataclass
class Segment:
    """A within-episode contiguous run with its starting carries."""

    obs: np.ndarray       # (T, obs_dim)
    actions: np.ndarray   # (T, act_dim)
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    carry_policy: tuple
    carry_value: tuple
    bootstrap: float = 0.0
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def __len__(self):
        return len(self.obs)


@dataclass
class RolloutBuffer:
    segments: list = field(default_factory=list)
    step_carries: list = field(default_factory=list)  # per-step policy carries

    def __len__(self):
        return sum(len(s) for s in self.segments)

    def finalize_advantages(self, gamma: float, lam: float):
        for seg in self.segments:
            seg.advantages, seg.returns = compute_gae(
                seg.rewards, seg.values, seg.dones, seg.bootstrap, gamma, lam)

    def normalized_advantages(self):
        all_adv = np.concatenate([s.advantages for s in self.segments])
        mean = float(np.mean(all_adv))
        std = float(np.std(all_adv))
        return mean, max(std, 1e-8)


class _AgentState:
    """Per-environment rollout bookkeeping."""

    def __init__(self, scenario: Scenario, pnet, pparams, vnet, vparams):
        self.episode = Episode(scenario)
        self.obs = self.episode.reset()
        self.carry_p = pnet.zero_carry()
        self.carry_v = vnet.zero_carry()
        self.wv = WeightVector()
        self.pnet, self.vnet = pnet, vnet


def collect_rollout(scenarios, pnet: SequenceNet, pparams: dict,
                    vnet: SequenceNet, vparams: dict, batch_size: int,
                    rng, n_envs: int = 8, action_scale: float = 0.05,
                    deterministic: bool = False) -> RolloutBuffer:
    """Collect exactly batch_size env steps across round-robin environments.

    Segments break at episode ends so stored carries allow replay-exact
    recomputation of every log-prob.
    """
    envs = [_AgentState(scenarios[i % len(scenarios)], pnet, pparams,
                        vnet, vparams) for i in range(n_envs)]
    per_env = batch_size // n_envs
    remainder = batch_size - per_env * n_envs
    buffer = RolloutBuffer()
    log_std = pparams["log_std"]
    for i, env in enumerate(envs):
        steps_here = per_env + (1 if i < remainder else 0)
        rows = {k: [] for k in ("obs", "actions", "log_probs", "rewards",
                                "values", "dones")}
        seg_start_p, seg_start_v = env.carry_p, env.carry_v
        for _ in range(steps_here):
            obs = env.obs
            mean_seq, carry_p2, _ = pnet.forward(pparams, obs[None, :],
                                                 env.carry_p)
            mean = mean_seq[0]
            noise = np.zeros_like(mean) if deterministic else rng.standard_normal(mean.shape)
            action = mean + np.exp(log_std) * noise
            logp = float(gaussian_log_prob(action, mean, log_std))
            val_seq, carry_v2, _ = vnet.forward(vparams, obs[None, :],
                                                env.carry_v)
            value = float(val_seq[0, 0])
            buffer.step_carries.append((env.carry_p, obs.copy(), action.copy(),
                                        logp))
            env.carry_p, env.carry_v = carry_p2, carry_v2
            env.wv = apply_action_to_weights(env.wv, action_scale * action)
            next_obs, reward, done, _ = env.episode.step_with_weights(env.wv)
            for key, val in (("obs", obs), ("actions", action),
                             ("log_probs", logp), ("rewards", reward),
                             ("values", value), ("dones", float(done))):
                rows[key].append(val)
            env.obs = next_obs
            if done:
                buffer.segments.append(Segment(
                    obs=np.array(rows["obs"]), actions=np.array(rows["actions"]),
                    log_probs=np.array(rows["log_probs"]),
                    rewards=np.array(rows["rewards"]),
                    values=np.array(rows["values"]),
                    dones=np.array(rows["dones"]),
                    carry_policy=seg_start_p, carry_value=seg_start_v,
                    bootstrap=0.0))
                rows = {k: [] for k in rows}
                env.episode = Episode(env.episode.scn)
                env.obs = env.episode.reset()
                env.carry_p = pnet.zero_carry()
                env.carry_v = vnet.zero_carry()
                env.wv = WeightVector()
                seg_start_p, seg_start_v = env.carry_p, env.carry_v
        if rows["obs"]:
            tail_val, _, _ = vnet.forward(vparams, env.obs[None, :], env.carry_v)
            buffer.segments.append(Segment(
                obs=np.array(rows["obs"]), actions=np.array(rows["actions"]),
                log_probs=np.array(rows["log_probs"]),
                rewards=np.array(rows["rewards"]),
                values=np.array(rows["values"]), dones=np.array(rows["dones"]),
                carry_policy=seg_start_p, carry_value=seg_start_v,
                bootstrap=float(tail_val[0, 0])))
    return buffer


def ppo_loss(segments, pnet: SequenceNet, pparams: dict, vnet: SequenceNet,
             vparams: dict, clip_eps: float, entropy_coeff: float,
             value_coeff: float, adv_mean: float, adv_std: float):
    """Loss, diagnostics and exact gradients over a list of segments."""
    n_total = sum(len(s) for s in segments)
    grads_p = {k: np.zeros_like(v) for k, v in pparams.items()}
    grads_v = {k: np.zeros_like(v) for k, v in vparams.items()}
    log_std = pparams["log_std"]
    inv_var = np.exp(-2.0 * log_std)
    entropy = gaussian_entropy(log_std)
    surr_total = 0.0
    vloss_total = 0.0
    clip_hits = 0
    kl_total = 0.0
    for seg in segments:
        means, _, cache_p = pnet.forward(pparams, seg.obs, seg.carry_policy)
        vals_seq, _, cache_v = vnet.forward(vparams, seg.obs, seg.carry_value)
        vals = vals_seq[:, 0]
        diff = seg.actions - means
        logp_new = -0.5 * np.sum(diff**2 * inv_var + 2.0 * log_std + LOG_2PI,
                                 axis=-1)
        adv = (seg.advantages - adv_mean) / adv_std
        ratio = np.exp(logp_new - seg.log_probs)
        unclipped = ratio * adv
        clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
        take_unclipped = unclipped <= clipped
        surr = np.where(take_unclipped, unclipped, clipped)
        surr_total += float(np.sum(surr))
        clip_hits += int(np.sum(~take_unclipped))
        kl_total += float(np.sum(seg.log_probs - logp_new))
        # gradient of -mean(surr): only the unclipped branch carries dlogp
        dlogp = np.where(take_unclipped, ratio * adv, 0.0) / n_total
        d_means = (-dlogp)[:, None] * (diff * inv_var)
        grads_p_seg = pnet.backward(pparams, cache_p, d_means)
        for k in grads_p:
            if k != "log_std":
                grads_p[k] += grads_p_seg[k]
        # log_std: surrogate term + entropy bonus
        dlogp_dstd = diff**2 * inv_var - 1.0
        grads_p["log_std"] += -np.sum(dlogp[:, None] * dlogp_dstd, axis=0)
        # value loss
        verr = vals - seg.returns
        vloss_total += float(np.sum(verr**2))
        d_vals = (2.0 * value_coeff / n_total) * verr
        grads_v_seg = vnet.backward(vparams, cache_v, d_vals[:, None])
        for k in grads_v:
            grads_v[k] += grads_v_seg[k]
    grads_p["log_std"] += -entropy_coeff  # d(-c2*entropy)/dlog_std = -c2
    policy_loss = -surr_total / n_total
    value_loss = vloss_total / n_total
    loss = policy_loss + value_coeff * value_loss - entropy_coeff * entropy
    diagnostics = {
        "policy_loss": policy_loss,
        "value_loss": value_loss,
        "entropy": entropy,
        "clip_frac": clip_hits / n_total,
        "approx_kl": kl_total / n_total,
    }
    return loss, diagnostics, grads_p, grads_v


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g**2)) for g in grads.values()))
    if total > max_norm and total > 0.0:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


class Adam:
    def __init__(self, params: dict, lr: float, beta1=0.9, beta2=0.999,
                 eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict):
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g**2
            params[k] -= (self.lr * (self.m[k] / bc1)
                          / (np.sqrt(self.v[k] / bc2) + self.eps))


@dataclass
class Checkpoint:
    policy_spec: NetworkSpec
    policy_params: dict
    value_spec: NetworkSpec
    value_params: dict
    train_step: int
    config_hash: str
    config_mismatch: bool = False


def save_checkpoint(path, ckpt: Checkpoint):
    params = {f"policy.{k}": v for k, v in ckpt.policy_params.items()}
    params.update({f"value.{k}": v for k, v in ckpt.value_params.items()})
    save_params(path, ckpt.policy_spec, params, extra={
        "value_spec": ckpt.value_spec.to_dict(),
        "train_step": ckpt.train_step,
        "config_hash": ckpt.config_hash,
    })


def load_checkpoint(path, expected_config: TrainConfig | None = None) -> Checkpoint:
    spec, params, extra = load_params(path)
    pparams = {k[len("policy."):]: v for k, v in params.items()
               if k.startswith("policy.")}
    vparams = {k[len("value."):]: v for k, v in params.items()
               if k.startswith("value.")}
    vspec = NetworkSpec(**extra["value_spec"])
    mismatch = (expected_config is not None
                and extra.get("config_hash") != expected_config.config_hash())
    return Checkpoint(policy_spec=spec, policy_params=pparams,
                      value_spec=vspec, value_params=vparams,
                      train_step=int(extra.get("train_step", 0)),
                      config_hash=extra.get("config_hash", ""),
                      config_mismatch=mismatch)


def evaluate_policy(scenarios, pnet: SequenceNet, pparams: dict,
                    n_episodes: int, action_scale: float = 0.05) -> dict:
    """Deterministic (zero-noise) evaluation; aggregates the metrics row."""
    rewards, lengths, costs, ego_risks, obs_risks = [], [], [], [], []
    for k in range(n_episodes):
        episode = Episode(scenarios[k % len(scenarios)])
        obs = episode.reset()
        carry = pnet.zero_carry()
        wv = WeightVector()
        total = 0.0
        while not episode.done:
            mean_seq, carry, _ = pnet.forward(pparams, obs[None, :], carry)
            wv = apply_action_to_weights(wv, action_scale * mean_seq[0])
            obs, r, _, info = episode.step_with_weights(wv)
            total += r
            costs.append(info["weighted_cost"])
            ego_risks.append(info["risk"].ego_risk)
            obs_risks.append(info["risk"].obstacle_risk)
        rewards.append(total)
        lengths.append(episode.step_count)
    return {
        "mean_reward": float(np.mean(rewards)),
        "mean_ep_len": float(np.mean(lengths)),
        "mean_cost": float(np.mean(costs)) if costs else 0.0,
        "cost_var": float(np.var(costs)) if costs else 0.0,
        "ego_risk": float(np.mean(ego_risks)) if ego_risks else 0.0,
        "obs_risk": float(np.mean(obs_risks)) if obs_risks else 0.0,
    }


def _metrics_line(step: int, ev: dict, diag: dict) -> str:
    vals = (ev["mean_reward"], ev["mean_ep_len"], diag["policy_loss"],
            diag["value_loss"], diag["entropy"], diag["clip_frac"],
            diag["approx_kl"], ev["mean_cost"], ev["cost_var"],
            ev["ego_risk"], ev["obs_risk"])
    return str(step) + "," + ",".join(f"{v:.8g}" for v in vals)


def train(config: TrainConfig, scenarios, out_dir,
          obs_dim: int = 15, act_dim: int = 7):
    """Full training loop; returns (best Checkpoint, metrics path)."""
    if not scenarios:
        raise InvalidInput("need at least one scenario")
    os.makedirs(out_dir, exist_ok=True)
    pspec = NetworkSpec(input_dim=obs_dim, out_dim=act_dim, cell=config.cell)
    vspec = NetworkSpec(input_dim=obs_dim, out_dim=1, cell=config.cell)
    pnet = SequenceNet(pspec, with_log_std=True)
    vnet = SequenceNet(vspec)
    pparams = pnet.init_params(config.seed)
    vparams = vnet.init_params(config.seed + 1)
    rng = np.random.default_rng(config.seed)
    opt_p = Adam(pparams, config.learning_rate, config.adam_beta1,
                 config.adam_beta2, config.adam_eps)
    opt_v = Adam(vparams, config.learning_rate, config.adam_beta1,
                 config.adam_beta2, config.adam_eps)
    chash = config.config_hash()
    metrics_path = os.path.join(out_dir, "metrics.csv")
    metrics = open(metrics_path, "w", encoding="utf-8", newline="\n")
    metrics.write("# config " + json.dumps(config.to_dict(), sort_keys=True)
                  + "\n")
    metrics.write(METRICS_HEADER + "\n")

    def snapshot(step):
        return Checkpoint(pspec, {k: v.copy() for k, v in pparams.items()},
                          vspec, {k: v.copy() for k, v in vparams.items()},
                          step, chash)

    best = snapshot(0)
    best_reward = -math.inf
    stale = 0
    steps_done = 0
    next_eval = 0
    next_ckpt = config.checkpoint_interval
    diag = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0,
            "clip_frac": 0.0, "approx_kl": 0.0}
    if config.total_steps == 0:
        save_checkpoint(os.path.join(out_dir, "ckpt_final.bin"), best)
        metrics.close()
        return best, metrics_path
    stop = False
    while steps_done < config.total_steps and not stop:
        batch = min(config.batch_size, config.total_steps - steps_done)
        buffer = collect_rollout(scenarios, pnet, pparams, vnet, vparams,
                                 batch, rng, n_envs=config.n_envs,
                                 action_scale=config.action_scale)
        steps_done += len(buffer)
        buffer.finalize_advantages(config.gamma, config.gae_lambda)
        adv_mean, adv_std = buffer.normalized_advantages()
        order = np.arange(len(buffer.segments))
        for _ in range(config.epochs):
            rng.shuffle(order)
            n_mb = min(config.minibatches, len(order))
            for mb in range(n_mb):
                segs = [buffer.segments[i] for i in order[mb::n_mb]]
                loss, diag, gp, gv = ppo_loss(
                    segs, pnet, pparams, vnet, vparams, config.clip_eps,
                    config.entropy_coeff, config.value_coeff,
                    adv_mean, adv_std)
                if not math.isfinite(loss):
                    dump = os.path.join(out_dir, "diagnostics.json")
                    with open(dump, "w", encoding="utf-8") as fh:
                        json.dump({"step": steps_done, "diag": diag}, fh)
                    metrics.close()
                    raise FloatingPointError(
                        f"non-finite loss at step {steps_done}; see {dump}")
                clip_grad_norm(gp, config.grad_clip)
                clip_grad_norm(gv, config.grad_clip)
                opt_p.step(pparams, gp)
                opt_v.step(vparams, gv)
        if steps_done >= next_eval:
            next_eval = steps_done + config.eval_interval
            ev = evaluate_policy(scenarios, pnet, pparams,
                                 config.eval_episodes, config.action_scale)
            metrics.write(_metrics_line(steps_done, ev, diag) + "\n")
            improved = (ev["mean_reward"] > best_reward
                        + config.improve_tol * max(1.0, abs(best_reward)))
            if improved:
                best_reward = ev["mean_reward"]
                best = snapshot(steps_done)
                stale = 0
            else:
                stale += 1
                if stale >= config.patience:
                    stop = True
        if steps_done >= next_ckpt:
            save_checkpoint(os.path.join(out_dir, f"ckpt_{steps_done}.bin"),
                            snapshot(steps_done))
            next_ckpt += config.checkpoint_interval
    save_checkpoint(os.path.join(out_dir, "ckpt_final.bin"), best)
    metrics.close()
    return best, metrics_path
