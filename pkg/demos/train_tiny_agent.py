"""Train a tiny weight-adaptation agent and inspect the learning curve.

Uses a deliberately small step budget so the script finishes in about a
minute; artifacts (metrics CSV + checkpoints) land in demos/_out.

Run from the repository root:  python3 demos/train_tiny_agent.py
"""

import os

import mhhtof
from mhhtof.neural import SequenceNet
from mhhtof.ppo import (TrainConfig, evaluate_policy, load_checkpoint, train)
from mhhtof.simenv import load_scenario

here = os.path.dirname(os.path.abspath(__file__))
out_dir = os.path.join(here, "_out")
scenario_dir = os.path.join(os.path.dirname(mhhtof.__file__), "scenarios")

scn = load_scenario(os.path.join(scenario_dir, "corridor_3obs.json"))
config = TrainConfig(total_steps=2400, batch_size=480, eval_interval=480,
                     eval_episodes=2, n_envs=2, minibatches=2,
                     learning_rate=1e-3, seed=0)

print(f"training {config.cell} policy for {config.total_steps} steps ...")
best, metrics_path = train(config, [scn], out_dir)

print("\nmetrics tail:")
with open(metrics_path) as fh:
    lines = fh.read().splitlines()
for line in lines[1:2] + lines[-3:]:
    print("  " + line)

# held-out check with the persisted best checkpoint
ckpt = load_checkpoint(os.path.join(out_dir, "ckpt_final.bin"))
pnet = SequenceNet(ckpt.policy_spec, with_log_std=True)
heldout = load_scenario(os.path.join(scenario_dir, "corridor_heldout.json"))
ev = evaluate_policy([heldout], pnet, ckpt.policy_params, n_episodes=1)
print(f"\nheld-out: reward {ev['mean_reward']:.1f}, "
      f"episode length {ev['mean_ep_len']:.0f}, "
      f"mean cost {ev['mean_cost']:.3f}, obstacle risk {ev['obs_risk']:.3f}")
