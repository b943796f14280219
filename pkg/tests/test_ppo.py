import json
import math

import numpy as np
import pytest

from mhhtof.errors import InvalidInput, ShapeError
from mhhtof.evaluation import WeightVector
from mhhtof.neural import NetworkSpec, SequenceNet
from mhhtof.ppo import (
    Adam,
    TrainConfig,
    apply_action_to_weights,
    clip_grad_norm,
    collect_rollout,
    compute_gae,
    gaussian_entropy,
    gaussian_log_prob,
    load_checkpoint,
    ppo_loss,
    save_checkpoint,
    Checkpoint,
    train,
)
from mhhtof.simenv import scenario_from_dict

from test_simenv import corridor_dict


def tiny_scenario():
    data = corridor_dict()
    data["goal"]["center"] = [6.0, 0.0]
    data["goal"]["deadline"] = 40
    return scenario_from_dict(data)


def tiny_nets(cell="lstm"):
    pspec = NetworkSpec(input_dim=15, trunk_width=8, pre_recurrent=12,
                        hidden=4, out_dim=7, cell=cell)
    vspec = NetworkSpec(input_dim=15, trunk_width=8, pre_recurrent=12,
                        hidden=4, out_dim=1, cell=cell)
    pnet = SequenceNet(pspec, with_log_std=True)
    vnet = SequenceNet(vspec)
    return pnet, pnet.init_params(0), vnet, vnet.init_params(1)


class TestApplyAction:
    def test_clip_forced(self):
        wv = WeightVector(np.full(7, 0.5), np.zeros(7), np.ones(7))
        out = apply_action_to_weights(wv, np.full(7, 10.0))
        np.testing.assert_array_equal(out.lam, 1.0)

    def test_zero_delta_identity(self):
        wv = WeightVector(np.full(7, 0.3))
        out = apply_action_to_weights(wv, np.zeros(7))
        np.testing.assert_array_equal(out.lam, wv.lam)

    def test_interior_addition(self):
        wv = WeightVector(np.full(7, 0.3), np.zeros(7), np.ones(7))
        out = apply_action_to_weights(wv, np.full(7, 0.2))
        np.testing.assert_allclose(out.lam, 0.5)

    def test_bounds_invariant_under_random_walk(self):
        rng = np.random.default_rng(3)
        wv = WeightVector(np.full(7, 0.5), np.zeros(7), np.ones(7))
        for _ in range(200):
            wv = apply_action_to_weights(wv, rng.normal(scale=0.7, size=7))
            assert np.all(wv.lam >= 0.0) and np.all(wv.lam <= 1.0)

    def test_bad_shape(self):
        with pytest.raises(ShapeError):
            apply_action_to_weights(WeightVector(), np.zeros(3))


class TestComputeGae:
    def test_single_step_td(self):
        adv, ret = compute_gae([1.0], [0.5], [0.0], bootstrap=0.3,
                               gamma=0.9, lam=0.8)
        assert adv[0] == pytest.approx(1.0 + 0.9 * 0.3 - 0.5)
        assert ret[0] == pytest.approx(adv[0] + 0.5)

    def test_lambda_zero_is_td_errors(self):
        rng = np.random.default_rng(1)
        r = rng.normal(size=6)
        v = rng.normal(size=6)
        d = np.array([0, 0, 1, 0, 0, 0], dtype=float)
        adv, _ = compute_gae(r, v, d, bootstrap=0.4, gamma=0.95, lam=0.0)
        next_v = np.append(v[1:], 0.4)
        td = r + 0.95 * next_v * (1 - d) - v
        np.testing.assert_allclose(adv, td, atol=1e-12)

    def test_worked_three_step_case(self):
        # independent brute-force telescoping of the exponential sum
        r = [1.0, 0.0, 2.0]
        v = [0.5, 0.1, -0.2]
        g, l, boot = 0.9, 0.8, 0.3
        next_v = [0.1, -0.2, boot]
        delta = [r[t] + g * next_v[t] - v[t] for t in range(3)]
        want = [sum((g * l) ** k * delta[t + k] for k in range(3 - t))
                for t in range(3)]
        adv, _ = compute_gae(r, v, [0.0, 0.0, 0.0], boot, g, l)
        np.testing.assert_allclose(adv, want, atol=1e-12)

    def test_lambda_one_monte_carlo(self):
        # terminated sequences: GAE(1) = discounted return - value
        rng = np.random.default_rng(2)
        for n in range(1, 17):
            r = rng.normal(size=n)
            v = rng.normal(size=n)
            d = np.zeros(n)
            d[-1] = 1.0
            g = rng.uniform(0.5, 1.0)
            adv, _ = compute_gae(r, v, d, bootstrap=rng.normal(), gamma=g,
                                 lam=1.0)
            for t in range(n):
                mc = sum(g ** (k - t) * r[k] for k in range(t, n))
                assert adv[t] == pytest.approx(mc - v[t], abs=1e-10)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            compute_gae([1.0, 2.0], [0.0], [0.0], 0.0, 0.9, 0.9)


class TestGaussianOps:
    def test_log_prob_closed_form(self):
        rng = np.random.default_rng(5)
        a = rng.normal(size=7)
        m = rng.normal(size=7)
        ls = rng.uniform(-1, 0.2, size=7)
        want = sum(
            -0.5 * ((a[i] - m[i]) ** 2 / math.exp(2 * ls[i])
                    + 2 * ls[i] + math.log(2 * math.pi))
            for i in range(7))
        assert gaussian_log_prob(a, m, ls) == pytest.approx(want, abs=1e-12)

    def test_entropy_closed_form(self):
        ls = np.array([-0.5, 0.0, 0.3])
        want = sum(v + 0.5 * math.log(2 * math.pi * math.e) for v in ls)
        assert gaussian_entropy(ls) == pytest.approx(want, abs=1e-12)


class TestRollout:
    def test_exact_batch_length(self):
        pnet, pp, vnet, vp = tiny_nets()
        buf = collect_rollout([tiny_scenario()], pnet, pp, vnet, vp,
                              batch_size=25, rng=np.random.default_rng(0),
                              n_envs=2)
        assert len(buf) == 25

    def test_deterministic_mode_reproducible(self):
        pnet, pp, vnet, vp = tiny_nets()
        bufs = []
        for _ in range(2):
            bufs.append(collect_rollout(
                [tiny_scenario()], pnet, pp, vnet, vp, batch_size=12,
                rng=np.random.default_rng(7), n_envs=1, deterministic=True))
        for a, b in zip(bufs[0].segments, bufs[1].segments):
            np.testing.assert_array_equal(a.obs, b.obs)
            np.testing.assert_array_equal(a.actions, b.actions)
            np.testing.assert_array_equal(a.log_probs, b.log_probs)

    def test_stored_log_probs_replay_exact(self):
        pnet, pp, vnet, vp = tiny_nets()
        buf = collect_rollout([tiny_scenario()], pnet, pp, vnet, vp,
                              batch_size=15, rng=np.random.default_rng(3),
                              n_envs=1)
        from mhhtof.ppo import gaussian_log_prob
        for carry, obs, action, logp in buf.step_carries:
            means, _, _ = pnet.forward(pp, obs[None, :], carry)
            again = float(gaussian_log_prob(action, means[0], pp["log_std"]))
            assert abs(again - logp) < 1e-12

    def test_segments_replay_to_stored_log_probs(self):
        pnet, pp, vnet, vp = tiny_nets()
        buf = collect_rollout([tiny_scenario()], pnet, pp, vnet, vp,
                              batch_size=20, rng=np.random.default_rng(9),
                              n_envs=2)
        for seg in buf.segments:
            means, _, _ = pnet.forward(pp, seg.obs, seg.carry_policy)
            logp = gaussian_log_prob(seg.actions, means, pp["log_std"])
            np.testing.assert_allclose(logp, seg.log_probs, atol=1e-12)


class TestPpoLoss:
    def make_batch(self, seed=0, batch=18):
        pnet, pp, vnet, vp = tiny_nets()
        buf = collect_rollout([tiny_scenario()], pnet, pp, vnet, vp,
                              batch_size=batch, rng=np.random.default_rng(seed),
                              n_envs=2)
        buf.finalize_advantages(0.97, 0.97)
        mean, std = buf.normalized_advantages()
        return pnet, pp, vnet, vp, buf, mean, std

    def test_identical_params_unit_ratio(self):
        pnet, pp, vnet, vp, buf, mean, std = self.make_batch()
        loss, diag, _, _ = ppo_loss(buf.segments, pnet, pp, vnet, vp,
                                    clip_eps=0.1, entropy_coeff=0.01,
                                    value_coeff=0.5, adv_mean=mean,
                                    adv_std=std)
        assert diag["clip_frac"] == 0.0
        assert abs(diag["approx_kl"]) < 1e-12
        all_adv = np.concatenate([s.advantages for s in buf.segments])
        norm = (all_adv - mean) / std
        assert diag["policy_loss"] == pytest.approx(-float(np.mean(norm)),
                                                    abs=1e-10)

    def test_loss_matches_per_sample_oracle(self):
        pnet, pp, vnet, vp, buf, mean, std = self.make_batch(seed=4)
        eps, c2, vc = 0.1, 0.01, 0.5
        loss, diag, _, _ = ppo_loss(buf.segments, pnet, pp, vnet, vp, eps, c2,
                                    vc, mean, std)
        # independent accumulation
        surr_terms, v_terms = [], []
        for seg in buf.segments:
            means, _, _ = pnet.forward(pp, seg.obs, seg.carry_policy)
            vals, _ = (vnet.forward(vp, seg.obs, seg.carry_value)[0][:, 0],
                       None)
            logp = gaussian_log_prob(seg.actions, means, pp["log_std"])
            for t in range(len(seg)):
                rho = math.exp(logp[t] - seg.log_probs[t])
                a_hat = (seg.advantages[t] - mean) / std
                surr_terms.append(min(rho * a_hat,
                                      min(max(rho, 1 - eps), 1 + eps) * a_hat))
                v_terms.append((vals[t] - seg.returns[t]) ** 2)
        want = (-np.mean(surr_terms) + vc * np.mean(v_terms)
                - c2 * gaussian_entropy(pp["log_std"]))
        assert loss == pytest.approx(want, abs=1e-10)

    def test_normalization_statistics(self):
        _, _, _, _, buf, mean, std = self.make_batch(seed=5)
        all_adv = np.concatenate([s.advantages for s in buf.segments])
        norm = (all_adv - mean) / std
        assert abs(float(np.mean(norm))) < 1e-10
        assert abs(float(np.std(norm)) - 1.0) < 1e-8

    def test_policy_gradient_matches_finite_differences(self):
        pnet, pp, vnet, vp, buf, mean, std = self.make_batch(seed=6, batch=10)
        args = (buf.segments, pnet, pp, vnet, vp, 0.1, 0.01, 0.5, mean, std)
        _, _, gp, gv = ppo_loss(*args)
        h = 1e-6
        rng = np.random.default_rng(0)
        worst = 0.0
        for params, grads in ((pp, gp), (vp, gv)):
            for name, arr in params.items():
                flat = arr.reshape(-1)
                picks = rng.choice(len(flat), size=min(4, len(flat)),
                                   replace=False)
                for j in picks:
                    orig = flat[j]
                    flat[j] = orig + h
                    lp = ppo_loss(*args)[0]
                    flat[j] = orig - h
                    lm = ppo_loss(*args)[0]
                    flat[j] = orig
                    fd = (lp - lm) / (2 * h)
                    worst = max(worst, abs(fd - grads[name].reshape(-1)[j])
                                / max(1.0, abs(fd)))
        assert worst < 1e-3


class TestOptimizerUtils:
    def test_clip_grad_norm(self):
        g = {"a": np.array([3.0, 4.0])}
        total = clip_grad_norm(g, 1.0)
        assert total == pytest.approx(5.0)
        assert np.linalg.norm(g["a"]) == pytest.approx(1.0)

    def test_clip_noop_below_threshold(self):
        g = {"a": np.array([0.3, 0.4])}
        clip_grad_norm(g, 1.0)
        np.testing.assert_allclose(g["a"], [0.3, 0.4])

    def test_adam_first_step_is_lr_sized(self):
        params = {"w": np.array([1.0])}
        opt = Adam(params, lr=0.1)
        opt.step(params, {"w": np.array([2.0])})
        assert params["w"][0] == pytest.approx(1.0 - 0.1, abs=1e-6)


class TestTrainConfig:
    def test_table_defaults(self):
        cfg = TrainConfig()
        assert cfg.learning_rate == 3e-4
        assert cfg.clip_eps == 0.1
        assert cfg.gae_lambda == 0.97
        assert cfg.batch_size == 2352
        assert cfg.epochs == 5
        assert cfg.entropy_coeff == 0.01
        assert cfg.gamma == 0.97
        assert cfg.checkpoint_interval == 40000

    def test_alternative_discount_accepted(self):
        assert TrainConfig(gamma=0.80).gamma == 0.80

    def test_invalid_gamma(self):
        with pytest.raises(InvalidInput):
            TrainConfig(gamma=0.0)

    def test_hash_stability(self):
        assert TrainConfig().config_hash() == TrainConfig().config_hash()
        assert TrainConfig().config_hash() != TrainConfig(seed=1).config_hash()


class TestCheckpointRoundTrip:
    def test_round_trip_forward_identical(self, tmp_path):
        pnet, pp, vnet, vp = tiny_nets()
        ck = Checkpoint(pnet.spec, pp, vnet.spec, vp, train_step=123,
                        config_hash="abc")
        path = tmp_path / "ck.bin"
        save_checkpoint(path, ck)
        loaded = load_checkpoint(path)
        assert loaded.train_step == 123
        obs = np.random.default_rng(0).normal(size=(3, 15))
        a = pnet.forward(pp, obs)[0]
        b = pnet.forward(loaded.policy_params, obs)[0]
        np.testing.assert_array_equal(a, b)

    def test_config_hash_mismatch_flag(self, tmp_path):
        pnet, pp, vnet, vp = tiny_nets()
        cfg = TrainConfig(seed=0)
        ck = Checkpoint(pnet.spec, pp, vnet.spec, vp, 0, cfg.config_hash())
        path = tmp_path / "ck.bin"
        save_checkpoint(path, ck)
        ok = load_checkpoint(path, expected_config=cfg)
        assert not ok.config_mismatch
        bad = load_checkpoint(path, expected_config=TrainConfig(seed=9))
        assert bad.config_mismatch


class TestTrainLoop:
    def small_config(self, **kw):
        base = dict(total_steps=120, batch_size=40, eval_interval=40,
                    eval_episodes=1, n_envs=2, epochs=2, minibatches=2,
                    checkpoint_interval=40000, seed=0)
        base.update(kw)
        return TrainConfig(**base)

    def test_zero_steps_immediate_checkpoint(self, tmp_path):
        cfg = self.small_config(total_steps=0)
        ck, metrics = train(cfg, [tiny_scenario()], tmp_path)
        assert (tmp_path / "ckpt_final.bin").exists()
        lines = (tmp_path / "metrics.csv").read_text().splitlines()
        assert lines[0].startswith("# config ")
        assert lines[1].startswith("step,mean_reward")
        assert len(lines) == 2

    def test_metrics_deterministic(self, tmp_path):
        cfg = self.small_config()
        scn = tiny_scenario()
        a = train(cfg, [scn], tmp_path / "a")[1]
        b = train(cfg, [scn], tmp_path / "b")[1]
        assert open(a, "rb").read() == open(b, "rb").read()

    def test_config_line_carries_overrides(self, tmp_path):
        cfg = self.small_config(total_steps=0, gamma=0.8)
        _, metrics = train(cfg, [tiny_scenario()], tmp_path)
        header = open(metrics).readline()
        assert json.loads(header[len("# config "):])["gamma"] == 0.8

    def test_training_runs_and_logs(self, tmp_path):
        cfg = self.small_config()
        ck, metrics = train(cfg, [tiny_scenario()], tmp_path)
        lines = open(metrics).read().splitlines()
        assert len(lines) >= 3  # config + header + >=1 eval row
        row = lines[2].split(",")
        assert len(row) == 12
        assert ck.train_step >= 0
