import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from srlab.dataset import DemoDataset, Trajectory
from srlab.envs import MazeEnv, generate_demos
from srlab.errors import TrainingError, ValidationError
from srlab.nnkit import MLPSpec, Tensor, grad_check
from srlab.srreward import (
    LossBreakdown,
    SRHyper,
    SRModel,
    alpha_decay,
    compute_losses,
    encode,
    fit_sr_head_bellman,
    init_sr_model,
    load_sr_model,
    make_negative_sample,
    merged_params,
    new_optimizer,
    one_hot_encoder_model,
    phi_sa,
    pretrain,
    reward,
    save_sr_model,
    sr_vector,
    total_loss_closure,
    trajectory_return,
    train_step,
)


def tiny_model(seed=0, d_s=2, d_a=2, d_phi=8):
    rng = np.random.default_rng(seed)
    return init_sr_model(d_s, d_a, d_phi, rng, encoder_hidden=(8,), sr_hidden=(8,),
                         predictor_hidden=(8,))


def toy_batch(seed=0, n=8, d_s=2, d_a=2):
    rng = np.random.default_rng(seed)
    s = rng.uniform(-1, 1, size=(n, d_s))
    a = rng.uniform(-1, 1, size=(n, d_a))
    s2 = rng.uniform(-1, 1, size=(n, d_s))
    a2 = rng.uniform(-1, 1, size=(n, d_a))
    term = rng.random(n) < 0.2
    a2[term] = 0.0
    return (s, a, s2, a2, term)


def identity_sr_model(d_s, d_a, sr_scale=1.0):
    """Frozen construction: encoder passes nonneg unit-L1 states through, the
    SR head multiplies its input by sr_scale."""
    rng = np.random.default_rng(0)
    model = one_hot_encoder_model(d_s, d_a, rng)
    d = d_s + d_a
    sr = {
        "W0": Tensor(np.eye(d) * sr_scale, requires_grad=True),
        "b0": Tensor(np.zeros(d), requires_grad=True),
    }
    from dataclasses import replace
    from srlab.nnkit import clone_params
    return replace(model, sr_spec=MLPSpec((d, d)), sr_head=sr, target_sr_head=clone_params(sr))


class TestEncode:
    def test_unit_l1_and_nonnegative(self):
        model = tiny_model()
        rng = np.random.default_rng(1)
        phi = encode(model, rng.uniform(-1, 1, size=(64, 2)))
        assert np.all(phi >= 0.0)
        np.testing.assert_allclose(phi.sum(axis=-1), 1.0, atol=1e-6)

    def test_all_zero_preactivation_guarded(self):
        model = tiny_model()
        # zero all encoder params: relu output is all-zero, guard keeps it finite
        for p in model.encoder.values():
            p.data[...] = 0.0
        model.encoder["b1"].data[...] = -1.0
        phi = encode(model, np.array([0.3, -0.4]))
        assert np.all(np.isfinite(phi)) and np.all(phi == 0.0)

    def test_deterministic(self):
        model = tiny_model()
        s = np.array([0.2, 0.9])
        np.testing.assert_array_equal(encode(model, s), encode(model, s))


class TestPhiSa:
    def test_tail_is_action_verbatim(self):
        model = tiny_model()
        a = np.array([0.33, -0.7])
        v = phi_sa(model, np.array([0.1, 0.2]), a)
        assert len(v) == model.d_phi + 2
        np.testing.assert_array_equal(v[-2:], a)

    def test_zero_action_zero_tail(self):
        model = tiny_model()
        v = phi_sa(model, np.array([0.5, 0.5]), np.zeros(2))
        np.testing.assert_array_equal(v[-2:], [0.0, 0.0])


class TestReward:
    def test_matches_recomputation_from_sr_vector(self):
        model = tiny_model(seed=3)
        rng = np.random.default_rng(4)
        s, a = rng.uniform(-1, 1, (16, 2)), rng.uniform(-1, 1, (16, 2))
        r = reward(model, s, a)
        m = sr_vector(model, s, a)
        np.testing.assert_allclose(r, np.linalg.norm(m, axis=-1), atol=1e-12)
        assert np.all(r >= 0.0)

    def test_zero_sr_vector_gives_zero(self):
        model = identity_sr_model(2, 2, sr_scale=0.0)
        assert reward(model, np.array([1.0, 0.0]), np.zeros(2)) == 0.0

    def test_lipschitz_in_action(self):
        model = tiny_model(seed=5)
        rng = np.random.default_rng(6)
        ratios = []
        for _ in range(50):
            s = rng.uniform(-1, 1, 2)
            a = rng.uniform(-1, 1, 2)
            delta = rng.normal(0, 1e-4, 2)
            num = abs(float(reward(model, s, a + delta)) - float(reward(model, s, a)))
            ratios.append(num / np.linalg.norm(delta))
        assert max(ratios) < 1e3


class TestNegativeSampling:
    def test_moments(self):
        rng = np.random.default_rng(0)
        s = np.zeros((100_000, 2))
        a = np.zeros((100_000, 2))
        st_, at_ = make_negative_sample(s, a, beta=0.7, rng=rng)
        assert abs(st_.std() - 0.7) / 0.7 < 0.02
        assert abs(at_.std() - 0.7) / 0.7 < 0.02

    def test_tiny_beta_stays_close(self):
        rng = np.random.default_rng(1)
        s, a = np.ones((4, 2)), np.ones((4, 2))
        st_, at_ = make_negative_sample(s, a, beta=1e-12, rng=rng)
        np.testing.assert_allclose(st_, s, atol=1e-10)
        np.testing.assert_allclose(at_, a, atol=1e-10)

    def test_different_rng_states_differ(self):
        s, a = np.zeros((2, 2)), np.zeros((2, 2))
        s1, _ = make_negative_sample(s, a, 1.0, np.random.default_rng(1))
        s2, _ = make_negative_sample(s, a, 1.0, np.random.default_rng(2))
        assert not np.array_equal(s1, s2)

    def test_beta_validation(self):
        with pytest.raises(ValidationError):
            make_negative_sample(np.zeros(2), np.zeros(2), 0.0, np.random.default_rng(0))


class TestAlphaDecay:
    def test_identical_pair_is_one(self):
        model = tiny_model()
        s, a = np.array([0.1, 0.2]), np.array([0.3, 0.4])
        assert alpha_decay(model, s, a, s, a, sigma=0.5) == pytest.approx(1.0)

    def test_unit_distance_matches_exp_minus_one(self):
        # same state, action offset of norm 1 -> feature distance exactly 1
        model = tiny_model()
        s = np.array([0.1, 0.2])
        a = np.array([0.3, 0.4])
        a_t = a + np.array([1.0, 0.0])
        assert alpha_decay(model, s, a, s, a_t, sigma=1.0) == pytest.approx(math.exp(-1.0), abs=1e-12)

    def test_monotone_in_distance(self):
        model = tiny_model()
        s, a = np.array([0.1, 0.2]), np.array([0.0, 0.0])
        alphas = [alpha_decay(model, s, a, s, a + np.array([d, 0.0]), sigma=0.7)
                  for d in (0.1, 0.5, 1.0, 2.0)]
        assert all(x > y for x, y in zip(alphas, alphas[1:]))


class TestComputeLosses:
    def test_bellman_zero_at_terminal_fixed_point(self):
        # SR head is the identity; on all-terminal rows the target is phi(s,a)
        model = identity_sr_model(3, 2, sr_scale=1.0)
        rng = np.random.default_rng(0)
        raw = np.abs(rng.uniform(size=(6, 3))) + 0.1
        s = raw / raw.sum(axis=1, keepdims=True)  # already unit-L1, nonneg
        a = rng.uniform(-1, 1, (6, 2))
        batch = (s, a, s, np.zeros((6, 2)), np.ones(6, dtype=bool))
        hyper = SRHyper(gamma=0.9, beta=1.0, sigma=1.0, ns_enabled=False)
        breakdown, _ = compute_losses(model, batch, hyper, None)
        assert breakdown.bellman == pytest.approx(0.0, abs=1e-20)

    def test_magnitude_formula(self):
        for scale, expected in ((0.8, 0.0), (1.5, 0.25)):
            model = identity_sr_model(2, 2, sr_scale=scale)
            s = np.array([[1.0, 0.0]])
            a = np.zeros((1, 2))
            batch = (s, a, s, a, np.ones(1, dtype=bool))
            hyper = SRHyper(gamma=0.9, ns_enabled=False)
            breakdown, _ = compute_losses(model, batch, hyper, None)
            # reward = scale * ||[1,0,0,0]|| = scale
            assert breakdown.magnitude == pytest.approx(expected, abs=1e-12)

    def test_all_terms_match_independent_recomputation(self):
        model = tiny_model(seed=11)
        hyper = SRHyper(gamma=0.93, beta=0.5, sigma=0.8)
        batch = toy_batch(seed=12)
        rng = np.random.default_rng(13)
        breakdown, cache = compute_losses(model, batch, hyper, rng)

        # recompute everything with plain numpy
        from srlab.nnkit import mlp_forward_array
        from srlab.srreward import encode_array
        s, a, s2, a2, term = batch
        rng2 = np.random.default_rng(13)
        phi_s = encode_array(model, s)
        phi_s2 = encode_array(model, s2)
        phisa = np.concatenate([phi_s, a], axis=1)
        m = mlp_forward_array(model.sr_spec, model.sr_head, phisa)
        m_tgt = mlp_forward_array(model.sr_spec, model.target_sr_head,
                                  np.concatenate([phi_s2, a2], axis=1))
        target = phisa + hyper.gamma * (1.0 - term)[:, None] * m_tgt
        bell = np.mean(((m - target) ** 2).sum(axis=1))
        pred = mlp_forward_array(model.predictor_spec, model.predictor, phisa)
        pred_loss = np.mean(((phi_s2 - pred) ** 2).sum(axis=1))
        r = np.linalg.norm(m, axis=1)
        mag = np.mean(np.maximum(r - 1.0, 0.0) ** 2)
        eps_s = rng2.normal(0, hyper.beta, s.shape)
        eps_a = rng2.normal(0, hyper.beta, a.shape)
        st_, at_ = s + eps_s, a + eps_a
        phisat = np.concatenate([encode_array(model, st_), at_], axis=1)
        m_t = mlp_forward_array(model.sr_spec, model.sr_head, phisat)
        r_t = np.linalg.norm(m_t, axis=1)
        d = np.linalg.norm(phisa - phisat, axis=1)
        alpha = np.exp(-d / hyper.sigma ** 2)
        neg = np.mean((r_t - alpha * r) ** 2)

        assert breakdown.bellman == pytest.approx(bell, abs=1e-10)
        assert breakdown.prediction == pytest.approx(pred_loss, abs=1e-10)
        assert breakdown.magnitude == pytest.approx(mag, abs=1e-10)
        assert breakdown.neg_sample == pytest.approx(neg, abs=1e-10)
        assert breakdown.total == pytest.approx(bell + pred_loss + mag + neg, abs=1e-10)
        np.testing.assert_allclose(cache.s, st_, atol=1e-12)
        np.testing.assert_allclose(cache.rewards, r_t, atol=1e-12)

    def test_breakdown_components_nonnegative(self):
        model = tiny_model(seed=2)
        breakdown, _ = compute_losses(model, toy_batch(seed=3), SRHyper(beta=0.3, sigma=0.5),
                                      np.random.default_rng(0))
        for v in (breakdown.bellman, breakdown.prediction, breakdown.magnitude,
                  breakdown.neg_sample):
            assert v >= 0.0


class TestTrainStep:
    def test_bit_identical_under_same_seed(self):
        hyper = SRHyper(gamma=0.9, beta=0.4, sigma=0.6, lr_sr=1e-3)
        results = []
        for _ in range(2):
            model = tiny_model(seed=21)
            opt = new_optimizer(model, hyper)
            rng = np.random.default_rng(42)
            traces = []
            for _ in range(5):
                model, opt, breakdown, _ = train_step(model, opt, toy_batch(seed=2), hyper, rng)
                traces.append(breakdown.total)
            results.append(traces)
        assert results[0] == results[1]

    def test_loss_decreases_on_toy_data(self):
        rng = np.random.default_rng(5)
        states = rng.uniform(0, 1, size=(11, 2))
        actions = rng.uniform(-0.5, 0.5, size=(10, 2))
        ds = DemoDataset([Trajectory(states, actions)])
        hyper = SRHyper(gamma=0.9, beta=0.3, sigma=0.6, lr_sr=3e-3, batch_size=10,
                        pretrain_steps=0)
        model = tiny_model(seed=6)
        opt = new_optimizer(model, hyper)
        first = None
        for step in range(500):
            idx = np.random.default_rng(1000 + step).integers(0, len(ds), 10)
            model, opt, breakdown, _ = train_step(model, opt, ds.batch_arrays(idx), hyper, rng)
            if first is None:
                first = breakdown.total
        assert breakdown.total < first

    def test_gradient_passes_finite_difference_check(self):
        model = tiny_model(seed=31)
        hyper = SRHyper(gamma=0.9, beta=0.4, sigma=0.7)
        closure, params = total_loss_closure(model, toy_batch(seed=32), hyper,
                                             np.random.default_rng(33))
        assert grad_check(closure, params, eps=1e-5) < 1e-4

    def test_target_head_receives_no_gradient(self):
        # include the target parameters in the checked ParamSet: grads stay zero
        from srlab.srreward import _loss_graph, _prepare_step
        from srlab.nnkit import eval_with_grads
        model = tiny_model(seed=41)
        hyper = SRHyper(gamma=0.9, beta=0.4, sigma=0.7)
        data = _prepare_step(model, toy_batch(seed=42), hyper, np.random.default_rng(43))
        params = merged_params(model)
        for name, p in model.target_sr_head.items():
            p.requires_grad = True
            params[f"tgt.{name}"] = p
        _, grads = eval_with_grads(lambda p: _loss_graph(model, p, data), params)
        for name in model.target_sr_head:
            np.testing.assert_array_equal(grads[f"tgt.{name}"], 0.0)

    def test_non_finite_loss_raises_training_error(self):
        model = tiny_model(seed=51)
        for p in model.sr_head.values():
            p.data[...] = 1e200
        hyper = SRHyper(gamma=0.9, ns_enabled=False)
        batch = toy_batch(seed=52)
        opt = new_optimizer(model, hyper)
        with pytest.raises(TrainingError):
            with np.errstate(over="ignore", invalid="ignore"):
                train_step(model, opt, batch, hyper, np.random.default_rng(0))


class TestGeometricFixedPoint:
    def test_degenerate_mdp_sr_norm_approaches_two(self):
        # 1-state/1-action self-loop with gamma=0.5 and frozen unit feature:
        # fixed point M = phi/(1-gamma), norm 2
        rng = np.random.default_rng(0)
        model = one_hot_encoder_model(1, 1, rng, sr_hidden=(8,))
        hyper = SRHyper(gamma=0.5, lr_sr=3e-3, target_update=0.05, ns_enabled=False)
        s = np.ones((16, 1))
        a = np.zeros((16, 1))
        batch = (s, a, s, a, np.zeros(16, dtype=bool))
        model = fit_sr_head_bellman(model, (batch for _ in range(4000)), hyper)
        m = sr_vector(model, np.ones(1), np.zeros(1))
        np.testing.assert_allclose(m, [2.0, 0.0], atol=1e-3)
        assert float(reward(model, np.ones(1), np.zeros(1))) == pytest.approx(2.0, abs=1e-3)


class TestPretrainAndCheckpoint:
    def test_zero_steps_leaves_model_unchanged(self):
        model = tiny_model(seed=61)
        ds = DemoDataset([Trajectory(np.zeros((3, 2)), np.zeros((2, 2)))])
        hyper = SRHyper(pretrain_steps=0)
        out, _ = pretrain(model, ds, hyper, np.random.default_rng(0))
        for k in model.sr_head:
            np.testing.assert_array_equal(out.sr_head[k].data, model.sr_head[k].data)

    def test_loss_trend_decreases_on_maze_demos(self):
        env = MazeEnv()
        ds, _ = generate_demos(env, 3, np.random.default_rng(1))
        hyper = SRHyper(gamma=0.95, beta=0.2, sigma=1.0, lr_sr=1e-3, batch_size=32,
                        pretrain_steps=400)
        model = init_sr_model(2, 2, 16, np.random.default_rng(2), encoder_hidden=(16,),
                              sr_hidden=(16,), predictor_hidden=(16,))
        trace = []
        pretrain(model, ds, hyper, np.random.default_rng(3),
                 on_step=lambda step, b: trace.append(b.total))
        first = np.mean(trace[:100])
        last = np.mean(trace[-100:])
        assert last < first

    def test_checkpoint_round_trip_preserves_rewards(self, tmp_path):
        model = tiny_model(seed=71)
        hyper = SRHyper(gamma=0.9, beta=0.2, sigma=0.4)
        path = tmp_path / "sr.json"
        save_sr_model(model, hyper, path)
        back, hyper2 = load_sr_model(path)
        assert hyper2 == hyper
        rng = np.random.default_rng(0)
        s, a = rng.uniform(-1, 1, (10, 2)), rng.uniform(-1, 1, (10, 2))
        np.testing.assert_array_equal(reward(model, s, a), reward(back, s, a))


class TestTrajectoryReturn:
    def test_single_step_trajectory(self):
        model = tiny_model(seed=81)
        traj = Trajectory(np.array([[0.1, 0.2], [0.3, 0.4]]), np.array([[0.5, 0.5]]))
        expected = float(reward(model, traj.states[0], traj.actions[0]))
        assert trajectory_return(model, traj) == pytest.approx(expected, abs=1e-12)

    def test_equals_sum_of_per_step_rewards(self):
        model = tiny_model(seed=82)
        rng = np.random.default_rng(83)
        traj = Trajectory(rng.uniform(0, 1, (6, 2)), rng.uniform(-1, 1, (5, 2)))
        total = sum(float(reward(model, traj.states[i], traj.actions[i])) for i in range(5))
        assert trajectory_return(model, traj) == pytest.approx(total, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_property_encoder_contract(seed):
    model = tiny_model(seed=1)
    rng = np.random.default_rng(seed)
    phi = encode(model, rng.uniform(-5, 5, size=(8, 2)))
    assert np.all(phi >= 0.0)
    np.testing.assert_allclose(phi.sum(axis=-1), 1.0, atol=1e-6)
