import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from builders import grid_trajectory
from moc2her import agent as oc
from moc2her.diffnet import finite_diff_check, gaussian_log_prob_grad
from moc2her.envs import PointPushEnv, PointReachEnv
from moc2her.errors import ContractViolation


def make_params(n_options=2, input_dim=6, action_dim=2, seed=0, hidden=8):
    return oc.init_params(input_dim, action_dim, n_options, np.random.default_rng(seed), hidden)


def const_head(params, head, bias):
    """Make ``head`` output ``bias`` for every input."""
    p = {k: v.copy() for k, v in getattr(params, head).items()}
    p["W1"][:] = 0.0
    p["b1"][:] = bias
    return replace(params, **{head: p})


def batch_from(rng, params, size):
    n, A, d = params.n_options, params.action_dim, params.input_dim
    return oc.Batch(
        x=rng.normal(size=(size, d)), x_next=rng.normal(size=(size, d)),
        option=rng.integers(0, n, size), prev_option=rng.integers(0, n, size),
        next_option=rng.integers(0, n, size), action=rng.uniform(-1, 1, (size, A)),
        behavior_logp=rng.normal(size=size) - 1.0, reward=-rng.integers(0, 2, size).astype(float))


def single(x, x_next, option=0, prev=0, nxt=0, action=(0.1, -0.1), logp=-1.0, reward=0.0):
    return oc.Batch(x=np.array([x], float), x_next=np.array([x_next], float),
                    option=np.array([option]), prev_option=np.array([prev]),
                    next_option=np.array([nxt]), action=np.array([action], float),
                    behavior_logp=np.array([logp]), reward=np.array([reward]))


# ---------------------------------------------------------------- acting

class TestSelectOption:
    def test_uniform_chi_square(self):
        params = const_head(make_params(4), "z", 0.0)
        rng = np.random.default_rng(0)
        counts = np.bincount([oc.select_option(params, np.zeros(6), rng) for _ in range(10000)],
                             minlength=4)
        chi2 = ((counts - 2500.0) ** 2 / 2500.0).sum()
        assert chi2 < 16.27  # 3 dof, p = 0.001

    def test_degenerate_logit(self):
        params = const_head(make_params(3), "z", [0.0, 1000.0, 0.0])
        rng = np.random.default_rng(0)
        assert {oc.select_option(params, np.zeros(6), rng) for _ in range(200)} == {1}

    def test_replay(self):
        params = make_params(4)
        a = [oc.select_option(params, np.ones(6), np.random.default_rng(5)) for _ in range(3)]
        b = [oc.select_option(params, np.ones(6), np.random.default_rng(5)) for _ in range(3)]
        assert a == b


class TestSelectAction:
    def test_vanishing_noise(self):
        params = make_params()
        params.zeta["log_std"][:] = -20.0
        x = np.full(6, 0.3)
        action, _ = oc.select_action(params, x, 1, np.random.default_rng(0))
        np.testing.assert_allclose(action, oc.policy_means(params, x)[1], atol=1e-7)

    def test_clamped_to_box(self):
        params = make_params()
        params.zeta["log_std"][:] = 3.0
        rng = np.random.default_rng(0)
        acts = np.array([oc.select_action(params, np.zeros(6), 0, rng)[0] for _ in range(200)])
        assert np.all(np.abs(acts) <= 1.0) and np.any(np.abs(acts) == 1.0)

    def test_logp_is_pre_clamp_density(self):
        params = make_params()
        params.zeta["log_std"][:] = 1.0
        x = np.full(6, -0.2)
        sample, logp = oc.sample_action(params, x, 1, np.random.default_rng(3))
        ref, _, _ = gaussian_log_prob_grad(oc.policy_means(params, x)[1],
                                           params.zeta["log_std"][1], sample)
        assert logp == ref
        action, logp2 = oc.select_action(params, x, 1, np.random.default_rng(3))
        np.testing.assert_array_equal(action, np.clip(sample, -1, 1))
        assert logp2 == logp

    def test_bad_option(self):
        with pytest.raises(ContractViolation):
            oc.select_action(make_params(), np.zeros(6), 2, np.random.default_rng(0))


class TestOccupancy:
    def test_no_termination(self):
        params = const_head(make_params(3), "nu", -1000.0)
        x = np.zeros(6)
        assert oc.option_transition_prob(params, 1, x, 1) == 1.0
        assert oc.option_transition_prob(params, 0, x, 1) == 0.0

    def test_forced_termination(self):
        params = const_head(const_head(make_params(2), "nu", 1000.0), "z", [0.0, math.log(3)])
        assert oc.option_transition_prob(params, 1, np.zeros(6), 0) == pytest.approx(0.75)

    def test_hand_example(self):
        params = const_head(const_head(make_params(2), "nu", 0.0), "z", [0.0, math.log(3)])
        x = np.zeros(6)
        assert oc.option_transition_prob(params, 0, x, 0) == pytest.approx(0.625, abs=1e-15)
        assert oc.option_transition_prob(params, 1, x, 0) == pytest.approx(0.375, abs=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(st.sampled_from([1, 2, 4, 8]), st.integers(0, 10 ** 6))
    def test_sums_to_one(self, n, seed):
        rng = np.random.default_rng(seed)
        params = make_params(n, seed=seed)
        x = rng.normal(scale=3, size=6)
        for o_bar in range(n):
            total = sum(oc.option_transition_prob(params, o, x, o_bar) for o in range(n))
            assert abs(total - 1.0) <= 1e-9

    def test_batch_weights_match_scalar(self):
        params = make_params(3)
        b = batch_from(np.random.default_rng(1), params, 5)
        w = oc.occupancy_weights(params, b)
        for i in range(5):
            for o in range(3):
                assert w[i, o] == pytest.approx(
                    oc.option_transition_prob(params, o, b.x[i], b.prev_option[i]), abs=1e-15)


# ---------------------------------------------------------------- targets

def transition(params, rng, reward=-1.0, option=0, on_policy=False):
    x, xn = rng.normal(size=6), rng.normal(size=6)
    a = rng.uniform(-1, 1, 2)
    logp = -1.3
    if on_policy:
        logp = float(gaussian_log_prob_grad(oc.policy_means(params, x)[option],
                                            params.zeta["log_std"][option], a)[0])
    return oc.Transition(x, option, a, logp, reward, xn, option, option, x[:4], xn[:4],
                         x[:2], xn[:2], xn[:2])


class TestTdTarget:
    def test_gamma_zero(self):
        params = make_params()
        tr = transition(params, np.random.default_rng(0), reward=-1.0)
        assert oc.td_target(params, tr, 1, 0.0, 2.0)[0] == -1.0

    def test_full_termination(self):
        params = const_head(make_params(3), "nu", 1000.0)
        tr = transition(params, np.random.default_rng(0))
        q = oc.q_values(params, tr.state_next)
        v = (oc.option_probs(params, tr.state_next) * q).sum()
        for o in range(3):
            assert oc.td_target(params, tr, o, 0.9, 2.0)[0] == pytest.approx(-1 + 0.9 * v, abs=1e-12)

    def test_no_termination_uses_own_value(self):
        params = const_head(make_params(3), "nu", -1000.0)
        tr = transition(params, np.random.default_rng(0))
        q = oc.q_values(params, tr.state_next)
        assert oc.td_target(params, tr, 2, 0.5, 2.0)[0] == pytest.approx(-1 + 0.5 * q[2])

    def test_on_policy_ratio(self):
        params = make_params()
        tr = transition(params, np.random.default_rng(2), option=1, on_policy=True)
        assert oc.td_target(params, tr, 1, 0.98, 2.0)[1] == pytest.approx(1.0, abs=1e-12)

    def test_ratio_clipped(self):
        params = make_params()
        tr = transition(params, np.random.default_rng(2))
        tr.behavior_logp = -1e3
        assert oc.td_target(params, tr, 0, 0.98, 2.0)[1] == 2.0

    def test_gamma_range(self):
        params = make_params()
        tr = transition(params, np.random.default_rng(2))
        with pytest.raises(ContractViolation):
            oc.td_target(params, tr, 0, 1.0, 2.0)


# ---------------------------------------------------------------- gradients

LOSSES = {
    "evaluation": (oc.evaluation_constants, oc.evaluation_loss, "theta"),
    "improvement": (oc.improvement_constants, oc.improvement_loss, "zeta"),
    "termination": (oc.termination_constants, oc.termination_loss, "nu"),
    "meta": (oc.meta_constants, oc.meta_policy_loss, "z"),
}


def loss_grad_report(name, seed, cfg=None):
    cfg = cfg or oc.UpdateConfig(entropy_coef=0.01)
    consts, loss, head = LOSSES[name]
    rng = np.random.default_rng(seed)
    params = make_params(2, seed=seed, hidden=5)
    params.zeta["log_std"][:] = rng.uniform(-1, 0.5, size=(2, 2))
    batch = batch_from(rng, params, 4)
    const = consts(params, batch, cfg)
    _, grads = loss(params, batch, const)

    def f(head_params):
        return loss(replace(params, **{head: head_params}), batch, const)[0]

    return finite_diff_check(f, getattr(params, head), grads, 1e-4)


class TestGradients:
    @pytest.mark.parametrize("name", sorted(LOSSES))
    @pytest.mark.parametrize("seed", range(5))
    def test_finite_differences(self, name, seed):
        report = loss_grad_report(name, seed)
        assert report.passed, report

    @pytest.mark.parametrize("seed", range(3))
    def test_improvement_raw_and_normalized(self, seed):
        assert loss_grad_report("improvement", seed, oc.UpdateConfig(advantage=False)).passed
        cfg = oc.UpdateConfig(normalize_advantage=True, entropy_coef=0.005)
        assert loss_grad_report("improvement", seed, cfg).passed


# ---------------------------------------------------------------- update probes

def zero_critic(params, value=0.0):
    return const_head(params, "theta", value)


def same_head(a, b, head, atol=0.0):
    pa, pb = getattr(a, head), getattr(b, head)
    return all(np.allclose(pa[k], pb[k], rtol=0, atol=atol) for k in pa)


class TestUpdates:
    cfg = oc.UpdateConfig(lr_critic=1e-2, lr_policy=1e-2, lr_termination=1e-2, lr_meta=1e-2)

    def test_zero_td_error_keeps_theta(self):
        params = zero_critic(make_params())
        b = single(np.ones(6), np.zeros(6), reward=0.0)
        new = oc.evaluation_step(params, oc.OptimizerStates.for_params(params), b, self.cfg)
        assert same_head(new, params, "theta")

    def test_zero_advantage_keeps_zeta(self):
        params = zero_critic(make_params())
        b = single(np.ones(6), np.zeros(6), reward=0.0)
        new = oc.improvement_step(params, oc.OptimizerStates.for_params(params), b, self.cfg)
        assert same_head(new, params, "zeta")

    def test_positive_advantage_raises_logp(self):
        params = zero_critic(make_params(), -1.0)
        cfg = replace(self.cfg, gamma=0.0)
        b = single(np.ones(6), np.zeros(6), option=1, prev=1, action=(0.4, -0.6), reward=0.0)
        before = oc.log_probs_all_options(params, b.x, b.action)[0, 1]
        new = oc.improvement_step(params, oc.OptimizerStates.for_params(params), b, cfg)
        assert oc.log_probs_all_options(new, b.x, b.action)[0, 1] > before

    def test_termination_equal_values_unchanged(self):
        params = zero_critic(make_params())
        b = single(np.ones(6), np.zeros(6))
        new = oc.termination_update(params, oc.OptimizerStates.for_params(params), b, self.cfg)
        assert same_head(new, params, "nu")

    def test_good_option_terminates_less(self):
        params = const_head(make_params(), "theta", [1.0, 0.0])
        b = single(np.ones(6), np.full(6, 0.5), option=0)
        before = oc.termination_probs(params, b.x_next)[0, 0]
        new = oc.termination_update(params, oc.OptimizerStates.for_params(params), b, self.cfg)
        assert oc.termination_probs(new, b.x_next)[0, 0] < before

    def test_meta_no_termination_unchanged(self):
        params = const_head(const_head(make_params(), "nu", -1000.0), "theta", 1.0)
        b = single(np.ones(6), np.full(6, 0.5), nxt=1)
        new = oc.meta_policy_update(params, oc.OptimizerStates.for_params(params), b, self.cfg)
        assert same_head(new, params, "z")

    def test_meta_prefers_valuable_successor(self):
        params = const_head(make_params(), "theta", 1.0)
        b = single(np.ones(6), np.full(6, 0.5), nxt=1)
        before = oc.option_probs(params, b.x_next)[0, 1]
        new = oc.meta_policy_update(params, oc.OptimizerStates.for_params(params), b, self.cfg)
        assert oc.option_probs(new, b.x_next)[0, 1] > before

    def test_empty_batch(self):
        params = make_params()
        with pytest.raises(ContractViolation):
            oc.evaluation_step(params, oc.OptimizerStates.for_params(params), [], self.cfg)

    def test_permutation_invariance(self):
        params = make_params(3)
        b = batch_from(np.random.default_rng(4), params, 16)
        perm = np.random.default_rng(5).permutation(16)
        shuffled = oc.Batch(**{k: getattr(b, k)[perm] for k in vars(b)})
        a = oc.train_minibatch(params, oc.OptimizerStates.for_params(params), b, self.cfg)
        c = oc.train_minibatch(params, oc.OptimizerStates.for_params(params), shuffled, self.cfg)
        for head in ("z", "zeta", "nu", "theta"):
            assert same_head(a, c, head, atol=1e-10)

    def test_single_option_weights(self):
        params = make_params(3)
        b = batch_from(np.random.default_rng(4), params, 6)
        w = oc.occupancy_weights(params, b, single_option=True)
        np.testing.assert_array_equal(w, np.eye(3)[b.option])


# ---------------------------------------------------------------- one option == actor-critic

def ac_forward(p, x):
    h = np.tanh(p["W0"] @ x + p["b0"])
    return p["W1"] @ h + p["b1"], h


def ac_backward(p, x, h, dy):
    dh = (p["W1"].T @ dy) * (1 - h ** 2)
    return {"W0": np.outer(dh, x), "b0": dh, "W1": np.outer(dy, h), "b1": dy.copy()}


def ac_clip(g, max_norm):
    norm = math.sqrt(sum(float((v ** 2).sum()) for v in g.values()))
    if norm > max_norm:
        g = {k: v * (max_norm / norm) for k, v in g.items()}
    return g


def ac_adam(p, g, state, lr):
    state["t"] += 1
    t = state["t"]
    out = {}
    for k in p:
        state["m"][k] = 0.9 * state["m"][k] + 0.1 * g[k]
        state["v"][k] = 0.999 * state["v"][k] + 0.001 * g[k] ** 2
        mh = state["m"][k] / (1 - 0.9 ** t)
        vh = state["v"][k] / (1 - 0.999 ** t)
        out[k] = p[k] - lr * mh / (np.sqrt(vh) + 1e-8)
    return out


def actor_critic_step(theta, zeta, chain, opt, gamma, lr, rho_max=2.0, max_norm=5.0):
    """Plain one-step TD critic and advantage actor-critic, one sample at a time."""
    B = len(chain)
    g_theta = {k: np.zeros_like(v) for k, v in theta.items()}
    for x, a, blogp, r, xn in chain:
        q, h = ac_forward(theta, x)
        target = r + gamma * ac_forward(theta, xn)[0][0]
        m, _ = ac_forward({k: zeta[k] for k in ("W0", "b0", "W1", "b1")}, x)
        mean = np.tanh(m)
        std = np.exp(zeta["log_std"][0])
        logp = float((-0.5 * ((a - mean) / std) ** 2 - zeta["log_std"][0]
                      - 0.5 * math.log(2 * math.pi)).sum())
        rho = min(math.exp(logp - blogp), rho_max)
        dy = np.array([-rho * (target - q[0]) / B])
        for k, v in ac_backward(theta, x, h, dy).items():
            g_theta[k] += v
    theta = ac_adam(theta, ac_clip(g_theta, max_norm), opt["theta"], lr)

    g_zeta = {k: np.zeros_like(v) for k, v in zeta.items()}
    for x, a, blogp, r, xn in chain:
        adv = r + gamma * ac_forward(theta, xn)[0][0] - ac_forward(theta, x)[0][0]
        net = {k: zeta[k] for k in ("W0", "b0", "W1", "b1")}
        m, h = ac_forward(net, x)
        mean = np.tanh(m)
        var = np.exp(2 * zeta["log_std"][0])
        dmean = (a - mean) / var
        dy = -adv * dmean * (1 - mean ** 2) / B
        for k, v in ac_backward(net, x, h, dy).items():
            g_zeta[k] += v
        g_zeta["log_std"] += -adv * ((a - mean) ** 2 / var - 1)[None, :] / B
    zeta = ac_adam(zeta, ac_clip(g_zeta, max_norm), opt["zeta"], lr)
    return theta, zeta


class TestSingleOptionEquivalence:
    def test_three_state_chain(self):
        rng = np.random.default_rng(0)
        params = const_head(make_params(1, input_dim=3, action_dim=1, hidden=6), "nu", 1000.0)
        states = np.eye(3)
        actions = [np.array([0.3]), np.array([-0.5])]
        chain = [(states[0], actions[0], -0.9, -1.0, states[1]),
                 (states[1], actions[1], -1.1, 0.0, states[2])]
        batch = oc.Batch(x=states[:2], x_next=states[1:], option=np.zeros(2, int),
                         prev_option=np.zeros(2, int), next_option=np.zeros(2, int),
                         action=np.array(actions), behavior_logp=np.array([-0.9, -1.1]),
                         reward=np.array([-1.0, 0.0]))
        cfg = oc.UpdateConfig(gamma=0.9, lr_critic=1e-2, lr_policy=1e-2,
                              lr_termination=1e-2, lr_meta=1e-2)
        opt = oc.OptimizerStates.for_params(params)
        theta = {k: v.copy() for k, v in params.theta.items()}
        zeta = {k: v.copy() for k, v in params.zeta.items()}
        ref_opt = {h: {"t": 0, "m": {k: np.zeros_like(v) for k, v in p.items()},
                       "v": {k: np.zeros_like(v) for k, v in p.items()}}
                   for h, p in (("theta", theta), ("zeta", zeta))}
        z0, nu0 = params.z, params.nu
        for _ in range(25):
            params = oc.train_minibatch(params, opt, batch, cfg)
            theta, zeta = actor_critic_step(theta, zeta, chain, ref_opt, 0.9, 1e-2)
        for k in theta:
            np.testing.assert_allclose(params.theta[k], theta[k], rtol=0, atol=1e-10)
        for k in zeta:
            np.testing.assert_allclose(params.zeta[k], zeta[k], rtol=0, atol=1e-10)
        assert all(np.array_equal(params.z[k], z0[k]) for k in z0)
        assert all(np.array_equal(params.nu[k], nu0[k]) for k in nu0)


# ---------------------------------------------------------------- collection

class TestCollection:
    def test_counts(self):
        params = make_params(2, input_dim=6)
        trajs = oc.collect_iteration(params, PointReachEnv(seed=0), np.random.default_rng(0), 500)
        assert len(trajs) == 10 and all(len(t) == 50 for t in trajs)
        usage = np.bincount([tr.option for t in trajs for tr in t.transitions], minlength=2)
        assert usage.sum() == 500

    def test_not_multiple_of_horizon(self):
        with pytest.raises(ContractViolation):
            oc.collect_iteration(make_params(), PointReachEnv(seed=0), np.random.default_rng(0), 120)

    def test_no_termination_keeps_option(self):
        params = const_head(make_params(4, input_dim=6), "nu", -1000.0)
        trajs = oc.collect_iteration(params, PointReachEnv(seed=1), np.random.default_rng(1), 200)
        for t in trajs:
            assert len({tr.option for tr in t.transitions}) == 1

    def test_chain_and_bookkeeping(self):
        params = make_params(3, input_dim=8)
        env = PointPushEnv(seed=2)
        traj = oc.run_episode(params, env, np.random.default_rng(2))
        trs = traj.transitions
        assert trs[0].prev_option == trs[0].option
        for a, b in zip(trs, trs[1:]):
            np.testing.assert_array_equal(a.state_next, b.state_in)
            assert a.next_option == b.option and b.prev_option == a.option
            np.testing.assert_array_equal(a.agent_pos_next, a.raw_state_next[:2])
        assert traj.ret == sum(tr.reward for tr in trs)
        assert all(tr.reward in (0.0, -1.0) for tr in trs)

    def test_deterministic(self):
        def run():
            params = make_params(2, input_dim=6)
            trajs = oc.collect_iteration(params, PointReachEnv(seed=4),
                                         np.random.default_rng(9), 100)
            return np.array([tr.action for t in trajs for tr in t.transitions]).tobytes()

        assert run() == run()


def test_relabeled_grid_transitions_train():
    rng = np.random.default_rng(0)
    traj, *_ = grid_trajectory(rng, 5, True)
    params = make_params(2, input_dim=8)
    new = oc.train_minibatch(params, oc.OptimizerStates.for_params(params), traj.transitions,
                             oc.UpdateConfig())
    assert not same_head(new, params, "theta")
