import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ddrl.env import RIGHT, make_env
from ddrl.errors import EmptyBatch, EmptyTrajectory, InvalidDualClip, NonFiniteRatio, ShapeMismatch, UnknownState
from ddrl.learn import (PRIORITY_FLOOR, Batch, Trajectory, Transition, a2c_gradient, a2c_loss, nstep_returns,
                        ppo_dualclip_gradient, ppo_loss, ppo_objective, priority_of, q_update, td_error,
                        vtrace_targets)
from ddrl.policy import Arch, PolicyParameters, distribution
from oracles import (ARCHS, central_difference, chain_q_star, make_trajectory, random_batch, random_params,
                     rel_error, vtrace_brute_force)


def test_nstep_examples():
    np.testing.assert_allclose(nstep_returns(make_trajectory([0, 0, 1]), 1.0), [1, 1, 1])
    np.testing.assert_allclose(nstep_returns(make_trajectory([1], terminal=False, bootstrap=2.0), 0.5), [2.0])
    with pytest.raises(EmptyTrajectory):
        nstep_returns(Trajectory([]), 0.9)


def test_nstep_on_optimal_chain_rollout():
    env = make_env("chain_mdp")
    obs = env.reset(0)
    trs = []
    while not env.done:
        res = env.step([[RIGHT]])
        trs.append(Transition(obs[0].per_agent_obs[0], RIGHT, res.rewards[0][0],
                              res.observation[0].per_agent_obs[0], res.done))
        obs = res.observation
    assert nstep_returns(Trajectory(trs), 0.9)[0] == pytest.approx(0.729, abs=1e-12)


def test_vtrace_one_step():
    vs, adv = vtrace_targets(make_trajectory([1.0]), [0.0], 0.9)
    assert vs[0] == 1.0 and adv[0] == 1.0


def test_vtrace_on_policy_equals_nstep():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 12))
        blp = np.log(rng.uniform(0.05, 1, n))
        traj = make_trajectory(rng.normal(size=n), terminal=bool(rng.integers(2)), bootstrap=float(rng.normal()),
                               behavior_log_probs=blp, values=rng.normal(size=n))
        gamma = float(rng.uniform(0, 1))
        vs, _ = vtrace_targets(traj, blp, gamma, 1.0, 1.0)
        np.testing.assert_allclose(vs, nstep_returns(traj, gamma), rtol=0, atol=1e-9)


def test_vtrace_matches_brute_force_mixed_ratios():
    ratios = np.array([0.5, 4.0, 1.0])
    rng = np.random.default_rng(3)
    for terminal in (True, False):
        r, V, blp = rng.normal(size=3), rng.normal(size=3), np.log([0.3, 0.2, 0.6])
        traj = make_trajectory(r, terminal, 0.7, blp, V)
        vs, adv = vtrace_targets(traj, blp + np.log(ratios), 0.9, 1.0, 1.0)
        want_vs, want_adv = vtrace_brute_force(r, V, 0.0 if terminal else 0.7, ratios, 0.9, 1.0, 1.0)
        np.testing.assert_allclose(vs, want_vs, atol=1e-12)
        np.testing.assert_allclose(adv, want_adv, atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), n=st.integers(1, 8), rho_hi=st.floats(1.0, 5.0),
       shrink=st.floats(0.05, 1.0))
def test_vtrace_truncation_monotone_at_final_step(seed, n, rho_hi, shrink):
    # Earlier steps also see v_{t+1} move with rho_bar, so the elementwise bound
    # only holds where the next target is the fixed bootstrap value.
    rng = np.random.default_rng(seed)
    blp = np.log(rng.uniform(0.05, 1, n))
    traj = make_trajectory(rng.normal(size=n), False, float(rng.normal()), blp, rng.normal(size=n))
    target = blp + rng.normal(0, 1, n)
    c_bar = min(rho_hi * shrink, 1.0)
    _, hi = vtrace_targets(traj, target, 0.9, rho_hi, c_bar)
    _, lo = vtrace_targets(traj, target, 0.9, rho_hi * shrink, c_bar)
    assert abs(lo[-1]) <= abs(hi[-1]) + 1e-12


def test_vtrace_truncation_can_raise_earlier_advantages():
    blp = np.log([0.5, 0.5])
    traj = make_trajectory([-1.0, 1.0], False, 0.0, blp, [1.0, 0.0])
    target = blp + np.log([1.0, 3.0])
    _, hi = vtrace_targets(traj, target, 0.9, 3.0, 1.0)
    _, lo = vtrace_targets(traj, target, 0.9, 1.0, 1.0)
    np.testing.assert_allclose(hi, [0.7, 3.0])
    np.testing.assert_allclose(lo, [-1.1, 1.0])


def test_vtrace_errors():
    traj = make_trajectory([1.0, 2.0])
    with pytest.raises(ShapeMismatch):
        vtrace_targets(traj, [0.0], 0.9)
    with pytest.raises(NonFiniteRatio):
        vtrace_targets(traj, [np.nan, 0.0], 0.9)


def test_a2c_zero_advantage_zero_policy_grad():
    arch = Arch("tabular", 0, 3)
    params = PolicyParameters("p0", arch, 1, np.zeros(arch.size))
    batch = Batch(np.zeros((4, 0)), np.ones((4, 3), bool), np.array([0, 1, 2, 0]), np.zeros(4), np.zeros(4),
                  np.zeros(4))
    g = arch.unpack(a2c_gradient(params, batch, value_coef=0.0, entropy_coef=0.0).grad)
    np.testing.assert_array_equal(g["logits"], 0)


def test_a2c_positive_advantage_raises_logit():
    arch = Arch("tabular", 0, 3)
    params = PolicyParameters("p0", arch, 1, np.zeros(arch.size))
    batch = Batch(np.zeros((1, 0)), np.ones((1, 3), bool), np.array([1]), np.zeros(1), np.zeros(1), np.ones(1))
    g = arch.unpack(a2c_gradient(params, batch).grad)["logits"][0]
    # descending the loss moves along -g
    assert -g[1] > 0 and -g[0] < 0 and -g[2] < 0


def test_a2c_empty_batch():
    with pytest.raises(EmptyBatch):
        a2c_gradient(PolicyParameters("p0", Arch("tabular", 0, 3), 1, np.zeros(4)), [])


def _a2c_check(arch, rng):
    params = random_params(arch, rng)
    batch = random_batch(arch, rng)
    x = params.values.astype(np.float64)
    upd = a2c_gradient(params, batch, value_coef=0.5, entropy_coef=0.1)
    fd = central_difference(lambda v: a2c_loss(arch, v, batch, 0.5, 0.1), x)
    return rel_error(upd.grad / upd.sample_count, fd)


def _ppo_check(arch, rng):
    params = random_params(arch, rng)
    batch = random_batch(arch, rng, n=8)
    x = params.values.astype(np.float64)
    # push some samples far off-policy so every clip branch is exercised
    batch.behavior_log_probs = batch.behavior_log_probs + rng.normal(0, 1.5, len(batch))
    upd = ppo_dualclip_gradient(params, batch, 0.2, 3.0, value_coef=0.5, entropy_coef=0.1)
    fd = central_difference(lambda v: ppo_loss(arch, v, batch, 0.2, 3.0, 0.5, 0.1), x)
    return rel_error(upd.grad / upd.sample_count, fd)


@pytest.mark.parametrize("kind", sorted(ARCHS))
def test_a2c_gradient_finite_differences(kind):
    rng = np.random.default_rng(10)
    assert max(_a2c_check(ARCHS[kind], rng) for _ in range(20)) < 1e-4


@pytest.mark.parametrize("kind", sorted(ARCHS))
def test_ppo_gradient_finite_differences(kind):
    rng = np.random.default_rng(11)
    assert max(_ppo_check(ARCHS[kind], rng) for _ in range(20)) < 1e-4


def test_ppo_objective_examples():
    assert ppo_objective([np.log(10.0)], [0.0], [-1.0], 0.2, 3.0)[0] == pytest.approx(-3.0)
    lp = np.log([0.2, 0.5, 0.9])
    adv = np.array([1.0, -2.0, 0.5])
    np.testing.assert_allclose(ppo_objective(lp, lp, adv, 0.2, 3.0), adv)
    with pytest.raises(InvalidDualClip):
        ppo_objective(lp, lp, adv, 0.2, 1.0)


def test_ppo_on_policy_equals_policy_gradient():
    rng = np.random.default_rng(4)
    arch = ARCHS["linear"]
    params = random_params(arch, rng)
    batch = random_batch(arch, rng)
    _, logp, _ = distribution(params, batch.obs, batch.masks)
    batch.behavior_log_probs = logp[np.arange(len(batch)), batch.actions]
    a = ppo_dualclip_gradient(params, batch, 0.2, 3.0, value_coef=0.5, entropy_coef=0.0)
    b = a2c_gradient(params, batch, value_coef=0.5, entropy_coef=0.0)
    np.testing.assert_allclose(a.grad, b.grad, atol=1e-10)


@settings(max_examples=200, deadline=None)
@given(lp=st.floats(-8, 0), blp=st.floats(-8, 0), adv=st.floats(-10, -1e-6), eps=st.floats(0.05, 0.5),
       c=st.floats(1.01, 10))
def test_ppo_dual_clip_lower_bound(lp, blp, adv, eps, c):
    assert ppo_objective([lp], [blp], [adv], eps, c)[0] >= c * adv - 1e-12


def test_q_update_examples():
    q = np.zeros((5, 2))
    s, s2 = np.eye(5)[3], np.eye(5)[4]
    out = q_update(q, [Transition(s, 1, 1.0, s2, True)], 1.0, 0.9)
    assert out[3, 1] == 1.0 and q[3, 1] == 0.0
    rng = np.random.default_rng(0).normal(size=(5, 2))
    np.testing.assert_array_equal(q_update(rng, [Transition(s, 0, 3.0, s2, False)], 0.0, 0.9), rng)
    with pytest.raises(UnknownState):
        q_update(q, [Transition(np.zeros(5), 0, 0.0, s2, False)], 0.1, 0.9)


def random_chain_transitions(n: int, seed: int) -> list[Transition]:
    rng = np.random.default_rng(seed)
    env = make_env("chain_mdp")
    out = []
    for _ in range(n):
        s, a = int(rng.integers(0, 4)), int(rng.integers(0, 2))
        env.reset(0)
        env.state = s
        res = env.step([[a]])
        out.append(Transition(np.eye(5)[s], a, res.rewards[0][0], np.eye(5)[env.state], res.done))
    return out


def test_q_learning_converges_to_value_iteration():
    q = q_update(np.zeros((5, 2)), random_chain_transitions(10_000, 0), 0.1, 0.9)
    assert np.abs(q - chain_q_star(0.9)).max() < 0.01


def test_priority_examples():
    s, s2 = np.eye(3)[0], np.eye(3)[1]
    assert priority_of(Transition(s, 0, 0.0, s2, False), np.zeros(3), 0.9) == PRIORITY_FLOOR
    assert priority_of(Transition(s, 0, 1.0, s2, True), np.zeros(3), 0.5) == pytest.approx(1.001)


def test_priority_batch_matches_independent_pass():
    rng = np.random.default_rng(2)
    V = rng.normal(size=6)
    trs = [Transition(np.eye(6)[i % 6], 0, float(rng.normal()), np.eye(6)[(i + 1) % 6], bool(i % 4 == 3))
           for i in range(40)]
    got = [priority_of(t, V, 0.95) for t in trs]
    want = []
    for i, t in enumerate(trs):
        s, s2 = i % 6, (i + 1) % 6
        want.append(abs(t.reward + (0 if t.done else 0.95 * V[s2]) - V[s]) + 1e-3)
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)
    traj = Trajectory(trs[:4])
    assert priority_of(traj, V, 0.95) == pytest.approx(np.mean([w - 1e-3 for w in want[:4]]) + 1e-3)
    assert td_error(trs[0], lambda o: V[int(np.argmax(o))], 0.95) == pytest.approx(want[0] - 1e-3, abs=1e-12) or \
        td_error(trs[0], lambda o: V[int(np.argmax(o))], 0.95) == pytest.approx(-(want[0] - 1e-3), abs=1e-12)
