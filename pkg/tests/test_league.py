import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ddrl.env import PAPER, ROCK, make_env
from ddrl.errors import EmptyPool, EnvPlayerMismatch, NoMatches, UnknownGeneration, UnknownPlayer, UnknownStrategy
from ddrl.learn import Trajectory, Transition
from ddrl.league import (LIVE, CooperationMode, JointBatch, League, MatchResult, best_response_win_rate,
                         build_training_batches, elo_ratings, evaluation_round, exploitability, record_match,
                         sample_opponent, snapshot_generation)
from ddrl.policy import Arch, PolicyParameters, init_params

RPS = Arch("tabular", 0, 3)
CHAIN = Arch("tabular", 5, 2)


def pure(arch, action, pid, strength=30.0):
    p = init_params(arch, 0, pid)
    table = arch.unpack(np.zeros(arch.size))
    table["logits"][:, action] = strength
    return p.with_values(np.concatenate([table[k].ravel() for k, _ in arch.shapes()]), version=1)


def league_with(n_gens, pid="p0", arch=RPS):
    lg = League("matrix_rps")
    lg.add_player(init_params(arch, 1, pid))
    for _ in range(n_gens):
        lg.snapshot_generation(pid)
    return lg


def test_snapshot_indices():
    lg = league_with(0)
    assert snapshot_generation(lg, "p0") == 1
    assert lg.snapshot_generation("p0") == 2
    a, b = lg.params(("p0", 1)), lg.params(("p0", 2))
    assert a.values.tobytes() == b.values.tobytes()
    for _ in range(18):
        lg.snapshot_generation("p0")
    assert len(lg.player("p0").generations) == 20
    with pytest.raises(UnknownPlayer):
        lg.snapshot_generation("nobody")


def test_record_match_tallies():
    lg = league_with(2)
    a, b = ("p0", 1), ("p0", 2)
    record_match(lg, MatchResult(a, b, "a_win"))
    assert lg.win_prob(a, b) == 1.0 and lg.games(a, b) == 1
    for k in range(99):
        lg.record_match(MatchResult(a, b, "b_win" if k < 50 else "a_win"))
    assert lg.win_prob(a, b) == 0.5
    w, d, l = lg.tally(a, b)
    assert lg.games(a, b) == lg.games(b, a) and (w, d, l) == tuple(reversed(lg.tally(b, a)))
    with pytest.raises(UnknownGeneration):
        lg.record_match(MatchResult(a, ("p0", 9), "draw"))
    with pytest.raises(ValueError):
        MatchResult(a, a, "draw")


def test_elo_examples():
    lg = league_with(2)
    with pytest.raises(NoMatches):
        elo_ratings(lg)
    lg.record_match(MatchResult(("p0", 1), ("p0", 2), "a_win"))
    assert elo_ratings(lg) == {("p0", 1): 1016.0, ("p0", 2): 984.0}
    lg2 = league_with(2)
    lg2.record_match(MatchResult(("p0", 1), ("p0", 2), "draw"))
    assert set(elo_ratings(lg2).values()) == {1000.0}


@settings(max_examples=60, deadline=None)
@given(games=st.lists(st.tuples(st.integers(1, 4), st.integers(1, 4), st.sampled_from(["a_win", "b_win", "draw"])),
                      min_size=1, max_size=150), k=st.sampled_from([16.0, 32.0, 40.0]))
def test_elo_mass_conserved_exactly(games, k):
    lg = league_with(4)
    for a, b, o in games:
        if a != b:
            lg.record_match(MatchResult(("p0", a), ("p0", b), o))
    if not lg.matches:
        return
    r = lg.elo_ratings(k)
    assert sum(r.values()) == 1000.0 * len(r)


def test_self_80_20_frequency():
    lg = league_with(3)
    rng = np.random.default_rng(0)
    draws = [sample_opponent(lg, "p0", "self_80_20", rng) for _ in range(100_000)]
    assert np.mean([g == LIVE for _, g in draws]) == pytest.approx(0.8, abs=0.01)
    past = [g for _, g in draws if g != LIVE]
    assert set(past) == {1, 2, 3}


def test_pfsp_weight_example():
    lg = league_with(2)
    x, y, me = ("p0", 1), ("p0", 2), ("p0", LIVE)
    lg.record_match(MatchResult(me, x, "a_win"))
    lg.record_match(MatchResult(me, y, "a_win"))
    lg.record_match(MatchResult(me, y, "b_win"))
    cands, w = lg.pfsp_weights("p0")
    assert cands == [x, y] and w.tolist() == [0.0, 1.0]  # raw (0, 0.25) normalized
    rng = np.random.default_rng(1)
    assert {sample_opponent(lg, "p0", "pfsp", rng) for _ in range(200)} == {y}


@settings(max_examples=40, deadline=None)
@given(results=st.lists(st.tuples(st.integers(1, 5), st.sampled_from(["a_win", "b_win", "draw"])), max_size=60))
def test_pfsp_weights_normalized(results):
    lg = league_with(5)
    for g, o in results:
        lg.record_match(MatchResult(("p0", LIVE), ("p0", g), o))
    cands, w = lg.pfsp_weights("p0")
    if w.sum() > 0:
        assert w.sum() == pytest.approx(1.0)
    for c, wi in zip(cands, w):
        if lg.win_prob(("p0", LIVE), c) == 1.0:
            assert wi == 0.0


def test_other_strategies():
    lg = league_with(1)
    assert sample_opponent(lg, "p0", "naive_self", 0) == ("p0", 1)
    lg.add_player(init_params(RPS, 2, "p1"))
    lg.snapshot_generation("p1")
    rng = np.random.default_rng(2)
    assert {sample_opponent(lg, "p0", "uniform_past", rng) for _ in range(100)} == {("p0", 1), ("p1", 1)}
    lg.add_player(init_params(RPS, 3, "x"), role="main_exploiter")
    lg.player("p0").role = "main"
    assert sample_opponent(lg, "x", "role", rng) == ("p0", LIVE)
    with pytest.raises(UnknownStrategy):
        sample_opponent(lg, "p0", "best", rng)
    with pytest.raises(EmptyPool):
        sample_opponent(league_with(0), "p0", "naive_self", rng)
    with pytest.raises(EmptyPool):
        sample_opponent(league_with(0), "p0", "pfsp", rng)


def test_sampling_is_pure_in_rng_state():
    lg = league_with(4)
    lg.record_match(MatchResult(("p0", LIVE), ("p0", 2), "a_win"))
    for strat in ("pfsp", "self_80_20", "uniform_past"):
        a = [sample_opponent(lg, "p0", strat, np.random.default_rng(5)) for _ in range(3)]
        assert len(set(a)) == 1


def identical_generations_elo_gap(games: int = 200) -> float:
    lg = league_with(2)
    r = lg.evaluation_round("all_pairs", games, "matrix_rps", seed=3)
    return abs(r[("p0", 1)] - r[("p0", 2)])


def test_identical_generations_rate_equal():
    assert identical_generations_elo_gap() < 50


def test_best_response_beats_always_rock():
    lg = League("matrix_rps")
    lg.add_player(pure(RPS, ROCK, "rock"))
    lg.add_player(pure(RPS, PAPER, "paper"))
    lg.snapshot_generation("rock")
    lg.snapshot_generation("paper")
    r = evaluation_round(lg, "vs_baselines", 100, baselines=[("rock", 1)])
    assert lg.win_prob(("paper", 1), ("rock", 1)) == 1.0
    assert r[("paper", 1)] > r[("rock", 1)]


def test_zero_games_leaves_ratings():
    lg = league_with(2)
    lg.record_match(MatchResult(("p0", 1), ("p0", 2), "a_win"))
    before = lg.elo_ratings()
    assert lg.evaluation_round("all_pairs", 0) == before
    assert len(lg.matches) == 1


def test_evaluation_checks_env():
    lg = league_with(2, arch=CHAIN)
    with pytest.raises(EnvPlayerMismatch):
        lg.evaluation_round("all_pairs", 2, "matrix_rps")


def dominant_chain_league(games: int = 200, seed: int = 0) -> tuple[League, dict]:
    lg = League("chain_mdp")
    lg.add_player(pure(CHAIN, 1, "right"))
    lg.snapshot_generation("right")
    for i in range(3):
        lg.add_player(init_params(CHAIN, 10 + i, f"random{i}"))
        lg.snapshot_generation(f"random{i}")
    return lg, lg.evaluation_round("all_pairs", games, "chain_mdp", seed=seed, gamma=0.9)


def test_dominant_chain_policy_rated_highest():
    lg, r = dominant_chain_league()
    best = max(r, key=r.get)
    assert best == ("right", 1)
    assert all(r[best] > v for s, v in r.items() if s != best)


def test_generations_untouched_by_league_activity(tmp_path):
    lg, _ = dominant_chain_league(games=20)
    before = {s: lg.params(s).checksum() for s in lg.frozen()}
    lg.evaluation_round("all_pairs", 10, "chain_mdp", seed=9)
    lg.save(tmp_path / "league.json")
    sample_opponent(lg, "right", "pfsp", 0)
    assert {s: lg.params(s).checksum() for s in lg.frozen()} == before


def test_persistence_round_trip(tmp_path):
    lg, r = dominant_chain_league(games=30)
    path = lg.save(tmp_path / "league.json")
    back = League.load(path)
    assert back.elo_ratings() == r
    assert [m for m in back.matches] == lg.matches
    assert {s: back.params(s).checksum() for s in back.frozen()} == {s: lg.params(s).checksum() for s in lg.frozen()}


def test_matrix_exploit_metrics():
    pay = make_env("matrix_rps").payoff
    assert best_response_win_rate(np.ones(3) / 3, pay) == pytest.approx(1 / 3)
    assert best_response_win_rate(np.array([1.0, 0, 0]), pay) == 1.0
    assert exploitability(np.ones(3) / 3, pay) == pytest.approx(0.0)


def _agent_traj(agent, n, pid="p0", ep=0, obs_dim=3):
    trs = [Transition(np.full(obs_dim, agent), 0, float(agent + t), np.zeros(obs_dim), t == n - 1, -0.5, 0.0, 1,
                      agent, pid, None, t) for t in range(n)]
    return Trajectory(trs, meta={"episode": ep})


def test_shared_and_distinct_batches():
    trajs = [_agent_traj(0, 3), _agent_traj(1, 4)]
    shared = build_training_batches(CooperationMode("independent", True), trajs, 0.9, 2, 2)
    assert list(shared) == ["p0"] and len(shared["p0"]) == 7
    assert shared["p0"].obs.shape[1] == 5  # agent-id one-hot appended
    distinct = build_training_batches(CooperationMode("independent", False, False), trajs, 0.9, 2, 2)
    assert sorted(distinct) == [("p0", 0), ("p0", 1)]
    assert len(distinct[("p0", 0)]) == 3 and len(distinct[("p0", 1)]) == 4


def test_joint_batches_keep_alignment_on_grid_capture():
    env = make_env("grid_capture")
    rng = np.random.default_rng(0)
    obs = env.reset(4)
    steps = {0: [], 1: []}
    team = []
    t = 0
    while not env.done:
        acts = [[int(rng.choice(np.flatnonzero(m))) for m in o.action_mask] for o in obs]
        res = env.step(acts)
        for k in range(2):
            steps[k].append(Transition(obs[0].per_agent_obs[k], acts[0][k], res.rewards[0][k],
                                       res.observation[0].per_agent_obs[k], res.done, -1.0, 0.0, 1, k, "p0",
                                       obs[0].action_mask[k], t))
        team.append(res.info["team_rewards"][0])
        obs = res.observation
        t += 1
    trajs = [Trajectory(steps[k], meta={"episode": 0}) for k in (1, 0)]
    batch = build_training_batches(CooperationMode("joint"), trajs, 0.9, 5, 2)["p0"]
    assert isinstance(batch, JointBatch)
    np.testing.assert_allclose(batch.team_rewards, team)
    assert batch.times.tolist() == [i // 2 for i in range(2 * t)]
    assert batch.agent_ids.tolist() == [0, 1] * t
    assert batch.returns[0] == batch.returns[1]
