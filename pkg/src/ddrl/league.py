"""Players manager: frozen generations, confrontation results, Elo, opponent sampling.

Generation ``0`` always denotes a player's *live* (still training) policy;
frozen generations are numbered densely from 1.
"""
from __future__ import annotations

import json
import math
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .env import derive_seed, make_env
from .errors import (CorruptPayload, EmptyPool, EnvPlayerMismatch, MissingAgentTag, NoMatches,
                     UnknownGeneration, UnknownPlayer, UnknownStrategy)
from .learn import Batch, Trajectory, nstep_returns
from .policy import Arch, PolicyParameters, deserialize_params, distribution, infer_batch, serialize_params

ROLES = ("main", "main_exploiter", "league_exploiter", "peer")
STRATEGIES = ("naive_self", "self_80_20", "pfsp", "uniform_past", "role")
OUTCOMES = ("a_win", "b_win", "draw")
LIVE = 0
SCHEMA_VERSION = 1
ELO_K = 32.0
ELO_INITIAL = 1000.0
_ELO_QUANTUM = 2.0 ** -20

Side = tuple[str, int]


@dataclass
class PlayerRecord:
    player_id: str
    role: str = "main"
    generations: list[PolicyParameters] = field(default_factory=list)
    live: PolicyParameters | None = None


@dataclass(frozen=True)
class MatchResult:
    side_a: Side
    side_b: Side
    outcome: str
    game_count: int = 1
    self_mirror: bool = False

    def __post_init__(self):
        if self.outcome not in OUTCOMES:
            raise ValueError(f"outcome must be one of {OUTCOMES}")
        if self.game_count < 1:
            raise ValueError("game_count must be >= 1")
        if tuple(self.side_a) == tuple(self.side_b) and not self.self_mirror:
            raise ValueError("a side cannot play itself unless self_mirror is set")


@dataclass(frozen=True)
class CooperationMode:
    mode: str = "independent"
    shared_policy: bool = True
    agent_id_feature: bool = True

    def __post_init__(self):
        if self.mode not in ("independent", "joint"):
            raise ValueError("mode must be 'independent' or 'joint'")


class League:
    def __init__(self, env_id: str | None = None):
        self.env_id = env_id
        self.players: dict[str, PlayerRecord] = {}
        self.matches: list[MatchResult] = []
        # (side, side) -> [wins, draws, losses] from the first side's view
        self._tally: dict[tuple[Side, Side], list[int]] = {}
        self._lock = threading.RLock()

    # -- registry ---------------------------------------------------------

    def add_player(self, params: PolicyParameters, role: str = "main") -> PlayerRecord:
        if role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}")
        with self._lock:
            rec = PlayerRecord(params.player_id, role, [], params)
            self.players[params.player_id] = rec
            return rec

    def player(self, player_id: str) -> PlayerRecord:
        try:
            return self.players[player_id]
        except KeyError:
            raise UnknownPlayer(f"player {player_id!r} is not registered") from None

    def update_live(self, params: PolicyParameters) -> None:
        with self._lock:
            self.player(params.player_id).live = params

    def snapshot_generation(self, player_id: str) -> int:
        with self._lock:
            rec = self.player(player_id)
            if rec.live is None:
                raise UnknownGeneration(f"{player_id} has no live parameters")
            rec.generations.append(rec.live)  # PolicyParameters is immutable
            return len(rec.generations)

    def params(self, side: Side) -> PolicyParameters:
        pid, gen = side
        rec = self.player(pid)
        if gen == LIVE:
            if rec.live is None:
                raise UnknownGeneration(f"{pid} has no live parameters")
            return rec.live
        if not 1 <= gen <= len(rec.generations):
            raise UnknownGeneration(f"{pid} has no generation {gen}")
        return rec.generations[gen - 1]

    def frozen(self) -> list[Side]:
        return [(pid, g) for pid in sorted(self.players) for g in range(1, len(self.players[pid].generations) + 1)]

    # -- confrontation results -------------------------------------------

    def record_match(self, result: MatchResult) -> int:
        with self._lock:
            a, b = tuple(result.side_a), tuple(result.side_b)
            self.params(a)
            self.params(b)
            self.matches.append(result)
            w = {"a_win": 0, "draw": 1, "b_win": 2}[result.outcome]
            self._tally.setdefault((a, b), [0, 0, 0])[w] += result.game_count
            self._tally.setdefault((b, a), [0, 0, 0])[2 - w] += result.game_count
            return len(self.matches) - 1

    def tally(self, a: Side, b: Side) -> tuple[int, int, int]:
        """(wins, draws, losses) of ``a`` against ``b``."""
        return tuple(self._tally.get((tuple(a), tuple(b)), (0, 0, 0)))

    def games(self, a: Side, b: Side) -> int:
        return sum(self.tally(a, b))

    def win_prob(self, a: Side, b: Side, prior: float = 0.5) -> float:
        """Empirical win probability of ``a`` over ``b``; draws count one half."""
        w, d, l = self.tally(a, b)
        n = w + d + l
        return prior if n == 0 else (w + 0.5 * d) / n

    def win_matrix(self, sides: Sequence[Side] | None = None) -> tuple[list[Side], np.ndarray]:
        sides = list(sides) if sides is not None else self.frozen()
        m = np.full((len(sides), len(sides)), np.nan)
        for i, a in enumerate(sides):
            for j, b in enumerate(sides):
                if self.games(a, b):
                    m[i, j] = self.win_prob(a, b)
        return sides, m

    def elo_ratings(self, k_factor: float = ELO_K, initial: float = ELO_INITIAL,
                    include_live: bool = False) -> dict[Side, float]:
        """Sequential Elo over recorded games, in recording order.

        Rating changes are rounded to a 2**-20 grid so the zero-sum update keeps
        the rating total exactly constant in floating point.
        """
        matches = [m for m in self.matches
                   if include_live or (m.side_a[1] != LIVE and m.side_b[1] != LIVE)]
        if not matches:
            raise NoMatches("no recorded matches")
        ratings = {s: float(initial) for s in self.frozen()}
        for m in matches:
            a, b = tuple(m.side_a), tuple(m.side_b)
            ratings.setdefault(a, float(initial))
            ratings.setdefault(b, float(initial))
            score = {"a_win": 1.0, "draw": 0.5, "b_win": 0.0}[m.outcome]
            for _ in range(m.game_count):
                if a == b:
                    continue
                expected = 1.0 / (1.0 + 10.0 ** ((ratings[b] - ratings[a]) / 400.0))
                delta = round(k_factor * (score - expected) / _ELO_QUANTUM) * _ELO_QUANTUM
                ratings[a] += delta
                ratings[b] -= delta
        return ratings

    # -- opponent sampling -------------------------------------------------

    def pfsp_weights(self, player_id: str, candidates: Sequence[Side] | None = None,
                     exponent: float = 2.0) -> tuple[list[Side], np.ndarray]:
        """Normalized weights ``(1 - p)**exponent`` with ``p`` the live player's win rate."""
        cands = list(candidates) if candidates is not None else self.frozen()
        if not cands:
            raise EmptyPool("no frozen generations to sample from")
        me = (player_id, LIVE)
        raw = np.array([(1.0 - self.win_prob(me, c)) ** exponent for c in cands])
        total = raw.sum()
        if total <= 0:
            return cands, np.zeros(len(cands))
        return cands, raw / total

    def sample_opponent(self, player_id: str, strategy: str, rng, exponent: float = 2.0,
                        live_fraction: float = 0.8) -> Side:
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        rec = self.player(player_id)
        if strategy == "naive_self":
            if not rec.generations:
                raise EmptyPool(f"{player_id} has no frozen generation")
            return (player_id, len(rec.generations))
        if strategy == "self_80_20":
            if rng.random() < live_fraction or not rec.generations:
                return (player_id, LIVE)
            return (player_id, int(rng.integers(1, len(rec.generations) + 1)))
        if strategy == "uniform_past":
            pool = self.frozen()
            if not pool:
                raise EmptyPool("no frozen generations in the league")
            return pool[int(rng.integers(len(pool)))]
        if strategy == "pfsp":
            return self._pfsp(player_id, self.frozen(), rng, exponent)
        if strategy == "role":
            if rec.role == "main_exploiter":
                mains = sorted(p for p, r in self.players.items() if r.role == "main")
                if not mains:
                    raise EmptyPool("league has no main player to exploit")
                return (mains[0], LIVE)
            return self._pfsp(player_id, self.frozen(), rng, exponent)
        raise UnknownStrategy(f"unknown opponent strategy {strategy!r}")

    def _pfsp(self, player_id, pool, rng, exponent):
        cands, w = self.pfsp_weights(player_id, pool, exponent)
        if w.sum() <= 0:  # beats everyone: fall back to uniform
            return cands[int(rng.integers(len(cands)))]
        return cands[int(rng.choice(len(cands), p=w))]

    # -- evaluation --------------------------------------------------------

    def evaluation_round(self, pairing: str = "all_pairs", games_per_pair: int = 100,
                         env_id: str | None = None, seed: int = 0,
                         baselines: Iterable[Side] = (), gamma: float = 0.99) -> dict[Side, float] | None:
        """Play every pairing on fixed seeds, record outcomes and return fresh ratings.

        Games are played in seat-swapped pairs that share all random numbers, so
        positional advantage and sampling luck cancel between the two sides.
        """
        env_id = env_id or self.env_id
        if games_per_pair <= 0:
            return self.elo_ratings() if self.matches else None
        frozen = self.frozen()
        base = [tuple(b) for b in baselines]
        if pairing == "all_pairs":
            pairs = [(frozen[i], frozen[j]) for i in range(len(frozen)) for j in range(i + 1, len(frozen))]
        elif pairing == "vs_baselines":
            pairs = [(s, b) for s in frozen if s not in base for b in base]
        else:
            raise ValueError("pairing must be 'all_pairs' or 'vs_baselines'")
        for a, b in pairs:
            _check_env(env_id, self.params(a).arch)
            _check_env(env_id, self.params(b).arch)
        for pi, (a, b) in enumerate(pairs):
            pa, pb = self.params(a), self.params(b)
            for g in range(games_per_pair):
                s = derive_seed(seed, pi, g // 2)
                if g % 2 == 0:
                    score = play_game(env_id, pa, pb, s, gamma)
                else:
                    score = -play_game(env_id, pb, pa, s, gamma)
                outcome = "a_win" if score > 0 else "b_win" if score < 0 else "draw"
                self.record_match(MatchResult(a, b, outcome, 1, self_mirror=(a == b)))
        return self.elo_ratings()

    # -- persistence -------------------------------------------------------

    def save(self, path: str | os.PathLike) -> Path:
        """Write the league document plus one binary sidecar per snapshot."""
        path = Path(path)
        side_dir = path.with_name(path.name + ".params")
        side_dir.mkdir(parents=True, exist_ok=True)
        with self._lock:
            players = []
            for pid in sorted(self.players):
                rec = self.players[pid]
                gens = []
                for i, p in enumerate(rec.generations, start=1):
                    gens.append(_write_sidecar(side_dir, f"{pid}-g{i}.bin", p))
                # live files are versioned so an older document never points at rewritten bytes
                live = (_write_sidecar(side_dir, f"{pid}-live-v{rec.live.version}.bin", rec.live)
                        if rec.live is not None else None)
                players.append({"player_id": pid, "role": rec.role, "arch": _arch_doc(self._arch_of(rec)),
                                "generations": gens, "live": live})
            doc = {
                "schema": "ddrl.league",
                "schema_version": SCHEMA_VERSION,
                "env_id": self.env_id,
                "players": players,
                "matches": [{"id": i, "a": list(m.side_a), "b": list(m.side_b), "outcome": m.outcome,
                             "game_count": m.game_count, "self_mirror": m.self_mirror}
                            for i, m in enumerate(self.matches)],
            }
            if any(m.side_a[1] != LIVE and m.side_b[1] != LIVE for m in self.matches):
                doc["ratings"] = [{"player_id": s[0], "generation": s[1], "elo": r}
                                  for s, r in sorted(self.elo_ratings().items())]
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(doc, indent=1))
        os.replace(tmp, path)
        keep = {p["live"]["file"] for p in players if p["live"]}
        for stale in side_dir.glob("*-live-v*.bin"):
            if stale.name not in keep:
                stale.unlink(missing_ok=True)
        return path

    def _arch_of(self, rec: PlayerRecord) -> Arch:
        return (rec.live or rec.generations[0]).arch

    @classmethod
    def load(cls, path: str | os.PathLike) -> "League":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise CorruptPayload(f"{path}: not a league document ({exc})") from exc
        if doc.get("schema") != "ddrl.league" or doc.get("schema_version") != SCHEMA_VERSION:
            raise CorruptPayload(f"{path}: unsupported schema {doc.get('schema')} v{doc.get('schema_version')}")
        side_dir = path.with_name(path.name + ".params")
        league = cls(doc.get("env_id"))
        for p in doc["players"]:
            arch = Arch(**p["arch"])
            rec = PlayerRecord(p["player_id"], p["role"])
            rec.generations = [_read_sidecar(side_dir, g, arch) for g in p["generations"]]
            rec.live = _read_sidecar(side_dir, p["live"], arch) if p.get("live") else None
            league.players[rec.player_id] = rec
        for m in sorted(doc["matches"], key=lambda m: m["id"]):
            league.record_match(MatchResult(tuple(m["a"]), tuple(m["b"]), m["outcome"], m["game_count"],
                                            m.get("self_mirror", False)))
        return league


def _arch_doc(arch: Arch) -> dict:
    return {"kind": arch.kind, "obs_dim": arch.obs_dim, "n_actions": arch.n_actions, "hidden": arch.hidden}


def _write_sidecar(side_dir: Path, name: str, params: PolicyParameters) -> dict:
    data = serialize_params(params)
    target = side_dir / name
    if not target.exists() or target.read_bytes() != data:
        tmp = target.with_suffix(".tmp")
        tmp.write_bytes(data)
        os.replace(tmp, target)
    return {"file": name, "version": params.version, "checksum": params.checksum()}


def _read_sidecar(side_dir: Path, entry: dict, arch: Arch) -> PolicyParameters:
    p = deserialize_params((side_dir / entry["file"]).read_bytes(), arch)
    if p.checksum() != entry["checksum"]:
        raise CorruptPayload(f"checksum mismatch for {entry['file']}")
    return p


# --------------------------------------------------------------------- free-function API

def snapshot_generation(league: League, player_id: str) -> int:
    return league.snapshot_generation(player_id)


def record_match(league: League, result: MatchResult) -> int:
    return league.record_match(result)


def elo_ratings(league: League, k_factor: float = ELO_K, initial: float = ELO_INITIAL):
    return league.elo_ratings(k_factor, initial)


def sample_opponent(league: League, player_id: str, strategy: str, rng, **kw) -> Side:
    return league.sample_opponent(player_id, strategy, rng, **kw)


def evaluation_round(league: League, pairing="all_pairs", games_per_pair=100, env_id=None, **kw):
    return league.evaluation_round(pairing, games_per_pair, env_id, **kw)


# --------------------------------------------------------------------- playing games

def policy_obs(obs: np.ndarray, agent_id: int, n_agents: int, arch: Arch) -> np.ndarray:
    """Append a one-hot agent-ID feature when the architecture expects it."""
    obs = np.asarray(obs, dtype=np.float64)
    if arch.obs_dim == obs.size + n_agents:
        onehot = np.zeros(n_agents)
        onehot[agent_id] = 1.0
        return np.concatenate([obs, onehot])
    return obs


def _check_env(env_id: str, arch: Arch):
    env = make_env(env_id)
    s = env.spec
    extra = s.agents_per_player if arch.obs_dim == s.obs_dim + s.agents_per_player else 0
    if arch.obs_dim != s.obs_dim + extra or arch.n_actions != s.action_dim:
        raise EnvPlayerMismatch(f"{env_id} needs obs_dim {s.obs_dim} / {s.action_dim} actions, "
                                f"policy has {arch.obs_dim} / {arch.n_actions}")


def _act(env, params: PolicyParameters, joint_obs, rng) -> list[int]:
    n = env.spec.agents_per_player
    obs = np.stack([policy_obs(o, k, n, params.arch) for k, o in enumerate(joint_obs.per_agent_obs)])
    acts, *_ = infer_batch(params, obs, np.stack(joint_obs.action_mask), rng.random(n))
    return [int(a) for a in acts]


def play_episode(env_id: str, seats: Sequence[PolicyParameters], seed: int, rngs) -> tuple[list[float], dict]:
    """Run one episode; returns per-player undiscounted team returns and the last info."""
    env = make_env(env_id)
    obs = env.reset(seed)
    totals = [0.0] * env.spec.players
    while True:
        acts = [_act(env, seats[p], obs[p], rngs[p]) for p in range(env.spec.players)]
        res = env.step(acts)
        for p in range(env.spec.players):
            totals[p] += sum(res.rewards[p])
        obs = res.observation
        if res.done:
            return totals, res.info


def play_game(env_id: str, pa: PolicyParameters, pb: PolicyParameters, seed: int, gamma: float = 0.99) -> float:
    """Signed outcome for ``pa``: +1 win, -1 loss, 0 draw.

    Two-player envs seat ``pa`` as player 0. Single-player envs run both
    policies on the same episode seed and compare discounted returns.
    """
    spec = make_env(env_id).spec
    rng0 = np.random.default_rng(derive_seed(seed, 0))
    rng1 = np.random.default_rng(derive_seed(seed, 1))
    if spec.players == 2:
        totals, _ = play_episode(env_id, [pa, pb], seed, [rng0, rng1])
        diff = totals[0] - totals[1]
        return float(np.sign(round(diff, 9)))
    ra = _discounted_return(env_id, pa, seed, rng0, gamma)
    rb = _discounted_return(env_id, pb, seed, rng1, gamma)
    return float(np.sign(round(ra - rb, 12)))


def _discounted_return(env_id, params, seed, rng, gamma) -> float:
    env = make_env(env_id)
    obs = env.reset(seed)
    ret, disc = 0.0, 1.0
    while True:
        res = env.step([_act(env, params, obs[0], rng)])
        ret += disc * sum(res.rewards[0])
        disc *= gamma
        obs = res.observation
        if res.done:
            return ret


def exploitability(probs: np.ndarray, payoff: np.ndarray) -> float:
    """Best-response expected payoff against a mixed strategy (0 at the equilibrium of a fair zero-sum game)."""
    return float(np.max(np.asarray(payoff) @ np.asarray(probs)))


def best_response_win_rate(probs: np.ndarray, payoff: np.ndarray) -> float:
    """Win probability of the best pure reply, found by trying every action."""
    wins = (np.asarray(payoff) > 0).astype(float)
    return float(np.max(wins @ np.asarray(probs)))


def matrix_policy_probs(params: PolicyParameters) -> np.ndarray:
    probs, _, _ = distribution(params, np.zeros((1, params.arch.obs_dim)))
    return probs[0]


# --------------------------------------------------------------------- cooperation modes

@dataclass
class JointBatch(Batch):
    """Rows ordered by ``(time, agent)`` within each episode; returns are team returns."""

    times: np.ndarray | None = None
    agent_ids: np.ndarray | None = None
    team_rewards: np.ndarray | None = None


def _check_tags(trajectories):
    for tr in trajectories:
        for t in tr.transitions:
            if t.agent_id is None or t.player_id is None:
                raise MissingAgentTag("transition lacks agent_id or player_id")


def _rows(trajs: Sequence[Trajectory], n_agents: int, arch_obs_dim: int | None, mode: CooperationMode):
    obs, masks, acts, blp = [], [], [], []
    for tr in trajs:
        for t in tr.transitions:
            o = np.asarray(t.obs, dtype=np.float64)
            if mode.agent_id_feature and (arch_obs_dim is None or arch_obs_dim == o.size + n_agents):
                onehot = np.zeros(n_agents)
                onehot[t.agent_id] = 1.0
                o = np.concatenate([o, onehot])
            obs.append(o)
            masks.append(t.mask)
            acts.append(t.action)
            blp.append(t.behavior_log_prob)
    return obs, masks, acts, blp


def build_training_batches(mode: CooperationMode, finished_trajectories: Sequence[Trajectory], gamma: float,
                           n_actions: int, n_agents: int, arch_obs_dim: int | None = None) -> dict:
    """Group finished trajectories into learner batches according to ``mode``.

    Keys: ``player_id`` (shared policy or joint) or ``(player_id, agent_id)``
    (independent with distinct policies).
    """
    trajs = [t for t in finished_trajectories if t.transitions]
    _check_tags(trajs)
    out: dict = {}

    def mk(rows_trajs, returns, extra=None):
        obs, masks, acts, blp = _rows(rows_trajs, n_agents, arch_obs_dim, mode)
        masks = np.stack([np.ones(n_actions, bool) if m is None else np.asarray(m, bool) for m in masks])
        fields = dict(obs=np.stack(obs), masks=masks, actions=np.array(acts, int),
                      returns=np.concatenate(returns), behavior_log_probs=np.array(blp, float))
        return JointBatch(**fields, **extra) if extra is not None else Batch(**fields)

    if mode.mode == "independent":
        groups: dict = {}
        for tr in trajs:
            key = tr.player_id if mode.shared_policy else (tr.player_id, tr.agent_id)
            groups.setdefault(key, []).append(tr)
        for key, group in groups.items():
            out[key] = mk(group, [nstep_returns(t, gamma) for t in group])
        return out

    by_player: dict = {}
    for tr in trajs:
        if "episode" not in tr.meta:
            raise MissingAgentTag("joint mode needs trajectories tagged with meta['episode']")
        by_player.setdefault(tr.player_id, {}).setdefault(tr.meta["episode"], []).append(tr)
    for pid, episodes in by_player.items():
        rows_trajs, returns, times, agents, team = [], [], [], [], []
        for ep in sorted(episodes, key=repr):
            group = sorted(episodes[ep], key=lambda t: t.agent_id)
            length = len(group[0])
            if any(len(t) != length for t in group):
                raise ValueError(f"episode {ep!r}: agent trajectories are misaligned")
            team_r = np.sum([t.rewards() for t in group], axis=0)
            team_traj = Trajectory(
                [group[0].transitions[i].__class__(**{**group[0].transitions[i].__dict__, "reward": float(team_r[i])})
                 for i in range(length)],
                float(np.sum([t.bootstrap_value for t in group])))
            team_ret = nstep_returns(team_traj, gamma)
            for i in range(length):
                for t in group:
                    rows_trajs.append(Trajectory([t.transitions[i]]))
                    returns.append(team_ret[i:i + 1])
                    times.append(t.transitions[i].step)
                    agents.append(t.agent_id)
            team.append(team_r)
        out[pid] = mk(rows_trajs, returns, dict(times=np.array(times), agent_ids=np.array(agents),
                                                team_rewards=np.concatenate(team)))
    return out
