"""Deterministic toy environments with a multi-player, multi-agent stepping interface.

Every environment exposes ``reset(seed)`` returning one :class:`JointObservation`
per player and ``step(joint_actions)`` taking ``joint_actions[player][agent]``.
Observations are fixed-width float vectors; masks are boolean vectors over the
player's action space.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .errors import BatchSizeMismatch, IllegalAction, SteppedAfterDone

ENV_IDS = ("matrix_rps", "matching_pennies", "chain_mdp", "grid_capture")

ROCK, PAPER, SCISSORS = 0, 1, 2
LEFT, RIGHT = 0, 1
NOOP, UP, DOWN, WEST, EAST = 0, 1, 2, 3, 4


@dataclass(frozen=True)
class EnvSpec:
    env_id: str
    players: int
    agents_per_player: int
    obs_dim: int
    action_dim: int
    max_episode_steps: int


@dataclass
class JointObservation:
    per_agent_obs: list[np.ndarray]
    action_mask: list[np.ndarray]
    episode_step: int = 0


@dataclass
class StepResult:
    observation: list[JointObservation]
    rewards: list[list[float]]
    done: bool
    info: dict[str, Any] = field(default_factory=dict)


class Env:
    spec: EnvSpec

    def __init__(self):
        self._done = True
        self._t = 0

    def reset(self, seed: int = 0) -> list[JointObservation]:
        self._t = 0
        self._done = False
        self._reset(int(seed) & 0xFFFFFFFFFFFFFFFF)
        return self._observe()

    def step(self, joint_actions: Sequence[Sequence[int]]) -> StepResult:
        if self._done:
            raise SteppedAfterDone(f"{self.spec.env_id}: step() after episode end; call reset()")
        masks = [o.action_mask for o in self._observe()]
        if len(joint_actions) != self.spec.players:
            raise IllegalAction(f"expected actions for {self.spec.players} players, got {len(joint_actions)}")
        acts = []
        for p, per_agent in enumerate(joint_actions):
            if len(per_agent) != self.spec.agents_per_player:
                raise IllegalAction(f"player {p}: expected {self.spec.agents_per_player} actions")
            row = []
            for k, a in enumerate(per_agent):
                a = int(a)
                if not 0 <= a < self.spec.action_dim or not masks[p][k][a]:
                    raise IllegalAction(f"player {p} agent {k}: action {a} is masked")
                row.append(a)
            acts.append(row)
        self._t += 1
        rewards, done, info = self._transition(acts)
        if not done and self._t >= self.spec.max_episode_steps:
            done = True
            info["timeout"] = True
        self._done = done
        return StepResult(self._observe(), rewards, done, info)

    @property
    def done(self) -> bool:
        return self._done

    # subclass hooks
    def _reset(self, seed: int) -> None:
        raise NotImplementedError

    def _transition(self, acts):
        raise NotImplementedError

    def _observe(self) -> list[JointObservation]:
        raise NotImplementedError


class _MatrixGame(Env):
    payoff: np.ndarray  # payoff to player 0; player 1 receives the negation

    def _reset(self, seed):
        pass

    def _transition(self, acts):
        r = float(self.payoff[acts[0][0], acts[1][0]])
        return [[r], [-r]], True, {"team_rewards": [r, -r]}

    def _observe(self):
        n = self.spec.action_dim
        return [
            JointObservation([np.zeros(0)], [np.ones(n, dtype=bool)], self._t)
            for _ in range(self.spec.players)
        ]


class MatrixRPS(_MatrixGame):
    payoff = np.array([[0, -1, 1], [1, 0, -1], [-1, 1, 0]], dtype=float)

    def __init__(self, max_episode_steps: int = 1):
        super().__init__()
        self.spec = EnvSpec("matrix_rps", 2, 1, 0, 3, max_episode_steps)


class MatchingPennies(_MatrixGame):
    payoff = np.array([[1, -1], [-1, 1]], dtype=float)

    def __init__(self, max_episode_steps: int = 1):
        super().__init__()
        self.spec = EnvSpec("matching_pennies", 2, 1, 0, 2, max_episode_steps)


class ChainMDP(Env):
    """Five-state corridor. Moving right into the last state pays +1 and ends the episode."""

    n_states = 5

    def __init__(self, max_episode_steps: int = 20):
        super().__init__()
        self.spec = EnvSpec("chain_mdp", 1, 1, self.n_states, 2, max_episode_steps)
        self.state = 0

    def _reset(self, seed):
        self.state = 0

    def _transition(self, acts):
        a = acts[0][0]
        if a == RIGHT:
            self.state = min(self.state + 1, self.n_states - 1)
        else:
            self.state = max(self.state - 1, 0)
        goal = self.state == self.n_states - 1
        r = 1.0 if goal else 0.0
        return [[r]], goal, {"team_rewards": [r]}

    def _observe(self):
        obs = np.zeros(self.n_states)
        obs[self.state] = 1.0
        return [JointObservation([obs], [np.ones(2, dtype=bool)], self._t)]


class GridCapture(Env):
    """5x5 capture-the-flag for two teams of two agents.

    Each team sees the board in its own frame: home row 0, enemy home row 4,
    and actions UP/DOWN are mirrored for player 1 so a single shared policy can
    play either seat. Opponents are only visible within Chebyshev distance 2 of
    a teammate.
    """

    size = 5
    vision = 2
    capture_reward = 1.0
    touch_bonus = 0.1
    _moves = {NOOP: (0, 0), UP: (-1, 0), DOWN: (1, 0), WEST: (0, -1), EAST: (0, 1)}

    def __init__(self, max_episode_steps: int = 50):
        super().__init__()
        self.spec = EnvSpec("grid_capture", 2, 2, 14, 5, max_episode_steps)
        self.pos = np.zeros((2, 2, 2), dtype=int)  # [player, agent, (row, col)] world frame
        self.carrier = [-1, -1]  # agent of player p carrying the enemy flag
        self.touched = np.zeros((2, 2), dtype=bool)

    def _base(self, p):
        return (0, 2) if p == 0 else (self.size - 1, 2)

    def _reset(self, seed):
        rng = np.random.default_rng(seed)
        for p in range(2):
            row = self._base(p)[0]
            cols = rng.choice([0, 1, 3, 4], size=2, replace=False)
            for k in range(2):
                self.pos[p, k] = (row, cols[k])
        self.carrier = [-1, -1]
        self.touched[:] = False

    def _world_delta(self, p, a):
        dr, dc = self._moves[a]
        return (-dr if p == 1 else dr), dc

    def _mask(self, p, k):
        m = np.zeros(5, dtype=bool)
        r, c = self.pos[p, k]
        for a in range(5):
            dr, dc = self._world_delta(p, a)
            m[a] = 0 <= r + dr < self.size and 0 <= c + dc < self.size
        return m

    def _transition(self, acts):
        for p in range(2):
            for k in range(2):
                dr, dc = self._world_delta(p, acts[p][k])
                self.pos[p, k] += (dr, dc)
        rewards = [[0.0, 0.0], [0.0, 0.0]]
        for p in range(2):
            flag = self._base(1 - p)
            for k in range(2):
                if self.carrier[p] < 0 and tuple(self.pos[p, k]) == flag:
                    self.carrier[p] = k
                    if not self.touched[p, k]:
                        self.touched[p, k] = True
                        rewards[p][k] += self.touch_bonus
        for p in range(2):
            k = self.carrier[p]
            if k >= 0 and any((self.pos[1 - p, j] == self.pos[p, k]).all() for j in range(2)):
                self.carrier[p] = -1  # tagged: flag returns to its base
        captured = [self.carrier[p] >= 0 and tuple(self.pos[p, self.carrier[p]]) == self._base(p) for p in range(2)]
        done = False
        winner = None
        if captured[0] != captured[1]:
            winner = 0 if captured[0] else 1
            for k in range(2):
                rewards[winner][k] += self.capture_reward
                rewards[1 - winner][k] -= self.capture_reward
            done = True
        elif captured[0]:
            done = True  # simultaneous capture is a draw
        team = [sum(rewards[p]) for p in range(2)]
        return rewards, done, {"team_rewards": team, "winner": winner}

    def _local(self, p, rc):
        r, c = rc
        if p == 1:
            r = self.size - 1 - r
        return np.array([r, c], dtype=float) / (self.size - 1)

    def _observe(self):
        out = []
        for p in range(2):
            obs_list, masks = [], []
            for k in range(2):
                mate = 1 - k
                feats = [self._local(p, self.pos[p, k]), self._local(p, self.pos[p, mate])]
                for j in range(2):
                    opp = self.pos[1 - p, j]
                    seen = any(np.abs(self.pos[p, i] - opp).max() <= self.vision for i in range(2))
                    feats.append(np.array([1.0]) if seen else np.array([0.0]))
                    feats.append(self._local(p, opp) if seen else np.zeros(2))
                feats.append(np.array([
                    float(self.carrier[1 - p] >= 0),
                    float(self.carrier[p] == k),
                    float(self.carrier[p] == mate),
                    self._t / self.spec.max_episode_steps,
                ]))
                obs_list.append(np.concatenate(feats))
                masks.append(self._mask(p, k))
            out.append(JointObservation(obs_list, masks, self._t))
        return out


_REGISTRY = {
    "matrix_rps": MatrixRPS,
    "matching_pennies": MatchingPennies,
    "chain_mdp": ChainMDP,
    "grid_capture": GridCapture,
}


def make_env(env_id: str, max_episode_steps: int | None = None) -> Env:
    try:
        cls = _REGISTRY[env_id]
    except KeyError:
        raise ValueError(f"unknown env_id {env_id!r}; choose one of {ENV_IDS}") from None
    return cls() if not max_episode_steps else cls(max_episode_steps=max_episode_steps)


def derive_seed(*parts: int) -> int:
    """Stable 64-bit seed from a tuple of non-negative integers."""
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(2, np.uint32).view(np.uint64)[0])


class VectorEnv:
    """Owns ``n`` copies of one environment and steps them in lockstep.

    Finished copies are reset immediately with a seed derived from
    ``(seed, copy index, episode count)``; the returned result still reports
    ``done=True`` for that copy while its observation is the fresh reset one.
    The terminal observation is kept in ``info["terminal_observation"]``.
    """

    def __init__(self, env_id: str, n: int, seed: int = 0, max_episode_steps: int | None = None):
        self.envs = [make_env(env_id, max_episode_steps) for _ in range(n)]
        self.spec = self.envs[0].spec
        self.seed = int(seed)
        self.episodes = [0] * n
        self._obs: list[list[JointObservation]] = []

    def __len__(self):
        return len(self.envs)

    def reset(self) -> list[list[JointObservation]]:
        self.episodes = [0] * len(self.envs)
        self._obs = [e.reset(derive_seed(self.seed, i, 0)) for i, e in enumerate(self.envs)]
        return self._obs

    @property
    def observations(self) -> list[list[JointObservation]]:
        return self._obs

    def step(self, batched_actions) -> list[StepResult]:
        if len(batched_actions) != len(self.envs):
            raise BatchSizeMismatch(f"{len(batched_actions)} action sets for {len(self.envs)} environments")
        results = []
        for i, (env, acts) in enumerate(zip(self.envs, batched_actions)):
            res = env.step(acts)
            if res.done:
                self.episodes[i] += 1
                res.info["terminal_observation"] = res.observation
                res.observation = env.reset(derive_seed(self.seed, i, self.episodes[i]))
            self._obs[i] = res.observation
            results.append(res)
        return results


vector_step = VectorEnv.step
