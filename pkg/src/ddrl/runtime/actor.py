"""Actor-side rollout logic shared by the in-process and socket transports."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..buffer import EpisodeBuffer
from ..env import VectorEnv, derive_seed, make_env
from ..learn import (Trajectory, Transition, a2c_gradient, make_batch, ppo_dualclip_gradient,
                     vtrace_targets)
from ..league import CooperationMode, build_training_batches, policy_obs
from ..policy import Arch, GradientUpdate, PolicyParameters, distribution, infer_batch
from .config import ExperimentConfig

LEARNING_PLAYER = "p0"


def arch_for(cfg: ExperimentConfig) -> Arch:
    spec = make_env(cfg.env.id, cfg.env.max_episode_steps or None).spec
    extra = spec.agents_per_player if spec.agents_per_player > 1 and cfg.league.agent_id_feature else 0
    kind = "tabular" if cfg.topology.kind == "replay_qlearning" else cfg.policy.arch
    return Arch(kind, spec.obs_dim + extra, spec.action_dim, cfg.policy.hidden if kind == "mlp1" else 0)


def cooperation_mode(cfg: ExperimentConfig) -> CooperationMode:
    return CooperationMode(cfg.league.cooperation, cfg.league.shared_policy, cfg.league.agent_id_feature)


@dataclass
class RolloutResult:
    worker_id: str
    frames: int
    trajectories: list[Trajectory] = field(default_factory=list)
    gradient: GradientUpdate | None = None
    episodes: list[dict] = field(default_factory=list)
    matches: list[str] = field(default_factory=list)
    opponent: str = ""
    base_version: int = 0

    def header(self) -> dict:
        return {"worker_id": self.worker_id, "frames": self.frames, "episodes": self.episodes,
                "matches": self.matches, "opponent": self.opponent, "base_version": self.base_version}


def epsilon_greedy(q: np.ndarray, masks: np.ndarray, uniforms: np.ndarray, epsilon: float):
    """Actions, behaviour log-probs and greedy values for rows of Q-values."""
    qm = np.where(masks, q, -np.inf)
    greedy = qm.argmax(axis=1)
    n_legal = masks.sum(axis=1)
    explore = uniforms[:, 0] < epsilon
    # second uniform picks among legal actions
    pick = np.minimum((uniforms[:, 1] * n_legal).astype(int), n_legal - 1)
    legal_idx = [np.flatnonzero(m) for m in masks]
    actions = np.array([legal_idx[i][pick[i]] if explore[i] else greedy[i] for i in range(len(q))])
    probs = epsilon / n_legal + (1 - epsilon) * (actions == greedy)
    return actions, np.log(probs), qm.max(axis=1)


class ActorWorker:
    """Owns one vectorized environment and produces trajectory segments or gradients."""

    def __init__(self, cfg: ExperimentConfig, index: int):
        self.cfg = cfg
        self.index = index
        self.worker_id = f"actor-{index}"
        self.vec = VectorEnv(cfg.env.id, cfg.actor.envs_per_actor, derive_seed(cfg.seed, 1, index),
                             cfg.env.max_episode_steps or None)
        self.vec.reset()
        self.spec = self.vec.spec
        self.arch = arch_for(cfg)
        self.rng = np.random.default_rng(derive_seed(cfg.seed, 2, index))
        self.buffer = EpisodeBuffer()
        m = len(self.vec)
        self.ep_id = [0] * m
        self.ep_t = [0] * m
        self.ep_ret = [0.0] * m
        self.ep_disc = [0.0] * m
        self.opp_ret = [0.0] * m
        self.segment = 0
        self.begin_segment()

    # -- per-step pieces (also used by central inference) ------------------

    def policy_inputs(self, seat: int = 0, arch: Arch | None = None):
        arch = arch or self.arch
        k_agents = self.spec.agents_per_player
        obs, masks = [], []
        for joint in self.vec.observations:
            for k in range(k_agents):
                obs.append(policy_obs(joint[seat].per_agent_obs[k], k, k_agents, arch))
                masks.append(joint[seat].action_mask[k])
        obs = np.stack(obs) if arch.obs_dim else np.zeros((len(masks), 0))
        return obs, np.stack(masks)

    def opponent_actions(self, opponent: PolicyParameters | None):
        if self.spec.players < 2:
            return None
        obs, masks = self.policy_inputs(1, opponent.arch)
        acts, *_ = infer_batch(opponent, obs, masks, self.rng.random(len(masks)))
        return acts

    def advance(self, inputs, masks, actions, logps, values, version: int, player_id: str,
                opp_actions=None) -> None:
        k_agents = self.spec.agents_per_player
        batched = []
        for i in range(len(self.vec)):
            row = [[int(actions[i * k_agents + k]) for k in range(k_agents)]]
            if opp_actions is not None:
                row.append([int(opp_actions[i * k_agents + k]) for k in range(k_agents)])
            batched.append(row)
        results = self.vec.step(batched)
        gamma = self.cfg.train.gamma
        for i, res in enumerate(results):
            nxt_joint = res.info["terminal_observation"] if res.done else res.observation
            for k in range(k_agents):
                j = i * k_agents + k
                nxt = policy_obs(nxt_joint[0].per_agent_obs[k], k, k_agents, self.arch)
                tr = Transition(inputs[j], int(actions[j]), float(res.rewards[0][k]), nxt, bool(res.done),
                                float(logps[j]), float(values[j]), int(version), k, player_id,
                                np.asarray(masks[j], dtype=bool), self.ep_t[i])
                self.buffer.append_step((i, k), tr)
            team = float(sum(res.rewards[0]))
            self.ep_ret[i] += team
            self.ep_disc[i] += gamma ** self.ep_t[i] * team
            if self.spec.players > 1:
                self.opp_ret[i] += float(sum(res.rewards[1]))
            self.ep_t[i] += 1
            if res.done:
                for k in range(k_agents):
                    self._finish(i, k, 0.0)
                self._episodes.append({"return": self.ep_ret[i], "disc_return": self.ep_disc[i],
                                       "length": self.ep_t[i]})
                if self.spec.players > 1:
                    diff = round(self.ep_ret[i] - self.opp_ret[i], 9)
                    self._matches.append("a_win" if diff > 0 else "b_win" if diff < 0 else "draw")
                self.ep_id[i] += 1
                self.ep_t[i] = 0
                self.ep_ret[i] = self.ep_disc[i] = self.opp_ret[i] = 0.0

    def _finish(self, i, k, bootstrap):
        traj = self.buffer.finish((i, k), bootstrap, episode=(self.index, i, self.ep_id[i], self.segment))
        traj.frames = len(traj) if k == 0 else 0

    def begin_segment(self):
        self._episodes: list[dict] = []
        self._matches: list[str] = []

    def end_segment(self, bootstrap_fn) -> tuple[list[Trajectory], list[dict], list[str]]:
        """Cut unfinished episodes, bootstrapping from ``bootstrap_fn(obs_rows) -> values``."""
        k_agents = self.spec.agents_per_player
        open_keys = list(self.buffer.unfinished)
        if open_keys:
            obs, masks = self.policy_inputs(0)
            boot = bootstrap_fn(obs, masks)
            for (i, k) in open_keys:
                self._finish(i, k, float(boot[i * k_agents + k]))
        self.segment += 1
        return self.buffer.drain(), self._episodes, self._matches

    # -- whole segments ------------------------------------------------------

    def rollout(self, params: PolicyParameters, opponent: PolicyParameters | None, steps: int,
                mode: str = "traj", opponent_label: str = "") -> RolloutResult:
        self.begin_segment()
        eps = self.cfg.train.epsilon
        for _ in range(steps):
            obs, masks = self.policy_inputs(0)
            if mode == "replay":
                q, _, _ = _q_rows(params, obs)
                acts, logps, vals = epsilon_greedy(q, masks, self.rng.random((len(masks), 2)), eps)
            else:
                acts, logps, vals, _, _ = infer_batch(params, obs, masks, self.rng.random(len(masks)))
            opp = self.opponent_actions(opponent)
            self.advance(obs, masks, acts, logps, vals, params.version, params.player_id, opp)
        if mode == "replay":
            trajs, eps_, matches = self.end_segment(lambda o, m: _q_rows(params, o)[1])
        else:
            trajs, eps_, matches = self.end_segment(lambda o, m: distribution(params, o, m)[2])
        frames = steps * len(self.vec)
        result = RolloutResult(self.worker_id, frames, trajs, None, eps_, matches, opponent_label, params.version)
        if mode == "grad":
            result.gradient = actor_gradient(self.cfg, params, trajs, self.worker_id)
            result.trajectories = []
        return result


def _q_rows(params: PolicyParameters, obs):
    table = params.arch.unpack(params.values.astype(np.float64))["logits"]
    idx = obs.argmax(axis=1) if params.arch.obs_dim else np.zeros(len(obs), dtype=int)
    q = table[idx]
    return q, q.max(axis=1), idx


def actor_gradient(cfg: ExperimentConfig, params: PolicyParameters, trajs: list[Trajectory],
                   producer_id: str) -> GradientUpdate:
    """On-policy gradient from a fresh segment (gradient-exchange topologies)."""
    t = cfg.train
    batch = _training_batch(cfg, params, trajs)
    if t.algo == "ppo":
        return ppo_dualclip_gradient(params, batch, t.clip_eps, t.dual_clip_c, t.gamma, t.value_coef,
                                     t.entropy_coef, producer_id)
    return a2c_gradient(params, batch, t.gamma, t.value_coef, t.entropy_coef, producer_id)


def _training_batch(cfg, params, trajs):
    spec = make_env(cfg.env.id).spec
    if cfg.league.cooperation == "joint" and spec.agents_per_player > 1:
        batches = build_training_batches(cooperation_mode(cfg), trajs, cfg.train.gamma, params.arch.n_actions,
                                         spec.agents_per_player, params.arch.obs_dim)
        return batches[params.player_id]
    return make_batch(trajs, cfg.train.gamma, params.arch.n_actions)


def learner_gradient(cfg: ExperimentConfig, params: PolicyParameters, trajs: list[Trajectory]) -> GradientUpdate:
    """Learner-side gradient on possibly stale trajectories.

    A2C corrects with V-trace under the learner's current parameters; PPO uses
    n-step returns and relies on the dual-clipped importance ratio.
    """
    t = cfg.train
    spec = make_env(cfg.env.id).spec
    if t.algo == "ppo" or (cfg.league.cooperation == "joint" and spec.agents_per_player > 1):
        return actor_gradient(cfg, params, trajs, "learner-0")
    returns, advs = [], []
    for tr in trajs:
        obs = np.stack([x.obs for x in tr.transitions]) if params.arch.obs_dim else np.zeros((len(tr), 0))
        masks = np.stack([x.mask for x in tr.transitions])
        _, logp, V = distribution(params, obs, masks)
        target = logp[np.arange(len(tr)), [x.action for x in tr.transitions]]
        boot = 0.0
        if not tr.terminal:
            last = tr.transitions[-1].next_obs.reshape(1, -1) if params.arch.obs_dim else np.zeros((1, 0))
            boot = float(distribution(params, last)[2][0])
        vs, adv = vtrace_targets(tr, target, t.gamma, t.rho_bar, t.c_bar, values=V, bootstrap_value=boot)
        returns.append(vs)
        advs.append(adv)
    batch = make_batch(trajs, t.gamma, params.arch.n_actions, returns, advs)
    return a2c_gradient(params, batch, t.gamma, t.value_coef, t.entropy_coef, "learner-0")
