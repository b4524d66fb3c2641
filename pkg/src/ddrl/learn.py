"""Returns, V-trace, actor-critic and dual-clip PPO gradients, tabular Q-learning, priorities.

Every function here is pure.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from .errors import (EmptyBatch, EmptyTrajectory, InvalidDualClip, NonFiniteRatio,
                     ShapeMismatch, UnknownState)
from .policy import GradientUpdate, PolicyParameters, backward, forward, masked_log_softmax

PRIORITY_FLOOR = 1e-3


@dataclass
class Transition:
    obs: np.ndarray
    action: int
    reward: float
    next_obs: np.ndarray
    done: bool
    behavior_log_prob: float = 0.0
    value_estimate: float = 0.0
    param_version: int = 1
    agent_id: int = 0
    player_id: str = "p0"
    mask: np.ndarray | None = None
    step: int = 0


@dataclass
class Trajectory:
    transitions: list[Transition]
    bootstrap_value: float = 0.0
    # env frames attributed to this trajectory for throughput accounting
    frames: int | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.transitions)

    @property
    def terminal(self) -> bool:
        return bool(self.transitions) and self.transitions[-1].done

    @property
    def player_id(self) -> str:
        return self.transitions[0].player_id

    @property
    def agent_id(self) -> int:
        return self.transitions[0].agent_id

    @property
    def param_version(self) -> int:
        return min(t.param_version for t in self.transitions)

    @property
    def frame_count(self) -> int:
        return len(self.transitions) if self.frames is None else self.frames

    def rewards(self) -> np.ndarray:
        return np.array([t.reward for t in self.transitions], dtype=np.float64)

    def behavior_log_probs(self) -> np.ndarray:
        return np.array([t.behavior_log_prob for t in self.transitions], dtype=np.float64)


@dataclass
class Batch:
    """Flat training rows. ``advantages=None`` means ``R - V`` under the current parameters."""

    obs: np.ndarray
    masks: np.ndarray
    actions: np.ndarray
    returns: np.ndarray
    behavior_log_probs: np.ndarray
    advantages: np.ndarray | None = None

    def __len__(self):
        return len(self.actions)


def _check_traj(traj: Trajectory):
    if not traj.transitions:
        raise EmptyTrajectory("trajectory has no transitions")


def nstep_returns(traj: Trajectory, gamma: float) -> np.ndarray:
    _check_traj(traj)
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    rewards = traj.rewards()
    out = np.empty_like(rewards)
    acc = 0.0 if traj.terminal else float(traj.bootstrap_value)
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def vtrace_targets(traj: Trajectory, target_log_probs, gamma: float, rho_bar: float = 1.0,
                   c_bar: float = 1.0, values=None, bootstrap_value: float | None = None):
    """V-trace value targets and policy-gradient advantages.

    ``values`` defaults to the behaviour-time value estimates stored in the
    trajectory; learners pass their own current estimates.
    """
    _check_traj(traj)
    if not rho_bar >= c_bar > 0:
        raise ValueError("need rho_bar >= c_bar > 0")
    n = len(traj)
    target = np.asarray(target_log_probs, dtype=np.float64)
    if target.shape != (n,):
        raise ShapeMismatch(f"{target.size} target log-probs for {n} transitions")
    V = np.array([t.value_estimate for t in traj.transitions]) if values is None else np.asarray(values, dtype=np.float64)
    if V.shape != (n,):
        raise ShapeMismatch(f"{V.size} values for {n} transitions")
    with np.errstate(invalid="ignore", over="ignore"):
        log_ratio = target - traj.behavior_log_probs()
        ratio = np.exp(log_ratio)
    if np.isnan(ratio).any() or np.isposinf(log_ratio).any():
        raise NonFiniteRatio("importance ratio is not finite")
    rho = np.minimum(rho_bar, ratio)
    c = np.minimum(c_bar, ratio)
    boot = 0.0 if traj.terminal else float(traj.bootstrap_value if bootstrap_value is None else bootstrap_value)
    next_v = np.append(V[1:], boot)
    r = traj.rewards()
    delta = rho * (r + gamma * next_v - V)
    vs = np.empty(n)
    acc = 0.0  # v_{t+1} - V_{t+1}
    for t in range(n - 1, -1, -1):
        acc = delta[t] + gamma * c[t] * acc
        vs[t] = V[t] + acc
    vs_next = np.append(vs[1:], boot)
    pg_adv = rho * (r + gamma * vs_next - V)
    return vs, pg_adv


# --------------------------------------------------------------------- batches

def make_batch(trajectories: Sequence[Trajectory], gamma: float, n_actions: int,
               returns: Sequence[np.ndarray] | None = None, advantages: Sequence[np.ndarray] | None = None) -> Batch:
    if not trajectories:
        raise EmptyBatch("no trajectories")
    rows = [t for traj in trajectories for t in traj.transitions]
    if not rows:
        raise EmptyBatch("no transitions")
    obs = np.stack([np.asarray(t.obs, dtype=np.float64) for t in rows])
    masks = np.stack([np.ones(n_actions, dtype=bool) if t.mask is None else np.asarray(t.mask, dtype=bool) for t in rows])
    R = np.concatenate(returns) if returns is not None else np.concatenate([nstep_returns(tr, gamma) for tr in trajectories])
    A = np.concatenate(advantages) if advantages is not None else None
    return Batch(obs, masks, np.array([t.action for t in rows], dtype=int), R,
                 np.array([t.behavior_log_prob for t in rows]), A)


def _as_batch(batch, gamma, n_actions) -> Batch:
    if isinstance(batch, Batch):
        if len(batch) == 0:
            raise EmptyBatch("empty batch")
        return batch
    return make_batch(list(batch), gamma, n_actions)


def _heads(arch, values, batch: Batch):
    logits, V, cache = forward(arch, values, batch.obs)
    logp = masked_log_softmax(logits, batch.masks)
    probs = np.where(batch.masks, np.exp(logp), 0.0)
    plogp = np.where(batch.masks, probs * np.where(batch.masks, logp, 0.0), 0.0)
    entropy = -plogp.sum(axis=1)
    return logp, probs, entropy, V, cache


def _advantages(batch: Batch, V: np.ndarray) -> np.ndarray:
    return batch.returns - V if batch.advantages is None else batch.advantages


def _grad_from_heads(arch, values, batch, probs, logp, entropy, V, cache, pg_coef, value_coef, entropy_coef):
    """Per-sample sums: d/dlogits of [-pg_coef * log pi(a) + vc (R-V)^2 - ec H]."""
    n = len(batch)
    onehot = np.zeros_like(probs)
    onehot[np.arange(n), batch.actions] = 1.0
    safe_logp = np.where(batch.masks, logp, 0.0)
    dlogits = -pg_coef[:, None] * (onehot - probs)
    dlogits += entropy_coef * probs * (safe_logp + entropy[:, None])
    dvalue = -2.0 * value_coef * (batch.returns - V)
    return backward(arch, values, cache, dlogits, dvalue)


def a2c_loss(arch, values, batch: Batch, value_coef: float, entropy_coef: float) -> float:
    """Mean actor-critic loss at ``values`` (advantages must be fixed in ``batch``)."""
    logp, _, entropy, V, _ = _heads(arch, values, batch)
    lp_a = logp[np.arange(len(batch)), batch.actions]
    adv = batch.advantages
    return float(np.mean(-lp_a * adv + value_coef * (batch.returns - V) ** 2 - entropy_coef * entropy))


def a2c_gradient(params: PolicyParameters, batch, gamma: float = 0.99, value_coef: float = 0.5,
                 entropy_coef: float = 0.0, producer_id: str = "") -> GradientUpdate:
    """Actor-critic gradient; ``grad / sample_count`` is the gradient of :func:`a2c_loss`."""
    batch = _as_batch(batch, gamma, params.arch.n_actions)
    values = params.values.astype(np.float64)
    logp, probs, entropy, V, cache = _heads(params.arch, values, batch)
    adv = _advantages(batch, V)
    grad = _grad_from_heads(params.arch, values, batch, probs, logp, entropy, V, cache, adv, value_coef, entropy_coef)
    return GradientUpdate(grad, params.version, len(batch), producer_id)


def _ppo_terms(logp_a, behavior, adv, clip_eps, dual_clip_c):
    ratio = np.exp(logp_a - behavior)
    surr1 = ratio * adv
    surr2 = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    clipped = np.minimum(surr1, surr2)
    obj = np.where(adv < 0, np.maximum(clipped, dual_clip_c * adv), clipped)
    in_range = (ratio >= 1.0 - clip_eps) & (ratio <= 1.0 + clip_eps)
    live = (surr1 <= surr2) | in_range
    live &= ~((adv < 0) & (dual_clip_c * adv > clipped))
    # d obj / d log pi(a)
    dobj = np.where(live, surr1, 0.0)
    return obj, dobj


def ppo_objective(logp_a, behavior_log_probs, advantages, clip_eps: float, dual_clip_c: float) -> np.ndarray:
    """Per-sample dual-clip surrogate objective."""
    if dual_clip_c <= 1:
        raise InvalidDualClip(f"dual_clip_c must exceed 1, got {dual_clip_c}")
    obj, _ = _ppo_terms(np.asarray(logp_a, float), np.asarray(behavior_log_probs, float),
                        np.asarray(advantages, float), clip_eps, dual_clip_c)
    return obj


def ppo_loss(arch, values, batch: Batch, clip_eps, dual_clip_c, value_coef, entropy_coef) -> float:
    logp, _, entropy, V, _ = _heads(arch, values, batch)
    lp_a = logp[np.arange(len(batch)), batch.actions]
    obj = ppo_objective(lp_a, batch.behavior_log_probs, batch.advantages, clip_eps, dual_clip_c)
    return float(np.mean(-obj + value_coef * (batch.returns - V) ** 2 - entropy_coef * entropy))


def ppo_dualclip_gradient(params: PolicyParameters, batch, clip_eps: float = 0.2, dual_clip_c: float = 3.0,
                          gamma: float = 0.99, value_coef: float = 0.5, entropy_coef: float = 0.0,
                          producer_id: str = "") -> GradientUpdate:
    if dual_clip_c <= 1:
        raise InvalidDualClip(f"dual_clip_c must exceed 1, got {dual_clip_c}")
    batch = _as_batch(batch, gamma, params.arch.n_actions)
    values = params.values.astype(np.float64)
    logp, probs, entropy, V, cache = _heads(params.arch, values, batch)
    adv = _advantages(batch, V)
    lp_a = logp[np.arange(len(batch)), batch.actions]
    _, dobj = _ppo_terms(lp_a, batch.behavior_log_probs, adv, clip_eps, dual_clip_c)
    grad = _grad_from_heads(params.arch, values, batch, probs, logp, entropy, V, cache, dobj, value_coef, entropy_coef)
    return GradientUpdate(grad, params.version, len(batch), producer_id)


# --------------------------------------------------------------------- tabular Q

def state_index(obs, n_states: int) -> int:
    if np.ndim(obs) == 0:
        s = int(obs)
    else:
        o = np.asarray(obs)
        if o.size == 0:
            s = 0
        else:
            nz = np.flatnonzero(o)
            if len(nz) != 1 or o[nz[0]] != 1:
                raise UnknownState(f"observation is not one-hot: {o}")
            s = int(nz[0])
    if not 0 <= s < n_states:
        raise UnknownState(f"state {s} outside table of {n_states} states")
    return s


def q_update(qtable: np.ndarray, transitions: Sequence[Transition], alpha: float, gamma: float) -> np.ndarray:
    q = np.array(qtable, dtype=np.float64, copy=True)
    n_states = q.shape[0]
    for tr in transitions:
        s = state_index(tr.obs, n_states)
        s2 = state_index(tr.next_obs, n_states)
        target = tr.reward + (0.0 if tr.done else gamma * q[s2].max())
        q[s, tr.action] += alpha * (target - q[s, tr.action])
    return q


def td_error(tr: Transition, values, gamma: float) -> float:
    """One-step TD error against a Q-table (2-D), a state-value table (1-D) or a callable ``obs -> V``."""
    if callable(values):
        v_s = float(values(tr.obs))
        v_next = 0.0 if tr.done else float(values(tr.next_obs))
        return tr.reward + gamma * v_next - v_s
    table = np.asarray(values, dtype=np.float64)
    s = state_index(tr.obs, table.shape[0])
    s2 = state_index(tr.next_obs, table.shape[0])
    if table.ndim == 2:
        nxt = 0.0 if tr.done else table[s2].max()
        return tr.reward + gamma * nxt - table[s, tr.action]
    nxt = 0.0 if tr.done else table[s2]
    return tr.reward + gamma * nxt - table[s]


def priority_of(item: Union[Transition, Trajectory], values, gamma: float) -> float:
    """|TD error| plus a floor; trajectories use the mean absolute TD error."""
    if isinstance(item, Trajectory):
        _check_traj(item)
        err = float(np.mean([abs(td_error(t, values, gamma)) for t in item.transitions]))
    else:
        err = abs(td_error(item, values, gamma))
    if not math.isfinite(err):
        err = 0.0
    return err + PRIORITY_FLOOR


def value_iteration(n_states: int, n_actions: int, step: Callable[[int, int], tuple[int, float, bool]],
                    gamma: float, tol: float = 1e-12) -> np.ndarray:
    """Q* for a deterministic MDP given ``step(s, a) -> (s', r, done)``."""
    q = np.zeros((n_states, n_actions))
    while True:
        new = np.empty_like(q)
        for s in range(n_states):
            for a in range(n_actions):
                s2, r, done = step(s, a)
                new[s, a] = r + (0.0 if done else gamma * q[s2].max())
        if np.abs(new - q).max() < tol:
            return new
        q = new
