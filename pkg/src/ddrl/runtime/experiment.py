"""End-to-end experiment orchestration on a deterministic simulated clock.

Every actor, the learner and (for ``central_inference``) the batcher are
generator processes on one :class:`~ddrl.runtime.sim.Scheduler`. Computation
happens for real; the clock advances by per-operation base costs plus injected
delays, so throughput and lag figures are reproducible for a given seed.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..buffer import PrioritizedBuffer
from ..coord import (AllreduceCoordinator, Applied, Dropped, GradientCoordinator, InferenceBatcher, LagRecord,
                     ParameterStore, Pending, TrajectoryCoordinator, lag_stats)
from ..env import derive_seed, make_env
from ..errors import BarrierDeadlock, QueueFull, WorkerCrashed
from ..learn import priority_of, q_update, value_iteration
from ..league import League, MatchResult, exploitability, matrix_policy_probs
from ..policy import PolicyParameters, distribution, infer_batch, init_params
from .actor import LEARNING_PLAYER, RolloutResult, _q_rows, arch_for, learner_gradient
from .config import ExperimentConfig, validate
from .sim import DelayHarness, Scheduler
from .transport import LocalBackend, SocketBackend

LEARNER = "learner-0"


@dataclass
class RunResult:
    metrics: list[dict]
    league: League
    summary: dict
    params: PolicyParameters


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> RunResult:
    """Run ``cfg`` to its frame budget. ``out_dir`` (or ``run.out_dir``) receives the artifacts."""
    return Experiment(cfg, out_dir).run()


class Experiment:
    def __init__(self, cfg: ExperimentConfig, out_dir: str | Path | None = None):
        validate(cfg)
        self.cfg = cfg
        out = out_dir if out_dir is not None else cfg.run.out_dir
        self.out_dir = Path(out) if out else None
        self.kind = cfg.topology.kind
        self.n_actors = cfg.topology.actor_count
        self.sim = Scheduler()
        self.wall0 = time.perf_counter()
        self.harness = DelayHarness(cfg.worker_ids(), cfg.seed)
        for worker, op, dist in cfg.delays:
            self.harness.inject_delay(worker, op, dist)
        self.spec = make_env(cfg.env.id, cfg.env.max_episode_steps or None).spec
        self.arch = arch_for(cfg)
        self.pid = LEARNING_PLAYER
        params0 = init_params(self.arch, derive_seed(cfg.seed, 0), self.pid)
        self.store = ParameterStore()
        self.store.register(params0)
        self.league = League(cfg.env.id)
        self.league.add_player(params0)
        self.use_league = cfg.league.enabled or self.spec.players > 1
        self.store.subscribe(self._on_publish)
        self.rng_opp = np.random.default_rng(derive_seed(cfg.seed, 3))

        self.data_event = self.sim.event()
        self.space_event = self.sim.event()
        self.epoch_event = self.sim.event()
        self.batch_event = self.sim.event()

        self.budget = cfg.run.frames
        self.reserved = 0
        self.stepped = 0
        self.consumed = 0
        self.dropped = 0
        self.actor_frames = {f"actor-{i}": 0 for i in range(self.n_actors)}
        self.segments_started = [0] * self.n_actors
        self.exited = 0
        self.updates = 0
        self.trajectories = 0
        self.pending_frames: dict[str, int] = {}
        self.next_snapshot = cfg.league.snapshot_every
        self.t_end = 0.0
        self.t_exhausted: float | None = None
        self.episodes: list[dict] = []

        self.frame_log: list[tuple[float, float, int]] = []
        self.traj_log: list[tuple[float, float, int]] = []
        self.publish_log: list[tuple[float, float]] = []
        self.queue_log: list[tuple[float, float, int]] = []
        self.busy: dict[str, list[tuple[float, float, float, float]]] = {w: [] for w in cfg.worker_ids()}
        self.epoch_starts: list[float] = [0.0]

        sim_clock = lambda: self.sim.now  # noqa: E731
        # lag and publish timestamps follow the reporting clock
        clock = self._wall if cfg.clock == "wall" else sim_clock
        t = cfg.train
        topo = cfg.topology
        if self.kind in ("async_trajectory", "central_inference"):
            self.coord = TrajectoryCoordinator(self.store, self.pid, cfg.actor.queue_capacity, topo.batch_size,
                                               topo.max_staleness, t.lr, clock)
        elif self.kind in ("async_gradient", "sync_barrier", "sync_quorum"):
            self.coord = GradientCoordinator(self.store, self.pid, self.kind, self.n_actors, t.lr,
                                             topo.quorum_fraction, topo.max_staleness, clock)
        elif self.kind == "bundled_allreduce":
            self.coord = AllreduceCoordinator(self.store, self.pid, self.n_actors, topo.drop_fraction, t.lr, clock)
        else:
            self.coord = _ReplayLearner(clock)
            self.replay = PrioritizedBuffer(t.replay_capacity)
            self.rng_replay = np.random.default_rng(derive_seed(cfg.seed, 4))
            self.q = params0.arch.unpack(params0.values.astype(np.float64))["logits"].copy()
            self.replay_credit = 0.0
        if self.kind == "central_inference":
            self.batcher = InferenceBatcher(self.store, topo.inference_batch_max, topo.inference_timeout,
                                           sim_clock)
            self.infer_waiters: dict[int, tuple[list[int], object]] = {}
        self.backend = None

    # -- bookkeeping ---------------------------------------------------------

    def _wall(self) -> float:
        return time.perf_counter() - self.wall0

    def _mark(self):
        self.t_end = max(self.t_end, self.sim.now)

    def _on_publish(self, player_id, params):
        self.league.update_live(params)
        self.publish_log.append((self.sim.now, self._wall()))
        self._mark()

    def _fire(self, name: str, value=None):
        ev = getattr(self, name)
        setattr(self, name, self.sim.event())
        ev.fire(value)

    def _busy(self, worker: str, ticks: float):
        t0, w0 = self.sim.now, self._wall()
        fired = yield ticks
        if self.sim.now > t0:
            self.busy[worker].append((t0, self.sim.now, w0, self._wall()))
        return fired

    def _log_queue(self):
        depth = len(self.coord) if hasattr(self.coord, "__len__") else 0
        if self.kind == "replay_qlearning":
            depth = len(self.replay)
        self.queue_log.append((self.sim.now, self._wall(), depth))

    def _reserve(self) -> int:
        remaining = self.budget - self.reserved
        if remaining <= 0:
            return 0
        envs = self.cfg.actor.envs_per_actor
        steps = min(self.cfg.actor.rollout_length, -(-remaining // envs))
        self.reserved += steps * envs
        if self.reserved >= self.budget and self.t_exhausted is None:
            self.t_exhausted = self.sim.now
        return steps

    def _exhausted(self) -> bool:
        return self.reserved >= self.budget

    def _consume(self, frames: int):
        self.consumed += frames
        self._mark()
        if not self.use_league or self.cfg.league.snapshot_every <= 0:
            return
        while self.consumed >= self.next_snapshot:
            self.league.snapshot_generation(self.pid)
            self.next_snapshot += self.cfg.league.snapshot_every
            self._save_league()

    def _save_league(self):
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self.league.save(self.out_dir / "league.json")

    def _opponent(self):
        if self.spec.players < 2:
            return None, ""
        if not self.league.frozen():  # plain self-play until the first generation is frozen
            side = (self.pid, 0)
        else:
            side = self.league.sample_opponent(self.pid, self.cfg.league.strategy, self.rng_opp,
                                               self.cfg.league.pfsp_exponent)
        return self.league.params(side), f"{side[0]}:{side[1]}"

    def _start(self, i: int, params, opponent, steps: int, mode: str, label: str):
        self.segments_started[i] += 1
        fault = self.cfg.fault
        if fault.kill_worker == f"actor-{i}" and self.segments_started[i] > fault.kill_after_segments:
            if isinstance(self.backend, SocketBackend):
                self.backend.kill(i)
            else:
                raise WorkerCrashed(f"actor-{i} killed by fault injection")
        return self.backend.start(i, params, opponent, steps, mode, label)

    def _segment_done(self, i: int, res: RolloutResult):
        w = f"actor-{i}"
        self.stepped += res.frames
        self.actor_frames[w] += res.frames
        self.frame_log.append((self.sim.now, self._wall(), res.frames))
        for ep in res.episodes:
            self.episodes.append({**ep, "actor": w, "time": self.sim.now})
        if res.matches:
            pid, gen = res.opponent.rsplit(":", 1)
            side = (pid, int(gen))
            for outcome in res.matches:
                self.league.record_match(MatchResult((self.pid, 0), side, outcome, 1,
                                                     self_mirror=side == (self.pid, 0)))
        self._mark()

    def _cost(self, worker: str, op: str, base: float, n: int = 1) -> float:
        return self.harness.cost(self.sim.now, worker, op, base, n)

    def _actor_exit(self):
        self.exited += 1
        self._fire("data_event")
        self._fire("batch_event")

    # -- trajectory actors (async_trajectory, central_inference) -----------

    def _submit_trajectories(self, trajs):
        for tr in trajs:
            while True:
                try:
                    out = self.coord.submit_trajectory(tr)
                except QueueFull:
                    self._fire("data_event")
                    yield self.space_event
                    continue
                break
            if isinstance(out, Dropped):
                self.dropped += tr.frames or 0
            self.trajectories += 1
            self.traj_log.append((self.sim.now, self._wall(), 1))
            self._log_queue()
        self._fire("data_event")

    def _actor_traj(self, i: int):
        w = f"actor-{i}"
        if self.harness.halted(w, "step"):
            yield math.inf
        while steps := self._reserve():
            params, _ = self.store.fetch(self.pid)
            opp, label = self._opponent()
            handle = self._start(i, params, opp, steps, "traj", label)
            yield from self._busy(w, self._cost(w, "step", self.cfg.sim.step_ticks, steps))
            res = handle.result()
            self._segment_done(i, res)
            yield from self._submit_trajectories(res.trajectories)
        self._actor_exit()

    def _actor_central(self, i: int):
        w = f"actor-{i}"
        worker = self.backend.worker(i)
        if self.harness.halted(w, "step"):
            yield math.inf
        while steps := self._reserve():
            opp, label = self._opponent()
            worker.begin_segment()
            for _ in range(steps):
                obs, masks = worker.policy_inputs(0)
                uniforms = worker.rng.random(len(masks))
                tickets = [self.batcher.submit(self.pid, obs[j], masks[j], uniforms[j]) for j in range(len(masks))]
                ev = self.sim.event()
                self.infer_waiters[i] = (tickets, ev)
                self._fire("batch_event")
                answers = yield ev
                acts = np.array([a[0] for a in answers])
                lps = np.array([a[1] for a in answers])
                vals = np.array([a[2] for a in answers])
                opp_acts = worker.opponent_actions(opp)
                yield from self._busy(w, self._cost(w, "step", self.cfg.sim.step_ticks))
                worker.advance(obs, masks, acts, lps, vals, min(a[3] for a in answers), self.pid, opp_acts)
            params, _ = self.store.fetch(self.pid)
            trajs, eps, matches = worker.end_segment(lambda o, m: distribution(params, o, m)[2])
            res = RolloutResult(w, steps * len(worker.vec), trajs, None, eps, matches, label, params.version)
            self._segment_done(i, res)
            yield from self._submit_trajectories(trajs)
        self._actor_exit()

    def _batcher_proc(self):
        while True:
            if not len(self.batcher):
                if self.exited == self.n_actors:
                    return
                yield self.batch_event
                continue
            if not self.batcher.due(self.sim.now):
                yield (self.batcher.deadline - self.sim.now, self.batch_event)
                continue
            answers = self.batcher.flush()
            yield from self._busy("batcher", self._cost("batcher", "infer", self.cfg.sim.infer_ticks))
            for i, (tickets, ev) in sorted(self.infer_waiters.items()):
                if tickets[0] in answers:
                    del self.infer_waiters[i]
                    ev.fire([answers[t] for t in tickets])

    def _traj_learner(self):
        grad_fn = lambda p, b: learner_gradient(self.cfg, p, b)  # noqa: E731
        while True:
            batch = self.coord.take_batch()
            if batch is None:
                if self.exited == self.n_actors:
                    return
                yield self.data_event
                continue
            self._log_queue()
            self._fire("space_event")
            yield from self._busy(LEARNER, self._cost(LEARNER, "update", self.cfg.sim.update_ticks))
            self.coord.learn(batch, grad_fn)
            self.updates += 1
            self._consume(sum(t.frames or 0 for t in batch))

    # -- gradient actors (async_gradient, sync_barrier, sync_quorum, bundled_allreduce)

    def _actor_grad(self, i: int):
        w = f"actor-{i}"
        sim_cfg = self.cfg.sim
        if self.harness.halted(w, "step"):
            yield math.inf
        while steps := self._reserve():
            params, version = self.store.fetch(self.pid)
            opp, label = self._opponent()
            epoch = self.epoch_event
            handle = self._start(i, params, opp, steps, "grad", label)
            cost = self._cost(w, "step", sim_cfg.step_ticks, steps) + self._cost(w, "grad", sim_cfg.grad_ticks)
            if self.kind == "bundled_allreduce":
                fired = yield from self._busy(w, (cost, epoch))
                res = handle.result()
                self._segment_done(i, res)
                if fired[0]:  # epoch closed without this straggler
                    self.dropped += res.frames
                    continue
            else:
                yield from self._busy(w, cost)
                res = handle.result()
                self._segment_done(i, res)
            self.pending_frames[res.gradient.producer_id] = res.frames
            out = self.coord.submit_gradient(res.gradient)
            if isinstance(out, Dropped):
                self.dropped += self.pending_frames.pop(res.gradient.producer_id)
            elif isinstance(out, Applied):
                self.updates += 1
                self._consume(sum(self.pending_frames.values()))
                self.pending_frames.clear()
                yield from self._busy(LEARNER, self._cost(LEARNER, "update", sim_cfg.update_ticks))
                self.epoch_starts.append(self.sim.now)
                self._fire("epoch_event")
            else:
                if not (yield from self._wait_epoch(version)):
                    break
        self._actor_exit()

    def _wait_epoch(self, version: int):
        """Block at the barrier; ``False`` when the run ended while waiting."""
        while self.store.version(self.pid) == version:
            fired, _ = yield (self.cfg.sim.barrier_timeout, self.epoch_event)
            if fired:
                return True
            if self._exhausted():
                return False
            waiting = sorted(self.pending_frames)
            missing = sorted(set(self.actor_frames) - set(waiting))
            raise BarrierDeadlock(
                f"{self.kind}: epoch at version {version} stalled for {self.cfg.sim.barrier_timeout:g} ticks; "
                f"submitted: {', '.join(waiting) or 'none'}; missing: {', '.join(missing)}")
        return True

    # -- replay Q-learning --------------------------------------------------

    def _actor_replay(self, i: int):
        w = f"actor-{i}"
        gamma = self.cfg.train.gamma
        if self.harness.halted(w, "step"):
            yield math.inf
        while steps := self._reserve():
            params, _ = self.store.fetch(self.pid)
            handle = self._start(i, params, None, steps, "replay", "")
            yield from self._busy(w, self._cost(w, "step", self.cfg.sim.step_ticks, steps))
            res = handle.result()
            self._segment_done(i, res)
            n = 0
            for tr in res.trajectories:
                for t in tr.transitions:
                    self.replay.push(t, priority_of(t, self.q, gamma))
                    n += 1
                self.trajectories += 1
                self.traj_log.append((self.sim.now, self._wall(), 1))
            self._consume(res.frames)
            self._log_queue()
            self.replay_credit += n / self.cfg.train.replay_batch
            self._fire("data_event")
        self._actor_exit()

    def _replay_learner(self):
        t = self.cfg.train
        while True:
            if self.replay_credit < 1 or len(self.replay) == 0:
                if self.exited == self.n_actors:
                    return
                yield self.data_event
                continue
            self.replay_credit -= 1
            yield from self._busy(LEARNER, self._cost(LEARNER, "update", self.cfg.sim.update_ticks))
            sample = self.replay.sample(t.replay_batch, self.rng_replay)
            params, current = self.store.fetch(self.pid)
            for _, tr in sample:
                self.coord.lag_records.append(LagRecord(tr.param_version, current, current - tr.param_version,
                                                        self.coord.clock()))
            self.q = q_update(self.q, [tr for _, tr in sample], t.q_alpha, t.gamma)
            ids = [i for i, _ in sample]
            self.replay.update_priorities(ids, [priority_of(tr, self.q, t.gamma) for _, tr in sample])
            parts = params.arch.unpack(params.values.astype(np.float64))
            parts["logits"] = self.q
            flat = np.concatenate([parts[name].ravel() for name, _ in params.arch.shapes()])
            self.store.publish(self.pid, params.with_values(flat, current + 1))
            self.updates += 1

    # -- run -------------------------------------------------------------------

    def _processes(self):
        n = range(self.n_actors)
        if self.kind == "async_trajectory":
            return [self._actor_traj(i) for i in n] + [self._traj_learner()]
        if self.kind == "central_inference":
            return [self._actor_central(i) for i in n] + [self._batcher_proc(), self._traj_learner()]
        if self.kind == "replay_qlearning":
            return [self._actor_replay(i) for i in n] + [self._replay_learner()]
        return [self._actor_grad(i) for i in n]

    def run(self) -> RunResult:
        crash: WorkerCrashed | None = None
        try:
            self.backend = SocketBackend(self.cfg) if self.cfg.transport == "sockets" else LocalBackend(self.cfg)
            for proc in self._processes():
                self.sim.process(proc)
            self.sim.run()
        except WorkerCrashed as exc:
            crash = exc
        finally:
            if self.backend is not None:
                self.backend.close()
        if crash is None and self.use_league and self.cfg.league.eval_games > 0 and len(self.league.frozen()) > 1:
            self.league.evaluation_round("all_pairs", self.cfg.league.eval_games, seed=derive_seed(self.cfg.seed, 7),
                                         gamma=self.cfg.train.gamma)
        metrics = self.metrics()
        summary = self.summary(evaluate=crash is None)
        if crash is not None:
            summary["crashed"] = str(crash)
        self._write(metrics, summary)
        if crash is not None:
            raise WorkerCrashed(str(crash), summary) from crash
        params, _ = self.store.fetch(self.pid)
        return RunResult(metrics, self.league, summary, params)

    def _write(self, metrics, summary):
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self._save_league()
        with open(self.out_dir / "metrics.jsonl", "w") as fh:
            for rec in metrics:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        (self.out_dir / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))

    # -- reporting ---------------------------------------------------------------

    def frames_queued(self) -> int:
        if self.kind in ("async_trajectory", "central_inference"):
            return sum(t.frames or 0 for t in self.coord.queue)
        return sum(self.pending_frames.values())

    def metrics(self) -> list[dict]:
        wall = self.cfg.clock == "wall"
        interval = self.cfg.run.metrics_every_wall if wall else self.cfg.run.metrics_every
        col = 1 if wall else 0
        horizon = self._wall() if wall else self.t_end
        if interval <= 0 or horizon <= 0:
            return []
        n = int(math.ceil(horizon / interval - 1e-12))
        edges = np.arange(1, n + 1) * interval

        def bucket(log, weight=lambda e: 1):
            out = np.zeros(n)
            for e in log:
                k = min(int(e[col] // interval), n - 1)
                out[k] += weight(e)
            return out

        frames = bucket(self.frame_log, lambda e: e[2])
        trajs = bucket(self.traj_log, lambda e: e[2])
        pubs = bucket(self.publish_log)
        lags: list[list[int]] = [[] for _ in range(n)]
        for r in self.coord.lag_records:
            lags[min(int(r.timestamp // interval), n - 1)].append(r.delta)
        out = []
        for k in range(n):
            lo, hi = k * interval, edges[k]
            depth = 0
            for e in self.queue_log:
                if e[col] <= hi:
                    depth = e[2]
            busy = {}
            for worker, spans in self.busy.items():
                cover = sum(max(0.0, min(s[1 + 2 * col], hi) - max(s[2 * col], lo)) for s in spans)
                busy[worker] = cover / interval
            out.append({
                "timestamp": float(hi),
                "clock": "wall" if wall else "simulated",
                "frames_per_second": frames[k] / interval,
                "trajectories_per_second": trajs[k] / interval,
                "learner_updates_per_second": pubs[k] / interval,
                "lag_mean": float(np.mean(lags[k])) if lags[k] else 0.0,
                "lag_max": int(max(lags[k])) if lags[k] else 0,
                "queue_depth": depth,
                "busy_fraction": busy,
            })
        return out

    def summary(self, evaluate: bool = True) -> dict:
        params, version = self.store.fetch(self.pid)
        queued = self.frames_queued()
        lag = lag_stats(self.coord)
        t_end = self.t_end
        t_ex = self.t_exhausted if self.t_exhausted is not None else t_end
        steady = sum(1 for t, _ in self.publish_log if t <= t_ex) / t_ex if t_ex > 0 else 0.0
        epochs = np.diff(self.epoch_starts) if len(self.epoch_starts) > 1 else np.zeros(0)
        out = {
            "kind": self.kind,
            "env": self.cfg.env.id,
            "seed": self.cfg.seed,
            "transport": self.cfg.transport,
            "clock": self.cfg.clock,
            "frames_budget": self.budget,
            "frames_stepped": self.stepped,
            "frames_consumed": self.consumed,
            "frames_queued": queued,
            "frames_dropped": self.dropped,
            "frames_conserved": self.stepped == self.consumed + queued + self.dropped,
            "actor_frames": dict(self.actor_frames),
            "trajectories": self.trajectories,
            "updates": self.updates,
            "final_version": version,
            "final_checksum": params.checksum(),
            "sim_time": t_end,
            "wall_seconds": self._wall(),
            "frames_per_second": self.stepped / t_end if t_end > 0 else 0.0,
            "updates_per_second": self.updates / t_end if t_end > 0 else 0.0,
            "steady_updates_per_second": steady,
            "lag_mean": lag.mean,
            "lag_max": lag.max,
            "lag_count": lag.count,
            "epoch_duration_mean": float(epochs.mean()) if len(epochs) else 0.0,
            "epoch_duration_max": float(epochs.max()) if len(epochs) else 0.0,
            "episodes": len(self.episodes),
            "generations": len(self.league.player(self.pid).generations),
            "matches": len(self.league.matches),
        }
        recent = self.episodes[-100:]
        out["recent_mean_return"] = float(np.mean([e["return"] for e in recent])) if recent else 0.0
        if evaluate and self.cfg.run.eval_episodes > 0:
            out.update(self.evaluate(params))
        return out

    def evaluate(self, params: PolicyParameters) -> dict:
        cfg = self.cfg
        if self.spec.players == 1:
            greedy = self.kind == "replay_qlearning"
            rets = evaluate_policy(cfg.env.id, params, cfg.run.eval_episodes, derive_seed(cfg.seed, 8),
                                   cfg.train.gamma, greedy, cfg.env.max_episode_steps or None)
            res = {"eval_mean_return": float(np.mean([r[0] for r in rets]))}
            if cfg.env.id == "chain_mdp":
                best = optimal_chain_return(cfg.train.gamma)
                res["eval_optimal_fraction"] = float(np.mean([abs(r[1] - best) < 1e-9 for r in rets]))
            return res
        env = make_env(cfg.env.id)
        if hasattr(env, "payoff"):
            return {"exploitability": exploitability(matrix_policy_probs(params), env.payoff)}
        return {}


class _ReplayLearner:
    def __init__(self, clock):
        self.clock = clock
        self.lag_records: list[LagRecord] = []


def optimal_chain_return(gamma: float) -> float:
    env = make_env("chain_mdp")
    n = env.n_states

    def step(s, a):
        s2 = min(s + 1, n - 1) if a == 1 else max(s - 1, 0)
        return s2, float(s2 == n - 1), s2 == n - 1

    return float(value_iteration(n, 2, step, gamma)[0].max())


def evaluate_policy(env_id: str, params: PolicyParameters, episodes: int, seed: int, gamma: float,
                    greedy: bool = False, max_steps: int | None = None) -> list[tuple[float, float, int]]:
    """(return, discounted return, length) of ``episodes`` single-player episodes."""
    env = make_env(env_id, max_steps)
    rng = np.random.default_rng(seed)
    out = []
    for ep in range(episodes):
        joint = env.reset(derive_seed(seed, ep))
        total = disc = 0.0
        t = 0
        while True:
            obs = joint[0].per_agent_obs[0].reshape(1, -1) if params.arch.obs_dim else np.zeros((1, 0))
            mask = joint[0].action_mask[0].reshape(1, -1)
            if greedy:
                q, _, _ = _q_rows(params, obs)
                action = int(np.where(mask[0], q[0], -np.inf).argmax())
            else:
                action = int(infer_batch(params, obs, mask, rng.random(1))[0][0])
            res = env.step([[action]])
            r = float(res.rewards[0][0])
            total += r
            disc += gamma ** t * r
            t += 1
            if res.done:
                break
            joint = res.observation
        out.append((total, disc, t))
    return out
