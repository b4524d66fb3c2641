import random
import threading
import time

import numpy as np
import pytest

from ddrl.coord import (AllreduceCoordinator, Applied, Dropped, GradientCoordinator, InferenceBatcher, ParameterStore,
                        Pending, Queued, ThreadedInferenceBatcher, TrajectoryCoordinator, allreduce_apply,
                        central_inference, fetch, lag_stats, publish, submit_gradient, submit_trajectory)
from ddrl.errors import (InferenceTimeout, MixedVersions, QueueFull, ShapeMismatch, UnknownPlayer, VersionRegression,
                         WaitTimeout)
from ddrl.learn import Trajectory, Transition
from ddrl.policy import Arch, GradientUpdate, PolicyParameters, apply_gradient, infer, init_params
from ddrl.runtime.config import ExperimentConfig
from ddrl.runtime.experiment import Experiment

ARCH = Arch("linear", 3, 2)


def _store(seed=0):
    store = ParameterStore()
    store.register(init_params(ARCH, seed))
    return store


def _grad(rng, base, pid="a", n=1):
    return GradientUpdate(rng.normal(size=ARCH.size), base, n, pid)


def test_publish_and_fetch():
    store = _store()
    p1, v = fetch(store, "p0")
    assert v == 1
    p2 = p1.with_values(p1.values + 1)
    assert publish(store, "p0", p2) == 2
    assert fetch(store, "p0")[1] == 2
    with pytest.raises(VersionRegression):
        publish(store, "p0", p2)
    with pytest.raises(UnknownPlayer):
        fetch(store, "nobody")
    with pytest.raises(WaitTimeout):
        fetch(store, "p0", 3, timeout=0.01)


def test_wait_for_resolves_on_publish():
    store = _store()
    got = []
    t = threading.Thread(target=lambda: got.append(fetch(store, "p0", 3)[1]))
    t.start()
    p, _ = fetch(store, "p0")
    p = p.with_values(p.values)
    publish(store, "p0", p)
    time.sleep(0.02)
    assert not got
    publish(store, "p0", p.with_values(p.values))
    t.join(5)
    assert got == [3]


def test_no_torn_reads_under_concurrent_publish():
    store = _store()
    valid = {1: fetch(store, "p0")[0].checksum()}
    lock = threading.Lock()
    bad, seen = [], set()
    stop = threading.Event()

    def reader():
        while not stop.is_set():
            p, v = fetch(store, "p0")
            c = p.checksum()
            with lock:
                if valid.get(v) != c or p.version != v:
                    bad.append(v)
                seen.add(v)

    readers = [threading.Thread(target=reader) for _ in range(16)]
    for r in readers:
        r.start()
    p = fetch(store, "p0")[0]
    for k in range(200):
        p = p.with_values(np.full(ARCH.size, float(k)))
        with lock:
            valid[p.version] = p.checksum()
        publish(store, "p0", p)
    stop.set()
    for r in readers:
        r.join()
    assert not bad and len(seen) > 1


def test_async_gradient_applies_immediately_and_drops_stale():
    rng = np.random.default_rng(0)
    store = _store()
    coord = GradientCoordinator(store, "p0", "async_gradient", 2)
    assert submit_gradient(coord, _grad(rng, 1)) == Applied(2)
    strict = GradientCoordinator(store, "p0", "async_gradient", 2, max_staleness=0)
    assert strict.submit_gradient(_grad(rng, 1)) == Dropped("stale")
    with pytest.raises(ShapeMismatch):
        coord.submit_gradient(GradientUpdate(np.zeros(2), 2, 1))


def test_barrier_publishes_exact_mean_after_last_arrival():
    rng = np.random.default_rng(1)
    store = _store()
    start = fetch(store, "p0")[0]
    coord = GradientCoordinator(store, "p0", "sync_barrier", 4, learning_rate=0.5)
    grads = [_grad(rng, 1, f"actor-{i}", n=i + 1) for i in range(4)]
    for g in grads[:3]:
        assert coord.submit_gradient(g) == Pending(1)
        assert store.version("p0") == 1
    assert coord.submit_gradient(grads[3]) == Applied(2)
    mean = np.zeros(ARCH.size)
    for g in sorted(grads, key=lambda u: u.producer_id):
        mean += g.grad / g.sample_count
    mean /= 4
    assert coord.applied_means[0].grad.tobytes() == mean.tobytes()
    want = apply_gradient(start, GradientUpdate(mean, 1, 1), 0.5)
    assert fetch(store, "p0")[0].values.tobytes() == want.values.tobytes()
    assert lag_stats(coord).max == 0


def test_quorum_three_of_four():
    rng = np.random.default_rng(2)
    store = _store()
    coord = GradientCoordinator(store, "p0", "sync_quorum", 4, quorum_fraction=0.75)
    out = [coord.submit_gradient(_grad(rng, 1, f"actor-{i}")) for i in range(4)]
    assert out == [Pending(1), Pending(1), Applied(2), Dropped("late")]


@pytest.mark.parametrize("kind,fraction", [("sync_barrier", 1.0), ("sync_quorum", 0.5)])
def test_barrier_and_quorum_under_random_schedules(kind, fraction):
    store = _store()
    n, epochs = 6, 15
    coord = GradientCoordinator(store, "p0", kind, n, quorum_fraction=fraction)
    results = {i: [] for i in range(n)}
    errors = []

    def actor(i):
        r = random.Random(i)
        try:
            for _ in range(epochs):
                _, v = fetch(store, "p0")
                time.sleep(r.random() * 0.002)
                res = coord.submit_gradient(GradientUpdate(np.full(ARCH.size, float(i)), v, 1, f"actor-{i}"))
                results[i].append(res)
                if isinstance(res, Pending):
                    fetch(store, "p0", v + 1, timeout=0.5)
        except WaitTimeout:
            pass  # peers finished their epochs; the last partial epoch never closes
        except Exception as exc:  # noqa: BLE001
            errors.append(exc)

    threads = [threading.Thread(target=actor, args=(i,)) for i in range(n)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
    applied = [r for rs in results.values() for r in rs if isinstance(r, Applied)]
    assert sorted(a.version for a in applied) == list(range(2, store.version("p0") + 1))
    assert lag_stats(coord).max == 0
    need = coord.required
    assert all(len(set(u.producer_id for u in coord.consumed[k:k + need])) == need
               for k in range(0, len(coord.consumed), need))


def test_trajectory_queue():
    store = _store()
    coord = TrajectoryCoordinator(store, "p0", capacity=8, batch_size=2, max_staleness=1)
    traj = Trajectory([Transition(np.ones(3), 0, 1.0, np.ones(3), True, np.log(0.5), 0.0, 1)])
    assert submit_trajectory(coord, traj) == Queued(1)
    assert coord.consume(lambda p, b: GradientUpdate(np.zeros(ARCH.size), p.version, 1)) is None
    submit_trajectory(coord, traj)
    assert coord.consume(lambda p, b: GradientUpdate(np.zeros(ARCH.size), p.version, 1)) == 2
    p = fetch(store, "p0")[0]
    publish(store, "p0", p.with_values(p.values))
    assert coord.submit_trajectory(traj) == Dropped("stale")
    fresh = Trajectory([Transition(np.ones(3), 0, 1.0, np.ones(3), True, 0.0, 0.0, 3)])
    for _ in range(8):
        coord.submit_trajectory(fresh)
    with pytest.raises(QueueFull):
        coord.submit_trajectory(fresh)


def test_inference_batcher_single_call_for_three_requests():
    store = _store()
    clock = [0.0]
    b = InferenceBatcher(store, batch_max=3, timeout=1.0, clock=lambda: clock[0])
    for i in range(3):
        b.submit("p0", np.ones(3) * i, [True, True], 0.3)
    assert b.due()
    out = b.flush()
    assert b.batch_calls == 1 and b.batch_sizes == [3] and len(out) == 3


def test_inference_batcher_timeout_flush():
    store = _store()
    clock = [0.0]
    b = InferenceBatcher(store, batch_max=8, timeout=1.0, clock=lambda: clock[0])
    b.submit("p0", np.ones(3), [True, True], 0.3)
    assert not b.due()
    clock[0] = 1.0
    assert b.due() and len(b.flush()) == 1 and b.batch_sizes == [1]


def test_threaded_central_inference_matches_local_path():
    store = _store(4)
    batcher = ThreadedInferenceBatcher(store, batch_max=4, timeout=0.01)
    try:
        obs = np.array([0.2, -1.0, 0.5])
        a, lp, v = central_inference(batcher, ("p0", obs, [True, True]), np.random.default_rng(9), timeout=5)
        la, llp, lv, _ = infer(fetch(store, "p0")[0], obs, [True, True], np.random.default_rng(9))
        assert (a, lp, v) == (la, llp, lv)
        assert batcher.core.batch_sizes == [1]
    finally:
        batcher.shutdown()
    with pytest.raises(InferenceTimeout):
        central_inference(batcher, ("p0", obs, [True, True]), np.random.default_rng(0))


def test_threaded_batcher_groups_concurrent_requests():
    store = _store()
    batcher = ThreadedInferenceBatcher(store, batch_max=3, timeout=5.0)
    out = []
    threads = [threading.Thread(target=lambda i=i: out.append(
        batcher.request("p0", np.ones(3), [True, True], np.random.default_rng(i), timeout=10))) for i in range(3)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    batcher.shutdown()
    assert len(out) == 3 and batcher.core.batch_calls == 1


def test_allreduce_examples():
    rng = np.random.default_rng(5)
    gs = [_grad(rng, 1, f"u{i}") for i in range(4)]
    units = [(g, i) for i, g in enumerate(gs)]
    np.testing.assert_allclose(allreduce_apply(units, 0.0).grad, np.mean([g.grad for g in gs], axis=0))
    slow = [(gs[0], 0), (gs[1], 1), (gs[2], 3), (gs[3], 2)]  # unit 2 arrives last
    np.testing.assert_allclose(allreduce_apply(slow, 0.25).grad, np.mean([gs[0].grad, gs[1].grad, gs[3].grad], axis=0))
    with pytest.raises(MixedVersions):
        allreduce_apply([(gs[0], 0), (_grad(rng, 2), 1)], 0.0)


def test_allreduce_coordinator_drops_straggler():
    rng = np.random.default_rng(6)
    store = _store()
    coord = AllreduceCoordinator(store, "p0", 4, drop_fraction=0.25)
    out = [coord.submit_gradient(_grad(rng, 1, f"u{i}")) for i in range(4)]
    assert out == [Pending(1), Pending(1), Applied(2), Dropped("late")]


def test_lag_stats_window():
    store = _store()
    coord = GradientCoordinator(store, "p0", "async_gradient", 1)
    rng = np.random.default_rng(7)
    coord.submit_gradient(_grad(rng, 1))
    coord.submit_gradient(_grad(rng, 1))
    s = lag_stats(coord)
    assert (s.count, s.min, s.max, s.histogram) == (2, 0, 1, {0: 1, 1: 1})
    assert lag_stats(coord, window=0).count == 0


def _parameter_sequence(kind):
    cfg = ExperimentConfig().replace(**{"topology.kind": kind, "topology.actor_count": 1,
                                        "topology.max_staleness": 0, "run.frames": 3000, "run.eval_episodes": 0})
    exp = Experiment(cfg)
    seq = []
    exp.store.subscribe(lambda pid, p: seq.append((p.version, p.checksum())))
    exp.run()
    return seq


def test_single_actor_async_gradient_equals_barrier():
    a, b = _parameter_sequence("async_gradient"), _parameter_sequence("sync_barrier")
    assert len(a) > 10 and a == b
