"""Actor transports.

``LocalBackend`` runs actors inside the coordinator process. ``SocketBackend``
runs each actor in its own OS process connected by one long-lived duplex TCP
connection carrying framed :mod:`wire` messages. Requests are issued when the
simulated actor starts a segment and collected when it resumes, so worker
processes compute concurrently while the schedule stays deterministic.

Worker protocol, per segment::

    coordinator -> worker   ParamPush(slot=1, opponent)      (two-player envs)
    coordinator -> worker   ParamPush(slot=0, frames, mode)  (starts the rollout)
    worker -> coordinator   MatchResult*                      one per finished game
    worker -> coordinator   TrajBatch | GradMsg
"""
from __future__ import annotations

import os
import socket
import subprocess
import sys
import tempfile
from pathlib import Path

from ..errors import ProtocolError, WorkerCrashed
from ..policy import PolicyParameters
from . import wire
from .actor import ActorWorker, RolloutResult, arch_for
from .config import ExperimentConfig, load_config, to_text
from .wire import Tag, WireMessage


class _Done:
    def __init__(self, result: RolloutResult):
        self._result = result

    def result(self) -> RolloutResult:
        return self._result


class LocalBackend:
    def __init__(self, cfg: ExperimentConfig):
        self.workers = [ActorWorker(cfg, i) for i in range(cfg.topology.actor_count)]

    def start(self, index: int, params: PolicyParameters, opponent, steps: int, mode: str, label: str = ""):
        return _Done(self.workers[index].rollout(params, opponent, steps, mode, label))

    def worker(self, index: int) -> ActorWorker:
        return self.workers[index]

    def close(self):
        pass


def result_to_messages(result: RolloutResult) -> list[WireMessage]:
    msgs = [WireMessage(Tag.MatchResult, wire.pack_json({"opponent": result.opponent, "outcome": m}))
            for m in result.matches]
    header = result.header()
    if result.gradient is not None:
        msgs.append(WireMessage(Tag.GradMsg, wire.pack_with_header(header, wire.encode_gradient(result.gradient))))
    else:
        msgs.append(WireMessage(Tag.TrajBatch, wire.pack_with_header(header,
                                                                    wire.encode_trajectories(result.trajectories))))
    return msgs


def messages_to_result(msgs: list[WireMessage]) -> RolloutResult:
    *matches, last = msgs
    header, body = wire.unpack_with_header(last.payload)
    res = RolloutResult(header["worker_id"], header["frames"], episodes=header["episodes"],
                        opponent=header["opponent"], base_version=header["base_version"])
    if last.tag == Tag.GradMsg:
        res.gradient = wire.decode_gradient(body)
    elif last.tag == Tag.TrajBatch:
        res.trajectories = wire.decode_trajectories(body)
    else:
        raise ProtocolError(f"unexpected {last.tag.name} at end of segment")
    res.matches = [wire.unpack_json(m.payload)["outcome"] for m in matches]
    return res


class _Conn:
    def __init__(self, sock: socket.socket, max_frame: int = wire.MAX_FRAME):
        self.sock = sock
        self.decoder = wire.FrameDecoder(max_frame)
        self.pending: list[WireMessage] = []

    def send(self, msg: WireMessage):
        self.sock.sendall(wire.encode(msg))

    def recv(self) -> WireMessage | None:
        return wire.read_message(self.sock, self.decoder, self.pending)


class _Remote:
    def __init__(self, backend: "SocketBackend", index: int):
        self.backend = backend
        self.index = index

    def result(self) -> RolloutResult:
        return self.backend._collect(self.index)


class SocketBackend:
    def __init__(self, cfg: ExperimentConfig, startup_timeout: float = 60.0):
        self.cfg = cfg
        self.arch = arch_for(cfg)
        self.n = cfg.topology.actor_count
        self._tmp = tempfile.TemporaryDirectory(prefix="ddrl-workers-")
        cfg_path = Path(self._tmp.name) / "worker.cfg"
        cfg_path.write_text(to_text(cfg))
        self.listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self.listener.bind(("127.0.0.1", 0))
        self.listener.listen(self.n)
        self.listener.settimeout(startup_timeout)
        host, port = self.listener.getsockname()
        env = dict(os.environ)
        src = str(Path(__file__).resolve().parents[2])
        env["PYTHONPATH"] = src + os.pathsep + env.get("PYTHONPATH", "")
        env = {k: v for k, v in env.items() if not k.startswith("DDRL_")}
        self.procs = [subprocess.Popen([sys.executable, "-m", "ddrl.runtime.worker", host, str(port), str(i),
                                        str(cfg_path)], env=env)
                      for i in range(self.n)]
        self.conns: list[_Conn | None] = [None] * self.n
        self.segments = [0] * self.n
        try:
            for _ in range(self.n):
                sock, _ = self.listener.accept()
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                conn = _Conn(sock)
                hello = conn.recv()
                if hello is None or hello.tag != Tag.ParamRequest:
                    raise ProtocolError("worker handshake must start with ParamRequest")
                idx = int(wire.unpack_json(hello.payload)["index"])
                self.conns[idx] = conn
        except (OSError, ProtocolError) as exc:
            self.close()
            raise WorkerCrashed(f"actor workers failed to start: {exc}") from exc

    def pid(self, index: int) -> int:
        return self.procs[index].pid

    def kill(self, index: int) -> None:
        self.procs[index].kill()
        self.procs[index].wait()

    def start(self, index: int, params: PolicyParameters, opponent, steps: int, mode: str, label: str = ""):
        conn = self.conns[index]
        try:
            if opponent is not None:
                conn.send(WireMessage(Tag.ParamPush, wire.pack_param_push(1, 0, label, opponent)))
            conn.send(WireMessage(Tag.ParamPush, wire.pack_param_push(0, steps, label, params, mode)))
        except OSError as exc:
            raise WorkerCrashed(f"actor-{index} connection lost: {exc}") from exc
        return _Remote(self, index)

    def _collect(self, index: int) -> RolloutResult:
        conn = self.conns[index]
        msgs = []
        try:
            while True:
                msg = conn.recv()
                if msg is None:
                    raise WorkerCrashed(f"actor-{index} closed its connection mid-run "
                                        f"(exit code {self.procs[index].poll()})")
                msgs.append(msg)
                if msg.tag in (Tag.TrajBatch, Tag.GradMsg):
                    break
                if msg.tag != Tag.MatchResult:
                    raise ProtocolError(f"unexpected {msg.tag.name} from actor-{index}")
        except (ConnectionError, OSError) as exc:
            raise WorkerCrashed(f"actor-{index} connection lost: {exc}") from exc
        self.segments[index] += 1
        return messages_to_result(msgs)

    def close(self):
        for conn in self.conns:
            if conn is not None:
                try:
                    conn.send(WireMessage(Tag.Shutdown))
                    conn.sock.close()
                except OSError:
                    pass
        for p in getattr(self, "procs", []):
            try:
                p.wait(timeout=10)
            except subprocess.TimeoutExpired:
                p.kill()
                p.wait()
        self.listener.close()
        self._tmp.cleanup()


def worker_main(host: str, port: int, index: int, config_path: str) -> int:
    cfg = load_config(config_path, environ={})
    actor = ActorWorker(cfg, index)
    sock = socket.create_connection((host, port))
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    conn = _Conn(sock)
    conn.send(WireMessage(Tag.ParamRequest, wire.pack_json({"index": index, "worker_id": actor.worker_id})))
    try:
        return _serve(conn, actor)
    except OSError:  # coordinator went away; nothing left to report to
        return 0
    finally:
        sock.close()


def _serve(conn: _Conn, actor: ActorWorker) -> int:
    opponent = None
    while True:
        msg = conn.recv()
        if msg is None or msg.tag == Tag.Shutdown:
            return 0
        if msg.tag != Tag.ParamPush:
            raise ProtocolError(f"worker got unexpected {msg.tag.name}")
        slot, frames, label, mode, params = wire.unpack_param_push(msg.payload, actor.arch)
        if slot == 1:
            opponent = params
            continue
        result = actor.rollout(params, opponent, frames, mode, label)
        opponent = None
        for out in result_to_messages(result):
            conn.send(out)
