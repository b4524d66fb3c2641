"""Length-prefixed binary framing and payload codecs.

Frame layout: ``tag: u8 | length: u32 LE | payload[length]``.
"""
from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass

import numpy as np

from ..errors import CorruptPayload, FrameTooLarge, ProtocolError
from ..learn import Trajectory, Transition
from ..policy import Arch, GradientUpdate, PolicyParameters, deserialize_params, serialize_params

MAX_FRAME = 16 * 1024 * 1024
_HEADER = struct.Struct("<BI")


class Tag(enum.IntEnum):
    ParamPush = 1
    ParamRequest = 2
    TrajBatch = 3
    GradMsg = 4
    InferRequest = 5
    InferResponse = 6
    MatchResult = 7
    Shutdown = 8


@dataclass(frozen=True)
class WireMessage:
    tag: Tag
    payload: bytes = b""


def _tag(value: int) -> Tag:
    try:
        return Tag(value)
    except ValueError:
        raise ProtocolError(f"unknown message tag {value}") from None


def encode(msg: WireMessage, max_frame: int = MAX_FRAME) -> bytes:
    tag = _tag(int(msg.tag))
    if len(msg.payload) > max_frame:
        raise FrameTooLarge(f"payload of {len(msg.payload)} bytes exceeds {max_frame}")
    return _HEADER.pack(tag, len(msg.payload)) + bytes(msg.payload)


def decode(data: bytes, max_frame: int = MAX_FRAME) -> WireMessage:
    """Decode exactly one frame."""
    dec = FrameDecoder(max_frame)
    msgs = dec.feed(data)
    if len(msgs) != 1 or dec.buffered:
        raise ProtocolError(f"expected exactly one frame, got {len(msgs)} (+{dec.buffered} trailing bytes)")
    return msgs[0]


class FrameDecoder:
    """Incremental decoder: feed arbitrary chunks, get whole messages back."""

    def __init__(self, max_frame: int = MAX_FRAME):
        self.max_frame = max_frame
        self._buf = bytearray()

    @property
    def buffered(self) -> int:
        return len(self._buf)

    def feed(self, chunk: bytes) -> list[WireMessage]:
        self._buf.extend(chunk)
        out = []
        while True:
            if not self._buf:
                break
            tag = _tag(self._buf[0])
            if len(self._buf) < _HEADER.size:
                break
            _, length = _HEADER.unpack_from(self._buf, 0)
            if length > self.max_frame:
                raise FrameTooLarge(f"frame declares {length} bytes, limit {self.max_frame}")
            end = _HEADER.size + length
            if len(self._buf) < end:
                break
            out.append(WireMessage(tag, bytes(self._buf[_HEADER.size:end])))
            del self._buf[:end]
        return out


def read_message(sock, decoder: FrameDecoder, pending: list) -> WireMessage | None:
    """Block until one message arrives on ``sock``; ``None`` on clean EOF."""
    while not pending:
        chunk = sock.recv(65536)
        if not chunk:
            return None
        pending.extend(decoder.feed(chunk))
    return pending.pop(0)


# --------------------------------------------------------------------- payloads

def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def _unpack_str(data: bytes, off: int) -> tuple[str, int]:
    (n,) = struct.unpack_from("<I", data, off)
    off += 4
    if off + n > len(data):
        raise CorruptPayload("truncated string")
    try:
        return data[off:off + n].decode("utf-8"), off + n
    except UnicodeDecodeError as exc:
        raise CorruptPayload("string is not utf-8") from exc


def pack_param_push(slot: int, frames: int, label: str, params: PolicyParameters, mode: str = "") -> bytes:
    return struct.pack("<BI", slot, frames) + _pack_str(label) + _pack_str(mode) + serialize_params(params)


def unpack_param_push(payload: bytes, arch: Arch):
    if len(payload) < 5:
        raise CorruptPayload("truncated ParamPush")
    try:
        slot, frames = struct.unpack_from("<BI", payload, 0)
        label, off = _unpack_str(payload, 5)
        mode, off = _unpack_str(payload, off)
    except struct.error as exc:
        raise CorruptPayload("truncated ParamPush") from exc
    return slot, frames, label, mode, deserialize_params(payload[off:], arch)


def pack_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True).encode("utf-8")


def unpack_json(payload: bytes):
    try:
        return json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptPayload(f"bad json payload: {exc}") from exc


def _arr(a, dtype) -> bytes:
    return np.ascontiguousarray(a, dtype=dtype).tobytes()


def encode_trajectories(trajs: list[Trajectory]) -> bytes:
    """Binary trajectory batch; floats are float64 so decoding is bit-exact."""
    parts = [struct.pack("<I", len(trajs))]
    for tr in trajs:
        ts = tr.transitions
        n = len(ts)
        d = np.asarray(ts[0].obs).size if n else 0
        a = np.asarray(ts[0].mask).size if n and ts[0].mask is not None else 0
        meta = json.dumps(tr.meta, sort_keys=True, default=list)
        parts += [struct.pack("<dqIII", tr.bootstrap_value, -1 if tr.frames is None else tr.frames, n, d, a),
                  _pack_str(ts[0].player_id if n else ""), _pack_str(meta)]
        if not n:
            continue
        parts += [
            _arr([t.obs for t in ts], "<f8"),
            _arr([t.next_obs for t in ts], "<f8"),
            _arr([t.action for t in ts], "<i4"),
            _arr([t.reward for t in ts], "<f8"),
            _arr([t.done for t in ts], "u1"),
            _arr([t.behavior_log_prob for t in ts], "<f8"),
            _arr([t.value_estimate for t in ts], "<f8"),
            _arr([t.param_version for t in ts], "<u8"),
            _arr([t.agent_id for t in ts], "<i4"),
            _arr([t.step for t in ts], "<i4"),
        ]
        if a:
            parts.append(_arr([t.mask for t in ts], "u1"))
    return b"".join(parts)


def decode_trajectories(data: bytes) -> list[Trajectory]:
    try:
        return _decode_trajectories(bytes(data))
    except (struct.error, ValueError) as exc:
        raise CorruptPayload(f"bad trajectory batch: {exc}") from exc


def _decode_trajectories(data: bytes) -> list[Trajectory]:
    (count,) = struct.unpack_from("<I", data, 0)
    off = 4
    out = []

    def take(dtype, n, shape=None):
        nonlocal off
        size = np.dtype(dtype).itemsize * n
        if off + size > len(data):
            raise ValueError("truncated array")
        arr = np.frombuffer(data, dtype=dtype, count=n, offset=off)
        off += size
        return arr.reshape(shape) if shape else arr

    for _ in range(count):
        boot, frames, n, d, a = struct.unpack_from("<dqIII", data, off)
        off += struct.calcsize("<dqIII")
        pid, off = _unpack_str(data, off)
        meta_s, off = _unpack_str(data, off)
        meta = json.loads(meta_s)
        if "key" in meta and isinstance(meta["key"], list):
            meta["key"] = tuple(meta["key"])
        if "episode" in meta and isinstance(meta["episode"], list):
            meta["episode"] = tuple(meta["episode"])
        ts = []
        if n:
            obs = take("<f8", n * d, (n, d))
            nxt = take("<f8", n * d, (n, d))
            act = take("<i4", n)
            rew = take("<f8", n)
            done = take("u1", n)
            blp = take("<f8", n)
            val = take("<f8", n)
            ver = take("<u8", n)
            agent = take("<i4", n)
            step = take("<i4", n)
            masks = take("u1", n * a, (n, a)).astype(bool) if a else None
            for i in range(n):
                ts.append(Transition(obs[i].copy(), int(act[i]), float(rew[i]), nxt[i].copy(), bool(done[i]),
                                     float(blp[i]), float(val[i]), int(ver[i]), int(agent[i]), pid,
                                     None if masks is None else masks[i].copy(), int(step[i])))
        out.append(Trajectory(ts, boot, None if frames < 0 else int(frames), meta))
    if off != len(data):
        raise ValueError(f"{len(data) - off} trailing bytes")
    return out


def encode_gradient(update: GradientUpdate) -> bytes:
    g = np.asarray(update.grad, dtype="<f8")
    return struct.pack("<QI", update.base_version, update.sample_count) + _pack_str(update.producer_id) \
        + struct.pack("<I", g.size) + g.tobytes()


def decode_gradient(data: bytes) -> GradientUpdate:
    try:
        base, count = struct.unpack_from("<QI", data, 0)
        pid, off = _unpack_str(data, 12)
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        if len(data) != off + 8 * n:
            raise CorruptPayload("gradient length mismatch")
        grad = np.frombuffer(data, dtype="<f8", count=n, offset=off).copy()
        return GradientUpdate(grad, base, count, pid)
    except (struct.error, ValueError) as exc:
        raise CorruptPayload(f"bad gradient payload: {exc}") from exc


def pack_with_header(header: dict, body: bytes) -> bytes:
    h = pack_json(header)
    return struct.pack("<I", len(h)) + h + body


def unpack_with_header(payload: bytes) -> tuple[dict, bytes]:
    if len(payload) < 4:
        raise CorruptPayload("truncated header")
    (n,) = struct.unpack_from("<I", payload, 0)
    if 4 + n > len(payload):
        raise CorruptPayload("truncated header")
    return unpack_json(payload[4:4 + n]), payload[4 + n:]


def pack_infer_request(player_id: str, obs: np.ndarray, mask: np.ndarray, uniform: float) -> bytes:
    obs = np.asarray(obs, dtype="<f8")
    mask = np.asarray(mask, dtype="u1")
    return _pack_str(player_id) + struct.pack("<dII", uniform, obs.size, mask.size) + obs.tobytes() + mask.tobytes()


def unpack_infer_request(payload: bytes):
    try:
        pid, off = _unpack_str(payload, 0)
        u, d, a = struct.unpack_from("<dII", payload, off)
        off += struct.calcsize("<dII")
        if len(payload) != off + 8 * d + a:
            raise CorruptPayload("InferRequest length mismatch")
        obs = np.frombuffer(payload, "<f8", d, off).copy()
        mask = np.frombuffer(payload, "u1", a, off + 8 * d).astype(bool)
    except struct.error as exc:
        raise CorruptPayload("truncated InferRequest") from exc
    return pid, obs, mask, u


def pack_infer_response(action: int, log_prob: float, value: float, version: int) -> bytes:
    return struct.pack("<iddQ", action, log_prob, value, version)


def unpack_infer_response(payload: bytes):
    if len(payload) != struct.calcsize("<iddQ"):
        raise CorruptPayload("InferResponse length mismatch")
    return struct.unpack("<iddQ", payload)
