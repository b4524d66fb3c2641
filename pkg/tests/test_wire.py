import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ddrl.errors import CorruptPayload, FrameTooLarge, ProtocolError
from ddrl.learn import Trajectory, Transition
from ddrl.policy import Arch, GradientUpdate, init_params
from ddrl.runtime import wire
from ddrl.runtime.wire import MAX_FRAME, FrameDecoder, Tag, WireMessage, decode, encode

messages = st.builds(WireMessage, st.sampled_from(list(Tag)), st.binary(max_size=300))


@settings(max_examples=100, deadline=None)
@given(msg=messages)
def test_round_trip_every_tag(msg):
    assert decode(encode(msg)) == msg


def test_frame_layout():
    assert encode(WireMessage(Tag.Shutdown, b"ab")) == bytes([8, 2, 0, 0, 0]) + b"ab"


def test_oversize_frame():
    with pytest.raises(FrameTooLarge):
        encode(WireMessage(Tag.TrajBatch, bytes(17 * 1024 * 1024)))
    header = bytes([3]) + (MAX_FRAME + 1).to_bytes(4, "little")
    with pytest.raises(FrameTooLarge):
        FrameDecoder().feed(header)


def test_bad_tags():
    for bad in (0, 9, 255):
        with pytest.raises(ProtocolError):
            decode(bytes([bad, 0, 0, 0, 0]))
        with pytest.raises(ProtocolError):
            encode(WireMessage(bad, b""))


def test_decode_requires_exactly_one_frame():
    two = encode(WireMessage(Tag.Shutdown)) * 2
    with pytest.raises(ProtocolError):
        decode(two)
    with pytest.raises(ProtocolError):
        decode(encode(WireMessage(Tag.Shutdown, b"xyz"))[:-1])


@settings(max_examples=60, deadline=None)
@given(msgs=st.lists(messages, min_size=1, max_size=6))
def test_split_at_every_position(msgs):
    stream = b"".join(encode(m) for m in msgs)
    for cut in range(len(stream) + 1):
        dec = FrameDecoder()
        out = dec.feed(stream[:cut]) + dec.feed(stream[cut:])
        assert out == msgs and dec.buffered == 0


@settings(max_examples=40, deadline=None)
@given(msgs=st.lists(messages, min_size=1, max_size=5), sizes=st.lists(st.integers(1, 17), min_size=1))
def test_arbitrary_chunking(msgs, sizes):
    stream = b"".join(encode(m) for m in msgs)
    dec, out, i, k = FrameDecoder(), [], 0, 0
    while i < len(stream):
        n = sizes[k % len(sizes)]
        out += dec.feed(stream[i:i + n])
        i, k = i + n, k + 1
    assert out == msgs


@settings(max_examples=300, deadline=None)
@given(data=st.binary(max_size=64))
def test_random_bytes_raise_only_protocol_errors(data):
    try:
        FrameDecoder(max_frame=1024).feed(data)
    except ProtocolError:
        pass


@settings(max_examples=300, deadline=None)
@given(data=st.binary(max_size=96))
def test_payload_codecs_raise_only_corrupt_payload(data):
    arch = Arch("linear", 2, 2)
    for fn in (wire.decode_trajectories, wire.decode_gradient, wire.unpack_json, wire.unpack_with_header,
               wire.unpack_infer_request, wire.unpack_infer_response, lambda d: wire.unpack_param_push(d, arch)):
        try:
            fn(data)
        except CorruptPayload:
            pass


def _traj(rng, n):
    trs = [Transition(rng.normal(size=3), int(rng.integers(2)), float(rng.normal()), rng.normal(size=3), i == n - 1,
                      float(-rng.random()), float(rng.normal()), int(rng.integers(1, 99)), 1, "p7",
                      rng.random(2) < 0.5, i) for i in range(n)]
    return Trajectory(trs, 0.25, n, {"episode": (1, 2, 3, 4)})


def test_trajectory_codec_is_bit_exact():
    rng = np.random.default_rng(0)
    trajs = [_traj(rng, n) for n in (1, 4, 7)]
    back = wire.decode_trajectories(wire.encode_trajectories(trajs))
    for a, b in zip(trajs, back):
        assert (a.bootstrap_value, a.frames, a.meta) == (b.bootstrap_value, b.frames, b.meta)
        for x, y in zip(a.transitions, b.transitions):
            assert x.obs.tobytes() == y.obs.tobytes() and x.mask.tolist() == y.mask.tolist()
            assert (x.action, x.reward, x.done, x.behavior_log_prob, x.param_version, x.step) == \
                (y.action, y.reward, y.done, y.behavior_log_prob, y.param_version, y.step)


def test_gradient_and_param_push_codecs():
    g = GradientUpdate(np.arange(5.0) / 3, 12, 4, "actor-3")
    h = wire.decode_gradient(wire.encode_gradient(g))
    assert h.grad.tobytes() == g.grad.tobytes() and (h.base_version, h.sample_count, h.producer_id) == (12, 4, "actor-3")
    p = init_params(Arch("mlp1", 3, 2, 4), 5)
    slot, frames, label, mode, q = wire.unpack_param_push(wire.pack_param_push(1, 80, "p0:2", p, "grad"), p.arch)
    assert (slot, frames, label, mode) == (1, 80, "p0:2", "grad") and q.checksum() == p.checksum()
    pid, obs, mask, u = wire.unpack_infer_request(wire.pack_infer_request("p0", np.ones(3), [True, False], 0.5))
    assert pid == "p0" and obs.tolist() == [1, 1, 1] and mask.tolist() == [True, False] and u == 0.5
    assert wire.unpack_infer_response(wire.pack_infer_response(2, -0.5, 1.5, 9)) == (2, -0.5, 1.5, 9)
