"""Versioned policy/value models with hand-written backprop.

Three architectures share one flat parameter vector layout convention:

* ``tabular``: per-state logits and values, state = argmax of a one-hot observation
  (a single state when ``obs_dim == 0``).
* ``linear``: ``logits = W x + b``, ``value = v . x + c``.
* ``mlp1``: one tanh hidden layer shared by a policy head and a value head.

Parameters are stored as float32 so the wire encoding round-trips exactly;
all gradient math runs in float64.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (AllActionsMasked, ArchMismatch, CorruptPayload,
                     NonFiniteGradient, ShapeMismatch)

ARCH_TAGS = {"tabular": 0, "linear": 1, "mlp1": 2}
_TAG_ARCH = {v: k for k, v in ARCH_TAGS.items()}
INIT_SCALE = 0.05


@dataclass(frozen=True)
class Arch:
    kind: str
    obs_dim: int
    n_actions: int
    hidden: int = 0

    def __post_init__(self):
        if self.kind not in ARCH_TAGS:
            raise ValueError(f"unknown arch {self.kind!r}")
        if self.kind == "mlp1" and not 0 < self.hidden <= 64:
            raise ValueError("mlp1 needs 0 < hidden <= 64")

    @property
    def tag(self) -> int:
        return ARCH_TAGS[self.kind]

    @property
    def n_states(self) -> int:
        return max(self.obs_dim, 1)

    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        d, a, h = self.obs_dim, self.n_actions, self.hidden
        if self.kind == "tabular":
            return [("logits", (self.n_states, a)), ("values", (self.n_states,))]
        if self.kind == "linear":
            return [("W", (a, d)), ("b", (a,)), ("v", (d,)), ("c", (1,))]
        return [("W1", (h, d)), ("b1", (h,)), ("Wp", (a, h)), ("bp", (a,)), ("wv", (h,)), ("bv", (1,))]

    @property
    def size(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.shapes())

    def unpack(self, values: np.ndarray) -> dict[str, np.ndarray]:
        out, i = {}, 0
        for name, shape in self.shapes():
            n = int(np.prod(shape))
            out[name] = values[i:i + n].reshape(shape)
            i += n
        return out


@dataclass(frozen=True)
class PolicyParameters:
    player_id: str
    arch: Arch
    version: int
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float32)
        if v.ndim != 1 or v.size != self.arch.size:
            raise ShapeMismatch(f"{self.arch.kind} expects {self.arch.size} values, got {v.size}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def checksum(self) -> str:
        return hashlib.sha256(serialize_params(self)).hexdigest()

    def with_values(self, values, version: int | None = None) -> "PolicyParameters":
        return PolicyParameters(self.player_id, self.arch, self.version + 1 if version is None else version, values)


@dataclass(frozen=True)
class ActionDistribution:
    probs: np.ndarray
    log_probs: np.ndarray


@dataclass(frozen=True)
class GradientUpdate:
    """``grad`` is the *sum* of per-sample gradients; ``grad / sample_count`` is the mean."""

    grad: np.ndarray
    base_version: int
    sample_count: int
    producer_id: str = ""

    def __post_init__(self):
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")


def init_params(arch: Arch, seed: int, player_id: str = "p0") -> PolicyParameters:
    rng = np.random.default_rng(seed)
    return PolicyParameters(player_id, arch, 1, rng.uniform(-INIT_SCALE, INIT_SCALE, arch.size))


# --------------------------------------------------------------------- forward / backward

def _as_obs(arch: Arch, obs) -> np.ndarray:
    obs = np.asarray(obs, dtype=np.float64)
    if obs.ndim == 1:
        obs = obs[None, :] if arch.obs_dim else obs.reshape(1, 0)
    if obs.ndim != 2 or obs.shape[1] != arch.obs_dim:
        raise ShapeMismatch(f"observation width {obs.shape[-1]} != arch obs_dim {arch.obs_dim}")
    return obs


def forward(arch: Arch, values: np.ndarray, obs: np.ndarray):
    """Batched forward pass. Returns ``(logits [B, A], value [B], cache)``."""
    p = arch.unpack(np.asarray(values, dtype=np.float64))
    obs = _as_obs(arch, obs)
    if arch.kind == "tabular":
        idx = obs.argmax(axis=1) if arch.obs_dim else np.zeros(len(obs), dtype=int)
        return p["logits"][idx], p["values"][idx], (obs, idx)
    if arch.kind == "linear":
        return obs @ p["W"].T + p["b"], obs @ p["v"] + p["c"][0], (obs,)
    h = np.tanh(obs @ p["W1"].T + p["b1"])
    return h @ p["Wp"].T + p["bp"], h @ p["wv"] + p["bv"][0], (obs, h)


def backward(arch: Arch, values: np.ndarray, cache, dlogits: np.ndarray, dvalue: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(dlogits * logits) + sum(dvalue * value)`` w.r.t. the flat values."""
    p = arch.unpack(np.asarray(values, dtype=np.float64))
    g = {k: np.zeros_like(v) for k, v in p.items()}
    if arch.kind == "tabular":
        _, idx = cache
        np.add.at(g["logits"], idx, dlogits)
        np.add.at(g["values"], idx, dvalue)
    elif arch.kind == "linear":
        (obs,) = cache
        g["W"] = dlogits.T @ obs
        g["b"] = dlogits.sum(axis=0)
        g["v"] = dvalue @ obs
        g["c"] = np.array([dvalue.sum()])
    else:
        obs, h = cache
        g["Wp"] = dlogits.T @ h
        g["bp"] = dlogits.sum(axis=0)
        g["wv"] = dvalue @ h
        g["bv"] = np.array([dvalue.sum()])
        dh = dlogits @ p["Wp"] + np.outer(dvalue, p["wv"])
        dpre = dh * (1.0 - h * h)
        g["W1"] = dpre.T @ obs
        g["b1"] = dpre.sum(axis=0)
    return np.concatenate([g[name].ravel() for name, _ in arch.shapes()])


def masked_log_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax over legal actions; masked entries are ``-inf``."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise AllActionsMasked("every action is masked")
    z = np.where(mask, logits, -np.inf)
    zmax = z.max(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore"):
        lse = zmax + np.log(np.exp(z - zmax).sum(axis=-1, keepdims=True))
    return z - lse


def _masks(arch: Arch, mask, batch: int) -> np.ndarray:
    if mask is None:
        return np.ones((batch, arch.n_actions), dtype=bool)
    m = np.asarray(mask, dtype=bool)
    if m.ndim == 1:
        m = m[None, :]
    if m.shape != (batch, arch.n_actions):
        raise ShapeMismatch(f"mask shape {m.shape} != {(batch, arch.n_actions)}")
    return m


def distribution(params: PolicyParameters, obs, mask=None):
    """Batched action distribution and values without sampling."""
    logits, value, _ = forward(params.arch, params.values, obs)
    m = _masks(params.arch, mask, len(logits))
    logp = masked_log_softmax(logits, m)
    probs = np.where(m, np.exp(logp), 0.0)
    return probs, logp, value


def infer_batch(params: PolicyParameters, obs, masks, uniforms):
    """Sample one action per row by inverse-CDF on the given uniforms in [0, 1)."""
    probs, logp, value = distribution(params, obs, masks)
    cum = np.cumsum(probs, axis=1)
    u = np.asarray(uniforms, dtype=np.float64).reshape(-1, 1) * cum[:, -1:]
    actions = (cum <= u).sum(axis=1)
    actions = np.minimum(actions, probs.shape[1] - 1)
    # guard against landing on a zero-probability tail entry through rounding
    bad = probs[np.arange(len(actions)), actions] == 0
    if bad.any():
        for i in np.flatnonzero(bad):
            actions[i] = np.flatnonzero(probs[i] > 0)[-1]
    rows = np.arange(len(actions))
    return actions, logp[rows, actions], value, probs, logp


def infer(params: PolicyParameters, observation, mask, rng):
    """Sample an action for a single observation.

    ``rng`` is a ``numpy.random.Generator`` (one uniform is consumed) or an
    integer seed. Returns ``(action, log_prob, value, ActionDistribution)``.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    obs = np.asarray(observation, dtype=np.float64).reshape(1, -1) if params.arch.obs_dim else np.zeros((1, 0))
    a, lp, v, probs, logp = infer_batch(params, obs, mask, [rng.random()])
    return int(a[0]), float(lp[0]), float(v[0]), ActionDistribution(probs[0], logp[0])


def apply_gradient(params: PolicyParameters, update: GradientUpdate, learning_rate: float) -> PolicyParameters:
    grad = np.asarray(update.grad, dtype=np.float64)
    if grad.shape != (params.arch.size,):
        raise ShapeMismatch(f"gradient length {grad.size} != {params.arch.size}")
    if not np.isfinite(grad).all():
        raise NonFiniteGradient(f"non-finite gradient from {update.producer_id or 'unknown producer'}")
    new = params.values.astype(np.float64) - learning_rate * grad / update.sample_count
    return params.with_values(new)


# --------------------------------------------------------------------- wire encoding

_HEAD = struct.Struct("<BI")
_TAIL = struct.Struct("<QI")


def serialize_params(params: PolicyParameters) -> bytes:
    pid = params.player_id.encode("utf-8")
    return b"".join([
        _HEAD.pack(params.arch.tag, len(pid)),
        pid,
        _TAIL.pack(params.version, params.values.size),
        params.values.astype("<f4").tobytes(),
    ])


def deserialize_params(data: bytes, arch: Arch) -> PolicyParameters:
    """Decode a parameter snapshot, checking it against the declared ``arch``."""
    data = bytes(data)
    if len(data) < _HEAD.size:
        raise CorruptPayload("truncated parameter header")
    tag, plen = _HEAD.unpack_from(data, 0)
    off = _HEAD.size
    if len(data) < off + plen + _TAIL.size:
        raise CorruptPayload("truncated parameter header")
    try:
        pid = data[off:off + plen].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CorruptPayload("player id is not utf-8") from exc
    off += plen
    version, count = _TAIL.unpack_from(data, off)
    off += _TAIL.size
    if len(data) != off + 4 * count:
        raise CorruptPayload(f"expected {4 * count} value bytes, found {len(data) - off}")
    if tag not in _TAG_ARCH:
        raise CorruptPayload(f"unknown arch tag {tag}")
    if tag != arch.tag or count != arch.size:
        raise ArchMismatch(f"payload is {_TAG_ARCH[tag]}[{count}], expected {arch.kind}[{arch.size}]")
    values = np.frombuffer(data, dtype="<f4", count=count, offset=off)
    return PolicyParameters(pid, arch, version, values)
