"""Host/site messages, privacy guards and the length-prefixed JSON wire format.

A frame is a 4-byte big-endian length followed by UTF-8 JSON with sorted keys:

    {"body": {...}, "receiver": "site:1", "sender": "host", "seq": 7, "tag": "ScoreVector"}

Numeric payload arrays travel as JSON numbers written with Python's shortest
round-trip ``repr``, so ``decode(encode(m)) == m`` exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, fields
from typing import ClassVar

import numpy as np

from .errors import PrivacyRefusal, ProtocolError

HEADER = struct.Struct(">I")
MAX_FRAME = 1 << 28
HOST = "host"


def site_name(site_id: int) -> str:
    return f"site:{int(site_id)}"


def vec(x) -> tuple[float, ...]:
    return tuple(float(v) for v in np.asarray(x, dtype=float).ravel())


def mat(x) -> tuple[tuple[float, ...], ...]:
    a = np.asarray(x, dtype=float)
    if a.ndim != 2:
        raise ProtocolError(f"expected a matrix, got shape {a.shape}")
    return tuple(tuple(float(v) for v in row) for row in a)


# ---------------------------------------------------------------------------
# Messages
# ---------------------------------------------------------------------------

REGISTRY: dict[str, type] = {}


def _register(cls):
    REGISTRY[cls.__name__] = cls
    return cls


@dataclass(frozen=True)
class Message:
    """Base class. ``value_count`` is the number of numeric scalars carried in
    the payload; ids, iteration numbers and strings are not counted."""

    # Whether the value count enters the closed-form communication cost.
    COUNTED: ClassVar[bool] = False

    def __post_init__(self):
        for f in fields(self):
            object.__setattr__(self, f.name, _normalize(getattr(self, f.name)))

    @property
    def tag(self) -> str:
        return type(self).__name__

    def value_count(self) -> int:
        return 0

    def body(self) -> dict:
        return {f.name: _to_json(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_body(cls, body: dict):
        names = {f.name for f in fields(cls)}
        if set(body) != names:
            raise ProtocolError(f"{cls.__name__}: fields {sorted(body)} != {sorted(names)}")
        return cls(**{k: _from_json(v) for k, v in body.items()})


def _normalize(v):
    # lists and arrays become tuples, dict keys strings, numpy scalars builtins
    if isinstance(v, np.ndarray):
        v = v.tolist()
    if isinstance(v, (list, tuple)):
        return tuple(_normalize(x) for x in v)
    if isinstance(v, dict):
        return {str(k): _normalize(x) for k, x in v.items()}
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.floating):
        return float(v)
    return v


def _to_json(v):
    if isinstance(v, tuple):
        return [_to_json(x) for x in v]
    if isinstance(v, dict):
        return {str(k): _to_json(x) for k, x in v.items()}
    return v


def _from_json(v):
    if isinstance(v, list):
        return tuple(_from_json(x) for x in v)
    if isinstance(v, dict):
        return {k: _from_json(x) for k, x in v.items()}
    return v


@_register
@dataclass(frozen=True)
class Setup(Message):
    """Host -> site: learner definitions (unresolved) and run settings."""

    specs: str
    loss: str
    learning_rate: float
    privacy_level: int
    validation_fraction: float = 0.0
    seed: int = 0
    stratify: bool = False
    ridge_jitter: float = 0.0

    def value_count(self):
        return 5


@_register
@dataclass(frozen=True)
class Hello(Message):
    """Site -> host, unsolicited on connect: identity and local row count."""

    site_id: int
    n_obs: int

    def value_count(self):
        return 1


@_register
@dataclass(frozen=True)
class FeatureStats(Message):
    """min/max per numeric feature and level sets per categorical feature over
    all local rows, plus the response sum and row counts after the local
    train/validation split."""

    ranges: dict
    levels: dict
    sum_y: float
    n: int
    n_val: int

    def value_count(self):
        return 2 * len(self.ranges) + 3


@_register
@dataclass(frozen=True)
class SpecList(Message):
    """Host -> site: resolved learner list and the ordered site roster."""

    specs: str
    sites: tuple

    def value_count(self):
        return sum(2 * len(d.get("knots") or {}) for d in json.loads(self.specs))


@_register
@dataclass(frozen=True)
class InitGram(Message):
    spec_id: int
    gram: tuple

    COUNTED: ClassVar[bool] = True

    def value_count(self):
        return sum(len(r) for r in self.gram)


@_register
@dataclass(frozen=True)
class CalibratedLambdas(Message):
    lambdas: dict

    def value_count(self):
        return sum(len(v) for v in self.lambdas.values())


@_register
@dataclass(frozen=True)
class InterceptBroadcast(Message):
    intercept: float

    def value_count(self):
        return 1


@_register
@dataclass(frozen=True)
class BeginIteration(Message):
    iteration: int


@_register
@dataclass(frozen=True)
class ScoreVector(Message):
    iteration: int
    spec_id: int
    score: tuple

    COUNTED: ClassVar[bool] = True

    def value_count(self):
        return len(self.score)


@_register
@dataclass(frozen=True)
class SharedTheta(Message):
    iteration: int
    spec_id: int
    theta: tuple

    COUNTED: ClassVar[bool] = True

    def value_count(self):
        return len(self.theta)


@_register
@dataclass(frozen=True)
class SseReport(Message):
    """One SSE per learner, shared and site-specific, as ``(spec_id, sse)`` pairs.

    The pairs are counted as one value each; the learner id travels with it.
    """

    iteration: int
    entries: tuple

    COUNTED: ClassVar[bool] = True

    def value_count(self):
        return len(self.entries)


@_register
@dataclass(frozen=True)
class Selection(Message):
    """Index of the winning learner. A shared winner's coefficients already
    reached every site in this iteration's SharedTheta broadcast."""

    iteration: int
    spec_id: int

    COUNTED: ClassVar[bool] = True

    def value_count(self):
        return 1


@_register
@dataclass(frozen=True)
class ValidationRisk(Message):
    """Loss sums and row counts after ``iteration`` updates."""

    iteration: int
    train_loss: float
    n_train: int
    val_loss: float
    n_val: int

    def value_count(self):
        return 4


@_register
@dataclass(frozen=True)
class StopAndFinalize(Message):
    best_iteration: int

    def value_count(self):
        return 1


@_register
@dataclass(frozen=True)
class FinalSiteParams(Message):
    """Own coefficient slice per selected site-specific learner, keyed by id.

    ``withheld`` lists learners whose slices stay at the site because the
    parameter-broadcast guard refused them.
    """

    params: dict
    withheld: tuple = ()

    def value_count(self):
        return sum(len(v) for v in self.params.values())


@_register
@dataclass(frozen=True)
class Abort(Message):
    reason: str
    exit_code: int = 1
    site_id: int = 0


# Messages a site may send; everything else flows host -> site.
SITE_TO_HOST = ("Hello", "FeatureStats", "InitGram", "ScoreVector", "SseReport", "ValidationRisk", "FinalSiteParams", "Abort")


def value_count(message: Message) -> int:
    return message.value_count()


# ---------------------------------------------------------------------------
# Privacy guards
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PrivacyPolicy:
    level: int = 5

    def __post_init__(self):
        if int(self.level) < 1:
            raise ProtocolError(f"privacy level must be >= 1, got {self.level}")


def guard_aggregate(policy: PrivacyPolicy, n_contributing: int, payload_kind: str, site_id=None) -> None:
    """Raise ``PrivacyRefusal`` unless the aggregate summarizes at least ``policy.level`` rows."""
    if n_contributing < 0:
        raise ValueError("n_contributing must be >= 0")
    if n_contributing < policy.level:
        raise PrivacyRefusal(payload_kind, n_contributing, policy.level, site_id)


def guard_parameter_broadcast(d: int, min_site_n: int, spec_id=None, site_id=None) -> None:
    """Refuse coefficient vectors at least as wide as the smallest site."""
    if d >= min_site_n:
        raise PrivacyRefusal(
            "parameters",
            min_site_n,
            d + 1,
            site_id,
            detail=f"learner {spec_id} has {d} coefficients for a site of {min_site_n} rows",
        )


# ---------------------------------------------------------------------------
# Framing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Envelope:
    sender: str
    receiver: str
    seq: int
    message: Message


def frame_json(env: Envelope) -> str:
    doc = {
        "body": env.message.body(),
        "receiver": env.receiver,
        "sender": env.sender,
        "seq": env.seq,
        "tag": env.message.tag,
    }
    try:
        return json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False)
    except ValueError as exc:
        raise ProtocolError(f"{env.message.tag}: non-finite value in payload") from exc


def encode(env: Envelope) -> bytes:
    data = frame_json(env).encode("utf-8")
    return HEADER.pack(len(data)) + data


def parse_frame_json(text: str) -> Envelope:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"malformed frame: {exc}") from None
    if not isinstance(doc, dict) or set(doc) != {"body", "receiver", "sender", "seq", "tag"}:
        raise ProtocolError("malformed frame: bad envelope")
    cls = REGISTRY.get(doc["tag"])
    if cls is None:
        raise ProtocolError(f"unknown message tag {doc['tag']!r}")
    if not isinstance(doc["seq"], int) or doc["seq"] < 0:
        raise ProtocolError(f"bad sequence number {doc['seq']!r}")
    return Envelope(doc["sender"], doc["receiver"], doc["seq"], cls.from_body(doc["body"]))


def decode(data: bytes) -> Envelope:
    if len(data) < HEADER.size:
        raise ProtocolError("truncated frame header")
    (length,) = HEADER.unpack_from(data)
    if length != len(data) - HEADER.size:
        raise ProtocolError(f"frame length {length} does not match payload of {len(data) - HEADER.size} bytes")
    try:
        text = data[HEADER.size :].decode("utf-8")
    except UnicodeDecodeError:
        raise ProtocolError("frame is not UTF-8") from None
    return parse_frame_json(text)


class SequenceTracker:
    """Per-(sender, receiver) counters: outgoing numbers and the next expected incoming one."""

    def __init__(self, me: str):
        self.me = me
        self._out: dict[str, int] = {}
        self._in: dict[str, int] = {}

    def wrap(self, peer: str, message: Message) -> Envelope:
        seq = self._out.get(peer, 0)
        self._out[peer] = seq + 1
        return Envelope(self.me, peer, seq, message)

    def accept(self, env: Envelope) -> Message:
        if env.receiver != self.me:
            raise ProtocolError(f"frame for {env.receiver} delivered to {self.me}")
        want = self._in.get(env.sender, 0)
        if env.seq != want:
            raise ProtocolError(f"sequence error from {env.sender}: got {env.seq}, expected {want}")
        self._in[env.sender] = want + 1
        return env.message
