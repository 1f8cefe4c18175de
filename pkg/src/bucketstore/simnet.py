"""Synchronous round engine: lockstep message delivery, per-period crash
sets, a failure-detector oracle, and round/congestion metrics.

Messages staged in round r are delivered at the start of round r+1, to
intact servers only, ordered by (sending server, send sequence).  The
engine never invents randomness: every random draw in the simulator comes
from a stream derived from the run seed and a fixed label path, so a
(seed, scenario) pair fully determines every message and report field.
"""

from __future__ import annotations

import hashlib
import math
import random
from functools import cached_property
from dataclasses import dataclass, field
from typing import Optional


class ScenarioError(ValueError):
    """A scenario violates the model (budget, request bounds, parameters)."""


class RoundCapExceeded(RuntimeError):
    """A period used more rounds than its configured cap."""


# ---------------------------------------------------------------------------
# Deterministic seeding helpers

_MASK64 = (1 << 64) - 1


def derive_seed(root_seed: int, *labels) -> int:
    digest = hashlib.sha256(repr((root_seed,) + labels).encode()).digest()
    return int.from_bytes(digest[:16], "big")


def substream(root_seed: int, *labels) -> random.Random:
    """An independent RNG determined by the run seed and a label path."""
    return random.Random(derive_seed(root_seed, *labels))


def placement_hash(seed: int, key: int, n: int) -> int:
    """Seeded pseudorandom map from keys to servers (one per hash function)."""
    x = (seed ^ (key * 0x9E3779B97F4A7C15)) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    x ^= x >> 31
    return x % n


# ---------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class Config:
    """Engine parameters for one run.  ``n`` must equal ``k**d``."""

    n: int
    k: int
    d: int
    p: int = 1  # address width factor: keys use p * ceil(log2 n) bits
    c: int = 0  # pieces per item; 0 means the 18 * key_bits default
    payload_bytes: int = 0  # 0 means the minimum allowed size
    c_bits: int = 1  # payload floor factor
    alpha: float = 73.0  # probing congestion threshold multiplier (alpha * c)
    beta: float = 3.0  # decoding congestion threshold multiplier (beta * c * k)
    kappa_factor: int = 4  # metadata sample count is kappa_factor * ceil(log2 n)
    phase_round_factor: float = 12.0
    write_stage_round_factor: float = 36.0
    period_round_factor: float = 4.0
    congestion_factor: float = 4.0
    redundancy_factor: float = 8.0
    max_message_bytes: int = 0  # 0 disables the size assertion (still logged)
    seed: int = 0

    @cached_property
    def log2n(self) -> int:
        return max(1, math.ceil(math.log2(self.n)))

    @cached_property
    def key_bits(self) -> int:
        return self.p * self.log2n

    @cached_property
    def key_width(self) -> int:
        return -(-self.key_bits // 8)

    @cached_property
    def pieces_per_item(self) -> int:
        return self.c if self.c else 18 * self.key_bits

    @cached_property
    def payload_size(self) -> int:
        floor = -(-(self.c_bits * self.log2n * self.key_bits) // 8)
        return self.payload_bytes if self.payload_bytes else max(16, floor)

    @cached_property
    def kappa(self) -> int:
        return self.kappa_factor * self.log2n

    @property
    def period_round_cap(self) -> int:
        return math.ceil(self.period_round_factor * math.log2(self.n) ** 4)

    @property
    def phase_round_cap(self) -> int:
        return math.ceil(self.phase_round_factor * math.log2(self.n))

    @property
    def write_stage_round_cap(self) -> int:
        return math.ceil(self.write_stage_round_factor * math.log2(self.n) ** 2)

    @property
    def congestion_alarm(self) -> int:
        return math.ceil(self.congestion_factor * math.log2(self.n) ** 3)

    @property
    def default_crash_budget(self) -> int:
        loglog = math.log2(max(2.0, math.log2(self.n)))
        return int(self.n ** (1.0 / loglog) / 72.0)

    def validate(self) -> None:
        if self.k < 2 or self.d < 1:
            raise ScenarioError("need k >= 2 and d >= 1")
        if self.k**self.d != self.n:
            raise ScenarioError(
                "n=%d is not k^d for k=%d, d=%d" % (self.n, self.k, self.d)
            )
        if self.p < 1:
            raise ScenarioError("address width factor p must be >= 1")
        if self.pieces_per_item < 3:
            raise ScenarioError("piece count must be at least 3")
        if self.pieces_per_item > 255:
            raise ScenarioError("piece count above 255 is not supported")
        floor_bits = self.c_bits * self.log2n * self.key_bits
        if self.payload_size * 8 < floor_bits:
            raise ScenarioError(
                "payload of %d bytes is below the %d-bit floor"
                % (self.payload_size, floor_bits)
            )


# ---------------------------------------------------------------------------
# Requests and per-server state


@dataclass(frozen=True)
class Request:
    """One user request, addressed to a server: op is 'write' or 'lookup'."""

    op: str
    server: int
    key: int
    payload: bytes = b""


@dataclass
class ServerState:
    sid: int
    crashed: bool = False
    lookup_keys: list[int] = field(default_factory=list)
    write_items: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# Messages


@dataclass(slots=True)
class Message:
    kind: str
    src: int
    dst: int
    node: Optional[tuple[int, int]]  # destination butterfly node, if node-addressed
    body: tuple
    size: int
    seq: int


HEADER_BYTES = 16  # nominal per-message framing for size accounting


class Net:
    """Staged lockstep delivery with per-round accounting."""

    def __init__(self, is_crashed, round_cap: int):
        self._is_crashed = is_crashed
        self.round_cap = round_cap
        self._staged: list[Message] = []
        self._seq = 0
        self.rounds_used = 0
        self.stage = "idle"
        self.rounds_by_stage: dict[str, int] = {}
        self.max_congestion = 0
        self.congestion_by_stage: dict[str, int] = {}
        self.messages_total = 0
        self.max_message_bytes = 0
        self.dropped_to_crashed = 0

    def set_stage(self, label: str) -> None:
        self.stage = label
        self.rounds_by_stage.setdefault(label, 0)
        self.congestion_by_stage.setdefault(label, 0)

    def send(
        self,
        src: int,
        dst: int,
        kind: str,
        body: tuple = (),
        node: Optional[tuple[int, int]] = None,
        size: int = 0,
    ) -> None:
        self._seq += 1
        self._staged.append(
            Message(kind, src, dst, node, body, size + HEADER_BYTES, self._seq)
        )

    def pending(self) -> bool:
        return bool(self._staged)

    def step(self) -> dict[int, list[Message]]:
        """Advance one round: deliver everything staged in the previous one."""
        self.rounds_used += 1
        self.rounds_by_stage[self.stage] = self.rounds_by_stage.get(self.stage, 0) + 1
        if self.rounds_used > self.round_cap:
            raise RoundCapExceeded(
                "period exceeded its %d-round cap in stage %r"
                % (self.round_cap, self.stage)
            )
        staged, self._staged = self._staged, []
        inboxes: dict[int, list[Message]] = {}
        for m in staged:
            self.messages_total += 1
            if m.size > self.max_message_bytes:
                self.max_message_bytes = m.size
            if self._is_crashed(m.dst):
                self.dropped_to_crashed += 1
                continue
            inboxes.setdefault(m.dst, []).append(m)
        congestion = 0
        for dst, msgs in inboxes.items():
            msgs.sort(key=lambda m: (m.src, m.seq))
            if len(msgs) > congestion:
                congestion = len(msgs)
        if congestion > self.max_congestion:
            self.max_congestion = congestion
        if congestion > self.congestion_by_stage.get(self.stage, 0):
            self.congestion_by_stage[self.stage] = congestion
        return inboxes

    def drain(self, handler) -> int:
        """Run rounds until no messages are in flight.  ``handler`` is called
        as handler(server_id, messages) for every inbox in server order."""
        rounds = 0
        while self.pending():
            inboxes = self.step()
            rounds += 1
            for sid in sorted(inboxes):
                handler(sid, inboxes[sid])
        return rounds


# ---------------------------------------------------------------------------
# Period report


@dataclass
class PeriodReport:
    period: int
    timestamp: int
    crash_set: list[int]
    aborted: Optional[str] = None
    rounds_used: int = 0
    rounds_by_stage: dict = field(default_factory=dict)
    max_congestion: int = 0
    congestion_by_stage: dict = field(default_factory=dict)
    messages_total: int = 0
    max_message_bytes: int = 0
    dropped_to_crashed: int = 0
    write_phases: list = field(default_factory=list)
    outcomes: list = field(default_factory=list)
    events: list = field(default_factory=list)
    safety_violations: list = field(default_factory=list)
    bound_violations: list = field(default_factory=list)
    storage_bytes: int = 0
    plain_bytes: int = 0
    redundancy: float = 0.0
    lemma: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "period": self.period,
            "timestamp": self.timestamp,
            "crash_set": sorted(self.crash_set),
            "aborted": self.aborted,
            "rounds_used": self.rounds_used,
            "rounds_by_stage": dict(sorted(self.rounds_by_stage.items())),
            "max_congestion": self.max_congestion,
            "congestion_by_stage": dict(sorted(self.congestion_by_stage.items())),
            "messages_total": self.messages_total,
            "max_message_bytes": self.max_message_bytes,
            "dropped_to_crashed": self.dropped_to_crashed,
            "write_phases": self.write_phases,
            "outcomes": self.outcomes,
            "events": self.events,
            "safety_violations": self.safety_violations,
            "bound_violations": self.bound_violations,
            "storage_bytes": self.storage_bytes,
            "plain_bytes": self.plain_bytes,
            "redundancy": round(self.redundancy, 6),
            "lemma": self.lemma,
        }
