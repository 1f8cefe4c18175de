"""The zone/bucket tree over key bits and per-bucket encoded storage.

Bucket addressing: the bucket for key ``x`` at zone ``z`` is identified by
the z low-order bits of ``x`` (bit i of the key decides the child taken at
zone i).  Zone 0 is the single root bucket; buckets are materialized
lazily, so an empty bucket has no state at all.

Per-server storage for one bucket is a stack of d+1 level blocks: the
level-0 data block (the server's concatenated pieces) plus one parity
fragment per butterfly level.  The stack is kept in a flat wire form,

    flat(0)     = data block
    flat(l)     = header(l) + flat(l-1) + fragment(l)
    header(l)   = k big-endian 4-byte true lengths of the group's flat(l-1)

which makes every level's codeword a contiguous slice and lets a decoder
trim a reconstructed member to its true length.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterable, Optional

from bucketstore.codec import DataItem, Piece


class BucketError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class BucketId:
    """Bucket address: zone (tree depth) plus the zone low bits of member keys."""

    zone: int
    prefix: int

    def child(self, bit: int) -> "BucketId":
        return BucketId(self.zone + 1, self.prefix | (bit << self.zone))

    def prefix_str(self) -> str:
        return "".join(str((self.prefix >> i) & 1) for i in range(self.zone))


ROOT = BucketId(0, 0)


def key_bit(key: int, i: int) -> int:
    return (key >> i) & 1


def fbucket(zone: int, key: int, key_bits: int) -> BucketId:
    """The unique bucket that may hold ``key`` at ``zone``."""
    if not (0 <= zone <= key_bits):
        raise BucketError("zone %d out of range 0..%d" % (zone, key_bits))
    return BucketId(zone, key & ((1 << zone) - 1))


def bucket_size_check(bucket: BucketId, item_count: int, n: int) -> Optional[str]:
    """Return a violation description, or None if the size invariant holds.

    Non-root buckets hold 0 or n..2n items; the root holds at most 2n.
    """
    if bucket.zone == 0:
        if item_count > 2 * n:
            return "root bucket holds %d items (max %d)" % (item_count, 2 * n)
        return None
    if item_count == 0 or n <= item_count <= 2 * n:
        return None
    return "bucket %s/%s holds %d items (allowed 0 or %d..%d)" % (
        bucket.zone,
        bucket.prefix_str(),
        item_count,
        n,
        2 * n,
    )


# ---------------------------------------------------------------------------
# Level-block stacks


class Stack:
    """Immutable per-server stack of level blocks in flat wire form."""

    __slots__ = ("k", "flat", "levels", "_pieces")

    def __init__(self, k: int, flat: bytes, levels: tuple[tuple[tuple[int, ...], int], ...]):
        self.k = k
        self.flat = flat
        # levels[i] describes level i+1: (group true lengths, fragment length)
        self.levels = levels
        self._pieces: Optional[dict[tuple[int, int], Piece]] = None

    @property
    def top_level(self) -> int:
        return len(self.levels)

    def total_bytes(self) -> int:
        return len(self.flat)

    def cw(self, level: int) -> bytes:
        """The flat level-``level`` codeword (a contiguous slice)."""
        if not (0 <= level <= self.top_level):
            raise BucketError("level %d outside stack (top %d)" % (level, self.top_level))
        start = (self.top_level - level) * 4 * self.k
        end = len(self.flat) - sum(fl for _, fl in self.levels[level:])
        return self.flat[start:end]

    def lens(self, level: int) -> tuple[int, ...]:
        return self.levels[level - 1][0]

    def frag(self, level: int) -> bytes:
        cw = self.cw(level)
        frag_len = self.levels[level - 1][1]
        return cw[len(cw) - frag_len :] if frag_len else b""

    def block(self) -> bytes:
        return self.cw(0)

    def truncated(self, level: int) -> "Stack":
        """A copy keeping only levels 0..level."""
        return Stack(self.k, self.cw(level), self.levels[:level])

    @staticmethod
    def parse(k: int, flat: bytes, top_level: int) -> "Stack":
        """Rebuild level metadata from a flat byte string."""
        levels: list[tuple[tuple[int, ...], int]] = []
        data = flat
        for _ in range(top_level):
            if len(data) < 4 * k:
                raise BucketError("truncated stack header")
            lens = struct.unpack(">%dI" % k, data[: 4 * k])
            z = max(lens)
            frag_len = -(-z // (k - 1)) if z else 0
            data = data[4 * k : len(data) - frag_len]
            levels.append((lens, frag_len))
        return Stack(k, flat, tuple(reversed(levels)))

    @staticmethod
    def pack_header(lens: Iterable[int], k: int) -> bytes:
        return struct.pack(">%dI" % k, *lens)


@dataclass
class ServerCopy:
    """What one server physically stores for one bucket."""

    timestamp: int
    seeds: tuple[int, ...]
    stack: Stack


# ---------------------------------------------------------------------------
# Piece block serialization

_PIECE_FMT_FIXED = 7  # index (1) + version (4) + body length (2)


def serialize_block(pieces: Iterable[Piece], key_width: int) -> bytes:
    """Deterministic byte form of a server's piece set for one bucket."""
    ordered = sorted(pieces, key=lambda p: (p.item_key, p.index))
    out = [struct.pack(">I", len(ordered))]
    for p in ordered:
        out.append(p.item_key.to_bytes(key_width, "big"))
        out.append(struct.pack(">BIH", p.index, p.version, len(p.body)))
        out.append(p.body)
    return b"".join(out)


def parse_block(data: bytes, key_width: int) -> list[Piece]:
    if len(data) < 4:
        raise BucketError("block too short")
    (count,) = struct.unpack(">I", data[:4])
    off = 4
    pieces = []
    for _ in range(count):
        key = int.from_bytes(data[off : off + key_width], "big")
        off += key_width
        index, version, body_len = struct.unpack(">BIH", data[off : off + _PIECE_FMT_FIXED])
        off += _PIECE_FMT_FIXED
        body = data[off : off + body_len]
        off += body_len
        pieces.append(Piece(key, index, body, version))
    if off != len(data):
        raise BucketError("trailing bytes in block")
    return pieces


def block_piece_map(copy: ServerCopy, key_width: int) -> dict[tuple[int, int], Piece]:
    """(key, index) -> piece for a server copy's level-0 block, cached."""
    if copy.stack._pieces is None:
        copy.stack._pieces = {
            (p.item_key, p.index): p
            for p in parse_block(copy.stack.block(), key_width)
        }
    return copy.stack._pieces


# ---------------------------------------------------------------------------
# Bucket records and the simulator-side oracle


@dataclass
class BucketRecord:
    """Live state of one materialized bucket.

    ``members`` is simulator-side truth used only for verification and
    metrics; protocol code must read nothing but ``timestamp``/``seeds``
    metadata and the per-server ``copies``.
    """

    bucket: BucketId
    timestamp: int = 0
    seeds: tuple[int, ...] = ()
    members: dict[int, DataItem] = field(default_factory=dict)
    copies: dict[int, ServerCopy] = field(default_factory=dict)

    @property
    def item_count(self) -> int:
        return len(self.members)


class GlobalDirectory:
    """Oracle of the latest written version of every key (never consulted
    by protocol logic, only by checks and metrics)."""

    def __init__(self) -> None:
        self.latest: dict[int, DataItem] = {}

    def record_write(self, item: DataItem) -> None:
        self.latest[item.key] = item

    def lookup(self, key: int) -> Optional[DataItem]:
        return self.latest.get(key)


def freshness_violations(
    buckets: dict[BucketId, BucketRecord], directory: GlobalDirectory
) -> list[str]:
    """Check that for every stored key the bucket closest to the root holds
    the newest version, and that no live key vanished from every bucket."""
    seen: dict[int, list[tuple[int, int]]] = {}
    for bid, rec in buckets.items():
        for key, item in rec.members.items():
            seen.setdefault(key, []).append((bid.zone, item.version))
    problems = []
    for key, entries in sorted(seen.items()):
        entries.sort()
        min_zone_version = entries[0][1]
        max_version = max(v for _, v in entries)
        if min_zone_version != max_version:
            problems.append(
                "key %d: zone %d holds v%d but newest stored is v%d"
                % (key, entries[0][0], min_zone_version, max_version)
            )
        truth = directory.lookup(key)
        if truth is not None and truth.version != max_version:
            problems.append(
                "key %d: newest stored version v%d differs from written v%d"
                % (key, max_version, truth.version)
            )
    for key in sorted(directory.latest):
        if key not in seen:
            problems.append("key %d was written but is stored nowhere" % key)
    return problems


def snapshot_lines(buckets: dict[BucketId, BucketRecord]) -> list[str]:
    """Line-delimited bucket tree snapshot: zone, prefix, size, timestamp."""
    lines = []
    for bid in sorted(buckets):
        rec = buckets[bid]
        lines.append(
            "%d %s %d %d"
            % (bid.zone, bid.prefix_str() or "-", rec.item_count, rec.timestamp)
        )
    return lines
