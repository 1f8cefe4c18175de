"""Erasure codes for the storage layer.

Two codes are used by the store:

* a piece code: an MDS share code over GF(256).  Every data item is cut
  into ``c`` pieces and any ``ceil(c/3)`` of them rebuild the payload
  exactly (rate 1/3, erasures only).
* a group code: diagonal XOR parity over a group of ``k`` blocks.  Every
  group member keeps its own block plus one parity fragment of size
  ``ceil(z/(k-1))``; the surviving ``k-1`` codewords rebuild all ``k``
  blocks when one member is lost.

Both codes are pure functions and deterministic: identical inputs produce
bit-identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np


class CodecError(ValueError):
    """Bad codec parameters or malformed codec input."""


class InsufficientPiecesError(CodecError):
    """Fewer pieces than the reconstruction threshold."""


class MixedVersionError(CodecError):
    """Pieces of different versions (or keys) were mixed in one decode."""


class InsufficientCodewordsError(CodecError):
    """More than one group codeword is missing."""


# ---------------------------------------------------------------------------
# GF(256) arithmetic, AES polynomial x^8 + x^4 + x^3 + x + 1 (0x11d)

_PRIM = 0x11D

_exp = [0] * 512
_log = [0] * 256
_x = 1
for _i in range(255):
    _exp[_i] = _x
    _log[_x] = _i
    _x <<= 1
    if _x & 0x100:
        _x ^= _PRIM
for _i in range(255, 512):
    _exp[_i] = _exp[_i - 255]

_EXP = np.array(_exp, dtype=np.uint8)
_LOG = np.array(_log, dtype=np.int64)


def _gf_mul(a: int, b: int) -> int:
    if a == 0 or b == 0:
        return 0
    return _exp[(_log[a] + _log[b]) % 255]


def _gf_inv(a: int) -> int:
    if a == 0:
        raise ZeroDivisionError("no inverse of 0 in GF(256)")
    return _exp[255 - _log[a]]


def _gf_mul_vec(vec: np.ndarray, scalar: int) -> np.ndarray:
    """Multiply a uint8 vector by a scalar in GF(256)."""
    if scalar == 0:
        return np.zeros_like(vec)
    if scalar == 1:
        return vec.copy()
    out = _EXP[(_LOG[vec] + _log[scalar]) % 255]
    out[vec == 0] = 0
    return out


def _gf_matinv(m: list[list[int]]) -> list[list[int]]:
    """Gauss-Jordan inversion of a square matrix over GF(256)."""
    size = len(m)
    a = [row[:] for row in m]
    inv = [[1 if i == j else 0 for j in range(size)] for i in range(size)]
    for col in range(size):
        pivot = next((r for r in range(col, size) if a[r][col] != 0), None)
        if pivot is None:
            raise CodecError("singular share matrix")
        if pivot != col:
            a[col], a[pivot] = a[pivot], a[col]
            inv[col], inv[pivot] = inv[pivot], inv[col]
        scale = _gf_inv(a[col][col])
        for j in range(size):
            a[col][j] = _gf_mul(a[col][j], scale)
            inv[col][j] = _gf_mul(inv[col][j], scale)
        for r in range(size):
            if r == col or a[r][col] == 0:
                continue
            f = a[r][col]
            for j in range(size):
                a[r][j] ^= _gf_mul(f, a[col][j])
                inv[r][j] ^= _gf_mul(f, inv[col][j])
    return inv


def xor_bytes(a: bytes, b: bytes) -> bytes:
    """XOR two equal-length byte strings."""
    if len(a) != len(b):
        raise CodecError("xor of unequal lengths: %d vs %d" % (len(a), len(b)))
    n = len(a)
    return (int.from_bytes(a, "big") ^ int.from_bytes(b, "big")).to_bytes(n, "big")


# ---------------------------------------------------------------------------
# Domain types


@dataclass(frozen=True)
class DataItem:
    """One stored key-value pair: fixed-width address, payload and a
    version counter that increases with every overwrite."""

    key: int
    payload: bytes
    version: int


@dataclass(frozen=True)
class Piece:
    """One of the c MDS shares of a data item.  ``index`` runs 1..c."""

    item_key: int
    index: int
    body: bytes
    version: int


@dataclass(frozen=True)
class GroupCodeword:
    """One member of a parity group: the member's own block plus one
    diagonal parity fragment over the other members.

    ``group_lens`` records the true (pre-padding) lengths of all k blocks
    in encoding order so a reconstructed block can be trimmed exactly.
    """

    own_block: bytes
    group_index: int
    group_lens: tuple[int, ...]
    parity_fragment: bytes

    @property
    def padded_len(self) -> int:
        return max(self.group_lens)


def piece_threshold(c: int) -> int:
    """Number of pieces required to rebuild a payload: ceil(c/3)."""
    return -(-c // 3)


# ---------------------------------------------------------------------------
# Piece code (MDS shares over GF(256))
#
# The payload is split into t = ceil(c/3) rows of ceil(len/t) bytes each
# (zero padded).  Piece i is the evaluation of the row polynomial at the
# nonzero field point i, so any t pieces form a Vandermonde system that
# can be solved exactly.


def _payload_rows(payload: bytes, t: int) -> np.ndarray:
    row_len = -(-len(payload) // t)
    buf = payload.ljust(t * row_len, b"\x00")
    return np.frombuffer(buf, dtype=np.uint8).reshape(t, row_len)


@lru_cache(maxsize=4096)
def _eval_powers(index: int, t: int) -> tuple[int, ...]:
    powers = [1] * t
    for j in range(1, t):
        powers[j] = _gf_mul(powers[j - 1], index)
    return tuple(powers)


@lru_cache(maxsize=4096)
def _decode_matrix(indices: tuple[int, ...]) -> tuple[tuple[int, ...], ...]:
    t = len(indices)
    vand = [list(_eval_powers(i, t)) for i in indices]
    return tuple(tuple(row) for row in _gf_matinv(vand))


@lru_cache(maxsize=512)
def _matrix_tables(rows: tuple[tuple[int, ...], ...]):
    mat = np.array(rows, dtype=np.uint8)
    return _LOG[mat], mat == 0


def _gf_matmul(rows: tuple[tuple[int, ...], ...], data: np.ndarray) -> np.ndarray:
    """Multiply a small GF(256) matrix by uint8 data of shape (t, G)."""
    mat_log, mat_zero = _matrix_tables(rows)
    prod = _EXP[(mat_log[:, :, None] + _LOG[data][None, :, :]) % 255]
    if mat_zero.any():
        prod[np.broadcast_to(mat_zero[:, :, None], prod.shape)] = 0
    zero_cells = data == 0
    if zero_cells.any():
        prod[:, zero_cells] = 0
    return np.bitwise_xor.reduce(prod, axis=1)


@lru_cache(maxsize=512)
def _encode_matrix(c: int) -> tuple[tuple[int, ...], ...]:
    t = piece_threshold(c)
    return tuple(_eval_powers(i, t) for i in range(1, c + 1))


def rs_encode(item: DataItem, c: int) -> list[Piece]:
    """Cut ``item`` into ``c`` pieces, any ``ceil(c/3)`` of which rebuild it."""
    if c < 3:
        raise CodecError("piece count must be at least 3, got %d" % c)
    if c > 255:
        raise CodecError("piece count above 255 is not supported")
    if not item.payload:
        raise CodecError("cannot encode an empty payload")
    t = piece_threshold(c)
    rows = _payload_rows(item.payload, t)
    bodies = _gf_matmul(_encode_matrix(c), rows)
    return [
        Piece(item.key, i + 1, bodies[i].tobytes(), item.version)
        for i in range(c)
    ]


def rs_decode(pieces: Iterable[Piece], c: int, expected_len: int) -> bytes:
    """Rebuild a payload of ``expected_len`` bytes from any threshold-sized
    subset of the pieces produced by :func:`rs_encode`."""
    t = piece_threshold(c)
    by_index: dict[int, Piece] = {}
    key = version = None
    for p in pieces:
        if key is None:
            key, version = p.item_key, p.version
        elif p.item_key != key or p.version != version:
            raise MixedVersionError(
                "piece (%r, v%r) mixed into decode of (%r, v%r)"
                % (p.item_key, p.version, key, version)
            )
        by_index.setdefault(p.index, p)
    if len(by_index) < t:
        raise InsufficientPiecesError(
            "need %d distinct pieces, got %d" % (t, len(by_index))
        )
    chosen = sorted(by_index)[:t]
    inv = _decode_matrix(tuple(chosen))
    mat = np.stack(
        [np.frombuffer(by_index[i].body, dtype=np.uint8) for i in chosen]
    )
    return _gf_matmul(inv, mat).tobytes()[:expected_len]


# ---------------------------------------------------------------------------
# Group code (diagonal XOR parity, single-erasure recovery)
#
# Blocks are padded to the group maximum z and split into k-1 fragments of
# f = ceil(z/(k-1)) bytes.  Member i stores parity
#     p_i = XOR_{j != i} fragment_{(j-i) mod k} of block j,
# so the k-1 surviving parities each expose one distinct fragment of a
# missing block once the known blocks are XORed back out.


def _fragments(block: bytes, z: int, k: int) -> list[bytes]:
    f = -(-z // (k - 1)) if z else 0
    padded = block.ljust(f * (k - 1), b"\x00")
    return [padded[j * f : (j + 1) * f] for j in range(k - 1)]


def group_encode(blocks: Sequence[bytes]) -> list[GroupCodeword]:
    """Encode ``k`` blocks into ``k`` codewords tolerating one erasure."""
    k = len(blocks)
    if k < 2:
        raise CodecError("a parity group needs at least 2 blocks")
    lens = tuple(len(b) for b in blocks)
    z = max(lens)
    frags = [_fragments(b, z, k) for b in blocks]
    f = -(-z // (k - 1)) if z else 0
    codewords = []
    for i in range(k):
        parity = bytes(f)
        for j in range(k):
            if j == i:
                continue
            parity = xor_bytes(parity, frags[j][(j - i) % k - 1])
        codewords.append(GroupCodeword(bytes(blocks[i]), i, lens, parity))
    return codewords


def group_decode(codewords: Iterable[GroupCodeword], k: int) -> list[bytes]:
    """Rebuild all ``k`` blocks of a group from at least ``k-1`` codewords."""
    present: dict[int, GroupCodeword] = {}
    for cw in codewords:
        present[cw.group_index] = cw
    missing = [i for i in range(k) if i not in present]
    if not missing:
        return [present[i].own_block for i in range(k)]
    if len(missing) > 1:
        raise InsufficientCodewordsError(
            "cannot recover %d missing codewords (indices %r)"
            % (len(missing), missing)
        )
    m = missing[0]
    any_cw = next(iter(present.values()))
    lens = any_cw.group_lens
    if len(lens) != k:
        raise CodecError("group length vector does not match k")
    z = max(lens)
    f = -(-z // (k - 1)) if z else 0
    known_frags = {
        j: _fragments(cw.own_block, z, k) for j, cw in present.items()
    }
    recovered = [b""] * (k - 1)
    for j, cw in present.items():
        # parity j exposes fragment (m-j) mod k of the missing block
        frag = cw.parity_fragment
        if len(frag) != f:
            raise CodecError("parity fragment has wrong length")
        for i in present:
            if i == j:
                continue
            frag = xor_bytes(frag, known_frags[i][(i - j) % k - 1])
        recovered[(m - j) % k - 1] = frag
    blocks = []
    for i in range(k):
        if i == m:
            blocks.append(b"".join(recovered)[: lens[m]])
        else:
            blocks.append(present[i].own_block)
    return blocks
