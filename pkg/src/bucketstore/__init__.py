"""Deterministic simulator of a crash-tolerant distributed key-value store.

The store keeps data items in a binary tree of buckets keyed by address
bits, erasure-codes every bucket across all servers along a k-ary
butterfly, and serves writes and lookups through synchronous round-based
protocols that survive batches of adaptively chosen server crashes.
"""

from bucketstore.codec import (
    CodecError,
    DataItem,
    GroupCodeword,
    InsufficientCodewordsError,
    InsufficientPiecesError,
    MixedVersionError,
    Piece,
    group_decode,
    group_encode,
    piece_threshold,
    rs_decode,
    rs_encode,
)
from bucketstore.butterfly import NodeId, Topology
from bucketstore.cluster import Cluster
from bucketstore.simnet import Config, Request, ScenarioError

__all__ = [
    "Cluster",
    "CodecError",
    "Config",
    "DataItem",
    "GroupCodeword",
    "InsufficientCodewordsError",
    "InsufficientPiecesError",
    "MixedVersionError",
    "NodeId",
    "Piece",
    "Request",
    "ScenarioError",
    "Topology",
    "group_decode",
    "group_encode",
    "piece_threshold",
    "rs_decode",
    "rs_encode",
]
