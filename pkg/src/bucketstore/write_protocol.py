"""The write protocol: representative preprocessing, bucket decode,
distributed counting, overflow selection, and bucket (re)encoding.

A write batch is absorbed zone by zone.  Phase z decodes the zone-z
bucket on the overflow path, counts the pooled items (stored plus
incoming) by their z-th address bit, and either re-encodes everything in
place or sends exactly n same-bit items one zone deeper.  Every step is
driven through the round engine so rounds and congestion are charged the
way a real deployment would pay them.
"""

from __future__ import annotations

from dataclasses import dataclass

from bucketstore import buckets as bk
from bucketstore import codec
from bucketstore.buckets import BucketId, BucketRecord, ServerCopy, Stack
from bucketstore.codec import DataItem, Piece
from bucketstore.simnet import placement_hash, substream


class RepresentativesInfeasible(RuntimeError):
    """Too many crashes for a representative map with load at most two."""


class InvariantViolation(RuntimeError):
    """A hard internal invariant of the write path failed."""


@dataclass
class RepresentativeMap:
    """rep[s] is s itself for intact servers, an intact stand-in otherwise."""

    rep: dict[int, int]
    loads: dict[int, int]

    def resolve(self, server: int) -> int:
        return self.rep[server]


def assign_representatives(crash_set: set[int], n: int) -> RepresentativeMap:
    """Deterministic representative assignment: crashed and intact servers
    are ranked by id and crashed rank r is covered by intact rank r // 2,
    so no intact server represents more than two crashed ones."""
    crashed = sorted(crash_set)
    intact = [s for s in range(n) if s not in crash_set]
    if len(crashed) > 2 * len(intact):
        raise RepresentativesInfeasible(
            "%d crashed servers cannot be covered by %d intact ones"
            % (len(crashed), len(intact))
        )
    rep = {s: s for s in intact}
    loads: dict[int, int] = {}
    for rank, s in enumerate(crashed):
        stand_in = intact[rank // 2]
        rep[s] = stand_in
        loads[stand_in] = loads.get(stand_in, 0) + 1
    return RepresentativeMap(rep, loads)


def preprocess_period(cluster) -> None:
    """Compute the representative map and charge its dissemination: one
    detector round plus a butterfly broadcast of the assignment."""
    net = cluster.net
    net.set_stage("preprocess")
    rmap = assign_representatives(cluster.crash_set, cluster.config.n)
    cluster.set_rep_map(rmap)
    pairs = tuple(sorted((s, r) for s, r in rmap.rep.items() if s != r))
    coord = min(s for s in range(cluster.config.n) if not cluster.is_crashed(s))
    net.send(coord, coord, "REP_CTRL", body=(pairs,), size=8 * len(pairs))
    net.step()
    _broadcast(cluster, coord, "REP_CTRL", (pairs,), 8 * len(pairs))


def _broadcast(cluster, start_col: int, kind: str, body: tuple, size: int) -> None:
    """Butterfly broadcast from the start column's deepest node to every
    server: d rounds, k messages per holder per round."""
    topo = cluster.topo
    net = cluster.net
    frontier = {start_col}
    for level in range(topo.d, 0, -1):
        for col in sorted(frontier):
            for member in topo.group_members(col, level - 1):
                net.send(
                    cluster.resolve(col),
                    cluster.resolve(member),
                    kind,
                    body=body,
                    node=(level - 1, member),
                    size=size,
                )
        net.step()
        nxt = set()
        for col in frontier:
            nxt.update(topo.group_members(col, level - 1))
        frontier = nxt


# ---------------------------------------------------------------------------
# Cooperative block recovery (used by the write path for whole buckets and
# by the lookup decoding stage for sub-butterflies)


def run_block_recovery(
    cluster,
    tasks: list[tuple[BucketRecord | None, list[int]]],
    top_level: int,
    stage: str,
):
    """Level-by-level reconstruction of stored level blocks inside disjoint
    sub-butterflies of dimension ``top_level``, one flow per (bucket,
    sub-butterfly) task, all sharing the same rounds.

    Every column holding a stack repeatedly offers its current codeword to
    its parity group; a column that is crashed, outdated, or silent adopts
    the group majority timestamp and rebuilds its own codeword once at
    least k-1 group members at that timestamp are heard.  Returns one dict
    per task mapping column -> (timestamp, seeds, stack) or None where
    recovery failed.
    """
    cfg = cluster.config
    topo = cluster.topo
    net = cluster.net
    net.set_stage(stage)
    k = cfg.k
    states: list[dict[int, tuple[int, tuple, Stack] | None]] = []
    for rec, bases in tasks:
        state: dict[int, tuple[int, tuple, Stack] | None] = {}
        for base in bases:
            for col in range(base, base + topo._pow[top_level]):
                copy = rec.copies.get(col) if rec is not None else None
                if cluster.is_crashed(col) or copy is None:
                    state[col] = None
                else:
                    state[col] = (copy.timestamp, copy.seeds, copy.stack)
        states.append(state)
    seed_bytes = 8 * cfg.pieces_per_item
    for recv in range(top_level - 1, -1, -1):
        for task_idx, state in enumerate(states):
            for col in sorted(state):
                entry = state[col]
                if entry is None:
                    continue
                ts, seeds, stack = entry
                if stack.top_level < recv + 1:
                    continue
                cw = stack.cw(recv)
                lens = stack.lens(recv + 1)
                frag = stack.frag(recv + 1)
                size = len(cw) + len(frag) + 4 * k + seed_bytes
                for member in topo.group_members(col, recv):
                    if member == col:
                        continue
                    net.send(
                        cluster.resolve(col),
                        cluster.resolve(member),
                        "BLOCK_TRANSFER",
                        body=(task_idx, member, col, ts, seeds, cw, lens, frag),
                        node=(recv, member),
                        size=size,
                    )
        inboxes: dict[tuple[int, int], list] = {}
        for msgs in net.step().values():
            for m in msgs:
                inboxes.setdefault((m.body[0], m.body[1]), []).append(m.body)
        for task_idx, state in enumerate(states):
            new_state = dict(state)
            for col in sorted(state):
                received = inboxes.get((task_idx, col), ())
                if not received:
                    if state[col] is not None and state[col][2].top_level < recv:
                        new_state[col] = None  # cannot follow the flow further
                    continue
                tmax = max(b[3] for b in received)
                own = state[col]
                if own is not None and own[0] >= tmax and own[2].top_level >= recv:
                    continue  # own data is as fresh as anything heard
                current = [b for b in received if b[3] == tmax]
                if len(current) < k - 1:
                    new_state[col] = None
                    continue
                codewords = [
                    codec.GroupCodeword(b[5], topo.digit(b[2], recv), b[6], b[7])
                    for b in current
                ]
                try:
                    blocks = codec.group_decode(codewords, k)
                except codec.CodecError:
                    new_state[col] = None
                    continue
                flat = blocks[topo.digit(col, recv)]
                new_state[col] = (tmax, current[0][4], Stack.parse(k, flat, recv))
            states[task_idx] = new_state
    return states


# ---------------------------------------------------------------------------
# Phase steps


def decode_bucket(cluster, rec: BucketRecord, write_keys: set[int]):
    """Rebuild every stored item of ``rec`` at the server maintaining it.

    Runs the cooperative recovery over the whole butterfly, then routes
    each recovered piece to the holder of the item's first piece.  Items
    with a fresh write request are dropped by their maintainer (the new
    version supersedes them).  Returns (items per maintainer column,
    events).
    """
    cfg = cluster.config
    net = cluster.net
    n = cfg.n
    events: list[str] = []
    state = run_block_recovery(cluster, [(rec, [0])], cfg.d, "write.decode")[0]
    net.set_stage("write.decode")
    t = codec.piece_threshold(cfg.pieces_per_item)
    for col in range(n):
        entry = state[col]
        if entry is None:
            events.append("bucket %s: column %d unrecoverable" % (rec.bucket, col))
            continue
        ts, seeds, stack = entry
        if ts != rec.timestamp:
            events.append("bucket %s: column %d stuck at stale t=%d" % (rec.bucket, col, ts))
            continue
        for piece in bk.parse_block(stack.block(), cfg.key_width):
            maintainer = placement_hash(seeds[0], piece.item_key, n)
            net.send(
                cluster.resolve(col),
                cluster.resolve(maintainer),
                "PIECE",
                body=(maintainer, piece),
                size=len(piece.body) + cfg.key_width + 7,
            )
    for key in sorted(write_keys):
        maintainer = placement_hash(rec.seeds[0], key, n)
        holder = cluster.resolve(maintainer)
        net.send(holder, holder, "SUPERSEDE", body=(maintainer, key), size=cfg.key_width)
    gathered: dict[int, dict[int, list[Piece]]] = {}
    superseded: dict[int, set[int]] = {}
    for msgs in net.step().values():
        for m in msgs:
            if m.kind == "PIECE":
                col, piece = m.body
                gathered.setdefault(col, {}).setdefault(piece.item_key, []).append(piece)
            else:
                col, key = m.body
                superseded.setdefault(col, set()).add(key)
    maintained: dict[int, dict[int, DataItem]] = {}
    for col in sorted(gathered):
        for key in sorted(gathered[col]):
            if key in superseded.get(col, ()):
                continue
            pieces = gathered[col][key]
            if len({p.index for p in pieces}) < t:
                events.append(
                    "bucket %s: item %d lost (%d of %d pieces recovered)"
                    % (rec.bucket, key, len(pieces), t)
                )
                continue
            payload = codec.rs_decode(pieces, cfg.pieces_per_item, cfg.payload_size)
            maintained.setdefault(col, {})[key] = DataItem(key, payload, pieces[0].version)
    return maintained, events


def count_items(cluster, zone: int, maintained, incoming):
    """Count pooled items by their zone-th address bit, aggregated up the
    butterfly so every server learns the totals.

    Returns (num0, num1, child_tuples) where child_tuples[(level, col)]
    keeps the per-child tuples each tree node saw, in child digit order
    (the selection walk replays them).
    """
    cfg = cluster.config
    topo = cluster.topo
    net = cluster.net
    net.set_stage("write.count")
    values: dict[int, tuple[int, int]] = {}
    for col in range(cfg.n):
        n0 = n1 = 0
        for source in (maintained.get(col), incoming.get(col)):
            if not source:
                continue
            for key in source:
                if bk.key_bit(key, zone):
                    n1 += 1
                else:
                    n0 += 1
        values[col] = (n0, n1)
    child_tuples: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for level in range(cfg.d, 0, -1):
        for col in range(cfg.n):
            for member in topo.group_members(col, level - 1):
                net.send(
                    cluster.resolve(col),
                    cluster.resolve(member),
                    "COUNT_TUPLE",
                    body=(member, col, values[col]),
                    node=(level - 1, member),
                    size=8,
                )
        received: dict[int, dict[int, tuple[int, int]]] = {}
        for msgs in net.step().values():
            for m in msgs:
                dst_col, src_col, tup = m.body
                received.setdefault(dst_col, {})[src_col] = tup
        new_values = {}
        for col in range(cfg.n):
            group = topo.group_members(col, level - 1)
            tuples = [received[col][g] for g in group]
            child_tuples[(level - 1, col)] = tuples
            new_values[col] = (
                sum(t[0] for t in tuples),
                sum(t[1] for t in tuples),
            )
        values = new_values
    totals = set(values.values())
    if len(totals) != 1:
        raise InvariantViolation("counting did not converge: %r" % totals)
    num0, num1 = totals.pop()
    return num0, num1, child_tuples


def select_overflow(cluster, zone: int, maintained, incoming, child_tuples, bit: int):
    """Mark exactly n items with the given zone bit for the next phase via
    the FULL/PARTLY walk down the counting tree.  Selected items are
    removed from the callers' pools and returned per holding column."""
    cfg = cluster.config
    topo = cluster.topo
    net = cluster.net
    net.set_stage("write.select")
    n = cfg.n

    def matching(col: int) -> list[int]:
        keys = []
        for source in (maintained.get(col), incoming.get(col)):
            if source:
                keys.extend(k for k in source if bk.key_bit(k, zone) == bit)
        return sorted(keys)

    selected: dict[int, list[DataItem]] = {}

    def take(col: int, keys: list[int]) -> None:
        out = []
        for key in keys:
            for source in (maintained.get(col), incoming.get(col)):
                if source and key in source:
                    out.append(source.pop(key))
                    break
        if out:
            selected[col] = out

    # the walk starts at the root of the counting tree, node (0, 0)
    pending: list[tuple[int, int, str, int]] = [(0, 0, "PARTLY", n)]
    for level in range(cfg.d + 1):
        next_pending: list[tuple[int, int, str, int]] = []
        for lvl, col, kind, amount in pending:
            if lvl == cfg.d:
                keys = matching(col)
                if kind == "FULL":
                    take(col, keys)
                else:
                    if amount > len(keys):
                        raise InvariantViolation(
                            "leaf %d asked for %d of %d matching items"
                            % (col, amount, len(keys))
                        )
                    rng = substream(
                        cfg.seed, "leaf_pick", cluster.timestamp, zone, col
                    )
                    take(col, sorted(rng.sample(keys, amount)))
                continue
            children = topo.group_members(col, lvl)
            tuples = child_tuples[(lvl, col)]
            if kind == "FULL":
                for child in children:
                    net.send(
                        cluster.resolve(col),
                        cluster.resolve(child),
                        "FULL",
                        body=(child,),
                        node=(lvl + 1, child),
                        size=4,
                    )
                    next_pending.append((lvl + 1, child, "FULL", 0))
                continue
            remaining = amount
            for idx, child in enumerate(children):
                have = tuples[idx][bit]
                if remaining <= 0:
                    break
                if have <= remaining:
                    net.send(
                        cluster.resolve(col),
                        cluster.resolve(child),
                        "FULL",
                        body=(child,),
                        node=(lvl + 1, child),
                        size=4,
                    )
                    next_pending.append((lvl + 1, child, "FULL", 0))
                    remaining -= have
                else:
                    net.send(
                        cluster.resolve(col),
                        cluster.resolve(child),
                        "PARTLY",
                        body=(child, remaining),
                        node=(lvl + 1, child),
                        size=8,
                    )
                    next_pending.append((lvl + 1, child, "PARTLY", remaining))
                    remaining = 0
        if level < cfg.d:
            net.step()
        pending = next_pending

    total = sum(len(v) for v in selected.values())
    if total != n:
        raise InvariantViolation(
            "overflow selection marked %d items instead of %d" % (total, n)
        )
    return selected


def load_balance(cluster, selected: dict[int, list[DataItem]]):
    """Spread the selected items one per server: prefix ranks are computed
    with an up/down pass over the counting tree, then items move to the
    server matching their rank."""
    cfg = cluster.config
    topo = cluster.topo
    net = cluster.net
    net.set_stage("write.balance")
    counts = {col: len(selected.get(col, ())) for col in range(cfg.n)}
    # up: aggregate subtree counts (stored per tree node for the down pass)
    node_counts: dict[tuple[int, int], list[int]] = {}
    values = dict(counts)
    for level in range(cfg.d, 0, -1):
        for col in range(cfg.n):
            for member in topo.group_members(col, level - 1):
                net.send(
                    cluster.resolve(col),
                    cluster.resolve(member),
                    "COUNT_TUPLE",
                    body=(member, col, values[col]),
                    node=(level - 1, member),
                    size=4,
                )
        received: dict[int, dict[int, int]] = {}
        for msgs in net.step().values():
            for m in msgs:
                dst_col, src_col, val = m.body
                received.setdefault(dst_col, {})[src_col] = val
        new_values = {}
        for col in range(cfg.n):
            group = topo.group_members(col, level - 1)
            vals = [received[col][g] for g in group]
            node_counts[(level - 1, col)] = vals
            new_values[col] = sum(vals)
        values = new_values
    # down: offsets along the tree rooted at (0, 0)
    offsets: dict[int, int] = {}
    pending = [(0, 0, 0)]
    for level in range(cfg.d + 1):
        nxt = []
        for lvl, col, offset in pending:
            if lvl == cfg.d:
                offsets[col] = offset
                continue
            children = topo.group_members(col, lvl)
            vals = node_counts[(lvl, col)]
            acc = offset
            for idx, child in enumerate(children):
                net.send(
                    cluster.resolve(col),
                    cluster.resolve(child),
                    "COUNT_TUPLE",
                    body=(child, col, acc),
                    node=(lvl + 1, child),
                    size=4,
                )
                nxt.append((lvl + 1, child, acc))
                acc += vals[idx]
        if level < cfg.d:
            net.step()
        pending = nxt
    # transfer: rank r goes to server r
    out: dict[int, dict[int, DataItem]] = {}
    for col in sorted(selected):
        rank = offsets[col]
        for item in sorted(selected[col], key=lambda it: it.key):
            net.send(
                cluster.resolve(col),
                cluster.resolve(rank),
                "PIECE",
                body=(rank, item),
                size=cfg.payload_size + cfg.key_width,
            )
            rank += 1
    for msgs in net.step().values():
        for m in msgs:
            rank, item = m.body
            out.setdefault(rank, {})[item.key] = item
    return out


def encode_bucket(cluster, bucket: BucketId, owners, stage: str = "write.encode"):
    """(Re)encode a bucket: fresh hash seeds and timestamp are broadcast,
    owners cut items into pieces, pieces ride the butterfly to their hash
    columns, and the level parities are rebuilt top down.  Intact servers
    overwrite their stored stack; crashed ones keep whatever they had."""
    cfg = cluster.config
    topo = cluster.topo
    net = cluster.net
    net.set_stage(stage)
    n, k, d, c = cfg.n, cfg.k, cfg.d, cfg.pieces_per_item
    items: dict[int, DataItem] = {}
    for col in owners:
        items.update(owners[col])
    if len(items) > 2 * n:
        raise InvariantViolation(
            "encoding %d items into %s exceeds the 2n=%d cap"
            % (len(items), bucket, 2 * n)
        )
    ts = cluster.timestamp
    seed_rng = substream(cfg.seed, "hash_seeds", ts, bucket.zone, bucket.prefix)
    seeds = tuple(seed_rng.getrandbits(64) for _ in range(c))
    coord = min(s for s in range(n) if not cluster.is_crashed(s))
    _broadcast(cluster, coord, "HASH_BCAST", (ts,), 8 * c + 8)

    # owners cut and launch pieces; each piece walks its probe path so the
    # final hop lands on the hash column (or its representative)
    in_flight: list[tuple[int, int, int, Piece]] = []  # (level, col, target, piece)
    for col in sorted(owners):
        for key in sorted(owners[col]):
            item = owners[col][key]
            for piece in codec.rs_encode(item, c):
                target = placement_hash(seeds[piece.index - 1], key, n)
                in_flight.append((d, col, target, piece))
    arrivals: dict[int, list[Piece]] = {col: [] for col in range(n)}
    for level in range(d, 0, -1):
        nxt = []
        for lvl, col, target, piece in in_flight:
            node = topo.path_node(col, target, lvl - 1)
            net.send(
                cluster.resolve(col),
                cluster.resolve(node.column),
                "PIECE",
                body=(lvl - 1, node.column, target, piece),
                node=(lvl - 1, node.column),
                size=len(piece.body) + cfg.key_width + 7,
            )
            nxt.append((lvl - 1, node.column, target, piece))
        for msgs in net.step().values():
            for m in msgs:
                hop_level, here, target, piece = m.body
                if hop_level == 0:
                    arrivals[here].append(piece)
        in_flight = [entry for entry in nxt if entry[0] > 0]

    # level-0 blocks, then one parity fragment per level
    cw: dict[int, bytes] = {}
    meta: dict[int, list] = {col: [] for col in range(n)}
    for col in range(n):
        cw[col] = bk.serialize_block(arrivals[col], cfg.key_width)
    for level in range(1, d + 1):
        for col in range(n):
            for member in topo.group_members(col, level - 1):
                if member != col:
                    net.send(
                        cluster.resolve(col),
                        cluster.resolve(member),
                        "BLOCK_TRANSFER",
                        body=(member,),
                        node=(level, member),
                        size=len(cw[col]),
                    )
        net.step()
        new_cw = {}
        # parity groups at this level vary digit level-1
        done: set[int] = set()
        for col in range(n):
            if col in done:
                continue
            group = topo.group_members(col, level - 1)
            done.update(group)
            codewords = codec.group_encode([cw[g] for g in group])
            for idx, g in enumerate(group):
                lens = codewords[idx].group_lens
                header = Stack.pack_header(lens, k)
                new_cw[g] = header + cw[g] + codewords[idx].parity_fragment
                meta[g].append((lens, len(codewords[idx].parity_fragment)))
        cw = new_cw

    rec = cluster.buckets.get(bucket)
    if rec is None:
        rec = BucketRecord(bucket)
        cluster.buckets[bucket] = rec
    rec.timestamp = ts
    rec.seeds = seeds
    rec.members = dict(sorted(items.items()))
    for col in range(n):
        if not cluster.is_crashed(col):
            rec.copies[col] = ServerCopy(ts, seeds, Stack(k, cw[col], tuple(meta[col])))
    cluster.encodes_this_period.append(
        {"bucket": bucket, "seeds": seeds, "keys": sorted(items)}
    )
    return rec


def write_stage(cluster, writes: dict[int, DataItem]):
    """Run the phased write protocol for one batch (one item per server).

    Returns per-phase dictionaries for the period report."""
    cfg = cluster.config
    net = cluster.net
    n = cfg.n
    incoming: dict[int, dict[int, DataItem]] = {
        col: {item.key: item} for col, item in writes.items()
    }
    zone = 0
    bucket = bk.ROOT
    phases = []
    while True:
        rounds_before = net.rounds_used
        rec = cluster.buckets.get(bucket)
        write_keys = {key for d_ in incoming.values() for key in d_}
        events: list[str] = []
        if rec is not None and rec.members:
            maintained, events = decode_bucket(cluster, rec, write_keys)
        else:
            maintained = {}
        num0, num1, child_tuples = count_items(cluster, zone, maintained, incoming)
        pool = num0 + num1
        overflow = pool > 2 * n
        phase = {
            "zone": zone,
            "bucket": bucket.prefix_str() or "-",
            "pool": pool,
            "num0": num0,
            "num1": num1,
            "overflow": overflow,
            "events": events,
        }
        if not overflow:
            owners = _merge_pools(maintained, incoming)
            encode_bucket(cluster, bucket, owners)
            phase["rounds"] = net.rounds_used - rounds_before
            phases.append(phase)
            break
        bit = 0 if num0 > n else 1
        selected = select_overflow(cluster, zone, maintained, incoming, child_tuples, bit)
        owners = _merge_pools(maintained, incoming)
        encode_bucket(cluster, bucket, owners)
        incoming = load_balance(cluster, selected)
        phase["rounds"] = net.rounds_used - rounds_before
        phase["pushed_bit"] = bit
        phases.append(phase)
        bucket = bucket.child(bit)
        zone += 1
        if zone > cfg.key_bits:
            raise InvariantViolation("write stage descended past the deepest zone")
    return phases


def _merge_pools(maintained, incoming):
    merged: dict[int, dict[int, DataItem]] = {}
    for source in (maintained, incoming):
        for col, items in source.items():
            if items:
                merged.setdefault(col, {}).update(items)
    return merged
