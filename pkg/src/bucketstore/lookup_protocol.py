"""The lookup protocol: per-zone metadata acquisition, the probing stage
with probe splitting/combining, and the multi-sub-phase decoding stage.

A lookup walks the bucket tree from zone 0 downward.  At each zone it
learns the bucket's current timestamp and hash seeds from a random sample
of servers, then chases all c pieces along their butterfly paths.  If too
many piece holders are crashed or outdated, the request is classified to
a butterfly level and handed to the decoding stage, which cooperatively
rebuilds whole sub-butterflies.  A bucket that answers "no such key" at
its current timestamp sends the request one zone deeper; only zone
exhaustion yields a final not-exists.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from bucketstore import buckets as bk
from bucketstore import codec
from bucketstore.buckets import fbucket
from bucketstore.codec import DataItem, Piece
from bucketstore.simnet import placement_hash, substream
from bucketstore.write_protocol import run_block_recovery


@dataclass
class ProbeRecord:
    """Fate of one piece probe: which path it took and where it died."""

    index: int
    start_col: int
    target_col: int
    outcome: str = "pending"  # pending | piece | absent | fail
    fail_level: int | None = None

    def active_at(self, level: int) -> bool:
        """True if the probe successfully passed this level (it failed
        strictly below, or never failed at all)."""
        if self.outcome != "fail":
            return True
        return self.fail_level is not None and self.fail_level < level


@dataclass
class LookupRequest:
    server: int
    key: int
    status: str = "pending"  # pending | answered | not_exists | failed
    answer: DataItem | None = None
    zone: int = -1
    zone_empty: bool = False
    zone_absent: bool = False
    t_d: int = -1
    seeds: tuple = ()
    probes: dict[int, ProbeRecord] = field(default_factory=dict)
    pieces: dict[int, Piece] = field(default_factory=dict)
    level: int = 0
    events: list[str] = field(default_factory=list)

    def reset_zone(self, zone: int) -> None:
        self.zone = zone
        self.zone_empty = False
        self.zone_absent = False
        self.t_d = -1
        self.seeds = ()
        self.probes = {}
        self.pieces = {}
        self.level = 0


class PathRouter:
    """Routes per-piece requests down the butterfly with splitting and
    combining, and fans answers back along the reversed request tree.

    A node that already forwarded a request for the same (key, index)
    only records the extra upstream and replays the answer when it comes
    back; with a distinct-request limit set, a node over the limit stops
    forwarding and answers fail with its own level.
    """

    def __init__(
        self,
        cluster,
        kind: str,
        stage: str,
        arrive_level: int,
        distinct_limit: float | None,
    ):
        self.cluster = cluster
        self.kind = kind
        self.ans_kind = kind + "_ANS"
        self.stage = stage
        self.arrive_level = arrive_level
        self.limit = distinct_limit
        self.tables: dict[tuple[int, int], dict] = {}
        self.distinct: dict[tuple[int, int], int] = {}
        self.arrivals: dict[tuple[int, int], dict] = {}
        self.on_answer = None
        # hot-path caches
        self._net = cluster.net
        self._resolve = cluster.resolve
        self._pow = cluster.topo._pow
        self._fwd_size = cluster.config.key_width + 12

    def _send_answer(self, node, up, key, i, payload) -> None:
        size = len(payload[1]) + 12 if payload[0] == "piece" else 12
        net = self._net
        if up[0] == "req":
            net.send(
                self._resolve(node[1]),
                up[1],
                self.ans_kind,
                body=(-1, up[1], key, i, payload),
                size=size,
            )
        else:
            net.send(
                self._resolve(node[1]),
                self._resolve(up[2]),
                self.ans_kind,
                body=(up[1], up[2], key, i, payload),
                node=(up[1], up[2]),
                size=size,
            )

    def _handle_forward(self, m, on_arrive) -> None:
        lvl, col, key, i, target, ts, up = m.body
        node = (lvl, col)
        table = self.tables.setdefault(node, {})
        ent = table.get((key, i))
        if ent is not None:
            ent["ups"].append(up)
            if ent["answer"] is not None:
                self._send_answer(node, up, key, i, ent["answer"])
            return
        count = self.distinct.get(node, 0) + 1
        self.distinct[node] = count
        ent = {"ups": [up], "answer": None}
        table[(key, i)] = ent
        if self.limit is not None and count > self.limit:
            ent["answer"] = ("fail", lvl)
            self._send_answer(node, up, key, i, ent["answer"])
            return
        if lvl > self.arrive_level:
            pow_next = self._pow[lvl - 1]
            nxt = target - target % pow_next + col % pow_next
            self._net.send(
                self._resolve(col),
                self._resolve(nxt),
                self.kind,
                body=(lvl - 1, nxt, key, i, target, ts, ("node", lvl, col)),
                node=(lvl - 1, nxt),
                size=self._fwd_size,
            )
            return
        if on_arrive is None:
            self.arrivals.setdefault(node, {})[(key, i)] = (ts, target)
            return
        ent["answer"] = on_arrive(node, key, i, ts)
        for u in ent["ups"]:
            self._send_answer(node, u, key, i, ent["answer"])

    def _handle_answer(self, m) -> None:
        lvl, col, key, i, payload = m.body
        if lvl == -1:
            self.on_answer(col, key, i, payload)
            return
        node = (lvl, col)
        ent = self.tables[node][(key, i)]
        ent["answer"] = payload
        for up in ent["ups"]:
            self._send_answer(node, up, key, i, payload)

    def _drain(self, on_arrive) -> None:
        net = self.cluster.net
        while net.pending():
            inboxes = net.step()
            for sid in sorted(inboxes):
                for m in inboxes[sid]:
                    if m.kind == self.kind:
                        self._handle_forward(m, on_arrive)
                    elif m.kind == self.ans_kind:
                        self._handle_answer(m)

    def route(self, entries, on_arrive, on_answer) -> None:
        """Launch (origin, start, key, i, target, ts) requests and run until
        quiet.  With ``on_arrive`` None, arrivals are collected for later
        :meth:`inject_answers` instead of being answered inline."""
        net = self.cluster.net
        net.set_stage(self.stage)
        self.on_answer = on_answer
        cfg = self.cluster.config
        for origin, start, key, i, target, ts in entries:
            net.send(
                origin,
                self.cluster.resolve(start),
                self.kind,
                body=(cfg.d, start, key, i, target, ts, ("req", origin)),
                node=(cfg.d, start),
                size=cfg.key_width + 12,
            )
        self._drain(on_arrive)

    def inject_answers(self, answers: dict[tuple[int, int], list]) -> None:
        """Deliver deferred answers from arrival nodes back to the origins."""
        self.cluster.net.set_stage(self.stage)
        for node in sorted(answers):
            for key, i, payload in answers[node]:
                ent = self.tables[node][(key, i)]
                ent["answer"] = payload
                for up in ent["ups"]:
                    self._send_answer(node, up, key, i, payload)
        self._drain(None)


# ---------------------------------------------------------------------------
# Metadata acquisition


def acquire_metadata(cluster, zone: int, requests: list[LookupRequest]) -> None:
    """Learn each request's bucket timestamp from a random sample of kappa
    intact servers, fetching the hash seeds from one holder when the
    requester's own copy is stale.  A sample in which nobody has the
    bucket marks the zone empty for that request."""
    cfg = cluster.config
    net = cluster.net
    net.set_stage("lookup.metadata")
    kappa = cfg.kappa
    state: dict[tuple[int, int], dict] = {}
    for r in requests:
        state[(r.server, r.key)] = {
            "rng": substream(cfg.seed, "meta", cluster.timestamp, r.server, r.key, zone),
            "needed": kappa,
            "replies": [],
        }

    def _answer_queries(inboxes, query_kind, reply_kind, reply_fn):
        for sid in sorted(inboxes):
            for m in inboxes[sid]:
                if m.kind != query_kind:
                    continue
                origin, key, bid = m.body
                rec = cluster.buckets.get(bid)
                copy = rec.copies.get(sid) if rec is not None else None
                body, size = reply_fn(key, sid, copy)
                net.send(sid, origin, reply_kind, body=body, size=size)

    for _attempt in range(6):
        pending = [r for r in requests if state[(r.server, r.key)]["needed"] > 0]
        if not pending:
            break
        for r in pending:
            st = state[(r.server, r.key)]
            bid = fbucket(zone, r.key, cfg.key_bits)
            for _ in range(st["needed"]):
                target = st["rng"].randrange(cfg.n)
                net.send(
                    r.server, target, "TS_QUERY",
                    body=(r.server, r.key, bid), size=cfg.key_width + 4,
                )
        _answer_queries(
            net.step(), "TS_QUERY", "TS_REPLY",
            lambda key, sid, copy: (
                (key, sid, copy.timestamp if copy else None), 8),
        )
        for sid in sorted(inb := net.step()):
            for m in inb[sid]:
                if m.kind == "TS_REPLY":
                    key, responder, ts = m.body
                    state[(sid, key)]["replies"].append((ts, responder))
        for r in pending:
            st = state[(r.server, r.key)]
            st["needed"] = kappa - len(st["replies"])

    seed_fetch = []
    for r in requests:
        st = state[(r.server, r.key)]
        bid = fbucket(zone, r.key, cfg.key_bits)
        rec = cluster.buckets.get(bid)
        own = rec.copies.get(r.server) if rec is not None else None
        stamps = [ts for ts, _ in st["replies"] if ts is not None]
        if own is not None:
            stamps.append(own.timestamp)
        if not stamps:
            r.zone_empty = True
            continue
        r.t_d = max(stamps)
        if own is not None and own.timestamp == r.t_d:
            r.seeds = own.seeds
        else:
            holder = min(resp for ts, resp in st["replies"] if ts == r.t_d)
            seed_fetch.append((r, holder, bid))
    if seed_fetch:
        for r, holder, bid in seed_fetch:
            net.send(r.server, holder, "SEED_QUERY",
                     body=(r.server, r.key, bid), size=cfg.key_width + 4)
        _answer_queries(
            net.step(), "SEED_QUERY", "SEED_REPLY",
            lambda key, sid, copy: (
                (key, copy.seeds if copy else ()), 8 * cfg.pieces_per_item),
        )
        for sid in sorted(inb := net.step()):
            for m in inb[sid]:
                if m.kind == "SEED_REPLY":
                    key, seeds = m.body
                    for r, _holder, _bid in seed_fetch:
                        if r.server == sid and r.key == key:
                            r.seeds = tuple(seeds)


# ---------------------------------------------------------------------------
# Probing stage


def _ceil_frac(num: int, den: int) -> int:
    return -(-num // den)


def probing_phase(cluster, zone: int, requests: list[LookupRequest]) -> None:
    """Chase all c pieces of every request along their butterfly paths and
    classify each request from the answers."""
    cfg = cluster.config
    c = cfg.pieces_per_item
    router = PathRouter(
        cluster, "PROBE", "lookup.probing",
        arrive_level=0, distinct_limit=cfg.alpha * c,
    )
    intact = cluster.intact_list()
    by_origin = {(r.server, r.key): r for r in requests}
    entries = []
    for r in sorted(requests, key=lambda r: (r.server, r.key)):
        rng = substream(cfg.seed, "probe_starts", cluster.timestamp, r.server, r.key, zone)
        for i in range(1, c + 1):
            start = intact[rng.randrange(len(intact))]
            target = placement_hash(r.seeds[i - 1], r.key, cfg.n)
            r.probes[i] = ProbeRecord(i, start, target)
            entries.append((r.server, start, r.key, i, target, r.t_d))

    def on_arrive(node, key, i, ts):
        col = node[1]
        if cluster.is_crashed(col):
            return ("fail", 0)  # a stand-in holds none of the column's pieces
        rec = cluster.buckets.get(fbucket(zone, key, cfg.key_bits))
        copy = rec.copies.get(col) if rec is not None else None
        if copy is None or copy.timestamp != ts:
            return ("fail", 0)
        piece = bk.block_piece_map(copy, cfg.key_width).get((key, i))
        if piece is None:
            return ("absent",)
        return ("piece", piece.body, piece.version)

    def on_answer(sid, key, i, payload):
        r = by_origin[(sid, key)]
        pr = r.probes[i]
        if payload[0] == "piece":
            pr.outcome = "piece"
            r.pieces.setdefault(i, Piece(key, i, payload[1], payload[2]))
        elif payload[0] == "absent":
            pr.outcome = "absent"
        else:
            pr.outcome = "fail"
            pr.fail_level = payload[1]

    router.route(entries, on_arrive, on_answer)
    for r in requests:
        _classify(cluster, r)


def _answer_request(cluster, r: LookupRequest) -> None:
    cfg = cluster.config
    versions = {p.version for p in r.pieces.values()}
    if len(versions) != 1:
        majority = max(versions, key=lambda v: sum(
            1 for p in r.pieces.values() if p.version == v))
        r.events.append("mixed piece versions %r, keeping v%d" % (sorted(versions), majority))
        r.pieces = {i: p for i, p in r.pieces.items() if p.version == majority}
        if len(r.pieces) < codec.piece_threshold(cfg.pieces_per_item):
            return
    chosen = list(r.pieces.values())
    payload = codec.rs_decode(chosen, cfg.pieces_per_item, cfg.payload_size)
    r.answer = DataItem(r.key, payload, chosen[0].version)
    r.status = "answered"


def _classify(cluster, r: LookupRequest) -> None:
    """Post-probing classification: answer, absent-at-this-zone, or a
    butterfly level for the decoding stage."""
    cfg = cluster.config
    c = cfg.pieces_per_item
    threshold = codec.piece_threshold(c)
    if len(r.pieces) >= threshold:
        _answer_request(cluster, r)
        if r.status == "answered":
            return
    if any(p.outcome == "absent" for p in r.probes.values()):
        r.zone_absent = True
        return
    fail0 = sum(1 for p in r.probes.values()
                if p.outcome == "fail" and p.fail_level == 0)
    need = _ceil_frac(5 * c, 6)
    level = None
    for lvl in range(1, cfg.d + 1):
        if sum(1 for p in r.probes.values() if p.active_at(lvl)) >= need:
            level = lvl
            break
    if level is None:
        level = 1
        r.events.append("no level kept %d active probes; defaulting to 1" % need)
    if not fail0 * 3 > 2 * c:
        r.events.append(
            "classified to level %d with only %d level-0 fails" % (level, fail0))
    r.level = level


# ---------------------------------------------------------------------------
# Decoding stage


def _spread_checks(cluster, survivors: dict, level: int, limit: float) -> set:
    """Spread per-piece decode checks up the initiators' trees; any node
    collecting more distinct checks than the limit poisons its whole
    level-``level`` sub-butterfly.  Returns the poisoned (bucket, base)
    pairs.  Congestion notices and fail-backs ride real messages so their
    rounds and load are charged."""
    topo = cluster.topo
    net = cluster.net
    carried: dict[tuple[int, int], set] = {}
    for v, decs in survivors.items():
        carried[v] = {(bid, key, i) for (bid, key, i) in decs}
    seen: dict[tuple[int, int], set] = {node: set(s) for node, s in carried.items()}
    senders_of: dict[tuple[int, int], set] = {}
    poisoned: set[tuple[int, int]] = set()
    for _step in range(level):
        for node in sorted(carried):
            checks = carried[node]
            if not checks or node in poisoned or node[0] == 0:
                continue
            for up_col in topo.group_members(node[1], node[0] - 1):
                net.send(
                    cluster.resolve(node[1]),
                    cluster.resolve(up_col),
                    "DECODE_CHECK",
                    body=(node[0] - 1, up_col, node, tuple(sorted(checks))),
                    node=(node[0] - 1, up_col),
                    size=8 * len(checks),
                )
        nxt: dict[tuple[int, int], set] = {}
        for sid in sorted(inb := net.step()):
            for m in inb[sid]:
                lvl, col, sender, checks = m.body
                node = (lvl, col)
                seen.setdefault(node, set()).update(checks)
                senders_of.setdefault(node, set()).add(sender)
                nxt.setdefault(node, set()).update(checks)
        carried = {}
        for node, checks in nxt.items():
            if len(seen[node]) > limit:
                poisoned.add(node)
            else:
                carried[node] = checks
    poisoned_bases: set[int] = set()
    if poisoned:
        # fail-backs travel to the initiators, congestion notices blanket
        # the poisoned nodes' sub-butterflies
        for node in sorted(poisoned):
            poisoned_bases.add(topo.sub_butterfly_base(level, node[1]))
        frontier = {node: None for node in poisoned}
        for _step in range(2 * level):
            for node in sorted(frontier):
                for sender in sorted(senders_of.get(node, ())):
                    net.send(
                        cluster.resolve(node[1]),
                        cluster.resolve(sender[1]),
                        "CONG",
                        body=(sender, node),
                        node=sender,
                        size=4,
                    )
            nxt_frontier = {}
            for sid in sorted(inb := net.step()):
                for m in inb[sid]:
                    target = m.body[0]
                    if target[0] < level:
                        nxt_frontier[target] = None
            frontier = nxt_frontier
            if not frontier:
                break
    return poisoned_bases


def decoding_subphase(cluster, zone: int, level: int,
                      requests: list[LookupRequest]) -> None:
    """One decoding sub-phase: route decode requests to their level-``level``
    path nodes, drop congested targets, rebuild the surviving
    sub-butterflies, and answer with the recovered pieces."""
    cfg = cluster.config
    topo = cluster.topo
    c = cfg.pieces_per_item
    limit = cfg.beta * c * cfg.k
    router = PathRouter(
        cluster, "DECODE", "lookup.decoding",
        arrive_level=level, distinct_limit=None,
    )
    by_origin = {(r.server, r.key): r for r in requests}
    need = _ceil_frac(5 * c, 6)
    entries = []
    for r in sorted(requests, key=lambda r: (r.server, r.key)):
        pool = sorted(i for i, p in r.probes.items() if p.active_at(level))
        rng = substream(cfg.seed, "decode_pick", cluster.timestamp,
                        r.server, r.key, zone, level)
        chosen = sorted(rng.sample(pool, min(need, len(pool))))
        for i in chosen:
            pr = r.probes[i]
            entries.append((r.server, pr.start_col, r.key, i, pr.target_col, r.t_d))
    router.route(entries, None, None)

    # congestion at the arrival nodes themselves
    survivors: dict[tuple[int, int], dict] = {}
    failed_nodes: dict[tuple[int, int], dict] = {}
    for v, decs in router.arrivals.items():
        tagged = {
            (fbucket(zone, key, cfg.key_bits), key, i): (ts, target)
            for (key, i), (ts, target) in decs.items()
        }
        if len(decs) > limit:
            failed_nodes[v] = tagged
        else:
            survivors[v] = tagged

    poisoned_bases = _spread_checks(cluster, survivors, level, limit)

    # cooperative recovery of the surviving sub-butterflies, grouped per
    # bucket so flows over the same columns share rounds
    flows: dict[tuple, set[int]] = {}
    for v, decs in sorted(survivors.items()):
        base = topo.sub_butterfly_base(level, v[1])
        if base in poisoned_bases:
            continue
        for bid, key, i in decs:
            flows.setdefault(bid, set()).add(base)
    tasks = []
    tags = []
    for bid in sorted(flows):
        tasks.append((cluster.buckets.get(bid), sorted(flows[bid])))
        tags.append(bid)
    results = run_block_recovery(cluster, tasks, level, "lookup.decoding")
    recovered = {bid: res for bid, res in zip(tags, results)}

    answers: dict[tuple[int, int], list] = {}
    piece_maps: dict[tuple, dict] = {}
    for v, decs in sorted(failed_nodes.items()):
        for (bid, key, i), (ts, target) in sorted(decs.items()):
            answers.setdefault(v, []).append((key, i, ("fail", level)))
    for v, decs in sorted(survivors.items()):
        base = topo.sub_butterfly_base(level, v[1])
        for (bid, key, i), (ts, target) in sorted(decs.items()):
            if base in poisoned_bases:
                payload = ("fail", level)
            else:
                entry = recovered[bid].get(target)
                if entry is None or entry[0] != ts:
                    payload = ("fail", level)
                else:
                    pm = piece_maps.get((bid, target))
                    if pm is None:
                        pm = {
                            (p.item_key, p.index): p
                            for p in bk.parse_block(entry[2].block(), cfg.key_width)
                        }
                        piece_maps[(bid, target)] = pm
                    piece = pm.get((key, i))
                    if piece is None:
                        payload = ("absent",)
                    else:
                        payload = ("piece", piece.body, piece.version)
            answers.setdefault(v, []).append((key, i, payload))

    def on_answer(sid, key, i, payload):
        r = by_origin[(sid, key)]
        if payload[0] == "piece":
            r.pieces.setdefault(i, Piece(key, i, payload[1], payload[2]))
        elif payload[0] == "absent":
            r.zone_absent = True

    router.on_answer = on_answer
    router.inject_answers(answers)

    threshold = codec.piece_threshold(c)
    for r in requests:
        if r.status != "pending":
            continue
        if len(r.pieces) >= threshold:
            _answer_request(cluster, r)
            if r.status == "answered":
                continue
        if r.zone_absent:
            continue
        r.level = level + 1
        if r.level > cfg.d:
            r.status = "failed"
            r.events.append("decoding exhausted at zone %d" % zone)


# ---------------------------------------------------------------------------
# Zone loop


def zone_examination(cluster, requests: list[LookupRequest]) -> dict:
    """Run every pending lookup through the zones until answered; collects
    the per-level statistics used by the tail-bound checks."""
    cfg = cluster.config
    stats = {"belongs": [], "decode_entries": []}
    for zone in range(cfg.key_bits + 1):
        active = [r for r in requests if r.status == "pending"]
        if not active:
            break
        for r in active:
            r.reset_zone(zone)
        acquire_metadata(cluster, zone, active)
        probing = [r for r in active if not r.zone_empty]
        if not probing:
            continue
        probing_phase(cluster, zone, probing)
        belongs: dict[int, set] = {}
        for r in probing:
            if r.status == "pending" and not r.zone_absent and r.level > 0:
                belongs.setdefault(r.level, set()).add(r.key)
        if belongs:
            stats["belongs"].append({
                "zone": zone,
                "counts": {lvl: len(keys) for lvl, keys in sorted(belongs.items())},
            })
        for level in range(1, cfg.d + 1):
            batch = [
                r for r in probing
                if r.status == "pending" and not r.zone_absent and r.level == level
            ]
            if not batch:
                continue
            stats["decode_entries"].append(
                {"zone": zone, "level": level,
                 "count": len({r.key for r in batch})})
            decoding_subphase(cluster, zone, level, batch)
        for r in active:
            if r.status == "pending" and not (r.zone_empty or r.zone_absent):
                r.status = "failed"
                r.events.append("unanswered after zone %d decoding" % zone)
    for r in requests:
        if r.status == "pending":
            r.status = "not_exists"
    return stats
