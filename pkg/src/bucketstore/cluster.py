"""Cluster state and the period lifecycle.

A period applies one adversarial crash set atomically, absorbs at most one
write and one lookup request per intact server, runs the write stage and
then the lookup zone loop inside a fresh round budget, and checks the
results against the simulator-side oracle before reporting.
"""

from __future__ import annotations

import hashlib

from bucketstore import buckets as bk
from bucketstore.buckets import BucketRecord, GlobalDirectory, bucket_size_check, freshness_violations
from bucketstore.butterfly import Topology
from bucketstore.codec import DataItem
from bucketstore.lookup_protocol import LookupRequest, zone_examination
from bucketstore.simnet import (
    Config,
    Net,
    PeriodReport,
    Request,
    RoundCapExceeded,
    ScenarioError,
    ServerState,
    substream,
)
from bucketstore.write_protocol import (
    InvariantViolation,
    RepresentativeMap,
    RepresentativesInfeasible,
    preprocess_period,
    write_stage,
)


def _digest(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()[:16]


class Cluster:
    def __init__(self, config: Config):
        config.validate()
        self.config = config
        self.topo = Topology(config.k, config.d)
        self.servers = [ServerState(i) for i in range(config.n)]
        self.buckets: dict[bk.BucketId, BucketRecord] = {}
        self.directory = GlobalDirectory()
        self.timestamp = 0
        self.period_index = 0
        self.crash_set: set[int] = set()
        self.rep_map = RepresentativeMap({i: i for i in range(config.n)}, {})
        self.net: Net | None = None
        self.encodes_this_period: list[dict] = []
        self._intact: list[int] = list(range(config.n))
        self._rep_table: list[int] = list(range(config.n))

    # -- state oracles --------------------------------------------------------

    def is_crashed(self, server: int) -> bool:
        return server in self.crash_set

    def set_rep_map(self, rmap: RepresentativeMap) -> None:
        self.rep_map = rmap
        self._rep_table = [rmap.rep.get(col, col) for col in range(self.config.n)]

    def resolve(self, column: int) -> int:
        """The server acting for a column: itself, or its representative."""
        return self._rep_table[column]

    def intact_list(self) -> list[int]:
        return self._intact

    def substream(self, *labels):
        return substream(self.config.seed, *labels)

    def storage_bytes(self) -> int:
        total = 0
        for rec in self.buckets.values():
            for copy in rec.copies.values():
                total += copy.stack.total_bytes()
        return total

    def plain_bytes(self) -> int:
        return len(self.directory.latest) * self.config.payload_size

    def redundancy(self) -> float:
        plain = self.plain_bytes()
        return self.storage_bytes() / plain if plain else 0.0

    # -- period lifecycle -------------------------------------------------------

    def begin_period(self, crash_set: set[int], requests: list[Request],
                     budget: int | None, report: PeriodReport):
        cfg = self.config
        if budget is not None and len(crash_set) > budget:
            raise ScenarioError(
                "crash set of %d exceeds the period budget %d"
                % (len(crash_set), budget))
        if len(crash_set) >= cfg.n:
            raise ScenarioError("at least one server must stay intact")
        for s in crash_set:
            if not (0 <= s < cfg.n):
                raise ScenarioError("crash target %r out of range" % (s,))
        self.crash_set = set(crash_set)
        self._intact = [s for s in range(cfg.n) if s not in self.crash_set]
        for s in self.servers:
            s.crashed = s.sid in self.crash_set
            s.lookup_keys = []
            s.write_items = []
        write_claims: dict[int, tuple[int, bytes]] = {}
        lookups: list[LookupRequest] = []
        seen_writes: set[int] = set()
        seen_lookups: set[int] = set()
        for req in requests:
            if not (0 <= req.server < cfg.n):
                raise ScenarioError("request server %r out of range" % (req.server,))
            if not (0 <= req.key < (1 << cfg.key_bits)):
                raise ScenarioError("key %r outside the %d-bit space"
                                    % (req.key, cfg.key_bits))
            if self.is_crashed(req.server):
                report.outcomes.append({
                    "op": req.op, "server": req.server, "key": req.key,
                    "status": "dropped", "note": "addressed to a crashed server",
                })
                continue
            if req.op == "write":
                if len(req.payload) != cfg.payload_size:
                    raise ScenarioError(
                        "payload of %d bytes differs from the configured %d"
                        % (len(req.payload), cfg.payload_size))
                if req.server in seen_writes:
                    raise ScenarioError(
                        "more than one write at server %d in one period" % req.server)
                seen_writes.add(req.server)
                write_claims[req.server] = (req.key, req.payload)
            elif req.op == "lookup":
                if req.server in seen_lookups:
                    raise ScenarioError(
                        "more than one lookup at server %d in one period" % req.server)
                seen_lookups.add(req.server)
                lookups.append(LookupRequest(req.server, req.key))
            else:
                raise ScenarioError("unknown request op %r" % (req.op,))
        # same-key writes in one batch: highest server id wins
        winners: dict[int, int] = {}
        for server, (key, _payload) in write_claims.items():
            if key not in winners or server > winners[key]:
                winners[key] = server
        writes: dict[int, DataItem] = {}
        for server in sorted(write_claims):
            key, payload = write_claims[server]
            if winners[key] != server:
                report.outcomes.append({
                    "op": "write", "server": server, "key": key,
                    "status": "superseded",
                    "note": "same-key write at server %d wins" % winners[key],
                })
                continue
            writes[server] = DataItem(key, payload, self.timestamp)
        return writes, lookups

    def run_period(self, crash_set: set[int], requests: list[Request],
                   budget: int | None = None) -> PeriodReport:
        cfg = self.config
        self.period_index += 1
        self.timestamp += 1
        report = PeriodReport(
            period=self.period_index,
            timestamp=self.timestamp,
            crash_set=sorted(crash_set),
        )
        writes, lookups = self.begin_period(crash_set, requests, budget, report)
        self.net = Net(self.is_crashed, cfg.period_round_cap)
        self.encodes_this_period = []
        lookup_stats: dict = {}
        applied_writes = False
        try:
            preprocess_period(self)
            if writes:
                report.write_phases = write_stage(self, writes)
                applied_writes = True
                for server in sorted(writes):
                    item = writes[server]
                    self.directory.record_write(item)
                    report.outcomes.append({
                        "op": "write", "server": server, "key": item.key,
                        "status": "applied", "version": item.version,
                    })
            if lookups:
                lookup_stats = zone_examination(self, lookups)
        except RepresentativesInfeasible as exc:
            report.aborted = "preprocess: %s" % exc
        except RoundCapExceeded as exc:
            report.aborted = "round-cap: %s" % exc
            report.bound_violations.append(str(exc))
        except InvariantViolation as exc:
            report.aborted = "invariant: %s" % exc
            report.safety_violations.append(str(exc))
        if report.aborted and not applied_writes and writes:
            # writes that still made it into an encode are durable; keep the
            # oracle aligned with what the system actually holds
            stored = {}
            for rec in self.buckets.values():
                for key, item in rec.members.items():
                    if item.version == self.timestamp:
                        stored[key] = item
            for server in sorted(writes):
                item = writes[server]
                if item.key in stored and stored[item.key].payload == item.payload:
                    self.directory.record_write(item)
                    status = "applied"
                else:
                    status = "failed"
                report.outcomes.append({
                    "op": "write", "server": server, "key": item.key,
                    "status": status, "note": report.aborted,
                })
        self._finalize_lookups(lookups, report)
        self._run_checks(report, lookup_stats)
        return report

    # -- reporting and verification ---------------------------------------------

    def _finalize_lookups(self, lookups: list[LookupRequest],
                          report: PeriodReport) -> None:
        for r in lookups:
            truth = self.directory.lookup(r.key)
            out = {"op": "lookup", "server": r.server, "key": r.key}
            if r.status == "answered":
                ok = (
                    truth is not None
                    and r.answer.payload == truth.payload
                    and r.answer.version == truth.version
                )
                out.update({
                    "status": "answered",
                    "version": r.answer.version,
                    "digest": _digest(r.answer.payload),
                    "correct": ok,
                })
                if not ok:
                    report.safety_violations.append(
                        "lookup(%d) answered v%d but the newest write is %s"
                        % (r.key, r.answer.version,
                           "v%d" % truth.version if truth else "absent"))
            elif r.status == "not_exists":
                ok = truth is None
                out.update({"status": "not_exists", "correct": ok})
                if not ok:
                    report.safety_violations.append(
                        "lookup(%d) reported not-exists but v%d is live"
                        % (r.key, truth.version))
            else:
                status = r.status if r.status != "pending" else "failed"
                out.update({"status": status, "correct": None})
            if r.events:
                out["events"] = list(r.events)
            report.outcomes.append(out)

    def _run_checks(self, report: PeriodReport, lookup_stats: dict) -> None:
        cfg = self.config
        net = self.net
        for bid in sorted(self.buckets):
            problem = bucket_size_check(bid, self.buckets[bid].item_count, cfg.n)
            if problem:
                report.safety_violations.append(problem)
        for problem in freshness_violations(self.buckets, self.directory):
            report.safety_violations.append("freshness: %s" % problem)
        report.rounds_used = net.rounds_used
        report.rounds_by_stage = dict(net.rounds_by_stage)
        report.max_congestion = net.max_congestion
        report.congestion_by_stage = dict(net.congestion_by_stage)
        report.messages_total = net.messages_total
        report.max_message_bytes = net.max_message_bytes
        report.dropped_to_crashed = net.dropped_to_crashed
        for phase in report.write_phases:
            if phase.get("rounds", 0) > cfg.phase_round_cap:
                report.bound_violations.append(
                    "write phase at zone %d used %d rounds (cap %d)"
                    % (phase["zone"], phase["rounds"], cfg.phase_round_cap))
        write_rounds = sum(
            rounds for stage, rounds in net.rounds_by_stage.items()
            if stage.startswith("write."))
        if write_rounds > cfg.write_stage_round_cap:
            report.bound_violations.append(
                "write stage used %d rounds (cap %d)"
                % (write_rounds, cfg.write_stage_round_cap))
        if net.max_congestion > cfg.congestion_alarm:
            report.bound_violations.append(
                "congestion peaked at %d (alarm %d)"
                % (net.max_congestion, cfg.congestion_alarm))
        if cfg.max_message_bytes and net.max_message_bytes > cfg.max_message_bytes:
            report.bound_violations.append(
                "message of %d bytes exceeds the %d-byte cap"
                % (net.max_message_bytes, cfg.max_message_bytes))
        report.storage_bytes = self.storage_bytes()
        report.plain_bytes = self.plain_bytes()
        report.redundancy = self.redundancy()
        report.lemma = {
            "lookup": lookup_stats,
            "encodes": [
                {"bucket": [e["bucket"].zone, e["bucket"].prefix_str() or "-"],
                 "items": len(e["keys"])}
                for e in self.encodes_this_period
            ],
        }
