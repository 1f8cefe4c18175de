import random

import pytest

from bucketstore import buckets as bk
from bucketstore.buckets import ROOT, key_bit
from bucketstore.cluster import Cluster
from bucketstore.codec import DataItem
from bucketstore.simnet import Config, Net, Request
from bucketstore.write_protocol import (
    InvariantViolation,
    RepresentativesInfeasible,
    assign_representatives,
    count_items,
    decode_bucket,
    encode_bucket,
    preprocess_period,
    select_overflow,
    write_stage,
)


def make_cluster(n=27, k=3, d=3, **overrides) -> Cluster:
    base = dict(n=n, k=k, d=d, p=2, c=12, payload_bytes=64, seed=5)
    base.update(overrides)
    return Cluster(Config(**base))


def open_stage(cluster, crash=()):
    """Set up a bare period context so protocol steps can run directly."""
    cluster.timestamp += 1
    cluster.crash_set = set(crash)
    cluster._intact = [s for s in range(cluster.config.n)
                       if s not in cluster.crash_set]
    cluster.net = Net(cluster.is_crashed, cluster.config.period_round_cap)
    cluster.encodes_this_period = []
    preprocess_period(cluster)


def make_items(rng, cluster, count, bit_zone=None, bit=None):
    items = {}
    space = 1 << cluster.config.key_bits
    while len(items) < count:
        key = rng.randrange(space)
        if key in items:
            continue
        if bit is not None and key_bit(key, bit_zone) != bit:
            continue
        items[key] = DataItem(key, rng.randbytes(cluster.config.payload_size),
                              cluster.timestamp)
    return items


def spread(items, columns, rng):
    """Assign items to owner columns roughly evenly."""
    owners = {}
    cols = list(columns)
    for key in sorted(items):
        col = cols[rng.randrange(len(cols))]
        owners.setdefault(col, {})[key] = items[key]
    return owners


class TestRepresentatives:
    def test_identity_without_crashes(self):
        rmap = assign_representatives(set(), 9)
        assert all(rmap.rep[s] == s for s in range(9))
        assert rmap.loads == {}

    def test_two_crashes_at_n9(self):
        rmap = assign_representatives({0, 1}, 9)
        assert rmap.rep[0] != 0 and rmap.rep[1] != 1
        assert not {rmap.rep[0], rmap.rep[1]} & {0, 1}
        assert all(load <= 2 for load in rmap.loads.values())

    def test_loads_never_exceed_two(self):
        rng = random.Random(3)
        for _ in range(30):
            crash = set(rng.sample(range(27), rng.randrange(0, 18)))
            rmap = assign_representatives(crash, 27)
            assert all(load <= 2 for load in rmap.loads.values())
            for s in crash:
                assert rmap.rep[s] not in crash

    def test_infeasible_raises(self):
        with pytest.raises(RepresentativesInfeasible):
            assign_representatives({0, 1, 2}, 4)

    def test_infeasible_aborts_period(self):
        cluster = make_cluster(n=4, k=2, d=2)
        report = cluster.run_period({0, 1, 2}, [])
        assert report.aborted and report.aborted.startswith("preprocess")


class TestEncodeDecodeBucket:
    def test_roundtrip_no_crashes(self):
        cluster = make_cluster()
        rng = random.Random(1)
        open_stage(cluster)
        items = make_items(rng, cluster, 30)
        encode_bucket(cluster, ROOT, spread(items, range(27), rng))
        rec = cluster.buckets[ROOT]
        assert rec.members.keys() == items.keys()
        open_stage(cluster)
        maintained, events = decode_bucket(cluster, rec, set())
        assert events == []
        got = {}
        for col_items in maintained.values():
            got.update(col_items)
        assert {k: v.payload for k, v in got.items()} == {
            k: v.payload for k, v in items.items()}

    def test_roundtrip_one_crash_per_group(self):
        cluster = make_cluster()
        rng = random.Random(2)
        open_stage(cluster)
        items = make_items(rng, cluster, 27)
        encode_bucket(cluster, ROOT, spread(items, range(27), rng))
        rec = cluster.buckets[ROOT]
        # one crashed column in every level-1 parity group
        crash = set(range(0, 27, 3))
        open_stage(cluster, crash)
        maintained, events = decode_bucket(cluster, rec, set())
        assert events == []
        got = {}
        for col_items in maintained.values():
            got.update(col_items)
        assert {k: v.payload for k, v in got.items()} == {
            k: v.payload for k, v in items.items()}

    def test_outdated_columns_recovered(self):
        cluster = make_cluster()
        rng = random.Random(3)
        # first encode while column 5 is crashed: its stored copy stays stale
        open_stage(cluster, {5})
        items = make_items(rng, cluster, 20)
        encode_bucket(cluster, ROOT, spread(items, sorted(set(range(27)) - {5}), rng))
        rec = cluster.buckets[ROOT]
        assert 5 not in rec.copies or rec.copies[5].timestamp != rec.timestamp
        open_stage(cluster)
        maintained, events = decode_bucket(cluster, rec, set())
        assert events == []
        got = {}
        for col_items in maintained.values():
            got.update(col_items)
        assert got.keys() == items.keys()

    def test_empty_encode_resets_state(self):
        cluster = make_cluster()
        open_stage(cluster)
        encode_bucket(cluster, ROOT, {})
        rec = cluster.buckets[ROOT]
        assert rec.members == {}
        assert rec.timestamp == cluster.timestamp

    def test_whole_stale_group_heals_through_other_levels(self):
        # an entire digit-0 parity group misses one encode; its members
        # must re-base from their other groups before reaching level 0
        cluster = make_cluster()
        rng = random.Random(50)
        open_stage(cluster)
        encode_bucket(cluster, ROOT,
                      spread(make_items(rng, cluster, 20), range(27), rng))
        old_ts = cluster.buckets[ROOT].timestamp
        open_stage(cluster, {0, 1, 2})
        items = make_items(rng, cluster, 20)
        encode_bucket(cluster, ROOT,
                      spread(items, sorted(set(range(27)) - {0, 1, 2}), rng))
        rec = cluster.buckets[ROOT]
        assert all(rec.copies[c].timestamp == old_ts for c in (0, 1, 2))
        open_stage(cluster)
        maintained, events = decode_bucket(cluster, rec, set())
        got = {}
        for ci in maintained.values():
            got.update(ci)
        assert events == []
        assert {k: v.payload for k, v in got.items()} == {
            k: v.payload for k, v in items.items()}
        # and again with part of the stale group crashed outright
        open_stage(cluster, {0, 1})
        maintained, events = decode_bucket(cluster, rec, set())
        got = {}
        for ci in maintained.values():
            got.update(ci)
        assert events == [] and got.keys() == items.keys()

    def test_supersede_drops_overwritten_copies(self):
        cluster = make_cluster()
        rng = random.Random(4)
        open_stage(cluster)
        items = make_items(rng, cluster, 12)
        encode_bucket(cluster, ROOT, spread(items, range(27), rng))
        rec = cluster.buckets[ROOT]
        victim = sorted(items)[0]
        open_stage(cluster)
        maintained, _ = decode_bucket(cluster, rec, {victim})
        got = set()
        for col_items in maintained.values():
            got.update(col_items)
        assert victim not in got
        assert got == set(items) - {victim}

    def test_cap_enforced(self):
        cluster = make_cluster()
        rng = random.Random(5)
        open_stage(cluster)
        items = make_items(rng, cluster, 2 * 27 + 1)
        with pytest.raises(InvariantViolation):
            encode_bucket(cluster, ROOT, spread(items, range(27), rng))


class TestCounting:
    def brute_force(self, cluster, zone, maintained, incoming):
        n0 = n1 = 0
        for source in (maintained, incoming):
            for col_items in source.values():
                for key in col_items:
                    if key_bit(key, zone):
                        n1 += 1
                    else:
                        n0 += 1
        return n0, n1

    @pytest.mark.parametrize("seed", range(6))
    def test_counts_match_oracle(self, seed):
        cluster = make_cluster()
        rng = random.Random(seed)
        open_stage(cluster)
        stored = make_items(rng, cluster, rng.randrange(0, 55))
        encode_bucket(cluster, ROOT, spread(stored, range(27), rng))
        rec = cluster.buckets[ROOT]
        open_stage(cluster)
        maintained, _ = decode_bucket(cluster, rec, set()) if stored else ({}, [])
        incoming = spread(
            make_items(rng, cluster, rng.randrange(0, 28)), range(27), rng)
        for key in {k for ci in maintained.values() for k in ci}:
            for ci in incoming.values():
                ci.pop(key, None)
        num0, num1, _tuples = count_items(cluster, 0, maintained, incoming)
        assert (num0, num1) == self.brute_force(cluster, 0, maintained, incoming)

    def test_all_same_bit(self):
        cluster = make_cluster()
        rng = random.Random(9)
        open_stage(cluster)
        incoming = spread(
            make_items(rng, cluster, 20, bit_zone=0, bit=0), range(27), rng)
        num0, num1, _ = count_items(cluster, 0, {}, incoming)
        assert (num0, num1) == (20, 0)

    def test_empty(self):
        cluster = make_cluster()
        open_stage(cluster)
        assert count_items(cluster, 0, {}, {})[:2] == (0, 0)


class TestSelection:
    def run_selection(self, cluster, rng, stored_count, incoming_count, zone=0):
        open_stage(cluster)
        stored = make_items(rng, cluster, stored_count)
        if stored:
            encode_bucket(cluster, ROOT, spread(stored, range(27), rng))
        open_stage(cluster)
        maintained = ({}, [])
        if stored:
            maintained = decode_bucket(cluster, cluster.buckets[ROOT], set())
        maintained = maintained[0]
        incoming = spread(
            make_items(rng, cluster, incoming_count), range(27), rng)
        for key in {k for ci in maintained.values() for k in ci}:
            for ci in incoming.values():
                ci.pop(key, None)
        num0, num1, tuples = count_items(cluster, zone, maintained, incoming)
        return maintained, incoming, num0, num1, tuples

    @pytest.mark.parametrize("seed", range(5))
    def test_exactly_n_uniform_bit(self, seed):
        cluster = make_cluster()
        n = cluster.config.n
        rng = random.Random(100 + seed)
        maintained, incoming, num0, num1, tuples = self.run_selection(
            cluster, rng, 50, 20)
        assert num0 + num1 > 2 * n
        bit = 0 if num0 > n else 1
        before = {k for src in (maintained, incoming)
                  for ci in src.values() for k in ci}
        selected = select_overflow(cluster, 0, maintained, incoming, tuples, bit)
        chosen = [item for items in selected.values() for item in items]
        assert len(chosen) == n
        assert all(key_bit(item.key, 0) == bit for item in chosen)
        after = {k for src in (maintained, incoming)
                 for ci in src.values() for k in ci}
        assert after | {i.key for i in chosen} == before
        assert len(after) == len(before) - n

    def test_single_leaf_holds_everything(self):
        cluster = make_cluster()
        n = cluster.config.n
        rng = random.Random(11)
        open_stage(cluster)
        items = make_items(rng, cluster, 2 * n + 1, bit_zone=0, bit=1)
        incoming = {0: dict(items)}
        num0, num1, tuples = count_items(cluster, 0, {}, incoming)
        assert (num0, num1) == (0, 2 * n + 1)
        selected = select_overflow(cluster, 0, {}, incoming, tuples, 1)
        assert list(selected) == [0]
        assert len(selected[0]) == n


class TestWriteStage:
    def writes_for(self, cluster, rng, count, bit_zone=None, bit=None):
        items = make_items(rng, cluster, count, bit_zone, bit)
        servers = cluster.intact_list()
        return {servers[idx]: item
                for idx, item in enumerate(items.values())}

    def test_fresh_system_single_phase(self):
        cluster = make_cluster()
        rng = random.Random(21)
        open_stage(cluster)
        writes = self.writes_for(cluster, rng, 20)
        phases = write_stage(cluster, writes)
        assert len(phases) == 1 and not phases[0]["overflow"]
        rec = cluster.buckets[ROOT]
        assert rec.members.keys() == {item.key for item in writes.values()}

    def test_scripted_overflow_into_child0(self):
        cluster = make_cluster()
        n = cluster.config.n
        rng = random.Random(22)
        # preload the root with 2n items whose zone-0 bit is 0
        open_stage(cluster)
        stored = make_items(rng, cluster, 2 * n, bit_zone=0, bit=0)
        encode_bucket(cluster, ROOT, spread(stored, range(n), rng))
        open_stage(cluster)
        writes = self.writes_for(cluster, rng, n, bit_zone=0, bit=0)
        phases = write_stage(cluster, writes)
        assert phases[0]["overflow"] and phases[0]["pushed_bit"] == 0
        child = ROOT.child(0)
        assert child in cluster.buckets
        child_rec = cluster.buckets[child]
        assert child_rec.item_count == n
        assert n <= cluster.buckets[ROOT].item_count <= 2 * n
        every = set(cluster.buckets[ROOT].members) | set(child_rec.members)
        assert every == set(stored) | {item.key for item in writes.values()}

    def test_overwrite_across_periods_keeps_newest(self):
        cluster = make_cluster()
        payload1 = bytes([1]) * 64
        payload2 = bytes([2]) * 64
        r1 = cluster.run_period(set(), [Request("write", 0, 99, payload1)])
        r2 = cluster.run_period(set(), [Request("write", 3, 99, payload2)])
        assert not r1.safety_violations and not r2.safety_violations
        rec = cluster.buckets[ROOT]
        assert rec.members[99].payload == payload2
        report = cluster.run_period(set(), [Request("lookup", 5, 99)])
        out = [o for o in report.outcomes if o["op"] == "lookup"][0]
        assert out["status"] == "answered" and out["correct"]

    def test_phase_rounds_within_cap(self):
        cluster = make_cluster()
        rng = random.Random(23)
        for _ in range(4):
            open_stage(cluster)
            writes = self.writes_for(cluster, rng, 27)
            phases = write_stage(cluster, writes)
            for phase in phases:
                assert phase["rounds"] <= cluster.config.phase_round_cap

    def test_seeds_rotate_only_on_reencode(self):
        cluster = make_cluster()
        payload = bytes(64)
        cluster.run_period(set(), [Request("write", 0, 11, payload)])
        first = cluster.buckets[ROOT].seeds
        cluster.run_period(set(), [Request("lookup", 1, 11)])
        assert cluster.buckets[ROOT].seeds == first  # lookups never touch seeds
        cluster.run_period(set(), [Request("write", 2, 12, payload)])
        assert cluster.buckets[ROOT].seeds != first  # re-encode redraws them
