"""Acceptance suite: one test per headline criterion, each printing a
pass/fail line.  Tolerances are pinned here and nowhere else.

The statistical criteria run many seeded scenarios; they are the slow part
of the suite (a few minutes each) and print progress through pytest's -s.
"""

import itertools
import json
import random

import pytest

from bucketstore import adversary, codec
from bucketstore.buckets import ROOT
from bucketstore.cluster import Cluster
from bucketstore.harness import (
    EXIT_OK,
    load_scenario,
    measure_redundancy,
    predicted_redundancy,
    run_scenario,
)
from bucketstore.simnet import Config
from bucketstore.write_protocol import count_items, decode_bucket, encode_bucket

from test_write_protocol import make_cluster, make_items, open_stage, spread


def _report(name: str, ok: bool, detail: str = "") -> None:
    print("ACCEPTANCE %-28s %s %s" % (name, "PASS" if ok else "FAIL", detail))
    assert ok, "%s: %s" % (name, detail)


# -- 1. codec subset decode ---------------------------------------------------


def test_criterion_1_codec_subset_decode():
    ok = True
    for c in (3, 6, 9):
        payload = bytes(range(7, 47))
        pieces = codec.rs_encode(codec.DataItem(1, payload, 0), c)
        t = codec.piece_threshold(c)
        for subset in itertools.combinations(pieces, t):
            if codec.rs_decode(subset, c, len(payload)) != payload:
                ok = False
    rng = random.Random(17)
    for k in range(2, 9):
        blocks = [rng.randbytes(rng.randrange(1, 24)) for _ in range(k)]
        cws = codec.group_encode(blocks)
        for missing in range(k):
            got = codec.group_decode(
                [cw for cw in cws if cw.group_index != missing], k)
            if got != blocks:
                ok = False
    _report("1-codec-subset-decode", ok, "(c in {3,6,9} exhaustive; k in 2..8)")


# -- 2. counting / selection oracle equivalence --------------------------------


def test_criterion_2_count_select_oracle():
    from bucketstore.buckets import key_bit
    from bucketstore.write_protocol import select_overflow

    failures = []
    for seed in range(100):
        cluster = make_cluster(n=27, k=3, d=3, seed=seed)
        n = 27
        rng = random.Random(1000 + seed)
        stored_count = rng.randrange(0, 2 * n + 1)
        incoming_count = rng.randrange(0, n + 1)
        open_stage(cluster)
        stored = make_items(rng, cluster, stored_count)
        if stored:
            encode_bucket(cluster, ROOT, spread(stored, range(n), rng))
        open_stage(cluster)
        maintained = {}
        if stored:
            maintained, _ = decode_bucket(cluster, cluster.buckets[ROOT], set())
        incoming = spread(make_items(rng, cluster, incoming_count), range(n), rng)
        for key in {k for ci in maintained.values() for k in ci}:
            for ci in incoming.values():
                ci.pop(key, None)
        expect0 = expect1 = 0
        for source in (maintained, incoming):
            for ci in source.values():
                for key in ci:
                    if key_bit(key, 0):
                        expect1 += 1
                    else:
                        expect0 += 1
        num0, num1, tuples = count_items(cluster, 0, maintained, incoming)
        if (num0, num1) != (expect0, expect1):
            failures.append((seed, "count", num0, num1, expect0, expect1))
            continue
        if num0 + num1 > 2 * n:
            bit = 0 if num0 > n else 1
            selected = select_overflow(
                cluster, 0, maintained, incoming, tuples, bit)
            chosen = [it for items in selected.values() for it in items]
            if len(chosen) != n or any(key_bit(it.key, 0) != bit for it in chosen):
                failures.append((seed, "select", len(chosen)))
    _report("2-count-select-oracle", not failures,
            "(100 instances; failures: %r)" % failures[:3])


# -- 3. end-to-end freshness fuzz ----------------------------------------------


def _fuzz_doc(seed: int) -> dict:
    return {
        "version": 1, "name": "fuzz81", "n": 81, "k": 3, "p": 2, "c": 24,
        "payload_bytes": 64, "seed": seed, "crash_budget": 4,
        "periods": [
            {"crash": {"strategy": "random", "budget": p % 5},
             "requests": {"strategy": "mixed", "writes": 30, "lookups": 30,
                          "overwrite_frac": 0.3, "missing_frac": 0.1}}
            for p in range(20)
        ],
    }


def test_criterion_3_freshness_fuzz():
    wrong = 0
    failed_lookups = 0
    lookups = 0
    for seed in range(50):
        reports, summary, _code = run_scenario(load_scenario(_fuzz_doc(seed)))
        wrong += summary["safety_violations"]
        for report in reports:
            for out in report.outcomes:
                if out["op"] != "lookup":
                    continue
                lookups += 1
                if out.get("correct") is False:
                    wrong += 1
                if out["status"] == "failed":
                    failed_lookups += 1
    _report("3-freshness-fuzz", wrong == 0,
            "(50 seeds, %d lookups, %d wrong, %d fail-reported)"
            % (lookups, wrong, failed_lookups))


# -- 4. adaptive-attack liveness -----------------------------------------------


def _attack_doc(seed: int, budget: int) -> dict:
    return {
        "version": 1, "name": "attack81", "n": 81, "k": 3, "p": 2, "c": 24,
        "payload_bytes": 64, "seed": seed, "crash_budget": budget,
        "periods": [
            {"requests": {"strategy": "write_fill"}},
            {"crash": {"strategy": "placement", "budget": budget},
             "requests": {"strategy": "lookup_live", "count": 40}},
        ],
    }


def test_criterion_4_adaptive_attack_liveness():
    bad_answers = 0
    seeds_fully_answered = 0
    unanswered_total = 0
    trials = 0
    for seed in range(50):
        budget = 1 + seed % 2
        reports, summary, _code = run_scenario(
            load_scenario(_attack_doc(seed, budget)))
        bad_answers += summary["safety_violations"]
        outs = [o for r in reports for o in r.outcomes if o["op"] == "lookup"]
        trials += len(outs)
        unanswered = [o for o in outs if o["status"] != "answered"]
        misanswered = [o for o in outs if o.get("correct") is False]
        bad_answers += len(misanswered)
        unanswered_total += len(unanswered)
        if not unanswered:
            seeds_fully_answered += 1
    ok = seeds_fully_answered >= 48 and bad_answers == 0  # >= 95% of 50 seeds
    _report("4-adaptive-attack-liveness", ok,
            "(%d/50 seeds fully answered, %d unanswered, %d misanswered)"
            % (seeds_fully_answered, unanswered_total, bad_answers))


# -- 5. round and congestion bounds --------------------------------------------


def test_criterion_5_round_congestion_bounds():
    import math

    violations = []
    details = []
    for n, k, p in ((81, 3, 2), (256, 4, 2)):
        doc = {
            "version": 1, "name": "bounds", "n": n, "k": k, "p": p, "c": 24,
            "payload_bytes": 64, "seed": 3, "crash_budget": 3,
            "periods": [
                {"crash": {"strategy": "random", "budget": period % 4},
                 "requests": {"strategy": "mixed",
                              "writes": n // 2, "lookups": n // 2}}
                for period in range(6)
            ],
        }
        scenario = load_scenario(doc)
        cfg = scenario.config
        reports, summary, _code = run_scenario(scenario)
        log2n = math.log2(n)
        probing_cap = 4 * log2n**2  # probing congestion is one log factor lower
        for report in reports:
            violations.extend(report.bound_violations)
            for phase in report.write_phases:
                if phase["rounds"] > cfg.phase_round_cap:
                    violations.append("phase rounds %d" % phase["rounds"])
            if report.rounds_used > cfg.period_round_cap:
                violations.append("period rounds %d" % report.rounds_used)
            if report.max_congestion > cfg.congestion_alarm:
                violations.append("congestion %d" % report.max_congestion)
            probing = report.congestion_by_stage.get("lookup.probing", 0)
            if probing > probing_cap:
                violations.append("probing congestion %d > %.0f"
                                  % (probing, probing_cap))
        details.append(
            "n=%d rounds<=%d/%d congestion<=%d/%d"
            % (n, summary["max_rounds"], cfg.period_round_cap,
               summary["max_congestion"], cfg.congestion_alarm))
    _report("5-round-congestion-bounds", not violations,
            "(%s; violations: %r)" % ("; ".join(details), violations[:3]))


# -- 6. redundancy bound ---------------------------------------------------------


def test_criterion_6_redundancy():
    import math

    problems = []
    details = []
    for n, k in ((81, 3), (256, 4)):
        # mixed workload including overwrites: bound check
        doc = {
            "version": 1, "name": "red-mixed", "n": n, "k": k, "p": 2, "c": 24,
            "payload_bytes": 128, "seed": 11, "crash_budget": 2,
            "periods": [
                {"crash": {"strategy": "random", "budget": period % 3},
                 "requests": {"strategy": "mixed", "writes": n // 2,
                              "lookups": n // 4, "overwrite_frac": 0.4}}
                for period in range(6)
            ],
        }
        scenario = load_scenario(doc)
        _reports, summary, _code = run_scenario(scenario)
        cap = scenario.config.redundancy_factor * math.log2(n)
        if summary["final_redundancy"] > cap:
            problems.append("n=%d mixed %.1f > %.1f"
                            % (n, summary["final_redundancy"], cap))
        details.append("n=%d mixed %.1f<=%.1f"
                       % (n, summary["final_redundancy"], cap))
    # closed-form comparison on a clean single bucket (no stale copies)
    cluster = make_cluster(n=81, k=3, d=4, c=24, payload_bytes=128, seed=12)
    rng = random.Random(12)
    open_stage(cluster)
    items = make_items(rng, cluster, 150)
    encode_bucket(cluster, ROOT, spread(items, range(81), rng))
    for item in items.values():
        cluster.directory.record_write(item)
    measured = measure_redundancy(cluster)
    predicted = predicted_redundancy(cluster.config, 150)
    rel = abs(measured - predicted) / predicted
    if rel > 0.10:
        problems.append("closed-form off by %.1f%%" % (100 * rel))
    details.append("clean-bucket measured %.2f vs predicted %.2f (%.1f%%)"
                   % (measured, predicted, 100 * rel))
    _report("6-redundancy", not problems,
            "(%s; problems: %r)" % ("; ".join(details), problems))


# -- 7. statistical tail bounds at n=4096 ---------------------------------------


def _lemma_doc(seed: int, budget: int) -> dict:
    return {
        "version": 1, "name": "lemma4096", "n": 4096, "k": 4, "p": 1, "c": 24,
        "payload_bytes": 24, "seed": seed, "crash_budget": budget,
        "periods": [
            {"crash": {"strategy": "random", "budget": budget},
             "requests": {"strategy": "write_fill", "count": 3000}},
            {"crash": {"strategy": "random", "budget": budget},
             "requests": {"strategy": "lookup_live"}},
        ],
    }


@pytest.mark.slow
def test_criterion_7_lemma_statistics():
    # in-regime budget: (gamma/2) * 2^log_k(n) rounds up to one crash here
    seeds_ok_probe = 0
    seeds_ok_place = 0
    unsafe = 0
    for seed in range(50):
        reports, summary, _code = run_scenario(
            load_scenario(_lemma_doc(seed, budget=1)), check_lemmas=True)
        unsafe += summary["safety_violations"]
        if summary["lemma_violations"]["probe_levels"] == 0:
            seeds_ok_probe += 1
        if summary["lemma_violations"]["placement"] == 0:
            seeds_ok_place += 1
    ok = seeds_ok_probe >= 48 and seeds_ok_place >= 48 and unsafe == 0
    _report("7-lemma-statistics", ok,
            "(probe bound ok in %d/50, placement ok in %d/50 seeds)"
            % (seeds_ok_probe, seeds_ok_place))


@pytest.mark.slow
def test_criterion_7b_relaxed_budget_stress():
    # beyond-regime stress: the formula budget would be ~10 at this n; the
    # tail bounds are not asserted here, only safety
    reports, summary, _code = run_scenario(
        load_scenario(_lemma_doc(0, budget=10)), check_lemmas=True)
    print("ACCEPTANCE 7b-relaxed-stress        INFO lemma_violations=%r"
          % summary["lemma_violations"])
    _report("7b-relaxed-stress-safety", summary["safety_violations"] == 0,
            "(budget 10 at n=4096)")


# -- 8. determinism ----------------------------------------------------------------


def test_criterion_8_determinism():
    import io

    doc = {
        "version": 1, "name": "determinism", "n": 27, "k": 3, "p": 2, "c": 12,
        "payload_bytes": 64, "seed": 5, "crash_budget": 3,
        "periods": [
            {"requests": {"strategy": "write_fill"}},
            {"crash": {"strategy": "placement", "budget": 3},
             "requests": {"strategy": "mixed", "writes": 10, "lookups": 10}},
            {"crash": {"strategy": "random", "budget": 2},
             "requests": {"strategy": "hotspot"}},
        ],
    }
    streams = []
    for _ in range(2):
        buf = io.StringIO()
        run_scenario(load_scenario(doc), out=buf, check_lemmas=True)
        streams.append(buf.getvalue())
    _report("8-determinism", streams[0] == streams[1],
            "(%d report bytes)" % len(streams[0]))
