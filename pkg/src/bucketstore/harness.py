"""Experiment harness: scenario files, the period runner, oracle checks,
metrics, and the command-line entry point.

A scenario is one JSON document (versioned, schema below) naming the
cluster parameters and a list of periods, each with a crash strategy and
a request strategy.  Reports are emitted as JSON lines, one object per
period, followed by one summary object.

Exit codes: 0 ok, 1 bad configuration, 2 safety violation, 3 round-cap
overrun.

Scenario schema (version 1)::

    {
      "version": 1,
      "name": "smoke",
      "n": 16, "k": 4, "p": 2, "c": 12,
      "payload_bytes": 32,          # optional, defaults to the size floor
      "seed": 1,                    # overridable with --seed
      "alpha": 73.0, "beta": 3.0,   # optional protocol constants
      "kappa_factor": 4,
      "caps": {                     # optional bound constants
        "phase": 12.0, "write_stage": 36.0, "period": 4.0,
        "congestion": 4.0, "redundancy": 8.0
      },
      "crash_budget": 2,            # default per-period budget
      "periods": [
        {"crash": {"strategy": "random", "budget": 1},
         "requests": {"strategy": "mixed", "writes": 8, "lookups": 8}},
        {"requests": {"strategy": "explicit",
                      "ops": [{"op": "lookup", "server": 0, "key": 5}]}}
      ]
    }
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import dataclass, field

from bucketstore import adversary
from bucketstore.butterfly import TopologyError, fit_dimension
from bucketstore.cluster import Cluster
from bucketstore.simnet import Config, Request, ScenarioError, substream

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_SAFETY = 2
EXIT_ROUNDS = 3

SCENARIO_VERSION = 1


@dataclass
class PeriodSpec:
    crash_strategy: str = "none"
    crash_budget: int = 0
    crash_params: dict = field(default_factory=dict)
    request_strategy: str = "none"
    request_params: dict = field(default_factory=dict)
    explicit_ops: list = field(default_factory=list)


@dataclass
class Scenario:
    name: str
    config: Config
    periods: list[PeriodSpec]
    check_lemmas: bool = False


def load_scenario(source: dict | str, seed_override: int | None = None) -> Scenario:
    """Parse and validate a scenario document (a dict or a path)."""
    if isinstance(source, str):
        try:
            with open(source, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ScenarioError("cannot read scenario %s: %s" % (source, exc))
    else:
        doc = source
    if doc.get("version") != SCENARIO_VERSION:
        raise ScenarioError("scenario version must be %d" % SCENARIO_VERSION)
    for req_field in ("n", "k", "periods"):
        if req_field not in doc:
            raise ScenarioError("scenario is missing %r" % req_field)
    n, k = doc["n"], doc["k"]
    try:
        d = fit_dimension(k, n)
    except TopologyError as exc:
        raise ScenarioError(str(exc))
    caps = doc.get("caps", {})
    config = Config(
        n=n,
        k=k,
        d=d,
        p=doc.get("p", 1),
        c=doc.get("c", 0),
        payload_bytes=doc.get("payload_bytes", 0),
        c_bits=doc.get("c_bits", 1),
        alpha=doc.get("alpha", 73.0),
        beta=doc.get("beta", 3.0),
        kappa_factor=doc.get("kappa_factor", 4),
        phase_round_factor=caps.get("phase", 12.0),
        write_stage_round_factor=caps.get("write_stage", 36.0),
        period_round_factor=caps.get("period", 4.0),
        congestion_factor=caps.get("congestion", 4.0),
        redundancy_factor=caps.get("redundancy", 8.0),
        max_message_bytes=doc.get("max_message_bytes", 0),
        seed=seed_override if seed_override is not None else doc.get("seed", 0),
    )
    config.validate()
    default_budget = doc.get("crash_budget", config.default_crash_budget)
    periods = []
    for idx, pdoc in enumerate(doc["periods"]):
        if not isinstance(pdoc, dict):
            raise ScenarioError("period %d is not an object" % idx)
        crash = pdoc.get("crash", {})
        requests = pdoc.get("requests", {})
        spec = PeriodSpec(
            crash_strategy=crash.get("strategy", "none"),
            crash_budget=crash.get("budget", default_budget),
            crash_params={k_: v for k_, v in crash.items()
                          if k_ not in ("strategy", "budget")},
            request_strategy=requests.get("strategy", "none"),
            request_params={k_: v for k_, v in requests.items()
                            if k_ not in ("strategy", "ops")},
            explicit_ops=requests.get("ops", []),
        )
        periods.append(spec)
    return Scenario(
        name=doc.get("name", "unnamed"),
        config=config,
        periods=periods,
        check_lemmas=doc.get("check_lemmas", False),
    )


# ---------------------------------------------------------------------------
# Per-period lemma statistics


def placement_spread_violations(cluster, crash_set: set[int]) -> list[dict]:
    """Check, for every item written this period and every butterfly level,
    that at most c/6 of its pieces live in sub-butterflies with at least
    ceil(2^(l-1)) crashed servers."""
    cfg = cluster.config
    topo = cluster.topo
    if not crash_set:
        return []
    crashed = sorted(crash_set)
    blocked_bases: list[set[int]] = []
    for level in range(cfg.d + 1):
        pow_level = topo._pow[level]
        counts: dict[int, int] = {}
        for s in crashed:
            base = s - s % pow_level
            counts[base] = counts.get(base, 0) + 1
        threshold = max(1, 2 ** (level - 1)) if level else 1
        blocked_bases.append(
            {base for base, cnt in counts.items() if cnt >= threshold})
    limit = cfg.pieces_per_item / 6.0
    violations = []
    for encode in cluster.encodes_this_period:
        seeds = encode["seeds"]
        for key in encode["keys"]:
            cols = [adversary.placement_hash(seed, key, cfg.n) for seed in seeds]
            for level in range(cfg.d + 1):
                if not blocked_bases[level]:
                    continue
                pow_level = topo._pow[level]
                hits = sum(1 for col in cols
                           if col - col % pow_level in blocked_bases[level])
                if hits > limit:
                    violations.append({
                        "key": key, "level": level, "pieces_blocked": hits,
                        "limit": limit,
                    })
    return violations


def probe_level_violations(cluster, report) -> list[dict]:
    """Check the per-level tail bound on requests surviving the probing
    stage: at most gamma * n / k^(l-1) items may belong to level l."""
    cfg = cluster.config
    gamma = 1.0 / 36.0
    violations = []
    for entry in report.lemma.get("lookup", {}).get("belongs", ()):
        for level_str, count in entry["counts"].items():
            level = int(level_str)
            bound = gamma * cfg.n / (cfg.k ** (level - 1))
            if count > bound:
                violations.append({
                    "zone": entry["zone"], "level": level,
                    "count": count, "bound": bound,
                })
    return violations


def decode_entry_violations(cluster, report) -> list[dict]:
    """Check the decoding-stage tail bound: at most phi * n / k^l requests
    may enter sub-phase l, with phi = 3 * gamma * k."""
    cfg = cluster.config
    phi = 3.0 * (1.0 / 36.0) * cfg.k
    violations = []
    for entry in report.lemma.get("lookup", {}).get("decode_entries", ()):
        bound = phi * cfg.n / (cfg.k ** entry["level"])
        if entry["count"] > bound:
            violations.append(dict(entry, bound=bound))
    return violations


# ---------------------------------------------------------------------------
# Redundancy prediction


def predicted_redundancy(config: Config, item_count: int, draws: int = 32) -> float:
    """Expected storage ratio for one bucket of ``item_count`` items with no
    stale copies, computed by replaying the codec's size arithmetic on
    independently sampled piece placements."""
    if item_count == 0:
        return 0.0
    c = config.pieces_per_item
    t = -(-c // 3)
    body = -(-config.payload_size // t)
    piece_record = config.key_width + 7 + body
    rng = substream(0xBEEF, "redundancy_model", config.n, config.k, c, item_count)
    n, k, d = config.n, config.k, config.d
    total = 0
    for _ in range(draws):
        per_col = [0] * n
        for _item in range(item_count):
            for _j in range(c):
                per_col[rng.randrange(n)] += 1
        sizes = [4 + cnt * piece_record for cnt in per_col]
        for level in range(1, d + 1):
            pow_prev = k ** (level - 1)
            new_sizes = list(sizes)
            for base in range(0, n, pow_prev * k):
                for off in range(pow_prev):
                    group = [base + off + m * pow_prev for m in range(k)]
                    z = max(sizes[g] for g in group)
                    frag = -(-z // (k - 1))
                    for g in group:
                        new_sizes[g] = 4 * k + sizes[g] + frag
            sizes = new_sizes
        total += sum(sizes)
    mean_storage = total / draws
    return mean_storage / (item_count * config.payload_size)


def measure_redundancy(cluster) -> float:
    """Stored bytes over plain bytes of all live items (0 when empty)."""
    return cluster.redundancy()


# ---------------------------------------------------------------------------
# Runner


def run_scenario(scenario: Scenario, out=None, check_lemmas: bool | None = None,
                 max_rounds: int | None = None, cluster: Cluster | None = None):
    """Execute every period; returns (reports, summary, exit_code)."""
    check = scenario.check_lemmas if check_lemmas is None else check_lemmas
    if max_rounds is not None:
        scenario = Scenario(
            scenario.name, _with_round_cap(scenario.config, max_rounds),
            scenario.periods, scenario.check_lemmas)
    if cluster is None:
        cluster = Cluster(scenario.config)
    reports = []
    exit_code = EXIT_OK
    summary = {
        "scenario": scenario.name,
        "n": scenario.config.n,
        "k": scenario.config.k,
        "seed": scenario.config.seed,
        "periods": len(scenario.periods),
        "safety_violations": 0,
        "bound_violations": 0,
        "aborted_periods": 0,
        "max_rounds": 0,
        "max_congestion": 0,
        "final_redundancy": 0.0,
        "redundancy_cap": scenario.config.redundancy_factor
        * math.log2(scenario.config.n),
        "lemma_violations": {"placement": 0, "probe_levels": 0, "decode_entries": 0},
    }
    for spec in scenario.periods:
        crash_set = adversary.choose_crash_set(
            cluster, spec.crash_strategy, spec.crash_budget, spec.crash_params)
        if spec.request_strategy == "explicit":
            requests = [
                Request(op["op"], op["server"], op["key"],
                        bytes.fromhex(op.get("payload_hex", "")))
                for op in spec.explicit_ops
            ]
        else:
            requests = adversary.choose_requests(
                cluster, spec.request_strategy, spec.request_params, crash_set)
        report = cluster.run_period(crash_set, requests, budget=spec.crash_budget)
        if check:
            report.lemma["placement_violations"] = placement_spread_violations(
                cluster, set(crash_set))
            report.lemma["probe_level_violations"] = probe_level_violations(
                cluster, report)
            report.lemma["decode_entry_violations"] = decode_entry_violations(
                cluster, report)
            summary["lemma_violations"]["placement"] += len(
                report.lemma["placement_violations"])
            summary["lemma_violations"]["probe_levels"] += len(
                report.lemma["probe_level_violations"])
            summary["lemma_violations"]["decode_entries"] += len(
                report.lemma["decode_entry_violations"])
        reports.append(report)
        summary["safety_violations"] += len(report.safety_violations)
        summary["bound_violations"] += len(report.bound_violations)
        summary["max_rounds"] = max(summary["max_rounds"], report.rounds_used)
        summary["max_congestion"] = max(
            summary["max_congestion"], report.max_congestion)
        if report.aborted:
            summary["aborted_periods"] += 1
            if report.aborted.startswith("round-cap"):
                exit_code = max(exit_code, EXIT_ROUNDS)
        if out is not None:
            out.write(json.dumps(report.to_dict(), sort_keys=True) + "\n")
    summary["final_redundancy"] = round(measure_redundancy(cluster), 6)
    if summary["final_redundancy"] > summary["redundancy_cap"]:
        summary["bound_violations"] += 1
    if summary["safety_violations"]:
        exit_code = EXIT_SAFETY
    if out is not None:
        out.write(json.dumps({"summary": summary}, sort_keys=True) + "\n")
    return reports, summary, exit_code


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="bucketstore",
        description="Run a crash-tolerant bucket-store scenario.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    run_p = sub.add_parser("run", help="execute a scenario file")
    run_p.add_argument("scenario", help="path to a scenario JSON file")
    run_p.add_argument("--seed", type=int, default=None,
                       help="override the scenario seed")
    run_p.add_argument("--out", default=None,
                       help="write JSON-line reports to this file")
    run_p.add_argument("--check-lemmas", action="store_true",
                       help="evaluate the statistical tail-bound checks")
    run_p.add_argument("--max-rounds", type=int, default=None,
                       help="override the per-period round cap")
    run_p.add_argument("--snapshot", default=None,
                       help="write the final bucket tree to this file")
    args = parser.parse_args(argv)

    try:
        scenario = load_scenario(args.scenario, seed_override=args.seed)
    except ScenarioError as exc:
        print("configuration error: %s" % exc, file=sys.stderr)
        return EXIT_CONFIG

    sink = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        cluster = Cluster(
            scenario.config if args.max_rounds is None
            else _with_round_cap(scenario.config, args.max_rounds))
        try:
            _reports, summary, code = run_scenario(
                scenario, out=sink, check_lemmas=args.check_lemmas or None,
                max_rounds=args.max_rounds, cluster=cluster)
        except ScenarioError as exc:
            print("configuration error: %s" % exc, file=sys.stderr)
            return EXIT_CONFIG
        if args.snapshot:
            from bucketstore.buckets import snapshot_lines

            with open(args.snapshot, "w", encoding="utf-8") as fh:
                for line in snapshot_lines(cluster.buckets):
                    fh.write(line + "\n")
        print(
            "scenario %s: %d periods, max rounds %d, max congestion %d, "
            "redundancy %.2f, %d safety / %d bound violations"
            % (summary["scenario"], summary["periods"], summary["max_rounds"],
               summary["max_congestion"], summary["final_redundancy"],
               summary["safety_violations"], summary["bound_violations"]),
            file=sys.stderr,
        )
        return code
    finally:
        if args.out:
            sink.close()


def _with_round_cap(config: Config, max_rounds: int) -> Config:
    import dataclasses

    factor = max_rounds / math.log2(config.n) ** 4
    return dataclasses.replace(config, period_round_factor=factor)


if __name__ == "__main__":
    sys.exit(main())
