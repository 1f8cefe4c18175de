"""Batch-based adaptive adversaries.

A strategy is called once per period with full read access to the cluster
(including the hash seeds of every encoded bucket, which is exactly what
makes the adversary adaptive) and returns a crash set within its budget
and a request batch of at most one lookup and one write per server.
Strategies draw their own randomness from labeled substreams, so a given
(seed, scenario) pair always produces the same attack.
"""

from __future__ import annotations

from bucketstore.buckets import fbucket
from bucketstore.simnet import Request, ScenarioError, placement_hash, substream


def _adversary_rng(cluster, label: str):
    return substream(cluster.config.seed, "adversary", label, cluster.period_index + 1)


def piece_columns(cluster, key: int, zone: int | None = None) -> dict[int, int]:
    """How many pieces of ``key`` each server holds, read from the current
    seeds of the shallowest (or given) zone bucket storing it."""
    cfg = cluster.config
    rec = None
    if zone is not None:
        rec = cluster.buckets.get(fbucket(zone, key, cfg.key_bits))
    else:
        for z in range(cfg.key_bits + 1):
            candidate = cluster.buckets.get(fbucket(z, key, cfg.key_bits))
            if candidate is not None and key in candidate.members:
                rec = candidate
                break
    if rec is None:
        return {}
    counts: dict[int, int] = {}
    for j, seed in enumerate(rec.seeds):
        col = placement_hash(seed, key, cfg.n)
        counts[col] = counts.get(col, 0) + 1
    return counts


def choose_crash_set(cluster, strategy: str, budget: int, params: dict) -> set[int]:
    """Pick this period's crash set.  Strategies:

    - ``none``: no crashes.
    - ``random``: a uniform budget-sized set.
    - ``subbutterfly``: the servers of one sub-butterfly, budget permitting.
    - ``placement``: read the victim item's current piece placement and
      crash the servers holding the most pieces (the strongest attack the
      batch model allows).
    """
    n = cluster.config.n
    budget = min(budget, n - 1)
    if budget <= 0 or strategy == "none":
        return set()
    rng = _adversary_rng(cluster, "crash")
    if strategy == "random":
        return set(rng.sample(range(n), budget))
    if strategy == "subbutterfly":
        level = params.get("level", 1)
        pow_level = cluster.config.k ** level
        base = params.get("base")
        if base is None:
            base = rng.randrange(n // pow_level) * pow_level
        return set(range(base, min(base + pow_level, base + budget)))
    if strategy == "placement":
        key = params.get("key")
        if key is None:
            live = sorted(cluster.directory.latest)
            if not live:
                return set(rng.sample(range(n), budget))
            key = live[rng.randrange(len(live))]
        counts = piece_columns(cluster, key, params.get("zone"))
        if not counts:
            return set(rng.sample(range(n), budget))
        ranked = sorted(counts, key=lambda col: (-counts[col], col))
        chosen = ranked[:budget]
        if len(chosen) < budget:
            rest = [s for s in range(n) if s not in chosen]
            chosen += rng.sample(rest, budget - len(chosen))
        return set(chosen)
    raise ScenarioError("unknown crash strategy %r" % strategy)


def choose_requests(cluster, strategy: str, params: dict,
                    crash_set: set[int]) -> list[Request]:
    """Build this period's request batch.  Strategies:

    - ``none``: empty batch.
    - ``mixed``: random writes (fresh keys and overwrites) plus lookups of
      live and missing keys.
    - ``write_fill``: one fresh-key write per intact server.
    - ``lookup_live``: lookups of live keys, one per intact server.
    - ``hotspot``: every intact server looks up the same key.
    - ``victim_lookup``: lookups of one chosen (or the attacked) key.
    """
    cfg = cluster.config
    rng = _adversary_rng(cluster, "requests")
    intact = [s for s in range(cfg.n) if s not in crash_set]
    live = sorted(cluster.directory.latest)
    key_space = 1 << cfg.key_bits

    def fresh_key() -> int:
        while True:
            key = rng.randrange(key_space)
            if key not in cluster.directory.latest:
                return key

    def payload() -> bytes:
        return rng.randbytes(cfg.payload_size)

    if strategy == "none":
        return []
    if strategy == "write_fill":
        count = min(params.get("count", len(intact)), len(intact))
        return [Request("write", s, fresh_key(), payload())
                for s in intact[:count]]
    if strategy == "lookup_live":
        count = min(params.get("count", len(intact)), len(intact))
        if not live:
            return []
        return [Request("lookup", s, live[rng.randrange(len(live))])
                for s in intact[:count]]
    if strategy == "hotspot":
        key = params.get("key")
        if key is None:
            key = live[rng.randrange(len(live))] if live else fresh_key()
        return [Request("lookup", s, key) for s in intact]
    if strategy == "victim_lookup":
        key = params.get("key")
        if key is None:
            key = live[0] if live else 0
        count = min(params.get("count", len(intact)), len(intact))
        return [Request("lookup", s, key) for s in intact[:count]]
    if strategy == "mixed":
        writes = min(params.get("writes", len(intact) // 2), len(intact))
        reads = min(params.get("lookups", len(intact) // 2), len(intact))
        overwrite_frac = params.get("overwrite_frac", 0.3)
        missing_frac = params.get("missing_frac", 0.1)
        batch: list[Request] = []
        write_servers = rng.sample(intact, writes) if writes else []
        for s in sorted(write_servers):
            if live and rng.random() < overwrite_frac:
                key = live[rng.randrange(len(live))]
            else:
                key = fresh_key()
            batch.append(Request("write", s, key, payload()))
        read_servers = rng.sample(intact, reads) if reads else []
        for s in sorted(read_servers):
            if not live or rng.random() < missing_frac:
                key = fresh_key()
            else:
                key = live[rng.randrange(len(live))]
            batch.append(Request("lookup", s, key))
        return batch
    raise ScenarioError("unknown request strategy %r" % strategy)
