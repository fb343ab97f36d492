"""Offline consolidation of variable-length samples into fixed-capacity packs.

Two strategies share one first-fit-decreasing core:

* ``pack_ffd`` is the baseline: sort by length descending (ties by
  sample_id ascending), place each item in the first pack with room.
* ``pack_bucketed`` shards items by a seeded hash of sample_id, routes
  each shard's items into geometric length buckets, FFD-packs every
  bucket under the per-pack sample/source caps, then runs one refill
  pass that jointly re-packs a shard's underfilled packs (kept only when
  it reduces the pack count). Shard outputs concatenate in shard order,
  so plans are byte-identical regardless of worker count.

Items longer than the capacity are never truncated; they divert to an
overflow list. Every emitted pack represents exactly ``capacity`` tokens
after padding.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .rng import shard_of

DEFAULT_CAPACITY = 8192


@dataclass(frozen=True)
class PackItem:
    """One sample in a packing manifest: identity, token length, source tag."""

    sample_id: str
    length: int
    source: str = ""

    def __post_init__(self) -> None:
        if self.length < 1:
            raise ValueError(f"item {self.sample_id!r} has length {self.length}, must be >= 1")


@dataclass(frozen=True)
class PackingConfig:
    capacity: int = DEFAULT_CAPACITY
    strategy: str = "bucket"
    num_buckets: int = 6
    max_samples_per_pack: int | None = None
    min_utilization: float = 0.9
    max_sources_per_pack: int | None = None
    shards: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.capacity < 1:
            raise ValueError("capacity must be >= 1")
        if self.strategy not in ("ffd", "bucket"):
            raise ValueError(f"unknown strategy {self.strategy!r}, expected 'ffd' or 'bucket'")
        if self.num_buckets < 1:
            raise ValueError("num_buckets must be >= 1")
        if not 0.0 < self.min_utilization <= 1.0:
            raise ValueError("min_utilization must be in (0, 1]")
        if self.max_samples_per_pack is not None and self.max_samples_per_pack < 1:
            raise ValueError("max_samples_per_pack must be >= 1")
        if self.max_sources_per_pack is not None and self.max_sources_per_pack < 1:
            raise ValueError("max_sources_per_pack must be >= 1")
        if self.shards < 1:
            raise ValueError("shards must be >= 1")

    def to_dict(self) -> dict:
        return {
            "capacity": self.capacity,
            "strategy": self.strategy,
            "num_buckets": self.num_buckets,
            "max_samples_per_pack": self.max_samples_per_pack,
            "min_utilization": self.min_utilization,
            "max_sources_per_pack": self.max_sources_per_pack,
            "shards": self.shards,
            "seed": self.seed,
        }


@dataclass
class PackPlan:
    """Partition of the input into capacity-bounded packs plus overflow."""

    capacity: int
    packs: list[list[PackItem]] = field(default_factory=list)
    overflow: list[PackItem] = field(default_factory=list)

    def paddings(self) -> list[int]:
        return [self.capacity - sum(it.length for it in pack) for pack in self.packs]

    def num_items(self) -> int:
        return sum(len(p) for p in self.packs) + len(self.overflow)

    def validate(self) -> None:
        seen: set[str] = set()
        for i, pack in enumerate(self.packs):
            if not pack:
                raise ValueError(f"pack {i} is empty")
            total = sum(it.length for it in pack)
            if total > self.capacity:
                raise ValueError(f"pack {i} holds {total} tokens > capacity {self.capacity}")
            for it in pack:
                if it.sample_id in seen:
                    raise ValueError(f"partition violation: sample {it.sample_id!r} repeated")
                seen.add(it.sample_id)
        for it in self.overflow:
            if it.sample_id in seen:
                raise ValueError(f"partition violation: sample {it.sample_id!r} repeated")
            seen.add(it.sample_id)


@dataclass
class PackingStats:
    num_samples: int
    num_packs: int
    overflow_count: int
    empty: bool
    compression_ratio: float | None
    compression_ratio_packed: float | None
    utilization: float | None
    success_rate: float | None

    def to_dict(self) -> dict:
        return {
            "num_samples": self.num_samples,
            "num_packs": self.num_packs,
            "overflow_count": self.overflow_count,
            "empty": self.empty,
            "compression_ratio": self.compression_ratio,
            "compression_ratio_packed": self.compression_ratio_packed,
            "utilization": self.utilization,
            "success_rate": self.success_rate,
        }


def _packing_order(items: Iterable[PackItem]) -> list[PackItem]:
    return sorted(items, key=lambda it: (-it.length, it.sample_id))


class _FirstFitBins:
    """First-fit placement over an ordered pack list.

    Without a source cap, a segment tree over per-pack remaining capacity
    answers "leftmost pack with room" in O(log P); packs that reach the
    sample cap are closed by zeroing their tree slot. The source cap makes
    fit depend on which tags a pack holds, so that path falls back to a
    linear scan (only used at test scale here).
    """

    def __init__(
        self,
        capacity: int,
        max_samples: int | None = None,
        max_sources: int | None = None,
    ) -> None:
        self.capacity = capacity
        self.max_samples = max_samples
        self.max_sources = max_sources
        self.packs: list[list[PackItem]] = []
        self._remaining: list[int] = []
        self._sources: list[set[str]] = []
        self._size = 1
        self._tree = [-1, -1]

    def _grow(self) -> None:
        self._size *= 2
        tree = [-1] * (2 * self._size)
        for i, rem in enumerate(self._remaining):
            tree[self._size + i] = rem if self._open(i) else -1
        for i in range(self._size - 1, 0, -1):
            tree[i] = max(tree[2 * i], tree[2 * i + 1])
        self._tree = tree

    def _open(self, idx: int) -> bool:
        return self.max_samples is None or len(self.packs[idx]) < self.max_samples

    def _tree_set(self, idx: int, value: int) -> None:
        pos = self._size + idx
        self._tree[pos] = value
        pos //= 2
        while pos:
            self._tree[pos] = max(self._tree[2 * pos], self._tree[2 * pos + 1])
            pos //= 2

    def _tree_find(self, need: int) -> int:
        if self._tree[1] < need:
            return -1
        pos = 1
        while pos < self._size:
            pos *= 2
            if self._tree[pos] < need:
                pos += 1
        return pos - self._size

    def _find_linear(self, item: PackItem) -> int:
        for i, rem in enumerate(self._remaining):
            if rem < item.length or not self._open(i):
                continue
            src = self._sources[i]
            if (
                self.max_sources is not None
                and item.source not in src
                and len(src) >= self.max_sources
            ):
                continue
            return i
        return -1

    def place(self, item: PackItem) -> None:
        if self.max_sources is None:
            idx = self._tree_find(item.length)
        else:
            idx = self._find_linear(item)
        if idx == -1:
            idx = len(self.packs)
            if idx >= self._size:
                self._grow()
            self.packs.append([])
            self._remaining.append(self.capacity)
            self._sources.append(set())
        self.packs[idx].append(item)
        self._remaining[idx] -= item.length
        self._sources[idx].add(item.source)
        self._tree_set(idx, self._remaining[idx] if self._open(idx) else -1)


def _ffd(
    ordered: Sequence[PackItem],
    capacity: int,
    max_samples: int | None,
    max_sources: int | None,
) -> list[list[PackItem]]:
    bins = _FirstFitBins(capacity, max_samples, max_sources)
    for it in ordered:
        bins.place(it)
    return bins.packs


def pack_ffd(
    items: Iterable[PackItem],
    capacity: int,
    *,
    max_samples_per_pack: int | None = None,
    max_sources_per_pack: int | None = None,
) -> PackPlan:
    """First-fit-decreasing baseline.

    Items are sorted by length descending (ties by sample_id ascending);
    each goes to the first pack with room, or opens a new pack. Items
    longer than the capacity land in overflow.
    """
    if capacity < 1:
        raise ValueError("capacity must be >= 1")
    ordered = _packing_order(items)
    overflow = [it for it in ordered if it.length > capacity]
    in_range = [it for it in ordered if it.length <= capacity]
    packs = _ffd(in_range, capacity, max_samples_per_pack, max_sources_per_pack)
    return PackPlan(capacity=capacity, packs=packs, overflow=overflow)


def _bucket_index(length: int, capacity: int, num_buckets: int) -> int:
    # Bucket b holds lengths in (capacity/2^(b+1), capacity/2^b]; the last
    # bucket also absorbs everything shorter.
    b = 0
    while b < num_buckets - 1 and length * (1 << (b + 1)) <= capacity:
        b += 1
    return b


def _pack_shard(
    shard_items: list[PackItem], config: PackingConfig
) -> tuple[list[list[PackItem]], list[PackItem]]:
    ordered = _packing_order(shard_items)
    overflow = [it for it in ordered if it.length > config.capacity]
    in_range = [it for it in ordered if it.length <= config.capacity]

    buckets: list[list[PackItem]] = [[] for _ in range(config.num_buckets)]
    for it in in_range:
        buckets[_bucket_index(it.length, config.capacity, config.num_buckets)].append(it)

    packs: list[list[PackItem]] = []
    for bucket in buckets:
        packs.extend(
            _ffd(bucket, config.capacity, config.max_samples_per_pack, config.max_sources_per_pack)
        )

    # One refill pass: dismantle packs below the utilization threshold and
    # re-pack their items jointly. Applied only when it actually merges
    # residuals (fewer packs); otherwise the original packs stand, which
    # keeps the single-bucket configuration exactly equal to pack_ffd.
    threshold = config.min_utilization * config.capacity
    residual_at = [i for i, p in enumerate(packs) if sum(it.length for it in p) < threshold]
    if len(residual_at) >= 2:
        residual_items = _packing_order(it for i in residual_at for it in packs[i])
        refilled = _ffd(
            residual_items,
            config.capacity,
            config.max_samples_per_pack,
            config.max_sources_per_pack,
        )
        if len(refilled) < len(residual_at):
            residual_set = set(residual_at)
            packs = [p for i, p in enumerate(packs) if i not in residual_set] + refilled
    return packs, overflow


def pack_bucketed(
    items: Iterable[PackItem], config: PackingConfig, threads: int = 1
) -> PackPlan:
    """Hash-sharded, length-bucketed packing with a residual refill pass.

    Shards are independent: each is bucketed, FFD-packed under the
    configured caps, and refilled; outputs concatenate in shard-index
    order. The plan is a pure function of (items, config); worker count
    only affects wall time.
    """
    shard_lists: list[list[PackItem]] = [[] for _ in range(config.shards)]
    if config.shards == 1:
        shard_lists[0] = list(items)
    else:
        for it in items:
            shard_lists[shard_of(it.sample_id, config.seed, config.shards)].append(it)

    if threads > 1 and config.shards > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda s: _pack_shard(s, config), shard_lists))
    else:
        results = [_pack_shard(s, config) for s in shard_lists]

    plan = PackPlan(capacity=config.capacity)
    for packs, overflow in results:
        plan.packs.extend(packs)
        plan.overflow.extend(overflow)
    return plan


def pack(items: Iterable[PackItem], config: PackingConfig, threads: int = 1) -> PackPlan:
    """Dispatch on config.strategy."""
    if config.strategy == "ffd":
        return pack_ffd(
            items,
            config.capacity,
            max_samples_per_pack=config.max_samples_per_pack,
            max_sources_per_pack=config.max_sources_per_pack,
        )
    return pack_bucketed(items, config, threads=threads)


def pack_optimal_oracle(items: Sequence[PackItem], capacity: int) -> int:
    """Provably minimal pack count for up to 16 items (test oracle).

    Exact DP over item subsets tracking (packs used, fill of the last
    pack) with lexicographic minimization; O(2^n * n). A greedy upper
    bound short-circuits instances where the volume lower bound is tight.
    """
    n = len(items)
    if n > 16:
        raise ValueError(f"instance too large for the exhaustive oracle: {n} items > 16")
    if n == 0:
        return 0
    lengths = [it.length for it in items]
    if max(lengths) > capacity:
        raise ValueError("an item exceeds the capacity; no packing exists")

    total = sum(lengths)
    lower = -(-total // capacity)

    # Greedy first-fit on descending lengths, independent of pack_ffd.
    desc = sorted(lengths, reverse=True)
    fills: list[int] = []
    for length in desc:
        for i in range(len(fills)):
            if fills[i] + length <= capacity:
                fills[i] += length
                break
        else:
            fills.append(length)
    if len(fills) == lower:
        return lower

    full = 1 << n
    inf = n + 1
    packs_used = [inf] * full
    last_fill = [0] * full
    packs_used[0] = 1
    last_fill[0] = 0
    for mask in range(full):
        base_packs = packs_used[mask]
        if base_packs == inf:
            continue
        base_fill = last_fill[mask]
        for i in range(n):
            bit = 1 << i
            if mask & bit:
                continue
            if base_fill + lengths[i] <= capacity:
                cand = (base_packs, base_fill + lengths[i])
            else:
                cand = (base_packs + 1, lengths[i])
            nxt = mask | bit
            if cand < (packs_used[nxt], last_fill[nxt]):
                packs_used[nxt], last_fill[nxt] = cand
    return packs_used[full - 1]


def packing_stats(plan: PackPlan, config: PackingConfig) -> PackingStats:
    """Compression, utilization, and success-rate accounting for a plan."""
    num_packs = len(plan.packs)
    packed = sum(len(p) for p in plan.packs)
    overflow = len(plan.overflow)
    num_samples = packed + overflow
    if num_packs == 0:
        return PackingStats(
            num_samples=num_samples,
            num_packs=0,
            overflow_count=overflow,
            empty=True,
            compression_ratio=None,
            compression_ratio_packed=None,
            utilization=None,
            success_rate=None,
        )
    token_total = sum(it.length for p in plan.packs for it in p)
    threshold = config.min_utilization * plan.capacity
    successes = sum(1 for p in plan.packs if sum(it.length for it in p) >= threshold)
    return PackingStats(
        num_samples=num_samples,
        num_packs=num_packs,
        overflow_count=overflow,
        empty=False,
        compression_ratio=num_samples / num_packs,
        compression_ratio_packed=packed / num_packs,
        utilization=token_total / (num_packs * plan.capacity),
        success_rate=successes / num_packs,
    )


def emit_plan(plan: PackPlan, path: str | Path, config: PackingConfig | None = None) -> None:
    """Write a plan as JSON Lines: one record per pack, then a trailer.

    Pack records carry per-item offsets (prefix sums of lengths) and the
    padding count so downstream loaders can build attention-segment
    boundaries. The trailer holds overflow items and summary stats.
    """
    cfg = config if config is not None else PackingConfig(capacity=plan.capacity)
    stats = packing_stats(plan, cfg)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for pack_idx, items in enumerate(plan.packs):
            off = 0
            recs = []
            for it in items:
                recs.append({"id": it.sample_id, "len": it.length, "off": off, "src": it.source})
                off += it.length
            rec = {
                "pack": pack_idx,
                "capacity": plan.capacity,
                "items": recs,
                "pad": plan.capacity - off,
            }
            f.write(json.dumps(rec, separators=(",", ":")) + "\n")
        trailer = {
            "capacity": plan.capacity,
            "overflow": [
                {"id": it.sample_id, "len": it.length, "src": it.source}
                for it in plan.overflow
            ],
            "stats": stats.to_dict(),
        }
        f.write(json.dumps(trailer, separators=(",", ":")) + "\n")


def load_plan(path: str | Path) -> PackPlan:
    """Read a plan file back, validating structure and the partition."""
    packs: list[list[PackItem]] = []
    overflow: list[PackItem] = []
    capacity: int | None = None
    saw_trailer = False
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            if saw_trailer:
                raise ValueError(f"{path}: line {lineno}: records after the trailer")
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}: line {lineno}: malformed JSON: {e}") from None
            if "pack" in rec:
                try:
                    cap = int(rec["capacity"])
                    raw_items = rec["items"]
                    pad = int(rec["pad"])
                    pack_idx = int(rec["pack"])
                except (KeyError, TypeError, ValueError) as e:
                    raise ValueError(f"{path}: line {lineno}: malformed pack record: {e}") from None
                if pack_idx != len(packs):
                    raise ValueError(
                        f"{path}: line {lineno}: pack index {pack_idx}, expected {len(packs)}"
                    )
                if capacity is None:
                    capacity = cap
                elif cap != capacity:
                    raise ValueError(f"{path}: line {lineno}: capacity {cap} != {capacity}")
                items = []
                off = 0
                for r in raw_items:
                    it = PackItem(
                        sample_id=str(r["id"]), length=int(r["len"]), source=str(r.get("src", ""))
                    )
                    if int(r["off"]) != off:
                        raise ValueError(
                            f"{path}: line {lineno}: offset {r['off']} for {it.sample_id!r}, "
                            f"expected {off}"
                        )
                    off += it.length
                    items.append(it)
                if pad != cap - off:
                    raise ValueError(
                        f"{path}: line {lineno}: padding {pad}, expected {cap - off}"
                    )
                packs.append(items)
            elif "stats" in rec:
                saw_trailer = True
                if capacity is None:
                    capacity = int(rec["capacity"])
                overflow = [
                    PackItem(
                        sample_id=str(r["id"]), length=int(r["len"]), source=str(r.get("src", ""))
                    )
                    for r in rec.get("overflow", [])
                ]
            else:
                raise ValueError(f"{path}: line {lineno}: unrecognized record")
    if not saw_trailer:
        raise ValueError(f"{path}: plan file is missing its stats trailer (truncated?)")
    assert capacity is not None
    plan = PackPlan(capacity=capacity, packs=packs, overflow=overflow)
    plan.validate()
    return plan
