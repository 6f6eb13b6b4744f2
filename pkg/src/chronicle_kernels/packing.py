"""Sequence packing: best-fit-decreasing bins, cu_seqlens and position ids."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np


def cu_seqlens(lengths) -> np.ndarray:
    lengths = np.asarray(lengths, dtype=np.int64)
    if np.any(lengths < 1):
        raise ValueError("sequence lengths must be >= 1")
    return np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)


def position_ids(lengths) -> np.ndarray:
    if len(lengths) == 0:
        return np.zeros(0, dtype=np.int64)
    return np.concatenate([np.arange(n, dtype=np.int64) for n in lengths])


def segment_ids(lengths) -> np.ndarray:
    """Index of the owning sequence for every token of a packed bin."""
    return np.repeat(np.arange(len(lengths)), lengths)


@dataclass
class PackedBatch:
    bins: list                 # list of [(seq_id, length), ...]
    capacity: int
    skipped: list = field(default_factory=list)  # oversized (seq_id, length)

    def bin_lengths(self, b: int) -> list:
        return [n for _, n in self.bins[b]]

    @property
    def cu_seqlens(self) -> list:
        return [cu_seqlens(self.bin_lengths(b)) for b in range(len(self.bins))]

    @property
    def position_ids(self) -> list:
        return [position_ids(self.bin_lengths(b)) for b in range(len(self.bins))]

    @property
    def total_tokens(self) -> int:
        return sum(n for b in self.bins for _, n in b)

    def waste(self) -> float:
        if not self.bins:
            return 0.0
        return 1.0 - self.total_tokens / (len(self.bins) * self.capacity)

    def manifest(self) -> dict:
        return {
            "capacity": self.capacity,
            "bins": [[{"id": i, "length": int(n)} for i, n in b] for b in self.bins],
            "cu_seqlens": [c.tolist() for c in self.cu_seqlens],
            "position_ids": [p.tolist() for p in self.position_ids],
            "skipped": [{"id": i, "length": int(n)} for i, n in self.skipped],
            "stats": {
                "n_bins": len(self.bins),
                "n_sequences": sum(len(b) for b in self.bins),
                "total_tokens": self.total_tokens,
                "packed_waste": self.waste(),
            },
        }


def pack_bfd(lengths, capacity: int, ids=None) -> PackedBatch:
    """Best-fit decreasing: longest first, each into the tightest bin that fits.

    Ties between equally tight bins go to the lowest bin index; sequences
    longer than ``capacity`` are skipped and listed in ``skipped``.
    """
    if capacity < 1:
        raise ValueError("capacity must be >= 1")
    lengths = [int(n) for n in lengths]
    ids = list(range(len(lengths))) if ids is None else list(ids)
    order = sorted(range(len(lengths)), key=lambda i: -lengths[i])  # stable
    bins, remaining, skipped = [], [], []
    for i in order:
        n = lengths[i]
        if n > capacity:
            skipped.append((ids[i], n))
            continue
        best = -1
        for b, rem in enumerate(remaining):
            if rem >= n and (best < 0 or rem < remaining[best]):
                best = b
        if best < 0:
            bins.append([])
            remaining.append(capacity)
            best = len(bins) - 1
        bins[best].append((ids[i], n))
        remaining[best] -= n
    return PackedBatch(bins, capacity, skipped)


def optimal_bins(lengths, capacity: int) -> int:
    """Exact minimum bin count by branch and bound (small instances only)."""
    items = sorted((int(n) for n in lengths if n <= capacity), reverse=True)
    if not items:
        return 0
    best = [len(items)]
    lower = math.ceil(sum(items) / capacity)

    def place(i, loads):
        if len(loads) >= best[0]:
            return
        if i == len(items):
            best[0] = len(loads)
            return
        seen = set()
        for b in range(len(loads)):
            if loads[b] + items[i] <= capacity and loads[b] not in seen:
                seen.add(loads[b])
                loads[b] += items[i]
                place(i + 1, loads)
                loads[b] -= items[i]
                if best[0] == lower:
                    return
        loads.append(items[i])
        place(i + 1, loads)
        loads.pop()

    place(0, [])
    return best[0]


def bfd_bound(opt: int) -> float:
    return 11.0 / 9.0 * opt + 6.0 / 9.0


def token_batches(lengths, max_tokens: int):
    """Greedy in-order batching so that each batch holds at most ``max_tokens``.

    Returns (batches of indices, per-batch utilization sum/(count*max_len)).
    """
    batches, cur, cur_tokens = [], [], 0
    for i, n in enumerate(lengths):
        if n > max_tokens:
            raise ValueError(f"sequence {i} of length {n} exceeds max_tokens={max_tokens}")
        if cur and cur_tokens + n > max_tokens:
            batches.append(cur)
            cur, cur_tokens = [], 0
        cur.append(i)
        cur_tokens += n
    if cur:
        batches.append(cur)
    util = []
    for b in batches:
        ls = [lengths[i] for i in b]
        util.append(sum(ls) / (len(ls) * max(ls)))
    return batches, util


def waste_stats(lengths, max_len: int, capacity: int | None = None) -> dict:
    """Padding waste of pad-to-max batching versus BFD packing."""
    lengths = [int(n) for n in lengths]
    capacity = capacity or max_len
    mean = sum(lengths) / len(lengths) if lengths else 0.0
    packed = pack_bfd(lengths, capacity)
    return {
        "n_sequences": len(lengths),
        "mean_length": mean,
        "max_len": max_len,
        "capacity": capacity,
        "pad_waste": (max_len - mean) / max_len,
        "packed_bins": len(packed.bins),
        "packed_waste": packed.waste(),
        "lower_bound_bins": math.ceil(sum(n for n in lengths if n <= capacity) / capacity),
    }


def read_lengths_jsonl(path):
    """Read {"id", "length"} records, or {"id", "tokens": [...]} records."""
    ids, lengths = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if "length" in rec:
                n = rec["length"]
            elif "tokens" in rec:
                n = len(rec["tokens"])
            else:
                raise ValueError(f"line {lineno}: record needs 'length' or 'tokens'")
            if not isinstance(n, int) or n < 1:
                raise ValueError(f"line {lineno}: invalid length {n!r}")
            ids.append(str(rec.get("id", lineno - 1)))
            lengths.append(n)
    return ids, lengths
