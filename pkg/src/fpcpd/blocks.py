"""Partition of a 3-way index grid into blocks of mutually interchangeable entries.

Two entries are interchangeable when they differ in every mode, so a row-local
SGD update of one never reads or writes the factor rows touched by the other.

Construction is a generalized diagonal. Let ``s`` run over the shortest mode
(length ``p``) and let ``(a, b)`` index the grid of the two remaining modes
``(m, n)``. Block ``(a, b)`` holds ``s -> (s, (s + a) mod m, (s + b) mod n)``
placed back in the original mode order. Every block is full, ``d = m * n``
and each grid point lands in exactly one block.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

__all__ = ["Entry", "Block", "BlockPlan", "build_plan", "verify_plan", "run_block_parallel"]


class Entry(NamedTuple):
    i: int
    j: int
    k: int


@dataclass(frozen=True)
class Block:
    entries: tuple[Entry, ...]

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def as_array(self) -> np.ndarray:
        return np.array(self.entries, dtype=np.int64).reshape(-1, 3)


class BlockPlan:
    """Immutable block partition.

    Entries are stored block-contiguously in ``entries`` (shape ``(N, 3)``),
    block ``b`` spanning ``entries[offsets[b]:offsets[b + 1]]``.
    """

    def __init__(self, dims, entries: np.ndarray, offsets: np.ndarray, p: int):
        self.dims = tuple(int(x) for x in dims)
        self.entries = np.ascontiguousarray(entries, dtype=np.int64)
        self.offsets = np.ascontiguousarray(offsets, dtype=np.int64)
        self.p = int(p)
        self.entries.setflags(write=False)
        self.offsets.setflags(write=False)

    @classmethod
    def from_blocks(cls, dims, blocks: Iterable[Iterable[Sequence[int]]], p: int | None = None) -> "BlockPlan":
        """Build a plan from explicit entry lists (used for hand-made plans and tests)."""
        rows, offsets = [], [0]
        for blk in blocks:
            blk = [tuple(int(v) for v in e) for e in blk]
            rows.extend(blk)
            offsets.append(len(rows))
        entries = np.array(rows, dtype=np.int64).reshape(-1, 3)
        if p is None:
            p = max((offsets[b + 1] - offsets[b] for b in range(len(offsets) - 1)), default=0)
        return cls(dims, entries, np.array(offsets, dtype=np.int64), p)

    @property
    def d(self) -> int:
        return len(self.offsets) - 1

    def __len__(self):
        return self.d

    def block(self, b: int) -> Block:
        rows = self.entries[self.offsets[b]:self.offsets[b + 1]]
        return Block(tuple(Entry(*map(int, r)) for r in rows))

    @property
    def blocks(self) -> list[Block]:
        return [self.block(b) for b in range(self.d)]

    def block_entries(self, b: int) -> np.ndarray:
        return self.entries[self.offsets[b]:self.offsets[b + 1]]

    def to_json(self, indent: int | None = None) -> str:
        return json.dumps(
            {
                "dims": list(self.dims),
                "d": self.d,
                "p": self.p,
                "blocks": [self.block_entries(b).tolist() for b in range(self.d)],
            },
            indent=indent,
        )

    def __repr__(self):
        return f"BlockPlan(dims={self.dims}, d={self.d}, p={self.p})"


def build_plan(dims) -> BlockPlan:
    dims = tuple(int(x) for x in dims)
    if len(dims) != 3:
        raise ValueError(f"expected three dims, got {dims}")
    if min(dims) < 1:
        raise ValueError(f"dims must be positive, got {dims}")
    short = int(np.argmin(dims))
    others = [ax for ax in range(3) if ax != short]
    p = dims[short]
    m, n = dims[others[0]], dims[others[1]]

    s = np.arange(p, dtype=np.int64)
    a, b = np.meshgrid(np.arange(m, dtype=np.int64), np.arange(n, dtype=np.int64), indexing="ij")
    a = a.ravel()[:, None]
    b = b.ravel()[:, None]
    entries = np.empty((m * n, p, 3), dtype=np.int64)
    entries[:, :, short] = s[None, :]
    entries[:, :, others[0]] = (s[None, :] + a) % m
    entries[:, :, others[1]] = (s[None, :] + b) % n
    offsets = np.arange(0, m * n * p + 1, p, dtype=np.int64)
    return BlockPlan(dims, entries.reshape(-1, 3), offsets, p)


def verify_plan(plan: BlockPlan, dims) -> bool:
    """True iff the plan covers the grid exactly once and every block is interchangeable."""
    dims = tuple(int(x) for x in dims)
    if len(dims) != 3 or min(dims) < 1:
        return False
    ent = np.asarray(plan.entries)
    offs = np.asarray(plan.offsets)
    total = int(np.prod(dims))
    if ent.ndim != 2 or ent.shape[1] != 3 or ent.shape[0] != total:
        return False
    if offs[0] != 0 or offs[-1] != ent.shape[0] or np.any(np.diff(offs) < 0):
        return False
    if np.any(ent < 0) or np.any(ent >= np.array(dims)):
        return False
    flat = np.ravel_multi_index(ent.T, dims)
    if np.unique(flat).size != total:
        return False
    for b in range(len(offs) - 1):
        blk = ent[offs[b]:offs[b + 1]]
        for ax in range(3):
            if np.unique(blk[:, ax]).size != blk.shape[0]:
                return False
    return True


def run_block_parallel(
    block: Block | np.ndarray,
    update: Callable[[Entry], None],
    threads: int = 1,
    executor: ThreadPoolExecutor | None = None,
) -> None:
    """Apply ``update`` once to each entry of ``block``.

    ``update`` must only touch factor rows ``A[i]``, ``B[j]``, ``C[k]`` of its
    entry. Under that contract the outcome equals applying the entries in
    listed order. With ``threads == 1`` and no executor the listed order is
    used literally.
    """
    if isinstance(block, np.ndarray):
        entries = [Entry(*map(int, r)) for r in block]
    else:
        entries = list(block)
    if executor is None and threads <= 1:
        for e in entries:
            update(e)
        return
    if executor is not None:
        list(executor.map(update, entries))
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        list(pool.map(update, entries))
