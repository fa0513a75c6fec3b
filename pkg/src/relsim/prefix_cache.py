"""Block-granular prefix cache over token sequences with LRU eviction.

The cache is a trie whose edges are whole token blocks (default 16 tokens).
A block is resident only if its parent block is resident, so matching walks
leading whole blocks from the root.  Eviction is leaf-first by recency: a
block with resident children is never removed, preserving prefix closure.
Partial blocks are never cached, so a partial match counts as a miss.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from .workload import RelQuery, Request


@dataclass(frozen=True)
class CacheMissRatio:
    rel_id: int
    ratio: float
    computed_at_iteration: int

    def __post_init__(self):
        if not (0.0 <= self.ratio <= 1.0):
            raise ValueError("ratio must be in [0, 1]")


class _Node:
    __slots__ = ("key", "parent", "children", "last_access")

    def __init__(self, key, parent):
        self.key = key
        self.parent = parent
        self.children: dict = {}
        self.last_access = 0


class PrefixCache:
    def __init__(self, block_size: int = 16, capacity_blocks: int = 4096):
        if block_size <= 0 or capacity_blocks <= 0:
            raise ValueError("block_size and capacity_blocks must be positive")
        self.block_size = block_size
        self.capacity_blocks = capacity_blocks
        self._root = _Node(None, None)
        self._count = 0
        self._clock = 0
        # lazy min-heap of (last_access, node); stale entries skipped on pop
        self._lru_heap: list = []
        self.last_insert_truncated = False
        # aggregate lookup statistics, recorded only when the caller asks
        self.hit_tokens_total = 0
        self.miss_tokens_total = 0

    def __len__(self) -> int:
        return self._count

    def _blocks(self, tokens) -> list[tuple]:
        bs = self.block_size
        n = len(tokens) // bs
        return [tuple(tokens[i * bs : (i + 1) * bs]) for i in range(n)]

    def _touch(self, node: _Node) -> None:
        self._clock += 1
        node.last_access = self._clock
        heapq.heappush(self._lru_heap, (self._clock, id(node), node))

    def match_uncached(
        self, request: Request, refresh: bool = True, record: bool = False
    ) -> int:
        """Uncached-token count utok(r): input length minus matched whole blocks.

        Does not change residency; with ``refresh`` (the default) it renews the
        LRU recency of every matched block.  ``record`` adds the outcome to the
        cache's aggregate hit/miss token counters.
        """
        node = self._root
        matched = 0
        for block in self._blocks(request.tokens):
            child = node.children.get(block)
            if child is None:
                break
            node = child
            matched += 1
            if refresh:
                self._touch(node)
        hit = matched * self.block_size
        if record:
            self.hit_tokens_total += hit
            self.miss_tokens_total += request.tok - hit
        return request.tok - hit

    def insert(self, request: Request) -> int:
        """Make all whole blocks of the request resident; returns evictions.

        If the sequence exceeds total capacity, only the longest prefix that
        fits is inserted and ``last_insert_truncated`` is set.
        """
        self.last_insert_truncated = False
        blocks = self._blocks(request.tokens)
        if len(blocks) > self.capacity_blocks:
            blocks = blocks[: self.capacity_blocks]
            self.last_insert_truncated = True
        node = self._root
        path_ids = set()
        for block in blocks:
            child = node.children.get(block)
            if child is None:
                child = _Node(block, node)
                node.children[block] = child
                self._count += 1
            node = child
            path_ids.add(id(node))
            self._touch(node)
        evicted = 0
        while self._count > self.capacity_blocks:
            evicted += self._evict_one(path_ids)
        return evicted

    def _evict_one(self, pinned: set) -> int:
        """Remove the least-recently-used unpinned leaf block."""
        skipped = []
        while self._lru_heap:
            access, nid, node = heapq.heappop(self._lru_heap)
            if node.last_access != access or node.parent is None:
                continue  # stale entry or already evicted
            if node.children or nid in pinned:
                skipped.append((access, nid, node))
                continue
            node.parent.children.pop(node.key)
            node.parent = None
            self._count -= 1
            for item in skipped:
                heapq.heappush(self._lru_heap, item)
            return 1
        raise RuntimeError("prefix cache cannot evict: all resident blocks pinned")


def sample_cache_miss_ratio(
    cache: PrefixCache,
    relquery_requests: list[Request],
    sample_size: int,
    rng: np.random.Generator,
    iteration: int = 0,
) -> CacheMissRatio:
    """Miss ratio of a relQuery remainder estimated from a uniform sample.

    Requests within one relQuery share a template and data source, so a small
    sample's ratio tracks the whole; sampling is without replacement and does
    not refresh LRU recency.
    """
    if not relquery_requests:
        raise ValueError("relquery has no unfinished requests")
    n = len(relquery_requests)
    k = min(sample_size, n)
    idx = rng.choice(n, size=k, replace=False) if k < n else np.arange(n)
    utok_sum = 0
    tok_sum = 0
    for i in idx:
        r = relquery_requests[int(i)]
        utok_sum += cache.match_uncached(r, refresh=False)
        tok_sum += r.tok
    return CacheMissRatio(
        rel_id=relquery_requests[0].rel_id,
        ratio=utok_sum / tok_sum,
        computed_at_iteration=iteration,
    )


def utok_approx(request: Request, ratio: float) -> int:
    """Approximate uncached-token count: round(tok * ratio), half up."""
    if not (0.0 <= ratio <= 1.0):
        raise ValueError("ratio must be in [0, 1]")
    return min(request.tok, int(np.floor(request.tok * ratio + 0.5)))
