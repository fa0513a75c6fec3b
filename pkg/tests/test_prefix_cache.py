import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from relsim.prefix_cache import PrefixCache, sample_cache_miss_ratio, utok_approx
from relsim.workload import Request


def req(tokens, rel_id=0, req_id=0, limit=10):
    return Request(
        rel_id=rel_id, req_id=req_id, tokens=list(tokens),
        output_limit=limit, actual_output_len=limit,
    )


class TestMatchUncached:
    def test_cold_cache(self):
        c = PrefixCache(block_size=16, capacity_blocks=64)
        assert c.match_uncached(req(range(100))) == 100

    def test_full_hit_after_insert(self):
        c = PrefixCache(block_size=16, capacity_blocks=64)
        a = req(range(64))
        c.insert(a)
        assert c.match_uncached(req(range(64), req_id=1)) == 0

    def test_shared_two_block_prefix(self):
        c = PrefixCache(block_size=16, capacity_blocks=64)
        a = req(list(range(32)) + [1000 + i for i in range(20)])
        b = req(list(range(32)) + [2000 + i for i in range(25)], req_id=1)
        c.insert(a)
        assert c.match_uncached(b) == b.tok - 32

    def test_partial_block_counts_as_miss(self):
        c = PrefixCache(block_size=16, capacity_blocks=64)
        c.insert(req(range(40)))  # caches 2 whole blocks (32 tokens)
        assert c.match_uncached(req(range(40), req_id=1)) == 8

    def test_block_aligned_residual_zero(self):
        c = PrefixCache(block_size=16, capacity_blocks=64)
        r = req(range(48))
        c.insert(r)
        assert c.match_uncached(r) == 0


class TestInsert:
    def test_no_eviction_under_capacity(self):
        c = PrefixCache(block_size=16, capacity_blocks=4)
        assert c.insert(req(range(48))) == 0
        assert len(c) == 3

    def test_lru_eviction_oldest_first(self):
        c = PrefixCache(block_size=4, capacity_blocks=4)
        # four unrelated single-block sequences, in order
        for i in range(4):
            c.insert(req([100 * i + j for j in range(4)], req_id=i))
        # inserting a 2-block sequence evicts the two LRU-oldest blocks
        evicted = c.insert(req(list(range(1000, 1008)), req_id=9))
        assert evicted == 2
        assert c.match_uncached(req([0, 1, 2, 3], req_id=10), refresh=False) == 4
        assert c.match_uncached(req([100, 101, 102, 103], req_id=11), refresh=False) == 4
        assert c.match_uncached(req([200, 201, 202, 203], req_id=12), refresh=False) == 0

    def test_reinsert_idempotent(self):
        c = PrefixCache(block_size=4, capacity_blocks=8)
        r = req(range(8))
        c.insert(r)
        assert c.insert(r) == 0
        assert len(c) == 2

    def test_recency_refresh_protects_from_eviction(self):
        c = PrefixCache(block_size=4, capacity_blocks=2)
        c.insert(req([0, 1, 2, 3]))
        c.insert(req([10, 11, 12, 13], req_id=1))
        c.match_uncached(req([0, 1, 2, 3], req_id=2))  # refresh the older block
        c.insert(req([20, 21, 22, 23], req_id=3))
        assert c.match_uncached(req([0, 1, 2, 3], req_id=4), refresh=False) == 0
        assert c.match_uncached(req([10, 11, 12, 13], req_id=5), refresh=False) == 4

    def test_oversized_request_truncated(self):
        c = PrefixCache(block_size=4, capacity_blocks=2)
        c.insert(req(range(40)))
        assert c.last_insert_truncated
        assert len(c) == 2
        assert c.match_uncached(req(range(40), req_id=1), refresh=False) == 32


def prefix_closed(cache):
    # every cached block's parent chain reaches the root
    def walk(node):
        for child in node.children.values():
            assert child.parent is node
            walk(child)
    walk(cache._root)
    count = 0
    stack = [cache._root]
    while stack:
        n = stack.pop()
        count += len(n.children)
        stack.extend(n.children.values())
    assert count == len(cache)


@settings(max_examples=60, deadline=None)
@given(
    ops=st.lists(
        st.tuples(
            st.sampled_from(["insert", "match"]),
            st.integers(min_value=0, max_value=7),   # shared-prefix family
            st.integers(min_value=1, max_value=60),  # length
        ),
        min_size=1,
        max_size=60,
    ),
    capacity=st.integers(min_value=2, max_value=12),
)
def test_prefix_closure_random_ops(ops, capacity):
    c = PrefixCache(block_size=4, capacity_blocks=capacity)
    for i, (op, family, length) in enumerate(ops):
        tokens = [family * 1000 + j for j in range(length)]
        r = req(tokens, req_id=i)
        if op == "insert":
            c.insert(r)
        else:
            c.match_uncached(r)
        prefix_closed(c)
        assert len(c) <= capacity


class TestSampling:
    def make_relquery_requests(self, n=30, shared=64, unique=40):
        return [
            req(list(range(shared)) + [10_000 * (i + 1) + j for j in range(unique)], req_id=i)
            for i in range(n)
        ]

    def test_cold_cache_ratio_one(self):
        c = PrefixCache(16, 256)
        rs = self.make_relquery_requests()
        cmr = sample_cache_miss_ratio(c, rs, 8, np.random.default_rng(0))
        assert cmr.ratio == 1.0

    def test_fully_cached_ratio_zero(self):
        c = PrefixCache(16, 4096)
        rs = self.make_relquery_requests(n=10)
        for r in rs:
            c.insert(r)
        cmr = sample_cache_miss_ratio(c, rs, 4, np.random.default_rng(0))
        # unique tails are 40 tokens = 2.5 blocks; whole blocks cached, the
        # 8-token partial remains a miss
        assert cmr.ratio == pytest.approx(8 / 104)

    def test_exhaustive_sample_is_exact(self):
        c = PrefixCache(16, 4096)
        rs = self.make_relquery_requests(n=12)
        for r in rs[:5]:
            c.insert(r)
        exact = sum(c.match_uncached(r, refresh=False) for r in rs) / sum(r.tok for r in rs)
        cmr = sample_cache_miss_ratio(c, rs, len(rs), np.random.default_rng(1))
        assert cmr.ratio == pytest.approx(exact)

    def test_empty_relquery_rejected(self):
        c = PrefixCache(16, 64)
        with pytest.raises(ValueError):
            sample_cache_miss_ratio(c, [], 8, np.random.default_rng(0))


class TestUtokApprox:
    def test_typical_ratio(self):
        assert utok_approx(req(range(200)), 0.38) == 76

    def test_endpoints(self):
        r = req(range(57))
        assert utok_approx(r, 0.0) == 0
        assert utok_approx(r, 1.0) == 57

    def test_round_half_up(self):
        assert utok_approx(req(range(215)), 0.5) == 108

    def test_never_exceeds_tok(self):
        r = req(range(9))
        for ratio in np.linspace(0, 1, 21):
            assert utok_approx(r, float(ratio)) <= 9

    def test_bad_ratio(self):
        with pytest.raises(ValueError):
            utok_approx(req(range(5)), 1.5)


def test_sampled_aggregate_close_to_exact_many_seeds():
    # expected utok* aggregate over seeds converges to the exact aggregate
    c = PrefixCache(16, 8192)
    rs = [
        req(list(range(96)) + [10_000 * (i + 1) + j for j in range(40 + (i % 7))], req_id=i)
        for i in range(60)
    ]
    for r in rs[:20]:
        c.insert(r)
    exact = sum(c.match_uncached(r, refresh=False) for r in rs)
    estimates = []
    for seed in range(40):
        cmr = sample_cache_miss_ratio(c, rs, 8, np.random.default_rng(seed))
        estimates.append(sum(utok_approx(r, cmr.ratio) for r in rs))
    assert abs(np.mean(estimates) - exact) / exact < 0.05
