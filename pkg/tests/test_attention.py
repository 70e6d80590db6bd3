import math

import numpy as np
import pytest

from crosskv.attention import AttentionConfig, attend, attend_fused
from crosskv.rope import PairSymmetricWeight, RopeSchedule, apply_rope
from crosskv.sharing import LayerCache, init_normal, plan_for_strategy, reconstruct
from crosskv.tensor import DimensionError, Tensor


def cache_of(rng, h_kv, s, d, layer=1):
    return LayerCache(
        Tensor(rng.standard_normal((h_kv, s, d))),
        Tensor(rng.standard_normal((h_kv, s, d))),
        layer,
    )


def loop_attention(q, keys, values, group, q_pos, k_pos):
    """Naive triple-loop oracle: per head, per query row, per cache row."""
    h_q, s_q, d = q.shape
    out = np.zeros_like(q)
    for h in range(h_q):
        kv = h // group
        for t in range(s_q):
            allowed = [u for u in range(keys.shape[1]) if k_pos[u] <= q_pos[t]]
            scores = np.array([q[h, t] @ keys[kv, u] / math.sqrt(d) for u in allowed])
            e = np.exp(scores - scores.max())
            p = e / e.sum()
            for w, u in zip(p, allowed):
                out[h, t] += w * values[kv, u]
    return out


class TestAttend:
    def test_single_token_returns_value_row(self):
        rng = np.random.default_rng(0)
        cfg = AttentionConfig(3, 3, 4)
        cache = cache_of(rng, 3, 1, 4)
        q = Tensor(rng.standard_normal((3, 1, 4)))
        out = attend(q, cache, cfg, np.array([0]))
        np.testing.assert_allclose(out.numpy(), cache.values.numpy(), atol=1e-15)

    def test_two_query_heads_share_one_kv_head(self):
        rng = np.random.default_rng(1)
        cfg = AttentionConfig(2, 1, 4)
        cache = cache_of(rng, 1, 3, 4)
        q_shared = rng.standard_normal((1, 3, 4))
        q = Tensor(np.concatenate([q_shared, q_shared], axis=0))
        out = attend(q, cache, cfg, np.arange(3)).numpy()
        np.testing.assert_array_equal(out[0], out[1])

    def test_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(2)
        cfg = AttentionConfig(4, 2, 8)
        cache = cache_of(rng, 2, 2, 8)
        q = Tensor(rng.standard_normal((4, 2, 8)))
        got = attend(q, cache, cfg, np.arange(2)).numpy()
        want = loop_attention(q.numpy(), cache.keys.numpy(), cache.values.numpy(), 2, np.arange(2), np.arange(2))
        assert np.abs(got - want).max() < 1e-12

    def test_causality_by_absolute_position(self):
        rng = np.random.default_rng(3)
        cfg = AttentionConfig(2, 2, 4)
        cache = cache_of(rng, 2, 5, 4)
        q = Tensor(rng.standard_normal((2, 5, 4)))
        base = attend(q, cache, cfg, np.arange(5)).numpy()
        zeroed_k = cache.keys.numpy().copy()
        zeroed_v = cache.values.numpy().copy()
        zeroed_k[:, 3:, :] = 0.0
        zeroed_v[:, 3:, :] = 0.0
        out = attend(q, LayerCache(Tensor(zeroed_k), Tensor(zeroed_v), 1), cfg, np.arange(5)).numpy()
        np.testing.assert_array_equal(out[:, :3], base[:, :3])

    def test_position_length_mismatch_rejected(self):
        rng = np.random.default_rng(4)
        cfg = AttentionConfig(2, 2, 4)
        cache = cache_of(rng, 2, 3, 4)
        q = Tensor(rng.standard_normal((2, 3, 4)))
        with pytest.raises(DimensionError):
            attend(q, cache, cfg, np.arange(4))

    def test_grouping_mismatch_rejected(self):
        with pytest.raises(DimensionError):
            AttentionConfig(3, 2, 4)
        rng = np.random.default_rng(5)
        cfg = AttentionConfig(4, 2, 4)
        cache = cache_of(rng, 3, 2, 4)  # wrong kv head count
        q = Tensor(rng.standard_normal((4, 2, 4)))
        with pytest.raises(DimensionError):
            attend(q, cache, cfg, np.arange(2))


class TestAttendFused:
    def test_single_source_unit_weights_equals_attend(self):
        rng = np.random.default_rng(6)
        cfg = AttentionConfig(2, 2, 8)
        cache = cache_of(rng, 2, 4, 8)
        q = Tensor(rng.standard_normal((2, 4, 8)))
        fused = attend_fused(
            q, [cache], [PairSymmetricWeight.ones(8)], [Tensor(np.ones(8))], cfg, np.arange(4)
        ).numpy()
        plain = attend(q, cache, cfg, np.arange(4)).numpy()
        np.testing.assert_allclose(fused, plain, atol=1e-14)

    def test_matches_materialize_then_attend(self):
        rng = np.random.default_rng(7)
        plan = plan_for_strategy("FusedKV", 4, 2)
        weights = init_normal(plan, 8, 8)
        cfg = AttentionConfig(4, 2, 8)
        stored = {j: cache_of(rng, 2, 5, 8, layer=j) for j in (1, 2)}
        q = Tensor(rng.standard_normal((4, 5, 8)))
        k, v = reconstruct(plan, weights, stored, 3)
        mat = attend(q, LayerCache(k, v, 3), cfg, np.arange(5)).numpy()
        fused = attend_fused(
            q,
            [stored[1], stored[2]],
            [weights.key[(3, 1)], weights.key[(3, 2)]],
            [weights.value[(3, 1)], weights.value[(3, 2)]],
            cfg,
            np.arange(5),
        ).numpy()
        assert np.abs(mat - fused).max() < 1e-12

    def test_shift_invariance_end_to_end(self):
        rng = np.random.default_rng(9)
        sched = RopeSchedule(8)
        plan = plan_for_strategy("FusedKV", 4, 2)
        weights = init_normal(plan, 8, 10)
        cfg = AttentionConfig(2, 2, 8)
        raw_q = rng.standard_normal((2, 6, 8))
        raw = {j: (rng.standard_normal((2, 6, 8)), rng.standard_normal((2, 6, 8))) for j in (1, 2)}

        def run(shift):
            pos = np.arange(6) + shift
            srcs = [
                LayerCache(apply_rope(Tensor(raw[j][0]), pos, sched), Tensor(raw[j][1]), j)
                for j in (1, 2)
            ]
            return attend_fused(
                apply_rope(Tensor(raw_q), pos, sched),
                srcs,
                [weights.key[(3, 1)], weights.key[(3, 2)]],
                [weights.value[(3, 1)], weights.value[(3, 2)]],
                cfg,
                pos,
                pos,
            ).numpy()

        assert np.abs(run(0) - run(7)).max() < 1e-10

    def test_mismatched_weight_lists_rejected(self):
        rng = np.random.default_rng(11)
        cfg = AttentionConfig(2, 2, 4)
        cache = cache_of(rng, 2, 2, 4)
        q = Tensor(rng.standard_normal((2, 2, 4)))
        with pytest.raises(DimensionError):
            attend_fused(q, [cache], [], [Tensor(np.ones(4))], cfg, np.arange(2))


class TestGqaDegeneracy:
    def test_kv_equals_query_heads_reproduces_mha(self):
        rng = np.random.default_rng(12)
        cfg = AttentionConfig(4, 4, 8)
        cache = cache_of(rng, 4, 5, 8)
        q = Tensor(rng.standard_normal((4, 5, 8)))
        got = attend(q, cache, cfg, np.arange(5)).numpy()
        want = loop_attention(q.numpy(), cache.keys.numpy(), cache.values.numpy(), 1, np.arange(5), np.arange(5))
        assert np.abs(got - want).max() < 1e-12
