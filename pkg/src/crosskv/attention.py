"""Causal grouped-query attention over layer caches.

Queries and cached keys arrive already rotated; masking is by absolute
token position, so shifting every position by the same offset changes
nothing. Query head h reads kv head h // (H_q / H_kv); with H_kv == H_q
this is plain multi-head attention.

`attend_fused` is the fused-cache path: it accumulates per-source score
and value contributions instead of materializing the fused cache first.
Both paths must agree to tight tolerance; tests hold them to 1e-12.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .rope import PairSymmetricWeight
from .sharing import LayerCache
from .tensor import DimensionError, Tensor, masked_softmax, matmul, matmul_t, repeat

__all__ = ["AttentionConfig", "attend", "attend_fused"]


@dataclass(frozen=True)
class AttentionConfig:
    n_query_heads: int
    n_kv_heads: int
    head_dim: int

    def __post_init__(self):
        if self.n_query_heads % self.n_kv_heads != 0:
            raise DimensionError(
                f"{self.n_query_heads} query heads not divisible by {self.n_kv_heads} kv heads"
            )
        if self.head_dim % 2 != 0:
            raise DimensionError(f"head_dim must be even for rotation, got {self.head_dim}")

    @property
    def group_size(self) -> int:
        return self.n_query_heads // self.n_kv_heads


def _causal_mask(q_positions: np.ndarray, k_positions: np.ndarray) -> np.ndarray:
    return k_positions[None, :] <= q_positions[:, None]


def _check_attention_inputs(q: Tensor, keys: Tensor, cfg: AttentionConfig, q_positions, k_positions):
    if q.ndim < 3 or q.shape[-3] != cfg.n_query_heads or q.shape[-1] != cfg.head_dim:
        raise DimensionError(
            f"queries {q.shape} do not match {cfg.n_query_heads} heads x head_dim {cfg.head_dim}"
        )
    if keys.shape[-3] != cfg.n_kv_heads or keys.shape[-1] != cfg.head_dim:
        raise DimensionError(
            f"cache {keys.shape} does not match {cfg.n_kv_heads} kv heads x head_dim {cfg.head_dim}"
        )
    if q.shape[:-3] != keys.shape[:-3]:
        raise DimensionError(f"leading dims differ: queries {q.shape} vs cache {keys.shape}")
    q_positions = np.asarray(q_positions)
    if q_positions.shape != (q.shape[-2],):
        raise DimensionError(f"{q_positions.size} query positions for {q.shape[-2]} query rows")
    s_k = keys.shape[-2]
    if k_positions is None:
        k_positions = np.arange(s_k)
    else:
        k_positions = np.asarray(k_positions)
        if k_positions.shape != (s_k,):
            raise DimensionError(f"{k_positions.size} key positions for {s_k} cache rows")
    if q_positions.min() < 0 or k_positions.min() < 0:
        raise ValueError("positions must be nonnegative")
    return q_positions, k_positions


def attend(
    q: Tensor,
    cache: LayerCache,
    cfg: AttentionConfig,
    q_positions,
    k_positions=None,
) -> Tensor:
    """Causal attention of rotated queries against one layer cache.

    q: [..., H_q, s_q, D]; cache tensors: [..., H_kv, s_k, D]. Scores are
    scaled by 1/sqrt(D); each query row attends to cache rows at positions
    <= its own. Returns [..., H_q, s_q, D].
    """
    q_positions, k_positions = _check_attention_inputs(q, cache.keys, cfg, q_positions, k_positions)
    g = cfg.group_size
    keys = repeat(cache.keys, g, axis=-3) if g > 1 else cache.keys
    values = repeat(cache.values, g, axis=-3) if g > 1 else cache.values
    scores = matmul_t(q, keys)
    probs = masked_softmax(
        scores, _causal_mask(q_positions, k_positions), 1.0 / math.sqrt(cfg.head_dim)
    )
    return matmul(probs, values)


def attend_fused(
    q: Tensor,
    sources: Sequence[LayerCache],
    key_weights: Sequence,
    value_weights: Sequence,
    cfg: AttentionConfig,
    q_positions,
    k_positions=None,
) -> Tensor:
    """Attention against a weighted fusion of several source caches, computed
    without materializing the fused cache: per-source score matrices are
    summed before one softmax, and the output sums per-source value reads.

    Key weights must be pair-symmetric (or scalars); this is what keeps the
    fused score a function of relative position only.
    """
    if not sources:
        raise DimensionError("attend_fused needs at least one source cache")
    if len(key_weights) != len(sources) or len(value_weights) != len(sources):
        raise DimensionError(
            f"{len(sources)} sources but {len(key_weights)} key weights "
            f"and {len(value_weights)} value weights"
        )
    length = sources[0].length
    for src in sources[1:]:
        if src.length != length:
            raise DimensionError("source caches have different lengths")
    q_positions, k_positions = _check_attention_inputs(
        q, sources[0].keys, cfg, q_positions, k_positions
    )
    g = cfg.group_size

    scores = None
    for src, kw in zip(sources, key_weights):
        w = kw.expanded() if isinstance(kw, PairSymmetricWeight) else kw
        keys = src.keys * w
        if g > 1:
            keys = repeat(keys, g, axis=-3)
        term = matmul_t(q, keys)
        scores = term if scores is None else scores + term
    probs = masked_softmax(
        scores, _causal_mask(q_positions, k_positions), 1.0 / math.sqrt(cfg.head_dim)
    )

    out = None
    for src, vw in zip(sources, value_weights):
        values = src.values * vw
        if g > 1:
            values = repeat(values, g, axis=-3)
        term = matmul(probs, values)
        out = term if out is None else out + term
    return out
