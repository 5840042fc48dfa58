"""Chunk-based triangular prefill with a woven last chunk, plus woven decode.

Prefill runs the first chunk alone at local positions, each middle chunk
against the first chunk only (both at local coordinates, so no positional
distance ever exceeds the trained window), and the last chunk against the
full concatenated cache with staircase-woven coordinates anchored at the
final token.  Decode re-anchors the woven coordinates at each new token, so
every decode query sees exactly the woven distance to every key.

Middle chunks are independent given the first chunk's keys and values and
could run in parallel; this implementation processes them sequentially.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from weavepe.model import (
    KVCache,
    ModelWeights,
    forward,
    layer_norm_cols,
)
from weavepe.pe_core import (
    Scheme,
    WeaveParams,
    rotate_by_coords,
    weave_fn,
)
from weavepe.splitter import ChunkPlan, chunk_spans, dynamic_split


@dataclass(frozen=True)
class MesaConfig:
    """Weave and split parameters for the pipeline.

    The weave point must sit inside the trained window; inputs that fit the
    window (or the first+last budget) are processed in a single vanilla pass.
    """

    train_len: int
    weave: WeaveParams = field(default_factory=lambda: WeaveParams(scheme=Scheme.STAIR, cap=512, tread=50))
    first_len: int = 100
    min_last: int = 512
    rest_max: int = 200

    def __post_init__(self) -> None:
        if self.train_len <= self.first_len:
            raise ValueError("train_len must exceed first_len")
        if self.weave.scheme is Scheme.SELF_EXTEND:
            raise ValueError("the grouped scheme is not a pure distance weave; use stair/rerope/leaky")
        if self.weave.cap >= self.train_len:
            raise ValueError("weave point must sit inside the trained window")


@dataclass
class ChunkTrace:
    """What one chunk's attention actually touched."""

    kind: str                      # "single" | "first" | "middle" | "last" | "decode"
    q_span: tuple[int, int]        # raw token indices of the queries
    ctx_indices: np.ndarray        # raw indices of out-of-chunk context keys
    cells: int                     # attention score entries computed (one head, one layer)
    max_pe_distance: float         # largest coordinate distance fed to the PE

    def allowed_pairs(self) -> set[tuple[int, int]]:
        """(query, key) pairs this chunk computed; for small-n pattern checks."""
        pairs = set()
        for q in range(*self.q_span):
            for i in self.ctx_indices:
                pairs.add((q, int(i)))
            for i in range(self.q_span[0], q + 1):
                pairs.add((q, i))
        return pairs


@dataclass
class RunReport:
    """Chunk plan, exact per-chunk cell counts, and wall-clock stage timings."""

    plan: ChunkPlan | None
    fallback: bool
    chunks: list[ChunkTrace] = field(default_factory=list)
    prefill_seconds: float = 0.0
    decode_seconds: float = 0.0
    decode_steps: int = 0

    @property
    def total_cells(self) -> int:
        return sum(c.cells for c in self.chunks if c.kind != "decode")

    def to_doc(self, include_timings: bool = False) -> dict:
        doc = {
            "fallback": self.fallback,
            "plan": None if self.plan is None else self.plan.to_json().strip(),
            "prefill_cells": self.total_cells,
            "chunks": [
                {
                    "kind": c.kind,
                    "q_span": list(c.q_span),
                    "cells": c.cells,
                    "max_pe_distance": c.max_pe_distance,
                }
                for c in self.chunks
            ],
        }
        if include_timings:
            doc["prefill_seconds"] = self.prefill_seconds
            doc["decode_seconds"] = self.decode_seconds
            doc["decode_steps"] = self.decode_steps
        return doc


@dataclass
class PrefillResult:
    logits: np.ndarray
    cache: KVCache
    report: RunReport


def _n_heads(weights: ModelWeights) -> int:
    return len(weights.layers[0].heads)


def _chunk_scores(weights, head_idx, q, k, q_coords, k_coords):
    """Score kernel on explicit coordinates; q (m,h), k (n,h)."""
    fam = weights.pe_family
    if fam == "dot":
        return q @ k.T
    if fam == "rotary":
        qr = rotate_by_coords(q.T, q_coords, weights.theta_base).T
        kr = rotate_by_coords(k.T, k_coords, weights.theta_base).T
        return qr @ kr.T
    if fam == "additive":
        slope = weights.slope_for_head(head_idx)
        dmat = np.asarray(q_coords, dtype=np.float64)[:, None] - np.asarray(k_coords, dtype=np.float64)[None, :]
        return q @ k.T - slope * dmat
    raise ValueError(f"pipeline does not support pe_family {fam}")


def _run_chunk(
    seq_ids: np.ndarray,
    weights: ModelWeights,
    cache: KVCache,
    span: tuple[int, int],
    ctx_span: tuple[int, int] | None,
    coords_of,  # callable raw index array -> PE coordinates array
) -> tuple[np.ndarray, int, float]:
    """Process tokens in span against cached context; appends their raw K/V.

    Returns (hidden d x m of the chunk through all layers, cells computed per
    layer/head, max coordinate distance used).
    """
    lo, hi = span
    ids = seq_ids[lo:hi]
    h = weights.w_e[:, ids].astype(np.float64)
    m = hi - lo
    q_raw = np.arange(lo, hi)
    q_coords = np.asarray(coords_of(q_raw), dtype=np.float64)

    if ctx_span is not None and ctx_span[1] > ctx_span[0]:
        _, _, ctx_idx = cache.view(0, 0, span=ctx_span)
    else:
        ctx_idx = np.zeros(0, dtype=np.int64)
    ctx_coords = np.asarray(coords_of(ctx_idx), dtype=np.float64) if ctx_idx.size else np.zeros(0)
    k_raw = np.concatenate([ctx_idx, q_raw])
    k_coords = np.concatenate([ctx_coords, q_coords])
    allowed = q_raw[:, None] >= k_raw[None, :]

    cells = int(np.sum(allowed))
    if cells:
        dist = q_coords[:, None] - k_coords[None, :]
        max_pe = float(np.max(np.abs(dist[allowed])))
    else:
        max_pe = 0.0

    new_k = [[None] * _n_heads(weights) for _ in weights.layers]
    new_v = [[None] * _n_heads(weights) for _ in weights.layers]
    for li, layer in enumerate(weights.layers):
        a = np.zeros_like(h)
        for mi, head in enumerate(layer.heads):
            k_self = head.w_k @ h
            v_self = head.w_v @ h
            new_k[li][mi] = k_self
            new_v[li][mi] = v_self
            if ctx_idx.size:
                k_ctx, v_ctx, _ = cache.view(li, mi, span=ctx_span)
                k_all = np.concatenate([k_ctx, k_self], axis=1)
                v_all = np.concatenate([v_ctx, v_self], axis=1)
            else:
                k_all, v_all = k_self, v_self
            q = head.w_q @ h
            s = _chunk_scores(weights, mi, q.T, k_all.T, q_coords, k_coords)
            s = np.where(allowed, s, -np.inf)
            mx = np.max(s, axis=1, keepdims=True)
            e = np.exp(s - mx)
            alpha = e / np.sum(e, axis=1, keepdims=True)
            a += head.w_o @ (v_all @ alpha.T)
        z = a + h
        zz = layer_norm_cols(z) if layer.layer_norm == "standard" else z
        h = layer.ff(zz) + z
    cache.append(q_raw, new_k, new_v)
    return h, cells, max_pe


def _fill_cache_from_forward(seq_ids: np.ndarray, weights: ModelWeights) -> tuple[np.ndarray, KVCache]:
    """Vanilla single-pass forward; raw K/V recomputed per layer for the cache."""
    trace = forward(seq_ids[1:], weights, weave=_identity_weave(weights))
    cache = KVCache(len(weights.layers), _n_heads(weights))
    idx = np.arange(len(seq_ids))
    k_blocks = []
    v_blocks = []
    for li, layer in enumerate(weights.layers):
        h_in = trace.hidden[li]
        k_blocks.append([head.w_k @ h_in for head in layer.heads])
        v_blocks.append([head.w_v @ h_in for head in layer.heads])
    cache.append(idx, k_blocks, v_blocks)
    logits = weights.w_e.T @ trace.hidden[-1][:, -1]
    return logits, cache


def _identity_weave(weights: ModelWeights) -> WeaveParams:
    scheme = Scheme.ROPE if weights.pe_family == "rotary" else Scheme.ALIBI
    return WeaveParams(scheme=scheme, theta_base=weights.theta_base)


def prefill(tokens, weights: ModelWeights, config: MesaConfig) -> PrefillResult:
    """Chunked prefill of the whole prompt; returns last-position logits and the cache.

    Inputs that fit the trained window (or the first+last budget) fall back to
    a single vanilla pass with regular positions.
    """
    if len(tokens) == 0:
        raise ValueError("empty input")
    seq_ids = np.asarray([0] + [int(t) for t in tokens], dtype=np.int64)
    if seq_ids.min() < 0 or seq_ids.max() >= weights.vocab_size:
        raise ValueError("token id out of range")
    total = len(seq_ids)
    t0 = time.perf_counter()

    if total <= config.train_len or total <= config.min_last + config.first_len:
        logits, cache = _fill_cache_from_forward(seq_ids, weights)
        report = RunReport(plan=None, fallback=True)
        report.chunks.append(
            ChunkTrace(
                kind="single",
                q_span=(0, total),
                ctx_indices=np.zeros(0, dtype=np.int64),
                cells=total * (total + 1) // 2,
                max_pe_distance=float(total - 1),
            )
        )
        report.prefill_seconds = time.perf_counter() - t0
        return PrefillResult(logits=logits, cache=cache, report=report)

    plan = dynamic_split(total, config.train_len, config.first_len, config.min_last, config.rest_max)
    spans = chunk_spans(plan)
    cache = KVCache(len(weights.layers), _n_heads(weights))
    report = RunReport(plan=plan, fallback=False)
    remap = weave_fn(config.weave)
    anchor = total - 1

    def raw_coords(idx):
        return idx

    h_last = None
    for ci, span in enumerate(spans):
        if ci == 0:
            kind, ctx, coords = "first", None, raw_coords
        elif ci < len(spans) - 1:
            kind, ctx = "middle", (0, plan.first_len)
            offset = span[0] - plan.first_len

            def coords(idx, off=offset):
                # context keeps raw local 0..F-1; chunk tokens shift to F..F+C-1
                idx = np.asarray(idx)
                return np.where(idx < plan.first_len, idx, idx - off)

        else:
            kind, ctx = "last", (0, span[0])

            def coords(idx):
                idx = np.asarray(idx, dtype=np.int64)
                return anchor - remap(anchor - idx)

        h_chunk, cells, max_pe = _run_chunk(seq_ids, weights, cache, span, ctx, coords)
        if ctx is not None and ctx[1] > ctx[0]:
            ctx_idx = np.arange(ctx[0], ctx[1], dtype=np.int64)
        else:
            ctx_idx = np.zeros(0, dtype=np.int64)
        report.chunks.append(
            ChunkTrace(kind=kind, q_span=span, ctx_indices=ctx_idx, cells=cells, max_pe_distance=max_pe)
        )
        h_last = h_chunk

    logits = weights.w_e.T @ h_last[:, -1]
    report.prefill_seconds = time.perf_counter() - t0
    return PrefillResult(logits=logits, cache=cache, report=report)


def decode_step(
    cache: KVCache, next_token: int, weights: ModelWeights, config: MesaConfig
) -> tuple[np.ndarray, KVCache]:
    """Append one token; its query attends every cached key at woven distances."""
    if not (0 <= int(next_token) < weights.vocab_size):
        raise ValueError(f"unknown token id {next_token}")
    t_new = len(cache)
    remap = weave_fn(config.weave)
    h = weights.w_e[:, [int(next_token)]].astype(np.float64)

    new_k = [[None] * _n_heads(weights) for _ in weights.layers]
    new_v = [[None] * _n_heads(weights) for _ in weights.layers]
    for li, layer in enumerate(weights.layers):
        a = np.zeros_like(h)
        for mi, head in enumerate(layer.heads):
            k_self = head.w_k @ h
            v_self = head.w_v @ h
            new_k[li][mi] = k_self
            new_v[li][mi] = v_self
            k_ctx, v_ctx, idx = cache.view(li, mi)
            k_all = np.concatenate([k_ctx, k_self], axis=1)
            v_all = np.concatenate([v_ctx, v_self], axis=1)
            all_idx = np.concatenate([idx, [t_new]])
            k_coords = t_new - np.asarray(remap(t_new - all_idx), dtype=np.float64)
            q = head.w_q @ h
            s = _chunk_scores(weights, mi, q.T, k_all.T, np.asarray([float(t_new)]), k_coords)
            mx = np.max(s)
            e = np.exp(s - mx)
            alpha = e / np.sum(e)
            a += head.w_o @ (v_all @ alpha.T)
        z = a + h
        zz = layer_norm_cols(z) if layer.layer_norm == "standard" else z
        h = layer.ff(zz) + z
    cache.append(np.asarray([t_new]), new_k, new_v)
    logits = weights.w_e.T @ h[:, -1]
    return logits, cache


@dataclass
class GenerationResult:
    token_ids: list[int]
    report: RunReport


def generate(
    tokens,
    weights: ModelWeights,
    config: MesaConfig,
    max_new: int,
    stop_id: int | None = None,
) -> GenerationResult:
    """Greedy generation: prefill once, then decode one token at a time."""
    pre = prefill(tokens, weights, config)
    report = pre.report
    out: list[int] = []
    logits = pre.logits
    cache = pre.cache
    t0 = time.perf_counter()
    for _ in range(max_new):
        nxt = int(np.argmax(logits))
        out.append(nxt)
        if stop_id is not None and nxt == stop_id:
            break
        logits, cache = decode_step(cache, nxt, weights, config)
        report.decode_steps += 1
    report.decode_seconds = time.perf_counter() - t0
    return GenerationResult(token_ids=out, report=report)


def decode_distances(cache_len: int, config: MesaConfig) -> np.ndarray:
    """Effective woven distance from a decode query at position cache_len to
    each cached key; exposed for exactness checks."""
    remap = weave_fn(config.weave)
    idx = np.arange(cache_len + 1)
    k_coords = cache_len - np.asarray(remap(cache_len - idx), dtype=np.float64)
    return cache_len - k_coords
