"""Positional-encoding weaving and chunk-based long-context inference toolkit.

Pure-CPU, double-precision reference implementations of distance-weave
schemes (capped, leaky, staircase, grouped), the chunked triangular prefill
pipeline that applies them to a KV cache, and the explicit threshold-model
constructions used to verify when extrapolation survives beyond a trained
window.
"""

from weavepe.pe_core import (
    Scheme,
    WeaveParams,
    PositionMatrix,
    alibi_score,
    alibi_slopes,
    leaky_k_inv,
    position_matrix,
    rope_score,
    self_extend_map,
    self_extend_map_ceil,
    stair_selfextend_equivalent,
    weave_leaky,
    weave_rerope,
    weave_stair,
)
from weavepe.masks import AttentionMask, approx_alibi_bias, causal_mask, lambda_mask, sink_mask
from weavepe.splitter import ChunkPlan, chunk_spans, dynamic_split
from weavepe.model import KVCache, ModelWeights, embed, forward, random_model
from weavepe.pipeline import MesaConfig, decode_step, generate, prefill
from weavepe.theory import (
    TheoryConfig,
    ThresholdReport,
    build_corollary,
    build_theorem1,
    build_theorem2,
    build_theorem3,
    position_inversion,
    threshold_scan,
)
from weavepe.evalkit import PasskeySample, bench_run, count_cells, gen_passkey, score_retrieval

__version__ = "0.1.0"
