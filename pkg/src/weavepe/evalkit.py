"""Synthetic evaluation assets: passkey corpus, retrieval scoring, exact
attention-cell accounting, and a small wall-clock/memory bench harness.

Retrieval accuracy is meaningless on random weights, so the corpus checks are
structural: the templates, the double occurrence of the key, and the token
budget.  Cell counts are exact integers from closed-form sums, never
estimates.
"""

from __future__ import annotations

import json
import re
import time
import tracemalloc
from dataclasses import dataclass

import numpy as np

from weavepe.masks import lambda_mask, sink_mask
from weavepe.model import ModelWeights, forward, random_model
from weavepe.pipeline import MesaConfig, decode_step, prefill
from weavepe.splitter import dynamic_split

TASK_DESCRIPT = (
    "There is an important info hidden inside a lot of irrelevant text. "
    "Find it and memorize it. I will quiz you about the important information there."
)
DEFAULT_CONTENT = (
    "The grass is green. The sky is blue. The sun is yellow. "
    "Here we go. There and back again."
)
KEY_CONTENT = "The pass key is {key}. Remember it. {key} is the pass key."


def _tok(text: str) -> list[str]:
    return text.split()


@dataclass(frozen=True)
class PasskeySample:
    text: str
    key: str
    target_length: int
    key_position: int  # token index where the key sentence starts

    @property
    def token_count(self) -> int:
        return len(_tok(self.text))

    def to_json(self) -> str:
        return json.dumps(
            {
                "text": self.text,
                "key": self.key,
                "target_length": self.target_length,
                "key_position": self.key_position,
            },
            sort_keys=True,
        )


def gen_passkey(
    target_length: int,
    key: str | None = None,
    position_fraction: float | None = None,
    seed: int = 0,
) -> PasskeySample:
    """One retrieval sample: task description, filler, and the key sentence
    inserted at the fractional position.  Deterministic in all arguments;
    the seed draws the key and position when they are not given.
    """
    rng = np.random.default_rng(seed)
    if key is None:
        key = "".join(str(d) for d in rng.integers(0, 10, size=5))
    if position_fraction is None:
        position_fraction = float(rng.uniform(0.05, 0.95))
    if not key.isdigit():
        raise ValueError("key must be a digit string")
    if not 0.0 <= position_fraction <= 1.0:
        raise ValueError("position_fraction must be in [0, 1]")

    head = len(_tok(TASK_DESCRIPT))
    filler = len(_tok(DEFAULT_CONTENT))
    key_sentence = KEY_CONTENT.format(key=key)
    tail = len(_tok(key_sentence))
    if target_length < head + tail:
        raise ValueError(f"target_length {target_length} shorter than the mandatory parts")

    repeats = max(0, round((target_length - head - tail) / filler))
    gap = round(position_fraction * repeats)
    parts = [TASK_DESCRIPT] + [DEFAULT_CONTENT] * gap + [key_sentence] + [DEFAULT_CONTENT] * (repeats - gap)
    return PasskeySample(
        text=" ".join(parts),
        key=key,
        target_length=target_length,
        key_position=head + gap * filler,
    )


def gen_corpus(lengths, per_length: int, seed: int = 0) -> list[PasskeySample]:
    """Deterministic corpus: per_length samples at each target length."""
    rng = np.random.default_rng(seed)
    samples = []
    for n in lengths:
        for _ in range(per_length):
            key = "".join(str(d) for d in rng.integers(0, 10, size=5))
            frac = float(rng.uniform(0.05, 0.95))
            samples.append(gen_passkey(n, key=key, position_fraction=frac))
    return samples


def score_retrieval(generated_text: str, key: str) -> bool:
    """True iff the key appears in the text as a standalone digit run."""
    return re.search(rf"(?<![0-9]){re.escape(key)}(?![0-9])", generated_text) is not None


def count_key_occurrences(text: str, key: str) -> int:
    return len(re.findall(rf"(?<![0-9]){re.escape(key)}(?![0-9])", text))


def _tri(n: int) -> int:
    return n * (n + 1) // 2


def count_cells(method: str, n: int, params: dict | None = None) -> int:
    """Exact number of attention score entries a method computes at length n.

    vanilla: full causal triangle.  rerope_dual: two attention matrices, so
    twice vanilla.  lambda/sink: the masked cell count.  mesa: the sum over
    chunks of each chunk's context cells (vanilla when no chunking applies).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    p = params or {}
    if method == "vanilla":
        return _tri(n)
    if method == "rerope_dual":
        return 2 * _tri(n)
    if method == "lambda":
        return lambda_mask(n, p.get("n_global", 100), p.get("n_local", p.get("train_len", 4096))).count()
    if method == "sink":
        return sink_mask(n, p.get("x_sinks", 4), p.get("y_recent", p.get("train_len", 4096) - 4)).count()
    if method == "mesa":
        train_len = p.get("train_len", 4096)
        first_len = p.get("first_len", 100)
        min_last = p.get("min_last", 512)
        rest_max = p.get("rest_max", 200)
        if n <= train_len or n <= min_last + first_len:
            return _tri(n)
        plan = dynamic_split(n, train_len, first_len, min_last, rest_max)
        cells = _tri(plan.first_len)
        c = plan.chunk_width
        cells += plan.num_middle * (_tri(c) + c * plan.first_len)
        ls = plan.last_span[0]
        cells += _tri(n) - _tri(ls)  # sum of (q+1) for q in [ls, n)
        return cells
    raise ValueError(f"unknown method {method}")


def bench_run(
    method: str,
    n_list,
    repeats: int = 1,
    weights: ModelWeights | None = None,
    config: MesaConfig | None = None,
    decode_tokens: int = 4,
    seed: int = 0,
) -> list[dict]:
    """Wall-clock prefill+decode timings and peak allocation on the tiny model.

    Single-threaded per trial so timings stay comparable across methods.
    """
    weights = weights or random_model(d=8, n_heads=2, n_layers=1, vocab=32, seed=seed)
    if config is None:
        from weavepe.pe_core import Scheme, WeaveParams

        config = MesaConfig(
            train_len=256,
            weave=WeaveParams(scheme=Scheme.STAIR, cap=64, tread=8),
            first_len=16,
            min_last=32,
            rest_max=16,
        )
    rng = np.random.default_rng(seed)
    rows = []
    for n in n_list:
        tokens = rng.integers(1, weights.vocab_size, size=n - 1).tolist()
        best_prefill = np.inf
        best_decode = np.inf
        peak = 0
        cells = 0
        for _ in range(repeats):
            tracemalloc.start()
            t0 = time.perf_counter()
            if method == "vanilla":
                forward(tokens, weights)
                t1 = time.perf_counter()
                t2 = t1  # no cached decode path for the vanilla baseline
                cells = count_cells("vanilla", n)
            elif method == "mesa":
                res = prefill(tokens, weights, config)
                t1 = time.perf_counter()
                logits, cache = res.logits, res.cache
                for _ in range(decode_tokens):
                    logits, cache = decode_step(cache, int(np.argmax(logits)), weights, config)
                t2 = time.perf_counter()
                cells = res.report.total_cells
            else:
                raise ValueError(f"unknown bench method {method}")
            _, peak_b = tracemalloc.get_traced_memory()
            tracemalloc.stop()
            best_prefill = min(best_prefill, t1 - t0)
            best_decode = min(best_decode, t2 - t1)
            peak = max(peak, peak_b)
        rows.append(
            {
                "method": method,
                "n": n,
                "prefill_seconds": best_prefill,
                "decode_seconds": best_decode,
                "peak_bytes": peak,
                "cells": cells,
            }
        )
    return rows


def bench_table_csv(rows: list[dict]) -> str:
    cols = ["method", "n", "prefill_seconds", "decode_seconds", "peak_bytes", "cells"]
    lines = [",".join(cols)]
    for r in rows:
        lines.append(",".join(f"{r[c]:.6g}" if isinstance(r[c], float) else str(r[c]) for c in cols))
    return "\n".join(lines) + "\n"
