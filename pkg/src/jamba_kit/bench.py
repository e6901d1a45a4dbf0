"""Prefill/decode timing sweeps over context length, batch size 1."""

from __future__ import annotations

import csv
import io
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from .config import JambaConfig, attention_only
from .errors import InputError
from .memory import kv_cache_bytes, preset_from_config, ssm_state_bytes
from .model import HybridCache, build_model, decode_step, prefill

WARMUP_TOKENS = 4
MIN_TIMED_TOKENS = 16
PREFILL_CHUNK = 256


@dataclass
class BenchResult:
    config: str
    context_len: int
    prefill_s: float
    decode_token_s: float
    decode_tokens: int
    peak_state_bytes: int
    predicted_state_bytes: int
    status: str = "ok"  # "truncated" when the sweep point did not fit in memory


def predicted_state_bytes(config: JambaConfig, tokens: int, bytes_per_elem: int) -> int:
    preset = preset_from_config(config)
    return kv_cache_bytes(preset, tokens, bytes_per_elem) + ssm_state_bytes(preset, bytes_per_elem)


def bench_point(model, context_len: int, decode_tokens: int = 512, repeats: int = 3, seed: int = 0) -> BenchResult:
    """Median-of-``repeats`` prefill time and mean per-token decode time.

    The first few decode tokens are treated as warm-up and left out of the
    mean.
    """
    if context_len < 1:
        raise InputError("context length must be >= 1")
    if decode_tokens < WARMUP_TOKENS + MIN_TIMED_TOKENS:
        raise InputError(f"need at least {WARMUP_TOKENS + MIN_TIMED_TOKENS} decode tokens")
    cfg = model.config
    rng = np.random.default_rng(seed)
    prompt = rng.integers(0, cfg.vocab_size, context_len)
    prefills, decodes = [], []
    peak = 0
    try:
        for _ in range(repeats):
            cache = HybridCache.empty(model)
            t0 = time.perf_counter()
            logits, cache = prefill(model, prompt, cache, chunk=PREFILL_CHUNK)
            prefills.append(time.perf_counter() - t0)
            per_token = []
            for _ in range(decode_tokens):
                tok = int(np.argmax(logits))
                t0 = time.perf_counter()
                logits, cache = decode_step(model, tok, cache)
                per_token.append(time.perf_counter() - t0)
                peak = max(peak, cache.nbytes)
            decodes.append(statistics.fmean(per_token[WARMUP_TOKENS:]))
    except MemoryError:
        return BenchResult(cfg.name, context_len, 0.0, 0.0, decode_tokens, 0, 0, status="truncated")
    itemsize = np.dtype(model.dtype).itemsize
    return BenchResult(
        cfg.name, context_len, statistics.median(prefills), statistics.median(decodes), decode_tokens, peak,
        predicted_state_bytes(cfg, context_len + decode_tokens, itemsize),
    )


def run_bench(config: JambaConfig, contexts, decode_tokens: int = 512, repeats: int = 3, seed: int = 0,
              ablation: bool = True, threads: int = 1) -> list:
    """Sweep ``contexts`` for ``config`` and, with ``ablation``, for the
    attention-only model of the same depth."""
    configs = [config] + ([attention_only(config)] if ablation else [])
    models = [build_model(c, seed) for c in configs]
    jobs = [(m, ctx) for m in models for ctx in contexts]

    def run(job):
        m, ctx = job
        return bench_point(m, ctx, decode_tokens, repeats, seed)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(run, jobs))
    return [run(j) for j in jobs]


def results_csv(results: list) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=[f.name for f in fields(BenchResult)], lineterminator="\n")
    writer.writeheader()
    for r in results:
        writer.writerow(asdict(r))
    return buf.getvalue()


def decode_growth(results: list, config_name: str, short: int, long: int) -> Optional[float]:
    """Per-token decode time at ``long`` context over that at ``short``."""
    by_ctx = {r.context_len: r for r in results if r.config == config_name and r.status == "ok"}
    if short not in by_ctx or long not in by_ctx:
        return None
    return by_ctx[long].decode_token_s / by_ctx[short].decode_token_s
