"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` (lines appear even
without ``-s``) or as ``python tests/test_acceptance.py``.
"""

import sys

import numpy as np
import pytest

from conftest import decode_vs_forward_diff, random_toy_config
from jamba_kit.bench import decode_growth, predicted_state_bytes, run_bench
from jamba_kit.config import attention_only, model_preset
from jamba_kit.gradcheck import run_gradcheck
from jamba_kit.mamba import MambaState, mamba_forward, mamba_step
from jamba_kit.memory import GiB, kv_cache_bytes, memory_preset
from jamba_kit.model import build_model, count_params
from jamba_kit.quant import fused_dequant_matmul, quant_report, quantize_int8, quantize_model, top1_agreement
from jamba_kit.tensor import Tensor
from jamba_kit.training import compare_penalty
from test_mamba import make_params

CTX = 262_144


@pytest.fixture
def report(request):
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def emit(n: int, title: str, ok: bool, detail: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {title} | {detail}"
        if capman is not None:
            with capman.global_and_fixture_disabled():
                sys.stdout.write("\n" + line + "\n")
        else:
            print(line)
        assert ok, line

    return emit


def test_criterion_1_kv_cache_table(report):
    expected = {"jamba-1.5-mini": 4, "jamba-1.5-large": 9, "mistral-7b": 32, "mixtral-8x7b": 32,
                "llama-3.1-8b": 32, "mixtral-8x22b": 56, "llama-3.1-70b": 80, "mistral-large-2": 88}
    got = {name: kv_cache_bytes(memory_preset(name), CTX, 2) / GiB for name in expected}
    ok = all(got[n] == gib for n, gib in expected.items())
    flagged = kv_cache_bytes(memory_preset("llama-3.1-405b"), CTX, 2) / GiB
    detail = ", ".join(f"{n}={g:g}" for n, g in got.items()) + f"; llama-3.1-405b={flagged:g} GiB (published 252, excluded)"
    report(1, "KV cache GiB rows exact", ok, detail)


def test_criterion_2_parameter_counts(report, toy, tiny):
    total, active = count_params(model_preset("jamba-1.5-large"))
    t_err, a_err = total / 398e9 - 1, active / 94e9 - 1
    exact = []
    for config in (toy, tiny, toy.replace(tie_embeddings=True, name="toy-tied")):
        enumerated = sum(w.size for w in build_model(config).named_weights().values())
        exact.append(count_params(config)[0] == enumerated)
    ok = abs(t_err) <= 0.05 and abs(a_err) <= 0.05 and all(exact)
    report(2, "parameter counts", ok,
           f"total {total / 1e9:.2f}B ({t_err:+.2%}), active {active / 1e9:.2f}B ({a_err:+.2%}), "
           f"toy enumeration exact {sum(exact)}/{len(exact)}")


def test_criterion_3_weight_fractions(report):
    r = quant_report(model_preset("jamba-1.5-large"))
    ok = r.moe_fraction >= 0.85 and r.moe_mlp_fraction >= 0.90
    report(3, "MoE / MoE+MLP weight fractions", ok, f"MoE {r.moe_fraction:.4f}, MoE+MLP {r.moe_mlp_fraction:.4f}")


def test_criterion_4_decode_equals_forward(report):
    diffs = [decode_vs_forward_diff(random_toy_config(seed), seed, n_prompt=0, n_steps=20) for seed in range(5)]
    report(4, "incremental decode == full forward", max(diffs) <= 1e-5,
           f"max abs diff over 5 configs x 20 tokens = {max(diffs):.2e} (bound 1e-5)")


def test_criterion_5_mamba_chunking_and_state(report):
    worst = 0.0
    rng = np.random.default_rng(0)
    for trial in range(30):
        p = make_params(trial % 5)
        L = int(rng.integers(2, 48))
        x = rng.normal(size=(L, 8)).astype(np.float32)
        full, _ = mamba_forward(Tensor(x), p)
        cuts = np.sort(rng.choice(np.arange(1, L), size=rng.integers(0, L - 1), replace=False))
        state, outs = None, []
        for chunk in np.split(x, cuts):
            y, state = mamba_forward(Tensor(chunk), p, state)
            outs.append(y.data)
        worst = max(worst, float(np.abs(np.vstack(outs) - full.data).max()))
    p = make_params(0)
    state = MambaState.zeros(p)
    sizes = set()
    for t in range(1000):
        _, state = mamba_step(Tensor(rng.normal(size=8).astype(np.float32)), p, state)
        sizes.add(state.nbytes)
    ok = worst <= 1e-5 and len(sizes) == 1
    report(5, "Mamba chunked == whole; constant state", ok,
           f"max diff {worst:.2e} over 30 random chunkings; state bytes over 1000 steps = {sorted(sizes)}")


def test_criterion_6_gradient_check(report, toy):
    results = run_gradcheck(toy, seed=0, n_params=40, alpha=1e-3)
    names = {r.name for r in results}
    through_routing = any(n.endswith(".ffn.router") for n in names)
    through_scan = any(n.endswith(("A_log", "dt_proj", "dt_bias", "x_proj")) for n in names)
    ok = (len(results) >= 20 and all(r.rel_err <= 1e-3 for r in results) and through_routing and through_scan
          and toy.n_blocks == 2)
    report(6, "finite-difference gradient check", ok,
           f"{sum(r.passed for r in results)}/{len(results)} within 1e-3, max rel err "
           f"{max(r.rel_err for r in results):.2e}; router sampled={through_routing}, scan sampled={through_scan}, "
           f"activation_loss alpha=1e-3")


def test_criterion_7_experts_int8(report, toy):
    rng = np.random.default_rng(0)
    fused_worst, bound_ok = 0.0, True
    for _ in range(100):
        out_dim, in_dim, m = (int(v) for v in rng.integers(1, 160, size=3))
        w = rng.normal(scale=10 ** rng.uniform(-2, 1), size=(out_dim, in_dim))
        qw = quantize_int8(w)
        x = rng.normal(size=(m, in_dim)).astype(np.float32)
        reference = x.astype(np.float64) @ qw.dequantize(np.float64).T
        fused_worst = max(fused_worst, float(np.abs(fused_dequant_matmul(x, qw) - reference).max()))
        err = np.abs(w - qw.q_weight * qw.scales.astype(np.float64)[:, None])
        bound_ok &= bool(np.all(err <= qw.scales.astype(np.float64)[:, None] / 2 * (1 + 1e-6)))
    model = build_model(toy, seed=0)
    qmodel, _ = quantize_model(model)
    prompt = np.random.default_rng(0).integers(0, toy.vocab_size, 8)
    agree = top1_agreement(model, qmodel, prompt, 200)
    ok = fused_worst <= 1e-6 and bound_ok and agree["agreement"] >= 0.95
    report(7, "ExpertsInt8 equivalence", ok,
           f"fused vs reference max diff {fused_worst:.2e} (100 instances); round-trip <= scale/2: {bound_ok}; "
           f"random-init toy top-1 agreement {agree['agreement']:.3f} over 200 steps, "
           f"max logit diff {agree['max_logit_diff']:.3f}")


def test_criterion_8_activation_penalty(report, tiny):
    r = compare_penalty(tiny, alpha=1e-3, seed=0)
    ok = r.max_activation[1] < r.max_activation[0] and r.loss_rel_diff <= 0.05
    report(8, "activation penalty", ok,
           f"final max activation {r.max_activation[0]:.2f} -> {r.max_activation[1]:.2f}; "
           f"final task loss {r.task_loss[0]:.4f} -> {r.task_loss[1]:.4f} ({r.loss_rel_diff:.2%})")


def test_criterion_9_scaling_shape(report, toy):
    results = run_bench(toy, [256, 4096], decode_tokens=512, repeats=3)
    hybrid = decode_growth(results, toy.name, 256, 4096)
    ablation = decode_growth(results, attention_only(toy).name, 256, 4096)
    peak_err = max(abs(r.peak_state_bytes / r.predicted_state_bytes - 1) for r in results)
    for r in results:
        cfg = toy if r.config == toy.name else attention_only(toy)
        assert r.predicted_state_bytes == predicted_state_bytes(cfg, r.context_len + r.decode_tokens, 4)
    ok = hybrid is not None and ablation is not None and hybrid < ablation and peak_err <= 0.01
    report(9, "decode scaling shape", ok,
           f"decode growth 256->4096: hybrid {hybrid:.2f}x, attention-only {ablation:.2f}x; "
           f"peak state bytes vs model max rel err {peak_err:.2%}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
