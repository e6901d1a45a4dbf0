import numpy as np
import pytest

from jamba_kit.config import model_preset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy():
    return model_preset("toy")


@pytest.fixture(scope="session")
def tiny():
    return model_preset("toy-tiny")


def central_diff(f, x: np.ndarray, idx, step: float = 1e-3) -> float:
    """Central difference of scalar ``f`` w.r.t. ``x[idx]`` (x is float64)."""
    orig = x[idx]
    x[idx] = orig + step
    up = f(x)
    x[idx] = orig - step
    down = f(x)
    x[idx] = orig
    return (up - down) / (2 * step)


def rel_err(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)


def random_toy_config(seed: int):
    """Small valid hybrid config drawn from ``seed``."""
    from jamba_kit.config import JambaConfig, MambaSettings

    rng = np.random.default_rng(seed)
    hkv = int(rng.choice([1, 2]))
    hq = hkv * int(rng.choice([1, 2]))
    n_experts = int(rng.integers(2, 6))
    return JambaConfig(
        d_model=int(rng.choice([16, 24, 32])),
        n_q_heads=hq,
        n_kv_heads=hkv,
        d_ff=int(rng.choice([24, 48])),
        vocab_size=int(rng.integers(20, 60)),
        n_blocks=int(rng.integers(1, 3)),
        attn_layer_offset=int(rng.integers(0, 8)),
        moe_offset=int(rng.integers(0, 2)),
        n_experts=n_experts,
        top_k=int(rng.integers(1, min(n_experts, 3) + 1)),
        tie_embeddings=bool(rng.integers(0, 2)),
        mamba=MambaSettings(d_state=int(rng.choice([4, 8])), d_conv=int(rng.choice([2, 4]))),
        name=f"random-{seed}",
    ).validate()


def decode_vs_forward_diff(config, seed: int, n_prompt: int = 4, n_steps: int = 20) -> float:
    """Max |logit| gap between incremental decode and full re-forward."""
    from jamba_kit.model import HybridCache, build_model, decode_step, forward

    model = build_model(config, seed)
    tokens = np.random.default_rng(seed).integers(0, config.vocab_size, n_prompt + n_steps)
    full, _ = forward(model, tokens)
    cache = HybridCache.empty(model)
    worst = 0.0
    for t, tok in enumerate(tokens):
        logits, cache = decode_step(model, tok, cache)
        worst = max(worst, float(np.abs(logits - full.data[t]).max()))
    return worst
