"""Jamba block structure: build, forward, incremental decode, generation,
and closed-form parameter accounting."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Union

import numpy as np

from .attention import AttentionParams, KVCache, attention_forward, init_attention
from .config import JambaConfig, LayerSpec, layer_plan
from .errors import CacheError, ConfigError, InputError
from .mamba import MambaParams, MambaState, init_mamba, mamba_forward
from .moe import ExpertMLP, RouterParams, init_mlp, mlp_forward, moe_forward
from .penalty import BLOCK_LAST_MAMBA, DEFAULT_HOOKS, EXPERTS, LAST_MAMBA, ActivationReport
from .tensor import Tensor, linear, rms_norm


@dataclass
class MoEBlock:
    router: RouterParams
    experts: list


@dataclass
class Layer:
    spec: LayerSpec
    mixer_norm: Tensor
    ffn_norm: Tensor
    mixer: Union[MambaParams, AttentionParams]
    ffn: Union[ExpertMLP, MoEBlock]


@dataclass
class JambaModel:
    config: JambaConfig
    embed: Tensor  # [vocab, d_model]
    layers: list
    final_norm: Tensor
    unembed: Optional[Tensor]  # None when tied to ``embed``
    dtype: np.dtype = np.dtype(np.float32)

    @property
    def output_embedding(self) -> Tensor:
        return self.embed if self.unembed is None else self.unembed

    def named_weights(self) -> dict:
        """Every stored weight (Tensor or quantized linear) by dotted name."""
        out = {"embed": self.embed}
        for i, layer in enumerate(self.layers):
            p = f"layers.{i}"
            out[f"{p}.mixer_norm"] = layer.mixer_norm
            out[f"{p}.ffn_norm"] = layer.ffn_norm
            for k, v in layer.mixer.named().items():
                out[f"{p}.mixer.{k}"] = v
            if isinstance(layer.ffn, MoEBlock):
                out[f"{p}.ffn.router"] = layer.ffn.router.gate
                for e, expert in enumerate(layer.ffn.experts):
                    for k, v in expert.named().items():
                        out[f"{p}.ffn.experts.{e}.{k}"] = v
            else:
                for k, v in layer.ffn.named().items():
                    out[f"{p}.ffn.{k}"] = v
        out["final_norm"] = self.final_norm
        if self.unembed is not None:
            out["unembed"] = self.unembed
        return out

    def parameters(self) -> dict:
        """Trainable tensors only (quantized weights are frozen)."""
        return {k: v for k, v in self.named_weights().items() if isinstance(v, Tensor)}

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def forward(self, tokens, cache=None, hooks=DEFAULT_HOOKS):
        return forward(self, tokens, cache, hooks)


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def expected_shapes(config: JambaConfig) -> dict:
    """Name -> shape for every weight of a model built from ``config``."""
    c = config.validate()
    d, di, n, r, w = c.d_model, c.d_inner, c.mamba.d_state, c.dt_rank, c.mamba.d_conv
    hd = c.head_dim
    shapes = {"embed": (c.vocab_size, d)}
    for i, spec in enumerate(layer_plan(c)):
        p = f"layers.{i}"
        shapes[f"{p}.mixer_norm"] = (d,)
        shapes[f"{p}.ffn_norm"] = (d,)
        if spec.mixer == "mamba":
            mixer = {
                "in_proj": (2 * di, d), "conv_kernel": (w, di), "x_proj": (r + 2 * n, di),
                "dt_proj": (di, r), "dt_bias": (di,), "A_log": (di, n), "D": (di,), "out_proj": (d, di),
            }
        else:
            mixer = {
                "q_proj": (c.n_q_heads * hd, d), "k_proj": (c.n_kv_heads * hd, d),
                "v_proj": (c.n_kv_heads * hd, d), "o_proj": (d, c.n_q_heads * hd),
            }
        for k, s in mixer.items():
            shapes[f"{p}.mixer.{k}"] = s
        mlp = {"gate_proj": (c.d_ff, d), "up_proj": (c.d_ff, d), "down_proj": (d, c.d_ff)}
        if spec.ffn == "moe":
            shapes[f"{p}.ffn.router"] = (c.n_experts, d)
            for e in range(c.n_experts):
                for k, s in mlp.items():
                    shapes[f"{p}.ffn.experts.{e}.{k}"] = s
        else:
            for k, s in mlp.items():
                shapes[f"{p}.ffn.{k}"] = s
    shapes["final_norm"] = (d,)
    if not c.tie_embeddings:
        shapes["unembed"] = (c.vocab_size, d)
    return shapes


BRANCH_OUTPUTS = ("down_proj", "out_proj", "o_proj")  # projections feeding the residual stream


def _init_arrays(config: JambaConfig, seed: int) -> dict:
    c = config
    rng = np.random.default_rng(seed)
    arrays = {"embed": rng.normal(0.0, 1.0, size=(c.vocab_size, c.d_model))}
    for i, spec in enumerate(layer_plan(c)):
        p = f"layers.{i}"
        arrays[f"{p}.mixer_norm"] = np.ones(c.d_model)
        arrays[f"{p}.ffn_norm"] = np.ones(c.d_model)
        if spec.mixer == "mamba":
            mixer = init_mamba(rng, c.d_model, c.d_inner, c.mamba.d_state, c.mamba.d_conv, c.dt_rank)
        else:
            mixer = init_attention(rng, c.d_model, c.n_q_heads, c.n_kv_heads)
        for k, v in mixer.items():
            arrays[f"{p}.mixer.{k}"] = v
        if spec.ffn == "moe":
            arrays[f"{p}.ffn.router"] = rng.normal(0.0, c.d_model**-0.5, size=(c.n_experts, c.d_model))
            for e in range(c.n_experts):
                for k, v in init_mlp(rng, c.d_model, c.d_ff).items():
                    arrays[f"{p}.ffn.experts.{e}.{k}"] = v
        else:
            for k, v in init_mlp(rng, c.d_model, c.d_ff).items():
                arrays[f"{p}.ffn.{k}"] = v
    arrays["final_norm"] = np.ones(c.d_model)
    if not c.tie_embeddings:
        arrays["unembed"] = rng.normal(0.0, c.d_model**-0.5, size=(c.vocab_size, c.d_model))
    # residual branches start small so depth does not swamp the embedding path
    shrink = (2 * c.n_layers) ** -0.5
    for k in arrays:
        if k.endswith(BRANCH_OUTPUTS):
            arrays[k] = arrays[k] * shrink
    return arrays


def model_from_weights(config: JambaConfig, weights: dict, dtype=np.float32) -> JambaModel:
    """Assemble a model from named weights, checking every shape.

    Values may be arrays (wrapped as trainable tensors) or objects that are
    already weights (Tensors, quantized linears).
    """
    shapes = expected_shapes(config)
    missing = set(shapes) - set(weights)
    extra = set(weights) - set(shapes)
    if missing or extra:
        raise ConfigError(f"weights do not match config: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
    dtype = np.dtype(dtype)
    w = {}
    for name, value in weights.items():
        if isinstance(value, np.ndarray):
            value = Tensor(value.astype(dtype), requires_grad=True, name=name)
        if tuple(value.shape) != tuple(shapes[name]):
            raise ConfigError(f"{name} has shape {tuple(value.shape)}, config expects {shapes[name]}")
        w[name] = value

    c = config
    layers = []
    for i, spec in enumerate(layer_plan(c)):
        p = f"layers.{i}"
        if spec.mixer == "mamba":
            mixer = MambaParams(**{k: w[f"{p}.mixer.{k}"] for k in
                                   ("in_proj", "conv_kernel", "x_proj", "dt_proj", "dt_bias", "A_log", "D", "out_proj")})
        else:
            mixer = AttentionParams(**{k: w[f"{p}.mixer.{k}"] for k in ("q_proj", "k_proj", "v_proj", "o_proj")},
                                    n_q_heads=c.n_q_heads, n_kv_heads=c.n_kv_heads)
        if spec.ffn == "moe":
            experts = [ExpertMLP(*(w[f"{p}.ffn.experts.{e}.{k}"] for k in ("gate_proj", "up_proj", "down_proj")))
                       for e in range(c.n_experts)]
            ffn = MoEBlock(RouterParams(w[f"{p}.ffn.router"], c.top_k), experts)
        else:
            ffn = ExpertMLP(*(w[f"{p}.ffn.{k}"] for k in ("gate_proj", "up_proj", "down_proj")))
        layers.append(Layer(spec, w[f"{p}.mixer_norm"], w[f"{p}.ffn_norm"], mixer, ffn))
    return JambaModel(c, w["embed"], layers, w["final_norm"], w.get("unembed"), dtype)


def build_model(config: JambaConfig, seed: int = 0, dtype=np.float32, branch_scale: float = 1.0) -> JambaModel:
    """Deterministic initialisation: equal seeds give bitwise-equal weights.

    Values are drawn in float64 and cast, so a float64 build is the exact
    widening of the float32 build's draw. ``branch_scale`` multiplies every
    projection that writes into the residual stream, which is how the toy
    penalty experiment provokes outsized activations.
    """
    config.validate()
    arrays = _init_arrays(config, seed)
    if branch_scale != 1.0:
        for k in arrays:
            if k.endswith(BRANCH_OUTPUTS):
                arrays[k] = arrays[k] * branch_scale
    return model_from_weights(config, arrays, dtype)


# ---------------------------------------------------------------------------
# decode state
# ---------------------------------------------------------------------------

@dataclass
class HybridCache:
    entries: list  # KVCache for attention layers, MambaState for mamba layers
    tokens: int = 0

    @classmethod
    def empty(cls, model: JambaModel) -> "HybridCache":
        entries = []
        for layer in model.layers:
            if layer.spec.mixer == "attention":
                entries.append(KVCache(layer.mixer.n_kv_heads, layer.mixer.head_dim, model.dtype))
            else:
                entries.append(MambaState.zeros(layer.mixer, model.dtype))
        return cls(entries)

    @property
    def attention_bytes(self) -> int:
        return sum(e.nbytes for e in self.entries if isinstance(e, KVCache))

    @property
    def mamba_bytes(self) -> int:
        return sum(e.nbytes for e in self.entries if isinstance(e, MambaState))

    @property
    def nbytes(self) -> int:
        return self.attention_bytes + self.mamba_bytes

    def check(self, model: JambaModel) -> None:
        if len(self.entries) != len(model.layers):
            raise CacheError(f"cache has {len(self.entries)} layers, model has {len(model.layers)}")
        for i, (entry, layer) in enumerate(zip(self.entries, model.layers)):
            want = KVCache if layer.spec.mixer == "attention" else MambaState
            if not isinstance(entry, want):
                raise CacheError(f"layer {i} is {layer.spec.mixer} but cache holds {type(entry).__name__}")


# ---------------------------------------------------------------------------
# forward / decode / generate
# ---------------------------------------------------------------------------

def _hooked_mamba_layers(model: JambaModel, hooks) -> set:
    mamba = [i for i, layer in enumerate(model.layers) if layer.spec.mixer == "mamba"]
    chosen = set()
    if LAST_MAMBA in hooks and mamba:
        chosen.add(mamba[-1])
    if BLOCK_LAST_MAMBA in hooks:
        per_block = model.config.layers_per_block
        for b in range(model.config.n_blocks):
            in_block = [i for i in mamba if i // per_block == b]
            if in_block:
                chosen.add(in_block[-1])
    return chosen


def forward(model: JambaModel, tokens, cache: Optional[HybridCache] = None, hooks=DEFAULT_HOOKS):
    """Token ids [L] -> ``(logits [L, vocab], ActivationReport)``.

    With a cache the tokens continue the cached sequence and the cache is
    advanced in place.
    """
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    c = model.config
    if tokens.size == 0:
        raise InputError("need at least one token")
    if tokens.min() < 0 or tokens.max() >= c.vocab_size:
        raise InputError(f"token ids must lie in [0, {c.vocab_size}), got range [{tokens.min()}, {tokens.max()}]")
    if cache is not None:
        cache.check(model)
    hooks = frozenset(hooks or ())
    hooked_mamba = _hooked_mamba_layers(model, hooks)
    report = ActivationReport()

    h = model.embed[tokens]
    for i, layer in enumerate(model.layers):
        a = rms_norm(h, layer.mixer_norm, c.rms_eps)
        if layer.spec.mixer == "mamba":
            out, state = mamba_forward(a, layer.mixer, None if cache is None else cache.entries[i])
            if cache is not None:
                cache.entries[i] = state
            if i in hooked_mamba:
                report.add(f"layer{i}.mamba", out)
        else:
            out, _ = attention_forward(a, layer.mixer, None if cache is None else cache.entries[i])
        h = h + out

        b = rms_norm(h, layer.ffn_norm, c.rms_eps)
        if isinstance(layer.ffn, MoEBlock):
            res = moe_forward(b, layer.ffn.router, layer.ffn.experts, keep_outputs=EXPERTS in hooks)
            for e, t in res.expert_outputs.items():
                report.add(f"layer{i}.expert{e}", t)
            f = res.y
        else:
            f = mlp_forward(b, layer.ffn)
        h = h + f

    logits = linear(rms_norm(h, model.final_norm, c.rms_eps), model.output_embedding)
    if cache is not None:
        cache.tokens += tokens.size
    return logits, report


def decode_step(model: JambaModel, token: int, cache: HybridCache):
    """One incremental token -> ``(logits [vocab], cache)``."""
    logits, _ = forward(model, [int(token)], cache, hooks=())
    return logits.data[0], cache


def prefill(model: JambaModel, tokens, cache: Optional[HybridCache] = None, chunk: Optional[int] = None):
    """Run a prompt into a cache, optionally in chunks; returns last logits."""
    cache = cache or HybridCache.empty(model)
    tokens = np.asarray(tokens, dtype=np.int64)
    chunk = chunk or max(int(tokens.size), 1)
    logits = None
    for start in range(0, tokens.size, chunk):
        logits, _ = forward(model, tokens[start : start + chunk], cache, hooks=())
    return (None if logits is None else logits.data[-1]), cache


def greedy(logits: np.ndarray) -> int:
    return int(np.argmax(logits))


class TemperatureSampler:
    def __init__(self, temperature: float = 1.0, seed: int = 0):
        if temperature <= 0:
            raise ConfigError("temperature must be positive")
        self.temperature = temperature
        self.rng = np.random.default_rng(seed)

    def __call__(self, logits: np.ndarray) -> int:
        z = logits.astype(np.float64) / self.temperature
        p = np.exp(z - z.max())
        return int(self.rng.choice(p.size, p=p / p.sum()))


def generate(model: JambaModel, prompt, max_new: int, sampler=greedy) -> list:
    """Prompt plus ``max_new`` sampled tokens, decoded through the cache."""
    if max_new < 0:
        raise InputError("max_new must be >= 0")
    out = [int(t) for t in prompt]
    if max_new == 0:
        return out
    logits, cache = prefill(model, out)
    for _ in range(max_new):
        tok = sampler(logits)
        out.append(tok)
        if len(out) - len(prompt) == max_new:
            break
        logits, cache = decode_step(model, tok, cache)
    return out


# ---------------------------------------------------------------------------
# parameter accounting
# ---------------------------------------------------------------------------

FAMILIES = ("embedding", "unembedding", "norms", "attention", "mamba", "router", "moe_experts", "mlp")


def param_breakdown(config: JambaConfig) -> dict:
    """Closed-form parameter count per weight family."""
    c = config.validate()
    d, di, n, r, w, hd = c.d_model, c.d_inner, c.mamba.d_state, c.dt_rank, c.mamba.d_conv, c.head_dim
    mamba_layer = 2 * di * d + w * di + (r + 2 * n) * di + r * di + di + di * n + di + d * di
    attn_layer = 2 * c.n_q_heads * hd * d + 2 * c.n_kv_heads * hd * d
    mlp = 3 * d * c.d_ff
    plan = layer_plan(c)
    n_attn = sum(s.mixer == "attention" for s in plan)
    n_moe = sum(s.ffn == "moe" for s in plan)
    counts = dict.fromkeys(FAMILIES, 0)
    counts["embedding"] = c.vocab_size * d
    counts["unembedding"] = 0 if c.tie_embeddings else c.vocab_size * d
    counts["norms"] = (2 * len(plan) + 1) * d
    counts["attention"] = n_attn * attn_layer
    counts["mamba"] = (len(plan) - n_attn) * mamba_layer
    counts["router"] = n_moe * c.n_experts * d
    counts["moe_experts"] = n_moe * c.n_experts * mlp
    counts["mlp"] = (len(plan) - n_moe) * mlp
    return counts


def count_params(config: JambaConfig) -> tuple:
    """``(total, active)``: active counts top_k of n_experts experts per MoE layer."""
    counts = param_breakdown(config)
    total = sum(counts.values())
    plan = layer_plan(config)
    n_moe = sum(s.ffn == "moe" for s in plan)
    active_experts = n_moe * config.top_k * 3 * config.d_model * config.d_ff
    return total, total - counts["moe_experts"] + active_experts


def weight_family(name: str) -> str:
    if name == "embed":
        return "embedding"
    if name == "unembed":
        return "unembedding"
    if name.endswith("_norm"):
        return "norms"
    if ".mixer." in name:
        return "mamba" if any(name.endswith(k) for k in (
            "in_proj", "conv_kernel", "x_proj", "dt_proj", "dt_bias", "A_log", ".D", "out_proj")) else "attention"
    if name.endswith(".ffn.router"):
        return "router"
    if ".ffn.experts." in name:
        return "moe_experts"
    return "mlp"
