"""ExpertsInt8: calibration-free INT8 weight-only storage for MoE and MLP
weights, dequantized tile by tile inside the matmul."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DimensionError, InputError
from .tensor import Function, Tensor, as_tensor

QMAX = 127
DEFAULT_TILE = 64


@dataclass(frozen=True)
class QuantizedLinear:
    q_weight: np.ndarray  # int8 [out, in]
    scales: np.ndarray  # float32 [out]
    tile: int = DEFAULT_TILE

    @property
    def shape(self) -> tuple:
        return self.q_weight.shape

    @property
    def size(self) -> int:
        return self.q_weight.size

    @property
    def nbytes(self) -> int:
        return self.q_weight.nbytes + self.scales.nbytes

    def dequantize(self, dtype=np.float32) -> np.ndarray:
        return self.q_weight.astype(dtype) * self.scales.astype(dtype)[:, None]

    def __call__(self, x: Tensor) -> Tensor:
        return QuantLinearOp.apply(as_tensor(x), qw=self)

    def named(self) -> dict:
        return {"q_weight": self.q_weight, "scales": self.scales}


def quantize_int8(w) -> QuantizedLinear:
    """Symmetric per-output-row quantization, round half to even.

    ``scale[r] = max|W[r]| / 127`` (1.0 for an all-zero row), so every
    reconstructed element is within ``scale[r] / 2`` of the original.
    """
    w = np.asarray(w.data if isinstance(w, Tensor) else w)
    if w.ndim != 2:
        raise DimensionError(f"quantize_int8 expects a [out, in] matrix, got {w.shape}")
    if not np.all(np.isfinite(w)):
        raise InputError("cannot quantize non-finite weights")
    w64 = w.astype(np.float64)
    amax = np.abs(w64).max(axis=1)
    scales = np.where(amax > 0, amax / QMAX, 1.0).astype(np.float32)
    # np.rint rounds half to even
    q = np.rint(w64 / scales.astype(np.float64)[:, None])
    q = np.clip(q, -QMAX, QMAX).astype(np.int8)
    return QuantizedLinear(q, scales)


ACCUM = np.float64


def fused_dequant_matmul(x, qw: QuantizedLinear, tile: Optional[int] = None, tracker: Optional[list] = None) -> np.ndarray:
    """``x @ dequant(qw).T`` without materialising the float weight.

    Each block of ``tile`` output rows is converted to float inside the loop
    and dropped before the next block. Products accumulate in float64 and
    the result is returned at that precision; callers narrow it. When
    ``tracker`` is a list, the byte size of every transient float tile is
    appended to it.
    """
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    out_dim, in_dim = qw.q_weight.shape
    if x.shape[-1] != in_dim:
        raise DimensionError(f"fused_dequant_matmul: input {x.shape} vs weight {qw.q_weight.shape}")
    tile = tile or qw.tile
    xa = x.astype(ACCUM, copy=False)
    y = np.empty(x.shape[:-1] + (out_dim,), dtype=ACCUM)
    for r0 in range(0, out_dim, tile):
        r1 = min(r0 + tile, out_dim)
        w_tile = qw.q_weight[r0:r1].astype(ACCUM)
        w_tile *= qw.scales[r0:r1, None]
        if tracker is not None:
            tracker.append(w_tile.nbytes)
        y[..., r0:r1] = xa @ w_tile.T
        del w_tile
    return y


def _fused_dequant_matmul_t(g: np.ndarray, qw: QuantizedLinear) -> np.ndarray:
    """``g @ dequant(qw)``, tiled over the same output rows."""
    out_dim, in_dim = qw.q_weight.shape
    ga = g.astype(ACCUM, copy=False)
    gx = np.zeros(g.shape[:-1] + (in_dim,), dtype=ACCUM)
    for r0 in range(0, out_dim, qw.tile):
        r1 = min(r0 + qw.tile, out_dim)
        w_tile = qw.q_weight[r0:r1].astype(ACCUM) * qw.scales[r0:r1, None]
        gx += ga[..., r0:r1] @ w_tile
    return gx.astype(g.dtype, copy=False)


class QuantLinearOp(Function):
    """Differentiable in the activations only; INT8 weights stay frozen."""

    def forward(self, x, qw):
        self.saved = (qw,)
        return fused_dequant_matmul(x, qw).astype(x.dtype, copy=False)

    def backward(self, g):
        return (_fused_dequant_matmul_t(g, self.saved[0]),)


# ---------------------------------------------------------------------------
# model-level policy
# ---------------------------------------------------------------------------

QUANTIZABLE = ("moe_experts", "mlp")
NEVER_QUANTIZED = ("embedding", "unembedding", "norms", "attention", "mamba", "router")


@dataclass(frozen=True)
class QuantPolicy:
    families: frozenset = frozenset(QUANTIZABLE)

    def __post_init__(self):
        fam = frozenset(self.families)
        bad = fam - set(QUANTIZABLE)
        if bad:
            raise InputError(f"families {sorted(bad)} are never quantized; allowed: {QUANTIZABLE}")
        object.__setattr__(self, "families", fam)


@dataclass
class QuantReport:
    counts: dict  # family -> parameter count
    quantized: dict = field(default_factory=dict)  # family -> quantized parameter count

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    @property
    def quantized_total(self) -> int:
        return sum(self.quantized.values())

    @property
    def quantized_fraction(self) -> float:
        return self.quantized_total / self.total if self.total else 0.0

    def fraction(self, *families) -> float:
        return sum(self.counts.get(f, 0) for f in families) / self.total if self.total else 0.0

    @property
    def moe_fraction(self) -> float:
        return self.fraction("moe_experts")

    @property
    def moe_mlp_fraction(self) -> float:
        return self.fraction("moe_experts", "mlp")

    def rows(self) -> list:
        return [(f, n, self.quantized.get(f, 0), n / self.total if self.total else 0.0) for f, n in self.counts.items()]


def quant_report(config, policy: QuantPolicy = QuantPolicy()) -> QuantReport:
    """Report computed from the config alone (no weights needed)."""
    from .model import param_breakdown

    counts = param_breakdown(config)
    return QuantReport(counts, {f: counts[f] for f in policy.families})


def quantize_model(model, policy: QuantPolicy = QuantPolicy()):
    """Return ``(quantized_model, QuantReport)``; the input model is untouched.

    Only the linear weights of the selected FFN families are replaced; no
    data is consumed.
    """
    from .model import FAMILIES, model_from_weights, weight_family

    weights = {}
    counts = dict.fromkeys(FAMILIES, 0)
    quantized = {f: 0 for f in policy.families}
    for name, w in model.named_weights().items():
        fam = weight_family(name)
        counts[fam] += w.size
        if fam in policy.families and isinstance(w, Tensor):
            w = quantize_int8(w)
        if fam in policy.families:
            quantized[fam] += w.size
        weights[name] = w
    return model_from_weights(model.config, weights, model.dtype), QuantReport(counts, quantized)


def top1_agreement(model_a, model_b, prompt, steps: int) -> dict:
    """Teacher-forced comparison of greedy choices.

    ``model_a`` generates ``steps`` greedy tokens; at each step both models see
    the same history and their argmax tokens are compared.
    """
    from .model import HybridCache, decode_step, prefill

    la, ca = prefill(model_a, prompt)
    lb, cb = prefill(model_b, prompt)
    agree = 0
    max_diff = 0.0
    for _ in range(steps):
        ta, tb = int(np.argmax(la)), int(np.argmax(lb))
        agree += ta == tb
        max_diff = max(max_diff, float(np.abs(la - lb).max()))
        la, ca = decode_step(model_a, ta, ca)
        lb, cb = decode_step(model_b, ta, cb)
    return {"steps": steps, "agree": agree, "agreement": agree / steps if steps else 1.0, "max_logit_diff": max_diff}
