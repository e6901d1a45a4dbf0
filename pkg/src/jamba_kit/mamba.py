"""Mamba-1 selective state-space mixer with a constant-size decode state."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import CacheError, DimensionError
from .tensor import Function, Tensor, as_tensor, causal_conv1d, linear, silu, softplus


@dataclass
class MambaParams:
    in_proj: Tensor  # [2*d_inner, d_model]
    conv_kernel: Tensor  # [d_conv, d_inner]
    x_proj: Tensor  # [dt_rank + 2*d_state, d_inner]
    dt_proj: Tensor  # [d_inner, dt_rank]
    dt_bias: Tensor  # [d_inner]
    A_log: Tensor  # [d_inner, d_state]
    D: Tensor  # [d_inner]
    out_proj: Tensor  # [d_model, d_inner]

    @property
    def d_model(self) -> int:
        return self.in_proj.shape[1]

    @property
    def d_inner(self) -> int:
        return self.D.shape[0]

    @property
    def d_state(self) -> int:
        return self.A_log.shape[1]

    @property
    def d_conv(self) -> int:
        return self.conv_kernel.shape[0]

    @property
    def dt_rank(self) -> int:
        return self.dt_proj.shape[1]

    def named(self) -> dict:
        return dict(vars(self))

    def validate(self) -> None:
        di, n, r, d = self.d_inner, self.d_state, self.dt_rank, self.d_model
        expected = {
            "in_proj": (2 * di, d),
            "conv_kernel": (self.d_conv, di),
            "x_proj": (r + 2 * n, di),
            "dt_proj": (di, r),
            "dt_bias": (di,),
            "A_log": (di, n),
            "D": (di,),
            "out_proj": (d, di),
        }
        for key, shape in expected.items():
            got = tuple(getattr(self, key).shape)
            if got != shape:
                raise DimensionError(f"mamba {key} has shape {got}, expected {shape}")


@dataclass
class MambaState:
    ssm: np.ndarray  # [d_inner, d_state]
    conv_window: np.ndarray  # [d_conv - 1, d_inner]

    @classmethod
    def zeros(cls, params: MambaParams, dtype=None) -> "MambaState":
        dtype = dtype or params.D.dtype
        return cls(
            np.zeros((params.d_inner, params.d_state), dtype=dtype),
            np.zeros((params.d_conv - 1, params.d_inner), dtype=dtype),
        )

    @property
    def nbytes(self) -> int:
        return self.ssm.nbytes + self.conv_window.nbytes

    def check(self, params: MambaParams) -> None:
        if self.ssm.shape != (params.d_inner, params.d_state):
            raise CacheError(f"ssm state {self.ssm.shape} does not match layer {(params.d_inner, params.d_state)}")
        if self.conv_window.shape != (params.d_conv - 1, params.d_inner):
            raise CacheError(
                f"conv window {self.conv_window.shape} does not match layer {(params.d_conv - 1, params.d_inner)}"
            )


def init_mamba(rng: np.random.Generator, d_model: int, d_inner: int, d_state: int, d_conv: int, dt_rank: int,
               dt_min: float = 1e-3, dt_max: float = 1e-1) -> dict:
    """Float64 initial values; the model casts to its working dtype."""
    dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), size=d_inner))
    return {
        "in_proj": rng.normal(0.0, d_model**-0.5, size=(2 * d_inner, d_model)),
        "conv_kernel": rng.uniform(-1.0, 1.0, size=(d_conv, d_inner)) / math.sqrt(d_conv),
        "x_proj": rng.normal(0.0, d_inner**-0.5, size=(dt_rank + 2 * d_state, d_inner)),
        "dt_proj": rng.uniform(-1.0, 1.0, size=(d_inner, dt_rank)) * dt_rank**-0.5,
        # inverse softplus so softplus(dt_bias) == dt
        "dt_bias": dt + np.log(-np.expm1(-dt)),
        "A_log": np.log(np.tile(np.arange(1, d_state + 1, dtype=np.float64), (d_inner, 1))),
        "D": np.ones(d_inner),
        "out_proj": rng.normal(0.0, d_inner**-0.5, size=(d_model, d_inner)),
    }


class SelectiveScan(Function):
    """Sequential Mamba-1 recurrence.

    h_t = exp(delta_t * A) * h_{t-1} + (delta_t * u_t) B_t
    y_t = h_t . C_t + D * u_t
    """

    def forward(self, u, delta, A, B, C, D, h0):
        L = u.shape[0]
        h = h0
        hs = np.empty((L + 1,) + h0.shape, dtype=u.dtype)
        hs[0] = h0
        y = np.empty_like(u)
        for t in range(L):
            dA = np.exp(delta[t][:, None] * A)
            h = dA * h + (delta[t] * u[t])[:, None] * B[t][None, :]
            hs[t + 1] = h
            y[t] = h @ C[t]
        y += u * D
        self.aux = h.copy()
        self.saved = (u, delta, A, B, C, D, hs)
        return y

    def backward(self, g):
        u, delta, A, B, C, D, hs = self.saved
        L = u.shape[0]
        gu = g * D
        gD = (g * u).sum(axis=0)
        gdelta = np.zeros_like(delta)
        gA = np.zeros_like(A)
        gB = np.zeros_like(B)
        gC = np.zeros_like(C)
        gh = np.zeros_like(hs[0])
        for t in range(L - 1, -1, -1):
            h_t, h_prev = hs[t + 1], hs[t]
            gC[t] = g[t] @ h_t
            gh = gh + g[t][:, None] * C[t][None, :]
            dA = np.exp(delta[t][:, None] * A)
            g_dA = gh * h_prev * dA
            gdelta[t] += (g_dA * A).sum(axis=1)
            gA += g_dA * delta[t][:, None]
            du = delta[t] * u[t]
            gB[t] = du @ gh
            g_du = gh @ B[t]
            gdelta[t] += g_du * u[t]
            gu[t] += g_du * delta[t]
            gh = gh * dA
        return gu, gdelta, gA, gB, gC, gD, gh


def selective_scan(u, delta, A, B, C, D, state_in: Optional[np.ndarray] = None):
    """Run the recurrence over ``L`` positions.

    Shapes: u, delta [L, d_inner]; A [d_inner, d_state]; B, C [L, d_state];
    D [d_inner]. Returns ``(y, final_state)``. ``delta`` must already be
    positive (softplus upstream).
    """
    u, delta, A, B, C, D = (as_tensor(t) for t in (u, delta, A, B, C, D))
    L, d_inner = u.shape
    d_state = A.shape[1]
    if delta.shape != (L, d_inner) or A.shape != (d_inner, d_state) or D.shape != (d_inner,):
        raise DimensionError(
            f"selective_scan: u {u.shape}, delta {delta.shape}, A {A.shape}, D {D.shape} are inconsistent"
        )
    if B.shape != (L, d_state) or C.shape != (L, d_state):
        raise DimensionError(f"selective_scan: B {B.shape} / C {C.shape} must be {(L, d_state)}")
    if state_in is None:
        state_in = np.zeros((d_inner, d_state), dtype=u.dtype)
    elif state_in.shape != (d_inner, d_state):
        raise DimensionError(f"selective_scan: state {state_in.shape} must be {(d_inner, d_state)}")
    return SelectiveScan.apply_aux(u, delta, A, B, C, D, Tensor(state_in.astype(u.dtype, copy=False)))


def mamba_forward(x: Tensor, params: MambaParams, state_in: Optional[MambaState] = None):
    """Full mixer: ``x`` [L, d_model] -> ``(y [L, d_model], MambaState)``."""
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[1] != params.d_model:
        raise DimensionError(f"mamba input {x.shape} does not match d_model={params.d_model}")
    if state_in is not None:
        state_in.check(params)
    di, n, r = params.d_inner, params.d_state, params.dt_rank

    xz = linear(x, params.in_proj)
    u, z = xz[:, :di], xz[:, di:]
    u, conv_window = causal_conv1d(u, params.conv_kernel, None if state_in is None else state_in.conv_window)
    u = silu(u)

    x_dbl = linear(u, params.x_proj)
    dt, B, C = x_dbl[:, :r], x_dbl[:, r : r + n], x_dbl[:, r + n :]
    delta = softplus(linear(dt, params.dt_proj, params.dt_bias))
    A = -params.A_log.exp()

    y, ssm = selective_scan(u, delta, A, B, C, params.D, None if state_in is None else state_in.ssm)
    y = y * silu(z)
    return linear(y, params.out_proj), MambaState(ssm, conv_window)


def mamba_step(x_t: Tensor, params: MambaParams, state: Optional[MambaState] = None):
    """Decode one token: ``x_t`` [d_model] -> ``(y_t [d_model], state)``."""
    x_t = as_tensor(x_t)
    if x_t.shape != (params.d_model,):
        raise DimensionError(f"mamba_step input {x_t.shape} must be ({params.d_model},)")
    if state is None:
        state = MambaState.zeros(params, x_t.dtype)
    y, new_state = mamba_forward(x_t.reshape(1, params.d_model), params, state)
    return y.reshape(params.d_model), new_state
