"""Central finite-difference checks of the analytic gradients."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .config import JambaConfig
from .model import build_model, forward
from .penalty import DEFAULT_HOOKS, activation_loss
from .tensor import Tensor, backward, cross_entropy

STEP = 1e-3
TOLERANCE = 1e-3


@dataclass
class GradCheckResult:
    name: str
    index: tuple
    analytic: float
    numeric: float
    rel_err: float
    passed: bool


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _kind(name: str) -> str:
    return re.sub(r"\.\d+", "", name)


def sample_entries(params: dict, n: int, rng: np.random.Generator) -> list:
    """Pick ``n`` (name, index) pairs, spreading picks across weight kinds
    (router, expert, A_log, dt_proj, q_proj, ...) before repeating any.
    Entries with a nonzero gradient are preferred when ``.grad`` is set."""
    kinds: dict = {}
    for name in params:
        kinds.setdefault(_kind(name), []).append(name)
    order = sorted(kinds)
    rng.shuffle(order)
    picks = []
    i = 0
    while len(picks) < n and order:
        names = kinds[order[i % len(order)]]
        name = names[rng.integers(len(names))]
        p = params[name]
        grad = p.grad
        live = np.argwhere(grad != 0) if grad is not None else np.empty((0, p.ndim), dtype=int)
        if len(live):
            idx = tuple(int(v) for v in live[rng.integers(len(live))])
        else:
            idx = tuple(int(rng.integers(s)) for s in p.shape)
        if (name, idx) not in picks:
            picks.append((name, idx))
        i += 1
    return picks


def check_gradients(loss_fn: Callable[[], Tensor], params: dict, n: int, seed: int = 0,
                    step: float = STEP, tol: float = TOLERANCE) -> list:
    """Compare backprop gradients of ``loss_fn()`` with central differences
    on ``n`` sampled parameter entries."""
    if n <= 0:
        return []
    for p in params.values():
        p.grad = None
    backward(loss_fn())
    analytic = {name: p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for name, p in params.items()}
    rng = np.random.default_rng(seed)
    results = []
    for name, idx in sample_entries(params, n, rng):
        p = params[name]
        original = p.data
        values = []
        for sign in (1.0, -1.0):
            bumped = original.copy()
            bumped[idx] += sign * step
            p.data = bumped
            values.append(loss_fn().item())
        p.data = original
        numeric = (values[0] - values[1]) / (2 * step)
        a = float(analytic[name][idx])
        err = relative_error(a, numeric)
        results.append(GradCheckResult(name, idx, a, numeric, err, err <= tol))
    for p in params.values():
        p.grad = None
    return results


def model_loss(model, tokens, alpha: float = 1e-3, hooks=DEFAULT_HOOKS) -> Callable[[], Tensor]:
    """Next-token cross-entropy plus the activation penalty, as a closure."""
    tokens = np.asarray(tokens)

    def loss() -> Tensor:
        logits, report = forward(model, tokens[:-1], hooks=hooks)
        return cross_entropy(logits, tokens[1:]) + activation_loss(report, alpha)

    return loss


def run_gradcheck(config: JambaConfig, seed: int = 0, n_params: int = 20, seq_len: int = 12,
                  alpha: float = 1e-3) -> list:
    """Gradient check of a freshly built model in float64.

    Differences of a float32 loss at step 1e-3 are dominated by rounding, so
    the check runs on the float64 widening of the same initial weights.
    """
    model = build_model(config, seed, dtype=np.float64)
    tokens = np.random.default_rng(seed + 1).integers(0, config.vocab_size, seq_len + 1)
    return check_gradients(model_loss(model, tokens, alpha), model.parameters(), n_params, seed)
