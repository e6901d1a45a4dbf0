"""Tiny next-token training loop used to exercise the activation penalty."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import TrainingError
from .model import JambaModel, forward
from .penalty import PenaltyConfig, activation_loss
from .tensor import backward, cross_entropy


def make_toy_data(vocab_size: int, n_seqs: int = 64, seq_len: int = 33, seed: int = 0,
                  noise: float = 0.1, task_seed: int = 0) -> np.ndarray:
    """Sequences from a fixed random successor table with occasional random
    jumps, so the next token is mostly predictable from the current one.

    ``task_seed`` fixes the successor table; ``seed`` only drives sampling, so
    held-out sets share the task with the training set.
    """
    successor = np.random.default_rng(task_seed).permutation(vocab_size)
    rng = np.random.default_rng(seed)
    data = np.empty((n_seqs, seq_len), dtype=np.int64)
    for s in range(n_seqs):
        tok = rng.integers(vocab_size)
        for t in range(seq_len):
            data[s, t] = tok
            tok = rng.integers(vocab_size) if rng.random() < noise else successor[tok]
    return data


class Adam:
    def __init__(self, params: dict, lr: float = 3e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * p.grad
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * p.grad * p.grad
            update = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            # rebinding keeps earlier Tensor data immutable
            p.data = (p.data - update).astype(p.dtype)


@dataclass
class TrainLog:
    step: list = field(default_factory=list)
    task_loss: list = field(default_factory=list)
    activation_loss: list = field(default_factory=list)
    global_max_activation: list = field(default_factory=list)

    def rows(self) -> list:
        return list(zip(self.step, self.task_loss, self.activation_loss, self.global_max_activation))

    def write_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "task_loss", "activation_loss", "global_max_activation"])
            writer.writerows(self.rows())


def train_toy(model: JambaModel, data: np.ndarray, steps: int, alpha: float,
              penalty: Optional[PenaltyConfig] = None, lr: float = 3e-3, batch_size: int = 1,
              csv_path: Optional[Union[str, Path]] = None) -> TrainLog:
    """Adam on ``task_loss + alpha * mean(hooked activations ** 2)``.

    Each step takes the next ``batch_size`` sequences of ``data`` (cycling);
    both loss terms are averaged over the batch. The model is updated in
    place. Per-step maxima are taken over the hooked sites.
    """
    penalty = penalty or PenaltyConfig(alpha=alpha)
    params = model.parameters()
    opt = Adam(params, lr=lr)
    log = TrainLog()
    for step in range(steps):
        model.zero_grad()
        a = alpha if step >= penalty.start_step else 0.0
        task = act = None
        peak = 0.0
        for b in range(batch_size):
            seq = data[(step * batch_size + b) % len(data)]
            logits, report = forward(model, seq[:-1], hooks=penalty.hooks)
            t = cross_entropy(logits, seq[1:]) * (1.0 / batch_size)
            p = activation_loss(report, a, per_hook=penalty.per_hook) * (1.0 / batch_size)
            task = t if task is None else task + t
            act = p if act is None else act + p
            peak = max(peak, report.global_max)
        total = task + act
        if not math.isfinite(total.item()):
            raise TrainingError(f"loss became non-finite at step {step}")
        backward(total)
        opt.step()
        log.step.append(step)
        log.task_loss.append(task.item())
        log.activation_loss.append(act.item())
        log.global_max_activation.append(peak)
    if csv_path is not None:
        log.write_csv(csv_path)
    return log


def evaluate(model: JambaModel, data: np.ndarray, hooks=None) -> tuple:
    """(max hooked |activation|, mean next-token loss) over ``data``."""
    peak, losses = 0.0, []
    for seq in data:
        if hooks is None:
            logits, report = forward(model, seq[:-1])
        else:
            logits, report = forward(model, seq[:-1], hooks=hooks)
        peak = max(peak, report.global_max)
        losses.append(cross_entropy(logits, seq[1:]).item())
    return peak, float(np.mean(losses))


@dataclass(frozen=True)
class ToyRecipe:
    """Settings of the paired penalty experiment.

    Scaling the residual-branch projections 20x over the default init puts
    the toy model in a regime with large activations; at default init the
    penalty term is too small to matter in 200 steps. Noisy transitions keep an irreducible loss floor so
    the relative loss comparison is not a ratio of two near-zero numbers.
    """

    steps: int = 200
    lr: float = 3e-3
    batch_size: int = 2
    branch_scale: float = 20.0
    noise: float = 0.3
    n_train: int = 400
    n_eval: int = 64
    eval_seed: int = 99


@dataclass
class PairedResult:
    alpha: float
    max_activation: tuple  # (alpha = 0, alpha) on the held-out set
    task_loss: tuple
    logs: tuple

    @property
    def loss_rel_diff(self) -> float:
        return abs(self.task_loss[1] - self.task_loss[0]) / self.task_loss[0]


def run_toy_experiment(config, alpha: float, steps: Optional[int] = None, seed: int = 0,
                       csv_path: Optional[Union[str, Path]] = None, recipe: ToyRecipe = ToyRecipe(),
                       penalty: Optional[PenaltyConfig] = None):
    """One training run of the recipe; returns ``(model, log)``."""
    from .model import build_model

    model = build_model(config, seed, branch_scale=recipe.branch_scale)
    data = make_toy_data(config.vocab_size, n_seqs=recipe.n_train, seed=seed + 1, noise=recipe.noise)
    log = train_toy(model, data, recipe.steps if steps is None else steps, alpha, penalty=penalty,
                    lr=recipe.lr, batch_size=recipe.batch_size, csv_path=csv_path)
    return model, log


def compare_penalty(config, alpha: float = 1e-3, seed: int = 0, recipe: ToyRecipe = ToyRecipe()) -> PairedResult:
    """Train twice from the same init and data, without and with the
    penalty, then measure both models on a held-out set."""
    held_out = make_toy_data(config.vocab_size, n_seqs=recipe.n_eval, seed=recipe.eval_seed, noise=recipe.noise)
    peaks, losses, logs = [], [], []
    for a in (0.0, alpha):
        model, log = run_toy_experiment(config, a, seed=seed, recipe=recipe)
        peak, loss = evaluate(model, held_out)
        peaks.append(peak)
        losses.append(loss)
        logs.append(log)
    return PairedResult(alpha, tuple(peaks), tuple(losses), tuple(logs))


def quantized_agreement(config, seed: int = 0, steps: int = 200, train_steps: int = 0, policy=None) -> dict:
    """Top-1 decode agreement between a toy model and its INT8 copy.

    With ``train_steps=0`` the comparison runs at random init. A positive
    value first fits the toy task, which widens top-2 logit margins.
    """
    from .model import build_model
    from .quant import QuantPolicy, quantize_model, top1_agreement

    model = build_model(config, seed)
    if train_steps:
        data = make_toy_data(config.vocab_size, seed=seed + 1)
        train_toy(model, data, train_steps, alpha=0.0)
    qmodel, report = quantize_model(model, policy or QuantPolicy())
    prompt = np.random.default_rng(seed).integers(0, config.vocab_size, 8)
    stats = top1_agreement(model, qmodel, prompt, steps)
    stats["train_steps"] = train_steps
    return {"report": report, "model": qmodel, **stats}
