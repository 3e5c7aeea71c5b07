"""Optimization for the stick-breaking embedded topic model.

Exact gradients of the three-term objective via reverse-mode
differentiation, a hand-rolled AdamW step, the one-cycle learning-rate
schedule, the per-timestep epoch loop, and warm starting of a model
from its predecessor when the topic budget or vocabulary changes.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .sbetm import (
    DTYPE,
    ModelConfig,
    ModelParams,
    counts_matrix,
    elbo,
    init_params,
)


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and loop settings for one timestep of training.

    ``n_samples`` is the Monte Carlo sample count per document. The
    step-decay schedule exists as an alternative reading of the
    training recipe; one-cycle is the default.
    """

    lr_max: float = 0.01
    weight_decay: float = 0.006
    batch_size: int = 1024
    epochs: int = 300
    warmup_frac: float = 0.1
    n_samples: int = 1
    seed: int = 0
    schedule: str = "one_cycle"
    step_size: int = 5000
    step_gamma: float = 0.5

    def __post_init__(self):
        if self.lr_max <= 0:
            raise ValueError("lr_max must be positive")
        if not 0.0 < self.warmup_frac < 1.0:
            raise ValueError("warmup_frac must lie strictly between 0 and 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.n_samples < 1:
            raise ValueError("n_samples must be positive")
        if self.schedule not in ("one_cycle", "step"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


@dataclass
class OptState:
    """AdamW moment accumulators, keyed like the trainable tensors."""

    m: dict
    v: dict
    step: int = 0

    @classmethod
    def for_params(cls, params: ModelParams) -> "OptState":
        names = params.trainable_names()
        return cls(
            m={n: torch.zeros_like(params.tensors[n]) for n in names},
            v={n: torch.zeros_like(params.tensors[n]) for n in names},
        )


class TrainingDiverged(RuntimeError):
    """Raised when the loss or a gradient goes non-finite.

    Carries the last parameters that completed a full epoch and the
    training log up to the failure.
    """

    def __init__(self, message, last_params: ModelParams, log):
        super().__init__(message)
        self.last_params = last_params
        self.log = log


def _loss_and_grads(params, counts, config: TrainConfig, generator, mode):
    loss, parts = elbo(
        counts,
        params,
        params.config,
        generator,
        n_samples=config.n_samples,
        mode=mode,
    )
    names = params.trainable_names()
    raw = torch.autograd.grad(
        loss, [params.tensors[n] for n in names], allow_unused=True
    )
    grads = {}
    for name, g in zip(names, raw):
        if g is None:
            g = torch.zeros_like(params.tensors[name])
        elif not torch.isfinite(g).all():
            raise ValueError(f"non-finite gradient for tensor {name!r}")
        grads[name] = g.detach()
    return grads, float(loss.detach()), {k: float(v) for k, v in parts.items()}


def gradients(params, counts, config: TrainConfig, generator, mode="train") -> dict:
    """Gradients of the objective for every trainable tensor.

    The word embeddings stay fixed, so they never appear in the result.
    Tensors that do not reach the loss get explicit zero gradients.
    """
    grads, _, _ = _loss_and_grads(params, counts, config, generator, mode)
    return grads


def adam_step(
    params: ModelParams,
    grads: dict,
    opt_state: OptState,
    lr: float,
    weight_decay: float = 0.0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
):
    """One bias-corrected AdamW update, in place on ``params``.

    Weight decay is decoupled: the decay direction comes from the
    pre-update parameter value, so lr=0 is the identity regardless of
    the decay setting.
    """
    opt_state.step += 1
    t = opt_state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    with torch.no_grad():
        for name, g in grads.items():
            p = params.tensors[name]
            m = opt_state.m[name]
            v = opt_state.v[name]
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            update = (m / c1) / ((v / c2).sqrt() + eps)
            if weight_decay:
                update = update + weight_decay * p
            p.add_(update, alpha=-lr)
    return params, opt_state


def one_cycle_lr(step: int, total_steps: int, lr_max: float, warmup_frac: float) -> float:
    """Linear ramp from lr_max/25 to lr_max, then cosine decay to lr_max/1e4."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    start = lr_max / 25.0
    end = lr_max / 1e4
    ramp = warmup_frac * total_steps
    if step < ramp:
        return start + (lr_max - start) * (step / ramp)
    x = (step - ramp) / (total_steps - ramp)
    return end + (lr_max - end) * 0.5 * (1.0 + math.cos(math.pi * x))


def step_decay_lr(step: int, lr_max: float, step_size: int = 5000, gamma: float = 0.5) -> float:
    """Alternative schedule: multiply by gamma every ``step_size`` steps."""
    return lr_max * gamma ** (step // step_size)


def _schedule(config: TrainConfig, step: int, total_steps: int) -> float:
    if config.schedule == "step":
        return step_decay_lr(step, config.lr_max, config.step_size, config.step_gamma)
    return one_cycle_lr(step, total_steps, config.lr_max, config.warmup_frac)


def train_timestep(batch, init: ModelParams, config: TrainConfig, log_path=None):
    """Epoch loop over one stream batch; returns (params, log entries).

    Deterministic given ``config.seed`` and the batch timestep. Each log
    entry holds {epoch, lr, loss, rec, kl_g, kl_s, seconds}; when
    ``log_path`` is given the entries are also written as JSON lines.
    Divergence raises :class:`TrainingDiverged` carrying the parameters
    from the last completed epoch.
    """
    params = init.clone()
    if config.epochs == 0:
        return params, []
    model_cfg = params.config
    counts_all = counts_matrix(batch.documents, model_cfg.V)
    n_docs = counts_all.shape[0]
    bs = min(config.batch_size, n_docs)
    n_batches = math.ceil(n_docs / bs)
    total_steps = config.epochs * n_batches

    ss = np.random.SeedSequence([config.seed, batch.t])
    gen = torch.Generator().manual_seed(int(ss.generate_state(1, dtype=np.uint64)[0]))
    shuffle_rng = np.random.default_rng(ss.spawn(1)[0])

    opt = OptState.for_params(params)
    log = []
    last_good = init.clone()
    sink = open(log_path, "w", encoding="utf-8") if log_path else None
    step = 0
    try:
        for epoch in range(config.epochs):
            t0 = time.perf_counter()
            order = shuffle_rng.permutation(n_docs)
            sums = {"loss": 0.0, "rec": 0.0, "kl_g": 0.0, "kl_s": 0.0}
            lr_epoch = _schedule(config, step, total_steps)
            for i in range(n_batches):
                idx = torch.as_tensor(order[i * bs : (i + 1) * bs], dtype=torch.long)
                lr = _schedule(config, step, total_steps)
                try:
                    grads, loss, parts = _loss_and_grads(
                        params, counts_all[idx], config, gen, mode="train"
                    )
                except ValueError as err:
                    raise TrainingDiverged(str(err), last_good, log) from err
                adam_step(params, grads, opt, lr, config.weight_decay)
                w = len(idx) / n_docs
                sums["loss"] += w * loss
                for key in ("rec", "kl_g", "kl_s"):
                    sums[key] += w * parts[key]
                step += 1
            entry = {
                "epoch": epoch,
                "lr": lr_epoch,
                "loss": sums["loss"],
                "rec": sums["rec"],
                "kl_g": sums["kl_g"],
                "kl_s": sums["kl_s"],
                "seconds": time.perf_counter() - t0,
            }
            log.append(entry)
            if sink:
                sink.write(json.dumps(entry) + "\n")
            last_good = params.clone()
    finally:
        if sink:
            sink.close()
    return params, log


def warm_start(prev: ModelParams, new_config: ModelConfig, rho=None, seed: int = 0) -> ModelParams:
    """New parameters carrying over everything that still fits.

    Overlapping slices of same-named tensors are copied from ``prev``;
    grown regions keep their fresh initialization. Stick-head biases
    for topics beyond the previous budget get +0.5 so the new sticks
    start active. A vocabulary change requires ``rho`` re-derived from
    the global embedding table; the topic embeddings carry over as-is.
    ``prev`` is never mutated.
    """
    old = prev.config
    if new_config.L != old.L:
        raise ValueError(f"embedding width changed ({old.L} -> {new_config.L}); cannot warm start")
    if rho is None:
        if new_config.V != old.V:
            raise ValueError("vocabulary size changed; pass rho rebuilt from the embedding table")
        rho = prev.tensors["rho"].detach().clone()
    gen = torch.Generator().manual_seed(seed)
    fresh = init_params(new_config, rho, gen)
    with torch.no_grad():
        for name, dst in fresh.tensors.items():
            if name == "rho" or name not in prev.tensors:
                continue
            src = prev.tensors[name]
            region = tuple(slice(0, min(a, b)) for a, b in zip(dst.shape, src.shape))
            dst[region] = src[region].detach()
        if new_config.K > old.K:
            fresh.tensors["psi_a_b"][old.K - 1 :] += 0.5
    return fresh
