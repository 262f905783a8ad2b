"""SFT and DPO objectives, AdamW, and single-stage training."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Literal, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import ConfigError, InputError
from .policy import Forward, PolicyCheckpoint, SequenceBatch, encode
from .seeding import rng_for

# Step sizes used for 3B-parameter models; the desk-scale defaults below are far larger.
FULL_SCALE_SFT_LR = 5e-6
FULL_SCALE_DPO_LR = 5e-7


class DpoConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    beta: float = Field(0.1, gt=0)
    learning_rate: float = Field(1e-2, gt=0)
    epochs: int = Field(1, ge=0)
    batch_size: int = Field(8, ge=1)
    schedule: Literal["constant", "cosine"] = "cosine"
    min_fraction: float = Field(0.0, ge=0, le=1)
    warmup_fraction: float = Field(0.0, ge=0, le=1)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = Field(0.0, ge=0)
    seed: int = 0

    @model_validator(mode="after")
    def _check_betas(self):
        for name in ("adam_beta1", "adam_beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must be in [0, 1)")
        return self


@dataclass
class OptimizerState:
    step: int
    first_moment: np.ndarray
    second_moment: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "OptimizerState":
        return cls(0, np.zeros(n), np.zeros(n))


def sigmoid(z):
    """Logistic function, branch-stable for large negative inputs."""
    z = np.asarray(z, dtype=np.float64)
    ez = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))
    return out if out.ndim else float(out)


def log_sigmoid(z):
    """log(sigmoid(z)) = -softplus(-z), finite for every finite z."""
    out = -np.logaddexp(0.0, -np.asarray(z, dtype=np.float64))
    return out if out.ndim else float(out)


def lr_factor(cfg: DpoConfig, step: int, total_steps: int) -> float:
    """Multiplier on ``cfg.learning_rate`` at 0-based optimizer step ``step``."""
    factor = 1.0
    if cfg.schedule == "cosine":
        if total_steps < 1:
            raise ConfigError("cosine schedule needs total_steps >= 1")
        frac = min(step, total_steps) / total_steps
        factor = cfg.min_fraction + (1.0 - cfg.min_fraction) * (1.0 + math.cos(math.pi * frac)) / 2.0
    warm = int(round(cfg.warmup_fraction * total_steps))
    if warm > 0 and step < warm:
        factor *= (step + 1) / warm
    return factor


def adamw_step(params: np.ndarray, grad: np.ndarray, state: OptimizerState, cfg: DpoConfig,
               total_steps: int) -> tuple[np.ndarray, OptimizerState]:
    if params.shape != grad.shape or params.shape != state.first_moment.shape:
        raise InputError("params, grad and optimizer moments must have the same shape")
    lr = cfg.learning_rate * lr_factor(cfg, state.step, total_steps)
    t = state.step + 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    m = b1 * state.first_moment + (1.0 - b1) * grad
    v = b2 * state.second_moment + (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1 ** t)
    v_hat = v / (1.0 - b2 ** t)
    new = params * (1.0 - lr * cfg.weight_decay) - lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    return new, OptimizerState(t, m, v)


# -- objectives --------------------------------------------------------------

def _check_same_spec(a: PolicyCheckpoint, b: PolicyCheckpoint) -> None:
    if a.spec != b.spec:
        raise ConfigError("policy and reference have different model specs")


def encode_pairs(spec, batch) -> SequenceBatch:
    """Encode chosen sequences then rejected sequences: rows [0, n) and [n, 2n)."""
    return encode(spec, [(ex.prompt, ex.chosen) for ex in batch]
                  + [(ex.prompt, ex.rejected) for ex in batch])


def _dpo_from_encoded(spec, params, enc: SequenceBatch, ref_logps: np.ndarray, beta: float):
    fwd = Forward(spec, params, enc)
    n = enc.n_sequences // 2
    ratio = fwd.seq_log_probs - ref_logps
    z = beta * (ratio[:n] - ratio[n:])
    loss = float(np.mean(np.logaddexp(0.0, -z)))
    # d softplus(-z)/dz = -sigmoid(-z)
    s = sigmoid(-z) * beta / n
    return loss, fwd.backward(np.concatenate([-s, s]))


def dpo_batch_loss_and_grad(policy: PolicyCheckpoint, reference: PolicyCheckpoint,
                            batch: Sequence, beta: float) -> tuple[float, np.ndarray]:
    """Mean DPO loss over ``batch`` and its gradient w.r.t. the policy params."""
    _check_same_spec(policy, reference)
    if not batch:
        raise InputError("batch is empty")
    enc = encode_pairs(policy.spec, batch)
    ref_logps = Forward(reference.spec, reference.params, enc).seq_log_probs
    return _dpo_from_encoded(policy.spec, policy.params, enc, ref_logps, beta)


def _sft_from_encoded(spec, params, enc: SequenceBatch):
    fwd = Forward(spec, params, enc)
    n = enc.n_sequences
    return float(-np.mean(fwd.seq_log_probs)), fwd.backward(np.full(n, -1.0 / n))


def sft_loss_and_grad(policy: PolicyCheckpoint, batch: Sequence[tuple]) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood of ``(prompt, response)`` pairs."""
    if not batch:
        raise InputError("batch is empty")
    return _sft_from_encoded(policy.spec, policy.params, encode(policy.spec, batch))


# -- training ----------------------------------------------------------------

StepCallback = Callable[[int, np.ndarray], None]


def batch_order(n: int, cfg: DpoConfig, epoch: int) -> list[np.ndarray]:
    perm = rng_for(cfg.seed, "shuffle", epoch).permutation(n)
    return [perm[i:i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]


def train_stage(init: PolicyCheckpoint, reference: PolicyCheckpoint | None, dataset: Sequence,
                objective: Literal["sft", "dpo"], cfg: DpoConfig,
                on_step: StepCallback | None = None) -> tuple[PolicyCheckpoint, list[float]]:
    """Train ``init`` on ``dataset`` for ``cfg.epochs`` epochs.

    SFT items are ``(prompt, response)`` pairs; DPO items are preference
    examples. ``on_step(step, params)`` is called before the first update
    and after every update, with ``step`` counting completed updates.
    """
    if not dataset:
        raise InputError("dataset is empty")
    spec = init.spec
    if objective == "dpo":
        if reference is None:
            raise ConfigError("DPO training requires a reference model")
        _check_same_spec(init, reference)
        n = len(dataset)
        full = encode_pairs(spec, dataset)
        ref_all = Forward(spec, reference.params, full).seq_log_probs
        ref_chosen, ref_rejected = ref_all[:n], ref_all[n:]
    elif objective != "sft":
        raise ConfigError(f"unknown objective {objective!r}")

    steps_per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    total = max(cfg.epochs * steps_per_epoch, 1)
    params = init.params.copy()
    state = OptimizerState.zeros(params.size)
    trace: list[float] = []
    if on_step is not None:
        on_step(0, params)
    for epoch in range(cfg.epochs):
        for idx in batch_order(len(dataset), cfg, epoch):
            items = [dataset[i] for i in idx]
            if objective == "dpo":
                enc = encode_pairs(spec, items)
                ref = np.concatenate([ref_chosen[idx], ref_rejected[idx]])
                loss, grad = _dpo_from_encoded(spec, params, enc, ref, cfg.beta)
            else:
                loss, grad = _sft_from_encoded(spec, params, encode(spec, items))
            params, state = adamw_step(params, grad, state, cfg, total)
            trace.append(loss)
            if on_step is not None:
                on_step(state.step, params)
    if objective == "dpo":
        out = init.replace(params=params, iteration_index=init.iteration_index + 1, label="dpo")
    else:
        out = init.replace(params=params, iteration_index=0, label="sft")
    return out, trace
