"""Parameter-space merging of trajectory checkpoints.

The merged model is a convex combination ``sum_t alpha_t * theta_t`` with
``alpha = softmax(w)``. The logits ``w`` are learned with a reference-free
preference loss on the merged model minus ``lambda`` times the entropy of
``alpha``; the checkpoints themselves stay frozen.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .dpo import DpoConfig, OptimizerState, adamw_step, encode_pairs, sigmoid
from .errors import InputError
from .policy import Forward, PolicyCheckpoint, SequenceBatch
from .seeding import rng_for

SIMPLEX_TOL = 1e-9


@dataclass(frozen=True)
class Trajectory:
    """Checkpoints theta^(0..T) of one run, all with the same spec."""

    checkpoints: tuple[PolicyCheckpoint, ...]

    def __post_init__(self):
        cks = tuple(self.checkpoints)
        if not cks:
            raise InputError("trajectory is empty")
        _check_compatible(cks)
        idx = [c.iteration_index for c in cks]
        if idx != list(range(len(cks))):
            raise InputError(f"trajectory iteration indices must be 0..T in order, got {idx}")
        object.__setattr__(self, "checkpoints", cks)

    def __len__(self):
        return len(self.checkpoints)

    def __getitem__(self, i):
        return self.checkpoints[i]

    def __iter__(self):
        return iter(self.checkpoints)

    def appended(self, ckpt: PolicyCheckpoint) -> "Trajectory":
        return Trajectory(self.checkpoints + (ckpt,))


def _check_compatible(cks: Sequence[PolicyCheckpoint]) -> None:
    spec = cks[0].spec
    if any(c.spec != spec for c in cks):
        raise InputError("all checkpoints in a merge must share one model spec")


def _as_checkpoints(traj) -> tuple[PolicyCheckpoint, ...]:
    cks = tuple(traj)
    if not cks:
        raise InputError("no checkpoints to merge")
    _check_compatible(cks)
    return cks


def softmax_weights(raw) -> np.ndarray:
    w = np.asarray(raw, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise InputError("merge logits must be a non-empty vector")
    if not np.all(np.isfinite(w)):
        raise InputError("merge logits must be finite")
    e = np.exp(w - w.max())
    return e / e.sum()


def _log_softmax(w: np.ndarray) -> np.ndarray:
    s = w - w.max()
    return s - np.log(np.exp(s).sum())


def entropy(alpha) -> float:
    a = np.asarray(alpha, dtype=np.float64)
    safe = np.where(a > 0, a, 1.0)
    return float(-np.sum(np.where(a > 0, a * np.log(safe), 0.0)))


@dataclass(frozen=True)
class MergeWeights:
    raw: np.ndarray

    def __post_init__(self):
        raw = np.array(self.raw, dtype=np.float64)
        softmax_weights(raw)  # validates
        raw.flags.writeable = False
        object.__setattr__(self, "raw", raw)

    @property
    def alpha(self) -> np.ndarray:
        return softmax_weights(self.raw)

    @classmethod
    def uniform(cls, n: int) -> "MergeWeights":
        return cls(np.zeros(n))


def merge_checkpoints(traj, alpha) -> PolicyCheckpoint:
    """Coordinate-wise convex combination of the checkpoints' parameters."""
    cks = _as_checkpoints(traj)
    a = np.asarray(alpha, dtype=np.float64)
    if a.shape != (len(cks),):
        raise InputError(f"alpha has shape {a.shape}, expected ({len(cks)},)")
    if np.any(a < -SIMPLEX_TOL) or abs(a.sum() - 1.0) > SIMPLEX_TOL:
        raise InputError("alpha is not on the probability simplex")
    if len(cks) == 1:
        params = cks[0].params * a[0]
    else:
        params = a @ np.stack([c.params for c in cks])
    T = max(c.iteration_index for c in cks)
    return cks[0].replace(params=params, iteration_index=T, label="merged")


def simple_average(traj) -> PolicyCheckpoint:
    cks = _as_checkpoints(traj)
    return merge_checkpoints(cks, np.full(len(cks), 1.0 / len(cks)))


# -- weight learning ---------------------------------------------------------

def _softmax_vjp(alpha: np.ndarray, g_alpha: np.ndarray) -> np.ndarray:
    return alpha * (g_alpha - alpha @ g_alpha)


def _objective_encoded(stack: np.ndarray, spec, raw: np.ndarray, enc: SequenceBatch,
                       beta: float, lam: float) -> tuple[float, float, np.ndarray]:
    """Returns (total loss, preference loss, gradient w.r.t. raw logits)."""
    log_alpha = _log_softmax(raw)
    alpha = np.exp(log_alpha)
    merged = alpha @ stack
    fwd = Forward(spec, merged, enc)
    n = enc.n_sequences // 2
    lp = fwd.seq_log_probs
    z = beta * (lp[:n] - lp[n:])
    l_pref = float(np.mean(np.logaddexp(0.0, -z)))
    s = sigmoid(-z) * beta / n
    g_theta = fwd.backward(np.concatenate([-s, s]))
    g_pref = _softmax_vjp(alpha, stack @ g_theta)
    H = float(-np.sum(alpha * log_alpha))
    # dH/dw_j = -alpha_j (log alpha_j + H)
    g_ent = -alpha * (log_alpha + H)
    return l_pref - lam * H, l_pref, g_pref - lam * g_ent


def weight_objective_and_grad(traj, raw_w, batch: Sequence, beta: float,
                              lam: float) -> tuple[float, np.ndarray]:
    """Preference loss of the merged model minus ``lam`` times the weight
    entropy, and its gradient with respect to the softmax logits."""
    cks = _as_checkpoints(traj)
    raw = np.asarray(raw_w, dtype=np.float64)
    if raw.shape != (len(cks),):
        raise InputError(f"raw weights have shape {raw.shape}, expected ({len(cks)},)")
    softmax_weights(raw)
    if not batch:
        raise InputError("batch is empty")
    stack = np.stack([c.params for c in cks])
    enc = encode_pairs(cks[0].spec, batch)
    loss, _, grad = _objective_encoded(stack, cks[0].spec, raw, enc, beta, lam)
    return loss, grad


def preference_loss(model: PolicyCheckpoint, batch: Sequence, beta: float) -> float:
    """Reference-free preference loss of a single model."""
    enc = encode_pairs(model.spec, batch)
    lp = Forward(model.spec, model.params, enc).seq_log_probs
    n = len(batch)
    return float(np.mean(np.logaddexp(0.0, -beta * (lp[:n] - lp[n:]))))


class WeightLearnConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid", populate_by_name=True)

    beta: float = Field(0.1, gt=0)
    lam: float = Field(0.1, ge=0, alias="lambda")
    steps: int = Field(200, ge=1)
    learning_rate: float = Field(0.05, gt=0)
    w_init: Literal["zeros", "seeded_normal"] = "zeros"
    w_init_stddev: float = Field(0.01, ge=0)
    seed: int = 0
    dataset_source: Literal["current_round", "held_out"] = "current_round"
    held_out_fraction: float = Field(0.1, gt=0, lt=1)
    include_initial: bool = True


@dataclass
class WeightLearnResult:
    weights: MergeWeights
    loss_trace: list[float]
    pref_trace: list[float]


def learn_weights(traj, dataset: Sequence, cfg: WeightLearnConfig) -> WeightLearnResult:
    """Fit merge logits by full-batch Adam on the entropy-regularized
    preference objective. Checkpoint parameters are read, never written."""
    cks = _as_checkpoints(traj)
    if not dataset:
        raise InputError("weight-learning dataset is empty")
    n = len(cks)
    if cfg.w_init == "zeros":
        raw = np.zeros(n)
    else:
        raw = rng_for(cfg.seed, "w_init").normal(0.0, cfg.w_init_stddev, size=n)
    if n == 1:
        return WeightLearnResult(MergeWeights(raw), [], [])
    stack = np.stack([c.params for c in cks])
    spec = cks[0].spec
    enc = encode_pairs(spec, dataset)
    opt = DpoConfig(learning_rate=cfg.learning_rate, schedule="constant", seed=cfg.seed)
    state = OptimizerState.zeros(n)
    trace, pref = [], []
    for _ in range(cfg.steps):
        loss, l_pref, grad = _objective_encoded(stack, spec, raw, enc, cfg.beta, cfg.lam)
        trace.append(loss)
        pref.append(l_pref)
        raw, state = adamw_step(raw, grad, state, opt, cfg.steps)
    loss, l_pref, _ = _objective_encoded(stack, spec, raw, enc, cfg.beta, cfg.lam)
    trace.append(loss)
    pref.append(l_pref)
    return WeightLearnResult(MergeWeights(raw), trace, pref)


def weights_to_json(weights: MergeWeights, cfg: WeightLearnConfig) -> dict:
    return {
        "raw": [float(x) for x in weights.raw],
        "alpha": [float(x) for x in weights.alpha],
        "lambda": cfg.lam,
        "steps": cfg.steps,
        "seed": cfg.seed,
    }


def write_weights(path: str | Path, weights: MergeWeights, cfg: WeightLearnConfig) -> None:
    Path(path).write_text(json.dumps(weights_to_json(weights, cfg), indent=2) + "\n")


def read_weights(path: str | Path) -> MergeWeights:
    doc = json.loads(Path(path).read_text())
    return MergeWeights(np.asarray(doc["raw"], dtype=np.float64))
