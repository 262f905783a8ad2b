"""Evaluation metrics scored by the gold reward model.

All decoding here is greedy, so every metric is a pure function of the
checkpoints, prompts, reward model and config.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .data import GoldRewardModel, PromptDistribution, gold_rewards
from .dpo import encode_pairs
from .errors import ConfigError, InputError
from .policy import Forward, PolicyCheckpoint, Tokens, sample_responses


class EvalConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    n_prompts_id: int = Field(100, ge=1)
    n_prompts_ood: int = Field(100, ge=1)
    prompt_len: int = Field(3, ge=1)
    ood_distribution: PromptDistribution = PromptDistribution(kind="zipf", s=1.5)
    lc_gamma: float = Field(0.05, ge=0)
    n_margin_pairs: int = Field(100, ge=1)
    seed: int = 0


def greedy_responses(policy: PolicyCheckpoint, prompts: Sequence[Sequence[int]]) -> list[Tokens]:
    return sample_responses(policy, prompts, 0.0, None, [0] * len(prompts))


def _check(policy: PolicyCheckpoint, prompts, rm: GoldRewardModel) -> None:
    if len(prompts) == 0:
        raise InputError("prompt list is empty")
    if policy.spec.vocab_size != rm.vocab_size:
        raise InputError("policy and gold RM vocabularies differ")


def _scores(policy, prompts, rm, length_gamma: float = 0.0) -> np.ndarray:
    responses = greedy_responses(policy, prompts)
    r = gold_rewards(rm, prompts, responses)
    if length_gamma:
        r = r - length_gamma * np.array([len(y) for y in responses], dtype=np.float64)
    return r


def _preference_rate(cand: np.ndarray, base: np.ndarray) -> float:
    wins = int(np.sum(cand > base))
    ties = int(np.sum(cand == base))
    # single division of exact integers keeps rate(A,B) + rate(B,A) == 1
    return (2 * wins + ties) / (2 * len(cand))


def win_rate(candidate: PolicyCheckpoint, baseline: PolicyCheckpoint, prompts, rm: GoldRewardModel,
             cfg: EvalConfig | None = None) -> float:
    """Fraction of prompts where the candidate's greedy response earns a
    strictly higher gold reward than the baseline's; ties count one half."""
    _check(candidate, prompts, rm)
    _check(baseline, prompts, rm)
    return _preference_rate(_scores(candidate, prompts, rm), _scores(baseline, prompts, rm))


def lc_win_rate(candidate: PolicyCheckpoint, baseline: PolicyCheckpoint, prompts, rm: GoldRewardModel,
                cfg: EvalConfig | None = None) -> float:
    """Win rate on the length-adjusted score ``gold - lc_gamma * len(y)``."""
    gamma = (cfg or EvalConfig()).lc_gamma
    if gamma < 0:
        raise ConfigError("lc_gamma must be >= 0")
    _check(candidate, prompts, rm)
    _check(baseline, prompts, rm)
    return _preference_rate(_scores(candidate, prompts, rm, gamma), _scores(baseline, prompts, rm, gamma))


def mean_gold_reward(policy: PolicyCheckpoint, prompts, rm: GoldRewardModel,
                     cfg: EvalConfig | None = None) -> float:
    _check(policy, prompts, rm)
    return float(np.mean(_scores(policy, prompts, rm)))


def implicit_reward_margins(policy: PolicyCheckpoint, reference: PolicyCheckpoint, dataset: Sequence,
                            beta: float) -> np.ndarray:
    """Per-example ``(chosen_reward, rejected_reward)`` rows of shape (n, 2),
    each ``beta * (log pi(y|x) - log pi_ref(y|x))``."""
    if policy.spec != reference.spec:
        raise ConfigError("policy and reference have different model specs")
    if not dataset:
        return np.zeros((0, 2))
    enc = encode_pairs(policy.spec, dataset)
    return MarginProbe(reference, dataset, beta, enc).rewards(policy.params)


class MarginProbe:
    """Implicit rewards on a fixed example set against a fixed reference.

    The reference log-probs are computed once, so calling :meth:`rewards` at
    every optimizer step costs one policy forward pass.
    """

    def __init__(self, reference: PolicyCheckpoint, dataset: Sequence, beta: float, enc=None):
        self.spec = reference.spec
        self.beta = beta
        self.n = len(dataset)
        self.enc = enc if enc is not None else encode_pairs(reference.spec, dataset)
        self.ref_logps = Forward(reference.spec, reference.params, self.enc).seq_log_probs

    def rewards(self, params: np.ndarray) -> np.ndarray:
        lp = Forward(self.spec, params, self.enc).seq_log_probs
        r = self.beta * (lp - self.ref_logps)
        return np.stack([r[:self.n], r[self.n:]], axis=1)

    def mean_rewards(self, params: np.ndarray) -> tuple[float, float]:
        r = self.rewards(params)
        return float(r[:, 0].mean()), float(r[:, 1].mean())
