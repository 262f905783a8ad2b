"""Synthetic corpora, the gold reward oracle, preference pairs and label noise."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .errors import ConfigError, FormatError, InputError, SchemaError
from .policy import EOS, PolicyCheckpoint, Tokens, sample_responses
from .seeding import derive_seed, rng_for


@dataclass(frozen=True, eq=False)
class GoldRewardModel:
    """Seeded bigram score table standing in for a learned reward model.

    The table is regenerated from ``(vocab_size, seed)``; pass ``table`` only
    to pin hand-built values in tests.
    """

    vocab_size: int
    seed: int = 0
    length_penalty: float = 0.05
    table: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if self.length_penalty < 0:
            raise ConfigError("length_penalty must be >= 0")
        if self.table is not None:
            t = np.array(self.table, dtype=np.float64)
            if t.shape != (self.vocab_size, self.vocab_size) or not np.all(np.isfinite(t)):
                raise ConfigError("table must be a finite V x V array")
            t.flags.writeable = False
            object.__setattr__(self, "table", t)

    @cached_property
    def score_table(self) -> np.ndarray:
        if self.table is not None:
            return self.table
        t = rng_for(self.seed, "gold_rm").standard_normal((self.vocab_size, self.vocab_size))
        t.flags.writeable = False
        return t

    def to_json(self) -> dict:
        return {"v": self.vocab_size, "seed": self.seed, "length_penalty": self.length_penalty}

    @classmethod
    def from_json(cls, doc: dict) -> "GoldRewardModel":
        try:
            return cls(vocab_size=int(doc["v"]), seed=int(doc["seed"]),
                       length_penalty=float(doc["length_penalty"]))
        except KeyError as exc:
            raise SchemaError(f"gold RM document missing {exc}") from exc


def gold_reward(rm: GoldRewardModel, prompt: Sequence[int], response: Sequence[int]) -> float:
    """Sum of bigram scores along the response (seeded by the last prompt
    token) minus ``length_penalty * len(response)``."""
    V = rm.vocab_size
    if len(response) == 0:
        raise InputError("response is empty")
    for t in (*prompt, *response):
        if not 0 <= t < V:
            raise InputError(f"token {t} outside gold RM vocabulary [0, {V})")
    prev = np.array([prompt[-1] if len(prompt) else EOS, *response[:-1]], dtype=np.int64)
    cur = np.asarray(response, dtype=np.int64)
    return float(rm.score_table[prev, cur].sum() - rm.length_penalty * len(response))


def gold_rewards(rm: GoldRewardModel, prompts, responses) -> np.ndarray:
    return np.array([gold_reward(rm, p, r) for p, r in zip(prompts, responses)])


# -- prompts -----------------------------------------------------------------

class PromptDistribution(BaseModel):
    """``uniform`` over non-EOS tokens, or ``zipf`` with token 1 most frequent."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["uniform", "zipf"] = "uniform"
    s: float = Field(1.5, gt=0)


def token_distribution(V: int, dist: PromptDistribution) -> np.ndarray:
    """Probabilities over token ids 1..V-1."""
    if dist.kind == "uniform":
        return np.full(V - 1, 1.0 / (V - 1))
    w = np.arange(1, V, dtype=np.float64) ** -dist.s
    return w / w.sum()


def generate_prompts(count: int, prompt_len: int, V: int, seed: int,
                     distribution: PromptDistribution = PromptDistribution()) -> list[Tokens]:
    if count < 1 or prompt_len < 1:
        raise ConfigError("count and prompt_len must be >= 1")
    if V < 2:
        raise ConfigError("V must be >= 2")
    rng = rng_for(seed, "prompts")
    if distribution.kind == "uniform":
        toks = rng.integers(1, V, size=(count, prompt_len))
    else:
        toks = rng.choice(np.arange(1, V), size=(count, prompt_len), p=token_distribution(V, distribution))
    return [tuple(int(t) for t in row) for row in toks]


# -- preference examples -----------------------------------------------------

@dataclass(frozen=True)
class PreferenceExample:
    prompt: Tokens
    chosen: Tokens
    rejected: Tokens
    flipped: bool = False
    gold_reward_chosen: float | None = None
    gold_reward_rejected: float | None = None

    def __post_init__(self):
        for name in ("prompt", "chosen", "rejected"):
            object.__setattr__(self, name, tuple(int(t) for t in getattr(self, name)))
        if self.chosen == self.rejected:
            raise SchemaError("chosen and rejected responses are identical")
        if (not self.flipped and self.gold_reward_chosen is not None
                and self.gold_reward_rejected is not None
                and self.gold_reward_chosen < self.gold_reward_rejected):
            raise SchemaError("unflipped example has gold_reward_chosen < gold_reward_rejected")

    def swapped(self) -> "PreferenceExample":
        # reward fields keep their pre-flip association
        return replace(self, chosen=self.rejected, rejected=self.chosen, flipped=not self.flipped)


def build_preference_pairs(policy: PolicyCheckpoint, prompts: Sequence[Sequence[int]], k: int,
                           rm: GoldRewardModel, temperature: float = 1.0, max_len: int | None = None,
                           seed: int = 0) -> list[PreferenceExample]:
    """Sample ``k`` candidates per prompt and pair the best with the worst.

    Ties on reward go to the earlier sample. When every candidate scores the
    same, the rejected response is the first candidate that differs from the
    chosen one; prompts whose candidates are all identical are dropped.
    """
    if k < 2:
        raise ConfigError("k must be >= 2")
    if rm.vocab_size != policy.spec.vocab_size:
        raise InputError("gold RM and policy vocabularies differ")
    flat_prompts = [p for p in prompts for _ in range(k)]
    seeds = [derive_seed(seed, i, j) for i in range(len(prompts)) for j in range(k)]
    responses = sample_responses(policy, flat_prompts, temperature, max_len, seeds)
    rewards = gold_rewards(rm, flat_prompts, responses)
    pairs = []
    for i, prompt in enumerate(prompts):
        cand = responses[i * k:(i + 1) * k]
        r = rewards[i * k:(i + 1) * k]
        if all(c == cand[0] for c in cand):
            continue
        best, worst = int(np.argmax(r)), int(np.argmin(r))
        if cand[best] == cand[worst]:
            worst = next(j for j, c in enumerate(cand) if c != cand[best])
        pairs.append(PreferenceExample(
            prompt=tuple(prompt), chosen=cand[best], rejected=cand[worst],
            gold_reward_chosen=float(r[best]), gold_reward_rejected=float(r[worst]),
        ))
    return pairs


class NoiseSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    p: float = Field(0.0, ge=0, le=1)
    seed: int = 0


def inject_label_noise(dataset: Sequence[PreferenceExample], spec: NoiseSpec) -> list[PreferenceExample]:
    """Swap chosen/rejected independently per example with probability ``p``."""
    if not 0.0 <= spec.p <= 1.0:
        raise ConfigError(f"noise p must be in [0, 1], got {spec.p}")
    flips = rng_for(spec.seed, "label_noise").random(len(dataset)) < spec.p
    return [ex.swapped() if f else ex for ex, f in zip(dataset, flips)]


# -- JSONL I/O ---------------------------------------------------------------

_FIELDS = ("prompt", "chosen", "rejected", "flipped", "gold_reward_chosen", "gold_reward_rejected")


def example_to_json(ex: PreferenceExample) -> dict:
    return {
        "prompt": list(ex.prompt), "chosen": list(ex.chosen), "rejected": list(ex.rejected),
        "flipped": ex.flipped,
        "gold_reward_chosen": ex.gold_reward_chosen,
        "gold_reward_rejected": ex.gold_reward_rejected,
    }


def _token_list(value, name: str, lineno: int) -> list[int]:
    if not isinstance(value, list) or not all(isinstance(t, int) and not isinstance(t, bool) for t in value):
        raise SchemaError(f"line {lineno}: field {name!r} must be an array of integers")
    return value


def example_from_json(doc: dict, lineno: int = 0) -> PreferenceExample:
    if not isinstance(doc, dict):
        raise SchemaError(f"line {lineno}: record is not an object")
    missing = [f for f in ("prompt", "chosen", "rejected", "flipped") if f not in doc]
    if missing:
        raise SchemaError(f"line {lineno}: missing required field(s) {missing}")
    unknown = set(doc) - set(_FIELDS)
    if unknown:
        raise SchemaError(f"line {lineno}: unknown field(s) {sorted(unknown)}")
    if not isinstance(doc["flipped"], bool):
        raise SchemaError(f"line {lineno}: field 'flipped' must be a boolean")
    rewards = []
    for name in ("gold_reward_chosen", "gold_reward_rejected"):
        v = doc.get(name)
        if v is not None and (isinstance(v, bool) or not isinstance(v, (int, float))):
            raise SchemaError(f"line {lineno}: field {name!r} must be a number or null")
        rewards.append(None if v is None else float(v))
    try:
        return PreferenceExample(
            prompt=_token_list(doc["prompt"], "prompt", lineno),
            chosen=_token_list(doc["chosen"], "chosen", lineno),
            rejected=_token_list(doc["rejected"], "rejected", lineno),
            flipped=doc["flipped"], gold_reward_chosen=rewards[0], gold_reward_rejected=rewards[1],
        )
    except SchemaError as exc:
        raise SchemaError(f"line {lineno}: {exc}") from exc


def write_dataset(path: str | Path, dataset: Iterable[PreferenceExample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in dataset:
            fh.write(json.dumps(example_to_json(ex)) + "\n")


def read_dataset(path: str | Path) -> list[PreferenceExample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"line {lineno}: malformed JSON ({exc.msg})") from exc
            out.append(example_from_json(doc, lineno))
    return out
