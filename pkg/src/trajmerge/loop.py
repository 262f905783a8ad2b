"""Multi-round iterative DPO with a configurable reference-model strategy.

One run: build a base model, fine-tune it on best-of-k responses (SFT) to get
theta^(0), then for each round pick a reference from the trajectory, train
DPO on freshly generated and label-flipped pairs, evaluate against the SFT
model, and append the new policy to the trajectory.
"""

from __future__ import annotations

import contextlib
import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from . import __version__
from .data import (GoldRewardModel, NoiseSpec, PreferenceExample, PromptDistribution,
                   build_preference_pairs, generate_prompts, inject_label_noise, write_dataset)
from .dpo import DpoConfig, train_stage
from .errors import TrajmergeError
from .evaluation import EvalConfig, MarginProbe, lc_win_rate, mean_gold_reward, win_rate
from .merge import (MergeWeights, Trajectory, WeightLearnConfig, WeightLearnResult, learn_weights,
                    merge_checkpoints, simple_average, write_weights)
from .policy import Family, ModelSpec, PolicyCheckpoint, build_model, save_checkpoint
from .seeding import derive_seed, rng_for

log = logging.getLogger(__name__)

StrategyKind = Literal["previous_policy", "fixed_sft", "simple_average", "learned_weights"]


class _Strict(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid", populate_by_name=True)


class SftSettings(_Strict):
    examples: int = Field(200, ge=1)
    prompt_len: int = Field(3, ge=1)
    k: int = Field(4, ge=2)
    base_init_stddev: float = Field(0.5, ge=0)
    temperature: float = Field(1.0, ge=0)
    cfg: DpoConfig = DpoConfig(learning_rate=1e-2, epochs=3, batch_size=16)


class RoundSettings(_Strict):
    pairs: int = Field(200, ge=1)
    prompt_len: int = Field(3, ge=1)
    k: int = Field(4, ge=2)
    noise_p: float = Field(0.0, ge=0, le=1)
    temperature: float = Field(1.0, ge=0)
    dpo_cfg: DpoConfig = DpoConfig()


class StrategyConfig(_Strict):
    kind: StrategyKind = "learned_weights"
    weights: WeightLearnConfig = WeightLearnConfig()


class DataSchedule(_Strict):
    kind: Literal["regenerate", "partitioned"] = "regenerate"
    parts: int = Field(3, ge=1)


class GoldRmSettings(_Strict):
    length_penalty: float = Field(0.05, ge=0)
    seed: int | None = None


class ExperimentConfig(_Strict):
    run_id: str | None = None
    model_spec: ModelSpec = ModelSpec()
    sft: SftSettings = SftSettings()
    rounds: int = Field(3, ge=1)
    per_round: RoundSettings = RoundSettings()
    strategy: StrategyConfig = StrategyConfig()
    data_schedule: DataSchedule = DataSchedule()
    policy_init_each_round: Literal["previous_policy", "merged_reference"] = "previous_policy"
    eval: EvalConfig = EvalConfig()
    gold_rm: GoldRmSettings = GoldRmSettings()
    master_seed: int = 0

    @model_validator(mode="before")
    @classmethod
    def _family_learning_rate(cls, data: Any):
        # DPO step size defaults depend on the model family.
        if not isinstance(data, dict):
            return data
        spec = data.get("model_spec") or {}
        family = spec.get("family", Family.TINY_NEURAL_LM) if isinstance(spec, dict) else spec.family
        if Family(family) is not Family.TINY_NEURAL_LM:
            return data
        per_round = dict(data.get("per_round") or {})
        dpo = per_round.get("dpo_cfg")
        if isinstance(dpo, DpoConfig):
            return data
        dpo = dict(dpo or {})
        dpo.setdefault("learning_rate", 3e-3)
        per_round["dpo_cfg"] = dpo
        return {**data, "per_round": per_round}

    @model_validator(mode="after")
    def _check_schedule(self):
        if self.data_schedule.kind == "partitioned" and self.data_schedule.parts < self.rounds:
            raise ValueError(f"data_schedule.parts ({self.data_schedule.parts}) must be >= rounds ({self.rounds})")
        return self

    @property
    def resolved_run_id(self) -> str:
        return self.run_id or f"{self.strategy.kind}-p{self.per_round.noise_p:g}-s{self.master_seed}"

    def to_dict(self) -> dict:
        return self.model_dump(mode="json", by_alias=True)


# -- records -----------------------------------------------------------------

@dataclass
class IterationRecord:
    round: int
    reference_label: str
    alpha: list[float] | None
    train_loss_final: float
    win_rate: float
    ood_win_rate: float
    mean_gold_reward: float
    ood_gold_reward: float
    lc_win_rate: float
    margin_trace: list[tuple[int, float, float]] = field(default_factory=list)

    @property
    def final_margin(self) -> float:
        _, c, r = self.margin_trace[-1]
        return c - r


@dataclass
class RunResult:
    run_id: str
    trajectory: Trajectory
    records: list[IterationRecord]
    references: list[PolicyCheckpoint]
    out_dir: Path | None = None


class StageError(TrajmergeError):
    def __init__(self, round_: int, stage: str, cause: BaseException):
        super().__init__(f"round {round_}, stage {stage}: {cause}")
        self.round, self.stage, self.cause = round_, stage, cause


@contextlib.contextmanager
def _stage(round_: int, name: str):
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(round_, name, exc) from exc


# -- reference strategies ----------------------------------------------------

def next_reference(strategy: StrategyConfig, trajectory: Trajectory, dataset: Sequence[PreferenceExample],
                   seed: int | None = None) -> tuple[PolicyCheckpoint, WeightLearnResult | None]:
    """Reference model for the next round, plus learned weights if any."""
    if len(trajectory) == 0:
        raise ValueError("trajectory is empty")
    kind = strategy.kind
    if kind == "previous_policy":
        return trajectory[-1], None
    if kind == "fixed_sft":
        return trajectory[0], None
    if kind == "simple_average":
        return simple_average(trajectory), None
    if kind == "learned_weights":
        cks = list(trajectory)
        if not strategy.weights.include_initial and len(cks) > 1:
            cks = cks[1:]
        wcfg = strategy.weights if seed is None else strategy.weights.model_copy(update={"seed": seed})
        result = learn_weights(cks, dataset, wcfg)
        return merge_checkpoints(cks, result.weights.alpha), result
    raise ValueError(f"unknown strategy {kind!r}")


# -- seeds -------------------------------------------------------------------

_RUN_PURPOSES = ("gold_rm", "base_init", "sft_prompts", "sft_pairs", "sft_shuffle", "train_prompts",
                 "eval_id_prompts", "eval_ood_prompts", "margin_prompts", "margin_pairs", "partition")
_ROUND_PURPOSES = ("pairs", "noise", "dpo_shuffle", "weights", "weight_split")


def derived_seeds(cfg: ExperimentConfig) -> dict[str, Any]:
    m = cfg.master_seed
    seeds: dict[str, Any] = {p: derive_seed(m, 0, p) for p in _RUN_PURPOSES}
    if cfg.gold_rm.seed is not None:
        seeds["gold_rm"] = cfg.gold_rm.seed
    seeds["rounds"] = {str(t): {p: derive_seed(m, t, p) for p in _ROUND_PURPOSES}
                       for t in range(1, cfg.rounds + 1)}
    return seeds


# -- metrics CSV -------------------------------------------------------------

METRICS_COLUMNS = ("run_id", "round", "strategy", "noise_p", "lambda", "seed", "win_rate", "ood_win_rate",
                   "gold_reward", "ood_gold_reward", "lc_win_rate", "step", "chosen_reward",
                   "rejected_reward")


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def metrics_rows(cfg: ExperimentConfig, rec: IterationRecord) -> list[dict]:
    base = {
        "run_id": cfg.resolved_run_id, "round": rec.round, "strategy": cfg.strategy.kind,
        "noise_p": cfg.per_round.noise_p,
        "lambda": cfg.strategy.weights.lam if cfg.strategy.kind == "learned_weights" else None,
        "seed": cfg.master_seed,
    }
    rows = [{**base, "win_rate": rec.win_rate, "ood_win_rate": rec.ood_win_rate,
             "gold_reward": rec.mean_gold_reward, "ood_gold_reward": rec.ood_gold_reward,
             "lc_win_rate": rec.lc_win_rate}]
    for step, c, r in rec.margin_trace:
        rows.append({**base, "step": step, "chosen_reward": c, "rejected_reward": r})
    return rows


def metrics_csv(rows: Sequence[dict], header: bool = True) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    if header:
        writer.writerow(METRICS_COLUMNS)
    for row in rows:
        writer.writerow([_fmt(row.get(c)) for c in METRICS_COLUMNS])
    return buf.getvalue()


# -- the loop ----------------------------------------------------------------

def sft_corpus(cfg: ExperimentConfig, seeds, base: PolicyCheckpoint, rm: GoldRewardModel):
    spec = cfg.model_spec
    prompts = generate_prompts(cfg.sft.examples, cfg.sft.prompt_len, spec.vocab_size, seeds["sft_prompts"])
    pairs = build_preference_pairs(base, prompts, cfg.sft.k, rm, cfg.sft.temperature, None, seeds["sft_pairs"])
    return pairs


def run_iterative(cfg: ExperimentConfig, out_root: str | Path | None = None) -> RunResult:
    """Run SFT plus ``cfg.rounds`` DPO rounds.

    When ``out_root`` is given, artifacts go under ``out_root/<run_id>/``;
    the manifest is written first, so a failed run still records its config.
    """
    spec = cfg.model_spec
    seeds = derived_seeds(cfg)
    run_id = cfg.resolved_run_id
    out = None
    if out_root is not None:
        out = Path(out_root) / run_id
        out.mkdir(parents=True, exist_ok=True)
        _write_manifest(out, cfg, seeds)

    with _stage(0, "sft"):
        rm = GoldRewardModel(spec.vocab_size, seeds["gold_rm"], cfg.gold_rm.length_penalty)
        base = build_model(spec, "seeded_normal", seeds["base_init"], cfg.sft.base_init_stddev, label="base")
        sft_pairs = sft_corpus(cfg, seeds, base, rm)
        sft_cfg = cfg.sft.cfg.model_copy(update={"seed": seeds["sft_shuffle"]})
        theta0, _ = train_stage(base, None, [(ex.prompt, ex.chosen) for ex in sft_pairs], "sft", sft_cfg)
        theta0 = theta0.replace(label="sft")
        if out is not None:
            d = out / "round_0"
            d.mkdir(exist_ok=True)
            save_checkpoint(theta0, d / "policy.ckpt")
            write_dataset(d / "sft.jsonl", sft_pairs)
            (out / "gold_rm.json").write_text(json.dumps(rm.to_json()) + "\n")

    with _stage(0, "prompts"):
        ev = cfg.eval
        pool = generate_prompts(cfg.per_round.pairs, cfg.per_round.prompt_len, spec.vocab_size,
                                seeds["train_prompts"])
        id_prompts = generate_prompts(ev.n_prompts_id, ev.prompt_len, spec.vocab_size, seeds["eval_id_prompts"])
        ood_prompts = generate_prompts(ev.n_prompts_ood, ev.prompt_len, spec.vocab_size,
                                       seeds["eval_ood_prompts"], ev.ood_distribution)
        margin_prompts = generate_prompts(ev.n_margin_pairs, ev.prompt_len, spec.vocab_size,
                                          seeds["margin_prompts"])
        margin_pairs = build_preference_pairs(theta0, margin_prompts, cfg.per_round.k, rm,
                                              cfg.per_round.temperature, None, seeds["margin_pairs"])
        partitions = None
        if cfg.data_schedule.kind == "partitioned":
            full = build_preference_pairs(theta0, pool, cfg.per_round.k, rm, cfg.per_round.temperature,
                                          None, seeds["rounds"]["1"]["pairs"])
            partitions = partition_dataset(full, cfg.data_schedule.parts, seeds["partition"])

    trajectory = Trajectory((theta0,))
    records: list[IterationRecord] = []
    references: list[PolicyCheckpoint] = []
    weights_cfg = cfg.strategy.weights
    held_out_weights = cfg.strategy.kind == "learned_weights" and weights_cfg.dataset_source == "held_out"
    clean: list[PreferenceExample] | None = None

    for t in range(1, cfg.rounds + 1):
        rs = seeds["rounds"][str(t)]
        with _stage(t, "data"):
            if partitions is not None:
                clean = partitions[t - 1]
            elif clean is None:
                clean = build_preference_pairs(trajectory[-1], pool, cfg.per_round.k, rm,
                                               cfg.per_round.temperature, None, rs["pairs"])
            weight_data = None
            train_clean = clean
            if held_out_weights:
                weight_data, train_clean = split_fraction(clean, weights_cfg.held_out_fraction, rs["weight_split"])
            train = inject_label_noise(train_clean, NoiseSpec(p=cfg.per_round.noise_p, seed=rs["noise"]))
            if weight_data is None:
                weight_data = train

        with _stage(t, "reference"):
            reference, wres = next_reference(cfg.strategy, trajectory, weight_data, rs["weights"])
            references.append(reference)

        with _stage(t, "dpo"):
            init = reference if cfg.policy_init_each_round == "merged_reference" else trajectory[-1]
            init = init.replace(iteration_index=t - 1)
            probe = MarginProbe(reference, margin_pairs, cfg.per_round.dpo_cfg.beta)
            trace: list[tuple[int, float, float]] = []
            dpo_cfg = cfg.per_round.dpo_cfg.model_copy(update={"seed": rs["dpo_shuffle"]})
            policy, losses = train_stage(init, reference, train, "dpo", dpo_cfg,
                                         on_step=lambda s, p: trace.append((s, *probe.mean_rewards(p))))
            policy = policy.replace(label=f"round_{t}")

        with _stage(t, "evaluate"):
            record = IterationRecord(
                round=t,
                reference_label=_reference_label(cfg.strategy.kind, t),
                alpha=None if wres is None else [float(a) for a in wres.weights.alpha],
                train_loss_final=losses[-1] if losses else float("nan"),
                win_rate=win_rate(policy, theta0, id_prompts, rm, ev),
                ood_win_rate=win_rate(policy, theta0, ood_prompts, rm, ev),
                mean_gold_reward=mean_gold_reward(policy, id_prompts, rm, ev),
                ood_gold_reward=mean_gold_reward(policy, ood_prompts, rm, ev),
                lc_win_rate=lc_win_rate(policy, theta0, id_prompts, rm, ev),
                margin_trace=trace,
            )
            records.append(record)
            log.info("%s round %d: win=%.3f ood=%.3f margin=%.4f", run_id, t, record.win_rate,
                     record.ood_win_rate, record.final_margin)

        with _stage(t, "persist"):
            if out is not None:
                d = out / f"round_{t}"
                d.mkdir(exist_ok=True)
                save_checkpoint(policy, d / "policy.ckpt")
                save_checkpoint(reference, d / "reference.ckpt")
                if wres is not None and t >= 2:
                    write_weights(d / "weights.json", wres.weights,
                                  weights_cfg.model_copy(update={"seed": rs["weights"]}))
                write_dataset(d / "train.jsonl", train)
                (d / "metrics.csv").write_text(metrics_csv(metrics_rows(cfg, record)))

        trajectory = trajectory.appended(policy)
        if partitions is None and t < cfg.rounds:
            with _stage(t, "regenerate"):
                clean = build_preference_pairs(policy, pool, cfg.per_round.k, rm, cfg.per_round.temperature,
                                               None, seeds["rounds"][str(t + 1)]["pairs"])

    if out is not None:
        rows = [row for rec in records for row in metrics_rows(cfg, rec)]
        (out / "metrics.csv").write_text(metrics_csv(rows))
    return RunResult(run_id, trajectory, records, references, out)


def _reference_label(kind: str, t: int) -> str:
    if t == 1 or kind == "fixed_sft":
        return "sft"
    if kind == "previous_policy":
        return f"round_{t - 1}"
    return f"{kind}:0..{t - 1}"


def partition_dataset(dataset: Sequence, parts: int, seed: int) -> list[list]:
    """Shuffle once and cut into ``parts`` disjoint, near-equal chunks."""
    order = rng_for(seed, "partition").permutation(len(dataset))
    return [[dataset[i] for i in chunk] for chunk in np.array_split(order, parts)]


def split_fraction(dataset: Sequence, fraction: float, seed: int) -> tuple[list, list]:
    """Return (held-out slice of about ``fraction``, remainder), both in original order."""
    n = len(dataset)
    n_hold = min(max(1, int(round(fraction * n))), n - 1) if n > 1 else 0
    chosen = set(rng_for(seed, "split").permutation(n)[:n_hold].tolist())
    held = [ex for i, ex in enumerate(dataset) if i in chosen]
    rest = [ex for i, ex in enumerate(dataset) if i not in chosen]
    return held, rest


def _write_manifest(out: Path, cfg: ExperimentConfig, seeds: dict) -> None:
    artifacts = {"gold_rm": "gold_rm.json", "metrics": "metrics.csv",
                 "round_0": {"policy": "round_0/policy.ckpt", "sft_data": "round_0/sft.jsonl"}}
    for t in range(1, cfg.rounds + 1):
        d = f"round_{t}"
        artifacts[d] = {"policy": f"{d}/policy.ckpt", "reference": f"{d}/reference.ckpt",
                        "train": f"{d}/train.jsonl", "metrics": f"{d}/metrics.csv"}
        if cfg.strategy.kind == "learned_weights" and t >= 2:
            artifacts[d]["weights"] = f"{d}/weights.json"
    manifest = {
        "run_id": cfg.resolved_run_id,
        "tool_version": __version__,
        "config": cfg.to_dict(),
        "seeds": seeds,
        "artifacts": artifacts,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
