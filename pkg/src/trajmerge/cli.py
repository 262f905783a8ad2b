"""Command-line front end.

Every subcommand takes ``--config`` (a YAML experiment config) plus a few
overrides, and writes only under ``--out``. Exit codes: 0 success, 2 config or
usage error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import parse_config
from .data import (GoldRewardModel, NoiseSpec, build_preference_pairs, generate_prompts,
                   inject_label_noise, read_dataset, write_dataset)
from .dpo import train_stage
from .errors import ConfigError, TrajmergeError
from .evaluation import lc_win_rate, mean_gold_reward, win_rate
from .loop import (ExperimentConfig, sft_corpus, derived_seeds, metrics_csv, run_iterative)
from .merge import learn_weights, merge_checkpoints, read_weights, simple_average, write_weights
from .policy import build_model, load_checkpoint, save_checkpoint
from .seeding import derive_seed

log = logging.getLogger("trajmerge")

_OVERRIDES = {
    "seed": "master_seed",
    "noise_p": "per_round.noise_p",
    "lam": "strategy.weights.lambda",
    "strategy": "strategy.kind",
    "rounds": "rounds",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="YAML experiment config")
    p.add_argument("--out", default="out", help="output directory (default: out)")
    p.add_argument("--seed", type=int, help="override master_seed")
    p.add_argument("--noise-p", dest="noise_p", type=float, help="override per_round.noise_p")
    p.add_argument("--lambda", dest="lam", type=float, help="override strategy.weights.lambda")
    p.add_argument("--strategy", choices=["previous_policy", "fixed_sft", "simple_average", "learned_weights"])
    p.add_argument("--rounds", type=int, help="override rounds")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="trajmerge", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="sample preference pairs from a policy, scored by the gold RM")
    _common(p)
    p.add_argument("--policy", help="checkpoint to sample from (default: the config's base model)")

    p = sub.add_parser("inject-noise", help="flip preference labels with probability noise_p")
    _common(p)
    p.add_argument("--data", required=True)

    p = sub.add_parser("sft", help="build the base model and fine-tune it on best-of-k responses")
    _common(p)

    p = sub.add_parser("dpo-round", help="one DPO stage against a fixed reference")
    _common(p)
    p.add_argument("--policy", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--data", required=True)

    p = sub.add_parser("merge", help="merge checkpoints (uniform unless --weights)")
    _common(p)
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--weights", help="weights JSON with a 'raw' vector")

    p = sub.add_parser("learn-weights", help="learn merge weights on a preference dataset")
    _common(p)
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--data", required=True)

    p = sub.add_parser("evaluate", help="score a candidate against a baseline")
    _common(p)
    p.add_argument("--candidate", required=True)
    p.add_argument("--baseline", required=True)

    p = sub.add_parser("run-experiment", help="SFT followed by iterative DPO")
    _common(p)
    return parser


def _load_cfg(args) -> ExperimentConfig:
    overrides = {_OVERRIDES[k]: getattr(args, k) for k in _OVERRIDES if getattr(args, k) is not None}
    return parse_config(args.config, overrides)


def _gold_rm(cfg: ExperimentConfig) -> GoldRewardModel:
    return GoldRewardModel(cfg.model_spec.vocab_size, derived_seeds(cfg)["gold_rm"], cfg.gold_rm.length_penalty)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(args, cfg: ExperimentConfig) -> None:
    seeds = derived_seeds(cfg)
    rm = _gold_rm(cfg)
    if args.policy:
        policy = load_checkpoint(args.policy)
    else:
        policy = build_model(cfg.model_spec, "seeded_normal", seeds["base_init"], cfg.sft.base_init_stddev)
    prompts = generate_prompts(cfg.per_round.pairs, cfg.per_round.prompt_len, cfg.model_spec.vocab_size,
                               seeds["train_prompts"])
    pairs = build_preference_pairs(policy, prompts, cfg.per_round.k, rm, cfg.per_round.temperature, None,
                                   seeds["rounds"]["1"]["pairs"])
    out = _out(args)
    write_dataset(out / "train.jsonl", pairs)
    (out / "gold_rm.json").write_text(json.dumps(rm.to_json()) + "\n")
    log.info("wrote %d pairs", len(pairs))


def cmd_inject_noise(args, cfg: ExperimentConfig) -> None:
    data = read_dataset(args.data)
    seed = derive_seed(cfg.master_seed, 1, "noise")
    noisy = inject_label_noise(data, NoiseSpec(p=cfg.per_round.noise_p, seed=seed))
    write_dataset(_out(args) / "noisy.jsonl", noisy)
    log.info("flipped %d of %d", sum(ex.flipped for ex in noisy) - sum(ex.flipped for ex in data), len(data))


def cmd_sft(args, cfg: ExperimentConfig) -> None:
    seeds = derived_seeds(cfg)
    rm = _gold_rm(cfg)
    base = build_model(cfg.model_spec, "seeded_normal", seeds["base_init"], cfg.sft.base_init_stddev, label="base")
    pairs = sft_corpus(cfg, seeds, base, rm)
    sft_cfg = cfg.sft.cfg.model_copy(update={"seed": seeds["sft_shuffle"]})
    policy, trace = train_stage(base, None, [(ex.prompt, ex.chosen) for ex in pairs], "sft", sft_cfg)
    out = _out(args)
    save_checkpoint(policy, out / "policy.ckpt")
    write_dataset(out / "sft.jsonl", pairs)
    _write_loss(out / "train_loss.csv", trace)


def _write_loss(path: Path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, loss in enumerate(trace, start=1):
            w.writerow([i, repr(float(loss))])


def cmd_dpo_round(args, cfg: ExperimentConfig) -> None:
    policy = load_checkpoint(args.policy)
    reference = load_checkpoint(args.reference)
    data = read_dataset(args.data)
    dpo_cfg = cfg.per_round.dpo_cfg.model_copy(update={"seed": derive_seed(cfg.master_seed, 1, "dpo_shuffle")})
    new, trace = train_stage(policy, reference, data, "dpo", dpo_cfg)
    out = _out(args)
    save_checkpoint(new, out / "policy.ckpt")
    _write_loss(out / "train_loss.csv", trace)


def cmd_merge(args, cfg: ExperimentConfig) -> None:
    cks = [load_checkpoint(p) for p in args.checkpoints]
    if args.weights:
        merged = merge_checkpoints(cks, read_weights(args.weights).alpha)
    else:
        merged = simple_average(cks)
    save_checkpoint(merged, _out(args) / "merged.ckpt")


def cmd_learn_weights(args, cfg: ExperimentConfig) -> None:
    cks = [load_checkpoint(p) for p in args.checkpoints]
    data = read_dataset(args.data)
    wcfg = cfg.strategy.weights.model_copy(update={"seed": derive_seed(cfg.master_seed, len(cks), "weights")})
    result = learn_weights(cks, data, wcfg)
    out = _out(args)
    write_weights(out / "weights.json", result.weights, wcfg)
    save_checkpoint(merge_checkpoints(cks, result.weights.alpha), out / "merged.ckpt")


def cmd_evaluate(args, cfg: ExperimentConfig) -> None:
    seeds = derived_seeds(cfg)
    rm = _gold_rm(cfg)
    ev, V = cfg.eval, cfg.model_spec.vocab_size
    cand, base = load_checkpoint(args.candidate), load_checkpoint(args.baseline)
    id_prompts = generate_prompts(ev.n_prompts_id, ev.prompt_len, V, seeds["eval_id_prompts"])
    ood_prompts = generate_prompts(ev.n_prompts_ood, ev.prompt_len, V, seeds["eval_ood_prompts"],
                                   ev.ood_distribution)
    row = {
        "run_id": cfg.resolved_run_id, "round": cand.iteration_index, "strategy": cfg.strategy.kind,
        "noise_p": cfg.per_round.noise_p,
        "lambda": cfg.strategy.weights.lam if cfg.strategy.kind == "learned_weights" else None,
        "seed": cfg.master_seed,
        "win_rate": win_rate(cand, base, id_prompts, rm, ev),
        "ood_win_rate": win_rate(cand, base, ood_prompts, rm, ev),
        "gold_reward": mean_gold_reward(cand, id_prompts, rm, ev),
        "ood_gold_reward": mean_gold_reward(cand, ood_prompts, rm, ev),
        "lc_win_rate": lc_win_rate(cand, base, id_prompts, rm, ev),
    }
    (_out(args) / "metrics.csv").write_text(metrics_csv([row]))
    print(json.dumps({k: v for k, v in row.items() if v is not None}))


def cmd_run_experiment(args, cfg: ExperimentConfig) -> None:
    result = run_iterative(cfg, args.out)
    for rec in result.records:
        print(f"round {rec.round}: win_rate={rec.win_rate:.4f} ood_win_rate={rec.ood_win_rate:.4f} "
              f"gold_reward={rec.mean_gold_reward:.4f} lc_win_rate={rec.lc_win_rate:.4f}")
    print(f"artifacts: {result.out_dir}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "inject-noise": cmd_inject_noise,
    "sft": cmd_sft,
    "dpo-round": cmd_dpo_round,
    "merge": cmd_merge,
    "learn-weights": cmd_learn_weights,
    "evaluate": cmd_evaluate,
    "run-experiment": cmd_run_experiment,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = _load_cfg(args)
    except ConfigError as exc:
        print(f"trajmerge {args.command}: {exc}", file=sys.stderr)
        return 2
    try:
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"trajmerge {args.command}: config error: {exc}", file=sys.stderr)
        return 2
    except (TrajmergeError, OSError, ValueError) as exc:
        print(f"trajmerge {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
