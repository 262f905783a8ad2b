"""Acceptance gate: one PASS/FAIL line per criterion.

Run under pytest (lines appear in the normal output) or directly with
``python tests/test_acceptance.py``.
"""

from __future__ import annotations

import functools
import math
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from conftest import (ACCEPTANCE_LINES, FD_RTOL, central_diff, max_rel_err, neural_spec,  # noqa: E402
                      random_model, random_pair, tabular_spec)
from test_merge import ab_construction, grid_min_pref  # noqa: E402
from trajmerge.cli import main as cli_main  # noqa: E402
from trajmerge.config import parse_config  # noqa: E402
from trajmerge.data import (GoldRewardModel, NoiseSpec, PreferenceExample, generate_prompts,  # noqa: E402
                            inject_label_noise, read_dataset)
from trajmerge.dpo import dpo_batch_loss_and_grad  # noqa: E402
from trajmerge.evaluation import win_rate  # noqa: E402
from trajmerge.loop import run_iterative  # noqa: E402
from trajmerge.merge import (Trajectory, WeightLearnConfig, entropy, learn_weights, merge_checkpoints,  # noqa: E402
                             softmax_weights, weight_objective_and_grad)
from trajmerge.policy import EOS  # noqa: E402

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
NOISE_CONFIG = CONFIGS / "noise_robustness.yaml"
N_SEEDS = 10


def report(n: int, ok: bool, detail: str) -> None:
    line = f"ACCEPTANCE {n}: {'PASS' if ok else 'FAIL'} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


# -- criterion 1 -------------------------------------------------------------

def criterion_1() -> tuple[bool, str]:
    rng = np.random.default_rng(2024)
    dpo_errs, w_errs = [], []
    for i in range(60):
        V = int(rng.integers(3, 7))
        spec = tabular_spec(V=V) if i % 2 == 0 else neural_spec(V=V, k=int(rng.integers(1, 4)))
        pol, ref = random_model(spec, 3 * i), random_model(spec, 3 * i + 1)
        batch = [random_pair(rng, V, 5) for _ in range(int(rng.integers(1, 5)))]
        beta = float(rng.uniform(0.05, 2.0))
        _, g = dpo_batch_loss_and_grad(pol, ref, batch, beta)
        fd = central_diff(lambda p: dpo_batch_loss_and_grad(pol.replace(params=p), ref, batch, beta)[0],
                          pol.params)
        dpo_errs.append(max_rel_err(g, fd))
    for i in range(60):
        V = int(rng.integers(3, 7))
        spec = tabular_spec(V=V) if i % 2 == 0 else neural_spec(V=V, k=int(rng.integers(1, 4)))
        n_ckpt = 1 + i % 4
        traj = Trajectory(tuple(random_model(spec, 100 + 5 * i + j).replace(iteration_index=j)
                                for j in range(n_ckpt)))
        batch = [random_pair(rng, V, 5) for _ in range(int(rng.integers(1, 5)))]
        w = rng.normal(0, 1, n_ckpt)
        beta, lam = float(rng.uniform(0.05, 2.0)), float(rng.uniform(0, 1))
        _, g = weight_objective_and_grad(traj, w, batch, beta, lam)
        fd = central_diff(lambda v: weight_objective_and_grad(traj, v, batch, beta, lam)[0], w)
        w_errs.append(max_rel_err(g, fd))
    ok = max(dpo_errs) <= FD_RTOL and max(w_errs) <= FD_RTOL
    return ok, (f"dpo grad max rel err {max(dpo_errs):.2e} over {len(dpo_errs)} instances; "
                f"merge-weight grad max rel err {max(w_errs):.2e} over {len(w_errs)} instances (lengths 1-4); "
                f"bound {FD_RTOL:g}")


# -- criterion 2 -------------------------------------------------------------

def criterion_2() -> tuple[bool, str]:
    rng = np.random.default_rng(7)
    checks: dict[str, bool] = {}

    ln2 = []
    for i, spec in enumerate([tabular_spec(V=6), neural_spec(V=6)] * 5):
        m = random_model(spec, i)
        loss, _ = dpo_batch_loss_and_grad(m, m, [random_pair(rng, 6, 5) for _ in range(5)], 0.1)
        ln2.append(abs(loss - math.log(2)))
    checks["dpo loss ln2 at reference"] = max(ln2) <= 1e-12

    sm = [np.max(np.abs(softmax_weights([0, 0, 0]) - 1 / 3)),
          np.max(np.abs(softmax_weights([math.log(2), 0, 0]) - [0.5, 0.25, 0.25])),
          abs(entropy([0.0, 1.0, 0.0])), abs(entropy([0.25] * 4) - math.log(4))]
    for _ in range(50):
        w = rng.normal(0, 3, 5)
        sm.append(np.max(np.abs(softmax_weights(w) - softmax_weights(w + rng.normal(0, 30)))))
        sm.append(abs(softmax_weights(w).sum() - 1))
    checks["softmax/entropy identities"] = max(sm) <= 1e-12

    m = random_model(neural_spec(V=6), 1)
    checks["single-checkpoint merge bitwise"] = merge_checkpoints([m], [1.0]).params.tobytes() == m.params.tobytes()

    rm = GoldRewardModel(6, seed=1)
    checks["self win rate = 0.5"] = win_rate(m, m, generate_prompts(200, 3, 6, 2), rm) == 0.5

    data = [PreferenceExample((1,), (2, EOS), (EOS,), False, 1.0, 0.0) for _ in range(500)]
    p0 = inject_label_noise(data, NoiseSpec(p=0.0, seed=3))
    p1 = inject_label_noise(data, NoiseSpec(p=1.0, seed=3))
    checks["noise p=0 identity"] = p0 == data
    checks["noise p=1 full swap"] = all(o.flipped and o.chosen == d.rejected for o, d in zip(p1, data))

    failed = [k for k, v in checks.items() if not v]
    return not failed, f"{len(checks) - len(failed)}/{len(checks)} exact identities hold" + (
        f"; failed: {', '.join(failed)}" if failed else "")


# -- criterion 3 -------------------------------------------------------------

def criterion_3() -> tuple[bool, str]:
    traj, data = ab_construction()
    res = learn_weights(traj, data, WeightLearnConfig(lam=0.0, steps=500))
    grid = grid_min_pref(traj, data, 0.1)
    gap = res.pref_trace[-1] - grid
    a = float(res.weights.alpha[0])
    return a >= 0.99 and gap <= 1e-3, f"alpha_A = {a:.5f} (>= 0.99); learned L_pref - grid min = {gap:.2e} (<= 1e-3)"


# -- shared experiment runs (criteria 4-6) -----------------------------------

@functools.lru_cache(maxsize=None)
def noise_run(kind: str, seed: int, keep_data: bool = False):
    cfg = parse_config(NOISE_CONFIG, {"strategy.kind": kind, "master_seed": seed})
    if not keep_data:
        return run_iterative(cfg), None
    with tempfile.TemporaryDirectory() as d:
        res = run_iterative(cfg, d)
        data = read_dataset(res.out_dir / "round_3" / "train.jsonl")
    return res, data


def criterion_4() -> tuple[bool, str]:
    res, data = noise_run("learned_weights", 0, keep_data=True)
    traj = res.trajectory
    peaks = {}
    for lam in (0.0, 0.1, 0.5, 10.0):
        peaks[lam] = float(learn_weights(traj, data, WeightLearnConfig(lam=lam)).weights.alpha.max())
    uniform = 1 / len(traj)
    ok = peaks[0.0] > peaks[0.1] > peaks[0.5] and abs(peaks[10.0] - uniform) <= 0.05
    detail = ", ".join(f"lambda={k:g}: {v:.4f}" for k, v in peaks.items())
    return ok, f"max alpha over {len(traj)} checkpoints: {detail}; uniform = {uniform:.4f}"


def _seed_table():
    out = {}
    for kind in ("previous_policy", "learned_weights"):
        runs = [noise_run(kind, s)[0] for s in range(N_SEEDS)]
        out[kind] = (np.array([[r.win_rate for r in res.records] for res in runs]),
                     np.array([res.records[-1].final_margin for res in runs]))
    return out


def criterion_5() -> tuple[bool, str]:
    t = _seed_table()
    pp, lw = t["previous_policy"][0].mean(axis=0), t["learned_weights"][0].mean(axis=0)
    ok = lw[2] >= pp[2] and lw[2] >= lw[1] - 0.02
    return ok, (f"p=0.3, {N_SEEDS} seeds; mean win rate by round PP {np.round(pp, 4).tolist()}, "
                f"LW {np.round(lw, 4).tolist()}; need LW r3 >= PP r3 and LW r3 >= LW r2 - 0.02")


def criterion_6() -> tuple[bool, str]:
    t = _seed_table()
    pp, lw = float(t["previous_policy"][1].mean()), float(t["learned_weights"][1].mean())
    return lw > pp, f"final-round mean clean held-out margin LW {lw:.4f} vs PP {pp:.4f}"


# -- criterion 7 -------------------------------------------------------------

def criterion_7() -> tuple[bool, str]:
    data = [PreferenceExample((1,), (2, EOS), (EOS,)) for _ in range(10000)]
    counts = [sum(ex.flipped for ex in inject_label_noise(data, NoiseSpec(p=0.5, seed=s))) for s in range(20)]
    worst = max(abs(c - 5000) for c in counts)
    return worst <= 200, f"20 seeds, max |flips - 5000| = {worst} (<= 200)"


# -- criterion 8 -------------------------------------------------------------

def criterion_8() -> tuple[bool, str]:
    with tempfile.TemporaryDirectory() as d:
        root = Path(d)
        argv = ["run-experiment", "--config", str(NOISE_CONFIG), "--seed", "11"]
        codes = [cli_main(argv + ["--out", str(root / name)]) for name in ("a", "b")]
        if codes != [0, 0]:
            return False, f"run-experiment exit codes {codes}"
        (run_a,) = (root / "a").iterdir()
        run_b = root / "b" / run_a.name
        files = [p.relative_to(run_a) for p in run_a.rglob("*") if p.suffix in (".csv", ".ckpt")]
        diff = [str(p) for p in files if (run_a / p).read_bytes() != (run_b / p).read_bytes()]
    return not diff and len(files) > 0, f"{len(files)} metrics/checkpoint files compared, {len(diff)} differ"


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6, criterion_7,
            criterion_8]


@pytest.mark.parametrize("n", range(1, len(CRITERIA) + 1))
def test_criterion(n):
    t0 = time.perf_counter()
    ok, detail = CRITERIA[n - 1]()
    report(n, ok, f"{detail} [{time.perf_counter() - t0:.1f}s]")
    assert ok, detail


if __name__ == "__main__":
    results = []
    for i, fn in enumerate(CRITERIA, start=1):
        ok, detail = fn()
        report(i, ok, detail)
        results.append(ok)
    sys.exit(0 if all(results) else 1)
