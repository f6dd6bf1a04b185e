"""Acceptance suite: one PASS/FAIL line per criterion, printed in the pytest summary.

Run with ``pytest tests/test_acceptance.py -v`` or ``python3 tests/test_acceptance.py``.
"""

import time

import numpy as np
import pytest

from capita import datagen, env, harness
from capita.capabilities import Backend
from capita.expert import Exploration, ExpertScheduler, expert_value, optimal_action_set
from capita.policy import CATALOG, FEATURE_DIM, ParametricPolicy, TaskContext, catalog_canonical
from capita.scheduler import Limits, read_transcript, replay, run_episode
from capita.trainer import (TrainConfig, action_match, center_group, clipped_terms, eipo_objective, expert_advantage,
                            probe_sr, state_table, train)

RESULTS: dict[int, str] = {}

NOISY = Backend(p_og=0.2, p_es=0.1)
UNSWEPT = Limits(max_sweeps=None)
SEEDS = (0, 1, 2)


def record(n: int, ok: bool, detail: str) -> None:
    RESULTS[n] = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}"
    print(RESULTS[n])
    assert ok, RESULTS[n]


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-12)


# 1 ---------------------------------------------------------------------------

def test_oracle_completeness():
    t0 = time.perf_counter()
    tasks = datagen.generate_tasks(500, seed=0) + datagen.generate_tasks(100, seed=1, composite_fraction=1.0)
    report, _ = harness.evaluate(ExpertScheduler(), tasks)
    elapsed = time.perf_counter() - t0
    cats = {c for t in tasks for c in t.base_categories()}
    profiles = {t.profile for t in tasks}
    ok = report.sr == 1.0 and len(tasks) >= 500 and cats == set(env.BASE_CATEGORIES) \
        and profiles == set(env.PROFILES) and elapsed < 60
    record(1, ok, f"expert+oracle SR={report.sr:.3f} over {len(tasks)} tasks "
                  f"({len(cats)} categories, {len(profiles)} profiles, 100 composites) in {elapsed:.1f}s")


# 2 ---------------------------------------------------------------------------

def test_zero_advantage_identity():
    tasks = datagen.generate_tasks(100, seed=2)
    episodes = worst_zero = 0
    positive = nonneg_when_strict = 0
    checked = 0
    for i, task in enumerate(tasks):
        for backend in (Backend(), NOISY):
            res = run_episode(task, ExpertScheduler(), backend, UNSWEPT, seed=i, record_states=True)
            episodes += 1
            ctx = TaskContext.of(task)
            canon = [catalog_canonical(j, ctx) for j in range(len(CATALOG))]
            for tracker in datagen.trackers_along(task, res.states):
                best = optimal_action_set(tracker)
                for gamma in (0.5, 0.95, 1.0):
                    v = expert_value(tracker, gamma)
                    for c in canon:
                        a = expert_advantage(tracker, c, gamma)
                        checked += 1
                        if c in best:
                            worst_zero = max(worst_zero, abs(a))
                        else:
                            positive += a > 0
                            nonneg_when_strict += gamma < 1 and v > 0 and a >= 0
    ok = episodes >= 100 and worst_zero <= 1e-12 and positive == 0 and nonneg_when_strict == 0
    record(2, ok, f"{episodes} expert episodes, {checked} (state, action, gamma) checks: max |A(expert)|="
                  f"{worst_zero:.1e}, non-expert A>0: {positive}, non-expert A>=0 with gamma<1 and V>0: "
                  f"{nonneg_when_strict}")


# 3 ---------------------------------------------------------------------------

def test_group_centering_and_clipping():
    rng = np.random.default_rng(3)
    tasks = datagen.generate_tasks(50, seed=3, composite_fraction=0.3)
    table = state_table(datagen.build_stage3(tasks, 0.2, 0.1, seed=3).of("scheduler"), 0.95, "manip-only")
    worst = 0.0
    for _ in range(1000):
        rows = rng.integers(len(table.X), size=64)
        acts = rng.integers(len(CATALOG), size=(64, 8))
        groups = table.advantages[rows[:, None], acts]
        worst = max(worst, float(np.abs(center_group(groups).sum(axis=1)).max()))
    for _ in range(1000):
        worst = max(worst, abs(center_group(rng.normal(size=int(rng.integers(2, 17)))).sum()))
    hi, _ = clipped_terms([1.3], [-1.0], 0.2)
    lo, _ = clipped_terms([0.7], [-1.0], 0.2)
    ok = worst <= 1e-12 and hi[0] == -1.3 and lo[0] == -0.8
    record(3, ok, f"max |sum centered| over 65,000 expert-advantage groups (G=8) and 1000 unit-normal groups="
                  f"{worst:.1e}; clip(r=1.3)={hi[0]}, clip(r=0.7)={lo[0]}")


# 4 ---------------------------------------------------------------------------

def _directional(f, params, D, h):
    base = [p.copy() for p in params]
    for p, b, d in zip(params, base, D):
        p[...] = b + h * d
    up = f()
    for p, b, d in zip(params, base, D):
        p[...] = b - h * d
    down = f()
    for p, b in zip(params, base):
        p[...] = b
    return (up - down) / (2 * h)


def test_gradient_fidelity():
    rng = np.random.default_rng(4)
    soft = 0.0
    for draw in range(100):
        pol = ParametricPolicy(init_scale=0.3, seed=draw)
        x = rng.normal(size=FEATURE_DIM)
        a = int(rng.integers(len(CATALOG)))
        D = [rng.normal(size=p.shape) for p in pol.params]
        analytic = sum(float((g * d).sum()) for g, d in zip(pol.grad_logprob(x, a), D))
        soft = max(soft, relative_error(_directional(lambda: pol.logprob(x, a), pol.params, D, 1e-5), analytic))
    eipo = 0.0
    draws = skipped = 0
    while draws < 100:
        pol = ParametricPolicy(init_scale=0.3, seed=500 + draws + skipped)
        old_pol = ParametricPolicy(init_scale=0.3, seed=900 + draws + skipped)
        X = rng.normal(size=(8, FEATURE_DIM))
        acts = rng.integers(len(CATALOG), size=8)
        old = old_pol.logprobs(X)[np.arange(8), acts]
        adv = center_group(rng.normal(size=8))
        ratio = np.exp(pol.logprobs(X)[np.arange(8), acts] - old)
        if np.any(np.abs(np.abs(ratio - 1) - 0.2) < 1e-3):
            skipped += 1
            continue
        _, grads, _ = eipo_objective(pol, X, acts, old, adv, 0.2)
        D = [rng.normal(size=p.shape) for p in pol.params]
        analytic = sum(float((g * d).sum()) for g, d in zip(grads, D))
        fd = _directional(lambda: eipo_objective(pol, X, acts, old, adv, 0.2)[0], pol.params, D, 1e-6)
        eipo = max(eipo, relative_error(fd, analytic))
        draws += 1
    ok = soft < 1e-6 and eipo < 1e-4
    record(4, ok, f"softmax max rel err={soft:.1e} (<1e-6), EIPO max rel err={eipo:.1e} (<1e-4) over 100 draws "
                  f"each ({skipped} clip-boundary draws excluded)")


# 5 ---------------------------------------------------------------------------

def test_behavior_cloning_recovers_expert():
    tasks = datagen.generate_tasks(300, seed=5)
    ds = datagen.build_stage1(tasks, seed=5)
    cfg = TrainConfig(algo="bc", iterations=150, batch_size=256)
    policy = train(cfg, table=state_table(ds.of("scheduler", "train"), 0.95, "manip-only"), seed=5).policy
    match = action_match(policy, state_table(ds.of("scheduler", "val"), 0.95, "manip-only"))
    held_out = datagen.generate_tasks(200, seed=55)
    oracle_sr = harness.evaluate(ExpertScheduler(), held_out)[0].sr
    bc_sr = probe_sr(policy, held_out, Backend(), Limits(), seed=0)
    ok = match >= 0.95 and bc_sr >= 0.9 * oracle_sr
    record(5, ok, f"held-out action match={match:.3f} (>=0.95); BC SR={bc_sr:.3f} vs oracle SR={oracle_sr:.3f} "
                  f"(ratio {bc_sr / oracle_sr:.3f} >= 0.90)")


# 6 ---------------------------------------------------------------------------

def test_eipo_at_least_grpo():
    probe = datagen.generate_tasks(100, seed=999)
    scores = {algo: [] for algo in ("eipo", "grpo-reward", "grpo-return")}
    for seed in SEEDS:
        tasks = datagen.generate_tasks(160, seed=seed + 1)
        ds = datagen.build_stage1(tasks, seed=seed).merged(datagen.build_stage3(tasks, 0.2, 0.1, seed=seed))
        table = state_table(ds.of("scheduler", "train"), 0.95, "manip-only")
        for algo in scores:
            result = train(TrainConfig(algo=algo), table=table, tasks=tasks, backend=NOISY, limits=UNSWEPT, seed=seed)
            scores[algo].append(probe_sr(result.policy, probe, NOISY, UNSWEPT, 0))
    means = {a: float(np.mean(v)) for a, v in scores.items()}
    ok = all(means["eipo"] >= means[a] for a in ("grpo-reward", "grpo-return"))
    per_seed = "; ".join(f"{a} {'/'.join(f'{s:.2f}' for s in v)} (mean {means[a]:.3f})" for a, v in scores.items())
    record(6, ok, f"probe SR per seed {SEEDS} under p_og=0.2, p_es=0.1, G=8, batch 512, 120 iterations: {per_seed}")


# 7 ---------------------------------------------------------------------------

def test_error_injection_recovery():
    tasks = datagen.generate_tasks(500, seed=7)
    generous = Limits(step_budget=500, invalid_budget=500, max_sweeps=None)
    report, _ = harness.evaluate(ExpertScheduler(), tasks, Backend(p_og=0.3), generous)
    rng = np.random.default_rng(7)
    triples = explorations = 0
    i = 0
    while explorations < 10_000:
        records, _ = datagen.synthesize(tasks[i % len(tasks)], 0.3, 0.0, rng)
        explorations += sum(isinstance(s, Exploration) for s in tasks[i % len(tasks)].plan)
        triples += sum(isinstance(tr.head, Exploration) for _, tr, _ in records)
        i += 1
    mean = triples / explorations
    predicted = 1 / (1 - 0.3)
    ok = report.sr >= 0.99 and relative_error(mean, predicted) <= 0.05
    record(7, ok, f"p_og=0.3 expert SR={report.sr:.3f} over 500 tasks; repetitions per exploration={mean:.4f} vs "
                  f"1/(1-p)={predicted:.4f} over {explorations} draws")


# 8 ---------------------------------------------------------------------------

def test_dagger_value():
    probe = datagen.generate_tasks(200, seed=999)
    cfg = TrainConfig(algo="bc", iterations=150, batch_size=256)
    rows = []
    for seed in SEEDS:
        tasks = datagen.generate_tasks(160, seed=seed + 1)
        ds1 = datagen.build_stage1(tasks, seed=seed)
        p1 = train(cfg, table=state_table(ds1.of("scheduler", "train"), 0.95, "manip-only"), seed=seed).policy
        ds2 = datagen.build_stage2(p1, tasks, seed=seed, backend=NOISY, limits=UNSWEPT, base=ds1)
        p2 = train(cfg, table=state_table(ds2.of("scheduler", "train"), 0.95, "manip-only"), seed=seed).policy
        rows.append((probe_sr(p1, probe, NOISY, UNSWEPT, 0), probe_sr(p2, probe, NOISY, UNSWEPT, 0)))
    ok = all(b >= a for a, b in rows)
    detail = ", ".join(f"seed {s}: {a:.3f} -> {b:.3f}" for s, (a, b) in zip(SEEDS, rows))
    record(8, ok, f"noisy SR stage-1 BC -> stage-1+2 BC: {detail}")


# 9 ---------------------------------------------------------------------------

def test_determinism_and_replay(tmp_path):
    from capita.cli import main
    tasks = datagen.generate_tasks(40, seed=9, composite_fraction=0.25)
    trained = ParametricPolicy(init_scale=0.5, seed=9)
    replays = mismatches = 0
    for i, task in enumerate(tasks):
        for policy, backend in ((ExpertScheduler(), Backend(p_og=0.3, p_es=0.2, p_eg=0.2)),
                                (trained, NOISY), (harness.ReferringQueries(ExpertScheduler()), Backend())):
            res = run_episode(task, policy, backend, UNSWEPT, seed=i)
            text = res.transcript_jsonl()
            again = replay(read_transcript(text), loader=harness.load_any).transcript_jsonl()
            replays += 1
            mismatches += again != text
    datagen.write_tasks(tasks, tmp_path / "tasks.jsonl")
    outputs = []
    for run in ("a", "b"):
        main(["eval", "--policy", "random", "--tasks", str(tmp_path / "tasks.jsonl"), "--seeds", "3,4",
              "--p-og", "0.2", "--p-es", "0.1", "--workers", "2" if run == "b" else "1",
              "--report", str(tmp_path / f"{run}.csv"), "--report-json", str(tmp_path / f"{run}.json")])
        outputs.append(((tmp_path / f"{run}.csv").read_bytes(), (tmp_path / f"{run}.json").read_bytes()))
    same_report = outputs[0] == outputs[1]
    ok = mismatches == 0 and same_report
    record(9, ok, f"{replays - mismatches}/{replays} transcripts replay byte-identically; report regenerated "
                  f"byte-identically (serial vs 2 workers): {same_report}")


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-q"]))
