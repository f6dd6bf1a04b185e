"""Evaluation, error attribution and experiment orchestration."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from capita import env, vocab
from capita.capabilities import ORACLE, Backend
from capita.grammar import Invocation, Invoke
from capita.policy import policy_from_snapshot
from capita.scheduler import EpisodeResult, Limits, run_episode

ERROR_CATEGORIES = ("object-recognition", "open-vocabulary-referring", "instruction-understanding", "exploration",
                    "action-precondition", "low-level-control", "history-summarization", "ambiguity")
PRECONDITION_REASONS = ("receptacle-closed", "inventory-full", "inventory-empty", "wrong-tool",
                        "precondition-violated")
REPORT_COLUMNS = ("category", "episodes", "successes", "sr", "ssr")


def episode_seed(seed: int, index: int) -> int:
    return seed * 100_003 + index


# ---------------------------------------------------------------------------
# error attribution


@dataclass(frozen=True)
class ErrorAttribution:
    category: str
    evidence: int          # transcript line index ("t") that triggered the rule
    detail: str = ""

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _goal_classes(task: dict) -> set[str]:
    classes = set()
    for g in task["goals"]:
        classes.add(g["cls"])
        if "rec" in g:
            classes.add(g["rec"])
    return classes


def attribute_error(lines: list[dict]) -> ErrorAttribution:
    """Assign a failed episode to one error category.

    Rules fire in order: exhausted exploration; an injected OG miss on a goal class;
    an OG query no phrase table resolves; an ambiguous OG query that missed; an
    injected ES flip followed by further scheduling; precondition feedback on the last
    failed manipulation; a Stop with goals unmet; otherwise low-level control.
    """
    end = lines[-1]["payload"]
    if end.get("event") != "episode-end":
        raise ValueError("transcript has no episode-end line")
    if end["success"]:
        raise ValueError("successful episodes are not attributed")
    task = lines[0]["payload"]["task"]
    goal_classes = _goal_classes(task)
    caps = [l for l in lines if l["actor"] == "capability"]

    if end["terminal"] == "exploration-exhausted":
        where = next((l["t"] for l in caps if "exhausted" in l["payload"]), end_t(lines))
        return ErrorAttribution("exploration", where)
    for l in caps:
        p = l["payload"]
        if p["kind"] == "OG" and p.get("injected"):
            cls = vocab.canonicalize(p["query"])
            if cls in goal_classes:
                return ErrorAttribution("object-recognition", l["t"], cls)
    for l in caps:
        p = l["payload"]
        if p["kind"] == "OG" and not p["output"]["found"] and not vocab.resolve(p["query"]):
            return ErrorAttribution("open-vocabulary-referring", l["t"], p["query"])
    for l in caps:
        p = l["payload"]
        if p["kind"] == "OG" and not p["output"]["found"] and vocab.is_ambiguous(p["query"]):
            return ErrorAttribution("ambiguity", l["t"], p["query"])
    last_turn = max((l["t"] for l in lines if l["actor"] == "scheduler" and "turn" in l["payload"]), default=-1)
    for l in caps:
        p = l["payload"]
        if p["kind"] == "ES" and p.get("injected") and l["t"] < last_turn:
            return ErrorAttribution("history-summarization", l["t"], p["query"])
    failed_es = [l for l in caps if l["payload"]["kind"] == "ES" and not l["payload"]["output"]["success"]]
    if failed_es and failed_es[-1]["payload"]["output"]["reason"] in PRECONDITION_REASONS:
        l = failed_es[-1]
        return ErrorAttribution("action-precondition", l["t"], l["payload"]["output"]["reason"])
    if end["terminal"] == "stopped":
        return ErrorAttribution("instruction-understanding", end_t(lines))
    return ErrorAttribution("low-level-control", end_t(lines), end["terminal"])


def end_t(lines: list[dict]) -> int:
    return lines[-1]["t"]


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    per_category: dict[str, dict]
    aggregate: dict
    episodes: int
    seeds: tuple[int, ...]
    config_digest: str
    attribution: dict[str, int]
    terminals: dict[str, int] = field(default_factory=dict)

    @property
    def sr(self) -> float:
        return self.aggregate["sr"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        rows = [(c, self.per_category[c]) for c in sorted(self.per_category)] + [("all", self.aggregate)]
        for name, r in rows:
            w.writerow([name, r["episodes"], r["successes"], f"{r['sr']:.6f}", f"{r['ssr']:.6f}"])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"per_category": self.per_category, "aggregate": self.aggregate, "episodes": self.episodes,
                "seeds": list(self.seeds), "config_digest": self.config_digest,
                "attribution": self.attribution, "terminals": self.terminals}

    def to_json(self) -> str:
        return env.canonical_json(self.to_dict()) + "\n"


def _rollup(results: list[EpisodeResult]) -> dict:
    n = len(results)
    wins = sum(r.success for r in results)
    return {"episodes": n, "successes": wins, "sr": wins / n if n else 0.0,
            "ssr": float(np.mean([r.ssr for r in results])) if n else 0.0}


def load_any(snapshot: dict):
    """Rebuild a scheduler policy, including the harness wrappers, from its snapshot."""
    if snapshot.get("policy") == "referring":
        return ReferringQueries(load_any(snapshot["inner"]))
    return policy_from_snapshot(snapshot)


def _run_one(args) -> EpisodeResult:
    task_dict, snapshot, backend_dict, limits_dict, seed = args
    return run_episode(env.TaskSpec.from_dict(task_dict), load_any(snapshot),
                       Backend.from_dict(backend_dict), Limits(**limits_dict), seed)


def run_all(policy, tasks, backend: Backend = ORACLE, limits: Limits = Limits(), seeds=(0,),
            workers: int = 1) -> list[tuple[env.TaskSpec, EpisodeResult]]:
    """Every task under every seed, in (seed, task) order regardless of ``workers``."""
    jobs = [(s, i, t) for s in seeds for i, t in enumerate(tasks)]
    if workers <= 1:
        results = [run_episode(t, policy, backend, limits, episode_seed(s, i)) for s, i, t in jobs]
    else:
        snap, bd, ld = policy.snapshot(), backend.to_dict(), limits.to_dict()
        args = [(t.to_dict(), snap, bd, ld, episode_seed(s, i)) for s, i, t in jobs]
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_one, args, chunksize=8))
    return [(t, r) for (_, _, t), r in zip(jobs, results)]


def config_digest(policy, backend: Backend, limits: Limits, seeds, tasks) -> str:
    blob = env.canonical_json({"policy": policy.snapshot(), "backend": backend.to_dict(),
                               "limits": limits.to_dict(), "seeds": list(seeds),
                               "tasks": [env.task_digest(t) for t in tasks]})
    return hashlib.sha1(blob.encode()).hexdigest()[:16]


def evaluate(policy, tasks, backend: Backend = ORACLE, limits: Limits = Limits(), seeds=(0,),
             workers: int = 1, keep: bool = False) -> tuple[EvalReport, list[EpisodeResult]]:
    """Run ``policy`` on every task for every seed and summarize SR, SSR and failure causes.

    Returns the report and, when ``keep`` is set, the episode results (transcripts included).
    """
    tasks = list(tasks)
    if not tasks:
        raise ValueError("evaluate needs at least one task")
    pairs = run_all(policy, tasks, backend, limits, tuple(seeds), workers)
    by_cat: dict[str, list[EpisodeResult]] = {}
    for t, r in pairs:
        by_cat.setdefault(t.category, []).append(r)
    results = [r for _, r in pairs]
    attribution = Counter(attribute_error(r.transcript).category for r in results if not r.success)
    report = EvalReport(
        per_category={c: _rollup(rs) for c, rs in sorted(by_cat.items())},
        aggregate=_rollup(results),
        episodes=len(results),
        seeds=tuple(seeds),
        config_digest=config_digest(policy, backend, limits, seeds, tasks),
        attribution={c: attribution.get(c, 0) for c in ERROR_CATEGORIES},
        terminals=dict(sorted(Counter(r.terminal_reason for r in results).items())),
    )
    return report, (results if keep else [])


# ---------------------------------------------------------------------------
# task suites


class ReferringQueries:
    """Wraps a scheduler policy so exploration queries use synonym phrases.

    The referring split: the same tasks, but every EG/OG query is rewritten to a
    phrase from the synonym and description tables, picked deterministically per
    (task, class).
    """

    name = "referring"

    def __init__(self, policy, tables: vocab.PhraseTables | None = None):
        self.policy = policy
        self.tables = tables or vocab.load_tables()

    def reset(self, task, rng=None):
        self.task_id = task.task_id
        self.policy.reset(task, rng)

    def _phrase(self, query: str) -> str:
        cls = vocab.canonicalize(query)
        options = self.tables.synonyms.get(cls, ()) + self.tables.descriptions.get(cls, ())
        if not options:
            return query
        h = int(hashlib.sha1(f"{self.task_id}|{cls}".encode()).hexdigest(), 16)
        return options[h % len(options)]

    def act(self, state, task):
        action = self.policy.act(state, task)
        if isinstance(action, Invoke) and action.chain and action.chain[0].kind == "EG":
            q = self._phrase(action.chain[0].query)
            action = Invoke(tuple(Invocation(i.kind, q if i.kind in ("EG", "OG") else i.query)
                                  for i in action.chain))
        return action

    def snapshot(self):
        return {"policy": "referring", "inner": self.policy.snapshot()}


def task_suite(split: str, n: int, seed: int = 0) -> list[env.TaskSpec]:
    """Named evaluation splits: base tasks, long-horizon composites, or both."""
    from capita.datagen import generate_tasks
    if split == "base":
        return generate_tasks(n, seed)
    if split == "long-horizon":
        return generate_tasks(n, seed, composite_fraction=1.0)
    if split == "mixed":
        return generate_tasks(n, seed, composite_fraction=0.3)
    raise ValueError(f"unknown split {split!r}; expected base, long-horizon or mixed")


def write_report(report: EvalReport, csv_path, json_path=None) -> None:
    with open(csv_path, "w", encoding="utf-8", newline="") as f:
        f.write(report.to_csv())
    if json_path:
        with open(json_path, "w", encoding="utf-8") as f:
            f.write(report.to_json())


def read_report(json_path) -> dict:
    with open(json_path, encoding="utf-8") as f:
        return json.load(f)


# ---------------------------------------------------------------------------
# experiments


def learned_backend(dataset, p_og: float = 0.0, p_es: float = 0.0) -> Backend:
    """EG prior and OG phrase table fit from a dataset's capability samples."""
    from capita.capabilities import LearnedEG, LearnedOG
    eg_pairs = [(s.input["query"], s.ground_truth["object"]) for s in dataset.of("EG")]
    og_pairs = [(s.input["query"], s.ground_truth["label"]) for s in dataset.of("OG") if s.ground_truth["found"]]
    return Backend(p_og=p_og, p_es=p_es, eg_model=LearnedEG().fit(eg_pairs), og_model=LearnedOG().fit(og_pairs))


def capability_ablation(train_tasks, eval_tasks, seed: int = 0, limits: Limits = Limits()) -> dict[str, float]:
    """Scheduler over capabilities vs a plain atomic-action policy, both cloned from the same expert."""
    from capita.datagen import build_stage1
    from capita.plain import expert_demonstrations, plain_sr, train_plain
    from capita.trainer import TrainConfig, state_table, train
    ds = build_stage1(train_tasks, seed=seed)
    table = state_table(ds.of("scheduler"), 0.95, "manip-only")
    sched = train(TrainConfig(algo="bc", iterations=150, batch_size=256), table=table, seed=seed).policy
    X, y, _ = expert_demonstrations(train_tasks, seed=seed)
    plain = train_plain(X, y, seed=seed)
    report, _ = evaluate(sched, eval_tasks, limits=limits, seeds=(seed,))
    return {"scheduler": report.sr, "plain": plain_sr(plain, eval_tasks, limits, seed)}
