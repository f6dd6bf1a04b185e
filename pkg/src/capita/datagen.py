"""Training-data factory: expert conversion, DAgger relabeling, error-injected synthesis, augmentation."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from capita import capabilities as caps
from capita import env, vocab
from capita.capabilities import ORACLE, Backend, ESSummary, Found, NotFound
from capita.expert import ExpertScheduler, Exploration, ProgressTracker, resync, track
from capita.grammar import Invocation, Stop, canonical, parse_command
from capita.policy import FEATURE_DIGEST, TaskContext, catalog_index
from capita.scheduler import Limits, SchedulerState, apply_feedback, run_episode

log = logging.getLogger(__name__)

DATASET_SCHEMA = "capita/dataset@1"
SAMPLE_SCHEMA = "capita/sample@1"
TARGETS = ("scheduler", "EG", "OG", "SD", "AD", "ES")
DEFAULT_TAU = 0.5
SYNTHESIS_CAP = 200


@dataclass
class Sample:
    stage: int
    target: str
    input: dict
    ground_truth: dict
    provenance: dict
    cot: str | None = None

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ValueError(f"stage must be 1, 2 or 3, got {self.stage}")
        if self.target not in TARGETS:
            raise ValueError(f"unknown sample target {self.target!r}")

    @property
    def split(self) -> str:
        return split_of(self.provenance["task_id"])

    def to_dict(self) -> dict:
        d = {"schema": SAMPLE_SCHEMA, "stage": self.stage, "target": self.target, "input": self.input,
             "ground_truth": self.ground_truth, "provenance": self.provenance}
        if self.cot is not None:
            d["cot"] = self.cot
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Sample":
        if d.get("schema") != SAMPLE_SCHEMA:
            raise ValueError(f"unsupported sample schema {d.get('schema')!r}")
        return cls(d["stage"], d["target"], d["input"], d["ground_truth"], d["provenance"], d.get("cot"))


@dataclass
class Dataset:
    samples: list[Sample] = field(default_factory=list)
    stats: dict = field(default_factory=dict)
    feature_digest: str = FEATURE_DIGEST

    def __len__(self) -> int:
        return len(self.samples)

    def of(self, target: str, split: str | None = None) -> list[Sample]:
        return [s for s in self.samples if s.target == target and (split is None or s.split == split)]

    def merged(self, other: "Dataset") -> "Dataset":
        if other.feature_digest != self.feature_digest:
            raise ValueError("cannot merge datasets built for different feature configs")
        stats = {**self.stats, **{f"merged:{k}": v for k, v in other.stats.items()}}
        return Dataset(self.samples + other.samples, stats, self.feature_digest)

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for s in self.samples:
            out[s.target] = out.get(s.target, 0) + 1
        return dict(sorted(out.items()))

    def to_jsonl(self) -> str:
        header = {"schema": DATASET_SCHEMA, "feature_digest": self.feature_digest, "count": len(self.samples),
                  "stats": self.stats}
        lines = [env.canonical_json(header)] + [env.canonical_json(s.to_dict()) for s in self.samples]
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_jsonl())

    @classmethod
    def from_jsonl(cls, text: str, expect_digest: str | None = FEATURE_DIGEST) -> "Dataset":
        lines = [l for l in text.splitlines() if l.strip()]
        header = json.loads(lines[0])
        if header.get("schema") != DATASET_SCHEMA:
            raise ValueError(f"unsupported dataset schema {header.get('schema')!r}")
        if expect_digest is not None and header["feature_digest"] != expect_digest:
            raise ValueError(f"dataset feature digest {header['feature_digest']} does not match {expect_digest}")
        return cls([Sample.from_dict(json.loads(l)) for l in lines[1:]], header.get("stats", {}),
                   header["feature_digest"])

    @classmethod
    def read(cls, path, expect_digest: str | None = FEATURE_DIGEST) -> "Dataset":
        with open(path, encoding="utf-8") as f:
            return cls.from_jsonl(f.read(), expect_digest)


def split_of(task_id: str) -> str:
    """Deterministic 80/20 train/validation assignment by task-id hash."""
    return "val" if int(hashlib.sha1(task_id.encode()).hexdigest(), 16) % 5 == 0 else "train"


# ---------------------------------------------------------------------------
# scheduler-state (de)serialization


def state_to_dict(state: SchedulerState) -> dict:
    return {"instruction": state.instruction, "turn": state.turn, "step_count": state.step_count,
            "invalid_count": state.invalid_count,
            "memory": [{"kind": inv.kind, "query": inv.query, "feedback": fb.to_dict()} for inv, fb in state.memory]}


def state_from_dict(d: dict) -> SchedulerState:
    memory = tuple((Invocation(m["kind"], m["query"]), caps.feedback_from_dict(m["feedback"])) for m in d["memory"])
    return SchedulerState(d["instruction"], memory, d["step_count"], d["invalid_count"], d["turn"],
                          last_feedback=memory[-1][1] if memory else None)


def render_cot(task: env.TaskSpec, tracker: ProgressTracker) -> str:
    """Template reasoning trace: restated task, full sub-plan list, completed part, next target."""
    plan = "; ".join(f"{i + 1}. {s}" for i, s in enumerate(tracker.plan))
    done = ", ".join(str(tracker.plan[i]) for i in tracker.completed) or "nothing yet"
    head = tracker.head
    nxt = f"I should: {head}" if head is not None else "All sub-plans are complete, so I should stop."
    return f"The task is to {task.instruction}. The sub-plans are: {plan}. Completed: {done}. {nxt}"


def _scheduler_sample(stage: int, task: env.TaskSpec, ctx: TaskContext, state: SchedulerState,
                      tracker: ProgressTracker, action, episode: str, index: int, cot: bool) -> Sample | None:
    idx = catalog_index(action, ctx)
    if idx is None:
        return None
    gt = {"action": action.to_dict(), "canonical": list(canonical(action)), "catalog_index": idx}
    inp = {"task": ctx.to_dict(), "state": state_to_dict(state), "tracker": tracker.to_dict()}
    prov = {"task_id": task.task_id, "episode": episode, "invocation": index}
    return Sample(stage, "scheduler", inp, gt, prov, render_cot(task, tracker) if cot else None)


def _initial_tracker(task: env.TaskSpec) -> ProgressTracker:
    return ProgressTracker(tuple(task.plan))


# ---------------------------------------------------------------------------
# privileged relabeling of capability invocations


class _World:
    """Re-simulates logged env actions so every transcript line can be relabeled from ground truth."""

    def __init__(self, task: env.TaskSpec):
        self.task = task
        self.scene = task.scene()
        self.agent = env.AgentState(env.START, task.profile)
        self.knowledge = caps.Knowledge()
        self.knowledge.update(self.obs())
        self.memory = caps.EGMemory(max_sweeps=None)
        self.candidates = list(self.scene.receptacles)
        if task.profile == "composite":
            self.candidates += sorted((o.id for o in self.scene.objects.values() if o.location != env.FLOOR),
                                      key=env._id_key)

    def obs(self) -> env.Observation:
        return env.observe(self.scene, self.agent)

    def act(self, text: str) -> env.ActionFeedback:
        self.scene, self.agent, fb = env.step(self.scene, self.agent, env.parse_action(text))
        self.knowledge.update(self.obs())
        return fb

    def settled(self) -> set[str]:
        return {o.id for o in self.scene.objects.values() if env.settles(self.scene, o, self.task.goals)}


def _gt_queries(task: env.TaskSpec) -> dict[str, str]:
    """Ground-truth exploration queries (query word -> class) for the task's key objects."""
    return {s.target_query: s.target_class for s in task.plan if isinstance(s, Exploration)}


def _match(query: str, gts: dict[str, str], tau: float | None) -> str | None:
    if tau is None:
        return vocab.canonicalize(query) if query else None
    best, score = None, -1.0
    for q, cls in gts.items():
        j = vocab.jaccard(query, q)
        if j > score:
            best, score = cls, j
    return best if score >= tau else None


def capability_samples(task: env.TaskSpec, lines: list[dict], stage: int, episode: str,
                       tau: float | None = None) -> list[Sample]:
    """Relabel every capability invocation in a transcript with privileged ground truth.

    With ``tau`` set (DAgger), EG/OG invocations are kept only when their query matches a
    ground-truth query with token Jaccard >= tau, and the label is computed for the
    matched target; AD commands outside the grammar are discarded.
    """
    world = _World(task)
    gts = _gt_queries(task)
    out: list[Sample] = []
    last_label: str | None = None
    pending_manip: dict | None = None
    history: list[tuple[str, str]] = []

    def emit(target, inp, gt, t):
        out.append(Sample(stage, target, inp, gt, {"task_id": task.task_id, "episode": episode, "invocation": t}))

    for line in lines[1:]:
        p, t = line["payload"], line["t"]
        if line["actor"] == "env":
            fb = world.act(p["action"])
            history.append((p["action"], fb.reason))
            continue
        if line["actor"] != "capability":
            continue
        kind = p["kind"]
        if kind == "EG":
            cls = _match(p["query"], gts, tau)
            world.memory.focus(p["query"])
            if cls is not None:
                try:
                    gt = caps.eg(vocab.query_word(cls), world.candidates, copy.deepcopy(world.memory), ORACLE,
                                 world.scene, goals=task.goals, profile=task.profile)
                    emit("EG", {"query": p["query"], "candidates": world.candidates,
                                "tried": [d.to_dict() for d in world.memory.tried]}, gt.to_dict(), t)
                except caps.ExplorationExhausted:
                    pass
            if "direction" in p:
                world.memory.tried.append(caps.Direction(**p["direction"]))
        elif kind == "AD-explore":
            history = []
        elif kind == "OG":
            cls = _match(p["query"], gts, tau)
            obs = world.obs()
            if cls is not None:
                gt = caps.og(vocab.query_word(cls) if tau is not None else p["query"], obs, ORACLE,
                             scene_seed=world.scene.seed, exclude=world.settled())
                emit("OG", {"query": p["query"], "visible": obs.ids()}, gt.to_dict(), t)
            if p["output"]["found"]:
                last_label = p["output"]["label"]
        elif kind == "SD":
            obs = world.obs()
            facts = caps.sd(last_label, obs, task.goals)
            emit("SD", {"target": last_label, "observation": obs.to_dict()},
                 {"facts": [list(f) for f in facts], "text": caps.render_facts(facts)}, t)
            pending_manip = {"facts": facts, "obs": obs}
        elif kind == "AD-manip":
            history = []
            if parse_command(p["query"]) is None or pending_manip is None:
                continue
            k = world.knowledge
            acts = caps.ad_manip(p["query"], pending_manip["facts"], k, task.profile,
                                 observation=pending_manip["obs"], receptacles=world.scene.receptacles)
            emit("AD", {"command": p["query"], "facts": [list(f) for f in pending_manip["facts"]],
                        "holding": k.holding, "location": k.location, "profile": task.profile},
                 {"actions": [env.action_text(a) for a in acts]}, t)
        elif kind == "ES":
            hist = [(env.parse_action(a), env.ActionFeedback(r == "ok", r)) for a, r in history]
            gt = caps.es(p["query"], hist)
            emit("ES", {"command": p["query"], "history": [list(h) for h in history]}, gt.to_dict(), t)
    return out


# ---------------------------------------------------------------------------
# stage 1


def trackers_along(task: env.TaskSpec, states) -> list[ProgressTracker]:
    """Expert progress at each recorded (state, action) of an expert episode."""
    tracker = _initial_tracker(task)
    out = []
    prev = None
    for state, action in states:
        if prev is not None:
            tracker = track(tracker, prev, state.last_feedback)
        out.append(tracker)
        prev = action
    return out


def build_stage1(tasks, seed: int = 0, p_eg: float = 0.0, limits: Limits = Limits(), cot: bool = True) -> Dataset:
    """Convert expert episodes under oracle capabilities (EG optionally perturbed) into samples."""
    backend = Backend(p_eg=p_eg)
    samples: list[Sample] = []
    dropped = 0
    for i, task in enumerate(tasks):
        episode = f"s1-{seed}-{i}"
        res = run_episode(task, ExpertScheduler(), backend, limits, seed=seed * 100003 + i, record_states=True)
        samples += capability_samples(task, res.transcript, 1, episode)
        if not res.success:
            dropped += 1
            continue
        ctx = TaskContext.of(task)
        for k, ((state, action), tracker) in enumerate(zip(res.states, trackers_along(task, res.states))):
            s = _scheduler_sample(1, task, ctx, state, tracker, action, episode, k, cot)
            if s is not None:
                samples.append(s)
    stats = {"stage": 1, "tasks": len(tasks), "dropped": dropped, "p_eg": p_eg, "seed": seed}
    if dropped:
        log.info("stage 1 dropped %d/%d tasks from the scheduler split", dropped, len(tasks))
    ds = Dataset(samples, stats)
    ds.stats["counts"] = ds.counts()
    return ds


# ---------------------------------------------------------------------------
# stage 2 (DAgger)


def _truthful(feedback):
    """Undo an injected perturbation; the supervisor sees the privileged outcome."""
    if feedback is None or not getattr(feedback, "injected", False):
        return feedback
    if isinstance(feedback, NotFound):
        return Found("", (0, 0, 0, 0))
    return ESSummary(True, "ok", feedback.text)


class _Shadowed:
    """Wraps a learned policy and records the expert's label at every state it visits."""

    def __init__(self, policy):
        self.policy = policy
        self.records: list = []

    def reset(self, task, rng=None):
        self.policy.reset(task, rng)
        self.tracker = _initial_tracker(task)
        self.prev = None

    def act(self, state, task):
        if self.prev is not None:
            self.tracker = resync(self.tracker, self.prev, _truthful(state.last_feedback))
        head = self.tracker.head
        label = Stop() if head is None else head.action()
        self.records.append((state, self.tracker, label))
        action = self.policy.act(state, task)
        self.prev = action
        return action

    def snapshot(self):
        return self.policy.snapshot()


def build_stage2(policy, tasks, tau: float = DEFAULT_TAU, seed: int = 0, backend: Backend = ORACLE,
                 limits: Limits = Limits(), base: Dataset | None = None) -> Dataset:
    """Roll out ``policy`` and attach expert corrections to the states and invocations it produced."""
    samples: list[Sample] = []
    for i, task in enumerate(tasks):
        episode = f"s2-{seed}-{i}"
        shadow = _Shadowed(policy)
        res = run_episode(task, shadow, backend, limits, seed=seed * 100003 + i)
        ctx = TaskContext.of(task)
        for k, (state, tracker, label) in enumerate(shadow.records):
            s = _scheduler_sample(2, task, ctx, state, tracker, label, episode, k, cot=True)
            if s is not None:
                samples.append(s)
        samples += capability_samples(task, res.transcript, 2, episode, tau=tau)
    ds = Dataset(samples, {"stage": 2, "tasks": len(tasks), "tau": tau, "seed": seed})
    ds.stats["counts"] = ds.counts()
    return base.merged(ds) if base is not None else ds


# ---------------------------------------------------------------------------
# stage 3 (synthetic error injection)


def synthesize(task: env.TaskSpec, p_og: float, p_es: float, rng: np.random.Generator,
               cap: int = SYNTHESIS_CAP) -> tuple[list[tuple[SchedulerState, ProgressTracker, object]], bool]:
    """Expert trajectory with synthesized capability feedback (no environment).

    OG reports NotFound with probability ``p_og``; ES reports failure with probability
    ``p_es`` and a sampled reason, driving the expert's rollback. Returns the
    (state, tracker, expert action) records and whether the cap truncated it.
    """
    tracker = _initial_tracker(task)
    state = SchedulerState(task.instruction)
    records = []
    while len(records) < cap:
        head = tracker.head
        action = Stop() if head is None else head.action()
        records.append((state, tracker, action))
        if head is None:
            return records, False
        if isinstance(head, Exploration):
            if p_og > 0 and rng.random() < p_og:
                fb = NotFound(injected=True)
            else:
                fb = Found(head.target_class, caps.synthetic_box(task.scene_seed, head.target_class))
        elif p_es > 0 and rng.random() < p_es:
            reason = caps.FAILURE_REASONS[int(rng.integers(len(caps.FAILURE_REASONS)))]
            fb = ESSummary(False, reason, f"You failed to {head.command}: {reason}.", injected=True)
        else:
            fb = ESSummary(True, "ok", f"You successfully {head.command}.")
        state = dataclasses.replace(state, turn=state.turn + 1, last_action=action)
        state = apply_feedback(state, action.chain[2], fb)
        tracker = track(tracker, action, fb)
    return records, True


def build_stage3(tasks, p_og: float = 0.2, p_es: float = 0.1, seed: int = 0, cap: int = SYNTHESIS_CAP) -> Dataset:
    rng = np.random.default_rng([seed, 0x53])
    samples: list[Sample] = []
    truncated = 0
    for i, task in enumerate(tasks):
        records, cut = synthesize(task, p_og, p_es, rng, cap)
        truncated += cut
        ctx = TaskContext.of(task)
        episode = f"s3-{seed}-{i}"
        for k, (state, tracker, action) in enumerate(records):
            s = _scheduler_sample(3, task, ctx, state, tracker, action, episode, k, cot=False)
            if s is not None:
                if cut:
                    s.provenance["truncated"] = True
                samples.append(s)
    ds = Dataset(samples, {"stage": 3, "tasks": len(tasks), "p_og": p_og, "p_es": p_es, "seed": seed,
                           "truncated": truncated})
    ds.stats["counts"] = ds.counts()
    return ds


# ---------------------------------------------------------------------------
# augmentation


def _surface(phrase: str) -> str:
    return "".join(w.capitalize() for w in phrase.split())


def _swap_id(obj_id: str, mapping: dict[str, str]) -> str:
    cls = vocab.class_of(obj_id)
    return obj_id.replace(cls, mapping[cls], 1) if cls in mapping else obj_id


def rephrase_actions(texts, verbs: dict[str, str]) -> list[str]:
    return [env.action_text(env.parse_action(t), verbs) for t in texts]


def derephrase_actions(texts, verbs: dict[str, str]) -> list[str]:
    return [env.action_text(env.parse_action(t, verbs)) for t in texts]


def augment(dataset: Dataset, tables: vocab.PhraseTables | None = None, rng: np.random.Generator | None = None,
            factor: int = 1) -> Dataset:
    """Append ``factor`` augmented copies of each eligible capability sample; originals are kept.

    EG candidates and OG queries get synonym substitutions, AD/ES action texts get verb
    rephrasings, and AD samples additionally spawn novel-class substitutions.
    """
    tables = tables or vocab.load_tables()
    rng = rng if rng is not None else np.random.default_rng(0)
    variants = sorted(v for v in tables.rephrase if v != 0)
    extra: list[Sample] = []
    for s in dataset.samples:
        for _ in range(factor):
            new = None
            if s.target == "EG":
                cand_classes = sorted({vocab.class_of(c) for c in s.input["candidates"]} & set(tables.synonyms))
                if not cand_classes:
                    continue
                cls = cand_classes[int(rng.integers(len(cand_classes)))]
                phrases = tables.synonyms[cls]
                mapping = {cls: _surface(phrases[int(rng.integers(len(phrases)))])}
                inp = dict(s.input, candidates=[_swap_id(c, mapping) for c in s.input["candidates"]])
                gt = dict(s.ground_truth, object=_swap_id(s.ground_truth["object"], mapping))
                new = Sample(s.stage, "EG", inp, gt, dict(s.provenance, augmented="synonym"))
            elif s.target == "OG":
                cls = vocab.canonicalize(s.input["query"])
                phrases = tables.synonyms.get(cls, ()) + tables.descriptions.get(cls, ())
                if not phrases:
                    continue
                q = phrases[int(rng.integers(len(phrases)))]
                new = Sample(s.stage, "OG", dict(s.input, query=q), s.ground_truth,
                             dict(s.provenance, augmented="synonym"))
            elif s.target in ("AD", "ES") and variants:
                v = variants[int(rng.integers(len(variants)))]
                verbs = tables.rephrase[v]
                if s.target == "AD":
                    gt = {"actions": rephrase_actions(s.ground_truth["actions"], verbs)}
                    new = Sample(s.stage, "AD", s.input, gt, dict(s.provenance, augmented="rephrase", variant=v))
                else:
                    hist = [[rephrase_actions([a], verbs)[0], r] for a, r in s.input["history"]]
                    new = Sample(s.stage, "ES", dict(s.input, history=hist), s.ground_truth,
                                 dict(s.provenance, augmented="rephrase", variant=v))
            if new is not None:
                extra.append(new)
        if s.target == "AD" and "augmented" not in s.provenance:
            novel = _novel_substitute(s, tables.novel)
            if novel is not None:
                extra.append(novel)
    ds = Dataset(dataset.samples + extra, dict(dataset.stats, augmented=len(extra), factor=factor),
                 dataset.feature_digest)
    ds.stats["counts"] = ds.counts()
    return ds


def _novel_substitute(s: Sample, novel: dict[str, str]) -> Sample | None:
    acts = s.ground_truth["actions"]
    classes = {vocab.class_of(x) for a in acts for x in _action_refs(a)}
    if not classes or not classes & set(novel):
        return None
    mapping = {c: novel[c] for c in classes if c in novel}
    new_acts = []
    for a in acts:
        parsed = env.parse_action(a)
        fields = [_swap_id(x, mapping) for x in dataclasses.astuple(parsed)]
        new_acts.append(env.action_text(type(parsed)(*fields)))
    command = s.input["command"]
    for c, n in mapping.items():
        command = command.replace(c.lower(), n.lower())
    inp = dict(s.input, command=command, facts=[[f[0], _swap_id(f[1], mapping),
                                                 _swap_id(f[2], mapping) if isinstance(f[2], str) else f[2]]
                                                for f in s.input["facts"]])
    return Sample(s.stage, "AD", inp, {"actions": new_acts}, dict(s.provenance, augmented="novel-class"))


def _action_refs(text: str) -> tuple:
    a = env.parse_action(text)
    return () if isinstance(a, env.Invalid) else dataclasses.astuple(a)


# ---------------------------------------------------------------------------
# task suites


def generate_tasks(n: int, seed: int = 0, profiles=env.PROFILES, categories=env.BASE_CATEGORIES,
                   composite_fraction: float = 0.0, config: env.SceneConfig | None = None) -> list[env.TaskSpec]:
    """Round-robin over (profile, category) pairs with fresh scenes; composites pair two base tasks."""
    rng = np.random.default_rng([seed, 0x7A5])
    combos = [(p, c) for p in profiles for c in categories]
    tasks: list[env.TaskSpec] = []
    k = 0
    while len(tasks) < n:
        scene_seed = seed * 1_000_003 + k
        profile, cat = combos[k % len(combos)]
        k += 1
        scene = env.build_scene(scene_seed, config)
        try:
            if composite_fraction and rng.random() < composite_fraction:
                a = env.instantiate_task(cat, scene, rng, profile)
                other = categories[int(rng.integers(len(categories)))]
                b = env.instantiate_task(other, scene, rng, profile, avoid=dict(a.targets).values())
                tasks.append(env.compose_tasks(a, b))
            else:
                tasks.append(env.instantiate_task(cat, scene, rng, profile))
        except (env.InstantiationError, env.CompositionError):
            continue
    return tasks


def write_tasks(tasks, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for t in tasks:
            f.write(t.serialize() + "\n")


def read_tasks(path) -> list[env.TaskSpec]:
    with open(path, encoding="utf-8") as f:
        return [env.TaskSpec.from_dict(json.loads(l)) for l in f if l.strip()]


def scheduler_arrays(samples: list[Sample]):
    """(features, expert catalog index, tracker, task context) arrays from scheduler samples."""
    from capita.policy import featurize
    X, y, trackers, ctxs = [], [], [], []
    for s in samples:
        ctx = TaskContext.from_dict(s.input["task"])
        X.append(featurize(state_from_dict(s.input["state"]), ctx))
        y.append(s.ground_truth["catalog_index"])
        trackers.append(ProgressTracker.from_dict(s.input["tracker"]))
        ctxs.append(ctx)
    return np.array(X), np.array(y, dtype=int), trackers, ctxs

