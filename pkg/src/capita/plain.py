"""Plain action policy: picks atomic environment actions directly, with no capabilities.

This is the ablation baseline for the capability scheduler. It sees raw observations,
remembers where it has seen things, and chooses among slot-bound atomic-action
templates. Without EG it can only search receptacles in a fixed order.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from capita import env
from capita.expert import ExpertScheduler, key_objects
from capita.policy import CATEGORY_FEATURES, POLICY_SCHEMA, PROGRESS_BINS, SLOTS, TURN_SCALE, ParametricPolicy
from capita.scheduler import Limits, run_episode
from capita.vocab import CLASSES, class_of

VERB_TEMPLATES = ("open", "close", "put", "heat", "cool", "clean")
PLAIN_CATALOG: tuple[tuple, ...] = (
    (("explore",),)
    + tuple(("goto", k) for k in range(SLOTS))
    + (("open",), ("close",))
    + tuple(("take", k) for k in range(SLOTS))
    + (("put",),)
    + tuple(("put-into", k) for k in range(SLOTS))
    + tuple(("turn-on", k) for k in range(SLOTS))
    + (("heat",), ("cool",), ("clean",), ("stop",))
)
PLAIN_INDEX = {t: i for i, t in enumerate(PLAIN_CATALOG)}
_COUNTED = ("take", "put", "open", "close", "turn-on", "heat", "cool", "clean")
COUNT_CAP = 4


@dataclass
class PlainMemory:
    """What the plain agent knows: its own observations, nothing privileged."""

    category: str
    key: tuple[str, ...]
    goal_recs: dict[str, set[str]]            # object class -> receptacle classes a placement goal wants
    receptacles: tuple[str, ...]
    location: str = env.START
    holding: str | None = None
    seen: dict[str, str] = field(default_factory=dict)     # instance -> last observed location
    props: dict[str, dict] = field(default_factory=dict)   # instance -> last observed properties
    visible: tuple[str, ...] = ()
    cursor: int = 0
    last: bool | None = None
    counts: dict[str, int] = field(default_factory=dict)
    turn: int = 0

    @classmethod
    def start(cls, task: env.TaskSpec, scene: env.SceneGraph) -> "PlainMemory":
        goal_recs: dict[str, set[str]] = {}
        for g in task.goals:
            if isinstance(g, (env.In, env.On, env.CountIn)):
                goal_recs.setdefault(g.cls, set()).add(g.rec)
        return cls(task.category, tuple(key_objects(task.plan)), goal_recs, tuple(scene.receptacles))

    def observe(self, obs: env.Observation) -> None:
        self.location = obs.location
        self.holding = obs.inventory
        self.visible = tuple(obs.ids())
        for oid, props in obs.visible:
            p = dict(props)
            self.seen[oid] = p["location"]
            self.props[oid] = p

    def settled(self, oid: str) -> bool:
        loc = self.seen.get(oid)
        return loc is not None and class_of(loc) in self.goal_recs.get(class_of(oid), ())

    def root(self, oid: str) -> str | None:
        loc = self.seen.get(oid)
        hops = 0
        while loc is not None and loc not in self.receptacles and hops < 8:
            loc = self.seen.get(loc)
            hops += 1
        return loc if loc in self.receptacles else None

    def instances(self, cls: str, visible_only: bool) -> list[str]:
        pool = self.visible if visible_only else tuple(self.seen)
        ids = [o for o in pool if class_of(o) == cls and o != self.holding]
        return sorted(ids, key=lambda o: (self.settled(o), env._id_key(o)))


def _slot_cls(mem: PlainMemory, k: int) -> str | None:
    return mem.key[k] if k < len(mem.key) else None


def bind_plain(index: int, mem: PlainMemory, profile: str) -> env.Action | None:
    """Concrete atomic action for a template, or an Invalid when it cannot bind; None for stop."""
    t = PLAIN_CATALOG[index]
    kind = t[0]
    here, held = mem.location, mem.holding
    if kind == "stop":
        return None
    if kind == "explore":
        order = [r for r in mem.receptacles if r != here]
        return env.GoTo(order[mem.cursor % len(order)]) if order else env.Invalid("explore")
    if kind in ("open", "close"):
        return (env.Open if kind == "open" else env.Close)(here) if here in mem.receptacles else env.Invalid(kind)
    if kind == "put":
        return env.Put(held, here) if held and here in mem.receptacles else env.Invalid("put")
    if kind in ("heat", "cool", "clean"):
        action = {"heat": env.Heat, "cool": env.Cool, "clean": env.Clean}[kind]
        return action(held, here) if held else env.Invalid(kind)
    cls = _slot_cls(mem, t[1])
    if cls is None:
        return env.Invalid(f"{kind} slot {t[1]}")
    if kind == "goto":
        if cls in CLASSES and CLASSES[cls].receptacle and not CLASSES[cls].pickupable:
            same = [r for r in mem.receptacles if class_of(r) == cls]
            return env.GoTo(same[0])
        for oid in mem.instances(cls, visible_only=False):
            if profile == "composite":
                return env.GoTo(oid)
            root = mem.root(oid)
            if root is not None:
                return env.GoTo(root)
        return env.Invalid(f"goto {cls}")
    if kind == "turn-on" and class_of(here) == cls:
        return env.TurnOn(here)
    found = mem.instances(cls, visible_only=True)
    if not found:
        return env.Invalid(f"{kind} {cls}")
    oid = found[0]
    if kind == "take":
        return env.Pick(oid, mem.seen[oid])
    if kind == "put-into":
        return env.Put(held, oid) if held else env.Invalid("put-into")
    return env.TurnOn(oid)


def template_of(action: env.Action, mem: PlainMemory, profile: str) -> int | None:
    """Template index whose binding reproduces ``action`` in this memory (exploration as fallback)."""
    for i in range(len(PLAIN_CATALOG) - 1):
        if bind_plain(i, mem, profile) == action and PLAIN_CATALOG[i][0] != "explore":
            return i
    if isinstance(action, env.GoTo):
        return PLAIN_INDEX[("explore",)]
    return None


def _feature_names() -> tuple[str, ...]:
    names = [f"category:{c}" for c in CATEGORY_FEATURES]
    names += [f"holding-slot:{k}" for k in range(SLOTS)] + ["holding:none", "holding:other"]
    names += [f"visible-slot:{k}" for k in range(SLOTS)] + [f"known-slot:{k}" for k in range(SLOTS)]
    names += [f"here-slot:{k}" for k in range(SLOTS)] + [f"settled-slot:{k}" for k in range(SLOTS)]
    names += ["here:open", "here:closed", "here:fixed"]
    names += ["held:hot", "held:cold", "held:clean"]
    names += ["last:success", "last:failure", "last:none"]
    names += [f"count:{v}" for v in _COUNTED]
    names += [f"progress:{i}" for i in range(PROGRESS_BINS)]
    names += ["turn", "bias"]
    return tuple(names)


PLAIN_FEATURES = _feature_names()
PLAIN_DIM = len(PLAIN_FEATURES)
_POS = {n: i for i, n in enumerate(PLAIN_FEATURES)}
PLAIN_DIGEST = hashlib.sha1(("\n".join(PLAIN_FEATURES) + f"\nslots={SLOTS}").encode()).hexdigest()[:16]


def featurize_plain(mem: PlainMemory) -> np.ndarray:
    x = np.zeros(PLAIN_DIM)
    x[_POS[f"category:{mem.category}"]] = 1.0
    held_cls = class_of(mem.holding) if mem.holding else None
    for k, cls in enumerate(mem.key[:SLOTS]):
        if held_cls == cls:
            x[_POS[f"holding-slot:{k}"]] = 1.0
        if any(not mem.settled(o) for o in mem.instances(cls, True)):
            x[_POS[f"visible-slot:{k}"]] = 1.0
        if any(not mem.settled(o) for o in mem.instances(cls, False)):
            x[_POS[f"known-slot:{k}"]] = 1.0
        if class_of(mem.location) == cls:
            x[_POS[f"here-slot:{k}"]] = 1.0
        if any(mem.settled(o) for o in mem.instances(cls, False)):
            x[_POS[f"settled-slot:{k}"]] = 1.0
    if mem.holding is None:
        x[_POS["holding:none"]] = 1.0
    elif held_cls not in mem.key:
        x[_POS["holding:other"]] = 1.0
    here = mem.props.get(mem.location, {})
    if "open" in here:
        x[_POS["here:open" if here["open"] else "here:closed"]] = 1.0
    elif mem.location in mem.receptacles:
        x[_POS["here:fixed"]] = 1.0
    held = mem.props.get(mem.holding, {}) if mem.holding else {}
    x[_POS["held:hot"]] = float(held.get("temperature") == "hot")
    x[_POS["held:cold"]] = float(held.get("temperature") == "cold")
    x[_POS["held:clean"]] = float(bool(held.get("clean")))
    x[_POS["last:none" if mem.last is None else "last:success" if mem.last else "last:failure"]] = 1.0
    for v in _COUNTED:
        x[_POS[f"count:{v}"]] = min(mem.counts.get(v, 0), COUNT_CAP)
    progress = sum(mem.counts.values())
    x[_POS[f"progress:{min(progress, PROGRESS_BINS - 1)}"]] = 1.0
    x[_POS["turn"]] = mem.turn / TURN_SCALE
    x[_POS["bias"]] = 1.0
    return x


def _note(mem: PlainMemory, index: int, success: bool) -> None:
    kind = PLAIN_CATALOG[index][0]
    mem.last = success
    mem.turn += 1
    if kind == "explore":
        mem.cursor += 1
    if success and kind in _COUNTED:
        mem.counts[kind] = mem.counts.get(kind, 0) + 1


class PlainPolicy(ParametricPolicy):
    """Softmax over plain atomic-action templates."""

    name = "plain"

    def __init__(self, hidden: int = 0, temperature: float = 1.0, greedy: bool = False, seed: int = 0):
        super().__init__(len(PLAIN_CATALOG), PLAIN_DIM, hidden, temperature, greedy, 0.1 if hidden else 0.0, seed)

    def choose(self, mem: PlainMemory, rng: np.random.Generator) -> int:
        return self.sample(featurize_plain(mem), rng)

    def copy(self) -> "PlainPolicy":
        other = PlainPolicy(self.hidden, self.temperature, self.greedy)
        other.params = [p.copy() for p in self.params]
        return other

    def snapshot(self) -> dict:
        return {"schema": POLICY_SCHEMA, "policy": "plain", "feature_digest": PLAIN_DIGEST, "hidden": self.hidden,
                "temperature": self.temperature, "greedy": self.greedy,
                "params": [p.tolist() for p in self.params]}

    @classmethod
    def from_snapshot(cls, d: dict) -> "PlainPolicy":
        if d.get("feature_digest") != PLAIN_DIGEST:
            raise ValueError("plain policy feature digest does not match featurizer")
        pol = cls(d["hidden"], d["temperature"], d["greedy"])
        pol.params = [np.array(p, dtype=float) for p in d["params"]]
        return pol


@dataclass
class PlainResult:
    task_id: str
    success: bool
    ssr: float
    steps: int
    invalid: int
    terminal_reason: str


def run_plain_episode(task: env.TaskSpec, policy: PlainPolicy, limits: Limits = Limits(), seed: int = 0,
                      record: list | None = None) -> PlainResult:
    """One episode where every policy decision is a single atomic action."""
    scene = task.scene()
    agent = env.AgentState(env.START, task.profile)
    step_budget, invalid_budget, _ = limits.resolve(task)
    rng = np.random.default_rng([seed, 0x91A])
    mem = PlainMemory.start(task, scene)
    mem.observe(env.observe(scene, agent))
    steps = invalid = 0
    terminal = "step-budget"
    while steps < step_budget:
        index = policy.choose(mem, rng)
        if record is not None:
            record.append((featurize_plain(mem), index))
        action = bind_plain(index, mem, task.profile)
        if action is None:
            terminal = "stopped"
            break
        scene, agent, fb = env.step(scene, agent, action)
        steps += 1
        invalid += not fb.success
        mem.observe(env.observe(scene, agent))
        _note(mem, index, fb.success)
        if invalid > invalid_budget:
            terminal = "invalid-budget"
            break
    _, success, ssr = env.check_goals(scene, list(task.goals))
    return PlainResult(task.task_id, success, ssr, steps, invalid, terminal)


def expert_demonstrations(tasks, seed: int = 0) -> tuple[np.ndarray, np.ndarray, int]:
    """(features, template labels, dropped actions) from oracle expert episodes.

    Each successful atomic action the expert executed is mapped to the template that
    reproduces it from the plain agent's memory; navigation the plain agent could not
    have derived becomes an exploration step.
    """
    X, y, dropped = [], [], 0
    for i, task in enumerate(tasks):
        res = run_episode(task, ExpertScheduler(), seed=seed * 100_003 + i)
        if not res.success:
            continue
        scene = task.scene()
        agent = env.AgentState(env.START, task.profile)
        mem = PlainMemory.start(task, scene)
        mem.observe(env.observe(scene, agent))
        for line in res.transcript:
            if line["actor"] != "env" or not line["payload"]["success"]:
                continue
            action = env.parse_action(line["payload"]["action"])
            index = template_of(action, mem, task.profile)
            if index is None:
                dropped += 1
                continue
            X.append(featurize_plain(mem))
            y.append(index)
            scene, agent, fb = env.step(scene, agent, action)
            mem.observe(env.observe(scene, agent))
            _note(mem, index, fb.success)
        X.append(featurize_plain(mem))
        y.append(PLAIN_INDEX[("stop",)])
    return np.array(X), np.array(y, dtype=int), dropped


def train_plain(X: np.ndarray, y: np.ndarray, iterations: int = 150, lr: float = 0.05, batch_size: int = 256,
                seed: int = 0, hidden: int = 0) -> PlainPolicy:
    """Behavior cloning of the plain policy on expert demonstrations."""
    from capita.trainer import Adam
    policy = PlainPolicy(hidden=hidden, seed=seed)
    opt = Adam(policy.params, lr)
    rng = np.random.default_rng([seed, 0x9B1])
    for _ in range(iterations):
        order = rng.permutation(len(y))
        for start in range(0, len(y), batch_size):
            b = order[start:start + batch_size]
            grads = policy.grad_weighted(X[b], y[b], np.full(len(b), 1.0 / len(b)))
            opt.ascend(policy.params, grads)
    policy.greedy = True
    return policy


def plain_sr(policy: PlainPolicy, tasks, limits: Limits = Limits(), seed: int = 0) -> float:
    wins = sum(run_plain_episode(t, policy, limits, seed * 100_003 + i).success for i, t in enumerate(tasks))
    return wins / len(tasks)

