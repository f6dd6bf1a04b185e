"""The five capabilities (EG, OG, SD, AD in two modes, ES) with oracle, noisy and learned backends."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Any, Union

import numpy as np

from capita import env, vocab
from capita.env import (INVENTORY, Action, ActionFeedback, Clean, Close, Cool, GoTo, Heat, Invalid,
                        Observation, Open, Pick, Put, Slice, TurnOn)
from capita.grammar import parse_command
from capita.vocab import CLASSES, canonicalize, class_of, resolve

RELATIONS = ("target", "in", "on", "near")
FAILURE_REASONS = tuple(r for r in env.REASONS if r != "ok")


class ExplorationExhausted(RuntimeError):
    """Every candidate direction was tried for the current query."""


# ---------------------------------------------------------------------------
# types


@dataclass(frozen=True)
class Direction:
    relation: str
    object: str

    def __post_init__(self):
        if self.relation not in RELATIONS:
            raise ValueError(f"relation must be one of {RELATIONS}, got {self.relation!r}")

    def to_dict(self) -> dict:
        return {"relation": self.relation, "object": self.object}


@dataclass
class EGMemory:
    """Directions tried for the current query.

    ``max_sweeps`` bounds how many times the candidate list may be walked for one query;
    None allows unlimited re-sweeps (useful when grounding can report false negatives).
    """

    current_query: str = ""
    tried: list[Direction] = field(default_factory=list)
    sweeps: int = 1
    max_sweeps: int | None = 1

    def focus(self, query: str) -> None:
        if query != self.current_query:
            self.current_query = query
            self.tried = []
            self.sweeps = 1

    def tried_ids(self) -> set[str]:
        return {d.object for d in self.tried}


@dataclass(frozen=True)
class Found:
    label: str
    box: tuple[int, int, int, int]
    found = True

    def to_dict(self) -> dict:
        return {"found": True, "label": self.label, "box": list(self.box)}

    def text(self) -> str:
        return f"{self.label.lower()} found at {list(self.box)}"


@dataclass(frozen=True)
class NotFound:
    injected: bool = field(default=False, compare=False)
    found = False

    def to_dict(self) -> dict:
        return {"found": False}

    def text(self) -> str:
        return "target not found"


Grounding = Union[Found, NotFound]


@dataclass(frozen=True)
class ESSummary:
    success: bool
    reason: str
    text: str
    injected: bool = field(default=False, compare=False)

    def to_dict(self) -> dict:
        return {"success": self.success, "reason": self.reason, "text": self.text}


def feedback_from_dict(d: dict):
    if "found" in d:
        return Found(d["label"], tuple(d["box"])) if d["found"] else NotFound()
    return ESSummary(d["success"], d["reason"], d["text"])


@dataclass(frozen=True)
class Backend:
    """Capability implementations for one episode.

    With zero probabilities and no learned models this is the oracle. ``p_eg``, ``p_og``
    and ``p_es`` inject random directions, false negatives and spurious failure reports.
    ``eg_model``/``og_model`` replace the privileged EG/OG with learned ones.
    """

    p_eg: float = 0.0
    p_og: float = 0.0
    p_es: float = 0.0
    eg_model: Any = None
    og_model: Any = None

    def __post_init__(self):
        for name in ("p_eg", "p_og", "p_es"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")

    @property
    def kind(self) -> str:
        if self.eg_model is not None or self.og_model is not None:
            return "learned"
        return "noisy" if (self.p_eg or self.p_og or self.p_es) else "oracle"

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "p_eg": self.p_eg, "p_og": self.p_og, "p_es": self.p_es}
        if self.eg_model is not None:
            d["eg_model"] = self.eg_model.to_dict()
        if self.og_model is not None:
            d["og_model"] = self.og_model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Backend":
        eg = LearnedEG.from_dict(d["eg_model"]) if "eg_model" in d else None
        og = LearnedOG.from_dict(d["og_model"]) if "og_model" in d else None
        return cls(d["p_eg"], d["p_og"], d["p_es"], eg, og)


ORACLE = Backend()


@dataclass
class Knowledge:
    """What the agent has observed about its own situation: AD's conditioning input."""

    location: str = env.START
    holding: str | None = None
    open: dict[str, bool] = field(default_factory=dict)

    def update(self, obs: Observation) -> None:
        self.location = obs.location
        self.holding = obs.inventory
        for oid, props in obs.visible:
            p = dict(props)
            if "open" in p:
                self.open[oid] = p["open"]


# ---------------------------------------------------------------------------
# exploration guidance


def relation_to(rec_id: str) -> str:
    info = CLASSES[class_of(rec_id)]
    if not info.receptacle:
        return "near"
    return "on" if info.surface else "in"


def _oracle_ranking(cls: str | None, candidates: list[str], scene: env.SceneGraph, goals, profile: str
                    ) -> list[Direction]:
    ranked: list[Direction] = []
    cand = set(candidates)
    if cls is not None:
        if CLASSES[cls].receptacle and not CLASSES[cls].pickupable:
            ranked += [Direction("target", o.id) for o in scene.instances(cls) if o.id in cand]
        instances = [o for o in scene.instances(cls) if o.location != env.FLOOR and scene.root(o.id) != INVENTORY]
        instances.sort(key=lambda o: env.settles(scene, o, goals))
        for o in instances:
            root = scene.root(o.id)
            if profile == "composite" and o.id in cand and _reachable(scene, o.id):
                ranked.append(Direction("target", o.id))
            elif root in cand:
                ranked.append(Direction(relation_to(root), root))
    homes = CLASSES[cls].homes if cls else ()
    rest = sorted(candidates, key=lambda c: (class_of(c) not in homes, env._id_key(c)))
    ranked += [Direction(relation_to(c), c) for c in rest]
    return ranked


def _reachable(scene: env.SceneGraph, obj_id: str) -> bool:
    """Visible on arrival at its root: no closed openable anywhere up the chain."""
    loc = scene[obj_id].location
    while loc in scene.objects:
        holder = scene[loc]
        if holder.info.openable and not holder.open:
            return False
        loc = holder.location
    return True


def eg(query: str, candidates: list[str], memory: EGMemory, backend: Backend = ORACLE,
       scene: env.SceneGraph | None = None, rng: np.random.Generator | None = None,
       goals=(), profile: str = "atomic") -> Direction:
    """Next exploration direction for ``query`` among ``candidates``; never a tried one."""
    if not candidates:
        raise ValueError("exploration guidance needs at least one candidate")
    memory.focus(query)
    tried = memory.tried_ids()
    untried = [c for c in candidates if c not in tried]
    if not untried:
        if memory.max_sweeps is not None and memory.sweeps >= memory.max_sweeps:
            raise ExplorationExhausted(f"all {len(candidates)} directions tried for {query!r}")
        memory.sweeps += 1
        memory.tried = []
        untried = list(candidates)
    if backend.p_eg > 0 and rng.random() < backend.p_eg:
        pick = untried[int(rng.integers(len(untried)))]
        info = CLASSES[class_of(pick)]
        direction = Direction("target" if info.pickupable or not info.receptacle else relation_to(pick), pick)
    elif backend.eg_model is not None:
        direction = backend.eg_model.direct(query, untried)
    else:
        if scene is None:
            raise ValueError("oracle exploration guidance needs the scene graph")
        allowed = set(untried)
        direction = next(d for d in _oracle_ranking(canonicalize(query), candidates, scene, goals, profile)
                         if d.object in allowed)
    memory.tried.append(direction)
    return direction


# ---------------------------------------------------------------------------
# object grounding


def synthetic_box(scene_seed: int, obj_id: str) -> tuple[int, int, int, int]:
    h = hashlib.sha1(f"{scene_seed}:{obj_id}".encode()).digest()
    x0, y0 = h[0] * 400 // 255, h[1] * 400 // 255
    return (x0, y0, x0 + 1 + h[2] * 99 // 255, y0 + 1 + h[3] * 99 // 255)


def og(query: str, observation: Observation, backend: Backend = ORACLE, rng: np.random.Generator | None = None,
       scene_seed: int = 0, exclude=frozenset()) -> Grounding:
    """Ground ``query`` in the current observation.

    ``exclude`` holds instances the privileged grounder discounts because they already
    sit where a placement goal wants them (the second object of a pick-two task must be
    a different one).
    """
    if backend.og_model is not None:
        classes = backend.og_model.resolve(query)
    else:
        classes = resolve(query)
    match = next((oid for oid in observation.ids() if class_of(oid) in classes and oid not in exclude), None)
    if match is None:
        return NotFound()
    if backend.p_og > 0 and rng.random() < backend.p_og:
        return NotFound(injected=True)
    return Found(class_of(match), synthetic_box(scene_seed, match))


# ---------------------------------------------------------------------------
# state description


def _settled(obj_id: str, location: str, goals) -> bool:
    if location in (env.INVENTORY, env.FLOOR):
        return False
    here = class_of(location)
    cls = class_of(obj_id)
    return any(isinstance(g, (env.In, env.On, env.CountIn)) and g.cls == cls and g.rec == here for g in goals)


def sd(target_class: str | None, observation: Observation, goals=()) -> tuple[tuple, ...]:
    """Relation and property facts about the target instance, restricted to what is observed.

    The held instance wins; otherwise the first visible instance not already sitting
    where a goal wants it.
    """
    if target_class is None:
        return ()
    visible = [oid for oid in observation.ids() if class_of(oid) == target_class]
    if not visible:
        return ()
    inv = observation.inventory
    if inv in visible:
        target = inv
    else:
        props = {oid: observation.props(oid) for oid in visible}
        target = sorted(visible, key=lambda oid: _settled(oid, props[oid]["location"], goals))[0]
    return _describe(target, observation)


def _describe(target: str, observation: Observation) -> tuple[tuple, ...]:
    facts: list[tuple] = []
    ids = set(observation.ids())
    chain = target
    while True:
        p = observation.props(chain)
        loc = p["location"]
        if loc == INVENTORY:
            facts.append(("holding", chain, ""))
            break
        if loc not in ids:
            break
        facts.append((relation_to(loc) if relation_to(loc) != "near" else "in", chain, loc))
        lp = observation.props(loc)
        if "open" in lp:
            facts.append(("open", loc, lp["open"]))
        if lp["location"] == env.FLOOR:
            break
        chain = loc
    p = observation.props(target)
    if "open" in p and not any(f[0] == "open" and f[1] == target for f in facts):
        facts.append(("open", target, p["open"]))
    if p.get("temperature", "room") != "room":
        facts.append(("temperature", target, p["temperature"]))
    for prop in ("clean", "sliced", "powered"):
        if p.get(prop):
            facts.append((prop, target, True))
    return tuple(facts)


def render_facts(facts: tuple[tuple, ...]) -> str:
    if not facts:
        return "Nothing relevant is observed."
    out = []
    for rel, a, b in facts:
        if rel == "holding":
            out.append(f"You are holding {a}.")
        elif rel in ("in", "on"):
            out.append(f"{a} is {rel} {b}.")
        elif rel == "open":
            out.append(f"{a} is {'open' if b else 'closed'}.")
        elif rel == "temperature":
            out.append(f"{a} is {b}.")
        else:
            out.append(f"{a} is {rel}.")
    return " ".join(out)


# ---------------------------------------------------------------------------
# action decomposition


def ad_explore(direction: Direction, known_ids, knowledge: Knowledge) -> list[Action]:
    """Navigation actions realizing an exploration direction."""
    target = direction.object
    if target not in known_ids:
        return [Invalid(f"go to {target}")]
    actions: list[Action] = [GoTo(target)]
    if direction.relation != "target" and CLASSES[class_of(target)].openable and not knowledge.open.get(target):
        actions.append(Open(target))
    return actions


def _resolve_id(cls: str | None, facts, observation: Observation | None, knowledge: Knowledge,
                receptacles) -> str | None:
    if cls is None:
        return None
    if knowledge.holding and class_of(knowledge.holding) == cls:
        return knowledge.holding
    if CLASSES[cls].receptacle and not CLASSES[cls].pickupable:
        if class_of(knowledge.location) == cls:
            return knowledge.location
    for f in facts:
        if f[0] in ("in", "on", "holding") and class_of(f[1]) == cls:
            return f[1]
    for f in facts:
        if f[0] in ("in", "on") and class_of(f[2]) == cls:
            return f[2]
    if observation is not None:
        for oid in observation.ids():
            if class_of(oid) == cls:
                return oid
    for r in receptacles:
        if class_of(r) == cls:
            return r
    return f"{cls} 1"


def _where(obj_id: str, facts) -> tuple[str | None, str | None]:
    """(direct holder, root receptacle) of an instance according to the facts."""
    parent = {f[1]: f[2] for f in facts if f[0] in ("in", "on")}
    if obj_id not in parent:
        return None, None
    src = root = parent[obj_id]
    while root in parent:
        root = parent[root]
    return src, root


def ad_manip(command: str, facts, knowledge: Knowledge, profile: str, *, observation: Observation | None = None,
             receptacles=()) -> list[Action]:
    """Atomic actions that carry out a manipulation command."""
    parsed = parse_command(command)
    if parsed is None:
        return [Invalid(command)]
    category, phrases = parsed
    classes = [canonicalize(p) for p in phrases]
    if any(c is None for c in classes):
        return [Invalid(command)]
    ids = [_resolve_id(c, facts, observation, knowledge, receptacles) for c in classes]
    here = knowledge.location
    held = knowledge.holding
    out: list[Action] = []

    def go(place: str | None):
        if place and place != here:
            out.append(GoTo(place))

    def ensure_open(rec: str | None):
        if rec and class_of(rec) in CLASSES and CLASSES[class_of(rec)].openable and not knowledge.open.get(rec):
            out.append(Open(rec))

    if category == "grasp":
        obj = ids[0]
        if held == obj:
            return []
        src, root = _where(obj, facts)
        if held is not None and src == held:
            return [Put(held, here), Pick(obj, held)]
        src = src or here
        root = root or here
        go(root)
        ensure_open(root)
        if src != root:
            ensure_open(src)
        if held is not None:
            out.append(Put(held, root))
        out.append(Pick(obj, src))
        return out

    if category == "put":
        obj, dst = ids
        obj = held if held and class_of(held) == classes[0] else obj
        go(dst)
        ensure_open(dst)
        out.append(Put(obj, dst))
        return out

    if category == "put-and-grasp":
        obj, cont = ids
        obj = held if held and class_of(held) == classes[0] else obj
        _, root = _where(cont, facts)
        root = root or here
        go(root)
        ensure_open(root)
        return out + [Put(obj, cont), Pick(cont, root)]

    if category == "turn-on":
        dev = ids[0]
        _, root = _where(dev, facts)
        go(root or (dev if CLASSES[classes[0]].receptacle else None))
        out.append(TurnOn(dev))
        return out

    if category == "slice":
        return [Slice(ids[0])]

    obj, tool = ids
    kind = category.split("-")[0]
    go(tool)
    if profile == "atomic":
        out.append({"heat": Heat, "cool": Cool, "clean": Clean}[kind](obj, tool))
        return out
    if kind == "clean":
        return out + [Put(obj, tool), TurnOn(tool), Pick(obj, tool)]
    ensure_open(tool)
    out += [Put(obj, tool), Close(tool)]
    if kind == "heat":
        out.append(TurnOn(tool))
    return out + [Open(tool), Pick(obj, tool), Close(tool)]


# ---------------------------------------------------------------------------
# execution summary


def es(command: str, history: list[tuple[Action, ActionFeedback]], backend: Backend = ORACLE,
       rng: np.random.Generator | None = None) -> ESSummary:
    """Summarize the outcome of the preceding AD invocation."""
    failure = next((fb for _, fb in history if not fb.success), None)
    if failure is not None:
        return ESSummary(False, failure.reason, f"You failed to {command}: {failure.reason}.")
    if backend.p_es > 0 and rng.random() < backend.p_es:
        reason = FAILURE_REASONS[int(rng.integers(len(FAILURE_REASONS)))]
        return ESSummary(False, reason, f"You failed to {command}: {reason}.", injected=True)
    return ESSummary(True, "ok", f"You successfully {command}.")


# ---------------------------------------------------------------------------
# learned EG/OG


@dataclass
class LearnedEG:
    """Class-conditional prior over receptacle classes, fit from EG supervision."""

    counts: dict[str, dict[str, float]] = field(default_factory=dict)

    def fit(self, pairs) -> "LearnedEG":
        for query, rec in pairs:
            cls = canonicalize(query) or query
            row = self.counts.setdefault(cls, {})
            row[class_of(rec)] = row.get(class_of(rec), 0.0) + 1.0
        return self

    def direct(self, query: str, untried: list[str]) -> Direction:
        row = self.counts.get(canonicalize(query) or query, {})
        best = max(untried, key=lambda c: (row.get(class_of(c), 0.0), -untried.index(c)))
        return Direction("target" if not CLASSES[class_of(best)].receptacle else relation_to(best), best)

    def to_dict(self) -> dict:
        return {"counts": {k: dict(sorted(v.items())) for k, v in sorted(self.counts.items())}}

    @classmethod
    def from_dict(cls, d: dict) -> "LearnedEG":
        return cls({k: dict(v) for k, v in d["counts"].items()})


@dataclass
class LearnedOG:
    """Phrase-to-class lookup table memorized from OG supervision."""

    table: dict[str, str] = field(default_factory=dict)

    def fit(self, pairs) -> "LearnedOG":
        for phrase, label in pairs:
            self.table.setdefault(vocab.normalize(phrase), label)
        return self

    def resolve(self, query: str) -> tuple[str, ...]:
        hit = self.table.get(vocab.normalize(query))
        return (hit,) if hit else ()

    def to_dict(self) -> dict:
        return {"table": dict(sorted(self.table.items()))}

    @classmethod
    def from_dict(cls, d: dict) -> "LearnedOG":
        return cls(dict(d["table"]))
