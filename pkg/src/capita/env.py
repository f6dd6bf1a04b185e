"""Symbolic household world: scenes, tasks, the transition function and goal checks.

Navigation is teleportation between receptacles. Objects live in exactly one place: a
receptacle, the agent's inventory, or (for fixed receptacles) the floor. Movable
containers (bowls, plates, pots) may hold one level of small objects.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, Iterable, Union

import numpy as np

from capita import vocab
from capita.vocab import CLASSES, class_of

SCENE_SCHEMA = "capita/scene@1"
TASK_SCHEMA = "capita/task@1"

INVENTORY = "agent-inventory"
FLOOR = "floor"
START = "start"

PROFILES = ("atomic", "composite")
BASE_CATEGORIES = ("pick&place", "pick-two", "stack&place", "clean", "heat", "cool", "examine")
COMPOSITE = "composite"

REASONS = ("ok", "not-at-location", "target-not-visible", "receptacle-closed", "inventory-full",
           "inventory-empty", "wrong-tool", "precondition-violated", "unknown-action")

BUDGETS = {"atomic": (50, 50), "composite": (30, 10)}
SLICE_COUNT = 2


class ConfigError(ValueError):
    pass


class InstantiationError(ValueError):
    pass


class CompositionError(ValueError):
    pass


# ---------------------------------------------------------------------------
# state


@dataclass(frozen=True)
class ObjectInstance:
    id: str
    cls: str
    location: str
    open: bool = False
    powered: bool = False
    temperature: str = "room"
    clean: bool = False
    sliced: bool = False
    examined: bool = False

    @property
    def info(self):
        return CLASSES[self.cls]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class SceneConfig:
    receptacles: int = 12
    objects: int = 20

    def validate(self) -> None:
        if self.receptacles <= 0:
            raise ConfigError("scene config needs at least one receptacle (got 0)")
        if self.receptacles < 3:
            raise ConfigError(f"scene config needs >= 3 receptacles (got {self.receptacles})")
        if self.objects < 5:
            raise ConfigError(f"scene config needs >= 5 objects (got {self.objects})")


@dataclass(frozen=True)
class SceneGraph:
    seed: int
    config: SceneConfig
    objects: dict[str, ObjectInstance]
    receptacles: tuple[str, ...]
    tools: dict[str, str] = field(default_factory=lambda: dict(vocab.TOOLS))

    def __getitem__(self, obj_id: str) -> ObjectInstance:
        return self.objects[obj_id]

    def __contains__(self, obj_id: str) -> bool:
        return obj_id in self.objects

    def instances(self, cls: str) -> list[ObjectInstance]:
        return sorted((o for o in self.objects.values() if o.cls == cls), key=lambda o: _id_key(o.id))

    def contents(self, rec_id: str) -> list[ObjectInstance]:
        return sorted((o for o in self.objects.values() if o.location == rec_id), key=lambda o: _id_key(o.id))

    def root(self, obj_id: str) -> str:
        """Fixed receptacle an object ultimately rests in (itself for receptacles)."""
        o = self.objects[obj_id]
        if o.location == FLOOR:
            return o.id
        if o.location == INVENTORY:
            return INVENTORY
        return self.root(o.location)

    def inventory(self) -> str | None:
        for o in self.objects.values():
            if o.location == INVENTORY:
                return o.id
        return None

    def replace(self, *objs: ObjectInstance, remove: Iterable[str] = ()) -> "SceneGraph":
        new = dict(self.objects)
        for r in remove:
            del new[r]
        for o in objs:
            new[o.id] = o
        return dataclasses.replace(self, objects=new)

    def to_dict(self) -> dict:
        return {
            "schema": SCENE_SCHEMA,
            "seed": self.seed,
            "config": dataclasses.asdict(self.config),
            "receptacles": list(self.receptacles),
            "tools": dict(sorted(self.tools.items())),
            "objects": [self.objects[k].to_dict() for k in sorted(self.objects, key=_id_key)],
        }

    def serialize(self) -> str:
        return canonical_json(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "SceneGraph":
        if d.get("schema") != SCENE_SCHEMA:
            raise ValueError(f"unsupported scene schema {d.get('schema')!r}")
        objs = {o["id"]: ObjectInstance(**o) for o in d["objects"]}
        return cls(d["seed"], SceneConfig(**d["config"]), objs, tuple(d["receptacles"]), dict(d["tools"]))


@dataclass(frozen=True)
class AgentState:
    location: str = START
    profile: str = "atomic"


def _id_key(obj_id: str) -> tuple[str, int]:
    name, _, idx = obj_id.rpartition(" ")
    return (name, int(idx)) if idx.isdigit() else (obj_id, 0)


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


# ---------------------------------------------------------------------------
# actions


@dataclass(frozen=True)
class GoTo:
    target: str


@dataclass(frozen=True)
class Open:
    obj: str


@dataclass(frozen=True)
class Close:
    obj: str


@dataclass(frozen=True)
class TurnOn:
    obj: str


@dataclass(frozen=True)
class Pick:
    obj: str
    src: str


@dataclass(frozen=True)
class Put:
    obj: str
    dst: str


@dataclass(frozen=True)
class Slice:
    obj: str


@dataclass(frozen=True)
class Heat:
    obj: str
    tool: str


@dataclass(frozen=True)
class Cool:
    obj: str
    tool: str


@dataclass(frozen=True)
class Clean:
    obj: str
    tool: str


@dataclass(frozen=True)
class Invalid:
    text: str


Action = Union[GoTo, Open, Close, TurnOn, Pick, Put, Slice, Heat, Cool, Clean, Invalid]

_VERBS = {GoTo: "go to", Open: "open", Close: "close", TurnOn: "use", Pick: "take", Put: "put",
          Slice: "slice", Heat: "heat", Cool: "cool", Clean: "clean"}
_LINKS = {Pick: "from", Put: "to", Heat: "with", Cool: "with", Clean: "with"}


def action_text(a: Action, verbs: dict[str, str] | None = None) -> str:
    """ALFWorld-style surface form, e.g. 'take Apple 1 from Fridge 1'."""
    if isinstance(a, Invalid):
        return a.text
    verb = _VERBS[type(a)]
    if verbs:
        verb = verbs.get(verb, verb)
    fields = dataclasses.astuple(a)
    if len(fields) == 1:
        return f"{verb} {fields[0]}"
    return f"{verb} {fields[0]} {_LINKS[type(a)]} {fields[1]}"


def parse_action(text: str, verbs: dict[str, str] | None = None) -> Action:
    """Inverse of :func:`action_text`; unparseable text becomes ``Invalid``."""
    verbs = verbs or {}
    forms = [(cls, verbs.get(verb, verb)) for cls, verb in _VERBS.items()]
    for cls, surface in sorted(forms, key=lambda kv: -len(kv[1])):
        if not text.startswith(surface + " "):
            continue
        rest = text[len(surface) + 1:]
        if cls in _LINKS:
            a, sep, b = rest.partition(f" {_LINKS[cls]} ")
            if sep and a and b:
                return cls(a, b)
            continue
        return cls(rest)
    return Invalid(text)


def action_to_dict(a: Action) -> dict:
    return {"type": type(a).__name__, **dataclasses.asdict(a)}


def action_from_dict(d: dict) -> Action:
    kinds = {c.__name__: c for c in (GoTo, Open, Close, TurnOn, Pick, Put, Slice, Heat, Cool, Clean, Invalid)}
    d = dict(d)
    return kinds[d.pop("type")](**d)


@dataclass(frozen=True)
class ActionFeedback:
    success: bool
    reason: str = "ok"

    def __post_init__(self):
        if self.reason not in REASONS:
            raise ValueError(f"unknown reason {self.reason!r}")
        if self.success != (self.reason == "ok"):
            raise ValueError("success must coincide with reason 'ok'")


OK = ActionFeedback(True, "ok")


def _fail(reason: str) -> ActionFeedback:
    return ActionFeedback(False, reason)


# ---------------------------------------------------------------------------
# scene construction

_REQUIRED_RECEPTACLES = ("CounterTop", "Fridge", "Microwave", "SinkBasin", "Desk")
_EXTRA_RECEPTACLES = ("Cabinet", "Cabinet", "Drawer", "Drawer", "Shelf", "SideTable", "DiningTable",
                      "Dresser", "Sofa", "ArmChair", "GarbageCan", "CounterTop", "Cabinet", "Drawer")
# guarantees every base category has a candidate under the default config
_REQUIRED_OBJECTS = ("Apple", "Tomato", "Mug", "Mug", "Book", "Bowl", "Potato", "Cup")


def build_scene(seed: int, config: SceneConfig | None = None) -> SceneGraph:
    config = config or SceneConfig()
    config.validate()
    rng = np.random.default_rng([seed, 0x5CE7E])

    rec_classes = list(_REQUIRED_RECEPTACLES[:config.receptacles])
    extras = list(_EXTRA_RECEPTACLES)
    while len(rec_classes) < config.receptacles:
        if not extras:
            extras = list(_EXTRA_RECEPTACLES)
        rec_classes.append(extras.pop(int(rng.integers(len(extras)))))

    objects: dict[str, ObjectInstance] = {}
    counts: dict[str, int] = {}

    def new_id(cls: str) -> str:
        counts[cls] = counts.get(cls, 0) + 1
        return f"{cls} {counts[cls]}"

    receptacles = []
    for cls in rec_classes:
        rid = new_id(cls)
        receptacles.append(rid)
        objects[rid] = ObjectInstance(rid, cls, FLOOR)

    def place(cls: str) -> str:
        homes = [r for r in receptacles if class_of(r) in CLASSES[cls].homes]
        pool = homes if homes and rng.random() < 0.85 else receptacles
        return pool[int(rng.integers(len(pool)))]

    if "Desk" in rec_classes:
        lid = new_id(vocab.LAMP)
        objects[lid] = ObjectInstance(lid, vocab.LAMP, next(r for r in receptacles if class_of(r) == "Desk"))

    movable = list(_REQUIRED_OBJECTS[:config.objects])
    pool = list(vocab.SMALL_OBJECTS) + list(vocab.CONTAINERS)
    while len(movable) < config.objects:
        movable.append(pool[int(rng.integers(len(pool)))])
    for cls in movable:
        oid = new_id(cls)
        objects[oid] = ObjectInstance(oid, cls, place(cls))

    return SceneGraph(seed, config, objects, tuple(receptacles))


# ---------------------------------------------------------------------------
# goals


@dataclass(frozen=True)
class In:
    cls: str
    rec: str


@dataclass(frozen=True)
class On:
    cls: str
    rec: str


@dataclass(frozen=True)
class Prop:
    cls: str
    prop: str
    value: Any


@dataclass(frozen=True)
class CountIn:
    cls: str
    rec: str
    n: int


@dataclass(frozen=True)
class ExaminedUnderLamp:
    cls: str


Goal = Union[In, On, Prop, CountIn, ExaminedUnderLamp]
_GOAL_TYPES = {c.__name__: c for c in (In, On, Prop, CountIn, ExaminedUnderLamp)}


def goal_to_dict(g: Goal) -> dict:
    return {"type": type(g).__name__, **dataclasses.asdict(g)}


def goal_from_dict(d: dict) -> Goal:
    d = dict(d)
    return _GOAL_TYPES[d.pop("type")](**d)


def goal_holds(scene: SceneGraph, g: Goal) -> bool:
    objs = scene.objects
    if isinstance(g, (In, On)):
        return any(o.cls == g.cls and o.location in objs and objs[o.location].cls == g.rec
                   for o in objs.values())
    if isinstance(g, CountIn):
        n = sum(1 for o in objs.values()
                if o.cls == g.cls and o.location in objs and objs[o.location].cls == g.rec)
        return n >= g.n
    if isinstance(g, Prop):
        return any(o.cls == g.cls and getattr(o, g.prop) == g.value for o in objs.values())
    if isinstance(g, ExaminedUnderLamp):
        return any(o.cls == g.cls and o.examined for o in objs.values())
    raise TypeError(g)


def check_goals(scene: SceneGraph, goals: list[Goal]) -> tuple[list[Goal], bool, float]:
    satisfied = [g for g in goals if goal_holds(scene, g)]
    ssr = len(satisfied) / len(goals) if goals else 0.0
    return satisfied, len(satisfied) == len(goals), ssr


def settles(scene: SceneGraph, obj: ObjectInstance, goals: Iterable[Goal]) -> bool:
    """True if the instance already sits where some placement goal wants its class."""
    if obj.location not in scene.objects:
        return False
    here = scene.objects[obj.location].cls
    return any(isinstance(g, (In, On, CountIn)) and g.cls == obj.cls and g.rec == here for g in goals)


# ---------------------------------------------------------------------------
# transition function


def _visible_ids(scene: SceneGraph, agent: AgentState) -> set[str]:
    ids: set[str] = set()
    inv = scene.inventory()
    if inv:
        ids.add(inv)
        ids.update(o.id for o in scene.contents(inv))
    loc = agent.location
    if loc == START or loc not in scene.objects:
        return ids
    rec = scene.objects[loc]
    ids.add(loc)
    if rec.info.openable and not rec.open:
        return ids
    for o in scene.contents(loc):
        ids.add(o.id)
        if o.info.receptacle and not (o.info.openable and not o.open):
            ids.update(c.id for c in scene.contents(o.id))
    return ids


def step(scene: SceneGraph, agent: AgentState, action: Action) -> tuple[SceneGraph, AgentState, ActionFeedback]:
    """Apply one atomic action. Failures leave scene and agent untouched."""
    result = _apply(scene, agent, action)
    if isinstance(result, ActionFeedback):
        return scene, agent, result
    return result[0], result[1], OK


def _apply(scene, agent, a):
    objs = scene.objects
    profile = agent.profile
    if isinstance(a, Invalid):
        return _fail("unknown-action")
    if isinstance(a, (Heat, Cool, Clean)) and profile != "atomic":
        return _fail("unknown-action")
    if isinstance(a, Slice) and profile != "composite":
        return _fail("unknown-action")
    for ref in dataclasses.astuple(a):
        if ref not in objs:
            return _fail("unknown-action")

    inv = scene.inventory()
    visible = _visible_ids(scene, agent)

    if isinstance(a, GoTo):
        t = objs[a.target]
        if t.location == FLOOR:
            return scene, dataclasses.replace(agent, location=t.id)
        if profile == "composite" and t.location != INVENTORY:
            return scene, dataclasses.replace(agent, location=scene.root(t.id))
        return _fail("precondition-violated")

    if isinstance(a, (Open, Close)):
        o = objs[a.obj]
        if o.id not in visible:
            return _fail("not-at-location" if o.location == FLOOR else "target-not-visible")
        if not o.info.openable or o.open == isinstance(a, Open):
            return _fail("precondition-violated")
        return scene.replace(dataclasses.replace(o, open=isinstance(a, Open))), agent

    if isinstance(a, TurnOn):
        o = objs[a.obj]
        if o.id not in visible:
            return _fail("not-at-location" if o.location == FLOOR else "target-not-visible")
        if not o.info.toggleable:
            return _fail("precondition-violated")
        changed = [dataclasses.replace(o, powered=True)]
        if o.cls == vocab.LAMP and inv:
            changed.append(dataclasses.replace(objs[inv], examined=True))
        if profile == "composite":
            if o.cls == "Microwave" and not o.open:
                changed += [dataclasses.replace(c, temperature="hot") for c in scene.contents(o.id)
                            if c.info.heatable]
            if o.cls == "SinkBasin":
                changed += [dataclasses.replace(c, clean=True) for c in scene.contents(o.id) if c.info.cleanable]
        return scene.replace(*changed), agent

    if isinstance(a, Pick):
        o = objs[a.obj]
        if inv is not None:
            return _fail("inventory-full")
        if o.location == INVENTORY or scene.root(o.id) != agent.location:
            return _fail("not-at-location")
        src = objs[a.src]
        container = objs[o.location] if o.location in objs else None
        if container is not None and container.info.openable and not container.open:
            return _fail("receptacle-closed")
        if o.id not in visible:
            return _fail("target-not-visible")
        if o.location != src.id or not o.info.pickupable:
            return _fail("precondition-violated")
        return scene.replace(dataclasses.replace(o, location=INVENTORY)), agent

    if isinstance(a, Put):
        if inv is None:
            return _fail("inventory-empty")
        o, dst = objs[a.obj], objs[a.dst]
        if inv != o.id or not dst.info.receptacle or dst.id == o.id:
            return _fail("precondition-violated")
        if dst.location == INVENTORY or scene.root(dst.id) != agent.location:
            return _fail("not-at-location")
        if dst.info.openable and not dst.open:
            return _fail("receptacle-closed")
        if dst.info.pickupable and o.info.receptacle:
            return _fail("precondition-violated")
        moved = dataclasses.replace(o, location=dst.id)
        if profile == "composite":
            if dst.cls == "Fridge" and moved.info.coolable:
                moved = dataclasses.replace(moved, temperature="cold")
            if dst.cls == "SinkBasin" and dst.powered and moved.info.cleanable:
                moved = dataclasses.replace(moved, clean=True)
        return scene.replace(moved), agent

    if isinstance(a, Slice):
        o = objs[a.obj]
        if inv is None or class_of(inv) != "Knife":
            return _fail("precondition-violated")
        if o.id not in visible:
            return _fail("target-not-visible")
        if not o.info.sliceable or o.sliced or o.location == INVENTORY:
            return _fail("precondition-violated")
        top = max(_id_key(k)[1] for k in objs if class_of(k) == o.cls)
        pieces = [dataclasses.replace(o, id=f"{o.cls} {top + i + 1}", sliced=True) for i in range(SLICE_COUNT)]
        return scene.replace(*pieces, remove=[o.id]), agent

    if isinstance(a, (Heat, Cool, Clean)):
        if inv is None:
            return _fail("inventory-empty")
        o, tool = objs[a.obj], objs[a.tool]
        kind = {Heat: "heat", Cool: "cool", Clean: "clean"}[type(a)]
        if inv != o.id:
            return _fail("precondition-violated")
        if tool.cls != scene.tools[kind]:
            return _fail("wrong-tool")
        if agent.location != tool.id:
            return _fail("not-at-location")
        info = o.info
        if kind == "heat" and info.heatable:
            return scene.replace(dataclasses.replace(o, temperature="hot")), agent
        if kind == "cool" and info.coolable:
            return scene.replace(dataclasses.replace(o, temperature="cold")), agent
        if kind == "clean" and info.cleanable:
            return scene.replace(dataclasses.replace(o, clean=True)), agent
        return _fail("precondition-violated")

    raise TypeError(f"unhandled action {a!r}")


# ---------------------------------------------------------------------------
# observation


@dataclass(frozen=True)
class Observation:
    visible: tuple[tuple[str, tuple[tuple[str, Any], ...]], ...]
    location: str
    inventory: str | None

    def ids(self) -> list[str]:
        return [v[0] for v in self.visible]

    def props(self, obj_id: str) -> dict:
        for vid, props in self.visible:
            if vid == obj_id:
                return dict(props)
        raise KeyError(obj_id)

    def to_dict(self) -> dict:
        return {"location": self.location, "inventory": self.inventory,
                "visible": [{"id": i, **dict(p)} for i, p in self.visible]}


def surfaced(o: ObjectInstance) -> tuple[tuple[str, Any], ...]:
    info = o.info
    props: list[tuple[str, Any]] = [("class", o.cls), ("location", o.location)]
    if info.openable:
        props.append(("open", o.open))
    if info.toggleable:
        props.append(("powered", o.powered))
    if info.heatable or info.coolable:
        props.append(("temperature", o.temperature))
    if info.cleanable:
        props.append(("clean", o.clean))
    if info.sliceable:
        props.append(("sliced", o.sliced))
    return tuple(props)


def observe(scene: SceneGraph, agent: AgentState) -> Observation:
    ids = sorted(_visible_ids(scene, agent), key=_id_key)
    return Observation(tuple((i, surfaced(scene.objects[i])) for i in ids), agent.location, scene.inventory())


# ---------------------------------------------------------------------------
# tasks

_TEMPLATES = {
    "pick&place": "put some {obj} {rel} {rec}",
    "pick-two": "find two {obj} and put them in {rec}",
    "stack&place": "put some {obj} in a {container} and put them in {rec}",
    "clean": "clean some {obj} and put it in {rec}",
    "heat": "heat some {obj} and put it in {rec}",
    "cool": "cool some {obj} and put it in {rec}",
    "examine": "look at {obj} under the {lamp}",
}


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    category: str
    instruction: str
    goals: tuple[Goal, ...]
    scene_seed: int
    scene_config: SceneConfig
    profile: str
    step_budget: int
    invalid_budget: int
    targets: tuple[tuple[str, str], ...]          # role -> instance id (privileged)
    components: tuple[str, ...] = ()               # base categories of a composite task
    plan: tuple = ()                               # expert sub-plans, filled by instantiate_task

    def __post_init__(self):
        if not self.goals:
            raise ValueError("task must have at least one goal")
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}")

    @property
    def target_map(self) -> dict[str, str]:
        return dict(self.targets)

    def scene(self) -> SceneGraph:
        return build_scene(self.scene_seed, self.scene_config)

    def base_categories(self) -> tuple[str, ...]:
        return self.components if self.category == COMPOSITE else (self.category,)

    def to_dict(self) -> dict:
        from capita.expert import subplan_to_dict
        return {
            "schema": TASK_SCHEMA,
            "task_id": self.task_id,
            "category": self.category,
            "instruction": self.instruction,
            "goals": [goal_to_dict(g) for g in self.goals],
            "scene": {"seed": self.scene_seed, "config": dataclasses.asdict(self.scene_config)},
            "profile": self.profile,
            "step_budget": self.step_budget,
            "invalid_budget": self.invalid_budget,
            "targets": [list(t) for t in self.targets],
            "components": list(self.components),
            "expert_plan": [subplan_to_dict(s) for s in self.plan],
        }

    def serialize(self) -> str:
        return canonical_json(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        from capita.expert import subplan_from_dict
        if d.get("schema") != TASK_SCHEMA:
            raise ValueError(f"unsupported task schema {d.get('schema')!r}")
        return cls(d["task_id"], d["category"], d["instruction"], tuple(goal_from_dict(g) for g in d["goals"]),
                   d["scene"]["seed"], SceneConfig(**d["scene"]["config"]), d["profile"], d["step_budget"],
                   d["invalid_budget"], tuple(tuple(t) for t in d["targets"]), tuple(d["components"]),
                   tuple(subplan_from_dict(s) for s in d["expert_plan"]))


def _pick(rng: np.random.Generator, items: list):
    return items[int(rng.integers(len(items)))]


def _dest_classes(scene: SceneGraph, obj_cls: str, exclude: Iterable[str] = ()) -> list[str]:
    """Fixed receptacle classes holding no instance of ``obj_cls`` yet."""
    out = []
    for r in scene.receptacles:
        rc = class_of(r)
        if rc in exclude or rc in out or rc in scene.tools.values() or rc == "GarbageCan":
            continue
        if any(goal_holds(scene, g) for g in (In(obj_cls, rc),)):
            continue
        out.append(rc)
    return out


def _require(cond: bool, category: str, missing: str) -> None:
    if not cond:
        raise InstantiationError(f"cannot instantiate {category}: scene lacks {missing}")


def instantiate_task(category: str, scene: SceneGraph, rng: np.random.Generator, profile: str = "atomic",
                     *, obj: str | None = None, rec: str | None = None, avoid: Iterable[str] = (),
                     task_id: str | None = None, verify: bool = True) -> TaskSpec:
    """Draw a feasible task of ``category`` in ``scene``.

    ``obj``/``rec`` pin the target classes; otherwise they are sampled from what the scene
    offers. ``avoid`` lists instances the task must not claim as its target object (used
    when composing tasks over distinct instances). The expert plan is attached and
    verified by oracle simulation.
    """
    avoid = set(avoid)
    if category not in BASE_CATEGORIES:
        raise InstantiationError(f"unknown category {category!r}")
    present: dict[str, list[str]] = {}
    for o in sorted(scene.objects.values(), key=lambda o: _id_key(o.id)):
        if o.location != FLOOR:
            present.setdefault(o.cls, []).append(o.id)
    free = {c: [i for i in ids if i not in avoid] for c, ids in present.items()}

    def candidates(pred) -> list[str]:
        return sorted(c for c in present if pred(CLASSES[c]))

    def choose_obj(pred, what: str, need: int = 1) -> str:
        if obj is not None:
            _require(obj in CLASSES and len(free.get(obj, [])) >= need and pred(CLASSES[obj]), category,
                     f"{need} x {obj}" if need > 1 else obj)
            return obj
        pool = [c for c in candidates(pred) if len(free[c]) >= need]
        _require(bool(pool), category, what)
        return _pick(rng, pool)

    def choose_rec(obj_cls: str, exclude=()) -> str:
        pool = _dest_classes(scene, obj_cls, exclude)
        if rec is not None:
            _require(rec in pool, category, f"a free {rec}")
            return rec
        _require(bool(pool), category, f"a receptacle free of {obj_cls}")
        homes = [r for r in pool if r in CLASSES[obj_cls].homes]
        return _pick(rng, homes if homes and rng.random() < 0.5 else pool)

    def first(cls: str) -> str:
        return present[cls][0] if cls in present else scene.instances(cls)[0].id

    targets: dict[str, str] = {}
    small = lambda i: i.pickupable and not i.receptacle
    if category == "pick&place":
        o = choose_obj(small, "a pickupable object")
        r = choose_rec(o)
        rel = "on" if CLASSES[r].surface else "in"
        goals = [On(o, r) if rel == "on" else In(o, r)]
        text = _TEMPLATES[category].format(obj=o.lower(), rel=rel, rec=r.lower())
    elif category == "pick-two":
        o = choose_obj(small, "two instances of one class", need=2)
        r = choose_rec(o)
        goals = [CountIn(o, r, 2)]
        text = _TEMPLATES[category].format(obj=o.lower(), rec=r.lower())
    elif category == "stack&place":
        o = choose_obj(lambda i: i.stackable, "a stackable object")
        conts = [c for c in vocab.CONTAINERS if c in present and not any(
            scene.contents(i) for i in present[c])]
        _require(bool(conts), category, "an empty movable container")
        c = _pick(rng, conts)
        r = choose_rec(c)
        goals = [In(o, c), In(c, r)]
        targets["container"] = first(c)
        text = _TEMPLATES[category].format(obj=o.lower(), container=c.lower(), rec=r.lower())
    elif category in ("clean", "heat", "cool"):
        tool = scene.tools[category]
        flag = {"clean": "cleanable", "heat": "heatable", "cool": "coolable"}[category]
        _require(any(class_of(r) == tool for r in scene.receptacles), category, tool)
        o = choose_obj(lambda i: small(i) and getattr(i, flag), f"a {flag} object")
        r = choose_rec(o)
        prop = Prop(o, "clean", True) if category == "clean" else Prop(
            o, "temperature", "hot" if category == "heat" else "cold")
        goals = [prop, In(o, r)]
        targets["tool"] = first(tool)
        text = _TEMPLATES[category].format(obj=o.lower(), rec=r.lower())
    else:  # examine
        _require(vocab.LAMP in present, category, vocab.LAMP)
        o = choose_obj(lambda i: i.examinable, "an examinable object")
        goals = [ExaminedUnderLamp(o)]
        targets["lamp"] = first(vocab.LAMP)
        r = None
        text = _TEMPLATES[category].format(obj=o.lower(), lamp=vocab.LAMP.lower())
    targets["object"] = free[o][0]
    if r is not None:
        targets["receptacle"] = first(r) if r in present else scene.instances(r)[0].id

    steps, invalid = BUDGETS[profile]
    tid = task_id or f"{category}-{profile}-{scene.seed}-{o}-{r or 'lamp'}"
    task = TaskSpec(tid, category, text, tuple(goals), scene.seed, scene.config, profile, steps, invalid,
                    tuple(sorted(targets.items())))
    from capita.expert import PlanningError, plan
    try:
        expert_plan = plan(task, scene, verify=verify)
    except PlanningError as e:
        raise InstantiationError(f"cannot instantiate {category}: {e}") from e
    return dataclasses.replace(task, plan=expert_plan.subplans)


def _target_objects(task: TaskSpec) -> set[str]:
    return {v for k, v in task.targets if k.rsplit(".", 1)[-1] == "object"}


def _conflicts(a: TaskSpec, b: TaskSpec) -> str | None:
    for oid in sorted(_target_objects(a) & _target_objects(b)):
        cls = class_of(oid)
        props_a = {g.prop: g.value for g in a.goals if isinstance(g, Prop) and g.cls == cls}
        for g in b.goals:
            if isinstance(g, Prop) and g.cls == cls and props_a.get(g.prop, g.value) != g.value:
                return f"{oid} cannot be both {props_a[g.prop]} and {g.value}"
        place_a = {g for g in a.goals if isinstance(g, (In, On, CountIn)) and g.cls == cls}
        place_b = {g for g in b.goals if isinstance(g, (In, On, CountIn)) and g.cls == cls}
        if place_a and place_b and place_a != place_b:
            return f"{oid} cannot rest in two places"
    return None


def compose_tasks(a: TaskSpec, b: TaskSpec, *, task_id: str | None = None, verify: bool = True) -> TaskSpec:
    """Merge two tasks of one scene into a composite task.

    Identical goals on the same instance merge idempotently; contradictory requirements on
    one instance raise :class:`CompositionError`, as does (with ``verify``) a merged plan
    the expert cannot complete, e.g. two pick-two tasks asking for more instances than
    the scene holds.
    """
    if (a.scene_seed, a.scene_config) != (b.scene_seed, b.scene_config):
        raise CompositionError("tasks live in different scenes")
    if a.profile != b.profile:
        raise CompositionError("tasks use different action-space profiles")
    reason = _conflicts(a, b)
    if reason:
        raise CompositionError(reason)
    if a.goals == b.goals and a.targets == b.targets:
        return a
    goals = tuple(dict.fromkeys(a.goals + b.goals))
    components = a.base_categories() + b.base_categories()
    instruction = f"{a.instruction}, and {b.instruction}"
    steps, invalid = BUDGETS[a.profile]
    n = len(components)
    targets = tuple((f"{i}.{k}", v) for i, t in enumerate((a, b)) for k, v in t.targets)
    tid = task_id or f"composite[{a.task_id}+{b.task_id}]"
    task = TaskSpec(tid, COMPOSITE, instruction, goals, a.scene_seed, a.scene_config, a.profile, steps * n,
                    invalid * n, targets, components, a.plan + b.plan)
    if verify:
        from capita.expert import PlanningError, plan
        try:
            plan(task, task.scene())
        except PlanningError as e:
            raise CompositionError(f"composite is infeasible: {e}") from e
    return task


def task_digest(task: TaskSpec) -> str:
    return hashlib.sha1(task.serialize().encode()).hexdigest()
