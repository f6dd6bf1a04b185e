"""Privileged expert: sub-plan decomposition, the expert scheduler and its value oracle."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

from capita import env, grammar
from capita.grammar import MANIP_CATEGORIES, SchedulerAction, Stop, command_text, explore_chain, manip_chain
from capita.vocab import query_word

REWARD_MODES = ("manip-only", "all-subplans")


class PlanningError(ValueError):
    pass


@dataclass(frozen=True)
class Exploration:
    target_query: str
    target_class: str

    def action(self) -> SchedulerAction:
        return explore_chain(self.target_query)

    def canonical(self) -> tuple:
        return ("explore", self.target_class)

    def __str__(self) -> str:
        return f"find {self.target_query}"


@dataclass(frozen=True)
class Manipulation:
    category: str
    args: tuple[str, ...]

    def __post_init__(self):
        if self.category not in MANIP_CATEGORIES:
            raise ValueError(f"unknown manipulation category {self.category!r}")

    @property
    def command(self) -> str:
        return command_text(self.category, self.args)

    @property
    def primary(self) -> str:
        return self.args[grammar.primary_index(self.category)]

    def action(self) -> SchedulerAction:
        return manip_chain(self.command)

    def canonical(self) -> tuple:
        return ("manip", self.category, self.primary)

    def __str__(self) -> str:
        return self.command


SubPlan = Union[Exploration, Manipulation]


def subplan_to_dict(s: SubPlan) -> dict:
    if isinstance(s, Exploration):
        return {"explore": s.target_query, "class": s.target_class}
    return {"manip": s.category, "args": list(s.args)}


def subplan_from_dict(d: dict) -> SubPlan:
    if "explore" in d:
        return Exploration(d["explore"], d["class"])
    return Manipulation(d["manip"], tuple(d["args"]))


@dataclass(frozen=True)
class ExpertPlan:
    subplans: tuple[SubPlan, ...]

    @property
    def key_objects(self) -> tuple[str, ...]:
        return key_objects(self.subplans)


def key_objects(subplans) -> tuple[str, ...]:
    """Classes in order of first appearance across sub-plan arguments (goal objects and tools)."""
    seen: dict[str, None] = {}
    for s in subplans:
        for c in ((s.target_class,) if isinstance(s, Exploration) else s.args):
            seen.setdefault(c, None)
    return tuple(seen)


def _explore(cls: str) -> Exploration:
    return Exploration(query_word(cls), cls)


def _base_plan(task: env.TaskSpec) -> list[SubPlan]:
    goals = task.goals
    cat = task.category
    if cat in ("pick&place", "pick-two"):
        g = goals[0]
        once = [_explore(g.cls), Manipulation("grasp", (g.cls,)), _explore(g.rec),
                Manipulation("put", (g.cls, g.rec))]
        return once * (2 if cat == "pick-two" else 1)
    if cat == "stack&place":
        inner, outer = goals
        o, c, r = inner.cls, inner.rec, outer.rec
        return [_explore(o), Manipulation("grasp", (o,)), _explore(c), Manipulation("put-and-grasp", (o, c)),
                _explore(r), Manipulation("put", (c, r))]
    if cat in ("clean", "heat", "cool"):
        prop, place = goals
        o, r = prop.cls, place.rec
        tool = env.vocab.TOOLS[cat]
        return [_explore(o), Manipulation("grasp", (o,)), Manipulation(f"{cat}-with", (o, tool)),
                _explore(r), Manipulation("put", (o, r))]
    if cat == "examine":
        o = goals[0].cls
        lamp = env.vocab.LAMP
        return [_explore(o), Manipulation("grasp", (o,)), _explore(lamp), Manipulation("turn-on", (lamp,))]
    raise PlanningError(f"no decomposition for category {cat!r}")


def plan(task: env.TaskSpec, scene: env.SceneGraph, verify: bool = True) -> ExpertPlan:
    """Segment a task into exploration/manipulation sub-plans.

    Composite tasks carry the concatenation of their components' plans. With ``verify``
    the plan is executed by the expert scheduler against oracle capabilities and must
    reach success within the task's budgets.
    """
    subplans = tuple(task.plan) if task.plan else tuple(_base_plan(task))
    for s in subplans:
        if isinstance(s, Manipulation):
            for c in s.args:
                if not scene.instances(c):
                    raise PlanningError(f"class {c} required by '{s.command}' is absent from the scene")
    result = ExpertPlan(subplans)
    if verify:
        from capita.scheduler import run_episode
        import dataclasses
        probe = dataclasses.replace(task, plan=subplans)
        outcome = run_episode(probe, ExpertScheduler(), scene=scene)
        if not outcome.success:
            raise PlanningError(f"expert plan fails under oracle capabilities ({outcome.terminal_reason})")
    return result


# ---------------------------------------------------------------------------
# progress tracking


@dataclass(frozen=True)
class ProgressTracker:
    plan: tuple[SubPlan, ...]
    cursor: int = 0

    def __post_init__(self):
        if not 0 <= self.cursor <= len(self.plan):
            raise ValueError(f"tracker cursor {self.cursor} outside plan of length {len(self.plan)}")

    @property
    def completed(self) -> tuple[int, ...]:
        return tuple(range(self.cursor))

    @property
    def remaining(self) -> tuple[int, ...]:
        return tuple(range(self.cursor, len(self.plan)))

    @property
    def n_s(self) -> int:
        return len(self.plan) - self.cursor

    @property
    def remaining_manip_rounds(self) -> tuple[int, ...]:
        """0-based expert round at which each remaining manipulation would complete."""
        return tuple(k for k, i in enumerate(self.remaining) if isinstance(self.plan[i], Manipulation))

    @property
    def head(self) -> SubPlan | None:
        return self.plan[self.cursor] if self.cursor < len(self.plan) else None

    def advance(self) -> "ProgressTracker":
        return ProgressTracker(self.plan, min(self.cursor + 1, len(self.plan)))

    def rollback(self, index: int) -> "ProgressTracker":
        return ProgressTracker(self.plan, min(index, self.cursor))

    def to_dict(self) -> dict:
        return {"plan": [subplan_to_dict(s) for s in self.plan], "cursor": self.cursor}

    @classmethod
    def from_dict(cls, d: dict) -> "ProgressTracker":
        return cls(tuple(subplan_from_dict(s) for s in d["plan"]), d["cursor"])


def rollback_index(plan: tuple[SubPlan, ...], failed: int, reason: str) -> int:
    """Earliest sub-plan invalidated by a manipulation failure with ``reason``."""
    sub = plan[failed]
    if not isinstance(sub, Manipulation):
        return failed
    if reason == "target-not-visible":
        explores = [i for i in range(failed) if isinstance(plan[i], Exploration)]
        own = [i for i in explores if plan[i].target_class == sub.primary]
        if sub.category in ("grasp", "turn-on", "slice", "put-and-grasp", "put") and own:
            return own[-1]
        return explores[-1] if explores else failed
    if reason == "inventory-empty" and sub.category != "grasp":
        grasps = [i for i in range(failed) if isinstance(plan[i], Manipulation)
                  and plan[i].category in ("grasp", "put-and-grasp")]
        return grasps[-1] if grasps else failed
    return failed


def track(tracker: ProgressTracker, action: SchedulerAction, feedback) -> ProgressTracker:
    """Update progress after ``action`` ran and produced its retained ``feedback``.

    Only chains the expert itself would have issued move the tracker (the next-state
    approximation): a found target or a successful manipulation completes the head
    sub-plan, a reported manipulation failure rolls back, anything else leaves it as is.
    """
    head = tracker.head
    if head is None or grammar.canonical(action) not in optimal_action_set(tracker):
        return tracker
    if isinstance(head, Exploration):
        return tracker.advance() if getattr(feedback, "found", False) else tracker
    if feedback is None:
        return tracker
    if feedback.success:
        return tracker.advance()
    return tracker.rollback(rollback_index(tracker.plan, tracker.cursor, feedback.reason))


def resync(tracker: ProgressTracker, action: SchedulerAction, feedback) -> ProgressTracker:
    """Progress as seen by a supervisor watching some other policy act.

    Like :func:`track`, but an off-plan chain that reports success (a found target or
    a successful manipulation) moves the cursor just past the nearest sub-plan with
    the same canonical form, searching forward from the cursor first, then backward.
    """
    canon = grammar.canonical(action)
    if tracker.head is not None and canon in optimal_action_set(tracker):
        return track(tracker, action, feedback)
    ok = getattr(feedback, "found", None) if canon[0] == "explore" else getattr(feedback, "success", None)
    if not ok:
        return tracker
    n = len(tracker.plan)
    order = list(range(tracker.cursor, n)) + list(range(tracker.cursor - 1, -1, -1))
    for j in order:
        if tracker.plan[j].canonical() == canon:
            return ProgressTracker(tracker.plan, j + 1)
    return tracker


def expert_scheduler_step(tracker: ProgressTracker, last_action: SchedulerAction | None = None,
                          last_feedback=None) -> tuple[ProgressTracker, SchedulerAction]:
    """Fold the previous chain's feedback into the tracker, then emit the next chain."""
    if last_action is not None:
        tracker = track(tracker, last_action, last_feedback)
    head = tracker.head
    return tracker, (Stop() if head is None else head.action())


def expert_value(tracker: ProgressTracker, gamma: float, reward_mode: str = "manip-only") -> float:
    if not 0 < gamma <= 1:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    if reward_mode == "all-subplans":
        return float(sum(gamma ** i for i in range(tracker.n_s)))
    if reward_mode == "manip-only":
        return float(sum(gamma ** t for t in tracker.remaining_manip_rounds))
    raise ValueError(f"unknown reward mode {reward_mode!r}")


def optimal_action_set(tracker: ProgressTracker) -> frozenset[tuple]:
    """Canonical forms of every scheduler output that advances the plan from here.

    Exploration chains are progress-neutral in the direction EG picks, so one canonical
    key covers every direction; manipulation chains are unique up to query synonyms.
    """
    head = tracker.head
    return frozenset({("stop",)} if head is None else {head.canonical()})


class ExpertScheduler:
    """Scheduler policy that replays the expert plan, recovering from reported failures."""

    name = "expert"

    def __init__(self):
        self.tracker: ProgressTracker | None = None
        self._last: SchedulerAction | None = None

    def reset(self, task: env.TaskSpec, rng=None) -> None:
        self.tracker = ProgressTracker(tuple(task.plan) if task.plan else tuple(_base_plan(task)))
        self._last = None

    def act(self, state, task: env.TaskSpec) -> SchedulerAction:
        self.tracker, action = expert_scheduler_step(self.tracker, self._last, state.last_feedback)
        self._last = action
        return action

    def snapshot(self) -> dict:
        return {"policy": "expert"}
