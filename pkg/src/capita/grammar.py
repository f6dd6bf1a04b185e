"""Manipulation command grammar, capability invocations and scheduler actions."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Union

from capita.vocab import canonicalize, normalize

MANIP_CATEGORIES = ("grasp", "put", "turn-on", "slice", "heat-with", "cool-with", "clean-with", "put-and-grasp")
KINDS = ("EG", "OG", "SD", "AD-explore", "AD-manip", "ES")

_PATTERNS = [
    ("put-and-grasp", re.compile(r"^put (.+) to (.+) and grasp (.+)$")),
    ("put", re.compile(r"^put (.+) to (.+)$")),
    ("grasp", re.compile(r"^grasp (.+)$")),
    ("turn-on", re.compile(r"^turn on (.+)$")),
    ("slice", re.compile(r"^slice (.+)$")),
    ("heat-with", re.compile(r"^heat (.+) with (.+)$")),
    ("cool-with", re.compile(r"^cool (.+) with (.+)$")),
    ("clean-with", re.compile(r"^clean (.+) with (.+)$")),
]


def command_text(category: str, args: tuple[str, ...]) -> str:
    a = [x.lower() for x in args]
    if category == "put-and-grasp":
        return f"put {a[0]} to {a[1]} and grasp {a[1]}"
    if category == "put":
        return f"put {a[0]} to {a[1]}"
    if category == "turn-on":
        return f"turn on {a[0]}"
    if category in ("grasp", "slice"):
        return f"{category} {a[0]}"
    if category in ("heat-with", "cool-with", "clean-with"):
        return f"{category.split('-')[0]} {a[0]} with {a[1]}"
    raise ValueError(f"unknown manipulation category {category!r}")


def parse_command(text: str) -> tuple[str, tuple[str, ...]] | None:
    """Split a command into (category, argument phrases); None if outside the grammar."""
    t = normalize(text)
    for cat, pat in _PATTERNS:
        m = pat.match(t)
        if m:
            args = m.groups()
            if cat == "put-and-grasp":
                if args[1] != args[2]:
                    continue
                args = args[:2]
            return cat, tuple(args)
    return None


def primary_index(category: str) -> int:
    """Argument a command is 'about': the destination for put-style commands."""
    return 1 if category in ("put", "put-and-grasp") else 0


@dataclass(frozen=True)
class Invocation:
    kind: str
    query: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown capability kind {self.kind!r}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "query": self.query}


@dataclass(frozen=True)
class Invoke:
    chain: tuple[Invocation, ...]

    def to_dict(self) -> dict:
        return {"invoke": [i.to_dict() for i in self.chain]}


@dataclass(frozen=True)
class Stop:
    def to_dict(self) -> dict:
        return {"stop": True}


SchedulerAction = Union[Invoke, Stop]


def explore_chain(query: str) -> Invoke:
    return Invoke((Invocation("EG", query), Invocation("AD-explore"), Invocation("OG", query)))


def manip_chain(command: str) -> Invoke:
    return Invoke((Invocation("SD"), Invocation("AD-manip", command), Invocation("ES", command)))


def action_from_dict(d: dict) -> SchedulerAction:
    if d.get("stop"):
        return Stop()
    return Invoke(tuple(Invocation(i["kind"], i["query"]) for i in d["invoke"]))


def chain_type(action: SchedulerAction) -> str | None:
    """'explore', 'manip', 'stop', or None for chains outside the closed grammar."""
    if isinstance(action, Stop):
        return "stop"
    kinds = tuple(i.kind for i in action.chain)
    q = [i.query for i in action.chain]
    if kinds == ("EG", "AD-explore", "OG") and q[0] and q[0] == q[2] and not q[1]:
        return "explore"
    if kinds == ("SD", "AD-manip", "ES") and not q[0] and q[1] and q[1] == q[2]:
        return "manip"
    return None


def is_legal(action: SchedulerAction) -> bool:
    return chain_type(action) is not None


def canonical(action: SchedulerAction) -> tuple:
    """Comparison key: queries folded through the synonym tables.

    Exploration chains compare by target class; manipulation chains by (category,
    primary class). Unresolvable phrases keep their normalized text.
    """
    kind = chain_type(action)
    if kind == "stop":
        return ("stop",)
    if kind == "explore":
        q = action.chain[0].query
        return ("explore", canonicalize(q) or normalize(q))
    if kind == "manip":
        parsed = parse_command(action.chain[1].query)
        if parsed is None:
            return ("manip", "?", normalize(action.chain[1].query))
        cat, args = parsed
        phrase = args[primary_index(cat)]
        return ("manip", cat, canonicalize(phrase) or normalize(phrase))
    return ("illegal",)
