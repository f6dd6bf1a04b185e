"""Object vocabulary, phrase tables and query canonicalization."""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources


@dataclass(frozen=True)
class ClassInfo:
    name: str
    pickupable: bool = False
    receptacle: bool = False
    openable: bool = False
    toggleable: bool = False
    sliceable: bool = False
    surface: bool = False
    heatable: bool = False
    coolable: bool = False
    cleanable: bool = False
    examinable: bool = False
    stackable: bool = False
    homes: tuple[str, ...] = ()


_KITCHEN = ("CounterTop", "DiningTable", "Cabinet", "Shelf")
_FOOD_HOMES = ("Fridge", "CounterTop", "DiningTable", "Cabinet")
_UTENSIL_HOMES = ("Drawer", "CounterTop", "DiningTable", "SinkBasin")
_SMALL_HOMES = ("Desk", "SideTable", "Shelf", "Dresser", "Drawer", "Sofa", "ArmChair", "DiningTable")


def _food(name, sliceable=True, heatable=True, cleanable=True):
    return ClassInfo(name, pickupable=True, sliceable=sliceable, heatable=heatable, coolable=True,
                     cleanable=cleanable, stackable=True, homes=_FOOD_HOMES)


CLASSES: dict[str, ClassInfo] = {c.name: c for c in [
    # fixed receptacles (navigation targets)
    ClassInfo("CounterTop", receptacle=True, surface=True),
    ClassInfo("Cabinet", receptacle=True, openable=True),
    ClassInfo("Drawer", receptacle=True, openable=True),
    ClassInfo("Fridge", receptacle=True, openable=True),
    ClassInfo("Microwave", receptacle=True, openable=True, toggleable=True),
    ClassInfo("SinkBasin", receptacle=True, toggleable=True),
    ClassInfo("Shelf", receptacle=True, surface=True),
    ClassInfo("Desk", receptacle=True, surface=True),
    ClassInfo("SideTable", receptacle=True, surface=True),
    ClassInfo("DiningTable", receptacle=True, surface=True),
    ClassInfo("Dresser", receptacle=True, surface=True),
    ClassInfo("Sofa", receptacle=True, surface=True),
    ClassInfo("ArmChair", receptacle=True, surface=True),
    ClassInfo("GarbageCan", receptacle=True),
    # movable containers
    ClassInfo("Bowl", pickupable=True, receptacle=True, cleanable=True, homes=_KITCHEN),
    ClassInfo("Plate", pickupable=True, receptacle=True, cleanable=True, homes=_KITCHEN),
    ClassInfo("Pot", pickupable=True, receptacle=True, cleanable=True, homes=("CounterTop", "Cabinet")),
    # small objects
    _food("Apple"),
    _food("Tomato"),
    _food("Potato"),
    _food("Lettuce", heatable=False),
    _food("Bread", cleanable=False),
    _food("Egg", sliceable=False, cleanable=False),
    ClassInfo("Mug", pickupable=True, heatable=True, coolable=True, cleanable=True, examinable=True,
              homes=("Cabinet", "CounterTop", "DiningTable", "Shelf", "Desk")),
    ClassInfo("Cup", pickupable=True, heatable=True, coolable=True, cleanable=True,
              homes=("Cabinet", "CounterTop", "DiningTable", "Fridge")),
    ClassInfo("Knife", pickupable=True, cleanable=True, stackable=True, homes=_UTENSIL_HOMES),
    ClassInfo("Spoon", pickupable=True, cleanable=True, stackable=True, homes=_UTENSIL_HOMES),
    ClassInfo("Book", pickupable=True, examinable=True, homes=_SMALL_HOMES),
    ClassInfo("CellPhone", pickupable=True, examinable=True, homes=_SMALL_HOMES),
    ClassInfo("KeyChain", pickupable=True, examinable=True, homes=_SMALL_HOMES),
    ClassInfo("Pencil", pickupable=True, examinable=True, homes=_SMALL_HOMES),
    ClassInfo("CreditCard", pickupable=True, examinable=True, homes=_SMALL_HOMES),
    ClassInfo("Vase", pickupable=True, examinable=True, homes=("Shelf", "SideTable", "DiningTable", "Dresser")),
    ClassInfo("Cloth", pickupable=True, cleanable=True, homes=("SinkBasin", "Drawer", "Dresser", "GarbageCan")),
    ClassInfo("RemoteControl", pickupable=True, examinable=True, homes=("Sofa", "ArmChair", "SideTable", "Dresser")),
    ClassInfo("Laptop", pickupable=True, openable=True, homes=("Desk", "Sofa", "DiningTable")),
    ClassInfo("DeskLamp", toggleable=True, homes=("Desk", "SideTable")),
]}

FIXED_RECEPTACLES = tuple(n for n, c in CLASSES.items() if c.receptacle and not c.pickupable)
CONTAINERS = tuple(n for n, c in CLASSES.items() if c.receptacle and c.pickupable)
SMALL_OBJECTS = tuple(n for n, c in CLASSES.items() if c.pickupable and not c.receptacle)
LAMP = "DeskLamp"

# tool receptacle class per tool-use manipulation
TOOLS = {"heat": "Microwave", "cool": "Fridge", "clean": "SinkBasin"}

STOP_WORDS = frozenset(
    "the a an some any of to in on at for with and it its one two another this that from up into".split())


def class_info(name: str) -> ClassInfo:
    return CLASSES[name]


def class_of(obj_id: str) -> str:
    """'Apple 1' -> 'Apple'."""
    return obj_id.rsplit(" ", 1)[0]


def query_word(cls: str) -> str:
    return cls.lower()


def _read_table(name: str) -> list[tuple[str, ...]]:
    text = resources.files("capita.data").joinpath(name).read_text(encoding="utf-8")
    rows = []
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        rows.append(tuple(line.split("\t")))
    return rows


@dataclass(frozen=True)
class PhraseTables:
    synonyms: dict[str, tuple[str, ...]]       # class -> phrases
    descriptions: dict[str, tuple[str, ...]]   # class -> descriptive phrases
    rephrase: dict[int, dict[str, str]]        # variant -> canonical verb -> rephrased verb
    novel: dict[str, str]                      # class -> novel class

    def phrase_index(self) -> dict[str, tuple[str, ...]]:
        index: dict[str, list[str]] = {}
        for table in (self.synonyms, self.descriptions):
            for cls, phrases in table.items():
                for p in phrases:
                    index.setdefault(normalize(p), []).append(cls)
        return {k: tuple(dict.fromkeys(v)) for k, v in index.items()}


@lru_cache(maxsize=None)
def load_tables() -> PhraseTables:
    syn: dict[str, list[str]] = {}
    for cls, phrase in _read_table("synonyms.tsv"):
        syn.setdefault(cls, []).append(phrase)
    desc: dict[str, list[str]] = {}
    for cls, phrase in _read_table("descriptions.tsv"):
        desc.setdefault(cls, []).append(phrase)
    reph: dict[int, dict[str, str]] = {}
    for variant, verb, alt in _read_table("rephrase.tsv"):
        reph.setdefault(int(variant), {})[verb] = alt
    for variant, mapping in reph.items():
        if len(set(mapping.values())) != len(mapping):
            raise ValueError(f"rephrase variant {variant} is not a bijection")
    novel = dict(_read_table("novel_classes.tsv"))
    return PhraseTables({k: tuple(v) for k, v in syn.items()},
                        {k: tuple(v) for k, v in desc.items()}, reph, novel)


def normalize(text: str) -> str:
    return " ".join(re.findall(r"[a-z0-9]+", text.lower()))


@lru_cache(maxsize=None)
def _index() -> dict[str, tuple[str, ...]]:
    index = load_tables().phrase_index()
    for cls in CLASSES:
        index.setdefault(normalize(cls), (cls,))
    return index


def resolve(query: str) -> tuple[str, ...]:
    """All vocabulary classes a phrase may refer to (empty if unknown).

    Exact phrase lookup first; otherwise the query with stop words removed; otherwise
    the longest known sub-phrase.
    """
    index = _index()
    q = normalize(query)
    if q in index:
        return index[q]
    stripped = " ".join(t for t in q.split() if t not in STOP_WORDS)
    if stripped in index:
        return index[stripped]
    tokens = stripped.split()
    for n in range(len(tokens), 0, -1):
        for i in range(len(tokens) - n + 1):
            sub = " ".join(tokens[i:i + n])
            if sub in index:
                return index[sub]
    return ()


def canonicalize(query: str) -> str | None:
    """Map a free-form object reference to its vocabulary class (first match wins)."""
    classes = resolve(query)
    return classes[0] if classes else None


def is_ambiguous(query: str) -> bool:
    return len(resolve(query)) > 1


def tokens(text: str) -> frozenset[str]:
    """Canonical token set: stop words dropped, known phrases folded to their class."""
    out = set()
    for tok in normalize(text).split():
        if tok in STOP_WORDS:
            continue
        cls = _index().get(tok)
        out.add(cls[0].lower() if cls else tok)
    return frozenset(out)


def jaccard(a: str, b: str) -> float:
    ta, tb = tokens(a), tokens(b)
    if not ta and not tb:
        return 1.0
    return len(ta & tb) / len(ta | tb)
