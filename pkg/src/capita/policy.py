"""Learned scheduler policies over a finite catalog of slot-bound capability chains."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from capita import env, vocab
from capita.expert import ExpertScheduler, key_objects
from capita.grammar import (MANIP_CATEGORIES, Invoke, SchedulerAction, Stop, canonical,
                            command_text, explore_chain, manip_chain, parse_command, primary_index)
from capita.vocab import canonicalize, query_word

POLICY_SCHEMA = "capita/policy@1"
SLOTS = 6
PROGRESS_BINS = 24
TURN_SCALE = 50.0
STREAK_CAP = 3
CATEGORY_FEATURES = env.BASE_CATEGORIES + (env.COMPOSITE,)

# ---------------------------------------------------------------------------
# catalog


def build_catalog(slots: int = SLOTS) -> tuple[tuple, ...]:
    entries: list[tuple] = [("explore", s) for s in range(slots)]
    entries += [("manip", cat, s) for cat in MANIP_CATEGORIES for s in range(slots)]
    entries.append(("stop",))
    return tuple(entries)


CATALOG = build_catalog()
CATALOG_INDEX = {e: i for i, e in enumerate(CATALOG)}
ILLEGAL = Invoke(())


@dataclass(frozen=True)
class TaskContext:
    """The task facts a learned policy may condition on: category family and key objects."""

    category: str
    components: tuple[str, ...]
    key_objects: tuple[str, ...]

    @classmethod
    def of(cls, task: env.TaskSpec) -> "TaskContext":
        return cls(task.category, task.base_categories(), key_objects(task.plan))

    def to_dict(self) -> dict:
        return {"category": self.category, "components": list(self.components),
                "key_objects": list(self.key_objects)}

    @classmethod
    def from_dict(cls, d: dict) -> "TaskContext":
        return cls(d["category"], tuple(d["components"]), tuple(d["key_objects"]))


def _slot_of(cls: str | None, ctx: TaskContext) -> int | None:
    if cls in ctx.key_objects:
        i = ctx.key_objects.index(cls)
        return i if i < SLOTS else None
    return None


def held_class(state, ctx: TaskContext) -> str | None:
    """Class the agent believes it holds, read off the last successful pick-like command."""
    for inv, fb in reversed(state.memory):
        if inv.kind != "ES" or not fb.success:
            continue
        parsed = parse_command(inv.query)
        if parsed is None:
            continue
        cat, args = parsed
        if cat == "grasp":
            return canonicalize(args[0])
        if cat == "put-and-grasp":
            return canonicalize(args[1])
        if cat == "put":
            return None
    return None


def bind(index: int, state, ctx: TaskContext) -> SchedulerAction:
    """Catalog entry -> concrete chain; unbound slots yield an illegal chain."""
    entry = CATALOG[index]
    if entry[0] == "stop":
        return Stop()
    slot = entry[-1]
    if slot >= len(ctx.key_objects):
        return ILLEGAL
    cls = ctx.key_objects[slot]
    if entry[0] == "explore":
        return explore_chain(query_word(cls))
    cat = entry[1]
    if cat in ("put", "put-and-grasp"):
        held = held_class(state, ctx) or ctx.key_objects[0]
        return manip_chain(command_text(cat, (held, cls)))
    if cat in ("heat-with", "cool-with", "clean-with"):
        return manip_chain(command_text(cat, (cls, vocab.TOOLS[cat.split("-")[0]])))
    return manip_chain(command_text(cat, (cls,)))


def catalog_canonical(index: int, ctx: TaskContext) -> tuple:
    """Canonical form of a catalog entry (what expert matching compares)."""
    entry = CATALOG[index]
    if entry[0] == "stop":
        return ("stop",)
    slot = entry[-1]
    if slot >= len(ctx.key_objects):
        return ("illegal",)
    cls = ctx.key_objects[slot]
    return ("explore", cls) if entry[0] == "explore" else ("manip", entry[1], cls)


def catalog_index(action: SchedulerAction, ctx: TaskContext) -> int | None:
    key = canonical(action)
    if key == ("stop",):
        return CATALOG_INDEX[("stop",)]
    if key[0] == "explore":
        slot = _slot_of(key[1], ctx)
        return None if slot is None else CATALOG_INDEX[("explore", slot)]
    if key[0] == "manip" and key[1] in MANIP_CATEGORIES:
        slot = _slot_of(key[2], ctx)
        return None if slot is None else CATALOG_INDEX[("manip", key[1], slot)]
    return None


# ---------------------------------------------------------------------------
# features


def _feature_names() -> tuple[str, ...]:
    names = [f"category:{c}" for c in CATEGORY_FEATURES]
    names += [f"es-success:{c}" for c in MANIP_CATEGORIES]
    names += ["og:found", "og:not-found", "og:none"] + [f"og-slot:{s}" for s in range(SLOTS)]
    names += ["og:not-found-streak", "turn"]
    names += ["es:success", "es:failure", "es:none"] + [f"es-category:{c}" for c in MANIP_CATEGORIES]
    names += [f"es-slot:{s}" for s in range(SLOTS)]
    names += [f"progress:{i}" for i in range(PROGRESS_BINS)]
    names.append("bias")
    return tuple(names)


FEATURE_NAMES = _feature_names()
FEATURE_DIM = len(FEATURE_NAMES)
_POS = {n: i for i, n in enumerate(FEATURE_NAMES)}
FEATURE_DIGEST = hashlib.sha1(("\n".join(FEATURE_NAMES) + f"\nslots={SLOTS}").encode()).hexdigest()[:16]


def featurize(state, ctx: TaskContext) -> np.ndarray:
    """Fixed-length description of the scheduler context.

    Beyond the category, per-category ES successes, the last grounding result, its slot,
    the not-found streak, the turn and a bias, the vector carries the last execution
    summary (outcome, category, slot) and a one-hot count of advancing feedback.
    """
    x = np.zeros(FEATURE_DIM)
    for c in ctx.components if ctx.category == env.COMPOSITE else (ctx.category,):
        x[_POS[f"category:{c}"]] = 1.0
    if ctx.category == env.COMPOSITE:
        x[_POS["category:composite"]] = 1.0
    last_og = last_es = None
    streak = 0
    progress = 0
    for inv, fb in state.memory:
        if inv.kind == "OG":
            if last_og is not None and last_og[0].query != inv.query:
                streak = 0
            last_og = (inv, fb)
            if fb.found:
                progress += 1
                streak = 0
            else:
                streak += 1
        else:
            last_es = (inv, fb)
            if fb.success:
                progress += 1
                parsed = parse_command(inv.query)
                if parsed:
                    x[_POS[f"es-success:{parsed[0]}"]] += 1.0
    if last_og is None:
        x[_POS["og:none"]] = 1.0
    else:
        inv, fb = last_og
        x[_POS["og:found" if fb.found else "og:not-found"]] = 1.0
        slot = _slot_of(canonicalize(inv.query), ctx)
        if slot is not None:
            x[_POS[f"og-slot:{slot}"]] = 1.0
    x[_POS["og:not-found-streak"]] = min(streak, STREAK_CAP)
    x[_POS["turn"]] = state.turn / TURN_SCALE
    if last_es is None:
        x[_POS["es:none"]] = 1.0
    else:
        inv, fb = last_es
        x[_POS["es:success" if fb.success else "es:failure"]] = 1.0
        parsed = parse_command(inv.query)
        if parsed:
            cat, args = parsed
            x[_POS[f"es-category:{cat}"]] = 1.0
            slot = _slot_of(canonicalize(args[primary_index(cat)]), ctx)
            if slot is not None:
                x[_POS[f"es-slot:{slot}"]] = 1.0
    x[_POS[f"progress:{min(progress, PROGRESS_BINS - 1)}"]] = 1.0
    x[_POS["bias"]] = 1.0
    return x


# ---------------------------------------------------------------------------
# parametric policy


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class ParametricPolicy:
    """Softmax over catalog actions with logits W·x (or W2·tanh(W1·x) when ``hidden`` > 0)."""

    name = "parametric"

    def __init__(self, n_actions: int = len(CATALOG), n_features: int = FEATURE_DIM, hidden: int = 0,
                 temperature: float = 1.0, greedy: bool = False, init_scale: float = 0.0, seed: int = 0):
        if temperature < 0:
            raise ValueError("temperature must be non-negative")
        self.n_actions, self.n_features, self.hidden = n_actions, n_features, hidden
        self.temperature = temperature
        self.greedy = greedy
        rng = np.random.default_rng([seed, 0x9A1])
        if hidden:
            self.params = [rng.normal(0, 1 / np.sqrt(n_features), (hidden, n_features)),
                           rng.normal(0, init_scale, (n_actions, hidden))]
        else:
            self.params = [rng.normal(0, init_scale, (n_actions, n_features)) if init_scale
                           else np.zeros((n_actions, n_features))]
        self._rng = None
        self._ctx = None

    # -- distribution ------------------------------------------------------
    @property
    def W(self) -> np.ndarray:
        return self.params[-1] if not self.hidden else self.params[1]

    def logits(self, x: np.ndarray) -> np.ndarray:
        if self.hidden:
            return np.tanh(x @ self.params[0].T) @ self.params[1].T
        return x @ self.params[0].T

    def _tau(self) -> float:
        return self.temperature if self.temperature > 0 else 1.0

    def logprobs(self, x: np.ndarray) -> np.ndarray:
        return _log_softmax(self.logits(x) / self._tau())

    def logprob(self, x: np.ndarray, action: int) -> float:
        self._check(action)
        return float(self.logprobs(x)[action])

    def sample(self, x: np.ndarray, rng: np.random.Generator) -> int:
        if self.greedy or self.temperature == 0:
            return int(np.argmax(self.logits(x)))
        p = np.exp(self.logprobs(x))
        return int(rng.choice(len(p), p=p / p.sum()))

    def grad_logprob(self, x: np.ndarray, action: int) -> list[np.ndarray]:
        """d log pi(action|x) / d params, same shapes as ``params``."""
        self._check(action)
        return self.grad_weighted(x[None, :], np.array([action]), np.ones(1))

    def grad_weighted(self, X: np.ndarray, actions: np.ndarray, weights: np.ndarray) -> list[np.ndarray]:
        """Σ_n weights[n] · ∇ log pi(actions[n] | X[n]) for a batch."""
        p = np.exp(self.logprobs(X))
        delta = -p * weights[:, None]
        delta[np.arange(len(actions)), actions] += weights
        delta /= self._tau()
        if not self.hidden:
            return [delta.T @ X]
        h = np.tanh(X @ self.params[0].T)
        g2 = delta.T @ h
        back = (delta @ self.params[1]) * (1 - h ** 2)
        return [back.T @ X, g2]

    def _check(self, action: int) -> None:
        if not 0 <= action < self.n_actions:
            raise IndexError(f"action {action} outside catalog of size {self.n_actions}")

    # -- scheduler protocol --------------------------------------------------
    def reset(self, task: env.TaskSpec, rng: np.random.Generator | None = None) -> None:
        self._rng = rng if rng is not None else np.random.default_rng(0)
        self._ctx = TaskContext.of(task)

    def act(self, state, task: env.TaskSpec) -> SchedulerAction:
        x = featurize(state, self._ctx)
        return bind(self.sample(x, self._rng), state, self._ctx)

    # -- persistence ----------------------------------------------------------
    def copy(self) -> "ParametricPolicy":
        other = ParametricPolicy(self.n_actions, self.n_features, self.hidden, self.temperature, self.greedy)
        other.params = [p.copy() for p in self.params]
        return other

    def snapshot(self) -> dict:
        return {"schema": POLICY_SCHEMA, "policy": "parametric", "feature_digest": FEATURE_DIGEST,
                "n_actions": self.n_actions, "n_features": self.n_features, "hidden": self.hidden,
                "temperature": self.temperature, "greedy": self.greedy,
                "params": [p.tolist() for p in self.params]}

    @classmethod
    def from_snapshot(cls, d: dict) -> "ParametricPolicy":
        if d.get("schema") != POLICY_SCHEMA:
            raise ValueError(f"unsupported policy schema {d.get('schema')!r}")
        if d["feature_digest"] != FEATURE_DIGEST:
            raise ValueError(f"policy feature digest {d['feature_digest']} does not match featurizer "
                             f"{FEATURE_DIGEST}")
        pol = cls(d["n_actions"], d["n_features"], d["hidden"], d["temperature"], d["greedy"])
        pol.params = [np.array(p, dtype=float) for p in d["params"]]
        return pol


class RandomPolicy(ParametricPolicy):
    """Uniform over the catalog (all-zero weights, sampled)."""

    name = "random"

    def __init__(self):
        super().__init__()

    def snapshot(self) -> dict:
        return {"schema": POLICY_SCHEMA, "policy": "random"}


def policy_from_snapshot(d: dict):
    kind = d.get("policy")
    if kind == "expert":
        return ExpertScheduler()
    if kind == "random":
        return RandomPolicy()
    if kind == "parametric":
        return ParametricPolicy.from_snapshot(d)
    raise ValueError(f"unknown policy kind {kind!r}")


def save_policy(policy, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(env.canonical_json(policy.snapshot()) + "\n")


def load_policy(path):
    with open(path, encoding="utf-8") as f:
        return policy_from_snapshot(json.load(f))
