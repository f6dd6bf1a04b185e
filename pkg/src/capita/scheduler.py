"""The scheduler loop: policy chooses capability chains, capabilities act, the world answers."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from capita import capabilities as caps
from capita import env
from capita.capabilities import ORACLE, Backend, EGMemory, ExplorationExhausted, Knowledge
from capita.env import canonical_json
from capita.grammar import Invocation, SchedulerAction, action_from_dict, chain_type

TRANSCRIPT_SCHEMA = "capita/transcript@1"
TERMINAL_REASONS = ("stopped", "step-budget", "invalid-budget", "exploration-exhausted")
RETAINED = ("OG", "ES")


@dataclass(frozen=True)
class Limits:
    """Per-episode caps. None falls back to the task's own budgets.

    ``max_turns`` bounds scheduler decisions (chains that move nothing still terminate);
    hitting it is reported as a step-budget terminal. ``max_sweeps`` is forwarded to EG.
    """

    step_budget: int | None = None
    invalid_budget: int | None = None
    max_turns: int | None = None
    max_sweeps: int | None = 1

    def resolve(self, task: env.TaskSpec) -> tuple[int, int, int]:
        steps = self.step_budget if self.step_budget is not None else task.step_budget
        invalid = self.invalid_budget if self.invalid_budget is not None else task.invalid_budget
        turns = self.max_turns if self.max_turns is not None else 2 * steps + 10
        return steps, invalid, turns

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class SchedulerState:
    instruction: str
    memory: tuple = ()                 # (Invocation, feedback) pairs, OG and ES only
    step_count: int = 0
    invalid_count: int = 0
    turn: int = 0
    last_action: SchedulerAction | None = None
    last_feedback: object = None

    def retained_kinds(self) -> set[str]:
        return {inv.kind for inv, _ in self.memory}


def apply_feedback(state: SchedulerState, invocation: Invocation, feedback) -> SchedulerState:
    """Fold one capability result into the scheduler context.

    Only OG and ES feedback enter memory; EG and SD outputs live inside the running chain.
    """
    if invocation.kind not in RETAINED:
        return state
    return dataclasses.replace(state, memory=state.memory + ((invocation, feedback),), last_feedback=feedback)


@dataclass
class EpisodeResult:
    task_id: str
    success: bool
    ssr: float
    steps: int
    invalid: int
    turns: int
    terminal_reason: str
    transcript: list[dict]
    states: list[tuple[SchedulerState, SchedulerAction]] = field(default_factory=list)

    def transcript_jsonl(self) -> str:
        return "".join(canonical_json(line) + "\n" for line in self.transcript)


def _candidates(scene: env.SceneGraph, profile: str) -> list[str]:
    if profile == "composite":
        objs = sorted((o.id for o in scene.objects.values() if o.location != env.FLOOR), key=env._id_key)
        return list(scene.receptacles) + objs
    return list(scene.receptacles)


class _Log:
    def __init__(self):
        self.lines: list[dict] = []

    def __call__(self, actor: str, payload: dict) -> None:
        self.lines.append({"t": len(self.lines), "actor": actor, "payload": payload})


def run_episode(task: env.TaskSpec, policy, backend: Backend = ORACLE, limits: Limits = Limits(), seed: int = 0,
                *, scene: env.SceneGraph | None = None, record_states: bool = False) -> EpisodeResult:
    """Run one episode; deterministic in (task, policy parameters, backend, limits, seed)."""
    scene = scene if scene is not None else task.scene()
    step_budget, invalid_budget, max_turns = limits.resolve(task)
    agent = env.AgentState(env.START, task.profile)
    cap_rng = np.random.default_rng([seed, 0xCA9])
    policy.reset(task, np.random.default_rng([seed, 0x901]))
    knowledge = Knowledge()
    knowledge.update(env.observe(scene, agent))
    memory = EGMemory(max_sweeps=limits.max_sweeps)
    candidates = _candidates(scene, task.profile)
    known = set(candidates)
    state = SchedulerState(task.instruction)
    last_label: str | None = None
    log = _Log()
    log("scheduler", {"event": "episode-start", "schema": TRANSCRIPT_SCHEMA, "task": task.to_dict(),
                      "policy": policy.snapshot(), "backend": backend.to_dict(), "limits": limits.to_dict(),
                      "seed": seed})
    states: list = []
    terminal = None

    def execute(actions) -> tuple[list, str | None]:
        nonlocal scene, agent, state
        history = []
        for a in actions:
            if state.step_count >= step_budget:
                return history, "step-budget"
            scene, agent, fb = env.step(scene, agent, a)
            knowledge.update(env.observe(scene, agent))
            state = dataclasses.replace(state, step_count=state.step_count + 1,
                                        invalid_count=state.invalid_count + (not fb.success))
            history.append((a, fb))
            log("env", {"action": env.action_text(a), "success": fb.success, "reason": fb.reason})
            if state.invalid_count > invalid_budget:
                return history, "invalid-budget"
            if not fb.success:
                break
        return history, None

    while terminal is None:
        if state.turn >= max_turns:
            terminal = "step-budget"
            break
        action = policy.act(state, task)
        if record_states:
            states.append((state, action))
        log("scheduler", {"turn": state.turn, "action": action.to_dict()})
        state = dataclasses.replace(state, turn=state.turn + 1, last_action=action, last_feedback=None)
        kind = chain_type(action)
        if kind == "stop":
            terminal = "stopped"
            break
        if kind is None:
            state = dataclasses.replace(state, invalid_count=state.invalid_count + 1)
            log("scheduler", {"event": "illegal-chain"})
            if state.invalid_count > invalid_budget:
                terminal = "invalid-budget"
            continue

        if kind == "explore":
            query = action.chain[0].query
            try:
                direction = caps.eg(query, candidates, memory, backend, scene, cap_rng, task.goals, task.profile)
            except ExplorationExhausted as e:
                log("capability", {"kind": "EG", "query": query, "exhausted": str(e)})
                terminal = "exploration-exhausted"
                break
            log("capability", {"kind": "EG", "query": query, "direction": direction.to_dict()})
            actions = caps.ad_explore(direction, known, knowledge)
            log("capability", {"kind": "AD-explore", "actions": [env.action_text(a) for a in actions]})
            _, terminal = execute(actions)
            if terminal:
                break
            settled = {o.id for o in scene.objects.values() if env.settles(scene, o, task.goals)}
            obs = env.observe(scene, agent)
            grounding = caps.og(query, obs, backend, cap_rng, scene.seed, settled)
            log("capability", {"kind": "OG", "query": query, "visible": obs.ids(), "output": grounding.to_dict(),
                               "injected": grounding.injected if not grounding.found else False})
            if grounding.found:
                last_label = grounding.label
            state = apply_feedback(state, action.chain[2], grounding)
        else:
            command = action.chain[1].query
            obs = env.observe(scene, agent)
            facts = caps.sd(last_label, obs, task.goals)
            log("capability", {"kind": "SD", "target": last_label, "facts": [list(f) for f in facts]})
            actions = caps.ad_manip(command, facts, knowledge, task.profile, observation=obs,
                                    receptacles=scene.receptacles)
            log("capability", {"kind": "AD-manip", "query": command, "holding": knowledge.holding,
                               "location": knowledge.location, "actions": [env.action_text(a) for a in actions]})
            history, terminal = execute(actions)
            if terminal:
                break
            summary = caps.es(command, history, backend, cap_rng)
            log("capability", {"kind": "ES", "query": command, "output": summary.to_dict(),
                               "injected": summary.injected})
            state = apply_feedback(state, action.chain[2], summary)

    _, success, ssr = env.check_goals(scene, list(task.goals))
    log("scheduler", {"event": "episode-end", "success": success, "ssr": ssr, "terminal": terminal,
                      "steps": state.step_count, "invalid": state.invalid_count})
    return EpisodeResult(task.task_id, success, ssr, state.step_count, state.invalid_count, state.turn, terminal,
                         log.lines, states)


def read_transcript(text: str) -> list[dict]:
    return [json.loads(line) for line in text.splitlines() if line.strip()]


def replay(lines: list[dict], loader=None) -> EpisodeResult:
    """Re-run an episode from its logged header; ``loader`` rebuilds the policy from its snapshot."""
    header = lines[0]["payload"]
    if header.get("event") != "episode-start" or header.get("schema") != TRANSCRIPT_SCHEMA:
        raise ValueError("transcript does not start with an episode header")
    if loader is None:
        from capita.policy import policy_from_snapshot as loader
    task = env.TaskSpec.from_dict(header["task"])
    policy = loader(header["policy"])
    return run_episode(task, policy, Backend.from_dict(header["backend"]), Limits(**header["limits"]),
                       header["seed"])


def scheduler_actions(lines: list[dict]) -> list[SchedulerAction]:
    return [action_from_dict(l["payload"]["action"]) for l in lines
            if l["actor"] == "scheduler" and "action" in l["payload"]]
