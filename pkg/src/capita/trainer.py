"""Policy optimization: expert-advantage clipped updates (EIPO), GRPO baselines and behavior cloning."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass

import numpy as np

from capita.capabilities import Backend
from capita.expert import (REWARD_MODES, Manipulation, ProgressTracker, expert_value, optimal_action_set)
from capita.policy import CATALOG, FEATURE_DIGEST, ParametricPolicy, TaskContext, catalog_canonical, featurize
from capita.scheduler import Limits, run_episode

log = logging.getLogger(__name__)

ALGOS = ("eipo", "grpo-return", "grpo-reward", "bc")
METRIC_COLUMNS = ("iteration", "objective", "clip_fraction", "mean_abs_adv", "probe_sr")


@dataclass(frozen=True)
class TrainConfig:
    algo: str = "eipo"
    gamma: float = 0.95
    epsilon: float = 0.2
    group_size: int = 8
    batch_size: int = 512
    lr: float = 0.05
    iterations: int = 120
    inner_epochs: int = 4
    reward_mode: str = "manip-only"
    hidden: int = 0
    probe_every: int = 10

    def __post_init__(self):
        if self.algo not in ALGOS:
            raise ValueError(f"algo must be one of {ALGOS}, got {self.algo!r}")
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if not 0 < self.epsilon < 1:
            raise ValueError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if self.group_size < 2:
            raise ValueError(f"group size must be >= 2, got {self.group_size}")
        if self.reward_mode not in REWARD_MODES:
            raise ValueError(f"reward mode must be one of {REWARD_MODES}")
        if self.batch_size < 1 or self.iterations < 0 or self.inner_epochs < 1:
            raise ValueError("batch size, iterations and inner epochs must be positive")


# ---------------------------------------------------------------------------
# advantages


def expert_advantage(tracker: ProgressTracker, action: tuple, gamma: float, reward_mode: str = "manip-only") -> float:
    """A(s, a) = γ·V(s') + R(s, a) − V(s) under the next-state approximation.

    ``action`` is a canonical form. A matching action completes the head sub-plan
    (reward 1 for manipulations, or for every sub-plan in all-subplans mode); any other
    action leaves progress unchanged with zero reward.
    """
    if not isinstance(tracker, ProgressTracker):
        raise TypeError("expert advantage needs a ProgressTracker")
    v = expert_value(tracker, gamma, reward_mode)
    head = tracker.head
    if head is None:
        return 0.0
    if action not in optimal_action_set(tracker):
        return (gamma - 1.0) * v
    reward = 1.0 if reward_mode == "all-subplans" or isinstance(head, Manipulation) else 0.0
    return gamma * expert_value(tracker.advance(), gamma, reward_mode) + reward - v


def center_group(advantages) -> np.ndarray:
    a = np.asarray(advantages, dtype=float)
    if a.shape[-1] < 2:
        raise ValueError("a group needs at least two samples")
    return a - a.mean(axis=-1, keepdims=True)


def normalize_group(values) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    return (v - v.mean(axis=-1, keepdims=True)) / (v.std(axis=-1, keepdims=True) + 1e-8)


def clipped_terms(ratio, adv, epsilon: float):
    """Per-sample min(r·Â, clip(r)·Â) and a mask of samples whose gradient survives clipping."""
    ratio, adv = np.asarray(ratio, float), np.asarray(adv, float)
    clipped = np.clip(ratio, 1 - epsilon, 1 + epsilon)
    value = np.minimum(ratio * adv, clipped * adv)
    live = ~(((adv > 0) & (ratio > 1 + epsilon)) | ((adv < 0) & (ratio < 1 - epsilon)))
    return value, live


@dataclass
class AdvantageGroup:
    features: np.ndarray          # (F,)
    actions: np.ndarray           # (G,)
    old_logprobs: np.ndarray      # (G,)
    advantages: np.ndarray        # (G,) raw
    centered: np.ndarray          # (G,)
    epsilon: float = 0.2


def eipo_objective(policy: ParametricPolicy, X: np.ndarray, actions: np.ndarray, old_logp: np.ndarray,
                   adv: np.ndarray, epsilon: float):
    """Mean clipped importance-weighted objective and its gradient.

    ``X`` is (N, F) with one row per sampled action. Returns (objective, grads, stats)
    where stats counts clipped and skipped (non-finite ratio) samples.
    """
    logp = policy.logprobs(X)[np.arange(len(actions)), actions]
    with np.errstate(over="ignore", invalid="ignore"):
        ratio = np.exp(logp - old_logp)
    finite = np.isfinite(ratio)
    n = max(int(finite.sum()), 1)
    r = np.where(finite, ratio, 1.0)
    value, live = clipped_terms(r, adv, epsilon)
    weights = np.where(finite & live, adv * r, 0.0) / n
    objective = float(np.where(finite, value, 0.0).sum() / n)
    grads = policy.grad_weighted(X, actions, weights)
    clipped = finite & ~live
    stats = {"clip_fraction": float(clipped.sum() / n), "skipped": int((~finite).sum())}
    return objective, grads, stats


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    def __init__(self, params, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def ascend(self, params, grads) -> None:
        self.t += 1
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            mh = m / (1 - self.b1 ** self.t)
            vh = v / (1 - self.b2 ** self.t)
            p += self.lr * mh / (np.sqrt(vh) + self.eps)


# ---------------------------------------------------------------------------
# offline state tables


@dataclass
class StateTable:
    """Offline states with per-catalog-action expert advantages and expert-match flags."""

    X: np.ndarray
    expert: np.ndarray            # (N,) expert catalog index
    advantages: np.ndarray        # (N, A)
    optimal: np.ndarray           # (N, A) bool

    @classmethod
    def build(cls, X, expert, trackers, ctxs, gamma: float, reward_mode: str) -> "StateTable":
        n, a = len(X), len(CATALOG)
        adv = np.zeros((n, a))
        opt = np.zeros((n, a), dtype=bool)
        canon_cache: dict = {}
        for i, (tr, ctx) in enumerate(zip(trackers, ctxs)):
            key = ctx.key_objects
            if key not in canon_cache:
                canon_cache[key] = [catalog_canonical(j, ctx) for j in range(a)]
            best = optimal_action_set(tr)
            for j, c in enumerate(canon_cache[key]):
                adv[i, j] = expert_advantage(tr, c, gamma, reward_mode)
                opt[i, j] = c in best
        return cls(np.asarray(X, float), np.asarray(expert, int), adv, opt)


def state_table(samples, gamma: float, reward_mode: str) -> StateTable:
    from capita.datagen import scheduler_arrays
    X, y, trackers, ctxs = scheduler_arrays(samples)
    return StateTable.build(X, y, trackers, ctxs, gamma, reward_mode)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    policy: ParametricPolicy
    metrics: list[dict]

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=METRIC_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in self.metrics:
            w.writerow({k: (f"{row[k]:.6g}" if isinstance(row[k], float) else row[k]) for k in METRIC_COLUMNS})
        return buf.getvalue()


def probe_sr(policy: ParametricPolicy, tasks, backend: Backend, limits: Limits, seed: int) -> float:
    if not tasks:
        return float("nan")
    greedy = policy.copy()
    greedy.greedy = True
    wins = sum(run_episode(t, greedy, backend, limits, seed=seed + i).success for i, t in enumerate(tasks))
    return wins / len(tasks)


def train(config: TrainConfig, *, table: StateTable | None = None, tasks=None, probe_tasks=(),
          backend: Backend = Backend(), limits: Limits = Limits(), seed: int = 0,
          init: ParametricPolicy | None = None, dataset_digest: str | None = None) -> TrainResult:
    """Run ``config.algo`` and return the final policy and per-iteration metrics.

    Offline algorithms (eipo, grpo-reward, bc) read ``table``; grpo-return rolls out
    ``tasks`` online under ``backend``. Probe SR is measured greedily on ``probe_tasks``
    every ``probe_every`` iterations and at the end.
    """
    if dataset_digest is not None and dataset_digest != FEATURE_DIGEST:
        raise ValueError(f"dataset feature digest {dataset_digest} does not match featurizer {FEATURE_DIGEST}")
    rng = np.random.default_rng([seed, 0x7EA])
    policy = init.copy() if init is not None else ParametricPolicy(hidden=config.hidden, seed=seed,
                                                                    init_scale=0.1 if config.hidden else 0.0)
    policy.greedy = False
    opt = Adam(policy.params, config.lr)
    metrics: list[dict] = []
    last_probe = float("nan")
    if config.algo in ("eipo", "grpo-reward", "bc") and (table is None or len(table.X) == 0):
        raise ValueError(f"{config.algo} needs a non-empty offline state table")
    if config.algo == "grpo-return" and not tasks:
        raise ValueError("grpo-return needs tasks to roll out")

    for it in range(1, config.iterations + 1):
        if config.algo == "bc":
            stats = _bc_step(policy, opt, table, config, rng)
        elif config.algo == "grpo-return":
            stats = _grpo_return_step(policy, opt, tasks, config, backend, limits, rng, seed * 7919 + it * 131)
        else:
            stats = _offline_step(policy, opt, table, config, rng)
        if probe_tasks and (it % config.probe_every == 0 or it == config.iterations):
            last_probe = probe_sr(policy, probe_tasks, backend, limits, seed=10_000)
        metrics.append({"iteration": it, **stats, "probe_sr": last_probe})
    if config.iterations == 0 and probe_tasks:
        metrics.append({"iteration": 0, "objective": 0.0, "clip_fraction": 0.0, "mean_abs_adv": 0.0,
                        "probe_sr": probe_sr(policy, probe_tasks, backend, limits, seed=10_000)})
    policy.greedy = True
    return TrainResult(policy, metrics)


def _update(policy, opt, X, acts, old, adv, config) -> dict:
    objective = clip = 0.0
    for _ in range(config.inner_epochs):
        objective, grads, st = eipo_objective(policy, X, acts, old, adv, config.epsilon)
        opt.ascend(policy.params, grads)
        clip = st["clip_fraction"]
    return {"objective": objective, "clip_fraction": clip, "mean_abs_adv": float(np.abs(adv).mean())}


def _offline_step(policy, opt, table: StateTable, config: TrainConfig, rng) -> dict:
    idx = rng.integers(len(table.X), size=config.batch_size)
    X = table.X[idx]
    old_all = policy.logprobs(X)
    p = np.exp(old_all)
    u = rng.random((len(idx), config.group_size, 1))
    acts = (u > np.cumsum(p, axis=1)[:, None, :]).sum(axis=2).clip(max=p.shape[1] - 1)
    rows = np.arange(len(idx))[:, None]
    if config.algo == "eipo":
        adv = center_group(table.advantages[idx][rows, acts])
    else:
        adv = normalize_group(table.optimal[idx][rows, acts].astype(float))
    old = old_all[rows, acts]
    G = config.group_size
    return _update(policy, opt, np.repeat(X, G, axis=0), acts.ravel(), old.ravel(), adv.ravel(), config)


def _bc_step(policy, opt, table: StateTable, config: TrainConfig, rng) -> dict:
    n = len(table.X)
    order = rng.permutation(n)
    loss = 0.0
    for start in range(0, n, config.batch_size):
        b = order[start:start + config.batch_size]
        lp = policy.logprobs(table.X[b])
        loss = -float(lp[np.arange(len(b)), table.expert[b]].mean())
        grads = policy.grad_weighted(table.X[b], table.expert[b], np.full(len(b), 1.0 / len(b)))
        opt.ascend(policy.params, grads)
    return {"objective": -loss, "clip_fraction": 0.0, "mean_abs_adv": 0.0}


class _Recorder:
    """Samples from a frozen copy of the policy and keeps (features, action, old logprob)."""

    def __init__(self, policy: ParametricPolicy):
        self.policy = policy
        self.steps: list[tuple[np.ndarray, int, float]] = []

    def reset(self, task, rng=None):
        self.rng = rng
        self.ctx = TaskContext.of(task)

    def act(self, state, task):
        from capita.policy import bind
        x = featurize(state, self.ctx)
        a = self.policy.sample(x, self.rng)
        self.steps.append((x, a, self.policy.logprob(x, a)))
        return bind(a, state, self.ctx)

    def snapshot(self):
        return self.policy.snapshot()


def _grpo_return_step(policy, opt, tasks, config: TrainConfig, backend, limits, rng, seed: int) -> dict:
    frozen = policy.copy()
    frozen.greedy = False
    X, acts, old, adv = [], [], [], []
    collected = 0
    k = 0
    while collected < config.batch_size:
        task = tasks[int(rng.integers(len(tasks)))]
        returns, trajs = [], []
        for g in range(config.group_size):
            rec = _Recorder(frozen)
            res = run_episode(task, rec, backend, limits, seed=seed + k * config.group_size + g)
            returns.append(float(res.success))
            trajs.append(rec.steps)
        k += 1
        norm = normalize_group(returns)
        for a_hat, steps in zip(norm, trajs):
            for x, a, lp in steps:
                X.append(x)
                acts.append(a)
                old.append(lp)
                adv.append(a_hat)
                collected += 1
    return _update(policy, opt, np.array(X), np.array(acts), np.array(old), np.array(adv), config)


def action_match(policy: ParametricPolicy, table: StateTable) -> float:
    """Fraction of states where the greedy action is among the expert's optimal actions."""
    if len(table.X) == 0:
        return float("nan")
    greedy = np.argmax(policy.logits(table.X), axis=1)
    return float(table.optimal[np.arange(len(greedy)), greedy].mean())
