"""Command-line entry point: gen, expert-run, build-data, train, eval, replay."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from capita import datagen, harness
from capita.capabilities import Backend
from capita.env import canonical_json
from capita.expert import REWARD_MODES, ExpertScheduler
from capita.policy import load_policy, policy_from_snapshot, save_policy
from capita.scheduler import Limits, read_transcript, replay
from capita.trainer import ALGOS, TrainConfig, state_table, train


class UsageError(Exception):
    pass


def optional_int(text: str) -> int | None:
    return None if text.lower() in ("none", "inf", "unlimited") else int(text)


def _bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def read_config(path: str) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment; keys may use dashes or underscores."""
    out = {}
    for n, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


# ---------------------------------------------------------------------------
# argument groups


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="master seed (falls back to $CAPITA_SEED, then 0)")
    p.add_argument("--config", default=None, help="flat key=value file supplying defaults for any flag")


def _add_backend(p: argparse.ArgumentParser) -> None:
    p.add_argument("--p-og", type=float, default=0.0, help="OG false-negative probability")
    p.add_argument("--p-es", type=float, default=0.0, help="ES spurious-failure probability")
    p.add_argument("--p-eg", type=float, default=0.0, help="EG random-direction probability")
    p.add_argument("--step-budget", type=int, default=None)
    p.add_argument("--invalid-budget", type=int, default=None)
    p.add_argument("--max-turns", type=int, default=None)
    p.add_argument("--max-sweeps", type=optional_int, default=1, help="EG sweeps over candidates; 'none' = unbounded")


def _backend(a) -> Backend:
    return Backend(p_eg=a.p_eg, p_og=a.p_og, p_es=a.p_es)


def _limits(a) -> Limits:
    return Limits(a.step_budget, a.invalid_budget, a.max_turns, a.max_sweeps)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="capita", description="Capability scheduling for household text tasks.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a task file")
    _add_common(p)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--split", choices=("base", "long-horizon", "mixed"), default="base")
    p.add_argument("--out", required=True)

    p = sub.add_parser("expert-run", help="run the expert scheduler over a task file")
    _add_common(p)
    _add_backend(p)
    p.add_argument("--tasks", required=True)
    p.add_argument("--report", help="CSV report path")
    p.add_argument("--report-json", help="JSON report path")
    p.add_argument("--transcripts", help="directory for per-episode JSONL transcripts")

    p = sub.add_parser("build-data", help="build a stage-1/2/3 dataset")
    _add_common(p)
    p.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    p.add_argument("--tasks", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tau", type=float, default=datagen.DEFAULT_TAU, help="query-match threshold for stage 2")
    p.add_argument("--p-og", type=float, default=0.2)
    p.add_argument("--p-es", type=float, default=0.1)
    p.add_argument("--p-eg", type=float, default=0.3)
    p.add_argument("--policy", help="policy snapshot rolled out in stage 2")
    p.add_argument("--base", help="dataset merged under the stage-2 or stage-3 samples")
    p.add_argument("--aug-factor", type=int, default=0, help="augmented copies per capability sample")
    p.add_argument("--max-sweeps", type=optional_int, default=None)

    p = sub.add_parser("train", help="train a scheduler policy")
    _add_common(p)
    d = TrainConfig()
    p.add_argument("--algo", choices=ALGOS, default=d.algo)
    p.add_argument("--gamma", type=float, default=d.gamma)
    p.add_argument("--epsilon", type=float, default=d.epsilon)
    p.add_argument("--group-size", type=int, default=d.group_size)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--iterations", type=int, default=d.iterations)
    p.add_argument("--inner-epochs", type=int, default=d.inner_epochs)
    p.add_argument("--reward-mode", choices=REWARD_MODES, default=d.reward_mode)
    p.add_argument("--hidden", type=int, default=d.hidden)
    p.add_argument("--probe-every", type=int, default=d.probe_every)
    p.add_argument("--data", help="dataset for eipo, grpo-reward and bc")
    p.add_argument("--split", choices=("train", "val", "all"), default="train")
    p.add_argument("--tasks", help="task file rolled out by grpo-return")
    p.add_argument("--probe-tasks", help="task file for the probe SR column")
    p.add_argument("--init", help="policy snapshot to start from")
    p.add_argument("--out", required=True, help="policy snapshot path")
    p.add_argument("--metrics", help="metrics CSV path")
    _add_backend(p)

    p = sub.add_parser("eval", help="evaluate a policy")
    _add_common(p)
    _add_backend(p)
    p.add_argument("--policy", required=True, help="snapshot path, or 'expert' / 'random'")
    p.add_argument("--tasks", required=True)
    p.add_argument("--seeds", help="comma-separated evaluation seeds (default: --seed)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--referring", action="store_true", help="rewrite exploration queries with synonyms")
    p.add_argument("--learned-caps", help="dataset whose EG/OG samples fit learned capabilities")
    p.add_argument("--report", help="CSV report path")
    p.add_argument("--report-json", help="JSON report path")
    p.add_argument("--transcripts", help="directory for per-episode JSONL transcripts")

    p = sub.add_parser("replay", help="re-simulate a transcript and compare")
    _add_common(p)
    p.add_argument("--transcript", required=True)
    p.add_argument("--out", help="write the re-simulated transcript here")
    return parser


def _config_path(argv: list[str]) -> str | None:
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    """Config values become the subcommand's defaults, so explicit flags still win."""
    path = _config_path(argv)
    subparsers = parser._subparsers._group_actions[0].choices
    command = next((tok for tok in argv if tok in subparsers), None)
    if path and command:
        subparser = subparsers[command]
        by_dest = {a.dest: a for a in subparser._actions}
        defaults = {}
        for key, raw in read_config(path).items():
            action = by_dest.get(key)
            if action is None or key in ("help", "config"):
                raise UsageError(f"unknown config key {key!r} for command {command}")
            if isinstance(action, argparse._StoreTrueAction):
                defaults[key] = _bool(raw)
                continue
            value = action.type(raw) if action.type else raw
            if action.choices is not None and value not in action.choices:
                raise UsageError(f"config {key}={raw!r} not in {sorted(action.choices)}")
            defaults[key] = value
            action.required = False
        subparser.set_defaults(**defaults)
    return parser.parse_args(argv)


def _seed(a) -> int:
    if a.seed is not None:
        return a.seed
    env_seed = os.environ.get("CAPITA_SEED")
    return int(env_seed) if env_seed else 0


def _emit(obj: dict) -> None:
    clean = {k: (None if isinstance(v, float) and v != v else v) for k, v in obj.items()}
    print(canonical_json(clean))


def _write_transcripts(directory: str, results, seeds, n_tasks: int) -> None:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    for k, r in enumerate(results):
        seed, i = seeds[k // n_tasks], k % n_tasks
        (out / f"{seed}-{i:05d}.jsonl").write_text(r.transcript_jsonl(), encoding="utf-8")


def _finish_eval(a, report, results, seeds, n_tasks) -> None:
    if a.report:
        harness.write_report(report, a.report, a.report_json)
    elif a.report_json:
        Path(a.report_json).write_text(report.to_json(), encoding="utf-8")
    if a.transcripts:
        _write_transcripts(a.transcripts, results, seeds, n_tasks)
    _emit({"command": a.command, "episodes": report.episodes, "sr": report.sr,
           "ssr": report.aggregate["ssr"], "attribution": report.attribution})


# ---------------------------------------------------------------------------
# commands


def cmd_gen(a) -> None:
    tasks = harness.task_suite(a.split, a.n, _seed(a))
    datagen.write_tasks(tasks, a.out)
    _emit({"command": "gen", "tasks": len(tasks), "out": a.out})


def cmd_expert_run(a) -> None:
    tasks = datagen.read_tasks(a.tasks)
    seeds = (_seed(a),)
    report, results = harness.evaluate(ExpertScheduler(), tasks, _backend(a), _limits(a), seeds,
                                       keep=bool(a.transcripts))
    _finish_eval(a, report, results, seeds, len(tasks))


def cmd_build_data(a) -> None:
    seed = _seed(a)
    tasks = datagen.read_tasks(a.tasks)
    if a.stage == 1:
        ds = datagen.build_stage1(tasks, seed=seed, p_eg=a.p_eg)
    elif a.stage == 2:
        if not a.policy:
            raise UsageError("stage 2 needs --policy")
        base = datagen.Dataset.read(a.base) if a.base else None
        ds = datagen.build_stage2(load_policy(a.policy), tasks, tau=a.tau, seed=seed,
                                  backend=Backend(p_eg=a.p_eg, p_og=a.p_og, p_es=a.p_es),
                                  limits=Limits(max_sweeps=a.max_sweeps), base=base)
    else:
        ds = datagen.build_stage3(tasks, a.p_og, a.p_es, seed=seed)
        if a.base:
            ds = datagen.Dataset.read(a.base).merged(ds)
    if a.aug_factor:
        ds = datagen.augment(ds, rng=np.random.default_rng([seed, 0xA06]), factor=a.aug_factor)
    ds.write(a.out)
    _emit({"command": "build-data", "stage": a.stage, "samples": len(ds), "counts": ds.counts(), "out": a.out})


def cmd_train(a) -> None:
    config = TrainConfig(a.algo, a.gamma, a.epsilon, a.group_size, a.batch_size, a.lr, a.iterations,
                         a.inner_epochs, a.reward_mode, a.hidden, a.probe_every)
    table = digest = None
    if a.data:
        ds = datagen.Dataset.read(a.data, expect_digest=None)
        digest = ds.feature_digest
        samples = ds.of("scheduler", None if a.split == "all" else a.split)
        if digest == datagen.FEATURE_DIGEST and samples:
            table = state_table(samples, config.gamma, config.reward_mode)
    elif a.algo != "grpo-return":
        raise UsageError(f"--algo {a.algo} needs --data")
    tasks = datagen.read_tasks(a.tasks) if a.tasks else None
    probe = datagen.read_tasks(a.probe_tasks) if a.probe_tasks else ()
    init = load_policy(a.init) if a.init else None
    result = train(config, table=table, tasks=tasks, probe_tasks=probe, backend=_backend(a), limits=_limits(a),
                   seed=_seed(a), init=init, dataset_digest=digest)
    save_policy(result.policy, a.out)
    if a.metrics:
        Path(a.metrics).write_text(result.metrics_csv(), encoding="utf-8")
    last = result.metrics[-1] if result.metrics else {}
    _emit({"command": "train", "algo": a.algo, "iterations": a.iterations, "out": a.out,
           "final_probe_sr": last.get("probe_sr")})


def cmd_eval(a) -> None:
    tasks = datagen.read_tasks(a.tasks)
    if a.policy == "expert":
        policy = ExpertScheduler()
    elif a.policy == "random":
        policy = policy_from_snapshot({"policy": "random"})
    else:
        policy = load_policy(a.policy)
    if a.referring:
        policy = harness.ReferringQueries(policy)
    backend = _backend(a)
    if a.learned_caps:
        backend = harness.learned_backend(datagen.Dataset.read(a.learned_caps), a.p_og, a.p_es)
    seeds = tuple(int(s) for s in a.seeds.split(",")) if a.seeds else (_seed(a),)
    report, results = harness.evaluate(policy, tasks, backend, _limits(a), seeds, workers=a.workers,
                                       keep=bool(a.transcripts))
    _finish_eval(a, report, results, seeds, len(tasks))


def cmd_replay(a) -> int:
    text = Path(a.transcript).read_text(encoding="utf-8")
    result = replay(read_transcript(text), loader=harness.load_any)
    regenerated = result.transcript_jsonl()
    if a.out:
        Path(a.out).write_text(regenerated, encoding="utf-8")
    same = regenerated == text
    _emit({"command": "replay", "identical": same, "lines": len(result.transcript)})
    if not same:
        _error("replay", "ReplayMismatch", "re-simulated transcript differs from the input")
        return 1
    return 0


COMMANDS = {"gen": cmd_gen, "expert-run": cmd_expert_run, "build-data": cmd_build_data, "train": cmd_train,
            "eval": cmd_eval, "replay": cmd_replay}


def _error(command: str | None, kind: str, message: str) -> None:
    print("error " + canonical_json({"command": command, "error": kind, "message": message}), file=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _apply_config(parser, argv)
    except UsageError as e:
        _error(None, "UsageError", str(e))
        return 2
    except (OSError, ValueError) as e:
        _error(None, type(e).__name__, str(e))
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        code = COMMANDS[args.command](args)
        return int(code or 0)
    except UsageError as e:
        _error(args.command, "UsageError", str(e))
        return 2
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as e:
        _error(args.command, type(e).__name__, str(e))
        return 1


if __name__ == "__main__":
    sys.exit(main())
