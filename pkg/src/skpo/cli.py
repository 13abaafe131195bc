"""Command-line entry point: ``skpo <command> [--config FILE] [--set key=value ...]``.

Each command writes ``<out>/<command>.csv`` (schema-versioned) plus
``<out>/config.txt`` with the resolved configuration, and prints one summary
line. Execution-only keys (``out``, ``workers``) are left out of
``config.txt`` so outputs are identical for any ``--workers``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from functools import partial
from pathlib import Path

import numpy as np

from .analysis import advantage_profile, shortcut_eval, split_grid
from .config import COMMANDS, ConfigError, RunConfig
from .io import OutputError, save_policy, save_tracker, write_csv
from .mc_lab import k_sweep, sign_accuracy_experiment
from .optimize import train
from .parallel import pmap
from .policy import PolicyParams, heuristic_policy
from .rollout import run_single_pass
from .seeding import child_seed

log = logging.getLogger("skpo")

EXECUTION_KEYS = ("out", "workers")


def base_policy(cfg: RunConfig, problems) -> PolicyParams:
    if cfg.init == "uniform":
        return PolicyParams()
    return heuristic_policy(problems, fidelity=cfg.fidelity)


def _budget(cfg: RunConfig):
    return cfg.token_budget or None


# -- commands -----------------------------------------------------------------------


def _sign_cell(cfg: RunConfig, item):
    (i, N), (j, spread) = item
    acc = sign_accuracy_experiment(cfg.sign_config(N, spread), child_seed(cfg.seed, "sign", i, j))
    return {
        "G": cfg.G, "N": N, "spread": spread, "center": cfg.center,
        "trials": cfg.trials, "tol_zero": cfg.tol_zero, "accuracy": acc,
    }


def cmd_sign_accuracy(cfg: RunConfig):
    cells = [(n, s) for n in enumerate(cfg.N_values) for s in enumerate(cfg.spreads)]
    rows = pmap(partial(_sign_cell, cfg), cells, cfg.workers)
    narrow = min(cfg.spreads)
    hits = [r for r in rows if r["N"] == 512 and r["spread"] == narrow]
    summary = f"sign-accuracy: {len(rows)} cells"
    if hits:
        summary += f"; N=512 spread={narrow!r} accuracy={hits[0]['accuracy']:.4f}"
    return {"sign_accuracy": rows}, summary


def cmd_k_sweep(cfg: RunConfig):
    problems = cfg.problems()
    res = k_sweep(
        problems, base_policy(cfg, problems), cfg.K_values, seed=cfg.seed, G=cfg.G,
        bins=cfg.bins, tol_zero=cfg.tol_zero, workers=cfg.workers,
    )
    last = res.row("mc", cfg.K_values[-1])
    grpo = res.row("grpo")
    summary = (
        f"k-sweep: {res.n_groups} mixed groups; K={last['K']} sign={last['sign_accuracy']:.4f} "
        f"mae={last['mae']:.4f}; grpo sign={grpo['sign_accuracy']:.4f} mae={grpo['mae']:.4f}"
    )
    return {"k_sweep": res.rows}, summary


def _train_one(cfg: RunConfig, problems, mode: str):
    return train(
        mode, problems, cfg.step_config(), steps=cfg.steps, seed=cfg.seed,
        policy=base_policy(cfg, problems), token_budget=_budget(cfg),
        two_batch=cfg.two_batch, eval_every=cfg.eval_every,
    )


def cmd_train(cfg: RunConfig):
    problems = cfg.problems()
    res = _train_one(cfg, problems, cfg.mode)
    out = Path(cfg.out)
    save_policy(res.policy, out / "policy.jsonl")
    save_tracker(res.value_tracker, out / "value_tracker.jsonl")
    save_tracker(res.length_tracker, out / "length_tracker.jsonl")
    accs = [r["mean_acc_32"] for r in res.log if not np.isnan(r["mean_acc_32"])]
    final = f"{accs[-1]:.4f}" if accs else "n/a"
    summary = f"train[{cfg.mode}]: {len(res.log)} steps, {res.total_generated} generated tokens, final mean_acc_32={final}"
    return {"train": res.log}, summary


def cmd_shortcut(cfg: RunConfig):
    problems = cfg.problems()
    report = shortcut_eval(
        base_policy(cfg, problems), problems, splits=split_grid(cfg.n_splits), G=cfg.G,
        seed=cfg.seed, workers=cfg.workers,
    )
    summary = f"shortcut: {len(report.problem_ids)} problems, {len(report.skipped)} skipped"
    return {"shortcut": report.rows()}, summary


def cmd_profile(cfg: RunConfig):
    problems = cfg.problems()
    results = pmap(partial(_train_one, cfg, problems), list(cfg.methods), cfg.workers)
    policies = {m: r.policy for m, r in zip(cfg.methods, results)}
    prof = advantage_profile(
        policies, problems, bins=cfg.bins, n_responses=cfg.profile_responses, seed=cfg.seed, workers=cfg.workers
    )
    cov = ", ".join(f"{m}={prof.coverage[m]}" for m in prof.methods)
    summary = f"profile: {prof.n} problems with every method correct; coverage {cov}"
    return {"profile": prof.rows()}, summary


def _audit_unit(cfg: RunConfig, policy, item):
    problem, s = item
    seed = child_seed(cfg.seed, "audit", problem.problem_id, s)
    rows = []
    for name, two in (("single_pass", False), ("two_batch", True)):
        led = run_single_pass(problem, policy, cfg.G, seed, two_batch=two).ledger
        rows.append(
            {
                "problem_id": problem.problem_id, "seed": s, "rollout": name,
                "generated_tokens": led.total_generated,
                "segment_tokens": led.generated_tokens.get("segment", 0),
                "downstream_tokens": led.generated_tokens.get("downstream", 0),
                "recomputed_prefix_tokens": led.recomputed_prefix_tokens,
                "batch_dispatches": led.batch_dispatches,
            }
        )
    return rows


def cmd_cost_audit(cfg: RunConfig):
    problems = cfg.problems()
    policy = base_policy(cfg, problems)
    units = [(p, s) for p in problems for s in range(cfg.audit_seeds)]
    rows = [r for pair in pmap(partial(_audit_unit, cfg, policy), units, cfg.workers) for r in pair]
    singles, doubles = rows[0::2], rows[1::2]
    parity = all(a["generated_tokens"] == b["generated_tokens"] for a, b in zip(singles, doubles))
    dispatch = {r["batch_dispatches"] for r in singles}, {r["batch_dispatches"] for r in doubles}
    summary = f"cost-audit: {len(units)} matched rollouts; token parity={parity}; dispatches single={sorted(dispatch[0])} two-batch={sorted(dispatch[1])}"
    return {"cost_audit": rows}, summary


HANDLERS = {
    "sign-accuracy": cmd_sign_accuracy,
    "k-sweep": cmd_k_sweep,
    "train": cmd_train,
    "shortcut": cmd_shortcut,
    "profile": cmd_profile,
    "cost-audit": cmd_cost_audit,
}


# -- argument handling ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="skpo", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--workers", type=int)
        p.add_argument("--mode", choices=("skpo", "grpo", "spo"))
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args) -> RunConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    for flag in ("seed", "out", "workers", "mode"):
        v = getattr(args, flag)
        if v is not None:
            overrides[flag] = str(v)
    overrides["command"] = args.command
    if args.config:
        return RunConfig.load(args.config, overrides)
    return RunConfig.from_strings(overrides)


def provenance_text(cfg: RunConfig) -> str:
    return "".join(l for l in cfg.to_text().splitlines(True) if l.split(" = ", 1)[0] not in EXECUTION_KEYS)


def _check_writable(out: Path) -> None:
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-check"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OutputError(f"output directory {out} is not writable: {exc}") from exc


def run(cfg: RunConfig) -> str:
    out = Path(cfg.out)
    _check_writable(out)
    outputs, summary = HANDLERS[cfg.command](cfg)
    for schema, rows in outputs.items():
        write_csv(out / f"{cfg.command}.csv", schema, rows)
    try:
        (out / "config.txt").write_text(provenance_text(cfg))
    except OSError as exc:
        raise OutputError(f"cannot write {out / 'config.txt'}: {exc}") from exc
    return summary


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        print(run(cfg))
    except (ConfigError, OutputError, ValueError, FileNotFoundError) as exc:
        print(f"skpo {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
