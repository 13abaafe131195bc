"""Schema-versioned CSV output and JSONL checkpoints.

Every CSV starts with a ``# schema: <name>/<version>`` line followed by the
column header. Floats are written with ``repr`` so files are byte-identical
for identical results and parse back exactly.
"""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .credit import KLAdaptiveTracker, TrackerEntry
from .policy import PolicyParams

SCHEMAS = {
    "sign_accuracy": (1, ("G", "N", "spread", "center", "trials", "tol_zero", "accuracy")),
    "k_sweep": (1, ("method", "K", "sign_accuracy", "mae", "reward_mse", "n_groups")),
    "train": (
        1,
        ("step", "mode", "mean_acc_32", "entropy", "upstream_obj", "downstream_obj", "adv_zero_rate", "generated_tokens", "dispatches",
         "recomputed_prefix_tokens", "kl_batch", "kl_segment"),
    ),
    "shortcut": (
        1,
        ("strategy", "split", "diversity", "diversity_ci", "zero_rate", "zero_rate_ci", "length", "length_ci", "n_problems"),
    ),
    "profile": (1, ("method", "bin", "mean_advantage", "mean_reward", "n")),
    "cost_audit": (
        1,
        ("problem_id", "seed", "rollout", "generated_tokens", "segment_tokens", "downstream_tokens", "recomputed_prefix_tokens", "batch_dispatches"),
    ),
}

POLICY_FORMAT = ("skpo-policy", 1)
TRACKER_FORMAT = ("skpo-tracker", 1)


class OutputError(OSError):
    """Output location cannot be written."""


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "nan" if math.isnan(v) else repr(v)
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def format_csv(schema: str, rows: Iterable[Mapping]) -> str:
    version, columns = SCHEMAS[schema]
    buf = io.StringIO()
    buf.write(f"# schema: {schema}/{version}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        missing = [c for c in columns if c not in row]
        if missing:
            raise KeyError(f"row missing columns {missing} for schema {schema}")
        w.writerow([_cell(row[c]) for c in columns])
    return buf.getvalue()


def write_csv(path, schema: str, rows: Iterable[Mapping]) -> Path:
    text = format_csv(schema, rows)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc}") from exc
    return path


def read_csv(path) -> tuple[str, int, list[dict]]:
    """Returns ``(schema, version, rows)`` with every value as a string."""
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# schema: "):
        raise ValueError(f"{path} has no schema header")
    name, version = lines[0][len("# schema: ") :].rsplit("/", 1)
    rows = list(csv.DictReader(lines[1:]))
    return name, int(version), rows


# -- checkpoints -------------------------------------------------------------------


def save_policy(policy: PolicyParams, path) -> Path:
    """One header record, then one ``(tag, window, logits)`` record per stored row, sorted."""
    name, version = POLICY_FORMAT
    lines = [json.dumps({"format": name, "version": version, "window": policy.window, "snapshot_id": policy.snapshot_id})]
    for tag, w in sorted(policy.keys(), key=lambda k: (str(k[0]), k[1])):
        lines.append(json.dumps({"tag": tag, "window": list(w), "logits": [float(x) for x in policy.logits((tag, w))]}))
    return _write_lines(path, lines)


def load_policy(path) -> PolicyParams:
    header, records = _read_records(path, POLICY_FORMAT)
    policy = PolicyParams(int(header["window"]), int(header["snapshot_id"]))
    for rec in records:
        policy.set_logits((rec["tag"], tuple(rec["window"])), rec["logits"])
    return policy


def save_tracker(tracker: KLAdaptiveTracker, path) -> Path:
    name, version = TRACKER_FORMAT
    lines = [
        json.dumps(
            {
                "format": name,
                "version": version,
                "tau_half": tracker.tau_half,
                "rho_min": tracker.rho_min,
                "rho_max": tracker.rho_max,
            }
        )
    ]
    for key, value, n in tracker.state():
        lines.append(json.dumps({"key": key, "value": value, "n": n}))
    return _write_lines(path, lines)


def load_tracker_entries(path) -> tuple[dict, dict]:
    """Returns ``(header, entries)``; apply with :func:`restore_tracker`."""
    header, records = _read_records(path, TRACKER_FORMAT)
    return header, {r["key"]: TrackerEntry(float(r["value"]), float(r["n"]), True) for r in records}


def restore_tracker(tracker: KLAdaptiveTracker, path) -> KLAdaptiveTracker:
    header, entries = load_tracker_entries(path)
    tracker.tau_half, tracker.rho_min, tracker.rho_max = header["tau_half"], header["rho_min"], header["rho_max"]
    tracker.entries = entries
    return tracker


def _write_lines(path, lines: Sequence[str]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc}") from exc
    return path


def _read_records(path, fmt):
    lines = [l for l in Path(path).read_text().splitlines() if l.strip()]
    if not lines:
        raise ValueError(f"{path} is empty")
    header = json.loads(lines[0])
    if (header.get("format"), header.get("version")) != fmt:
        raise ValueError(f"{path}: expected format {fmt[0]}/{fmt[1]}, got {header.get('format')}/{header.get('version')}")
    return header, [json.loads(l) for l in lines[1:]]
