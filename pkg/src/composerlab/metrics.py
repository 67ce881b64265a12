"""Append-only JSON-lines metrics and report provenance."""

from __future__ import annotations

import json
import subprocess
import time
import uuid
from pathlib import Path
from typing import Any, Optional

SCHEMA_VERSION = 1


def build_id() -> str:
    """``git describe`` of the source tree, or ``"unknown"`` outside a checkout."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=here,
            capture_output=True,
            text=True,
            timeout=5,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


def new_run_id() -> str:
    return uuid.uuid4().hex[:12]


class MetricsWriter:
    """One JSON object per line: run id, phase, epoch/step, metric, value, wall clock."""

    def __init__(self, path, run_id: Optional[str] = None):
        self.path = Path(path)
        self.run_id = run_id or new_run_id()
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def log(self, phase: str, metric: str, value: Any, epoch: Optional[int] = None, step: Optional[int] = None) -> dict:
        rec = {
            "schema": SCHEMA_VERSION,
            "run_id": self.run_id,
            "phase": phase,
            "epoch": epoch,
            "step": step,
            "metric": metric,
            "value": value,
            "wall_clock": time.time(),
        }
        with self.path.open("a") as fh:
            fh.write(json.dumps(rec, sort_keys=True, default=_jsonable) + "\n")
        return rec


def read_metrics(path) -> list[dict]:
    with Path(path).open() as fh:
        return [json.loads(line) for line in fh if line.strip()]


def report_header(config, run_id: str) -> dict:
    return {"schema": SCHEMA_VERSION, "run_id": run_id, "build": build_id(), "config": config.as_dict()}


def write_report(path, config, run_id: str, body: dict) -> None:
    """JSON report embedding the resolved config and build id."""
    doc = report_header(config, run_id)
    doc.update(body)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True, default=_jsonable))


def _jsonable(o):
    if hasattr(o, "tolist"):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    return str(o)
