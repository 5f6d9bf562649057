"""
Run directories.

Every subcommand writes into one directory:
- manifest.json: command, argv, resolved config, seed, package versions, timestamps
- events.jsonl: one JSON object per line (epochs, cache refreshes, aborts)
- metrics.csv: epoch,l_emb,l_def,mean_d_fit
"""

import csv
import json
import logging
import platform
import uuid
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import numpy as np
import scipy
import trimesh

from . import __version__

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
EVENTS = "events.jsonl"
METRICS = "metrics.csv"
METRICS_HEADER = ("epoch", "l_emb", "l_def", "mean_d_fit")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat().replace("+00:00", "Z")


def package_versions() -> dict[str, str]:
    return {
        "retrofit": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "trimesh": trimesh.__version__,
    }


class RunManager:
    """Owns one run directory."""

    def __init__(self, directory: str | Path):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.run_id = self._existing_id() or str(uuid.uuid4())

    def _existing_id(self) -> str | None:
        manifest = self.read_manifest()
        return manifest.get("id") if manifest else None

    def path(self, name: str) -> Path:
        return self.dir / name

    def read_manifest(self) -> dict | None:
        path = self.path(MANIFEST)
        if not path.exists():
            return None
        try:
            with open(path, encoding="utf-8") as f:
                return json.load(f)
        except json.JSONDecodeError:
            logger.warning("ignoring unreadable manifest %s", path)
            return None

    def write_manifest(self, command: str, argv: list[str], config: dict[str, Any],
                       seed: int | None = None, **extra) -> dict:
        """Write (or update) the reproducibility manifest, keeping created_at."""
        now = _now()
        existing = self.read_manifest() or {}
        data = {
            "id": self.run_id,
            "command": command,
            "argv": list(argv),
            "seed": seed,
            "config": config,
            "versions": package_versions(),
            "created_at": existing.get("created_at", now),
            "updated_at": now,
            **extra,
        }
        with open(self.path(MANIFEST), "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2, default=_json_default)
        return data

    def log_event(self, event: str, **data):
        record = {"event": event, "time": _now(), **data}
        with open(self.path(EVENTS), "a", encoding="utf-8") as f:
            f.write(json.dumps(record, default=_json_default) + "\n")

    def read_events(self) -> list[dict]:
        path = self.path(EVENTS)
        if not path.exists():
            return []
        with open(path, encoding="utf-8") as f:
            return [json.loads(line) for line in f if line.strip()]

    def reset_metrics(self):
        with open(self.path(METRICS), "w", encoding="utf-8", newline="") as f:
            csv.writer(f).writerow(METRICS_HEADER)

    def append_metrics(self, epoch: int, l_emb: float, l_def: float, mean_d_fit: float):
        path = self.path(METRICS)
        if not path.exists():
            self.reset_metrics()
        with open(path, "a", encoding="utf-8", newline="") as f:
            csv.writer(f).writerow([epoch, repr(float(l_emb)), repr(float(l_def)), repr(float(mean_d_fit))])

    def write_json(self, name: str, data: Any) -> Path:
        path = self.path(name)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2, default=_json_default)
        return path


def _json_default(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"not JSON serialisable: {type(value).__name__}")


def list_runs(workdir: str | Path) -> list[dict]:
    """Manifests found under workdir (id, command, dir, updated_at), newest first."""
    result = []
    for path in Path(workdir).rglob(MANIFEST):
        try:
            with open(path, encoding="utf-8") as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError):
            continue
        result.append(
            {
                "id": data.get("id", path.parent.name),
                "command": data.get("command", ""),
                "dir": str(path.parent),
                "updated_at": data.get("updated_at", ""),
            }
        )
    result.sort(key=lambda x: x["updated_at"], reverse=True)
    return result
