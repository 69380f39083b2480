"""
Artifact Writers

Deterministic CSV/JSON output with provenance sidecars. Timestamps never
enter artifact bytes, so reruns with the same inputs and seed produce
identical files.
"""

import hashlib
import json
import logging
import os
import subprocess
from dataclasses import asdict, dataclass, field
from datetime import date, datetime
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
import pandas as pd

from services.errors import DataError

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.6f"
PROVENANCE_SUFFIX = ".provenance.json"


@dataclass(frozen=True)
class Provenance:
    config_hash: str
    seed: int
    git_revision: str
    stage: Optional[str] = None
    sources: Dict[str, Optional[str]] = field(default_factory=dict)

    def as_dict(self) -> Dict[str, Any]:
        return asdict(self)


_git_revision_cache: Optional[str] = None


def git_revision() -> str:
    """Current commit of the working tree, or 'unknown' outside a repository."""
    global _git_revision_cache
    if _git_revision_cache is not None:
        return _git_revision_cache
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
            check=True,
        )
        _git_revision_cache = out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        _git_revision_cache = "unknown"
    return _git_revision_cache


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _json_default(value):
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (pd.Timestamp, datetime)):
        return value.date().isoformat() if isinstance(value, pd.Timestamp) else value.isoformat()
    if isinstance(value, date):
        return value.isoformat()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def _replace(tmp: Path, path: Path) -> None:
    os.replace(tmp, path)


def _canonical_frame(frame: pd.DataFrame) -> pd.DataFrame:
    out = frame.copy()
    for col in out.columns:
        if pd.api.types.is_datetime64_any_dtype(out[col]):
            out[col] = out[col].dt.strftime("%Y-%m-%d")
        elif pd.api.types.is_bool_dtype(out[col]):
            out[col] = out[col].astype(int)
    return out


def write_csv(frame: pd.DataFrame, path, provenance: Optional[Provenance] = None) -> str:
    """Write a CSV (fixed float format, ISO dates, LF endings) and return its sha256."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    _canonical_frame(frame).to_csv(tmp, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    _replace(tmp, path)
    if provenance is not None:
        write_json({"file": path.name, "provenance": provenance.as_dict()}, path.with_name(path.name + PROVENANCE_SUFFIX))
    return sha256_file(path)


def write_json(payload: Dict[str, Any], path, provenance: Optional[Provenance] = None) -> str:
    """Write sorted-key JSON; provenance is embedded under 'provenance'."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = dict(payload)
    if provenance is not None:
        body["provenance"] = provenance.as_dict()
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(body, sort_keys=True, indent=2, default=_json_default) + "\n", encoding="utf-8")
    _replace(tmp, path)
    return sha256_file(path)


def read_json(path) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"Artifact not found: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"Malformed JSON artifact {path}: {e}") from e


def read_provenance(path) -> Optional[Dict[str, Any]]:
    """Provenance of a CSV (sidecar) or JSON (embedded) artifact."""
    path = Path(path)
    if path.suffix == ".json":
        return read_json(path).get("provenance")
    sidecar = path.with_name(path.name + PROVENANCE_SUFFIX)
    if not sidecar.exists():
        return None
    return read_json(sidecar).get("provenance")
