"""
Result files and the run manifest.

Every command writes plain CSV into its output directory and finishes with
`manifest.json`: config snapshot and hash, tool version, per-phase timings,
and size plus SHA-256 of every other file in the directory. The same manifest
is stored in the run registry unless that is switched off.
"""
import hashlib
import json
import logging
import math
import os
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np
from dotenv import load_dotenv
from pydantic import BaseModel, Field

from .. import __version__
from ..exceptions import ConfigError
from ..models.phase import PhaseState, format_real
from ..models.tableau import LOG10_ZERO_SENTINEL

load_dotenv()

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
DEFAULT_OUTPUT_DIR = os.getenv("PARAREAL_OUTPUT_DIR", "./runs")


class FileEntry(BaseModel):
    name: str
    size: int
    sha256: str


class RunManifest(BaseModel):
    command: str
    config: dict
    config_hash: str
    tool_version: str = __version__
    timings: dict = Field(default_factory=dict)
    files: List[FileEntry] = Field(default_factory=list)


def config_hash(snapshot: dict) -> str:
    canonical = json.dumps(snapshot, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def file_sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _cell(value) -> str:
    if isinstance(value, str):
        return value
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "nan"
    return format_real(value)


def write_table(path: Path, header: Sequence[str], rows: Iterable[Sequence], comments: Sequence[str] = ()) -> Path:
    with open(path, "w") as f:
        for line in comments:
            f.write(f"# {line}\n")
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(_cell(v) for v in row) + "\n")
    return path


def write_trajectory(path: Path, states: Sequence[PhaseState], dt: float) -> Path:
    d = states[0].d if states else 0
    header = ["n", "t"] + [f"p{i + 1}" for i in range(d)] + [f"q{i + 1}" for i in range(d)]
    rows = ([n, n * dt, *s.as_vector()] for n, s in enumerate(states))
    return write_table(path, header, rows)


def write_log10_grid(path: Path, grid: np.ndarray, what: str) -> Path:
    """Rows are iterations k, columns time indices n."""
    header = ["k"] + [str(n) for n in range(grid.shape[1])]
    rows = ([k, *grid[k]] for k in range(grid.shape[0]))
    comments = [f"log10 {what}; rows: iteration k, columns: time index n",
                f"{LOG10_ZERO_SENTINEL:g} marks exact zeros, nan marks cells that were not measured"]
    return write_table(path, header, rows, comments)


def write_matrix(path: Path, matrix: np.ndarray, comments: Sequence[str] = ()) -> Path:
    with open(path, "w") as f:
        for line in comments:
            f.write(f"# {line}\n")
        for row in np.atleast_2d(matrix):
            f.write(",".join(format_real(x) for x in row) + "\n")
    return path


def resolve_output_dir(out: Optional[str], config_dir: Optional[str], command: str) -> Path:
    base = Path(out or config_dir or Path(DEFAULT_OUTPUT_DIR) / command)
    try:
        base.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"cannot create output directory {base}: {e}")
    if not os.access(base, os.W_OK):
        raise ConfigError(f"output directory {base} is not writable")
    return base


class RunRecorder:
    """Collects phase timings for one command and writes the manifest at the end."""

    def __init__(self, command: str, output_dir: Path, snapshot: dict, registry: bool = True,
                 registry_url: Optional[str] = None):
        self.command = command
        self.output_dir = Path(output_dir)
        self.snapshot = snapshot
        self.registry = registry
        self.registry_url = registry_url
        self.timings = {}
        self._started = time.perf_counter()

    def path(self, name: str) -> Path:
        target = self.output_dir / name
        target.parent.mkdir(parents=True, exist_ok=True)
        return target

    @contextmanager
    def phase(self, name: str):
        started = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - started
            logger.info(f"{self.command}: {name} took {self.timings[name]:.2f}s")

    def inventory(self) -> List[FileEntry]:
        entries = []
        for path in sorted(p for p in self.output_dir.rglob("*") if p.is_file()):
            rel = path.relative_to(self.output_dir).as_posix()
            if rel == MANIFEST_NAME:
                continue
            entries.append(FileEntry(name=rel, size=path.stat().st_size, sha256=file_sha256(path)))
        return entries

    def finish(self, status: str = "ok") -> RunManifest:
        self.timings["total"] = time.perf_counter() - self._started
        manifest = RunManifest(
            command=self.command,
            config=self.snapshot,
            config_hash=config_hash(self.snapshot),
            timings=self.timings,
            files=self.inventory(),
        )
        (self.output_dir / MANIFEST_NAME).write_text(manifest.model_dump_json(indent=2))
        if self.registry:
            record_run(manifest, self.output_dir, status, self.registry_url)
        logger.info(f"{self.command}: wrote {len(manifest.files)} files to {self.output_dir}")
        return manifest


def record_run(manifest: RunManifest, output_dir: Path, status: str = "ok", url: Optional[str] = None):
    from ..models.database import get_session
    from ..models.run_record import RunFile, RunRecord

    db = get_session(url)
    try:
        record = RunRecord(
            command=manifest.command,
            config_hash=manifest.config_hash,
            tool_version=manifest.tool_version,
            output_dir=str(Path(output_dir).resolve()),
            config_snapshot=json.dumps(manifest.config, sort_keys=True),
            timings=json.dumps(manifest.timings, sort_keys=True),
            total_seconds=manifest.timings.get("total", 0.0),
            status=status,
        )
        record.files = [RunFile(name=f.name, size=f.size, sha256=f.sha256) for f in manifest.files]
        db.add(record)
        db.commit()
        db.refresh(record)
        logger.debug(f"registered run {record.id}")
        return record.id
    except Exception as e:
        db.rollback()
        logger.warning(f"could not record run in registry: {e}")
        return None
    finally:
        db.close()
