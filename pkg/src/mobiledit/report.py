"""Structured experiment records and their CSV form."""

from __future__ import annotations

import csv
import hashlib
import json
import platform
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .errors import SchemaError

SCHEMA_VERSION = "1"

# column sets for every CSV the package emits; validated on load
SCHEMAS: dict[str, tuple[str, ...]] = {
    "curve_fm": ("iter", "fm_loss"),
    "curve_kd": ("iter", "fm_loss", "distill_loss", "total"),
    "curve_adv": ("iter", "loss_d", "loss_g_adv", "loss_recon"),
    "curve_vae": ("iter", "recon_loss"),
    "sensitivity": ("axis", "keep_fraction", "params", "flops", "latency_ms_median", "eval_loss"),
    "vae_study": ("r_t", "r_h", "r_w", "total_ratio", "psnr_db", "tokens", "latency_ms_median", "eval_loss"),
    "candidates": ("index", "params", "eval_loss"),
    "bench": ("shape", "tokens", "latency_ms_median"),
    "summary": ("file", "schema", "rows"),
}


def config_hash(config) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def environment() -> dict:
    return {"python": platform.python_version(), "torch": torch.__version__,
            "platform": platform.platform(), "threads": torch.get_num_threads()}


def _fmt(v):
    # repr round-trips floats exactly, which keeps reruns bitwise comparable
    if isinstance(v, float):
        return repr(v)
    return v


@dataclass
class ExperimentReport:
    stage: str
    config_hash: str
    schema: str
    rows: list[dict] = field(default_factory=list)
    curves: dict[str, list[dict]] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)
    env: dict = field(default_factory=environment)

    def add_row(self, **values) -> None:
        missing = set(SCHEMAS[self.schema]) - set(values)
        if missing:
            raise SchemaError(f"row missing columns {sorted(missing)}", path=self.schema)
        self.rows.append(values)

    def column(self, name: str) -> list:
        return [r[name] for r in self.rows]

    def write_csv(self, path) -> Path:
        return write_csv(path, self.schema, self.rows, self.config_hash)

    def to_json(self) -> dict:
        return {"stage": self.stage, "config_hash": self.config_hash, "schema": self.schema,
                "schema_version": SCHEMA_VERSION, "rows": self.rows, "notes": self.notes, "env": self.env}


def write_csv(path, schema: str, rows, cfg_hash: str = "") -> Path:
    """Rows are written under the schema's columns plus a trailing ``config_hash``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = SCHEMAS[schema]
    with path.open("w", newline="") as f:
        f.write(f"# schema={schema} version={SCHEMA_VERSION}\n")
        w = csv.writer(f)
        w.writerow([*cols, "config_hash"])
        for r in rows:
            w.writerow([_fmt(r[c]) for c in cols] + [cfg_hash])
    return path


def _header(path: Path, first: str) -> dict[str, str]:
    if not first.startswith("# schema="):
        raise SchemaError(f"{path} has no schema header", path=str(path))
    meta = dict(kv.split("=", 1) for kv in first[2:].split())
    if meta.get("version") != SCHEMA_VERSION:
        raise SchemaError(f"{path}: unsupported schema version {meta.get('version')}", path=str(path))
    if meta["schema"] not in SCHEMAS:
        raise SchemaError(f"{path}: unknown schema {meta['schema']}", path=str(path))
    return meta


def csv_schema(path) -> str:
    path = Path(path)
    with path.open() as f:
        return _header(path, f.readline().strip())["schema"]


def read_csv(path, schema: str | None = None) -> list[dict]:
    path = Path(path)
    with path.open() as f:
        meta = _header(path, f.readline().strip())
        if schema is not None and meta["schema"] != schema:
            raise SchemaError(f"{path}: expected schema {schema}, found {meta['schema']}", path=str(path))
        reader = csv.DictReader(f)
        expected = [*SCHEMAS[meta["schema"]], "config_hash"]
        if reader.fieldnames != expected:
            raise SchemaError(f"{path}: columns {reader.fieldnames} != {expected}", path=str(path))
        return list(reader)
