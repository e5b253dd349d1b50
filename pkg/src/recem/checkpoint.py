"""Text checkpoints: a config block followed by one base64 record per parameter."""

from __future__ import annotations

import base64
import binascii
import hashlib
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, parse_text
from .models import ConceptModel

MAGIC = "RECEMCKPT v1"


class CheckpointError(ValueError):
    pass


def dumps(model: ConceptModel, config: RunConfig, seed: int) -> bytes:
    lines = [MAGIC, "[config]"]
    lines += [f"{k} = {v}" for k, v in config.items()]
    lines += ["[run]", f"seed = {int(seed)}", "[params]"]
    for name, p in sorted(model.parameters().items()):
        raw = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        shape = ",".join(str(s) for s in p.data.shape)
        lines.append(f"{name};{shape};{base64.b64encode(raw).decode('ascii')}")
    return ("\n".join(lines) + "\n").encode("ascii")


def save(path: str | Path, model: ConceptModel, config: RunConfig, seed: int) -> str:
    """Write the checkpoint and return its SHA-256 hex digest."""
    blob = dumps(model, config, seed)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def _sections(text: str) -> dict[str, list[str]]:
    lines = text.split("\n")
    if not lines or lines[0] != MAGIC:
        found = lines[0][:40] if lines else ""
        raise CheckpointError(f"unsupported checkpoint header {found!r}, expected {MAGIC!r}")
    sections: dict[str, list[str]] = {}
    current = None
    for line in lines[1:]:
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            sections[current] = []
        elif line:
            if current is None:
                raise CheckpointError("content before first section")
            sections[current].append(line)
    for need in ("config", "run", "params"):
        if need not in sections:
            raise CheckpointError(f"missing [{need}] section")
    return sections


def _decode(record: str) -> tuple[str, np.ndarray]:
    try:
        name, shape_s, payload = record.split(";")
    except ValueError:
        raise CheckpointError(f"malformed parameter record {record[:40]!r}") from None
    try:
        shape = tuple(int(s) for s in shape_s.split(",") if s)
    except ValueError:
        raise CheckpointError(f"parameter {name}: bad shape {shape_s!r}") from None
    try:
        raw = base64.b64decode(payload, validate=True)
    except (binascii.Error, ValueError):
        raise CheckpointError(f"parameter {name}: corrupted base64 payload") from None
    if len(raw) != 8 * int(np.prod(shape)):
        raise CheckpointError(f"parameter {name}: {len(raw)} bytes for shape {shape}")
    return name, np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)


def loads(blob: bytes, config: RunConfig | None = None) -> tuple[ConceptModel, RunConfig, int]:
    """Rebuild the model. ``config`` overrides the stored one (its parameter set must match)."""
    try:
        text = blob.decode("ascii")
    except UnicodeDecodeError:
        raise CheckpointError("checkpoint is not ASCII text") from None
    sec = _sections(text)
    try:
        stored = RunConfig(**parse_text("\n".join(sec["config"])))
    except (ConfigError, TypeError) as exc:
        raise CheckpointError(f"bad config block: {exc}") from exc
    run = dict(line.split(" = ", 1) for line in sec["run"])
    seed = int(run.get("seed", 0))
    cfg = config or stored
    model = ConceptModel(cfg.model_config(seed))
    params = model.parameters()
    values = dict(_decode(r) for r in sec["params"])
    missing = sorted(set(params) - set(values))
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters required by {cfg.variant}: {missing}")
    extra = sorted(set(values) - set(params))
    if extra:
        raise CheckpointError(f"checkpoint has parameters unknown to {cfg.variant}: {extra}")
    for name, p in params.items():
        if values[name].shape != p.data.shape:
            raise CheckpointError(f"parameter {name}: shape {values[name].shape} vs model {p.data.shape}")
        p.data = values[name].copy()
        p.grad = None
    model.trained = True
    return model, cfg, seed


def load(path: str | Path, config: RunConfig | None = None) -> tuple[ConceptModel, RunConfig, int]:
    return loads(Path(path).read_bytes(), config)
