"""Persistence: trajectory/dataset JSONL streams, a binary checkpoint
container, run manifests with content hashes, and atomic writes.

Every write goes through write-temp-then-rename, so a crashed write never
leaves a half-readable artifact at the target path. JSONL records carry an
explicit schema_version; floats serialize with full round-trip precision
(json uses repr, the shortest form that parses back exactly).

Checkpoint container layout (little-endian):

    magic   8 bytes  b"RTRCKPT1"
    version u32
    then repeated sections until EOF:
        name_len u32, name utf-8, payload_len u64, payload bytes

Sections: "meta" (JSON: architecture, stage tag, config hash, params
version), "params" (float64 array), optional "anchor" (float64 array),
optional "opt" (JSON scalars) + "opt_m" + "opt_v" (float64 arrays).
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .il import DATASET_SCHEMA_VERSION, LabeledStep
from .rollout import (
    TRAJECTORY_SCHEMA_VERSION,
    Trajectory,
    trajectory_from_json,
    trajectory_to_json,
)
from .router import AnchorParams, Architecture, OptimizerState, RouterParams

CHECKPOINT_MAGIC = b"RTRCKPT1"
CHECKPOINT_VERSION = 1
MANIFEST_SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# Atomic write
# ---------------------------------------------------------------------------


def atomic_write_bytes(path: str | Path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def content_hash(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def hash_bytes(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


# ---------------------------------------------------------------------------
# Trajectories (JSONL)
# ---------------------------------------------------------------------------


def save_trajectories(path: str | Path, trajectories: list[Trajectory]) -> None:
    lines = [
        json.dumps(trajectory_to_json(t), sort_keys=True, separators=(",", ":"))
        for t in trajectories
    ]
    atomic_write_text(path, "".join(line + "\n" for line in lines))


def load_trajectories(path: str | Path) -> list[Trajectory]:
    out = []
    for lineno, obj in _read_jsonl(path):
        version = obj.get("schema_version")
        if version != TRAJECTORY_SCHEMA_VERSION:
            raise DataError(
                f"{path}:{lineno}: trajectory schema_version {version!r} != "
                f"{TRAJECTORY_SCHEMA_VERSION}; no migration available"
            )
        out.append(trajectory_from_json(obj))
    return out


def _read_jsonl(path: str | Path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing artifact: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: corrupt JSONL line ({exc})") from exc


# ---------------------------------------------------------------------------
# Labeled datasets (JSONL, shared by both stages via the stage tag)
# ---------------------------------------------------------------------------


def save_dataset(path: str | Path, dataset: list[LabeledStep]) -> None:
    lines = []
    for ex in dataset:
        lines.append(
            json.dumps(
                {
                    "schema_version": DATASET_SCHEMA_VERSION,
                    "task_id": ex.task_id,
                    "canonical_key": ex.canonical_key.decode("ascii"),
                    "features": [float(x) for x in ex.feature_vector],
                    "label": ex.label,
                    "stage": ex.stage,
                    "provenance": ex.provenance,
                },
                sort_keys=True,
                separators=(",", ":"),
            )
        )
    atomic_write_text(path, "".join(line + "\n" for line in lines))


def load_dataset(path: str | Path) -> list[LabeledStep]:
    out = []
    for lineno, obj in _read_jsonl(path):
        version = obj.get("schema_version")
        if version != DATASET_SCHEMA_VERSION:
            raise DataError(
                f"{path}:{lineno}: dataset schema_version {version!r} != "
                f"{DATASET_SCHEMA_VERSION}; no migration available"
            )
        out.append(
            LabeledStep(
                task_id=obj["task_id"],
                canonical_key=obj["canonical_key"].encode("ascii"),
                feature_vector=np.array(obj["features"], dtype=float),
                label=obj["label"],
                stage=obj["stage"],
                provenance=obj["provenance"],
            )
        )
    return out


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _pack_section(name: str, payload: bytes) -> bytes:
    name_b = name.encode("utf-8")
    return struct.pack("<I", len(name_b)) + name_b + struct.pack("<Q", len(payload)) + payload


def serialize_checkpoint(
    params: RouterParams,
    anchor: AnchorParams | None = None,
    opt: OptimizerState | None = None,
    stage: str = "IL",
    config_hash: str = "",
) -> bytes:
    meta = {
        "architecture": {
            "kind": params.arch.kind,
            "input_dim": params.arch.input_dim,
            "hidden_dim": params.arch.hidden_dim,
        },
        "stage": stage,
        "config_hash": config_hash,
        "params_version": params.version,
    }
    blob = CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION)
    blob += _pack_section("meta", json.dumps(meta, sort_keys=True).encode("utf-8"))
    blob += _pack_section("params", np.asarray(params.values, dtype="<f8").tobytes())
    if anchor is not None:
        blob += _pack_section("anchor", np.asarray(anchor.values, dtype="<f8").tobytes())
    if opt is not None:
        opt_meta = {
            "step_count": opt.step_count,
            "lr": opt.lr,
            "weight_decay": opt.weight_decay,
            "beta1": opt.beta1,
            "beta2": opt.beta2,
            "eps": opt.eps,
        }
        blob += _pack_section("opt", json.dumps(opt_meta, sort_keys=True).encode("utf-8"))
        blob += _pack_section("opt_m", np.asarray(opt.m, dtype="<f8").tobytes())
        blob += _pack_section("opt_v", np.asarray(opt.v, dtype="<f8").tobytes())
    return blob


@dataclass
class Checkpoint:
    params: RouterParams
    anchor: AnchorParams | None
    opt: OptimizerState | None
    stage: str
    config_hash: str


def deserialize_checkpoint(blob: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(blob) < len(CHECKPOINT_MAGIC) + 4 or blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise DataError(f"{source}: not a router checkpoint (bad magic)")
    offset = len(CHECKPOINT_MAGIC)
    (version,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    if version != CHECKPOINT_VERSION:
        raise DataError(
            f"{source}: checkpoint version {version} != {CHECKPOINT_VERSION}; "
            "no migration available"
        )
    sections: dict[str, bytes] = {}
    try:
        while offset < len(blob):
            (name_len,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            name = blob[offset : offset + name_len].decode("utf-8")
            if len(blob[offset : offset + name_len]) != name_len:
                raise DataError(f"{source}: truncated checkpoint (section name)")
            offset += name_len
            (payload_len,) = struct.unpack_from("<Q", blob, offset)
            offset += 8
            payload = blob[offset : offset + payload_len]
            if len(payload) != payload_len:
                raise DataError(f"{source}: truncated checkpoint (section {name!r})")
            offset += payload_len
            sections[name] = payload
    except struct.error as exc:
        raise DataError(f"{source}: truncated checkpoint ({exc})") from exc

    if "meta" not in sections or "params" not in sections:
        raise DataError(f"{source}: checkpoint missing required sections")
    meta = json.loads(sections["meta"].decode("utf-8"))
    arch = Architecture(
        kind=meta["architecture"]["kind"],
        input_dim=meta["architecture"]["input_dim"],
        hidden_dim=meta["architecture"]["hidden_dim"],
    )
    values = np.frombuffer(sections["params"], dtype="<f8").astype(float)
    if len(values) != arch.n_params:
        raise DataError(f"{source}: parameter count does not match architecture")
    params = RouterParams(arch, values, version=meta.get("params_version", 1))
    anchor = None
    if "anchor" in sections:
        anchor_values = np.frombuffer(sections["anchor"], dtype="<f8").astype(float)
        anchor = AnchorParams.freeze(RouterParams(arch, anchor_values))
    opt = None
    if "opt" in sections:
        opt_meta = json.loads(sections["opt"].decode("utf-8"))
        opt = OptimizerState(
            m=np.frombuffer(sections["opt_m"], dtype="<f8").astype(float),
            v=np.frombuffer(sections["opt_v"], dtype="<f8").astype(float),
            step_count=opt_meta["step_count"],
            lr=opt_meta["lr"],
            weight_decay=opt_meta["weight_decay"],
            beta1=opt_meta["beta1"],
            beta2=opt_meta["beta2"],
            eps=opt_meta["eps"],
        )
    return Checkpoint(params, anchor, opt, meta["stage"], meta["config_hash"])


def save_checkpoint(
    path: str | Path,
    params: RouterParams,
    anchor: AnchorParams | None = None,
    opt: OptimizerState | None = None,
    stage: str = "IL",
    config_hash: str = "",
) -> None:
    atomic_write_bytes(path, serialize_checkpoint(params, anchor, opt, stage, config_hash))


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing checkpoint: {path}")
    return deserialize_checkpoint(path.read_bytes(), source=str(path))


# ---------------------------------------------------------------------------
# Run manifests
# ---------------------------------------------------------------------------


@dataclass
class RunManifest:
    run_id: str
    stage: str
    config_hash: str
    seeds: list[int]
    artifacts: dict[str, str]  # relative path -> sha256
    created_at: float = field(default_factory=time.time)


def write_manifest(run_dir: str | Path, manifest: RunManifest) -> Path:
    run_dir = Path(run_dir)
    payload = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "run_id": manifest.run_id,
        "stage": manifest.stage,
        "config_hash": manifest.config_hash,
        "seeds": manifest.seeds,
        "artifacts": dict(sorted(manifest.artifacts.items())),
        "created_at": manifest.created_at,
    }
    path = run_dir / "manifest.json"
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(run_dir: str | Path) -> RunManifest:
    path = Path(run_dir) / "manifest.json"
    if not path.exists():
        raise DataError(f"missing manifest: {path}")
    obj = json.loads(path.read_text())
    if obj.get("schema_version") != MANIFEST_SCHEMA_VERSION:
        raise DataError(f"{path}: unsupported manifest schema version")
    return RunManifest(
        run_id=obj["run_id"],
        stage=obj["stage"],
        config_hash=obj["config_hash"],
        seeds=obj["seeds"],
        artifacts=obj["artifacts"],
        created_at=obj["created_at"],
    )


def manifest_for_dir(
    run_dir: str | Path, run_id: str, stage: str, config_hash: str, seeds: list[int]
) -> RunManifest:
    """Hash every regular file under run_dir (manifest itself excluded)."""
    run_dir = Path(run_dir)
    artifacts = {}
    for path in sorted(run_dir.rglob("*")):
        if path.is_file() and path.name != "manifest.json":
            artifacts[path.relative_to(run_dir).as_posix()] = content_hash(path)
    return RunManifest(run_id, stage, config_hash, seeds, artifacts)


def verify_manifest(run_dir: str | Path) -> None:
    """Raise DataError unless every referenced artifact exists and matches."""
    run_dir = Path(run_dir)
    manifest = read_manifest(run_dir)
    for rel, expected in manifest.artifacts.items():
        path = run_dir / rel
        if not path.exists():
            raise DataError(f"manifest references missing artifact {rel}")
        actual = content_hash(path)
        if actual != expected:
            raise DataError(
                f"artifact {rel} hash mismatch: manifest {expected[:12]}..., "
                f"file {actual[:12]}..."
            )
