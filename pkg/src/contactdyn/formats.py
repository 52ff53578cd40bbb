"""On-disk formats: JSON-lines datasets, float32 checkpoints, reports.

Dataset floats go through ``repr``-exact JSON, so a read after a write
returns identical arrays. Checkpoints store parameters as little-endian
float32, so restored values differ from the float64 training state by at
most half an ulp of float32 (relative 2**-24).
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose
from .model import ModelConfig, param_shapes
from .simenv import Trajectory

DATASET_FORMAT = "contactdyn-dataset"
CHECKPOINT_FORMAT = "contactdyn-checkpoint"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """Malformed, truncated or inconsistent artifact."""


class DomainMismatchError(FormatError):
    pass


def _umask() -> int:
    mask = os.umask(0)
    os.umask(mask)
    return mask


def atomic_write(path: str, data: bytes | str) -> None:
    """Write to a temporary sibling then rename over ``path``."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        os.chmod(tmp, 0o666 & ~_umask())
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def _reject_constant(token):
    raise FormatError(f"non-finite number token {token!r}")


def loads(line: str):
    return json.loads(line, parse_constant=_reject_constant)


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# ---------------------------------------------------------------- datasets


@dataclass
class DatasetFile:
    manifest: dict
    trajectories: list[Trajectory] = field(default_factory=list)

    @property
    def domain(self) -> str:
        return self.manifest["domain"]


def trajectory_record(tr: Trajectory) -> dict:
    n = tr.s.p.shape[0]
    s = np.concatenate([tr.s.p, tr.s.R.reshape(n, 9)], axis=1)
    return {
        "domain": tr.domain,
        "seed": int(tr.seed),
        "cloud": tr.cloud.tolist(),
        "s": s.tolist(),
        "q": tr.q.tolist(),
        "a": tr.a.tolist(),
        "c": [int(v) for v in tr.c],
        "forces": tr.forces.tolist(),
        "half_extents": np.asarray(tr.half_extents, dtype=np.float64).tolist(),
    }


def _array(rec: dict, key: str, ndim: int) -> np.ndarray:
    try:
        arr = np.asarray(rec[key], dtype=np.float64)
    except KeyError:
        raise FormatError(f"trajectory record missing field {key!r}") from None
    except (TypeError, ValueError) as exc:
        raise FormatError(f"field {key!r} is not a numeric array: {exc}") from None
    if arr.ndim != ndim:
        raise FormatError(f"field {key!r} has {arr.ndim} dims, expected {ndim}")
    return arr


def trajectory_from_record(rec: dict) -> Trajectory:
    s = _array(rec, "s", 2)
    if s.shape[1] != 12:
        raise FormatError("pose rows must hold 3 translation + 9 rotation entries")
    n = s.shape[0]
    q, a, forces = _array(rec, "q", 2), _array(rec, "a", 2), _array(rec, "forces", 3)
    c = np.asarray(rec.get("c", []), dtype=np.int64)
    if not (len(q) == len(a) == len(c) == len(forces) == n):
        raise FormatError("per-step arrays have inconsistent lengths")
    return Trajectory(
        s=Pose(s[:, :3].copy(), s[:, 3:].reshape(n, 3, 3).copy()),
        q=q, a=a, c=c, forces=forces,
        cloud=_array(rec, "cloud", 2),
        domain=rec["domain"],
        seed=int(rec["seed"]),
        half_extents=_array(rec, "half_extents", 1),
    )


def dataset_manifest(domain: str, count: int, env: dict, K: int, H: int, run_config: dict | None, seed: int) -> dict:
    return {
        "format": DATASET_FORMAT,
        "version": FORMAT_VERSION,
        "domain": domain,
        "count": count,
        "K": K,
        "H": H,
        "seed": seed,
        "env": env,
        "env_hash": sha256(dumps(env).encode()),
        "run_config": run_config,
    }


def write_dataset(path: str, manifest: dict, trajectories: list[Trajectory]) -> None:
    if manifest.get("count") != len(trajectories):
        raise FormatError("manifest count does not match the number of trajectories")
    for tr in trajectories:
        if tr.domain != manifest["domain"]:
            raise DomainMismatchError(f"trajectory domain {tr.domain!r} != manifest domain {manifest['domain']!r}")
    try:
        lines = [dumps(manifest)] + [dumps(trajectory_record(tr)) for tr in trajectories]
    except ValueError as exc:
        raise FormatError(f"cannot serialise dataset: {exc}") from exc
    atomic_write(path, "\n".join(lines) + "\n")


def read_dataset(path: str) -> DatasetFile:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise FormatError(f"{path}: empty file, no manifest")
    try:
        manifest = loads(lines[0])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: unreadable manifest ({exc})") from None
    if not isinstance(manifest, dict) or manifest.get("format") != DATASET_FORMAT:
        raise FormatError(f"{path}: not a dataset file")
    if manifest.get("version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {manifest.get('version')}")
    if sha256(dumps(manifest.get("env")).encode()) != manifest.get("env_hash"):
        raise FormatError(f"{path}: env config hash mismatch")
    if len(lines) - 1 != manifest.get("count"):
        raise FormatError(f"{path}: manifest declares {manifest.get('count')} trajectories, found {len(lines) - 1} (truncated?)")
    trajs = []
    for i, line in enumerate(lines[1:], start=1):
        try:
            rec = loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: line {i + 1} unreadable ({exc})") from None
        tr = trajectory_from_record(rec)
        if tr.domain != manifest["domain"]:
            raise DomainMismatchError(f"{path}: record {i} has domain {tr.domain!r}, manifest says {manifest['domain']!r}")
        trajs.append(tr)
    return DatasetFile(manifest, trajs)


# ------------------------------------------------------------- checkpoints


@dataclass
class CheckpointFile:
    manifest: dict
    params: dict[str, np.ndarray]

    @property
    def model_config(self) -> ModelConfig:
        m = dict(self.manifest["model"])
        return ModelConfig(**m)


def write_checkpoint(path: str, params: dict[str, np.ndarray], model: dict, phase: str, epoch: int, seed: int,
                     parent_hash: str | None, run_config: dict | None = None, extra: dict | None = None) -> str:
    """Serialise and return the file's sha256 (used as the child's parent hash)."""
    if phase == "finetune" and not parent_hash:
        raise FormatError("finetune checkpoints need a parent hash")
    names = sorted(params)
    blob = b"".join(np.asarray(params[k], dtype="<f4").tobytes() for k in names)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": FORMAT_VERSION,
        "model": model,
        "phase": phase,
        "epoch": epoch,
        "seed": seed,
        "parent_hash": parent_hash,
        "tensors": [{"name": k, "shape": list(np.shape(params[k]))} for k in names],
        "dtype": "float32-le",
        "blob_bytes": len(blob),
        "blob_sha256": sha256(blob),
        "run_config": run_config,
        **(extra or {}),
    }
    data = dumps(manifest).encode() + b"\n" + blob
    atomic_write(path, data)
    return sha256(data)


def file_hash(path: str) -> str:
    with open(path, "rb") as fh:
        return sha256(fh.read())


def read_checkpoint(path: str) -> CheckpointFile:
    with open(path, "rb") as fh:
        data = fh.read()
    head, sep, blob = data.partition(b"\n")
    if not sep:
        raise FormatError(f"{path}: missing checkpoint manifest")
    try:
        manifest = loads(head.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable checkpoint manifest ({exc})") from None
    if not isinstance(manifest, dict) or manifest.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path}: not a checkpoint file")
    if len(blob) != manifest["blob_bytes"]:
        raise FormatError(f"{path}: parameter blob has {len(blob)} bytes, manifest declares {manifest['blob_bytes']} (truncated?)")
    if sha256(blob) != manifest["blob_sha256"]:
        raise FormatError(f"{path}: parameter blob hash mismatch")
    if manifest["phase"] == "finetune" and not manifest.get("parent_hash"):
        raise FormatError(f"{path}: finetune checkpoint without parent hash")
    try:
        expected = param_shapes(ModelConfig(**manifest["model"]))
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{path}: invalid model config ({exc})") from None
    params, off = {}, 0
    for t in manifest["tensors"]:
        shape = tuple(t["shape"])
        if expected.get(t["name"]) != shape:
            raise FormatError(f"{path}: tensor {t['name']} shape {shape} does not match the model config")
        n = int(np.prod(shape, dtype=np.int64)) * 4
        params[t["name"]] = np.frombuffer(blob[off : off + n], dtype="<f4").reshape(shape).astype(np.float64)
        off += n
    if off != len(blob) or set(params) != set(expected):
        raise FormatError(f"{path}: tensors do not cover the model's parameters")
    return CheckpointFile(manifest, params)


# ----------------------------------------------------------------- reports


def write_json(path: str, obj) -> None:
    atomic_write(path, json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n")


def write_jsonl(path: str, rows: list) -> None:
    atomic_write(path, "".join(dumps(r) + "\n" for r in rows))


def write_csv(path: str, rows: list[list]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for row in rows:
        w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in row])
    atomic_write(path, buf.getvalue())
