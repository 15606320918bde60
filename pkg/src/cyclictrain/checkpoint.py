"""Bit-exact checkpoint persistence.

A checkpoint is a directory: ``manifest.json`` plus raw little-endian
float64 blobs (``student.bin``, optionally ``teacher.bin`` and
``optim.bin``).  The manifest records every parameter's name, component,
shape and element offset into its blob, so loading is language-neutral and
save -> load -> save reproduces the directory byte for byte.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .engine import TeacherState
from .model import MultiTaskModel
from .optim import AdamW

__all__ = ["CheckpointError", "Checkpoint", "save_checkpoint", "load_checkpoint"]

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed or inconsistent checkpoint contents."""


@dataclass
class Checkpoint:
    """In-memory view of a checkpoint directory."""

    arrays: dict[str, np.ndarray]
    components: dict[str, str]
    counters: dict[str, int]
    config_hash: str
    weights_kind: str
    teacher_momentum: float | None = None
    teacher_arrays: dict[str, np.ndarray] | None = None
    optimizer_state: dict | None = None

    def param_count(self) -> int:
        return sum(a.size for a in self.arrays.values())


def _blob_entries(arrays: dict[str, np.ndarray], components: dict[str, str] | None = None):
    entries = []
    offset = 0
    for name, arr in arrays.items():
        entry = {"name": name, "shape": list(arr.shape), "offset": offset}
        if components is not None:
            entry["component"] = components[name]
        entries.append(entry)
        offset += arr.size
    return entries, offset


def _write_blob(path: str, arrays: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        for arr in arrays.values():
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_blob(path: str, entries, label: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) % 8:
        raise CheckpointError(f"{label}: blob length {len(raw)} is not a multiple of 8")
    flat = np.frombuffer(raw, dtype="<f8")
    out: dict[str, np.ndarray] = {}
    expected_end = 0
    for entry in entries:
        name = entry["name"]
        shape = tuple(entry["shape"])
        offset = int(entry["offset"])
        size = 1
        for d in shape:
            size *= d
        if offset != expected_end:
            raise CheckpointError(
                f"{label}: parameter '{name}' declared at offset {offset}, "
                f"expected {expected_end}"
            )
        end = offset + size
        if end > flat.size:
            raise CheckpointError(
                f"{label}: parameter '{name}' at offset {offset} needs {size} "
                f"elements but blob holds {flat.size}"
            )
        out[name] = flat[offset:end].reshape(shape).astype(np.float64)
        expected_end = end
    if expected_end != flat.size:
        raise CheckpointError(
            f"{label}: blob holds {flat.size} elements, manifest accounts for "
            f"{expected_end}"
        )
    return out


def save_checkpoint(
    directory: str,
    model: MultiTaskModel,
    teacher: TeacherState | None = None,
    optimizer: AdamW | None = None,
    counters: dict[str, int] | None = None,
    config_hash: str = "",
    weights: dict[str, np.ndarray] | None = None,
    weights_kind: str = "student",
) -> None:
    """Write a checkpoint directory.

    ``weights`` overrides the stored parameter arrays (used for teacher
    export); names and shapes must match the model's registry exactly.
    """
    os.makedirs(directory, exist_ok=True)
    arrays = {}
    components = {}
    for p in model.graph.parameters():
        data = weights[p.name] if weights is not None else p.tensor.data
        if data.shape != p.tensor.data.shape:
            raise CheckpointError(
                f"weights override for '{p.name}' has shape {data.shape}, "
                f"expected {p.tensor.data.shape}"
            )
        arrays[p.name] = np.asarray(data, dtype=np.float64)
        components[p.name] = p.component
    param_entries, total = _blob_entries(arrays, components)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config_hash": config_hash,
        "weights_kind": weights_kind,
        "counters": dict(counters or {}),
        "total_elements": total,
        "params": param_entries,
    }
    _write_blob(os.path.join(directory, "student.bin"), arrays)

    if teacher is not None:
        teacher_entries, _ = _blob_entries(teacher.params)
        manifest["teacher"] = {
            "momentum": teacher.momentum,
            "params": teacher_entries,
        }
        _write_blob(os.path.join(directory, "teacher.bin"), teacher.params)
    if optimizer is not None:
        state = optimizer.export_state()
        moment_arrays: dict[str, np.ndarray] = {}
        optim_entries = []
        offset = 0
        for name, entry in state["entries"].items():
            m, v = entry["m"], entry["v"]
            moment_arrays[f"{name}/m"] = m
            moment_arrays[f"{name}/v"] = v
            optim_entries.append(
                {
                    "name": name,
                    "shape": list(m.shape),
                    "lr": entry["lr"],
                    "step_count": entry["step_count"],
                    "m_offset": offset,
                    "v_offset": offset + m.size,
                }
            )
            offset += 2 * m.size
        manifest["optimizer"] = {
            "betas": state["betas"],
            "eps": state["eps"],
            "weight_decay": state["weight_decay"],
            "entries": optim_entries,
        }
        _write_blob(os.path.join(directory, "optim.bin"), moment_arrays)

    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_checkpoint(directory: str) -> Checkpoint:
    manifest_path = os.path.join(directory, "manifest.json")
    try:
        with open(manifest_path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise CheckpointError(f"no manifest at {manifest_path}")
    except json.JSONDecodeError as e:
        raise CheckpointError(f"manifest is not valid JSON: {e}")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported format version {manifest.get('format_version')!r}"
        )
    arrays = _read_blob(os.path.join(directory, "student.bin"), manifest["params"], "student.bin")
    components = {e["name"]: e.get("component", "") for e in manifest["params"]}
    declared = int(manifest.get("total_elements", -1))
    actual = sum(a.size for a in arrays.values())
    if declared >= 0 and declared != actual:
        raise CheckpointError(
            f"manifest declares {declared} elements, blob holds {actual}"
        )
    cp = Checkpoint(
        arrays=arrays,
        components=components,
        counters={k: int(v) for k, v in manifest.get("counters", {}).items()},
        config_hash=manifest.get("config_hash", ""),
        weights_kind=manifest.get("weights_kind", "student"),
    )
    if "teacher" in manifest:
        t = manifest["teacher"]
        cp.teacher_momentum = float(t["momentum"])
        cp.teacher_arrays = _read_blob(
            os.path.join(directory, "teacher.bin"), t["params"], "teacher.bin"
        )
    if "optimizer" in manifest:
        o = manifest["optimizer"]
        with open(os.path.join(directory, "optim.bin"), "rb") as f:
            flat = np.frombuffer(f.read(), dtype="<f8")
        entries = {}
        for e in o["entries"]:
            shape = tuple(e["shape"])
            size = 1
            for d in shape:
                size *= d
            for key, off in (("m", e["m_offset"]), ("v", e["v_offset"])):
                if off + size > flat.size:
                    raise CheckpointError(
                        f"optim.bin: '{e['name']}/{key}' at offset {off} needs "
                        f"{size} elements but blob holds {flat.size}"
                    )
            entries[e["name"]] = {
                "lr": e["lr"],
                "step_count": e["step_count"],
                "m": flat[e["m_offset"] : e["m_offset"] + size].reshape(shape).astype(np.float64),
                "v": flat[e["v_offset"] : e["v_offset"] + size].reshape(shape).astype(np.float64),
            }
        cp.optimizer_state = {
            "betas": o["betas"],
            "eps": o["eps"],
            "weight_decay": o["weight_decay"],
            "entries": entries,
        }
    return cp
