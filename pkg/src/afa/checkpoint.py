"""Checkpoint directories: ``manifest.json`` plus ``tensors.bin``.

``tensors.bin`` is every tensor of the model, as little-endian float32, laid end
to end in manifest order. The manifest records each tensor's name, shape, byte
offset and length, frozen flag, the CRC32 of the payload, and a CRC32 of the
manifest itself (computed with that field removed).
"""
from __future__ import annotations

import json
import zlib
from pathlib import Path

import numpy as np
import torch

from .adapters import is_frozen, mark_frozen
from .errors import ChecksumError, FormatError, VersionError
from .linalg import DTYPE, Rng
from .model import ModelState, TrainConfig

FORMAT_VERSION = 1


class CheckpointIOError(FormatError):
    pass


def named_tensors(state: ModelState) -> list[tuple[str, torch.Tensor]]:
    out = [(f"encoder.{n}", b) for n, b in state.encoder.named_buffers()]
    out += [(f"adapters.{n}", p) for n, p in state.adapters.named_parameters()]
    out += [(f"bank.{t}", P) for t, P in enumerate(state.bank.prototypes)]
    return out


def _canonical(obj) -> bytes:
    return json.dumps(obj, indent=2, sort_keys=True).encode("utf-8") + b"\n"


def _manifest_crc(manifest: dict) -> int:
    body = {k: v for k, v in manifest.items() if k != "manifest_crc32"}
    return zlib.crc32(_canonical(body))


def save_checkpoint(state: ModelState, path) -> None:
    path = Path(path)
    table, chunks, offset = [], [], 0
    for name, t in named_tensors(state):
        data = t.detach().to(torch.float32).numpy().astype("<f4").tobytes()
        table.append(
            {
                "name": name,
                "shape": list(t.shape),
                "dtype": "f32",
                "offset": offset,
                "length": len(data),
                "frozen": bool(is_frozen(t)),
            }
        )
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": state.config.to_dict(),
        "d_in": state.encoder.d_in,
        "class_counts": state.class_counts,
        "task_names": state.task_names,
        "trained_tasks": state.trained_tasks,
        "n_routers": state.adapters.abfa.n_routers,
        "tensors": table,
        "payload_crc32": zlib.crc32(payload),
    }
    manifest["manifest_crc32"] = _manifest_crc(manifest)
    try:
        path.mkdir(parents=True, exist_ok=True)
        (path / "tensors.bin").write_bytes(payload)
        (path / "manifest.json").write_bytes(_canonical(manifest))
    except OSError as exc:
        raise CheckpointIOError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> ModelState:
    path = Path(path)
    try:
        raw_manifest = (path / "manifest.json").read_bytes()
        payload = (path / "tensors.bin").read_bytes()
    except OSError as exc:
        raise CheckpointIOError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        manifest = json.loads(raw_manifest)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ChecksumError(f"{path}/manifest.json is corrupted: {exc}") from exc
    if not isinstance(manifest, dict) or manifest.get("manifest_crc32") != _manifest_crc(manifest):
        raise ChecksumError(f"{path}/manifest.json fails its checksum")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise VersionError(
            f"checkpoint format {manifest.get('format_version')} is not supported (expected {FORMAT_VERSION})"
        )
    if zlib.crc32(payload) != manifest["payload_crc32"]:
        raise ChecksumError(f"{path}/tensors.bin fails its checksum")

    config = TrainConfig.from_dict(manifest["config"])
    state = ModelState(config, manifest["d_in"], manifest["class_counts"], manifest["task_names"])
    moe = state.adapters.abfa
    for t in range(manifest["n_routers"]):
        for name, site in moe.sites.items():
            site.add_router(t, Rng(0))
    n_banks = sum(1 for e in manifest["tensors"] if e["name"].startswith("bank."))
    state.bank.prototypes = [torch.zeros(0) for _ in range(n_banks)]

    entries = {e["name"]: e for e in manifest["tensors"]}
    expected = named_tensors(state)
    if [n for n, _ in expected] != [e["name"] for e in manifest["tensors"]]:
        raise FormatError(f"{path}: tensor table does not match the model described by its config")
    with torch.no_grad():
        for name, t in expected:
            e = entries[name]
            buf = payload[e["offset"] : e["offset"] + e["length"]]
            arr = np.frombuffer(buf, dtype="<f4").astype(np.float64).reshape(e["shape"])
            value = torch.from_numpy(arr.copy()).to(DTYPE)
            if name.startswith("bank."):
                state.bank.prototypes[int(name.split(".")[1])] = value
                continue
            if tuple(t.shape) != tuple(e["shape"]):
                raise FormatError(f"{path}: tensor {name} has shape {e['shape']}, expected {list(t.shape)}")
            t.copy_(value)
            if e["frozen"]:
                mark_frozen(t)
            else:
                t.requires_grad_(False)
    state.trained_tasks = manifest["trained_tasks"]
    return state
