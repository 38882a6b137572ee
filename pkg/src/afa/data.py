"""Embedding dataset files and the synthetic multi-domain task generator.

File layout (all little-endian)::

    b"MTILDS1\\0"  u32 d_in  u32 n
    n x (u16 task_id, u16 label, d_in x f32)

An optional sibling ``<stem>.json`` maps task ids to a task name and class names.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .errors import ContractError, FormatError
from .linalg import Rng

log = logging.getLogger(__name__)

MAGIC = b"MTILDS1\x00"
_HEADER = np.dtype([("magic", "S8"), ("d_in", "<u4"), ("n", "<u4")])


def _record_dtype(d_in: int) -> np.dtype:
    return np.dtype([("task", "<u2"), ("label", "<u2"), ("x", "<f4", (d_in,))])


@dataclass
class EmbeddingDataset:
    task_ids: np.ndarray  # (n,) uint16
    labels: np.ndarray  # (n,) uint16
    x: np.ndarray  # (n, d_in) float32
    names: dict = field(default_factory=dict)

    @property
    def d_in(self) -> int:
        return self.x.shape[1]

    def __len__(self) -> int:
        return self.x.shape[0]


def write_dataset(path, ds: EmbeddingDataset) -> None:
    path = Path(path)
    n, d_in = ds.x.shape
    if len(ds.task_ids) != n or len(ds.labels) != n:
        raise ContractError("task_ids, labels and x must have the same length")
    header = np.array([(MAGIC, d_in, n)], dtype=_HEADER)
    rec = np.empty(n, dtype=_record_dtype(d_in))
    rec["task"] = ds.task_ids
    rec["label"] = ds.labels
    rec["x"] = ds.x
    try:
        with open(path, "wb") as fh:
            fh.write(header.tobytes())
            fh.write(rec.tobytes())
        if ds.names:
            path.with_suffix(".json").write_text(json.dumps(ds.names, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise FormatError(f"cannot write dataset {path}: {exc}") from exc


def read_dataset(path) -> EmbeddingDataset:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read dataset {path}: {exc}") from exc
    if len(raw) < _HEADER.itemsize or raw[:8] != MAGIC:
        raise FormatError(f"{path}: not an embedding dataset (bad magic)")
    header = np.frombuffer(raw, dtype=_HEADER, count=1)[0]
    d_in, n = int(header["d_in"]), int(header["n"])
    dt = _record_dtype(d_in)
    if len(raw) != _HEADER.itemsize + n * dt.itemsize:
        raise FormatError(f"{path}: header says {n} records of dim {d_in}, file size disagrees")
    rec = np.frombuffer(raw, dtype=dt, offset=_HEADER.itemsize, count=n)
    names = {}
    sidecar = path.with_suffix(".json")
    if sidecar.exists():
        try:
            names = json.loads(sidecar.read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"{sidecar}: invalid JSON: {exc}") from exc
    return EmbeddingDataset(
        rec["task"].copy(), rec["label"].copy(), np.ascontiguousarray(rec["x"]), names
    )


@dataclass
class TaskDataset:
    """One task's samples, with labels local to the task (0..n_classes-1)."""

    task_id: int
    x: torch.Tensor
    labels: torch.Tensor
    n_classes: int
    name: str = ""
    class_names: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.x.shape[0]


def split_tasks(ds: EmbeddingDataset, n_classes: Optional[list[int]] = None) -> list[TaskDataset]:
    """Group records by task id. Task ids must be 0..T-1 and labels contiguous from 0."""
    if len(ds) == 0:
        return []
    tids = sorted(set(int(t) for t in ds.task_ids))
    if tids != list(range(len(tids))):
        raise FormatError(f"task ids must be contiguous from 0, got {tids}")
    tasks_meta = ds.names.get("tasks", {}) if ds.names else {}
    out = []
    for t in tids:
        sel = ds.task_ids == t
        labels = ds.labels[sel].astype(np.int64)
        meta = tasks_meta.get(str(t), {})
        c = n_classes[t] if n_classes else len(meta.get("classes", [])) or int(labels.max()) + 1
        if set(labels.tolist()) - set(range(c)):
            raise FormatError(f"task {t}: labels must lie in 0..{c - 1}")
        out.append(
            TaskDataset(
                t,
                torch.from_numpy(ds.x[sel].astype(np.float64)),
                torch.from_numpy(labels),
                c,
                meta.get("name", f"task{t}"),
                list(meta.get("classes", [])),
            )
        )
    return out


def subsample_shots(task: TaskDataset, n_shots: int, rng: Rng) -> TaskDataset:
    """Keep ``n_shots`` samples per class (all of them for smaller classes)."""
    keep = []
    for c in range(task.n_classes):
        idx = (task.labels == c).nonzero(as_tuple=True)[0].numpy()
        if len(idx) > n_shots:
            idx = np.sort(rng.child("class", c).choice(len(idx), n_shots, replace=False))
            idx = (task.labels == c).nonzero(as_tuple=True)[0].numpy()[idx]
        keep.extend(idx.tolist())
    keep = torch.tensor(sorted(keep), dtype=torch.long)
    return TaskDataset(
        task.task_id, task.x[keep], task.labels[keep], task.n_classes, task.name, task.class_names
    )


@dataclass
class SyntheticSpec:
    """Per task: class means in a canonical frame, then a rotation and an offset.

    ``x = R_t (mu_{t,c} + sigma * eps) + o_t``.
    """

    n_tasks: int = 4
    classes_per_task: int = 5
    train_per_class: int = 40
    test_per_class: int = 20
    d_in: int = 32
    sigma: float = 0.1
    class_scale: float = 1.0
    offset_scale: float = 4.0
    min_separation: float = 6.0  # in units of sigma
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ContractError(f"unknown synthetic spec fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def fixture_spec(seed: int = 0) -> SyntheticSpec:
    """T=4 tasks, 5 classes each, 200 train + 100 test per task, d_in=32, sigma=0.1."""
    return SyntheticSpec(seed=seed)


def _names(spec: SyntheticSpec) -> dict:
    return {
        "tasks": {
            str(t): {
                "name": f"domain{t}",
                "classes": [f"domain{t}/class{c}" for c in range(spec.classes_per_task)],
            }
            for t in range(spec.n_tasks)
        }
    }


def generate(spec: SyntheticSpec) -> tuple[EmbeddingDataset, EmbeddingDataset, dict]:
    """Build the train and test splits; raises if class clusters are too close."""
    if min(spec.n_tasks, spec.classes_per_task, spec.train_per_class, spec.test_per_class, spec.d_in) < 1:
        raise ContractError("synthetic spec counts must be positive")
    if spec.n_tasks > 65535 or spec.classes_per_task > 65535:
        raise ContractError("task and class ids must fit in u16")
    if not spec.sigma > 0:
        raise ContractError("sigma must be positive")
    rng = Rng(spec.seed).child("synthetic")
    d = spec.d_in
    # domain offsets are mutually orthogonal while tasks fit in the input space
    offset_basis = rng.child("offsets").orthogonal(d)
    centers = []
    transforms = []
    for t in range(spec.n_tasks):
        trng = rng.child("task", t)
        mu = trng.child("means").normal((spec.classes_per_task, d), spec.class_scale / d**0.5)
        R = trng.child("rotation").orthogonal(d)
        if t < d:
            o = offset_basis[t] * spec.offset_scale
        else:
            o = trng.child("offset").normal((d,), spec.offset_scale / d**0.5)
        transforms.append((mu, R, o))
        centers.append(mu @ R.T + o)
    allc = torch.cat(centers)
    if allc.shape[0] > 1:
        dist = torch.cdist(allc, allc)
        dist.fill_diagonal_(float("inf"))
        min_sep = float(dist.min()) / spec.sigma
    else:
        min_sep = float("inf")
    diag = {"min_center_separation_sigma": min_sep, "required_sigma": spec.min_separation}
    if min_sep < spec.min_separation:
        raise ContractError(
            f"class clusters only {min_sep:.2f} sigma apart, need {spec.min_separation}"
        )

    def split(name: str, per_class: int) -> EmbeddingDataset:
        xs, ts, ls = [], [], []
        for t, (mu, R, o) in enumerate(transforms):
            srng = rng.child(name, t)
            for c in range(spec.classes_per_task):
                eps = srng.child("class", c).normal((per_class, d), spec.sigma)
                xs.append((mu[c] + eps) @ R.T + o)
                ts.append(np.full(per_class, t, dtype=np.uint16))
                ls.append(np.full(per_class, c, dtype=np.uint16))
        return EmbeddingDataset(
            np.concatenate(ts), np.concatenate(ls), torch.cat(xs).numpy().astype(np.float32), _names(spec)
        )

    return split("train", spec.train_per_class), split("test", spec.test_per_class), diag


def gen_data(spec: SyntheticSpec, out_dir) -> dict:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise FormatError(f"cannot create {out}: {exc}") from exc
    train, test, diag = generate(spec)
    write_dataset(out / "train.bin", train)
    write_dataset(out / "test.bin", test)
    (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    log.info("class centers separated by >= %.1f sigma", diag["min_center_separation_sigma"])
    return diag


def load_split(data_dir, split: str) -> list[TaskDataset]:
    return split_tasks(read_dataset(Path(data_dir) / f"{split}.bin"))


