"""Sequential task protocol: per task, fit prototypes, grow and train a router
with cross-entropy, freeze it, then train the shared LoRA contrastively."""
from __future__ import annotations

import logging
from typing import Callable, Optional

import numpy as np
import torch

from .adapters import AFFA, abfa
from .data import TaskDataset, subsample_shots
from .dds import fit_task_prototypes
from .errors import ContractError
from .evaluation import AccuracyMatrix, evaluate_row
from .linalg import Rng
from .model import ModelState, TrainConfig
from .objectives import AdamW, backward, ce_loss, similarity_matrix, supcon_loss

log = logging.getLogger(__name__)


def _optimizer(config: TrainConfig) -> AdamW:
    return AdamW(config.lr, config.betas, config.eps, config.weight_decay)


def _check_dataset(state: ModelState, ds: TaskDataset) -> None:
    if ds.task_id != state.trained_tasks:
        raise ContractError(
            f"tasks must be trained in order: expected task {state.trained_tasks}, got {ds.task_id}"
        )
    if ds.task_id >= state.n_tasks:
        raise ContractError(f"task {ds.task_id} is not part of this model's task list")
    if ds.n_classes != state.class_counts[ds.task_id]:
        raise ContractError(
            f"task {ds.task_id} has {ds.n_classes} classes, model expects {state.class_counts[ds.task_id]}"
        )
    if len(ds) == 0:
        raise ContractError(f"task {ds.task_id} has no training samples")


def train_abfa(state: ModelState, ds: TaskDataset, task_id: int, config: TrainConfig, records: list):
    rng = Rng(config.seed).child("batches", task_id, "abfa")
    opt = _optimizer(config)
    path = abfa(task_id)
    classes = state.classes_of(task_id)
    with state.training_phase("abfa") as params:
        for step in range(config.iterations_abfa):
            idx = torch.from_numpy(rng.integers(len(ds), size=config.batch_size))
            img = state.encode_image(ds.x[idx], path)
            txt = state.encode_text(classes, path)
            loss = ce_loss(img, txt, ds.labels[idx], config.tau_ce)
            opt.step(backward(loss, params))
            records.append({"phase": "abfa", "task": task_id, "step": step, "loss": float(loss.detach())})


def train_affa(state: ModelState, ds: TaskDataset, task_id: int, config: TrainConfig, records: list):
    rng = Rng(config.seed).child("batches", task_id, "affa")
    opt = _optimizer(config)
    offset = state.class_offsets[task_id]
    with state.training_phase("affa") as params:
        for step in range(config.iterations_affa):
            idx = torch.from_numpy(rng.integers(len(ds), size=config.batch_size))
            labels = ds.labels[idx] + offset
            uniq, inverse = torch.unique(labels, return_inverse=True)
            img = state.encode_image(ds.x[idx], AFFA)
            txt = state.encode_text(uniq, AFFA)[inverse]
            loss = supcon_loss(similarity_matrix(img, txt, config.tau), labels)
            opt.step(backward(loss, params))
            records.append({"phase": "affa", "task": task_id, "step": step, "loss": float(loss.detach())})


def train_task(state: ModelState, ds: TaskDataset, config: Optional[TrainConfig] = None) -> list[dict]:
    """Run the full per-task protocol; returns one log record per optimizer step."""
    config = config or state.config
    _check_dataset(state, ds)
    moe = state.adapters.abfa
    for s in moe.sites.values():
        for r in s.routers:
            if not r.frozen:
                raise ContractError(f"router {r.task_id} at {s.name} was never frozen")
    if config.n_shots > 0:
        ds = subsample_shots(ds, config.n_shots, Rng(config.seed).child("shots", ds.task_id))
    t = ds.task_id
    records: list[dict] = []

    fit_task_prototypes(state.bank, t, ds.x, state.encoder)
    task_id = state.expand_router()
    assert task_id == t
    train_abfa(state, ds, t, config, records)
    state.snap_to_f32()
    moe.freeze_router(t)
    if config.freeze_experts_after_task:
        moe.freeze_experts()
    train_affa(state, ds, t, config, records)
    state.snap_to_f32()
    state.trained_tasks += 1
    log.info("task %d trained (%d steps)", t, len(records))
    return records


def new_state(config: TrainConfig, train_sets: list[TaskDataset]) -> ModelState:
    if not train_sets:
        raise ContractError("no tasks given")
    d_in = train_sets[0].x.shape[1]
    return ModelState(
        config, d_in, [ds.n_classes for ds in train_sets], [ds.name or f"task{ds.task_id}" for ds in train_sets]
    )


def run_stream(
    config: TrainConfig,
    train_sets: list[TaskDataset],
    test_sets: list[TaskDataset],
    threads: int = 1,
    on_task: Optional[Callable[[int, ModelState, list[dict]], None]] = None,
) -> tuple[ModelState, AccuracyMatrix, list[dict]]:
    """Train every task in order; after each, evaluate all test sets to fill one matrix row."""
    if len(train_sets) != len(test_sets):
        raise ContractError("need one test set per training task")
    state = new_state(config, train_sets)
    matrix = AccuracyMatrix.empty(state.task_names)
    records: list[dict] = []
    for i, ds in enumerate(train_sets):
        recs = train_task(state, ds, config)
        records.extend(recs)
        matrix.values[i] = np.array(evaluate_row(state, test_sets, threads))
        if on_task is not None:
            on_task(i, state, recs)
    return state, matrix, records
