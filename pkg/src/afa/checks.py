"""A tiny two-task model for finite-difference gradient checks."""
from __future__ import annotations

import torch

from .adapters import AFFA, abfa
from .linalg import Rng
from .model import ModelState, TrainConfig
from .objectives import GradcheckReport, ce_loss, gradcheck, similarity_matrix, supcon_loss


def group_of(name: str) -> str:
    parts = name.split(".")
    if parts[0] == "affa":
        return f"affa.{parts[-1]}"
    if "routers" in parts:
        return "router"
    if parts[-1] == "head_gate":
        return "expert.head_gate"
    if parts[-1] == "A":
        return "expert.A"
    return "expert.B"


def tiny_model(seed: int = 0) -> tuple[ModelState, torch.Tensor, torch.Tensor]:
    """Model after task 0 (router frozen) with task 1's router active.

    Every adapter weight, including the zero-initialized up-projections, is
    redrawn so that no gradient is trivially zero. Returns the state, a batch
    of inputs and their global labels.
    """
    config = TrainConfig(
        seed=seed, d=8, n_layers=1, n_experts=3, top_k=2, n_heads=2, rank=2, n_prototypes=1,
        tau=1.0, tau_ce=1.0,
    )
    state = ModelState(config, 6, [2, 2], ["t0", "t1"])
    moe = state.adapters.abfa
    state.expand_router()
    moe.freeze_router(0)
    state.expand_router()
    rng = Rng(seed).child("gradcheck")
    with torch.no_grad():
        for name, p in state.adapters.named_parameters():
            p.copy_(rng.child(name).normal(tuple(p.shape), 0.5))
    for name, p in state.adapters.named_parameters():
        if not getattr(p, "frozen", False):
            p.requires_grad_(True)
    x = rng.child("x").normal((4, 6), 1.0)
    labels = torch.tensor([2, 3, 3, 2])
    return state, x, labels


def tiny_loss(state: ModelState, x: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Cross-entropy on the task-1 routed path plus contrastive loss on the shared path."""
    cfg = state.config
    classes = state.classes_of(1)
    img = state.encode_image(x, abfa(1))
    txt = state.encode_text(classes, abfa(1))
    ce = ce_loss(img, txt, labels - classes[0], cfg.tau_ce)
    uniq, inverse = torch.unique(labels, return_inverse=True)
    v = state.encode_image(x, AFFA)
    w = state.encode_text(uniq, AFFA)[inverse]
    return ce + supcon_loss(similarity_matrix(v, w, cfg.tau), labels)


def run_gradcheck(seed: int = 0, step: float = 1e-3, tol: float = 1e-4) -> GradcheckReport:
    state, x, labels = tiny_model(seed)
    named = list(state.adapters.named_parameters())
    named = [(("affa." if n.startswith("affa.") else "abfa.") + n.split(".", 1)[1], p) for n, p in named]
    return gradcheck(
        lambda: tiny_loss(state, x, labels),
        named,
        group_of,
        step=step,
        tol=tol,
        moe=state.adapters.abfa,
    )
