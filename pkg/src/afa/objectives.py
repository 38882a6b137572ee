"""Losses, gradient collection, AdamW and the finite-difference gradient checker."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Optional

import torch

from .adapters import is_frozen
from .errors import ContractError, FrozenParameterError, ShapeError
from .linalg import DTYPE, cosine_matrix

NamedParams = Iterable[tuple[str, torch.Tensor]]


def similarity_matrix(v: torch.Tensor, w: torch.Tensor, tau: float = 1.0) -> torch.Tensor:
    """``l[i, j] = cos(v_i, w_j) / tau``; ``tau=1`` is the untempered form."""
    if v.dim() != 2 or w.dim() != 2 or v.shape[0] != w.shape[0] or v.shape[0] == 0:
        raise ShapeError(
            f"need two equal, nonempty batches of features, got {tuple(v.shape)} and {tuple(w.shape)}"
        )
    if not tau > 0:
        raise ContractError(f"temperature must be positive, got {tau}")
    return cosine_matrix(v, w) / tau


def supcon_loss(l: torch.Tensor, labels) -> torch.Tensor:
    """Bidirectional supervised contrastive loss over a square similarity matrix.

    Positives of anchor ``i`` are all ``j`` with the same label, ``i`` itself
    included. Rows give the image-to-text term, columns the text-to-image term;
    both are summed over anchors, not averaged.
    """
    labels = torch.as_tensor(labels)
    n = labels.shape[0]
    if l.dim() != 2 or l.shape != (n, n):
        raise ShapeError(f"similarity matrix must be {n}x{n}, got {tuple(l.shape)}")
    pos = (labels[:, None] == labels[None, :]).to(DTYPE)
    weight = pos / pos.sum(dim=1, keepdim=True)
    row_term = -(weight * torch.log_softmax(l, dim=1)).sum()
    # column softmax: entry [j, i] normalized over j, gathered for anchor i
    col_term = -(weight * torch.log_softmax(l, dim=0).T).sum()
    return row_term + col_term


def ce_loss(
    v: torch.Tensor, text_feats: torch.Tensor, labels, tau_ce: float = 0.01
) -> torch.Tensor:
    """Mean cross-entropy over cosine logits scaled by ``1/tau_ce``."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    n_cls = text_feats.shape[0]
    if bool(((labels < 0) | (labels >= n_cls)).any()):
        raise ContractError(f"label out of range for {n_cls} classes")
    if not tau_ce > 0:
        raise ContractError(f"temperature must be positive, got {tau_ce}")
    logits = cosine_matrix(v.reshape(-1, v.shape[-1]), text_feats) / tau_ce
    return -torch.log_softmax(logits, dim=1).gather(1, labels.reshape(-1, 1)).mean()


def ce_class_loss(v: torch.Tensor, text_feats: torch.Tensor, label: int, tau_ce: float = 0.01):
    return ce_loss(v.reshape(1, -1), text_feats, [label], tau_ce)


@dataclass
class GradientTape:
    """Gradients of one loss evaluation, keyed by parameter name, in parameter order."""

    params: dict[str, torch.Tensor] = field(default_factory=dict)
    grads: dict[str, torch.Tensor] = field(default_factory=dict)

    def __iter__(self):
        for name, p in self.params.items():
            yield name, p, self.grads[name]

    def __len__(self) -> int:
        return len(self.params)


def backward(loss: torch.Tensor, named_params: NamedParams) -> GradientTape:
    """Exact gradients of ``loss`` for every trainable parameter it depends on.

    Frozen tensors are skipped; so are parameters the loss never reached
    (e.g. experts no sample activated).
    """
    named = [(n, p) for n, p in named_params if p.requires_grad and not is_frozen(p)]
    tape = GradientTape()
    if not named or not loss.requires_grad:
        return tape
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    for (name, p), g in zip(named, grads):
        if g is not None:
            tape.params[name] = p
            tape.grads[name] = g
    return tape


class AdamW:
    """Adam with decoupled weight decay; moments and step counts kept per parameter name."""

    def __init__(
        self,
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        if lr <= 0:
            raise ContractError(f"invalid learning rate {lr}")
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.step_count = 0
        self.state: dict[str, dict] = {}

    @torch.no_grad()
    def step(self, tape: GradientTape) -> None:
        for name, p, g in tape:
            if is_frozen(p):
                raise FrozenParameterError(f"refusing to update frozen parameter {name}")
            if g.shape != p.shape:
                raise ShapeError(f"gradient for {name} has shape {tuple(g.shape)}, expected {tuple(p.shape)}")
        self.step_count += 1
        b1, b2 = self.betas
        for name, p, g in tape:
            st = self.state.get(name)
            if st is None:
                st = self.state[name] = {
                    "t": 0,
                    "m": torch.zeros_like(p),
                    "v": torch.zeros_like(p),
                }
            elif st["m"].shape != p.shape:
                raise ShapeError(f"optimizer state for {name} does not match parameter shape")
            st["t"] += 1
            t = st["t"]
            st["m"].mul_(b1).add_(g, alpha=1 - b1)
            st["v"].mul_(b2).addcmul_(g, g, value=1 - b2)
            m_hat = st["m"] / (1 - b1**t)
            v_hat = st["v"] / (1 - b2**t)
            # decay uses the pre-update value, so order with the Adam term does not matter
            p.mul_(1 - self.lr * self.weight_decay)
            p.sub_(self.lr * m_hat / (v_hat.sqrt() + self.eps))


def adamw_step(state: AdamW, tape: GradientTape) -> None:
    state.step(tape)


@dataclass
class GroupCheck:
    group: str
    max_rel_error: float
    n_entries: int
    passed: bool


@dataclass
class GradcheckReport:
    step: float
    tol: float
    groups: list[GroupCheck]
    flips_resampled: int = 0
    flips_pinned: int = 0

    @property
    def passed(self) -> bool:
        return all(g.passed for g in self.groups)

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "tol": self.tol,
            "passed": self.passed,
            "flips_resampled": self.flips_resampled,
            "flips_pinned": self.flips_pinned,
            "groups": [asdict(g) for g in self.groups],
        }


def gradcheck(
    loss_fn: Callable[[], torch.Tensor],
    named_params: NamedParams,
    group_of: Callable[[str], str],
    step: float = 1e-3,
    tol: float = 1e-4,
    moe=None,
    max_halvings: int = 4,
) -> GradcheckReport:
    """Compare analytic gradients with central differences, per parameter group.

    The error of a group is ``max|analytic - numeric| / max(|analytic|, |numeric|)``
    over all its entries, i.e. relative to the group's gradient scale. When
    ``moe`` is given, a perturbation that changes any active expert set is
    retried with a halved step; if it still flips, the reference active sets
    are pinned so both sides differentiate the same smooth branch.
    """
    if not step > 0:
        raise ContractError("finite-difference step must be positive")
    named = [(n, p) for n, p in named_params if p.requires_grad and not is_frozen(p)]

    if moe is not None:
        with moe.record_routing() as reference:
            loss = loss_fn()
    else:
        reference = None
        loss = loss_fn()
    tape = backward(loss, named)

    flips_resampled = flips_pinned = 0

    def evaluate() -> tuple[float, bool]:
        if moe is None:
            return float(loss_fn()), False
        with moe.pinned_routing(reference) as log:
            value = float(loss_fn())
        return value, log.flips > 0

    def central(p: torch.Tensor, i: int) -> float:
        nonlocal flips_resampled, flips_pinned
        flat = p.data.view(-1)
        orig = flat[i].item()
        h = step
        for attempt in range(max_halvings + 1):
            flat[i] = orig + h
            fp, flip_p = evaluate()
            flat[i] = orig - h
            fm, flip_m = evaluate()
            flat[i] = orig
            if not (flip_p or flip_m):
                return (fp - fm) / (2 * h)
            if attempt < max_halvings:
                flips_resampled += 1
                h /= 2
        flips_pinned += 1
        return (fp - fm) / (2 * h)

    worst: dict[str, list[float]] = {}
    with torch.no_grad():
        for name, p in named:
            analytic = tape.grads.get(name, torch.zeros_like(p)).reshape(-1)
            numeric = torch.tensor([central(p, i) for i in range(p.numel())], dtype=DTYPE)
            acc = worst.setdefault(group_of(name), [0.0, 0.0, 0])
            acc[0] = max(acc[0], float((analytic - numeric).abs().max()))
            acc[1] = max(acc[1], float(analytic.abs().max()), float(numeric.abs().max()))
            acc[2] += p.numel()

    groups = []
    for g, (diff, scale, n) in worst.items():
        rel = diff / scale if scale > 0 else diff
        groups.append(GroupCheck(g, rel, n, bool(rel <= tol) and math.isfinite(rel)))
    return GradcheckReport(step, tol, groups, flips_resampled, flips_pinned)
