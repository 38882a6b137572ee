"""Trainable adapters: the shared contrastive LoRA and the routed multi-head LoRA MoE.

Every adapter module is keyed by an injection site ``"<branch>_<layer>"``
(e.g. ``"image_1"``). The AFFA side holds one :class:`LoraAdapter` per site;
the ABFA side holds one :class:`MoESite` (a private expert pool plus a growing
router stack) per site.
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Iterable, Iterator, Optional

import torch
from torch import nn

from .errors import ContractError, FrozenParameterError, ShapeError
from .linalg import DTYPE, Rng, softmax, topk_indices, topk_mask

BRANCHES = ("image", "text")


def site_name(branch: str, layer: int) -> str:
    return f"{branch}_{layer}"


def mark_frozen(p: nn.Parameter) -> None:
    p.requires_grad_(False)
    p.frozen = True


def is_frozen(p: torch.Tensor) -> bool:
    return getattr(p, "frozen", False)


def _check_dim(e: torch.Tensor, d: int) -> None:
    if e.shape[-1] != d:
        raise ShapeError(f"expected feature dim {d}, got shape {tuple(e.shape)}")


class LoraAdapter(nn.Module):
    def __init__(self, d: int, r: int, rng: Rng):
        super().__init__()
        self.d, self.r = d, r
        self.A = nn.Parameter(rng.normal((r, d), d**-0.5))
        self.B = nn.Parameter(torch.zeros(d, r, dtype=DTYPE))

    def forward(self, e: torch.Tensor) -> torch.Tensor:
        _check_dim(e, self.d)
        return (e @ self.A.T) @ self.B.T


def lora_forward(adapter: LoraAdapter, e: torch.Tensor) -> torch.Tensor:
    return adapter(e)


class MultiHeadExpert(nn.Module):
    """One shared down-projection, ``M`` up-projections mixed by a softmax head gate."""

    def __init__(self, d: int, r: int, n_heads: int, rng: Rng):
        super().__init__()
        if n_heads < 1:
            raise ContractError("an expert needs at least one head")
        self.d, self.r, self.n_heads = d, r, n_heads
        self.A = nn.Parameter(rng.child("A").normal((r, d), d**-0.5))
        self.B = nn.ParameterList(
            [nn.Parameter(torch.zeros(d, r, dtype=DTYPE)) for _ in range(n_heads)]
        )
        self.head_gate = nn.Parameter(rng.child("gate").normal((n_heads, d), d**-0.5))

    def head_weights(self, e: torch.Tensor) -> torch.Tensor:
        return softmax(e @ self.head_gate.T)

    def forward(self, e: torch.Tensor) -> torch.Tensor:
        _check_dim(e, self.d)
        b = self.head_weights(e)
        z = e @ self.A.T
        # sum starts from int 0, so a single head reproduces plain LoRA bit-for-bit
        return sum(b[..., i : i + 1] * (z @ B.T) for i, B in enumerate(self.B))


def expert_forward(ex: MultiHeadExpert, e: torch.Tensor) -> torch.Tensor:
    return ex(e)


class TaskRouter(nn.Module):
    def __init__(self, d: int, n_experts: int, task_id: int, rng: Rng):
        super().__init__()
        self.task_id = task_id
        self.weight = nn.Parameter(rng.normal((n_experts, d), d**-0.5))

    @property
    def frozen(self) -> bool:
        return is_frozen(self.weight)

    def freeze(self) -> None:
        if self.frozen:
            raise FrozenParameterError(f"router {self.task_id} is already frozen")
        mark_frozen(self.weight)

    def logits(self, e: torch.Tensor) -> torch.Tensor:
        _check_dim(e, self.weight.shape[1])
        return e @ self.weight.T


def route(router: TaskRouter, e: torch.Tensor, k: int) -> torch.Tensor:
    """Sparse expert weights: top-k of the router softmax, not renormalized."""
    return topk_mask(softmax(router.logits(e)), k)


class _RoutingLog:
    """Active-expert sets per site in call order; used to pin gating in gradient checks."""

    def __init__(self):
        self.calls: dict[str, list[torch.Tensor]] = {}
        self.replay: Optional[dict[str, list[torch.Tensor]]] = None
        self.cursor: dict[str, int] = {}
        self.flips = 0


class MoESite(nn.Module):
    def __init__(self, name: str, d: int, r: int, n_experts: int, n_heads: int, rng: Rng):
        super().__init__()
        self.name, self.d, self.n_experts = name, d, n_experts
        self.experts = nn.ModuleList(
            [MultiHeadExpert(d, r, n_heads, rng.child("expert", i)) for i in range(n_experts)]
        )
        self.routers = nn.ModuleList()
        self._log: Optional[_RoutingLog] = None

    def add_router(self, task_id: int, rng: Rng) -> None:
        self.routers.append(TaskRouter(self.d, self.n_experts, task_id, rng))

    def router(self, task_id: int) -> TaskRouter:
        if not 0 <= task_id < len(self.routers):
            raise ContractError(f"no router for task {task_id} at site {self.name}")
        return self.routers[task_id]

    def _active(self, probs: torch.Tensor, k: int) -> torch.Tensor:
        idx = topk_indices(probs, k)
        log = self._log
        if log is None:
            return idx
        if log.replay is not None:
            n = log.cursor.get(self.name, 0)
            log.cursor[self.name] = n + 1
            pinned = log.replay[self.name][n]
            if not torch.equal(pinned.sort(dim=-1).values, idx.sort(dim=-1).values):
                log.flips += 1
            return pinned
        log.calls.setdefault(self.name, []).append(idx)
        return idx

    def forward(self, task_id: int, e: torch.Tensor, k: int) -> torch.Tensor:
        _check_dim(e, self.d)
        flat = e.reshape(-1, self.d)
        probs = softmax(self.router(task_id).logits(flat))
        idx = self._active(probs, k)
        keep = torch.zeros(probs.shape, dtype=torch.bool)
        keep.scatter_(-1, idx, True)
        gate = torch.where(keep, probs, torch.zeros((), dtype=DTYPE))
        out = torch.zeros_like(flat)
        # only experts that some sample activates are evaluated, and only on those samples
        for j in torch.unique(idx).tolist():
            rows = keep[:, j].nonzero(as_tuple=True)[0]
            contrib = gate[rows, j : j + 1] * self.experts[j](flat[rows])
            out = out.index_add(0, rows, contrib)
        return out.reshape(e.shape)


def moe_forward_dense(site: MoESite, task_id: int, e: torch.Tensor, k: int) -> torch.Tensor:
    """Reference: every expert evaluated on every sample, weighted by the masked gate."""
    w = route(site.router(task_id), e, k)
    return sum(w[..., j : j + 1] * ex(e) for j, ex in enumerate(site.experts))


@dataclass(frozen=True)
class EncoderPath:
    kind: str  # "frozen" | "affa" | "abfa"
    task_id: Optional[int] = None

    def __str__(self) -> str:
        return self.kind if self.task_id is None else f"{self.kind}({self.task_id})"


FROZEN = EncoderPath("frozen")
AFFA = EncoderPath("affa")


def abfa(task_id: int) -> EncoderPath:
    return EncoderPath("abfa", int(task_id))


class AffaState(nn.Module):
    """Task-shared LoRA adapters, one per injection site."""

    def __init__(self, d: int, r: int, sites: Iterable[str], rng: Rng):
        super().__init__()
        self.adapters = nn.ModuleDict({s: LoraAdapter(d, r, rng.child(s)) for s in sites})


class MoEAdapterState(nn.Module):
    def __init__(
        self, d: int, r: int, n_experts: int, n_heads: int, k: int, sites: Iterable[str], rng: Rng
    ):
        super().__init__()
        if not 1 <= k <= n_experts:
            raise ContractError(f"need 1 <= k <= N_E, got k={k}, N_E={n_experts}")
        self.d, self.k = d, k
        self.sites = nn.ModuleDict(
            {s: MoESite(s, d, r, n_experts, n_heads, rng.child(s)) for s in sites}
        )

    @property
    def n_routers(self) -> int:
        return min((len(s.routers) for s in self.sites.values()), default=0)

    def router_params(self, task_id: int) -> list[nn.Parameter]:
        return [s.router(task_id).weight for s in self.sites.values()]

    def expert_params(self) -> list[nn.Parameter]:
        return [p for s in self.sites.values() for p in s.experts.parameters()]

    def expand_router(self, seed: int) -> int:
        """Append one unfrozen router at every site; returns the new task id."""
        for s in self.sites.values():
            for r in s.routers:
                if not r.frozen:
                    raise ContractError(
                        f"router {r.task_id} at {s.name} is still trainable; freeze it first"
                    )
        task_id = self.n_routers
        rng = Rng(seed)
        for name, s in self.sites.items():
            s.add_router(task_id, rng.child(name))
        return task_id

    def freeze_router(self, task_id: int) -> None:
        if not 0 <= task_id < self.n_routers:
            raise ContractError(f"no router for task {task_id}")
        for s in self.sites.values():
            s.router(task_id).freeze()

    def freeze_experts(self) -> None:
        for p in self.expert_params():
            if not is_frozen(p):
                mark_frozen(p)

    @contextmanager
    def record_routing(self) -> Iterator[_RoutingLog]:
        log = _RoutingLog()
        for s in self.sites.values():
            s._log = log
        try:
            yield log
        finally:
            for s in self.sites.values():
                s._log = None

    @contextmanager
    def pinned_routing(self, recorded: _RoutingLog) -> Iterator[_RoutingLog]:
        """Re-run forwards with the active expert sets from ``recorded``."""
        log = _RoutingLog()
        log.replay = recorded.calls
        for s in self.sites.values():
            s._log = log
        try:
            yield log
        finally:
            for s in self.sites.values():
                s._log = None


def moe_forward(state: MoEAdapterState, layer: int, branch: str, task_id: int, e: torch.Tensor):
    name = site_name(branch, layer)
    if name not in state.sites:
        raise ContractError(f"no MoE adapter at site {name}")
    return state.sites[name](task_id, e, state.k)


def expand_router(state: MoEAdapterState, seed: int) -> int:
    return state.expand_router(seed)


def freeze_router(state: MoEAdapterState, task_id: int) -> None:
    state.freeze_router(task_id)


class AdapterSet(nn.Module):
    """Both adapter families plus the rule deciding which one fires at a site."""

    def __init__(self, affa: AffaState, abfa_state: MoEAdapterState):
        super().__init__()
        self.affa = affa
        self.abfa = abfa_state

    def inject(self, branch: str, layer: int, path: EncoderPath, h: torch.Tensor):
        """Adapter output added to the residual stream at this site, or None."""
        name = site_name(branch, layer)
        if path.kind == "affa":
            ad = self.affa.adapters[name] if name in self.affa.adapters else None
            return None if ad is None else ad(h)
        if path.kind == "abfa":
            if not 0 <= path.task_id < self.abfa.n_routers:
                raise ContractError(f"path {path} has no trained router")
            if name not in self.abfa.sites:
                return None
            return self.abfa.sites[name](path.task_id, h, self.abfa.k)
        return None

    def check_path(self, path: EncoderPath) -> None:
        if path.kind == "abfa" and not 0 <= path.task_id < self.abfa.n_routers:
            raise ContractError(f"path {path} has no trained router")
