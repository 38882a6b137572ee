"""Training configuration and the full model state (encoder, adapters, selector)."""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Iterator, Optional

import torch

from .adapters import AdapterSet, AffaState, EncoderPath, MoEAdapterState, is_frozen, site_name
from .backbone import FrozenDualEncoder, encode_image, encode_text, to_f32_grid
from .dds import TaskPrototypeBank
from .errors import ContractError
from .linalg import Rng


@dataclass
class TrainConfig:
    seed: int = 0
    d: int = 16
    n_layers: int = 2
    n_experts: int = 22
    top_k: int = 2
    n_heads: int = 4
    rank: int = 16
    n_prototypes: int = 5
    threshold: float = 0.75
    tau: float = 0.07
    tau_ce: float = 0.01
    lr: float = 1e-3
    batch_size: int = 16
    iterations_abfa: int = 1000
    iterations_affa: int = 1000
    n_shots: int = 0
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    kmeans_iters: int = 100
    freeze_experts_after_task: bool = False
    affa_branches: tuple[str, ...] = ("image", "text")
    abfa_branches: tuple[str, ...] = ("image", "text")
    affa_layers: Optional[tuple[int, ...]] = None  # None: final layer only
    abfa_layers: Optional[tuple[int, ...]] = None  # None: every layer

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.affa_branches = tuple(self.affa_branches)
        self.abfa_branches = tuple(self.abfa_branches)
        if self.affa_layers is not None:
            self.affa_layers = tuple(self.affa_layers)
        if self.abfa_layers is not None:
            self.abfa_layers = tuple(self.abfa_layers)
        counts = {
            "d": self.d,
            "n_experts": self.n_experts,
            "top_k": self.top_k,
            "n_heads": self.n_heads,
            "rank": self.rank,
            "n_prototypes": self.n_prototypes,
            "batch_size": self.batch_size,
        }
        bad = [k for k, v in counts.items() if v < 1]
        if bad or self.n_layers < 0 or self.iterations_abfa < 0 or self.iterations_affa < 0:
            raise ContractError(f"config counts must be positive: {bad or 'iterations/n_layers'}")
        if self.top_k > self.n_experts:
            raise ContractError(f"top_k={self.top_k} exceeds n_experts={self.n_experts}")
        for b in self.affa_branches + self.abfa_branches:
            if b not in ("image", "text"):
                raise ContractError(f"unknown branch {b!r}")
        for layers in (self.affa_layers or ()), (self.abfa_layers or ()):
            for l in layers:
                if not 0 <= l < self.n_layers:
                    raise ContractError(f"layer {l} outside 0..{self.n_layers - 1}")

    @classmethod
    def few_shot(cls, **overrides) -> "TrainConfig":
        base = dict(lr=5e-4, batch_size=32, iterations_abfa=300, iterations_affa=300, n_shots=5)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ContractError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        out = asdict(self)
        for k, v in out.items():
            if isinstance(v, tuple):
                out[k] = list(v)
        return out

    def affa_sites(self) -> list[str]:
        if self.n_layers == 0:
            return []
        layers = self.affa_layers if self.affa_layers is not None else (self.n_layers - 1,)
        return [site_name(b, l) for b in self.affa_branches for l in sorted(layers)]

    def abfa_sites(self) -> list[str]:
        layers = self.abfa_layers if self.abfa_layers is not None else range(self.n_layers)
        return [site_name(b, l) for b in self.abfa_branches for l in sorted(layers)]


def fixture_config(**overrides) -> TrainConfig:
    """Desk-scale setup for the synthetic stream: 8 experts, rank 8, d=16, two blocks."""
    base = dict(
        d=16,
        n_layers=2,
        n_experts=8,
        top_k=2,
        n_heads=4,
        rank=8,
        iterations_abfa=300,
        iterations_affa=100,
    )
    base.update(overrides)
    return TrainConfig(**base)


class ModelState(torch.nn.Module):
    """Everything a trained stream carries: frozen encoder, both adapters, prototype bank."""

    def __init__(
        self,
        config: TrainConfig,
        d_in: int,
        class_counts: list[int],
        task_names: Optional[list[str]] = None,
    ):
        super().__init__()
        if not class_counts or min(class_counts) < 1:
            raise ContractError("every task needs at least one class")
        self.config = config
        self.class_counts = list(class_counts)
        self.task_names = list(task_names or [f"task{t}" for t in range(len(class_counts))])
        self.class_offsets = [sum(class_counts[:t]) for t in range(len(class_counts))]
        self.encoder = FrozenDualEncoder(d_in, config.d, config.n_layers, sum(class_counts), config.seed)
        rng = Rng(config.seed)
        affa = AffaState(config.d, config.rank, config.affa_sites(), rng.child("affa"))
        moe = MoEAdapterState(
            config.d,
            config.rank,
            config.n_experts,
            config.n_heads,
            config.top_k,
            config.abfa_sites(),
            rng.child("abfa"),
        )
        self.adapters = AdapterSet(affa, moe)
        for p in self.adapters.parameters():
            p.data = to_f32_grid(p.data)
            p.requires_grad_(False)
        self.bank = TaskPrototypeBank(
            config.n_prototypes, config.threshold, config.seed, config.kmeans_iters
        )
        self.trained_tasks = 0
        self._phase: Optional[str] = None

    @property
    def n_tasks(self) -> int:
        return len(self.class_counts)

    def classes_of(self, task_id: int) -> torch.Tensor:
        if not 0 <= task_id < self.n_tasks:
            raise ContractError(f"unknown task {task_id}")
        off = self.class_offsets[task_id]
        return torch.arange(off, off + self.class_counts[task_id])

    def encode_image(self, x, path: EncoderPath) -> torch.Tensor:
        return encode_image(self.encoder, x, path, self.adapters)

    def encode_text(self, class_ids, path: EncoderPath) -> torch.Tensor:
        return encode_text(self.encoder, class_ids, path, self.adapters)

    def named_trainable(self, phase: str) -> list[tuple[str, torch.nn.Parameter]]:
        """Parameters a phase may update: AFFA LoRA, or the current router plus unfrozen experts."""
        if phase == "affa":
            return [(f"affa.{n}", p) for n, p in self.adapters.affa.named_parameters()]
        if phase == "abfa":
            return [
                (f"abfa.{n}", p)
                for n, p in self.adapters.abfa.named_parameters()
                if not is_frozen(p)
            ]
        raise ContractError(f"unknown training phase {phase!r}")

    @contextmanager
    def training_phase(self, phase: str) -> Iterator[list[tuple[str, torch.nn.Parameter]]]:
        if self._phase is not None:
            raise ContractError(
                f"cannot start {phase} training while {self._phase} training is active"
            )
        params = self.named_trainable(phase)
        self._phase = phase
        for _, p in params:
            p.requires_grad_(True)
        try:
            yield params
        finally:
            for _, p in params:
                p.requires_grad_(False)
            self._phase = None

    def expand_router(self) -> int:
        t = self.adapters.abfa.n_routers
        task_id = self.adapters.abfa.expand_router(int(Rng(self.config.seed).child("router", t).integers(2**62)))
        for p in self.adapters.abfa.router_params(task_id):
            p.data = to_f32_grid(p.data)
            p.requires_grad_(False)
        return task_id

    def snap_to_f32(self) -> None:
        """Round unfrozen adapter parameters onto the float32 grid used on disk."""
        with torch.no_grad():
            for p in self.adapters.parameters():
                if not is_frozen(p):
                    p.copy_(to_f32_grid(p))
