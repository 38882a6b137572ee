"""Small-matrix numerics shared by every module.

All tensors are ``torch.float64``. Functions act on the last dimension and
accept leading batch dimensions, so the same code serves both the per-sample
contracts and the batched training path.
"""
from __future__ import annotations

import zlib
from typing import Sequence

import numpy as np
import torch

from .errors import ContractError, ShapeError

DTYPE = torch.float64


def as_tensor(x) -> torch.Tensor:
    return torch.as_tensor(x, dtype=DTYPE)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() != 2 or b.dim() != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {tuple(a.shape)} x {tuple(b.shape)}")
    return a @ b


def softmax(x: torch.Tensor) -> torch.Tensor:
    """Max-subtracted softmax over the last dimension."""
    if x.dim() == 0 or x.shape[-1] == 0:
        raise ContractError("softmax of an empty vector")
    z = x - x.max(dim=-1, keepdim=True).values.detach()
    e = torch.exp(z)
    return e / e.sum(dim=-1, keepdim=True)


def topk_indices(w: torch.Tensor, k: int) -> torch.Tensor:
    """Indices of the k largest entries; ties go to the lower index."""
    n = w.shape[-1]
    if not 1 <= k <= n:
        raise ContractError(f"top-k needs 1 <= k <= {n}, got k={k}")
    # stable descending sort keeps equal values in index order
    order = torch.sort(w.detach(), dim=-1, descending=True, stable=True).indices
    return order[..., :k]


def topk_mask(w: torch.Tensor, k: int) -> torch.Tensor:
    """Zero all but the k largest entries. Retained values are not renormalized."""
    idx = topk_indices(w, k)
    keep = torch.zeros(w.shape, dtype=torch.bool)
    keep.scatter_(-1, idx, True)
    return torch.where(keep, w, torch.zeros((), dtype=w.dtype))


def _norm(v: torch.Tensor) -> torch.Tensor:
    return torch.linalg.vector_norm(v, dim=-1)


def normalize(v: torch.Tensor) -> torch.Tensor:
    n = _norm(v)
    if v.shape[-1] == 0 or bool((n == 0).any()):
        raise ContractError("cannot normalize a zero vector")
    return v / n.unsqueeze(-1)


def cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"cosine dimension mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    na, nb = _norm(a), _norm(b)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise ContractError("cosine of a zero-norm vector")
    return ((a * b).sum(dim=-1) / (na * nb)).clamp(-1.0, 1.0)


def cosine_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise cosines between rows of ``a`` (n, d) and rows of ``b`` (m, d)."""
    return (normalize(a) @ normalize(b).T).clamp(-1.0, 1.0)


def _key_to_int(key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    return int(key)


class Rng:
    """Seeded PCG64 stream with named, deterministic sub-streams.

    ``child("experts", 3)`` always yields the same stream for the same parent
    seed, so consumers never share state and draw order in one consumer
    cannot perturb another.
    """

    def __init__(self, seed: int, _key: Sequence[int] = ()):
        self.seed = int(seed)
        self._key = tuple(_key)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self._key)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def child(self, *keys) -> "Rng":
        return Rng(self.seed, self._key + tuple(_key_to_int(k) for k in keys))

    def normal(self, shape, std: float = 1.0) -> torch.Tensor:
        return torch.from_numpy(self._gen.standard_normal(shape) * std)

    def uniform(self, shape=None):
        return self._gen.random(shape)

    def integers(self, high: int, size=None):
        return self._gen.integers(0, high, size=size)

    def choice(self, n: int, size: int, replace: bool = True, p=None):
        return self._gen.choice(n, size=size, replace=replace, p=p)

    def permutation(self, n: int):
        return self._gen.permutation(n)

    def orthogonal(self, n: int) -> torch.Tensor:
        """Haar-random orthogonal matrix (QR with sign correction)."""
        q, r = np.linalg.qr(self._gen.standard_normal((n, n)))
        q = q * np.sign(np.diag(r))
        return torch.from_numpy(q)
