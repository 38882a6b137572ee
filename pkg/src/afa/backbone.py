"""Frozen surrogate dual encoder with adapter injection at every FFN block.

Each branch is a residual stack ``h <- h + FFN(h) + adapter(h)``. The image
branch starts from a linear projection of the input vector, the text branch
from a per-class embedding table. Weights are drawn once from a seeded stream,
rounded to float32 (so checkpoints hold them exactly) and never change.
"""
from __future__ import annotations

import hashlib
from typing import Optional

import torch
from torch import nn
from torch.nn import functional as F

from .adapters import FROZEN, AdapterSet, EncoderPath
from .errors import ContractError, ShapeError
from .linalg import DTYPE, Rng, normalize


def to_f32_grid(t: torch.Tensor) -> torch.Tensor:
    return t.to(torch.float32).to(DTYPE)


class FrozenDualEncoder(nn.Module):
    def __init__(self, d_in: int, d: int, n_layers: int, n_classes_max: int, seed: int):
        super().__init__()
        if min(d_in, d, n_classes_max) < 1 or n_layers < 0:
            raise ContractError(
                f"encoder dims must be positive: d_in={d_in} d={d} L={n_layers} "
                f"n_classes_max={n_classes_max}"
            )
        self.d_in, self.d, self.n_layers, self.n_classes_max = d_in, d, n_layers, n_classes_max
        self.seed = seed
        rng = Rng(seed).child("encoder")

        def gauss(name, shape, fan_in):
            return to_f32_grid(rng.child(name).normal(shape, fan_in**-0.5))

        self.register_buffer("image_proj", gauss("image_proj", (d, d_in), d_in))
        self.register_buffer("text_table", gauss("text_table", (n_classes_max, d), d))
        for branch in ("image", "text"):
            for l in range(n_layers):
                self.register_buffer(f"{branch}_w1_{l}", gauss(f"{branch}.w1.{l}", (4 * d, d), d))
                self.register_buffer(
                    f"{branch}_w2_{l}", gauss(f"{branch}.w2.{l}", (d, 4 * d), 4 * d)
                )

    def ffn(self, branch: str, layer: int, h: torch.Tensor) -> torch.Tensor:
        w1 = getattr(self, f"{branch}_w1_{layer}")
        w2 = getattr(self, f"{branch}_w2_{layer}")
        return F.gelu(h @ w1.T) @ w2.T

    def run(
        self,
        branch: str,
        h: torch.Tensor,
        path: EncoderPath = FROZEN,
        adapters: Optional[AdapterSet] = None,
    ) -> torch.Tensor:
        if path.kind != "frozen":
            if adapters is None:
                raise ContractError(f"path {path} needs adapters")
            adapters.check_path(path)
        for l in range(self.n_layers):
            out = h + self.ffn(branch, l, h)
            if path.kind != "frozen":
                inj = adapters.inject(branch, l, path, h)
                if inj is not None:
                    out = out + inj
            h = out
        return normalize(h)

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name, buf in self.named_buffers():
            digest.update(name.encode())
            digest.update(buf.numpy().tobytes())
        return digest.hexdigest()


def build_encoder(d_in: int, d: int, n_layers: int, n_classes_max: int, seed: int):
    return FrozenDualEncoder(d_in, d, n_layers, n_classes_max, seed)


def encode_image(
    enc: FrozenDualEncoder,
    x: torch.Tensor,
    path: EncoderPath = FROZEN,
    adapters: Optional[AdapterSet] = None,
) -> torch.Tensor:
    """Unit-norm image features for one vector ``(d_in,)`` or a batch ``(n, d_in)``."""
    x = torch.as_tensor(x, dtype=DTYPE)
    if x.shape[-1] != enc.d_in:
        raise ShapeError(f"image input must have dim {enc.d_in}, got shape {tuple(x.shape)}")
    return enc.run("image", x @ enc.image_proj.T, path, adapters)


def encode_text(
    enc: FrozenDualEncoder,
    class_ids,
    path: EncoderPath = FROZEN,
    adapters: Optional[AdapterSet] = None,
) -> torch.Tensor:
    ids = torch.as_tensor(class_ids, dtype=torch.long)
    if bool(((ids < 0) | (ids >= enc.n_classes_max)).any()):
        raise ContractError(f"class id out of range [0, {enc.n_classes_max})")
    return enc.run("text", enc.text_table[ids], path, adapters)
