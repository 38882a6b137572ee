"""Quick built-in oracle checks, run by ``afa selftest``."""
from __future__ import annotations

import tempfile
import traceback
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import oracles
from .adapters import LoraAdapter, MoESite, MultiHeadExpert, moe_forward_dense, route
from .checkpoint import load_checkpoint, named_tensors, save_checkpoint
from .checks import run_gradcheck, tiny_model
from .data import SyntheticSpec, generate, read_dataset, write_dataset
from .dds import TaskPrototypeBank, kmeans
from .evaluation import AccuracyMatrix, metrics
from .linalg import DTYPE, Rng, cosine, matmul, normalize, softmax, topk_mask
from .objectives import supcon_loss

Check = Callable[[Rng], str]


def _t(values) -> torch.Tensor:
    return torch.tensor(values, dtype=DTYPE)


def _close(a, b, tol: float) -> None:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    err = float(np.max(np.abs(a - b))) if a.size else 0.0
    if not err <= tol:
        raise AssertionError(f"max error {err:.3g} > {tol:g}")


def check_matmul(rng: Rng) -> str:
    m = rng.normal((3, 4))
    _close(matmul(torch.eye(3, dtype=m.dtype), m), m, 0)
    _close(matmul(m, torch.zeros(4, 0, dtype=m.dtype)).shape, (3, 0), 0)
    a, b = rng.child("a").normal((3, 4)), rng.child("b").normal((4, 2))
    _close(matmul(a, b), oracles.matmul(a.tolist(), b.tolist()), 1e-12)
    return ""


def check_softmax_topk(rng: Rng) -> str:
    _close(softmax(_t([0.0, 0.0])), [0.5, 0.5], 1e-15)
    _close(softmax(_t([1.0, 2.0, 3.0])), [0.09003, 0.24473, 0.66524], 1e-5)
    _close(topk_mask(_t([0.5, 0.3, 0.2]), 2), [0.5, 0.3, 0.0], 0)
    _close(topk_mask(_t([0.4, 0.4, 0.2]), 1), [0.4, 0.0, 0.0], 0)
    w = softmax(rng.normal((9,)))
    _close(topk_mask(w, 3), oracles.topk_mask(w.tolist(), 3), 0)
    return ""


def check_cosine(rng: Rng) -> str:
    _close(normalize(_t([3.0, 4.0])), [0.6, 0.8], 1e-15)
    _close(cosine(_t([1.0, 0.0]), _t([0.0, 1.0])), 0.0, 0)
    a, b = rng.child("a").normal((7,)), rng.child("b").normal((7,))
    _close(cosine(a, b), oracles.cosine(a.tolist(), b.tolist()), 1e-12)
    return ""


def check_supcon(rng: Rng) -> str:
    worst = 0.0
    for i, n in enumerate((1, 2, 8, 32)):
        r = rng.child(i)
        l = r.normal((n, n), 2.0)
        labels = torch.from_numpy(r.integers(3, size=n))
        got = float(supcon_loss(l, labels))
        want = oracles.supcon(l.tolist(), labels.tolist())
        worst = max(worst, abs(got - want))
        if n == 1 and got != 0.0:
            raise AssertionError(f"single-sample loss is {got}, expected 0")
    _close(worst, 0.0, 1e-10)
    return f"max error {worst:.1e}"


def check_moe(rng: Rng) -> str:
    site = MoESite("s", 6, 3, 5, 3, rng.child("site"))
    site.add_router(0, rng.child("router"))
    with torch.no_grad():
        for name, p in site.named_parameters():
            p.copy_(rng.child(name).normal(tuple(p.shape), 0.5))
    e = rng.child("e").normal((50, 6))
    with torch.no_grad():
        _close(site(0, e, 2), moe_forward_dense(site, 0, e, 2), 1e-12)
        w = route(site.router(0), e, 2)
    if int((w != 0).sum(dim=1).max()) > 2:
        raise AssertionError("gate has more than k nonzeros")
    ex = MultiHeadExpert(6, 3, 1, rng.child("one"))
    lora = LoraAdapter(6, 3, rng.child("one"))
    with torch.no_grad():
        lora.A.copy_(ex.A)
        ex.B[0].copy_(rng.child("B").normal((6, 3)))
        lora.B.copy_(ex.B[0])
        if not torch.equal(ex(e), lora(e)):
            raise AssertionError("single-head expert differs from plain LoRA")
    return ""


def check_kmeans(rng: Rng) -> str:
    x = rng.normal((60, 4))
    res = kmeans(x, 5, seed=3)
    h = res.objective_history
    if any(b > a for a, b in zip(h, h[1:])):
        raise AssertionError(f"objective increased: {h}")
    _close(h[-1], oracles.kmeans_objective(x.tolist(), res.centroids.tolist(), res.assignments.tolist()), 1e-9)
    again = kmeans(x, 5, seed=3)
    if not torch.equal(res.centroids, again.centroids):
        raise AssertionError("same seed gave different centroids")
    return f"{res.n_iter} iterations"


def check_selector(rng: Rng) -> str:
    e = torch.eye(4, dtype=torch.float64)
    bank = TaskPrototypeBank(K=1, threshold=0.75, prototypes=[e[:1], e[1:2], e[1:2]])
    sel = bank.select(e[1])
    if not (sel.seen and sel.task_id == 1):
        raise AssertionError(f"expected Seen(1), got {sel}")
    if bank.select(e[3]).seen:
        raise AssertionError("orthogonal sample should be unseen")
    return ""


def check_metrics(rng: Rng) -> str:
    A = [[0.9, 0.5, 0.4], [0.8, 0.9, 0.4], [0.7, 0.8, 0.9]]
    rep = metrics(AccuracyMatrix(np.array(A), ["a", "b", "c"]))
    ref = oracles.metrics(A)
    _close(rep.transfer[1:], ref["transfer"][1:], 1e-12)
    _close(rep.average, ref["average"], 1e-12)
    _close(rep.last, [0.7, 0.8, 0.9], 0)
    _close([rep.transfer[1], rep.transfer[2], rep.average[0]], [0.5, 0.4, 0.8], 1e-12)
    return ""


def check_dataset_roundtrip(rng: Rng) -> str:
    train, _, _ = generate(SyntheticSpec(n_tasks=2, classes_per_task=2, train_per_class=3, test_per_class=1))
    with tempfile.TemporaryDirectory() as tmp:
        a, b = Path(tmp, "a.bin"), Path(tmp, "b.bin")
        write_dataset(a, train)
        write_dataset(b, read_dataset(a))
        if a.read_bytes() != b.read_bytes():
            raise AssertionError("dataset file changed on rewrite")
    return ""


def check_checkpoint(rng: Rng) -> str:
    state, x, _ = tiny_model(0)
    with torch.no_grad():
        for p in state.adapters.parameters():
            p.copy_(p.to(torch.float32).to(p.dtype))
    state.trained_tasks = 1
    with tempfile.TemporaryDirectory() as tmp:
        save_checkpoint(state, tmp)
        back = load_checkpoint(tmp)
    for (n, a), (_, b) in zip(named_tensors(state), named_tensors(back)):
        if not torch.equal(a, b):
            raise AssertionError(f"tensor {n} changed")
    return ""


def check_gradients(rng: Rng) -> str:
    rep = run_gradcheck(0)
    if not rep.passed:
        raise AssertionError(str(rep.to_dict()))
    return f"max rel error {max(g.max_rel_error for g in rep.groups):.1e}"


CHECKS: list[tuple[str, Check]] = [
    ("matmul", check_matmul),
    ("softmax/top-k", check_softmax_topk),
    ("cosine/normalize", check_cosine),
    ("contrastive loss", check_supcon),
    ("MoE routing", check_moe),
    ("k-means", check_kmeans),
    ("domain selector", check_selector),
    ("metrics", check_metrics),
    ("dataset file", check_dataset_roundtrip),
    ("checkpoint", check_checkpoint),
    ("gradients", check_gradients),
]


def run_selftest(seed: int = 0) -> list[tuple[str, bool, str]]:
    root = Rng(seed).child("selftest")
    out = []
    for name, fn in CHECKS:
        try:
            out.append((name, True, fn(root.child(name))))
        except Exception as exc:  # report every failure, keep going
            traceback.print_exc()
            out.append((name, False, f"{type(exc).__name__}: {exc}"))
    return out
