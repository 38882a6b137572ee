"""Slow reference implementations in plain Python, used to cross-check the fast paths."""
from __future__ import annotations

import math
from typing import Sequence

Matrix = list[list[float]]


def matmul(a: Matrix, b: Matrix) -> Matrix:
    n, m, p = len(a), len(b), len(b[0]) if b else 0
    return [[math.fsum(a[i][k] * b[k][j] for k in range(m)) for j in range(p)] for i in range(n)]


def softmax(x: Sequence[float]) -> list[float]:
    top = max(x)
    ex = [math.exp(v - top) for v in x]
    s = math.fsum(ex)
    return [v / s for v in ex]


def topk_mask(w: Sequence[float], k: int) -> list[float]:
    order = sorted(range(len(w)), key=lambda i: (-w[i], i))
    keep = set(order[:k])
    return [w[i] if i in keep else 0.0 for i in range(len(w))]


def cosine(a: Sequence[float], b: Sequence[float]) -> float:
    dot = math.fsum(x * y for x, y in zip(a, b))
    na = math.sqrt(math.fsum(x * x for x in a))
    nb = math.sqrt(math.fsum(y * y for y in b))
    return max(-1.0, min(1.0, dot / (na * nb)))


def _logsumexp(xs: Sequence[float]) -> float:
    top = max(xs)
    return top + math.log(math.fsum(math.exp(x - top) for x in xs))


def supcon(l: Matrix, labels: Sequence[int]) -> float:
    """Anchor-by-anchor bidirectional supervised contrastive loss.

    Image anchor i: positives are texts p with the same label, each scored
    against all texts. Text anchor i: positives are images p, scored against
    all images.
    """
    n = len(labels)
    terms = []
    for i in range(n):
        P = [p for p in range(n) if labels[p] == labels[i]]
        row = _logsumexp([l[i][j] for j in range(n)])
        col = _logsumexp([l[j][i] for j in range(n)])
        terms.append(-math.fsum(l[i][p] - row for p in P) / len(P))
        terms.append(-math.fsum(l[p][i] - col for p in P) / len(P))
    return math.fsum(terms)


def metrics(A: Matrix) -> dict:
    """Transfer / Average / Last by explicit index sets."""
    T = len(A)
    transfer = [None]
    for j in range(1, T):
        cells = [(i, j) for i in range(T) if i < j]
        transfer.append(math.fsum(A[i][jj] for i, jj in cells) / len(cells))
    average = [math.fsum(A[i][j] for i in range(T)) / T for j in range(T)]
    last = [A[T - 1][j] for j in range(T)]
    tv = [v for v in transfer if v is not None]
    return {
        "transfer": transfer,
        "average": average,
        "last": last,
        "transfer_mean": math.fsum(tv) / len(tv) if tv else None,
        "average_mean": math.fsum(average) / T,
        "last_mean": math.fsum(last) / T,
    }


def kmeans_objective(x: Matrix, centroids: Matrix, assign: Sequence[int]) -> float:
    return math.fsum(
        math.fsum((a - c) ** 2 for a, c in zip(x[i], centroids[assign[i]])) for i in range(len(x))
    )
