"""Domain distribution selector: per-task K-means prototypes over frozen features.

A sample is scored against each learned task by its mean cosine similarity to
that task's prototypes. The best task wins if its score clears the threshold;
otherwise the sample is treated as coming from an unseen domain.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import torch

from .backbone import encode_image, to_f32_grid
from .errors import ContractError
from .linalg import DTYPE, Rng, cosine_matrix, normalize


@dataclass
class KMeansResult:
    centroids: torch.Tensor  # (K, d), raw cluster means
    prototypes: torch.Tensor  # (K, d), unit-normalized centroids
    assignments: torch.Tensor
    objective_history: list[float]
    n_iter: int


def _sq_dists(x: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(-1)


def _kmeanspp(x: torch.Tensor, K: int, rng: Rng) -> torch.Tensor:
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = _sq_dists(x, x[chosen]).min(dim=1).values
    for _ in range(1, K):
        total = float(d2.sum())
        if total > 0:
            p = (d2 / total).numpy()
            p = p / p.sum()
            nxt = int(rng.choice(n, 1, p=p)[0])
        else:
            nxt = int(rng.integers(n))
        chosen.append(nxt)
        d2 = torch.minimum(d2, _sq_dists(x, x[nxt : nxt + 1])[:, 0])
    return x[chosen].clone()


def kmeans(features, K: int, seed: Union[int, Rng] = 0, max_iters: int = 100) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    An empty cluster takes over the point farthest from its current centroid.
    Stops at an assignment fixpoint or after ``max_iters`` rounds.
    """
    x = torch.as_tensor(features, dtype=DTYPE)
    if x.dim() != 2:
        raise ContractError(f"features must be (n, d), got {tuple(x.shape)}")
    n = x.shape[0]
    if not 1 <= K <= n:
        raise ContractError(f"k-means needs 1 <= K <= n_points, got K={K}, n={n}")
    rng = seed if isinstance(seed, Rng) else Rng(seed)
    c = _kmeanspp(x, K, rng)
    assign = None
    history: list[float] = []
    it = 0
    for it in range(1, max_iters + 1):
        dist = _sq_dists(x, c)
        new_assign = dist.argmin(dim=1)
        counts = torch.bincount(new_assign, minlength=K)
        for j in (counts == 0).nonzero(as_tuple=True)[0].tolist():
            own = dist.gather(1, new_assign[:, None])[:, 0]
            # only steal from clusters that keep at least one point
            donors = torch.bincount(new_assign, minlength=K)[new_assign] > 1
            own = torch.where(donors, own, torch.full_like(own, -1.0))
            far = int(own.argmax())
            new_assign[far] = j
        converged = assign is not None and torch.equal(new_assign, assign)
        assign = new_assign
        c = torch.stack(
            [x[assign == j].mean(dim=0) for j in range(K)]
        )
        history.append(float(_sq_dists(x, c).gather(1, assign[:, None]).sum()))
        if converged:
            break
    return KMeansResult(c, normalize(c), assign, history, it)


@dataclass(frozen=True)
class Selection:
    seen: bool
    task_id: Optional[int]
    score: float

    @classmethod
    def Seen(cls, task_id: int, score: float) -> "Selection":
        return cls(True, task_id, score)

    @classmethod
    def Unseen(cls, best_score: float) -> "Selection":
        return cls(False, None, best_score)


@dataclass
class TaskPrototypeBank:
    K: int = 5
    threshold: float = 0.75
    seed: int = 0
    max_iters: int = 100
    prototypes: list[torch.Tensor] = field(default_factory=list)

    def __post_init__(self):
        if self.K < 1:
            raise ContractError("prototype count K must be positive")
        if not -1.0 <= self.threshold <= 1.0:
            raise ContractError(f"threshold must lie in [-1, 1], got {self.threshold}")

    @property
    def n_tasks(self) -> int:
        return len(self.prototypes)

    def prefix(self, n_tasks: int) -> "TaskPrototypeBank":
        """The bank as it stood after the first ``n_tasks`` fits."""
        return TaskPrototypeBank(
            self.K, self.threshold, self.seed, self.max_iters, self.prototypes[:n_tasks]
        )

    def fit(self, task_id: int, features: torch.Tensor) -> KMeansResult:
        if task_id != self.n_tasks:
            raise ContractError(
                f"prototypes must be fitted in task order: expected task {self.n_tasks}, got {task_id}"
            )
        res = kmeans(features, self.K, Rng(self.seed).child("kmeans", task_id), self.max_iters)
        self.prototypes.append(to_f32_grid(res.prototypes))
        return res

    def scores(self, features: torch.Tensor) -> torch.Tensor:
        """Mean prototype cosine per task: ``(n, T)`` for ``(n, d)`` features."""
        if not self.prototypes:
            raise ContractError("no task prototypes fitted")
        f = features.reshape(-1, features.shape[-1])
        return torch.stack([cosine_matrix(f, P).mean(dim=1) for P in self.prototypes], dim=1)

    def task_score(self, task_id: int, feature: torch.Tensor) -> float:
        if not 0 <= task_id < self.n_tasks:
            raise ContractError(f"task {task_id} has no prototypes")
        return float(cosine_matrix(feature.reshape(1, -1), self.prototypes[task_id]).mean())

    def select_batch(self, features: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Chosen task per row (-1 for unseen) and the best score."""
        s = self.scores(features)
        best = s.max(dim=1)
        # argmax reports the first maximum, i.e. the lowest task id on ties
        tasks = torch.where(best.values >= self.threshold, best.indices, torch.full_like(best.indices, -1))
        return tasks, best.values

    def select(self, feature: torch.Tensor) -> Selection:
        tasks, scores = self.select_batch(feature.reshape(1, -1))
        t, s = int(tasks[0]), float(scores[0])
        return Selection.Seen(t, s) if t >= 0 else Selection.Unseen(s)


def fit_task_prototypes(bank: TaskPrototypeBank, task_id: int, images, encoder) -> KMeansResult:
    """Cluster the frozen-encoder features of a task's training images."""
    x = torch.as_tensor(images, dtype=DTYPE)
    if x.shape[0] == 0:
        raise ContractError("cannot fit prototypes on an empty dataset")
    with torch.no_grad():
        feats = encode_image(encoder, x)
    return bank.fit(task_id, feats)


def task_score(bank: TaskPrototypeBank, task_id: int, feature) -> float:
    return bank.task_score(task_id, torch.as_tensor(feature, dtype=DTYPE))


def select(bank: TaskPrototypeBank, feature) -> Selection:
    return bank.select(torch.as_tensor(feature, dtype=DTYPE))


def calibrate_threshold(bank: TaskPrototypeBank, features_by_task, quantile: float = 0.0) -> float:
    """Threshold from seen data only: the ``quantile`` of each sample's score for its own task.

    ``features_by_task[t]`` holds frozen features of task t's training samples.
    Unseen domains are never consulted, so the result can be used to judge them.
    """
    if not 0.0 <= quantile < 1.0:
        raise ContractError(f"quantile must lie in [0, 1), got {quantile}")
    if len(features_by_task) != bank.n_tasks:
        raise ContractError(f"need features for all {bank.n_tasks} fitted tasks")
    own = [bank.scores(f)[:, t] for t, f in enumerate(features_by_task) if f.shape[0] > 0]
    if not own:
        raise ContractError("no samples to calibrate on")
    return float(torch.quantile(torch.cat(own), quantile).clamp(-1.0, 1.0))
