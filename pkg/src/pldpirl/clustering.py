"""Spherical k-means (k-means++ seeding, Lloyd steps) over bank snapshots."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .memory_bank import EmbeddingBank


class InsufficientDataError(ValueError):
    pass


@dataclass
class ClusterModel:
    centers: np.ndarray
    assignments: np.ndarray
    inertia: float
    kind: str = "image"
    # inertia after each center update, one entry per Lloyd step
    history: List[float] = field(default_factory=list, repr=False)

    @property
    def k(self) -> int:
        return self.centers.shape[0]

    def state(self, prefix: str) -> Dict[str, np.ndarray]:
        return {
            f"{prefix}.centers": self.centers.copy(),
            f"{prefix}.assignments": self.assignments.astype(np.float64),
        }

    @classmethod
    def from_state(cls, state: Dict[str, np.ndarray], prefix: str, kind: str) -> "ClusterModel":
        return cls(state[f"{prefix}.centers"].copy(), state[f"{prefix}.assignments"].astype(np.int64), 0.0, kind)


def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ centers.T + (centers * centers).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _nearest(x: np.ndarray, centers: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    d = _sq_dists(x, centers)
    lab = np.argmin(d, axis=1)  # argmin returns the lowest index on ties
    return lab, d[np.arange(len(x)), lab]


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.where(n > 0, n, 1.0)


def _plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [x[rng.integers(n)]]
    closest = _sq_dists(x, np.array(centers))[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=closest / total)
        centers.append(x[idx])
        closest = np.minimum(closest, _sq_dists(x, x[idx][None])[:, 0])
    return np.array(centers)


def _repair_empty(x: np.ndarray, centers: np.ndarray, labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Reseed each empty cluster at the point farthest from its assigned center."""
    k = len(centers)
    empty = [c for c in range(k) if not np.any(labels == c)]
    if not empty:
        return centers, labels
    d = ((x - centers[labels]) ** 2).sum(axis=1)
    for c in empty:
        far = int(np.argmax(d))
        centers[c] = x[far]
        d[far] = -1.0
    labels, _ = _nearest(x, centers)
    return centers, labels


def _inertia(x: np.ndarray, centers: np.ndarray, labels: np.ndarray) -> float:
    return float(((x - centers[labels]) ** 2).sum())


def _lloyd(x, k, rng, max_iter, tol) -> ClusterModel:
    centers = _plusplus(x, k, rng)
    labels, _ = _nearest(x, centers)
    centers, labels = _repair_empty(x, centers, labels)
    history = []
    for _ in range(max_iter):
        means = np.array([x[labels == c].mean(axis=0) if np.any(labels == c) else centers[c] for c in range(k)])
        new_centers = _unit(means)
        shift = float(np.max(np.linalg.norm(new_centers - centers, axis=1)))
        centers = new_centers
        history.append(_inertia(x, centers, labels))
        labels, _ = _nearest(x, centers)
        centers, labels = _repair_empty(x, centers, labels)
        if shift < tol:
            break
    return ClusterModel(centers, labels, _inertia(x, centers, labels), history=history)


def kmeans_fit(
    embeddings: np.ndarray,
    k: int = 3,
    rng: Optional[np.random.Generator] = None,
    max_iter: int = 100,
    tol: float = 1e-6,
    restarts: int = 20,
    kind: str = "image",
) -> ClusterModel:
    """Best-of-``restarts`` spherical k-means; centers live on the unit sphere."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or len(x) < k:
        raise InsufficientDataError(f"k-means needs at least k={k} rows, got {x.shape}")
    rng = rng if rng is not None else np.random.default_rng(0)
    best = None
    for _ in range(restarts):
        model = _lloyd(x, k, rng, max_iter, tol)
        if best is None or model.inertia < best.inertia:
            best = model
    best.kind = kind
    return best


def assign(model: ClusterModel, embedding: np.ndarray) -> int:
    """Index of the nearest center (lowest index on ties)."""
    e = np.asarray(embedding, dtype=np.float64)[None]
    return int(_nearest(e, model.centers)[0][0])


def refresh_clusters(
    image_bank: EmbeddingBank,
    patch_bank: EmbeddingBank,
    k: int = 3,
    rng: Optional[np.random.Generator] = None,
    restarts: int = 20,
) -> Tuple[ClusterModel, ClusterModel]:
    """Fit independent models on both banks' initialized entries.

    Assignments cover all N rows; rows not yet initialized get the nearest
    center of the fitted model.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    # one child stream per bank so neither fit depends on the other's data
    child_seeds = rng.integers(0, 2**63 - 1, size=2)
    models = []
    for bank, kind, seed in ((image_bank, "image", child_seeds[0]), (patch_bank, "patch", child_seeds[1])):
        snap = bank.snapshot()
        live = snap.entries[snap.initialized]
        if len(live) < k:
            raise InsufficientDataError(f"{kind} bank has {len(live)} initialized entries, need {k}")
        model = kmeans_fit(live, k, np.random.default_rng(seed), restarts=restarts, kind=kind)
        full = np.empty(bank.n, dtype=np.int64)
        full[snap.initialized] = model.assignments
        if (~snap.initialized).any():
            full[~snap.initialized] = _nearest(snap.entries[~snap.initialized], model.centers)[0]
        model.assignments = full
        models.append(model)
    return models[0], models[1]
