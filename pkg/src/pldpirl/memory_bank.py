"""Per-sample moving-average embedding store."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np


class BankConfigError(ValueError):
    pass


class SamplingError(ValueError):
    pass


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


@dataclass
class BankSnapshot:
    entries: np.ndarray
    initialized: np.ndarray


class EmbeddingBank:
    """N x dim unit vectors updated by exponential moving average.

    Entries start as uniform noise on the sphere and count as uninitialized
    until their first update; only initialized entries are eligible negatives.
    """

    def __init__(self, n: int, dim: int, momentum: float = 0.5, kind: str = "image", seed: int = 0):
        if n < 1 or dim < 1:
            raise BankConfigError(f"bank needs N >= 1 and dim >= 1, got N={n}, dim={dim}")
        if not 0.0 <= momentum < 1.0:
            raise BankConfigError(f"momentum must lie in [0, 1), got {momentum}")
        rng = np.random.default_rng(seed)
        self.entries = _unit_rows(rng.normal(size=(n, dim)))
        self.initialized = np.zeros(n, dtype=bool)
        self.momentum = float(momentum)
        self.kind = kind
        self.update_counts = np.zeros(n, dtype=np.int64)

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    @property
    def n_initialized(self) -> int:
        return int(self.initialized.sum())

    def _check_index(self, index) -> np.ndarray:
        idx = np.atleast_1d(np.asarray(index, dtype=np.int64))
        if idx.size and (idx.min() < 0 or idx.max() >= self.n):
            raise IndexError(f"bank index out of range [0, {self.n}): {idx.tolist()}")
        return idx

    def update_ema(self, index, embedding: np.ndarray) -> None:
        """entry <- normalize(m * entry + (1 - m) * embedding) for one or many rows."""
        idx = self._check_index(index)
        emb = np.asarray(embedding, dtype=np.float64).reshape(len(idx), self.dim)
        if len(np.unique(idx)) != len(idx):
            raise IndexError("duplicate indices in one bank update")
        mixed = self.momentum * self.entries[idx] + (1.0 - self.momentum) * emb
        self.entries[idx] = _unit_rows(mixed)
        self.initialized[idx] = True
        self.update_counts[idx] += 1

    def sample_negatives(self, exclude: int, count: int, rng: np.random.Generator) -> np.ndarray:
        """``count`` distinct initialized entries other than ``exclude`` (copies)."""
        self._check_index(exclude)
        pool = np.flatnonzero(self.initialized)
        pool = pool[pool != exclude]
        if count > len(pool):
            raise SamplingError(f"asked for {count} negatives, only {len(pool)} eligible entries")
        pick = rng.choice(pool, size=count, replace=False)
        return self.entries[pick].copy()

    def sample_negatives_batch(self, excludes: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
        """Stack of ``sample_negatives`` for each index in ``excludes``: B x count x dim."""
        return np.stack([self.sample_negatives(int(e), count, rng) for e in excludes])

    def snapshot(self) -> BankSnapshot:
        return BankSnapshot(self.entries.copy(), self.initialized.copy())

    def state(self, prefix: str) -> Dict[str, np.ndarray]:
        return {
            f"{prefix}.entries": self.entries.copy(),
            f"{prefix}.initialized": self.initialized.astype(np.float64),
        }

    def load_state(self, state: Dict[str, np.ndarray], prefix: str) -> None:
        entries = state[f"{prefix}.entries"]
        if entries.shape != self.entries.shape:
            raise BankConfigError(f"{prefix}: stored bank {entries.shape} != {self.entries.shape}")
        self.entries = entries.copy()
        self.initialized = state[f"{prefix}.initialized"] > 0.5


def init_bank(n: int, dim: int, momentum: float = 0.5, kind: str = "image", seed: int = 0) -> EmbeddingBank:
    return EmbeddingBank(n, dim, momentum, kind, seed)
