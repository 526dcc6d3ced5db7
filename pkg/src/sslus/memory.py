"""Per-sample embedding store with exponential-moving-average updates."""

from __future__ import annotations

import numpy as np
import torch

from .models import EMBED_DIM, NORM_EPS

DEFAULT_MOMENTUM = 0.5


class MemoryBank:
    """One unit-norm row per training image, EMA-updated and used for negatives."""

    def __init__(self, ids: list[str], entries: torch.Tensor, momentum: float = DEFAULT_MOMENTUM):
        if entries.ndim != 2 or entries.shape[1] != EMBED_DIM:
            raise ValueError(f"entries must be [N, {EMBED_DIM}], got {tuple(entries.shape)}")
        if len(ids) != entries.shape[0]:
            raise ValueError("one id per row required")
        if len(set(ids)) != len(ids):
            raise ValueError("ids must be unique")
        self.ids = list(ids)
        self.entries = entries.detach().clone()
        self.momentum = momentum
        self.id_index = {sid: i for i, sid in enumerate(self.ids)}

    def __len__(self) -> int:
        return self.entries.shape[0]

    def row(self, sample_id: str) -> torch.Tensor:
        idx = self.id_index.get(sample_id)
        if idx is None:
            raise KeyError(f"unknown sample id {sample_id!r}")
        return self.entries[idx]

    def rows(self, sample_ids: list[str]) -> torch.Tensor:
        return torch.stack([self.row(sid) for sid in sample_ids])

    def update_ema(self, sample_id: str, fresh: torch.Tensor) -> None:
        """row <- normalize(m * row + (1 - m) * fresh); result renormalized to unit length."""
        idx = self.id_index.get(sample_id)
        if idx is None:
            raise KeyError(f"unknown sample id {sample_id!r}")
        mixed = self.momentum * self.entries[idx] + (1.0 - self.momentum) * fresh.detach()
        self.entries[idx] = mixed / (mixed.norm() + NORM_EPS)

    def sample_negatives(
        self, exclude_id: str, k: int, rng: np.random.Generator
    ) -> torch.Tensor:
        """k distinct rows drawn uniformly without replacement, never the excluded row."""
        idx = self.id_index.get(exclude_id)
        if idx is None:
            raise KeyError(f"unknown sample id {exclude_id!r}")
        n = len(self)
        if k > n - 1:
            raise ValueError(f"cannot draw {k} negatives from a bank of {n} rows")
        pool = np.delete(np.arange(n), idx)
        chosen = rng.choice(pool, size=k, replace=False)
        return self.entries[torch.as_tensor(chosen, dtype=torch.long)]

    def state_dict(self) -> dict:
        return {"ids": self.ids, "entries": self.entries, "momentum": self.momentum}

    @classmethod
    def from_state_dict(cls, state: dict) -> "MemoryBank":
        return cls(state["ids"], state["entries"], momentum=float(state["momentum"]))
