"""Relation network scoring, relation contrastive / NCE / perceptual losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn

RELATION_INPUT_DIM = 128
RELATION_HIDDEN_DIM = 64
DEFAULT_TEMPERATURE = 0.07
DEFAULT_LEVEL_WEIGHT = 0.5  # image- vs patch-level weighting
DEFAULT_LAMBDA = {"rcl": 1.0, "pirl": 1.0, "rcl_percep": 0.1, "pirl_percep": 0.75}

LOSS_CSV_FIELDS = (
    "epoch",
    "step",
    "rcl_image",
    "rcl_patch",
    "rcl_total",
    "perceptual",
    "nce_total",
    "combined",
)


class RelationNetwork(nn.Module):
    """Two fully connected layers (128 -> 64 -> 1) with ReLU and sigmoid."""

    def __init__(self):
        super().__init__()
        self.fc1 = nn.Linear(RELATION_INPUT_DIM, RELATION_HIDDEN_DIM)
        self.fc2 = nn.Linear(RELATION_HIDDEN_DIM, 1)

    def forward(self, pair_product: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.fc2(torch.relu(self.fc1(pair_product)))).squeeze(-1)


def relation_score(a: torch.Tensor, b: torch.Tensor, net: RelationNetwork) -> torch.Tensor:
    """Similarity in (0,1) of the element-wise product of two embeddings.

    Broadcasts over leading dimensions; symmetric in a and b.
    """
    if a.shape[-1] != RELATION_INPUT_DIM or b.shape[-1] != RELATION_INPUT_DIM:
        raise ValueError(
            f"embeddings must have width {RELATION_INPUT_DIM}, "
            f"got {a.shape[-1]} and {b.shape[-1]}"
        )
    return net(a * b)


def rcl_loss(pos_scores: torch.Tensor, neg_scores: torch.Tensor) -> torch.Tensor:
    """Mean over anchors of (s_pos - 1)^2 + mean_j (s_neg_j)^2.

    pos_scores: [N]; neg_scores: [N, k]. The negative terms are averaged per
    anchor so the loss scale does not depend on the negative count.
    """
    pos_scores = torch.as_tensor(pos_scores, dtype=torch.get_default_dtype()) \
        if not torch.is_tensor(pos_scores) else pos_scores
    neg_scores = torch.as_tensor(neg_scores, dtype=torch.get_default_dtype()) \
        if not torch.is_tensor(neg_scores) else neg_scores
    if pos_scores.ndim != 1 or pos_scores.numel() == 0:
        raise ValueError("pos_scores must be a non-empty [N] tensor")
    if neg_scores.ndim != 2 or neg_scores.shape[0] != pos_scores.shape[0] or neg_scores.shape[1] == 0:
        raise ValueError("neg_scores must be [N, k] with k >= 1")
    return ((pos_scores - 1.0) ** 2 + (neg_scores**2).mean(dim=1)).mean()


def total_rcl(rcl_image: torch.Tensor, rcl_patch: torch.Tensor, w: float = DEFAULT_LEVEL_WEIGHT):
    """w * image-level + (1 - w) * patch-level."""
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"w must be in [0,1], got {w}")
    return w * rcl_image + (1.0 - w) * rcl_patch


def nce_loss(
    anchor: torch.Tensor,
    positive: torch.Tensor,
    negatives: torch.Tensor,
    temperature: float = DEFAULT_TEMPERATURE,
) -> torch.Tensor:
    """Softmax cross-entropy over cosine similarities, positive vs k negatives.

    anchor/positive: [N, d] unit vectors; negatives: [N, k, d]. Returns the
    batch mean of -log(exp(cos+/t) / (exp(cos+/t) + sum_j exp(cos-_j/t))).
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    if anchor.ndim == 1:
        anchor, positive, negatives = anchor[None], positive[None], negatives[None]
    if negatives.ndim != 3 or negatives.shape[1] == 0:
        raise ValueError("negatives must be [N, k, d] with k >= 1")
    pos_sim = (anchor * positive).sum(dim=-1, keepdim=True)
    neg_sim = (anchor[:, None, :] * negatives).sum(dim=-1)
    logits = torch.cat([pos_sim, neg_sim], dim=1) / temperature
    return -torch.log_softmax(logits, dim=1)[:, 0].mean()


def perceptual_loss(image_tap: torch.Tensor, patch_taps: torch.Tensor) -> torch.Tensor:
    """Mean over patches of the MSE between the image tap and each patch tap.

    image_tap: [N, D] (or [D]); patch_taps: [N, J, D] (or [J, D]). The per-sample
    value is averaged over the batch.
    """
    if image_tap.ndim == 1:
        image_tap, patch_taps = image_tap[None], patch_taps[None]
    if image_tap.shape[-1] != patch_taps.shape[-1]:
        raise ValueError(
            f"tap widths differ: {image_tap.shape[-1]} vs {patch_taps.shape[-1]}"
        )
    diff = image_tap[:, None, :] - patch_taps
    return (diff**2).mean(dim=-1).mean(dim=-1).mean()


def combined_loss(contrastive_total, perceptual_total, lam: float):
    """lam * contrastive + (1 - lam) * perceptual."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0,1], got {lam}")
    return lam * contrastive_total + (1.0 - lam) * perceptual_total


@dataclass
class LossReport:
    """Per-step loss components; unused components stay None and serialize empty."""

    epoch: int
    step: int
    rcl_image: Optional[float] = None
    rcl_patch: Optional[float] = None
    rcl_total: Optional[float] = None
    perceptual: Optional[float] = None
    nce_total: Optional[float] = None
    combined: float = 0.0

    def csv_row(self) -> list[str]:
        def fmt(v):
            return "" if v is None else repr(float(v))

        return [
            str(self.epoch),
            str(self.step),
            fmt(self.rcl_image),
            fmt(self.rcl_patch),
            fmt(self.rcl_total),
            fmt(self.perceptual),
            fmt(self.nce_total),
            repr(float(self.combined)),
        ]
