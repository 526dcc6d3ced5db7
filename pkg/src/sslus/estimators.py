"""Scikit-learn style wrappers around the pretext and segmentation pipelines."""

from __future__ import annotations

from typing import Optional

import numpy as np
import torch
from sklearn.base import BaseEstimator

from .data import samples_from_arrays
from .models import PretextModel
from .training import (
    FinetuneConfig,
    PretextConfig,
    PretextState,
    batched,
    finetune_segmentation,
    load_checkpoint,
    pretext_train,
    rng_stream,
    to_image_tensor,
)
from .validation import check_image_array, check_mask_array


class ContrastivePretrainer(BaseEstimator):
    """Self-supervised representation learner: fit on unlabeled images,
    transform to unit-norm 128-d embeddings.

    Parameters mirror PretextConfig; defaults are the desk profile so that
    fits run on CPU in minutes.
    """

    def __init__(
        self,
        method: str = "rcl_percep",
        pretext_task: str = "crosspatch_freq",
        epochs: int = 50,
        batch_size: int = 8,
        learning_rate: float = 0.001,
        negatives_per_anchor: int = 8,
        lambda_weight: Optional[float] = None,
        level_weight: float = 0.5,
        bank_momentum: float = 0.5,
        temperature: float = 0.07,
        architecture: str = "tiny_cnn",
        image_size: int = 96,
        seed: int = 42,
    ):
        self.method = method
        self.pretext_task = pretext_task
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.negatives_per_anchor = negatives_per_anchor
        self.lambda_weight = lambda_weight
        self.level_weight = level_weight
        self.bank_momentum = bank_momentum
        self.temperature = temperature
        self.architecture = architecture
        self.image_size = image_size
        self.seed = seed

    def _config(self) -> PretextConfig:
        return PretextConfig(
            method=self.method,
            pretext_task=self.pretext_task,
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            negatives_per_anchor=self.negatives_per_anchor,
            lambda_weight=self.lambda_weight,
            level_weight=self.level_weight,
            bank_momentum=self.bank_momentum,
            temperature=self.temperature,
            architecture=self.architecture,
            image_size=self.image_size,
            seed=self.seed,
        )

    def fit(self, X, y=None):
        X = check_image_array(X)
        samples = samples_from_arrays(list(X))
        self.state_ = pretext_train(samples, self._config())
        self.loss_history_ = [row.combined for row in self.state_.loss_rows]
        return self

    def transform(self, X) -> np.ndarray:
        if not hasattr(self, "state_"):
            raise RuntimeError("fit must be called before transform")
        X = check_image_array(X)
        model: PretextModel = self.state_.model
        model.eval()
        out = []
        with torch.no_grad():
            for chunk in batched(list(X), self.state_.config.batch_size):
                emb, _ = model.encode_image(to_image_tensor(chunk))
                out.append(emb.numpy())
        return np.concatenate(out, axis=0)

    def fit_transform(self, X, y=None) -> np.ndarray:
        return self.fit(X, y).transform(X)


class UltrasoundSegmenter(BaseEstimator):
    """Encoder-decoder lesion segmenter with optional self-supervised init.

    `init` may be a fitted ContrastivePretrainer, a PretextState, or a
    checkpoint path; None trains the supervised baseline from scratch.
    """

    def __init__(
        self,
        init=None,
        epochs: int = 60,
        warmup_epochs: int = 20,
        patience: int = 15,
        batch_size: int = 8,
        lr_start: float = 1e-3,
        lr_end: float = 1e-6,
        lr_power: float = 0.9,
        architecture: str = "tiny_cnn",
        image_size: int = 96,
        validation_fraction: float = 0.15,
        seed: int = 42,
    ):
        self.init = init
        self.epochs = epochs
        self.warmup_epochs = warmup_epochs
        self.patience = patience
        self.batch_size = batch_size
        self.lr_start = lr_start
        self.lr_end = lr_end
        self.lr_power = lr_power
        self.architecture = architecture
        self.image_size = image_size
        self.validation_fraction = validation_fraction
        self.seed = seed

    def _config(self) -> FinetuneConfig:
        return FinetuneConfig(
            epochs=self.epochs,
            warmup_epochs=self.warmup_epochs,
            patience=self.patience,
            batch_size=self.batch_size,
            lr_start=self.lr_start,
            lr_end=self.lr_end,
            lr_power=self.lr_power,
            architecture=self.architecture,
            image_size=self.image_size,
            seed=self.seed,
        )

    def _resolve_init(self):
        if self.init is None:
            return None
        if isinstance(self.init, ContrastivePretrainer):
            if not hasattr(self.init, "state_"):
                raise RuntimeError("init pretrainer has not been fitted")
            return self.init.state_
        if isinstance(self.init, (PretextState, dict)):
            return self.init
        return load_checkpoint(self.init)

    def fit(self, X, y):
        X = check_image_array(X)
        y = check_mask_array(y, X)
        samples = samples_from_arrays(list(X), list(y))
        n_val = max(1, int(round(self.validation_fraction * len(samples))))
        if n_val >= len(samples):
            raise ValueError("not enough samples to split off a validation set")
        order = rng_stream(self.seed, "estimator_val_split").permutation(len(samples))
        val_idx = set(int(i) for i in order[:n_val])
        train = [s for i, s in enumerate(samples) if i not in val_idx]
        val = [s for i, s in enumerate(samples) if i in val_idx]
        self.result_ = finetune_segmentation(train, val, self._config(), init=self._resolve_init())
        self.model_ = self.result_.model
        self.best_val_dsc_ = self.result_.best_val_dsc
        return self

    def predict(self, X) -> np.ndarray:
        if not hasattr(self, "model_"):
            raise RuntimeError("fit must be called before predict")
        X = check_image_array(X)
        out = []
        for chunk in batched(list(X), self.batch_size):
            preds = self.model_.predict_masks(to_image_tensor(chunk))
            out.append(preds.numpy())
        return np.concatenate(out, axis=0)

    def score(self, X, y) -> float:
        """Mean Dice similarity over the batch (higher is better)."""
        from .metrics import overlap_metrics

        X = check_image_array(X)
        y = check_mask_array(y, X)
        preds = self.predict(X)
        return float(np.mean([overlap_metrics(p, t)[0] for p, t in zip(preds, y)]))
