"""Pretext training, downstream fine-tuning, schedulers, seeding and checkpoints."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from .data import Sample, resize_image, resize_mask
from .frequency import apply_frequency_filter, sample_crop_rect, sample_filter_spec
from .jigsaw import (
    partition_grid,
    select_focal_sets,
    transform_crosspatch,
    transform_jigsaw_baseline,
)
from .losses import (
    DEFAULT_LAMBDA,
    DEFAULT_LEVEL_WEIGHT,
    DEFAULT_TEMPERATURE,
    LOSS_CSV_FIELDS,
    LossReport,
    RelationNetwork,
    combined_loss,
    nce_loss,
    perceptual_loss,
    rcl_loss,
    relation_score,
    total_rcl,
)
from .memory import DEFAULT_MOMENTUM, MemoryBank
from .models import EncoderConfig, PretextModel, SegmentationModel, encoder_config

LR_GRID = (0.05, 0.01, 0.005, 0.001, 0.0005, 0.0001)
METHODS = ("pirl", "pirl_percep", "rcl", "rcl_percep")
PRETEXT_TASKS = ("jigsaw", "jigsaw_freq", "crosspatch", "crosspatch_freq")


def rng_stream(*key) -> np.random.Generator:
    """Deterministic generator derived from a structured key.

    Streams depend only on the key (typically seed, purpose, epoch, sample id),
    so augmentation draws are independent of batching and worker layout.
    """
    digest = hashlib.sha256(repr(key).encode()).digest()
    return np.random.default_rng(np.random.SeedSequence(int.from_bytes(digest[:16], "little")))


def batched(seq: Sequence, size: int) -> Iterator[list]:
    for start in range(0, len(seq), size):
        yield list(seq[start : start + size])


def to_image_tensor(images: Iterable[np.ndarray]) -> torch.Tensor:
    """Stack H,W,3 float arrays into a [B,3,H,W] float32 tensor."""
    stacked = np.stack([np.moveaxis(img, -1, 0) for img in images])
    return torch.from_numpy(np.ascontiguousarray(stacked, dtype=np.float32))


@dataclass
class PretextConfig:
    method: str = "rcl_percep"
    pretext_task: str = "crosspatch_freq"
    epochs: int = 2000
    batch_size: int = 16
    learning_rate: float = 0.001
    sgd_momentum: float = 0.9
    weight_decay: float = 0.0
    lambda_weight: Optional[float] = None  # None resolves to the method default
    level_weight: float = DEFAULT_LEVEL_WEIGHT
    bank_momentum: float = DEFAULT_MOMENTUM
    negatives_per_anchor: int = 4096
    temperature: float = DEFAULT_TEMPERATURE
    architecture: str = "reference_resnet50"
    image_size: int = 224
    crop_size: int = 192
    seed: int = 42
    literal_focal_flips: bool = False
    recompute_bank_each_epoch: bool = False
    pretrained_weights: Optional[str] = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.pretext_task not in PRETEXT_TASKS:
            raise ValueError(
                f"pretext_task must be one of {PRETEXT_TASKS}, got {self.pretext_task!r}"
            )
        if self.learning_rate not in LR_GRID:
            raise ValueError(f"learning_rate must be one of {LR_GRID}, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.crop_size % 6 != 0:
            raise ValueError("crop_size must be divisible by 6")
        if self.lambda_weight is not None and not 0.0 <= self.lambda_weight <= 1.0:
            raise ValueError(f"lambda_weight must be in [0,1], got {self.lambda_weight}")
        if self.negatives_per_anchor < 1:
            raise ValueError("negatives_per_anchor must be >= 1")

    @property
    def resolved_lambda(self) -> float:
        return self.lambda_weight if self.lambda_weight is not None else DEFAULT_LAMBDA[self.method]

    @property
    def uses_freq(self) -> bool:
        return self.pretext_task.endswith("_freq")

    @property
    def uses_crosspatch(self) -> bool:
        return self.pretext_task.startswith("crosspatch")

    @property
    def uses_rcl(self) -> bool:
        return self.method.startswith("rcl")

    @property
    def uses_percep(self) -> bool:
        return self.method.endswith("_percep")

    def encoder_cfg(self) -> EncoderConfig:
        return encoder_config(
            self.architecture,
            image_input_size=self.image_size,
            pretrained_weights=self.pretrained_weights,
        )


@dataclass
class FinetuneConfig:
    epochs: int = 500
    warmup_epochs: int = 100
    patience: int = 50
    batch_size: int = 16
    lr_start: float = 1e-3
    lr_end: float = 1e-6
    lr_power: float = 0.9
    train_fraction: float = 1.0
    architecture: str = "reference_resnet50"
    image_size: int = 224
    seed: int = 42

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError("warmup_epochs must satisfy 0 <= warmup < epochs")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ValueError(f"train_fraction must be in (0,1], got {self.train_fraction}")

    def encoder_cfg(self) -> EncoderConfig:
        return encoder_config(self.architecture, image_input_size=self.image_size)


def desk_pretext_config(**overrides) -> PretextConfig:
    """CPU-trainable profile: tiny encoder, 96px inputs, short schedule, 8 negatives."""
    base = dict(
        architecture="tiny_cnn",
        image_size=96,
        epochs=50,
        batch_size=8,
        negatives_per_anchor=8,
    )
    base.update(overrides)
    return PretextConfig(**base)


def desk_finetune_config(**overrides) -> FinetuneConfig:
    base = dict(
        architecture="tiny_cnn",
        image_size=96,
        epochs=60,
        warmup_epochs=20,
        patience=15,
        batch_size=8,
    )
    base.update(overrides)
    return FinetuneConfig(**base)


def poly_lr(epoch: int, cfg: FinetuneConfig) -> float:
    """Polynomial decay from lr_start at epoch 0 to lr_end at epoch == epochs."""
    if not 0 <= epoch <= cfg.epochs:
        raise ValueError(f"epoch must be in [0, {cfg.epochs}], got {epoch}")
    frac = 1.0 - epoch / cfg.epochs
    return (cfg.lr_start - cfg.lr_end) * frac**cfg.lr_power + cfg.lr_end


def early_stop_check(history: Sequence[float], warmup: int, patience: int) -> bool:
    """True when past warmup and the best entry is more than `patience` epochs old.

    Epochs spent inside the warmup window do not count against patience.
    """
    epoch = len(history)
    if epoch <= warmup:
        return False
    best_epoch = int(np.argmax(history)) + 1  # first occurrence wins
    return epoch - max(best_epoch, warmup) > patience


def _ensure_size(samples: list[Sample], size: int) -> list[Sample]:
    out = []
    for s in samples:
        if s.image.shape[:2] == (size, size):
            out.append(s)
        else:
            mask = resize_mask(s.mask, (size, size)) if s.mask is not None else None
            out.append(Sample(id=s.id, image=resize_image(s.image, (size, size)), mask=mask))
    return out


def prepare_pretext_views(
    sample: Sample, cfg: PretextConfig, epoch: int
) -> tuple[np.ndarray, np.ndarray]:
    """Build the image-level view and the 36 transformed patches for one sample.

    All randomness comes from the stream keyed by (seed, epoch, sample id), so
    the views are reproducible regardless of batch composition.
    """
    from .photometric import JitterSpec, jitter_patches, random_flip_jitter

    rng = rng_stream(cfg.seed, "aug", epoch, sample.id)
    jitter = JitterSpec()
    image_view = random_flip_jitter(sample.image, jitter, rng)

    rect = sample_crop_rect(sample.image.shape[:2], rng)
    src = sample.image
    if cfg.uses_freq:
        fspec = sample_filter_spec(rng)
        src = apply_frequency_filter(src, fspec, rect)
    top, left, ch, cw = rect
    crop = resize_image(src[top : top + ch, left : left + cw], (cfg.crop_size, cfg.crop_size))

    bundle = partition_grid(crop)
    if cfg.uses_crosspatch:
        layout = select_focal_sets(rng)
        bundle = transform_crosspatch(bundle, layout, rng, cfg.literal_focal_flips)
    else:
        bundle = transform_jigsaw_baseline(bundle, rng)
    patches = jitter_patches(bundle.patches, jitter, rng)
    p = cfg.encoder_cfg().patch_input_size
    patches = [resize_image(pt, (p, p)) for pt in patches]
    return image_view, np.stack([np.moveaxis(pt, -1, 0) for pt in patches])


def init_memory_bank(samples: list[Sample], model: PretextModel, cfg: PretextConfig) -> MemoryBank:
    """One eval-mode pass over image-level views under fixed per-sample init streams."""
    from .photometric import JitterSpec, random_flip_jitter

    if not samples:
        raise ValueError("cannot initialize a memory bank from an empty train set")
    jitter = JitterSpec()
    was_training = model.training
    model.eval()
    chunks = []
    with torch.no_grad():
        for idx_chunk in batched(range(len(samples)), cfg.batch_size):
            views = [
                random_flip_jitter(
                    samples[i].image, jitter, rng_stream(cfg.seed, "bank_init", samples[i].id)
                )
                for i in idx_chunk
            ]
            emb, _ = model.encode_image(to_image_tensor(views))
            chunks.append(emb)
    if was_training:
        model.train()
    return MemoryBank(
        [s.id for s in samples], torch.cat(chunks), momentum=cfg.bank_momentum
    )


@dataclass
class PretextState:
    model: PretextModel
    relation_net: Optional[RelationNetwork]
    bank: MemoryBank
    optimizer: torch.optim.Optimizer
    epoch: int
    config: PretextConfig
    loss_rows: list[LossReport]


def _make_optimizer(model: PretextModel, rn: Optional[RelationNetwork], cfg: PretextConfig):
    params = list(model.parameters())
    if rn is not None:
        params += list(rn.parameters())
    return torch.optim.SGD(
        params, lr=cfg.learning_rate, momentum=cfg.sgd_momentum, weight_decay=cfg.weight_decay
    )


def save_checkpoint(state: PretextState, path: str | os.PathLike) -> None:
    payload = {
        "encoder": state.model.encoder.state_dict(),
        "head_f": state.model.head_f.state_dict(),
        "head_g": state.model.head_g.state_dict(),
        "relation_net": state.relation_net.state_dict() if state.relation_net else None,
        "memory_bank": state.bank.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "epoch": state.epoch,
        "config_json": json.dumps(asdict(state.config), sort_keys=True),
        "rng_state": torch.get_rng_state(),
    }
    torch.save(payload, path)


def load_checkpoint(path: str | os.PathLike) -> dict:
    try:
        return torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise RuntimeError(f"could not read checkpoint {path}: {exc}")


def checkpoint_config(payload: dict) -> PretextConfig:
    return PretextConfig(**json.loads(payload["config_json"]))


def _restore_state(payload: dict, target_epochs: Optional[int] = None) -> PretextState:
    cfg = checkpoint_config(payload)
    if target_epochs is not None:
        cfg = replace(cfg, epochs=target_epochs)
    model = PretextModel(cfg.encoder_cfg())
    model.encoder.load_state_dict(payload["encoder"])
    model.head_f.load_state_dict(payload["head_f"])
    model.head_g.load_state_dict(payload["head_g"])
    rn = None
    if payload["relation_net"] is not None:
        rn = RelationNetwork()
        rn.load_state_dict(payload["relation_net"])
    bank = MemoryBank.from_state_dict(payload["memory_bank"])
    opt = _make_optimizer(model, rn, cfg)
    opt.load_state_dict(payload["optimizer"])
    torch.set_rng_state(payload["rng_state"])
    return PretextState(model, rn, bank, opt, int(payload["epoch"]), cfg, [])


def pretext_train(
    train_samples: list[Sample],
    cfg: PretextConfig,
    out_dir: Optional[str | os.PathLike] = None,
    resume_from: Optional[Union[dict, str, os.PathLike]] = None,
) -> PretextState:
    """Train the contrastive pretext objective; returns the last-epoch state.

    Per batch: image-level views and transformed patch views are encoded and
    projected, scored against the bank positive and k sampled negatives, the
    configured loss is stepped with SGD, and bank rows are EMA-updated with the
    fresh image embeddings (computed before the step).
    """
    if not train_samples:
        raise ValueError("train split is empty")
    if cfg.negatives_per_anchor > len(train_samples) - 1:
        raise ValueError(
            f"negatives_per_anchor={cfg.negatives_per_anchor} requires at least "
            f"{cfg.negatives_per_anchor + 1} train samples, got {len(train_samples)}"
        )

    samples = _ensure_size(train_samples, cfg.image_size)
    if resume_from is not None:
        payload = resume_from if isinstance(resume_from, dict) else load_checkpoint(resume_from)
        stored = checkpoint_config(payload)
        if replace(stored, epochs=cfg.epochs) != cfg:
            raise ValueError("resume config differs from checkpoint config (beyond epochs)")
        state = _restore_state(payload, target_epochs=cfg.epochs)
        model, rn, bank, opt = state.model, state.relation_net, state.bank, state.optimizer
        start_epoch, loss_rows = state.epoch, []
    else:
        torch.manual_seed(cfg.seed)
        model = PretextModel(cfg.encoder_cfg())
        rn = RelationNetwork() if cfg.uses_rcl else None
        opt = _make_optimizer(model, rn, cfg)
        bank = init_memory_bank(samples, model, cfg)
        start_epoch, loss_rows = 0, []

    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        if cfg.recompute_bank_each_epoch and epoch > 1:
            bank = init_memory_bank(samples, model, cfg)
        model.train()
        if rn is not None:
            rn.train()
        order = rng_stream(cfg.seed, "order", epoch).permutation(len(samples))
        for step, idx_chunk in enumerate(batched(order, cfg.batch_size), start=1):
            batch = [samples[int(i)] for i in idx_chunk]
            views = [prepare_pretext_views(s, cfg, epoch) for s in batch]
            imgs = to_image_tensor([v[0] for v in views])
            patches = torch.from_numpy(
                np.ascontiguousarray(np.stack([v[1] for v in views]), dtype=np.float32)
            )

            v_img, tap_img = model.encode_image(imgs)
            v_patch, taps_patch = model.encode_patches(patches)
            positives = bank.rows([s.id for s in batch])
            negatives = torch.stack(
                [
                    bank.sample_negatives(
                        s.id,
                        cfg.negatives_per_anchor,
                        rng_stream(cfg.seed, "neg", epoch, s.id),
                    )
                    for s in batch
                ]
            )

            report = LossReport(epoch=epoch, step=step)
            if cfg.uses_rcl:
                s_pos_img = relation_score(v_img, positives, rn)
                s_neg_img = relation_score(v_img[:, None, :], negatives, rn)
                s_pos_patch = relation_score(v_patch, positives, rn)
                s_neg_patch = relation_score(v_patch[:, None, :], negatives, rn)
                l_image = rcl_loss(s_pos_img, s_neg_img)
                l_patch = rcl_loss(s_pos_patch, s_neg_patch)
                l_contrastive = total_rcl(l_image, l_patch, cfg.level_weight)
                report.rcl_image = float(l_image.detach())
                report.rcl_patch = float(l_patch.detach())
                report.rcl_total = float(l_contrastive.detach())
            else:
                l_image = nce_loss(v_img, positives, negatives, cfg.temperature)
                l_patch = nce_loss(v_patch, positives, negatives, cfg.temperature)
                l_contrastive = (
                    cfg.level_weight * l_image + (1.0 - cfg.level_weight) * l_patch
                )
                report.nce_total = float(l_contrastive.detach())

            if cfg.uses_percep:
                l_percep = perceptual_loss(tap_img, taps_patch)
                loss = combined_loss(l_contrastive, l_percep, cfg.resolved_lambda)
                report.perceptual = float(l_percep.detach())
            else:
                loss = l_contrastive
            report.combined = float(loss.detach())

            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch} step {step}; "
                    f"batch ids: {[s.id for s in batch]}"
                )

            opt.zero_grad()
            loss.backward()
            opt.step()
            with torch.no_grad():
                for i, s in enumerate(batch):
                    bank.update_ema(s.id, v_img[i])
            loss_rows.append(report)

    state = PretextState(model, rn, bank, opt, cfg.epochs, cfg, loss_rows)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_loss_csv(loss_rows, out / "pretext_losses.csv")
        save_checkpoint(state, out / "checkpoint.pt")
    return state


def write_loss_csv(rows: list[LossReport], path: str | os.PathLike, append: bool = False) -> None:
    mode = "a" if append and os.path.exists(path) else "w"
    with open(path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(LOSS_CSV_FIELDS)
        for row in rows:
            writer.writerow(row.csv_row())


@dataclass
class FinetuneResult:
    model: SegmentationModel
    history: list[float]
    best_epoch: int
    best_val_dsc: float
    config: FinetuneConfig


def _mean_val_dsc(model: SegmentationModel, samples: list[Sample], batch_size: int) -> float:
    from .metrics import overlap_metrics

    scores = []
    for chunk in batched(samples, batch_size):
        x = to_image_tensor([s.image for s in chunk])
        preds = model.predict_masks(x).numpy()
        for pred, s in zip(preds, chunk):
            dsc, _, _, _ = overlap_metrics(pred, s.mask)
            scores.append(dsc)
    return float(np.mean(scores))


def finetune_segmentation(
    train_samples: list[Sample],
    val_samples: list[Sample],
    cfg: FinetuneConfig,
    init: Optional[Union[dict, str, os.PathLike, PretextState]] = None,
) -> FinetuneResult:
    """Fine-tune the U-shaped segmentation model; returns the best-val-DSC model.

    With init=None the encoder starts from random weights (the supervised
    baseline); otherwise encoder weights are taken from a pretext checkpoint.
    """
    for group, name in ((train_samples, "train"), (val_samples, "val")):
        if not group:
            raise ValueError(f"{name} split is empty")
        for s in group:
            if s.mask is None:
                raise ValueError(f"{name} sample {s.id!r} has no mask")

    train = _ensure_size(train_samples, cfg.image_size)
    val = _ensure_size(val_samples, cfg.image_size)

    torch.manual_seed(cfg.seed)
    model = SegmentationModel(cfg.encoder_cfg())
    if init is not None:
        if isinstance(init, PretextState):
            encoder_sd = init.model.encoder.state_dict()
        else:
            payload = init if isinstance(init, dict) else load_checkpoint(init)
            encoder_sd = payload["encoder"]
        model.encoder.load_state_dict(encoder_sd)

    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr_start)
    history: list[float] = []
    best_dsc, best_epoch, best_state = -1.0, 0, None

    for epoch in range(1, cfg.epochs + 1):
        lr = poly_lr(epoch - 1, cfg)
        for group in opt.param_groups:
            group["lr"] = lr
        model.train()
        order = rng_stream(cfg.seed, "ft_order", epoch).permutation(len(train))
        for idx_chunk in batched(order, cfg.batch_size):
            batch = [train[int(i)] for i in idx_chunk]
            x = to_image_tensor([s.image for s in batch])
            y = torch.from_numpy(np.stack([s.mask for s in batch]).astype(np.int64))
            logits = model(x)
            loss = F.cross_entropy(logits, y)
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch}; batch ids: {[s.id for s in batch]}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()

        val_dsc = _mean_val_dsc(model, val, cfg.batch_size)
        history.append(val_dsc)
        if val_dsc > best_dsc:
            best_dsc, best_epoch = val_dsc, epoch
            best_state = copy.deepcopy(model.state_dict())
        if early_stop_check(history, cfg.warmup_epochs, cfg.patience):
            break

    model.load_state_dict(best_state)
    return FinetuneResult(model, history, best_epoch, best_dsc, cfg)


def save_segmentation_model(result: FinetuneResult, path: str | os.PathLike) -> None:
    torch.save(
        {
            "model": result.model.state_dict(),
            "config_json": json.dumps(asdict(result.config), sort_keys=True),
            "best_epoch": result.best_epoch,
            "best_val_dsc": result.best_val_dsc,
            "history": list(map(float, result.history)),
        },
        path,
    )


def load_segmentation_model(path: str | os.PathLike) -> tuple[SegmentationModel, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    cfg = FinetuneConfig(**json.loads(payload["config_json"]))
    model = SegmentationModel(cfg.encoder_cfg())
    model.load_state_dict(payload["model"])
    model.eval()
    return model, payload
