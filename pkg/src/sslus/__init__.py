"""Contrastive self-supervised pretraining and lesion segmentation for B-mode ultrasound."""

from .data import (
    DatasetManifest,
    ManifestEntry,
    Sample,
    SubsetSpec,
    generate_synthetic_dataset,
    load_manifest,
    load_samples,
    samples_from_arrays,
    take_train_subset,
)
from .estimators import ContrastivePretrainer, UltrasoundSegmenter
from .frequency import (
    FrequencyFilterSpec,
    amplitude_phase,
    apply_frequency_filter,
    build_filter_mask,
    forward_dft,
    inverse_dft,
    sample_filter_spec,
)
from .jigsaw import (
    PatchBundle,
    PatchLayout,
    partition_grid,
    select_focal_sets,
    transform_crosspatch,
    transform_jigsaw_baseline,
)
from .losses import (
    RelationNetwork,
    combined_loss,
    nce_loss,
    perceptual_loss,
    rcl_loss,
    relation_score,
    total_rcl,
)
from .memory import MemoryBank
from .metrics import MetricsReport, evaluate_model, hausdorff, overlap_metrics
from .models import EncoderConfig, PretextModel, SegmentationModel, encoder_config
from .photometric import JitterSpec, color_jitter, jitter_patches, random_flip_jitter
from .training import (
    FinetuneConfig,
    PretextConfig,
    desk_finetune_config,
    desk_pretext_config,
    early_stop_check,
    finetune_segmentation,
    load_checkpoint,
    poly_lr,
    pretext_train,
    save_checkpoint,
)

__version__ = "0.1.0"
