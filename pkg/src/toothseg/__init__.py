"""Tooth instance segmentation on panoramic radiographs.

A two-stage pipeline: a pluggable tooth detector supplies per-tooth bounding
boxes, rasterized into 32-channel spatial prior maps that gate the skip
connections of a U-Net trained with a regularized Dice loss.  Includes a
synthetic panoramic-phantom generator with exact ground truth, the full
detection/segmentation metric suite, and a comparison harness for measuring
what the box priors buy (and what degraded priors cost).
"""

from .clahe import clahe
from .data import (
    DatasetManifest,
    ImageEntry,
    PreprocessConfig,
    Splits,
    ToothAnnotation,
    build_mask_stack,
    flip_sample,
    load_manifest,
    make_splits,
    save_manifest,
    validate_manifest,
)
from .detect import (
    DegradationSpec,
    Detection,
    DetectorThresholds,
    build_bbox_map,
    degrade,
    filter_detections,
    load_detections,
    oracle_detections,
    save_detections,
)
from .fdi import (
    ALL_FDI_CODES,
    CATEGORIES,
    NUM_TEETH,
    RadiographCategory,
    channel_of_fdi,
    fdi_of_channel,
    flip_fdi,
    tooth_type,
)
from .geometry import rasterize_box, rasterize_polygon, shoelace_area
from .loss import LossConfig, RegularizedDiceLoss, regularized_dice_loss
from .metrics import (
    DiceSummary,
    MetricsReport,
    dice_score,
    evaluate_detections,
    iou,
    match_detections,
    precision_recall,
    summarize_dice,
)
from .model import (
    BoxGate,
    BoxGatedUNet,
    ConvBlock,
    NetworkConfig,
    init_parameters,
    load_checkpoint,
    predict_mask,
    save_checkpoint,
)
from .synth import PhantomConfig, generate_dataset, generate_phantom, write_dataset
from .train import (
    Sample,
    TrainConfig,
    compare_models,
    evaluate,
    prepare_samples,
    resolve_priors,
    train_stage2,
)

__version__ = "0.1.0"
