"""Label enhancement and automatic annotation for binary segmentation."""

from ._core import (
    ConfigError,
    Error,
    FormatError,
    NumericError,
    ShapeError,
    accuracy,
    align_prediction,
    apply_image,
    apply_mask,
    corrupt_label,
    dice,
    ensemble_specs,
    evaluate_ensemble,
    gen_dataset,
    gen_scene,
    iou,
    load_config,
    load_image,
    load_mask,
    miou,
    pixel_rmse,
    quality_score,
    run_pipeline,
    save_mask,
)

__all__ = [name for name in dir() if not name.startswith("_")]
