//! Post-processing of localization maps and evaluation metrics.

mod boxes;
mod metrics;
mod run;
mod threshold;

pub use boxes::{iou_box, iou_mask, iou_opt, mask_to_bbox, BBox};
pub use metrics::{
    binarize, box_iou_table, iou_threshold_curve, loc_accuracies, maxboxaccv2, miou_seed, piou,
    pr_curve, pxap, semantic_prediction, threshold_grid, BoxAccuracy, Confusion, DeltaAccuracy,
    IouRule, LocAccuracy, LocPrediction, LocTarget, PrPoint,
};
pub use run::{class_maps, evaluate, EvalConfig, MetricReport};
pub use threshold::{
    combine_foreground, image_specific_threshold, threshold_search, CombineStrategy,
    ThresholdChoice, ThresholdRow, ThresholdSearchReport,
};
