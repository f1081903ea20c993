//! Dataset-level evaluation of a trained network.

use serde::{Deserialize, Serialize};

use super::boxes::BBox;
use super::metrics::{
    loc_accuracies, maxboxaccv2, miou_seed, piou, pr_curve, pxap, threshold_grid, DeltaAccuracy,
    IouRule, LocPrediction, LocTarget, PrPoint,
};
use crate::error::{Error, Result};
use crate::maps::{Map, Mask};
use crate::model::{BasNet, Inference};
use crate::par::{self, Execution};
use crate::synth::Sample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Number of top classes fused into the localization map.
    pub k: usize,
    /// Binarization threshold for GT-known / Top-k boxes. Must be set.
    pub theta_box: Option<f32>,
    /// IoU threshold for GT-known / Top-k.
    pub loc_delta: f64,
    /// IoU thresholds averaged by MaxBoxAccV2.
    pub deltas: Vec<f64>,
    /// The sweep grid is `{i / grid_steps}`.
    pub grid_steps: usize,
    pub strict_iou: bool,
    /// Background threshold for segmentation seeds.
    pub theta_bg: f32,
    /// Put the ground-truth class into the fused set when it misses the top k.
    pub force_gt_class: bool,
    /// Min-max normalize each map before thresholding.
    pub normalize_maps: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 1,
            theta_box: None,
            loc_delta: 0.5,
            deltas: vec![0.3, 0.5, 0.7],
            grid_steps: 255,
            strict_iou: false,
            theta_bg: 0.5,
            force_gt_class: true,
            normalize_maps: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self, num_classes: usize) -> Result<f32> {
        let bad = |key: &str, msg: String| Err(Error::InvalidArgument(format!("eval.{key}: {msg}")));
        if self.k == 0 || self.k > num_classes {
            return bad("k", format!("must be in 1..={num_classes}, got {}", self.k));
        }
        if self.grid_steps == 0 {
            return bad("grid_steps", "must be positive".into());
        }
        if self.deltas.is_empty() || self.deltas.iter().any(|d| !(0.0..=1.0).contains(d)) {
            return bad("deltas", format!("must be a nonempty list in [0, 1], got {:?}", self.deltas));
        }
        if !(0.0..=1.0).contains(&self.loc_delta) {
            return bad("loc_delta", format!("must be in [0, 1], got {}", self.loc_delta));
        }
        if !(0.0..=1.0).contains(&self.theta_bg) {
            return bad("theta_bg", format!("must be in [0, 1], got {}", self.theta_bg));
        }
        match self.theta_box {
            None => bad("theta_box", "is required".into()),
            Some(t) if !(0.0..=1.0).contains(&t) => bad("theta_box", format!("must be in [0, 1], got {t}")),
            Some(t) => Ok(t),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub num_samples: usize,
    /// `single_label` when every sample has one object; box metrics are
    /// only defined in that case.
    pub mode: String,
    pub k: usize,
    pub theta_box: f32,
    pub loc_delta: f64,
    pub strict_iou: bool,
    pub theta_bg: f32,
    pub gt_known: Option<f64>,
    pub top1_loc: Option<f64>,
    pub top5_loc: Option<f64>,
    pub maxboxaccv2: Option<f64>,
    pub box_accuracy: Option<Vec<DeltaAccuracy>>,
    pub piou: f64,
    pub pxap: f64,
    pub miou: f64,
    pub classification_top1: f64,
    pub iou_threshold_curve: Vec<f64>,
    pub pr_curve: Vec<PrPoint>,
}

/// One map per class at image resolution: the generated map for the sample's
/// positive classes and zeros elsewhere.
pub fn class_maps(inf: &Inference<f32>, sample: &Sample, normalize: bool) -> Vec<Map> {
    let (h, w) = sample.size();
    let c = inf.maps.shape()[0];
    (0..c)
        .map(|k| {
            if sample.labels.contains(&k) {
                prepare(Map::from_channel(&inf.maps, k), h, w, normalize)
            } else {
                Map::full(h, w, 0.0)
            }
        })
        .collect()
}

fn prepare(m: Map, h: usize, w: usize, normalize: bool) -> Map {
    let up = m.resize_bilinear(h, w);
    if normalize {
        up.normalized()
    } else {
        up
    }
}

struct PerSample {
    loc: LocPrediction,
    /// (map, mask) pairs for pixel metrics.
    pixel_pairs: Vec<(Map, Mask)>,
    class_maps: Vec<Map>,
    semantic: Vec<usize>,
    top1_correct: bool,
}

/// Runs inference on every sample (in parallel when requested) and computes
/// the full metric report.
pub fn evaluate(net: &BasNet<f32>, samples: &[Sample], cfg: &EvalConfig, exec: Execution) -> Result<MetricReport> {
    let num_classes = net.config.num_classes;
    let theta_box = cfg.validate(num_classes)?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    let single = samples.iter().all(|s| s.labels.len() == 1);
    let per: Vec<PerSample> = par::try_map_range(exec, samples.len(), |i| {
        let s = &samples[i];
        let (h, w) = s.size();
        let gt = s.labels[0];
        let force = (single && cfg.force_gt_class).then_some(gt);
        let inf = net.infer(&s.image, cfg.k, force)?;
        let fused = prepare(Map::from_channel(&inf.fused, 0), h, w, cfg.normalize_maps);
        let maps = class_maps(&inf, s, cfg.normalize_maps);
        let pixel_pairs = if single {
            vec![(fused.clone(), s.masks[0].clone())]
        } else {
            s.labels
                .iter()
                .zip(&s.masks)
                .map(|(&c, m)| (maps[c].clone(), m.clone()))
                .collect()
        };
        let top1 = crate::model::rank_classes(&inf.logits)[0];
        Ok(PerSample {
            loc: LocPrediction {
                logits: inf.logits,
                map: fused,
            },
            pixel_pairs,
            class_maps: maps,
            semantic: s.semantic(),
            top1_correct: s.labels.contains(&top1),
        })
    })?;

    let grid = threshold_grid(cfg.grid_steps);
    let rule = IouRule { strict: cfg.strict_iou };
    let (mut gt_known, mut top1_loc, mut top5_loc, mut mba, mut box_accuracy) = (None, None, None, None, None);
    if single {
        let gts: Vec<LocTarget> = samples
            .iter()
            .map(|s| LocTarget {
                class: s.labels[0],
                bbox: s.boxes[0],
            })
            .collect();
        let preds: Vec<LocPrediction> = per.iter().map(|p| p.loc.clone()).collect();
        let acc = loc_accuracies(&preds, &gts, theta_box, cfg.loc_delta, rule)?;
        gt_known = Some(acc.gt_known);
        top1_loc = Some(acc.top1);
        top5_loc = Some(acc.top5);
        let maps: Vec<Map> = preds.into_iter().map(|p| p.map).collect();
        let boxes: Vec<BBox> = gts.iter().map(|g| g.bbox).collect();
        let r = maxboxaccv2(&maps, &boxes, &cfg.deltas, &grid, rule, exec)?;
        mba = Some(r.value);
        box_accuracy = Some(r.per_delta);
    }

    let (maps, masks): (Vec<Map>, Vec<Mask>) = per.iter().flat_map(|p| p.pixel_pairs.iter().cloned()).unzip();
    let (piou_value, curve) = piou(&maps, &masks, &grid, exec)?;
    let pxap_value = pxap(&maps, &masks)?;
    let pr = pr_curve(&maps, &masks, &grid);
    let cms: Vec<Vec<Map>> = per.iter().map(|p| p.class_maps.clone()).collect();
    let sem: Vec<Vec<usize>> = per.iter().map(|p| p.semantic.clone()).collect();
    let miou = miou_seed(&cms, &sem, num_classes, cfg.theta_bg)?;
    let top1_acc = per.iter().filter(|p| p.top1_correct).count() as f64 / per.len() as f64;

    Ok(MetricReport {
        num_samples: samples.len(),
        mode: if single { "single_label" } else { "multi_label" }.into(),
        k: cfg.k,
        theta_box,
        loc_delta: cfg.loc_delta,
        strict_iou: cfg.strict_iou,
        theta_bg: cfg.theta_bg,
        gt_known,
        top1_loc,
        top5_loc,
        maxboxaccv2: mba,
        box_accuracy,
        piou: piou_value,
        pxap: pxap_value,
        miou,
        classification_top1: top1_acc,
        iou_threshold_curve: curve,
        pr_curve: pr,
    })
}
