//! Localization and segmentation metrics over threshold sweeps.

use serde::{Deserialize, Serialize};

use super::boxes::{iou_opt, mask_to_bbox, BBox};
use crate::error::{Error, Result};
use crate::maps::{Map, Mask};
use crate::model::rank_classes;
use crate::par::{self, Execution};

/// `{i / steps : i = 0..=steps}`; `steps = 255` gives the standard 256-point grid.
pub fn threshold_grid(steps: usize) -> Vec<f32> {
    let steps = steps.max(1);
    (0..=steps).map(|i| i as f32 / steps as f32).collect()
}

/// Pixels with value `>= theta` become foreground.
pub fn binarize(map: &Map, theta: f32) -> Mask {
    Mask {
        height: map.height,
        width: map.width,
        data: map.data.iter().map(|&v| v >= theta).collect(),
    }
}

/// IoU acceptance rule: `>=` by default, strict `>` on request.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IouRule {
    pub strict: bool,
}

impl IouRule {
    pub fn accepts(self, iou: f64, delta: f64) -> bool {
        if self.strict {
            iou > delta
        } else {
            iou >= delta
        }
    }
}

/// Per-sample inputs to the classification-aware localization accuracies.
#[derive(Clone, Debug)]
pub struct LocPrediction {
    pub logits: Vec<f32>,
    /// Localization map for the ground-truth class, at image resolution.
    pub map: Map,
}

#[derive(Clone, Copy, Debug)]
pub struct LocTarget {
    pub class: usize,
    pub bbox: BBox,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocAccuracy {
    pub gt_known: f64,
    pub top1: f64,
    pub top5: f64,
}

/// GT-known, Top-1 and Top-5 localization accuracy. A sample is GT-known
/// correct when the box extracted from its map at `theta_box` has IoU with the
/// ground-truth box accepted at `delta`; Top-k additionally requires the
/// ground-truth class among the k highest logits.
pub fn loc_accuracies(
    preds: &[LocPrediction],
    gts: &[LocTarget],
    theta_box: f32,
    delta: f64,
    rule: IouRule,
) -> Result<LocAccuracy> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(Error::InvalidArgument(format!(
            "need a nonempty, aligned prediction set ({} predictions, {} targets)",
            preds.len(),
            gts.len()
        )));
    }
    let (mut known, mut top1, mut top5) = (0usize, 0usize, 0usize);
    for (p, t) in preds.iter().zip(gts) {
        let pred_box = mask_to_bbox(&binarize(&p.map, theta_box));
        if !rule.accepts(iou_opt(pred_box.as_ref(), &t.bbox), delta) {
            continue;
        }
        known += 1;
        let rank = rank_classes(&p.logits)
            .iter()
            .position(|&c| c == t.class)
            .expect("target class among logits");
        top1 += (rank < 1) as usize;
        top5 += (rank < 5) as usize;
    }
    let n = preds.len() as f64;
    Ok(LocAccuracy {
        gt_known: known as f64 / n,
        top1: top1 as f64 / n,
        top5: top5 as f64 / n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaAccuracy {
    pub delta: f64,
    pub best_accuracy: f64,
    pub best_threshold: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxAccuracy {
    pub value: f64,
    pub per_delta: Vec<DeltaAccuracy>,
}

/// Box IoU for every (threshold, sample): `out[t][s]`.
pub fn box_iou_table(maps: &[Map], gt_boxes: &[BBox], grid: &[f32], exec: Execution) -> Vec<Vec<f64>> {
    let per_sample: Vec<Vec<f64>> = par::map_range(exec, maps.len(), |s| {
        grid.iter()
            .map(|&theta| {
                let b = mask_to_bbox(&binarize(&maps[s], theta));
                iou_opt(b.as_ref(), &gt_boxes[s])
            })
            .collect()
    });
    (0..grid.len())
        .map(|t| per_sample.iter().map(|v| v[t]).collect())
        .collect()
}

/// Mean over `deltas` of the best box accuracy over the threshold sweep.
/// An empty sample set scores 0.
pub fn maxboxaccv2(
    maps: &[Map],
    gt_boxes: &[BBox],
    deltas: &[f64],
    grid: &[f32],
    rule: IouRule,
    exec: Execution,
) -> Result<BoxAccuracy> {
    if maps.len() != gt_boxes.len() {
        return Err(Error::InvalidArgument("maps and boxes differ in count".into()));
    }
    if deltas.is_empty() || grid.is_empty() {
        return Err(Error::InvalidArgument("empty delta set or threshold grid".into()));
    }
    if maps.is_empty() {
        return Ok(BoxAccuracy {
            value: 0.0,
            per_delta: deltas
                .iter()
                .map(|&delta| DeltaAccuracy {
                    delta,
                    best_accuracy: 0.0,
                    best_threshold: grid[0],
                })
                .collect(),
        });
    }
    let table = box_iou_table(maps, gt_boxes, grid, exec);
    let n = maps.len() as f64;
    let per_delta: Vec<DeltaAccuracy> = deltas
        .iter()
        .map(|&delta| {
            let mut best = DeltaAccuracy {
                delta,
                best_accuracy: -1.0,
                best_threshold: grid[0],
            };
            for (t, ious) in table.iter().enumerate() {
                let acc = ious.iter().filter(|&&i| rule.accepts(i, delta)).count() as f64 / n;
                if acc > best.best_accuracy {
                    best.best_accuracy = acc;
                    best.best_threshold = grid[t];
                }
            }
            best
        })
        .collect();
    let value = per_delta.iter().map(|d| d.best_accuracy).sum::<f64>() / deltas.len() as f64;
    Ok(BoxAccuracy { value, per_delta })
}

/// Number of grid thresholds at or below `v`: `v` is foreground at
/// threshold index `i` iff `i < bucket(v)`.
fn bucket(grid: &[f32], v: f32) -> usize {
    grid.partition_point(|&t| t <= v)
}

/// Mean mask IoU at each grid threshold.
pub fn iou_threshold_curve(maps: &[Map], masks: &[Mask], grid: &[f32], exec: Execution) -> Vec<f64> {
    if maps.is_empty() {
        return vec![0.0; grid.len()];
    }
    let per_sample: Vec<Vec<f64>> = par::map_range(exec, maps.len(), |s| {
        // foreground / background pixel counts per bucket
        let mut fg = vec![0usize; grid.len() + 1];
        let mut bg = vec![0usize; grid.len() + 1];
        for (&v, &m) in maps[s].data.iter().zip(&masks[s].data) {
            let b = bucket(grid, v);
            if m {
                fg[b] += 1;
            } else {
                bg[b] += 1;
            }
        }
        let gt_area: usize = fg.iter().sum();
        // pixels predicted at index t are those with bucket > t
        let (mut tp, mut fp) = (0usize, 0usize);
        let mut out = vec![0.0; grid.len()];
        for t in (0..grid.len()).rev() {
            tp += fg[t + 1];
            fp += bg[t + 1];
            let union = gt_area + fp;
            out[t] = if union == 0 { 0.0 } else { tp as f64 / union as f64 };
        }
        out
    });
    let n = maps.len() as f64;
    (0..grid.len())
        .map(|t| per_sample.iter().map(|v| v[t]).sum::<f64>() / n)
        .collect()
}

/// Peak of [`iou_threshold_curve`]. Returns `(piou, curve)`.
pub fn piou(maps: &[Map], masks: &[Mask], grid: &[f32], exec: Execution) -> Result<(f64, Vec<f64>)> {
    if maps.len() != masks.len() {
        return Err(Error::InvalidArgument("maps and masks differ in count".into()));
    }
    let curve = iou_threshold_curve(maps, masks, grid, exec);
    let peak = curve.iter().copied().fold(0.0, f64::max);
    Ok((peak, curve))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f32,
    pub precision: f64,
    pub recall: f64,
}

/// Pixel precision / recall at each grid threshold, pooled over all samples.
/// Precision is 1 where nothing is predicted.
pub fn pr_curve(maps: &[Map], masks: &[Mask], grid: &[f32]) -> Vec<PrPoint> {
    let mut fg = vec![0u64; grid.len() + 1];
    let mut bg = vec![0u64; grid.len() + 1];
    for (map, mask) in maps.iter().zip(masks) {
        for (&v, &m) in map.data.iter().zip(&mask.data) {
            let b = bucket(grid, v);
            if m {
                fg[b] += 1;
            } else {
                bg[b] += 1;
            }
        }
    }
    let positives: u64 = fg.iter().sum();
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut out = vec![
        PrPoint {
            threshold: 0.0,
            precision: 0.0,
            recall: 0.0
        };
        grid.len()
    ];
    for t in (0..grid.len()).rev() {
        tp += fg[t + 1];
        fp += bg[t + 1];
        out[t] = PrPoint {
            threshold: grid[t],
            precision: if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 },
            recall: if positives == 0 { 0.0 } else { tp as f64 / positives as f64 },
        };
    }
    out
}

/// Pixel average precision: thresholds at every distinct predicted value,
/// pooled across samples; AP is the step-rule sum of precision times recall
/// increment.
pub fn pxap(maps: &[Map], masks: &[Mask]) -> Result<f64> {
    if maps.len() != masks.len() {
        return Err(Error::InvalidArgument("maps and masks differ in count".into()));
    }
    let mut pixels: Vec<(f32, bool)> = maps
        .iter()
        .zip(masks)
        .flat_map(|(map, mask)| map.data.iter().copied().zip(mask.data.iter().copied()))
        .collect();
    let positives = pixels.iter().filter(|p| p.1).count();
    if positives == 0 {
        return Ok(0.0);
    }
    pixels.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < pixels.len() {
        let v = pixels[i].0;
        while i < pixels.len() && pixels[i].0 == v {
            if pixels[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Pixel labels from per-class maps: the argmax class (lowest index on ties)
/// when its score is `>= theta_bg`, else background. Labels are `c + 1` for
/// class `c` and 0 for background.
pub fn semantic_prediction(maps: &[Map], theta_bg: f32) -> Vec<usize> {
    let n = maps.first().map_or(0, |m| m.data.len());
    (0..n)
        .map(|p| {
            let mut best: Option<(usize, f32)> = None;
            for (c, m) in maps.iter().enumerate() {
                if best.is_none_or(|(_, v)| m.data[p] > v) {
                    best = Some((c, m.data[p]));
                }
            }
            match best {
                Some((c, v)) if v >= theta_bg => c + 1,
                _ => 0,
            }
        })
        .collect()
}

/// Dataset-level confusion matrix over `num_labels` labels (background
/// included). `matrix[gt][pred]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    pub num_labels: usize,
    pub matrix: Vec<u64>,
}

impl Confusion {
    pub fn new(num_labels: usize) -> Self {
        Self {
            num_labels,
            matrix: vec![0; num_labels * num_labels],
        }
    }

    pub fn add(&mut self, pred: &[usize], gt: &[usize]) {
        for (&p, &g) in pred.iter().zip(gt) {
            self.matrix[g * self.num_labels + p] += 1;
        }
    }

    pub fn merge(&mut self, other: &Confusion) {
        for (a, b) in self.matrix.iter_mut().zip(&other.matrix) {
            *a += b;
        }
    }

    /// Per-label IoU; `None` for labels absent from both prediction and truth.
    pub fn ious(&self) -> Vec<Option<f64>> {
        let n = self.num_labels;
        (0..n)
            .map(|c| {
                let tp = self.matrix[c * n + c];
                let row: u64 = self.matrix[c * n..(c + 1) * n].iter().sum();
                let col: u64 = (0..n).map(|g| self.matrix[g * n + c]).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over labels that occur.
    pub fn miou(&self) -> f64 {
        let present: Vec<f64> = self.ious().into_iter().flatten().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }
}

/// mIoU over background plus `num_classes` classes of seeds thresholded at
/// `theta_bg`. `class_maps[s]` holds one map per class for sample `s`.
pub fn miou_seed(class_maps: &[Vec<Map>], gt_semantic: &[Vec<usize>], num_classes: usize, theta_bg: f32) -> Result<f64> {
    if class_maps.len() != gt_semantic.len() {
        return Err(Error::InvalidArgument("maps and ground truth differ in count".into()));
    }
    let mut conf = Confusion::new(num_classes + 1);
    for (maps, gt) in class_maps.iter().zip(gt_semantic) {
        if maps.len() != num_classes {
            return Err(Error::InvalidArgument(format!(
                "expected {num_classes} class maps, got {}",
                maps.len()
            )));
        }
        conf.add(&semantic_prediction(maps, theta_bg), gt);
    }
    Ok(conf.miou())
}
