//! Image-specific threshold search and foreground-map combination.

use serde::{Deserialize, Serialize};

use super::metrics::{binarize, semantic_prediction, Confusion};
use crate::error::{Error, Result};
use crate::losses::EPS_DEFAULT;
use crate::maps::{Map, Mask};
use crate::model::BasNet;
use crate::par::{self, Execution};
use crate::synth::Sample;
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdChoice {
    pub theta: f32,
    pub mask: Mask,
    pub score: f64,
}

/// Cached forward state for scoring candidate masks of one image.
struct Scorer<'a> {
    net: &'a BasNet<f32>,
    features: Tensor<f32>,
    y_full: Tensor<f32>,
    factor: usize,
}

impl<'a> Scorer<'a> {
    fn new(net: &'a BasNet<f32>, image: &Tensor<f32>) -> Result<Self> {
        let mut g = Graph::new();
        let vars = net.bind(&mut g, false);
        let x = g.constant(image.clone());
        let f = net.extract_features(&mut g, &vars, x)?;
        let full = net.sub_network(&mut g, &vars, f, false)?;
        let y = g.global_avg_pool(full)?;
        let cfg = &net.config;
        Ok(Self {
            net,
            features: g.value(f).clone(),
            y_full: g.value(y).clone(),
            factor: cfg.input_size / cfg.feature_size(),
        })
    }

    /// `l_bas + l_ac` with the mask (area-averaged to feature resolution) as
    /// the foreground map.
    fn score(&self, mask: &Mask, class: usize) -> Result<f64> {
        let m_f = mask.area_average(self.factor)?;
        let mut g = Graph::new();
        let vars = self.net.bind(&mut g, false);
        let f = g.constant(self.features.clone());
        let y = g.constant(self.y_full.clone());
        let m = g.constant(m_f.to_tensor());
        let (s, s_bkg) = self.net.class_activations(&mut g, &vars, f, y, m, class)?;
        let (s, s_bkg) = (g.value(s).item() as f64, g.value(s_bkg).item() as f64);
        let l_bas = (s_bkg / (s + EPS_DEFAULT)).min(1.0);
        let l_ac = m_f.data.iter().map(|&v| v as f64).sum::<f64>() / m_f.data.len() as f64;
        Ok(l_bas + l_ac)
    }
}

/// Scores every grid threshold by `l_bas + l_ac` of the binarized map used as
/// the foreground mask and returns the minimizer; ties go to the smaller
/// threshold. `map` is at image resolution and `grid` must be ascending.
pub fn image_specific_threshold(
    net: &BasNet<f32>,
    image: &Tensor<f32>,
    class: usize,
    map: &Map,
    grid: &[f32],
) -> Result<ThresholdChoice> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("threshold grid is empty".into()));
    }
    net.check_class(class)?;
    let scorer = Scorer::new(net, image)?;
    let mut best: Option<ThresholdChoice> = None;
    let mut last: Option<(Mask, f64)> = None;
    for &theta in grid {
        let mask = binarize(map, theta);
        // consecutive thresholds often reproduce the same mask
        let score = match &last {
            Some((m, s)) if *m == mask => *s,
            _ => scorer.score(&mask, class)?,
        };
        if best.as_ref().is_none_or(|b| score < b.score) {
            best = Some(ThresholdChoice {
                theta,
                mask: mask.clone(),
                score,
            });
        }
        last = Some((mask, score));
    }
    Ok(best.expect("grid is nonempty"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineStrategy {
    Replace,
    Average,
}

/// Suppresses class-specific responses that exceed the class-agnostic
/// foreground: where `specific > agnostic` the pixel becomes the agnostic
/// value (replace) or the mean of both (average).
pub fn combine_foreground(specific: &Map, agnostic: &Map, strategy: CombineStrategy) -> Result<Map> {
    if (specific.height, specific.width) != (agnostic.height, agnostic.width) {
        return Err(Error::shape(
            "combine_foreground",
            format!(
                "{}x{} specific map vs {}x{} agnostic map",
                specific.height, specific.width, agnostic.height, agnostic.width
            ),
        ));
    }
    let data = specific
        .data
        .iter()
        .zip(&agnostic.data)
        .map(|(&s, &a)| match (s > a, strategy) {
            (false, _) => s,
            (true, CombineStrategy::Replace) => a,
            (true, CombineStrategy::Average) => (s + a) / 2.0,
        })
        .collect();
    Map::new(specific.height, specific.width, data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub sample: usize,
    pub class: usize,
    pub theta: f32,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSearchReport {
    pub num_samples: usize,
    pub best_global_theta: f32,
    pub miou_global: f64,
    pub miou_image_specific: f64,
    pub rows: Vec<ThresholdRow>,
}

/// Segmentation seeds with one global background threshold (the best on the
/// grid) versus per-image, per-class thresholds chosen by
/// [`image_specific_threshold`]. With per-class thresholds a pixel takes the
/// highest-scoring class among those whose map clears its own threshold.
pub fn threshold_search(
    net: &BasNet<f32>,
    samples: &[Sample],
    grid: &[f32],
    exec: Execution,
) -> Result<ThresholdSearchReport> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    let num_labels = net.config.num_classes + 1;
    struct PerSample {
        maps: Vec<Map>,
        semantic: Vec<usize>,
        specific: Vec<usize>,
        rows: Vec<ThresholdRow>,
    }
    let per: Vec<PerSample> = par::try_map_range(exec, samples.len(), |i| {
        let s = &samples[i];
        let inf = net.infer(&s.image, 1, None)?;
        let maps = super::run::class_maps(&inf, s, false);
        let mut rows = Vec::new();
        let mut thetas = vec![f32::INFINITY; maps.len()];
        for &c in &s.labels {
            let choice = image_specific_threshold(net, &s.image, c, &maps[c], grid)?;
            thetas[c] = choice.theta;
            rows.push(ThresholdRow {
                sample: i,
                class: c,
                theta: choice.theta,
                score: choice.score,
            });
        }
        let specific = (0..s.image.shape()[1] * s.image.shape()[2])
            .map(|p| {
                let mut best: Option<(usize, f32)> = None;
                for (c, m) in maps.iter().enumerate() {
                    let v = m.data[p];
                    if v >= thetas[c] && best.is_none_or(|(_, b)| v > b) {
                        best = Some((c, v));
                    }
                }
                best.map_or(0, |(c, _)| c + 1)
            })
            .collect();
        Ok(PerSample {
            maps,
            semantic: s.semantic(),
            specific,
            rows,
        })
    })?;

    let mut specific = Confusion::new(num_labels);
    for p in &per {
        specific.add(&p.specific, &p.semantic);
    }
    let per_theta: Vec<f64> = par::map_range(exec, grid.len(), |t| {
        let mut conf = Confusion::new(num_labels);
        for p in &per {
            conf.add(&semantic_prediction(&p.maps, grid[t]), &p.semantic);
        }
        conf.miou()
    });
    let (best_t, best_miou) = per_theta
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (t, &v)| if v > acc.1 { (t, v) } else { acc });
    Ok(ThresholdSearchReport {
        num_samples: samples.len(),
        best_global_theta: grid[best_t],
        miou_global: best_miou,
        miou_image_specific: specific.miou(),
        rows: per.into_iter().flat_map(|p| p.rows).collect(),
    })
}
