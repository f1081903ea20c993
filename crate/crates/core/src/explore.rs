//! Classification entropy and class activation as functions of the visible
//! foreground area, obtained by eroding and dilating ground-truth masks.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::EPS_DEFAULT;
use crate::maps::Mask;
use crate::model::BasNet;
use crate::par::{self, Execution};
use crate::synth::Sample;
use crate::tensor::{Graph, Tensor};

/// Window offsets of a square structuring element of side `s`. Even sides
/// extend one pixel further towards negative offsets, which keeps windows of
/// growing sides nested.
fn window(s: usize) -> (isize, isize) {
    (-((s / 2) as isize), s.div_ceil(2) as isize - 1)
}

/// One separable pass: `dilate` takes any, erosion takes all, with pixels
/// outside the image counted as background.
fn pass(src: &[bool], h: usize, w: usize, s: usize, dilate: bool, horizontal: bool) -> Vec<bool> {
    let (lo, hi) = window(s);
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = !dilate;
            for d in lo..=hi {
                let (yy, xx) = if horizontal {
                    (y as isize, x as isize + d)
                } else {
                    (y as isize + d, x as isize)
                };
                let v = yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize && src[yy as usize * w + xx as usize];
                if dilate {
                    acc |= v;
                    if acc {
                        break;
                    }
                } else {
                    acc &= v;
                    if !acc {
                        break;
                    }
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Dilation (`n > 0`) or erosion (`n < 0`) with an all-ones square of side
/// `5|n|`; `n = 0` returns the mask unchanged.
pub fn morph_mask(mask: &Mask, n: i32) -> Mask {
    if n == 0 {
        return mask.clone();
    }
    let s = 5 * n.unsigned_abs() as usize;
    let dilate = n > 0;
    let (h, w) = (mask.height, mask.width);
    let rows = pass(&mask.data, h, w, s, dilate, true);
    Mask {
        height: h,
        width: w,
        data: pass(&rows, h, w, s, dilate, false),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub sample: usize,
    pub n: i32,
    /// Mask area over ground-truth area.
    pub area_ratio: f64,
    /// Cross-entropy of the ground-truth class with the masked features.
    pub entropy: f64,
    /// Activation with the mask, over the full-image activation.
    pub activation_norm: f64,
    /// Activation with the complement, over the full-image activation.
    pub bkg_activation_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CurveSkip {
    /// Full-image activation too small to normalize by.
    WeakActivation { sample: usize },
    /// Erosion removed the whole mask.
    EmptyMask { sample: usize, n: i32 },
}

fn forward_logits(net: &BasNet<f32>, features: &Tensor<f32>, mask: Option<&Tensor<f32>>) -> Result<Vec<f32>> {
    let mut g = Graph::new();
    let vars = net.bind(&mut g, false);
    let mut f = g.constant(features.clone());
    if let Some(m) = mask {
        let m = g.constant(m.clone());
        f = g.mask_mul(f, m)?;
    }
    let out = net.sub_network(&mut g, &vars, f, false)?;
    let y = g.global_avg_pool(out)?;
    Ok(g.value(y).data().to_vec())
}

fn cross_entropy(logits: &[f32], target: usize) -> f64 {
    let m = logits.iter().map(|&v| v as f64).fold(f64::NEG_INFINITY, f64::max);
    let acc: f64 = logits.iter().map(|&v| (v as f64 - m).exp()).sum();
    acc.ln() + (m - logits[target] as f64)
}

/// Curve of one single-label sample over `ns`. Returns the points and any
/// skip events; a sample with weak full-image activation yields no points.
pub fn curve_for_sample(
    net: &BasNet<f32>,
    sample: &Sample,
    index: usize,
    ns: &[i32],
) -> Result<(Vec<CurvePoint>, Vec<CurveSkip>)> {
    let (class, gt) = match (sample.labels.first(), sample.masks.first()) {
        (Some(&c), Some(m)) => (c, m),
        _ => return Err(Error::InvalidArgument(format!("sample {index} has no labelled object"))),
    };
    net.check_class(class)?;
    let mut g = Graph::new();
    let vars = net.bind(&mut g, false);
    let x = g.constant(sample.image.clone());
    let f = net.extract_features(&mut g, &vars, x)?;
    let features = g.value(f).clone();
    drop(g);

    let full = forward_logits(net, &features, None)?;
    let s_full = (full[class] as f64).max(0.0);
    if s_full <= EPS_DEFAULT {
        return Ok((Vec::new(), vec![CurveSkip::WeakActivation { sample: index }]));
    }
    let cfg = &net.config;
    let factor = cfg.input_size / cfg.feature_size();
    let gt_area = gt.area() as f64;
    let mut points = Vec::new();
    let mut skips = Vec::new();
    for &n in ns {
        let m = morph_mask(gt, n);
        if m.is_empty() {
            skips.push(CurveSkip::EmptyMask { sample: index, n });
            continue;
        }
        let small = m.area_average(factor)?;
        let fg: Vec<f32> = small.data.iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
        let bg: Vec<f32> = fg.iter().map(|&v| 1.0 - v).collect();
        let shape = vec![1, small.height, small.width];
        let y_fg = forward_logits(net, &features, Some(&Tensor::new(shape.clone(), fg)?))?;
        let y_bg = forward_logits(net, &features, Some(&Tensor::new(shape, bg)?))?;
        points.push(CurvePoint {
            sample: index,
            n,
            area_ratio: m.area() as f64 / gt_area,
            entropy: cross_entropy(&y_fg, class),
            activation_norm: (y_fg[class] as f64).max(0.0) / s_full,
            bkg_activation_norm: (y_bg[class] as f64).max(0.0) / s_full,
        });
    }
    Ok((points, skips))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExploreResult {
    pub points: Vec<CurvePoint>,
    pub skips: Vec<CurveSkip>,
}

pub fn explore_dataset(net: &BasNet<f32>, samples: &[Sample], ns: &[i32], exec: Execution) -> Result<ExploreResult> {
    let per = par::try_map_range(exec, samples.len(), |i| curve_for_sample(net, &samples[i], i, ns))?;
    let mut out = ExploreResult::default();
    for (p, s) in per {
        out.points.extend(p);
        out.skips.extend(s);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Bins {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Bins with fewer points are flagged.
    pub min_points: usize,
}

impl Default for Bins {
    fn default() -> Self {
        Self {
            lo: 0.0,
            hi: 2.0,
            count: 20,
            min_points: 5,
        }
    }
}

impl Bins {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 || !(self.hi > self.lo) {
            return Err(Error::InvalidArgument(format!(
                "explore.bins: need count > 0 and hi > lo, got {} bins over [{}, {}]",
                self.count, self.lo, self.hi
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.count as f64
    }

    pub fn center(&self, b: usize) -> f64 {
        self.lo + (b as f64 + 0.5) * self.width()
    }

    /// Bin of `v`; the upper edge belongs to the last bin.
    pub fn index(&self, v: f64) -> Option<usize> {
        if !(self.lo..=self.hi).contains(&v) {
            return None;
        }
        Some((((v - self.lo) / self.width()) as usize).min(self.count - 1))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    Entropy,
    ActivationNorm,
    BkgActivationNorm,
}

impl Quantity {
    pub const ALL: [Quantity; 3] = [Quantity::Entropy, Quantity::ActivationNorm, Quantity::BkgActivationNorm];

    pub fn name(self) -> &'static str {
        match self {
            Quantity::Entropy => "entropy",
            Quantity::ActivationNorm => "activation_norm",
            Quantity::BkgActivationNorm => "bkg_activation_norm",
        }
    }

    pub fn of(self, p: &CurvePoint) -> f64 {
        match self {
            Quantity::Entropy => p.entropy,
            Quantity::ActivationNorm => p.activation_norm,
            Quantity::BkgActivationNorm => p.bkg_activation_norm,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinStat {
    pub bin_center: f64,
    pub quantity: Quantity,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub count: usize,
    pub flagged: bool,
}

/// Mean and standard deviation of each quantity per area-ratio bin, in
/// quantity-major order. Empty bins are omitted.
pub fn aggregate_curves(points: &[CurvePoint], bins: &Bins) -> Result<Vec<BinStat>> {
    bins.validate()?;
    let mut members: Vec<Vec<&CurvePoint>> = vec![Vec::new(); bins.count];
    for p in points {
        if let Some(b) = bins.index(p.area_ratio) {
            members[b].push(p);
        }
    }
    let mut out = Vec::new();
    for q in Quantity::ALL {
        for (b, ps) in members.iter().enumerate() {
            if ps.is_empty() {
                continue;
            }
            let n = ps.len() as f64;
            let mean = ps.iter().map(|p| q.of(p)).sum::<f64>() / n;
            let var = ps.iter().map(|p| (q.of(p) - mean).powi(2)).sum::<f64>() / n;
            out.push(BinStat {
                bin_center: bins.center(b),
                quantity: q,
                mean,
                std: var.sqrt(),
                count: ps.len(),
                flagged: ps.len() < bins.min_points,
            });
        }
    }
    Ok(out)
}

/// Crossover statistics of the aggregated curves. Flagged bins are ignored.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Crossovers {
    /// First bin center where mean entropy is within 10% of its last-bin value.
    pub entropy_settles_at: Option<f64>,
    /// First bin center where mean normalized activation reaches 0.9.
    pub activation_reaches_at: Option<f64>,
    /// Last-bin over first-bin mean background activation.
    pub bkg_decay_ratio: Option<f64>,
}

impl Crossovers {
    pub fn from_stats(stats: &[BinStat]) -> Self {
        let curve = |q: Quantity| -> Vec<(f64, f64)> {
            stats
                .iter()
                .filter(|s| s.quantity == q && !s.flagged)
                .map(|s| (s.bin_center, s.mean))
                .collect()
        };
        let entropy = curve(Quantity::Entropy);
        let activation = curve(Quantity::ActivationNorm);
        let bkg = curve(Quantity::BkgActivationNorm);
        let entropy_settles_at = entropy.last().and_then(|&(_, last)| {
            entropy
                .iter()
                .find(|&&(_, e)| (e - last).abs() <= 0.1 * last.abs())
                .map(|&(c, _)| c)
        });
        let activation_reaches_at = activation.iter().find(|&&(_, a)| a >= 0.9).map(|&(c, _)| c);
        let bkg_decay_ratio = match (bkg.first(), bkg.last()) {
            (Some(&(_, first)), Some(&(_, last))) if first > 0.0 => Some(last / first),
            _ => None,
        };
        Self {
            entropy_settles_at,
            activation_reaches_at,
            bkg_decay_ratio,
        }
    }
}

pub fn points_csv(points: &[CurvePoint]) -> String {
    let mut s = String::from("sample_id,n,area_ratio,entropy,activation_norm,bkg_activation_norm\n");
    for p in points {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            p.sample, p.n, p.area_ratio, p.entropy, p.activation_norm, p.bkg_activation_norm
        );
    }
    s
}

pub fn aggregate_csv(stats: &[BinStat]) -> String {
    let mut s = String::from("bin_center,quantity,mean,std,count\n");
    for b in stats {
        let _ = writeln!(s, "{},{},{},{},{}", b.bin_center, b.quantity.name(), b.mean, b.std, b.count);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_and_full_mask() {
        let mut m = Mask::empty(10, 10);
        m.set(4, 4, true);
        assert_eq!(morph_mask(&m, 0), m);
        let full = Mask::full(10, 10);
        assert_eq!(morph_mask(&full, 3), full);
    }

    #[test]
    fn single_pixel_dilation_is_clipped_square() {
        let mut m = Mask::empty(8, 8);
        m.set(1, 6, true);
        let d = morph_mask(&m, 1);
        for y in 0..8 {
            for x in 0..8 {
                let inside = (y as i32 - 1).abs() <= 2 && (x as i32 - 6).abs() <= 2;
                assert_eq!(d.get(y, x), inside, "({y}, {x})");
            }
        }
        assert_eq!(d.area(), 4 * 4);
    }

    #[test]
    fn erosion_touching_border_shrinks() {
        let full = Mask::full(12, 12);
        let e = morph_mask(&full, -1);
        assert_eq!(e.area(), 8 * 8);
        assert!(!e.get(1, 5));
        assert!(e.get(2, 2));
        assert!(morph_mask(&full, -3).is_empty());
    }

    fn brute_dilate(m: &Mask, s: usize) -> Mask {
        let (lo, hi) = window(s);
        let mut out = Mask::empty(m.height, m.width);
        for y in 0..m.height as isize {
            for x in 0..m.width as isize {
                let mut v = false;
                for dy in lo..=hi {
                    for dx in lo..=hi {
                        let (yy, xx) = (y + dy, x + dx);
                        if yy >= 0 && xx >= 0 && (yy as usize) < m.height && (xx as usize) < m.width {
                            v |= m.get(yy as usize, xx as usize);
                        }
                    }
                }
                out.set(y as usize, x as usize, v);
            }
        }
        out
    }

    fn arb_mask() -> impl Strategy<Value = Mask> {
        proptest::collection::vec(proptest::bool::weighted(0.3), 14 * 14).prop_map(|d| Mask::new(14, 14, d).unwrap())
    }

    proptest! {
        #[test]
        fn morphology_ladder_is_nested(m in arb_mask()) {
            for n in -3..4 {
                prop_assert!(morph_mask(&m, n).is_subset_of(&morph_mask(&m, n + 1)));
            }
        }

        #[test]
        fn separable_dilation_matches_brute_force(m in arb_mask(), n in 1i32..3) {
            prop_assert_eq!(morph_mask(&m, n), brute_dilate(&m, 5 * n as usize));
        }
    }

    fn point(ratio: f64, v: f64) -> CurvePoint {
        CurvePoint {
            sample: 0,
            n: 0,
            area_ratio: ratio,
            entropy: v,
            activation_norm: v,
            bkg_activation_norm: v,
        }
    }

    #[test]
    fn aggregate_examples() {
        let bins = Bins::default();
        let curve: Vec<CurvePoint> = (0..10).map(|i| point(0.05 + 0.2 * i as f64, i as f64)).collect();
        let single = aggregate_curves(&curve, &bins).unwrap();
        let ent: Vec<&BinStat> = single.iter().filter(|s| s.quantity == Quantity::Entropy).collect();
        assert_eq!(ent.len(), 10);
        for (s, p) in ent.iter().zip(&curve) {
            assert_eq!(s.mean, p.entropy);
            assert_eq!(s.std, 0.0);
            assert!(s.flagged);
        }

        let twice: Vec<CurvePoint> = curve.iter().chain(&curve).copied().collect();
        assert!(aggregate_curves(&twice, &bins).unwrap().iter().all(|s| s.std == 0.0));

        // y = 3x sampled at the edges of one bin: mean is 3 * center
        let lin = [point(0.5, 1.5), point(0.59, 1.77)];
        let s = aggregate_curves(&lin, &bins).unwrap();
        assert!((s[0].mean - 3.0 * 0.545).abs() < 1e-12);
        assert!((s[0].bin_center - 0.55).abs() < 1e-12);

        assert_eq!(bins.index(2.0), Some(19));
        assert_eq!(bins.index(2.1), None);
    }

    #[test]
    fn crossovers_on_constructed_curves() {
        let mut pts = Vec::new();
        for i in 0..20 {
            let r = 0.05 + 0.1 * i as f64;
            pts.push(CurvePoint {
                sample: 0,
                n: 0,
                area_ratio: r,
                entropy: if r < 0.3 { 2.0 } else { 0.1 },
                activation_norm: (r / 1.0).min(1.0),
                bkg_activation_norm: 1.0 - r / 2.0,
            });
        }
        let bins = Bins {
            min_points: 1,
            ..Bins::default()
        };
        let c = Crossovers::from_stats(&aggregate_curves(&pts, &bins).unwrap());
        assert!((c.entropy_settles_at.unwrap() - 0.35).abs() < 1e-9);
        assert!((c.activation_reaches_at.unwrap() - 0.95).abs() < 1e-9);
        assert!(c.bkg_decay_ratio.unwrap() < 0.1);

        // one point per bin is below the default minimum, so every bin is flagged
        let c = Crossovers::from_stats(&aggregate_curves(&pts, &Bins::default()).unwrap());
        assert_eq!(c.entropy_settles_at, None);
        assert_eq!(c.bkg_decay_ratio, None);
    }
}
