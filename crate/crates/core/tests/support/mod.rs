//! Shared checks for the integration and acceptance tests: finite-difference
//! gradient trials, loss invariants, the frozen-branch contract, and
//! brute-force metric references.

#![allow(dead_code)]

use bas::eval::{BBox, IouRule};
use bas::losses::{self, LossTerms, LossWeights};
use bas::maps::{Map, Mask};
use bas::model::{BasNet, ModelConfig, ParamGroup};
use bas::tensor::{finite_diff_check, GradCheck, ABS_FLOOR};
use bas::{Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// A small 5-class network on 16x16 inputs.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        num_classes: 5,
        input_size: 16,
        extractor_widths: vec![4, 6, 8],
        extractor_strides: vec![2, 1, 1],
        head_widths: vec![8],
        generator_stage: 2,
        ..ModelConfig::default()
    }
}

pub fn toy_net(seed: u64, freeze_background: bool) -> BasNet<f64> {
    BasNet::new(
        ModelConfig {
            freeze_background,
            ..toy_config()
        },
        seed,
    )
    .unwrap()
}

/// Reduces a tensor to a scalar with fixed random weights so every output
/// element gets a distinct upstream gradient.
fn project(g: &mut Graph<f64>, v: Var, seed: u64) -> Result<Var> {
    let shape = g.value(v).shape().to_vec();
    let r = random_tensor(&mut rng(seed), &shape, -1.0, 1.0);
    let r = g.constant(r);
    let p = g.mul(v, r)?;
    Ok(g.sum(p))
}

pub const OP_NAMES: [&str; 18] = [
    "conv2d",
    "conv2d_stride2_bias",
    "relu",
    "sigmoid",
    "global_avg_pool",
    "mask_mul",
    "one_minus",
    "affine",
    "select_channel",
    "avg_pool",
    "index",
    "mean",
    "add_mul",
    "weighted_sum",
    "softmax_cross_entropy",
    "multilabel_cross_entropy",
    "clamped_ratio",
    "stop_gradient",
];

/// Finite-difference check of one op on random inputs.
pub fn op_trial(op: usize, seed: u64) -> GradCheck {
    if op == 17 {
        // a detached edge has no finite-difference counterpart
        return stop_gradient_trial(seed);
    }
    let mut r = rng(seed);
    let ps = seed ^ 0xabc;
    let eps = 1e-6;
    let c = r.random_range(1..4);
    let h = r.random_range(2..6) * 2;
    let w = r.random_range(2..6) * 2;
    let x = random_tensor(&mut r, &[c, h, w], -1.0, 1.0);
    let res = match op {
        0 => {
            let k = [1, 3][r.random_range(0..2)];
            let wt = random_tensor(&mut r, &[2, c, k, k], -1.0, 1.0);
            finite_diff_check(
                |g, v| {
                    let y = g.conv2d(v[0], v[1], None, 1, k / 2)?;
                    project(g, y, ps)
                },
                &[x, wt],
                eps,
            )
        }
        1 => {
            let wt = random_tensor(&mut r, &[3, c, 3, 3], -1.0, 1.0);
            let b = random_tensor(&mut r, &[3], -1.0, 1.0);
            finite_diff_check(
                |g, v| {
                    let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
                    project(g, y, ps)
                },
                &[x, wt, b],
                eps,
            )
        }
        2 => finite_diff_check(
            |g, v| {
                let y = g.relu(v[0]);
                project(g, y, ps)
            },
            &[x],
            eps,
        ),
        3 => finite_diff_check(
            |g, v| {
                let y = g.sigmoid(v[0]);
                project(g, y, ps)
            },
            &[x],
            eps,
        ),
        4 => finite_diff_check(
            |g, v| {
                let y = g.global_avg_pool(v[0])?;
                project(g, y, ps)
            },
            &[x],
            eps,
        ),
        5 => {
            let m = random_tensor(&mut r, &[1, h, w], 0.0, 1.0);
            finite_diff_check(
                |g, v| {
                    let y = g.mask_mul(v[0], v[1])?;
                    project(g, y, ps)
                },
                &[x, m],
                eps,
            )
        }
        6 => finite_diff_check(
            |g, v| {
                let y = g.one_minus(v[0]);
                project(g, y, ps)
            },
            &[x],
            eps,
        ),
        7 => {
            let (a, b) = (r.random_range(-2.0..2.0), r.random_range(-1.0..1.0));
            finite_diff_check(
                |g, v| {
                    let y = g.affine(v[0], a, b);
                    project(g, y, ps)
                },
                &[x],
                eps,
            )
        }
        8 => {
            let ch = r.random_range(0..c);
            finite_diff_check(
                |g, v| {
                    let y = g.select_channel(v[0], ch)?;
                    project(g, y, ps)
                },
                &[x],
                eps,
            )
        }
        9 => finite_diff_check(
            |g, v| {
                let y = g.avg_pool(v[0], 2)?;
                project(g, y, ps)
            },
            &[x],
            eps,
        ),
        10 => {
            let n = r.random_range(2..7);
            let i = r.random_range(0..n);
            let v0 = random_tensor(&mut r, &[n], -1.0, 1.0);
            finite_diff_check(
                |g, v| {
                    let y = g.index(v[0], i)?;
                    let y2 = g.mul(y, y)?;
                    g.add(y2, y)
                },
                &[v0],
                eps,
            )
        }
        11 => finite_diff_check(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                Ok(g.mean(sq))
            },
            &[x],
            eps,
        ),
        12 => {
            let y0 = random_tensor(&mut r, &[c, h, w], -1.0, 1.0);
            finite_diff_check(
                |g, v| {
                    let s = g.add(v[0], v[1])?;
                    let p = g.mul(s, v[1])?;
                    project(g, p, ps)
                },
                &[x, y0],
                eps,
            )
        }
        13 => {
            let ws: Vec<f64> = (0..3).map(|_| r.random_range(-2.0..2.0)).collect();
            let ins: Vec<Tensor<f64>> = (0..3).map(|_| random_tensor(&mut r, &[4], -1.0, 1.0)).collect();
            finite_diff_check(
                |g, v| {
                    let y = g.weighted_sum(&[(v[0], ws[0]), (v[1], ws[1]), (v[2], ws[2])])?;
                    project(g, y, ps)
                },
                &ins,
                eps,
            )
        }
        14 => {
            let n = r.random_range(2..8);
            let t = r.random_range(0..n);
            let l = random_tensor(&mut r, &[n], -3.0, 3.0);
            finite_diff_check(|g, v| g.softmax_cross_entropy(v[0], t), &[l], eps)
        }
        15 => {
            let n = r.random_range(3..8);
            let mut pos: Vec<usize> = (0..n).filter(|_| r.random_bool(0.4)).collect();
            if pos.is_empty() || pos.len() == n {
                pos = vec![r.random_range(0..n)];
            }
            let l = random_tensor(&mut r, &[n], -3.0, 3.0);
            finite_diff_check(|g, v| g.multilabel_cross_entropy(v[0], &pos), &[l], eps)
        }
        16 => {
            let num = Tensor::scalar(r.random_range(0.0..1.0));
            let den = Tensor::scalar(r.random_range(0.2..2.0));
            finite_diff_check(|g, v| g.clamped_ratio(v[0], v[1], 1e-8), &[num, den], eps)
        }
        _ => unreachable!("op index"),
    };
    res.unwrap()
}

/// `d/dx [sg(x) * x + x] = sg(x) + 1`, compared elementwise.
fn stop_gradient_trial(seed: u64) -> GradCheck {
    let x = random_tensor(&mut rng(seed), &[6], -1.0, 1.0);
    let mut g = Graph::new();
    let v = g.param(x.clone());
    let s = g.stop_gradient(v);
    let p = g.mul(s, v).unwrap();
    let p = g.add(p, v).unwrap();
    let l = g.sum(p);
    let grads = g.backward(l).unwrap();
    let got = grads.get(v).unwrap();
    let mut max_error: f64 = 0.0;
    for (a, b) in got.iter().zip(x.data()) {
        max_error = max_error.max((a - (b + 1.0)).abs());
    }
    GradCheck {
        max_error,
        coordinates: 6,
        worst: None,
    }
}

/// Composed localization objective for one image, built from the network's
/// own parameter leaves.
pub fn wsol_total(net: &BasNet<f64>, g: &mut Graph<f64>, image: &Tensor<f64>, target: usize, w: &LossWeights) -> Result<(Var, Vec<Var>)> {
    let vars = net.bind(g, true);
    let x = g.constant(image.clone());
    let feat = net.extract_features(g, &vars, x)?;
    let maps = net.generate_maps(g, &vars, feat)?;
    let amc = net.amc_forward_maps(g, &vars, feat, maps, target)?;
    let terms = LossTerms {
        cls: losses::l_cls(g, amc.y_full, target)?,
        frg: losses::l_frg(g, amc.y_frg, target)?,
        ac: losses::l_ac(g, amc.m_f),
        bas: losses::l_bas(g, amc.s, amc.s_bkg, w.epsilon)?,
    };
    Ok((losses::total_wsol(g, &terms, w)?, vars.leaves()))
}

fn wsol_value(net: &BasNet<f64>, image: &Tensor<f64>, target: usize, w: &LossWeights) -> f64 {
    let mut g = Graph::new();
    let (t, _) = wsol_total(net, &mut g, image, target, w).unwrap();
    g.value(t).item()
}

/// Central differences of the composed objective with respect to `coords`
/// randomly drawn parameter coordinates of a fresh toy network (background
/// branch unfrozen, so the analytic gradient is the true derivative).
pub fn composed_trial(seed: u64, coords: usize) -> GradCheck {
    let mut r = rng(seed);
    let mut net = toy_net(seed, false);
    let image = random_tensor(&mut r, &[3, 16, 16], 0.0, 1.0);
    let target = r.random_range(0..5);
    let w = LossWeights::default();
    let mut g = Graph::new();
    let (total, leaves) = wsol_total(&net, &mut g, &image, target, &w).unwrap();
    let grads = g.backward(total).unwrap();
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .zip(net.params())
        .map(|(&v, (_, _, t))| grads.get_or_zeros(v, t.numel()))
        .collect();

    let eps = 1e-6;
    let mut report = GradCheck {
        max_error: 0.0,
        coordinates: 0,
        worst: None,
    };
    let n_params = analytic.len();
    for i in 0..coords {
        // cycle through parameter tensors so every group is covered
        let p = i % n_params;
        let len = analytic[p].len();
        let ci = r.random_range(0..len);
        let x0 = net.params()[p].2.data()[ci];
        net.params_mut()[p].2.data_mut()[ci] = x0 + eps;
        let plus = wsol_value(&net, &image, target, &w);
        net.params_mut()[p].2.data_mut()[ci] = x0 - eps;
        let minus = wsol_value(&net, &image, target, &w);
        net.params_mut()[p].2.data_mut()[ci] = x0;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[p][ci];
        let scale = a.abs().max(numeric.abs());
        let err = if scale < ABS_FLOOR {
            (a - numeric).abs()
        } else {
            (a - numeric).abs() / scale
        };
        report.coordinates += 1;
        if err >= report.max_error {
            report.max_error = err;
            report.worst = Some((p, ci));
        }
    }
    report
}

/// Outcome of one random AMC evaluation.
#[derive(Debug)]
pub struct AmcCheck {
    pub l_bas: f64,
    pub l_ac: f64,
    pub s: f64,
    pub s_bkg: f64,
    pub complement_exact: bool,
    /// `S^b` when the foreground map is all ones.
    pub s_bkg_full_foreground: f64,
}

impl AmcCheck {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(0.0..=1.0).contains(&self.l_bas) {
            v.push(format!("l_bas {} outside [0, 1]", self.l_bas));
        }
        if !(self.l_ac > 0.0 && self.l_ac < 1.0) {
            v.push(format!("l_ac {} outside (0, 1)", self.l_ac));
        }
        if !self.complement_exact {
            v.push("M_b != 1 - M_f".into());
        }
        if self.s < 0.0 || self.s_bkg < 0.0 {
            v.push(format!("negative activation S={} S^b={}", self.s, self.s_bkg));
        }
        if self.s_bkg_full_foreground != 0.0 {
            v.push(format!("S^b = {} with M_f = 1", self.s_bkg_full_foreground));
        }
        v
    }
}

/// Random network, random image, random target; the generated map is the
/// foreground map. Alternates default and legacy activation modes.
pub fn amc_trial(seed: u64) -> AmcCheck {
    let mut r = rng(seed);
    let net: BasNet<f32> = BasNet::new(
        ModelConfig {
            legacy_relu: seed % 2 == 1,
            ..toy_config()
        },
        seed,
    )
    .unwrap();
    let image = random_tensor(&mut r, &[3, 16, 16], 0.0, 1.0).cast::<f32>();
    let target = r.random_range(0..5);
    let mut g = Graph::new();
    let vars = net.bind(&mut g, false);
    let x = g.constant(image);
    let feat = net.extract_features(&mut g, &vars, x).unwrap();
    let maps = net.generate_maps(&mut g, &vars, feat).unwrap();
    let amc = net.amc_forward_maps(&mut g, &vars, feat, maps, target).unwrap();
    let bas = losses::l_bas(&mut g, amc.s, amc.s_bkg, losses::EPS_DEFAULT).unwrap();
    let ac = losses::l_ac(&mut g, amc.m_f);
    let out = amc.values(&g);
    let complement_exact = out
        .m_f
        .data()
        .iter()
        .zip(out.m_b.data())
        .all(|(&f, &b)| b == 1.0 - f);

    let side = net.config.feature_size();
    let ones = g.constant(Tensor::full(&[1, side, side], 1.0));
    let full = net.amc_forward(&mut g, &vars, feat, ones, target).unwrap();
    AmcCheck {
        l_bas: g.value(bas).item() as f64,
        l_ac: g.value(ac).item() as f64,
        s: out.s as f64,
        s_bkg: out.s_bkg as f64,
        complement_exact,
        s_bkg_full_foreground: g.value(full.s_bkg).item() as f64,
    }
}

/// Outcome of the frozen-branch check on one network.
#[derive(Debug)]
pub struct FrozenCheck {
    /// Θ2 tensors whose perturbation left `S^b` unchanged.
    pub unchanged_forward: Vec<String>,
    /// Largest |dS^b/dΘ2| with the background branch frozen (must be 0).
    pub frozen_bkg_grad: f64,
    /// Largest |dS^b/dΘ2| in the unfrozen variant (must be > 0).
    pub unfrozen_bkg_grad: f64,
    /// Largest difference between the frozen dL_bas/dΘ2 and the gradient
    /// through the full branch only.
    pub full_branch_mismatch: f64,
}

impl FrozenCheck {
    pub fn ok(&self) -> bool {
        self.unchanged_forward.is_empty()
            && self.frozen_bkg_grad == 0.0
            && self.unfrozen_bkg_grad > 0.0
            && self.full_branch_mismatch <= 1e-12
    }
}

struct BkgPass {
    s_bkg: f64,
    grad_s_bkg: Vec<Vec<f64>>,
    grad_l_bas: Vec<Vec<f64>>,
    grad_l_bas_full_only: Vec<Vec<f64>>,
}

fn bkg_pass(net: &BasNet<f64>, image: &Tensor<f64>, m_f: &Tensor<f64>, target: usize) -> BkgPass {
    let theta2: Vec<usize> = net
        .params()
        .iter()
        .enumerate()
        .filter(|(_, p)| p.1 == ParamGroup::SubNetwork)
        .map(|(i, _)| i)
        .collect();
    let run = |detach_bkg: bool, which: u8| -> (f64, Vec<Vec<f64>>) {
        let mut g = Graph::new();
        let vars = net.bind(&mut g, true);
        let x = g.constant(image.clone());
        let feat = net.extract_features(&mut g, &vars, x).unwrap();
        let m = g.constant(m_f.clone());
        let amc = net.amc_forward(&mut g, &vars, feat, m, target).unwrap();
        let s_bkg = if detach_bkg { g.stop_gradient(amc.s_bkg) } else { amc.s_bkg };
        let loss = if which == 0 {
            s_bkg
        } else {
            losses::l_bas(&mut g, amc.s, s_bkg, losses::EPS_DEFAULT).unwrap()
        };
        let grads = g.backward(loss).unwrap();
        let leaves = vars.leaves();
        let params = net.params();
        let out = theta2
            .iter()
            .map(|&i| grads.get_or_zeros(leaves[i], params[i].2.numel()))
            .collect();
        (g.value(amc.s_bkg).item(), out)
    };
    let (s_bkg, grad_s_bkg) = run(false, 0);
    let (_, grad_l_bas) = run(false, 1);
    let (_, grad_l_bas_full_only) = run(true, 1);
    BkgPass {
        s_bkg,
        grad_s_bkg,
        grad_l_bas,
        grad_l_bas_full_only,
    }
}

fn max_abs(v: &[Vec<f64>]) -> f64 {
    v.iter().flatten().fold(0.0, |m, &x| m.max(x.abs()))
}

pub fn frozen_trial(seed: u64) -> FrozenCheck {
    let mut r = rng(seed);
    let frozen = toy_net(seed, true);
    let unfrozen = toy_net(seed, false);
    let image = random_tensor(&mut r, &[3, 16, 16], 0.0, 1.0);
    let side = frozen.config.feature_size();
    let m_f = random_tensor(&mut r, &[1, side, side], 0.0, 1.0);

    // the class with the largest background activation, so S^b > 0
    let mut g = Graph::new();
    let vars = frozen.bind(&mut g, false);
    let x = g.constant(image.clone());
    let feat = frozen.extract_features(&mut g, &vars, x).unwrap();
    let m = g.constant(m_f.clone());
    let amc = frozen.amc_forward(&mut g, &vars, feat, m, 0).unwrap();
    let y_bkg = g.value(amc.y_bkg).data().to_vec();
    let target = bas::model::rank_classes(&y_bkg)[0];

    let f = bkg_pass(&frozen, &image, &m_f, target);
    let u = bkg_pass(&unfrozen, &image, &m_f, target);

    let mut unchanged_forward = Vec::new();
    let names: Vec<(usize, String)> = frozen
        .params()
        .iter()
        .enumerate()
        .filter(|(_, p)| p.1 == ParamGroup::SubNetwork)
        .map(|(i, p)| (i, p.0.clone()))
        .collect();
    for (i, name) in names {
        let mut p = frozen.clone();
        for v in p.params_mut()[i].2.data_mut() {
            *v += r.random_range(-0.05..0.05);
        }
        if bkg_pass(&p, &image, &m_f, target).s_bkg == f.s_bkg {
            unchanged_forward.push(name);
        }
    }
    let mismatch = f
        .grad_l_bas
        .iter()
        .flatten()
        .zip(f.grad_l_bas_full_only.iter().flatten())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    FrozenCheck {
        unchanged_forward,
        frozen_bkg_grad: max_abs(&f.grad_s_bkg),
        unfrozen_bkg_grad: max_abs(&u.grad_s_bkg),
        full_branch_mismatch: mismatch,
    }
}

// ---- brute-force metric references ----

/// Largest 8-connected component by repeated label relaxation; ties go to
/// the component containing the earliest pixel in raster order.
pub fn bf_box(mask: &Mask) -> Option<BBox> {
    let (h, w) = (mask.height, mask.width);
    let n = h * w;
    let mut label: Vec<usize> = (0..n).collect();
    loop {
        let mut changed = false;
        for p in 0..n {
            if !mask.data[p] {
                continue;
            }
            let (y, x) = ((p / w) as i64, (p % w) as i64);
            for q in 0..n {
                if !mask.data[q] {
                    continue;
                }
                let (qy, qx) = ((q / w) as i64, (q % w) as i64);
                if (qy - y).abs() <= 1 && (qx - x).abs() <= 1 && label[q] < label[p] {
                    label[p] = label[q];
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut best: Option<(usize, usize)> = None;
    for root in 0..n {
        if !mask.data[root] || label[root] != root {
            continue;
        }
        let size = (0..n).filter(|&p| mask.data[p] && label[p] == root).count();
        if best.is_none_or(|(s, _)| size > s) {
            best = Some((size, root));
        }
    }
    let (_, root) = best?;
    let pix: Vec<usize> = (0..n).filter(|&p| mask.data[p] && label[p] == root).collect();
    Some(BBox {
        x0: pix.iter().map(|p| p % w).min().unwrap(),
        y0: pix.iter().map(|p| p / w).min().unwrap(),
        x1: pix.iter().map(|p| p % w).max().unwrap() + 1,
        y1: pix.iter().map(|p| p / w).max().unwrap() + 1,
    })
}

/// Box IoU by counting covered pixels on a grid that contains both boxes.
pub fn bf_box_iou(a: Option<BBox>, b: &BBox) -> f64 {
    let Some(a) = a else { return 0.0 };
    let side = a.x1.max(a.y1).max(b.x1).max(b.y1);
    let inside = |bx: &BBox, y: usize, x: usize| y >= bx.y0 && y < bx.y1 && x >= bx.x0 && x < bx.x1;
    let (mut inter, mut union) = (0usize, 0usize);
    for y in 0..side {
        for x in 0..side {
            let (p, q) = (inside(&a, y, x), inside(b, y, x));
            inter += (p && q) as usize;
            union += (p || q) as usize;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn bf_binarize(map: &Map, theta: f32) -> Mask {
    Mask::new(map.height, map.width, map.data.iter().map(|&v| v >= theta).collect()).unwrap()
}

/// Position of `class` when classes are ordered by decreasing logit.
pub fn bf_rank(logits: &[f32], class: usize) -> usize {
    (0..logits.len())
        .filter(|&c| logits[c] > logits[class] || (logits[c] == logits[class] && c < class))
        .count()
}

pub struct BfLoc {
    pub gt_known: f64,
    pub top1: f64,
    pub top5: f64,
}

pub fn bf_loc(maps: &[Map], logits: &[Vec<f32>], classes: &[usize], boxes: &[BBox], theta: f32, delta: f64, rule: IouRule) -> BfLoc {
    let n = maps.len() as f64;
    let (mut k, mut t1, mut t5) = (0, 0, 0);
    for i in 0..maps.len() {
        let iou = bf_box_iou(bf_box(&bf_binarize(&maps[i], theta)), &boxes[i]);
        if rule.accepts(iou, delta) {
            k += 1;
            let rank = bf_rank(&logits[i], classes[i]);
            t1 += (rank == 0) as usize;
            t5 += (rank <= 4) as usize;
        }
    }
    BfLoc {
        gt_known: k as f64 / n,
        top1: t1 as f64 / n,
        top5: t5 as f64 / n,
    }
}

pub fn bf_maxboxacc(maps: &[Map], boxes: &[BBox], deltas: &[f64], grid: &[f32], rule: IouRule) -> f64 {
    let n = maps.len() as f64;
    let mut total = 0.0;
    for &d in deltas {
        let mut best = -1.0f64;
        for &t in grid {
            let hits = (0..maps.len())
                .filter(|&i| rule.accepts(bf_box_iou(bf_box(&bf_binarize(&maps[i], t)), &boxes[i]), d))
                .count();
            best = best.max(hits as f64 / n);
        }
        total += best;
    }
    total / deltas.len() as f64
}

pub fn bf_mask_iou(a: &Mask, b: &Mask) -> f64 {
    let inter = a.data.iter().zip(&b.data).filter(|(p, q)| **p && **q).count();
    let union = a.data.iter().zip(&b.data).filter(|(p, q)| **p || **q).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn bf_piou(maps: &[Map], masks: &[Mask], grid: &[f32]) -> f64 {
    let n = maps.len() as f64;
    grid.iter()
        .map(|&t| {
            (0..maps.len())
                .map(|i| bf_mask_iou(&bf_binarize(&maps[i], t), &masks[i]))
                .sum::<f64>()
                / n
        })
        .fold(0.0, f64::max)
}

pub fn bf_pxap(maps: &[Map], masks: &[Mask]) -> f64 {
    let pixels: Vec<(f32, bool)> = maps
        .iter()
        .zip(masks)
        .flat_map(|(m, k)| m.data.iter().copied().zip(k.data.iter().copied()))
        .collect();
    let positives = pixels.iter().filter(|p| p.1).count();
    if positives == 0 {
        return 0.0;
    }
    let mut values: Vec<f32> = pixels.iter().map(|p| p.0).collect();
    values.sort_by(|a, b| b.total_cmp(a));
    values.dedup();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for v in values {
        let tp = pixels.iter().filter(|p| p.0 >= v && p.1).count();
        let fp = pixels.iter().filter(|p| p.0 >= v && !p.1).count();
        let recall = tp as f64 / positives as f64;
        ap += (recall - prev) * (tp as f64 / (tp + fp) as f64);
        prev = recall;
    }
    ap
}

pub fn bf_miou(class_maps: &[Vec<Map>], gt: &[Vec<usize>], num_classes: usize, theta_bg: f32) -> f64 {
    let preds: Vec<Vec<usize>> = class_maps
        .iter()
        .map(|maps| {
            (0..maps[0].data.len())
                .map(|p| {
                    let mut best = 0;
                    for c in 1..num_classes {
                        if maps[c].data[p] > maps[best].data[p] {
                            best = c;
                        }
                    }
                    if maps[best].data[p] >= theta_bg {
                        best + 1
                    } else {
                        0
                    }
                })
                .collect()
        })
        .collect();
    let mut ious = Vec::new();
    for l in 0..=num_classes {
        let (mut tp, mut fp, mut fneg) = (0u64, 0u64, 0u64);
        for (p, g) in preds.iter().flatten().zip(gt.iter().flatten()) {
            match (*p == l, *g == l) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
        }
        if tp + fp + fneg > 0 {
            ious.push(tp as f64 / (tp + fp + fneg) as f64);
        }
    }
    if ious.is_empty() {
        0.0
    } else {
        ious.iter().sum::<f64>() / ious.len() as f64
    }
}

/// One random metric instance on `side x side` images.
pub struct MetricInstance {
    pub maps: Vec<Map>,
    pub logits: Vec<Vec<f32>>,
    pub classes: Vec<usize>,
    pub boxes: Vec<BBox>,
    pub masks: Vec<Mask>,
    pub class_maps: Vec<Vec<Map>>,
    pub semantic: Vec<Vec<usize>>,
}

pub const NUM_CLASSES: usize = 6;

fn random_map(r: &mut ChaCha8Rng, side: usize, grid_steps: usize) -> Map {
    let quantized = r.random_bool(0.5);
    let data = (0..side * side)
        .map(|_| {
            if quantized {
                // values that land exactly on grid thresholds
                r.random_range(0..=grid_steps) as f32 / grid_steps as f32
            } else {
                r.random::<f32>()
            }
        })
        .collect();
    Map::new(side, side, data).unwrap()
}

fn random_box(r: &mut ChaCha8Rng, side: usize) -> BBox {
    let x0 = r.random_range(0..side - 1);
    let y0 = r.random_range(0..side - 1);
    BBox::new(x0, y0, r.random_range(x0 + 1..=side), r.random_range(y0 + 1..=side))
}

pub fn metric_instance(seed: u64, samples: usize, side: usize, grid_steps: usize) -> MetricInstance {
    let mut r = rng(seed);
    let mut inst = MetricInstance {
        maps: vec![],
        logits: vec![],
        classes: vec![],
        boxes: vec![],
        masks: vec![],
        class_maps: vec![],
        semantic: vec![],
    };
    for _ in 0..samples {
        inst.maps.push(random_map(&mut r, side, grid_steps));
        // small integers make logit ties common
        inst.logits
            .push((0..NUM_CLASSES).map(|_| r.random_range(0..4) as f32).collect());
        inst.classes.push(r.random_range(0..NUM_CLASSES));
        let b = random_box(&mut r, side);
        inst.boxes.push(b);
        let density = r.random_range(0.0..1.0);
        inst.masks.push(
            Mask::new(side, side, (0..side * side).map(|_| r.random_bool(density)).collect()).unwrap(),
        );
        inst.class_maps
            .push((0..NUM_CLASSES).map(|_| random_map(&mut r, side, grid_steps)).collect());
        inst.semantic
            .push((0..side * side).map(|_| r.random_range(0..=NUM_CLASSES)).collect());
    }
    inst
}
