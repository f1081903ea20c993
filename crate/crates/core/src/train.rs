//! SGD training loop for localization (single-label) and segmentation
//! (multi-label) modes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{self, LossBundle, LossTerms, LossWeights};
use crate::model::{BasNet, ModelConfig};
use crate::par::{self, Execution};
use crate::synth::Sample;
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    Wsol,
    Wsss,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub lr_init: f64,
    pub momentum: f64,
    /// Poly decay exponent.
    pub rho: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: TrainMode,
    /// Top-k fusion used when this run is evaluated.
    pub k: usize,
    pub flip: bool,
    pub crop: bool,
    /// Zero padding added before a random crop back to the input size.
    pub crop_pad: usize,
    pub weight_decay: f64,
    /// Rescale the batch gradient to at most this global L2 norm.
    pub grad_clip: Option<f64>,
    /// Leading epochs trained with the classification loss alone.
    pub warmup_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            lr_init: 0.01,
            momentum: 0.9,
            rho: 0.9,
            epochs: 10,
            batch_size: 4,
            seed: 0,
            mode: TrainMode::Wsol,
            k: 1,
            flip: false,
            crop: false,
            crop_pad: 4,
            weight_decay: 0.0,
            grad_clip: Some(2.0),
            warmup_epochs: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::InvalidArgument(format!("train.{key}: {msg}")));
        if !(self.lr_init > 0.0 && self.lr_init.is_finite()) {
            return bad("lr_init", format!("must be positive, got {}", self.lr_init));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", format!("must be in [0, 1), got {}", self.momentum));
        }
        if !(self.rho > 0.0) {
            return bad("rho", format!("must be positive, got {}", self.rho));
        }
        if self.epochs == 0 {
            return bad("epochs", "must be positive".into());
        }
        if self.warmup_epochs >= self.epochs {
            return bad("warmup_epochs", format!("must be below epochs ({}), got {}", self.epochs, self.warmup_epochs));
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive".into());
        }
        if self.k == 0 || self.k > self.model.num_classes {
            return bad("k", format!("must be in 1..={}, got {}", self.model.num_classes, self.k));
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", format!("must be non-negative, got {}", self.weight_decay));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return bad("grad_clip", format!("must be positive, got {c}"));
            }
        }
        self.weights.validate()?;
        self.model.validate()
    }
}

/// `lr_init * (1 - itr / max_itr)^rho`.
pub fn poly_lr(lr_init: f64, rho: f64, itr: usize, max_itr: usize) -> Result<f64> {
    if itr > max_itr || max_itr == 0 {
        return Err(Error::InvalidArgument(format!(
            "iteration {itr} outside 0..={max_itr}"
        )));
    }
    Ok(lr_init * (1.0 - itr as f64 / max_itr as f64).powf(rho))
}

/// Classical momentum: `v <- momentum * v + g; p <- p - lr * v`.
pub fn sgd_momentum_step(param: &mut [f32], grad: &[f32], velocity: &mut [f32], lr: f32, momentum: f32) -> Result<()> {
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(Error::shape(
            "sgd_momentum_step",
            format!(
                "param {}, grad {}, velocity {} elements",
                param.len(),
                grad.len(),
                velocity.len()
            ),
        ));
    }
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// One row of the training log; losses are batch means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub losses: LossBundle,
}

/// Foreground class drawn for one sample in segmentation mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassChoice {
    pub step: usize,
    pub sample: usize,
    pub class: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    pub choices: Vec<ClassChoice>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,lr,l_cls,l_frg,l_ac,l_bas,total\n");
        for r in &self.rows {
            let l = &r.losses;
            let _ = writeln!(
                s,
                "{},{:e},{:e},{:e},{:e},{:e},{:e}",
                r.step, r.lr, l.l_cls, l.l_frg, l.l_ac, l.l_bas, l.total
            );
        }
        s
    }

    pub fn choices_csv(&self) -> String {
        let mut s = String::from("step,sample,class\n");
        for c in &self.choices {
            let _ = writeln!(s, "{},{},{}", c.step, c.sample, c.class);
        }
        s
    }

    /// Mean losses over the steps of `epoch`.
    pub fn epoch_mean(&self, epoch: usize) -> Option<LossBundle> {
        let rows: Vec<&LogRow> = self.rows.iter().filter(|r| r.epoch == epoch).collect();
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        let mean = |f: fn(&LossBundle) -> f64| rows.iter().map(|r| f(&r.losses)).sum::<f64>() / n;
        Some(LossBundle {
            l_cls: mean(|l| l.l_cls),
            l_frg: mean(|l| l.l_frg),
            l_ac: mean(|l| l.l_ac),
            l_bas: mean(|l| l.l_bas),
            total: mean(|l| l.total),
        })
    }
}

/// Where `train` writes its log and checkpoints.
#[derive(Clone, Debug)]
pub struct TrainOutputs {
    pub dir: PathBuf,
}

impl TrainOutputs {
    pub fn log_path(&self) -> PathBuf {
        self.dir.join("train_log.csv")
    }
    pub fn choices_path(&self) -> PathBuf {
        self.dir.join("class_choices.csv")
    }
    pub fn epoch_checkpoint(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("epoch_{epoch:03}.ckpt"))
    }
    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("model.ckpt")
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Horizontal flip and pad-then-crop, each drawn from `rng`.
fn augment(image: &Tensor<f32>, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let (c, h, w) = image.chw().expect("image is [3, H, W]");
    let flip = cfg.flip && rng.random_bool(0.5);
    let (dy, dx) = if cfg.crop {
        let p = cfg.crop_pad as i64;
        (rng.random_range(-p..=p) as isize, rng.random_range(-p..=p) as isize)
    } else {
        (0, 0)
    };
    if !flip && dy == 0 && dx == 0 {
        return image.clone();
    }
    let src = image.data();
    let mut out = vec![0f32; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = y as isize + dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let xx = if flip { w - 1 - x } else { x };
                let sx = xx as isize + dx;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                out[(ch * h + y) * w + x] = src[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    Tensor::new(vec![c, h, w], out).expect("same shape")
}

struct SampleResult {
    grads: Vec<Vec<f32>>,
    losses: LossBundle,
    class: usize,
}

/// Forward and backward pass of one sample; gradients in parameter order.
pub fn sample_gradients(
    net: &BasNet<f32>,
    image: &Tensor<f32>,
    labels: &[usize],
    target: usize,
    mode: TrainMode,
    weights: &LossWeights,
) -> Result<(Vec<Vec<f32>>, LossBundle)> {
    let mut g = Graph::new();
    let vars = net.bind(&mut g, true);
    let x = g.constant(image.clone());
    let feat = net.extract_features(&mut g, &vars, x)?;
    let maps = net.generate_maps(&mut g, &vars, feat)?;
    let amc = net.amc_forward_maps(&mut g, &vars, feat, maps, target)?;
    let cls = match mode {
        TrainMode::Wsol => losses::l_cls(&mut g, amc.y_full, target)?,
        TrainMode::Wsss => losses::l_mcls(&mut g, amc.y_full, labels)?,
    };
    let terms = LossTerms {
        cls,
        frg: losses::l_frg(&mut g, amc.y_frg, target)?,
        ac: losses::l_ac(&mut g, amc.m_f),
        bas: losses::l_bas(&mut g, amc.s, amc.s_bkg, weights.epsilon)?,
    };
    let mut total = match mode {
        TrainMode::Wsol => losses::total_wsol(&mut g, &terms, weights)?,
        TrainMode::Wsss => losses::total_wsss(&mut g, &terms, weights)?,
    };
    if let Some(agn) = net.agnostic_map(&mut g, &vars, feat)? {
        // the agnostic map needs its own area constraint or it saturates at 1
        let bas = losses::l_bas_agnostic(net, &mut g, &vars, feat, amc.y_full, agn, labels, weights.epsilon)?;
        let ac = losses::l_ac(&mut g, agn);
        total = g.weighted_sum(&[
            (total, 1.0),
            (bas, weights.lambda as f32),
            (ac, weights.beta as f32),
        ])?;
    }
    let bundle = terms.bundle(&g, total);
    let grads = g.backward(total)?;
    let leaves = vars.leaves();
    let params = net.params();
    let out = leaves
        .iter()
        .zip(&params)
        .map(|(&v, (_, _, t))| grads.get_or_zeros(v, t.numel()))
        .collect();
    Ok((out, bundle))
}

fn check_mode(samples: &[Sample], cfg: &TrainConfig) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    for (i, s) in samples.iter().enumerate() {
        if s.labels.is_empty() {
            return Err(Error::InvalidArgument(format!("sample {i} has no labels")));
        }
        if cfg.mode == TrainMode::Wsol && s.labels.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "train.mode: wsol needs single-label data, sample {i} has {} labels",
                s.labels.len()
            )));
        }
        if let Some(&c) = s.labels.iter().find(|&&c| c >= cfg.model.num_classes) {
            return Err(Error::InvalidArgument(format!(
                "sample {i} has class {c}, model has {} classes",
                cfg.model.num_classes
            )));
        }
    }
    Ok(())
}

/// Trains `net` in place. Per-sample passes within a batch may run in
/// parallel; gradients are summed in sample order so results do not depend
/// on the execution mode. With `outputs`, writes the CSV log, the class
/// choices (segmentation mode) and a checkpoint at the end of every epoch.
pub fn train(
    net: &mut BasNet<f32>,
    samples: &[Sample],
    cfg: &TrainConfig,
    exec: Execution,
    outputs: Option<&TrainOutputs>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if net.config != cfg.model {
        return Err(Error::InvalidArgument("train.model differs from the network configuration".into()));
    }
    check_mode(samples, cfg)?;
    if let Some(o) = outputs {
        std::fs::create_dir_all(&o.dir).map_err(|e| Error::io(&o.dir, e))?;
    }

    let batches = samples.len().div_ceil(cfg.batch_size);
    let max_itr = cfg.epochs * batches;
    let mut velocity: Vec<Vec<f32>> = net.params().iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle.set_stream(epoch as u64);
        order.shuffle(&mut shuffle);
        let weights = if epoch < cfg.warmup_epochs {
            LossWeights {
                epsilon: cfg.weights.epsilon,
                ..LossWeights::classification_only()
            }
        } else {
            cfg.weights
        };

        for batch in order.chunks(cfg.batch_size) {
            let lr = poly_lr(cfg.lr_init, cfg.rho, step, max_itr)?;
            let snapshot: &BasNet<f32> = net;
            let results: Vec<SampleResult> = par::try_map_range(exec, batch.len(), |j| {
                let idx = batch[j];
                let s = &samples[idx];
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_a0b1_c2d3_e4f5);
                rng.set_stream(((step as u64) << 24) | idx as u64);
                let target = match cfg.mode {
                    TrainMode::Wsol => s.labels[0],
                    TrainMode::Wsss => s.labels[rng.random_range(0..s.labels.len())],
                };
                let image = augment(&s.image, cfg, &mut rng);
                let (grads, losses) = sample_gradients(snapshot, &image, &s.labels, target, cfg.mode, &weights)?;
                Ok(SampleResult {
                    grads,
                    losses,
                    class: target,
                })
            })?;

            let n = results.len() as f64;
            let mut mean = LossBundle::default();
            let mut grads: Vec<Vec<f32>> = velocity.iter().map(|v| vec![0.0; v.len()]).collect();
            for (j, r) in results.iter().enumerate() {
                if !r.losses.total.is_finite() {
                    return Err(Error::NonFiniteLoss { step });
                }
                for (acc, g) in grads.iter_mut().zip(&r.grads) {
                    for (a, &v) in acc.iter_mut().zip(g) {
                        *a += v;
                    }
                }
                mean.l_cls += r.losses.l_cls / n;
                mean.l_frg += r.losses.l_frg / n;
                mean.l_ac += r.losses.l_ac / n;
                mean.l_bas += r.losses.l_bas / n;
                mean.total += r.losses.total / n;
                if cfg.mode == TrainMode::Wsss {
                    log.choices.push(ClassChoice {
                        step,
                        sample: batch[j],
                        class: r.class,
                    });
                }
            }
            let wd = cfg.weight_decay as f32;
            for ((_, _, p), g) in net.params().into_iter().zip(&mut grads) {
                for (gi, &pi) in g.iter_mut().zip(p.data()) {
                    *gi = *gi / n as f32 + wd * pi;
                }
            }
            if let Some(max) = cfg.grad_clip {
                let norm = grads.iter().flatten().map(|&g| (g as f64).powi(2)).sum::<f64>().sqrt();
                if norm > max {
                    let s = (max / norm) as f32;
                    grads.iter_mut().flatten().for_each(|g| *g *= s);
                }
            }
            for (((_, _, p), g), v) in net.params_mut().into_iter().zip(&grads).zip(&mut velocity) {
                sgd_momentum_step(p.data_mut(), g, v, lr as f32, cfg.momentum as f32)?;
            }
            log.rows.push(LogRow {
                step,
                epoch,
                lr,
                losses: mean,
            });
            step += 1;
        }

        if let Some(o) = outputs {
            net.save_checkpoint(&o.epoch_checkpoint(epoch))?;
        }
    }

    if let Some(o) = outputs {
        net.save_checkpoint(&o.final_checkpoint())?;
        write_file(&o.log_path(), log.to_csv().as_bytes())?;
        if cfg.mode == TrainMode::Wsss {
            write_file(&o.choices_path(), log.choices_csv().as_bytes())?;
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_examples() {
        assert_eq!(poly_lr(0.1, 0.9, 0, 100).unwrap(), 0.1);
        assert_eq!(poly_lr(0.1, 0.9, 100, 100).unwrap(), 0.0);
        let half = poly_lr(1.0, 0.9, 50, 100).unwrap();
        assert!((half - 0.5f64.powf(0.9)).abs() < 1e-15);
        assert!((half - 0.5359).abs() < 1e-4);
        assert!(poly_lr(0.1, 0.9, 101, 100).is_err());
    }

    #[test]
    fn poly_is_strictly_decreasing() {
        let lrs: Vec<f64> = (0..=20).map(|i| poly_lr(0.5, 0.9, i, 20).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
        assert_eq!(*lrs.last().unwrap(), 0.0);
    }

    #[test]
    fn sgd_examples() {
        let mut p = vec![1.0, 2.0];
        let mut v = vec![0.0, 0.0];
        sgd_momentum_step(&mut p, &[0.5, -1.0], &mut v, 0.1, 0.0).unwrap();
        assert_eq!(p, vec![0.95, 2.1]);

        let mut p = vec![3.0];
        let mut v = vec![0.0];
        sgd_momentum_step(&mut p, &[0.0], &mut v, 0.1, 0.9).unwrap();
        assert_eq!(p, vec![3.0]);

        // two steps with constant g, lr 1: total change 2.9 g
        let mut p = vec![0.0f32];
        let mut v = vec![0.0f32];
        for _ in 0..2 {
            sgd_momentum_step(&mut p, &[1.0], &mut v, 1.0, 0.9).unwrap();
        }
        assert!((p[0] + 2.9).abs() < 1e-6);

        assert!(sgd_momentum_step(&mut [0.0], &[1.0, 2.0], &mut [0.0], 0.1, 0.9).is_err());
    }

    #[test]
    fn augment_flip_and_identity() {
        let img = Tensor::new(vec![1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plain = TrainConfig::default();
        assert_eq!(augment(&img, &plain, &mut rng), img);
        let flip = TrainConfig {
            flip: true,
            ..TrainConfig::default()
        };
        let mut seen_flip = false;
        for _ in 0..20 {
            let out = augment(&img, &flip, &mut rng);
            if out.data() == [3.0, 2.0, 1.0] {
                seen_flip = true;
            } else {
                assert_eq!(out, img);
            }
        }
        assert!(seen_flip);
    }

    #[test]
    fn config_errors_name_the_key() {
        let cfg = TrainConfig {
            momentum: 1.0,
            ..TrainConfig::default()
        };
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("train.momentum"), "{msg}");
    }
}
