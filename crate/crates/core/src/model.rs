//! The BAS network: extractor F1, class-wise map generator, shared
//! classification sub-network F2, and the activation map constraint (AMC)
//! forward pass.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::io::Cursor;
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_classes: usize,
    /// Side length of the square input image.
    pub input_size: usize,
    pub extractor_widths: Vec<usize>,
    pub extractor_strides: Vec<usize>,
    /// Widths of the 3x3 blocks of F2 before its final 1x1 classifier.
    pub head_widths: Vec<usize>,
    /// Number of extractor blocks feeding the generator. Remaining extractor
    /// blocks become the leading blocks of F2.
    pub generator_stage: usize,
    /// Terminate F2 with a ReLU (earlier BAS variant) instead of applying
    /// ReLU to the selected logits only.
    pub legacy_relu: bool,
    /// Add a one-channel class-agnostic foreground generator.
    pub agnostic_head: bool,
    /// Stop gradients into F2 parameters along the background branch.
    /// Only disabled to test that contract.
    pub freeze_background: bool,
    /// Map pixel values from [0, 1] to [-1, 1] before the first convolution.
    pub center_input: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 5,
            input_size: 64,
            extractor_widths: vec![16, 32, 64],
            extractor_strides: vec![2, 2, 1],
            head_widths: vec![64, 64],
            generator_stage: 3,
            legacy_relu: false,
            agnostic_head: false,
            freeze_background: true,
            center_input: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.num_classes < 2 {
            return bad(format!("model.num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.extractor_widths.is_empty() {
            return bad("model.extractor_widths is empty".into());
        }
        if self.extractor_widths.len() != self.extractor_strides.len() {
            return bad(format!(
                "model.extractor_strides has {} entries, model.extractor_widths has {}",
                self.extractor_strides.len(),
                self.extractor_widths.len()
            ));
        }
        if self.extractor_strides.contains(&0) {
            return bad("model.extractor_strides must be positive".into());
        }
        if self.generator_stage == 0 || self.generator_stage > self.extractor_widths.len() {
            return bad(format!(
                "model.generator_stage must be in 1..={}, got {}",
                self.extractor_widths.len(),
                self.generator_stage
            ));
        }
        let total_stride: usize = self.extractor_strides.iter().product();
        if self.input_size == 0 || !self.input_size.is_multiple_of(total_stride) {
            return bad(format!(
                "model.input_size {} not divisible by total stride {}",
                self.input_size, total_stride
            ));
        }
        Ok(())
    }

    /// Spatial side of the feature maps F (and of the generated maps).
    pub fn feature_size(&self) -> usize {
        self.input_size
            / self.extractor_strides[..self.generator_stage]
                .iter()
                .product::<usize>()
    }

    /// Spatial side of the F2 output.
    pub fn head_size(&self) -> usize {
        self.feature_size()
            / self.extractor_strides[self.generator_stage..]
                .iter()
                .product::<usize>()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv<T: Real> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Real> Conv<T> {
    fn kaiming(
        rng: &mut ChaCha8Rng,
        c_out: usize,
        c_in: usize,
        k: usize,
        stride: usize,
        gain: f64,
        bias: bool,
    ) -> Self {
        let fan_in = (c_in * k * k) as f64;
        let normal = Normal::new(0.0, gain * (2.0 / fan_in).sqrt()).expect("positive std");
        let data = (0..c_out * c_in * k * k)
            .map(|_| T::from_f64(normal.sample(rng)))
            .collect();
        Self {
            weight: Tensor::new(vec![c_out, c_in, k, k], data)
                .expect("consistent shape")
                .with_grad(),
            bias: bias.then(|| Tensor::zeros(&[c_out]).with_grad()),
            stride,
            pad: k / 2,
        }
    }

    fn cast<U: Real>(&self) -> Conv<U> {
        Conv {
            weight: self.weight.cast(),
            bias: self.bias.as_ref().map(Tensor::cast),
            stride: self.stride,
            pad: self.pad,
        }
    }
}

/// Which part of the network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    /// Θ1: extractor blocks before the generator.
    Extractor,
    Generator,
    Agnostic,
    /// Θ2: everything after the generator stage.
    SubNetwork,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BasNet<T: Real = f32> {
    pub config: ModelConfig,
    pub extractor: Vec<Conv<T>>,
    pub generator: Conv<T>,
    pub agnostic: Option<Conv<T>>,
    pub head: Vec<Conv<T>>,
    pub classifier: Conv<T>,
}

/// Network parameters bound as leaves of one graph.
#[derive(Clone, Debug)]
pub struct NetVars {
    extractor: Vec<(Var, Option<Var>)>,
    generator: (Var, Option<Var>),
    agnostic: Option<(Var, Option<Var>)>,
    head: Vec<(Var, Option<Var>)>,
    classifier: (Var, Option<Var>),
}

impl NetVars {
    /// Leaves in [`BasNet::params`] order.
    pub fn leaves(&self) -> Vec<Var> {
        let mut out = Vec::new();
        let mut push = |(w, b): &(Var, Option<Var>)| {
            out.push(*w);
            out.extend(*b);
        };
        self.extractor.iter().for_each(&mut push);
        push(&self.generator);
        if let Some(a) = &self.agnostic {
            push(a);
        }
        self.head.iter().for_each(&mut push);
        push(&self.classifier);
        out
    }
}

/// Graph handles of one AMC forward pass.
#[derive(Clone, Copy, Debug)]
pub struct AmcVars {
    pub y_full: Var,
    pub y_bkg: Var,
    pub y_frg: Var,
    pub s: Var,
    pub s_bkg: Var,
    pub m_f: Var,
    pub m_b: Var,
}

/// Values of one AMC forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct AmcOutputs<T> {
    pub y_full: Vec<T>,
    pub y_bkg: Vec<T>,
    pub y_frg: Vec<T>,
    pub s: T,
    pub s_bkg: T,
    pub m_f: Tensor<T>,
    pub m_b: Tensor<T>,
}

impl AmcVars {
    pub fn values<T: Real>(&self, g: &Graph<T>) -> AmcOutputs<T> {
        AmcOutputs {
            y_full: g.value(self.y_full).data().to_vec(),
            y_bkg: g.value(self.y_bkg).data().to_vec(),
            y_frg: g.value(self.y_frg).data().to_vec(),
            s: g.value(self.s).item(),
            s_bkg: g.value(self.s_bkg).item(),
            m_f: g.value(self.m_f).clone(),
            m_b: g.value(self.m_b).clone(),
        }
    }
}

/// Result of label-free (or GT-assisted) inference on one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference<T> {
    pub logits: Vec<T>,
    /// `[C, h, w]` foreground prediction maps.
    pub maps: Tensor<T>,
    /// `[1, h, w]` mean of the selected maps.
    pub fused: Tensor<T>,
    /// Classes whose maps were fused, highest probability first.
    pub selected: Vec<usize>,
    pub agnostic: Option<Tensor<T>>,
}

impl<T: Real> BasNet<T> {
    /// Kaiming fan-in initialization from `seed`; the generator uses gain 0.1
    /// so that initial maps sit near 0.5.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c_in = 3;
        let mut extractor = Vec::new();
        for (&w, &s) in config.extractor_widths.iter().zip(&config.extractor_strides) {
            extractor.push(Conv::kaiming(&mut rng, w, c_in, 3, s, 1.0, false));
            c_in = w;
        }
        let feat_c = config.extractor_widths[config.generator_stage - 1];
        let generator = Conv::kaiming(&mut rng, config.num_classes, feat_c, 3, 1, 0.1, true);
        let agnostic = config
            .agnostic_head
            .then(|| Conv::kaiming(&mut rng, 1, feat_c, 3, 1, 0.1, true));
        let mut head = Vec::new();
        for &w in &config.head_widths {
            head.push(Conv::kaiming(&mut rng, w, c_in, 3, 1, 1.0, false));
            c_in = w;
        }
        let classifier = Conv::kaiming(&mut rng, config.num_classes, c_in, 1, 1, 1.0, false);
        Ok(Self {
            config,
            extractor,
            generator,
            agnostic,
            head,
            classifier,
        })
    }

    /// Same topology as [`BasNet::new`] with every parameter zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let mut net = Self::new(config, 0)?;
        for (_, _, p) in net.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
        Ok(net)
    }

    pub fn cast<U: Real>(&self) -> BasNet<U> {
        BasNet {
            config: self.config.clone(),
            extractor: self.extractor.iter().map(Conv::cast).collect(),
            generator: self.generator.cast(),
            agnostic: self.agnostic.as_ref().map(Conv::cast),
            head: self.head.iter().map(Conv::cast).collect(),
            classifier: self.classifier.cast(),
        }
    }

    fn layers(&self) -> Vec<(String, ParamGroup, &Conv<T>)> {
        let stage = self.config.generator_stage;
        let mut out = Vec::new();
        for (i, c) in self.extractor.iter().enumerate() {
            let group = if i < stage {
                ParamGroup::Extractor
            } else {
                ParamGroup::SubNetwork
            };
            out.push((format!("extractor.{i}"), group, c));
        }
        out.push(("generator".to_string(), ParamGroup::Generator, &self.generator));
        if let Some(a) = &self.agnostic {
            out.push(("agnostic".to_string(), ParamGroup::Agnostic, a));
        }
        for (i, c) in self.head.iter().enumerate() {
            out.push((format!("head.{i}"), ParamGroup::SubNetwork, c));
        }
        out.push(("classifier".to_string(), ParamGroup::SubNetwork, &self.classifier));
        out
    }

    /// Named parameters in a fixed order.
    pub fn params(&self) -> Vec<(String, ParamGroup, &Tensor<T>)> {
        let mut out = Vec::new();
        for (name, group, c) in self.layers() {
            out.push((format!("{name}.weight"), group, &c.weight));
            if let Some(b) = &c.bias {
                out.push((format!("{name}.bias"), group, b));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, ParamGroup, &mut Tensor<T>)> {
        fn push<'a, T: Real>(
            out: &mut Vec<(String, ParamGroup, &'a mut Tensor<T>)>,
            name: String,
            group: ParamGroup,
            c: &'a mut Conv<T>,
        ) {
            out.push((format!("{name}.weight"), group, &mut c.weight));
            if let Some(b) = c.bias.as_mut() {
                out.push((format!("{name}.bias"), group, b));
            }
        }
        let stage = self.config.generator_stage;
        let mut out = Vec::new();
        for (i, c) in self.extractor.iter_mut().enumerate() {
            let group = if i < stage {
                ParamGroup::Extractor
            } else {
                ParamGroup::SubNetwork
            };
            push(&mut out, format!("extractor.{i}"), group, c);
        }
        push(&mut out, "generator".into(), ParamGroup::Generator, &mut self.generator);
        if let Some(a) = self.agnostic.as_mut() {
            push(&mut out, "agnostic".into(), ParamGroup::Agnostic, a);
        }
        for (i, c) in self.head.iter_mut().enumerate() {
            push(&mut out, format!("head.{i}"), ParamGroup::SubNetwork, c);
        }
        push(&mut out, "classifier".into(), ParamGroup::SubNetwork, &mut self.classifier);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.2.numel()).sum()
    }

    /// Adds every parameter to `g`. With `trainable` false the leaves are
    /// constants and no gradient is tracked.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> NetVars {
        let mut bind = |c: &Conv<T>| {
            let mut leaf = |t: &Tensor<T>| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            };
            let w = leaf(&c.weight);
            let b = c.bias.as_ref().map(&mut leaf);
            (w, b)
        };
        NetVars {
            extractor: self.extractor.iter().map(&mut bind).collect(),
            generator: bind(&self.generator),
            agnostic: self.agnostic.as_ref().map(&mut bind),
            head: self.head.iter().map(&mut bind).collect(),
            classifier: bind(&self.classifier),
        }
    }

    fn conv(&self, g: &mut Graph<T>, c: &Conv<T>, (w, b): (Var, Option<Var>), x: Var) -> Result<Var> {
        g.conv2d(x, w, b, c.stride, c.pad)
    }

    pub fn check_image(&self, image: &Tensor<T>) -> Result<()> {
        let n = self.config.input_size;
        if image.shape() != [3, n, n] {
            return Err(Error::shape(
                "extract_features",
                format!("image must be [3, {n}, {n}], got {:?}", image.shape()),
            ));
        }
        Ok(())
    }

    /// F1: conv + ReLU blocks up to the generator stage.
    pub fn extract_features(&self, g: &mut Graph<T>, vars: &NetVars, image: Var) -> Result<Var> {
        self.check_image(g.value(image))?;
        let mut x = if self.config.center_input {
            g.affine(image, T::from_f64(2.0), T::from_f64(-1.0))
        } else {
            image
        };
        for (c, &v) in self.extractor[..self.config.generator_stage]
            .iter()
            .zip(&vars.extractor)
        {
            x = self.conv(g, c, v, x)?;
            x = g.relu(x);
        }
        Ok(x)
    }

    /// Class-wise foreground prediction maps `[C, h, w]`, each in (0, 1).
    pub fn generate_maps(&self, g: &mut Graph<T>, vars: &NetVars, features: Var) -> Result<Var> {
        let x = self.conv(g, &self.generator, vars.generator, features)?;
        Ok(g.sigmoid(x))
    }

    /// Class-agnostic foreground map `[1, h, w]`, when configured.
    pub fn agnostic_map(&self, g: &mut Graph<T>, vars: &NetVars, features: Var) -> Result<Option<Var>> {
        match (&self.agnostic, vars.agnostic) {
            (Some(c), Some(v)) => {
                let x = self.conv(g, c, v, features)?;
                Ok(Some(g.sigmoid(x)))
            }
            _ => Ok(None),
        }
    }

    /// F2 up to (not including) global average pooling: `[C, h2, w2]`.
    /// With `frozen`, every F2 parameter enters through a stop-gradient edge.
    pub fn sub_network(&self, g: &mut Graph<T>, vars: &NetVars, x: Var, frozen: bool) -> Result<Var> {
        let stage = self.config.generator_stage;
        let mut layers: Vec<(&Conv<T>, (Var, Option<Var>))> = self.extractor[stage..]
            .iter()
            .zip(vars.extractor[stage..].iter().copied())
            .collect();
        layers.extend(self.head.iter().zip(vars.head.iter().copied()));

        let freeze = |g: &mut Graph<T>, (w, b): (Var, Option<Var>)| {
            if frozen {
                (g.stop_gradient(w), b.map(|b| g.stop_gradient(b)))
            } else {
                (w, b)
            }
        };
        let mut x = x;
        for (c, v) in layers {
            let v = freeze(g, v);
            x = self.conv(g, c, v, x)?;
            x = g.relu(x);
        }
        let v = freeze(g, vars.classifier);
        x = self.conv(g, &self.classifier, v, x)?;
        if self.config.legacy_relu {
            x = g.relu(x);
        }
        Ok(x)
    }

    /// Brings a feature-resolution `[1, h, w]` mask to the F2 output resolution.
    fn mask_to_head(&self, g: &mut Graph<T>, mask: Var) -> Result<Var> {
        let factor = self.config.feature_size() / self.config.head_size();
        if factor == 1 {
            Ok(mask)
        } else {
            g.avg_pool(mask, factor)
        }
    }

    /// Activation value: ReLU of the selected logit, or the logit itself when
    /// F2 already ends in a ReLU.
    fn activation(&self, g: &mut Graph<T>, logits: Var, class: usize) -> Result<Var> {
        let v = g.index(logits, class)?;
        Ok(if self.config.legacy_relu { v } else { g.relu(v) })
    }

    /// AMC forward pass for foreground map `m_f` (`[1, h, w]`) and class `target`.
    pub fn amc_forward(
        &self,
        g: &mut Graph<T>,
        vars: &NetVars,
        features: Var,
        m_f: Var,
        target: usize,
    ) -> Result<AmcVars> {
        self.check_class(target)?;
        let m_b = g.one_minus(m_f);
        let f_bkg = g.mask_mul(features, m_b)?;

        let full = self.sub_network(g, vars, features, false)?;
        let y_full = g.global_avg_pool(full)?;
        let bkg = self.sub_network(g, vars, f_bkg, self.config.freeze_background)?;
        let y_bkg = g.global_avg_pool(bkg)?;

        let m_f_head = self.mask_to_head(g, m_f)?;
        let frg = g.mask_mul(full, m_f_head)?;
        let y_frg = g.global_avg_pool(frg)?;

        let s = self.activation(g, y_full, target)?;
        let s_bkg = self.activation(g, y_bkg, target)?;
        Ok(AmcVars {
            y_full,
            y_bkg,
            y_frg,
            s,
            s_bkg,
            m_f,
            m_b,
        })
    }

    /// AMC forward using the generated map of `target` as the foreground map.
    pub fn amc_forward_maps(
        &self,
        g: &mut Graph<T>,
        vars: &NetVars,
        features: Var,
        maps: Var,
        target: usize,
    ) -> Result<AmcVars> {
        self.check_class(target)?;
        let m_f = g.select_channel(maps, target)?;
        self.amc_forward(g, vars, features, m_f, target)
    }

    /// Background activation of class `c` when the background is `1 - agnostic`.
    /// Returns `(S_c, S^b_c)`.
    pub fn class_activations(
        &self,
        g: &mut Graph<T>,
        vars: &NetVars,
        features: Var,
        y_full: Var,
        foreground: Var,
        class: usize,
    ) -> Result<(Var, Var)> {
        self.check_class(class)?;
        let m_b = g.one_minus(foreground);
        let f_bkg = g.mask_mul(features, m_b)?;
        let bkg = self.sub_network(g, vars, f_bkg, self.config.freeze_background)?;
        let y_bkg = g.global_avg_pool(bkg)?;
        Ok((
            self.activation(g, y_full, class)?,
            self.activation(g, y_bkg, class)?,
        ))
    }

    pub fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.config.num_classes {
            return Err(Error::InvalidArgument(format!(
                "class {class} out of range for {} classes",
                self.config.num_classes
            )));
        }
        Ok(())
    }

    /// Top-k inference. The fused map is the mean of the maps of the `k`
    /// most probable classes; with `force_class`, that class replaces the
    /// k-th pick when it is not already among them.
    pub fn infer(&self, image: &Tensor<T>, k: usize, force_class: Option<usize>) -> Result<Inference<T>> {
        let c = self.config.num_classes;
        if k == 0 || k > c {
            return Err(Error::InvalidArgument(format!("k must be in 1..={c}, got {k}")));
        }
        if let Some(f) = force_class {
            self.check_class(f)?;
        }
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = g.constant(image.clone());
        let feat = self.extract_features(&mut g, &vars, x)?;
        let maps = self.generate_maps(&mut g, &vars, feat)?;
        let agnostic = self.agnostic_map(&mut g, &vars, feat)?;
        let full = self.sub_network(&mut g, &vars, feat, false)?;
        let y = g.global_avg_pool(full)?;

        let logits = g.value(y).data().to_vec();
        let mut selected = rank_classes(&logits);
        selected.truncate(k);
        if let Some(f) = force_class {
            if !selected.contains(&f) {
                selected[k - 1] = f;
            }
        }
        let maps = g.value(maps).clone();
        let fused = mean_of_channels(&maps, &selected);
        Ok(Inference {
            logits,
            maps,
            fused,
            selected,
            agnostic: agnostic.map(|a| g.value(a).clone()),
        })
    }
}

/// Class indices ordered by decreasing logit (ties: lower index first).
/// Softmax is monotone, so this is also the probability ranking.
pub fn rank_classes<T: Real>(logits: &[T]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| {
        logits[b]
            .partial_cmp(&logits[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

/// Pixelwise mean of the listed channels. Accumulates in f64 so that the
/// mean of identical maps reproduces the map exactly.
pub fn mean_of_channels<T: Real>(maps: &Tensor<T>, channels: &[usize]) -> Tensor<T> {
    let (_, h, w) = maps.chw().expect("maps are [C, h, w]");
    let plane = h * w;
    let mut acc = vec![0f64; plane];
    for &c in channels {
        for (a, &v) in acc.iter_mut().zip(&maps.data()[c * plane..(c + 1) * plane]) {
            *a += v.as_f64();
        }
    }
    let n = channels.len() as f64;
    Tensor::new(vec![1, h, w], acc.into_iter().map(|a| T::from_f64(a / n)).collect())
        .expect("consistent shape")
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BASCKPT1";

impl BasNet<f32> {
    pub fn encode_checkpoint(&self) -> Vec<u8> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        for (name, _, t) in self.params() {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode_checkpoint()).map_err(|e| Error::io(path, e))
    }

    /// Loads parameters for a network of the given topology. Unknown names,
    /// missing names, duplicates and shape mismatches are rejected.
    pub fn decode_checkpoint(config: ModelConfig, bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        let mut cur = Cursor {
            bytes,
            pos: 0,
            origin,
        };
        if cur.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::format(origin, "bad magic, expected BASCKPT1"));
        }
        let mut params = net.params_mut();
        let mut seen = vec![false; params.len()];
        while !cur.is_done() {
            let len = cur.u16()? as usize;
            let name = std::str::from_utf8(cur.take(len)?)
                .map_err(|_| Error::format(origin, "parameter name is not UTF-8"))?
                .to_string();
            let rank = cur.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u32()? as usize);
            }
            let Some(pos) = params.iter().position(|p| p.0 == name) else {
                return Err(Error::format(origin, format!("unknown parameter {name:?}")));
            };
            if seen[pos] {
                return Err(Error::format(origin, format!("duplicate parameter {name:?}")));
            }
            let target = &mut params[pos].2;
            if target.shape() != shape.as_slice() {
                return Err(Error::format(
                    origin,
                    format!(
                        "parameter {name:?} has shape {shape:?}, model expects {:?}",
                        target.shape()
                    ),
                ));
            }
            let raw = cur.take(4 * target.numel())?;
            for (d, c) in target.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
                *d = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            }
            seen[pos] = true;
        }
        if let Some(pos) = seen.iter().position(|s| !s) {
            return Err(Error::format(
                origin,
                format!("missing parameter {:?}", params[pos].0),
            ));
        }
        drop(params);
        Ok(net)
    }

    pub fn load_checkpoint(config: ModelConfig, path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_checkpoint(config, &bytes, path)
    }
}
