use std::sync::atomic::{AtomicU32, Ordering};

use super::{Real, Tensor};
use crate::error::{Error, Result};

static NEXT_GRAPH_ID: AtomicU32 = AtomicU32::new(0);

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u32,
    index: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.index as usize
    }
}

#[derive(Clone, Copy, Debug)]
struct Edge {
    src: usize,
    /// Gradients never cross a stop-marked edge.
    stop: bool,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Identity,
    Conv2d {
        stride: usize,
        pad: usize,
        kernel: usize,
        in_shape: (usize, usize, usize),
        cols: Vec<T>,
    },
    Relu,
    Sigmoid,
    GlobalAvgPool,
    MaskMul,
    OneMinus,
    Affine(T),
    SelectChannel(usize),
    AvgPool(usize),
    Index(usize),
    Mean,
    Sum,
    Add,
    Mul,
    WeightedSum(Vec<T>),
    SoftmaxCe {
        target: usize,
        probs: Vec<T>,
    },
    MultiLabelCe {
        positives: Vec<usize>,
    },
    ClampedRatio {
        eps: T,
        clamped: bool,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    inputs: Vec<Edge>,
    needs_grad: bool,
}

/// Execution record for one forward pass. Nodes are appended in execution
/// order, so every node's inputs precede it.
#[derive(Debug)]
pub struct Graph<T: Real = f32> {
    id: u32,
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss w.r.t. every node that required one.
#[derive(Debug)]
pub struct Gradients<T> {
    graph: u32,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get(v.index()).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of length `len` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<T> {
        self.get(v)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![T::zero(); len])
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.graph, self.id, "variable belongs to a different graph");
        v.index()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[self.idx(v)].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: Vec<Edge>) -> Var {
        debug_assert!(
            !matches!(op, Op::Leaf) || inputs.is_empty(),
            "leaf with inputs"
        );
        debug_assert!(value.is_finite(), "non-finite output from {:?}", op_name(&op));
        let needs_grad = match op {
            Op::Leaf => value.requires_grad,
            _ => inputs
                .iter()
                .any(|e| !e.stop && self.nodes[e.src].needs_grad),
        };
        let index = self.nodes.len() as u32;
        self.nodes.push(Node {
            value,
            op,
            inputs,
            needs_grad,
        });
        Var {
            graph: self.id,
            index,
        }
    }

    fn edges(&self, vars: &[Var]) -> Vec<Edge> {
        vars.iter()
            .map(|&v| Edge {
                src: self.idx(v),
                stop: false,
            })
            .collect()
    }

    /// Adds a leaf. It receives a gradient iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, Vec::new())
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor<T>) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    /// Leaf that always receives a gradient.
    pub fn param(&mut self, mut t: Tensor<T>) -> Var {
        t.requires_grad = true;
        self.leaf(t)
    }

    /// Identity in the forward pass; the edge into it is stop-marked.
    pub fn stop_gradient(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        let src = self.idx(v);
        self.push(value, Op::Identity, vec![Edge { src, stop: true }])
    }

    /// Cross-correlation of a `[C_in, H, W]` input with `[C_out, C_in, k, k]`
    /// weights, optionally adding a `[C_out]` bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let (c_in, h, wd) = x
            .chw()
            .ok_or_else(|| Error::shape("conv2d", format!("input rank {} != 3", x.rank())))?;
        let (c_out, k) = match w.shape() {
            &[co, ci, kh, kw] => {
                if ci != c_in {
                    return Err(Error::shape(
                        "conv2d",
                        format!("input channels: weight expects {ci}, input has {c_in}"),
                    ));
                }
                if kh != kw {
                    return Err(Error::shape(
                        "conv2d",
                        format!("kernel must be square, got {kh}x{kw}"),
                    ));
                }
                (co, kh)
            }
            s => {
                return Err(Error::shape(
                    "conv2d",
                    format!("weight rank {} != 4", s.len()),
                ))
            }
        };
        if k % 2 == 0 {
            return Err(Error::shape("conv2d", format!("kernel size {k} is even")));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::shape(
                "conv2d",
                format!("height/width {h}x{wd} with pad {pad} smaller than kernel {k}"),
            ));
        }
        if let Some(b) = bias {
            let bs = self.value(b).shape();
            if bs != [c_out] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias length: expected [{c_out}], got {bs:?}"),
                ));
            }
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let p = ho * wo;
        let r = c_in * k * k;

        let cols = im2col(x.data(), (c_in, h, wd), k, stride, pad, ho, wo);
        let wdat = w.data();
        let mut out = vec![T::zero(); c_out * p];
        for co in 0..c_out {
            let orow = &mut out[co * p..(co + 1) * p];
            if let Some(b) = bias {
                let bv = self.value(b).data()[co];
                orow.iter_mut().for_each(|o| *o = bv);
            }
            for ri in 0..r {
                let wv = wdat[co * r + ri];
                let crow = &cols[ri * p..(ri + 1) * p];
                for (o, &c) in orow.iter_mut().zip(crow) {
                    *o += wv * c;
                }
            }
        }
        let value = Tensor::new(vec![c_out, ho, wo], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        let edges = self.edges(&inputs);
        Ok(self.push(
            value,
            Op::Conv2d {
                stride,
                pad,
                kernel: k,
                in_shape: (c_in, h, wd),
                cols,
            },
            edges,
        ))
    }

    pub fn relu(&mut self, v: Var) -> Var {
        let value = self.value(v).map(|x| if x > T::zero() { x } else { T::zero() });
        let edges = self.edges(&[v]);
        self.push(value, Op::Relu, edges)
    }

    /// Logistic function, clamped so that outputs stay strictly inside (0, 1)
    /// at the working precision.
    pub fn sigmoid(&mut self, v: Var) -> Var {
        let value = self.value(v).map(sigmoid);
        let edges = self.edges(&[v]);
        self.push(value, Op::Sigmoid, edges)
    }

    /// `[C, H, W] -> [C]` channel means.
    pub fn global_avg_pool(&mut self, v: Var) -> Result<Var> {
        let t = self.value(v);
        let (c, h, w) = t
            .chw()
            .ok_or_else(|| Error::shape("global_avg_pool", format!("rank {} != 3", t.rank())))?;
        let plane = h * w;
        let inv = T::one() / T::from_f64(plane as f64);
        let data = (0..c)
            .map(|ci| {
                let mut acc = T::zero();
                for &x in &t.data()[ci * plane..(ci + 1) * plane] {
                    acc += x;
                }
                acc * inv
            })
            .collect();
        let value = Tensor::new(vec![c], data)?;
        let edges = self.edges(&[v]);
        Ok(self.push(value, Op::GlobalAvgPool, edges))
    }

    /// Broadcast product of `[C, H, W]` features with a `[1, H, W]` mask.
    pub fn mask_mul(&mut self, features: Var, mask: Var) -> Result<Var> {
        let f = self.value(features);
        let m = self.value(mask);
        let (c, h, w) = f
            .chw()
            .ok_or_else(|| Error::shape("mask_mul", format!("features rank {} != 3", f.rank())))?;
        match m.chw() {
            Some((1, mh, mw)) if mh == h && mw == w => {}
            _ => {
                return Err(Error::shape(
                    "mask_mul",
                    format!("mask {:?} does not match spatial size {h}x{w}", m.shape()),
                ))
            }
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(c * plane);
        for ci in 0..c {
            let frow = &f.data()[ci * plane..(ci + 1) * plane];
            data.extend(frow.iter().zip(m.data()).map(|(&a, &b)| a * b));
        }
        let value = Tensor::new(vec![c, h, w], data)?;
        let edges = self.edges(&[features, mask]);
        Ok(self.push(value, Op::MaskMul, edges))
    }

    /// Elementwise `1 - x`.
    pub fn one_minus(&mut self, v: Var) -> Var {
        let value = self.value(v).map(|x| T::one() - x);
        let edges = self.edges(&[v]);
        self.push(value, Op::OneMinus, edges)
    }

    /// `scale * v + shift`, elementwise.
    pub fn affine(&mut self, v: Var, scale: T, shift: T) -> Var {
        let value = self.value(v).map(|x| scale * x + shift);
        let edges = self.edges(&[v]);
        self.push(value, Op::Affine(scale), edges)
    }

    /// Channel `c` of a `[C, H, W]` tensor as `[1, H, W]`.
    pub fn select_channel(&mut self, v: Var, c: usize) -> Result<Var> {
        let t = self.value(v);
        let (nc, _, _) = t
            .chw()
            .ok_or_else(|| Error::shape("select_channel", format!("rank {} != 3", t.rank())))?;
        if c >= nc {
            return Err(Error::InvalidArgument(format!(
                "channel {c} out of range for {nc} channels"
            )));
        }
        let value = t.channel(c);
        let edges = self.edges(&[v]);
        Ok(self.push(value, Op::SelectChannel(c), edges))
    }

    /// Non-overlapping `factor x factor` mean pooling of a `[C, H, W]` tensor.
    /// Used to bring masks to a coarser resolution, not as a network layer.
    pub fn avg_pool(&mut self, v: Var, factor: usize) -> Result<Var> {
        let t = self.value(v);
        let (c, h, w) = t
            .chw()
            .ok_or_else(|| Error::shape("avg_pool", format!("rank {} != 3", t.rank())))?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::shape(
                "avg_pool",
                format!("size {h}x{w} not divisible by factor {factor}"),
            ));
        }
        let (ho, wo) = (h / factor, w / factor);
        let inv = T::one() / T::from_f64((factor * factor) as f64);
        let mut data = vec![T::zero(); c * ho * wo];
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data[(ci * ho + y / factor) * wo + x / factor] += t.data()[(ci * h + y) * w + x];
                }
            }
        }
        data.iter_mut().for_each(|d| *d *= inv);
        let value = Tensor::new(vec![c, ho, wo], data)?;
        let edges = self.edges(&[v]);
        Ok(self.push(value, Op::AvgPool(factor), edges))
    }

    /// Element `i` of a vector as a scalar.
    pub fn index(&mut self, v: Var, i: usize) -> Result<Var> {
        let t = self.value(v);
        if t.rank() != 1 || i >= t.numel() {
            return Err(Error::InvalidArgument(format!(
                "index {i} out of range for shape {:?}",
                t.shape()
            )));
        }
        let value = Tensor::scalar(t.data()[i]);
        let edges = self.edges(&[v]);
        Ok(self.push(value, Op::Index(i), edges))
    }

    pub fn mean(&mut self, v: Var) -> Var {
        let t = self.value(v);
        let mut acc = T::zero();
        for &x in t.data() {
            acc += x;
        }
        let value = Tensor::scalar(acc / T::from_f64(t.numel().max(1) as f64));
        let edges = self.edges(&[v]);
        self.push(value, Op::Mean, edges)
    }

    pub fn sum(&mut self, v: Var) -> Var {
        let mut acc = T::zero();
        for &x in self.value(v).data() {
            acc += x;
        }
        let edges = self.edges(&[v]);
        self.push(Tensor::scalar(acc), Op::Sum, edges)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let edges = self.edges(&[a, b]);
        Ok(self.push(value, Op::Add, edges))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let edges = self.edges(&[a, b]);
        Ok(self.push(value, Op::Mul, edges))
    }

    /// `sum_i w_i * x_i` over same-shaped terms, accumulated left to right.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let Some(&(first, _)) = terms.first() else {
            return Err(Error::InvalidArgument("weighted_sum of no terms".into()));
        };
        for &(v, _) in &terms[1..] {
            self.same_shape("weighted_sum", first, v)?;
        }
        let shape = self.value(first).shape().to_vec();
        let mut data = vec![T::zero(); self.value(first).numel()];
        for &(v, w) in terms {
            for (o, &x) in data.iter_mut().zip(self.value(v).data()) {
                *o += w * x;
            }
        }
        let value = Tensor::new(shape, data)?;
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let edges = self.edges(&vars);
        let weights = terms.iter().map(|t| t.1).collect();
        Ok(self.push(value, Op::WeightedSum(weights), edges))
    }

    /// Max-shifted softmax followed by the negative log-likelihood of `target`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 1 || t.numel() < 2 {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits must be a vector of >= 2 classes, got {:?}", t.shape()),
            ));
        }
        if target >= t.numel() {
            return Err(Error::InvalidArgument(format!(
                "target class {target} out of range for {} classes",
                t.numel()
            )));
        }
        let x = t.data();
        let (m, ln_acc) = lse_parts(x.iter().copied());
        let probs: Vec<T> = x.iter().map(|&v| (v - m - ln_acc).exp()).collect();
        let loss = ln_acc + (m - x[target]);
        let edges = self.edges(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe { target, probs },
            edges,
        ))
    }

    /// Multi-label cross-entropy where each positive class competes only
    /// against the negative classes and itself.
    pub fn multilabel_cross_entropy(&mut self, logits: Var, positives: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 1 {
            return Err(Error::shape(
                "multilabel_cross_entropy",
                format!("logits must be a vector, got {:?}", t.shape()),
            ));
        }
        let c = t.numel();
        let positives = normalize_positives(positives, c)?;
        let x = t.data();
        let negatives: Vec<T> = (0..c)
            .filter(|j| positives.binary_search(j).is_err())
            .map(|j| x[j])
            .collect();
        let mut loss = T::zero();
        for &i in &positives {
            let (m, ln_acc) = lse_parts(negatives.iter().copied().chain(std::iter::once(x[i])));
            loss += ln_acc + (m - x[i]);
        }
        let edges = self.edges(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::MultiLabelCe { positives },
            edges,
        ))
    }

    /// `min(1, num / (den + eps))` for scalars. The clamped region has zero gradient.
    pub fn clamped_ratio(&mut self, num: Var, den: Var, eps: T) -> Result<Var> {
        let (n, d) = (self.value(num), self.value(den));
        if n.numel() != 1 || d.numel() != 1 {
            return Err(Error::shape(
                "clamped_ratio",
                format!("operands must be scalars, got {:?} and {:?}", n.shape(), d.shape()),
            ));
        }
        let raw = n.item() / (d.item() + eps);
        let clamped = raw > T::one();
        let out = if clamped { T::one() } else { raw };
        let edges = self.edges(&[num, den]);
        Ok(self.push(Tensor::scalar(out), Op::ClampedRatio { eps, clamped }, edges))
    }

    /// Reverse-mode accumulation from a scalar `loss`. Nodes are visited in
    /// reverse execution order and each node's input contributions are added
    /// in input order, so the result is bit-reproducible.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if loss.graph != self.id || loss.index() >= self.nodes.len() {
            return Err(Error::InvalidArgument(
                "loss variable is not a node of this graph".into(),
            ));
        }
        let root = &self.nodes[loss.index()];
        if root.value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", root.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.index()] = Some(vec![T::one()]);

        for i in (0..=loss.index()).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if node.needs_grad {
                let contribs = self.input_grads(node, &gout);
                for (edge, g) in node.inputs.iter().zip(contribs) {
                    let Some(g) = g else { continue };
                    if edge.stop || !self.nodes[edge.src].needs_grad {
                        continue;
                    }
                    match &mut grads[edge.src] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                        slot => *slot = Some(g),
                    }
                }
            }
            grads[i] = Some(gout);
        }
        // Only nodes that can carry a gradient report one.
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.needs_grad {
                *g = None;
            }
        }
        Ok(Gradients {
            graph: self.id,
            grads,
        })
    }

    fn wants(&self, node: &Node<T>, k: usize) -> bool {
        let e = node.inputs[k];
        !e.stop && self.nodes[e.src].needs_grad
    }

    fn input_grads(&self, node: &Node<T>, gout: &[T]) -> Vec<Option<Vec<T>>> {
        let val = |k: usize| &self.nodes[node.inputs[k].src].value;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Identity => vec![Some(gout.to_vec())],
            Op::Relu => {
                let x = val(0).data();
                vec![Some(
                    x.iter()
                        .zip(gout)
                        .map(|(&xi, &g)| if xi > T::zero() { g } else { T::zero() })
                        .collect(),
                )]
            }
            Op::Sigmoid => {
                let y = node.value.data();
                vec![Some(
                    y.iter()
                        .zip(gout)
                        .map(|(&yi, &g)| g * yi * (T::one() - yi))
                        .collect(),
                )]
            }
            Op::GlobalAvgPool => {
                let (c, h, w) = val(0).chw().expect("validated in forward");
                let plane = h * w;
                let inv = T::one() / T::from_f64(plane as f64);
                let mut g = Vec::with_capacity(c * plane);
                for &go in gout.iter().take(c) {
                    g.extend(std::iter::repeat_n(go * inv, plane));
                }
                vec![Some(g)]
            }
            Op::MaskMul => {
                let f = val(0).data();
                let m = val(1).data();
                let plane = m.len();
                let c = f.len() / plane;
                let gf = self.wants(node, 0).then(|| {
                    let mut g = Vec::with_capacity(f.len());
                    for ci in 0..c {
                        let grow = &gout[ci * plane..(ci + 1) * plane];
                        g.extend(grow.iter().zip(m).map(|(&a, &b)| a * b));
                    }
                    g
                });
                let gm = self.wants(node, 1).then(|| {
                    let mut g = vec![T::zero(); plane];
                    for ci in 0..c {
                        let grow = &gout[ci * plane..(ci + 1) * plane];
                        let frow = &f[ci * plane..(ci + 1) * plane];
                        for ((o, &a), &b) in g.iter_mut().zip(grow).zip(frow) {
                            *o += a * b;
                        }
                    }
                    g
                });
                vec![gf, gm]
            }
            Op::OneMinus => vec![Some(gout.iter().map(|&g| -g).collect())],
            Op::Affine(a) => vec![Some(gout.iter().map(|&g| *a * g).collect())],
            Op::SelectChannel(c) => {
                let n = val(0).numel();
                let plane = gout.len();
                let mut g = vec![T::zero(); n];
                g[c * plane..(c + 1) * plane].copy_from_slice(gout);
                vec![Some(g)]
            }
            Op::AvgPool(factor) => {
                let (c, h, w) = val(0).chw().expect("validated in forward");
                let (ho, wo) = (h / factor, w / factor);
                let inv = T::one() / T::from_f64((factor * factor) as f64);
                let mut g = vec![T::zero(); c * h * w];
                for ci in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            g[(ci * h + y) * w + x] = gout[(ci * ho + y / factor) * wo + x / factor] * inv;
                        }
                    }
                }
                vec![Some(g)]
            }
            Op::Index(i) => {
                let mut g = vec![T::zero(); val(0).numel()];
                g[*i] = gout[0];
                vec![Some(g)]
            }
            Op::Mean => {
                let n = val(0).numel();
                let v = gout[0] / T::from_f64(n.max(1) as f64);
                vec![Some(vec![v; n])]
            }
            Op::Sum => vec![Some(vec![gout[0]; val(0).numel()])],
            Op::Add => vec![Some(gout.to_vec()), Some(gout.to_vec())],
            Op::Mul => {
                let (a, b) = (val(0).data(), val(1).data());
                vec![
                    Some(gout.iter().zip(b).map(|(&g, &y)| g * y).collect()),
                    Some(gout.iter().zip(a).map(|(&g, &x)| g * x).collect()),
                ]
            }
            Op::WeightedSum(ws) => ws
                .iter()
                .map(|&w| Some(gout.iter().map(|&g| g * w).collect()))
                .collect(),
            Op::SoftmaxCe { target, probs } => {
                let mut g: Vec<T> = probs.iter().map(|&p| p * gout[0]).collect();
                g[*target] -= gout[0];
                vec![Some(g)]
            }
            Op::MultiLabelCe { positives } => {
                let x = val(0).data();
                let c = x.len();
                let is_neg: Vec<bool> = (0..c).map(|j| positives.binary_search(&j).is_err()).collect();
                let mut g = vec![T::zero(); c];
                for &i in positives {
                    let lse = log_sum_exp(
                        (0..c)
                            .filter(|&j| is_neg[j])
                            .map(|j| x[j])
                            .chain(std::iter::once(x[i])),
                    );
                    for j in 0..c {
                        if is_neg[j] {
                            g[j] += (x[j] - lse).exp() * gout[0];
                        }
                    }
                    g[i] += ((x[i] - lse).exp() - T::one()) * gout[0];
                }
                vec![Some(g)]
            }
            Op::ClampedRatio { eps, clamped } => {
                if *clamped {
                    return vec![Some(vec![T::zero()]), Some(vec![T::zero()])];
                }
                let n = val(0).item();
                let d = val(1).item() + *eps;
                vec![
                    Some(vec![gout[0] / d]),
                    Some(vec![-gout[0] * n / (d * d)]),
                ]
            }
            Op::Conv2d {
                stride,
                pad,
                kernel,
                in_shape,
                cols,
            } => {
                let w = val(1).data();
                let (c_out, ho, wo) = node.value.chw().expect("conv output is spatial");
                let p = ho * wo;
                let r = cols.len() / p;
                let gx = self.wants(node, 0).then(|| {
                    let mut dcols = vec![T::zero(); r * p];
                    for ri in 0..r {
                        let drow = &mut dcols[ri * p..(ri + 1) * p];
                        for co in 0..c_out {
                            let wv = w[co * r + ri];
                            let grow = &gout[co * p..(co + 1) * p];
                            for (d, &g) in drow.iter_mut().zip(grow) {
                                *d += wv * g;
                            }
                        }
                    }
                    col2im(&dcols, *in_shape, *kernel, *stride, *pad, ho, wo)
                });
                let gw = self.wants(node, 1).then(|| {
                    let mut g = vec![T::zero(); c_out * r];
                    for co in 0..c_out {
                        let grow = &gout[co * p..(co + 1) * p];
                        for ri in 0..r {
                            let crow = &cols[ri * p..(ri + 1) * p];
                            let mut acc = T::zero();
                            for (&a, &b) in grow.iter().zip(crow) {
                                acc += a * b;
                            }
                            g[co * r + ri] = acc;
                        }
                    }
                    g
                });
                let mut out = vec![gx, gw];
                if node.inputs.len() == 3 {
                    out.push(self.wants(node, 2).then(|| {
                        (0..c_out)
                            .map(|co| {
                                let mut acc = T::zero();
                                for &g in &gout[co * p..(co + 1) * p] {
                                    acc += g;
                                }
                                acc
                            })
                            .collect()
                    }));
                }
                out
            }
        }
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Identity => "identity",
        Op::Conv2d { .. } => "conv2d",
        Op::Relu => "relu",
        Op::Sigmoid => "sigmoid",
        Op::GlobalAvgPool => "global_avg_pool",
        Op::MaskMul => "mask_mul",
        Op::OneMinus => "one_minus",
        Op::Affine(_) => "affine",
        Op::SelectChannel(_) => "select_channel",
        Op::AvgPool(_) => "avg_pool",
        Op::Index(_) => "index",
        Op::Mean => "mean",
        Op::Sum => "sum",
        Op::Add => "add",
        Op::Mul => "mul",
        Op::WeightedSum(_) => "weighted_sum",
        Op::SoftmaxCe { .. } => "softmax_cross_entropy",
        Op::MultiLabelCe { .. } => "multilabel_cross_entropy",
        Op::ClampedRatio { .. } => "clamped_ratio",
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    let y = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    let hi = T::one() - T::epsilon() / T::from_f64(2.0);
    y.max(T::min_positive_value()).min(hi)
}

pub(crate) fn log_sum_exp<T: Real>(xs: impl Iterator<Item = T> + Clone) -> T {
    let (m, ln_acc) = lse_parts(xs);
    m + ln_acc
}

/// `(max, ln sum exp(x - max))`, so that `lse - x_i = ln_acc + (max - x_i)`
/// is exact when `x_i` is the maximum.
pub(crate) fn lse_parts<T: Real>(xs: impl Iterator<Item = T> + Clone) -> (T, T) {
    let m = xs.clone().fold(T::neg_infinity(), T::max);
    let mut acc = T::zero();
    for x in xs {
        acc += (x - m).exp();
    }
    (m, acc.ln())
}

pub(crate) fn normalize_positives(positives: &[usize], classes: usize) -> Result<Vec<usize>> {
    if positives.is_empty() {
        return Err(Error::InvalidArgument("positive class set is empty".into()));
    }
    let mut p = positives.to_vec();
    p.sort_unstable();
    p.dedup();
    if let Some(&bad) = p.iter().find(|&&c| c >= classes) {
        return Err(Error::InvalidArgument(format!(
            "positive class {bad} out of range for {classes} classes"
        )));
    }
    Ok(p)
}

fn im2col<T: Real>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let p = ho * wo;
    if k == 1 && stride == 1 && pad == 0 {
        return x.to_vec();
    }
    let mut cols = vec![T::zero(); c * k * k * p];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(
    cols: &[T],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let p = ho * wo;
    if k == 1 && stride == 1 && pad == 0 {
        return cols.to_vec();
    }
    let mut x = vec![T::zero(); c * h * w];
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel_on_single_pixel() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(t(&[1, 1, 1], &[2.0]));
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = g.constant(t(&[1, 1, 3, 3], &k));
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        assert_eq!(g.value(y).data(), &[2.0]);
    }

    #[test]
    fn conv_zero_kernel_gives_zeros() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(t(&[2, 3, 3], &[1.5; 18]));
        let w = g.constant(Tensor::zeros(&[4, 2, 3, 3]));
        let y = g.conv2d(x, w, None, 2, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[4, 2, 2]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_ones_sum() {
        // 9 products of 1 * 1.
        let mut g = Graph::<f32>::new();
        let x = g.constant(t(&[1, 3, 3], &[1.0; 9]));
        let w = g.constant(t(&[1, 1, 3, 3], &[1.0; 9]));
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &[9.0]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[2, 4, 4]));
        let w = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let err = g.conv2d(x, w, None, 1, 1).unwrap_err().to_string();
        assert!(err.contains("input channels"), "{err}");
    }

    #[test]
    fn conv_bias_adds_per_channel() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 2]));
        let w = g.constant(Tensor::zeros(&[2, 1, 1, 1]));
        let b = g.constant(t(&[2], &[1.0, -3.0]));
        let y = g.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 1.0, 1.0, 1.0, -3.0, -3.0, -3.0, -3.0]);
    }

    #[test]
    fn relu_values_and_grad() {
        let mut g = Graph::<f32>::new();
        let x = g.param(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);

        let mut g = Graph::<f32>::new();
        let x = g.param(t(&[2], &[-1.0, 2.0]));
        let y = g.relu(x);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn sigmoid_values_and_grad() {
        let mut g = Graph::<f32>::new();
        let x = g.param(t(&[3], &[0.0, 100.0, -200.0]));
        let y = g.sigmoid(x);
        let v = g.value(y).data();
        assert_eq!(v[0], 0.5);
        assert!(v[1] > 1.0 - 1e-6 && v[1] < 1.0);
        assert!(v[2] > 0.0);

        let mut g = Graph::<f32>::new();
        let x = g.param(t(&[1], &[0.0]));
        let y = g.sigmoid(x);
        let s = g.sum(y);
        assert_eq!(g.backward(s).unwrap().get(x).unwrap(), &[0.25]);
    }

    #[test]
    fn gap_examples() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.global_avg_pool(x).unwrap();
        assert_eq!(g.value(y).data(), &[2.5]);
        let x = g.constant(t(&[2, 1, 1], &[0.0, 7.0]));
        let y = g.global_avg_pool(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 7.0]);
    }

    #[test]
    fn mask_mul_examples() {
        let mut g = Graph::<f32>::new();
        let f = g.constant(t(&[1, 1, 2], &[2.0, 4.0]));
        let m = g.constant(t(&[1, 1, 2], &[0.5, 1.0]));
        let y = g.mask_mul(f, m).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 4.0]);
        let bad = g.constant(Tensor::zeros(&[1, 2, 1]));
        assert!(g.mask_mul(f, bad).is_err());
    }

    #[test]
    fn softmax_ce_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_vec(vec![0.3; 4]));
        let l = g.softmax_cross_entropy(x, 2).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);

        let x = g.constant(Tensor::from_vec(vec![0.0, 1000.0, 0.0]));
        let l = g.softmax_cross_entropy(x, 1).unwrap();
        assert!(g.value(l).item().abs() < 1e-12);

        // -ln(e^1 / (e^1 + e^2)) = ln(1 + e)
        let x = g.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let l = g.softmax_cross_entropy(x, 0).unwrap();
        let expected = (1.0 + std::f64::consts::E).ln();
        assert!((g.value(l).item() - expected).abs() < 1e-12);
        assert!((expected - 1.3133).abs() < 1e-4);

        assert!(g.softmax_cross_entropy(x, 2).is_err());
    }

    #[test]
    fn backward_sum_and_foreign_loss() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let s = g.sum(x);
        assert_eq!(g.backward(s).unwrap().get(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut other = Graph::<f32>::new();
        let y = other.param(Tensor::scalar(1.0));
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::from_vec(vec![1.0, -2.0]));
        let stopped = g.stop_gradient(x);
        let sq = g.mul(stopped, stopped).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get_or_zeros(x, 2), vec![0.0, 0.0]);
    }
}
