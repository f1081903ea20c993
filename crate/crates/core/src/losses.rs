//! Objective terms of the activation map constraint and the two total losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BasNet, NetVars};
use crate::tensor::{Graph, Real, Var};

/// The conventional tiny denominator guard.
pub const EPS_DEFAULT: f64 = 1e-8;
/// The literal reading of the guard, `e^-8`.
pub const EPS_NATURAL: f64 = 3.354_626_279_025_118_4e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::balanced(0.5, 1.0)
    }
}

impl LossWeights {
    /// `beta = alpha + lambda`, the default weighting policy.
    pub fn balanced(alpha: f64, lambda: f64) -> Self {
        Self {
            alpha,
            beta: alpha + lambda,
            lambda,
            epsilon: EPS_DEFAULT,
        }
    }

    /// Weights used for the VOC-like segmentation setting.
    pub fn voc() -> Self {
        Self::balanced(0.2, 1.0)
    }

    /// Weights used for the COCO-like segmentation setting.
    pub fn coco() -> Self {
        Self::balanced(0.5, 1.0)
    }

    /// Classification loss only.
    pub fn classification_only() -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
            lambda: 0.0,
            epsilon: EPS_DEFAULT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda", self.lambda),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "train.weights.{k} must be finite and non-negative, got {v}"
                )));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "train.weights.epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Scalar values of one evaluation of the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    /// `L_cls` for localization, `L_mcls` for segmentation.
    pub l_cls: f64,
    pub l_frg: f64,
    pub l_ac: f64,
    pub l_bas: f64,
    pub total: f64,
}

/// Graph handles of the four terms.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub cls: Var,
    pub frg: Var,
    pub ac: Var,
    pub bas: Var,
}

impl LossTerms {
    pub fn bundle<T: Real>(&self, g: &Graph<T>, total: Var) -> LossBundle {
        let v = |x: Var| g.value(x).item().as_f64();
        LossBundle {
            l_cls: v(self.cls),
            l_frg: v(self.frg),
            l_ac: v(self.ac),
            l_bas: v(self.bas),
            total: v(total),
        }
    }
}

/// `min(1, S^b / (S + eps))`.
pub fn l_bas<T: Real>(g: &mut Graph<T>, s: Var, s_bkg: Var, eps: f64) -> Result<Var> {
    let (sv, bv) = (g.value(s).item(), g.value(s_bkg).item());
    if sv < T::zero() || bv < T::zero() {
        return Err(Error::InvalidArgument(format!(
            "activation values must be non-negative, got S={sv:?}, S^b={bv:?}"
        )));
    }
    g.clamped_ratio(s_bkg, s, T::from_f64(eps))
}

/// Mean of the foreground map.
pub fn l_ac<T: Real>(g: &mut Graph<T>, m_f: Var) -> Var {
    g.mean(m_f)
}

pub fn l_frg<T: Real>(g: &mut Graph<T>, y_frg: Var, target: usize) -> Result<Var> {
    g.softmax_cross_entropy(y_frg, target)
}

pub fn l_cls<T: Real>(g: &mut Graph<T>, y_full: Var, target: usize) -> Result<Var> {
    g.softmax_cross_entropy(y_full, target)
}

/// Multi-label loss: each positive competes against the negatives and itself.
pub fn l_mcls<T: Real>(g: &mut Graph<T>, y_full: Var, positives: &[usize]) -> Result<Var> {
    g.multilabel_cross_entropy(y_full, positives)
}

/// Sum over `positives` of `L_bas` with the background taken as `1 - agnostic`.
pub fn l_bas_agnostic<T: Real>(
    net: &BasNet<T>,
    g: &mut Graph<T>,
    vars: &NetVars,
    features: Var,
    y_full: Var,
    agnostic: Var,
    positives: &[usize],
    eps: f64,
) -> Result<Var> {
    if positives.is_empty() {
        return Err(Error::InvalidArgument("positive class set is empty".into()));
    }
    let mut terms = Vec::with_capacity(positives.len());
    for &c in positives {
        let (s, s_bkg) = net.class_activations(g, vars, features, y_full, agnostic, c)?;
        terms.push((l_bas(g, s, s_bkg, eps)?, T::one()));
    }
    g.weighted_sum(&terms)
}

/// `L_cls + alpha L_frg + beta L_ac + lambda L_bas`.
pub fn total_wsol<T: Real>(g: &mut Graph<T>, terms: &LossTerms, w: &LossWeights) -> Result<Var> {
    weighted_total(g, terms, w)
}

/// `L_mcls + alpha L_frg + beta L_ac + lambda L_bas`; `terms.cls` holds `L_mcls`.
pub fn total_wsss<T: Real>(g: &mut Graph<T>, terms: &LossTerms, w: &LossWeights) -> Result<Var> {
    weighted_total(g, terms, w)
}

fn weighted_total<T: Real>(g: &mut Graph<T>, t: &LossTerms, w: &LossWeights) -> Result<Var> {
    w.validate()?;
    g.weighted_sum(&[
        (t.cls, T::one()),
        (t.frg, T::from_f64(w.alpha)),
        (t.ac, T::from_f64(w.beta)),
        (t.bas, T::from_f64(w.lambda)),
    ])
}
