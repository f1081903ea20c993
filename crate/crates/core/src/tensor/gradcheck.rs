use super::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest error over all coordinates. Relative where either gradient
    /// has magnitude >= `abs_floor`, absolute otherwise.
    pub max_error: f64,
    pub coordinates: usize,
    pub worst: Option<(usize, usize)>,
}

/// Magnitude below which gradients are compared absolutely.
pub const ABS_FLOOR: f64 = 1e-4;

/// Compares the gradient of the scalar function `f` at `inputs` with
/// `(f(x + eps) - f(x - eps)) / (2 eps)` per coordinate.
pub fn finite_diff_check<T, F>(f: F, inputs: &[Tensor<T>], eps: f64) -> Result<GradCheck>
where
    T: Real,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<T>]| -> Result<T> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar_of(&g, out)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    scalar_of(&g, out)?;
    let grads = g.backward(out)?;

    let mut report = GradCheck {
        max_error: 0.0,
        coordinates: 0,
        worst: None,
    };
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for (ti, (&v, input)) in vars.iter().zip(inputs).enumerate() {
        let analytic = grads.get_or_zeros(v, input.numel());
        for ci in 0..input.numel() {
            let x0 = input.data()[ci];
            work[ti].data_mut()[ci] = x0 + T::from_f64(eps);
            let plus = eval(&work)?.as_f64();
            work[ti].data_mut()[ci] = x0 - T::from_f64(eps);
            let minus = eval(&work)?.as_f64();
            work[ti].data_mut()[ci] = x0;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[ci].as_f64();
            let scale = a.abs().max(numeric.abs());
            let err = if scale < ABS_FLOOR {
                (a - numeric).abs()
            } else {
                (a - numeric).abs() / scale
            };
            report.coordinates += 1;
            if err > report.max_error || report.worst.is_none() {
                report.max_error = report.max_error.max(err);
                report.worst = Some((ti, ci));
            }
        }
    }
    Ok(report)
}

fn scalar_of<T: Real>(g: &Graph<T>, v: Var) -> Result<T> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(Error::shape(
            "finite_diff_check",
            format!("function must be scalar-valued, got {:?}", t.shape()),
        ));
    }
    Ok(t.item())
}
