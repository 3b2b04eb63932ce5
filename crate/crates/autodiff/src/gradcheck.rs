//! Central finite-difference oracle for gradient checks.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Per-coordinate comparison of an analytic and a numerical derivative.
#[derive(Clone, Debug)]
pub struct GradSample {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradSample {
    /// `|a - fd| / max(|a|, |fd|, 1e-8)`.
    pub fn rel_error(&self) -> f64 {
        let denom = self.analytic.abs().max(self.numeric.abs()).max(1e-8);
        (self.analytic - self.numeric).abs() / denom
    }
}

/// Compares `d f / d input` from the tape against central differences with
/// step `h` at the given coordinates. `f` builds a scalar from the input var.
pub fn check<Fun>(input: &Tensor<f64>, coords: &[usize], h: f64, f: Fun) -> Result<Vec<GradSample>>
where
    Fun: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.param(input.clone());
    let y = f(&mut g, x)?;
    g.backward(y)?;
    let grad = g.grad(x).expect("param has grad");

    let eval = |t: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(t);
        let y = f(&mut g, x)?;
        Ok(g.value(y).item())
    };
    coords
        .iter()
        .map(|&i| {
            let mut plus = input.clone();
            plus.data_mut()[i] += h;
            let mut minus = input.clone();
            minus.data_mut()[i] -= h;
            let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
            Ok(GradSample { index: i, analytic: grad.data()[i], numeric })
        })
        .collect()
}
