//! Gumbel-Softmax relaxation of categorical choices.

use rand::Rng;

use crate::error::{AutodiffError, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// Draws standard Gumbel noise `-ln(-ln u)`, `u ~ U(0, 1)`.
pub fn sample_gumbel<F: Real, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let u: f64 = rng.random_range(f64::EPSILON..1.0);
            F::of(-(-u.ln()).ln())
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("sized from shape")
}

/// Softmax of `(logits + noise) / temperature` over the last axis.
///
/// `noise = None` means zero noise, which makes the result a deterministic
/// tempered softmax. In `hard` mode the forward value is the one-hot argmax
/// while gradients flow through the soft probabilities.
pub fn gumbel_softmax<F: Real>(
    g: &mut Graph<F>,
    logits: Var,
    temperature: f64,
    hard: bool,
    noise: Option<&Tensor<F>>,
) -> Result<Var> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(AutodiffError::InvalidArgument(format!("temperature must be positive, got {temperature}")));
    }
    let shape = g.shape(logits).to_vec();
    let classes = shape.last().copied().unwrap_or(0);
    if classes < 2 {
        return Err(AutodiffError::ShapeMismatch {
            op: "gumbel_softmax",
            detail: format!("final axis needs at least 2 entries, got shape {:?}", shape),
        });
    }
    let perturbed = match noise {
        Some(n) => {
            if n.shape() != shape.as_slice() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "gumbel_softmax",
                    detail: format!("noise {:?} vs logits {:?}", n.shape(), shape),
                });
            }
            let nv = g.constant(n.clone());
            g.add(logits, nv)?
        }
        None => logits,
    };
    let scaled = g.scale(perturbed, 1.0 / temperature)?;
    let soft = g.softmax(scaled, shape.len() - 1)?;
    if !hard {
        return Ok(soft);
    }
    let probs = g.value(soft);
    let mut onehot = vec![F::zero(); probs.numel()];
    for (r, row) in probs.data().chunks(classes).enumerate() {
        let best = row
            .iter()
            .enumerate()
            .fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
        onehot[r * classes + best] = F::one();
    }
    let hard_v = g.constant(Tensor::new(shape, onehot)?);
    g.straight_through(soft, hard_v)
}
