use tslab_autodiff::{sign, Real, Tensor};

/// Cosine annealing from `max` at `t = 0` towards 0 at `t = total`.
pub fn cosine_step(max: f64, t: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    max * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos()) / 2.0
}

/// Clamps `delta` into `[-eps, eps]`, then, when `x` is given, moves it so
/// that `x + delta` lies in `[0, 1]`.
pub fn project<F: Real>(delta: &mut Tensor<F>, eps: f64, x: Option<&Tensor<F>>) {
    let e = F::of(eps);
    for d in delta.data_mut() {
        *d = d.max(-e).min(e);
    }
    if let Some(x) = x {
        for (d, &xi) in delta.data_mut().iter_mut().zip(x.data()) {
            if xi + *d > F::one() {
                *d = F::one() - xi;
            } else if xi + *d < F::zero() {
                *d = -xi;
            }
        }
    }
}

/// One descent step `delta - alpha * sign(grad)` followed by projection.
pub fn pgd_step<F: Real>(delta: &Tensor<F>, grad: &Tensor<F>, alpha: f64, eps: f64, x: Option<&Tensor<F>>) -> Tensor<F> {
    let a = F::of(alpha);
    let s = sign(grad);
    let mut next = delta.clone();
    for (d, &g) in next.data_mut().iter_mut().zip(s.data()) {
        *d -= a * g;
    }
    project(&mut next, eps, x);
    next
}
