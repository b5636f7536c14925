//! Small fixed-order reductions shared by the advantage and oracle code.

use crate::math;

/// Arithmetic mean, summed left to right. `NaN` for an empty slice.
pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let mu = mean(xs);
    let var = xs.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() / xs.len() as f64;
    (mu, math::sqrt(var))
}
