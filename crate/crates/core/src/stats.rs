//! Small numeric helpers shared by the optimizers and the evaluation code.

use statrs::function::erf::erf;

/// Lower bound on kernel bandwidths in unit coordinates.
pub const MIN_BANDWIDTH: f64 = 1e-3;

pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (`n - 1` denominator); 0 for fewer than two points.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Scott's rule for a one-dimensional Gaussian KDE, floored at [`MIN_BANDWIDTH`].
pub fn scott_bandwidth(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return MIN_BANDWIDTH;
    }
    (std_dev(xs) * (xs.len() as f64).powf(-0.2)).max(MIN_BANDWIDTH)
}

/// Mass of `N(mu, h^2)` inside `[lo, hi]`.
pub fn normal_mass(mu: f64, h: f64, lo: f64, hi: f64) -> f64 {
    normal_cdf((hi - mu) / h) - normal_cdf((lo - mu) / h)
}

/// Linear-interpolation quantile of already sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let w = pos - lo as f64;
    sorted[lo] * (1.0 - w) + sorted[hi] * w
}
