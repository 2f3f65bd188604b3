//! Exact t-SNE for 2-D scatter plots (quadratic in the number of points).

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{CsfError, Result};

#[derive(Debug, Clone)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 500,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iters: 100,
            seed: 0,
        }
    }
}

/// Conditional affinities with per-point bandwidth found by bisection on
/// the entropy, symmetrised and normalised to sum to one.
fn affinities(x: ArrayView2<f64>, perplexity: f64) -> Array2<f64> {
    let n = x.nrows();
    let mut d2 = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let d = &x.row(i) - &x.row(j);
            let v = d.dot(&d);
            d2[[i, j]] = v;
            d2[[j, i]] = v;
        }
    }
    let target = perplexity.ln();
    let mut p = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let (mut lo, mut hi, mut beta) = (0.0f64, f64::INFINITY, 1.0f64);
        let min_d = (0..n).filter(|&j| j != i).map(|j| d2[[i, j]]).fold(f64::INFINITY, f64::min);
        for _ in 0..64 {
            let mut sum = 0.0;
            let mut weighted = 0.0;
            for j in 0..n {
                if j != i {
                    let w = (-(d2[[i, j]] - min_d) * beta).exp();
                    p[[i, j]] = w;
                    sum += w;
                    weighted += w * (d2[[i, j]] - min_d);
                }
            }
            let entropy = sum.ln() + beta * weighted / sum;
            for j in 0..n {
                p[[i, j]] /= sum;
            }
            if (entropy - target).abs() < 1e-5 {
                break;
            }
            if entropy > target {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
    }
    let sym = (&p + &p.t()) / (2.0 * n as f64);
    sym.mapv(|v| v.max(1e-12))
}

/// Embeds rows of `x` in two dimensions. Deterministic for a fixed seed.
pub fn tsne(x: ArrayView2<f64>, cfg: &TsneConfig) -> Result<Array2<f64>> {
    let n = x.nrows();
    if n < 4 {
        return Err(CsfError::InvalidArgument("t-SNE needs at least 4 points".into()));
    }
    let perplexity = cfg.perplexity.min((n - 1) as f64 / 3.0);
    let p = affinities(x, perplexity);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1e-4).expect("valid std");
    let mut y = Array2::from_shape_fn((n, 2), |_| normal.sample(&mut rng));
    let mut velocity = Array2::<f64>::zeros((n, 2));
    let mut gains = Array2::<f64>::ones((n, 2));
    let mut num = Array2::<f64>::zeros((n, n));
    for it in 0..cfg.iterations {
        let exaggeration = if it < cfg.exaggeration_iters { cfg.early_exaggeration } else { 1.0 };
        let momentum = if it < cfg.exaggeration_iters { 0.5 } else { 0.8 };
        let mut z = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let dx = y[[i, 0]] - y[[j, 0]];
                let dy = y[[i, 1]] - y[[j, 1]];
                let q = 1.0 / (1.0 + dx * dx + dy * dy);
                num[[i, j]] = q;
                num[[j, i]] = q;
                z += 2.0 * q;
            }
        }
        let mut grad = Array2::<f64>::zeros((n, 2));
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let q = num[[i, j]];
                    let m = (exaggeration * p[[i, j]] - q / z) * q;
                    grad[[i, 0]] += 4.0 * m * (y[[i, 0]] - y[[j, 0]]);
                    grad[[i, 1]] += 4.0 * m * (y[[i, 1]] - y[[j, 1]]);
                }
            }
        }
        for ((g, v), gain) in grad.iter().zip(velocity.iter_mut()).zip(gains.iter_mut()) {
            *gain = if (*g > 0.0) != (*v > 0.0) { *gain + 0.2 } else { (*gain * 0.8).max(0.01) };
            *v = momentum * *v - cfg.learning_rate * *gain * g;
        }
        y += &velocity;
        let mean = y.mean_axis(ndarray::Axis(0)).expect("n > 0");
        y -= &mean;
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(CsfError::NonFinite("t-SNE diverged".into()));
    }
    Ok(y)
}
