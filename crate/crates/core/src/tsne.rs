//! Exact (O(N²)) t-SNE with a seeded initialisation.

use ndarray::{Array2, ArrayView2};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::numeric::rng_for;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig { perplexity: 30.0, iterations: 750, learning_rate: 200.0, seed: 0 }
    }
}

fn squared_distances(x: ArrayView2<f64>) -> Array2<f64> {
    let n = x.nrows();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let v: f64 = x.row(i).iter().zip(x.row(j).iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    d
}

/// Conditional probabilities of row `i` with precision chosen by bisection
/// so the entropy matches `ln(perplexity)`.
fn conditional_row(d: &Array2<f64>, i: usize, perplexity: f64) -> Vec<f64> {
    let n = d.nrows();
    let target = perplexity.ln();
    let (mut lo, mut hi, mut beta) = (0.0f64, f64::INFINITY, 1.0f64);
    let mut p = vec![0.0; n];
    for _ in 0..100 {
        let min_d = (0..n).filter(|&j| j != i).map(|j| d[[i, j]]).fold(f64::INFINITY, f64::min);
        let mut sum = 0.0;
        for j in 0..n {
            p[j] = if j == i { 0.0 } else { (-(d[[i, j]] - min_d) * beta).exp() };
            sum += p[j];
        }
        let mut h = 0.0;
        for pj in p.iter_mut() {
            *pj /= sum;
            if *pj > 1e-300 {
                h -= *pj * pj.ln();
            }
        }
        let diff = h - target;
        if diff.abs() < 1e-6 {
            break;
        }
        if diff > 0.0 {
            lo = beta;
            beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = (beta + lo) / 2.0;
        }
    }
    p
}

/// Embeds the rows of `x` in two dimensions.
pub fn tsne(x: ArrayView2<f64>, cfg: &TsneConfig) -> Array2<f64> {
    let n = x.nrows();
    if n < 2 {
        return Array2::zeros((n, 2));
    }
    let perplexity = cfg.perplexity.min((n as f64 - 1.0) / 3.0).max(1.0);
    let d = squared_distances(x);
    let rows: Vec<Vec<f64>> = (0..n).into_par_iter().map(|i| conditional_row(&d, i, perplexity)).collect();
    let mut p = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            p[[i, j]] = ((rows[i][j] + rows[j][i]) / (2.0 * n as f64)).max(1e-12);
        }
    }

    let mut rng = rng_for(cfg.seed, "tsne/init");
    let normal = Normal::new(0.0, 1e-4).expect("valid std");
    let mut y = Array2::from_shape_fn((n, 2), |_| normal.sample(&mut rng));
    let mut velocity = Array2::<f64>::zeros((n, 2));
    let mut gains = Array2::<f64>::ones((n, 2));
    let exaggeration_iters = (cfg.iterations / 4).min(250);

    for it in 0..cfg.iterations {
        let exaggeration = if it < exaggeration_iters { 12.0 } else { 1.0 };
        let momentum = if it < exaggeration_iters { 0.5 } else { 0.8 };
        let kernel: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                (0..n)
                    .map(|j| {
                        if i == j {
                            0.0
                        } else {
                            let dx = y[[i, 0]] - y[[j, 0]];
                            let dy = y[[i, 1]] - y[[j, 1]];
                            1.0 / (1.0 + dx * dx + dy * dy)
                        }
                    })
                    .collect()
            })
            .collect();
        let z: f64 = kernel.iter().map(|r| r.iter().sum::<f64>()).sum();
        let grad: Vec<[f64; 2]> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut g = [0.0, 0.0];
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let k = kernel[i][j];
                    let w = (exaggeration * p[[i, j]] - k / z) * k;
                    g[0] += 4.0 * w * (y[[i, 0]] - y[[j, 0]]);
                    g[1] += 4.0 * w * (y[[i, 1]] - y[[j, 1]]);
                }
                g
            })
            .collect();
        for i in 0..n {
            for c in 0..2 {
                let g = grad[i][c];
                let same_sign = (g > 0.0) == (velocity[[i, c]] > 0.0);
                gains[[i, c]] = if same_sign { (gains[[i, c]] * 0.8f64).max(0.01) } else { gains[[i, c]] + 0.2 };
                velocity[[i, c]] = momentum * velocity[[i, c]] - cfg.learning_rate * gains[[i, c]] * g;
                y[[i, c]] += velocity[[i, c]];
            }
        }
        let mean = y.mean_axis(ndarray::Axis(0)).expect("nonempty");
        y -= &mean;
    }
    y
}
