//! Exact t-SNE for a few hundred to a few thousand points.
//!
//! Input affinities come from squared Euclidean distances with a per-point
//! Gaussian bandwidth found by bisection on the perplexity. Optimisation is
//! plain gradient descent with momentum and per-coordinate gains; the
//! first quarter of the iterations runs with early exaggeration.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::norms::{NormMatrix, View};
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    /// Momentum while exaggerating, then afterwards.
    pub momentum: (f64, f64),
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1_000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            momentum: (0.5, 0.8),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsneResult {
    pub coords: Vec<[f64; 2]>,
    /// KL(P || Q) at the random initialisation.
    pub initial_kl: f64,
    pub final_kl: f64,
}

/// Embeds the concept rows of `m` (0/1 under `view`).
pub fn tsne_embed(m: &NormMatrix, view: View, cfg: &TsneConfig) -> Result<TsneResult> {
    tsne(&m.dense_rows(view), cfg)
}

fn squared_distances(data: &[Vec<f64>]) -> Vec<f64> {
    let n = data.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = data[i]
                .iter()
                .zip(&data[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d[i * n + j] = s;
            d[j * n + i] = s;
        }
    }
    d
}

/// Conditional affinities of row `i` for precision `beta`; returns entropy
/// (nats) and fills `row`.
fn conditional_row(dist: &[f64], n: usize, i: usize, beta: f64, row: &mut [f64]) -> f64 {
    // Shift by the smallest off-diagonal distance for numerical stability.
    let min_d = (0..n)
        .filter(|&j| j != i)
        .map(|j| dist[i * n + j])
        .fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    for j in 0..n {
        row[j] = if j == i {
            0.0
        } else {
            libm::exp(-(dist[i * n + j] - min_d) * beta)
        };
        sum += row[j];
    }
    let mut h = 0.0;
    for j in 0..n {
        if j != i {
            let p = row[j] / sum;
            row[j] = p;
            if p > 0.0 {
                h -= p * libm::log(p);
            }
        }
    }
    h
}

fn joint_affinities(data: &[Vec<f64>], perplexity: f64) -> Vec<f64> {
    let n = data.len();
    let dist = squared_distances(data);
    let target = libm::log(perplexity);
    let mut p = vec![0.0; n * n];
    let mut row = vec![0.0; n];
    for i in 0..n {
        let (mut lo, mut hi) = (0.0_f64, f64::INFINITY);
        let mut beta = 1.0;
        for _ in 0..200 {
            let h = conditional_row(&dist, n, i, beta, &mut row);
            let diff = h - target;
            if diff.abs() < 1e-10 {
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
        p[i * n..(i + 1) * n].copy_from_slice(&row);
    }
    let mut joint = vec![0.0; n * n];
    let denom = 2.0 * n as f64;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                joint[i * n + j] = ((p[i * n + j] + p[j * n + i]) / denom).max(1e-12);
            }
        }
    }
    joint
}

fn student_kernel(y: &[[f64; 2]], num: &mut [f64]) -> f64 {
    let n = y.len();
    let mut sum = 0.0;
    for i in 0..n {
        num[i * n + i] = 0.0;
        for j in i + 1..n {
            let dx = y[i][0] - y[j][0];
            let dy = y[i][1] - y[j][1];
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            num[i * n + j] = v;
            num[j * n + i] = v;
            sum += 2.0 * v;
        }
    }
    sum
}

fn kl_divergence(p: &[f64], y: &[[f64; 2]], num: &mut [f64]) -> f64 {
    let n = y.len();
    let sum = student_kernel(y, num);
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let pij = p[i * n + j];
                let qij = (num[i * n + j] / sum).max(1e-12);
                kl += pij * libm::log(pij / qij);
            }
        }
    }
    kl
}

/// Exact t-SNE on dense rows.
pub fn tsne(data: &[Vec<f64>], cfg: &TsneConfig) -> Result<TsneResult> {
    let n = data.len();
    if cfg.perplexity.is_nan() || cfg.perplexity <= 0.0 || (n as f64) <= 3.0 * cfg.perplexity {
        return Err(Error::InfeasiblePerplexity {
            perplexity: cfg.perplexity,
            points: n,
        });
    }
    if cfg.iterations == 0 {
        return Err(Error::InvalidArgument("t-SNE needs at least one iteration".into()));
    }
    let p = joint_affinities(data, cfg.perplexity);

    let mut rng = SeededRng::new(cfg.seed);
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| [1e-2 * rng.normal(), 1e-2 * rng.normal()])
        .collect();
    let mut num = vec![0.0; n * n];
    let initial_kl = kl_divergence(&p, &y, &mut num);

    let exaggerated = cfg.iterations / 4;
    let mut velocity = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut grad = vec![[0.0f64; 2]; n];
    for it in 0..cfg.iterations {
        let (exag, momentum) = if it < exaggerated {
            (cfg.early_exaggeration, cfg.momentum.0)
        } else {
            (1.0, cfg.momentum.1)
        };
        let sum = student_kernel(&y, &mut num);
        for i in 0..n {
            let mut g = [0.0, 0.0];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = num[i * n + j];
                let m = (exag * p[i * n + j] - w / sum) * w;
                g[0] += m * (y[i][0] - y[j][0]);
                g[1] += m * (y[i][1] - y[j][1]);
            }
            grad[i] = [4.0 * g[0], 4.0 * g[1]];
        }
        for i in 0..n {
            for k in 0..2 {
                let same_sign = (grad[i][k] > 0.0) == (velocity[i][k] > 0.0);
                gains[i][k] = if same_sign {
                    (gains[i][k] * 0.8).max(0.01)
                } else {
                    gains[i][k] + 0.2
                };
                velocity[i][k] = momentum * velocity[i][k] - cfg.learning_rate * gains[i][k] * grad[i][k];
                y[i][k] += velocity[i][k];
            }
        }
        // Re-center.
        let mean = y.iter().fold([0.0, 0.0], |acc, p| [acc[0] + p[0], acc[1] + p[1]]);
        let mean = [mean[0] / n as f64, mean[1] / n as f64];
        for pt in &mut y {
            pt[0] -= mean[0];
            pt[1] -= mean[1];
        }
    }
    let final_kl = kl_divergence(&p, &y, &mut num);
    Ok(TsneResult {
        coords: y,
        initial_kl,
        final_kl,
    })
}
