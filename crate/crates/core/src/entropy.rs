//! Kozachenko–Leonenko nearest-neighbor estimators of differential entropy.
//!
//! Two forms are provided. [`entropy_first`] uses the nearest neighbor and the
//! per-sample probability `p(x_i) = [(n−1) r(x_i)^d V_d]^{-1}` plus γ;
//! [`entropy_kl`] is the general k-th neighbor form
//! `−ψ(k) + ψ(n) + log V_d + (d/n) Σ log r_k(x_i)`. At k = 1 they differ by
//! exactly `log(n−1) − ψ(n)`, see [`first_vs_kl_residual`].
//!
//! All values are in nats. Neighbor distances are clamped to `epsilon` before
//! taking logs so coincident samples yield a finite (and flagged) estimate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knn::{check_k, knn_distances, NeighborDistances};
use crate::samples::SampleMatrix;
use crate::special::{digamma, log_unit_ball_volume, EULER_GAMMA};

pub const DEFAULT_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyConfig {
    /// Lower clamp applied to neighbor distances before the logarithm.
    pub epsilon: f64,
}

impl Default for EntropyConfig {
    fn default() -> Self {
        Self { epsilon: DEFAULT_EPSILON }
    }
}

impl EntropyConfig {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !epsilon.is_finite() || epsilon <= 0.0 {
            return Err(Error::Config(format!("epsilon must be finite and > 0, got {epsilon}")));
        }
        Ok(Self { epsilon })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyEstimate {
    /// Differential entropy in nats.
    pub value: f64,
    pub k: usize,
    pub n: usize,
    pub d: usize,
    /// Number of neighbor distances raised to epsilon. Non-zero means the
    /// input had duplicated or nearly coincident samples.
    pub clamped_count: usize,
}

/// Sum of clamped log-distances, accumulated in sorted order so the result
/// does not depend on sample order.
fn sum_log_distances(r: &[f64], epsilon: f64) -> (f64, usize) {
    let mut clamped = 0;
    let mut logs: Vec<f64> = r
        .iter()
        .map(|&ri| {
            if ri < epsilon {
                clamped += 1;
                epsilon.ln()
            } else {
                ri.ln()
            }
        })
        .collect();
    logs.sort_by(f64::total_cmp);
    (logs.iter().sum(), clamped)
}

/// `log(n−1) − ψ(n)`: the exact gap between the two estimator forms at k = 1.
pub fn first_vs_kl_residual(n: usize) -> Result<f64> {
    if n < 2 {
        return Err(Error::InvalidSamples(format!("need n >= 2 samples, got {n}")));
    }
    Ok(((n - 1) as f64).ln() - digamma(n as f64)?)
}

/// H(X) from nearest-neighbor probabilities plus the Euler–Mascheroni constant.
pub fn entropy_first(samples: &SampleMatrix, config: &EntropyConfig) -> Result<EntropyEstimate> {
    let (n, d) = (samples.n(), samples.d());
    let nn = knn_distances(samples, 1)?;
    let (sum_log, clamped_count) = sum_log_distances(&nn.r, config.epsilon);
    let value = ((n - 1) as f64).ln()
        + log_unit_ball_volume(d)?
        + d as f64 / n as f64 * sum_log
        + EULER_GAMMA;
    Ok(EntropyEstimate { value, k: 1, n, d, clamped_count })
}

fn kl_from_distances(
    nn: &NeighborDistances,
    n: usize,
    d: usize,
    config: &EntropyConfig,
) -> Result<EntropyEstimate> {
    let (sum_log, clamped_count) = sum_log_distances(&nn.r, config.epsilon);
    let value = -digamma(nn.k as f64)?
        + digamma(n as f64)?
        + log_unit_ball_volume(d)?
        + d as f64 / n as f64 * sum_log;
    Ok(EntropyEstimate { value, k: nn.k, n, d, clamped_count })
}

/// H(X, k), the k-th nearest-neighbor estimator.
pub fn entropy_kl(
    samples: &SampleMatrix,
    k: usize,
    config: &EntropyConfig,
) -> Result<EntropyEstimate> {
    let nn = knn_distances(samples, k)?;
    kl_from_distances(&nn, samples.n(), samples.d(), config)
}

/// Adds `scale · ∂/∂x [(d/n) Σ log r_k(x_i)]` to `grad` with the neighbor
/// assignment frozen. Pairs with `r < epsilon` sit on the clamp and contribute
/// nothing.
fn accumulate_gradient(
    samples: &SampleMatrix,
    nn: &NeighborDistances,
    epsilon: f64,
    scale: f64,
    grad: &mut [f64],
) {
    let (n, d) = (samples.n(), samples.d());
    let coef = scale * d as f64 / n as f64;
    for i in 0..n {
        let r = nn.r[i];
        if r < epsilon {
            continue;
        }
        let j = nn.neighbor[i];
        let w = coef / (r * r);
        let (xi, xj) = (samples.row(i), samples.row(j));
        for c in 0..d {
            let g = w * (xi[c] - xj[c]);
            grad[i * d + c] += g;
            grad[j * d + c] -= g;
        }
    }
}

/// ∂H(X, k)/∂samples, row-major n × d, holding the neighbor assignment fixed.
///
/// Fails when any used neighbor distance is below `10 · epsilon`, where the
/// derivative is undefined.
pub fn entropy_gradient(
    samples: &SampleMatrix,
    k: usize,
    config: &EntropyConfig,
) -> Result<Vec<f64>> {
    let nn = knn_distances(samples, k)?;
    for (i, (&r, &j)) in nn.r.iter().zip(&nn.neighbor).enumerate() {
        if r < 10.0 * config.epsilon {
            return Err(Error::DegenerateGradient { i, j, distance: r });
        }
    }
    let mut grad = vec![0.0; samples.n() * samples.d()];
    accumulate_gradient(samples, &nn, config.epsilon, 1.0, &mut grad);
    Ok(grad)
}

/// Entropy plus its frozen-neighbor gradient, treating clamped pairs as flat.
///
/// This is the form used inside training, where a single coincident pair
/// must not abort a batch.
pub fn entropy_kl_with_gradient(
    samples: &SampleMatrix,
    k: usize,
    config: &EntropyConfig,
) -> Result<(EntropyEstimate, Vec<f64>)> {
    check_k(k, samples.n())?;
    let nn = knn_distances(samples, k)?;
    let est = kl_from_distances(&nn, samples.n(), samples.d(), config)?;
    let mut grad = vec![0.0; samples.n() * samples.d()];
    accumulate_gradient(samples, &nn, config.epsilon, 1.0, &mut grad);
    Ok((est, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> EntropyConfig {
        EntropyConfig::default()
    }

    #[test]
    fn residual_at_n_100() {
        let r = first_vs_kl_residual(100).unwrap();
        // log 99 − ψ(100), evaluated independently: ψ(100) = H_99 − γ.
        let harmonic: f64 = (1..100).map(|j| 1.0 / j as f64).sum();
        let want = 99f64.ln() - (harmonic - EULER_GAMMA);
        assert!((r - want).abs() < 1e-13, "{r} vs {want}");
        assert!((r.abs() - 0.00504).abs() < 5e-6, "{r}");
    }

    #[test]
    fn first_and_kl_differ_by_residual() {
        let s = SampleMatrix::from_rows(&[
            vec![0.0, 0.3],
            vec![1.0, -0.2],
            vec![3.0, 0.9],
            vec![-1.5, 2.2],
        ])
        .unwrap();
        let first = entropy_first(&s, &cfg()).unwrap().value;
        let kl = entropy_kl(&s, 1, &cfg()).unwrap().value;
        assert!((first - kl - first_vs_kl_residual(4).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn two_identical_points_clamp() {
        let s = SampleMatrix::new(vec![2.0, 2.0], 2, 1).unwrap();
        let est = entropy_kl(&s, 1, &cfg()).unwrap();
        assert!(est.value.is_finite());
        assert_eq!(est.clamped_count, 2);
        let first = entropy_first(&s, &cfg()).unwrap();
        assert_eq!(first.clamped_count, 2);
        assert!(matches!(
            entropy_gradient(&s, 1, &cfg()),
            Err(Error::DegenerateGradient { .. })
        ));
        let (_, g) = entropy_kl_with_gradient(&s, 1, &cfg()).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn three_point_line_value() {
        // r = [1, 1, 2], d = 1, n = 3, k = 1:
        // −ψ(1) + ψ(3) + log 2 + (1/3)(log 2).
        let s = SampleMatrix::new(vec![0.0, 1.0, 3.0], 3, 1).unwrap();
        let got = entropy_kl(&s, 1, &cfg()).unwrap().value;
        let psi3 = 1.0 + 0.5 - EULER_GAMMA;
        let want = EULER_GAMMA + psi3 + 2f64.ln() + 2f64.ln() / 3.0;
        assert!((got - want).abs() < 1e-14);
    }

    #[test]
    fn invalid_k_propagates() {
        let s = SampleMatrix::new(vec![0.0, 1.0], 2, 1).unwrap();
        assert!(matches!(entropy_kl(&s, 2, &cfg()), Err(Error::InvalidK { .. })));
        assert!(matches!(entropy_gradient(&s, 0, &cfg()), Err(Error::InvalidK { .. })));
    }

    #[test]
    fn epsilon_must_be_positive() {
        assert!(EntropyConfig::new(0.0).is_err());
        assert!(EntropyConfig::new(f64::NAN).is_err());
        assert_eq!(EntropyConfig::new(1e-9).unwrap().epsilon, 1e-9);
    }
}
