//! Reconstruction-error membership inference.
//!
//! Each item is noised to a fixed timestep with one fresh ε and the squared
//! error of the noise prediction is recorded. A model that memorized its
//! training set reconstructs members better than withheld points, which the
//! one-sided z-test picks up.

use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_sample, NoiseSchedule};
use crate::error::{invalid, Result};
use crate::rng;
use crate::similarity::upper_tail;
use crate::stats::{mean, sample_variance};
use crate::tensor::Tensor;

/// Smallest group size for the normal approximation.
pub const MIN_GROUP: usize = 30;

/// Rows per call of the noise predictor.
const MIA_CHUNK: usize = 256;

/// Per-item `‖ε − ε̂(√ᾱ_t x + √(1−ᾱ_t) ε, t)‖²`.
pub fn mia_error<F>(eps_hat: F, xs: &Tensor, t: usize, schedule: &NoiseSchedule, seed: u64) -> Result<Vec<f64>>
where
    F: Fn(&Tensor, usize) -> Result<Tensor>,
{
    if t == 0 || t > schedule.steps() {
        return Err(invalid(format!("MIA timestep {t} outside 1..={}", schedule.steps())));
    }
    let (n, d) = (xs.rows(), xs.cols());
    let mut r = rng::seeded(seed);
    let eps = Tensor::randn(&[n, d], &mut r);
    let xt = forward_sample(xs, t, &eps, schedule)?;
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(MIA_CHUNK) {
        let idx: Vec<usize> = (start..(start + MIA_CHUNK).min(n)).collect();
        let pred = eps_hat(&xt.select_rows(&idx), t)?;
        for (k, &i) in idx.iter().enumerate() {
            let e: f64 = eps
                .row(i)
                .iter()
                .zip(pred.row(k))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            out.push(e);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiaReport {
    pub n: usize,
    pub m: usize,
    pub mu_train: f64,
    pub mu_test: f64,
    pub var_train: f64,
    pub var_test: f64,
    pub z: f64,
    /// `1 − Φ(z)` for H0: members are reconstructed no better than
    /// non-members.
    pub p: f64,
}

/// `z = (μ_test − μ_train) / √(V_test/m + V_train/n)`.
pub fn mia_z_test(train_errors: &[f64], test_errors: &[f64]) -> Result<MiaReport> {
    let (n, m) = (train_errors.len(), test_errors.len());
    if n < MIN_GROUP || m < MIN_GROUP {
        return Err(invalid(format!("MIA groups need at least {MIN_GROUP} items, got {n} and {m}")));
    }
    if train_errors.iter().chain(test_errors).any(|v| !v.is_finite()) {
        return Err(crate::Error::NonFinite("reconstruction errors".into()));
    }
    let (mu_train, mu_test) = (mean(train_errors), mean(test_errors));
    let (var_train, var_test) = (sample_variance(train_errors), sample_variance(test_errors));
    let se = (var_test / m as f64 + var_train / n as f64).sqrt();
    if se == 0.0 {
        return Err(invalid("both error groups have zero variance"));
    }
    let z = (mu_test - mu_train) / se;
    Ok(MiaReport {
        n,
        m,
        mu_train,
        mu_test,
        var_train,
        var_test,
        z,
        p: upper_tail(z),
    })
}
