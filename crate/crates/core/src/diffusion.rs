//! Noise schedules, forward corruption, the ε-prediction objective and the
//! DDPM / DDIM reverse updates.
//!
//! Timesteps run over `1..=T`. `alpha_bar(0)` is defined as 1 so that a DDIM
//! step to `t_prev = 0` lands on the data manifold.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{invalid, Error, Result};
use crate::models::NoisePredictor;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    steps: usize,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from per-step variances `β_1..β_T`.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        let steps = beta.len();
        if steps < 2 {
            return Err(invalid(format!("schedule needs T >= 2, got {steps}")));
        }
        if beta.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(invalid("every beta must lie in (0, 1)"));
        }
        if beta.windows(2).any(|w| w[1] < w[0]) {
            return Err(invalid("betas must be non-decreasing"));
        }
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        for &b in &beta {
            let prev = *alpha_bar.last().unwrap();
            alpha_bar.push(prev * (1.0 - b));
        }
        let mut sigma = vec![0.0; steps + 1];
        for t in 2..=steps {
            let var = beta[t - 1] * (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]);
            sigma[t] = var.sqrt();
        }
        Ok(Self {
            steps,
            beta,
            alpha_bar,
            sigma,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta[t - 1]
    }

    /// Cumulative product `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Reverse-step noise scale `σ_t`; `σ_1 = 0`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    /// Whether `x_T` is close to a standard normal (`ᾱ_T < 0.01`).
    pub fn terminal_is_near_normal(&self) -> bool {
        self.alpha_bar[self.steps] < 0.01
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(invalid(format!("timestep {t} outside 1..={}", self.steps)));
        }
        Ok(())
    }

    /// Visited timesteps for a strided DDIM pass, paired with the step each
    /// one jumps to. Starts at `T` and always ends with a jump to 0.
    pub fn ddim_timesteps(&self, stride: usize) -> Vec<(usize, usize)> {
        let stride = stride.max(1);
        let ts: Vec<usize> = (1..=self.steps).rev().step_by(stride).collect();
        ts.iter()
            .enumerate()
            .map(|(i, &t)| (t, ts.get(i + 1).copied().unwrap_or(0)))
            .collect()
    }
}

/// `β_t` interpolated linearly from `beta_min` to `beta_max`.
pub fn linear_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(invalid(format!("schedule needs T >= 2, got {steps}")));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(invalid(format!(
            "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
        )));
    }
    let beta = (0..steps)
        .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64)
        .collect();
    let sched = NoiseSchedule::from_betas(beta)?;
    if !sched.terminal_is_near_normal() {
        log::warn!(
            "alpha_bar_T = {:.4} >= 0.01: x_T is not close to a standard normal",
            sched.alpha_bar(steps)
        );
    }
    Ok(sched)
}

/// `x_t = √ᾱ_t · x0 + √(1−ᾱ_t) · ε`
pub fn forward_sample(x0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_t(t)?;
    forward_at(x0, t, eps, schedule)
}

/// Same as [`forward_sample`] but also accepts `t = 0` (clean input).
pub(crate) fn forward_at(x0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(eps, "forward_sample", |x, e| a * x + b * e)
}

/// Row-wise forward corruption where every row has its own timestep.
pub(crate) fn forward_rows(x0: &Tensor, ts: &[usize], eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    x0.check_same_shape(eps, "forward_rows")?;
    let d = x0.cols();
    let mut out = Vec::with_capacity(x0.len());
    for (i, &t) in ts.iter().enumerate() {
        let ab = schedule.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        out.extend(x0.row(i).iter().zip(eps.row(i)).map(|(x, e)| a * x + b * e));
    }
    Tensor::new(vec![ts.len(), d], out)
}

/// Appends the ε-prediction objective for one minibatch to `g`: the mean over
/// rows of `‖ε − ε_θ(x_t, t)‖²`, with `t` uniform on `1..=T` and fresh noise
/// per row.
pub fn score_matching_graph<D, R>(
    g: &mut Graph,
    denoiser: &D,
    batch: &Tensor,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<NodeId>
where
    D: NoisePredictor + ?Sized,
    R: Rng + ?Sized,
{
    let n = batch.rows();
    if batch.is_empty() || n == 0 {
        return Err(invalid("score matching needs a non-empty batch"));
    }
    let ts: Vec<usize> = (0..n).map(|_| rng.random_range(1..=schedule.steps())).collect();
    let eps = Tensor::randn(&[n, batch.cols()], rng);
    let xt = forward_rows(batch, &ts, &eps, schedule)?;
    let x = g.constant(xt);
    let pred = denoiser.predict_graph(g, x, &ts)?;
    let target = g.constant(eps);
    let diff = g.sub(target, pred)?;
    let sq = g.squared_norm(diff)?;
    g.scale(sq, 1.0 / n as f64)
}

pub fn score_matching_loss<D, R>(
    denoiser: &D,
    batch: &Tensor,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor>
where
    D: NoisePredictor + ?Sized,
    R: Rng + ?Sized,
{
    let mut g = Graph::new();
    let out = score_matching_graph(&mut g, denoiser, batch, schedule, rng)?;
    Ok(g.value(out).clone())
}

/// Ancestral DDPM update
/// `x_{t−1} = (x_t − (1−α_t)/√(1−ᾱ_t) · ε_θ(x_t,t)) / √α_t + σ_t z`.
pub fn ddpm_step<D: NoisePredictor + ?Sized>(
    denoiser: &D,
    x_t: &Tensor,
    t: usize,
    z: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    schedule.check_t(t)?;
    x_t.check_same_shape(z, "ddpm_step")?;
    if t == 1 && z.data().iter().any(|&v| v != 0.0) {
        return Err(invalid("z must be zero at t = 1"));
    }
    let eps = denoiser.predict(x_t, &vec![t; x_t.rows()])?;
    ddpm_update(&eps, x_t, t, z, schedule, schedule.sigma(t))
}

pub(crate) fn ddpm_update(
    eps: &Tensor,
    x_t: &Tensor,
    t: usize,
    z: &Tensor,
    schedule: &NoiseSchedule,
    sigma: f64,
) -> Result<Tensor> {
    let alpha = schedule.alpha(t);
    let coef = (1.0 - alpha) / (1.0 - schedule.alpha_bar(t)).sqrt();
    let inv = 1.0 / alpha.sqrt();
    let data: Vec<f64> = x_t
        .data()
        .iter()
        .zip(eps.data())
        .zip(z.data())
        .map(|((x, e), z)| inv * (x - coef * e) + sigma * z)
        .collect();
    Tensor::new_finite(x_t.shape().to_vec(), data, "ddpm_step")
}

/// Deterministic (η = 0) DDIM jump from `t` to `t_prev`.
pub fn ddim_step(
    eps_hat: &Tensor,
    x_t: &Tensor,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    if !(t_prev < t && t <= schedule.steps()) {
        return Err(invalid(format!(
            "ddim_step needs 0 <= t_prev < t <= T, got t={t}, t_prev={t_prev}"
        )));
    }
    x_t.check_same_shape(eps_hat, "ddim_step")?;
    let ab = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t_prev);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    let data: Vec<f64> = x_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(x, e)| {
            let x0 = (x - sb * e) / sa;
            pa * x0 + pb * e
        })
        .collect();
    Tensor::new_finite(x_t.shape().to_vec(), data, "ddim_step")
        .map_err(|e| match e {
            Error::NonFinite(_) => Error::NonFinite(format!("ddim_step t={t}")),
            other => other,
        })
}

/// Generalized DDIM jump with stochasticity `eta`:
/// `x_prev = √ᾱ_prev·x̂0 + √(1−ᾱ_prev−σ²)·ε̂ + σ·z`, where
/// `σ = eta·√((1−ᾱ_prev)/(1−ᾱ_t))·√(1−ᾱ_t/ᾱ_prev)`. `eta = 1` with
/// `t_prev = t − 1` reproduces the ancestral DDPM update exactly.
pub fn ddim_step_eta(
    eps_hat: &Tensor,
    x_t: &Tensor,
    t: usize,
    t_prev: usize,
    eta: f64,
    z: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    if !(t_prev < t && t <= schedule.steps()) {
        return Err(invalid(format!(
            "ddim_step needs 0 <= t_prev < t <= T, got t={t}, t_prev={t_prev}"
        )));
    }
    x_t.check_same_shape(eps_hat, "ddim_step")?;
    x_t.check_same_shape(z, "ddim_step")?;
    let ab = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t_prev);
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev)).sqrt();
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let pa = ab_prev.sqrt();
    let pb = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let data: Vec<f64> = x_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .zip(z.data())
        .map(|((x, e), z)| pa * (x - sb * e) / sa + pb * e + sigma * z)
        .collect();
    Tensor::new_finite(x_t.shape().to_vec(), data, "ddim_step")
}

/// Full ancestral DDPM chain for `n` samples, one RNG stream per sample.
pub fn ddpm_generate<D: NoisePredictor + Sync + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    n: usize,
    dim: usize,
    seed: u64,
) -> Result<Tensor> {
    let mut rngs: Vec<_> = (0..n).map(|i| crate::rng::stream(seed, i as u64)).collect();
    let mut rows: Vec<Vec<f64>> = rngs
        .iter_mut()
        .map(|r| (0..dim).map(|_| r.sample(StandardNormal)).collect())
        .collect();
    let mut x = Tensor::from_rows(&rows, dim)?;
    for t in (1..=schedule.steps()).rev() {
        for (row, r) in rows.iter_mut().zip(rngs.iter_mut()) {
            for v in row.iter_mut() {
                *v = if t > 1 { r.sample(StandardNormal) } else { 0.0 };
            }
        }
        let z = Tensor::from_rows(&rows, dim)?;
        x = ddpm_step(denoiser, &x, t, &z, schedule)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::testing::{FnPredictor, GaussianOracle};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_step_schedule() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.1]).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.81).abs() < 1e-15);
        assert_eq!(s.sigma(1), 0.0);
        let want = (0.1f64 * (1.0 - 0.9) / (1.0 - 0.81)).sqrt();
        assert!((s.sigma(2) - want).abs() < 1e-15);
    }

    #[test]
    fn schedule_preconditions() {
        assert!(linear_schedule(1, 1e-4, 0.02).is_err());
        assert!(linear_schedule(10, 0.0, 0.02).is_err());
        assert!(linear_schedule(10, 0.03, 0.02).is_err());
        assert!(linear_schedule(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn default_schedules_terminal_value() {
        // Product of (1 - β_t) computed independently of the schedule code.
        let prod = |steps: usize| -> f64 {
            (0..steps)
                .map(|i| 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / (steps - 1) as f64))
                .product()
        };
        let desk = linear_schedule(200, 1e-4, 0.02).unwrap();
        assert!((desk.alpha_bar(200) - prod(200)).abs() < 1e-12);
        assert!(desk.alpha_bar(200) < 0.15);
        assert!(!desk.terminal_is_near_normal());
        let full = linear_schedule(1000, 1e-4, 0.02).unwrap();
        assert!((full.alpha_bar(1000) - prod(1000)).abs() < 1e-12);
        assert!(full.terminal_is_near_normal());
        for t in 1..200 {
            assert!(desk.alpha_bar(t + 1) < desk.alpha_bar(t));
        }
    }

    #[test]
    fn forward_sample_algebra() {
        let s = NoiseSchedule::from_betas(vec![0.64, 0.64]).unwrap();
        assert!((s.alpha_bar(1) - 0.36).abs() < 1e-15);
        let eps = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let x0 = Tensor::zeros(&[3]);
        let xt = forward_sample(&x0, 1, &eps, &s).unwrap();
        for (a, e) in xt.data().iter().zip(eps.data()) {
            assert!((a - 0.8 * e).abs() < 1e-15);
        }
        // t = 0 limit: ᾱ_0 = 1.
        let x0 = Tensor::vector(vec![0.3, 0.2, -1.0]);
        assert!(forward_at(&x0, 0, &eps, &s).unwrap().bit_eq(&x0));
        assert!(forward_sample(&x0, 3, &eps, &s).is_err());
        assert!(forward_sample(&x0, 1, &Tensor::zeros(&[2]), &s).is_err());
    }

    #[test]
    fn ddpm_step_zero_predictor() {
        let s = NoiseSchedule::from_betas(vec![0.19, 0.19]).unwrap();
        let zero = FnPredictor::zeros();
        let x = Tensor::matrix(1, 2, vec![0.9, -1.8]).unwrap();
        let z = Tensor::zeros(&[1, 2]);
        let out = ddpm_step(&zero, &x, 1, &z, &s).unwrap();
        assert!((out.data()[0] - 1.0).abs() < 1e-15);
        assert!((out.data()[1] + 2.0).abs() < 1e-15);
        let bad_z = Tensor::full(&[1, 2], 0.1);
        assert!(ddpm_step(&zero, &x, 1, &bad_z, &s).is_err());
        assert!(ddpm_step(&zero, &x, 3, &z, &s).is_err());
    }

    #[test]
    fn ddim_fixed_point_and_inversion() {
        let s = linear_schedule(50, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = Tensor::randn(&[4, 3], &mut rng);
        let eps = Tensor::randn(&[4, 3], &mut rng);
        let xt = forward_sample(&x0, 40, &eps, &s).unwrap();
        let back = ddim_step(&eps, &xt, 40, 0, &s).unwrap();
        assert!(back.max_abs_diff(&x0) < 1e-10);
        let mid = ddim_step(&eps, &xt, 40, 17, &s).unwrap();
        let want = forward_sample(&x0, 17, &eps, &s).unwrap();
        assert!(mid.max_abs_diff(&want) < 1e-10);
        assert!(ddim_step(&eps, &xt, 10, 10, &s).is_err());
        assert!(ddim_step(&eps, &xt, 51, 0, &s).is_err());
    }

    #[test]
    fn ddim_step_with_equal_alpha_bar_is_identity() {
        // A schedule whose β is tiny enough that consecutive ᾱ coincide in
        // f64 would be contrived; instead jump within one ᾱ value directly.
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2, 0.3]).unwrap();
        let x = Tensor::vector(vec![0.7, -0.1]);
        let e = Tensor::vector(vec![0.2, 0.4]);
        let ab = s.alpha_bar(2);
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let x0: Vec<f64> = x.data().iter().zip(e.data()).map(|(x, e)| (x - sb * e) / sa).collect();
        let again: Vec<f64> = x0.iter().zip(e.data()).map(|(x0, e)| sa * x0 + sb * e).collect();
        for (a, b) in again.iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn ddpm_step_equals_eta_one_ddim() {
        let s = linear_schedule(100, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn(&[3, 2], &mut rng);
        let eps = Tensor::randn(&[3, 2], &mut rng);
        let z = Tensor::randn(&[3, 2], &mut rng);
        for t in [2usize, 10, 50, 100] {
            let a = ddpm_update(&eps, &x, t, &z, &s, s.sigma(t)).unwrap();
            let b = ddim_step_eta(&eps, &x, t, t - 1, 1.0, &z, &s).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-12, "t={t}");
        }
    }

    #[test]
    fn ddim_eta_zero_is_plain_ddim() {
        let s = linear_schedule(100, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Tensor::randn(&[3, 2], &mut rng);
        let eps = Tensor::randn(&[3, 2], &mut rng);
        let z = Tensor::randn(&[3, 2], &mut rng);
        let a = ddim_step(&eps, &x, 60, 45, &s).unwrap();
        let b = ddim_step_eta(&eps, &x, 60, 45, 0.0, &z, &s).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-14);
    }

    #[test]
    fn timesteps_end_at_zero() {
        let s = linear_schedule(20, 1e-4, 0.02).unwrap();
        let full = s.ddim_timesteps(1);
        assert_eq!(full.len(), 20);
        assert_eq!(full[0], (20, 19));
        assert_eq!(*full.last().unwrap(), (1, 0));
        let strided = s.ddim_timesteps(5);
        assert_eq!(strided, vec![(20, 15), (15, 10), (10, 5), (5, 0)]);
    }

    #[test]
    fn loss_of_zero_predictor_is_dimension() {
        let s = linear_schedule(50, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = Tensor::randn(&[4000, 3], &mut rng);
        let loss = score_matching_loss(&FnPredictor::zeros(), &batch, &s, &mut rng).unwrap();
        // E‖ε‖² = 3, std of the mean ≈ √(2·3/4000) ≈ 0.039.
        assert!((loss.item() - 3.0).abs() < 0.16, "{}", loss.item());
    }

    #[test]
    fn loss_of_gaussian_oracle_is_small() {
        let s = linear_schedule(50, 1e-4, 0.02).unwrap();
        let oracle = GaussianOracle::new(0.0, 1.0, s.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // Standard-normal data: the exact posterior mean of ε is √(1−ᾱ)·x_t,
        // and the residual variance is ᾱ_t per coordinate.
        let batch = Tensor::randn(&[2000, 1], &mut rng);
        let loss = score_matching_loss(&oracle, &batch, &s, &mut rng).unwrap().item();
        let expected: f64 = (1..=50).map(|t| s.alpha_bar(t)).sum::<f64>() / 50.0;
        assert!((loss - expected).abs() < 0.1, "{loss} vs {expected}");
    }
}
