//! Empirical check of the rejection-sampling bound.
//!
//! If the classifier is `L`-Lipschitz, confident (`p(y_i) > 1 − κ`) on its
//! training points with probability `1 − γ`, and protected sampling ends in
//! `(λ, 1 − λ)` with probability `1 − ν` where `λ = κ + Lδ`, then a
//! protected sample lands outside every δ-ball around the training data with
//! probability at least `(1 − ν)(1 − γ)`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::diffusion::{forward_sample, NoiseSchedule};
use crate::error::{invalid, Result};
use crate::models::LogitModel;
use crate::quality::FeatureMap;
use crate::rng;
use crate::similarity::{nearest_distances, Metric};
use crate::tensor::Tensor;
use crate::train::LabelSet;

pub const MIN_PROBES: usize = 100;

/// Low-noise timesteps used for the accuracy measurement by default.
pub const DEFAULT_T_GRID: [usize; 5] = [0, 1, 2, 5, 10];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    pub value: f64,
    pub t: usize,
    pub radius: f64,
    pub n_evaluated: usize,
    /// Sampled gradient norms only bound the true constant from below.
    pub is_lower_bound: bool,
}

/// `‖∇_x p(y=1 | x, t)‖` for every row.
pub fn probability_gradient_norms<C: LogitModel + ?Sized>(classifier: &C, x: &Tensor, t: usize) -> Result<Vec<f64>> {
    let n = x.rows();
    let mut g = Graph::new();
    let xid = g.leaf("x", x.clone());
    let logit = classifier.logit_graph(&mut g, xid, &vec![t; n])?;
    let p = g.sigmoid(logit)?;
    let total = g.sum(p)?;
    let grad = g.backward(total, &["x"])?.remove("x").expect("input gradient");
    Ok((0..n)
        .map(|i| grad.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect())
}

/// Largest gradient norm of `p(y=1 | ·, t)` over each center and
/// `n_probe` points drawn uniformly from the ball of `radius` around it.
pub fn estimate_local_lipschitz<C: LogitModel + ?Sized>(
    classifier: &C,
    centers: &Tensor,
    t: usize,
    radius: f64,
    n_probe: usize,
    seed: u64,
) -> Result<LipschitzEstimate> {
    if !(radius > 0.0) {
        return Err(invalid("radius must be positive"));
    }
    if n_probe < MIN_PROBES {
        return Err(invalid(format!("need at least {MIN_PROBES} probes per center")));
    }
    let d = centers.cols();
    let mut best = 0.0f64;
    let mut count = 0;
    for c in 0..centers.rows() {
        let mut r = rng::stream(seed, c as u64);
        let center = centers.row(c);
        let mut rows = Vec::with_capacity((n_probe + 1) * d);
        rows.extend_from_slice(center);
        for _ in 0..n_probe {
            let dir: Vec<f64> = (0..d).map(|_| r.sample(StandardNormal)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            let u: f64 = r.random();
            let len = radius * u.powf(1.0 / d as f64);
            rows.extend(center.iter().zip(&dir).map(|(c, v)| c + len * v / norm));
        }
        let probes = Tensor::matrix(n_probe + 1, d, rows)?;
        let norms = probability_gradient_norms(classifier, &probes, t)?;
        count += norms.len();
        best = norms.into_iter().fold(best, f64::max);
    }
    Ok(LipschitzEstimate {
        value: best,
        t,
        radius,
        n_evaluated: count,
        is_lower_bound: true,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyAssumption {
    pub kappa: f64,
    /// Pooled fraction of draws with `p(y_i | x_t, t) ≤ 1 − κ`.
    pub gamma_hat: f64,
    pub per_t: Vec<(usize, f64)>,
    pub n_noise: usize,
}

/// Measures how often the classifier is *not* confident in the assigned
/// label of a noised training point.
#[allow(clippy::too_many_arguments)]
pub fn measure_accuracy<C: LogitModel + ?Sized>(
    classifier: &C,
    train: &Tensor,
    labels: &LabelSet,
    schedule: &NoiseSchedule,
    kappa: f64,
    t_grid: &[usize],
    n_noise: usize,
    seed: u64,
) -> Result<AccuracyAssumption> {
    if !(kappa > 0.0 && kappa < 0.5) {
        return Err(invalid("kappa must lie in (0, 0.5)"));
    }
    if n_noise < 10 {
        return Err(invalid("need at least 10 noise draws per point and timestep"));
    }
    if labels.len() != train.rows() {
        return Err(invalid("label count does not match the training set"));
    }
    if t_grid.is_empty() || t_grid.iter().any(|&t| t > schedule.steps()) {
        return Err(invalid("timestep grid must be non-empty and within 0..=T"));
    }
    let n = train.rows();
    let mut per_t = Vec::with_capacity(t_grid.len());
    let mut misses = 0usize;
    let mut r = rng::seeded(seed);
    let tiled: Vec<usize> = (0..n_noise).flat_map(|_| 0..n).collect();
    let big = train.select_rows(&tiled);
    for &t in t_grid {
        let eps = Tensor::randn(big.shape(), &mut r);
        let xt = if t == 0 { big.clone() } else { forward_sample(&big, t, &eps, schedule)? };
        let p1 = classifier.prob_one(&xt, &vec![t; xt.rows()])?;
        let miss = p1
            .iter()
            .zip(&tiled)
            .filter(|(p, &i)| {
                let py = if labels.get(i) == 1 { **p } else { 1.0 - **p };
                py <= 1.0 - kappa
            })
            .count();
        misses += miss;
        per_t.push((t, miss as f64 / xt.rows() as f64));
    }
    Ok(AccuracyAssumption {
        kappa,
        gamma_hat: misses as f64 / (n * n_noise * t_grid.len()) as f64,
        per_t,
        n_noise,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationAssumption {
    pub lambda: f64,
    /// Fraction of final samples with `p(y=1 | x̃, 0) ∉ (λ, 1 − λ)`.
    pub nu_hat: f64,
}

pub fn measure_generation(final_p1: &[f64], lambda: f64) -> Result<GenerationAssumption> {
    if final_p1.is_empty() {
        return Err(invalid("no final probabilities to measure"));
    }
    let outside = final_p1.iter().filter(|&&p| !(p > lambda && p < 1.0 - lambda)).count();
    Ok(GenerationAssumption {
        lambda,
        nu_hat: outside as f64 / final_p1.len() as f64,
    })
}

/// `(1 − ν)(1 − γ)`.
pub fn lemma_bound(nu_hat: f64, gamma_hat: f64) -> f64 {
    (1.0 - nu_hat) * (1.0 - gamma_hat)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaInputs {
    pub lipschitz: f64,
    pub kappa: f64,
    pub gamma_hat: f64,
    pub nu_hat: f64,
    pub delta: f64,
}

impl LemmaInputs {
    pub fn lambda(&self) -> f64 {
        self.kappa + self.lipschitz * self.delta
    }

    /// Largest δ for which the bound is meaningful, `(½ − κ)/L`.
    pub fn delta_max(&self) -> f64 {
        if self.lipschitz == 0.0 {
            f64::INFINITY
        } else {
            (0.5 - self.kappa) / self.lipschitz
        }
    }
}

/// `requested` when it satisfies `δ < δ_max`, otherwise `δ_max / 2`.
pub fn admissible_delta(requested: f64, delta_max: f64) -> f64 {
    if requested < delta_max {
        requested
    } else {
        delta_max / 2.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub lipschitz: f64,
    pub lipschitz_is_lower_bound: bool,
    pub kappa: f64,
    pub gamma_hat: f64,
    pub lambda: f64,
    pub nu_hat: f64,
    pub delta: f64,
    pub delta_max: f64,
    /// `δ < (½ − κ)/L`; when false the bound is vacuous.
    pub delta_condition_holds: bool,
    pub bound: f64,
    pub metric: Metric,
    pub n_samples: usize,
    pub outside_count: usize,
    pub empirical_outside_rate: f64,
    pub pass: bool,
}

/// Compares the empirical rate of samples outside `⋃ B_δ(x_i)` with the
/// bound.
pub fn verify_lemma(
    inputs: &LemmaInputs,
    samples: &Tensor,
    train: &Tensor,
    metric: Metric,
    features: &FeatureMap,
) -> Result<LemmaReport> {
    for (name, v) in [("gamma_hat", inputs.gamma_hat), ("nu_hat", inputs.nu_hat)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(invalid(format!("{name} must lie in [0, 1]")));
        }
    }
    if !(inputs.delta > 0.0) || !(inputs.lipschitz >= 0.0) {
        return Err(invalid("delta must be positive and the Lipschitz estimate non-negative"));
    }
    let dist = nearest_distances(&features.apply(samples)?, &features.apply(train)?, metric)?;
    let outside = dist.iter().filter(|(_, d)| *d >= inputs.delta).count();
    let rate = outside as f64 / dist.len() as f64;
    let bound = lemma_bound(inputs.nu_hat, inputs.gamma_hat);
    let delta_max = inputs.delta_max();
    Ok(LemmaReport {
        lipschitz: inputs.lipschitz,
        lipschitz_is_lower_bound: true,
        kappa: inputs.kappa,
        gamma_hat: inputs.gamma_hat,
        lambda: inputs.lambda(),
        nu_hat: inputs.nu_hat,
        delta: inputs.delta,
        delta_max,
        delta_condition_holds: inputs.delta < delta_max,
        bound,
        metric,
        n_samples: dist.len(),
        outside_count: outside,
        empirical_outside_rate: rate,
        pass: rate >= bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::linear_schedule;
    use crate::models::testing::{ConstantClassifier, LogisticStub};

    #[test]
    fn admissible_delta_respects_the_condition() {
        assert_eq!(admissible_delta(0.01, 0.05), 0.01);
        assert_eq!(admissible_delta(0.05, 0.05), 0.025);
        assert_eq!(admissible_delta(0.2, f64::INFINITY), 0.2);
    }

    #[test]
    fn logistic_gradient_bound_is_attained_at_the_boundary() {
        let w = vec![3.0, -4.0];
        let stub = LogisticStub { w: w.clone(), b: 0.0 };
        let centers = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let est = estimate_local_lipschitz(&stub, &centers, 0, 0.01, 200, 1).unwrap();
        let bound = 5.0 / 4.0;
        assert!(est.value <= bound + 1e-12);
        assert!(est.value > 0.999 * bound);
        assert!(est.is_lower_bound);
        let far = Tensor::matrix(1, 2, vec![3.0, -3.0]).unwrap();
        assert!(estimate_local_lipschitz(&stub, &far, 0, 0.01, 200, 1).unwrap().value < 0.01 * bound);
    }

    #[test]
    fn constant_classifier_has_zero_lipschitz() {
        let centers = Tensor::matrix(2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let est = estimate_local_lipschitz(&ConstantClassifier(2.0), &centers, 4, 0.5, 100, 1).unwrap();
        assert_eq!(est.value, 0.0);
        assert!(estimate_local_lipschitz(&ConstantClassifier(2.0), &centers, 4, 0.5, 99, 1).is_err());
    }

    #[test]
    fn accuracy_extremes() {
        let s = linear_schedule(20, 1e-3, 0.1).unwrap();
        let train = Tensor::matrix(4, 1, vec![-2.0, -1.0, 1.0, 2.0]).unwrap();
        let labels = LabelSet { labels: vec![0, 0, 1, 1], seed: 0 };
        let sharp = LogisticStub { w: vec![50.0], b: 0.0 };
        let a = measure_accuracy(&sharp, &train, &labels, &s, 0.1, &[0], 10, 1).unwrap();
        assert_eq!(a.gamma_hat, 0.0);
        let flat = ConstantClassifier(0.0);
        let b = measure_accuracy(&flat, &train, &labels, &s, 0.1, &[0, 5], 10, 1).unwrap();
        assert_eq!(b.gamma_hat, 1.0);
        assert!(measure_accuracy(&flat, &train, &labels, &s, 0.1, &[0], 9, 1).is_err());
    }

    #[test]
    fn bound_arithmetic() {
        assert_eq!(lemma_bound(0.0, 0.0), 1.0);
        assert!((lemma_bound(0.05, 0.1) - 0.855).abs() < 1e-12);
        let mut last = 2.0;
        for i in 0..=10 {
            let b = lemma_bound(i as f64 / 10.0, 0.2);
            assert!(b <= last);
            last = b;
        }
    }

    #[test]
    fn verify_counts_ball_membership() {
        let train = Tensor::matrix(2, 1, vec![0.0, 10.0]).unwrap();
        let samples = Tensor::matrix(4, 1, vec![0.05, 5.0, 9.5, 20.0]).unwrap();
        let inputs = LemmaInputs { lipschitz: 1.0, kappa: 0.1, gamma_hat: 0.0, nu_hat: 0.0, delta: 0.1 };
        let r = verify_lemma(&inputs, &samples, &train, Metric::L2, &FeatureMap::Identity).unwrap();
        assert_eq!(r.outside_count, 3);
        assert!(!r.pass);
        assert!(r.delta_condition_holds);
        assert!((r.lambda - 0.2).abs() < 1e-15);
        let loose = LemmaInputs { nu_hat: 0.2, gamma_hat: 0.1, ..inputs };
        assert!(verify_lemma(&loose, &samples, &train, Metric::L2, &FeatureMap::Identity).unwrap().pass);
        let gen = measure_generation(&[0.5, 0.05, 0.95, 0.3], 0.1).unwrap();
        assert_eq!(gen.nu_hat, 0.5);
    }
}
