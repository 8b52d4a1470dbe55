//! Sample quality: Gaussian moment fits and the Fréchet distance between
//! feature distributions.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::models::ClassifierParams;
use crate::tensor::Tensor;

/// Ridge added to the covariance when there are too few rows to estimate it.
pub const COVARIANCE_RIDGE: f64 = 1e-6;

/// Feature space used by audits and quality metrics.
#[derive(Clone, Debug)]
pub enum FeatureMap {
    Identity,
    /// Last hidden activation of a trained classifier at `t = 0`.
    Classifier(ClassifierParams),
}

impl FeatureMap {
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            FeatureMap::Identity => Ok(x.clone()),
            FeatureMap::Classifier(c) => c.features(x),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FeatureMap::Identity => "identity",
            FeatureMap::Classifier(_) => "classifier",
        }
    }
}

pub fn extract_features(x: &Tensor, map: &FeatureMap) -> Result<Tensor> {
    map.apply(x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMoments {
    pub mean: Vec<f64>,
    /// Row-major `k × k`.
    pub cov: Vec<f64>,
    pub n: usize,
    pub regularized: bool,
}

impl GaussianMoments {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased covariance of the rows of `features`. With fewer
/// than `k + 1` rows a small ridge is added and `regularized` is set.
pub fn fit_gaussian(features: &Tensor) -> Result<GaussianMoments> {
    if features.ndim() != 2 {
        return Err(invalid("features must be a matrix"));
    }
    let (n, k) = (features.rows(), features.cols());
    if n < 2 {
        return Err(invalid(format!("need at least 2 rows to fit a covariance, got {n}")));
    }
    if !features.is_finite() {
        return Err(crate::Error::NonFinite("features".into()));
    }
    let mut mean = vec![0.0; k];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(features.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; k * k];
    for i in 0..n {
        let r = features.row(i);
        for a in 0..k {
            let da = r[a] - mean[a];
            for b in a..k {
                cov[a * k + b] += da * (r[b] - mean[b]);
            }
        }
    }
    for a in 0..k {
        for b in a..k {
            let v = cov[a * k + b] / (n - 1) as f64;
            cov[a * k + b] = v;
            cov[b * k + a] = v;
        }
    }
    let regularized = n < k + 1;
    if regularized {
        for a in 0..k {
            cov[a * k + a] += COVARIANCE_RIDGE;
        }
    }
    Ok(GaussianMoments { mean, cov, n, regularized })
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and the row-major matrix whose columns are the
/// eigenvectors.
pub fn symmetric_eigen(a: &[f64], k: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.len() != k * k {
        return Err(invalid("matrix is not k × k"));
    }
    let mut m = a.to_vec();
    let mut v = vec![0.0; k * k];
    for i in 0..k {
        v[i * k + i] = 1.0;
    }
    let scale: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..k)
            .flat_map(|i| (0..k).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * k + j] * m[i * k + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..k {
            for q in p + 1..k {
                let apq = m[p * k + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * k + q] - m[p * k + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for r in 0..k {
                    let (mrp, mrq) = (m[r * k + p], m[r * k + q]);
                    m[r * k + p] = c * mrp - s * mrq;
                    m[r * k + q] = s * mrp + c * mrq;
                }
                for r in 0..k {
                    let (mpr, mqr) = (m[p * k + r], m[q * k + r]);
                    m[p * k + r] = c * mpr - s * mqr;
                    m[q * k + r] = s * mpr + c * mqr;
                }
                for r in 0..k {
                    let (vrp, vrq) = (v[r * k + p], v[r * k + q]);
                    v[r * k + p] = c * vrp - s * vrq;
                    v[r * k + q] = s * vrp + c * vrq;
                }
            }
        }
    }
    let vals = (0..k).map(|i| m[i * k + i]).collect();
    Ok((vals, v))
}

/// Principal square root of a symmetric PSD matrix; negative eigenvalues
/// from round-off are clamped to zero.
pub fn psd_sqrt(a: &[f64], k: usize) -> Result<Vec<f64>> {
    let (vals, v) = symmetric_eigen(a, k)?;
    let clamped = vals.iter().filter(|&&l| l < 0.0).fold(0.0f64, |m, &l| m.max(-l));
    if clamped > 0.0 {
        log::debug!("psd_sqrt: clamped negative eigenvalue of magnitude {clamped:.3e}");
    }
    let mut out = vec![0.0; k * k];
    for (e, &lam) in vals.iter().enumerate() {
        let s = lam.max(0.0).sqrt();
        if s == 0.0 {
            continue;
        }
        for i in 0..k {
            let vi = v[i * k + e] * s;
            for j in 0..k {
                out[i * k + j] += vi * v[j * k + e];
            }
        }
    }
    Ok(out)
}

fn matmul(a: &[f64], b: &[f64], k: usize) -> Vec<f64> {
    crate::tensor::gemm(a, b, k, k, k, false, false)
}

/// `‖μa − μb‖² + tr(Σa + Σb − 2 (Σa^{1/2} Σb Σa^{1/2})^{1/2})`.
pub fn frechet_distance(a: &GaussianMoments, b: &GaussianMoments) -> Result<f64> {
    let k = a.dim();
    if b.dim() != k {
        return Err(invalid(format!("feature dims differ: {k} vs {}", b.dim())));
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let trace = |m: &[f64]| (0..k).map(|i| m[i * k + i]).sum::<f64>();
    let ra = psd_sqrt(&a.cov, k)?;
    let mut inner = matmul(&matmul(&ra, &b.cov, k), &ra, k);
    // Symmetrize against round-off before the second decomposition.
    for i in 0..k {
        for j in i + 1..k {
            let s = 0.5 * (inner[i * k + j] + inner[j * k + i]);
            inner[i * k + j] = s;
            inner[j * k + i] = s;
        }
    }
    let (vals, _) = symmetric_eigen(&inner, k)?;
    let cross: f64 = vals.iter().map(|l| l.max(0.0).sqrt()).sum();
    let fd = mean_term + trace(&a.cov) + trace(&b.cov) - 2.0 * cross;
    if !fd.is_finite() {
        return Err(crate::Error::NonFinite("frechet distance".into()));
    }
    Ok(fd.max(0.0))
}

/// Fréchet distance between two sample sets in the given feature space.
pub fn frechet_between(x: &Tensor, y: &Tensor, map: &FeatureMap) -> Result<f64> {
    let a = fit_gaussian(&map.apply(x)?)?;
    let b = fit_gaussian(&map.apply(y)?)?;
    frechet_distance(&a, &b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn moments(mean: Vec<f64>, cov: Vec<f64>) -> GaussianMoments {
        GaussianMoments { mean, cov, n: 100, regularized: false }
    }

    #[test]
    fn identical_and_shifted_gaussians() {
        let a = moments(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 1.0]);
        assert!(frechet_distance(&a, &a).unwrap() < 1e-12);
        let b = moments(vec![3.0, 4.0], vec![1.0, 0.0, 0.0, 1.0]);
        assert!((frechet_distance(&a, &b).unwrap() - 25.0).abs() < 1e-10);
    }

    #[test]
    fn scalar_variances() {
        // 1-d: (σa − σb)².
        let a = moments(vec![0.0], vec![4.0]);
        let b = moments(vec![0.0], vec![9.0]);
        assert!((frechet_distance(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn commuting_covariances_closed_form() {
        // Diagonal covariances: Σ (√a_i − √b_i)².
        let a = moments(vec![1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0, 0.0, 4.0, 0.0, 0.0, 0.0, 0.25]);
        let b = moments(vec![0.0, 0.0, 0.0], vec![9.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.25]);
        let want = 1.0 + 4.0 + 1.0 + 0.0;
        assert!((frechet_distance(&a, &b).unwrap() - want).abs() < 1e-10);
    }

    #[test]
    fn symmetric_in_arguments() {
        let a = moments(vec![0.5, -1.0], vec![2.0, 0.7, 0.7, 1.0]);
        let b = moments(vec![0.0, 0.2], vec![1.0, -0.3, -0.3, 0.5]);
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-10, "{ab} vs {ba}");
    }

    #[test]
    fn jacobi_reconstructs_matrix() {
        let a = vec![4.0, 1.0, -2.0, 1.0, 3.0, 0.5, -2.0, 0.5, 5.0];
        let (vals, v) = symmetric_eigen(&a, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let r: f64 = (0..3).map(|e| v[i * 3 + e] * vals[e] * v[j * 3 + e]).sum();
                assert!((r - a[i * 3 + j]).abs() < 1e-12);
            }
        }
        let root = psd_sqrt(&a, 3).unwrap();
        let sq = matmul(&root, &root, 3);
        for (x, y) in sq.iter().zip(&a) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn fit_examples() {
        let f = Tensor::matrix(2, 2, vec![0.0, 0.0, 2.0, 0.0]).unwrap();
        let g = fit_gaussian(&f).unwrap();
        assert_eq!(g.mean, vec![1.0, 0.0]);
        assert!(g.regularized);
        assert!((g.cov[0] - 2.0 - COVARIANCE_RIDGE).abs() < 1e-15);
        assert!((g.cov[3] - COVARIANCE_RIDGE).abs() < 1e-18);
        let same = Tensor::matrix(4, 1, vec![3.0; 4]).unwrap();
        let g = fit_gaussian(&same).unwrap();
        assert_eq!(g.cov, vec![0.0]);
        assert!(fit_gaussian(&Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap()).is_err());
    }

    #[test]
    fn fit_recovers_known_moments() {
        // x = μ + L z with L lower-triangular, Σ = L Lᵀ.
        let mu = [1.0, -2.0, 0.5];
        let l = [1.0, 0.0, 0.0, 0.5, 2.0, 0.0, -0.3, 0.2, 0.7];
        let mut r = rng::seeded(11);
        let n = 40_000;
        let mut rows = Vec::with_capacity(n * 3);
        for _ in 0..n {
            let z: Vec<f64> = (0..3).map(|_| r.sample(rand_distr::StandardNormal)).collect();
            for i in 0..3 {
                rows.push(mu[i] + (0..3).map(|j| l[i * 3 + j] * z[j]).sum::<f64>());
            }
        }
        let g = fit_gaussian(&Tensor::matrix(n, 3, rows).unwrap()).unwrap();
        let sigma = matmul(&l, &[l[0], l[3], l[6], l[1], l[4], l[7], l[2], l[5], l[8]], 3);
        let diff: f64 = g.cov.iter().zip(&sigma).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let fro: f64 = sigma.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(diff / fro < 0.05);
        for i in 0..3 {
            assert!((g.mean[i] - mu[i]).abs() < 0.05);
        }
    }
}
