//! Permutation test for anomalous closeness of generated samples to the
//! fine-tuning set.
//!
//! `a0` is the most similar (sample, fine-tune point) pair over `k` samples
//! drawn from `P`. Each replicate redraws `k` points from the full training
//! set `T` and `k` samples from `P`. Under the null the samples are no
//! closer to the fine-tuning set than to arbitrary training points, so `a0`
//! is exchangeable with the replicates and `p̂ = mean(a0 > a_i)` is roughly
//! uniform. The test rejects when `p̂ > 1 − level`.

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::quality::FeatureMap;
use crate::rng;
use crate::tensor::Tensor;

pub const MIN_REPLICATES: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationReport {
    pub a0: f64,
    pub replicates: Vec<f64>,
    pub p_hat: f64,
    pub level: f64,
    pub reject: bool,
    pub k: usize,
}

fn unit_rows(x: &Tensor) -> Result<Vec<Vec<f64>>> {
    (0..x.rows())
        .map(|i| {
            let r = x.row(i);
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(invalid(format!("row {i} is the zero vector")));
            }
            Ok(r.iter().map(|v| v / n).collect())
        })
        .collect()
}

fn max_pair(a: &[&Vec<f64>], b: &[&Vec<f64>]) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for x in a {
        for y in b {
            let v: f64 = x.iter().zip(y.iter()).map(|(p, q)| p * q).sum();
            best = best.max(v);
        }
    }
    best.clamp(-1.0, 1.0)
}

fn pick<'a>(rows: &'a [Vec<f64>], k: usize, r: &mut rng::Rng) -> Vec<&'a Vec<f64>> {
    sample(r, rows.len(), k).into_iter().map(|i| &rows[i]).collect()
}

/// `samples` is `P`, `finetune` is `S`, `full_train` is `T ⊇ S`.
pub fn permutation_test(
    samples: &Tensor,
    finetune: &Tensor,
    full_train: &Tensor,
    n_replicates: usize,
    features: &FeatureMap,
    level: f64,
    seed: u64,
) -> Result<PermutationReport> {
    let k = finetune.rows();
    if k == 0 {
        return Err(invalid("fine-tuning set is empty"));
    }
    if full_train.rows() < 2 * k {
        return Err(invalid(format!(
            "full training set needs at least {} rows, has {}",
            2 * k,
            full_train.rows()
        )));
    }
    if samples.rows() < k {
        return Err(invalid(format!("need at least {k} samples, have {}", samples.rows())));
    }
    if n_replicates < MIN_REPLICATES {
        return Err(invalid(format!("need at least {MIN_REPLICATES} replicates")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(invalid("level must lie in (0, 1)"));
    }
    let p = unit_rows(&features.apply(samples)?)?;
    let s = unit_rows(&features.apply(finetune)?)?;
    let t = unit_rows(&features.apply(full_train)?)?;

    let mut r0 = rng::stream(seed, 0);
    let s_all: Vec<&Vec<f64>> = s.iter().collect();
    let a0 = max_pair(&pick(&p, k, &mut r0), &s_all);
    let replicates: Vec<f64> = (0..n_replicates)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, i as u64 + 1);
            let si = pick(&t, k, &mut r);
            let pi = pick(&p, k, &mut r);
            max_pair(&pi, &si)
        })
        .collect();
    let p_hat = replicates.iter().filter(|&&a| a0 > a).count() as f64 / n_replicates as f64;
    Ok(PermutationReport {
        a0,
        p_hat,
        level,
        reject: p_hat > 1.0 - level,
        k,
        replicates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn gaussian(n: usize, d: usize, r: &mut rng::Rng) -> Tensor {
        let v = (0..n * d).map(|_| r.sample(rand_distr::StandardNormal)).collect();
        Tensor::matrix(n, d, v).unwrap()
    }

    #[test]
    fn copies_of_the_finetune_set_are_rejected() {
        let mut r = rng::seeded(4);
        let full = gaussian(2000, 6, &mut r);
        let finetune = full.select_rows(&[0, 1, 2, 3]);
        let rep = permutation_test(&finetune, &finetune, &full, 200, &FeatureMap::Identity, 0.05, 1).unwrap();
        assert!((rep.a0 - 1.0).abs() < 1e-12);
        assert!(rep.p_hat > 0.95 && rep.reject);
    }

    #[test]
    fn seeded_and_validated() {
        let mut r = rng::seeded(5);
        let full = gaussian(100, 3, &mut r);
        let s = full.select_rows(&(0..10).collect::<Vec<_>>());
        let p = gaussian(30, 3, &mut r);
        let a = permutation_test(&p, &s, &full, 100, &FeatureMap::Identity, 0.05, 9).unwrap();
        let b = permutation_test(&p, &s, &full, 100, &FeatureMap::Identity, 0.05, 9).unwrap();
        assert_eq!(a, b);
        assert!((0.0..=1.0).contains(&a.p_hat));
        assert!(permutation_test(&p, &s, &full, 99, &FeatureMap::Identity, 0.05, 9).is_err());
        assert!(permutation_test(&p, &s, &full.select_rows(&(0..19).collect::<Vec<_>>()), 100, &FeatureMap::Identity, 0.05, 9).is_err());
        assert!(permutation_test(&p.select_rows(&[0, 1]), &s, &full, 100, &FeatureMap::Identity, 0.05, 9).is_err());
    }
}
