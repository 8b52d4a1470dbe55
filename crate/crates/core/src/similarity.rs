//! Nearest-neighbour similarity audits between generated samples and the
//! training set.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

pub const HISTOGRAM_BINS: usize = 50;

/// Distance used for δ-balls around training points.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    L2,
    /// `1 − cos(a, b)`.
    Cosine,
}

impl Metric {
    pub fn distance(self, a: &[f64], b: &[f64]) -> Result<f64> {
        match self {
            Metric::L2 => Ok(l2(a, b)),
            Metric::Cosine => Ok(1.0 - cosine_similarity(a, b)?),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(Metric::L2),
            "cosine" => Ok(Metric::Cosine),
            other => Err(invalid(format!("unknown metric {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::L2 => "l2",
            Metric::Cosine => "cosine",
        }
    }
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(invalid(format!("length mismatch {} vs {}", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(invalid("cosine similarity of a zero vector"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

fn check_pair(samples: &Tensor, train: &Tensor) -> Result<()> {
    if samples.ndim() != 2 || train.ndim() != 2 {
        return Err(invalid("samples and training set must be matrices"));
    }
    if train.rows() == 0 {
        return Err(invalid("empty reference set"));
    }
    if samples.cols() != train.cols() {
        return Err(invalid(format!(
            "feature width mismatch {} vs {}",
            samples.cols(),
            train.cols()
        )));
    }
    Ok(())
}

fn unit_rows(x: &Tensor) -> Result<Vec<f64>> {
    let d = x.cols();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.rows() {
        let r = x.row(i);
        let n = norm(r);
        if n == 0.0 {
            return Err(invalid(format!("row {i} is the zero vector")));
        }
        out.extend(r.iter().map(|v| v / n));
    }
    debug_assert_eq!(out.len(), x.rows() * d);
    Ok(out)
}

/// Most similar training row (by cosine) for every sample. Ties go to the
/// lowest index.
pub fn nearest_cosine(samples: &Tensor, train: &Tensor) -> Result<Vec<(usize, f64)>> {
    check_pair(samples, train)?;
    let d = samples.cols();
    let a = unit_rows(samples)?;
    let b = unit_rows(train)?;
    Ok(a.chunks(d)
        .map(|s| {
            let mut best = (0, f64::NEG_INFINITY);
            for (j, r) in b.chunks(d).enumerate() {
                let v: f64 = s.iter().zip(r).map(|(x, y)| x * y).sum();
                if v > best.1 {
                    best = (j, v);
                }
            }
            (best.0, best.1.clamp(-1.0, 1.0))
        })
        .collect())
}

/// Nearest training row under `metric` and its distance.
pub fn nearest_distances(samples: &Tensor, train: &Tensor, metric: Metric) -> Result<Vec<(usize, f64)>> {
    match metric {
        Metric::Cosine => Ok(nearest_cosine(samples, train)?
            .into_iter()
            .map(|(j, s)| (j, 1.0 - s))
            .collect()),
        Metric::L2 => {
            check_pair(samples, train)?;
            Ok((0..samples.rows())
                .map(|i| {
                    let s = samples.row(i);
                    let mut best = (0, f64::INFINITY);
                    for j in 0..train.rows() {
                        let v = l2(s, train.row(j));
                        if v < best.1 {
                            best = (j, v);
                        }
                    }
                    best
                })
                .collect())
        }
    }
}

pub fn nearest_neighbor(x: &[f64], dataset: &Tensor) -> Result<(usize, f64)> {
    let q = Tensor::matrix(1, x.len(), x.to_vec())?;
    Ok(nearest_cosine(&q, dataset)?[0])
}

/// Fraction of samples whose nearest training point lies strictly within
/// `delta` under `metric`.
pub fn inside_fraction(samples: &Tensor, train: &Tensor, metric: Metric, delta: f64) -> Result<f64> {
    let d = nearest_distances(samples, train, metric)?;
    Ok(d.iter().filter(|(_, v)| *v < delta).count() as f64 / d.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub n_samples: usize,
    pub n_train: usize,
    pub threshold: f64,
    pub exceed_count: usize,
    pub exceed_fraction: f64,
    pub max_similarity: f64,
    pub mean_similarity: f64,
    /// Counts over `[0, 1]` in equal bins; negatives land in the first bin.
    pub histogram: Vec<usize>,
    /// `(nearest training index, similarity)` per sample.
    pub nearest: Vec<(usize, f64)>,
}

impl SimilarityReport {
    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count\n");
        let w = 1.0 / self.histogram.len() as f64;
        for (i, c) in self.histogram.iter().enumerate() {
            out.push_str(&format!("{:.2},{:.2},{}\n", i as f64 * w, (i + 1) as f64 * w, c));
        }
        out
    }
}

pub fn histogram_bin(v: f64, bins: usize) -> usize {
    ((v.max(0.0) * bins as f64) as usize).min(bins - 1)
}

/// Nearest-neighbour cosine similarities of `samples` against `train` with
/// the fraction strictly above `threshold`.
pub fn similarity_report(samples: &Tensor, train: &Tensor, threshold: f64) -> Result<SimilarityReport> {
    if samples.rows() == 0 {
        return Err(invalid("no samples to audit"));
    }
    let nearest = nearest_cosine(samples, train)?;
    let exceed_count = nearest.iter().filter(|(_, s)| *s > threshold).count();
    let mut histogram = vec![0usize; HISTOGRAM_BINS];
    for (_, s) in &nearest {
        histogram[histogram_bin(*s, HISTOGRAM_BINS)] += 1;
    }
    let sims = nearest.iter().map(|(_, s)| *s);
    Ok(SimilarityReport {
        n_samples: samples.rows(),
        n_train: train.rows(),
        threshold,
        exceed_count,
        exceed_fraction: exceed_count as f64 / nearest.len() as f64,
        max_similarity: sims.clone().fold(f64::NEG_INFINITY, f64::max),
        mean_similarity: sims.sum::<f64>() / nearest.len() as f64,
        histogram,
        nearest,
    })
}

/// One-sided two-proportion z-test of `H0: p_protected ≥ p_baseline`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExceedanceTest {
    pub baseline_fraction: f64,
    pub protected_fraction: f64,
    pub z: f64,
    pub p_value: f64,
    /// Pooled proportion of 0 or 1: no evidence either way, `p = 1`.
    pub degenerate: bool,
}

pub fn exceedance_test(
    baseline_count: usize,
    baseline_n: usize,
    protected_count: usize,
    protected_n: usize,
) -> Result<ExceedanceTest> {
    if baseline_n == 0 || protected_n == 0 {
        return Err(invalid("exceedance test needs non-empty groups"));
    }
    if baseline_count > baseline_n || protected_count > protected_n {
        return Err(invalid("count exceeds group size"));
    }
    let pb = baseline_count as f64 / baseline_n as f64;
    let pp = protected_count as f64 / protected_n as f64;
    let pooled = (baseline_count + protected_count) as f64 / (baseline_n + protected_n) as f64;
    if pooled == 0.0 || pooled == 1.0 {
        return Ok(ExceedanceTest {
            baseline_fraction: pb,
            protected_fraction: pp,
            z: 0.0,
            p_value: 1.0,
            degenerate: true,
        });
    }
    let se = (pooled * (1.0 - pooled) * (1.0 / baseline_n as f64 + 1.0 / protected_n as f64)).sqrt();
    let z = (pb - pp) / se;
    Ok(ExceedanceTest {
        baseline_fraction: pb,
        protected_fraction: pp,
        z,
        p_value: upper_tail(z),
        degenerate: false,
    })
}

/// `1 − Φ(z)`, accurate far into the tail.
pub fn upper_tail(z: f64) -> f64 {
    Normal::standard().sf(z)
}
