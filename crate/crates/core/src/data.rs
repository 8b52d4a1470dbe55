//! Synthetic datasets small enough to memorize.

use std::collections::HashSet;
use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const RING_MODES: usize = 8;
pub const RING_RADIUS: f64 = 2.0;
pub const RING_STD: f64 = 0.3;
pub const SHAPE_SIDE: usize = 8;
pub const SHAPE_JITTER: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetKind {
    GaussMixture2d,
    TinyShapes8x8,
}

impl DatasetKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gauss-mixture-2d" => Ok(Self::GaussMixture2d),
            "tiny-shapes-8x8" => Ok(Self::TinyShapes8x8),
            other => Err(invalid(format!("unknown dataset kind {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::GaussMixture2d => "gauss-mixture-2d",
            Self::TinyShapes8x8 => "tiny-shapes-8x8",
        }
    }

    pub fn dim(self) -> usize {
        match self {
            Self::GaussMixture2d => 2,
            Self::TinyShapes8x8 => SHAPE_SIDE * SHAPE_SIDE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

fn ring_point<R: Rng>(r: &mut R) -> Vec<f64> {
    let k = r.random_range(0..RING_MODES);
    let a = 2.0 * PI * k as f64 / RING_MODES as f64;
    let e0: f64 = r.sample(StandardNormal);
    let e1: f64 = r.sample(StandardNormal);
    vec![RING_RADIUS * a.cos() + RING_STD * e0, RING_RADIUS * a.sin() + RING_STD * e1]
}

fn shape_image<R: Rng>(r: &mut R) -> Vec<f64> {
    let s = SHAPE_SIDE;
    let mut img = vec![-1.0; s * s];
    let level = r.random_range(0.3..=1.0);
    if r.random_bool(0.5) {
        let w = r.random_range(2..=6usize);
        let h = r.random_range(2..=6usize);
        let x0 = r.random_range(0..=s - w);
        let y0 = r.random_range(0..=s - h);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                img[y * s + x] = level;
            }
        }
    } else {
        let arm = r.random_range(1..=3usize);
        let cx = r.random_range(arm..s - arm);
        let cy = r.random_range(arm..s - arm);
        for d in 0..=2 * arm {
            img[cy * s + cx - arm + d] = level;
            img[(cy - arm + d) * s + cx] = level;
        }
    }
    for v in img.iter_mut() {
        let e: f64 = r.sample(StandardNormal);
        *v = (*v + SHAPE_JITTER * e).clamp(-1.0, 1.0);
    }
    img
}

fn draw(kind: DatasetKind, n: usize, seed: u64, purpose: &str, seen: &mut HashSet<Vec<u64>>) -> Result<Tensor> {
    let mut r = rng::seeded(rng::derive(seed, purpose));
    let mut rows = Vec::with_capacity(n);
    while rows.len() < n {
        let row = match kind {
            DatasetKind::GaussMixture2d => ring_point(&mut r),
            DatasetKind::TinyShapes8x8 => shape_image(&mut r),
        };
        // Exact duplicates would break the disjointness of the split.
        if seen.insert(row.iter().map(|v| v.to_bits()).collect()) {
            rows.push(row);
        }
    }
    Tensor::from_rows(&rows, kind.dim())
}

/// Seeded, disjoint train/test draws from the same distribution.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<(Tensor, Tensor)> {
    if spec.n_train < 2 || spec.n_test < 2 {
        return Err(invalid("train and test sets need at least 2 points each"));
    }
    let mut seen = HashSet::new();
    let train = draw(spec.kind, spec.n_train, spec.seed, "data.train", &mut seen)?;
    let test = draw(spec.kind, spec.n_test, spec.seed, "data.test", &mut seen)?;
    Ok((train, test))
}
