//! Classifier-protected sampling.
//!
//! A classifier trained to memorize random binary labels is confident near
//! the training data. Whenever it is confident about the current iterate
//! (`p(y=1)` outside `[α, 1−α]`), the noise prediction is pushed along
//! `∇ log(τ + p(opposite label))`, steering the trajectory toward the
//! label it does not currently favour and away from memorized points.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Graph, NodeId};
use crate::diffusion::{ddim_step, NoiseSchedule};
use crate::error::{invalid, Error, Result};
use crate::models::{LogitModel, NoisePredictor};
use crate::quality::FeatureMap;
use crate::rng;
use crate::similarity::Metric;
use crate::tensor::Tensor;

/// Rows per batch when sampling. Fixed so that results do not depend on the
/// number of worker threads.
pub const SAMPLE_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    /// Trigger threshold: guidance fires when `p(y=1) ∉ [alpha, 1 − alpha]`.
    pub alpha: f64,
    /// Guidance strength `s`.
    pub scale: f64,
    /// Stabilizer inside the log.
    pub tau: f64,
    /// DDIM stride over the training timesteps.
    pub stride: usize,
    pub record_trace: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            scale: 1.0,
            tau: 0.001,
            stride: 1,
            record_trace: false,
        }
    }
}

impl GuidanceConfig {
    /// `alpha = 0.5` is accepted: the two branches stay disjoint and guidance
    /// fires on every step with `p(y=1) ≠ 0.5`.
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 0.5) {
            return Err(invalid(format!("alpha must lie in (0, 0.5], got {}", self.alpha)));
        }
        if !(self.tau > 0.0) {
            return Err(invalid("tau must be positive"));
        }
        if !(self.scale >= 0.0) || !self.scale.is_finite() {
            return Err(invalid("scale must be finite and non-negative"));
        }
        if self.stride == 0 {
            return Err(invalid("stride must be at least 1"));
        }
        Ok(())
    }
}

/// Which guidance branch fired for a row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    /// Confident in label 1, pushed toward label 0.
    TowardZero,
    /// Confident in label 0, pushed toward label 1.
    TowardOne,
    None,
}

impl Branch {
    pub fn for_probability(p1: f64, alpha: f64) -> Self {
        if 1.0 - p1 < alpha {
            Branch::TowardZero
        } else if p1 < alpha {
            Branch::TowardOne
        } else {
            Branch::None
        }
    }

    pub fn triggered(self) -> bool {
        self != Branch::None
    }
}

/// Output of the protected noise prediction for a batch of iterates.
#[derive(Clone, Debug)]
pub struct GuidedEps {
    pub eps_hat: Tensor,
    pub eps: Tensor,
    pub branch: Vec<Branch>,
    /// `p(y=1 | x_t, t)` per row.
    pub p1: Vec<f64>,
}

/// Appends `Σ_i mask_i · log(τ + sigmoid(sign_i · ℓ_i))` to `g` and returns
/// its gradient with respect to the leaf `"x"`.
fn masked_log_prob_grad(
    g: &mut Graph,
    logit: NodeId,
    signs: &[f64],
    mask: &[f64],
    tau: Option<f64>,
) -> Result<Tensor> {
    let n = signs.len();
    let s = g.constant(Tensor::matrix(n, 1, signs.to_vec())?);
    let z = g.mul(logit, s)?;
    let p = g.sigmoid(z)?;
    let inner = match tau {
        Some(tau) => g.affine(p, 1.0, tau)?,
        None => p,
    };
    let lp = g.log(inner)?;
    let m = g.constant(Tensor::matrix(n, 1, mask.to_vec())?);
    let masked = g.mul(lp, m)?;
    let obj = g.sum(masked)?;
    Ok(g.backward(obj, &["x"])?.remove("x").expect("input gradient"))
}

/// Protected noise prediction for every row of `x_t` at timestep `t`.
///
/// If `p(y=0) < α` the row is pushed with
/// `ε̂ = ε_θ − s·√(1−ᾱ_t)·∇ log(τ + p(y=0))`, if `p(y=1) < α` with the
/// symmetric `y = 1` term; otherwise `ε̂ = ε_θ` unchanged.
pub fn cp_epsilon_hat<D, C>(
    denoiser: &D,
    classifier: &C,
    x_t: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
    cfg: &GuidanceConfig,
) -> Result<GuidedEps>
where
    D: NoisePredictor + ?Sized,
    C: LogitModel + ?Sized,
{
    let n = x_t.rows();
    let ts = vec![t; n];
    let eps = denoiser.predict(x_t, &ts)?;
    x_t.check_same_shape(&eps, "cp_epsilon_hat")?;
    let mut g = Graph::new();
    let x = g.leaf("x", x_t.clone());
    let logit = classifier.logit_graph(&mut g, x, &ts)?;
    let p1: Vec<f64> = g.value(logit).data().iter().map(|&l| sigmoid(l)).collect();
    let branch: Vec<Branch> = p1.iter().map(|&p| Branch::for_probability(p, cfg.alpha)).collect();

    if cfg.scale == 0.0 || !branch.iter().any(|b| b.triggered()) {
        return Ok(GuidedEps {
            eps_hat: eps.clone(),
            eps,
            branch,
            p1,
        });
    }

    let signs: Vec<f64> = branch
        .iter()
        .map(|b| if *b == Branch::TowardZero { -1.0 } else { 1.0 })
        .collect();
    let mask: Vec<f64> = branch.iter().map(|b| b.triggered() as u8 as f64).collect();
    let grad = masked_log_prob_grad(&mut g, logit, &signs, &mask, Some(cfg.tau))?;
    if !grad.is_finite() {
        return Err(Error::NonFinite(format!("guidance gradient at t={t}")));
    }
    let coef = cfg.scale * (1.0 - schedule.alpha_bar(t)).sqrt();
    let d = x_t.cols();
    let mut out = eps.to_vec();
    for (i, b) in branch.iter().enumerate() {
        if b.triggered() {
            for j in 0..d {
                out[i * d + j] -= coef * grad.data()[i * d + j];
            }
        }
    }
    let eps_hat = Tensor::new_finite(eps.shape().to_vec(), out, "cp_epsilon_hat")?;
    Ok(GuidedEps {
        eps_hat,
        eps,
        branch,
        p1,
    })
}

/// Plain classifier guidance toward `target_y`, always on:
/// `ε̂ = ε_θ − s·√(1−ᾱ_t)·∇ log p(y | x_t, t)`.
pub fn classifier_guided_eps<D, C>(
    denoiser: &D,
    classifier: &C,
    x_t: &Tensor,
    t: usize,
    target_y: u8,
    scale: f64,
    schedule: &NoiseSchedule,
) -> Result<Tensor>
where
    D: NoisePredictor + ?Sized,
    C: LogitModel + ?Sized,
{
    if target_y > 1 {
        return Err(invalid(format!("target label must be 0 or 1, got {target_y}")));
    }
    let n = x_t.rows();
    let ts = vec![t; n];
    let eps = denoiser.predict(x_t, &ts)?;
    let sign = if target_y == 1 { 1.0 } else { -1.0 };
    let mut g = Graph::new();
    let x = g.leaf("x", x_t.clone());
    let logit = classifier.logit_graph(&mut g, x, &ts)?;
    let grad = masked_log_prob_grad(&mut g, logit, &vec![sign; n], &vec![1.0; n], None)?;
    let coef = scale * (1.0 - schedule.alpha_bar(t)).sqrt();
    let data: Vec<f64> = eps
        .data()
        .iter()
        .zip(grad.data())
        .map(|(e, g)| e - coef * g)
        .collect();
    Tensor::new_finite(eps.shape().to_vec(), data, "classifier_guided_eps")
}

/// One row of the per-step probability trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub sample_id: usize,
    pub step: usize,
    pub t: usize,
    pub p1: f64,
    pub triggered: bool,
}

#[derive(Clone, Debug)]
pub struct SampleRun {
    pub samples: Tensor,
    /// `p(y=1 | x̃, 0)` of every final sample (empty for unguided runs).
    pub final_p1: Vec<f64>,
    /// Number of triggered rows at each visited step.
    pub trigger_counts: Vec<usize>,
    /// Visited `(t, t_prev)` pairs.
    pub timesteps: Vec<(usize, usize)>,
    pub trace: Option<Vec<TraceRow>>,
    pub seed: u64,
}

impl SampleRun {
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("sample_id,step,t,p1,triggered\n");
        for r in self.trace.iter().flatten() {
            out.push_str(&format!(
                "{},{},{},{:.17e},{}\n",
                r.sample_id, r.step, r.t, r.p1, r.triggered as u8
            ));
        }
        out
    }
}

/// Initial noise `x_T` for sample `index`.
pub fn initial_noise(seed: u64, index: u64, dim: usize) -> Vec<f64> {
    use rand::Rng;
    let mut r = rng::stream(seed, index);
    (0..dim).map(|_| r.sample(rand_distr::StandardNormal)).collect()
}

struct ChunkOut {
    rows: Vec<f64>,
    final_p1: Vec<f64>,
    counts: Vec<usize>,
    trace: Vec<TraceRow>,
}

#[allow(clippy::too_many_arguments)]
fn run_chunk<D, C>(
    denoiser: &D,
    classifier: Option<&C>,
    schedule: &NoiseSchedule,
    cfg: &GuidanceConfig,
    stream_ids: &[u64],
    first_sample: usize,
    dim: usize,
    seed: u64,
) -> Result<ChunkOut>
where
    D: NoisePredictor + ?Sized,
    C: LogitModel + ?Sized,
{
    let steps = schedule.ddim_timesteps(cfg.stride);
    let init: Vec<f64> = stream_ids
        .iter()
        .flat_map(|&id| initial_noise(seed, id, dim))
        .collect();
    let n = stream_ids.len();
    let mut x = Tensor::new(vec![n, dim], init)?;
    let mut counts = Vec::with_capacity(steps.len());
    let mut trace = Vec::new();
    let tag = |t: usize, e: Error| Error::Sampling {
        sample: first_sample,
        t,
        source: Box::new(e),
    };
    for (step, &(t, t_prev)) in steps.iter().enumerate() {
        let eps_hat = match classifier {
            Some(c) => {
                let out = cp_epsilon_hat(denoiser, c, &x, t, schedule, cfg).map_err(|e| tag(t, e))?;
                counts.push(out.branch.iter().filter(|b| b.triggered()).count());
                if cfg.record_trace {
                    for (i, (&p, b)) in out.p1.iter().zip(&out.branch).enumerate() {
                        trace.push(TraceRow {
                            sample_id: first_sample + i,
                            step,
                            t,
                            p1: p,
                            triggered: b.triggered(),
                        });
                    }
                }
                out.eps_hat
            }
            None => {
                counts.push(0);
                denoiser.predict(&x, &vec![t; n]).map_err(|e| tag(t, e))?
            }
        };
        x = ddim_step(&eps_hat, &x, t, t_prev, schedule).map_err(|e| tag(t, e))?;
    }
    let final_p1 = match classifier {
        Some(c) => c.prob_one(&x, &vec![0; n]).map_err(|e| tag(0, e))?,
        None => Vec::new(),
    };
    Ok(ChunkOut {
        rows: x.to_vec(),
        final_p1,
        counts,
        trace,
    })
}

fn generate_streams<D, C>(
    denoiser: &D,
    classifier: Option<&C>,
    schedule: &NoiseSchedule,
    cfg: &GuidanceConfig,
    stream_ids: &[u64],
    dim: usize,
    seed: u64,
) -> Result<SampleRun>
where
    D: NoisePredictor + Sync + ?Sized,
    C: LogitModel + Sync + ?Sized,
{
    cfg.validate()?;
    let n = stream_ids.len();
    if n == 0 {
        return Err(invalid("need at least one sample"));
    }
    let chunks: Vec<Result<ChunkOut>> = stream_ids
        .par_chunks(SAMPLE_CHUNK)
        .enumerate()
        .map(|(ci, ids)| {
            run_chunk(denoiser, classifier, schedule, cfg, ids, ci * SAMPLE_CHUNK, dim, seed)
        })
        .collect();
    let timesteps = schedule.ddim_timesteps(cfg.stride);
    let mut rows = Vec::with_capacity(n * dim);
    let mut final_p1 = Vec::new();
    let mut counts = vec![0usize; timesteps.len()];
    let mut trace = Vec::new();
    for c in chunks {
        let c = c?;
        rows.extend(c.rows);
        final_p1.extend(c.final_p1);
        for (acc, v) in counts.iter_mut().zip(c.counts) {
            *acc += v;
        }
        trace.extend(c.trace);
    }
    Ok(SampleRun {
        samples: Tensor::new(vec![n, dim], rows)?,
        final_p1,
        trigger_counts: counts,
        timesteps,
        trace: cfg.record_trace.then_some(trace),
        seed,
    })
}

/// `n` protected DDIM trajectories. Sample `i` starts from the noise stream
/// `(seed, i)`, so it is reproducible on its own.
pub fn cpsample_generate<D, C>(
    denoiser: &D,
    classifier: &C,
    schedule: &NoiseSchedule,
    cfg: &GuidanceConfig,
    n: usize,
    dim: usize,
    seed: u64,
) -> Result<SampleRun>
where
    D: NoisePredictor + Sync + ?Sized,
    C: LogitModel + Sync + ?Sized,
{
    let ids: Vec<u64> = (0..n as u64).collect();
    generate_streams(denoiser, Some(classifier), schedule, cfg, &ids, dim, seed)
}

/// Unguided DDIM (η = 0) from the same noise streams as [`cpsample_generate`].
pub fn ddim_generate<D>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    stride: usize,
    n: usize,
    dim: usize,
    seed: u64,
) -> Result<Tensor>
where
    D: NoisePredictor + Sync + ?Sized,
{
    let cfg = GuidanceConfig {
        stride,
        ..GuidanceConfig::default()
    };
    let ids: Vec<u64> = (0..n as u64).collect();
    let run = generate_streams::<D, crate::models::testing::ConstantClassifier>(
        denoiser, None, schedule, &cfg, &ids, dim, seed,
    )?;
    Ok(run.samples)
}

/// Result of [`rejection_sample`].
#[derive(Clone, Debug)]
pub struct RejectionRun {
    pub samples: Tensor,
    /// Draws used by each slot, including the accepted one.
    pub tries: Vec<usize>,
    pub tries_used: usize,
}

impl RejectionRun {
    pub fn acceptance_rate(&self) -> f64 {
        self.tries.len() as f64 / self.tries_used as f64
    }

    pub fn mean_tries_per_accept(&self) -> f64 {
        self.tries_used as f64 / self.tries.len() as f64
    }
}

/// Draw stream for try `j` of slot `i`.
fn rejection_stream(slot: usize, attempt: usize) -> u64 {
    ((slot as u64) << 24) | attempt as u64
}

/// Unguided DDIM with rejection: any draw within `delta` of a training
/// point (under `metric`, after `features`) is discarded and redrawn.
#[allow(clippy::too_many_arguments)]
pub fn rejection_sample<D>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    stride: usize,
    train: &Tensor,
    delta: f64,
    metric: Metric,
    features: &FeatureMap,
    max_tries: usize,
    n: usize,
    seed: u64,
) -> Result<RejectionRun>
where
    D: NoisePredictor + Sync + ?Sized,
{
    if !(delta > 0.0) {
        return Err(invalid("delta must be positive"));
    }
    if max_tries == 0 {
        return Err(invalid("max_tries must be at least 1"));
    }
    if max_tries >= 1 << 24 {
        return Err(invalid("max_tries must be below 2^24"));
    }
    let dim = train.cols();
    let train_feat = features.apply(train)?;
    let cfg = GuidanceConfig {
        stride,
        ..GuidanceConfig::default()
    };
    let mut accepted: Vec<Option<Vec<f64>>> = vec![None; n];
    let mut tries = vec![0usize; n];
    let mut pending: Vec<usize> = (0..n).collect();
    while !pending.is_empty() {
        let ids: Vec<u64> = pending.iter().map(|&s| rejection_stream(s, tries[s])).collect();
        let run = generate_streams::<D, crate::models::testing::ConstantClassifier>(
            denoiser, None, schedule, &cfg, &ids, dim, seed,
        )?;
        let feat = features.apply(&run.samples)?;
        let dists = crate::similarity::nearest_distances(&feat, &train_feat, metric)?;
        let mut still = Vec::new();
        for (row, &slot) in pending.iter().enumerate() {
            tries[slot] += 1;
            if dists[row].1 >= delta {
                accepted[slot] = Some(run.samples.row(row).to_vec());
            } else if tries[slot] >= max_tries {
                let done: Vec<Vec<f64>> = accepted.iter().flatten().cloned().collect();
                return Err(Error::TriesExhausted {
                    slot,
                    max_tries,
                    accepted: done.len(),
                    partial: Tensor::from_rows(&done, dim)?,
                });
            } else {
                still.push(slot);
            }
        }
        pending = still;
    }
    let rows: Vec<Vec<f64>> = accepted.into_iter().map(|r| r.expect("accepted")).collect();
    Ok(RejectionRun {
        samples: Tensor::from_rows(&rows, dim)?,
        tries_used: tries.iter().sum(),
        tries,
    })
}
