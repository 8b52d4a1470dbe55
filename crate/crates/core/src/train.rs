//! Random-label assignment, Adam with an EMA shadow, and the two training
//! loops (ε-prediction for the denoiser, noisy binary cross-entropy for the
//! random-label classifier).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::diffusion::{forward_rows, score_matching_graph, NoiseSchedule};
use crate::error::{invalid, Error, Result};
use crate::models::{ClassifierParams, DenoiserParams, LogitModel, MlpSpec, Params};
use crate::rng;
use crate::tensor::Tensor;

/// Random binary labels over training indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    pub labels: Vec<u8>,
    pub seed: u64,
}

impl LabelSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, i: usize) -> u8 {
        self.labels[i]
    }
}

/// I.i.d. fair-coin labels, reproducible from `seed`.
pub fn assign_random_labels(n: usize, seed: u64) -> Result<LabelSet> {
    if n == 0 {
        return Err(invalid("cannot label an empty dataset"));
    }
    let mut r = rng::seeded(seed);
    let labels = (0..n).map(|_| r.random_bool(0.5) as u8).collect();
    Ok(LabelSet { labels, seed })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub ema_rate: f64,
    /// Classifier only: stop once cross-entropy on clean inputs falls below this.
    pub target_ce: f64,
    /// Classifier only: how often (in steps) the clean-input CE is checked.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 128,
            max_steps: 20_000,
            ema_rate: 0.9999,
            target_ce: 0.05,
            eval_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.ema_rate) {
            return Err(invalid("EMA rate must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch size must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid("Adam betas must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// `shadow' = rate · shadow + (1 − rate) · params`, elementwise.
pub fn ema_update(params: &Params, shadow: &Params, rate: f64) -> Result<Params> {
    if !(0.0..1.0).contains(&rate) {
        return Err(invalid("EMA rate must lie in [0, 1)"));
    }
    let mut out = Params::new();
    for (name, p) in params {
        let s = shadow
            .get(name)
            .ok_or_else(|| invalid(format!("shadow is missing `{name}`")))?;
        let v = s.zip_map(p, "ema_update", |s, p| rate * s + (1.0 - rate) * p)?;
        out.insert(name.clone(), v);
    }
    if shadow.len() != params.len() {
        return Err(invalid("shadow and params hold different tensors"));
    }
    Ok(out)
}

/// Adam with bias correction, keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Params,
    v: Params,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, params: &Params) -> Self {
        let zeros = |p: &Params| -> Params {
            p.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()))).collect()
        };
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.epsilon,
            step: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    pub fn update(&mut self, params: &mut Params, grads: &std::collections::HashMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| invalid(format!("missing gradient for `{name}`")))?;
            let m = self.m.get_mut(name).expect("adam state");
            let v = self.v.get_mut(name).expect("adam state");
            let mut md = m.to_vec();
            let mut vd = v.to_vec();
            let mut pd = p.to_vec();
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gi;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi;
                let mh = md[i] / bc1;
                let vh = vd[i] / bc2;
                pd[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
            let shape = p.shape().to_vec();
            *m = Tensor::new(shape.clone(), md)?;
            *v = Tensor::new(shape.clone(), vd)?;
            *p = Tensor::new(shape, pd)?;
        }
        Ok(())
    }
}

/// Raw and EMA weights of a finished run, with its loss trace.
#[derive(Clone, Debug)]
pub struct Trained<M> {
    pub raw: M,
    pub ema: M,
    pub loss_trace: Vec<f64>,
    pub steps: usize,
}

fn batch_indices<R: Rng + ?Sized>(n: usize, batch: usize, rng: &mut R) -> Vec<usize> {
    if batch >= n {
        return (0..n).collect();
    }
    rand::seq::index::sample(rng, n, batch).into_vec()
}

pub fn train_denoiser(
    data: &Tensor,
    schedule: &NoiseSchedule,
    spec: MlpSpec,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Trained<DenoiserParams>> {
    cfg.validate()?;
    if data.rows() == 0 || data.is_empty() {
        return Err(invalid("training data is empty"));
    }
    if data.cols() != spec.input_dim {
        return Err(invalid(format!(
            "data has {} columns, model expects {}",
            data.cols(),
            spec.input_dim
        )));
    }
    let mut r = rng::seeded(seed);
    let init = DenoiserParams::init(spec, &mut r);
    let mut model = init.clone();
    let mut shadow = init.params.clone();
    let mut opt = Adam::new(cfg, &model.params);
    let names: Vec<String> = model.params.keys().cloned().collect();
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut trace = Vec::with_capacity(cfg.max_steps);

    for step in 0..cfg.max_steps {
        let idx = batch_indices(data.rows(), cfg.batch_size, &mut r);
        let batch = data.select_rows(&idx);
        let mut g = Graph::new();
        let loss = score_matching_graph(&mut g, &model, &batch, schedule, &mut r)
            .map_err(|e| diverged_or(e, step))?;
        let lv = g.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::Diverged { step, loss: lv });
        }
        trace.push(lv);
        let grads = g.backward(loss, &name_refs).map_err(|e| diverged_or(e, step))?;
        opt.update(&mut model.params, &grads)?;
        shadow = ema_update(&model.params, &shadow, cfg.ema_rate)?;
        if step % 1000 == 0 {
            log::debug!("denoiser step {step}: loss {lv:.5}");
        }
    }
    let ema = DenoiserParams {
        spec: model.spec.clone(),
        params: shadow,
    };
    Ok(Trained {
        raw: model,
        ema,
        loss_trace: trace,
        steps: cfg.max_steps,
    })
}

fn diverged_or(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite(_) => Error::Diverged {
            step,
            loss: f64::NAN,
        },
        other => other,
    }
}

/// Result of a classifier run: weights plus the clean-input fit.
#[derive(Clone, Debug)]
pub struct ClassifierFit {
    pub model: Trained<ClassifierParams>,
    /// Cross-entropy of the EMA weights on clean inputs when training stopped.
    pub clean_ce: f64,
    /// Label accuracy of the EMA weights on clean inputs.
    pub clean_accuracy: f64,
    pub reached_target: bool,
}

/// Mean binary cross-entropy and accuracy of `model` on `data` at timestep 0.
pub fn clean_fit<M: LogitModel + ?Sized>(model: &M, data: &Tensor, labels: &LabelSet) -> Result<(f64, f64)> {
    let n = data.rows();
    let logits = model.logits(data, &vec![0; n])?;
    let mut ce = 0.0;
    let mut correct = 0usize;
    for (i, &l) in logits.iter().enumerate() {
        let sign = if labels.get(i) == 1 { 1.0 } else { -1.0 };
        ce -= crate::autodiff::log_sigmoid(sign * l);
        if (l > 0.0) == (labels.get(i) == 1) {
            correct += 1;
        }
    }
    Ok((ce / n as f64, correct as f64 / n as f64))
}

/// Trains p_φ(y | x_t, t) on the random labels. Each step draws `t`
/// uniformly from `0..=T` (0 meaning a clean input) and noises the batch
/// accordingly. Stops early once the EMA weights reach `cfg.target_ce` on
/// clean inputs and label every training point correctly.
pub fn train_classifier(
    data: &Tensor,
    labels: &LabelSet,
    schedule: &NoiseSchedule,
    spec: MlpSpec,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<ClassifierFit> {
    cfg.validate()?;
    if labels.len() != data.rows() {
        return Err(invalid(format!(
            "{} labels for {} training points",
            labels.len(),
            data.rows()
        )));
    }
    if data.cols() != spec.input_dim {
        return Err(invalid("data width does not match classifier input"));
    }
    let mut r = rng::seeded(seed);
    let init = ClassifierParams::init(spec, &mut r);
    let mut model = init.clone();
    let mut shadow = init.params.clone();
    let mut opt = Adam::new(cfg, &model.params);
    let names: Vec<String> = model.params.keys().cloned().collect();
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut trace = Vec::new();
    let d = data.cols();
    let mut steps = 0;
    let eval_every = cfg.eval_every.max(1);
    let mut reached = false;

    let ema_model = |p: &Params, m: &ClassifierParams| ClassifierParams {
        spec: m.spec.clone(),
        params: p.clone(),
    };

    while steps < cfg.max_steps {
        let idx = batch_indices(data.rows(), cfg.batch_size, &mut r);
        let batch = data.select_rows(&idx);
        let n = idx.len();
        let ts: Vec<usize> = (0..n).map(|_| r.random_range(0..=schedule.steps())).collect();
        let eps = Tensor::randn(&[n, d], &mut r);
        let xt = forward_rows(&batch, &ts, &eps, schedule)?;
        let signs: Vec<f64> = idx
            .iter()
            .map(|&i| if labels.get(i) == 1 { 1.0 } else { -1.0 })
            .collect();

        let mut g = Graph::new();
        let x = g.constant(xt);
        let logit = model.logit_graph(&mut g, x, &ts).map_err(|e| diverged_or(e, steps))?;
        let s = g.constant(Tensor::matrix(n, 1, signs)?);
        let z = g.mul(logit, s)?;
        let ls = g.log_sigmoid(z)?;
        let m = g.mean(ls)?;
        let loss = g.scale(m, -1.0)?;
        let lv = g.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::Diverged { step: steps, loss: lv });
        }
        trace.push(lv);
        let grads = g.backward(loss, &name_refs).map_err(|e| diverged_or(e, steps))?;
        opt.update(&mut model.params, &grads)?;
        shadow = ema_update(&model.params, &shadow, cfg.ema_rate)?;
        steps += 1;

        if steps % eval_every == 0 {
            let (ce, acc) = clean_fit(&ema_model(&shadow, &model), data, labels)?;
            log::debug!("classifier step {steps}: clean CE {ce:.4}, acc {acc:.3}");
            if ce < cfg.target_ce && acc == 1.0 {
                reached = true;
                break;
            }
        }
    }
    let ema = ema_model(&shadow, &model);
    let (clean_ce, clean_accuracy) = clean_fit(&ema, data, labels)?;
    Ok(ClassifierFit {
        model: Trained {
            raw: model,
            ema,
            loss_trace: trace,
            steps,
        },
        clean_ce,
        clean_accuracy,
        reached_target: reached || (clean_ce < cfg.target_ce && clean_accuracy == 1.0),
    })
}
