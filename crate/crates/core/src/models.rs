//! Time-conditioned MLPs: the noise predictor ε_θ(x, t) and the binary
//! classifier p_φ(y | x, t).

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Graph, NodeId};
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Anything that predicts the noise component of `x_t`.
pub trait NoisePredictor {
    /// Appends the prediction for the rows of `x` (one timestep per row).
    fn predict_graph(&self, g: &mut Graph, x: NodeId, t: &[usize]) -> Result<NodeId>;

    fn predict(&self, x: &Tensor, t: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let xid = g.constant(x.clone());
        let out = self.predict_graph(&mut g, xid, t)?;
        Ok(g.value(out).clone())
    }
}

/// A binary classifier that exposes one logit `ℓ(x, t)` per row, with
/// `p(y=1 | x, t) = sigmoid(ℓ)`.
pub trait LogitModel {
    /// Appends an `n × 1` logit node for the rows of `x`.
    fn logit_graph(&self, g: &mut Graph, x: NodeId, t: &[usize]) -> Result<NodeId>;

    fn logits(&self, x: &Tensor, t: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let xid = g.constant(x.clone());
        let out = self.logit_graph(&mut g, xid, t)?;
        Ok(g.value(out).to_vec())
    }

    /// `p(y=1 | x_i, t_i)` for every row.
    fn prob_one(&self, x: &Tensor, t: &[usize]) -> Result<Vec<f64>> {
        Ok(self.logits(x, t)?.into_iter().map(sigmoid).collect())
    }
}

/// Sinusoidal embedding of a timestep. The first half holds `sin(t·f_j)`,
/// the second half `cos(t·f_j)`, with `f_j` geometric from 1 down to 1e-4.
pub fn time_embedding(t: usize, steps: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(invalid(format!("embedding dim must be even and positive, got {dim}")));
    }
    if t > steps {
        return Err(invalid(format!("timestep {t} exceeds T = {steps}")));
    }
    Ok(Tensor::vector(embedding_row(t, dim)))
}

fn embedding_row(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for j in 0..half {
        let freq = if half == 1 {
            1.0
        } else {
            10_000f64.powf(-(j as f64) / (half - 1) as f64)
        };
        let arg = t as f64 * freq;
        out[j] = arg.sin();
        out[half + j] = arg.cos();
    }
    out
}

fn embedding_matrix(ts: &[usize], dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        data.extend(embedding_row(t, dim));
    }
    Tensor::new(vec![ts.len(), dim], data).expect("embedding shape")
}

/// Layer sizes of a time-conditioned MLP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    /// Fixed factor applied to `x` before the first layer. Values above 1
    /// let the network resolve finer input detail early in training.
    #[serde(default = "unit_scale")]
    pub input_scale: f64,
}

fn unit_scale() -> f64 {
    1.0
}

impl MlpSpec {
    pub fn denoiser(input_dim: usize) -> Self {
        Self {
            input_dim,
            embed_dim: 32,
            hidden: vec![128; 3],
            input_scale: 1.0,
        }
    }

    pub fn classifier(input_dim: usize) -> Self {
        Self {
            input_dim,
            embed_dim: 32,
            hidden: vec![256; 3],
            input_scale: 1.0,
        }
    }
}

pub type Params = BTreeMap<String, Tensor>;

fn init_linear<R: Rng + ?Sized>(params: &mut Params, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w: Vec<f64> = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    let b: Vec<f64> = (0..fan_out).map(|_| rng.random_range(-bound..bound)).collect();
    params.insert(format!("{name}.w"), Tensor::matrix(fan_in, fan_out, w).unwrap());
    params.insert(format!("{name}.b"), Tensor::vector(b));
}

fn linear(g: &mut Graph, params: &Params, name: &str, h: NodeId) -> Result<NodeId> {
    let wname = format!("{name}.w");
    let bname = format!("{name}.b");
    let w = params
        .get(&wname)
        .ok_or_else(|| Error::UnboundLeaf(wname.clone()))?;
    let b = params
        .get(&bname)
        .ok_or_else(|| Error::UnboundLeaf(bname.clone()))?;
    let w = g.leaf(&wname, w.clone());
    let b = g.leaf(&bname, b.clone());
    let h = g.matmul(h, w)?;
    g.add(h, b)
}

/// `SiLU` trunk over `[x | emb(t)]`. Returns the last hidden activation.
fn trunk(g: &mut Graph, params: &Params, prefix: &str, spec: &MlpSpec, x: NodeId, t: &[usize]) -> Result<NodeId> {
    let xv = g.value(x);
    if xv.ndim() != 2 || xv.cols() != spec.input_dim || xv.rows() != t.len() {
        return Err(Error::ShapeMismatch {
            op: "model input",
            lhs: xv.shape().to_vec(),
            rhs: vec![t.len(), spec.input_dim],
        });
    }
    let x = if spec.input_scale == 1.0 {
        x
    } else {
        g.scale(x, spec.input_scale)?
    };
    let emb = g.constant(embedding_matrix(t, spec.embed_dim));
    let mut h = g.concat(x, emb)?;
    for i in 0..spec.hidden.len() {
        h = linear(g, params, &format!("{prefix}.l{i}"), h)?;
        h = g.silu(h)?;
    }
    Ok(h)
}

/// Weights of the noise predictor ε_θ.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    pub spec: MlpSpec,
    pub params: Params,
}

pub const DENOISER_PREFIX: &str = "denoiser";
pub const CLASSIFIER_PREFIX: &str = "classifier";

impl DenoiserParams {
    pub fn init<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Self {
        let mut params = Params::new();
        let mut fan_in = spec.input_dim + spec.embed_dim;
        for (i, &w) in spec.hidden.iter().enumerate() {
            init_linear(&mut params, &format!("{DENOISER_PREFIX}.l{i}"), fan_in, w, rng);
            fan_in = w;
        }
        init_linear(&mut params, &format!("{DENOISER_PREFIX}.out"), fan_in, spec.input_dim, rng);
        Self { spec, params }
    }

    pub fn dim(&self) -> usize {
        self.spec.input_dim
    }
}

impl NoisePredictor for DenoiserParams {
    fn predict_graph(&self, g: &mut Graph, x: NodeId, t: &[usize]) -> Result<NodeId> {
        let h = trunk(g, &self.params, DENOISER_PREFIX, &self.spec, x, t)?;
        linear(g, &self.params, &format!("{DENOISER_PREFIX}.out"), h)
    }
}

/// Weights of the random-label classifier p_φ. The head maps the last trunk
/// activation to a single logit, so `p(y=0) + p(y=1) = 1` holds exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    pub spec: MlpSpec,
    pub params: Params,
}

impl ClassifierParams {
    pub fn init<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Self {
        let mut params = Params::new();
        let mut fan_in = spec.input_dim + spec.embed_dim;
        for (i, &w) in spec.hidden.iter().enumerate() {
            init_linear(&mut params, &format!("{CLASSIFIER_PREFIX}.l{i}"), fan_in, w, rng);
            fan_in = w;
        }
        init_linear(&mut params, &format!("{CLASSIFIER_PREFIX}.head"), fan_in, 1, rng);
        Self { spec, params }
    }

    pub fn dim(&self) -> usize {
        self.spec.input_dim
    }

    /// Width of the penultimate (feature) layer.
    pub fn feature_dim(&self) -> usize {
        *self.spec.hidden.last().unwrap_or(&(self.spec.input_dim + self.spec.embed_dim))
    }

    /// Last trunk activation for each row at `t = 0`.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xid = g.constant(x.clone());
        let t = vec![0; x.rows()];
        let h = trunk(&mut g, &self.params, CLASSIFIER_PREFIX, &self.spec, xid, &t)?;
        Ok(g.value(h).clone())
    }

    /// Copy with the head weights and bias multiplied by `c`.
    pub fn with_head_scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        for key in [format!("{CLASSIFIER_PREFIX}.head.w"), format!("{CLASSIFIER_PREFIX}.head.b")] {
            if let Some(v) = out.params.get_mut(&key) {
                *v = v.map(|x| c * x);
            }
        }
        out
    }
}

impl LogitModel for ClassifierParams {
    fn logit_graph(&self, g: &mut Graph, x: NodeId, t: &[usize]) -> Result<NodeId> {
        let h = trunk(g, &self.params, CLASSIFIER_PREFIX, &self.spec, x, t)?;
        linear(g, &self.params, &format!("{CLASSIFIER_PREFIX}.head"), h)
    }
}

impl<T: NoisePredictor + ?Sized> NoisePredictor for &T {
    fn predict_graph(&self, g: &mut Graph, x: NodeId, t: &[usize]) -> Result<NodeId> {
        (**self).predict_graph(g, x, t)
    }
}

impl<T: LogitModel + ?Sized> LogitModel for &T {
    fn logit_graph(&self, g: &mut Graph, x: NodeId, t: &[usize]) -> Result<NodeId> {
        (**self).logit_graph(g, x, t)
    }
}

/// Stub models with closed-form behaviour, used as test oracles.
pub mod testing {
    use super::*;
    use crate::diffusion::NoiseSchedule;

    type PredictFn = dyn Fn(&Tensor, &[usize]) -> Tensor + Send + Sync;

    /// Noise predictor backed by an arbitrary closure (not differentiable).
    pub struct FnPredictor(Box<PredictFn>);

    impl FnPredictor {
        pub fn new(f: impl Fn(&Tensor, &[usize]) -> Tensor + Send + Sync + 'static) -> Self {
            Self(Box::new(f))
        }

        pub fn zeros() -> Self {
            Self::new(|x, _| Tensor::zeros(x.shape()))
        }
    }

    impl NoisePredictor for FnPredictor {
        fn predict_graph(&self, g: &mut Graph, x: NodeId, t: &[usize]) -> Result<NodeId> {
            let v = (self.0)(g.value(x), t);
            Ok(g.constant(v))
        }
    }

    /// Exact posterior-mean noise predictor for data drawn i.i.d. per
    /// coordinate from `N(mean, std²)`:
    /// `E[ε | x_t] = √(1−ᾱ)(x_t − √ᾱ·mean) / (ᾱ·std² + 1 − ᾱ)`.
    pub struct GaussianOracle {
        pub mean: f64,
        pub std: f64,
        pub schedule: NoiseSchedule,
    }

    impl GaussianOracle {
        pub fn new(mean: f64, std: f64, schedule: NoiseSchedule) -> Self {
            Self { mean, std, schedule }
        }
    }

    impl NoisePredictor for GaussianOracle {
        fn predict_graph(&self, g: &mut Graph, x: NodeId, t: &[usize]) -> Result<NodeId> {
            let xv = g.value(x).clone();
            let d = xv.cols();
            let mut out = Vec::with_capacity(xv.len());
            for (i, &ti) in t.iter().enumerate() {
                let ab = self.schedule.alpha_bar(ti);
                let denom = ab * self.std * self.std + 1.0 - ab;
                let k = (1.0 - ab).sqrt() / denom;
                out.extend(xv.row(i).iter().map(|v| k * (v - ab.sqrt() * self.mean)));
            }
            let v = Tensor::new(vec![t.len(), d], out)?;
            Ok(g.constant(v))
        }
    }

    /// Logistic classifier `ℓ(x) = w·x + b`, independent of t.
    #[derive(Clone, Debug)]
    pub struct LogisticStub {
        pub w: Vec<f64>,
        pub b: f64,
    }

    impl LogitModel for LogisticStub {
        fn logit_graph(&self, g: &mut Graph, x: NodeId, t: &[usize]) -> Result<NodeId> {
            let w = g.constant(Tensor::matrix(self.w.len(), 1, self.w.clone())?);
            let b = g.constant(Tensor::vector(vec![self.b]));
            let h = g.matmul(x, w)?;
            let _ = t;
            g.add(h, b)
        }
    }

    /// Classifier with a fixed logit everywhere.
    #[derive(Clone, Copy, Debug)]
    pub struct ConstantClassifier(pub f64);

    impl LogitModel for ConstantClassifier {
        fn logit_graph(&self, g: &mut Graph, x: NodeId, t: &[usize]) -> Result<NodeId> {
            let _ = x;
            Ok(g.constant(Tensor::full(&[t.len(), 1], self.0)))
        }
    }
}
