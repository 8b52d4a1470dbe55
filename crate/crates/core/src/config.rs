//! Experiment configuration in a flat `key = value` format with sections.
//!
//! ```text
//! # comment
//! [section]
//! key = value
//! ```
//!
//! Every field is required. Lists are comma separated. Unknown sections or
//! keys are rejected so typos do not silently fall back to defaults.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{DatasetKind, DatasetSpec};
use crate::diffusion::{linear_schedule, NoiseSchedule};
use crate::error::{Error, Result};
use crate::guidance::GuidanceConfig;
use crate::models::MlpSpec;
use crate::rng;
use crate::similarity::Metric;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        linear_schedule(self.steps, self.beta_min, self.beta_max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub input_scale: f64,
    pub train: TrainConfig,
    pub seed: u64,
}

impl ModelConfig {
    pub fn spec(&self, input_dim: usize) -> MlpSpec {
        MlpSpec {
            input_dim,
            embed_dim: self.embed_dim,
            hidden: self.hidden.clone(),
            input_scale: self.input_scale,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub n_samples: usize,
    pub seed: u64,
    pub max_tries: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureKind {
    Identity,
    Classifier,
}

impl FeatureKind {
    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::Identity => "identity",
            FeatureKind::Classifier => "classifier",
        }
    }
}

impl FromStr for FeatureKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "identity" => Ok(FeatureKind::Identity),
            "classifier" => Ok(FeatureKind::Classifier),
            other => Err(format!("unknown feature mode {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditConfig {
    pub metric: Metric,
    pub delta: f64,
    pub threshold: f64,
    pub features: FeatureKind,
    pub kappa: f64,
    pub n_noise: usize,
    pub t_grid: Vec<usize>,
    pub lipschitz_radius: f64,
    pub lipschitz_probes: usize,
    pub permutation_replicates: usize,
    pub permutation_level: f64,
    pub mia_t: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub schedule: ScheduleConfig,
    pub denoiser: ModelConfig,
    pub classifier: ModelConfig,
    pub label_seed: u64,
    pub guidance: GuidanceConfig,
    pub sampling: SamplingConfig,
    pub audit: AuditConfig,
    pub output_dir: PathBuf,
}

type Sections = BTreeMap<String, BTreeMap<String, String>>;

fn parse_sections(text: &str) -> Result<Sections> {
    let mut out = Sections::new();
    let mut current: Option<String> = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let at = |msg: String| Error::Config(format!("line {}: {msg}", lineno + 1));
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| at("unterminated section header".into()))?
                .trim();
            if out.contains_key(name) {
                return Err(at(format!("section [{name}] appears twice")));
            }
            out.insert(name.to_string(), BTreeMap::new());
            current = Some(name.to_string());
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| at(format!("expected `key = value`, got {line:?}")))?;
        let section = current
            .as_ref()
            .ok_or_else(|| at("key outside of any section".into()))?;
        let (k, v) = (k.trim(), v.trim());
        let table = out.get_mut(section).expect("section exists");
        if table.insert(k.to_string(), v.to_string()).is_some() {
            return Err(at(format!("duplicate key `{section}.{k}`")));
        }
    }
    Ok(out)
}

struct Fields {
    sections: Sections,
}

impl Fields {
    fn raw(&mut self, section: &str, key: &str) -> Result<String> {
        self.sections
            .get_mut(section)
            .and_then(|t| t.remove(key))
            .ok_or_else(|| Error::Config(format!("missing field `{section}.{key}`")))
    }

    fn get<T: FromStr>(&mut self, section: &str, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.raw(section, key)?;
        v.parse()
            .map_err(|e| Error::Config(format!("field `{section}.{key}` = {v:?}: {e}")))
    }

    fn list<T: FromStr>(&mut self, section: &str, key: &str) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.raw(section, key)?;
        v.split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|e| Error::Config(format!("field `{section}.{key}` = {v:?}: {e}")))
            })
            .collect()
    }

    fn finish(self) -> Result<()> {
        for (section, keys) in &self.sections {
            if let Some(k) = keys.keys().next() {
                return Err(Error::Config(format!("unknown field `{section}.{k}`")));
            }
        }
        Ok(())
    }
}

fn model(f: &mut Fields, s: &str) -> Result<ModelConfig> {
    Ok(ModelConfig {
        hidden: f.list(s, "hidden")?,
        embed_dim: f.get(s, "embed_dim")?,
        input_scale: f.get(s, "input_scale")?,
        train: TrainConfig {
            learning_rate: f.get(s, "learning_rate")?,
            beta1: f.get(s, "beta1")?,
            beta2: f.get(s, "beta2")?,
            epsilon: f.get(s, "epsilon")?,
            batch_size: f.get(s, "batch_size")?,
            max_steps: f.get(s, "max_steps")?,
            ema_rate: f.get(s, "ema_rate")?,
            target_ce: f.get(s, "target_ce")?,
            eval_every: f.get(s, "eval_every")?,
        },
        seed: f.get(s, "seed")?,
    })
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

fn write_model(out: &mut String, name: &str, m: &ModelConfig) {
    let t = &m.train;
    let _ = write!(
        out,
        "[{name}]\nhidden = {}\nembed_dim = {}\ninput_scale = {}\nlearning_rate = {}\nbeta1 = {}\nbeta2 = {}\n\
         epsilon = {}\nbatch_size = {}\nmax_steps = {}\nema_rate = {}\ntarget_ce = {}\neval_every = {}\nseed = {}\n\n",
        join(&m.hidden),
        m.embed_dim,
        m.input_scale,
        t.learning_rate,
        t.beta1,
        t.beta2,
        t.epsilon,
        t.batch_size,
        t.max_steps,
        t.ema_rate,
        t.target_ce,
        t.eval_every,
        m.seed
    );
}

struct MetricName(Metric);

impl FromStr for MetricName {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Metric::parse(s).map(MetricName).map_err(|e| e.to_string())
    }
}

struct KindName(DatasetKind);

impl FromStr for KindName {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        DatasetKind::parse(s).map(KindName).map_err(|e| e.to_string())
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut f = Fields {
            sections: parse_sections(text)?,
        };
        let cfg = ExperimentConfig {
            dataset: DatasetSpec {
                kind: f.get::<KindName>("dataset", "kind")?.0,
                n_train: f.get("dataset", "n_train")?,
                n_test: f.get("dataset", "n_test")?,
                seed: f.get("dataset", "seed")?,
            },
            schedule: ScheduleConfig {
                steps: f.get("schedule", "steps")?,
                beta_min: f.get("schedule", "beta_min")?,
                beta_max: f.get("schedule", "beta_max")?,
            },
            denoiser: model(&mut f, "denoiser")?,
            classifier: model(&mut f, "classifier")?,
            label_seed: f.get("classifier_labels", "seed")?,
            guidance: GuidanceConfig {
                alpha: f.get("guidance", "alpha")?,
                scale: f.get("guidance", "scale")?,
                tau: f.get("guidance", "tau")?,
                stride: f.get("guidance", "stride")?,
                record_trace: f.get("guidance", "record_trace")?,
            },
            sampling: SamplingConfig {
                n_samples: f.get("sampling", "n_samples")?,
                seed: f.get("sampling", "seed")?,
                max_tries: f.get("sampling", "max_tries")?,
            },
            audit: AuditConfig {
                metric: f.get::<MetricName>("audit", "metric")?.0,
                delta: f.get("audit", "delta")?,
                threshold: f.get("audit", "threshold")?,
                features: f.get("audit", "features")?,
                kappa: f.get("audit", "kappa")?,
                n_noise: f.get("audit", "n_noise")?,
                t_grid: f.list("audit", "t_grid")?,
                lipschitz_radius: f.get("audit", "lipschitz_radius")?,
                lipschitz_probes: f.get("audit", "lipschitz_probes")?,
                permutation_replicates: f.get("audit", "permutation_replicates")?,
                permutation_level: f.get("audit", "permutation_level")?,
                mia_t: f.get("audit", "mia_t")?,
                seed: f.get("audit", "seed")?,
            },
            output_dir: PathBuf::from(f.raw("output", "dir")?),
        };
        f.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Canonical text form; `parse(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        let mut out = self.settings_text();
        let _ = write!(out, "[output]\ndir = {}\n", self.output_dir.display());
        out
    }

    fn settings_text(&self) -> String {
        let mut out = String::new();
        let d = &self.dataset;
        let _ = write!(
            out,
            "[dataset]\nkind = {}\nn_train = {}\nn_test = {}\nseed = {}\n\n",
            d.kind.name(),
            d.n_train,
            d.n_test,
            d.seed
        );
        let s = &self.schedule;
        let _ = write!(
            out,
            "[schedule]\nsteps = {}\nbeta_min = {}\nbeta_max = {}\n\n",
            s.steps, s.beta_min, s.beta_max
        );
        write_model(&mut out, "denoiser", &self.denoiser);
        write_model(&mut out, "classifier", &self.classifier);
        let _ = write!(out, "[classifier_labels]\nseed = {}\n\n", self.label_seed);
        let g = &self.guidance;
        let _ = write!(
            out,
            "[guidance]\nalpha = {}\nscale = {}\ntau = {}\nstride = {}\nrecord_trace = {}\n\n",
            g.alpha, g.scale, g.tau, g.stride, g.record_trace
        );
        let p = &self.sampling;
        let _ = write!(
            out,
            "[sampling]\nn_samples = {}\nseed = {}\nmax_tries = {}\n\n",
            p.n_samples, p.seed, p.max_tries
        );
        let a = &self.audit;
        let _ = write!(
            out,
            "[audit]\nmetric = {}\ndelta = {}\nthreshold = {}\nfeatures = {}\nkappa = {}\nn_noise = {}\nt_grid = {}\n\
             lipschitz_radius = {}\nlipschitz_probes = {}\npermutation_replicates = {}\npermutation_level = {}\n\
             mia_t = {}\nseed = {}\n\n",
            a.metric.name(),
            a.delta,
            a.threshold,
            a.features.name(),
            a.kappa,
            a.n_noise,
            join(&a.t_grid),
            a.lipschitz_radius,
            a.lipschitz_probes,
            a.permutation_replicates,
            a.permutation_level,
            a.mia_t,
            a.seed
        );
        out
    }

    /// SHA-256 of the canonical text without the `[output]` section, hex
    /// encoded. Runs that differ only in where they write share a hash.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.settings_text().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let d = &self.dataset;
        if d.n_train < 2 || d.n_test < 2 {
            return bad("dataset.n_train and dataset.n_test must be at least 2".into());
        }
        self.schedule.build().map_err(|e| Error::Config(format!("schedule: {e}")))?;
        for (name, m) in [("denoiser", &self.denoiser), ("classifier", &self.classifier)] {
            m.train.validate().map_err(|e| Error::Config(format!("{name}: {e}")))?;
            if m.hidden.is_empty() || m.hidden.contains(&0) {
                return bad(format!("{name}.hidden needs at least one non-zero width"));
            }
            if m.embed_dim < 4 || m.embed_dim % 2 != 0 {
                return bad(format!("{name}.embed_dim must be even and at least 4"));
            }
            if !(m.input_scale > 0.0 && m.input_scale.is_finite()) {
                return bad(format!("{name}.input_scale must be positive"));
            }
        }
        self.guidance.validate().map_err(|e| Error::Config(format!("guidance: {e}")))?;
        if self.sampling.n_samples == 0 || self.sampling.max_tries == 0 {
            return bad("sampling.n_samples and sampling.max_tries must be positive".into());
        }
        let a = &self.audit;
        if !(a.delta > 0.0) {
            return bad("audit.delta must be positive".into());
        }
        if !(-1.0..=1.0).contains(&a.threshold) {
            return bad("audit.threshold must lie in [-1, 1]".into());
        }
        if !(a.kappa > 0.0 && a.kappa < 0.5) {
            return bad("audit.kappa must lie in (0, 0.5)".into());
        }
        if a.mia_t == 0 || a.mia_t > self.schedule.steps {
            return bad(format!("audit.mia_t must lie in 1..={}", self.schedule.steps));
        }
        if a.t_grid.iter().any(|&t| t > self.schedule.steps) {
            return bad("audit.t_grid entries must not exceed schedule.steps".into());
        }
        Ok(())
    }

    /// Replaces every seed by one derived from `seed`.
    pub fn reseed(&mut self, seed: u64) {
        self.dataset.seed = rng::derive(seed, "dataset");
        self.denoiser.seed = rng::derive(seed, "denoiser");
        self.classifier.seed = rng::derive(seed, "classifier");
        self.label_seed = rng::derive(seed, "labels");
        self.sampling.seed = rng::derive(seed, "sampling");
        self.audit.seed = rng::derive(seed, "audit");
    }
}

/// The built-in 2D experiment.
pub fn default_config_text() -> &'static str {
    include_str!("../configs/default.cfg")
}
