//! End-to-end experiment: data, training, sampling, audits, reports.
//!
//! Artifacts live under the output directory. Checkpoints (`data.cpta`,
//! `denoiser.cpta`, `classifier.cpta`, `samples.cpta`) carry a key derived
//! from the settings they depend on and are reused on the next run when the
//! key matches. Reports are always regenerated.

use std::cell::RefCell;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::{
    classifier_checkpoint, denoiser_checkpoint, load_classifier, load_denoiser, read_archive, write_archive,
    TensorArchive,
};
use crate::config::{ExperimentConfig, FeatureKind};
use crate::data::generate_dataset;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::guidance::{cp_epsilon_hat, cpsample_generate, ddim_generate, rejection_sample, SampleRun};
use crate::lemma::{admissible_delta, estimate_local_lipschitz, measure_accuracy, measure_generation, verify_lemma, LemmaInputs, LemmaReport};
use crate::mia::{mia_error, mia_z_test, MiaReport};
use crate::models::{ClassifierParams, DenoiserParams, NoisePredictor};
use crate::permutation::{permutation_test, PermutationReport};
use crate::quality::{frechet_between, FeatureMap};
use crate::rng;
use crate::similarity::{exceedance_test, nearest_distances, similarity_report, ExceedanceTest, SimilarityReport};
use crate::tensor::Tensor;
use crate::train::{assign_random_labels, train_classifier, train_denoiser, LabelSet};

/// `git describe`-style identifier of this build.
pub const BUILD_ID: &str = env!("CPSAMPLE_BUILD_ID");

pub const REPORT_FILES: [&str; 5] = [
    "similarity_report.json",
    "mia_report.json",
    "permutation_report.json",
    "lemma_report.json",
    "frechet_report.json",
];

/// Every report is wrapped with the settings hash and build id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub config_hash: String,
    pub build_id: String,
    pub report: T,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Tensor,
    pub test: Tensor,
    pub labels: LabelSet,
}

#[derive(Clone, Debug)]
pub struct Samples {
    pub ddim: Tensor,
    pub cpsample: Tensor,
    pub cpsample_p1: Vec<f64>,
    pub rejection: Tensor,
    pub rejection_tries: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSetAudit {
    pub n: usize,
    /// Samples within `delta` of a training point.
    pub inside_count: usize,
    pub inside_fraction: f64,
    pub similarity: SimilarityReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityAudit {
    pub metric: String,
    pub delta: f64,
    pub feature_mode: String,
    pub unguided: SampleSetAudit,
    pub cpsample: SampleSetAudit,
    pub rejection: SampleSetAudit,
    /// Unguided vs CPSample inside counts.
    pub exceedance: ExceedanceTest,
    pub rejection_mean_tries: f64,
    /// `1 / (1 − unguided inside fraction)`.
    pub rejection_predicted_tries: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiaAudit {
    pub t: usize,
    pub unprotected: MiaReport,
    pub protected: MiaReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationAudit {
    pub feature_mode: String,
    pub unprotected: PermutationReport,
    pub protected: PermutationReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrechetEntry {
    pub sampler: String,
    pub frechet_distance: f64,
    pub feature_mode: String,
    pub n_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrechetAudit {
    pub reference: String,
    pub entries: Vec<FrechetEntry>,
    /// CPSample distance over unguided distance.
    pub ratio: f64,
}

/// Headline numbers of a full run and the checks behind `--check`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub unguided_inside: f64,
    pub cpsample_inside: f64,
    pub rejection_inside: f64,
    pub exceedance_p: f64,
    pub mia_unprotected_p: f64,
    pub mia_protected_p: f64,
    pub permutation_protected_reject: bool,
    pub lemma_pass: bool,
    pub frechet_ratio: f64,
    pub checks: Vec<(String, bool)>,
}

impl RunSummary {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|(_, ok)| *ok)
    }
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Stage { .. } => e,
        other => Error::Stage {
            stage: name.to_string(),
            source: Box::new(other),
        },
    })
}

fn key_of<T: Serialize>(parts: &T) -> Result<String> {
    let bytes = serde_json::to_vec(parts)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn labels_tensor(l: &LabelSet) -> Tensor {
    Tensor::vector(l.labels.iter().map(|&v| v as f64).collect())
}

fn usize_tensor(v: &[usize]) -> Tensor {
    Tensor::vector(v.iter().map(|&x| x as f64).collect())
}

pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub force: bool,
    schedule: NoiseSchedule,
    data: RefCell<Option<Dataset>>,
    denoiser: RefCell<Option<DenoiserParams>>,
    classifier: RefCell<Option<ClassifierParams>>,
    samples: RefCell<Option<Samples>>,
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig, force: bool) -> Result<Self> {
        cfg.validate()?;
        let schedule = cfg.schedule.build()?;
        Ok(Self {
            cfg,
            force,
            schedule,
            data: RefCell::new(None),
            denoiser: RefCell::new(None),
            classifier: RefCell::new(None),
            samples: RefCell::new(None),
        })
    }

    pub fn out_dir(&self) -> &Path {
        &self.cfg.output_dir
    }

    fn path(&self, name: &str) -> PathBuf {
        self.cfg.output_dir.join(name)
    }

    fn ensure_dir(&self) -> Result<()> {
        std::fs::create_dir_all(self.out_dir())?;
        Ok(())
    }

    /// Loads a checkpoint if it exists, `--force` is off and its key matches.
    fn reuse(&self, name: &str, key: &str) -> Result<Option<TensorArchive>> {
        let p = self.path(name);
        if self.force || !p.exists() {
            return Ok(None);
        }
        let a = read_archive(&p)?;
        let meta: serde_json::Value = serde_json::from_str(&a.metadata).unwrap_or_default();
        let stored = meta.get("extra").and_then(|v| v.as_str()).or_else(|| meta.get("key").and_then(|v| v.as_str()));
        if stored == Some(key) {
            log::info!("reusing {}", p.display());
            Ok(Some(a))
        } else {
            log::info!("{} was produced by other settings; rebuilding", p.display());
            Ok(None)
        }
    }

    fn data_key(&self) -> Result<String> {
        key_of(&(&self.cfg.dataset, self.cfg.label_seed))
    }

    fn denoiser_key(&self) -> Result<String> {
        key_of(&(self.data_key()?, &self.cfg.schedule, &self.cfg.denoiser))
    }

    fn classifier_key(&self) -> Result<String> {
        key_of(&(self.data_key()?, &self.cfg.schedule, &self.cfg.classifier))
    }

    fn samples_key(&self) -> Result<String> {
        let a = &self.cfg.audit;
        key_of(&(
            self.denoiser_key()?,
            self.classifier_key()?,
            &self.cfg.guidance,
            &self.cfg.sampling,
            (a.metric, a.delta, a.features),
        ))
    }

    pub fn data(&self) -> Result<Dataset> {
        if let Some(d) = self.data.borrow().as_ref() {
            return Ok(d.clone());
        }
        let d = stage("gen-data", self.build_data())?;
        *self.data.borrow_mut() = Some(d.clone());
        Ok(d)
    }

    fn build_data(&self) -> Result<Dataset> {
        let key = self.data_key()?;
        if let Some(a) = self.reuse("data.cpta", &key)? {
            let labels = a.get("labels")?.data().iter().map(|&v| v as u8).collect();
            return Ok(Dataset {
                train: a.get("train")?.clone(),
                test: a.get("test")?.clone(),
                labels: LabelSet {
                    labels,
                    seed: self.cfg.label_seed,
                },
            });
        }
        let (train, test) = generate_dataset(&self.cfg.dataset)?;
        let labels = assign_random_labels(train.rows(), self.cfg.label_seed)?;
        self.ensure_dir()?;
        let mut a = TensorArchive::new(serde_json::json!({ "key": key }).to_string());
        a.push("train", train.clone());
        a.push("test", test.clone());
        a.push("labels", labels_tensor(&labels));
        write_archive(&self.path("data.cpta"), &a)?;
        Ok(Dataset { train, test, labels })
    }

    /// EMA weights of the denoiser.
    pub fn denoiser(&self) -> Result<DenoiserParams> {
        if let Some(d) = self.denoiser.borrow().as_ref() {
            return Ok(d.clone());
        }
        let d = stage("train-denoiser", self.build_denoiser())?;
        *self.denoiser.borrow_mut() = Some(d.clone());
        Ok(d)
    }

    fn build_denoiser(&self) -> Result<DenoiserParams> {
        let key = self.denoiser_key()?;
        if let Some(a) = self.reuse("denoiser.cpta", &key)? {
            return Ok(load_denoiser(&a)?.1);
        }
        let data = self.data()?;
        let m = &self.cfg.denoiser;
        let run = train_denoiser(&data.train, &self.schedule, m.spec(data.train.cols()), &m.train, m.seed)?;
        log::info!(
            "denoiser: {} steps, final loss {:.5}",
            run.steps,
            run.loss_trace.last().copied().unwrap_or(f64::NAN)
        );
        self.ensure_dir()?;
        write_archive(&self.path("denoiser.cpta"), &denoiser_checkpoint(&run.raw, &run.ema, &key)?)?;
        Ok(run.ema)
    }

    /// EMA weights of the random-label classifier.
    pub fn classifier(&self) -> Result<ClassifierParams> {
        if let Some(c) = self.classifier.borrow().as_ref() {
            return Ok(c.clone());
        }
        let c = stage("train-classifier", self.build_classifier())?;
        *self.classifier.borrow_mut() = Some(c.clone());
        Ok(c)
    }

    fn build_classifier(&self) -> Result<ClassifierParams> {
        let key = self.classifier_key()?;
        if let Some(a) = self.reuse("classifier.cpta", &key)? {
            return Ok(load_classifier(&a)?.1);
        }
        let data = self.data()?;
        let m = &self.cfg.classifier;
        let fit = train_classifier(
            &data.train,
            &data.labels,
            &self.schedule,
            m.spec(data.train.cols()),
            &m.train,
            m.seed,
        )?;
        log::info!(
            "classifier: {} steps, clean CE {:.4}, accuracy {:.3}",
            fit.model.steps,
            fit.clean_ce,
            fit.clean_accuracy
        );
        if !fit.reached_target {
            log::warn!("classifier did not reach the target cross-entropy");
        }
        self.ensure_dir()?;
        write_archive(
            &self.path("classifier.cpta"),
            &classifier_checkpoint(&fit.model.raw, &fit.model.ema, &key)?,
        )?;
        Ok(fit.model.ema)
    }

    pub fn features(&self) -> Result<FeatureMap> {
        Ok(match self.cfg.audit.features {
            FeatureKind::Identity => FeatureMap::Identity,
            FeatureKind::Classifier => FeatureMap::Classifier(self.classifier()?),
        })
    }

    pub fn samples(&self) -> Result<Samples> {
        if let Some(s) = self.samples.borrow().as_ref() {
            return Ok(s.clone());
        }
        let s = stage("sample", self.build_samples())?;
        *self.samples.borrow_mut() = Some(s.clone());
        Ok(s)
    }

    fn build_samples(&self) -> Result<Samples> {
        let key = self.samples_key()?;
        if let Some(a) = self.reuse("samples.cpta", &key)? {
            let as_usize = |t: &Tensor| t.data().iter().map(|&v| v as usize).collect();
            return Ok(Samples {
                ddim: a.get("ddim")?.clone(),
                cpsample: a.get("cpsample")?.clone(),
                cpsample_p1: a.get("cpsample_p1")?.to_vec(),
                rejection: a.get("rejection")?.clone(),
                rejection_tries: as_usize(a.get("rejection_tries")?),
            });
        }
        let data = self.data()?;
        let den = self.denoiser()?;
        let clf = self.classifier()?;
        let features = self.features()?;
        let (g, s, a) = (&self.cfg.guidance, &self.cfg.sampling, &self.cfg.audit);
        let dim = data.train.cols();
        let seed = s.seed;
        let ddim = ddim_generate(&den, &self.schedule, g.stride, s.n_samples, dim, seed)?;
        let cp: SampleRun = cpsample_generate(&den, &clf, &self.schedule, g, s.n_samples, dim, seed)?;
        let rej = rejection_sample(
            &den,
            &self.schedule,
            g.stride,
            &data.train,
            a.delta,
            a.metric,
            &features,
            s.max_tries,
            s.n_samples,
            rng::derive(seed, "rejection"),
        )?;
        self.ensure_dir()?;
        if g.record_trace {
            std::fs::write(self.path("cpsample_trace.csv"), cp.trace_csv())?;
        }
        let mut arch = TensorArchive::new(serde_json::json!({ "key": key }).to_string());
        arch.push("ddim", ddim.clone());
        arch.push("cpsample", cp.samples.clone());
        arch.push("cpsample_p1", Tensor::vector(cp.final_p1.clone()));
        arch.push("cpsample_triggers", usize_tensor(&cp.trigger_counts));
        arch.push("rejection", rej.samples.clone());
        arch.push("rejection_tries", usize_tensor(&rej.tries));
        write_archive(&self.path("samples.cpta"), &arch)?;
        Ok(Samples {
            ddim,
            cpsample: cp.samples,
            cpsample_p1: cp.final_p1,
            rejection: rej.samples,
            rejection_tries: rej.tries,
        })
    }

    fn write_report<T: Serialize>(&self, file: &str, report: &T) -> Result<()> {
        self.ensure_dir()?;
        let env = Envelope {
            config_hash: self.cfg.hash(),
            build_id: BUILD_ID.to_string(),
            report,
        };
        let mut text = serde_json::to_string_pretty(&env)?;
        text.push('\n');
        std::fs::write(self.path(file), text)?;
        Ok(())
    }

    fn set_audit(&self, x: &Tensor, train_feat: &Tensor, features: &FeatureMap) -> Result<SampleSetAudit> {
        let a = &self.cfg.audit;
        let feat = features.apply(x)?;
        let dist = nearest_distances(&feat, train_feat, a.metric)?;
        let inside_count = dist.iter().filter(|(_, d)| *d < a.delta).count();
        let similarity = similarity_report(&feat, train_feat, a.threshold)?;
        Ok(SampleSetAudit {
            n: x.rows(),
            inside_count,
            inside_fraction: inside_count as f64 / x.rows() as f64,
            similarity,
        })
    }

    pub fn audit_similarity(&self) -> Result<SimilarityAudit> {
        stage("audit-sim", self.build_similarity())
    }

    fn build_similarity(&self) -> Result<SimilarityAudit> {
        let data = self.data()?;
        let s = self.samples()?;
        let features = self.features()?;
        let train_feat = features.apply(&data.train)?;
        let unguided = self.set_audit(&s.ddim, &train_feat, &features)?;
        let cpsample = self.set_audit(&s.cpsample, &train_feat, &features)?;
        let rejection = self.set_audit(&s.rejection, &train_feat, &features)?;
        let exceedance = exceedance_test(unguided.inside_count, unguided.n, cpsample.inside_count, cpsample.n)?;
        let tries: usize = s.rejection_tries.iter().sum();
        let a = &self.cfg.audit;
        let report = SimilarityAudit {
            metric: a.metric.name().to_string(),
            delta: a.delta,
            feature_mode: features.name().to_string(),
            rejection_mean_tries: tries as f64 / s.rejection_tries.len() as f64,
            rejection_predicted_tries: 1.0 / (1.0 - unguided.inside_fraction),
            unguided,
            cpsample,
            rejection,
            exceedance,
        };
        self.write_report("similarity_report.json", &report)?;
        for (name, set) in [
            ("unguided", &report.unguided),
            ("cpsample", &report.cpsample),
            ("rejection", &report.rejection),
        ] {
            std::fs::write(self.path(&format!("similarity_hist_{name}.csv")), set.similarity.histogram_csv())?;
        }
        Ok(report)
    }

    pub fn audit_mia(&self) -> Result<MiaAudit> {
        stage("audit-mia", self.build_mia())
    }

    fn build_mia(&self) -> Result<MiaAudit> {
        let data = self.data()?;
        let den = self.denoiser()?;
        let clf = self.classifier()?;
        let t = self.cfg.audit.mia_t;
        let seed = self.cfg.audit.seed;
        let (s_tr, s_te) = (rng::derive(seed, "mia.train"), rng::derive(seed, "mia.test"));
        let plain = |x: &Tensor, t: usize| den.predict(x, &vec![t; x.rows()]);
        let guided = |x: &Tensor, t: usize| {
            cp_epsilon_hat(&den, &clf, x, t, &self.schedule, &self.cfg.guidance).map(|g| g.eps_hat)
        };
        let unprotected = mia_z_test(
            &mia_error(plain, &data.train, t, &self.schedule, s_tr)?,
            &mia_error(plain, &data.test, t, &self.schedule, s_te)?,
        )?;
        let protected = mia_z_test(
            &mia_error(guided, &data.train, t, &self.schedule, s_tr)?,
            &mia_error(guided, &data.test, t, &self.schedule, s_te)?,
        )?;
        let report = MiaAudit { t, unprotected, protected };
        self.write_report("mia_report.json", &report)?;
        Ok(report)
    }

    pub fn audit_permutation(&self) -> Result<PermutationAudit> {
        stage("audit-perm", self.build_permutation())
    }

    fn build_permutation(&self) -> Result<PermutationAudit> {
        let data = self.data()?;
        let s = self.samples()?;
        let features = self.features()?;
        let a = &self.cfg.audit;
        let mut stacked = data.train.to_vec();
        stacked.extend_from_slice(data.test.data());
        let full = Tensor::matrix(data.train.rows() + data.test.rows(), data.train.cols(), stacked)?;
        let seed = rng::derive(a.seed, "permutation");
        let run = |p: &Tensor| {
            permutation_test(
                p,
                &data.train,
                &full,
                a.permutation_replicates,
                &features,
                a.permutation_level,
                seed,
            )
        };
        let report = PermutationAudit {
            feature_mode: features.name().to_string(),
            unprotected: run(&s.ddim)?,
            protected: run(&s.cpsample)?,
        };
        self.write_report("permutation_report.json", &report)?;
        Ok(report)
    }

    pub fn verify_lemma(&self) -> Result<LemmaReport> {
        stage("verify-lemma", self.build_lemma())
    }

    fn build_lemma(&self) -> Result<LemmaReport> {
        let data = self.data()?;
        let clf = self.classifier()?;
        let s = self.samples()?;
        let features = self.features()?;
        let a = &self.cfg.audit;
        let lip = estimate_local_lipschitz(
            &clf,
            &data.train,
            0,
            a.lipschitz_radius,
            a.lipschitz_probes,
            rng::derive(a.seed, "lipschitz"),
        )?;
        let acc = measure_accuracy(
            &clf,
            &data.train,
            &data.labels,
            &self.schedule,
            a.kappa,
            &a.t_grid,
            a.n_noise,
            rng::derive(a.seed, "accuracy"),
        )?;
        let mut inputs = LemmaInputs {
            lipschitz: lip.value,
            kappa: a.kappa,
            gamma_hat: acc.gamma_hat,
            nu_hat: 0.0,
            delta: a.delta,
        };
        inputs.delta = admissible_delta(a.delta, inputs.delta_max());
        if inputs.delta != a.delta {
            log::info!(
                "audit delta {} is not below delta_max {:.4}; checking the lemma at {:.4}",
                a.delta,
                inputs.delta_max(),
                inputs.delta
            );
        }
        inputs.nu_hat = measure_generation(&s.cpsample_p1, inputs.lambda())?.nu_hat;
        let report = verify_lemma(&inputs, &s.cpsample, &data.train, a.metric, &features)?;
        log::info!(
            "lemma: L = {:.4}, gamma = {:.4}, lambda = {:.4}, nu = {:.4}, bound = {:.4}, outside = {:.4}",
            report.lipschitz,
            report.gamma_hat,
            report.lambda,
            report.nu_hat,
            report.bound,
            report.empirical_outside_rate
        );
        self.write_report("lemma_report.json", &report)?;
        Ok(report)
    }

    pub fn eval_frechet(&self) -> Result<FrechetAudit> {
        stage("eval-frechet", self.build_frechet())
    }

    fn build_frechet(&self) -> Result<FrechetAudit> {
        let data = self.data()?;
        let s = self.samples()?;
        let features = self.features()?;
        let mut entries = Vec::new();
        for (name, x) in [("unguided", &s.ddim), ("cpsample", &s.cpsample), ("rejection", &s.rejection)] {
            entries.push(FrechetEntry {
                sampler: name.to_string(),
                frechet_distance: frechet_between(x, &data.test, &features)?,
                feature_mode: features.name().to_string(),
                n_samples: x.rows(),
            });
        }
        let report = FrechetAudit {
            reference: "test".to_string(),
            ratio: entries[1].frechet_distance / entries[0].frechet_distance,
            entries,
        };
        self.write_report("frechet_report.json", &report)?;
        Ok(report)
    }

    pub fn run_all(&self) -> Result<RunSummary> {
        let sim = self.audit_similarity()?;
        let mia = self.audit_mia()?;
        let perm = self.audit_permutation()?;
        let lemma = self.verify_lemma()?;
        let fd = self.eval_frechet()?;
        let checks = vec![
            (
                "cpsample inside rate below unguided".to_string(),
                sim.cpsample.inside_fraction < sim.unguided.inside_fraction || sim.unguided.inside_count == 0,
            ),
            ("rejection samples all outside".to_string(), sim.rejection.inside_count == 0),
            ("protected MIA p >= 0.01".to_string(), mia.protected.p >= 0.01),
            ("lemma bound holds".to_string(), lemma.pass),
            ("frechet ratio <= 2".to_string(), fd.ratio <= 2.0),
        ];
        let summary = RunSummary {
            unguided_inside: sim.unguided.inside_fraction,
            cpsample_inside: sim.cpsample.inside_fraction,
            rejection_inside: sim.rejection.inside_fraction,
            exceedance_p: sim.exceedance.p_value,
            mia_unprotected_p: mia.unprotected.p,
            mia_protected_p: mia.protected.p,
            permutation_protected_reject: perm.protected.reject,
            lemma_pass: lemma.pass,
            frechet_ratio: fd.ratio,
            checks,
        };
        self.write_report("summary.json", &summary)?;
        Ok(summary)
    }
}
