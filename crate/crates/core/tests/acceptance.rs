//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits with
//! status 1 if any criterion fails.

use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;

use cpsample::autodiff::{grad_check, sigmoid, Graph, NodeId};
use cpsample::config::{default_config_text, ExperimentConfig, FeatureKind};
use cpsample::data::{generate_dataset, DatasetKind, DatasetSpec};
use cpsample::diffusion::{forward_sample, linear_schedule, NoiseSchedule};
use cpsample::guidance::{
    cp_epsilon_hat, cpsample_generate, ddim_generate, rejection_sample, GuidanceConfig, RejectionRun,
};
use cpsample::lemma::{
    admissible_delta, estimate_local_lipschitz, measure_accuracy, measure_generation, verify_lemma, LemmaInputs, DEFAULT_T_GRID,
};
use cpsample::mia::{mia_error, mia_z_test};
use cpsample::models::{ClassifierParams, DenoiserParams, LogitModel, MlpSpec, NoisePredictor};
use cpsample::permutation::permutation_test;
use cpsample::pipeline::{Pipeline, REPORT_FILES};
use cpsample::quality::{frechet_between, frechet_distance, GaussianMoments, FeatureMap};
use cpsample::rng;
use cpsample::similarity::{exceedance_test, nearest_distances, Metric};
use cpsample::stats::ks_uniform;
use cpsample::train::{assign_random_labels, train_classifier, train_denoiser, LabelSet, TrainConfig};
use cpsample::{Result, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome {
        pass,
        detail: detail.into(),
    })
}

fn desk_schedule() -> NoiseSchedule {
    linear_schedule(200, 1e-4, 0.02).unwrap()
}

fn randn(shape: &[usize], r: &mut rng::Rng) -> Tensor {
    Tensor::randn(shape, r)
}

// ---------------------------------------------------------------- 1

fn weighted_sum(g: &mut Graph, y: NodeId, w: &Tensor) -> Result<NodeId> {
    let wc = g.constant(w.clone());
    let p = g.mul(y, wc)?;
    g.sum(p)
}

type OpCase = fn(&mut Graph, NodeId, &Tensor) -> Result<NodeId>;

fn c1_gradients() -> Result<Outcome> {
    const CASES: usize = 100;
    const STEP: f64 = 1e-5;
    let mut r = rng::seeded(101);
    // Each op maps the leaf `x` (3×4) and a fixed random operand `c` to a
    // tensor, then the check reduces it with fixed random weights.
    let ops: Vec<(&str, OpCase)> = vec![
        ("matmul_left", |g, x, c| {
            let c = g.constant(c.reshape(vec![4, 3]).unwrap());
            g.matmul(x, c)
        }),
        ("matmul_right", |g, x, c| {
            let c = g.constant(c.reshape(vec![4, 3]).unwrap());
            g.matmul(c, x)
        }),
        ("add", |g, x, c| {
            let c = g.constant(c.clone());
            g.add(x, c)
        }),
        ("add_bias", |g, x, c| {
            let b = g.constant(Tensor::matrix(1, 4, c.row(0).to_vec()).unwrap());
            g.add(x, b)
        }),
        ("sub", |g, x, c| {
            let c = g.constant(c.clone());
            g.sub(c, x)
        }),
        ("mul", |g, x, c| {
            let c = g.constant(c.clone());
            g.mul(x, c)
        }),
        ("mul_self", |g, x, _| g.mul(x, x)),
        ("affine", |g, x, c| g.affine(x, c.data()[0], c.data()[1])),
        ("scale", |g, x, c| g.scale(x, c.data()[2])),
        ("sigmoid", |g, x, _| g.sigmoid(x)),
        ("silu", |g, x, _| g.silu(x)),
        ("log", |g, x, _| {
            let sq = g.mul(x, x)?;
            let pos = g.affine(sq, 1.0, 0.5)?;
            g.log(pos)
        }),
        ("log_sigmoid", |g, x, _| g.log_sigmoid(x)),
        ("sum", |g, x, _| {
            let s = g.sum(x)?;
            g.mul(s, s)
        }),
        ("mean", |g, x, _| {
            let s = g.mean(x)?;
            g.mul(s, s)
        }),
        ("squared_norm", |g, x, _| g.squared_norm(x)),
        ("concat", |g, x, c| {
            let c = g.constant(c.clone());
            let a = g.concat(x, c)?;
            g.concat(c, a)
        }),
    ];
    let mut worst_op = ("", 0.0f64);
    for (name, op) in &ops {
        for _ in 0..CASES {
            let x = randn(&[3, 4], &mut r);
            let c = randn(&[3, 4], &mut r);
            let probe = {
                let mut g = Graph::new();
                let xid = g.leaf("x", x.clone());
                let y = op(&mut g, xid, &c)?;
                g.value(y).shape().to_vec()
            };
            let w = randn(&probe, &mut r);
            let err = grad_check(
                |g, xid| {
                    let y = op(g, xid, &c)?;
                    if g.value(y).is_scalar() {
                        Ok(y)
                    } else {
                        weighted_sum(g, y, &w)
                    }
                },
                &x,
                STEP,
            )?;
            if err > worst_op.1 {
                worst_op = (name, err);
            }
        }
    }

    // Guidance term of a randomly initialised classifier against finite
    // differences of log(τ + p(y=k | x)).
    let sched = desk_schedule();
    let mut worst_guide = 0.0f64;
    for case in 0..CASES {
        let clf = ClassifierParams::init(MlpSpec::classifier(3), &mut rng::seeded(1000 + case as u64));
        let x = randn(&[1, 3], &mut r);
        let t = r.random_range(1..=sched.steps());
        let cfg = GuidanceConfig {
            alpha: 0.5,
            scale: 1.0,
            ..GuidanceConfig::default()
        };
        let den = cpsample::models::testing::FnPredictor::zeros();
        let out = cp_epsilon_hat(&den, &clf, &x, t, &sched, &cfg)?;
        if !out.branch[0].triggered() {
            continue;
        }
        let coef = (1.0 - sched.alpha_bar(t)).sqrt();
        let grad: Vec<f64> = out.eps_hat.data().iter().map(|v| -v / coef).collect();
        let p1 = out.p1[0];
        let target_one = p1 < 0.5;
        let f = |v: &[f64]| -> f64 {
            let xt = Tensor::matrix(1, 3, v.to_vec()).unwrap();
            let l = clf.logits(&xt, &[t]).unwrap()[0];
            let p = if target_one { sigmoid(l) } else { 1.0 - sigmoid(l) };
            (cfg.tau + p).ln()
        };
        let mut v = x.to_vec();
        for i in 0..3 {
            let o = v[i];
            v[i] = o + STEP;
            let fp = f(&v);
            v[i] = o - STEP;
            let fm = f(&v);
            v[i] = o;
            let fd = (fp - fm) / (2.0 * STEP);
            worst_guide = worst_guide.max((grad[i] - fd).abs() / (fd.abs() + 1e-12));
        }
    }
    let pass = worst_op.1 <= 1e-4 && worst_guide <= 1e-4;
    outcome(
        pass,
        format!(
            "{} ops x {CASES} cases, worst op {} rel err {:.2e}; guidance term worst rel err {:.2e}",
            ops.len(),
            worst_op.0,
            worst_op.1,
            worst_guide
        ),
    )
}

// ---------------------------------------------------------------- 2

fn c2_forward_marginals() -> Result<Outcome> {
    const DRAWS: usize = 10_000;
    let sched = desk_schedule();
    let mut r = rng::seeded(202);
    let mut worst_mean = 0.0f64;
    let mut worst_var = 0.0f64;
    for _ in 0..5 {
        let d = 3;
        let x0 = randn(&[1, d], &mut r);
        let t = r.random_range(1..=sched.steps());
        let tiled = x0.select_rows(&vec![0; DRAWS]);
        let eps = randn(&[DRAWS, d], &mut r);
        let xt = forward_sample(&tiled, t, &eps, &sched)?;
        let ab = sched.alpha_bar(t);
        for j in 0..d {
            let col: Vec<f64> = (0..DRAWS).map(|i| xt.row(i)[j]).collect();
            let m = col.iter().sum::<f64>() / DRAWS as f64;
            let v = col.iter().map(|c| (c - m) * (c - m)).sum::<f64>() / (DRAWS as f64 - 1.0);
            worst_mean = worst_mean.max((m - ab.sqrt() * x0.data()[j]).abs() / (4.0 / (DRAWS as f64).sqrt()));
            worst_var = worst_var.max((v - (1.0 - ab)).abs() / (1.0 - ab));
        }
    }
    outcome(
        worst_mean <= 1.0 && worst_var <= 0.05,
        format!("worst mean error {worst_mean:.3} of 4/sqrt(n); worst relative variance error {worst_var:.4}"),
    )
}

// ---------------------------------------------------------------- 3

fn c3_reduction() -> Result<Outcome> {
    let sched = desk_schedule();
    let den = DenoiserParams::init(MlpSpec::denoiser(2), &mut rng::seeded(31));
    let clf = ClassifierParams::init(MlpSpec::classifier(2), &mut rng::seeded(32));
    let cfg = GuidanceConfig {
        alpha: 0.5,
        scale: 0.0,
        ..GuidanceConfig::default()
    };
    let cp = cpsample_generate(&den, &clf, &sched, &cfg, 100, 2, 33)?;
    let plain = ddim_generate(&den, &sched, 1, 100, 2, 33)?;
    outcome(cp.samples.bit_eq(&plain), "100 samples, scale 0 vs unguided DDIM")
}

// ---------------------------------------------------------------- 4

fn classifier_train_config(batch: usize, max_steps: usize, eval_every: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        ema_rate: 0.995,
        batch_size: batch,
        max_steps,
        eval_every,
        ..TrainConfig::default()
    }
}

fn c4_memorization() -> Result<Outcome> {
    let (train, _) = generate_dataset(&DatasetSpec {
        kind: DatasetKind::GaussMixture2d,
        n_train: 64,
        n_test: 64,
        seed: 1,
    })?;
    let labels = assign_random_labels(64, 3)?;
    let mut spec = MlpSpec::classifier(2);
    spec.input_scale = 10.0;
    let cfg = classifier_train_config(64, 40_000, 100);
    let fit = train_classifier(&train, &labels, &desk_schedule(), spec, &cfg, 8)?;
    outcome(
        fit.clean_ce < 0.05 && fit.clean_accuracy == 1.0,
        format!(
            "64 points: CE {:.4}, accuracy {:.3} after {} of {} steps",
            fit.clean_ce, fit.clean_accuracy, fit.model.steps, cfg.max_steps
        ),
    )
}

// ---------------------------------------------------------------- desk run for 5, 8, 10, 11

const DESK_N: usize = 2000;
const DESK_DELTA: f64 = 0.05;

struct Desk {
    train: Tensor,
    test: Tensor,
    labels: LabelSet,
    schedule: NoiseSchedule,
    classifier: ClassifierParams,
    unguided: Tensor,
    protected: Tensor,
    protected_p1: Vec<f64>,
    rejection: RejectionRun,
}

fn desk_guidance() -> GuidanceConfig {
    GuidanceConfig {
        alpha: 0.25,
        scale: 10.0,
        ..GuidanceConfig::default()
    }
}

fn desk_run() -> Result<Desk> {
    let (train, test) = generate_dataset(&DatasetSpec {
        kind: DatasetKind::GaussMixture2d,
        n_train: 16,
        n_test: 2000,
        seed: 1,
    })?;
    let schedule = desk_schedule();
    let dcfg = TrainConfig {
        learning_rate: 1e-3,
        ema_rate: 0.995,
        batch_size: 64,
        max_steps: 20_000,
        ..TrainConfig::default()
    };
    let den = train_denoiser(&train, &schedule, MlpSpec::denoiser(2), &dcfg, 7)?.ema;
    let labels = assign_random_labels(16, 3)?;
    let mut spec = MlpSpec::classifier(2);
    spec.input_scale = 10.0;
    let fit = train_classifier(&train, &labels, &schedule, spec, &classifier_train_config(64, 40_000, 100), 8)?;
    println!(
        "  desk run: classifier CE {:.4}, accuracy {:.3}, {} steps",
        fit.clean_ce, fit.clean_accuracy, fit.model.steps
    );
    let classifier = fit.model.ema;
    let unguided = ddim_generate(&den, &schedule, 1, DESK_N, 2, 99)?;
    let run = cpsample_generate(&den, &classifier, &schedule, &desk_guidance(), DESK_N, 2, 99)?;
    let rejection = rejection_sample(
        &den,
        &schedule,
        1,
        &train,
        DESK_DELTA,
        Metric::L2,
        &FeatureMap::Identity,
        1000,
        DESK_N,
        199,
    )?;
    Ok(Desk {
        train,
        test,
        labels,
        schedule,
        classifier,
        unguided,
        protected: run.samples,
        protected_p1: run.final_p1,
        rejection,
    })
}

fn inside_count(x: &Tensor, train: &Tensor) -> Result<usize> {
    Ok(nearest_distances(x, train, Metric::L2)?
        .iter()
        .filter(|(_, d)| *d < DESK_DELTA)
        .count())
}

fn c5_replication(d: &Desk) -> Result<Outcome> {
    let base = inside_count(&d.unguided, &d.train)?;
    let prot = inside_count(&d.protected, &d.train)?;
    let test = exceedance_test(base, DESK_N, prot, DESK_N)?;
    let (fb, fp) = (test.baseline_fraction, test.protected_fraction);
    let reduction_ok = fb >= 5.0 * fp;
    outcome(
        fb >= 0.03 && reduction_ok && test.p_value < 0.01,
        format!(
            "inside δ={DESK_DELTA}: unguided {:.2}% -> CPSample {:.2}% (α=0.25, s=10), one-sided p = {:.2e}",
            100.0 * fb,
            100.0 * fp,
            test.p_value
        ),
    )
}

fn c8_lemma(d: &Desk) -> Result<Outcome> {
    let lip = estimate_local_lipschitz(&d.classifier, &d.train, 0, DESK_DELTA, 100, 81)?;
    let acc = measure_accuracy(&d.classifier, &d.train, &d.labels, &d.schedule, 0.1, &DEFAULT_T_GRID, 10, 82)?;
    let mut inputs = LemmaInputs {
        lipschitz: lip.value,
        kappa: 0.1,
        gamma_hat: acc.gamma_hat,
        nu_hat: 0.0,
        delta: DESK_DELTA,
    };
    inputs.delta = admissible_delta(DESK_DELTA, inputs.delta_max());
    inputs.nu_hat = measure_generation(&d.protected_p1, inputs.lambda())?.nu_hat;
    let rep = verify_lemma(&inputs, &d.protected, &d.train, Metric::L2, &FeatureMap::Identity)?;
    println!(
        "  lemma: L̂ = {:.4} (lower bound), κ = {}, γ̂ = {:.4} {:?}, λ = {:.4}, ν̂ = {:.4}, δ = {}, δ_max = {:.4}, condition holds: {}",
        rep.lipschitz,
        rep.kappa,
        rep.gamma_hat,
        acc.per_t,
        rep.lambda,
        rep.nu_hat,
        rep.delta,
        rep.delta_max,
        rep.delta_condition_holds
    );
    outcome(
        rep.pass,
        format!(
            "outside rate {:.4} >= bound {:.4} ({} of {} outside)",
            rep.empirical_outside_rate, rep.bound, rep.outside_count, rep.n_samples
        ),
    )
}

fn c10_quality(d: &Desk) -> Result<Outcome> {
    let fd_u = frechet_between(&d.unguided, &d.test, &FeatureMap::Identity)?;
    let fd_p = frechet_between(&d.protected, &d.test, &FeatureMap::Identity)?;
    outcome(
        fd_p <= 2.0 * fd_u,
        format!("FD to held-out: unguided {fd_u:.4}, CPSample {fd_p:.4}, ratio {:.3}", fd_p / fd_u),
    )
}

fn c11_rejection(d: &Desk) -> Result<Outcome> {
    let rej_inside = inside_count(&d.rejection.samples, &d.train)?;
    let cp_inside = inside_count(&d.protected, &d.train)?;
    let base = inside_count(&d.unguided, &d.train)? as f64 / DESK_N as f64;
    let predicted = 1.0 / (1.0 - base);
    let observed = d.rejection.mean_tries_per_accept();
    let rel = (observed - predicted).abs() / predicted;
    let rate = |c: usize| c as f64 / DESK_N as f64;
    outcome(
        rej_inside == 0 && rate(cp_inside) <= 2.0 * rate(rej_inside) && rel <= 0.2,
        format!(
            "rejection inside {rej_inside}, CPSample inside {cp_inside}; tries per accept {observed:.4} vs geometric {predicted:.4} ({:.1}% off)",
            100.0 * rel
        ),
    )
}

// ---------------------------------------------------------------- 6

fn c6_mia() -> Result<Outcome> {
    const N: usize = 1024;
    const T: usize = 25;
    let (train, test) = generate_dataset(&DatasetSpec {
        kind: DatasetKind::TinyShapes8x8,
        n_train: N,
        n_test: N,
        seed: 1,
    })?;
    let sched = desk_schedule();
    let dcfg = TrainConfig {
        learning_rate: 3e-3,
        ema_rate: 0.995,
        batch_size: 128,
        max_steps: 20_000,
        ..TrainConfig::default()
    };
    let den = train_denoiser(&train, &sched, MlpSpec::denoiser(64), &dcfg, 7)?.ema;
    let plain = |x: &Tensor, t: usize| den.predict(x, &vec![t; x.rows()]);
    let base = mia_z_test(&mia_error(plain, &train, T, &sched, 11)?, &mia_error(plain, &test, T, &sched, 12)?)?;

    let labels = assign_random_labels(N, 3)?;
    let fit = train_classifier(
        &train,
        &labels,
        &sched,
        MlpSpec::classifier(64),
        &classifier_train_config(128, 20_000, 200),
        8,
    )?;
    let clf = fit.model.ema;
    let mut ps = Vec::new();
    for alpha in [0.5, 0.25, 0.001] {
        let g = GuidanceConfig {
            alpha,
            scale: 10.0,
            ..GuidanceConfig::default()
        };
        let f = |x: &Tensor, t: usize| cp_epsilon_hat(&den, &clf, x, t, &sched, &g).map(|o| o.eps_hat);
        let rep = mia_z_test(&mia_error(f, &train, T, &sched, 11)?, &mia_error(f, &test, T, &sched, 12)?)?;
        ps.push((alpha, rep.p));
    }
    let any_safe = ps.iter().any(|(_, p)| *p > 0.05);
    let none_bad = ps.iter().all(|(_, p)| *p >= 0.01);
    let list: Vec<String> = ps.iter().map(|(a, p)| format!("α={a}: p={p:.3}")).collect();
    outcome(
        base.p < 0.01 && any_safe && none_bad,
        format!(
            "tiny-shapes {N}/{N}, t={T}: unprotected p = {:.2e}; CPSample s=10 {}",
            base.p,
            list.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- 7

fn c7_calibration() -> Result<Outcome> {
    let mut r = rng::seeded(707);
    let mut pvals = Vec::with_capacity(500);
    for _ in 0..500 {
        // Reconstruction errors of 4-dim noise: χ²(4) in both groups.
        let draw = |n: usize, r: &mut rng::Rng| -> Vec<f64> {
            (0..n)
                .map(|_| (0..4).map(|_| r.sample::<f64, _>(StandardNormal).powi(2)).sum())
                .collect()
        };
        let a = draw(200, &mut r);
        let b = draw(200, &mut r);
        pvals.push(mia_z_test(&a, &b)?.p);
    }
    let ks = ks_uniform(&pvals)?;

    let trials = 200;
    let mut rejects = 0;
    for trial in 0..trials {
        let mut tr = rng::stream(708, trial as u64);
        let full = randn(&[60, 5], &mut tr);
        let idx: Vec<usize> = rand::seq::index::sample(&mut tr, 60, 10).into_vec();
        let finetune = full.select_rows(&idx);
        let samples = randn(&[40, 5], &mut tr);
        let rep = permutation_test(&samples, &finetune, &full, 100, &FeatureMap::Identity, 0.05, trial as u64)?;
        rejects += rep.reject as usize;
    }
    let rate = rejects as f64 / trials as f64;
    outcome(
        ks < 0.1 && (rate - 0.05).abs() <= 0.02,
        format!("MIA null KS {ks:.4} over 500 replicates; permutation null rejection rate {rate:.3} over {trials} trials"),
    )
}

// ---------------------------------------------------------------- 9

fn c9_frechet() -> Result<Outcome> {
    let g1 = |m: f64, v: f64| GaussianMoments {
        mean: vec![m],
        cov: vec![v],
        n: 0,
        regularized: false,
    };
    let e1 = (frechet_distance(&g1(0.0, 1.0), &g1(1.0, 1.0))? - 1.0).abs();
    let e2 = (frechet_distance(&g1(0.0, 1.0), &g1(0.0, 4.0))? - 1.0).abs();
    let e3 = frechet_distance(&g1(0.3, 2.0), &g1(0.3, 2.0))?.abs();

    let mut r = rng::seeded(909);
    let mut worst_sym = 0.0f64;
    let mut worst_rot = 0.0f64;
    let mut worst_self = 0.0f64;
    let k = 4;
    let random_moments = |r: &mut rng::Rng| {
        let a = randn(&[k, k], r);
        let mut cov = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                cov[i * k + j] = (0..k).map(|l| a.row(i)[l] * a.row(j)[l]).sum::<f64>() + if i == j { 0.1 } else { 0.0 };
            }
        }
        GaussianMoments {
            mean: randn(&[k], r).to_vec(),
            cov,
            n: 0,
            regularized: false,
        }
    };
    for _ in 0..20 {
        let a = random_moments(&mut r);
        let b = random_moments(&mut r);
        let ab = frechet_distance(&a, &b)?;
        worst_sym = worst_sym.max((ab - frechet_distance(&b, &a)?).abs());
        worst_self = worst_self.max(frechet_distance(&a, &a)?.abs());
        // Random orthogonal Q by Gram–Schmidt.
        let m = randn(&[k, k], &mut r);
        let mut q: Vec<Vec<f64>> = Vec::new();
        for i in 0..k {
            let mut v = m.row(i).to_vec();
            for u in &q {
                let dot: f64 = v.iter().zip(u).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(u) {
                    *x -= dot * y;
                }
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            q.push(v.into_iter().map(|x| x / n).collect());
        }
        let rotate = |g: &GaussianMoments| {
            let mean = (0..k).map(|i| (0..k).map(|j| q[i][j] * g.mean[j]).sum()).collect();
            let mut cov = vec![0.0; k * k];
            for i in 0..k {
                for j in 0..k {
                    let mut s = 0.0;
                    for a in 0..k {
                        for b in 0..k {
                            s += q[i][a] * g.cov[a * k + b] * q[j][b];
                        }
                    }
                    cov[i * k + j] = s;
                }
            }
            GaussianMoments {
                mean,
                cov,
                n: 0,
                regularized: false,
            }
        };
        worst_rot = worst_rot.max((frechet_distance(&rotate(&a), &rotate(&b))? - ab).abs());
    }
    outcome(
        e1 <= 1e-8 && e2 <= 1e-8 && e3 <= 1e-8 && worst_sym <= 1e-8 && worst_self <= 1e-8 && worst_rot <= 1e-6,
        format!(
            "1D errors {e1:.1e}/{e2:.1e}/{e3:.1e}; symmetry {worst_sym:.1e}; self {worst_self:.1e}; rotation {worst_rot:.1e}"
        ),
    )
}

// ---------------------------------------------------------------- 12

fn tiny_config(dir: &std::path::Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::parse(default_config_text()).unwrap();
    c.dataset.n_train = 32;
    c.dataset.n_test = 64;
    c.schedule.steps = 50;
    c.schedule.beta_max = 0.1;
    c.denoiser.hidden = vec![32, 32];
    c.denoiser.train.max_steps = 300;
    c.classifier.hidden = vec![32, 32];
    c.classifier.train.max_steps = 300;
    c.sampling.n_samples = 64;
    c.sampling.max_tries = 200;
    c.audit.permutation_replicates = 100;
    c.audit.mia_t = 10;
    c.audit.features = FeatureKind::Identity;
    c.output_dir = dir.to_path_buf();
    c
}

fn c12_reproducibility() -> Result<Outcome> {
    let root = std::env::temp_dir().join(format!("cpsample-acceptance-{}", std::process::id()));
    let dirs = [root.join("a"), root.join("b")];
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| cpsample::Error::Config(e.to_string()))?;
    for d in &dirs {
        pool.install(|| Pipeline::new(tiny_config(d), true)?.run_all())?;
    }
    let mut files: Vec<String> = REPORT_FILES.iter().map(|s| s.to_string()).collect();
    files.extend(["summary.json", "cpsample_trace.csv", "similarity_hist_cpsample.csv"].map(String::from));
    let mut differing = Vec::new();
    for f in &files {
        let a = std::fs::read(dirs[0].join(f))?;
        let b = std::fs::read(dirs[1].join(f))?;
        if a != b {
            differing.push(f.clone());
        }
    }
    let _ = std::fs::remove_dir_all(&root);
    outcome(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} report files byte-identical across two single-threaded runs", files.len())
        } else {
            format!("differing files: {}", differing.join(", "))
        },
    )
}

// ----------------------------------------------------------------

fn report(n: usize, name: &str, r: Result<Outcome>, started: Instant, failures: &mut usize) {
    let secs = started.elapsed().as_secs_f64();
    match r {
        Ok(o) => {
            if !o.pass {
                *failures += 1;
            }
            println!(
                "criterion {n:>2} {:<4} {name} [{secs:.1}s]: {}",
                if o.pass { "PASS" } else { "FAIL" },
                o.detail
            );
        }
        Err(e) => {
            *failures += 1;
            println!("criterion {n:>2} FAIL {name} [{secs:.1}s]: error: {e}");
        }
    }
}

fn main() {
    // `cargo test -- --list` and filters from the default harness.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut failures = 0;
    let run = |n: usize, name: &str, f: &dyn Fn() -> Result<Outcome>, failures: &mut usize| {
        let t = Instant::now();
        report(n, name, f(), t, failures);
    };
    run(1, "gradient fidelity", &c1_gradients, &mut failures);
    run(2, "forward-process marginals", &c2_forward_marginals, &mut failures);
    run(3, "reduction identity", &c3_reduction, &mut failures);
    run(4, "classifier memorization", &c4_memorization, &mut failures);

    let t = Instant::now();
    match desk_run() {
        Ok(desk) => {
            println!("  desk run ready [{:.1}s]", t.elapsed().as_secs_f64());
            run(5, "replication prevention", &|| c5_replication(&desk), &mut failures);
            run(6, "MIA protection", &c6_mia, &mut failures);
            run(7, "test calibration", &c7_calibration, &mut failures);
            run(8, "lemma verification", &|| c8_lemma(&desk), &mut failures);
            run(9, "Fréchet exactness", &c9_frechet, &mut failures);
            run(10, "quality retention", &|| c10_quality(&desk), &mut failures);
            run(11, "rejection-sampling equivalence", &|| c11_rejection(&desk), &mut failures);
        }
        Err(e) => {
            for (n, name) in [(5, "replication prevention"), (8, "lemma verification"), (10, "quality retention"), (11, "rejection-sampling equivalence")] {
                failures += 1;
                println!("criterion {n:>2} FAIL {name}: desk run failed: {e}");
            }
            run(6, "MIA protection", &c6_mia, &mut failures);
            run(7, "test calibration", &c7_calibration, &mut failures);
            run(9, "Fréchet exactness", &c9_frechet, &mut failures);
        }
    }
    run(12, "reproducibility", &c12_reproducibility, &mut failures);
    println!("acceptance: {} of 12 criteria passed", 12 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
