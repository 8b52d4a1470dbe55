use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cpsample::config::{default_config_text, ExperimentConfig};
use cpsample::pipeline::Pipeline;
use cpsample::Error;

#[derive(Parser)]
#[command(name = "cpsample", version, about = "Classifier-protected sampling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config; the built-in 2D ring config when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Re-derive every seed in the config from this value.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding `[output] dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Ignore existing checkpoints.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads; 1 gives bit-reproducible runs.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train/test split and random labels.
    GenData(Common),
    TrainDenoiser(Common),
    TrainClassifier(Common),
    /// Draw unguided, CPSample and rejection samples.
    Sample(Common),
    AuditSim(Common),
    AuditMia(Common),
    AuditPerm(Common),
    VerifyLemma(Common),
    EvalFrechet(Common),
    /// Every stage in order, then a summary.
    RunAll {
        #[command(flatten)]
        common: Common,
        /// Exit with status 4 if a summary check fails.
        #[arg(long)]
        check: bool,
    },
    /// Print the built-in config.
    DefaultConfig,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_STAGE: u8 = 3;
const EXIT_CHECK: u8 = 4;

fn load(c: &Common) -> Result<Pipeline, Error> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::parse(default_config_text())?,
    };
    if let Some(s) = c.seed {
        cfg.reseed(s);
    }
    if let Some(o) = &c.out {
        cfg.output_dir = o.clone();
    }
    if let Some(n) = c.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Pipeline::new(cfg, c.force).map_err(|e| match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    })
}

fn run(cmd: Command) -> Result<u8, Error> {
    let common = match &cmd {
        Command::DefaultConfig => {
            print!("{}", default_config_text());
            return Ok(0);
        }
        Command::RunAll { common, .. } => common.clone(),
        Command::GenData(c)
        | Command::TrainDenoiser(c)
        | Command::TrainClassifier(c)
        | Command::Sample(c)
        | Command::AuditSim(c)
        | Command::AuditMia(c)
        | Command::AuditPerm(c)
        | Command::VerifyLemma(c)
        | Command::EvalFrechet(c) => c.clone(),
    };
    let p = load(&common)?;
    let out = p.out_dir().display().to_string();
    match cmd {
        Command::GenData(_) => {
            let d = p.data()?;
            println!("train {} x {}, test {} -> {out}/data.cpta", d.train.rows(), d.train.cols(), d.test.rows());
        }
        Command::TrainDenoiser(_) => {
            p.denoiser()?;
            println!("denoiser -> {out}/denoiser.cpta");
        }
        Command::TrainClassifier(_) => {
            p.classifier()?;
            println!("classifier -> {out}/classifier.cpta");
        }
        Command::Sample(_) => {
            let s = p.samples()?;
            println!(
                "unguided {}, cpsample {}, rejection {} -> {out}/samples.cpta",
                s.ddim.rows(),
                s.cpsample.rows(),
                s.rejection.rows()
            );
        }
        Command::AuditSim(_) => {
            let r = p.audit_similarity()?;
            println!(
                "inside rate: unguided {:.4}, cpsample {:.4}, rejection {:.4}; exceedance p = {:.3e}",
                r.unguided.inside_fraction, r.cpsample.inside_fraction, r.rejection.inside_fraction, r.exceedance.p_value
            );
        }
        Command::AuditMia(_) => {
            let r = p.audit_mia()?;
            println!(
                "MIA at t = {}: unprotected p = {:.3e}, protected p = {:.3e}",
                r.t, r.unprotected.p, r.protected.p
            );
        }
        Command::AuditPerm(_) => {
            let r = p.audit_permutation()?;
            println!(
                "permutation p-hat: unprotected {:.3} (reject {}), protected {:.3} (reject {})",
                r.unprotected.p_hat, r.unprotected.reject, r.protected.p_hat, r.protected.reject
            );
        }
        Command::VerifyLemma(_) => {
            let r = p.verify_lemma()?;
            println!(
                "outside rate {:.4} vs bound {:.4}: {}{}",
                r.empirical_outside_rate,
                r.bound,
                if r.pass { "PASS" } else { "FAIL" },
                if r.delta_condition_holds { "" } else { " (delta exceeds delta_max, bound vacuous)" }
            );
        }
        Command::EvalFrechet(_) => {
            let r = p.eval_frechet()?;
            for e in &r.entries {
                println!("{:<10} FD {:.5}", e.sampler, e.frechet_distance);
            }
            println!("ratio cpsample/unguided {:.3}", r.ratio);
        }
        Command::RunAll { check, .. } => {
            let s = p.run_all()?;
            for (name, ok) in &s.checks {
                println!("{} {name}", if *ok { "ok  " } else { "FAIL" });
            }
            println!("reports in {out}");
            if check && !s.all_passed() {
                return Ok(EXIT_CHECK);
            }
        }
        Command::DefaultConfig => unreachable!(),
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => EXIT_CONFIG,
                _ => EXIT_STAGE,
            })
        }
    }
}
