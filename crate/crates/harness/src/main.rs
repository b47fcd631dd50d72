use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use noisecurve_harness::checkpoint::Checkpoint;
use noisecurve_harness::config::ExperimentConfig;
use noisecurve_harness::evaluate::summarize;
use noisecurve_harness::pipeline::{self, RunDir};
use noisecurve_harness::transform::transform_report;
use noisecurve_harness::verify::{run_suite, Suite, SuiteReport};
use noisecurve_harness::Result;

#[derive(Parser)]
#[command(name = "noisecurve", version, about = "Feature-geometry training and noise-robustness experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Directory holding checkpoint.json, metrics.csv, curvature.csv and report.json.
    #[arg(long)]
    run_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured dataset and save it in the binary format.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write its checkpoint.
    Train(RunArgs),
    /// Evaluate a trained checkpoint under the configured perturbations.
    Eval(RunArgs),
    /// Per-sample input-curvature report for a trained checkpoint.
    Curvature(RunArgs),
    /// Run self-checking suites; exits with 1 if any check fails.
    Verify {
        /// Suite name; all suites when omitted.
        #[arg(long)]
        suite: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the machine-readable report here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Apply the prediction-preserving rescaling to a trained checkpoint.
    Transform {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        nu: f64,
        /// Output checkpoint; defaults to `checkpoint_nu<ν>.json` in the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::parse(&std::fs::read_to_string(path)?)?.with_env_seed()?;
    cfg.validate()?;
    for w in cfg.warnings() {
        eprintln!("warning: {w}");
    }
    Ok(cfg)
}

fn verify(suite: Option<String>, seed: u64, json: Option<PathBuf>) -> Result<bool> {
    let suites = match suite {
        Some(s) => vec![s.parse::<Suite>()?],
        None => Suite::ALL.to_vec(),
    };
    let mut reports: Vec<SuiteReport> = Vec::new();
    for s in suites {
        let r = run_suite(s, seed)?;
        for c in &r.checks {
            let tag = if c.passed { "PASS" } else { "FAIL" };
            println!("{tag} {}/{} measured={:e} bound={:e} ({})", r.suite, c.name, c.measured, c.bound, c.detail);
        }
        reports.push(r);
    }
    if let Some(path) = json {
        std::fs::write(path, serde_json::to_string_pretty(&reports)? + "\n")?;
    }
    Ok(reports.iter().all(|r| r.passed))
}

fn transform(run: &RunArgs, nu: f64, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(&run.config)?;
    let dir = RunDir::create(&run.run_dir)?;
    let (ck, model) = pipeline::load_model(&dir)?;
    let (_, test) = pipeline::datasets(&cfg)?;
    let (scaled, report) = transform_report(&model, &test, nu)?;
    let centroids = ck.centroids.clone().map(|mut s| {
        s.centroids.values_mut().flatten().for_each(|v| *v *= nu);
        s
    });
    let out = out.unwrap_or_else(|| dir.path(&format!("checkpoint_nu{nu}.json")));
    Checkpoint::from_model(&scaled, ck.seed, &ck.method, ck.loss, centroids).save(&out)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    dir.update_report("transform", serde_json::to_value(&report)?)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData { config, out } => {
            let data = load_config(&config)?.build_dataset()?;
            data.save(&out)?;
            println!("wrote {} samples to {}", data.len(), out.display());
        }
        Command::Train(a) => {
            let cfg = load_config(&a.config)?;
            let trained = pipeline::train_run(&cfg, &RunDir::create(&a.run_dir)?)?;
            if let Some(last) = trained.log.last() {
                println!(
                    "epoch {} loss {:.6} train accuracy {:.4}",
                    last.epoch, last.losses.total, last.train_accuracy
                );
            }
        }
        Command::Eval(a) => {
            let cfg = load_config(&a.config)?;
            let records = pipeline::eval_run(&cfg, &RunDir::create(&a.run_dir)?)?;
            for s in summarize(&records) {
                println!("{:<32} mean {:.4} std {:.4} (n={})", s.perturbation, s.mean, s.std, s.repeats);
            }
        }
        Command::Curvature(a) => {
            let cfg = load_config(&a.config)?;
            let r = pipeline::curvature_run(&cfg, &RunDir::create(&a.run_dir)?)?;
            println!("{}", serde_json::to_string_pretty(&r.summary)?);
        }
        Command::Verify { suite, seed, json } => return verify(suite, seed, json),
        Command::Transform { run, nu, out } => transform(&run, nu, out)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
