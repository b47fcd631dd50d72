//! Run-directory workflow shared by the CLI and the acceptance tests.
//!
//! A run directory collects `config.txt`, `checkpoint.json`, `train_log.csv`,
//! `metrics.csv`, `curvature.csv` and `report.json`. Everything but the
//! timing fields of `report.json` is a pure function of the config.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use noisecurve_core::data::Dataset;
use noisecurve_core::rng::derive_seed;
use serde_json::{Map, Value};

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::curvature_report::{curvature_report, write_curvature_csv, CurvatureRun};
use crate::error::{HarnessError, Result};
use crate::evaluate::{evaluate, summarize, write_metrics_csv, EvalRequest, MetricsRecord};
use crate::train::{accuracy, train, EpochLog, Trained};

const TAG_SPLIT: u64 = 4;

/// Train and test sets for `cfg`.
pub fn datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let data = cfg.build_dataset()?;
    Ok(data.stratified_split(cfg.split, derive_seed(cfg.seed, TAG_SPLIT))?)
}

pub fn run_id(cfg: &ExperimentConfig) -> String {
    format!("{}-{}", cfg.method.name(), cfg.seed)
}

pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: impl AsRef<Path>) -> Result<Self> {
        std::fs::create_dir_all(root.as_ref())?;
        Ok(Self {
            root: root.as_ref().to_path_buf(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.path("checkpoint.json")
    }

    pub fn metrics(&self) -> PathBuf {
        self.path("metrics.csv")
    }

    pub fn curvature(&self) -> PathBuf {
        self.path("curvature.csv")
    }

    pub fn report(&self) -> PathBuf {
        self.path("report.json")
    }

    /// Replaces the `section` entry of `report.json`, keeping the others.
    pub fn update_report(&self, section: &str, value: Value) -> Result<()> {
        let path = self.report();
        let mut root = match std::fs::read_to_string(&path) {
            Ok(text) => match serde_json::from_str::<Value>(&text)? {
                Value::Object(m) => m,
                _ => return Err(HarnessError::Invalid(format!("{} is not a JSON object", path.display()))),
            },
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Map::new(),
            Err(e) => return Err(e.into()),
        };
        root.insert(section.to_string(), value);
        let mut text = serde_json::to_string_pretty(&Value::Object(root))?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}

pub fn write_train_log(log: &[EpochLog], path: &Path) -> Result<()> {
    use std::io::Write;
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(
        out,
        "epoch,lr,softmax,compact,margin,reg,noisy,total,stability,train_compact,train_margin,train_accuracy"
    )?;
    for e in log {
        let l = &e.losses;
        writeln!(
            out,
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            e.epoch,
            e.lr,
            l.softmax,
            l.compact,
            l.margin,
            l.reg,
            l.noisy,
            l.total,
            e.stability,
            e.train_compact,
            e.train_margin,
            e.train_accuracy
        )?;
    }
    out.flush()?;
    Ok(())
}

pub fn checkpoint_of(cfg: &ExperimentConfig, trained: &Trained) -> Checkpoint {
    Checkpoint::from_model(
        &trained.model,
        cfg.seed,
        cfg.method.name(),
        cfg.loss,
        trained.centroids.clone(),
    )
}

/// Trains and writes `config.txt`, `checkpoint.json`, `train_log.csv` and
/// the `train` section of `report.json`.
pub fn train_run(cfg: &ExperimentConfig, dir: &RunDir) -> Result<Trained> {
    let start = Instant::now();
    let (train_set, test_set) = datasets(cfg)?;
    let trained = train(cfg, &train_set)?;
    std::fs::write(dir.path("config.txt"), cfg.to_text())?;
    checkpoint_of(cfg, &trained).save(dir.checkpoint())?;
    write_train_log(&trained.log, &dir.path("train_log.csv"))?;
    let last = trained.log.last();
    dir.update_report(
        "train",
        serde_json::json!({
            "run_id": run_id(cfg),
            "method": cfg.method.name(),
            "seed": cfg.seed,
            "epochs": cfg.optim.epochs,
            "warnings": cfg.warnings(),
            "final": last,
            "train_accuracy": accuracy(&trained.model, &train_set)?,
            "test_accuracy": accuracy(&trained.model, &test_set)?,
            "wall_seconds": start.elapsed().as_secs_f64(),
        }),
    )?;
    Ok(trained)
}

pub fn load_model(dir: &RunDir) -> Result<(Checkpoint, noisecurve_core::model::Model)> {
    let ck = Checkpoint::load(dir.checkpoint())?;
    let model = ck.model()?;
    Ok((ck, model))
}

/// Evaluates the run's checkpoint and writes `metrics.csv` plus the `eval`
/// section of `report.json`.
pub fn eval_run(cfg: &ExperimentConfig, dir: &RunDir) -> Result<Vec<MetricsRecord>> {
    let start = Instant::now();
    let (ck, model) = load_model(dir)?;
    let (_, test) = datasets(cfg)?;
    let id = run_id(cfg);
    let records = evaluate(
        &model,
        &test,
        &EvalRequest {
            run_id: &id,
            method: &ck.method,
            seed: cfg.seed,
            perturbations: &cfg.perturbations,
            repeats: cfg.repeats,
            loss: &ck.loss,
        },
    )?;
    let mut out = BufWriter::new(File::create(dir.metrics())?);
    write_metrics_csv(&records, &mut out)?;
    std::io::Write::flush(&mut out)?;
    dir.update_report(
        "eval",
        serde_json::json!({
            "summary": summarize(&records),
            "wall_seconds": start.elapsed().as_secs_f64(),
        }),
    )?;
    Ok(records)
}

/// Curvature report on the run's test set; writes `curvature.csv` and the
/// `curvature` section of `report.json`.
pub fn curvature_run(cfg: &ExperimentConfig, dir: &RunDir) -> Result<CurvatureRun> {
    let start = Instant::now();
    let (_, model) = load_model(dir)?;
    let (_, test) = datasets(cfg)?;
    let run = curvature_report(&model, &test, &cfg.curvature, cfg.seed)?;
    let mut out = BufWriter::new(File::create(dir.curvature())?);
    write_curvature_csv(&run.samples, &mut out)?;
    std::io::Write::flush(&mut out)?;
    dir.update_report(
        "curvature",
        serde_json::json!({
            "summary": run.summary,
            "wall_seconds": start.elapsed().as_secs_f64(),
        }),
    )?;
    Ok(run)
}
