//! Experiment orchestration: data loading, the CU and SU pipeline stages,
//! the three studies and the files each of them leaves behind.
//!
//! Output layout for a study:
//!
//! ```text
//! out/cu/seed<k>/{config.txt, cu.ckpt, metrics_cu.csv}
//! out/<study>/{config.txt, summary.csv, curves.csv, run.txt}
//! out/<study>/<cell>/{config.txt, metrics_su<n>.csv, su<n>.ckpt}
//! ```

pub mod config;
mod studies;

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::cu::{train_cu, CuEpochMetrics, CuModel};
use crate::error::{Error, Result};
use crate::nnet::Checkpoint;
use crate::semsource::{Dataset, MnistPaths, Split, Task};
use crate::stochastic::SeedStream;
use crate::su::{evaluate_task, train_su, EvalSet, SourceFeatures, SuArch, SuEpochMetrics, SuModel};

pub use config::{ExperimentConfig, SWEEP_DIMS};
pub use studies::{
    study_cooperation, study_priors, study_rate_sweep, CellResult, StudyKind, StudyTable, SummaryRow,
};

/// Training subset and the full test split.
#[derive(Debug, Clone)]
pub struct DataSplits {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<DataSplits> {
    let paths = MnistPaths::in_dir(&cfg.data_dir);
    for p in [&paths.train_images, &paths.train_labels, &paths.test_images, &paths.test_labels] {
        if !p.exists() {
            return Err(Error::MissingFile(p.clone()));
        }
    }
    let mut train = paths.load(Split::Train)?.with_binary_task(cfg.binary_task);
    if cfg.subsample > 0 && cfg.subsample < train.len() {
        let mut rng = SeedStream::new(cfg.seed).rng("data-subsample", 0);
        train = train.subsample(cfg.subsample, &mut rng);
    }
    let test = paths.load(Split::Test)?.with_binary_task(cfg.binary_task);
    Ok(DataSplits { train, test })
}

/// Serializes `rows` to a CSV file with a header row.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

/// Provenance written next to every run's outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub command: String,
    pub config: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub metrics: Vec<PathBuf>,
    pub wall_clock_seconds: f64,
    pub git_describe: String,
}

impl RunRecord {
    pub fn new(command: &str, config: PathBuf) -> Self {
        Self {
            command: command.to_string(),
            config,
            checkpoints: Vec::new(),
            metrics: Vec::new(),
            wall_clock_seconds: 0.0,
            git_describe: git_describe(),
        }
    }

    pub fn to_text(&self) -> String {
        let list = |v: &[PathBuf]| v.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(",");
        format!(
            "command = {}\nconfig = {}\ncheckpoints = {}\nmetrics = {}\nwall_clock_seconds = {:.3}\ngit_describe = {}\n",
            self.command,
            self.config.display(),
            list(&self.checkpoints),
            list(&self.metrics),
            self.wall_clock_seconds,
            self.git_describe
        )
    }

    /// Writes `run.txt` into `dir` and returns its path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("run.txt");
        std::fs::write(&path, self.to_text())?;
        Ok(path)
    }
}

/// `git describe` of the source tree this binary was built from.
pub fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| format!("unknown (v{})", env!("CARGO_PKG_VERSION")))
}

/// Writes the resolved config into `dir` and returns its path.
pub fn write_config(cfg: &ExperimentConfig, dir: &Path) -> Result<PathBuf> {
    create_dir(dir)?;
    let path = dir.join("config.txt");
    std::fs::write(&path, cfg.to_text())?;
    Ok(path)
}

/// Artifacts of one CU training stage.
#[derive(Debug, Clone)]
pub struct CuStage {
    pub model: CuModel,
    pub metrics: Vec<CuEpochMetrics>,
    pub checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub config_path: PathBuf,
    pub reused: bool,
}

const CU_KEYS: [&str; 9] = [
    "run.seed",
    "data.dir",
    "data.subsample",
    "data.binary_task",
    "cu.lr",
    "cu.epochs",
    "cu.batch",
    "cu.latent_dim",
    "cu.samples",
];

fn cu_fingerprint(text: &str) -> Vec<String> {
    text.lines()
        .filter(|l| CU_KEYS.iter().any(|k| l.split('=').next().map(str::trim) == Some(k)))
        .map(str::to_string)
        .collect()
}

/// Trains the CU under `seeds` and stores checkpoint, metrics and config
/// in `dir`. A checkpoint already present in `dir` is reused when it was
/// produced by the same data and CU settings.
pub fn train_cu_stage(cfg: &ExperimentConfig, data: &DataSplits, seeds: &SeedStream, dir: &Path) -> Result<CuStage> {
    create_dir(dir)?;
    let checkpoint = dir.join("cu.ckpt");
    let metrics_path = dir.join("metrics_cu.csv");
    let config_path = dir.join("config.txt");
    let text = cfg.to_text();
    if checkpoint.exists() && metrics_path.exists() && config_path.exists() {
        let old = std::fs::read_to_string(&config_path)?;
        if cu_fingerprint(&old) == cu_fingerprint(&text) {
            let model = CuModel::from_checkpoint(&Checkpoint::load(&checkpoint)?)?;
            let metrics = read_cu_metrics(&metrics_path)?;
            if model.is_trained() {
                log::info!("reusing CU checkpoint {}", checkpoint.display());
                return Ok(CuStage {
                    model,
                    metrics,
                    checkpoint,
                    metrics_path,
                    config_path,
                    reused: true,
                });
            }
        }
    }
    let mut model = CuModel::new(cfg.cu_arch(), &mut seeds.rng("cu-init", 0))?;
    let metrics = train_cu(&mut model, &data.train, &cfg.cu, seeds)?;
    model.to_checkpoint().save(&checkpoint)?;
    write_csv(&metrics_path, &metrics)?;
    std::fs::write(&config_path, text)?;
    Ok(CuStage {
        model,
        metrics,
        checkpoint,
        metrics_path,
        config_path,
        reused: false,
    })
}

fn read_cu_metrics(path: &Path) -> Result<Vec<CuEpochMetrics>> {
    #[derive(serde::Deserialize)]
    struct Row {
        epoch: usize,
        loss: f64,
        acc_task1: f64,
        acc_task2: f64,
    }
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize::<Row>()
        .map(|r| {
            let r = r?;
            Ok(CuEpochMetrics {
                epoch: r.epoch,
                loss: r.loss,
                acc_task1: r.acc_task1,
                acc_task2: r.acc_task2,
            })
        })
        .collect()
}

/// Encoder inputs for the SUs: CU latents or raw pixels.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub train: SourceFeatures,
    pub test: SourceFeatures,
}

impl FeatureSet {
    pub fn from_cu(cu: &CuModel, data: &DataSplits) -> Result<Self> {
        Ok(Self {
            train: SourceFeatures::from_cu(cu, &data.train, false)?,
            test: SourceFeatures::from_cu(cu, &data.test, false)?,
        })
    }

    pub fn raw(data: &DataSplits) -> Self {
        Self {
            train: SourceFeatures::raw(&data.train),
            test: SourceFeatures::raw(&data.test),
        }
    }
}

/// Artifacts of one SU training stage.
#[derive(Debug, Clone)]
pub struct SuStage {
    pub model: SuModel,
    pub metrics: Vec<SuEpochMetrics>,
    pub checkpoint: PathBuf,
    pub metrics_path: PathBuf,
}

impl SuStage {
    pub fn final_error(&self) -> f64 {
        self.metrics.last().and_then(|m| m.test_error).unwrap_or(f64::NAN)
    }
}

/// Trains the SU for `task` on `features` with channel dimension `d` and
/// writes `su<n>.ckpt`, `metrics_su<n>.csv` and `config.txt` into `dir`.
pub fn train_su_stage(
    cfg: &ExperimentConfig,
    features: &FeatureSet,
    data: &DataSplits,
    task: Task,
    d: usize,
    seeds: &SeedStream,
    dir: &Path,
) -> Result<SuStage> {
    let mut cell_cfg = cfg.clone();
    cell_cfg.d = d;
    write_config(&cell_cfg, dir)?;
    let arch = SuArch::new(features.train.dim(), d);
    let mut model = SuModel::new(task, arch, &mut seeds.rng("su-init", 0))?;
    let labels = data.train.labels(task);
    let test_labels = data.test.labels(task);
    let eval = EvalSet {
        features: &features.test,
        labels: &test_labels,
    };
    let metrics = train_su(&mut model, &features.train, &labels, Some(eval), &cell_cfg.su_config(), seeds)?;
    let checkpoint = dir.join(format!("su{}.ckpt", task.id()));
    let metrics_path = dir.join(format!("metrics_su{}.csv", task.id()));
    model.to_checkpoint().save(&checkpoint)?;
    write_csv(&metrics_path, &metrics)?;
    Ok(SuStage {
        model,
        metrics,
        checkpoint,
        metrics_path,
    })
}

/// Seed tree of the SU for `task` under the run seed `seeds`.
pub fn su_seeds(seeds: &SeedStream, task: Task) -> SeedStream {
    seeds.child("su", u64::from(task.id()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub task: u8,
    pub d: usize,
    pub noise_draws: usize,
    pub test_error: f64,
}

/// Test error of a trained SU on the CU features of the test split.
pub fn evaluate_stage(cfg: &ExperimentConfig, cu: &CuModel, su: &SuModel, data: &DataSplits) -> Result<EvalRow> {
    let features = SourceFeatures::from_cu(cu, &data.test, false)?;
    let labels = data.test.labels(su.task);
    let mut rng = SeedStream::new(cfg.seed).rng("eval", u64::from(su.task.id()));
    let test_error = evaluate_task(su, &features, &labels, cfg.noise_draws, &mut rng, false)?;
    Ok(EvalRow {
        task: su.task.id(),
        d: su.d(),
        noise_draws: cfg.noise_draws,
        test_error,
    })
}

/// Trains (or reuses) one CU per study seed under `out/cu/seed<k>`.
pub fn study_cus(cfg: &ExperimentConfig, data: &DataSplits, out: &Path) -> Result<Vec<CuStage>> {
    (0..cfg.study_seeds)
        .map(|k| {
            let seeds = study_seed(cfg, k);
            train_cu_stage(cfg, data, &seeds, &out.join("cu").join(format!("seed{k}")))
        })
        .collect()
}

/// Root seed tree of study replicate `k`.
pub fn study_seed(cfg: &ExperimentConfig, k: usize) -> SeedStream {
    SeedStream::new(cfg.seed).child("study-seed", k as u64)
}

/// Wall-clock helper for run records.
pub struct Stopwatch(Instant);

impl Stopwatch {
    pub fn start() -> Self {
        Self(Instant::now())
    }

    pub fn seconds(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}
