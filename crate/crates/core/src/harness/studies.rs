use std::path::{Path, PathBuf};

use super::{
    study_seed, su_seeds, train_su_stage, write_config, DataSplits, ExperimentConfig, FeatureSet, RunRecord,
    Stopwatch,
};
use crate::cu::CuModel;
use crate::error::{Error, Result};
use crate::semsource::Task;
use crate::su::{PriorMode, SuEpochMetrics};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudyKind {
    Cooperation,
    RateSweep,
    Priors,
}

impl StudyKind {
    pub fn name(self) -> &'static str {
        match self {
            StudyKind::Cooperation => "cooperation",
            StudyKind::RateSweep => "rate_sweep",
            StudyKind::Priors => "priors",
        }
    }

    /// Column name of the compared factor.
    pub fn factor(self) -> &'static str {
        match self {
            StudyKind::Cooperation => "variant",
            StudyKind::RateSweep => "d",
            StudyKind::Priors => "mode",
        }
    }
}

/// One trained SU inside a study.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub seed_index: usize,
    pub task: Task,
    pub level: String,
    pub metrics: Vec<SuEpochMetrics>,
}

impl CellResult {
    pub fn final_error(&self) -> f64 {
        self.metrics.last().and_then(|m| m.test_error).unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub task: Task,
    pub level: String,
    pub mean_error: f64,
    pub seed_errors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyTable {
    pub kind: StudyKind,
    pub levels: Vec<String>,
    pub tasks: Vec<Task>,
    pub cells: Vec<CellResult>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

impl StudyTable {
    fn errors(&self, task: Task, level: &str) -> Vec<f64> {
        self.cells
            .iter()
            .filter(|c| c.task == task && c.level == level)
            .map(CellResult::final_error)
            .collect()
    }

    /// Final test error of `(task, level)` averaged over seeds.
    pub fn mean_error(&self, task: Task, level: &str) -> Option<f64> {
        let e = self.errors(task, level);
        (!e.is_empty()).then(|| mean(&e))
    }

    /// Seed-averaged final error of `level`, averaged again over tasks.
    pub fn task_mean_error(&self, level: &str) -> Option<f64> {
        let per_task: Option<Vec<f64>> = self.tasks.iter().map(|&t| self.mean_error(t, level)).collect();
        per_task.filter(|v| !v.is_empty()).map(|v| mean(&v))
    }

    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut rows = Vec::new();
        for &task in &self.tasks {
            for level in &self.levels {
                let seed_errors = self.errors(task, level);
                if !seed_errors.is_empty() {
                    rows.push(SummaryRow {
                        task,
                        level: level.clone(),
                        mean_error: mean(&seed_errors),
                        seed_errors,
                    });
                }
            }
        }
        rows
    }

    /// Seed-averaged test-error curves, one per `(task, level)`.
    pub fn curves(&self) -> Vec<(Task, String, Vec<f64>)> {
        let mut out = Vec::new();
        for &task in &self.tasks {
            for level in &self.levels {
                let cells: Vec<&CellResult> =
                    self.cells.iter().filter(|c| c.task == task && &c.level == level).collect();
                let Some(epochs) = cells.iter().map(|c| c.metrics.len()).min() else {
                    continue;
                };
                if cells.is_empty() {
                    continue;
                }
                let curve = (0..epochs)
                    .map(|e| mean(&cells.iter().map(|c| c.metrics[e].test_error.unwrap_or(f64::NAN)).collect::<Vec<_>>()))
                    .collect();
                out.push((task, level.clone(), curve));
            }
        }
        out
    }

    /// Writes `summary.csv` and `curves.csv` (plus `error_vs_d.csv` for the
    /// rate sweep) into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let factor = self.kind.factor();
        let summary = dir.join("summary.csv");
        let mut w = csv::Writer::from_path(&summary)?;
        w.write_record(["task", factor, "mean_final_error", "seed_errors"])?;
        for r in self.summary() {
            let seeds = r.seed_errors.iter().map(f64::to_string).collect::<Vec<_>>().join(";");
            w.write_record([r.task.id().to_string(), r.level, r.mean_error.to_string(), seeds])?;
        }
        w.flush()?;

        let curves = dir.join("curves.csv");
        let mut w = csv::Writer::from_path(&curves)?;
        w.write_record(["task", factor, "epoch", "test_error"])?;
        for (task, level, curve) in self.curves() {
            for (e, v) in curve.iter().enumerate() {
                w.write_record([task.id().to_string(), level.clone(), (e + 1).to_string(), v.to_string()])?;
            }
        }
        w.flush()?;

        let mut written = vec![summary, curves];
        if self.kind == StudyKind::RateSweep {
            let table = dir.join("error_vs_d.csv");
            let mut w = csv::Writer::from_path(&table)?;
            let mut header = vec!["d".to_string()];
            header.extend(self.tasks.iter().map(|t| format!("task{}_error", t.id())));
            header.push("mean_error".into());
            w.write_record(&header)?;
            for level in &self.levels {
                let mut rec = vec![level.clone()];
                rec.extend(self.tasks.iter().map(|&t| self.mean_error(t, level).unwrap_or(f64::NAN).to_string()));
                rec.push(self.task_mean_error(level).unwrap_or(f64::NAN).to_string());
                w.write_record(&rec)?;
            }
            w.flush()?;
            written.push(table);
        }
        Ok(written)
    }
}

/// One configured SU cell before training.
struct CellPlan {
    level: String,
    cfg: ExperimentConfig,
    d: usize,
    raw_input: bool,
}

fn run_study(
    kind: StudyKind,
    cfg: &ExperimentConfig,
    data: &DataSplits,
    cus: &[CuModel],
    tasks: &[Task],
    plans: Vec<CellPlan>,
    out: &Path,
) -> Result<StudyTable> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("study needs at least one task".into()));
    }
    if cus.len() < cfg.study_seeds {
        return Err(Error::InvalidArgument(format!(
            "{} study needs {} trained CUs, got {}",
            kind.name(),
            cfg.study_seeds,
            cus.len()
        )));
    }
    let clock = Stopwatch::start();
    let dir = out.join(kind.name());
    let config_path = write_config(cfg, &dir)?;
    let mut record = RunRecord::new(&format!("study-{}", kind.name().replace('_', "-")), config_path);
    let raw = plans.iter().any(|p| p.raw_input).then(|| FeatureSet::raw(data));
    let mut cells = Vec::new();
    for (k, cu) in cus.iter().enumerate().take(cfg.study_seeds) {
        let seeds = study_seed(cfg, k);
        let latent = FeatureSet::from_cu(cu, data)?;
        for plan in &plans {
            let features = match (&raw, plan.raw_input) {
                (Some(r), true) => r,
                _ => &latent,
            };
            for &task in tasks {
                let cell_dir = dir.join(format!("seed{k}-task{}-{}", task.id(), plan.level));
                log::info!("{} cell seed {k} task {} {}", kind.name(), task.id(), plan.level);
                let stage = train_su_stage(&plan.cfg, features, data, task, plan.d, &su_seeds(&seeds, task), &cell_dir)?;
                record.checkpoints.push(stage.checkpoint.clone());
                record.metrics.push(stage.metrics_path.clone());
                cells.push(CellResult {
                    seed_index: k,
                    task,
                    level: plan.level.clone(),
                    metrics: stage.metrics,
                });
            }
        }
    }
    let table = StudyTable {
        kind,
        levels: plans.iter().map(|p| p.level.clone()).collect(),
        tasks: tasks.to_vec(),
        cells,
    };
    record.metrics.extend(table.write(&dir)?);
    record.wall_clock_seconds = clock.seconds();
    record.write(&dir)?;
    Ok(table)
}

/// SUs fed by the CU ("w_cu") against SUs fed raw pixels ("wo_cu") at the
/// same budget, prior and seeds.
pub fn study_cooperation(
    cfg: &ExperimentConfig,
    data: &DataSplits,
    cus: &[CuModel],
    tasks: &[Task],
    out: &Path,
) -> Result<StudyTable> {
    let plans = [("w_cu", false), ("wo_cu", true)]
        .into_iter()
        .map(|(level, raw_input)| CellPlan {
            level: level.into(),
            cfg: cfg.clone(),
            d: cfg.d,
            raw_input,
        })
        .collect();
    run_study(StudyKind::Cooperation, cfg, data, cus, tasks, plans, out)
}

/// SUs trained for every channel dimension in `study.d_list`.
pub fn study_rate_sweep(
    cfg: &ExperimentConfig,
    data: &DataSplits,
    cus: &[CuModel],
    tasks: &[Task],
    out: &Path,
) -> Result<StudyTable> {
    let plans = cfg
        .sweep_dims
        .iter()
        .map(|&d| CellPlan {
            level: d.to_string(),
            cfg: cfg.clone(),
            d,
            raw_input: false,
        })
        .collect();
    run_study(StudyKind::RateSweep, cfg, data, cus, tasks, plans, out)
}

/// SUs trained under each of the four prior modes.
pub fn study_priors(
    cfg: &ExperimentConfig,
    data: &DataSplits,
    cus: &[CuModel],
    tasks: &[Task],
    out: &Path,
) -> Result<StudyTable> {
    let plans = PriorMode::ALL
        .into_iter()
        .map(|mode| {
            let mut c = cfg.clone();
            c.su.prior = mode;
            CellPlan {
                level: mode.to_string(),
                cfg: c,
                d: cfg.d,
                raw_input: false,
            }
        })
        .collect();
    run_study(StudyKind::Priors, cfg, data, cus, tasks, plans, out)
}
