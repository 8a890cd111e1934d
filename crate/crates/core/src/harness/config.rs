//! Flat `key = value` experiment configuration with dotted keys.
//!
//! A config file holds one assignment per line; `#` starts a comment.
//! Command-line overrides go through [`ExperimentConfig::set`], and the
//! resolved configuration renders back to the same format so every run can
//! persist exactly what it used.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::cu::{CuArch, CuConfig};
use crate::dre::DreConfig;
use crate::error::{Error, Result};
use crate::semsource::BinaryTask;
use crate::su::SuConfig;

/// Channel dimensions accepted by the rate sweep.
pub const SWEEP_DIMS: [usize; 5] = [4, 8, 16, 32, 64];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data_dir: PathBuf,
    /// Training rows drawn from the 60k split; 0 keeps all of them.
    pub subsample: usize,
    pub binary_task: BinaryTask,
    pub cu: CuConfig,
    pub latent_dim: usize,
    pub su: SuConfig,
    pub d: usize,
    pub noise_draws: usize,
    pub study_seeds: usize,
    pub sweep_dims: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_dir: PathBuf::from("data/mnist"),
            subsample: 10_000,
            binary_task: BinaryTask::Parity,
            cu: CuConfig::default(),
            latent_dim: CuArch::default().latent_dim,
            su: SuConfig::default(),
            d: 32,
            noise_draws: 1,
            study_seeds: 3,
            sweep_dims: SWEEP_DIMS.to_vec(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Every recognised key in rendering order.
    pub const KEYS: [&'static str; 26] = [
        "run.seed",
        "data.dir",
        "data.subsample",
        "data.binary_task",
        "cu.lr",
        "cu.epochs",
        "cu.batch",
        "cu.latent_dim",
        "cu.samples",
        "su.lr",
        "su.epochs",
        "su.batch",
        "su.lambda",
        "su.d",
        "su.L",
        "su.calibration_rows",
        "channel.snr_db",
        "prior.mode",
        "dre.bandwidth",
        "dre.gamma",
        "dre.samples",
        "dre.max_iters",
        "dre.grad_tol",
        "eval.noise_draws",
        "study.seeds",
        "study.d_list",
    ];

    /// Desk-scale budget scaled up to the whole training split.
    pub fn full(mut self) -> Self {
        self.subsample = 0;
        self.cu.epochs = 40;
        self.su.epochs = 60;
        self
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Applies the assignments in `text` on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", n + 1)))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Parses a `key=value` override as given on the command line.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not of the form key=value")))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "run.seed" => self.seed = parse(key, value)?,
            "data.dir" => self.data_dir = PathBuf::from(value),
            "data.subsample" => self.subsample = parse(key, value)?,
            "data.binary_task" => self.binary_task = parse(key, value)?,
            "cu.lr" => self.cu.lr = parse(key, value)?,
            "cu.epochs" => self.cu.epochs = parse(key, value)?,
            "cu.batch" => self.cu.batch = parse(key, value)?,
            "cu.latent_dim" => self.latent_dim = parse(key, value)?,
            "cu.samples" => self.cu.samples = parse(key, value)?,
            "su.lr" => self.su.lr = parse(key, value)?,
            "su.epochs" => self.su.epochs = parse(key, value)?,
            "su.batch" => self.su.batch = parse(key, value)?,
            "su.lambda" => self.su.lambda = parse(key, value)?,
            "su.d" => self.d = parse(key, value)?,
            "su.L" => self.su.samples = parse(key, value)?,
            "su.calibration_rows" => self.su.calibration_rows = parse(key, value)?,
            "channel.snr_db" => self.su.snr_db = parse(key, value)?,
            "prior.mode" => self.su.prior = parse(key, value)?,
            "dre.bandwidth" => self.su.dre.bandwidth = parse(key, value)?,
            "dre.gamma" => self.su.dre.gamma = parse(key, value)?,
            "dre.samples" => self.su.dre_samples = parse(key, value)?,
            "dre.max_iters" => self.su.dre.max_iters = parse(key, value)?,
            "dre.grad_tol" => self.su.dre.grad_tol = parse(key, value)?,
            "eval.noise_draws" => {
                self.noise_draws = parse(key, value)?;
                self.su.eval_draws = self.noise_draws;
            }
            "study.seeds" => self.study_seeds = parse(key, value)?,
            "study.d_list" => {
                self.sweep_dims = value
                    .split(',')
                    .map(|v| parse(key, v.trim()))
                    .collect::<Result<_>>()?
            }
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "run.seed" => self.seed.to_string(),
            "data.dir" => self.data_dir.display().to_string(),
            "data.subsample" => self.subsample.to_string(),
            "data.binary_task" => self.binary_task.to_string(),
            "cu.lr" => self.cu.lr.to_string(),
            "cu.epochs" => self.cu.epochs.to_string(),
            "cu.batch" => self.cu.batch.to_string(),
            "cu.latent_dim" => self.latent_dim.to_string(),
            "cu.samples" => self.cu.samples.to_string(),
            "su.lr" => self.su.lr.to_string(),
            "su.epochs" => self.su.epochs.to_string(),
            "su.batch" => self.su.batch.to_string(),
            "su.lambda" => self.su.lambda.to_string(),
            "su.d" => self.d.to_string(),
            "su.L" => self.su.samples.to_string(),
            "su.calibration_rows" => self.su.calibration_rows.to_string(),
            "channel.snr_db" => self.su.snr_db.to_string(),
            "prior.mode" => self.su.prior.to_string(),
            "dre.bandwidth" => self.su.dre.bandwidth.to_string(),
            "dre.gamma" => self.su.dre.gamma.to_string(),
            "dre.samples" => self.su.dre_samples.to_string(),
            "dre.max_iters" => self.su.dre.max_iters.to_string(),
            "dre.grad_tol" => self.su.dre.grad_tol.to_string(),
            "eval.noise_draws" => self.noise_draws.to_string(),
            "study.seeds" => self.study_seeds.to_string(),
            "study.d_list" => join(&self.sweep_dims),
            _ => return None,
        })
    }

    /// Resolved configuration in the file format, one key per line.
    pub fn to_text(&self) -> String {
        Self::KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).unwrap_or_default()))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive_counts = [
            ("cu.epochs", self.cu.epochs),
            ("cu.batch", self.cu.batch),
            ("cu.latent_dim", self.latent_dim),
            ("cu.samples", self.cu.samples),
            ("su.epochs", self.su.epochs),
            ("su.batch", self.su.batch),
            ("su.d", self.d),
            ("su.L", self.su.samples),
            ("su.calibration_rows", self.su.calibration_rows),
            ("dre.samples", self.su.dre_samples),
            ("dre.max_iters", self.su.dre.max_iters),
            ("eval.noise_draws", self.noise_draws),
            ("study.seeds", self.study_seeds),
        ];
        if let Some((k, _)) = positive_counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be >= 1")));
        }
        let positive_reals = [
            ("cu.lr", self.cu.lr),
            ("su.lr", self.su.lr),
            ("dre.bandwidth", self.su.dre.bandwidth),
            ("dre.gamma", self.su.dre.gamma),
        ];
        if let Some((k, v)) = positive_reals.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config(format!("{k} must be a positive number, got {v}")));
        }
        if !(self.su.lambda.is_finite() && self.su.lambda >= 0.0) {
            return Err(Error::Config(format!("su.lambda must be >= 0, got {}", self.su.lambda)));
        }
        if !self.su.snr_db.is_finite() {
            return Err(Error::Config("channel.snr_db must be finite".into()));
        }
        if !(self.su.dre.grad_tol >= 0.0) {
            return Err(Error::Config("dre.grad_tol must be >= 0".into()));
        }
        if self.sweep_dims.is_empty() {
            return Err(Error::Config("study.d_list must not be empty".into()));
        }
        if let Some(d) = self.sweep_dims.iter().find(|d| !SWEEP_DIMS.contains(d)) {
            return Err(Error::Config(format!("study.d_list entry {d} is not one of {SWEEP_DIMS:?}")));
        }
        Ok(())
    }

    pub fn cu_arch(&self) -> CuArch {
        CuArch {
            latent_dim: self.latent_dim,
            ..CuArch::default()
        }
    }

    pub fn su_config(&self) -> SuConfig {
        SuConfig {
            eval_draws: self.noise_draws,
            ..self.su
        }
    }

    pub fn dre_config(&self) -> DreConfig {
        self.su.dre
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parse_roundtrip() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_override("su.lambda=0.125").unwrap();
        cfg.apply_override("prior.mode = iopm_loguniform").unwrap();
        cfg.apply_override("study.d_list=4,64").unwrap();
        let back = ExperimentConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), cfg.to_text());
        assert_eq!(cfg.to_text().lines().count(), ExperimentConfig::KEYS.len());
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = ExperimentConfig::from_text("# header\n\nsu.d = 8   # channel uses\nrun.seed=7\n").unwrap();
        assert_eq!((cfg.d, cfg.seed), (8, 7));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(ExperimentConfig::from_text("su.dd = 3").is_err());
        assert!(ExperimentConfig::from_text("su.d 3").is_err());
        assert!(ExperimentConfig::from_text("su.d = three").is_err());
        assert!(ExperimentConfig::from_text("prior.mode = flat").is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.sweep_dims = vec![4, 5];
        assert!(cfg.validate().is_err());
        cfg = ExperimentConfig::default();
        cfg.su.lr = 0.0;
        assert!(cfg.validate().is_err());
        assert!(ExperimentConfig::default().validate().is_ok());
    }

    #[test]
    fn full_budget() {
        let cfg = ExperimentConfig::default().full();
        assert_eq!(cfg.subsample, 0);
        assert!(cfg.cu.epochs > CuConfig::default().epochs && cfg.su.epochs > SuConfig::default().epochs);
    }
}
