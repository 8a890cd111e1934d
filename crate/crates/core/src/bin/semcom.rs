use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use semcom_lab::cu::CuModel;
use semcom_lab::dre::{dre_benchmark, DreBenchSpec, SecondParam};
use semcom_lab::error::{Error, Result};
use semcom_lab::harness::{
    evaluate_stage, load_data, study_cooperation, study_cus, study_priors, study_rate_sweep, su_seeds,
    train_cu_stage, train_su_stage, write_config, write_csv, ExperimentConfig, FeatureSet, RunRecord, Stopwatch,
    StudyTable,
};
use semcom_lab::nnet::Checkpoint;
use semcom_lab::semsource::{fetch_dataset, Task, DEFAULT_MNIST_URL};
use semcom_lab::stochastic::SeedStream;
use semcom_lab::su::{PriorMode, SuModel};

#[derive(Parser, Debug)]
#[command(name = "semcom", version, about = "Cooperative multi-task semantic communication experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Flat key = value config file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides run.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out", value_name = "DIR")]
    out: PathBuf,
    /// Full training split with longer budgets.
    #[arg(long)]
    full: bool,
    /// Additional `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug, Clone)]
struct TaskArg {
    /// Tasks to run: 1, 2 or both.
    #[arg(long, default_value = "both")]
    task: String,
}

impl TaskArg {
    fn tasks(&self) -> Result<Vec<Task>> {
        match self.task.as_str() {
            "both" => Ok(Task::ALL.to_vec()),
            s => {
                let id: u8 = s
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("--task must be 1, 2 or both, got {s:?}")))?;
                Ok(vec![Task::from_id(id)?])
            }
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Download and verify the MNIST IDX files into data.dir.
    FetchData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = DEFAULT_MNIST_URL)]
        url: String,
    },
    /// Train the common unit.
    TrainCu {
        #[command(flatten)]
        common: Common,
    },
    /// Train specific units on top of a frozen CU checkpoint.
    TrainSu {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        task: TaskArg,
        /// CU checkpoint written by train-cu
        #[arg(long, value_name = "PATH")]
        cu: Option<PathBuf>,
        /// Channel uses (overrides su.d).
        #[arg(long)]
        d: Option<usize>,
        /// ep_gaussian, ep_loguniform, iopm_gaussian or iopm_loguniform (overrides prior.mode)
        #[arg(long)]
        prior: Option<PriorMode>,
    },
    /// Test error of trained SU checkpoints.
    Eval {
        #[command(flatten)]
        common: Common,
        /// CU checkpoint written by train-cu
        #[arg(long, value_name = "PATH")]
        cu: Option<PathBuf>,
        /// SU checkpoint; repeat for several
        #[arg(long, value_name = "PATH", required = true)]
        su: Vec<PathBuf>,
    },
    /// SUs with and without the CU.
    StudyCooperation {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        task: TaskArg,
        /// ep_gaussian, ep_loguniform, iopm_gaussian or iopm_loguniform (overrides prior.mode)
        #[arg(long)]
        prior: Option<PriorMode>,
    },
    /// Task error against the number of channel uses.
    StudyRateSweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        task: TaskArg,
        /// Comma-separated channel dimensions (overrides study.d_list).
        #[arg(long, value_name = "LIST")]
        d: Option<String>,
        /// ep_gaussian, ep_loguniform, iopm_gaussian or iopm_loguniform (overrides prior.mode)
        #[arg(long)]
        prior: Option<PriorMode>,
    },
    /// The four prior modes side by side.
    StudyPriors {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        task: TaskArg,
    },
    /// Ratio-estimator accuracy on Gaussian pairs with known ratio.
    DreBench {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 2, 4])]
        dims: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![500usize, 1000, 2000])]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        replicates: usize,
        #[arg(long, default_value_t = 1000)]
        eval_points: usize,
        /// Reading of the second parameter of N(1, 2): variance or std.
        #[arg(long, default_value = "variance")]
        second_param: SecondParam,
    },
}

fn resolve(common: &Common, extra: &[(&str, Option<String>)]) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if common.full {
        cfg = cfg.full();
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    for (k, v) in extra {
        if let Some(v) = v {
            cfg.set(k, v)?;
        }
    }
    for o in &common.overrides {
        cfg.apply_override(o)?;
    }
    cfg.validate()?;
    print!("# resolved config\n{}", cfg.to_text());
    Ok(cfg)
}

fn load_cu(path: Option<&Path>) -> Result<CuModel> {
    let path = path.ok_or_else(|| Error::InvalidArgument("CU checkpoint required (pass --cu PATH from train-cu)".into()))?;
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let cu = CuModel::from_checkpoint(&Checkpoint::load(path)?)?;
    if !cu.is_trained() {
        return Err(Error::Untrained);
    }
    Ok(cu)
}

fn finish_study(name: &str, table: &StudyTable) {
    println!("# {name}: final test error, mean over seeds");
    for row in table.summary() {
        println!("task{} {:>16} {:.4}", row.task.id(), row.level, row.mean_error);
    }
}

fn run(cli: Cli) -> Result<()> {
    let clock = Stopwatch::start();
    match cli.command {
        Command::FetchData { common, url } => {
            let cfg = resolve(&common, &[])?;
            let paths = fetch_dataset(&url, &cfg.data_dir)?;
            println!("MNIST ready: {}", paths.train_images.parent().unwrap_or(Path::new(".")).display());
        }
        Command::TrainCu { common } => {
            let cfg = resolve(&common, &[])?;
            let data = load_data(&cfg)?;
            let dir = common.out.join("cu");
            let stage = train_cu_stage(&cfg, &data, &SeedStream::new(cfg.seed), &dir)?;
            if let Some(m) = stage.metrics.last() {
                println!(
                    "CU epoch {}: loss {:.4} acc_task1 {:.4} acc_task2 {:.4}",
                    m.epoch, m.loss, m.acc_task1, m.acc_task2
                );
            }
            let mut rec = RunRecord::new("train-cu", stage.config_path.clone());
            rec.checkpoints.push(stage.checkpoint);
            rec.metrics.push(stage.metrics_path);
            rec.wall_clock_seconds = clock.seconds();
            rec.write(&dir)?;
        }
        Command::TrainSu { common, task, cu, d, prior } => {
            let cu_model = load_cu(cu.as_deref())?;
            let cfg = resolve(
                &common,
                &[("su.d", d.map(|v| v.to_string())), ("prior.mode", prior.map(|p| p.to_string()))],
            )?;
            if cu_model.latent_dim() != cfg.latent_dim {
                return Err(Error::Config(format!(
                    "CU checkpoint has latent dim {}, config says {}",
                    cu_model.latent_dim(),
                    cfg.latent_dim
                )));
            }
            let tasks = task.tasks()?;
            let data = load_data(&cfg)?;
            let features = FeatureSet::from_cu(&cu_model, &data)?;
            let dir = common.out.join("su");
            let root = SeedStream::new(cfg.seed);
            let mut rec = RunRecord::new("train-su", dir.join("config.txt"));
            for t in tasks {
                let stage = train_su_stage(&cfg, &features, &data, t, cfg.d, &su_seeds(&root, t), &dir)?;
                println!("SU{} d={} test error {:.4}", t.id(), cfg.d, stage.final_error());
                rec.checkpoints.push(stage.checkpoint);
                rec.metrics.push(stage.metrics_path);
            }
            rec.wall_clock_seconds = clock.seconds();
            rec.write(&dir)?;
        }
        Command::Eval { common, cu, su } => {
            let cu_model = load_cu(cu.as_deref())?;
            let cfg = resolve(&common, &[])?;
            let data = load_data(&cfg)?;
            let mut rows = Vec::new();
            for p in &su {
                if !p.exists() {
                    return Err(Error::MissingFile(p.clone()));
                }
                let model = SuModel::from_checkpoint(&Checkpoint::load(p)?)?;
                let row = evaluate_stage(&cfg, &cu_model, &model, &data)?;
                println!("SU{} d={} test error {:.4}", row.task, row.d, row.test_error);
                rows.push(row);
            }
            let dir = common.out.join("eval");
            let config = write_config(&cfg, &dir)?;
            let path = dir.join("eval.csv");
            write_csv(&path, &rows)?;
            let mut rec = RunRecord::new("eval", config);
            rec.checkpoints = su;
            rec.metrics.push(path);
            rec.wall_clock_seconds = clock.seconds();
            rec.write(&dir)?;
        }
        Command::StudyCooperation { common, task, prior } => {
            let cfg = resolve(&common, &[("prior.mode", prior.map(|p| p.to_string()))])?;
            let tasks = task.tasks()?;
            let data = load_data(&cfg)?;
            let cus: Vec<CuModel> = study_cus(&cfg, &data, &common.out)?.into_iter().map(|s| s.model).collect();
            finish_study("cooperation", &study_cooperation(&cfg, &data, &cus, &tasks, &common.out)?);
        }
        Command::StudyRateSweep { common, task, d, prior } => {
            let cfg = resolve(&common, &[("study.d_list", d), ("prior.mode", prior.map(|p| p.to_string()))])?;
            let tasks = task.tasks()?;
            let data = load_data(&cfg)?;
            let cus: Vec<CuModel> = study_cus(&cfg, &data, &common.out)?.into_iter().map(|s| s.model).collect();
            finish_study("rate sweep", &study_rate_sweep(&cfg, &data, &cus, &tasks, &common.out)?);
        }
        Command::StudyPriors { common, task } => {
            let cfg = resolve(&common, &[])?;
            let tasks = task.tasks()?;
            let data = load_data(&cfg)?;
            let cus: Vec<CuModel> = study_cus(&cfg, &data, &common.out)?.into_iter().map(|s| s.model).collect();
            finish_study("priors", &study_priors(&cfg, &data, &cus, &tasks, &common.out)?);
        }
        Command::DreBench {
            common,
            dims,
            sizes,
            replicates,
            eval_points,
            second_param,
        } => {
            let cfg = resolve(&common, &[])?;
            let spec = DreBenchSpec {
                dims,
                sample_sizes: sizes,
                bandwidth: cfg.su.dre.bandwidth,
                gamma: cfg.su.dre.gamma,
                max_iters: cfg.su.dre.max_iters,
                replicates,
                eval_points,
                second_param,
            };
            let rows = dre_benchmark(&spec, &mut SeedStream::new(cfg.seed).rng("dre-bench", 0))?;
            let dir = common.out.join("dre_bench");
            let config = write_config(&cfg, &dir)?;
            let path = dir.join("dre_bench.csv");
            write_csv(&path, &rows)?;
            for r in &rows {
                println!(
                    "dim {} n {}: mae {:.4} rmse {:.4} ({:.2}s, converged {})",
                    r.dim, r.n_samples, r.mae, r.rmse, r.fit_seconds, r.converged
                );
            }
            let mut rec = RunRecord::new("dre-bench", config);
            rec.metrics.push(path);
            rec.wall_clock_seconds = clock.seconds();
            rec.write(&dir)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::MissingFile(p) = &e {
                if p.extension().is_some_and(|x| x == "gz") || p.to_string_lossy().contains("ubyte") {
                    eprintln!("hint: run `semcom fetch-data` or set data.dir");
                }
            }
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
