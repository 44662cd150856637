use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use muse_core::data::{generate_task, Dataset, Split, Task, TaskConfig};
use muse_core::harness::{
    self, end_to_end_grad_check, evaluate_checkpoint, load_checkpoint, op_grad_checks,
    run_ablation, run_sweep, sweep_threads, write_ablation_csv, write_sweep_csv, RunConfig,
    SweepParam, END_TO_END_TOLERANCE, OP_TOLERANCE,
};
use muse_core::model::{exchange_trace, ModelVariant};
use muse_core::{MuseError, Result};

#[derive(Parser)]
#[command(
    name = "muse",
    version,
    about = "Exchanging-based text+image fusion on synthetic tasks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write train/val/test JSON-lines for a synthetic task.
    GenData {
        #[arg(long)]
        task: Task,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        train: usize,
        #[arg(long, default_value_t = 500)]
        val: usize,
        #[arg(long, default_value_t = 500)]
        test: usize,
        #[arg(long, default_value_t = 4)]
        noise_pixels: usize,
    },
    /// Train one model; writes checkpoint, log.csv and metrics.json.
    Train(RunArgs),
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory; defaults to regenerating the run's own data.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Load even if the stored config hash does not match.
        #[arg(long)]
        force: bool,
    },
    /// Finite-difference check of every op and of a micro model.
    Gradcheck {
        #[arg(long, default_value_t = 1e-3)]
        h: f64,
    },
    /// Train once per value of one hyper-parameter.
    Sweep {
        #[arg(long)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        values: Vec<f64>,
        /// CSV destination.
        #[arg(long)]
        csv: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train every model variant on each task.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "mner,msa")]
        tasks: Vec<Task>,
        #[arg(long)]
        csv: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Emit the exchange trace JSON of one example.
    InspectExchange {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
}

/// A JSON config file plus flag overrides; flags win.
#[derive(Args, Clone, Default)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    task: Option<Task>,
    #[arg(long)]
    variant: Option<ModelVariant>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    num_layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    mu: Option<usize>,
    #[arg(long)]
    eta: Option<usize>,
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    crf_lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    head_dropout: Option<f64>,
    #[arg(long)]
    noise_enabled: Option<bool>,
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    val_size: Option<usize>,
    #[arg(long)]
    test_size: Option<usize>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::from_json_file(path)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($field:ident => $target:ident),* $(,)?) => {
                $(if let Some(v) = self.$field.clone() { c.$target = v; })*
            };
        }
        set!(
            task => task, variant => variant, d => d, num_layers => num_layers, heads => heads,
            mu => mu, eta => eta, theta => theta, alpha => alpha, beta => beta, lr => lr,
            crf_lr => crf_lr, batch_size => batch_size, epochs => epochs, dropout => dropout,
            head_dropout => head_dropout, noise_enabled => noise_enabled, noise_std => noise_std,
            seed => seed, out => out_dir, train_size => train_size, val_size => val_size,
            test_size => test_size,
        );
        if let Some(dir) = &self.data {
            c.data_dir = Some(dir.clone());
        }
        c.validate()?;
        Ok(c)
    }
}

fn parse_split(s: &str) -> Result<Split> {
    Split::ALL
        .into_iter()
        .find(|sp| sp.name() == s)
        .ok_or_else(|| MuseError::config("split", format!("unknown split `{s}`")))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// The dataset a checkpoint is evaluated on: `dir` if given, else the
/// training config's own data.
fn eval_dataset(cfg: &RunConfig, dir: Option<&Path>) -> Result<Dataset> {
    match dir {
        Some(dir) => Dataset::read_dir(dir, Dataset::detect_task(dir)?),
        None => cfg.dataset(),
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData {
            task,
            seed,
            out,
            train,
            val,
            test,
            noise_pixels,
        } => {
            let cfg = TaskConfig {
                task,
                train,
                val,
                test,
                seed,
                noise_pixels,
            };
            cfg.validate()?;
            generate_task(&cfg)?.write_dir(&out)?;
            println!("wrote {task} data to {}", out.display());
        }
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let data = cfg.dataset()?;
            let report = harness::train(&cfg, &data, Some(&cfg.out_dir))?;
            let summary = serde_json::json!({
                "best_epoch": report.best_epoch,
                "val": report.val,
                "test": report.test,
                "seconds": report.seconds,
            });
            write_json(&cfg.out_dir.join("metrics.json"), &summary)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            force,
        } => {
            let split = parse_split(&split)?;
            let ckpt = load_checkpoint(&checkpoint, None, force)?;
            let dataset = eval_dataset(&ckpt.config, data.as_deref())?;
            let metrics = evaluate_checkpoint(&ckpt, &dataset, dataset.split(split))?;
            println!("{}", serde_json::to_string_pretty(&metrics)?);
        }
        Command::Gradcheck { h } => {
            let mut ok = true;
            println!("{:<16} {:>12}  status", "op", "max_rel_err");
            let mut row = |name: &str, err: f64, tol: f64| {
                let pass = err < tol;
                ok &= pass;
                println!(
                    "{name:<16} {err:>12.3e}  {}",
                    if pass { "ok" } else { "FAIL" }
                );
            };
            for (name, err) in op_grad_checks(h)? {
                row(name, err, OP_TOLERANCE);
            }
            row(
                "end_to_end",
                end_to_end_grad_check(h)?,
                END_TO_END_TOLERANCE,
            );
            return Ok(ok);
        }
        Command::Sweep {
            param,
            values,
            csv,
            run,
        } => {
            let base = run.resolve()?;
            let data = base.dataset()?;
            let rows = run_sweep(&base, param, &values, &data, sweep_threads())?;
            if let Some(parent) = csv.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            write_sweep_csv(&csv, &rows)?;
            println!("wrote {} rows to {}", rows.len(), csv.display());
        }
        Command::Ablate { tasks, csv, run } => {
            let base = run.resolve()?;
            let datasets = tasks
                .iter()
                .map(|&task| {
                    RunConfig {
                        task,
                        ..base.clone()
                    }
                    .dataset()
                })
                .collect::<Result<Vec<_>>>()?;
            let pairs: Vec<(Task, &Dataset)> = tasks.iter().copied().zip(datasets.iter()).collect();
            let rows = run_ablation(&base, &pairs, sweep_threads())?;
            if let Some(parent) = csv.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            write_ablation_csv(&csv, &rows)?;
            println!("wrote {} rows to {}", rows.len(), csv.display());
        }
        Command::InspectExchange {
            checkpoint,
            sample,
            data,
            split,
            out,
            force,
        } => {
            let split = parse_split(&split)?;
            let ckpt = load_checkpoint(&checkpoint, None, force)?;
            let dataset = eval_dataset(&ckpt.config, data.as_deref())?;
            if dataset.task != ckpt.config.task {
                return Err(MuseError::config(
                    "task",
                    "dataset task differs from the checkpoint's",
                ));
            }
            let examples = dataset.split(split);
            let example = examples.get(sample).ok_or(MuseError::Index {
                what: "sample",
                index: sample,
                bound: examples.len(),
            })?;
            let json = exchange_trace(&ckpt.config.model(), &ckpt.params, example)?.to_json()?;
            match out {
                Some(path) => std::fs::write(path, json)?,
                None => println!("{json}"),
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(MuseError::Config { field, reason }) => {
            eprintln!("error: invalid config field `{field}`: {reason}");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
