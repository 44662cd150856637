//! Hyper-parameter sweeps and the variant ablation table. Runs are
//! independent and may execute on several threads.

use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{train, EpochLog, RunConfig};
use crate::data::{Dataset, Task};
use crate::error::{MuseError, Result};
use crate::model::ModelVariant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Theta,
    Mu,
    Eta,
    Alpha,
    Beta,
    Lr,
    Dropout,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Theta => "theta",
            SweepParam::Mu => "mu",
            SweepParam::Eta => "eta",
            SweepParam::Alpha => "alpha",
            SweepParam::Beta => "beta",
            SweepParam::Lr => "lr",
            SweepParam::Dropout => "dropout",
        }
    }

    /// Returns `base` with this parameter set to `value`.
    pub fn apply(self, base: &RunConfig, value: f64) -> Result<RunConfig> {
        let mut cfg = base.clone();
        let layer = || -> Result<usize> {
            if value >= 0.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(MuseError::config(
                    self.name(),
                    format!("{value} is not a layer index"),
                ))
            }
        };
        match self {
            SweepParam::Theta => cfg.theta = value,
            SweepParam::Mu => cfg.mu = layer()?,
            SweepParam::Eta => cfg.eta = layer()?,
            SweepParam::Alpha => cfg.alpha = value,
            SweepParam::Beta => cfg.beta = value,
            SweepParam::Lr => cfg.lr = value,
            SweepParam::Dropout => cfg.dropout = value,
        }
        Ok(cfg)
    }
}

impl std::str::FromStr for SweepParam {
    type Err = MuseError;

    fn from_str(s: &str) -> Result<Self> {
        use SweepParam::*;
        [Theta, Mu, Eta, Alpha, Beta, Lr, Dropout]
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| MuseError::config("param", format!("cannot sweep `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: f64,
    pub seed: u64,
    pub val_metric: f64,
    pub test_metric: f64,
    pub seconds: f64,
}

/// Parallelism cap from `MUSE_THREADS`, defaulting to one.
pub fn sweep_threads() -> usize {
    std::env::var("MUSE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Runs `jobs` on up to `threads` workers, returning results in job order.
fn run_parallel<T: Send>(
    jobs: usize,
    threads: usize,
    job: impl Fn(usize) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..jobs).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, jobs.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs {
                    break;
                }
                let r = job(i);
                slots.lock().expect("no poisoned workers")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("no poisoned workers")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

/// Trains one run per value; every configuration is validated up front.
pub fn run_sweep(
    base: &RunConfig,
    param: SweepParam,
    values: &[f64],
    data: &Dataset,
    threads: usize,
) -> Result<Vec<SweepRow>> {
    let configs = values
        .iter()
        .map(|&v| {
            let cfg = param.apply(base, v)?;
            cfg.validate()?;
            Ok(cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    run_parallel(configs.len(), threads, |i| {
        let report = train(&configs[i], data, None)?;
        Ok(SweepRow {
            param: param.name().to_string(),
            value: values[i],
            seed: configs[i].seed,
            val_metric: report.val.main(),
            test_metric: report.test.main(),
            seconds: report.seconds,
        })
    })
}

pub const SWEEP_HEADER: &str = "param,value,seed,val_metric,test_metric,seconds";

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{SWEEP_HEADER}")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{:.3}",
            r.param, r.value, r.seed, r.val_metric, r.test_metric, r.seconds
        )?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub task: Task,
    pub variant: ModelVariant,
    pub seed: u64,
    pub val_metric: f64,
    pub test_metric: f64,
    /// MNER only: trigger type accuracy on the test split.
    pub type_accuracy: Option<f64>,
    pub seconds: f64,
    pub log: Vec<EpochLog>,
}

/// Every variant on every `(task, dataset)` pair, with `base` otherwise fixed.
pub fn run_ablation(
    base: &RunConfig,
    tasks: &[(Task, &Dataset)],
    threads: usize,
) -> Result<Vec<AblationRow>> {
    let mut jobs = Vec::new();
    for &(task, data) in tasks {
        for variant in ModelVariant::ALL {
            let cfg = RunConfig {
                task,
                variant,
                ..base.clone()
            };
            cfg.validate()?;
            jobs.push((cfg, data));
        }
    }
    run_parallel(jobs.len(), threads, |i| {
        let (cfg, data) = &jobs[i];
        let report = train(cfg, data, None)?;
        Ok(AblationRow {
            task: cfg.task,
            variant: cfg.variant,
            seed: cfg.seed,
            val_metric: report.val.main(),
            test_metric: report.test.main(),
            type_accuracy: match report.test {
                super::Metrics::Mner { type_accuracy, .. } => Some(type_accuracy),
                super::Metrics::Msa { .. } => None,
            },
            seconds: report.seconds,
            log: report.log,
        })
    })
}

pub const ABLATION_HEADER: &str = "task,variant,seed,val_metric,test_metric,type_accuracy,seconds";

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{ABLATION_HEADER}")?;
    for r in rows {
        let ta = r.type_accuracy.map_or(String::new(), |v| v.to_string());
        writeln!(
            f,
            "{},{},{},{},{},{},{:.3}",
            r.task, r.variant, r.seed, r.val_metric, r.test_metric, ta, r.seconds
        )?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn apply_sets_fields_and_rejects_fractional_layers() {
        let base = RunConfig::default();
        assert_eq!(SweepParam::Theta.apply(&base, 0.3).unwrap().theta, 0.3);
        assert_eq!(SweepParam::Mu.apply(&base, 3.0).unwrap().mu, 3);
        assert!(SweepParam::Eta.apply(&base, 2.5).is_err());
        assert_eq!("eta".parse::<SweepParam>().unwrap(), SweepParam::Eta);
        assert!("gamma".parse::<SweepParam>().is_err());
    }

    #[test]
    fn parallel_results_keep_job_order() {
        let out = run_parallel(7, 3, |i| Ok(i * i)).unwrap();
        assert_eq!(out, vec![0, 1, 4, 9, 16, 25, 36]);
        assert!(run_parallel(3, 2, |i| if i == 1 {
            Err(MuseError::contract("boom"))
        } else {
            Ok(i)
        })
        .is_err());
    }
}
