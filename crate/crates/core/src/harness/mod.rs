//! Training, evaluation, checkpoints, ablations and sweeps.

mod checkpoint;
mod checks;
mod config;
mod sweep;

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    config_hash, load_checkpoint, save_checkpoint, Checkpoint, RngState, FORMAT_VERSION,
};
pub use checks::{op_grad_checks, END_TO_END_TOLERANCE, OP_TOLERANCE};
pub use config::RunConfig;
pub use sweep::{
    run_ablation, run_sweep, sweep_threads, write_ablation_csv, write_sweep_csv, AblationRow,
    SweepParam, SweepRow,
};

use crate::data::{make_batches, span_f1, Dataset, SynthExample, Task, MSA_CLASSES};
use crate::error::{MuseError, Result};
use crate::heads::{BioTag, LabelScheme};
use crate::model::{self, forward, init_params, predict, ModelConfig, ParamStore, Predictions};
use crate::tensor::{Tape, Tensor, Var};
use crate::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (field, w) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(MuseError::config(
                    field,
                    format!("{w} is not finite and non-negative"),
                ));
            }
        }
        Ok(())
    }
}

/// `l_task + alpha·l_it + beta·l_ti`
pub fn total_loss(l_task: f64, l_it: f64, l_ti: f64, w: LossWeights) -> f64 {
    l_task + w.alpha * l_it + w.beta * l_ti
}

/// Taped form of [`total_loss`]; absent terms contribute nothing.
pub fn total_loss_var<'t>(
    l_task: Var<'t>,
    l_it: Option<Var<'t>>,
    l_ti: Option<Var<'t>>,
    w: LossWeights,
) -> Result<Var<'t>> {
    let mut total = l_task;
    if let Some(l) = l_it {
        total = total.add(l.scale(w.alpha))?;
    }
    if let Some(l) = l_ti {
        total = total.add(l.scale(w.beta))?;
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

/// One bias-corrected Adam update with a single learning rate.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    let lrs = vec![lr; params.len()];
    adam_step_with(params, grads, state, &lrs, AdamHyper::default())
}

/// Adam with one learning rate per parameter tensor.
pub fn adam_step_with(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lrs: &[f64],
    hp: AdamHyper,
) -> Result<()> {
    if grads.len() != params.len() || lrs.len() != params.len() {
        return Err(MuseError::contract(format!(
            "adam_step: {} params, {} grads, {} rates",
            params.len(),
            grads.len(),
            lrs.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(MuseError::Shape {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len()
        || state
            .m
            .iter()
            .zip(params.iter())
            .any(|(m, p)| m.len() != p.numel())
    {
        return Err(MuseError::contract(
            "adam_step: optimizer state does not match parameters",
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let lr = lrs[i];
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, (x, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * gj;
            v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *x -= lr * m_hat / (v_hat.sqrt() + hp.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "lowercase")]
pub enum Metrics {
    Mner {
        precision: f64,
        recall: f64,
        f1: f64,
        /// Fraction of gold entity-opening tokens predicted with the right type.
        type_accuracy: f64,
    },
    Msa {
        accuracy: f64,
        macro_f1: f64,
    },
}

impl Metrics {
    /// Span F1 for MNER, accuracy for MSA; the model-selection criterion.
    pub fn main(&self) -> f64 {
        match *self {
            Metrics::Mner { f1, .. } => f1,
            Metrics::Msa { accuracy, .. } => accuracy,
        }
    }
}

/// Scores predictions against the gold labels of `examples`.
pub fn score_predictions(pred: &Predictions, examples: &[SynthExample]) -> Result<Metrics> {
    match pred {
        Predictions::Mner(seqs) => {
            let gold: Vec<Vec<usize>> = examples
                .iter()
                .map(|ex| {
                    ex.mner_labels.clone().ok_or_else(|| {
                        MuseError::config("task", "MNER predictions for a non-MNER example")
                    })
                })
                .collect::<Result<_>>()?;
            let scheme = LabelScheme::two_types();
            let spans = span_f1(seqs, &gold, &scheme)?;
            let (mut hits, mut total) = (0usize, 0usize);
            for (p, g) in seqs.iter().zip(&gold) {
                for (t, &y) in g.iter().enumerate() {
                    if let BioTag::Begin(kind) = scheme.tag(y) {
                        total += 1;
                        if scheme.entity_type(p[t]) == Some(kind) {
                            hits += 1;
                        }
                    }
                }
            }
            Ok(Metrics::Mner {
                precision: spans.precision,
                recall: spans.recall,
                f1: spans.f1,
                type_accuracy: if total == 0 {
                    0.0
                } else {
                    hits as f64 / total as f64
                },
            })
        }
        Predictions::Msa(classes) => {
            let gold: Vec<usize> = examples
                .iter()
                .map(|ex| {
                    ex.msa_label.ok_or_else(|| {
                        MuseError::config("task", "MSA predictions for a non-MSA example")
                    })
                })
                .collect::<Result<_>>()?;
            if gold.len() != classes.len() {
                return Err(MuseError::contract(
                    "prediction count differs from example count",
                ));
            }
            let correct = classes.iter().zip(&gold).filter(|(p, g)| p == g).count();
            let mut f1_sum = 0.0;
            for c in 0..MSA_CLASSES {
                let tp = classes
                    .iter()
                    .zip(&gold)
                    .filter(|&(&p, &g)| p == c && g == c)
                    .count() as f64;
                let fp = classes
                    .iter()
                    .zip(&gold)
                    .filter(|&(&p, &g)| p == c && g != c)
                    .count() as f64;
                let fn_ = classes
                    .iter()
                    .zip(&gold)
                    .filter(|&(&p, &g)| p != c && g == c)
                    .count() as f64;
                if tp > 0.0 {
                    f1_sum += 2.0 * tp / (2.0 * tp + fp + fn_);
                }
            }
            Ok(Metrics::Msa {
                accuracy: if gold.is_empty() {
                    0.0
                } else {
                    correct as f64 / gold.len() as f64
                },
                macro_f1: f1_sum / MSA_CLASSES as f64,
            })
        }
    }
}

/// Eval-mode metrics of `params` on `examples`.
pub fn evaluate(
    cfg: &ModelConfig,
    params: &ParamStore,
    examples: &[SynthExample],
) -> Result<Metrics> {
    if let Some(ex) = examples.first() {
        if ex.task() != cfg.task {
            return Err(MuseError::config(
                "task",
                format!(
                    "model trained for {} but dataset holds {}",
                    cfg.task,
                    ex.task()
                ),
            ));
        }
    }
    score_predictions(&predict(cfg, params, examples)?, examples)
}

/// Evaluates a loaded checkpoint; the dataset task must match.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    dataset: &Dataset,
    examples: &[SynthExample],
) -> Result<Metrics> {
    if dataset.task != ckpt.config.task {
        return Err(MuseError::config(
            "task",
            format!(
                "checkpoint is for {} but dataset is {}",
                ckpt.config.task, dataset.task
            ),
        ));
    }
    evaluate(&ckpt.config.model(), &ckpt.params, examples)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub l_task: f64,
    pub l_it: f64,
    pub l_ti: f64,
    pub val_metric: f64,
    pub seconds: f64,
}

pub const LOG_HEADER: &str = "epoch,train_loss,l_task,l_it,l_ti,val_metric,seconds";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.3}",
            self.epoch,
            self.train_loss,
            self.l_task,
            self.l_it,
            self.l_ti,
            self.val_metric,
            self.seconds
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub log: Vec<EpochLog>,
    /// 0 when no epoch improved on the initial parameters.
    pub best_epoch: usize,
    pub initial_val: Metrics,
    pub val: Metrics,
    pub test: Metrics,
    pub params: ParamStore,
    pub seconds: f64,
}

/// Loss terms of one optimisation step, as plain numbers.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub l_task: f64,
    pub l_it: f64,
    pub l_ti: f64,
}

/// Forward and backward over one batch. Returns the losses and one gradient
/// per parameter, or a non-finite error naming the first bad tensor.
pub fn batch_gradients(
    cfg: &ModelConfig,
    weights: LossWeights,
    params: &ParamStore,
    batch: &[&SynthExample],
    training: bool,
    rng: &mut Rng,
) -> Result<(StepLosses, Vec<Tensor>)> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let out = forward(cfg, &bound, batch, training, rng)?;
    let total = total_loss_var(out.l_task, out.l_it, out.l_ti, weights)?;
    let losses = StepLosses {
        total: total.item(),
        l_task: out.l_task.item(),
        l_it: out.l_it.map_or(0.0, |l| l.item()),
        l_ti: out.l_ti.map_or(0.0, |l| l.item()),
    };
    if !losses.total.is_finite() {
        let culprit = match tape.first_non_finite() {
            Some((id, op)) => match bound.name_of(id) {
                Some(name) => format!("parameter `{name}`"),
                None => format!("tape node {id} ({op})"),
            },
            None => "unknown".to_string(),
        };
        return Err(MuseError::NonFinite(format!(
            "loss is {}; first non-finite tensor is {culprit}",
            losses.total
        )));
    }
    let grads = tape.backward(total)?;
    Ok((losses, bound.vars.iter().map(|&v| grads.wrt(v)).collect()))
}

fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{LOG_HEADER}")?;
    for row in log {
        writeln!(f, "{}", row.csv_row())?;
    }
    f.flush()?;
    Ok(())
}

/// Trains `cfg` on `data`. With `out_dir` set, the best checkpoint and the
/// per-epoch CSV log are written there as training proceeds.
pub fn train(cfg: &RunConfig, data: &Dataset, out_dir: Option<&Path>) -> Result<TrainReport> {
    cfg.validate()?;
    if data.task != cfg.task {
        return Err(MuseError::config(
            "task",
            format!("config says {} but data is {}", cfg.task, data.task),
        ));
    }
    let started = Instant::now();
    let model_cfg = cfg.model();
    let weights = cfg.loss_weights();
    let mut params = init_params(&model_cfg, cfg.seed)?;
    let mut rng = Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2 << 60);
    let lrs: Vec<f64> = params
        .names()
        .iter()
        .map(|n| {
            if model::is_crf_param(n) {
                cfg.crf_lr
            } else {
                cfg.lr
            }
        })
        .collect();
    let mut adam = AdamState::default();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }

    let initial_val = evaluate(&model_cfg, &params, &data.val)?;
    let mut best = (0usize, initial_val, params.clone());
    let save_best = |params: &ParamStore, rng: &Rng| -> Result<()> {
        if let Some(dir) = out_dir {
            save_checkpoint(
                dir,
                &Checkpoint {
                    config: cfg.clone(),
                    params: params.clone(),
                    rng_state: RngState::capture(rng),
                },
            )?;
        }
        Ok(())
    };
    save_best(&params, &rng)?;

    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let epoch_start = Instant::now();
        let batches = make_batches(data.train.len(), cfg.batch_size, &mut rng)?;
        let mut sums = StepLosses::default();
        let mut count = 0usize;
        for (bi, idx) in batches.iter().enumerate() {
            let batch: Vec<&SynthExample> = idx.iter().map(|&i| &data.train[i]).collect();
            let (losses, grads) = batch_gradients(
                &model_cfg, weights, &params, &batch, true, &mut rng,
            )
            .map_err(|e| match e {
                MuseError::NonFinite(msg) => {
                    MuseError::NonFinite(format!("epoch {epoch}, batch {bi}: {msg}"))
                }
                other => other,
            })?;
            adam_step_with(
                params.tensors_mut(),
                &grads,
                &mut adam,
                &lrs,
                AdamHyper::default(),
            )?;
            let k = batch.len();
            sums.total += losses.total * k as f64;
            sums.l_task += losses.l_task * k as f64;
            sums.l_it += losses.l_it * k as f64;
            sums.l_ti += losses.l_ti * k as f64;
            count += k;
        }
        let val = evaluate(&model_cfg, &params, &data.val)?;
        let c = count.max(1) as f64;
        let row = EpochLog {
            epoch,
            train_loss: sums.total / c,
            l_task: sums.l_task / c,
            l_it: sums.l_it / c,
            l_ti: sums.l_ti / c,
            val_metric: val.main(),
            seconds: epoch_start.elapsed().as_secs_f64(),
        };
        log::info!("{}", row.csv_row());
        log.push(row);
        if val.main() > best.1.main() {
            best = (epoch, val, params.clone());
            save_best(&params, &rng)?;
        }
        if let Some(dir) = out_dir {
            write_log(&dir.join("log.csv"), &log)?;
        }
    }
    if let Some(dir) = out_dir {
        write_log(&dir.join("log.csv"), &log)?;
    }

    let (best_epoch, val, params) = best;
    let test = evaluate(&model_cfg, &params, &data.test)?;
    Ok(TrainReport {
        log,
        best_epoch,
        initial_val,
        val,
        test,
        params,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Worst relative gradient error of the full objective on a micro model
/// (d=8, two layers, four tokens), checked coordinate by coordinate against
/// central differences.
pub fn end_to_end_grad_check(h: f64) -> Result<f64> {
    use crate::crosstransformer::ExchangeConfig;
    use crate::model::ModelVariant;

    let mut cfg = ModelConfig::new(Task::Mner, ModelVariant::Full);
    cfg.exchange = ExchangeConfig {
        theta: 0.5,
        mu: 0,
        eta: 2,
        num_layers: 2,
        heads: 2,
        dim: 8,
    };
    cfg.ffn_hidden = 16;
    cfg.dropout = 0.0;
    cfg.head_dropout = 0.0;
    let weights = LossWeights {
        alpha: 0.7,
        beta: 1.3,
    };
    let mut params = init_params(&cfg, 11)?;
    // Non-zero CRF parameters so their gradients are exercised.
    for name in ["crf.transitions", "crf.start", "crf.end"] {
        let i = params.position(name).expect("crf parameter");
        let t = &mut params.tensors_mut()[i];
        for (j, x) in t.data_mut().iter_mut().enumerate() {
            *x = ((j * 7 % 5) as f64 - 2.0) * 0.1;
        }
    }
    let mut gen = Rng::seed_from_u64(3);
    let image = crate::data::striped_grid(1, 4, &mut gen);
    let example = SynthExample {
        tokens: vec![2, 6, 17, 40],
        image,
        mner_labels: Some(vec![3, 4, 0, 0]),
        msa_label: None,
        meta: None,
    };
    let batch = [&example];
    let loss_at = |p: &ParamStore| -> Result<f64> {
        let mut rng = Rng::seed_from_u64(5);
        let tape = Tape::new();
        let bound = p.bind(&tape);
        let out = forward(&cfg, &bound, &batch, true, &mut rng)?;
        Ok(total_loss_var(out.l_task, out.l_it, out.l_ti, weights)?.item())
    };
    let (_, grads) = batch_gradients(
        &cfg,
        weights,
        &params,
        &batch,
        true,
        &mut Rng::seed_from_u64(5),
    )?;
    let mut worst = 0.0f64;
    for (pi, grad) in grads.iter().enumerate() {
        for j in 0..grad.numel() {
            let orig = params.tensors()[pi].data()[j];
            params.tensors_mut()[pi].data_mut()[j] = orig + h;
            let up = loss_at(&params)?;
            params.tensors_mut()[pi].data_mut()[j] = orig - h;
            let down = loss_at(&params)?;
            params.tensors_mut()[pi].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.data()[j];
            worst = worst.max((a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs()));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_loss_hand_values() {
        let w = LossWeights::default();
        assert_eq!(total_loss(2.0, 0.5, 0.25, w), 2.75);
        assert_eq!(
            total_loss(
                1.3,
                0.5,
                0.25,
                LossWeights {
                    alpha: 0.0,
                    beta: 0.0
                }
            ),
            1.3
        );
        let v = total_loss(
            1.0,
            0.4,
            0.3,
            LossWeights {
                alpha: 0.5,
                beta: 2.0,
            },
        );
        assert!((v - 1.8).abs() < 1e-15, "{v}");
    }

    #[test]
    fn total_loss_gradients_are_the_weights() {
        let tape = Tape::new();
        let w = LossWeights {
            alpha: 0.3,
            beta: 1.7,
        };
        let (a, b, c) = (
            tape.param(Tensor::scalar(2.0)),
            tape.param(Tensor::scalar(0.5)),
            tape.param(Tensor::scalar(0.25)),
        );
        let total = total_loss_var(a, Some(b), Some(c), w).unwrap();
        let g = tape.backward(total).unwrap();
        assert_eq!(g.wrt(a).item(), 1.0);
        assert_eq!(g.wrt(b).item(), 0.3);
        assert_eq!(g.wrt(c).item(), 1.7);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = vec![Tensor::vector(vec![1.0, -2.0])];
        let before = p.clone();
        let mut s = AdamState::default();
        for _ in 0..5 {
            adam_step(&mut p, &[Tensor::zeros(&[2])], &mut s, 1e-2).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![Tensor::scalar(0.5)];
        let mut s = AdamState::default();
        adam_step(&mut p, &[Tensor::scalar(1.0)], &mut s, 1e-3).unwrap();
        // m̂ = 1, v̂ = 1, so the step is lr / (1 + eps).
        let expected = 0.5 - 1e-3 / (1.0 + 1e-8);
        assert!((p[0].item() - expected).abs() < 1e-15);
        assert!((p[0].item() - (0.5 - 1e-3)).abs() < 1e-10);
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut p = vec![Tensor::zeros(&[2])];
        let mut s = AdamState::default();
        assert!(matches!(
            adam_step(&mut p, &[Tensor::zeros(&[3])], &mut s, 1e-3),
            Err(MuseError::Shape { .. })
        ));
        assert!(matches!(
            adam_step(&mut p, &[], &mut s, 1e-3),
            Err(MuseError::Contract(_))
        ));
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut p = vec![Tensor::vector(vec![0.1, 0.2, 0.3])];
            let mut s = AdamState::default();
            for k in 0..10 {
                let g = Tensor::vector(vec![k as f64, -(k as f64).sqrt(), 0.5]);
                adam_step(&mut p, &[g], &mut s, 1e-2).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    fn mner(labels: Vec<usize>) -> SynthExample {
        SynthExample {
            tokens: vec![9; labels.len()],
            image: [[0.0; 8]; 8],
            mner_labels: Some(labels),
            msa_label: None,
            meta: None,
        }
    }

    #[test]
    fn oracle_predictions_score_perfectly() {
        let ex = vec![mner(vec![0, 1, 2, 0, 3]), mner(vec![3, 4, 4, 0, 0])];
        let pred = Predictions::Mner(ex.iter().map(|e| e.mner_labels.clone().unwrap()).collect());
        match score_predictions(&pred, &ex).unwrap() {
            Metrics::Mner {
                f1, type_accuracy, ..
            } => {
                assert_eq!(f1, 1.0);
                assert_eq!(type_accuracy, 1.0);
            }
            m => panic!("{m:?}"),
        }
    }

    #[test]
    fn wrong_type_counts_against_type_accuracy() {
        let ex = vec![mner(vec![1, 2, 0, 3])];
        // Y for the X span, right type for the Y span.
        let pred = Predictions::Mner(vec![vec![3, 4, 0, 3]]);
        match score_predictions(&pred, &ex).unwrap() {
            Metrics::Mner {
                type_accuracy, f1, ..
            } => {
                assert_eq!(type_accuracy, 0.5);
                assert_eq!(f1, 0.5);
            }
            m => panic!("{m:?}"),
        }
    }

    #[test]
    fn majority_class_on_balanced_msa_is_a_third() {
        let ex: Vec<SynthExample> = (0..300)
            .map(|i| SynthExample {
                tokens: vec![9; 12],
                image: [[0.0; 8]; 8],
                mner_labels: None,
                msa_label: Some(i % 3),
                meta: None,
            })
            .collect();
        let pred = Predictions::Msa(vec![0; 300]);
        match score_predictions(&pred, &ex).unwrap() {
            Metrics::Msa { accuracy, macro_f1 } => {
                assert!((accuracy - 1.0 / 3.0).abs() < 1e-12);
                // class 0: P=1/3, R=1 → F1=0.5; others 0.
                assert!((macro_f1 - 0.5 / 3.0).abs() < 1e-12);
            }
            m => panic!("{m:?}"),
        }
    }

    #[test]
    fn micro_model_gradients_match_finite_differences() {
        let err = end_to_end_grad_check(1e-3).unwrap();
        assert!(err < 1e-3, "{err}");
    }
}
