//! Training loop: shuffled conversation batches, one tape per batch, Adam
//! updates, per-epoch loss logging, and early stopping on validation
//! weighted F1.
//!
//! All randomness derives from the run seed through labeled RNG splits
//! (`init`, `dropout`, `val-split`, `shuffle.<epoch>`), so a single-threaded
//! run is bitwise reproducible.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::batch::make_batches;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::heads::{compute_losses, LossReport};
use crate::metrics::eval_from_predictions;
use crate::model::Model;
use crate::optim::{Adam, AdamConfig};
use crate::rng::Rng;
use crate::tape::Tape;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub losses: LossReport,
    pub val_weighted_f1: Option<f64>,
    /// Smallest KL component seen in any conversation this epoch.
    pub min_kl: f64,
    /// Count of numerical clamps recorded by the loss ops this epoch.
    pub warnings: usize,
}

/// The documented JSON-lines record for loss trends.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossLine {
    pub epoch: usize,
    pub task: f64,
    pub ce_t: f64,
    pub ce_a: f64,
    pub ce_v: f64,
    pub kl_t: f64,
    pub kl_a: f64,
    pub kl_v: f64,
    pub total: f64,
}

impl LossLine {
    pub fn from_log(log: &EpochLog) -> Self {
        let l = &log.losses;
        LossLine {
            epoch: log.epoch,
            task: l.task,
            ce_t: l.ce_t,
            ce_a: l.ce_a,
            ce_v: l.ce_v,
            kl_t: l.kl_t,
            kl_a: l.kl_a,
            kl_v: l.kl_v,
            total: l.total,
        }
    }
}

#[derive(Debug)]
pub struct TrainResult {
    pub model: Model,
    pub history: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub best_val_f1: Option<f64>,
}

/// Deterministic train/validation split over conversation indices.
pub fn split_indices(n: usize, val_fraction: f64, seed_rng: &Rng) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    let val_count = (n as f64 * val_fraction).floor() as usize;
    if val_count > 0 && val_count < n {
        let mut rng = seed_rng.split("val-split");
        rng.shuffle(&mut order);
        let train = order[..n - val_count].to_vec();
        let val = order[n - val_count..].to_vec();
        (train, val)
    } else {
        (order, Vec::new())
    }
}

pub fn train(dataset: &Dataset, run: &RunConfig) -> Result<TrainResult> {
    train_with_logger(dataset, run, |_| {})
}

pub fn train_with_logger(
    dataset: &Dataset,
    run: &RunConfig,
    mut logger: impl FnMut(&EpochLog),
) -> Result<TrainResult> {
    run.validate()?;
    dataset.validate()?;

    let base_rng = Rng::new(run.seed);
    let mut init_rng = base_rng.split("init");
    let mut model = Model::new(run.model.clone(), &dataset.header, &mut init_rng)?;
    let max_len = dataset
        .conversations
        .iter()
        .map(crate::data::Conversation::len)
        .max()
        .unwrap_or(0);
    model.ensure_len(max_len)?;

    let (train_idx, val_idx) = split_indices(dataset.conversations.len(), run.val_fraction, &base_rng);
    let mut adam = Adam::new(
        AdamConfig {
            lr: run.lr,
            weight_decay: run.weight_decay,
            ..AdamConfig::default()
        },
        &model.params,
    );
    let mut dropout_rng = base_rng.split("dropout");
    let weights = run.model.loss_weights();
    let with_students = weights.ce != 0.0 || weights.kl != 0.0;

    let mut history = Vec::with_capacity(run.epochs);
    let mut best: Option<(usize, f64, crate::params::ParamStore)> = None;
    let mut stale_epochs = 0usize;

    for epoch in 0..run.epochs {
        let mut shuffle_rng = base_rng.split(&format!("shuffle.{epoch}"));
        let batches = make_batches(dataset, &train_idx, run.batch_size, Some(&mut shuffle_rng))?;

        let mut conv_reports: Vec<LossReport> = Vec::new();
        let mut warnings = 0usize;
        for (bi, batch) in batches.iter().enumerate() {
            let mut tape = Tape::new();
            let mut totals = Vec::with_capacity(batch.size());
            for b in 0..batch.size() {
                let view = batch.view(b);
                let out = model.forward(
                    &mut tape,
                    &view,
                    Some(&mut dropout_rng),
                    with_students,
                    false,
                )?;
                let (vars, report) = compute_losses(
                    &mut tape,
                    (out.teacher_logits, out.teacher_probs),
                    &out.students,
                    &view.labels,
                    &view.mask,
                    weights,
                    run.model.temperature,
                    run.model.kl_backprop_teacher,
                )?;
                check_finite_report(&report, epoch, bi)?;
                totals.push(vars.total);
                conv_reports.push(report);
            }
            let mut sum = totals[0];
            for &t in &totals[1..] {
                sum = tape.add(sum, t)?;
            }
            let batch_loss = tape.scale(sum, 1.0 / totals.len() as f64);
            if !tape.value(batch_loss).data()[0].is_finite() {
                return Err(Error::NonFinite(format!(
                    "epoch {epoch} batch {bi}: batch loss is not finite"
                )));
            }
            tape.backward(batch_loss)?;
            tape.harvest_into(&mut model.params);
            adam.step(&mut model.params);
            model.params.zero_grads();
            warnings += tape.numerical_warnings.len();
        }

        let losses = mean_report(&conv_reports, &weights, run.model.temperature);
        let min_kl = conv_reports
            .iter()
            .flat_map(|r| [r.kl_t, r.kl_a, r.kl_v])
            .fold(f64::INFINITY, f64::min);
        let val_weighted_f1 = if val_idx.is_empty() {
            None
        } else {
            Some(weighted_f1_on(&model, dataset, &val_idx)?)
        };
        let log = EpochLog {
            epoch,
            losses,
            val_weighted_f1,
            min_kl: if min_kl.is_finite() { min_kl } else { 0.0 },
            warnings,
        };
        logger(&log);
        history.push(log);

        if let Some(f1) = val_weighted_f1 {
            let improved = best.as_ref().is_none_or(|(_, b, _)| f1 > *b);
            if improved {
                best = Some((epoch, f1, model.params.clone()));
                stale_epochs = 0;
            } else {
                stale_epochs += 1;
                if stale_epochs >= run.patience {
                    break;
                }
            }
        }
    }

    let (best_epoch, best_val_f1) = match best {
        Some((epoch, f1, params)) => {
            model.params = params;
            (Some(epoch), Some(f1))
        }
        None => (None, None),
    };
    Ok(TrainResult {
        model,
        history,
        best_epoch,
        best_val_f1,
    })
}

fn check_finite_report(report: &LossReport, epoch: usize, batch: usize) -> Result<()> {
    let components = [
        ("task", report.task),
        ("ce_t", report.ce_t),
        ("ce_a", report.ce_a),
        ("ce_v", report.ce_v),
        ("kl_t", report.kl_t),
        ("kl_a", report.kl_a),
        ("kl_v", report.kl_v),
        ("total", report.total),
    ];
    for (name, v) in components {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!(
                "epoch {epoch} batch {batch}: loss component {name} = {v}"
            )));
        }
    }
    Ok(())
}

/// Mean of per-conversation reports; the total is recomputed from the
/// averaged components so the report identity holds exactly.
fn mean_report(reports: &[LossReport], weights: &crate::heads::LossWeights, temperature: f64) -> LossReport {
    let n = reports.len().max(1) as f64;
    let mut mean = LossReport {
        gamma_task: weights.task,
        gamma_ce: weights.ce,
        gamma_kl: weights.kl,
        temperature,
        ..LossReport::default()
    };
    for r in reports {
        mean.task += r.task / n;
        mean.ce_t += r.ce_t / n;
        mean.ce_a += r.ce_a / n;
        mean.ce_v += r.ce_v / n;
        mean.kl_t += r.kl_t / n;
        mean.kl_a += r.kl_a / n;
        mean.kl_v += r.kl_v / n;
    }
    mean.total =
        weights.task * mean.task + weights.ce * mean.sum_ce() + weights.kl * mean.sum_kl();
    mean
}

/// Weighted F1 of the teacher over a subset of conversations.
fn weighted_f1_on(model: &Model, dataset: &Dataset, idx: &[usize]) -> Result<f64> {
    let mut truth = Vec::new();
    let mut pred = Vec::new();
    for &i in idx {
        let conv = &dataset.conversations[i];
        let view = crate::data::batch::ConvView::from_conversation(conv, &dataset.header)?;
        let preds = model.predict(&view)?;
        truth.extend(conv.utterances.iter().map(|u| u.label));
        pred.extend(preds);
    }
    Ok(eval_from_predictions(&truth, &pred, &dataset.header.label_names)?.weighted_f1)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub seeds: Vec<u64>,
    pub accuracy: Vec<f64>,
    pub weighted_f1: Vec<f64>,
    pub mean_accuracy: f64,
    pub mean_weighted_f1: f64,
}

/// Train once per seed and evaluate on `eval_dataset`, reporting per-seed and
/// mean scores.
pub fn seed_sweep(
    dataset: &Dataset,
    eval_dataset: &Dataset,
    run: &RunConfig,
    seeds: &[u64],
) -> Result<SweepReport> {
    if seeds.is_empty() {
        return Err(Error::Usage("seed sweep needs at least one seed".into()));
    }
    let eval_max_len = eval_dataset
        .conversations
        .iter()
        .map(crate::data::Conversation::len)
        .max()
        .unwrap_or(0);
    let mut accuracy = Vec::with_capacity(seeds.len());
    let mut weighted_f1 = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut cfg = run.clone();
        cfg.seed = seed;
        let mut result = train(dataset, &cfg)?;
        result.model.ensure_len(eval_max_len)?;
        let (report, _) = crate::metrics::evaluate_model(&result.model, eval_dataset, 1)?;
        accuracy.push(report.accuracy);
        weighted_f1.push(report.weighted_f1);
    }
    let n = seeds.len() as f64;
    Ok(SweepReport {
        seeds: seeds.to_vec(),
        mean_accuracy: accuracy.iter().sum::<f64>() / n,
        mean_weighted_f1: weighted_f1.iter().sum::<f64>() / n,
        accuracy,
        weighted_f1,
    })
}
