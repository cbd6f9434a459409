//! Classification metrics: accuracy, per-class precision/recall/F1, weighted
//! F1, confusion matrix, and the emotional-shift accuracy split.

use serde::{Deserialize, Serialize};

use crate::data::batch::ConvView;
use crate::data::shift::{emotional_shift_split, ShiftReport};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub label: String,
    pub support: usize,
    /// Diagonal over row sum (equals recall).
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub total: usize,
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub per_class: Vec<ClassReport>,
    /// `confusion[true][pred]`.
    pub confusion: Vec<Vec<usize>>,
    /// Classes absent from both truth and predictions (their F1 is pinned
    /// to 0).
    pub undefined_f1_classes: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shift: Option<ShiftReport>,
}

pub fn confusion_matrix(truth: &[usize], pred: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0usize; classes]; classes];
    for (&t, &p) in truth.iter().zip(pred) {
        m[t][p] += 1;
    }
    m
}

/// Metrics from aligned truth/prediction label sequences.
pub fn eval_from_predictions(
    truth: &[usize],
    pred: &[usize],
    label_names: &[String],
) -> Result<EvalReport> {
    if truth.len() != pred.len() {
        return Err(Error::Usage(format!(
            "{} truths vs {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::Usage("cannot evaluate zero utterances".into()));
    }
    let classes = label_names.len();
    if let Some(&bad) = truth.iter().chain(pred).find(|&&l| l >= classes) {
        return Err(Error::Data(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }

    let confusion = confusion_matrix(truth, pred, classes);
    let total = truth.len();
    let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();

    let mut per_class = Vec::with_capacity(classes);
    let mut undefined = Vec::new();
    let mut weighted_f1 = 0.0;
    for c in 0..classes {
        let support: usize = confusion[c].iter().sum();
        let predicted: usize = (0..classes).map(|t| confusion[t][c]).sum();
        let tp = confusion[c][c];
        let precision = if predicted > 0 {
            tp as f64 / predicted as f64
        } else {
            0.0
        };
        let recall = if support > 0 {
            tp as f64 / support as f64
        } else {
            0.0
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        if support == 0 && predicted == 0 {
            undefined.push(c);
        }
        weighted_f1 += support as f64 * f1;
        per_class.push(ClassReport {
            label: label_names[c].clone(),
            support,
            accuracy: recall,
            precision,
            recall,
            f1,
        });
    }
    weighted_f1 /= total as f64;

    Ok(EvalReport {
        total,
        accuracy: correct as f64 / total as f64,
        weighted_f1,
        per_class,
        confusion,
        undefined_f1_classes: undefined,
        shift: None,
    })
}

/// Per-conversation teacher predictions for a whole dataset, in dataset
/// order. Conversations are processed independently, so the optional
/// `threads > 1` mode changes nothing in the reported numbers: results land
/// in fixed slots and the metric reduction below stays sequential.
pub fn predict_dataset(model: &Model, dataset: &Dataset, threads: usize) -> Result<Vec<Vec<usize>>> {
    let convs = &dataset.conversations;
    if threads <= 1 || convs.len() <= 1 {
        return convs
            .iter()
            .map(|c| model.predict(&ConvView::from_conversation(c, &dataset.header)?))
            .collect();
    }
    let mut slots: Vec<Option<Result<Vec<usize>>>> = vec![None; convs.len()];
    let chunk = convs.len().div_ceil(threads);
    std::thread::scope(|scope| {
        for (ti, slot_chunk) in slots.chunks_mut(chunk).enumerate() {
            let start = ti * chunk;
            scope.spawn(move || {
                for (offset, slot) in slot_chunk.iter_mut().enumerate() {
                    let conv = &convs[start + offset];
                    *slot = Some(
                        ConvView::from_conversation(conv, &dataset.header)
                            .and_then(|view| model.predict(&view)),
                    );
                }
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("every slot filled"))
        .collect()
}

/// Evaluate the teacher on a dataset: flat metrics plus the emotional-shift
/// split. Returns the report and the per-conversation predictions.
pub fn evaluate_model(
    model: &Model,
    dataset: &Dataset,
    threads: usize,
) -> Result<(EvalReport, Vec<Vec<usize>>)> {
    let predictions = predict_dataset(model, dataset, threads)?;
    let mut truth = Vec::with_capacity(dataset.total_utterances());
    let mut pred = Vec::with_capacity(dataset.total_utterances());
    for (conv, preds) in dataset.conversations.iter().zip(&predictions) {
        for (u, &p) in conv.utterances.iter().zip(preds) {
            truth.push(u.label);
            pred.push(p);
        }
    }
    let mut report = eval_from_predictions(&truth, &pred, &dataset.header.label_names)?;
    report.shift = Some(emotional_shift_split(&dataset.conversations, &predictions)?);
    Ok((report, predictions))
}

/// Markdown table in the usual reporting layout: per-class accuracy and F1
/// columns followed by overall accuracy and weighted F1.
pub fn to_class_table(report: &EvalReport) -> String {
    let mut out = String::from("| class | ACC | F1 |\n|---|---:|---:|\n");
    for c in &report.per_class {
        out.push_str(&format!(
            "| {} | {:.4} | {:.4} |\n",
            c.label, c.accuracy, c.f1
        ));
    }
    out.push_str(&format!(
        "| **overall** | **{:.4}** | **{:.4}** |\n",
        report.accuracy, report.weighted_f1
    ));
    if let Some(shift) = &report.shift {
        out.push_str(&format!(
            "\nemotional shift: {} utterances at {:.4} accuracy; no shift: {} at {:.4}\n",
            shift.shift_total,
            shift.shift_accuracy(),
            shift.noshift_total,
            shift.noshift_accuracy()
        ));
    }
    out
}
