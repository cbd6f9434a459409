//! Ablation driver: the standard 13-setting grid (full model, four
//! architecture removals, two loss removals, and the seven modality subsets)
//! trained with a shared seed and reported in a fixed row order.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{Dataset, Modality};
use crate::error::Result;
use crate::metrics::{evaluate_model, EvalReport};
use crate::model::analytic_param_count;
use crate::train::train;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub param_count: usize,
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub report: EvalReport,
}

/// The 13 settings, in report order.
pub fn grid(base: &RunConfig) -> Vec<(String, RunConfig)> {
    let mut rows = Vec::new();
    let full = base.clone();
    rows.push(("full".to_string(), full));

    let mut with = |name: &str, f: &dyn Fn(&mut RunConfig)| {
        let mut cfg = base.clone();
        f(&mut cfg);
        rows.push((name.to_string(), cfg));
    };
    with("no_positional_embeddings", &|c| c.model.no_positional = true);
    with("no_speaker_embeddings", &|c| c.model.no_speaker = true);
    with("no_intra_modal", &|c| c.model.no_intra = true);
    with("no_inter_modal", &|c| c.model.no_inter = true);
    with("no_student_ce", &|c| c.model.no_student_ce = true);
    with("no_student_kl", &|c| c.model.no_student_kl = true);

    use Modality::{Audio, Text, Visual};
    let subsets: [(&str, &[Modality]); 6] = [
        ("text", &[Text]),
        ("audio", &[Audio]),
        ("visual", &[Visual]),
        ("text+audio", &[Text, Audio]),
        ("text+visual", &[Text, Visual]),
        ("audio+visual", &[Audio, Visual]),
    ];
    for (name, mods) in subsets {
        with(name, &|c| c.model.modalities = mods.to_vec());
    }
    rows
}

/// Train and evaluate every grid row. `eval_dataset` may be the training set
/// itself at desk scale or a held-out test set.
pub fn run_ablation(
    train_dataset: &Dataset,
    eval_dataset: &Dataset,
    base: &RunConfig,
) -> Result<Vec<AblationRow>> {
    let eval_max_len = eval_dataset
        .conversations
        .iter()
        .map(crate::data::Conversation::len)
        .max()
        .unwrap_or(0);
    let mut rows = Vec::new();
    for (name, cfg) in grid(base) {
        let mut result = train(train_dataset, &cfg)?;
        result.model.ensure_len(eval_max_len)?;
        let (report, _) = evaluate_model(&result.model, eval_dataset, 1)?;
        rows.push(AblationRow {
            name,
            param_count: analytic_param_count(&cfg.model, &train_dataset.header),
            accuracy: report.accuracy,
            weighted_f1: report.weighted_f1,
            report,
        });
    }
    Ok(rows)
}

pub fn to_markdown(rows: &[AblationRow]) -> String {
    let mut out = String::from("| setting | params | ACC | w-F1 |\n|---|---:|---:|---:|\n");
    for row in rows {
        out.push_str(&format!(
            "| {} | {} | {:.4} | {:.4} |\n",
            row.name, row.param_count, row.accuracy, row.weighted_f1
        ));
    }
    out
}
