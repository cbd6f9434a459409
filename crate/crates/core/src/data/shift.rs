//! Accuracy split on emotional shift: utterances whose same-speaker
//! predecessor carries a different emotion versus the same emotion.
//!
//! The predecessor is the speaker's previous utterance anywhere earlier in
//! the conversation (not necessarily adjacent); each speaker's first
//! utterance belongs to neither bucket.

use serde::{Deserialize, Serialize};

use crate::data::Conversation;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    pub shift_total: usize,
    pub shift_correct: usize,
    pub noshift_total: usize,
    pub noshift_correct: usize,
    pub excluded: usize,
}

impl ShiftReport {
    pub fn shift_accuracy(&self) -> f64 {
        if self.shift_total == 0 {
            0.0
        } else {
            self.shift_correct as f64 / self.shift_total as f64
        }
    }

    pub fn noshift_accuracy(&self) -> f64 {
        if self.noshift_total == 0 {
            0.0
        } else {
            self.noshift_correct as f64 / self.noshift_total as f64
        }
    }
}

/// `predictions[c][i]` is the predicted label of utterance `i` in
/// conversation `c`.
pub fn emotional_shift_split(
    conversations: &[Conversation],
    predictions: &[Vec<usize>],
) -> Result<ShiftReport> {
    if conversations.len() != predictions.len() {
        return Err(Error::Usage(format!(
            "{} conversations vs {} prediction rows",
            conversations.len(),
            predictions.len()
        )));
    }
    let mut report = ShiftReport {
        shift_total: 0,
        shift_correct: 0,
        noshift_total: 0,
        noshift_correct: 0,
        excluded: 0,
    };
    for (conv, preds) in conversations.iter().zip(predictions) {
        if conv.len() != preds.len() {
            return Err(Error::Usage(format!(
                "conversation {} has {} utterances but {} predictions",
                conv.id,
                conv.len(),
                preds.len()
            )));
        }
        let mut last_label: Vec<Option<usize>> = Vec::new();
        for (u, &pred) in conv.utterances.iter().zip(preds) {
            if u.speaker >= last_label.len() {
                last_label.resize(u.speaker + 1, None);
            }
            match last_label[u.speaker] {
                None => report.excluded += 1,
                Some(prev) if prev != u.label => {
                    report.shift_total += 1;
                    if pred == u.label {
                        report.shift_correct += 1;
                    }
                }
                Some(_) => {
                    report.noshift_total += 1;
                    if pred == u.label {
                        report.noshift_correct += 1;
                    }
                }
            }
            last_label[u.speaker] = Some(u.label);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Utterance;

    fn conv(speakers: &[usize], labels: &[usize]) -> Conversation {
        Conversation {
            id: "c".into(),
            utterances: speakers
                .iter()
                .zip(labels)
                .map(|(&speaker, &label)| Utterance {
                    text: vec![0.0],
                    audio: vec![0.0],
                    visual: vec![0.0],
                    speaker,
                    label,
                })
                .collect(),
        }
    }

    #[test]
    fn single_speaker_sequence() {
        // Speaker A labels [joy, anger, anger]: first excluded, one shift,
        // one no-shift.
        let c = conv(&[0, 0, 0], &[1, 2, 2]);
        let report = emotional_shift_split(&[c], &[vec![1, 2, 2]]).unwrap();
        assert_eq!(report.excluded, 1);
        assert_eq!(report.shift_total, 1);
        assert_eq!(report.noshift_total, 1);
        assert_eq!(report.shift_correct, 1);
        assert_eq!(report.noshift_correct, 1);
    }

    #[test]
    fn constant_labels_have_no_shift() {
        let c = conv(&[0, 1, 0, 1], &[3, 3, 3, 3]);
        let report = emotional_shift_split(&[c], &[vec![0, 0, 0, 0]]).unwrap();
        assert_eq!(report.shift_total, 0);
        assert_eq!(report.noshift_total, 2);
        assert_eq!(report.excluded, 2);
        assert_eq!(report.noshift_correct, 0);
    }

    #[test]
    fn predecessor_may_be_non_adjacent() {
        // Speakers A B A: A's second utterance compares against utterance 0,
        // skipping B's turn.
        let c = conv(&[0, 1, 0], &[1, 1, 2]);
        let report = emotional_shift_split(&[c], &[vec![1, 1, 2]]).unwrap();
        assert_eq!(report.excluded, 2);
        assert_eq!(report.shift_total, 1);
        assert_eq!(report.shift_correct, 1);
    }

    #[test]
    fn misaligned_predictions_rejected() {
        let c = conv(&[0], &[0]);
        assert!(emotional_shift_split(&[c], &[vec![0, 1]]).is_err());
    }
}
