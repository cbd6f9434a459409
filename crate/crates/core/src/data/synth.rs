//! Synthetic conversation generator for desk-scale training and tests.
//!
//! Each class gets one mean vector per modality (entries `2 * normal()`);
//! utterance features are `mean + (1 - separability) * normal()` per
//! dimension. Labels follow a per-speaker chain: a speaker's first utterance
//! draws a uniform class, later ones change class with probability
//! `shift_rate`. Draw order is fixed (per conversation: length, then per
//! utterance speaker, label, and t/a/v features), so a seed pins the dataset
//! exactly.

use serde::{Deserialize, Serialize};

use crate::data::{Conversation, Dataset, DatasetHeader, Utterance};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_conversations: usize,
    /// Inclusive range of conversation lengths.
    pub len_range: (usize, usize),
    pub n_speakers: usize,
    pub n_classes: usize,
    /// (text, audio, visual) feature dims.
    pub dims: (usize, usize, usize),
    /// 1.0 gives noise-free class means; 0.0 gives unit noise.
    pub separability: f64,
    /// Probability that a speaker's next utterance changes emotion.
    pub shift_rate: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_conversations: 8,
            len_range: (10, 10),
            n_speakers: 2,
            n_classes: 6,
            dims: (12, 14, 10),
            separability: 1.0,
            shift_rate: 0.5,
        }
    }
}

/// Per-class, per-modality mean vectors; exposed so tests can run
/// nearest-mean oracles against the generator.
pub struct ClassMeans {
    pub text: Vec<Vec<f64>>,
    pub audio: Vec<Vec<f64>>,
    pub visual: Vec<Vec<f64>>,
}

pub fn generate(spec: &SynthSpec, seed: u64) -> Result<(Dataset, ClassMeans)> {
    if spec.n_conversations == 0
        || spec.n_speakers == 0
        || spec.n_classes < 2
        || spec.len_range.0 == 0
        || spec.len_range.0 > spec.len_range.1
    {
        return Err(Error::Config(format!("invalid synth spec {spec:?}")));
    }
    if !(0.0..=1.0).contains(&spec.separability) || !(0.0..=1.0).contains(&spec.shift_rate) {
        return Err(Error::Config(
            "separability and shift_rate must lie in [0, 1]".into(),
        ));
    }

    let mut rng = Rng::new(seed);
    let mut means_rng = rng.split("class-means");
    let mut draw_means = |dim: usize| -> Vec<Vec<f64>> {
        (0..spec.n_classes)
            .map(|_| (0..dim).map(|_| 2.0 * means_rng.normal()).collect())
            .collect()
    };
    let means = ClassMeans {
        text: draw_means(spec.dims.0),
        audio: draw_means(spec.dims.1),
        visual: draw_means(spec.dims.2),
    };

    let noise_scale = 1.0 - spec.separability;
    let mut conversations = Vec::with_capacity(spec.n_conversations);
    for ci in 0..spec.n_conversations {
        let len = spec.len_range.0 + rng.below(spec.len_range.1 - spec.len_range.0 + 1);
        let mut last_label: Vec<Option<usize>> = vec![None; spec.n_speakers];
        let mut utterances = Vec::with_capacity(len);
        for _ in 0..len {
            let speaker = rng.below(spec.n_speakers);
            let label = match last_label[speaker] {
                None => rng.below(spec.n_classes),
                Some(prev) => {
                    if rng.uniform() < spec.shift_rate {
                        // Uniform over the other classes.
                        let step = 1 + rng.below(spec.n_classes - 1);
                        (prev + step) % spec.n_classes
                    } else {
                        prev
                    }
                }
            };
            last_label[speaker] = Some(label);
            let mut sample = |mean: &[f64]| -> Vec<f64> {
                mean.iter()
                    .map(|&m| m + noise_scale * rng.normal())
                    .collect()
            };
            utterances.push(Utterance {
                text: sample(&means.text[label]),
                audio: sample(&means.audio[label]),
                visual: sample(&means.visual[label]),
                speaker,
                label,
            });
        }
        conversations.push(Conversation {
            id: format!("synth_{ci}"),
            utterances,
        });
    }

    let dataset = Dataset {
        header: DatasetHeader {
            name: "synth".into(),
            d_text: spec.dims.0,
            d_audio: spec.dims.1,
            d_visual: spec.dims.2,
            num_classes: spec.n_classes,
            label_names: (0..spec.n_classes).map(|c| format!("class_{c}")).collect(),
            speaker_vocab: (0..spec.n_speakers).map(|s| format!("speaker_{s}")).collect(),
        },
        conversations,
    };
    dataset.validate()?;
    Ok((dataset, means))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fully_separable_features_equal_class_means() {
        let spec = SynthSpec {
            separability: 1.0,
            ..SynthSpec::default()
        };
        let (dataset, means) = generate(&spec, 7).unwrap();
        for conv in &dataset.conversations {
            for u in &conv.utterances {
                assert_eq!(u.text, means.text[u.label]);
                assert_eq!(u.audio, means.audio[u.label]);
                assert_eq!(u.visual, means.visual[u.label]);
            }
        }
    }

    #[test]
    fn nearest_mean_oracle_is_perfect_when_separable() {
        let spec = SynthSpec {
            separability: 1.0,
            ..SynthSpec::default()
        };
        let (dataset, means) = generate(&spec, 21).unwrap();
        let mut correct = 0;
        let mut total = 0;
        for conv in &dataset.conversations {
            for u in &conv.utterances {
                let pred = (0..spec.n_classes)
                    .min_by(|&a, &b| {
                        let da: f64 = u
                            .text
                            .iter()
                            .zip(&means.text[a])
                            .map(|(x, m)| (x - m) * (x - m))
                            .sum();
                        let db: f64 = u
                            .text
                            .iter()
                            .zip(&means.text[b])
                            .map(|(x, m)| (x - m) * (x - m))
                            .sum();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                total += 1;
                if pred == u.label {
                    correct += 1;
                }
            }
        }
        assert_eq!(correct, total);
    }

    #[test]
    fn same_seed_gives_identical_bytes() {
        let spec = SynthSpec {
            separability: 0.5,
            ..SynthSpec::default()
        };
        let (a, _) = generate(&spec, 99).unwrap();
        let (b, _) = generate(&spec, 99).unwrap();
        assert_eq!(a, b);

        let dir_a = std::env::temp_dir().join(format!("mmerc_synth_a_{}", std::process::id()));
        let dir_b = std::env::temp_dir().join(format!("mmerc_synth_b_{}", std::process::id()));
        crate::data::save_dataset(&a, &dir_a).unwrap();
        crate::data::save_dataset(&b, &dir_b).unwrap();
        let bytes_a = std::fs::read(dir_a.join("data.bin")).unwrap();
        let bytes_b = std::fs::read(dir_b.join("data.bin")).unwrap();
        assert_eq!(bytes_a, bytes_b);
        std::fs::remove_dir_all(&dir_a).ok();
        std::fs::remove_dir_all(&dir_b).ok();
    }

    #[test]
    fn zero_shift_rate_keeps_speaker_labels_constant() {
        let spec = SynthSpec {
            shift_rate: 0.0,
            len_range: (20, 20),
            ..SynthSpec::default()
        };
        let (dataset, _) = generate(&spec, 5).unwrap();
        for conv in &dataset.conversations {
            let mut seen: Vec<Option<usize>> = vec![None; spec.n_speakers];
            for u in &conv.utterances {
                if let Some(prev) = seen[u.speaker] {
                    assert_eq!(prev, u.label);
                }
                seen[u.speaker] = Some(u.label);
            }
        }
    }
}
