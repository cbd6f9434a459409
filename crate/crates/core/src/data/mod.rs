//! Conversation datasets: in-memory types, the on-disk directory format, and
//! a JSON-lines interchange converter.
//!
//! A dataset directory contains:
//!
//! * `header.json`: [`DatasetHeader`] (dims, class names, speaker vocabulary).
//! * `index.json`: per-conversation structure (id, speaker indices, label
//!   indices, and the byte offset of its features in `data.bin`).
//! * `data.bin`: little-endian f64 features, conversation by conversation,
//!   utterance by utterance, in text/audio/visual order.
//!
//! The JSON-lines interchange format (for `convert`) is one conversation per
//! line: `{"id": "...", "utterances": [{"speaker": "...", "label": "...",
//! "text": [...], "audio": [...], "visual": [...]}]}`.

pub mod batch;
pub mod shift;
pub mod synth;

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One of the three feature streams of an utterance. Canonical order is
/// text, audio, visual everywhere in the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Audio,
    Visual,
}

/// The canonical `[t, a, v]` ordering.
pub const ALL_MODALITIES: [Modality; 3] = [Modality::Text, Modality::Audio, Modality::Visual];

impl Modality {
    pub fn short(self) -> &'static str {
        match self {
            Modality::Text => "t",
            Modality::Audio => "a",
            Modality::Visual => "v",
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.short())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub text: Vec<f64>,
    pub audio: Vec<f64>,
    pub visual: Vec<f64>,
    pub speaker: usize,
    pub label: usize,
}

impl Utterance {
    pub fn features(&self, m: Modality) -> &[f64] {
        match m {
            Modality::Text => &self.text,
            Modality::Audio => &self.audio,
            Modality::Visual => &self.visual,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conversation {
    pub id: String,
    pub utterances: Vec<Utterance>,
}

impl Conversation {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub name: String,
    pub d_text: usize,
    pub d_audio: usize,
    pub d_visual: usize,
    pub num_classes: usize,
    pub label_names: Vec<String>,
    pub speaker_vocab: Vec<String>,
}

impl DatasetHeader {
    pub fn dim(&self, m: Modality) -> usize {
        match m {
            Modality::Text => self.d_text,
            Modality::Audio => self.d_audio,
            Modality::Visual => self.d_visual,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_text == 0 || self.d_audio == 0 || self.d_visual == 0 {
            return Err(Error::Data("feature dims must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Data("need at least 2 classes".into()));
        }
        if self.label_names.len() != self.num_classes {
            return Err(Error::Data(format!(
                "{} label names for {} classes",
                self.label_names.len(),
                self.num_classes
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub conversations: Vec<Conversation>,
}

impl Dataset {
    pub fn total_utterances(&self) -> usize {
        self.conversations.iter().map(Conversation::len).sum()
    }

    /// Structural validation of every record against the header.
    pub fn validate(&self) -> Result<()> {
        self.header.validate()?;
        if self.conversations.is_empty() {
            return Err(Error::Data("dataset must contain >=1 conversation".into()));
        }
        let unk = self.header.speaker_vocab.len();
        for (ci, conv) in self.conversations.iter().enumerate() {
            if conv.is_empty() {
                return Err(Error::Data(format!("conversation {ci} has no utterances")));
            }
            for (ui, u) in conv.utterances.iter().enumerate() {
                if u.text.len() != self.header.d_text
                    || u.audio.len() != self.header.d_audio
                    || u.visual.len() != self.header.d_visual
                {
                    return Err(Error::Data(format!(
                        "conversation {ci} utterance {ui}: feature dims ({}, {}, {}) do not match header",
                        u.text.len(),
                        u.audio.len(),
                        u.visual.len()
                    )));
                }
                if u.label >= self.header.num_classes {
                    return Err(Error::Data(format!(
                        "conversation {ci} utterance {ui}: label {} out of range",
                        u.label
                    )));
                }
                if u.speaker > unk {
                    return Err(Error::Data(format!(
                        "conversation {ci} utterance {ui}: speaker {} beyond UNK slot {unk}",
                        u.speaker
                    )));
                }
            }
        }
        Ok(())
    }
}

// ── Directory format ─────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct ConvIndex {
    id: String,
    speakers: Vec<usize>,
    labels: Vec<usize>,
    /// Byte offset of this conversation's first feature in `data.bin`.
    offset: u64,
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    dataset.validate()?;
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join("header.json"),
        serde_json::to_string_pretty(&dataset.header)?,
    )?;

    let mut index = Vec::with_capacity(dataset.conversations.len());
    let mut bin = Vec::new();
    for conv in &dataset.conversations {
        index.push(ConvIndex {
            id: conv.id.clone(),
            speakers: conv.utterances.iter().map(|u| u.speaker).collect(),
            labels: conv.utterances.iter().map(|u| u.label).collect(),
            offset: bin.len() as u64,
        });
        for u in &conv.utterances {
            for part in [&u.text, &u.audio, &u.visual] {
                for v in part {
                    bin.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    fs::write(dir.join("index.json"), serde_json::to_string(&index)?)?;
    fs::write(dir.join("data.bin"), bin)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let header: DatasetHeader =
        serde_json::from_str(&fs::read_to_string(dir.join("header.json")).map_err(|e| {
            Error::Data(format!("cannot read {}: {e}", dir.join("header.json").display()))
        })?)?;
    header.validate()?;
    let index: Vec<ConvIndex> = serde_json::from_str(
        &fs::read_to_string(dir.join("index.json"))
            .map_err(|e| Error::Data(format!("cannot read index.json: {e}")))?,
    )?;
    let bin = fs::read(dir.join("data.bin"))
        .map_err(|e| Error::Data(format!("cannot read data.bin: {e}")))?;

    let per_utt = (header.d_text + header.d_audio + header.d_visual) * 8;
    let mut conversations = Vec::with_capacity(index.len());
    for (ci, entry) in index.iter().enumerate() {
        if entry.speakers.len() != entry.labels.len() {
            return Err(Error::Data(format!(
                "conversation {ci}: {} speakers vs {} labels",
                entry.speakers.len(),
                entry.labels.len()
            )));
        }
        let n = entry.labels.len();
        let start = entry.offset as usize;
        let end = start + n * per_utt;
        if end > bin.len() {
            return Err(Error::Data(format!(
                "conversation {ci}: features [{start}, {end}) exceed data.bin ({} bytes)",
                bin.len()
            )));
        }
        let mut cursor = start;
        let mut read_vec = |len: usize| -> Vec<f64> {
            let mut out = Vec::with_capacity(len);
            for _ in 0..len {
                let mut buf = [0u8; 8];
                buf.copy_from_slice(&bin[cursor..cursor + 8]);
                out.push(f64::from_le_bytes(buf));
                cursor += 8;
            }
            out
        };
        let mut utterances = Vec::with_capacity(n);
        for i in 0..n {
            utterances.push(Utterance {
                text: read_vec(header.d_text),
                audio: read_vec(header.d_audio),
                visual: read_vec(header.d_visual),
                speaker: entry.speakers[i],
                label: entry.labels[i],
            });
        }
        conversations.push(Conversation {
            id: entry.id.clone(),
            utterances,
        });
    }

    let dataset = Dataset {
        header,
        conversations,
    };
    dataset.validate()?;
    Ok(dataset)
}

// ── JSON-lines interchange ───────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct JsonUtterance {
    speaker: String,
    label: String,
    text: Vec<f64>,
    audio: Vec<f64>,
    visual: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonConversation {
    id: String,
    utterances: Vec<JsonUtterance>,
}

/// Convert JSON-lines interchange data into a [`Dataset`].
///
/// When `vocab_from` is given, its speaker vocabulary is reused and unknown
/// speakers map to the UNK slot; otherwise the vocabulary is built from the
/// input in order of first appearance. Labels must always resolve.
pub fn convert_jsonl(
    reader: impl Read,
    name: &str,
    label_names: Option<Vec<String>>,
    vocab_from: Option<&DatasetHeader>,
) -> Result<Dataset> {
    let reader = BufReader::new(reader);
    let mut conversations = Vec::new();
    let mut dims: Option<(usize, usize, usize)> = None;

    let mut labels: Vec<String> = label_names.unwrap_or_default();
    let labels_fixed = !labels.is_empty();
    let mut speakers: Vec<String> = vocab_from
        .map(|h| h.speaker_vocab.clone())
        .unwrap_or_default();
    let vocab_fixed = vocab_from.is_some();
    let mut speaker_ids: HashMap<String, usize> = speakers
        .iter()
        .enumerate()
        .map(|(i, s)| (s.clone(), i))
        .collect();
    let mut label_ids: HashMap<String, usize> = labels
        .iter()
        .enumerate()
        .map(|(i, s)| (s.clone(), i))
        .collect();

    for (line_no, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let jc: JsonConversation = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("line {}: {e}", line_no + 1)))?;
        let mut utterances = Vec::with_capacity(jc.utterances.len());
        for (ui, ju) in jc.utterances.into_iter().enumerate() {
            let d = (ju.text.len(), ju.audio.len(), ju.visual.len());
            match dims {
                None => dims = Some(d),
                Some(expect) if expect != d => {
                    return Err(Error::Data(format!(
                        "line {} utterance {ui}: dims {d:?} differ from first record {expect:?}",
                        line_no + 1
                    )));
                }
                _ => {}
            }
            let label = match label_ids.get(&ju.label) {
                Some(&i) => i,
                None if labels_fixed => {
                    return Err(Error::Data(format!(
                        "line {} utterance {ui}: unknown label {:?}",
                        line_no + 1,
                        ju.label
                    )));
                }
                None => {
                    labels.push(ju.label.clone());
                    label_ids.insert(ju.label, labels.len() - 1);
                    labels.len() - 1
                }
            };
            let speaker = match speaker_ids.get(&ju.speaker) {
                Some(&i) => i,
                None if vocab_fixed => speakers.len(), // UNK slot
                None => {
                    speakers.push(ju.speaker.clone());
                    speaker_ids.insert(ju.speaker, speakers.len() - 1);
                    speakers.len() - 1
                }
            };
            utterances.push(Utterance {
                text: ju.text,
                audio: ju.audio,
                visual: ju.visual,
                speaker,
                label,
            });
        }
        conversations.push(Conversation {
            id: jc.id,
            utterances,
        });
    }

    let (d_text, d_audio, d_visual) =
        dims.ok_or_else(|| Error::Data("dataset must contain >=1 conversation".into()))?;
    let dataset = Dataset {
        header: DatasetHeader {
            name: name.to_string(),
            d_text,
            d_audio,
            d_visual,
            num_classes: labels.len(),
            label_names: labels,
            speaker_vocab: speakers,
        },
        conversations,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Write a dataset back out as JSON-lines interchange.
pub fn export_jsonl(dataset: &Dataset, mut writer: impl Write) -> Result<()> {
    let unk = "UNK".to_string();
    for conv in &dataset.conversations {
        let jc = JsonConversation {
            id: conv.id.clone(),
            utterances: conv
                .utterances
                .iter()
                .map(|u| JsonUtterance {
                    speaker: dataset
                        .header
                        .speaker_vocab
                        .get(u.speaker)
                        .unwrap_or(&unk)
                        .clone(),
                    label: dataset.header.label_names[u.label].clone(),
                    text: u.text.clone(),
                    audio: u.audio.clone(),
                    visual: u.visual.clone(),
                })
                .collect(),
        };
        writeln!(writer, "{}", serde_json::to_string(&jc)?)?;
    }
    Ok(())
}
