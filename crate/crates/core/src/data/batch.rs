//! Whole-conversation batching with zero padding and key-padding masks.

use crate::data::{Conversation, Dataset, DatasetHeader, Modality};
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// A batch of whole conversations padded to the longest member. Feature
/// tensors are `[b, n_max, d_m]`; the mask is true exactly on real
/// utterances and padded features are zero.
#[derive(Debug, Clone)]
pub struct Batch {
    pub text: Tensor,
    pub audio: Tensor,
    pub visual: Tensor,
    pub mask: Vec<Vec<bool>>,
    pub labels: Vec<Vec<usize>>,
    pub speakers: Vec<Vec<usize>>,
    pub conv_ids: Vec<String>,
    pub n_max: usize,
}

/// One conversation's padded slice of a batch: the model's forward input.
#[derive(Debug, Clone)]
pub struct ConvView {
    pub text: Tensor,
    pub audio: Tensor,
    pub visual: Tensor,
    pub mask: Vec<bool>,
    pub labels: Vec<usize>,
    pub speakers: Vec<usize>,
}

impl ConvView {
    pub fn features(&self, m: Modality) -> &Tensor {
        match m {
            Modality::Text => &self.text,
            Modality::Audio => &self.audio,
            Modality::Visual => &self.visual,
        }
    }

    /// Number of real (unpadded) utterances.
    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Unpadded view of a single conversation.
    pub fn from_conversation(conv: &Conversation, header: &DatasetHeader) -> Result<Self> {
        let n = conv.len();
        let pack = |m: Modality| -> Result<Tensor> {
            let d = header.dim(m);
            let mut data = Vec::with_capacity(n * d);
            for u in &conv.utterances {
                data.extend_from_slice(u.features(m));
            }
            Tensor::new(vec![n, d], data)
        };
        Ok(ConvView {
            text: pack(Modality::Text)?,
            audio: pack(Modality::Audio)?,
            visual: pack(Modality::Visual)?,
            mask: vec![true; n],
            labels: conv.utterances.iter().map(|u| u.label).collect(),
            speakers: conv.utterances.iter().map(|u| u.speaker).collect(),
        })
    }
}

impl Batch {
    pub fn size(&self) -> usize {
        self.conv_ids.len()
    }

    /// Padded `[n_max x d]` per-conversation view for member `b`.
    pub fn view(&self, b: usize) -> ConvView {
        let slice = |t: &Tensor| -> Tensor {
            let d = t.shape()[2];
            let start = b * self.n_max * d;
            Tensor::new(
                vec![self.n_max, d],
                t.data()[start..start + self.n_max * d].to_vec(),
            )
            .expect("batch slice shape")
        };
        ConvView {
            text: slice(&self.text),
            audio: slice(&self.audio),
            visual: slice(&self.visual),
            mask: self.mask[b].clone(),
            labels: self.labels[b].clone(),
            speakers: self.speakers[b].clone(),
        }
    }
}

fn build_batch(convs: &[&Conversation], header: &DatasetHeader) -> Result<Batch> {
    let b = convs.len();
    let n_max = convs.iter().map(|c| c.len()).max().unwrap_or(0);
    let pack = |m: Modality| -> Result<Tensor> {
        let d = header.dim(m);
        let mut data = vec![0.0; b * n_max * d];
        for (bi, conv) in convs.iter().enumerate() {
            for (ui, u) in conv.utterances.iter().enumerate() {
                let start = (bi * n_max + ui) * d;
                data[start..start + d].copy_from_slice(u.features(m));
            }
        }
        Tensor::new(vec![b, n_max, d], data)
    };
    let pad_to = |f: &dyn Fn(&crate::data::Utterance) -> usize| -> Vec<Vec<usize>> {
        convs
            .iter()
            .map(|c| {
                let mut xs: Vec<usize> = c.utterances.iter().map(f).collect();
                xs.resize(n_max, 0);
                xs
            })
            .collect()
    };
    Ok(Batch {
        text: pack(Modality::Text)?,
        audio: pack(Modality::Audio)?,
        visual: pack(Modality::Visual)?,
        mask: convs
            .iter()
            .map(|c| {
                let mut m = vec![true; c.len()];
                m.resize(n_max, false);
                m
            })
            .collect(),
        labels: pad_to(&|u| u.label),
        speakers: pad_to(&|u| u.speaker),
        conv_ids: convs.iter().map(|c| c.id.clone()).collect(),
        n_max,
    })
}

/// Group conversations into batches of `batch_size`, optionally shuffled
/// (deterministically, from the given rng) before grouping.
pub fn make_batches(
    dataset: &Dataset,
    indices: &[usize],
    batch_size: usize,
    shuffle: Option<&mut Rng>,
) -> Result<Vec<Batch>> {
    assert!(batch_size >= 1);
    let mut order: Vec<usize> = indices.to_vec();
    if let Some(rng) = shuffle {
        rng.shuffle(&mut order);
    }
    order
        .chunks(batch_size)
        .map(|chunk| {
            let convs: Vec<&Conversation> =
                chunk.iter().map(|&i| &dataset.conversations[i]).collect();
            build_batch(&convs, &dataset.header)
        })
        .collect()
}
