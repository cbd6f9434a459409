//! The full model: per-modality convolution into the shared space, positional
//! and speaker augmentation, the pair grid of transformers, hierarchical
//! fusion, and the teacher/student classifier heads.

use std::collections::BTreeMap;

use crate::config::ModelConfig;
use crate::data::batch::ConvView;
use crate::data::{DatasetHeader, Modality};
use crate::embeddings::{augment, PositionalTable, SpeakerTable};
use crate::encoder::{AttnRecord, ConvProjector, ModalityEncoder, TransformerBlock};
use crate::error::{Error, Result};
use crate::heads::{ClassifierHead, StudentOut};
use crate::fusion::{Fusion, FusionKind};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub header: DatasetHeader,
    pub params: ParamStore,
    convs: BTreeMap<Modality, ConvProjector>,
    pos: PositionalTable,
    speaker: SpeakerTable,
    pub encoder: ModalityEncoder,
    pub fusion: Fusion,
    pub teacher: ClassifierHead,
    pub students: BTreeMap<Modality, ClassifierHead>,
}

/// Everything a forward pass exposes for losses, prediction, and export.
#[derive(Debug, Clone)]
pub struct ForwardOut {
    pub teacher_logits: Var,
    pub teacher_probs: Var,
    pub fused: Var,
    pub enhanced: BTreeMap<Modality, Var>,
    pub students: BTreeMap<Modality, StudentOut>,
    pub gates: Option<BTreeMap<Modality, Var>>,
    pub attn: Vec<AttnRecord>,
}

impl Model {
    /// Build a model with freshly initialized parameters. Parameter creation
    /// order (and therefore the RNG draw order) is: convolutions in t, a, v
    /// order, speaker table, transformer grid, fusion, teacher, students.
    pub fn new(cfg: ModelConfig, header: &DatasetHeader, init_rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        header.validate()?;
        let modalities = cfg.canonical_modalities();
        let d = cfg.d_model;
        let mut params = ParamStore::new();

        let mut convs = BTreeMap::new();
        for &m in &modalities {
            convs.insert(
                m,
                ConvProjector::init(
                    &mut params,
                    &format!("conv.{}", m.short()),
                    cfg.kernel(m),
                    header.dim(m),
                    d,
                    init_rng,
                )?,
            );
        }

        let pos = PositionalTable::new(cfg.max_len, d)?;
        let speaker = SpeakerTable::init(
            &mut params,
            "embeddings.speaker",
            d,
            header.speaker_vocab.len(),
            init_rng,
        )?;

        let encoder = ModalityEncoder::init(
            &mut params,
            &modalities,
            d,
            cfg.heads,
            cfg.d_ff,
            cfg.layers,
            cfg.no_intra,
            cfg.no_inter,
            cfg.dropout,
            cfg.ln_eps,
            init_rng,
        )?;

        let fusion = Fusion::init(
            cfg.fusion,
            &mut params,
            &modalities,
            d,
            cfg.no_inter,
            init_rng,
        )?;

        let teacher = ClassifierHead::init(
            &mut params,
            "teacher",
            d,
            header.num_classes,
            init_rng,
        )?;
        let mut students = BTreeMap::new();
        for &m in &modalities {
            students.insert(
                m,
                ClassifierHead::init(
                    &mut params,
                    &format!("student.{}", m.short()),
                    d,
                    header.num_classes,
                    init_rng,
                )?,
            );
        }

        Ok(Model {
            cfg,
            header: header.clone(),
            params,
            convs,
            pos,
            speaker,
            encoder,
            fusion,
            teacher,
            students,
        })
    }

    pub fn modalities(&self) -> Vec<Modality> {
        self.cfg.canonical_modalities()
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// Grow the positional table to cover conversations of length `n`.
    pub fn ensure_len(&mut self, n: usize) -> Result<()> {
        self.pos.ensure_capacity(n)
    }

    /// One conversation's forward pass on `tape`.
    ///
    /// `rng` enables training mode (dropout); `with_students` computes the
    /// per-modality student heads; `collect_attn` captures attention weights.
    pub fn forward(
        &self,
        tape: &mut Tape,
        view: &ConvView,
        rng: Option<&mut Rng>,
        with_students: bool,
        collect_attn: bool,
    ) -> Result<ForwardOut> {
        let modalities = self.modalities();
        let n = view.mask.len();
        if view.labels.len() != n || view.speakers.len() != n {
            return Err(Error::Usage(
                "conversation view fields have inconsistent lengths".into(),
            ));
        }

        // Shared positional and speaker rows, added to every modality.
        let pe = if self.cfg.no_positional {
            None
        } else {
            Some(tape.constant(self.pos.rows(n)?))
        };
        let se = if self.cfg.no_speaker {
            None
        } else {
            Some(self.speaker.embed(tape, &self.params, &view.speakers)?)
        };

        let mut inputs = BTreeMap::new();
        for &m in &modalities {
            let feats = view.features(m);
            if feats.cols() != self.header.dim(m) {
                return Err(Error::Shape(format!(
                    "{m} features have dim {}, model expects {}",
                    feats.cols(),
                    self.header.dim(m)
                )));
            }
            let x = tape.constant(feats.clone());
            let projected = self.convs[&m].forward(tape, &self.params, x)?;
            inputs.insert(m, augment(tape, projected, pe, se)?);
        }

        let mut attn = Vec::new();
        let encoded = self.encoder.encode_all(
            tape,
            &self.params,
            &inputs,
            &view.mask,
            rng,
            collect_attn.then_some(&mut attn),
        )?;

        let mut enhanced = BTreeMap::new();
        for &m in &modalities {
            enhanced.insert(
                m,
                self.fusion
                    .unimodal(tape, &self.params, &encoded, &modalities, m)?,
            );
        }
        let (fused, gates) = self
            .fusion
            .multimodal(tape, &self.params, &enhanced, &modalities)?;

        let (teacher_logits, teacher_probs) =
            self.teacher.teacher_forward(tape, &self.params, fused)?;

        let mut students = BTreeMap::new();
        if with_students {
            for &m in &modalities {
                students.insert(
                    m,
                    self.students[&m].student_forward(
                        tape,
                        &self.params,
                        enhanced[&m],
                        self.cfg.temperature,
                    )?,
                );
            }
        }

        Ok(ForwardOut {
            teacher_logits,
            teacher_probs,
            fused,
            enhanced,
            students,
            gates,
            attn,
        })
    }

    /// Teacher argmax over the real (unmasked) utterances.
    pub fn predict(&self, view: &ConvView) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, view, None, false, false)?;
        let probs = tape.value(out.teacher_probs);
        let c = probs.cols();
        let mut preds = Vec::new();
        for (i, &real) in view.mask.iter().enumerate() {
            if !real {
                continue;
            }
            let row = (0..c).max_by(|&a, &b| {
                probs
                    .get2(i, a)
                    .partial_cmp(&probs.get2(i, b))
                    .expect("finite probabilities")
            });
            preds.push(row.expect("at least one class"));
        }
        Ok(preds)
    }
}

/// Closed-form scalar parameter count for a configuration; kept in lockstep
/// with `Model::new` so structural ablations can be asserted exactly.
pub fn analytic_param_count(cfg: &ModelConfig, header: &DatasetHeader) -> usize {
    let d = cfg.d_model;
    let c = header.num_classes;
    let modalities = cfg.canonical_modalities();
    let k = modalities.len();

    let conv: usize = modalities
        .iter()
        .map(|&m| ConvProjector::param_count(cfg.kernel(m), header.dim(m), d))
        .sum();
    let speaker = d * (header.speaker_vocab.len() + 1);

    let intra_pairs = if cfg.no_intra { 0 } else { k };
    let inter_pairs = if cfg.no_inter { 0 } else { k * (k - 1) };
    let blocks =
        (intra_pairs + inter_pairs) * cfg.layers * TransformerBlock::param_count(d, cfg.d_ff);

    let fusion = match cfg.fusion {
        FusionKind::Add => 0,
        FusionKind::Gated => {
            let gate_pairs = k + if cfg.no_inter { 0 } else { k * (k - 1) };
            gate_pairs * d * d + k * (k * d * d + d) + d * d
        }
        FusionKind::Concat => k * (k * d * d + d) + (k * d * d + d),
    };

    let heads = (d * c + c) * (1 + k); // teacher plus one student per modality

    conv + speaker + blocks + fusion + heads
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate, SynthSpec};
    use crate::data::ALL_MODALITIES;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            heads: 2,
            d_ff: 8,
            dropout: 0.0,
            max_len: 16,
            ..ModelConfig::default()
        }
    }

    fn tiny_setup() -> (Model, crate::data::Dataset) {
        let spec = SynthSpec {
            n_conversations: 2,
            len_range: (3, 3),
            dims: (5, 6, 4),
            n_classes: 3,
            ..SynthSpec::default()
        };
        let (dataset, _) = generate(&spec, 11).unwrap();
        let mut rng = Rng::new(0);
        let model = Model::new(tiny_cfg(), &dataset.header, &mut rng).unwrap();
        (model, dataset)
    }

    #[test]
    fn analytic_count_matches_constructed_params() {
        let (model, dataset) = tiny_setup();
        assert_eq!(
            model.param_count(),
            analytic_param_count(&model.cfg, &dataset.header)
        );

        // Every structural variant stays in lockstep.
        for mutate in [
            |c: &mut ModelConfig| c.no_intra = true,
            |c: &mut ModelConfig| c.no_inter = true,
            |c: &mut ModelConfig| c.fusion = FusionKind::Add,
            |c: &mut ModelConfig| c.fusion = FusionKind::Concat,
            |c: &mut ModelConfig| c.modalities = vec![Modality::Text],
            |c: &mut ModelConfig| c.modalities = vec![Modality::Audio, Modality::Visual],
            |c: &mut ModelConfig| c.layers = 2,
        ] {
            let mut cfg = tiny_cfg();
            mutate(&mut cfg);
            let mut rng = Rng::new(1);
            let model = Model::new(cfg.clone(), &dataset.header, &mut rng).unwrap();
            assert_eq!(
                model.param_count(),
                analytic_param_count(&cfg, &dataset.header),
                "mismatch for {cfg:?}"
            );
        }
    }

    #[test]
    fn ablation_param_deltas_are_exact() {
        let (model, dataset) = tiny_setup();
        let full = model.param_count();
        let d = model.cfg.d_model;
        let block = TransformerBlock::param_count(d, model.cfg.d_ff);

        let mut no_intra = tiny_cfg();
        no_intra.no_intra = true;
        let mut rng = Rng::new(2);
        let m = Model::new(no_intra, &dataset.header, &mut rng).unwrap();
        assert_eq!(full - m.param_count(), 3 * block);

        let mut no_inter = tiny_cfg();
        no_inter.no_inter = true;
        let mut rng = Rng::new(3);
        let m = Model::new(no_inter, &dataset.header, &mut rng).unwrap();
        assert_eq!(full - m.param_count(), 6 * block + 6 * d * d);
    }

    #[test]
    fn forward_shapes_and_prediction_lengths() {
        let (model, dataset) = tiny_setup();
        let view =
            ConvView::from_conversation(&dataset.conversations[0], &dataset.header).unwrap();
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &view, None, true, true).unwrap();
        let n = view.mask.len();
        assert_eq!(tape.value(out.fused).shape(), &[n, 8]);
        assert_eq!(
            tape.value(out.teacher_probs).shape(),
            &[n, dataset.header.num_classes]
        );
        assert_eq!(out.students.len(), 3);
        assert_eq!(out.enhanced.len(), 3);
        // 9 pairs x 1 layer x 2 heads of attention captured.
        assert_eq!(out.attn.len(), 18);
        assert!(out.gates.is_some());

        let preds = model.predict(&view).unwrap();
        assert_eq!(preds.len(), n);
        assert!(preds.iter().all(|&p| p < dataset.header.num_classes));
    }

    #[test]
    fn modality_subset_runs_only_its_paths() {
        let spec = SynthSpec {
            n_conversations: 1,
            len_range: (2, 2),
            dims: (5, 6, 4),
            n_classes: 3,
            ..SynthSpec::default()
        };
        let (dataset, _) = generate(&spec, 13).unwrap();
        let mut cfg = tiny_cfg();
        cfg.modalities = vec![Modality::Text];
        let mut rng = Rng::new(4);
        let model = Model::new(cfg, &dataset.header, &mut rng).unwrap();
        assert_eq!(model.encoder.blocks.len(), 1);
        assert_eq!(model.students.len(), 1);

        let view =
            ConvView::from_conversation(&dataset.conversations[0], &dataset.header).unwrap();
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &view, None, true, false).unwrap();
        assert_eq!(out.enhanced.len(), 1);
        // With one modality the fused sequence is that modality's enhanced
        // representation (softmax over a singleton is 1).
        assert!(
            tape.value(out.fused)
                .max_abs_diff(tape.value(out.enhanced[&Modality::Text]))
                < 1e-12
        );
    }

    #[test]
    fn eval_forward_ignores_student_heads() {
        let (mut model, dataset) = tiny_setup();
        let view =
            ConvView::from_conversation(&dataset.conversations[0], &dataset.header).unwrap();
        let before = model.predict(&view).unwrap();

        // Randomizing student parameters cannot change evaluation outputs.
        let mut rng = Rng::new(99);
        for m in ALL_MODALITIES {
            let head = model.students[&m].clone();
            for id in [head.w, head.b] {
                let shape = model.params.value(id).shape().to_vec();
                let numel: usize = shape.iter().product();
                let noise: Vec<f64> = (0..numel).map(|_| rng.normal()).collect();
                *model.params.value_mut(id) =
                    crate::tensor::Tensor::new(shape, noise).unwrap();
            }
        }
        let after = model.predict(&view).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let (model, dataset) = tiny_setup();
        let view =
            ConvView::from_conversation(&dataset.conversations[0], &dataset.header).unwrap();
        assert_eq!(model.predict(&view).unwrap(), model.predict(&view).unwrap());
    }

    #[test]
    fn positional_table_grows_on_demand() {
        let (mut model, dataset) = tiny_setup();
        assert!(model.ensure_len(64).is_ok());
        let view =
            ConvView::from_conversation(&dataset.conversations[0], &dataset.header).unwrap();
        assert!(model.predict(&view).is_ok());
    }
}
