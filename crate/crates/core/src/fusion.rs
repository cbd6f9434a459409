//! Hierarchical fusion of the encoded modality grid.
//!
//! Stage one (per target modality): each source representation is sigmoid-
//! gated, the gated sources are concatenated (target pair first, then the
//! remaining modalities in canonical order), and an affine map brings the
//! concatenation back to `[n x d]`. Stage two: a shared weight projects each
//! enhanced modality, a per-dimension softmax across modalities turns the
//! projections into convex weights, and the weighted sum is the fused
//! sequence.
//!
//! `Add` and `Concat` are drop-in baselines: elementwise sum at both stages,
//! and concat-plus-affine at both stages, respectively.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{Modality, ALL_MODALITIES};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::{Axis, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    #[default]
    Gated,
    Add,
    Concat,
}

#[derive(Debug, Clone)]
pub struct GatedFusion {
    /// Sigmoid gate weights, keyed (source, target). Cross-pair gates are
    /// absent when inter-modal encoding is ablated.
    pub gates: BTreeMap<(Modality, Modality), ParamId>,
    pub uni_w: BTreeMap<Modality, ParamId>,
    pub uni_b: BTreeMap<Modality, ParamId>,
    /// Shared projection for the modality-weight softmax.
    pub multi_w: ParamId,
}

#[derive(Debug, Clone)]
pub struct ConcatFusion {
    pub uni_w: BTreeMap<Modality, ParamId>,
    pub uni_b: BTreeMap<Modality, ParamId>,
    pub cat_w: ParamId,
    pub cat_b: ParamId,
}

#[derive(Debug, Clone)]
pub enum Fusion {
    Gated(GatedFusion),
    Add,
    Concat(ConcatFusion),
}

/// Source order for target `m`: the intra pair first, then the others in
/// canonical t, a, v order.
pub fn source_order(modalities: &[Modality], target: Modality) -> Vec<Modality> {
    let mut order = vec![target];
    order.extend(modalities.iter().copied().filter(|&m| m != target));
    order
}

impl Fusion {
    pub fn init(
        kind: FusionKind,
        store: &mut ParamStore,
        modalities: &[Modality],
        d: usize,
        no_inter: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let k = modalities.len();
        match kind {
            FusionKind::Add => Ok(Fusion::Add),
            FusionKind::Gated => {
                let mut gates = BTreeMap::new();
                for &dst in modalities {
                    for &src in modalities {
                        if src != dst && no_inter {
                            continue;
                        }
                        let name = format!("fusion.gate.{}_to_{}", src.short(), dst.short());
                        gates.insert((src, dst), store.add_uniform(&name, vec![d, d], d, rng)?);
                    }
                }
                let (uni_w, uni_b) = init_uni(store, modalities, k, d, rng)?;
                let multi_w = store.add_uniform("fusion.multi.w", vec![d, d], d, rng)?;
                Ok(Fusion::Gated(GatedFusion {
                    gates,
                    uni_w,
                    uni_b,
                    multi_w,
                }))
            }
            FusionKind::Concat => {
                let (uni_w, uni_b) = init_uni(store, modalities, k, d, rng)?;
                let cat_w = store.add_uniform("fusion.cat.w", vec![k * d, d], k * d, rng)?;
                let cat_b = store.add_zeros("fusion.cat.b", vec![d])?;
                Ok(Fusion::Concat(ConcatFusion {
                    uni_w,
                    uni_b,
                    cat_w,
                    cat_b,
                }))
            }
        }
    }

    /// Enhanced representation of `target` from the encoded pair grid.
    pub fn unimodal(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        encoded: &BTreeMap<(Modality, Modality), Var>,
        modalities: &[Modality],
        target: Modality,
    ) -> Result<Var> {
        let order = source_order(modalities, target);
        let sources: Vec<Var> = order
            .iter()
            .map(|&src| {
                encoded.get(&(src, target)).copied().ok_or_else(|| {
                    Error::Usage(format!("missing encoded pair {src} -> {target}"))
                })
            })
            .collect::<Result<_>>()?;

        match self {
            Fusion::Add => {
                let mut acc = sources[0];
                for &s in &sources[1..] {
                    acc = tape.add(acc, s)?;
                }
                Ok(acc)
            }
            Fusion::Gated(g) => {
                let mut gated = Vec::with_capacity(sources.len());
                for (&src, &h) in order.iter().zip(&sources) {
                    match g.gates.get(&(src, target)) {
                        Some(&w) => {
                            let w = tape.param(store, w);
                            let logits = tape.matmul(h, w)?;
                            let gate = tape.sigmoid(logits);
                            gated.push(tape.mul(h, gate)?);
                        }
                        // Gate ablated with its encoder pair: pass through.
                        None => gated.push(h),
                    }
                }
                let cat = tape.concat_cols(&gated)?;
                let w = tape.param(store, g.uni_w[&target]);
                let b = tape.param(store, g.uni_b[&target]);
                let out = tape.matmul(cat, w)?;
                tape.add_bias(out, b)
            }
            Fusion::Concat(c) => {
                let cat = tape.concat_cols(&sources)?;
                let w = tape.param(store, c.uni_w[&target]);
                let b = tape.param(store, c.uni_b[&target]);
                let out = tape.matmul(cat, w)?;
                tape.add_bias(out, b)
            }
        }
    }

    /// Fuse the enhanced modalities into one `[n x d]` sequence. For the
    /// gated strategy the per-modality convex weights are also returned.
    pub fn multimodal(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        enhanced: &BTreeMap<Modality, Var>,
        modalities: &[Modality],
    ) -> Result<(Var, Option<BTreeMap<Modality, Var>>)> {
        let vars: Vec<Var> = modalities.iter().map(|m| enhanced[m]).collect();
        match self {
            Fusion::Add => {
                let mut acc = vars[0];
                for &v in &vars[1..] {
                    acc = tape.add(acc, v)?;
                }
                Ok((acc, None))
            }
            Fusion::Concat(c) => {
                let cat = tape.concat_cols(&vars)?;
                let w = tape.param(store, c.cat_w);
                let b = tape.param(store, c.cat_b);
                let out = tape.matmul(cat, w)?;
                Ok((tape.add_bias(out, b)?, None))
            }
            Fusion::Gated(g) => {
                let (n, d) = {
                    let t = tape.value(vars[0]);
                    (t.rows(), t.cols())
                };
                let w = tape.param(store, g.multi_w);
                // Stack the per-modality projections as rows of a
                // [k x (n*d)] matrix and softmax each column, giving convex
                // weights per utterance-dimension pair.
                let mut rows = Vec::with_capacity(vars.len());
                for &h in &vars {
                    let z = tape.matmul(h, w)?;
                    rows.push(tape.reshape(z, vec![1, n * d])?);
                }
                let stacked = tape.concat_rows(&rows)?;
                let weights = tape.softmax(stacked, Axis::Cols)?;

                let mut gates = BTreeMap::new();
                let mut fused: Option<Var> = None;
                for (i, (&m, &h)) in modalities.iter().zip(&vars).enumerate() {
                    let row = tape.slice_rows(weights, i, 1)?;
                    let gate = tape.reshape(row, vec![n, d])?;
                    gates.insert(m, gate);
                    let term = tape.mul(h, gate)?;
                    fused = Some(match fused {
                        None => term,
                        Some(acc) => tape.add(acc, term)?,
                    });
                }
                Ok((fused.expect("at least one modality"), Some(gates)))
            }
        }
    }
}

fn init_uni(
    store: &mut ParamStore,
    modalities: &[Modality],
    k: usize,
    d: usize,
    rng: &mut Rng,
) -> Result<(BTreeMap<Modality, ParamId>, BTreeMap<Modality, ParamId>)> {
    let mut uni_w = BTreeMap::new();
    let mut uni_b = BTreeMap::new();
    for &m in modalities {
        uni_w.insert(
            m,
            store.add_uniform(
                &format!("fusion.uni.{}.w", m.short()),
                vec![k * d, d],
                k * d,
                rng,
            )?,
        );
        uni_b.insert(
            m,
            store.add_zeros(&format!("fusion.uni.{}.b", m.short()), vec![d])?,
        );
    }
    Ok((uni_w, uni_b))
}

/// Per-utterance modality weights: the mean over feature dimensions of each
/// gate row. The three weights are non-negative and sum to 1 per utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateSummary {
    pub utterance: usize,
    pub w_text: f64,
    pub w_audio: f64,
    pub w_visual: f64,
}

pub fn summarize_gates(
    tape: &Tape,
    gates: &BTreeMap<Modality, Var>,
    mask: &[bool],
) -> Vec<GateSummary> {
    let mut out = Vec::new();
    for (i, &real) in mask.iter().enumerate() {
        if !real {
            continue;
        }
        let mut summary = GateSummary {
            utterance: i,
            w_text: 0.0,
            w_audio: 0.0,
            w_visual: 0.0,
        };
        for m in ALL_MODALITIES {
            let Some(&gate) = gates.get(&m) else {
                continue;
            };
            let t = tape.value(gate);
            let d = t.cols();
            let mean = (0..d).map(|j| t.get2(i, j)).sum::<f64>() / d as f64;
            match m {
                Modality::Text => summary.w_text = mean,
                Modality::Audio => summary.w_audio = mean,
                Modality::Visual => summary.w_visual = mean,
            }
        }
        out.push(summary);
    }
    out
}
