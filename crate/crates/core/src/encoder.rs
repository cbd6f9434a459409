//! Modality encoding: temporal convolution into the shared space, then one
//! transformer encoder per (source, target) modality pair. The intra pair
//! (m, m) self-attends; a cross pair (n, m) takes queries from m and
//! keys/values from n, yielding the n-enhanced m representation.

use std::collections::BTreeMap;

use crate::data::Modality;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::{Tape, Var};

/// 1-D convolution projecting `[n x d_m]` features to the common `[n x d]`.
#[derive(Debug, Clone)]
pub struct ConvProjector {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub k: usize,
}

impl ConvProjector {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        k: usize,
        d_in: usize,
        d_out: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if k.is_multiple_of(2) {
            return Err(Error::Config(format!("conv kernel size {k} must be odd")));
        }
        let kernel = store.add_uniform(
            &format!("{prefix}.kernel"),
            vec![k, d_in, d_out],
            k * d_in,
            rng,
        )?;
        let bias = store.add_zeros(&format!("{prefix}.bias"), vec![d_out])?;
        Ok(ConvProjector { kernel, bias, k })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let kernel = tape.param(store, self.kernel);
        let bias = tape.param(store, self.bias);
        tape.conv1d_same(x, kernel, bias)
    }

    pub fn param_count(k: usize, d_in: usize, d_out: usize) -> usize {
        k * d_in * d_out + d_out
    }
}

/// Post-norm transformer encoder layer: multi-head scaled dot-product
/// attention and a ReLU feed-forward pair, each wrapped in
/// dropout-residual-layernorm. Projections carry no biases.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub w1: ParamId,
    pub w2: ParamId,
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
    pub heads: usize,
    pub d: usize,
}

impl TransformerBlock {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        heads: usize,
        d_ff: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "hidden size {d} not divisible by {heads} heads"
            )));
        }
        let mat = |name: &str, rows: usize, cols: usize, store: &mut ParamStore, rng: &mut Rng| {
            store.add_uniform(&format!("{prefix}.{name}"), vec![rows, cols], rows, rng)
        };
        Ok(TransformerBlock {
            wq: mat("wq", d, d, store, rng)?,
            wk: mat("wk", d, d, store, rng)?,
            wv: mat("wv", d, d, store, rng)?,
            wo: mat("wo", d, d, store, rng)?,
            w1: mat("ffn.w1", d, d_ff, store, rng)?,
            w2: mat("ffn.w2", d_ff, d, store, rng)?,
            ln1_gamma: store.add_full(&format!("{prefix}.ln1.gamma"), vec![d], 1.0)?,
            ln1_beta: store.add_zeros(&format!("{prefix}.ln1.beta"), vec![d])?,
            ln2_gamma: store.add_full(&format!("{prefix}.ln2.gamma"), vec![d], 1.0)?,
            ln2_beta: store.add_zeros(&format!("{prefix}.ln2.beta"), vec![d])?,
            heads,
            d,
        })
    }

    /// Scalar parameters per block: `4 d^2` attention, `2 d d_ff` FFN, and
    /// two layer-norm affine pairs.
    pub fn param_count(d: usize, d_ff: usize) -> usize {
        4 * d * d + 2 * d * d_ff + 4 * d
    }

    /// Multi-head attention of `q_in` over `kv_in`. Returns the output and
    /// the per-head attention weights (pre-dropout), each `[t_q x t_k]`.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        q_in: Var,
        kv_in: Var,
        key_valid: &[bool],
        dropout: f64,
        mut rng: Option<&mut Rng>,
    ) -> Result<(Var, Vec<Var>)> {
        let wq = tape.param(store, self.wq);
        let wk = tape.param(store, self.wk);
        let wv = tape.param(store, self.wv);
        let wo = tape.param(store, self.wo);

        let q = tape.matmul(q_in, wq)?;
        let k = tape.matmul(kv_in, wk)?;
        let v = tape.matmul(kv_in, wv)?;

        let dh = self.d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outputs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let logits = tape.matmul(qh, kt)?;
            let logits = tape.scale(logits, scale);
            let attn = tape.masked_softmax_rows(logits, key_valid)?;
            weights.push(attn);
            let attn = match rng.as_deref_mut() {
                Some(r) => tape.dropout(attn, dropout, r)?,
                None => attn,
            };
            outputs.push(tape.matmul(attn, vh)?);
        }
        let cat = tape.concat_cols(&outputs)?;
        Ok((tape.matmul(cat, wo)?, weights))
    }

    /// Full encoder layer (post-norm):
    /// `x = LN(q_in + Drop(Attn)); out = LN(x + Drop(FFN(x)))`.
    #[allow(clippy::too_many_arguments)]
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        q_in: Var,
        kv_in: Var,
        key_valid: &[bool],
        dropout: f64,
        mut rng: Option<&mut Rng>,
        ln_eps: f64,
    ) -> Result<(Var, Vec<Var>)> {
        let (attn, attn_weights) =
            self.attention(tape, store, q_in, kv_in, key_valid, dropout, rng.as_deref_mut())?;
        let attn = match rng.as_deref_mut() {
            Some(r) => tape.dropout(attn, dropout, r)?,
            None => attn,
        };
        let res1 = tape.add(q_in, attn)?;
        let g1 = tape.param(store, self.ln1_gamma);
        let b1 = tape.param(store, self.ln1_beta);
        let x = tape.layer_norm(res1, g1, b1, ln_eps)?;

        let w1 = tape.param(store, self.w1);
        let w2 = tape.param(store, self.w2);
        let hidden = tape.matmul(x, w1)?;
        let hidden = tape.relu(hidden);
        let ffn = tape.matmul(hidden, w2)?;
        let ffn = match rng {
            Some(r) => tape.dropout(ffn, dropout, r)?,
            None => ffn,
        };
        let res2 = tape.add(x, ffn)?;
        let g2 = tape.param(store, self.ln2_gamma);
        let b2 = tape.param(store, self.ln2_beta);
        let out = tape.layer_norm(res2, g2, b2, ln_eps)?;
        Ok((out, attn_weights))
    }
}

/// Attention weights captured during a forward pass, for export.
#[derive(Debug, Clone)]
pub struct AttnRecord {
    pub src: Modality,
    pub dst: Modality,
    pub layer: usize,
    pub head: usize,
    pub weights: crate::tensor::Tensor,
}

/// The grid of per-pair transformer stacks. A pair without a stack (ablated)
/// passes the target modality's input through unchanged.
#[derive(Debug, Clone)]
pub struct ModalityEncoder {
    /// Keyed by (source, target); each entry is a stack of `layers` blocks.
    pub blocks: BTreeMap<(Modality, Modality), Vec<TransformerBlock>>,
    pub dropout: f64,
    pub ln_eps: f64,
}

impl ModalityEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        modalities: &[Modality],
        d: usize,
        heads: usize,
        d_ff: usize,
        layers: usize,
        no_intra: bool,
        no_inter: bool,
        dropout: f64,
        ln_eps: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut blocks = BTreeMap::new();
        for &dst in modalities {
            for &src in modalities {
                let intra = src == dst;
                if (intra && no_intra) || (!intra && no_inter) {
                    continue;
                }
                let mut stack = Vec::with_capacity(layers);
                for layer in 0..layers {
                    stack.push(TransformerBlock::init(
                        store,
                        &format!("encoder.{}_to_{}.layer{layer}", src.short(), dst.short()),
                        d,
                        heads,
                        d_ff,
                        rng,
                    )?);
                }
                blocks.insert((src, dst), stack);
            }
        }
        Ok(ModalityEncoder {
            blocks,
            dropout,
            ln_eps,
        })
    }

    /// Encode every (source, target) pair. `inputs[m]` is the augmented
    /// `[n x d]` sequence of modality m. Keys/values of a stack stay fixed at
    /// the source input across layers; queries chain through the stack.
    #[allow(clippy::too_many_arguments)]
    pub fn encode_all(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        inputs: &BTreeMap<Modality, Var>,
        key_valid: &[bool],
        mut rng: Option<&mut Rng>,
        mut attn_out: Option<&mut Vec<AttnRecord>>,
    ) -> Result<BTreeMap<(Modality, Modality), Var>> {
        let mut encoded = BTreeMap::new();
        for (&dst, &q0) in inputs {
            for (&src, &kv) in inputs {
                let key = (src, dst);
                let var = match self.blocks.get(&key) {
                    None => q0,
                    Some(stack) => {
                        let mut q = q0;
                        for (layer, block) in stack.iter().enumerate() {
                            let (out, weights) = block.encode(
                                tape,
                                store,
                                q,
                                kv,
                                key_valid,
                                self.dropout,
                                rng.as_deref_mut(),
                                self.ln_eps,
                            )?;
                            if let Some(records) = attn_out.as_deref_mut() {
                                for (head, w) in weights.iter().enumerate() {
                                    records.push(AttnRecord {
                                        src,
                                        dst,
                                        layer,
                                        head,
                                        weights: tape.value(*w).clone(),
                                    });
                                }
                            }
                            q = out;
                        }
                        q
                    }
                };
                encoded.insert(key, var);
            }
        }
        Ok(encoded)
    }
}
