//! Sinusoidal positional embeddings and trainable speaker embeddings.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Fixed table of sinusoidal position rows:
/// `table[pos][2i] = sin(pos / 10000^(2i/d))`,
/// `table[pos][2i+1] = cos(pos / 10000^(2i/d))`.
#[derive(Debug, Clone)]
pub struct PositionalTable {
    max_len: usize,
    dim: usize,
    table: Tensor,
}

impl PositionalTable {
    pub fn new(max_len: usize, dim: usize) -> Result<Self> {
        if dim == 0 || !dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "positional embedding dim {dim} must be even and positive"
            )));
        }
        let mut data = vec![0.0; max_len * dim];
        for pos in 0..max_len {
            for i in 0..dim / 2 {
                let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
                data[pos * dim + 2 * i] = angle.sin();
                data[pos * dim + 2 * i + 1] = angle.cos();
            }
        }
        Ok(PositionalTable {
            max_len,
            dim,
            table: Tensor::new(vec![max_len, dim], data)?,
        })
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The first `n` rows as an `[n x d]` tensor.
    pub fn rows(&self, n: usize) -> Result<Tensor> {
        if n > self.max_len {
            return Err(Error::Config(format!(
                "requested {n} positions, table capacity is {}",
                self.max_len
            )));
        }
        Tensor::new(
            vec![n, self.dim],
            self.table.data()[..n * self.dim].to_vec(),
        )
    }

    /// Rebuild (doubling) so at least `n` rows are available. The table is
    /// deterministic, so growing never changes existing rows.
    pub fn ensure_capacity(&mut self, n: usize) -> Result<()> {
        if n <= self.max_len {
            return Ok(());
        }
        let mut cap = self.max_len.max(1);
        while cap < n {
            cap *= 2;
        }
        *self = PositionalTable::new(cap, self.dim)?;
        Ok(())
    }
}

/// Trainable speaker embedding matrix `[d x (num_speakers + 1)]`; the last
/// column is the UNK slot used for speaker ids at or beyond the vocabulary.
#[derive(Debug, Clone)]
pub struct SpeakerTable {
    pub num_speakers: usize,
    pub dim: usize,
    pub table: ParamId,
}

impl SpeakerTable {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        num_speakers: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let cols = num_speakers + 1;
        let table = store.add_uniform(name, vec![dim, cols], cols, rng)?;
        Ok(SpeakerTable {
            num_speakers,
            dim,
            table,
        })
    }

    /// `[n x d]` matrix whose row `i` is the embedding column of
    /// `speaker_ids[i]` (UNK column for out-of-vocabulary ids).
    pub fn embed(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        speaker_ids: &[usize],
    ) -> Result<Var> {
        let clamped: Vec<usize> = speaker_ids
            .iter()
            .map(|&id| id.min(self.num_speakers))
            .collect();
        let table = tape.param(store, self.table);
        tape.column_lookup(table, &clamped)
    }
}

/// `H_m = U'_m + PE + SE`; either embedding term can be withheld (the
/// corresponding ablation zeroes that term).
pub fn augment(tape: &mut Tape, conv: Var, pe: Option<Var>, se: Option<Var>) -> Result<Var> {
    let mut out = conv;
    if let Some(pe) = pe {
        out = tape.add(out, pe)?;
    }
    if let Some(se) = se {
        out = tape.add(out, se)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positional_values_match_formula() {
        let table = PositionalTable::new(8, 4).unwrap();
        let rows = table.rows(2).unwrap();
        assert_eq!(rows.get2(0, 0), 0.0); // sin(0)
        assert_eq!(rows.get2(0, 1), 1.0); // cos(0)
        // Frozen from direct evaluation of sin(1).
        assert!((rows.get2(1, 0) - 0.8414709848078965).abs() < 1e-15);
        assert!(rows.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn positional_rows_are_pairwise_distinct() {
        let table = PositionalTable::new(64, 8).unwrap();
        let rows = table.rows(64).unwrap();
        for a in 0..64 {
            for b in (a + 1)..64 {
                let same = (0..8).all(|j| rows.get2(a, j) == rows.get2(b, j));
                assert!(!same, "rows {a} and {b} identical");
            }
        }
    }

    #[test]
    fn odd_dim_rejected_and_capacity_enforced() {
        assert!(PositionalTable::new(8, 5).is_err());
        let mut table = PositionalTable::new(4, 4).unwrap();
        assert!(table.rows(5).is_err());
        table.ensure_capacity(9).unwrap();
        assert_eq!(table.max_len(), 16);
        assert!(table.rows(9).is_ok());
    }

    #[test]
    fn growing_preserves_existing_rows() {
        let small = PositionalTable::new(4, 6).unwrap();
        let mut grown = small.clone();
        grown.ensure_capacity(32).unwrap();
        let a = small.rows(4).unwrap();
        let b = grown.rows(4).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn speaker_lookup_selects_columns() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(2);
        let table = SpeakerTable::init(&mut store, "speaker", 3, 2, &mut rng).unwrap();

        let mut tape = Tape::new();
        let out = table.embed(&mut tape, &store, &[1, 0, 1, 7]).unwrap();
        let v = tape.value(out).clone();
        let tv = store.value(table.table);
        // Row i equals column id of the table.
        for k in 0..3 {
            assert_eq!(v.get2(0, k), tv.get2(k, 1));
            assert_eq!(v.get2(1, k), tv.get2(k, 0));
            // Same speaker gives identical rows.
            assert_eq!(v.get2(2, k), v.get2(0, k));
            // Out-of-vocabulary id 7 maps to the UNK column (index 2).
            assert_eq!(v.get2(3, k), tv.get2(k, 2));
        }
    }

    #[test]
    fn speaker_gradient_lands_in_looked_up_columns() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(3);
        let table = SpeakerTable::init(&mut store, "speaker", 2, 3, &mut rng).unwrap();

        let mut tape = Tape::new();
        let out = table.embed(&mut tape, &store, &[0, 2]).unwrap();
        let s = tape.sum(out);
        tape.backward(s).unwrap();
        tape.harvest_into(&mut store);
        // Columns 0 and 2 get ones, columns 1 and 3 (UNK) stay zero.
        let g = store.grad(table.table);
        for k in 0..2 {
            assert_eq!(g[k * 4], 1.0);
            assert_eq!(g[k * 4 + 1], 0.0);
            assert_eq!(g[k * 4 + 2], 1.0);
            assert_eq!(g[k * 4 + 3], 0.0);
        }
    }

    #[test]
    fn augment_sums_present_terms() {
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let pe = tape.constant(Tensor::from_rows(&[vec![10.0, 20.0]]).unwrap());
        let se = tape.constant(Tensor::from_rows(&[vec![100.0, 200.0]]).unwrap());

        let all = augment(&mut tape, u, Some(pe), Some(se)).unwrap();
        assert_eq!(tape.value(all).data(), &[111.0, 222.0]);

        // Withheld terms leave the remaining sum exactly.
        let no_se = augment(&mut tape, u, Some(pe), None).unwrap();
        assert_eq!(tape.value(no_se).data(), &[11.0, 22.0]);
        let bare = augment(&mut tape, u, None, None).unwrap();
        assert_eq!(bare, u);
    }
}
