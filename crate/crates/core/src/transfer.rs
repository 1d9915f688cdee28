//! Hidden-size and intermediate-size transfer matrices.
//!
//! The hidden map `W_h` solves `E_o·W_h ≈ E_n` in the least-squares sense over
//! the embedding rows of tokens present in both vocabularies. The intermediate
//! map `W_i = pinv(W_o)·W_h·W_n` is built per mapped layer pair from the
//! up-projection weights, and separately from the transposed down-projection
//! weights.

use std::collections::{BTreeMap, HashMap};

use crate::linalg::{pinv, DEFAULT_RCOND};
use crate::tensor_io::LayerWeights;
use crate::{Error, Matrix, Result};

/// Rows of the two embedding tables that hold the same token string.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VocabAlignment {
    /// `(old row, new row)`, ordered by token string.
    pub pairs: Vec<(usize, usize)>,
}

impl VocabAlignment {
    pub fn shared_count(&self) -> usize {
        self.pairs.len()
    }

    /// Alignment for two models that share one vocabulary verbatim.
    pub fn identity(vocab_size: usize) -> Self {
        VocabAlignment {
            pairs: (0..vocab_size).map(|i| (i, i)).collect(),
        }
    }
}

fn index_vocab<'a>(vocab: &'a [String], which: &str) -> Result<HashMap<&'a str, usize>> {
    let mut index = HashMap::with_capacity(vocab.len());
    for (row, tok) in vocab.iter().enumerate() {
        if index.insert(tok.as_str(), row).is_some() {
            return Err(Error::Vocabulary(format!(
                "{which} vocabulary lists token {tok:?} more than once"
            )));
        }
    }
    Ok(index)
}

/// Exact-string intersection of two vocabularies, sorted by token.
pub fn vocab_intersection(vocab_o: &[String], vocab_n: &[String]) -> Result<VocabAlignment> {
    index_vocab(vocab_o, "old")?;
    let new_index = index_vocab(vocab_n, "new")?;
    let mut shared: Vec<(&str, usize, usize)> = vocab_o
        .iter()
        .enumerate()
        .filter_map(|(i, tok)| new_index.get(tok.as_str()).map(|&j| (tok.as_str(), i, j)))
        .collect();
    if shared.is_empty() {
        return Err(Error::EmptyIntersection);
    }
    shared.sort_unstable_by(|a, b| a.0.cmp(b.0));
    Ok(VocabAlignment {
        pairs: shared.into_iter().map(|(_, i, j)| (i, j)).collect(),
    })
}

fn select_rows(m: &Matrix, rows: impl Iterator<Item = usize>) -> Matrix {
    let rows: Vec<usize> = rows.collect();
    Matrix::from_fn(rows.len(), m.ncols(), |r, c| m[(rows[r], c)])
}

/// `W_h = pinv(E_o[shared])·E_n[shared]`, shaped `d_o x d_n`.
pub fn hidden_transform(e_o: &Matrix, e_n: &Matrix, align: &VocabAlignment) -> Result<Matrix> {
    let d_o = e_o.ncols();
    for &(i, j) in &align.pairs {
        if i >= e_o.nrows() || j >= e_n.nrows() {
            return Err(Error::dims(
                "hidden_transform",
                format!(
                    "alignment pair ({i}, {j}) outside embeddings of {} and {} rows",
                    e_o.nrows(),
                    e_n.nrows()
                ),
            ));
        }
    }
    if align.shared_count() < d_o {
        return Err(Error::Underdetermined {
            shared: align.shared_count(),
            needed: d_o,
        });
    }
    let old_rows = select_rows(e_o, align.pairs.iter().map(|p| p.0));
    let new_rows = select_rows(e_n, align.pairs.iter().map(|p| p.1));
    Ok(pinv(&old_rows, DEFAULT_RCOND)? * new_rows)
}

/// `W_i = pinv(W_proj_o)·W_h·W_proj_n` for projections in up orientation
/// (`hidden x intermediate`). Result is `i_o x i_n`.
pub fn intermediate_transform(w_proj_o: &Matrix, w_proj_n: &Matrix, w_h: &Matrix) -> Result<Matrix> {
    if w_proj_o.nrows() != w_h.nrows() || w_h.ncols() != w_proj_n.nrows() {
        return Err(Error::dims(
            "intermediate_transform",
            format!(
                "chain {:?} · {:?} · {:?} does not compose",
                w_proj_o.shape(),
                w_h.shape(),
                w_proj_n.shape()
            ),
        ));
    }
    Ok(pinv(w_proj_o, DEFAULT_RCOND)? * w_h * w_proj_n)
}

/// Intermediate maps for one mapped layer pair.
#[derive(Debug, Clone, PartialEq)]
pub struct IntermediatePair {
    pub up: Matrix,
    pub down: Matrix,
}

impl IntermediatePair {
    pub fn between(old: &LayerWeights, new: &LayerWeights, w_h: &Matrix) -> Result<Self> {
        Ok(IntermediatePair {
            up: intermediate_transform(&old.up, &new.up, w_h)?,
            down: intermediate_transform(&old.down.transpose(), &new.down.transpose(), w_h)?,
        })
    }
}

/// Every transfer matrix a transplant needs.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferMatrices {
    /// `d_o x d_n`.
    pub hidden: Matrix,
    /// Keyed by `(old layer, new layer)`; present only when MLP modules are
    /// transplanted.
    pub intermediate: BTreeMap<(usize, usize), IntermediatePair>,
}

impl TransferMatrices {
    pub fn hidden_only(hidden: Matrix) -> Self {
        TransferMatrices {
            hidden,
            intermediate: BTreeMap::new(),
        }
    }

    /// Whether the hidden map may be skipped (square identity).
    pub fn hidden_is_identity(&self) -> bool {
        self.hidden.is_square() && self.hidden == Matrix::identity(self.hidden.nrows(), self.hidden.ncols())
    }
}
