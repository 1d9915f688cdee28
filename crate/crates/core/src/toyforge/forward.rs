//! A deliberately small pre-norm transformer forward pass.
//!
//! Normalization scales each token vector to a fixed length and attention
//! uses a fixed temperature, so a model lifted into a larger hidden space by a
//! semi-orthogonal map computes the same function in the new basis.

use crate::headmap::replicate_columns;
use crate::tensor_io::{ActivationSet, ModelWeights};
use crate::{Error, Matrix, Result};

/// Length of every token vector after normalization.
pub const NORM_SCALE: f64 = 4.0;
/// Multiplier applied to attention logits, independent of head size.
pub const ATTENTION_SCALE: f64 = 0.353_553_390_593_273_8;

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn normalize_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for mut row in out.row_iter_mut() {
        let n = row.norm();
        if n > 0.0 {
            row *= NORM_SCALE / n;
        }
    }
    out
}

fn attention(h: &Matrix, layer: &crate::tensor_io::LayerWeights, model: &ModelWeights) -> Result<Matrix> {
    let spec = &model.spec;
    let (heads, hd) = (spec.n_heads, spec.head_dim);
    let q = h * &layer.q;
    let k = replicate_columns(&(h * &layer.k), spec.n_kv_heads, heads)?;
    let v = replicate_columns(&(h * &layer.v), spec.n_kv_heads, heads)?;
    let s = h.nrows();
    let mut mixed = Matrix::zeros(s, heads * hd);
    for head in 0..heads {
        let qh = q.columns(head * hd, hd);
        let kh = k.columns(head * hd, hd);
        let vh = v.columns(head * hd, hd);
        let mut scores = qh * kh.transpose() * ATTENTION_SCALE;
        for i in 0..s {
            // causal: token i sees tokens 0..=i
            let top = (0..=i).map(|j| scores[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..s {
                let w = if j <= i { (scores[(i, j)] - top).exp() } else { 0.0 };
                scores[(i, j)] = w;
                total += w;
            }
            for j in 0..=i {
                scores[(i, j)] /= total;
            }
        }
        mixed.columns_mut(head * hd, hd).copy_from(&(scores * vh));
    }
    Ok(mixed * &layer.o)
}

/// Hidden state after every block for one sequence, `seq_len x hidden` each.
pub fn block_outputs(model: &ModelWeights, tokens: &[usize]) -> Result<Vec<Matrix>> {
    let vocab = model.spec.vocab_size;
    if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab) {
        return Err(Error::Vocabulary(format!(
            "token id {bad} outside vocabulary of {vocab}"
        )));
    }
    if tokens.is_empty() {
        return Err(Error::Activations("empty sequence".into()));
    }
    let d = model.spec.hidden_size;
    let mut x = Matrix::from_fn(tokens.len(), d, |r, c| model.embedding[(tokens[r], c)]);
    let mut outputs = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        x += attention(&normalize_rows(&x), layer, model)?;
        let pre = normalize_rows(&x) * &layer.up;
        x += pre.map(gelu) * &layer.down;
        outputs.push(x.clone());
    }
    Ok(outputs)
}

/// FNV-1a over the token ids, as 16 hex digits.
pub fn corpus_id(token_ids: &[Vec<usize>]) -> String {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |bytes: &[u8]| {
        for &b in bytes {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x0100_0000_01b3);
        }
    };
    for seq in token_ids {
        for &t in seq {
            feed(&(t as u64).to_le_bytes());
        }
        feed(&[0xff]);
    }
    format!("{hash:016x}")
}

/// Mean-pooled block outputs of the first `m·k` sequences, `k` minibatches of
/// `m` rows per layer. The corpus id is derived from the token ids.
pub fn forward_capture(model: &ModelWeights, token_ids: &[Vec<usize>], m: usize, k: usize) -> Result<ActivationSet> {
    forward_capture_tagged(model, token_ids, m, k, &corpus_id(token_ids))
}

/// As [`forward_capture`] with an explicit corpus id, for when two models
/// index the same token strings differently.
pub fn forward_capture_tagged(
    model: &ModelWeights,
    token_ids: &[Vec<usize>],
    m: usize,
    k: usize,
    corpus: &str,
) -> Result<ActivationSet> {
    if m == 0 || k == 0 || token_ids.len() < m * k {
        return Err(Error::Activations(format!(
            "need {m} x {k} sequences, got {}",
            token_ids.len()
        )));
    }
    let d = model.spec.hidden_size;
    let n_layers = model.layers.len();
    let mut layers = vec![vec![Matrix::zeros(m, d); k]; n_layers];
    for (idx, seq) in token_ids.iter().take(m * k).enumerate() {
        let (b, row) = (idx / m, idx % m);
        for (l, out) in block_outputs(model, seq)?.into_iter().enumerate() {
            let mean = out.row_mean();
            layers[l][b].set_row(row, &mean);
        }
    }
    ActivationSet::new(corpus, layers)
}
