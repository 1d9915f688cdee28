use std::collections::BTreeMap;
use std::path::Path;

use super::{read_archive, write_archive, Archive};
use crate::{Error, Matrix, Result};

/// Row semantics recorded in capture metadata: one row per calibration
/// sequence, hidden states averaged over its non-pad tokens.
pub const DEFAULT_POOLING: &str = "mean_non_pad";

/// Per-layer calibration activations, `k` minibatches of `m x hidden` each.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSet {
    pub corpus_id: String,
    pub pooling: String,
    pub batches_per_layer: usize,
    pub rows_per_batch: usize,
    /// `layers[i][b]` is minibatch `b` of layer `i`.
    pub layers: Vec<Vec<Matrix>>,
}

impl ActivationSet {
    /// Builds a set, checking that every layer has the same `(k, m)` and that
    /// widths agree within a layer.
    pub fn new(corpus_id: impl Into<String>, layers: Vec<Vec<Matrix>>) -> Result<Self> {
        let first = layers
            .first()
            .and_then(|l| l.first())
            .ok_or_else(|| Error::Activations("no layers or batches".into()))?;
        let (k, m) = (layers[0].len(), first.nrows());
        for (i, batches) in layers.iter().enumerate() {
            if batches.len() != k {
                return Err(Error::Activations(format!(
                    "layer {i} has {} batches, layer 0 has {k}",
                    batches.len()
                )));
            }
            let width = batches[0].ncols();
            for (b, batch) in batches.iter().enumerate() {
                if batch.nrows() != m || batch.ncols() != width {
                    return Err(Error::Activations(format!(
                        "ragged minibatch layer.{i}.batch.{b}: {}x{}, expected {m}x{width}",
                        batch.nrows(),
                        batch.ncols()
                    )));
                }
            }
        }
        Ok(ActivationSet {
            corpus_id: corpus_id.into(),
            pooling: DEFAULT_POOLING.to_string(),
            batches_per_layer: k,
            rows_per_batch: m,
            layers,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Whether two captures can be compared with CKA.
    pub fn check_comparable(&self, other: &ActivationSet) -> Result<()> {
        if self.corpus_id != other.corpus_id {
            return Err(Error::Activations(format!(
                "calibration corpus differs: `{}` vs `{}`",
                self.corpus_id, other.corpus_id
            )));
        }
        if self.pooling != other.pooling {
            return Err(Error::Activations(format!(
                "pooling differs: `{}` vs `{}`",
                self.pooling, other.pooling
            )));
        }
        if (self.batches_per_layer, self.rows_per_batch)
            != (other.batches_per_layer, other.rows_per_batch)
        {
            return Err(Error::Activations(format!(
                "minibatch layout differs: k={}, m={} vs k={}, m={}",
                self.batches_per_layer,
                self.rows_per_batch,
                other.batches_per_layer,
                other.rows_per_batch
            )));
        }
        Ok(())
    }
}

fn parse_key(key: &str) -> Option<(usize, usize)> {
    let rest = key.strip_prefix("layer.")?;
    let (layer, batch) = rest.split_once(".batch.")?;
    Some((layer.parse().ok()?, batch.parse().ok()?))
}

pub(crate) fn activations_from_archive(archive: &Archive) -> Result<ActivationSet> {
    let mut grid: BTreeMap<usize, BTreeMap<usize, Matrix>> = BTreeMap::new();
    for name in archive.tensors.keys() {
        let (layer, batch) = parse_key(name)
            .ok_or_else(|| Error::Activations(format!("unrecognized key `{name}`")))?;
        grid.entry(layer)
            .or_default()
            .insert(batch, archive.matrix(name)?);
    }
    let mut layers = Vec::with_capacity(grid.len());
    for (expected, (layer, batches)) in grid.into_iter().enumerate() {
        if layer != expected {
            return Err(Error::Activations(format!("missing layer index {expected}")));
        }
        let mut list = Vec::with_capacity(batches.len());
        for (expected_b, (b, m)) in batches.into_iter().enumerate() {
            if b != expected_b {
                return Err(Error::Activations(format!(
                    "layer {layer} is missing batch {expected_b}"
                )));
            }
            list.push(m);
        }
        layers.push(list);
    }
    let corpus_id = archive
        .metadata
        .get("corpus_id")
        .cloned()
        .unwrap_or_default();
    let mut set = ActivationSet::new(corpus_id, layers)?;
    if let Some(p) = archive.metadata.get("pooling") {
        set.pooling = p.clone();
    }
    for (field, actual) in [("k", set.batches_per_layer), ("m", set.rows_per_batch)] {
        if let Some(v) = archive.metadata.get(field) {
            if v.parse::<usize>().ok() != Some(actual) {
                return Err(Error::Activations(format!(
                    "metadata {field}={v} disagrees with stored tensors ({actual})"
                )));
            }
        }
    }
    Ok(set)
}

pub(crate) fn activations_to_archive(set: &ActivationSet) -> Archive {
    let mut archive = Archive::default();
    for (i, batches) in set.layers.iter().enumerate() {
        for (b, m) in batches.iter().enumerate() {
            archive.insert_matrix(format!("layer.{i}.batch.{b}"), m);
        }
    }
    let meta = &mut archive.metadata;
    meta.insert("corpus_id".into(), set.corpus_id.clone());
    meta.insert("pooling".into(), set.pooling.clone());
    meta.insert("k".into(), set.batches_per_layer.to_string());
    meta.insert("m".into(), set.rows_per_batch.to_string());
    meta.insert("n_layers".into(), set.n_layers().to_string());
    archive
}

pub fn load_activations(path: &Path) -> Result<ActivationSet> {
    activations_from_archive(&read_archive(path)?)
}

pub fn save_activations(set: &ActivationSet, path: &Path) -> Result<()> {
    write_archive(path, &activations_to_archive(set))
}
