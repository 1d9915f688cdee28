//! Moves an adapter's weight updates into an upgraded model and re-factorizes
//! them at the configured rank.
//!
//! For a mapped layer pair `(i, j)` and an assigned head pair `(a, b)` the
//! update of query head `a` becomes
//!
//! ```text
//! ΔW_n^b = W_hᵀ · ΔW_o^a · (W_o^a)ᵀ · W_h · W_n^b
//! ```
//!
//! K and V use the same rule on query-granularity replicas, then average each
//! new kv group. O heads are row blocks, so the rule runs on their transposes.
//! Up and down projections are conjugated by `W_h` on the hidden side and by a
//! per-layer-pair intermediate map on the other.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cka::SimilarityMatrix;
use crate::error::Coords;
use crate::headmap::{
    average_kv_groups, concat_heads, layer_interactions, head_similarity_weighted, map_heads,
    replicate_columns, split_heads, Axis, HeadAssignment, DEFAULT_QK_WEIGHT,
};
use crate::layermap::{orient_and_map, LayerMapping};
use crate::linalg::truncated_svd;
use crate::tensor_io::{write_json, AdapterBundle, LoraPair, ModelSpec, ModelWeights, Module};
use crate::transfer::{hidden_transform, IntermediatePair, TransferMatrices, VocabAlignment};
use crate::{Error, Matrix, Result};

/// A fitted `W_h` this close to the identity (max abs entry) is snapped to it.
pub const IDENTITY_SNAP_TOL: f64 = 1e-9;

fn default_lr() -> f64 {
    1e-3
}
fn default_epochs() -> usize {
    3
}
fn default_batch() -> usize {
    16
}
fn default_scheduler() -> String {
    "linear".into()
}
fn default_true() -> bool {
    true
}
fn default_qk_weight() -> f64 {
    DEFAULT_QK_WEIGHT
}

/// Settings for the short fine-tuning run that follows a transplant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LftConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub warmup: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_scheduler")]
    pub scheduler: String,
    /// Falls back to the modules the adapter carries when unset.
    #[serde(default)]
    pub target_modules: Option<Vec<Module>>,
}

impl Default for LftConfig {
    fn default() -> Self {
        LftConfig {
            learning_rate: default_lr(),
            warmup: 0,
            epochs: default_epochs(),
            batch_size: default_batch(),
            scheduler: default_scheduler(),
            target_modules: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransplantConfig {
    /// Output rank; the input adapter's rank when unset.
    #[serde(default)]
    pub rank: Option<usize>,
    /// Output alpha; copied from the input adapter when unset.
    #[serde(default)]
    pub alpha: Option<f64>,
    /// Maximum layer offset; the depth gap when unset.
    #[serde(default)]
    pub delta: Option<usize>,
    /// When false, head `i` maps to head `i`.
    #[serde(default = "default_true")]
    pub head_mapping: bool,
    #[serde(default = "default_qk_weight")]
    pub qk_weight: f64,
    #[serde(default)]
    pub lft: LftConfig,
}

impl Default for TransplantConfig {
    fn default() -> Self {
        TransplantConfig {
            rank: None,
            alpha: None,
            delta: None,
            head_mapping: true,
            qk_weight: DEFAULT_QK_WEIGHT,
            lft: LftConfig::default(),
        }
    }
}

impl TransplantConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lft.warmup != 0 {
            return Err(Error::InvalidConfig(format!(
                "lft.warmup must be 0 after a transplant, got {}",
                self.lft.warmup
            )));
        }
        if self.rank == Some(0) {
            return Err(Error::InvalidConfig("rank must be at least 1".into()));
        }
        if !(self.lft.learning_rate > 0.0) || self.lft.epochs == 0 || self.lft.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "lft learning_rate, epochs and batch_size must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.qk_weight) {
            return Err(Error::InvalidConfig(format!(
                "qk_weight must lie in [0, 1], got {}",
                self.qk_weight
            )));
        }
        Ok(())
    }
}

/// Everything a transplant needs besides the weights themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct MappingPlan {
    pub layer_mapping: LayerMapping,
    /// Keyed by `(old layer, new layer)`.
    pub heads: BTreeMap<(usize, usize), HeadAssignment>,
    pub transfer: TransferMatrices,
    pub config: TransplantConfig,
}

impl MappingPlan {
    pub fn check(&self, old: &ModelSpec, new: &ModelSpec) -> Result<()> {
        if self.transfer.hidden.shape() != (old.hidden_size, new.hidden_size) {
            return Err(Error::dims(
                "mapping plan",
                format!(
                    "W_h is {:?}, hidden sizes are {} -> {}",
                    self.transfer.hidden.shape(),
                    old.hidden_size,
                    new.hidden_size
                ),
            ));
        }
        for &(o, n) in &self.layer_mapping.pairs {
            if o >= old.n_layers || n >= new.n_layers {
                return Err(Error::InfeasibleMapping(format!(
                    "layer pair ({o}, {n}) outside {} -> {} layers",
                    old.n_layers, new.n_layers
                )));
            }
        }
        for (&(o, n), a) in &self.heads {
            if let Some(&(ho, hn)) = a.pairs.iter().find(|&&(ho, hn)| ho >= old.n_heads || hn >= new.n_heads) {
                return Err(Error::InfeasibleMapping(format!(
                    "layer pair ({o}, {n}) assigns head {ho} -> {hn} beyond {} -> {} heads",
                    old.n_heads, new.n_heads
                )));
            }
        }
        Ok(())
    }
}

/// Least-squares `W_h`, snapped to the exact identity when the hidden size is
/// unchanged and the fit says nothing moved.
pub fn fit_hidden_transform(old: &ModelWeights, new: &ModelWeights, align: &VocabAlignment) -> Result<Matrix> {
    let w_h = hidden_transform(&old.embedding, &new.embedding, align)?;
    if w_h.is_square() {
        let eye = Matrix::identity(w_h.nrows(), w_h.ncols());
        if (&w_h - &eye).amax() <= IDENTITY_SNAP_TOL {
            return Ok(eye);
        }
    }
    Ok(w_h)
}

/// Builds a plan from a layer similarity matrix: layer alignment, hidden and
/// intermediate maps, and per-pair head assignments.
pub fn build_plan(
    old: &ModelWeights,
    new: &ModelWeights,
    sim: &SimilarityMatrix,
    align: &VocabAlignment,
    modules: &[Module],
    config: TransplantConfig,
) -> Result<MappingPlan> {
    config.validate()?;
    let layer_mapping = orient_and_map(sim, old.spec.n_layers, new.spec.n_layers, config.delta)?;
    let w_h = fit_hidden_transform(old, new, align)?;
    plan_for_mapping(old, new, layer_mapping, w_h, modules, config)
}

/// Completes a plan for a known layer mapping and hidden map.
pub fn plan_for_mapping(
    old: &ModelWeights,
    new: &ModelWeights,
    layer_mapping: LayerMapping,
    w_h: Matrix,
    modules: &[Module],
    config: TransplantConfig,
) -> Result<MappingPlan> {
    config.validate()?;
    let pairs = layer_mapping.pairs.clone();
    let needs_mlp = modules.iter().any(|m| !m.is_attention());
    let needs_heads = modules.iter().any(|m| m.is_attention());

    let heads: BTreeMap<(usize, usize), HeadAssignment> = pairs
        .par_iter()
        .filter(|_| needs_heads)
        .map(|&(o, n)| {
            let assignment = if config.head_mapping {
                let at = |e: Error| e.at(Coords { layer: Some(n), module: None, head: None });
                let a = layer_interactions(&old.layers[o], &old.spec).map_err(at)?;
                let b = layer_interactions(&new.layers[n], &new.spec).map_err(at)?;
                let sim = head_similarity_weighted(&a, &b, &w_h, config.qk_weight).map_err(at)?;
                map_heads(&sim).map_err(at)?
            } else {
                HeadAssignment::identity(old.spec.n_heads, new.spec.n_heads)
            };
            Ok(((o, n), assignment))
        })
        .collect::<Result<_>>()?;

    let intermediate: BTreeMap<(usize, usize), IntermediatePair> = pairs
        .par_iter()
        .filter(|_| needs_mlp)
        .map(|&(o, n)| {
            IntermediatePair::between(&old.layers[o], &new.layers[n], &w_h)
                .map(|p| ((o, n), p))
                .map_err(|e| e.at(Coords { layer: Some(n), module: Some("up/down".into()), head: None }))
        })
        .collect::<Result<_>>()?;

    let plan = MappingPlan {
        layer_mapping,
        heads,
        transfer: TransferMatrices {
            hidden: w_h,
            intermediate,
        },
        config,
    };
    plan.check(&old.spec, &new.spec)?;
    Ok(plan)
}

/// `W_hᵀ · dW_o · W_oᵀ · W_h · W_n` for one head, in column-block form.
pub fn transform_head_update(dw_o: &Matrix, w_o: &Matrix, w_h: &Matrix, w_n: &Matrix) -> Result<Matrix> {
    if dw_o.shape() != w_o.shape() || w_h.nrows() != w_o.nrows() || w_h.ncols() != w_n.nrows() {
        return Err(Error::dims(
            "transform_head_update",
            format!(
                "dW {:?}, W_o {:?}, W_h {:?}, W_n {:?}",
                dw_o.shape(),
                w_o.shape(),
                w_h.shape(),
                w_n.shape()
            ),
        ));
    }
    // right-to-left keeps every intermediate at d x head_dim or smaller
    let tail = w_h * w_n;
    let core = w_o.transpose() * tail;
    Ok(w_h.transpose() * (dw_o * core))
}

/// Up: `W_hᵀ · dW · W_i`. Down: `W_iᵀ · dW · W_h`.
pub fn transform_mlp_update(dw_o: &Matrix, module: Module, w_h: &Matrix, w_i: &Matrix) -> Result<Matrix> {
    let (left, right) = match module {
        Module::Up => (w_h, w_i),
        Module::Down => (w_i, w_h),
        other => {
            return Err(Error::InvalidConfig(format!(
                "transform_mlp_update handles up/down, got {other}"
            )))
        }
    };
    if left.nrows() != dw_o.nrows() || right.nrows() != dw_o.ncols() {
        return Err(Error::dims(
            "transform_mlp_update",
            format!(
                "{module}: dW {:?} between {:?}ᵀ and {:?}",
                dw_o.shape(),
                left.shape(),
                right.shape()
            ),
        ));
    }
    Ok(left.transpose() * dw_o * right)
}

/// Query-granularity column heads of a Q/K/V matrix.
fn query_heads(w: &Matrix, module: Module, spec: &ModelSpec) -> Result<Vec<Matrix>> {
    let w = match module {
        Module::K | Module::V => replicate_columns(w, spec.n_kv_heads, spec.n_heads)?,
        _ => w.clone(),
    };
    split_heads(&w, spec.n_heads, Axis::Column)
}

/// New-model `ΔW` of one attention module at one mapped layer pair.
pub fn transform_attention_update(
    module: Module,
    dw_o: &Matrix,
    old_w: &Matrix,
    old_spec: &ModelSpec,
    new_w: &Matrix,
    new_spec: &ModelSpec,
    w_h: &Matrix,
    heads: &HeadAssignment,
) -> Result<Matrix> {
    let at_head = |h: usize| move |e: Error| e.at(Coords { layer: None, module: None, head: Some(h) });
    if module == Module::O {
        // row heads: run the column rule on transposes
        let d_heads = split_heads(&dw_o.transpose(), old_spec.n_heads, Axis::Column)?;
        let o_heads = split_heads(&old_w.transpose(), old_spec.n_heads, Axis::Column)?;
        let n_heads = split_heads(&new_w.transpose(), new_spec.n_heads, Axis::Column)?;
        let mut out = vec![Matrix::zeros(new_spec.hidden_size, new_spec.head_dim); new_spec.n_heads];
        for &(a, b) in &heads.pairs {
            out[b] = transform_head_update(&d_heads[a], &o_heads[a], w_h, &n_heads[b]).map_err(at_head(b))?;
        }
        return Ok(concat_heads(&out, Axis::Column)?.transpose());
    }
    let d_heads = query_heads(dw_o, module, old_spec)?;
    let o_heads = query_heads(old_w, module, old_spec)?;
    let n_heads = query_heads(new_w, module, new_spec)?;
    let mut out = vec![Matrix::zeros(new_spec.hidden_size, new_spec.head_dim); new_spec.n_heads];
    for &(a, b) in &heads.pairs {
        out[b] = transform_head_update(&d_heads[a], &o_heads[a], w_h, &n_heads[b]).map_err(at_head(b))?;
    }
    let full = concat_heads(&out, Axis::Column)?;
    match module {
        Module::K | Module::V => average_kv_groups(&full, new_spec.n_kv_heads, new_spec.n_heads),
        _ => Ok(full),
    }
}

/// Re-expresses `ΔW` (`d_in x d_out`) as a rank-`r` pair.
pub fn refactorize(delta: &Matrix, rank: usize) -> Result<LoraPair> {
    let low = truncated_svd(&delta.transpose(), rank)?;
    Ok(LoraPair { a: low.a, b: low.b })
}

/// Runs the transplant. Entries exist only for new layers that received an
/// old layer and for modules the input adapter carries there.
pub fn transplant_adapter(
    old: &ModelWeights,
    new: &ModelWeights,
    adapter: &AdapterBundle,
    plan: &MappingPlan,
) -> Result<AdapterBundle> {
    adapter.validate()?;
    plan.config.validate()?;
    plan.check(&old.spec, &new.spec)?;
    let rank = plan.config.rank.unwrap_or(adapter.rank);
    let alpha = plan.config.alpha.unwrap_or(adapter.alpha);
    let w_h = &plan.transfer.hidden;

    let jobs: Vec<(usize, usize, Module, &LoraPair)> = plan
        .layer_mapping
        .pairs
        .iter()
        .flat_map(|&(o, n)| {
            Module::ALL
                .into_iter()
                .filter_map(move |m| adapter.entries.get(&(o, m)).map(|p| (o, n, m, p)))
        })
        .collect();

    let entries: Vec<((usize, Module), LoraPair)> = jobs
        .into_par_iter()
        .map(|(o, n, module, pair)| {
            let coords = Coords {
                layer: Some(n),
                module: Some(module.name().to_string()),
                head: None,
            };
            let run = || -> Result<LoraPair> {
                let dw = pair.delta();
                let (ow, nw) = (old.layers[o].get(module), new.layers[n].get(module));
                let expected = old.spec.module_shape(module);
                if dw.shape() != expected {
                    return Err(Error::ShapeMismatch {
                        name: format!("adapter layers.{o}.{module}"),
                        expected: vec![expected.0, expected.1],
                        found: vec![dw.nrows(), dw.ncols()],
                    });
                }
                let moved = if module.is_attention() {
                    let heads = plan.heads.get(&(o, n)).ok_or_else(|| {
                        Error::InfeasibleMapping(format!("no head assignment for layers ({o}, {n})"))
                    })?;
                    transform_attention_update(module, &dw, ow, &old.spec, nw, &new.spec, w_h, heads)?
                } else {
                    let inter = plan.transfer.intermediate.get(&(o, n)).ok_or_else(|| {
                        Error::InfeasibleMapping(format!("no intermediate map for layers ({o}, {n})"))
                    })?;
                    let w_i = if module == Module::Up { &inter.up } else { &inter.down };
                    transform_mlp_update(&dw, module, w_h, w_i)?
                };
                refactorize(&moved, rank)
            };
            run()
                .map(|p| ((n, module), p))
                .map_err(|e| match e {
                    Error::At { coords: inner, source } => Error::At {
                        coords: Coords {
                            head: inner.head,
                            ..coords.clone()
                        },
                        source,
                    },
                    e => e.at(coords.clone()),
                })
        })
        .collect::<Result<_>>()?;

    if entries.is_empty() {
        return Err(Error::EmptyBundle);
    }
    let mut bundle = AdapterBundle::new(rank, alpha);
    bundle.entries.extend(entries);
    bundle.validate()?;
    Ok(bundle)
}

/// JSON written for the fine-tuning step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LftFile {
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub scheduler: String,
    pub target_modules: Vec<Module>,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub optimizer: String,
}

/// Fine-tuning settings for `adapter`, the output of a transplant. Target
/// modules default to the ones the adapter carries.
pub fn lft_file(plan: &MappingPlan, adapter: &AdapterBundle) -> Result<LftFile> {
    plan.config.validate()?;
    let lft = &plan.config.lft;
    Ok(LftFile {
        learning_rate: lft.learning_rate,
        warmup_steps: lft.warmup,
        epochs: lft.epochs,
        batch_size: lft.batch_size,
        scheduler: lft.scheduler.clone(),
        target_modules: lft
            .target_modules
            .clone()
            .filter(|m| !m.is_empty())
            .unwrap_or_else(|| adapter.target_modules()),
        rank: adapter.rank,
        alpha: adapter.alpha,
        dropout: 0.0,
        optimizer: "adamw".into(),
    })
}

pub fn emit_lft_config(plan: &MappingPlan, adapter: &AdapterBundle, path: &Path) -> Result<()> {
    write_json(path, &lft_file(plan, adapter)?)
}
