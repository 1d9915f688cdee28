//! Miniature model pairs with planted upgrade structure.
//!
//! The old model has attention projections with orthonormal per-head columns
//! (rows for O). The new model is a lift of it: hidden states move through a
//! semi-orthogonal `G` (`d_o x d_n`, `G·Gᵀ = I`), heads move by an injection
//! `π`, layers land at known positions, and anything the old model lacks is
//! filled from the null space of `G` or given zero output weights. The lifted
//! model computes the same function in its own basis, so every stage of the
//! pipeline has an exact answer.
//!
//! Randomness comes from ChaCha8 seeded with the scenario seed. Each tensor
//! draws from its own stream, numbered by the FNV-1a hash of its name
//! (`"old.layers.0.q"`, `"lift.layers.2.up"`, `"adapter.layers.1.v.a"`, ...), so
//! adding a tensor never shifts the values of another.

mod forward;

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::linalg::QR;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

pub use forward::{
    block_outputs, corpus_id, forward_capture, forward_capture_tagged, gelu, ATTENTION_SCALE, NORM_SCALE,
};

use crate::headmap::{concat_heads, replicate_columns, split_heads, Axis};
use crate::tensor_io::{
    save_activations, save_adapter, save_model, save_vocab, write_json, ActivationSet, AdapterBundle,
    LayerWeights, LoraPair, ModelSpec, ModelWeights, Module, StorageOrientation,
};
use crate::{Error, Matrix, Result};

/// Adapter rank of every generated scenario.
pub const ADAPTER_RANK: usize = 4;
pub const ADAPTER_ALPHA: f64 = 32.0;
/// Standard deviation of adapter factor entries.
pub const ADAPTER_STD: f64 = 0.02;
/// Output scale of inserted blocks relative to mapped ones.
pub const INSERT_SCALE: f64 = 0.3;
/// Scale of null-space fill columns.
pub const EXTRA_SCALE: f64 = 0.5;
/// Tokens per calibration sequence.
pub const SEQ_LEN: usize = 8;
/// Default capture layout: rows per minibatch and minibatches.
pub const CAPTURE_ROWS: usize = 64;
pub const CAPTURE_BATCHES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Identity,
    EmbedRotation,
    HeadPermutation,
    LayerInsertion,
    HiddenGrowth,
    IntermediateGrowth,
    GqaToMha,
    Combined,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 8] = [
        ScenarioKind::Identity,
        ScenarioKind::EmbedRotation,
        ScenarioKind::HeadPermutation,
        ScenarioKind::LayerInsertion,
        ScenarioKind::HiddenGrowth,
        ScenarioKind::IntermediateGrowth,
        ScenarioKind::GqaToMha,
        ScenarioKind::Combined,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Identity => "identity",
            ScenarioKind::EmbedRotation => "embed_rotation",
            ScenarioKind::HeadPermutation => "head_permutation",
            ScenarioKind::LayerInsertion => "layer_insertion",
            ScenarioKind::HiddenGrowth => "hidden_growth",
            ScenarioKind::IntermediateGrowth => "intermediate_growth",
            ScenarioKind::GqaToMha => "gqa_to_mha",
            ScenarioKind::Combined => "combined",
        }
    }

    fn rotates(self) -> bool {
        matches!(self, ScenarioKind::EmbedRotation | ScenarioKind::HiddenGrowth | ScenarioKind::Combined)
    }

    fn permutes_heads(self) -> bool {
        matches!(self, ScenarioKind::HeadPermutation | ScenarioKind::Combined)
    }

    fn inserts_layers(self) -> bool {
        matches!(self, ScenarioKind::LayerInsertion | ScenarioKind::Combined)
    }

    fn old_is_gqa(self) -> bool {
        matches!(self, ScenarioKind::GqaToMha | ScenarioKind::Combined)
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScenarioKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown scenario kind `{s}`")))
    }
}

/// Size of the old model; the new one is derived from it per kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyShape {
    pub vocab: usize,
    pub hidden: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub intermediate: usize,
    pub layers: usize,
}

impl Default for ToyShape {
    fn default() -> Self {
        ToyShape {
            vocab: 100,
            hidden: 32,
            heads: 4,
            kv_heads: 4,
            intermediate: 64,
            layers: 3,
        }
    }
}

impl ToyShape {
    fn spec(&self, name: &str) -> ModelSpec {
        ModelSpec {
            name: name.into(),
            vocab_size: self.vocab,
            hidden_size: self.hidden,
            intermediate_size: self.intermediate,
            n_layers: self.layers,
            n_heads: self.heads,
            n_kv_heads: self.kv_heads,
            head_dim: self.hidden / self.heads,
        }
    }

    fn upgraded(self, kind: ScenarioKind) -> ToyShape {
        let mut new = self;
        match kind {
            ScenarioKind::HiddenGrowth => new.hidden = self.hidden * 3 / 2,
            ScenarioKind::IntermediateGrowth => new.intermediate = self.intermediate * 3 / 2,
            ScenarioKind::Combined => {
                new.hidden = self.hidden * 3 / 2;
                new.heads = self.heads * 3 / 2;
                new.intermediate = self.intermediate * 3 / 2;
                new.vocab = self.vocab + 20;
            }
            _ => {}
        }
        if kind.inserts_layers() {
            new.layers = 2 * self.layers - 1;
        }
        new.kv_heads = new.heads;
        new
    }
}

mod matrix_rows {
    use super::Matrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Matrix, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(serde::de::Error::custom("ragged matrix rows"));
        }
        Ok(Matrix::from_fn(rows.len(), cols, |r, c| rows[r][c]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// `(old layer, new layer)`.
    pub layer_pairs: Vec<(usize, usize)>,
    /// New head of every old head.
    pub head_permutation: Vec<usize>,
    #[serde(with = "matrix_rows")]
    pub planted_w_h: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub seed: u64,
    pub old_spec: ModelSpec,
    pub new_spec: ModelSpec,
    pub ground_truth: GroundTruth,
}

/// Stream number of a named tensor.
pub fn stream_id(name: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

fn rng_for(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(name));
    rng
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let qr = QR::new(gaussian(n, n, rng));
    let (q, r) = (qr.q(), qr.r());
    // fix column signs so Q does not depend on the QR backend's convention
    let mut q = q;
    for k in 0..n {
        if r[(k, k)] < 0.0 {
            q.column_mut(k).neg_mut();
        }
    }
    q
}

fn round_f32(m: &Matrix) -> Matrix {
    m.map(|v| v as f32 as f64)
}

fn random_block(spec: &ModelSpec, seed: u64, prefix: &str, out_scale: f64) -> LayerWeights {
    let d = spec.hidden_size;
    let r = |name: &str| rng_for(seed, &format!("{prefix}.{name}"));
    let q = orthogonal(d, &mut r("q"));
    let k = orthogonal(d, &mut r("k")).columns(0, spec.kv_width()).into_owned();
    let v = orthogonal(d, &mut r("v")).columns(0, spec.kv_width()).into_owned();
    let o = orthogonal(d, &mut r("o")).transpose() * out_scale;
    let up = gaussian(d, spec.intermediate_size, &mut r("up")) / (d as f64).sqrt();
    let down = gaussian(spec.intermediate_size, d, &mut r("down")) * (out_scale / (spec.intermediate_size as f64).sqrt());
    LayerWeights {
        q: round_f32(&q),
        k: round_f32(&k),
        v: round_f32(&v),
        o: round_f32(&o),
        up: round_f32(&up),
        down: round_f32(&down),
    }
}

/// The planted relationship between an old and a new model.
#[derive(Debug, Clone, PartialEq)]
pub struct Lift {
    /// `d_o x d_n`, orthonormal rows.
    pub g: Matrix,
    /// `d_n x (d_n - d_o)`, orthonormal columns spanning the null space of `g`.
    pub null: Matrix,
    /// New head of every old head.
    pub head_map: Vec<usize>,
    /// New layer of every old layer.
    pub layer_map: Vec<usize>,
    pub old_spec: ModelSpec,
    pub new_spec: ModelSpec,
}

impl Lift {
    fn fill(&self, cols: usize, rng: Option<&mut ChaCha8Rng>) -> Matrix {
        match rng {
            Some(rng) if self.null.ncols() > 0 => &self.null * gaussian(self.null.ncols(), cols, rng) * EXTRA_SCALE,
            _ => Matrix::zeros(self.new_spec.hidden_size, cols),
        }
    }

    /// Lifts query-granularity column heads (`d_o x H_o·hd_o`).
    fn lift_columns(&self, w: &Matrix, mut rng: Option<&mut ChaCha8Rng>) -> Matrix {
        let (o, n) = (&self.old_spec, &self.new_spec);
        let heads = split_heads(w, o.n_heads, Axis::Column).expect("old spec divides");
        let mut source = vec![None; n.n_heads];
        for (a, &b) in self.head_map.iter().enumerate() {
            source[b] = Some(a);
        }
        let gt = self.g.transpose();
        let blocks: Vec<Matrix> = source
            .iter()
            .map(|src| match src {
                Some(a) => {
                    let core = &gt * &heads[*a];
                    let extra = self.fill(n.head_dim - o.head_dim, rng.as_deref_mut());
                    Matrix::from_fn(n.hidden_size, n.head_dim, |r, c| {
                        if c < o.head_dim {
                            core[(r, c)]
                        } else {
                            extra[(r, c - o.head_dim)]
                        }
                    })
                }
                None => self.fill(n.head_dim, rng.as_deref_mut()),
            })
            .collect();
        concat_heads(&blocks, Axis::Column).expect("uniform blocks")
    }

    /// Lifts one module. With `rng` unset the free parts are zero, which is
    /// the linear part of the lift and maps weight updates.
    fn lift_module(&self, module: Module, w: &Matrix, mut rng: Option<&mut ChaCha8Rng>) -> Matrix {
        let (o, n) = (&self.old_spec, &self.new_spec);
        match module {
            Module::Q => self.lift_columns(w, rng),
            Module::K | Module::V => {
                let full = replicate_columns(w, o.n_kv_heads, o.n_heads).expect("old spec divides");
                self.lift_columns(&full, rng)
            }
            Module::O => self.lift_columns(&w.transpose(), rng).transpose(),
            Module::Up => {
                let core = self.g.transpose() * w + self.fill(o.intermediate_size, rng.as_deref_mut());
                let extra = match rng {
                    Some(rng) => {
                        gaussian(n.hidden_size, n.intermediate_size - o.intermediate_size, rng)
                            / (n.hidden_size as f64).sqrt()
                    }
                    None => Matrix::zeros(n.hidden_size, n.intermediate_size - o.intermediate_size),
                };
                Matrix::from_fn(n.hidden_size, n.intermediate_size, |r, c| {
                    if c < o.intermediate_size {
                        core[(r, c)]
                    } else {
                        extra[(r, c - o.intermediate_size)]
                    }
                })
            }
            Module::Down => {
                let core = w * &self.g;
                Matrix::from_fn(n.intermediate_size, n.hidden_size, |r, c| {
                    if r < o.intermediate_size {
                        core[(r, c)]
                    } else {
                        0.0
                    }
                })
            }
        }
    }

    fn lift_layer(&self, layer: &LayerWeights, seed: u64, new_index: usize) -> LayerWeights {
        let lift = |m: Module| {
            let mut rng = rng_for(seed, &format!("lift.layers.{new_index}.{}", m.name()));
            self.lift_module(m, layer.get(m), Some(&mut rng))
        };
        LayerWeights {
            q: lift(Module::Q),
            k: lift(Module::K),
            v: lift(Module::V),
            o: lift(Module::O),
            up: lift(Module::Up),
            down: lift(Module::Down),
        }
    }

    /// The new-model weight update that corresponds to `dw` on an old module.
    pub fn linear_delta(&self, module: Module, dw: &Matrix) -> Matrix {
        self.lift_module(module, dw, None)
    }
}

/// Everything [`gen_scenario`] produces, plus vocabularies and the lift.
#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    pub old: ModelWeights,
    pub new: ModelWeights,
    pub adapter: AdapterBundle,
    pub scenario: Scenario,
    pub old_vocab: Vec<String>,
    pub new_vocab: Vec<String>,
    pub lift: Lift,
}

pub fn gen_scenario(kind: ScenarioKind, seed: u64) -> (ModelWeights, ModelWeights, AdapterBundle, Scenario) {
    let fx = build_fixture(kind, seed);
    (fx.old, fx.new, fx.adapter, fx.scenario)
}

pub fn build_fixture(kind: ScenarioKind, seed: u64) -> Fixture {
    build_fixture_with_shape(kind, seed, ToyShape::default())
}

/// Builds a scenario from a custom old-model shape. `hidden` must be a
/// multiple of `heads`, and the grown kinds need `heads` even.
pub fn build_fixture_with_shape(kind: ScenarioKind, seed: u64, shape: ToyShape) -> Fixture {
    let mut old_shape = shape;
    old_shape.kv_heads = if kind.old_is_gqa() { shape.heads / 2 } else { shape.heads };
    let new_shape = old_shape.upgraded(kind);
    let old_spec = old_shape.spec("toy-old");
    let new_spec = new_shape.spec("toy-new");
    let (d_o, d_n) = (old_spec.hidden_size, new_spec.hidden_size);

    let old_layers: Vec<LayerWeights> = (0..old_spec.n_layers)
        .map(|i| random_block(&old_spec, seed, &format!("old.layers.{i}"), 1.0))
        .collect();
    let embedding = round_f32(&gaussian(old_spec.vocab_size, d_o, &mut rng_for(seed, "old.embedding")));
    let old = ModelWeights {
        spec: old_spec.clone(),
        embedding,
        layers: old_layers,
    };

    let (g, null) = if kind.rotates() {
        let r = orthogonal(d_n, &mut rng_for(seed, "lift.rotation"));
        (r.rows(0, d_o).into_owned(), r.rows(d_o, d_n - d_o).transpose())
    } else {
        (Matrix::identity(d_o, d_n), Matrix::zeros(d_n, d_n - d_o))
    };

    let head_map: Vec<usize> = if kind.permutes_heads() {
        let mut rng = rng_for(seed, "lift.heads");
        let identity: Vec<usize> = (0..old_spec.n_heads).collect();
        loop {
            let mut all: Vec<usize> = (0..new_spec.n_heads).collect();
            all.shuffle(&mut rng);
            all.truncate(old_spec.n_heads);
            if all != identity || old_spec.n_heads == 1 {
                break all;
            }
        }
    } else {
        (0..old_spec.n_heads).collect()
    };
    let layer_map: Vec<usize> = if kind.inserts_layers() {
        (0..old_spec.n_layers).map(|i| 2 * i).collect()
    } else {
        (0..old_spec.n_layers).collect()
    };

    let lift = Lift {
        g: g.clone(),
        null,
        head_map: head_map.clone(),
        layer_map: layer_map.clone(),
        old_spec: old_spec.clone(),
        new_spec: new_spec.clone(),
    };

    let mut new_layers = Vec::with_capacity(new_spec.n_layers);
    for j in 0..new_spec.n_layers {
        let layer = match layer_map.iter().position(|&x| x == j) {
            Some(i) => lift.lift_layer(&old.layers[i], seed, j),
            None => {
                let inserted = random_block(&old_spec, seed, &format!("inserted.layers.{j}"), INSERT_SCALE);
                lift.lift_layer(&inserted, seed, j)
            }
        };
        new_layers.push(layer);
    }

    let old_vocab: Vec<String> = (0..old_spec.vocab_size).map(|i| format!("tok{i:03}")).collect();
    let mut new_vocab = old_vocab.clone();
    new_vocab.extend((old_spec.vocab_size..new_spec.vocab_size).map(|i| format!("new{i:03}")));
    if new_spec.vocab_size != old_spec.vocab_size {
        new_vocab.shuffle(&mut rng_for(seed, "lift.vocab"));
    }
    let new_row: HashMap<&str, usize> = new_vocab.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
    let lifted = &old.embedding * &g;
    let mut fresh = rng_for(seed, "lift.embedding");
    let mut new_embedding = gaussian(new_spec.vocab_size, d_n, &mut fresh);
    for (i, tok) in old_vocab.iter().enumerate() {
        new_embedding.set_row(new_row[tok.as_str()], &lifted.row(i));
    }
    let new = ModelWeights {
        spec: new_spec.clone(),
        embedding: new_embedding,
        layers: new_layers,
    };

    let mut adapter = AdapterBundle::new(ADAPTER_RANK, ADAPTER_ALPHA);
    let normal = Normal::new(0.0, ADAPTER_STD).expect("valid std");
    for i in 0..old_spec.n_layers {
        for m in Module::ALL {
            let (d_in, d_out) = old_spec.module_shape(m);
            let factor = |side: &str, rows: usize, cols: usize| {
                let mut rng = rng_for(seed, &format!("adapter.layers.{i}.{}.{side}", m.name()));
                Matrix::from_fn(rows, cols, |_, _| normal.sample(&mut rng) as f32 as f64)
            };
            let a = factor("a", ADAPTER_RANK, d_in);
            let b = factor("b", d_out, ADAPTER_RANK);
            adapter.entries.insert((i, m), LoraPair { a, b });
        }
    }

    let scenario = Scenario {
        kind,
        seed,
        old_spec,
        new_spec,
        ground_truth: GroundTruth {
            layer_pairs: layer_map.iter().copied().enumerate().collect(),
            head_permutation: head_map,
            planted_w_h: g,
        },
    };
    Fixture {
        old,
        new,
        adapter,
        scenario,
        old_vocab,
        new_vocab,
        lift,
    }
}

/// File names written by [`Fixture::save`].
pub mod files {
    pub const OLD_WEIGHTS: &str = "old.safetensors";
    pub const OLD_MANIFEST: &str = "old_manifest.json";
    pub const NEW_WEIGHTS: &str = "new.safetensors";
    pub const NEW_MANIFEST: &str = "new_manifest.json";
    pub const ADAPTER: &str = "adapter.safetensors";
    pub const OLD_VOCAB: &str = "old_vocab.json";
    pub const NEW_VOCAB: &str = "new_vocab.json";
    pub const OLD_ACTIVATIONS: &str = "old_activations.safetensors";
    pub const NEW_ACTIVATIONS: &str = "new_activations.safetensors";
    pub const SCENARIO: &str = "scenario.json";
}

impl Fixture {
    /// `m·k` calibration sequences over tokens both vocabularies share, as
    /// (old ids, new ids, corpus id).
    pub fn calibration(&self, m: usize, k: usize) -> (Vec<Vec<usize>>, Vec<Vec<usize>>, String) {
        let new_row: HashMap<&str, usize> = self.new_vocab.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
        let shared: Vec<usize> = self
            .old_vocab
            .iter()
            .enumerate()
            .filter(|(_, t)| new_row.contains_key(t.as_str()))
            .map(|(i, _)| i)
            .collect();
        let mut rng = rng_for(self.scenario.seed, "calibration");
        let old_ids: Vec<Vec<usize>> = (0..m * k)
            .map(|_| (0..SEQ_LEN).map(|_| shared[rng.gen_range(0..shared.len())]).collect())
            .collect();
        let new_ids = old_ids
            .iter()
            .map(|seq| seq.iter().map(|&t| new_row[self.old_vocab[t].as_str()]).collect())
            .collect();
        let id = corpus_id(&old_ids);
        (old_ids, new_ids, id)
    }

    /// Captures both models on the same calibration strings.
    pub fn capture(&self, m: usize, k: usize) -> Result<(ActivationSet, ActivationSet)> {
        let (old_ids, new_ids, id) = self.calibration(m, k);
        let (a, b) = rayon::join(
            || forward_capture_tagged(&self.old, &old_ids, m, k, &id),
            || forward_capture_tagged(&self.new, &new_ids, m, k, &id),
        );
        Ok((a?, b?))
    }

    /// Writes weights, manifests, adapter, vocabularies, default captures and
    /// the scenario description into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let storage = StorageOrientation::default();
        save_model(&self.old, &dir.join(files::OLD_WEIGHTS), &dir.join(files::OLD_MANIFEST), storage)?;
        save_model(&self.new, &dir.join(files::NEW_WEIGHTS), &dir.join(files::NEW_MANIFEST), storage)?;
        save_adapter(&self.adapter, &dir.join(files::ADAPTER))?;
        save_vocab(&dir.join(files::OLD_VOCAB), &self.old_vocab)?;
        save_vocab(&dir.join(files::NEW_VOCAB), &self.new_vocab)?;
        let (a, b) = self.capture(CAPTURE_ROWS, CAPTURE_BATCHES)?;
        save_activations(&a, &dir.join(files::OLD_ACTIVATIONS))?;
        save_activations(&b, &dir.join(files::NEW_ACTIVATIONS))?;
        write_json(&dir.join(files::SCENARIO), &self.scenario)
    }
}
