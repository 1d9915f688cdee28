use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_archive, read_json, write_archive, write_json, Archive, Module};
use crate::{Error, Matrix, Result};

/// Architectural description of one model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub intermediate_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("hidden_size", self.hidden_size),
            ("intermediate_size", self.intermediate_size),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("head_dim", self.head_dim),
        ];
        if let Some((field, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidSpec(format!("{field} must be at least 1")));
        }
        if self.n_heads * self.head_dim != self.hidden_size {
            return Err(Error::InvalidSpec(format!(
                "hidden_size {} != n_heads {} x head_dim {}",
                self.hidden_size, self.n_heads, self.head_dim
            )));
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return Err(Error::InvalidSpec(format!(
                "n_kv_heads {} does not divide n_heads {}",
                self.n_kv_heads, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn is_gqa(&self) -> bool {
        self.n_kv_heads < self.n_heads
    }

    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    /// (input dim, output dim) of a projection in `y = x·W` orientation.
    pub fn module_shape(&self, module: Module) -> (usize, usize) {
        let d = self.hidden_size;
        match module {
            Module::Q => (d, self.n_heads * self.head_dim),
            Module::K | Module::V => (d, self.kv_width()),
            Module::O => (self.n_heads * self.head_dim, d),
            Module::Up => (d, self.intermediate_size),
            Module::Down => (self.intermediate_size, d),
        }
    }
}

/// How a tensor family is laid out on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// `input_dim x output_dim`, so that `y = x·W`.
    #[default]
    InOut,
    /// `output_dim x input_dim`, the `torch.nn.Linear` layout.
    OutIn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StorageOrientation {
    #[serde(default)]
    pub attention: Orientation,
    #[serde(default)]
    pub mlp: Orientation,
}

impl StorageOrientation {
    pub fn for_module(&self, module: Module) -> Orientation {
        if module.is_attention() {
            self.attention
        } else {
            self.mlp
        }
    }
}

/// JSON manifest that accompanies a weight archive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(flatten)]
    pub spec: ModelSpec,
    #[serde(default)]
    pub storage_orientation: StorageOrientation,
}

/// Projection weights of one transformer block, all in `input x output`
/// orientation.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub o: Matrix,
    pub up: Matrix,
    pub down: Matrix,
}

impl LayerWeights {
    pub fn get(&self, module: Module) -> &Matrix {
        match module {
            Module::Q => &self.q,
            Module::K => &self.k,
            Module::V => &self.v,
            Module::O => &self.o,
            Module::Up => &self.up,
            Module::Down => &self.down,
        }
    }

    pub fn get_mut(&mut self, module: Module) -> &mut Matrix {
        match module {
            Module::Q => &mut self.q,
            Module::K => &mut self.k,
            Module::V => &mut self.v,
            Module::O => &mut self.o,
            Module::Up => &mut self.up,
            Module::Down => &mut self.down,
        }
    }

    pub fn zeros(spec: &ModelSpec) -> Self {
        let z = |m: Module| {
            let (r, c) = spec.module_shape(m);
            Matrix::zeros(r, c)
        };
        LayerWeights {
            q: z(Module::Q),
            k: z(Module::K),
            v: z(Module::V),
            o: z(Module::O),
            up: z(Module::Up),
            down: z(Module::Down),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub spec: ModelSpec,
    /// `vocab_size x hidden_size`, one row per token.
    pub embedding: Matrix,
    pub layers: Vec<LayerWeights>,
}

impl ModelWeights {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let check = |name: String, m: &Matrix, (r, c): (usize, usize)| {
            if m.shape() != (r, c) {
                return Err(Error::ShapeMismatch {
                    name,
                    expected: vec![r, c],
                    found: vec![m.nrows(), m.ncols()],
                });
            }
            Ok(())
        };
        check(
            "embedding".into(),
            &self.embedding,
            (self.spec.vocab_size, self.spec.hidden_size),
        )?;
        if self.layers.len() != self.spec.n_layers {
            return Err(Error::InvalidSpec(format!(
                "spec declares {} layers, weights have {}",
                self.spec.n_layers,
                self.layers.len()
            )));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            for module in Module::ALL {
                check(
                    tensor_key(i, module),
                    layer.get(module),
                    self.spec.module_shape(module),
                )?;
            }
        }
        Ok(())
    }

    pub fn matrix_count(&self) -> usize {
        1 + self.layers.len() * Module::ALL.len()
    }
}

pub(crate) fn tensor_key(layer: usize, module: Module) -> String {
    format!("layers.{layer}.{}", module.name())
}

/// Loads a weight archive and its manifest, normalizing every projection to
/// `input x output` orientation.
pub fn load_model(weights_path: &Path, manifest_path: &Path) -> Result<ModelWeights> {
    let manifest: Manifest = read_json(manifest_path)?;
    manifest.spec.validate()?;
    let archive = read_archive(weights_path)?;
    model_from_archive(&archive, &manifest)
}

pub(crate) fn model_from_archive(archive: &Archive, manifest: &Manifest) -> Result<ModelWeights> {
    let spec = &manifest.spec;
    let fetch = |name: &str, (r, c): (usize, usize), orient: Orientation| -> Result<Matrix> {
        let raw = archive
            .tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        let stored = match orient {
            Orientation::InOut => vec![r, c],
            Orientation::OutIn => vec![c, r],
        };
        if raw.shape != stored {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                expected: stored,
                found: raw.shape.clone(),
            });
        }
        let m = raw.to_matrix(name)?;
        Ok(match orient {
            Orientation::InOut => m,
            Orientation::OutIn => m.transpose(),
        })
    };
    let embedding = fetch(
        "embedding",
        (spec.vocab_size, spec.hidden_size),
        Orientation::InOut,
    )?;
    let mut layers = Vec::with_capacity(spec.n_layers);
    for i in 0..spec.n_layers {
        let get = |module: Module| {
            fetch(
                &tensor_key(i, module),
                spec.module_shape(module),
                manifest.storage_orientation.for_module(module),
            )
        };
        layers.push(LayerWeights {
            q: get(Module::Q)?,
            k: get(Module::K)?,
            v: get(Module::V)?,
            o: get(Module::O)?,
            up: get(Module::Up)?,
            down: get(Module::Down)?,
        });
    }
    Ok(ModelWeights {
        spec: spec.clone(),
        embedding,
        layers,
    })
}

pub(crate) fn model_to_archive(weights: &ModelWeights, storage: StorageOrientation) -> Archive {
    let mut archive = Archive::default();
    archive.insert_matrix("embedding", &weights.embedding);
    for (i, layer) in weights.layers.iter().enumerate() {
        for module in Module::ALL {
            let m = layer.get(module);
            let key = tensor_key(i, module);
            match storage.for_module(module) {
                Orientation::InOut => archive.insert_matrix(key, m),
                Orientation::OutIn => archive.insert_matrix(key, &m.transpose()),
            }
        }
    }
    archive
}

/// Writes `weights` as an archive plus manifest, laying tensors out according
/// to `storage`.
pub fn save_model(
    weights: &ModelWeights,
    weights_path: &Path,
    manifest_path: &Path,
    storage: StorageOrientation,
) -> Result<()> {
    weights.validate()?;
    write_archive(weights_path, &model_to_archive(weights, storage))?;
    write_json(
        manifest_path,
        &Manifest {
            spec: weights.spec.clone(),
            storage_orientation: storage,
        },
    )
}
