use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{read_archive, read_json, write_archive, write_json, Archive};
use crate::{Error, Matrix, Result};

/// A LoRA target projection inside a transformer block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Module {
    Q,
    K,
    V,
    O,
    Up,
    Down,
}

impl Module {
    pub const ALL: [Module; 6] = [
        Module::Q,
        Module::K,
        Module::V,
        Module::O,
        Module::Up,
        Module::Down,
    ];
    pub const ATTENTION: [Module; 4] = [Module::Q, Module::K, Module::V, Module::O];

    pub fn name(self) -> &'static str {
        match self {
            Module::Q => "q",
            Module::K => "k",
            Module::V => "v",
            Module::O => "o",
            Module::Up => "up",
            Module::Down => "down",
        }
    }

    pub fn is_attention(self) -> bool {
        !matches!(self, Module::Up | Module::Down)
    }
}

impl fmt::Display for Module {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Module {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Module::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown target module `{s}`")))
    }
}

/// One low-rank factor pair. `a` is `r x d_in`, `b` is `d_out x r`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    pub a: Matrix,
    pub b: Matrix,
}

impl LoraPair {
    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    /// The weight update `(B·A)ᵀ`, shaped `d_in x d_out` so it adds directly to
    /// a projection stored in `y = x·W` orientation.
    pub fn delta(&self) -> Matrix {
        (&self.b * &self.a).transpose()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterBundle {
    pub rank: usize,
    pub alpha: f64,
    pub entries: BTreeMap<(usize, Module), LoraPair>,
}

impl AdapterBundle {
    pub fn new(rank: usize, alpha: f64) -> Self {
        AdapterBundle {
            rank,
            alpha,
            entries: BTreeMap::new(),
        }
    }

    pub fn target_modules(&self) -> Vec<Module> {
        let mut mods: Vec<Module> = self.entries.keys().map(|(_, m)| *m).collect();
        mods.sort();
        mods.dedup();
        mods
    }

    pub fn layers(&self) -> Vec<usize> {
        let mut layers: Vec<usize> = self.entries.keys().map(|(l, _)| *l).collect();
        layers.dedup();
        layers
    }

    pub fn validate(&self) -> Result<()> {
        for (&(layer, module), pair) in &self.entries {
            let name = key_prefix(layer, module);
            if pair.a.nrows() != self.rank {
                return Err(Error::RankMismatch {
                    name: format!("{name}.lora_A"),
                    expected: self.rank,
                    found: pair.a.nrows(),
                });
            }
            if pair.b.ncols() != self.rank {
                return Err(Error::RankMismatch {
                    name: format!("{name}.lora_B"),
                    expected: self.rank,
                    found: pair.b.ncols(),
                });
            }
            let (d_in, d_out) = (pair.a.ncols(), pair.b.nrows());
            if self.rank == 0 || self.rank > d_in.min(d_out) {
                return Err(Error::InvalidRank {
                    rank: self.rank,
                    rows: d_out,
                    cols: d_in,
                });
            }
        }
        Ok(())
    }
}

/// Adapter metadata stored next to the archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterSidecar {
    pub rank: usize,
    pub alpha: f64,
    #[serde(default)]
    pub target_modules: Vec<Module>,
}

/// `adapter.safetensors` keeps its rank/alpha in `adapter.json`.
pub fn sidecar_path(archive_path: &Path) -> PathBuf {
    archive_path.with_extension("json")
}

fn key_prefix(layer: usize, module: Module) -> String {
    format!("layers.{layer}.{}", module.name())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Factor {
    A,
    B,
}

fn parse_key(key: &str) -> Option<(usize, Module, Factor)> {
    let rest = key.strip_prefix("layers.")?;
    let mut parts = rest.split('.');
    let layer = parts.next()?.parse().ok()?;
    let module = parts.next()?.parse().ok()?;
    let factor = match parts.next()? {
        "lora_A" => Factor::A,
        "lora_B" => Factor::B,
        _ => return None,
    };
    parts.next().is_none().then_some((layer, module, factor))
}

pub(crate) fn adapter_from_archive(archive: &Archive, sidecar: &AdapterSidecar) -> Result<AdapterBundle> {
    let mut halves: BTreeMap<(usize, Module), (Option<Matrix>, Option<Matrix>)> = BTreeMap::new();
    for name in archive.tensors.keys() {
        let (layer, module, factor) = parse_key(name).ok_or_else(|| Error::Archive {
            path: PathBuf::new(),
            detail: format!("unrecognized adapter tensor key `{name}`"),
        })?;
        let m = archive.matrix(name)?;
        let slot = halves.entry((layer, module)).or_default();
        match factor {
            Factor::A => slot.0 = Some(m),
            Factor::B => slot.1 = Some(m),
        }
    }
    let mut bundle = AdapterBundle::new(sidecar.rank, sidecar.alpha);
    for ((layer, module), (a, b)) in halves {
        let prefix = key_prefix(layer, module);
        let (a, b) = match (a, b) {
            (Some(a), Some(b)) => (a, b),
            (Some(_), None) => return Err(Error::OrphanFactor(format!("{prefix}.lora_A"))),
            (None, Some(_)) => return Err(Error::OrphanFactor(format!("{prefix}.lora_B"))),
            (None, None) => unreachable!("entry created only when a factor exists"),
        };
        bundle.entries.insert((layer, module), LoraPair { a, b });
    }
    bundle.validate()?;
    Ok(bundle)
}

pub(crate) fn adapter_to_archive(bundle: &AdapterBundle) -> Archive {
    let mut archive = Archive::default();
    for (&(layer, module), pair) in &bundle.entries {
        let prefix = key_prefix(layer, module);
        archive.insert_matrix(format!("{prefix}.lora_A"), &pair.a);
        archive.insert_matrix(format!("{prefix}.lora_B"), &pair.b);
    }
    archive
}

/// Loads an adapter archive and its sidecar (see [`sidecar_path`]).
pub fn load_adapter(path: &Path) -> Result<AdapterBundle> {
    let sidecar: AdapterSidecar = read_json(&sidecar_path(path))?;
    let archive = read_archive(path)?;
    adapter_from_archive(&archive, &sidecar)
}

pub fn save_adapter(bundle: &AdapterBundle, path: &Path) -> Result<()> {
    if bundle.entries.is_empty() {
        return Err(Error::EmptyBundle);
    }
    bundle.validate()?;
    write_archive(path, &adapter_to_archive(bundle))?;
    write_json(
        &sidecar_path(path),
        &AdapterSidecar {
            rank: bundle.rank,
            alpha: bundle.alpha,
            target_modules: bundle.target_modules(),
        },
    )
}
