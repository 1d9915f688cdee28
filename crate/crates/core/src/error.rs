use std::fmt;
use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad classes of failure, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed archive {path}: {detail}")]
    Archive { path: PathBuf, detail: String },
    #[error("malformed json {path}: {detail}")]
    Json { path: PathBuf, detail: String },
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor `{name}` contains a non-finite value at flat index {index}")]
    NonFinite { name: String, index: usize },
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("LoRA factor `{0}` has no matching partner")]
    OrphanFactor(String),
    #[error("adapter rank mismatch at `{name}`: expected {expected}, found {found}")]
    RankMismatch {
        name: String,
        expected: usize,
        found: usize,
    },
    #[error("adapter bundle has no entries")]
    EmptyBundle,
    #[error("activation set: {0}")]
    Activations(String),
    #[error("{op}: dimension mismatch ({detail})")]
    DimMismatch { op: &'static str, detail: String },
    #[error("vocabulary: {0}")]
    Vocabulary(String),
    #[error("vocabularies share no tokens")]
    EmptyIntersection,
    #[error(
        "only {shared} shared vocabulary rows for hidden size {needed}; the embedding system is \
         underdetermined, use a larger shared vocabulary"
    )]
    Underdetermined { shared: usize, needed: usize },
    #[error("HSIC estimator needs at least 4 samples, got {0}")]
    TooFewSamples(usize),
    #[error("similarity undefined: {0}")]
    UndefinedSimilarity(String),
    #[error("similarity entry ({row}, {col}) = {value} outside the admissible range")]
    SimilarityRange { row: usize, col: usize, value: f64 },
    #[error("layer mapping infeasible: {0}")]
    InfeasibleMapping(String),
    #[error("{what}: length {len} is not divisible by {parts}")]
    NotDivisible {
        what: &'static str,
        len: usize,
        parts: usize,
    },
    #[error("rank {rank} invalid for a {rows}x{cols} matrix")]
    InvalidRank { rank: usize, rows: usize, cols: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{coords}: {source}")]
    At {
        coords: Coords,
        #[source]
        source: Box<Error>,
    },
}

/// Location inside a transplant where an error happened.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Coords {
    pub layer: Option<usize>,
    pub module: Option<String>,
    pub head: Option<usize>,
}

impl fmt::Display for Coords {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if let Some(l) = self.layer {
            parts.push(format!("layer {l}"));
        }
        if let Some(m) = &self.module {
            parts.push(format!("module {m}"));
        }
        if let Some(h) = self.head {
            parts.push(format!("head {h}"));
        }
        if parts.is_empty() {
            f.write_str("<pipeline>")
        } else {
            f.write_str(&parts.join(", "))
        }
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn dims(op: &'static str, detail: impl Into<String>) -> Self {
        Error::DimMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub fn at(self, coords: Coords) -> Self {
        Error::At {
            coords,
            source: Box::new(self),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidConfig(_) => ErrorClass::Usage,
            Error::TooFewSamples(_)
            | Error::UndefinedSimilarity(_)
            | Error::SimilarityRange { .. }
            | Error::Underdetermined { .. }
            | Error::InfeasibleMapping(_)
            | Error::Numeric(_) => ErrorClass::Numeric,
            Error::At { source, .. } => source.class(),
            _ => ErrorClass::Data,
        }
    }
}
