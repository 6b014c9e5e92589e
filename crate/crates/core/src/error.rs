use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("degenerate corpus: {distinct} distinct frames for {k} centroids")]
    DegenerateCorpus { distinct: usize, k: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("token {token} outside vocabulary of size {vocab}")]
    Vocab { token: usize, vocab: usize },
    #[error("sequence of length {len} exceeds limit {max}")]
    Length { len: usize, max: usize },
    #[error("mask selects no positions")]
    NoMaskedPositions,
    #[error("invalid mask: {0}")]
    Mask(String),
    #[error("transcript of {needed} frames cannot align to {available} frames")]
    InfeasibleAlignment { needed: usize, available: usize },
    #[error("label out of range: {0}")]
    Label(String),
    #[error("unpaired batch: {0}")]
    Pairing(String),
    #[error("teacher validation accuracy {accuracy:.4} below required {required:.4}")]
    TeacherQuality { accuracy: f64, required: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("malformed file: {0}")]
    Format(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("missing dependency `{name}` (expected at {path})")]
    MissingDependency { name: String, path: PathBuf },
    #[error("augmentation invoked on an evaluation path")]
    AugmentationInEval,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
