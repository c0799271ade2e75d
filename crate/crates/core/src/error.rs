use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("row {row} is not unit-norm (norm = {norm})")]
    NotUnitNorm { row: usize, norm: f64 },

    #[error("all-zero representation: leading singular value is 0")]
    ZeroRepresentation,

    #[error("gram matrix is not positive semidefinite (eigenvalue {0:e})")]
    NotPsd(f64),

    #[error("symmetric eigensolver did not converge after {0} sweeps")]
    NoConvergence(usize),

    #[error("degenerate spectrum around mode {mode} (gap {gap:e}); jitter the representation and retry")]
    DegenerateSpectrum { mode: usize, gap: f64 },

    #[error("normalization of modality {modality} failed: pre-norm {norm:e} is below 1e-12")]
    Normalization { modality: usize, norm: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("degenerate teacher segment: branch {branch} moved {moved:e} (squared)")]
    DegenerateSegment { branch: usize, moved: f64 },

    #[error("format error: {0}")]
    Format(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },

    #[error("checksum mismatch in {section}: stored {stored:08x}, computed {computed:08x}")]
    Checksum {
        section: String,
        stored: u32,
        computed: u32,
    },

    #[error("truncated file: expected {expected} more bytes at offset {offset}, found {found}")]
    Truncated {
        offset: usize,
        expected: usize,
        found: usize,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}
