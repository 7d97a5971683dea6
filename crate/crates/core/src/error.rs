use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised while reading or writing `.csit` sample files.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum DataError {
    #[error("bad magic {0:?}, expected \"CSIT\"")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    BadVersion(u16),
    #[error("sample {sample}: extent mismatch ({detail})")]
    ExtentMismatch { sample: usize, detail: String },
    #[error("truncated payload: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("sample {sample}: {count} labels exceed maximum occupancy {max}")]
    OccupancyExceeded {
        sample: usize,
        count: usize,
        max: usize,
    },
    #[error("sample {sample}: activity id {id} outside 1..={n_act}")]
    InvalidActivity { sample: usize, id: u8, n_act: u8 },
    #[error("trailing bytes after last sample: {0}")]
    TrailingBytes(usize),
}

/// Errors raised by the edge/cloud token protocol.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("bad frame magic {0:?}, expected \"AMTK\"")]
    BadMagic([u8; 4]),
    #[error("unsupported frame version {0}")]
    BadVersion(u16),
    #[error("payload length {got} does not match header (expected {expected})")]
    PayloadLength { expected: usize, got: usize },
    #[error("CRC mismatch: frame carries {carried:#010x}, payload hashes to {computed:#010x}")]
    CrcMismatch { carried: u32, computed: u32 },
    #[error("frame geometry (len {len}, layers {layers}, log2K {log2k}) disagrees with deployment (len {exp_len}, layers {exp_layers}, log2K {exp_log2k})")]
    Geometry {
        len: usize,
        layers: usize,
        log2k: u8,
        exp_len: usize,
        exp_layers: usize,
        exp_log2k: u8,
    },
    #[error("index {index} outside codebook of size {size} (layer {layer}, position {position})")]
    IndexOutOfRange {
        layer: usize,
        position: usize,
        index: usize,
        size: usize,
    },
    #[error("codebook size {0} is not a power of two")]
    NotPowerOfTwo(usize),
    #[error("stream closed mid-frame after {got} of {expected} bytes")]
    PartialFrame { got: usize, expected: usize },
    #[error("malformed prediction record: {0}")]
    BadRecord(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("data error: {0}")]
    Data(#[from] DataError),
    #[error("protocol error: {0}")]
    Protocol(#[from] ProtocolError),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Invalid(_) | Error::Shape { .. } | Error::Checkpoint(_) => 2,
            Error::Data(_) | Error::Io(_) => 3,
            Error::Protocol(_) | Error::Transport(_) => 4,
            Error::Numeric(_) => 5,
        }
    }
}
