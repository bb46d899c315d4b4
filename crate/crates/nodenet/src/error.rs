use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("payload checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum { stored: u32, computed: u32 },

    #[error("malformed payload: {0}")]
    Malformed(String),

    #[error("malformed envelope: {0}")]
    MalformedEnvelope(String),

    #[error("envelope failed authentication")]
    Authentication,

    #[error("decrypted payload does not match its embedded hash")]
    HashMismatch,

    #[error("crypto: {0}")]
    Crypto(String),

    #[error("envelope of {size} bytes exceeds backlog capacity of {capacity} bytes")]
    Oversized { size: usize, capacity: usize },

    #[error("gain adjustment of {0} dB is outside ±20 dB")]
    GainOutOfRange(f64),

    #[error("transport: {0}")]
    Transport(String),

    #[error("protocol: {0}")]
    Protocol(String),

    #[error("node has no server key yet")]
    NoServerKey,

    #[error(transparent)]
    Core(#[from] acslm_core::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<rsa::Error> for Error {
    fn from(e: rsa::Error) -> Self {
        Error::Crypto(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
