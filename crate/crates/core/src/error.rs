use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("sample rate {rate} Hz is not supported (need at least {min} Hz)")]
    UnsupportedRate { rate: u32, min: u32 },

    #[error("sample rate mismatch: buffer at {buffer} Hz, filter designed for {filter} Hz")]
    RateMismatch { buffer: u32, filter: u32 },

    #[error("buffer is empty")]
    EmptyBuffer,

    #[error("invalid sample buffer: {0}")]
    InvalidBuffer(String),

    #[error("calibration reference too short: {got_s:.3} s, need at least {need_s:.3} s")]
    ReferenceTooShort { got_s: f64, need_s: f64 },

    #[error(
        "calibration reference unstable: plateau std {plateau_std_db:.3} dB, \
         {tone_fraction:.3} of energy near the reference frequency"
    )]
    UnstableReference {
        plateau_std_db: f64,
        tone_fraction: f64,
    },

    #[error("invalid magnitude response: {0}")]
    InvalidResponse(String),

    #[error("responses do not share a frequency range")]
    DisjointGrids,

    #[error("at least {need} responses are required, got {got}")]
    TooFewResponses { need: usize, got: usize },

    #[error("taper band {0:?} is not covered by the response grid")]
    TaperOutsideGrid([f64; 4]),

    #[error("filter length {got} is below the minimum of {min} taps")]
    TooFewTaps { got: usize, min: usize },

    #[error(
        "designed filter misses its target by {achieved_error_db:.3} dB at {worst_freq_hz:.1} Hz \
         (limit {limit_db:.2} dB)"
    )]
    FlatnessNotMet {
        achieved_error_db: f64,
        worst_freq_hz: f64,
        limit_db: f64,
    },

    #[error("invalid sweep parameters: {0}")]
    InvalidSweep(String),

    #[error("invalid stimulus: {0}")]
    InvalidStimulus(String),

    #[error("invalid tolerance: {0}")]
    InvalidTolerance(String),

    #[error("pipeline '{0}' is not calibrated")]
    Uncalibrated(String),

    #[error("pipeline '{0}' has no max-hold detector")]
    MissingMaxHold(String),

    #[error("pipeline '{0}' has no noise model")]
    MissingNoiseModel(String),

    #[error("time histories need at least 2 common readings, got {0}")]
    HistoryTooShort(usize),

    #[error("invalid filter file: {0}")]
    InvalidFilterFile(String),

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
