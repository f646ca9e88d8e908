use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("time {t:e} s outside trace span [{start:e}, {end:e}] s")]
    OutOfRange { t: f64, start: f64, end: f64 },

    #[error("integrator blow-up: |a_{mode}| = {magnitude:e} at t = {time:e} s exceeds cap")]
    BlowUp { mode: i64, time: f64, magnitude: f64 },

    #[error("non-finite amplitude in mode {mode} at t = {time:e} s")]
    NotFinite { mode: i64, time: f64 },

    #[error("no field: mean intensity is zero")]
    NoField,

    #[error("insufficient signal: corrected variances ({vx:.3e}, {vy:.3e}) at or below floor {floor:.3e}")]
    InsufficientSignal { vx: f64, vy: f64, floor: f64 },

    #[error("delay grid too coarse: step {step:e} s, must be below {max:e} s")]
    GridTooCoarse { step: f64, max: f64 },

    #[error("non-uniform delay grid")]
    NonUniformGrid,

    #[error("empty frequency band [{lo:e}, {hi:e}] Hz")]
    EmptyBand { lo: f64, hi: f64 },

    #[error("every pulse pair mixes ON and OFF modulation states")]
    AllPairsMixed,

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidParameter(_) => 2,
            Error::Io(_) | Error::Format(_) => 4,
            _ => 3,
        }
    }
}
