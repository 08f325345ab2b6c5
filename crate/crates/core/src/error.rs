use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config parse error at line {line}, column {column}: {message}")]
    ConfigParse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid config: `{field}` {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("unknown model `{name}` (available: {available})")]
    UnknownModel { name: String, available: String },

    #[error("assembly error on line {line}: {message}")]
    Assembly { line: usize, message: String },

    #[error("packet field `{field}` out of range: {value}")]
    PacketField { field: &'static str, value: u64 },

    #[error("translation error: {0}")]
    Translate(String),

    #[error("illegal DRAM command on bank {bank}: {reason}")]
    IllegalCommand { bank: usize, reason: String },

    #[error("transfer rejected: {0}")]
    Transfer(String),

    #[error("SRAM tile of {bytes} bytes exceeds bank capacity of {capacity} bytes; split into at least {splits} tiles")]
    TileTooLarge {
        bytes: u64,
        capacity: u64,
        splits: u64,
    },

    #[error("SRAM compute requested without resident weights on bank {0}")]
    NotResident(usize),

    #[error("capacity exceeded: need {required} bytes per bank, have {available} (short by {shortfall})")]
    Capacity {
        required: u64,
        available: u64,
        shortfall: u64,
    },

    #[error("NoC deadlock watchdog fired at cycle {cycle} with {in_flight} flits in flight")]
    Deadlock { cycle: u64, in_flight: usize },

    #[error("kernel error: {0}")]
    Kernel(String),

    #[error("collective error: {0}")]
    Collective(String),

    #[error("unknown figure `{name}` (available: {available})")]
    UnknownFigure { name: String, available: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::InvalidConfig {
        field: field.into(),
        reason: reason.into(),
    }
}
