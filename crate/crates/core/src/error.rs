use thiserror::Error;

/// Errors raised by the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("IDX format error at byte offset {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("numeric divergence at local step {step}{}", location(*.device, *.round))]
    Divergence {
        step: usize,
        device: Option<usize>,
        round: Option<usize>,
    },

    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn location(device: Option<usize>, round: Option<usize>) -> String {
    let mut s = String::new();
    if let Some(d) = device {
        s.push_str(&format!(" on device {d}"));
    }
    if let Some(r) = round {
        s.push_str(&format!(" in round {r}"));
    }
    s
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: msg.into(),
        }
    }

    /// Attaches device and round context to a divergence error.
    pub fn at_device(self, device_id: usize, round_idx: usize) -> Self {
        match self {
            Error::Divergence { step, .. } => Error::Divergence {
                step,
                device: Some(device_id),
                round: Some(round_idx),
            },
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
