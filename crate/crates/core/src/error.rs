use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension mismatch between interacting values.
    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    Shape {
        context: &'static str,
        expected: String,
        found: String,
    },

    /// An argument was structurally valid but outside the accepted range.
    #[error("invalid parameter {name}: {reason}")]
    InvalidParam { name: &'static str, reason: String },

    /// Not enough samples to perform the requested operation.
    #[error("insufficient data for {context}: need {need}, have {have}")]
    InsufficientData {
        context: &'static str,
        need: usize,
        have: usize,
    },

    /// A numeric computation produced a non-finite or otherwise unusable value.
    #[error("numeric failure in {context}: {reason}")]
    Numeric { context: &'static str, reason: String },

    /// A matrix that must be invertible/positive definite was not.
    #[error("singular or non positive definite matrix in {context}")]
    Singular { context: &'static str },

    /// Operation requested in a state that does not support it.
    #[error("invalid state: {0}")]
    State(String),

    /// Structured input (checkpoint, CSV, report) violated its schema.
    #[error("schema violation in {context}: {reason}")]
    Schema { context: &'static str, reason: String },

    /// A text field failed to parse.
    #[error("parse error at {location}: {reason}")]
    Parse { location: String, reason: String },

    /// Ground truth for a masked sample was requested outside the audited path.
    #[error("taint violation: {0}")]
    Taint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(context: &'static str, expected: impl Into<String>, found: impl Into<String>) -> Self {
        Error::Shape {
            context,
            expected: expected.into(),
            found: found.into(),
        }
    }

    pub fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParam {
            name,
            reason: reason.into(),
        }
    }

    pub fn numeric(context: &'static str, reason: impl Into<String>) -> Self {
        Error::Numeric {
            context,
            reason: reason.into(),
        }
    }

    pub fn schema(context: &'static str, reason: impl Into<String>) -> Self {
        Error::Schema {
            context,
            reason: reason.into(),
        }
    }

    /// Process exit code for the CLI: 2 usage, 3 schema/parse, 4 numeric/domain.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Schema { .. } | Error::Parse { .. } | Error::Json(_) => 3,
            Error::Numeric { .. } | Error::Singular { .. } | Error::Taint(_) => 4,
            Error::Io(_) => 1,
            _ => 2,
        }
    }
}

/// Require a finite float, mapping NaN/inf to a numeric error.
pub fn ensure_finite(value: f64, context: &'static str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::numeric(context, format!("non-finite value {value}")))
    }
}

pub fn ensure_all_finite(values: &[f64], context: &'static str) -> Result<()> {
    for (i, v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::numeric(context, format!("non-finite value {v} at index {i}")));
        }
    }
    Ok(())
}
