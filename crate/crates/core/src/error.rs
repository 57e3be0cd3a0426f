use thiserror::Error;

/// Errors raised by the Bridge regression engine.
#[derive(Debug, Error)]
pub enum BridgeError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("SURE could not be evaluated at any grid point (failed nu: {failed:?})")]
    AllDegenerate { failed: Vec<f64> },

    #[error("replicate {index}: {source}")]
    Replicate {
        index: usize,
        #[source]
        source: Box<BridgeError>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl BridgeError {
    /// Process exit code: 3 for numerical failures, 2 for everything the
    /// caller can fix by changing inputs.
    pub fn exit_code(&self) -> i32 {
        match self {
            BridgeError::Numerical(_) | BridgeError::AllDegenerate { .. } => 3,
            BridgeError::Replicate { source, .. } => source.exit_code(),
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, BridgeError>;

pub(crate) fn invalid(msg: impl Into<String>) -> BridgeError {
    BridgeError::InvalidParameter(msg.into())
}

pub(crate) fn mismatch(msg: impl Into<String>) -> BridgeError {
    BridgeError::DimensionMismatch(msg.into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(invalid("x").exit_code(), 2);
        assert_eq!(BridgeError::Data("x".into()).exit_code(), 2);
        assert_eq!(BridgeError::Numerical("x".into()).exit_code(), 3);
        assert_eq!(BridgeError::AllDegenerate { failed: vec![1.0] }.exit_code(), 3);
        let wrapped = BridgeError::Replicate {
            index: 4,
            source: Box::new(BridgeError::Numerical("x".into())),
        };
        assert_eq!(wrapped.exit_code(), 3);
        assert!(wrapped.to_string().contains("replicate 4"));
    }
}
